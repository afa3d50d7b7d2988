use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn store(entries: Vec<(&str, Tensor)>) -> ParamStore {
    let mut s = ParamStore::new();
    for (n, t) in entries {
        s.insert(n, t).unwrap();
    }
    s
}

fn all_coords(params: &ParamStore) -> Vec<(ParamId, usize)> {
    sample_coordinates(params, usize::MAX, 0)
}

#[test]
fn sum_gives_all_ones() {
    let params = store(vec![("p", Tensor::matrix(2, 3, vec![1., -2., 3., 0.5, 0., 7.]).unwrap())]);
    let mut tape = Tape::with_params(&params);
    let p = tape.param(ParamId(0)).unwrap();
    let loss = tape.sum(p);
    let g = tape.backward(loss).unwrap();
    assert!(g.get(ParamId(0)).data().iter().all(|&v| v == 1.0));
}

#[test]
fn half_squared_norm_gives_identity() {
    let values = vec![1.5, -2.0, 0.25, 4.0];
    let params = store(vec![("p", Tensor::matrix(1, 4, values.clone()).unwrap())]);
    let mut tape = Tape::with_params(&params);
    let p = tape.param(ParamId(0)).unwrap();
    let sq = tape.mul(p, p).unwrap();
    let s = tape.sum(sq);
    let loss = tape.scale(s, 0.5);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(ParamId(0)).data(), &values[..]);
}

#[test]
fn absent_parameters_get_zero_gradients() {
    let params = store(vec![
        ("used", Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap()),
        ("unused", Tensor::matrix(2, 2, vec![3.0; 4]).unwrap()),
    ]);
    let mut tape = Tape::with_params(&params);
    let p = tape.param(ParamId(0)).unwrap();
    let loss = tape.sum(p);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.len(), 2);
    assert_eq!(g.get(ParamId(1)).shape(), &[2, 2]);
    assert!(g.get(ParamId(1)).data().iter().all(|&v| v == 0.0));
}

#[test]
fn non_scalar_loss_is_rejected() {
    let params = store(vec![("p", Tensor::matrix(2, 2, vec![1.0; 4]).unwrap())]);
    let mut tape = Tape::with_params(&params);
    let p = tape.param(ParamId(0)).unwrap();
    let y = tape.scale(p, 2.0);
    assert!(matches!(tape.backward(y), Err(Error::NonScalarLoss(_))));
}

#[test]
fn quadratic_check_is_tight() {
    let params = store(vec![("p", Tensor::matrix(1, 5, vec![0.3, -1.1, 2.0, 0.7, -0.2]).unwrap())]);
    let coords = all_coords(&params);
    let report = finite_difference_check(
        |t| {
            let p = t.param(ParamId(0))?;
            let sq = t.mul(p, p)?;
            let s = t.sum(sq);
            Ok(t.scale(s, 0.5))
        },
        &params,
        1e-5,
        &coords,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-9, "{report:?}");
}

#[test]
fn softmax_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = store(vec![
        ("x", random_matrix(&mut rng, 3, 5)),
        ("w", random_matrix(&mut rng, 3, 5)),
    ]);
    let coords = all_coords(&params);
    let report = finite_difference_check(
        |t| {
            let x = t.param(ParamId(0))?;
            let w = t.param(ParamId(1))?;
            let y = t.softmax(x)?;
            let yw = t.mul(y, w)?;
            Ok(t.sum(yw))
        },
        &params,
        1e-5,
        &coords,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-6, "{report:?}");
}

#[test]
fn softmax_cross_entropy_toy() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params = store(vec![
        ("w", random_matrix(&mut rng, 4, 3)),
        ("b", random_matrix(&mut rng, 1, 3)),
    ]);
    let inputs = random_matrix(&mut rng, 6, 4);
    let labels = [0usize, 2, 1, 1, 0, 2];
    let coords = all_coords(&params);
    let report = finite_difference_check(
        |t| {
            let x = t.constant(inputs.clone());
            let w = t.param(ParamId(0))?;
            let b = t.param(ParamId(1))?;
            let h = t.matmul(x, w)?;
            let logits = t.add_row(h, b)?;
            let lp = t.log_softmax(logits)?;
            let mut onehot = Tensor::zeros(&[6, 3]);
            for (r, &l) in labels.iter().enumerate() {
                onehot.data_mut()[r * 3 + l] = -1.0 / 6.0;
            }
            let oh = t.constant(onehot);
            let picked = t.mul(lp, oh)?;
            Ok(t.sum(picked))
        },
        &params,
        1e-5,
        &coords,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-6, "{report:?}");
}

#[test]
fn structural_primitives_pass_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = store(vec![
        ("x", random_matrix(&mut rng, 7, 4)),
        ("g", random_matrix(&mut rng, 1, 4)),
        ("b", random_matrix(&mut rng, 1, 4)),
        ("dw", random_matrix(&mut rng, 3, 4)),
        ("table", random_matrix(&mut rng, 5, 4)),
        ("conv", random_matrix(&mut rng, 12, 4)),
        ("k", random_matrix(&mut rng, 6, 4)),
    ]);
    let weights = random_matrix(&mut rng, 4, 4);
    let coords = all_coords(&params);
    let report = finite_difference_check(
        |t| {
            let x = t.param(ParamId(0))?;
            let g = t.param(ParamId(1))?;
            let b = t.param(ParamId(2))?;
            let dw = t.param(ParamId(3))?;
            let table = t.param(ParamId(4))?;
            let conv = t.param(ParamId(5))?;
            let k = t.param(ParamId(6))?;

            let n = t.layer_norm(x, g, b)?;
            let a = t.gelu(n);
            let m = t.mask_rows(a, 5);
            let c = t.depthwise_conv(m, dw)?;
            let e = t.gather_rows(table, &[4, 1, 1])?;
            let cat = t.concat_rows(&[e, c])?; // 10 x 4
            let fs = t.frame_stack(cat, 3, 2, 1)?; // 5 x 12
            let h = t.matmul(fs, conv)?; // 5 x 4
            let s = t.matmul_nt(h, k)?; // 5 x 6
            let p = t.softmax_prefix(s, 4)?;
            let left = t.cols(p, 0, 3)?;
            let top = t.rows(h, 1, 3)?;
            let right = t.cols(top, 1, 2)?;
            let lse = t.logsumexp(right)?; // 3
            let wt = t.constant(weights.clone());
            let mixed = t.matmul(h, wt)?;
            let lsm = t.log_softmax(mixed)?;
            let joined = t.concat_cols(&[left, lsm])?;
            let tot1 = t.sum(joined);
            let tot2 = t.sum(lse);
            let add = t.add(tot1, tot2)?;
            Ok(t.scale(add, 0.7))
        },
        &params,
        1e-5,
        &coords,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-5, "{report:?}");
}

#[test]
fn mask_rows_zeroes_tail_exactly() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::matrix(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap());
    let m = tape.mask_rows(x, 1);
    assert_eq!(tape.value(m).data(), &[1., 2., 0., 0., 0., 0.]);
}

#[test]
fn frame_stack_halves_length_with_ceiling() {
    for t_in in 1..10 {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[t_in, 2]));
        let y = tape.frame_stack(x, 3, 2, 1).unwrap();
        assert_eq!(tape.value(y).rows(), t_in.div_ceil(2));
    }
}

#[test]
fn forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = random_matrix(&mut rng, 9, 16);
    let b = random_matrix(&mut rng, 16, 5);
    let run = || {
        let mut t = Tape::new();
        let x = t.constant(a.clone());
        let y = t.constant(b.clone());
        let z = t.matmul(x, y).unwrap();
        let s = t.softmax(z).unwrap();
        t.value(s).clone()
    };
    assert_eq!(run().data(), run().data());
}
