use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::{ParamId, ParamStore, Tape, Var};

/// Outcome of a central-difference gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1e-8, |numeric|)` over checked coordinates.
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Up to `per_param` distinct coordinates from every parameter, seeded.
pub fn sample_coordinates(params: &ParamStore, per_param: usize, seed: u64) -> Vec<(ParamId, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = Vec::new();
    for (id, _, t) in params.iter() {
        if t.len() <= per_param {
            coords.extend((0..t.len()).map(|i| (id, i)));
        } else {
            let mut picked = Vec::with_capacity(per_param);
            while picked.len() < per_param {
                let i = rng.random_range(0..t.len());
                if !picked.contains(&i) {
                    picked.push(i);
                }
            }
            coords.extend(picked.into_iter().map(|i| (id, i)));
        }
    }
    coords
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// differences with step `eps` at the given coordinates.
pub fn finite_difference_check<F>(
    f: F,
    params: &ParamStore,
    eps: f64,
    coords: &[(ParamId, usize)],
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::with_params(params);
        let loss = f(&mut tape)?;
        tape.backward(loss)?
    };
    let eval = |p: &ParamStore| -> Result<f64> {
        let mut tape = Tape::with_params(p);
        let loss = f(&mut tape)?;
        Ok(tape.value(loss).item())
    };

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for &(id, i) in coords {
        let orig = work.get(id).data()[i];
        work.get_mut(id).data_mut()[i] = orig + eps;
        let up = eval(&work)?;
        work.get_mut(id).data_mut()[i] = orig - eps;
        let down = eval(&work)?;
        work.get_mut(id).data_mut()[i] = orig;

        let numeric = (up - down) / (2.0 * eps);
        let exact = analytic.get(id).data()[i];
        let rel = (exact - numeric).abs() / numeric.abs().max(1e-8);
        report.checked += 1;
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            if rel >= report.max_rel_error {
                report.worst = Some((params.name(id).to_string(), i));
            }
        }
    }
    Ok(report)
}
