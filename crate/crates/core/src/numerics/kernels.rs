//! Dense inner loops. Fixed accumulation order keeps results bit-reproducible.

/// `c = a · b` with explicit row/column strides for both operands.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], rsa: isize, csa: isize, b: &[f64], rsb: isize, csb: isize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    // SAFETY: the strides describe in-bounds views of `a` (m×k) and `b`
    // (k×n), and `c` is a dense m×n buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

/// `c[m×n] = a[m×k] · b[k×n]`
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert!(a.len() >= m * k && b.len() >= k * n);
    gemm(m, k, n, a, k as isize, 1, b, n as isize, 1)
}

/// `c[m×n] = a[m×k] · b[n×k]ᵀ`
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert!(a.len() >= m * k && b.len() >= n * k);
    gemm(m, k, n, a, k as isize, 1, b, 1, k as isize)
}

/// `c[k×n] = a[m×k]ᵀ · b[m×n]`
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert!(a.len() >= m * k && b.len() >= m * n);
    gemm(k, m, n, a, 1, k as isize, b, n as isize, 1)
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..n {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for kk in 0..k {
                    c[i * n + j] += a[i * k + kk] * b[kk * n + j];
                }
            }
        }
        c
    }

    fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn rows_do_not_interact() {
        // Appending junk rows to `a` leaves the leading rows bit-identical.
        let (k, n) = (37, 19);
        let a: Vec<f64> = (0..5 * k).map(|i| (i as f64 * 0.7).sin()).collect();
        let mut padded = a.clone();
        padded.extend((0..11 * k).map(|i| 1e3 + i as f64));
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.3).cos()).collect();
        let short = matmul(&a, &b, 5, k, n);
        let long = matmul(&padded, &b, 16, k, n);
        assert_eq!(short[..], long[..5 * n]);
    }

    #[test]
    fn variants_agree_with_naive_product() {
        for (m, k, n) in [(3, 5, 7), (9, 6, 10), (8, 3, 8), (1, 1, 1)] {
            check(m, k, n);
        }
    }

    fn check(m: usize, k: usize, n: usize) {
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(&a, &b, m, k, n);
        let got = matmul(&a, &b, m, k, n);
        let got_nt = matmul_nt(&a, &transpose(&b, k, n), m, k, n);
        let got_tn = matmul_tn(&transpose(&a, m, k), &b, k, m, n);
        for i in 0..m * n {
            assert!((want[i] - got[i]).abs() < 1e-12);
            assert!((want[i] - got_nt[i]).abs() < 1e-12);
            assert!((want[i] - got_tn[i]).abs() < 1e-12);
        }
    }
}
