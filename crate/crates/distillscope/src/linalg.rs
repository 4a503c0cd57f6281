//! Small dense linear solves (normal equations for probes and LIME).

use crate::error::{Error, Result};

/// Solves `a x = b` for square `a` (row-major n x n) by Gaussian
/// elimination with partial pivoting. `a` and `b` are consumed.
pub fn solve(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Result<Vec<f64>> {
    debug_assert_eq!(a.len(), n * n);
    debug_assert_eq!(b.len(), n);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| {
                a[i * n + col]
                    .abs()
                    .partial_cmp(&a[j * n + col].abs())
                    .unwrap()
            })
            .unwrap();
        if a[pivot * n + col].abs() < 1e-12 {
            return Err(Error::Singular("gaussian elimination"));
        }
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
            b.swap(col, pivot);
        }
        let diag = a[col * n + col];
        for row in col + 1..n {
            let factor = a[row * n + col] / diag;
            if factor != 0.0 {
                for k in col..n {
                    a[row * n + k] -= factor * a[col * n + k];
                }
                b[row] -= factor * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc -= a[row * n + k] * x[k];
        }
        x[row] = acc / a[row * n + row];
    }
    Ok(x)
}

/// Weighted ridge regression via normal equations:
/// minimizes sum_i w_i (y_i - x_i . beta)^2 + lambda * |beta_reg|^2.
///
/// `x` is row-major n x p. Columns listed in `unpenalized` (e.g. the
/// intercept) are excluded from the ridge penalty.
pub fn weighted_ridge(
    x: &[f64],
    y: &[f64],
    w: &[f64],
    n: usize,
    p: usize,
    lambda: f64,
    unpenalized: &[usize],
) -> Result<Vec<f64>> {
    let mut xtx = vec![0.0; p * p];
    let mut xty = vec![0.0; p];
    for i in 0..n {
        let row = &x[i * p..(i + 1) * p];
        let wi = w[i];
        for a in 0..p {
            let wa = wi * row[a];
            if wa != 0.0 {
                for b in a..p {
                    xtx[a * p + b] += wa * row[b];
                }
                xty[a] += wa * y[i];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            xtx[a * p + b] = xtx[b * p + a];
        }
        if !unpenalized.contains(&a) {
            xtx[a * p + a] += lambda;
        }
    }
    solve(xtx, xty, p)
}
