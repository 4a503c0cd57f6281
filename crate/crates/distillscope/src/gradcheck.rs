//! Central finite-difference verification of analytic gradients.
//!
//! The numeric side only ever evaluates forward passes, so it stays
//! independent of the backward implementation it checks.

use serde::Serialize;

use crate::error::Result;
use crate::tensor::Tensor;

/// Relative error with the floor used throughout the test suite:
/// |a - n| / max(|a|, |n|, 1e-8).
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Compares analytic gradients of `loss_fn` w.r.t. every element of every
/// tensor in `leaves` against central finite differences with step `h`.
///
/// `loss_fn` must rebuild the graph from the current leaf buffers on every
/// call; the leaves are perturbed in place and restored.
pub fn check_gradients(
    name: &str,
    leaves: &[Tensor<f64>],
    h: f64,
    loss_fn: impl Fn() -> Result<Tensor<f64>>,
) -> Result<GradCheckReport> {
    for leaf in leaves {
        leaf.zero_grad();
    }
    let loss = loss_fn()?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.len()]))
        .collect();

    let mut max_err = 0.0f64;
    let mut checked = 0;
    for (leaf, grads) in leaves.iter().zip(&analytic) {
        for i in 0..leaf.len() {
            let original = leaf.data()[i];
            leaf.with_data_mut(|d| d[i] = original + h);
            let plus = loss_fn()?.item();
            leaf.with_data_mut(|d| d[i] = original - h);
            let minus = loss_fn()?.item();
            leaf.with_data_mut(|d| d[i] = original);
            let numeric = (plus - minus) / (2.0 * h);
            max_err = max_err.max(rel_err(grads[i], numeric));
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        max_rel_err: max_err,
        checked,
    })
}

/// Runs `check_gradients` over every differentiable tensor operation with
/// small random 64-bit inputs and returns one report per op. Callers
/// assert `max_rel_err <= 1e-5`.
pub fn standard_suite() -> Result<Vec<GradCheckReport>> {
    use crate::tensor::rng::Rng;
    use std::rc::Rc;

    let mut rng = Rng::new(17, 0);
    let mut rand = |shape: &[usize]| -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::param(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect())
    };
    // Random positive weights make the reduction sensitive to every element.
    let mut rng_w = Rng::new(18, 0);
    let mut weight = |n: usize| -> Tensor<f64> {
        Tensor::new(&[n], (0..n).map(|_| rng_w.uniform(0.5, 1.5)).collect())
    };

    let mut reports = Vec::new();
    let h = 1e-5;

    {
        let (a, b, w) = (rand(&[2, 3]), rand(&[2, 3]), weight(6));
        reports.push(check_gradients("add", &[a.clone(), b.clone()], h, || {
            Ok(a.add(&b)?.reshape(&[6])?.mul(&w)?.sum_all())
        })?);
    }
    {
        let (a, b, w) = (rand(&[2, 3]), rand(&[2, 3]), weight(6));
        reports.push(check_gradients("sub", &[a.clone(), b.clone()], h, || {
            Ok(a.sub(&b)?.reshape(&[6])?.mul(&w)?.sum_all())
        })?);
    }
    {
        let (a, b, w) = (rand(&[2, 3]), rand(&[2, 3]), weight(6));
        reports.push(check_gradients("mul", &[a.clone(), b.clone()], h, || {
            Ok(a.mul(&b)?.reshape(&[6])?.mul(&w)?.sum_all())
        })?);
    }
    {
        let (a, b, w) = (rand(&[2, 3]), rand(&[3]), weight(6));
        reports.push(check_gradients(
            "add_broadcast",
            &[a.clone(), b.clone()],
            h,
            || Ok(a.add_broadcast(&b)?.reshape(&[6])?.mul(&w)?.sum_all()),
        )?);
    }
    {
        let (s, a, w) = (rand(&[1]), rand(&[2, 3]), weight(6));
        reports.push(check_gradients(
            "mul_scalar_tensor",
            &[s.clone(), a.clone()],
            h,
            || Ok(a.mul_scalar_tensor(&s)?.reshape(&[6])?.mul(&w)?.sum_all()),
        )?);
    }
    {
        let (a, w) = (rand(&[2, 3]), weight(6));
        reports.push(check_gradients("scale", &[a.clone()], h, || {
            Ok(a.scale(0.37).reshape(&[6])?.mul(&w)?.sum_all())
        })?);
    }
    {
        let (a, w) = (rand(&[2, 3]), weight(6));
        reports.push(check_gradients("add_scalar", &[a.clone()], h, || {
            Ok(a.add_scalar(0.91).reshape(&[6])?.mul(&w)?.sum_all())
        })?);
    }
    {
        let (a, w) = (rand(&[2, 3]), weight(6));
        reports.push(check_gradients("neg", &[a.clone()], h, || {
            Ok(a.neg().reshape(&[6])?.mul(&w)?.sum_all())
        })?);
    }
    {
        let (a, w) = (rand(&[2, 3]), weight(6));
        reports.push(check_gradients("gelu", &[a.clone()], h, || {
            Ok(a.gelu().reshape(&[6])?.mul(&w)?.sum_all())
        })?);
    }
    {
        let (a, w) = (rand(&[2, 3]), weight(6));
        reports.push(check_gradients("sigmoid", &[a.clone()], h, || {
            Ok(a.sigmoid().reshape(&[6])?.mul(&w)?.sum_all())
        })?);
    }
    {
        let (a, w) = (rand(&[2, 3]), weight(6));
        reports.push(check_gradients("exp", &[a.clone()], h, || {
            Ok(a.exp().reshape(&[6])?.mul(&w)?.sum_all())
        })?);
    }
    {
        // ln needs positive inputs; shift into [0.5, 2.5].
        let (a, w) = (rand(&[2, 3]), weight(6));
        a.with_data_mut(|d| d.iter_mut().for_each(|v| *v = 1.5 + *v));
        reports.push(check_gradients("ln", &[a.clone()], h, || {
            Ok(a.ln()?.reshape(&[6])?.mul(&w)?.sum_all())
        })?);
    }
    {
        let a = rand(&[2, 3]);
        reports.push(check_gradients("sum_all", &[a.clone()], h, || {
            Ok(a.sum_all())
        })?);
    }
    {
        let a = rand(&[2, 3]);
        reports.push(check_gradients("mean_all", &[a.clone()], h, || {
            Ok(a.mean_all())
        })?);
    }
    {
        let (a, w) = (rand(&[2, 3, 2]), weight(4));
        reports.push(check_gradients("sum_axis", &[a.clone()], h, || {
            Ok(a.sum_axis(1)?.reshape(&[4])?.mul(&w)?.sum_all())
        })?);
    }
    {
        let (a, w) = (rand(&[2, 3, 2]), weight(6));
        reports.push(check_gradients("mean_axis", &[a.clone()], h, || {
            Ok(a.mean_axis(2)?.reshape(&[6])?.mul(&w)?.sum_all())
        })?);
    }
    {
        let (a, w) = (rand(&[2, 4]), weight(8));
        reports.push(check_gradients("softmax", &[a.clone()], h, || {
            Ok(a.softmax(1)?.reshape(&[8])?.mul(&w)?.sum_all())
        })?);
    }
    {
        let (a, w) = (rand(&[2, 4]), weight(8));
        reports.push(check_gradients("log_softmax", &[a.clone()], h, || {
            Ok(a.log_softmax(1)?.reshape(&[8])?.mul(&w)?.sum_all())
        })?);
    }
    {
        let (a, b, w) = (rand(&[3, 4]), rand(&[4, 2]), weight(6));
        reports.push(check_gradients("matmul", &[a.clone(), b.clone()], h, || {
            Ok(a.matmul(&b)?.reshape(&[6])?.mul(&w)?.sum_all())
        })?);
    }
    {
        let (a, w) = (rand(&[3, 4]), weight(12));
        reports.push(check_gradients("transpose", &[a.clone()], h, || {
            Ok(a.transpose()?.reshape(&[12])?.mul(&w)?.sum_all())
        })?);
    }
    {
        let (a, w) = (rand(&[2, 6]), weight(12));
        reports.push(check_gradients("reshape", &[a.clone()], h, || {
            Ok(a.reshape(&[3, 4])?.reshape(&[12])?.mul(&w)?.sum_all())
        })?);
    }
    {
        let (a, w) = (rand(&[6]), weight(4));
        // Repeated index exercises gradient accumulation in the scatter.
        let idx = Rc::new(vec![4usize, 1, 4, 0]);
        reports.push(check_gradients("gather", &[a.clone()], h, || {
            Ok(a.gather(Rc::clone(&idx), &[4])?.mul(&w)?.sum_all())
        })?);
    }
    {
        let (a, w) = (rand(&[4, 3]), weight(6));
        reports.push(check_gradients("slice", &[a.clone()], h, || {
            Ok(a.slice(0, 1, 2)?.reshape(&[6])?.mul(&w)?.sum_all())
        })?);
    }
    {
        let (a, b, w) = (rand(&[2, 2]), rand(&[2, 3]), weight(10));
        reports.push(check_gradients("concat", &[a.clone(), b.clone()], h, || {
            Ok(Tensor::concat(&[a.clone(), b.clone()], 1)?
                .reshape(&[10])?
                .mul(&w)?
                .sum_all())
        })?);
    }
    {
        let (x, g, b, w) = (rand(&[3, 4]), rand(&[4]), rand(&[4]), weight(12));
        reports.push(check_gradients(
            "layer_norm",
            &[x.clone(), g.clone(), b.clone()],
            h,
            || Ok(x.layer_norm(&g, &b, 1e-5)?.reshape(&[12])?.mul(&w)?.sum_all()),
        )?);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rng::Rng;

    fn random_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
        Tensor::param(shape, data)
    }

    fn random_const(rng: &mut Rng, n: usize) -> Tensor<f64> {
        let data: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
        Tensor::new(&[n], data)
    }

    #[test]
    fn standard_suite_passes_for_every_op() {
        let reports = standard_suite().unwrap();
        assert!(reports.len() >= 24);
        for r in &reports {
            assert!(
                r.max_rel_err <= 1e-5,
                "op {} exceeded tolerance: {}",
                r.name,
                r.max_rel_err
            );
            assert!(r.checked > 0);
        }
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = Rng::new(11, 0);
        let a = random_tensor(&mut rng, &[3, 4]);
        let b = random_tensor(&mut rng, &[4, 2]);
        let w = random_const(&mut rng, 6);
        let report = check_gradients("matmul", &[a.clone(), b.clone()], 1e-5, || {
            let c = a.matmul(&b)?.reshape(&[6])?;
            Ok(c.mul(&w)?.sum_all())
        })
        .unwrap();
        assert!(report.max_rel_err <= 1e-6, "err {}", report.max_rel_err);
    }

    #[test]
    fn two_layer_mlp_with_gelu_matches_finite_differences() {
        let mut rng = Rng::new(5, 0);
        let x = Tensor::new(&[2, 3], (0..6).map(|_| rng.uniform(-1.0, 1.0)).collect());
        let w1 = random_tensor(&mut rng, &[3, 4]);
        let b1 = random_tensor(&mut rng, &[4]);
        let w2 = random_tensor(&mut rng, &[4, 2]);
        let b2 = random_tensor(&mut rng, &[2]);
        let leaves = [w1.clone(), b1.clone(), w2.clone(), b2.clone()];
        let report = check_gradients("mlp", &leaves, 1e-5, || {
            let h = x.matmul(&w1)?.add_broadcast(&b1)?.gelu();
            let y = h.matmul(&w2)?.add_broadcast(&b2)?;
            Ok(y.mul(&y)?.mean_all())
        })
        .unwrap();
        assert!(report.max_rel_err <= 1e-5, "err {}", report.max_rel_err);
    }
}
