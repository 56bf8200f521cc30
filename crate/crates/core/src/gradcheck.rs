//! Central-difference gradient checking against [`Graph::backward`].

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Check the gradient of a scalar function of one tensor. `f` receives the
/// graph and the trainable leaf holding `point` and returns the output node.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: FnOnce(&mut Graph, NodeId) -> NodeId,
{
    let mut g = Graph::new();
    let x = g.param(point.clone());
    let root = f(&mut g, x);
    grad_check_graph(&mut g, root, &[x], step)
}

/// Check d(root)/d(leaf) for every coordinate of every listed leaf. The
/// graph is left with the original leaf values restored.
pub fn grad_check_graph(g: &mut Graph, root: NodeId, leaves: &[NodeId], step: f64) -> Result<f64> {
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::arg("step", format!("must be > 0, got {step}")));
    }
    let out = g.forward(root)?;
    if !out.is_scalar() {
        return Err(Error::NonScalarLoss(out.shape().to_vec()));
    }
    g.backward(root)?;
    let analytic: Vec<Tensor> = leaves
        .iter()
        .map(|&l| {
            g.grad(l)
                .cloned()
                .expect("leaf grads populated by backward")
        })
        .collect();

    let mut worst = 0.0f64;
    for (&leaf, grad) in leaves.iter().zip(&analytic) {
        let base = g.value(leaf)?.clone();
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus.data_mut()[i] += step;
            g.set_value(leaf, plus)?;
            let fp = g.forward(root)?.item();

            let mut minus = base.clone();
            minus.data_mut()[i] -= step;
            g.set_value(leaf, minus)?;
            let fm = g.forward(root)?.item();

            let numeric = (fp - fm) / (2.0 * step);
            worst = worst.max(relative_error(grad.data()[i], numeric));
        }
        g.set_value(leaf, base)?;
    }
    g.forward(root)?;
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_exact_gradient() {
        let p = Tensor::vector(vec![0.3, -2.0, 5.5, 1.25]).unwrap();
        let err = grad_check(|g, x| g.sum(x), &p, 1e-6).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn square_at_three() {
        let p = Tensor::vector(vec![3.0]).unwrap();
        let err = grad_check(
            |g, x| {
                let y = g.mul(x, x);
                g.sum(y)
            },
            &p,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn non_scalar_output_is_error() {
        let p = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let r = grad_check(|g, x| g.scale(x, 2.0), &p, 1e-6);
        assert!(matches!(r, Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn rejects_bad_step() {
        let p = Tensor::vector(vec![1.0]).unwrap();
        assert!(grad_check(|g, x| g.sum(x), &p, 0.0).is_err());
    }
}
