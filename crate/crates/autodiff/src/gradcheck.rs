//! Central finite-difference verification of reverse-mode gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Relative error with the denominator floored at `1e-8`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares the reverse-mode gradient of `f` at `point` with central
/// differences `(f(x + h) - f(x - h)) / 2h`, element by element, and returns
/// the largest relative error.
///
/// `f` receives a fresh graph and the trainable leaf holding the (possibly
/// perturbed) point, and must return a scalar node.
pub fn finite_difference_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let eval = |x: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.param(x.clone());
        let out = f(&mut g, v)?;
        g.value(out).item()
    };

    let mut g = Graph::new();
    let v = g.param(point.clone());
    let out = f(&mut g, v)?;
    let grads = g.backward(out)?;
    let analytic = grads.get(v).expect("point is a trainable leaf").clone();

    let mut worst: f64 = 0.0;
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = point.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}
