//! Central finite-difference checks for differentiable functions.
//!
//! Only forward evaluations are used for the numerical side, so the check is
//! independent of the adjoint rules it validates.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::Result;

/// Step used by the central difference.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Outcome of one gradient comparison.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Per-input `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`.
    pub rel_errors: Vec<f64>,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares the tape's gradient of the scalar `f` against central differences.
pub fn check<F>(inputs: &[Tensor], f: F, step: f64) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        f(&tape, &vars)?.item()
    };

    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for k in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[k].shape());
        for i in 0..inputs[k].numel() {
            let orig = inputs[k].data()[i];
            probe[k].data_mut()[i] = orig + step;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = orig - step;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            g.data_mut()[i] = (up - down) / (2.0 * step);
        }
        numeric.push(g);
    }

    let rel_errors = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a, n))
        .collect();
    Ok(GradCheck {
        rel_errors,
        analytic,
        numeric,
    })
}

/// Norm-relative difference; zero when both vectors vanish.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        0.0
    } else {
        diff / scale
    }
}

/// Reduces a tensor-valued output to a scalar with fixed weights, so that a
/// single scalar check covers a full vector-Jacobian product.
pub fn project<'t>(out: Var<'t>, weights: &Tensor) -> Result<Var<'t>> {
    let w = out.tape().constant(weights.clone());
    out.mul(w)?.sum()
}
