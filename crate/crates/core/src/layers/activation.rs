use crate::autodiff::{Backward, Var};

/// Slope of the negative half of the leaky ReLU.
pub const LEAKY_SLOPE: f64 = 0.2;

pub fn leaky_relu(x: Var<'_>, slope: f64) -> Var<'_> {
    let out = x.value().map(|v| if v > 0.0 { v } else { slope * v });
    x.tape().record(
        out,
        &[x],
        Box::new(move |ctx: &Backward<'_>| {
            vec![Some(ctx.grad.zip_map(ctx.inputs[0].as_ref(), |g, v| {
                if v > 0.0 {
                    g
                } else {
                    slope * g
                }
            }))]
        }),
    )
}

/// Logistic function. Outputs are kept inside `[ε, 1 − ε]` (machine epsilon),
/// so they never reach exactly 0 or 1.
pub fn sigmoid(x: Var<'_>) -> Var<'_> {
    let out = x.value().map(sigmoid_scalar);
    x.tape().record(
        out,
        &[x],
        Box::new(|ctx: &Backward<'_>| {
            vec![Some(ctx.grad.zip_map(ctx.output, |g, y| g * y * (1.0 - y)))]
        }),
    )
}

pub fn sigmoid_scalar(v: f64) -> f64 {
    let y = if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    };
    y.clamp(f64::EPSILON, 1.0 - f64::EPSILON)
}
