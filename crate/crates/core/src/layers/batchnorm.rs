use crate::autodiff::{Backward, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_MOMENTUM: f64 = 0.99;
pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Per-channel normalization over batch and spatial axes.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            momentum: DEFAULT_MOMENTUM,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    /// Normalizes `x` with batch statistics (`training`) or running statistics.
    /// Training mode also folds the batch statistics into the running ones.
    pub fn forward<'t>(&mut self, x: Var<'t>, gamma: Var<'t>, beta: Var<'t>, training: bool) -> Result<Var<'t>> {
        if training {
            let (y, mean, var) = batch_norm_train(x, gamma, beta, self.epsilon)?;
            self.absorb(&mean, &var, count_per_channel(&x.shape()));
            Ok(y)
        } else {
            batch_norm_eval(x, gamma, beta, &self.running_mean, &self.running_var, self.epsilon)
        }
    }

    /// Folds biased batch statistics over `count` values per channel into the
    /// running estimates (the variance is stored unbiased).
    pub fn absorb(&mut self, mean: &[f64], var: &[f64], count: usize) {
        let unbias = if count > 1 { count as f64 / (count as f64 - 1.0) } else { 1.0 };
        let m = self.momentum;
        for c in 0..self.channels() {
            let rm = &mut self.running_mean.data_mut()[c];
            *rm = m * *rm + (1.0 - m) * mean[c];
            let rv = &mut self.running_var.data_mut()[c];
            *rv = m * *rv + (1.0 - m) * var[c] * unbias;
        }
    }
}

fn layout(shape: &[usize], channels: usize) -> Result<(usize, usize)> {
    if shape.len() < 2 || shape[1] != channels {
        return Err(Error::InvalidShape {
            op: "batch_norm",
            detail: format!("input {shape:?} does not have {channels} channels on axis 1"),
        });
    }
    Ok((shape[0], shape[2..].iter().product()))
}

pub(crate) fn count_per_channel(shape: &[usize]) -> usize {
    shape[0] * shape[2..].iter().product::<usize>()
}

/// Training-mode batch norm. Returns the output and the biased batch mean and
/// variance per channel.
pub fn batch_norm_train<'t>(
    x: Var<'t>,
    gamma: Var<'t>,
    beta: Var<'t>,
    epsilon: f64,
) -> Result<(Var<'t>, Vec<f64>, Vec<f64>)> {
    let (xv, gv, bv) = (x.value(), gamma.value(), beta.value());
    let channels = gv.numel();
    if bv.numel() != channels {
        return Err(Error::shape("batch_norm", gv.shape(), bv.shape()));
    }
    let (batch, p) = layout(xv.shape(), channels)?;
    if batch < 2 {
        return Err(Error::InvalidArgument(
            "batch norm in training mode needs a batch of at least 2".into(),
        ));
    }
    let count = (batch * p) as f64;
    let d = xv.data();
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for b in 0..batch {
        for c in 0..channels {
            mean[c] += d[(b * channels + c) * p..][..p].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for b in 0..batch {
        for c in 0..channels {
            var[c] += d[(b * channels + c) * p..][..p]
                .iter()
                .map(|x| (x - mean[c]).powi(2))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();

    let mut xhat = vec![0.0; d.len()];
    let mut y = vec![0.0; d.len()];
    for b in 0..batch {
        for c in 0..channels {
            let off = (b * channels + c) * p;
            for i in off..off + p {
                xhat[i] = (d[i] - mean[c]) * inv_std[c];
                y[i] = gv.data()[c] * xhat[i] + bv.data()[c];
            }
        }
    }
    let out = Tensor::from_parts(xv.shape().to_vec(), y);
    let var_out = x.tape().record(
        out,
        &[x, gamma, beta],
        Box::new(move |ctx: &Backward<'_>| {
            let g = ctx.grad.data();
            let gamma = ctx.inputs[1].data();
            let mut sum_g = vec![0.0; channels];
            let mut sum_gx = vec![0.0; channels];
            for b in 0..batch {
                for c in 0..channels {
                    let off = (b * channels + c) * p;
                    for i in off..off + p {
                        sum_g[c] += g[i];
                        sum_gx[c] += g[i] * xhat[i];
                    }
                }
            }
            let dx = ctx.needs[0].then(|| {
                let mut dx = vec![0.0; g.len()];
                for b in 0..batch {
                    for c in 0..channels {
                        let off = (b * channels + c) * p;
                        let k = gamma[c] * inv_std[c] / count;
                        for i in off..off + p {
                            dx[i] = k * (count * g[i] - sum_g[c] - xhat[i] * sum_gx[c]);
                        }
                    }
                }
                Tensor::from_parts(ctx.inputs[0].shape().to_vec(), dx)
            });
            vec![
                dx,
                ctx.needs[1].then(|| Tensor::from_vec(sum_gx.clone())),
                ctx.needs[2].then(|| Tensor::from_vec(sum_g.clone())),
            ]
        }),
    );
    Ok((var_out, mean, var))
}

/// Inference-mode batch norm with fixed statistics.
pub fn batch_norm_eval<'t>(
    x: Var<'t>,
    gamma: Var<'t>,
    beta: Var<'t>,
    mean: &Tensor,
    var: &Tensor,
    epsilon: f64,
) -> Result<Var<'t>> {
    let (xv, gv, bv) = (x.value(), gamma.value(), beta.value());
    let channels = gv.numel();
    if bv.numel() != channels || mean.numel() != channels || var.numel() != channels {
        return Err(Error::shape("batch_norm", gv.shape(), bv.shape()));
    }
    let (batch, p) = layout(xv.shape(), channels)?;
    let mean = mean.data().to_vec();
    let inv_std: Vec<f64> = var.data().iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
    let d = xv.data();
    let mut y = vec![0.0; d.len()];
    for b in 0..batch {
        for c in 0..channels {
            let off = (b * channels + c) * p;
            for i in off..off + p {
                y[i] = gv.data()[c] * (d[i] - mean[c]) * inv_std[c] + bv.data()[c];
            }
        }
    }
    let out = Tensor::from_parts(xv.shape().to_vec(), y);
    Ok(x.tape().record(
        out,
        &[x, gamma, beta],
        Box::new(move |ctx: &Backward<'_>| {
            let g = ctx.grad.data();
            let x = ctx.inputs[0].data();
            let gamma = ctx.inputs[1].data();
            let mut dx = vec![0.0; g.len()];
            let mut dgamma = vec![0.0; channels];
            let mut dbeta = vec![0.0; channels];
            for b in 0..batch {
                for c in 0..channels {
                    let off = (b * channels + c) * p;
                    for i in off..off + p {
                        dx[i] = g[i] * gamma[c] * inv_std[c];
                        dgamma[c] += g[i] * (x[i] - mean[c]) * inv_std[c];
                        dbeta[c] += g[i];
                    }
                }
            }
            vec![
                ctx.needs[0].then(|| Tensor::from_parts(ctx.inputs[0].shape().to_vec(), dx)),
                ctx.needs[1].then(|| Tensor::from_vec(dgamma)),
                ctx.needs[2].then(|| Tensor::from_vec(dbeta)),
            ]
        }),
    ))
}
