use super::arch::{Activation, LayerKind, LayerSpec};
use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{self, BatchNorm, LEAKY_SLOPE};
use crate::rng::{normal_tensor, Rng};

/// Standard deviation of the Gaussian weight initialization.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are reported for absorption.
    Train,
    /// Running statistics.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub spec: LayerSpec,
    pub weight: Tensor,
    pub bias: Tensor,
    pub bn: Option<BatchNorm>,
}

/// A sequential stack of convolution blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub name: String,
    pub in_channels: usize,
    pub blocks: Vec<Block>,
}

/// Parameters of a network recorded as leaves of one tape, in
/// [`Network::params`] order.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    /// Gradients for every parameter, in [`Network::params`] order.
    pub fn grads(&self, g: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| g.wrt(v)).collect()
    }
}

/// Batch statistics gathered by a training-mode forward pass.
#[derive(Clone, Debug, Default)]
pub struct BatchStats {
    per_block: Vec<Option<(Vec<f64>, Vec<f64>, usize)>>,
}

impl Network {
    pub fn new(name: &str, in_channels: usize, specs: &[LayerSpec], rng: &mut Rng) -> Self {
        let mut channels = in_channels;
        let blocks = specs
            .iter()
            .map(|spec| {
                let k = spec.kernel;
                let shape = match spec.kind {
                    LayerKind::Conv2D => [spec.filters, channels, k, k],
                    LayerKind::TranspConv2D => [channels, spec.filters, k, k],
                };
                channels = spec.filters;
                Block {
                    spec: *spec,
                    weight: normal_tensor(rng, &shape, INIT_STD),
                    bias: Tensor::zeros(&[spec.filters]),
                    bn: spec.batch_norm.then(|| BatchNorm::new(spec.filters)),
                }
            })
            .collect();
        let mut net = Self {
            name: name.to_string(),
            in_channels,
            blocks,
        };
        net.round_to_f32();
        net
    }

    pub fn out_channels(&self) -> usize {
        self.blocks.last().map_or(self.in_channels, |b| b.spec.filters)
    }

    /// Trainable tensors with stable names.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("{}.{i}.weight", self.name), &b.weight));
            out.push((format!("{}.{i}.bias", self.name), &b.bias));
            if let Some(bn) = &b.bn {
                out.push((format!("{}.{i}.gamma", self.name), &bn.gamma));
                out.push((format!("{}.{i}.beta", self.name), &bn.beta));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("{}.{i}.weight", self.name), &mut b.weight));
            out.push((format!("{}.{i}.bias", self.name), &mut b.bias));
            if let Some(bn) = &mut b.bn {
                out.push((format!("{}.{i}.gamma", self.name), &mut bn.gamma));
                out.push((format!("{}.{i}.beta", self.name), &mut bn.beta));
            }
        }
        out
    }

    /// Parameters followed by running statistics: everything a checkpoint holds.
    pub fn state_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let name = &self.name;
        let mut out = Vec::new();
        let mut stats = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("{name}.{i}.weight"), &mut b.weight));
            out.push((format!("{name}.{i}.bias"), &mut b.bias));
            if let Some(bn) = &mut b.bn {
                let BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    ..
                } = bn;
                out.push((format!("{name}.{i}.gamma"), gamma));
                out.push((format!("{name}.{i}.beta"), beta));
                stats.push((format!("{name}.{i}.running_mean"), running_mean));
                stats.push((format!("{name}.{i}.running_var"), running_var));
            }
        }
        out.extend(stats);
        out
    }

    pub fn state(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.params();
        for (i, b) in self.blocks.iter().enumerate() {
            if let Some(bn) = &b.bn {
                out.push((format!("{}.{i}.running_mean", self.name), &bn.running_mean));
                out.push((format!("{}.{i}.running_var", self.name), &bn.running_var));
            }
        }
        out
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self.params().into_iter().map(|(_, t)| tape.leaf(t.clone())).collect(),
        }
    }

    /// Binds the parameters as constants (no gradients).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self.params().into_iter().map(|(_, t)| tape.constant(t.clone())).collect(),
        }
    }

    pub fn forward<'t>(&self, bound: &Bound<'t>, x: Var<'t>, mode: Mode) -> Result<(Var<'t>, BatchStats)> {
        let mut vars = bound.vars.iter().copied();
        let mut next = || vars.next().ok_or_else(|| Error::InvalidArgument(format!("{}: bound parameters exhausted", self.name)));
        let mut h = x;
        let mut stats = BatchStats::default();
        for b in &self.blocks {
            let (w, bias) = (next()?, next()?);
            h = match b.spec.kind {
                LayerKind::Conv2D => layers::conv2d(h, w, bias, b.spec.stride, b.spec.padding)?,
                LayerKind::TranspConv2D => layers::transp_conv2d(h, w, bias, b.spec.stride, b.spec.padding)?,
            };
            let mut block_stats = None;
            if let Some(bn) = &b.bn {
                let (gamma, beta) = (next()?, next()?);
                h = match mode {
                    Mode::Train => {
                        let count = layers::count_per_channel(&h.shape());
                        let (y, mean, var) = layers::batch_norm_train(h, gamma, beta, bn.epsilon)?;
                        block_stats = Some((mean, var, count));
                        y
                    }
                    Mode::Eval => layers::batch_norm_eval(h, gamma, beta, &bn.running_mean, &bn.running_var, bn.epsilon)?,
                };
            }
            stats.per_block.push(block_stats);
            h = match b.spec.activation {
                Activation::LeakyRelu => layers::leaky_relu(h, LEAKY_SLOPE),
                Activation::Sigmoid => layers::sigmoid(h),
            };
        }
        Ok((h, stats))
    }

    /// Folds the statistics of a training-mode pass into the running estimates.
    pub fn absorb(&mut self, stats: &BatchStats) {
        for (b, s) in self.blocks.iter_mut().zip(&stats.per_block) {
            if let (Some(bn), Some((mean, var, count))) = (&mut b.bn, s) {
                bn.absorb(mean, var, *count);
                bn.running_mean.round_to_f32();
                bn.running_var.round_to_f32();
            }
        }
    }

    /// Rounds all stored state to single precision, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        for (_, t) in self.state_mut() {
            t.round_to_f32();
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }
}
