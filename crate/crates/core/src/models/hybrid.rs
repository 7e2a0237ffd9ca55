use super::arch::ArchSpec;
use super::network::{BatchStats, Bound, Mode, Network};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{normal_tensor, seeded, Rng};

/// Encoder posterior for a batch: `[B, z_dim]` mean and log-variance.
#[derive(Clone, Copy, Debug)]
pub struct LatentDist<'t> {
    pub mu: Var<'t>,
    pub log_var: Var<'t>,
}

impl<'t> LatentDist<'t> {
    /// `σ = exp(½·log σ²)`, strictly positive.
    pub fn sigma(&self) -> Var<'t> {
        self.log_var.scale(0.5).exp()
    }
}

/// `z = μ + σ ⊙ ε`.
pub fn reparametrize<'t>(dist: &LatentDist<'t>, eps: Var<'t>) -> Result<Var<'t>> {
    if eps.shape() != dist.mu.shape() {
        return Err(Error::shape("reparametrize", &dist.mu.shape(), &eps.shape()));
    }
    dist.mu.add(dist.sigma().mul(eps)?)
}

/// `[batch, z_dim]` standard-normal latents.
pub fn sample_noise(rng: &mut Rng, batch: usize, z_dim: usize) -> Tensor {
    normal_tensor(rng, &[batch, z_dim], 1.0)
}

/// Encoder, mutual generator/decoder and discriminator.
#[derive(Clone, Debug, PartialEq)]
pub struct HybridModel {
    pub arch: ArchSpec,
    pub encoder: Network,
    pub generator: Network,
    pub discriminator: Network,
}

impl HybridModel {
    pub fn new(arch: ArchSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = seeded(seed);
        let encoder = Network::new("enc", 1, &arch.encoder, &mut rng);
        let generator = Network::new("gen", arch.z_dim, &arch.generator, &mut rng);
        let discriminator = Network::new("disc", 1, &arch.discriminator, &mut rng);
        Ok(Self {
            arch,
            encoder,
            generator,
            discriminator,
        })
    }

    pub fn z_dim(&self) -> usize {
        self.arch.z_dim
    }

    pub fn image_size(&self) -> usize {
        self.arch.image_size
    }

    pub fn check_images(&self, shape: &[usize]) -> Result<()> {
        let s = self.image_size();
        match shape {
            [b, 1, h, w] if *b > 0 && *h == s && *w == s => Ok(()),
            _ => Err(Error::InvalidShape {
                op: "images",
                detail: format!("expected [batch, 1, {s}, {s}], got {shape:?}"),
            }),
        }
    }

    /// Splits the encoder's `2·z_dim` output channels into mean (first half)
    /// and log-variance (second half).
    pub fn encode<'t>(&self, bound: &Bound<'t>, x: Var<'t>, mode: Mode) -> Result<(LatentDist<'t>, BatchStats)> {
        self.check_images(&x.shape())?;
        let batch = x.shape()[0];
        let z = self.z_dim();
        let (out, stats) = self.encoder.forward(bound, x, mode)?;
        let flat = out.reshape(&[batch, 2 * z])?;
        let dist = LatentDist {
            mu: flat.slice_cols(0, z)?,
            log_var: flat.slice_cols(z, 2 * z)?,
        };
        Ok((dist, stats))
    }

    /// Decodes `[B, z_dim]` latents to `[B, 1, S, S]` images in (0, 1).
    pub fn generate<'t>(&self, bound: &Bound<'t>, z: Var<'t>, mode: Mode) -> Result<(Var<'t>, BatchStats)> {
        let shape = z.shape();
        let [batch, dim] = shape[..] else {
            return Err(Error::InvalidShape {
                op: "generate",
                detail: format!("expected [batch, z_dim], got {shape:?}"),
            });
        };
        if dim != self.z_dim() {
            return Err(Error::shape("generate", &[batch, self.z_dim()], &shape));
        }
        self.generator.forward(bound, z.reshape(&[batch, dim, 1, 1])?, mode)
    }

    /// One score in (0, 1) per sample, shape `[B]`.
    pub fn discriminate<'t>(&self, bound: &Bound<'t>, x: Var<'t>, mode: Mode) -> Result<(Var<'t>, BatchStats)> {
        self.check_images(&x.shape())?;
        let batch = x.shape()[0];
        let (out, stats) = self.discriminator.forward(bound, x, mode)?;
        Ok((out.reshape(&[batch])?, stats))
    }

    /// Posterior mean and log-variance with running statistics.
    pub fn encode_eval(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let tape = Tape::new();
        let bound = self.encoder.bind_frozen(&tape);
        let (d, _) = self.encode(&bound, tape.constant(x.clone()), Mode::Eval)?;
        Ok(((*d.mu.value()).clone(), (*d.log_var.value()).clone()))
    }

    pub fn generate_eval(&self, z: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.generator.bind_frozen(&tape);
        let (x, _) = self.generate(&bound, tape.constant(z.clone()), Mode::Eval)?;
        Ok((*x.value()).clone())
    }

    pub fn discriminate_eval(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.discriminator.bind_frozen(&tape);
        let (s, _) = self.discriminate(&bound, tape.constant(x.clone()), Mode::Eval)?;
        Ok((*s.value()).clone())
    }

    /// `G(μ(x))`: decoding of the posterior mean, without sampling noise.
    pub fn reconstruct_eval(&self, x: &Tensor) -> Result<Tensor> {
        let (mu, _) = self.encode_eval(x)?;
        self.generate_eval(&mu)
    }

    pub fn round_to_f32(&mut self) {
        self.encoder.round_to_f32();
        self.generator.round_to_f32();
        self.discriminator.round_to_f32();
    }
}
