//! Differentiable augmentations: periodic pixel translation for images and
//! shared-parameter perturbations of latent means and standard deviations.

use crate::autodiff::{Backward, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses;
use crate::rng::{standard_normal, uniform_tensor, Rng};

/// Augmentation settings (`aug.*` config keys).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Translation standard deviation as a fraction of the image extent.
    pub translation_std_frac: f64,
    /// Amplitude of the latent mean/std perturbations, in `[0, 1)`.
    pub latent_strength: f64,
    /// Spread of the sampled prior around the standard normal.
    pub prior_jitter: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            translation_std_frac: 0.125,
            latent_strength: 0.5,
            prior_jitter: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.translation_std_frac >= 0.0) || !(self.prior_jitter >= 0.0) {
            return Err(Error::InvalidArgument("augmentation spreads must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.latent_strength) {
            return Err(Error::InvalidArgument(format!(
                "aug.latent_strength must lie in [0, 1), got {}",
                self.latent_strength
            )));
        }
        Ok(())
    }
}

/// Per-sample pixel displacements `(u_x, u_y)`, reduced modulo the extents.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TranslationParams {
    height: usize,
    width: usize,
    shifts: Vec<(usize, usize)>,
}

impl TranslationParams {
    /// Reduces arbitrary integer displacements modulo `(width, height)`.
    pub fn new(height: usize, width: usize, raw: &[(i64, i64)]) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("translation needs positive extents".into()));
        }
        let shifts = raw
            .iter()
            .map(|&(ux, uy)| (ux.rem_euclid(width as i64) as usize, uy.rem_euclid(height as i64) as usize))
            .collect();
        Ok(Self { height, width, shifts })
    }

    pub fn shifts(&self) -> &[(usize, usize)] {
        &self.shifts
    }

    pub fn len(&self) -> usize {
        self.shifts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shifts.is_empty()
    }

    /// The displacement that undoes this one.
    pub fn inverse(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            shifts: self
                .shifts
                .iter()
                .map(|&(ux, uy)| ((self.width - ux) % self.width, (self.height - uy) % self.height))
                .collect(),
        }
    }

    /// Concatenation along the batch, matching a concatenated image batch.
    pub fn concat(parts: &[&TranslationParams]) -> Result<Self> {
        let first = parts.first().ok_or(Error::EmptyReduction("TranslationParams::concat"))?;
        if parts.iter().any(|p| p.height != first.height || p.width != first.width) {
            return Err(Error::InvalidArgument("translation extents differ".into()));
        }
        Ok(Self {
            height: first.height,
            width: first.width,
            shifts: parts.iter().flat_map(|p| p.shifts.iter().copied()).collect(),
        })
    }
}

/// One unwrapped displacement component, `round(N(0, (std_frac·size)²))`.
pub fn sample_displacement(rng: &mut Rng, image_size: usize, std_frac: f64) -> i64 {
    (std_frac * image_size as f64 * standard_normal(rng)).round() as i64
}

/// Independent normal displacements for `batch` square images.
pub fn sample_translation(rng: &mut Rng, batch: usize, image_size: usize, std_frac: f64) -> Result<TranslationParams> {
    let raw: Vec<(i64, i64)> = (0..batch)
        .map(|_| {
            let ux = sample_displacement(rng, image_size, std_frac);
            let uy = sample_displacement(rng, image_size, std_frac);
            (ux, uy)
        })
        .collect();
    TranslationParams::new(image_size, image_size, &raw)
}

fn roll(data: &[f64], shape: &[usize], u: &TranslationParams) -> Vec<f64> {
    let [batch, channels, h, w] = <[usize; 4]>::try_from(shape).expect("rank 4");
    let mut out = vec![0.0; data.len()];
    for b in 0..batch {
        let (ux, uy) = u.shifts[b];
        for c in 0..channels {
            let off = (b * channels + c) * h * w;
            let src = &data[off..off + h * w];
            let dst = &mut out[off..off + h * w];
            for i in 0..h {
                let si = (i + h - uy) % h;
                let row = &src[si * w..(si + 1) * w];
                let drow = &mut dst[i * w..(i + 1) * w];
                // x'[i, j] = x[i − u_y, j − u_x]
                drow[ux..].copy_from_slice(&row[..w - ux]);
                drow[..ux].copy_from_slice(&row[w - ux..]);
            }
        }
    }
    out
}

fn check_batch(shape: &[usize], u: &TranslationParams) -> Result<()> {
    match shape {
        [b, _, h, w] if *b == u.len() && *h == u.height && *w == u.width => Ok(()),
        _ => Err(Error::InvalidShape {
            op: "translate_periodic",
            detail: format!("images {shape:?} vs {} shifts on {}x{}", u.len(), u.height, u.width),
        }),
    }
}

/// Value-level periodic translation of a `[B, C, H, W]` tensor.
pub fn roll_tensor(x: &Tensor, u: &TranslationParams) -> Result<Tensor> {
    check_batch(x.shape(), u)?;
    Ok(Tensor::from_parts(x.shape().to_vec(), roll(x.data(), x.shape(), u)))
}

/// Periodic translation `x'[i, j] = x[(i − u_y) mod H, (j − u_x) mod W]`; the
/// adjoint is the inverse roll.
pub fn translate_periodic<'t>(x: Var<'t>, u: &TranslationParams) -> Result<Var<'t>> {
    let xv = x.value();
    check_batch(xv.shape(), u)?;
    let out = Tensor::from_parts(xv.shape().to_vec(), roll(xv.data(), xv.shape(), u));
    let inverse = u.inverse();
    Ok(x.tape().record(
        out,
        &[x],
        Box::new(move |ctx: &Backward<'_>| {
            vec![Some(Tensor::from_parts(
                ctx.grad.shape().to_vec(),
                roll(ctx.grad.data(), ctx.grad.shape(), &inverse),
            ))]
        }),
    ))
}

/// Uniform `(0, 1)` draws for the latent augmentations, one per latent
/// dimension, shared across the batch and across prior and posterior.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentAugParams {
    pub u_mu: Tensor,
    pub u_sigma: Tensor,
}

impl LatentAugParams {
    pub fn sample(rng: &mut Rng, z_dim: usize) -> Self {
        Self {
            u_mu: uniform_tensor(rng, &[1, z_dim], 0.0, 1.0),
            u_sigma: uniform_tensor(rng, &[1, z_dim], 0.0, 1.0),
        }
    }

    /// Parameters at which both augmentations are the identity.
    pub fn identity(z_dim: usize) -> Self {
        Self {
            u_mu: Tensor::full(&[1, z_dim], 0.5),
            u_sigma: Tensor::full(&[1, z_dim], 0.5),
        }
    }
}

/// `μ + strength·(2u − 1)`.
pub fn augment_mu<'t>(mu: Var<'t>, u_mu: &Tensor, strength: f64) -> Result<Var<'t>> {
    let shift = u_mu.map(|u| strength * (2.0 * u - 1.0));
    mu.add(mu.tape().constant(shift))
}

/// `σ·(1 + strength·(2u − 1))`; positive for `strength < 1`.
pub fn augment_sigma<'t>(sigma: Var<'t>, u_sigma: &Tensor, strength: f64) -> Result<Var<'t>> {
    if !(0.0..1.0).contains(&strength) {
        return Err(Error::InvalidArgument(format!(
            "sigma augmentation strength must lie in [0, 1), got {strength}"
        )));
    }
    let factor = u_sigma.map(|u| 1.0 + strength * (2.0 * u - 1.0));
    sigma.mul(sigma.tape().constant(factor))
}

/// Prior means `N(0, jitter²)` and standard deviations `exp(N(0, jitter²))`,
/// shape `[batch, z_dim]`. Zero jitter gives exactly `(0, 1)`.
pub fn sample_prior(rng: &mut Rng, batch: usize, z_dim: usize, jitter: f64) -> (Tensor, Tensor) {
    let mut mu = Tensor::zeros(&[batch, z_dim]);
    let mut sigma = Tensor::zeros(&[batch, z_dim]);
    for (m, s) in mu.data_mut().iter_mut().zip(sigma.data_mut()) {
        let a = standard_normal(rng);
        let b = standard_normal(rng);
        *m = if jitter == 0.0 { 0.0 } else { jitter * a };
        *s = if jitter == 0.0 { 1.0 } else { (jitter * b).exp() };
    }
    (mu, sigma)
}

/// KL between augmented posterior and augmented prior, one parameter draw
/// applied to both sides.
pub fn augmented_kl<'t>(
    mu_post: Var<'t>,
    sigma_post: Var<'t>,
    mu_prior: Var<'t>,
    sigma_prior: Var<'t>,
    params: &LatentAugParams,
    strength: f64,
) -> Result<Var<'t>> {
    losses::kl_general(
        augment_mu(mu_post, &params.u_mu, strength)?,
        augment_sigma(sigma_post, &params.u_sigma, strength)?,
        augment_mu(mu_prior, &params.u_mu, strength)?,
        augment_sigma(sigma_prior, &params.u_sigma, strength)?,
    )
}
