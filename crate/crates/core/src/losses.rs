//! Encoder, discriminator and generator objectives and the KL terms they use.
//!
//! Every loss reduces by the mean over batch (and pixels or latent
//! dimensions), so weights are independent of batch size.

use crate::autodiff::Var;
use crate::error::{Error, Result};

/// Margin keeping arguments of `log` inside `[ε, 1 − ε]`.
pub const SCORE_EPS: f64 = 1e-7;

/// Loss multipliers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// KL multiplier in the encoder loss.
    pub beta: f64,
    /// Generator weight on the adversarial term for reconstructions.
    pub lambda_vae: f64,
    /// Generator weight on the adversarial term for noise samples.
    pub lambda_noise: f64,
    /// Generator weight on the reconstruction term.
    pub lambda_rec: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta: 1.0,
            lambda_vae: 1.0,
            lambda_noise: 1.0,
            lambda_rec: 1e-4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("beta", self.beta),
            ("lambda_vae", self.lambda_vae),
            ("lambda_noise", self.lambda_noise),
            ("lambda_rec", self.lambda_rec),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

fn positive(op: &'static str, v: Var<'_>) -> Result<()> {
    match v.value().data().iter().enumerate().find(|(_, &s)| !(s > 0.0)) {
        Some((index, &value)) => Err(Error::Domain { op, index, value }),
        None => Ok(()),
    }
}

/// Scores must lie strictly inside (0, 1); they are then clamped by
/// [`SCORE_EPS`] before entering a logarithm.
fn scores<'t>(op: &'static str, s: Var<'t>) -> Result<Var<'t>> {
    if let Some((index, &value)) = s.value().data().iter().enumerate().find(|(_, &v)| !(v > 0.0 && v < 1.0)) {
        return Err(Error::Domain { op, index, value });
    }
    Ok(s.clamp(SCORE_EPS, 1.0 - SCORE_EPS))
}

/// KL divergence between two diagonal Gaussians, posterior against prior,
/// averaged over all entries. Prior tensors may broadcast over the batch.
pub fn kl_general<'t>(mu_post: Var<'t>, sigma_post: Var<'t>, mu_prior: Var<'t>, sigma_prior: Var<'t>) -> Result<Var<'t>> {
    positive("kl_general", sigma_post)?;
    positive("kl_general", sigma_prior)?;
    let log_ratio = sigma_prior.log()?.sub(sigma_post.log()?)?;
    let spread = sigma_post.square().add(mu_prior.sub(mu_post)?.square())?;
    let scaled = spread.div(sigma_prior.square().scale(2.0))?;
    log_ratio.add(scaled)?.add_scalar(-0.5).mean()
}

/// KL divergence from a standard-normal prior, averaged over all entries.
pub fn kl_standard<'t>(mu: Var<'t>, sigma: Var<'t>) -> Result<Var<'t>> {
    positive("kl_standard", sigma)?;
    let var = sigma.square();
    let inner = var.log()?.add_scalar(1.0).sub(var)?.sub(mu.square())?;
    inner.scale(-0.5).mean()
}

/// Mean pixel-wise binary cross-entropy of `recon` against `target`.
pub fn reconstruction_loss<'t>(target: Var<'t>, recon: Var<'t>) -> Result<Var<'t>> {
    if target.shape() != recon.shape() {
        return Err(Error::shape("reconstruction_loss", &target.shape(), &recon.shape()));
    }
    let p = recon.clamp(SCORE_EPS, 1.0 - SCORE_EPS);
    let on = target.mul(p.log()?)?;
    let off = target.neg().add_scalar(1.0).mul(p.neg().add_scalar(1.0).log()?)?;
    on.add(off)?.neg().mean()
}

/// `β·kld + rec`.
pub fn encoder_loss<'t>(kld: Var<'t>, rec: Var<'t>, beta: f64) -> Result<Var<'t>> {
    kld.scale(beta).add(rec)
}

/// `mean(−log d_real) + mean(−log(1 − d_vae)) + mean(−log(1 − d_noise))`.
pub fn discriminator_loss<'t>(d_real: Var<'t>, d_vae: Var<'t>, d_noise: Var<'t>) -> Result<Var<'t>> {
    let real = scores("discriminator_loss", d_real)?.log()?.mean()?;
    let vae = scores("discriminator_loss", d_vae)?.neg().add_scalar(1.0).log()?.mean()?;
    let noise = scores("discriminator_loss", d_noise)?.neg().add_scalar(1.0).log()?.mean()?;
    real.add(vae)?.add(noise).map(Var::neg)
}

/// `−λ_vae·mean log d_vae − λ_noise·mean log d_noise + λ_rec·rec`.
pub fn generator_loss<'t>(d_vae: Var<'t>, d_noise: Var<'t>, rec: Var<'t>, w: &LossWeights) -> Result<Var<'t>> {
    let vae = scores("generator_loss", d_vae)?.log()?.mean()?.scale(-w.lambda_vae);
    let noise = scores("generator_loss", d_noise)?.log()?.mean()?.scale(-w.lambda_noise);
    vae.add(noise)?.add(rec.scale(w.lambda_rec))
}

/// Classic minimax generator objective `mean log(1 − D(G(z)))`.
/// Kept for comparison; training uses [`generator_loss`].
pub fn minimax_generator_loss<'t>(d_fake: Var<'t>) -> Result<Var<'t>> {
    scores("minimax_generator_loss", d_fake)?.neg().add_scalar(1.0).log()?.mean()
}

/// Classic two-term discriminator objective. Kept for comparison; training
/// uses [`discriminator_loss`].
pub fn minimax_discriminator_loss<'t>(d_real: Var<'t>, d_fake: Var<'t>) -> Result<Var<'t>> {
    let real = scores("minimax_discriminator_loss", d_real)?.log()?.mean()?;
    let fake = scores("minimax_discriminator_loss", d_fake)?.neg().add_scalar(1.0).log()?.mean()?;
    real.add(fake).map(Var::neg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Tape, Tensor};
    use crate::gradcheck::{check, DEFAULT_STEP};
    use crate::rng::{normal_tensor, seeded, uniform_tensor};
    use proptest::prelude::*;
    use std::f64::consts::LN_2;

    fn kl(mu_q: f64, s_q: f64, mu_p: f64, s_p: f64) -> f64 {
        let tape = Tape::new();
        let c = |v: f64| tape.constant(Tensor::scalar(v));
        kl_general(c(mu_q), c(s_q), c(mu_p), c(s_p)).unwrap().item().unwrap()
    }

    fn s(tape: &Tape, v: f64) -> Var<'_> {
        tape.constant(Tensor::scalar(v))
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl(0.0, 1.0, 0.0, 1.0), 0.0);
        assert!((kl(1.0, 1.0, 0.0, 1.0) - 0.5).abs() < 1e-15);
        let want = -(2.0f64.ln()) + 2.0 - 0.5;
        assert!((kl(0.0, 2.0, 0.0, 1.0) - want).abs() < 1e-15);
        assert!((want - 0.8069).abs() < 1e-4);

        let tape = Tape::new();
        assert_eq!(kl_standard(s(&tape, 0.0), s(&tape, 1.0)).unwrap().item().unwrap(), 0.0);
        assert!((kl_standard(s(&tape, 1.0), s(&tape, 1.0)).unwrap().item().unwrap() - 0.5).abs() < 1e-15);
        assert!(kl_standard(s(&tape, 0.0), s(&tape, 0.0)).is_err());
        assert!(kl_general(s(&tape, 0.0), s(&tape, 1.0), s(&tape, 0.0), s(&tape, -1.0)).is_err());
    }

    #[test]
    fn kl_standard_is_the_standard_prior_case() {
        let mut rng = seeded(21);
        let mu = normal_tensor(&mut rng, &[1000], 1.5);
        let sigma = uniform_tensor(&mut rng, &[1000], 0.05, 3.0);
        let tape = Tape::new();
        let (m, sg) = (tape.constant(mu), tape.constant(sigma));
        let a = kl_standard(m, sg).unwrap().item().unwrap();
        let b = kl_general(m, sg, tape.constant(Tensor::zeros(&[1000])), tape.constant(Tensor::ones(&[1000])))
            .unwrap()
            .item()
            .unwrap();
        assert!((a - b).abs() <= 1e-12);
    }

    proptest! {
        #[test]
        fn kl_is_non_negative(mq in -5.0..5.0f64, sq in 0.01..5.0f64, mp in -5.0..5.0f64, sp in 0.01..5.0f64) {
            prop_assert!(kl(mq, sq, mp, sp) >= -1e-15);
        }

        #[test]
        fn kl_vanishes_on_identical_distributions(m in -5.0..5.0f64, sg in 0.01..5.0f64) {
            prop_assert_eq!(kl(m, sg, m, sg), 0.0);
        }
    }

    #[test]
    fn reconstruction_examples() {
        let tape = Tape::new();
        let rec = |t: f64, r: f64| reconstruction_loss(s(&tape, t), s(&tape, r)).unwrap().item().unwrap();
        assert!((rec(0.0, 0.5) - LN_2).abs() < 1e-15);
        assert!((rec(0.5, 0.5) - LN_2).abs() < 1e-15);
        assert!(rec(1.0, 1.0) < 1e-6 && rec(0.0, 0.0) < 1e-6);
        let a = tape.constant(Tensor::zeros(&[2, 2]));
        let b = tape.constant(Tensor::zeros(&[4]));
        assert!(reconstruction_loss(a, b).is_err());
    }

    #[test]
    fn encoder_loss_examples() {
        let tape = Tape::new();
        let e = |k: f64, r: f64, b: f64| encoder_loss(s(&tape, k), s(&tape, r), b).unwrap().item().unwrap();
        assert_eq!(e(1.0, 2.0, 0.5), 2.5);
        assert_eq!(e(3.0, 2.0, 0.0), 2.0);
        assert_eq!(e(0.0, 2.0, 7.0), 2.0);
    }

    #[test]
    fn discriminator_examples() {
        let tape = Tape::new();
        let d = |r: f64, v: f64, n: f64| discriminator_loss(s(&tape, r), s(&tape, v), s(&tape, n)).unwrap().item().unwrap();
        assert!((d(0.5, 0.5, 0.5) - 3.0 * LN_2).abs() < 1e-14);
        assert!(d(1.0 - 1e-9, 1e-9, 1e-9) < 1e-6);
        let e = (-1.0f64).exp();
        assert!((d(e, 1.0 - e, 1.0 - e) - 3.0).abs() < 1e-12);
        assert!(discriminator_loss(s(&tape, 1.0), s(&tape, 0.5), s(&tape, 0.5)).is_err());
        assert!(discriminator_loss(s(&tape, 0.5), s(&tape, 0.0), s(&tape, 0.5)).is_err());
    }

    #[test]
    fn generator_examples() {
        let tape = Tape::new();
        let w = LossWeights::default();
        let g = |v: f64, n: f64, r: f64, w: &LossWeights| generator_loss(s(&tape, v), s(&tape, n), s(&tape, r), w).unwrap().item().unwrap();
        assert!((g(0.5, 0.5, 0.0, &w) - 2.0 * LN_2).abs() < 1e-14);
        let only_rec = LossWeights {
            lambda_vae: 0.0,
            lambda_noise: 0.0,
            lambda_rec: 0.3,
            ..w
        };
        assert!((g(0.2, 0.7, 2.0, &only_rec) - 0.6).abs() < 1e-15);
        assert!(g(1.0 - 1e-9, 1.0 - 1e-9, 0.0, &w) < 1e-6);
    }

    #[test]
    fn minimax_reference_forms() {
        let tape = Tape::new();
        let v = minimax_discriminator_loss(s(&tape, 0.5), s(&tape, 0.5)).unwrap().item().unwrap();
        assert!((v - 2.0 * LN_2).abs() < 1e-14);
        let v = minimax_generator_loss(s(&tape, 0.5)).unwrap().item().unwrap();
        assert!((v + LN_2).abs() < 1e-14);
    }

    #[test]
    fn defaults() {
        let w = LossWeights::default();
        assert_eq!((w.beta, w.lambda_vae, w.lambda_noise, w.lambda_rec), (1.0, 1.0, 1.0, 1e-4));
        assert!(LossWeights { beta: -1.0, ..w }.validate().is_err());
    }

    #[test]
    fn loss_gradients() {
        let mut rng = seeded(22);
        let w = LossWeights {
            beta: 0.7,
            lambda_vae: 1.3,
            lambda_noise: 0.6,
            lambda_rec: 0.2,
        };
        for _ in 0..10 {
            let mq = normal_tensor(&mut rng, &[3, 4], 1.0);
            let sq = uniform_tensor(&mut rng, &[3, 4], 0.3, 2.0);
            let mp = normal_tensor(&mut rng, &[3, 4], 1.0);
            let sp = uniform_tensor(&mut rng, &[3, 4], 0.3, 2.0);
            let r = check(&[mq.clone(), sq.clone(), mp, sp], |_, v| kl_general(v[0], v[1], v[2], v[3]), DEFAULT_STEP).unwrap();
            assert!(r.max_rel_error() <= 1e-5, "{:?}", r.rel_errors);
            let r = check(&[mq, sq], |_, v| kl_standard(v[0], v[1]), DEFAULT_STEP).unwrap();
            assert!(r.max_rel_error() <= 1e-5);

            let t = uniform_tensor(&mut rng, &[2, 1, 3, 3], 0.0, 1.0);
            let x = uniform_tensor(&mut rng, &[2, 1, 3, 3], 0.05, 0.95);
            let r = check(&[t, x], |_, v| reconstruction_loss(v[0], v[1]), DEFAULT_STEP).unwrap();
            assert!(r.max_rel_error() <= 1e-5);

            let d: Vec<Tensor> = (0..3).map(|_| uniform_tensor(&mut rng, &[4], 0.05, 0.95)).collect();
            let r = check(&d, |_, v| discriminator_loss(v[0], v[1], v[2]), DEFAULT_STEP).unwrap();
            assert!(r.max_rel_error() <= 1e-5);
            let rec = uniform_tensor(&mut rng, &[1], 0.1, 2.0);
            let r = check(&[d[0].clone(), d[1].clone(), rec.clone()], |_, v| generator_loss(v[0], v[1], v[2], &w), DEFAULT_STEP).unwrap();
            assert!(r.max_rel_error() <= 1e-5);
            let r = check(&[rec.clone(), rec], |_, v| encoder_loss(v[0], v[1], w.beta), DEFAULT_STEP).unwrap();
            assert!(r.max_rel_error() <= 1e-5);
        }
    }
}
