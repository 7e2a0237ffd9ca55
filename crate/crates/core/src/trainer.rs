//! Training loop: per batch one discriminator, one generator and one encoder
//! update, each driven by its own loss.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::augment::{self, AugmentConfig, LatentAugParams};
use crate::autodiff::{concat, Tape, Tensor, Var};
use crate::data::{self, DataSet, Microstructure};
use crate::descriptors;
use crate::error::{Error, Result};
use crate::layers::Adam;
use crate::losses::{self, LossWeights};
use crate::models::{checkpoint, reparametrize, sample_noise, ArchSpec, HybridModel, Mode, Network};
use crate::rng::{seeded, Rng};

/// Hyperparameters of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub preset: String,
    pub arch: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub z_dim: usize,
    pub lr_gen: f64,
    pub lr_disc: f64,
    pub lr_enc: f64,
    pub weights: LossWeights,
    pub aug: AugmentConfig,
    pub seed: u64,
    /// Epochs between checkpoints; 0 means every 10% of the run.
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn ellipse() -> Self {
        Self {
            preset: "ellipse".into(),
            arch: "ellipse".into(),
            epochs: 200,
            batch_size: 32,
            z_dim: 5,
            lr_gen: 1e-4,
            lr_disc: 4e-5,
            lr_enc: 1e-4,
            weights: LossWeights::default(),
            aug: AugmentConfig::default(),
            seed: 0,
            checkpoint_every: 0,
        }
    }

    pub fn small_data() -> Self {
        Self {
            preset: "small-data".into(),
            arch: "small-data".into(),
            epochs: 20_000,
            batch_size: 4,
            z_dim: 32,
            ..Self::ellipse()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "ellipse" => Ok(Self::ellipse()),
            "small-data" => Ok(Self::small_data()),
            other => Err(Error::InvalidArgument(format!("unknown preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |d: &str| Err(Error::InvalidArgument(d.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2 (batch normalization)");
        }
        for lr in [self.lr_gen, self.lr_disc, self.lr_enc] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad("learning rates must be positive");
            }
        }
        self.weights.validate()?;
        self.aug.validate()?;
        let arch = ArchSpec::preset(&self.arch)?;
        if arch.z_dim != self.z_dim {
            return Err(Error::InvalidArgument(format!(
                "z_dim {} does not match architecture `{}` (z_dim {})",
                self.z_dim, self.arch, arch.z_dim
            )));
        }
        Ok(())
    }

    pub fn arch_spec(&self) -> Result<ArchSpec> {
        ArchSpec::preset(&self.arch)
    }

    pub fn checkpoint_interval(&self) -> usize {
        if self.checkpoint_every > 0 {
            self.checkpoint_every
        } else {
            (self.epochs / 10).max(1)
        }
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("cannot parse `{v}`"))
        }
        match key {
            "preset" => *self = Self::preset(value).map_err(|e| e.to_string())?,
            "arch" => self.arch = value.to_string(),
            "epochs" => self.epochs = num(value)?,
            "batch_size" => self.batch_size = num(value)?,
            "z_dim" => self.z_dim = num(value)?,
            "lr_gen" => self.lr_gen = num(value)?,
            "lr_disc" => self.lr_disc = num(value)?,
            "lr_enc" => self.lr_enc = num(value)?,
            "beta" => self.weights.beta = num(value)?,
            "lambda_vae" => self.weights.lambda_vae = num(value)?,
            "lambda_noise" => self.weights.lambda_noise = num(value)?,
            "lambda_rec" => self.weights.lambda_rec = num(value)?,
            "aug.translation_std_frac" => self.aug.translation_std_frac = num(value)?,
            "aug.latent_strength" => self.aug.latent_strength = num(value)?,
            "aug.prior_jitter" => self.aug.prior_jitter = num(value)?,
            "seed" => self.seed = num(value)?,
            "checkpoint_every" => self.checkpoint_every = num(value)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Applies a config file of `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config {
                    line: i + 1,
                    detail: format!("expected key = value, got `{line}`"),
                });
            };
            self.set(k.trim(), v.trim()).map_err(|detail| Error::Config { line: i + 1, detail })?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let w = &self.weights;
        let a = &self.aug;
        let mut s = String::new();
        let _ = writeln!(s, "preset = {}", self.preset);
        for (k, v) in [
            ("arch", self.arch.clone()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("z_dim", self.z_dim.to_string()),
            ("lr_gen", self.lr_gen.to_string()),
            ("lr_disc", self.lr_disc.to_string()),
            ("lr_enc", self.lr_enc.to_string()),
            ("beta", w.beta.to_string()),
            ("lambda_vae", w.lambda_vae.to_string()),
            ("lambda_noise", w.lambda_noise.to_string()),
            ("lambda_rec", w.lambda_rec.to_string()),
            ("aug.translation_std_frac", a.translation_std_frac.to_string()),
            ("aug.latent_strength", a.latent_strength.to_string()),
            ("aug.prior_jitter", a.prior_jitter.to_string()),
            ("seed", self.seed.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
        ] {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

/// Losses logged for one optimization step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub l_disc: f64,
    pub l_gen: f64,
    pub l_enc: f64,
    pub l_kld: f64,
    pub l_rec: f64,
}

impl LossRecord {
    fn all_finite(&self) -> bool {
        [self.l_disc, self.l_gen, self.l_enc, self.l_kld, self.l_rec].iter().all(|v| v.is_finite())
    }
}

pub const LOG_HEADER: &str = "step,epoch,l_disc,l_gen,l_enc,l_kld,l_rec";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossLog {
    pub records: Vec<LossRecord>,
}

impl LossLog {
    pub fn push(&mut self, r: LossRecord) {
        self.records.push(r);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// CSV text; values use the shortest exact decimal form.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(LOG_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(s, "{},{},{},{},{},{},{}", r.step, r.epoch, r.l_disc, r.l_gen, r.l_enc, r.l_kld, r.l_rec);
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Which of the three updates a step applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Phases {
    pub disc: bool,
    pub gen: bool,
    pub enc: bool,
}

impl Phases {
    pub const ALL: Self = Self {
        disc: true,
        gen: true,
        enc: true,
    };
}

/// Model plus optimizer state and the training random stream.
pub struct Trainer {
    pub model: HybridModel,
    pub config: TrainConfig,
    adam_enc: Adam,
    adam_gen: Adam,
    adam_disc: Adam,
    rng: Rng,
    step: usize,
}

// Keeps the training stream distinct from the initialization stream of the
// same seed.
const STREAM_OFFSET: u64 = 0x5DEE_CE66_D1CE_4E5B;

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = HybridModel::new(config.arch_spec()?, config.seed)?;
        Self::with_model(model, config)
    }

    /// Continues from existing weights with fresh optimizer state.
    pub fn with_model(model: HybridModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if model.arch != config.arch_spec()? {
            return Err(Error::InvalidArgument(format!(
                "model architecture `{}` differs from configured `{}`",
                model.arch.name, config.arch
            )));
        }
        Ok(Self {
            adam_enc: Adam::new(config.lr_enc),
            adam_gen: Adam::new(config.lr_gen),
            adam_disc: Adam::new(config.lr_disc),
            rng: seeded(config.seed ^ STREAM_OFFSET),
            step: 0,
            model,
            config,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn rng_mut(&mut self) -> &mut Rng {
        &mut self.rng
    }

    /// One discriminator, generator and encoder update on `batch`
    /// (`[B, 1, H, W]`, `B ≥ 2`).
    ///
    /// Random draws, in order: reparametrization noise, generator noise,
    /// discriminator translations, reconstruction translations, translations
    /// for the generator's discriminator pass, prior, latent augmentation.
    pub fn train_step(&mut self, batch: &Tensor, epoch: usize) -> Result<LossRecord> {
        self.train_step_phases(batch, epoch, Phases::ALL)
    }

    /// Like [`Trainer::train_step`] but applies only the selected updates.
    /// Losses and random draws are the same either way.
    pub fn train_step_phases(&mut self, batch: &Tensor, epoch: usize, phases: Phases) -> Result<LossRecord> {
        self.model.check_images(batch.shape())?;
        let b = batch.shape()[0];
        if b < 2 {
            return Err(Error::InvalidArgument("training batches need at least 2 samples".into()));
        }
        let step = self.step;
        let z_dim = self.model.z_dim();
        let size = self.model.image_size();
        let cfg = &self.config;
        let rng = &mut self.rng;

        let eps = sample_noise(rng, b, z_dim);
        let z_noise = sample_noise(rng, b, z_dim);
        let u_disc = augment::sample_translation(rng, 3 * b, size, cfg.aug.translation_std_frac)?;
        let u_rec = augment::sample_translation(rng, b, size, cfg.aug.translation_std_frac)?;
        let u_gen = augment::sample_translation(rng, 3 * b, size, cfg.aug.translation_std_frac)?;
        let (mu_prior, sigma_prior) = augment::sample_prior(rng, b, z_dim, cfg.aug.prior_jitter);
        let latent = LatentAugParams::sample(rng, z_dim);

        let tape = Tape::new();
        let enc = self.model.encoder.bind(&tape);
        let gen = self.model.generator.bind(&tape);
        let x_real = tape.constant(batch.clone());

        let (dist, enc_stats) = self.model.encode(&enc, x_real, Mode::Train)?;
        let z_vae = reparametrize(&dist, tape.constant(eps))?;
        let z_all = concat(&[z_vae, tape.constant(z_noise)])?;
        let (x_fake, gen_stats) = self.model.generate(&gen, z_all, Mode::Train)?;
        let x_vae = x_fake.slice_batch(0, b)?;

        // discriminator update on detached generations
        let disc = self.model.discriminator.bind(&tape);
        let triple = concat(&[x_real, x_fake.detach()])?;
        let (scores, disc_stats) = self.model.discriminate(&disc, augment::translate_periodic(triple, &u_disc)?, Mode::Train)?;
        let l_disc = losses::discriminator_loss(scores.slice_batch(0, b)?, scores.slice_batch(b, 2 * b)?, scores.slice_batch(2 * b, 3 * b)?)?;
        check_finite(step, "l_disc", l_disc)?;
        if phases.disc {
            let g = tape.backward_for(l_disc, disc.vars())?;
            apply(&mut self.adam_disc, &mut self.model.discriminator, disc.grads(&g), step)?;
            self.model.discriminator.absorb(&disc_stats);
        }

        // generator and encoder share the reconstruction term
        let t_real = augment::translate_periodic(x_real, &u_rec)?;
        let t_vae = augment::translate_periodic(x_vae, &u_rec)?;
        let l_rec = losses::reconstruction_loss(t_real, t_vae)?;

        let disc_frozen = self.model.discriminator.bind_frozen(&tape);
        let triple = concat(&[x_real, x_fake])?;
        let (scores, _) = self.model.discriminate(&disc_frozen, augment::translate_periodic(triple, &u_gen)?, Mode::Train)?;
        let l_gen = losses::generator_loss(scores.slice_batch(b, 2 * b)?, scores.slice_batch(2 * b, 3 * b)?, l_rec, &cfg.weights)?;

        let strength = cfg.aug.latent_strength;
        let l_kld = augment::augmented_kl(
            dist.mu,
            dist.sigma(),
            tape.constant(mu_prior),
            tape.constant(sigma_prior),
            &latent,
            strength,
        )?;
        let l_enc = losses::encoder_loss(l_kld, l_rec, cfg.weights.beta)?;

        let record = LossRecord {
            step,
            epoch,
            l_disc: l_disc.item()?,
            l_gen: l_gen.item()?,
            l_enc: l_enc.item()?,
            l_kld: l_kld.item()?,
            l_rec: l_rec.item()?,
        };
        if !record.all_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("{record:?}"),
            });
        }

        if phases.gen {
            let g = tape.backward_for(l_gen, gen.vars())?;
            apply(&mut self.adam_gen, &mut self.model.generator, gen.grads(&g), step)?;
            self.model.generator.absorb(&gen_stats);
        }
        if phases.enc {
            let g = tape.backward_for(l_enc, enc.vars())?;
            apply(&mut self.adam_enc, &mut self.model.encoder, enc.grads(&g), step)?;
            self.model.encoder.absorb(&enc_stats);
        }

        self.step += 1;
        Ok(record)
    }

    /// One pass over `data` in a freshly shuffled order. A trailing batch
    /// with fewer than two samples is skipped.
    pub fn train_epoch(&mut self, data: &Tensor, epoch: usize, log: &mut LossLog) -> Result<()> {
        let n = data.shape()[0];
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        for chunk in order.chunks(self.config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let parts: Vec<Tensor> = chunk.iter().map(|&i| data.slice_batch(i, i + 1)).collect::<Result<_>>()?;
            let refs: Vec<&Tensor> = parts.iter().collect();
            let batch = Tensor::concat(&refs)?;
            let r = self.train_step(&batch, epoch)?;
            log.push(r);
        }
        Ok(())
    }
}

fn check_finite(step: usize, name: &str, v: Var<'_>) -> Result<()> {
    let x = v.item()?;
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            step,
            detail: format!("{name} = {x}"),
        })
    }
}

fn apply(adam: &mut Adam, net: &mut Network, grads: Vec<Tensor>, step: usize) -> Result<()> {
    let mut params = net.params_mut();
    let mut named: Vec<(&str, &mut Tensor)> = params.iter_mut().map(|(n, t)| (n.as_str(), &mut **t)).collect();
    adam.step(&mut named, &grads).map_err(|e| match e {
        Error::NonFiniteGradient(name) => Error::NonFiniteLoss {
            step,
            detail: format!("non-finite gradient for `{name}`"),
        },
        other => other,
    })?;
    net.round_to_f32();
    Ok(())
}

/// Where `train` writes its artifacts.
#[derive(Clone, Debug)]
pub struct OutputPaths {
    pub dir: PathBuf,
}

impl OutputPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn log(&self) -> PathBuf {
        self.dir.join("loss_log.csv")
    }

    pub fn config(&self) -> PathBuf {
        self.dir.join("config.txt")
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("model.dvgn")
    }

    pub fn checkpoint(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("checkpoint_epoch{epoch:06}.dvgn"))
    }
}

/// Runs `config.epochs` epochs. With `out`, writes the resolved config, the
/// loss log and checkpoints at the configured cadence plus a final one.
/// `progress` is called after every epoch with the last record.
pub fn train(
    trainer: &mut Trainer,
    dataset: &DataSet,
    out: Option<&OutputPaths>,
    progress: &mut dyn FnMut(usize, &LossRecord),
) -> Result<LossLog> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let refs: Vec<&Microstructure> = dataset.samples.iter().collect();
    let data = data::to_batch(&refs)?;
    trainer.model.check_images(data.shape())?;
    if let Some(o) = out {
        fs::create_dir_all(&o.dir).map_err(|e| Error::io(&o.dir, e))?;
        fs::write(o.config(), trainer.config.to_text()).map_err(|e| Error::io(o.config(), e))?;
    }
    let every = trainer.config.checkpoint_interval();
    let mut log = LossLog::default();
    for epoch in 0..trainer.config.epochs {
        trainer.train_epoch(&data, epoch, &mut log)?;
        if let Some(last) = log.records.last() {
            progress(epoch, last);
        }
        let done = epoch + 1;
        if let Some(o) = out {
            if done % every == 0 && done < trainer.config.epochs {
                checkpoint::save(&trainer.model, &o.checkpoint(done))?;
                log.write(&o.log())?;
            }
        }
    }
    if let Some(o) = out {
        checkpoint::save(&trainer.model, &o.final_checkpoint())?;
        log.write(&o.log())?;
    }
    Ok(log)
}

/// Decodes latent sweeps around the encoding of `x_ref`: row `d` varies
/// `z[d]` over `μ_d ± range` in `steps` even increments.
pub fn traversal_grid(model: &HybridModel, x_ref: &Microstructure, range: f64, steps: usize) -> Result<Vec<Vec<Microstructure>>> {
    if steps == 0 {
        return Err(Error::InvalidArgument("traversal needs at least one step".into()));
    }
    let x = data::to_batch(&[x_ref])?;
    model.check_images(x.shape())?;
    let (mu, _) = model.encode_eval(&x)?;
    let z_dim = model.z_dim();
    let mut rows = Vec::with_capacity(z_dim);
    for d in 0..z_dim {
        let mut z = Tensor::zeros(&[steps, z_dim]);
        for k in 0..steps {
            let t = if steps == 1 { 0.0 } else { (2 * k) as f64 / (steps - 1) as f64 - 1.0 };
            let row = &mut z.data_mut()[k * z_dim..(k + 1) * z_dim];
            row.copy_from_slice(mu.data());
            row[d] += range * t;
        }
        rows.push(data::from_batch(&model.generate_eval(&z)?)?);
    }
    Ok(rows)
}

/// `G(μ(x))` for every image, in batches.
pub fn reconstruct(model: &HybridModel, images: &[Microstructure], batch: usize) -> Result<Vec<Microstructure>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch.max(1)) {
        let refs: Vec<&Microstructure> = chunk.iter().collect();
        out.extend(data::from_batch(&model.reconstruct_eval(&data::to_batch(&refs)?)?)?);
    }
    Ok(out)
}

/// Decodes standard-normal latents.
pub fn generate(model: &HybridModel, count: usize, rng: &mut Rng) -> Result<Vec<Microstructure>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    data::from_batch(&model.generate_eval(&sample_noise(rng, count, model.z_dim()))?)
}

/// Mean descriptor error between images and their reconstructions.
pub fn reconstruction_error(model: &HybridModel, images: &[Microstructure], levels: &[f64]) -> Result<f64> {
    let recon = reconstruct(model, images, 64)?;
    descriptors::error_rec(images, &recon, levels)
}
