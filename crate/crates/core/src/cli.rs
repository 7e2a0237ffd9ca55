//! Command-line interface.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::data::{self, DataSet, Microstructure};
use crate::descriptors::{self, MetricRow};
use crate::error::Error;
use crate::models::checkpoint;
use crate::rng::seeded;
use crate::trainer::{self, OutputPaths, TrainConfig, Trainer};

#[derive(Debug, Parser)]
#[command(name = "davegan", version, about = "Hybrid beta-VAE/GAN for two-phase microstructures")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Ellipse,
    SmallData,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Kind {
    Ellipse,
    Checkerboard,
    Tiles,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricMode {
    Rec,
    Gen,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on a directory of graymaps or a manifest.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "ellipse")]
        preset: Preset,
        /// key = value overrides applied after the preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Start from these weights instead of a fresh initialization.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Decode random latents.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 16)]
        num: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write G(mu(x)) for each input as NAME.recon.pgm.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        input: Vec<PathBuf>,
        /// Output directory; defaults to each input's directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Latent traversal grid: one row per latent dimension.
    Traverse {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 3.0)]
        range: f64,
        #[arg(long, default_value_t = 13)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Synthesize a dataset with a manifest.
    MakeData {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        num: Option<usize>,
        /// Checkerboard cell size.
        #[arg(long, default_value_t = 8)]
        cell: usize,
        /// Source image for tiles.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        tile: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Descriptor errors between two image sets.
    Metrics {
        #[arg(long)]
        set_a: PathBuf,
        #[arg(long)]
        set_b: PathBuf,
        #[arg(long, value_enum)]
        mode: MetricMode,
        /// Phase levels used for rounding, comma separated.
        #[arg(long, default_value = "0,1", value_delimiter = ',')]
        levels: Vec<f64>,
        /// Also write the CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Failure of a command, split by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn require_exists(path: &Path, what: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(usage(format!("{what} not found: {}", path.display())))
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e).into())
}

fn write_pair(dir: &Path, stem: &str, m: &Microstructure) -> CliResult<()> {
    data::write_image(&dir.join(format!("{stem}.pgm")), m)?;
    data::write_image(&dir.join(format!("{stem}.rounded.pgm")), &m.rounded(&[0.0, 1.0])?)?;
    Ok(())
}

fn load_checkpoint(path: &Path) -> CliResult<crate::models::HybridModel> {
    require_exists(path, "checkpoint")?;
    Ok(checkpoint::load(path)?)
}

fn load_sized(path: &Path, size: usize) -> CliResult<Microstructure> {
    require_exists(path, "input image")?;
    let m = data::read_image(path)?;
    if m.height() != size || m.width() != size {
        return Err(usage(format!(
            "{} is {}x{}, the model expects {size}x{size}",
            path.display(),
            m.height(),
            m.width()
        )));
    }
    Ok(m)
}

fn resolve_set(path: &Path) -> CliResult<(Vec<PathBuf>, Vec<Microstructure>)> {
    require_exists(path, "image set")?;
    let paths = data::resolve_images(path)?;
    if paths.is_empty() {
        return Err(usage(format!("no images listed in {}", path.display())));
    }
    let images = data::load_images(&paths)?;
    Ok((paths, images))
}

/// Runs one parsed command. `log` receives progress lines, `out` results.
pub fn execute(cmd: Command, out: &mut dyn std::io::Write, log: &mut dyn std::io::Write) -> CliResult<()> {
    let say = |w: &mut dyn std::io::Write, s: String| {
        let _ = writeln!(w, "{s}");
    };
    match cmd {
        Command::Train {
            data: source,
            out: dir,
            preset,
            config,
            epochs,
            resume,
            seed,
        } => {
            let mut cfg = TrainConfig::preset(match preset {
                Preset::Ellipse => "ellipse",
                Preset::SmallData => "small-data",
            })?;
            if let Some(path) = &config {
                require_exists(path, "config file")?;
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                cfg.apply_text(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            cfg.validate().map_err(|e| usage(e.to_string()))?;
            require_exists(&source, "data")?;
            let (_, images) = resolve_set(&source)?;
            let dataset = DataSet::new(images, vec![0.0, 1.0])?;
            let arch = cfg.arch_spec()?;
            if dataset.size != arch.image_size {
                return Err(usage(format!(
                    "images are {0}x{0} but architecture `{1}` expects {2}x{2}; set `arch` in the config",
                    dataset.size, arch.name, arch.image_size
                )));
            }
            let mut t = match &resume {
                Some(path) => Trainer::with_model(load_checkpoint(path)?, cfg.clone())?,
                None => Trainer::new(cfg.clone())?,
            };
            let paths = OutputPaths::new(&dir);
            let every = (cfg.epochs / 20).max(1);
            say(log, format!("training {} samples for {} epochs ({})", dataset.len(), cfg.epochs, arch.name));
            let records = trainer::train(&mut t, &dataset, Some(&paths), &mut |epoch, r| {
                if (epoch + 1) % every == 0 {
                    let _ = writeln!(
                        log,
                        "epoch {} step {} l_disc {:.4} l_gen {:.4} l_enc {:.4} l_kld {:.4} l_rec {:.4}",
                        epoch + 1,
                        r.step,
                        r.l_disc,
                        r.l_gen,
                        r.l_enc,
                        r.l_kld,
                        r.l_rec
                    );
                }
            })?;
            say(out, format!("{} steps; model written to {}", records.len(), paths.final_checkpoint().display()));
        }
        Command::Generate {
            checkpoint,
            num,
            out: dir,
            seed,
        } => {
            let model = load_checkpoint(&checkpoint)?;
            create_dir(&dir)?;
            let images = trainer::generate(&model, num, &mut seeded(seed))?;
            for (i, m) in images.iter().enumerate() {
                write_pair(&dir, &format!("sample_{i:04}"), m)?;
            }
            say(out, format!("wrote {} samples to {}", images.len(), dir.display()));
        }
        Command::Reconstruct {
            checkpoint,
            input,
            out: dir,
            seed: _,
        } => {
            let model = load_checkpoint(&checkpoint)?;
            let size = model.image_size();
            let images = input.iter().map(|p| load_sized(p, size)).collect::<CliResult<Vec<_>>>()?;
            let recon = trainer::reconstruct(&model, &images, 64)?;
            if let Some(d) = &dir {
                create_dir(d)?;
            }
            for (path, m) in input.iter().zip(&recon) {
                let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
                let target = dir.clone().unwrap_or_else(|| path.parent().map(Path::to_path_buf).unwrap_or_default());
                write_pair(&target, &format!("{stem}.recon"), m)?;
            }
            say(out, format!("reconstructed {} images", recon.len()));
        }
        Command::Traverse {
            checkpoint,
            input,
            range,
            steps,
            out: file,
            seed: _,
        } => {
            if !(range >= 0.0 && range.is_finite()) || steps == 0 {
                return Err(usage("--range must be non-negative and --steps positive"));
            }
            let model = load_checkpoint(&checkpoint)?;
            let x = load_sized(&input, model.image_size())?;
            let rows = trainer::traversal_grid(&model, &x, range, steps)?;
            let n_rows = rows.len();
            let tiles: Vec<Microstructure> = rows.into_iter().flatten().collect();
            let grid = data::assemble_grid(&tiles, n_rows, steps)?;
            if let Some(parent) = file.parent().filter(|p| !p.as_os_str().is_empty()) {
                create_dir(parent)?;
            }
            data::write_image(&file, &grid)?;
            say(out, format!("wrote {}x{} traversal grid to {}", grid.height(), grid.width(), file.display()));
        }
        Command::MakeData {
            kind,
            size,
            num,
            cell,
            input,
            tile,
            out: dir,
            seed,
        } => {
            let images: Vec<Microstructure> = match kind {
                Kind::Ellipse => {
                    let n = num.unwrap_or(100);
                    let size = size.unwrap_or(32);
                    if n == 0 {
                        return Err(usage("--num must be positive"));
                    }
                    data::sample_ellipse_dataset(n, size, &mut seeded(seed))?.0.samples
                }
                Kind::Checkerboard => {
                    if num.is_some() {
                        return Err(usage("--num does not apply to checkerboard"));
                    }
                    let size = size.unwrap_or(128);
                    vec![data::make_checkerboard(size, cell).map_err(|e| usage(e.to_string()))?]
                }
                Kind::Tiles => {
                    let src = input.ok_or_else(|| usage("--kind tiles needs --input"))?;
                    require_exists(&src, "input image")?;
                    let image = data::read_image(&src)?;
                    data::tile_micrograph(&image, tile).map_err(|e| usage(e.to_string()))?
                }
            };
            create_dir(&dir)?;
            let prefix = match kind {
                Kind::Ellipse => "ellipse",
                Kind::Checkerboard => "checkerboard",
                Kind::Tiles => "tile",
            };
            let mut names = Vec::with_capacity(images.len());
            for (i, m) in images.iter().enumerate() {
                let name = format!("{prefix}_{i:05}.pgm");
                data::write_image(&dir.join(&name), m)?;
                names.push(name);
            }
            data::write_manifest(&dir.join(data::MANIFEST_NAME), &names)?;
            say(out, format!("wrote {} images to {}", names.len(), dir.display()));
        }
        Command::Metrics {
            set_a,
            set_b,
            mode,
            levels,
            out: csv_path,
            seed: _,
        } => {
            if levels.len() < 2 || levels.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(usage("--levels needs at least two increasing values"));
            }
            let (paths_a, a) = resolve_set(&set_a)?;
            let (_, b) = resolve_set(&set_b)?;
            let vf = |m: &Microstructure| -> CliResult<f64> {
                let f = descriptors::round_to_indicator(m, &levels)?;
                Ok(descriptors::volume_fraction(&f, descriptors::REFERENCE_PHASE))
            };
            let (errors, label) = match mode {
                MetricMode::Rec => {
                    if a.len() != b.len() {
                        return Err(usage(format!("rec mode needs equal set sizes, got {} and {}", a.len(), b.len())));
                    }
                    (descriptors::error_rec_per_sample(&a, &b, &levels)?, "E_rec")
                }
                MetricMode::Gen => (descriptors::error_gen_per_sample(&a, &b, &levels)?, "E_gen"),
            };
            let mut rows = Vec::with_capacity(a.len());
            for ((path, m), e) in paths_a.iter().zip(&a).zip(&errors) {
                rows.push(MetricRow {
                    structure_id: path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
                    e_rec: (mode == MetricMode::Rec).then_some(*e),
                    e_gen: (mode == MetricMode::Gen).then_some(*e),
                    v_f: vf(m)?,
                });
            }
            let csv = descriptors::metrics_csv(&rows);
            let mean = errors.iter().sum::<f64>() / errors.len() as f64;
            let _ = write!(out, "{csv}");
            say(log, format!("{label} = {mean}"));
            if let Some(p) = &csv_path {
                fs::write(p, &csv).map_err(|e| Error::io(p, e))?;
            }
        }
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn std::io::Write, log: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = if code == 0 { write!(out, "{e}") } else { write!(log, "{e}") };
            return code;
        }
    };
    match execute(cli.command, out, log) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(log, "error: {e}");
            e.exit_code()
        }
    }
}
