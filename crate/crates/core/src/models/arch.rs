//! Declarative layer stacks.

use std::fmt;

use crate::error::{Error, Result};
use crate::layers::Padding;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv2D,
    TranspConv2D,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    LeakyRelu,
    Sigmoid,
}

/// One row of an architecture table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
    pub batch_norm: bool,
    pub activation: Activation,
}

/// Encoder, generator and discriminator stacks plus the image and latent sizes
/// they were designed for.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ArchSpec {
    pub name: String,
    pub image_size: usize,
    pub z_dim: usize,
    pub encoder: Vec<LayerSpec>,
    pub generator: Vec<LayerSpec>,
    pub discriminator: Vec<LayerSpec>,
}

const fn row(kind: LayerKind, filters: usize, stride: usize, padding: Padding, batch_norm: bool, activation: Activation) -> LayerSpec {
    LayerSpec {
        kind,
        filters,
        kernel: 4,
        stride,
        padding,
        batch_norm,
        activation,
    }
}

use Activation::{LeakyRelu, Sigmoid};
use LayerKind::{Conv2D, TranspConv2D};
use Padding::{Same, Valid};

impl ArchSpec {
    /// 32×32 single-ellipse architecture, `z_dim = 5`.
    pub fn ellipse() -> Self {
        Self {
            name: "ellipse".into(),
            image_size: 32,
            z_dim: 5,
            encoder: vec![
                row(Conv2D, 16, 2, Same, false, LeakyRelu),
                row(Conv2D, 32, 2, Same, true, LeakyRelu),
                row(Conv2D, 64, 2, Same, true, LeakyRelu),
                row(Conv2D, 10, 1, Valid, true, LeakyRelu),
            ],
            generator: vec![
                row(TranspConv2D, 64, 1, Valid, true, LeakyRelu),
                row(TranspConv2D, 32, 2, Same, true, LeakyRelu),
                row(TranspConv2D, 16, 2, Same, true, LeakyRelu),
                row(TranspConv2D, 1, 2, Same, true, Sigmoid),
            ],
            discriminator: vec![
                row(Conv2D, 8, 2, Same, false, LeakyRelu),
                row(Conv2D, 16, 2, Same, true, LeakyRelu),
                row(Conv2D, 32, 2, Same, true, LeakyRelu),
                row(Conv2D, 1, 1, Valid, true, Sigmoid),
            ],
        }
    }

    /// 64×64 small-data architecture, `z_dim = 32`.
    pub fn small_data() -> Self {
        Self {
            name: "small-data".into(),
            image_size: 64,
            z_dim: 32,
            encoder: vec![
                row(Conv2D, 16, 2, Same, false, LeakyRelu),
                row(Conv2D, 16, 2, Same, true, LeakyRelu),
                row(Conv2D, 32, 2, Same, true, LeakyRelu),
                row(Conv2D, 64, 2, Same, true, LeakyRelu),
                row(Conv2D, 64, 1, Valid, true, LeakyRelu),
            ],
            generator: vec![
                row(TranspConv2D, 64, 1, Valid, true, LeakyRelu),
                row(TranspConv2D, 32, 2, Same, true, LeakyRelu),
                row(TranspConv2D, 32, 2, Same, true, LeakyRelu),
                row(TranspConv2D, 16, 2, Same, true, LeakyRelu),
                row(TranspConv2D, 1, 2, Same, false, Sigmoid),
            ],
            discriminator: vec![
                row(Conv2D, 4, 2, Same, false, LeakyRelu),
                row(Conv2D, 8, 2, Same, true, LeakyRelu),
                row(Conv2D, 16, 2, Same, true, LeakyRelu),
                row(Conv2D, 32, 2, Same, true, LeakyRelu),
                row(Conv2D, 1, 1, Valid, true, Sigmoid),
            ],
        }
    }

    /// The small-data stack with one stride-2 stage removed from each network
    /// so that it operates on 32×32 tiles (`z_dim = 32`).
    pub fn small_data_32() -> Self {
        let full = Self::small_data();
        let drop = |layers: &[LayerSpec], index: usize| {
            let mut l = layers.to_vec();
            l.remove(index);
            l
        };
        Self {
            name: "small-data-32".into(),
            image_size: 32,
            z_dim: 32,
            encoder: drop(&full.encoder, 3),
            generator: drop(&full.generator, 2),
            discriminator: drop(&full.discriminator, 3),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "ellipse" => Ok(Self::ellipse()),
            "small-data" => Ok(Self::small_data()),
            "small-data-32" => Ok(Self::small_data_32()),
            other => Err(Error::InvalidArgument(format!("unknown architecture `{other}`"))),
        }
    }

    /// Checks channel and spatial consistency of the three stacks.
    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(Error::InvalidArgument(format!("architecture {}: {detail}", self.name)));
        if self.encoder.last().map(|l| l.filters) != Some(2 * self.z_dim) {
            return bad(format!("encoder must end with {} filters (2·z_dim)", 2 * self.z_dim));
        }
        if self.generator.last().map(|l| l.filters) != Some(1) || self.discriminator.last().map(|l| l.filters) != Some(1) {
            return bad("generator and discriminator must end with a single filter".into());
        }
        for (stack, kind) in [(&self.encoder, Conv2D), (&self.discriminator, Conv2D), (&self.generator, TranspConv2D)] {
            if stack.iter().any(|l| l.kind != kind) {
                return bad(format!("unexpected layer type in a {kind:?} stack"));
            }
        }
        let down = spatial_out(self.image_size, &self.encoder)?;
        let disc = spatial_out(self.image_size, &self.discriminator)?;
        let up = spatial_out(1, &self.generator)?;
        if down != 1 || disc != 1 || up != self.image_size {
            return bad(format!(
                "spatial sizes do not close: encoder→{down}, discriminator→{disc}, generator→{up} (image {})",
                self.image_size
            ));
        }
        Ok(())
    }

    /// Canonical line-oriented description, stored in checkpoints.
    pub fn to_text(&self) -> String {
        self.to_string()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::InvalidArgument("empty architecture".into()))?;
        let h: Vec<&str> = header.split_whitespace().collect();
        let [ "arch", name, size, z ] = h.as_slice() else {
            return Err(Error::InvalidArgument(format!("bad architecture header `{header}`")));
        };
        let num = |s: &str| s.parse::<usize>().map_err(|_| Error::InvalidArgument(format!("bad number `{s}`")));
        let mut arch = Self {
            name: name.to_string(),
            image_size: num(size)?,
            z_dim: num(z)?,
            encoder: Vec::new(),
            generator: Vec::new(),
            discriminator: Vec::new(),
        };
        for line in lines {
            let f: Vec<&str> = line.split_whitespace().collect();
            let [net, kind, filters, kernel, stride, padding, bn, act] = f.as_slice() else {
                return Err(Error::InvalidArgument(format!("bad layer line `{line}`")));
            };
            let spec = LayerSpec {
                kind: match *kind {
                    "conv" => Conv2D,
                    "transp" => TranspConv2D,
                    k => return Err(Error::InvalidArgument(format!("bad layer type `{k}`"))),
                },
                filters: num(filters)?,
                kernel: num(kernel)?,
                stride: num(stride)?,
                padding: match *padding {
                    "same" => Same,
                    "valid" => Valid,
                    p => return Err(Error::InvalidArgument(format!("bad padding `{p}`"))),
                },
                batch_norm: match *bn {
                    "bn" => true,
                    "-" => false,
                    b => return Err(Error::InvalidArgument(format!("bad batch-norm flag `{b}`"))),
                },
                activation: match *act {
                    "leaky" => LeakyRelu,
                    "sigmoid" => Sigmoid,
                    a => return Err(Error::InvalidArgument(format!("bad activation `{a}`"))),
                },
            };
            match *net {
                "enc" => arch.encoder.push(spec),
                "gen" => arch.generator.push(spec),
                "disc" => arch.discriminator.push(spec),
                n => return Err(Error::InvalidArgument(format!("bad network `{n}`"))),
            }
        }
        arch.validate()?;
        Ok(arch)
    }

    /// 64-bit FNV-1a of the canonical text.
    pub fn hash(&self) -> u64 {
        self.to_text().bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
        })
    }
}

fn spatial_out(mut size: usize, layers: &[LayerSpec]) -> Result<usize> {
    use crate::layers::ConvGeometry;
    for l in layers {
        size = match l.kind {
            Conv2D => ConvGeometry::forward(size, size, l.kernel, l.stride, l.padding)?.h_out,
            TranspConv2D => ConvGeometry::transposed(size, size, l.kernel, l.stride, l.padding)?.h,
        };
    }
    Ok(size)
}

impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "arch {} {} {}", self.name, self.image_size, self.z_dim)?;
        for (net, layers) in [("enc", &self.encoder), ("gen", &self.generator), ("disc", &self.discriminator)] {
            for l in layers.iter() {
                writeln!(
                    f,
                    "{net} {} {} {} {} {} {} {}",
                    match l.kind {
                        Conv2D => "conv",
                        TranspConv2D => "transp",
                    },
                    l.filters,
                    l.kernel,
                    l.stride,
                    match l.padding {
                        Same => "same",
                        Valid => "valid",
                    },
                    if l.batch_norm { "bn" } else { "-" },
                    match l.activation {
                        LeakyRelu => "leaky",
                        Sigmoid => "sigmoid",
                    },
                )?;
            }
        }
        Ok(())
    }
}
