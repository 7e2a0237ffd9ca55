//! Two-point correlation maps and the descriptor errors built on them.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::data::{nearest_level, Microstructure};
use crate::error::{Error, Result};

/// Phase labels for each pixel of an image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndicatorField {
    height: usize,
    width: usize,
    phases: usize,
    labels: Vec<usize>,
}

impl IndicatorField {
    pub fn new(height: usize, width: usize, phases: usize, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != height * width || labels.iter().any(|&l| l >= phases) {
            return Err(Error::InvalidArgument(format!(
                "{} labels for a {height}x{width} field with {phases} phases",
                labels.len()
            )));
        }
        Ok(Self { height, width, phases, labels })
    }

    /// Two-phase field from a 0/1 mask.
    pub fn from_mask(height: usize, width: usize, mask: &[bool]) -> Result<Self> {
        Self::new(height, width, 2, mask.iter().map(|&m| m as usize).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn phases(&self) -> usize {
        self.phases
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// The 0/1 indicator of one phase.
    pub fn indicator(&self, phase: usize) -> Vec<f64> {
        self.labels.iter().map(|&l| (l == phase) as u8 as f64).collect()
    }
}

/// Assigns each pixel to the nearest phase level (ties to the lower level).
pub fn round_to_indicator(x: &Microstructure, levels: &[f64]) -> Result<IndicatorField> {
    if levels.is_empty() {
        return Err(Error::InvalidArgument("empty phase level set".into()));
    }
    let labels = x.pixels().iter().map(|&p| nearest_level(p, levels)).collect();
    Ok(IndicatorField {
        height: x.height(),
        width: x.width(),
        phases: levels.len(),
        labels,
    })
}

/// Periodic two-point correlation indexed by displacement `(dy, dx)`.
#[derive(Clone, Debug, PartialEq)]
pub struct S2Map {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl S2Map {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, dy: usize, dx: usize) -> f64 {
        self.values[dy * self.width + dx]
    }
}

fn fft2(buf: &mut [Complex<f64>], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    row.process(buf);
    let mut column = vec![Complex::default(); h];
    for j in 0..w {
        for i in 0..h {
            column[i] = buf[i * w + j];
        }
        col.process(&mut column);
        for i in 0..h {
            buf[i * w + j] = column[i];
        }
    }
}

/// `S2[r] = (1/HW) Σ_p I(p) I(p + r)` with periodic wrap, via FFT.
pub fn s2(field: &IndicatorField, phase: usize) -> S2Map {
    let (h, w) = (field.height, field.width);
    let mut buf: Vec<Complex<f64>> = field.indicator(phase).into_iter().map(|v| Complex::new(v, 0.0)).collect();
    fft2(&mut buf, h, w, false);
    for c in &mut buf {
        *c = Complex::new(c.norm_sqr(), 0.0);
    }
    fft2(&mut buf, h, w, true);
    // the unnormalized inverse contributes another factor HW
    let n = (h * w) as f64;
    let values = buf.iter().map(|c| (c.re / (n * n)).clamp(0.0, 1.0)).collect();
    S2Map { height: h, width: w, values }
}

/// Direct `O((HW)²)` enumeration of the same quantity.
pub fn s2_direct(field: &IndicatorField, phase: usize) -> S2Map {
    let (h, w) = (field.height, field.width);
    let ind = field.indicator(phase);
    let mut values = vec![0.0; h * w];
    for dy in 0..h {
        for dx in 0..w {
            let mut acc = 0.0;
            for i in 0..h {
                for j in 0..w {
                    acc += ind[i * w + j] * ind[((i + dy) % h) * w + (j + dx) % w];
                }
            }
            values[dy * w + dx] = acc / (h * w) as f64;
        }
    }
    S2Map { height: h, width: w, values }
}

pub fn volume_fraction(field: &IndicatorField, phase: usize) -> f64 {
    let count = field.labels.iter().filter(|&&l| l == phase).count();
    count as f64 / field.labels.len() as f64
}

/// Root-mean-square difference over all displacements.
pub fn descriptor_error(a: &S2Map, b: &S2Map) -> Result<f64> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::shape("descriptor_error", &[a.height, a.width], &[b.height, b.width]));
    }
    let sq: f64 = a.values.iter().zip(&b.values).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((sq / a.values.len() as f64).sqrt())
}

/// Phase whose correlations are compared.
pub const REFERENCE_PHASE: usize = 1;

/// Reference-phase S2 map of a rounded image.
pub fn structure_s2(x: &Microstructure, levels: &[f64]) -> Result<S2Map> {
    if levels.len() <= REFERENCE_PHASE {
        return Err(Error::InvalidArgument(format!("need at least two phase levels, got {levels:?}")));
    }
    Ok(s2(&round_to_indicator(x, levels)?, REFERENCE_PHASE))
}

fn maps(xs: &[Microstructure], levels: &[f64]) -> Result<Vec<S2Map>> {
    xs.iter().map(|x| structure_s2(x, levels)).collect()
}

/// Per-pair reconstruction errors.
pub fn error_rec_per_sample(originals: &[Microstructure], recons: &[Microstructure], levels: &[f64]) -> Result<Vec<f64>> {
    if originals.len() != recons.len() {
        return Err(Error::InvalidArgument(format!(
            "{} originals vs {} reconstructions",
            originals.len(),
            recons.len()
        )));
    }
    if originals.is_empty() {
        return Err(Error::EmptyReduction("error_rec"));
    }
    let a = maps(originals, levels)?;
    let b = maps(recons, levels)?;
    a.iter().zip(&b).map(|(x, y)| descriptor_error(x, y)).collect()
}

/// Mean descriptor error between paired originals and reconstructions.
pub fn error_rec(originals: &[Microstructure], recons: &[Microstructure], levels: &[f64]) -> Result<f64> {
    let e = error_rec_per_sample(originals, recons, levels)?;
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

/// For each generated sample, the error to its closest training sample.
pub fn error_gen_per_sample(generated: &[Microstructure], training: &[Microstructure], levels: &[f64]) -> Result<Vec<f64>> {
    if generated.is_empty() || training.is_empty() {
        return Err(Error::EmptyReduction("error_gen"));
    }
    let train = maps(training, levels)?;
    generated
        .iter()
        .map(|g| {
            let sg = structure_s2(g, levels)?;
            let mut best = f64::INFINITY;
            for t in &train {
                best = best.min(descriptor_error(&sg, t)?);
            }
            Ok(best)
        })
        .collect()
}

pub fn error_gen(generated: &[Microstructure], training: &[Microstructure], levels: &[f64]) -> Result<f64> {
    let e = error_gen_per_sample(generated, training, levels)?;
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

/// Mean pairwise descriptor error within one set of rounded images.
pub fn mean_pairwise_error(xs: &[Microstructure], levels: &[f64]) -> Result<f64> {
    if xs.len() < 2 {
        return Err(Error::InvalidArgument("pairwise error needs two samples".into()));
    }
    let m = maps(xs, levels)?;
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..m.len() {
        for j in i + 1..m.len() {
            total += descriptor_error(&m[i], &m[j])?;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// One CSV row of the metrics report.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub structure_id: String,
    pub e_rec: Option<f64>,
    pub e_gen: Option<f64>,
    pub v_f: f64,
}

pub const METRICS_HEADER: &str = "structure_id,e_rec,e_gen,v_f";

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.structure_id, opt(r.e_rec), opt(r.e_gen), r.v_f));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{roll_tensor, TranslationParams};
    use crate::data::{from_batch, make_checkerboard, to_batch};
    use crate::rng::seeded;
    use rand::Rng as _;

    fn random_field(rng: &mut crate::rng::Rng, h: usize, w: usize, p: f64) -> IndicatorField {
        let mask: Vec<bool> = (0..h * w).map(|_| rng.random_bool(p)).collect();
        IndicatorField::from_mask(h, w, &mask).unwrap()
    }

    #[test]
    fn rounding_examples() {
        let x = Microstructure::new(1, 2, vec![0.7, 0.5]).unwrap();
        assert_eq!(round_to_indicator(&x, &[0.0, 1.0]).unwrap().labels(), &[1, 0]);
        let y = Microstructure::new(1, 1, vec![0.6]).unwrap();
        assert_eq!(round_to_indicator(&y, &[0.0, 0.5, 1.0]).unwrap().labels(), &[1]);
        assert!(round_to_indicator(&y, &[]).is_err());
    }

    #[test]
    fn s2_examples() {
        let ones = IndicatorField::from_mask(4, 4, &[true; 16]).unwrap();
        assert!(s2(&ones, 1).values().iter().all(|&v| (v - 1.0).abs() < 1e-15));
        assert!(s2(&ones, 0).values().iter().all(|&v| v.abs() < 1e-15));
        let cb = IndicatorField::from_mask(2, 2, &[true, false, false, true]).unwrap();
        let m = s2(&cb, 1);
        for (dy, dx, want) in [(0, 0, 0.5), (1, 1, 0.5), (1, 0, 0.0), (0, 1, 0.0)] {
            assert!((m.get(dy, dx) - want).abs() < 1e-15);
        }
        assert_eq!(volume_fraction(&cb, 1), 0.5);
        let mut single = vec![false; 16];
        single[5] = true;
        assert_eq!(volume_fraction(&IndicatorField::from_mask(4, 4, &single).unwrap(), 1), 1.0 / 16.0);
    }

    #[test]
    fn fft_matches_enumeration() {
        let mut rng = seeded(1);
        for k in 0..10 {
            let (h, w) = if k % 2 == 0 { (16, 16) } else { (12, 10) };
            let f = random_field(&mut rng, h, w, 0.3);
            let (a, b) = (s2(&f, 1), s2_direct(&f, 1));
            for (x, y) in a.values().iter().zip(b.values()) {
                assert!((x - y).abs() <= 1e-10);
            }
            let vf = volume_fraction(&f, 1);
            assert!((a.get(0, 0) - vf).abs() <= 1e-12);
            for dy in 0..h {
                for dx in 0..w {
                    let v = a.get(dy, dx);
                    assert!((0.0..=a.get(0, 0) + 1e-12).contains(&v));
                    assert!((v - a.get((h - dy) % h, (w - dx) % w)).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn descriptor_error_is_pseudometric() {
        let mut rng = seeded(2);
        let fields: Vec<S2Map> = (0..5).map(|_| s2(&random_field(&mut rng, 8, 8, 0.4), 1)).collect();
        for a in &fields {
            assert_eq!(descriptor_error(a, a).unwrap(), 0.0);
            for b in &fields {
                let e = descriptor_error(a, b).unwrap();
                assert!(e >= 0.0);
                assert_eq!(e, descriptor_error(b, a).unwrap());
            }
        }
        let ones = s2(&IndicatorField::from_mask(4, 4, &[true; 16]).unwrap(), 1);
        let zeros = s2(&IndicatorField::from_mask(4, 4, &[false; 16]).unwrap(), 1);
        assert!((descriptor_error(&ones, &zeros).unwrap() - 1.0).abs() < 1e-15);
        assert!(descriptor_error(&ones, &fields[0]).is_err());
    }

    #[test]
    fn reconstruction_and_generation_errors() {
        let levels = [0.0, 1.0];
        let a = make_checkerboard(8, 2).unwrap();
        let b = make_checkerboard(8, 4).unwrap();
        let c = make_checkerboard(8, 1).unwrap();
        assert_eq!(error_rec(&[a.clone(), b.clone()], &[a.clone(), b.clone()], &levels).unwrap(), 0.0);
        let direct = descriptor_error(&structure_s2(&a, &levels).unwrap(), &structure_s2(&b, &levels).unwrap()).unwrap();
        assert_eq!(error_rec(&[a.clone()], &[b.clone()], &levels).unwrap(), direct);
        assert!(error_rec(&[a.clone()], &[], &levels).is_err());

        let u = TranslationParams::new(8, 8, &[(3, 5)]).unwrap();
        let shifted = from_batch(&roll_tensor(&to_batch(&[&b]).unwrap(), &u).unwrap()).unwrap();
        let e1 = error_rec(&[a.clone()], &[b.clone()], &levels).unwrap();
        let e2 = error_rec(&[a.clone()], &shifted, &levels).unwrap();
        assert!((e1 - e2).abs() <= 1e-12);

        assert_eq!(error_gen(&[a.clone()], &[b.clone(), a.clone()], &levels).unwrap(), 0.0);
        assert_eq!(error_gen(&[a.clone()], &[b.clone()], &levels).unwrap(), direct);
        let before = error_gen(&[c.clone()], &[a.clone()], &levels).unwrap();
        let after = error_gen(&[c.clone()], &[a.clone(), b.clone()], &levels).unwrap();
        assert!(after <= before);
        assert!(error_gen(&[], &[a], &levels).is_err());
    }

    #[test]
    fn pairwise_error_and_csv() {
        let levels = [0.0, 1.0];
        let a = make_checkerboard(8, 2).unwrap();
        let b = make_checkerboard(8, 4).unwrap();
        assert_eq!(mean_pairwise_error(&[a.clone(), a.clone()], &levels).unwrap(), 0.0);
        assert!(mean_pairwise_error(&[a.clone(), b], &levels).unwrap() > 0.0);
        let csv = metrics_csv(&[MetricRow {
            structure_id: "x.pgm".into(),
            e_rec: Some(0.0),
            e_gen: None,
            v_f: 0.5,
        }]);
        assert_eq!(csv, "structure_id,e_rec,e_gen,v_f\nx.pgm,0,,0.5\n");
    }
}
