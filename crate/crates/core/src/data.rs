//! Microstructure images, synthetic datasets, tiling, and graymap I/O.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Single-channel image with pixel values in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Microstructure {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Microstructure {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(Error::InvalidShape {
                op: "Microstructure::new",
                detail: format!("{height}x{width} with {} pixels", pixels.len()),
            });
        }
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            pixels: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.pixels[row * self.width + col] = value;
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    /// Snaps each pixel to the nearest level, ties to the lower one.
    pub fn rounded(&self, levels: &[f64]) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::InvalidArgument("empty phase level set".into()));
        }
        let pixels = self.pixels.iter().map(|&p| levels[nearest_level(p, levels)]).collect();
        Ok(Self { pixels, ..*self })
    }
}

/// Index of the level closest to `x`; the first (lowest) one wins ties.
pub fn nearest_level(x: f64, levels: &[f64]) -> usize {
    let mut best = 0;
    for (i, &l) in levels.iter().enumerate().skip(1) {
        if (x - l).abs() < (x - levels[best]).abs() {
            best = i;
        }
    }
    best
}

/// Stacks equally sized images into a `[B, 1, H, W]` batch.
pub fn to_batch(images: &[&Microstructure]) -> Result<Tensor> {
    let first = images.first().ok_or(Error::EmptyReduction("to_batch"))?;
    let mut data = Vec::with_capacity(images.len() * first.pixels.len());
    for m in images {
        if (m.height, m.width) != (first.height, first.width) {
            return Err(Error::shape("to_batch", &[first.height, first.width], &[m.height, m.width]));
        }
        data.extend_from_slice(&m.pixels);
    }
    Tensor::new(vec![images.len(), 1, first.height, first.width], data)
}

/// Splits a `[B, 1, H, W]` batch back into images.
pub fn from_batch(t: &Tensor) -> Result<Vec<Microstructure>> {
    let &[b, 1, h, w] = t.shape() else {
        return Err(Error::InvalidShape {
            op: "from_batch",
            detail: format!("expected [B, 1, H, W], got {:?}", t.shape()),
        });
    };
    Ok((0..b)
        .map(|i| Microstructure {
            height: h,
            width: w,
            pixels: t.data()[i * h * w..(i + 1) * h * w].to_vec(),
        })
        .collect())
}

/// Equally sized images sharing phase levels.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSet {
    pub size: usize,
    pub phase_levels: Vec<f64>,
    pub samples: Vec<Microstructure>,
}

impl DataSet {
    pub fn new(samples: Vec<Microstructure>, phase_levels: Vec<f64>) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::InvalidArgument("empty dataset".into()))?;
        let size = first.height;
        if let Some(bad) = samples.iter().position(|m| m.height != size || m.width != size) {
            return Err(Error::InvalidArgument(format!(
                "sample {bad} is {}x{}, expected {size}x{size}",
                samples[bad].height, samples[bad].width
            )));
        }
        Ok(Self {
            size,
            phase_levels,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

pub const MIN_AREA_FRACTION: f64 = 0.012;
pub const MAX_AREA_FRACTION: f64 = 0.19;
pub const MAX_ASPECT: f64 = 4.0;

/// One elliptical inclusion: semi-axes `a ≥ b`, center `(x1, x2)` in pixel
/// coordinates (column, row), orientation `phi` of the `a` axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EllipseParams {
    pub a: f64,
    pub b: f64,
    pub x1: f64,
    pub x2: f64,
    pub phi: f64,
}

impl EllipseParams {
    /// Half-widths of the axis-aligned bounding box.
    pub fn half_extents(&self) -> (f64, f64) {
        let (s, c) = self.phi.sin_cos();
        let hx = (self.a * self.a * c * c + self.b * self.b * s * s).sqrt();
        let hy = (self.a * self.a * s * s + self.b * self.b * c * c).sqrt();
        (hx, hy)
    }

    pub fn area_fraction(&self, size: usize) -> f64 {
        PI * self.a * self.b / (size * size) as f64
    }

    pub fn validate(&self, size: usize) -> Result<()> {
        let fail = |d: String| Err(Error::InvalidArgument(format!("ellipse {self:?}: {d}")));
        if !(self.b > 0.0 && self.a >= self.b && self.a / self.b <= MAX_ASPECT) {
            return fail("axis ratio outside [1, 4]".into());
        }
        let f = self.area_fraction(size);
        if !(f > MIN_AREA_FRACTION && f < MAX_AREA_FRACTION) {
            return fail(format!("area fraction {f} outside ({MIN_AREA_FRACTION}, {MAX_AREA_FRACTION})"));
        }
        let (hx, hy) = self.half_extents();
        let n = size as f64;
        if self.x1 - hx < 0.0 || self.x1 + hx > n || self.x2 - hy < 0.0 || self.x2 + hy > n {
            return fail("not inside the image".into());
        }
        Ok(())
    }
}

/// Binary raster: a pixel is set when its center lies in the ellipse.
pub fn rasterize_ellipse(p: &EllipseParams, size: usize) -> Result<Microstructure> {
    p.validate(size)?;
    let (s, c) = p.phi.sin_cos();
    let mut m = Microstructure::filled(size, size, 0.0);
    for i in 0..size {
        for j in 0..size {
            let dx = j as f64 + 0.5 - p.x1;
            let dy = i as f64 + 0.5 - p.x2;
            let u = c * dx + s * dy;
            let v = -s * dx + c * dy;
            if (u / p.a).powi(2) + (v / p.b).powi(2) <= 1.0 {
                m.set(i, j, 1.0);
            }
        }
    }
    Ok(m)
}

const MAX_ATTEMPTS: usize = 100_000;

/// Draws admissible ellipse parameters by rejection.
pub fn sample_ellipse_params(rng: &mut Rng, size: usize) -> Result<EllipseParams> {
    let n = size as f64;
    let hi = n / 2.0;
    if hi <= 2.0 {
        return Err(Error::InvalidArgument(format!("image size {size} too small for ellipses")));
    }
    for _ in 0..MAX_ATTEMPTS {
        let r1 = rng.random_range(2.0..=hi);
        let r2 = rng.random_range(2.0..=hi);
        let phi = rng.random_range(0.0..PI);
        let (a, b) = if r1 >= r2 { (r1, r2) } else { (r2, r1) };
        let mut p = EllipseParams { a, b, x1: 0.0, x2: 0.0, phi };
        if a / b > MAX_ASPECT {
            continue;
        }
        let f = p.area_fraction(size);
        if !(f > MIN_AREA_FRACTION && f < MAX_AREA_FRACTION) {
            continue;
        }
        let (hx, hy) = p.half_extents();
        if 2.0 * hx > n || 2.0 * hy > n {
            continue;
        }
        p.x1 = if 2.0 * hx == n { hx } else { rng.random_range(hx..n - hx) };
        p.x2 = if 2.0 * hy == n { hy } else { rng.random_range(hy..n - hy) };
        if p.validate(size).is_ok() {
            return Ok(p);
        }
    }
    Err(Error::InvalidArgument(format!(
        "ellipse rejection sampling exhausted after {MAX_ATTEMPTS} attempts at size {size}"
    )))
}

/// Area-fraction slack allowed after rasterization: one pixel row.
pub fn raster_tolerance(size: usize) -> f64 {
    1.0 / size as f64
}

/// `n` i.i.d. single-ellipse images.
pub fn sample_ellipse_dataset(n: usize, size: usize, rng: &mut Rng) -> Result<(DataSet, Vec<EllipseParams>)> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be at least 1".into()));
    }
    let delta = raster_tolerance(size);
    let mut samples = Vec::with_capacity(n);
    let mut params = Vec::with_capacity(n);
    let mut rejected = 0usize;
    while samples.len() < n {
        let p = sample_ellipse_params(rng, size)?;
        let m = rasterize_ellipse(&p, size)?;
        let f = m.mean();
        if f > MIN_AREA_FRACTION - delta && f < MAX_AREA_FRACTION + delta {
            samples.push(m);
            params.push(p);
        } else {
            rejected += 1;
            if rejected > MAX_ATTEMPTS {
                return Err(Error::InvalidArgument("ellipse rasters keep violating area bounds".into()));
            }
        }
    }
    Ok((DataSet::new(samples, vec![0.0, 1.0])?, params))
}

/// Non-overlapping row-major `tile × tile` crops.
pub fn tile_micrograph(image: &Microstructure, tile: usize) -> Result<Vec<Microstructure>> {
    if tile == 0 || image.height % tile != 0 || image.width % tile != 0 {
        return Err(Error::InvalidArgument(format!(
            "tile {tile} does not divide {}x{}",
            image.height, image.width
        )));
    }
    let mut out = Vec::new();
    for ti in 0..image.height / tile {
        for tj in 0..image.width / tile {
            let mut pixels = Vec::with_capacity(tile * tile);
            for i in 0..tile {
                let row = (ti * tile + i) * image.width + tj * tile;
                pixels.extend_from_slice(&image.pixels[row..row + tile]);
            }
            out.push(Microstructure {
                height: tile,
                width: tile,
                pixels,
            });
        }
    }
    Ok(out)
}

/// Places equally sized images on a `rows × cols` grid, row-major.
pub fn assemble_grid(tiles: &[Microstructure], rows: usize, cols: usize) -> Result<Microstructure> {
    let first = tiles.first().ok_or(Error::EmptyReduction("assemble_grid"))?;
    if tiles.len() != rows * cols {
        return Err(Error::InvalidArgument(format!(
            "{} tiles do not fill a {rows}x{cols} grid",
            tiles.len()
        )));
    }
    let (th, tw) = (first.height, first.width);
    let mut out = Microstructure::filled(rows * th, cols * tw, 0.0);
    for (k, t) in tiles.iter().enumerate() {
        if (t.height, t.width) != (th, tw) {
            return Err(Error::shape("assemble_grid", &[th, tw], &[t.height, t.width]));
        }
        let (r, c) = (k / cols, k % cols);
        for i in 0..th {
            let dst = (r * th + i) * out.width + c * tw;
            out.pixels[dst..dst + tw].copy_from_slice(&t.pixels[i * tw..(i + 1) * tw]);
        }
    }
    Ok(out)
}

/// Alternating square cells, the top-left cell set.
pub fn make_checkerboard(size: usize, cell: usize) -> Result<Microstructure> {
    if cell == 0 || size % cell != 0 {
        return Err(Error::InvalidArgument(format!("cell {cell} does not divide size {size}")));
    }
    let mut m = Microstructure::filled(size, size, 0.0);
    for i in 0..size {
        for j in 0..size {
            if (i / cell + j / cell) % 2 == 0 {
                m.set(i, j, 1.0);
            }
        }
    }
    Ok(m)
}

/// Encodes a binary graymap; values are clamped to `[0, 1]` and scaled with
/// round-half-up.
pub fn encode_pgm(m: &Microstructure) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", m.width, m.height).into_bytes();
    out.extend(m.pixels.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8));
    out
}

/// Decodes a binary graymap with an 8-bit maximum value.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Microstructure> {
    let err = |offset: usize, detail: &str| Error::ImageFormat {
        path: path.to_path_buf(),
        offset,
        detail: detail.to_string(),
    };
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(err(0, "missing P5 magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (k, field) in fields.iter_mut().enumerate() {
        loop {
            match bytes.get(pos) {
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(err(pos, "truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap_or("");
        *field = text
            .parse()
            .map_err(|_| err(start, ["bad width", "bad height", "bad max value"][k]))?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(err(pos, "zero image extent"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(err(pos, &format!("unsupported max value {maxval}")));
    }
    match bytes.get(pos) {
        Some(c) if c.is_ascii_whitespace() => pos += 1,
        _ => return Err(err(pos, "expected whitespace after header")),
    }
    let need = width * height;
    if bytes.len() - pos < need {
        return Err(err(bytes.len(), &format!("truncated payload, expected {need} bytes")));
    }
    let scale = maxval as f64;
    let pixels = bytes[pos..pos + need].iter().map(|&v| (v as f64 / scale).min(1.0)).collect();
    Microstructure::new(height, width, pixels)
}

pub fn read_image(path: &Path) -> Result<Microstructure> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes, path)
}

pub fn write_image(path: &Path, m: &Microstructure) -> Result<()> {
    fs::write(path, encode_pgm(m)).map_err(|e| Error::io(path, e))
}

pub const MANIFEST_NAME: &str = "manifest.txt";

/// Image paths listed one per line, resolved against the manifest's directory.
/// Blank lines and `#` comments are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| base.join(l))
        .collect())
}

pub fn write_manifest(path: &Path, entries: &[String]) -> Result<()> {
    let mut text = entries.join("\n");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Resolves a manifest file, a directory holding one, or a directory of
/// `.pgm` files (sorted by name) to image paths.
pub fn resolve_images(source: &Path) -> Result<Vec<PathBuf>> {
    if source.is_file() {
        return read_manifest(source);
    }
    let manifest = source.join(MANIFEST_NAME);
    if manifest.is_file() {
        return read_manifest(&manifest);
    }
    let entries = fs::read_dir(source).map_err(|e| Error::io(source, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let p = entry.map_err(|e| Error::io(source, e))?.path();
        if p.extension().is_some_and(|x| x == "pgm") {
            paths.push(p);
        }
    }
    paths.sort();
    Ok(paths)
}

pub fn load_images(paths: &[PathBuf]) -> Result<Vec<Microstructure>> {
    paths.iter().map(|p| read_image(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn disk_pixel_count() {
        for r in [3.0, 4.0, 5.5] {
            let p = EllipseParams { a: r, b: r, x1: 16.0, x2: 16.0, phi: 0.0 };
            let count: f64 = rasterize_ellipse(&p, 32).unwrap().pixels().iter().sum();
            assert!((count - PI * r * r).abs() <= 4.0 * r, "r {r}: {count}");
        }
    }

    #[test]
    fn reference_ellipse_is_vertical() {
        let p = EllipseParams { a: 7.0, b: 3.0, x1: 16.0, x2: 16.0, phi: PI / 2.0 };
        let m = rasterize_ellipse(&p, 32).unwrap();
        let rows = (0..32).filter(|&i| (0..32).any(|j| m.get(i, j) == 1.0)).count();
        let cols = (0..32).filter(|&j| (0..32).any(|i| m.get(i, j) == 1.0)).count();
        assert_eq!((rows, cols), (14, 6));
        let flipped = EllipseParams { phi: p.phi + PI, ..p };
        assert_eq!(rasterize_ellipse(&flipped, 32).unwrap(), m);
    }

    #[test]
    fn invalid_ellipses_rejected() {
        let base = EllipseParams { a: 6.0, b: 3.0, x1: 16.0, x2: 16.0, phi: 0.3 };
        assert!(base.validate(32).is_ok());
        assert!(EllipseParams { a: 13.0, b: 3.0, ..base }.validate(32).is_err());
        assert!(EllipseParams { a: 1.5, b: 1.0, ..base }.validate(32).is_err());
        assert!(EllipseParams { x1: 2.0, ..base }.validate(32).is_err());
        assert!(rasterize_ellipse(&EllipseParams { a: 2.0, b: 3.0, ..base }, 32).is_err());
    }

    #[test]
    fn ellipse_dataset() {
        let (ds, params) = sample_ellipse_dataset(200, 32, &mut seeded(1)).unwrap();
        assert_eq!(ds.len(), 200);
        let delta = raster_tolerance(32);
        for (m, p) in ds.samples.iter().zip(&params) {
            p.validate(32).unwrap();
            let f = m.mean();
            assert!(f > MIN_AREA_FRACTION - delta && f < MAX_AREA_FRACTION + delta, "{f}");
        }
        let (again, _) = sample_ellipse_dataset(200, 32, &mut seeded(1)).unwrap();
        assert_eq!(ds, again);
        assert!(sample_ellipse_dataset(0, 32, &mut seeded(1)).is_err());
        assert!(sample_ellipse_dataset(1, 4, &mut seeded(1)).is_err());
    }

    #[test]
    fn tiling_round_trip() {
        let mut rng = seeded(2);
        let big = Microstructure::new(256, 256, (0..65536).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let tiles = tile_micrograph(&big, 64).unwrap();
        assert_eq!(tiles.len(), 16);
        assert!(tiles.iter().all(|t| t.height() == 64 && t.width() == 64));
        assert_eq!(assemble_grid(&tiles, 4, 4).unwrap(), big);
        let small = Microstructure::filled(128, 128, 0.0);
        assert_eq!(tile_micrograph(&small, 64).unwrap().len(), 4);
        assert!(tile_micrograph(&small, 48).is_err());
    }

    #[test]
    fn checkerboard() {
        let m = make_checkerboard(4, 2).unwrap();
        let expected = [1., 1., 0., 0., 1., 1., 0., 0., 0., 0., 1., 1., 0., 0., 1., 1.];
        assert_eq!(m.pixels(), &expected);
        assert_eq!(make_checkerboard(16, 4).unwrap().mean(), 0.5);
        assert!(make_checkerboard(10, 4).is_err());
    }

    #[test]
    fn rounding_rules() {
        let m = Microstructure::new(1, 4, vec![0.7, 0.5, 0.6, 0.2]).unwrap();
        assert_eq!(m.rounded(&[0.0, 1.0]).unwrap().pixels(), &[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(nearest_level(0.6, &[0.0, 0.5, 1.0]), 1);
        assert!(m.rounded(&[]).is_err());
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        let m = make_checkerboard(8, 2).unwrap();
        write_image(&path, &m).unwrap();
        assert_eq!(read_image(&path).unwrap(), m);
        let bytes = b"P5\n# note\n2 1\n255\n\xff\x00";
        let d = decode_pgm(bytes, &path).unwrap();
        assert_eq!(d.pixels(), &[1.0, 0.0]);
        let half = Microstructure::new(1, 3, vec![0.5 / 255.0, 1.5 / 255.0, 0.25]).unwrap();
        assert_eq!(&encode_pgm(&half)[11..], &[1, 2, 64]);
    }

    #[test]
    fn pgm_errors_name_offsets() {
        let p = Path::new("x.pgm");
        let truncated = b"P5\n4 4\n255\n\x00\x00";
        match decode_pgm(truncated, p) {
            Err(Error::ImageFormat { offset, .. }) => assert_eq!(offset, truncated.len()),
            other => panic!("{other:?}"),
        }
        assert!(format!("{}", decode_pgm(truncated, p).unwrap_err()).contains("byte offset 13"));
        assert!(decode_pgm(b"P2\n1 1\n255\n0", p).is_err());
        assert!(decode_pgm(b"P5\n1 1\n65535\n\x00\x00", p).is_err());
        assert!(decode_pgm(b"P5\nx 1\n255\n\x00", p).is_err());
    }

    #[test]
    fn manifests_resolve_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_checkerboard(4, 1).unwrap();
        for name in ["b.pgm", "a.pgm"] {
            write_image(&dir.path().join(name), &m).unwrap();
        }
        let listed = resolve_images(dir.path()).unwrap();
        assert_eq!(listed, vec![dir.path().join("a.pgm"), dir.path().join("b.pgm")]);
        write_manifest(&dir.path().join(MANIFEST_NAME), &["b.pgm".into()]).unwrap();
        assert_eq!(resolve_images(dir.path()).unwrap(), vec![dir.path().join("b.pgm")]);
        assert_eq!(load_images(&listed).unwrap().len(), 2);
        assert!(matches!(resolve_images(&dir.path().join("missing")), Err(Error::Io { .. })));
    }

    #[test]
    fn batch_conversion() {
        let a = make_checkerboard(4, 1).unwrap();
        let b = make_checkerboard(4, 2).unwrap();
        let t = to_batch(&[&a, &b]).unwrap();
        assert_eq!(t.shape(), &[2, 1, 4, 4]);
        assert_eq!(from_batch(&t).unwrap(), vec![a, b]);
    }
}
