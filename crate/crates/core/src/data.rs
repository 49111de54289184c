//! Datasets: the synthetic scale-discrimination task, binary PPM image
//! I/O, directory ingestion, and the flip augmentation.
//!
//! Images are `[H,W,3]` channels-last tensors holding normalized values
//! `(raw/255 − NORM_MEAN) / NORM_STD`.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};
use std::io::Read;
use std::path::Path;

/// Per-channel normalization constants applied to every image source.
pub const NORM_MEAN: f64 = 0.5;
pub const NORM_STD: f64 = 0.25;

/// Blob standard-deviation range for the small-scale class, pixels.
pub const SMALL_SIGMA: (f64, f64) = (1.6, 2.4);
/// Blob standard-deviation range for the large-scale class, pixels.
pub const LARGE_SIGMA: (f64, f64) = (4.8, 7.2);
/// Canvas side of generated images.
pub const SYNTH_SIDE: usize = 64;

/// A labeled image collection. All images share one shape.
#[derive(Debug, Clone)]
pub struct Dataset<S: Scalar> {
    pub images: Vec<Tensor<S>>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub class_names: Vec<String>,
    pub split: String,
}

impl<S: Scalar> Dataset<S> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_shape(&self) -> &[usize] {
        self.images[0].shape()
    }

    /// Structural checks: aligned lengths, label range, uniform shapes.
    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                self.images.len(),
                self.labels.len()
            )));
        }
        if self.images.is_empty() {
            return Err(Error::Data("dataset is empty".into()));
        }
        let shape = self.images[0].shape();
        for (i, img) in self.images.iter().enumerate() {
            if img.shape() != shape {
                return Err(Error::Data(format!(
                    "image {i} has shape {:?}, expected {shape:?}",
                    img.shape()
                )));
            }
        }
        for (i, &l) in self.labels.iter().enumerate() {
            if l >= self.classes {
                return Err(Error::Data(format!(
                    "label {l} of item {i} outside {} classes",
                    self.classes
                )));
            }
        }
        Ok(())
    }
}

/// Blob draws behind one generated image, for generator self-checks.
#[derive(Debug, Clone)]
pub struct ImageStats {
    pub label: usize,
    pub sigmas: Vec<f64>,
}

/// Two-class task that separates by characteristic spatial scale and by
/// nothing else: class 0 scatters many small Gaussian blobs, class 1 a
/// few large ones, with the summed blob mass fixed per image so raw mean
/// intensity carries no class signal. Gray blobs on a noisy gray
/// background; deterministic in `seed`.
pub fn synth_scale_discrimination<S: Scalar>(seed: u64, n_per_class: usize) -> Result<Dataset<S>> {
    synth_with_stats(seed, n_per_class).map(|(d, _)| d)
}

/// As [`synth_scale_discrimination`], also reporting the blob draws.
pub fn synth_with_stats<S: Scalar>(
    seed: u64,
    n_per_class: usize,
) -> Result<(Dataset<S>, Vec<ImageStats>)> {
    if n_per_class == 0 {
        return Err(Error::Data("need at least one image per class".into()));
    }
    const SIDE: usize = SYNTH_SIDE;
    // Summed blob integral per image. Low enough that peak intensities
    // stay inside [0,1] (max amplitude ~0.62 at k=6, sigma=1.6 over the
    // 0.2 background), so clamping cannot reintroduce a class-dependent
    // mean-intensity signal.
    const TOTAL_MASS: f64 = 60.0;
    const BASE: f64 = 0.2; // background gray level
    const NOISE: f64 = 0.04; // background noise std

    let mut rng = Rng::from_seed(seed);
    let mut images = Vec::with_capacity(2 * n_per_class);
    let mut labels = Vec::with_capacity(2 * n_per_class);
    let mut stats = Vec::with_capacity(2 * n_per_class);

    for label in 0..2 {
        let (sigma_lo, sigma_hi) = if label == 0 { SMALL_SIGMA } else { LARGE_SIGMA };
        let (count_lo, count_hi) = if label == 0 { (6usize, 10) } else { (1usize, 2) };
        for _ in 0..n_per_class {
            let mut canvas = vec![0.0f64; SIDE * SIDE];
            let k = count_lo + rng.next_below(count_hi - count_lo + 1);
            let mut sigmas = Vec::with_capacity(k);
            for _ in 0..k {
                let sigma = rng.uniform(sigma_lo, sigma_hi);
                let margin = 2.0 * sigma;
                let cx = rng.uniform(margin, SIDE as f64 - margin);
                let cy = rng.uniform(margin, SIDE as f64 - margin);
                let amplitude =
                    TOTAL_MASS / k as f64 / (2.0 * std::f64::consts::PI * sigma * sigma);
                let reach = (4.0 * sigma).ceil() as isize;
                let (icx, icy) = (cx.round() as isize, cy.round() as isize);
                for y in (icy - reach).max(0)..(icy + reach + 1).min(SIDE as isize) {
                    for x in (icx - reach).max(0)..(icx + reach + 1).min(SIDE as isize) {
                        let dx = x as f64 - cx;
                        let dy = y as f64 - cy;
                        canvas[y as usize * SIDE + x as usize] +=
                            amplitude * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                    }
                }
                sigmas.push(sigma);
            }
            let mut data = Vec::with_capacity(SIDE * SIDE * 3);
            for v in &canvas {
                for _ in 0..3 {
                    let raw = (BASE + v + rng.normal() * NOISE).clamp(0.0, 1.0);
                    data.push(S::from_f64((raw - NORM_MEAN) / NORM_STD));
                }
            }
            images.push(Tensor::from_vec(&[SIDE, SIDE, 3], data)?);
            labels.push(label);
            stats.push(ImageStats {
                label,
                sigmas,
            });
        }
    }
    let dataset = Dataset {
        images,
        labels,
        classes: 2,
        class_names: vec!["small_scale".into(), "large_scale".into()],
        split: format!("synth:{seed}"),
    };
    dataset.validate()?;
    Ok((dataset, stats))
}

// ====================================================================
// PPM I/O
// ====================================================================

fn ppm_error(offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        what: "ppm".into(),
        offset: offset as u64,
        detail: detail.into(),
    }
}

/// Read one ASCII token (skipping whitespace and `#` comments) starting
/// at `pos`; returns the token and the position just past it.
fn ppm_token(bytes: &[u8], mut pos: usize) -> Result<(String, usize)> {
    loop {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        break;
    }
    let start = pos;
    while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
        pos += 1;
    }
    if start == pos {
        return Err(ppm_error(start, "unexpected end of header"));
    }
    let token = std::str::from_utf8(&bytes[start..pos])
        .map_err(|_| ppm_error(start, "non-ASCII header token"))?;
    Ok((token.to_string(), pos))
}

/// Decode a binary P6 PPM (maxval 255) into a normalized `[H,W,3]`
/// tensor.
pub fn decode_ppm<S: Scalar>(bytes: &[u8]) -> Result<Tensor<S>> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(ppm_error(0, "bad magic, expected P6"));
    }
    let (width, pos) = ppm_token(bytes, 2)?;
    let width: usize = width
        .parse()
        .map_err(|_| ppm_error(pos - width.len(), format!("bad width '{width}'")))?;
    let (height, pos) = ppm_token(bytes, pos)?;
    let height: usize = height
        .parse()
        .map_err(|_| ppm_error(pos - height.len(), format!("bad height '{height}'")))?;
    let (maxval, pos) = ppm_token(bytes, pos)?;
    if maxval != "255" {
        return Err(ppm_error(
            pos - maxval.len(),
            format!("unsupported maxval {maxval}, only 255"),
        ));
    }
    if pos >= bytes.len() {
        return Err(ppm_error(pos, "missing pixel data"));
    }
    let pixels = pos + 1; // single whitespace byte after maxval
    let need = width * height * 3;
    if bytes.len() < pixels + need {
        return Err(ppm_error(
            bytes.len(),
            format!(
                "truncated pixel data: have {} of {need} bytes",
                bytes.len().saturating_sub(pixels)
            ),
        ));
    }
    let mut data = Vec::with_capacity(need);
    for &b in &bytes[pixels..pixels + need] {
        data.push(S::from_f64((b as f64 / 255.0 - NORM_MEAN) / NORM_STD));
    }
    Tensor::from_vec(&[height, width, 3], data)
}

/// Load and normalize a P6 PPM file.
pub fn load_ppm<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes)
}

/// Encode a normalized `[H,W,3]` tensor as binary P6 bytes, inverting
/// the normalization and clamping to 0..=255.
pub fn encode_ppm<S: Scalar>(image: &Tensor<S>) -> Result<Vec<u8>> {
    let shape = image.shape();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(Error::shape(
            "encode_ppm",
            format!("expected [H,W,3], got {shape:?}"),
        ));
    }
    let (h, w) = (shape[0], shape[1]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for v in image.data() {
        let raw = (v.to_f64() * NORM_STD + NORM_MEAN) * 255.0;
        out.push(raw.round().clamp(0.0, 255.0) as u8);
    }
    Ok(out)
}

/// Load a class-per-directory tree: `root/<class_name>/<file>.ppm`.
/// Class indices follow sorted class-name order; files are read in
/// sorted order for determinism.
pub fn load_dataset_dir<S: Scalar>(root: &Path) -> Result<Dataset<S>> {
    let mut class_dirs = Vec::new();
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if path.is_dir() {
            class_dirs.push(path);
        }
    }
    if class_dirs.is_empty() {
        return Err(Error::Data(format!(
            "no class directories under {}",
            root.display()
        )));
    }
    class_dirs.sort();

    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut class_names = Vec::new();
    for (index, dir) in class_dirs.iter().enumerate() {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut files = Vec::new();
        for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            let path = entry.path();
            if path.extension().map(|e| e == "ppm").unwrap_or(false) {
                files.push(path);
            }
        }
        if files.is_empty() {
            return Err(Error::Data(format!(
                "class directory '{name}' contains no .ppm files"
            )));
        }
        files.sort();
        for file in files {
            images.push(load_ppm(&file)?);
            labels.push(index);
        }
        class_names.push(name);
    }
    let dataset = Dataset {
        images,
        labels,
        classes: class_names.len(),
        class_names,
        split: root.display().to_string(),
    };
    dataset.validate()?;
    Ok(dataset)
}

// ====================================================================
// Augmentation and batching
// ====================================================================

/// Mirror an `[H,W,3]` image left-right.
pub fn hflip<S: Scalar>(image: &Tensor<S>) -> Tensor<S> {
    let shape = image.shape();
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let src = image.data();
    let mut out = vec![S::ZERO; src.len()];
    for y in 0..h {
        for x in 0..w {
            let from = (y * w + x) * c;
            let to = (y * w + (w - 1 - x)) * c;
            out[to..to + c].copy_from_slice(&src[from..from + c]);
        }
    }
    Tensor::from_vec(shape, out).expect("same shape")
}

/// Stack images of one shape into a `[B,H,W,3]` batch.
pub fn stack_batch<S: Scalar>(images: &[Tensor<S>]) -> Result<Tensor<S>> {
    if images.is_empty() {
        return Err(Error::Data("cannot stack an empty batch".into()));
    }
    let shape = images[0].shape();
    let mut data = Vec::with_capacity(images.len() * images[0].numel());
    for img in images {
        if img.shape() != shape {
            return Err(Error::shape(
                "stack_batch",
                format!("mixed shapes {:?} vs {shape:?}", img.shape()),
            ));
        }
        data.extend_from_slice(img.data());
    }
    let mut full = vec![images.len()];
    full.extend_from_slice(shape);
    Tensor::from_vec(&full, data)
}
