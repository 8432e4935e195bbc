//! Synthetic datasets with controlled distribution shift.
//!
//! Sources are procedurally rendered 16x16 grayscale glyphs, one parametric
//! shape family per class with jittered pose and scale. Targets are produced
//! by corrupting source images with one of seven corruption families at a
//! severity level in 1..=5; the per-family severity schedules below are
//! monotone, so distance to the original grows with the level.
//!
//! The module also reads IDX-format image/label files so externally supplied
//! data (e.g. MNIST) can flow through the same pipeline, and caches datasets
//! in a small binary format.

use std::fs;
use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMG_SIDE: usize = 16;

/// What stage of the pipeline a dataset belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetRole {
    SourceTrain,
    SourceTest,
    TargetTrain,
    TargetTest,
    Validation,
}

/// Immutable collection of (input, class) pairs.
#[derive(Clone)]
pub struct Dataset {
    inputs: Vec<Tensor>,
    labels: Vec<usize>,
    role: DatasetRole,
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        inputs: Vec<Tensor>,
        labels: Vec<usize>,
        role: DatasetRole,
        num_classes: usize,
    ) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::Data(format!(
                "{} inputs vs {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!(
                "label {l} out of range for {num_classes} classes"
            )));
        }
        if let Some(first) = inputs.first() {
            if let Some(t) = inputs.iter().find(|t| t.shape() != first.shape()) {
                return Err(Error::Data(format!(
                    "inputs disagree on shape: {:?} vs {:?}",
                    first.shape(),
                    t.shape()
                )));
            }
        }
        Ok(Dataset {
            inputs,
            labels,
            role,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input(&self, i: usize) -> &Tensor {
        &self.inputs[i]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn inputs(&self) -> &[Tensor] {
        &self.inputs
    }

    pub fn role(&self) -> DatasetRole {
        self.role
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_shape(&self) -> &[usize] {
        self.inputs.first().map(|t| t.shape()).unwrap_or(&[])
    }

    /// Same data under a different role tag.
    pub fn with_role(&self, role: DatasetRole) -> Dataset {
        Dataset {
            inputs: self.inputs.clone(),
            labels: self.labels.clone(),
            role,
            num_classes: self.num_classes,
        }
    }

    /// Subset by indices (clones the referenced items).
    pub fn select(&self, idx: &[usize], role: DatasetRole) -> Result<Dataset> {
        let mut inputs = Vec::with_capacity(idx.len());
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= self.len() {
                return Err(Error::Index(format!("index {i} out of range")));
            }
            inputs.push(self.inputs[i].clone());
            labels.push(self.labels[i]);
        }
        Dataset::new(inputs, labels, role, self.num_classes)
    }
}

/// The seven corruption families, C1..C7.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    Brightness,
    Saturate,
    Spatter,
    Contrast,
    GaussianNoise,
    JpegLike,
    SpeckleNoise,
}

impl Corruption {
    pub const ALL: [Corruption; 7] = [
        Corruption::Brightness,
        Corruption::Saturate,
        Corruption::Spatter,
        Corruption::Contrast,
        Corruption::GaussianNoise,
        Corruption::JpegLike,
        Corruption::SpeckleNoise,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Corruption::Brightness => "brightness",
            Corruption::Saturate => "saturate",
            Corruption::Spatter => "spatter",
            Corruption::Contrast => "contrast",
            Corruption::GaussianNoise => "gaussian_noise",
            Corruption::JpegLike => "jpeg_like",
            Corruption::SpeckleNoise => "speckle_noise",
        }
    }
}

impl std::str::FromStr for Corruption {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Corruption::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown corruption '{s}'")))
    }
}

/// A corruption with a severity level and the seed driving its randomness.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub corruption: Corruption,
    pub severity: u8,
    pub seed: u64,
}

// Severity schedules, index 0 = severity 1.
const GAUSSIAN_SIGMA: [f64; 5] = [0.02, 0.05, 0.10, 0.18, 0.30];
const SPECKLE_SIGMA: [f64; 5] = [0.05, 0.10, 0.20, 0.35, 0.50];
const BRIGHTNESS_OFFSET: [f64; 5] = [0.05, 0.10, 0.20, 0.30, 0.45];
const CONTRAST_SCALE: [f64; 5] = [0.9, 0.75, 0.6, 0.45, 0.3];
const SATURATE_GAMMA: [f64; 5] = [0.9, 0.75, 0.6, 0.45, 0.3];
const SPATTER_COVERAGE: [f64; 5] = [0.02, 0.05, 0.10, 0.15, 0.22];
const JPEG_ZEROED: [usize; 5] = [1, 2, 4, 6, 8];

/// Procedurally render a source dataset of 16x16 glyphs.
///
/// Exactly `per_class_count` images per class, interleaved by class;
/// bitwise deterministic for a given seed.
pub fn gen_source(num_classes: usize, per_class_count: usize, seed: u64) -> Result<Dataset> {
    if !(2..=100).contains(&num_classes) {
        return Err(Error::Config(format!(
            "num_classes {num_classes} must be in [2, 100]"
        )));
    }
    if per_class_count == 0 {
        return Err(Error::Config("per_class_count must be >= 1".to_string()));
    }
    let mut inputs = Vec::with_capacity(num_classes * per_class_count);
    let mut labels = Vec::with_capacity(num_classes * per_class_count);
    for i in 0..per_class_count {
        for class in 0..num_classes {
            let idx = (i * num_classes + class) as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "glyph", idx));
            let pixels = render_glyph(class, &mut rng);
            inputs.push(Tensor::new(pixels, &[1, IMG_SIDE, IMG_SIDE])?);
            labels.push(class);
        }
    }
    Dataset::new(inputs, labels, DatasetRole::SourceTrain, num_classes)
}

/// One glyph for `class` with jittered pose, scale and intensity.
///
/// Jitter ranges and stroke widths are tuned so a small convnet separates
/// clean classes well but loses real accuracy under the corruption
/// schedules, leaving fine-tuning room to matter.
fn render_glyph(class: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let kind = class % 10;
    let tier = (class / 10) as f64;
    // Higher tiers shrink the glyph so families stay distinguishable.
    let base_scale = 1.0 - 0.07 * tier;

    let cx = 0.5 + rng.gen_range(-0.15..0.15);
    let cy = 0.5 + rng.gen_range(-0.15..0.15);
    let scale = base_scale * rng.gen_range(0.55..1.15);
    let fg = rng.gen_range(0.5..0.9);
    // The cross families' rotation ranges overlap a little, so the
    // boundary between them is genuinely tight.
    let rot = match kind {
        2 | 4 | 6 | 8 => rng.gen_range(-0.42..0.42),
        3 => std::f64::consts::FRAC_PI_4 + rng.gen_range(-0.42..0.42),
        5 => std::f64::consts::FRAC_PI_2 + rng.gen_range(-0.42..0.42),
        _ => 0.0,
    };
    let (sin, cos) = rot.sin_cos();

    let soft = 1.5 / IMG_SIDE as f64;
    let mut pixels = vec![0.0; IMG_SIDE * IMG_SIDE];
    for y in 0..IMG_SIDE {
        for x in 0..IMG_SIDE {
            let px = (x as f64 + 0.5) / IMG_SIDE as f64 - cx;
            let py = (y as f64 + 0.5) / IMG_SIDE as f64 - cy;
            // Rotate into the glyph frame and undo the scale.
            let u = (px * cos + py * sin) / scale;
            let v = (-px * sin + py * cos) / scale;
            let sdf = glyph_sdf(kind, u, v);
            let cov = (0.5 - sdf / soft).clamp(0.0, 1.0);
            pixels[y * IMG_SIDE + x] = fg * cov;
        }
    }
    pixels
}

/// Signed distance (negative = inside) of glyph family `kind` at (u, v).
fn glyph_sdf(kind: usize, u: f64, v: f64) -> f64 {
    let r = (u * u + v * v).sqrt();
    match kind {
        // Filled disk.
        0 => r - 0.28,
        // Ring (same outer envelope as the disk; the hole is the cue).
        1 => (r - 0.245).abs() - 0.07,
        // Plus cross (family 3 reuses this under a 45-degree base rotation).
        2 | 3 => (u.abs().min(v.abs()) - 0.065).max(u.abs().max(v.abs()) - 0.36),
        // Two parallel bars (family 5 is the rotated variant).
        4 | 5 => {
            let d1 = (v - 0.16).abs() - 0.055;
            let d2 = (v + 0.16).abs() - 0.055;
            d1.min(d2).max(u.abs() - 0.34)
        }
        // Square outline.
        6 => (u.abs().max(v.abs()) - 0.28).abs() - 0.055,
        // Filled square.
        7 => u.abs().max(v.abs()) - 0.26,
        // Wedge.
        8 => (u.abs() * 1.7 + v - 0.25).max(-v - 0.30),
        // Four dots.
        9 => {
            let mut best = f64::INFINITY;
            for du in [-0.18, 0.18] {
                for dv in [-0.18, 0.18] {
                    let dd = ((u - du).powi(2) + (v - dv).powi(2)).sqrt() - 0.11;
                    best = best.min(dd);
                }
            }
            best
        }
        _ => unreachable!("kind is class % 10"),
    }
}

/// Apply a corruption to every input; labels and sizes are preserved and the
/// output keeps the input's role (re-tag with [`Dataset::with_role`]).
pub fn corrupt(d: &Dataset, spec: &ShiftSpec) -> Result<Dataset> {
    if !(1..=5).contains(&spec.severity) {
        return Err(Error::Config(format!(
            "severity {} must be in [1, 5]",
            spec.severity
        )));
    }
    let s = (spec.severity - 1) as usize;
    let mut inputs = Vec::with_capacity(d.len());
    for (i, t) in d.inputs.iter().enumerate() {
        let (h, w) = image_dims(t)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "corrupt", i as u64));
        let px = t.data();
        let out = match spec.corruption {
            Corruption::GaussianNoise => gaussian_noise(px, GAUSSIAN_SIGMA[s], &mut rng),
            Corruption::SpeckleNoise => speckle_noise(px, SPECKLE_SIGMA[s], &mut rng),
            Corruption::Brightness => brightness(px, BRIGHTNESS_OFFSET[s]),
            Corruption::Contrast => contrast(px, CONTRAST_SCALE[s]),
            Corruption::Saturate => saturate(px, SATURATE_GAMMA[s]),
            Corruption::Spatter => spatter(px, h, w, SPATTER_COVERAGE[s], &mut rng),
            Corruption::JpegLike => jpeg_like(px, h, w, JPEG_ZEROED[s]),
        };
        inputs.push(Tensor::new(out, t.shape())?);
    }
    Dataset::new(inputs, d.labels.clone(), d.role, d.num_classes)
}

fn image_dims(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [h, w] => Ok((*h, *w)),
        [1, h, w] => Ok((*h, *w)),
        s => Err(Error::Shape(format!(
            "corruptions expect [h,w] or [1,h,w] images, got {s:?}"
        ))),
    }
}

fn clip01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Additive N(0, sigma^2) noise.
pub fn gaussian_noise(px: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    px.iter()
        .map(|&p| clip01(p + sigma * std_normal(rng)))
        .collect()
}

/// Multiplicative speckle: x * (1 + N(0, sigma^2)).
pub fn speckle_noise(px: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    px.iter()
        .map(|&p| clip01(p * (1.0 + sigma * std_normal(rng))))
        .collect()
}

/// Constant offset.
pub fn brightness(px: &[f64], offset: f64) -> Vec<f64> {
    px.iter().map(|&p| clip01(p + offset)).collect()
}

/// Scale around the per-image mean; the mean itself is preserved.
pub fn contrast(px: &[f64], scale: f64) -> Vec<f64> {
    let mean = px.iter().sum::<f64>() / px.len() as f64;
    px.iter()
        .map(|&p| clip01(mean + (p - mean) * scale))
        .collect()
}

/// Gamma curve x^gamma (gamma < 1 saturates mid-tones upward).
pub fn saturate(px: &[f64], gamma: f64) -> Vec<f64> {
    px.iter().map(|&p| clip01(p.max(0.0).powf(gamma))).collect()
}

/// Random occluding blobs until at least `coverage` of the pixels changed.
pub fn spatter(px: &[f64], h: usize, w: usize, coverage: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = px.to_vec();
    let mut occluded = vec![false; px.len()];
    let target = (coverage * px.len() as f64).ceil() as usize;
    let mut covered = 0;
    // Each blob occludes at least its center pixel, so this terminates.
    while covered < target {
        let cy = rng.gen_range(0.0..h as f64);
        let cx = rng.gen_range(0.0..w as f64);
        let radius = rng.gen_range(0.8..2.2);
        let value = rng.gen_range(0.75..1.0);
        let y0 = (cy - radius).floor().max(0.0) as usize;
        let y1 = ((cy + radius).ceil() as usize).min(h.saturating_sub(1));
        let x0 = (cx - radius).floor().max(0.0) as usize;
        let x1 = ((cx + radius).ceil() as usize).min(w.saturating_sub(1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dy = y as f64 + 0.5 - cy;
                let dx = x as f64 + 0.5 - cx;
                if dx * dx + dy * dy <= radius * radius {
                    let i = y * w + x;
                    out[i] = value;
                    if !occluded[i] {
                        occluded[i] = true;
                        covered += 1;
                    }
                }
            }
        }
    }
    out
}

/// Quantize 4x4 block DCT coefficients by zeroing the `zeroed`
/// highest-frequency entries (zigzag order from the tail). Pixels outside
/// full 4x4 blocks are left unchanged.
pub fn jpeg_like(px: &[f64], h: usize, w: usize, zeroed: usize) -> Vec<f64> {
    // Zigzag traversal of a 4x4 block, lowest frequency first.
    const ZIGZAG: [(usize, usize); 16] = [
        (0, 0),
        (0, 1),
        (1, 0),
        (2, 0),
        (1, 1),
        (0, 2),
        (0, 3),
        (1, 2),
        (2, 1),
        (3, 0),
        (3, 1),
        (2, 2),
        (1, 3),
        (2, 3),
        (3, 2),
        (3, 3),
    ];
    let zeroed = zeroed.min(16);
    let mut out = px.to_vec();
    for by in 0..h / 4 {
        for bx in 0..w / 4 {
            let mut block = [[0.0f64; 4]; 4];
            for (u, row) in block.iter_mut().enumerate() {
                for (v, val) in row.iter_mut().enumerate() {
                    *val = px[(by * 4 + u) * w + bx * 4 + v];
                }
            }
            let mut coeffs = dct4x4(&block);
            for &(u, v) in ZIGZAG.iter().rev().take(zeroed) {
                coeffs[u][v] = 0.0;
            }
            let rec = idct4x4(&coeffs);
            for (u, row) in rec.iter().enumerate() {
                for (v, &val) in row.iter().enumerate() {
                    out[(by * 4 + u) * w + bx * 4 + v] = clip01(val);
                }
            }
        }
    }
    out
}

/// Orthonormal 2-D DCT-II of a 4x4 block.
fn dct4x4(block: &[[f64; 4]; 4]) -> [[f64; 4]; 4] {
    let mut out = [[0.0; 4]; 4];
    for (u, row) in out.iter_mut().enumerate() {
        for (v, coeff) in row.iter_mut().enumerate() {
            let mut s = 0.0;
            for (x, brow) in block.iter().enumerate() {
                for (y, &val) in brow.iter().enumerate() {
                    s += val * dct_basis(x, u) * dct_basis(y, v);
                }
            }
            *coeff = s * dct_norm(u) * dct_norm(v);
        }
    }
    out
}

/// Inverse of [`dct4x4`].
fn idct4x4(coeffs: &[[f64; 4]; 4]) -> [[f64; 4]; 4] {
    let mut out = [[0.0; 4]; 4];
    for (x, row) in out.iter_mut().enumerate() {
        for (y, val) in row.iter_mut().enumerate() {
            let mut s = 0.0;
            for (u, crow) in coeffs.iter().enumerate() {
                for (v, &c) in crow.iter().enumerate() {
                    s += c * dct_norm(u) * dct_norm(v) * dct_basis(x, u) * dct_basis(y, v);
                }
            }
            *val = s;
        }
    }
    out
}

fn dct_basis(x: usize, u: usize) -> f64 {
    ((2.0 * x as f64 + 1.0) * u as f64 * std::f64::consts::PI / 8.0).cos()
}

fn dct_norm(u: usize) -> f64 {
    if u == 0 {
        0.5
    } else {
        std::f64::consts::FRAC_1_SQRT_2
    }
}

/// Box-Muller standard normal draw.
fn std_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen_range(0.0..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        if u1 > 1e-300 {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

/// Seeded, stratified, disjoint splits.
///
/// Per class the allocation stays within one item of the exact proportion;
/// global split sizes equal `round(fraction * |d|)`. Items left over when the
/// fractions sum to less than one are dropped.
pub fn split(d: &Dataset, fractions: &[f64], seed: u64) -> Result<Vec<Dataset>> {
    if fractions.is_empty() {
        return Err(Error::Config("no fractions given".to_string()));
    }
    if fractions.iter().any(|&f| f <= 0.0) {
        return Err(Error::Config("fractions must be positive".to_string()));
    }
    let total: f64 = fractions.iter().sum();
    if total > 1.0 + 1e-12 {
        return Err(Error::Config(format!("fractions sum to {total} > 1")));
    }

    // Per-class item indices, shuffled.
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); d.num_classes];
    for (i, &l) in d.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "split", 0));
    for class in by_class.iter_mut() {
        shuffle(class, &mut rng);
    }

    // Global targets by round-half-up.
    let targets: Vec<usize> = fractions
        .iter()
        .map(|f| (f * d.len() as f64 + 0.5).floor() as usize)
        .collect();

    // Per (split, class) allocation: floor of the exact quota, then upgrade
    // the largest remainders until the split reaches its global target.
    let n_splits = fractions.len();
    let mut alloc = vec![vec![0usize; d.num_classes]; n_splits];
    let mut avail: Vec<usize> = by_class.iter().map(|c| c.len()).collect();
    for (s, f) in fractions.iter().enumerate() {
        let mut remainders: Vec<(f64, usize)> = Vec::with_capacity(d.num_classes);
        let mut assigned = 0;
        for c in 0..d.num_classes {
            let quota = f * by_class[c].len() as f64;
            let base = (quota.floor() as usize).min(avail[c]);
            alloc[s][c] = base;
            assigned += base;
            remainders.push((quota - quota.floor(), c));
        }
        remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let mut need = targets[s].saturating_sub(assigned);
        for &(_, c) in remainders.iter().cycle().take(remainders.len() * 2) {
            if need == 0 {
                break;
            }
            if alloc[s][c] < avail[c] {
                alloc[s][c] += 1;
                need -= 1;
            }
        }
        for c in 0..d.num_classes {
            avail[c] -= alloc[s][c];
        }
    }

    // Hand out the shuffled per-class indices in split order.
    let mut cursor = vec![0usize; d.num_classes];
    let mut out = Vec::with_capacity(n_splits);
    for (s, plan) in alloc.iter().enumerate() {
        let mut idx = Vec::new();
        for (c, &take) in plan.iter().enumerate() {
            let start = cursor[c];
            idx.extend_from_slice(&by_class[c][start..start + take]);
            cursor[c] = start + take;
        }
        idx.sort_unstable();
        if idx.is_empty() {
            return Err(Error::Config(format!(
                "split {s} (fraction {}) came out empty",
                fractions[s]
            )));
        }
        out.push(d.select(&idx, d.role)?);
    }
    Ok(out)
}

/// Fisher-Yates with the given rng.
fn shuffle(xs: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..xs.len()).rev() {
        let j = rng.gen_range(0..=i);
        xs.swap(i, j);
    }
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Read an IDX image/label file pair (the MNIST distribution format).
///
/// Pixels are scaled to [0,1]; the dataset role defaults to `SourceTrain`
/// (re-tag with [`Dataset::with_role`]).
pub fn ingest_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_bytes = fs::read(images_path)?;
    let lbl_bytes = fs::read(labels_path)?;

    let magic = read_u32_be(&img_bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            0,
            format!("bad images magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let count = read_u32_be(&img_bytes, 4)? as usize;
    let h = read_u32_be(&img_bytes, 8)? as usize;
    let w = read_u32_be(&img_bytes, 12)? as usize;
    let expected = 16 + count * h * w;
    if img_bytes.len() < expected {
        return Err(Error::format(
            img_bytes.len() as u64,
            format!("images file truncated: need {expected} bytes"),
        ));
    }

    let magic = read_u32_be(&lbl_bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            0,
            format!("bad labels magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let lbl_count = read_u32_be(&lbl_bytes, 4)? as usize;
    if lbl_count != count {
        return Err(Error::format(
            4,
            format!("{count} images vs {lbl_count} labels"),
        ));
    }
    if lbl_bytes.len() < 8 + count {
        return Err(Error::format(
            lbl_bytes.len() as u64,
            format!("labels file truncated: need {} bytes", 8 + count),
        ));
    }

    let mut inputs = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    let mut max_label = 0usize;
    for i in 0..count {
        let base = 16 + i * h * w;
        let pixels: Vec<f64> = img_bytes[base..base + h * w]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect();
        inputs.push(Tensor::new(pixels, &[1, h, w])?);
        let l = lbl_bytes[8 + i] as usize;
        max_label = max_label.max(l);
        labels.push(l);
    }
    Dataset::new(inputs, labels, DatasetRole::SourceTrain, max_label + 1)
}

fn read_u32_be(bytes: &[u8], offset: usize) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::format(
            offset as u64,
            format!("file truncated reading u32 at byte {offset}"),
        ));
    }
    let mut buf = [0u8; 4];
    buf.copy_from_slice(&bytes[offset..end]);
    Ok(u32::from_be_bytes(buf))
}

const CACHE_MAGIC: &[u8; 4] = b"MSDS";
const CACHE_VERSION: u32 = 1;

/// Write a dataset cache file: magic "MSDS", version, num_classes, count,
/// height, width (u32 LE each), then u16 labels and f32 pixels.
pub fn save_cache(d: &Dataset, path: &Path) -> Result<()> {
    let (h, w) = match d.input_shape() {
        [1, h, w] => (*h, *w),
        [h, w] => (*h, *w),
        s => {
            return Err(Error::Config(format!(
                "only image datasets can be cached, got input shape {s:?}"
            )))
        }
    };
    let mut buf = Vec::with_capacity(24 + d.len() * (2 + 4 * h * w));
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(d.num_classes as u32).to_le_bytes());
    buf.extend_from_slice(&(d.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    for &l in &d.labels {
        buf.extend_from_slice(&(l as u16).to_le_bytes());
    }
    for t in &d.inputs {
        for &p in t.data() {
            buf.extend_from_slice(&(p as f32).to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Read a dataset cache file written by [`save_cache`].
pub fn load_cache(path: &Path, role: DatasetRole) -> Result<Dataset> {
    let mut file = fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;

    if bytes.len() < 24 {
        return Err(Error::format(bytes.len() as u64, "header truncated"));
    }
    if &bytes[0..4] != CACHE_MAGIC {
        return Err(Error::format(0, "bad magic, expected MSDS"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CACHE_VERSION {
        return Err(Error::format(
            4,
            format!("unsupported cache version {version}"),
        ));
    }
    let num_classes = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let count = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[20..24].try_into().unwrap()) as usize;
    let need = 24 + count * 2 + count * h * w * 4;
    if bytes.len() != need {
        return Err(Error::format(
            bytes.len() as u64,
            format!("expected {need} bytes, found {}", bytes.len()),
        ));
    }

    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let off = 24 + i * 2;
        labels.push(u16::from_le_bytes(bytes[off..off + 2].try_into().unwrap()) as usize);
    }
    let px_base = 24 + count * 2;
    let mut inputs = Vec::with_capacity(count);
    for i in 0..count {
        let mut pixels = Vec::with_capacity(h * w);
        for j in 0..h * w {
            let off = px_base + (i * h * w + j) * 4;
            pixels.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64);
        }
        inputs.push(Tensor::new(pixels, &[1, h, w])?);
    }
    Dataset::new(inputs, labels, role, num_classes)
}
