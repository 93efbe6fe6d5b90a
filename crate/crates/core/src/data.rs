//! Datasets and seeded synthetic generators.
//!
//! Nothing is downloaded: tabular data comes from a Gaussian-mixture factor
//! model, image data from a procedural shape/texture renderer, both fully
//! determined by their seeds. A plain numeric CSV loader covers local files.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::substream;
use crate::tensor::{Scalar, Tensor};

/// Provenance of a dataset: which shift produced it, if any.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMeta {
    pub name: String,
    pub shift_kind: String,
    /// Severity level (1–5) for image corruptions, replacement probability
    /// for feature randomization, 0 for unshifted data.
    pub severity: f64,
    pub shift_seed: u64,
}

impl SplitMeta {
    pub fn unshifted(name: &str) -> Self {
        SplitMeta {
            name: name.to_string(),
            shift_kind: "identity".to_string(),
            severity: 0.0,
            shift_seed: 0,
        }
    }
}

/// Feature/label store. Features are `[n, d]` for tabular data and
/// `[n, c, h, w]` for images.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub meta: SplitMeta,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize, meta: SplitMeta) -> Result<Self> {
        if features.batch_len() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} feature rows, {} labels",
                features.batch_len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range 0..{num_classes}"
            )));
        }
        Ok(Dataset { features, labels, num_classes, meta })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-example feature shape (without the batch axis).
    pub fn example_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    pub fn gather(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let x = self.features.gather_rows(idx)?;
        let y = idx.iter().map(|&i| self.labels[i]).collect();
        Ok((x, y))
    }

    /// Contiguous batch ranges of size `t`; the final partial range is kept.
    pub fn batch_ranges(&self, t: usize) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        while start < self.len() {
            let end = (start + t).min(self.len());
            out.push(start..end);
            start = end;
        }
        out
    }
}

// ── synthetic tabular ────────────────────────────────────────────────────

/// Gaussian-mixture factor model for tabular tasks.
///
/// x = μ_class + F·g + noise·e with shared factor loadings F, so features are
/// strongly correlated through the latent factors g. Class means, loadings,
/// and draws are all functions of the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularSpec {
    pub classes: usize,
    pub features: usize,
    pub factors: usize,
    /// Scale of class-mean dispersion; controls task difficulty.
    pub separation: Scalar,
    /// Std of the per-feature idiosyncratic noise.
    pub noise: Scalar,
    pub seed: u64,
}

impl Default for TabularSpec {
    fn default() -> Self {
        TabularSpec {
            classes: 10,
            features: 16,
            factors: 4,
            separation: 1.0,
            noise: 0.5,
            seed: 7,
        }
    }
}

/// One split of the tabular task. The mixture itself depends only on
/// `spec.seed`; the example draws depend on (seed, tag), so "train", "val",
/// and "test" are disjoint streams over the same distribution.
pub fn tabular_split(spec: &TabularSpec, n: usize, tag: &str) -> Result<Dataset> {
    if n == 0 || spec.classes < 2 || spec.features == 0 {
        return Err(Error::InvalidArgument("tabular split needs n ≥ 1 and K ≥ 2".into()));
    }
    let d = spec.features;
    let k = spec.classes;
    let r = spec.factors;

    let mut structure = substream(spec.seed, "tabular-structure");
    let means: Vec<Scalar> = (0..k * d)
        .map(|_| spec.separation * structure.sample::<Scalar, _>(StandardNormal))
        .collect();
    let loadings: Vec<Scalar> = (0..d * r)
        .map(|_| structure.sample::<Scalar, _>(StandardNormal))
        .collect();

    let mut draw = substream(spec.seed, &format!("tabular-draw-{tag}"));
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let y = draw.gen_range(0..k);
        labels.push(y);
        let g: Vec<Scalar> = (0..r).map(|_| draw.sample(StandardNormal)).collect();
        for j in 0..d {
            let mut v = means[y * d + j];
            for (f, gf) in g.iter().enumerate() {
                v += loadings[j * r + f] * gf;
            }
            v += spec.noise * draw.sample::<Scalar, _>(StandardNormal);
            data.push(v);
        }
    }
    Dataset::new(
        Tensor::new(&[n, d], data)?,
        labels,
        k,
        SplitMeta::unshifted(&format!("tabular-{tag}")),
    )
}

/// Two well-separated Gaussian blobs; linearly separable with margin.
pub fn separable_blobs(n: usize, features: usize, seed: u64) -> Result<Dataset> {
    let mut rng = substream(seed, "blobs");
    let mut data = Vec::with_capacity(n * features);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let y = rng.gen_range(0..2usize);
        labels.push(y);
        let center = if y == 0 { -4.0 } else { 4.0 };
        for _ in 0..features {
            data.push(center + rng.sample::<Scalar, _>(StandardNormal));
        }
    }
    Dataset::new(
        Tensor::new(&[n, features], data)?,
        labels,
        2,
        SplitMeta::unshifted("blobs"),
    )
}

// ── synthetic images ─────────────────────────────────────────────────────

/// Procedural colored shape/texture classes on a dark noisy background,
/// values in [−1, 1]. Six classes: disc, square, triangle, horizontal
/// stripes, vertical stripes, checkerboard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSpec {
    pub size: usize,
    pub seed: u64,
}

pub const IMAGE_CLASSES: usize = 6;

impl Default for ImageSpec {
    fn default() -> Self {
        ImageSpec { size: 16, seed: 7 }
    }
}

pub fn image_split(spec: &ImageSpec, n: usize, tag: &str) -> Result<Dataset> {
    if n == 0 || spec.size < 8 {
        return Err(Error::InvalidArgument("image split needs n ≥ 1 and size ≥ 8".into()));
    }
    let s = spec.size;
    let mut rng = substream(spec.seed, &format!("image-draw-{tag}"));
    let mut data = Vec::with_capacity(n * 3 * s * s);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let y = rng.gen_range(0..IMAGE_CLASSES);
        labels.push(y);

        let fg: [Scalar; 3] = [
            rng.gen_range(0.2..1.0),
            rng.gen_range(0.2..1.0),
            rng.gen_range(0.2..1.0),
        ];
        let bg: [Scalar; 3] = [
            rng.gen_range(-0.95..-0.5),
            rng.gen_range(-0.95..-0.5),
            rng.gen_range(-0.95..-0.5),
        ];
        let cx = s as Scalar / 2.0 + rng.gen_range(-2.0..2.0);
        let cy = s as Scalar / 2.0 + rng.gen_range(-2.0..2.0);
        let radius = rng.gen_range(s as Scalar * 0.22..s as Scalar * 0.38);
        let period = rng.gen_range(2..4usize);
        let phase = rng.gen_range(0..period);

        let mut mask = vec![false; s * s];
        for py in 0..s {
            for px in 0..s {
                let dx = px as Scalar + 0.5 - cx;
                let dy = py as Scalar + 0.5 - cy;
                mask[py * s + px] = match y {
                    0 => dx * dx + dy * dy <= radius * radius,
                    1 => dx.abs() <= radius && dy.abs() <= radius,
                    // upright triangle: inside when |dx| shrinks toward the apex
                    2 => dy >= -radius && dy <= radius && dx.abs() <= (dy + radius) / 2.0,
                    3 => (py + phase) / period % 2 == 0,
                    4 => (px + phase) / period % 2 == 0,
                    _ => ((px + phase) / period + (py + phase) / period) % 2 == 0,
                };
            }
        }
        for ch in 0..3 {
            for (i, &m) in mask.iter().enumerate() {
                let _ = i;
                let base = if m { fg[ch] } else { bg[ch] };
                let noisy = base + 0.05 * rng.sample::<Scalar, _>(StandardNormal);
                data.push(noisy.clamp(-1.0, 1.0));
            }
        }
    }
    Dataset::new(
        Tensor::new(&[n, 3, s, s], data)?,
        labels,
        IMAGE_CLASSES,
        SplitMeta::unshifted(&format!("image-{tag}")),
    )
}

// ── local files ──────────────────────────────────────────────────────────

/// Load a headerless numeric CSV: feature columns followed by one integer
/// label column. Class count is max label + 1.
pub fn load_csv_tabular(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::MissingArtifact(format!("dataset file {}: {e}", path.display()))
    })?;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 2 {
            return Err(Error::Config(format!(
                "{}:{}: need at least one feature and a label",
                path.display(),
                lineno + 1
            )));
        }
        let d = fields.len() - 1;
        match width {
            None => width = Some(d),
            Some(w) if w != d => {
                return Err(Error::Config(format!(
                    "{}:{}: inconsistent column count",
                    path.display(),
                    lineno + 1
                )))
            }
            _ => {}
        }
        for f in &fields[..d] {
            let v: Scalar = f.trim().parse().map_err(|_| {
                Error::Config(format!("{}:{}: bad number {f:?}", path.display(), lineno + 1))
            })?;
            data.push(v);
        }
        let y: usize = fields[d].trim().parse().map_err(|_| {
            Error::Config(format!(
                "{}:{}: bad label {:?}",
                path.display(),
                lineno + 1,
                fields[d]
            ))
        })?;
        labels.push(y);
    }
    let n = labels.len();
    let d = width.ok_or_else(|| Error::Config(format!("{}: empty file", path.display())))?;
    let k = labels.iter().max().map(|m| m + 1).unwrap_or(0).max(2);
    Dataset::new(
        Tensor::new(&[n, d], data)?,
        labels,
        k,
        SplitMeta::unshifted(&format!("csv:{}", path.display())),
    )
}
