//! Parameterized covariate-shift generators.
//!
//! Shifts transform inputs only — labels pass through untouched. Every
//! transform is a pure function of (input, spec): the RNG is rebuilt from
//! the spec seed on each call, so identical calls give identical outputs.
//!
//! Image corruptions operate in the normalized [−1, 1] input space and clamp
//! back into it. The severity → parameter tables below are fixed constants
//! of this project, chosen so severity monotonically increases distortion.

use serde::{Deserialize, Serialize};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::{Dataset, SplitMeta};
use crate::error::{Error, Result};
use crate::seeding::substream;
use crate::tensor::{Scalar, Tensor};

/// Added-noise std per severity level (on the [−1, 1] scale).
pub const GAUSSIAN_NOISE_SIGMA: [Scalar; 5] = [0.08, 0.14, 0.22, 0.30, 0.40];
/// Fraction of pixels replaced by salt/pepper extremes per severity.
pub const IMPULSE_FRACTION: [Scalar; 5] = [0.03, 0.06, 0.12, 0.20, 0.30];
/// Gaussian blur std in pixels per severity.
pub const BLUR_SIGMA: [Scalar; 5] = [0.5, 0.8, 1.1, 1.5, 2.0];
/// Contrast multiplier (toward the per-image channel mean) per severity.
pub const CONTRAST_FACTOR: [Scalar; 5] = [0.75, 0.55, 0.40, 0.30, 0.20];
/// Pixelation: image is box-downsampled to this fraction of its side and
/// re-expanded with nearest neighbor.
pub const PIXELATE_FRACTION: [Scalar; 5] = [0.75, 0.60, 0.50, 0.35, 0.25];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShiftKind {
    Identity,
    GaussianNoise,
    ImpulseNoise,
    GaussianBlur,
    ContrastScale,
    Pixelate,
    FeatureRandomize,
}

impl ShiftKind {
    pub fn is_image_kind(&self) -> bool {
        matches!(
            self,
            ShiftKind::GaussianNoise
                | ShiftKind::ImpulseNoise
                | ShiftKind::GaussianBlur
                | ShiftKind::ContrastScale
                | ShiftKind::Pixelate
        )
    }

    pub fn name(&self) -> &'static str {
        match self {
            ShiftKind::Identity => "identity",
            ShiftKind::GaussianNoise => "gaussian-noise",
            ShiftKind::ImpulseNoise => "impulse-noise",
            ShiftKind::GaussianBlur => "gaussian-blur",
            ShiftKind::ContrastScale => "contrast-scale",
            ShiftKind::Pixelate => "pixelate",
            ShiftKind::FeatureRandomize => "feature-randomize",
        }
    }
}

/// Distortion magnitude: integer level for image kinds, replacement
/// probability for feature randomization, nothing for identity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Severity {
    None,
    Level(u8),
    Probability(Scalar),
}

impl Severity {
    /// Numeric value recorded in results: level as 1–5, probability as p, 0 otherwise.
    pub fn value(&self) -> f64 {
        match *self {
            Severity::None => 0.0,
            Severity::Level(l) => l as f64,
            Severity::Probability(p) => p,
        }
    }
}

/// A named corruption or feature-randomization transform with a severity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub kind: ShiftKind,
    pub severity: Severity,
    pub seed: u64,
}

impl ShiftSpec {
    pub fn identity() -> Self {
        ShiftSpec { kind: ShiftKind::Identity, severity: Severity::None, seed: 0 }
    }

    pub fn image(kind: ShiftKind, level: u8, seed: u64) -> Result<Self> {
        let spec = ShiftSpec { kind, severity: Severity::Level(level), seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn feature_randomize(p: Scalar, seed: u64) -> Result<Self> {
        let spec = ShiftSpec {
            kind: ShiftKind::FeatureRandomize,
            severity: Severity::Probability(p),
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind, self.severity) {
            (ShiftKind::Identity, _) => Ok(()),
            (k, Severity::Level(l)) if k.is_image_kind() => {
                if (1..=5).contains(&l) {
                    Ok(())
                } else {
                    Err(Error::InvalidArgument(format!("severity level {l} outside 1–5")))
                }
            }
            (ShiftKind::FeatureRandomize, Severity::Probability(p)) => {
                if p > 0.0 && p <= 1.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidArgument(format!(
                        "replacement probability {p} outside (0, 1]"
                    )))
                }
            }
            (k, s) => Err(Error::InvalidArgument(format!(
                "severity {s:?} does not match shift kind {}",
                k.name()
            ))),
        }
    }

    fn level_index(&self) -> usize {
        match self.severity {
            Severity::Level(l) => (l - 1) as usize,
            _ => 0,
        }
    }
}

/// Empirical per-feature training marginals, the replacement source for
/// feature randomization. Replacing an entry with a marginal draw keeps
/// each feature in-distribution while destroying the joint structure.
#[derive(Debug, Clone)]
pub struct FeatureMarginals {
    values: Vec<Vec<Scalar>>,
}

impl FeatureMarginals {
    pub fn from_dataset(train: &Dataset) -> Result<Self> {
        let shape = train.features.shape();
        if shape.len() != 2 {
            return Err(Error::ShapeMismatch(
                "feature marginals need rank-2 (tabular) features".into(),
            ));
        }
        let (n, d) = (shape[0], shape[1]);
        let mut values = vec![Vec::with_capacity(n); d];
        for i in 0..n {
            for j in 0..d {
                values[j].push(train.features.data()[i * d + j]);
            }
        }
        Ok(FeatureMarginals { values })
    }

    pub fn num_features(&self) -> usize {
        self.values.len()
    }

    pub fn feature_values(&self, j: usize) -> &[Scalar] {
        &self.values[j]
    }

    fn draw(&self, j: usize, rng: &mut impl Rng) -> Scalar {
        let col = &self.values[j];
        col[rng.gen_range(0..col.len())]
    }
}

/// Apply a shift to a feature tensor. Deterministic given the spec;
/// identity returns the input bit-identically. `marginals` is required by
/// feature randomization and ignored otherwise.
pub fn apply_shift(
    x: &Tensor,
    spec: &ShiftSpec,
    marginals: Option<&FeatureMarginals>,
) -> Result<Tensor> {
    spec.validate()?;
    match spec.kind {
        ShiftKind::Identity => Ok(x.clone()),
        ShiftKind::FeatureRandomize => {
            if x.rank() != 2 {
                return Err(Error::ShapeMismatch(format!(
                    "feature randomization needs tabular (rank-2) input, got rank {}",
                    x.rank()
                )));
            }
            let m = marginals.ok_or_else(|| {
                Error::InvalidArgument(
                    "feature randomization needs training marginals".into(),
                )
            })?;
            let d = x.shape()[1];
            if m.num_features() != d {
                return Err(Error::ShapeMismatch(format!(
                    "marginals cover {} features, input has {d}",
                    m.num_features()
                )));
            }
            let p = match spec.severity {
                Severity::Probability(p) => p,
                _ => unreachable!("validated"),
            };
            let mut rng = substream(spec.seed, "feature-randomize");
            let mut out = x.data().to_vec();
            for (i, v) in out.iter_mut().enumerate() {
                if rng.gen::<Scalar>() < p {
                    *v = m.draw(i % d, &mut rng);
                }
            }
            Ok(Tensor::new(x.shape(), out)?)
        }
        kind => {
            if x.rank() != 4 {
                return Err(Error::ShapeMismatch(format!(
                    "{} needs image (rank-4) input, got rank {}",
                    kind.name(),
                    x.rank()
                )));
            }
            let idx = spec.level_index();
            let out = match kind {
                ShiftKind::GaussianNoise => gaussian_noise(x, GAUSSIAN_NOISE_SIGMA[idx], spec.seed),
                ShiftKind::ImpulseNoise => impulse_noise(x, IMPULSE_FRACTION[idx], spec.seed),
                ShiftKind::GaussianBlur => gaussian_blur(x, BLUR_SIGMA[idx]),
                ShiftKind::ContrastScale => contrast_scale(x, CONTRAST_FACTOR[idx]),
                ShiftKind::Pixelate => pixelate(x, PIXELATE_FRACTION[idx]),
                _ => unreachable!(),
            };
            Ok(out)
        }
    }
}

fn clamp_unit(v: Scalar) -> Scalar {
    v.clamp(-1.0, 1.0)
}

fn gaussian_noise(x: &Tensor, sigma: Scalar, seed: u64) -> Tensor {
    let mut rng = substream(seed, "gaussian-noise");
    let out: Vec<Scalar> = x
        .data()
        .iter()
        .map(|&v| clamp_unit(v + sigma * rng.sample::<Scalar, _>(StandardNormal)))
        .collect();
    Tensor::from_op(x.shape().to_vec(), out)
}

fn impulse_noise(x: &Tensor, fraction: Scalar, seed: u64) -> Tensor {
    let (n, c, h, w) = x.dims4().expect("validated rank 4");
    let mut rng = substream(seed, "impulse-noise");
    let mut out = x.data().to_vec();
    for ni in 0..n {
        for py in 0..h {
            for px in 0..w {
                if rng.gen::<Scalar>() < fraction {
                    let extreme = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                    for ci in 0..c {
                        out[((ni * c + ci) * h + py) * w + px] = extreme;
                    }
                }
            }
        }
    }
    Tensor::from_op(x.shape().to_vec(), out)
}

fn gaussian_blur(x: &Tensor, sigma: Scalar) -> Tensor {
    let (n, c, h, w) = x.dims4().expect("validated rank 4");
    let radius = (2.5 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        kernel.push((-((i * i) as Scalar) / (2.0 * sigma * sigma)).exp());
    }
    let z: Scalar = kernel.iter().sum();
    for k in &mut kernel {
        *k /= z;
    }
    let src = x.data();
    // horizontal pass then vertical pass, clamping taps to the edge
    let mut mid = vec![0.0; src.len()];
    for img in 0..n * c {
        let base = img * h * w;
        for py in 0..h {
            for px in 0..w {
                let mut s = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let tap = (px as isize + ki as isize - radius).clamp(0, w as isize - 1);
                    s += kv * src[base + py * w + tap as usize];
                }
                mid[base + py * w + px] = s;
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for img in 0..n * c {
        let base = img * h * w;
        for py in 0..h {
            for px in 0..w {
                let mut s = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let tap = (py as isize + ki as isize - radius).clamp(0, h as isize - 1);
                    s += kv * mid[base + tap as usize * w + px];
                }
                out[base + py * w + px] = clamp_unit(s);
            }
        }
    }
    Tensor::from_op(x.shape().to_vec(), out)
}

fn contrast_scale(x: &Tensor, factor: Scalar) -> Tensor {
    let (n, c, h, w) = x.dims4().expect("validated rank 4");
    let mut out = x.data().to_vec();
    for img in 0..n * c {
        let base = img * h * w;
        let mean: Scalar = out[base..base + h * w].iter().sum::<Scalar>() / (h * w) as Scalar;
        for v in &mut out[base..base + h * w] {
            *v = clamp_unit((*v - mean) * factor + mean);
        }
    }
    Tensor::from_op(x.shape().to_vec(), out)
}

fn pixelate(x: &Tensor, fraction: Scalar) -> Tensor {
    let (n, c, h, w) = x.dims4().expect("validated rank 4");
    let sh = ((h as Scalar * fraction).round() as usize).max(1);
    let sw = ((w as Scalar * fraction).round() as usize).max(1);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for img in 0..n * c {
        let base = img * h * w;
        // box-average into the small grid, then nearest-neighbor back up
        let mut small = vec![0.0; sh * sw];
        let mut count = vec![0usize; sh * sw];
        for py in 0..h {
            for px in 0..w {
                let sy = py * sh / h;
                let sx = px * sw / w;
                small[sy * sw + sx] += src[base + py * w + px];
                count[sy * sw + sx] += 1;
            }
        }
        for (v, &cnt) in small.iter_mut().zip(&count) {
            *v /= cnt.max(1) as Scalar;
        }
        for py in 0..h {
            for px in 0..w {
                let sy = py * sh / h;
                let sx = px * sw / w;
                out[base + py * w + px] = small[sy * sw + sx];
            }
        }
    }
    Tensor::from_op(x.shape().to_vec(), out)
}

/// Shift a whole dataset: features transformed, labels preserved exactly,
/// metadata updated with the shift provenance.
pub fn build_split(
    dataset: &Dataset,
    spec: &ShiftSpec,
    marginals: Option<&FeatureMarginals>,
) -> Result<Dataset> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("cannot shift an empty dataset".into()));
    }
    let features = apply_shift(&dataset.features, spec, marginals)?;
    Dataset::new(
        features,
        dataset.labels.clone(),
        dataset.num_classes,
        SplitMeta {
            name: format!("{}@{}-s{}", dataset.meta.name, spec.kind.name(), spec.severity.value()),
            shift_kind: spec.kind.name().to_string(),
            severity: spec.severity.value(),
            shift_seed: spec.seed,
        },
    )
}

/// Draw a batch mixing several splits with equal expected representation.
/// Returns the batch plus the number of examples taken from each split.
pub fn build_mixed_batch(
    splits: &[&Dataset],
    t: usize,
    seed: u64,
) -> Result<(Tensor, Vec<usize>, Vec<usize>)> {
    if splits.is_empty() {
        return Err(Error::InvalidArgument("no splits to mix".into()));
    }
    if t < splits.len() {
        return Err(Error::InvalidArgument(format!(
            "batch size {t} smaller than the {} splits being mixed",
            splits.len()
        )));
    }
    let k = splits[0].num_classes;
    let shape = splits[0].example_shape().to_vec();
    for s in splits {
        if s.example_shape() != shape || s.num_classes != k {
            return Err(Error::ShapeMismatch("mixed splits disagree on shape/classes".into()));
        }
    }
    let mut rng = substream(seed, "mixed-batch");
    let mut composition = vec![0usize; splits.len()];
    let mut rows: Vec<&Dataset> = Vec::with_capacity(t);
    let mut indices = Vec::with_capacity(t);
    for _ in 0..t {
        let which = rng.gen_range(0..splits.len());
        let idx = rng.gen_range(0..splits[which].len());
        composition[which] += 1;
        rows.push(splits[which]);
        indices.push((which, idx));
    }
    let mut labels = Vec::with_capacity(t);
    let mut parts: Vec<Tensor> = Vec::with_capacity(t);
    for &(which, idx) in &indices {
        let (x, y) = splits[which].gather(&[idx])?;
        parts.push(x);
        labels.push(y[0]);
    }
    let _ = rows;
    let refs: Vec<&Tensor> = parts.iter().collect();
    Ok((Tensor::concat_rows(&refs)?, labels, composition))
}
