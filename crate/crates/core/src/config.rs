//! Experiment configuration: one human-editable TOML file, schema version 1.
//!
//! CLI flags override individual fields. The config hash covers every
//! semantically meaningful section (everything except the output directory
//! and the cosmetic name), so results can be keyed by what was actually run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    image_split, load_csv_tabular, tabular_split, Dataset, ImageSpec, TabularSpec, IMAGE_CLASSES,
};
use crate::error::{Error, Result};
use crate::methods::{MethodBase, MethodSpec, TemperaturePolicy};
use crate::model::{
    Architecture, BnScope, FrozenCapturePolicy, LrDrop, ModelSpec, OptimizerKind, TrainConfig,
};
use crate::norm::{BnMode, NormFamily, NormKind};
use crate::seeding::substream;
use crate::shift::{FeatureMarginals, ShiftKind, ShiftSpec};
use crate::tensor::Scalar;

/// Version tag written into every output table.
pub const OUTPUT_SCHEMA_VERSION: u32 = 1;
/// Config file schema this build understands.
pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    #[serde(default)]
    pub name: String,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    #[serde(default = "default_methods")]
    pub methods: Vec<MethodConfig>,
    #[serde(default)]
    pub shifts: ShiftsConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub diagnostics: DiagnosticsSection,
    #[serde(default)]
    pub sweep_eps: SweepEpsSection,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    SyntheticTabular,
    SyntheticImage,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    #[serde(default = "d_classes")]
    pub classes: usize,
    #[serde(default = "d_features")]
    pub features: usize,
    #[serde(default = "d_factors")]
    pub factors: usize,
    #[serde(default = "d_separation")]
    pub separation: Scalar,
    #[serde(default = "d_noise")]
    pub noise: Scalar,
    /// Image side length (synthetic-image only).
    #[serde(default = "d_size")]
    pub size: usize,
    #[serde(default = "d_train_n")]
    pub train: usize,
    #[serde(default = "d_val_n")]
    pub val: usize,
    #[serde(default = "d_test_n")]
    pub test: usize,
    #[serde(default = "d_seed")]
    pub seed: u64,
    /// CSV file (csv kind only): features then an integer label column.
    #[serde(default)]
    pub path: Option<PathBuf>,
}

fn d_classes() -> usize { 10 }
fn d_features() -> usize { 16 }
fn d_factors() -> usize { 4 }
fn d_separation() -> Scalar { 1.0 }
fn d_noise() -> Scalar { 0.5 }
fn d_size() -> usize { 16 }
fn d_train_n() -> usize { 4000 }
fn d_val_n() -> usize { 1000 }
fn d_test_n() -> usize { 2000 }
fn d_seed() -> u64 { 11 }

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchName {
    Mlp,
    TinyCnn,
    MlpLastLayerBn,
    TinyCnnLastLayerBn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: ArchName,
    #[serde(default = "d_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "d_channels")]
    pub channels: Vec<usize>,
    #[serde(default = "d_strides")]
    pub strides: Vec<usize>,
    #[serde(default = "d_norm")]
    pub norm: String,
    #[serde(default = "d_groups")]
    pub groups: usize,
    /// Defaults to true with group norm, false otherwise.
    #[serde(default)]
    pub weight_standardization: Option<bool>,
    #[serde(default = "d_eps")]
    pub epsilon: Scalar,
    #[serde(default = "d_momentum")]
    pub momentum: Scalar,
}

fn d_hidden() -> Vec<usize> { vec![64, 64] }
fn d_channels() -> Vec<usize> { vec![8, 16, 32] }
fn d_strides() -> Vec<usize> { vec![1, 2, 2] }
fn d_norm() -> String { "batch".into() }
fn d_groups() -> usize { 2 }
fn d_eps() -> Scalar { 1e-3 }
fn d_momentum() -> Scalar { 0.99 }

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "d_optimizer")]
    pub optimizer: String,
    #[serde(default = "d_lr")]
    pub lr: Scalar,
    #[serde(default = "d_train_momentum")]
    pub momentum: Scalar,
    #[serde(default = "d_adam_eps")]
    pub adam_eps: Scalar,
    #[serde(default = "d_batch_size")]
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub lr_drops: Vec<LrDrop>,
    #[serde(default = "d_seeds")]
    pub seeds: Vec<u64>,
}

fn d_optimizer() -> String { "adam".into() }
fn d_lr() -> Scalar { 3e-3 }
fn d_train_momentum() -> Scalar { 0.9 }
fn d_adam_eps() -> Scalar { 1e-8 }
fn d_batch_size() -> usize { 128 }
fn d_seeds() -> Vec<u64> { vec![1] }

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    pub name: String,
    #[serde(default = "d_base")]
    pub base: String,
    #[serde(default)]
    pub members: Option<usize>,
    pub bn_mode: String,
    #[serde(default = "d_scope")]
    pub bn_scope: String,
    #[serde(default = "d_temp")]
    pub temperature: String,
    #[serde(default)]
    pub eps_override: Option<Scalar>,
    #[serde(default = "d_frozen")]
    pub frozen_policy: String,
}

fn d_base() -> String { "single".into() }
fn d_scope() -> String { "all".into() }
fn d_temp() -> String { "none".into() }
fn d_frozen() -> String { "batch-upstream".into() }

fn default_methods() -> Vec<MethodConfig> {
    vec![
        MethodConfig {
            name: "vanilla-ema".into(),
            base: d_base(),
            members: None,
            bn_mode: "ema".into(),
            bn_scope: d_scope(),
            temperature: d_temp(),
            eps_override: None,
            frozen_policy: d_frozen(),
        },
        MethodConfig {
            name: "vanilla-batch".into(),
            base: d_base(),
            members: None,
            bn_mode: "batch".into(),
            bn_scope: d_scope(),
            temperature: d_temp(),
            eps_override: None,
            frozen_policy: d_frozen(),
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftsConfig {
    #[serde(default)]
    pub kinds: Vec<String>,
    #[serde(default = "d_levels")]
    pub levels: Vec<u8>,
    #[serde(default = "d_probabilities")]
    pub probabilities: Vec<Scalar>,
    #[serde(default = "d_true")]
    pub include_identity: bool,
    #[serde(default = "d_shift_seed")]
    pub seed: u64,
}

fn d_levels() -> Vec<u8> { vec![1, 2, 3, 4, 5] }
fn d_probabilities() -> Vec<Scalar> {
    (0..10).map(|i| 0.05 + 0.1 * i as Scalar).collect()
}
fn d_true() -> bool { true }
fn d_shift_seed() -> u64 { 99 }

impl Default for ShiftsConfig {
    fn default() -> Self {
        ShiftsConfig {
            kinds: Vec::new(),
            levels: d_levels(),
            probabilities: d_probabilities(),
            include_identity: true,
            seed: d_shift_seed(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "d_batch_sizes")]
    pub batch_sizes: Vec<usize>,
    #[serde(default = "d_bins")]
    pub num_bins: usize,
}

fn d_batch_sizes() -> Vec<usize> { vec![500] }
fn d_bins() -> usize { 10 }

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { batch_sizes: d_batch_sizes(), num_bins: d_bins() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsSection {
    #[serde(default = "d_layers")]
    pub layers: Vec<String>,
    #[serde(default = "d_modes")]
    pub modes: Vec<String>,
    #[serde(default = "d_hist_channels")]
    pub hist_channels: Vec<usize>,
    #[serde(default = "d_hist_bins")]
    pub hist_bins: usize,
    #[serde(default = "d_sample_cap")]
    pub sample_cap: usize,
}

fn d_layers() -> Vec<String> { vec!["penultimate".into(), "logits".into()] }
fn d_modes() -> Vec<String> { vec!["ema".into(), "batch".into()] }
fn d_hist_channels() -> Vec<usize> { vec![0, 1, 2, 3] }
fn d_hist_bins() -> usize { 50 }
fn d_sample_cap() -> usize { crate::diagnostics::DEFAULT_SAMPLE_CAP }

impl Default for DiagnosticsSection {
    fn default() -> Self {
        DiagnosticsSection {
            layers: d_layers(),
            modes: d_modes(),
            hist_channels: d_hist_channels(),
            hist_bins: d_hist_bins(),
            sample_cap: d_sample_cap(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepEpsSection {
    #[serde(default = "d_multipliers")]
    pub multipliers: Vec<Scalar>,
    /// Method names to sweep; empty means every single-model method.
    #[serde(default)]
    pub methods: Vec<String>,
}

fn d_multipliers() -> Vec<Scalar> { vec![1.0, 10.0, 100.0, 1e3, 1e4, 1e5] }

impl Default for SweepEpsSection {
    fn default() -> Self {
        SweepEpsSection { multipliers: d_multipliers(), methods: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

/// Everything resolved from the dataset section.
pub struct ResolvedData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub marginals: Option<FeatureMarginals>,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} unsupported (this build reads {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.train.seeds.is_empty() {
            return Err(Error::Config("train.seeds must be nonempty".into()));
        }
        if self.train.epochs == 0 && self.methods.iter().any(|m| m.bn_mode != "ema") {
            // legal, but almost certainly a mistake worth allowing anyway
        }
        if self.methods.is_empty() {
            return Err(Error::Config("methods list must be nonempty".into()));
        }
        if self.eval.batch_sizes.is_empty() {
            return Err(Error::Config("eval.batch_sizes must be nonempty".into()));
        }
        if self.dataset.kind == DatasetKind::Csv {
            match &self.dataset.path {
                None => return Err(Error::Config("csv dataset needs dataset.path".into())),
                Some(p) if !p.exists() => {
                    return Err(Error::Config(format!(
                        "dataset file {} does not exist",
                        p.display()
                    )))
                }
                _ => {}
            }
        }
        for m in &self.methods {
            m.to_spec()?;
        }
        self.shift_cells()?;
        self.optimizer_kind()?;
        for s in &self.sweep_eps.multipliers {
            if !(*s > 0.0) {
                return Err(Error::Config("ε multipliers must be > 0".into()));
            }
        }
        Ok(())
    }

    fn optimizer_kind(&self) -> Result<OptimizerKind> {
        match self.train.optimizer.as_str() {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd-nesterov" => Ok(OptimizerKind::SgdNesterov),
            other => Err(Error::Config(format!(
                "unknown optimizer {other:?} (adam | sgd-nesterov)"
            ))),
        }
    }

    pub fn norm_kind(&self) -> Result<NormKind> {
        let family = match self.model.norm.as_str() {
            "batch" => NormFamily::Batch,
            "instance" => NormFamily::Instance,
            "layer" => NormFamily::Layer,
            "group" => NormFamily::Group { groups: self.model.groups },
            "none" => NormFamily::None,
            other => {
                return Err(Error::Config(format!(
                    "unknown norm {other:?} (batch | instance | layer | group | none)"
                )))
            }
        };
        let weight_std = self
            .model
            .weight_standardization
            .unwrap_or(matches!(family, NormFamily::Group { .. }));
        let kind = NormKind { family, weight_std };
        Ok(kind)
    }

    /// Model spec for one grid seed.
    pub fn model_spec(&self, seed: u64) -> Result<ModelSpec> {
        let (input_shape, num_classes) = match self.dataset.kind {
            DatasetKind::SyntheticTabular => (vec![self.dataset.features], self.dataset.classes),
            DatasetKind::SyntheticImage => {
                (vec![3, self.dataset.size, self.dataset.size], IMAGE_CLASSES)
            }
            DatasetKind::Csv => {
                let d = load_csv_tabular(self.dataset.path.as_ref().expect("validated"))?;
                (d.example_shape().to_vec(), d.num_classes)
            }
        };
        let arch = match self.model.arch {
            ArchName::Mlp => Architecture::Mlp { hidden: self.model.hidden.clone() },
            ArchName::MlpLastLayerBn => {
                Architecture::MlpLastLayerBn { hidden: self.model.hidden.clone() }
            }
            ArchName::TinyCnn => Architecture::TinyCnn {
                channels: self.model.channels.clone(),
                strides: self.model.strides.clone(),
            },
            ArchName::TinyCnnLastLayerBn => Architecture::TinyCnnLastLayerBn {
                channels: self.model.channels.clone(),
                strides: self.model.strides.clone(),
            },
        };
        let spec = ModelSpec {
            arch,
            norm: self.norm_kind()?,
            input_shape,
            num_classes,
            eps: self.model.epsilon,
            momentum: self.model.momentum,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn train_config(&self, seed: u64) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            optimizer: self.optimizer_kind()?,
            lr: self.train.lr,
            momentum: self.train.momentum,
            adam_eps: self.train.adam_eps,
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            lr_drops: self.train.lr_drops.clone(),
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Generate train/val/test data (and feature marginals for tabular
    /// shifts). CSV files are split 70/15/15 by a seeded shuffle.
    pub fn resolve_data(&self) -> Result<ResolvedData> {
        match self.dataset.kind {
            DatasetKind::SyntheticTabular => {
                let spec = TabularSpec {
                    classes: self.dataset.classes,
                    features: self.dataset.features,
                    factors: self.dataset.factors,
                    separation: self.dataset.separation,
                    noise: self.dataset.noise,
                    seed: self.dataset.seed,
                };
                let train = tabular_split(&spec, self.dataset.train, "train")?;
                let val = tabular_split(&spec, self.dataset.val, "val")?;
                let test = tabular_split(&spec, self.dataset.test, "test")?;
                let marginals = Some(FeatureMarginals::from_dataset(&train)?);
                Ok(ResolvedData { train, val, test, marginals })
            }
            DatasetKind::SyntheticImage => {
                let spec = ImageSpec { size: self.dataset.size, seed: self.dataset.seed };
                Ok(ResolvedData {
                    train: image_split(&spec, self.dataset.train, "train")?,
                    val: image_split(&spec, self.dataset.val, "val")?,
                    test: image_split(&spec, self.dataset.test, "test")?,
                    marginals: None,
                })
            }
            DatasetKind::Csv => {
                let all = load_csv_tabular(self.dataset.path.as_ref().expect("validated"))?;
                let n = all.len();
                if n < 10 {
                    return Err(Error::Config("csv dataset too small to split".into()));
                }
                use rand::seq::SliceRandom;
                let mut idx: Vec<usize> = (0..n).collect();
                idx.shuffle(&mut substream(self.dataset.seed, "csv-split"));
                let n_train = n * 70 / 100;
                let n_val = n * 15 / 100;
                let make = |ids: &[usize], name: &str| -> Result<Dataset> {
                    let (x, y) = all.gather(ids)?;
                    Dataset::new(
                        x,
                        y,
                        all.num_classes,
                        crate::data::SplitMeta::unshifted(name),
                    )
                };
                let train = make(&idx[..n_train], "csv-train")?;
                let val = make(&idx[n_train..n_train + n_val], "csv-val")?;
                let test = make(&idx[n_train + n_val..], "csv-test")?;
                let marginals = Some(FeatureMarginals::from_dataset(&train)?);
                Ok(ResolvedData { train, val, test, marginals })
            }
        }
    }

    /// The shift grid: identity first when enabled, then kind × severity in
    /// config order.
    pub fn shift_cells(&self) -> Result<Vec<ShiftSpec>> {
        let mut cells = Vec::new();
        if self.shifts.include_identity {
            cells.push(ShiftSpec::identity());
        }
        for kind_name in &self.shifts.kinds {
            let kind = parse_shift_kind(kind_name)?;
            match kind {
                ShiftKind::Identity => cells.push(ShiftSpec::identity()),
                ShiftKind::FeatureRandomize => {
                    for &p in &self.shifts.probabilities {
                        cells.push(ShiftSpec::feature_randomize(p, self.shifts.seed)?);
                    }
                }
                image_kind => {
                    for &l in &self.shifts.levels {
                        cells.push(ShiftSpec::image(image_kind, l, self.shifts.seed)?);
                    }
                }
            }
        }
        if cells.is_empty() {
            return Err(Error::Config("shift grid is empty".into()));
        }
        Ok(cells)
    }

    /// Hash of every semantically meaningful field (output dir and name are
    /// excluded). First 16 hex chars of SHA-256 over the canonical JSON.
    pub fn config_hash(&self) -> String {
        #[derive(Serialize)]
        struct Semantic<'a> {
            version: u32,
            dataset: &'a DatasetConfig,
            model: &'a ModelConfig,
            train: &'a TrainSection,
            methods: &'a Vec<MethodConfig>,
            shifts: &'a ShiftsConfig,
            eval: &'a EvalSection,
            diagnostics: &'a DiagnosticsSection,
            sweep_eps: &'a SweepEpsSection,
        }
        let view = Semantic {
            version: self.version,
            dataset: &self.dataset,
            model: &self.model,
            train: &self.train,
            methods: &self.methods,
            shifts: &self.shifts,
            eval: &self.eval,
            diagnostics: &self.diagnostics,
            sweep_eps: &self.sweep_eps,
        };
        let json = serde_json::to_string(&view).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        let digest = h.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Hash of the sections that determine training artifacts.
    pub fn train_hash(&self) -> String {
        #[derive(Serialize)]
        struct TrainView<'a> {
            dataset: &'a DatasetConfig,
            model: &'a ModelConfig,
            train: &'a TrainSection,
        }
        let json = serde_json::to_string(&TrainView {
            dataset: &self.dataset,
            model: &self.model,
            train: &self.train,
        })
        .expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        let digest = h.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Largest ensemble size any method asks for (0 if none).
    pub fn max_ensemble_members(&self) -> usize {
        self.methods
            .iter()
            .filter_map(|m| match m.to_spec().ok()?.base {
                MethodBase::Ensemble { members } => Some(members),
                MethodBase::Single => None,
            })
            .max()
            .unwrap_or(0)
    }
}

pub fn parse_shift_kind(name: &str) -> Result<ShiftKind> {
    Ok(match name {
        "identity" => ShiftKind::Identity,
        "gaussian-noise" => ShiftKind::GaussianNoise,
        "impulse-noise" => ShiftKind::ImpulseNoise,
        "gaussian-blur" => ShiftKind::GaussianBlur,
        "contrast-scale" => ShiftKind::ContrastScale,
        "pixelate" => ShiftKind::Pixelate,
        "feature-randomize" => ShiftKind::FeatureRandomize,
        other => {
            return Err(Error::Config(format!("unknown shift kind {other:?}")));
        }
    })
}

pub fn parse_bn_mode(name: &str) -> Result<BnMode> {
    Ok(match name {
        "ema" => BnMode::EvalEma,
        "batch" => BnMode::EvalBatch,
        "frozen" => BnMode::EvalFrozen,
        other => {
            return Err(Error::Config(format!(
                "unknown bn_mode {other:?} (ema | batch | frozen)"
            )))
        }
    })
}

impl MethodConfig {
    pub fn to_spec(&self) -> Result<MethodSpec> {
        let base = match self.base.as_str() {
            "single" => MethodBase::Single,
            "ensemble" => MethodBase::Ensemble {
                members: self.members.ok_or_else(|| {
                    Error::Config(format!("method {}: ensemble needs members", self.name))
                })?,
            },
            other => {
                return Err(Error::Config(format!(
                    "method {}: unknown base {other:?}",
                    self.name
                )))
            }
        };
        let bn_scope = match self.bn_scope.as_str() {
            "all" => BnScope::All,
            "last-layer-only" => BnScope::LastLayerOnly,
            other => {
                return Err(Error::Config(format!(
                    "method {}: unknown bn_scope {other:?}",
                    self.name
                )))
            }
        };
        let temperature = match self.temperature.as_str() {
            "none" => TemperaturePolicy::None,
            "fitted" => TemperaturePolicy::Fitted,
            other => {
                return Err(Error::Config(format!(
                    "method {}: unknown temperature {other:?}",
                    self.name
                )))
            }
        };
        let frozen_policy = match self.frozen_policy.as_str() {
            "batch-upstream" => FrozenCapturePolicy::BatchUpstream,
            "ema-upstream" => FrozenCapturePolicy::EmaUpstream,
            other => {
                return Err(Error::Config(format!(
                    "method {}: unknown frozen_policy {other:?}",
                    self.name
                )))
            }
        };
        let spec = MethodSpec {
            name: self.name.clone(),
            base,
            bn_mode: parse_bn_mode(&self.bn_mode)?,
            bn_scope,
            temperature,
            eps_override: self.eps_override,
            frozen_policy,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
version = 1
name = "t"

[dataset]
kind = "synthetic-tabular"
classes = 4
features = 8
train = 200
val = 50
test = 100

[model]
arch = "mlp"
hidden = [16]

[train]
epochs = 2
seeds = [1, 2]

[shifts]
kinds = ["feature-randomize"]
probabilities = [0.5, 0.95]

[output]
dir = "runs/t"
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.methods.len(), 2); // default vanilla-ema / vanilla-batch
        assert_eq!(cfg.eval.batch_sizes, vec![500]);
        let cells = cfg.shift_cells().unwrap();
        assert_eq!(cells.len(), 3); // identity + two probabilities
        let spec = cfg.model_spec(1).unwrap();
        assert_eq!(spec.input_shape, vec![8]);
        assert_eq!(spec.num_classes, 4);
    }

    #[test]
    fn unknown_field_is_a_config_error() {
        let text = MINIMAL.replace("name = \"t\"", "name = \"t\"\nbogus_field = 3");
        let out: std::result::Result<ExperimentConfig, _> = toml::from_str(&text);
        assert!(out.is_err());
    }

    #[test]
    fn hash_changes_on_semantic_fields_only() {
        let a: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        let mut b = a.clone();
        b.output.dir = PathBuf::from("elsewhere");
        b.name = "renamed".into();
        assert_eq!(a.config_hash(), b.config_hash());

        let mut c = a.clone();
        c.train.lr *= 2.0;
        assert_ne!(a.config_hash(), c.config_hash());

        let mut d = a.clone();
        d.shifts.probabilities.push(0.75);
        assert_ne!(a.config_hash(), d.config_hash());

        let mut e = a.clone();
        e.eval.num_bins = 30;
        assert_ne!(a.config_hash(), e.config_hash());
    }

    #[test]
    fn bad_enum_values_are_config_errors() {
        let mut cfg: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        cfg.model.norm = "spectral".into();
        assert!(matches!(cfg.norm_kind(), Err(Error::Config(_))));
        cfg.model.norm = "batch".into();
        cfg.train.optimizer = "lbfgs".into();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn ensemble_method_requires_members() {
        let m = MethodConfig {
            name: "e".into(),
            base: "ensemble".into(),
            members: None,
            bn_mode: "batch".into(),
            bn_scope: "all".into(),
            temperature: "none".into(),
            eps_override: None,
            frozen_policy: "batch-upstream".into(),
        };
        assert!(m.to_spec().is_err());
    }

    #[test]
    fn csv_dataset_validates_path() {
        let mut cfg: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        cfg.dataset.kind = DatasetKind::Csv;
        cfg.dataset.path = None;
        assert!(cfg.validate().is_err());
        cfg.dataset.path = Some(PathBuf::from("/nonexistent.csv"));
        assert!(cfg.validate().is_err());
    }
}
