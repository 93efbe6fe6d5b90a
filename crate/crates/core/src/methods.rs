//! Method registry: a named, evaluable combination of base model(s),
//! normalization statistics mode, temperature scaling, and ε override.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{
    self, calibration_bins, softmax_rows_with_temperature, CalibrationBins, FittedTemperature,
};
use crate::model::{mean_probabilities, BnScope, FrozenCapturePolicy, Model};
use crate::norm::BnMode;
use crate::seeding::substream;
use crate::tensor::{Scalar, Tensor};

/// Confidence-histogram resolution carried on every record.
pub const CONFIDENCE_HIST_BINS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum MethodBase {
    Single,
    Ensemble { members: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemperaturePolicy {
    None,
    /// Fitted per member on unshifted validation data, under the method's
    /// own normalization mode.
    Fitted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub name: String,
    pub base: MethodBase,
    pub bn_mode: BnMode,
    #[serde(default = "default_scope")]
    pub bn_scope: BnScope,
    #[serde(default = "default_temperature")]
    pub temperature: TemperaturePolicy,
    #[serde(default)]
    pub eps_override: Option<Scalar>,
    /// Reference-batch capture policy, used when `bn_mode` is EvalFrozen.
    #[serde(default = "default_frozen_policy")]
    pub frozen_policy: FrozenCapturePolicy,
}

fn default_scope() -> BnScope {
    BnScope::All
}

fn default_temperature() -> TemperaturePolicy {
    TemperaturePolicy::None
}

fn default_frozen_policy() -> FrozenCapturePolicy {
    FrozenCapturePolicy::BatchUpstream
}

impl MethodSpec {
    pub fn single(name: &str, mode: BnMode) -> Self {
        MethodSpec {
            name: name.to_string(),
            base: MethodBase::Single,
            bn_mode: mode,
            bn_scope: BnScope::All,
            temperature: TemperaturePolicy::None,
            eps_override: None,
            frozen_policy: FrozenCapturePolicy::BatchUpstream,
        }
    }

    pub fn ensemble(name: &str, members: usize, mode: BnMode) -> Self {
        MethodSpec {
            base: MethodBase::Ensemble { members },
            ..MethodSpec::single(name, mode)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bn_mode == BnMode::Train {
            return Err(Error::InvalidArgument("methods cannot evaluate in Train mode".into()));
        }
        if let MethodBase::Ensemble { members } = self.base {
            if members == 0 {
                return Err(Error::InvalidArgument("ensemble needs ≥ 1 member".into()));
            }
        }
        if let Some(eps) = self.eps_override {
            if !(eps > 0.0) {
                return Err(Error::InvalidArgument(format!("ε override {eps} must be > 0")));
            }
        }
        Ok(())
    }

    pub fn expected_models(&self) -> usize {
        match self.base {
            MethodBase::Single => 1,
            MethodBase::Ensemble { members } => members,
        }
    }
}

/// One (method × shift × severity × batch-size) evaluation result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub method: String,
    pub shift_kind: String,
    pub severity: f64,
    pub batch_size: usize,
    /// ε actually used at prediction time.
    pub eps: Scalar,
    pub temperature: Scalar,
    pub accuracy: Scalar,
    pub ece: Scalar,
    pub brier: Scalar,
    pub brier_per_class: Scalar,
    pub nll: Scalar,
    pub confidence_hist: CalibrationBins,
    pub seed: u64,
    pub n_examples: usize,
    pub n_batches: usize,
    pub last_batch_size: usize,
    pub num_bins: usize,
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    /// ECE bin count.
    pub num_bins: usize,
    /// Bookkeeping seed recorded on the output (the model-seed identity of
    /// this grid cell).
    pub seed: u64,
    /// Shuffle the split order before batching (affects batch composition
    /// under EvalBatch, never the metrics' example set).
    pub shuffle: Option<u64>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { num_bins: 10, seed: 0, shuffle: None }
    }
}

/// Evaluate a method on one split, batching by `t` (final partial batch
/// included; its statistics use its actual size). Metrics are computed once
/// over the concatenated per-example predictions.
pub fn evaluate_method(
    method: &MethodSpec,
    models: &mut [Model],
    split: &Dataset,
    validation: Option<&Dataset>,
    t: usize,
    opts: &EvalOptions,
) -> Result<EvalRecord> {
    method.validate()?;
    if t < 1 {
        return Err(Error::InvalidArgument("batch size must be ≥ 1".into()));
    }
    if split.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty split".into()));
    }
    if models.len() != method.expected_models() {
        return Err(Error::MissingArtifact(format!(
            "method {} needs {} model(s), got {}",
            method.name,
            method.expected_models(),
            models.len()
        )));
    }

    let order: Vec<usize> = match opts.shuffle {
        None => (0..split.len()).collect(),
        Some(seed) => {
            use rand::seq::SliceRandom;
            let mut idx: Vec<usize> = (0..split.len()).collect();
            idx.shuffle(&mut substream(seed, "eval-shuffle"));
            idx
        }
    };

    // Frozen statistics come from the first batch of this split.
    if method.bn_mode == BnMode::EvalFrozen {
        let first: Vec<usize> = order[..t.min(order.len())].to_vec();
        let (x, _) = split.gather(&first)?;
        for m in models.iter_mut() {
            m.freeze_stats(&x, method.frozen_policy)?;
        }
    }
    for m in models.iter_mut() {
        m.set_prediction_mode_scoped(method.bn_mode, method.bn_scope)?;
    }

    // Temperature is fitted per member on unshifted validation data.
    let temperatures: Vec<Scalar> = match method.temperature {
        TemperaturePolicy::None => vec![1.0; models.len()],
        TemperaturePolicy::Fitted => {
            let val = validation.ok_or_else(|| {
                Error::MissingArtifact(format!(
                    "method {} fits a temperature but no validation set was provided",
                    method.name
                ))
            })?;
            let mut ts = Vec::with_capacity(models.len());
            for m in models.iter() {
                let mut logits_parts = Vec::new();
                for range in val.batch_ranges(t) {
                    let idx: Vec<usize> = range.collect();
                    let (x, _) = val.gather(&idx)?;
                    logits_parts.push(m.logits(&x, method.eps_override)?);
                }
                let refs: Vec<&Tensor> = logits_parts.iter().collect();
                let logits = Tensor::concat_rows(&refs)?;
                let FittedTemperature { temperature, .. } =
                    metrics::fit_temperature(&logits, &val.labels)?;
                ts.push(temperature);
            }
            ts
        }
    };

    let mut prob_parts: Vec<Tensor> = Vec::new();
    let mut labels: Vec<usize> = Vec::with_capacity(split.len());
    let mut batch_sizes = Vec::new();
    for chunk in order.chunks(t) {
        let (x, y) = split.gather(chunk)?;
        let mut member_probs = Vec::with_capacity(models.len());
        for (m, &temp) in models.iter().zip(&temperatures) {
            let logits = m.logits(&x, method.eps_override)?;
            member_probs.push(softmax_rows_with_temperature(&logits, temp)?);
        }
        prob_parts.push(mean_probabilities(&member_probs)?);
        labels.extend_from_slice(&y);
        batch_sizes.push(chunk.len());
    }
    let refs: Vec<&Tensor> = prob_parts.iter().collect();
    let probs = Tensor::concat_rows(&refs)?;

    let eps_used = method
        .eps_override
        .unwrap_or_else(|| models[0].spec().eps);
    Ok(EvalRecord {
        method: method.name.clone(),
        shift_kind: split.meta.shift_kind.clone(),
        severity: split.meta.severity,
        batch_size: t,
        eps: eps_used,
        temperature: mean(&temperatures),
        accuracy: metrics::accuracy(&probs, &labels)?,
        ece: metrics::ece(&probs, &labels, opts.num_bins)?,
        brier: metrics::brier(&probs, &labels)?,
        brier_per_class: metrics::brier_per_class(&probs, &labels)?,
        nll: metrics::nll(&probs, &labels)?,
        confidence_hist: calibration_bins(&probs, &labels, CONFIDENCE_HIST_BINS)?,
        seed: opts.seed,
        n_examples: labels.len(),
        n_batches: batch_sizes.len(),
        last_batch_size: *batch_sizes.last().expect("≥ 1 batch"),
        num_bins: opts.num_bins,
    })
}

fn mean(xs: &[Scalar]) -> Scalar {
    xs.iter().sum::<Scalar>() / xs.len() as Scalar
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{tabular_split, TabularSpec};
    use crate::model::{train, Architecture, ModelSpec, TrainConfig};
    use crate::norm::NormKind;

    fn trained_pair() -> (Vec<Model>, Dataset, Dataset) {
        let dspec = TabularSpec { classes: 3, features: 8, ..Default::default() };
        let train_data = tabular_split(&dspec, 600, "train").unwrap();
        let test = tabular_split(&dspec, 120, "test").unwrap();
        let val = tabular_split(&dspec, 120, "val").unwrap();
        let mspec = ModelSpec {
            arch: Architecture::Mlp { hidden: vec![16] },
            norm: NormKind::batch(),
            input_shape: vec![8],
            num_classes: 3,
            eps: 1e-3,
            momentum: 0.99,
            seed: 2,
        };
        let cfg = TrainConfig { epochs: 8, batch_size: 64, ..Default::default() };
        let ckpt = train(&mspec, &cfg, &train_data).unwrap();
        (vec![ckpt.to_model().unwrap()], test, val)
    }

    #[test]
    fn eval_ema_record_invariant_to_batch_size() {
        let (mut models, test, _) = trained_pair();
        let m = MethodSpec::single("vanilla-ema", BnMode::EvalEma);
        let a =
            evaluate_method(&m, &mut models, &test, None, 7, &EvalOptions::default()).unwrap();
        let b =
            evaluate_method(&m, &mut models, &test, None, 120, &EvalOptions::default()).unwrap();
        assert_eq!(a.accuracy, b.accuracy);
        assert_eq!(a.brier, b.brier);
        assert_eq!(a.ece, b.ece);
        assert_eq!(a.nll, b.nll);
        assert_eq!(a.n_batches, 18);
        assert_eq!(a.last_batch_size, 1);
    }

    #[test]
    fn eval_batch_full_split_equals_single_full_batch() {
        let (mut models, test, _) = trained_pair();
        let m = MethodSpec::single("vanilla-batch", BnMode::EvalBatch);
        let full =
            evaluate_method(&m, &mut models, &test, None, test.len(), &EvalOptions::default())
                .unwrap();
        assert_eq!(full.n_batches, 1);
        // direct library-call equivalence
        models[0].set_prediction_mode(BnMode::EvalBatch).unwrap();
        let probs = models[0].predict(&test.features, None).unwrap();
        let want = crate::metrics::brier(&probs, &test.labels).unwrap();
        assert_eq!(full.brier, want);
    }

    #[test]
    fn aggregation_equals_recomputation_from_concatenated_predictions() {
        let (mut models, test, _) = trained_pair();
        let m = MethodSpec::single("vanilla-batch", BnMode::EvalBatch);
        let t = 32;
        let rec =
            evaluate_method(&m, &mut models, &test, None, t, &EvalOptions::default()).unwrap();
        // recompute by hand from per-batch predictions
        models[0].set_prediction_mode(BnMode::EvalBatch).unwrap();
        let mut parts = Vec::new();
        for range in test.batch_ranges(t) {
            let idx: Vec<usize> = range.collect();
            let (x, _) = test.gather(&idx).unwrap();
            parts.push(models[0].predict(&x, None).unwrap());
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        let probs = Tensor::concat_rows(&refs).unwrap();
        assert_eq!(rec.accuracy, crate::metrics::accuracy(&probs, &test.labels).unwrap());
        assert_eq!(rec.brier, crate::metrics::brier(&probs, &test.labels).unwrap());
        assert_eq!(rec.ece, crate::metrics::ece(&probs, &test.labels, 10).unwrap());
    }

    #[test]
    fn missing_models_and_bad_batch_size_error() {
        let (_, test, _) = trained_pair();
        let m = MethodSpec::ensemble("ens", 3, BnMode::EvalEma);
        let mut none: Vec<Model> = Vec::new();
        assert!(matches!(
            evaluate_method(&m, &mut none, &test, None, 10, &EvalOptions::default()),
            Err(Error::MissingArtifact(_))
        ));
        let (mut one, _, _) = trained_pair();
        let ms = MethodSpec::single("s", BnMode::EvalEma);
        assert!(evaluate_method(&ms, &mut one, &test, None, 0, &EvalOptions::default()).is_err());
    }

    #[test]
    fn fitted_temperature_requires_validation_and_keeps_accuracy() {
        let (mut models, test, val) = trained_pair();
        let mut m = MethodSpec::single("temp-ema", BnMode::EvalEma);
        m.temperature = TemperaturePolicy::Fitted;
        assert!(matches!(
            evaluate_method(&m, &mut models, &test, None, 60, &EvalOptions::default()),
            Err(Error::MissingArtifact(_))
        ));
        let with_t =
            evaluate_method(&m, &mut models, &test, Some(&val), 60, &EvalOptions::default())
                .unwrap();
        let plain = evaluate_method(
            &MethodSpec::single("ema", BnMode::EvalEma),
            &mut models,
            &test,
            None,
            60,
            &EvalOptions::default(),
        )
        .unwrap();
        // temperature scaling never changes accuracy
        assert_eq!(with_t.accuracy, plain.accuracy);
        assert!(with_t.temperature > 0.0);
    }

    #[test]
    fn ensemble_members_contribute_independently() {
        let dspec = TabularSpec { classes: 3, features: 8, ..Default::default() };
        let train_data = tabular_split(&dspec, 400, "train").unwrap();
        let test = tabular_split(&dspec, 60, "test").unwrap();
        let mk = |seed| {
            let mspec = ModelSpec {
                arch: Architecture::Mlp { hidden: vec![16] },
                norm: NormKind::batch(),
                input_shape: vec![8],
                num_classes: 3,
                eps: 1e-3,
                momentum: 0.99,
                seed,
            };
            let cfg = TrainConfig { epochs: 4, batch_size: 64, seed, ..Default::default() };
            train(&mspec, &cfg, &train_data).unwrap().to_model().unwrap()
        };
        let mut members = vec![mk(1), mk(2), mk(3)];
        for m in &mut members {
            m.set_prediction_mode(BnMode::EvalBatch).unwrap();
        }
        let ens = crate::model::ensemble_predict(&members, &test.features, None).unwrap();
        // mean of per-member predictions  — each member's statistics are its own
        let per: Vec<Tensor> =
            members.iter().map(|m| m.predict(&test.features, None).unwrap()).collect();
        let want = mean_probabilities(&per).unwrap();
        assert_eq!(ens, want);

        // perturbing one member changes only its contribution
        let members2 = vec![mk(1), mk(2), mk(99)];
        let mut members2 = members2;
        for m in &mut members2 {
            m.set_prediction_mode(BnMode::EvalBatch).unwrap();
        }
        let ens2 = crate::model::ensemble_predict(&members2, &test.features, None).unwrap();
        let per2: Vec<Tensor> =
            members2.iter().map(|m| m.predict(&test.features, None).unwrap()).collect();
        assert_eq!(per[0], per2[0]);
        assert_eq!(per[1], per2[1]);
        assert_ne!(per[2], per2[2]);
        assert_ne!(ens, ens2);
    }

    #[test]
    fn ensemble_nll_never_exceeds_mean_member_nll() {
        // post-softmax averaging under log loss (Jensen)
        let dspec = TabularSpec { classes: 3, features: 8, ..Default::default() };
        let train_data = tabular_split(&dspec, 400, "train").unwrap();
        let test = tabular_split(&dspec, 100, "test").unwrap();
        let mk = |seed| {
            let mspec = ModelSpec {
                arch: Architecture::Mlp { hidden: vec![16] },
                norm: NormKind::batch(),
                input_shape: vec![8],
                num_classes: 3,
                eps: 1e-3,
                momentum: 0.99,
                seed,
            };
            let cfg = TrainConfig { epochs: 5, batch_size: 64, seed, ..Default::default() };
            let mut m = train(&mspec, &cfg, &train_data).unwrap().to_model().unwrap();
            m.set_prediction_mode(BnMode::EvalEma).unwrap();
            m
        };
        let members = vec![mk(1), mk(2), mk(3), mk(4)];
        let per: Vec<Tensor> =
            members.iter().map(|m| m.predict(&test.features, None).unwrap()).collect();
        let member_nll: Vec<f64> =
            per.iter().map(|p| crate::metrics::nll(p, &test.labels).unwrap()).collect();
        let ens = mean_probabilities(&per).unwrap();
        let ens_nll = crate::metrics::nll(&ens, &test.labels).unwrap();
        let mean_nll = member_nll.iter().sum::<f64>() / member_nll.len() as f64;
        assert!(ens_nll <= mean_nll + 1e-9, "{ens_nll} vs {mean_nll}");
    }
}
