//! Training loop and optimizers.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Checkpoint, Model, ModelSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::seeding::substream;
use crate::tensor::{Scalar, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdNesterov,
    Adam,
}

/// Multiplicative learning-rate drop: from `epoch` on, lr = base · factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrDrop {
    pub epoch: usize,
    pub factor: Scalar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: Scalar,
    /// Momentum coefficient for SGD+Nesterov (also Adam's β₁).
    pub momentum: Scalar,
    pub adam_eps: Scalar,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub lr_drops: Vec<LrDrop>,
    /// Shuffle-order seed.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adam,
            lr: 3e-3,
            momentum: 0.9,
            adam_eps: 1e-8,
            batch_size: 128,
            epochs: 30,
            lr_drops: Vec::new(),
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate {} must be > 0", self.lr)));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument(
                "batch size must be ≥ 2 (batch statistics need variance)".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument("momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> Scalar {
        let mut factor = 1.0;
        for drop in &self.lr_drops {
            if epoch >= drop.epoch {
                factor = drop.factor;
            }
        }
        self.lr * factor
    }
}

struct Optimizer {
    kind: OptimizerKind,
    momentum: Scalar,
    adam_eps: Scalar,
    m: Vec<Vec<Scalar>>,
    v: Vec<Vec<Scalar>>,
    t: u64,
}

impl Optimizer {
    fn new(model: &Model, cfg: &TrainConfig) -> Self {
        let sizes: Vec<usize> = (0..model.num_slots()).map(|i| model.slot_len(i)).collect();
        Optimizer {
            kind: cfg.optimizer,
            momentum: cfg.momentum,
            adam_eps: cfg.adam_eps,
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, model: &mut Model, grads: &[Vec<Scalar>], lr: Scalar) {
        self.t += 1;
        match self.kind {
            OptimizerKind::SgdNesterov => {
                let mu = self.momentum;
                for (slot, g) in grads.iter().enumerate() {
                    let vel = &mut self.m[slot];
                    let w = model.slot_mut(slot);
                    for i in 0..g.len() {
                        vel[i] = mu * vel[i] + g[i];
                        w[i] -= lr * (g[i] + mu * vel[i]);
                    }
                }
            }
            OptimizerKind::Adam => {
                let b1 = self.momentum;
                let b2: Scalar = 0.999;
                let bc1 = 1.0 - b1.powi(self.t as i32);
                let bc2 = 1.0 - b2.powi(self.t as i32);
                for (slot, g) in grads.iter().enumerate() {
                    let m = &mut self.m[slot];
                    let v = &mut self.v[slot];
                    let w = model.slot_mut(slot);
                    for i in 0..g.len() {
                        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        w[i] -= lr * mhat / (vhat.sqrt() + self.adam_eps);
                    }
                }
            }
        }
    }
}

/// Train a model from scratch. Deterministic given the spec and config
/// seeds; returns a checkpoint carrying final weights, all normalization
/// state (EMA included), and the per-epoch training losses.
pub fn train(spec: &ModelSpec, cfg: &TrainConfig, data: &Dataset) -> Result<Checkpoint> {
    cfg.validate()?;
    spec.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training dataset is empty".into()));
    }
    if data.example_shape() != spec.input_shape.as_slice() {
        return Err(Error::ShapeMismatch(format!(
            "dataset example shape {:?} does not match spec {:?}",
            data.example_shape(),
            spec.input_shape
        )));
    }
    if let Some(&bad) = data.labels.iter().find(|&&y| y >= spec.num_classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range 0..{}",
            spec.num_classes
        )));
    }

    let mut model = Model::init(spec.clone())?;
    model.set_train_mode();
    let mut opt = Optimizer::new(&model, cfg);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    let n = data.len();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut substream(cfg.seed, &format!("shuffle-{epoch}")));

        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue; // a singleton remainder has no batch variance
            }
            let (x, y) = data.gather(chunk)?;
            let mut tape = Tape::new();
            let fwd = model.forward_train(&mut tape, &x).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch}: {m}")),
                other => other,
            })?;
            let logp = tape.log_softmax(fwd.logits)?;
            let loss = tape.nll_mean(logp, &y)?;
            let loss_val = tape.value(loss).item()?;
            if !loss_val.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss became {loss_val} at epoch {epoch} (lr {lr}); \
                     lower the learning rate or check the data"
                )));
            }
            tape.backward(loss)?;
            let grads = model.slot_grads(&tape, &fwd.bindings);
            opt.step(&mut model, &grads, lr);
            loss_sum += loss_val * chunk.len() as Scalar;
            seen += chunk.len();
        }
        epoch_losses.push(if seen > 0 { loss_sum / seen as Scalar } else { 0.0 });
    }

    model.set_prediction_mode(crate::norm::BnMode::EvalEma)?;
    Ok(Checkpoint::from_model(&model, cfg, epoch_losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::separable_blobs;
    use crate::metrics::accuracy;
    use crate::model::Architecture;
    use crate::norm::{BnMode, NormKind};

    fn blob_spec(seed: u64) -> ModelSpec {
        ModelSpec {
            arch: Architecture::Mlp { hidden: vec![16] },
            norm: NormKind::batch(),
            input_shape: vec![4],
            num_classes: 2,
            eps: 1e-3,
            momentum: 0.99,
            seed,
        }
    }

    #[test]
    fn train_reaches_99_percent_on_separable_blobs() {
        let data = separable_blobs(400, 4, 3).unwrap();
        let cfg = TrainConfig { epochs: 15, batch_size: 64, ..Default::default() };
        let ckpt = train(&blob_spec(1), &cfg, &data).unwrap();
        let mut model = ckpt.to_model().unwrap();
        model.set_prediction_mode(BnMode::EvalEma).unwrap();
        let probs = model.predict(&data.features, None).unwrap();
        let acc = accuracy(&probs, &data.labels).unwrap();
        assert!(acc >= 0.99, "train accuracy {acc}");
        // training loss decreased over the run
        let losses = &ckpt.epoch_losses;
        assert!(losses.last().unwrap() < losses.first().unwrap());
    }

    #[test]
    fn identical_seeds_give_bit_identical_checkpoints() {
        let data = separable_blobs(200, 4, 3).unwrap();
        let cfg = TrainConfig { epochs: 3, batch_size: 32, ..Default::default() };
        let a = train(&blob_spec(7), &cfg, &data).unwrap();
        let b = train(&blob_spec(7), &cfg, &data).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let data = separable_blobs(100, 4, 3).unwrap();
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        let ckpt = train(&blob_spec(5), &cfg, &data).unwrap();
        let init = Model::init(blob_spec(5)).unwrap();
        let trained = ckpt.to_model().unwrap();
        assert_eq!(trained.params(), init.params());
        for st in trained.norm_states() {
            assert!(st.ema_mean.iter().all(|&v| v == 0.0));
            assert!(st.ema_var.iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn label_out_of_range_is_an_error() {
        let mut data = separable_blobs(50, 4, 3).unwrap();
        data.labels[0] = 1;
        let spec = ModelSpec { num_classes: 2, ..blob_spec(1) };
        data.labels[0] = 5;
        data.num_classes = 6; // dataset says 6 classes, spec says 2
        let cfg = TrainConfig { epochs: 1, ..Default::default() };
        assert!(matches!(train(&spec, &cfg, &data), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn diverging_training_reports_non_finite() {
        // Features near the f64 ceiling overflow the first matmul; the loss
        // check must turn that into a hard error with context, not garbage.
        use crate::data::{Dataset, SplitMeta};
        use crate::tensor::Tensor;
        let n = 32;
        let features = Tensor::new(&[n, 4], vec![1e300; n * 4]).unwrap();
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let data = Dataset::new(features, labels, 2, SplitMeta::unshifted("huge")).unwrap();
        let cfg = TrainConfig { epochs: 1, batch_size: 32, ..Default::default() };
        match train(&blob_spec(1), &cfg, &data) {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("epoch")),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn lr_schedule_applies_drops() {
        let cfg = TrainConfig {
            lr: 1.0,
            lr_drops: vec![LrDrop { epoch: 2, factor: 0.1 }, LrDrop { epoch: 4, factor: 0.01 }],
            ..Default::default()
        };
        assert_eq!(cfg.lr_at(0), 1.0);
        assert_eq!(cfg.lr_at(2), 0.1);
        assert_eq!(cfg.lr_at(3), 0.1);
        assert_eq!(cfg.lr_at(5), 0.01);
    }

    #[test]
    fn sgd_nesterov_also_trains() {
        let data = separable_blobs(300, 4, 3).unwrap();
        let cfg = TrainConfig {
            optimizer: OptimizerKind::SgdNesterov,
            lr: 0.05,
            epochs: 20,
            batch_size: 64,
            ..Default::default()
        };
        let ckpt = train(&blob_spec(2), &cfg, &data).unwrap();
        let mut model = ckpt.to_model().unwrap();
        model.set_prediction_mode(BnMode::EvalEma).unwrap();
        let probs = model.predict(&data.features, None).unwrap();
        assert!(accuracy(&probs, &data.labels).unwrap() >= 0.99);
    }
}
