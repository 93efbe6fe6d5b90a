//! Normalization layers and statistic-selection modes.
//!
//! Batch norm is the only kind with state that outlives a batch: an EMA of
//! batch statistics accumulated during training, plus optionally a frozen
//! copy captured from a reference batch. Which statistics a forward pass
//! uses is the `BnMode` of the layer:
//!
//! * `Train`      — statistics of the current batch; EMA updated.
//! * `EvalEma`    — the training EMA (standard inference).
//! * `EvalBatch`  — statistics recomputed on each prediction batch.
//! * `EvalFrozen` — statistics captured once via `freeze_stats` and reused.
//!
//! Instance, layer, and group norm have no train/eval asymmetry; their
//! statistics are always per-sample and never carried across batches.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{group_stats, Grouping, Scalar, Tape, Tensor, TensorId};

/// EMA momentum used when a config does not say otherwise.
pub const DEFAULT_MOMENTUM: Scalar = 0.99;
/// Variance-floor epsilon used when a config does not say otherwise.
pub const DEFAULT_EPS: Scalar = 1e-3;
/// Epsilon guarding the fan-in variance in weight standardization.
pub const WEIGHT_STD_EPS: Scalar = 1e-10;

/// Statistics source for batch normalization forward passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BnMode {
    Train,
    EvalEma,
    EvalBatch,
    EvalFrozen,
}

/// Normalization family of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormFamily {
    Batch,
    Instance,
    Layer,
    Group { groups: usize },
    None,
}

impl NormFamily {
    /// Statistic pooling axes for this family, given the channel count.
    /// `None` for the no-normalization family.
    pub fn grouping(&self, channels: usize) -> Option<Grouping> {
        match *self {
            NormFamily::Batch => Some(Grouping::PerChannel),
            NormFamily::Instance => Some(Grouping::PerSample { groups: channels }),
            NormFamily::Layer => Some(Grouping::PerSample { groups: 1 }),
            NormFamily::Group { groups } => Some(Grouping::PerSample { groups }),
            NormFamily::None => None,
        }
    }
}

/// Normalization family plus the weight-standardization flag that rides
/// along with group norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormKind {
    pub family: NormFamily,
    #[serde(default)]
    pub weight_std: bool,
}

impl NormKind {
    pub fn batch() -> Self {
        NormKind { family: NormFamily::Batch, weight_std: false }
    }

    pub fn instance() -> Self {
        NormKind { family: NormFamily::Instance, weight_std: false }
    }

    pub fn layer() -> Self {
        NormKind { family: NormFamily::Layer, weight_std: false }
    }

    /// Group norm defaults to weight standardization on.
    pub fn group(groups: usize) -> Self {
        NormKind { family: NormFamily::Group { groups }, weight_std: true }
    }

    pub fn none() -> Self {
        NormKind { family: NormFamily::None, weight_std: false }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.weight_std && !matches!(self.family, NormFamily::Group { .. }) {
            return Err(Error::InvalidArgument(
                "weight standardization is only valid with group norm".into(),
            ));
        }
        if let NormFamily::Group { groups } = self.family {
            if groups == 0 || channels % groups != 0 {
                return Err(Error::InvalidArgument(format!(
                    "{channels} channels not divisible into {groups} groups"
                )));
            }
        }
        Ok(())
    }
}

/// Per-layer normalization parameters and running statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormState {
    pub gamma: Vec<Scalar>,
    pub beta: Vec<Scalar>,
    pub ema_mean: Vec<Scalar>,
    pub ema_var: Vec<Scalar>,
    pub eps: Scalar,
    pub momentum: Scalar,
    pub mode: BnMode,
    pub frozen_mean: Option<Vec<Scalar>>,
    pub frozen_var: Option<Vec<Scalar>>,
}

impl NormState {
    /// Fresh state: gamma = 1, beta = 0, EMA at (0, 1).
    pub fn new(channels: usize, eps: Scalar, momentum: Scalar) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!("epsilon must be > 0, got {eps}")));
        }
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "momentum must lie in (0, 1), got {momentum}"
            )));
        }
        Ok(NormState {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            ema_mean: vec![0.0; channels],
            ema_var: vec![1.0; channels],
            eps,
            momentum,
            mode: BnMode::Train,
            frozen_mean: None,
            frozen_var: None,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Switch the statistics source. Never touches gamma/beta. Errors if
    /// frozen statistics are requested but none are stored.
    pub fn set_mode(&mut self, mode: BnMode) -> Result<()> {
        if mode == BnMode::EvalFrozen && (self.frozen_mean.is_none() || self.frozen_var.is_none())
        {
            return Err(Error::MissingArtifact(
                "EvalFrozen requested with no frozen statistics stored; call freeze_stats first"
                    .into(),
            ));
        }
        self.mode = mode;
        Ok(())
    }

    /// μ ← m·μ + (1−m)·μ_batch, likewise for the (biased) variance.
    pub fn update_ema(&mut self, mean: &[Scalar], var: &[Scalar]) {
        let m = self.momentum;
        for (e, &b) in self.ema_mean.iter_mut().zip(mean) {
            *e = m * *e + (1.0 - m) * b;
        }
        for (e, &b) in self.ema_var.iter_mut().zip(var) {
            *e = m * *e + (1.0 - m) * b;
        }
    }

    pub fn set_frozen(&mut self, mean: Vec<Scalar>, var: Vec<Scalar>) -> Result<()> {
        if mean.len() != self.channels() || var.len() != self.channels() {
            return Err(Error::ShapeMismatch(format!(
                "frozen statistics length {} for {} channels",
                mean.len(),
                self.channels()
            )));
        }
        self.frozen_mean = Some(mean);
        self.frozen_var = Some(var);
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        if self.beta.len() != c || self.ema_mean.len() != c || self.ema_var.len() != c {
            return Err(Error::ShapeMismatch("NormState field lengths disagree".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidArgument("NormState epsilon must be > 0".into()));
        }
        if self.ema_var.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument("negative EMA variance".into()));
        }
        if let Some(fv) = &self.frozen_var {
            if fv.iter().any(|&v| v < 0.0) {
                return Err(Error::InvalidArgument("negative frozen variance".into()));
            }
        }
        Ok(())
    }
}

/// Per-channel mean and biased variance (divisor N·H·W) pooled over batch
/// and spatial dims.
pub fn batch_stats(x: &Tensor) -> Result<(Vec<Scalar>, Vec<Scalar>)> {
    group_stats(x, Grouping::PerChannel)
}

/// Result of a batch-norm layer forward.
pub struct NormForward {
    /// Post-affine layer output (γ·x̂ + β).
    pub out: TensorId,
    /// Batch statistics of the layer input, when they were computed.
    pub input_stats: Option<(Vec<Scalar>, Vec<Scalar>)>,
}

/// Batch normalization forward. The statistics source follows `state.mode`;
/// in `Train` mode the EMA is updated and gradients flow through the batch
/// statistics. `eps_override` substitutes ε for this pass only, leaving the
/// stored value untouched.
///
/// `want_input_stats` forces computing the input's batch statistics even in
/// fixed-statistics modes (used by `freeze_stats` capture).
pub fn bn_forward(
    tape: &mut Tape,
    x: TensorId,
    gamma: TensorId,
    beta: TensorId,
    state: &mut NormState,
    eps_override: Option<Scalar>,
    want_input_stats: bool,
) -> Result<NormForward> {
    if state.mode != BnMode::Train {
        return bn_forward_eval(tape, x, gamma, beta, state, eps_override, want_input_stats);
    }
    let c = state.channels();
    let (_, xc, _, _) = tape.value(x).dims4()?;
    if xc != c {
        return Err(Error::ShapeMismatch(format!("input has {xc} channels, state has {c}")));
    }
    let eps = eps_override.unwrap_or(state.eps);
    let (mean, var) = batch_stats(tape.value(x))?;
    if mean.iter().chain(var.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(
            "batch statistics overflowed; activations are diverging".into(),
        ));
    }
    state.update_ema(&mean, &var);
    let xhat = tape.normalize(x, Grouping::PerChannel, eps)?;
    let scaled = tape.mul_channel(xhat, gamma)?;
    let out = tape.add_channel(scaled, beta)?;
    Ok(NormForward { out, input_stats: Some((mean, var)) })
}

/// Read-only batch-norm forward for the Eval* modes; safe to run
/// concurrently over a shared `NormState`.
pub fn bn_forward_eval(
    tape: &mut Tape,
    x: TensorId,
    gamma: TensorId,
    beta: TensorId,
    state: &NormState,
    eps_override: Option<Scalar>,
    want_input_stats: bool,
) -> Result<NormForward> {
    let c = state.channels();
    let (_, xc, _, _) = tape.value(x).dims4()?;
    if xc != c {
        return Err(Error::ShapeMismatch(format!("input has {xc} channels, state has {c}")));
    }
    let eps = eps_override.unwrap_or(state.eps);
    let mut input_stats = None;
    if want_input_stats {
        input_stats = Some(batch_stats(tape.value(x))?);
    }
    let xhat = match state.mode {
        BnMode::Train => {
            return Err(Error::InvalidArgument(
                "bn_forward_eval called in Train mode".into(),
            ))
        }
        BnMode::EvalBatch => tape.normalize(x, Grouping::PerChannel, eps)?,
        BnMode::EvalEma => tape.normalize_fixed(x, &state.ema_mean, &state.ema_var, eps)?,
        BnMode::EvalFrozen => {
            let (mean, var) = match (&state.frozen_mean, &state.frozen_var) {
                (Some(m), Some(v)) => (m.clone(), v.clone()),
                _ => {
                    return Err(Error::MissingArtifact(
                        "EvalFrozen forward with no frozen statistics stored".into(),
                    ))
                }
            };
            tape.normalize_fixed(x, &mean, &var, eps)?
        }
    };
    let scaled = tape.mul_channel(xhat, gamma)?;
    let out = tape.add_channel(scaled, beta)?;
    Ok(NormForward { out, input_stats })
}

/// Instance / layer / group normalization forward. Statistics are computed
/// per sample on every call; there is nothing to carry across batches.
pub fn alt_norm_forward(
    tape: &mut Tape,
    x: TensorId,
    family: NormFamily,
    gamma: TensorId,
    beta: TensorId,
    eps: Scalar,
) -> Result<TensorId> {
    if matches!(family, NormFamily::Batch | NormFamily::None) {
        return Err(Error::InvalidArgument(
            "alt_norm_forward handles instance/layer/group kinds only".into(),
        ));
    }
    let (_, c, _, _) = tape.value(x).dims4()?;
    let grouping = family.grouping(c).expect("non-None family has a grouping");
    let xhat = tape.normalize(x, grouping, eps)?;
    let scaled = tape.mul_channel(xhat, gamma)?;
    tape.add_channel(scaled, beta)
}

/// Standardize each output filter of a weight tensor to zero mean and unit
/// (biased) variance over its fan-in. Applied to the effective weight every
/// forward pass; gradients flow through.
pub fn weight_standardize(tape: &mut Tape, w: TensorId) -> Result<TensorId> {
    let shape = tape.value(w).shape().to_vec();
    let f = shape[0];
    let fan_in: usize = shape[1..].iter().product();
    if fan_in < 2 {
        return Err(Error::InvalidArgument(format!(
            "weight standardization needs fan-in ≥ 2, got {fan_in}"
        )));
    }
    let flat = tape.reshape(w, &[f, fan_in])?;
    let std = tape.normalize(flat, Grouping::PerSample { groups: 1 }, WEIGHT_STD_EPS)?;
    tape.reshape(std, &shape)
}

/// Weight standardization for `[in, out]` linear weights: each output
/// column standardized over its fan-in rows.
pub fn weight_standardize_columns(tape: &mut Tape, w: TensorId) -> Result<TensorId> {
    let shape = tape.value(w).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch("column standardization needs rank 2".into()));
    }
    if shape[0] < 2 {
        return Err(Error::InvalidArgument(format!(
            "weight standardization needs fan-in ≥ 2, got {}",
            shape[0]
        )));
    }
    // viewed as N×C with N = fan-in rows, per-channel stats are per-column
    tape.normalize(w, Grouping::PerChannel, WEIGHT_STD_EPS)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones_gamma_zeros_beta(tape: &mut Tape, c: usize) -> (TensorId, TensorId) {
        let g = tape.leaf(Tensor::full(&[c], 1.0));
        let b = tape.leaf(Tensor::zeros(&[c]));
        (g, b)
    }

    fn seq_tensor(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let mut s = 0.7_f64;
        let data: Vec<Scalar> = (0..n)
            .map(|_| {
                s = (s * 1103.0 + 0.417).fract();
                s * 6.0 - 3.0
            })
            .collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn bn_train_constant_batch_is_zero_output() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[4, 3], 5.5));
        let (g, b) = ones_gamma_zeros_beta(&mut tape, 3);
        let mut state = NormState::new(3, 1e-3, 0.99).unwrap();
        let out = bn_forward(&mut tape, x, g, b, &mut state, None, false).unwrap();
        assert!(tape.value(out.out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bn_two_point_channel_tiny_eps() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2, 1], vec![0.0, 2.0]).unwrap());
        let (g, b) = ones_gamma_zeros_beta(&mut tape, 1);
        let mut state = NormState::new(1, 1e-12, 0.99).unwrap();
        state.set_mode(BnMode::EvalBatch).unwrap();
        let out = bn_forward(&mut tape, x, g, b, &mut state, None, false).unwrap();
        let d = tape.value(out.out).data();
        assert!((d[0] + 1.0).abs() < 1e-4);
        assert!((d[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn eval_batch_output_moments_identity() {
        // gamma=1, beta=0: per-channel mean ≈ 0, variance = σ²/(σ²+ε).
        let mut tape = Tape::new();
        let x_val = seq_tensor(&[64, 4]);
        let (_, var_in) = batch_stats(&x_val).unwrap();
        let x = tape.leaf(x_val);
        let (g, b) = ones_gamma_zeros_beta(&mut tape, 4);
        let eps = 1e-3;
        let mut state = NormState::new(4, eps, 0.99).unwrap();
        state.set_mode(BnMode::EvalBatch).unwrap();
        let out = bn_forward(&mut tape, x, g, b, &mut state, None, false).unwrap();
        let (mean_out, var_out) = batch_stats(tape.value(out.out)).unwrap();
        for c in 0..4 {
            assert!(mean_out[c].abs() < 1e-5, "channel {c} mean {}", mean_out[c]);
            let expect = var_in[c] / (var_in[c] + eps);
            assert!((var_out[c] - expect).abs() < 1e-4);
        }
    }

    #[test]
    fn eval_batch_equivariant_to_channel_affine_input() {
        let mut tape = Tape::new();
        let x_val = seq_tensor(&[32, 3]);
        let a = [1.7, 0.4, 3.0];
        let b_shift = [-2.0, 0.3, 10.0];
        let mut shifted = x_val.clone();
        for (i, v) in shifted.data_mut().iter_mut().enumerate() {
            let c = i % 3;
            *v = a[c] * *v + b_shift[c];
        }
        let (g, bt) = ones_gamma_zeros_beta(&mut tape, 3);
        let mut state = NormState::new(3, 1e-12, 0.99).unwrap();
        state.set_mode(BnMode::EvalBatch).unwrap();
        let x1 = tape.leaf(x_val);
        let o1 = bn_forward(&mut tape, x1, g, bt, &mut state, None, false).unwrap();
        let x2 = tape.leaf(shifted);
        let o2 = bn_forward(&mut tape, x2, g, bt, &mut state, None, false).unwrap();
        for (u, v) in tape.value(o1.out).data().to_vec().iter().zip(tape.value(o2.out).data()) {
            assert!((u - v).abs() < 1e-3);
        }
    }

    #[test]
    fn ema_converges_geometrically_to_closed_form() {
        let mut state = NormState::new(2, 1e-3, 0.9).unwrap();
        let batch_mean = [3.0, -1.0];
        let batch_var = [4.0, 0.25];
        let k = 17;
        for _ in 0..k {
            state.update_ema(&batch_mean, &batch_var);
        }
        let m: Scalar = 0.9;
        let decay = m.powi(k);
        for c in 0..2 {
            // μ_EMA(k) = m^k·μ₀ + (1−m^k)·μ_batch with μ₀ = 0, σ²₀ = 1
            let expect_mean = (1.0 - decay) * batch_mean[c];
            let expect_var = decay * 1.0 + (1.0 - decay) * batch_var[c];
            assert!((state.ema_mean[c] - expect_mean).abs() < 1e-6);
            assert!((state.ema_var[c] - expect_var).abs() < 1e-6);
        }
    }

    #[test]
    fn mode_round_trip_is_bit_identical_and_leaves_affine_untouched() {
        let x_val = seq_tensor(&[16, 3]);
        let mut state = NormState::new(3, 1e-3, 0.99).unwrap();
        state.ema_mean = vec![0.2, -0.4, 1.0];
        state.ema_var = vec![1.5, 0.7, 2.0];
        let gamma_before = state.gamma.clone();

        let run_ema = |state: &mut NormState| {
            let mut tape = Tape::new();
            let x = tape.leaf(x_val.clone());
            let g = tape.leaf(Tensor::new(&[3], state.gamma.clone()).unwrap());
            let b = tape.leaf(Tensor::new(&[3], state.beta.clone()).unwrap());
            let out = bn_forward(&mut tape, x, g, b, state, None, false).unwrap();
            tape.value(out.out).data().to_vec()
        };

        state.set_mode(BnMode::EvalEma).unwrap();
        let first = run_ema(&mut state);
        state.set_mode(BnMode::EvalBatch).unwrap();
        state.set_mode(BnMode::EvalEma).unwrap();
        let second = run_ema(&mut state);
        assert_eq!(first, second);
        assert_eq!(state.gamma, gamma_before);
    }

    #[test]
    fn frozen_mode_requires_stored_statistics() {
        let mut state = NormState::new(2, 1e-3, 0.99).unwrap();
        assert!(state.set_mode(BnMode::EvalFrozen).is_err());
        state.set_frozen(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        assert!(state.set_mode(BnMode::EvalFrozen).is_ok());
    }

    #[test]
    fn batch_of_one_scalar_spatial_yields_beta() {
        // N=1, H=W=1: variance 0, x̂ = 0, output = beta. Permitted, not an error.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[1, 2], vec![4.0, -3.0]).unwrap());
        let g = tape.leaf(Tensor::full(&[2], 2.0));
        let b = tape.leaf(Tensor::new(&[2], vec![0.5, -0.25]).unwrap());
        let mut state = NormState::new(2, 1e-3, 0.99).unwrap();
        state.set_mode(BnMode::EvalBatch).unwrap();
        let out = bn_forward(&mut tape, x, g, b, &mut state, None, false).unwrap();
        assert_eq!(tape.value(out.out).data(), &[0.5, -0.25]);
    }

    #[test]
    fn eps_override_does_not_mutate_state() {
        let mut tape = Tape::new();
        let x = tape.leaf(seq_tensor(&[8, 2]));
        let (g, b) = ones_gamma_zeros_beta(&mut tape, 2);
        let mut state = NormState::new(2, 1e-3, 0.99).unwrap();
        state.set_mode(BnMode::EvalBatch).unwrap();
        let _ = bn_forward(&mut tape, x, g, b, &mut state, Some(0.5), false).unwrap();
        assert_eq!(state.eps, 1e-3);
    }

    #[test]
    fn group_norm_extremes_match_instance_and_layer_norm() {
        let x_val = seq_tensor(&[2, 4, 3, 3]);
        let run = |family: NormFamily| {
            let mut tape = Tape::new();
            let x = tape.leaf(x_val.clone());
            let g = tape.leaf(Tensor::full(&[4], 1.0));
            let b = tape.leaf(Tensor::zeros(&[4]));
            let out = alt_norm_forward(&mut tape, x, family, g, b, 1e-5).unwrap();
            tape.value(out).data().to_vec()
        };
        let gn_c = run(NormFamily::Group { groups: 4 });
        let inst = run(NormFamily::Instance);
        for (a, b) in gn_c.iter().zip(&inst) {
            assert!((a - b).abs() < 1e-6);
        }
        let gn_1 = run(NormFamily::Group { groups: 1 });
        let layer = run(NormFamily::Layer);
        for (a, b) in gn_1.iter().zip(&layer) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_fixed_point() {
        // A row that is already zero-mean unit-variance passes through ≈ unchanged.
        let vals = vec![-1.2816, -0.5244, 0.0, 0.5244, 1.2816];
        let m: f64 = vals.iter().sum::<f64>() / 5.0;
        let v: f64 = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 5.0;
        let std_vals: Vec<f64> = vals.iter().map(|x| (x - m) / v.sqrt()).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[1, 5], std_vals.clone()).unwrap());
        let g = tape.leaf(Tensor::full(&[5], 1.0));
        let b = tape.leaf(Tensor::zeros(&[5]));
        let out = alt_norm_forward(&mut tape, x, NormFamily::Layer, g, b, 1e-12).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(&std_vals) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn instance_norm_constant_image_is_zero() {
        let mut tape = Tape::new();
        let mut data = vec![1.5; 2 * 2 * 2 * 2];
        for v in data.iter_mut().skip(8) {
            *v = -7.0; // second image constant at a different level
        }
        let x = tape.leaf(Tensor::new(&[2, 2, 2, 2], data).unwrap());
        let g = tape.leaf(Tensor::full(&[2], 1.0));
        let b = tape.leaf(Tensor::zeros(&[2]));
        let out = alt_norm_forward(&mut tape, x, NormFamily::Instance, g, b, 1e-5).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn group_norm_rejects_indivisible_channels() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 5, 2, 2]));
        let g = tape.leaf(Tensor::full(&[5], 1.0));
        let b = tape.leaf(Tensor::zeros(&[5]));
        assert!(
            alt_norm_forward(&mut tape, x, NormFamily::Group { groups: 2 }, g, b, 1e-5).is_err()
        );
    }

    #[test]
    fn weight_standardize_moments_and_fixed_point() {
        let mut tape = Tape::new();
        let w_val = seq_tensor(&[3, 2, 3, 3]);
        let w = tape.leaf(w_val);
        let ws = weight_standardize(&mut tape, w).unwrap();
        let out = tape.value(ws);
        let fan_in = 2 * 3 * 3;
        for f in 0..3 {
            let filt = &out.data()[f * fan_in..(f + 1) * fan_in];
            let m: f64 = filt.iter().sum::<f64>() / fan_in as f64;
            let v: f64 = filt.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / fan_in as f64;
            assert!(m.abs() < 1e-6);
            assert!((v - 1.0).abs() < 1e-4);
        }
        // Standardizing twice is a fixed point.
        let ws2 = weight_standardize(&mut tape, ws).unwrap();
        for (a, b) in tape.value(ws2).data().to_vec().iter().zip(tape.value(ws).data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn weight_standardize_constant_filter_is_zero() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::full(&[1, 1, 2, 2], 0.7));
        let ws = weight_standardize(&mut tape, w).unwrap();
        assert!(tape.value(ws).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn weight_standardize_rejects_fan_in_one() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::full(&[3, 1, 1, 1], 0.7));
        assert!(weight_standardize(&mut tape, w).is_err());
    }

    #[test]
    fn norm_kind_validation() {
        assert!(NormKind::group(2).validate(8).is_ok());
        assert!(NormKind::group(3).validate(8).is_err());
        let bad = NormKind { family: NormFamily::Batch, weight_std: true };
        assert!(bad.validate(8).is_err());
    }
}
