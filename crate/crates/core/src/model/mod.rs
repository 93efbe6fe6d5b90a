//! Network definitions, prediction, ensembles, and activation capture.
//!
//! Architectures are sequential: MLP and a tiny CNN, each with a
//! normalization layer per hidden block, plus "last-layer-norm" variants
//! that drop every internal normalization and keep exactly one immediately
//! before the final linear layer.

mod checkpoint;
mod train;

pub use checkpoint::{Checkpoint, TensorData, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{train, LrDrop, OptimizerKind, TrainConfig};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::norm::{
    alt_norm_forward, bn_forward, weight_standardize, weight_standardize_columns, BnMode,
    NormFamily, NormKind, NormState,
};
use crate::seeding::substream;
use crate::tensor::{Scalar, Tape, Tensor, TensorId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Architecture {
    Mlp { hidden: Vec<usize> },
    TinyCnn { channels: Vec<usize>, strides: Vec<usize> },
    MlpLastLayerBn { hidden: Vec<usize> },
    TinyCnnLastLayerBn { channels: Vec<usize>, strides: Vec<usize> },
}

impl Architecture {
    pub fn is_last_layer_norm(&self) -> bool {
        matches!(
            self,
            Architecture::MlpLastLayerBn { .. } | Architecture::TinyCnnLastLayerBn { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Architecture,
    pub norm: NormKind,
    /// `[d]` for tabular input, `[c, h, w]` for images.
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    /// Normalization ε baked in at training time; prediction may override.
    pub eps: Scalar,
    /// EMA momentum for batch-norm running statistics.
    pub momentum: Scalar,
    /// Weight-initialization seed.
    pub seed: u64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument("need at least 2 classes".into()));
        }
        match (&self.arch, self.input_shape.len()) {
            (Architecture::Mlp { hidden } | Architecture::MlpLastLayerBn { hidden }, 1) => {
                if hidden.is_empty() {
                    return Err(Error::InvalidArgument("MLP needs ≥ 1 hidden layer".into()));
                }
            }
            (
                Architecture::TinyCnn { channels, strides }
                | Architecture::TinyCnnLastLayerBn { channels, strides },
                3,
            ) => {
                if channels.is_empty() || channels.len() != strides.len() {
                    return Err(Error::InvalidArgument(
                        "CNN needs matching nonempty channel/stride lists".into(),
                    ));
                }
            }
            _ => {
                return Err(Error::ShapeMismatch(format!(
                    "input shape {:?} does not fit architecture",
                    self.input_shape
                )))
            }
        }
        if self.arch.is_last_layer_norm() && self.norm.family == NormFamily::None {
            return Err(Error::InvalidArgument(
                "last-layer-norm architectures need a normalization kind".into(),
            ));
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidArgument("spec epsilon must be > 0".into()));
        }
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }
}

/// Which batch-norm layers a prediction-mode switch applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BnScope {
    All,
    /// Only the last normalization layer; all earlier ones fall back to EMA
    /// statistics.
    LastLayerOnly,
}

/// How `freeze_stats` runs its capture pass: with upstream layers already on
/// their own just-computed batch statistics (the self-consistent default),
/// or with upstream layers on EMA statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrozenCapturePolicy {
    BatchUpstream,
    EmaUpstream,
}

#[derive(Debug, Clone)]
enum Layer {
    Linear { w: usize, b: Option<usize>, weight_std: bool },
    Conv { w: usize, b: Option<usize>, stride: usize, weight_std: bool },
    Norm { idx: usize },
    Relu,
    GlobalAvgPool,
}

/// A live network: parameters, per-norm-layer state, and the layer program
/// derived from its spec.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    params: Vec<Tensor>,
    norm_states: Vec<NormState>,
    layers: Vec<Layer>,
}

struct BuiltLayers {
    layers: Vec<Layer>,
    param_shapes: Vec<Vec<usize>>,
    norm_channels: Vec<usize>,
}

fn build_layers(spec: &ModelSpec) -> Result<BuiltLayers> {
    spec.validate()?;
    let mut layers = Vec::new();
    let mut param_shapes: Vec<Vec<usize>> = Vec::new();
    let mut norm_channels = Vec::new();
    let has_norm = spec.norm.family != NormFamily::None;
    // weight standardization pairs with internal group norm only
    let ws = spec.norm.weight_std && !spec.arch.is_last_layer_norm();

    let mut push_param = |shape: Vec<usize>| -> usize {
        param_shapes.push(shape);
        param_shapes.len() - 1
    };

    match &spec.arch {
        Architecture::Mlp { hidden } => {
            let mut d = spec.input_shape[0];
            for &h in hidden {
                let w = push_param(vec![d, h]);
                let b = if has_norm { None } else { Some(push_param(vec![h])) };
                layers.push(Layer::Linear { w, b, weight_std: ws });
                if has_norm {
                    layers.push(Layer::Norm { idx: norm_channels.len() });
                    norm_channels.push(h);
                }
                layers.push(Layer::Relu);
                d = h;
            }
            let w = push_param(vec![d, spec.num_classes]);
            let b = Some(push_param(vec![spec.num_classes]));
            layers.push(Layer::Linear { w, b, weight_std: false });
        }
        Architecture::MlpLastLayerBn { hidden } => {
            let mut d = spec.input_shape[0];
            for &h in hidden {
                let w = push_param(vec![d, h]);
                let b = Some(push_param(vec![h]));
                layers.push(Layer::Linear { w, b, weight_std: false });
                layers.push(Layer::Relu);
                d = h;
            }
            layers.push(Layer::Norm { idx: 0 });
            norm_channels.push(d);
            let w = push_param(vec![d, spec.num_classes]);
            let b = Some(push_param(vec![spec.num_classes]));
            layers.push(Layer::Linear { w, b, weight_std: false });
        }
        Architecture::TinyCnn { channels, strides } => {
            let mut c = spec.input_shape[0];
            for (&f, &s) in channels.iter().zip(strides) {
                let w = push_param(vec![f, c, 3, 3]);
                let b = if has_norm { None } else { Some(push_param(vec![f])) };
                layers.push(Layer::Conv { w, b, stride: s, weight_std: ws });
                if has_norm {
                    layers.push(Layer::Norm { idx: norm_channels.len() });
                    norm_channels.push(f);
                }
                layers.push(Layer::Relu);
                c = f;
            }
            layers.push(Layer::GlobalAvgPool);
            let w = push_param(vec![c, spec.num_classes]);
            let b = Some(push_param(vec![spec.num_classes]));
            layers.push(Layer::Linear { w, b, weight_std: false });
        }
        Architecture::TinyCnnLastLayerBn { channels, strides } => {
            let mut c = spec.input_shape[0];
            for (&f, &s) in channels.iter().zip(strides) {
                let w = push_param(vec![f, c, 3, 3]);
                let b = Some(push_param(vec![f]));
                layers.push(Layer::Conv { w, b, stride: s, weight_std: false });
                layers.push(Layer::Relu);
                c = f;
            }
            layers.push(Layer::GlobalAvgPool);
            layers.push(Layer::Norm { idx: 0 });
            norm_channels.push(c);
            let w = push_param(vec![c, spec.num_classes]);
            let b = Some(push_param(vec![spec.num_classes]));
            layers.push(Layer::Linear { w, b, weight_std: false });
        }
    }
    for &ch in &norm_channels {
        spec.norm.validate(ch)?;
    }
    Ok(BuiltLayers { layers, param_shapes, norm_channels })
}

/// Options for a single forward pass.
struct ForwardOpts<'a> {
    tracked: bool,
    eps_override: Option<Scalar>,
    want_input_stats: bool,
    capture: Option<&'a [String]>,
}

/// Tape handles for every learnable slot, in optimizer slot order.
pub(crate) struct TapeBindings {
    pub params: Vec<TensorId>,
    pub gammas: Vec<TensorId>,
    pub betas: Vec<TensorId>,
}

pub(crate) struct ForwardOutput {
    pub logits: TensorId,
    pub bindings: TapeBindings,
    pub captured: Vec<(String, Tensor)>,
    pub norm_input_stats: Vec<Option<(Vec<Scalar>, Vec<Scalar>)>>,
}

/// Average a rank-4 activation over its spatial dims; rank-2 passes through.
fn spatial_average(t: &Tensor) -> Result<Tensor> {
    match t.rank() {
        2 => Ok(t.clone()),
        4 => {
            let (n, c, h, w) = t.dims4()?;
            let mut out = vec![0.0; n * c];
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * h * w;
                    let s: Scalar = t.data()[base..base + h * w].iter().sum();
                    out[ni * c + ci] = s / (h * w) as Scalar;
                }
            }
            Tensor::new(&[n, c], out)
        }
        r => Err(Error::ShapeMismatch(format!("cannot summarize rank-{r} activation"))),
    }
}

fn run_forward(
    spec: &ModelSpec,
    layers: &[Layer],
    params: &[Tensor],
    states: &mut [NormState],
    tape: &mut Tape,
    x: &Tensor,
    opts: &ForwardOpts,
) -> Result<ForwardOutput> {
    if x.shape().len() < 2 || &x.shape()[1..] != spec.input_shape.as_slice() {
        return Err(Error::ShapeMismatch(format!(
            "input shape {:?} does not match spec {:?}",
            x.shape(),
            spec.input_shape
        )));
    }
    let insert = |tape: &mut Tape, t: Tensor, tracked: bool| {
        if tracked {
            tape.tracked_leaf(t)
        } else {
            tape.leaf(t)
        }
    };

    let param_ids: Vec<TensorId> =
        params.iter().map(|p| insert(tape, p.clone(), opts.tracked)).collect();
    let mut gamma_ids = Vec::with_capacity(states.len());
    let mut beta_ids = Vec::with_capacity(states.len());
    for st in states.iter() {
        gamma_ids.push(insert(tape, Tensor::new(&[st.channels()], st.gamma.clone())?, opts.tracked));
        beta_ids.push(insert(tape, Tensor::new(&[st.channels()], st.beta.clone())?, opts.tracked));
    }

    let wants = |name: &str| opts.capture.is_some_and(|sel| sel.iter().any(|s| s == name));

    let last_linear = layers
        .iter()
        .rposition(|l| matches!(l, Layer::Linear { .. }))
        .expect("every architecture ends in a linear layer");

    let mut captured = Vec::new();
    let mut norm_input_stats = vec![None; states.len()];
    let mut cur = tape.leaf(x.clone());
    for (li, layer) in layers.iter().enumerate() {
        if li == last_linear && wants("penultimate") {
            captured.push(("penultimate".to_string(), spatial_average(tape.value(cur))?));
        }
        cur = match layer {
            Layer::Linear { w, b, weight_std } => {
                let mut wid = param_ids[*w];
                if *weight_std {
                    wid = weight_standardize_columns(tape, wid)?;
                }
                let mut out = tape.matmul(cur, wid)?;
                if let Some(b) = b {
                    out = tape.add_channel(out, param_ids[*b])?;
                }
                out
            }
            Layer::Conv { w, b, stride, weight_std } => {
                let mut wid = param_ids[*w];
                if *weight_std {
                    wid = weight_standardize(tape, wid)?;
                }
                let mut out = tape.conv2d(cur, wid, *stride, 1)?;
                if let Some(b) = b {
                    out = tape.add_channel(out, param_ids[*b])?;
                }
                out
            }
            Layer::Norm { idx } => {
                let out = match spec.norm.family {
                    NormFamily::Batch => {
                        let fwd = bn_forward(
                            tape,
                            cur,
                            gamma_ids[*idx],
                            beta_ids[*idx],
                            &mut states[*idx],
                            opts.eps_override,
                            opts.want_input_stats,
                        )?;
                        norm_input_stats[*idx] = fwd.input_stats;
                        fwd.out
                    }
                    family => alt_norm_forward(
                        tape,
                        cur,
                        family,
                        gamma_ids[*idx],
                        beta_ids[*idx],
                        opts.eps_override.unwrap_or(states[*idx].eps),
                    )?,
                };
                let name = norm_layer_name(*idx);
                if wants(&name) {
                    captured.push((name, spatial_average(tape.value(out))?));
                }
                out
            }
            Layer::Relu => tape.relu(cur)?,
            Layer::GlobalAvgPool => tape.global_avg_pool(cur)?,
        };
    }
    if wants("logits") {
        captured.push(("logits".to_string(), spatial_average(tape.value(cur))?));
    }
    Ok(ForwardOutput {
        logits: cur,
        bindings: TapeBindings { params: param_ids, gammas: gamma_ids, betas: beta_ids },
        captured,
        norm_input_stats,
    })
}

pub fn norm_layer_name(idx: usize) -> String {
    format!("norm{idx}")
}

impl Model {
    /// He-initialized model; gamma = 1, beta = 0, EMA at (0, 1), mode Train.
    pub fn init(spec: ModelSpec) -> Result<Model> {
        let built = build_layers(&spec)?;
        let mut rng = substream(spec.seed, "init");
        let params: Vec<Tensor> = built
            .param_shapes
            .iter()
            .map(|shape| {
                if shape.len() == 1 {
                    // biases start at zero
                    Tensor::zeros(shape)
                } else {
                    let fan_in: usize = if shape.len() == 2 {
                        shape[0] // [in, out] linear
                    } else {
                        shape[1..].iter().product() // [F, C, kh, kw] conv
                    };
                    let std = (2.0 / fan_in as Scalar).sqrt();
                    let data: Vec<Scalar> = (0..shape.iter().product())
                        .map(|_| std * rng.sample::<Scalar, _>(StandardNormal))
                        .collect();
                    Tensor::from_op(shape.clone(), data)
                }
            })
            .collect();
        let norm_states = built
            .norm_channels
            .iter()
            .map(|&c| NormState::new(c, spec.eps, spec.momentum))
            .collect::<Result<Vec<_>>>()?;
        Ok(Model { spec, params, norm_states, layers: built.layers })
    }

    /// Rebuild a model from checkpointed parts, validating shapes.
    pub(crate) fn from_parts(
        spec: ModelSpec,
        params: Vec<Tensor>,
        norm_states: Vec<NormState>,
    ) -> Result<Model> {
        let built = build_layers(&spec)?;
        if params.len() != built.param_shapes.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, got {}",
                built.param_shapes.len(),
                params.len()
            )));
        }
        for (p, shape) in params.iter().zip(&built.param_shapes) {
            if p.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter shape {:?} does not match expected {:?}",
                    p.shape(),
                    shape
                )));
            }
        }
        if norm_states.len() != built.norm_channels.len() {
            return Err(Error::Checkpoint("norm state count mismatch".into()));
        }
        for (st, &c) in norm_states.iter().zip(&built.norm_channels) {
            st.validate()?;
            if st.channels() != c {
                return Err(Error::Checkpoint("norm state channel mismatch".into()));
            }
        }
        Ok(Model { spec, params, norm_states, layers: built.layers })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn norm_states(&self) -> &[NormState] {
        &self.norm_states
    }

    pub fn num_norm_layers(&self) -> usize {
        self.norm_states.len()
    }

    /// Names usable as capture selectors, besides "penultimate" and "logits".
    pub fn norm_layer_names(&self) -> Vec<String> {
        (0..self.norm_states.len()).map(norm_layer_name).collect()
    }

    /// Switch the statistics source of every batch-norm layer, atomically:
    /// validation happens before any layer is touched. Idempotent.
    pub fn set_prediction_mode(&mut self, mode: BnMode) -> Result<()> {
        self.set_prediction_mode_scoped(mode, BnScope::All)
    }

    /// Scoped variant: `LastLayerOnly` puts the final normalization layer in
    /// `mode` and every earlier one on EMA statistics.
    pub fn set_prediction_mode_scoped(&mut self, mode: BnMode, scope: BnScope) -> Result<()> {
        if mode == BnMode::Train {
            return Err(Error::InvalidArgument(
                "Train is not a prediction mode; it is set internally by the training loop"
                    .into(),
            ));
        }
        if mode == BnMode::EvalFrozen {
            let need_all = scope == BnScope::All;
            for (i, st) in self.norm_states.iter().enumerate() {
                let affected = need_all || i + 1 == self.norm_states.len();
                if affected && (st.frozen_mean.is_none() || st.frozen_var.is_none()) {
                    return Err(Error::MissingArtifact(format!(
                        "no frozen statistics stored for {}; call freeze_stats first",
                        norm_layer_name(i)
                    )));
                }
            }
        }
        let last = self.norm_states.len().saturating_sub(1);
        for (i, st) in self.norm_states.iter_mut().enumerate() {
            let layer_mode = match scope {
                BnScope::All => mode,
                BnScope::LastLayerOnly => {
                    if i == last {
                        mode
                    } else {
                        BnMode::EvalEma
                    }
                }
            };
            st.set_mode(layer_mode)?;
        }
        Ok(())
    }

    /// Put every layer in Train mode (training loop only).
    pub(crate) fn set_train_mode(&mut self) {
        for st in &mut self.norm_states {
            st.mode = BnMode::Train;
        }
    }

    /// Capture per-layer batch statistics from one reference batch and store
    /// them as frozen statistics. With `BatchUpstream`, layer k's statistics
    /// are computed with layers 1..k−1 already normalizing by their own
    /// just-computed batch statistics — a single batch-mode pass with
    /// capture, not per-layer recomputation under EMA.
    pub fn freeze_stats(
        &mut self,
        reference: &Tensor,
        policy: FrozenCapturePolicy,
    ) -> Result<()> {
        if self.spec.norm.family != NormFamily::Batch {
            return Err(Error::InvalidArgument(
                "freeze_stats applies to batch normalization only".into(),
            ));
        }
        let capture_mode = match policy {
            FrozenCapturePolicy::BatchUpstream => BnMode::EvalBatch,
            FrozenCapturePolicy::EmaUpstream => BnMode::EvalEma,
        };
        let mut states = self.norm_states.clone();
        for st in &mut states {
            st.mode = capture_mode;
        }
        let mut tape = Tape::new();
        let opts = ForwardOpts {
            tracked: false,
            eps_override: None,
            want_input_stats: true,
            capture: None,
        };
        let out = run_forward(
            &self.spec,
            &self.layers,
            &self.params,
            &mut states,
            &mut tape,
            reference,
            &opts,
        )?;
        for (i, stats) in out.norm_input_stats.into_iter().enumerate() {
            let (mean, var) = stats.expect("input stats requested for every norm layer");
            self.norm_states[i].set_frozen(mean, var)?;
        }
        Ok(())
    }

    /// Raw logits under the current prediction modes.
    pub fn logits(&self, x: &Tensor, eps_override: Option<Scalar>) -> Result<Tensor> {
        if self.norm_states.iter().any(|s| s.mode == BnMode::Train) {
            return Err(Error::InvalidArgument(
                "model is in Train mode; call set_prediction_mode first".into(),
            ));
        }
        let mut states = self.norm_states.clone();
        let mut tape = Tape::new();
        let opts = ForwardOpts {
            tracked: false,
            eps_override,
            want_input_stats: false,
            capture: None,
        };
        let out =
            run_forward(&self.spec, &self.layers, &self.params, &mut states, &mut tape, x, &opts)?;
        let logits = tape.value(out.logits).clone();
        logits.validate_finite()?;
        Ok(logits)
    }

    /// Class probabilities (softmax of logits) for a batch, simultaneously.
    pub fn predict(&self, x: &Tensor, eps_override: Option<Scalar>) -> Result<Tensor> {
        let logits = self.logits(x, eps_override)?;
        crate::metrics::softmax_rows_with_temperature(&logits, 1.0)
    }

    /// Spatially-averaged activations at the named capture points, in
    /// selector order. Valid selectors: `norm<i>`, `penultimate`, `logits`.
    pub fn capture_activations(
        &self,
        x: &Tensor,
        selectors: &[String],
        eps_override: Option<Scalar>,
    ) -> Result<Vec<(String, Tensor)>> {
        if self.norm_states.iter().any(|s| s.mode == BnMode::Train) {
            return Err(Error::InvalidArgument(
                "model is in Train mode; call set_prediction_mode first".into(),
            ));
        }
        let valid: Vec<String> = self
            .norm_layer_names()
            .into_iter()
            .chain(["penultimate".to_string(), "logits".to_string()])
            .collect();
        for s in selectors {
            if !valid.contains(s) {
                return Err(Error::InvalidArgument(format!(
                    "unknown capture layer {s:?}; valid: {valid:?}"
                )));
            }
        }
        let mut states = self.norm_states.clone();
        let mut tape = Tape::new();
        let opts = ForwardOpts {
            tracked: false,
            eps_override,
            want_input_stats: false,
            capture: Some(selectors),
        };
        let out =
            run_forward(&self.spec, &self.layers, &self.params, &mut states, &mut tape, x, &opts)?;
        // return in selector order
        let mut by_name = out.captured;
        let mut result = Vec::with_capacity(selectors.len());
        for s in selectors {
            let pos = by_name
                .iter()
                .position(|(n, _)| n == s)
                .expect("requested selector was captured");
            result.push(by_name.remove(pos));
        }
        Ok(result)
    }

    /// Training forward pass: tracked parameters, Train-mode normalization,
    /// EMA updates applied in place.
    pub(crate) fn forward_train(&mut self, tape: &mut Tape, x: &Tensor) -> Result<ForwardOutput> {
        let opts = ForwardOpts {
            tracked: true,
            eps_override: None,
            want_input_stats: false,
            capture: None,
        };
        run_forward(
            &self.spec,
            &self.layers,
            &self.params,
            &mut self.norm_states,
            tape,
            x,
            &opts,
        )
    }

    // ── optimizer slot access ───────────────────────────────────────────
    // Slot order: params, then per norm layer gamma, then beta.

    pub(crate) fn num_slots(&self) -> usize {
        self.params.len() + 2 * self.norm_states.len()
    }

    pub(crate) fn slot_len(&self, i: usize) -> usize {
        let np = self.params.len();
        if i < np {
            self.params[i].numel()
        } else {
            let j = i - np;
            self.norm_states[j / 2].channels()
        }
    }

    pub(crate) fn slot_mut(&mut self, i: usize) -> &mut [Scalar] {
        let np = self.params.len();
        if i < np {
            self.params[i].data_mut()
        } else {
            let j = i - np;
            let st = &mut self.norm_states[j / 2];
            if j % 2 == 0 {
                &mut st.gamma
            } else {
                &mut st.beta
            }
        }
    }

    pub(crate) fn slot_grads(&self, tape: &Tape, bindings: &TapeBindings) -> Vec<Vec<Scalar>> {
        let mut out = Vec::with_capacity(self.num_slots());
        for &id in &bindings.params {
            out.push(tape.grad(id).data().to_vec());
        }
        for i in 0..self.norm_states.len() {
            out.push(tape.grad(bindings.gammas[i]).data().to_vec());
            out.push(tape.grad(bindings.betas[i]).data().to_vec());
        }
        out
    }

    pub(crate) fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub(crate) fn norm_states_vec(&self) -> &Vec<NormState> {
        &self.norm_states
    }
}

/// Arithmetic mean of member probability tensors (post-softmax averaging).
pub fn mean_probabilities(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("mean of zero probability tensors".into()))?;
    for p in parts {
        if p.shape() != first.shape() {
            return Err(Error::ShapeMismatch("probability tensors disagree in shape".into()));
        }
    }
    let mut out = vec![0.0; first.numel()];
    for p in parts {
        for (o, &v) in out.iter_mut().zip(p.data()) {
            *o += v;
        }
    }
    let m = parts.len() as Scalar;
    for o in &mut out {
        *o /= m;
    }
    Ok(Tensor::from_op(first.shape().to_vec(), out))
}

/// Average the members' softmax outputs. Every member recomputes its own
/// normalization statistics; nothing is shared across members.
pub fn ensemble_predict(
    models: &[Model],
    x: &Tensor,
    eps_override: Option<Scalar>,
) -> Result<Tensor> {
    if models.is_empty() {
        return Err(Error::InvalidArgument("empty ensemble".into()));
    }
    let spec0 = models[0].spec();
    for m in models {
        if m.spec().input_shape != spec0.input_shape
            || m.spec().num_classes != spec0.num_classes
        {
            return Err(Error::ShapeMismatch(
                "ensemble members disagree on input shape or class count".into(),
            ));
        }
    }
    let probs: Vec<Tensor> = models
        .iter()
        .map(|m| m.predict(x, eps_override))
        .collect::<Result<Vec<_>>>()?;
    mean_probabilities(&probs)
}
