//! Loss, rollouts, backpropagation through time, and training epochs.
//!
//! Step `s` of a rollout consumes input frame `u_s` and emits output `O_s`,
//! which is scored against data frame `x_{s + lookahead}`. Closed-loop
//! rollouts feed `O_{s-1}` back as `u_s`, seeded with the first data frame.
//!
//! One training pass per sequence runs a closed-loop rollout, then a second
//! rollout driven by `alpha * x_s + (1 - alpha) * O^closed_{s-1}`, and
//! differentiates the loss of that second rollout. By default the gradient
//! also flows back through the closed-loop branch of the blend.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Network, NetworkState, ParamSet, StateGrad, Weights};
use crate::sequence::FrameSequence;
use crate::tensor::{Frame, MapStack};

/// How the closed-loop outputs inside the mixed input are treated by BPTT.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClosedBranch {
    /// The blend is part of the graph; gradients flow into the closed-loop rollout.
    #[default]
    Differentiated,
    /// Closed-loop outputs are treated as constants.
    Detached,
}

/// Update rule applied to the summed gradients of an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    GradientDescent,
    /// Adam with bias correction; weights and each initial state keep their own moments.
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

fn default_lookahead() -> usize {
    2
}
fn default_alpha() -> f64 {
    0.9
}

/// Training hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    #[serde(default = "default_lookahead")]
    pub lookahead: usize,
    /// Share of the data frame in the mixed input.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    pub learning_rate: f64,
    /// Step size for the per-sequence initial states; defaults to `learning_rate`.
    #[serde(default)]
    pub state_learning_rate: Option<f64>,
    pub epochs_max: usize,
    /// Training stops once the mean closed-loop MSE drops below this.
    pub closed_loop_error_threshold: f64,
    #[serde(default)]
    pub checkpoint_epochs: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub closed_branch: ClosedBranch,
    /// Rescales the summed weight gradient of an epoch to at most this norm.
    #[serde(default)]
    pub max_grad_norm: Option<f64>,
    #[serde(default)]
    pub optimizer: Optimizer,
}

impl TrainSpec {
    pub fn new(learning_rate: f64, epochs_max: usize, threshold: f64) -> Self {
        TrainSpec {
            lookahead: default_lookahead(),
            alpha: default_alpha(),
            learning_rate,
            state_learning_rate: None,
            epochs_max,
            closed_loop_error_threshold: threshold,
            checkpoint_epochs: Vec::new(),
            seed: 0,
            closed_branch: ClosedBranch::Differentiated,
            max_grad_norm: None,
            optimizer: Optimizer::GradientDescent,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidArgument(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.lookahead == 0 {
            return Err(Error::InvalidArgument("lookahead must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidArgument("learning rate must be finite and non-negative".into()));
        }
        if !(self.state_rate().is_finite() && self.state_rate() >= 0.0) {
            return Err(Error::InvalidArgument("state learning rate must be finite and non-negative".into()));
        }
        if self.max_grad_norm.is_some_and(|n| !(n.is_finite() && n > 0.0)) {
            return Err(Error::InvalidArgument("max_grad_norm must be positive".into()));
        }
        if let Optimizer::Adam { beta1, beta2, epsilon } = self.optimizer {
            if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && epsilon > 0.0) {
                return Err(Error::InvalidArgument("adam needs betas in [0, 1) and a positive epsilon".into()));
            }
        }
        Ok(())
    }

    pub fn state_rate(&self) -> f64 {
        self.state_learning_rate.unwrap_or(self.learning_rate)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train spec serialises")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: TrainSpec = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Per-pixel squared error of one frame pair.
pub fn frame_mse(output: &Frame, target: &Frame) -> f64 {
    let n = output.len() as f64;
    output.as_slice().iter().zip(target.as_slice()).map(|(a, b)| (b - a) * (b - a)).sum::<f64>() / n
}

/// Mean per-pixel error per step and its average over all steps.
pub fn compute_loss(outputs: &[Frame], targets: &[Frame]) -> Result<(f64, Vec<f64>)> {
    if outputs.len() != targets.len() {
        return Err(Error::InvalidArgument(format!("{} outputs vs {} targets", outputs.len(), targets.len())));
    }
    let mut per_step = Vec::with_capacity(outputs.len());
    for (o, t) in outputs.iter().zip(targets) {
        if !o.same_shape(t) {
            return Err(Error::Topology(format!("output {:?} vs target {:?}", o.dims(), t.dims())));
        }
        per_step.push(frame_mse(o, t));
    }
    let mean = if per_step.is_empty() { 0.0 } else { per_step.iter().sum::<f64>() / per_step.len() as f64 };
    Ok((mean, per_step))
}

/// `(1 - alpha) * closed + alpha * data`.
pub fn mix_input(data: &Frame, closed_prev: &Frame, alpha: f64) -> Frame {
    let mut out = data.clone();
    for (o, &c) in out.as_mut_slice().iter_mut().zip(closed_prev.as_slice()) {
        *o = (1.0 - alpha) * c + alpha * *o;
    }
    out
}

/// Where each step's input comes from.
#[derive(Debug, Clone, Copy)]
pub enum Drive<'a> {
    /// External frames, one per step.
    Open(&'a [Frame]),
    /// The previous output; the first step consumes `seed`.
    Closed { seed: &'a Frame },
    /// Blend of data frames with a recorded closed-loop rollout.
    Mixed { data: &'a [Frame], closed: &'a [Frame], alpha: f64 },
}

/// States, inputs and outputs of an unrolled rollout.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `steps + 1` states, starting with the initial one.
    pub states: Vec<NetworkState>,
    pub inputs: Vec<Frame>,
    pub outputs: Vec<Frame>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.outputs.len()
    }
    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }
    pub fn last_state(&self) -> &NetworkState {
        self.states.last().expect("trace holds the initial state")
    }
}

/// Unrolls `steps` forward steps from `init`.
pub fn rollout(net: &Network, weights: &Weights, init: &NetworkState, drive: Drive<'_>, steps: usize) -> Result<Trace> {
    net.check_state(init)?;
    match drive {
        Drive::Open(data) | Drive::Mixed { data, .. } if data.len() < steps => {
            return Err(Error::InvalidArgument(format!(
                "missing input: {steps} open-loop steps need {steps} frames, got {}",
                data.len()
            )));
        }
        Drive::Mixed { closed, .. } if closed.len() + 1 < steps => {
            return Err(Error::InvalidArgument("mixed rollout needs closed-loop outputs for every step".into()));
        }
        _ => {}
    }
    let mut states = Vec::with_capacity(steps + 1);
    let mut inputs = Vec::with_capacity(steps);
    let mut outputs: Vec<Frame> = Vec::with_capacity(steps);
    states.push(init.clone());
    for s in 0..steps {
        let input = match drive {
            Drive::Open(data) => data[s].clone(),
            Drive::Closed { seed } => {
                if s == 0 {
                    seed.clone()
                } else {
                    outputs[s - 1].clone()
                }
            }
            Drive::Mixed { data, closed, alpha } => {
                if s == 0 {
                    data[0].clone()
                } else {
                    mix_input(&data[s], &closed[s - 1], alpha)
                }
            }
        };
        net.check_frame(&input)?;
        let (next, out) = net.step(&states[s], weights, &input);
        if !out.is_finite() || !next.is_finite() {
            return Err(Error::Numerical(format!("non-finite activity at rollout step {s}")));
        }
        states.push(next);
        inputs.push(input);
        outputs.push(out);
    }
    Ok(Trace { states, inputs, outputs })
}

/// How a trace's inputs depend on its own outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feedback {
    /// Inputs are external; their gradients are returned.
    External,
    /// Input `s >= 1` is output `s - 1`.
    ClosedLoop,
}

/// Reverse pass over a trace.
///
/// `d_outputs[s]` is the loss gradient w.r.t. output `s` (missing entries are
/// zero). Returns the gradient w.r.t. the initial internal state and w.r.t.
/// every input frame. Weight gradients accumulate into `grads` if given.
pub fn backprop(
    net: &Network,
    weights: &Weights,
    trace: &Trace,
    d_outputs: &[Option<Frame>],
    feedback: Feedback,
    mut grads: Option<&mut Weights>,
) -> (StateGrad, Vec<Frame>) {
    let n = trace.len();
    let mut d_state = StateGrad::zeros(net.plan());
    let mut d_inputs = vec![net.zero_frame(); n];
    let mut carry: Option<Frame> = None;
    for s in (0..n).rev() {
        let d_out = match (d_outputs.get(s).and_then(|d| d.as_ref()), carry.take()) {
            (Some(d), Some(mut c)) => {
                c.add_scaled(d, 1.0);
                Some(c)
            }
            (Some(d), None) => Some(d.clone()),
            (None, c) => c,
        };
        let (prev_grad, d_in) = net.step_backward(
            weights,
            &trace.states[s],
            &trace.states[s + 1],
            &trace.inputs[s],
            &trace.outputs[s],
            d_out.as_ref(),
            &d_state,
            grads.as_deref_mut(),
        );
        d_state = prev_grad;
        if feedback == Feedback::ClosedLoop && s > 0 {
            carry = Some(d_in.clone());
        }
        d_inputs[s] = d_in;
    }
    (d_state, d_inputs)
}

/// Loss gradient `dE/dO_s` of the mean per-pixel squared error.
pub fn loss_gradients(outputs: &[Frame], targets: &[Frame]) -> Vec<Option<Frame>> {
    let steps = outputs.len().max(1) as f64;
    outputs
        .iter()
        .zip(targets)
        .map(|(o, t)| {
            let scale = 2.0 / (o.len() as f64 * steps);
            let data = o.as_slice().iter().zip(t.as_slice()).map(|(a, b)| scale * (a - b)).collect();
            Some(MapStack::from_vec(1, o.height(), o.width(), data).expect("same shape"))
        })
        .collect()
}

/// Gradients and errors of one training sequence.
#[derive(Debug, Clone)]
pub struct SequenceGrad {
    pub weights: Weights,
    pub initial_state: StateGrad,
    /// Loss of the mixed (trained) rollout.
    pub loss: f64,
    /// Error of the closed-loop rollout against the same targets.
    pub closed_mse: f64,
}

fn scored_steps(seq: &FrameSequence, lookahead: usize) -> Result<usize> {
    if seq.len() <= lookahead {
        return Err(Error::InvalidArgument(format!(
            "sequence of {} frames is too short for lookahead {lookahead}",
            seq.len()
        )));
    }
    Ok(seq.len() - lookahead)
}

/// Closed-loop then mixed rollouts of one sequence (no gradients).
pub fn sequence_traces(
    net: &Network,
    weights: &Weights,
    init: &NetworkState,
    seq: &FrameSequence,
    spec: &TrainSpec,
) -> Result<(Trace, Trace)> {
    let steps = scored_steps(seq, spec.lookahead)?;
    let frames = seq.frames();
    let closed = rollout(net, weights, init, Drive::Closed { seed: &frames[0] }, steps)?;
    let mixed = rollout(
        net,
        weights,
        init,
        Drive::Mixed { data: &frames[..steps], closed: &closed.outputs, alpha: spec.alpha },
        steps,
    )?;
    Ok((closed, mixed))
}

/// Training loss of one sequence (the quantity [`bptt`] differentiates).
pub fn sequence_loss(net: &Network, weights: &Weights, init: &NetworkState, seq: &FrameSequence, spec: &TrainSpec) -> Result<f64> {
    let (_, mixed) = sequence_traces(net, weights, init, seq, spec)?;
    let steps = mixed.len();
    Ok(compute_loss(&mixed.outputs, &seq.frames()[spec.lookahead..spec.lookahead + steps])?.0)
}

/// Exact gradient of the training loss of one sequence.
pub fn bptt(net: &Network, weights: &Weights, init: &NetworkState, seq: &FrameSequence, spec: &TrainSpec) -> Result<SequenceGrad> {
    let (closed, mixed) = sequence_traces(net, weights, init, seq, spec)?;
    let steps = mixed.len();
    let targets = &seq.frames()[spec.lookahead..spec.lookahead + steps];
    let (loss, _) = compute_loss(&mixed.outputs, targets)?;
    let (closed_mse, _) = compute_loss(&closed.outputs, targets)?;

    let mut grads = Weights::zeros(net.plan());
    let d_out = loss_gradients(&mixed.outputs, targets);
    let (mut d_init, d_inputs) = backprop(net, weights, &mixed, &d_out, Feedback::External, Some(&mut grads));

    if spec.closed_branch == ClosedBranch::Differentiated && spec.alpha < 1.0 {
        // mixed input s >= 1 holds (1 - alpha) * O^closed_{s-1}
        let mut d_closed: Vec<Option<Frame>> = vec![None; closed.len()];
        for s in 1..steps {
            let mut g = d_inputs[s].clone();
            g.scale(1.0 - spec.alpha);
            d_closed[s - 1] = Some(g);
        }
        let (d_init_closed, _) = backprop(net, weights, &closed, &d_closed, Feedback::ClosedLoop, Some(&mut grads));
        d_init.add(&d_init_closed);
    }
    if !grads.is_finite() || d_init.tensors().iter().any(|m| !m.is_finite()) {
        return Err(Error::Numerical(format!("non-finite gradient (loss {loss:e})")));
    }
    Ok(SequenceGrad { weights: grads, initial_state: d_init, loss, closed_mse })
}

/// Gradient descent on the internal values of a state.
pub fn descend_state(state: &mut NetworkState, grad: &StateGrad, rate: f64) {
    for (m, g) in state.internals_mut().into_iter().zip(grad.tensors()) {
        m.add_scaled(g, -rate);
    }
    state.refresh_activations();
}

/// Errors measured during one epoch, before its update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    /// Mean loss of the mixed (mostly data-driven) rollouts.
    pub open_mse: f64,
    pub closed_mse: f64,
}

/// First and second moment estimates of one parameter group.
#[derive(Debug, Clone, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Running state of the [`Optimizer`] across epochs; empty for gradient descent.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    steps: i32,
    weights: Moments,
    states: Vec<Moments>,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One Adam step over `values` in place.
fn adam_step<'a>(
    values: impl Iterator<Item = &'a mut f64>,
    grads: impl Iterator<Item = f64>,
    moments: &mut Moments,
    rate: f64,
    (beta1, beta2, epsilon): (f64, f64, f64),
    step: i32,
) {
    let (c1, c2) = (1.0 - beta1.powi(step), 1.0 - beta2.powi(step));
    for (i, (x, g)) in values.zip(grads).enumerate() {
        if moments.m.len() <= i {
            moments.m.push(0.0);
            moments.v.push(0.0);
        }
        let (m, v) = (&mut moments.m[i], &mut moments.v[i]);
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        *x -= rate * (*m / c1) / ((*v / c2).sqrt() + epsilon);
    }
}

/// One epoch of full-sequence gradient descent over `dataset`.
///
/// Weight gradients are summed over sequences in index order; each initial
/// state moves by its own sequence's gradient.
pub fn train_epoch(net: &Network, params: &mut ParamSet, dataset: &[FrameSequence], spec: &TrainSpec) -> Result<EpochStats> {
    train_epoch_with(net, params, dataset, spec, &mut OptimizerState::new())
}

/// [`train_epoch`] carrying optimizer state between epochs.
pub fn train_epoch_with(
    net: &Network,
    params: &mut ParamSet,
    dataset: &[FrameSequence],
    spec: &TrainSpec,
    opt: &mut OptimizerState,
) -> Result<EpochStats> {
    if params.initial_states.len() != dataset.len() {
        return Err(Error::InvalidArgument(format!(
            "{} initial states for {} sequences",
            params.initial_states.len(),
            dataset.len()
        )));
    }
    let mut total = Weights::zeros(net.plan());
    let mut state_grads = Vec::with_capacity(dataset.len());
    let (mut open, mut closed) = (0.0, 0.0);
    for (seq, init) in dataset.iter().zip(&params.initial_states) {
        let g = bptt(net, &params.weights, init, seq, spec)?;
        total.add_scaled(&g.weights, 1.0);
        open += g.loss;
        closed += g.closed_mse;
        state_grads.push(g.initial_state);
    }
    if let Some(limit) = spec.max_grad_norm {
        let norm = total.norm();
        if norm > limit {
            total.scale(limit / norm);
        }
    }
    let (rate, state_rate) = (spec.learning_rate, spec.state_rate());
    match spec.optimizer {
        Optimizer::GradientDescent => {
            if rate != 0.0 {
                params.weights.add_scaled(&total, -rate);
            }
            if state_rate != 0.0 {
                for (state, g) in params.initial_states.iter_mut().zip(&state_grads) {
                    descend_state(state, g, state_rate);
                }
            }
        }
        Optimizer::Adam { beta1, beta2, epsilon } => {
            let betas = (beta1, beta2, epsilon);
            opt.steps += 1;
            opt.states.resize_with(dataset.len(), Moments::default);
            let grads: Vec<f64> = total.tensors().iter().flat_map(|t| t.data.iter().copied()).collect();
            let mut values = params.weights.tensors_mut();
            adam_step(values.iter_mut().flat_map(|t| t.data.iter_mut()), grads.into_iter(), &mut opt.weights, rate, betas, opt.steps);
            for ((state, g), moments) in params.initial_states.iter_mut().zip(&state_grads).zip(&mut opt.states) {
                let grads: Vec<f64> = g.tensors().iter().flat_map(|m| m.as_slice().iter().copied()).collect();
                adam_step(
                    state.internals_mut().into_iter().flat_map(|m| m.as_mut_slice().iter_mut()),
                    grads.into_iter(),
                    moments,
                    state_rate,
                    betas,
                    opt.steps,
                );
                state.refresh_activations();
            }
        }
    }
    if !params.weights.is_finite() {
        return Err(Error::Numerical("parameters became non-finite".into()));
    }
    let n = dataset.len().max(1) as f64;
    Ok(EpochStats { open_mse: open / n, closed_mse: closed / n })
}

/// Errors of one epoch in a training history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub open_mse: f64,
    pub closed_mse: f64,
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamSet,
    pub history: Vec<EpochRecord>,
    /// Epoch after which the closed-loop error fell below the threshold.
    pub terminated_at: Option<usize>,
    /// Set when the closed-loop error stayed above 10x its initial value for 50 epochs.
    pub diverged: bool,
}

/// Runs epochs until the threshold or `epochs_max`.
///
/// `on_epoch` sees every completed epoch (1-based) with the updated
/// parameters and decides nothing; checkpointing is done by the caller
/// from there.
pub fn train(
    net: &Network,
    mut params: ParamSet,
    dataset: &[FrameSequence],
    spec: &TrainSpec,
    mut on_epoch: impl FnMut(&EpochRecord, &ParamSet, &[EpochRecord], bool) -> Result<()>,
) -> Result<TrainOutcome> {
    spec.validate()?;
    let mut history = Vec::new();
    let mut terminated_at = None;
    let mut diverged = false;
    let mut above = 0usize;
    let mut opt = OptimizerState::new();
    for epoch in 1..=spec.epochs_max {
        let stats = train_epoch_with(net, &mut params, dataset, spec, &mut opt)?;
        let rec = EpochRecord { epoch, open_mse: stats.open_mse, closed_mse: stats.closed_mse };
        history.push(rec);
        let initial = history[0].closed_mse;
        if stats.closed_mse > 10.0 * initial {
            above += 1;
            if above >= 50 && !diverged {
                diverged = true;
                eprintln!("warning: closed-loop error above 10x its initial value for 50 epochs (epoch {epoch})");
            }
        } else {
            above = 0;
        }
        let done = stats.closed_mse < spec.closed_loop_error_threshold || epoch == spec.epochs_max;
        on_epoch(&rec, &params, &history, done)?;
        if stats.closed_mse < spec.closed_loop_error_threshold {
            terminated_at = Some(epoch);
            break;
        }
    }
    Ok(TrainOutcome { params, history, terminated_at, diverged })
}
