//! Online predictive imitation.
//!
//! Error regression keeps the last `window` received frames and the latent
//! state at the window onset. For every new frame it regenerates the window
//! in closed loop from the onset state (the first step consumes the onset
//! frame), scores output `k` against window frame `k + lookahead`, and moves
//! only the onset state down the gradient of that error. Weights stay fixed.
//! The prediction for the newest frame is the last output of the rollout.
//!
//! Entrainment is the baseline: one open-loop step per received frame.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::learner::{backprop, compute_loss, descend_state, frame_mse, loss_gradients, rollout, Drive, Feedback, Trace};
use crate::network::{Network, NetworkState, Weights};
use crate::sequence::FrameSequence;
use crate::tensor::Frame;

fn default_window() -> usize {
    20
}
fn default_iterations() -> usize {
    100
}
fn default_rate() -> f64 {
    0.1
}
fn default_lookahead() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionConfig {
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_iterations")]
    pub iterations_per_step: usize,
    /// Step size on the gradient of the window's summed squared error.
    #[serde(default = "default_rate")]
    pub adaptation_rate: f64,
    /// Optimisation stops once the window error falls below this.
    pub threshold: f64,
    #[serde(default = "default_lookahead")]
    pub lookahead: usize,
    /// Extra closed-loop steps appended to each prediction rollout.
    #[serde(default)]
    pub horizon: usize,
}

impl RegressionConfig {
    pub fn new(threshold: f64) -> Self {
        RegressionConfig {
            window: default_window(),
            iterations_per_step: default_iterations(),
            adaptation_rate: default_rate(),
            threshold,
            lookahead: default_lookahead(),
            horizon: 0,
        }
    }

    /// Defaults with the threshold at half the checkpoint's closed-loop training error.
    pub fn for_checkpoint(ckpt: &Checkpoint) -> Self {
        Self::new(0.5 * ckpt.closed_mse)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::InvalidArgument("window must hold at least one frame".into()));
        }
        if self.iterations_per_step == 0 {
            return Err(Error::InvalidArgument("at least one iteration per step is required".into()));
        }
        if !(self.adaptation_rate.is_finite() && self.adaptation_rate > 0.0) {
            return Err(Error::InvalidArgument("adaptation rate must be positive".into()));
        }
        if self.lookahead == 0 {
            return Err(Error::InvalidArgument("lookahead must be at least 1".into()));
        }
        if self.threshold.is_nan() {
            return Err(Error::InvalidArgument("threshold is NaN".into()));
        }
        Ok(())
    }
}

/// Sliding window of received frames and the latent state at its onset.
#[derive(Debug, Clone)]
pub struct RegressionWindow {
    frames: Vec<Frame>,
    onset: NetworkState,
    capacity: usize,
    received: usize,
}

impl RegressionWindow {
    pub fn new(onset: NetworkState, capacity: usize) -> Self {
        RegressionWindow { frames: Vec::with_capacity(capacity), onset, capacity, received: 0 }
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }
    pub fn onset(&self) -> &NetworkState {
        &self.onset
    }
    /// Frames received so far.
    pub fn received(&self) -> usize {
        self.received
    }

    /// Closed-loop regeneration of the window from the onset state.
    pub fn regenerate(&self, net: &Network, weights: &Weights, extra: usize) -> Result<Trace> {
        let seed = self.frames.first().ok_or_else(|| Error::InvalidArgument("window holds no frames".into()))?;
        rollout(net, weights, &self.onset, Drive::Closed { seed }, self.frames.len() + extra)
    }

    /// Error of the regenerated window: output `k` against frame `k + lookahead`.
    fn window_error(&self, trace: &Trace, lookahead: usize) -> Result<(f64, usize)> {
        let scored = self.frames.len().saturating_sub(lookahead);
        if scored == 0 {
            return Ok((0.0, 0));
        }
        let (e, _) = compute_loss(&trace.outputs[..scored], &self.frames[lookahead..lookahead + scored])?;
        Ok((e, scored))
    }
}

/// Outcome of one error-regression step.
#[derive(Debug, Clone)]
pub struct ErStep {
    /// Last output of the optimised window rollout, predicting `lookahead` steps past the newest frame.
    pub prediction: Frame,
    /// Further closed-loop outputs when `horizon > 0`.
    pub lookahead_frames: Vec<Frame>,
    /// Window error after optimisation.
    pub window_mse: f64,
    /// Window error before the first update.
    pub window_mse_initial: f64,
    pub iterations_used: usize,
    /// Window error at every evaluation, in order.
    pub errors: Vec<f64>,
}

/// Receives `frame` and re-optimises the onset state (Table-1 style loop).
pub fn er_step(
    net: &Network,
    weights: &Weights,
    window: &mut RegressionWindow,
    frame: Frame,
    cfg: &RegressionConfig,
) -> Result<ErStep> {
    net.check_frame(&frame)?;
    if window.frames.len() == window.capacity {
        // the state one step past the onset becomes the new onset
        let (next, _) = net.step(&window.onset, weights, &window.frames[0]);
        window.onset = next;
        window.frames.remove(0);
    }
    window.frames.push(frame);
    window.received += 1;

    let mut errors = Vec::new();
    let mut updates = 0;
    loop {
        let trace = window.regenerate(net, weights, cfg.horizon)?;
        let (e, scored) = window.window_error(&trace, cfg.lookahead)?;
        if !e.is_finite() {
            return Err(Error::Numerical(format!(
                "window error became {e} after {updates} updates at frame {}",
                window.received
            )));
        }
        errors.push(e);
        if scored == 0 || e < cfg.threshold || updates == cfg.iterations_per_step {
            let n = window.frames.len();
            return Ok(ErStep {
                prediction: trace.outputs[n - 1].clone(),
                lookahead_frames: trace.outputs[n..].to_vec(),
                window_mse: e,
                window_mse_initial: errors[0],
                iterations_used: updates,
                errors,
            });
        }
        let targets = &window.frames[cfg.lookahead..cfg.lookahead + scored];
        let mut d_out = loss_gradients(&trace.outputs[..scored], targets);
        d_out.resize(trace.len(), None);
        let (d_onset, _) = backprop(net, weights, &trace, &d_out, Feedback::ClosedLoop, None);
        // d_out is for the mean error; the rate applies to the summed one
        let terms = (scored * window.frames[0].len()) as f64;
        descend_state(&mut window.onset, &d_onset, cfg.adaptation_rate * terms);
        if !window.onset.is_finite() {
            return Err(Error::Numerical(format!("onset state diverged at frame {}", window.received)));
        }
        updates += 1;
    }
}

/// One open-loop step driven by the received frame.
pub fn entrain_step(net: &Network, weights: &Weights, state: &NetworkState, frame: &Frame) -> Result<(Frame, NetworkState)> {
    let (next, out) = net.step_forward(state, weights, frame)?;
    Ok((out, next))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImitationMode {
    ErrorRegression,
    Entrainment,
}

impl std::str::FromStr for ImitationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "er" | "error_regression" => Ok(ImitationMode::ErrorRegression),
            "entrain" | "entrainment" => Ok(ImitationMode::Entrainment),
            _ => Err(Error::InvalidArgument(format!("unknown imitation mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImitationStep {
    pub step: usize,
    /// Zero in entrainment mode.
    pub window_mse: f64,
    pub window_mse_initial: f64,
    /// Error against target frame `step + lookahead`, when that frame exists.
    pub prediction_mse: Option<f64>,
    pub iterations_used: usize,
}

#[derive(Debug, Clone)]
pub struct ImitationReport {
    pub mode: ImitationMode,
    pub steps: Vec<ImitationStep>,
    pub predictions: FrameSequence,
    /// Mean of the defined per-step prediction errors.
    pub mean_mse: f64,
}

impl ImitationReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,window_mse,prediction_mse,iterations_used,window_mse_initial\n");
        for r in &self.steps {
            let pm = r.prediction_mse.map(|v| v.to_string()).unwrap_or_default();
            s.push_str(&format!("{},{},{},{},{}\n", r.step, r.window_mse, pm, r.iterations_used, r.window_mse_initial));
        }
        s
    }
}

/// Streams `target` through the network one frame per step.
pub fn run_imitation(
    target: &FrameSequence,
    ckpt: &Checkpoint,
    mode: ImitationMode,
    cfg: &RegressionConfig,
) -> Result<ImitationReport> {
    cfg.validate()?;
    if target.is_empty() {
        return Err(Error::InvalidArgument("target sequence is empty".into()));
    }
    let net = ckpt.network()?;
    if net.frame_size() != target.size() {
        return Err(Error::Topology(format!(
            "target frames are {:?}, checkpoint expects {:?}",
            target.size(),
            net.frame_size()
        )));
    }
    let weights = &ckpt.params.weights;
    let fingerprint = weights.fingerprint();
    let init = ckpt.mean_initial_state()?;
    let (h, w) = net.frame_size();
    let mut predictions = FrameSequence::new(h, w);
    let mut steps = Vec::with_capacity(target.len());
    let mut window = RegressionWindow::new(init.clone(), cfg.window);
    let mut state = init;
    for (t, frame) in target.frames().iter().enumerate() {
        let (prediction, window_mse, window_mse_initial, iterations_used) = match mode {
            ImitationMode::ErrorRegression => {
                let r = er_step(&net, weights, &mut window, frame.clone(), cfg)?;
                (r.prediction, r.window_mse, r.window_mse_initial, r.iterations_used)
            }
            ImitationMode::Entrainment => {
                let (out, next) = entrain_step(&net, weights, &state, frame)?;
                state = next;
                (out, 0.0, 0.0, 0)
            }
        };
        let prediction_mse = target.frames().get(t + cfg.lookahead).map(|f| frame_mse(&prediction, f));
        steps.push(ImitationStep { step: t, window_mse, window_mse_initial, prediction_mse, iterations_used });
        predictions.push(prediction)?;
    }
    if weights.fingerprint() != fingerprint {
        return Err(Error::Numerical("weights changed during imitation".into()));
    }
    let scored: Vec<f64> = steps.iter().filter_map(|s| s.prediction_mse).collect();
    let mean_mse = if scored.is_empty() { 0.0 } else { scored.iter().sum::<f64>() / scored.len() as f64 };
    Ok(ImitationReport { mode, steps, predictions, mean_mse })
}
