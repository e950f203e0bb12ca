//! Parameters, state, and the single-step forward/backward dynamics.
//!
//! One step maps the state at `t-1` and an input frame to the state at `t`:
//!
//! ```text
//! fh'  = (1 - 1/tau) fh + (1/tau) (conv(f_above, k_ff) + conv(c, k_cf) + [l=1] conv(I, k_if) + b_f)
//! ch'  = (1 - 1/tau) ch + (1/tau) (sum c (.) W_cc + sum f_above (.) W_fc + conv(f_below, k_fc) + b_c)
//! f'   = stanh(fh'),  c' = stanh(ch')
//! O    = stanh(conv(f'_1, k_fo) + b_o)
//! ```
//!
//! where `f_below` of layer 1 is the input frame and every right-hand side
//! except the output uses `t-1` quantities.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ConvPlan, NetworkConfig, ShapePlan};
use crate::error::{topology, Error, Result};
use crate::tensor::{
    conv_adjoint_input_acc, conv_adjoint_kernel_acc, conv_bank_acc, scaled_tanh, scaled_tanh_prime_from_output,
    weight_bank_acc, weight_bank_adjoint_input_acc, weight_bank_adjoint_weight_acc, Frame, KernelBank, MapStack,
    WeightBank,
};

/// Trainable weights of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub k_ff: Option<KernelBank>,
    pub k_cf: KernelBank,
    pub k_fc: KernelBank,
    pub w_cc: WeightBank,
    pub w_fc: Option<WeightBank>,
    pub fm_bias: Vec<f64>,
    pub cm_bias: Vec<f64>,
}

/// All connection weights and biases (everything but the initial states).
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub layers: Vec<LayerWeights>,
    pub k_if: KernelBank,
    pub k_fo: KernelBank,
    pub b_o: f64,
}

/// A named, flat view onto one tensor of a parameter set.
pub struct TensorRef<'a> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: &'a [f64],
}

pub struct TensorMut<'a> {
    pub name: String,
    pub data: &'a mut [f64],
}

fn bank(c: &ConvPlan) -> KernelBank {
    KernelBank::zeros(c.out_maps, c.in_maps, c.kernel.0, c.kernel.1)
}

impl Weights {
    /// All-zero weights shaped by `plan`.
    pub fn zeros(plan: &ShapePlan) -> Self {
        let layers = plan
            .layers
            .iter()
            .enumerate()
            .map(|(idx, lp)| {
                let above = plan.layers.get(idx + 1);
                LayerWeights {
                    k_ff: lp.k_ff.as_ref().map(bank),
                    k_cf: bank(&lp.k_cf),
                    k_fc: bank(&lp.k_fc),
                    w_cc: WeightBank::zeros(lp.cm_count, lp.cm_count, lp.cm_size.0, lp.cm_size.1),
                    w_fc: lp
                        .has_w_fc
                        .then(|| WeightBank::zeros(lp.cm_count, above.unwrap().fm_count, lp.cm_size.0, lp.cm_size.1)),
                    fm_bias: vec![0.0; lp.fm_count],
                    cm_bias: vec![0.0; lp.cm_count],
                }
            })
            .collect();
        Weights { layers, k_if: bank(&plan.k_if), k_fo: bank(&plan.k_fo), b_o: 0.0 }
    }

    /// Uniform `[-r, r]` weights with `r = scale / sqrt(fan_in)` of the receiving unit; zero biases.
    pub fn init(plan: &ShapePlan, init_scale: f64, seed: u64) -> Self {
        let mut w = Weights::zeros(plan);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |data: &mut [f64], fan_in: usize| {
            if fan_in == 0 || data.is_empty() {
                return;
            }
            let r = init_scale / (fan_in as f64).sqrt();
            if r == 0.0 {
                return;
            }
            let dist = Uniform::new_inclusive(-r, r);
            data.iter_mut().for_each(|v| *v = dist.sample(&mut rng));
        };
        for (idx, lp) in plan.layers.iter().enumerate() {
            let fm_fan = lp.k_ff.map_or(0, |c| c.in_maps * c.taps())
                + lp.k_cf.in_maps * lp.k_cf.taps()
                + if idx == 0 { plan.k_if.in_maps * plan.k_if.taps() } else { 0 };
            let above_fm = plan.layers.get(idx + 1).map_or(0, |a| if lp.has_w_fc { a.fm_count } else { 0 });
            let cm_fan = lp.cm_count + above_fm + lp.k_fc.in_maps * lp.k_fc.taps();
            let lw = &mut w.layers[idx];
            if let Some(k) = lw.k_ff.as_mut() {
                fill(k.as_mut_slice(), fm_fan);
            }
            fill(lw.k_cf.as_mut_slice(), fm_fan);
            if idx == 0 {
                fill(w.k_if.as_mut_slice(), fm_fan);
            }
            let lw = &mut w.layers[idx];
            fill(lw.w_cc.as_mut_slice(), cm_fan);
            if let Some(wf) = lw.w_fc.as_mut() {
                fill(wf.as_mut_slice(), cm_fan);
            }
            fill(lw.k_fc.as_mut_slice(), cm_fan);
        }
        fill(w.k_fo.as_mut_slice(), plan.k_fo.in_maps * plan.k_fo.taps());
        w
    }

    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = vec![
            TensorRef { name: "k_if".into(), dims: self.k_if.dims().to_vec(), data: self.k_if.as_slice() },
            TensorRef { name: "k_fo".into(), dims: self.k_fo.dims().to_vec(), data: self.k_fo.as_slice() },
            TensorRef { name: "b_o".into(), dims: vec![1], data: std::slice::from_ref(&self.b_o) },
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let n = i + 1;
            if let Some(k) = &l.k_ff {
                out.push(TensorRef { name: format!("l{n}.k_ff"), dims: k.dims().to_vec(), data: k.as_slice() });
            }
            out.push(TensorRef { name: format!("l{n}.k_cf"), dims: l.k_cf.dims().to_vec(), data: l.k_cf.as_slice() });
            out.push(TensorRef { name: format!("l{n}.k_fc"), dims: l.k_fc.dims().to_vec(), data: l.k_fc.as_slice() });
            out.push(TensorRef { name: format!("l{n}.w_cc"), dims: l.w_cc.dims().to_vec(), data: l.w_cc.as_slice() });
            if let Some(w) = &l.w_fc {
                out.push(TensorRef { name: format!("l{n}.w_fc"), dims: w.dims().to_vec(), data: w.as_slice() });
            }
            out.push(TensorRef { name: format!("l{n}.fm_bias"), dims: vec![l.fm_bias.len()], data: &l.fm_bias });
            out.push(TensorRef { name: format!("l{n}.cm_bias"), dims: vec![l.cm_bias.len()], data: &l.cm_bias });
        }
        out
    }

    /// Mutable views in the same order as [`Weights::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = vec![
            TensorMut { name: "k_if".into(), data: self.k_if.as_mut_slice() },
            TensorMut { name: "k_fo".into(), data: self.k_fo.as_mut_slice() },
            TensorMut { name: "b_o".into(), data: std::slice::from_mut(&mut self.b_o) },
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let n = i + 1;
            if let Some(k) = &mut l.k_ff {
                out.push(TensorMut { name: format!("l{n}.k_ff"), data: k.as_mut_slice() });
            }
            out.push(TensorMut { name: format!("l{n}.k_cf"), data: l.k_cf.as_mut_slice() });
            out.push(TensorMut { name: format!("l{n}.k_fc"), data: l.k_fc.as_mut_slice() });
            out.push(TensorMut { name: format!("l{n}.w_cc"), data: l.w_cc.as_mut_slice() });
            if let Some(w) = &mut l.w_fc {
                out.push(TensorMut { name: format!("l{n}.w_fc"), data: w.as_mut_slice() });
            }
            out.push(TensorMut { name: format!("l{n}.fm_bias"), data: &mut l.fm_bias });
            out.push(TensorMut { name: format!("l{n}.cm_bias"), data: &mut l.cm_bias });
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// `self += scale * other` over every tensor.
    pub fn add_scaled(&mut self, other: &Weights, scale: f64) {
        let src = other.tensors();
        for (dst, src) in self.tensors_mut().into_iter().zip(src) {
            for (a, b) in dst.data.iter_mut().zip(src.data) {
                *a += scale * b;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Euclidean norm over all parameters.
    pub fn norm(&self) -> f64 {
        self.tensors().iter().flat_map(|t| t.data.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            for v in t.data.iter_mut() {
                *v *= s;
            }
        }
    }

    /// Order-sensitive FNV-1a digest of the exact bit patterns.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.tensors() {
            for v in t.data {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}

/// Internal states and activations of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    pub fm_internal: MapStack,
    pub fm_act: MapStack,
    pub cm_internal: MapStack,
    pub cm_act: MapStack,
}

/// Every layer's state at one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    pub layers: Vec<LayerState>,
}

impl NetworkState {
    pub fn zeros(plan: &ShapePlan) -> Self {
        let layers = plan
            .layers
            .iter()
            .map(|lp| {
                let fm = MapStack::zeros(lp.fm_count, lp.fm_size.0, lp.fm_size.1);
                let cm = MapStack::zeros(lp.cm_count, lp.cm_size.0, lp.cm_size.1);
                LayerState { fm_internal: fm.clone(), fm_act: fm, cm_internal: cm.clone(), cm_act: cm }
            })
            .collect();
        NetworkState { layers }
    }

    /// Builds a state from internal values, deriving the activations.
    pub fn from_internals(fm: Vec<MapStack>, cm: Vec<MapStack>) -> Self {
        let layers = fm
            .into_iter()
            .zip(cm)
            .map(|(f, c)| LayerState { fm_act: f.activated(), fm_internal: f, cm_act: c.activated(), cm_internal: c })
            .collect();
        NetworkState { layers }
    }

    /// Recomputes activations after internals were edited in place.
    pub fn refresh_activations(&mut self) {
        for l in &mut self.layers {
            l.fm_act = l.fm_internal.activated();
            l.cm_act = l.cm_internal.activated();
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.fm_internal.is_finite() && l.cm_internal.is_finite())
    }

    /// Internal tensors in layer order, `(fm, cm)` per layer.
    pub fn internals(&self) -> Vec<&MapStack> {
        self.layers.iter().flat_map(|l| [&l.fm_internal, &l.cm_internal]).collect()
    }

    pub fn internals_mut(&mut self) -> Vec<&mut MapStack> {
        self.layers.iter_mut().flat_map(|l| [&mut l.fm_internal, &mut l.cm_internal]).collect()
    }

    pub fn matches(&self, plan: &ShapePlan) -> bool {
        self.layers.len() == plan.layers.len()
            && self.layers.iter().zip(&plan.layers).all(|(s, lp)| {
                s.fm_internal.dims() == (lp.fm_count, lp.fm_size.0, lp.fm_size.1)
                    && s.cm_internal.dims() == (lp.cm_count, lp.cm_size.0, lp.cm_size.1)
            })
    }
}

/// Gradient w.r.t. the internal states of a [`NetworkState`].
#[derive(Debug, Clone, PartialEq)]
pub struct StateGrad {
    pub fm: Vec<MapStack>,
    pub cm: Vec<MapStack>,
}

impl StateGrad {
    pub fn zeros(plan: &ShapePlan) -> Self {
        StateGrad {
            fm: plan.layers.iter().map(|l| MapStack::zeros(l.fm_count, l.fm_size.0, l.fm_size.1)).collect(),
            cm: plan.layers.iter().map(|l| MapStack::zeros(l.cm_count, l.cm_size.0, l.cm_size.1)).collect(),
        }
    }

    pub fn tensors(&self) -> Vec<&MapStack> {
        self.fm.iter().zip(&self.cm).flat_map(|(f, c)| [f, c]).collect()
    }

    pub fn add(&mut self, other: &StateGrad) {
        for (a, b) in self.fm.iter_mut().zip(&other.fm) {
            a.add_scaled(b, 1.0);
        }
        for (a, b) in self.cm.iter_mut().zip(&other.cm) {
            a.add_scaled(b, 1.0);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.tensors().iter().all(|m| m.as_slice().iter().all(|&v| v == 0.0))
    }
}

/// Trainable parameters: weights plus one initial state per training sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub weights: Weights,
    pub initial_states: Vec<NetworkState>,
}

/// A validated configuration together with its derived shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    config: NetworkConfig,
    plan: ShapePlan,
}

impl Network {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        let plan = crate::config::validate_config(&config)?;
        Ok(Network { config, plan })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn plan(&self) -> &ShapePlan {
        &self.plan
    }

    pub fn frame_size(&self) -> (usize, usize) {
        self.plan.input_size
    }

    pub fn zero_frame(&self) -> Frame {
        MapStack::zeros(1, self.plan.input_size.0, self.plan.input_size.1)
    }

    pub fn zero_state(&self) -> NetworkState {
        NetworkState::zeros(&self.plan)
    }

    /// Random weights and `num_sequences` all-zero initial states; deterministic in `seed`.
    pub fn init_params(&self, num_sequences: usize, seed: u64) -> ParamSet {
        ParamSet {
            weights: Weights::init(&self.plan, self.config.init_scale, seed),
            initial_states: vec![self.zero_state(); num_sequences],
        }
    }

    pub fn check_frame(&self, frame: &Frame) -> Result<()> {
        if frame.dims() != (1, self.plan.input_size.0, self.plan.input_size.1) {
            return topology(format!(
                "frame of shape {:?} does not match network input {:?}",
                frame.dims(),
                self.plan.input_size
            ));
        }
        Ok(())
    }

    pub fn check_state(&self, state: &NetworkState) -> Result<()> {
        if !state.matches(&self.plan) {
            return topology("state shape does not match the network");
        }
        Ok(())
    }

    /// Validated single step; see [`Network::step`].
    pub fn step_forward(&self, state: &NetworkState, weights: &Weights, input: &Frame) -> Result<(NetworkState, Frame)> {
        self.check_frame(input)?;
        self.check_state(state)?;
        let (next, out) = self.step(state, weights, input);
        if !next.is_finite() || !out.is_finite() {
            return Err(Error::Numerical("non-finite state after forward step".into()));
        }
        Ok((next, out))
    }

    /// One forward step; shapes are trusted.
    pub fn step(&self, state: &NetworkState, w: &Weights, input: &Frame) -> (NetworkState, Frame) {
        let plan = &self.plan;
        let n = plan.layers.len();
        let mut layers = Vec::with_capacity(n);
        for (idx, lp) in plan.layers.iter().enumerate() {
            let lw = &w.layers[idx];
            let prev = &state.layers[idx];
            let above = state.layers.get(idx + 1);
            let inv_tau = 1.0 / lp.tau;
            let decay = lp.decay();

            let mut drive = MapStack::zeros(lp.fm_count, lp.fm_size.0, lp.fm_size.1);
            if let (Some(k), Some(c), Some(up)) = (&lw.k_ff, &lp.k_ff, above) {
                conv_bank_acc(&up.fm_act, k, c.pad, &mut drive);
            }
            conv_bank_acc(&prev.cm_act, &lw.k_cf, lp.k_cf.pad, &mut drive);
            if idx == 0 {
                conv_bank_acc(input, &w.k_if, plan.k_if.pad, &mut drive);
            }
            let mut fm_internal = prev.fm_internal.clone();
            leak(&mut fm_internal, &drive, &lw.fm_bias, decay, inv_tau);

            let mut cdrive = MapStack::zeros(lp.cm_count, lp.cm_size.0, lp.cm_size.1);
            weight_bank_acc(&prev.cm_act, &lw.w_cc, &mut cdrive);
            if let (Some(wf), Some(up)) = (&lw.w_fc, above) {
                weight_bank_acc(&up.fm_act, wf, &mut cdrive);
            }
            let below = if idx == 0 { input } else { &state.layers[idx - 1].fm_act };
            conv_bank_acc(below, &lw.k_fc, lp.k_fc.pad, &mut cdrive);
            let mut cm_internal = prev.cm_internal.clone();
            leak(&mut cm_internal, &cdrive, &lw.cm_bias, decay, inv_tau);

            layers.push(LayerState {
                fm_act: fm_internal.activated(),
                fm_internal,
                cm_act: cm_internal.activated(),
                cm_internal,
            });
        }
        let mut out = self.zero_frame();
        conv_bank_acc(&layers[0].fm_act, &w.k_fo, plan.k_fo.pad, &mut out);
        out.as_mut_slice().iter_mut().for_each(|v| *v = scaled_tanh(*v + w.b_o));
        (NetworkState { layers }, out)
    }

    /// Reverse-mode step.
    ///
    /// Given `d_next` (loss gradient w.r.t. the internals of `next`) and `d_out`
    /// (w.r.t. the output frame of this step), returns the gradient w.r.t. the
    /// internals of `prev` and w.r.t. `input`. Weight gradients are accumulated
    /// into `grads` when provided.
    #[allow(clippy::too_many_arguments)]
    pub fn step_backward(
        &self,
        w: &Weights,
        prev: &NetworkState,
        next: &NetworkState,
        input: &Frame,
        output: &Frame,
        d_out: Option<&Frame>,
        d_next: &StateGrad,
        mut grads: Option<&mut Weights>,
    ) -> (StateGrad, Frame) {
        let plan = &self.plan;
        let n = plan.layers.len();

        // d internals at t
        let mut d_fh: Vec<MapStack> = d_next.fm.clone();
        let d_ch: &Vec<MapStack> = &d_next.cm;
        if let Some(d_out) = d_out {
            let mut d_pre = d_out.clone();
            for (g, &o) in d_pre.as_mut_slice().iter_mut().zip(output.as_slice()) {
                *g *= scaled_tanh_prime_from_output(o);
            }
            if let Some(g) = grads.as_deref_mut() {
                conv_adjoint_kernel_acc(&d_pre, &next.layers[0].fm_act, plan.k_fo.pad, &mut g.k_fo);
                g.b_o += d_pre.as_slice().iter().sum::<f64>();
            }
            let mut d_f1 = MapStack::zeros(plan.layers[0].fm_count, plan.layers[0].fm_size.0, plan.layers[0].fm_size.1);
            conv_adjoint_input_acc(&d_pre, &w.k_fo, plan.k_fo.pad, &mut d_f1);
            for ((d, g), &a) in d_fh[0].as_mut_slice().iter_mut().zip(d_f1.as_slice()).zip(next.layers[0].fm_act.as_slice()) {
                *d += g * scaled_tanh_prime_from_output(a);
            }
        }

        // gradients w.r.t. activations at t-1
        let mut d_f: Vec<MapStack> = plan.layers.iter().map(|l| MapStack::zeros(l.fm_count, l.fm_size.0, l.fm_size.1)).collect();
        let mut d_c: Vec<MapStack> = plan.layers.iter().map(|l| MapStack::zeros(l.cm_count, l.cm_size.0, l.cm_size.1)).collect();
        let mut d_input = self.zero_frame();

        for idx in 0..n {
            let lp = &plan.layers[idx];
            let lw = &w.layers[idx];
            let inv_tau = 1.0 / lp.tau;
            let mut d_drive = d_fh[idx].clone();
            d_drive.scale(inv_tau);
            let mut d_cdrive = d_ch[idx].clone();
            d_cdrive.scale(inv_tau);
            let prev_l = &prev.layers[idx];

            // feature-map drive
            if let (Some(k), Some(c)) = (&lw.k_ff, &lp.k_ff) {
                conv_adjoint_input_acc(&d_drive, k, c.pad, &mut d_f[idx + 1]);
            }
            conv_adjoint_input_acc(&d_drive, &lw.k_cf, lp.k_cf.pad, &mut d_c[idx]);
            if idx == 0 {
                conv_adjoint_input_acc(&d_drive, &w.k_if, plan.k_if.pad, &mut d_input);
            }

            // context-map drive
            weight_bank_adjoint_input_acc(&d_cdrive, &lw.w_cc, &mut d_c[idx]);
            if let Some(wf) = &lw.w_fc {
                weight_bank_adjoint_input_acc(&d_cdrive, wf, &mut d_f[idx + 1]);
            }
            if idx == 0 {
                conv_adjoint_input_acc(&d_cdrive, &lw.k_fc, lp.k_fc.pad, &mut d_input);
            } else {
                conv_adjoint_input_acc(&d_cdrive, &lw.k_fc, lp.k_fc.pad, &mut d_f[idx - 1]);
            }

            if let Some(g) = grads.as_deref_mut() {
                let gl = &mut g.layers[idx];
                if let (Some(gk), Some(c)) = (gl.k_ff.as_mut(), &lp.k_ff) {
                    conv_adjoint_kernel_acc(&d_drive, &prev.layers[idx + 1].fm_act, c.pad, gk);
                }
                conv_adjoint_kernel_acc(&d_drive, &prev_l.cm_act, lp.k_cf.pad, &mut gl.k_cf);
                let below = if idx == 0 { input } else { &prev.layers[idx - 1].fm_act };
                conv_adjoint_kernel_acc(&d_cdrive, below, lp.k_fc.pad, &mut gl.k_fc);
                weight_bank_adjoint_weight_acc(&d_cdrive, &prev_l.cm_act, &mut gl.w_cc);
                if let Some(gw) = gl.w_fc.as_mut() {
                    weight_bank_adjoint_weight_acc(&d_cdrive, &prev.layers[idx + 1].fm_act, gw);
                }
                for (p, b) in gl.fm_bias.iter_mut().enumerate() {
                    *b += d_drive.map(p).iter().sum::<f64>();
                }
                for (m, b) in gl.cm_bias.iter_mut().enumerate() {
                    *b += d_cdrive.map(m).iter().sum::<f64>();
                }
                if idx == 0 {
                    conv_adjoint_kernel_acc(&d_drive, input, plan.k_if.pad, &mut g.k_if);
                }
            }
        }

        // back to internals at t-1
        let mut out = StateGrad { fm: Vec::with_capacity(n), cm: Vec::with_capacity(n) };
        for (idx, lp) in plan.layers.iter().enumerate() {
            let decay = lp.decay();
            let prev_l = &prev.layers[idx];
            let mut gf = std::mem::replace(&mut d_f[idx], MapStack::zeros(0, 1, 1));
            for ((g, &a), &d) in gf.as_mut_slice().iter_mut().zip(prev_l.fm_act.as_slice()).zip(d_fh[idx].as_slice()) {
                *g = *g * scaled_tanh_prime_from_output(a) + decay * d;
            }
            let mut gc = std::mem::replace(&mut d_c[idx], MapStack::zeros(0, 1, 1));
            for ((g, &a), &d) in gc.as_mut_slice().iter_mut().zip(prev_l.cm_act.as_slice()).zip(d_ch[idx].as_slice()) {
                *g = *g * scaled_tanh_prime_from_output(a) + decay * d;
            }
            out.fm.push(gf);
            out.cm.push(gc);
        }
        (out, d_input)
    }
}

/// `internal = decay * internal + inv_tau * (drive + bias)`, bias broadcast per map.
fn leak(internal: &mut MapStack, drive: &MapStack, bias: &[f64], decay: f64, inv_tau: f64) {
    for (p, &b) in bias.iter().enumerate() {
        for (s, &d) in internal.map_mut(p).iter_mut().zip(drive.map(p)) {
            *s = decay * *s + inv_tau * (d + b);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::TANH_AMPLITUDE;
    use rand::Rng;

    fn toy() -> Network {
        Network::new(NetworkConfig::toy()).unwrap()
    }

    fn random_frame(net: &Network, rng: &mut ChaCha8Rng) -> Frame {
        let (h, w) = net.frame_size();
        MapStack::from_vec(1, h, w, (0..h * w).map(|_| if rng.gen_bool(0.3) { 1.0 } else { -1.0 }).collect()).unwrap()
    }

    #[test]
    fn zero_params_give_zero_output() {
        let net = toy();
        let w = Weights::zeros(net.plan());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (s, out) = net.step_forward(&net.zero_state(), &w, &random_frame(&net, &mut rng)).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(s, net.zero_state());
    }

    #[test]
    fn zero_weights_halve_internal_state_at_tau_two() {
        let cfg = NetworkConfig::toy().with_doubling_taus(2.0);
        let mut cfg = cfg;
        for l in &mut cfg.layers {
            l.tau = 2.0;
        }
        let net = Network::new(cfg).unwrap();
        let w = Weights::zeros(net.plan());
        let mut state = net.zero_state();
        for m in state.internals_mut() {
            m.fill(0.8);
        }
        state.refresh_activations();
        let frame = net.zero_frame();
        let (next, _) = net.step_forward(&state, &w, &frame).unwrap();
        for m in next.internals() {
            assert!(m.as_slice().iter().all(|&v| v == 0.4));
        }
    }

    #[test]
    fn tau_one_has_no_memory() {
        let mut cfg = NetworkConfig::toy();
        for l in &mut cfg.layers {
            l.tau = 1.0;
        }
        let net = Network::new(cfg).unwrap();
        let params = net.init_params(1, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut a = net.zero_state();
        for m in a.internals_mut() {
            m.as_mut_slice().iter_mut().for_each(|v| *v = rng.gen_range(-2.0..2.0));
        }
        a.refresh_activations();
        // same activations, different internals
        let mut b = a.clone();
        for l in &mut b.layers {
            l.fm_internal.as_mut_slice().iter_mut().for_each(|v| *v += 5.0);
            l.cm_internal.as_mut_slice().iter_mut().for_each(|v| *v -= 3.0);
        }
        let frame = random_frame(&net, &mut rng);
        let (na, oa) = net.step(&a, &params.weights, &frame);
        let (nb, ob) = net.step(&b, &params.weights, &frame);
        assert_eq!(na, nb);
        assert_eq!(oa, ob);
    }

    #[test]
    fn init_is_deterministic_and_seed_dependent() {
        let net = toy();
        let a = net.init_params(2, 42);
        let b = net.init_params(2, 42);
        let c = net.init_params(2, 43);
        assert_eq!(a, b);
        assert_eq!(a.weights.fingerprint(), b.weights.fingerprint());
        assert_ne!(a.weights, c.weights);
        assert!(a.weights.layers.iter().all(|l| l.fm_bias.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn init_bound_follows_fan_in() {
        // a single-FM layer driven by k_if only: r = 1/sqrt(in_maps * taps)
        let plan = validate_config_for_test();
        let w = Weights::init(&plan, 1.0, 9);
        let fan_in = plan.k_if.in_maps * plan.k_if.taps()
            + plan.layers[0].k_cf.in_maps * plan.layers[0].k_cf.taps()
            + plan.layers[0].k_ff.map_or(0, |c| c.in_maps * c.taps());
        let r = 1.0 / (fan_in as f64).sqrt();
        assert!(w.k_if.as_slice().iter().all(|v| v.abs() <= r));
        // doubling the number of inputs halves r^2
        assert!(((1.0 / (2 * fan_in) as f64) - r * r / 2.0).abs() < 1e-15);
    }

    fn validate_config_for_test() -> ShapePlan {
        crate::config::validate_config(&NetworkConfig::toy()).unwrap()
    }

    #[test]
    fn activations_stay_bounded_over_long_random_runs() {
        let net = toy();
        let params = net.init_params(1, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut state = net.zero_state();
        for _ in 0..10_000 {
            let frame = random_frame(&net, &mut rng);
            let (next, out) = net.step(&state, &params.weights, &frame);
            state = next;
            assert!(out.max_abs() <= TANH_AMPLITUDE);
            assert!(state.is_finite());
        }
        for l in &state.layers {
            assert!(l.fm_act.max_abs() <= TANH_AMPLITUDE && l.cm_act.max_abs() <= TANH_AMPLITUDE);
        }
    }

    #[test]
    fn slower_layers_change_less() {
        // mean per-step |delta internal| decreases upward, over most seeds
        let net = toy();
        let mut passes = 0;
        let seeds = 10;
        for seed in 0..seeds {
            let params = net.init_params(1, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let mut state = net.zero_state();
            let mut change = vec![0.0; net.plan().num_layers()];
            for t in 0..600 {
                let frame = random_frame(&net, &mut rng);
                let (next, _) = net.step(&state, &params.weights, &frame);
                if t >= 100 {
                    for (l, c) in change.iter_mut().enumerate() {
                        let a = &state.layers[l];
                        let b = &next.layers[l];
                        let diff: f64 = a.fm_internal.as_slice().iter().zip(b.fm_internal.as_slice()).map(|(x, y)| (x - y).abs()).sum::<f64>()
                            + a.cm_internal.as_slice().iter().zip(b.cm_internal.as_slice()).map(|(x, y)| (x - y).abs()).sum::<f64>();
                        *c += diff / (a.fm_internal.len() + a.cm_internal.len()) as f64;
                    }
                }
                state = next;
            }
            if change.windows(2).all(|w| w[0] >= w[1]) {
                passes += 1;
            }
        }
        assert!(passes as f64 >= 0.9 * seeds as f64, "{passes}/{seeds}");
    }

    #[test]
    fn forward_rejects_bad_shapes() {
        let net = toy();
        let w = Weights::zeros(net.plan());
        let bad = MapStack::zeros(1, 15, 16);
        assert!(net.step_forward(&net.zero_state(), &w, &bad).is_err());
        let other = Network::new(NetworkConfig::full_scale()).unwrap();
        assert!(net.step_forward(&other.zero_state(), &w, &net.zero_frame()).is_err());
    }
}
