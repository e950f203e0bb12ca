//! Central finite-difference verification of [`bptt`].
//!
//! Each parameter tensor contributes a sample of entries; the error of a
//! class is `|g - n| / max(|g|, |n|)` over the sampled sub-vector, where `g`
//! is the analytic and `n` the numerical gradient.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::NetworkConfig;
use crate::error::Result;
use crate::learner::{bptt, sequence_loss, TrainSpec};
use crate::network::{Network, NetworkState, Weights};
use crate::sequence::FrameSequence;
use crate::tensor::MapStack;

/// Options of a gradient check run.
#[derive(Debug, Clone)]
pub struct GradCheckSpec {
    pub seed: u64,
    /// Scored steps; the sequence holds `steps + lookahead` frames.
    pub steps: usize,
    /// Entries sampled per tensor.
    pub samples_per_tensor: usize,
    pub step_size: f64,
    pub tolerance: f64,
    pub train: TrainSpec,
}

impl Default for GradCheckSpec {
    fn default() -> Self {
        GradCheckSpec {
            seed: 0,
            steps: 10,
            samples_per_tensor: 8,
            step_size: 1e-5,
            tolerance: 1e-4,
            train: TrainSpec::new(0.0, 0, 0.0),
        }
    }
}

/// Agreement of one parameter class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassResult {
    /// `k_ff`, `k_cf`, ..., `initial_fm`, `initial_cm`.
    pub class: String,
    pub entries: usize,
    pub rel_error: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub classes: Vec<ClassResult>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.classes.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.classes.iter().all(|c| c.rel_error < self.tolerance)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,entries,rel_error,grad_norm\n");
        for c in &self.classes {
            s.push_str(&format!("{},{},{:e},{:e}\n", c.class, c.entries, c.rel_error, c.grad_norm));
        }
        s
    }
}

#[derive(Default)]
struct Accum {
    diff: f64,
    analytic: f64,
    numeric: f64,
    entries: usize,
}

fn class_of(name: &str) -> String {
    name.rsplit('.').next().unwrap_or(name).to_string()
}

/// Random binary frames for a check sequence.
pub fn random_sequence(net: &Network, len: usize, rng: &mut impl Rng) -> FrameSequence {
    let (h, w) = net.frame_size();
    let frames = (0..len)
        .map(|_| {
            let d = (0..h * w).map(|_| if rng.gen_bool(0.4) { 1.0 } else { -1.0 }).collect();
            MapStack::from_vec(1, h, w, d).expect("frame size")
        })
        .collect();
    FrameSequence::from_frames(h, w, frames).expect("frame size")
}

/// Random initial internal state in `[-0.5, 0.5]`.
pub fn random_state(net: &Network, rng: &mut impl Rng) -> NetworkState {
    let mut s = net.zero_state();
    for m in s.internals_mut() {
        for v in m.as_mut_slice() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
    s.refresh_activations();
    s
}

/// Compares an analytic gradient function against central differences of
/// the training loss. `analytic` lets tests substitute a faulty gradient.
pub fn check_with(
    net: &Network,
    weights: &Weights,
    init: &NetworkState,
    seq: &FrameSequence,
    spec: &GradCheckSpec,
    analytic: impl Fn(&Weights, &NetworkState) -> Result<(Weights, Vec<MapStack>)>,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9);
    let (grad_w, grad_s) = analytic(weights, init)?;
    let h = spec.step_size;
    let mut classes: Vec<(String, Accum)> = Vec::new();
    let mut record = |class: String, a: f64, n: f64| {
        let idx = match classes.iter().position(|(c, _)| *c == class) {
            Some(i) => i,
            None => {
                classes.push((class, Accum::default()));
                classes.len() - 1
            }
        };
        let acc = &mut classes[idx].1;
        acc.diff += (a - n) * (a - n);
        acc.analytic += a * a;
        acc.numeric += n * n;
        acc.entries += 1;
    };

    let names: Vec<(String, usize)> = weights.tensors().iter().map(|t| (t.name.clone(), t.data.len())).collect();
    let grad_tensors = grad_w.tensors();
    for (k, (name, len)) in names.iter().enumerate() {
        if *len == 0 {
            continue;
        }
        for i in sample(&mut rng, *len, spec.samples_per_tensor.min(*len)).into_iter() {
            let mut probe = weights.clone();
            let eval = |probe: &mut Weights, v: f64| -> Result<f64> {
                probe.tensors_mut()[k].data[i] = v;
                sequence_loss(net, probe, init, seq, &spec.train)
            };
            let base = weights.tensors()[k].data[i];
            let numeric = (eval(&mut probe, base + h)? - eval(&mut probe, base - h)?) / (2.0 * h);
            record(class_of(name), grad_tensors[k].data[i], numeric);
        }
    }

    let n_layers = init.layers.len();
    for (k, g) in grad_s.iter().enumerate() {
        let class = if k < n_layers { "initial_fm" } else { "initial_cm" };
        if g.is_empty() {
            continue;
        }
        for i in sample(&mut rng, g.len(), spec.samples_per_tensor.min(g.len())).into_iter() {
            let eval = |v: f64| -> Result<f64> {
                let mut s = init.clone();
                s.internals_mut()[k].as_mut_slice()[i] = v;
                s.refresh_activations();
                sequence_loss(net, weights, &s, seq, &spec.train)
            };
            let base = init.internals()[k].as_slice()[i];
            let numeric = (eval(base + h)? - eval(base - h)?) / (2.0 * h);
            record(class.to_string(), g.as_slice()[i], numeric);
        }
    }

    let classes = classes
        .into_iter()
        .map(|(class, a)| {
            let denom = a.analytic.sqrt().max(a.numeric.sqrt());
            let rel_error = if denom == 0.0 { 0.0 } else { a.diff.sqrt() / denom };
            ClassResult { class, entries: a.entries, rel_error, grad_norm: a.analytic.sqrt() }
        })
        .collect();
    Ok(GradCheckReport { classes, tolerance: spec.tolerance })
}

/// The random point [`run_gradcheck`] checks at: network, weights with
/// randomised biases, initial state and a binary sequence.
pub fn check_instance(config: &NetworkConfig, spec: &GradCheckSpec) -> Result<(Network, Weights, NetworkState, FrameSequence)> {
    let net = Network::new(config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut weights = Weights::init(net.plan(), config.init_scale, spec.seed);
    // biases start at zero; randomise them so their gradients are exercised at a generic point
    for t in weights.tensors_mut() {
        if t.name.ends_with("bias") || t.name == "b_o" {
            for v in t.data.iter_mut() {
                *v = rng.gen_range(-0.2..0.2);
            }
        }
    }
    let init = random_state(&net, &mut rng);
    let seq = random_sequence(&net, spec.steps + spec.train.lookahead, &mut rng);
    Ok((net, weights, init, seq))
}

/// Checks [`bptt`] on a random instance of `config`.
pub fn run_gradcheck(config: &NetworkConfig, spec: &GradCheckSpec) -> Result<GradCheckReport> {
    let (net, weights, init, seq) = check_instance(config, spec)?;
    check_with(&net, &weights, &init, &seq, spec, |w, s| {
        let g = bptt(&net, w, s, &seq, &spec.train)?;
        Ok((g.weights, g.initial_state.tensors().into_iter().cloned().collect()))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learner::ClosedBranch;

    #[test]
    fn toy_gradients_match_finite_differences() {
        let spec = GradCheckSpec { samples_per_tensor: 4, ..GradCheckSpec::default() };
        let report = run_gradcheck(&NetworkConfig::toy(), &spec).unwrap();
        let classes: Vec<&str> = report.classes.iter().map(|c| c.class.as_str()).collect();
        for c in ["k_if", "k_fo", "b_o", "k_ff", "k_cf", "k_fc", "w_cc", "w_fc", "fm_bias", "cm_bias", "initial_fm", "initial_cm"] {
            assert!(classes.contains(&c), "class {c} missing");
        }
        assert!(report.passed(), "{}", report.to_csv());
    }

    #[test]
    fn detached_gradient_is_caught() {
        // detached gradients are not the derivative of the differentiated loss
        let config = NetworkConfig::toy();
        let net = Network::new(config.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let weights = Weights::init(net.plan(), 1.0, 3);
        let init = random_state(&net, &mut rng);
        let seq = random_sequence(&net, 12, &mut rng);
        let mut spec = GradCheckSpec { samples_per_tensor: 4, ..GradCheckSpec::default() };
        spec.train.alpha = 0.5;
        let mut detached = spec.train.clone();
        detached.closed_branch = ClosedBranch::Detached;
        let report = check_with(&net, &weights, &init, &seq, &spec, |w, s| {
            let g = bptt(&net, w, s, &seq, &detached)?;
            Ok((g.weights, g.initial_state.tensors().into_iter().cloned().collect()))
        })
        .unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn scaled_gradient_is_caught() {
        let config = NetworkConfig::toy();
        let net = Network::new(config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let weights = Weights::init(net.plan(), 1.0, 5);
        let init = random_state(&net, &mut rng);
        let seq = random_sequence(&net, 8, &mut rng);
        let spec = GradCheckSpec { samples_per_tensor: 3, ..GradCheckSpec::default() };
        let report = check_with(&net, &weights, &init, &seq, &spec, |w, s| {
            let mut g = bptt(&net, w, s, &seq, &spec.train)?;
            for layer in &mut g.weights.layers {
                for v in layer.w_cc.as_mut_slice() {
                    *v *= 1.001;
                }
            }
            Ok((g.weights, g.initial_state.tensors().into_iter().cloned().collect()))
        })
        .unwrap();
        let w_cc = report.classes.iter().find(|c| c.class == "w_cc").unwrap();
        assert!(w_cc.rel_error > 1e-4 && w_cc.rel_error < 1e-2, "{}", w_cc.rel_error);
        assert!(!report.passed());
    }
}
