//! PCA of recorded activity, attractor detection, and the attractor census.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::learner::{frame_mse, rollout, Drive};
use crate::network::{Network, Weights};
use crate::sequence::FrameSequence;
use crate::tensor::Frame;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MapKind {
    Fm,
    Cm,
    /// Output frames.
    Output,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySource {
    /// 1-based; 0 for outputs.
    pub layer: usize,
    pub kind: MapKind,
    pub checkpoint: String,
    pub sequence: usize,
}

/// `steps x dim` activity matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub source: TrajectorySource,
    steps: usize,
    dim: usize,
    data: Vec<f64>,
}

impl TrajectoryRecord {
    pub fn new(source: TrajectorySource, rows: Vec<Vec<f64>>) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::InvalidArgument("trajectory rows differ in length".into()));
        }
        let data: Vec<f64> = rows.into_iter().flatten().collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("trajectory contains non-finite values".into()));
        }
        Ok(TrajectoryRecord { source, steps: data.len().checked_div(dim).unwrap_or(0), dim, data })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }
    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim.max(1))
    }
}

/// Result of [`pca`].
#[derive(Debug, Clone)]
pub struct Pca {
    /// `steps` rows of `n` coordinates.
    pub projected: Vec<Vec<f64>>,
    pub explained_ratio: Vec<f64>,
    /// Unit principal axes, `n` rows of `dim`.
    pub axes: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    /// Set when the data has no variance; the projection is then zero.
    pub degenerate: bool,
}

impl Pca {
    /// `mean + projected * axes`.
    pub fn reconstruct(&self) -> Vec<Vec<f64>> {
        self.projected
            .iter()
            .map(|coords| {
                let mut x = self.mean.clone();
                for (c, axis) in coords.iter().zip(&self.axes) {
                    for (xi, a) in x.iter_mut().zip(axis) {
                        *xi += c * a;
                    }
                }
                x
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let n = self.axes.len();
        let mut s = String::from("step");
        for k in 1..=n {
            s.push_str(&format!(",pc{k}"));
        }
        s.push('\n');
        for (t, row) in self.projected.iter().enumerate() {
            s.push_str(&t.to_string());
            for v in row {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Principal components via the smaller of the covariance and Gram matrices.
pub fn pca(traj: &TrajectoryRecord, n_components: usize) -> Result<Pca> {
    let (t, d) = (traj.steps(), traj.dim());
    if t < 2 {
        return Err(Error::InvalidArgument("PCA needs at least two steps".into()));
    }
    if n_components > t.min(d) {
        return Err(Error::InvalidArgument(format!("{n_components} components requested from a {t}x{d} trajectory")));
    }
    let mut mean = vec![0.0; d];
    for r in traj.rows() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / t as f64;
        }
    }
    let x = DMatrix::from_fn(t, d, |i, j| traj.row(i)[j] - mean[j]);
    let total: f64 = x.iter().map(|v| v * v).sum();
    if total <= f64::EPSILON * (t * d) as f64 {
        return Ok(Pca {
            projected: vec![vec![0.0; n_components]; t],
            explained_ratio: vec![0.0; n_components],
            axes: vec![vec![0.0; d]; n_components],
            mean,
            degenerate: true,
        });
    }

    // eigenvalues of X^T X and X X^T coincide; axes = X^T u / sqrt(lambda)
    let (values, axes_matrix) = if d <= t {
        let eig = SymmetricEigen::new(x.transpose() * &x);
        (eig.eigenvalues, eig.eigenvectors)
    } else {
        let eig = SymmetricEigen::new(&x * x.transpose());
        let mut axes = x.transpose() * &eig.eigenvectors;
        for (k, mut col) in axes.column_iter_mut().enumerate() {
            let lambda = eig.eigenvalues[k];
            if lambda > f64::EPSILON * total {
                col /= lambda.sqrt();
            } else {
                col.fill(0.0);
            }
        }
        (eig.eigenvalues, axes)
    };
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));

    let mut axes = Vec::with_capacity(n_components);
    let mut explained_ratio = Vec::with_capacity(n_components);
    for &k in order.iter().take(n_components) {
        let mut axis: Vec<f64> = axes_matrix.column(k).iter().copied().collect();
        let lead = axis.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if lead < 0.0 {
            axis.iter_mut().for_each(|v| *v = -*v);
        }
        axes.push(axis);
        explained_ratio.push(values[k].max(0.0) / total);
    }
    let projected = (0..t)
        .map(|i| axes.iter().map(|a| x.row(i).iter().zip(a).map(|(p, q)| p * q).sum()).collect())
        .collect();
    Ok(Pca { projected, explained_ratio, axes, mean, degenerate: false })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttractorKind {
    LimitCycle { period: usize },
    FixedPoint,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectConfig {
    /// Steps `[start, end)` inspected.
    pub late_window: (usize, usize),
    /// Fixed point when no step moves the state by more than this (Euclidean).
    pub eps_fix: f64,
    /// Recurrence bound as a fraction of the late-window RMS amplitude.
    pub eps_recur: f64,
    pub min_period: usize,
    /// Output frames must stay within this per-pixel MSE of the target cycle.
    pub fidelity_bound: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig { late_window: (700, 1000), eps_fix: 1e-4, eps_recur: 0.05, min_period: 2, fidelity_bound: 0.1 }
    }
}

impl DetectConfig {
    /// The default window scaled to a rollout of `steps`.
    pub fn for_rollout(steps: usize) -> Self {
        DetectConfig { late_window: (steps * 7 / 10, steps), ..Self::default() }
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// RMS distance of the rows from their mean.
fn rms_amplitude(rows: &[&[f64]]) -> f64 {
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r.iter()) {
            *m += v / n;
        }
    }
    (rows.iter().map(|r| distance(r, &mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Mean `|x_t - x_{t+p}|` over the window, for lags `0..=max_lag`.
fn recurrence_profile(rows: &[&[f64]], max_lag: usize) -> Vec<f64> {
    (0..=max_lag)
        .map(|p| {
            let n = rows.len() - p;
            (0..n).map(|t| distance(rows[t], rows[t + p])).sum::<f64>() / n as f64
        })
        .collect()
}

/// Classifies the late window of a trajectory.
///
/// A limit cycle of period `p` needs the recurrence distance at lag `p` to be
/// a local minimum below `eps_recur * rms`, strictly lower than at lag `p - 1`;
/// the smallest such lag wins. Monotone drift never produces such a minimum.
pub fn detect_attractor(rows: &[&[f64]], cfg: &DetectConfig) -> Result<AttractorKind> {
    let (a, b) = cfg.late_window;
    if b > rows.len() || a + 2 > b {
        return Err(Error::InvalidArgument(format!(
            "late window [{a}, {b}) does not fit a trajectory of {} steps",
            rows.len()
        )));
    }
    let late = &rows[a..b];
    let max_step = late.windows(2).map(|w| distance(w[0], w[1])).fold(0.0, f64::max);
    if max_step < cfg.eps_fix {
        return Ok(AttractorKind::FixedPoint);
    }
    let bound = cfg.eps_recur * rms_amplitude(late);
    let max_lag = late.len() / 2;
    if max_lag < cfg.min_period.max(2) {
        return Ok(AttractorKind::None);
    }
    let prof = recurrence_profile(late, max_lag);
    for p in cfg.min_period.max(1)..max_lag {
        if prof[p] < bound && prof[p] < prof[p - 1] && prof[p] <= prof[p + 1] {
            return Ok(AttractorKind::LimitCycle { period: p });
        }
    }
    Ok(AttractorKind::None)
}

/// Rows of a frame sequence (flattened pixels).
pub fn frame_rows(frames: &[Frame]) -> Vec<&[f64]> {
    frames.iter().map(|f| f.as_slice()).collect()
}

/// Smallest period of an exactly periodic frame sequence.
pub fn sequence_period(seq: &FrameSequence) -> Option<usize> {
    let f = seq.frames();
    (1..=f.len() / 2).find(|&p| (0..f.len() - p).all(|t| f[t] == f[t + p]))
}

/// Mean per-pixel error of `frames` against a repeating reference cycle.
///
/// `frames` is cut into cycle-length chunks; each chunk is compared at its
/// best phase alignment and the chunk errors are averaged.
pub fn cycle_fidelity(frames: &[Frame], reference: &[Frame]) -> f64 {
    let p = reference.len();
    if p == 0 || frames.is_empty() {
        return f64::INFINITY;
    }
    let chunks: Vec<&[Frame]> = frames.chunks(p).collect();
    let total: f64 = chunks
        .iter()
        .map(|chunk| {
            (0..p)
                .map(|phase| chunk.iter().enumerate().map(|(k, f)| frame_mse(f, &reference[(k + phase) % p])).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
                / chunk.len() as f64
        })
        .sum();
    total / chunks.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttractorVerdict {
    pub kind: AttractorKind,
    /// Verdict on the output frames alone.
    pub output_kind: AttractorKind,
    pub pixel_fidelity: f64,
    /// Limit cycle whose outputs stay within the fidelity bound.
    pub embeds_target: bool,
}

/// Closed-loop rollout of a trained sequence with recorded activity.
#[derive(Debug, Clone)]
pub struct Regeneration {
    pub outputs: Vec<Frame>,
    /// Per step, the activations of every layer: `(fm, cm)` flattened.
    pub layers: Vec<Vec<(Vec<f64>, Vec<f64>)>>,
}

impl Regeneration {
    pub fn record(&self, layer: usize, kind: MapKind, source: TrajectorySource) -> Result<TrajectoryRecord> {
        let rows = match kind {
            MapKind::Output => self.outputs.iter().map(|f| f.as_slice().to_vec()).collect(),
            MapKind::Fm | MapKind::Cm => {
                if layer == 0 || layer > self.layers.first().map_or(0, |l| l.len()) {
                    return Err(Error::InvalidArgument(format!("no layer {layer}")));
                }
                self.layers
                    .iter()
                    .map(|l| if kind == MapKind::Fm { l[layer - 1].0.clone() } else { l[layer - 1].1.clone() })
                    .collect()
            }
        };
        TrajectoryRecord::new(TrajectorySource { layer, kind, ..source }, rows)
    }
}

/// Closed-loop regeneration of sequence `seq` of a checkpoint, seeded with its first frame.
pub fn regenerate(net: &Network, weights: &Weights, ckpt: &Checkpoint, seq: usize, seed: &Frame, steps: usize) -> Result<Regeneration> {
    let init = ckpt.initial_state(seq)?;
    let trace = rollout(net, weights, init, Drive::Closed { seed }, steps)?;
    let layers = trace.states[1..]
        .iter()
        .map(|s| s.layers.iter().map(|l| (l.fm_act.as_slice().to_vec(), l.cm_act.as_slice().to_vec())).collect())
        .collect();
    Ok(Regeneration { outputs: trace.outputs, layers })
}

#[derive(Debug, Clone)]
pub struct CensusEntry {
    pub sequence: usize,
    pub verdict: AttractorVerdict,
    /// Index of the distinct attractor this sequence belongs to, when it embeds its target.
    pub attractor: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct CensusReport {
    pub epoch: usize,
    pub closed_mse: f64,
    pub count: usize,
    pub entries: Vec<CensusEntry>,
}

impl CensusReport {
    /// `epoch,learning_mse,attractor_count` rows for several checkpoints.
    pub fn table_csv(reports: &[CensusReport]) -> String {
        let mut s = String::from("epoch,learning_mse,attractor_count\n");
        for r in reports {
            s.push_str(&format!("{},{},{}\n", r.epoch, r.closed_mse, r.count));
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CensusConfig {
    pub steps: usize,
    /// Activity used for cycle detection: CM of this layer (1-based).
    pub layer: usize,
    pub detect: DetectConfig,
}

impl Default for CensusConfig {
    fn default() -> Self {
        CensusConfig { steps: 1000, layer: 1, detect: DetectConfig::default() }
    }
}

/// Phase-aligned distance between two cycles of equal period.
fn cycle_distance(a: &[&[f64]], b: &[&[f64]]) -> f64 {
    let p = a.len();
    (0..p)
        .map(|s| (0..p).map(|k| distance(a[k], b[(k + s) % p])).sum::<f64>() / p as f64)
        .fold(f64::INFINITY, f64::min)
}

/// One period of a limit cycle and the distance under which another cycle counts as the same.
#[derive(Debug, Clone)]
pub struct Cycle {
    pub rows: Vec<Vec<f64>>,
    pub bound: f64,
}

/// Index of the known cycle matching `cycle` under phase alignment, adding it if new.
pub fn assign_cycle(known: &mut Vec<Cycle>, cycle: Cycle) -> usize {
    let x: Vec<&[f64]> = cycle.rows.iter().map(|r| r.as_slice()).collect();
    let found = known.iter().position(|other| {
        let y: Vec<&[f64]> = other.rows.iter().map(|r| r.as_slice()).collect();
        x.len() == y.len() && cycle_distance(&x, &y) < cycle.bound.max(other.bound)
    });
    found.unwrap_or_else(|| {
        known.push(cycle);
        known.len() - 1
    })
}

/// Counts distinct limit cycles that regenerate their training targets.
pub fn attractor_census(ckpt: &Checkpoint, dataset: &[FrameSequence], cfg: &CensusConfig) -> Result<CensusReport> {
    if ckpt.params.initial_states.len() < dataset.len() {
        return Err(Error::InvalidArgument(format!(
            "checkpoint holds {} initial states for {} sequences",
            ckpt.params.initial_states.len(),
            dataset.len()
        )));
    }
    let net = ckpt.network()?;
    let weights = &ckpt.params.weights;
    let mut entries = Vec::with_capacity(dataset.len());
    let mut distinct: Vec<Cycle> = Vec::new();
    let (a, b) = cfg.detect.late_window;
    for (k, target) in dataset.iter().enumerate() {
        let first = target.frames().first().ok_or_else(|| Error::InvalidArgument(format!("sequence {k} is empty")))?;
        let regen = regenerate(&net, weights, ckpt, k, first, cfg.steps)?;
        let source = TrajectorySource { layer: cfg.layer, kind: MapKind::Cm, checkpoint: ckpt.epoch.to_string(), sequence: k };
        let cm = regen.record(cfg.layer, MapKind::Cm, source)?;
        let rows: Vec<&[f64]> = cm.rows().collect();
        let kind = detect_attractor(&rows, &cfg.detect)?;
        let output_kind = detect_attractor(&frame_rows(&regen.outputs), &cfg.detect)?;
        let period = sequence_period(target).unwrap_or(target.len());
        let reference = &target.frames()[target.len() - period..];
        let pixel_fidelity = cycle_fidelity(&regen.outputs[a..b], reference);
        let embeds_target = matches!(kind, AttractorKind::LimitCycle { .. }) && pixel_fidelity < cfg.detect.fidelity_bound;
        let mut attractor = None;
        if let (true, AttractorKind::LimitCycle { period: p }) = (embeds_target, kind) {
            let cycle = Cycle {
                rows: rows[b - p..b].iter().map(|r| r.to_vec()).collect(),
                bound: cfg.detect.eps_recur * rms_amplitude(&rows[a..b]),
            };
            attractor = Some(assign_cycle(&mut distinct, cycle));
        }
        entries.push(CensusEntry {
            sequence: k,
            verdict: AttractorVerdict { kind, output_kind, pixel_fidelity, embeds_target },
            attractor,
        });
    }
    Ok(CensusReport { epoch: ckpt.epoch, closed_mse: ckpt.closed_mse, count: distinct.len(), entries })
}
