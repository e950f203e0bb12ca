//! Binary checkpoints.
//!
//! Layout, little-endian:
//!
//! ```text
//! "PMN1"  u32 version
//! u32 header_len, header_len bytes of TOML (epoch, errors, sequence count, network config)
//! u32 tensor_count, then per tensor: u32 name_len, name, u32 rank, rank x u32 dims, u64 offset
//! f32 data, row-major; `offset` counts floats from the start of this block
//! ```
//!
//! Parameters are rounded to f32 when a [`Checkpoint`] is built, so a saved
//! and reloaded checkpoint is bit-identical to the in-memory one.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::NetworkConfig;
use crate::error::{Error, Result};
use crate::learner::EpochRecord;
use crate::network::{Network, NetworkState, ParamSet, Weights};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PMN1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Save points of the original long training runs (8000 epochs).
pub const REFERENCE_SCHEDULE: [usize; 6] = [100, 500, 1000, 2000, 4000, 8000];

/// [`REFERENCE_SCHEDULE`] rescaled to an epoch budget.
pub fn scaled_schedule(budget: usize) -> Vec<usize> {
    let mut out: Vec<usize> = REFERENCE_SCHEDULE
        .iter()
        .map(|&e| ((e as f64 * budget as f64 / 8000.0).round() as usize).max(1))
        .collect();
    out.dedup();
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub config: NetworkConfig,
    pub params: ParamSet,
    pub open_mse: f64,
    pub closed_mse: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    epoch: usize,
    open_mse: f64,
    closed_mse: f64,
    sequences: usize,
    network: NetworkConfig,
}

fn round_f32(data: &mut [f64]) {
    for v in data {
        *v = *v as f32 as f64;
    }
}

/// Internal state tensors of a parameter set, named `s{seq}.{fm|cm}{layer}`.
fn state_names(params_len: usize, layers: usize) -> Vec<String> {
    let mut names = Vec::new();
    for s in 0..params_len {
        for kind in ["fm", "cm"] {
            for l in 1..=layers {
                names.push(format!("s{s}.{kind}{l}"));
            }
        }
    }
    names
}

impl Checkpoint {
    /// Snapshot of `params`, rounded to f32 precision.
    pub fn new(epoch: usize, config: NetworkConfig, params: &ParamSet, open_mse: f64, closed_mse: f64) -> Self {
        let mut params = params.clone();
        for t in params.weights.tensors_mut() {
            round_f32(t.data);
        }
        for s in &mut params.initial_states {
            for m in s.internals_mut() {
                round_f32(m.as_mut_slice());
            }
            s.refresh_activations();
        }
        Checkpoint { epoch, config, params, open_mse, closed_mse }
    }

    pub fn network(&self) -> Result<Network> {
        Network::new(self.config.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = toml::to_string(&Header {
            epoch: self.epoch,
            open_mse: self.open_mse,
            closed_mse: self.closed_mse,
            sequences: self.params.initial_states.len(),
            network: self.config.clone(),
        })
        .expect("header serialises");

        let mut tensors: Vec<(String, Vec<usize>, &[f64])> =
            self.params.weights.tensors().into_iter().map(|t| (t.name, t.dims, t.data)).collect();
        let layers = self.config.layers.len();
        let names = state_names(self.params.initial_states.len(), layers);
        let maps = self.params.initial_states.iter().flat_map(|s| s.internals());
        for (name, m) in names.into_iter().zip(maps) {
            let (p, h, w) = m.dims();
            tensors.push((name, vec![p, h, w], m.as_slice()));
        }

        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, dims, data) in &tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for &d in dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += data.len() as u64;
        }
        for (_, _, data) in &tensors {
            for &v in data.iter() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Corrupt("not a PMN1 checkpoint".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Corrupt(format!("unsupported checkpoint version {version}")));
        }
        let header_len = r.u32()? as usize;
        let header_text =
            std::str::from_utf8(r.take(header_len)?).map_err(|_| Error::Corrupt("checkpoint header is not UTF-8".into()))?;
        let header: Header =
            toml::from_str(header_text).map_err(|e| Error::Corrupt(format!("checkpoint header: {e}")))?;
        let net = Network::new(header.network.clone()).map_err(|e| Error::Corrupt(format!("checkpoint config: {e}")))?;

        let count = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let offset = r.u64()? as usize;
            manifest.push((name, dims, offset));
        }
        let body = &bytes[r.pos..];
        let floats = body.len() / 4;
        if body.len() % 4 != 0 {
            return Err(Error::Corrupt("checkpoint body is not a whole number of floats".into()));
        }
        let read = |name: &str, dims: &[usize], dst: &mut [f64]| -> Result<()> {
            let (_, got_dims, offset) = manifest
                .iter()
                .find(|(n, _, _)| n == name)
                .ok_or_else(|| Error::Corrupt(format!("checkpoint lacks tensor {name}")))?;
            if got_dims.as_slice() != dims {
                return Err(Error::Corrupt(format!("tensor {name} has dims {got_dims:?}, expected {dims:?}")));
            }
            if offset + dst.len() > floats {
                return Err(Error::Corrupt(format!("checkpoint truncated inside tensor {name}")));
            }
            for (k, v) in dst.iter_mut().enumerate() {
                let at = 4 * (offset + k);
                *v = f32::from_le_bytes(body[at..at + 4].try_into().unwrap()) as f64;
                if !v.is_finite() {
                    return Err(Error::Corrupt(format!("non-finite value in tensor {name}")));
                }
            }
            Ok(())
        };

        let mut weights = Weights::zeros(net.plan());
        let expected: Vec<(String, Vec<usize>)> = weights.tensors().into_iter().map(|t| (t.name, t.dims)).collect();
        let mut total = 0;
        for (t, (name, dims)) in weights.tensors_mut().into_iter().zip(&expected) {
            read(name, dims, t.data)?;
            total += t.data.len();
        }
        let mut initial_states = Vec::with_capacity(header.sequences);
        let layers = header.network.layers.len();
        let names = state_names(header.sequences, layers);
        for s in 0..header.sequences {
            let mut state = net.zero_state();
            for (k, m) in state.internals_mut().into_iter().enumerate() {
                let (p, h, w) = m.dims();
                read(&names[s * 2 * layers + k], &[p, h, w], m.as_mut_slice())?;
                total += m.len();
            }
            state.refresh_activations();
            initial_states.push(state);
        }
        if manifest.len() != expected.len() + names.len() || total != floats {
            return Err(Error::Corrupt(format!("checkpoint holds {floats} floats in {} tensors, expected {total}", manifest.len())));
        }
        Ok(Checkpoint {
            epoch: header.epoch,
            config: header.network,
            params: ParamSet { weights, initial_states },
            open_mse: header.open_mse,
            closed_mse: header.closed_mse,
        })
    }

    /// Initial state of sequence `seq`.
    pub fn initial_state(&self, seq: usize) -> Result<&NetworkState> {
        self.params.initial_states.get(seq).ok_or_else(|| {
            Error::InvalidArgument(format!("sequence {seq} out of range ({} trained)", self.params.initial_states.len()))
        })
    }

    /// Element-wise mean of the trained initial states.
    pub fn mean_initial_state(&self) -> Result<NetworkState> {
        let net = self.network()?;
        let mut mean = net.zero_state();
        let n = self.params.initial_states.len();
        if n == 0 {
            return Ok(mean);
        }
        for s in &self.params.initial_states {
            for (m, src) in mean.internals_mut().into_iter().zip(s.internals()) {
                m.add_scaled(src, 1.0 / n as f64);
            }
        }
        mean.refresh_activations();
        Ok(mean)
    }

    /// Fails unless the checkpoint was built for `config`.
    pub fn require_config(&self, config: &NetworkConfig) -> Result<()> {
        if &self.config != config {
            return Err(Error::Topology("checkpoint config does not match the requested network config".into()));
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Corrupt("checkpoint truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

/// `<ckpt>.mse.csv`
pub fn mse_sidecar_path(ckpt: impl AsRef<Path>) -> PathBuf {
    let mut s = ckpt.as_ref().as_os_str().to_owned();
    s.push(".mse.csv");
    PathBuf::from(s)
}

pub fn mse_history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,open_mse,closed_mse\n");
    for r in history {
        s.push_str(&format!("{},{},{}\n", r.epoch, r.open_mse, r.closed_mse));
    }
    s
}

/// Parses a sidecar written by [`mse_history_csv`].
pub fn parse_mse_history(text: &str) -> Result<Vec<EpochRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some("epoch,open_mse,closed_mse") {
        return Err(Error::Parse("MSE history lacks its header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Parse(format!("bad MSE history row {l:?}"));
            if f.len() != 3 {
                return Err(bad());
            }
            Ok(EpochRecord {
                epoch: f[0].parse().map_err(|_| bad())?,
                open_mse: f[1].parse().map_err(|_| bad())?,
                closed_mse: f[2].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Writes the checkpoint and its MSE sidecar.
pub fn save_with_history(path: impl AsRef<Path>, ckpt: &Checkpoint, history: &[EpochRecord]) -> Result<()> {
    save_checkpoint(path.as_ref(), ckpt)?;
    fs::write(mse_sidecar_path(path), mse_history_csv(history))?;
    Ok(())
}

/// `epoch_00100.pmn` style name inside `dir`.
pub fn epoch_path(dir: impl AsRef<Path>, epoch: usize) -> PathBuf {
    dir.as_ref().join(format!("epoch_{epoch:05}.pmn"))
}

pub fn final_path(dir: impl AsRef<Path>) -> PathBuf {
    dir.as_ref().join("final.pmn")
}

/// Checkpoint writer for [`crate::learner::train`]: saves at scheduled epochs
/// and once more when training ends.
pub struct CheckpointWriter {
    pub dir: PathBuf,
    pub config: NetworkConfig,
    pub schedule: Vec<usize>,
    pub written: Vec<PathBuf>,
}

impl CheckpointWriter {
    pub fn new(dir: impl AsRef<Path>, config: NetworkConfig, schedule: Vec<usize>) -> Result<Self> {
        fs::create_dir_all(dir.as_ref())?;
        Ok(CheckpointWriter { dir: dir.as_ref().to_path_buf(), config, schedule, written: Vec::new() })
    }

    pub fn on_epoch(&mut self, rec: &EpochRecord, params: &ParamSet, history: &[EpochRecord], last: bool) -> Result<()> {
        let mut targets = Vec::new();
        if self.schedule.contains(&rec.epoch) {
            targets.push(epoch_path(&self.dir, rec.epoch));
        }
        if last {
            targets.push(final_path(&self.dir));
        }
        if targets.is_empty() {
            return Ok(());
        }
        let ckpt = Checkpoint::new(rec.epoch, self.config.clone(), params, rec.open_mse, rec.closed_mse);
        for p in targets {
            save_with_history(&p, &ckpt, history)?;
            self.written.push(p);
        }
        Ok(())
    }
}
