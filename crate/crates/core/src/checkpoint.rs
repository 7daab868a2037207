//! Versioned JSON checkpoints of a running search.
//!
//! Tensors are stored by name as base64 of little-endian `f32`. Random
//! streams are derived from `(seed, epoch)`, so the generator state is
//! recorded as the next stream index rather than raw generator words.

use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::ImportanceState;
use crate::metrics::{MetricsRow, PruneEvent, SnapshotRow};
use crate::params::ParamId;
use crate::search::{SearchConfig, Searcher};

pub const CHECKPOINT_FORMAT: &str = "cellnas-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
}

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    name: String,
    shape: Vec<usize>,
    data: String,
}

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: u64,
    next_stream: u64,
}

#[derive(Serialize, Deserialize)]
struct SgdState {
    step_count: u64,
    buffers: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct AdamState {
    step_count: u64,
    first: BTreeMap<String, String>,
    second: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    header: Header,
    config: SearchConfig,
    in_channels: usize,
    classes: usize,
    epoch: usize,
    rng: RngState,
    tensors: Vec<StoredTensor>,
    masks: [Vec<Vec<bool>>; 2],
    importance: ImportanceState,
    sgd: SgdState,
    adam: AdamState,
    metrics: Vec<MetricsRow>,
    snapshots: Vec<SnapshotRow>,
    prune_log: Vec<PruneEvent>,
}

fn bad(reason: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        reason: reason.into(),
    }
}

fn encode(v: &[f32]) -> String {
    let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

fn decode(s: &str, len: usize, what: &str) -> Result<Vec<f32>> {
    let bytes = STANDARD.decode(s).map_err(|e| bad(format!("{what}: {e}")))?;
    if bytes.len() != 4 * len {
        return Err(bad(format!("{what}: {} bytes for {len} values", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn id_of(names: &BTreeMap<String, ParamId>, name: &str) -> Result<ParamId> {
    names
        .get(name)
        .copied()
        .ok_or_else(|| bad(format!("unknown parameter `{name}`")))
}

impl Searcher {
    pub fn to_checkpoint(&self) -> String {
        let store = &self.net.store;
        let named = |m: &BTreeMap<ParamId, Vec<f32>>| -> BTreeMap<String, String> {
            m.iter()
                .map(|(&id, v)| (store.name(id).to_string(), encode(v)))
                .collect()
        };
        let file = CheckpointFile {
            header: Header {
                format: CHECKPOINT_FORMAT.into(),
                version: CHECKPOINT_VERSION,
            },
            config: self.config.clone(),
            in_channels: self.net.config.in_channels,
            classes: self.net.config.classes,
            epoch: self.epoch,
            rng: RngState {
                seed: self.config.seed,
                next_stream: self.epoch as u64 + 1,
            },
            tensors: store
                .entries()
                .iter()
                .map(|e| StoredTensor {
                    name: e.name.clone(),
                    shape: e.tensor.shape().to_vec(),
                    data: encode(e.tensor.data()),
                })
                .collect(),
            masks: self.net.arch.masks.clone(),
            importance: self.importance.clone(),
            sgd: SgdState {
                step_count: self.w_opt.step_count,
                buffers: named(&self.w_opt.buffers),
            },
            adam: AdamState {
                step_count: self.arch_opt.step_count,
                first: named(
                    &self
                        .arch_opt
                        .moments
                        .iter()
                        .map(|(&k, (m, _))| (k, m.clone()))
                        .collect(),
                ),
                second: named(
                    &self
                        .arch_opt
                        .moments
                        .iter()
                        .map(|(&k, (_, v))| (k, v.clone()))
                        .collect(),
                ),
            },
            metrics: self.metrics.clone(),
            snapshots: self.snapshots.clone(),
            prune_log: self.prune_log.clone(),
        };
        serde_json::to_string(&file).expect("checkpoint serializes")
    }

    /// Rebuilds a searcher from checkpoint text. The network is constructed
    /// from the stored configuration and every tensor is then overwritten,
    /// so the result continues exactly where the saved run stopped.
    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let header: serde_json::Value = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        let h = &header["header"];
        if h["format"] != CHECKPOINT_FORMAT {
            return Err(bad(format!(
                "expected format `{CHECKPOINT_FORMAT}`, found {}",
                h["format"]
            )));
        }
        if h["version"] != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {}", h["version"])));
        }
        let file: CheckpointFile = serde_json::from_value(header).map_err(|e| bad(e.to_string()))?;
        file.config.validate()?;
        if file.epoch > file.config.epochs {
            return Err(bad(format!(
                "epoch {} beyond configured {}",
                file.epoch, file.config.epochs
            )));
        }
        if file.rng.seed != file.config.seed || file.rng.next_stream != file.epoch as u64 + 1 {
            return Err(bad("random stream does not match the recorded epoch"));
        }
        let mut s = Searcher::new(file.config, file.in_channels, file.classes)?;

        let lookup: BTreeMap<String, ParamId> = (0..s.net.store.len())
            .map(|i| (s.net.store.name(ParamId(i)).to_string(), ParamId(i)))
            .collect();
        if file.tensors.len() != lookup.len() {
            return Err(bad(format!(
                "{} stored tensors for a network with {}",
                file.tensors.len(),
                lookup.len()
            )));
        }
        for t in &file.tensors {
            let id = id_of(&lookup, &t.name)?;
            if s.net.store.get(id).shape() != t.shape.as_slice() {
                return Err(bad(format!("parameter `{}` has shape {:?}", t.name, t.shape)));
            }
            let data = decode(&t.data, s.net.store.get(id).len(), &t.name)?;
            s.net.store.replace_data(id, data);
        }
        let by_name = |m: &BTreeMap<String, String>| -> Result<BTreeMap<ParamId, Vec<f32>>> {
            m.iter()
                .map(|(name, enc)| {
                    let id = id_of(&lookup, name)?;
                    Ok((id, decode(enc, s.net.store.get(id).len(), name)?))
                })
                .collect()
        };
        let sgd_buffers = by_name(&file.sgd.buffers)?;
        let first = by_name(&file.adam.first)?;
        let mut second = by_name(&file.adam.second)?;
        let moments = first
            .into_iter()
            .map(|(id, m)| {
                let v = second
                    .remove(&id)
                    .ok_or_else(|| bad(format!("missing second moment for `{}`", s.net.store.name(id))))?;
                Ok((id, (m, v)))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        if !second.is_empty() {
            return Err(bad("second moments without first moments"));
        }

        let ops = s.net.arch.ops.len();
        let mask_ok = |m: &Vec<Vec<bool>>| {
            m.len() == crate::space::NUM_EDGES && m.iter().all(|row| row.len() == ops && row.iter().any(|&b| b))
        };
        if !file.masks.iter().all(mask_ok) {
            return Err(bad("operation masks have the wrong shape or an empty edge"));
        }
        if file.importance.num_ops != ops {
            return Err(bad("importance counters cover a different operation set"));
        }
        s.net.arch.masks = file.masks;
        s.importance = file.importance;
        s.w_opt.step_count = file.sgd.step_count;
        s.w_opt.buffers = sgd_buffers;
        s.arch_opt.step_count = file.adam.step_count;
        s.arch_opt.moments = moments;
        s.epoch = file.epoch;
        s.metrics = file.metrics;
        s.snapshots = file.snapshots;
        s.prune_log = file.prune_log;
        Ok(s)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint()).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(&text)
    }
}
