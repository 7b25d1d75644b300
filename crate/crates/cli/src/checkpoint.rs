//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header describing every tensor (group, name, shape) plus the run config and
//! scalar training state, then the tensors' values as little-endian `f64`
//! in header order.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crnet::episodic::{RunningMetrics, TrainState};
use crnet::numerics::{Array, OptimizerState, ParameterSet};
use crnet::rng::RngState;
use crnet::Error;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const MAGIC: &[u8; 8] = b"CRNETCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Group {
    Param,
    OptFirst,
    OptSecond,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    group: Group,
    name: String,
    shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    trainable: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lr_mult: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    episode: u64,
    optimizer_step: u64,
    rng: RngState,
    metrics: RunningMetrics,
    notes: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub state: TrainState,
    /// Free-form annotations such as the validation accuracy.
    pub notes: BTreeMap<String, String>,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

impl Checkpoint {
    pub fn new(config: RunConfig, state: TrainState) -> Self {
        Checkpoint {
            config,
            state,
            notes: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> crnet::Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut payload: Vec<&Array> = Vec::new();
        for (name, p) in self.state.params.iter() {
            tensors.push(TensorEntry {
                group: Group::Param,
                name: name.clone(),
                shape: p.value.shape().to_vec(),
                trainable: Some(p.trainable),
                lr_mult: Some(p.lr_mult),
            });
            payload.push(&p.value);
        }
        let opt = &self.state.optimizer;
        for (group, map) in [
            (Group::OptFirst, &opt.first),
            (Group::OptSecond, &opt.second),
        ] {
            for (name, a) in map {
                tensors.push(TensorEntry {
                    group,
                    name: name.clone(),
                    shape: a.shape().to_vec(),
                    trainable: None,
                    lr_mult: None,
                });
                payload.push(a);
            }
        }
        let header = Header {
            config: self.config.clone(),
            episode: self.state.episode,
            optimizer_step: opt.step,
            rng: self.state.rng,
            metrics: self.state.metrics.clone(),
            notes: self.notes.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header).map_err(|e| format_err(e.to_string()))?;
        let floats: usize = payload.iter().map(|a| a.len()).sum();
        let mut out = Vec::with_capacity(20 + json.len() + 8 * floats);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for a in payload {
            for v in a.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> crnet::Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        let mut u32b = [0u8; 4];
        let mut u64b = [0u8; 8];
        let short = |_| format_err("truncated checkpoint");
        r.read_exact(&mut magic).map_err(short)?;
        if &magic != MAGIC {
            return Err(format_err("not a checkpoint file (bad magic)"));
        }
        r.read_exact(&mut u32b).map_err(short)?;
        let version = u32::from_le_bytes(u32b);
        if version != VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: VERSION,
            });
        }
        r.read_exact(&mut u64b).map_err(short)?;
        let len = usize::try_from(u64::from_le_bytes(u64b))
            .map_err(|_| format_err("header length overflow"))?;
        if r.len() < len {
            return Err(format_err("truncated checkpoint header"));
        }
        let (json, mut rest) = r.split_at(len);
        let header: Header =
            serde_json::from_slice(json).map_err(|e| format_err(format!("header: {e}")))?;

        let mut params = ParameterSet::new();
        let mut optimizer = OptimizerState {
            step: header.optimizer_step,
            ..OptimizerState::default()
        };
        for t in header.tensors {
            let n: usize = t.shape.iter().product();
            if rest.len() < 8 * n {
                return Err(format_err(format!("truncated payload at `{}`", t.name)));
            }
            let (chunk, tail) = rest.split_at(8 * n);
            rest = tail;
            let data = chunk
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect();
            let a = Array::new(&t.shape, data)?;
            match t.group {
                Group::Param => params.insert_with(
                    t.name,
                    a,
                    t.lr_mult.unwrap_or(1.0),
                    t.trainable.unwrap_or(true),
                )?,
                Group::OptFirst => {
                    optimizer.first.insert(t.name, a);
                }
                Group::OptSecond => {
                    optimizer.second.insert(t.name, a);
                }
            }
        }
        if !rest.is_empty() {
            return Err(format_err(format!("{} trailing bytes", rest.len())));
        }
        Ok(Checkpoint {
            config: header.config,
            state: TrainState {
                params,
                optimizer,
                episode: header.episode,
                rng: header.rng,
                metrics: header.metrics,
            },
            notes: header.notes,
        })
    }

    pub fn save(&self, path: &Path) -> crnet::Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
        f.write_all(&bytes).map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> crnet::Result<Self> {
        let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}
