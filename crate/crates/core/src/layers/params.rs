use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

/// Half-width of the default uniform initializer.
pub const INIT_RANGE: f64 = 0.1;

const CHECKPOINT_MAGIC: &[u8; 8] = b"PFCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Named, ordered collection of trainable tensors.
///
/// Names are hierarchical (`enc.sd.0.blstm.1.fwd.wx`) and unique. Registration
/// order is deterministic for a given model config, so ids are stable.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor drawn from `Uniform(-0.1, 0.1)`.
    pub fn register<R: Rng>(&mut self, name: &str, shape: &[usize], rng: &mut R) -> Result<ParamId> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-INIT_RANGE..INIT_RANGE)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Invalid(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(value);
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str)> + '_ {
        self.names.iter().enumerate().map(|(i, n)| (ParamId(i), n.as_str()))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Writes the checkpoint container: magic, version, a JSON header and the
    /// raw little-endian `f64` blobs in header order.
    pub fn write_checkpoint<W: Write>(&self, mut w: W, config: &serde_json::Value) -> std::io::Result<()> {
        let header = CheckpointHeader {
            format: "permfree-checkpoint".into(),
            dtype: "float64-le".into(),
            lstm_gate_order: LSTM_GATE_ORDER.into(),
            config: config.clone(),
            params: self
                .names
                .iter()
                .zip(&self.tensors)
                .map(|(n, t)| ParamEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(std::io::Error::other)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for t in &self.tensors {
            let mut buf = Vec::with_capacity(t.len() * 8);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()
    }

    pub fn save(&self, path: &Path, config: &serde_json::Value) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_checkpoint(std::io::BufWriter::new(f), config)
            .map_err(|e| Error::io(path, e))
    }

    /// Parses a checkpoint, returning the store and the embedded config.
    pub fn read_checkpoint<R: Read>(mut r: R, path: &Path) -> Result<(ParamStore, serde_json::Value)> {
        let fmt_err = |detail: String| Error::Format {
            path: path.to_path_buf(),
            detail,
        };
        let io = |e| Error::io(path, e);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(fmt_err("bad magic".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(io)?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(fmt_err(format!("unsupported version {version}")));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(io)?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut json).map_err(io)?;
        let header: CheckpointHeader = serde_json::from_slice(&json)?;
        if header.dtype != "float64-le" || header.lstm_gate_order != LSTM_GATE_ORDER {
            return Err(fmt_err(format!(
                "dtype {} / gate order {}",
                header.dtype, header.lstm_gate_order
            )));
        }
        let mut store = ParamStore::new();
        for entry in header.params {
            let n: usize = entry.shape.iter().product();
            let mut raw = vec![0u8; n * 8];
            r.read_exact(&mut raw).map_err(io)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store.insert(&entry.name, Tensor::new(entry.shape, data)?)?;
        }
        Ok((store, header.config))
    }

    pub fn load(path: &Path) -> Result<(ParamStore, serde_json::Value)> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(std::io::BufReader::new(f), path)
    }
}

/// LSTM gate blocks inside the packed `4H` weight columns.
pub const LSTM_GATE_ORDER: &str = "input,forget,cell,output";

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    dtype: String,
    lstm_gate_order: String,
    config: serde_json::Value,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}
