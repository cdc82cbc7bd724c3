use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, TransformerModel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BVTCKPT0";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    step: u64,
    seed: u64,
    tensors: Vec<Entry>,
}

/// Saved model state.
///
/// Layout: the magic bytes, a little-endian `u64` header length, a JSON
/// header (config, step, seed and per-tensor name, shape and byte offset),
/// then the raw little-endian `f64` payloads.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub seed: u64,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &TransformerModel, step: u64, seed: u64) -> Self {
        Self {
            config: model.config().clone(),
            step,
            seed,
            tensors: model
                .params()
                .iter()
                .map(|p| {
                    let mut t = p.value.clone();
                    t.set_requires_grad(false);
                    (p.name.clone(), t)
                })
                .collect(),
        }
    }

    /// Rebuilds the model this checkpoint was taken from.
    pub fn to_model(&self) -> Result<TransformerModel> {
        let mut model = TransformerModel::new(self.config.clone(), self.seed)?;
        load_pretrained(&mut model, self, true)?;
        Ok(model)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let mut offset = 0u64;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = Entry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += 8 * t.len() as u64;
                e
            })
            .collect();
        let header = Header {
            config: self.config.clone(),
            step: self.step,
            seed: self.seed,
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let io = |e| Error::Format(format!("checkpoint write failed: {e}"));
        w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
        w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&json).map_err(io)?;
        for (_, t) in &self.tensors {
            for v in t.data() {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let short = |what: &str| Error::Format(format!("truncated checkpoint ({what})"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| short("magic"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint: bad magic bytes".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(|_| short("header length"))?;
        let len = u64::from_le_bytes(len);
        if len > 1 << 32 {
            return Err(Error::Format(format!("implausible header length {len}")));
        }
        let mut json = vec![0u8; len as usize];
        r.read_exact(&mut json).map_err(|_| short("header"))?;
        let header: Header =
            serde_json::from_slice(&json).map_err(|e| Error::Format(format!("bad checkpoint header: {e}")))?;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload).map_err(|_| short("payload"))?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 8 * n;
            let bytes = payload.get(start..end).ok_or_else(|| short(&e.name))?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((e.name, Tensor::new(e.shape, data)?));
        }
        Ok(Self {
            config: header.config,
            step: header.step,
            seed: header.seed,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(f))
    }
}

/// Outcome of copying checkpoint tensors into a model.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LoadReport {
    pub matched: Vec<String>,
    pub missing: Vec<String>,
    pub unexpected: Vec<String>,
    /// Parameters whose shape differed and were left freshly initialized.
    pub reinitialized: Vec<String>,
}

/// Copies every checkpoint tensor whose name and shape match into `model`.
///
/// Families must agree. With `strict`, any missing, unexpected or reshaped
/// tensor is an error; otherwise such tensors are reported and the model
/// keeps its own values, with the classifier head redrawn when its shape
/// changed.
pub fn load_pretrained(model: &mut TransformerModel, ckpt: &Checkpoint, strict: bool) -> Result<LoadReport> {
    if model.config().family != ckpt.config.family {
        return Err(Error::Validation(format!(
            "checkpoint family {} does not match model family {}",
            ckpt.config.family.name(),
            model.config().family.name()
        )));
    }
    let mut report = LoadReport::default();
    let store = model.params_mut();
    for (name, t) in &ckpt.tensors {
        match store.find_mut(name) {
            None => report.unexpected.push(name.clone()),
            Some(p) if p.value.shape() != t.shape() => {
                if strict {
                    return Err(Error::dim(format!(
                        "{name}: checkpoint shape {:?}, model shape {:?}",
                        t.shape(),
                        p.value.shape()
                    )));
                }
                report.reinitialized.push(name.clone());
            }
            Some(p) => {
                p.value = t.clone().with_requires_grad();
                report.matched.push(name.clone());
            }
        }
    }
    report.missing = store
        .names()
        .filter(|n| !ckpt.tensors.iter().any(|(c, _)| c == n))
        .map(str::to_owned)
        .collect();
    if strict && !(report.missing.is_empty() && report.unexpected.is_empty()) {
        return Err(Error::Validation(format!(
            "strict load: missing {:?}, unexpected {:?}",
            report.missing, report.unexpected
        )));
    }
    if report.reinitialized.iter().any(|n| n.starts_with("head.")) {
        let mut rng = ChaCha8Rng::seed_from_u64(ckpt.seed ^ 0x4ead);
        model.reinitialize_head(&mut rng);
    }
    Ok(report)
}
