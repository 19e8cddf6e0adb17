//! Binary checkpoints.
//!
//! Layout: the 8-byte magic `CCVQACKP`, a little-endian `u32` format
//! version, a little-endian `u64` header length, the JSON header, then the
//! raw little-endian payload. The header lists every tensor (name, shape,
//! dtype, byte offset into the payload) plus the training state needed to
//! resume: config, vocabularies, answers, epoch, step, RNG position and the
//! optimizer moments.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::optim::{AdamWState, Moments};
use crate::encoders::Vocabulary;
use crate::error::{Error, Result};
use crate::tensor::{Dtype, ParamStore, Real, Tensor};

pub const MAGIC: &[u8; 8] = b"CCVQACKP";
pub const VERSION: u32 = 1;

/// Position of a ChaCha8 generator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// `u128` word position, as a decimal string.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad RNG word position {:?}", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct MomentEntry {
    name: String,
    step: u64,
    len: usize,
    m_offset: u64,
    v_offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    dtype: Dtype,
    config: TrainConfig,
    answers: Vec<String>,
    question_vocab: Vocabulary,
    clip_vocab: Vocabulary,
    epoch: usize,
    step: usize,
    rng: Option<RngState>,
    best_val_top1: Option<f64>,
    tensors: Vec<TensorEntry>,
    moments: Vec<MomentEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub config: TrainConfig,
    pub answers: Vec<String>,
    pub question_vocab: Vocabulary,
    pub clip_vocab: Vocabulary,
    /// Number of completed epochs.
    pub epoch: usize,
    pub step: usize,
    pub rng: Option<RngState>,
    pub best_val_top1: Option<f64>,
    pub params: ParamStore<T>,
    /// Indexed like `params`.
    pub moments: AdamWState<T>,
}

fn write_values<T: Real>(out: &mut Vec<u8>, values: &[T]) -> u64 {
    let offset = out.len() as u64;
    for &v in values {
        v.write_le(out);
    }
    offset
}

fn read_values<T: Real>(payload: &[u8], offset: u64, len: usize, what: &str) -> Result<Vec<T>> {
    let size = T::DTYPE.size_of();
    let start = usize::try_from(offset).map_err(|_| Error::Checkpoint(format!("{what}: offset overflow")))?;
    let end = start
        .checked_add(len * size)
        .filter(|&e| e <= payload.len())
        .ok_or_else(|| Error::Checkpoint(format!("{what}: payload truncated")))?;
    Ok(payload[start..end].chunks_exact(size).map(T::read_le).collect())
}

impl<T: Real> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut tensors = Vec::with_capacity(self.params.len());
        let mut moments = Vec::new();
        for (id, p) in self.params.iter() {
            tensors.push(TensorEntry {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                trainable: p.trainable,
                offset: write_values(&mut payload, p.tensor.data()),
            });
            if let Some(m) = self.moments.get(id) {
                moments.push(MomentEntry {
                    name: p.name.clone(),
                    step: m.step,
                    len: m.m.len(),
                    m_offset: write_values(&mut payload, &m.m),
                    v_offset: write_values(&mut payload, &m.v),
                });
            }
        }
        let header = Header {
            version: VERSION,
            dtype: T::DTYPE,
            config: self.config.clone(),
            answers: self.answers.clone(),
            question_vocab: self.question_vocab.clone(),
            clip_vocab: self.clip_vocab.clone(),
            epoch: self.epoch,
            step: self.step,
            rng: self.rng.clone(),
            best_val_top1: self.best_val_top1,
            tensors,
            moments,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload) = split_header(bytes)?;
        if header.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, requested {}",
                header.dtype.as_str(),
                T::DTYPE.as_str()
            )));
        }
        let mut params = ParamStore::new();
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let data = read_values::<T>(payload, e.offset, n, &e.name)?;
            let id = params.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?)?;
            params.set_trainable(id, e.trainable);
        }
        let mut moments = AdamWState::new(params.len());
        for e in &header.moments {
            let id = params
                .id(&e.name)
                .ok_or_else(|| Error::Checkpoint(format!("moments for unknown tensor {}", e.name)))?;
            moments.moments[id.index()] = Some(Moments {
                step: e.step,
                m: read_values(payload, e.m_offset, e.len, &e.name)?,
                v: read_values(payload, e.v_offset, e.len, &e.name)?,
            });
        }
        Ok(Self {
            config: header.config,
            answers: header.answers,
            question_vocab: header.question_vocab,
            clip_vocab: header.clip_vocab,
            epoch: header.epoch,
            step: header.step,
            rng: header.rng,
            best_val_top1: header.best_val_top1,
            params,
            moments,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn split_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let end = usize::try_from(len)
        .ok()
        .and_then(|l| l.checked_add(20))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Checkpoint("header length exceeds file".into()))?;
    let header: Header = serde_json::from_slice(&bytes[20..end])?;
    Ok((header, &bytes[end..]))
}

/// Precision of the tensors in a checkpoint file.
pub fn peek_dtype(path: &Path) -> Result<Dtype> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(split_header(&bytes)?.0.dtype)
}
