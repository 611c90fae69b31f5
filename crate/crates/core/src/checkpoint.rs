//! Versioned binary checkpoint files.
//!
//! Layout: 8-byte magic `IDACKPT\0`, u32 LE format version, u64 LE header
//! length, UTF-8 JSON header, raw little-endian arrays (student, teacher,
//! Adam first moments, Adam second moments, prototype bank), then a 32-byte
//! SHA-256 digest of every preceding byte.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{IdaError, Result};
use crate::idcl::PrototypeBank;
use crate::optim::AdamState;
use crate::scalar::Scalar;
use crate::segnet::{ModelState, NamedArray, NetworkConfig, StageLink};
use crate::trainer::{Checkpoint, HistoryRow, Phase, RngState, RunConfig};

pub const MAGIC: &[u8; 8] = b"IDACKPT\0";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankHeader {
    pub classes: usize,
    pub dim: usize,
    pub iteration: u64,
    pub last_weights: (f64, f64),
}

/// JSON header of a checkpoint file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub dtype: String,
    pub phase: Phase,
    pub iteration: u64,
    pub config: RunConfig,
    pub network: NetworkConfig,
    pub stage_link: StageLink,
    pub params: Vec<ParamSpec>,
    pub student_iteration: u64,
    pub teacher_iteration: u64,
    pub adam_step: u64,
    pub bank: Option<BankHeader>,
    pub rng: RngState,
    pub best_score: Option<f64>,
    pub degenerate_steps: u64,
    pub history: Vec<HistoryRow>,
}

fn push_arrays<T: Scalar>(out: &mut Vec<u8>, state: &ModelState<T>) {
    for v in state.iter_scalars() {
        v.write_le(out);
    }
}

/// Serializes a checkpoint to bytes.
pub fn encode<T: Scalar>(ck: &Checkpoint<T>) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        dtype: T::DTYPE.to_string(),
        phase: ck.phase,
        iteration: ck.iteration,
        config: ck.config.clone(),
        network: ck.config.network(),
        stage_link: ck.config.network().stage_link,
        params: ck
            .student
            .params
            .iter()
            .map(|p| ParamSpec {
                name: p.name.clone(),
                shape: p.shape.clone(),
            })
            .collect(),
        student_iteration: ck.student.iteration,
        teacher_iteration: ck.teacher.iteration,
        adam_step: ck.adam.step,
        bank: ck.bank.as_ref().map(|b| BankHeader {
            classes: b.num_classes(),
            dim: b.dim(),
            iteration: b.iteration,
            last_weights: b.last_weights,
        }),
        rng: RngState::capture(&ck.rng),
        best_score: ck.best_score,
        degenerate_steps: ck.degenerate_steps,
        history: ck.history.clone(),
    };
    for s in [&ck.teacher, &ck.adam.m, &ck.adam.v] {
        if !ck.student.same_structure(s) {
            return Err(IdaError::Checkpoint("model states differ in structure".into()));
        }
    }
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(json.len() + 4 * T::BYTES * ck.student.num_scalars() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    push_arrays(&mut out, &ck.student);
    push_arrays(&mut out, &ck.teacher);
    push_arrays(&mut out, &ck.adam.m);
    push_arrays(&mut out, &ck.adam.v);
    if let Some(b) = &ck.bank {
        for v in b.vectors.iter().flatten() {
            v.write_le(&mut out);
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Checks magic, version and digest; returns the header and payload bytes.
fn split(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if bytes.len() < MAGIC.len() + 12 + DIGEST_LEN || &bytes[..8] != MAGIC {
        return Err(IdaError::Integrity("not a checkpoint file (bad magic or truncated)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(IdaError::CheckpointVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let body_len = bytes.len() - DIGEST_LEN;
    let digest = Sha256::digest(&bytes[..body_len]);
    if digest.as_slice() != &bytes[body_len..] {
        return Err(IdaError::Integrity("checksum mismatch".into()));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let payload_start = 20usize
        .checked_add(hlen)
        .filter(|&e| e <= body_len)
        .ok_or_else(|| IdaError::Integrity("header length exceeds file".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[20..payload_start])?;
    Ok((header, &bytes[payload_start..body_len]))
}

/// Reads only the header (after full integrity checks).
pub fn peek_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = fs::read(path).map_err(|e| IdaError::io(path, e))?;
    Ok(split(&bytes)?.0)
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        let bytes = n * T::BYTES;
        if self.buf.len() < bytes {
            return Err(IdaError::Integrity("payload shorter than header declares".into()));
        }
        let (head, rest) = self.buf.split_at(bytes);
        self.buf = rest;
        Ok(head.chunks_exact(T::BYTES).map(T::read_le).collect())
    }

    fn state<T: Scalar>(&mut self, specs: &[ParamSpec], iteration: u64) -> Result<ModelState<T>> {
        let params = specs
            .iter()
            .map(|s| {
                Ok(NamedArray {
                    name: s.name.clone(),
                    shape: s.shape.clone(),
                    data: self.take(s.shape.iter().product())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelState { params, iteration })
    }
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let (h, payload) = split(bytes)?;
    if h.dtype != T::DTYPE {
        return Err(IdaError::Checkpoint(format!(
            "checkpoint holds {} parameters, requested {}",
            h.dtype,
            T::DTYPE
        )));
    }
    let mut r = Reader { buf: payload };
    let student = r.state(&h.params, h.student_iteration)?;
    let teacher = r.state(&h.params, h.teacher_iteration)?;
    let m = r.state(&h.params, 0)?;
    let v = r.state(&h.params, 0)?;
    let bank = match &h.bank {
        Some(b) => {
            let vectors = (0..b.classes).map(|_| r.take(b.dim)).collect::<Result<Vec<_>>>()?;
            let mut bank = PrototypeBank::new(vectors)?;
            bank.iteration = b.iteration;
            bank.last_weights = b.last_weights;
            Some(bank)
        }
        None => None,
    };
    if !r.buf.is_empty() {
        return Err(IdaError::Integrity("trailing bytes after payload".into()));
    }
    Ok(Checkpoint {
        phase: h.phase,
        config: h.config,
        student,
        teacher,
        bank,
        adam: AdamState { m, v, step: h.adam_step },
        rng: h.rng.restore()?,
        iteration: h.iteration,
        best_score: h.best_score,
        degenerate_steps: h.degenerate_steps,
        history: h.history,
    })
}

/// Writes atomically via a temporary sibling file.
pub fn save_checkpoint<T: Scalar>(path: &Path, ck: &Checkpoint<T>) -> Result<()> {
    let bytes = encode(ck)?;
    write_atomic(path, &bytes)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| IdaError::io(path, e))?;
    decode(&bytes)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp-write");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| IdaError::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| IdaError::io(&tmp, e))?;
        f.sync_all().map_err(|e| IdaError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| IdaError::io(path, e))
}
