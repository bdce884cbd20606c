//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "FUSD"                      magic
//! u16                         format version
//! u8                          kind: 0 backbone, 1 fine-tuned
//! u32 × 6                     d_model n_heads n_layers d_ffn max_len frame_dim
//! u32 + bytes                 stage tag
//! u32                         provenance length, then per stage:
//!   u8 + u32 + bytes          strategy code, domain id
//! [kind 1] u8 + u32           fine-tune mode, vocabulary size
//! u32                         number of parameter tensors
//! u64                         total number of scalars
//! per tensor, backbone then head, each sorted by name:
//!   u32 + bytes               name
//!   u32 + u32 × rank          rank, extents
//!   f64 × numel               values
//! u32                         CRC32 of every preceding byte
//! ```

use std::path::Path;

use fusdom_core::backbone::{BackboneConfig, ModelSnapshot, StageRecord};
use fusdom_core::downstream::{FinetuneMode, FinetunedModel};
use fusdom_core::tensor::{ParamSet, Tensor};
use fusdom_core::trainer::Strategy;
use fusdom_core::Scalar;
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"FUSD";
pub const FORMAT_VERSION: u16 = 1;

const KIND_BACKBONE: u8 = 0;
const KIND_FINETUNED: u8 = 1;
const HEAD_PREFIX: &str = "ctc.";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CheckpointError {
    #[error("I/O error at {path}: {message}")]
    Io { path: String, message: String },

    #[error("bad magic bytes {0:?}, not a checkpoint")]
    BadMagic(Vec<u8>),

    #[error("unsupported checkpoint version {found} (supported: {supported})")]
    Version { found: u16, supported: u16 },

    #[error("CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Crc { stored: u32, computed: u32 },

    #[error("checkpoint truncated: needed {needed} bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },

    #[error("malformed checkpoint: {0}")]
    Malformed(String),

    #[error("checkpoint inconsistent with its config: {0}")]
    Inconsistent(String),
}

type Result<T> = std::result::Result<T, CheckpointError>;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u32(&mut self, v: usize) {
        let v = u32::try_from(v).expect("checkpoint field exceeds u32");
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(CheckpointError::Truncated {
                offset: self.pos,
                needed: n,
            }),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()?;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| {
            CheckpointError::Malformed(format!("non-UTF-8 string at offset {}", self.pos - n))
        })
    }
}

struct Contents<T> {
    config: BackboneConfig,
    stage_tag: String,
    provenance: Vec<StageRecord>,
    head: Option<(FinetuneMode, usize)>,
    params: ParamSet<T>,
}

fn encode<'a, T: Scalar>(
    config: &BackboneConfig,
    stage_tag: &str,
    provenance: &[StageRecord],
    head: Option<(FinetuneMode, usize)>,
    params: impl Iterator<Item = (&'a String, &'a Tensor<T>)> + Clone,
) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(&MAGIC);
    w.u16(FORMAT_VERSION);
    w.u8(if head.is_some() {
        KIND_FINETUNED
    } else {
        KIND_BACKBONE
    });
    for v in [
        config.d_model,
        config.n_heads,
        config.n_layers,
        config.d_ffn,
        config.max_len,
        config.frame_dim,
    ] {
        w.u32(v);
    }
    w.str(stage_tag);
    w.u32(provenance.len());
    for record in provenance {
        w.u8(record.strategy.code());
        w.str(&record.domain_id);
    }
    if let Some((mode, vocab)) = head {
        w.u8(mode_code(mode));
        w.u32(vocab);
    }
    w.u32(params.clone().count());
    w.u64(params.clone().map(|(_, t)| t.numel() as u64).sum());
    for (name, t) in params {
        w.str(name);
        w.u32(t.rank());
        for &e in t.shape() {
            w.u32(e);
        }
        for &x in t.data() {
            w.0.extend_from_slice(&x.as_f64().to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&w.0);
    w.0.extend_from_slice(&crc.to_le_bytes());
    w.0
}

fn mode_code(mode: FinetuneMode) -> u8 {
    match mode {
        FinetuneMode::E2e => 0,
        FinetuneMode::Probe => 1,
    }
}

fn mode_from_code(code: u8) -> Result<FinetuneMode> {
    match code {
        0 => Ok(FinetuneMode::E2e),
        1 => Ok(FinetuneMode::Probe),
        other => Err(CheckpointError::Malformed(format!(
            "unknown fine-tune mode code {other}"
        ))),
    }
}

/// Checks magic, version and CRC, in that order, and parses the body.
fn decode<T: Scalar>(bytes: &[u8]) -> Result<Contents<T>> {
    if bytes.len() < MAGIC.len() || bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic(
            bytes[..bytes.len().min(4)].to_vec(),
        ));
    }
    if bytes.len() < 6 {
        return Err(CheckpointError::Truncated {
            offset: 4,
            needed: 2,
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    if bytes.len() < 10 {
        return Err(CheckpointError::Truncated {
            offset: 6,
            needed: 4,
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::Crc { stored, computed });
    }

    let mut r = Reader {
        bytes: body,
        pos: 6,
    };
    let kind = r.u8()?;
    if kind != KIND_BACKBONE && kind != KIND_FINETUNED {
        return Err(CheckpointError::Malformed(format!(
            "unknown checkpoint kind {kind}"
        )));
    }
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = r.u32()?;
    }
    let config = BackboneConfig {
        d_model: dims[0],
        n_heads: dims[1],
        n_layers: dims[2],
        d_ffn: dims[3],
        max_len: dims[4],
        frame_dim: dims[5],
    };
    let stage_tag = r.str()?;
    let n_stages = r.u32()?;
    let mut provenance = Vec::new();
    for _ in 0..n_stages {
        let code = r.u8()?;
        let strategy = Strategy::from_code(code)
            .ok_or_else(|| CheckpointError::Malformed(format!("unknown strategy code {code}")))?;
        provenance.push(StageRecord {
            strategy,
            domain_id: r.str()?,
        });
    }
    let head = if kind == KIND_FINETUNED {
        let mode = mode_from_code(r.u8()?)?;
        Some((mode, r.u32()?))
    } else {
        None
    };
    let n_tensors = r.u32()?;
    let n_scalars = r.u64()?;
    let mut params = ParamSet::new();
    let mut seen_scalars = 0u64;
    for _ in 0..n_tensors {
        let name = r.str()?;
        let rank = r.u32()?;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32()?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| CheckpointError::Malformed(format!("extents of `{name}` overflow")))?;
        let remaining = (body.len() - r.pos) / 8;
        if numel > remaining {
            return Err(CheckpointError::Truncated {
                offset: r.pos,
                needed: numel * 8,
            });
        }
        let data = (0..numel)
            .map(|_| r.f64().map(T::lit))
            .collect::<Result<Vec<T>>>()?;
        seen_scalars += numel as u64;
        let tensor =
            Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        if params.insert(name.clone(), tensor).is_some() {
            return Err(CheckpointError::Malformed(format!(
                "duplicate parameter `{name}`"
            )));
        }
    }
    if r.pos != body.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes after parameters",
            body.len() - r.pos
        )));
    }
    if seen_scalars != n_scalars {
        return Err(CheckpointError::Inconsistent(format!(
            "header declares {n_scalars} scalars, payload holds {seen_scalars}"
        )));
    }
    Ok(Contents {
        config,
        stage_tag,
        provenance,
        head,
        params,
    })
}

fn snapshot_from<T: Scalar>(
    config: BackboneConfig,
    params: ParamSet<T>,
    stage_tag: String,
    provenance: Vec<StageRecord>,
) -> Result<ModelSnapshot<T>> {
    ModelSnapshot::from_parts(config, params, stage_tag, provenance)
        .map_err(|e| CheckpointError::Inconsistent(e.to_string()))
}

pub fn snapshot_to_bytes<T: Scalar>(snapshot: &ModelSnapshot<T>) -> Vec<u8> {
    encode(
        &snapshot.config,
        &snapshot.stage_tag,
        &snapshot.provenance,
        None,
        snapshot.params.iter(),
    )
}

pub fn snapshot_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<ModelSnapshot<T>> {
    let c = decode::<T>(bytes)?;
    if c.head.is_some() {
        return Err(CheckpointError::Inconsistent(
            "file holds a fine-tuned model, not a backbone".into(),
        ));
    }
    snapshot_from(c.config, c.params, c.stage_tag, c.provenance)
}

pub fn finetuned_to_bytes<T: Scalar>(model: &FinetunedModel<T>) -> Vec<u8> {
    let b = &model.backbone;
    encode(
        &b.config,
        &b.stage_tag,
        &b.provenance,
        Some((model.mode, model.vocab_size())),
        b.params.iter().chain(model.head.iter()),
    )
}

pub fn finetuned_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<FinetunedModel<T>> {
    let c = decode::<T>(bytes)?;
    let Some((mode, vocab)) = c.head else {
        return Err(CheckpointError::Inconsistent(
            "file holds a bare backbone, not a fine-tuned model".into(),
        ));
    };
    let (head, backbone): (ParamSet<T>, ParamSet<T>) = c
        .params
        .into_iter()
        .partition(|(name, _)| name.starts_with(HEAD_PREFIX));
    let d = c.config.d_model;
    let expect = [("ctc.bias", vec![vocab]), ("ctc.weight", vec![d, vocab])];
    if head.len() != expect.len()
        || expect
            .iter()
            .any(|(name, shape)| head.get(*name).map(|t| t.shape()) != Some(shape.as_slice()))
    {
        return Err(CheckpointError::Inconsistent(format!(
            "CTC head does not match d_model {d} and vocabulary size {vocab}"
        )));
    }
    Ok(FinetunedModel {
        backbone: snapshot_from(c.config, backbone, c.stage_tag, c.provenance)?,
        head,
        mode,
    })
}

fn io_err(path: &Path, e: std::io::Error) -> CheckpointError {
    CheckpointError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

pub fn save_checkpoint<T: Scalar>(snapshot: &ModelSnapshot<T>, path: &Path) -> Result<()> {
    write_file(path, &snapshot_to_bytes(snapshot))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ModelSnapshot<T>> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    snapshot_from_bytes(&bytes)
}

pub fn save_finetuned<T: Scalar>(model: &FinetunedModel<T>, path: &Path) -> Result<()> {
    write_file(path, &finetuned_to_bytes(model))
}

pub fn load_finetuned<T: Scalar>(path: &Path) -> Result<FinetunedModel<T>> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    finetuned_from_bytes(&bytes)
}
