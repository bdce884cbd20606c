//! Line-oriented dataset files.
//!
//! The first line is a [`DatasetHeader`]; every following line is one
//! [`Record`]. Both are JSON objects. Floats are written in their
//! shortest round-trip form, so regeneration with the same seeds yields
//! byte-identical files and loading restores every frame bit-for-bit.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{
    generate_split, CorpusSizes, DomainSpec, Split, Utterance, GENERATOR_VERSION,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_FORMAT: &str = "fusdom-dataset";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format: String,
    pub generator_version: u32,
    pub domain_id: String,
    pub split: Split,
    pub frame_dim: usize,
    /// Label symbols, excluding the blank.
    pub vocab_size: usize,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub domain_id: String,
    pub seed: u64,
    pub tokens: Option<Vec<usize>>,
    pub frames: Vec<Vec<f64>>,
}

impl Record {
    pub fn from_utterance(u: &Utterance) -> Self {
        Self {
            domain_id: u.domain_id.clone(),
            seed: u.seed,
            tokens: u.tokens.clone(),
            frames: (0..u.frames.rows())
                .map(|r| u.frames.row(r).to_vec())
                .collect(),
        }
    }

    pub fn into_utterance(self) -> Result<Utterance> {
        Ok(Utterance {
            frames: Tensor::from_rows(&self.frames)?,
            tokens: self.tokens,
            domain_id: self.domain_id,
            seed: self.seed,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub utterances: Vec<Utterance>,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

pub fn split_path(dir: &Path, domain_id: &str, split: Split) -> PathBuf {
    dir.join(format!("{domain_id}.{}.jsonl", split.as_str()))
}

pub fn write_dataset(path: &Path, header: &DatasetHeader, utterances: &[Utterance]) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let mut line = |value: serde_json::Result<String>| -> Result<()> {
        let text = value.map_err(|e| io_err(path, e))?;
        writeln!(w, "{text}").map_err(|e| io_err(path, e))
    };
    line(serde_json::to_string(header))?;
    for u in utterances {
        line(serde_json::to_string(&Record::from_utterance(u)))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let parse_err =
        |n: usize, e: serde_json::Error| Error::Data(format!("{}:{}: {e}", path.display(), n + 1));
    let (n, first) = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: missing header line", path.display())))?;
    let first = first.map_err(|e| io_err(path, e))?;
    let header: DatasetHeader = serde_json::from_str(&first).map_err(|e| parse_err(n, e))?;
    if header.format != DATASET_FORMAT {
        return Err(Error::Data(format!(
            "{}: unexpected format `{}`",
            path.display(),
            header.format
        )));
    }
    let mut utterances = Vec::with_capacity(header.count);
    for (n, line) in lines {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| parse_err(n, e))?;
        let u = record.into_utterance()?;
        if u.frames.cols() != header.frame_dim {
            return Err(Error::Data(format!(
                "{}:{}: frame width {} but header says {}",
                path.display(),
                n + 1,
                u.frames.cols(),
                header.frame_dim
            )));
        }
        utterances.push(u);
    }
    if utterances.len() != header.count {
        return Err(Error::Data(format!(
            "{}: header announces {} records, found {}",
            path.display(),
            header.count,
            utterances.len()
        )));
    }
    Ok(Dataset { header, utterances })
}

/// Generates every split of `spec` and writes one file per split into
/// `dir`. Returns the written paths in split order.
pub fn build_corpus(
    spec: &DomainSpec,
    sizes: &CorpusSizes,
    master_seed: u64,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    Split::ALL
        .iter()
        .map(|&split| {
            let n = sizes.get(split);
            let utterances = generate_split(spec, split, n, master_seed);
            let header = DatasetHeader {
                format: DATASET_FORMAT.into(),
                generator_version: GENERATOR_VERSION,
                domain_id: spec.domain_id.clone(),
                split,
                frame_dim: spec.frame_dim(),
                vocab_size: spec.vocab_size,
                count: n,
            };
            let path = split_path(dir, &spec.domain_id, split);
            write_dataset(&path, &header, &utterances)?;
            Ok(path)
        })
        .collect()
}
