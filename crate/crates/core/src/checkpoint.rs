//! Binary checkpoints of trained parameter tables.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic     8 bytes  "DICECKPT"
//! version   u32      1
//! hdr_len   u32      length of the JSON header in bytes
//! header    hdr_len  UTF-8 JSON: {"model", "shapes": [[rows, cols], ...], "meta"}
//! tables    f64 *    every table in header order, row-major
//! ```

use std::io::{Read, Write};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{BaselineKind, CausE, Factorization, FittedBaseline, Penalty};
use crate::model::{CausalEmbeddings, ModelError, ScoreVariant, Scorer, VariantScorer};

pub const MAGIC: &[u8; 8] = b"DICECKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("unknown model '{0}' in checkpoint")]
    UnknownModel(String),
    #[error("model '{model}' has no '{variant}' scoring variant")]
    Variant { model: String, variant: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model: String,
    shapes: Vec<[usize; 2]>,
    meta: serde_json::Value,
}

/// Named tables plus free-form metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: String,
    pub tables: Vec<Array2<f64>>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn write<W: Write>(&self, mut w: W) -> Result<(), CheckpointError> {
        let header = serde_json::to_vec(&Header {
            model: self.model.clone(),
            shapes: self.tables.iter().map(|t| [t.nrows(), t.ncols()]).collect(),
            meta: self.meta.clone(),
        })
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        for t in &self.tables {
            let mut buf = Vec::with_capacity(t.len() * 8);
            for x in t.iter() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        r.read_exact(&mut word)?;
        let mut header = vec![0u8; u32::from_le_bytes(word) as usize];
        r.read_exact(&mut header)?;
        let header: Header = serde_json::from_slice(&header).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let mut tables = Vec::with_capacity(header.shapes.len());
        for [rows, cols] in header.shapes {
            let mut buf = vec![0u8; rows * cols * 8];
            r.read_exact(&mut buf)?;
            let data = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tables
                .push(Array2::from_shape_vec((rows, cols), data).map_err(|e| CheckpointError::Header(e.to_string()))?);
        }
        Ok(Self {
            model: header.model,
            tables,
            meta: header.meta,
        })
    }
}

/// Any model the CLI can train and score.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainedModel {
    Dice(CausalEmbeddings),
    Baseline { kind: BaselineKind, model: FittedBaseline },
}

impl TrainedModel {
    pub fn name(&self) -> &'static str {
        match self {
            TrainedModel::Dice(_) => "dice",
            TrainedModel::Baseline { kind, .. } => kind.name(),
        }
    }

    pub fn tables(&self) -> &[Array2<f64>] {
        match self {
            TrainedModel::Dice(e) => e.tables(),
            TrainedModel::Baseline { model, .. } => model.tables(),
        }
    }

    pub fn n_users(&self) -> usize {
        self.tables()[0].nrows()
    }

    pub fn n_items(&self) -> usize {
        match self {
            TrainedModel::Dice(e) => e.n_items(),
            TrainedModel::Baseline { model, .. } => model.tables()[1].nrows(),
        }
    }

    /// Scoring variants the model supports.
    pub fn variants(&self) -> &'static [ScoreVariant] {
        match self {
            TrainedModel::Dice(_) => &[
                ScoreVariant::Full,
                ScoreVariant::InterestOnly,
                ScoreVariant::ConformityOnly,
            ],
            TrainedModel::Baseline { .. } => &[ScoreVariant::Full],
        }
    }

    pub fn scorer(&self, variant: ScoreVariant) -> Result<Box<dyn Scorer + '_>, CheckpointError> {
        match (self, variant) {
            (TrainedModel::Dice(e), v) => Ok(Box::new(VariantScorer {
                embeddings: e,
                variant: v,
            })),
            (TrainedModel::Baseline { model, .. }, ScoreVariant::Full) => Ok(model.scorer()),
            (m, v) => Err(CheckpointError::Variant {
                model: m.name().to_string(),
                variant: v.short_name().to_string(),
            }),
        }
    }

    pub fn to_checkpoint(&self, meta: serde_json::Value) -> Checkpoint {
        Checkpoint {
            model: self.name().to_string(),
            tables: self.tables().to_vec(),
            meta,
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self, CheckpointError> {
        let want = |n: usize, tables: &Vec<Array2<f64>>| {
            if tables.len() == n {
                Ok(())
            } else {
                Err(CheckpointError::Header(format!(
                    "model '{}' needs {n} tables, found {}",
                    ck.model,
                    tables.len()
                )))
            }
        };
        if ck.model == "dice" {
            want(4, &ck.tables)?;
            let [a, b, c, d]: [Array2<f64>; 4] = ck.tables.try_into().expect("length checked");
            return Ok(TrainedModel::Dice(CausalEmbeddings::from_tables([a, b, c, d])?));
        }
        let kind = BaselineKind::parse(&ck.model).ok_or_else(|| CheckpointError::UnknownModel(ck.model.clone()))?;
        want(4, &ck.tables)?;
        let model = match kind {
            BaselineKind::CausE => FittedBaseline::CausE(CausE {
                tables: ck.tables,
                gamma: 0.0,
                penalty: Penalty::L2,
            }),
            _ => FittedBaseline::Factorization(Factorization {
                tables: ck.tables,
                bias: match kind {
                    BaselineKind::Bias(b) => Some(b),
                    _ => None,
                },
                ips: None,
                freeze_embeddings: false,
                popularity: Vec::new(),
            }),
        };
        Ok(TrainedModel::Baseline { kind, model })
    }
}
