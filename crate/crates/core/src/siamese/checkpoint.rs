//! JSON checkpoints. A checkpoint carries everything needed to rebuild the
//! model bit for bit, plus optimizer state when it was written mid-training.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::train::{Adam, TrainReport, Trainer};
use super::{SiameseConfig, SiameseModel};
use crate::error::{Error, Result};
use crate::tokenize::Tokenizer;

pub const CHECKPOINT_FORMAT: &str = "synalign-siamese";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorData {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub adam: Adam,
    pub report: TrainReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: SiameseConfig,
    pub config_hash: String,
    pub tokenizer: String,
    pub embedding_table_sha256: String,
    /// Tokens of embedding rows 1..; row 0 is the OOV row.
    pub vocab: Vec<String>,
    pub tensors: Vec<TensorData>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_state: Option<TrainState>,
}

impl Checkpoint {
    pub fn from_model(model: &SiameseModel) -> Self {
        let tensors = model
            .layout
            .named
            .iter()
            .map(|(name, s)| TensorData {
                name: name.clone(),
                shape: [s.rows, s.cols],
                data: s.slice(&model.params).to_vec(),
            })
            .collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: model.config.clone(),
            config_hash: model.config.hash(),
            tokenizer: model.tokenizer.tokenizer_id(),
            embedding_table_sha256: model.table_sha256.clone(),
            vocab: model.vocab.clone(),
            tensors,
            train_state: None,
        }
    }

    pub fn from_trainer(trainer: &Trainer) -> Self {
        let mut c = Self::from_model(&trainer.model);
        c.train_state = Some(TrainState {
            adam: trainer.adam.clone(),
            report: trainer.report.clone(),
        });
        c
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let c: Checkpoint = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        if c.format != CHECKPOINT_FORMAT || c.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format {} v{}",
                c.format, c.version
            )));
        }
        if c.config.hash() != c.config_hash {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: stored {}, computed {}",
                c.config_hash,
                c.config.hash()
            )));
        }
        Ok(c)
    }

    /// Rebuilds the model. `tokenizer` must report the id stored in the
    /// checkpoint.
    pub fn into_model(self, tokenizer: Arc<dyn Tokenizer>) -> Result<SiameseModel> {
        self.restore(tokenizer).map(|(m, _)| m)
    }

    /// Rebuilds a trainer that continues from the stored optimizer state.
    pub fn into_trainer(self, tokenizer: Arc<dyn Tokenizer>) -> Result<Trainer> {
        let (model, state) = self.restore(tokenizer)?;
        let state = state.ok_or_else(|| Error::Checkpoint("no training state stored".into()))?;
        if state.adam.m.len() != model.num_params() || state.adam.v.len() != model.num_params() {
            return Err(Error::Checkpoint("optimizer state size does not match model".into()));
        }
        Ok(Trainer {
            model,
            adam: state.adam,
            report: state.report,
        })
    }

    fn restore(self, tokenizer: Arc<dyn Tokenizer>) -> Result<(SiameseModel, Option<TrainState>)> {
        if tokenizer.tokenizer_id() != self.tokenizer {
            return Err(Error::Checkpoint(format!(
                "tokenizer mismatch: checkpoint uses {}, got {}",
                self.tokenizer,
                tokenizer.tokenizer_id()
            )));
        }
        self.config.validate()?;
        let mut model = SiameseModel::empty(self.config, tokenizer, self.vocab, self.embedding_table_sha256);
        let named = model.layout.named.clone();
        if named.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                named.len(),
                self.tensors.len()
            )));
        }
        for ((name, seg), t) in named.iter().zip(&self.tensors) {
            if *name != t.name || [seg.rows, seg.cols] != t.shape || t.data.len() != seg.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} {:?} does not match expected {} [{}, {}]",
                    t.name, t.shape, name, seg.rows, seg.cols
                )));
            }
            seg.slice_mut(&mut model.params).copy_from_slice(&t.data);
        }
        Ok((model, self.train_state))
    }
}
