//! Twin-tower synonymy model.
//!
//! Each tower maps a token sequence through an embedding layer, a
//! bidirectional LSTM, a pooling step (final states of both directions, or
//! additive attention over the whole output sequence), a ReLU dense layer and
//! a linear dense layer. Both towers share one parameter set. The pair score
//! is `exp(-‖a − b‖₁)` over the two tower outputs, which lies in `(0, 1]`
//! and equals 1 exactly for identical inputs.
//!
//! ```
//! use std::sync::Arc;
//! use synalign::embedding::EmbeddingTable;
//! use synalign::siamese::{SiameseConfig, SiameseModel};
//! use synalign::tokenize::WordTokenizer;
//!
//! let table = EmbeddingTable::random(["cranial", "pains", "headache"], 8, 0.1, 1);
//! let config = SiameseConfig { lstm_hidden: 4, dense1_units: 8, dense2_units: 4, ..SiameseConfig::new(8) };
//! let model = SiameseModel::build(config, &table, Arc::new(WordTokenizer)).unwrap();
//! let s = model.similarity_text("Cranial Pains", "Headache");
//! assert!(s > 0.0 && s < 1.0);
//! assert_eq!(model.similarity_text("Headache", "headache"), 1.0);
//! ```

mod checkpoint;
mod layout;
mod tower;
mod train;

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::seed;
use crate::tokenize::Tokenizer;

pub use checkpoint::{Checkpoint, TensorData, TrainState};
pub use train::{train, Adam, TrainReport, Trainer};

use layout::Layout;

/// Training objective on the similarity score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Loss {
    /// Binary cross-entropy, score clipped to `[1e-7, 1 - 1e-7]`.
    #[default]
    Bce,
    /// Squared error between score and label.
    Mse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiameseConfig {
    pub embed_dim: usize,
    /// Units per LSTM direction.
    pub lstm_hidden: usize,
    pub dense1_units: usize,
    pub dense2_units: usize,
    pub use_attention: bool,
    pub attention_units: usize,
    pub max_tokens: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub threshold: f64,
    pub seed: u64,
    pub trainable_embeddings: bool,
    pub loss: Loss,
}

impl SiameseConfig {
    /// Defaults: Bi-LSTM 50, dense 128 then 50, 30 tokens, Adam at 0.001,
    /// batch 8192, 100 epochs.
    pub fn new(embed_dim: usize) -> Self {
        SiameseConfig {
            embed_dim,
            lstm_hidden: 50,
            dense1_units: 128,
            dense2_units: 50,
            use_attention: false,
            attention_units: 50,
            max_tokens: 30,
            learning_rate: 0.001,
            batch_size: 8192,
            epochs: 100,
            threshold: 0.5,
            seed: 0,
            trainable_embeddings: true,
            loss: Loss::Bce,
        }
    }

    /// Same architecture with batch 256 and 50 epochs.
    pub fn desk_scale(embed_dim: usize) -> Self {
        SiameseConfig {
            batch_size: 256,
            epochs: 50,
            ..Self::new(embed_dim)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let units = [
            ("embed_dim", self.embed_dim),
            ("lstm_hidden", self.lstm_hidden),
            ("dense1_units", self.dense1_units),
            ("dense2_units", self.dense2_units),
            ("attention_units", self.attention_units),
            ("max_tokens", self.max_tokens),
            ("batch_size", self.batch_size),
        ];
        if let Some((name, _)) = units.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "threshold must be in (0,1), got {}",
                self.threshold
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

/// A pair as token-id sequences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedPair {
    pub a: Vec<u32>,
    pub b: Vec<u32>,
    pub label: u8,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub score: f64,
    pub label: u8,
}

/// Name and shape of one weight tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: [usize; 2],
}

/// Embedding row used for tokens missing from the table.
pub const OOV_ROW: u32 = 0;

#[derive(Clone)]
pub struct SiameseModel {
    config: SiameseConfig,
    tokenizer: Arc<dyn Tokenizer>,
    /// Token of embedding row `i + 1`; row 0 is the OOV row.
    vocab: Vec<String>,
    index: HashMap<String, u32>,
    table_sha256: String,
    layout: Layout,
    params: Vec<f64>,
}

impl std::fmt::Debug for SiameseModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SiameseModel")
            .field("config", &self.config)
            .field("tokenizer", &self.tokenizer.tokenizer_id())
            .field("vocab", &self.vocab.len())
            .field("params", &self.params.len())
            .finish()
    }
}

fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize, out: &mut [f64]) {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for x in out {
        *x = rng.gen_range(-limit..limit);
    }
}

impl SiameseModel {
    /// Builds a freshly initialized model. The embedding layer is copied from
    /// `table` (plus its OOV vector); every other weight is drawn from
    /// `config.seed`.
    pub fn build(config: SiameseConfig, table: &EmbeddingTable, tokenizer: Arc<dyn Tokenizer>) -> Result<Self> {
        config.validate()?;
        if table.dim() != config.embed_dim {
            return Err(Error::Config(format!(
                "embedding table has dim {}, config expects {}",
                table.dim(),
                config.embed_dim
            )));
        }
        let vocab: Vec<String> = table.tokens().to_vec();
        let mut model = Self::empty(config, tokenizer, vocab, table.sha256());
        let emb = model.layout.emb;
        emb.row_mut(&mut model.params, 0).copy_from_slice(table.oov_vector());
        for i in 0..table.len() {
            emb.row_mut(&mut model.params, i + 1).copy_from_slice(table.row(i));
        }

        let mut rng = seed::stream(model.config.seed, "siamese-init", 0);
        let layout = model.layout.clone();
        let p = &mut model.params;
        let h = layout.hidden;
        for lstm in [&layout.fw, &layout.bw] {
            glorot(&mut rng, lstm.w_ih.cols, lstm.w_ih.rows, lstm.w_ih.slice_mut(p));
            glorot(&mut rng, lstm.w_hh.cols, lstm.w_hh.rows, lstm.w_hh.slice_mut(p));
            // forget-gate bias starts at 1
            lstm.b.slice_mut(p)[h..2 * h].fill(1.0);
        }
        if let Some(a) = &layout.att {
            glorot(&mut rng, a.w.cols, a.w.rows, a.w.slice_mut(p));
            glorot(&mut rng, a.v.cols, 1, a.v.slice_mut(p));
        }
        glorot(&mut rng, layout.d1w.cols, layout.d1w.rows, layout.d1w.slice_mut(p));
        glorot(&mut rng, layout.d2w.cols, layout.d2w.rows, layout.d2w.slice_mut(p));
        Ok(model)
    }

    fn empty(config: SiameseConfig, tokenizer: Arc<dyn Tokenizer>, vocab: Vec<String>, table_sha256: String) -> Self {
        let index = vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32 + 1))
            .collect();
        let layout = Layout::new(vocab.len() + 1, &config);
        SiameseModel {
            params: vec![0.0; layout.total],
            config,
            tokenizer,
            vocab,
            index,
            table_sha256,
            layout,
        }
    }

    pub fn config(&self) -> &SiameseConfig {
        &self.config
    }

    /// Replaces the training schedule fields (epochs, batch size, learning
    /// rate, threshold) without touching the weights.
    pub fn set_schedule(&mut self, epochs: usize, batch_size: usize, learning_rate: f64) -> Result<()> {
        let mut c = self.config.clone();
        c.epochs = epochs;
        c.batch_size = batch_size;
        c.learning_rate = learning_rate;
        c.validate()?;
        self.config = c;
        Ok(())
    }

    pub fn tokenizer(&self) -> &Arc<dyn Tokenizer> {
        &self.tokenizer
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn embedding_table_sha256(&self) -> &str {
        &self.table_sha256
    }

    /// Tokenizes, truncates to `max_tokens` and maps tokens to embedding rows.
    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        let mut toks = self.tokenizer.tokenize(text);
        toks.truncate(self.config.max_tokens);
        toks.iter()
            .map(|t| self.index.get(t).copied().unwrap_or(OOV_ROW))
            .collect()
    }

    pub fn encode_pair(&self, a: &str, b: &str, label: u8) -> EncodedPair {
        EncodedPair {
            a: self.encode_text(a),
            b: self.encode_text(b),
            label,
        }
    }

    fn clip<'a>(&self, ids: &'a [u32]) -> &'a [u32] {
        &ids[..ids.len().min(self.config.max_tokens)]
    }

    /// Tower output for one token-id sequence.
    pub fn tower(&self, ids: &[u32]) -> Vec<f64> {
        tower::forward(&self.layout, &self.params, self.clip(ids)).out
    }

    /// `exp(-‖tower(a) − tower(b)‖₁)`.
    pub fn similarity(&self, a: &[u32], b: &[u32]) -> f64 {
        similarity_from_outputs(&self.tower(a), &self.tower(b))
    }

    pub fn similarity_text(&self, a: &str, b: &str) -> f64 {
        self.similarity(&self.encode_text(a), &self.encode_text(b))
    }

    /// Scores every pair; label 1 iff `score >= threshold`.
    pub fn predict(&self, pairs: &[EncodedPair], threshold: f64) -> Vec<Prediction> {
        pairs
            .par_iter()
            .map(|p| {
                let score = self.similarity(&p.a, &p.b);
                Prediction {
                    score,
                    label: u8::from(score >= threshold),
                }
            })
            .collect()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn param_tensors(&self) -> Vec<ParamInfo> {
        self.layout
            .named
            .iter()
            .map(|(name, s)| ParamInfo {
                name: name.clone(),
                shape: [s.rows, s.cols],
            })
            .collect()
    }

    /// Range of the embedding rows inside [`params`](Self::params).
    pub fn embedding_range(&self) -> std::ops::Range<usize> {
        self.layout.emb.off..self.layout.emb.off + self.layout.emb.len()
    }

    /// SHA-256 over the little-endian parameter bytes.
    pub fn weights_checksum(&self) -> String {
        let mut h = Sha256::new();
        for x in &self.params {
            h.update(x.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    fn pair_loss_grad(&self, pair: &EncodedPair, grad: &mut [f64]) -> f64 {
        let ta = tower::forward(&self.layout, &self.params, self.clip(&pair.a));
        let tb = tower::forward(&self.layout, &self.params, self.clip(&pair.b));
        let d: f64 = ta.out.iter().zip(&tb.out).map(|(x, y)| (x - y).abs()).sum();
        let (loss, dl_dd) = pair_loss(self.config.loss, d, pair.label);
        let da: Vec<f64> = ta.out.iter().zip(&tb.out).map(|(x, y)| dl_dd * sign(x - y)).collect();
        let db: Vec<f64> = da.iter().map(|v| -v).collect();
        let train_emb = self.config.trainable_embeddings;
        tower::backward(&self.layout, &self.params, grad, &ta, &da, train_emb);
        tower::backward(&self.layout, &self.params, grad, &tb, &db, train_emb);
        loss
    }

    /// Mean loss over `batch` and its gradient. Pairs are processed in fixed
    /// chunks whose partial sums are added in chunk order, so the result does
    /// not depend on the number of worker threads.
    pub fn loss_and_grad(&self, batch: &[EncodedPair]) -> (f64, Vec<f64>) {
        const CHUNK: usize = 16;
        let parts: Vec<(f64, Vec<f64>)> = batch
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut g = vec![0.0; self.params.len()];
                let mut loss = 0.0;
                for p in chunk {
                    loss += self.pair_loss_grad(p, &mut g);
                }
                (loss, g)
            })
            .collect();
        let mut total = 0.0;
        let mut grad = vec![0.0; self.params.len()];
        for (l, g) in parts {
            total += l;
            tower::axpy(1.0, &g, &mut grad);
        }
        let n = batch.len().max(1) as f64;
        for x in &mut grad {
            *x /= n;
        }
        (total / n, grad)
    }

    /// Mean loss without gradients.
    pub fn loss(&self, batch: &[EncodedPair]) -> f64 {
        let losses: Vec<f64> = batch
            .par_iter()
            .map(|p| {
                let d = l1(&self.tower(&p.a), &self.tower(&p.b));
                pair_loss(self.config.loss, d, p.label).0
            })
            .collect();
        losses.iter().sum::<f64>() / batch.len().max(1) as f64
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// `exp(-‖a − b‖₁)`.
pub fn similarity_from_outputs(a: &[f64], b: &[f64]) -> f64 {
    (-l1(a, b)).exp()
}

const BCE_EPS: f64 = 1e-7;

/// Loss value and its derivative with respect to the L1 distance `d`.
pub fn pair_loss(loss: Loss, d: f64, label: u8) -> (f64, f64) {
    let s = (-d).exp();
    let y = f64::from(label);
    match loss {
        Loss::Bce => {
            let clipped = s.clamp(BCE_EPS, 1.0 - BCE_EPS);
            let value = -(y * clipped.ln() + (1.0 - y) * (1.0 - clipped).ln());
            let grad = if clipped != s {
                0.0
            } else {
                // dL/ds * ds/dd with ds/dd = -s
                y - (1.0 - y) * s / (1.0 - s)
            };
            (value, grad)
        }
        Loss::Mse => ((s - y) * (s - y), -2.0 * (s - y) * s),
    }
}

#[cfg(test)]
mod tests;
