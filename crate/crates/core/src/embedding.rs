//! Token embedding tables, loaded from word2vec text files or extracted from
//! a contextual encoder.
//!
//! Extraction runs every corpus string through the encoder once, pools each
//! token occurrence across layers (last layer, or the mean of the last four)
//! and then collapses occurrences of the same token into one vector (first,
//! last, or mean occurrence). That gives six strategies in total.
//!
//! Means are kept as running means (`m += (x - m) / k`), so a token whose
//! occurrences are all identical gets that exact vector back.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seed;
use crate::tokenize::Tokenizer;

/// Default per-string token cap.
pub const DEFAULT_MAX_TOKENS: usize = 30;

/// Token → vector map with a fixed dimension, an out-of-vocabulary vector
/// (the mean of all entries) and an implicit all-zero pad vector.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    tokens: Vec<String>,
    vectors: Vec<f64>,
    index: HashMap<String, usize>,
    oov: Vec<f64>,
}

impl EmbeddingTable {
    pub fn from_entries<I>(dim: usize, entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, Vec<f64>)>,
    {
        let mut table = EmbeddingTable {
            dim,
            tokens: Vec::new(),
            vectors: Vec::new(),
            index: HashMap::new(),
            oov: vec![0.0; dim],
        };
        for (token, v) in entries {
            table.push(token, &v)?;
        }
        table.refresh_oov();
        Ok(table)
    }

    /// Uniform random vectors in `[-scale, scale]`, one per distinct token in
    /// first-seen order.
    pub fn random<'a, I>(tokens: I, dim: usize, scale: f64, seed: u64) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut rng = seed::stream(seed, "embedding-init", 0);
        let mut table = EmbeddingTable::from_entries(dim, []).expect("empty table");
        for t in tokens {
            if table.index.contains_key(t) {
                continue;
            }
            let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-scale..=scale)).collect();
            table.push(t.to_string(), &v).expect("fresh token");
        }
        table.refresh_oov();
        table
    }

    fn push(&mut self, token: String, v: &[f64]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::Embedding(format!(
                "token {token:?} has {} values, expected {}",
                v.len(),
                self.dim
            )));
        }
        if token.is_empty() || token.chars().any(char::is_whitespace) {
            return Err(Error::Embedding(format!("invalid token {token:?}")));
        }
        if self.index.contains_key(&token) {
            return Err(Error::Embedding(format!("duplicate token {token:?}")));
        }
        self.index.insert(token.clone(), self.tokens.len());
        self.tokens.push(token);
        self.vectors.extend_from_slice(v);
        Ok(())
    }

    fn refresh_oov(&mut self) {
        let mut mean = RunningMean::new(self.dim);
        for row in self.vectors.chunks_exact(self.dim.max(1)) {
            mean.add(row);
        }
        self.oov = mean.into_vec();
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Tokens in table order.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.index.get(token).map(|&i| self.row(i))
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn oov_vector(&self) -> &[f64] {
        &self.oov
    }

    pub fn vector_or_oov(&self, token: &str) -> &[f64] {
        self.get(token).unwrap_or(&self.oov)
    }

    /// `max_tokens × dim` matrix: known tokens map to their vector, unknown
    /// ones to the OOV vector, then zero padding; extra tokens are dropped.
    pub fn lookup<S: AsRef<str>>(&self, tokens: &[S], max_tokens: usize) -> Matrix {
        let mut m = Matrix::zeros(max_tokens, self.dim);
        for (r, t) in tokens.iter().take(max_tokens).enumerate() {
            m.row_mut(r).copy_from_slice(self.vector_or_oov(t.as_ref()));
        }
        m
    }

    /// Reads the word2vec text format: a `count dim` header, then one
    /// `token v1 .. vdim` line per entry.
    pub fn read_word2vec<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::parse(1, "missing `count dim` header"))??;
        let mut it = header.split_whitespace();
        let (count, dim) = match (it.next(), it.next(), it.next()) {
            (Some(c), Some(d), None) => (
                c.parse::<usize>().map_err(|e| Error::parse(1, format!("count: {e}")))?,
                d.parse::<usize>().map_err(|e| Error::parse(1, format!("dim: {e}")))?,
            ),
            _ => return Err(Error::parse(1, "expected `count dim` header")),
        };
        let mut table = EmbeddingTable::from_entries(dim, [])?;
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let token = parts.next().unwrap_or_default().to_string();
            let values = parts
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|e| Error::parse(lineno, format!("token {token:?}: {e}")))?;
            table.push(token, &values)?;
        }
        if table.len() != count {
            return Err(Error::Embedding(format!(
                "header declares {count} entries, file has {}",
                table.len()
            )));
        }
        table.refresh_oov();
        Ok(table)
    }

    /// Writes the word2vec text format with shortest round-trip float text.
    pub fn write_word2vec<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{} {}", self.len(), self.dim)?;
        for (i, t) in self.tokens.iter().enumerate() {
            w.write_all(t.as_bytes())?;
            for x in self.row(i) {
                write!(w, " {x}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// SHA-256 of the word2vec serialization.
    pub fn sha256(&self) -> String {
        let mut buf = Vec::new();
        self.write_word2vec(&mut buf).expect("write to Vec");
        hex::encode(Sha256::digest(&buf))
    }
}

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Streaming elementwise mean.
#[derive(Clone, Debug)]
struct RunningMean {
    mean: Vec<f64>,
    count: u64,
}

impl RunningMean {
    fn new(dim: usize) -> Self {
        RunningMean {
            mean: vec![0.0; dim],
            count: 0,
        }
    }

    fn add(&mut self, x: &[f64]) {
        self.count += 1;
        if self.count == 1 {
            self.mean.copy_from_slice(x);
            return;
        }
        let k = self.count as f64;
        for (m, &v) in self.mean.iter_mut().zip(x) {
            *m += (v - *m) / k;
        }
    }

    fn into_vec(self) -> Vec<f64> {
        self.mean
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Occurrence {
    First,
    Last,
    Average,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerPool {
    LastLayer,
    AvgLast4,
}

/// Occurrence policy × layer pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExtractionStrategy {
    pub occurrence: Occurrence,
    pub layer_pool: LayerPool,
}

impl ExtractionStrategy {
    pub const ALL: [ExtractionStrategy; 6] = [
        Self::new(Occurrence::First, LayerPool::LastLayer),
        Self::new(Occurrence::First, LayerPool::AvgLast4),
        Self::new(Occurrence::Last, LayerPool::LastLayer),
        Self::new(Occurrence::Last, LayerPool::AvgLast4),
        Self::new(Occurrence::Average, LayerPool::LastLayer),
        Self::new(Occurrence::Average, LayerPool::AvgLast4),
    ];

    pub const fn new(occurrence: Occurrence, layer_pool: LayerPool) -> Self {
        ExtractionStrategy { occurrence, layer_pool }
    }
}

impl Default for ExtractionStrategy {
    fn default() -> Self {
        Self::new(Occurrence::Average, LayerPool::AvgLast4)
    }
}

impl fmt::Display for ExtractionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let o = match self.occurrence {
            Occurrence::First => "first",
            Occurrence::Last => "last",
            Occurrence::Average => "average",
        };
        let l = match self.layer_pool {
            LayerPool::LastLayer => "last-layer",
            LayerPool::AvgLast4 => "avg-last4",
        };
        write!(f, "{o}/{l}")
    }
}

impl FromStr for ExtractionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ExtractionStrategy::ALL
            .into_iter()
            .find(|st| st.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown extraction strategy {s:?}")))
    }
}

/// Per-layer hidden states for one token sequence, `[layer][position][dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates {
    pub layers: usize,
    pub len: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl HiddenStates {
    pub fn zeros(layers: usize, len: usize, dim: usize) -> Self {
        HiddenStates {
            layers,
            len,
            dim,
            data: vec![0.0; layers * len * dim],
        }
    }

    pub fn at(&self, layer: usize, pos: usize) -> &[f64] {
        let o = (layer * self.len + pos) * self.dim;
        &self.data[o..o + self.dim]
    }

    pub fn at_mut(&mut self, layer: usize, pos: usize) -> &mut [f64] {
        let o = (layer * self.len + pos) * self.dim;
        &mut self.data[o..o + self.dim]
    }

    /// Pooled vector for one position.
    pub fn pooled(&self, pos: usize, pool: LayerPool) -> Vec<f64> {
        let top = self.layers - 1;
        match pool {
            LayerPool::LastLayer => self.at(top, pos).to_vec(),
            LayerPool::AvgLast4 => {
                let (a, b, c, d) = (
                    self.at(top - 3, pos),
                    self.at(top - 2, pos),
                    self.at(top - 1, pos),
                    self.at(top, pos),
                );
                // pairwise so four identical layers average to themselves exactly
                (0..self.dim).map(|k| ((a[k] + b[k]) + (c[k] + d[k])) * 0.25).collect()
            }
        }
    }
}

/// A pre-trained encoder producing per-layer hidden states. Positions in the
/// output align one-to-one with the input tokens; any special tokens the
/// encoder adds internally are stripped before returning.
pub trait ContextualEncoder: Tokenizer {
    fn name(&self) -> String;
    fn num_layers(&self) -> usize;
    fn hidden_dim(&self) -> usize;
    fn encode(&self, tokens: &[String]) -> Result<HiddenStates>;
}

enum Slot {
    One(Vec<f64>),
    Mean(RunningMean),
}

/// Builds a static table from a contextual encoder.
pub fn extract_contextual_table<E, S>(
    encoder: &E,
    corpus: &[S],
    strategy: ExtractionStrategy,
    max_tokens: usize,
) -> Result<EmbeddingTable>
where
    E: ContextualEncoder + ?Sized,
    S: AsRef<str> + Sync,
{
    if corpus.is_empty() {
        return Err(Error::Embedding("empty corpus".into()));
    }
    let layers = encoder.num_layers();
    let dim = encoder.hidden_dim();
    let enc_err = |message: String| Error::Encoder {
        encoder: encoder.name(),
        message,
    };
    if layers == 0 || (strategy.layer_pool == LayerPool::AvgLast4 && layers < 4) {
        return Err(enc_err(format!("{layers} layer(s) cannot support {strategy}")));
    }

    let mut order: Vec<String> = Vec::new();
    let mut slots: HashMap<String, Slot> = HashMap::new();
    for chunk in corpus.chunks(256) {
        let encoded: Vec<(Vec<String>, HiddenStates)> = chunk
            .par_iter()
            .map(|text| {
                let mut toks = encoder.tokenize(text.as_ref());
                toks.truncate(max_tokens);
                let hidden = encoder.encode(&toks)?;
                if (hidden.layers, hidden.len, hidden.dim) != (layers, toks.len(), dim) {
                    return Err(enc_err(format!(
                        "encode returned shape ({}, {}, {}), expected ({layers}, {}, {dim})",
                        hidden.layers,
                        hidden.len,
                        hidden.dim,
                        toks.len()
                    )));
                }
                Ok((toks, hidden))
            })
            .collect::<Result<_>>()?;
        // aggregation is sequential: first/last depend on corpus order
        for (toks, hidden) in encoded {
            for (pos, tok) in toks.into_iter().enumerate() {
                let v = hidden.pooled(pos, strategy.layer_pool);
                match slots.get_mut(&tok) {
                    None => {
                        let slot = match strategy.occurrence {
                            Occurrence::Average => {
                                let mut m = RunningMean::new(dim);
                                m.add(&v);
                                Slot::Mean(m)
                            }
                            _ => Slot::One(v),
                        };
                        order.push(tok.clone());
                        slots.insert(tok, slot);
                    }
                    Some(Slot::One(old)) => {
                        if strategy.occurrence == Occurrence::Last {
                            *old = v;
                        }
                    }
                    Some(Slot::Mean(m)) => m.add(&v),
                }
            }
        }
    }
    if order.is_empty() {
        return Err(Error::Embedding("corpus produced no tokens".into()));
    }
    let entries = order.into_iter().map(|tok| {
        let v = match slots.remove(&tok) {
            Some(Slot::One(v)) => v,
            Some(Slot::Mean(m)) => m.into_vec(),
            None => unreachable!("every ordered token has a slot"),
        };
        (tok, v)
    });
    EmbeddingTable::from_entries(dim, entries)
}

/// Deterministic encoders with closed-form outputs, for tests and examples.
pub mod fixtures {
    use super::*;
    use crate::tokenize::WhitespaceTokenizer;

    /// Hidden state at `(layer, position)` is the constant vector
    /// `layer + position`. Whitespace tokenization.
    #[derive(Clone, Debug)]
    pub struct MockEncoder {
        pub dim: usize,
        pub layers: usize,
    }

    impl MockEncoder {
        pub fn new(dim: usize, layers: usize) -> Self {
            MockEncoder { dim, layers }
        }
    }

    impl Tokenizer for MockEncoder {
        fn tokenizer_id(&self) -> String {
            WhitespaceTokenizer.tokenizer_id()
        }

        fn tokenize(&self, text: &str) -> Vec<String> {
            WhitespaceTokenizer.tokenize(text)
        }
    }

    impl ContextualEncoder for MockEncoder {
        fn name(&self) -> String {
            "mock".into()
        }

        fn num_layers(&self) -> usize {
            self.layers
        }

        fn hidden_dim(&self) -> usize {
            self.dim
        }

        fn encode(&self, tokens: &[String]) -> Result<HiddenStates> {
            let mut h = HiddenStates::zeros(self.layers, tokens.len(), self.dim);
            for l in 0..self.layers {
                for p in 0..tokens.len() {
                    h.at_mut(l, p).fill((l + p) as f64);
                }
            }
            Ok(h)
        }
    }

    /// Same hidden vector everywhere.
    #[derive(Clone, Debug)]
    pub struct ConstantEncoder {
        pub value: Vec<f64>,
        pub layers: usize,
    }

    impl Tokenizer for ConstantEncoder {
        fn tokenizer_id(&self) -> String {
            WhitespaceTokenizer.tokenizer_id()
        }

        fn tokenize(&self, text: &str) -> Vec<String> {
            WhitespaceTokenizer.tokenize(text)
        }
    }

    impl ContextualEncoder for ConstantEncoder {
        fn name(&self) -> String {
            "constant".into()
        }

        fn num_layers(&self) -> usize {
            self.layers
        }

        fn hidden_dim(&self) -> usize {
            self.value.len()
        }

        fn encode(&self, tokens: &[String]) -> Result<HiddenStates> {
            let mut h = HiddenStates::zeros(self.layers, tokens.len(), self.value.len());
            for l in 0..self.layers {
                for p in 0..tokens.len() {
                    h.at_mut(l, p).copy_from_slice(&self.value);
                }
            }
            Ok(h)
        }
    }
}
