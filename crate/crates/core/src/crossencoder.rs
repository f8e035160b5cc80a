//! Zero-shot pair classification with a cross-encoder.
//!
//! Both strings go through the encoder together as
//! `[CLS] a [SEP] b [SEP]`, and a pair-level head returns the probability
//! that the two segments are related. A high probability is read as
//! "synonymous" unless the run is configured with the inverted polarity.
//! Because the encoder sees the strings jointly, swapping them can change the
//! score, so every run records which order it used.
//!
//! ```
//! use synalign::crossencoder::{format_pair, CLS, SEP};
//! use synalign::tokenize::WordTokenizer;
//!
//! let input = format_pair("Headache", "Headaches", &WordTokenizer, 64).unwrap();
//! assert_eq!(input.tokens, [CLS, "headache", SEP, "headaches", SEP]);
//! assert_eq!(input.segments, [0, 0, 0, 1, 1]);
//! ```

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::ContextualEncoder;
use crate::error::{Error, Result};
use crate::evalreport::{ConfusionMatrix, MetricsRow};
use crate::pairgen::PairRecord;
use crate::tokenize::Tokenizer;

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const DEFAULT_MAX_LEN: usize = 64;

/// Which head produced the pair probability.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    /// The pre-trained next-sentence head.
    #[default]
    NextSentence,
    /// A classification head that was never trained.
    Untrained,
}

impl HeadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::NextSentence => "nsp",
            HeadKind::Untrained => "untrained-head",
        }
    }
}

/// Token sequence with BERT-style segment ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentedInput {
    pub tokens: Vec<String>,
    pub segments: Vec<u8>,
}

impl SegmentedInput {
    /// Tokens of the first and second segment, without specials.
    pub fn parts(&self) -> (&[String], &[String]) {
        let first_sep = self.tokens.iter().position(|t| t == SEP).unwrap_or(self.tokens.len());
        let end = self.tokens.len().saturating_sub(1).max(first_sep);
        let a = &self.tokens[1.min(first_sep)..first_sep];
        let b = &self.tokens[(first_sep + 1).min(end)..end];
        (a, b)
    }
}

/// Lays out `[CLS] a [SEP] b [SEP]` and trims it to `max_len` by removing
/// tokens from the end of whichever segment is longer, the second one on
/// ties. With `max_len >= 5` a non-empty segment is never emptied.
pub fn format_pair<T: Tokenizer + ?Sized>(a: &str, b: &str, tokenizer: &T, max_len: usize) -> Result<SegmentedInput> {
    if max_len < 3 {
        return Err(Error::Config(format!("max_len must be at least 3, got {max_len}")));
    }
    let mut ta = tokenizer.tokenize(a);
    let mut tb = tokenizer.tokenize(b);
    while ta.len() + tb.len() + 3 > max_len {
        if ta.len() > tb.len() {
            ta.pop();
        } else {
            tb.pop();
        }
    }
    let mut tokens = Vec::with_capacity(ta.len() + tb.len() + 3);
    tokens.push(CLS.to_string());
    tokens.extend(ta);
    tokens.push(SEP.to_string());
    let first = tokens.len();
    tokens.extend(tb);
    tokens.push(SEP.to_string());
    let segments = (0..tokens.len()).map(|i| u8::from(i >= first)).collect();
    Ok(SegmentedInput { tokens, segments })
}

/// An encoder with a pair-classification head.
pub trait PairClassifierEncoder: ContextualEncoder {
    fn head(&self) -> HeadKind;

    /// Probability in `[0, 1]` that the two segments are related.
    /// Must be deterministic for a fixed input.
    fn classify_pair(&self, input: &SegmentedInput) -> Result<f64>;
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Order {
    /// `[CLS] str1 [SEP] str2 [SEP]`
    #[default]
    #[serde(rename = "ij")]
    Forward,
    /// `[CLS] str2 [SEP] str1 [SEP]`
    #[serde(rename = "ji")]
    Swapped,
}

impl Order {
    pub const BOTH: [Order; 2] = [Order::Forward, Order::Swapped];

    pub fn as_str(self) -> &'static str {
        match self {
            Order::Forward => "ij",
            Order::Swapped => "ji",
        }
    }

    pub fn arrange<'a>(self, a: &'a str, b: &'a str) -> (&'a str, &'a str) {
        match self {
            Order::Forward => (a, b),
            Order::Swapped => (b, a),
        }
    }
}

impl fmt::Display for Order {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Order {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ij" | "(i,j)" => Ok(Order::Forward),
            "ji" | "(j,i)" => Ok(Order::Swapped),
            _ => Err(Error::Config(format!("unknown order {s:?}, expected ij or ji"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossEncoderSettings {
    pub max_len: usize,
    pub threshold: f64,
    /// Treat a high head probability as "not synonymous".
    pub invert: bool,
}

impl Default for CrossEncoderSettings {
    fn default() -> Self {
        CrossEncoderSettings {
            max_len: DEFAULT_MAX_LEN,
            threshold: 0.5,
            invert: false,
        }
    }
}

/// Score and predicted label for one ordered pair. The score is already
/// flipped when `invert` is set; label 1 means synonymous.
pub fn predict_pair<E: PairClassifierEncoder + ?Sized>(
    encoder: &E,
    first: &str,
    second: &str,
    settings: &CrossEncoderSettings,
) -> Result<(f64, u8)> {
    let input = format_pair(first, second, encoder, settings.max_len)?;
    let context = |message: String| Error::Encoder {
        encoder: encoder.name(),
        message: format!("pair ({first:?}, {second:?}): {message}"),
    };
    let p = encoder.classify_pair(&input).map_err(|e| context(e.to_string()))?;
    if !(0.0..=1.0).contains(&p) {
        return Err(context(format!("probability {p} outside [0, 1]")));
    }
    let score = if settings.invert { 1.0 - p } else { p };
    Ok((score, u8::from(score >= settings.threshold)))
}

/// One scored pair of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub aui1: String,
    pub aui2: String,
    pub score: f64,
    pub label: u8,
    pub pred: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossEncoderRun {
    pub model: String,
    pub head: HeadKind,
    pub order: Order,
    pub threshold: f64,
    pub row: MetricsRow,
    pub scores: Vec<ScoredPair>,
}

const SHARD: usize = 64;

/// Scores every pair in `order` and summarizes the run as a metrics row
/// whose config column names the head and the order.
pub fn evaluate_ordered<E: PairClassifierEncoder + ?Sized>(
    encoder: &E,
    pairs: &[PairRecord],
    order: Order,
    settings: &CrossEncoderSettings,
) -> Result<CrossEncoderRun> {
    if pairs.is_empty() {
        return Err(Error::Eval("no pairs to evaluate".into()));
    }
    let shards: Vec<Result<(ConfusionMatrix, Vec<ScoredPair>)>> = pairs
        .par_chunks(SHARD)
        .map(|shard| {
            let mut cm = ConfusionMatrix::default();
            let mut scored = Vec::with_capacity(shard.len());
            for r in shard {
                let (first, second) = order.arrange(&r.str1, &r.str2);
                let (score, pred) = predict_pair(encoder, first, second, settings)?;
                cm.record(pred == 1, r.pair.label == 1);
                scored.push(ScoredPair {
                    aui1: r.pair.a.clone(),
                    aui2: r.pair.b.clone(),
                    score,
                    label: r.pair.label,
                    pred,
                });
            }
            Ok((cm, scored))
        })
        .collect();
    let mut cm = ConfusionMatrix::default();
    let mut scores = Vec::with_capacity(pairs.len());
    for shard in shards {
        let (c, s) = shard?;
        cm = cm.merge(c);
        scores.extend(s);
    }
    let config = format!("{} {}", encoder.head().as_str(), order.as_str());
    Ok(CrossEncoderRun {
        model: encoder.name(),
        head: encoder.head(),
        order,
        threshold: settings.threshold,
        row: MetricsRow::new(encoder.name(), config, settings.threshold, cm),
        scores,
    })
}

pub const SCORE_DUMP_HEADER: &str = "aui1\taui2\torder\tscore\tlabel\tpred";

/// Writes the per-pair scores of each run as TSV.
pub fn write_score_dump<'a, I, W>(runs: I, mut w: W) -> Result<()>
where
    I: IntoIterator<Item = &'a CrossEncoderRun>,
    W: Write,
{
    writeln!(w, "{SCORE_DUMP_HEADER}")?;
    for run in runs {
        for s in &run.scores {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{}",
                s.aui1, s.aui2, run.order, s.score, s.label, s.pred
            )?;
        }
    }
    Ok(())
}

/// Pair classifiers with closed-form scores, for tests and examples.
pub mod fixtures {
    use super::*;
    use crate::embedding::HiddenStates;
    use crate::tokenize::WordTokenizer;

    macro_rules! stub_encoder {
        ($ty:ty, $name:expr) => {
            impl Tokenizer for $ty {
                fn tokenizer_id(&self) -> String {
                    WordTokenizer.tokenizer_id()
                }

                fn tokenize(&self, text: &str) -> Vec<String> {
                    WordTokenizer.tokenize(text)
                }
            }

            impl ContextualEncoder for $ty {
                fn name(&self) -> String {
                    $name(self)
                }

                fn num_layers(&self) -> usize {
                    1
                }

                fn hidden_dim(&self) -> usize {
                    1
                }

                fn encode(&self, tokens: &[String]) -> Result<HiddenStates> {
                    Ok(HiddenStates::zeros(1, tokens.len(), 1))
                }
            }
        };
    }

    /// Same probability for every pair.
    #[derive(Clone, Copy, Debug)]
    pub struct ConstantPairEncoder(pub f64);

    stub_encoder!(ConstantPairEncoder, |s: &ConstantPairEncoder| format!(
        "constant-{}",
        s.0
    ));

    impl PairClassifierEncoder for ConstantPairEncoder {
        fn head(&self) -> HeadKind {
            HeadKind::NextSentence
        }

        fn classify_pair(&self, _: &SegmentedInput) -> Result<f64> {
            Ok(self.0)
        }
    }

    /// Jaccard overlap of the two segments' token sets, which does not
    /// depend on their order.
    #[derive(Clone, Copy, Debug, Default)]
    pub struct SymmetricStub;

    stub_encoder!(SymmetricStub, |_: &SymmetricStub| "symmetric-stub".to_string());

    impl PairClassifierEncoder for SymmetricStub {
        fn head(&self) -> HeadKind {
            HeadKind::NextSentence
        }

        fn classify_pair(&self, input: &SegmentedInput) -> Result<f64> {
            let (a, b) = input.parts();
            let a: std::collections::BTreeSet<&String> = a.iter().collect();
            let b: std::collections::BTreeSet<&String> = b.iter().collect();
            let union = a.union(&b).count();
            Ok(if union == 0 {
                1.0
            } else {
                a.intersection(&b).count() as f64 / union as f64
            })
        }
    }

    /// 1 when the first segment sorts strictly before the second, else 0.
    #[derive(Clone, Copy, Debug, Default)]
    pub struct LexOrderStub;

    stub_encoder!(LexOrderStub, |_: &LexOrderStub| "lex-order-stub".to_string());

    impl PairClassifierEncoder for LexOrderStub {
        fn head(&self) -> HeadKind {
            HeadKind::Untrained
        }

        fn classify_pair(&self, input: &SegmentedInput) -> Result<f64> {
            let (a, b) = input.parts();
            Ok(if a < b { 1.0 } else { 0.0 })
        }
    }
}
