//! Lexical similarity between atom strings and an inverted index over it.
//!
//! The index answers "which atoms share at least one feature with this one",
//! which is exactly the set of atoms with a non-zero score under any
//! overlap-based measure. Hard-negative mining and the similar/dissimilar
//! negative strata are built on top of it.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use crate::atoms::AtomStore;
use crate::error::{Error, Result};

/// Lowercased word tokens of `text`, split on every non-alphanumeric
/// character, as a set.
///
/// ```
/// let t = synalign::lexsim::word_tokenize("Headache (finding)");
/// assert_eq!(t.into_iter().collect::<Vec<_>>(), ["finding", "headache"]);
/// ```
pub fn word_tokenize(text: &str) -> BTreeSet<String> {
    word_sequence(text).collect()
}

/// Same split as [`word_tokenize`] but keeps order and repeats.
pub fn word_sequence(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// Word tokens of one atom.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSet {
    pub tokens: BTreeSet<String>,
    pub source_aui: String,
}

impl TokenSet {
    pub fn from_atom(atom: &crate::atoms::Atom) -> Self {
        TokenSet {
            tokens: word_tokenize(&atom.text),
            source_aui: atom.aui.clone(),
        }
    }
}

/// `|a ∩ b| / |a ∪ b|`, zero when both sets are empty.
pub fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let inter = a.intersection(b).count();
    WordJaccard.score(inter, a.len(), b.len())
}

/// An overlap-based similarity: features per string plus a score computed
/// from the overlap count and the two feature-set sizes. Any such measure is
/// zero exactly when the feature sets are disjoint.
pub trait LexicalMeasure: Send + Sync {
    fn name(&self) -> &'static str;
    fn features(&self, text: &str) -> BTreeSet<String>;
    fn score(&self, overlap: usize, a_len: usize, b_len: usize) -> f64;
}

/// Word-token Jaccard. The default measure.
#[derive(Clone, Copy, Debug, Default)]
pub struct WordJaccard;

impl LexicalMeasure for WordJaccard {
    fn name(&self) -> &'static str {
        "word-jaccard"
    }

    fn features(&self, text: &str) -> BTreeSet<String> {
        word_tokenize(text)
    }

    fn score(&self, overlap: usize, a_len: usize, b_len: usize) -> f64 {
        let union = a_len + b_len - overlap;
        if union == 0 {
            0.0
        } else {
            overlap as f64 / union as f64
        }
    }
}

/// Dice coefficient over padded character trigrams of each word.
#[derive(Clone, Copy, Debug, Default)]
pub struct TrigramDice;

impl LexicalMeasure for TrigramDice {
    fn name(&self) -> &'static str {
        "trigram-dice"
    }

    fn features(&self, text: &str) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for word in word_sequence(text) {
            let padded: Vec<char> = format!("^{word}$").chars().collect();
            for w in padded.windows(3) {
                out.insert(w.iter().collect());
            }
        }
        out
    }

    fn score(&self, overlap: usize, a_len: usize, b_len: usize) -> f64 {
        if a_len + b_len == 0 {
            0.0
        } else {
            2.0 * overlap as f64 / (a_len + b_len) as f64
        }
    }
}

/// Inverted index from feature to atoms, aligned with an [`AtomStore`]'s
/// atom indices.
#[derive(Clone)]
pub struct SimilarityIndex {
    measure: Arc<dyn LexicalMeasure>,
    vocab: HashMap<String, u32>,
    /// Sorted feature ids per atom.
    features: Vec<Vec<u32>>,
    /// Sorted atom indices per feature id.
    postings: Vec<Vec<u32>>,
}

impl std::fmt::Debug for SimilarityIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SimilarityIndex")
            .field("measure", &self.measure.name())
            .field("atoms", &self.features.len())
            .field("features", &self.postings.len())
            .finish()
    }
}

impl SimilarityIndex {
    pub fn build(store: &AtomStore) -> Self {
        Self::build_with(store, Arc::new(WordJaccard))
    }

    pub fn build_with(store: &AtomStore, measure: Arc<dyn LexicalMeasure>) -> Self {
        let mut vocab: HashMap<String, u32> = HashMap::new();
        let mut postings: Vec<Vec<u32>> = Vec::new();
        let mut features = Vec::with_capacity(store.len());
        for (idx, atom) in store.atoms().iter().enumerate() {
            let mut ids: Vec<u32> = measure
                .features(&atom.text)
                .into_iter()
                .map(|tok| {
                    let next = vocab.len() as u32;
                    *vocab.entry(tok).or_insert_with(|| {
                        postings.push(Vec::new());
                        next
                    })
                })
                .collect();
            ids.sort_unstable();
            for &id in &ids {
                postings[id as usize].push(idx as u32);
            }
            features.push(ids);
        }
        SimilarityIndex {
            measure,
            vocab,
            features,
            postings,
        }
    }

    pub fn measure(&self) -> &dyn LexicalMeasure {
        self.measure.as_ref()
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.postings.len()
    }

    /// Atom indices carrying `feature`, ascending.
    pub fn postings(&self, feature: &str) -> &[u32] {
        self.vocab
            .get(feature)
            .map(|&id| self.postings[id as usize].as_slice())
            .unwrap_or(&[])
    }

    pub fn feature_count(&self, atom: usize) -> usize {
        self.features[atom].len()
    }

    /// All atoms sharing at least one feature with `atom`, including `atom`
    /// itself when it has any features, ascending by index.
    pub fn candidates(&self, atom: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self.overlaps(atom).into_iter().map(|(j, _)| j).collect();
        if !self.features[atom].is_empty() {
            let pos = out.binary_search(&atom).unwrap_err();
            out.insert(pos, atom);
        }
        out
    }

    /// `(other, overlap)` for every other atom with a non-zero overlap,
    /// ascending by index.
    pub fn overlaps(&self, atom: usize) -> Vec<(usize, usize)> {
        let mut hits: Vec<u32> = self.features[atom]
            .iter()
            .flat_map(|&f| self.postings[f as usize].iter().copied())
            .filter(|&j| j as usize != atom)
            .collect();
        hits.sort_unstable();
        let mut out = Vec::new();
        for run in hits.chunk_by(|a, b| a == b) {
            out.push((run[0] as usize, run.len()));
        }
        out
    }

    /// Similarity between two atoms by index.
    pub fn score(&self, a: usize, b: usize) -> f64 {
        let (fa, fb) = (&self.features[a], &self.features[b]);
        let mut overlap = 0;
        let (mut i, mut j) = (0, 0);
        while i < fa.len() && j < fb.len() {
            match fa[i].cmp(&fb[j]) {
                Ordering::Less => i += 1,
                Ordering::Greater => j += 1,
                Ordering::Equal => {
                    overlap += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        self.measure.score(overlap, fa.len(), fb.len())
    }

    /// Scores of every non-synonymous atom with a positive score against
    /// `anchor`, ranked by score descending then AUI ascending.
    pub fn ranked_negatives(&self, store: &AtomStore, anchor: usize) -> Vec<(usize, f64)> {
        let cui = &store.atom(anchor).cui;
        let na = self.features[anchor].len();
        let mut scored: Vec<(usize, f64)> = self
            .overlaps(anchor)
            .into_iter()
            .filter(|&(j, _)| &store.atom(j).cui != cui)
            .map(|(j, ov)| (j, self.measure.score(ov, na, self.features[j].len())))
            .filter(|&(_, s)| s > 0.0)
            .collect();
        scored.sort_by(|x, y| {
            y.1.total_cmp(&x.1)
                .then_with(|| store.atom(x.0).aui.cmp(&store.atom(y.0).aui))
        });
        scored
    }

    /// The `n` highest-scoring non-synonymous atoms for `anchor`.
    pub fn top_n_by_index(&self, store: &AtomStore, anchor: usize, n: usize) -> Vec<(usize, f64)> {
        if n == 0 {
            return Vec::new();
        }
        let mut ranked = self.ranked_negatives(store, anchor);
        ranked.truncate(n);
        ranked
    }
}

/// AUI-level wrapper around [`SimilarityIndex::top_n_by_index`].
pub fn top_n_similar_negatives(
    index: &SimilarityIndex,
    store: &AtomStore,
    anchor: &str,
    n: usize,
) -> Result<Vec<(String, f64)>> {
    let idx = store
        .index_of(anchor)
        .ok_or_else(|| Error::UnknownAui(anchor.to_string()))?;
    Ok(index
        .top_n_by_index(store, idx, n)
        .into_iter()
        .map(|(j, s)| (store.atom(j).aui.clone(), s))
        .collect())
}
