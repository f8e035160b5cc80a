//! Seeded synthetic atom corpora.
//!
//! Each concept gets a core term made of invented stem words, optionally with
//! a generic modifier shared across concepts. Its atoms are variants of that
//! core produced by morphological and layout perturbations, spread over a
//! fixed set of pseudo-sources. Shared modifiers give the negative sampler
//! real lexical overlap between unrelated concepts to mine.
//!
//! ```
//! use synalign::synth::{synthesize, SynthSpec};
//!
//! let store = synthesize(&SynthSpec { concepts: 10, ..SynthSpec::default() }).unwrap();
//! assert_eq!(store.num_concepts(), 10);
//! assert!(store.len() >= 20 && store.len() <= 50);
//! ```

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::atoms::{Atom, AtomStore};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub concepts: usize,
    pub min_atoms: usize,
    pub max_atoms: usize,
    pub sources: Vec<String>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            concepts: 200,
            min_atoms: 2,
            max_atoms: 5,
            sources: vec!["SRCA".into(), "SRCB".into(), "SRCC".into()],
            seed: 7,
        }
    }
}

const ONSETS: &[&str] = &[
    "b", "c", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "cr", "dr", "gl", "pl", "st",
    "tr", "ch", "ph", "th",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ae", "io", "y"];
const CODAS: &[&str] = &["", "", "n", "r", "s", "l", "x", "m"];

const MODIFIERS: &[&str] = &[
    "acute",
    "chronic",
    "primary",
    "secondary",
    "congenital",
    "left",
    "right",
    "lower",
    "upper",
    "severe",
];
const HEADS: &[&str] = &[
    "disorder",
    "syndrome",
    "disease",
    "lesion",
    "infection",
    "pain",
    "deficiency",
    "neoplasm",
];
const QUALIFIERS: &[&str] = &["(finding)", "(disorder)", "NOS", ", unspecified", "[ambiguous]"];
const SUFFIXES: &[(&str, &str)] = &[
    ("", "s"),
    ("", "al"),
    ("", "ic"),
    ("", "ia"),
    ("a", "ae"),
    ("is", "es"),
    ("ia", "ic"),
];

fn stem(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.gen_range(2..=3);
    let mut s = String::new();
    for _ in 0..syllables {
        s.push_str(ONSETS.choose(rng).unwrap());
        s.push_str(VOWELS.choose(rng).unwrap());
        s.push_str(CODAS.choose(rng).unwrap());
    }
    s
}

/// Inflects one word: replaces a matching ending, or appends.
fn inflect(word: &str, rng: &mut ChaCha8Rng) -> String {
    let matching: Vec<&(&str, &str)> = SUFFIXES
        .iter()
        .filter(|(from, _)| !from.is_empty() && word.ends_with(from))
        .collect();
    if let Some((from, to)) = matching.choose(rng).filter(|_| rng.gen_bool(0.5)) {
        format!("{}{}", &word[..word.len() - from.len()], to)
    } else {
        let (_, to) = SUFFIXES[rng.gen_range(0..5)];
        format!("{word}{to}")
    }
}

#[derive(Clone, Debug)]
struct Core {
    stems: Vec<String>,
    modifier: Option<&'static str>,
    head: Option<&'static str>,
}

impl Core {
    fn render(&self, stems: &[String], modifier_first: bool, head_as_of: bool) -> String {
        let mut words: Vec<String> = Vec::new();
        if let (Some(m), true) = (self.modifier, modifier_first) {
            words.push(m.to_string());
        }
        match (self.head, head_as_of) {
            (Some(h), true) => {
                words.push(h.to_string());
                words.push("of".to_string());
                words.extend(stems.iter().cloned());
            }
            (Some(h), false) => {
                words.extend(stems.iter().cloned());
                words.push(h.to_string());
            }
            (None, _) => words.extend(stems.iter().cloned()),
        }
        if let (Some(m), false) = (self.modifier, modifier_first) {
            words.push(format!(", {m}"));
        }
        words.join(" ").replace(" ,", ",")
    }
}

fn variant(core: &Core, rng: &mut ChaCha8Rng) -> String {
    let mut stems = core.stems.clone();
    // at most one stem is inflected, the rest stay intact
    if rng.gen_bool(0.45) {
        let i = rng.gen_range(0..stems.len());
        stems[i] = inflect(&stems[i], rng);
    }
    if stems.len() > 1 && rng.gen_bool(0.2) {
        stems.reverse();
    }
    let mut s = core.render(&stems, rng.gen_bool(0.7), rng.gen_bool(0.3));
    if rng.gen_bool(0.3) {
        let q = QUALIFIERS.choose(rng).unwrap();
        if q.starts_with(',') {
            s.push_str(q);
        } else {
            s.push(' ');
            s.push_str(q);
        }
    }
    match rng.gen_range(0..6) {
        0 => s.to_uppercase(),
        1 => {
            let mut c = s.chars();
            c.next()
                .map(|f| f.to_uppercase().chain(c).collect())
                .unwrap_or_default()
        }
        _ => s,
    }
}

/// Builds the corpus described by `spec`. Atom and concept ids are
/// zero-padded sequence numbers, so the output depends only on the spec.
pub fn synthesize(spec: &SynthSpec) -> Result<AtomStore> {
    if spec.min_atoms < 2 || spec.max_atoms < spec.min_atoms {
        return Err(Error::Config(format!(
            "atoms per concept must satisfy 2 <= min <= max, got {}..{}",
            spec.min_atoms, spec.max_atoms
        )));
    }
    if spec.sources.len() < 2 {
        return Err(Error::Config("at least two sources are needed".into()));
    }
    let mut rng = seed::stream(spec.seed, "synth", 0);
    let mut used_stems = BTreeSet::new();
    let mut atoms = Vec::new();
    for c in 0..spec.concepts {
        let n_stems = if rng.gen_bool(0.6) { 1 } else { 2 };
        let mut stems = Vec::new();
        while stems.len() < n_stems {
            let s = stem(&mut rng);
            if used_stems.insert(s.clone()) {
                stems.push(s);
            }
        }
        let core = Core {
            stems,
            modifier: rng.gen_bool(0.5).then(|| *MODIFIERS.choose(&mut rng).unwrap()),
            head: rng.gen_bool(0.6).then(|| *HEADS.choose(&mut rng).unwrap()),
        };
        let count = rng.gen_range(spec.min_atoms..=spec.max_atoms);
        let mut texts = BTreeSet::new();
        let mut strings = Vec::new();
        for _ in 0..count * 50 {
            if strings.len() == count {
                break;
            }
            let v = variant(&core, &mut rng);
            if texts.insert(v.clone()) {
                strings.push(v);
            }
        }
        let first_src = rng.gen_range(0..spec.sources.len());
        for (k, text) in strings.into_iter().enumerate() {
            let src = &spec.sources[(first_src + k) % spec.sources.len()];
            let aui = format!("A{:07}", atoms.len() + 1);
            atoms.push(Atom::new(aui, text, src.clone(), format!("C{:07}", c + 1)));
        }
    }
    AtomStore::from_atoms(atoms)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_corpus_has_the_declared_shape() {
        let store = synthesize(&SynthSpec::default()).unwrap();
        let report = store.validate();
        assert_eq!(report.concepts, 200);
        assert_eq!(report.sources, 3);
        assert_eq!(report.singleton_concepts, 0);
        for (_, members) in store.concepts() {
            assert!((2..=5).contains(&members.len()));
        }
    }

    #[test]
    fn synthesis_is_seeded() {
        let spec = SynthSpec {
            concepts: 30,
            ..SynthSpec::default()
        };
        let a = synthesize(&spec).unwrap();
        let b = synthesize(&spec).unwrap();
        assert_eq!(a.atoms(), b.atoms());
        let c = synthesize(&SynthSpec { seed: 8, ..spec }).unwrap();
        assert_ne!(a.atoms(), c.atoms());
    }

    #[test]
    fn bad_specs_are_rejected() {
        assert!(synthesize(&SynthSpec {
            min_atoms: 1,
            ..SynthSpec::default()
        })
        .is_err());
        assert!(synthesize(&SynthSpec {
            sources: vec!["X".into()],
            ..SynthSpec::default()
        })
        .is_err());
    }
}
