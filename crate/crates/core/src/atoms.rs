//! Atom records and the immutable, indexed store built from an atom file.
//!
//! An atom is one occurrence of a term in one source vocabulary. Atoms that
//! share a concept id are synonyms; the concept id is only ever used as the
//! label oracle, never as a model input.
//!
//! The on-disk format is one record per line, `AUI|STR|SRC|CUI`, with
//! `#`-prefixed comment lines and blank lines skipped.
//!
//! ```
//! use synalign::atoms::AtomStore;
//!
//! let src = "# aui|str|src|cui\nA0066000|Headache|MSH|C0018681\n";
//! let store = AtomStore::ingest(src.as_bytes()).unwrap();
//! assert_eq!(store.len(), 1);
//! assert_eq!(store.get("A0066000").unwrap().text, "Headache");
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One term occurrence.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Atom {
    pub aui: String,
    /// The atom name, stored verbatim.
    pub text: String,
    pub src: String,
    /// Concept id. Label metadata only.
    pub cui: String,
}

impl Atom {
    pub fn new(
        aui: impl Into<String>,
        text: impl Into<String>,
        src: impl Into<String>,
        cui: impl Into<String>,
    ) -> Self {
        Atom {
            aui: aui.into(),
            text: text.into(),
            src: src.into(),
            cui: cui.into(),
        }
    }
}

/// Describes the line layout of an atom file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AtomFileFormat {
    pub delimiter: char,
    pub comment_prefix: char,
}

impl Default for AtomFileFormat {
    fn default() -> Self {
        AtomFileFormat {
            delimiter: '|',
            comment_prefix: '#',
        }
    }
}

/// Validated, immutable collection of atoms with concept and source indices.
///
/// Atoms keep their ingestion order (`atoms()`), which downstream code treats
/// as the canonical corpus order. Index buckets are sorted by AUI.
#[derive(Clone, Debug, Default)]
pub struct AtomStore {
    atoms: Vec<Atom>,
    by_aui: HashMap<String, usize>,
    by_cui: BTreeMap<String, Vec<usize>>,
    by_src: BTreeMap<String, Vec<usize>>,
}

impl PartialEq for AtomStore {
    fn eq(&self, other: &Self) -> bool {
        self.atoms == other.atoms
    }
}

impl AtomStore {
    /// Builds a store from already-parsed atoms, applying every record check.
    pub fn from_atoms<I: IntoIterator<Item = Atom>>(atoms: I) -> Result<Self> {
        let mut store = AtomStore::default();
        for atom in atoms {
            check_fields(&atom).map_err(|m| Error::Config(format!("atom {}: {m}", atom.aui)))?;
            store.push(atom)?;
        }
        store.finish();
        Ok(store)
    }

    /// Parses the default pipe-delimited format.
    pub fn ingest<R: BufRead>(reader: R) -> Result<Self> {
        Self::ingest_with(reader, AtomFileFormat::default())
    }

    pub fn ingest_with<R: BufRead>(reader: R, format: AtomFileFormat) -> Result<Self> {
        let mut store = AtomStore::default();
        for (i, line) in reader.lines().enumerate() {
            let lineno = i + 1;
            let line = line?;
            let line = line.strip_suffix('\r').unwrap_or(&line);
            if line.trim().is_empty() || line.starts_with(format.comment_prefix) {
                continue;
            }
            let fields: Vec<&str> = line.split(format.delimiter).collect();
            if fields.len() != 4 {
                return Err(Error::parse(
                    lineno,
                    format!("expected 4 fields AUI|STR|SRC|CUI, found {}", fields.len()),
                ));
            }
            let atom = Atom::new(fields[0], fields[1], fields[2], fields[3]);
            check_fields(&atom).map_err(|m| match m {
                FieldProblem::EmptyText => Error::EmptyString(atom.aui.clone()),
                other => Error::parse(lineno, other.to_string()),
            })?;
            store.push(atom)?;
        }
        store.finish();
        Ok(store)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let file = File::open(path)?;
        Self::ingest(BufReader::new(file))
    }

    fn push(&mut self, atom: Atom) -> Result<()> {
        if self.by_aui.contains_key(&atom.aui) {
            return Err(Error::DuplicateAui(atom.aui));
        }
        let idx = self.atoms.len();
        self.by_aui.insert(atom.aui.clone(), idx);
        self.by_cui.entry(atom.cui.clone()).or_default().push(idx);
        self.by_src.entry(atom.src.clone()).or_default().push(idx);
        self.atoms.push(atom);
        Ok(())
    }

    fn finish(&mut self) {
        let atoms = &self.atoms;
        for bucket in self.by_cui.values_mut().chain(self.by_src.values_mut()) {
            bucket.sort_by(|&a, &b| atoms[a].aui.cmp(&atoms[b].aui));
        }
    }

    /// Writes the store back out in ingestion order.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        for a in &self.atoms {
            writeln!(w, "{}|{}|{}|{}", a.aui, a.text, a.src, a.cui)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// Atoms in ingestion order.
    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn atom(&self, idx: usize) -> &Atom {
        &self.atoms[idx]
    }

    pub fn get(&self, aui: &str) -> Option<&Atom> {
        self.by_aui.get(aui).map(|&i| &self.atoms[i])
    }

    pub fn index_of(&self, aui: &str) -> Option<usize> {
        self.by_aui.get(aui).copied()
    }

    /// AUIs of every atom in `cui`, in lexicographic order. Unknown concepts
    /// yield an empty list.
    pub fn concept_members(&self, cui: &str) -> Vec<&str> {
        self.by_cui
            .get(cui)
            .map(|b| b.iter().map(|&i| self.atoms[i].aui.as_str()).collect())
            .unwrap_or_default()
    }

    /// Atom indices grouped by concept, concepts in lexicographic order.
    pub fn concepts(&self) -> impl Iterator<Item = (&str, &[usize])> {
        self.by_cui.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn sources(&self) -> impl Iterator<Item = (&str, &[usize])> {
        self.by_src.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn num_concepts(&self) -> usize {
        self.by_cui.len()
    }

    pub fn validate(&self) -> ValidationReport {
        ValidationReport {
            atoms: self.atoms.len(),
            concepts: self.by_cui.len(),
            sources: self.by_src.len(),
            singleton_concepts: self.by_cui.values().filter(|b| b.len() == 1).count(),
            per_source: self.by_src.iter().map(|(k, v)| (k.clone(), v.len())).collect(),
        }
    }
}

/// Summary counts for a store.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub atoms: usize,
    pub concepts: usize,
    pub sources: usize,
    /// Concepts with a single atom; these contribute no positive pairs.
    pub singleton_concepts: usize,
    pub per_source: BTreeMap<String, usize>,
}

#[derive(Debug)]
enum FieldProblem {
    EmptyText,
    EmptyField(&'static str),
    Forbidden(&'static str, char),
}

impl std::fmt::Display for FieldProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FieldProblem::EmptyText => write!(f, "empty STR"),
            FieldProblem::EmptyField(name) => write!(f, "empty {name}"),
            FieldProblem::Forbidden(name, c) => write!(f, "{name} contains forbidden character {c:?}"),
        }
    }
}

// Tabs and newlines would break the pair file; pipes the atom file.
fn check_fields(atom: &Atom) -> std::result::Result<(), FieldProblem> {
    for (name, value) in [("AUI", &atom.aui), ("SRC", &atom.src), ("CUI", &atom.cui)] {
        if value.trim().is_empty() {
            return Err(FieldProblem::EmptyField(name));
        }
        if let Some(c) = value.chars().find(|c| c.is_whitespace() || *c == '|') {
            return Err(FieldProblem::Forbidden(name, c));
        }
    }
    if let Some(c) = atom.text.chars().find(|&c| matches!(c, '\t' | '\n' | '\r' | '|')) {
        return Err(FieldProblem::Forbidden("STR", c));
    }
    if atom.text.trim().is_empty() {
        return Err(FieldProblem::EmptyText);
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) const HEADACHE: &str = "\
A0066000|Headache|MSH|C0018681
A0066008|Headaches|MSH|C0018681
A1641924|Cranial Pains|MSH|C0018681
A26628141|Cephalodynia|MSH|C0018681
A2957278|Cephalodynia|SNOMEDCT_US|C0018681
A3487586|Headache (finding)|SNOMEDCT_US|C0018681
";

    pub(crate) fn headache_store() -> AtomStore {
        AtomStore::ingest(HEADACHE.as_bytes()).unwrap()
    }

    #[test]
    fn parses_single_record() {
        let store = AtomStore::ingest("A0066000|Headache|MSH|C0018681".as_bytes()).unwrap();
        assert_eq!(
            store.get("A0066000"),
            Some(&Atom::new("A0066000", "Headache", "MSH", "C0018681"))
        );
    }

    #[test]
    fn empty_stream() {
        let store = AtomStore::ingest("".as_bytes()).unwrap();
        assert_eq!(store.len(), 0);
        assert_eq!(store.num_concepts(), 0);
        assert_eq!(store.validate(), ValidationReport::default());
    }

    #[test]
    fn headache_table() {
        let store = headache_store();
        let report = store.validate();
        assert_eq!(report.atoms, 6);
        assert_eq!(report.concepts, 1);
        assert_eq!(report.sources, 2);
        assert_eq!(report.singleton_concepts, 0);
        assert_eq!(report.per_source["MSH"], 4);
        assert_eq!(report.per_source["SNOMEDCT_US"], 2);
        assert_eq!(
            store.concept_members("C0018681"),
            ["A0066000", "A0066008", "A1641924", "A26628141", "A2957278", "A3487586"]
        );
        assert!(store.concept_members("C9999999").is_empty());
    }

    #[test]
    fn singleton_concepts() {
        let store = AtomStore::ingest("A1|x|S|C1\nA2|y|S|C2\nA3|z|S|C3\n".as_bytes()).unwrap();
        assert_eq!(store.validate().singleton_concepts, 3);
        assert_eq!(store.concept_members("C2"), ["A2"]);
    }

    #[test]
    fn comments_and_crlf() {
        let store = AtomStore::ingest("# header\r\nA1|x|S|C1\r\n\nA2|y|S|C1\r\n".as_bytes()).unwrap();
        assert_eq!(store.len(), 2);
        assert_eq!(store.get("A1").unwrap().cui, "C1");
    }

    #[test]
    fn rejects_wrong_field_count() {
        let err = AtomStore::ingest("A1|x|S|C1\nA2|y|S\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        // a pipe inside STR shows up as an extra field
        let err = AtomStore::ingest("A1|x|y|S|C1\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
    }

    #[test]
    fn rejects_duplicates_and_empty_strings() {
        let err = AtomStore::ingest("A1|x|S|C1\nA1|y|S|C2\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::DuplicateAui(ref a) if a == "A1"));
        let err = AtomStore::ingest("A7|   |S|C1\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::EmptyString(ref a) if a == "A7"));
        let err = AtomStore::ingest("A7|a\tb|S|C1\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn round_trip() {
        let store = headache_store();
        let mut buf = Vec::new();
        store.write_to(&mut buf).unwrap();
        let again = AtomStore::ingest(buf.as_slice()).unwrap();
        assert_eq!(store, again);
        assert_eq!(store.validate(), again.validate());
        assert_eq!(std::str::from_utf8(&buf).unwrap(), HEADACHE);
    }
}
