//! Labeled pair generation, negative strata and train/test splitting.
//!
//! Positives are every same-concept pair (optionally restricted to pairs
//! whose atoms come from different sources). Negatives are drawn from three
//! strata:
//!
//! * `TOPN_SIM`: for every anchor, its top-N most similar non-synonymous
//!   atoms. If the union is larger than the quota, the highest scores win
//!   (ties by AUI).
//! * `RAN_SIM`: uniform over non-synonymous pairs with a positive score. A
//!   single draw from the anchor's index candidate list, with the anchor
//!   chosen proportionally to its candidate count, picks an ordered pair
//!   uniformly.
//! * `RAN_NOSIM`: uniform over non-synonymous pairs with a zero score, drawn
//!   as two uniform atom indices.
//!
//! The random strata are rejection sampled with at most
//! [`REJECTION_FACTOR`] attempts per requested pair. Shortfalls from
//! `TOPN_SIM` and `RAN_SIM` move to `RAN_NOSIM`; whatever `RAN_NOSIM`
//! cannot fill is reported.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::atoms::AtomStore;
use crate::error::{Error, Result};
use crate::lexsim::SimilarityIndex;
use crate::seed;

/// Maximum rejection-sampling attempts per requested pair.
pub const REJECTION_FACTOR: usize = 50;

/// Header line of the pair file.
pub const PAIR_HEADER: &str = "aui1\taui2\tstr1\tstr2\tsrc1\tsrc2\tlabel\tsplit";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SplitTag {
    #[serde(rename = "POS")]
    Pos,
    #[serde(rename = "TOPN_SIM")]
    TopnSim,
    #[serde(rename = "RAN_SIM")]
    RanSim,
    #[serde(rename = "RAN_NOSIM")]
    RanNosim,
}

impl SplitTag {
    pub const ALL: [SplitTag; 4] = [SplitTag::Pos, SplitTag::TopnSim, SplitTag::RanSim, SplitTag::RanNosim];
    pub const NEGATIVE: [SplitTag; 3] = [SplitTag::TopnSim, SplitTag::RanSim, SplitTag::RanNosim];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Pos => "POS",
            SplitTag::TopnSim => "TOPN_SIM",
            SplitTag::RanSim => "RAN_SIM",
            SplitTag::RanNosim => "RAN_NOSIM",
        }
    }

    fn ordinal(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitTag {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        SplitTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown split tag {s:?}"))
    }
}

/// An unordered atom pair in canonical form (`a < b`) with its label.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LabeledPair {
    pub a: String,
    pub b: String,
    /// 1 = synonymous.
    pub label: u8,
    pub split: SplitTag,
}

impl LabeledPair {
    /// Canonicalizes the order of `x` and `y`.
    pub fn new(x: impl Into<String>, y: impl Into<String>, label: u8, split: SplitTag) -> Self {
        let (x, y) = (x.into(), y.into());
        let (a, b) = if x <= y { (x, y) } else { (y, x) };
        LabeledPair { a, b, label, split }
    }

    pub fn key(&self) -> (&str, &str) {
        (&self.a, &self.b)
    }
}

/// Parameters for negative sampling and splitting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    /// Negatives per positive.
    pub negative_ratio: f64,
    /// Neighbors kept per anchor for `TOPN_SIM`.
    pub topn: usize,
    /// Proportions for `TOPN_SIM`, `RAN_SIM`, `RAN_NOSIM`.
    pub stratum_weights: [f64; 3],
    pub seed: u64,
    pub cross_source_only: bool,
    pub test_fraction: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            negative_ratio: 7.6,
            topn: 3,
            stratum_weights: [1.0 / 3.0; 3],
            seed: 0,
            cross_source_only: true,
            test_fraction: 0.2,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.negative_ratio > 0.0 && self.negative_ratio.is_finite()) {
            return Err(Error::Config(format!(
                "negative_ratio must be > 0, got {}",
                self.negative_ratio
            )));
        }
        if self.stratum_weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config("stratum weights must be non-negative".into()));
        }
        let sum: f64 = self.stratum_weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("stratum weights must sum to 1, got {sum}")));
        }
        check_test_fraction(self.test_fraction)
    }

    /// Splits `total` across the three strata by largest remainder.
    pub fn quotas(&self, total: usize) -> [usize; 3] {
        let raw: Vec<f64> = self.stratum_weights.iter().map(|w| w * total as f64).collect();
        let mut q = [0usize; 3];
        for i in 0..3 {
            q[i] = raw[i].floor() as usize;
        }
        let mut left = total.saturating_sub(q.iter().sum());
        let mut order = [0usize, 1, 2];
        order.sort_by(|&i, &j| {
            (raw[j] - raw[j].floor())
                .total_cmp(&(raw[i] - raw[i].floor()))
                .then(i.cmp(&j))
        });
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            if self.stratum_weights[i] > 0.0 {
                q[i] += 1;
                left -= 1;
            }
        }
        q
    }
}

fn check_test_fraction(f: f64) -> Result<()> {
    if f > 0.0 && f < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("test_fraction must be in (0,1), got {f}")))
    }
}

/// All same-concept pairs, optionally only across sources.
pub fn generate_positives(store: &AtomStore, cross_source_only: bool) -> BTreeSet<LabeledPair> {
    let mut out = BTreeSet::new();
    for (_, members) in store.concepts() {
        for (k, &i) in members.iter().enumerate() {
            for &j in &members[k + 1..] {
                let (x, y) = (store.atom(i), store.atom(j));
                if cross_source_only && x.src == y.src {
                    continue;
                }
                out.insert(LabeledPair::new(&x.aui, &y.aui, 1, SplitTag::Pos));
            }
        }
    }
    out
}

/// Outcome of negative sampling.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NegativeSample {
    pub pairs: BTreeSet<LabeledPair>,
    /// Quota per stratum before redistribution.
    pub requested: [usize; 3],
    /// Pairs actually drawn per stratum.
    pub achieved: [usize; 3],
    /// Requested pairs that could not be drawn at all.
    pub shortfall: usize,
}

impl NegativeSample {
    pub fn exhausted(&self) -> bool {
        self.shortfall > 0
    }
}

/// Draws `floor(negative_ratio * positives_count)` distinct negatives.
pub fn generate_negatives(
    store: &AtomStore,
    index: &SimilarityIndex,
    spec: &DatasetSpec,
    positives_count: usize,
) -> Result<NegativeSample> {
    spec.validate()?;
    if store.num_concepts() < 2 {
        return Err(Error::NoNegatives(format!(
            "store has {} concept(s); every pair is synonymous",
            store.num_concepts()
        )));
    }
    let target = (spec.negative_ratio * positives_count as f64).floor() as usize;
    let requested = spec.quotas(target);
    let mut used: HashSet<(u32, u32)> = HashSet::new();
    let mut chosen: Vec<(usize, usize, SplitTag)> = Vec::new();
    let mut achieved = [0usize; 3];

    // hardest negatives
    let topn = top_n_union(store, index, spec.topn);
    for &(i, j, _) in topn.iter().take(requested[0]) {
        used.insert(key(i, j));
        chosen.push((i, j, SplitTag::TopnSim));
    }
    achieved[0] = chosen.len();
    let mut carry = requested[0] - achieved[0];

    // random, some similarity
    let neighbors: Vec<Vec<usize>> = (0..store.len())
        .into_par_iter()
        .map(|i| index.overlaps(i).into_iter().map(|(j, _)| j).collect())
        .collect();
    let mut cumulative = Vec::with_capacity(neighbors.len());
    let mut total = 0usize;
    for n in &neighbors {
        total += n.len();
        cumulative.push(total);
    }
    let quota = requested[1];
    let mut rng = seed::stream(spec.seed, "negatives", SplitTag::RanSim.ordinal());
    let mut attempts = 0;
    while achieved[1] < quota && total > 0 && attempts < REJECTION_FACTOR * quota {
        attempts += 1;
        let r = rng.gen_range(0..total);
        let i = cumulative.partition_point(|&c| c <= r);
        let start = if i == 0 { 0 } else { cumulative[i - 1] };
        let j = neighbors[i][r - start];
        if store.atom(i).cui != store.atom(j).cui && used.insert(key(i, j)) {
            chosen.push((i, j, SplitTag::RanSim));
            achieved[1] += 1;
        }
    }
    carry += quota - achieved[1];

    // random, no similarity
    let quota = requested[2] + carry;
    let n = store.len();
    let mut rng = seed::stream(spec.seed, "negatives", SplitTag::RanNosim.ordinal());
    let mut attempts = 0;
    while achieved[2] < quota && attempts < REJECTION_FACTOR * quota {
        attempts += 1;
        let i = rng.gen_range(0..n);
        let j = rng.gen_range(0..n);
        if i == j || store.atom(i).cui == store.atom(j).cui || index.score(i, j) != 0.0 {
            continue;
        }
        if used.insert(key(i, j)) {
            chosen.push((i, j, SplitTag::RanNosim));
            achieved[2] += 1;
        }
    }
    let shortfall = quota - achieved[2];

    let pairs = chosen
        .into_iter()
        .map(|(i, j, tag)| LabeledPair::new(&store.atom(i).aui, &store.atom(j).aui, 0, tag))
        .collect();
    Ok(NegativeSample {
        pairs,
        requested,
        achieved,
        shortfall,
    })
}

fn key(i: usize, j: usize) -> (u32, u32) {
    (i.min(j) as u32, i.max(j) as u32)
}

/// Union of every anchor's top-`n` negatives as `(i, j, score)`, ranked by
/// score descending, then by the canonical AUI pair.
pub fn top_n_union(store: &AtomStore, index: &SimilarityIndex, n: usize) -> Vec<(usize, usize, f64)> {
    let per_anchor: Vec<Vec<(usize, f64)>> = (0..store.len())
        .into_par_iter()
        .map(|i| index.top_n_by_index(store, i, n))
        .collect();
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, list) in per_anchor.into_iter().enumerate() {
        for (j, s) in list {
            if seen.insert(key(i, j)) {
                out.push((i, j, s));
            }
        }
    }
    let canon = |i: usize, j: usize| {
        let (x, y) = (&store.atom(i).aui, &store.atom(j).aui);
        if x <= y {
            (x, y)
        } else {
            (y, x)
        }
    };
    out.sort_by(|p, q| q.2.total_cmp(&p.2).then_with(|| canon(p.0, p.1).cmp(&canon(q.0, q.1))));
    out
}

/// Positives plus negatives for one store.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub positives: BTreeSet<LabeledPair>,
    pub negatives: NegativeSample,
}

impl Dataset {
    pub fn generate(store: &AtomStore, index: &SimilarityIndex, spec: &DatasetSpec) -> Result<Self> {
        let positives = generate_positives(store, spec.cross_source_only);
        let negatives = generate_negatives(store, index, spec, positives.len())?;
        Ok(Dataset { positives, negatives })
    }

    pub fn all_pairs(&self) -> BTreeSet<LabeledPair> {
        self.positives.iter().chain(&self.negatives.pairs).cloned().collect()
    }
}

/// Stratified split: every tag contributes `round(n * test_fraction)` pairs
/// to the test side.
pub fn split_train_test(
    pairs: &BTreeSet<LabeledPair>,
    spec: &DatasetSpec,
) -> Result<(BTreeSet<LabeledPair>, BTreeSet<LabeledPair>)> {
    check_test_fraction(spec.test_fraction)?;
    let mut by_tag: BTreeMap<SplitTag, Vec<&LabeledPair>> = BTreeMap::new();
    for p in pairs {
        by_tag.entry(p.split).or_default().push(p);
    }
    let (mut train, mut test) = (BTreeSet::new(), BTreeSet::new());
    for (tag, mut group) in by_tag {
        let mut rng = seed::stream(spec.seed, "split", tag.ordinal());
        group.shuffle(&mut rng);
        let k = (group.len() as f64 * spec.test_fraction).round() as usize;
        for (n, p) in group.into_iter().enumerate() {
            if n < k {
                test.insert(p.clone());
            } else {
                train.insert(p.clone());
            }
        }
    }
    Ok((train, test))
}

/// A pair together with the atom fields stored in the pair file.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PairRecord {
    pub pair: LabeledPair,
    pub str1: String,
    pub str2: String,
    pub src1: String,
    pub src2: String,
}

impl PairRecord {
    pub fn resolve(pair: &LabeledPair, store: &AtomStore) -> Result<Self> {
        let x = store.get(&pair.a).ok_or_else(|| Error::UnknownAui(pair.a.clone()))?;
        let y = store.get(&pair.b).ok_or_else(|| Error::UnknownAui(pair.b.clone()))?;
        Ok(PairRecord {
            pair: pair.clone(),
            str1: x.text.clone(),
            str2: y.text.clone(),
            src1: x.src.clone(),
            src2: y.src.clone(),
        })
    }
}

/// Writes the header and one tab-separated line per pair, in the iteration
/// order of `pairs`.
pub fn write_pairs<'a, I, W>(pairs: I, store: &AtomStore, mut w: W) -> Result<()>
where
    I: IntoIterator<Item = &'a LabeledPair>,
    W: Write,
{
    writeln!(w, "{PAIR_HEADER}")?;
    for p in pairs {
        let r = PairRecord::resolve(p, store)?;
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            p.a, p.b, r.str1, r.str2, r.src1, r.src2, p.label, p.split
        )?;
    }
    Ok(())
}

pub fn read_pairs<R: BufRead>(reader: R) -> Result<Vec<PairRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if lineno == 1 {
            if line != PAIR_HEADER {
                return Err(Error::parse(1, "missing pair file header"));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 8 {
            return Err(Error::parse(lineno, format!("expected 8 fields, found {}", f.len())));
        }
        let label = match f[6] {
            "0" => 0,
            "1" => 1,
            other => return Err(Error::parse(lineno, format!("bad label {other:?}"))),
        };
        let split: SplitTag = f[7].parse().map_err(|e: String| Error::parse(lineno, e))?;
        if (split == SplitTag::Pos) != (label == 1) {
            return Err(Error::parse(
                lineno,
                format!("label {label} inconsistent with split {split}"),
            ));
        }
        if f[0] >= f[1] {
            return Err(Error::parse(lineno, "pair not in canonical order (aui1 < aui2)"));
        }
        out.push(PairRecord {
            pair: LabeledPair {
                a: f[0].to_string(),
                b: f[1].to_string(),
                label,
                split,
            },
            str1: f[2].to_string(),
            str2: f[3].to_string(),
            src1: f[4].to_string(),
            src2: f[5].to_string(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atoms::tests::headache_store;
    use crate::atoms::Atom;

    fn store(rows: &str) -> AtomStore {
        AtomStore::ingest(rows.as_bytes()).unwrap()
    }

    #[test]
    fn positives_headache() {
        let s = headache_store();
        assert_eq!(generate_positives(&s, true).len(), 8);
        assert_eq!(generate_positives(&s, false).len(), 15);
        assert!(generate_positives(&s, false).iter().all(|p| p.label == 1 && p.a < p.b));
        let singles = store("A1|x|S|C1\nA2|y|T|C2\n");
        assert!(generate_positives(&singles, false).is_empty());
    }

    #[test]
    fn single_concept_has_no_negatives() {
        let s = headache_store();
        let idx = SimilarityIndex::build(&s);
        let err = generate_negatives(&s, &idx, &DatasetSpec::default(), 8).unwrap_err();
        assert!(matches!(err, Error::NoNegatives(_)));
    }

    #[test]
    fn tiny_store_strata() {
        let s = store("X|alpha|S|c1\nY|alpha|S|c2\nZ|qq|S|c3\n");
        let idx = SimilarityIndex::build(&s);
        let spec = DatasetSpec {
            negative_ratio: 100.0,
            stratum_weights: [1.0, 0.0, 0.0],
            ..DatasetSpec::default()
        };
        let neg = generate_negatives(&s, &idx, &spec, 1).unwrap();
        let got: Vec<_> = neg
            .pairs
            .iter()
            .map(|p| (p.a.as_str(), p.b.as_str(), p.split))
            .collect();
        assert_eq!(
            got,
            [
                ("X", "Y", SplitTag::TopnSim),
                ("X", "Z", SplitTag::RanNosim),
                ("Y", "Z", SplitTag::RanNosim)
            ]
        );
        assert_eq!(neg.requested, [100, 0, 0]);
        assert_eq!(neg.shortfall, 97);
        assert!(neg.exhausted());
    }

    #[test]
    fn quotas_sum_to_target() {
        let spec = DatasetSpec::default();
        for t in 0..50 {
            assert_eq!(spec.quotas(t).iter().sum::<usize>(), t);
        }
        assert_eq!(spec.quotas(10), [4, 3, 3]);
        let spec = DatasetSpec {
            stratum_weights: [0.0, 0.5, 0.5],
            ..DatasetSpec::default()
        };
        assert_eq!(spec.quotas(7), [0, 4, 3]);
    }

    #[test]
    fn spec_validation() {
        let bad = DatasetSpec {
            stratum_weights: [0.5, 0.5, 0.5],
            ..DatasetSpec::default()
        };
        assert!(bad.validate().is_err());
        let bad = DatasetSpec {
            negative_ratio: 0.0,
            ..DatasetSpec::default()
        };
        assert!(bad.validate().is_err());
    }

    fn synthetic_pairs(pos: usize, neg: usize) -> BTreeSet<LabeledPair> {
        let mut out = BTreeSet::new();
        for i in 0..pos {
            out.insert(LabeledPair::new(
                format!("P{i:03}a"),
                format!("P{i:03}b"),
                1,
                SplitTag::Pos,
            ));
        }
        for i in 0..neg {
            out.insert(LabeledPair::new(
                format!("N{i:03}a"),
                format!("N{i:03}b"),
                0,
                SplitTag::RanNosim,
            ));
        }
        out
    }

    #[test]
    fn split_sizes() {
        let spec = DatasetSpec::default();
        let pairs = synthetic_pairs(100, 0);
        let (train, test) = split_train_test(&pairs, &spec).unwrap();
        assert_eq!((train.len(), test.len()), (80, 20));
        assert!(train.is_disjoint(&test));

        let pairs = synthetic_pairs(50, 50);
        let (train, test) = split_train_test(&pairs, &spec).unwrap();
        assert_eq!(test.iter().filter(|p| p.label == 1).count(), 10);
        assert_eq!(test.iter().filter(|p| p.label == 0).count(), 10);
        assert_eq!(train.len() + test.len(), 100);
        assert_eq!(split_train_test(&pairs, &spec).unwrap(), (train, test));

        for f in [0.0, 1.0, -0.1, 1.5] {
            let spec = DatasetSpec {
                test_fraction: f,
                ..DatasetSpec::default()
            };
            assert!(split_train_test(&pairs, &spec).is_err());
        }
    }

    #[test]
    fn pair_file_line() {
        let s = headache_store();
        let pair = LabeledPair::new("A3487586", "A0066000", 1, SplitTag::Pos);
        let mut buf = Vec::new();
        write_pairs([&pair], &s, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], PAIR_HEADER);
        assert_eq!(
            lines[1],
            "A0066000\tA3487586\tHeadache\tHeadache (finding)\tMSH\tSNOMEDCT_US\t1\tPOS"
        );
        let back = read_pairs(buf.as_slice()).unwrap();
        assert_eq!(back[0].pair, pair);

        let mut empty = Vec::new();
        write_pairs(&BTreeSet::new(), &s, &mut empty).unwrap();
        assert_eq!(String::from_utf8(empty).unwrap(), format!("{PAIR_HEADER}\n"));

        let missing = LabeledPair::new("A0066000", "A404", 0, SplitTag::RanNosim);
        assert!(matches!(
            write_pairs([&missing], &s, Vec::new()),
            Err(Error::UnknownAui(_))
        ));
    }

    #[test]
    fn pair_file_errors() {
        let bad = format!("{PAIR_HEADER}\nA\tB\tx\ty\tS\tS\t1\tPOS\nA\tB\tx\n");
        assert!(matches!(read_pairs(bad.as_bytes()), Err(Error::Parse { line: 3, .. })));
        let bad = format!("{PAIR_HEADER}\nA\tB\tx\ty\tS\tS\t0\tPOS\n");
        assert!(matches!(read_pairs(bad.as_bytes()), Err(Error::Parse { line: 2, .. })));
        assert!(read_pairs("nope\n".as_bytes()).is_err());
    }

    #[test]
    fn pair_file_round_trip_1000() {
        use rand::Rng;
        let mut rng = seed::stream(3, "test", 0);
        let atoms: Vec<Atom> = (0..200)
            .map(|i| {
                Atom::new(
                    format!("A{i:04}"),
                    format!("term {}", i % 37),
                    format!("S{}", i % 3),
                    format!("C{}", i % 50),
                )
            })
            .collect();
        let s = AtomStore::from_atoms(atoms).unwrap();
        let mut pairs = BTreeSet::new();
        while pairs.len() < 1000 {
            let (i, j) = (rng.gen_range(0..200), rng.gen_range(0..200));
            if i == j {
                continue;
            }
            let (x, y) = (s.atom(i), s.atom(j));
            let (label, tag) = if x.cui == y.cui {
                (1, SplitTag::Pos)
            } else {
                (0, SplitTag::RanSim)
            };
            pairs.insert(LabeledPair::new(&x.aui, &y.aui, label, tag));
        }
        let mut buf = Vec::new();
        write_pairs(&pairs, &s, &mut buf).unwrap();
        let back: BTreeSet<LabeledPair> = read_pairs(buf.as_slice())
            .unwrap()
            .into_iter()
            .map(|r| r.pair)
            .collect();
        assert_eq!(back, pairs);
    }
}
