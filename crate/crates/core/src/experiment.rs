//! Run directories, pipeline commands and manifests.
//!
//! A run directory holds the resolved config (`config.toml`), every artifact
//! a command produced and an append-only `manifest.jsonl`. Each manifest line
//! records the command, the resolved config, and SHA-256 hashes of the inputs
//! it read and the outputs it wrote, so a run can be replayed into a fresh
//! directory and compared file by file.
//!
//! Layout of a complete run:
//!
//! ```text
//! config.toml          resolved config
//! manifest.jsonl       one entry per command
//! store_summary.json   ingest
//! pairs/{all,train,test}.tsv, pairs/summary.json
//! embeddings.vec, embeddings.json
//! model.json, loss.tsv, train_report.json
//! metrics.{json,md,csv}, scores.tsv, sweep.tsv
//! cross_metrics.{json,md,csv}, cross_scores.tsv
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::atoms::AtomStore;
use crate::crossencoder::{evaluate_ordered, write_score_dump, CrossEncoderSettings, Order};
use crate::embedding::{extract_contextual_table, EmbeddingTable, ExtractionStrategy};
use crate::encoders::EncoderRegistry;
use crate::error::{Error, Result};
use crate::evalreport::{confusion, render, sort_rows, threshold_sweep, MetricsRow, TableStyle};
use crate::lexsim::{word_sequence, SimilarityIndex};
use crate::pairgen::{read_pairs, split_train_test, write_pairs, Dataset, DatasetSpec, PairRecord};
use crate::siamese::{Checkpoint, EncodedPair, Loss, SiameseConfig, SiameseModel, Trainer};
use crate::tokenize::{Tokenizer, WhitespaceTokenizer, WordTokenizer};

pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const CONFIG_FILE: &str = "config.toml";

/// Environment variables that may replace path fields. Nothing else can be
/// set from the environment.
pub const ENV_ATOMS: &str = "SYNALIGN_ATOMS";
pub const ENV_VECTORS: &str = "SYNALIGN_VECTORS";
pub const ENV_REGISTRY: &str = "SYNALIGN_REGISTRY";

fn d_ratio() -> f64 {
    DatasetSpec::default().negative_ratio
}
fn d_topn() -> usize {
    DatasetSpec::default().topn
}
fn d_weight() -> f64 {
    1.0 / 3.0
}
fn d_true() -> bool {
    true
}
fn d_test_fraction() -> f64 {
    DatasetSpec::default().test_fraction
}
fn d_embed_dim() -> usize {
    50
}
fn d_init_scale() -> f64 {
    0.05
}
fn d_strategy() -> String {
    ExtractionStrategy::default().to_string()
}
fn d_max_tokens() -> usize {
    crate::embedding::DEFAULT_MAX_TOKENS
}
fn d_model_name() -> String {
    "siamese".into()
}
fn d_siamese() -> SiameseConfig {
    SiameseConfig::new(d_embed_dim())
}
fn d_lstm() -> usize {
    d_siamese().lstm_hidden
}
fn d_dense1() -> usize {
    d_siamese().dense1_units
}
fn d_dense2() -> usize {
    d_siamese().dense2_units
}
fn d_att_units() -> usize {
    d_siamese().attention_units
}
fn d_lr() -> f64 {
    d_siamese().learning_rate
}
fn d_batch() -> usize {
    d_siamese().batch_size
}
fn d_epochs() -> usize {
    d_siamese().epochs
}
fn d_threshold() -> f64 {
    0.5
}
fn d_ckpt_every() -> usize {
    10
}
fn d_cross_max_len() -> usize {
    crate::crossencoder::DEFAULT_MAX_LEN
}

/// Flat experiment config, read from TOML. Relative paths are resolved
/// against the directory of the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub atoms: PathBuf,
    /// word2vec text file; when absent, `extract` builds `embeddings.vec`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vectors: Option<PathBuf>,
    /// Registry name or locator of a contextual / pair encoder.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub registry: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,

    #[serde(default = "d_ratio")]
    pub negative_ratio: f64,
    #[serde(default = "d_topn")]
    pub topn: usize,
    #[serde(default = "d_weight")]
    pub weight_topn_sim: f64,
    #[serde(default = "d_weight")]
    pub weight_ran_sim: f64,
    #[serde(default = "d_weight")]
    pub weight_ran_nosim: f64,
    #[serde(default = "d_true")]
    pub cross_source_only: bool,
    #[serde(default = "d_test_fraction")]
    pub test_fraction: f64,

    #[serde(default = "d_embed_dim")]
    pub embed_dim: usize,
    /// Half-width of the uniform range for random-init embeddings.
    #[serde(default = "d_init_scale")]
    pub init_scale: f64,
    #[serde(default = "d_strategy")]
    pub strategy: String,
    #[serde(default = "d_max_tokens")]
    pub max_tokens: usize,

    #[serde(default = "d_model_name")]
    pub model_name: String,
    #[serde(default = "d_lstm")]
    pub lstm_hidden: usize,
    #[serde(default = "d_dense1")]
    pub dense1_units: usize,
    #[serde(default = "d_dense2")]
    pub dense2_units: usize,
    #[serde(default)]
    pub use_attention: bool,
    #[serde(default = "d_att_units")]
    pub attention_units: usize,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_threshold")]
    pub threshold: f64,
    #[serde(default = "d_true")]
    pub trainable_embeddings: bool,
    #[serde(default)]
    pub loss: Loss,
    /// Epochs between resumable training snapshots.
    #[serde(default = "d_ckpt_every")]
    pub checkpoint_every: usize,

    #[serde(default = "d_cross_max_len")]
    pub cross_max_len: usize,
    #[serde(default = "d_threshold")]
    pub cross_threshold: f64,
    #[serde(default)]
    pub cross_invert: bool,
}

impl ExperimentConfig {
    /// Config with every default and the given atom file.
    pub fn with_atoms(atoms: impl Into<PathBuf>) -> Self {
        let mut c: ExperimentConfig = toml::from_str("atoms = \"\"").expect("defaults parse");
        c.atoms = atoms.into();
        c
    }

    pub fn parse(text: &str) -> Result<Self> {
        let c: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Reads, resolves relative paths against the file's directory, and
    /// applies path overrides from the environment.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut c = Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut c.atoms);
        if let Some(v) = c.vectors.as_mut() {
            resolve(v);
        }
        if let Some(r) = c.registry.as_mut() {
            resolve(r);
        }
        c.apply_env(|k| std::env::var_os(k));
        Ok(c)
    }

    pub fn apply_env<F: Fn(&str) -> Option<std::ffi::OsString>>(&mut self, get: F) {
        if let Some(v) = get(ENV_ATOMS) {
            self.atoms = v.into();
        }
        if let Some(v) = get(ENV_VECTORS) {
            self.vectors = Some(v.into());
        }
        if let Some(v) = get(ENV_REGISTRY) {
            self.registry = Some(v.into());
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset_spec().validate()?;
        self.siamese_config().validate()?;
        self.extraction_strategy()?;
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Config("init_scale must be positive".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be at least 1".into()));
        }
        if self.cross_max_len < 3 {
            return Err(Error::Config("cross_max_len must be at least 3".into()));
        }
        if !(self.cross_threshold > 0.0 && self.cross_threshold < 1.0) {
            return Err(Error::Config("cross_threshold must be in (0,1)".into()));
        }
        Ok(())
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            negative_ratio: self.negative_ratio,
            topn: self.topn,
            stratum_weights: [self.weight_topn_sim, self.weight_ran_sim, self.weight_ran_nosim],
            seed: self.seed,
            cross_source_only: self.cross_source_only,
            test_fraction: self.test_fraction,
        }
    }

    pub fn siamese_config(&self) -> SiameseConfig {
        SiameseConfig {
            embed_dim: self.embed_dim,
            lstm_hidden: self.lstm_hidden,
            dense1_units: self.dense1_units,
            dense2_units: self.dense2_units,
            use_attention: self.use_attention,
            attention_units: self.attention_units,
            max_tokens: self.max_tokens,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            threshold: self.threshold,
            seed: self.seed,
            trainable_embeddings: self.trainable_embeddings,
            loss: self.loss,
        }
    }

    pub fn extraction_strategy(&self) -> Result<ExtractionStrategy> {
        self.strategy.parse()
    }

    pub fn cross_settings(&self) -> CrossEncoderSettings {
        CrossEncoderSettings {
            max_len: self.cross_max_len,
            threshold: self.cross_threshold,
            invert: self.cross_invert,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    fn registry(&self) -> Result<EncoderRegistry> {
        match &self.registry {
            Some(p) => EncoderRegistry::from_path(p),
            None => Ok(EncoderRegistry::default()),
        }
    }
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let mut h = Sha256::new();
    let mut f = File::open(path)?;
    std::io::copy(&mut f, &mut h)?;
    Ok(hex::encode(h.finalize()))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
    /// Content legitimately differs between replays (timings).
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub volatile: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Ingest,
    GenPairs,
    Extract,
    Train,
    Eval,
    CrossEval,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::Ingest => "ingest",
            Command::GenPairs => "gen-pairs",
            Command::Extract => "extract",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::CrossEval => "cross-eval",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub command: Command,
    pub toolkit_version: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: ExperimentConfig,
    /// Threshold given on the command line, when it differs from the config.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::parse(i + 1, format!("manifest: {e}"))))
        .collect()
}

/// What a command did.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub entry: ManifestEntry,
    pub summary: String,
}

/// An opened run directory bound to one resolved config.
#[derive(Clone, Debug)]
pub struct Run {
    dir: PathBuf,
    config: ExperimentConfig,
    force: bool,
}

impl Run {
    /// Opens or creates `dir`. A directory already holding a different
    /// config is refused unless `force` is set, in which case the stored
    /// config is replaced.
    pub fn open(dir: impl Into<PathBuf>, config: ExperimentConfig, force: bool) -> Result<Self> {
        config.validate()?;
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let stored = dir.join(CONFIG_FILE);
        let text = config.to_toml();
        if stored.exists() {
            let old = fs::read_to_string(&stored)?;
            if old != text && !force {
                let old_hash = hex::encode(Sha256::digest(old.as_bytes()));
                return Err(Error::Config(format!(
                    "{} was created with a different config (hash {}, now {}); use a new --out directory or --force",
                    dir.display(),
                    &old_hash[..12],
                    &config.hash()[..12]
                )));
            }
        }
        fs::write(&stored, text)?;
        Ok(Run { dir, config, force })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn guard(&self, outputs: &[&str]) -> Result<()> {
        if self.force {
            return Ok(());
        }
        let existing: Vec<&str> = outputs.iter().copied().filter(|o| self.path(o).exists()).collect();
        if existing.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "refusing to overwrite {} in {} (pass --force)",
                existing.join(", "),
                self.dir.display()
            )))
        }
    }

    fn require(&self, rel: &str, producer: Command) -> Result<PathBuf> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::Config(format!(
                "{} is missing; run `{}` for this run directory first",
                p.display(),
                producer.as_str()
            )))
        }
    }

    fn hash_input(&self, path: &Path) -> Result<FileHash> {
        let shown = match path.strip_prefix(&self.dir) {
            Ok(rel) => rel.to_string_lossy().into_owned(),
            Err(_) => path.to_string_lossy().into_owned(),
        };
        Ok(FileHash {
            path: shown,
            sha256: sha256_file(path)?,
            volatile: false,
        })
    }

    fn record(
        &self,
        command: Command,
        threshold: Option<f64>,
        inputs: &[&Path],
        outputs: &[(&str, bool)],
        summary: String,
    ) -> Result<Outcome> {
        let entry = ManifestEntry {
            command,
            toolkit_version: TOOLKIT_VERSION.to_string(),
            seed: self.config.seed,
            config_hash: self.config.hash(),
            config: self.config.clone(),
            threshold,
            inputs: inputs.iter().map(|p| self.hash_input(p)).collect::<Result<_>>()?,
            outputs: outputs
                .iter()
                .map(|(rel, volatile)| {
                    Ok(FileHash {
                        path: rel.to_string(),
                        sha256: sha256_file(self.path(rel))?,
                        volatile: *volatile,
                    })
                })
                .collect::<Result<_>>()?,
        };
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.path(MANIFEST_FILE))?;
        writeln!(f, "{}", serde_json::to_string(&entry)?)?;
        Ok(Outcome { entry, summary })
    }

    fn store(&self) -> Result<AtomStore> {
        AtomStore::from_path(&self.config.atoms).map_err(|e| match e {
            Error::Io(io) => Error::Config(format!("cannot read atoms {}: {io}", self.config.atoms.display())),
            other => other,
        })
    }

    pub fn run(&self, command: Command, threshold: Option<f64>) -> Result<Outcome> {
        match command {
            Command::Ingest => self.ingest(),
            Command::GenPairs => self.gen_pairs(),
            Command::Extract => self.extract(),
            Command::Train => self.train(),
            Command::Eval => self.eval(threshold),
            Command::CrossEval => self.cross_eval(threshold),
        }
    }

    pub fn ingest(&self) -> Result<Outcome> {
        const OUT: &str = "store_summary.json";
        self.guard(&[OUT])?;
        let store = self.store()?;
        let report = store.validate();
        fs::write(self.path(OUT), serde_json::to_string_pretty(&report)? + "\n")?;
        let summary = format!(
            "{} atoms, {} concepts, {} sources, {} singleton concepts",
            report.atoms, report.concepts, report.sources, report.singleton_concepts
        );
        self.record(Command::Ingest, None, &[&self.config.atoms], &[(OUT, false)], summary)
    }

    pub fn gen_pairs(&self) -> Result<Outcome> {
        let outs = [
            "pairs/all.tsv",
            "pairs/train.tsv",
            "pairs/test.tsv",
            "pairs/summary.json",
        ];
        self.guard(&outs)?;
        let store = self.store()?;
        let spec = self.config.dataset_spec();
        let index = SimilarityIndex::build(&store);
        let ds = Dataset::generate(&store, &index, &spec)?;
        let all = ds.all_pairs();
        let (train, test) = split_train_test(&all, &spec)?;
        fs::create_dir_all(self.path("pairs"))?;
        for (rel, set) in [(outs[0], &all), (outs[1], &train), (outs[2], &test)] {
            let mut w = BufWriter::new(File::create(self.path(rel))?);
            write_pairs(set, &store, &mut w)?;
            w.flush()?;
        }
        let mut per_tag: BTreeMap<String, [usize; 3]> = BTreeMap::new();
        for (k, set) in [&all, &train, &test].into_iter().enumerate() {
            for p in set {
                per_tag.entry(p.split.to_string()).or_default()[k] += 1;
            }
        }
        let stats = serde_json::json!({
            "positives": ds.positives.len(),
            "negatives_requested": ds.negatives.requested,
            "negatives_achieved": ds.negatives.achieved,
            "shortfall": ds.negatives.shortfall,
            "per_tag_all_train_test": per_tag,
        });
        fs::write(self.path(outs[3]), serde_json::to_string_pretty(&stats)? + "\n")?;
        let summary = format!(
            "{} positives, {} negatives; train {}, test {}",
            ds.positives.len(),
            ds.negatives.pairs.len(),
            train.len(),
            test.len()
        );
        let outputs: Vec<(&str, bool)> = outs.iter().map(|o| (*o, false)).collect();
        self.record(Command::GenPairs, None, &[&self.config.atoms], &outputs, summary)
    }

    pub fn extract(&self) -> Result<Outcome> {
        let outs = ["embeddings.vec", "embeddings.json"];
        if self.config.vectors.is_some() {
            return Err(Error::Config(
                "config names a vector file; extract only builds tables from an encoder or random init".into(),
            ));
        }
        self.guard(&outs)?;
        let store = self.store()?;
        let (table, meta) = match &self.config.encoder {
            Some(name) => {
                let enc = self.config.registry()?.load(name)?;
                let strategy = self.config.extraction_strategy()?;
                let corpus: Vec<&str> = store.atoms().iter().map(|a| a.text.as_str()).collect();
                let t = extract_contextual_table(enc.contextual.as_ref(), &corpus, strategy, self.config.max_tokens)?;
                let meta = TableMeta {
                    source: enc.locator.clone(),
                    encoder: Some(enc.contextual.name()),
                    strategy: Some(strategy.to_string()),
                    tokenizer: enc.contextual.tokenizer_id(),
                    dim: t.dim(),
                    tokens: t.len(),
                };
                (t, meta)
            }
            None => {
                let toks: Vec<String> = store.atoms().iter().flat_map(|a| word_sequence(&a.text)).collect();
                let t = EmbeddingTable::random(
                    toks.iter().map(String::as_str),
                    self.config.embed_dim,
                    self.config.init_scale,
                    self.config.seed,
                );
                let meta = TableMeta {
                    source: "random-init".into(),
                    encoder: None,
                    strategy: None,
                    tokenizer: WordTokenizer.tokenizer_id(),
                    dim: t.dim(),
                    tokens: t.len(),
                };
                (t, meta)
            }
        };
        let mut w = BufWriter::new(File::create(self.path(outs[0]))?);
        table.write_word2vec(&mut w)?;
        w.flush()?;
        fs::write(self.path(outs[1]), serde_json::to_string_pretty(&meta)? + "\n")?;
        let summary = format!("{} tokens × {} dims from {}", meta.tokens, meta.dim, meta.source);
        self.record(
            Command::Extract,
            None,
            &[&self.config.atoms],
            &[(outs[0], false), (outs[1], false)],
            summary,
        )
    }

    fn table(&self) -> Result<(EmbeddingTable, TableMeta, PathBuf)> {
        let (path, meta) = match &self.config.vectors {
            Some(p) => (
                p.clone(),
                TableMeta {
                    source: p.display().to_string(),
                    encoder: None,
                    strategy: None,
                    tokenizer: WordTokenizer.tokenizer_id(),
                    dim: 0,
                    tokens: 0,
                },
            ),
            None => {
                let p = self.require("embeddings.vec", Command::Extract)?;
                let meta: TableMeta =
                    serde_json::from_reader(BufReader::new(File::open(self.path("embeddings.json"))?))?;
                (p, meta)
            }
        };
        let table = EmbeddingTable::read_word2vec(BufReader::new(File::open(&path)?))?;
        Ok((table, meta, path))
    }

    fn pairs(&self, rel: &str) -> Result<Vec<PairRecord>> {
        let p = self.require(rel, Command::GenPairs)?;
        read_pairs(BufReader::new(File::open(p)?))
    }

    fn describe(&self, meta: &TableMeta) -> String {
        let mut s = meta.strategy.clone().unwrap_or_default();
        if self.config.use_attention {
            if !s.is_empty() {
                s.push(' ');
            }
            s.push_str("+attention");
        }
        s
    }

    fn model_label(&self, meta: &TableMeta) -> String {
        match &meta.encoder {
            Some(e) => format!("{} ({e})", self.config.model_name),
            None => self.config.model_name.clone(),
        }
    }

    pub fn train(&self) -> Result<Outcome> {
        let outs = ["model.json", "loss.tsv", "train_report.json"];
        self.guard(&outs)?;
        let (table, meta, table_path) = self.table()?;
        let tokenizer = tokenizer_by_id(&meta.tokenizer)?;
        let (train_path, test_path) = (self.path("pairs/train.tsv"), self.path("pairs/test.tsv"));
        let train_records = self.pairs("pairs/train.tsv")?;
        let test_records = self.pairs("pairs/test.tsv")?;

        let model = SiameseModel::build(self.config.siamese_config(), &table, tokenizer.clone())?;
        let encode = |rs: &[PairRecord]| -> Vec<EncodedPair> {
            rs.iter()
                .map(|r| model.encode_pair(&r.str1, &r.str2, r.pair.label))
                .collect()
        };
        let (train, valid) = (encode(&train_records), encode(&test_records));

        let state_path = self.path("train_state.json");
        let mut trainer = if state_path.exists() && !self.force {
            let ckpt = Checkpoint::load(&state_path)?;
            if ckpt.config_hash != model.config().hash() || ckpt.embedding_table_sha256 != table.sha256() {
                return Err(Error::Checkpoint(format!(
                    "{} was written for a different model config or embedding table; delete it or pass --force",
                    state_path.display()
                )));
            }
            ckpt.into_trainer(tokenizer)?
        } else {
            Trainer::new(model.clone())
        };
        let total = self.config.epochs;
        while trainer.epochs_done() < total {
            let next = (trainer.epochs_done() + self.config.checkpoint_every).min(total);
            trainer.fit_until(&train, &valid, next)?;
            if next < total {
                Checkpoint::from_trainer(&trainer).save(&state_path)?;
            }
        }
        if total == 0 {
            trainer.fit_until(&train, &valid, 0)?;
        }
        Checkpoint::from_model(trainer.model()).save(self.path(outs[0]))?;
        let report = trainer.report();
        let mut loss = String::from("epoch\tloss\tvalid_f1\n");
        for (i, l) in report.epoch_losses.iter().enumerate() {
            let f1 = report.valid_metrics.get(i).map(|m| m.f1).unwrap_or(f64::NAN);
            writeln!(loss, "{}\t{l:?}\t{f1:?}", i + 1).unwrap();
        }
        fs::write(self.path(outs[1]), loss)?;
        fs::write(self.path(outs[2]), serde_json::to_string_pretty(report)? + "\n")?;
        if state_path.exists() {
            fs::remove_file(&state_path)?;
        }
        let last = report.epoch_losses.last().copied().unwrap_or(f64::NAN);
        let summary = format!(
            "{} epochs, final loss {last:.6}, {} parameters, {:.1}s",
            report.epochs_run(),
            trainer.model().num_params(),
            report.wall_time_secs
        );
        self.record(
            Command::Train,
            None,
            &[&table_path, &train_path, &test_path],
            &[(outs[0], false), (outs[1], false), (outs[2], true)],
            summary,
        )
    }

    pub fn eval(&self, threshold: Option<f64>) -> Result<Outcome> {
        let outs = ["metrics.json", "metrics.md", "metrics.csv", "scores.tsv", "sweep.tsv"];
        self.guard(&outs)?;
        let t = check_threshold(threshold.unwrap_or(self.config.threshold))?;
        let model_path = self.require("model.json", Command::Train)?;
        let ckpt = Checkpoint::load(&model_path)?;
        let tokenizer = tokenizer_by_id(&ckpt.tokenizer)?;
        let model = ckpt.into_model(tokenizer)?;
        let test_path = self.path("pairs/test.tsv");
        let records = self.pairs("pairs/test.tsv")?;
        if records.is_empty() {
            return Err(Error::Eval("test split is empty".into()));
        }
        let encoded: Vec<EncodedPair> = records
            .iter()
            .map(|r| model.encode_pair(&r.str1, &r.str2, r.pair.label))
            .collect();
        let preds = model.predict(&encoded, t);
        let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
        let labels: Vec<u8> = records.iter().map(|r| r.pair.label).collect();

        let meta = self.table_meta()?;
        let label = self.model_label(&meta);
        let config = self.describe(&meta);
        let row = MetricsRow::new(label.clone(), config.clone(), t, confusion(&scores, &labels, t)?);
        self.write_rows("metrics", std::slice::from_ref(&row))?;

        let mut dump = String::from("aui1\taui2\tsplit\tscore\tlabel\tpred\n");
        for ((r, p), s) in records.iter().zip(&preds).zip(&scores) {
            writeln!(
                dump,
                "{}\t{}\t{}\t{s:?}\t{}\t{}",
                r.pair.a, r.pair.b, r.pair.split, r.pair.label, p.label
            )
            .unwrap();
        }
        fs::write(self.path(outs[3]), dump)?;
        let grid: Vec<f64> = (1..20).map(|k| k as f64 * 0.05).collect();
        let sweep = threshold_sweep(&scores, &labels, &grid, &label, &config)?;
        fs::write(self.path(outs[4]), sweep_tsv(&sweep))?;

        let summary = render(&[row], TableStyle::Markdown);
        let outputs: Vec<(&str, bool)> = outs.iter().map(|o| (*o, false)).collect();
        self.record(Command::Eval, threshold, &[&model_path, &test_path], &outputs, summary)
    }

    fn table_meta(&self) -> Result<TableMeta> {
        match &self.config.vectors {
            Some(p) => Ok(TableMeta {
                source: p.display().to_string(),
                encoder: None,
                strategy: None,
                tokenizer: WordTokenizer.tokenizer_id(),
                dim: self.config.embed_dim,
                tokens: 0,
            }),
            None => Ok(serde_json::from_reader(BufReader::new(File::open(
                self.require("embeddings.json", Command::Extract)?,
            )?))?),
        }
    }

    fn write_rows(&self, stem: &str, rows: &[MetricsRow]) -> Result<()> {
        fs::write(
            self.path(&format!("{stem}.json")),
            serde_json::to_string_pretty(rows)? + "\n",
        )?;
        fs::write(self.path(&format!("{stem}.md")), render(rows, TableStyle::Markdown))?;
        fs::write(self.path(&format!("{stem}.csv")), render(rows, TableStyle::Csv))?;
        Ok(())
    }

    pub fn cross_eval(&self, threshold: Option<f64>) -> Result<Outcome> {
        let outs = [
            "cross_metrics.json",
            "cross_metrics.md",
            "cross_metrics.csv",
            "cross_scores.tsv",
        ];
        self.guard(&outs)?;
        let name = self
            .config
            .encoder
            .as_deref()
            .ok_or_else(|| Error::Config("cross-eval needs `encoder` in the config".into()))?;
        let enc = self.config.registry()?.load(name)?;
        let pair = enc.pair_classifier()?;
        let mut settings = self.config.cross_settings();
        if let Some(t) = threshold {
            settings.threshold = check_threshold(t)?;
        }
        let test_path = self.path("pairs/test.tsv");
        let records = self.pairs("pairs/test.tsv")?;
        let runs = Order::BOTH
            .iter()
            .map(|&o| evaluate_ordered(pair.as_ref(), &records, o, &settings))
            .collect::<Result<Vec<_>>>()?;
        let rows: Vec<MetricsRow> = runs.iter().map(|r| r.row.clone()).collect();
        self.write_rows("cross_metrics", &rows)?;
        let mut w = BufWriter::new(File::create(self.path(outs[3]))?);
        write_score_dump(&runs, &mut w)?;
        w.flush()?;
        let summary = render(&rows, TableStyle::Markdown);
        let outputs: Vec<(&str, bool)> = outs.iter().map(|o| (*o, false)).collect();
        self.record(Command::CrossEval, threshold, &[&test_path], &outputs, summary)
    }
}

fn check_threshold(t: f64) -> Result<f64> {
    if t > 0.0 && t < 1.0 {
        Ok(t)
    } else {
        Err(Error::Config(format!("threshold must be in (0,1), got {t}")))
    }
}

fn sweep_tsv(rows: &[MetricsRow]) -> String {
    let mut s = String::from("threshold\ttp\tfp\tfn\ttn\taccuracy\tprecision\trecall\tf1\n");
    for r in rows {
        let cm = r.confusion.unwrap_or_default();
        writeln!(
            s,
            "{:.2}\t{}\t{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
            r.threshold, cm.tp, cm.fp, cm.fn_, cm.tn, r.accuracy, r.precision, r.recall, r.f1
        )
        .unwrap();
    }
    s
}

/// Where an embedding table came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableMeta {
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<String>,
    pub tokenizer: String,
    pub dim: usize,
    pub tokens: usize,
}

pub fn tokenizer_by_id(id: &str) -> Result<Arc<dyn Tokenizer>> {
    match id {
        "word-lower" => Ok(Arc::new(WordTokenizer)),
        "whitespace" => Ok(Arc::new(WhitespaceTokenizer)),
        other => Err(Error::Config(format!("unknown tokenizer {other:?}"))),
    }
}

/// Merges the metric rows of several run directories, sorted by
/// (model, configuration).
pub fn report<P: AsRef<Path>>(run_dirs: &[P], style: TableStyle) -> Result<String> {
    let mut rows = Vec::new();
    for dir in run_dirs {
        let dir = dir.as_ref();
        let mut found = false;
        for stem in ["metrics.json", "cross_metrics.json"] {
            let p = dir.join(stem);
            if p.exists() {
                let r: Vec<MetricsRow> = serde_json::from_reader(BufReader::new(File::open(&p)?))?;
                rows.extend(r);
                found = true;
            }
        }
        if !found {
            return Err(Error::Config(format!(
                "{} has no metrics; run `eval` or `cross-eval` there first",
                dir.display()
            )));
        }
    }
    sort_rows(&mut rows);
    Ok(render(&rows, style))
}

/// Result of replaying a manifest.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReplayReport {
    pub commands: usize,
    pub compared: usize,
    /// `(command, path, recorded, replayed)` for every differing output.
    pub mismatches: Vec<(String, String, String, String)>,
}

impl ReplayReport {
    pub fn identical(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Re-executes every entry of `manifest` into `out` and compares the
/// non-volatile outputs byte for byte (by SHA-256). External inputs must
/// still match their recorded hashes.
pub fn replay(manifest: impl AsRef<Path>, out: impl Into<PathBuf>, force: bool) -> Result<ReplayReport> {
    let entries = read_manifest(manifest)?;
    if entries.is_empty() {
        return Err(Error::Config("manifest is empty".into()));
    }
    let out = out.into();
    let mut report = ReplayReport::default();
    let mut run: Option<Run> = None;
    for e in &entries {
        for input in &e.inputs {
            let p = Path::new(&input.path);
            if p.is_absolute() || p.exists() {
                let now =
                    sha256_file(p).map_err(|_| Error::Config(format!("replay input {} is missing", p.display())))?;
                if now != input.sha256 {
                    return Err(Error::Config(format!(
                        "replay input {} changed since it was recorded (sha256 {} != {})",
                        p.display(),
                        &now[..12],
                        &input.sha256[..12]
                    )));
                }
            }
        }
        let same = run.as_ref().is_some_and(|r| r.config == e.config);
        if !same {
            run = Some(Run::open(&out, e.config.clone(), force || run.is_some())?);
        }
        let r = run.as_ref().expect("run opened");
        let r = Run {
            force: true,
            ..r.clone()
        };
        let outcome = r.run(e.command, e.threshold)?;
        report.commands += 1;
        for (want, got) in e.outputs.iter().zip(&outcome.entry.outputs) {
            if want.volatile {
                continue;
            }
            report.compared += 1;
            if want.sha256 != got.sha256 {
                report.mismatches.push((
                    e.command.as_str().to_string(),
                    want.path.clone(),
                    want.sha256.clone(),
                    got.sha256.clone(),
                ));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synthesize, SynthSpec};

    fn tiny_setup(dir: &Path) -> ExperimentConfig {
        let store = synthesize(&SynthSpec {
            concepts: 12,
            ..SynthSpec::default()
        })
        .unwrap();
        let atoms = dir.join("atoms.txt");
        store.write_to(File::create(&atoms).unwrap()).unwrap();
        let mut c = ExperimentConfig::with_atoms(atoms);
        c.negative_ratio = 2.0;
        c.embed_dim = 6;
        c.lstm_hidden = 4;
        c.dense1_units = 6;
        c.dense2_units = 3;
        c.batch_size = 16;
        c.epochs = 3;
        c.checkpoint_every = 2;
        c.seed = 5;
        c
    }

    #[test]
    fn defaults_follow_the_component_defaults() {
        let c = ExperimentConfig::with_atoms("a.txt");
        assert_eq!(c.dataset_spec(), DatasetSpec::default());
        assert_eq!(c.siamese_config(), SiameseConfig::new(50));
        assert_eq!(c.extraction_strategy().unwrap(), ExtractionStrategy::default());
        assert_eq!(ExperimentConfig::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(ExperimentConfig::parse("atoms = \"a\"\nepochz = 3\n").is_err());
        assert!(ExperimentConfig::parse("atoms = \"a\"\nthreshold = 1.5\n").is_err());
        assert!(ExperimentConfig::parse("atoms = \"a\"\nstrategy = \"middle\"\n").is_err());
    }

    #[test]
    fn env_overrides_paths_only() {
        let mut c = ExperimentConfig::with_atoms("a.txt");
        c.apply_env(|k| (k == ENV_ATOMS).then(|| "b.txt".into()));
        assert_eq!(c.atoms, PathBuf::from("b.txt"));
        assert_eq!(c.vectors, None);
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("exp.toml");
        fs::write(&p, "atoms = \"data/atoms.txt\"\nepochs = 2\n").unwrap();
        let c = ExperimentConfig::load(&p).unwrap();
        assert_eq!(c.atoms, dir.path().join("data/atoms.txt"));
        assert_eq!(c.epochs, 2);
    }

    #[test]
    fn pipeline_runs_refuses_overwrites_and_replays() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_setup(dir.path());
        let run_dir = dir.path().join("run");
        let run = Run::open(&run_dir, cfg.clone(), false).unwrap();
        assert!(run.train().unwrap_err().to_string().contains("extract"));
        for c in [
            Command::Ingest,
            Command::GenPairs,
            Command::Extract,
            Command::Train,
            Command::Eval,
        ] {
            run.run(c, None).unwrap();
        }
        assert!(!run.path("train_state.json").exists());
        assert!(matches!(run.gen_pairs(), Err(Error::Config(m)) if m.contains("--force")));

        let mut other = cfg.clone();
        other.seed = 6;
        assert!(Run::open(&run_dir, other, false).is_err());

        let entries = read_manifest(run.path(MANIFEST_FILE)).unwrap();
        assert_eq!(entries.len(), 5);
        assert_eq!(entries[1].command, Command::GenPairs);

        let table = report(&[&run_dir], TableStyle::Markdown).unwrap();
        assert!(table.lines().nth(2).unwrap().starts_with("| siamese | — |"));

        let rep = replay(run.path(MANIFEST_FILE), dir.path().join("replay"), false).unwrap();
        assert_eq!(rep.commands, 5);
        assert!(rep.identical(), "{:?}", rep.mismatches);
        assert!(rep.compared >= 12);
    }

    #[test]
    fn interrupted_training_resumes() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_setup(dir.path());
        cfg.epochs = 4;
        let full = Run::open(dir.path().join("full"), cfg.clone(), false).unwrap();
        for c in [Command::GenPairs, Command::Extract, Command::Train] {
            full.run(c, None).unwrap();
        }

        let part = Run::open(dir.path().join("part"), cfg.clone(), false).unwrap();
        part.gen_pairs().unwrap();
        part.extract().unwrap();
        // snapshot after two epochs, as an interrupted run would leave it
        let (table, _, _) = part.table().unwrap();
        let model = SiameseModel::build(cfg.siamese_config(), &table, Arc::new(WordTokenizer)).unwrap();
        let recs = part.pairs("pairs/train.tsv").unwrap();
        let valid = part.pairs("pairs/test.tsv").unwrap();
        let enc = |rs: &[PairRecord]| -> Vec<EncodedPair> {
            rs.iter()
                .map(|r| model.encode_pair(&r.str1, &r.str2, r.pair.label))
                .collect()
        };
        let mut t = Trainer::new(model.clone());
        t.fit_until(&enc(&recs), &enc(&valid), 2).unwrap();
        Checkpoint::from_trainer(&t)
            .save(part.path("train_state.json"))
            .unwrap();
        part.train().unwrap();

        assert_eq!(
            fs::read(full.path("model.json")).unwrap(),
            fs::read(part.path("model.json")).unwrap()
        );
        assert_eq!(
            fs::read(full.path("loss.tsv")).unwrap(),
            fs::read(part.path("loss.tsv")).unwrap()
        );
    }

    #[test]
    fn resume_with_other_config_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_setup(dir.path());
        let run = Run::open(dir.path().join("r"), cfg.clone(), false).unwrap();
        run.gen_pairs().unwrap();
        run.extract().unwrap();
        let (table, _, _) = run.table().unwrap();
        let mut sc = cfg.siamese_config();
        sc.learning_rate = 0.5;
        let model = SiameseModel::build(sc, &table, Arc::new(WordTokenizer)).unwrap();
        Checkpoint::from_trainer(&Trainer::new(model))
            .save(run.path("train_state.json"))
            .unwrap();
        assert!(matches!(run.train(), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn cross_eval_writes_both_orders() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_setup(dir.path());
        cfg.encoder = Some("builtin:hashing".into());
        let run = Run::open(dir.path().join("x"), cfg, false).unwrap();
        run.gen_pairs().unwrap();
        let out = run.cross_eval(None).unwrap();
        let rows: Vec<MetricsRow> =
            serde_json::from_reader(File::open(run.path("cross_metrics.json")).unwrap()).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows[0].config.ends_with("ij") && rows[1].config.ends_with("ji"));
        assert_eq!(out.entry.outputs.len(), 4);
    }

    #[test]
    fn contextual_extraction_uses_the_strategy() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_setup(dir.path());
        cfg.encoder = Some("builtin:hashing".into());
        cfg.strategy = "first/last-layer".into();
        cfg.embed_dim = 32;
        let run = Run::open(dir.path().join("c"), cfg, false).unwrap();
        run.extract().unwrap();
        let meta = run.table_meta().unwrap();
        assert_eq!(meta.strategy.as_deref(), Some("first/last-layer"));
        assert_eq!(meta.dim, 32);
        run.gen_pairs().unwrap();
        run.train().unwrap();
        run.eval(Some(0.4)).unwrap();
        let rows: Vec<MetricsRow> = serde_json::from_reader(File::open(run.path("metrics.json")).unwrap()).unwrap();
        assert_eq!(rows[0].config, "first/last-layer");
        assert_eq!(rows[0].threshold, 0.4);
    }
}
