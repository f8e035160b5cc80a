//! Concrete encoders and the name → locator registry.
//!
//! Locators:
//!
//! * `builtin:hashing` deterministic hashing encoder ([`HashingEncoder`])
//! * `builtin:mock` closed-form test encoder (contextual only)
//! * `process:<program> [args...]` an external process speaking the JSON-lines
//!   protocol described on [`ProcessEncoder`]
//!
//! A registry file is TOML with one table per model:
//!
//! ```toml
//! [models.hashing-small]
//! locator = "builtin:hashing"
//!
//! [models.pubmedbert]
//! locator = "process:python3 serve_bert.py microsoft/BiomedNLP-PubMedBERT"
//! ```

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::{Arc, Mutex};

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::crossencoder::{HeadKind, PairClassifierEncoder, SegmentedInput};
use crate::embedding::fixtures::MockEncoder;
use crate::embedding::{ContextualEncoder, HiddenStates};
use crate::error::{Error, Result};
use crate::tokenize::{Tokenizer, WhitespaceTokenizer, WordTokenizer};

/// Stand-in transformer with no learned weights. Each token starts from a
/// vector derived from the SHA-256 of its text plus a position signal; every
/// further layer mixes each position with its neighbors, weighting the left
/// neighbor more than the right, so outputs depend on context and order.
/// The pair head scores the cosine between the mean top-layer vectors of the
/// two segments.
#[derive(Clone, Debug)]
pub struct HashingEncoder {
    pub dim: usize,
    pub layers: usize,
}

impl Default for HashingEncoder {
    fn default() -> Self {
        HashingEncoder { dim: 32, layers: 6 }
    }
}

impl HashingEncoder {
    fn base(&self, token: &str, pos: usize) -> Vec<f64> {
        let digest: [u8; 32] = Sha256::digest(token.as_bytes()).into();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::from_seed(digest);
        (0..self.dim)
            .map(|k| {
                let phase = pos as f64 / 10f64.powf(k as f64 / self.dim as f64);
                rng.gen_range(-1.0..1.0) + 0.1 * phase.sin()
            })
            .collect()
    }
}

impl Tokenizer for HashingEncoder {
    fn tokenizer_id(&self) -> String {
        WordTokenizer.tokenizer_id()
    }

    fn tokenize(&self, text: &str) -> Vec<String> {
        WordTokenizer.tokenize(text)
    }
}

impl ContextualEncoder for HashingEncoder {
    fn name(&self) -> String {
        format!("hashing-{}x{}", self.layers, self.dim)
    }

    fn num_layers(&self) -> usize {
        self.layers
    }

    fn hidden_dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, tokens: &[String]) -> Result<HiddenStates> {
        let n = tokens.len();
        let mut h = HiddenStates::zeros(self.layers, n, self.dim);
        for (p, t) in tokens.iter().enumerate() {
            h.at_mut(0, p).copy_from_slice(&self.base(t, p));
        }
        for l in 1..self.layers {
            for p in 0..n {
                let mut v = vec![0.0; self.dim];
                for (k, x) in v.iter_mut().enumerate() {
                    let left = if p > 0 { h.at(l - 1, p - 1)[k] } else { 0.0 };
                    let right = if p + 1 < n { h.at(l - 1, p + 1)[k] } else { 0.0 };
                    *x = (0.6 * h.at(l - 1, p)[k] + 0.25 * left + 0.15 * right).tanh();
                }
                h.at_mut(l, p).copy_from_slice(&v);
            }
        }
        Ok(h)
    }
}

impl PairClassifierEncoder for HashingEncoder {
    fn head(&self) -> HeadKind {
        HeadKind::Untrained
    }

    fn classify_pair(&self, input: &SegmentedInput) -> Result<f64> {
        let h = self.encode(&input.tokens)?;
        let top = self.layers - 1;
        let (a, b) = input.parts();
        let mean = |start: usize, len: usize| {
            let mut m = vec![0.0; self.dim];
            for p in start..start + len {
                for (x, y) in m.iter_mut().zip(h.at(top, p)) {
                    *x += y / len as f64;
                }
            }
            m
        };
        let ma = mean(1, a.len());
        let mb = mean(a.len() + 2, b.len());
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let (na, nb) = (norm(&ma), norm(&mb));
        if na == 0.0 || nb == 0.0 {
            return Ok(0.5);
        }
        let cos = ma.iter().zip(&mb).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
        Ok(((cos + 1.0) / 2.0).clamp(0.0, 1.0))
    }
}

fn local_tokenizer(id: &str) -> Result<Box<dyn Tokenizer>> {
    match id {
        "word-lower" => Ok(Box::new(WordTokenizer)),
        "whitespace" => Ok(Box::new(WhitespaceTokenizer)),
        other => Err(Error::Config(format!(
            "tokenizer {other:?} is not available locally (use word-lower or whitespace)"
        ))),
    }
}

/// Self-description returned by an encoder process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderInfo {
    pub name: String,
    pub layers: usize,
    pub dim: usize,
    pub tokenizer: String,
    #[serde(default)]
    pub head: Option<HeadKind>,
}

struct Pipes {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

/// Encoder running in a child process. Requests and responses are single
/// JSON objects, one per line:
///
/// | request | response |
/// |---|---|
/// | `{"op":"info"}` | `{"name","layers","dim","tokenizer","head"}` |
/// | `{"op":"encode","tokens":[..]}` | `{"data":[..]}`, layer-major `layers × n × dim` |
/// | `{"op":"classify","tokens":[..],"segments":[..]}` | `{"score":p}` |
///
/// Any response may be `{"error":"message"}` instead. Tokenization happens
/// locally with the tokenizer the process names, so it must be one this
/// crate provides.
pub struct ProcessEncoder {
    info: EncoderInfo,
    tokenizer: Box<dyn Tokenizer>,
    pipes: Mutex<Pipes>,
}

impl std::fmt::Debug for ProcessEncoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProcessEncoder").field("info", &self.info).finish()
    }
}

impl ProcessEncoder {
    pub fn spawn(program: &str, args: &[String]) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Encoder {
                encoder: program.to_string(),
                message: format!("cannot start: {e}"),
            })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        let pipes = Mutex::new(Pipes { child, stdin, stdout });
        let mut enc = ProcessEncoder {
            info: EncoderInfo {
                name: program.to_string(),
                layers: 0,
                dim: 0,
                tokenizer: String::new(),
                head: None,
            },
            tokenizer: Box::new(WhitespaceTokenizer),
            pipes,
        };
        let info: EncoderInfo = serde_json::from_value(enc.call(json!({"op": "info"}))?)?;
        enc.tokenizer = local_tokenizer(&info.tokenizer)?;
        enc.info = info;
        Ok(enc)
    }

    pub fn info(&self) -> &EncoderInfo {
        &self.info
    }

    fn call(&self, request: Value) -> Result<Value> {
        let err = |message: String| Error::Encoder {
            encoder: self.info.name.clone(),
            message,
        };
        let mut pipes = self.pipes.lock().map_err(|_| err("pipe lock poisoned".into()))?;
        let mut line = serde_json::to_string(&request)?;
        line.push('\n');
        pipes
            .stdin
            .write_all(line.as_bytes())
            .and_then(|_| pipes.stdin.flush())
            .map_err(|e| err(format!("write failed: {e}")))?;
        let mut reply = String::new();
        let n = pipes
            .stdout
            .read_line(&mut reply)
            .map_err(|e| err(format!("read failed: {e}")))?;
        if n == 0 {
            return Err(err("process closed its output".into()));
        }
        let value: Value = serde_json::from_str(&reply).map_err(|e| err(format!("bad reply: {e}")))?;
        if let Some(msg) = value.get("error") {
            return Err(err(msg.as_str().unwrap_or("unknown error").to_string()));
        }
        Ok(value)
    }
}

impl Drop for ProcessEncoder {
    fn drop(&mut self) {
        if let Ok(p) = self.pipes.get_mut() {
            let _ = p.child.kill();
            let _ = p.child.wait();
        }
    }
}

impl Tokenizer for ProcessEncoder {
    fn tokenizer_id(&self) -> String {
        self.tokenizer.tokenizer_id()
    }

    fn tokenize(&self, text: &str) -> Vec<String> {
        self.tokenizer.tokenize(text)
    }
}

impl ContextualEncoder for ProcessEncoder {
    fn name(&self) -> String {
        self.info.name.clone()
    }

    fn num_layers(&self) -> usize {
        self.info.layers
    }

    fn hidden_dim(&self) -> usize {
        self.info.dim
    }

    fn encode(&self, tokens: &[String]) -> Result<HiddenStates> {
        let reply = self.call(json!({"op": "encode", "tokens": tokens}))?;
        let data: Vec<f64> = serde_json::from_value(reply.get("data").cloned().unwrap_or(Value::Null))?;
        let mut h = HiddenStates::zeros(self.info.layers, tokens.len(), self.info.dim);
        if data.len() != h.data.len() {
            return Err(Error::Encoder {
                encoder: self.name(),
                message: format!("encode returned {} values, expected {}", data.len(), h.data.len()),
            });
        }
        h.data = data;
        Ok(h)
    }
}

impl PairClassifierEncoder for ProcessEncoder {
    fn head(&self) -> HeadKind {
        self.info.head.unwrap_or_default()
    }

    fn classify_pair(&self, input: &SegmentedInput) -> Result<f64> {
        let reply = self.call(json!({"op": "classify", "tokens": input.tokens, "segments": input.segments}))?;
        reply
            .get("score")
            .and_then(Value::as_f64)
            .ok_or_else(|| Error::Encoder {
                encoder: self.name(),
                message: "classify reply has no numeric score".into(),
            })
    }
}

/// Answers protocol requests for `encoder` until `input` ends. This is the
/// server side of [`ProcessEncoder`].
pub fn serve<E, R, W>(encoder: &E, input: R, mut output: W) -> Result<()>
where
    E: PairClassifierEncoder + ?Sized,
    R: BufRead,
    W: Write,
{
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = match handle(encoder, &line) {
            Ok(v) => v,
            Err(e) => json!({"error": e.to_string()}),
        };
        writeln!(output, "{reply}")?;
        output.flush()?;
    }
    Ok(())
}

fn handle<E: PairClassifierEncoder + ?Sized>(encoder: &E, line: &str) -> Result<Value> {
    let req: Value = serde_json::from_str(line)?;
    let strings = |key: &str| -> Result<Vec<String>> {
        Ok(serde_json::from_value(req.get(key).cloned().unwrap_or(Value::Null))?)
    };
    match req.get("op").and_then(Value::as_str) {
        Some("info") => Ok(serde_json::to_value(EncoderInfo {
            name: encoder.name(),
            layers: encoder.num_layers(),
            dim: encoder.hidden_dim(),
            tokenizer: encoder.tokenizer_id(),
            head: Some(encoder.head()),
        })?),
        Some("encode") => Ok(json!({"data": encoder.encode(&strings("tokens")?)?.data})),
        Some("classify") => {
            let tokens = strings("tokens")?;
            let segments: Vec<u8> = serde_json::from_value(req.get("segments").cloned().unwrap_or(Value::Null))?;
            let score = encoder.classify_pair(&SegmentedInput { tokens, segments })?;
            Ok(json!({"score": score}))
        }
        other => Err(Error::Config(format!("unknown op {other:?}"))),
    }
}

/// A loaded encoder, with its pair head when it has one.
#[derive(Clone)]
pub struct LoadedEncoder {
    pub locator: String,
    pub contextual: Arc<dyn ContextualEncoder>,
    pub pair: Option<Arc<dyn PairClassifierEncoder>>,
}

impl std::fmt::Debug for LoadedEncoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LoadedEncoder")
            .field("locator", &self.locator)
            .field("name", &self.contextual.name())
            .field("pair", &self.pair.is_some())
            .finish()
    }
}

impl LoadedEncoder {
    pub fn pair_classifier(&self) -> Result<&Arc<dyn PairClassifierEncoder>> {
        self.pair
            .as_ref()
            .ok_or_else(|| Error::Config(format!("encoder {} has no pair-classification head", self.locator)))
    }
}

/// Opens an encoder from a locator string.
pub fn load_locator(locator: &str) -> Result<LoadedEncoder> {
    let done = |c: Arc<dyn ContextualEncoder>, p: Option<Arc<dyn PairClassifierEncoder>>| LoadedEncoder {
        locator: locator.to_string(),
        contextual: c,
        pair: p,
    };
    match locator.split_once(':') {
        Some(("builtin", "hashing")) => {
            let e = Arc::new(HashingEncoder::default());
            Ok(done(e.clone(), Some(e)))
        }
        Some(("builtin", "mock")) => Ok(done(Arc::new(MockEncoder::new(8, 4)), None)),
        Some(("process", cmd)) => {
            let mut parts = cmd.split_whitespace().map(String::from);
            let program = parts
                .next()
                .ok_or_else(|| Error::Config("process locator has no program".into()))?;
            let args: Vec<String> = parts.collect();
            let e = Arc::new(ProcessEncoder::spawn(&program, &args)?);
            Ok(done(e.clone(), Some(e)))
        }
        _ => Err(Error::Config(format!(
            "unknown encoder locator {locator:?} (expected builtin:hashing, builtin:mock or process:<command>)"
        ))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistryEntry {
    pub locator: String,
}

/// Model name → locator mapping.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderRegistry {
    #[serde(default)]
    pub models: BTreeMap<String, RegistryEntry>,
}

impl EncoderRegistry {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("encoder registry: {e}")))
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Resolves `name` through the registry; names containing `:` are taken
    /// as locators directly.
    pub fn resolve(&self, name: &str) -> Result<String> {
        if let Some(e) = self.models.get(name) {
            return Ok(e.locator.clone());
        }
        if name.contains(':') {
            return Ok(name.to_string());
        }
        let known: Vec<&str> = self.models.keys().map(String::as_str).collect();
        Err(Error::Config(format!(
            "encoder {name:?} is not in the registry (known: {})",
            if known.is_empty() {
                "none".to_string()
            } else {
                known.join(", ")
            }
        )))
    }

    pub fn load(&self, name: &str) -> Result<LoadedEncoder> {
        load_locator(&self.resolve(name)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crossencoder::format_pair;
    use crate::embedding::{extract_contextual_table, ExtractionStrategy};

    #[test]
    fn hashing_encoder_is_deterministic_and_contextual() {
        let e = HashingEncoder::default();
        let toks = |s: &str| e.tokenize(s);
        let a = e.encode(&toks("acute headache")).unwrap();
        let b = e.encode(&toks("acute headache")).unwrap();
        assert_eq!(a, b);
        let c = e.encode(&toks("chronic headache")).unwrap();
        assert_eq!(a.at(0, 1), c.at(0, 1));
        assert_ne!(a.at(5, 1), c.at(5, 1));
    }

    #[test]
    fn hashing_pair_scores_are_probabilities() {
        let e = HashingEncoder::default();
        for (x, y) in [
            ("Headache", "Headache (finding)"),
            ("", ""),
            ("a", ""),
            ("fever", "cough"),
        ] {
            let input = format_pair(x, y, &e, 64).unwrap();
            let p = e.classify_pair(&input).unwrap();
            assert!((0.0..=1.0).contains(&p), "{x} / {y}: {p}");
        }
        let same = e
            .classify_pair(&format_pair("headache", "headache", &e, 64).unwrap())
            .unwrap();
        let diff = e
            .classify_pair(&format_pair("headache", "fracture", &e, 64).unwrap())
            .unwrap();
        assert!(same > diff);
    }

    #[test]
    fn hashing_encoder_supports_every_strategy() {
        let e = HashingEncoder::default();
        for s in ExtractionStrategy::ALL {
            let t = extract_contextual_table(&e, &["acute headache", "headache"], s, 30).unwrap();
            assert_eq!(t.len(), 2);
        }
    }

    #[test]
    fn serve_answers_the_protocol() {
        let e = HashingEncoder { dim: 3, layers: 4 };
        let requests = concat!(
            "{\"op\":\"info\"}\n",
            "{\"op\":\"encode\",\"tokens\":[\"a\",\"b\"]}\n",
            "{\"op\":\"classify\",\"tokens\":[\"[CLS]\",\"a\",\"[SEP]\",\"a\",\"[SEP]\"],\"segments\":[0,0,0,1,1]}\n",
            "{\"op\":\"nope\"}\n"
        );
        let mut out = Vec::new();
        serve(&e, requests.as_bytes(), &mut out).unwrap();
        let replies: Vec<Value> = String::from_utf8(out)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(replies[0]["layers"], 4);
        assert_eq!(replies[0]["tokenizer"], "word-lower");
        assert_eq!(replies[1]["data"].as_array().unwrap().len(), 4 * 2 * 3);
        assert!((0.0..=1.0).contains(&replies[2]["score"].as_f64().unwrap()));
        assert!(replies[3]["error"].as_str().unwrap().contains("unknown op"));
    }

    #[test]
    fn registry_resolution() {
        let reg = EncoderRegistry::parse("[models.small]\nlocator = \"builtin:hashing\"\n").unwrap();
        assert_eq!(reg.resolve("small").unwrap(), "builtin:hashing");
        assert_eq!(reg.resolve("builtin:mock").unwrap(), "builtin:mock");
        assert!(reg.resolve("missing").unwrap_err().to_string().contains("small"));
        assert!(EncoderRegistry::parse("[models.x]\nlocator = 1\n").is_err());
        assert!(reg.load("small").unwrap().pair.is_some());
        assert!(reg.load("builtin:mock").unwrap().pair_classifier().is_err());
        assert!(load_locator("builtin:bert").is_err());
    }
}
