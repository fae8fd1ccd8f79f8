//! Run configuration and the flat `key = value` file format.
//!
//! Keys are the dotted paths of [`RunConfig`] fields (`skip.k`, `model.d_model`,
//! ...). Lines starting with `#` and blank lines are ignored. Values may be
//! wrapped in double quotes. An empty value clears an optional field.
//!
//! Precedence, lowest first: defaults, config file, `SKIM_SEED`, command-line
//! overrides.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::corpus::{DEFAULT_MIN_TOKENS, VOCAB_SIZE};
use crate::dataserver::SkipConfig;
use crate::error::{Error, Result};
use crate::memory::MemoryConfig;
use crate::model::{AdamConfig, ModelConfig};
use crate::par::Execution;

pub const SEED_ENV: &str = "SKIM_SEED";
pub const RESOLVED_FILE: &str = "config.resolved";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Pretrain,
    PretrainShort,
    Finetune,
    Eval,
    QaGen,
    QaEval,
    Traverse,
    Plot,
    GenCorpus,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = serde_json::to_value(self).expect("mode serializes");
        f.write_str(v.as_str().expect("string"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CorpusFormat {
    /// `{"text": ...}` records.
    #[default]
    Text,
    /// QA records (see [`super::qa::QaRecord`]).
    Qa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    Sequential,
    #[default]
    Parallel,
}

impl From<ExecMode> for Execution {
    fn from(m: ExecMode) -> Self {
        match m {
            ExecMode::Sequential => Execution::Sequential,
            ExecMode::Parallel => Execution::Parallel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub path: PathBuf,
    pub format: CorpusFormat,
    pub min_tokens: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            path: PathBuf::from("corpus.jsonl"),
            format: CorpusFormat::Text,
            min_tokens: DEFAULT_MIN_TOKENS,
        }
    }
}

/// Synthetic long-document generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub docs: usize,
    pub min_bytes: usize,
    pub max_bytes: usize,
    /// Size of the sentence template pool shared by all documents.
    pub templates: usize,
    /// Probability that the next span is random letters instead of a template.
    pub noise_frac: f64,
    pub noise_min: usize,
    pub noise_max: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            docs: 64,
            min_bytes: 4000,
            max_bytes: 6000,
            templates: 16,
            noise_frac: 0.1,
            noise_min: 8,
            noise_max: 48,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaConfig {
    pub examples: usize,
    /// Distractor passages per example.
    pub distractors: usize,
    /// Answer-bearing passages per example.
    pub answers: usize,
    pub min_evidence_bytes: usize,
    pub distractor_min_bytes: usize,
    pub distractor_max_bytes: usize,
    /// Longest answer the decoder may emit, in tokens.
    pub max_answer_tokens: usize,
}

impl Default for QaConfig {
    fn default() -> Self {
        Self {
            examples: 200,
            distractors: 40,
            answers: 3,
            min_evidence_bytes: 8192,
            distractor_min_bytes: 220,
            distractor_max_bytes: 320,
            max_answer_tokens: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub exec: ExecMode,
    /// Checkpoint to start from (finetune) or to evaluate (eval, qa_eval, traverse).
    pub init_checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub corpus: CorpusSection,
    pub model: ModelConfig,
    pub skip: SkipConfig,
    pub memory: MemoryConfig,
    pub optim: AdamConfig,
    pub synth: SynthConfig,
    pub qa: QaConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Pretrain,
            seed: 0,
            steps: 2000,
            batch_size: 8,
            checkpoint_every: 0,
            exec: ExecMode::Parallel,
            init_checkpoint: None,
            out_dir: PathBuf::from("out"),
            corpus: CorpusSection::default(),
            model: ModelConfig::default(),
            skip: SkipConfig {
                k: 0,
                window: 256,
                ..SkipConfig::default()
            },
            memory: MemoryConfig::default(),
            optim: AdamConfig::default(),
            synth: SynthConfig::default(),
            qa: QaConfig::default(),
        }
    }
}

/// Keys fixed by other fields and therefore not settable.
const DERIVED_KEYS: [&str; 2] = ["model.seed", "model.vocab_size"];

impl RunConfig {
    pub fn execution(&self) -> Execution {
        self.exec.into()
    }

    /// Model config with the run seed applied.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            seed: self.seed,
            vocab_size: VOCAB_SIZE,
            ..self.model
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.skip.validate()?;
        if self.skip.window > self.model.max_window {
            return Err(Error::Config(format!(
                "skip.window {} exceeds model.max_window {}",
                self.skip.window, self.model.max_window
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.memory.enabled && (self.memory.capacity == 0 || self.memory.k_retrieve == 0) {
            return Err(Error::Config("memory.capacity and memory.k_retrieve must be positive".into()));
        }
        if self.synth.min_bytes > self.synth.max_bytes || self.synth.noise_min > self.synth.noise_max {
            return Err(Error::Config("synth ranges must have min <= max".into()));
        }
        if !(0.0..=1.0).contains(&self.synth.noise_frac) {
            return Err(Error::Config(format!("synth.noise_frac must be in [0, 1], got {}", self.synth.noise_frac)));
        }
        if self.qa.answers == 0 || self.qa.distractor_min_bytes > self.qa.distractor_max_bytes {
            return Err(Error::Config("qa.answers must be positive and distractor ranges ordered".into()));
        }
        let needs_ckpt = matches!(self.mode, Mode::Finetune | Mode::Eval | Mode::QaEval | Mode::Traverse);
        if needs_ckpt && self.init_checkpoint.is_none() {
            return Err(Error::Config(format!("mode {} requires init_checkpoint", self.mode)));
        }
        Ok(())
    }

    /// Every settable key with its current value, sorted.
    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        for k in DERIVED_KEYS {
            out.remove(k);
        }
        out
    }

    pub fn from_flat(flat: &BTreeMap<String, Value>) -> Result<Self> {
        let mut root = Map::new();
        for (key, value) in flat {
            insert_dotted(&mut root, key, value.clone());
        }
        let model = root
            .get_mut("model")
            .and_then(Value::as_object_mut)
            .ok_or_else(|| Error::Config("missing model section".into()))?;
        model.insert("seed".into(), Value::from(0u64));
        model.insert("vocab_size".into(), Value::from(VOCAB_SIZE));
        let mut cfg: RunConfig = serde_json::from_value(Value::Object(root)).map_err(|e| Error::Config(e.to_string()))?;
        cfg.model = cfg.model_config();
        Ok(cfg)
    }

    pub fn keys() -> Vec<String> {
        Self::default().to_flat().into_keys().collect()
    }

    /// Applies one `key=value` assignment.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let mut flat = self.to_flat();
        let current = flat.get(key).ok_or_else(|| Error::UnknownKey {
            key: key.to_string(),
            valid: Self::keys().join(", "),
        })?;
        let optional = Self::default().to_flat().get(key).is_some_and(Value::is_null);
        let raw = unquote(raw.trim());
        let value = parse_value(key, current, raw, optional)?;
        flat.insert(key.to_string(), value);
        *self = Self::from_flat(&flat)?;
        Ok(())
    }

    /// Applies `key=value` lines (file syntax).
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1))
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    /// Applies the value of `SKIM_SEED`, if any, as the seed.
    pub fn apply_seed_env(&mut self, value: Option<&str>) -> Result<()> {
        match value {
            Some(v) => self.set("seed", v).map_err(|e| Error::Config(format!("{SEED_ENV}: {e}"))),
            None => Ok(()),
        }
    }

    /// Applies `key=value` overrides as given on the command line.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not of the form key=value")))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// The file form: one sorted `key = value` line per key.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.to_flat() {
            let v = match v {
                Value::Null => String::new(),
                Value::String(s) => s,
                other => other.to_string(),
            };
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn write_resolved(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_FILE);
        fs::write(&path, self.render()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

impl FromStr for RunConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(s)?;
        Ok(cfg)
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

fn insert_dotted(root: &mut Map<String, Value>, key: &str, value: Value) {
    match key.split_once('.') {
        None => {
            root.insert(key.to_string(), value);
        }
        Some((head, rest)) => {
            let child = root
                .entry(head.to_string())
                .or_insert_with(|| Value::Object(Map::new()));
            if let Value::Object(m) = child {
                insert_dotted(m, rest, value);
            }
        }
    }
}

fn unquote(s: &str) -> &str {
    s.strip_prefix('"').and_then(|t| t.strip_suffix('"')).unwrap_or(s)
}

fn parse_value(key: &str, current: &Value, raw: &str, optional: bool) -> Result<Value> {
    let bad = |what: &str| Error::Config(format!("{key}: cannot parse `{raw}` as {what}"));
    if optional && raw.is_empty() {
        return Ok(Value::Null);
    }
    Ok(match current {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad("a boolean"))?),
        Value::Number(n) if n.is_u64() => Value::from(raw.parse::<u64>().map_err(|_| bad("an unsigned integer"))?),
        Value::Number(n) if n.is_i64() => Value::from(raw.parse::<i64>().map_err(|_| bad("an integer"))?),
        Value::Number(_) => {
            let x: f64 = raw.parse().map_err(|_| bad("a number"))?;
            serde_json::Number::from_f64(x).map(Value::Number).ok_or_else(|| bad("a finite number"))?
        }
        _ => Value::String(raw.to_string()),
    })
}
