//! Synthetic long-evidence QA: generation, reading with a question prefix, and
//! the K_train x K_infer accuracy grid.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, TokenId, EOS, SEP};
use crate::dataserver::SkipConfig;
use crate::error::{Error, Result};
use crate::memory::MemoryConfig;
use crate::model::{generate_until, Params};
use crate::par::{self, Execution};

use super::config::{QaConfig, SynthConfig};
use super::read::{answer_context, answer_prompt, read_item, ReadItem};
use super::synth::{random_letters, TextSource};

pub const GRID_FILE: &str = "grid.json";
pub const QA_EVAL_FILE: &str = "qa_eval.jsonl";

const SYLLABLES: &[&str] = &["ka", "lo", "mi", "ra", "ve", "su", "to", "ni", "ze", "pa", "do", "ri", "bu", "fe"];

/// One line of a QA file. Evidence passages are joined with `SEP` when tokenized.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaRecord {
    pub question: String,
    pub evidence: Vec<String>,
    pub answer: String,
    /// Token offsets, within the joined evidence, of the answer-bearing passages.
    pub answer_positions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QaExample {
    pub question: Vec<TokenId>,
    /// `question ++ [SEP]`, prepended to every evidence window.
    pub prefix: Vec<TokenId>,
    pub evidence: Vec<TokenId>,
    pub answer: Vec<TokenId>,
    pub answer_positions: Vec<usize>,
}

impl QaExample {
    pub fn item(&self, id: usize) -> ReadItem<'_> {
        ReadItem {
            id,
            prefix: &self.prefix,
            body: &self.evidence,
            answer: Some(&self.answer),
        }
    }

    /// True when the answer occurs verbatim in the evidence.
    pub fn answer_in_evidence(&self) -> bool {
        !self.answer.is_empty() && self.evidence.windows(self.answer.len()).any(|w| w == self.answer.as_slice())
    }
}

impl From<&QaRecord> for QaExample {
    fn from(r: &QaRecord) -> Self {
        let question = tokenize(&r.question);
        let mut prefix = question.clone();
        prefix.push(SEP);
        let mut evidence = Vec::new();
        for (i, p) in r.evidence.iter().enumerate() {
            if i > 0 {
                evidence.push(SEP);
            }
            evidence.extend(tokenize(p));
        }
        Self {
            question,
            prefix,
            evidence,
            answer: tokenize(&r.answer),
            answer_positions: r.answer_positions.clone(),
        }
    }
}

fn entity(rng: &mut impl Rng) -> String {
    let n = rng.gen_range(2..=3);
    let mut s: String = (0..n).map(|_| *SYLLABLES.choose(rng).expect("non-empty")).collect();
    s[..1].make_ascii_uppercase();
    s
}

fn fact(who: &str, answer: &str) -> String {
    format!("The key for {who} is {answer}.")
}

/// Seeded QA set. Each example hides `answers` copies of its fact among
/// `distractors` synthetic passages (some carrying facts about other
/// entities), adding passages until the evidence reaches `min_evidence_bytes`.
pub fn generate_qa(qa: &QaConfig, synth: &SynthConfig, seed: u64) -> Vec<QaRecord> {
    let mut src = TextSource::new(synth, seed);
    (0..qa.examples)
        .map(|_| {
            let rng = src.rng();
            let who = entity(rng);
            let n = rng.gen_range(4..=6);
            let answer = random_letters(rng, n);
            let mut passages = Vec::new();
            let mut bytes = 0;
            while passages.len() < qa.distractors || bytes + qa.answers * fact(&who, &answer).len() < qa.min_evidence_bytes {
                let len = src.rng().gen_range(qa.distractor_min_bytes..=qa.distractor_max_bytes);
                let mut p = src.text(len);
                let rng = src.rng();
                if rng.gen_bool(0.3) {
                    let other = loop {
                        let e = entity(rng);
                        if e != who {
                            break e;
                        }
                    };
                    let cut = rng.gen_range(0..=p.len());
                    let n = rng.gen_range(4..=6);
                    p.insert_str(cut, &format!(" {} ", fact(&other, &random_letters(rng, n))));
                }
                bytes += p.len();
                passages.push(p);
            }
            let rng = src.rng();
            let mut slots: Vec<usize> = (0..passages.len() + qa.answers).collect();
            slots.shuffle(rng);
            let mut answer_slots = slots[..qa.answers].to_vec();
            answer_slots.sort_unstable();
            let mut evidence = Vec::with_capacity(passages.len() + qa.answers);
            let mut rest = passages.into_iter();
            let mut positions = Vec::new();
            let mut offset = 0;
            for slot in 0..answer_slots.len() + rest.len() {
                let p = if answer_slots.binary_search(&slot).is_ok() {
                    positions.push(offset);
                    fact(&who, &answer)
                } else {
                    rest.next().expect("enough passages")
                };
                offset += p.len() + 1;
                evidence.push(p);
            }
            QaRecord {
                question: format!("What is the key for {who}?"),
                evidence,
                answer,
                answer_positions: positions,
            }
        })
        .collect()
}

pub fn write_qa(path: impl AsRef<Path>, records: &[QaRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_qa(path: impl AsRef<Path>) -> Result<Vec<QaRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::MalformedLine {
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

pub fn load_qa(path: impl AsRef<Path>) -> Result<Vec<QaExample>> {
    Ok(read_qa(path)?.iter().map(QaExample::from).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaOutcome {
    pub index: usize,
    pub windows_read: usize,
    pub tokens_skipped: u64,
    pub prediction: String,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaEvalResult {
    pub k_train: u64,
    pub k_infer: u64,
    pub accuracy: f64,
    pub mean_windows_read: f64,
    pub mean_tokens_skipped: f64,
    pub examples: usize,
}

/// Reads each example's evidence with skip rate `skip.k` and greedily decodes
/// an answer after the question (plus the last window when memory is off).
pub fn qa_eval(
    params: &Params<f32>,
    memory: &MemoryConfig,
    examples: &[QaExample],
    skip: &SkipConfig,
    max_answer: usize,
    exec: Execution,
) -> Result<Vec<QaOutcome>> {
    if examples.is_empty() {
        return Err(Error::EmptyEval);
    }
    if skip.window > params.config.max_window {
        return Err(Error::CheckpointMismatch(format!(
            "window {} exceeds the checkpoint's max_window {}",
            skip.window, params.config.max_window
        )));
    }
    let indexed: Vec<(usize, &QaExample)> = examples.iter().enumerate().collect();
    par::map(exec, &indexed, |&(index, ex)| {
        let item = ex.item(index);
        let r = read_item(params, memory, &item, skip)?;
        let ctx = if r.memory.is_some() {
            &[][..]
        } else {
            answer_context(skip.window, ex.prefix.len(), max_answer, &r.last_chunk)
        };
        let prompt = answer_prompt(&ex.prefix, ctx);
        let mut pred = generate_until(params, &prompt, max_answer, r.memory.as_ref(), Some(EOS))?;
        if pred.last() == Some(&EOS) {
            pred.pop();
        }
        Ok(QaOutcome {
            index,
            windows_read: r.trace.steps.len(),
            tokens_skipped: r.trace.tokens_skipped(),
            prediction: crate::corpus::detokenize(&pred),
            correct: pred == ex.answer,
        })
    })
    .into_iter()
    .collect()
}

pub fn summarize(k_train: u64, k_infer: u64, outcomes: &[QaOutcome]) -> QaEvalResult {
    let n = outcomes.len().max(1) as f64;
    QaEvalResult {
        k_train,
        k_infer,
        accuracy: outcomes.iter().filter(|o| o.correct).count() as f64 / n,
        mean_windows_read: outcomes.iter().map(|o| o.windows_read as f64).sum::<f64>() / n,
        mean_tokens_skipped: outcomes.iter().map(|o| o.tokens_skipped as f64).sum::<f64>() / n,
        examples: outcomes.len(),
    }
}

/// Grid file: one cell per (K_train, K_infer), sorted by both.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub cells: Vec<QaEvalResult>,
}

impl Grid {
    pub fn load_or_default(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        match fs::read_to_string(path) {
            Ok(text) => Ok(serde_json::from_str(&text)?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    /// Inserts or replaces the cell with the same key.
    pub fn upsert(&mut self, cell: QaEvalResult) {
        let mut by_key: BTreeMap<(u64, u64), QaEvalResult> =
            self.cells.drain(..).map(|c| ((c.k_train, c.k_infer), c)).collect();
        by_key.insert((cell.k_train, cell.k_infer), cell);
        self.cells = by_key.into_values().collect();
    }

    pub fn k_train_values(&self) -> Vec<u64> {
        let mut v: Vec<u64> = self.cells.iter().map(|c| c.k_train).collect();
        v.dedup();
        v
    }

    pub fn k_infer_values(&self) -> Vec<u64> {
        let mut v: Vec<u64> = self.cells.iter().map(|c| c.k_infer).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn get(&self, k_train: u64, k_infer: u64) -> Option<&QaEvalResult> {
        self.cells.iter().find(|c| c.k_train == k_train && c.k_infer == k_infer)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}
