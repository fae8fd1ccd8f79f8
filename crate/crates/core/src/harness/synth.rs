//! Seeded synthetic text: a small pool of sentence templates mixed with spans
//! of random letters, so that some stretches of a document are easy to
//! predict and others are not.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::config::SynthConfig;

const ADJ: &[&str] = &[
    "quiet", "red", "old", "bright", "small", "heavy", "green", "distant", "narrow", "warm", "cold", "silver",
];
const NOUN: &[&str] = &[
    "river", "lamp", "garden", "tower", "engine", "forest", "window", "bridge", "market", "harbor", "letter", "stone",
];
const VERB: &[&str] = &[
    "crosses", "watches", "follows", "carries", "opens", "paints", "guards", "finds", "leaves", "builds",
];
const PLACE: &[&str] = &["city", "valley", "station", "coast", "village", "mill", "library", "square"];

/// Sentence source shared by the corpus and QA generators.
pub struct TextSource {
    templates: Vec<String>,
    rng: ChaCha8Rng,
    noise_frac: f64,
    noise_min: usize,
    noise_max: usize,
}

impl TextSource {
    pub fn new(cfg: &SynthConfig, seed: u64) -> Self {
        // the template pool depends only on the seed, not on later draws
        let mut pool_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e3a_11c5_9b2d_4f60);
        let templates = (0..cfg.templates.max(1)).map(|_| sentence(&mut pool_rng)).collect();
        Self {
            templates,
            rng: ChaCha8Rng::seed_from_u64(seed),
            noise_frac: cfg.noise_frac,
            noise_min: cfg.noise_min.max(1),
            noise_max: cfg.noise_max.max(cfg.noise_min.max(1)),
        }
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Next span: a template sentence or a run of random letters, followed by a space.
    pub fn span(&mut self) -> String {
        let mut s = if self.rng.gen_bool(self.noise_frac) {
            let n = self.rng.gen_range(self.noise_min..=self.noise_max);
            random_letters(&mut self.rng, n)
        } else {
            self.templates.choose(&mut self.rng).expect("non-empty pool").clone()
        };
        s.push(' ');
        s
    }

    /// Text of exactly `len` bytes (ASCII).
    pub fn text(&mut self, len: usize) -> String {
        let mut out = String::with_capacity(len + 64);
        while out.len() < len {
            out.push_str(&self.span());
        }
        out.truncate(len);
        out
    }
}

fn sentence(rng: &mut impl Rng) -> String {
    let pick = |rng: &mut dyn rand::RngCore, xs: &[&'static str]| *xs.choose(rng).expect("non-empty");
    format!(
        "the {} {} {} the {} {} near the {}.",
        pick(rng, ADJ),
        pick(rng, NOUN),
        pick(rng, VERB),
        pick(rng, ADJ),
        pick(rng, NOUN),
        pick(rng, PLACE)
    )
}

pub(crate) fn random_letters(rng: &mut impl Rng, n: usize) -> String {
    (0..n).map(|_| rng.gen_range(b'a'..=b'z') as char).collect()
}

/// Documents with byte lengths drawn uniformly from `[min_bytes, max_bytes]`.
pub fn synth_documents(cfg: &SynthConfig, seed: u64) -> Vec<String> {
    let mut src = TextSource::new(cfg, seed);
    (0..cfg.docs)
        .map(|_| {
            let len = src.rng().gen_range(cfg.min_bytes..=cfg.max_bytes);
            src.text(len)
        })
        .collect()
}

/// Writes `{"text": ...}` lines.
pub fn write_text_corpus(path: impl AsRef<Path>, docs: &[String]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for d in docs {
        serde_json::to_writer(&mut w, &serde_json::json!({ "text": d }))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
