#![allow(dead_code)]

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use skim::harness::{synth_documents, write_text_corpus, RunConfig, SynthConfig};

/// Writes one result line straight to stderr so it shows without `--nocapture`.
pub fn report(id: &str, name: &str, pass: bool, elapsed: Duration, detail: &str) {
    let line = format!(
        "criterion {id:>2} {}: {name} ({:.1}s) {detail}\n",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
}

pub fn synth_corpus(dir: &Path, docs: usize, seed: u64) -> PathBuf {
    let path = dir.join("corpus.jsonl");
    let cfg = SynthConfig {
        docs,
        ..SynthConfig::default()
    };
    write_text_corpus(&path, &synth_documents(&cfg, seed)).unwrap();
    path
}

/// Small, fast run over a synthetic corpus.
pub fn tiny_run(corpus: &Path, out: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.apply_overrides(&[
        "model.n_layers=1",
        "model.d_model=16",
        "model.n_heads=2",
        "model.d_ff=32",
        "model.max_window=32",
        "skip.window=32",
        "skip.k=16",
        "batch_size=3",
        "steps=12",
        "optim.lr=3e-3",
        "optim.warmup=5",
    ])
    .unwrap();
    cfg.corpus.path = corpus.to_path_buf();
    cfg.out_dir = out.to_path_buf();
    cfg
}
