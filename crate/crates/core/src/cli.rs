//! Command-line front end. Each invocation resolves one [`RunConfig`], writes
//! it to `<out_dir>/config.resolved`, then runs a single harness job.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::corpus::ingest;
use crate::dataserver::SkipConfig;
use crate::error::{Error, Result};
use crate::harness::config::SEED_ENV;
use crate::harness::qa::{GRID_FILE, QA_EVAL_FILE};
use crate::harness::{
    eval_ppl, generate_qa, load_qa, qa_eval, read_item, read_metrics, summarize, synth_documents, train,
    write_qa, write_text_corpus, Grid, Mode, ReadItem, RunConfig,
};
use crate::model;
use crate::plot::{self, Run};

#[derive(Debug, Parser)]
#[command(name = "skim", version, about = "Loss-guided skipping reader for long documents")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory for every output of the run.
    #[arg(long = "out_dir", visible_alias = "out-dir")]
    pub out_dir: Option<PathBuf>,
    /// `key=value` overrides, applied last.
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from scratch with loss-guided skipping.
    Pretrain(Common),
    /// Train from scratch on shuffled fixed-length chunks.
    PretrainShort(Common),
    /// Continue training `init_checkpoint` with skipping.
    Finetune(Common),
    /// Perplexity of `init_checkpoint` with skipping disabled.
    Eval(Common),
    /// Write a synthetic QA set to `<out_dir>/qa.jsonl`.
    QaGen(Common),
    /// Read a QA set with skip rate `skip.k` and record accuracy in the grid file.
    QaEval(Common),
    /// Print the traversal trace of one document.
    Traverse {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        doc: usize,
        #[arg(long)]
        k: Option<u64>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Render metrics and grid files as SVG charts with CSVs.
    Plot {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        metrics: Vec<PathBuf>,
        #[arg(long)]
        grid: Option<PathBuf>,
    },
    /// Write a synthetic long-document corpus to `<out_dir>/corpus.jsonl`.
    GenCorpus(Common),
}

impl Command {
    pub fn mode(&self) -> Mode {
        match self {
            Command::Pretrain(_) => Mode::Pretrain,
            Command::PretrainShort(_) => Mode::PretrainShort,
            Command::Finetune(_) => Mode::Finetune,
            Command::Eval(_) => Mode::Eval,
            Command::QaGen(_) => Mode::QaGen,
            Command::QaEval(_) => Mode::QaEval,
            Command::Traverse { .. } => Mode::Traverse,
            Command::Plot { .. } => Mode::Plot,
            Command::GenCorpus(_) => Mode::GenCorpus,
        }
    }

    pub fn common(&self) -> &Common {
        match self {
            Command::Pretrain(c)
            | Command::PretrainShort(c)
            | Command::Finetune(c)
            | Command::Eval(c)
            | Command::QaGen(c)
            | Command::QaEval(c)
            | Command::GenCorpus(c) => c,
            Command::Traverse { common, .. } | Command::Plot { common, .. } => common,
        }
    }
}

/// Effective config: defaults < file < `seed_env` < overrides < flags.
pub fn resolve(cmd: &Command, seed_env: Option<&str>) -> Result<RunConfig> {
    let common = cmd.common();
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    cfg.apply_seed_env(seed_env)?;
    cfg.apply_overrides(&common.overrides)?;
    cfg.mode = cmd.mode();
    if let Some(dir) = &common.out_dir {
        cfg.out_dir.clone_from(dir);
    }
    if let Command::Traverse { k, alpha, ckpt, .. } = cmd {
        if let Some(k) = k {
            cfg.skip.k = *k;
        }
        if let Some(a) = alpha {
            cfg.skip.alpha = *a;
        }
        if let Some(p) = ckpt {
            cfg.init_checkpoint = Some(p.clone());
        }
    }
    Ok(cfg)
}

/// Resolves, records and runs one command. Human-readable results go to `out`.
pub fn run(cli: &Cli, seed_env: Option<&str>, out: &mut dyn Write) -> Result<()> {
    let cfg = resolve(&cli.command, seed_env)?;
    cfg.validate()?;
    cfg.write_resolved(&cfg.out_dir)?;
    execute(&cli.command, &cfg, out)
}

fn emit(out: &mut dyn Write, value: serde_json::Value) -> Result<()> {
    writeln!(out, "{value}").map_err(|e| Error::io("<stdout>", e))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn checkpoint_window(cfg: &RunConfig, ck: &model::Checkpoint) -> Result<SkipConfig> {
    if cfg.skip.window > ck.config().max_window {
        return Err(Error::CheckpointMismatch(format!(
            "skip.window {} exceeds the checkpoint's max_window {}",
            cfg.skip.window,
            ck.config().max_window
        )));
    }
    Ok(cfg.skip)
}

fn checkpoint_path(cfg: &RunConfig) -> Result<&Path> {
    cfg.init_checkpoint
        .as_deref()
        .ok_or_else(|| Error::Config(format!("mode {} requires init_checkpoint", cfg.mode)))
}

fn execute(cmd: &Command, cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let exec = cfg.execution();
    match cmd {
        Command::Pretrain(_) | Command::PretrainShort(_) | Command::Finetune(_) => {
            let report = train(cfg)?;
            let last = report.metrics.last();
            emit(
                out,
                json!({
                    "mode": cfg.mode.to_string(),
                    "steps": report.metrics.len(),
                    "final_loss": last.map(|m| m.mean_loss),
                    "avg_skip": report.avg_skip,
                    "checkpoint": report.checkpoint,
                }),
            )
        }
        Command::Eval(_) => {
            let ck = model::load(checkpoint_path(cfg)?)?;
            let skip = checkpoint_window(cfg, &ck)?;
            let store = ingest(&cfg.corpus.path, cfg.corpus.min_tokens)?;
            let r = eval_ppl(&ck.params, &ck.memory, &store, skip.window, exec)?;
            write_json(&cfg.out_dir.join("eval.json"), &r)?;
            emit(out, serde_json::to_value(r)?)
        }
        Command::QaGen(_) => {
            let recs = generate_qa(&cfg.qa, &cfg.synth, cfg.seed);
            let path = cfg.out_dir.join("qa.jsonl");
            write_qa(&path, &recs)?;
            let bytes: usize = recs.iter().flat_map(|r| r.evidence.iter().map(String::len)).sum();
            emit(
                out,
                json!({
                    "examples": recs.len(),
                    "mean_evidence_bytes": bytes as f64 / recs.len().max(1) as f64,
                    "path": path,
                }),
            )
        }
        Command::QaEval(_) => {
            let ck = model::load(checkpoint_path(cfg)?)?;
            let skip = checkpoint_window(cfg, &ck)?;
            let examples = load_qa(&cfg.corpus.path)?;
            let outcomes = qa_eval(&ck.params, &ck.memory, &examples, &skip, cfg.qa.max_answer_tokens, exec)?;
            let path = cfg.out_dir.join(QA_EVAL_FILE);
            let mut lines = String::new();
            for o in &outcomes {
                lines.push_str(&serde_json::to_string(o)?);
                lines.push('\n');
            }
            fs::write(&path, lines).map_err(|e| Error::io(&path, e))?;
            let cell = summarize(ck.train_k, skip.k, &outcomes);
            let grid_path = cfg.out_dir.join(GRID_FILE);
            let mut grid = Grid::load_or_default(&grid_path)?;
            grid.upsert(cell.clone());
            grid.save(&grid_path)?;
            emit(out, serde_json::to_value(cell)?)
        }
        Command::Traverse { doc, .. } => {
            let ck = model::load(checkpoint_path(cfg)?)?;
            let skip = checkpoint_window(cfg, &ck)?;
            let store = ingest(&cfg.corpus.path, cfg.corpus.min_tokens)?;
            let d = store.document(*doc)?;
            let r = read_item(&ck.params, &ck.memory, &ReadItem::text(d.id, &d.tokens), &skip)?;
            let mut buf = Vec::new();
            r.trace.write_jsonl(&mut buf).map_err(|e| Error::io("<trace>", e))?;
            let path = cfg.out_dir.join("trace.jsonl");
            fs::write(&path, &buf).map_err(|e| Error::io(&path, e))?;
            out.write_all(&buf).map_err(|e| Error::io("<stdout>", e))
        }
        Command::Plot { metrics, grid, .. } => {
            if metrics.is_empty() && grid.is_none() {
                return Err(Error::EmptyInput("plot needs --metrics or --grid".into()));
            }
            let mut files = Vec::new();
            if !metrics.is_empty() {
                let runs = metrics
                    .iter()
                    .enumerate()
                    .map(|(i, p)| {
                        Ok(Run {
                            label: run_label(p, i),
                            records: read_metrics(p)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                files.extend(plot::plot_metrics(&runs, &cfg.out_dir)?);
            }
            if let Some(g) = grid {
                let text = fs::read_to_string(g).map_err(|e| Error::io(g, e))?;
                let grid: Grid = serde_json::from_str(&text)?;
                files.extend(plot::plot_grid(&grid, &cfg.out_dir)?);
            }
            emit(out, json!({ "files": files }))
        }
        Command::GenCorpus(_) => {
            let docs = synth_documents(&cfg.synth, cfg.seed);
            let path = cfg.out_dir.join("corpus.jsonl");
            write_text_corpus(&path, &docs)?;
            emit(out, json!({ "documents": docs.len(), "path": path }))
        }
    }
}

/// Legend label: the metrics file's directory name, else its position.
fn run_label(path: &Path, index: usize) -> String {
    path.parent()
        .and_then(Path::file_name)
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| format!("run{index}"))
}

/// One-line JSON error report.
pub fn error_line(e: &Error) -> String {
    json!({ "error": e.kind(), "message": e.to_string() }).to_string()
}

/// Entry point used by the binary. Returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let seed = std::env::var(SEED_ENV).ok();
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match run(&cli, seed.as_deref(), &mut lock) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            1
        }
    }
}
