//! Training loops: skipping pretraining and finetuning over document cursors,
//! and the short-text baseline over shuffled fixed-length chunks.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{shuffled_short_chunks, CorpusStore, TokenChunk, TokenId};
use crate::dataserver::{advance, average_skips, Advance, ReadState, SkipConfig, TraversalTrace};
use crate::error::{Error, Result};
use crate::memory::{MemoryConfig, MemoryPool};
use crate::model::{self, train_step, AdamState, Checkpoint, Example, Params};

use super::config::{CorpusFormat, Mode, RunConfig};
use super::qa::{load_qa, QaExample};
use super::read::{answer_context, answer_window, kv_from, new_memory, ReadItem};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TRACES_FILE: &str = "traces.jsonl";
pub const MODEL_FILE: &str = "model.skim";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    /// Mean loss of the step's batch, in nats.
    pub mean_loss: f64,
    /// Mean skip distance of the traversal steps taken this step.
    pub avg_skip: f64,
    /// Body tokens fed to the model so far.
    pub tokens_read: u64,
    /// Documents whose traversal has finished so far.
    pub docs_completed: u64,
    pub wall_ms: u64,
}

impl MetricsRecord {
    /// Same record with the timing field cleared, for run-to-run comparison.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_ms: 0,
            ..self.clone()
        }
    }
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
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

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub metrics: Vec<MetricsRecord>,
    /// Every traversal touched by the run, finished or not, in the order they ended.
    pub traces: Vec<TraversalTrace>,
    pub params: Params<f32>,
    /// Mean skip over all traces of the run.
    pub avg_skip: f64,
    pub checkpoint: PathBuf,
}

struct Sink {
    metrics: BufWriter<File>,
    path: PathBuf,
}

impl Sink {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(METRICS_FILE);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            metrics: BufWriter::new(file),
            path,
        })
    }

    fn push(&mut self, rec: &MetricsRecord) -> Result<()> {
        serde_json::to_writer(&mut self.metrics, rec)?;
        self.metrics.write_all(b"\n").map_err(|e| Error::io(&self.path, e))?;
        self.metrics.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn save_checkpoint(cfg: &RunConfig, params: &Params<f32>, step: u64, name: &str) -> Result<PathBuf> {
    let path = cfg.out_dir.join(name);
    model::save(&Checkpoint::new(params.clone(), cfg.memory, cfg.skip.k, step), &path)?;
    Ok(path)
}

/// Loads the training items named by the config.
pub enum Items {
    Text(CorpusStore),
    Qa(Vec<QaExample>),
}

impl Items {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        match cfg.corpus.format {
            CorpusFormat::Text => Ok(Items::Text(crate::corpus::ingest(&cfg.corpus.path, cfg.corpus.min_tokens)?)),
            CorpusFormat::Qa => {
                let qa = load_qa(&cfg.corpus.path)?;
                if qa.is_empty() {
                    return Err(Error::EmptyInput(cfg.corpus.path.display().to_string()));
                }
                Ok(Items::Qa(qa))
            }
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Items::Text(s) => s.len(),
            Items::Qa(q) => q.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn item(&self, id: usize) -> ReadItem<'_> {
        match self {
            Items::Text(s) => ReadItem::text(id, &s.documents()[id].tokens),
            Items::Qa(q) => q[id].item(id),
        }
    }

    pub fn order(&self, seed: u64) -> Vec<usize> {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut ids: Vec<usize> = (0..self.len()).collect();
        ids.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        ids
    }
}

/// Deals item ids in seeded order, reshuffling with a fresh seed on each pass.
struct Dealer {
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    next: usize,
}

impl Dealer {
    fn new(items: &Items, seed: u64) -> Self {
        Self {
            seed,
            epoch: 0,
            order: items.order(seed),
            next: 0,
        }
    }

    fn deal(&mut self, items: &Items) -> usize {
        if self.next == self.order.len() {
            self.epoch += 1;
            self.order = items.order(self.seed.wrapping_add(self.epoch));
            self.next = 0;
        }
        self.next += 1;
        self.order[self.next - 1]
    }
}

struct Cursor {
    item: usize,
    cfg: SkipConfig,
    state: ReadState,
    trace: TraversalTrace,
    memory: Option<MemoryPool<f32>>,
    last_chunk: Vec<TokenId>,
    answering: bool,
}

impl Cursor {
    fn start(items: &Items, id: usize, skip: &SkipConfig, params: &Params<f32>, mem: &MemoryConfig) -> Result<Self> {
        let it = items.item(id);
        let cfg = it.body_config(skip)?;
        let state = ReadState::new(id, it.body.len());
        if state.finished {
            return Err(Error::Config(format!("item {id} has fewer than two body tokens")));
        }
        Ok(Self {
            item: id,
            cfg,
            state,
            trace: TraversalTrace::new(id, it.body.len()),
            memory: new_memory(&params.config, mem),
            last_chunk: Vec::new(),
            answering: false,
        })
    }
}

/// Skipping training over `batch_size` lockstep document cursors. The model
/// being trained supplies the losses that drive each cursor's skips.
pub fn train_skipping(cfg: &RunConfig, mut params: Params<f32>, items: &Items) -> Result<TrainReport> {
    if items.is_empty() {
        return Err(Error::EmptyInput("training items".into()));
    }
    let exec = cfg.execution();
    let mut sink = Sink::create(&cfg.out_dir)?;
    let mut opt = AdamState::new(params.data.len());
    let mut dealer = Dealer::new(items, cfg.seed);
    let d_head = params.config.d_head();
    let max_answer = cfg.qa.max_answer_tokens;
    let mut cursors = (0..cfg.batch_size)
        .map(|_| Cursor::start(items, dealer.deal(items), &cfg.skip, &params, &cfg.memory))
        .collect::<Result<Vec<_>>>()?;
    let mut traces = Vec::new();
    let mut metrics = Vec::new();
    let (mut tokens_read, mut docs_completed) = (0u64, 0u64);
    let start = Instant::now();

    for step in 1..=cfg.steps {
        let mut windows = Vec::with_capacity(cursors.len());
        for c in &cursors {
            let it = items.item(c.item);
            if c.answering {
                let ctx = if c.memory.is_some() {
                    &[][..]
                } else {
                    answer_context(cfg.skip.window, it.prefix.len(), max_answer, &c.last_chunk)
                };
                let answer = it.answer.expect("answering implies an answer");
                windows.push(answer_window(it.prefix, ctx, &answer[..answer.len().min(max_answer)]));
            } else {
                let chunk = c.state.chunk(it.body, &c.cfg)?;
                windows.push((it.window(&chunk.tokens), it.loss_from()));
            }
        }
        let batch: Vec<Example<'_>> = windows
            .iter()
            .zip(&cursors)
            .map(|((tokens, from), c)| Example {
                tokens,
                loss_from: *from,
                memory: c.memory.as_ref(),
                doc_id: c.item,
            })
            .collect();
        let out = train_step(&mut params, &mut opt, &cfg.optim, &batch, exec)?;
        drop(batch);

        let (mut skip_sum, mut skip_steps) = (0u64, 0usize);
        for (i, ex) in out.examples.into_iter().enumerate() {
            let c = &mut cursors[i];
            let it = items.item(c.item);
            let mut done = c.answering;
            if !c.answering {
                let from = it.loss_from();
                let losses: Vec<f64> = ex.token_losses[from - 1..].iter().map(|&l| l as f64).collect();
                let chunk_len = windows[i].0.len() - it.prefix.len();
                c.last_chunk = windows[i].0[it.prefix.len()..].to_vec();
                let (adv, ts) = advance(&mut c.state, &losses, &c.cfg)?;
                c.trace.push(ts, &c.state);
                tokens_read += chunk_len as u64;
                skip_sum += ts.distance;
                skip_steps += 1;
                if let Some(pool) = c.memory.as_mut() {
                    pool.absorb(&kv_from(ex.kv, it.prefix.len(), d_head))?;
                }
                if adv == Advance::End {
                    docs_completed += 1;
                    if it.answer.is_some() {
                        c.answering = true;
                    } else {
                        done = true;
                    }
                }
            }
            if done {
                let next = Cursor::start(items, dealer.deal(items), &cfg.skip, &params, &cfg.memory)?;
                let old = std::mem::replace(c, next);
                traces.push(old.trace);
            }
        }

        let rec = MetricsRecord {
            step,
            mean_loss: out.mean_loss,
            avg_skip: if skip_steps == 0 { 0.0 } else { skip_sum as f64 / skip_steps as f64 },
            tokens_read,
            docs_completed,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        sink.push(&rec)?;
        metrics.push(rec);
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < cfg.steps {
            save_checkpoint(cfg, &params, step, &format!("ckpt-{step:06}.skim"))?;
        }
    }

    traces.extend(cursors.into_iter().map(|c| c.trace));
    write_traces(&cfg.out_dir.join(TRACES_FILE), &traces)?;
    let checkpoint = save_checkpoint(cfg, &params, cfg.steps, MODEL_FILE)?;
    Ok(TrainReport {
        metrics,
        avg_skip: average_skips(&traces)?,
        traces,
        params,
        checkpoint,
    })
}

fn write_traces(path: &Path, traces: &[TraversalTrace]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in traces {
        t.write_jsonl(&mut w).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Short-text baseline: batches of shuffled fixed-length chunks, no skipping.
pub fn train_short(cfg: &RunConfig, mut params: Params<f32>, store: &CorpusStore) -> Result<TrainReport> {
    let exec = cfg.execution();
    let len = cfg.skip.window;
    let mut sink = Sink::create(&cfg.out_dir)?;
    let mut opt = AdamState::new(params.data.len());
    let mut epoch = 0u64;
    let mut stream = shuffled_short_chunks(store, len, cfg.seed)?;
    if stream.len() == 0 {
        return Err(Error::EmptyInput(format!("corpus yields no {len}-token chunks")));
    }
    let mut metrics = Vec::new();
    let mut tokens_read = 0u64;
    let start = Instant::now();
    for step in 1..=cfg.steps {
        let mut chunks: Vec<TokenChunk> = Vec::with_capacity(cfg.batch_size);
        while chunks.len() < cfg.batch_size {
            match stream.next() {
                Some(c) => chunks.push(c),
                None => {
                    epoch += 1;
                    stream = shuffled_short_chunks(store, len, cfg.seed.wrapping_add(epoch))?;
                }
            }
        }
        let batch: Vec<Example<'_>> = chunks
            .iter()
            .map(|c| Example {
                doc_id: c.doc_id,
                ..Example::new(&c.tokens)
            })
            .collect();
        let out = train_step(&mut params, &mut opt, &cfg.optim, &batch, exec)?;
        tokens_read += chunks.iter().map(|c| c.len() as u64).sum::<u64>();
        let rec = MetricsRecord {
            step,
            mean_loss: out.mean_loss,
            avg_skip: 0.0,
            tokens_read,
            docs_completed: 0,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        sink.push(&rec)?;
        metrics.push(rec);
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < cfg.steps {
            save_checkpoint(cfg, &params, step, &format!("ckpt-{step:06}.skim"))?;
        }
    }
    let checkpoint = save_checkpoint(cfg, &params, cfg.steps, MODEL_FILE)?;
    Ok(TrainReport {
        metrics,
        traces: Vec::new(),
        avg_skip: 0.0,
        params,
        checkpoint,
    })
}

pub fn pretrain(cfg: &RunConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let params = Params::init(cfg.model_config())?;
    train_skipping(cfg, params, &Items::load(cfg)?)
}

pub fn pretrain_short(cfg: &RunConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if cfg.corpus.format != CorpusFormat::Text {
        return Err(Error::Config("pretrain_short needs a text corpus".into()));
    }
    let store = crate::corpus::ingest(&cfg.corpus.path, cfg.corpus.min_tokens)?;
    train_short(cfg, Params::init(cfg.model_config())?, &store)
}

/// Loads `init_checkpoint` and checks it against the configured model.
pub fn load_matching(cfg: &RunConfig) -> Result<Checkpoint> {
    let path = cfg
        .init_checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config(format!("mode {} requires init_checkpoint", cfg.mode)))?;
    let ck = model::load(path)?;
    let want = cfg.model_config();
    let got = ck.params.config;
    if (got.n_layers, got.d_model, got.n_heads, got.d_ff, got.vocab_size, got.max_window)
        != (want.n_layers, want.d_model, want.n_heads, want.d_ff, want.vocab_size, want.max_window)
    {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint model {got:?} does not match configured model {want:?}"
        )));
    }
    Ok(ck)
}

pub fn finetune(cfg: &RunConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let ck = load_matching(cfg)?;
    train_skipping(cfg, ck.params, &Items::load(cfg)?)
}

/// Runs whichever training mode the config names.
pub fn train(cfg: &RunConfig) -> Result<TrainReport> {
    match cfg.mode {
        Mode::Pretrain => pretrain(cfg),
        Mode::PretrainShort => pretrain_short(cfg),
        Mode::Finetune => finetune(cfg),
        other => Err(Error::Config(format!("{other} is not a training mode"))),
    }
}
