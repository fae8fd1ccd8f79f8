//! Experiment drivers: training loops, skipping-disabled evaluation, the
//! synthetic corpora and the QA grid.

pub mod config;
pub mod eval;
pub mod qa;
pub mod read;
pub mod synth;
pub mod train;

pub use config::{CorpusFormat, ExecMode, Mode, QaConfig, RunConfig, SynthConfig};
pub use eval::{eval_ppl, EvalResult};
pub use qa::{generate_qa, load_qa, qa_eval, read_qa, summarize, write_qa, Grid, QaEvalResult, QaExample, QaOutcome, QaRecord};
pub use read::{read_item, ReadItem, Reading};
pub use synth::{synth_documents, write_text_corpus, TextSource};
pub use train::{finetune, pretrain, pretrain_short, read_metrics, train, Items, MetricsRecord, TrainReport};
