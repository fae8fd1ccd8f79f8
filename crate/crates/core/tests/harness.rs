mod common;

use skim::corpus::ingest;
use skim::dataserver::{average_skips, SkipConfig};
use skim::harness::{
    eval_ppl, finetune, generate_qa, pretrain, pretrain_short, qa_eval, ExecMode, Mode, QaConfig, QaExample,
    SynthConfig,
};
use skim::memory::MemoryConfig;
use skim::model::load;
use skim::par::Execution;

use common::{synth_corpus, tiny_run};

fn bits(p: &skim::model::Params<f32>) -> Vec<u32> {
    p.data.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn sequential_training_never_skips() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth_corpus(dir.path(), 4, 31);
    let mut cfg = tiny_run(&corpus, &dir.path().join("run"));
    cfg.skip.k = 0;
    let r = pretrain(&cfg).unwrap();
    assert_eq!(r.avg_skip, 0.0);
    assert!(r.metrics.iter().all(|m| m.avg_skip == 0.0));
    assert!(r.traces.iter().all(|t| t.tokens_skipped() == 0));
}

#[test]
fn reported_skip_matches_traces() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth_corpus(dir.path(), 4, 32);
    let mut cfg = tiny_run(&corpus, &dir.path().join("run"));
    cfg.skip.alpha = 40.0;
    let r = pretrain(&cfg).unwrap();
    assert_eq!(r.avg_skip, average_skips(&r.traces).unwrap());
    assert!(r.avg_skip > 0.0);
    let last = r.metrics.last().unwrap();
    let read: usize = r.traces.iter().map(|t| t.tokens_read()).sum();
    assert!(last.tokens_read as usize >= read);
}

#[test]
fn zero_learning_rate_finetune_keeps_weights() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth_corpus(dir.path(), 4, 33);
    let base = pretrain(&tiny_run(&corpus, &dir.path().join("base"))).unwrap();
    let mut cfg = tiny_run(&corpus, &dir.path().join("ft"));
    cfg.mode = Mode::Finetune;
    cfg.optim.lr = 0.0;
    cfg.init_checkpoint = Some(base.checkpoint.clone());
    let ft = finetune(&cfg).unwrap();
    assert_eq!(bits(&ft.params), bits(&base.params));
}

#[test]
fn finetune_rejects_other_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth_corpus(dir.path(), 4, 34);
    let base = pretrain(&tiny_run(&corpus, &dir.path().join("base"))).unwrap();
    let mut cfg = tiny_run(&corpus, &dir.path().join("ft"));
    cfg.mode = Mode::Finetune;
    cfg.model.d_model = 32;
    cfg.init_checkpoint = Some(base.checkpoint);
    assert!(matches!(finetune(&cfg), Err(skim::Error::CheckpointMismatch(_))));
}

#[test]
fn eval_leaves_model_untouched_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth_corpus(dir.path(), 4, 35);
    let r = pretrain(&tiny_run(&corpus, &dir.path().join("run"))).unwrap();
    let before = std::fs::read(&r.checkpoint).unwrap();
    let ck = load(&r.checkpoint).unwrap();
    let store = ingest(&corpus, 4000).unwrap();
    let a = eval_ppl(&ck.params, &ck.memory, &store, 32, Execution::Parallel).unwrap();
    let b = eval_ppl(&ck.params, &ck.memory, &store, 32, Execution::Sequential).unwrap();
    assert_eq!(a.ppl.to_bits(), b.ppl.to_bits());
    let per_doc = |n: usize| (0..n - 1).step_by(32).map(|off| (n - off).min(32) - 1).sum::<usize>();
    assert_eq!(a.predicted, store.documents().iter().map(|d| per_doc(d.len())).sum::<usize>());
    assert_eq!(before, std::fs::read(&r.checkpoint).unwrap());
}

#[test]
fn training_is_deterministic_across_execution_modes() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth_corpus(dir.path(), 5, 36);
    let mut cfg = tiny_run(&corpus, &dir.path().join("par"));
    cfg.exec = ExecMode::Parallel;
    let a = pretrain(&cfg).unwrap();
    cfg.exec = ExecMode::Sequential;
    cfg.out_dir = dir.path().join("seq");
    let b = pretrain(&cfg).unwrap();
    let strip = |r: &skim::harness::TrainReport| r.metrics.iter().map(|m| m.without_timing()).collect::<Vec<_>>();
    assert_eq!(strip(&a), strip(&b));
    assert_eq!(bits(&a.params), bits(&b.params));
    assert_eq!(a.traces, b.traces);
}

#[test]
fn short_pretraining_learns() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth_corpus(dir.path(), 4, 37);
    let mut cfg = tiny_run(&corpus, &dir.path().join("short"));
    cfg.mode = Mode::PretrainShort;
    cfg.steps = 60;
    let r = pretrain_short(&cfg).unwrap();
    assert_eq!(r.metrics.len(), 60);
    assert!(r.metrics.last().unwrap().mean_loss < r.metrics[0].mean_loss);
    assert!(r.traces.is_empty());
}

#[test]
fn sequential_qa_reads_every_evidence_window() {
    let qa = QaConfig {
        examples: 6,
        ..QaConfig::default()
    };
    let examples: Vec<QaExample> = generate_qa(&qa, &SynthConfig::default(), 38).iter().map(QaExample::from).collect();
    let params = skim::model::Params::<f32>::init(skim::model::ModelConfig {
        max_window: 96,
        ..skim::model::ModelConfig::tiny()
    })
    .unwrap();
    let skip = SkipConfig::sequential(96);
    let outcomes = qa_eval(&params, &MemoryConfig::default(), &examples, &skip, 4, Execution::Parallel).unwrap();
    for (e, o) in examples.iter().zip(&outcomes) {
        let body_window = 96 - e.prefix.len();
        assert_eq!(o.windows_read, (e.evidence.len() - 1).div_ceil(body_window));
        assert_eq!(o.tokens_skipped, 0);
        assert!(e.answer_in_evidence());
    }
}

#[test]
fn checkpoints_record_training_skip_rate() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth_corpus(dir.path(), 3, 39);
    let mut cfg = tiny_run(&corpus, &dir.path().join("run"));
    cfg.checkpoint_every = 5;
    let r = pretrain(&cfg).unwrap();
    let ck = load(&r.checkpoint).unwrap();
    assert_eq!(ck.train_k, 16);
    assert_eq!(bits(&ck.params), bits(&r.params));
    assert!(dir.path().join("run").join("ckpt-000005.skim").exists());
    assert!(dir.path().join("run").join("ckpt-000010.skim").exists());
}
