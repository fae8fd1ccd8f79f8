//! Acceptance suite. Each test prints one PASS/FAIL line per criterion to
//! stderr and then asserts it.

mod common;

use std::collections::{HashSet, VecDeque};
use std::convert::Infallible;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use skim::corpus::{detokenize, tokenize, CorpusStore, TokenChunk, TokenId};
use skim::dataserver::{average_skips, skip_distance, traverse_tokens, SkipConfig, DEFAULT_C_MIN};
use skim::harness::{
    eval_ppl, generate_qa, pretrain, qa_eval, summarize, train, write_qa, Grid, Mode, QaConfig, QaExample,
    RunConfig, SynthConfig,
};
use skim::memory::{attend_with_memory, MemoryConfig, MemoryPool};
use skim::model::{backward, forward, load, save, Checkpoint, ModelConfig, Params};
use skim::par::Execution;

use common::{report, synth_corpus};

fn check(id: &str, name: &str, pass: bool, start: Instant, limit: Duration, detail: String) {
    let elapsed = start.elapsed();
    let in_time = elapsed <= limit;
    let detail = if in_time {
        detail
    } else {
        format!("{detail}; over the {}s budget", limit.as_secs())
    };
    report(id, name, pass && in_time, elapsed, &detail);
    assert!(pass && in_time, "criterion {id} failed: {detail}");
}

/// Skip distance written out directly from the formula, in exact integer
/// arithmetic for the remaining-length cap.
fn skip_oracle(n: u64, s: u64, l: u64, k: u64, alpha: f64, c: f64, c_min: f64) -> u64 {
    if k == 0 {
        return 0;
    }
    let c = if c < c_min { c_min } else { c };
    let rem = (n as i128 - s as i128 - l as i128).div_euclid(k as i128).max(0) as u64;
    let conf = (alpha / c).floor();
    let conf = if conf < 0.0 { 0 } else if conf >= u64::MAX as f64 { u64::MAX } else { conf as u64 };
    k * rem.min(conf)
}

fn random_confidence(rng: &mut ChaCha8Rng) -> f64 {
    match rng.gen_range(0..10) {
        0 => DEFAULT_C_MIN,
        1 => rng.gen_range(0.0..DEFAULT_C_MIN),
        _ => 10f64.powf(rng.gen_range(-4.0..1.5)),
    }
}

#[test]
fn c01_skip_formula_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut mismatches, mut k0, mut cmin, mut rem_binding) = (0, 0, 0, 0);
    for _ in 0..10_000 {
        let n = rng.gen_range(2..200_000u64);
        let s = rng.gen_range(0..n);
        let l = rng.gen_range(2..=1024u64);
        let k = if rng.gen_bool(0.1) { 0 } else { rng.gen_range(1..=n.min(5000)) };
        let alpha = rng.gen_range(0.01..100.0);
        let c = random_confidence(&mut rng);
        let cfg = SkipConfig {
            k,
            alpha,
            window: l as usize,
            ..SkipConfig::default()
        };
        let got = skip_distance(c, s as usize, n as usize, &cfg);
        let want = skip_oracle(n, s, l, k, alpha, c, cfg.c_min);
        if got.distance != want {
            mismatches += 1;
        }
        k0 += (k == 0) as usize;
        cmin += (c <= DEFAULT_C_MIN) as usize;
        rem_binding += (k > 0 && got.cap_remaining < got.cap_confidence) as usize;
    }
    check(
        "1",
        "skip distance matches the formula",
        mismatches == 0 && k0 > 0 && cmin > 0 && rem_binding > 0,
        start,
        Duration::from_secs(5),
        format!("10000 tuples, {mismatches} mismatches, K=0: {k0}, C<=c_min: {cmin}, remaining cap binding: {rem_binding}"),
    );
}

fn random_losses(rng: &mut ChaCha8Rng) -> impl FnMut(&TokenChunk) -> Result<Vec<f64>, Infallible> + '_ {
    move |c: &TokenChunk| Ok((1..c.len()).map(|_| rng.gen_range(0.0..8.0)).collect())
}

#[test]
fn c02_sequential_degeneration() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut failures = 0;
    for doc in 0..100 {
        let n = rng.gen_range(2..20_000usize);
        let l = rng.gen_range(2..=512usize);
        let tokens: Vec<TokenId> = (0..n).map(|_| rng.gen_range(0..256)).collect();
        let cfg = SkipConfig {
            k: 0,
            alpha: rng.gen_range(0.1..50.0),
            window: l,
            ..SkipConfig::default()
        };
        let mut seed_rng = ChaCha8Rng::seed_from_u64(doc);
        let trace = traverse_tokens(doc as usize, &tokens, &cfg, random_losses(&mut seed_rng)).unwrap();
        let want: Vec<usize> = (0..n - 1).step_by(l).collect();
        if trace.offsets() != want || average_skips(std::slice::from_ref(&trace)).unwrap() != 0.0 {
            failures += 1;
        }
    }
    check(
        "2",
        "K=0 reads consecutive windows",
        failures == 0,
        start,
        Duration::from_secs(5),
        format!("100 documents, {failures} mismatches"),
    );
}

#[test]
fn c03_monotonicity() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut violations = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(2..100_000usize);
        let s = rng.gen_range(0..n);
        let cfg = SkipConfig {
            k: rng.gen_range(0..2000),
            alpha: rng.gen_range(0.01..50.0),
            window: rng.gen_range(2..=1024),
            ..SkipConfig::default()
        };
        let (c1, c2) = {
            let (a, b) = (random_confidence(&mut rng), random_confidence(&mut rng));
            (a.min(b), a.max(b))
        };
        if skip_distance(c1, s, n, &cfg).distance < skip_distance(c2, s, n, &cfg).distance {
            violations += 1;
        }
        let c = random_confidence(&mut rng);
        let (a1, a2) = {
            let (a, b) = (rng.gen_range(0.01..50.0), rng.gen_range(0.01..50.0));
            (f64::min(a, b), f64::max(a, b))
        };
        let d1 = skip_distance(c, s, n, &SkipConfig { alpha: a1, ..cfg }).distance;
        let d2 = skip_distance(c, s, n, &SkipConfig { alpha: a2, ..cfg }).distance;
        if d1 > d2 {
            violations += 1;
        }
    }
    check(
        "3",
        "skip distance is monotone in confidence and threshold",
        violations == 0,
        start,
        Duration::from_secs(5),
        format!("1000 fixtures, {violations} violations"),
    );
}

#[test]
fn c04_termination_and_closed_form() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut too_long, mut wrong_skip, mut traces) = (0, 0, 0);
    for doc in 0..300usize {
        let n = rng.gen_range(2..30_000usize);
        let l = rng.gen_range(2..=512usize);
        let k = rng.gen_range(0..=1024u64);
        let tokens: Vec<TokenId> = vec![7; n];
        // random losses: only the step bound is checked
        let cfg = SkipConfig {
            k,
            alpha: 2.0,
            window: l,
            ..SkipConfig::default()
        };
        let mut r = ChaCha8Rng::seed_from_u64(doc as u64);
        let t = traverse_tokens(doc, &tokens, &cfg, random_losses(&mut r)).unwrap();
        too_long += (t.steps.len() > n.div_ceil(l)) as usize;
        traces += 1;

        // constant confidence C = alpha / m with m a power of two, so alpha / C = m exactly
        let m = 1u64 << rng.gen_range(0..5);
        let c = cfg.alpha / m as f64;
        let t = traverse_tokens(doc, &tokens, &cfg, |ch: &TokenChunk| -> Result<Vec<f64>, Infallible> {
            Ok(vec![c; ch.len() - 1])
        })
        .unwrap();
        traces += 1;
        too_long += (t.steps.len() > n.div_ceil(l)) as usize;
        let mut cursor = 0usize;
        let mut predicted = Vec::new();
        while n - cursor >= 2 {
            let rem = n.saturating_sub(cursor + l) as u64;
            let d = if k == 0 { 0 } else { k * (rem / k).min(m) };
            predicted.push((cursor, d));
            cursor += l.min(n - cursor) + d as usize;
        }
        let got: Vec<(usize, u64)> = t.steps.iter().map(|s| (s.offset, s.distance)).collect();
        wrong_skip += (got != predicted) as usize;
    }
    check(
        "4",
        "traversals terminate within ceil(n/L) steps; constant confidence gives the closed form",
        too_long == 0 && wrong_skip == 0,
        start,
        Duration::from_secs(5),
        format!("{traces} traversals, {too_long} over the step bound, {wrong_skip} closed-form mismatches"),
    );
}

/// Max over named parameter arrays of `|a - n| / (|a| + |n|)`, with `a` the
/// analytic and `n` the central-difference gradient. Memory retrieval takes
/// every stored entry so the loss is smooth in the query.
fn grad_check(memory: bool) -> (f64, String, usize) {
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        max_window: 8,
        seed: 5,
        ..ModelConfig::tiny()
    };
    let p = Params::<f64>::init(cfg).unwrap();
    let toks: Vec<TokenId> = vec![3, 141, 59, 26, 5, 35, 89, 79];
    let pool = memory.then(|| {
        let mut pool = cfg.new_memory::<f64>(16, 16);
        let (_, cache) = skim::model::forward_with_cache(&p, &[9, 8, 7, 6, 5, 4, 3, 2], None).unwrap();
        pool.absorb(&cache.window_kv()).unwrap();
        pool
    });
    let g = backward(&p, &toks, pool.as_ref()).unwrap();
    let eps = 1e-3;
    let mut q = p.clone();
    let mut numeric = vec![0f64; p.data.len()];
    for (i, n) in numeric.iter_mut().enumerate() {
        let x = p.data[i];
        q.data[i] = x + eps;
        let up = forward(&q, &toks, pool.as_ref()).unwrap().mean_loss;
        q.data[i] = x - eps;
        let down = forward(&q, &toks, pool.as_ref()).unwrap().mean_loss;
        q.data[i] = x;
        *n = (up - down) / (2.0 * eps);
    }
    let norm = |xs: &mut dyn Iterator<Item = f64>| xs.map(|x| x * x).sum::<f64>().sqrt();
    let mut worst = (0f64, String::new());
    for spec in &p.layout.specs {
        let r = spec.range();
        let diff = norm(&mut r.clone().map(|i| g.data[i] - numeric[i]));
        let scale = norm(&mut r.clone().map(|i| g.data[i])) + norm(&mut r.clone().map(|i| numeric[i]));
        let rel = if scale == 0.0 { 0.0 } else { diff / scale };
        if rel >= worst.0 {
            worst = (rel, spec.name.clone());
        }
    }
    (worst.0, worst.1, p.data.len())
}

#[test]
fn c05_gradient_check() {
    let start = Instant::now();
    let (off, off_name, n) = grad_check(false);
    let (on, on_name, _) = grad_check(true);
    check(
        "5",
        "analytic gradients match central differences",
        off <= 1e-4 && on <= 1e-4,
        start,
        Duration::from_secs(120),
        format!("{n} parameters, worst array relative error {off:.2e} at {off_name} (memory off), {on:.2e} at {on_name} (memory on)"),
    );
}

#[test]
fn c06_causality() {
    let start = Instant::now();
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 32,
        n_heads: 4,
        d_ff: 64,
        max_window: 32,
        seed: 6,
        ..ModelConfig::tiny()
    };
    let p = Params::<f32>::init(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut pool = cfg.new_memory::<f32>(64, 8);
    let warm: Vec<TokenId> = (0..32).map(|_| rng.gen_range(0..256)).collect();
    let (_, cache) = skim::model::forward_with_cache(&p, &warm, None).unwrap();
    pool.absorb(&cache.window_kv()).unwrap();
    let mut changed = 0;
    for trial in 0..100 {
        let n = rng.gen_range(2..=32);
        let toks: Vec<TokenId> = (0..n).map(|_| rng.gen_range(0..260)).collect();
        let pos = rng.gen_range(0..n);
        let mut alt = toks.clone();
        alt[pos] = (alt[pos] + rng.gen_range(1..260)) % 260;
        let mem = (trial % 2 == 1).then_some(&pool);
        let a = forward(&p, &toks, mem).unwrap().logits;
        let b = forward(&p, &alt, mem).unwrap().logits;
        let before = pos * 260;
        let same = a[..before].iter().zip(&b[..before]).all(|(x, y)| x.to_bits() == y.to_bits());
        changed += (!same) as usize;
    }
    check(
        "6",
        "logits before a perturbed token are unchanged",
        changed == 0,
        start,
        Duration::from_secs(10),
        format!("100 trials, {changed} with earlier logits changed"),
    );
}

#[test]
fn c07_uniform_perplexity() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let path = synth_corpus(dir.path(), 6, 7);
    let store = skim::corpus::ingest(&path, 4000).unwrap();
    let mut p = Params::<f32>::init(ModelConfig {
        n_layers: 2,
        d_model: 32,
        n_heads: 2,
        d_ff: 64,
        max_window: 64,
        ..ModelConfig::tiny()
    })
    .unwrap();
    p.zero_output_projection();
    let r = eval_ppl(&p, &MemoryConfig::default(), &store, 64, Execution::Parallel).unwrap();
    let rel = (r.ppl - 260.0).abs() / 260.0;
    check(
        "7",
        "zeroed output projection gives perplexity 260",
        rel <= 1e-3,
        start,
        Duration::from_secs(10),
        format!("ppl {:.6} over {} predictions, relative error {rel:.2e}", r.ppl, r.predicted),
    );
}

#[test]
fn c08_memory_oracles() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut topk_mismatch = 0;
    let mut with_ties = 0;
    for _ in 0..1000 {
        let d = rng.gen_range(1..=8);
        let cap = rng.gen_range(1..=64);
        let mut pool = MemoryPool::<f32>::new(1, 1, d, cap, 4);
        let inserts = rng.gen_range(1..=100);
        // small integer keys make equal scores common
        let keys: Vec<f32> = (0..inserts * d).map(|_| rng.gen_range(-2..=2) as f32).collect();
        let values: Vec<f32> = (0..inserts * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        pool.append(0, 0, &keys, &values).unwrap();
        let query: Vec<f32> = (0..d).map(|_| rng.gen_range(-2..=2) as f32).collect();
        let k = rng.gen_range(0..=cap + 2);
        let got: Vec<u64> = pool.retrieve_topk(0, 0, &query, k).unwrap().iter().map(|e| e.insert_seq).collect();
        let mut all: Vec<(f32, u64)> = pool
            .head(0, 0)
            .entries()
            .map(|e| (e.key.iter().zip(&query).map(|(a, b)| a * b).sum::<f32>(), e.insert_seq))
            .collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let distinct: HashSet<u32> = all.iter().map(|x| x.0.to_bits()).collect();
        with_ties += (distinct.len() < all.len()) as usize;
        let want: Vec<u64> = all.iter().take(k).map(|x| x.1).collect();
        topk_mismatch += (got != want) as usize;
    }

    let mut worst = 0f64;
    for _ in 0..200 {
        let d = rng.gen_range(1..=8);
        let n = rng.gen_range(1..=16);
        let m = rng.gen_range(0..=24);
        let mut pool = MemoryPool::<f32>::new(1, 1, d, 64, 64);
        let mk: Vec<f32> = (0..m * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mv: Vec<f32> = (0..m * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        pool.append(0, 0, &mk, &mv).unwrap();
        let q: Vec<f32> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k: Vec<f32> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f32> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let scale = 1.0 / (d as f32).sqrt();
        let kr = m + rng.gen_range(0..4);
        let out = attend_with_memory(&q, &k, &v, n, d, scale, Some((pool.head(0, 0), kr))).out;
        for t in 0..n {
            let qt = &q[t * d..(t + 1) * d];
            let mut keys: Vec<&[f32]> = (0..=t).map(|j| &k[j * d..(j + 1) * d]).collect();
            let mut vals: Vec<&[f32]> = (0..=t).map(|j| &v[j * d..(j + 1) * d]).collect();
            keys.extend(mk.chunks(d));
            vals.extend(mv.chunks(d));
            let scores: Vec<f64> = keys
                .iter()
                .map(|kk| kk.iter().zip(qt).map(|(a, b)| *a as f64 * *b as f64).sum::<f64>() * scale as f64)
                .collect();
            let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
            let w: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = w.iter().sum();
            for i in 0..d {
                let dense: f64 = w.iter().zip(&vals).map(|(wj, vj)| wj * vj[i] as f64).sum::<f64>() / z;
                worst = worst.max((dense - out[t * d + i] as f64).abs());
            }
        }
    }
    check(
        "8",
        "top-k retrieval matches a full sort; full retrieval matches dense attention",
        topk_mismatch == 0 && with_ties > 0 && worst <= 1e-5,
        start,
        Duration::from_secs(30),
        format!("1000 retrievals ({with_ties} with ties), {topk_mismatch} mismatches; attention max abs diff {worst:.2e}"),
    );
}

#[test]
fn c09_fifo_invariants() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut over, mut wrong) = (0, 0);
    let mut ops = 0;
    while ops < 10_000 {
        let d = rng.gen_range(1..=4);
        let cap = rng.gen_range(1..=50);
        let mut pool = MemoryPool::<f32>::new(2, 2, d, cap, 4);
        let mut model: VecDeque<u64> = VecDeque::new();
        let mut seq = 0u64;
        for _ in 0..rng.gen_range(1..500) {
            let (l, h) = (rng.gen_range(0..2), rng.gen_range(0..2));
            let batch = rng.gen_range(0..=2 * cap);
            let keys: Vec<f32> = (0..batch * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            pool.append(l, h, &keys, &keys).unwrap();
            ops += 1;
            if (l, h) == (1, 0) {
                for _ in 0..batch {
                    model.push_back(seq);
                    seq += 1;
                    if model.len() > cap {
                        model.pop_front();
                    }
                }
                let got: Vec<u64> = pool.head(1, 0).entries().map(|e| e.insert_seq).collect();
                wrong += (got != model.iter().copied().collect::<Vec<_>>()) as usize;
            }
            for (ll, hh) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                over += (pool.head(ll, hh).len() > cap) as usize;
            }
        }
    }
    check(
        "9",
        "memory never exceeds capacity and evicts oldest first",
        over == 0 && wrong == 0,
        start,
        Duration::from_secs(10),
        format!("{ops} append ops, {over} capacity violations, {wrong} order mismatches"),
    );
}

fn learn_config(corpus: &std::path::Path, out: &std::path::Path, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.apply_overrides(&[
        "model.n_layers=4",
        "model.d_model=32",
        "model.n_heads=4",
        "model.d_ff=128",
        "model.max_window=64",
        "skip.window=64",
        "skip.k=32",
        "skip.alpha=2.0",
        "batch_size=8",
        "steps=2000",
        "optim.lr=3e-3",
    ])
    .unwrap();
    cfg.seed = seed;
    cfg.model.seed = seed;
    cfg.corpus.path = corpus.to_path_buf();
    cfg.out_dir = out.to_path_buf();
    cfg
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn c10_c11_learnability_and_skip_trend() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth_corpus(dir.path(), 64, 10);
    let cfg = learn_config(&corpus, &dir.path().join("a"), 10);
    let a = pretrain(&cfg).unwrap();
    let b = pretrain(&RunConfig {
        out_dir: dir.path().join("b"),
        ..cfg.clone()
    })
    .unwrap();
    let at10 = a.metrics[9].mean_loss;
    let last = a.metrics.last().unwrap().mean_loss;
    let strip = |r: &skim::harness::TrainReport| r.metrics.iter().map(|m| m.without_timing()).collect::<Vec<_>>();
    let identical = strip(&a) == strip(&b)
        && a.params.data.iter().map(|x| x.to_bits()).eq(b.params.data.iter().map(|x| x.to_bits()));
    let consistent = a.avg_skip == average_skips(&a.traces).unwrap();
    check(
        "10",
        "4-layer model halves its loss in 2000 steps; reruns are identical",
        last <= 0.5 * at10 && identical && consistent,
        start,
        Duration::from_secs(30 * 60),
        format!("step-10 loss {at10:.4}, final loss {last:.4} (ratio {:.3}), rerun identical: {identical}", last / at10),
    );

    let start = Instant::now();
    let trend = |r: &skim::harness::TrainReport| {
        let n = r.metrics.len();
        let tenth = n / 10;
        let first = mean(r.metrics[..tenth].iter().map(|m| m.avg_skip));
        let final_ = mean(r.metrics[n - tenth..].iter().map(|m| m.avg_skip));
        (first, final_)
    };
    let (mut first, mut final_) = trend(&a);
    let mut note = String::new();
    if final_ <= first {
        let retry = pretrain(&learn_config(&corpus, &dir.path().join("retry"), 11)).unwrap();
        (first, final_) = trend(&retry);
        note = " (after one reseeded retry)".into();
    }
    check(
        "11",
        "average skip grows during training",
        final_ > first,
        start,
        Duration::from_secs(30 * 60),
        format!("mean avg_skip first 10% {first:.3}, final 10% {final_:.3}{note}"),
    );
}

#[test]
fn c12_qa_grid() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let synth = SynthConfig::default();
    let eval_recs = generate_qa(&QaConfig::default(), &synth, 120);
    let train_recs = generate_qa(
        &QaConfig {
            examples: 400,
            ..QaConfig::default()
        },
        &synth,
        121,
    );
    let eval_set: Vec<QaExample> = eval_recs.iter().map(QaExample::from).collect();
    let train_path = dir.path().join("train.jsonl");
    write_qa(&train_path, &train_recs).unwrap();
    let verbatim = eval_set.iter().filter(|e| e.answer_in_evidence()).count();

    let ks = [0u64, QA_K1, QA_K2];
    let mut grid = Grid::default();
    let mut decreasing_failures = 0;
    for &kt in &ks {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(&[
            "model.n_layers=2",
            "model.d_model=32",
            "model.n_heads=2",
            "model.d_ff=64",
            "model.max_window=128",
            "skip.window=128",
            "skip.alpha=16",
            "memory.enabled=true",
            "memory.capacity=256",
            "memory.k_retrieve=16",
            "corpus.format=qa",
            "batch_size=4",
            "steps=300",
            "optim.lr=3e-3",
            "seed=12",
        ])
        .unwrap();
        cfg.mode = Mode::Pretrain;
        cfg.skip.k = kt;
        cfg.corpus.path = train_path.clone();
        cfg.out_dir = dir.path().join(format!("train_k{kt}"));
        let report = train(&cfg).unwrap();
        let ck = load(&report.checkpoint).unwrap();
        let mut windows: Vec<Vec<usize>> = Vec::new();
        for &ki in &ks {
            let skip = SkipConfig { k: ki, ..cfg.skip };
            let outcomes = qa_eval(&ck.params, &ck.memory, &eval_set, &skip, cfg.qa.max_answer_tokens, Execution::Parallel).unwrap();
            windows.push(outcomes.iter().map(|o| o.windows_read).collect());
            grid.upsert(summarize(ck.train_k, ki, &outcomes));
        }
        decreasing_failures += (0..eval_set.len())
            .filter(|&i| !(windows[0][i] > windows[1][i] && windows[1][i] > windows[2][i]))
            .count();
    }
    grid.save(dir.path().join("grid.json")).unwrap();
    let complete = grid.cells.len() == 9
        && grid.cells.iter().all(|c| c.accuracy.is_finite() && c.mean_windows_read > 0.0 && c.examples == 200);
    let table: Vec<String> = grid
        .cells
        .iter()
        .map(|c| format!("({},{}) acc {:.3} windows {:.1}", c.k_train, c.k_infer, c.accuracy, c.mean_windows_read))
        .collect();
    check(
        "12",
        "QA grid completes, windows read fall with K_infer, answers are in the evidence",
        complete && decreasing_failures == 0 && verbatim == 200,
        start,
        Duration::from_secs(60 * 60),
        format!(
            "cells {}, non-decreasing examples {decreasing_failures}, verbatim answers {verbatim}/200; {}",
            grid.cells.len(),
            table.join("; ")
        ),
    );
}

/// Skip rates of the QA grid besides 0.
const QA_K1: u64 = 32;
const QA_K2: u64 = 512;

#[test]
fn c13_round_trips() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();

    let ck = Checkpoint::new(Params::<f32>::init(ModelConfig::default()).unwrap(), MemoryConfig::default(), 256, 9);
    let path = dir.path().join("m.skim");
    save(&ck, &path).unwrap();
    let back = load(&path).unwrap();
    let ckpt_ok = back.params.data.iter().map(|x| x.to_bits()).eq(ck.params.data.iter().map(|x| x.to_bits()))
        && back.params.config == ck.params.config
        && back.train_k == 256
        && back.step == 9;

    let corpus = synth_corpus(dir.path(), 8, 13);
    let cfg_path = dir.path().join("run.cfg");
    std::fs::write(&cfg_path, format!("corpus.path = {}\nsteps = 4\n", corpus.display())).unwrap();
    let run = |args: &[&str]| {
        use clap::Parser;
        let cli = skim::cli::Cli::parse_from(args);
        let mut sink = Vec::new();
        skim::cli::run(&cli, None, &mut sink).unwrap();
    };
    let out1 = dir.path().join("r1");
    let out2 = dir.path().join("r2");
    run(&[
        "skim", "pretrain", "--config", cfg_path.to_str().unwrap(), "--out_dir", out1.to_str().unwrap(),
        "model.n_layers=1", "model.d_model=16", "model.n_heads=2", "model.d_ff=32", "model.max_window=32",
        "skip.window=32", "skip.k=8", "batch_size=2", "seed=5",
    ]);
    let resolved = out1.join("config.resolved");
    run(&["skim", "pretrain", "--config", resolved.to_str().unwrap(), "--out_dir", out2.to_str().unwrap()]);
    let m1: Vec<_> = skim::harness::read_metrics(out1.join("metrics.jsonl")).unwrap().iter().map(|m| m.without_timing()).collect();
    let m2: Vec<_> = skim::harness::read_metrics(out2.join("metrics.jsonl")).unwrap().iter().map(|m| m.without_timing()).collect();
    let p1 = std::fs::read(out1.join("model.skim")).unwrap();
    let p2 = std::fs::read(out2.join("model.skim")).unwrap();
    let closure_ok = !m1.is_empty() && m1 == m2 && p1 == p2;

    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut text = String::with_capacity(1 << 20);
    while text.len() < 1 << 20 {
        let c = match rng.gen_range(0..4) {
            0 => rng.gen_range(0x20u32..0x7f),
            1 => rng.gen_range(0x80..0x800),
            2 => rng.gen_range(0x800..0xd800),
            _ => rng.gen_range(0x10000..0x110000),
        };
        text.push(char::from_u32(c).unwrap());
    }
    let tokens = tokenize(&text);
    let tok_ok = tokens.len() == text.len() && detokenize(&tokens) == text;
    let store_ok = CorpusStore::from_texts(&[text.as_str()], 1).unwrap().total_tokens() == text.len();

    check(
        "13",
        "checkpoint, config.resolved and tokenizer round-trips",
        ckpt_ok && closure_ok && tok_ok && store_ok,
        start,
        Duration::from_secs(60),
        format!(
            "checkpoint bitwise {ckpt_ok}, config closure {closure_ok}, tokenizer on {} bytes {}",
            text.len(),
            tok_ok && store_ok
        ),
    );
}
