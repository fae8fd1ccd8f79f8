//! Reading one document (or QA evidence) with the model as the loss source.

use crate::corpus::{TokenId, BOS, EOS};
use crate::dataserver::{traverse_tokens, SkipConfig, TraversalTrace};
use crate::error::{Error, Result};
use crate::memory::{MemoryConfig, MemoryPool, WindowKv};
use crate::model::{forward_with_cache, ModelConfig, Params};

/// A unit of reading. Text documents have an empty prefix and no answer; QA
/// examples prefix every window with the question and end with an answer window.
#[derive(Debug, Clone, Copy)]
pub struct ReadItem<'a> {
    pub id: usize,
    pub prefix: &'a [TokenId],
    pub body: &'a [TokenId],
    pub answer: Option<&'a [TokenId]>,
}

impl<'a> ReadItem<'a> {
    pub fn text(id: usize, body: &'a [TokenId]) -> Self {
        Self {
            id,
            prefix: &[],
            body,
            answer: None,
        }
    }

    /// Skip config for the body: the prefix eats into the window.
    pub fn body_config(&self, skip: &SkipConfig) -> Result<SkipConfig> {
        let window = skip.window.checked_sub(self.prefix.len()).filter(|&w| w >= 2).ok_or_else(|| {
            Error::Config(format!(
                "prefix of {} tokens leaves no room in a {}-token window (item {})",
                self.prefix.len(),
                skip.window,
                self.id
            ))
        })?;
        Ok(SkipConfig { window, ..*skip })
    }

    /// First predicted position that belongs to the body's loss: the body's
    /// first token is not predicted, so each window yields `chunk_len - 1` losses.
    pub fn loss_from(&self) -> usize {
        self.prefix.len() + 1
    }

    pub fn window(&self, chunk: &[TokenId]) -> Vec<TokenId> {
        let mut w = Vec::with_capacity(self.prefix.len() + chunk.len());
        w.extend_from_slice(self.prefix);
        w.extend_from_slice(chunk);
        w
    }
}

pub fn new_memory(model: &ModelConfig, mem: &MemoryConfig) -> Option<MemoryPool<f32>> {
    mem.enabled.then(|| model.new_memory(mem.capacity, mem.k_retrieve))
}

/// Keeps the rows of a window's keys and values from position `from` on.
pub fn kv_from(kv: WindowKv<f32>, from: usize, d_head: usize) -> WindowKv<f32> {
    if from == 0 {
        return kv;
    }
    WindowKv {
        per_head: kv
            .per_head
            .into_iter()
            .map(|(k, v)| (k[from * d_head..].to_vec(), v[from * d_head..].to_vec()))
            .collect(),
    }
}

/// Context kept before the answer: as much of the last body window as fits
/// next to the prefix, a BOS marker and an answer of up to `max_answer` tokens.
pub fn answer_context(window: usize, prefix_len: usize, max_answer: usize, last_chunk: &[TokenId]) -> &[TokenId] {
    let room = window.saturating_sub(prefix_len + max_answer + 2);
    &last_chunk[last_chunk.len().saturating_sub(room)..]
}

/// `prefix ++ context ++ BOS`, the prompt the answer is decoded after.
pub fn answer_prompt(prefix: &[TokenId], context: &[TokenId]) -> Vec<TokenId> {
    let mut p = Vec::with_capacity(prefix.len() + context.len() + 1);
    p.extend_from_slice(prefix);
    p.extend_from_slice(context);
    p.push(BOS);
    p
}

/// Training window for the answer, with the index of its first answer token.
pub fn answer_window(prefix: &[TokenId], context: &[TokenId], answer: &[TokenId]) -> (Vec<TokenId>, usize) {
    let mut w = answer_prompt(prefix, context);
    let from = w.len();
    w.extend_from_slice(answer);
    w.push(EOS);
    (w, from)
}

#[derive(Debug, Clone)]
pub struct Reading {
    pub trace: TraversalTrace,
    /// Sum of the body losses used for skipping.
    pub nll: f64,
    pub predicted: usize,
    pub memory: Option<MemoryPool<f32>>,
    pub last_chunk: Vec<TokenId>,
}

/// Traverses `item.body` with the model supplying per-token losses. With
/// memory, every window's body keys and values are stored after it is read.
pub fn read_item(params: &Params<f32>, memory: &MemoryConfig, item: &ReadItem<'_>, skip: &SkipConfig) -> Result<Reading> {
    let cfg = item.body_config(skip)?;
    let mut pool = new_memory(&params.config, memory);
    let mut nll = 0f64;
    let mut predicted = 0usize;
    let mut last_chunk = Vec::new();
    let from = item.loss_from();
    let d_head = params.config.d_head();
    let trace = traverse_tokens(item.id, item.body, &cfg, |chunk| -> Result<Vec<f64>> {
        let window = item.window(&chunk.tokens);
        let (out, cache) = forward_with_cache(params, &window, pool.as_ref())?;
        let losses: Vec<f64> = out.token_losses[from - 1..].iter().map(|&l| l as f64).collect();
        for &l in &losses {
            nll += l;
        }
        predicted += losses.len();
        if let Some(p) = pool.as_mut() {
            p.absorb(&kv_from(cache.window_kv(), item.prefix.len(), d_head))?;
        }
        last_chunk.clone_from(&chunk.tokens);
        Ok(losses)
    })?;
    Ok(Reading {
        trace,
        nll,
        predicted,
        memory: pool,
        last_chunk,
    })
}
