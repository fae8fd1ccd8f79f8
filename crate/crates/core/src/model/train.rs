use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::memory::{MemoryPool, WindowKv};
use crate::par::{self, Execution};

use super::backward::backward_masked;
use super::forward::forward_with_cache;
use super::optim::{AdamConfig, AdamState};
use super::Params;

/// One window of a training batch.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub tokens: &'a [TokenId],
    /// First predicted position that contributes to the loss (>= 1).
    pub loss_from: usize,
    pub memory: Option<&'a MemoryPool<f32>>,
    /// For diagnostics only.
    pub doc_id: usize,
}

impl<'a> Example<'a> {
    pub fn new(tokens: &'a [TokenId]) -> Self {
        Self {
            tokens,
            loss_from: 1,
            memory: None,
            doc_id: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExampleOutput {
    /// Losses of every predicted position, unmasked.
    pub token_losses: Vec<f32>,
    pub kv: WindowKv<f32>,
}

#[derive(Debug, Clone)]
pub struct BatchGradient {
    pub grad: Vec<f32>,
    /// Mean over all masked-in predicted positions of the batch.
    pub mean_loss: f64,
    pub predicted: usize,
    pub examples: Vec<ExampleOutput>,
}

/// Gradient of the batch loss (mean over every masked-in prediction of every
/// window). Per-window work is mapped with `exec`; the reduction is sequential
/// in batch order, so the result does not depend on scheduling.
pub fn batch_gradient(params: &Params<f32>, batch: &[Example<'_>], exec: Execution, step: usize) -> Result<BatchGradient> {
    let forwards = par::map(exec, batch, |ex| forward_with_cache(params, ex.tokens, ex.memory));
    let mut caches = Vec::with_capacity(batch.len());
    let mut examples = Vec::with_capacity(batch.len());
    let mut loss_sum = 0f64;
    let mut predicted = 0usize;
    for (ex, fwd) in batch.iter().zip(forwards) {
        let (out, cache) = fwd?;
        let from = ex.loss_from.max(1);
        for &l in &out.token_losses[from - 1..] {
            loss_sum += l as f64;
        }
        predicted += out.token_losses.len() + 1 - from;
        examples.push(ExampleOutput {
            token_losses: out.token_losses,
            kv: cache.window_kv(),
        });
        caches.push(cache);
    }
    if !loss_sum.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            doc_ids: batch.iter().map(|e| e.doc_id).collect(),
        });
    }
    if predicted == 0 {
        return Err(Error::Config("batch has no predicted positions".into()));
    }
    let scale = 1.0 / predicted as f32;
    let jobs: Vec<(&Example<'_>, _)> = batch.iter().zip(caches).collect();
    let grads = par::map(exec, &jobs, |(ex, cache)| {
        let mut g = vec![0f32; params.data.len()];
        backward_masked(params, cache, ex.memory, ex.loss_from.max(1), scale, &mut g).map(|_| g)
    });
    let mut grad = vec![0f32; params.data.len()];
    for g in grads {
        for (acc, x) in grad.iter_mut().zip(g?) {
            *acc += x;
        }
    }
    Ok(BatchGradient {
        grad,
        mean_loss: loss_sum / predicted as f64,
        predicted,
        examples,
    })
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub mean_loss: f64,
    pub grad_norm: f64,
    pub examples: Vec<ExampleOutput>,
}

/// One clipped Adam update on `batch`. Losses reported are those of the
/// parameters before the update.
pub fn train_step(
    params: &mut Params<f32>,
    state: &mut AdamState,
    cfg: &AdamConfig,
    batch: &[Example<'_>],
    exec: Execution,
) -> Result<StepOutput> {
    let step = state.step as usize;
    let mut bg = batch_gradient(params, batch, exec, step)?;
    let grad_norm = state.update(cfg, &mut params.data, &mut bg.grad);
    Ok(StepOutput {
        mean_loss: bg.mean_loss,
        grad_norm,
        examples: bg.examples,
    })
}
