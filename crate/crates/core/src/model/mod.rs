//! Small pre-LayerNorm decoder-only transformer with hand-written backprop.
//!
//! Parameters live in one flat buffer whose layout (names, shapes, order) is
//! fixed by [`ModelConfig`]; the same layout is used for gradients, optimizer
//! moments and the checkpoint file.

pub mod backward;
pub mod checkpoint;
pub mod forward;
pub mod optim;
pub mod scalar;
pub mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::memory::MemoryPool;

pub use backward::{backward, backward_masked, Gradients};
pub use checkpoint::{load, save, Checkpoint, FORMAT_VERSION};
pub use forward::{forward, forward_with_cache, ForwardCache, ForwardOutput};
pub use optim::{AdamConfig, AdamState};
pub use scalar::Scalar;
pub use train::{batch_gradient, train_step, BatchGradient, Example, ExampleOutput, StepOutput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    /// Longest window the model accepts (learned positions).
    pub max_window: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            vocab_size: VOCAB_SIZE,
            max_window: 256,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn tiny() -> Self {
        Self {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab_size: VOCAB_SIZE,
            max_window: 8,
            seed: 0,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_window < 2 {
            return Err(Error::Config(format!("max_window must be >= 2, got {}", self.max_window)));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be >= 2".into()));
        }
        Ok(())
    }

    pub fn new_memory<T: Scalar>(&self, capacity: usize, k_retrieve: usize) -> MemoryPool<T> {
        MemoryPool::new(self.n_layers, self.n_heads, self.d_head(), capacity, k_retrieve)
    }
}

/// Offsets of one block's tensors in the flat buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerOffsets {
    pub ln1_g: usize,
    pub ln1_b: usize,
    /// `d x 3d`, columns are `[q | k | v]`.
    pub wqkv: usize,
    pub bqkv: usize,
    /// `d x d`.
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    /// `d x d_ff`.
    pub w1: usize,
    pub b1: usize,
    /// `d_ff x d`.
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Parameter order:
/// `wte [V,d]`, `wpe [W,d]`, then per layer `ln1.g, ln1.b, attn.wqkv [d,3d],
/// attn.bqkv, attn.wo [d,d], attn.bo, ln2.g, ln2.b, mlp.w1 [d,f], mlp.b1,
/// mlp.w2 [f,d], mlp.b2`, then `lnf.g, lnf.b, head.w [d,V]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub specs: Vec<ParamSpec>,
    pub total: usize,
    pub wte: usize,
    pub wpe: usize,
    pub layers: Vec<LayerOffsets>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub head: usize,
}

impl Layout {
    pub fn new(c: &ModelConfig) -> Self {
        let (d, f, v, w) = (c.d_model, c.d_ff, c.vocab_size, c.max_window);
        let mut specs = Vec::new();
        let mut total = 0;
        let mut add = |name: String, shape: Vec<usize>| {
            let offset = total;
            total += shape.iter().product::<usize>();
            specs.push(ParamSpec { name, shape, offset });
            offset
        };
        let wte = add("wte".into(), vec![v, d]);
        let wpe = add("wpe".into(), vec![w, d]);
        let layers = (0..c.n_layers)
            .map(|l| LayerOffsets {
                ln1_g: add(format!("l{l}.ln1.g"), vec![d]),
                ln1_b: add(format!("l{l}.ln1.b"), vec![d]),
                wqkv: add(format!("l{l}.attn.wqkv"), vec![d, 3 * d]),
                bqkv: add(format!("l{l}.attn.bqkv"), vec![3 * d]),
                wo: add(format!("l{l}.attn.wo"), vec![d, d]),
                bo: add(format!("l{l}.attn.bo"), vec![d]),
                ln2_g: add(format!("l{l}.ln2.g"), vec![d]),
                ln2_b: add(format!("l{l}.ln2.b"), vec![d]),
                w1: add(format!("l{l}.mlp.w1"), vec![d, f]),
                b1: add(format!("l{l}.mlp.b1"), vec![f]),
                w2: add(format!("l{l}.mlp.w2"), vec![f, d]),
                b2: add(format!("l{l}.mlp.b2"), vec![d]),
            })
            .collect();
        let lnf_g = add("lnf.g".into(), vec![d]);
        let lnf_b = add("lnf.b".into(), vec![d]);
        let head = add("head.w".into(), vec![d, v]);
        Self {
            specs,
            total,
            wte,
            wpe,
            layers,
            lnf_g,
            lnf_b,
            head,
        }
    }

    pub fn spec(&self, name: &str) -> Option<&ParamSpec> {
        self.specs.iter().find(|s| s.name == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub config: ModelConfig,
    pub layout: Layout,
    pub data: Vec<T>,
}

impl<T: Scalar> Params<T> {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let data = vec![T::zero(); layout.total];
        Ok(Self { config, layout, data })
    }

    /// Normal(0, 0.02) weights, residual projections scaled by `1/sqrt(2 n_layers)`,
    /// LayerNorm gains 1 and biases 0. Seeded by `config.seed`.
    pub fn init(config: ModelConfig) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let std = 0.02;
        let resid_std = std / (2.0 * config.n_layers as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let resid = Normal::new(0.0, resid_std).expect("valid std");
        for spec in p.layout.specs.clone() {
            let slot = &mut p.data[spec.range()];
            let name = spec.name.as_str();
            if name.ends_with(".g") {
                slot.fill(T::one());
            } else if spec.shape.len() == 1 {
                slot.fill(T::zero());
            } else if name.ends_with("attn.wo") || name.ends_with("mlp.w2") {
                slot.iter_mut().for_each(|x| *x = T::of(resid.sample(&mut rng)));
            } else {
                slot.iter_mut().for_each(|x| *x = T::of(normal.sample(&mut rng)));
            }
        }
        Ok(p)
    }

    pub fn get(&self, name: &str) -> Option<&[T]> {
        self.layout.spec(name).map(|s| &self.data[s.range()])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let range = self.layout.spec(name)?.range();
        Some(&mut self.data[range])
    }

    pub fn num_params(&self) -> usize {
        self.data.len()
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            config: self.config,
            layout: self.layout.clone(),
            data: self.data.iter().map(|&x| U::of(x.as_f64())).collect(),
        }
    }

    /// Sets the output projection to zero, making every prediction uniform.
    pub fn zero_output_projection(&mut self) {
        let range = self.layout.specs.last().expect("head.w").range();
        self.data[range].fill(T::zero());
    }
}

pub(crate) fn check_tokens(config: &ModelConfig, tokens: &[TokenId], min_len: usize) -> Result<()> {
    if tokens.len() < min_len || tokens.len() > config.max_window {
        return Err(Error::WindowLength {
            len: tokens.len(),
            max: config.max_window,
        });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(Error::VocabOverflow {
            token: bad,
            vocab: config.vocab_size,
        });
    }
    Ok(())
}

/// Greedy decoding of `n` tokens after `prefix`; ties go to the lower id.
///
/// The context slides to the last `max_window` tokens once it outgrows the
/// window. Memory, when given, is read but not updated.
pub fn generate<T: Scalar>(
    params: &Params<T>,
    prefix: &[TokenId],
    n: usize,
    memory: Option<&MemoryPool<T>>,
) -> Result<Vec<TokenId>> {
    generate_until(params, prefix, n, memory, None)
}

/// As [`generate`], stopping early after emitting `stop`.
pub fn generate_until<T: Scalar>(
    params: &Params<T>,
    prefix: &[TokenId],
    n: usize,
    memory: Option<&MemoryPool<T>>,
    stop: Option<TokenId>,
) -> Result<Vec<TokenId>> {
    if prefix.is_empty() {
        return Err(Error::EmptyPrefix);
    }
    check_tokens(&params.config, prefix, 1)?;
    let w = params.config.max_window;
    let v = params.config.vocab_size;
    let mut seq = prefix.to_vec();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let ctx = &seq[seq.len().saturating_sub(w)..];
        let logits = forward::logits_only(params, ctx, memory)?;
        let last = &logits[(ctx.len() - 1) * v..ctx.len() * v];
        let mut best = 0;
        for (i, &x) in last.iter().enumerate() {
            if x > last[best] {
                best = i;
            }
        }
        let tok = best as TokenId;
        out.push(tok);
        seq.push(tok);
        if Some(tok) == stop {
            break;
        }
    }
    Ok(out)
}
