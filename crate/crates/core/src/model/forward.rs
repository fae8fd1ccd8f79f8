use crate::corpus::TokenId;
use crate::error::Result;
use crate::memory::{attend_with_memory, HeadAttention, MemoryPool, WindowKv};

use super::scalar::{matmul_acc, Scalar};
use super::{check_tokens, Params};

pub(crate) const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// `window_len x vocab_size`.
    pub logits: Vec<T>,
    /// `token_losses[i - 1] = -ln p(tokens[i] | tokens[..i], memory)`.
    pub token_losses: Vec<T>,
    pub mean_loss: T,
}

#[derive(Debug, Clone)]
pub(crate) struct LnCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
    pub out: Vec<T>,
}

#[derive(Debug, Clone)]
pub(crate) struct HeadCache<T> {
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub v: Vec<T>,
    pub att: HeadAttention<T>,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache<T> {
    pub ln1: LnCache<T>,
    pub heads: Vec<HeadCache<T>>,
    /// Concatenated head outputs, `n x d`.
    pub att: Vec<T>,
    pub ln2: LnCache<T>,
    pub h_pre: Vec<T>,
    pub h_act: Vec<T>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    pub(crate) tokens: Vec<TokenId>,
    pub(crate) layers: Vec<LayerCache<T>>,
    pub(crate) ln_f: LnCache<T>,
    /// Softmax of the logits, `n x vocab`.
    pub(crate) probs: Vec<T>,
}

impl<T: Scalar> ForwardCache<T> {
    /// Keys and values computed for this window, ready for [`MemoryPool::absorb`].
    pub fn window_kv(&self) -> WindowKv<T> {
        WindowKv {
            per_head: self
                .layers
                .iter()
                .flat_map(|l| l.heads.iter().map(|h| (h.k.clone(), h.v.clone())))
                .collect(),
        }
    }

    /// Output distribution at each position.
    pub fn probs(&self) -> &[T] {
        &self.probs
    }
}

pub fn forward<T: Scalar>(params: &Params<T>, tokens: &[TokenId], memory: Option<&MemoryPool<T>>) -> Result<ForwardOutput<T>> {
    forward_with_cache(params, tokens, memory).map(|(out, _)| out)
}

pub fn forward_with_cache<T: Scalar>(
    params: &Params<T>,
    tokens: &[TokenId],
    memory: Option<&MemoryPool<T>>,
) -> Result<(ForwardOutput<T>, ForwardCache<T>)> {
    check_tokens(&params.config, tokens, 2)?;
    let (logits, layers, ln_f) = trunk(params, tokens, memory);
    let v = params.config.vocab_size;
    let n = tokens.len();
    let mut probs = vec![T::zero(); n * v];
    let mut token_losses = Vec::with_capacity(n - 1);
    for t in 0..n {
        let row = &logits[t * v..(t + 1) * v];
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut sum = T::zero();
        let prow = &mut probs[t * v..(t + 1) * v];
        for (p, &x) in prow.iter_mut().zip(row) {
            *p = (x - max).exp();
            sum = sum + *p;
        }
        let inv = T::one() / sum;
        prow.iter_mut().for_each(|p| *p = *p * inv);
        if t + 1 < n {
            let target = tokens[t + 1] as usize;
            token_losses.push(max + sum.ln() - row[target]);
        }
    }
    let mean_loss = token_losses.iter().copied().sum::<T>() / T::of((n - 1) as f64);
    let cache = ForwardCache {
        tokens: tokens.to_vec(),
        layers,
        ln_f,
        probs,
    };
    Ok((
        ForwardOutput {
            logits,
            token_losses,
            mean_loss,
        },
        cache,
    ))
}

/// Logits for a context of at least one token (used by decoding).
pub(crate) fn logits_only<T: Scalar>(params: &Params<T>, tokens: &[TokenId], memory: Option<&MemoryPool<T>>) -> Result<Vec<T>> {
    check_tokens(&params.config, tokens, 1)?;
    Ok(trunk(params, tokens, memory).0)
}

pub(crate) fn layer_norm<T: Scalar>(x: &[T], g: &[T], b: &[T], d: usize) -> LnCache<T> {
    let n = x.len() / d;
    let eps = T::of(LN_EPS);
    let inv_d = T::of(1.0 / d as f64);
    let mut xhat = vec![T::zero(); n * d];
    let mut rstd = vec![T::zero(); n];
    let mut out = vec![T::zero(); n * d];
    for t in 0..n {
        let row = &x[t * d..(t + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let r = T::one() / (var + eps).sqrt();
        rstd[t] = r;
        for i in 0..d {
            let h = (row[i] - mean) * r;
            xhat[t * d + i] = h;
            out[t * d + i] = h * g[i] + b[i];
        }
    }
    LnCache { xhat, rstd, out }
}

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let three = T::of(3.0);
    let th = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + three * a * x * x)
}

/// `out = x @ w + bias` with `x: n x din`, `w: din x dout`.
pub(crate) fn linear<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, n: usize, din: usize, dout: usize) -> Vec<T> {
    let mut out = match bias {
        Some(b) => b.iter().copied().cycle().take(n * dout).collect(),
        None => vec![T::zero(); n * dout],
    };
    matmul_acc(n, din, dout, x, w, &mut out);
    out
}

fn trunk<T: Scalar>(
    params: &Params<T>,
    tokens: &[TokenId],
    memory: Option<&MemoryPool<T>>,
) -> (Vec<T>, Vec<LayerCache<T>>, LnCache<T>) {
    let c = &params.config;
    let lay = &params.layout;
    let p = &params.data;
    let (n, d, f, v) = (tokens.len(), c.d_model, c.d_ff, c.vocab_size);
    let (nh, dh) = (c.n_heads, c.d_head());
    let scale = T::of(1.0 / (dh as f64).sqrt());

    let mut x = vec![T::zero(); n * d];
    for (t, &tok) in tokens.iter().enumerate() {
        let e = &p[lay.wte + tok as usize * d..][..d];
        let pe = &p[lay.wpe + t * d..][..d];
        for i in 0..d {
            x[t * d + i] = e[i] + pe[i];
        }
    }

    let mut caches = Vec::with_capacity(c.n_layers);
    for (l, o) in lay.layers.iter().enumerate() {
        let ln1 = layer_norm(&x, &p[o.ln1_g..][..d], &p[o.ln1_b..][..d], d);
        let qkv = linear(&ln1.out, &p[o.wqkv..][..d * 3 * d], Some(&p[o.bqkv..][..3 * d]), n, d, 3 * d);
        let mut att = vec![T::zero(); n * d];
        let mut heads = Vec::with_capacity(nh);
        for h in 0..nh {
            let split = |part: usize| -> Vec<T> {
                (0..n)
                    .flat_map(|t| qkv[t * 3 * d + part * d + h * dh..][..dh].iter().copied())
                    .collect()
            };
            let (q, k, vv) = (split(0), split(1), split(2));
            let mem = memory.map(|m| (m.head(l, h), m.k_retrieve()));
            let ha = attend_with_memory(&q, &k, &vv, n, dh, scale, mem);
            for t in 0..n {
                att[t * d + h * dh..][..dh].copy_from_slice(&ha.out[t * dh..(t + 1) * dh]);
            }
            heads.push(HeadCache { q, k, v: vv, att: ha });
        }
        let y = linear(&att, &p[o.wo..][..d * d], Some(&p[o.bo..][..d]), n, d, d);
        x.iter_mut().zip(&y).for_each(|(a, &b)| *a = *a + b);

        let ln2 = layer_norm(&x, &p[o.ln2_g..][..d], &p[o.ln2_b..][..d], d);
        let h_pre = linear(&ln2.out, &p[o.w1..][..d * f], Some(&p[o.b1..][..f]), n, d, f);
        let h_act: Vec<T> = h_pre.iter().map(|&z| gelu(z)).collect();
        let z = linear(&h_act, &p[o.w2..][..f * d], Some(&p[o.b2..][..d]), n, f, d);
        x.iter_mut().zip(&z).for_each(|(a, &b)| *a = *a + b);

        caches.push(LayerCache {
            ln1,
            heads,
            att,
            ln2,
            h_pre,
            h_act,
        });
    }

    let ln_f = layer_norm(&x, &p[lay.lnf_g..][..d], &p[lay.lnf_b..][..d], d);
    let logits = linear(&ln_f.out, &p[lay.head..][..d * v], None, n, d, v);
    (logits, caches, ln_f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn zeroed_head_gives_ln_vocab() {
        let mut p = Params::<f32>::init(ModelConfig::tiny()).unwrap();
        p.zero_output_projection();
        let out = forward(&p, &[1, 2, 3, 4, 5], None).unwrap();
        for &l in &out.token_losses {
            assert_eq!(l, (260f32).ln());
        }
    }

    #[test]
    fn random_init_is_near_uniform() {
        let p = Params::<f32>::init(ModelConfig::tiny()).unwrap();
        let out = forward(&p, &[72, 101, 108, 108, 111, 32, 119, 111], None).unwrap();
        assert_eq!(out.token_losses.len(), 7);
        for &l in &out.token_losses {
            assert!((l - 5.561).abs() < 1.0, "loss {l}");
        }
    }

    #[test]
    fn window_bounds_and_vocab() {
        let p = Params::<f32>::init(ModelConfig::tiny()).unwrap();
        assert!(forward(&p, &[1], None).is_err());
        assert!(forward(&p, &[1; 9], None).is_err());
        assert!(forward(&p, &[1, 260], None).is_err());
    }

    #[test]
    fn probability_rows_sum_to_one() {
        let p = Params::<f32>::init(ModelConfig::tiny()).unwrap();
        let (_, cache) = forward_with_cache(&p, &[3, 1, 4, 1, 5, 9, 2, 6], None).unwrap();
        for row in cache.probs().chunks(260) {
            let s: f64 = row.iter().map(|&x| x as f64).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        for layer in &cache.layers {
            for h in &layer.heads {
                for row in &h.att.probs {
                    let s: f64 = row.iter().map(|&x| x as f64).sum();
                    assert!((s - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0f64, -0.5, 0.0, 0.7, 2.5] {
            let e = 1e-6;
            let fd = (gelu(x + e) - gelu(x - e)) / (2.0 * e);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
