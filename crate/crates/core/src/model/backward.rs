use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::memory::{attend_backward, MemoryPool};

use super::forward::{forward_with_cache, gelu_grad, ForwardCache, LnCache};
use super::scalar::{matmul_at_acc, matmul_bt_acc, Scalar};
use super::Params;

/// Gradients share the parameter layout.
pub type Gradients<T> = Params<T>;

/// Gradient of `mean_loss` with respect to every parameter.
pub fn backward<T: Scalar>(params: &Params<T>, tokens: &[TokenId], memory: Option<&MemoryPool<T>>) -> Result<Gradients<T>> {
    let (_, cache) = forward_with_cache(params, tokens, memory)?;
    let mut grads = Params {
        config: params.config,
        layout: params.layout.clone(),
        data: vec![T::zero(); params.data.len()],
    };
    let scale = T::one() / T::of((tokens.len() - 1) as f64);
    backward_masked(params, &cache, memory, 1, scale, &mut grads.data)?;
    Ok(grads)
}

/// Accumulates into `grad` the gradient of
/// `scale * sum(token_loss of predicted positions >= loss_from)`.
///
/// Position `i` is the index of the predicted token, so `loss_from = 1`
/// covers every prediction in the window. `memory` must be the pool the
/// cache was computed with.
pub fn backward_masked<T: Scalar>(
    params: &Params<T>,
    cache: &ForwardCache<T>,
    memory: Option<&MemoryPool<T>>,
    loss_from: usize,
    scale: T,
    grad: &mut [T],
) -> Result<()> {
    if grad.len() != params.data.len() {
        return Err(Error::Dimension {
            expected: params.data.len(),
            got: grad.len(),
        });
    }
    let c = &params.config;
    let lay = &params.layout;
    let p = &params.data;
    let tokens = &cache.tokens;
    let (n, d, f, v) = (tokens.len(), c.d_model, c.d_ff, c.vocab_size);
    let dh = c.d_head();
    let att_scale = T::of(1.0 / (dh as f64).sqrt());

    // d(loss)/d(logits): row t predicts token t + 1
    let mut dlogits = vec![T::zero(); n * v];
    for t in loss_from.max(1) - 1..n - 1 {
        let row = &mut dlogits[t * v..(t + 1) * v];
        for (g, &pr) in row.iter_mut().zip(&cache.probs[t * v..(t + 1) * v]) {
            *g = pr * scale;
        }
        let target = tokens[t + 1] as usize;
        row[target] = row[target] - scale;
    }

    matmul_at_acc(d, n, v, &cache.ln_f.out, &dlogits, &mut grad[lay.head..][..d * v]);
    let mut dlnf = vec![T::zero(); n * d];
    matmul_bt_acc(n, v, d, &dlogits, &p[lay.head..][..d * v], &mut dlnf);
    let mut dx = vec![T::zero(); n * d];
    ln_backward(&cache.ln_f, &p[lay.lnf_g..][..d], &dlnf, d, &mut dx, grad, lay.lnf_g, lay.lnf_b);

    for (l, o) in lay.layers.iter().enumerate().rev() {
        let lc = &cache.layers[l];

        // mlp: x += gelu(ln2(x) @ w1 + b1) @ w2 + b2
        matmul_at_acc(f, n, d, &lc.h_act, &dx, &mut grad[o.w2..][..f * d]);
        bias_grad(&dx, d, &mut grad[o.b2..][..d]);
        let mut dh_act = vec![T::zero(); n * f];
        matmul_bt_acc(n, d, f, &dx, &p[o.w2..][..f * d], &mut dh_act);
        let dh_pre: Vec<T> = dh_act.iter().zip(&lc.h_pre).map(|(&g, &z)| g * gelu_grad(z)).collect();
        matmul_at_acc(d, n, f, &lc.ln2.out, &dh_pre, &mut grad[o.w1..][..d * f]);
        bias_grad(&dh_pre, f, &mut grad[o.b1..][..f]);
        let mut dln2 = vec![T::zero(); n * d];
        matmul_bt_acc(n, f, d, &dh_pre, &p[o.w1..][..d * f], &mut dln2);
        ln_backward(&lc.ln2, &p[o.ln2_g..][..d], &dln2, d, &mut dx, grad, o.ln2_g, o.ln2_b);

        // attention: x += attn(ln1(x)) @ wo + bo
        matmul_at_acc(d, n, d, &lc.att, &dx, &mut grad[o.wo..][..d * d]);
        bias_grad(&dx, d, &mut grad[o.bo..][..d]);
        let mut datt = vec![T::zero(); n * d];
        matmul_bt_acc(n, d, d, &dx, &p[o.wo..][..d * d], &mut datt);

        let mut dqkv = vec![T::zero(); n * 3 * d];
        let mut dout = vec![T::zero(); n * dh];
        for (h, hc) in lc.heads.iter().enumerate() {
            for t in 0..n {
                dout[t * dh..(t + 1) * dh].copy_from_slice(&datt[t * d + h * dh..][..dh]);
            }
            let mut dq = vec![T::zero(); n * dh];
            let mut dk = vec![T::zero(); n * dh];
            let mut dv = vec![T::zero(); n * dh];
            let mem = memory.map(|m| m.head(l, h));
            attend_backward(&hc.att, &dout, &hc.q, &hc.k, &hc.v, n, dh, att_scale, mem, &mut dq, &mut dk, &mut dv);
            for t in 0..n {
                let row = &mut dqkv[t * 3 * d..(t + 1) * 3 * d];
                row[h * dh..][..dh].copy_from_slice(&dq[t * dh..(t + 1) * dh]);
                row[d + h * dh..][..dh].copy_from_slice(&dk[t * dh..(t + 1) * dh]);
                row[2 * d + h * dh..][..dh].copy_from_slice(&dv[t * dh..(t + 1) * dh]);
            }
        }
        matmul_at_acc(d, n, 3 * d, &lc.ln1.out, &dqkv, &mut grad[o.wqkv..][..d * 3 * d]);
        bias_grad(&dqkv, 3 * d, &mut grad[o.bqkv..][..3 * d]);
        let mut dln1 = vec![T::zero(); n * d];
        matmul_bt_acc(n, 3 * d, d, &dqkv, &p[o.wqkv..][..d * 3 * d], &mut dln1);
        ln_backward(&lc.ln1, &p[o.ln1_g..][..d], &dln1, d, &mut dx, grad, o.ln1_g, o.ln1_b);
    }

    for (t, &tok) in tokens.iter().enumerate() {
        let row = &dx[t * d..(t + 1) * d];
        let e = &mut grad[lay.wte + tok as usize * d..][..d];
        e.iter_mut().zip(row).for_each(|(g, &x)| *g = *g + x);
        let pe = &mut grad[lay.wpe + t * d..][..d];
        pe.iter_mut().zip(row).for_each(|(g, &x)| *g = *g + x);
    }
    Ok(())
}

fn bias_grad<T: Scalar>(dy: &[T], width: usize, out: &mut [T]) {
    for row in dy.chunks_exact(width) {
        out.iter_mut().zip(row).for_each(|(g, &x)| *g = *g + x);
    }
}

/// Backprop through `y = xhat * g + b`, adding the input gradient into `dx`.
#[allow(clippy::too_many_arguments)]
fn ln_backward<T: Scalar>(
    cache: &LnCache<T>,
    g: &[T],
    dy: &[T],
    d: usize,
    dx: &mut [T],
    grad: &mut [T],
    g_off: usize,
    b_off: usize,
) {
    let n = dy.len() / d;
    let inv_d = T::of(1.0 / d as f64);
    for t in 0..n {
        let dyr = &dy[t * d..(t + 1) * d];
        let xh = &cache.xhat[t * d..(t + 1) * d];
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for i in 0..d {
            grad[g_off + i] = grad[g_off + i] + dyr[i] * xh[i];
            grad[b_off + i] = grad[b_off + i] + dyr[i];
            let dxh = dyr[i] * g[i];
            mean_dxhat = mean_dxhat + dxh;
            mean_dxhat_xhat = mean_dxhat_xhat + dxh * xh[i];
        }
        mean_dxhat = mean_dxhat * inv_d;
        mean_dxhat_xhat = mean_dxhat_xhat * inv_d;
        let r = cache.rstd[t];
        for i in 0..d {
            let dxh = dyr[i] * g[i];
            dx[t * d + i] = dx[t * d + i] + r * (dxh - mean_dxhat - xh[i] * mean_dxhat_xhat);
        }
    }
}
