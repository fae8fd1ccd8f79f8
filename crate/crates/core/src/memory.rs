//! Bounded key/value memory consulted by every attention layer.
//!
//! Each (layer, head) owns a FIFO queue of past keys and values. A query
//! retrieves its top-k memory entries by dot product, and the attention
//! softmax runs jointly over the causal window keys and those entries.
//! Stored entries are constants: no gradient flows into them.

use std::collections::VecDeque;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::scalar::{dot, Scalar};

pub const DEFAULT_CAPACITY: usize = 256;
pub const DEFAULT_K_RETRIEVE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryConfig {
    pub enabled: bool,
    /// Entries per layer per head.
    pub capacity: usize,
    pub k_retrieve: usize,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            capacity: DEFAULT_CAPACITY,
            k_retrieve: DEFAULT_K_RETRIEVE,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry<T> {
    pub key: Vec<T>,
    pub value: Vec<T>,
    pub insert_seq: u64,
}

/// FIFO queue for a single (layer, head).
#[derive(Debug, Clone, PartialEq)]
pub struct HeadPool<T> {
    entries: VecDeque<MemoryEntry<T>>,
    next_seq: u64,
}

impl<T> Default for HeadPool<T> {
    fn default() -> Self {
        Self {
            entries: VecDeque::new(),
            next_seq: 0,
        }
    }
}

impl<T: Scalar> HeadPool<T> {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries oldest first.
    pub fn entries(&self) -> impl Iterator<Item = &MemoryEntry<T>> {
        self.entries.iter()
    }

    pub fn get(&self, idx: usize) -> &MemoryEntry<T> {
        &self.entries[idx]
    }

    fn push(&mut self, key: &[T], value: &[T], capacity: usize) {
        self.entries.push_back(MemoryEntry {
            key: key.to_vec(),
            value: value.to_vec(),
            insert_seq: self.next_seq,
        });
        self.next_seq += 1;
        while self.entries.len() > capacity {
            self.entries.pop_front();
        }
    }

    /// Positions (into [`HeadPool::get`]) of the `k` best-scoring entries, best
    /// first. Ties go to the older entry.
    pub fn topk_indices(&self, query: &[T], k: usize) -> Vec<usize> {
        let k = k.min(self.entries.len());
        if k == 0 {
            return Vec::new();
        }
        let mut scored: Vec<(T, usize)> = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (dot(query, &e.key), i))
            .collect();
        // deque position order equals insert_seq order, so the index breaks ties
        let cmp = |a: &(T, usize), b: &(T, usize)| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
        };
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_unstable_by(cmp);
        scored.into_iter().map(|(_, i)| i).collect()
    }
}

/// Per-(layer, head) FIFO memories.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryPool<T> {
    capacity: usize,
    k_retrieve: usize,
    n_layers: usize,
    n_heads: usize,
    d_head: usize,
    heads: Vec<HeadPool<T>>,
}

impl<T: Scalar> MemoryPool<T> {
    pub fn new(n_layers: usize, n_heads: usize, d_head: usize, capacity: usize, k_retrieve: usize) -> Self {
        Self {
            capacity,
            k_retrieve,
            n_layers,
            n_heads,
            d_head,
            heads: (0..n_layers * n_heads).map(|_| HeadPool::default()).collect(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn k_retrieve(&self) -> usize {
        self.k_retrieve
    }

    pub fn d_head(&self) -> usize {
        self.d_head
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    /// Total entries across all (layer, head) pools.
    pub fn len(&self) -> usize {
        self.heads.iter().map(HeadPool::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.iter().all(HeadPool::is_empty)
    }

    pub fn head(&self, layer: usize, head: usize) -> &HeadPool<T> {
        &self.heads[layer * self.n_heads + head]
    }

    /// Appends `keys`/`values` (row-major, `d_head` wide) in order, evicting
    /// the oldest entries beyond capacity.
    pub fn append(&mut self, layer: usize, head: usize, keys: &[T], values: &[T]) -> Result<()> {
        let d = self.d_head;
        if keys.len() != values.len() {
            return Err(Error::Dimension {
                expected: keys.len(),
                got: values.len(),
            });
        }
        if !keys.len().is_multiple_of(d) {
            return Err(Error::Dimension {
                expected: d,
                got: keys.len() % d,
            });
        }
        self.check_slot(layer, head)?;
        let capacity = self.capacity;
        let pool = &mut self.heads[layer * self.n_heads + head];
        for (k, v) in keys.chunks_exact(d).zip(values.chunks_exact(d)) {
            pool.push(k, v, capacity);
        }
        Ok(())
    }

    /// Up to `k` entries with the largest `query . key`, best first, ties to
    /// the older entry.
    pub fn retrieve_topk(&self, layer: usize, head: usize, query: &[T], k: usize) -> Result<Vec<&MemoryEntry<T>>> {
        if query.len() != self.d_head {
            return Err(Error::Dimension {
                expected: self.d_head,
                got: query.len(),
            });
        }
        self.check_slot(layer, head)?;
        let pool = self.head(layer, head);
        Ok(pool.topk_indices(query, k).into_iter().map(|i| pool.get(i)).collect())
    }

    /// Appends one window's keys and values to every (layer, head).
    pub fn absorb(&mut self, kv: &WindowKv<T>) -> Result<()> {
        if kv.per_head.len() != self.heads.len() {
            return Err(Error::Dimension {
                expected: self.heads.len(),
                got: kv.per_head.len(),
            });
        }
        for (slot, (keys, values)) in kv.per_head.iter().enumerate() {
            self.append(slot / self.n_heads, slot % self.n_heads, keys, values)?;
        }
        Ok(())
    }

    /// Clears all entries; capacity and sequence numbering are kept.
    pub fn reset(&mut self) {
        for pool in &mut self.heads {
            pool.entries.clear();
        }
    }

    fn check_slot(&self, layer: usize, head: usize) -> Result<()> {
        if layer >= self.n_layers {
            return Err(Error::Dimension {
                expected: self.n_layers,
                got: layer,
            });
        }
        if head >= self.n_heads {
            return Err(Error::Dimension {
                expected: self.n_heads,
                got: head,
            });
        }
        Ok(())
    }

    /// Debug dump: one JSON object per entry.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for layer in 0..self.n_layers {
            for head in 0..self.n_heads {
                for e in self.head(layer, head).entries() {
                    let rec = serde_json::json!({
                        "layer": layer,
                        "head": head,
                        "insert_seq": e.insert_seq,
                        "key": e.key.iter().map(|x| x.as_f64()).collect::<Vec<_>>(),
                        "value": e.value.iter().map(|x| x.as_f64()).collect::<Vec<_>>(),
                    });
                    serde_json::to_writer(&mut out, &rec)?;
                    out.write_all(b"\n")?;
                }
            }
        }
        Ok(())
    }
}

/// Keys and values of one window, indexed by `layer * n_heads + head`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowKv<T> {
    pub per_head: Vec<(Vec<T>, Vec<T>)>,
}

/// Saved state of one head's attention, needed for the backward pass.
#[derive(Debug, Clone)]
pub struct HeadAttention<T> {
    /// `n x d_head`.
    pub out: Vec<T>,
    /// Per query: probabilities over window keys `0..=t` followed by the
    /// retrieved memory entries.
    pub probs: Vec<Vec<T>>,
    /// Per query: retrieved memory positions.
    pub retrieved: Vec<Vec<usize>>,
}

/// Causal attention of one head over a window, optionally joined with memory.
///
/// `q`, `k`, `v` are `n x d` row-major. Memory entries are retrieved per query
/// by raw dot product and scored with the same `scale` as window keys. With
/// `memory` absent or empty this is plain causal attention, bit for bit.
pub fn attend_with_memory<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    n: usize,
    d: usize,
    scale: T,
    memory: Option<(&HeadPool<T>, usize)>,
) -> HeadAttention<T> {
    let mut out = vec![T::zero(); n * d];
    let mut probs = Vec::with_capacity(n);
    let mut retrieved = Vec::with_capacity(n);
    for t in 0..n {
        let qt = &q[t * d..(t + 1) * d];
        let mem_idx = match memory {
            Some((pool, kr)) if !pool.is_empty() && kr > 0 => pool.topk_indices(qt, kr),
            _ => Vec::new(),
        };
        let mut p: Vec<T> = Vec::with_capacity(t + 1 + mem_idx.len());
        for j in 0..=t {
            p.push(dot(qt, &k[j * d..(j + 1) * d]) * scale);
        }
        if let Some((pool, _)) = memory {
            for &m in &mem_idx {
                p.push(dot(qt, &pool.get(m).key) * scale);
            }
        }
        let max = p.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut sum = T::zero();
        for x in p.iter_mut() {
            *x = (*x - max).exp();
            sum = sum + *x;
        }
        let inv = T::one() / sum;
        for x in p.iter_mut() {
            *x = *x * inv;
        }
        let ot = &mut out[t * d..(t + 1) * d];
        for j in 0..=t {
            let pj = p[j];
            for (o, &vv) in ot.iter_mut().zip(&v[j * d..(j + 1) * d]) {
                *o = *o + pj * vv;
            }
        }
        if let Some((pool, _)) = memory {
            for (slot, &m) in mem_idx.iter().enumerate() {
                let pm = p[t + 1 + slot];
                for (o, &vv) in ot.iter_mut().zip(&pool.get(m).value) {
                    *o = *o + pm * vv;
                }
            }
        }
        probs.push(p);
        retrieved.push(mem_idx);
    }
    HeadAttention { out, probs, retrieved }
}

/// Backward of [`attend_with_memory`]. Accumulates into `dq`, `dk`, `dv`
/// (`n x d`); memory entries receive no gradient.
#[allow(clippy::too_many_arguments)]
pub fn attend_backward<T: Scalar>(
    saved: &HeadAttention<T>,
    d_out: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    n: usize,
    d: usize,
    scale: T,
    memory: Option<&HeadPool<T>>,
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
) {
    let mut dp: Vec<T> = Vec::new();
    for t in 0..n {
        let p = &saved.probs[t];
        let mem_idx = &saved.retrieved[t];
        let dot_t = &d_out[t * d..(t + 1) * d];
        dp.clear();
        for j in 0..=t {
            dp.push(dot(dot_t, &v[j * d..(j + 1) * d]));
        }
        if let Some(pool) = memory {
            for &m in mem_idx {
                dp.push(dot(dot_t, &pool.get(m).value));
            }
        }
        let weighted: T = p.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
        let qt = &q[t * d..(t + 1) * d];
        for j in 0..=t {
            let ds = p[j] * (dp[j] - weighted) * scale;
            let kj = &k[j * d..(j + 1) * d];
            for i in 0..d {
                dq[t * d + i] = dq[t * d + i] + ds * kj[i];
                dk[j * d + i] = dk[j * d + i] + ds * qt[i];
                dv[j * d + i] = dv[j * d + i] + p[j] * dot_t[i];
            }
        }
        if let Some(pool) = memory {
            for (slot, &m) in mem_idx.iter().enumerate() {
                let ds = p[t + 1 + slot] * (dp[t + 1 + slot] - weighted) * scale;
                let key = &pool.get(m).key;
                for i in 0..d {
                    dq[t * d + i] = dq[t * d + i] + ds * key[i];
                }
            }
        }
    }
}
