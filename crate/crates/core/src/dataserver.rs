//! Loss-guided skipping over long documents.
//!
//! A reader consumes a window of `L` tokens starting at cursor `S`, reports the
//! per-token losses of that window, and the server decides how far to jump:
//!
//! ```text
//! C = pool(losses)
//! D = K * min( floor((|X| - S - L) / K), floor(alpha / C) )
//! S' = S + window_len + D
//! ```
//!
//! `K = 0` means sequential reading (`D = 0`). Both caps are floored at zero
//! and `C` is clamped below at `c_min`, so `D` is always defined and the
//! cursor never passes the end of the document.

use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{chunk_of, CorpusStore, TokenChunk, TokenId};
use crate::error::{Error, Result};

pub const DEFAULT_ALPHA: f64 = 2.0;
pub const DEFAULT_DECAY: f64 = 0.9;
pub const DEFAULT_C_MIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Average,
    LastToken,
    ExpDecay,
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(Pooling::Average),
            "last_token" => Ok(Pooling::LastToken),
            "exp_decay" => Ok(Pooling::ExpDecay),
            other => Err(Error::Config(format!(
                "unknown pooling `{other}` (expected average, last_token or exp_decay)"
            ))),
        }
    }
}

impl std::fmt::Display for Pooling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Pooling::Average => "average",
            Pooling::LastToken => "last_token",
            Pooling::ExpDecay => "exp_decay",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkipConfig {
    /// Skip rate; 0 reads sequentially.
    pub k: u64,
    /// Skip threshold.
    pub alpha: f64,
    /// Reading window length in tokens.
    pub window: usize,
    pub pooling: Pooling,
    /// Only used by [`Pooling::ExpDecay`].
    pub decay: f64,
    /// Confidence clamp floor.
    pub c_min: f64,
}

impl Default for SkipConfig {
    fn default() -> Self {
        Self {
            k: 0,
            alpha: DEFAULT_ALPHA,
            window: 256,
            pooling: Pooling::Average,
            decay: DEFAULT_DECAY,
            c_min: DEFAULT_C_MIN,
        }
    }
}

impl SkipConfig {
    pub fn sequential(window: usize) -> Self {
        Self {
            window,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("skip.alpha must be positive, got {}", self.alpha));
        }
        if self.window < 2 {
            return bad(format!("skip window must be >= 2, got {}", self.window));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad(format!("skip.decay must be in (0, 1], got {}", self.decay));
        }
        if !(self.c_min > 0.0 && self.c_min.is_finite()) {
            return bad(format!("skip.c_min must be positive, got {}", self.c_min));
        }
        Ok(())
    }
}

/// Reduces per-token losses to a scalar confidence. Lower is more confident.
///
/// The result is not clamped; [`skip_distance`] applies `c_min`.
pub fn pool_losses(losses: &[f64], strategy: Pooling, decay: f64) -> Result<f64> {
    let last = *losses.last().ok_or(Error::EmptyLosses)?;
    Ok(match strategy {
        Pooling::Average => losses.iter().sum::<f64>() / losses.len() as f64,
        Pooling::LastToken => last,
        Pooling::ExpDecay => {
            // newest token has weight 1, walking back multiplies by decay
            let mut weight = 1.0;
            let mut num = 0.0;
            let mut den = 0.0;
            for &loss in losses.iter().rev() {
                num += weight * loss;
                den += weight;
                weight *= decay;
            }
            num / den
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkipDecision {
    /// Confidence after clamping.
    pub confidence: f64,
    pub distance: u64,
    /// `floor((|X| - S - L) / K)` floored at 0; 0 when `K = 0`.
    pub cap_remaining: u64,
    /// `floor(alpha / C)`, saturating.
    pub cap_confidence: u64,
}

pub fn skip_distance(confidence: f64, cursor: usize, doc_len: usize, config: &SkipConfig) -> SkipDecision {
    let confidence = confidence.max(config.c_min);
    // f64 -> u64 casts saturate, so a tiny confidence yields u64::MAX rather than wrapping
    let cap_confidence = (config.alpha / confidence).floor() as u64;
    if config.k == 0 {
        return SkipDecision {
            confidence,
            distance: 0,
            cap_remaining: 0,
            cap_confidence,
        };
    }
    let remaining = doc_len.saturating_sub(cursor.saturating_add(config.window)) as u64;
    let cap_remaining = remaining / config.k;
    let distance = config.k * cap_remaining.min(cap_confidence);
    SkipDecision {
        confidence,
        distance,
        cap_remaining,
        cap_confidence,
    }
}

/// Traversal cursor over one document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadState {
    pub doc_id: usize,
    pub cursor: usize,
    pub doc_len: usize,
    pub steps_taken: usize,
    pub tokens_skipped_total: u64,
    pub finished: bool,
}

impl ReadState {
    /// Starts at offset 0. Documents with fewer than two tokens are finished
    /// immediately.
    pub fn new(doc_id: usize, doc_len: usize) -> Self {
        Self {
            doc_id,
            cursor: 0,
            doc_len,
            steps_taken: 0,
            tokens_skipped_total: 0,
            finished: doc_len < 2,
        }
    }

    /// Length of the window served at the current cursor.
    pub fn window_len(&self, config: &SkipConfig) -> usize {
        config.window.min(self.doc_len - self.cursor)
    }

    /// The window at the current cursor.
    pub fn chunk(&self, tokens: &[TokenId], config: &SkipConfig) -> Result<TokenChunk> {
        if self.finished {
            return Err(Error::Finished { cursor: self.cursor });
        }
        chunk_of(self.doc_id, tokens, self.cursor, config.window)
    }
}

/// One advance of a [`ReadState`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub doc_id: usize,
    pub offset: usize,
    pub window_len: usize,
    pub confidence: f64,
    pub distance: u64,
    pub cap_remaining: u64,
    pub cap_confidence: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Advance {
    Continue,
    End,
}

/// Consumes the losses of the window just served at `state.cursor` and moves
/// the cursor past it plus the skip distance.
///
/// `losses` holds one value per predicted position, i.e. `window_len - 1`.
pub fn advance(state: &mut ReadState, losses: &[f64], config: &SkipConfig) -> Result<(Advance, TraceStep)> {
    if state.finished {
        return Err(Error::Finished { cursor: state.cursor });
    }
    let window_len = state.window_len(config);
    if losses.len() != window_len - 1 {
        return Err(Error::LossCount {
            expected: window_len - 1,
            got: losses.len(),
        });
    }
    let confidence = pool_losses(losses, config.pooling, config.decay)?;
    let decision = skip_distance(confidence, state.cursor, state.doc_len, config);
    let step = TraceStep {
        doc_id: state.doc_id,
        offset: state.cursor,
        window_len,
        confidence: decision.confidence,
        distance: decision.distance,
        cap_remaining: decision.cap_remaining,
        cap_confidence: decision.cap_confidence,
    };
    state.cursor += window_len + decision.distance as usize;
    debug_assert!(state.cursor <= state.doc_len);
    state.steps_taken += 1;
    state.tokens_skipped_total += decision.distance;
    if state.doc_len - state.cursor < 2 {
        state.finished = true;
        Ok((Advance::End, step))
    } else {
        Ok((Advance::Continue, step))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraversalTrace {
    pub doc_id: usize,
    pub doc_len: usize,
    pub steps: Vec<TraceStep>,
    /// Final cursor position.
    pub end_cursor: usize,
}

impl TraversalTrace {
    pub fn new(doc_id: usize, doc_len: usize) -> Self {
        Self {
            doc_id,
            doc_len,
            steps: Vec::new(),
            end_cursor: 0,
        }
    }

    pub fn push(&mut self, step: TraceStep, state: &ReadState) {
        self.steps.push(step);
        self.end_cursor = state.cursor;
    }

    pub fn tokens_read(&self) -> usize {
        self.steps.iter().map(|s| s.window_len).sum()
    }

    pub fn tokens_skipped(&self) -> u64 {
        self.steps.iter().map(|s| s.distance).sum()
    }

    /// Tokens after the final cursor that were never read.
    pub fn tokens_unreached(&self) -> usize {
        self.doc_len - self.end_cursor
    }

    pub fn offsets(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.offset).collect()
    }

    pub fn mean_skip(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        self.tokens_skipped() as f64 / self.steps.len() as f64
    }

    /// One JSON object per step.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for step in &self.steps {
            serde_json::to_writer(&mut out, step)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Runs a whole traversal of `tokens`, asking `confidence_source` for the
/// per-token losses of every served window.
pub fn traverse_tokens<F, E>(
    doc_id: usize,
    tokens: &[TokenId],
    config: &SkipConfig,
    mut confidence_source: F,
) -> Result<TraversalTrace>
where
    F: FnMut(&TokenChunk) -> std::result::Result<Vec<f64>, E>,
    E: std::fmt::Display,
{
    config.validate()?;
    let mut state = ReadState::new(doc_id, tokens.len());
    let mut trace = TraversalTrace::new(doc_id, tokens.len());
    while !state.finished {
        let chunk = state.chunk(tokens, config)?;
        let losses = confidence_source(&chunk).map_err(|e| Error::Callback {
            doc_id,
            offset: chunk.offset,
            message: e.to_string(),
        })?;
        let (_, step) = advance(&mut state, &losses, config)?;
        trace.push(step, &state);
    }
    Ok(trace)
}

pub fn traverse<F, E>(
    store: &CorpusStore,
    doc_id: usize,
    config: &SkipConfig,
    confidence_source: F,
) -> Result<TraversalTrace>
where
    F: FnMut(&TokenChunk) -> std::result::Result<Vec<f64>, E>,
    E: std::fmt::Display,
{
    let doc = store.document(doc_id)?;
    traverse_tokens(doc_id, &doc.tokens, config, confidence_source)
}

/// Mean skip distance over every step of every trace.
pub fn average_skips(traces: &[TraversalTrace]) -> Result<f64> {
    if traces.is_empty() {
        return Err(Error::EmptyTraces);
    }
    let steps: usize = traces.iter().map(|t| t.steps.len()).sum();
    if steps == 0 {
        return Ok(0.0);
    }
    let total: u64 = traces.iter().map(TraversalTrace::tokens_skipped).sum();
    Ok(total as f64 / steps as f64)
}
