use serde::{Deserialize, Serialize};

use crate::corpus::CorpusStore;
use crate::dataserver::SkipConfig;
use crate::error::{Error, Result};
use crate::memory::MemoryConfig;
use crate::model::Params;
use crate::par::{self, Execution};

use super::read::{read_item, ReadItem};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub ppl: f64,
    pub nll: f64,
    pub predicted: usize,
    pub documents: usize,
}

/// Perplexity with skipping disabled: every document is read in consecutive
/// `window`-token windows. Documents are independent and may run in parallel;
/// their sums are combined in document order.
pub fn eval_ppl(
    params: &Params<f32>,
    memory: &MemoryConfig,
    store: &CorpusStore,
    window: usize,
    exec: Execution,
) -> Result<EvalResult> {
    if store.is_empty() {
        return Err(Error::EmptyEval);
    }
    let skip = SkipConfig::sequential(window);
    let per_doc = par::map(exec, store.documents(), |doc| {
        read_item(params, memory, &ReadItem::text(doc.id, &doc.tokens), &skip).map(|r| (r.nll, r.predicted))
    });
    let (mut nll, mut predicted) = (0f64, 0usize);
    for r in per_doc {
        let (n, p) = r?;
        nll += n;
        predicted += p;
    }
    if predicted == 0 {
        return Err(Error::EmptyEval);
    }
    Ok(EvalResult {
        ppl: (nll / predicted as f64).exp(),
        nll,
        predicted,
        documents: store.len(),
    })
}
