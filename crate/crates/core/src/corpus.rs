//! Byte-level tokenization, long-document ingestion and windowed access.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 256;
pub const BOS: TokenId = 257;
pub const EOS: TokenId = 258;
pub const SEP: TokenId = 259;
pub const VOCAB_SIZE: usize = 260;
pub const DEFAULT_MIN_TOKENS: usize = 4000;

/// One byte, one token. Offsets into a document are byte offsets.
pub fn tokenize(text: &str) -> Vec<TokenId> {
    text.bytes().map(TokenId::from).collect()
}

/// Inverse of [`tokenize`]. Special ids are dropped; invalid UTF-8 is replaced.
pub fn detokenize(tokens: &[TokenId]) -> String {
    let bytes: Vec<u8> = tokens
        .iter()
        .filter(|&&t| t < 256)
        .map(|&t| t as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub id: usize,
    pub tokens: Vec<TokenId>,
    /// Byte offset of the record's line in the source file.
    pub source_offset: u64,
}

impl Document {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenChunk {
    pub doc_id: usize,
    pub offset: usize,
    pub tokens: Vec<TokenId>,
    /// Fewer tokens than requested remained in the document.
    pub partial: bool,
}

impl TokenChunk {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct CorpusStore {
    documents: Vec<Document>,
    vocab_size: usize,
    min_tokens: usize,
    dropped: usize,
}

#[derive(Deserialize)]
struct TextRecord {
    text: String,
}

impl CorpusStore {
    /// Builds a store from in-memory texts with the same filter as [`ingest`].
    pub fn from_texts<S: AsRef<str>>(texts: &[S], min_tokens: usize) -> Result<Self> {
        let mut builder = Builder::new(min_tokens);
        for text in texts {
            builder.push(tokenize(text.as_ref()), 0);
        }
        builder.finish()
    }

    /// Builds a store directly from token sequences. Ids must be in-vocabulary.
    pub fn from_token_docs(docs: Vec<Vec<TokenId>>, min_tokens: usize) -> Result<Self> {
        let mut builder = Builder::new(min_tokens);
        for tokens in docs {
            if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= VOCAB_SIZE) {
                return Err(Error::VocabOverflow {
                    token: bad,
                    vocab: VOCAB_SIZE,
                });
            }
            builder.push(tokens, 0);
        }
        builder.finish()
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn document(&self, doc_id: usize) -> Result<&Document> {
        self.documents.get(doc_id).ok_or(Error::DocOutOfRange {
            doc_id,
            len: self.documents.len(),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn min_tokens(&self) -> usize {
        self.min_tokens
    }

    /// Records rejected by the length filter.
    pub fn dropped(&self) -> usize {
        self.dropped
    }

    pub fn total_tokens(&self) -> usize {
        self.documents.iter().map(Document::len).sum()
    }

    /// Seeded permutation of document ids.
    pub fn order(&self, seed: u64) -> Vec<usize> {
        let mut ids: Vec<usize> = (0..self.documents.len()).collect();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        ids
    }
}

struct Builder {
    documents: Vec<Document>,
    min_tokens: usize,
    dropped: usize,
}

impl Builder {
    fn new(min_tokens: usize) -> Self {
        Self {
            documents: Vec::new(),
            min_tokens,
            dropped: 0,
        }
    }

    fn push(&mut self, tokens: Vec<TokenId>, source_offset: u64) {
        if tokens.len() < self.min_tokens {
            self.dropped += 1;
            return;
        }
        let id = self.documents.len();
        self.documents.push(Document {
            id,
            tokens,
            source_offset,
        });
    }

    fn finish(self) -> Result<CorpusStore> {
        if self.documents.is_empty() {
            return Err(Error::NoDocuments {
                min_tokens: self.min_tokens,
                dropped: self.dropped,
            });
        }
        Ok(CorpusStore {
            documents: self.documents,
            vocab_size: VOCAB_SIZE,
            min_tokens: self.min_tokens,
            dropped: self.dropped,
        })
    }
}

/// Reads a JSON-lines file of `{"text": ...}` records, keeping documents with
/// at least `min_tokens` tokens. Blank lines are ignored.
pub fn ingest(path: impl AsRef<Path>, min_tokens: usize) -> Result<CorpusStore> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut builder = Builder::new(min_tokens);
    let mut line = String::new();
    let mut offset = 0u64;
    let mut line_no = 0usize;
    loop {
        line.clear();
        let n = match reader.read_line(&mut line) {
            Ok(n) => n,
            Err(e) if e.kind() == std::io::ErrorKind::InvalidData => {
                return Err(Error::MalformedLine {
                    line: line_no + 1,
                    reason: "invalid UTF-8".into(),
                })
            }
            Err(e) => return Err(Error::io(path, e)),
        };
        if n == 0 {
            break;
        }
        line_no += 1;
        let start = offset;
        offset += n as u64;
        if line.trim().is_empty() {
            continue;
        }
        let record: TextRecord =
            serde_json::from_str(line.trim_end()).map_err(|e| Error::MalformedLine {
                line: line_no,
                reason: e.to_string(),
            })?;
        builder.push(tokenize(&record.text), start);
    }
    builder.finish()
}

/// Up to `len` tokens of document `doc_id` starting at `offset`.
pub fn fetch_chunk(store: &CorpusStore, doc_id: usize, offset: usize, len: usize) -> Result<TokenChunk> {
    let doc = store.document(doc_id)?;
    chunk_of(doc_id, &doc.tokens, offset, len)
}

pub(crate) fn chunk_of(doc_id: usize, tokens: &[TokenId], offset: usize, len: usize) -> Result<TokenChunk> {
    if offset >= tokens.len() {
        return Err(Error::OffsetOutOfRange {
            offset,
            doc_len: tokens.len(),
        });
    }
    let remaining = tokens.len() - offset;
    let take = remaining.min(len);
    Ok(TokenChunk {
        doc_id,
        offset,
        tokens: tokens[offset..offset + take].to_vec(),
        partial: remaining < len,
    })
}

/// Consecutive `len`-sized chunks of the EOS-joined corpus, in file order.
/// The trailing remainder shorter than `len` is dropped.
pub fn sequential_short_chunks(store: &CorpusStore, len: usize) -> Result<Vec<TokenChunk>> {
    if len < 2 {
        return Err(Error::Config(format!("short chunk length must be >= 2, got {len}")));
    }
    let mut stream = Vec::with_capacity(store.total_tokens() + store.len());
    let mut owner = Vec::with_capacity(stream.capacity());
    for doc in store.documents() {
        stream.extend_from_slice(&doc.tokens);
        stream.push(EOS);
        owner.extend(std::iter::repeat_n(doc.id, doc.len() + 1));
    }
    Ok(stream
        .chunks_exact(len)
        .enumerate()
        .map(|(i, toks)| TokenChunk {
            doc_id: owner[i * len],
            offset: i * len,
            tokens: toks.to_vec(),
            partial: false,
        })
        .collect())
}

/// The short-text pipeline: concatenate, chunk, then shuffle with `seed`.
/// Chunk offsets refer to the concatenated stream.
pub fn shuffled_short_chunks(
    store: &CorpusStore,
    len: usize,
    seed: u64,
) -> Result<std::vec::IntoIter<TokenChunk>> {
    let mut chunks = sequential_short_chunks(store, len)?;
    chunks.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(chunks.into_iter())
}
