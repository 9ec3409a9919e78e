use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use sha2::{Digest, Sha256};

use super::tokenizer::{tokenize_bytes, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::numerics::derived_rng;

/// A raw document: a file name and its bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub name: String,
    pub bytes: Vec<u8>,
}

/// Reads every regular file named in `paths`; directories are walked
/// recursively. Documents come back sorted by path.
pub fn load_documents(paths: &[PathBuf]) -> Result<Vec<Document>> {
    let mut files = Vec::new();
    for p in paths {
        collect_files(p, &mut files)?;
    }
    files.sort();
    files.dedup();
    if files.is_empty() {
        return Err(Error::config("training.corpus", "no corpus files found"));
    }
    files
        .into_iter()
        .map(|f| {
            Ok(Document {
                name: f.to_string_lossy().into_owned(),
                bytes: fs::read(&f)?,
            })
        })
        .collect()
}

fn collect_files(p: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let meta = fs::metadata(p).map_err(|e| {
        Error::config("training.corpus", format!("cannot read {}: {e}", p.display()))
    })?;
    if meta.is_dir() {
        for entry in fs::read_dir(p)? {
            collect_files(&entry?.path(), out)?;
        }
    } else if meta.is_file() {
        out.push(p.to_path_buf());
    }
    Ok(())
}

/// Concatenated token ids of several documents, each starting with BOS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenStream {
    pub corpus_id: String,
    tokens: Vec<u16>,
    /// Start offset of every document, ascending, first is 0.
    boundaries: Vec<usize>,
}

impl TokenStream {
    pub fn from_documents(docs: &[Document]) -> Self {
        let mut tokens = Vec::new();
        let mut boundaries = Vec::with_capacity(docs.len());
        let mut h = Sha256::new();
        for d in docs {
            boundaries.push(tokens.len());
            tokens.extend(tokenize_bytes(&d.bytes).into_iter().map(|t| t as u16));
            h.update(d.name.as_bytes());
            h.update((d.bytes.len() as u64).to_le_bytes());
            h.update(&d.bytes);
        }
        let corpus_id = h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect();
        Self {
            corpus_id,
            tokens,
            boundaries,
        }
    }

    pub fn from_text(text: &[u8]) -> Self {
        Self::from_documents(&[Document {
            name: "text".into(),
            bytes: text.to_vec(),
        }])
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[u16] {
        &self.tokens
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    pub fn num_documents(&self) -> usize {
        self.boundaries.len()
    }

    /// Token range of document `i`.
    pub fn document(&self, i: usize) -> std::ops::Range<usize> {
        let end = self.boundaries.get(i + 1).copied().unwrap_or(self.tokens.len());
        self.boundaries[i]..end
    }

    pub fn longest_document(&self) -> usize {
        (0..self.num_documents()).map(|i| self.document(i).len()).max().unwrap_or(0)
    }

    pub(crate) fn ids(&self, range: std::ops::Range<usize>) -> impl Iterator<Item = usize> + '_ {
        self.tokens[range].iter().map(|&t| t as usize)
    }

    /// Checks the stream invariants.
    pub fn validate(&self) -> Result<()> {
        if self.tokens.iter().any(|&t| t as usize >= VOCAB_SIZE) {
            return Err(Error::Contract("token id outside vocabulary".into()));
        }
        let sorted = self.boundaries.windows(2).all(|w| w[0] < w[1]);
        let in_range = self.boundaries.iter().all(|&b| b < self.tokens.len().max(1));
        if !sorted || !in_range || self.boundaries.first().is_some_and(|&b| b != 0) {
            return Err(Error::Contract("document boundaries out of order".into()));
        }
        Ok(())
    }
}

/// Train / validation / test streams split by document.
#[derive(Clone, Debug)]
pub struct CorpusSplits {
    pub train: TokenStream,
    pub val: TokenStream,
    pub test: TokenStream,
    /// Set when there were too few documents and single texts were cut by position.
    pub split_by_position: bool,
}

/// 90/5/5 split by document: after sorting by name, document `i` goes to
/// validation when `i % 20 == 18`, to test when `i % 20 == 19`, else to train.
/// With fewer than 20 documents every document is cut 90/5/5 by position.
pub fn split_documents(docs: &[Document]) -> CorpusSplits {
    if docs.len() < 20 {
        let mut parts: [Vec<Document>; 3] = Default::default();
        for d in docs {
            let n = d.bytes.len();
            let a = n * 90 / 100;
            let b = n * 95 / 100;
            for (k, r) in [(0, 0..a), (1, a..b), (2, b..n)] {
                parts[k].push(Document {
                    name: format!("{}#{k}", d.name),
                    bytes: d.bytes[r].to_vec(),
                });
            }
        }
        let [train, val, test] = parts;
        return CorpusSplits {
            train: TokenStream::from_documents(&train),
            val: TokenStream::from_documents(&val),
            test: TokenStream::from_documents(&test),
            split_by_position: true,
        };
    }
    let mut sorted: Vec<&Document> = docs.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    let pick = |k: usize| -> Vec<Document> {
        sorted
            .iter()
            .enumerate()
            .filter(|(i, _)| match k {
                1 => i % 20 == 18,
                2 => i % 20 == 19,
                _ => i % 20 < 18,
            })
            .map(|(_, d)| (*d).clone())
            .collect()
    };
    CorpusSplits {
        train: TokenStream::from_documents(&pick(0)),
        val: TokenStream::from_documents(&pick(1)),
        test: TokenStream::from_documents(&pick(2)),
        split_by_position: false,
    }
}

/// One `[rows × seq_len]` batch; `targets` is `inputs` shifted left by one.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub rows: usize,
    pub seq_len: usize,
    /// Windows came from the concatenated stream because no document was long enough.
    pub fallback: bool,
}

/// Draws windows of `seq_len + 1` tokens. Windows come from documents of at
/// least `min_doc_len` tokens when any exist, otherwise from the
/// concatenated stream.
#[derive(Clone, Debug)]
pub struct WindowSampler<'a> {
    stream: &'a TokenStream,
    window: usize,
    /// Cumulative number of window starts per eligible document.
    cum: Vec<(usize, usize)>,
    fallback: bool,
}

impl<'a> WindowSampler<'a> {
    pub fn new(stream: &'a TokenStream, seq_len: usize, min_doc_len: usize) -> Result<Self> {
        let window = seq_len + 1;
        if stream.len() < window {
            return Err(Error::InsufficientData {
                required: window,
                available: stream.len(),
            });
        }
        let need = min_doc_len.max(window);
        let mut cum = Vec::new();
        let mut total = 0;
        for i in 0..stream.num_documents() {
            let r = stream.document(i);
            if r.len() >= need {
                total += r.len() - window + 1;
                cum.push((total, r.start));
            }
        }
        let fallback = cum.is_empty();
        if fallback {
            cum.push((stream.len() - window + 1, 0));
        }
        Ok(Self {
            stream,
            window,
            cum,
            fallback,
        })
    }

    pub fn fallback(&self) -> bool {
        self.fallback
    }

    /// Number of distinct window starts.
    pub fn num_starts(&self) -> usize {
        self.cum.last().map_or(0, |c| c.0)
    }

    /// Stream offset of the `k`-th window start (`k < num_starts`).
    pub fn start_of(&self, k: usize) -> usize {
        let i = self.cum.partition_point(|c| c.0 <= k);
        let before = if i == 0 { 0 } else { self.cum[i - 1].0 };
        self.cum[i].1 + (k - before)
    }

    /// Window start of row `row` at `step`: a pure function of `(seed, step, row)`.
    pub fn draw(&self, seed: u64, step: u64, row: u64) -> usize {
        let mut rng = derived_rng(seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15), &format!("window/{row}"));
        self.start_of(rng.gen_range(0..self.num_starts()))
    }

    /// Rows `rows` of the batch for `(seed, step)`.
    pub fn batch(&self, seed: u64, step: u64, rows: std::ops::Range<usize>) -> Batch {
        let seq_len = self.window - 1;
        let n = rows.len();
        let mut inputs = Vec::with_capacity(n * seq_len);
        let mut targets = Vec::with_capacity(n * seq_len);
        for row in rows {
            let s = self.draw(seed, step, row as u64);
            inputs.extend(self.stream.ids(s..s + seq_len));
            targets.extend(self.stream.ids(s + 1..s + seq_len + 1));
        }
        Batch {
            inputs,
            targets,
            rows: n,
            seq_len,
            fallback: self.fallback,
        }
    }
}

/// Deterministic batch for `(seed, step)`.
pub fn batch_sampler(
    stream: &TokenStream,
    seq_len: usize,
    batch: usize,
    seed: u64,
    step: u64,
    min_doc_len: usize,
) -> Result<Batch> {
    Ok(WindowSampler::new(stream, seq_len, min_doc_len)?.batch(seed, step, 0..batch))
}
