//! Query and metadata text: normalization, word-level vocabulary and the
//! CLS-pooled transformer text encoder.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;

use crate::audio::positional_encoding;
use crate::error::{Error, Result};
use crate::nn::{Linear, SeqLayout, TransformerStack, EncoderLayerCache};
use crate::tensor::{Module, Parameter, Tensor2D};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
const RESERVED: [&str; 3] = ["[PAD]", "[UNK]", "[CLS]"];

/// Content tokens kept after truncation; CLS is not counted.
pub const MAX_CONTENT_TOKENS: usize = 32;

/// Lowercases, drops everything but letters, digits and whitespace, and
/// collapses whitespace runs.
pub fn preprocess_text(raw: &str) -> String {
    let kept: String = raw
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect();
    kept.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Word-level vocabulary. Ids `0..3` are reserved for PAD, UNK and CLS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_tokens(std::iter::empty::<String>())
    }
}

impl Vocabulary {
    /// Builds a vocabulary from already preprocessed texts. Words are assigned
    /// ids in sorted order so the result does not depend on text order.
    pub fn build<I, S>(texts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut words = BTreeSet::new();
        for t in texts {
            for w in t.as_ref().split_whitespace() {
                words.insert(w.to_string());
            }
        }
        Self::from_tokens(words)
    }

    /// Reserved tokens followed by `tokens` in the given order; duplicates and
    /// reserved names are skipped.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for r in RESERVED {
            v.push(r.to_string());
        }
        for t in tokens {
            v.push(t.into());
        }
        v
    }

    fn push(&mut self, token: String) {
        if !self.index.contains_key(&token) {
            self.index.insert(token.clone(), self.tokens.len());
            self.tokens.push(token);
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == RESERVED.len()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for t in &self.tokens {
            writeln!(f, "{t}")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut lines = Vec::new();
        for line in f.lines() {
            lines.push(line?);
        }
        for (i, r) in RESERVED.iter().enumerate() {
            if lines.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::Load {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("expected reserved token {r}"),
                });
            }
        }
        let v = Self::from_tokens(lines.into_iter().skip(RESERVED.len()));
        Ok(v)
    }
}

/// Token ids starting with CLS, optionally followed by trailing PADs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<usize>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        if ids.first() != Some(&CLS) {
            return Err(Error::Config("token sequence must start with CLS".into()));
        }
        if let Some(first_pad) = ids.iter().position(|&i| i == PAD) {
            if ids[first_pad..].iter().any(|&i| i != PAD) {
                return Err(Error::Config("PAD may only appear at the end of a sequence".into()));
            }
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// A copy with `n` PAD tokens appended.
    pub fn padded(&self, n: usize) -> Self {
        let mut ids = self.ids.clone();
        ids.extend(std::iter::repeat_n(PAD, n));
        Self { ids }
    }
}

/// Maps whitespace-separated words of already cleaned text through the
/// vocabulary, keeping the first 32 and prepending CLS.
pub fn tokenize(clean: &str, vocab: &Vocabulary) -> TokenSequence {
    let ids = std::iter::once(CLS)
        .chain(clean.split_whitespace().take(MAX_CONTENT_TOKENS).map(|w| vocab.id(w)))
        .collect();
    TokenSequence { ids }
}

/// Shape of a transformer block shared by all encoders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BlockShape {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub ff_hidden: usize,
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub token_embedding: Parameter,
    pub stack: TransformerStack,
    pub projection: Linear,
}

#[derive(Debug, Clone)]
pub struct TextCache {
    ids: Vec<usize>,
    seq_len: usize,
    layers: Vec<EncoderLayerCache>,
    cls: Tensor2D,
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(name: &str, vocab_size: usize, shape: BlockShape, rng: &mut R) -> Result<Self> {
        if shape.width % 2 != 0 {
            return Err(Error::Config(format!("text width must be even, got {}", shape.width)));
        }
        Ok(Self {
            token_embedding: Parameter::new(
                format!("{name}.embedding"),
                Tensor2D::randn(vocab_size, shape.width, 1.0, rng),
            ),
            stack: TransformerStack::new(name, shape.depth, shape.width, shape.heads, shape.ff_hidden, rng)?,
            projection: Linear::new(&format!("{name}.proj"), shape.width, shape.width, rng),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.token_embedding.value.rows()
    }

    pub fn width(&self) -> usize {
        self.token_embedding.value.cols()
    }

    /// Encodes a batch of sequences, padding to the longest; returns one
    /// retrieval-space row per sequence.
    pub fn forward(&self, batch: &[&TokenSequence]) -> Result<(Tensor2D, TextCache)> {
        let d = self.width();
        let v = self.vocab_size();
        let n = batch.iter().map(|s| s.len()).max().unwrap_or(0);
        let pe = positional_encoding(n, d)?;
        let mut x = Tensor2D::zeros(batch.len() * n, d);
        let mut ids = Vec::with_capacity(batch.len() * n);
        let mut valid = Vec::with_capacity(batch.len() * n);
        for (b, seq) in batch.iter().enumerate() {
            for p in 0..n {
                let id = seq.ids.get(p).copied().unwrap_or(PAD);
                if id >= v {
                    return Err(Error::Vocabulary { id, size: v });
                }
                let row = x.row_mut(b * n + p);
                row.copy_from_slice(self.token_embedding.value.row(id));
                for (o, e) in row.iter_mut().zip(pe.row(p)) {
                    *o += e;
                }
                ids.push(id);
                valid.push(id != PAD);
            }
        }
        let layout = SeqLayout { seq_len: n, valid };
        let (h, layers) = self.stack.forward(&x, &layout)?;
        let cls_rows: Vec<usize> = (0..batch.len()).map(|b| b * n).collect();
        let cls = h.select_rows(&cls_rows);
        let out = self.projection.forward(&cls)?;
        Ok((
            out,
            TextCache {
                ids,
                seq_len: n,
                layers,
                cls,
            },
        ))
    }

    pub fn backward(&mut self, cache: &TextCache, d_out: &Tensor2D) {
        let d = self.width();
        let d_cls = self.projection.backward(&cache.cls, d_out);
        let mut dh = Tensor2D::zeros(cache.ids.len(), d);
        for b in 0..d_cls.rows() {
            dh.row_mut(b * cache.seq_len).copy_from_slice(d_cls.row(b));
        }
        let dx = self.stack.backward(&cache.layers, &dh);
        for (r, &id) in cache.ids.iter().enumerate() {
            if id == PAD {
                continue;
            }
            let g = self.token_embedding.grad.row_mut(id);
            for (a, b) in g.iter_mut().zip(dx.row(r)) {
                *a += b;
            }
        }
    }
}

impl Module for TextEncoder {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        f(&self.token_embedding);
        self.stack.visit_params(f);
        self.projection.visit_params(f);
    }

    fn visit_params_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Parameter)) {
        f(&mut self.token_embedding);
        self.stack.visit_params_mut(f);
        self.projection.visit_params_mut(f);
    }
}

/// Encodes one sequence into a `1×d` retrieval-space vector.
pub fn encode_text(seq: &TokenSequence, params: &TextEncoder) -> Result<Tensor2D> {
    Ok(params.forward(&[seq])?.0)
}
