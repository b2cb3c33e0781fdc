//! The hybrid retrieval model: query encoder, item encoders and fusion head.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{AudioCache, AudioEncoder};
use crate::error::{Error, Result};
use crate::fusion::{ItemTokens, ItemTokensCache, MidFusion, QueryViews, QueryViewsCache, ScoreCache};
use crate::similarity::{cosine_backward, cosine_forward, normalize_rows, normalize_rows_backward, CosineCache};
use crate::tensor::{Module, Parameter, Tensor2D};
use crate::text::{preprocess_text, tokenize, BlockShape, TextCache, TextEncoder, TokenSequence, Vocabulary};

/// How an item is represented in the retrieval space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Audio only.
    Content,
    /// Metadata text only.
    Metadata,
    /// Sum of audio and metadata embeddings.
    Late,
    /// Joint transformer with query-conditioned matching.
    Mid,
}

impl FusionMode {
    pub const ALL: [FusionMode; 4] = [Self::Content, Self::Metadata, Self::Late, Self::Mid];

    pub fn uses_audio(self) -> bool {
        self != Self::Metadata
    }

    pub fn uses_metadata(self) -> bool {
        self != Self::Content
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Content => "content",
            Self::Metadata => "metadata",
            Self::Late => "late",
            Self::Mid => "mid",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "content" => Ok(Self::Content),
            "metadata" => Ok(Self::Metadata),
            "late" => Ok(Self::Late),
            "mid" => Ok(Self::Mid),
            other => Err(Error::Config(format!(
                "mode: expected content|metadata|late|mid, got `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub mode: FusionMode,
    pub width: usize,
    pub heads: usize,
    pub text_depth: usize,
    pub audio_depth: usize,
    pub fusion_depth: usize,
    pub ff_mult: usize,
    pub frame_width: usize,
    pub shared_text_encoder: bool,
    /// Unit-normalize audio and metadata embeddings before late fusion.
    pub late_unit_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mode: FusionMode::Late,
            width: 64,
            heads: 4,
            text_depth: 2,
            audio_depth: 2,
            fusion_depth: 2,
            ff_mult: 4,
            frame_width: 32,
            shared_text_encoder: true,
            late_unit_norm: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.width % 2 != 0 {
            return Err(Error::Config(format!("width: must be even and positive, got {}", self.width)));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads: width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.ff_mult == 0 {
            return Err(Error::Config("ff_mult: must be positive".into()));
        }
        if self.frame_width == 0 {
            return Err(Error::Config("frame_width: must be positive".into()));
        }
        Ok(())
    }

    fn block(&self, depth: usize) -> BlockShape {
        BlockShape {
            width: self.width,
            depth,
            heads: self.heads,
            ff_hidden: self.ff_mult * self.width,
        }
    }
}

/// A training batch of aligned (query, item) pairs; pair `i` is the positive
/// for row/column `i` of the score matrix.
#[derive(Debug, Clone, Default)]
pub struct PairBatch {
    pub queries: Vec<TokenSequence>,
    pub frames: Vec<Tensor2D>,
    pub metadata: Vec<TokenSequence>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

/// Forward state needed to back-propagate a batch score matrix.
#[derive(Debug)]
pub struct BatchCache {
    query: TextCache,
    item: ItemCache,
}

#[derive(Debug)]
enum ItemCache {
    Cosine {
        cos: CosineCache,
        audio: Option<AudioCache>,
        meta: Option<TextCache>,
        /// Unit-normalized summands when late fusion normalizes them.
        late_units: Option<(Tensor2D, Vec<f64>, Tensor2D, Vec<f64>)>,
    },
    Mid {
        audio: AudioCache,
        meta: TextCache,
        tokens: ItemTokensCache,
        views: QueryViewsCache,
        scores: ScoreCache,
    },
}

/// An item as stored in a retrieval index.
#[derive(Debug, Clone, PartialEq)]
pub enum ItemRepr {
    Vector(Tensor2D),
    Mid {
        /// `(T+1)×d` transformed audio sequence, global token last.
        sequence: Tensor2D,
        meta: Tensor2D,
        tokens: ItemTokens,
    },
}

/// A query ready for scoring.
#[derive(Debug, Clone)]
pub enum QueryRepr {
    Vector(Tensor2D),
    Mid { embedding: Tensor2D, views: QueryViews },
}

#[derive(Debug, Clone)]
pub struct HybridModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub text: TextEncoder,
    pub meta_text: Option<TextEncoder>,
    pub audio: Option<AudioEncoder>,
    pub mid: Option<MidFusion>,
}

impl HybridModel {
    /// Initializes every component the mode needs from a seeded generator.
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mode = config.mode;
        let text = TextEncoder::new("text", vocab.len(), config.block(config.text_depth), &mut rng)?;
        let meta_text = if mode.uses_metadata() && !config.shared_text_encoder {
            Some(TextEncoder::new("meta_text", vocab.len(), config.block(config.text_depth), &mut rng)?)
        } else {
            None
        };
        let audio = if mode.uses_audio() {
            Some(AudioEncoder::new("audio", config.frame_width, config.block(config.audio_depth), &mut rng)?)
        } else {
            None
        };
        let mid = if mode == FusionMode::Mid {
            Some(MidFusion::new("fusion", config.block(config.fusion_depth), &mut rng)?)
        } else {
            None
        };
        Ok(Self {
            config,
            vocab,
            text,
            meta_text,
            audio,
            mid,
        })
    }

    pub fn mode(&self) -> FusionMode {
        self.config.mode
    }

    /// Number of distinct text-encoder parameter sets.
    pub fn text_encoder_count(&self) -> usize {
        1 + usize::from(self.meta_text.is_some())
    }

    pub fn meta_encoder(&self) -> &TextEncoder {
        self.meta_text.as_ref().unwrap_or(&self.text)
    }

    fn audio_encoder(&self) -> Result<&AudioEncoder> {
        self.audio
            .as_ref()
            .ok_or_else(|| Error::Config(format!("mode {} has no audio encoder", self.mode())))
    }

    fn mid_head(&self) -> Result<&MidFusion> {
        self.mid
            .as_ref()
            .ok_or_else(|| Error::Config(format!("mode {} has no mid-fusion head", self.mode())))
    }

    /// Cleans and tokenizes raw text with this model's vocabulary.
    pub fn tokenize(&self, raw: &str) -> TokenSequence {
        tokenize(&preprocess_text(raw), &self.vocab)
    }

    /// `Bq × Bi` score matrix: rows are queries, columns are items.
    pub fn forward_batch(&self, batch: &PairBatch) -> Result<(Tensor2D, BatchCache)> {
        let queries: Vec<&TokenSequence> = batch.queries.iter().collect();
        let (q, query) = self.text.forward(&queries)?;
        let frames: Vec<&Tensor2D> = batch.frames.iter().collect();
        let metas: Vec<&TokenSequence> = batch.metadata.iter().collect();
        let mode = self.mode();
        if mode == FusionMode::Mid {
            let mid = self.mid_head()?;
            let (audio_out, audio) = self.audio_encoder()?.forward(&frames)?;
            let (meta_emb, meta) = self.meta_encoder().forward(&metas)?;
            let (tokens_out, tokens) = mid.item_tokens(&audio_out, &meta_emb)?;
            let (views_out, views) = mid.query_views(&q)?;
            let (s, scores) = MidFusion::score_matrix(&views_out, &tokens_out)?;
            return Ok((
                s,
                BatchCache {
                    query,
                    item: ItemCache::Mid {
                        audio,
                        meta,
                        tokens,
                        views,
                        scores,
                    },
                },
            ));
        }
        let (audio_emb, audio) = if mode.uses_audio() {
            let (out, cache) = self.audio_encoder()?.forward(&frames)?;
            (Some(out.pooled), Some(cache))
        } else {
            (None, None)
        };
        let (meta_emb, meta) = if mode.uses_metadata() {
            let (out, cache) = self.meta_encoder().forward(&metas)?;
            (Some(out), Some(cache))
        } else {
            (None, None)
        };
        let mut late_units = None;
        let items = match (audio_emb, meta_emb) {
            (Some(a), None) => a,
            (None, Some(m)) => m,
            (Some(a), Some(m)) if self.config.late_unit_norm => {
                let (au, an) = normalize_rows(&a)?;
                let (mu, mn) = normalize_rows(&m)?;
                let sum = au.add(&mu)?;
                late_units = Some((au, an, mu, mn));
                sum
            }
            (Some(a), Some(m)) => crate::fusion::late_fuse(&a, &m)?,
            (None, None) => unreachable!("every mode uses audio or metadata"),
        };
        let (s, cos) = cosine_forward(&q, &items)?;
        Ok((
            s,
            BatchCache {
                query,
                item: ItemCache::Cosine {
                    cos,
                    audio,
                    meta,
                    late_units,
                },
            },
        ))
    }

    /// Accumulates parameter gradients for `dL/dS`.
    pub fn backward_batch(&mut self, cache: &BatchCache, d_scores: &Tensor2D) {
        match &cache.item {
            ItemCache::Cosine {
                cos,
                audio,
                meta,
                late_units,
            } => {
                let (dq, d_items) = cosine_backward(cos, d_scores);
                self.text.backward(&cache.query, &dq);
                let (d_audio, d_meta) = match late_units {
                    Some((au, an, mu, mn)) => (
                        normalize_rows_backward(au, an, &d_items),
                        normalize_rows_backward(mu, mn, &d_items),
                    ),
                    None => (d_items.clone(), d_items),
                };
                if let (Some(c), Some(enc)) = (audio, self.audio.as_mut()) {
                    enc.backward(c, Some(&d_audio), None);
                }
                if let Some(c) = meta {
                    self.meta_encoder_mut().backward(c, &d_meta);
                }
            }
            ItemCache::Mid {
                audio,
                meta,
                tokens,
                views,
                scores,
            } => {
                let grads = MidFusion::score_matrix_backward(scores, d_scores);
                let mid = self.mid.as_mut().expect("mid cache implies mid head");
                let dq = mid.query_views_backward(views, &grads.query_audio, &grads.query_meta, &grads.weights);
                let (d_seq, d_meta) = mid.item_tokens_backward(tokens, &grads.item_audio, &grads.item_meta);
                self.text.backward(&cache.query, &dq);
                self.audio
                    .as_mut()
                    .expect("mid mode has an audio encoder")
                    .backward(audio, None, Some(&d_seq));
                self.meta_encoder_mut().backward(meta, &d_meta);
            }
        }
    }

    fn meta_encoder_mut(&mut self) -> &mut TextEncoder {
        match self.meta_text.as_mut() {
            Some(m) => m,
            None => &mut self.text,
        }
    }

    /// Embeds one item for indexing. Modes that ignore audio accept `None`.
    pub fn item_representation(&self, frames: Option<&Tensor2D>, meta: &TokenSequence) -> Result<ItemRepr> {
        let mode = self.mode();
        let audio = if mode.uses_audio() {
            let f = frames.ok_or_else(|| Error::Ingest(format!("mode {mode} needs audio frames")))?;
            if f.rows() == 0 {
                return Err(Error::Ingest(format!("mode {mode} needs a non-empty frame sequence")));
            }
            Some(self.audio_encoder()?.forward(&[f])?.0)
        } else {
            None
        };
        let meta_emb = if mode.uses_metadata() {
            Some(self.meta_encoder().forward(&[meta])?.0)
        } else {
            None
        };
        Ok(match (mode, audio, meta_emb) {
            (FusionMode::Mid, Some(a), Some(m)) => {
                let (tokens, _) = self.mid_head()?.item_tokens(&a, &m)?;
                ItemRepr::Mid {
                    sequence: a.sequence(0),
                    meta: m,
                    tokens,
                }
            }
            (_, Some(a), None) => ItemRepr::Vector(a.pooled),
            (_, None, Some(m)) => ItemRepr::Vector(m),
            (_, Some(a), Some(m)) if self.config.late_unit_norm => {
                ItemRepr::Vector(normalize_rows(&a.pooled)?.0.add(&normalize_rows(&m)?.0)?)
            }
            (_, Some(a), Some(m)) => ItemRepr::Vector(crate::fusion::late_fuse(&a.pooled, &m)?),
            (_, None, None) => unreachable!("every mode uses audio or metadata"),
        })
    }

    pub fn query_representation(&self, seq: &TokenSequence) -> Result<QueryRepr> {
        let q = self.text.forward(&[seq])?.0;
        if self.mode() == FusionMode::Mid {
            let (views, _) = self.mid_head()?.query_views(&q)?;
            Ok(QueryRepr::Mid { embedding: q, views })
        } else {
            Ok(QueryRepr::Vector(q))
        }
    }

    /// Similarity of one query and one item: cosine, or the mid-fusion score
    /// computed from the cached fused tokens.
    pub fn score(&self, query: &QueryRepr, item: &ItemRepr) -> Result<f64> {
        match (query, item) {
            (QueryRepr::Vector(q), ItemRepr::Vector(v)) => Ok(cosine_forward(q, v)?.0.get(0, 0)),
            (QueryRepr::Mid { views, .. }, ItemRepr::Mid { tokens, .. }) => {
                Ok(MidFusion::score_matrix(views, tokens)?.0.get(0, 0))
            }
            _ => Err(Error::Config("query and item representations come from different modes".into())),
        }
    }

    /// Mid-fusion score recomputed from the raw cached sequence, re-running
    /// the joint transformer. Equals [`HybridModel::score`] bit for bit.
    pub fn score_reference(&self, query: &QueryRepr, item: &ItemRepr) -> Result<f64> {
        match (query, item) {
            (QueryRepr::Mid { embedding, .. }, ItemRepr::Mid { sequence, meta, .. }) => {
                crate::fusion::mid_fuse_score(sequence, meta, embedding, self.mid_head()?)
            }
            _ => self.score(query, item),
        }
    }
}

impl Module for HybridModel {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.text.visit_params(f);
        if let Some(m) = &self.meta_text {
            m.visit_params(f);
        }
        if let Some(a) = &self.audio {
            a.visit_params(f);
        }
        if let Some(m) = &self.mid {
            m.visit_params(f);
        }
    }

    fn visit_params_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Parameter)) {
        self.text.visit_params_mut(f);
        if let Some(m) = &mut self.meta_text {
            m.visit_params_mut(f);
        }
        if let Some(a) = &mut self.audio {
            a.visit_params_mut(f);
        }
        if let Some(m) = &mut self.mid {
            m.visit_params_mut(f);
        }
    }
}
