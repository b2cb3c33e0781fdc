//! Combining audio and metadata into an item representation.
//!
//! Late fusion sums the two retrieval-space vectors. Mid-level fusion appends
//! the metadata vector to the transformed audio sequence, runs a joint
//! transformer, and matches the resulting audio and metadata tokens against
//! two query-specific views produced by gated embedding units; the two cosine
//! scores are mixed with query-dependent weights.

use rand::Rng;

use crate::audio::AudioOutput;
use crate::error::{Error, Result};
use crate::nn::{sigmoid, softmax_rows, softmax_rows_backward, EncoderLayerCache, Linear, SeqLayout, TransformerStack};
use crate::similarity::{cosine_backward, cosine_forward, normalize_rows_backward, CosineCache};
use crate::tensor::{Module, Parameter, Tensor2D};
use crate::text::BlockShape;

/// Elementwise sum of audio and metadata embeddings (row-wise for batches).
pub fn late_fuse(audio: &Tensor2D, meta: &Tensor2D) -> Result<Tensor2D> {
    if audio.shape() != meta.shape() {
        return Err(Error::Dimension {
            op: "late_fuse",
            left: audio.shape(),
            right: meta.shape(),
        });
    }
    audio.add(meta)
}

/// `z₁ = q·W₁ + b₁`, `z = z₁ ⊙ σ(z₁·W₂ + b₂)`, output `z/‖z‖`.
#[derive(Debug, Clone)]
pub struct GatedEmbedding {
    pub first: Linear,
    pub gate: Linear,
}

#[derive(Debug, Clone)]
pub struct GatedCache {
    q: Tensor2D,
    z1: Tensor2D,
    g: Tensor2D,
    unit: Tensor2D,
    norms: Vec<f64>,
}

impl GatedEmbedding {
    pub fn new<R: Rng + ?Sized>(name: &str, width: usize, rng: &mut R) -> Self {
        Self {
            first: Linear::new(&format!("{name}.first"), width, width, rng),
            gate: Linear::new(&format!("{name}.gate"), width, width, rng),
        }
    }

    /// Identity first projection and an all-zero gate, so the unit starts as
    /// plain row normalization of its input.
    pub fn identity(name: &str, width: usize) -> Self {
        let linear = |n: &str, w: Tensor2D| {
            Linear::from_parts(&format!("{name}.{n}"), w, Tensor2D::zeros(1, width)).expect("square weight")
        };
        Self {
            first: linear("first", Tensor2D::identity(width)),
            gate: linear("gate", Tensor2D::zeros(width, width)),
        }
    }

    pub fn forward(&self, q: &Tensor2D) -> Result<(Tensor2D, GatedCache)> {
        let z1 = self.first.forward(q)?;
        let g = self.gate.forward(&z1)?.map(sigmoid);
        let mut unit = z1.clone();
        for (u, gg) in unit.data_mut().iter_mut().zip(g.data()) {
            *u *= gg;
        }
        let mut norms = Vec::with_capacity(unit.rows());
        for r in 0..unit.rows() {
            let row = unit.row_mut(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::DegenerateGate { row: r });
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        Ok((
            unit.clone(),
            GatedCache {
                q: q.clone(),
                z1,
                g,
                unit,
                norms,
            },
        ))
    }

    pub fn backward(&mut self, cache: &GatedCache, d_out: &Tensor2D) -> Tensor2D {
        let dz = normalize_rows_backward(&cache.unit, &cache.norms, d_out);
        // dz1 = dz ⊙ g + (dz ⊙ z1 ⊙ g(1−g))·W₂ᵀ
        let mut du = dz.clone();
        for ((u, z1), g) in du.data_mut().iter_mut().zip(cache.z1.data()).zip(cache.g.data()) {
            *u *= z1 * g * (1.0 - g);
        }
        let mut dz1 = self.gate.backward(&cache.z1, &du);
        for ((o, d), g) in dz1.data_mut().iter_mut().zip(dz.data()).zip(cache.g.data()) {
            *o += d * g;
        }
        self.first.backward(&cache.q, &dz1)
    }
}

impl Module for GatedEmbedding {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.first.visit_params(f);
        self.gate.visit_params(f);
    }

    fn visit_params_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Parameter)) {
        self.first.visit_params_mut(f);
        self.gate.visit_params_mut(f);
    }
}

pub fn gated_embedding(q: &Tensor2D, params: &GatedEmbedding) -> Result<Tensor2D> {
    Ok(params.forward(q)?.0)
}

/// The mid-level fusion head.
#[derive(Debug, Clone)]
pub struct MidFusion {
    pub stack: TransformerStack,
    pub gem_audio: GatedEmbedding,
    pub gem_meta: GatedEmbedding,
    pub modality_weights: Linear,
}

/// Query-side views: two gated unit vectors and the modality weights.
#[derive(Debug, Clone)]
pub struct QueryViews {
    pub audio: Tensor2D,
    pub meta: Tensor2D,
    /// `B × 2` softmax weights `(w_audio, w_meta)`.
    pub weights: Tensor2D,
}

#[derive(Debug, Clone)]
pub struct QueryViewsCache {
    q: Tensor2D,
    audio: GatedCache,
    meta: GatedCache,
    weights: Tensor2D,
}

/// Transformed global-audio and metadata tokens per item.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemTokens {
    pub audio: Tensor2D,
    pub meta: Tensor2D,
}

#[derive(Debug, Clone)]
pub struct ItemTokensCache {
    audio_counts: Vec<usize>,
    audio_seq_len: usize,
    joint_len: usize,
    layers: Vec<EncoderLayerCache>,
}

#[derive(Debug, Clone)]
pub struct ScoreCache {
    audio_cos: Tensor2D,
    meta_cos: Tensor2D,
    audio_cache: CosineCache,
    meta_cache: CosineCache,
    weights: Tensor2D,
}

/// Gradients of a mid-fusion score matrix.
#[derive(Debug, Clone)]
pub struct ScoreGrads {
    pub query_audio: Tensor2D,
    pub query_meta: Tensor2D,
    pub weights: Tensor2D,
    pub item_audio: Tensor2D,
    pub item_meta: Tensor2D,
}

impl MidFusion {
    pub fn new<R: Rng + ?Sized>(name: &str, shape: BlockShape, rng: &mut R) -> Result<Self> {
        let d = shape.width;
        Ok(Self {
            stack: TransformerStack::new(name, shape.depth, d, shape.heads, shape.ff_hidden, rng)?,
            gem_audio: GatedEmbedding::identity(&format!("{name}.gem_audio"), d),
            gem_meta: GatedEmbedding::identity(&format!("{name}.gem_meta"), d),
            modality_weights: Linear::new(&format!("{name}.weights"), d, 2, rng),
        })
    }

    pub fn width(&self) -> usize {
        self.modality_weights.input_dim()
    }

    /// Softmax over the two modality logits, one row per query.
    pub fn modality_weights_forward(&self, q: &Tensor2D) -> Result<Tensor2D> {
        Ok(softmax_rows(&self.modality_weights.forward(q)?))
    }

    pub fn query_views(&self, q: &Tensor2D) -> Result<(QueryViews, QueryViewsCache)> {
        let (audio, audio_cache) = self.gem_audio.forward(q)?;
        let (meta, meta_cache) = self.gem_meta.forward(q)?;
        let weights = self.modality_weights_forward(q)?;
        Ok((
            QueryViews {
                audio,
                meta,
                weights: weights.clone(),
            },
            QueryViewsCache {
                q: q.clone(),
                audio: audio_cache,
                meta: meta_cache,
                weights,
            },
        ))
    }

    /// Returns `dL/dq`.
    pub fn query_views_backward(
        &mut self,
        cache: &QueryViewsCache,
        d_audio: &Tensor2D,
        d_meta: &Tensor2D,
        d_weights: &Tensor2D,
    ) -> Tensor2D {
        let mut dq = self.gem_audio.backward(&cache.audio, d_audio);
        dq.add_assign(&self.gem_meta.backward(&cache.meta, d_meta));
        let d_logits = softmax_rows_backward(&cache.weights, d_weights);
        dq.add_assign(&self.modality_weights.backward(&cache.q, &d_logits));
        dq
    }

    /// Runs the joint transformer over `[audio sequence ‖ metadata]` for each
    /// item in the batch.
    pub fn item_tokens(&self, audio: &AudioOutput, meta: &Tensor2D) -> Result<(ItemTokens, ItemTokensCache)> {
        let d = self.width();
        let batch = audio.frame_counts.len();
        if meta.shape() != (batch, d) || audio.sequences.cols() != d {
            return Err(Error::Dimension {
                op: "mid_fuse item tokens",
                left: audio.sequences.shape(),
                right: meta.shape(),
            });
        }
        let lengths: Vec<usize> = audio.frame_counts.iter().map(|t| t + 2).collect();
        let layout = SeqLayout::from_lengths(&lengths);
        let nj = layout.seq_len;
        let mut x = Tensor2D::zeros(batch * nj, d);
        for (b, &t) in audio.frame_counts.iter().enumerate() {
            for p in 0..=t {
                x.row_mut(b * nj + p).copy_from_slice(audio.sequences.row(b * audio.seq_len + p));
            }
            x.row_mut(b * nj + t + 1).copy_from_slice(meta.row(b));
        }
        let (h, layers) = self.stack.forward(&x, &layout)?;
        let audio_rows: Vec<usize> = audio.frame_counts.iter().enumerate().map(|(b, &t)| b * nj + t).collect();
        let meta_rows: Vec<usize> = audio_rows.iter().map(|r| r + 1).collect();
        Ok((
            ItemTokens {
                audio: h.select_rows(&audio_rows),
                meta: h.select_rows(&meta_rows),
            },
            ItemTokensCache {
                audio_counts: audio.frame_counts.clone(),
                audio_seq_len: audio.seq_len,
                joint_len: nj,
                layers,
            },
        ))
    }

    /// Returns gradients w.r.t. the audio sequences (in the audio encoder's
    /// padded layout) and the metadata vectors.
    pub fn item_tokens_backward(
        &mut self,
        cache: &ItemTokensCache,
        d_audio: &Tensor2D,
        d_meta: &Tensor2D,
    ) -> (Tensor2D, Tensor2D) {
        let d = self.width();
        let nj = cache.joint_len;
        let batch = cache.audio_counts.len();
        let mut dh = Tensor2D::zeros(batch * nj, d);
        for (b, &t) in cache.audio_counts.iter().enumerate() {
            dh.row_mut(b * nj + t).copy_from_slice(d_audio.row(b));
            dh.row_mut(b * nj + t + 1).copy_from_slice(d_meta.row(b));
        }
        let dx = self.stack.backward(&cache.layers, &dh);
        let na = cache.audio_seq_len;
        let mut d_seq = Tensor2D::zeros(batch * na, d);
        let mut d_meta_in = Tensor2D::zeros(batch, d);
        for (b, &t) in cache.audio_counts.iter().enumerate() {
            for p in 0..=t {
                d_seq.row_mut(b * na + p).copy_from_slice(dx.row(b * nj + p));
            }
            d_meta_in.row_mut(b).copy_from_slice(dx.row(b * nj + t + 1));
        }
        (d_seq, d_meta_in)
    }

    /// `S[j][i] = w_a(q_j)·cos(g_a(q_j), A_i) + w_m(q_j)·cos(g_m(q_j), M_i)`.
    pub fn score_matrix(views: &QueryViews, items: &ItemTokens) -> Result<(Tensor2D, ScoreCache)> {
        let (audio_cos, audio_cache) = cosine_forward(&views.audio, &items.audio)?;
        let (meta_cos, meta_cache) = cosine_forward(&views.meta, &items.meta)?;
        let mut scores = Tensor2D::zeros(audio_cos.rows(), audio_cos.cols());
        for j in 0..scores.rows() {
            let (wa, wm) = (views.weights.get(j, 0), views.weights.get(j, 1));
            for ((s, a), m) in scores.row_mut(j).iter_mut().zip(audio_cos.row(j)).zip(meta_cos.row(j)) {
                *s = wa * a + wm * m;
            }
        }
        Ok((
            scores,
            ScoreCache {
                audio_cos,
                meta_cos,
                audio_cache,
                meta_cache,
                weights: views.weights.clone(),
            },
        ))
    }

    pub fn score_matrix_backward(cache: &ScoreCache, d_scores: &Tensor2D) -> ScoreGrads {
        let (rows, cols) = d_scores.shape();
        let mut d_audio_cos = Tensor2D::zeros(rows, cols);
        let mut d_meta_cos = Tensor2D::zeros(rows, cols);
        let mut d_weights = Tensor2D::zeros(rows, 2);
        for j in 0..rows {
            let (wa, wm) = (cache.weights.get(j, 0), cache.weights.get(j, 1));
            let mut dwa = 0.0;
            let mut dwm = 0.0;
            for i in 0..cols {
                let g = d_scores.get(j, i);
                d_audio_cos.set(j, i, g * wa);
                d_meta_cos.set(j, i, g * wm);
                dwa += g * cache.audio_cos.get(j, i);
                dwm += g * cache.meta_cos.get(j, i);
            }
            d_weights.set(j, 0, dwa);
            d_weights.set(j, 1, dwm);
        }
        let (query_audio, item_audio) = cosine_backward(&cache.audio_cache, &d_audio_cos);
        let (query_meta, item_meta) = cosine_backward(&cache.meta_cache, &d_meta_cos);
        ScoreGrads {
            query_audio,
            query_meta,
            weights: d_weights,
            item_audio,
            item_meta,
        }
    }
}

impl Module for MidFusion {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.stack.visit_params(f);
        self.gem_audio.visit_params(f);
        self.gem_meta.visit_params(f);
        self.modality_weights.visit_params(f);
    }

    fn visit_params_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Parameter)) {
        self.stack.visit_params_mut(f);
        self.gem_audio.visit_params_mut(f);
        self.gem_meta.visit_params_mut(f);
        self.modality_weights.visit_params_mut(f);
    }
}

/// `(w_audio, w_meta)` for a single `1×d` query.
pub fn query_modality_weights(q: &Tensor2D, params: &MidFusion) -> Result<(f64, f64)> {
    let w = params.modality_weights_forward(q)?;
    Ok((w.get(0, 0), w.get(0, 1)))
}

/// Mid-fusion score of one item against one query.
///
/// `audio_seq` is the `(T+1)×d` transformed audio sequence with the global
/// token last; `meta_emb` and `q` are `1×d`.
pub fn mid_fuse_score(audio_seq: &Tensor2D, meta_emb: &Tensor2D, q: &Tensor2D, params: &MidFusion) -> Result<f64> {
    if audio_seq.rows() < 2 {
        return Err(Error::Dimension {
            op: "mid_fuse_score",
            left: audio_seq.shape(),
            right: (2, params.width()),
        });
    }
    let audio = AudioOutput {
        pooled: Tensor2D::zeros(1, audio_seq.cols()),
        sequences: audio_seq.clone(),
        frame_counts: vec![audio_seq.rows() - 1],
        seq_len: audio_seq.rows(),
    };
    let (tokens, _) = params.item_tokens(&audio, meta_emb)?;
    let (views, _) = params.query_views(q)?;
    let (s, _) = MidFusion::score_matrix(&views, &tokens)?;
    Ok(s.get(0, 0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape() -> BlockShape {
        BlockShape {
            width: 4,
            depth: 1,
            heads: 2,
            ff_hidden: 8,
        }
    }

    fn row(v: &[f64]) -> Tensor2D {
        Tensor2D::row_vector(v)
    }

    #[test]
    fn late_fuse_examples() {
        assert_eq!(late_fuse(&row(&[1.0, 2.0]), &row(&[3.0, 4.0])).unwrap().data(), &[4.0, 6.0]);
        let a = row(&[0.5, -2.0]);
        assert_eq!(late_fuse(&a, &Tensor2D::zeros(1, 2)).unwrap(), a);
        let m = row(&[3.0, 1.0]);
        assert_eq!(late_fuse(&a, &m).unwrap(), late_fuse(&m, &a).unwrap());
        assert!(late_fuse(&a, &row(&[1.0])).is_err());
    }

    #[test]
    fn neutral_gate_normalizes_the_query() {
        let gem = GatedEmbedding {
            first: Linear::from_parts("f", Tensor2D::identity(3), Tensor2D::zeros(1, 3)).unwrap(),
            gate: Linear::from_parts("g", Tensor2D::zeros(3, 3), Tensor2D::zeros(1, 3)).unwrap(),
        };
        let q = row(&[3.0, 0.0, 4.0]);
        let out = gated_embedding(&q, &gem).unwrap();
        assert!(out.max_abs_diff(&row(&[0.6, 0.0, 0.8])) < 1e-15);
        let err = gated_embedding(&Tensor2D::zeros(1, 3), &gem).unwrap_err();
        assert!(matches!(err, Error::DegenerateGate { row: 0 }));
    }

    #[test]
    fn gated_output_is_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gem = GatedEmbedding::new("g", 6, &mut rng);
        let q = Tensor2D::randn(5, 6, 1.0, &mut rng);
        let out = gated_embedding(&q, &gem).unwrap();
        for r in 0..5 {
            let n: f64 = out.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn modality_weight_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut mid = MidFusion::new("m", shape(), &mut rng).unwrap();
        mid.modality_weights.weight.value.fill(0.0);
        let q = row(&[1.0, -3.0, 2.0, 0.5]);
        assert_eq!(query_modality_weights(&q, &mid).unwrap(), (0.5, 0.5));
        mid.modality_weights.bias.value = row(&[10.0, 0.0]);
        let (wa, wm) = query_modality_weights(&q, &mid).unwrap();
        assert!((wa - 0.99995).abs() < 1e-5 && (wm - 0.00005).abs() < 1e-5);
        assert!((wa + wm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_views_score_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut mid = MidFusion::new("m", shape(), &mut rng).unwrap();
        mid.stack.make_identity();
        mid.modality_weights.weight.value.fill(0.0);
        for gem in [&mut mid.gem_audio, &mut mid.gem_meta] {
            gem.first = Linear::from_parts("f", Tensor2D::identity(4), Tensor2D::zeros(1, 4)).unwrap();
            gem.gate = Linear::from_parts("g", Tensor2D::zeros(4, 4), Tensor2D::zeros(1, 4)).unwrap();
        }
        // the global token (last audio row) and the metadata token lie in the
        // first two coordinates, the query in the last two
        let audio_seq = Tensor2D::from_rows(&[[0.0, 0.0, 5.0, 1.0], [1.0, 2.0, 0.0, 0.0]]).unwrap();
        let meta = row(&[-3.0, 1.0, 0.0, 0.0]);
        let q = row(&[0.0, 0.0, 1.0, 2.0]);
        let s = mid_fuse_score(&audio_seq, &meta, &q, &mid).unwrap();
        assert_eq!(s, 0.0);
    }
}
