use rand::Rng;

use super::linear::Linear;
use super::softmax_in_place;
use crate::error::{Error, Result};
use crate::tensor::{Module, Parameter, Tensor2D};

/// Logit assigned to masked keys. Finite so that softmax never sees `-inf - -inf`.
pub const MASKED_LOGIT: f64 = -1e30;

/// Row layout of a padded batch: `valid.len() / seq_len` sequences of
/// `seq_len` rows each, stacked vertically. Invalid rows are never attended to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqLayout {
    pub seq_len: usize,
    pub valid: Vec<bool>,
}

impl SeqLayout {
    pub fn single(n: usize) -> Self {
        Self {
            seq_len: n,
            valid: vec![true; n],
        }
    }

    /// One sequence per length, each padded to the longest.
    pub fn from_lengths(lengths: &[usize]) -> Self {
        let n = lengths.iter().copied().max().unwrap_or(0);
        let mut valid = Vec::with_capacity(n * lengths.len());
        for &len in lengths {
            valid.extend((0..n).map(|p| p < len));
        }
        Self { seq_len: n, valid }
    }

    pub fn batch_size(&self) -> usize {
        if self.seq_len == 0 {
            0
        } else {
            self.valid.len() / self.seq_len
        }
    }

    pub fn rows(&self) -> usize {
        self.valid.len()
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    x: Tensor2D,
    q: Tensor2D,
    k: Tensor2D,
    v: Tensor2D,
    concat: Tensor2D,
    /// One `n×n` probability block per (sequence, head).
    probs: Vec<Vec<f64>>,
    layout: SeqLayout,
}

impl AttentionCache {
    /// Attention weights of sequence `b`, head `h`, as an `n×n` row-major block.
    pub fn weights(&self, b: usize, h: usize, heads: usize) -> &[f64] {
        &self.probs[b * heads + h]
    }
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(name: &str, width: usize, heads: usize, rng: &mut R) -> Result<Self> {
        check_heads(width, heads)?;
        Ok(Self {
            heads,
            query: Linear::new(&format!("{name}.q"), width, width, rng),
            key: Linear::new(&format!("{name}.k"), width, width, rng),
            value: Linear::new(&format!("{name}.v"), width, width, rng),
            output: Linear::new(&format!("{name}.o"), width, width, rng),
        })
    }

    /// Identity projections everywhere; used by degenerate-configuration checks.
    pub fn identity(name: &str, width: usize, heads: usize) -> Result<Self> {
        check_heads(width, heads)?;
        let id = |n: &str| Linear::from_parts(&format!("{name}.{n}"), Tensor2D::identity(width), Tensor2D::zeros(1, width));
        Ok(Self {
            heads,
            query: id("q")?,
            key: id("k")?,
            value: id("v")?,
            output: id("o")?,
        })
    }

    pub fn width(&self) -> usize {
        self.query.input_dim()
    }

    pub fn forward(&self, x: &Tensor2D, layout: &SeqLayout) -> Result<(Tensor2D, AttentionCache)> {
        let d = self.width();
        check_heads(d, self.heads)?;
        if x.cols() != d || x.rows() != layout.rows() {
            return Err(Error::Dimension {
                op: "multi_head_attention",
                left: x.shape(),
                right: (layout.rows(), d),
            });
        }
        let q = self.query.forward(x)?;
        let k = self.key.forward(x)?;
        let v = self.value.forward(x)?;
        let n = layout.seq_len;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut concat = Tensor2D::zeros(x.rows(), d);
        let mut probs = Vec::with_capacity(layout.batch_size() * self.heads);
        for b in 0..layout.batch_size() {
            let base = b * n;
            let valid = &layout.valid[base..base + n];
            for h in 0..self.heads {
                let c0 = h * dh;
                let mut p = vec![0.0; n * n];
                for i in 0..n {
                    let qi = &q.row(base + i)[c0..c0 + dh];
                    let row = &mut p[i * n..(i + 1) * n];
                    for j in 0..n {
                        row[j] = if valid[j] {
                            let kj = &k.row(base + j)[c0..c0 + dh];
                            dot(qi, kj) * scale
                        } else {
                            MASKED_LOGIT
                        };
                    }
                    softmax_in_place(row);
                    let out = &mut concat.row_mut(base + i)[c0..c0 + dh];
                    for j in 0..n {
                        let w = row[j];
                        if w != 0.0 {
                            let vj = &v.row(base + j)[c0..c0 + dh];
                            for (o, vv) in out.iter_mut().zip(vj) {
                                *o += w * vv;
                            }
                        }
                    }
                }
                probs.push(p);
            }
        }
        let y = self.output.forward(&concat)?;
        Ok((
            y,
            AttentionCache {
                x: x.clone(),
                q,
                k,
                v,
                concat,
                probs,
                layout: layout.clone(),
            },
        ))
    }

    pub fn backward(&mut self, cache: &AttentionCache, dy: &Tensor2D) -> Tensor2D {
        let d = self.width();
        let n = cache.layout.seq_len;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let d_concat = self.output.backward(&cache.concat, dy);
        let rows = cache.x.rows();
        let mut dq = Tensor2D::zeros(rows, d);
        let mut dk = Tensor2D::zeros(rows, d);
        let mut dv = Tensor2D::zeros(rows, d);
        let mut dp = vec![0.0; n];
        for b in 0..cache.layout.batch_size() {
            let base = b * n;
            for h in 0..self.heads {
                let c0 = h * dh;
                let p = &cache.probs[b * self.heads + h];
                for i in 0..n {
                    let doi = &d_concat.row(base + i)[c0..c0 + dh];
                    let pi = &p[i * n..(i + 1) * n];
                    let mut acc = 0.0;
                    for j in 0..n {
                        dp[j] = if pi[j] != 0.0 {
                            dot(doi, &cache.v.row(base + j)[c0..c0 + dh])
                        } else {
                            0.0
                        };
                        acc += pi[j] * dp[j];
                    }
                    for j in 0..n {
                        if pi[j] == 0.0 {
                            continue;
                        }
                        {
                            let dvj = &mut dv.row_mut(base + j)[c0..c0 + dh];
                            for (g, o) in dvj.iter_mut().zip(doi) {
                                *g += pi[j] * o;
                            }
                        }
                        let ds = pi[j] * (dp[j] - acc) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        {
                            let kj = &cache.k.row(base + j)[c0..c0 + dh];
                            let dqi = &mut dq.row_mut(base + i)[c0..c0 + dh];
                            for (g, kk) in dqi.iter_mut().zip(kj) {
                                *g += ds * kk;
                            }
                        }
                        let qi = &cache.q.row(base + i)[c0..c0 + dh];
                        let dkj = &mut dk.row_mut(base + j)[c0..c0 + dh];
                        for (g, qq) in dkj.iter_mut().zip(qi) {
                            *g += ds * qq;
                        }
                    }
                }
            }
        }
        let mut dx = self.query.backward(&cache.x, &dq);
        dx.add_assign(&self.key.backward(&cache.x, &dk));
        dx.add_assign(&self.value.backward(&cache.x, &dv));
        dx
    }
}

impl Module for MultiHeadAttention {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.query.visit_params(f);
        self.key.visit_params(f);
        self.value.visit_params(f);
        self.output.visit_params(f);
    }

    fn visit_params_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Parameter)) {
        self.query.visit_params_mut(f);
        self.key.visit_params_mut(f);
        self.value.visit_params_mut(f);
        self.output.visit_params_mut(f);
    }
}

/// Attention over a single sequence with per-position validity flags.
pub fn multi_head_attention(
    x: &Tensor2D,
    params: &MultiHeadAttention,
    mask: &[bool],
) -> Result<Tensor2D> {
    if mask.len() != x.rows() {
        return Err(Error::Dimension {
            op: "multi_head_attention mask",
            left: x.shape(),
            right: (mask.len(), 1),
        });
    }
    let layout = SeqLayout {
        seq_len: x.rows(),
        valid: mask.to_vec(),
    };
    Ok(params.forward(x, &layout)?.0)
}

fn check_heads(width: usize, heads: usize) -> Result<()> {
    if heads == 0 || width % heads != 0 {
        return Err(Error::Config(format!(
            "width {width} is not divisible by {heads} attention heads"
        )));
    }
    Ok(())
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_position_attends_to_itself() {
        let mha = MultiHeadAttention::identity("a", 4, 2).unwrap();
        let x = Tensor2D::from_rows(&[[0.3, -1.2, 2.0, 0.5]]).unwrap();
        let y = multi_head_attention(&x, &mha, &[true]).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn identical_positions_split_evenly() {
        let mha = MultiHeadAttention::identity("a", 4, 2).unwrap();
        let x = Tensor2D::from_rows(&[[1.0, 2.0, 3.0, 4.0], [1.0, 2.0, 3.0, 4.0]]).unwrap();
        let (_, cache) = mha.forward(&x, &SeqLayout::single(2)).unwrap();
        for h in 0..2 {
            for w in cache.weights(0, h, 2) {
                assert!((w - 0.5).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn indivisible_width_is_a_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            MultiHeadAttention::new("a", 6, 4, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn masked_keys_get_zero_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mha = MultiHeadAttention::new("a", 4, 2, &mut rng).unwrap();
        let x = Tensor2D::randn(3, 4, 1.0, &mut rng);
        let layout = SeqLayout {
            seq_len: 3,
            valid: vec![true, false, true],
        };
        let (_, cache) = mha.forward(&x, &layout).unwrap();
        for h in 0..2 {
            let w = cache.weights(0, h, 2);
            for i in 0..3 {
                assert_eq!(w[i * 3 + 1], 0.0);
            }
        }
    }
}
