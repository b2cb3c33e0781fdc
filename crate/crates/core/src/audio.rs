//! Audio side: frame projection, sinusoidal positions and pooling through an
//! appended global audio token.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{EncoderLayerCache, Linear, SeqLayout, TransformerStack};
use crate::tensor::{Module, Parameter, Tensor2D};
use crate::text::BlockShape;

/// `PE[pos][2i] = sin(pos/10000^(2i/d))`, `PE[pos][2i+1] = cos(..)`.
pub fn positional_encoding(len: usize, width: usize) -> Result<Tensor2D> {
    if width % 2 != 0 {
        return Err(Error::Config(format!(
            "positional encoding width must be even, got {width}"
        )));
    }
    let mut pe = Tensor2D::zeros(len, width);
    for pos in 0..len {
        let row = pe.row_mut(pos);
        for i in 0..width / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / width as f64);
            row[2 * i] = angle.sin();
            row[2 * i + 1] = angle.cos();
        }
    }
    Ok(pe)
}

/// A non-empty `T × f` sequence of finite frame features.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence(Tensor2D);

impl FrameSequence {
    pub fn new(frames: Tensor2D) -> Result<Self> {
        if frames.rows() == 0 {
            return Err(Error::Ingest("frame sequence must contain at least one frame".into()));
        }
        if !frames.is_finite() {
            return Err(Error::Ingest("frame sequence contains non-finite values".into()));
        }
        Ok(Self(frames))
    }

    pub fn frames(&self) -> &Tensor2D {
        &self.0
    }

    pub fn frames_mut(&mut self) -> &mut Tensor2D {
        &mut self.0
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows() == 0
    }

    pub fn feature_width(&self) -> usize {
        self.0.cols()
    }
}

#[derive(Debug, Clone)]
pub struct AudioEncoder {
    pub frame_projection: Linear,
    pub global_bias: Parameter,
    pub stack: TransformerStack,
    pub projection: Linear,
}

/// Result of encoding a batch of frame sequences.
#[derive(Debug, Clone)]
pub struct AudioOutput {
    /// `B × d`: projected global tokens.
    pub pooled: Tensor2D,
    /// `B·n × d`: transformed sequences, sequence `b` occupying rows
    /// `b·n .. b·n + T_b + 1` with the global token last.
    pub sequences: Tensor2D,
    pub frame_counts: Vec<usize>,
    pub seq_len: usize,
}

impl AudioOutput {
    /// Row index of the global token of sequence `b`.
    pub fn global_row(&self, b: usize) -> usize {
        b * self.seq_len + self.frame_counts[b]
    }

    /// The `(T_b+1) × d` transformed sequence of item `b`.
    pub fn sequence(&self, b: usize) -> Tensor2D {
        let rows: Vec<usize> = (0..=self.frame_counts[b]).map(|p| b * self.seq_len + p).collect();
        self.sequences.select_rows(&rows)
    }
}

#[derive(Debug, Clone)]
pub struct AudioCache {
    stacked_frames: Tensor2D,
    frame_counts: Vec<usize>,
    seq_len: usize,
    layers: Vec<EncoderLayerCache>,
    global_in: Tensor2D,
}

impl AudioEncoder {
    pub fn new<R: Rng + ?Sized>(name: &str, frame_width: usize, shape: BlockShape, rng: &mut R) -> Result<Self> {
        let d = shape.width;
        if d % 2 != 0 {
            return Err(Error::Config(format!("audio width must be even, got {d}")));
        }
        Ok(Self {
            frame_projection: Linear::new(&format!("{name}.frames"), frame_width, d, rng),
            global_bias: Parameter::zeros(format!("{name}.global_bias"), 1, d),
            stack: TransformerStack::new(name, shape.depth, d, shape.heads, shape.ff_hidden, rng)?,
            projection: Linear::new(&format!("{name}.proj"), d, d, rng),
        })
    }

    pub fn width(&self) -> usize {
        self.frame_projection.output_dim()
    }

    pub fn frame_width(&self) -> usize {
        self.frame_projection.input_dim()
    }

    fn check_frames(&self, frames: &Tensor2D) -> Result<()> {
        if frames.cols() != self.frame_width() {
            return Err(Error::Dimension {
                op: "embed_frames",
                left: frames.shape(),
                right: (frames.rows(), self.frame_width()),
            });
        }
        if frames.rows() == 0 {
            return Err(Error::Ingest("empty frame sequence".into()));
        }
        Ok(())
    }

    pub fn forward(&self, batch: &[&Tensor2D]) -> Result<(AudioOutput, AudioCache)> {
        let d = self.width();
        for f in batch {
            self.check_frames(f)?;
        }
        let frame_counts: Vec<usize> = batch.iter().map(|f| f.rows()).collect();
        let n = frame_counts.iter().max().map_or(0, |t| t + 1);
        let stacked_frames = Tensor2D::vstack(batch)?;
        let projected = self.frame_projection.forward(&stacked_frames)?;
        let pe = positional_encoding(n, d)?;
        let bias = self.global_bias.value.row(0);

        let mut x = Tensor2D::zeros(batch.len() * n, d);
        let mut offset = 0;
        for (b, &t) in frame_counts.iter().enumerate() {
            let mut mean = vec![0.0; d];
            for p in 0..t {
                let row = x.row_mut(b * n + p);
                for ((o, a), e) in row.iter_mut().zip(projected.row(offset + p)).zip(pe.row(p)) {
                    *o = a + e;
                }
                for (m, v) in mean.iter_mut().zip(row.iter()) {
                    *m += v;
                }
            }
            let global = x.row_mut(b * n + t);
            for ((g, m), bb) in global.iter_mut().zip(&mean).zip(bias) {
                *g = m / t as f64 + bb;
            }
            offset += t;
        }

        let layout = SeqLayout::from_lengths(&frame_counts.iter().map(|t| t + 1).collect::<Vec<_>>());
        let (h, layers) = self.stack.forward(&x, &layout)?;
        let global_rows: Vec<usize> = frame_counts.iter().enumerate().map(|(b, &t)| b * n + t).collect();
        let global_in = h.select_rows(&global_rows);
        let pooled = self.projection.forward(&global_in)?;
        Ok((
            AudioOutput {
                pooled,
                sequences: h,
                frame_counts: frame_counts.clone(),
                seq_len: n,
            },
            AudioCache {
                stacked_frames,
                frame_counts,
                seq_len: n,
                layers,
                global_in,
            },
        ))
    }

    /// Back-propagates gradients arriving at the pooled vectors and/or at the
    /// transformed sequences.
    pub fn backward(&mut self, cache: &AudioCache, d_pooled: Option<&Tensor2D>, d_sequences: Option<&Tensor2D>) {
        let d = self.width();
        let n = cache.seq_len;
        let batch = cache.frame_counts.len();
        let mut dy = match d_sequences {
            Some(g) => g.clone(),
            None => Tensor2D::zeros(batch * n, d),
        };
        if let Some(dp) = d_pooled {
            let d_global = self.projection.backward(&cache.global_in, dp);
            for (b, &t) in cache.frame_counts.iter().enumerate() {
                for (o, g) in dy.row_mut(b * n + t).iter_mut().zip(d_global.row(b)) {
                    *o += g;
                }
            }
        }
        let dx = self.stack.backward(&cache.layers, &dy);
        let mut d_projected = Tensor2D::zeros(cache.stacked_frames.rows(), d);
        let mut offset = 0;
        for (b, &t) in cache.frame_counts.iter().enumerate() {
            let g = dx.row(b * n + t);
            for (a, v) in self.global_bias.grad.data_mut().iter_mut().zip(g) {
                *a += v;
            }
            let share = 1.0 / t as f64;
            for p in 0..t {
                let src = dx.row(b * n + p);
                for ((o, s), gg) in d_projected.row_mut(offset + p).iter_mut().zip(src).zip(g) {
                    *o = s + gg * share;
                }
            }
            offset += t;
        }
        self.frame_projection.backward(&cache.stacked_frames, &d_projected);
    }
}

impl Module for AudioEncoder {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.frame_projection.visit_params(f);
        f(&self.global_bias);
        self.stack.visit_params(f);
        self.projection.visit_params(f);
    }

    fn visit_params_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Parameter)) {
        self.frame_projection.visit_params_mut(f);
        f(&mut self.global_bias);
        self.stack.visit_params_mut(f);
        self.projection.visit_params_mut(f);
    }
}

/// Per-frame projection to width `d` plus positional encoding.
pub fn embed_frames(x: &FrameSequence, params: &AudioEncoder) -> Result<Tensor2D> {
    params.check_frames(x.frames())?;
    let mut out = params.frame_projection.forward(x.frames())?;
    let pe = positional_encoding(out.rows(), out.cols())?;
    out.add_assign(&pe);
    Ok(out)
}

/// Pools an already embedded `T × d` sequence: appends `mean(seq) + bias`,
/// runs the transformer stack and projects the transformed global token.
///
/// Returns `(pooled 1×d, transformed (T+1)×d)`.
pub fn pool_with_global_token(seq: &Tensor2D, params: &AudioEncoder) -> Result<(Tensor2D, Tensor2D)> {
    let (t, d) = seq.shape();
    if t == 0 {
        return Err(Error::Ingest("cannot pool an empty sequence".into()));
    }
    if d != params.width() {
        return Err(Error::Dimension {
            op: "pool_with_global_token",
            left: seq.shape(),
            right: (t, params.width()),
        });
    }
    let mut x = Tensor2D::zeros(t + 1, d);
    for p in 0..t {
        x.row_mut(p).copy_from_slice(seq.row(p));
    }
    let global = x.row_mut(t);
    for p in 0..t {
        for (g, v) in global.iter_mut().zip(seq.row(p)) {
            *g += v;
        }
    }
    for (g, b) in global.iter_mut().zip(params.global_bias.value.row(0)) {
        *g = *g / t as f64 + b;
    }
    let (h, _) = params.stack.forward(&x, &SeqLayout::single(t + 1))?;
    let pooled = params.projection.forward(&h.select_rows(&[t]))?;
    Ok((pooled, h))
}
