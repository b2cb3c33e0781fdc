use rand::Rng;

use super::attention::{AttentionCache, MultiHeadAttention, SeqLayout};
use super::feedforward::{FeedForward, FeedForwardCache};
use super::norm::{LayerNorm, LayerNormCache};
use crate::error::Result;
use crate::tensor::{Module, Parameter, Tensor2D};

/// Pre-norm transformer encoder layer:
///
/// ```text
/// h = x + MHA(LN₁(x))
/// y = h + FF(LN₂(h))
/// ```
///
/// With the attention output projection and the second feed-forward
/// projection zeroed the layer is exactly the identity.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub norm_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

#[derive(Debug, Clone)]
pub struct EncoderLayerCache {
    ln1: LayerNormCache,
    attn: AttentionCache,
    ln2: LayerNormCache,
    ff: FeedForwardCache,
}

impl EncoderLayer {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        width: usize,
        heads: usize,
        ff_hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            norm_attn: LayerNorm::new(&format!("{name}.ln1"), width),
            attn: MultiHeadAttention::new(&format!("{name}.attn"), width, heads, rng)?,
            norm_ff: LayerNorm::new(&format!("{name}.ln2"), width),
            ff: FeedForward::new(&format!("{name}.ff"), width, ff_hidden, rng),
        })
    }

    /// Zeroes both residual branches so the layer passes its input through.
    pub fn make_identity(&mut self) {
        self.attn.output.weight.value.fill(0.0);
        self.attn.output.bias.value.fill(0.0);
        self.ff.contract.weight.value.fill(0.0);
        self.ff.contract.bias.value.fill(0.0);
    }

    pub fn forward(&self, x: &Tensor2D, layout: &SeqLayout) -> Result<(Tensor2D, EncoderLayerCache)> {
        let (a, ln1) = self.norm_attn.forward(x)?;
        let (attn_out, attn) = self.attn.forward(&a, layout)?;
        let mut h = attn_out;
        h.add_assign(x);
        let (b, ln2) = self.norm_ff.forward(&h)?;
        let (ff_out, ff) = self.ff.forward(&b)?;
        let mut y = ff_out;
        y.add_assign(&h);
        Ok((y, EncoderLayerCache { ln1, attn, ln2, ff }))
    }

    pub fn backward(&mut self, cache: &EncoderLayerCache, dy: &Tensor2D) -> Tensor2D {
        let d_b = self.ff.backward(&cache.ff, dy);
        let mut dh = self.norm_ff.backward(&cache.ln2, &d_b);
        dh.add_assign(dy);
        let d_a = self.attn.backward(&cache.attn, &dh);
        let mut dx = self.norm_attn.backward(&cache.ln1, &d_a);
        dx.add_assign(&dh);
        dx
    }
}

impl Module for EncoderLayer {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.norm_attn.visit_params(f);
        self.attn.visit_params(f);
        self.norm_ff.visit_params(f);
        self.ff.visit_params(f);
    }

    fn visit_params_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Parameter)) {
        self.norm_attn.visit_params_mut(f);
        self.attn.visit_params_mut(f);
        self.norm_ff.visit_params_mut(f);
        self.ff.visit_params_mut(f);
    }
}

/// A sequence of encoder layers applied in order.
#[derive(Debug, Clone, Default)]
pub struct TransformerStack {
    pub layers: Vec<EncoderLayer>,
}

impl TransformerStack {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        depth: usize,
        width: usize,
        heads: usize,
        ff_hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = (0..depth)
            .map(|i| EncoderLayer::new(&format!("{name}.layer{i}"), width, heads, ff_hidden, rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn make_identity(&mut self) {
        self.layers.iter_mut().for_each(EncoderLayer::make_identity);
    }

    pub fn forward(&self, x: &Tensor2D, layout: &SeqLayout) -> Result<(Tensor2D, Vec<EncoderLayerCache>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let (y, c) = layer.forward(&h, layout)?;
            caches.push(c);
            h = y;
        }
        Ok((h, caches))
    }

    pub fn backward(&mut self, caches: &[EncoderLayerCache], dy: &Tensor2D) -> Tensor2D {
        let mut g = dy.clone();
        for (layer, c) in self.layers.iter_mut().zip(caches).rev() {
            g = layer.backward(c, &g);
        }
        g
    }
}

impl Module for TransformerStack {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        for l in &self.layers {
            l.visit_params(f);
        }
    }

    fn visit_params_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Parameter)) {
        for l in &mut self.layers {
            l.visit_params_mut(f);
        }
    }
}
