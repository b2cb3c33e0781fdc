use rand::Rng;

use super::linear::Linear;
use super::{gelu, gelu_grad};
use crate::error::Result;
use crate::tensor::{Module, Parameter, Tensor2D};

/// Position-wise `GELU(x·W₁ + b₁)·W₂ + b₂`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub expand: Linear,
    pub contract: Linear,
}

#[derive(Debug, Clone)]
pub struct FeedForwardCache {
    x: Tensor2D,
    pre: Tensor2D,
    hidden: Tensor2D,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(name: &str, width: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            expand: Linear::new(&format!("{name}.expand"), width, hidden, rng),
            contract: Linear::new(&format!("{name}.contract"), hidden, width, rng),
        }
    }

    pub fn forward(&self, x: &Tensor2D) -> Result<(Tensor2D, FeedForwardCache)> {
        let pre = self.expand.forward(x)?;
        let hidden = pre.map(gelu);
        let y = self.contract.forward(&hidden)?;
        Ok((
            y,
            FeedForwardCache {
                x: x.clone(),
                pre,
                hidden,
            },
        ))
    }

    pub fn backward(&mut self, cache: &FeedForwardCache, dy: &Tensor2D) -> Tensor2D {
        let mut dh = self.contract.backward(&cache.hidden, dy);
        for (g, p) in dh.data_mut().iter_mut().zip(cache.pre.data()) {
            *g *= gelu_grad(*p);
        }
        self.expand.backward(&cache.x, &dh)
    }
}

impl Module for FeedForward {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.expand.visit_params(f);
        self.contract.visit_params(f);
    }

    fn visit_params_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Parameter)) {
        self.expand.visit_params_mut(f);
        self.contract.visit_params_mut(f);
    }
}
