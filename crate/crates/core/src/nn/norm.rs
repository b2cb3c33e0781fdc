use crate::error::{Error, Result};
use crate::tensor::{Module, Parameter, Tensor2D};

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Parameter,
    pub beta: Parameter,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Tensor2D,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(name: &str, width: usize) -> Self {
        Self {
            gamma: Parameter::new(format!("{name}.gamma"), Tensor2D::filled(1, width, 1.0)),
            beta: Parameter::zeros(format!("{name}.beta"), 1, width),
            eps: DEFAULT_EPS,
        }
    }

    pub fn forward(&self, x: &Tensor2D) -> Result<(Tensor2D, LayerNormCache)> {
        let d = x.cols();
        if self.gamma.shape() != (1, d) || self.beta.shape() != (1, d) {
            return Err(Error::Dimension {
                op: "layer_norm",
                left: x.shape(),
                right: self.gamma.shape(),
            });
        }
        let mut xhat = Tensor2D::zeros(x.rows(), d);
        let mut out = Tensor2D::zeros(x.rows(), d);
        let mut inv_std = Vec::with_capacity(x.rows());
        let g = self.gamma.value.row(0);
        let b = self.beta.value.row(0);
        for r in 0..x.rows() {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + self.eps).sqrt();
            inv_std.push(inv);
            let xh = xhat.row_mut(r);
            for (h, v) in xh.iter_mut().zip(row) {
                *h = (v - mean) * inv;
            }
            for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = xhat.get(r, j) * g[j] + b[j];
            }
        }
        Ok((out, LayerNormCache { xhat, inv_std }))
    }

    pub fn backward(&mut self, cache: &LayerNormCache, dy: &Tensor2D) -> Tensor2D {
        let d = dy.cols();
        let n = d as f64;
        let mut dx = Tensor2D::zeros(dy.rows(), d);
        let mut dxhat = vec![0.0; d];
        for r in 0..dy.rows() {
            let xh = cache.xhat.row(r);
            let g = dy.row(r);
            {
                let gg = self.gamma.grad.data_mut();
                for j in 0..d {
                    gg[j] += g[j] * xh[j];
                }
            }
            {
                let bg = self.beta.grad.data_mut();
                for j in 0..d {
                    bg[j] += g[j];
                }
            }
            let gamma = self.gamma.value.row(0);
            let mut sum = 0.0;
            let mut sum_xh = 0.0;
            for j in 0..d {
                dxhat[j] = g[j] * gamma[j];
                sum += dxhat[j];
                sum_xh += dxhat[j] * xh[j];
            }
            let inv = cache.inv_std[r];
            for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                *o = inv / n * (n * dxhat[j] - sum - xh[j] * sum_xh);
            }
        }
        dx
    }
}

impl Module for LayerNorm {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        f(&self.gamma);
        f(&self.beta);
    }

    fn visit_params_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Parameter)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

/// Per-row `(x − mean)/sqrt(var + eps)·gamma + beta`.
pub fn layer_norm(x: &Tensor2D, gamma: &Parameter, beta: &Parameter, eps: f64) -> Result<Tensor2D> {
    if eps <= 0.0 {
        return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let ln = LayerNorm {
        gamma: gamma.clone(),
        beta: beta.clone(),
        eps,
    };
    Ok(ln.forward(x)?.0)
}
