use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Module, Parameter, Tensor2D};

/// Affine map `y = x·W + b` with `W: p×q`, `b: 1×q`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    /// Weights drawn from `N(0, 1/p)`, zero bias.
    pub fn new<R: Rng + ?Sized>(name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        let std = 1.0 / (input as f64).sqrt();
        Self {
            weight: Parameter::new(format!("{name}.w"), Tensor2D::randn(input, output, std, rng)),
            bias: Parameter::zeros(format!("{name}.b"), 1, output),
        }
    }

    pub fn from_parts(name: &str, weight: Tensor2D, bias: Tensor2D) -> Result<Self> {
        if bias.rows() != 1 || bias.cols() != weight.cols() {
            return Err(Error::Dimension {
                op: "linear bias",
                left: weight.shape(),
                right: bias.shape(),
            });
        }
        Ok(Self {
            weight: Parameter::new(format!("{name}.w"), weight),
            bias: Parameter::new(format!("{name}.b"), bias),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn forward(&self, x: &Tensor2D) -> Result<Tensor2D> {
        linear_forward(x, &self.weight, &self.bias)
    }

    /// Accumulates `dW += xᵀ·dy`, `db += Σ dy` and returns `dx = dy·Wᵀ`.
    pub fn backward(&mut self, x: &Tensor2D, dy: &Tensor2D) -> Tensor2D {
        gemm(x, true, dy, false, &mut self.weight.grad, 1.0);
        let db = self.bias.grad.data_mut();
        for r in 0..dy.rows() {
            for (g, d) in db.iter_mut().zip(dy.row(r)) {
                *g += d;
            }
        }
        let mut dx = Tensor2D::zeros(dy.rows(), self.input_dim());
        gemm(dy, false, &self.weight.value, true, &mut dx, 0.0);
        dx
    }
}

impl Module for Linear {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_params_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Parameter)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// `out[i][j] = Σ_k x[i][k]·w[k][j] + b[0][j]`.
pub fn linear_forward(x: &Tensor2D, w: &Parameter, b: &Parameter) -> Result<Tensor2D> {
    let (p, q) = w.shape();
    if x.cols() != p {
        return Err(Error::Dimension {
            op: "linear_forward",
            left: x.shape(),
            right: (p, q),
        });
    }
    if b.shape() != (1, q) {
        return Err(Error::Dimension {
            op: "linear_forward bias",
            left: (p, q),
            right: b.shape(),
        });
    }
    let mut out = Tensor2D::zeros(x.rows(), q);
    for r in 0..x.rows() {
        out.row_mut(r).copy_from_slice(b.value.row(0));
    }
    gemm(x, false, &w.value, false, &mut out, 1.0);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_bias_cases() {
        let lin = Linear::from_parts("l", Tensor2D::identity(2), Tensor2D::zeros(1, 2)).unwrap();
        let y = lin.forward(&Tensor2D::from_rows(&[[1.0, 2.0]]).unwrap()).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);

        let lin = Linear::from_parts(
            "l",
            Tensor2D::from_rows(&[[0.3, -1.0], [2.0, 5.0]]).unwrap(),
            Tensor2D::from_rows(&[[3.0, 4.0]]).unwrap(),
        )
        .unwrap();
        let y = lin.forward(&Tensor2D::zeros(1, 2)).unwrap();
        assert_eq!(y.data(), &[3.0, 4.0]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let lin = Linear::from_parts("l", Tensor2D::identity(3), Tensor2D::zeros(1, 3)).unwrap();
        let err = lin.forward(&Tensor2D::zeros(1, 2)).unwrap_err();
        assert!(matches!(err, Error::Dimension { left: (1, 2), right: (3, 3), .. }));
    }
}
