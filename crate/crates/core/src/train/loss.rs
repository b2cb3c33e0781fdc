use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

/// Symmetric NT-Xent over a `B×B` similarity matrix whose diagonal holds the
/// positive pairs.
///
/// `loss = ½·(mean_i CE(softmax(S_i·/τ), i) + mean_j CE(softmax(S_·j/τ), j))`.
/// Returns the loss and `dL/dS`.
pub fn nt_xent_loss(sim: &Tensor2D, temperature: f64) -> Result<(f64, Tensor2D)> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {temperature}")));
    }
    let (b, cols) = sim.shape();
    if b != cols || b == 0 {
        return Err(Error::Dimension {
            op: "nt_xent_loss",
            left: sim.shape(),
            right: (b, b),
        });
    }
    let logits = sim.scale(1.0 / temperature);
    let bf = b as f64;
    let mut grad = Tensor2D::zeros(b, b);
    let mut loss = 0.0;

    // item direction: rows
    for i in 0..b {
        let row = logits.row(i);
        let (lse, probs) = log_softmax_parts(row.iter().copied());
        loss += 0.5 * (lse - row[i]) / bf;
        for (j, p) in probs.into_iter().enumerate() {
            let target = if i == j { 1.0 } else { 0.0 };
            let g = grad.get(i, j) + 0.5 * (p - target) / bf;
            grad.set(i, j, g);
        }
    }
    // other direction: columns
    for j in 0..b {
        let (lse, probs) = log_softmax_parts((0..b).map(|i| logits.get(i, j)));
        loss += 0.5 * (lse - logits.get(j, j)) / bf;
        for (i, p) in probs.into_iter().enumerate() {
            let target = if i == j { 1.0 } else { 0.0 };
            let g = grad.get(i, j) + 0.5 * (p - target) / bf;
            grad.set(i, j, g);
        }
    }
    for g in grad.data_mut() {
        *g /= temperature;
    }
    Ok((loss, grad))
}

fn log_softmax_parts(values: impl Iterator<Item = f64> + Clone) -> (f64, Vec<f64>) {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let lse = max + sum.ln();
    (lse, exps.into_iter().map(|e| e / sum).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_identity() {
        let (loss, _) = nt_xent_loss(&Tensor2D::identity(2), 1.0).unwrap();
        assert!((loss - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-15);
        assert!((loss - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn uniform_similarities_give_ln_b() {
        for b in [2, 3, 7] {
            let (loss, _) = nt_xent_loss(&Tensor2D::filled(b, b, 0.3), 0.05).unwrap();
            assert!((loss - (b as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_diagonal() {
        let sim = Tensor2D::identity(4).scale(50.0);
        let (loss, _) = nt_xent_loss(&sim, 1.0).unwrap();
        assert!(loss < 1e-10 && loss >= 0.0);
    }

    #[test]
    fn bad_temperature() {
        assert!(matches!(nt_xent_loss(&Tensor2D::identity(2), 0.0), Err(Error::Config(_))));
        assert!(nt_xent_loss(&Tensor2D::zeros(2, 3), 1.0).is_err());
    }
}
