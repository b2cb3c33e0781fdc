//! Cosine similarity between embedding sets, with its gradient.

use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

/// Unit-normalizes every row. Fails on the first zero-norm row.
pub fn normalize_rows(x: &Tensor2D) -> Result<(Tensor2D, Vec<f64>)> {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::DegenerateVector { row: r });
        }
        row.iter_mut().for_each(|v| *v /= norm);
        norms.push(norm);
    }
    Ok((out, norms))
}

/// Gradient of `x ↦ x/‖x‖` given the normalized rows and their norms.
pub fn normalize_rows_backward(unit: &Tensor2D, norms: &[f64], d_unit: &Tensor2D) -> Tensor2D {
    let mut dx = Tensor2D::zeros(unit.rows(), unit.cols());
    for r in 0..unit.rows() {
        let u = unit.row(r);
        let g = d_unit.row(r);
        let proj: f64 = u.iter().zip(g).map(|(a, b)| a * b).sum();
        let inv = 1.0 / norms[r];
        for (o, (ui, gi)) in dx.row_mut(r).iter_mut().zip(u.iter().zip(g)) {
            *o = (gi - ui * proj) * inv;
        }
    }
    dx
}

#[derive(Debug, Clone)]
pub struct CosineCache {
    a_unit: Tensor2D,
    a_norms: Vec<f64>,
    b_unit: Tensor2D,
    b_norms: Vec<f64>,
}

/// `out[i][j] = ⟨a_i, b_j⟩ / (‖a_i‖·‖b_j‖)`.
pub fn cosine_sim_matrix(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    Ok(cosine_forward(a, b)?.0)
}

pub fn cosine_forward(a: &Tensor2D, b: &Tensor2D) -> Result<(Tensor2D, CosineCache)> {
    if a.cols() != b.cols() {
        return Err(Error::Dimension {
            op: "cosine_sim_matrix",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (a_unit, a_norms) = normalize_rows(a)?;
    let (b_unit, b_norms) = normalize_rows(b)?;
    let mut sim = a_unit.matmul_nt(&b_unit)?;
    for v in sim.data_mut() {
        *v = v.clamp(-1.0, 1.0);
    }
    Ok((
        sim,
        CosineCache {
            a_unit,
            a_norms,
            b_unit,
            b_norms,
        },
    ))
}

/// Returns `(dL/da, dL/db)`.
pub fn cosine_backward(cache: &CosineCache, d_sim: &Tensor2D) -> (Tensor2D, Tensor2D) {
    let da_unit = d_sim.matmul(&cache.b_unit).expect("shapes fixed by forward");
    let db_unit = d_sim.matmul_tn(&cache.a_unit).expect("shapes fixed by forward");
    (
        normalize_rows_backward(&cache.a_unit, &cache.a_norms, &da_unit),
        normalize_rows_backward(&cache.b_unit, &cache.b_norms, &db_unit),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[[f64; 2]]) -> Tensor2D {
        Tensor2D::from_rows(rows).unwrap()
    }

    #[test]
    fn worked_examples() {
        assert_eq!(cosine_sim_matrix(&t(&[[1.0, 0.0]]), &t(&[[0.0, 1.0]])).unwrap().data(), &[0.0]);
        assert_eq!(cosine_sim_matrix(&t(&[[3.0, 4.0]]), &t(&[[3.0, 4.0]])).unwrap().data(), &[1.0]);
        let c = cosine_sim_matrix(&t(&[[1.0, 1.0]]), &t(&[[1.0, 0.0]])).unwrap();
        assert!((c.get(0, 0) - 0.7071).abs() < 1e-4);
    }

    #[test]
    fn zero_row_is_identified() {
        let err = cosine_sim_matrix(&t(&[[1.0, 0.0], [0.0, 0.0]]), &t(&[[1.0, 0.0]])).unwrap_err();
        assert!(matches!(err, Error::DegenerateVector { row: 1 }));
    }
}
