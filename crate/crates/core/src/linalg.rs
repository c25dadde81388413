//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// `log |A|` for a symmetric positive-definite `A`.
pub fn log_det_spd(a: &DMatrix<f64>) -> Result<f64> {
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvariantViolation("matrix not positive definite".into()))?;
    Ok(2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

/// Diagonal of `C⁻¹` from the Cholesky factor `C = L Lᵀ`:
/// `(C⁻¹)_ii = Σ_k (L⁻¹)_ki²`.
pub fn inverse_diagonal(l: &DMatrix<f64>) -> Result<Vec<f64>> {
    let n = l.nrows();
    let linv = l
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or_else(|| Error::InvariantViolation("singular triangular factor".into()))?;
    Ok((0..n)
        .map(|i| linv.column(i).iter().map(|v| v * v).sum())
        .collect())
}

pub fn logsumexp(values: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + values.into_iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}
