//! Small dense linear-algebra helpers shared by the GP, LMI and verification code.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// `(m + mᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Smallest eigenvalue of the symmetric part of `m`. Empty matrices yield `+∞`.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    match m.nrows() {
        0 => f64::INFINITY,
        1 => m[(0, 0)],
        2 => {
            let (a, d) = (m[(0, 0)], m[(1, 1)]);
            let b = 0.5 * (m[(0, 1)] + m[(1, 0)]);
            let mean = 0.5 * (a + d);
            let half = 0.5 * (a - d);
            mean - half.hypot(b)
        }
        _ => SymmetricEigen::new(symmetrize(m)).eigenvalues.min(),
    }
}

/// Largest eigenvalue of the symmetric part of `m`. Empty matrices yield `-∞`.
pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::NEG_INFINITY;
    }
    -min_eigenvalue(&(-m))
}

/// Cholesky factorization, retrying once with `jitter·I` added on failure.
///
/// Returns the factor and the jitter actually applied (0 when the first
/// attempt succeeded).
pub fn cholesky_with_jitter(
    m: &DMatrix<f64>,
    jitter: f64,
    what: &str,
) -> Result<(Cholesky<f64, Dyn>, f64)> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok((c, 0.0));
    }
    if jitter > 0.0 {
        let shifted = m + DMatrix::identity(m.nrows(), m.ncols()) * jitter;
        if let Some(c) = Cholesky::new(shifted) {
            return Ok((c, jitter));
        }
    }
    Err(Error::Factorization {
        what: what.to_string(),
        advice: format!(
            "jitter {jitter:.3e} was insufficient; increase the jitter or the noise level"
        ),
    })
}

/// Default fallback jitter for a Gram matrix: `1e-10 · trace / size`.
pub fn default_jitter(gram: &DMatrix<f64>) -> f64 {
    let n = gram.nrows().max(1) as f64;
    let tr = gram.trace().abs();
    if tr > 0.0 {
        1e-10 * tr / n
    } else {
        1e-10
    }
}

/// Principal square root of a symmetric PSD matrix. Eigenvalues in
/// `[-clip, 0)` are clamped to zero; anything more negative is an error.
pub fn psd_sqrt(m: &DMatrix<f64>, clip: f64) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -clip {
            return Err(Error::Numerical(format!(
                "matrix has eigenvalue {v:.3e} below the PSD tolerance -{clip:.1e}"
            )));
        }
        *v = v.max(0.0).sqrt();
    }
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&vals) * q.transpose())
}

/// Clamp the spectrum of a symmetric matrix at zero (tolerating `-clip`).
pub fn psd_clip(m: &DMatrix<f64>, clip: f64) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -clip {
            return Err(Error::Numerical(format!(
                "matrix has eigenvalue {v:.3e} below the PSD tolerance -{clip:.1e}"
            )));
        }
        *v = v.max(0.0);
    }
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&vals) * q.transpose())
}

/// `‖L⁻¹ A L‖₂` for `P = L Lᵀ`, i.e. the square root of the largest
/// generalized eigenvalue of `A P Aᵀ` relative to `P`.
///
/// This is the one-step contraction factor of `δ ↦ A δ` in the norm
/// `|δ|_{P⁻¹}`.
pub fn whitened_gain(a: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<f64> {
    let chol = Cholesky::new(symmetrize(p))
        .ok_or_else(|| Error::invalid("metric matrix P is not positive definite"))?;
    let l = chol.l();
    let al = a * &l;
    let w = chol
        .l()
        .solve_lower_triangular(&al)
        .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
    let gram = &w * w.transpose();
    Ok(max_eigenvalue(&gram).max(0.0).sqrt())
}

/// Norm `|v|_M = sqrt(vᵀ M v)`.
pub fn weighted_norm(v: &DVector<f64>, m: &DMatrix<f64>) -> f64 {
    (v.transpose() * m * v)[(0, 0)].max(0.0).sqrt()
}

/// Row-major nested vectors for JSON artifacts.
pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

pub fn from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != nc) {
        return Err(Error::invalid(format!("{what}: ragged matrix rows")));
    }
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

/// Block matrix `[[P, (A P)ᵀ], [A P, P]]`.
pub fn contraction_block(a: &DMatrix<f64>, p: &DMatrix<f64>) -> DMatrix<f64> {
    let n = p.nrows();
    let ap = a * p;
    let mut blk = DMatrix::zeros(2 * n, 2 * n);
    blk.view_mut((0, 0), (n, n)).copy_from(p);
    blk.view_mut((n, n), (n, n)).copy_from(p);
    blk.view_mut((n, 0), (n, n)).copy_from(&ap);
    blk.view_mut((0, n), (n, n)).copy_from(&ap.transpose());
    blk
}

/// `#[serde(with = "linalg::serde_rows")]` for `DMatrix<f64>` fields.
pub mod serde_rows {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        super::to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        super::from_rows(&rows, "matrix").map_err(serde::de::Error::custom)
    }
}

/// `#[serde(with = "linalg::serde_vec")]` for `DVector<f64>` fields.
pub mod serde_vec {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}
