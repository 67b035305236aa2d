//! Positive-definite kernels with analytic first and cross-second derivatives.
//!
//! All derivatives are closed-form per family. For a kernel `k(x, x')`:
//!
//! * [`Kernel::grad_x2`] is the row `∂k/∂x'`,
//! * [`Kernel::grad_x1`] is the row `∂k/∂x` (by symmetry, `grad_x2(x', x)`),
//! * [`Kernel::hess_cross`] is the matrix `∂²k/∂x∂x'` with entry `(a, b) = ∂²k/∂x_a∂x'_b`.
//!
//! The length-scale matrix `Σ` is held by its Cholesky factor, so `Σ⁻¹ v`
//! is always two triangular solves.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelFamily {
    /// `β exp(-|x - x'|²_{Σ⁻¹} / 2)`
    SquaredExponential,
    /// `β xᵀ Σ⁻¹ x'`
    Linear,
    /// `β (1 + xᵀ Σ⁻¹ x')^d`
    Polynomial,
}

/// JSON form of a kernel: `{family, beta, sigma (row-major), degree?}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub beta: f64,
    pub sigma: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degree: Option<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "KernelSpec", into = "KernelSpec")]
pub struct Kernel {
    family: KernelFamily,
    beta: f64,
    sigma: DMatrix<f64>,
    sigma_chol: Cholesky<f64, Dyn>,
    sigma_inv: DMatrix<f64>,
    degree: u32,
}

impl TryFrom<KernelSpec> for Kernel {
    type Error = Error;

    fn try_from(spec: KernelSpec) -> Result<Self> {
        let sigma = linalg::from_rows(&spec.sigma, "kernel sigma")?;
        Kernel::new(spec.family, spec.beta, sigma, spec.degree.unwrap_or(2))
    }
}

impl From<Kernel> for KernelSpec {
    fn from(k: Kernel) -> Self {
        KernelSpec {
            family: k.family,
            beta: k.beta,
            sigma: linalg::to_rows(&k.sigma),
            degree: (k.family == KernelFamily::Polynomial).then_some(k.degree),
        }
    }
}

impl Kernel {
    pub fn new(family: KernelFamily, beta: f64, sigma: DMatrix<f64>, degree: u32) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::invalid(format!("kernel beta must be positive, got {beta}")));
        }
        if sigma.nrows() == 0 || sigma.nrows() != sigma.ncols() {
            return Err(Error::invalid("kernel sigma must be a non-empty square matrix"));
        }
        if (&sigma - sigma.transpose()).amax() > 1e-12 * (1.0 + sigma.amax()) {
            return Err(Error::invalid("kernel sigma must be symmetric"));
        }
        if family == KernelFamily::Polynomial && degree == 0 {
            return Err(Error::invalid("polynomial kernel degree must be positive"));
        }
        let sigma_chol = Cholesky::new(sigma.clone())
            .ok_or_else(|| Error::invalid("kernel sigma must be positive definite"))?;
        let sigma_inv = linalg::symmetrize(&sigma_chol.inverse());
        Ok(Kernel {
            family,
            beta,
            sigma,
            sigma_chol,
            sigma_inv,
            degree,
        })
    }

    /// Squared-exponential kernel with `Σ = ℓ² I`.
    pub fn squared_exponential(dim: usize, beta: f64, length_scale: f64) -> Result<Self> {
        Self::new(
            KernelFamily::SquaredExponential,
            beta,
            DMatrix::identity(dim, dim) * (length_scale * length_scale),
            2,
        )
    }

    /// The unit Gaussian kernel `exp(-|x - x'|² / 2)`.
    pub fn unit_gaussian(dim: usize) -> Self {
        Self::squared_exponential(dim, 1.0, 1.0).expect("identity length scale is valid")
    }

    pub fn linear(dim: usize, beta: f64) -> Result<Self> {
        Self::new(KernelFamily::Linear, beta, DMatrix::identity(dim, dim), 1)
    }

    pub fn polynomial(dim: usize, beta: f64, degree: u32) -> Result<Self> {
        Self::new(KernelFamily::Polynomial, beta, DMatrix::identity(dim, dim), degree)
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn degree(&self) -> u32 {
        self.degree
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }

    fn check(&self, x: &DVector<f64>, xp: &DVector<f64>) -> Result<()> {
        let n = self.dim();
        if x.len() != n {
            return Err(Error::dim("x", n, x.len()));
        }
        if xp.len() != n {
            return Err(Error::dim("x'", n, xp.len()));
        }
        Ok(())
    }

    fn solve_sigma(&self, v: &DVector<f64>) -> DVector<f64> {
        self.sigma_chol.solve(v)
    }

    /// `k(x, x')`.
    pub fn eval(&self, x: &DVector<f64>, xp: &DVector<f64>) -> Result<f64> {
        self.check(x, xp)?;
        Ok(self.eval_unchecked(x, xp))
    }

    /// Row `∂k(x, x')/∂x'`.
    pub fn grad_x2(&self, x: &DVector<f64>, xp: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(x, xp)?;
        Ok(self.grad_x2_unchecked(x, xp))
    }

    /// Row `∂k(x, x')/∂x`.
    pub fn grad_x1(&self, x: &DVector<f64>, xp: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(x, xp)?;
        Ok(self.grad_x2_unchecked(xp, x))
    }

    /// `∂²k(x, x')/∂x∂x'`.
    pub fn hess_cross(&self, x: &DVector<f64>, xp: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check(x, xp)?;
        Ok(self.hess_cross_unchecked(x, xp))
    }

    pub(crate) fn eval_unchecked(&self, x: &DVector<f64>, xp: &DVector<f64>) -> f64 {
        match self.family {
            KernelFamily::SquaredExponential => {
                let d = x - xp;
                let w = self.solve_sigma(&d);
                self.beta * (-0.5 * d.dot(&w)).exp()
            }
            KernelFamily::Linear => self.beta * x.dot(&self.solve_sigma(xp)),
            KernelFamily::Polynomial => {
                let s = 1.0 + x.dot(&self.solve_sigma(xp));
                self.beta * s.powi(self.degree as i32)
            }
        }
    }

    pub(crate) fn grad_x2_unchecked(&self, x: &DVector<f64>, xp: &DVector<f64>) -> DVector<f64> {
        match self.family {
            KernelFamily::SquaredExponential => {
                let d = x - xp;
                let w = self.solve_sigma(&d);
                let k = self.beta * (-0.5 * d.dot(&w)).exp();
                w * k
            }
            KernelFamily::Linear => self.solve_sigma(x) * self.beta,
            KernelFamily::Polynomial => {
                let wx = self.solve_sigma(x);
                let s = 1.0 + wx.dot(xp);
                let d = self.degree as i32;
                wx * (self.beta * d as f64 * s.powi(d - 1))
            }
        }
    }

    pub(crate) fn hess_cross_unchecked(&self, x: &DVector<f64>, xp: &DVector<f64>) -> DMatrix<f64> {
        let n = self.dim();
        let sigma_inv = self.sigma_inv.clone();
        match self.family {
            KernelFamily::SquaredExponential => {
                let d = x - xp;
                let w = self.solve_sigma(&d);
                let k = self.beta * (-0.5 * d.dot(&w)).exp();
                (sigma_inv - &w * w.transpose()) * k
            }
            KernelFamily::Linear => sigma_inv * self.beta,
            KernelFamily::Polynomial => {
                let wx = self.solve_sigma(x);
                let wxp = self.solve_sigma(xp);
                let s = 1.0 + wx.dot(xp);
                let d = self.degree as i32;
                let mut h = sigma_inv * s.powi(d - 1);
                if d >= 2 {
                    h += (&wxp * wx.transpose()) * ((d - 1) as f64 * s.powi(d - 2));
                }
                debug_assert_eq!(h.nrows(), n);
                h * (self.beta * d as f64)
            }
        }
    }

    /// Gram matrix `[k(x_i, x_j)]`.
    pub fn gram(&self, points: &[DVector<f64>]) -> Result<DMatrix<f64>> {
        for p in points {
            if p.len() != self.dim() {
                return Err(Error::dim("points", self.dim(), p.len()));
            }
        }
        let n = points.len();
        let mut g = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = self.eval_unchecked(&points[i], &points[j]);
                g[(i, j)] = v;
                g[(j, i)] = v;
            }
        }
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    fn v1(x: f64) -> DVector<f64> {
        dvector![x]
    }

    #[test]
    fn se_eval_examples() {
        let k = Kernel::unit_gaussian(1);
        assert_eq!(k.eval(&v1(0.0), &v1(0.0)).unwrap(), 1.0);
        assert!((k.eval(&v1(1.0), &v1(0.0)).unwrap() - (-0.5f64).exp()).abs() < 1e-15);
        let k = Kernel::squared_exponential(1, 2.0, 2.0).unwrap();
        let expected = 2.0 * (-0.5f64).exp();
        assert!((k.eval(&v1(2.0), &v1(0.0)).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 1.21306).abs() < 1e-5);
    }

    #[test]
    fn se_grad_examples() {
        let k = Kernel::unit_gaussian(1);
        assert_eq!(k.grad_x2(&v1(0.0), &v1(0.0)).unwrap()[0], 0.0);
        let g = k.grad_x2(&v1(1.0), &v1(0.0)).unwrap();
        assert!((g[0] - (-0.5f64).exp()).abs() < 1e-15);
        let k2 = Kernel::unit_gaussian(2);
        let g = k2.grad_x2(&dvector![1.0, 0.0], &dvector![0.0, 0.0]).unwrap();
        assert!((g[0] - (-0.5f64).exp()).abs() < 1e-15);
        assert_eq!(g[1], 0.0);
    }

    #[test]
    fn se_hess_examples() {
        for n in 1..=3 {
            let k = Kernel::unit_gaussian(n);
            let x = DVector::from_fn(n, |i, _| 0.3 * i as f64 - 0.2);
            let h = k.hess_cross(&x, &x).unwrap();
            assert!((h - DMatrix::<f64>::identity(n, n)).amax() < 1e-15);
        }
        let k = Kernel::unit_gaussian(1);
        assert!(k.hess_cross(&v1(1.0), &v1(0.0)).unwrap()[(0, 0)].abs() < 1e-15);
        let k = Kernel::squared_exponential(1, 3.0, 0.5).unwrap();
        let h = k.hess_cross(&v1(0.7), &v1(0.7)).unwrap();
        assert!((h[(0, 0)] - 12.0).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_names_argument() {
        let k = Kernel::unit_gaussian(2);
        let err = k.eval(&dvector![1.0, 2.0], &v1(0.0)).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { argument: "x'", .. }));
        let err = k.hess_cross(&v1(0.0), &dvector![1.0, 2.0]).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { argument: "x", .. }));
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(Kernel::squared_exponential(1, 0.0, 1.0).is_err());
        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(Kernel::new(KernelFamily::SquaredExponential, 1.0, indefinite, 2).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        assert!(Kernel::new(KernelFamily::SquaredExponential, 1.0, asym, 2).is_err());
        assert!(Kernel::polynomial(2, 1.0, 0).is_err());
    }

    #[test]
    fn polynomial_degree_one_is_affine_linear() {
        let k = Kernel::polynomial(2, 1.5, 1).unwrap();
        let x = dvector![0.3, -1.2];
        let xp = dvector![2.0, 0.5];
        let lin = Kernel::linear(2, 1.5).unwrap();
        let diff = k.eval(&x, &xp).unwrap() - lin.eval(&x, &xp).unwrap();
        assert!((diff - 1.5).abs() < 1e-14);
        assert!((k.hess_cross(&x, &xp).unwrap() - lin.hess_cross(&x, &xp).unwrap()).amax() < 1e-14);
    }

    #[test]
    fn json_round_trip_preserves_kernel() {
        let sigma = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 0.7]);
        let k = Kernel::new(KernelFamily::Polynomial, 0.8, sigma, 3).unwrap();
        let s = serde_json::to_string(&k).unwrap();
        let back: Kernel = serde_json::from_str(&s).unwrap();
        assert_eq!(back.family(), KernelFamily::Polynomial);
        assert_eq!(back.degree(), 3);
        assert_eq!(back.sigma(), k.sigma());
        assert!(s.contains("\"family\":\"polynomial\""));
        let se: Kernel = serde_json::from_str(
            r#"{"family":"squared-exponential","beta":1.0,"sigma":[[1.0]]}"#,
        )
        .unwrap();
        assert_eq!(se.family(), KernelFamily::SquaredExponential);
    }
}
