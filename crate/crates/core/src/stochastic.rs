//! The learned closed loop as a stochastic system
//! `x⁺ = μ_c(x) + σ(x) ω`, `ω ~ N(0, I)`, with its second-moment
//! contraction check and Chebyshev-inflated Jacobian hulls.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::drift_gp::DriftModel;
use crate::error::{Error, Result};
use crate::grid::Domain;
use crate::linalg::{self, symmetrize};
use crate::synthesis::{enumerate_vertices, varying_entries, HullCell, VertexHull};
use crate::system::{Dynamics, FeedbackLaw, InputField, SystemModel};

/// Below this posterior standard deviation the analytic `∂σ_i` is replaced by
/// a one-sided finite-difference estimate.
pub const SIGMA_FLOOR: f64 = 1e-8;

const FD_STEP: f64 = 1e-6;

/// A closed loop with diagonal state-dependent diffusion.
pub trait StochasticSystem: Send + Sync {
    fn dim(&self) -> usize;
    fn control(&self, x: &DVector<f64>) -> f64;
    /// Noise-free successor `μ(x) + b(x) u`.
    fn mean_step(&self, x: &DVector<f64>, u: f64) -> DVector<f64>;
    /// Diagonal of `σ(x)`.
    fn diffusion(&self, x: &DVector<f64>) -> DVector<f64>;
}

/// `∂σ_i(x)` for each component; `flagged[i]` marks rows estimated by
/// finite differences because `σ_i(x)` fell below [`SIGMA_FLOOR`].
#[derive(Debug, Clone)]
pub struct SigmaJacobian {
    pub rows: Vec<DVector<f64>>,
    pub flagged: Vec<bool>,
}

impl SigmaJacobian {
    pub fn any_flagged(&self) -> bool {
        self.flagged.iter().any(|f| *f)
    }
}

pub fn sigma_jacobian(model: &DriftModel, x: &DVector<f64>) -> Result<SigmaJacobian> {
    let n = model.dim();
    let vars = model.variances(x)?;
    let grads = model.variance_gradients(x)?;
    let mut rows = Vec::with_capacity(n);
    let mut flagged = Vec::with_capacity(n);
    for i in 0..n {
        if !model.is_learned(i) {
            rows.push(DVector::zeros(n));
            flagged.push(false);
            continue;
        }
        let s = vars[i].sigma;
        if s >= SIGMA_FLOOR {
            rows.push(&grads[i] / (2.0 * s));
            flagged.push(false);
            continue;
        }
        // σ_i behaves like a cone near its zeros; take the steeper side per axis.
        let mut row = DVector::zeros(n);
        for a in 0..n {
            let mut fwd = x.clone();
            let mut bwd = x.clone();
            fwd[a] += FD_STEP;
            bwd[a] -= FD_STEP;
            let up = (model.variance(i, &fwd)?.sqrt() - s) / FD_STEP;
            let down = (model.variance(i, &bwd)?.sqrt() - s) / FD_STEP;
            row[a] = up.abs().max(down.abs());
        }
        rows.push(row);
        flagged.push(true);
    }
    Ok(SigmaJacobian { rows, flagged })
}

/// `Σ_i ∂σ_iᵀ (e_iᵀ P̄ e_i) ∂σ_i`.
pub fn noise_term(sigma_rows: &[DVector<f64>], p_bar: &DMatrix<f64>) -> DMatrix<f64> {
    let n = p_bar.nrows();
    let mut acc = DMatrix::zeros(n, n);
    for (i, r) in sigma_rows.iter().enumerate() {
        acc += r * r.transpose() * p_bar[(i, i)];
    }
    acc
}

/// `λ_min(P̄ − ∂μ_cᵀ P̄ ∂μ_c − Σ_i ∂σ_iᵀ P̄_ii ∂σ_i)`.
pub fn moment_margin(mean_jacobian: &DMatrix<f64>, sigma_rows: &[DVector<f64>], p_bar: &DMatrix<f64>) -> f64 {
    let a = mean_jacobian;
    let m = p_bar - a.transpose() * p_bar * a - noise_term(sigma_rows, p_bar);
    linalg::min_eigenvalue(&symmetrize(&m))
}

/// The learned drift's posterior mean closed with a feedback law, plus the
/// posterior standard deviations as diffusion.
#[derive(Clone)]
pub struct StochasticClosedLoop {
    drift: Arc<DriftModel>,
    mean: SystemModel,
    controller: Arc<dyn FeedbackLaw>,
    p_bar: DMatrix<f64>,
}

impl StochasticClosedLoop {
    pub fn new(
        drift: Arc<DriftModel>,
        input: InputField,
        controller: Arc<dyn FeedbackLaw>,
        p_bar: DMatrix<f64>,
    ) -> Result<Self> {
        let n = drift.dim();
        if controller.dim() != n {
            return Err(Error::dim("controller", n, controller.dim()));
        }
        if p_bar.nrows() != n || p_bar.ncols() != n {
            return Err(Error::dim("P̄", n, p_bar.nrows()));
        }
        if linalg::min_eigenvalue(&p_bar) <= 0.0 || (&p_bar - p_bar.transpose()).amax() > 1e-12 * p_bar.amax() {
            return Err(Error::invalid("P̄ must be symmetric positive definite"));
        }
        let dynamics: Arc<dyn Dynamics> = drift.clone();
        let mean = SystemModel::new(dynamics, input)?;
        Ok(StochasticClosedLoop {
            drift,
            mean,
            controller,
            p_bar,
        })
    }

    /// Uses `P̄ = P⁻¹` for a synthesized metric `P`, so that with `σ ≡ 0` the
    /// check is congruent to the block condition certified by synthesis.
    pub fn from_metric(
        drift: Arc<DriftModel>,
        input: InputField,
        controller: Arc<dyn FeedbackLaw>,
        p: &DMatrix<f64>,
    ) -> Result<Self> {
        let inv = symmetrize(p)
            .cholesky()
            .ok_or_else(|| Error::invalid("metric P must be positive definite"))?
            .inverse();
        Self::new(drift, input, controller, symmetrize(&inv))
    }

    pub fn p_bar(&self) -> &DMatrix<f64> {
        &self.p_bar
    }

    pub fn drift(&self) -> &DriftModel {
        &self.drift
    }

    pub fn model(&self) -> &SystemModel {
        &self.mean
    }

    /// `∂μ_c(x)`.
    pub fn mean_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.mean.closed_loop_jacobian(x, self.controller.as_ref())
    }

    pub fn sigma_jacobian(&self, x: &DVector<f64>) -> Result<SigmaJacobian> {
        sigma_jacobian(&self.drift, x)
    }
}

impl StochasticSystem for StochasticClosedLoop {
    fn dim(&self) -> usize {
        self.drift.dim()
    }

    fn control(&self, x: &DVector<f64>) -> f64 {
        self.controller.control(x)
    }

    fn mean_step(&self, x: &DVector<f64>, u: f64) -> DVector<f64> {
        self.mean.step(x, u)
    }

    fn diffusion(&self, x: &DVector<f64>) -> DVector<f64> {
        let n = self.drift.dim();
        match self.drift.variances(x) {
            Ok(v) => DVector::from_iterator(n, v.iter().map(|c| c.sigma)),
            Err(_) => DVector::from_element(n, f64::NAN),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MomentPoint {
    pub x: Vec<f64>,
    pub margin: f64,
    /// `λ_max` of the diffusion-gradient term.
    pub noise: f64,
    pub flagged: bool,
}

/// Result of the second-moment contraction check over a point set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MomentIesReport {
    pub points: Vec<MomentPoint>,
    /// Global minimum margin `ε̄`.
    pub min_margin: f64,
    pub worst_point: Vec<f64>,
    /// Largest noise term over the grid; a synthesis margin target at least
    /// this large leaves room for the diffusion.
    pub eps_noise: f64,
    pub flagged_points: usize,
    pub passed: bool,
}

impl MomentIesReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn moment_ies_check(lp: &StochasticClosedLoop, grid: &[DVector<f64>]) -> Result<MomentIesReport> {
    let n = lp.dim();
    let mut points = Vec::with_capacity(grid.len());
    for x in grid {
        if x.len() != n {
            return Err(Error::dim("grid point", n, x.len()));
        }
        let a = lp.mean_jacobian(x);
        let sj = lp.sigma_jacobian(x)?;
        let noise = linalg::max_eigenvalue(&noise_term(&sj.rows, &lp.p_bar)).max(0.0);
        points.push(MomentPoint {
            x: x.as_slice().to_vec(),
            margin: moment_margin(&a, &sj.rows, &lp.p_bar),
            noise,
            flagged: sj.any_flagged(),
        });
    }
    let worst = points
        .iter()
        .min_by(|a, b| a.margin.total_cmp(&b.margin))
        .ok_or_else(|| Error::invalid("moment check needs at least one grid point"))?;
    Ok(MomentIesReport {
        min_margin: worst.margin,
        worst_point: worst.x.clone(),
        eps_noise: points.iter().map(|p| p.noise).fold(0.0, f64::max),
        flagged_points: points.iter().filter(|p| p.flagged).count(),
        passed: worst.margin > 0.0,
        points,
    })
}

/// Jacobian hulls widened so that the true Jacobian row of every learned
/// component lies inside with probability at least `1 − n/c` per row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChebyshevHulls {
    pub hulls: VertexHull,
    pub c: f64,
    /// `(1 − n/c)ⁿ`.
    pub confidence: f64,
}

/// `(1 − n/c)ⁿ`, the joint probability that all `n` rows lie in their boxes.
pub fn chebyshev_confidence(n: usize, c: f64) -> Result<f64> {
    if !(c.is_finite() && c > n as f64) {
        return Err(Error::invalid(format!("Chebyshev constant c = {c} must exceed n = {n}")));
    }
    Ok((1.0 - n as f64 / c).powi(n as i32))
}

/// Entrywise Chebyshev half-widths `√(c · (v_{∂,i})_jj(x))`, row `i` per component.
pub fn chebyshev_half_widths(model: &DriftModel, x: &DVector<f64>, c: f64) -> Result<DMatrix<f64>> {
    chebyshev_confidence(model.dim(), c)?;
    let n = model.dim();
    let vars = model.variances(x)?;
    Ok(DMatrix::from_fn(n, n, |i, j| (c * vars[i].gradient_covariance[(j, j)]).max(0.0).sqrt()))
}

/// Samples per axis for the half-width maximum over a cell.
const CELL_SAMPLES: usize = 3;

/// Inflates every cell of `hulls` by the largest Chebyshev half-widths found
/// on a small grid over the cell (corners and center), then re-enumerates the
/// vertices.
pub fn chebyshev_hulls(model: &DriftModel, hulls: &VertexHull, c: f64) -> Result<ChebyshevHulls> {
    let n = model.dim();
    let confidence = chebyshev_confidence(n, c)?;
    if hulls.domain.dim() != n {
        return Err(Error::dim("hull domain", n, hulls.domain.dim()));
    }
    let mut cells = Vec::with_capacity(hulls.cells.len());
    for (ci, cell) in hulls.cells.iter().enumerate() {
        let mut widths = DMatrix::<f64>::zeros(n, n);
        for x in cell_samples(&cell.bounds) {
            let w = chebyshev_half_widths(model, &x, c)?;
            widths.zip_apply(&w, |a, b| *a = a.max(b));
        }
        let lo = &cell.entry_lower - &widths;
        let hi = &cell.entry_upper + &widths;
        let vertices = enumerate_vertices(&lo, &hi, &varying_entries(&lo, &hi), usize::MAX >> 1)
            .map_err(|e| Error::invalid(format!("cell {ci}: {e}")))?;
        cells.push(HullCell {
            bounds: cell.bounds.clone(),
            center: cell.center.clone(),
            entry_lower: lo,
            entry_upper: hi,
            vertices,
        });
    }
    Ok(ChebyshevHulls {
        hulls: VertexHull {
            domain: hulls.domain.clone(),
            subdivisions: hulls.subdivisions,
            inflation: hulls.inflation,
            cells,
        },
        c,
        confidence,
    })
}

fn cell_samples(bounds: &Domain) -> Vec<DVector<f64>> {
    bounds.grid(CELL_SAMPLES)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drift_gp::{fit_drift, DriftDataset};
    use crate::kernels::Kernel;
    use nalgebra::dvector;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn scalar_plug_in_margins() {
        let m = moment_margin(&scalar(0.5), &[dvector![0.1]], &scalar(1.0));
        assert!((m - 0.74).abs() < 1e-12);
        let m = moment_margin(&scalar(0.5), &[dvector![0.9]], &scalar(1.0));
        assert!((m + 0.06).abs() < 1e-12);
        let m = moment_margin(&scalar(0.5), &[dvector![0.0]], &scalar(1.0));
        assert!((m - 0.75).abs() < 1e-12);
    }

    fn single_point_model() -> DriftModel {
        let ds = DriftDataset::new(vec![dvector![0.0]], vec![dvector![0.0]], vec![0.0]).unwrap();
        fit_drift(&ds, &[Kernel::unit_gaussian(1)]).unwrap()
    }

    #[test]
    fn sigma_slope_closed_form() {
        let m = single_point_model();
        let sj = sigma_jacobian(&m, &dvector![1.0]).unwrap();
        let e = (-1.0f64).exp();
        let expected = e / (1.0 - e).sqrt();
        assert!((sj.rows[0][0] - expected).abs() < 1e-12);
        assert!((expected - 0.46271).abs() < 1e-5);
        assert!(!sj.flagged[0]);
    }

    #[test]
    fn sigma_slope_is_flagged_at_training_point() {
        let m = single_point_model();
        let sj = sigma_jacobian(&m, &dvector![0.0]).unwrap();
        assert!(sj.flagged[0]);
        // σ(x) ≈ |x| near the data point.
        assert!((sj.rows[0][0] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn prior_sigma_is_flat() {
        let ds = DriftDataset::new(Vec::new(), Vec::new(), vec![0.0]).unwrap();
        let m = fit_drift(&ds, &[Kernel::squared_exponential(1, 2.0, 1.0).unwrap()]).unwrap();
        let sj = sigma_jacobian(&m, &dvector![0.4]).unwrap();
        assert_eq!(sj.rows[0][0], 0.0);
    }

    #[test]
    fn confidence_and_half_widths() {
        assert_eq!(chebyshev_confidence(2, 40.0).unwrap(), 0.9025);
        assert!(chebyshev_confidence(2, 2.0).is_err());
        // Prior gradient covariance of this kernel is β Σ⁻¹ = diag(0.04, 0.01).
        let sigma = DMatrix::from_diagonal(&dvector![25.0, 100.0]);
        let k = Kernel::new(crate::kernels::KernelFamily::SquaredExponential, 1.0, sigma, 2).unwrap();
        let ds = DriftDataset::new(Vec::new(), Vec::new(), vec![0.0, 0.0]).unwrap();
        let m = fit_drift(&ds, &[k.clone(), k]).unwrap();
        let w = chebyshev_half_widths(&m, &dvector![0.3, -0.2], 25.0).unwrap();
        for i in 0..2 {
            assert!((w[(i, 0)] - 1.0).abs() < 1e-15 && (w[(i, 1)] - 0.5).abs() < 1e-15);
        }
    }
}
