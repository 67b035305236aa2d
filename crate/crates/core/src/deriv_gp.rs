//! Gaussian-process regression from gradient observations.
//!
//! A scalar function `p` with zero prior mean and kernel `k` is conditioned on
//! noisy gradient data `p̂⁽ⁱ⁾ = ∂p(x⁽ⁱ⁾) + ω`. The posterior mean
//!
//! ```text
//! m_p(x) = Σ_i ∂_{x'} k(x, x⁽ⁱ⁾) h⁽ⁱ⁾,   h = (K₀ + σ_p² I)⁻¹ Y_p
//! ```
//!
//! is smooth, and its gradient is available in closed form, so it is an
//! integrable feedback law whose gradient at the data points is (with
//! `σ_p = 0`) exactly the data. Both `m_p` and `∂m_p` are linear in `Y_p`;
//! [`DerivativeGp`] exposes those linear maps for LMI assembly.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::Kernel;
use crate::linalg;
use crate::FeedbackLaw;

/// Gradient observations `(x⁽ⁱ⁾, p̂⁽ⁱ⁾)` with isotropic noise `σ_p`.
#[derive(Debug, Clone)]
pub struct DerivativeDataset {
    points: Vec<DVector<f64>>,
    targets: Vec<DVector<f64>>,
    sigma_p: f64,
}

impl DerivativeDataset {
    pub fn new(points: Vec<DVector<f64>>, targets: Vec<DVector<f64>>, sigma_p: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("derivative dataset needs at least one point"));
        }
        if targets.len() != points.len() {
            return Err(Error::dim("targets", points.len(), targets.len()));
        }
        let n = points[0].len();
        for p in &points {
            if p.len() != n {
                return Err(Error::dim("points", n, p.len()));
            }
        }
        for t in &targets {
            if t.len() != n {
                return Err(Error::dim("targets", n, t.len()));
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("derivative targets must be finite"));
            }
        }
        if !(sigma_p >= 0.0 && sigma_p.is_finite()) {
            return Err(Error::invalid("sigma_p must be a nonnegative number"));
        }
        Ok(Self {
            points,
            targets,
            sigma_p,
        })
    }

    /// Builds a dataset from a stacked target vector `Y_p` (block `i` is `p̂⁽ⁱ⁾`).
    pub fn from_stacked(points: Vec<DVector<f64>>, stacked: &DVector<f64>, sigma_p: f64) -> Result<Self> {
        let n = points.first().map_or(0, |p| p.len());
        if stacked.len() != n * points.len() {
            return Err(Error::dim("stacked targets", n * points.len(), stacked.len()));
        }
        let targets = (0..points.len())
            .map(|i| stacked.rows(i * n, n).into_owned())
            .collect();
        Self::new(points, targets, sigma_p)
    }

    pub fn points(&self) -> &[DVector<f64>] {
        &self.points
    }

    pub fn targets(&self) -> &[DVector<f64>] {
        &self.targets
    }

    pub fn sigma_p(&self) -> f64 {
        self.sigma_p
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    /// `Y_p ∈ ℝ^{nN}`.
    pub fn stacked_targets(&self) -> DVector<f64> {
        let n = self.dim();
        let mut y = DVector::zeros(n * self.targets.len());
        for (i, t) in self.targets.iter().enumerate() {
            y.rows_mut(i * n, n).copy_from(t);
        }
        y
    }
}

/// Gram of cross-Hessians with metadata.
#[derive(Debug, Clone)]
pub struct GramK0 {
    pub matrix: DMatrix<f64>,
    /// Set when two data points coincide, which makes `K₀` singular.
    pub has_duplicates: bool,
}

/// `K₀`, whose `(i, j)` block is `∂²k(x⁽ⁱ⁾, x⁽ʲ⁾)`.
pub fn build_gram_k0(kernel: &Kernel, points: &[DVector<f64>]) -> Result<GramK0> {
    if points.is_empty() {
        return Err(Error::invalid("K0 needs at least one point"));
    }
    let n = kernel.dim();
    for p in points {
        if p.len() != n {
            return Err(Error::dim("points", n, p.len()));
        }
    }
    let big_n = points.len();
    let mut k0 = DMatrix::zeros(n * big_n, n * big_n);
    let mut has_duplicates = false;
    for i in 0..big_n {
        for j in 0..=i {
            let h = kernel.hess_cross_unchecked(&points[i], &points[j]);
            k0.view_mut((i * n, j * n), (n, n)).copy_from(&h);
            if i != j {
                k0.view_mut((j * n, i * n), (n, n)).copy_from(&h.transpose());
                if points[i] == points[j] {
                    has_duplicates = true;
                }
            }
        }
    }
    Ok(GramK0 {
        matrix: k0,
        has_duplicates,
    })
}

/// A derivative-GP prior fixed to a point set, with `K₀ + σ_p² I` factorized.
///
/// Conditioning on different target vectors reuses the factorization.
#[derive(Debug, Clone)]
pub struct DerivativeGp {
    kernel: Kernel,
    points: Vec<DVector<f64>>,
    sigma_p: f64,
    k0: GramK0,
    system: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    jitter_used: f64,
}

impl DerivativeGp {
    /// `jitter` is added to the diagonal only if factorizing `K₀ + σ_p² I`
    /// fails; `None` selects `1e-10 · tr(K₀) / (nN)`, `Some(0.0)` disables it.
    pub fn new(kernel: &Kernel, points: Vec<DVector<f64>>, sigma_p: f64, jitter: Option<f64>) -> Result<Self> {
        let k0 = build_gram_k0(kernel, &points)?;
        let size = k0.matrix.nrows();
        let system = &k0.matrix + DMatrix::identity(size, size) * (sigma_p * sigma_p);
        let jitter = jitter.unwrap_or_else(|| linalg::default_jitter(&k0.matrix));
        let (chol, jitter_used) = linalg::cholesky_with_jitter(&system, jitter, "K0 + sigma_p^2 I")
            .map_err(|e| match e {
                Error::Factorization { what, advice } => Error::Factorization {
                    what,
                    advice: if k0.has_duplicates {
                        format!("data points are duplicated; {advice}")
                    } else {
                        advice
                    },
                },
                other => other,
            })?;
        let system = if jitter_used > 0.0 {
            system + DMatrix::identity(size, size) * jitter_used
        } else {
            system
        };
        Ok(Self {
            kernel: kernel.clone(),
            points,
            sigma_p,
            k0,
            system,
            chol,
            jitter_used,
        })
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn points(&self) -> &[DVector<f64>] {
        &self.points
    }

    pub fn k0(&self) -> &GramK0 {
        &self.k0
    }

    pub fn jitter_used(&self) -> f64 {
        self.jitter_used
    }

    /// Weights `h_p` for targets `Y_p`, with one step of iterative refinement.
    pub fn weights(&self, stacked: &DVector<f64>) -> Result<DVector<f64>> {
        if stacked.len() != self.system.nrows() {
            return Err(Error::dim("stacked targets", self.system.nrows(), stacked.len()));
        }
        if stacked.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("derivative targets must be finite"));
        }
        let mut h = self.chol.solve(stacked);
        let residual = stacked - &self.system * &h;
        h += self.chol.solve(&residual);
        Ok(h)
    }

    /// Cross-covariance rows `[∂²k(x, x⁽ʲ⁾)]_j` (n × nN).
    fn hess_row(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let n = self.kernel.dim();
        let mut row = DMatrix::zeros(n, n * self.points.len());
        for (j, pj) in self.points.iter().enumerate() {
            row.view_mut((0, j * n), (n, n))
                .copy_from(&self.kernel.hess_cross_unchecked(x, pj));
        }
        row
    }

    /// The n × nN matrix `G` with `∂m_p(x)ᵀ = G Y_p`.
    pub fn gradient_map(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_point(x)?;
        let row = self.hess_row(x);
        // (K + σ²I) symmetric, so G = row · S⁻¹ = (S⁻¹ rowᵀ)ᵀ.
        Ok(self.chol.solve(&row.transpose()).transpose())
    }

    /// The 1 × nN row `g` with `m_p(x) = g Y_p`.
    pub fn value_map(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_point(x)?;
        let n = self.kernel.dim();
        let mut row = DVector::zeros(n * self.points.len());
        for (j, pj) in self.points.iter().enumerate() {
            row.rows_mut(j * n, n)
                .copy_from(&self.kernel.grad_x2_unchecked(x, pj));
        }
        Ok(self.chol.solve(&row))
    }

    fn check_point(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.kernel.dim() {
            return Err(Error::dim("x", self.kernel.dim(), x.len()));
        }
        Ok(())
    }

    /// Posterior-mean controller for targets `Y_p`.
    pub fn condition(&self, stacked: &DVector<f64>) -> Result<DerivativeController> {
        let weights = self.weights(stacked)?;
        Ok(DerivativeController {
            kernel: self.kernel.clone(),
            points: self.points.clone(),
            weights,
            value_points: Vec::new(),
            value_weights: DVector::zeros(0),
            offset: 0.0,
            anchor: None,
            metric: None,
            sigma_p: self.sigma_p,
            jitter_used: self.jitter_used,
        })
    }
}

/// Fits the derivative GP to `dataset`.
pub fn fit(kernel: &Kernel, dataset: &DerivativeDataset, jitter: Option<f64>) -> Result<DerivativeController> {
    if dataset.dim() != kernel.dim() {
        return Err(Error::dim("dataset points", kernel.dim(), dataset.dim()));
    }
    let gp = DerivativeGp::new(kernel, dataset.points.clone(), dataset.sigma_p, jitter)?;
    gp.condition(&dataset.stacked_targets())
}

/// A value observation `p(x) = y`.
#[derive(Debug, Clone)]
pub struct ValueObservation {
    pub point: DVector<f64>,
    pub value: f64,
}

/// Posterior mean conditioned jointly on gradient data and value data.
///
/// Value observations carry noise `sigma`; with `sigma = 0` the mean passes
/// through each `(x, y)`. An empty value list reduces to [`fit`].
pub fn fit_with_values(
    kernel: &Kernel,
    dataset: &DerivativeDataset,
    values: &[ValueObservation],
    sigma: f64,
    jitter: Option<f64>,
) -> Result<DerivativeController> {
    if values.is_empty() {
        return fit(kernel, dataset, jitter);
    }
    if dataset.dim() != kernel.dim() {
        return Err(Error::dim("dataset points", kernel.dim(), dataset.dim()));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid("value noise sigma must be nonnegative"));
    }
    let n = kernel.dim();
    for v in values {
        if v.point.len() != n {
            return Err(Error::dim("value point", n, v.point.len()));
        }
        if !v.value.is_finite() {
            return Err(Error::invalid("value observations must be finite"));
        }
    }
    let nd = n * dataset.points.len();
    let nv = values.len();
    let k0 = build_gram_k0(kernel, &dataset.points)?;
    let mut gram = DMatrix::zeros(nd + nv, nd + nv);
    gram.view_mut((0, 0), (nd, nd)).copy_from(&k0.matrix);
    for (l, vl) in values.iter().enumerate() {
        for (j, pj) in dataset.points.iter().enumerate() {
            // Cov(p(v_l), ∂p(x_j)) = ∂k(v_l, x_j)/∂x'
            let g = kernel.grad_x2_unchecked(&vl.point, pj);
            for a in 0..n {
                gram[(nd + l, j * n + a)] = g[a];
                gram[(j * n + a, nd + l)] = g[a];
            }
        }
        for (m, vm) in values.iter().enumerate().take(l + 1) {
            let k = kernel.eval_unchecked(&vl.point, &vm.point);
            gram[(nd + l, nd + m)] = k;
            gram[(nd + m, nd + l)] = k;
        }
    }
    for i in 0..nd {
        gram[(i, i)] += dataset.sigma_p * dataset.sigma_p;
    }
    for l in 0..nv {
        gram[(nd + l, nd + l)] += sigma * sigma;
    }
    let jitter = jitter.unwrap_or_else(|| linalg::default_jitter(&gram));
    let (chol, jitter_used) = linalg::cholesky_with_jitter(&gram, jitter, "joint value/derivative Gram")?;
    let mut y = DVector::zeros(nd + nv);
    y.rows_mut(0, nd).copy_from(&dataset.stacked_targets());
    for (l, v) in values.iter().enumerate() {
        y[nd + l] = v.value;
    }
    let system = if jitter_used > 0.0 {
        &gram + DMatrix::identity(nd + nv, nd + nv) * jitter_used
    } else {
        gram
    };
    let mut w = chol.solve(&y);
    let residual = &y - &system * &w;
    w += chol.solve(&residual);
    Ok(DerivativeController {
        kernel: kernel.clone(),
        points: dataset.points.clone(),
        weights: w.rows(0, nd).into_owned(),
        value_points: values.iter().map(|v| v.point.clone()).collect(),
        value_weights: w.rows(nd, nv).into_owned(),
        offset: 0.0,
        anchor: None,
        metric: None,
        sigma_p: dataset.sigma_p,
        jitter_used,
    })
}

/// A fitted posterior-mean feedback law `u = m_p(x) - offset`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "ControllerArtifact", into = "ControllerArtifact")]
pub struct DerivativeController {
    kernel: Kernel,
    points: Vec<DVector<f64>>,
    weights: DVector<f64>,
    value_points: Vec<DVector<f64>>,
    value_weights: DVector<f64>,
    offset: f64,
    anchor: Option<DVector<f64>>,
    metric: Option<DMatrix<f64>>,
    sigma_p: f64,
    jitter_used: f64,
}

impl DerivativeController {
    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn points(&self) -> &[DVector<f64>] {
        &self.points
    }

    /// `h_p`, stacked in data-point order.
    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn anchor(&self) -> Option<&DVector<f64>> {
        self.anchor.as_ref()
    }

    pub fn metric(&self) -> Option<&DMatrix<f64>> {
        self.metric.as_ref()
    }

    pub fn sigma_p(&self) -> f64 {
        self.sigma_p
    }

    pub fn jitter_used(&self) -> f64 {
        self.jitter_used
    }

    pub fn dim(&self) -> usize {
        self.kernel.dim()
    }

    pub fn with_metric(mut self, p: DMatrix<f64>) -> Self {
        self.metric = Some(p);
        self
    }

    /// Shifts the law so that `u(x*) = 0`; the gradient is unchanged.
    pub fn with_equilibrium(mut self, x_star: DVector<f64>) -> Result<Self> {
        self.offset = 0.0;
        let m = self.eval_control(&x_star)?;
        self.offset = m;
        self.anchor = Some(x_star);
        Ok(self)
    }

    fn check(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::dim("x", self.dim(), x.len()));
        }
        Ok(())
    }

    /// Posterior mean minus the stored offset.
    pub fn eval_control(&self, x: &DVector<f64>) -> Result<f64> {
        self.check(x)?;
        Ok(self.eval_unchecked(x))
    }

    /// Exact gradient of [`eval_control`](Self::eval_control), as a column vector.
    pub fn eval_control_grad(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(x)?;
        Ok(self.grad_unchecked(x))
    }

    fn eval_unchecked(&self, x: &DVector<f64>) -> f64 {
        let n = self.dim();
        let mut m = 0.0;
        for (j, pj) in self.points.iter().enumerate() {
            let hj = self.weights.rows(j * n, n);
            m += self.kernel.grad_x2_unchecked(x, pj).dot(&hj);
        }
        for (vl, gl) in self.value_points.iter().zip(self.value_weights.iter()) {
            m += self.kernel.eval_unchecked(x, vl) * gl;
        }
        m - self.offset
    }

    fn grad_unchecked(&self, x: &DVector<f64>) -> DVector<f64> {
        let n = self.dim();
        let mut g = DVector::zeros(n);
        for (j, pj) in self.points.iter().enumerate() {
            let hj = self.weights.rows(j * n, n);
            g += self.kernel.hess_cross_unchecked(x, pj) * hj;
        }
        for (vl, gl) in self.value_points.iter().zip(self.value_weights.iter()) {
            g += self.kernel.grad_x2_unchecked(vl, x) * *gl;
        }
        g
    }

    pub fn save_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

impl FeedbackLaw for DerivativeController {
    fn dim(&self) -> usize {
        self.kernel.dim()
    }

    fn control(&self, x: &DVector<f64>) -> f64 {
        self.eval_unchecked(x)
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.grad_unchecked(x)
    }
}

/// JSON controller artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControllerArtifact {
    pub kernel: Kernel,
    pub points: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub offset: f64,
    pub metric: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub value_points: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub value_weights: Vec<f64>,
    #[serde(default)]
    pub sigma_p: f64,
    #[serde(default)]
    pub jitter_used: f64,
}

impl From<DerivativeController> for ControllerArtifact {
    fn from(c: DerivativeController) -> Self {
        ControllerArtifact {
            kernel: c.kernel,
            points: c.points.iter().map(|p| p.iter().copied().collect()).collect(),
            weights: c.weights.iter().copied().collect(),
            offset: c.offset,
            metric: c.metric.as_ref().map(linalg::to_rows),
            anchor: c.anchor.map(|a| a.iter().copied().collect()),
            value_points: c.value_points.iter().map(|p| p.iter().copied().collect()).collect(),
            value_weights: c.value_weights.iter().copied().collect(),
            sigma_p: c.sigma_p,
            jitter_used: c.jitter_used,
        }
    }
}

impl TryFrom<ControllerArtifact> for DerivativeController {
    type Error = Error;

    fn try_from(a: ControllerArtifact) -> Result<Self> {
        let n = a.kernel.dim();
        let to_vec = |v: &Vec<f64>, what: &'static str| -> Result<DVector<f64>> {
            if v.len() != n {
                return Err(Error::dim(what, n, v.len()));
            }
            Ok(DVector::from_column_slice(v))
        };
        let points = a
            .points
            .iter()
            .map(|p| to_vec(p, "controller points"))
            .collect::<Result<Vec<_>>>()?;
        if a.weights.len() != n * points.len() {
            return Err(Error::dim("controller weights", n * points.len(), a.weights.len()));
        }
        let value_points = a
            .value_points
            .iter()
            .map(|p| to_vec(p, "controller value points"))
            .collect::<Result<Vec<_>>>()?;
        if a.value_weights.len() != value_points.len() {
            return Err(Error::dim("controller value weights", value_points.len(), a.value_weights.len()));
        }
        let metric = a
            .metric
            .as_ref()
            .map(|m| linalg::from_rows(m, "controller metric"))
            .transpose()?;
        let anchor = a.anchor.as_ref().map(|v| to_vec(v, "controller anchor")).transpose()?;
        Ok(DerivativeController {
            kernel: a.kernel,
            points,
            weights: DVector::from_vec(a.weights),
            value_points,
            value_weights: DVector::from_vec(a.value_weights),
            offset: a.offset,
            anchor,
            metric,
            sigma_p: a.sigma_p,
            jitter_used: a.jitter_used,
        })
    }
}
