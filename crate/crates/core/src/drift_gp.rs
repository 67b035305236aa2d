//! Per-component GP regression of a drift field `f` from noisy samples
//! `y_i = f_i(x) + ω`, with analytic posterior means, gradients and
//! (co)variances of values and gradients.
//!
//! With recorded inputs `u`, each component uses the kernel `k(x, x') + u u'`,
//! so the posterior mean is affine in `u`: `μ̄_i(x, u) = μ_i(x) + b̂_i u`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::Kernel;
use crate::linalg::{self, symmetrize};
use crate::system::Dynamics;

/// Training data: points `x⁽ʲ⁾`, per-component targets, per-component noise
/// levels, and optionally the applied scalar inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftDataset {
    points: Vec<DVector<f64>>,
    targets: Vec<DVector<f64>>,
    sigma_y: Vec<f64>,
    inputs: Option<Vec<f64>>,
}

impl DriftDataset {
    /// `targets[j]` is the observed n-vector at `points[j]`.
    pub fn new(points: Vec<DVector<f64>>, targets: Vec<DVector<f64>>, sigma_y: Vec<f64>) -> Result<Self> {
        let n = sigma_y.len();
        if n == 0 {
            return Err(Error::invalid("sigma_y must list one noise level per component"));
        }
        if points.len() != targets.len() {
            return Err(Error::dim("targets", points.len(), targets.len()));
        }
        for (p, t) in points.iter().zip(&targets) {
            if p.len() != n {
                return Err(Error::dim("point", n, p.len()));
            }
            if t.len() != n {
                return Err(Error::dim("target", n, t.len()));
            }
            if p.iter().chain(t.iter()).any(|v| !v.is_finite()) {
                return Err(Error::invalid("training data must be finite"));
            }
        }
        if sigma_y.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::invalid("sigma_y must be nonnegative"));
        }
        let per_component = (0..n)
            .map(|i| DVector::from_iterator(targets.len(), targets.iter().map(|t| t[i])))
            .collect();
        Ok(DriftDataset {
            points,
            targets: per_component,
            sigma_y,
            inputs: None,
        })
    }

    pub fn with_inputs(mut self, inputs: Vec<f64>) -> Result<Self> {
        if inputs.len() != self.points.len() {
            return Err(Error::dim("inputs", self.points.len(), inputs.len()));
        }
        if inputs.iter().any(|u| !u.is_finite()) {
            return Err(Error::invalid("inputs must be finite"));
        }
        self.inputs = Some(inputs);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.sigma_y.len()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[DVector<f64>] {
        &self.points
    }

    /// Targets of component `i` across all points.
    pub fn component(&self, i: usize) -> &DVector<f64> {
        &self.targets[i]
    }

    pub fn sigma_y(&self) -> &[f64] {
        &self.sigma_y
    }

    pub fn inputs(&self) -> Option<&[f64]> {
        self.inputs.as_deref()
    }

    /// CSV with columns `x_1..x_n, y_1..y_n[, u]`.
    pub fn to_csv(&self) -> String {
        let n = self.dim();
        let mut header: Vec<String> = (1..=n).map(|i| format!("x_{i}")).collect();
        header.extend((1..=n).map(|i| format!("y_{i}")));
        if self.inputs.is_some() {
            header.push("u".into());
        }
        let mut out = header.join(",");
        out.push('\n');
        for (j, p) in self.points.iter().enumerate() {
            let mut row: Vec<String> = p.iter().map(|v| format!("{v:e}")).collect();
            row.extend(self.targets.iter().map(|t| format!("{:e}", t[j])));
            if let Some(u) = &self.inputs {
                row.push(format!("{:e}", u[j]));
            }
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// Parses [`DriftDataset::to_csv`] output; the noise levels are not part of the file.
    pub fn from_csv(text: &str, sigma_y: Vec<f64>) -> Result<Self> {
        let n = sigma_y.len();
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| Error::invalid("training CSV is empty"))?
            .split(',')
            .map(str::trim)
            .collect();
        let has_u = match header.len() {
            c if c == 2 * n => false,
            c if c == 2 * n + 1 && header[2 * n] == "u" => true,
            c => {
                return Err(Error::invalid(format!(
                    "training CSV has {c} columns; expected x_1..x_{n}, y_1..y_{n}[, u]"
                )))
            }
        };
        let mut points = Vec::new();
        let mut targets = Vec::new();
        let mut inputs = Vec::new();
        for (ln, line) in lines.enumerate() {
            let vals = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::invalid(format!("training CSV row {}: {e}", ln + 2)))?;
            if vals.len() != header.len() {
                return Err(Error::invalid(format!(
                    "training CSV row {} has {} fields, expected {}",
                    ln + 2,
                    vals.len(),
                    header.len()
                )));
            }
            points.push(DVector::from_column_slice(&vals[..n]));
            targets.push(DVector::from_column_slice(&vals[n..2 * n]));
            if has_u {
                inputs.push(vals[2 * n]);
            }
        }
        let ds = DriftDataset::new(points, targets, sigma_y)?;
        if has_u {
            ds.with_inputs(inputs)
        } else {
            Ok(ds)
        }
    }
}

/// How to model one drift component.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ComponentSpec {
    Learn { kernel: Kernel },
    /// Known affine component `f_i(x) = offset + gradient · x`.
    Fixed { gradient: Vec<f64>, offset: f64 },
}

#[derive(Debug, Clone)]
struct LearnedComponent {
    kernel: Kernel,
    sigma_y: f64,
    weights: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    jitter_used: f64,
}

#[derive(Debug, Clone)]
enum Component {
    Learned(LearnedComponent),
    Fixed { gradient: DVector<f64>, offset: f64 },
}

/// Posterior spread of one component at a point.
#[derive(Debug, Clone)]
pub struct ComponentVariance {
    /// `v_i(x, x)`.
    pub variance: f64,
    /// `σ_i(x) = √v_i(x, x)`.
    pub sigma: f64,
    /// `v_{∂,i}(x, x)`, symmetrized and clipped to PSD.
    pub gradient_covariance: DMatrix<f64>,
    /// Principal square root `σ_{∂,i}(x)`.
    pub gradient_sigma: DMatrix<f64>,
}

/// A fitted drift model; implements [`Dynamics`] through its posterior mean.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "DriftArtifact", into = "DriftArtifact")]
pub struct DriftModel {
    dim: usize,
    points: Vec<DVector<f64>>,
    inputs: Option<Vec<f64>>,
    components: Vec<Component>,
}

/// Variance tolerance before clipping turns into an error.
const VARIANCE_TOL: f64 = 1e-10;

pub fn fit_drift(dataset: &DriftDataset, kernels: &[Kernel]) -> Result<DriftModel> {
    let specs: Vec<ComponentSpec> = kernels
        .iter()
        .map(|k| ComponentSpec::Learn { kernel: k.clone() })
        .collect();
    fit_drift_with(dataset, &specs, None)
}

/// Fits with recorded inputs using the kernel `k_i + u u'`.
pub fn fit_drift_with_input(dataset: &DriftDataset, kernels: &[Kernel]) -> Result<DriftModel> {
    if dataset.inputs().is_none() {
        return Err(Error::invalid("dataset has no recorded inputs"));
    }
    fit_drift(dataset, kernels)
}

/// Fits each learned component; `jitter` as in [`crate::deriv_gp::DerivativeGp::new`].
pub fn fit_drift_with(dataset: &DriftDataset, specs: &[ComponentSpec], jitter: Option<f64>) -> Result<DriftModel> {
    let n = dataset.dim();
    if specs.len() != n {
        return Err(Error::dim("component specs", n, specs.len()));
    }
    let mut components = Vec::with_capacity(n);
    for (i, spec) in specs.iter().enumerate() {
        components.push(match spec {
            ComponentSpec::Fixed { gradient, offset } => {
                if gradient.len() != n {
                    return Err(Error::dim("fixed component gradient", n, gradient.len()));
                }
                Component::Fixed {
                    gradient: DVector::from_column_slice(gradient),
                    offset: *offset,
                }
            }
            ComponentSpec::Learn { kernel } => {
                if kernel.dim() != n {
                    return Err(Error::dim("kernel", n, kernel.dim()));
                }
                Component::Learned(fit_component(
                    kernel,
                    &dataset.points,
                    dataset.inputs.as_deref(),
                    dataset.component(i),
                    dataset.sigma_y[i],
                    jitter,
                    i,
                )?)
            }
        });
    }
    Ok(DriftModel {
        dim: n,
        points: dataset.points.clone(),
        inputs: dataset.inputs.clone(),
        components,
    })
}

fn augmented_gram(kernel: &Kernel, points: &[DVector<f64>], inputs: Option<&[f64]>) -> DMatrix<f64> {
    let n = points.len();
    DMatrix::from_fn(n, n, |a, b| {
        kernel.eval_unchecked(&points[a], &points[b]) + inputs.map_or(0.0, |u| u[a] * u[b])
    })
}

fn factor_component(
    kernel: &Kernel,
    points: &[DVector<f64>],
    inputs: Option<&[f64]>,
    sigma_y: f64,
    jitter: Option<f64>,
    index: usize,
) -> Result<(Cholesky<f64, Dyn>, DMatrix<f64>, f64)> {
    let n = points.len();
    let gram = augmented_gram(kernel, points, inputs);
    let system = &gram + DMatrix::identity(n, n) * (sigma_y * sigma_y);
    let jitter = jitter.unwrap_or_else(|| linalg::default_jitter(&gram));
    let (chol, used) = linalg::cholesky_with_jitter(&system, jitter, &format!("drift component {} Gram", index + 1))?;
    let system = if used > 0.0 {
        system + DMatrix::identity(n, n) * used
    } else {
        system
    };
    Ok((chol, system, used))
}

fn fit_component(
    kernel: &Kernel,
    points: &[DVector<f64>],
    inputs: Option<&[f64]>,
    y: &DVector<f64>,
    sigma_y: f64,
    jitter: Option<f64>,
    index: usize,
) -> Result<LearnedComponent> {
    let (chol, system, jitter_used) = factor_component(kernel, points, inputs, sigma_y, jitter, index)?;
    let mut h = chol.solve(y);
    let r = y - &system * &h;
    h += chol.solve(&r);
    Ok(LearnedComponent {
        kernel: kernel.clone(),
        sigma_y,
        weights: h,
        chol,
        jitter_used,
    })
}

impl DriftModel {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points(&self) -> &[DVector<f64>] {
        &self.points
    }

    pub fn is_learned(&self, i: usize) -> bool {
        matches!(self.components[i], Component::Learned(_))
    }

    /// Weights `h_i` of a learned component.
    pub fn weights(&self, i: usize) -> Option<&DVector<f64>> {
        match &self.components[i] {
            Component::Learned(c) => Some(&c.weights),
            Component::Fixed { .. } => None,
        }
    }

    pub fn jitter_used(&self, i: usize) -> f64 {
        match &self.components[i] {
            Component::Learned(c) => c.jitter_used,
            Component::Fixed { .. } => 0.0,
        }
    }

    /// `b̂_i = Σ_j u⁽ʲ⁾ h_i⁽ʲ⁾`, the estimated input gain (input-aware fits only).
    pub fn input_gain(&self) -> Option<DVector<f64>> {
        let u = self.inputs.as_ref()?;
        Some(DVector::from_iterator(
            self.dim,
            self.components.iter().map(|c| match c {
                Component::Learned(c) => c.weights.iter().zip(u).map(|(h, u)| h * u).sum(),
                Component::Fixed { .. } => 0.0,
            }),
        ))
    }

    /// `μ̄(x, u) = μ(x) + b̂ u`; equals [`DriftModel::mean`] without recorded inputs.
    pub fn mean_with_input(&self, x: &DVector<f64>, u: f64) -> Result<DVector<f64>> {
        let mut m = self.mean(x)?;
        if let Some(b) = self.input_gain() {
            m += b * u;
        }
        Ok(m)
    }

    fn check(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::dim("x", self.dim, x.len()));
        }
        Ok(())
    }

    pub fn mean(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(x)?;
        Ok(self.mean_and_jac_unchecked(x).0)
    }

    /// Posterior mean `μ(x)` and its Jacobian (row `i` is `∂μ_i(x)`).
    pub fn mean_and_jac(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        self.check(x)?;
        Ok(self.mean_and_jac_unchecked(x))
    }

    fn mean_and_jac_unchecked(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.dim;
        let mut mu = DVector::zeros(n);
        let mut jac = DMatrix::zeros(n, n);
        for (i, c) in self.components.iter().enumerate() {
            match c {
                Component::Fixed { gradient, offset } => {
                    mu[i] = offset + gradient.dot(x);
                    jac.set_row(i, &gradient.transpose());
                }
                Component::Learned(c) => {
                    let mut g = DVector::zeros(n);
                    for (pj, hj) in self.points.iter().zip(c.weights.iter()) {
                        mu[i] += c.kernel.eval_unchecked(pj, x) * hj;
                        g += c.kernel.grad_x2_unchecked(pj, x) * *hj;
                    }
                    jac.set_row(i, &g.transpose());
                }
            }
        }
        (mu, jac)
    }

    fn cross_terms(&self, c: &LearnedComponent, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.dim;
        let nn = self.points.len();
        let k = DVector::from_iterator(nn, self.points.iter().map(|p| c.kernel.eval_unchecked(p, x)));
        let mut g = DMatrix::zeros(nn, n);
        for (j, p) in self.points.iter().enumerate() {
            g.set_row(j, &c.kernel.grad_x2_unchecked(p, x).transpose());
        }
        (k, g)
    }

    /// `v_i(x, x)`, `σ_i(x)`, `v_{∂,i}(x, x)` and `σ_{∂,i}(x)` per component.
    pub fn variances(&self, x: &DVector<f64>) -> Result<Vec<ComponentVariance>> {
        self.check(x)?;
        let n = self.dim;
        self.components
            .iter()
            .enumerate()
            .map(|(i, c)| match c {
                Component::Fixed { .. } => Ok(ComponentVariance {
                    variance: 0.0,
                    sigma: 0.0,
                    gradient_covariance: DMatrix::zeros(n, n),
                    gradient_sigma: DMatrix::zeros(n, n),
                }),
                Component::Learned(c) => {
                    let (k, g) = self.cross_terms(c, x);
                    let prior = c.kernel.eval_unchecked(x, x);
                    let v = prior - k.dot(&c.chol.solve(&k));
                    if v < -VARIANCE_TOL * prior.abs().max(1.0) {
                        return Err(Error::Numerical(format!(
                            "component {} posterior variance {v:.3e} is negative at {:?}",
                            i + 1,
                            x.as_slice()
                        )));
                    }
                    let v = v.max(0.0);
                    let h = c.kernel.hess_cross_unchecked(x, x);
                    let vd = symmetrize(&(h - g.transpose() * c.chol.solve(&g)));
                    let vd = linalg::psd_clip(&vd, VARIANCE_TOL * vd.amax().max(1.0)).map_err(|e| {
                        Error::Numerical(format!("component {} gradient covariance: {e}", i + 1))
                    })?;
                    let sd = linalg::psd_sqrt(&vd, 0.0)?;
                    Ok(ComponentVariance {
                        variance: v,
                        sigma: v.sqrt(),
                        gradient_covariance: vd,
                        gradient_sigma: sd,
                    })
                }
            })
            .collect()
    }

    /// `∂_x v_i(x, x)` per component (zero rows for fixed components).
    pub fn variance_gradients(&self, x: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
        self.check(x)?;
        let n = self.dim;
        Ok(self
            .components
            .iter()
            .map(|c| match c {
                Component::Fixed { .. } => DVector::zeros(n),
                Component::Learned(c) => {
                    let (k, g) = self.cross_terms(c, x);
                    let alpha = c.chol.solve(&k);
                    (c.kernel.grad_x2_unchecked(x, x) - g.transpose() * alpha) * 2.0
                }
            })
            .collect())
    }

    /// Scalar posterior variance `v_i(x, x)` of one component.
    pub fn variance(&self, i: usize, x: &DVector<f64>) -> Result<f64> {
        self.check(x)?;
        Ok(match &self.components[i] {
            Component::Fixed { .. } => 0.0,
            Component::Learned(c) => {
                let (k, _) = self.cross_terms(c, x);
                (c.kernel.eval_unchecked(x, x) - k.dot(&c.chol.solve(&k))).max(0.0)
            }
        })
    }

    pub fn save_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

impl Dynamics for DriftModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        self.mean_and_jac_unchecked(x).0
    }

    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.mean_and_jac_unchecked(x).1
    }
}

/// `(μ(x), ∂μ(x))`.
pub fn drift_mean_and_jac(model: &DriftModel, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    model.mean_and_jac(x)
}

pub fn drift_variances(model: &DriftModel, x: &DVector<f64>) -> Result<Vec<ComponentVariance>> {
    model.variances(x)
}

/// JSON form of a [`DriftModel`]. Factorizations are rebuilt on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DriftArtifact {
    pub dim: usize,
    pub points: Vec<Vec<f64>>,
    #[serde(default)]
    pub inputs: Option<Vec<f64>>,
    pub components: Vec<ComponentArtifact>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ComponentArtifact {
    Learned {
        kernel: Kernel,
        sigma_y: f64,
        weights: Vec<f64>,
        jitter_used: f64,
    },
    Fixed {
        gradient: Vec<f64>,
        offset: f64,
    },
}

impl From<DriftModel> for DriftArtifact {
    fn from(m: DriftModel) -> Self {
        DriftArtifact {
            dim: m.dim,
            points: m.points.iter().map(|p| p.as_slice().to_vec()).collect(),
            inputs: m.inputs,
            components: m
                .components
                .into_iter()
                .map(|c| match c {
                    Component::Learned(c) => ComponentArtifact::Learned {
                        kernel: c.kernel,
                        sigma_y: c.sigma_y,
                        weights: c.weights.as_slice().to_vec(),
                        jitter_used: c.jitter_used,
                    },
                    Component::Fixed { gradient, offset } => ComponentArtifact::Fixed {
                        gradient: gradient.as_slice().to_vec(),
                        offset,
                    },
                })
                .collect(),
        }
    }
}

impl TryFrom<DriftArtifact> for DriftModel {
    type Error = Error;

    fn try_from(a: DriftArtifact) -> Result<Self> {
        let n = a.dim;
        if a.components.len() != n {
            return Err(Error::dim("components", n, a.components.len()));
        }
        let points: Vec<DVector<f64>> = a.points.iter().map(|p| DVector::from_column_slice(p)).collect();
        if let Some(p) = points.iter().find(|p| p.len() != n) {
            return Err(Error::dim("point", n, p.len()));
        }
        if let Some(u) = &a.inputs {
            if u.len() != points.len() {
                return Err(Error::dim("inputs", points.len(), u.len()));
            }
        }
        let mut components = Vec::with_capacity(n);
        for (i, c) in a.components.into_iter().enumerate() {
            components.push(match c {
                ComponentArtifact::Fixed { gradient, offset } => {
                    if gradient.len() != n {
                        return Err(Error::dim("fixed component gradient", n, gradient.len()));
                    }
                    Component::Fixed {
                        gradient: DVector::from_vec(gradient),
                        offset,
                    }
                }
                ComponentArtifact::Learned {
                    kernel,
                    sigma_y,
                    weights,
                    jitter_used,
                } => {
                    if weights.len() != points.len() {
                        return Err(Error::dim("weights", points.len(), weights.len()));
                    }
                    let np = points.len();
                    let gram = augmented_gram(&kernel, &points, a.inputs.as_deref());
                    let system = gram + DMatrix::identity(np, np) * (sigma_y * sigma_y + jitter_used);
                    let chol = Cholesky::new(system).ok_or_else(|| Error::Factorization {
                        what: format!("drift component {} Gram", i + 1),
                        advice: "stored jitter does not make the Gram matrix positive definite".into(),
                    })?;
                    Component::Learned(LearnedComponent {
                        kernel,
                        sigma_y,
                        weights: DVector::from_vec(weights),
                        chol,
                        jitter_used,
                    })
                }
            });
        }
        Ok(DriftModel {
            dim: n,
            points,
            inputs: a.inputs,
            components,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    fn one_point(y: f64) -> DriftModel {
        let ds = DriftDataset::new(vec![dvector![0.0]], vec![dvector![y]], vec![0.0]).unwrap();
        fit_drift(&ds, &[Kernel::unit_gaussian(1)]).unwrap()
    }

    #[test]
    fn one_point_interpolates() {
        let m = one_point(3.0);
        assert!((m.mean(&dvector![0.0]).unwrap()[0] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn zero_targets_give_zero_mean() {
        let pts = vec![dvector![0.0, 1.0], dvector![1.0, -1.0]];
        let ds = DriftDataset::new(pts, vec![dvector![0.0, 0.0]; 2], vec![0.1, 0.1]).unwrap();
        let m = fit_drift(&ds, &[Kernel::unit_gaussian(2), Kernel::unit_gaussian(2)]).unwrap();
        let (mu, jac) = m.mean_and_jac(&dvector![0.3, 0.2]).unwrap();
        assert_eq!(mu, DVector::zeros(2));
        assert_eq!(jac, DMatrix::zeros(2, 2));
    }

    #[test]
    fn single_point_gradient_closed_form() {
        // y = 1 at the origin with σ_y = 0 gives h = 1.
        let ds = DriftDataset::new(vec![dvector![0.0, 0.0]], vec![dvector![1.0, 1.0]], vec![0.0, 0.0]).unwrap();
        let m = fit_drift(&ds, &[Kernel::unit_gaussian(2), Kernel::unit_gaussian(2)]).unwrap();
        assert!((m.weights(0).unwrap()[0] - 1.0).abs() < 1e-15);
        let x = dvector![0.4, -0.7];
        let (_, jac) = m.mean_and_jac(&x).unwrap();
        let expected = -x.transpose() * (-0.5 * x.norm_squared()).exp();
        for i in 0..2 {
            assert!((jac.row(i) - &expected).amax() < 1e-15);
        }
    }

    #[test]
    fn closed_form_single_point_variance() {
        let m = one_point(0.0);
        let v = m.variance(0, &dvector![1.0]).unwrap();
        assert!((v - (1.0 - (-1.0f64).exp())).abs() < 1e-15);
        assert!((v - 0.63212).abs() < 1e-5);
        assert!(m.variance(0, &dvector![0.0]).unwrap().abs() < 1e-15);
    }

    #[test]
    fn empty_dataset_gives_prior() {
        let ds = DriftDataset::new(Vec::new(), Vec::new(), vec![0.0]).unwrap();
        let k = Kernel::squared_exponential(1, 2.5, 1.0).unwrap();
        let m = fit_drift(&ds, &[k]).unwrap();
        let v = m.variances(&dvector![0.7]).unwrap();
        assert_eq!(v[0].variance, 2.5);
        assert_eq!(m.variance_gradients(&dvector![0.7]).unwrap()[0][0], 0.0);
    }

    #[test]
    fn fixed_component_is_affine() {
        let ds = DriftDataset::new(vec![dvector![0.0, 0.0]], vec![dvector![0.0, 0.0]], vec![0.0, 0.01]).unwrap();
        let specs = [
            ComponentSpec::Fixed {
                gradient: vec![1.0, 0.01],
                offset: 0.0,
            },
            ComponentSpec::Learn {
                kernel: Kernel::unit_gaussian(2),
            },
        ];
        let m = fit_drift_with(&ds, &specs, None).unwrap();
        let (mu, jac) = m.mean_and_jac(&dvector![2.0, 3.0]).unwrap();
        assert!((mu[0] - 2.03).abs() < 1e-15);
        assert_eq!(jac.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.01]);
        let v = m.variances(&dvector![2.0, 3.0]).unwrap();
        assert_eq!(v[0].variance, 0.0);
        assert!(!m.is_learned(0));
    }

    #[test]
    fn csv_round_trip() {
        let ds = DriftDataset::new(
            vec![dvector![0.1, -0.2], dvector![1.5, 2.0]],
            vec![dvector![0.3, 0.4], dvector![-1.0, 2.0 / 3.0]],
            vec![0.01, 0.01],
        )
        .unwrap()
        .with_inputs(vec![0.5, -0.25])
        .unwrap();
        let back = DriftDataset::from_csv(&ds.to_csv(), vec![0.01, 0.01]).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn csv_rejects_bad_shape() {
        assert!(DriftDataset::from_csv("x_1,y_1,z\n1,2,3\n", vec![0.0]).is_err());
        assert!(DriftDataset::from_csv("x_1,y_1\n1\n", vec![0.0]).is_err());
    }

    #[test]
    fn json_round_trip_rebuilds_factorization() {
        let pts = vec![dvector![0.0, 1.0], dvector![1.0, -1.0], dvector![-0.5, 0.5]];
        let ys = vec![dvector![0.1, 0.2], dvector![0.3, -0.4], dvector![0.0, 0.5]];
        let ds = DriftDataset::new(pts, ys, vec![0.01, 0.02]).unwrap();
        let m = fit_drift(&ds, &[Kernel::unit_gaussian(2), Kernel::unit_gaussian(2)]).unwrap();
        let back = DriftModel::load_json(&m.save_json().unwrap()).unwrap();
        let x = dvector![0.2, 0.3];
        assert_eq!(m.mean(&x).unwrap(), back.mean(&x).unwrap());
        let (a, b) = (m.variances(&x).unwrap(), back.variances(&x).unwrap());
        assert!((a[1].variance - b[1].variance).abs() < 1e-15);
    }

    #[test]
    fn zero_inputs_match_plain_fit() {
        let pts = vec![dvector![0.0], dvector![1.0], dvector![2.0]];
        let ys = vec![dvector![0.0], dvector![1.0], dvector![0.5]];
        let ds = DriftDataset::new(pts, ys, vec![0.01]).unwrap();
        let plain = fit_drift(&ds, &[Kernel::unit_gaussian(1)]).unwrap();
        let with_u = fit_drift_with_input(&ds.clone().with_inputs(vec![0.0; 3]).unwrap(), &[Kernel::unit_gaussian(1)])
            .unwrap();
        let x = dvector![0.7];
        assert_eq!(plain.mean(&x).unwrap(), with_u.mean(&x).unwrap());
        assert_eq!(with_u.input_gain().unwrap()[0], 0.0);
        assert!(fit_drift_with_input(&ds, &[Kernel::unit_gaussian(1)]).is_err());
    }

    #[test]
    fn dimension_errors() {
        let m = one_point(1.0);
        assert!(matches!(m.mean(&dvector![0.0, 1.0]), Err(Error::DimensionMismatch { .. })));
        assert!(DriftDataset::new(vec![dvector![0.0]], vec![], vec![0.0]).is_err());
        assert!(DriftDataset::new(vec![dvector![0.0]], vec![dvector![0.0]], vec![-1.0]).is_err());
    }
}
