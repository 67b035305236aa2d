//! Discrete-time control-affine systems `x⁺ = f(x) + b(x) u` and feedback laws.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A drift map `f` with its Jacobian `∂f`.
pub trait Dynamics: Send + Sync {
    fn dim(&self) -> usize;
    fn drift(&self, x: &DVector<f64>) -> DVector<f64>;
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;
}

/// A state-dependent input direction `b(x)` with Jacobian `∂b` (column `k` is `∂b/∂x_k`).
pub trait InputMap: Send + Sync {
    fn eval(&self, x: &DVector<f64>) -> DVector<f64>;
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;
}

/// A scalar state-feedback law `u = p(x)` with gradient `∂p(x)` (returned as a column).
pub trait FeedbackLaw: Send + Sync {
    fn dim(&self) -> usize;
    fn control(&self, x: &DVector<f64>) -> f64;
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64>;
}

#[derive(Clone)]
pub enum InputField {
    Constant(DVector<f64>),
    StateDependent(Arc<dyn InputMap>),
}

impl fmt::Debug for InputField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InputField::Constant(b) => f.debug_tuple("Constant").field(&b.as_slice()).finish(),
            InputField::StateDependent(_) => f.write_str("StateDependent(..)"),
        }
    }
}

/// Drift, input direction and (optionally) an equilibrium of the open loop.
#[derive(Clone)]
pub struct SystemModel {
    dynamics: Arc<dyn Dynamics>,
    input: InputField,
    equilibrium: Option<DVector<f64>>,
}

impl fmt::Debug for SystemModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemModel")
            .field("dim", &self.dim())
            .field("input", &self.input)
            .field("equilibrium", &self.equilibrium.as_ref().map(|e| e.as_slice().to_vec()))
            .finish()
    }
}

fn validation_points(n: usize) -> Vec<DVector<f64>> {
    let mut pts = vec![DVector::zeros(n)];
    for k in 0..n {
        let mut p = DVector::zeros(n);
        p[k] = 0.5;
        pts.push(p.clone());
        pts.push(-p);
    }
    pts.push(DVector::from_fn(n, |i, _| if i % 2 == 0 { 0.3 } else { -0.7 }));
    pts.push(DVector::from_fn(n, |i, _| 1.1 - 0.4 * i as f64));
    pts
}

/// Central-difference Jacobian of `g`.
pub fn finite_difference_jacobian(
    g: impl Fn(&DVector<f64>) -> DVector<f64>,
    x: &DVector<f64>,
    step: f64,
) -> DMatrix<f64> {
    let n = x.len();
    let m = g(x).len();
    let mut jac = DMatrix::zeros(m, n);
    for k in 0..n {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[k] += step;
        xm[k] -= step;
        let col = (g(&xp) - g(&xm)) / (2.0 * step);
        jac.set_column(k, &col);
    }
    jac
}

impl SystemModel {
    /// Builds a model, checking `∂f` (and `∂b`) against finite differences.
    pub fn new(dynamics: Arc<dyn Dynamics>, input: InputField) -> Result<Self> {
        let n = dynamics.dim();
        if n == 0 {
            return Err(Error::invalid("system dimension must be positive"));
        }
        let model = SystemModel {
            dynamics,
            input,
            equilibrium: None,
        };
        if let InputField::Constant(b) = &model.input {
            if b.len() != n {
                return Err(Error::dim("b", n, b.len()));
            }
        }
        for x in validation_points(n) {
            let jac = model.dynamics.jacobian(&x);
            if jac.nrows() != n || jac.ncols() != n {
                return Err(Error::dim("drift jacobian", n, jac.nrows()));
            }
            let fd = finite_difference_jacobian(|y| model.dynamics.drift(y), &x, 1e-6);
            check_jacobian(&jac, &fd, "drift jacobian")?;
            if let InputField::StateDependent(map) = &model.input {
                let b = map.eval(&x);
                if b.len() != n {
                    return Err(Error::dim("b(x)", n, b.len()));
                }
                let fd = finite_difference_jacobian(|y| map.eval(y), &x, 1e-6);
                check_jacobian(&map.jacobian(&x), &fd, "input jacobian")?;
            }
        }
        Ok(model)
    }

    /// Declares `x*` a fixed point of the open loop (`|f(x*) - x*| < 1e-8`).
    pub fn with_equilibrium(mut self, x_star: DVector<f64>) -> Result<Self> {
        if x_star.len() != self.dim() {
            return Err(Error::dim("equilibrium", self.dim(), x_star.len()));
        }
        let residual = (self.dynamics.drift(&x_star) - &x_star).norm();
        if residual >= 1e-8 {
            return Err(Error::invalid(format!(
                "equilibrium is not a fixed point of the drift (|f(x*) - x*| = {residual:.3e})"
            )));
        }
        self.equilibrium = Some(x_star);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dynamics.dim()
    }

    pub fn dynamics(&self) -> &Arc<dyn Dynamics> {
        &self.dynamics
    }

    pub fn input(&self) -> &InputField {
        &self.input
    }

    pub fn equilibrium(&self) -> Option<&DVector<f64>> {
        self.equilibrium.as_ref()
    }

    pub fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        self.dynamics.drift(x)
    }

    pub fn drift_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.dynamics.jacobian(x)
    }

    pub fn input_at(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.input {
            InputField::Constant(b) => b.clone(),
            InputField::StateDependent(m) => m.eval(x),
        }
    }

    /// `∂b(x)`; zero for a constant input direction.
    pub fn input_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        match &self.input {
            InputField::Constant(b) => DMatrix::zeros(b.len(), b.len()),
            InputField::StateDependent(m) => m.jacobian(x),
        }
    }

    pub fn step(&self, x: &DVector<f64>, u: f64) -> DVector<f64> {
        self.drift(x) + self.input_at(x) * u
    }

    /// `∂f(x) + b(x) ∂p(x) + p(x) ∂b(x)`.
    pub fn closed_loop_jacobian(&self, x: &DVector<f64>, law: &dyn FeedbackLaw) -> DMatrix<f64> {
        let mut a = self.drift_jacobian(x) + self.input_at(x) * law.gradient(x).transpose();
        if let InputField::StateDependent(m) = &self.input {
            a += m.jacobian(x) * law.control(x);
        }
        a
    }
}

fn check_jacobian(analytic: &DMatrix<f64>, fd: &DMatrix<f64>, what: &str) -> Result<()> {
    for (a, f) in analytic.iter().zip(fd.iter()) {
        if (a - f).abs() > 1e-4 * (1.0 + a.abs()) {
            return Err(Error::invalid(format!(
                "{what} disagrees with finite differences ({a} vs {f})"
            )));
        }
    }
    Ok(())
}

/// Forward-Euler negative-resistance oscillator
/// `f(x) = x + Δt [x₂, -x₁ + h(x₁) x₂]`, `h(s) = -s + s³ - s⁵/5 + s⁷/105`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Oscillator {
    pub dt: f64,
}

impl Oscillator {
    pub const DEFAULT_DT: f64 = 0.01;

    pub fn resistance(s: f64) -> f64 {
        -s + s.powi(3) - s.powi(5) / 5.0 + s.powi(7) / 105.0
    }

    pub fn resistance_slope(s: f64) -> f64 {
        -1.0 + 3.0 * s * s - s.powi(4) + s.powi(6) / 15.0
    }

    pub fn input_direction(&self) -> DVector<f64> {
        DVector::from_vec(vec![0.0, self.dt])
    }

    /// The oscillator as a system model with equilibrium at the origin.
    pub fn model(self) -> SystemModel {
        let b = self.input_direction();
        SystemModel::new(Arc::new(self), InputField::Constant(b))
            .and_then(|m| m.with_equilibrium(DVector::zeros(2)))
            .expect("builtin oscillator is consistent")
    }
}

impl Dynamics for Oscillator {
    fn dim(&self) -> usize {
        2
    }

    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        let (x1, x2) = (x[0], x[1]);
        DVector::from_vec(vec![
            x1 + self.dt * x2,
            x2 + self.dt * (-x1 + Self::resistance(x1) * x2),
        ])
    }

    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let (x1, x2) = (x[0], x[1]);
        DMatrix::from_row_slice(
            2,
            2,
            &[
                1.0,
                self.dt,
                self.dt * (-1.0 + Self::resistance_slope(x1) * x2),
                1.0 + self.dt * Self::resistance(x1),
            ],
        )
    }
}

/// Scalar `f(x) = x + Δt sin(x)` with `b = Δt`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Sine1d {
    pub dt: f64,
}

impl Sine1d {
    pub fn model(self) -> SystemModel {
        SystemModel::new(Arc::new(self), InputField::Constant(DVector::from_element(1, self.dt)))
            .and_then(|m| m.with_equilibrium(DVector::zeros(1)))
            .expect("builtin sine model is consistent")
    }
}

impl Dynamics for Sine1d {
    fn dim(&self) -> usize {
        1
    }

    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, x[0] + self.dt * x[0].sin())
    }

    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, 1.0 + self.dt * x[0].cos())
    }
}

/// `f(x) = A x`.
#[derive(Debug, Clone)]
pub struct LinearDynamics {
    pub a: DMatrix<f64>,
}

impl Dynamics for LinearDynamics {
    fn dim(&self) -> usize {
        self.a.nrows()
    }

    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a * x
    }

    fn jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.a.clone()
    }
}

/// `coefficient · Π x_j^{powers[j]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Monomial {
    pub coefficient: f64,
    pub powers: Vec<u32>,
}

/// Each drift component is a sum of monomials.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolynomialDynamics {
    pub components: Vec<Vec<Monomial>>,
}

impl PolynomialDynamics {
    pub fn new(components: Vec<Vec<Monomial>>) -> Result<Self> {
        let n = components.len();
        if n == 0 {
            return Err(Error::invalid("polynomial system needs at least one component"));
        }
        for c in &components {
            for m in c {
                if m.powers.len() != n {
                    return Err(Error::dim("monomial powers", n, m.powers.len()));
                }
            }
        }
        Ok(Self { components })
    }
}

impl Dynamics for PolynomialDynamics {
    fn dim(&self) -> usize {
        self.components.len()
    }

    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            self.components.iter().map(|c| {
                c.iter()
                    .map(|m| {
                        m.coefficient
                            * m.powers.iter().zip(x.iter()).map(|(&p, &xi)| xi.powi(p as i32)).product::<f64>()
                    })
                    .sum::<f64>()
            }),
        )
    }

    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let n = self.dim();
        let mut jac = DMatrix::zeros(n, n);
        for (i, c) in self.components.iter().enumerate() {
            for m in c {
                for k in 0..n {
                    if m.powers[k] == 0 {
                        continue;
                    }
                    let mut term = m.coefficient * m.powers[k] as f64;
                    for (j, &p) in m.powers.iter().enumerate() {
                        let p = if j == k { p - 1 } else { p };
                        term *= x[j].powi(p as i32);
                    }
                    jac[(i, k)] += term;
                }
            }
        }
        jac
    }
}

/// Dynamics from closures; handy for tests and ad-hoc models.
pub struct FnDynamics<F, J> {
    dim: usize,
    f: F,
    j: J,
}

impl<F, J> FnDynamics<F, J>
where
    F: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync,
    J: Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync,
{
    pub fn new(dim: usize, f: F, j: J) -> Self {
        Self { dim, f, j }
    }
}

impl<F, J> Dynamics for FnDynamics<F, J>
where
    F: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync,
    J: Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.f)(x)
    }

    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.j)(x)
    }
}

/// `b(x)` from closures.
pub struct FnInput<B, D> {
    b: B,
    db: D,
}

impl<B, D> FnInput<B, D>
where
    B: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync,
    D: Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync,
{
    pub fn new(b: B, db: D) -> Self {
        Self { b, db }
    }
}

impl<B, D> InputMap for FnInput<B, D>
where
    B: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync,
    D: Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync,
{
    fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.b)(x)
    }

    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.db)(x)
    }
}

/// `u = 0`.
#[derive(Debug, Clone, Copy)]
pub struct ZeroControl {
    pub dim: usize,
}

impl FeedbackLaw for ZeroControl {
    fn dim(&self) -> usize {
        self.dim
    }

    fn control(&self, _x: &DVector<f64>) -> f64 {
        0.0
    }

    fn gradient(&self, _x: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(self.dim)
    }
}

/// `u = k·x`.
#[derive(Debug, Clone)]
pub struct LinearFeedback {
    pub gain: DVector<f64>,
}

impl FeedbackLaw for LinearFeedback {
    fn dim(&self) -> usize {
        self.gain.len()
    }

    fn control(&self, x: &DVector<f64>) -> f64 {
        self.gain.dot(x)
    }

    fn gradient(&self, _x: &DVector<f64>) -> DVector<f64> {
        self.gain.clone()
    }
}

/// Cancellation-plus-linear-feedback baseline for sampled second-order systems:
/// `u = -(μ_c(x) - x_c)/Δt + k·x`, where `μ_c` is a (learned) estimate of drift
/// component `c`. The first term removes the estimated drift increment of
/// `x_c`; the second is a linear state feedback.
pub struct FeedbackLinearization {
    pub drift: Arc<dyn Dynamics>,
    pub component: usize,
    pub dt: f64,
    pub gain: DVector<f64>,
}

impl FeedbackLaw for FeedbackLinearization {
    fn dim(&self) -> usize {
        self.gain.len()
    }

    fn control(&self, x: &DVector<f64>) -> f64 {
        let mu = self.drift.drift(x)[self.component];
        -(mu - x[self.component]) / self.dt + self.gain.dot(x)
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut row: DVector<f64> = self.drift.jacobian(x).row(self.component).transpose();
        row[self.component] -= 1.0;
        -row / self.dt + &self.gain
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    #[test]
    fn oscillator_jacobian_matches_finite_differences() {
        let osc = Oscillator { dt: 0.01 };
        for x in [dvector![-2.0, 1.5], dvector![0.3, -0.2], dvector![2.0, 2.0]] {
            let fd = finite_difference_jacobian(|y| osc.drift(y), &x, 1e-6);
            assert!((osc.jacobian(&x) - fd).amax() < 1e-8);
        }
        assert_eq!(osc.drift(&DVector::zeros(2)), DVector::zeros(2));
    }

    #[test]
    fn polynomial_matches_oscillator() {
        let dt = 0.01;
        let mono = |c: f64, p: [u32; 2]| Monomial { coefficient: c, powers: p.to_vec() };
        let poly = PolynomialDynamics::new(vec![
            vec![mono(1.0, [1, 0]), mono(dt, [0, 1])],
            vec![
                mono(1.0, [0, 1]),
                mono(-dt, [1, 0]),
                mono(-dt, [1, 1]),
                mono(dt, [3, 1]),
                mono(-dt / 5.0, [5, 1]),
                mono(dt / 105.0, [7, 1]),
            ],
        ])
        .unwrap();
        let osc = Oscillator { dt };
        let x = dvector![1.3, -0.4];
        assert!((poly.drift(&x) - osc.drift(&x)).amax() < 1e-14);
        assert!((poly.jacobian(&x) - osc.jacobian(&x)).amax() < 1e-13);
    }

    #[test]
    fn inconsistent_jacobian_is_rejected() {
        let bad = FnDynamics::new(1, |x: &DVector<f64>| x * 2.0, |_: &DVector<f64>| DMatrix::from_element(1, 1, 3.0));
        let err = SystemModel::new(Arc::new(bad), InputField::Constant(dvector![1.0])).unwrap_err();
        assert!(err.to_string().contains("finite differences"));
    }

    #[test]
    fn equilibrium_must_be_fixed_point() {
        let lin = LinearDynamics { a: DMatrix::identity(2, 2) * 0.5 };
        let m = SystemModel::new(Arc::new(lin), InputField::Constant(dvector![0.0, 1.0])).unwrap();
        assert!(m.clone().with_equilibrium(dvector![1.0, 0.0]).is_err());
        assert!(m.with_equilibrium(dvector![0.0, 0.0]).is_ok());
    }

    #[test]
    fn baseline_gradient_matches_control() {
        let osc = Oscillator { dt: 0.01 };
        let law = FeedbackLinearization {
            drift: Arc::new(osc),
            component: 1,
            dt: 0.01,
            gain: dvector![-49.8, 40.6],
        };
        let x = dvector![0.7, -1.1];
        let fd = finite_difference_jacobian(|y| DVector::from_element(1, law.control(y)), &x, 1e-6);
        assert!((fd.transpose() - law.gradient(&x)).amax() < 1e-5);
    }
}
