use std::sync::Arc;

use contraction_gp::drift_gp::{fit_drift_with, ComponentSpec, DriftDataset, DriftModel};
use contraction_gp::grid::Domain;
use contraction_gp::kernels::Kernel;
use contraction_gp::linalg;
use contraction_gp::stochastic::{
    chebyshev_hulls, moment_ies_check, moment_margin, StochasticClosedLoop, StochasticSystem,
};
use contraction_gp::synthesis::build_hulls;
use contraction_gp::system::{Dynamics, FeedbackLaw, InputField, LinearFeedback, Oscillator, SystemModel};
use contraction_gp::verify_sim::{rollout, rollout_stochastic};
use nalgebra::{dvector, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

/// `x⁺ = a x + s ω` in one dimension.
struct ScalarLoop {
    a: f64,
    s: f64,
}

impl StochasticSystem for ScalarLoop {
    fn dim(&self) -> usize {
        1
    }
    fn control(&self, _x: &DVector<f64>) -> f64 {
        0.0
    }
    fn mean_step(&self, x: &DVector<f64>, _u: f64) -> DVector<f64> {
        x * self.a
    }
    fn diffusion(&self, _x: &DVector<f64>) -> DVector<f64> {
        dvector![self.s]
    }
}

fn learned_oscillator(seed: u64) -> DriftModel {
    let osc = Oscillator { dt: Oscillator::DEFAULT_DT };
    let points = Domain::cube(2, -3.0, 3.0).grid(11);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.01).unwrap();
    let targets = points
        .iter()
        .map(|p| {
            let f = osc.drift(p);
            dvector![f[0], f[1] + noise.sample(&mut rng)]
        })
        .collect();
    let ds = DriftDataset::new(points, targets, vec![0.0, 0.01]).unwrap();
    let specs = [
        ComponentSpec::Fixed {
            gradient: vec![1.0, osc.dt],
            offset: 0.0,
        },
        ComponentSpec::Learn {
            kernel: Kernel::unit_gaussian(2),
        },
    ];
    fit_drift_with(&ds, &specs, None).unwrap()
}

fn linear_drift(a: &DMatrix<f64>) -> DriftModel {
    let n = a.nrows();
    let ds = DriftDataset::new(Vec::new(), Vec::new(), vec![0.0; n]).unwrap();
    let specs: Vec<_> = (0..n)
        .map(|i| ComponentSpec::Fixed {
            gradient: a.row(i).iter().copied().collect(),
            offset: 0.0,
        })
        .collect();
    fit_drift_with(&ds, &specs, None).unwrap()
}

#[test]
fn noiseless_loop_reduces_to_deterministic_condition() {
    let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.2, -0.3, 0.7]);
    let drift = Arc::new(linear_drift(&a));
    let law: Arc<dyn FeedbackLaw> = Arc::new(LinearFeedback { gain: dvector![0.1, -0.2] });
    let b = dvector![0.0, 1.0];
    let p = DMatrix::from_row_slice(2, 2, &[2.0, -0.5, -0.5, 1.5]);
    let lp = StochasticClosedLoop::from_metric(drift, InputField::Constant(b.clone()), law, &p).unwrap();
    let acl = &a + &b * dvector![0.1, -0.2].transpose();
    let grid = Domain::cube(2, -1.0, 1.0).grid(5);
    let report = moment_ies_check(&lp, &grid).unwrap();
    // P̄ − AᵀP̄A = P⁻¹ (P − P Aᵀ P⁻¹ A P) P⁻¹ with P̄ = P⁻¹.
    let pinv = p.clone().try_inverse().unwrap();
    let schur = &p - &p * acl.transpose() * &pinv * &acl * &p;
    let expected = linalg::min_eigenvalue(&(&pinv * schur * &pinv));
    for pt in &report.points {
        assert!((pt.margin - expected).abs() < 1e-10);
        assert_eq!(pt.noise, 0.0);
    }
    assert_eq!(report.eps_noise, 0.0);
}

#[test]
fn noise_only_lowers_margins() {
    let drift = Arc::new(learned_oscillator(3));
    let law: Arc<dyn FeedbackLaw> = Arc::new(LinearFeedback { gain: dvector![-1.0, -2.0] });
    let b = dvector![0.0, 0.01];
    let p = DMatrix::from_row_slice(2, 2, &[5.5, -4.5, -4.5, 5.5]);
    let lp = StochasticClosedLoop::from_metric(drift, InputField::Constant(b), law, &p).unwrap();
    for x in Domain::cube(2, -2.0, 2.0).grid(9) {
        let a = lp.mean_jacobian(&x);
        let sj = lp.sigma_jacobian(&x).unwrap();
        let det = moment_margin(&a, &[DVector::zeros(2), DVector::zeros(2)], lp.p_bar());
        assert!(moment_margin(&a, &sj.rows, lp.p_bar()) <= det + 1e-15);
    }
}

#[test]
fn zero_diffusion_rollout_matches_deterministic() {
    let drift = Arc::new(linear_drift(&DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.0, 0.8])));
    let law: Arc<dyn FeedbackLaw> = Arc::new(LinearFeedback { gain: dvector![0.05, -0.1] });
    let b = dvector![0.0, 1.0];
    let lp = StochasticClosedLoop::from_metric(
        drift.clone(),
        InputField::Constant(b.clone()),
        law.clone(),
        &DMatrix::identity(2, 2),
    )
    .unwrap();
    let model = SystemModel::new(drift, InputField::Constant(b)).unwrap();
    let x0 = dvector![1.0, -0.5];
    let det = rollout(&model, law.as_ref(), &x0, 50).unwrap();
    let sto = rollout_stochastic(&lp, &x0, 50, 9).unwrap();
    assert_eq!(det.states, sto.states);
    assert_eq!(det.inputs, sto.inputs);
}

#[test]
fn seeded_rollouts_are_reproducible() {
    let drift = Arc::new(learned_oscillator(1));
    let law: Arc<dyn FeedbackLaw> = Arc::new(LinearFeedback { gain: dvector![-1.0, -2.0] });
    let lp = StochasticClosedLoop::from_metric(
        drift,
        InputField::Constant(dvector![0.0, 0.01]),
        law,
        &DMatrix::identity(2, 2),
    )
    .unwrap();
    let x0 = dvector![1.0, 1.0];
    let a = rollout_stochastic(&lp, &x0, 200, 42).unwrap();
    let b = rollout_stochastic(&lp, &x0, 200, 42).unwrap();
    assert_eq!(a, b);
    let c = rollout_stochastic(&lp, &x0, 200, 43).unwrap();
    assert_ne!(a.states, c.states);
}

#[test]
fn scalar_second_moment_matches_stationary_value() {
    let sys = ScalarLoop { a: 0.5, s: 0.1 };
    let runs = 10_000;
    let second: f64 = (0..runs)
        .map(|seed| {
            let x = rollout_stochastic(&sys, &dvector![0.0], 40, seed).unwrap().last()[0];
            x * x
        })
        .sum::<f64>()
        / runs as f64;
    let stationary = 0.01 / (1.0 - 0.25);
    assert!((second - stationary).abs() < 0.1 * stationary, "{second} vs {stationary}");
}

#[test]
fn chebyshev_boxes_cover_gradient_samples() {
    let drift = Arc::new(learned_oscillator(7));
    let model = SystemModel::new(drift.clone(), InputField::Constant(dvector![0.0, 0.01])).unwrap();
    let base = build_hulls(&model, &Domain::cube(2, -2.0, 2.0), 4, 0.1).unwrap();
    let c = 40.0;
    let inflated = chebyshev_hulls(&drift, &base, c).unwrap();
    assert_eq!(inflated.confidence, 0.9025);
    let wider = chebyshev_hulls(&drift, &base, 2.0 * c).unwrap();
    for ((a, b), o) in inflated.hulls.cells.iter().zip(&wider.hulls.cells).zip(&base.cells) {
        assert!(b.entry_lower.iter().zip(a.entry_lower.iter()).all(|(w, n)| w <= n));
        assert!(b.entry_upper.iter().zip(a.entry_upper.iter()).all(|(w, n)| w >= n));
        assert!(a.entry_lower.iter().zip(o.entry_lower.iter()).all(|(w, n)| w <= n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for x in [dvector![0.3, -1.1], dvector![-1.7, 1.2], dvector![1.05, 0.45]] {
        let cell = &inflated.hulls.cells[inflated.hulls.locate(&x).unwrap()];
        let (_, jac) = drift.mean_and_jac(&x).unwrap();
        let vars = drift.variances(&x).unwrap();
        let samples = 20_000;
        let mut inside = 0;
        for _ in 0..samples {
            let mut g = jac.clone();
            for (i, v) in vars.iter().enumerate() {
                let z = DVector::from_fn(2, |_, _| StandardNormal.sample(&mut rng));
                let row = jac.row(i).transpose() + &v.gradient_sigma * z;
                g.set_row(i, &row.transpose());
            }
            if cell.contains(&g) {
                inside += 1;
            }
        }
        let coverage = inside as f64 / samples as f64;
        assert!(coverage >= 1.0 - 2.0 / c - 0.02, "coverage {coverage} at {x:?}");
    }
}
