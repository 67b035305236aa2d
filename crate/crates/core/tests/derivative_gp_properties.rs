use contraction_gp::deriv_gp::{build_gram_k0, fit, DerivativeDataset};
use contraction_gp::kernels::Kernel;
use nalgebra::DVector;
use proptest::prelude::*;

const N: usize = 8;

/// `N` points in `[-2, 2]²` with pairwise distance at least 0.4.
fn spread_points() -> impl Strategy<Value = Vec<DVector<f64>>> {
    prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 40).prop_filter_map("too clustered", |cands| {
        let mut pts: Vec<DVector<f64>> = Vec::new();
        for (a, b) in cands {
            let x = DVector::from_vec(vec![a, b]);
            if pts.iter().all(|p| (p - &x).norm() >= 0.4) {
                pts.push(x);
            }
            if pts.len() == N {
                return Some(pts);
            }
        }
        None
    })
}

fn targets() -> impl Strategy<Value = Vec<DVector<f64>>> {
    prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), N)
        .prop_map(|v| v.into_iter().map(|(a, b)| DVector::from_vec(vec![a, b])).collect())
}

fn probe() -> impl Strategy<Value = DVector<f64>> {
    (-2.5f64..2.5, -2.5f64..2.5).prop_map(|(a, b)| DVector::from_vec(vec![a, b]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn posterior_is_linear_in_targets(
        pts in spread_points(),
        y1 in targets(),
        y2 in targets(),
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
        sigma_p in prop_oneof![Just(0.0), Just(0.1)],
        x in probe(),
    ) {
        let k = Kernel::unit_gaussian(2);
        let combo: Vec<_> = y1.iter().zip(&y2).map(|(u, v)| u * a + v * b).collect();
        let f = |y: Vec<DVector<f64>>| fit(&k, &DerivativeDataset::new(pts.clone(), y, sigma_p).unwrap(), Some(0.0)).unwrap();
        let (c1, c2, c) = (f(y1), f(y2), f(combo));
        let lhs = c.eval_control(&x).unwrap();
        let rhs = a * c1.eval_control(&x).unwrap() + b * c2.eval_control(&x).unwrap();
        prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()));
        let g = c.eval_control_grad(&x).unwrap();
        let g_rhs = c1.eval_control_grad(&x).unwrap() * a + c2.eval_control_grad(&x).unwrap() * b;
        prop_assert!((&g - &g_rhs).amax() < 1e-9 * (1.0 + g_rhs.amax()));
    }

    #[test]
    fn weights_are_stationary_for_the_regularized_fit(
        pts in spread_points(),
        y in targets(),
        sigma_p in prop_oneof![Just(0.01), Just(0.1)],
    ) {
        let k = Kernel::unit_gaussian(2);
        let ds = DerivativeDataset::new(pts.clone(), y, sigma_p).unwrap();
        let c = fit(&k, &ds, Some(0.0)).unwrap();
        let k0 = build_gram_k0(&k, &pts).unwrap().matrix;
        let y = ds.stacked_targets();
        let h = c.weights();
        // Gradient of |Y − K₀h|²_{K₀⁻¹} + σ²|h|² is 2((K₀ + σ²I)h − Y).
        let grad = (&k0 * h + h * (sigma_p * sigma_p) - &y) * 2.0;
        prop_assert!(grad.norm() < 1e-8 * (1.0 + y.norm()));
    }

    #[test]
    fn noiseless_fit_interpolates_the_targets(pts in spread_points(), y in targets()) {
        let k = Kernel::unit_gaussian(2);
        let c = fit(&k, &DerivativeDataset::new(pts.clone(), y.clone(), 0.0).unwrap(), Some(0.0)).unwrap();
        let scale = 1.0 + y.iter().map(|t| t.amax()).fold(0.0, f64::max);
        for (x, t) in pts.iter().zip(&y) {
            prop_assert!((c.eval_control_grad(x).unwrap() - t).amax() < 1e-6 * scale);
        }
    }

    #[test]
    fn gradient_is_exact(pts in spread_points(), y in targets(), x in probe()) {
        let k = Kernel::unit_gaussian(2);
        let c = fit(&k, &DerivativeDataset::new(pts, y, 0.05).unwrap(), None).unwrap();
        let g = c.eval_control_grad(&x).unwrap();
        let h = 1e-5;
        for a in 0..2 {
            let mut e = DVector::zeros(2);
            e[a] = h;
            let fd = (c.eval_control(&(&x + &e)).unwrap() - c.eval_control(&(&x - &e)).unwrap()) / (2.0 * h);
            prop_assert!((fd - g[a]).abs() < 1e-6 * g.amax().max(1.0));
        }
    }
}
