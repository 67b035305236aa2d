use contraction_gp::lmi::{assemble_margin, solve, AffineBlock, LinearBound, LmiProblem, SolveStatus};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

/// Smallest root of the characteristic polynomial of a symmetric 3×3 matrix,
/// via the trigonometric solution of the depressed cubic.
fn cubic_min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let (a, b, c) = (m[(0, 0)], m[(1, 1)], m[(2, 2)]);
    let (d, e, f) = (m[(0, 1)], m[(1, 2)], m[(0, 2)]);
    let p1 = d * d + e * e + f * f;
    let q = (a + b + c) / 3.0;
    let p2 = (a - q).powi(2) + (b - q).powi(2) + (c - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    if p == 0.0 {
        return q;
    }
    let bm = (m - DMatrix::identity(3, 3) * q) / p;
    let r = (bm.determinant() / 2.0).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos()
}

fn sym(entries: &[f64], n: usize) -> DMatrix<f64> {
    let m = DMatrix::from_row_slice(n, n, &entries[..n * n]);
    (&m + m.transpose()) * 0.5
}

fn block_strategy(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-2.0f64..2.0, n * n).prop_map(move |v| sym(&v, n))
}

/// Random problem: `blocks` 2×2 blocks in `m` variables, each box-bounded.
fn problem_strategy() -> impl Strategy<Value = LmiProblem> {
    (1usize..=3, 1usize..=3).prop_flat_map(|(m, nb)| {
        prop::collection::vec(
            (block_strategy(2), prop::collection::vec(block_strategy(2), m)),
            nb,
        )
        .prop_map(move |raw| {
            let mut p = LmiProblem::new(m);
            for (c, coefs) in raw {
                let mut b = AffineBlock::new(c);
                for (k, a) in coefs.into_iter().enumerate() {
                    b.push_term(k, a);
                }
                p.blocks.push(b);
            }
            for k in 0..m {
                p.bounds.push(LinearBound::symmetric(k, 1.0));
            }
            p
        })
    })
}

/// Best margin over a dense grid of the box `[-1, 1]^m`.
fn grid_best(p: &LmiProblem, steps: usize) -> f64 {
    let m = p.dim;
    let total = (steps + 1).pow(m as u32);
    (0..total)
        .map(|mut idx| {
            let z = DVector::from_fn(m, |_, _| {
                let i = idx % (steps + 1);
                idx /= steps + 1;
                -1.0 + 2.0 * i as f64 / steps as f64
            });
            p.margin(&z)
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn margin_matches_cubic_oracle(c in block_strategy(3)) {
        let mut p = LmiProblem::new(0);
        p.blocks.push(AffineBlock::new(c.clone()));
        let m = assemble_margin(&p, &DVector::zeros(0)).unwrap();
        prop_assert!((m - cubic_min_eigenvalue(&c)).abs() < 1e-9);
    }

    #[test]
    fn reported_margin_is_sound(p in problem_strategy()) {
        let sol = solve(&p).unwrap();
        prop_assert!(sol.status != SolveStatus::NumericalFailure, "{:?}", sol.trace);
        let again = assemble_margin(&p, &sol.z).unwrap();
        prop_assert!((again - sol.margin).abs() <= 1e-8);
        prop_assert!(sol.upper_bound >= sol.margin);
        for (k, z) in sol.z.iter().enumerate() {
            prop_assert!(z.abs() <= 1.0 + 1e-9, "z[{}] = {}", k, z);
        }
        // No grid point beats the certified upper bound, and the solver is
        // at least as good as the grid up to its resolution.
        let grid = grid_best(&p, 40);
        prop_assert!(grid <= sol.upper_bound + 1e-6, "grid {} > ub {}", grid, sol.upper_bound);
        prop_assert!(sol.margin >= grid - 1e-5 * (1.0 + grid.abs()),
            "solver {} far below grid {}", sol.margin, grid);
        if sol.status == SolveStatus::Optimal {
            prop_assert!(sol.margin > 0.0);
        }
    }

    #[test]
    fn adding_a_block_never_helps(p in problem_strategy(), extra in block_strategy(2)) {
        let base = solve(&p).unwrap();
        let mut q = p.clone();
        q.blocks.push(AffineBlock::new(extra));
        let more = solve(&q).unwrap();
        prop_assert!(more.margin <= base.upper_bound + 1e-6,
            "{} > {}", more.margin, base.upper_bound);
    }

    #[test]
    fn scaling_scales_margin(p in problem_strategy(), s in 0.1f64..10.0) {
        let base = solve(&p).unwrap();
        let mut q = p.clone();
        for b in &mut q.blocks {
            b.constant *= s;
            for t in &mut b.terms {
                t.matrix *= s;
            }
        }
        let scaled = solve(&q).unwrap();
        let tol = 1e-4 * (1.0 + s) * (1.0 + base.margin.abs());
        prop_assert!((scaled.margin - s * base.margin).abs() <= tol,
            "{} vs {}", scaled.margin, s * base.margin);
        // The base optimum stays optimal for the scaled problem.
        let m = assemble_margin(&q, &base.z).unwrap();
        prop_assert!((m - scaled.margin).abs() <= tol);
    }
}

#[test]
fn solve_is_deterministic() {
    let mut p = LmiProblem::new(2);
    p.blocks.push(
        AffineBlock::new(DMatrix::from_row_slice(2, 2, &[0.3, 0.1, 0.1, -0.2]))
            .with_term(0, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]))
            .with_term(1, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.2])),
    );
    p.bounds.push(LinearBound::symmetric(0, 1.0));
    p.bounds.push(LinearBound::symmetric(1, 1.0));
    let a = solve(&p).unwrap();
    let b = solve(&p).unwrap();
    assert_eq!(a.z, b.z);
    assert_eq!(a.margin.to_bits(), b.margin.to_bits());
}
