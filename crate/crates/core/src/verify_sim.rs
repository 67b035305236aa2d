//! Grid certification of a closed loop, deterministic and stochastic
//! rollouts, empirical contraction rates, and CSV/SVG output.
//!
//! Distances are measured in the norm `|δ|_M` with `M = P⁻¹`, the metric in
//! which the block condition `[[P, (AP)ᵀ], [AP, P]] ≻ 0` is a one-step
//! contraction of `δ ↦ A δ`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Domain;
use crate::linalg::{self, contraction_block, symmetrize, whitened_gain};
use crate::stochastic::StochasticSystem;
use crate::system::{FeedbackLaw, SystemModel};

/// Coordinates beyond this magnitude end a rollout as diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Distances below this are too small for a meaningful step ratio.
pub const RATIO_FLOOR: f64 = 1e-12;

/// `M = P⁻¹`.
pub fn metric_inverse(p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = symmetrize(p)
        .cholesky()
        .ok_or_else(|| Error::invalid("metric P must be positive definite"))?;
    Ok(symmetrize(&chol.inverse()))
}

/// `λ_min(P − P Aᵀ P⁻¹ A P)`, the Schur complement of the block condition.
pub fn schur_margin(a: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<f64> {
    let m = metric_inverse(p)?;
    let ap = a * p;
    Ok(linalg::min_eigenvalue(&symmetrize(&(p - ap.transpose() * m * ap))))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyPoint {
    pub x: Vec<f64>,
    /// `λ_min` of the block condition at `x`.
    pub margin: f64,
    /// One-step contraction factor at `x`.
    pub lambda: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerificationReport {
    pub domain: Domain,
    pub resolution: usize,
    pub points: Vec<VerifyPoint>,
    pub min_margin: f64,
    pub worst_point: Vec<f64>,
    pub lambda_max: f64,
    /// Whether `λ < 1` and a positive margin agreed at every point.
    pub consistent: bool,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.min_margin > 0.0 && self.lambda_max < 1.0
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `x_1..x_n, margin, lambda` per grid point.
    pub fn to_csv(&self) -> String {
        let n = self.domain.dim();
        let mut out: Vec<String> = (1..=n).map(|i| format!("x_{i}")).collect();
        out.push("margin".into());
        out.push("lambda".into());
        let mut s = out.join(",");
        s.push('\n');
        for p in &self.points {
            for v in &p.x {
                let _ = write!(s, "{v:e},");
            }
            let _ = writeln!(s, "{:e},{:e}", p.margin, p.lambda);
        }
        s
    }
}

/// Evaluates the block condition and the contraction factor of the closed
/// loop on a `resolution`-per-axis grid of `domain`.
pub fn verify_grid(
    model: &SystemModel,
    law: &dyn FeedbackLaw,
    p: &DMatrix<f64>,
    domain: &Domain,
    resolution: usize,
) -> Result<VerificationReport> {
    let n = model.dim();
    if p.nrows() != n || p.ncols() != n {
        return Err(Error::dim("P", n, p.nrows()));
    }
    if domain.dim() != n {
        return Err(Error::dim("domain", n, domain.dim()));
    }
    if law.dim() != n {
        return Err(Error::dim("controller", n, law.dim()));
    }
    if resolution == 0 {
        return Err(Error::invalid("verification resolution must be positive"));
    }
    metric_inverse(p)?;
    let mut points = Vec::new();
    let mut consistent = true;
    for x in domain.grid(resolution) {
        let a = model.closed_loop_jacobian(&x, law);
        let margin = linalg::min_eigenvalue(&contraction_block(&a, p));
        let lambda = whitened_gain(&a, p)?;
        let tol = 1e-9 * (1.0 + p.amax());
        if (margin > tol && lambda >= 1.0) || (margin < -tol && lambda < 1.0) {
            consistent = false;
        }
        points.push(VerifyPoint {
            x: x.as_slice().to_vec(),
            margin,
            lambda,
        });
    }
    let worst = points
        .iter()
        .min_by(|a, b| a.margin.total_cmp(&b.margin))
        .expect("grid is nonempty");
    Ok(VerificationReport {
        domain: domain.clone(),
        resolution,
        min_margin: worst.margin,
        worst_point: worst.x.clone(),
        lambda_max: points.iter().map(|p| p.lambda).fold(0.0, f64::max),
        consistent,
        points,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub inputs: Vec<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
    pub diverged: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state(&self, k: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.states[k])
    }

    pub fn last(&self) -> DVector<f64> {
        self.state(self.states.len() - 1)
    }

    /// `k, x_1..x_n, u`; the final state has an empty input field.
    pub fn to_csv(&self) -> String {
        let n = self.states.first().map_or(0, Vec::len);
        let mut header = vec!["k".to_string()];
        header.extend((1..=n).map(|i| format!("x_{i}")));
        header.push("u".into());
        let mut s = header.join(",");
        s.push('\n');
        for (k, x) in self.states.iter().enumerate() {
            let _ = write!(s, "{k}");
            for v in x {
                let _ = write!(s, ",{v:e}");
            }
            match self.inputs.get(k) {
                Some(u) => {
                    let _ = writeln!(s, ",{u:e}");
                }
                None => s.push_str(",\n"),
            }
        }
        s
    }
}

fn escaped(x: &DVector<f64>) -> bool {
    x.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT)
}

fn check_rollout(n: usize, x0: &DVector<f64>, steps: usize) -> Result<()> {
    if x0.len() != n {
        return Err(Error::dim("x0", n, x0.len()));
    }
    if steps == 0 {
        return Err(Error::invalid("rollout needs at least one step"));
    }
    Ok(())
}

/// Iterates `x_{k+1} = f(x_k) + b(x_k) p(x_k)` for `steps` steps.
pub fn rollout(model: &SystemModel, law: &dyn FeedbackLaw, x0: &DVector<f64>, steps: usize) -> Result<Trajectory> {
    check_rollout(model.dim(), x0, steps)?;
    let mut x = x0.clone();
    let mut states = vec![x.as_slice().to_vec()];
    let mut inputs = Vec::with_capacity(steps);
    let mut diverged = false;
    for _ in 0..steps {
        let u = law.control(&x);
        x = model.step(&x, u);
        inputs.push(u);
        states.push(x.as_slice().to_vec());
        if escaped(&x) {
            diverged = true;
            break;
        }
    }
    Ok(Trajectory {
        states,
        inputs,
        seed: None,
        diverged,
    })
}

/// Iterates `x_{k+1} = μ(x_k) + b u_k + σ(x_k) ω_k` with `ω_k` drawn from a
/// ChaCha8 stream seeded by `seed`.
pub fn rollout_stochastic(sys: &dyn StochasticSystem, x0: &DVector<f64>, steps: usize, seed: u64) -> Result<Trajectory> {
    let n = sys.dim();
    check_rollout(n, x0, steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = x0.clone();
    let mut states = vec![x.as_slice().to_vec()];
    let mut inputs = Vec::with_capacity(steps);
    let mut diverged = false;
    for _ in 0..steps {
        let u = sys.control(&x);
        let sigma = sys.diffusion(&x);
        let mut next = sys.mean_step(&x, u);
        for i in 0..n {
            let w: f64 = StandardNormal.sample(&mut rng);
            if sigma[i] != 0.0 {
                next[i] += sigma[i] * w;
            }
        }
        x = next;
        inputs.push(u);
        states.push(x.as_slice().to_vec());
        if escaped(&x) {
            diverged = true;
            break;
        }
    }
    Ok(Trajectory {
        states,
        inputs,
        seed: Some(seed),
        diverged,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RateEstimate {
    /// Largest observed ratio `|δ_{k+1}|_M / |δ_k|_M`; 0 when none was usable.
    pub lambda: f64,
    pub ratios: usize,
    /// Steps skipped because the distance was below [`RATIO_FLOOR`].
    pub skipped: usize,
    /// Steps skipped because a state left the region.
    pub excluded: usize,
    /// Set when no ratio could be formed.
    pub degenerate: bool,
}

/// Largest step ratio of the `metric`-weighted distance over trajectory pairs.
/// With a `region`, steps starting from a state outside it are excluded.
pub fn contraction_rate(
    pairs: &[(Trajectory, Trajectory)],
    metric: &DMatrix<f64>,
    region: Option<&Domain>,
) -> Result<RateEstimate> {
    let mut est = RateEstimate {
        lambda: 0.0,
        ratios: 0,
        skipped: 0,
        excluded: 0,
        degenerate: false,
    };
    for (a, b) in pairs {
        if a.len() != b.len() {
            return Err(Error::dim("paired trajectory", a.len(), b.len()));
        }
        for k in 0..a.len().saturating_sub(1) {
            let (xa, xb) = (a.state(k), b.state(k));
            if let Some(d) = region {
                if !d.contains(&xa) || !d.contains(&xb) {
                    est.excluded += 1;
                    continue;
                }
            }
            let d0 = linalg::weighted_norm(&(&xa - &xb), metric);
            if d0 < RATIO_FLOOR {
                est.skipped += 1;
                continue;
            }
            let d1 = linalg::weighted_norm(&(a.state(k + 1) - b.state(k + 1)), metric);
            est.lambda = est.lambda.max(d1 / d0);
            est.ratios += 1;
        }
    }
    est.degenerate = est.ratios == 0;
    Ok(est)
}

/// Evenly spaced initial states on the boundary of a 1-D or 2-D box,
/// walking the perimeter counterclockwise from the lower corner.
pub fn boundary_states(domain: &Domain, count: usize) -> Result<Vec<DVector<f64>>> {
    match domain.dim() {
        1 => Ok(vec![
            DVector::from_element(1, domain.lower[0]),
            DVector::from_element(1, domain.upper[0]),
        ]),
        2 => {
            let (x0, y0, x1, y1) = (domain.lower[0], domain.lower[1], domain.upper[0], domain.upper[1]);
            let (w, h) = (x1 - x0, y1 - y0);
            let perimeter = 2.0 * (w + h);
            Ok((0..count)
                .map(|k| {
                    let s = perimeter * k as f64 / count as f64;
                    let (x, y) = if s < w {
                        (x0 + s, y0)
                    } else if s < w + h {
                        (x1, y0 + (s - w))
                    } else if s < 2.0 * w + h {
                        (x1 - (s - w - h), y1)
                    } else {
                        (x0, y1 - (s - 2.0 * w - h))
                    };
                    DVector::from_vec(vec![x, y])
                })
                .collect())
        }
        d => Err(Error::invalid(format!("boundary sampling supports 1 or 2 dimensions, got {d}"))),
    }
}

const SVG_SIZE: f64 = 480.0;
const SVG_PAD: f64 = 24.0;

fn svg_map(domain: &Domain) -> impl Fn(f64, f64) -> (f64, f64) + '_ {
    let span = |a: usize| (domain.upper[a] - domain.lower[a]).max(f64::MIN_POSITIVE);
    move |x, y| {
        let inner = SVG_SIZE - 2.0 * SVG_PAD;
        (
            SVG_PAD + (x - domain.lower[0]) / span(0) * inner,
            SVG_SIZE - SVG_PAD - (y - domain.lower[1]) / span(1) * inner,
        )
    }
}

fn svg_open(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_SIZE}\" height=\"{SVG_SIZE}\" viewBox=\"0 0 {SVG_SIZE} {SVG_SIZE}\">\n<title>{title}</title>\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
}

/// Phase portrait of 2-D trajectories, clipped to `domain`.
pub fn phase_portrait_svg(trajectories: &[Trajectory], domain: &Domain, title: &str) -> Result<String> {
    if domain.dim() != 2 {
        return Err(Error::invalid("phase portraits need a 2-D domain"));
    }
    let map = svg_map(domain);
    let mut s = svg_open(title);
    let (bx0, by0) = map(domain.lower[0], domain.upper[1]);
    let (bx1, by1) = map(domain.upper[0], domain.lower[1]);
    let _ = writeln!(
        s,
        "<rect x=\"{bx0:.2}\" y=\"{by0:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"none\" stroke=\"#888\"/>",
        bx1 - bx0,
        by1 - by0
    );
    for t in trajectories {
        let color = if t.diverged { "#c0392b" } else { "#1f4e79" };
        let pts: Vec<String> = t
            .states
            .iter()
            .filter(|x| domain.contains(&DVector::from_column_slice(x)))
            .map(|x| {
                let (u, v) = map(x[0], x[1]);
                format!("{u:.2},{v:.2}")
            })
            .collect();
        if pts.is_empty() {
            continue;
        }
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1\" points=\"{}\"/>",
            pts.join(" ")
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Heat map of scalar values on a `resolution`-per-axis grid of a 2-D domain
/// (values in [`Domain::grid`] order).
pub fn heatmap_svg(values: &[f64], domain: &Domain, resolution: usize, title: &str) -> Result<String> {
    if domain.dim() != 2 {
        return Err(Error::invalid("heat maps need a 2-D domain"));
    }
    if values.len() != resolution * resolution {
        return Err(Error::dim("heat map values", resolution * resolution, values.len()));
    }
    let finite = values.iter().copied().filter(|v| v.is_finite());
    let lo = finite.clone().fold(f64::INFINITY, f64::min);
    let hi = finite.fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let inner = SVG_SIZE - 2.0 * SVG_PAD;
    let cell = inner / resolution as f64;
    let mut s = svg_open(title);
    for (k, v) in values.iter().enumerate() {
        let (i, j) = (k / resolution, k % resolution);
        let t = if v.is_finite() { (v - lo) / span } else { 0.0 };
        let (r, b) = ((255.0 * t).round() as u8, (255.0 * (1.0 - t)).round() as u8);
        let _ = writeln!(
            s,
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"rgb({r},64,{b})\"/>",
            SVG_PAD + i as f64 * cell,
            SVG_SIZE - SVG_PAD - (j + 1) as f64 * cell,
            cell,
            cell
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::{LinearDynamics, LinearFeedback, ZeroControl};
    use crate::system::{InputField, SystemModel};
    use nalgebra::dvector;
    use std::sync::Arc;

    fn scalar_toy() -> (SystemModel, LinearFeedback) {
        // x⁺ = 2x + u with u = -2x.
        let dynamics = LinearDynamics {
            a: DMatrix::from_element(1, 1, 2.0),
        };
        let model = SystemModel::new(Arc::new(dynamics), InputField::Constant(dvector![1.0])).unwrap();
        (model, LinearFeedback { gain: dvector![-2.0] })
    }

    #[test]
    fn deadbeat_toy_verifies_with_unit_margin() {
        let (model, law) = scalar_toy();
        let p = DMatrix::from_element(1, 1, 1.0);
        let r = verify_grid(&model, &law, &p, &Domain::cube(1, -2.0, 2.0), 11).unwrap();
        assert!((r.min_margin - 1.0).abs() < 1e-15);
        assert_eq!(r.lambda_max, 0.0);
        assert!(r.consistent && r.passed());
    }

    #[test]
    fn deadbeat_rollout() {
        let (model, law) = scalar_toy();
        let t = rollout(&model, &law, &dvector![1.0], 4).unwrap();
        assert_eq!(t.states, vec![vec![1.0], vec![0.0], vec![0.0], vec![0.0], vec![0.0]]);
        assert_eq!(t.inputs, vec![-2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn divergence_truncates() {
        let (model, _) = scalar_toy();
        let t = rollout(&model, &ZeroControl { dim: 1 }, &dvector![1.0], 100).unwrap();
        assert!(t.diverged);
        assert_eq!(t.len(), 21);
    }

    #[test]
    fn linear_closed_loop_rate() {
        let a = DMatrix::from_row_slice(2, 2, &[0.5, 0.2, -0.1, 0.6]);
        let model = SystemModel::new(Arc::new(LinearDynamics { a: a.clone() }), InputField::Constant(dvector![0.0, 1.0]))
            .unwrap();
        let law = ZeroControl { dim: 2 };
        let p = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let m = metric_inverse(&p).unwrap();
        // Generalized eigenproblem AᵀMA v = λ² M v, whitened by the Cholesky factor of M.
        let r = m.clone().cholesky().unwrap().l();
        let ri = r.clone().try_inverse().unwrap();
        let expected = linalg::max_eigenvalue(&(&ri * a.transpose() * &m * &a * ri.transpose())).sqrt();
        let r = verify_grid(&model, &law, &p, &Domain::cube(2, -1.0, 1.0), 3).unwrap();
        assert!((r.lambda_max - expected).abs() < 1e-12);
        let block = linalg::min_eigenvalue(&contraction_block(&a, &p));
        assert!((r.min_margin - block).abs() < 1e-15);
        let pairs: Vec<_> = [dvector![1.0, 0.0], dvector![0.3, -0.8], dvector![-0.5, 0.5]]
            .iter()
            .map(|x0| {
                (
                    rollout(&model, &law, x0, 30).unwrap(),
                    rollout(&model, &law, &DVector::zeros(2), 30).unwrap(),
                )
            })
            .collect();
        let est = contraction_rate(&pairs, &m, None).unwrap();
        assert!(est.lambda <= expected + 1e-9);
        assert!(est.ratios > 0);
    }

    #[test]
    fn identical_trajectories_are_degenerate() {
        let (model, law) = scalar_toy();
        let t = rollout(&model, &law, &dvector![0.0], 3).unwrap();
        let est = contraction_rate(&[(t.clone(), t)], &DMatrix::identity(1, 1), None).unwrap();
        assert_eq!(est.lambda, 0.0);
        assert!(est.degenerate);
        assert_eq!(est.skipped, 3);
    }

    #[test]
    fn schur_margin_sign_matches_block() {
        let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.3, -0.2, 0.8]);
        let p = DMatrix::from_row_slice(2, 2, &[1.5, -0.4, -0.4, 1.0]);
        let block = linalg::min_eigenvalue(&contraction_block(&a, &p));
        assert_eq!(block > 0.0, schur_margin(&a, &p).unwrap() > 0.0);
    }

    #[test]
    fn boundary_states_walk_the_perimeter() {
        let pts = boundary_states(&Domain::cube(2, -2.0, 2.0), 16).unwrap();
        assert_eq!(pts.len(), 16);
        assert_eq!(pts[0].as_slice(), &[-2.0, -2.0]);
        assert_eq!(pts[4].as_slice(), &[2.0, -2.0]);
        assert_eq!(pts[8].as_slice(), &[2.0, 2.0]);
        for p in &pts {
            assert!(p.iter().any(|v| v.abs() == 2.0));
        }
    }

    #[test]
    fn csv_and_svg_output() {
        let (model, law) = scalar_toy();
        let t = rollout(&model, &law, &dvector![1.0], 1).unwrap();
        assert_eq!(t.to_csv(), "k,x_1,u\n0,1e0,-2e0\n1,0e0,\n");
        let d = Domain::cube(2, -1.0, 1.0);
        let traj = Trajectory {
            states: vec![vec![0.5, 0.5], vec![0.0, 0.0]],
            inputs: vec![0.0],
            seed: None,
            diverged: false,
        };
        let svg = phase_portrait_svg(&[traj], &d, "portrait").unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("<polyline"));
        let heat = heatmap_svg(&[0.0, 1.0, 2.0, 3.0], &d, 2, "heat").unwrap();
        assert_eq!(heat.matches("<rect").count(), 5);
    }
}
