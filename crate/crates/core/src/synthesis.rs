//! Controller synthesis by finite families of LMIs.
//!
//! * Metric step: find `P` with `B⊥(P - J P Jᵀ)B⊥ᵀ ⪰ ε_p I` at every data
//!   point (or hull vertex), where `B⊥` annihilates the input direction.
//! * Gain step: with `P` fixed, find derivative targets `Y_p` such that the
//!   closed-loop block `[[P, (A P)ᵀ], [A P, P]] ⪰ ε I`, where
//!   `A = J + b ∂m_p + m_p ∂b` is affine in `Y_p` through the derivative GP.
//! * Joint step: `P` and `p̄ᵢ = ∂p(xᵢ) P` solved together, then
//!   `p̂ᵢ = p̄ᵢ P⁻¹` are fitted.
//!
//! All margins are maximized under the normalization `I ⪯ P ⪯ ρI`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::deriv_gp::{fit, DerivativeController, DerivativeDataset, DerivativeGp};
use crate::error::{Error, Result};
use crate::grid::{unflatten, Domain};
use crate::kernels::Kernel;
use crate::linalg::{contraction_block, min_eigenvalue, serde_rows, symmetrize};
use crate::lmi::{
    metric_normalization, solve_with, symmetric_basis, symmetric_coords, symmetric_from_coords,
    AffineBlock, LinearBound, LmiProblem, LmiSolution, SolveStatus, SolverOptions,
};
use crate::system::{FeedbackLaw, InputField, SystemModel};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthesisOptions {
    /// Upper normalization bound `P ⪯ ρI`.
    pub rho: f64,
    /// Derivative-target noise level of the controller GP.
    pub sigma_p: f64,
    pub jitter: Option<f64>,
    /// Optional box `|Y_p,k| ≤ bound` on the gain-step targets.
    pub target_bound: Option<f64>,
    /// Shift the controller so that it vanishes at the equilibrium.
    pub equilibrium_offset: bool,
    /// Equilibrium override (for learned models without an exact fixed point).
    pub anchor: Option<Vec<f64>>,
    pub solver: SolverOptions,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        SynthesisOptions {
            rho: 100.0,
            sigma_p: 0.0,
            jitter: None,
            target_bound: None,
            equilibrium_offset: true,
            anchor: None,
            solver: SolverOptions::default(),
        }
    }
}

impl SynthesisOptions {
    fn validate(&self) -> Result<()> {
        if !(self.rho.is_finite() && self.rho > 1.0) {
            return Err(Error::invalid(format!("rho must exceed 1, got {}", self.rho)));
        }
        if !(self.sigma_p.is_finite() && self.sigma_p >= 0.0) {
            return Err(Error::invalid("sigma_p must be nonnegative"));
        }
        if let Some(b) = self.target_bound {
            if !(b.is_finite() && b > 0.0) {
                return Err(Error::invalid("target_bound must be positive"));
            }
        }
        Ok(())
    }

    fn metric_solver(&self) -> SolverOptions {
        let mut s = self.solver.clone();
        s.bisection_width.get_or_insert(1e-6 * self.rho);
        s
    }

    fn anchor(&self, model: &SystemModel) -> Result<Option<DVector<f64>>> {
        if !self.equilibrium_offset {
            return Ok(None);
        }
        match &self.anchor {
            Some(a) if a.len() != model.dim() => Err(Error::dim("anchor", model.dim(), a.len())),
            Some(a) => Ok(Some(DVector::from_column_slice(a))),
            None => Ok(model.equilibrium().cloned()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthesisMode {
    TwoStep,
    Joint,
    Polytopic,
}

/// Margin of one constraint block, as reported by the solver and as
/// recomputed from the final `P` (and fitted controller).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstraintMargin {
    pub step: String,
    pub point: usize,
    pub vertex: Option<usize>,
    pub x: Vec<f64>,
    pub solver_margin: f64,
    pub recomputed_margin: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricSolution {
    #[serde(with = "serde_rows")]
    pub p: DMatrix<f64>,
    /// `None` when the input direction spans the state space (`n = 1`).
    pub eps_p: Option<f64>,
    pub margins: Vec<ConstraintMargin>,
    pub trace: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthesisReport {
    #[serde(with = "serde_rows")]
    pub p: DMatrix<f64>,
    pub eps_p: Option<f64>,
    pub eps: f64,
    pub mode: SynthesisMode,
    pub status: SolveStatus,
    pub controller: DerivativeController,
    /// Derivative targets `p̂⁽ⁱ⁾` the controller was fitted to.
    pub targets: Vec<Vec<f64>>,
    pub diagnostics: Vec<ConstraintMargin>,
    /// Largest `|p̂⁽ⁱ⁾ - p̂⁽ʲ⁾|` over neighboring hull cells (polytopic mode).
    pub max_neighbor_gap: Option<f64>,
    pub trace: Vec<String>,
}

impl SynthesisReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Smallest a-posteriori margin over all constraints of the final step.
    pub fn min_recomputed_margin(&self) -> f64 {
        self.diagnostics
            .iter()
            .filter(|d| d.step != "metric")
            .map(|d| d.recomputed_margin)
            .fold(f64::INFINITY, f64::min)
    }

    /// One row per constraint: `step,point,vertex,x_1..x_n,solver_margin,recomputed_margin`.
    pub fn margins_csv(&self) -> String {
        margins_csv(&self.diagnostics)
    }
}

pub fn margins_csv(rows: &[ConstraintMargin]) -> String {
    let n = rows.first().map_or(0, |r| r.x.len());
    let mut out = String::from("step,point,vertex");
    for i in 1..=n {
        out.push_str(&format!(",x_{i}"));
    }
    out.push_str(",solver_margin,recomputed_margin\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{}",
            r.step,
            r.point,
            r.vertex.map_or(String::new(), |v| v.to_string())
        ));
        for v in &r.x {
            out.push_str(&format!(",{v:e}"));
        }
        out.push_str(&format!(",{:e},{:e}\n", r.solver_margin, r.recomputed_margin));
    }
    out
}

/// Orthonormal rows spanning the left null space of `b` (so `B⊥ b = 0`).
///
/// Rows are built by Gram–Schmidt over the coordinate vectors, taking at each
/// step the one with the largest component outside the current span (lowest
/// index on ties), so the result is deterministic.
pub fn left_annihilator(b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, m) = b.shape();
    if m == 0 || m > n {
        return Err(Error::invalid(format!(
            "input matrix must have between 1 and {n} columns, got {m}"
        )));
    }
    let sv = b.clone().svd(false, false).singular_values;
    let (smax, smin) = (sv.max(), sv.min());
    if smax.is_nan() || smax <= 0.0 || smin <= 1e-12 * smax {
        return Err(Error::invalid("input matrix b is rank deficient"));
    }
    let project_out = |v: &mut DVector<f64>, basis: &[DVector<f64>]| {
        for _ in 0..2 {
            for q in basis {
                let c = q.dot(v);
                *v -= q * c;
            }
        }
    };
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(n);
    for col in b.column_iter() {
        let mut v = col.into_owned();
        project_out(&mut v, &basis);
        let norm = v.norm();
        basis.push(v / norm);
    }
    let mut out = DMatrix::zeros(n - m, n);
    for row in 0..n - m {
        let mut best: Option<(f64, DVector<f64>)> = None;
        for k in 0..n {
            let mut e = DVector::zeros(n);
            e[k] = 1.0;
            project_out(&mut e, &basis);
            let norm = e.norm();
            if best.as_ref().is_none_or(|(bn, _)| norm > *bn + 1e-12) {
                best = Some((norm, e));
            }
        }
        let (norm, v) = best.expect("n > 0");
        let q = v / norm;
        out.set_row(row, &q.transpose());
        basis.push(q);
    }
    Ok(out)
}

fn column(b: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(b.len(), 1, b.as_slice())
}

/// One axis-aligned cell and its Jacobian hull.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HullCell {
    pub bounds: Domain,
    pub center: Vec<f64>,
    /// Entrywise lower and upper limits of the (inflated) Jacobian intervals.
    #[serde(with = "serde_rows")]
    pub entry_lower: DMatrix<f64>,
    #[serde(with = "serde_rows")]
    pub entry_upper: DMatrix<f64>,
    pub vertices: Vec<Vertex>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vertex(#[serde(with = "serde_rows")] pub DMatrix<f64>);

impl HullCell {
    /// Whether `j` lies entrywise inside the cell's interval matrix.
    pub fn contains(&self, j: &DMatrix<f64>) -> bool {
        j.iter()
            .zip(self.entry_lower.iter().zip(self.entry_upper.iter()))
            .all(|(v, (lo, hi))| {
                let tol = 1e-12 * (1.0 + v.abs());
                *v >= lo - tol && *v <= hi + tol
            })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VertexHull {
    pub domain: Domain,
    pub subdivisions: usize,
    pub inflation: f64,
    pub cells: Vec<HullCell>,
}

impl VertexHull {
    pub fn centers(&self) -> Vec<DVector<f64>> {
        self.cells
            .iter()
            .map(|c| DVector::from_column_slice(&c.center))
            .collect()
    }

    /// Index of a cell containing `x`, if any.
    pub fn locate(&self, x: &DVector<f64>) -> Option<usize> {
        if !self.domain.contains(x) {
            return None;
        }
        let r = self.subdivisions;
        let mut flat = 0;
        for a in 0..self.domain.dim() {
            let (lo, hi) = (self.domain.lower[a], self.domain.upper[a]);
            let w = (hi - lo) / r as f64;
            let i = if w > 0.0 {
                (((x[a] - lo) / w).floor() as usize).min(r - 1)
            } else {
                0
            };
            flat = flat * r + i;
        }
        Some(flat)
    }

    /// Checks that the Jacobian at every point of a `per_axis` subgrid of each
    /// cell lies inside that cell's interval matrix.
    pub fn validate(&self, model: &SystemModel, per_axis: usize) -> Result<()> {
        for (i, cell) in self.cells.iter().enumerate() {
            for x in cell.bounds.grid(per_axis) {
                let j = model.drift_jacobian(&x);
                if !cell.contains(&j) {
                    return Err(Error::Numerical(format!(
                        "hull of cell {i} misses the Jacobian at {:?}; increase the inflation",
                        x.as_slice()
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HullOptions {
    pub samples_per_axis: usize,
    pub validation_per_axis: usize,
    pub max_vertices: usize,
}

impl Default for HullOptions {
    fn default() -> Self {
        HullOptions {
            samples_per_axis: 5,
            validation_per_axis: 9,
            max_vertices: 1 << 12,
        }
    }
}

pub fn build_hulls(model: &SystemModel, domain: &Domain, r: usize, inflation: f64) -> Result<VertexHull> {
    build_hulls_with(model, domain, r, inflation, &HullOptions::default())
}

/// Interval hulls of `∂f` over the `rⁿ` cells of `domain`.
///
/// Each Jacobian entry is sampled on a subgrid of the cell; entries that vary
/// are widened on both sides by `η·(w + d·s)`, where `w` is the sampled range,
/// `d` the cell diameter and `s` the largest sampled slope of that entry.
/// Constant entries stay pinned. Vertices enumerate all interval endpoints.
pub fn build_hulls_with(
    model: &SystemModel,
    domain: &Domain,
    r: usize,
    inflation: f64,
    opts: &HullOptions,
) -> Result<VertexHull> {
    let n = model.dim();
    if domain.dim() != n {
        return Err(Error::dim("domain", n, domain.dim()));
    }
    if r == 0 {
        return Err(Error::invalid("subdivisions r must be at least 1"));
    }
    if !(inflation.is_finite() && inflation >= 0.0) {
        return Err(Error::invalid("inflation must be nonnegative"));
    }
    if opts.samples_per_axis < 2 {
        return Err(Error::invalid("hull sampling needs at least 2 samples per axis"));
    }
    let s = opts.samples_per_axis;
    let mut cells = Vec::new();
    for (ci, bounds) in domain.cells(r).into_iter().enumerate() {
        let samples = bounds.grid(s);
        let jacs: Vec<DMatrix<f64>> = samples.iter().map(|x| model.drift_jacobian(x)).collect();
        let mut lo = jacs[0].clone();
        let mut hi = jacs[0].clone();
        for j in &jacs[1..] {
            lo.zip_apply(j, |a, b| *a = a.min(b));
            hi.zip_apply(j, |a, b| *a = a.max(b));
        }
        let mut slope = DMatrix::<f64>::zeros(n, n);
        for (flat, j) in jacs.iter().enumerate() {
            let idx = unflatten(flat, s, n);
            let mut stride = 1;
            for a in (0..n).rev() {
                if idx[a] + 1 < s {
                    let step = (bounds.upper[a] - bounds.lower[a]) / (s - 1) as f64;
                    if step > 0.0 {
                        let next = &jacs[flat + stride];
                        slope.zip_apply(&((next - j) / step), |m, d| *m = m.max(d.abs()));
                    }
                }
                stride *= s;
            }
        }
        let diam = bounds.diameter();
        let mut varying = Vec::new();
        for c in 0..n {
            for rr in 0..n {
                let w = hi[(rr, c)] - lo[(rr, c)];
                if w > 1e-14 * (1.0 + lo[(rr, c)].abs()) {
                    let pad = inflation * (w + diam * slope[(rr, c)]);
                    lo[(rr, c)] -= pad;
                    hi[(rr, c)] += pad;
                    varying.push((rr, c));
                } else {
                    hi[(rr, c)] = lo[(rr, c)];
                }
            }
        }
        let vertices = enumerate_vertices(&lo, &hi, &varying, opts.max_vertices)
            .map_err(|e| Error::invalid(format!("cell {ci}: {e}")))?;
        cells.push(HullCell {
            center: bounds.center().as_slice().to_vec(),
            bounds,
            entry_lower: lo,
            entry_upper: hi,
            vertices,
        });
    }
    let hull = VertexHull {
        domain: domain.clone(),
        subdivisions: r,
        inflation,
        cells,
    };
    hull.validate(model, opts.validation_per_axis)?;
    Ok(hull)
}

/// Entries `(row, col)` whose interval has positive width.
pub(crate) fn varying_entries(lo: &DMatrix<f64>, hi: &DMatrix<f64>) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for c in 0..lo.ncols() {
        for r in 0..lo.nrows() {
            if hi[(r, c)] > lo[(r, c)] {
                out.push((r, c));
            }
        }
    }
    out
}

/// All corner matrices of the interval matrix `[lo, hi]` over the `varying` entries.
pub(crate) fn enumerate_vertices(
    lo: &DMatrix<f64>,
    hi: &DMatrix<f64>,
    varying: &[(usize, usize)],
    max_vertices: usize,
) -> Result<Vec<Vertex>> {
    if varying.len() >= usize::BITS as usize || (1usize << varying.len()) > max_vertices {
        return Err(Error::invalid(format!(
            "needs 2^{} hull vertices (cap {max_vertices}); group Jacobian entries more coarsely or increase r",
            varying.len()
        )));
    }
    Ok((0..1usize << varying.len())
        .map(|mask| {
            let mut v = lo.clone();
            for (bit, (r, c)) in varying.iter().enumerate() {
                if mask >> bit & 1 == 1 {
                    v[(*r, *c)] = hi[(*r, *c)];
                }
            }
            Vertex(v)
        })
        .collect())
}

/// Data points paired with the Jacobians their constraints must cover.
struct Scenario {
    x: DVector<f64>,
    jacobians: Vec<DMatrix<f64>>,
    polytopic: bool,
}

fn scenarios(model: &SystemModel, points: &[DVector<f64>], hulls: Option<&VertexHull>) -> Result<Vec<Scenario>> {
    let n = model.dim();
    if points.is_empty() {
        return Err(Error::invalid("at least one data point is required"));
    }
    for p in points {
        if p.len() != n {
            return Err(Error::dim("data point", n, p.len()));
        }
    }
    match hulls {
        None => Ok(points
            .iter()
            .map(|x| Scenario {
                x: x.clone(),
                jacobians: vec![model.drift_jacobian(x)],
                polytopic: false,
            })
            .collect()),
        Some(h) => {
            if h.cells.len() != points.len() {
                return Err(Error::dim("data points (one per hull cell)", h.cells.len(), points.len()));
            }
            points
                .iter()
                .zip(&h.cells)
                .enumerate()
                .map(|(i, (x, cell))| {
                    if !cell.bounds.contains(x) {
                        return Err(Error::invalid(format!("data point {i} lies outside hull cell {i}")));
                    }
                    Ok(Scenario {
                        x: x.clone(),
                        jacobians: cell.vertices.iter().map(|v| v.0.clone()).collect(),
                        polytopic: true,
                    })
                })
                .collect()
        }
    }
}

fn vertex_label(s: &Scenario, l: usize) -> Option<usize> {
    s.polytopic.then_some(l)
}

fn infeasible(what: &str, problem: &LmiProblem, sol: &LmiSolution) -> Error {
    let worst = sol
        .block_margins
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(j, _)| problem.blocks[j].label.clone())
        .unwrap_or_default();
    match sol.status {
        SolveStatus::NumericalFailure => Error::Numerical(format!(
            "{what}: solver stalled (best margin {:.6e}); trace: {}",
            sol.margin,
            sol.trace.join("; ")
        )),
        _ => Error::Infeasible(format!(
            "{what}: best margin {:.6e} (upper bound {:.6e}), worst constraint at {worst}",
            sol.margin, sol.upper_bound
        )),
    }
}

fn accept(status: SolveStatus) -> bool {
    matches!(status, SolveStatus::Optimal | SolveStatus::Feasible)
}

fn point_label(s: &Scenario, i: usize, l: usize) -> String {
    let xs: Vec<String> = s.x.iter().map(|v| format!("{v:.4}")).collect();
    match vertex_label(s, l) {
        Some(v) => format!("point {i} [{}] vertex {v}", xs.join(", ")),
        None => format!("point {i} [{}]", xs.join(", ")),
    }
}

/// Metric step: maximizes `ε_p` subject to `B⊥(P - J P Jᵀ)B⊥ᵀ ⪰ ε_p I` and
/// `I ⪯ P ⪯ ρI`.
pub fn solve_metric(
    model: &SystemModel,
    points: &[DVector<f64>],
    hulls: Option<&VertexHull>,
    opts: &SynthesisOptions,
) -> Result<MetricSolution> {
    opts.validate()?;
    let n = model.dim();
    let scen = scenarios(model, points, hulls)?;
    let annihilators = scen
        .iter()
        .map(|s| left_annihilator(&column(&model.input_at(&s.x))))
        .collect::<Result<Vec<_>>>()?;
    if n == 1 {
        return Ok(MetricSolution {
            p: DMatrix::identity(1, 1),
            eps_p: None,
            margins: Vec::new(),
            trace: vec!["input spans the state space; P fixed to 1".into()],
        });
    }
    let basis = symmetric_basis(n);
    let mut problem = LmiProblem::new(basis.len());
    for (i, (s, bp)) in scen.iter().zip(&annihilators).enumerate() {
        for (l, j) in s.jacobians.iter().enumerate() {
            let mut blk = AffineBlock::new(DMatrix::zeros(n - 1, n - 1)).labeled(point_label(s, i, l));
            for (k, e) in basis.iter().enumerate() {
                blk.push_term(k, symmetrize(&(bp * (e - j * e * j.transpose()) * bp.transpose())));
            }
            problem.blocks.push(blk);
        }
    }
    problem.constraints = metric_normalization(n, 0, opts.rho);
    problem.start = Some(symmetric_coords(&(DMatrix::identity(n, n) * (0.5 * (1.0 + opts.rho)))));
    let sol = solve_with(&problem, &opts.metric_solver())?;
    if !accept(sol.status) {
        return Err(infeasible("metric LMI", &problem, &sol));
    }
    let p = symmetric_from_coords(n, sol.z.as_slice());
    let mut margins = Vec::new();
    let mut idx = 0;
    for (i, (s, bp)) in scen.iter().zip(&annihilators).enumerate() {
        for (l, j) in s.jacobians.iter().enumerate() {
            let m = bp * (&p - j * &p * j.transpose()) * bp.transpose();
            margins.push(ConstraintMargin {
                step: "metric".into(),
                point: i,
                vertex: vertex_label(s, l),
                x: s.x.as_slice().to_vec(),
                solver_margin: sol.block_margins[idx],
                recomputed_margin: min_eigenvalue(&m),
            });
            idx += 1;
        }
    }
    Ok(MetricSolution {
        p,
        eps_p: Some(sol.margin),
        margins,
        trace: sol.trace,
    })
}

/// Symmetric `2n × 2n` coefficient `[[0, (M P)ᵀ], [M P, 0]]`.
fn off_diagonal(mp: &DMatrix<f64>) -> DMatrix<f64> {
    let n = mp.nrows();
    let mut c = DMatrix::zeros(2 * n, 2 * n);
    c.view_mut((n, 0), (n, n)).copy_from(mp);
    c.view_mut((0, n), (n, n)).copy_from(&mp.transpose());
    c
}

fn recomputed_margins(
    step: &str,
    model: &SystemModel,
    scen: &[Scenario],
    p: &DMatrix<f64>,
    law: &dyn FeedbackLaw,
    solver_margins: &[f64],
) -> Vec<ConstraintMargin> {
    let mut out = Vec::new();
    let mut idx = 0;
    for (i, s) in scen.iter().enumerate() {
        let b = model.input_at(&s.x);
        let mut extra = &b * law.gradient(&s.x).transpose();
        if let InputField::StateDependent(map) = model.input() {
            extra += map.jacobian(&s.x) * law.control(&s.x);
        }
        for (l, j) in s.jacobians.iter().enumerate() {
            let a = j + &extra;
            out.push(ConstraintMargin {
                step: step.into(),
                point: i,
                vertex: vertex_label(s, l),
                x: s.x.as_slice().to_vec(),
                solver_margin: solver_margins[idx],
                recomputed_margin: min_eigenvalue(&contraction_block(&a, p)),
            });
            idx += 1;
        }
    }
    out
}

fn neighbor_gap(hulls: Option<&VertexHull>, targets: &[DVector<f64>]) -> Option<f64> {
    let h = hulls?;
    let n = h.domain.dim();
    let r = h.subdivisions;
    let mut gap: f64 = 0.0;
    for flat in 0..targets.len() {
        let idx = unflatten(flat, r, n);
        let mut stride = 1;
        for a in (0..n).rev() {
            if idx[a] + 1 < r {
                gap = gap.max((&targets[flat + stride] - &targets[flat]).norm());
            }
            stride *= r;
        }
    }
    Some(gap)
}

/// Gain step for a fixed metric `P`: the decision variables are the stacked
/// derivative targets `Y_p`. Handles constant and state-dependent `b`.
pub fn solve_gain(
    model: &SystemModel,
    p: &DMatrix<f64>,
    kernel: &Kernel,
    points: &[DVector<f64>],
    hulls: Option<&VertexHull>,
    opts: &SynthesisOptions,
) -> Result<SynthesisReport> {
    opts.validate()?;
    let n = model.dim();
    if p.shape() != (n, n) {
        return Err(Error::dim("P", n, p.nrows()));
    }
    if kernel.dim() != n {
        return Err(Error::dim("kernel", n, kernel.dim()));
    }
    let scen = scenarios(model, points, hulls)?;
    let gp = DerivativeGp::new(kernel, points.to_vec(), opts.sigma_p, opts.jitter)?;
    let nv = n * points.len();
    let anchor = opts.anchor(model)?;
    let state_dependent = matches!(model.input(), InputField::StateDependent(_));
    let value_at_anchor = match (&anchor, state_dependent) {
        (Some(a), true) => Some(gp.value_map(a)?),
        _ => None,
    };

    let mut problem = LmiProblem::new(nv);
    for (i, s) in scen.iter().enumerate() {
        let g = gp.gradient_map(&s.x)?;
        let gmax = g.amax();
        let b = model.input_at(&s.x);
        let db_terms = if state_dependent {
            let mut v = gp.value_map(&s.x)?;
            if let Some(va) = &value_at_anchor {
                v -= va;
            }
            Some((v, model.input_jacobian(&s.x)))
        } else {
            None
        };
        for (l, j) in s.jacobians.iter().enumerate() {
            let mut blk = AffineBlock::new(symmetrize(&contraction_block(j, p))).labeled(point_label(s, i, l));
            for k in 0..nv {
                let gk = g.column(k);
                let mut m = if gk.amax() > 1e-14 * gmax {
                    &b * gk.transpose()
                } else {
                    DMatrix::zeros(n, n)
                };
                if let Some((v, db)) = &db_terms {
                    m += db * v[k];
                }
                blk.push_term(k, off_diagonal(&(m * p)));
            }
            problem.blocks.push(blk);
        }
    }
    if let Some(bound) = opts.target_bound {
        problem.bounds = (0..nv).map(|k| LinearBound::symmetric(k, bound)).collect();
    }
    let sol = solve_with(&problem, &opts.solver)?;
    if !accept(sol.status) {
        return Err(infeasible("gain LMI", &problem, &sol));
    }
    let mut controller = gp.condition(&sol.z)?.with_metric(p.clone());
    if let Some(a) = anchor {
        controller = controller.with_equilibrium(a)?;
    }
    let targets: Vec<DVector<f64>> = (0..points.len()).map(|i| sol.z.rows(i * n, n).into_owned()).collect();
    let diagnostics = recomputed_margins("gain", model, &scen, p, &controller, &sol.block_margins);
    Ok(SynthesisReport {
        p: p.clone(),
        eps_p: None,
        eps: sol.margin,
        mode: if hulls.is_some() {
            SynthesisMode::Polytopic
        } else {
            SynthesisMode::TwoStep
        },
        status: sol.status,
        controller,
        max_neighbor_gap: neighbor_gap(hulls, &targets),
        targets: targets.iter().map(|t| t.as_slice().to_vec()).collect(),
        diagnostics,
        trace: sol.trace,
    })
}

/// Gain step including the `m_p(x) ∂b(x)` term. With a constant `b` this is
/// the same problem as [`solve_gain`].
pub fn solve_gain_nonconstant_b(
    model: &SystemModel,
    p: &DMatrix<f64>,
    kernel: &Kernel,
    points: &[DVector<f64>],
    opts: &SynthesisOptions,
) -> Result<SynthesisReport> {
    solve_gain(model, p, kernel, points, None, opts)
}

/// Joint LMI over `(P, p̄⁽¹⁾, …, p̄⁽ᴺ⁾)` with blocks
/// `[[P, *], [J P + b p̄⁽ⁱ⁾, P]]`; the controller is fitted to
/// `p̂⁽ⁱ⁾ = p̄⁽ⁱ⁾ P⁻¹`. Requires a constant input direction.
pub fn solve_joint(
    model: &SystemModel,
    kernel: &Kernel,
    points: &[DVector<f64>],
    hulls: Option<&VertexHull>,
    opts: &SynthesisOptions,
) -> Result<SynthesisReport> {
    opts.validate()?;
    let n = model.dim();
    if kernel.dim() != n {
        return Err(Error::dim("kernel", n, kernel.dim()));
    }
    let b = match model.input() {
        InputField::Constant(b) => b.clone(),
        InputField::StateDependent(_) => {
            return Err(Error::invalid(
                "joint synthesis requires a constant input direction; use the two-step path",
            ))
        }
    };
    let scen = scenarios(model, points, hulls)?;
    // Fail early on a singular K₀ rather than after the LMI solve.
    DerivativeGp::new(kernel, points.to_vec(), opts.sigma_p, opts.jitter)?;
    let basis = symmetric_basis(n);
    let np = basis.len();
    let mut problem = LmiProblem::new(np + n * points.len());
    for (i, s) in scen.iter().enumerate() {
        for (l, j) in s.jacobians.iter().enumerate() {
            let mut blk = AffineBlock::new(DMatrix::zeros(2 * n, 2 * n)).labeled(point_label(s, i, l));
            for (k, e) in basis.iter().enumerate() {
                let mut c = off_diagonal(&(j * e));
                c.view_mut((0, 0), (n, n)).copy_from(e);
                c.view_mut((n, n), (n, n)).copy_from(e);
                blk.push_term(k, c);
            }
            for a in 0..n {
                let mut m = DMatrix::zeros(n, n);
                m.set_column(a, &b);
                blk.push_term(np + i * n + a, off_diagonal(&m));
            }
            problem.blocks.push(blk);
        }
    }
    problem.constraints = metric_normalization(n, 0, opts.rho);
    let mut start = symmetric_coords(&(DMatrix::identity(n, n) * (0.5 * (1.0 + opts.rho))));
    start.resize(problem.dim, 0.0);
    problem.start = Some(start);
    let sol = solve_with(&problem, &opts.metric_solver())?;
    if !accept(sol.status) {
        return Err(infeasible("joint LMI", &problem, &sol));
    }
    let p = symmetric_from_coords(n, &sol.z.as_slice()[..np]);
    let p_chol = p
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("joint solution P is not positive definite".into()))?;
    let targets: Vec<DVector<f64>> = (0..points.len())
        .map(|i| p_chol.solve(&sol.z.rows(np + i * n, n).into_owned()))
        .collect();
    let dataset = DerivativeDataset::new(points.to_vec(), targets.clone(), opts.sigma_p)?;
    let mut controller = fit(kernel, &dataset, opts.jitter)?.with_metric(p.clone());
    if let Some(a) = opts.anchor(model)? {
        controller = controller.with_equilibrium(a)?;
    }
    let diagnostics = recomputed_margins("joint", model, &scen, &p, &controller, &sol.block_margins);
    Ok(SynthesisReport {
        p,
        eps_p: None,
        eps: sol.margin,
        mode: SynthesisMode::Joint,
        status: sol.status,
        controller,
        max_neighbor_gap: neighbor_gap(hulls, &targets),
        targets: targets.iter().map(|t| t.as_slice().to_vec()).collect(),
        diagnostics,
        trace: sol.trace,
    })
}

/// Runs a full synthesis. `Polytopic` requires `hulls`; its data points are
/// the cell centers.
pub fn synthesize(
    model: &SystemModel,
    kernel: &Kernel,
    points: &[DVector<f64>],
    hulls: Option<&VertexHull>,
    mode: SynthesisMode,
    opts: &SynthesisOptions,
) -> Result<SynthesisReport> {
    match mode {
        SynthesisMode::Joint => solve_joint(model, kernel, points, hulls, opts),
        SynthesisMode::TwoStep | SynthesisMode::Polytopic => {
            let centers;
            let (pts, hulls) = match (mode, hulls) {
                (SynthesisMode::Polytopic, None) => {
                    return Err(Error::invalid("polytopic synthesis requires hulls"))
                }
                (SynthesisMode::Polytopic, Some(h)) => {
                    centers = h.centers();
                    (centers.as_slice(), Some(h))
                }
                _ => (points, hulls),
            };
            let metric = solve_metric(model, pts, hulls, opts)?;
            let mut report = solve_gain(model, &metric.p, kernel, pts, hulls, opts)?;
            report.eps_p = metric.eps_p;
            let mut diagnostics = metric.margins;
            diagnostics.append(&mut report.diagnostics);
            report.diagnostics = diagnostics;
            let mut trace = metric.trace;
            trace.append(&mut report.trace);
            report.trace = trace;
            Ok(report)
        }
    }
}
