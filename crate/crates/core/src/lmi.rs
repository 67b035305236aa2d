//! Dense linear-matrix-inequality solver.
//!
//! A problem has *margin blocks* `F_j(z) = C_j + Σ_k z_k A_{j,k}` and *hard
//! blocks* `G_i(z) ⪰ 0` (normalization such as `I ⪯ P ⪯ ρI`, plus scalar
//! bounds on linear functionals of `z`). The margin is
//! `ε(z) = min_j λ_min(F_j(z))`.
//!
//! The solver is a primal log-barrier method on the epigraph variable `s`
//! (`F_j(z) ⪰ (ℓ + s) I`), used as a certified feasibility oracle inside a
//! bisection on the level `ℓ`. Each barrier run yields a lower bound (the
//! margin actually attained at its iterate) and an upper bound from the
//! central-path duality gap, so the bracket `[lo, hi]` around the optimal
//! margin is always certified.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue, serde_rows, serde_vec, symmetrize};

/// One coefficient matrix `A_k` attached to decision variable `var`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefTerm {
    pub var: usize,
    #[serde(with = "serde_rows")]
    pub matrix: DMatrix<f64>,
}

/// Symmetric affine matrix function `C + Σ_k z_k A_k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineBlock {
    #[serde(default)]
    pub label: String,
    #[serde(with = "serde_rows")]
    pub constant: DMatrix<f64>,
    pub terms: Vec<CoefTerm>,
}

impl AffineBlock {
    pub fn new(constant: DMatrix<f64>) -> Self {
        AffineBlock {
            label: String::new(),
            constant,
            terms: Vec::new(),
        }
    }

    pub fn labeled(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    /// Adds `z_var · matrix`. All-zero coefficients are dropped.
    pub fn with_term(mut self, var: usize, matrix: DMatrix<f64>) -> Self {
        self.push_term(var, matrix);
        self
    }

    pub fn push_term(&mut self, var: usize, matrix: DMatrix<f64>) {
        if matrix.iter().any(|v| *v != 0.0) {
            self.terms.push(CoefTerm { var, matrix });
        }
    }

    pub fn size(&self) -> usize {
        self.constant.nrows()
    }

    /// `C + Σ z_k A_k`.
    pub fn eval(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let mut m = self.constant.clone();
        for t in &self.terms {
            m += &t.matrix * z[t.var];
        }
        m
    }

    fn validate(&self, dim: usize, what: &str) -> Result<()> {
        let n = self.constant.nrows();
        if self.constant.ncols() != n {
            return Err(Error::invalid(format!("{what}: constant matrix is not square")));
        }
        if !is_symmetric(&self.constant) {
            return Err(Error::invalid(format!("{what}: constant matrix is not symmetric")));
        }
        for t in &self.terms {
            if t.var >= dim {
                return Err(Error::invalid(format!(
                    "{what}: coefficient refers to variable {} but the problem has {dim}",
                    t.var
                )));
            }
            if t.matrix.shape() != (n, n) {
                return Err(Error::dim("coefficient matrix", n, t.matrix.nrows()));
            }
            if !is_symmetric(&t.matrix) {
                return Err(Error::invalid(format!(
                    "{what}: coefficient of variable {} is not symmetric",
                    t.var
                )));
            }
        }
        if self
            .constant
            .iter()
            .chain(self.terms.iter().flat_map(|t| t.matrix.iter()))
            .any(|v| !v.is_finite())
        {
            return Err(Error::invalid(format!("{what}: non-finite entry")));
        }
        Ok(())
    }
}

fn is_symmetric(m: &DMatrix<f64>) -> bool {
    let scale = m.amax().max(1.0);
    (m - m.transpose()).amax() <= 1e-9 * scale
}

/// Scalar constraint `lower ≤ Σ c_k z_k ≤ upper`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearBound {
    pub coeffs: Vec<(usize, f64)>,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

impl LinearBound {
    /// Box constraint on a single variable.
    pub fn entry(var: usize, lower: Option<f64>, upper: Option<f64>) -> Self {
        LinearBound {
            coeffs: vec![(var, 1.0)],
            lower,
            upper,
        }
    }

    pub fn symmetric(var: usize, radius: f64) -> Self {
        Self::entry(var, Some(-radius), Some(radius))
    }

    fn value(&self, z: &DVector<f64>) -> f64 {
        self.coeffs.iter().map(|(k, c)| c * z[*k]).sum()
    }

    fn as_blocks(&self) -> Vec<AffineBlock> {
        let mut out = Vec::new();
        if let Some(lo) = self.lower {
            let mut b = AffineBlock::new(DMatrix::from_element(1, 1, -lo));
            for (k, c) in &self.coeffs {
                b.push_term(*k, DMatrix::from_element(1, 1, *c));
            }
            out.push(b.labeled("lower bound"));
        }
        if let Some(hi) = self.upper {
            let mut b = AffineBlock::new(DMatrix::from_element(1, 1, hi));
            for (k, c) in &self.coeffs {
                b.push_term(*k, DMatrix::from_element(1, 1, -c));
            }
            out.push(b.labeled("upper bound"));
        }
        out
    }
}

/// What to do with the margin.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Maximize the margin.
    #[default]
    MaximizeMargin,
    /// Stop at the first point whose margin exceeds the feasibility tolerance.
    Feasibility,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmiProblem {
    pub dim: usize,
    /// Blocks whose smallest eigenvalue defines the margin.
    pub blocks: Vec<AffineBlock>,
    /// Blocks required to be positive semidefinite.
    #[serde(default)]
    pub constraints: Vec<AffineBlock>,
    #[serde(default)]
    pub bounds: Vec<LinearBound>,
    #[serde(default)]
    pub objective: Objective,
    /// Initial point; defaults to the center of the variable box.
    #[serde(default)]
    pub start: Option<Vec<f64>>,
}

impl LmiProblem {
    pub fn new(dim: usize) -> Self {
        LmiProblem {
            dim,
            blocks: Vec::new(),
            constraints: Vec::new(),
            bounds: Vec::new(),
            objective: Objective::MaximizeMargin,
            start: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::invalid("LMI problem has no margin blocks"));
        }
        for (j, b) in self.blocks.iter().enumerate() {
            b.validate(self.dim, &format!("block {j}"))?;
        }
        for (j, b) in self.constraints.iter().enumerate() {
            b.validate(self.dim, &format!("constraint {j}"))?;
        }
        for b in &self.bounds {
            if let Some((k, _)) = b.coeffs.iter().find(|(k, _)| *k >= self.dim) {
                return Err(Error::invalid(format!("bound refers to variable {k}")));
            }
            if let (Some(lo), Some(hi)) = (b.lower, b.upper) {
                if lo > hi {
                    return Err(Error::Infeasible(format!("bound interval [{lo}, {hi}] is empty")));
                }
            }
        }
        if let Some(s) = &self.start {
            if s.len() != self.dim {
                return Err(Error::dim("start", self.dim, s.len()));
            }
        }
        Ok(())
    }

    /// `ε(z) = min_j λ_min(F_j(z))`.
    pub fn margin(&self, z: &DVector<f64>) -> f64 {
        self.blocks
            .iter()
            .map(|b| min_eigenvalue(&b.eval(z)))
            .fold(f64::INFINITY, f64::min)
    }

    /// Smallest eigenvalue over hard constraints and bound slacks.
    pub fn hard_margin(&self, z: &DVector<f64>) -> f64 {
        let c = self
            .constraints
            .iter()
            .map(|b| min_eigenvalue(&b.eval(z)))
            .fold(f64::INFINITY, f64::min);
        self.bounds.iter().fold(c, |acc, b| {
            let v = b.value(z);
            let lo = b.lower.map_or(f64::INFINITY, |l| v - l);
            let hi = b.upper.map_or(f64::INFINITY, |u| u - v);
            acc.min(lo).min(hi)
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: LmiProblem = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }

    fn default_start(&self) -> DVector<f64> {
        if let Some(s) = &self.start {
            return DVector::from_column_slice(s);
        }
        let mut lo = vec![None; self.dim];
        let mut hi = vec![None; self.dim];
        for b in &self.bounds {
            if let [(k, c)] = b.coeffs.as_slice() {
                if *c > 0.0 {
                    if let Some(l) = b.lower {
                        lo[*k] = Some(lo[*k].map_or(l / c, |v: f64| v.max(l / c)));
                    }
                    if let Some(u) = b.upper {
                        hi[*k] = Some(hi[*k].map_or(u / c, |v: f64| v.min(u / c)));
                    }
                }
            }
        }
        DVector::from_fn(self.dim, |k, _| match (lo[k], hi[k]) {
            (Some(l), Some(u)) => 0.5 * (l + u),
            (Some(l), None) => l.max(0.0) + 1.0,
            (None, Some(u)) => u.min(0.0) - 1.0,
            (None, None) => 0.0,
        })
    }

    fn scale(&self) -> f64 {
        self.blocks
            .iter()
            .flat_map(|b| {
                std::iter::once(b.constant.amax()).chain(b.terms.iter().map(|t| t.matrix.amax()))
            })
            .fold(0.0, f64::max)
            .max(1e-12)
    }
}

/// `ε(z)` for a problem, checking the dimension of `z`.
pub fn assemble_margin(problem: &LmiProblem, z: &DVector<f64>) -> Result<f64> {
    if z.len() != problem.dim {
        return Err(Error::dim("z", problem.dim, z.len()));
    }
    Ok(problem.margin(z))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Optimal,
    Feasible,
    Infeasible,
    NumericalFailure,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LmiSolution {
    #[serde(with = "serde_vec")]
    pub z: DVector<f64>,
    /// Margin attained at `z` (recomputed from the blocks).
    pub margin: f64,
    /// Certified upper bound on the optimal margin.
    pub upper_bound: f64,
    pub status: SolveStatus,
    pub block_margins: Vec<f64>,
    pub newton_steps: usize,
    pub trace: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SolverOptions {
    /// A margin at or above this value counts as feasible.
    pub feasibility_tol: f64,
    /// Bisection stops once `hi - lo` is below this; defaults to
    /// `1e-6 · max(1, |ε|, scale)`.
    pub bisection_width: Option<f64>,
    pub max_bisection: usize,
    pub max_newton: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            feasibility_tol: 1e-7,
            bisection_width: None,
            max_bisection: 80,
            max_newton: 4000,
        }
    }
}

/// Solves with default options.
pub fn solve(problem: &LmiProblem) -> Result<LmiSolution> {
    solve_with(problem, &SolverOptions::default())
}

pub fn solve_with(problem: &LmiProblem, opts: &SolverOptions) -> Result<LmiSolution> {
    problem.validate()?;
    let mut hard: Vec<AffineBlock> = problem.constraints.clone();
    for b in &problem.bounds {
        hard.extend(b.as_blocks());
    }
    let mut trace = Vec::new();
    let mut budget = Budget {
        used: 0,
        max: opts.max_newton,
    };

    let mut z = problem.default_start();
    if problem.hard_margin(&z) <= 0.0 {
        trace.push("phase 0: searching for a strictly feasible start".into());
        let engine = Engine {
            slack: &hard,
            fixed: &[],
            dim: problem.dim,
            level: 0.0,
        };
        let out = engine.run(&z, Goal::Positive, problem.scale().max(1.0), &mut budget)?;
        match out.verdict {
            Verdict::Reached => z = out.z,
            Verdict::Refuted => {
                return Err(Error::Infeasible(
                    "normalization constraints have empty interior".into(),
                ))
            }
            Verdict::Stalled | Verdict::Converged => {
                if problem.hard_margin(&out.z) > 0.0 {
                    z = out.z;
                } else {
                    return Err(Error::Numerical(
                        "could not find a point strictly inside the normalization constraints"
                            .into(),
                    ));
                }
            }
        }
    }

    let scale = problem.scale();
    let engine = Engine {
        slack: &problem.blocks,
        fixed: &hard,
        dim: problem.dim,
        level: 0.0,
    };

    if problem.objective == Objective::Feasibility {
        let engine = Engine {
            level: opts.feasibility_tol,
            ..engine
        };
        let out = engine.run(&z, Goal::Positive, scale, &mut budget)?;
        let margin = problem.margin(&out.z);
        let status = match out.verdict {
            _ if margin >= opts.feasibility_tol => SolveStatus::Feasible,
            Verdict::Refuted | Verdict::Converged => SolveStatus::Infeasible,
            _ => SolveStatus::NumericalFailure,
        };
        trace.push(format!("feasibility run: {:?}, margin {margin:.6e}", out.verdict));
        return Ok(finish(problem, out.z, out.upper + opts.feasibility_tol, status, &budget, trace));
    }

    // Coarse bracket.
    let coarse = engine.run(&z, Goal::Gap(1e-2), scale, &mut budget)?;
    let mut best = coarse.z.clone();
    let mut lo = problem.margin(&best);
    let mut hi = coarse.upper;
    trace.push(format!("bracket: lo {lo:.9e}, hi {hi:.9e} ({:?})", coarse.verdict));
    if coarse.verdict == Verdict::Stalled && !(lo.is_finite() && hi.is_finite()) {
        return Ok(finish(problem, best, hi, SolveStatus::NumericalFailure, &budget, trace));
    }
    let width = opts
        .bisection_width
        .unwrap_or_else(|| 1e-6 * lo.abs().max(hi.abs()).max(scale).max(1.0));

    let mut stalled = false;
    for it in 0..opts.max_bisection {
        if hi - lo <= width {
            break;
        }
        let level = 0.5 * (lo + hi);
        let oracle = Engine { level, ..engine };
        let out = oracle.run(&best, Goal::Positive, scale, &mut budget)?;
        let m = problem.margin(&out.z);
        if m > lo {
            lo = m;
            best = out.z.clone();
        }
        match out.verdict {
            Verdict::Reached => {}
            Verdict::Refuted | Verdict::Converged => hi = hi.min(level + out.upper),
            Verdict::Stalled => {
                trace.push(format!("bisection {it}: barrier stalled at level {level:.9e}"));
                stalled = true;
                break;
            }
        }
        trace.push(format!(
            "bisection {it}: level {level:.9e} -> {:?}, bracket [{lo:.9e}, {hi:.9e}]",
            out.verdict
        ));
    }

    let status = if lo >= opts.feasibility_tol {
        SolveStatus::Optimal
    } else if hi < opts.feasibility_tol {
        SolveStatus::Infeasible
    } else if stalled {
        SolveStatus::NumericalFailure
    } else {
        // Bracket straddles the tolerance within the bisection width.
        SolveStatus::Infeasible
    };
    Ok(finish(problem, best, hi, status, &budget, trace))
}

fn finish(
    problem: &LmiProblem,
    z: DVector<f64>,
    upper: f64,
    status: SolveStatus,
    budget: &Budget,
    trace: Vec<String>,
) -> LmiSolution {
    let block_margins: Vec<f64> = problem
        .blocks
        .iter()
        .map(|b| min_eigenvalue(&b.eval(&z)))
        .collect();
    let margin = block_margins.iter().copied().fold(f64::INFINITY, f64::min);
    LmiSolution {
        z,
        margin,
        upper_bound: upper.max(margin),
        status,
        block_margins,
        newton_steps: budget.used,
        trace,
    }
}

struct Budget {
    used: usize,
    max: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Goal {
    /// Stop as soon as `s > 0` or the bound certifies `s* < 0`.
    Positive,
    /// Run until the duality-gap bound falls below `tol · max(1, |s|)`.
    Gap(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Verdict {
    Reached,
    Refuted,
    Converged,
    Stalled,
}

struct Outcome {
    z: DVector<f64>,
    /// Upper bound on the optimal `s`.
    upper: f64,
    verdict: Verdict,
}

/// Barrier problem `max s` s.t. `S_j(z) - (level + s) I ≻ 0`, `G_i(z) ≻ 0`.
#[derive(Clone, Copy)]
struct Engine<'a> {
    slack: &'a [AffineBlock],
    fixed: &'a [AffineBlock],
    dim: usize,
    level: f64,
}

struct Factored {
    chol: Vec<Cholesky<f64, Dyn>>,
}

impl<'a> Engine<'a> {
    fn degree(&self) -> f64 {
        self.slack
            .iter()
            .chain(self.fixed.iter())
            .map(AffineBlock::size)
            .sum::<usize>() as f64
    }

    fn blocks(&self) -> impl Iterator<Item = (&AffineBlock, bool)> {
        self.slack
            .iter()
            .map(|b| (b, true))
            .chain(self.fixed.iter().map(|b| (b, false)))
    }

    fn slack_matrix(&self, b: &AffineBlock, has_slack: bool, z: &DVector<f64>, s: f64) -> DMatrix<f64> {
        let mut m = symmetrize(&b.eval(z));
        if has_slack {
            let shift = self.level + s;
            for i in 0..m.nrows() {
                m[(i, i)] -= shift;
            }
        }
        m
    }

    fn factor(&self, z: &DVector<f64>, s: f64) -> Option<Factored> {
        let mut chol = Vec::new();
        for (b, has) in self.blocks() {
            chol.push(Cholesky::new(self.slack_matrix(b, has, z, s))?);
        }
        Some(Factored { chol })
    }

    /// `-τ s - Σ log det`. `None` outside the domain.
    fn objective(&self, z: &DVector<f64>, s: f64, tau: f64) -> Option<f64> {
        let f = self.factor(z, s)?;
        let logdet: f64 = f
            .chol
            .iter()
            .map(|c| 2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
            .sum();
        Some(-tau * s - logdet)
    }

    fn initial_slack(&self, z: &DVector<f64>) -> f64 {
        let m = self
            .slack
            .iter()
            .map(|b| min_eigenvalue(&b.eval(z)))
            .fold(f64::INFINITY, f64::min);
        let raw = m - self.level;
        raw - 1e-3 * (1.0 + raw.abs()) - 1e-9 * self.level.abs()
    }

    /// Gradient and Hessian of the barrier objective in `(z, s)`.
    fn derivatives(&self, f: &Factored, tau: f64) -> (DVector<f64>, DMatrix<f64>) {
        let m = self.dim + 1;
        let mut g = DVector::zeros(m);
        let mut h = DMatrix::zeros(m, m);
        g[self.dim] = -tau;
        for ((b, has), chol) in self.blocks().zip(&f.chol) {
            let l = chol.l();
            let n = b.size();
            let whiten = |d: &DMatrix<f64>| -> DMatrix<f64> {
                let x = l.solve_lower_triangular(d).expect("nonsingular factor");
                l.solve_lower_triangular(&x.transpose()).expect("nonsingular factor")
            };
            let mut vars: Vec<usize> = Vec::new();
            let mut mats: Vec<DMatrix<f64>> = Vec::new();
            for t in &b.terms {
                if let Some(pos) = vars.iter().position(|v| *v == t.var) {
                    mats[pos] += whiten(&t.matrix);
                } else {
                    vars.push(t.var);
                    mats.push(whiten(&t.matrix));
                }
            }
            if has {
                vars.push(self.dim);
                mats.push(-whiten(&DMatrix::identity(n, n)));
            }
            for (a, ma) in vars.iter().zip(&mats) {
                g[*a] -= ma.trace();
                for (c, mc) in vars.iter().zip(&mats) {
                    h[(*a, *c)] += ma.dot(mc);
                }
            }
        }
        (g, h)
    }

    fn run(&self, z0: &DVector<f64>, goal: Goal, scale: f64, budget: &mut Budget) -> Result<Outcome> {
        let deg = self.degree();
        let mut z = z0.clone();
        let mut s = if self.slack.is_empty() {
            0.0
        } else {
            self.initial_slack(&z)
        };
        if self.factor(&z, s).is_none() {
            return Err(Error::Numerical("barrier start is not strictly feasible".into()));
        }
        if goal == Goal::Positive && s > 0.0 {
            return Ok(Outcome {
                z,
                upper: f64::INFINITY,
                verdict: Verdict::Reached,
            });
        }
        let cap = 1e8 * scale.max(1.0);
        let mut tau = deg / (1.0 + s.abs()).max(1e-3 * scale);
        loop {
            // Centering.
            let mut stalled = false;
            for _ in 0..200 {
                let f = match self.factor(&z, s) {
                    Some(f) => f,
                    None => return Err(Error::Numerical("lost strict feasibility".into())),
                };
                let (g, mut h) = self.derivatives(&f, tau);
                let reg = 1e-12 * h.diagonal().amax().max(1e-300);
                for i in 0..h.nrows() {
                    h[(i, i)] += reg;
                }
                let step = match Cholesky::new(h.clone()) {
                    Some(c) => c.solve(&(-&g)),
                    None => match h.clone().lu().solve(&(-&g)) {
                        Some(d) => d,
                        None => {
                            stalled = true;
                            break;
                        }
                    },
                };
                let decrement = -g.dot(&step);
                if !decrement.is_finite() {
                    stalled = true;
                    break;
                }
                if decrement < 1e-10 {
                    break;
                }
                let phi0 = self.objective(&z, s, tau).expect("current point is interior");
                let mut t = 1.0;
                let accepted = loop {
                    let zt = &z + step.rows(0, self.dim) * t;
                    let st = s + t * step[self.dim];
                    if let Some(phi) = self.objective(&zt, st, tau) {
                        if phi <= phi0 - 0.25 * t * decrement {
                            break Some((zt, st));
                        }
                    }
                    t *= 0.5;
                    if t < 1e-14 {
                        break None;
                    }
                };
                budget.used += 1;
                match accepted {
                    Some((zt, st)) => {
                        z = zt;
                        s = st;
                    }
                    None => {
                        stalled = true;
                        break;
                    }
                }
                if s > cap {
                    return Err(Error::Unbounded(format!(
                        "margin exceeds {cap:.3e}; add normalization bounds on the decision variables"
                    )));
                }
                if goal == Goal::Positive && s > 0.0 {
                    return Ok(Outcome {
                        z,
                        upper: f64::INFINITY,
                        verdict: Verdict::Reached,
                    });
                }
                if budget.used >= budget.max {
                    stalled = true;
                    break;
                }
            }
            let upper = s + deg / tau;
            if stalled {
                return Ok(Outcome {
                    z,
                    upper,
                    verdict: Verdict::Stalled,
                });
            }
            match goal {
                Goal::Positive if upper < 0.0 => {
                    return Ok(Outcome {
                        z,
                        upper,
                        verdict: Verdict::Refuted,
                    })
                }
                Goal::Gap(tol) if deg / tau <= tol * s.abs().max(1e-3 * scale) => {
                    return Ok(Outcome {
                        z,
                        upper,
                        verdict: Verdict::Converged,
                    })
                }
                _ => {}
            }
            if deg / tau < 1e-13 * scale.max(s.abs()) {
                // The bound cannot be tightened further in floating point.
                return Ok(Outcome {
                    z,
                    upper,
                    verdict: Verdict::Converged,
                });
            }
            tau *= 8.0;
        }
    }
}

/// Symmetric `n × n` matrix basis: `E_{ij} + E_{ji}` (or `E_{ii}`) for each
/// upper-triangular pair, in row-major order.
pub fn symmetric_basis(n: usize) -> Vec<DMatrix<f64>> {
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in i..n {
            let mut e = DMatrix::zeros(n, n);
            e[(i, j)] = 1.0;
            e[(j, i)] = 1.0;
            out.push(e);
        }
    }
    out
}

/// Rebuilds a symmetric matrix from coordinates in [`symmetric_basis`].
pub fn symmetric_from_coords(n: usize, coords: &[f64]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            m[(i, j)] = coords[k];
            m[(j, i)] = coords[k];
            k += 1;
        }
    }
    m
}

/// Coordinates of a symmetric matrix in [`symmetric_basis`].
pub fn symmetric_coords(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in i..n {
            out.push(0.5 * (m[(i, j)] + m[(j, i)]));
        }
    }
    out
}

/// Hard blocks `P - I ⪰ 0` and `ρI - P ⪰ 0` for `P` stored at variables
/// `offset..offset + n(n+1)/2`.
pub fn metric_normalization(n: usize, offset: usize, rho: f64) -> Vec<AffineBlock> {
    let basis = symmetric_basis(n);
    let mut lower = AffineBlock::new(-DMatrix::identity(n, n)).labeled("P - I");
    let mut upper = AffineBlock::new(DMatrix::identity(n, n) * rho).labeled("rho I - P");
    for (k, e) in basis.into_iter().enumerate() {
        lower.push_term(offset + k, e.clone());
        upper.push_term(offset + k, -e);
    }
    vec![lower, upper]
}
