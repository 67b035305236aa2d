//! The pipeline stages behind each subcommand. Every stage computes all of
//! its outputs before writing any file, and writes each file atomically.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use contraction_gp::deriv_gp::DerivativeController;
use contraction_gp::drift_gp::{fit_drift_with, DriftDataset, DriftModel};
use contraction_gp::stochastic::{chebyshev_hulls, moment_ies_check, MomentIesReport, StochasticClosedLoop};
use contraction_gp::synthesis::{build_hulls, synthesize, SynthesisMode, SynthesisReport, VertexHull};
use contraction_gp::system::{Dynamics, FeedbackLaw, FeedbackLinearization, InputField, SystemModel};
use contraction_gp::verify_sim::{
    boundary_states, contraction_rate, heatmap_svg, metric_inverse, phase_portrait_svg, rollout,
    rollout_stochastic, RateEstimate, Trajectory, VerificationReport,
};
use contraction_gp::{linalg, Error};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::{ModelSource, PipelineConfig};

pub const DATA_CSV: &str = "data.csv";
pub const DRIFT_MODEL: &str = "drift_model.json";
pub const ERROR_SURFACE: &str = "error_surface.csv";
pub const CONTROLLER: &str = "controller.json";
pub const SYNTHESIS_REPORT: &str = "synthesis_report.json";
pub const MARGINS_CSV: &str = "margins.csv";
pub const CONTROLLER_SURFACE: &str = "controller_surface.csv";
pub const HULLS: &str = "hulls.json";
pub const VERIFICATION: &str = "verification.json";
pub const VERIFICATION_CSV: &str = "verification.csv";
pub const VERIFICATION_SVG: &str = "verification_margin.svg";
pub const VERIFICATION_TRUE: &str = "verification_true.json";
pub const MOMENT_IES: &str = "moment_ies.json";
pub const CHEBYSHEV_HULLS: &str = "chebyshev_hulls.json";
pub const TRAJECTORIES: &str = "trajectories.csv";
pub const PORTRAIT: &str = "phase_portrait.svg";
pub const BASELINE_TRAJECTORIES: &str = "baseline_trajectories.csv";
pub const BASELINE_PORTRAIT: &str = "baseline_portrait.svg";
pub const STOCHASTIC_TRAJECTORIES: &str = "stochastic_trajectories.csv";
pub const SIMULATION: &str = "simulation.json";
pub const SUMMARY: &str = "summary.json";
pub const RESOLVED_CONFIG: &str = "config.json";

/// Relative to the initial distance, below which a step is at the roundoff
/// level of the controller and is left out of the monotonicity check.
pub const MONOTONE_FLOOR: f64 = 1e-10;

/// Writes `contents` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("writing into {}", dir.display()))?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).with_context(|| format!("renaming onto {}", path.display()))?;
    Ok(())
}

pub struct Pipeline {
    cfg: PipelineConfig,
    quiet: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LearnOutcome {
    /// Per component, the largest `|μ_i − f_i|` on the controller domain grid.
    pub max_error: Vec<f64>,
    /// Per component, the largest entry of `|∂μ_i − ∂f_i|` on the same grid.
    pub max_gradient_error: Vec<f64>,
    pub samples: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChebyshevSummary {
    pub c: f64,
    pub confidence: f64,
    pub cells: usize,
    /// Largest added half-width over all cells and entries.
    pub max_half_width: f64,
}

#[derive(Debug, Clone)]
pub struct VerifyOutcome {
    /// Certificate on the design model (the learned model when one is used).
    pub report: VerificationReport,
    /// The same controller and metric on the true system, for learned designs.
    pub truth: Option<VerificationReport>,
    pub moment: Option<MomentIesReport>,
    pub chebyshev: Option<ChebyshevSummary>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RolloutSummary {
    pub x0: Vec<f64>,
    /// `|x_K − x*| / |x_0 − x*|`.
    pub final_ratio: f64,
    /// `|x_k − x*|_M` never increased while the state stayed in the domain.
    pub monotone: bool,
    pub diverged: bool,
    pub converged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineSummary {
    pub gain: Vec<f64>,
    pub converged: usize,
    pub not_converged: usize,
    pub rollouts: Vec<RolloutSummary>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub equilibrium: Vec<f64>,
    pub steps: usize,
    pub rollouts: Vec<RolloutSummary>,
    pub all_converged: bool,
    pub all_monotone: bool,
    pub worst_ratio: f64,
    pub rate: RateEstimate,
    pub baseline: Option<BaselineSummary>,
    /// `|x_K − x*|` of each stochastic rollout of the learned closed loop.
    pub stochastic_final_distance: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerificationDigest {
    pub min_margin: f64,
    pub lambda_max: f64,
    pub worst_point: Vec<f64>,
    pub consistent: bool,
    pub passed: bool,
}

impl From<&VerificationReport> for VerificationDigest {
    fn from(r: &VerificationReport) -> Self {
        VerificationDigest {
            min_margin: r.min_margin,
            lambda_max: r.lambda_max,
            worst_point: r.worst_point.clone(),
            consistent: r.consistent,
            passed: r.passed(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MomentDigest {
    pub min_margin: f64,
    pub eps_noise: f64,
    pub flagged_points: usize,
    pub passed: bool,
}

/// Headline numbers of a full run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReproductionSummary {
    pub mode: SynthesisMode,
    pub rho: f64,
    pub p: Vec<Vec<f64>>,
    pub eps_p: Option<f64>,
    pub eps: f64,
    pub learn: Option<LearnOutcome>,
    pub verification: VerificationDigest,
    pub verification_true: Option<VerificationDigest>,
    pub moment: Option<MomentDigest>,
    pub chebyshev: Option<ChebyshevSummary>,
    pub rollouts_converged: bool,
    pub rollouts_monotone: bool,
    pub worst_rollout_ratio: f64,
    pub empirical_rate: f64,
    pub baseline_not_converged: Option<usize>,
}

impl ReproductionSummary {
    pub fn passed(&self) -> bool {
        self.verification.passed && self.rollouts_converged
    }
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, quiet: bool) -> Self {
        Pipeline { cfg, quiet }
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn out_dir(&self) -> &Path {
        &self.cfg.output_dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.cfg.output_dir.join(name)
    }

    fn log(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn write_all(&self, files: Vec<(&str, String)>) -> Result<()> {
        for (name, contents) in files {
            write_atomic(&self.path(name), contents.as_bytes())?;
        }
        Ok(())
    }

    fn read(&self, name: &str) -> Result<String> {
        let p = self.path(name);
        fs::read_to_string(&p).with_context(|| format!("reading {}; run the earlier pipeline stage first", p.display()))
    }

    fn true_model(&self) -> Result<SystemModel> {
        self.cfg.system.model()
    }

    fn equilibrium(&self) -> Result<DVector<f64>> {
        if let Some(a) = &self.cfg.synthesis.anchor {
            return Ok(DVector::from_column_slice(a));
        }
        let truth = self.true_model()?;
        Ok(truth.equilibrium().cloned().unwrap_or_else(|| DVector::zeros(truth.dim())))
    }

    /// Samples the true drift on the data grid with seeded Gaussian noise.
    pub fn gen_data(&self) -> Result<DriftDataset> {
        let truth = self.true_model()?;
        let sigma = &self.cfg.data.sigma_y;
        let points = self.cfg.data.domain.grid(self.cfg.data.per_axis);
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.data.seed);
        let noise: Vec<Option<Normal<f64>>> = sigma
            .iter()
            .map(|s| if *s > 0.0 { Normal::new(0.0, *s).ok() } else { None })
            .collect();
        let targets = points
            .iter()
            .map(|x| {
                let mut y = truth.drift(x);
                for (i, d) in noise.iter().enumerate() {
                    if let Some(d) = d {
                        y[i] += d.sample(&mut rng);
                    }
                }
                y
            })
            .collect();
        let ds = DriftDataset::new(points, targets, sigma.clone())?;
        self.log(format!("generated {} samples", ds.len()));
        self.write_all(vec![(DATA_CSV, ds.to_csv())])?;
        Ok(ds)
    }

    pub fn dataset(&self) -> Result<DriftDataset> {
        let text = match &self.cfg.data.csv {
            Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            None => self.read(DATA_CSV)?,
        };
        Ok(DriftDataset::from_csv(&text, self.cfg.data.sigma_y.clone())?)
    }

    /// Fits the drift model and compares it with the true drift.
    pub fn learn(&self) -> Result<(DriftModel, LearnOutcome)> {
        let ds = self.dataset()?;
        if ds.is_empty() {
            return Err(Error::InvalidInput("training data is empty".into()).into());
        }
        let model = fit_drift_with(&ds, &self.cfg.model.components, None)?;
        let truth = self.true_model()?;
        let n = truth.dim();
        let res = self.cfg.verification.resolution;
        let mut surface = String::new();
        let mut header: Vec<String> = (1..=n).map(|i| format!("x_{i}")).collect();
        for i in 1..=n {
            header.extend([format!("mu_{i}"), format!("f_{i}"), format!("err_{i}"), format!("grad_err_{i}")]);
        }
        surface.push_str(&header.join(","));
        surface.push('\n');
        for x in self.cfg.data.domain.grid(res) {
            let (mu, jac) = model.mean_and_jac(&x)?;
            let (f, df) = (truth.drift(&x), truth.drift_jacobian(&x));
            let cols: Vec<String> = x.iter().map(|v| format!("{v:e}")).collect();
            surface.push_str(&cols.join(","));
            for i in 0..n {
                let ge = (jac.row(i) - df.row(i)).amax();
                let _ = write!(surface, ",{:e},{:e},{:e},{ge:e}", mu[i], f[i], (mu[i] - f[i]).abs());
            }
            surface.push('\n');
        }
        let mut max_error = vec![0.0f64; n];
        let mut max_gradient_error = vec![0.0f64; n];
        for x in self.cfg.domain.grid(res) {
            let (mu, jac) = model.mean_and_jac(&x)?;
            let (f, df) = (truth.drift(&x), truth.drift_jacobian(&x));
            for i in 0..n {
                max_error[i] = max_error[i].max((mu[i] - f[i]).abs());
                max_gradient_error[i] = max_gradient_error[i].max((jac.row(i) - df.row(i)).amax());
            }
        }
        let outcome = LearnOutcome {
            max_error,
            max_gradient_error,
            samples: ds.len(),
        };
        self.log(format!("learned drift from {} samples; interior error {:?}", ds.len(), outcome.max_error));
        self.write_all(vec![(DRIFT_MODEL, model.save_json()?), (ERROR_SURFACE, surface)])?;
        Ok((model, outcome))
    }

    fn learned_drift(&self) -> Result<Option<Arc<DriftModel>>> {
        match self.cfg.model.source {
            ModelSource::Analytic => Ok(None),
            ModelSource::Learned => Ok(Some(Arc::new(DriftModel::load_json(&self.read(DRIFT_MODEL)?)?))),
        }
    }

    /// The model the controller is designed (and certified) for.
    pub fn design_model(&self) -> Result<SystemModel> {
        match self.learned_drift()? {
            None => self.true_model(),
            Some(drift) => Ok(SystemModel::new(drift, InputField::Constant(self.cfg.system.input_direction()))?),
        }
    }

    fn hulls(&self, model: &SystemModel) -> Result<VertexHull> {
        let s = &self.cfg.synthesis;
        Ok(build_hulls(model, &self.cfg.domain, s.subdivisions, s.inflation)?)
    }

    pub fn synth(&self) -> Result<SynthesisReport> {
        self.synth_with_mode(self.cfg.synthesis.mode)
    }

    pub fn synth_with_mode(&self, mode: SynthesisMode) -> Result<SynthesisReport> {
        let model = self.design_model()?;
        let anchor = match (self.cfg.model.source, &self.cfg.synthesis.anchor) {
            (_, Some(a)) => Some(a.clone()),
            (ModelSource::Learned, None) => Some(self.equilibrium()?.as_slice().to_vec()),
            (ModelSource::Analytic, None) => None,
        };
        let opts = self.cfg.synthesis_options(anchor);
        let points = self.cfg.domain.grid(self.cfg.controller.per_axis);
        let hulls = match mode {
            SynthesisMode::Polytopic => Some(self.hulls(&model)?),
            _ => None,
        };
        let report = synthesize(&model, &self.cfg.controller.kernel, &points, hulls.as_ref(), mode, &opts)?;
        self.log(format!("synthesis ({mode:?}): eps = {:.6e}, eps_p = {:?}", report.eps, report.eps_p));
        let mut files = vec![
            (CONTROLLER, report.controller.save_json()?),
            (SYNTHESIS_REPORT, report.to_json()?),
            (MARGINS_CSV, report.margins_csv()),
            (CONTROLLER_SURFACE, self.controller_surface(&report.controller)?),
        ];
        if let Some(h) = &hulls {
            files.push((HULLS, serde_json::to_string_pretty(h)?));
        }
        self.write_all(files)?;
        Ok(report)
    }

    fn controller_surface(&self, c: &DerivativeController) -> Result<String> {
        let n = c.dim();
        let mut header: Vec<String> = (1..=n).map(|i| format!("x_{i}")).collect();
        header.push("p".into());
        header.extend((1..=n).map(|i| format!("dp_{i}")));
        let mut s = header.join(",");
        s.push('\n');
        for x in self.cfg.domain.grid(self.cfg.verification.resolution) {
            let p = c.eval_control(&x)?;
            let g = c.eval_control_grad(&x)?;
            let cols: Vec<String> = x.iter().chain([p].iter()).chain(g.iter()).map(|v| format!("{v:e}")).collect();
            s.push_str(&cols.join(","));
            s.push('\n');
        }
        Ok(s)
    }

    pub fn load_controller(&self) -> Result<DerivativeController> {
        Ok(DerivativeController::load_json(&self.read(CONTROLLER)?)?)
    }

    fn metric(&self, c: &DerivativeController) -> Result<DMatrix<f64>> {
        c.metric()
            .cloned()
            .ok_or_else(|| Error::InvalidInput("controller artifact carries no metric P".into()).into())
    }

    pub fn verify(&self) -> Result<VerifyOutcome> {
        let model = self.design_model()?;
        let controller = Arc::new(self.load_controller()?);
        let p = self.metric(&controller)?;
        let res = self.cfg.verification.resolution;
        let report = contraction_gp::verify_sim::verify_grid(&model, controller.as_ref(), &p, &self.cfg.domain, res)?;
        self.log(format!(
            "verification: min margin {:.6e}, max lambda {:.6}",
            report.min_margin, report.lambda_max
        ));
        let mut files = vec![(VERIFICATION, report.to_json()?), (VERIFICATION_CSV, report.to_csv())];
        if self.cfg.domain.dim() == 2 {
            let margins: Vec<f64> = report.points.iter().map(|p| p.margin).collect();
            files.push((VERIFICATION_SVG, heatmap_svg(&margins, &self.cfg.domain, res, "contraction margin")?));
        }
        let mut outcome = VerifyOutcome {
            report,
            truth: None,
            moment: None,
            chebyshev: None,
        };
        if let Some(drift) = self.learned_drift()? {
            let truth = contraction_gp::verify_sim::verify_grid(
                &self.true_model()?,
                controller.as_ref(),
                &p,
                &self.cfg.domain,
                res,
            )?;
            self.log(format!(
                "true system: min margin {:.6e}, max lambda {:.6}",
                truth.min_margin, truth.lambda_max
            ));
            files.push((VERIFICATION_TRUE, truth.to_json()?));
            outcome.truth = Some(truth);
            if self.cfg.stochastic.enabled {
                let law: Arc<dyn FeedbackLaw> = controller.clone();
                let b = InputField::Constant(self.cfg.system.input_direction());
                if self.cfg.stochastic.moment_check {
                    let lp = StochasticClosedLoop::from_metric(drift.clone(), b, law, &p)?;
                    let m = moment_ies_check(&lp, &self.cfg.domain.grid(res))?;
                    self.log(format!("moment check: min margin {:.6e}", m.min_margin));
                    files.push((MOMENT_IES, m.to_json()?));
                    outcome.moment = Some(m);
                }
                let base = self.hulls(&model)?;
                let inflated = chebyshev_hulls(&drift, &base, self.cfg.stochastic.c)?;
                let max_half_width = inflated
                    .hulls
                    .cells
                    .iter()
                    .zip(&base.cells)
                    .map(|(a, b)| (&b.entry_lower - &a.entry_lower).amax())
                    .fold(0.0, f64::max);
                files.push((CHEBYSHEV_HULLS, serde_json::to_string_pretty(&inflated)?));
                outcome.chebyshev = Some(ChebyshevSummary {
                    c: inflated.c,
                    confidence: inflated.confidence,
                    cells: inflated.hulls.cells.len(),
                    max_half_width,
                });
            }
        }
        self.write_all(files)?;
        Ok(outcome)
    }

    fn summarize(&self, t: &Trajectory, x_star: &DVector<f64>, m: &DMatrix<f64>) -> RolloutSummary {
        let x0 = t.state(0);
        let d0 = (&x0 - x_star).norm();
        let final_ratio = if d0 > 0.0 { (t.last() - x_star).norm() / d0 } else { 0.0 };
        let mut monotone = true;
        let mut prev = linalg::weighted_norm(&(&x0 - x_star), m);
        let floor = MONOTONE_FLOOR * prev;
        for k in 1..t.len() {
            let x = t.state(k);
            let d = linalg::weighted_norm(&(&x - x_star), m);
            if prev >= floor && self.cfg.domain.contains(&t.state(k - 1)) && d > prev {
                monotone = false;
            }
            prev = d;
        }
        RolloutSummary {
            x0: x0.as_slice().to_vec(),
            final_ratio,
            monotone,
            diverged: t.diverged,
            converged: !t.diverged && final_ratio < self.cfg.simulation.convergence_ratio,
        }
    }

    pub fn simulate(&self) -> Result<SimulationSummary> {
        let sim = &self.cfg.simulation;
        let truth = self.true_model()?;
        let controller = Arc::new(self.load_controller()?);
        let m = metric_inverse(&self.metric(&controller)?)?;
        let x_star = self.equilibrium()?;
        let starts: Vec<DVector<f64>> = boundary_states(&self.cfg.domain, sim.initial_states)?
            .into_iter()
            .filter(|x| (x - &x_star).norm() > 0.0)
            .collect();
        let trajs = starts
            .iter()
            .map(|x0| rollout(&truth, controller.as_ref(), x0, sim.steps))
            .collect::<contraction_gp::Result<Vec<_>>>()?;
        let rollouts: Vec<RolloutSummary> = trajs.iter().map(|t| self.summarize(t, &x_star, &m)).collect();

        let mut rng = ChaCha8Rng::seed_from_u64(sim.seed);
        let d = &self.cfg.domain;
        let random_state =
            |rng: &mut ChaCha8Rng| DVector::from_fn(d.dim(), |i, _| rng.random_range(d.lower[i]..=d.upper[i]));
        let mut pairs = Vec::with_capacity(sim.pairs);
        for _ in 0..sim.pairs {
            let (a, b) = (random_state(&mut rng), random_state(&mut rng));
            pairs.push((
                rollout(&truth, controller.as_ref(), &a, sim.steps)?,
                rollout(&truth, controller.as_ref(), &b, sim.steps)?,
            ));
        }
        let rate = contraction_rate(&pairs, &m, Some(&self.cfg.domain))?;

        let mut files = vec![
            (TRAJECTORIES, trajectories_csv(&trajs, sim.csv_stride)),
        ];
        if d.dim() == 2 {
            files.push((PORTRAIT, phase_portrait_svg(&trajs, d, "synthesized controller")?));
        }

        let baseline = match &self.cfg.baseline {
            None => None,
            Some(b) => {
                let drift: Arc<dyn Dynamics> = match self.learned_drift()? {
                    Some(dm) => dm,
                    None => truth.dynamics().clone(),
                };
                let law = FeedbackLinearization {
                    drift,
                    component: b.component,
                    dt: self.cfg.system.dt().expect("validated"),
                    gain: DVector::from_column_slice(&b.gain),
                };
                let bt = starts
                    .iter()
                    .map(|x0| rollout(&truth, &law, x0, sim.steps))
                    .collect::<contraction_gp::Result<Vec<_>>>()?;
                let summaries: Vec<RolloutSummary> = bt.iter().map(|t| self.summarize(t, &x_star, &m)).collect();
                files.push((BASELINE_TRAJECTORIES, trajectories_csv(&bt, sim.csv_stride)));
                if d.dim() == 2 {
                    files.push((BASELINE_PORTRAIT, phase_portrait_svg(&bt, d, "feedback-linearization baseline")?));
                }
                let converged = summaries.iter().filter(|s| s.converged).count();
                Some(BaselineSummary {
                    gain: b.gain.clone(),
                    converged,
                    not_converged: summaries.len() - converged,
                    rollouts: summaries,
                })
            }
        };

        let mut stochastic_final_distance = Vec::new();
        if let (true, Some(drift)) = (self.cfg.stochastic.enabled, self.learned_drift()?) {
            let lp = StochasticClosedLoop::from_metric(
                drift,
                InputField::Constant(self.cfg.system.input_direction()),
                controller.clone(),
                &self.metric(&controller)?,
            )?;
            let mut st = Vec::new();
            for (i, x0) in starts.iter().take(self.cfg.stochastic.rollouts).enumerate() {
                let t = rollout_stochastic(&lp, x0, sim.steps, sim.seed.wrapping_add(i as u64 + 1))?;
                stochastic_final_distance.push((t.last() - &x_star).norm());
                st.push(t);
            }
            if !st.is_empty() {
                files.push((STOCHASTIC_TRAJECTORIES, trajectories_csv(&st, sim.csv_stride)));
            }
        }

        let summary = SimulationSummary {
            equilibrium: x_star.as_slice().to_vec(),
            steps: sim.steps,
            all_converged: rollouts.iter().all(|r| r.converged),
            all_monotone: rollouts.iter().all(|r| r.monotone),
            worst_ratio: rollouts.iter().map(|r| r.final_ratio).fold(0.0, f64::max),
            rollouts,
            rate,
            baseline,
            stochastic_final_distance,
        };
        self.log(format!(
            "simulation: converged {}, monotone {}, worst ratio {:.3e}, empirical rate {:.6}",
            summary.all_converged, summary.all_monotone, summary.worst_ratio, summary.rate.lambda
        ));
        files.push((SIMULATION, serde_json::to_string_pretty(&summary)?));
        self.write_all(files)?;
        Ok(summary)
    }

    /// Runs every stage in order and writes a summary of the headline numbers.
    pub fn reproduce(&self) -> Result<ReproductionSummary> {
        let learn = match self.cfg.model.source {
            ModelSource::Learned => {
                if self.cfg.data.csv.is_none() {
                    self.gen_data()?;
                }
                Some(self.learn()?.1)
            }
            ModelSource::Analytic => None,
        };
        let report = self.synth()?;
        let v = self.verify()?;
        let sim = self.simulate()?;
        let summary = ReproductionSummary {
            mode: report.mode,
            rho: self.cfg.synthesis.rho,
            p: linalg::to_rows(&report.p),
            eps_p: report.eps_p,
            eps: report.eps,
            learn,
            verification: (&v.report).into(),
            verification_true: v.truth.as_ref().map(Into::into),
            moment: v.moment.as_ref().map(|m| MomentDigest {
                min_margin: m.min_margin,
                eps_noise: m.eps_noise,
                flagged_points: m.flagged_points,
                passed: m.passed,
            }),
            chebyshev: v.chebyshev.clone(),
            rollouts_converged: sim.all_converged,
            rollouts_monotone: sim.all_monotone,
            worst_rollout_ratio: sim.worst_ratio,
            empirical_rate: sim.rate.lambda,
            baseline_not_converged: sim.baseline.as_ref().map(|b| b.not_converged),
        };
        let mut resolved = self.cfg.clone();
        resolved.output_dir = PathBuf::from(".");
        if let Some(csv) = &resolved.data.csv {
            resolved.data.csv = csv.file_name().map(PathBuf::from);
        }
        self.write_all(vec![
            (SUMMARY, serde_json::to_string_pretty(&summary)?),
            (RESOLVED_CONFIG, resolved.to_json()?),
        ])?;
        Ok(summary)
    }
}

/// `trajectory, k, x_1..x_n, u`, keeping every `stride`-th step and the last state.
pub fn trajectories_csv(trajs: &[Trajectory], stride: usize) -> String {
    let n = trajs.first().and_then(|t| t.states.first()).map_or(0, Vec::len);
    let mut header = vec!["trajectory".to_string(), "k".to_string()];
    header.extend((1..=n).map(|i| format!("x_{i}")));
    header.push("u".into());
    let mut s = header.join(",");
    s.push('\n');
    for (id, t) in trajs.iter().enumerate() {
        let last = t.states.len() - 1;
        for (k, x) in t.states.iter().enumerate() {
            if k % stride != 0 && k != last {
                continue;
            }
            let _ = write!(s, "{id},{k}");
            for v in x {
                let _ = write!(s, ",{v:e}");
            }
            match t.inputs.get(k) {
                Some(u) => {
                    let _ = writeln!(s, ",{u:e}");
                }
                None => s.push_str(",\n"),
            }
        }
    }
    s
}
