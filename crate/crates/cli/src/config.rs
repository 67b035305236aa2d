//! Versioned JSON pipeline configuration.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, ensure, Context, Result};
use contraction_gp::drift_gp::ComponentSpec;
use contraction_gp::grid::Domain;
use contraction_gp::kernels::Kernel;
use contraction_gp::synthesis::{SynthesisMode, SynthesisOptions};
use contraction_gp::system::{InputField, Monomial, Oscillator, PolynomialDynamics, Sine1d, SystemModel};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;

/// The true system used to generate data and to simulate.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SystemSpec {
    Oscillator {
        dt: f64,
    },
    Sine1d {
        dt: f64,
    },
    /// Polynomial drift with a constant input direction.
    Polynomial {
        components: Vec<Vec<Monomial>>,
        b: Vec<f64>,
        #[serde(default)]
        equilibrium: Option<Vec<f64>>,
        /// Sampling period, used by the feedback-linearization baseline.
        #[serde(default)]
        dt: Option<f64>,
    },
}

impl SystemSpec {
    pub fn dim(&self) -> usize {
        match self {
            SystemSpec::Oscillator { .. } => 2,
            SystemSpec::Sine1d { .. } => 1,
            SystemSpec::Polynomial { components, .. } => components.len(),
        }
    }

    pub fn dt(&self) -> Option<f64> {
        match self {
            SystemSpec::Oscillator { dt } | SystemSpec::Sine1d { dt } => Some(*dt),
            SystemSpec::Polynomial { dt, .. } => *dt,
        }
    }

    pub fn input_direction(&self) -> DVector<f64> {
        match self {
            SystemSpec::Oscillator { dt } => Oscillator { dt: *dt }.input_direction(),
            SystemSpec::Sine1d { dt } => DVector::from_element(1, *dt),
            SystemSpec::Polynomial { b, .. } => DVector::from_column_slice(b),
        }
    }

    pub fn model(&self) -> Result<SystemModel> {
        Ok(match self {
            SystemSpec::Oscillator { dt } => Oscillator { dt: *dt }.model(),
            SystemSpec::Sine1d { dt } => Sine1d { dt: *dt }.model(),
            SystemSpec::Polynomial {
                components,
                b,
                equilibrium,
                ..
            } => {
                let dynamics = PolynomialDynamics::new(components.clone())?;
                let model = SystemModel::new(Arc::new(dynamics), InputField::Constant(DVector::from_column_slice(b)))?;
                match equilibrium {
                    Some(e) => model.with_equilibrium(DVector::from_column_slice(e))?,
                    None => model,
                }
            }
        })
    }

    fn validate(&self) -> Result<()> {
        if let Some(dt) = self.dt() {
            ensure!(dt.is_finite() && dt > 0.0, "system dt must be positive");
        }
        if let SystemSpec::Polynomial { b, .. } = self {
            ensure!(b.len() == self.dim(), "input direction b has {} entries, expected {}", b.len(), self.dim());
        }
        self.model().map(|_| ())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub domain: Domain,
    /// Grid points per axis; the data set has `per_axis^n` samples.
    pub per_axis: usize,
    /// Noise standard deviation per drift component.
    pub sigma_y: Vec<f64>,
    pub seed: u64,
    /// Use this CSV instead of the generated `data.csv`.
    #[serde(default)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelSource {
    Analytic,
    Learned,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub source: ModelSource,
    /// One entry per drift component.
    pub components: Vec<ComponentSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    /// Data points per axis of the controller grid.
    pub per_axis: usize,
    pub kernel: Kernel,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisConfig {
    pub mode: SynthesisMode,
    pub rho: f64,
    pub sigma_p: f64,
    #[serde(default)]
    pub jitter: Option<f64>,
    #[serde(default)]
    pub target_bound: Option<f64>,
    /// Cells per axis for hulls (polytopic mode and probabilistic hulls).
    pub subdivisions: usize,
    pub inflation: f64,
    /// Point where the controller is shifted to vanish; defaults to the
    /// system's equilibrium.
    #[serde(default)]
    pub anchor: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerificationConfig {
    pub resolution: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub steps: usize,
    /// Initial states spread along the domain boundary.
    pub initial_states: usize,
    /// Random trajectory pairs for the empirical contraction rate.
    pub pairs: usize,
    pub seed: u64,
    /// Every `csv_stride`-th state is written to the trajectory CSVs.
    pub csv_stride: usize,
    /// A rollout counts as converged when `|x_K − x*| < tolerance · |x_0 − x*|`.
    pub convergence_ratio: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StochasticConfig {
    pub enabled: bool,
    /// Chebyshev constant, must exceed the state dimension.
    pub c: f64,
    pub moment_check: bool,
    /// Stochastic rollouts of the learned closed loop.
    pub rollouts: usize,
}

/// Cancellation-plus-linear-feedback comparison law.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub gain: Vec<f64>,
    /// Drift component whose increment is cancelled.
    pub component: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: u32,
    pub system: SystemSpec,
    /// Controller, verification and simulation domain.
    pub domain: Domain,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub controller: ControllerConfig,
    pub synthesis: SynthesisConfig,
    pub verification: VerificationConfig,
    pub simulation: SimulationConfig,
    pub stochastic: StochasticConfig,
    #[serde(default)]
    pub baseline: Option<BaselineConfig>,
    pub output_dir: PathBuf,
}

impl PipelineConfig {
    /// The forced negative-resistance oscillator with a learned second drift
    /// component: 121 noisy samples on `[-3, 3]²`, a 49-point controller on
    /// `[-2, 2]²`.
    pub fn oscillator() -> Self {
        let dt = Oscillator::DEFAULT_DT;
        PipelineConfig {
            version: CONFIG_VERSION,
            system: SystemSpec::Oscillator { dt },
            domain: Domain::cube(2, -2.0, 2.0),
            data: DataConfig {
                domain: Domain::cube(2, -3.0, 3.0),
                per_axis: 11,
                sigma_y: vec![0.0, 0.01],
                seed: 7,
                csv: None,
            },
            model: ModelConfig {
                source: ModelSource::Learned,
                components: vec![
                    ComponentSpec::Fixed {
                        gradient: vec![1.0, dt],
                        offset: 0.0,
                    },
                    ComponentSpec::Learn {
                        kernel: Kernel::unit_gaussian(2),
                    },
                ],
            },
            controller: ControllerConfig {
                per_axis: 7,
                kernel: Kernel::unit_gaussian(2),
            },
            synthesis: SynthesisConfig {
                mode: SynthesisMode::TwoStep,
                rho: 5.0,
                sigma_p: 0.0,
                jitter: None,
                target_bound: None,
                subdivisions: 4,
                inflation: 0.1,
                anchor: None,
            },
            verification: VerificationConfig { resolution: 41 },
            simulation: SimulationConfig {
                steps: 10_000,
                initial_states: 16,
                pairs: 5,
                seed: 11,
                csv_stride: 10,
                convergence_ratio: 0.05,
            },
            stochastic: StochasticConfig {
                enabled: true,
                c: 40.0,
                moment_check: true,
                rollouts: 4,
            },
            baseline: Some(BaselineConfig {
                gain: vec![-49.8, 40.6],
                component: 1,
            }),
            output_dir: PathBuf::from("out"),
        }
    }

    /// Scalar `x⁺ = x + Δt sin x` on `[0, π]`, synthesized over interval hulls.
    pub fn sine1d() -> Self {
        let dt = 0.01;
        PipelineConfig {
            version: CONFIG_VERSION,
            system: SystemSpec::Sine1d { dt },
            domain: Domain::new(vec![0.0], vec![std::f64::consts::PI]).expect("valid interval"),
            data: DataConfig {
                domain: Domain::new(vec![0.0], vec![std::f64::consts::PI]).expect("valid interval"),
                per_axis: 21,
                sigma_y: vec![0.0],
                seed: 7,
                csv: None,
            },
            model: ModelConfig {
                source: ModelSource::Analytic,
                components: vec![ComponentSpec::Learn {
                    kernel: Kernel::unit_gaussian(1),
                }],
            },
            controller: ControllerConfig {
                per_axis: 8,
                kernel: Kernel::unit_gaussian(1),
            },
            synthesis: SynthesisConfig {
                mode: SynthesisMode::Polytopic,
                rho: 100.0,
                sigma_p: 0.0,
                jitter: None,
                target_bound: None,
                subdivisions: 8,
                inflation: 0.1,
                anchor: None,
            },
            verification: VerificationConfig { resolution: 201 },
            simulation: SimulationConfig {
                steps: 1_000,
                initial_states: 2,
                pairs: 3,
                seed: 11,
                csv_stride: 1,
                convergence_ratio: 0.05,
            },
            stochastic: StochasticConfig {
                enabled: false,
                c: 10.0,
                moment_check: false,
                rollouts: 0,
            },
            baseline: None,
            output_dir: PathBuf::from("out"),
        }
    }

    /// Reads and validates a configuration; relative paths inside it resolve
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: PipelineConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        if let Some(csv) = &cfg.data.csv {
            if csv.is_relative() {
                cfg.data.csv = Some(base.join(csv));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.version == CONFIG_VERSION,
            "unsupported config version {} (expected {CONFIG_VERSION})",
            self.version
        );
        self.system.validate()?;
        let n = self.system.dim();
        ensure!(self.domain.dim() == n, "domain has {} axes, system has {n}", self.domain.dim());
        check_domain(&self.domain, "domain")?;
        check_domain(&self.data.domain, "data.domain")?;
        ensure!(self.data.domain.dim() == n, "data.domain has {} axes, system has {n}", self.data.domain.dim());
        ensure!(self.data.per_axis >= 1, "data.per_axis must be positive");
        ensure!(self.data.sigma_y.len() == n, "data.sigma_y needs {n} entries");
        ensure!(
            self.data.sigma_y.iter().all(|s| s.is_finite() && *s >= 0.0),
            "data.sigma_y must be nonnegative"
        );
        if let Some(csv) = &self.data.csv {
            ensure!(csv.is_file(), "data.csv {} does not exist", csv.display());
        }
        ensure!(self.model.components.len() == n, "model.components needs {n} entries");
        for c in &self.model.components {
            match c {
                ComponentSpec::Learn { kernel } => {
                    ensure!(kernel.dim() == n, "model kernel has dimension {}, expected {n}", kernel.dim())
                }
                ComponentSpec::Fixed { gradient, offset } => ensure!(
                    gradient.len() == n && gradient.iter().chain([offset]).all(|v| v.is_finite()),
                    "fixed component needs {n} finite gradient entries"
                ),
            }
        }
        ensure!(self.controller.per_axis >= 1, "controller.per_axis must be positive");
        ensure!(self.controller.kernel.dim() == n, "controller kernel has the wrong dimension");
        let s = &self.synthesis;
        ensure!(s.rho.is_finite() && s.rho > 1.0, "synthesis.rho must exceed 1");
        ensure!(s.sigma_p.is_finite() && s.sigma_p >= 0.0, "synthesis.sigma_p must be nonnegative");
        ensure!(s.subdivisions >= 1, "synthesis.subdivisions must be positive");
        ensure!(s.inflation.is_finite() && s.inflation >= 0.0, "synthesis.inflation must be nonnegative");
        if let Some(a) = &s.anchor {
            ensure!(a.len() == n, "synthesis.anchor needs {n} entries");
        }
        ensure!(self.verification.resolution >= 1, "verification.resolution must be positive");
        let sim = &self.simulation;
        ensure!(sim.steps >= 1, "simulation.steps must be positive");
        ensure!(sim.csv_stride >= 1, "simulation.csv_stride must be positive");
        ensure!(
            sim.convergence_ratio.is_finite() && sim.convergence_ratio > 0.0,
            "simulation.convergence_ratio must be positive"
        );
        if self.stochastic.enabled {
            ensure!(self.stochastic.c > n as f64, "stochastic.c must exceed the state dimension {n}");
        }
        if let Some(b) = &self.baseline {
            ensure!(b.gain.len() == n, "baseline.gain needs {n} entries");
            ensure!(b.component < n, "baseline.component out of range");
            ensure!(self.system.dt().is_some(), "the baseline needs the system's dt");
        }
        Ok(())
    }

    pub fn synthesis_options(&self, anchor: Option<Vec<f64>>) -> SynthesisOptions {
        SynthesisOptions {
            rho: self.synthesis.rho,
            sigma_p: self.synthesis.sigma_p,
            jitter: self.synthesis.jitter,
            target_bound: self.synthesis.target_bound,
            anchor,
            ..SynthesisOptions::default()
        }
    }
}

fn check_domain(d: &Domain, what: &str) -> Result<()> {
    if let Err(e) = Domain::new(d.lower.clone(), d.upper.clone()) {
        bail!("{what}: {e}");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for cfg in [PipelineConfig::oscillator(), PipelineConfig::sine1d()] {
            cfg.validate().unwrap();
            let back: PipelineConfig = serde_json::from_str(&cfg.to_json().unwrap()).unwrap();
            assert_eq!(back.to_json().unwrap(), cfg.to_json().unwrap());
        }
    }

    #[test]
    fn rejects_inconsistent_configs() {
        let mut cfg = PipelineConfig::oscillator();
        cfg.version = 2;
        assert!(cfg.validate().is_err());
        let mut cfg = PipelineConfig::oscillator();
        cfg.data.sigma_y = vec![0.01];
        assert!(cfg.validate().is_err());
        let mut cfg = PipelineConfig::oscillator();
        cfg.stochastic.c = 2.0;
        assert!(cfg.validate().is_err());
        let mut cfg = PipelineConfig::oscillator();
        cfg.data.csv = Some(PathBuf::from("/nonexistent/data.csv"));
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&PipelineConfig::oscillator().to_json().unwrap()).unwrap();
        v["verification"]["resolutoin"] = 3.into();
        assert!(serde_json::from_value::<PipelineConfig>(v).is_err());
    }
}
