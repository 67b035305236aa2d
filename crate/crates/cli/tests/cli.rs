use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use contraction_gp::drift_gp::DriftDataset;
use contraction_gp::synthesis::SynthesisMode;
use contraction_gp::system::{FeedbackLaw, Oscillator};
use contraction_gp::verify_sim::rollout;
use contraction_gp_cli::config::{ModelSource, PipelineConfig, SystemSpec};
use contraction_gp_cli::pipeline::{self, Pipeline};
use nalgebra::dvector;
use serde_json::json;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_contraction-gp"))
        .args(args)
        .arg("--quiet")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, cfg: &PipelineConfig) -> String {
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_json().unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

fn small_oscillator(dir: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::oscillator();
    cfg.output_dir = dir.join("out");
    cfg.verification.resolution = 11;
    cfg.simulation.steps = 200;
    cfg.simulation.initial_states = 4;
    cfg.simulation.pairs = 2;
    cfg.stochastic.rollouts = 1;
    cfg
}

#[test]
fn default_config_round_trips() {
    let out = run(&["default-config"]);
    assert!(out.status.success());
    let cfg: PipelineConfig = serde_json::from_slice(&out.stdout).unwrap();
    cfg.validate().unwrap();
    assert_eq!(cfg.data.per_axis, 11);
}

#[test]
fn gen_data_is_seeded_and_exact_without_noise() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_oscillator(dir.path());
    let path = write_config(dir.path(), &cfg);
    let data = cfg.output_dir.join(pipeline::DATA_CSV);
    assert!(run(&["gen-data", "--config", &path]).status.success());
    let first = fs::read(&data).unwrap();
    assert!(run(&["gen-data", "--config", &path]).status.success());
    assert_eq!(first, fs::read(&data).unwrap());
    assert!(run(&["gen-data", "--config", &path, "--seed", "8"]).status.success());
    assert_ne!(first, fs::read(&data).unwrap());

    let mut quiet = cfg.clone();
    quiet.data.sigma_y = vec![0.0, 0.0];
    let ds = Pipeline::new(quiet, true).gen_data().unwrap();
    assert_eq!(ds.len(), 121);
    let osc = Oscillator { dt: Oscillator::DEFAULT_DT };
    use contraction_gp::system::Dynamics;
    for (k, x) in ds.points().iter().enumerate() {
        assert_eq!(ds.component(1)[k], osc.drift(x)[1]);
    }
    let parsed = DriftDataset::from_csv(&fs::read_to_string(&data).unwrap(), vec![0.0, 0.0]).unwrap();
    assert_eq!(parsed.component(1), ds.component(1));
}

#[test]
fn learned_pipeline_runs_stage_by_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_oscillator(dir.path());
    let path = write_config(dir.path(), &cfg);
    for stage in ["gen-data", "learn", "synth", "verify", "simulate"] {
        let out = run(&[stage, "--config", &path]);
        assert!(out.status.success(), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    for name in [
        pipeline::DRIFT_MODEL,
        pipeline::ERROR_SURFACE,
        pipeline::CONTROLLER,
        pipeline::MARGINS_CSV,
        pipeline::CONTROLLER_SURFACE,
        pipeline::VERIFICATION,
        pipeline::VERIFICATION_TRUE,
        pipeline::MOMENT_IES,
        pipeline::CHEBYSHEV_HULLS,
        pipeline::TRAJECTORIES,
        pipeline::BASELINE_TRAJECTORIES,
        pipeline::PORTRAIT,
        pipeline::SIMULATION,
    ] {
        assert!(cfg.output_dir.join(name).is_file(), "missing {name}");
    }
    // The fixed first row of the drift model.
    let drift: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(cfg.output_dir.join(pipeline::DRIFT_MODEL)).unwrap()).unwrap();
    assert_eq!(drift["components"][0]["gradient"], json!([1.0, Oscillator::DEFAULT_DT]));
    let traj = fs::read_to_string(cfg.output_dir.join(pipeline::TRAJECTORIES)).unwrap();
    assert!(traj.starts_with("trajectory,k,x_1,x_2,u\n"));
}

#[test]
fn missing_artifacts_and_bad_configs_exit_with_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_oscillator(dir.path());
    let path = write_config(dir.path(), &cfg);
    assert_eq!(run(&["synth", "--config", &path]).status.code(), Some(3));
    assert_eq!(run(&["verify", "--config", &path]).status.code(), Some(3));

    let mut value: serde_json::Value = serde_json::from_str(&cfg.to_json().unwrap()).unwrap();
    value["version"] = json!(99);
    let bad = dir.path().join("bad.json");
    fs::write(&bad, value.to_string()).unwrap();
    assert_eq!(run(&["learn", "--config", bad.to_str().unwrap()]).status.code(), Some(3));
    value["version"] = json!(1);
    value["verification"]["resolution"] = json!(0);
    fs::write(&bad, value.to_string()).unwrap();
    assert_eq!(run(&["learn", "--config", bad.to_str().unwrap()]).status.code(), Some(3));
    let missing = dir.path().join("nope.json");
    assert_eq!(run(&["learn", "--config", missing.to_str().unwrap()]).status.code(), Some(3));
}

#[test]
fn empty_data_fails_without_writing_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_oscillator(dir.path());
    let path = write_config(dir.path(), &cfg);
    fs::create_dir_all(&cfg.output_dir).unwrap();
    fs::write(cfg.output_dir.join(pipeline::DATA_CSV), "x_1,x_2,y_1,y_2\n").unwrap();
    let out = run(&["learn", "--config", &path]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!cfg.output_dir.join(pipeline::DRIFT_MODEL).exists());
    assert!(!cfg.output_dir.join(pipeline::ERROR_SURFACE).exists());
}

#[test]
fn infeasible_synthesis_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = PipelineConfig::sine1d();
    cfg.output_dir = dir.path().join("out");
    // x₁⁺ = 2x₁ cannot be influenced through b = (0, 1).
    let spec = json!({
        "kind": "polynomial",
        "components": [
            [{"coefficient": 2.0, "powers": [1, 0]}],
            [{"coefficient": 1.0, "powers": [0, 1]}]
        ],
        "b": [0.0, 1.0]
    });
    cfg.system = serde_json::from_value::<SystemSpec>(spec).unwrap();
    let mut value: serde_json::Value = serde_json::from_str(&cfg.to_json().unwrap()).unwrap();
    value["domain"] = json!({"lower": [-1.0, -1.0], "upper": [1.0, 1.0]});
    value["data"]["domain"] = value["domain"].clone();
    value["data"]["sigma_y"] = json!([0.0, 0.0]);
    let unit = json!({"kind": "learn", "kernel": {"family": "squared-exponential", "beta": 1.0, "sigma": [[1.0, 0.0], [0.0, 1.0]]}});
    value["model"]["components"] = json!([unit.clone(), unit]);
    value["controller"]["per_axis"] = json!(3);
    value["controller"]["kernel"] = json!({"family": "squared-exponential", "beta": 1.0, "sigma": [[1.0, 0.0], [0.0, 1.0]]});
    value["synthesis"]["mode"] = json!("two-step");
    let path = dir.path().join("config.json");
    fs::write(&path, value.to_string()).unwrap();
    let out = run(&["synth", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("infeasible"));
    assert!(!cfg.output_dir.join(pipeline::CONTROLLER).exists());
}

#[test]
fn sine_polytopic_pipeline_certifies() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = PipelineConfig::sine1d();
    cfg.output_dir = dir.path().join("out");
    assert_eq!(cfg.model.source, ModelSource::Analytic);
    let path = write_config(dir.path(), &cfg);
    let out = run(&["synth", "--config", &path, "--mode", "polytopic"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(cfg.output_dir.join(pipeline::HULLS).is_file());
    let out = run(&["verify", "--config", &path]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(cfg.output_dir.join(pipeline::VERIFICATION)).unwrap()).unwrap();
    assert!(report["min_margin"].as_f64().unwrap() > 0.0);
}

#[test]
fn simulation_from_equilibrium_stays_put() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = PipelineConfig::oscillator();
    cfg.model.source = ModelSource::Analytic;
    cfg.output_dir = dir.path().to_path_buf();
    cfg.synthesis.mode = SynthesisMode::TwoStep;
    let p = Pipeline::new(cfg.clone(), true);
    let report = p.synth().unwrap();
    let model = cfg.system.model().unwrap();
    let t = rollout(&model, &report.controller, &dvector![0.0, 0.0], 100).unwrap();
    assert!(t.states.iter().all(|x| x.iter().all(|v| v.abs() < 1e-12)));
    assert!(report.controller.control(&dvector![0.0, 0.0]).abs() < 1e-12);
}
