use std::process::Command;

use dmvae_lab::config::{AblateMode, NetSize, SamplerChoice, MAX_CELLS};
use dmvae_lab::experiments::ablate::cells;
use dmvae_lab::experiments::{Artifacts, CellReport};
use dmvae_lab::table::Table;
use dmvae_lab::{ExperimentConfig, LabError};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dmvae"))
}

#[test]
fn one_at_a_time_cell_count() {
    let cfg = ExperimentConfig::default();
    let a = &cfg.ablate;
    let sizes = a.lambda.len() + a.guidance.len() + a.sampler.len() + a.net_size.len();
    let c = cells(&cfg).unwrap();
    assert_eq!(c.len(), sizes - 4 + 1);
    // The base cell uses the configured values and comes first.
    assert_eq!(c[0].lambda, cfg.dmvae.lambda_dm);
    assert_eq!(c[0].guidance, cfg.dmvae.guidance);
    assert_eq!(c[0].sampler, SamplerChoice::Uniform);
    assert_eq!(c[0].net_size, NetSize::Large);
    let names: std::collections::BTreeSet<String> = c.iter().map(|c| c.name()).collect();
    assert_eq!(names.len(), c.len());
}

#[test]
fn cartesian_cell_count_and_guard() {
    let mut cfg = ExperimentConfig::default();
    cfg.ablate.mode = AblateMode::Cartesian;
    assert_eq!(cells(&cfg).unwrap().len(), 4 * 3 * 2 * 2);
    cfg.ablate.lambda = (1..=6).map(f64::from).collect();
    assert!(6 * 3 * 2 * 2 > MAX_CELLS);
    assert!(matches!(cells(&cfg), Err(LabError::Config(_))));
    cfg.ablate.allow_large = true;
    assert_eq!(cells(&cfg).unwrap().len(), 72);
}

#[test]
fn duplicate_axis_values_are_run_once() {
    let mut cfg = ExperimentConfig::default();
    cfg.ablate.lambda = vec![10.0, 10.0, 1.0];
    cfg.ablate.guidance = vec![1.0];
    cfg.ablate.sampler = vec![SamplerChoice::Uniform];
    cfg.ablate.net_size = vec![NetSize::Large];
    assert_eq!(cells(&cfg).unwrap().len(), 2);
}

#[test]
fn data_is_written_before_figures_and_render_errors_are_not_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let mut art = Artifacts::new(dir.path(), "cell").unwrap();
    let mut t = Table::new(&["a"]);
    t.push(vec![1.5.into()]);
    art.table("data.tsv", &t).unwrap();
    let data_path = dir.path().join("cell/data.tsv");
    let seen = data_path.clone();
    art.plot("ok.svg", move || {
        assert!(seen.exists(), "figure rendered before its data");
        Ok("<svg/>".into())
    });
    art.plot("bad.svg", || Err(LabError::Render("nothing to draw".into())));
    let mut report = CellReport::new("cell", 0);
    art.finish(&mut report);
    assert!(report.ok);
    assert_eq!(report.render_errors.len(), 1);
    assert!(report.render_errors[0].contains("bad.svg"));
    assert_eq!(report.files, vec!["cell/data.tsv".to_string(), "cell/ok.svg".to_string()]);
    assert!(!dir.path().join("cell/bad.svg").exists());
}

#[test]
fn show_config_round_trips() {
    let out = bin().args(["show-config", "--set", "dmvae.lambda_dm=3.5", "--seed", "9"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let cfg = ExperimentConfig::from_toml_str(&text, &[]).unwrap();
    assert_eq!(cfg.dmvae.lambda_dm, 3.5);
    assert_eq!(cfg.seeds, vec![9]);
}

#[test]
fn oversized_ablation_is_refused_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("big.toml");
    std::fs::write(&cfg, "[ablate]\nmode = \"cartesian\"\nlambda = [1, 2, 3, 4, 5, 6]\n").unwrap();
    let out = bin().args(["ablate", "-q", "-c"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("allow_large"));
    assert!(!dir.path().join("runs").exists());
}

#[test]
fn bad_config_exits_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[dmvae]\nlamda_dm = 1.0\n").unwrap();
    let out = bin().args(["teach", "-q", "-c"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lamda_dm"));
}

#[test]
fn field_run_writes_its_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("field.toml");
    std::fs::write(
        &cfg,
        "[field]\ntimes = [0.5]\nresolution = 5\n[field.source]\nmode = \"analytic\"\nq = { kind = \"gaussian\", mean = [1.0, 0.0], cov = { rows = 2, cols = 2, data = [1.0, 0.0, 0.0, 1.0] } }\n",
    )
    .unwrap();
    let out = bin().args(["field", "-q", "-c"]).arg(&cfg).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let tsv = std::fs::read_to_string(dir.path().join("runs/direction-field/seed-0/field/field-t0.5.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 1 + 25);
    let summary = std::fs::read_to_string(dir.path().join("runs/direction-field/summary.json")).unwrap();
    assert!(summary.contains("\"all_ok\": true"));
}
