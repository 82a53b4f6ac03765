use std::path::Path;
use std::process::Command;

use switching_mkv::cli::{config_hash, parse_config_str, write_config, CliError, RunConfig};

const BIN: &str = env!("CARGO_BIN_EXE_switching-mkv");

const BASE: &str = r#"
seed = 42

[model]
name = "switching-mf-ou"

[model.params]
a = [1.0, 2.0]
c = [1.0, -1.0]
s = [0.5, 0.3]
gamma = [0.2, 0.4]
jumps = { rate = 2.0, marks = { law = "uniform-box", lower = [0.0], upper = [1.0] } }

[chain]
q = [[0.0, 1.0], [2.0, 0.0]]

[time]
horizon = 0.5
step = 0.01

[simulate]
particles = 40

[validate]
probes = 200

[ergodicity]
t_max = 4.0
points = 41

[picard]
size = 200
"#;

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn run(args: &[&str], env: Option<(&str, &str)>) -> (i32, String, String) {
    let mut cmd = Command::new(BIN);
    cmd.args(args).env_remove("SWITCHING_MKV_WORKERS");
    if let Some((k, v)) = env {
        cmd.env(k, v);
    }
    let out = cmd.output().unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn validate_prints_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.toml", BASE);
    let out = dir.path().join("out");
    let (code, stdout, _) = run(&["validate", "-c", cfg.to_str().unwrap(), "-o", out.to_str().unwrap()], None);
    assert_eq!(code, 0, "{stdout}");
    assert!(stdout.contains("k1,k2,probes"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert!(report["raw"]["k1"].as_f64().unwrap() > 0.0);
    let m = manifest(&out);
    assert_eq!(m["seed"], 42);
    assert_eq!(m["version"], env!("CARGO_PKG_VERSION"));
}

#[test]
fn ergodicity_csv_matches_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.toml", BASE);
    let out = dir.path().join("out");
    let (code, _, _) = run(&["ergodicity", "-c", cfg.to_str().unwrap(), "-o", out.to_str().unwrap()], None);
    assert_eq!(code, 0);
    let mut rdr = csv::Reader::from_path(out.join("ergodicity.csv")).unwrap();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let t: f64 = rec[0].parse().unwrap();
        let state: f64 = rec[1].parse().unwrap();
        let tv: f64 = rec[2].parse().unwrap();
        let other = if state == 0.0 { 1.0 / 3.0 } else { 2.0 / 3.0 };
        assert!((tv - 2.0 * other * (-3.0 * t).exp()).abs() < 1e-8);
        rows += 1;
    }
    assert_eq!(rows, 82);
}

#[test]
fn identical_manifests_give_identical_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.toml", BASE);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let (code, _, err) = run(&["simulate", "-c", cfg.to_str().unwrap(), "-o", out.to_str().unwrap()], None);
        assert_eq!(code, 0, "{err}");
    }
    for f in ["trajectories.csv", "ensemble_mean.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
    }
    assert_eq!(manifest(&a)["config_sha256"], manifest(&b)["config_sha256"]);
}

#[test]
fn worker_override_is_recorded_and_harmless() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.toml", &format!("workers = 1\n{BASE}"));
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run(&["simulate", "-c", cfg.to_str().unwrap(), "-o", a.to_str().unwrap()], None);
    run(
        &["simulate", "-c", cfg.to_str().unwrap(), "-o", b.to_str().unwrap()],
        Some(("SWITCHING_MKV_WORKERS", "3")),
    );
    assert_eq!(manifest(&a)["workers"], 1);
    assert_eq!(manifest(&a)["workers_source"], "config");
    assert_eq!(manifest(&b)["workers"], 3);
    assert_eq!(manifest(&b)["workers_source"], "env");
    assert_eq!(
        std::fs::read(a.join("trajectories.csv")).unwrap(),
        std::fs::read(b.join("trajectories.csv")).unwrap()
    );
}

#[test]
fn seed_override_changes_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.toml", BASE);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run(&["simulate", "-c", cfg.to_str().unwrap(), "-o", a.to_str().unwrap()], None);
    run(&["simulate", "-c", cfg.to_str().unwrap(), "-o", b.to_str().unwrap(), "--seed", "43"], None);
    assert_eq!(manifest(&b)["seed"], 43);
    assert_ne!(manifest(&a)["config_sha256"], manifest(&b)["config_sha256"]);
    assert_ne!(
        std::fs::read(a.join("trajectories.csv")).unwrap(),
        std::fs::read(b.join("trajectories.csv")).unwrap()
    );
}

#[test]
fn error_classes_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    let syntax = write(dir.path(), "syntax.toml", "seed = \n");
    let schema = write(dir.path(), "schema.toml", &BASE.replace("seed = 42", "seed = 42\nsigma_typo = 1"));
    let invalid = write(dir.path(), "invalid.toml", &BASE.replace("[[0.0, 1.0], [2.0, 0.0]]", "[[-1.0, 1.0], [2.0, -1.0]]"));
    let blowup = write(
        dir.path(),
        "blowup.toml",
        &BASE
            .replace("a = [1.0, 2.0]", "a = [-1e300, -1e300]")
            .replace("step = 0.01", "step = 0.1"),
    );
    let (c, _, e) = run(&["chaos", "-c", syntax.to_str().unwrap(), "-o", out], None);
    assert_eq!(c, 2, "{e}");
    assert!(e.contains("line 1"), "{e}");
    let (c, _, e) = run(&["chaos", "-c", schema.to_str().unwrap(), "-o", out], None);
    assert_eq!(c, 2);
    assert!(e.contains("sigma_typo"), "{e}");
    let (c, _, e) = run(&["chaos", "-c", invalid.to_str().unwrap(), "-o", out], None);
    assert_eq!(c, 3, "{e}");
    let (c, _, e) = run(&["simulate", "-c", blowup.to_str().unwrap(), "-o", out], None);
    assert_eq!(c, 4, "{e}");
    let (c, _, _) = run(&["chaos", "-c", "/nonexistent/run.toml", "-o", out], None);
    assert_eq!(c, 5);
}

#[test]
fn picard_runs_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.toml", BASE);
    let out = dir.path().join("out");
    let (code, stdout, err) = run(&["picard", "-c", cfg.to_str().unwrap(), "-o", out.to_str().unwrap()], None);
    assert!(code == 0 || code == 1, "{err}");
    assert!(stdout.contains("converged"), "{stdout}");
    assert!(out.join("picard.csv").exists());
}

#[test]
fn config_round_trip_and_hash_sensitivity() {
    let c = parse_config_str(BASE).unwrap();
    let text = write_config(&c);
    let back: RunConfig = parse_config_str(&text).unwrap();
    assert_eq!(back, c);
    // Defaults are written out explicitly.
    assert!(text.contains("replicates = 16"));
    assert!(text.contains("m_factor = 4"));

    let h = config_hash(&c);
    let mut edits: Vec<RunConfig> = Vec::new();
    let mut e = c.clone();
    e.seed += 1;
    edits.push(e);
    let mut e = c.clone();
    e.time.step = 0.02;
    edits.push(e);
    let mut e = c.clone();
    e.chaos.sizes.push(1600);
    edits.push(e);
    let mut e = c.clone();
    e.model.as_mut().unwrap().params.insert("dim".into(), toml::Value::Integer(1));
    edits.push(e);
    for e in &edits {
        assert_ne!(config_hash(e), h);
    }
    // Where results go and how many threads compute them do not count.
    let mut e = c.clone();
    e.output_dir = "elsewhere".into();
    e.workers = Some(7);
    assert_eq!(config_hash(&e), h);
}

#[test]
fn initial_law_and_model_dimension_must_agree() {
    let text = format!("{BASE}\n[initial]\nlaw = \"gaussian\"\nmean = [0.0, 0.0]\nstd = 1.0\n");
    let c = parse_config_str(&text).unwrap();
    assert!(matches!(
        c.validate(switching_mkv::cli::Subcommand::Simulate),
        Err(CliError::Validation(_))
    ));
}
