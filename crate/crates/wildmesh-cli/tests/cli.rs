//! End-to-end checks of the command-line surface: every subcommand runs
//! against a miniature configuration, artifacts land where documented, and
//! failures exit non-zero with one machine-readable error line on stderr.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_wildmesh"))
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("wildmesh-cli-{name}"));
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

/// Overrides shared by the pipeline tests: a dataset and run small enough
/// that the whole chain finishes in seconds.
fn tiny_sets(data_dir: &Path, out_dir: &Path) -> Vec<String> {
    [
        &format!("dataset_dir={}", data_dir.display()),
        &format!("out_dir={}", out_dir.display()),
        "data.shapes=2",
        "data.views_per_shape=3",
        "data.image_size=16",
        "data.grid_resolution=6",
        "render.image_size=16",
        "train.total_iterations=8",
        "train.phase_boundaries=[0.25,0.5,0.75]",
        "train.batch_size=2",
        "train.grid_resolution=2",
        "train.min_surface_tets=1",
        "train.snapshot_probes=8",
        "train.checkpoint_interval=0",
        "net.z_dim=4",
        "net.w_dim=4",
        "net.mapping_hidden=8",
        "net.mapping_layers=2",
        "net.field_hidden=12",
        "net.field_layers=2",
        "net.pos_bands=2",
        "net.disc_channels=[4,8]",
        "net.disc_hidden=8",
        "eval.generated_count=3",
        "eval.points_per_mesh=128",
        "eval.write_distance_csv=true",
    ]
    .iter()
    .map(ToString::to_string)
    .collect()
}

fn run_with(sets: &[String], args: &[&str]) -> Output {
    let mut cmd = bin();
    cmd.args(args);
    for s in sets {
        cmd.arg("--set").arg(s);
    }
    cmd.output().expect("spawn wildmesh")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn pipeline_runs_end_to_end_and_writes_artifacts() {
    let data_dir = scratch("pipeline-data");
    let out_dir = scratch("pipeline-run");
    let sets = tiny_sets(&data_dir, &out_dir);

    assert_ok(&run_with(&sets, &["gen-data"]), "gen-data");
    assert!(data_dir.join("manifest.json").exists());
    assert!(data_dir.join("images/00000.png").exists());
    assert!(data_dir.join("masks/00005.png").exists());
    assert!(data_dir.join("run-config.toml").exists());

    assert_ok(&run_with(&sets, &["train"]), "train");
    assert!(out_dir.join("losses.csv").exists());
    assert!(out_dir.join("checkpoints/final.wmck").exists());
    assert!(out_dir.join("run-config.toml").exists());
    let losses = std::fs::read_to_string(out_dir.join("losses.csv")).unwrap();
    assert_eq!(losses.lines().count(), 9, "header plus one row per iteration");

    assert_ok(&run_with(&sets, &["export-mesh"]), "export-mesh");
    assert!(out_dir.join("meshes/000.obj").exists());
    assert!(out_dir.join("meshes/002.obj").exists());

    assert_ok(&run_with(&sets, &["eval"]), "eval");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("eval.json")).unwrap())
            .unwrap();
    assert_eq!(report["generated"], 3);
    assert!(report["coverage_pct"].as_f64().unwrap() >= 0.0);
    assert!(out_dir.join("distances.csv").exists());

    let cam = run_with(&sets, &["camera-report"]);
    assert_ok(&cam, "camera-report");
    let csv = std::fs::read_to_string(out_dir.join("cameras.csv")).unwrap();
    assert!(csv.starts_with("param,learned_mean,learned_std,true_mean,true_std,abs_error"));
    assert_eq!(csv.lines().count(), 7, "header plus six parameters");
}

#[test]
fn grad_check_passes_and_exits_zero() {
    let out = bin().arg("grad-check").output().expect("spawn");
    assert_ok(&out, "grad-check");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("render_pipeline"));
    assert!(stdout.contains("pass"));
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn failures_exit_nonzero_with_a_machine_readable_line() {
    let out = run_with(&["train.batch_size=0".into()], &["train"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().find(|l| l.starts_with("error ")).expect("error line");
    let parsed: serde_json::Value =
        serde_json::from_str(line.trim_start_matches("error ")).unwrap();
    assert_eq!(parsed["kind"], "bad-config");
    assert!(parsed["message"].as_str().unwrap().contains("batch_size"));

    // an empty generated directory is named in the error
    let empty = scratch("eval-empty");
    let out = run_with(&[format!("out_dir={}", empty.display())], &["eval"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("bad-input"));
    assert!(stderr.contains(&format!("{}", empty.join("meshes").display())));
}

#[test]
fn unknown_config_keys_are_rejected_by_name() {
    let out = run_with(&["train.totl_iterations=5".into()], &["gen-data"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("totl_iterations"));
}

#[test]
fn help_documents_the_config_surface() {
    let out = bin().arg("--help").output().expect("spawn");
    assert_ok(&out, "--help");
    let stdout = String::from_utf8_lossy(&out.stdout);
    for needle in [
        "gen-data",
        "train",
        "eval",
        "export-mesh",
        "camera-report",
        "grad-check",
        "total_iterations = 2000",
        "points_per_mesh = 2048",
        "orbit_radius = 3.5",
        "--set",
    ] {
        assert!(stdout.contains(needle), "--help must mention {needle}\n{stdout}");
    }
}
