use std::path::{Path, PathBuf};
use std::process::Command;

use elmix::cli::{self, EXIT_FAILED, EXIT_OK, EXIT_PARTIAL, EXIT_USAGE};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/configs")
}

fn run(args: &[&str]) -> i32 {
    cli::run(std::iter::once("elmix").chain(args.iter().copied()))
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

const SMALL_GRID: &str = r#"{
  "datasets": [
    {"kind": "blobs", "name": "a", "classes": 2, "per_class": 20, "dim": 2, "separation": 1.0, "seed": 1},
    {"kind": "blobs", "name": "b", "classes": 3, "per_class": 20, "dim": 2, "separation": 1.0, "seed": 2}
  ],
  "methods": [
    {"name": "ce", "loss": {"name": "ce"}},
    {"name": "f0-05", "schedule": "f0-05"},
    {"name": "el", "loss": {"name": "el"}}
  ],
  "trainer": {"epochs": 5, "batch_size": 8},
  "lrs": [0.05, 0.01],
  "seeds": [1, 2]
}"#;

#[test]
fn shipped_configs_pass_dry_run() {
    let out = tempfile::tempdir().unwrap();
    let o = out.path().to_str().unwrap();
    for (cmd, file) in [
        ("grid", "grid.json"),
        ("report", "grid.json"),
        ("gen-data", "grid.json"),
        ("train", "train.json"),
        ("sweep", "train.json"),
        ("escape", "escape_model.json"),
        ("escape", "escape_double_well.json"),
    ] {
        let cfg = configs().join(file);
        assert_eq!(
            run(&[cmd, "-c", cfg.to_str().unwrap(), "-o", o, "--dry-run"]),
            EXIT_OK,
            "{cmd} {file}"
        );
    }
    assert_eq!(
        std::fs::read_dir(out.path()).unwrap().count(),
        0,
        "dry runs wrote files"
    );
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["frobnicate"]), EXIT_USAGE);
    assert_eq!(run(&["grid"]), EXIT_USAGE);
    assert_eq!(run(&["grid", "-c", "/nonexistent/config.json"]), EXIT_USAGE);
    let bad = write(dir.path(), "bad.json", "{\"datasets\": []}");
    assert_eq!(run(&["grid", "-c", &bad]), EXIT_USAGE);
    let no_methods = write(
        dir.path(),
        "empty.json",
        r#"{"datasets": [{"kind": "blobs", "name": "a", "classes": 2, "per_class": 5, "dim": 2, "separation": 1.0}],
            "methods": [], "trainer": {"epochs": 1, "batch_size": 1}, "seeds": [0]}"#,
    );
    assert_eq!(run(&["grid", "-c", &no_methods, "--dry-run"]), EXIT_USAGE);
}

#[test]
fn binary_reports_exit_codes() {
    let exe = env!("CARGO_BIN_EXE_elmix");
    let status = Command::new(exe).arg("--help").output().unwrap();
    assert!(status.status.success());
    let help = String::from_utf8(status.stdout).unwrap();
    for sub in ["train", "sweep", "grid", "report", "escape", "gen-data"] {
        assert!(help.contains(sub), "help lacks {sub}");
    }
    let status = Command::new(exe).args(["grid", "--bogus"]).status().unwrap();
    assert_eq!(status.code(), Some(EXIT_USAGE));
}

#[test]
fn grid_then_report_then_resume() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "grid.json", SMALL_GRID);
    let out = dir.path().join("out");
    let o = out.to_str().unwrap();
    assert_eq!(run(&["grid", "-c", &cfg, "-o", o]), EXIT_OK);
    for f in [
        "config.json",
        "provenance.json",
        "table_linear.csv",
        "linear_summary_stats.csv",
        "linear_dolan_more.csv",
        "linear_friedman.txt",
        "linear_table.txt",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let runs = std::fs::read_dir(out.join("runs")).unwrap().count();
    // 12 run records plus 2 learning-rate curves each
    assert_eq!(runs, 12 * 3);
    let table = std::fs::read_to_string(out.join("table_linear.csv")).unwrap();
    assert!(table.starts_with("experiment,ce,f0-05,el"));

    let provenance = |p: &Path| -> serde_json::Value {
        serde_json::from_str(&std::fs::read_to_string(p.join("provenance.json")).unwrap()).unwrap()
    };
    assert_eq!(provenance(&out)["runs_trained"], 12);
    assert_eq!(run(&["grid", "-c", &cfg, "-o", o]), EXIT_OK);
    assert_eq!(provenance(&out)["runs_trained"], 0);
    assert_eq!(provenance(&out)["runs_resumed"], 12);
    assert_eq!(std::fs::read_to_string(out.join("table_linear.csv")).unwrap(), table);

    let report_dir = dir.path().join("again");
    std::fs::create_dir_all(&report_dir).unwrap();
    let copied = report_dir.join("t.csv");
    std::fs::copy(out.join("table_linear.csv"), &copied).unwrap();
    let r = report_dir.to_str().unwrap();
    assert_eq!(
        run(&[
            "report",
            "-c",
            &cfg,
            "-o",
            r,
            "--table",
            copied.to_str().unwrap(),
            "--baseline",
            "el"
        ]),
        EXIT_OK
    );
    let stats = std::fs::read_to_string(report_dir.join("summary_stats.csv")).unwrap();
    let el = stats.lines().find(|l| l.starts_with("el,")).unwrap();
    assert_eq!(el.split(',').nth(2), Some("0"), "{stats}");
}

#[test]
fn seed_override_runs_a_single_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "grid.json", SMALL_GRID);
    let out = dir.path().join("out");
    assert_eq!(
        run(&["grid", "-c", &cfg, "-o", out.to_str().unwrap(), "-s", "9"]),
        EXIT_OK
    );
    let keys: Vec<String> = std::fs::read_dir(out.join("runs"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".json"))
        .collect();
    assert_eq!(keys.len(), 6);
    assert!(keys.iter().all(|k| k.contains("__s9")));
}

#[test]
fn diverging_grid_is_partial_or_total_failure() {
    let dir = tempfile::tempdir().unwrap();
    let csv = "x0,x1,label\n".to_string()
        + &(0..40)
            .map(|i| format!("{}e200,{}e199,{}\n", i % 7 + 1, i % 5 + 1, i % 2))
            .collect::<String>();
    write(dir.path(), "huge.csv", &csv);
    let grid = r#"{
      "datasets": [{"kind": "csv", "path": "huge.csv", "has_header": true}],
      "normalize": false,
      "methods": [{"name": "ce", "loss": {"name": "ce"}}],
      "trainer": {"epochs": 3, "batch_size": 4},
      "lrs": [1000.0],
      "seeds": [1]
    }"#;
    let cfg = write(dir.path(), "grid.json", grid);
    let out = dir.path().join("out");
    assert_eq!(run(&["grid", "-c", &cfg, "-o", out.to_str().unwrap()]), EXIT_FAILED);

    let mixed = SMALL_GRID.replace(
        r#""datasets": ["#,
        r#""normalize": false, "datasets": [{"kind": "csv", "path": "huge.csv", "has_header": true},"#,
    );
    let mixed = mixed.replace(r#""lrs": [0.05, 0.01]"#, r#""lrs": [1000.0]"#);
    let cfg = write(dir.path(), "mixed.json", &mixed);
    let out = dir.path().join("mixed");
    assert_eq!(run(&["grid", "-c", &cfg, "-o", out.to_str().unwrap()]), EXIT_PARTIAL);
}

#[test]
fn train_sweep_escape_and_gen_data_write_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let train = r#"{
      "dataset": {"kind": "blobs", "name": "t", "classes": 3, "per_class": 20, "dim": 2, "separation": 1.0, "seed": 4},
      "method": {"name": "f0..05", "schedule": "f0..05"},
      "trainer": {"epochs": 6, "batch_size": 8},
      "lrs": [0.05, 0.01],
      "snapshot_epochs": [1, 5]
    }"#;
    let cfg = write(dir.path(), "train.json", train);
    let out = dir.path().join("train");
    assert_eq!(run(&["train", "-c", &cfg, "-o", out.to_str().unwrap()]), EXIT_OK);
    for f in [
        "epochs.csv",
        "summary.json",
        "model.ckpt",
        "snapshots.csv",
        "bucket_transition.csv",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let epochs = std::fs::read_to_string(out.join("epochs.csv")).unwrap();
    assert!(epochs.starts_with("epoch,alpha,beta,F,train_loss,train_acc,val_acc,test_acc"));
    assert_eq!(epochs.lines().count(), 7);

    let out = dir.path().join("sweep");
    assert_eq!(run(&["sweep", "-c", &cfg, "-o", out.to_str().unwrap()]), EXIT_OK);
    assert!(out.join("sweep.json").exists());

    let escape = std::fs::read_to_string(configs().join("escape_double_well.json"))
        .unwrap()
        .replace("\"trajectories\": 4000", "\"trajectories\": 200");
    let cfg = write(dir.path(), "escape.json", &escape);
    let out = dir.path().join("escape");
    assert_eq!(run(&["escape", "-c", &cfg, "-o", out.to_str().unwrap()]), EXIT_OK);
    let csv = std::fs::read_to_string(out.join("escape.csv")).unwrap();
    assert!(csv.starts_with("method,beta,trace_term,ee_estimate,ee_simulated,stderr"));

    let out = dir.path().join("data");
    let cfg = configs().join("grid.json");
    assert_eq!(
        run(&["gen-data", "-c", cfg.to_str().unwrap(), "-o", out.to_str().unwrap()]),
        EXIT_OK
    );
    assert_eq!(std::fs::read_dir(&out).unwrap().count(), 3);
}
