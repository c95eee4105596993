use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn podnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_podnet"))
        .args(args)
        .env_remove("PODNET_SEED")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const TINY: &str = r#"{"train": {"epochs": 2, "batch_size": 4, "lstm_hidden": 6, "mlp_hidden": [6]}}"#;

struct Fixture {
    dir: TempDir,
    data: PathBuf,
    spec: PathBuf,
    config: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("demo.jsonl");
    let out = podnet(&["gen-data", "--env", "waypoint2d", "--n", "12", "--seed", "0", "--out", p(&data)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let config = dir.path().join("config.json");
    fs::write(&config, TINY).unwrap();
    Fixture {
        spec: dir.path().join("demo.env.json"),
        data,
        config,
        dir,
    }
}

fn trained(f: &Fixture, name: &str) -> PathBuf {
    let out_dir = f.dir.path().join(name);
    let out = podnet(&[
        "train", "--config", p(&f.config), "--data", p(&f.data), "--out", p(&out_dir), "--quiet",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    out_dir
}

#[test]
fn gen_data_writes_one_line_per_trajectory_and_a_spec() {
    let f = fixture();
    assert_eq!(fs::read_to_string(&f.data).unwrap().lines().count(), 12);
    let spec: serde_json::Value = serde_json::from_str(&fs::read_to_string(&f.spec).unwrap()).unwrap();
    assert_eq!(spec["name"], "waypoint2d");
    assert_eq!(spec["waypoints"].as_array().unwrap().len(), 3);
}

#[test]
fn gen_data_rejects_unknown_env_with_exit_2() {
    let out = podnet(&["gen-data", "--env", "maze", "--n", "3", "--seed", "0", "--out", "x.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    let msg = stderr(&out);
    assert!(msg.contains("waypoint2d") && msg.contains("primitive1d"), "{msg}");
}

#[test]
fn gen_data_reports_unwritable_output_with_exit_1() {
    let out = podnet(&[
        "gen-data", "--env", "primitive1d", "--n", "2", "--seed", "0", "--out", "/nonexistent/dir/x.jsonl",
    ]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
}

#[test]
fn missing_arguments_are_usage_errors() {
    assert_eq!(podnet(&["gen-data", "--env", "waypoint2d"]).status.code(), Some(2));
    assert_eq!(podnet(&["train"]).status.code(), Some(2));
}

#[test]
fn train_writes_contract_files_and_is_byte_deterministic() {
    let f = fixture();
    let a = trained(&f, "run_a");
    let b = trained(&f, "run_b");
    for name in ["checkpoint.json", "history.csv", "config.resolved.json"] {
        assert!(a.join(name).is_file(), "{name} missing");
    }
    let history = fs::read(a.join("history.csv")).unwrap();
    assert_eq!(history, fs::read(b.join("history.csv")).unwrap());
    assert_eq!(
        fs::read(a.join("checkpoint.json")).unwrap(),
        fs::read(b.join("checkpoint.json")).unwrap()
    );
    let text = String::from_utf8(history).unwrap();
    assert!(text.starts_with("epoch,total,odc,bc,kl,heldout_bc,tau\n"));
    assert_eq!(text.lines().count(), 3);

    let resolved: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("config.resolved.json")).unwrap()).unwrap();
    assert_eq!(resolved["train"]["epochs"], 2);
    assert_eq!(resolved["train"]["beta"], 0.03, "defaults are materialized");
    assert_eq!(resolved["planner"]["beam_width"], 8);
}

#[test]
fn train_rejects_unknown_config_keys() {
    let f = fixture();
    let bad = f.dir.path().join("bad.json");
    fs::write(&bad, r#"{"train": {"epochs": 1, "learning_rate": 0.1}}"#).unwrap();
    let out = podnet(&["train", "--config", p(&bad), "--data", p(&f.data), "--out", p(f.dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("learning_rate"), "{}", stderr(&out));

    fs::write(&bad, r#"{"trian": {}}"#).unwrap();
    let out = podnet(&["train", "--config", p(&bad), "--data", p(&f.data), "--out", p(f.dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("trian"));
}

#[test]
fn train_reports_bad_data_with_exit_1() {
    let f = fixture();
    let broken = f.dir.path().join("broken.jsonl");
    fs::write(&broken, "{\"id\": \"x\"}\n").unwrap();
    let out = podnet(&[
        "train", "--config", p(&f.config), "--data", p(&broken), "--out", p(&f.dir.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("line 1"), "{}", stderr(&out));
}

#[test]
fn seed_precedence_is_flag_then_env_then_config() {
    let f = fixture();
    let config = f.dir.path().join("seeded.json");
    fs::write(&config, r#"{"train": {"epochs": 1, "lstm_hidden": 4, "mlp_hidden": [4], "seed": 5}}"#).unwrap();
    let run = |extra: &[&str], env: Option<&str>, name: &str| -> u64 {
        let out_dir = f.dir.path().join(name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_podnet"));
        cmd.args(["train", "--quiet", "--config", p(&config), "--data", p(&f.data), "--out", p(&out_dir)])
            .args(extra)
            .env_remove("PODNET_SEED");
        if let Some(v) = env {
            cmd.env("PODNET_SEED", v);
        }
        let out = cmd.output().unwrap();
        assert!(out.status.success(), "{}", stderr(&out));
        let resolved: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out_dir.join("config.resolved.json")).unwrap()).unwrap();
        resolved["train"]["seed"].as_u64().unwrap()
    };
    assert_eq!(run(&[], None, "c"), 5);
    assert_eq!(run(&[], Some("7"), "e"), 7);
    assert_eq!(run(&["--seed", "9"], Some("7"), "f"), 9);
}

#[test]
fn discover_k_degenerate_range_and_validation() {
    let f = fixture();
    let table = f.dir.path().join("k.csv");
    let out = podnet(&[
        "discover-k", "--config", p(&f.config), "--data", p(&f.data), "--kmin", "3", "--kmax", "3", "--out", p(&table),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("K_best=3"));
    let csv = fs::read_to_string(&table).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.starts_with("num_options,heldout_bc\n3,"));

    let out = podnet(&["discover-k", "--data", p(&f.data), "--kmin", "5", "--kmax", "3"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn segment_eval_plot_and_plan_round_trip() {
    let f = fixture();
    let run = trained(&f, "run");
    let ckpt = run.join("checkpoint.json");

    // Unlabeled copy of the data.
    let unlabeled = f.dir.path().join("unlabeled.jsonl");
    let stripped: String = fs::read_to_string(&f.data)
        .unwrap()
        .lines()
        .map(|line| {
            let mut v: serde_json::Value = serde_json::from_str(line).unwrap();
            v.as_object_mut().unwrap().remove("labels");
            format!("{v}\n")
        })
        .collect();
    fs::write(&unlabeled, stripped).unwrap();

    let labels = f.dir.path().join("labels.jsonl");
    let report = f.dir.path().join("report.json");
    let out = podnet(&[
        "segment", "--checkpoint", p(&ckpt), "--data", p(&unlabeled), "--out", p(&labels), "--report", p(&report),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(!report.exists());
    let first: serde_json::Value =
        serde_json::from_str(fs::read_to_string(&labels).unwrap().lines().next().unwrap()).unwrap();
    assert!(first["id"].is_string() && first["labels"].is_array());

    let out = podnet(&[
        "segment", "--checkpoint", p(&ckpt), "--data", p(&f.data), "--out", p(&labels), "--report", p(&report),
    ]);
    assert!(out.status.success());
    assert!(report.is_file());

    let out = podnet(&["segment", "--checkpoint", p(&ckpt), "--data", p(&f.data), "--out", p(&labels), "--stride", "3"]);
    assert_eq!(out.status.code(), Some(1));

    let eval_out = f.dir.path().join("eval.json");
    let out = podnet(&["eval", "--checkpoint", p(&ckpt), "--data", p(&f.data), "--out", p(&eval_out)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&eval_out).unwrap()).unwrap();
    for key in ["matched_accuracy", "nmi", "boundary_f1", "dynamics_option_sensitivity"] {
        assert!(v[key].is_number(), "{key} missing");
    }
    assert_eq!(podnet(&["eval", "--checkpoint", p(&ckpt), "--data", p(&unlabeled)]).status.code(), Some(1));

    let csv = f.dir.path().join("plot.csv");
    assert!(podnet(&["plot-data", "--data", p(&f.data), "--out", p(&csv)]).status.success());
    assert!(fs::read_to_string(&csv).unwrap().starts_with("id,step,s0,s1,true_label\n"));
    assert!(podnet(&["plot-data", "--data", p(&f.data), "--checkpoint", p(&ckpt), "--out", p(&csv)])
        .status
        .success());
    assert!(fs::read_to_string(&csv)
        .unwrap()
        .starts_with("id,step,raw_step,s0,s1,true_label,pred_label\n"));

    let plan_out = f.dir.path().join("plan.json");
    let trace_csv = f.dir.path().join("trace.csv");
    let out = podnet(&[
        "plan", "--checkpoint", p(&ckpt), "--goal", "8,2", "--start", "2,2", "--out", p(&plan_out),
        "--execute", p(&f.spec), "--trace-csv", p(&trace_csv),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&plan_out).unwrap()).unwrap();
    assert!(v["feasible"].is_boolean());
    let options = v["options"].as_array().unwrap().len();
    assert_eq!(v["predicted_states"].as_array().unwrap().len(), options * 5 + 1);
    assert!(fs::read_to_string(&trace_csv).unwrap().starts_with("step,s0,s1,a0,a1,option\n"));

    // Idempotent outputs.
    let again = f.dir.path().join("plan2.json");
    podnet(&["plan", "--checkpoint", p(&ckpt), "--goal", "8,2", "--start", "2,2", "--out", p(&again)]);
    assert_eq!(fs::read(&plan_out).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn dimension_mismatch_is_a_runtime_error() {
    let f = fixture();
    let run = trained(&f, "run");
    let other = f.dir.path().join("prim.jsonl");
    assert!(podnet(&["gen-data", "--env", "primitive1d", "--n", "2", "--seed", "1", "--out", p(&other)])
        .status
        .success());
    let out = podnet(&[
        "segment", "--checkpoint", p(&run.join("checkpoint.json")), "--data", p(&other), "--out",
        p(&f.dir.path().join("l.jsonl")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("dimension"), "{}", stderr(&out));

    let out = podnet(&["plan", "--checkpoint", p(&run.join("checkpoint.json")), "--goal", "1,2,3"]);
    assert_eq!(out.status.code(), Some(1));
}
