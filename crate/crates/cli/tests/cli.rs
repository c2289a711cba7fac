use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn srmt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_srmt")).args(args).env_remove("SRMT_SEED").output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn tiny_config(dir: &Path, core: &str) -> std::path::PathBuf {
    let cfg = json!({
        "name": "tiny",
        "mode": "classical",
        "maps": {"kind": "bottleneck", "lengths": [3, 4]},
        "core": core,
        "reward": "directional",
        "episode_length": 24,
        "ppo": {"batch_size": 128, "minibatch_size": 128, "workers": 1, "envs_per_worker": 2,
                "total_steps": 384, "kl_sample": 128},
        "seed": 5,
        "output_dir": "run",
        "checkpoint_every": 2
    });
    let path = dir.join("tiny.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn gen_maps_bottleneck_writes_sixteen_documents() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("maps");
    ok(&srmt(&["gen-maps", "--kind", "bottleneck", "--lengths", "3..30", "--count", "16", "--out", p(&out)]));
    let manifest = read_json(&out.join("manifest.json"));
    let files = manifest["files"].as_array().unwrap();
    assert_eq!(files.len(), 16);
    for f in files {
        let doc = srmt::maps::MapDoc::from_json(&fs::read_to_string(out.join(f.as_str().unwrap())).unwrap()).unwrap();
        assert!(doc.to_grid().unwrap().is_connected());
    }
}

#[test]
fn gen_maps_random_maze_and_import() {
    let dir = tempfile::tempdir().unwrap();
    let r = dir.path().join("random");
    ok(&srmt(&["gen-maps", "--kind", "random", "--size", "20", "--density", "0.3", "--count", "10", "--out", p(&r)]));
    assert_eq!(read_json(&r.join("manifest.json"))["files"].as_array().unwrap().len(), 10);
    let m = dir.path().join("maze");
    ok(&srmt(&["gen-maps", "--kind", "maze", "--size", "21", "--count", "2", "--out", p(&m)]));

    let city = dir.path().join("city.map");
    fs::write(&city, "type octile\nheight 2\nwidth 3\nmap\n.T.\n...\n").unwrap();
    let i = dir.path().join("imported");
    ok(&srmt(&["gen-maps", "--kind", "movingai-import", "--in", p(&city), "--out", p(&i)]));
    let doc = srmt::maps::MapDoc::from_json(&fs::read_to_string(i.join("city.json")).unwrap()).unwrap();
    assert_eq!(doc.to_grid().unwrap().free_count(), 5);

    fs::write(&city, "type octile\nheight 3\nwidth 3\nmap\n.T.\n...\n").unwrap();
    let bad = srmt(&["gen-maps", "--kind", "movingai-import", "--in", p(&city), "--out", p(&i)]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("line 7"));
}

#[test]
fn bad_flags_and_missing_files_use_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = srmt(&["gen-maps", "--kind", "random", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--size"));
    let out = srmt(&["gen-maps", "--kind", "nope", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));

    let missing = dir.path().join("missing.ckpt");
    let out = srmt(&["eval", "--ckpt", p(&missing), "--sweep-corridors", "3..4", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.ckpt"));

    let out = srmt(&["train", "--config", p(&dir.path().join("none.json"))]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn invalid_config_lists_every_problem() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"mode": "classical", "core": "lstm", "reward": "directional", "extra": 1}"#).unwrap();
    let out = srmt(&["train", "--config", p(&path)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    for needle in ["lstm", "extra", "maps", "output_dir"] {
        assert!(err.contains(needle), "{needle} missing from {err}");
    }
}

#[test]
fn train_eval_and_analyze_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "srmt");
    ok(&srmt(&["train", "--config", p(&cfg)]));
    let run = dir.path().join("run");
    for d in ["configs", "checkpoints", "logs", "reports"] {
        assert!(run.join(d).is_dir(), "{d} missing");
    }
    let effective = srmt::config::ExperimentConfig::from_effective(&fs::read_to_string(run.join("configs/effective.json")).unwrap()).unwrap();
    assert_eq!(effective.seed, 5);
    let log = fs::read_to_string(run.join("logs/train.jsonl")).unwrap();
    let lines: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    for key in ["iteration", "lr", "kl", "policy_loss", "value_loss", "entropy", "csr"] {
        assert!(lines[0].get(key).is_some(), "{key} not logged");
    }
    for f in ["iter-000002.ckpt", "latest.ckpt", "final.ckpt"] {
        assert!(run.join("checkpoints").join(f).is_file(), "{f} missing");
    }

    let ckpt = run.join("checkpoints/final.ckpt");
    let ev = dir.path().join("eval");
    ok(&srmt(&[
        "eval", "--ckpt", p(&ckpt), "--sweep-corridors", "3..9", "--points", "3", "--seeds", "10", "--episodes", "1",
        "--record-memory", "--out", p(&ev),
    ]));
    let csv = fs::read_to_string(ev.join("reports/metrics.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 1 + 3 * 3, "{csv}");
    assert!(rows[1..].iter().all(|r| r.ends_with(",10")), "{csv}");
    assert_eq!(read_json(&ev.join("configs/eval.json"))["seeds"].as_array().unwrap().len(), 10);
    let traces: Vec<_> = fs::read_dir(ev.join("traces")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(traces.iter().filter(|t| t.extension().unwrap() == "csv").count(), 30);

    let record = traces.iter().find(|t| t.extension().unwrap() == "json").unwrap();
    let table = dir.path().join("analysis/trace.csv");
    ok(&srmt(&["analyze-memory", "--trace", p(record), "--out", p(&table)]));
    let text = fs::read_to_string(&table).unwrap();
    assert!(text.starts_with("step,agent_a,agent_b,cosine_distance,euclidean_distance,facing,first_goal"));

    // same seed, same reports
    let ev2 = dir.path().join("eval2");
    ok(&srmt(&[
        "eval", "--ckpt", p(&ckpt), "--sweep-corridors", "3..9", "--points", "3", "--seeds", "10", "--episodes", "1",
        "--out", p(&ev2),
    ]));
    assert_eq!(fs::read_to_string(ev2.join("reports/metrics.csv")).unwrap(), csv);

    // evaluating on a directory of maps
    let maps = dir.path().join("maps");
    ok(&srmt(&["gen-maps", "--kind", "bottleneck", "--lengths", "5,12", "--out", p(&maps)]));
    let ev3 = dir.path().join("eval3");
    ok(&srmt(&["eval", "--ckpt", p(&ckpt), "--maps", p(&maps), "--seeds", "2", "--episodes", "2", "--out", p(&ev3)]));
    let reports: Value = read_json(&ev3.join("reports/metrics.json"));
    assert_eq!(reports.as_array().unwrap().len(), 6);
}

#[test]
fn resume_continues_and_seed_env_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "attention");
    ok(&srmt(&["train", "--config", p(&cfg)]));
    let run = dir.path().join("run");
    let first = fs::read(run.join("checkpoints/final.ckpt")).unwrap();

    // resuming a finished run adds no iterations
    ok(&srmt(&["train", "--config", p(&cfg), "--resume", p(&run.join("checkpoints/final.ckpt"))]));
    assert_eq!(fs::read_to_string(run.join("logs/train.jsonl")).unwrap().lines().count(), 3);

    // resuming from iteration 2 reproduces the same final parameters
    ok(&srmt(&["train", "--config", p(&cfg), "--resume", p(&run.join("checkpoints/iter-000002.ckpt"))]));
    assert_eq!(fs::read(run.join("checkpoints/final.ckpt")).unwrap(), first);

    let other = Command::new(env!("CARGO_BIN_EXE_srmt"))
        .args(["train", "--config", p(&cfg)])
        .env("SRMT_SEED", "6")
        .output()
        .unwrap();
    ok(&other);
    assert_ne!(fs::read(run.join("checkpoints/final.ckpt")).unwrap(), first);
    assert_eq!(read_json(&run.join("configs/effective.json"))["seed"], 6);

    let bad = Command::new(env!("CARGO_BIN_EXE_srmt")).args(["train", "--config", p(&cfg)]).env("SRMT_SEED", "x").output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn shipped_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let text = fs::read_to_string(&path).unwrap();
        if let Err(e) = srmt::config::ExperimentConfig::from_json(&text) {
            panic!("{}: {e}", path.display());
        }
        n += 1;
    }
    assert!(n >= 3);
}
