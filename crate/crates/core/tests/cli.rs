use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fga(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fga")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        Workspace { dir: tempfile::tempdir().unwrap() }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn write(&self, name: &str, text: &str) -> PathBuf {
        let p = self.path(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    /// Generates `train.jsonl`, `val.jsonl` and `run.json`.
    fn data(&self, extra: &str) {
        let spec = self.write("spec.json", &format!("{{\"count\": 24{extra}}}"));
        let out = fga(&["gen-data", "--spec", s(&spec), "--out", s(&self.path("train.jsonl")), "--seed", "1", "--config-out", s(&self.path("run.json"))]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        let out = fga(&["gen-data", "--spec", s(&spec), "--out", s(&self.path("val.jsonl")), "--seed", "2"]);
        assert_eq!(code(&out), 0);
    }

    fn train(&self, seed: &str, out: &str) -> Output {
        fga(&[
            "--json", "train", "--config", s(&self.path("run.json")), "--train", s(&self.path("train.jsonl")), "--val",
            s(&self.path("val.jsonl")), "--out", s(&self.path(out)), "--epochs", "2", "--seed", seed,
        ])
    }
}

#[test]
fn gen_data_is_deterministic_and_reports_the_count() {
    let ws = Workspace::new();
    let spec = ws.write("spec.json", "{\"count\": 30}");
    let a = fga(&["gen-data", "--spec", s(&spec), "--out", s(&ws.path("a.jsonl")), "--seed", "5"]);
    let b = fga(&["--json", "gen-data", "--spec", s(&spec), "--out", s(&ws.path("b.jsonl")), "--seed", "5"]);
    assert_eq!((code(&a), code(&b)), (0, 0));
    assert!(String::from_utf8_lossy(&a.stdout).contains("30 records"));
    assert_eq!(stdout_json(&b)["records"], 30);
    assert_eq!(std::fs::read(ws.path("a.jsonl")).unwrap(), std::fs::read(ws.path("b.jsonl")).unwrap());
    assert!(ws.path("a.vocab.json").exists());
}

#[test]
fn malformed_spec_leaves_no_output() {
    let ws = Workspace::new();
    for (k, text) in ["{\"count\": ", "{\"cuont\": 3}", "{\"candidates\": 4}"].iter().enumerate() {
        let spec = ws.write(&format!("bad{k}.json"), text);
        let out_path = ws.path(&format!("out{k}.jsonl"));
        let out = fga(&["gen-data", "--spec", s(&spec), "--out", s(&out_path)]);
        assert_eq!(code(&out), 1, "{text}");
        assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
        assert!(!out_path.exists());
        assert!(!out_path.with_extension("partial").exists());
    }
}

#[test]
fn sidecar_output_loads_for_training() {
    let ws = Workspace::new();
    let spec = ws.write("spec.json", "{\"count\": 12}");
    let out = fga(&[
        "gen-data", "--spec", s(&spec), "--out", s(&ws.path("d.jsonl")), "--sidecar", "feat.bin", "--config-out",
        s(&ws.path("run.json")),
    ]);
    assert_eq!(code(&out), 0);
    assert!(ws.path("feat.bin").exists());
    let out = fga(&[
        "train", "--config", s(&ws.path("run.json")), "--train", s(&ws.path("d.jsonl")), "--out", s(&ws.path("m.json")),
        "--epochs", "1",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_eval_analyze_end_to_end() {
    let ws = Workspace::new();
    ws.data("");
    let out = ws.train("3", "m.json");
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout_json(&out)["epochs"].as_array().unwrap().len(), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("epoch 2"));
    let log: Value = serde_json::from_str(&std::fs::read_to_string(ws.path("m.log.json")).unwrap()).unwrap();
    assert!(log["epochs"][0]["train_loss"].as_f64().unwrap().is_finite());
    assert!(ws.path("m.bin").exists());

    let val = ws.path("val.jsonl");
    let out = fga(&["--json", "eval", "--model", s(&ws.path("m.json")), "--data", s(&val), "--csv", s(&ws.path("r.csv"))]);
    assert_eq!(code(&out), 0);
    let report = stdout_json(&out);
    assert_eq!(report["ranks"].as_array().unwrap().len(), 24);
    assert!(report["mrr"].as_f64().unwrap() > 0.0);
    assert!(std::fs::read_to_string(ws.path("r.csv")).unwrap().starts_with("metric,value"));

    assert_eq!(code(&ws.train("4", "n.json")), 0);
    let both = format!("{},{}", s(&ws.path("m.json")), s(&ws.path("n.json")));
    let out = fga(&["--json", "eval", "--model", &both, "--data", s(&val)]);
    assert_eq!(code(&out), 0);
    assert_ne!(stdout_json(&out)["ranks"], Value::Null);

    let out = fga(&["eval", "--model", s(&ws.path("m.json")), "--data", s(&val), "--ndcg"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("dense_relevance"));

    let out = fga(&["--json", "analyze", "importance", "--model", s(&ws.path("m.json")), "--data", s(&val)]);
    assert_eq!(code(&out), 0);
    for row in stdout_json(&out)["rows"].as_array().unwrap() {
        let total: f64 = row["cues"].as_array().unwrap().iter().map(|c| c["score"].as_f64().unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    let first_id = {
        let text = std::fs::read_to_string(&val).unwrap();
        let v: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        v["record_id"].as_str().unwrap().to_string()
    };
    let out = fga(&["analyze", "attention", "--model", s(&ws.path("m.json")), "--data", s(&val), "--record", &first_id]);
    assert_eq!(code(&out), 0);
    let dump = stdout_json(&out);
    let lengths: Vec<usize> = dump["beliefs"].as_array().unwrap().iter().map(|b| b["belief"].as_array().unwrap().len()).collect();
    // image 8 regions, question 6, caption 4, 10 answers, two rounds of history (6 each).
    assert_eq!(lengths, vec![8, 6, 4, 10, 6, 6, 6, 6]);
    let out = fga(&["analyze", "attention", "--model", s(&ws.path("m.json")), "--data", s(&val), "--record", "nope"]);
    assert_eq!(code(&out), 1);

    let out = fga(&[
        "analyze", "prune", "--model", s(&ws.path("m.json")), "--data", s(&val), "--threshold", "0", "--out",
        s(&ws.path("p.json")),
    ]);
    assert_eq!(code(&out), 0);
    assert_eq!(std::fs::read(ws.path("m.bin")).unwrap(), std::fs::read(ws.path("p.bin")).unwrap());
    let manifest = |n: &str| std::fs::read_to_string(ws.path(n)).unwrap().replace("\"p.bin\"", "\"m.bin\"");
    assert_eq!(manifest("m.json"), manifest("p.json"));
}

#[test]
fn training_twice_gives_identical_checkpoints() {
    let ws = Workspace::new();
    ws.data("");
    assert_eq!(code(&ws.train("1", "a.json")), 0);
    assert_eq!(code(&ws.train("1", "b.json")), 0);
    assert_eq!(std::fs::read(ws.path("a.bin")).unwrap(), std::fs::read(ws.path("b.bin")).unwrap());
}

#[test]
fn train_usage_and_data_errors() {
    let ws = Workspace::new();
    ws.data("");
    let run = s(&ws.path("run.json")).to_string();
    let out = fga(&["train", "--config", &run, "--train", s(&ws.path("missing.jsonl")), "--vocab", s(&ws.path("train.vocab.json")), "--out", s(&ws.path("m.json"))]);
    assert_eq!(code(&out), 2);
    let out = fga(&["train", "--config", &run, "--train", s(&ws.path("train.jsonl")), "--out", s(&ws.path("m.json")), "--resume", s(&ws.path("m.json"))]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--resume is not supported"));
    let out = fga(&["train", "--config", &run]);
    assert_eq!(code(&out), 1);
    let out = fga(&["frobnicate"]);
    assert_eq!(code(&out), 1);
    assert_eq!(code(&fga(&["--help"])), 0);
}

#[test]
fn gradcheck_passes_for_two_seeds_and_catches_corruption() {
    for seed in ["0", "1"] {
        let out = fga(&["--json", "gradcheck", "--dims", "tiny", "--seed", seed]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
        let r = stdout_json(&out);
        assert!(r["max_rel_error"].as_f64().unwrap() < 1e-4);
        assert_eq!(r["passed"], true);
    }
    let out = fga(&["gradcheck", "--corrupt", "1.01"]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}
