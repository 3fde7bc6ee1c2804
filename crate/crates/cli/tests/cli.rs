use std::path::Path;
use std::process::Command;

use serde_json::Value;

fn kkt(args: &[&str], envs: &[(&str, &str)]) -> Value {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_kkt"));
    cmd.args(args).env_remove("KKT_SEED");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "kkt {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("kkt {args:?} printed invalid JSON: {e}"))
}

fn kkt_fails(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_kkt"))
        .args(args)
        .env_remove("KKT_SEED")
        .output()
        .unwrap();
    assert!(!out.status.success(), "kkt {args:?} should fail");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"{"d_model": 8, "heads": 2, "layers": 1, "d_ff": 16, "max_len": 96,
  "k": 2, "p": 8, "batch": 8, "warmup": 5, "epochs": 2, "nli_epochs": 1, "nli_lr": 0.003}"#;

struct Work {
    dir: tempfile::TempDir,
}

impl Work {
    fn new() -> Self {
        let w = Work {
            dir: tempfile::tempdir().unwrap(),
        };
        std::fs::write(w.path("tiny.json"), TINY).unwrap();
        let train = w.path("train");
        let dev = w.path("dev");
        kkt(
            &[
                "gen-data",
                "--seed",
                "3",
                "--n",
                "24",
                "--mode",
                "mixed",
                "--out",
                s(&train),
            ],
            &[],
        );
        kkt(
            &[
                "gen-data",
                "--seed",
                "4",
                "--n",
                "9",
                "--mode",
                "mixed",
                "--split",
                "dev",
                "--out",
                s(&dev),
            ],
            &[],
        );
        w
    }

    fn path(&self, rel: &str) -> std::path::PathBuf {
        self.dir.path().join(rel)
    }

    fn train(&self, out: &str, envs: &[(&str, &str)]) -> Value {
        kkt(
            &[
                "train",
                "--data",
                s(&self.path("train/dataset.json")),
                "--dev",
                s(&self.path("dev/dataset.json")),
                "--kg",
                s(&self.path("train/kg.tsv")),
                "--nli",
                s(&self.path("train/nli.jsonl")),
                "--config",
                s(&self.path("tiny.json")),
                "--out",
                s(&self.path(out)),
            ],
            envs,
        )
    }
}

#[test]
fn gen_data_writes_every_companion_file() {
    let w = Work::new();
    for f in ["dataset.json", "kg.tsv", "surface.tsv", "nli.jsonl", "planted.json"] {
        assert!(w.path("train").join(f).is_file(), "{f}");
    }
    let again = kkt(
        &["gen-data", "--n", "24", "--mode", "mixed", "--out", s(&w.path("again"))],
        &[("KKT_SEED", "3")],
    );
    assert_eq!(again["seed"], 3);
    assert_eq!(
        std::fs::read(w.path("again/dataset.json")).unwrap(),
        std::fs::read(w.path("train/dataset.json")).unwrap()
    );
    assert!(kkt_fails(&[
        "gen-data",
        "--seed",
        "1",
        "--n",
        "0",
        "--mode",
        "mixed",
        "--out",
        s(&w.path("x"))
    ])
    .contains("Error"));
}

#[test]
fn train_eval_score_and_sweep_round_trip() {
    let w = Work::new();
    let log = w.train("run", &[]);
    assert_eq!(log["epochs"].as_array().unwrap().len(), 2);
    let ckpt = w.path("run/best.kktc");
    assert!(ckpt.is_file());
    assert_eq!(log["checkpoint"].as_str().unwrap(), s(&ckpt));

    let (dev, kg) = (w.path("dev/dataset.json"), w.path("train/kg.tsv"));
    let eval_args = ["eval", "--ckpt", s(&ckpt), "--data", s(&dev), "--kg", s(&kg)];
    let report = kkt(&eval_args, &[]);
    assert_eq!(report["n"], 9);
    let acc = report["accuracy"].as_f64().unwrap();
    assert_eq!(acc, report["n_plus"].as_f64().unwrap() / 9.0);
    assert_eq!(kkt(&eval_args, &[]), report);

    let mut rewired = eval_args.to_vec();
    rewired.extend(["--ablation", "keyturns-only"]);
    assert_eq!(kkt(&rewired, &[])["n"], 9);
    let mut wrong = eval_args.to_vec();
    wrong.extend(["--ablation", "base"]);
    kkt_fails(&wrong);

    let turns = kkt(
        &[
            "score-turns",
            "--ckpt",
            s(&ckpt),
            "--data",
            s(&w.path("dev/dataset.json")),
            "--example-id",
            "syn-mixed-dev-4-0",
        ],
        &[],
    );
    let options = turns["options"].as_array().unwrap();
    assert_eq!(options.len(), 3);
    let n_turns = turns["turns"].as_array().unwrap().len();
    for o in options {
        let scores = o["scores"].as_array().unwrap();
        assert_eq!(scores.len(), n_turns);
        assert!(scores.iter().all(|v| v.as_f64().unwrap() <= 0.0));
        assert_eq!(o["key_turns"].as_array().unwrap().len(), 2.min(n_turns));
    }

    std::fs::write(w.path("grid.json"), r#"{"k": [2, 6], "p": [30]}"#).unwrap();
    let rows = kkt(
        &[
            "sweep",
            "--grid",
            s(&w.path("grid.json")),
            "--ckpt",
            s(&ckpt),
            "--data",
            s(&w.path("dev/dataset.json")),
            "--kg",
            s(&w.path("train/kg.tsv")),
            "--out",
            s(&w.path("sweep.json")),
        ],
        &[],
    );
    assert_eq!(rows["rows"].as_array().unwrap().len(), 2);
    let written: Value = serde_json::from_str(&std::fs::read_to_string(w.path("sweep.json")).unwrap()).unwrap();
    assert_eq!(written, rows);
}

#[test]
fn seed_variable_overrides_the_config() {
    let w = Work::new();
    let mut cfg: Value = serde_json::from_str(TINY).unwrap();
    cfg["seed"] = 5.into();
    std::fs::write(w.path("tiny.json"), cfg.to_string()).unwrap();
    let pinned = w.train("a", &[]);
    cfg["seed"] = 0.into();
    std::fs::write(w.path("tiny.json"), cfg.to_string()).unwrap();
    let from_env = w.train("b", &[("KKT_SEED", "5")]);
    let plain = w.train("c", &[]);
    assert_eq!(pinned["checkpoint_sha256"], from_env["checkpoint_sha256"]);
    assert_ne!(plain["checkpoint_sha256"], from_env["checkpoint_sha256"]);
}

#[test]
fn retrieve_lists_ranked_facts() {
    let dir = tempfile::tempdir().unwrap();
    let kg = dir.path().join("kg.tsv");
    std::fs::write(&kg, "atlocation\tbike\tstreet\t2.0\natlocation\tspoon\tkitchen\t2.0\n").unwrap();
    let v = kkt(
        &[
            "retrieve",
            "--kg",
            s(&kg),
            "--text",
            "M: I rode my bike .",
            "--top-p",
            "5",
        ],
        &[],
    );
    let hits = v["results"].as_array().unwrap();
    assert_eq!(hits.len(), 1);
    assert_eq!(hits[0]["fact"], "bike is found at street");
    assert_eq!(hits[0]["relation"], "atlocation");
    let none = kkt(&["retrieve", "--kg", s(&kg), "--text", "bike", "--top-p", "0"], &[]);
    assert!(none["results"].as_array().unwrap().is_empty());
    kkt_fails(&["retrieve", "--kg", s(&dir.path().join("missing.tsv")), "--text", "bike"]);
}
