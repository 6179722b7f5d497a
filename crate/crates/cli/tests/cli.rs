use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use stylepo::seed::sha256_hex;

const TINY: &str = r#"
seed = 3
[corpus]
per_style = 70
styles = ["formal", "shout"]
[paraphrase]
d_model = 16
n_layers = 1
n_heads = 2
epochs = 1
[sft]
d_model = 16
n_layers = 1
n_heads = 2
epochs = 1
[po]
epochs = 1
candidates_per_prompt = 2
pair_margin = 0.0
"#;

struct Workspace {
    dir: tempfile::TempDir,
    config: PathBuf,
}

impl Workspace {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, config).unwrap();
        Workspace { dir, config: path }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, run_dir: &str, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_stylepo"))
            .arg("--config")
            .arg(&self.config)
            .arg("--run-dir")
            .arg(self.path(run_dir))
            .args(args)
            .current_dir(self.dir.path())
            .output()
            .unwrap()
    }

    fn ok(&self, run_dir: &str, args: &[&str]) {
        let out = self.run(run_dir, args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }

    fn s(&self, rel: &str) -> String {
        self.path(rel).display().to_string()
    }

    /// Corpus, data, paraphraser, transfer model and classifier.
    fn base_models(&self) {
        self.ok("corpus", &["gen-corpus"]);
        self.ok("data", &["build-data", "--corpus", &self.s("corpus/corpus.jsonl")]);
        self.ok("para", &["train", "sft-paraphrase", "--data", &self.s("data/paraphrase.jsonl")]);
        self.ok("sft", &["train", "sft-transfer", "--data", &self.s("data/transfer.jsonl")]);
        self.ok("reward", &["train", "reward-classifier", "--corpus", &self.s("corpus/corpus.jsonl")]);
    }
}

fn manifest_lines(dir: &Path) -> Vec<Value> {
    std::fs::read_to_string(dir.join("manifest.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn unknown_config_key_exits_2_and_names_the_key() {
    let ws = Workspace::new("[sft]\nlearnig_rate = 0.1\n");
    let out = ws.run("corpus", &["gen-corpus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("learnig_rate"), "{}", stderr(&out));

    let ws = Workspace::new("[po]\nbetta = 0.1\n");
    let out = ws.run("po", &["train-po", "--algo", "dpo", "--sft", "x", "--reward", "y", "--data", "z"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("betta"), "{}", stderr(&out));
}

#[test]
fn unknown_style_exits_2() {
    let ws = Workspace::new("[corpus]\nstyles = [\"formal\", \"pirate\"]\n");
    let out = ws.run("corpus", &["gen-corpus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("pirate"));
}

#[test]
fn missing_input_exits_3() {
    let ws = Workspace::new("");
    let out = ws.run("data", &["build-data", "--corpus", "no/such/corpus.jsonl"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn divergence_exits_4() {
    let ws = Workspace::new(&TINY.replace("[sft]\n", "[sft]\nlearning_rate = 1e300\n"));
    ws.ok("corpus", &["gen-corpus"]);
    ws.ok("data", &["build-data", "--corpus", &ws.s("corpus/corpus.jsonl")]);
    let out = ws.run("sft", &["train", "sft-transfer", "--data", &ws.s("data/transfer.jsonl")]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
}

#[test]
fn corpus_generation_is_seeded_and_recorded() {
    let ws = Workspace::new(TINY);
    ws.ok("a", &["gen-corpus"]);
    ws.ok("b", &["gen-corpus"]);
    ws.ok("c", &["--seed", "4", "gen-corpus"]);
    let read = |d: &str| std::fs::read(ws.path(d).join("corpus.jsonl")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));

    let lines = manifest_lines(&ws.path("a"));
    assert_eq!(lines.len(), 1);
    let m = &lines[0];
    assert_eq!(m["command"], "gen-corpus");
    assert_eq!(m["seed"], 3);
    assert_eq!(manifest_lines(&ws.path("c"))[0]["seed"], 4);
    assert_eq!(m["config"]["corpus"]["per_style"], 70);
    let outputs = m["outputs"].as_array().unwrap();
    let corpus = outputs
        .iter()
        .find(|o| o["path"].as_str().unwrap().ends_with("corpus.jsonl"))
        .unwrap();
    assert_eq!(corpus["sha256"], sha256_hex(&read("a")).as_str());
    assert!(m["inputs"].as_array().unwrap()[0]["path"].as_str().unwrap().ends_with("run.toml"));

    // a second run into the same directory appends
    ws.ok("a", &["gen-corpus"]);
    assert_eq!(manifest_lines(&ws.path("a")).len(), 2);
}

#[test]
fn run_dir_defaults_to_the_environment_then_runs() {
    let ws = Workspace::new(TINY);
    let out = Command::new(env!("CARGO_BIN_EXE_stylepo"))
        .args(["--config", &ws.s("run.toml"), "gen-corpus"])
        .env("STYLEPO_RUN_DIR", ws.path("env"))
        .current_dir(ws.dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(ws.path("env/gen-corpus/corpus.jsonl").exists());
    let out = Command::new(env!("CARGO_BIN_EXE_stylepo"))
        .args(["--config", &ws.s("run.toml"), "gen-corpus"])
        .env_remove("STYLEPO_RUN_DIR")
        .current_dir(ws.dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(ws.path("runs/gen-corpus/corpus.jsonl").exists());
}

#[test]
fn long_inputs_are_segmented_and_regrouped() {
    let ws = Workspace::new(TINY);
    ws.base_models();
    let long = "The quiet farmer carried a heavy basket near the old bridge, then the children followed him home. "
        .repeat(3);
    let lines = [
        serde_json::json!({"id": "long", "text": long.trim(), "style": "formal"}),
        serde_json::json!({"id": "short", "text": "THE DOG SLEPT!", "style": "shout"}),
    ];
    let input = ws.path("inputs.jsonl");
    std::fs::write(&input, lines.iter().map(|l| format!("{l}\n")).collect::<String>()).unwrap();
    ws.ok(
        "transfer",
        &[
            "transfer",
            "--input",
            &ws.s("inputs.jsonl"),
            "--paraphraser",
            &ws.s("para/model"),
            "--model",
            &ws.s("sft/model"),
            "--target",
            "shout",
        ],
    );
    let records = stylepo::eval::read_records(&ws.path("transfer/records.jsonl")).unwrap();
    assert_eq!(records.len(), 1, "the input already in the target style is skipped");
    assert_eq!(records[0].id, "long");
    assert_eq!(records[0].source_text, long.trim());
    assert_eq!(records[0].target_style, "shout");
    let segments: Value = serde_json::from_slice(&std::fs::read(ws.path("transfer/segments.json")).unwrap()).unwrap();
    assert!(segments["long"].as_u64().unwrap() >= 2, "{segments}");
    let warnings = manifest_lines(&ws.path("transfer"))[0]["warnings"].clone();
    assert!(warnings.to_string().contains("short"), "{warnings}");

    let out = ws.run(
        "bad-target",
        &[
            "transfer",
            "--input",
            &ws.s("inputs.jsonl"),
            "--paraphraser",
            &ws.s("para/model"),
            "--model",
            &ws.s("sft/model"),
            "--target",
            "pirate",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn evaluation_against_a_baseline_reports_paired_tests() {
    let ws = Workspace::new(TINY);
    ws.base_models();
    let transfer = |dir: &str, model: &str| {
        ws.ok(
            dir,
            &[
                "transfer",
                "--input",
                &ws.s("corpus/corpus.jsonl"),
                "--split",
                "test",
                "--paraphraser",
                &ws.s("para/model"),
                "--model",
                &ws.s(model),
            ],
        )
    };
    transfer("t1", "sft/model");
    ws.ok("ppo", &[
        "train-po",
        "--algo",
        "ppo",
        "--sft",
        &ws.s("sft/model"),
        "--reward",
        &ws.s("reward/reward"),
        "--data",
        &ws.s("data/transfer.jsonl"),
    ]);
    let stats: Value = serde_json::from_slice(&std::fs::read(ws.path("ppo/stats.json")).unwrap()).unwrap();
    assert_eq!(stats["epochs"].as_array().unwrap().len(), 2);
    transfer("t2", "ppo/model");
    ws.ok(
        "eval",
        &[
            "eval",
            "--records",
            &ws.s("t2/records.jsonl"),
            "--reward",
            &ws.s("reward/reward"),
            "--oracle",
            &ws.s("corpus/styles.json"),
            "--baseline",
            &ws.s("t1/records.jsonl"),
        ],
    );
    let report: Value = serde_json::from_slice(&std::fs::read(ws.path("eval/report.json")).unwrap()).unwrap();
    assert_eq!(report["mode"], "community");
    for metric in ["toward", "away", "confusion", "content", "oracle_confusion"] {
        let p = report["significance"][metric]["p_value"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&p), "{metric}: {p}");
    }
    assert!(report["baseline"]["joint"].is_number());
    let test_ids = std::fs::read_to_string(ws.path("corpus/corpus.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap())
        .filter(|v| v["split"] == "test")
        .count();
    assert!(report["n_records"].as_u64().unwrap() as usize <= test_ids);

    let out = ws.run(
        "eval-mismatch",
        &[
            "eval",
            "--records",
            &ws.s("t2/records.jsonl"),
            "--reward",
            &ws.s("reward/reward"),
            "--baseline",
            &ws.s("transfer-none.jsonl"),
        ],
    );
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn per_style_models_transfer_with_the_rule_neutralizer() {
    let ws = Workspace::new(&TINY.replace("[po]\n", "[transfer]\nper_style_models = true\n[po]\n"));
    ws.ok("corpus", &["gen-corpus"]);
    ws.ok("data", &["build-data", "--corpus", &ws.s("corpus/corpus.jsonl")]);
    ws.ok("sft", &["train", "sft-transfer", "--data", &ws.s("data/transfer.jsonl")]);
    for style in ["formal", "shout"] {
        assert!(ws.path(&format!("sft/model/{style}/params.bin")).exists());
    }
    ws.ok(
        "transfer",
        &[
            "transfer",
            "--input",
            &ws.s("corpus/corpus.jsonl"),
            "--split",
            "test",
            "--rule-neutralizer",
            "--model",
            &ws.s("sft/model"),
        ],
    );
    let records = stylepo::eval::read_records(&ws.path("transfer/records.jsonl")).unwrap();
    assert!(!records.is_empty());
    for r in &records {
        assert_eq!(r.neutral.as_deref(), Some(stylepo::paraphraser::neutralize(&r.source_text).as_str()));
    }

    // a learned paraphraser and the rule-based one are exclusive
    let out = ws.run(
        "both",
        &[
            "transfer",
            "--input",
            &ws.s("corpus/corpus.jsonl"),
            "--rule-neutralizer",
            "--paraphraser",
            &ws.s("sft/model/formal"),
            "--model",
            &ws.s("sft/model"),
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    ws.ok("reward", &["train", "reward-classifier", "--corpus", &ws.s("corpus/corpus.jsonl")]);
    let out = ws.run(
        "po",
        &[
            "train-po",
            "--algo",
            "cpo",
            "--sft",
            &ws.s("sft/model"),
            "--reward",
            &ws.s("reward/reward"),
            "--data",
            &ws.s("data/transfer.jsonl"),
        ],
    );
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}
