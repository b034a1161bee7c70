use std::path::Path;
use std::process::{Command, Output};

use radreport::config::RunConfig;
use radreport::data::{FeatureKind, VocabPolicy};
use radreport::model::ModelConfig;

fn radreport(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_radreport")).current_dir(dir).args(args).output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

/// Small corpus and narrow model; paths stay at their relative defaults.
fn write_config(dir: &Path, records: usize, epochs: usize) {
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig {
        d_model: 32,
        n_heads: 4,
        n_patches: 18,
        feature_dim: 32,
        feature_kind: FeatureKind::Raw,
        d_report: 16,
        n_retrieved: 4,
        ..ModelConfig::default()
    };
    cfg.vocab.policy = VocabPolicy::MinFrequency(1);
    cfg.train.learning_rate = 1e-3;
    cfg.train.epochs = epochs;
    cfg.train.skip_validation = true;
    cfg.synth.num_records = records;
    std::fs::write(dir.join("run.toml"), cfg.to_toml()).unwrap();
}

#[test]
fn pipeline_round_trip_overfits_the_training_split() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_config(d, 16, 200);
    let cfg = ["--config", "run.toml"];
    assert!(ok(&radreport(d, &[&cfg[..], &["synth"]].concat())).contains("16 records"));
    assert!(d.join("data/corpus.jsonl").exists());
    ok(&radreport(d, &[&cfg[..], &["index"]].concat()));
    let summary = ok(&radreport(d, &[&cfg[..], &["train"]].concat()));
    let summary: serde_json::Value = serde_json::from_str(&summary).unwrap();
    assert_eq!(summary["epochs"], 200);
    assert!(d.join("checkpoints/train_log.jsonl").exists());

    let gens = ok(&radreport(d, &[&cfg[..], &["generate", "--split", "train", "--checkpoint", "checkpoints/last.ckpt"]].concat()));
    let gens = gens.trim();
    assert!(gens.ends_with("generations_train.jsonl"));
    let eval = ok(&radreport(d, &["evaluate", "--generations", gens, "--references", "data/corpus.jsonl"]));
    let eval: serde_json::Value = serde_json::from_str(&eval).unwrap();
    let bleu4 = eval["bleu4"].as_f64().unwrap();
    assert!(bleu4 > 0.9, "train-split BLEU-4 {bleu4}");

    let gates = ok(&radreport(d, &["gates", "--generations", gens]));
    assert!(gates.lines().next().unwrap().starts_with("class"));
    assert!(gates.contains("normality"));
}

#[test]
fn seed_override_controls_the_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_config(d, 12, 1);
    let corpus = |seed: &str| {
        ok(&radreport(d, &["--config", "run.toml", "--seed", seed, "synth"]));
        std::fs::read(d.join("data/corpus.jsonl")).unwrap()
    };
    let a = corpus("1");
    assert_eq!(a, corpus("1"));
    assert_ne!(a, corpus("2"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let code = |args: &[&str]| radreport(d, args).status.code().unwrap();
    // configuration and usage errors
    assert_eq!(code(&["synth"]), 2);
    assert_eq!(code(&["--config", "absent.toml", "synth"]), 2);
    std::fs::write(d.join("bad.toml"), "[model]\nwidth = 3\n").unwrap();
    assert_eq!(code(&["--config", "bad.toml", "synth"]), 2);
    assert_eq!(code(&["generate", "--split", "holdout"]), 2);
    write_config(d, 12, 1);
    assert_eq!(code(&["--config", "run.toml", "index"]), 2);

    // data errors
    std::fs::write(d.join("gens.jsonl"), "{\"id\": \"a\", \"text\": \"no effusion .\"}\n{\"id\": \"b\", \"text\": \"x\"}\n").unwrap();
    std::fs::write(d.join("refs.jsonl"), "{\"id\": \"a\", \"report\": \"no effusion .\"}\n").unwrap();
    let out = radreport(d, &["evaluate", "--generations", "gens.jsonl", "--references", "refs.jsonl"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing ids: b"));
    std::fs::write(d.join("ckpt.bin"), b"not a checkpoint").unwrap();
    ok(&radreport(d, &["--config", "run.toml", "synth"]));
    ok(&radreport(d, &["--config", "run.toml", "index"]));
    assert_eq!(code(&["--config", "run.toml", "generate", "--checkpoint", "ckpt.bin"]), 3);
}

#[test]
fn shipped_config_is_valid() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    let cfg = RunConfig::load(&path).unwrap();
    assert_eq!(cfg.model.n_patches, cfg.synth.n_patches);
    assert_eq!(cfg.model.feature_dim, cfg.synth.feature_dim);
}
