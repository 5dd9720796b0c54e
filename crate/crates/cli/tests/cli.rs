use std::path::Path;
use std::process::{Command, Output};

fn qtgvqa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qtgvqa")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

const SMALL: &str = "\
type_counts = [8, 4, 4, 4, 4, 8]
feature_dim = 12
frames = 8
vocab_size = 8
motif_period = 2
type_dim = 4
d_model = 8
heads = 2
d_ff = 16
batch_size = 8
epochs = 1
dropout = 0.0
";

fn small_config(dir: &Path) -> String {
    let p = dir.join("small.toml");
    std::fs::write(&p, SMALL).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&qtgvqa(&[])), 1);
    assert_eq!(code(&qtgvqa(&["train", "--bogus"])), 1);
    assert_eq!(code(&qtgvqa(&["gen-data"])), 1);
    assert_eq!(code(&qtgvqa(&["--profile", "huge", "gen-data"])), 1);
    assert_eq!(code(&qtgvqa(&["--help"])), 0);

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "learning_rate = 3\n").unwrap();
    let out = dir.path().join("o");
    let o = qtgvqa(&["--config", bad.to_str().unwrap(), "--out", out.to_str().unwrap(), "gen-data"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
}

#[test]
fn pipeline_runs_and_data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let p = |s: &str| dir.path().join(s).to_str().unwrap().to_string();

    let o = qtgvqa(&["--config", &cfg, "--seed", "5", "--out", &p("data"), "gen-data"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("data/manifest.json").exists());
    // refuses to overwrite without --force
    assert_eq!(code(&qtgvqa(&["--config", &cfg, "--out", &p("data"), "gen-data"])), 1);
    assert_eq!(code(&qtgvqa(&["--config", &cfg, "--seed", "5", "--out", &p("data"), "--force", "gen-data"])), 0);

    let o = qtgvqa(&["--config", &cfg, "--out", &p("run"), "train", "--dataset", &p("data")]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ck = p("run/model.ckpt");
    let o = qtgvqa(&["--config", &cfg, "--out", &p("eval"), "eval", "--dataset", &p("data"), "--checkpoint", &ck, "--split", "val"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("IFWAA"));
    let report = std::fs::read_to_string(dir.path().join("eval/report.json")).unwrap();
    assert!(report.contains("\"split\": \"val\""));

    let o = qtgvqa(&["--config", &cfg, "--out", &p("e2"), "eval", "--dataset", &p("data"), "--checkpoint", &p("missing.ckpt")]);
    assert_eq!(code(&o), 2);
    std::fs::write(dir.path().join("data/train.jsonl"), "{not json\n").unwrap();
    let o = qtgvqa(&["--config", &cfg, "--out", &p("run2"), "train", "--dataset", &p("data")]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains(":1:"));
}
