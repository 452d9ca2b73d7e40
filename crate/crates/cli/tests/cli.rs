use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[backbone]
vocab_size = 24
embed_dim = 16
layers = 1
heads = 2
ffn_dim = 32
max_seq_len = 24

[pretrain]
steps = 10
corpus_size = 30
cued_examples = 16

[task]
train_size = 16
dev_size = 16

[prompt]
length = 4
pieces = 4

[train]
epochs = 2
batch_size = 8

[prune]
token_ratios = [0.25, 0.5]
piece_ratios = [0.0, 0.5]
retrain_epochs = 1
score_batch_size = 8

[run]
seeds = [0]
"#;

fn xprompt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xprompt"))
        .args(args)
        .env("XPROMPT_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("run.toml");
    let out = dir.join("out");
    fs::write(&path, format!("{TINY}out_dir = {:?}\n", out.to_string_lossy())).unwrap();
    path.to_string_lossy().into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn template_is_a_usable_config() {
    let o = xprompt(&["template"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for section in ["[backbone]", "[prompt]", "[prune]", "[run]"] {
        assert!(text.contains(section), "{section} missing");
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.toml");
    fs::write(&path, text).unwrap();
    let o = xprompt(&[
        "report",
        "-c",
        path.to_str().unwrap(),
        "--out",
        dir.path().join("none").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn missing_config_exits_with_two() {
    let o = xprompt(&["pipeline", "-c", "/nonexistent/run.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}

#[test]
fn invalid_config_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "[prompt]\nlength = 4\npieces = 5\n").unwrap();
    let o = xprompt(&["pipeline", "-c", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn prune_before_tune_exits_with_four() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = xprompt(&["prune", "-c", &cfg]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn tiny_pipeline_then_baselines_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = xprompt(&["pipeline", "-c", &cfg]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("xprompt"));
    assert!(dir.path().join("out/metrics.jsonl").exists());

    let o = xprompt(&["baselines", "-c", &cfg, "--which", "negative,reversed"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("negative_masking"));

    let o = xprompt(&["report", "-c", &cfg]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("xprompt") && text.contains("reversed_xprompt"), "{text}");
}
