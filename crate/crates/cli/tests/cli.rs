use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bayes-transformer"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = r#"
epochs = 2
batch_size = 4
seed = 3
beam_width = 2
eval_samples = 4

[synth]
num_samples = 8
feature_dim = 8
content_tokens = 3
max_tokens = 3

[model]
d_model = 16
d_ff = 16
n_heads = 2
encoder_layers = 1
decoder_layers = 1
vocab_size = 7
feature_dim = 8
max_source_len = 64
max_target_len = 32
conv_channels = 2
"#;

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, TINY).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn help_and_version_exit_zero() {
    for args in [&["--help"][..], &["--version"], &["train", "--help"]] {
        let o = run(args);
        assert_eq!(o.status.code(), Some(0), "{args:?}");
        assert!(!o.stdout.is_empty());
    }
}

#[test]
fn usage_errors_exit_one() {
    for args in [
        &[][..],
        &["frobnicate"],
        &["train", "--epochs", "many"],
        &["train", "--kl-mode", "odd"],
        &["eval", "--run", "/nonexistent/run"],
    ] {
        assert_eq!(run(args).status.code(), Some(1), "{args:?}");
    }
}

#[test]
fn invalid_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "epochz = 3\n").unwrap();
    let o = run(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("epochz"));
}

#[test]
fn gen_data_writes_features_and_vocabulary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("train.feats");
    let o = run(&["gen-data", "--out", out.to_str().unwrap(), "--samples", "5", "--seed", "4"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("samples=5"));
    assert!(stdout(&o).contains("injective=true"));
    let data = bayes_transformer::featfile::read_features(&out).unwrap();
    assert_eq!(data.len(), 5);
    let vocab = bayes_transformer::data::Vocab::load(&out.with_extension("vocab")).unwrap();
    data.check_vocab(&vocab).unwrap();
}

#[test]
fn train_eval_decode_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let run_dir = dir.path().join("run");
    let run_dir = run_dir.to_str().unwrap();

    let o = run(&["train", "--config", &config, "--out-dir", run_dir]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert_eq!(text.lines().filter(|l| l.starts_with("epoch=")).count(), 2);
    assert!(text.contains("cer="));
    for name in ["config.toml", "vocab.txt", "checkpoint.bsck", "steps.jsonl", "steps.csv", "epochs.jsonl", "eval.json"] {
        assert!(Path::new(run_dir).join(name).exists(), "{name}");
    }

    let o = run(&["eval", "--run", run_dir, "--beam-width", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("samples=4 beam_width=1 "));

    let greedy = run(&["decode", "--run", run_dir, "--greedy"]);
    let beam1 = run(&["decode", "--run", run_dir, "--beam-width", "1"]);
    assert_eq!(greedy.status.code(), Some(0));
    assert_eq!(stdout(&greedy).lines().count(), 4);
    assert_eq!(stdout(&greedy), stdout(&beam1));

    // Resume to a later epoch; the metrics grow instead of being rewritten.
    let o = run(&["train", "--config", &config, "--out-dir", run_dir, "--epochs", "3", "--resume", "--no-eval"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("epoch=")).count(), 1);
    let steps = std::fs::read_to_string(Path::new(run_dir).join("steps.jsonl")).unwrap();
    assert_eq!(steps.lines().count(), 6);
}

#[test]
fn training_on_a_feature_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let feats = dir.path().join("data.feats");
    let toml = dir.path().join("tiny.toml");
    let o = run(&["gen-data", "--out", feats.to_str().unwrap(), "--config", toml.to_str().unwrap(), "--samples", "6"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let run_dir = dir.path().join("run");
    let o = run(&[
        "train",
        "--config",
        &config,
        "--out-dir",
        run_dir.to_str().unwrap(),
        "--train-data",
        feats.to_str().unwrap(),
        "--eval-data",
        feats.to_str().unwrap(),
        "--epochs",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("samples=6"));
}

#[test]
fn divergence_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let run_dir = dir.path().join("run");
    let o = run(&[
        "train",
        "--config",
        &config,
        "--out-dir",
        run_dir.to_str().unwrap(),
        "--learning-rate",
        "1e300",
        "--epochs",
        "5",
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("non-finite"));
}

#[test]
fn quick_selftest_passes() {
    let o = run(&["selftest", "--quick"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 6);
    assert!(text.lines().all(|l| l.starts_with("PASS ")));
}
