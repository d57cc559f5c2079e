use std::path::{Path, PathBuf};

use clap::Parser;
use mftrain::cli::{self, checkpoint::Checkpoint, Cli, CensusFile};
use mftrain::nn::data::encode_idx;

fn run(args: &[&str]) -> (i32, String) {
    let cli = Cli::try_parse_from(std::iter::once("mftrain").chain(args.iter().copied())).unwrap();
    let mut out = String::new();
    match cli::run(&cli, &mut out) {
        Ok(code) => (code, out),
        Err(e) => (cli::exit_code(&e), e.to_string()),
    }
}

const RUN: &str = r#"
[network]
input_shape = [16]
layers = [
  { kind = "linear", outputs = 12 },
  { kind = "relu" },
  { kind = "linear", outputs = 3 },
]

[train]
epochs = EPOCHS
batch_size = 16
learning_rate = 0.05
lr_decay_epochs = [3]
seed = 11

[data]
source = "synthetic"
test_samples = 32

[data.generator]
samples = 160
classes = 3
sample_shape = [16]
class_fraction = 0.3
noise = 0.3
seed = 4
"#;

fn write_config(dir: &Path, name: &str, epochs: usize, extra: &str) -> PathBuf {
    let path = dir.join(name);
    let text = format!("{}\n{extra}", RUN.replace("EPOCHS", &epochs.to_string()));
    std::fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn training_is_deterministic_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let full = write_config(dir.path(), "full.toml", 4, "");
    let half = write_config(dir.path(), "half.toml", 2, "");
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));

    assert_eq!(run(&["train", s(&full), "--quiet", "--out", s(&a)]).0, 0);
    assert_eq!(run(&["train", s(&full), "--quiet", "--out", s(&b)]).0, 0);
    let metrics = |d: &Path| std::fs::read(d.join("metrics.csv")).unwrap();
    assert_eq!(metrics(&a), metrics(&b));

    assert_eq!(run(&["train", s(&half), "--quiet", "--out", s(&c)]).0, 0);
    let ck = c.join("checkpoint.mftc");
    assert_eq!(Checkpoint::load(&ck).unwrap().state.epoch, 2);
    assert_eq!(run(&["train", s(&full), "--quiet", "--out", s(&c), "--resume", s(&ck)]).0, 0);
    assert_eq!(metrics(&a), metrics(&c));
    assert_eq!(
        std::fs::read(a.join("checkpoint.mftc")).unwrap(),
        std::fs::read(c.join("checkpoint.mftc")).unwrap()
    );
    assert_eq!(
        std::fs::read(a.join("census.json")).unwrap(),
        std::fs::read(c.join("census.json")).unwrap()
    );

    let header = String::from_utf8(metrics(&a)).unwrap();
    assert!(header.starts_with("schema,epoch,step,learning_rate,train_loss"));
    assert_eq!(header.lines().count(), 5);
    let timing = std::fs::read_to_string(c.join("timing.csv")).unwrap();
    assert_eq!(timing.lines().count(), 5);
}

#[test]
fn census_prices_like_the_analytic_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", 1, "");
    let out = dir.path().join("run");
    assert_eq!(run(&["train", s(&cfg), "--quiet", "--out", s(&out)]).0, 0);
    let census_path = out.join("census.json");
    let census = CensusFile::load(&census_path).unwrap();
    assert_eq!(census.fw_macs_per_sample, 16 * 12 + 12 * 3);
    assert_eq!(census.census.multiplies, 0);

    let (code, text) = run(&["energy", "--from-census", s(&census_path), "--out", s(&out)]);
    assert_eq!(code, 0, "{text}");
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("census_energy.json")).unwrap()).unwrap();
    let rel = json["relative_difference"].as_f64().unwrap();
    assert!(rel.abs() < 0.01, "census vs analytic {rel}");
}

#[test]
fn fp32_baseline_counts_multiplies() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", 1, "");
    let out = dir.path().join("fp");
    assert_eq!(run(&["train", s(&cfg), "--quiet", "--fp32-baseline", "--out", s(&out)]).0, 0);
    let census = CensusFile::load(&out.join("census.json")).unwrap();
    assert_eq!(census.census.multiplies, census.census.mac_slots);
    assert_eq!(census.census.mac_slots, 3 * census.samples * census.fw_macs_per_sample);
}

#[test]
fn config_errors_exit_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "bad.toml", 1, "[extra]\nkey = 1\n");
    let (code, msg) = run(&["train", s(&bad)]);
    assert_eq!(code, cli::EXIT_CONFIG);
    assert!(msg.contains("bad.toml") && msg.contains("line"), "{msg}");

    let ok = write_config(dir.path(), "ok.toml", 1, "");
    let (code, msg) = run(&["train", s(&ok), "--ablate", "no_such_thing"]);
    assert_eq!(code, cli::EXIT_CONFIG, "{msg}");
    assert_eq!(run(&["train", "does-not-exist.toml"]).0, cli::EXIT_CONFIG);
}

#[test]
fn dataset_problems_exit_with_dataset_code() {
    let dir = tempfile::tempdir().unwrap();
    let text = RUN.replace("EPOCHS", "1").split("[data]").next().unwrap().to_string()
        + "[data]\nsource = \"idx\"\ntrain_images = \"tr-img\"\ntrain_labels = \"tr-lbl\"\ntest_images = \"te-img\"\ntest_labels = \"te-lbl\"\n";
    let cfg = dir.path().join("idx.toml");
    std::fs::write(&cfg, &text).unwrap();
    assert_eq!(run(&["train", s(&cfg), "--quiet"]).0, cli::EXIT_DATASET);

    let pixels: Vec<u8> = (0..8 * 16).map(|i| (i * 37 % 256) as u8).collect();
    for prefix in ["tr", "te"] {
        std::fs::write(dir.path().join(format!("{prefix}-img")), encode_idx(&[8, 4, 4], &pixels)).unwrap();
        std::fs::write(dir.path().join(format!("{prefix}-lbl")), encode_idx(&[8], &[0, 1, 2, 0, 1, 2, 0, 1])).unwrap();
    }
    let out = dir.path().join("idx-run");
    assert_eq!(run(&["train", s(&cfg), "--quiet", "--out", s(&out)]).0, 0);

    std::fs::write(dir.path().join("te-lbl"), encode_idx(&[8], &[0, 1, 2, 9, 1, 2, 0, 1])).unwrap();
    assert_eq!(run(&["train", s(&cfg), "--quiet", "--out", s(&out)]).0, cli::EXIT_DATASET);
}

#[test]
fn diverging_run_is_a_training_fault() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", 2, "")
        .to_str()
        .unwrap()
        .to_string();
    let text = std::fs::read_to_string(&cfg).unwrap().replace("learning_rate = 0.05", "learning_rate = 1e300");
    std::fs::write(&cfg, text).unwrap();
    let out = dir.path().join("boom");
    let (code, msg) = run(&["train", &cfg, "--quiet", "--fp32-baseline", "--out", s(&out)]);
    assert_eq!(code, cli::EXIT_FAULT, "{msg}");
}

#[test]
fn config_directory_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "train.toml", 1, "");
    std::fs::write(dir.path().join("energy.toml"), "[costs]\nfp32_mul = 7.4\n").unwrap();
    std::env::set_var(cli::config::CONFIG_DIR_ENV, dir.path());
    let out = dir.path().join("env-run");
    let (code, msg) = run(&["train", "--quiet", "--out", s(&out)]);
    let (_, energy) = run(&["energy", "--method", "original", "--method", "ours"]);
    std::env::remove_var(cli::config::CONFIG_DIR_ENV);
    assert_eq!(code, 0, "{msg}");
    assert!(out.join("metrics.csv").exists());
    assert!(energy.contains("original"), "{energy}");
    assert!(!energy.contains(" 14.530 "), "override not applied: {energy}");
}

#[test]
fn energy_reports_and_rejections() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("energy");
    let (code, text) = run(&["energy", "--out", s(&out)]);
    assert_eq!(code, 0);
    assert!(text.contains("ours"));
    let csv = std::fs::read_to_string(out.join("energy.csv")).unwrap();
    assert_eq!(csv.lines().count(), 12);
    assert!(csv.lines().next().unwrap().contains("savings_with_overhead"));

    assert_eq!(run(&["energy", "--macs", "0"]).0, cli::EXIT_CONFIG);
    assert_eq!(run(&["energy", "--method", "bogus"]).0, cli::EXIT_CONFIG);
    let (code, text) = run(&["energy", "--method", "ours"]);
    assert_eq!(code, 0);
    assert!(!text.contains("saved"));

    let workload = dir.path().join("mlp.toml");
    std::fs::write(&workload, "name = \"mlp\"\nfw_macs = 1e12\n").unwrap();
    let (code, text) = run(&["energy", "--workload", s(&workload), "--method", "original"]);
    assert_eq!(code, 0, "{text}");
    assert!(text.contains("4.600"), "{text}");
}

#[test]
fn compare_and_selftest() {
    let dir = tempfile::tempdir().unwrap();
    let (code, text) = run(&["compare", "--out", s(dir.path())]);
    assert_eq!(code, 0, "{text}");
    assert!(dir.path().join("compare.csv").exists());

    let (code, text) = run(&["selftest"]);
    assert_eq!(code, 0);
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 5);

    let bad = dir.path().join("bad-costs.toml");
    std::fs::write(&bad, "[costs]\nint4_add = -0.015\n").unwrap();
    let (code, msg) = run(&["selftest", "--config", s(&bad)]);
    assert_eq!(code, cli::EXIT_CONFIG);
    assert!(msg.contains("int4_add"), "{msg}");
}

#[test]
fn quantize_reports() {
    let (code, text) = run(&["quantize", "--generate", "zeros", "--count", "64"]);
    assert_eq!(code, 0);
    assert!(text.contains("zero sentinel fraction 1.000000"));

    let (_, json) = run(&["quantize", "--generate", "normal", "--json", "--count", "5000"]);
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert!(v["max_relative_error"].as_f64().unwrap() <= std::f64::consts::SQRT_2 - 1.0);

    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("t.txt");
    std::fs::write(&input, "0.5, -0.25\n3 0\n").unwrap();
    let (code, text) = run(&["quantize", "--input", s(&input), "--bits", "4", "--stats", "--hist-bins", "3"]);
    assert_eq!(code, 0, "{text}");
    assert!(text.contains("elements               4"));
    std::fs::write(&input, "1 two\n").unwrap();
    assert_eq!(run(&["quantize", "--input", s(&input)]).0, cli::EXIT_FAILURE);
    assert_eq!(run(&["quantize", "--bits", "9"]).0, cli::EXIT_CONFIG);
}
