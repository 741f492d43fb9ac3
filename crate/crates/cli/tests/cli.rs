//! Drives the `rebot` binary through the full workflow on a tiny corpus:
//! data -> train base -> train rebottleneck (with latent cache and resume)
//! -> eval suites -> export. Also pins the exit-code contract.

use std::path::{Path, PathBuf};
use std::process::Command;

use rebot_core::discriminator::DiscConfig;
use rebot_core::reencoder::ReencoderConfig;
use rebot_core::trainer::TrainConfig;
use rebot_core::variants::Variant;

fn rebot() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rebot"))
}

fn run_ok(cmd: &mut Command) -> (String, String) {
    let out = cmd.output().expect("spawn rebot");
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
    assert!(out.status.success(), "command failed\nstdout:\n{stdout}\nstderr:\n{stderr}");
    (stdout, stderr)
}

fn exit_code(cmd: &mut Command) -> i32 {
    cmd.output().expect("spawn rebot").status.code().unwrap_or(-1)
}

fn write_json(path: &Path, value: &serde_json::Value) {
    std::fs::write(path, serde_json::to_string_pretty(value).unwrap()).unwrap();
}

fn data_config(seed: u64) -> serde_json::Value {
    serde_json::json!({
        "seed": seed,
        "count": 80,
        "duration_s": 0.128,
        "sample_rate": 16000,
        "families": ["tone", "chirp", "noise", "mixture"],
    })
}

fn base_config() -> serde_json::Value {
    serde_json::json!({
        "seed": 3,
        "sample_rate": 16000,
        "latent_channels": 4,
        "downsample": 64,
        "width": 12,
        "kl_weight": 1e-4,
        "mag_weight": 1.0,
        "lr": 1e-3,
        "epochs": 2,
        "batch_size": 8,
        "chunk_seconds": 0.064,
    })
}

fn train_config(variant: Variant) -> TrainConfig {
    let mut cfg = TrainConfig::for_variant(variant);
    cfg.batch_size = 4;
    cfg.chunk_seconds = 0.064;
    cfg.epochs = 1;
    cfg.semantic_dim = 6;
    cfg.reencoder =
        ReencoderConfig { in_channels: 4, inner_channels: 3, num_blocks: 1, hidden_dim: 12, variational: true };
    cfg.discriminator = DiscConfig { in_channels: 4, bands: 2, hidden: 8, layers: 2 };
    cfg
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn records_of(metrics_json: &Path) -> Vec<serde_json::Value> {
    read_json(metrics_json)["records"].as_array().unwrap().clone()
}

struct Pipeline {
    root: tempfile::TempDir,
}

impl Pipeline {
    fn path(&self, rel: &str) -> PathBuf {
        self.root.path().join(rel)
    }

    fn arg(&self, rel: &str) -> String {
        self.path(rel).to_str().unwrap().to_string()
    }
}

fn build_corpus_and_base() -> Pipeline {
    let p = Pipeline { root: tempfile::tempdir().unwrap() };

    write_json(&p.path("data.json"), &data_config(5));
    run_ok(rebot().args(["data", "--config", &p.arg("data.json"), "--out", &p.arg("data")]));
    assert!(p.path("data/manifest.json").exists());
    assert!(p.path("data/resolved_config.json").exists());

    write_json(&p.path("base.json"), &base_config());
    run_ok(rebot().args([
        "train",
        "base",
        "--config",
        &p.arg("base.json"),
        "--data",
        &p.arg("data/manifest.json"),
        "--out",
        &p.arg("base"),
    ]));
    assert!(p.path("base/base.rbck").exists());
    assert!(p.path("base/epochs.jsonl").exists());
    let run = read_json(&p.path("base/run_manifest.json"));
    assert!(run["wall_ms"].as_f64().unwrap() > 0.0);
    p
}

#[test]
fn pipeline_end_to_end() {
    let p = build_corpus_and_base();
    let cache_dir = p.arg("cache");
    write_json(&p.path("ordered.json"), &serde_json::to_value(train_config(Variant::Ordered)).unwrap());

    let (_, err) = run_ok(
        rebot()
            .env("REBOT_CACHE_DIR", &cache_dir)
            .args([
                "train",
                "rebottleneck",
                "--config",
                &p.arg("ordered.json"),
                "--data",
                &p.arg("data/manifest.json"),
                "--base",
                &p.arg("base/base.rbck"),
                "--out",
                &p.arg("ordered"),
            ]),
    );
    assert!(err.contains("latent cache written"), "first run should build the cache: {err}");
    assert!(p.path("ordered/checkpoint-epoch-001.rbck").exists());
    assert!(std::fs::read_to_string(p.path("ordered/steps.jsonl")).unwrap().lines().count() > 0);
    let cache_entries: Vec<_> = std::fs::read_dir(&cache_dir).unwrap().collect();
    assert_eq!(cache_entries.len(), 1, "one keyed cache subdirectory");

    // Same dataset and codec from a different variant: the cache must be
    // reused, and --variant must override the config file.
    let (_, err) = run_ok(
        rebot()
            .env("REBOT_CACHE_DIR", &cache_dir)
            .args([
                "train",
                "rebottleneck",
                "--config",
                &p.arg("ordered.json"),
                "--variant",
                "plain",
                "--data",
                &p.arg("data/manifest.json"),
                "--base",
                &p.arg("base/base.rbck"),
                "--out",
                &p.arg("plain"),
            ]),
    );
    assert!(err.contains("latent cache hit"), "second run should reuse the cache: {err}");
    let snapshot = read_json(&p.path("plain/resolved_config.json"));
    assert_eq!(snapshot["config"]["variant"], "plain");
    assert_eq!(snapshot["config"]["weights"]["task"], 0.0);

    // Resume the ordered run one epoch further; the stored config wins, so
    // no --config is needed.
    run_ok(rebot().args([
        "train",
        "rebottleneck",
        "--data",
        &p.arg("data/manifest.json"),
        "--base",
        &p.arg("base/base.rbck"),
        "--resume",
        &p.arg("ordered/checkpoint-epoch-001.rbck"),
        "--epochs",
        "2",
        "--out",
        &p.arg("ordered"),
    ]));
    assert!(p.path("ordered/checkpoint-epoch-002.rbck").exists());

    let ckpt = p.arg("ordered/checkpoint-epoch-002.rbck");
    let eval_common = [
        "--base".to_string(),
        p.arg("base/base.rbck"),
        "--data".to_string(),
        p.arg("data/manifest.json"),
    ];

    run_ok(rebot().args(["eval", "--checkpoint", &ckpt, "--suite", "ordering", "--out", &p.arg("eval-ordering")]).args(&eval_common));
    let ablation = std::fs::read_to_string(p.path("eval-ordering/ablation.csv")).unwrap();
    assert_eq!(ablation.lines().count(), 1 + 3 * 3, "header plus 3 strategies x 3 channel counts");
    for file in ["ablation.json", "ablation_stft.svg", "ablation_stft.png", "metrics.csv", "metrics.json"] {
        assert!(p.path("eval-ordering").join(file).exists(), "missing {file}");
    }

    run_ok(rebot().args(["eval", "--checkpoint", &ckpt, "--suite", "recon", "--out", &p.arg("eval-recon")]).args(&eval_common));
    let names: Vec<String> = records_of(&p.path("eval-recon/metrics.json"))
        .iter()
        .map(|r| r["name"].as_str().unwrap().to_string())
        .collect();
    for expected in ["base_sisdr", "rebottleneck_sisdr", "mean_abs_offdiag"] {
        assert!(names.iter().any(|n| n == expected), "recon records missing {expected}");
    }
    assert!(p.path("eval-recon/correlation.json").exists());
    assert!(p.path("eval-recon/corr_base.png").exists());
    assert!(p.path("eval-recon/corr_inner.svg").exists());

    run_ok(rebot().args(["eval", "--checkpoint", &ckpt, "--suite", "alignment", "--out", &p.arg("eval-align")]).args(&eval_common));
    let records = records_of(&p.path("eval-align/metrics.json"));
    assert_eq!(records.len(), 2, "no probe: bottleneck-target cka and pwcca only");
    for r in &records {
        let v = r["value"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "similarity out of range: {r}");
    }
    let scatter = std::fs::read_to_string(p.path("eval-align/scatter.csv")).unwrap();
    assert_eq!(scatter.lines().count(), 1 + 8, "header plus one point per test item");

    // Equivariance suite refuses a checkpoint trained without that
    // structure.
    let code = exit_code(
        rebot().args(["eval", "--checkpoint", &ckpt, "--suite", "equivariance", "--out", &p.arg("eval-eq")]).args(&eval_common),
    );
    assert_eq!(code, 2);

    run_ok(rebot().args(["export", "--metrics", &p.arg("eval-ordering"), "--format", "csv", "--out", &p.arg("export-csv")]));
    assert!(p.path("export-csv/metrics.csv").exists());
    assert!(p.path("export-csv/ablation.csv").exists());
    run_ok(rebot().args(["export", "--metrics", &p.arg("eval-recon"), "--format", "png", "--out", &p.arg("export-png")]));
    assert!(p.path("export-png/corr_base.png").exists());
    assert!(p.path("export-png/corr_inner.png").exists());
    run_ok(rebot().args(["export", "--metrics", &p.arg("eval-align"), "--format", "svg", "--out", &p.arg("export-svg")]));
    assert!(p.path("export-svg/scatter.svg").exists());
}

#[test]
fn seed_flag_overrides_config() {
    let root = tempfile::tempdir().unwrap();
    let cfg = root.path().join("data.json");
    write_json(&cfg, &data_config(5));
    let arg = |rel: &str| root.path().join(rel).to_str().unwrap().to_string();

    run_ok(rebot().args(["data", "--config", &arg("data.json"), "--out", &arg("a")]));
    run_ok(rebot().args(["data", "--config", &arg("data.json"), "--seed", "11", "--out", &arg("b")]));

    let snap = read_json(&root.path().join("b/resolved_config.json"));
    assert_eq!(snap["seed"], 11);
    assert_eq!(snap["config"]["seed"], 11);

    let a = read_json(&root.path().join("a/manifest.json"));
    let b = read_json(&root.path().join("b/manifest.json"));
    assert_ne!(
        a["items"][0]["source"]["seed"], b["items"][0]["source"]["seed"],
        "different seeds must synthesize different items"
    );
}

#[test]
fn usage_errors_exit_two() {
    let root = tempfile::tempdir().unwrap();
    let arg = |rel: &str| root.path().join(rel).to_str().unwrap().to_string();

    assert_eq!(exit_code(rebot().args(["data", "--out", &arg("x")])), 2, "missing --config");
    assert_eq!(
        exit_code(rebot().args(["data", "--config", &arg("data.json"), "--device", "tpu", "--out", &arg("x")])),
        2,
        "unknown device"
    );

    let train_cfg = root.path().join("train.json");
    write_json(&train_cfg, &serde_json::to_value(train_config(Variant::Plain)).unwrap());
    assert_eq!(
        exit_code(rebot().args([
            "train",
            "rebottleneck",
            "--config",
            &arg("train.json"),
            "--variant",
            "bogus",
            "--data",
            &arg("missing.json"),
            "--base",
            &arg("missing.rbck"),
            "--out",
            &arg("x"),
        ])),
        2,
        "unknown variant is a usage error, caught before any artifact loads"
    );

    assert_eq!(
        exit_code(rebot().args([
            "eval",
            "--checkpoint",
            &arg("missing.rbck"),
            "--base",
            &arg("missing.rbck"),
            "--data",
            &arg("missing.json"),
            "--suite",
            "nope",
            "--out",
            &arg("x"),
        ])),
        2,
        "unknown suite is rejected by the parser"
    );

    std::fs::create_dir_all(root.path().join("empty")).unwrap();
    assert_eq!(
        exit_code(rebot().args(["export", "--metrics", &arg("empty"), "--format", "csv", "--out", &arg("x")])),
        1,
        "an empty metrics directory is a runtime failure, not a usage error"
    );
}
