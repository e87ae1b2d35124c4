//! End-to-end CLI tests: exit codes, machine-readable outputs, and the
//! tokenize/self-distillation/round-trip contracts.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use wintok_core::config::parse_config;
use wintok_core::data::{ingest, Dataset};
use wintok_core::model::Model;
use wintok_core::nn::to_f64_vec;
use wintok_core::training::BatchSource;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_wintok"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn wintok")
}

fn stderr_line(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).trim().to_string()
}

const TINY_CONFIG: &str = r#"
[model]
image_size = 16
patch_size = 4
encoder_depth = 1
encoder_width = 16
encoder_heads = 2
decoder_variant = { custom = { depth = 1, width = 16, heads = 2 } }
num_learnable_tokens = 4
num_codebooks = 2
entries_per_codebook = 8
code_dim_total = 4
lambda_per = 1.0
lambda_adv = 0.0
lambda_sem = 1.0
teacher_kind = "prototype"
teacher_dim = 16
precision = "f64"
seed = 0

[train]
base_lr = 2e-4
batch_size = 4
total_steps = 30
"#;

struct Fixture {
    _dir: tempfile::TempDir,
    config: PathBuf,
    data: PathBuf,
    root: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    std::fs::write(&config, TINY_CONFIG).unwrap();
    let data = dir.path().join("data");
    let out = run(&[
        "gen-shapes",
        "--out",
        data.to_str().unwrap(),
        "--num-samples",
        "32",
        "--image-size",
        "16",
    ]);
    assert!(out.status.success(), "{}", stderr_line(&out));
    let root = dir.path().to_path_buf();
    Fixture { _dir: dir, config, data, root }
}

fn smoke_config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

#[test]
fn gen_ingest_train_eval_plot_roundtrip() {
    let fx = fixture();
    let cfg = fx.config.to_str().unwrap();
    let data = fx.data.to_str().unwrap();

    let out = run(&["ingest", "--data", data]);
    assert!(out.status.success());
    let summary: serde_json::Value =
        serde_json::from_slice(&out.stdout).expect("ingest prints JSON");
    assert_eq!(summary["entries"], 32);
    assert_eq!(summary["classes"].as_array().unwrap().len(), 4);

    let run_dir = fx.root.join("run");
    let out = run(&[
        "train",
        "--config",
        cfg,
        "--data",
        data,
        "--out",
        run_dir.to_str().unwrap(),
        "--checkpoint-every",
        "15",
    ]);
    assert!(out.status.success(), "{}", stderr_line(&out));
    let last: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(last["total"].as_f64().unwrap().is_finite());
    let metrics = run_dir.join("metrics.jsonl");
    let lines = std::fs::read_to_string(&metrics).unwrap();
    assert_eq!(lines.lines().count(), 30);
    let final_ckpt = run_dir.join("checkpoints/final.ckpt");
    assert!(final_ckpt.exists());
    assert!(run_dir.join("checkpoints/step_000015.ckpt").exists());

    let report_path = fx.root.join("eval.json");
    let out = run(&[
        "eval",
        "--config",
        cfg,
        "--data",
        data,
        "--ckpt",
        final_ckpt.to_str().unwrap(),
        "--out",
        report_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr_line(&out));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for key in ["psnr_mean", "ssim_mean", "desk_fid", "probe_acc", "recon_mse", "silhouette"] {
        assert!(report[key].as_f64().unwrap().is_finite(), "{key} not finite");
    }
    let on_disk: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report, on_disk);

    let plots = fx.root.join("plots");
    let out = run(&["plot", "--metrics", metrics.to_str().unwrap(), "--out", plots.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr_line(&out));
    for name in ["total", "recon", "semantic", "lr"] {
        assert!(plots.join(format!("{name}.png")).exists());
    }
}

#[test]
fn untrained_eval_probe_accuracy_matches_recorded_anchor() {
    // Freshly initialized smoke model on the default 2000-sample shapes set.
    // The random encoder is already a usable random-features map, so the
    // probe lands well above 4-class chance: the recorded reference run
    // gives 0.6225. The tolerance is a generous binomial interval at the
    // 400-sample eval split; with fixed seeds the value is deterministic.
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("shapes2000");
    let out = run(&["gen-shapes", "--out", data.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr_line(&out));
    let out = run(&[
        "eval",
        "--config",
        smoke_config_path().to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr_line(&out));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let probe = report["probe_acc"].as_f64().unwrap();
    assert!(
        (probe - 0.6225).abs() <= 0.08,
        "untrained probe_acc {probe} drifted from the recorded anchor 0.6225"
    );
}

#[test]
fn tokenize_self_distillation_gives_zero_semantic_loss() {
    // Feed a model its own pooled semantic vectors as a file teacher: the
    // cosine loss of a vector against itself is zero.
    let fx = fixture();
    let cfg = fx.config.to_str().unwrap();
    let data = fx.data.to_str().unwrap();
    let tok_dir = fx.root.join("tokens");
    let out = run(&["tokenize", "--config", cfg, "--data", data, "--out", tok_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr_line(&out));
    let teacher = tok_dir.join("pooled.wttf");
    assert!(teacher.exists());

    let run_dir = fx.root.join("selfdistill");
    let out = run(&[
        "train",
        "--config",
        cfg,
        "--set",
        "model.teacher_kind=\"file\"",
        "--set",
        "train.total_steps=1",
        "--teacher",
        teacher.to_str().unwrap(),
        "--data",
        data,
        "--out",
        run_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr_line(&out));
    let first: serde_json::Value = serde_json::from_str(
        std::fs::read_to_string(run_dir.join("metrics.jsonl")).unwrap().lines().next().unwrap(),
    )
    .unwrap();
    let sem = first["semantic"].as_f64().unwrap();
    assert!(sem.abs() < 1e-9, "self-distillation semantic loss {sem} != 0");
}

#[test]
fn tokenize_index_grids_round_trip_through_the_decoder() {
    // Decoding the exported index grids must reproduce the model's own
    // reconstruction: the discrete tokens alone carry the pixel pathway.
    let fx = fixture();
    let cfg_path = fx.config.to_str().unwrap();
    let data = fx.data.to_str().unwrap();
    let tok_dir = fx.root.join("tokens");
    let out =
        run(&["tokenize", "--config", cfg_path, "--data", data, "--out", tok_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr_line(&out));

    let cfg = parse_config(TINY_CONFIG, &[]).unwrap();
    let model = Model::new(cfg, None).unwrap();
    let manifest = ingest(&fx.data).unwrap();
    let dataset = Dataset::load(&manifest).unwrap();

    let mut by_id: std::collections::HashMap<String, Vec<u32>> = std::collections::HashMap::new();
    for line in std::fs::read_to_string(tok_dir.join("tokens.jsonl")).unwrap().lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        let indices = rec["indices"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_u64().unwrap() as u32)
            .collect();
        by_id.insert(rec["sample_id"].as_str().unwrap().to_string(), indices);
    }
    assert_eq!(by_id.len(), dataset.len());

    let batch = dataset.batch(&(0..dataset.len()).collect::<Vec<_>>(), model.dtype()).unwrap();
    let fwd = model.forward(&batch).unwrap();
    let (b, n, c) = fwd.quant.indices_shape;
    let mut flat = Vec::with_capacity(b * n * c);
    for id in &batch.sample_ids {
        flat.extend_from_slice(&by_id[id]);
    }
    assert_eq!(flat, fwd.quant.indices, "exported grids differ from the forward pass");

    let codes = model.quantizer.codes_from_indices(&flat, b, n).unwrap();
    let decoded = model.decoder.decode(&codes).unwrap();
    let a = to_f64_vec(&decoded).unwrap();
    let r = to_f64_vec(&fwd.reconstruction).unwrap();
    let worst = a
        .iter()
        .zip(&r)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f64, f64::max);
    assert!(worst < 1e-9, "round-trip reconstruction differs by {worst}");
}

#[test]
fn exit_codes_and_single_line_errors() {
    let fx = fixture();
    let data = fx.data.to_str().unwrap();

    let check = |out: Output, code: i32, prefix: &str| {
        assert_eq!(out.status.code(), Some(code), "stderr: {}", stderr_line(&out));
        let err = stderr_line(&out);
        assert_eq!(err.lines().count(), 1, "expected one error line, got: {err}");
        assert!(err.starts_with(prefix), "expected {prefix}, got: {err}");
    };

    // config errors -> 2
    let bad = fx.root.join("bad.toml");
    std::fs::write(&bad, "[model\n").unwrap();
    check(
        run(&["eval", "--config", bad.to_str().unwrap(), "--data", data]),
        2,
        "E_CONFIG_SYNTAX:",
    );
    let unknown = fx.root.join("unknown.toml");
    std::fs::write(&unknown, "[model]\nnum_wheels = 3\n").unwrap();
    check(
        run(&["eval", "--config", unknown.to_str().unwrap(), "--data", data]),
        2,
        "E_CONFIG_UNKNOWN_KEY:",
    );
    let cfg = fx.config.to_str().unwrap();
    check(
        run(&["eval", "--config", cfg, "--set", "train.base_lr=0.0", "--data", data]),
        2,
        "E_CONFIG_VALIDATION:",
    );

    // data errors -> 3
    check(
        run(&["eval", "--config", cfg, "--data", fx.root.join("nope").to_str().unwrap()]),
        3,
        "E_INGEST:",
    );
    check(
        run(&[
            "train",
            "--config",
            cfg,
            "--set",
            "model.teacher_kind=\"file\"",
            "--data",
            data,
            "--out",
            fx.root.join("noteacher").to_str().unwrap(),
        ]),
        3,
        "E_TEACHER_DATA:",
    );

    // numeric divergence -> 4, with a last-good checkpoint dumped
    let blowup = fx.root.join("blowup");
    check(
        run(&[
            "train",
            "--config",
            cfg,
            "--set",
            "train.base_lr=1e12",
            "--set",
            "train.grad_clip=0.0",
            "--data",
            data,
            "--out",
            blowup.to_str().unwrap(),
        ]),
        4,
        "E_NUMERIC:",
    );
    assert!(blowup.join("checkpoints/last_good.ckpt").exists());
}

#[test]
fn data_root_env_resolves_relative_paths() {
    let fx = fixture();
    let out = bin()
        .args(["ingest", "--data", "data"])
        .env("WINTOK_DATA_ROOT", &fx.root)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr_line(&out));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["entries"], 32);
}
