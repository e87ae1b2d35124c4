use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use wintok_core::config::{load_config, Config, TeacherKind};
use wintok_core::data::{generate_shapes, ingest, Dataset, ShapesSpec};
use wintok_core::error::{Error, Result};
use wintok_core::eval::{evaluate, psnr, run_ablation, ssim, write_ablation_artifacts, AblationAxis};
use wintok_core::model::Model;
use wintok_core::nn::to_f64_vec;
use wintok_core::plot::line_plot;
use wintok_core::training::{
    load_checkpoint, run_training, save_checkpoint, MetricsRecord, RunOptions, TrainState,
};

const DATA_ROOT_ENV: &str = "WINTOK_DATA_ROOT";

#[derive(Parser)]
#[command(name = "wintok", about = "Hybrid visual tokenizer: train, evaluate, ablate", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file (TOML); resolves against WINTOK_CONFIG_ROOT when relative.
    #[arg(long)]
    config: PathBuf,
    /// Dotted overrides, e.g. --set model.seed=3 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Teacher sidecar file (required when model.teacher_kind = "file").
    #[arg(long)]
    teacher: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<Config> {
        let overrides = self
            .set
            .iter()
            .map(|kv| {
                kv.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| Error::ConfigSyntax(format!("--set needs KEY=VALUE, got {kv}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let cfg = load_config(&self.config, &overrides)?;
        cfg.ensure_valid()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic shapes dataset (PNGs + labels.csv + manifest).
    GenShapes {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        num_samples: usize,
        #[arg(long, default_value_t = 32)]
        image_size: usize,
        #[arg(long, default_value_t = 4)]
        num_classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Validate an image folder and write its manifest.json.
    Ingest {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train a tokenizer; writes metrics.jsonl and checkpoints under --out.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, default_value_t = 500)]
        checkpoint_every: usize,
    },
    /// Compute the full metric report for a (possibly untrained) model.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to evaluate; omitted = freshly initialized weights.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Write the MetricReport JSON here as well as stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep one design axis at fixed budget and seeds.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// token_count | teacher_kind | decoder_size | losetok
        #[arg(long)]
        axis: String,
        #[arg(long)]
        budget: usize,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export discrete index grids (JSONL) and pooled semantic vectors
    /// (file-teacher-compatible sidecar).
    Tokenize {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump reconstructions as PNGs plus a manifest with per-sample metrics.
    Reconstruct {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render loss-curve PNGs from a metrics.jsonl stream.
    Plot {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn resolve_data(path: &Path) -> PathBuf {
    match std::env::var(DATA_ROOT_ENV) {
        Ok(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    let root = resolve_data(path);
    let manifest = ingest(&root)?;
    Dataset::load(&manifest)
}

fn build_model(cfg: &Config, teacher: Option<&PathBuf>, ckpt: Option<&PathBuf>) -> Result<Model> {
    if cfg.model.teacher_kind == TeacherKind::File && teacher.is_none() {
        return Err(Error::TeacherData("teacher_kind = file requires --teacher".into()));
    }
    match ckpt {
        Some(path) => Ok(load_checkpoint(path, cfg, teacher.map(|p| p.as_path()), false)?.model),
        None => Model::new(cfg.clone(), teacher.map(|p| p.as_path())),
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value).map_err(|e| Error::State(e.to_string()))?;
    println!("{s}");
    Ok(())
}

fn cmd_train(
    cfg_args: &ConfigArgs,
    data: &Path,
    out: &Path,
    resume: Option<&PathBuf>,
    checkpoint_every: usize,
) -> Result<()> {
    let cfg = cfg_args.load()?;
    let dataset = load_dataset(data)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml_string())?;
    let teacher = cfg_args.teacher.as_ref().map(|p| p.as_path());
    let mut state = match resume {
        Some(ckpt) => load_checkpoint(ckpt, &cfg, teacher, false)?,
        None => TrainState::new(Model::new(cfg.clone(), teacher)?),
    };
    let mut metrics = std::io::BufWriter::new(
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(out.join("metrics.jsonl"))?,
    );
    let ckpt_dir = out.join("checkpoints");
    let opts = RunOptions {
        metrics: Some(&mut metrics),
        checkpoint_dir: Some(&ckpt_dir),
        checkpoint_every,
        ..Default::default()
    };
    let reports = run_training(&mut state, &dataset, opts)?;
    drop(metrics);
    std::fs::create_dir_all(&ckpt_dir)?;
    save_checkpoint(&state, &ckpt_dir.join("final.ckpt"))?;
    if let Some(last) = reports.last() {
        print_json(last)?;
    }
    eprintln!("trained {} steps; capacity {}", state.step, cfg.capacity_string());
    Ok(())
}

fn cmd_eval(
    cfg_args: &ConfigArgs,
    data: &Path,
    ckpt: Option<&PathBuf>,
    out: Option<&PathBuf>,
) -> Result<()> {
    let cfg = cfg_args.load()?;
    let dataset = load_dataset(data)?;
    let model = build_model(&cfg, cfg_args.teacher.as_ref(), ckpt)?;
    let report = evaluate(&model, &dataset, cfg.model.seed)?;
    if let Some(path) = out {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(
            path,
            serde_json::to_vec_pretty(&report).map_err(|e| Error::State(e.to_string()))?,
        )?;
    }
    print_json(&report)
}

fn cmd_tokenize(cfg_args: &ConfigArgs, data: &Path, ckpt: Option<&PathBuf>, out: &Path) -> Result<()> {
    use std::io::Write;
    let cfg = cfg_args.load()?;
    let dataset = load_dataset(data)?;
    let model = build_model(&cfg, cfg_args.teacher.as_ref(), ckpt)?;
    std::fs::create_dir_all(out)?;
    let mut tokens = std::io::BufWriter::new(std::fs::File::create(out.join("tokens.jsonl"))?);
    let mut pooled_records: Vec<(String, usize, usize, Vec<f64>)> = Vec::new();
    for batch in dataset.full_batches(32, model.dtype())? {
        let fwd = model.forward(&batch)?;
        let (b, n, c) = fwd.quant.indices_shape;
        for i in 0..b {
            let grid = &fwd.quant.indices[i * n * c..(i + 1) * n * c];
            let line = serde_json::json!({
                "sample_id": batch.sample_ids[i],
                "n": n,
                "c": c,
                "v": model.cfg.model.entries_per_codebook,
                "indices": grid,
            });
            writeln!(tokens, "{line}")?;
        }
        let sem = model.pooled_semantic(&batch)?;
        let flat = to_f64_vec(&sem)?;
        let dim = flat.len() / b;
        for i in 0..b {
            pooled_records.push((
                batch.sample_ids[i].clone(),
                1,
                dim,
                flat[i * dim..(i + 1) * dim].to_vec(),
            ));
        }
    }
    tokens.flush()?;
    wintok_core::distill::write_teacher_file(&out.join("pooled.wttf"), &pooled_records)?;
    eprintln!("tokenized {} samples into {}", dataset.len(), out.display());
    Ok(())
}

fn to_png(chw: &[f64], s: usize) -> image::RgbImage {
    let mut img = image::RgbImage::new(s as u32, s as u32);
    for y in 0..s {
        for x in 0..s {
            let px = |c: usize| -> u8 {
                (((chw[c * s * s + y * s + x] + 1.0) / 2.0) * 255.0).round().clamp(0.0, 255.0) as u8
            };
            img.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    img
}

fn cmd_reconstruct(
    cfg_args: &ConfigArgs,
    data: &Path,
    ckpt: Option<&PathBuf>,
    out: &Path,
) -> Result<()> {
    let cfg = cfg_args.load()?;
    let dataset = load_dataset(data)?;
    let model = build_model(&cfg, cfg_args.teacher.as_ref(), ckpt)?;
    std::fs::create_dir_all(out)?;
    let mut entries = Vec::with_capacity(dataset.len());
    let s = dataset.image_size;
    for batch in dataset.full_batches(32, model.dtype())? {
        let fwd = model.forward(&batch)?;
        let b = batch.data.dims()[0];
        for i in 0..b {
            let x = batch.data.get(i)?;
            let xh = fwd.reconstruction.get(i)?;
            let id = &batch.sample_ids[i];
            let file = format!("{id}_recon.png");
            to_png(&to_f64_vec(&xh)?, s)
                .save(out.join(&file))
                .map_err(|e| Error::State(e.to_string()))?;
            entries.push(serde_json::json!({
                "sample_id": id,
                "path": file,
                "psnr": psnr(&x, &xh)?,
                "ssim": ssim(&x, &xh)?,
            }));
        }
    }
    std::fs::write(
        out.join("manifest.json"),
        serde_json::to_vec_pretty(&serde_json::json!({ "entries": entries }))
            .map_err(|e| Error::State(e.to_string()))?,
    )?;
    eprintln!("wrote {} reconstructions to {}", entries.len(), out.display());
    Ok(())
}

fn cmd_plot(metrics: &Path, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(metrics)?;
    let mut records: Vec<MetricsRecord> = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        records.push(serde_json::from_str(line).map_err(|e| Error::State(e.to_string()))?);
    }
    if records.is_empty() {
        return Err(Error::State("metrics stream is empty".into()));
    }
    std::fs::create_dir_all(out)?;
    let steps: Vec<String> = records.iter().map(|r| r.step.to_string()).collect();
    let curves: [(&str, Box<dyn Fn(&MetricsRecord) -> f64>); 4] = [
        ("total", Box::new(|r| r.losses.total)),
        ("recon", Box::new(|r| r.losses.recon)),
        ("semantic", Box::new(|r| r.losses.semantic)),
        ("lr", Box::new(|r| r.lr)),
    ];
    for (name, pick) in &curves {
        let series = vec![(name.to_string(), records.iter().map(pick).collect::<Vec<_>>())];
        line_plot(&out.join(format!("{name}.png")), &format!("{name} vs step"), &steps, &series)?;
    }
    eprintln!("wrote loss curves to {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenShapes { out, num_samples, image_size, num_classes, seed, force } => {
            let spec = ShapesSpec {
                num_samples: *num_samples,
                image_size: *image_size,
                num_classes: *num_classes,
                seed: *seed,
                ..Default::default()
            };
            let manifest = generate_shapes(&spec, &resolve_data(out), *force)?;
            eprintln!("generated {} samples under {}", manifest.entries.len(), out.display());
            Ok(())
        }
        Command::Ingest { data } => {
            let root = resolve_data(data);
            let manifest = ingest(&root)?;
            std::fs::write(
                root.join("manifest.json"),
                serde_json::to_vec_pretty(&manifest).map_err(|e| Error::State(e.to_string()))?,
            )?;
            print_json(&serde_json::json!({
                "entries": manifest.entries.len(),
                "classes": manifest.class_names,
            }))
        }
        Command::Train { cfg, data, out, resume, checkpoint_every } => {
            cmd_train(cfg, data, out, resume.as_ref(), *checkpoint_every)
        }
        Command::Eval { cfg, data, ckpt, out } => cmd_eval(cfg, data, ckpt.as_ref(), out.as_ref()),
        Command::Ablate { cfg, data, axis, budget, seeds, out } => {
            let config = cfg.load()?;
            let dataset = load_dataset(data)?;
            let axis: AblationAxis = axis.parse()?;
            let result = run_ablation(axis, &config, *budget, seeds, &dataset)?;
            write_ablation_artifacts(&result, out)?;
            print_json(&result)
        }
        Command::Tokenize { cfg, data, ckpt, out } => cmd_tokenize(cfg, data, ckpt.as_ref(), out),
        Command::Reconstruct { cfg, data, ckpt, out } => {
            cmd_reconstruct(cfg, data, ckpt.as_ref(), out)
        }
        Command::Plot { metrics, out } => cmd_plot(metrics, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // single machine-parsable line: CODE: message
            let msg = e.to_string().split_whitespace().collect::<Vec<_>>().join(" ");
            eprintln!("{}: {}", e.code(), msg);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
