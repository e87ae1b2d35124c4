//! Optimization loop: warmup + cosine schedule, decoupled weight decay
//! with an exclusion list, alternating discriminator updates, bit-exact
//! checkpointing, and a seed-determined data order.

use std::io::{Read, Write};
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::encoder::{component_rng, ImageBatch};
use crate::error::{Error, Result};
use crate::losses::{
    adversarial_losses, perceptual_loss, recon_loss, total_loss, LossReport, LossTerms,
};
use crate::model::Model;
use crate::nn::to_f64_vec;

/// Linear ramp 0 -> base_lr over the warmup steps, then cosine decay to 0.
pub fn lr_at(step: usize, total_steps: usize, base_lr: f64, warmup_fraction: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::ConfigValidation("total_steps must be > 0".into()));
    }
    let warmup = (warmup_fraction * total_steps as f64).round() as usize;
    if warmup > 0 && step < warmup {
        return Ok(base_lr * step as f64 / warmup as f64);
    }
    let span = (total_steps - warmup).max(1);
    let progress = (step - warmup) as f64 / span as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos()))
}

/// Decoupled weight decay applies only to matrix weights: biases, norms,
/// positional embeddings, the token bank, and codebooks are excluded.
pub fn decays(name: &str) -> bool {
    name.ends_with(".weight")
}

/// AdamW over named parameters; moments keyed by name for checkpointing.
pub struct AdamW {
    pub t: u64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub eps: f64,
    pub m: IndexMap<String, Tensor>,
    pub v: IndexMap<String, Tensor>,
}

impl AdamW {
    pub fn new(betas: (f64, f64), weight_decay: f64) -> Self {
        Self { t: 0, betas, weight_decay, eps: 1e-8, m: IndexMap::new(), v: IndexMap::new() }
    }

    /// One update over the parameters selected by `filter`. Gradients are
    /// clipped jointly by global norm when `clip > 0`.
    pub fn step(
        &mut self,
        model: &Model,
        grads: &GradStore,
        lr: f64,
        clip: f64,
        filter: impl Fn(&str) -> bool,
    ) -> Result<()> {
        self.t += 1;
        let mut selected = Vec::new();
        let mut sq_norm = 0.0;
        for (name, var) in model.params.iter() {
            if !filter(name) {
                continue;
            }
            if let Some(g) = grads.get(var) {
                let gv = to_f64_vec(g)?;
                sq_norm += gv.iter().map(|x| x * x).sum::<f64>();
                selected.push((name.clone(), var.clone(), g.clone()));
            }
        }
        let scale = if clip > 0.0 && sq_norm.sqrt() > clip { clip / sq_norm.sqrt() } else { 1.0 };
        let (b1, b2) = self.betas;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (name, var, grad) in selected {
            let grad = if scale != 1.0 { (grad * scale)? } else { grad };
            let zeros = || Tensor::zeros(grad.dims(), grad.dtype(), grad.device());
            let m_prev = match self.m.get(&name) {
                Some(t) => t.clone(),
                None => zeros()?,
            };
            let v_prev = match self.v.get(&name) {
                Some(t) => t.clone(),
                None => zeros()?,
            };
            let m = ((m_prev * b1)? + (&grad * (1.0 - b1))?)?;
            let v = ((v_prev * b2)? + (grad.sqr()? * (1.0 - b2))?)?;
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            let mut new_val = (var.as_tensor() - (update * lr)?)?;
            if self.weight_decay > 0.0 && decays(&name) {
                new_val = (new_val - (var.as_tensor() * (lr * self.weight_decay))?)?;
            }
            var.set(&new_val)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name, v);
        }
        Ok(())
    }
}

pub struct TrainState {
    pub model: Model,
    pub opt_gen: AdamW,
    pub opt_disc: AdamW,
    pub step: usize,
    /// (C, V) selection tallies within the current dead-code window.
    pub window_usage: Vec<Vec<u64>>,
}

impl TrainState {
    pub fn new(model: Model) -> Self {
        let t = &model.cfg.train;
        let opt_gen = AdamW::new(t.optimizer_betas, t.weight_decay);
        let opt_disc = AdamW::new(t.optimizer_betas, t.weight_decay);
        let window_usage =
            vec![vec![0u64; model.cfg.model.entries_per_codebook]; model.cfg.model.num_codebooks];
        Self { model, opt_gen, opt_disc, step: 0, window_usage }
    }

    fn adversarial_active(&self) -> bool {
        self.model.discriminator.is_some()
            && self.step >= self.model.cfg.train.adversarial_start_step
    }
}

fn is_disc_param(name: &str) -> bool {
    name.starts_with("disc.")
}

/// One generator update on the total loss, plus an alternating
/// discriminator update on the same batch when adversarial training is
/// active. Returns the per-step loss report.
pub fn train_step(state: &mut TrainState, batch: &ImageBatch) -> Result<LossReport> {
    let cfg = state.model.cfg.clone();
    let out = state.model.forward(batch)?;

    let recon = recon_loss(&batch.data, &out.reconstruction, cfg.model.recon_l1)?;
    let perceptual = if cfg.model.lambda_per > 0.0 {
        Some(perceptual_loss(&batch.data, &out.reconstruction, &state.model.perceptual)?)
    } else {
        None
    };
    let adv = if state.adversarial_active() {
        let disc = state.model.discriminator.as_ref().expect("active implies present");
        let (gen_term, disc_term) = adversarial_losses(
            &batch.data,
            &out.reconstruction,
            disc,
            state.step,
            cfg.train.adversarial_start_step,
        )?;
        Some((gen_term, disc_term))
    } else {
        None
    };

    let terms = LossTerms {
        recon,
        codebook: out.quant.codebook_loss.clone(),
        commit: out.quant.commit_loss.clone(),
        perceptual,
        adversarial: adv.as_ref().map(|(g, _)| g.clone()),
        semantic: out.semantic_loss.clone(),
    };
    let (total, report) = total_loss(&terms, cfg.model.lambda_per, cfg.model.lambda_adv)?;

    let lr = lr_at(
        state.step,
        cfg.train.total_steps,
        cfg.train.base_lr,
        cfg.train.warmup_fraction,
    )?;
    let grads = total.backward()?;
    state
        .opt_gen
        .step(&state.model, &grads, lr, cfg.train.grad_clip, |n| !is_disc_param(n))?;

    if let Some((_, disc_term)) = adv {
        let disc_grads = disc_term.backward()?;
        state
            .opt_disc
            .step(&state.model, &disc_grads, lr, cfg.train.grad_clip, is_disc_param)?;
    }

    state.step += 1;

    if cfg.model.dead_code_reset {
        for (acc, batch_counts) in state.window_usage.iter_mut().zip(&out.quant.usage_counts) {
            for (a, &n) in acc.iter_mut().zip(batch_counts) {
                *a += n;
            }
        }
        let window = cfg.model.dead_code_window.max(1);
        if state.step % window == 0 {
            let dead: Vec<(usize, usize)> = state
                .window_usage
                .iter()
                .enumerate()
                .flat_map(|(ci, counts)| {
                    counts
                        .iter()
                        .enumerate()
                        .filter(|(_, &c)| c == 0)
                        .map(move |(vi, _)| (ci, vi))
                })
                .collect();
            // rng keyed by the reset step keeps reruns and resumes aligned
            let mut rng =
                component_rng(cfg.model.seed, &format!("dead_code.step.{}", state.step));
            state.model.quantizer.reinit_entries(&dead, &mut rng)?;
            for counts in state.window_usage.iter_mut() {
                counts.iter_mut().for_each(|c| *c = 0);
            }
        }
    }
    Ok(report)
}

/// Deterministic sample indices for a training step: per-epoch Fisher-Yates
/// shuffle keyed by (seed, epoch), read as one continuous stream.
pub fn batch_indices(seed: u64, num_samples: usize, batch_size: usize, step: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut out = Vec::with_capacity(batch_size);
    let mut epoch = usize::MAX;
    let mut perm: Vec<usize> = Vec::new();
    for j in 0..batch_size {
        let pos = step * batch_size + j;
        let e = pos / num_samples;
        if e != epoch {
            epoch = e;
            perm = (0..num_samples).collect();
            let mut rng = component_rng(seed, &format!("data.epoch.{e}"));
            perm.shuffle(&mut rng);
        }
        out.push(perm[pos % num_samples]);
    }
    out
}

/// Anything that can materialize batches for training/eval.
pub trait BatchSource {
    fn num_samples(&self) -> usize;
    fn batch(&self, indices: &[usize], dtype: DType) -> Result<ImageBatch>;
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub wall_time: f64,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: LossReport,
}

pub struct RunOptions<'a> {
    pub metrics: Option<&'a mut dyn Write>,
    pub checkpoint_dir: Option<&'a Path>,
    pub checkpoint_every: usize,
    pub dump_every: usize,
    pub on_dump: Option<&'a mut dyn FnMut(&TrainState, usize) -> Result<()>>,
}

impl Default for RunOptions<'_> {
    fn default() -> Self {
        Self {
            metrics: None,
            checkpoint_dir: None,
            checkpoint_every: 0,
            dump_every: 0,
            on_dump: None,
        }
    }
}

/// Drive training from the current step to `total_steps`. On a numeric
/// failure the last-good state (parameters before the failing update) is
/// dumped next to the checkpoints.
pub fn run_training<B: BatchSource>(
    state: &mut TrainState,
    data: &B,
    mut opts: RunOptions<'_>,
) -> Result<Vec<LossReport>> {
    let total = state.model.cfg.train.total_steps;
    let bs = state.model.cfg.train.batch_size;
    let seed = state.model.cfg.model.seed;
    let dtype = state.model.dtype();
    let t0 = std::time::Instant::now();
    let mut reports = Vec::new();
    while state.step < total {
        let step = state.step;
        let idx = batch_indices(seed, data.num_samples(), bs, step);
        let batch = data.batch(&idx, dtype)?;
        let report = match train_step(state, &batch) {
            Ok(r) => r,
            Err(e @ Error::Numeric(_)) => {
                if let Some(dir) = opts.checkpoint_dir {
                    std::fs::create_dir_all(dir)?;
                    save_checkpoint(state, &dir.join("last_good.ckpt"))?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        if let Some(w) = opts.metrics.as_deref_mut() {
            let rec = MetricsRecord {
                step,
                wall_time: t0.elapsed().as_secs_f64(),
                lr: lr_at(
                    step,
                    total,
                    state.model.cfg.train.base_lr,
                    state.model.cfg.train.warmup_fraction,
                )?,
                losses: report.clone(),
            };
            serde_json::to_writer(&mut *w, &rec).map_err(|e| Error::State(e.to_string()))?;
            w.write_all(b"\n")?;
        }
        if let Some(dir) = opts.checkpoint_dir {
            if opts.checkpoint_every > 0 && state.step % opts.checkpoint_every == 0 {
                std::fs::create_dir_all(dir)?;
                save_checkpoint(state, &dir.join(format!("step_{:06}.ckpt", state.step)))?;
            }
        }
        if opts.dump_every > 0 && state.step % opts.dump_every == 0 {
            if let Some(cb) = opts.on_dump.as_deref_mut() {
                cb(state, state.step)?;
            }
        }
        reports.push(report);
    }
    Ok(reports)
}

// Checkpoint format: magic, u64 manifest length, JSON manifest, then raw
// little-endian arrays in manifest order.
const CKPT_MAGIC: &[u8; 4] = b"WTCK";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Serialize, Deserialize)]
struct CkptManifest {
    version: u32,
    config_hash: String,
    step: usize,
    seed: u64,
    opt_gen_t: u64,
    opt_disc_t: u64,
    tensors: Vec<TensorEntry>,
}

fn dtype_tag(d: DType) -> &'static str {
    match d {
        DType::F32 => "f32",
        DType::F64 => "f64",
        _ => "other",
    }
}

fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    match t.dtype() {
        DType::F64 => {
            for x in t.flatten_all()?.to_vec1::<f64>()? {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        DType::F32 => {
            for x in t.flatten_all()?.to_vec1::<f32>()? {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        d => return Err(Error::State(format!("unsupported checkpoint dtype {d:?}"))),
    }
    Ok(())
}

fn read_tensor(r: &mut impl Read, shape: &[usize], dtype: &str) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let dev = candle_core::Device::Cpu;
    match dtype {
        "f64" => {
            let mut buf = [0u8; 8];
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            Ok(Tensor::from_vec(data, shape, &dev)?)
        }
        "f32" => {
            let mut buf = [0u8; 4];
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                data.push(f32::from_le_bytes(buf));
            }
            Ok(Tensor::from_vec(data, shape, &dev)?)
        }
        other => Err(Error::CheckpointMismatch(format!("unknown dtype {other}"))),
    }
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let model = &state.model;
    let mut ordered: Vec<(String, Tensor)> = Vec::new();
    for (name, var) in model.params.iter() {
        let t = var.as_tensor();
        let zeros = Tensor::zeros(t.dims(), t.dtype(), t.device())?;
        ordered.push((format!("param.{name}"), t.clone()));
        let moments: &[(&str, &IndexMap<String, Tensor>)] = if is_disc_param(name) {
            &[("m_disc", &state.opt_disc.m), ("v_disc", &state.opt_disc.v)]
        } else {
            &[("m_gen", &state.opt_gen.m), ("v_gen", &state.opt_gen.v)]
        };
        for (role, map) in moments {
            let mt = map.get(name).cloned().unwrap_or_else(|| zeros.clone());
            ordered.push((format!("{role}.{name}"), mt));
        }
    }
    // partial dead-code window tallies, so a resumed run resets the same
    // entries at the same steps
    let usage_flat: Vec<f64> = state
        .window_usage
        .iter()
        .flat_map(|c| c.iter().map(|&n| n as f64))
        .collect();
    let (c, v) = (state.window_usage.len(), state.window_usage.first().map_or(0, Vec::len));
    ordered.push((
        "usage.window".into(),
        Tensor::from_vec(usage_flat, (c, v), &candle_core::Device::Cpu)?,
    ));

    let tensors = ordered
        .iter()
        .map(|(name, t)| TensorEntry {
            name: name.clone(),
            shape: t.dims().to_vec(),
            dtype: dtype_tag(t.dtype()).into(),
        })
        .collect();
    let manifest = CkptManifest {
        version: 1,
        config_hash: model.cfg.hash(),
        step: state.step,
        seed: model.cfg.model.seed,
        opt_gen_t: state.opt_gen.t,
        opt_disc_t: state.opt_disc.t,
        tensors,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::State(e.to_string()))?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(CKPT_MAGIC)?;
    f.write_all(&(json.len() as u64).to_le_bytes())?;
    f.write_all(&json)?;
    for (_, t) in &ordered {
        write_tensor(&mut f, t)?;
    }
    f.flush()?;
    Ok(())
}

/// Rebuild a train state from a checkpoint. The model is reconstructed
/// from `cfg`, then every parameter and optimizer moment is overwritten
/// bit-exactly from the file.
pub fn load_checkpoint(
    path: &Path,
    cfg: &crate::config::Config,
    teacher_file: Option<&Path>,
    override_hash: bool,
) -> Result<TrainState> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::CheckpointMismatch("bad checkpoint magic".into()));
    }
    let mut lenb = [0u8; 8];
    f.read_exact(&mut lenb)?;
    let mut json = vec![0u8; u64::from_le_bytes(lenb) as usize];
    f.read_exact(&mut json)?;
    let manifest: CkptManifest =
        serde_json::from_slice(&json).map_err(|e| Error::CheckpointMismatch(e.to_string()))?;
    if manifest.config_hash != cfg.hash() && !override_hash {
        return Err(Error::CheckpointMismatch(format!(
            "config hash {} != checkpoint hash {}",
            cfg.hash(),
            manifest.config_hash
        )));
    }
    let model = Model::new(cfg.clone(), teacher_file)?;
    let mut state = TrainState::new(model);
    state.step = manifest.step;
    state.opt_gen.t = manifest.opt_gen_t;
    state.opt_disc.t = manifest.opt_disc_t;
    for entry in &manifest.tensors {
        let t = read_tensor(&mut f, &entry.shape, &entry.dtype)?;
        let (role, name) = entry
            .name
            .split_once('.')
            .ok_or_else(|| Error::CheckpointMismatch(format!("bad entry {}", entry.name)))?;
        match role {
            "param" => {
                let var = state.model.params.get(name).ok_or_else(|| {
                    Error::CheckpointMismatch(format!("unknown parameter {name}"))
                })?;
                if var.dims() != entry.shape.as_slice() {
                    return Err(Error::CheckpointMismatch(format!(
                        "shape mismatch for {name}: model {:?}, file {:?}",
                        var.dims(),
                        entry.shape
                    )));
                }
                var.set(&t.to_dtype(var.dtype())?)?;
            }
            "m_gen" => {
                state.opt_gen.m.insert(name.to_string(), t);
            }
            "v_gen" => {
                state.opt_gen.v.insert(name.to_string(), t);
            }
            "m_disc" => {
                state.opt_disc.m.insert(name.to_string(), t);
            }
            "v_disc" => {
                state.opt_disc.v.insert(name.to_string(), t);
            }
            "usage" => {
                let flat = to_f64_vec(&t)?;
                let v = entry.shape.get(1).copied().unwrap_or(0);
                state.window_usage = flat
                    .chunks(v.max(1))
                    .map(|row| row.iter().map(|&x| x as u64).collect())
                    .collect();
            }
            other => {
                return Err(Error::CheckpointMismatch(format!("unknown role {other}")));
            }
        }
    }
    Ok(state)
}
