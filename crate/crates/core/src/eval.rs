//! Metrics (PSNR, SSIM, desk-FID, linear probe, silhouette, codebook
//! usage) and the ablation harness.
//!
//! desk-FID runs over a frozen seeded extractor, not pretrained inception
//! features; the absolute number is not comparable to published rFID.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::{Config, DecoderVariant, TeacherKind};
use crate::data::Dataset;
use crate::encoder::component_rng;
use crate::error::{Error, Result};
use crate::losses::recon_loss;
use crate::model::Model;
use crate::nn::{init_tensor, scalar, to_f64_vec, Init};
use crate::quantizer::usage_stats;
use crate::training::{run_training, RunOptions, TrainState};

// ---------------------------------------------------------------------------
// pixel metrics

fn image_pair_check(x: &Tensor, xhat: &Tensor) -> Result<()> {
    if x.dims() != xhat.dims() {
        return Err(Error::Shape(format!("x {:?} vs xhat {:?}", x.dims(), xhat.dims())));
    }
    Ok(())
}

pub const PSNR_CAP_DB: f64 = 100.0;

/// Peak signal-to-noise ratio in dB. Inputs in [-1, 1] are mapped to
/// [0, 1]; identical inputs return the 100 dB cap.
pub fn psnr(x: &Tensor, xhat: &Tensor) -> Result<f64> {
    image_pair_check(x, xhat)?;
    let a = to_f64_vec(x)?;
    let b = to_f64_vec(xhat)?;
    let mse: f64 = a
        .iter()
        .zip(&b)
        .map(|(p, q)| {
            let d = (p + 1.0) / 2.0 - (q + 1.0) / 2.0;
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    if !mse.is_finite() {
        return Err(Error::Numeric("non-finite psnr input".into()));
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

const SSIM_WINDOW: usize = 8;
const SSIM_STRIDE: usize = 4;

fn to_gray01(x: &Tensor) -> Result<(Vec<f64>, usize, usize)> {
    let (c, h, w) = x.dims3().map_err(|_| Error::Shape(format!("want CHW, got {:?}", x.dims())))?;
    let v = to_f64_vec(x)?;
    let mut g = vec![0.0; h * w];
    for ch in 0..c {
        for i in 0..h * w {
            g[i] += ((v[ch * h * w + i] + 1.0) / 2.0) / c as f64;
        }
    }
    Ok((g, h, w))
}

/// Mean windowed SSIM on channel-mean grayscale, 8x8 windows at stride 4,
/// k1=0.01 k2=0.03, dynamic range 1.0.
pub fn ssim(x: &Tensor, xhat: &Tensor) -> Result<f64> {
    image_pair_check(x, xhat)?;
    let (ga, h, w) = to_gray01(x)?;
    let (gb, _, _) = to_gray01(xhat)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!("image {h}x{w} smaller than {SSIM_WINDOW} window")));
    }
    let c1 = (0.01f64).powi(2);
    let c2 = (0.03f64).powi(2);
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut windows = 0usize;
    let mut y = 0;
    while y + SSIM_WINDOW <= h {
        let mut x0 = 0;
        while x0 + SSIM_WINDOW <= w {
            let (mut ma, mut mb) = (0.0, 0.0);
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    ma += ga[(y + dy) * w + x0 + dx];
                    mb += gb[(y + dy) * w + x0 + dx];
                }
            }
            ma /= n;
            mb /= n;
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let da = ga[(y + dy) * w + x0 + dx] - ma;
                    let db = gb[(y + dy) * w + x0 + dx] - mb;
                    va += da * da;
                    vb += db * db;
                    cov += da * db;
                }
            }
            va /= n - 1.0;
            vb /= n - 1.0;
            cov /= n - 1.0;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            windows += 1;
            x0 += SSIM_STRIDE;
        }
        y += SSIM_STRIDE;
    }
    Ok(total / windows as f64)
}

// ---------------------------------------------------------------------------
// desk-FID

fn mean_and_cov(feats: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = feats.len();
    let f = feats.first().map(|r| r.len()).unwrap_or(0);
    if n < 2 || f == 0 {
        return Err(Error::Shape(format!("need >= 2 feature rows, got {n}")));
    }
    let mut mu = DVector::zeros(f);
    for row in feats {
        if row.len() != f {
            return Err(Error::Shape("ragged feature rows".into()));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite features".into()));
        }
        mu += DVector::from_column_slice(row);
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(f, f);
    for row in feats {
        let d = DVector::from_column_slice(row) - &mu;
        cov += &d * d.transpose();
    }
    cov /= (n - 1) as f64;
    for i in 0..f {
        cov[(i, i)] += 1e-6;
    }
    Ok((mu, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    // Symmetrize first: m arrives as a product of symmetric PSD factors and
    // carries fp asymmetry.
    let s = (m + m.transpose()) / 2.0;
    let eig = s.symmetric_eigen();
    let vals = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets:
/// ||mu_r - mu_f||^2 + tr(S_r + S_f - 2 (S_r S_f)^{1/2}).
pub fn desk_fid(real: &[Vec<f64>], fake: &[Vec<f64>]) -> Result<f64> {
    let (mu_r, cov_r) = mean_and_cov(real)?;
    let (mu_f, cov_f) = mean_and_cov(fake)?;
    if mu_r.len() != mu_f.len() {
        return Err(Error::Shape(format!("feature dims {} vs {}", mu_r.len(), mu_f.len())));
    }
    // (S_r S_f)^{1/2} computed via the symmetric form
    // S_r^{1/2} S_f S_r^{1/2}, which shares the trace.
    let half_r = sym_sqrt(&cov_r);
    let inner = sym_sqrt(&(&half_r * &cov_f * &half_r));
    let diff = &mu_r - &mu_f;
    let val = diff.dot(&diff) + cov_r.trace() + cov_f.trace() - 2.0 * inner.trace();
    if !val.is_finite() {
        return Err(Error::Numeric("non-finite desk_fid".into()));
    }
    Ok(val.max(0.0))
}

/// Frozen seeded conv extractor for desk-FID. Feature vector = spatially
/// pooled channel means of all three stages (8 + 16 + 32 dims).
pub struct DeskFeatureExtractor {
    kernels: Vec<Tensor>,
}

impl DeskFeatureExtractor {
    pub fn new(seed: u64, in_channels: usize, dtype: DType, device: &Device) -> Result<Self> {
        let mut rng = component_rng(seed, "desk_fid.extractor");
        let chans = [in_channels, 8, 16, 32];
        let mut kernels = Vec::new();
        for i in 0..3 {
            let fan_in = (chans[i] * 9) as f64;
            kernels.push(init_tensor(
                &[chans[i + 1], chans[i], 3, 3],
                Init::TruncNormal(1.0 / fan_in.sqrt()),
                dtype,
                device,
                &mut rng,
            )?);
        }
        Ok(Self { kernels })
    }

    /// (B, C, H, W) -> B rows of 56 features.
    pub fn features(&self, x: &Tensor) -> Result<Vec<Vec<f64>>> {
        let b = x.dims4().map_err(|_| Error::Shape(format!("want BCHW, got {:?}", x.dims())))?.0;
        let mut per_sample = vec![Vec::with_capacity(56); b];
        let mut h = x.clone();
        for k in &self.kernels {
            h = h.conv2d(k, 1, 2, 1, 1)?.gelu_erf()?;
            let pooled = h.mean(3)?.mean(2)?; // (B, C)
            let flat = to_f64_vec(&pooled)?;
            let c = flat.len() / b;
            for (i, row) in per_sample.iter_mut().enumerate() {
                row.extend_from_slice(&flat[i * c..(i + 1) * c]);
            }
        }
        Ok(per_sample)
    }
}

// ---------------------------------------------------------------------------
// linear probe

fn check_labels(n: usize, labels: &[usize]) -> Result<usize> {
    if labels.len() != n {
        return Err(Error::Shape(format!("{n} samples vs {} labels", labels.len())));
    }
    let k = labels.iter().copied().max().map(|m| m + 1).unwrap_or(0);
    let mut counts = vec![0usize; k];
    for &l in labels {
        counts[l] += 1;
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::ProbeData("need at least 2 distinct classes".into()));
    }
    Ok(k)
}

/// Damped Newton on L2-regularized (1e-4) multinomial logistic regression;
/// converged when the gradient norm drops below 1e-6.
fn fit_logistic(xs: &DMatrix<f64>, labels: &[usize], k: usize) -> Result<DMatrix<f64>> {
    let n = xs.nrows();
    let d = xs.ncols(); // includes bias column
    let l2 = 1e-4;
    let mut w = DMatrix::<f64>::zeros(k, d);
    for _iter in 0..200 {
        // probabilities (n, k)
        let logits = xs * w.transpose();
        let mut probs = logits;
        for mut row in probs.row_iter_mut() {
            let mx = row.max();
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            row /= z;
        }
        // gradient (k, d): (P - Y)^T X / n + l2 * W
        let mut grad = DMatrix::<f64>::zeros(k, d);
        for i in 0..n {
            for c in 0..k {
                let err = probs[(i, c)] - if labels[i] == c { 1.0 } else { 0.0 };
                for j in 0..d {
                    grad[(c, j)] += err * xs[(i, j)] / n as f64;
                }
            }
        }
        grad += l2 * &w;
        let gnorm = grad.norm();
        if gnorm < 1e-6 {
            return Ok(w);
        }
        // Full Hessian over the flattened (k*d) weights.
        let kd = k * d;
        let mut hess = DMatrix::<f64>::zeros(kd, kd);
        for i in 0..n {
            for a in 0..k {
                for b in 0..k {
                    let pab = probs[(i, a)] * (if a == b { 1.0 } else { 0.0 } - probs[(i, b)]);
                    if pab == 0.0 {
                        continue;
                    }
                    for j1 in 0..d {
                        for j2 in 0..d {
                            hess[(a * d + j1, b * d + j2)] +=
                                pab * xs[(i, j1)] * xs[(i, j2)] / n as f64;
                        }
                    }
                }
            }
        }
        for i in 0..kd {
            hess[(i, i)] += l2 + 1e-10;
        }
        let g = DVector::from_iterator(kd, (0..k).flat_map(|c| (0..d).map(move |j| (c, j))).map(|(c, j)| grad[(c, j)]));
        let step = hess
            .cholesky()
            .map(|ch| ch.solve(&g))
            .ok_or_else(|| Error::Numeric("probe Hessian not positive definite".into()))?;
        for c in 0..k {
            for j in 0..d {
                w[(c, j)] -= step[c * d + j];
            }
        }
    }
    Err(Error::Numeric("probe failed to converge to gradient norm < 1e-6".into()))
}

/// Linear-probe top-1 accuracy: standardize features, stratified 80/20
/// split keyed by `seed`, multinomial logistic regression on the train
/// split, accuracy on held out.
pub fn linear_probe(features: &[Vec<f64>], labels: &[usize], seed: u64) -> Result<f64> {
    let n = features.len();
    let k = check_labels(n, labels)?;
    let d = features[0].len();

    // stratified split
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for c in 0..k {
        let mut idx: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
        if idx.is_empty() {
            continue;
        }
        let mut rng = component_rng(seed, &format!("probe.split.{c}"));
        idx.shuffle(&mut rng);
        let n_test = (idx.len() as f64 * 0.2).round() as usize;
        let n_test = n_test.min(idx.len().saturating_sub(1));
        test_idx.extend_from_slice(&idx[..n_test]);
        train_idx.extend_from_slice(&idx[n_test..]);
    }
    if test_idx.is_empty() {
        return Err(Error::ProbeData("held-out split is empty".into()));
    }

    // standardization from the train split
    let mut mean = vec![0.0; d];
    for &i in &train_idx {
        for j in 0..d {
            mean[j] += features[i][j];
        }
    }
    for m in mean.iter_mut() {
        *m /= train_idx.len() as f64;
    }
    let mut std = vec![0.0; d];
    for &i in &train_idx {
        for j in 0..d {
            std[j] += (features[i][j] - mean[j]).powi(2);
        }
    }
    for s in std.iter_mut() {
        *s = (*s / train_idx.len() as f64).sqrt();
        if *s < 1e-12 {
            *s = 1.0;
        }
    }
    let design = |rows: &[usize]| -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), d + 1, |r, c| {
            if c == d {
                1.0
            } else {
                (features[rows[r]][c] - mean[c]) / std[c]
            }
        })
    };
    let x_train = design(&train_idx);
    let y_train: Vec<usize> = train_idx.iter().map(|&i| labels[i]).collect();
    let w = fit_logistic(&x_train, &y_train, k)?;

    let x_test = design(&test_idx);
    let logits = &x_test * w.transpose();
    let mut correct = 0usize;
    for (r, &i) in test_idx.iter().enumerate() {
        let mut best = 0;
        for c in 1..k {
            if logits[(r, c)] > logits[(r, best)] {
                best = c;
            }
        }
        if best == labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / test_idx.len() as f64)
}

// ---------------------------------------------------------------------------
// silhouette

/// Mean silhouette coefficient with Euclidean distance; singleton clusters
/// contribute 0.
pub fn silhouette(features: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    let n = features.len();
    let k = check_labels(n, labels)?;
    let mut counts = vec![0usize; k];
    for &l in labels {
        counts[l] += 1;
    }
    if counts.iter().any(|&c| c == 1) {
        return Err(Error::ProbeData("every class needs >= 2 samples".into()));
    }
    let dist = |a: usize, b: usize| -> f64 {
        features[a]
            .iter()
            .zip(&features[b])
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = vec![0.0; k];
        for j in 0..n {
            if i != j {
                sums[labels[j]] += dist(i, j);
            }
        }
        let own = labels[i];
        let a = sums[own] / (counts[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let s = if a.max(b) > 0.0 { (b - a) / a.max(b) } else { 0.0 };
        total += s;
    }
    Ok(total / n as f64)
}

// ---------------------------------------------------------------------------
// full evaluation

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UsageStat {
    pub used_fraction: f64,
    pub perplexity: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr_mean: f64,
    pub ssim_mean: f64,
    /// Fréchet distance over the frozen seeded extractor; NOT comparable
    /// to published rFID numbers.
    pub desk_fid: f64,
    pub probe_acc: f64,
    pub recon_mse: f64,
    pub usage: Vec<UsageStat>,
    pub silhouette: f64,
}

impl MetricReport {
    pub fn all_finite(&self) -> bool {
        [self.psnr_mean, self.ssim_mean, self.desk_fid, self.probe_acc, self.recon_mse, self.silhouette]
            .iter()
            .all(|v| v.is_finite())
            && self.usage.iter().all(|u| u.used_fraction.is_finite() && u.perplexity.is_finite())
    }
}

/// Evaluate a model over a labeled dataset: reconstruction metrics on every
/// sample, desk-FID real vs reconstructed, linear probe + silhouette on
/// pooled semantic vectors.
pub fn evaluate(model: &Model, data: &Dataset, seed: u64) -> Result<MetricReport> {
    if data.is_empty() {
        return Err(Error::ProbeData("empty dataset".into()));
    }
    let labels = data
        .labels
        .clone()
        .ok_or_else(|| Error::ProbeData("evaluation requires labels".into()))?;
    let dtype = model.dtype();
    let extractor = DeskFeatureExtractor::new(seed, data.channels, dtype, &Device::Cpu)?;

    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    let mut mse_sum = 0.0;
    let mut real_feats = Vec::with_capacity(data.len());
    let mut fake_feats = Vec::with_capacity(data.len());
    let mut pooled = Vec::with_capacity(data.len());
    let c = model.cfg.model.num_codebooks;
    let v = model.cfg.model.entries_per_codebook;
    let mut counts = vec![vec![0u64; v]; c];

    for batch in data.full_batches(32, dtype)? {
        let out = model.forward(&batch)?;
        let b = batch.data.dims()[0];
        for i in 0..b {
            let x = batch.data.get(i)?;
            let xh = out.reconstruction.get(i)?;
            psnr_sum += psnr(&x, &xh)?;
            ssim_sum += ssim(&x, &xh)?;
        }
        mse_sum += scalar(&recon_loss(&batch.data, &out.reconstruction, false)?)? * b as f64;
        real_feats.extend(extractor.features(&batch.data)?);
        fake_feats.extend(extractor.features(&out.reconstruction)?);
        for (cb, batch_counts) in counts.iter_mut().zip(&out.quant.usage_counts) {
            for (acc, &n) in cb.iter_mut().zip(batch_counts) {
                *acc += n;
            }
        }
        let sem = model.pooled_semantic(&batch)?;
        let flat = to_f64_vec(&sem)?;
        let dim = flat.len() / b;
        for i in 0..b {
            pooled.push(flat[i * dim..(i + 1) * dim].to_vec());
        }
    }

    let n = data.len() as f64;
    let usage = usage_stats(&counts)?
        .into_iter()
        .map(|(used_fraction, perplexity)| UsageStat { used_fraction, perplexity })
        .collect();
    let report = MetricReport {
        psnr_mean: psnr_sum / n,
        ssim_mean: ssim_sum / n,
        desk_fid: desk_fid(&real_feats, &fake_feats)?,
        probe_acc: linear_probe(&pooled, &labels, seed)?,
        recon_mse: mse_sum / n,
        usage,
        silhouette: silhouette(&pooled, &labels)?,
    };
    if !report.all_finite() {
        return Err(Error::Numeric("non-finite metric in report".into()));
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// ablations

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    TokenCount,
    TeacherKind,
    DecoderSize,
    Losetok,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "token_count" => Ok(Self::TokenCount),
            "teacher_kind" => Ok(Self::TeacherKind),
            "decoder_size" => Ok(Self::DecoderSize),
            "losetok" => Ok(Self::Losetok),
            other => Err(Error::ConfigValidation(format!("unknown ablation axis {other}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub final_recon_mse: f64,
    pub report: MetricReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationPoint {
    pub setting: String,
    pub per_seed: Vec<SeedOutcome>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationResult {
    pub axis: AblationAxis,
    pub seeds: Vec<u64>,
    pub budget: usize,
    pub points: Vec<AblationPoint>,
}

/// Desk-scale settings swept per axis.
pub fn axis_settings(axis: AblationAxis) -> Vec<String> {
    match axis {
        AblationAxis::TokenCount => vec!["4".into(), "16".into(), "64".into()],
        AblationAxis::TeacherKind => vec!["frozen_random".into(), "prototype".into()],
        AblationAxis::DecoderSize => vec!["small".into(), "medium".into(), "large".into()],
        AblationAxis::Losetok => vec!["standard".into(), "losetok".into()],
    }
}

/// Apply one axis setting to a copy of the base config; everything else
/// (seeds, data order, budget) stays fixed across points.
pub fn apply_setting(base: &Config, axis: AblationAxis, setting: &str) -> Result<Config> {
    let mut cfg = base.clone();
    match axis {
        AblationAxis::TokenCount => {
            cfg.model.num_learnable_tokens = setting
                .parse()
                .map_err(|_| Error::ConfigValidation(format!("bad token count {setting}")))?;
        }
        AblationAxis::TeacherKind => {
            cfg.model.teacher_kind = match setting {
                "frozen_random" => TeacherKind::FrozenRandom,
                "prototype" => TeacherKind::Prototype,
                other => {
                    return Err(Error::ConfigValidation(format!("bad teacher kind {other}")))
                }
            };
        }
        AblationAxis::DecoderSize => {
            cfg.model.decoder_variant = match setting {
                "small" => DecoderVariant::Custom { depth: 1, width: 64, heads: 4 },
                "medium" => DecoderVariant::Custom { depth: 2, width: 96, heads: 4 },
                "large" => DecoderVariant::Custom { depth: 3, width: 128, heads: 4 },
                other => {
                    return Err(Error::ConfigValidation(format!("bad decoder size {other}")))
                }
            };
        }
        AblationAxis::Losetok => {
            cfg.model.losetok = match setting {
                "standard" => false,
                "losetok" => true,
                other => return Err(Error::ConfigValidation(format!("bad losetok flag {other}"))),
            };
        }
    }
    Ok(cfg)
}

/// Train one configuration for `budget` steps and evaluate it. Returns the
/// eval report plus the mean recon MSE over the last 10 training steps.
pub fn train_and_eval(cfg: &Config, data: &Dataset, budget: usize) -> Result<(f64, MetricReport)> {
    let mut cfg = cfg.clone();
    cfg.train.total_steps = budget;
    let model = Model::new(cfg.clone(), None)?;
    let mut state = TrainState::new(model);
    let reports = run_training(&mut state, data, RunOptions::default())?;
    let tail = reports.len().saturating_sub(10).max(0);
    let final_mse =
        reports[tail..].iter().map(|r| r.recon).sum::<f64>() / (reports.len() - tail) as f64;
    let report = evaluate(&state.model, data, cfg.model.seed)?;
    Ok((final_mse, report))
}

/// Sweep one ablation axis: every (setting, seed) pair trains with the same
/// step budget and the seed-keyed data order.
pub fn run_ablation(
    axis: AblationAxis,
    base: &Config,
    budget: usize,
    seeds: &[u64],
    data: &Dataset,
) -> Result<AblationResult> {
    if budget == 0 {
        return Err(Error::ConfigValidation("ablation budget must be > 0".into()));
    }
    if seeds.is_empty() {
        return Err(Error::ConfigValidation("need at least one seed".into()));
    }
    let mut points = Vec::new();
    for setting in axis_settings(axis) {
        let cfg = apply_setting(base, axis, &setting)?;
        let mut per_seed = Vec::new();
        for &seed in seeds {
            let mut cfg = cfg.clone();
            cfg.model.seed = seed;
            let (final_recon_mse, report) = train_and_eval(&cfg, data, budget)?;
            per_seed.push(SeedOutcome { seed, final_recon_mse, report });
        }
        points.push(AblationPoint { setting, per_seed });
    }
    Ok(AblationResult { axis, seeds: seeds.to_vec(), budget, points })
}

/// Write the ablation result as JSON plus one PNG line plot per metric
/// (one series per seed).
pub fn write_ablation_artifacts(result: &AblationResult, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(
        out_dir.join("ablation.json"),
        serde_json::to_vec_pretty(result).map_err(|e| Error::State(e.to_string()))?,
    )?;
    for (metric, pick) in [
        ("recon_mse", &(|o: &SeedOutcome| o.report.recon_mse) as &dyn Fn(&SeedOutcome) -> f64),
        ("probe_acc", &|o: &SeedOutcome| o.report.probe_acc),
        ("desk_fid", &|o: &SeedOutcome| o.report.desk_fid),
    ] {
        let series: Vec<(String, Vec<f64>)> = result
            .seeds
            .iter()
            .enumerate()
            .map(|(si, seed)| {
                (
                    format!("seed {seed}"),
                    result.points.iter().map(|p| pick(&p.per_seed[si])).collect(),
                )
            })
            .collect();
        let labels: Vec<String> = result.points.iter().map(|p| p.setting.clone()).collect();
        crate::plot::line_plot(
            &out_dir.join(format!("{metric}.png")),
            &format!("{metric} vs setting"),
            &labels,
            &series,
        )?;
    }
    Ok(())
}
