//! Model and training configuration.
//!
//! Configs are flat TOML documents with `[model]` and `[train]` sections.
//! Every hyperparameter has a documented desk-scale default, so an empty
//! file is a valid config. Unknown keys are rejected.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CONFIG_ROOT_ENV: &str = "WINTOK_CONFIG_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderVariant {
    B,
    L,
    Xl,
    Custom { depth: usize, width: usize, heads: usize },
}

impl DecoderVariant {
    /// (depth, width, heads) of the variant.
    pub fn dims(&self) -> (usize, usize, usize) {
        match self {
            DecoderVariant::B => (12, 768, 12),
            DecoderVariant::L => (24, 1024, 16),
            DecoderVariant::Xl => (27, 1152, 16),
            DecoderVariant::Custom { depth, width, heads } => (*depth, *width, *heads),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherKind {
    FrozenRandom,
    Prototype,
    File,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    CosineDecay,
}

fn d_image_size() -> usize {
    32
}
fn d_patch_size() -> usize {
    4
}
fn d_in_channels() -> usize {
    3
}
fn d_encoder_depth() -> usize {
    2
}
fn d_encoder_width() -> usize {
    64
}
fn d_encoder_heads() -> usize {
    4
}
fn d_decoder_variant() -> DecoderVariant {
    DecoderVariant::Custom { depth: 4, width: 128, heads: 4 }
}
fn d_num_learnable_tokens() -> usize {
    16
}
fn d_num_codebooks() -> usize {
    2
}
fn d_entries_per_codebook() -> usize {
    64
}
fn d_code_dim_total() -> usize {
    8
}
fn d_beta() -> f64 {
    0.25
}
fn d_lambda_per() -> f64 {
    1.0
}
fn d_lambda_adv() -> f64 {
    0.1
}
fn d_lambda_sem() -> f64 {
    1.0
}
fn d_teacher_kind() -> TeacherKind {
    TeacherKind::Prototype
}
fn d_teacher_dim() -> usize {
    64
}
fn d_pooling() -> Pooling {
    Pooling::Mean
}
fn d_precision() -> Precision {
    Precision::F64
}
fn d_seed() -> u64 {
    0
}
fn d_false() -> bool {
    false
}
fn d_dead_code_window() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "d_image_size")]
    pub image_size: usize,
    #[serde(default = "d_patch_size")]
    pub patch_size: usize,
    #[serde(default = "d_in_channels")]
    pub in_channels: usize,
    #[serde(default = "d_encoder_depth")]
    pub encoder_depth: usize,
    #[serde(default = "d_encoder_width")]
    pub encoder_width: usize,
    #[serde(default = "d_encoder_heads")]
    pub encoder_heads: usize,
    #[serde(default = "d_decoder_variant")]
    pub decoder_variant: DecoderVariant,
    #[serde(default = "d_num_learnable_tokens")]
    pub num_learnable_tokens: usize,
    #[serde(default = "d_num_codebooks")]
    pub num_codebooks: usize,
    #[serde(default = "d_entries_per_codebook")]
    pub entries_per_codebook: usize,
    #[serde(default = "d_code_dim_total")]
    pub code_dim_total: usize,
    /// Commitment loss weight.
    #[serde(default = "d_beta")]
    pub beta: f64,
    #[serde(default = "d_lambda_per")]
    pub lambda_per: f64,
    #[serde(default = "d_lambda_adv")]
    pub lambda_adv: f64,
    /// Weight on the distillation loss; 0 disables distillation.
    #[serde(default = "d_lambda_sem")]
    pub lambda_sem: f64,
    #[serde(default = "d_teacher_kind")]
    pub teacher_kind: TeacherKind,
    #[serde(default = "d_teacher_dim")]
    pub teacher_dim: usize,
    #[serde(default = "d_pooling")]
    pub pooling: Pooling,
    #[serde(default = "d_precision")]
    pub precision: Precision,
    /// Use L1 instead of MSE for the reconstruction term.
    #[serde(default = "d_false")]
    pub recon_l1: bool,
    /// Normalize codes and inputs before nearest-entry search.
    #[serde(default = "d_false")]
    pub normalize_codes: bool,
    /// Re-init codebook entries unused for `dead_code_window` steps.
    #[serde(default = "d_false")]
    pub dead_code_reset: bool,
    #[serde(default = "d_dead_code_window")]
    pub dead_code_window: usize,
    /// Role reversal: learnable tokens reconstruct, pooled pixel tokens distill.
    #[serde(default = "d_false")]
    pub losetok: bool,
    #[serde(default = "d_seed")]
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty model config")
    }
}

fn d_base_lr() -> f64 {
    2e-4
}
fn d_warmup_fraction() -> f64 {
    0.05
}
fn d_schedule() -> Schedule {
    Schedule::CosineDecay
}
fn d_betas() -> (f64, f64) {
    (0.9, 0.95)
}
fn d_weight_decay() -> f64 {
    0.02
}
fn d_batch_size() -> usize {
    16
}
fn d_total_steps() -> usize {
    1000
}
fn d_adv_start() -> usize {
    500
}
fn d_grad_clip() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_base_lr")]
    pub base_lr: f64,
    #[serde(default = "d_warmup_fraction")]
    pub warmup_fraction: f64,
    #[serde(default = "d_schedule")]
    pub schedule: Schedule,
    #[serde(default = "d_betas")]
    pub optimizer_betas: (f64, f64),
    #[serde(default = "d_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "d_batch_size")]
    pub batch_size: usize,
    #[serde(default = "d_total_steps")]
    pub total_steps: usize,
    #[serde(default = "d_false")]
    pub ema_enabled: bool,
    #[serde(default = "d_adv_start")]
    pub adversarial_start_step: usize,
    /// Global-norm gradient clip; 0 disables.
    #[serde(default = "d_grad_clip")]
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty train config")
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Config {
    /// Number of pixel tokens N = (image_size / patch_size)^2.
    pub fn num_pixel_tokens(&self) -> usize {
        let g = self.model.image_size / self.model.patch_size;
        g * g
    }

    /// Theoretical code capacity V^C, exact.
    pub fn capacity(&self) -> num_bigint::BigUint {
        num_bigint::BigUint::from(self.model.entries_per_codebook)
            .pow(self.model.num_codebooks as u32)
    }

    /// Capacity rendered as "V^C = n" with a power-of-two form when exact.
    pub fn capacity_string(&self) -> String {
        let cap = self.capacity();
        let v = self.model.entries_per_codebook;
        let c = self.model.num_codebooks;
        if cap.count_ones() == 1 {
            format!("{v}^{c} = 2^{}", cap.trailing_zeros().unwrap_or(0))
        } else {
            format!("{v}^{c} = {cap}")
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialized form; stamped into checkpoints.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_toml_string().as_bytes());
        format!("{:x}", h.finalize())
    }

    /// All invariant violations; empty iff the config is valid.
    pub fn validate(&self) -> Vec<String> {
        let m = &self.model;
        let t = &self.train;
        let mut v = Vec::new();
        if m.num_codebooks < 1 {
            v.push("num_codebooks must be >= 1".into());
        } else if m.code_dim_total % m.num_codebooks != 0 {
            v.push(format!(
                "code_dim_total not divisible by C: {} % {} != 0",
                m.code_dim_total, m.num_codebooks
            ));
        }
        if m.patch_size == 0 || m.image_size % m.patch_size != 0 {
            v.push(format!(
                "image not patch-divisible: {} % {} != 0",
                m.image_size, m.patch_size
            ));
        }
        if m.num_learnable_tokens < 1 {
            v.push("num_learnable_tokens must be >= 1".into());
        }
        if m.entries_per_codebook < 2 {
            v.push("entries_per_codebook must be >= 2".into());
        }
        if m.encoder_width == 0 || m.encoder_heads == 0 || m.encoder_width % m.encoder_heads != 0 {
            v.push("encoder_width must be a positive multiple of encoder_heads".into());
        }
        let (dd, dw, dh) = m.decoder_variant.dims();
        if dw == 0 || dh == 0 || dw % dh != 0 {
            v.push("decoder width must be a positive multiple of decoder heads".into());
        }
        let _ = dd;
        if m.losetok {
            let mg = (m.num_learnable_tokens as f64).sqrt() as usize;
            if mg * mg != m.num_learnable_tokens {
                v.push("losetok requires num_learnable_tokens to be a perfect square".into());
            }
        }
        if m.beta < 0.0 || m.lambda_per < 0.0 || m.lambda_adv < 0.0 || m.lambda_sem < 0.0 {
            v.push("loss weights must be non-negative".into());
        }
        if !(t.base_lr > 0.0) {
            v.push(format!("base_lr must be > 0 (got {})", t.base_lr));
        }
        if !(0.0..1.0).contains(&t.warmup_fraction) {
            v.push("warmup_fraction must be in [0, 1)".into());
        }
        if t.total_steps == 0 {
            v.push("total_steps must be > 0".into());
        }
        if t.batch_size == 0 {
            v.push("batch_size must be > 0".into());
        }
        v
    }

    /// Errors with ConfigValidation if any invariant is violated.
    pub fn ensure_valid(&self) -> Result<()> {
        let report = self.validate();
        if report.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigValidation(report.join("; ")))
        }
    }
}

fn classify_toml_error(e: toml::de::Error) -> Error {
    let msg = e.to_string();
    if msg.contains("unknown field") {
        Error::ConfigUnknownKey(msg)
    } else {
        Error::ConfigSyntax(msg)
    }
}

/// Parse a config document, applying `--set key=value` overrides (dotted
/// paths, highest precedence) before deserialization. Does not validate.
pub fn parse_config(text: &str, overrides: &[(String, String)]) -> Result<Config> {
    let mut value: toml::Value =
        text.parse().map_err(|e: toml::de::Error| Error::ConfigSyntax(e.to_string()))?;
    for (key, raw) in overrides {
        set_dotted(&mut value, key, raw)?;
    }
    value.try_into().map_err(classify_toml_error)
}

fn set_dotted(root: &mut toml::Value, key: &str, raw: &str) -> Result<()> {
    let parsed: toml::Value = match format!("v = {raw}").parse::<toml::Value>() {
        Ok(t) => t["v"].clone(),
        // bare words (e.g. --set model.teacher_kind=prototype) read as strings
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::ConfigSyntax(format!("override path {key} crosses a non-table")))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    Err(Error::ConfigSyntax(format!("empty override key: {key}")))
}

/// Load and parse a config file. A relative path resolves against
/// `WINTOK_CONFIG_ROOT` when that variable is set.
pub fn load_config(path: &std::path::Path, overrides: &[(String, String)]) -> Result<Config> {
    let path = match std::env::var(CONFIG_ROOT_ENV) {
        Ok(root) if path.is_relative() => std::path::PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    };
    let text = std::fs::read_to_string(&path)?;
    parse_config(&text, overrides)
}
