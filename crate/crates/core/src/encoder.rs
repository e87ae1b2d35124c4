//! Unified encoder: patch embedding for pixel tokens, a learnable token
//! bank for semantic tokens, and a shared bidirectional transformer over
//! the concatenated sequence.

use candle_core::{Tensor, Var};
use rand::SeedableRng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{sincos_2d, Init, Linear, ParamStore, Rng64, Transformer};

/// Batched images in [-1, 1], shape (B, C, H, W).
#[derive(Clone)]
pub struct ImageBatch {
    pub data: Tensor,
    pub sample_ids: Vec<String>,
    pub labels: Option<Vec<usize>>,
}

impl ImageBatch {
    pub fn batch_size(&self) -> usize {
        self.data.dims()[0]
    }

    pub fn validate(&self, image_size: usize, in_channels: usize) -> Result<()> {
        let dims = self.data.dims();
        if dims.len() != 4 {
            return Err(Error::Shape(format!("image batch must be 4-D, got {dims:?}")));
        }
        let (b, c, h, w) = (dims[0], dims[1], dims[2], dims[3]);
        if h != w || h != image_size || c != in_channels {
            return Err(Error::Shape(format!(
                "expected {b}x{in_channels}x{image_size}x{image_size}, got {dims:?}"
            )));
        }
        if self.sample_ids.len() != b {
            return Err(Error::Shape("sample_ids length != batch size".into()));
        }
        let v = crate::nn::to_f64_vec(&self.data)?;
        if v.iter().any(|x| !x.is_finite() || x.abs() > 1.0 + 1e-6) {
            return Err(Error::Numeric("image values outside [-1, 1]".into()));
        }
        Ok(())
    }
}

/// M trainable tokens plus their trainable 1D positional embeddings.
pub struct LearnableTokenBank {
    pub tokens: Var,
    pub pos_1d: Var,
    pub num_tokens: usize,
}

impl LearnableTokenBank {
    pub fn new(
        ps: &mut ParamStore,
        prefix: &str,
        m: usize,
        dim: usize,
        rng: &mut Rng64,
    ) -> Result<Self> {
        if m < 1 {
            return Err(Error::ConfigValidation("num_learnable_tokens must be >= 1".into()));
        }
        Ok(Self {
            tokens: ps.param(&format!("{prefix}.tokens"), &[m, dim], Init::TruncNormal(0.02), rng)?,
            pos_1d: ps.param(&format!("{prefix}.pos_1d"), &[m, dim], Init::TruncNormal(0.02), rng)?,
            num_tokens: m,
        })
    }

    /// Bank + 1D positions, broadcast to (B, M, D).
    pub fn expand(&self, batch: usize) -> Result<Tensor> {
        let t = (self.tokens.as_tensor() + self.pos_1d.as_tensor())?;
        let (m, d) = t.dims2()?;
        Ok(t.unsqueeze(0)?.broadcast_as((batch, m, d))?.contiguous()?)
    }
}

/// The two output streams, split positionally: first N outputs are pixel
/// tokens, last M are semantic tokens.
pub struct EncoderOutput {
    pub pixel_tokens: Tensor,
    pub semantic_tokens: Tensor,
}

pub struct Encoder {
    patch_proj: Linear,
    pos_2d: Tensor,
    pub bank: LearnableTokenBank,
    transformer: Transformer,
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub width: usize,
}

/// (B, C, H, W) -> (B, N, p*p*C) raw patch pixels, row-major grid order.
pub fn patchify_pixels(x: &Tensor, patch: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Shape(format!("image {h}x{w} not divisible by patch {patch}")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let t = x
        .reshape((b, c, gh, patch, gw, patch))?
        .permute((0, 2, 4, 1, 3, 5))?
        .contiguous()?
        .reshape((b, gh * gw, c * patch * patch))?;
    Ok(t)
}

impl Encoder {
    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng64) -> Result<Self> {
        if cfg.patch_size == 0 || cfg.image_size % cfg.patch_size != 0 {
            return Err(Error::ConfigValidation("image not patch-divisible".into()));
        }
        let grid = cfg.image_size / cfg.patch_size;
        let d = cfg.encoder_width;
        let patch_dim = cfg.patch_size * cfg.patch_size * cfg.in_channels;
        let patch_proj = Linear::new(ps, "encoder.patch_embed", patch_dim, d, true, rng)?;
        let pos_2d = sincos_2d(grid, d, ps.dtype(), ps.device())?;
        let bank = LearnableTokenBank::new(ps, "bank", cfg.num_learnable_tokens, d, rng)?;
        let transformer =
            Transformer::new(ps, "encoder", cfg.encoder_depth, d, cfg.encoder_heads, rng)?;
        Ok(Self {
            patch_proj,
            pos_2d,
            bank,
            transformer,
            image_size: cfg.image_size,
            patch_size: cfg.patch_size,
            in_channels: cfg.in_channels,
            width: d,
        })
    }

    /// Images -> raw pixel tokens P^o: learned linear map of each patch
    /// plus the fixed 2D sinusoidal positional signal.
    pub fn patchify_embed(&self, x: &ImageBatch) -> Result<Tensor> {
        let patches = patchify_pixels(&x.data, self.patch_size)?;
        let tokens = self.patch_proj.forward(&patches)?;
        Ok(tokens.broadcast_add(&self.pos_2d)?)
    }

    /// Shared transformer over [P^o ⊕ S^o]; positional split of the output.
    pub fn encode(&self, p0: &Tensor) -> Result<EncoderOutput> {
        let (b, n, d) = p0.dims3()?;
        if d != self.width {
            return Err(Error::Shape(format!(
                "pixel token width {d} != encoder width {}",
                self.width
            )));
        }
        let s0 = self.bank.expand(b)?;
        let seq = Tensor::cat(&[p0, &s0], 1)?;
        let out = self.transformer.forward(&seq)?;
        let pixel_tokens = out.narrow(1, 0, n)?.contiguous()?;
        let semantic_tokens = out.narrow(1, n, self.bank.num_tokens)?.contiguous()?;
        Ok(EncoderOutput { pixel_tokens, semantic_tokens })
    }

    pub fn forward(&self, x: &ImageBatch) -> Result<EncoderOutput> {
        let p0 = self.patchify_embed(x)?;
        self.encode(&p0)
    }
}

/// Seeded rng for a named model component, decorrelated by role.
pub fn component_rng(seed: u64, role: &str) -> Rng64 {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(role.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    Rng64::from_seed(key)
}
