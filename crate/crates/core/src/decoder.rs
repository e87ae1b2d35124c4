//! Transformer decoder: quantized code-space tokens back to pixels.

use candle_core::Tensor;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{sincos_2d, Linear, ParamStore, Rng64, Transformer};

pub struct Decoder {
    input_proj: Linear,
    pos_2d: Tensor,
    transformer: Transformer,
    head: Linear,
    pub grid: usize,
    pub patch_size: usize,
    pub in_channels: usize,
}

impl Decoder {
    /// `grid` is the token grid side (N = grid^2); `patch_size` the output
    /// patch side, so the image is (grid * patch_size)^2. The standard
    /// pipeline uses the encoder grid; the role-reversed one a sqrt(M) grid.
    pub fn new(
        ps: &mut ParamStore,
        cfg: &ModelConfig,
        grid: usize,
        patch_size: usize,
        rng: &mut Rng64,
    ) -> Result<Self> {
        let (depth, width, heads) = cfg.decoder_variant.dims();
        let input_proj = Linear::new(ps, "decoder.input_proj", cfg.code_dim_total, width, true, rng)?;
        let pos_2d = sincos_2d(grid, width, ps.dtype(), ps.device())?;
        let transformer = Transformer::new(ps, "decoder", depth, width, heads, rng)?;
        let patch_dim = patch_size * patch_size * cfg.in_channels;
        let head = Linear::new(ps, "decoder.head", width, patch_dim, true, rng)?;
        Ok(Self { input_proj, pos_2d, transformer, head, grid, patch_size, in_channels: cfg.in_channels })
    }

    /// (B, N, code_dim_total) -> (B, C, H, W) clamped to [-1, 1].
    pub fn decode(&self, q_tokens: &Tensor) -> Result<Tensor> {
        let (_b, n, _d) = q_tokens.dims3()?;
        if n != self.grid * self.grid {
            return Err(Error::Shape(format!(
                "token count {n} does not match grid {}x{}",
                self.grid, self.grid
            )));
        }
        let x = self.input_proj.forward(q_tokens)?;
        let x = x.broadcast_add(&self.pos_2d)?;
        let x = self.transformer.forward(&x)?;
        let patches = self.head.forward(&x)?;
        let img = unpatchify(&patches, self.grid, self.patch_size, self.in_channels)?;
        Ok(img.clamp(-1.0, 1.0)?)
    }
}

/// (B, N, p*p*C) -> (B, C, H, W); exact spatial inverse of
/// [`crate::encoder::patchify_pixels`].
pub fn unpatchify(patches: &Tensor, grid: usize, patch: usize, channels: usize) -> Result<Tensor> {
    let (b, n, pd) = patches.dims3()?;
    if n != grid * grid || pd != patch * patch * channels {
        return Err(Error::Shape(format!(
            "unpatchify: got ({b},{n},{pd}), want n={} patch_dim={}",
            grid * grid,
            patch * patch * channels
        )));
    }
    let t = patches
        .reshape((b, grid, grid, channels, patch, patch))?
        .permute((0, 3, 1, 4, 2, 5))?
        .contiguous()?
        .reshape((b, channels, grid * patch, grid * patch))?;
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DecoderVariant;
    use crate::encoder::patchify_pixels;
    use candle_core::{DType, Device};
    use rand::SeedableRng;

    fn cfg() -> ModelConfig {
        let mut m = ModelConfig::default();
        m.code_dim_total = 8;
        m.num_codebooks = 2;
        m.decoder_variant = DecoderVariant::Custom { depth: 1, width: 16, heads: 2 };
        m
    }

    #[test]
    fn patchify_unpatchify_bit_exact() {
        let x = Tensor::rand(-1.0f64, 1.0, (2, 3, 32, 32), &Device::Cpu).unwrap();
        let p = patchify_pixels(&x, 8).unwrap();
        let back = unpatchify(&p, 4, 8, 3).unwrap();
        let a = crate::nn::to_f64_vec(&x).unwrap();
        let b = crate::nn::to_f64_vec(&back).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_patch_identity_reshape() {
        let x = Tensor::rand(-1.0f64, 1.0, (1, 3, 8, 8), &Device::Cpu).unwrap();
        let p = patchify_pixels(&x, 8).unwrap();
        assert_eq!(p.dims(), &[1, 1, 192]);
        let back = unpatchify(&p, 1, 8, 3).unwrap();
        assert_eq!(
            crate::nn::to_f64_vec(&x).unwrap(),
            crate::nn::to_f64_vec(&back).unwrap()
        );
    }

    #[test]
    fn constant_patches_give_constant_image() {
        let p = Tensor::full(0.37f64, (1, 16, 12), &Device::Cpu).unwrap();
        let img = unpatchify(&p, 4, 2, 3).unwrap();
        let v = crate::nn::to_f64_vec(&img).unwrap();
        assert!(v.iter().all(|x| (*x - 0.37).abs() < 1e-15));
    }

    #[test]
    fn decode_shapes_and_range() {
        let m = cfg();
        let mut ps = ParamStore::new(DType::F64);
        let mut rng = Rng64::seed_from_u64(5);
        let dec = Decoder::new(&mut ps, &m, 4, 8, &mut rng).unwrap();
        let q = Tensor::rand(-3.0f64, 3.0, (2, 16, 8), &Device::Cpu).unwrap();
        let img = dec.decode(&q).unwrap();
        assert_eq!(img.dims(), &[2, 3, 32, 32]);
        let v = crate::nn::to_f64_vec(&img).unwrap();
        assert!(v.iter().all(|x| *x >= -1.0 && *x <= 1.0));
    }

    #[test]
    fn decode_is_deterministic() {
        let m = cfg();
        let mut ps = ParamStore::new(DType::F64);
        let mut rng = Rng64::seed_from_u64(5);
        let dec = Decoder::new(&mut ps, &m, 4, 8, &mut rng).unwrap();
        let q = Tensor::rand(-1.0f64, 1.0, (1, 16, 8), &Device::Cpu).unwrap();
        let a = crate::nn::to_f64_vec(&dec.decode(&q).unwrap()).unwrap();
        let b = crate::nn::to_f64_vec(&dec.decode(&q).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_token_count_is_shape_error() {
        let m = cfg();
        let mut ps = ParamStore::new(DType::F64);
        let mut rng = Rng64::seed_from_u64(5);
        let dec = Decoder::new(&mut ps, &m, 4, 8, &mut rng).unwrap();
        let q = Tensor::rand(-1.0f64, 1.0, (1, 15, 8), &Device::Cpu).unwrap();
        assert!(matches!(dec.decode(&q), Err(Error::Shape(_))));
    }

    #[test]
    fn variant_param_counts_ordered() {
        let count = |variant: DecoderVariant| {
            let mut m = cfg();
            m.decoder_variant = variant;
            let mut ps = ParamStore::new(DType::F32);
            let mut rng = Rng64::seed_from_u64(0);
            Decoder::new(&mut ps, &m, 4, 8, &mut rng).unwrap();
            ps.num_scalars()
        };
        let b = count(DecoderVariant::B);
        let l = count(DecoderVariant::L);
        let xl = count(DecoderVariant::Xl);
        assert!(b < l && l < xl, "{b} {l} {xl}");
    }
}
