//! Full tokenizer assembly and the single forward pass used by training
//! and evaluation, including the role-reversed (losetok) wiring.

use std::path::Path;

use candle_core::{DType, Tensor};

use crate::config::{Config, Precision};
use crate::decoder::Decoder;
use crate::distill::{cosine_loss, pool, StudentHead, Teacher};
use crate::encoder::{component_rng, Encoder, EncoderOutput, ImageBatch};
use crate::error::{Error, Result};
use crate::losses::{Discriminator, PerceptualNet};
use crate::nn::ParamStore;
use crate::quantizer::{Quantizer, QuantizeResult};

pub struct Model {
    pub cfg: Config,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub quantizer: Quantizer,
    pub decoder: Decoder,
    pub student_head: StudentHead,
    pub teacher: Teacher,
    pub perceptual: PerceptualNet,
    pub discriminator: Option<Discriminator>,
}

pub struct ForwardOutput {
    pub encoded: EncoderOutput,
    pub quant: QuantizeResult,
    pub reconstruction: Tensor,
    /// Pooled student-side vector in teacher space (B, D_t).
    pub pooled_student: Tensor,
    /// Pooled teacher vector (B, D_t), detached.
    pub pooled_teacher: Option<Tensor>,
    /// lambda_sem * cosine loss; None when distillation is off.
    pub semantic_loss: Option<Tensor>,
}

impl Model {
    pub fn new(cfg: Config, teacher_file: Option<&Path>) -> Result<Self> {
        cfg.ensure_valid()?;
        let m = &cfg.model;
        let dtype = match m.precision {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        };
        let mut params = ParamStore::new(dtype);
        // Per-component rngs keep each component's init invariant under
        // changes to the others (needed for controlled ablations).
        let mut enc_rng = component_rng(m.seed, "encoder");
        let encoder = Encoder::new(&mut params, m, &mut enc_rng)?;
        let mut q_rng = component_rng(m.seed, "quantizer");
        let quantizer = Quantizer::new(&mut params, m, &mut q_rng)?;
        let (grid, out_patch) = if m.losetok {
            let g = (m.num_learnable_tokens as f64).sqrt() as usize;
            if g * g != m.num_learnable_tokens || m.image_size % g != 0 {
                return Err(Error::ConfigValidation(
                    "losetok needs a square token count dividing the image size".into(),
                ));
            }
            (g, m.image_size / g)
        } else {
            (m.image_size / m.patch_size, m.patch_size)
        };
        let mut dec_rng = component_rng(m.seed, "decoder");
        let decoder = Decoder::new(&mut params, m, grid, out_patch, &mut dec_rng)?;
        let mut head_rng = component_rng(m.seed, "student_head");
        let student_head =
            StudentHead::new(&mut params, m.encoder_width, m.teacher_dim, &mut head_rng)?;
        let device = params.device().clone();
        let teacher = Teacher::new(m, dtype, &device, teacher_file)?;
        let perceptual = PerceptualNet::new(m.seed, m.in_channels, dtype, &device)?;
        let discriminator = if m.lambda_adv > 0.0 {
            let mut disc_rng = component_rng(m.seed, "discriminator");
            Some(Discriminator::new(&mut params, m.in_channels, &mut disc_rng)?)
        } else {
            None
        };
        Ok(Self {
            cfg,
            params,
            encoder,
            quantizer,
            decoder,
            student_head,
            teacher,
            perceptual,
            discriminator,
        })
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    /// Encoder + quantizer + decoder + distillation heads.
    ///
    /// Standard wiring: pixel tokens P are quantized and reconstructed;
    /// semantic tokens S are pooled and distilled. The losetok wiring swaps
    /// the roles: S feeds the quantizer/decoder on a sqrt(M) grid and the
    /// pooled P stream feeds distillation.
    pub fn forward(&self, x: &ImageBatch) -> Result<ForwardOutput> {
        let encoded = self.encoder.forward(x)?;
        let (recon_stream, distill_stream) = if self.cfg.model.losetok {
            (&encoded.semantic_tokens, &encoded.pixel_tokens)
        } else {
            (&encoded.pixel_tokens, &encoded.semantic_tokens)
        };

        let z = self.quantizer.project_in(recon_stream)?;
        let quant = self.quantizer.quantize(&z)?;
        let reconstruction = self.decoder.decode(&quant.ste_codes)?;

        let pooled = pool(distill_stream)?;
        let pooled_student = self.student_head.forward(&pooled)?;
        let (pooled_teacher, semantic_loss) = if self.cfg.model.lambda_sem > 0.0 {
            let t_tokens = self.teacher.teacher_tokens(x)?;
            let pooled_teacher = pool(&t_tokens)?;
            let sem = (cosine_loss(&pooled_student, &pooled_teacher)? * self.cfg.model.lambda_sem)?;
            (Some(pooled_teacher), Some(sem))
        } else {
            (None, None)
        };

        Ok(ForwardOutput {
            encoded,
            quant,
            reconstruction,
            pooled_student,
            pooled_teacher,
            semantic_loss,
        })
    }

    /// Pooled semantic-stream vectors for probing (no distillation head).
    pub fn pooled_semantic(&self, x: &ImageBatch) -> Result<Tensor> {
        let encoded = self.encoder.forward(x)?;
        let stream = if self.cfg.model.losetok {
            &encoded.pixel_tokens
        } else {
            &encoded.semantic_tokens
        };
        let pooled = pool(stream)?;
        self.student_head.forward(&pooled)
    }
}
