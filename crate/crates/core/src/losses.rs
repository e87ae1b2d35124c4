//! Pixel-side loss assembly and the total objective.
//!
//! pixel_total = recon + codebook + commit + lambda_per * perceptual
//!             + lambda_adv * adversarial; total = semantic + pixel_total.

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::encoder::component_rng;
use crate::error::{Error, Result};
use crate::nn::{init_tensor, scalar, Init, ParamStore, Rng64};

/// Mean squared error over all pixels (or mean absolute error with `l1`).
pub fn recon_loss(x: &Tensor, xhat: &Tensor, l1: bool) -> Result<Tensor> {
    if x.dims() != xhat.dims() {
        return Err(Error::Shape(format!("x {:?} vs xhat {:?}", x.dims(), xhat.dims())));
    }
    let diff = (x - xhat)?;
    Ok(if l1 { diff.abs()?.mean_all()? } else { diff.sqr()?.mean_all()? })
}

/// Frozen seeded 3-stage conv stack standing in for a pretrained feature
/// network. Weights are plain tensors, never trained or checkpointed.
pub struct PerceptualNet {
    kernels: Vec<Tensor>,
}

impl PerceptualNet {
    pub fn new(seed: u64, in_channels: usize, dtype: DType, device: &Device) -> Result<Self> {
        let mut rng = component_rng(seed, "perceptual");
        let chans = [in_channels, 8, 16, 32];
        let mut kernels = Vec::new();
        for i in 0..3 {
            let fan_in = (chans[i] * 9) as f64;
            let k = init_tensor(
                &[chans[i + 1], chans[i], 3, 3],
                Init::TruncNormal(1.0 / fan_in.sqrt()),
                dtype,
                device,
                &mut rng,
            )?;
            kernels.push(k);
        }
        Ok(Self { kernels })
    }

    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut feats = Vec::with_capacity(3);
        let mut h = x.clone();
        for k in &self.kernels {
            h = h.conv2d(k, 1, 2, 1, 1)?.gelu_erf()?;
            feats.push(h.clone());
        }
        Ok(feats)
    }
}

/// Sum over 3 depths of the mean squared feature distance.
pub fn perceptual_loss(x: &Tensor, xhat: &Tensor, net: &PerceptualNet) -> Result<Tensor> {
    let fx = net.features(&x.detach())?;
    let fh = net.features(xhat)?;
    let mut total: Option<Tensor> = None;
    for (a, b) in fx.iter().zip(fh.iter()) {
        let term = (a - b)?.sqr()?.mean_all()?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    Ok(total.expect("three stages"))
}

fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

/// 4-layer strided conv patch discriminator with hinge losses.
pub struct Discriminator {
    kernels: Vec<Var>,
    biases: Vec<Var>,
}

impl Discriminator {
    pub fn new(ps: &mut ParamStore, in_channels: usize, rng: &mut Rng64) -> Result<Self> {
        let chans = [in_channels, 8, 16, 32, 1];
        let mut kernels = Vec::new();
        let mut biases = Vec::new();
        for i in 0..4 {
            let fan_in = (chans[i] * 9) as f64;
            kernels.push(ps.param(
                &format!("disc.conv{i}.weight"),
                &[chans[i + 1], chans[i], 3, 3],
                Init::TruncNormal(1.0 / fan_in.sqrt()),
                rng,
            )?);
            biases.push(ps.param(&format!("disc.conv{i}.bias"), &[chans[i + 1]], Init::Zeros, rng)?);
        }
        Ok(Self { kernels, biases })
    }

    /// Patch logit map (B, 1, h, w).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for i in 0..4 {
            let stride = if i < 3 { 2 } else { 1 };
            h = h.conv2d(self.kernels[i].as_tensor(), 1, stride, 1, 1)?;
            let b = self.biases[i].as_tensor().reshape((1, (), 1, 1))?;
            h = h.broadcast_add(&b)?;
            if i < 3 {
                h = leaky_relu(&h, 0.2)?;
            }
        }
        Ok(h)
    }
}

/// Hinge GAN pair. `gen_term` reaches only the generator (real branch and
/// the fake branch of `disc_term` are detached); `disc_term` reaches only
/// the discriminator.
pub fn adversarial_losses(
    x: &Tensor,
    xhat: &Tensor,
    disc: &Discriminator,
    step: usize,
    start_step: usize,
) -> Result<(Tensor, Tensor)> {
    if step < start_step {
        return Err(Error::State(format!(
            "adversarial losses requested at step {step}, start is {start_step}"
        )));
    }
    let d_real = disc.forward(&x.detach())?;
    let d_fake_detached = disc.forward(&xhat.detach())?;
    let one = 1.0;
    let disc_term = ((one - d_real)?.relu()?.mean_all()?
        + (one + d_fake_detached)?.relu()?.mean_all()?)?;
    // Generator term: discriminator output on xhat, with grads blocked from
    // reaching discriminator weights via a frozen copy of its parameters.
    let frozen = FrozenDisc::from(disc);
    let gen_term = frozen.forward(xhat)?.mean_all()?.neg()?;
    Ok((gen_term, disc_term))
}

struct FrozenDisc {
    kernels: Vec<Tensor>,
    biases: Vec<Tensor>,
}

impl From<&Discriminator> for FrozenDisc {
    fn from(d: &Discriminator) -> Self {
        Self {
            kernels: d.kernels.iter().map(|k| k.as_tensor().detach()).collect(),
            biases: d.biases.iter().map(|b| b.as_tensor().detach()).collect(),
        }
    }
}

impl FrozenDisc {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for i in 0..4 {
            let stride = if i < 3 { 2 } else { 1 };
            h = h.conv2d(&self.kernels[i], 1, stride, 1, 1)?;
            let b = self.biases[i].reshape((1, (), 1, 1))?;
            h = h.broadcast_add(&b)?;
            if i < 3 {
                h = leaky_relu(&h, 0.2)?;
            }
        }
        Ok(h)
    }
}

/// Per-step loss components. `perceptual` and `adversarial` are raw
/// (unweighted); the weighted sums live in `pixel_total` and `total`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LossReport {
    pub recon: f64,
    pub codebook: f64,
    pub commit: f64,
    pub perceptual: f64,
    pub adversarial: f64,
    pub semantic: f64,
    pub pixel_total: f64,
    pub total: f64,
}

pub struct LossTerms {
    pub recon: Tensor,
    pub codebook: Tensor,
    pub commit: Tensor,
    pub perceptual: Option<Tensor>,
    pub adversarial: Option<Tensor>,
    pub semantic: Option<Tensor>,
}

/// Assemble the total objective tensor and its scalar report.
pub fn total_loss(
    terms: &LossTerms,
    lambda_per: f64,
    lambda_adv: f64,
) -> Result<(Tensor, LossReport)> {
    let zero = Tensor::zeros((), terms.recon.dtype(), terms.recon.device())?;
    let per = terms.perceptual.clone().unwrap_or_else(|| zero.clone());
    let adv = terms.adversarial.clone().unwrap_or_else(|| zero.clone());
    let sem = terms.semantic.clone().unwrap_or(zero);

    let report = LossReport {
        recon: scalar(&terms.recon)?,
        codebook: scalar(&terms.codebook)?,
        commit: scalar(&terms.commit)?,
        perceptual: scalar(&per)?,
        adversarial: scalar(&adv)?,
        semantic: scalar(&sem)?,
        pixel_total: 0.0,
        total: 0.0,
    };
    for (name, v) in [
        ("recon", report.recon),
        ("codebook", report.codebook),
        ("commit", report.commit),
        ("perceptual", report.perceptual),
        ("adversarial", report.adversarial),
        ("semantic", report.semantic),
    ] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss component: {name}")));
        }
    }
    let pixel_total = report.recon
        + report.codebook
        + report.commit
        + lambda_per * report.perceptual
        + lambda_adv * report.adversarial;
    let report = LossReport { pixel_total, total: report.semantic + pixel_total, ..report };

    let mut pixel = ((&terms.recon + &terms.codebook)? + &terms.commit)?;
    if let Some(p) = &terms.perceptual {
        pixel = (pixel + (p * lambda_per)?)?;
    }
    if let Some(a) = &terms.adversarial {
        pixel = (pixel + (a * lambda_adv)?)?;
    }
    let total = match &terms.semantic {
        Some(s) => (s + pixel)?,
        None => pixel,
    };
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn img(b: usize) -> Tensor {
        Tensor::rand(-1.0f64, 1.0, (b, 3, 32, 32), &Device::Cpu).unwrap()
    }

    #[test]
    fn recon_basics() {
        let x = img(2);
        assert_eq!(scalar(&recon_loss(&x, &x, false).unwrap()).unwrap(), 0.0);
        let ones = Tensor::ones((1, 3, 8, 8), DType::F64, &Device::Cpu).unwrap();
        let zeros = Tensor::zeros((1, 3, 8, 8), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(scalar(&recon_loss(&ones, &zeros, false).unwrap()).unwrap(), 1.0);
        let y = img(2);
        let ab = scalar(&recon_loss(&x, &y, false).unwrap()).unwrap();
        let ba = scalar(&recon_loss(&y, &x, false).unwrap()).unwrap();
        assert_eq!(ab, ba);
        assert_eq!(scalar(&recon_loss(&ones, &zeros, true).unwrap()).unwrap(), 1.0);
    }

    #[test]
    fn recon_shape_mismatch() {
        let x = img(1);
        let y = img(2);
        assert!(matches!(recon_loss(&x, &y, false), Err(Error::Shape(_))));
    }

    #[test]
    fn perceptual_identity_and_nonneg() {
        let net = PerceptualNet::new(0, 3, DType::F64, &Device::Cpu).unwrap();
        let x = img(1);
        assert_eq!(scalar(&perceptual_loss(&x, &x, &net).unwrap()).unwrap(), 0.0);
        let y = img(1);
        assert!(scalar(&perceptual_loss(&x, &y, &net).unwrap()).unwrap() >= 0.0);
        // frozen: same seed, same value
        let net2 = PerceptualNet::new(0, 3, DType::F64, &Device::Cpu).unwrap();
        assert_eq!(
            scalar(&perceptual_loss(&x, &y, &net).unwrap()).unwrap(),
            scalar(&perceptual_loss(&x, &y, &net2).unwrap()).unwrap()
        );
    }

    #[test]
    fn zero_discriminator_hinge_values() {
        // With D == 0: disc_term = relu(1) + relu(1) = 2, gen_term = 0.
        let mut ps = ParamStore::new(DType::F64);
        let mut rng = Rng64::seed_from_u64(0);
        let disc = Discriminator::new(&mut ps, 3, &mut rng).unwrap();
        for k in &disc.kernels {
            k.set(&Tensor::zeros(k.dims(), DType::F64, &Device::Cpu).unwrap()).unwrap();
        }
        let x = img(2);
        let xhat = img(2);
        let (gen, dt) = adversarial_losses(&x, &xhat, &disc, 10, 0).unwrap();
        assert_eq!(scalar(&dt).unwrap(), 2.0);
        assert_eq!(scalar(&gen).unwrap(), 0.0);
    }

    #[test]
    fn adversarial_before_start_is_state_error() {
        let mut ps = ParamStore::new(DType::F64);
        let mut rng = Rng64::seed_from_u64(0);
        let disc = Discriminator::new(&mut ps, 3, &mut rng).unwrap();
        let x = img(1);
        assert!(matches!(
            adversarial_losses(&x, &x, &disc, 3, 5),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn gen_term_has_no_disc_gradient() {
        let mut ps = ParamStore::new(DType::F64);
        let mut rng = Rng64::seed_from_u64(1);
        let disc = Discriminator::new(&mut ps, 3, &mut rng).unwrap();
        let x = img(1);
        let xhat = Var::from_tensor(&img(1)).unwrap();
        let (gen, dt) = adversarial_losses(&x, xhat.as_tensor(), &disc, 0, 0).unwrap();
        let grads = gen.backward().unwrap();
        assert!(grads.get(&xhat).is_some());
        for k in &disc.kernels {
            assert!(grads.get(k).is_none());
        }
        // and disc_term touches disc weights but not the generator image
        let grads = dt.backward().unwrap();
        assert!(grads.get(&xhat).is_none());
        assert!(grads.get(&disc.kernels[0]).is_some());
    }

    fn t(v: f64) -> Tensor {
        Tensor::full(v, (), &Device::Cpu).unwrap()
    }

    #[test]
    fn total_loss_arithmetic() {
        let terms = LossTerms {
            recon: t(0.5),
            codebook: t(0.2),
            commit: t(0.1),
            perceptual: Some(t(0.3)),
            adversarial: Some(t(0.4)),
            semantic: Some(t(0.7)),
        };
        let (total, rep) = total_loss(&terms, 2.0, 0.5).unwrap();
        let expect_pixel = 0.5 + 0.2 + 0.1 + 2.0 * 0.3 + 0.5 * 0.4;
        assert_eq!(rep.pixel_total, expect_pixel);
        assert_eq!(rep.total, 0.7 + expect_pixel);
        assert!((scalar(&total).unwrap() - rep.total).abs() < 1e-12);
    }

    #[test]
    fn total_loss_zero_weights_and_zeros() {
        let terms = LossTerms {
            recon: t(0.0),
            codebook: t(0.0),
            commit: t(0.0),
            perceptual: None,
            adversarial: None,
            semantic: None,
        };
        let (total, rep) = total_loss(&terms, 0.0, 0.0).unwrap();
        assert_eq!(rep.total, 0.0);
        assert_eq!(scalar(&total).unwrap(), 0.0);
        let terms = LossTerms {
            recon: t(0.3),
            codebook: t(0.2),
            commit: t(0.1),
            perceptual: Some(t(9.0)),
            adversarial: Some(t(9.0)),
            semantic: Some(t(0.4)),
        };
        let (_, rep) = total_loss(&terms, 0.0, 0.0).unwrap();
        assert!((rep.total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nan_component_is_numeric_error_naming_term() {
        let terms = LossTerms {
            recon: t(f64::NAN),
            codebook: t(0.0),
            commit: t(0.0),
            perceptual: None,
            adversarial: None,
            semantic: None,
        };
        match total_loss(&terms, 1.0, 1.0) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("recon")),
            other => panic!("expected NumericError, got {other:?}"),
        }
    }
}
