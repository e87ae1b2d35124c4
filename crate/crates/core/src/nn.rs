//! Minimal transformer building blocks over candle with a named parameter
//! store, seed-deterministic initialization, and f32/f64 support.

use candle_core::{DType, Device, Tensor, Var, D};
use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub type Rng64 = ChaCha20Rng;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Normal(0, std) resampled beyond 2 std.
    TruncNormal(f64),
    Uniform(f64, f64),
    Zeros,
    Ones,
}

/// Insertion-ordered registry of trainable parameters.
///
/// Names are dotted paths (`encoder.block0.attn.wq.weight`); the order of
/// registration is the canonical order for checkpoints and the optimizer.
pub struct ParamStore {
    vars: IndexMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self { vars: IndexMap::new(), dtype, device: Device::Cpu }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn param(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        rng: &mut Rng64,
    ) -> Result<Var> {
        if self.vars.contains_key(name) {
            return Err(Error::State(format!("duplicate parameter name: {name}")));
        }
        let t = init_tensor(shape, init, self.dtype, &self.device, rng)?;
        let var = Var::from_tensor(&t)?;
        self.vars.insert(name.to_string(), var.clone());
        Ok(var)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.as_tensor().elem_count()).sum()
    }
}

/// Deterministic tensor init: values are drawn in f64 from the given rng in
/// row-major order, then cast, so f32 and f64 modes share the same stream.
pub fn init_tensor(
    shape: &[usize],
    init: Init,
    dtype: DType,
    device: &Device,
    rng: &mut Rng64,
) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = match init {
        Init::TruncNormal(std) => {
            let dist = Normal::new(0.0, std).map_err(|e| Error::Numeric(e.to_string()))?;
            (0..n)
                .map(|_| loop {
                    let x = dist.sample(rng);
                    if x.abs() <= 2.0 * std {
                        return x;
                    }
                })
                .collect()
        }
        Init::Uniform(lo, hi) => (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
    };
    let t = Tensor::from_vec(data, shape, device)?;
    Ok(t.to_dtype(dtype)?)
}

pub struct Linear {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Linear {
    pub fn new(
        ps: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut Rng64,
    ) -> Result<Self> {
        let weight = ps.param(
            &format!("{prefix}.weight"),
            &[out_dim, in_dim],
            Init::TruncNormal(0.02),
            rng,
        )?;
        let bias = if bias {
            Some(ps.param(&format!("{prefix}.bias"), &[out_dim], Init::Zeros, rng)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    /// x: (..., in_dim) -> (..., out_dim)
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let wt = self.weight.as_tensor().t()?.contiguous()?;
        let y = x.contiguous()?.broadcast_matmul(&wt)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b.as_tensor())?,
            None => y,
        })
    }
}

pub struct LayerNorm {
    pub gamma: Var,
    pub beta: Var,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, prefix: &str, dim: usize, rng: &mut Rng64) -> Result<Self> {
        let gamma = ps.param(&format!("{prefix}.ln_gamma"), &[dim], Init::Ones, rng)?;
        let beta = ps.param(&format!("{prefix}.ln_beta"), &[dim], Init::Zeros, rng)?;
        Ok(Self { gamma, beta, eps: 1e-6 })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let denom = (var + self.eps)?.sqrt()?;
        let normed = centered.broadcast_div(&denom)?;
        Ok(normed
            .broadcast_mul(self.gamma.as_tensor())?
            .broadcast_add(self.beta.as_tensor())?)
    }
}

/// Numerically stable softmax over the last dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?;
    let e = x.broadcast_sub(&max)?.exp()?;
    let sum = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&sum)?)
}

pub struct MultiHeadAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    heads: usize,
    head_dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        ps: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        rng: &mut Rng64,
    ) -> Result<Self> {
        if dim % heads != 0 {
            return Err(Error::Shape(format!("width {dim} not divisible by heads {heads}")));
        }
        Ok(Self {
            wq: Linear::new(ps, &format!("{prefix}.wq"), dim, dim, true, rng)?,
            wk: Linear::new(ps, &format!("{prefix}.wk"), dim, dim, true, rng)?,
            wv: Linear::new(ps, &format!("{prefix}.wv"), dim, dim, true, rng)?,
            wo: Linear::new(ps, &format!("{prefix}.wo"), dim, dim, true, rng)?,
            heads,
            head_dim: dim / heads,
        })
    }

    /// Full bidirectional attention. x: (B, L, D) -> (B, L, D)
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, d) = x.dims3()?;
        let split = |t: Tensor| -> Result<Tensor> {
            Ok(t.reshape((b, l, self.heads, self.head_dim))?
                .transpose(1, 2)?
                .contiguous()?)
        };
        let q = split(self.wq.forward(x)?)?;
        let k = split(self.wk.forward(x)?)?;
        let v = split(self.wv.forward(x)?)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? * scale)?;
        let attn = softmax_last(&scores)?;
        let out = attn.matmul(&v)?;
        let out = out.transpose(1, 2)?.contiguous()?.reshape((b, l, d))?;
        self.wo.forward(&out)
    }
}

pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(
        ps: &mut ParamStore,
        prefix: &str,
        dim: usize,
        hidden: usize,
        rng: &mut Rng64,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(ps, &format!("{prefix}.fc1"), dim, hidden, true, rng)?,
            fc2: Linear::new(ps, &format!("{prefix}.fc2"), hidden, dim, true, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.fc1.forward(x)?.gelu_erf()?;
        self.fc2.forward(&h)
    }
}

pub struct Block {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl Block {
    pub fn new(
        ps: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        rng: &mut Rng64,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(ps, &format!("{prefix}.ln1"), dim, rng)?,
            attn: MultiHeadAttention::new(ps, &format!("{prefix}.attn"), dim, heads, rng)?,
            ln2: LayerNorm::new(ps, &format!("{prefix}.ln2"), dim, rng)?,
            mlp: Mlp::new(ps, &format!("{prefix}.mlp"), dim, dim * 4, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.ln1.forward(x)?)?)?;
        Ok((&x + self.mlp.forward(&self.ln2.forward(&x)?)?)?)
    }
}

/// Pre-LN transformer stack. Depth 0 is the identity.
pub struct Transformer {
    blocks: Vec<Block>,
}

impl Transformer {
    pub fn new(
        ps: &mut ParamStore,
        prefix: &str,
        depth: usize,
        dim: usize,
        heads: usize,
        rng: &mut Rng64,
    ) -> Result<Self> {
        let blocks = (0..depth)
            .map(|i| Block::new(ps, &format!("{prefix}.block{i}"), dim, heads, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for b in &self.blocks {
            x = b.forward(&x)?;
        }
        Ok(x)
    }
}

/// Fixed 2D sinusoidal positional embedding for a g x g grid, row-major.
/// dim must be divisible by 4 (sin/cos pairs for each of y and x).
pub fn sincos_2d(grid: usize, dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    if dim % 4 != 0 {
        return Err(Error::Shape(format!("positional dim {dim} not divisible by 4")));
    }
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64))
        .collect();
    let mut data = Vec::with_capacity(grid * grid * dim);
    for y in 0..grid {
        for x in 0..grid {
            for &w in &omega {
                data.push((y as f64 * w).sin());
            }
            for &w in &omega {
                data.push((y as f64 * w).cos());
            }
            for &w in &omega {
                data.push((x as f64 * w).sin());
            }
            for &w in &omega {
                data.push((x as f64 * w).cos());
            }
        }
    }
    let t = Tensor::from_vec(data, (grid * grid, dim), device)?;
    Ok(t.to_dtype(dtype)?)
}

/// Flatten a tensor to a Vec<f64> regardless of dtype.
pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    let flat = t.flatten_all()?.to_dtype(DType::F64)?;
    Ok(flat.to_vec1::<f64>()?)
}

/// Scalar extraction.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
