//! Multi-codebook vector quantization with straight-through gradients.
//!
//! Each token's code vector is split into C sub-vectors of dimension
//! d = code_dim_total / C; each sub-vector is matched against its own
//! codebook by Euclidean distance (lowest index wins ties). Capacity per
//! token is V^C.

use candle_core::{IndexOp, Tensor, Var};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{to_f64_vec, Init, Linear, ParamStore, Rng64};

pub struct QuantizeResult {
    /// (B, N, C) selected entry per codebook.
    pub indices: Vec<u32>,
    pub indices_shape: (usize, usize, usize),
    /// (B, N, code_dim_total), gradient flows to codebook entries.
    pub quantized: Tensor,
    /// Forward value equals `quantized`; gradient w.r.t. z is identity.
    pub ste_codes: Tensor,
    pub codebook_loss: Tensor,
    pub commit_loss: Tensor,
    /// (C, V) selection tallies for this batch.
    pub usage_counts: Vec<Vec<u64>>,
}

pub struct Quantizer {
    /// (C, V, d) codebook entries.
    pub books: Var,
    pub proj_in: Linear,
    pub num_codebooks: usize,
    pub entries: usize,
    pub sub_dim: usize,
    pub beta: f64,
    pub normalize_codes: bool,
}

impl Quantizer {
    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng64) -> Result<Self> {
        let c = cfg.num_codebooks;
        let v = cfg.entries_per_codebook;
        if c < 1 || cfg.code_dim_total % c != 0 {
            return Err(Error::ConfigValidation("code_dim_total not divisible by C".into()));
        }
        let d = cfg.code_dim_total / c;
        let lim = 1.0 / v as f64;
        let books = ps.param("quantizer.books", &[c, v, d], Init::Uniform(-lim, lim), rng)?;
        let proj_in = Linear::new(
            ps,
            "quantizer.proj_in",
            cfg.encoder_width,
            cfg.code_dim_total,
            true,
            rng,
        )?;
        Ok(Self {
            books,
            proj_in,
            num_codebooks: c,
            entries: v,
            sub_dim: d,
            beta: cfg.beta,
            normalize_codes: cfg.normalize_codes,
        })
    }

    /// Test/bench constructor with explicit codebook entries.
    pub fn with_books(
        ps: &mut ParamStore,
        books: &[Vec<Vec<f64>>],
        encoder_width: usize,
        beta: f64,
        rng: &mut Rng64,
    ) -> Result<Self> {
        let c = books.len();
        let v = books[0].len();
        let d = books[0][0].len();
        let flat: Vec<f64> = books.iter().flatten().flatten().copied().collect();
        let t = Tensor::from_vec(flat, (c, v, d), ps.device())?.to_dtype(ps.dtype())?;
        let var = ps.param("quantizer.books", &[c, v, d], Init::Zeros, rng)?;
        var.set(&t)?;
        let proj_in = Linear::new(ps, "quantizer.proj_in", encoder_width, c * d, true, rng)?;
        Ok(Self {
            books: var,
            proj_in,
            num_codebooks: c,
            entries: v,
            sub_dim: d,
            beta,
            normalize_codes: false,
        })
    }

    pub fn code_dim_total(&self) -> usize {
        self.num_codebooks * self.sub_dim
    }

    /// Project encoder-width tokens down to code space.
    pub fn project_in(&self, p: &Tensor) -> Result<Tensor> {
        self.proj_in.forward(p)
    }

    /// Nearest-entry indices, computed in f64. Ties break to the lowest
    /// index; distances accumulate in sub-vector element order so results
    /// match an exhaustive oracle exactly.
    fn nearest_indices(&self, z: &[f64], tokens: usize) -> Result<Vec<u32>> {
        let (c, v, d) = (self.num_codebooks, self.entries, self.sub_dim);
        let books = to_f64_vec(self.books.as_tensor())?;
        let normalize = |x: &mut [f64]| {
            let n = x.iter().map(|a| a * a).sum::<f64>().sqrt();
            if n > 0.0 {
                x.iter_mut().for_each(|a| *a /= n);
            }
        };
        let mut entries = books;
        if self.normalize_codes {
            for e in entries.chunks_mut(d) {
                normalize(e);
            }
        }
        let mut out = Vec::with_capacity(tokens * c);
        let mut sub = vec![0.0; d];
        for t in 0..tokens {
            for ci in 0..c {
                sub.copy_from_slice(&z[t * c * d + ci * d..t * c * d + (ci + 1) * d]);
                if self.normalize_codes {
                    normalize(&mut sub);
                }
                let mut best = 0u32;
                let mut best_dist = f64::INFINITY;
                for vi in 0..v {
                    let e = &entries[(ci * v + vi) * d..(ci * v + vi + 1) * d];
                    let mut dist = 0.0;
                    for k in 0..d {
                        let diff = sub[k] - e[k];
                        dist += diff * diff;
                    }
                    if dist < best_dist {
                        best_dist = dist;
                        best = vi as u32;
                    }
                }
                out.push(best);
            }
        }
        Ok(out)
    }

    /// Quantize code-space tokens z: (B, N, code_dim_total).
    pub fn quantize(&self, z: &Tensor) -> Result<QuantizeResult> {
        let (b, n, dim) = z.dims3()?;
        if dim != self.code_dim_total() {
            return Err(Error::Shape(format!(
                "code dim {dim} != {}",
                self.code_dim_total()
            )));
        }
        let z_host = to_f64_vec(z)?;
        if z_host.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("NaN/Inf in quantizer input".into()));
        }
        let indices = self.nearest_indices(&z_host, b * n)?;

        // Assemble Q by differentiable gather so codebook_loss reaches entries.
        let (c, v) = (self.num_codebooks, self.entries);
        let mut per_book = Vec::with_capacity(c);
        for ci in 0..c {
            let idx: Vec<u32> = (0..b * n).map(|t| indices[t * c + ci]).collect();
            let idx = Tensor::from_vec(idx, b * n, z.device())?;
            let book = self.books.as_tensor().i(ci)?.contiguous()?;
            let picked = book.index_select(&idx, 0)?; // (B*N, d)
            per_book.push(picked);
        }
        let refs: Vec<&Tensor> = per_book.iter().collect();
        let quantized = Tensor::cat(&refs, 1)?.reshape((b, n, dim))?;

        let ste_codes = (z + (&quantized - z)?.detach())?;
        let (codebook_loss, commit_loss) = codebook_losses(z, &quantized, self.beta)?;

        let mut usage_counts = vec![vec![0u64; v]; c];
        for t in 0..b * n {
            for ci in 0..c {
                usage_counts[ci][indices[t * c + ci] as usize] += 1;
            }
        }
        Ok(QuantizeResult {
            indices,
            indices_shape: (b, n, c),
            quantized,
            ste_codes,
            codebook_loss,
            commit_loss,
            usage_counts,
        })
    }

    /// Rebuild quantized code vectors from exported index grids; inverse of
    /// the index side of `quantize`.
    pub fn codes_from_indices(&self, indices: &[u32], b: usize, n: usize) -> Result<Tensor> {
        let (c, v, d) = (self.num_codebooks, self.entries, self.sub_dim);
        if indices.len() != b * n * c {
            return Err(Error::Shape(format!(
                "expected {} indices, got {}",
                b * n * c,
                indices.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i as usize >= v) {
            return Err(Error::Shape(format!("index {bad} out of range for V={v}")));
        }
        let mut per_book = Vec::with_capacity(c);
        for ci in 0..c {
            let idx: Vec<u32> = (0..b * n).map(|t| indices[t * c + ci]).collect();
            let idx = Tensor::from_vec(idx, b * n, self.books.device())?;
            let book = self.books.as_tensor().i(ci)?.contiguous()?;
            per_book.push(book.index_select(&idx, 0)?);
        }
        let refs: Vec<&Tensor> = per_book.iter().collect();
        Ok(Tensor::cat(&refs, 1)?.reshape((b, n, c * d))?.detach())
    }

    /// Re-initialize the given (codebook, entry) pairs uniformly; used by
    /// the optional dead-code revival pass.
    pub fn reinit_entries(&self, dead: &[(usize, usize)], rng: &mut Rng64) -> Result<usize> {
        if dead.is_empty() {
            return Ok(0);
        }
        use rand::Rng;
        let lim = 1.0 / self.entries as f64;
        let mut host = to_f64_vec(self.books.as_tensor())?;
        let (v, d) = (self.entries, self.sub_dim);
        for &(ci, vi) in dead {
            for k in 0..d {
                host[(ci * v + vi) * d + k] = rng.gen_range(-lim..lim);
            }
        }
        let t = Tensor::from_vec(host, (self.num_codebooks, v, d), self.books.device())?
            .to_dtype(self.books.dtype())?;
        self.books.set(&t)?;
        Ok(dead.len())
    }
}

/// Eq-style codebook/commitment pair with stop-gradients:
/// codebook = mean((g[z] - q)^2), commit = beta * mean((z - g[q])^2).
pub fn codebook_losses(z: &Tensor, q: &Tensor, beta: f64) -> Result<(Tensor, Tensor)> {
    if z.dims() != q.dims() {
        return Err(Error::Shape(format!("z {:?} vs q {:?}", z.dims(), q.dims())));
    }
    let codebook = (z.detach() - q)?.sqr()?.mean_all()?;
    let commit = ((z - q.detach())?.sqr()?.mean_all()? * beta)?;
    Ok((codebook, commit))
}

/// Per-codebook (used_fraction, perplexity) from selection counts.
pub fn usage_stats(counts: &[Vec<u64>]) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::with_capacity(counts.len());
    for row in counts {
        let total: u64 = row.iter().sum();
        if total == 0 {
            return Err(Error::EmptyStats);
        }
        let used = row.iter().filter(|&&c| c > 0).count() as f64 / row.len() as f64;
        let mut entropy = 0.0;
        for &c in row {
            if c > 0 {
                let p = c as f64 / total as f64;
                entropy -= p * p.ln();
            }
        }
        out.push((used, entropy.exp()));
    }
    Ok(out)
}
