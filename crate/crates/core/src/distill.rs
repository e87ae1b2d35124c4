//! Asymmetric token distillation: frozen teacher tokens, global pooling on
//! both streams, and a cosine loss that never sends gradient to the teacher.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use rand_distr::{Distribution, Normal};

use crate::config::{ModelConfig, TeacherKind};
use crate::encoder::{component_rng, patchify_pixels, ImageBatch};
use crate::error::{Error, Result};
use crate::nn::{init_tensor, to_f64_vec, Init, Linear, ParamStore, Rng64};

/// A frozen teacher. All variants are pure functions of the input (and the
/// seed); none of their state is trainable or checkpointed.
pub enum Teacher {
    /// Seeded random patch projection + 3x3 conv stack; K = patch grid.
    FrozenRandom {
        w_patch: Tensor,
        w_conv: Tensor,
        patch_size: usize,
        dim: usize,
    },
    /// One fixed random unit vector per class; K = 1.
    Prototype { seed: u64, dim: usize },
    /// Per-sample embeddings loaded from a sidecar file.
    File { records: HashMap<String, Tensor> },
}

/// Deterministic unit prototype for class `label`.
pub fn prototype_vector(seed: u64, dim: usize, label: usize) -> Vec<f64> {
    let mut rng = component_rng(seed, &format!("teacher.prototype.{label}"));
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut v: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

impl Teacher {
    pub fn new(
        cfg: &ModelConfig,
        dtype: DType,
        device: &Device,
        teacher_file: Option<&Path>,
    ) -> Result<Self> {
        match cfg.teacher_kind {
            TeacherKind::Prototype => Ok(Teacher::Prototype { seed: cfg.seed, dim: cfg.teacher_dim }),
            TeacherKind::FrozenRandom => {
                let mut rng = component_rng(cfg.seed, "teacher.frozen_random");
                let patch_dim = cfg.patch_size * cfg.patch_size * cfg.in_channels;
                let std = 1.0 / (patch_dim as f64).sqrt();
                let w_patch = init_tensor(
                    &[cfg.teacher_dim, patch_dim],
                    Init::TruncNormal(std),
                    dtype,
                    device,
                    &mut rng,
                )?;
                let cstd = 1.0 / (9.0 * cfg.teacher_dim as f64).sqrt();
                let w_conv = init_tensor(
                    &[cfg.teacher_dim, cfg.teacher_dim, 3, 3],
                    Init::TruncNormal(cstd),
                    dtype,
                    device,
                    &mut rng,
                )?;
                Ok(Teacher::FrozenRandom {
                    w_patch,
                    w_conv,
                    patch_size: cfg.patch_size,
                    dim: cfg.teacher_dim,
                })
            }
            TeacherKind::File => {
                let path = teacher_file.ok_or_else(|| {
                    Error::TeacherData("teacher_kind=file requires a teacher embedding file".into())
                })?;
                let raw = read_teacher_file(path)?;
                let mut records = HashMap::new();
                for (id, (k, dt, data)) in raw {
                    if dt != cfg.teacher_dim {
                        return Err(Error::TeacherData(format!(
                            "record {id}: teacher dim {dt} != configured {}",
                            cfg.teacher_dim
                        )));
                    }
                    let t = Tensor::from_vec(data, (k, dt), device)?.to_dtype(dtype)?;
                    records.insert(id, t);
                }
                Ok(Teacher::File { records })
            }
        }
    }

    /// Teacher tokens T: (B, K, D_t), detached.
    pub fn teacher_tokens(&self, x: &ImageBatch) -> Result<Tensor> {
        let out = match self {
            Teacher::Prototype { seed, dim } => {
                let labels = x.labels.as_ref().ok_or_else(|| {
                    Error::TeacherData("prototype teacher requires labels".into())
                })?;
                let mut data = Vec::with_capacity(labels.len() * dim);
                for &lbl in labels {
                    data.extend(prototype_vector(*seed, *dim, lbl));
                }
                Tensor::from_vec(data, (labels.len(), 1, *dim), x.data.device())?
                    .to_dtype(x.data.dtype())?
            }
            Teacher::FrozenRandom { w_patch, w_conv, patch_size, dim } => {
                let patches = patchify_pixels(&x.data, *patch_size)?;
                let tokens = patches.broadcast_matmul(&w_patch.t()?.contiguous()?)?.gelu_erf()?;
                let (b, n, _) = tokens.dims3()?;
                let g = (n as f64).sqrt() as usize;
                let grid = tokens
                    .transpose(1, 2)?
                    .contiguous()?
                    .reshape((b, *dim, g, g))?;
                let grid = grid.conv2d(w_conv, 1, 1, 1, 1)?.gelu_erf()?;
                grid.reshape((b, *dim, n))?.transpose(1, 2)?.contiguous()?
            }
            Teacher::File { records } => {
                let mut rows = Vec::with_capacity(x.sample_ids.len());
                for id in &x.sample_ids {
                    let t = records.get(id).ok_or_else(|| {
                        Error::TeacherData(format!("no teacher embedding for sample {id}"))
                    })?;
                    rows.push(t.unsqueeze(0)?);
                }
                let refs: Vec<&Tensor> = rows.iter().collect();
                Tensor::cat(&refs, 0)?.to_dtype(x.data.dtype())?
            }
        };
        Ok(out.detach())
    }
}

/// Arithmetic mean over the token axis: (B, L, D) -> (B, D).
pub fn pool(tokens: &Tensor) -> Result<Tensor> {
    let (_b, l, _d) = tokens.dims3()?;
    if l == 0 {
        return Err(Error::Shape("cannot pool zero tokens".into()));
    }
    Ok(tokens.mean(1)?)
}

/// Batch-mean of per-sample 1 - cos(s, t). The teacher side is detached, so
/// gradient flows to `s` only. Zero-norm vectors are a NumericError.
pub fn cosine_loss(s: &Tensor, t: &Tensor) -> Result<Tensor> {
    if s.dims() != t.dims() {
        return Err(Error::Shape(format!("s {:?} vs t {:?}", s.dims(), t.dims())));
    }
    let t = t.detach();
    for (name, v) in [("student", s), ("teacher", &t)] {
        let norms = v.sqr()?.sum(D::Minus1)?;
        let host = to_f64_vec(&norms)?;
        if host.iter().any(|x| !x.is_finite() || *x <= 0.0) {
            return Err(Error::Numeric(format!(
                "zero or non-finite {name} vector norm in cosine loss"
            )));
        }
    }
    let dot = (s * &t)?.sum(D::Minus1)?;
    let ns = s.sqr()?.sum(D::Minus1)?.sqrt()?;
    let nt = t.sqr()?.sum(D::Minus1)?.sqrt()?;
    let cos = (dot / (ns * nt)?)?;
    Ok((1.0 - cos)?.mean_all()?)
}

/// Trainable student -> teacher-space map, inserted only when widths differ.
pub struct StudentHead {
    proj: Option<Linear>,
}

impl StudentHead {
    pub fn new(
        ps: &mut ParamStore,
        student_dim: usize,
        teacher_dim: usize,
        rng: &mut Rng64,
    ) -> Result<Self> {
        let proj = if student_dim == teacher_dim {
            None
        } else {
            Some(Linear::new(ps, "student_head.proj", student_dim, teacher_dim, true, rng)?)
        };
        Ok(Self { proj })
    }

    pub fn forward(&self, pooled: &Tensor) -> Result<Tensor> {
        match &self.proj {
            Some(p) => p.forward(pooled),
            None => Ok(pooled.clone()),
        }
    }
}

// Sidecar teacher embedding file: magic, record count, then per record
// (id_len, id, K, D_t, K*D_t f64 LE).
const TEACHER_MAGIC: &[u8; 4] = b"WTTF";

pub fn write_teacher_file(path: &Path, records: &[(String, usize, usize, Vec<f64>)]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(TEACHER_MAGIC)?;
    f.write_all(&(records.len() as u64).to_le_bytes())?;
    for (id, k, dt, data) in records {
        if data.len() != k * dt {
            return Err(Error::TeacherData(format!(
                "record {id}: {} floats, expected {}",
                data.len(),
                k * dt
            )));
        }
        let idb = id.as_bytes();
        f.write_all(&(idb.len() as u32).to_le_bytes())?;
        f.write_all(idb)?;
        f.write_all(&(*k as u32).to_le_bytes())?;
        f.write_all(&(*dt as u32).to_le_bytes())?;
        for x in data {
            f.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_teacher_file(path: &Path) -> Result<Vec<(String, (usize, usize, Vec<f64>))>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != TEACHER_MAGIC {
        return Err(Error::TeacherData("bad teacher file magic".into()));
    }
    let mut u64b = [0u8; 8];
    f.read_exact(&mut u64b)?;
    let count = u64::from_le_bytes(u64b) as usize;
    let mut u32b = [0u8; 4];
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        f.read_exact(&mut u32b)?;
        let id_len = u32::from_le_bytes(u32b) as usize;
        let mut idb = vec![0u8; id_len];
        f.read_exact(&mut idb)?;
        let id = String::from_utf8(idb)
            .map_err(|_| Error::TeacherData("non-utf8 sample id".into()))?;
        f.read_exact(&mut u32b)?;
        let k = u32::from_le_bytes(u32b) as usize;
        f.read_exact(&mut u32b)?;
        let dt = u32::from_le_bytes(u32b) as usize;
        let mut data = vec![0f64; k * dt];
        for x in data.iter_mut() {
            f.read_exact(&mut u64b)?;
            *x = f64::from_le_bytes(u64b);
        }
        out.push((id, (k, dt, data)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::IndexOp;
    use candle_core::Var;

    fn vec2(rows: &[[f64; 2]]) -> Tensor {
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Tensor::from_vec(flat, (rows.len(), 2), &Device::Cpu).unwrap()
    }

    #[test]
    fn cosine_basics() {
        let s = vec2(&[[1.0, 0.0]]);
        assert_eq!(crate::nn::scalar(&cosine_loss(&s, &s).unwrap()).unwrap(), 0.0);
        let t = vec2(&[[0.0, 1.0]]);
        assert_eq!(crate::nn::scalar(&cosine_loss(&s, &t).unwrap()).unwrap(), 1.0);
        let s2 = vec2(&[[2.0, 0.0]]);
        let t2 = vec2(&[[1.0, 0.0]]);
        assert!(crate::nn::scalar(&cosine_loss(&s2, &t2).unwrap()).unwrap().abs() < 1e-15);
        let anti = vec2(&[[-1.0, 0.0]]);
        assert!((crate::nn::scalar(&cosine_loss(&s, &anti).unwrap()).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_scale_invariance_exact() {
        let s = vec2(&[[0.3, -0.7], [1.2, 0.4]]);
        let t = vec2(&[[-0.2, 0.9], [0.5, 0.5]]);
        let base = crate::nn::scalar(&cosine_loss(&s, &t).unwrap()).unwrap();
        for (a, b) in [(2.0, 3.0), (0.5, 7.0), (10.0, 0.1)] {
            let sa = (&s * a).unwrap();
            let tb = (&t * b).unwrap();
            let v = crate::nn::scalar(&cosine_loss(&sa, &tb).unwrap()).unwrap();
            assert!((v - base).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_zero_norm_is_numeric_error() {
        let s = vec2(&[[0.0, 0.0]]);
        let t = vec2(&[[1.0, 0.0]]);
        assert!(matches!(cosine_loss(&s, &t), Err(Error::Numeric(_))));
    }

    #[test]
    fn teacher_side_gets_no_gradient() {
        let s = Var::from_tensor(&vec2(&[[0.4, 0.8]])).unwrap();
        let t = Var::from_tensor(&vec2(&[[1.0, -0.3]])).unwrap();
        let loss = cosine_loss(s.as_tensor(), t.as_tensor()).unwrap();
        let grads = loss.backward().unwrap();
        assert!(grads.get(&s).is_some());
        assert!(grads.get(&t).is_none());
    }

    #[test]
    fn cosine_gradient_matches_finite_differences() {
        let base = vec![0.4, 0.8, -0.3];
        let t = Tensor::from_vec(vec![1.0, -0.3, 0.2], (1, 3), &Device::Cpu).unwrap();
        let sv = Var::from_tensor(
            &Tensor::from_vec(base.clone(), (1, 3), &Device::Cpu).unwrap(),
        )
        .unwrap();
        let loss = cosine_loss(sv.as_tensor(), &t).unwrap();
        let grads = loss.backward().unwrap();
        let g = to_f64_vec(grads.get(&sv).unwrap()).unwrap();
        let eps = 1e-6;
        for i in 0..3 {
            let mut hi = base.clone();
            let mut lo = base.clone();
            hi[i] += eps;
            lo[i] -= eps;
            let f = |v: Vec<f64>| {
                let s = Tensor::from_vec(v, (1, 3), &Device::Cpu).unwrap();
                crate::nn::scalar(&cosine_loss(&s, &t).unwrap()).unwrap()
            };
            let fd = (f(hi) - f(lo)) / (2.0 * eps);
            assert!((fd - g[i]).abs() / fd.abs().max(1e-8) < 1e-3, "i={i} fd={fd} g={}", g[i]);
        }
    }

    #[test]
    fn pool_examples() {
        let t = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], (1, 2, 2), &Device::Cpu).unwrap();
        assert_eq!(to_f64_vec(&pool(&t).unwrap()).unwrap(), vec![0.5, 0.5]);
        let single = Tensor::from_vec(vec![0.3, 0.7], (1, 1, 2), &Device::Cpu).unwrap();
        assert_eq!(to_f64_vec(&pool(&single).unwrap()).unwrap(), vec![0.3, 0.7]);
        // permutation invariance
        let p = Tensor::from_vec(vec![0.0, 1.0, 1.0, 0.0], (1, 2, 2), &Device::Cpu).unwrap();
        assert_eq!(
            to_f64_vec(&pool(&t).unwrap()).unwrap(),
            to_f64_vec(&pool(&p).unwrap()).unwrap()
        );
    }

    #[test]
    fn prototype_teacher_class_determined() {
        let mut cfg = ModelConfig::default();
        cfg.teacher_kind = TeacherKind::Prototype;
        cfg.teacher_dim = 64;
        let teacher = Teacher::new(&cfg, DType::F64, &Device::Cpu, None).unwrap();
        let data = Tensor::zeros((2, 3, 32, 32), DType::F64, &Device::Cpu).unwrap();
        let batch = ImageBatch {
            data,
            sample_ids: vec!["a".into(), "b".into()],
            labels: Some(vec![2, 2]),
        };
        let t = teacher.teacher_tokens(&batch).unwrap();
        let a = to_f64_vec(&t.i(0).unwrap()).unwrap();
        let b = to_f64_vec(&t.i(1).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn prototype_table_nearly_orthogonal() {
        let dim = 64;
        let protos: Vec<Vec<f64>> = (0..8).map(|i| prototype_vector(0, dim, i)).collect();
        for i in 0..8 {
            for j in (i + 1)..8 {
                let cos: f64 = protos[i].iter().zip(&protos[j]).map(|(a, b)| a * b).sum();
                assert!(cos.abs() < 0.3, "classes {i},{j}: |cos|={}", cos.abs());
            }
        }
    }

    #[test]
    fn prototype_without_labels_is_teacher_error() {
        let cfg = ModelConfig::default();
        let teacher = Teacher::new(&cfg, DType::F64, &Device::Cpu, None).unwrap();
        let batch = ImageBatch {
            data: Tensor::zeros((1, 3, 32, 32), DType::F64, &Device::Cpu).unwrap(),
            sample_ids: vec!["a".into()],
            labels: None,
        };
        assert!(matches!(teacher.teacher_tokens(&batch), Err(Error::TeacherData(_))));
    }

    #[test]
    fn frozen_random_teacher_deterministic() {
        let mut cfg = ModelConfig::default();
        cfg.teacher_kind = TeacherKind::FrozenRandom;
        cfg.teacher_dim = 16;
        let data = Tensor::rand(-1.0f64, 1.0, (1, 3, 32, 32), &Device::Cpu).unwrap();
        let batch = ImageBatch { data, sample_ids: vec!["a".into()], labels: None };
        let t1 = Teacher::new(&cfg, DType::F64, &Device::Cpu, None).unwrap();
        let t2 = Teacher::new(&cfg, DType::F64, &Device::Cpu, None).unwrap();
        let a = to_f64_vec(&t1.teacher_tokens(&batch).unwrap()).unwrap();
        let b = to_f64_vec(&t2.teacher_tokens(&batch).unwrap()).unwrap();
        assert_eq!(a, b);
        // K = patch grid
        assert_eq!(t1.teacher_tokens(&batch).unwrap().dims(), &[1, 64, 16]);
    }

    #[test]
    fn teacher_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wttf");
        let records = vec![
            ("img_001".to_string(), 2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
            ("img_002".to_string(), 1, 3, vec![-0.5, 0.25, 0.125]),
        ];
        write_teacher_file(&path, &records).unwrap();
        let back = read_teacher_file(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "img_001");
        assert_eq!(back[0].1, (2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        assert_eq!(back[1].1 .2, vec![-0.5, 0.25, 0.125]);
    }

    #[test]
    fn file_teacher_missing_id_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wttf");
        write_teacher_file(&path, &[("known".into(), 1, 64, vec![0.1; 64])]).unwrap();
        let mut cfg = ModelConfig::default();
        cfg.teacher_kind = TeacherKind::File;
        cfg.teacher_dim = 64;
        let teacher = Teacher::new(&cfg, DType::F64, &Device::Cpu, Some(&path)).unwrap();
        let batch = ImageBatch {
            data: Tensor::zeros((1, 3, 32, 32), DType::F64, &Device::Cpu).unwrap(),
            sample_ids: vec!["unknown".into()],
            labels: None,
        };
        assert!(matches!(teacher.teacher_tokens(&batch), Err(Error::TeacherData(_))));
    }
}
