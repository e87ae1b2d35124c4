//! Property tests over randomized instances.

use candle_core::{DType, Device, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;

use wintok_core::config::parse_config;
use wintok_core::distill::cosine_loss;
use wintok_core::error::Error;
use wintok_core::eval::{psnr, ssim};
use wintok_core::nn::{scalar, to_f64_vec, ParamStore, Rng64};
use wintok_core::quantizer::Quantizer;
use wintok_core::training::{batch_indices, lr_at};

fn dev() -> Device {
    Device::Cpu
}

// exhaustive nearest-entry oracle with lowest-index tie-break
fn oracle_indices(books: &[Vec<Vec<f64>>], z: &[f64], tokens: usize) -> Vec<u32> {
    let c = books.len();
    let d = books[0][0].len();
    let mut out = Vec::new();
    for t in 0..tokens {
        for (ci, book) in books.iter().enumerate() {
            let sub = &z[t * c * d + ci * d..t * c * d + (ci + 1) * d];
            let mut best = 0usize;
            let mut best_dist = f64::INFINITY;
            for (vi, e) in book.iter().enumerate() {
                let dist: f64 = sub.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist < best_dist {
                    best_dist = dist;
                    best = vi;
                }
            }
            out.push(best as u32);
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, ..ProptestConfig::default() })]

    #[test]
    fn quantizer_matches_exhaustive_oracle(
        seed in 0u64..1000,
        c in 1usize..=3,
        v in 2usize..=16,
        d in 1usize..=4,
        tokens in 1usize..=6,
        quantize_values in proptest::bool::ANY,
    ) {
        use rand::Rng;
        let mut rng = Rng64::seed_from_u64(seed);
        let mut gen = |n: usize| -> Vec<f64> {
            (0..n).map(|_| {
                let x: f64 = rng.gen_range(-1.0..1.0);
                // coarse values force exact ties regularly
                if quantize_values { (x * 2.0).round() / 2.0 } else { x }
            }).collect()
        };
        let books: Vec<Vec<Vec<f64>>> =
            (0..c).map(|_| (0..v).map(|_| gen(d)).collect()).collect();
        let z_host = gen(tokens * c * d);

        let mut ps = ParamStore::new(DType::F64);
        let mut prng = Rng64::seed_from_u64(0);
        let q = Quantizer::with_books(&mut ps, &books, 8, 0.25, &mut prng).unwrap();
        let z = Tensor::from_vec(z_host.clone(), (1, tokens, c * d), &dev()).unwrap();
        let res = q.quantize(&z).unwrap();
        prop_assert_eq!(res.indices.clone(), oracle_indices(&books, &z_host, tokens));

        // ste forward value equals the gathered codebook entries
        let a = to_f64_vec(&res.ste_codes).unwrap();
        let b = to_f64_vec(&res.quantized).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn psnr_matches_reference(seed in 0u64..500, s in 8usize..=24) {
        use rand::Rng;
        let mut rng = Rng64::seed_from_u64(seed);
        let n = 3 * s * s;
        let av: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bv: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = Tensor::from_vec(av.clone(), (3, s, s), &dev()).unwrap();
        let b = Tensor::from_vec(bv.clone(), (3, s, s), &dev()).unwrap();
        // textbook reference on the [0,1] scale
        let mse: f64 = av.iter().zip(&bv)
            .map(|(x, y)| ((x - y) / 2.0).powi(2)).sum::<f64>() / n as f64;
        let want = (10.0 * (1.0 / mse).log10()).min(100.0);
        prop_assert!((psnr(&a, &b).unwrap() - want).abs() < 1e-6);
    }

    #[test]
    fn ssim_matches_reference_and_bounds(seed in 0u64..200) {
        use rand::Rng;
        let s = 16;
        let mut rng = Rng64::seed_from_u64(seed);
        let n = s * s;
        let av: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bv: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = Tensor::from_vec(av.clone(), (1, s, s), &dev()).unwrap();
        let b = Tensor::from_vec(bv.clone(), (1, s, s), &dev()).unwrap();
        let got = ssim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&got));

        // independent windowed reference
        let g = |v: &[f64], i: usize| (v[i] + 1.0) / 2.0;
        let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
        let mut total = 0.0;
        let mut wins = 0;
        for wy in (0..=s - 8).step_by(4) {
            for wx in (0..=s - 8).step_by(4) {
                let mut pa = Vec::new();
                let mut pb = Vec::new();
                for dy in 0..8 {
                    for dx in 0..8 {
                        pa.push(g(&av, (wy + dy) * s + wx + dx));
                        pb.push(g(&bv, (wy + dy) * s + wx + dx));
                    }
                }
                let nn = 64.0;
                let ma = pa.iter().sum::<f64>() / nn;
                let mb = pb.iter().sum::<f64>() / nn;
                let va = pa.iter().map(|v| (v - ma).powi(2)).sum::<f64>() / (nn - 1.0);
                let vb = pb.iter().map(|v| (v - mb).powi(2)).sum::<f64>() / (nn - 1.0);
                let cov = pa.iter().zip(&pb).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>()
                    / (nn - 1.0);
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                wins += 1;
            }
        }
        prop_assert!((got - total / wins as f64).abs() < 1e-6);
    }

    #[test]
    fn batch_indices_tile_epochs(
        seed in 0u64..100,
        n in 2usize..50,
        bs in 1usize..17,
        epochs in 1usize..4,
    ) {
        // reading ceil(n*epochs/bs) steps covers each sample exactly
        // `epochs` times in the first n*epochs positions
        let steps = (n * epochs).div_ceil(bs);
        let mut stream = Vec::new();
        for step in 0..steps {
            stream.extend(batch_indices(seed, n, bs, step));
        }
        let mut counts = vec![0usize; n];
        for &i in stream.iter().take(n * epochs) {
            counts[i] += 1;
        }
        prop_assert!(counts.iter().all(|&c| c == epochs));
        // determinism: same (seed, step) -> same indices
        prop_assert_eq!(batch_indices(seed, n, bs, 1), batch_indices(seed, n, bs, 1));
    }

    #[test]
    fn lr_schedule_bounds(steps in 1usize..2000, at in 0usize..2000, warm in 0.0f64..0.5) {
        let base = 3e-4;
        let lr = lr_at(at.min(steps.saturating_sub(1)), steps, base, warm).unwrap();
        prop_assert!(lr >= 0.0 && lr <= base + 1e-12);
    }

    #[test]
    fn cosine_loss_bounds_and_teacher_stopgrad(seed in 0u64..200, d in 2usize..8) {
        use rand::Rng;
        let mut rng = Rng64::seed_from_u64(seed);
        let sv: Vec<f64> = (0..2 * d).map(|_| rng.gen_range(-1.0..1.0) + 0.1).collect();
        let tv: Vec<f64> = (0..2 * d).map(|_| rng.gen_range(-1.0..1.0) + 0.1).collect();
        let s = Var::from_tensor(&Tensor::from_vec(sv, (2, d), &dev()).unwrap()).unwrap();
        let t = Var::from_tensor(&Tensor::from_vec(tv, (2, d), &dev()).unwrap()).unwrap();
        let loss = cosine_loss(s.as_tensor(), t.as_tensor()).unwrap();
        let v = scalar(&loss).unwrap();
        prop_assert!((0.0..=2.0 + 1e-12).contains(&v));
        let grads = loss.backward().unwrap();
        prop_assert!(grads.get(&s).is_some());
        prop_assert!(grads.get(&t).is_none(), "teacher must be gradient-isolated");
    }

    #[test]
    fn config_overrides_roundtrip(m in 1usize..64, lr in 1e-6f64..1e-1) {
        let cfg = parse_config(
            "",
            &[
                ("model.num_learnable_tokens".into(), m.to_string()),
                ("train.base_lr".into(), format!("{lr:e}")),
            ],
        ).unwrap();
        prop_assert_eq!(cfg.model.num_learnable_tokens, m);
        prop_assert!((cfg.train.base_lr - lr).abs() < 1e-12 * lr.max(1.0));
    }
}

#[test]
fn config_unknown_key_rejected() {
    match parse_config("[model]\nnot_a_key = 3\n", &[]) {
        Err(Error::ConfigUnknownKey(_)) => {}
        other => panic!("expected ConfigUnknownKeyError, got {:?}", other.map(|_| ())),
    }
    match parse_config("model = {", &[]) {
        Err(Error::ConfigSyntax(_)) => {}
        other => panic!("expected ConfigSyntaxError, got {:?}", other.map(|_| ())),
    }
}
