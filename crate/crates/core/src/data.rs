//! Datasets: folder ingestion with optional labels, and a seeded synthetic
//! shapes generator used as the hermetic stand-in for real image data.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{component_rng, ImageBatch};
use crate::error::{Error, Result};
use crate::training::BatchSource;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub path: String,
    pub label: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub class_names: Option<Vec<String>>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> Option<usize> {
        self.class_names.as_ref().map(|c| c.len())
    }
}

/// Build a manifest from a folder of PNG images plus an optional
/// `labels.csv` (`sample_id,label` header). Labels map to contiguous class
/// indices in sorted class-name order.
pub fn ingest(root: &Path) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::Ingest(format!("{} is not a directory", root.display())));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Ingest(format!("no .png files under {}", root.display())));
    }

    let labels_path = root.join("labels.csv");
    let mut label_map = std::collections::BTreeMap::new();
    if labels_path.exists() {
        let text = std::fs::read_to_string(&labels_path)?;
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == "sample_id,label" => {}
            other => {
                return Err(Error::Ingest(format!(
                    "labels.csv must start with 'sample_id,label', got {other:?}"
                )))
            }
        }
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (id, label) = line.split_once(',').ok_or_else(|| {
                Error::Ingest(format!("labels.csv line {}: missing comma", lineno + 2))
            })?;
            label_map.insert(id.trim().to_string(), label.trim().to_string());
        }
    }

    let mut seen = HashSet::new();
    let mut bad_files = Vec::new();
    let mut entries = Vec::with_capacity(files.len());
    let class_names: Vec<String> = {
        let mut names: Vec<String> = label_map.values().cloned().collect::<HashSet<_>>()
            .into_iter()
            .collect();
        names.sort();
        names
    };
    for f in &files {
        let sample_id = f
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Ingest(format!("bad file name {}", f.display())))?
            .to_string();
        if !seen.insert(sample_id.clone()) {
            return Err(Error::Ingest(format!("duplicate sample id {sample_id}")));
        }
        if image::open(f).is_err() {
            bad_files.push(f.display().to_string());
            continue;
        }
        let label = label_map
            .get(&sample_id)
            .map(|name| class_names.iter().position(|c| c == name).expect("from map"));
        entries.push(ManifestEntry {
            sample_id,
            path: f
                .strip_prefix(root)
                .unwrap_or(f)
                .to_string_lossy()
                .into_owned(),
            label,
        });
    }
    if !bad_files.is_empty() {
        return Err(Error::Ingest(format!("unreadable images: {}", bad_files.join(", "))));
    }
    // Referential integrity: every labels.csv id must exist as an image.
    for id in label_map.keys() {
        if !seen.contains(id) {
            return Err(Error::Ingest(format!("labels.csv references unknown sample_id {id}")));
        }
    }
    let class_names = if class_names.is_empty() { None } else { Some(class_names) };
    Ok(DatasetManifest { root: root.to_path_buf(), entries, class_names })
}

// Alphabetical so generation labels agree with ingest's sorted-class-name
// index mapping.
pub const SHAPE_KINDS: &[&str] = &["circle", "cross", "square", "triangle"];

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ShapesSpec {
    pub num_samples: usize,
    pub image_size: usize,
    /// Shape kinds used, in SHAPE_KINDS order; at most 4.
    pub num_classes: usize,
    /// Max center offset as a fraction of the image size.
    pub position_jitter: f64,
    /// Foreground channel intensities are drawn from [lo, hi] in [0, 1].
    pub color_lo: f64,
    pub color_hi: f64,
    pub seed: u64,
}

impl Default for ShapesSpec {
    fn default() -> Self {
        Self {
            num_samples: 2000,
            image_size: 32,
            num_classes: 4,
            position_jitter: 0.15,
            color_lo: 0.45,
            color_hi: 1.0,
            seed: 0,
        }
    }
}

impl ShapesSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > SHAPE_KINDS.len() {
            return Err(Error::ConfigValidation(format!(
                "num_classes must be 1..={}",
                SHAPE_KINDS.len()
            )));
        }
        if self.num_samples == 0 || self.image_size < 8 {
            return Err(Error::ConfigValidation("need num_samples > 0, image_size >= 8".into()));
        }
        if !(0.0..=0.3).contains(&self.position_jitter)
            || !(0.0..=1.0).contains(&self.color_lo)
            || !(self.color_lo..=1.0).contains(&self.color_hi)
        {
            return Err(Error::ConfigValidation("jitter/color ranges out of bounds".into()));
        }
        Ok(())
    }

    /// Class label of sample `i`; round-robin keeps classes balanced
    /// within one sample.
    pub fn label_of(&self, i: usize) -> usize {
        i % self.num_classes
    }

    /// Render sample `i` as RGB pixels in [-1, 1], CHW order. Pure in
    /// (spec, i).
    pub fn render(&self, i: usize) -> Vec<f64> {
        let s = self.image_size;
        let label = self.label_of(i);
        let mut rng = component_rng(self.seed, &format!("shapes.sample.{i}"));
        let bg: f64 = rng.gen_range(0.0..0.15);
        let color: [f64; 3] = [
            rng.gen_range(self.color_lo..self.color_hi),
            rng.gen_range(self.color_lo..self.color_hi),
            rng.gen_range(self.color_lo..self.color_hi),
        ];
        let half = s as f64 / 2.0;
        let jitter = self.position_jitter * s as f64;
        let cx = half + rng.gen_range(-jitter..=jitter);
        let cy = half + rng.gen_range(-jitter..=jitter);
        let r = rng.gen_range(0.26..0.36) * s as f64;

        let inside = |x: f64, y: f64| -> bool {
            let dx = x - cx;
            let dy = y - cy;
            match SHAPE_KINDS[label] {
                "circle" => dx * dx + dy * dy <= r * r,
                "square" => dx.abs() <= r && dy.abs() <= r,
                "triangle" => {
                    // upward triangle: apex at cy - r, base at cy + r
                    let t = (dy + r) / (2.0 * r);
                    (0.0..=1.0).contains(&t) && dx.abs() <= t * r
                }
                "cross" => {
                    let arm = r / 3.0;
                    (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
                }
                _ => unreachable!(),
            }
        };
        // 4x4 supersampling: smooth edges keep spurious corner response off
        // curved boundaries.
        let mut out = vec![0.0; 3 * s * s];
        for y in 0..s {
            for x in 0..s {
                let mut cover = 0.0;
                for sy in 0..4 {
                    for sx in 0..4 {
                        let px = x as f64 + (sx as f64 + 0.5) / 4.0;
                        let py = y as f64 + (sy as f64 + 0.5) / 4.0;
                        if inside(px, py) {
                            cover += 1.0 / 16.0;
                        }
                    }
                }
                for c in 0..3 {
                    let v = bg + (color[c] - bg) * cover;
                    out[c * s * s + y * s + x] = v * 2.0 - 1.0;
                }
            }
        }
        out
    }
}

fn to_u8(v: f64) -> u8 {
    (((v + 1.0) / 2.0) * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Write the dataset to disk (PNGs + labels.csv + manifest.json). The same
/// spec produces byte-identical files.
pub fn generate_shapes(spec: &ShapesSpec, out_dir: &Path, force: bool) -> Result<DatasetManifest> {
    spec.validate()?;
    if out_dir.exists() && std::fs::read_dir(out_dir)?.next().is_some() && !force {
        return Err(Error::Ingest(format!(
            "output directory {} is not empty (use --force)",
            out_dir.display()
        )));
    }
    std::fs::create_dir_all(out_dir)?;
    let s = spec.image_size;
    let width = (spec.num_samples.max(2) as f64).log10() as usize + 1;
    let mut labels_csv = String::from("sample_id,label\n");
    let mut entries = Vec::with_capacity(spec.num_samples);
    for i in 0..spec.num_samples {
        let pixels = spec.render(i);
        let mut img = image::RgbImage::new(s as u32, s as u32);
        for y in 0..s {
            for x in 0..s {
                let px = image::Rgb([
                    to_u8(pixels[y * s + x]),
                    to_u8(pixels[s * s + y * s + x]),
                    to_u8(pixels[2 * s * s + y * s + x]),
                ]);
                img.put_pixel(x as u32, y as u32, px);
            }
        }
        let sample_id = format!("shape_{i:0width$}");
        let label = spec.label_of(i);
        img.save(out_dir.join(format!("{sample_id}.png")))
            .map_err(|e| Error::Ingest(e.to_string()))?;
        labels_csv.push_str(&format!("{sample_id},{}\n", SHAPE_KINDS[label]));
        entries.push(ManifestEntry {
            sample_id: sample_id.clone(),
            path: format!("{sample_id}.png"),
            label: Some(label),
        });
    }
    std::fs::write(out_dir.join("labels.csv"), labels_csv)?;
    let class_names: Vec<String> =
        SHAPE_KINDS[..spec.num_classes].iter().map(|s| s.to_string()).collect();
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        entries,
        class_names: Some(class_names),
    };
    std::fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest).map_err(|e| Error::State(e.to_string()))?,
    )?;
    Ok(manifest)
}

/// In-memory dataset of [-1, 1] CHW images.
pub struct Dataset {
    pub image_size: usize,
    pub channels: usize,
    pub images: Vec<Vec<f64>>,
    pub sample_ids: Vec<String>,
    pub labels: Option<Vec<usize>>,
    pub class_names: Option<Vec<String>>,
}

impl Dataset {
    /// Generate directly from a shapes spec without touching disk.
    pub fn from_shapes(spec: &ShapesSpec) -> Result<Self> {
        spec.validate()?;
        let images = (0..spec.num_samples).map(|i| spec.render(i)).collect();
        let width = (spec.num_samples.max(2) as f64).log10() as usize + 1;
        Ok(Self {
            image_size: spec.image_size,
            channels: 3,
            images,
            sample_ids: (0..spec.num_samples).map(|i| format!("shape_{i:0width$}")).collect(),
            labels: Some((0..spec.num_samples).map(|i| spec.label_of(i)).collect()),
            class_names: Some(
                SHAPE_KINDS[..spec.num_classes].iter().map(|s| s.to_string()).collect(),
            ),
        })
    }

    /// Decode every manifest entry into memory.
    pub fn load(manifest: &DatasetManifest) -> Result<Self> {
        let mut images = Vec::with_capacity(manifest.entries.len());
        let mut sample_ids = Vec::with_capacity(manifest.entries.len());
        let mut labels = Vec::new();
        let mut image_size = 0usize;
        let all_labeled = manifest.entries.iter().all(|e| e.label.is_some());
        for e in &manifest.entries {
            let img = image::open(manifest.root.join(&e.path))
                .map_err(|err| Error::Ingest(format!("{}: {err}", e.path)))?
                .to_rgb8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            if w != h {
                return Err(Error::Ingest(format!("{}: non-square image", e.path)));
            }
            if image_size == 0 {
                image_size = w;
            } else if image_size != w {
                return Err(Error::Ingest(format!("{}: size {w} != {image_size}", e.path)));
            }
            let mut chw = vec![0.0f64; 3 * w * h];
            for y in 0..h {
                for x in 0..w {
                    let p = img.get_pixel(x as u32, y as u32);
                    for c in 0..3 {
                        chw[c * w * h + y * w + x] = p[c] as f64 / 255.0 * 2.0 - 1.0;
                    }
                }
            }
            images.push(chw);
            sample_ids.push(e.sample_id.clone());
            if all_labeled {
                labels.push(e.label.expect("all labeled"));
            }
        }
        Ok(Self {
            image_size,
            channels: 3,
            images,
            sample_ids,
            labels: if all_labeled { Some(labels) } else { None },
            class_names: manifest.class_names.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Batch over all samples in order, chunked.
    pub fn full_batches(&self, batch_size: usize, dtype: DType) -> Result<Vec<ImageBatch>> {
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(batch_size).map(|c| self.batch(c, dtype)).collect()
    }
}

impl BatchSource for Dataset {
    fn num_samples(&self) -> usize {
        self.len()
    }

    fn batch(&self, indices: &[usize], dtype: DType) -> Result<ImageBatch> {
        let s = self.image_size;
        let mut data = Vec::with_capacity(indices.len() * self.channels * s * s);
        let mut ids = Vec::with_capacity(indices.len());
        let mut labels = self.labels.as_ref().map(|_| Vec::with_capacity(indices.len()));
        for &i in indices {
            data.extend_from_slice(&self.images[i]);
            ids.push(self.sample_ids[i].clone());
            if let (Some(out), Some(src)) = (labels.as_mut(), self.labels.as_ref()) {
                out.push(src[i]);
            }
        }
        let t = Tensor::from_vec(data, (indices.len(), self.channels, s, s), &candle_core::Device::Cpu)?
            .to_dtype(dtype)?;
        Ok(ImageBatch { data: t, sample_ids: ids, labels })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: usize) -> ShapesSpec {
        ShapesSpec { num_samples: n, seed: 1, ..Default::default() }
    }

    #[test]
    fn render_is_pure_and_in_range() {
        let sp = spec(8);
        let a = sp.render(3);
        let b = sp.render(3);
        assert_eq!(a, b);
        assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn class_balance_round_robin() {
        let sp = spec(100);
        let mut counts = [0usize; 4];
        for i in 0..100 {
            counts[sp.label_of(i)] += 1;
        }
        assert_eq!(counts, [25, 25, 25, 25]);
    }

    #[test]
    fn generate_twice_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        let sp = spec(6);
        generate_shapes(&sp, &a, false).unwrap();
        generate_shapes(&sp, &b, false).unwrap();
        for entry in std::fs::read_dir(&a).unwrap() {
            let name = entry.unwrap().file_name();
            let fa = std::fs::read(a.join(&name)).unwrap();
            let fb = std::fs::read(b.join(&name)).unwrap();
            if name != "manifest.json" {
                assert_eq!(fa, fb, "{name:?} differs");
            }
        }
    }

    #[test]
    fn generate_refuses_nonempty_dir() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("junk.txt"), "x").unwrap();
        assert!(matches!(
            generate_shapes(&spec(2), dir.path(), false),
            Err(Error::Ingest(_))
        ));
        generate_shapes(&spec(2), dir.path(), true).unwrap();
    }

    #[test]
    fn ingest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m1 = generate_shapes(&spec(8), dir.path(), true).unwrap();
        let m2 = ingest(dir.path()).unwrap();
        assert_eq!(m1.entries.len(), m2.entries.len());
        assert_eq!(m2.class_names.as_deref().unwrap().len(), 4);
        for (a, b) in m1.entries.iter().zip(&m2.entries) {
            assert_eq!(a.sample_id, b.sample_id);
            assert_eq!(a.label, b.label);
        }
        // determinism of ingest
        let m3 = ingest(dir.path()).unwrap();
        assert_eq!(m2, m3);
    }

    #[test]
    fn ingest_unknown_label_id_fails() {
        let dir = tempfile::tempdir().unwrap();
        generate_shapes(&spec(2), dir.path(), true).unwrap();
        let mut csv = std::fs::read_to_string(dir.path().join("labels.csv")).unwrap();
        csv.push_str("ghost,circle\n");
        std::fs::write(dir.path().join("labels.csv"), csv).unwrap();
        assert!(matches!(ingest(dir.path()), Err(Error::Ingest(_))));
    }

    #[test]
    fn ingest_unlabeled_folder() {
        let dir = tempfile::tempdir().unwrap();
        generate_shapes(&spec(3), dir.path(), true).unwrap();
        std::fs::remove_file(dir.path().join("labels.csv")).unwrap();
        let m = ingest(dir.path()).unwrap();
        assert_eq!(m.entries.len(), 3);
        assert!(m.entries.iter().all(|e| e.label.is_none()));
        assert!(m.class_names.is_none());
    }

    #[test]
    fn dataset_load_matches_render_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let sp = spec(4);
        let manifest = generate_shapes(&sp, dir.path(), true).unwrap();
        let ds = Dataset::load(&manifest).unwrap();
        assert_eq!(ds.len(), 4);
        let direct = Dataset::from_shapes(&sp).unwrap();
        for i in 0..4 {
            for (a, b) in ds.images[i].iter().zip(&direct.images[i]) {
                assert!((a - b).abs() < 2.0 / 255.0 + 1e-9);
            }
        }
        assert_eq!(ds.labels, direct.labels);
    }

    #[test]
    fn circles_lack_corners_squares_have_them() {
        // Harris-style corner response: squares must respond well above
        // circles, validating class distinguishability of generated data.
        let sp = ShapesSpec { num_samples: 12, num_classes: 3, seed: 3, ..Default::default() };
        let ds = Dataset::from_shapes(&sp).unwrap();
        let s = sp.image_size;
        let corner_response = |img: &[f64]| -> f64 {
            // grayscale
            let g: Vec<f64> = (0..s * s)
                .map(|i| (img[i] + img[s * s + i] + img[2 * s * s + i]) / 3.0)
                .collect();
            let mut best: f64 = 0.0;
            for y in 2..s - 2 {
                for x in 2..s - 2 {
                    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let yy = (y as i64 + dy) as usize;
                            let xx = (x as i64 + dx) as usize;
                            let ix = (g[yy * s + xx + 1] - g[yy * s + xx - 1]) / 2.0;
                            let iy = (g[(yy + 1) * s + xx] - g[(yy - 1) * s + xx]) / 2.0;
                            sxx += ix * ix;
                            syy += iy * iy;
                            sxy += ix * iy;
                        }
                    }
                    let det = sxx * syy - sxy * sxy;
                    let trace = sxx + syy;
                    best = best.max(det - 0.05 * trace * trace);
                }
            }
            best
        };
        let mut circle_max: f64 = 0.0;
        let mut square_min = f64::INFINITY;
        for i in 0..12 {
            let r = corner_response(&ds.images[i]);
            match SHAPE_KINDS[sp.label_of(i)] {
                "circle" => circle_max = circle_max.max(r),
                "square" => square_min = square_min.min(r),
                _ => {}
            }
        }
        assert!(
            square_min > circle_max,
            "square min {square_min} should exceed circle max {circle_max}"
        );
    }
}
