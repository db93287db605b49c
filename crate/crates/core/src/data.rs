//! CIFAR binary ingestion, augmentation, standardization and a synthetic
//! colored-blob dataset for quick runs.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CifarVariant {
    #[serde(rename = "cifar10")]
    C10,
    #[serde(rename = "cifar100")]
    C100,
}

impl CifarVariant {
    /// Leading label bytes per record: CIFAR-100 stores (coarse, fine).
    pub fn label_bytes(self) -> usize {
        match self {
            CifarVariant::C10 => 1,
            CifarVariant::C100 => 2,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + CIFAR_PIXELS
    }

    pub fn classes(self) -> usize {
        match self {
            CifarVariant::C10 => 10,
            CifarVariant::C100 => 100,
        }
    }

    fn dir_name(self) -> &'static str {
        match self {
            CifarVariant::C10 => "cifar-10-batches-bin",
            CifarVariant::C100 => "cifar-100-binary",
        }
    }

    fn files(self, split: Split) -> Vec<String> {
        match (self, split) {
            (CifarVariant::C10, Split::Train) => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
            (CifarVariant::C10, Split::Val) => vec!["test_batch.bin".into()],
            (CifarVariant::C100, Split::Train) => vec!["train.bin".into()],
            (CifarVariant::C100, Split::Val) => vec!["test.bin".into()],
        }
    }
}

/// One image `[3, H, W]` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub pixels: Tensor<f32>,
    pub label: usize,
}

/// Images `[N, 3, H, W]` in `[0, 1]` with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub split: Split,
    pub classes: usize,
}

impl DatasetSplit {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, split: Split, classes: usize) -> Result<Self> {
        if images.rank() != 4 || images.dim(0) != labels.len() {
            return Err(Error::invalid(
                "dataset",
                format!("{} labels for images of shape {:?}", labels.len(), images.shape()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(
                "dataset",
                format!("label {bad} >= class count {classes}"),
            ));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("dataset", "pixel values outside [0, 1]"));
        }
        Ok(Self {
            images,
            labels,
            split,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        [self.images.dim(1), self.images.dim(2), self.images.dim(3)]
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n: usize = self.image_shape().iter().product();
        &self.images.data()[i * n..(i + 1) * n]
    }

    pub fn get(&self, i: usize) -> LabeledImage {
        LabeledImage {
            pixels: Tensor::new(&self.image_shape(), self.image(i).to_vec()).expect("consistent shape"),
            label: self.labels[i],
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(json!({
            "kind": "dataset",
            "split": self.split,
            "classes": self.classes,
        }));
        c.insert("images", &self.images);
        let labels: Vec<f64> = self.labels.iter().map(|&l| l as f64).collect();
        c.insert("labels", &Tensor::new(&[labels.len()], labels).expect("non-empty"));
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.metadata.get("kind").and_then(|v| v.as_str()) != Some("dataset") {
            return Err(Error::Checkpoint("container does not hold a dataset".into()));
        }
        let split: Split = serde_json::from_value(c.metadata["split"].clone())?;
        let classes: usize = serde_json::from_value(c.metadata["classes"].clone())?;
        let images = c.get::<f32>("images", None)?;
        let labels = c
            .get::<f64>("labels", None)?
            .data()
            .iter()
            .map(|&l| l as usize)
            .collect();
        Self::new(images, labels, split, classes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

/// Parses a CIFAR binary file's bytes into planar pixels and labels.
pub fn parse_cifar(bytes: &[u8], variant: CifarVariant, path: &Path) -> Result<(Vec<f32>, Vec<usize>)> {
    let rec = variant.record_len();
    if bytes.is_empty() || !bytes.len().is_multiple_of(rec) {
        return Err(Error::CorruptFile {
            path: path.to_path_buf(),
            expected: format!("a positive multiple of {rec}"),
            actual: bytes.len() as u64,
        });
    }
    let n = bytes.len() / rec;
    let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for record in bytes.chunks_exact(rec) {
        let label = record[variant.label_bytes() - 1] as usize;
        if label >= variant.classes() {
            return Err(Error::invalid(
                "load_cifar",
                format!("{}: label {label} out of range", path.display()),
            ));
        }
        labels.push(label);
        pixels.extend(record[variant.label_bytes()..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((pixels, labels))
}

fn find_dir(root: &Path, variant: CifarVariant) -> PathBuf {
    let nested = root.join(variant.dir_name());
    if nested.is_dir() {
        nested
    } else {
        root.to_path_buf()
    }
}

fn load_split(dir: &Path, variant: CifarVariant, split: Split) -> Result<DatasetSplit> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for file in variant.files(split) {
        let path = dir.join(&file);
        let bytes =
            fs::read(&path).map_err(|e| Error::config("data_root", format!("cannot read {}: {e}", path.display())))?;
        let (p, l) = parse_cifar(&bytes, variant, &path)?;
        pixels.extend(p);
        labels.extend(l);
    }
    let n = labels.len();
    let images = Tensor::new(&[n, 3, CIFAR_SIDE, CIFAR_SIDE], pixels)?;
    DatasetSplit::new(images, labels, split, variant.classes())
}

/// Train and validation (test) splits from `root` or
/// `root/cifar-10-batches-bin` / `root/cifar-100-binary`.
pub fn load_cifar(root: &Path, variant: CifarVariant) -> Result<(DatasetSplit, DatasetSplit)> {
    let dir = find_dir(root, variant);
    Ok((
        load_split(&dir, variant, Split::Train)?,
        load_split(&dir, variant, Split::Val)?,
    ))
}

/// Per-channel mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn compute(split: &DatasetSplit) -> Self {
        let [c, h, w] = split.image_shape();
        let plane = h * w;
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for img in split.images.data().chunks(c * plane) {
            for (ch, p) in img.chunks(plane).enumerate() {
                for &v in p {
                    sum[ch] += v as f64;
                    sq[ch] += (v as f64) * (v as f64);
                }
            }
        }
        let count = (split.len() * plane) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / count - m * m).max(1e-12).sqrt())
            .collect();
        Self { mean, std }
    }

    /// Statistics cached as JSON in `dir`, computed from `split` on a miss.
    /// A read-only data directory only skips the cache write.
    pub fn cached(dir: &Path, key: &str, split: &DatasetSplit) -> Result<Self> {
        let path = dir.join(format!("hyperphm-stats-{key}.json"));
        if let Ok(text) = fs::read_to_string(&path) {
            if let Ok(stats) = serde_json::from_str::<Self>(&text) {
                if stats.mean.len() == split.image_shape()[0] {
                    return Ok(stats);
                }
            }
        }
        let stats = Self::compute(split);
        let _ = fs::write(&path, serde_json::to_string_pretty(&stats)?);
        Ok(stats)
    }

    /// Standardizes one planar image in place.
    pub fn apply(&self, image: &mut [f32]) {
        let plane = image.len() / self.mean.len();
        for (ch, p) in image.chunks_mut(plane).enumerate() {
            let (m, s) = (self.mean[ch], self.std[ch]);
            for v in p {
                *v = ((*v as f64 - m) / s) as f32;
            }
        }
    }
}

/// Zero-pad, random crop and horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub pad: usize,
    pub flip: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { pad: 4, flip: true }
    }
}

/// Crop of the zero-padded image at offset `(dy, dx)` in padded
/// coordinates, optionally mirrored left-right. Output keeps `[c, h, w]`.
pub fn crop_flip(image: &[f32], shape: [usize; 3], pad: usize, dy: usize, dx: usize, flip: bool) -> Vec<f32> {
    let [c, h, w] = shape;
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + dy) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let ox = if flip { w - 1 - x } else { x };
                let sx = (x + dx) as isize - pad as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                out[(ch * h + y) * w + ox] = image[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    out
}

/// Training view of one image: random crop/flip, then standardization.
pub fn augment<R: Rng + ?Sized>(
    image: &[f32],
    shape: [usize; 3],
    cfg: AugmentConfig,
    stats: &ChannelStats,
    rng: &mut R,
) -> Vec<f32> {
    let dy = rng.random_range(0..=2 * cfg.pad);
    let dx = rng.random_range(0..=2 * cfg.pad);
    let flip = cfg.flip && rng.random_bool(0.5);
    let mut out = crop_flip(image, shape, cfg.pad, dy, dx, flip);
    stats.apply(&mut out);
    out
}

/// Independent stream for sample `index` of `epoch`.
pub fn sample_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    rng.set_word_pos((index as u128) << 20);
    rng
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn render_split(
    classes: usize,
    per_class: usize,
    size: usize,
    noise: f64,
    split: Split,
    rng: &mut ChaCha8Rng,
) -> Result<DatasetSplit> {
    let n = classes * per_class;
    let plane = size * size;
    let mut pixels = vec![0.0f32; n * 3 * plane];
    let mut labels = Vec::with_capacity(n);
    let noise_dist = Normal::new(0.0, noise).expect("positive std");
    let s = size as f64;
    for i in 0..n {
        let k = i % classes;
        labels.push(k);
        let color = hsv_to_rgb(k as f64 / classes as f64, 0.85, 0.95);
        let angle = 2.0 * PI * k as f64 / classes as f64;
        let jitter = s / 16.0;
        let cx = s / 2.0 + 0.22 * s * angle.cos() + rng.random_range(-jitter..=jitter);
        let cy = s / 2.0 + 0.22 * s * angle.sin() + rng.random_range(-jitter..=jitter);
        let radius = rng.random_range(s / 7.0..=s / 5.0);
        let gain = rng.random_range(0.8..=1.0);
        let img = &mut pixels[i * 3 * plane..(i + 1) * 3 * plane];
        for y in 0..size {
            for x in 0..size {
                let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
                let alpha = (radius + 0.5 - d).clamp(0.0, 1.0);
                for ch in 0..3 {
                    let bg = 0.25;
                    let v = bg * (1.0 - alpha) + gain * color[ch] * alpha + noise_dist.sample(rng);
                    img[ch * plane + y * size + x] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    let images = Tensor::new(&[n, 3, size, size], pixels)?;
    DatasetSplit::new(images, labels, split, classes)
}

/// Accuracy of a nearest-class-mean classifier in raw pixel space,
/// evaluated on the split it was fitted to.
pub fn nearest_centroid_accuracy(split: &DatasetSplit) -> f64 {
    let dim: usize = split.image_shape().iter().product();
    let mut centroids = vec![vec![0.0f64; dim]; split.classes];
    let counts = split.class_counts();
    for i in 0..split.len() {
        for (c, &v) in centroids[split.labels[i]].iter_mut().zip(split.image(i)) {
            *c += v as f64;
        }
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= n.max(1) as f64);
    }
    let correct = (0..split.len())
        .filter(|&i| {
            let img = split.image(i);
            let best = centroids
                .iter()
                .map(|c| c.iter().zip(img).map(|(a, &b)| (a - b as f64).powi(2)).sum::<f64>())
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(k, _)| k);
            best == Some(split.labels[i])
        })
        .count();
    correct as f64 / split.len() as f64
}

/// Minimum nearest-centroid accuracy the generated train split must reach.
pub const SYNTHETIC_MIN_CENTROID_ACC: f64 = 0.6;

/// Colored blobs whose hue and position depend on the class, plus pixel
/// noise. The validation split holds `max(per_class / 2, 1)` items per
/// class from an independent stream. If the train split fails the
/// nearest-centroid check, noise is halved and the set regenerated.
pub fn make_synthetic(
    classes: usize,
    per_class: usize,
    size: usize,
    seed: u64,
) -> Result<(DatasetSplit, DatasetSplit)> {
    if classes < 2 {
        return Err(Error::invalid("make_synthetic", "need at least two classes"));
    }
    if per_class == 0 || size < 8 {
        return Err(Error::invalid("make_synthetic", "need per_class >= 1 and size >= 8"));
    }
    let mut noise = 0.1;
    loop {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let train = render_split(classes, per_class, size, noise, Split::Train, &mut rng)?;
        if nearest_centroid_accuracy(&train) > SYNTHETIC_MIN_CENTROID_ACC || noise < 1e-3 {
            rng.set_stream(2);
            rng.set_word_pos(0);
            let val = render_split(classes, (per_class / 2).max(1), size, noise, Split::Val, &mut rng)?;
            return Ok((train, val));
        }
        noise /= 2.0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cifar_record_sizes() {
        assert_eq!(10_000 * CifarVariant::C10.record_len(), 30_730_000);
        assert_eq!(CifarVariant::C100.record_len(), 3074);
    }

    #[test]
    fn parse_uses_fine_label() {
        let mut rec = vec![3u8, 42];
        rec.extend(std::iter::repeat_n(255u8, CIFAR_PIXELS));
        let (px, labels) = parse_cifar(&rec, CifarVariant::C100, Path::new("x")).unwrap();
        assert_eq!(labels, [42]);
        assert!(px.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let bytes = vec![0u8; CifarVariant::C10.record_len() * 2 - 1];
        let err = parse_cifar(&bytes, CifarVariant::C10, Path::new("data_batch_1.bin")).unwrap_err();
        match err {
            Error::CorruptFile { actual, .. } => assert_eq!(actual, 6145),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn double_flip_restores_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img: Vec<f32> = (0..3 * 6 * 6).map(|_| rng.random()).collect();
        let once = crop_flip(&img, [3, 6, 6], 0, 0, 0, true);
        let twice = crop_flip(&once, [3, 6, 6], 0, 0, 0, true);
        assert_eq!(twice, img);
        assert_eq!(crop_flip(&img, [3, 6, 6], 4, 4, 4, false), img);
    }

    #[test]
    fn crop_shift_moves_content() {
        let mut img = vec![0.0f32; 4 * 4];
        img[0] = 1.0;
        let shifted = crop_flip(&img, [1, 4, 4], 1, 0, 0, false);
        assert_eq!(shifted[5], 1.0);
        assert_eq!(shifted.iter().sum::<f32>(), 1.0);
    }

    #[test]
    fn augment_is_seeded() {
        let (train, _) = make_synthetic(3, 2, 8, 1).unwrap();
        let stats = ChannelStats::compute(&train);
        let a = augment(
            train.image(0),
            [3, 8, 8],
            AugmentConfig::default(),
            &stats,
            &mut sample_rng(5, 1, 0),
        );
        let b = augment(
            train.image(0),
            [3, 8, 8],
            AugmentConfig::default(),
            &stats,
            &mut sample_rng(5, 1, 0),
        );
        assert_eq!(a, b);
        assert_eq!(a.len(), 3 * 8 * 8);
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a = make_synthetic(10, 20, 32, 7).unwrap();
        let b = make_synthetic(10, 20, 32, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.class_counts(), vec![20; 10]);
        assert_eq!(a.1.class_counts(), vec![10; 10]);
        assert!(nearest_centroid_accuracy(&a.0) > SYNTHETIC_MIN_CENTROID_ACC);
    }

    #[test]
    fn standardization_zero_mean_unit_std() {
        let (train, _) = make_synthetic(4, 10, 16, 3).unwrap();
        let stats = ChannelStats::compute(&train);
        let mut images = train.images.clone();
        for img in images.data_mut().chunks_mut(3 * 16 * 16) {
            stats.apply(img);
        }
        let std_split = DatasetSplit {
            images,
            ..train.clone()
        };
        let again = ChannelStats::compute(&std_split);
        for c in 0..3 {
            assert!(again.mean[c].abs() < 1e-6, "{:?}", again.mean);
            assert!((again.std[c] - 1.0).abs() < 1e-3, "{:?}", again.std);
        }
    }

    #[test]
    fn dataset_round_trip_is_bit_identical() {
        let (train, _) = make_synthetic(3, 4, 8, 9).unwrap();
        let bytes = train.to_container().to_bytes().unwrap();
        let back = DatasetSplit::from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, train);
        assert_eq!(back.to_container().to_bytes().unwrap(), bytes);
    }
}
