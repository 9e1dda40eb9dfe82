//! CIFAR binary ingestion, augmentation and batching.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::parallel_enabled;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const IMAGE_SIDE: usize = 32;
pub const IMAGE_PIXELS: usize = 3 * IMAGE_SIDE * IMAGE_SIDE;
/// Zero padding on each border before random cropping.
pub const CROP_PAD: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn record_len(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1 + IMAGE_PIXELS,
            CifarVariant::Cifar100 => 2 + IMAGE_PIXELS,
        }
    }

    pub fn classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }

    pub fn train_files(self) -> Vec<&'static str> {
        match self {
            CifarVariant::Cifar10 => vec![
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ],
            CifarVariant::Cifar100 => vec!["train.bin"],
        }
    }

    pub fn test_files(self) -> Vec<&'static str> {
        match self {
            CifarVariant::Cifar10 => vec!["test_batch.bin"],
            CifarVariant::Cifar100 => vec!["test.bin"],
        }
    }
}

impl std::str::FromStr for CifarVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "").as_str() {
            "cifar10" => Ok(CifarVariant::Cifar10),
            "cifar100" => Ok(CifarVariant::Cifar100),
            other => Err(Error::InvalidConfig(format!("unknown dataset `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Synthetic,
}

/// 8-bit RGB images stored channel-planar, one `IMAGE_PIXELS` record each.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pixels: Vec<u8>,
    labels: Vec<usize>,
    classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(pixels: Vec<u8>, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if pixels.len() != labels.len() * IMAGE_PIXELS {
            return Err(Error::InvalidConfig(format!(
                "{} pixel bytes do not hold {} images",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(Self {
            pixels,
            labels,
            classes,
            split,
        })
    }

    /// Learnable synthetic data: every class has its own random colour
    /// template, and images are templates plus uniform noise.
    pub fn synthetic(n: usize, classes: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let templates: Vec<Vec<u8>> = (0..classes)
            .map(|_| (0..IMAGE_PIXELS).map(|_| rng.gen_range(40..=215u8)).collect())
            .collect();
        let mut pixels = Vec::with_capacity(n * IMAGE_PIXELS);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % classes;
            labels.push(label);
            pixels.extend(
                templates[label]
                    .iter()
                    .map(|&p| (p as i32 + rng.gen_range(-40..=40)).clamp(0, 255) as u8),
            );
        }
        Self::new(pixels, labels, classes, Split::Synthetic)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.pixels[i * IMAGE_PIXELS..(i + 1) * IMAGE_PIXELS]
    }

    /// First `n` records (all of them if `n` exceeds the length).
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            pixels: self.pixels[..n * IMAGE_PIXELS].to_vec(),
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
            split: self.split,
        }
    }

    /// Serializes to the CIFAR binary layout of `variant`; the coarse label
    /// of CIFAR-100 records is written as 0.
    /// The first `n` images and the rest.
    pub fn split_at(&self, n: usize) -> (Self, Self) {
        let n = n.min(self.len());
        let tail = Self {
            pixels: self.pixels[n * IMAGE_PIXELS..].to_vec(),
            labels: self.labels[n..].to_vec(),
            classes: self.classes,
            split: self.split,
        };
        (self.truncated(n), tail)
    }

    pub fn to_cifar_bytes(&self, variant: CifarVariant) -> Result<Vec<u8>> {
        if self.classes > variant.classes() {
            return Err(Error::InvalidConfig(format!(
                "{} classes do not fit {:?}",
                self.classes, variant
            )));
        }
        let mut out = Vec::with_capacity(self.len() * variant.record_len());
        for i in 0..self.len() {
            if variant == CifarVariant::Cifar100 {
                out.push(0);
            }
            out.push(self.labels[i] as u8);
            out.extend_from_slice(self.image(i));
        }
        Ok(out)
    }

    /// Per-channel mean and standard deviation of pixel values scaled to [0, 1].
    pub fn channel_stats(&self) -> ChannelStats {
        let plane = IMAGE_SIDE * IMAGE_SIDE;
        let mut sum = [0f64; 3];
        let mut sq = [0f64; 3];
        for img in self.pixels.chunks_exact(IMAGE_PIXELS) {
            for c in 0..3 {
                for &p in &img[c * plane..(c + 1) * plane] {
                    let v = p as f64 / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let count = (self.len() * plane).max(1) as f64;
        let mut stats = ChannelStats::identity();
        for c in 0..3 {
            let mean = sum[c] / count;
            let var = (sq[c] / count - mean * mean).max(0.0);
            stats.mean[c] = mean;
            stats.std[c] = if var > 1e-12 { var.sqrt() } else { 1.0 };
        }
        stats
    }

    /// Standardized (and optionally augmented) batch of the given records.
    /// Augmentation randomness for record `i` derives from `(aug_seed, i)`
    /// alone, so batches do not depend on thread scheduling.
    pub fn batch<T: Scalar>(&self, indices: &[usize], stats: &ChannelStats, aug_seed: Option<u64>) -> Result<(Tensor<T>, Vec<usize>)> {
        let build = |(slot, &i): (usize, &usize)| -> Vec<T> {
            match aug_seed {
                Some(seed) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(slot as u64);
                    augment(self.image(i), &mut rng, stats)
                }
                None => standardize(self.image(i), stats),
            }
        };
        let images: Vec<Vec<T>> = if parallel_enabled() {
            indices.par_iter().enumerate().map(build).collect()
        } else {
            indices.iter().enumerate().map(build).collect()
        };
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let data = images.concat();
        Ok((Tensor::from_vec([indices.len(), 3, IMAGE_SIDE, IMAGE_SIDE], data)?, labels))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ChannelStats {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

/// Parses CIFAR records from memory. `path` only labels errors.
pub fn parse_cifar(bytes: &[u8], variant: CifarVariant, split: Split, path: &Path) -> Result<Dataset> {
    let rec = variant.record_len();
    let bad = |reason: String| Error::Dataset {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.is_empty() || !bytes.len().is_multiple_of(rec) {
        return Err(bad(format!(
            "length {} is not a positive multiple of the {rec}-byte record size (truncated?)",
            bytes.len()
        )));
    }
    let n = bytes.len() / rec;
    let mut pixels = Vec::with_capacity(n * IMAGE_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for (k, r) in bytes.chunks_exact(rec).enumerate() {
        let label = r[rec - IMAGE_PIXELS - 1] as usize;
        if label >= variant.classes() {
            return Err(bad(format!(
                "record {k}: label {label} out of range for {} classes",
                variant.classes()
            )));
        }
        labels.push(label);
        pixels.extend_from_slice(&r[rec - IMAGE_PIXELS..]);
    }
    Dataset::new(pixels, labels, variant.classes(), split)
}

pub fn load_cifar_file(path: &Path, variant: CifarVariant, split: Split) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::Dataset {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    parse_cifar(&bytes, variant, split, path)
}

fn resolve_dir(dir: &Path, variant: CifarVariant) -> PathBuf {
    let nested = match variant {
        CifarVariant::Cifar10 => "cifar-10-batches-bin",
        CifarVariant::Cifar100 => "cifar-100-binary",
    };
    let first = variant.train_files()[0];
    if !dir.join(first).exists() && dir.join(nested).join(first).exists() {
        dir.join(nested)
    } else {
        dir.to_path_buf()
    }
}

/// Guesses the variant from the file names present in `dir`.
pub fn detect_variant(dir: &Path) -> Option<CifarVariant> {
    [CifarVariant::Cifar10, CifarVariant::Cifar100]
        .into_iter()
        .find(|&v| resolve_dir(dir, v).join(v.train_files()[0]).exists())
}

/// Loads one split from a directory in the canonical file layout
/// (`data_batch_{1..5}.bin` / `test_batch.bin`, or `train.bin` / `test.bin`).
/// `explicit` if given, otherwise the flavour whose files are present in `dir`.
pub fn dataset_for_dir(explicit: Option<CifarVariant>, dir: &Path) -> Result<CifarVariant> {
    explicit.or_else(|| detect_variant(dir)).ok_or_else(|| Error::Dataset {
        path: dir.to_path_buf(),
        reason: "no CIFAR-10 or CIFAR-100 binary files found".into(),
    })
}

pub fn load_cifar(dir: &Path, variant: CifarVariant, split: Split) -> Result<Dataset> {
    let root = resolve_dir(dir, variant);
    let files = match split {
        Split::Test => variant.test_files(),
        _ => variant.train_files(),
    };
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let part = load_cifar_file(&root.join(f), variant, split)?;
        pixels.extend_from_slice(&part.pixels);
        labels.extend_from_slice(&part.labels);
    }
    Dataset::new(pixels, labels, variant.classes(), split)
}

/// Zero-pads by [`CROP_PAD`], crops 32x32 at `(dy, dx)` of the padded image
/// and optionally mirrors horizontally. Offsets range over `0..=2 * CROP_PAD`.
pub fn pad_crop_flip(image: &[u8], dy: usize, dx: usize, flip: bool) -> Vec<u8> {
    assert_eq!(image.len(), IMAGE_PIXELS, "image must be 3x32x32");
    assert!(dy <= 2 * CROP_PAD && dx <= 2 * CROP_PAD, "crop offset out of range");
    let s = IMAGE_SIDE;
    let mut out = vec![0u8; IMAGE_PIXELS];
    for c in 0..3 {
        for y in 0..s {
            let sy = (y + dy) as isize - CROP_PAD as isize;
            if !(0..s as isize).contains(&sy) {
                continue;
            }
            for x in 0..s {
                let ox = if flip { s - 1 - x } else { x };
                let sx = (ox + dx) as isize - CROP_PAD as isize;
                if (0..s as isize).contains(&sx) {
                    out[(c * s + y) * s + x] = image[(c * s + sy as usize) * s + sx as usize];
                }
            }
        }
    }
    out
}

/// `(p / 255 - mean_c) / std_c` for every pixel.
pub fn standardize<T: Scalar>(image: &[u8], stats: &ChannelStats) -> Vec<T> {
    let plane = IMAGE_SIDE * IMAGE_SIDE;
    image
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            let c = k / plane;
            T::lit((p as f64 / 255.0 - stats.mean[c]) / stats.std[c])
        })
        .collect()
}

pub fn augment_with<T: Scalar>(image: &[u8], dy: usize, dx: usize, flip: bool, stats: &ChannelStats) -> Vec<T> {
    standardize(&pad_crop_flip(image, dy, dx, flip), stats)
}

/// Random crop of the padded image, mirror with probability 1/2, standardize.
pub fn augment<T: Scalar, R: Rng + ?Sized>(image: &[u8], rng: &mut R, stats: &ChannelStats) -> Vec<T> {
    let dy = rng.gen_range(0..=2 * CROP_PAD);
    let dx = rng.gen_range(0..=2 * CROP_PAD);
    let flip = rng.gen_bool(0.5);
    augment_with(image, dy, dx, flip, stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Vec<u8> {
        (0..IMAGE_PIXELS).map(|i| (i % 251) as u8).collect()
    }

    #[test]
    fn centre_crop_is_identity() {
        let img = ramp();
        assert_eq!(pad_crop_flip(&img, 4, 4, false), img);
        let twice = pad_crop_flip(&pad_crop_flip(&img, 4, 4, true), 4, 4, true);
        assert_eq!(twice, img);
    }

    #[test]
    fn corner_crop_has_zero_borders() {
        let img = vec![7u8; IMAGE_PIXELS];
        let out = pad_crop_flip(&img, 0, 0, false);
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    let v = out[(c * 32 + y) * 32 + x];
                    assert_eq!(v, if y < 4 || x < 4 { 0 } else { 7 });
                }
            }
        }
    }

    #[test]
    fn stats_of_constant_data() {
        let ds = Dataset::new(vec![51; 2 * IMAGE_PIXELS], vec![0, 1], 10, Split::Train).unwrap();
        let s = ds.channel_stats();
        assert!((s.mean[0] - 0.2).abs() < 1e-12);
        assert_eq!(s.std, [1.0; 3]);
    }
}
