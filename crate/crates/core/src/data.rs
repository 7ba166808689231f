//! Datasets: the CIFAR-10 binary format and a synthetic stand-in.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Environment variable naming the default CIFAR-10 directory.
pub const DATA_DIR_ENV: &str = "CHANMAP_DATA_DIR";

pub const CIFAR_RECORD: usize = 3073;
const CIFAR_PIXELS: usize = 3072;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Per-channel normalization applied after scaling pixels to [0, 1].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Normalization {
    pub const CIFAR10: Normalization = Normalization {
        mean: [0.4914, 0.4822, 0.4465],
        std: [0.2470, 0.2435, 0.2616],
    };
}

impl Default for Normalization {
    fn default() -> Self {
        Self::CIFAR10
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[n, C, H, W]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if images.rank() != 4 || images.dim(0) != labels.len() {
            return Err(Error::Data(format!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        if let Some(i) = labels.iter().position(|&l| l >= classes) {
            return Err(Error::Data(format!("sample {i}: label {} >= {classes} classes", labels[i])));
        }
        Ok(Dataset {
            images,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Dataset {
        Dataset {
            images: self.images.select_batch(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            split,
        }
    }

    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.images.select_batch(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Index batches, shuffled when `rng` is given. The last batch may be short.
    pub fn batches(&self, batch_size: usize, rng: Option<&mut Rng>) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        if let Some(r) = rng {
            order.shuffle(r);
        }
        order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
    }

    /// Splits off `fraction` of the samples as a validation set, fixed by `seed`.
    pub fn split_validation(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Invalid(format!("validation fraction {fraction} outside [0, 1)")));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng::derive(seed, 0x7661_6c00));
        let n_val = ((self.len() as f64 * fraction).round() as usize).max(usize::from(fraction > 0.0));
        if n_val >= self.len() {
            return Err(Error::Data(format!("{} samples cannot hold a {fraction} validation split", self.len())));
        }
        let (val, train) = order.split_at(n_val);
        let mut val = val.to_vec();
        let mut train = train.to_vec();
        val.sort_unstable();
        train.sort_unstable();
        Ok((self.subset(&train, Split::Train), self.subset(&val, Split::Val)))
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

/// Parses raw CIFAR-10 records into `(pixels, labels)`; pixel bytes stay in file order.
pub fn parse_cifar_records(bytes: &[u8], first_index: usize) -> Result<(Vec<u8>, Vec<usize>)> {
    if bytes.len() % CIFAR_RECORD != 0 {
        let i = first_index + bytes.len() / CIFAR_RECORD;
        return Err(Error::Data(format!(
            "truncated record {i}: {} of {CIFAR_RECORD} bytes",
            bytes.len() % CIFAR_RECORD
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks(CIFAR_RECORD).enumerate() {
        if rec[0] >= 10 {
            return Err(Error::Data(format!("record {}: label byte {} >= 10", first_index + i, rec[0])));
        }
        labels.push(rec[0] as usize);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((pixels, labels))
}

/// Loads CIFAR-10 binary files. `path` is a single `.bin` file or a directory
/// holding the standard batch files for `split` (`Val` reads the training files).
/// With `limit`, a seeded random subset of that many records is kept.
pub fn load_cifar10_binary(
    path: &Path,
    split: Split,
    limit: Option<usize>,
    seed: u64,
    norm: &Normalization,
) -> Result<Dataset> {
    let files: Vec<PathBuf> = if path.is_dir() {
        match split {
            Split::Test => vec![path.join(CIFAR_TEST_FILE)],
            Split::Train | Split::Val => CIFAR_TRAIN_FILES.iter().map(|f| path.join(f)).collect(),
        }
    } else {
        vec![path.to_path_buf()]
    };
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in &files {
        let bytes = std::fs::read(f).map_err(|e| Error::Data(format!("{}: {e}", f.display())))?;
        let (p, l) = parse_cifar_records(&bytes, labels.len())?;
        pixels.extend(p);
        labels.extend(l);
    }
    let mut keep: Vec<usize> = (0..labels.len()).collect();
    if let Some(limit) = limit {
        if limit < keep.len() {
            keep.shuffle(&mut rng::derive(seed, 0xc1fa));
            keep.truncate(limit);
            keep.sort_unstable();
        }
    }
    let mut data = Vec::with_capacity(keep.len() * CIFAR_PIXELS);
    for &i in &keep {
        let rec = &pixels[i * CIFAR_PIXELS..(i + 1) * CIFAR_PIXELS];
        for (c, plane) in rec.chunks(1024).enumerate() {
            data.extend(plane.iter().map(|&b| (b as f32 / 255.0 - norm.mean[c]) / norm.std[c]));
        }
    }
    let images = Tensor::new([keep.len(), 3, 32, 32], data)?;
    Dataset::new(images, keep.iter().map(|&i| labels[i]).collect(), 10, split)
}

/// Inverse of the loader's normalization for one value (used by round-trip tests).
pub fn denormalize_pixel(v: f32, channel: usize, norm: &Normalization) -> u8 {
    ((v * norm.std[channel] + norm.mean[channel]) * 255.0).round() as u8
}

/// Sample-level variation of [`gen_synthetic_with`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticParams {
    /// Std of the additive Gaussian pixel noise.
    pub noise: f32,
    /// Largest random translation in pixels (circular).
    pub max_shift: usize,
}

impl SyntheticParams {
    /// Nearest-centroid separable (>= 95%).
    pub const EASY: SyntheticParams = SyntheticParams {
        noise: 0.6,
        max_shift: 1,
    };
    /// Translation-invariant task that a small CNN does not saturate; stands
    /// in for CIFAR-10 when the real files are not available.
    pub const CIFAR_PROXY: SyntheticParams = SyntheticParams {
        noise: 3.0,
        max_shift: 16,
    };
}

/// Class-blob images with [`SyntheticParams::EASY`].
pub fn gen_synthetic(classes: usize, n: usize, shape: [usize; 3], seed: u64) -> Result<Dataset> {
    gen_synthetic_with(classes, n, shape, seed, SyntheticParams::EASY)
}

/// Class-blob images: each class owns a smooth prototype made of a few
/// Gaussian bumps per channel; samples are the prototype under a random
/// circular shift of at most `max_shift` pixels, a random contrast in
/// [0.8, 1.2] and Gaussian pixel noise. Labels are balanced (`i % classes`)
/// and then shuffled.
pub fn gen_synthetic_with(classes: usize, n: usize, shape: [usize; 3], seed: u64, params: SyntheticParams) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Invalid(format!("synthetic data needs >= 2 classes, got {classes}")));
    }
    let [c, h, w] = shape;
    if c == 0 || h == 0 || w == 0 || n == 0 {
        return Err(Error::Invalid(format!("empty synthetic shape {shape:?} x {n}")));
    }
    let mut proto_rng = rng::derive(seed, 1);
    let prototypes: Vec<Vec<f32>> = (0..classes).map(|_| prototype(shape, &mut proto_rng)).collect();
    let mut r = rng::derive(seed, 2);
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut r);
    let noise = Normal::new(0.0f32, params.noise).map_err(|e| Error::Invalid(format!("noise: {e}")))?;
    let s = params.max_shift as i64;
    let plane = h * w;
    let mut data = vec![0.0f32; n * c * plane];
    for (i, &label) in labels.iter().enumerate() {
        let p = &prototypes[label];
        let dy = r.random_range(-s..=s);
        let dx = r.random_range(-s..=s);
        let contrast = r.random_range(0.8f32..1.2);
        let out = &mut data[i * c * plane..(i + 1) * c * plane];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sy = (y as i64 - dy).rem_euclid(h as i64) as usize;
                    let sx = (x as i64 - dx).rem_euclid(w as i64) as usize;
                    out[ch * plane + y * w + x] = contrast * p[ch * plane + sy * w + sx] + noise.sample(&mut r);
                }
            }
        }
    }
    Dataset::new(Tensor::new([n, c, h, w], data)?, labels, classes, Split::Train)
}

fn prototype(shape: [usize; 3], r: &mut Rng) -> Vec<f32> {
    let [c, h, w] = shape;
    let mut img = vec![0.0f32; c * h * w];
    for ch in 0..c {
        for _ in 0..3 {
            let cy = r.random_range(0.0..h as f32);
            let cx = r.random_range(0.0..w as f32);
            let sigma = r.random_range(0.12f32..0.3) * h.max(w) as f32;
            let amp = if r.random_bool(0.5) { 1.0 } else { -1.0 } * r.random_range(0.6f32..1.4);
            for y in 0..h {
                for x in 0..w {
                    let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                    img[(ch * h + y) * w + x] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
                }
            }
        }
    }
    img
}

/// Accuracy of assigning each sample to the nearest class mean.
pub fn nearest_centroid_accuracy(ds: &Dataset) -> f64 {
    let d = ds.images.numel() / ds.len();
    let mut centroids = vec![vec![0.0f64; d]; ds.classes];
    let hist = ds.label_histogram();
    for (x, &l) in ds.images.data().chunks(d).zip(&ds.labels) {
        centroids[l].iter_mut().zip(x).for_each(|(c, &v)| *c += v as f64);
    }
    for (c, &n) in centroids.iter_mut().zip(&hist) {
        c.iter_mut().for_each(|v| *v /= n.max(1) as f64);
    }
    let correct = ds
        .images
        .data()
        .chunks(d)
        .zip(&ds.labels)
        .filter(|(x, &l)| {
            let dist = |c: &Vec<f64>| c.iter().zip(x.iter()).map(|(a, &b)| (a - b as f64).powi(2)).sum::<f64>();
            let best = (0..ds.classes)
                .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
                .expect("classes >= 2");
            best == l
        })
        .count();
    correct as f64 / ds.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, seed: u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend((0..CIFAR_PIXELS).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)));
        r
    }

    #[test]
    fn cifar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("two.bin");
        let mut bytes = record(3, 7);
        bytes.extend(record(9, 1));
        std::fs::write(&path, &bytes).unwrap();
        let norm = Normalization::CIFAR10;
        let ds = load_cifar10_binary(&path, Split::Train, None, 0, &norm).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels, vec![3, 9]);
        for (i, rec) in bytes.chunks(CIFAR_RECORD).enumerate() {
            for (j, &b) in rec[1..].iter().enumerate() {
                let v = ds.images.data()[i * CIFAR_PIXELS + j];
                assert_eq!(denormalize_pixel(v, j / 1024, &norm), b);
            }
        }
    }

    #[test]
    fn cifar_rejects_bad_records() {
        let mut bytes = record(1, 0);
        bytes.extend(record(11, 0));
        let err = parse_cifar_records(&bytes, 0).unwrap_err();
        assert!(err.to_string().contains("record 1"), "{err}");
        assert!(parse_cifar_records(&bytes[..CIFAR_RECORD + 10], 0).is_err());
    }

    #[test]
    fn synthetic_properties() {
        let a = gen_synthetic(10, 403, [3, 16, 16], 5).unwrap();
        let b = gen_synthetic(10, 403, [3, 16, 16], 5).unwrap();
        assert_eq!(a, b);
        let h = a.label_histogram();
        assert!(h.iter().max().unwrap() - h.iter().min().unwrap() <= 1);
        assert!(nearest_centroid_accuracy(&a) >= 0.95);
    }

    #[test]
    fn validation_split_is_disjoint_and_seeded() {
        let ds = gen_synthetic(4, 100, [1, 4, 4], 1).unwrap();
        let (t, v) = ds.split_validation(0.1, 9).unwrap();
        assert_eq!((t.len(), v.len()), (90, 10));
        let (t2, v2) = ds.split_validation(0.1, 9).unwrap();
        assert_eq!((t, v), (t2, v2));
    }
}
