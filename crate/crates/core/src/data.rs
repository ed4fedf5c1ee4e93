//! Datasets: the seeded synthetic generator and the CIFAR-10 binary loader.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const SYNTHETIC_CLASSES: usize = 10;
pub const SYNTHETIC_SIDE: usize = 16;
pub const CIFAR_RECORD: usize = 3073;
pub const CIFAR_SIDE: usize = 32;

/// Derive an independent 64-bit seed for stream `stream` of `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Labeled images in NCHW order.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.shape().n != labels.len() {
            return Err(Error::Dataset(format!(
                "{} images but {} labels",
                images.shape().n,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Dataset(format!("label {bad} outside {classes} classes")));
        }
        Ok(Self { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s.c, s.h, s.w]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.gather_samples(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.images.gather_samples(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Index batches in order, or shuffled by `shuffle` when given.
    pub fn batches(&self, batch_size: usize, shuffle: Option<&mut ChaCha8Rng>) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        if let Some(rng) = shuffle {
            order.shuffle(rng);
        }
        order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
    }

    /// Seeded split holding out `eval_fraction` of every class.
    pub fn split_stratified(&self, eval_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&eval_fraction) {
            return Err(Error::invalid(format!("eval fraction {eval_fraction} outside [0, 1)")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut train, mut eval) = (Vec::new(), Vec::new());
        for class in 0..self.classes {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == class).collect();
            idx.shuffle(&mut rng);
            let mut take = (idx.len() as f64 * eval_fraction).round() as usize;
            if eval_fraction > 0.0 && take == 0 && idx.len() >= 2 {
                take = 1;
            }
            eval.extend_from_slice(&idx[..take]);
            train.extend_from_slice(&idx[take..]);
        }
        train.sort_unstable();
        eval.sort_unstable();
        Ok((self.subset(&train), self.subset(&eval)))
    }

    /// Count of samples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("preprocessing pool: {e}")))
}

/// Label of synthetic sample `i`. Classes are balanced by construction.
pub fn synthetic_label(i: usize) -> usize {
    i % SYNTHETIC_CLASSES
}

/// One 3×16×16 synthetic image. The class fixes a grating orientation
/// (five angles), a spatial frequency (two), and a colour tint; phase,
/// contrast, and pixel noise are random.
fn synthetic_image(label: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let side = SYNTHETIC_SIDE;
    let angle = (label % 5) as f64 * PI / 5.0;
    let cycles = if label < 5 { 1.5 } else { 3.5 };
    let freq = 2.0 * PI * cycles / side as f64;
    let (ca, sa) = (angle.cos(), angle.sin());
    let phase = rng.random_range(0.0..2.0 * PI);
    let contrast = rng.random_range(0.7..1.3);
    let tint = [
        0.6 + 0.4 * ((label * 3) % 5) as f64 / 4.0,
        0.6 + 0.4 * ((label * 7 + 1) % 5) as f64 / 4.0,
        0.6 + 0.4 * ((label + 2) % 5) as f64 / 4.0,
    ];
    let noise = Normal::new(0.0, 0.35).expect("positive std");
    let mut out = Vec::with_capacity(3 * side * side);
    for t in tint {
        for y in 0..side {
            for x in 0..side {
                let u = ca * x as f64 + sa * y as f64;
                let v = contrast * t * (freq * u + phase).sin() + noise.sample(rng);
                out.push(v as f32);
            }
        }
    }
    out
}

/// Generate `samples` synthetic images on `threads` preprocessing workers.
/// The output depends only on `samples` and `seed`.
pub fn synthetic(samples: usize, seed: u64, threads: usize) -> Result<Dataset> {
    if samples == 0 {
        return Err(Error::Dataset("synthetic dataset needs at least one sample".into()));
    }
    let images: Vec<Vec<f32>> = pool(threads)?.install(|| {
        (0..samples)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
                synthetic_image(synthetic_label(i), &mut rng)
            })
            .collect()
    });
    let shape = Shape::new(samples, 3, SYNTHETIC_SIDE, SYNTHETIC_SIDE);
    let data = images.into_iter().flatten().collect();
    Dataset::new(
        Tensor::from_vec(shape, data)?,
        (0..samples).map(synthetic_label).collect(),
        SYNTHETIC_CLASSES,
    )
}

/// Decode CIFAR-10 binary records: one label byte then 3072 channel-major
/// pixel bytes. Pixels map to `[-0.5, 0.5]`.
pub fn decode_cifar_records(bytes: &[u8], threads: usize) -> Result<Dataset> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Dataset(format!(
            "{} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let decoded: Vec<(usize, Vec<f32>)> = pool(threads)?.install(|| {
        bytes
            .par_chunks(CIFAR_RECORD)
            .map(|r| (r[0] as usize, r[1..].iter().map(|&p| p as f32 / 255.0 - 0.5).collect()))
            .collect()
    });
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (l, px) in decoded {
        labels.push(l);
        data.extend(px);
    }
    Dataset::new(
        Tensor::from_vec(Shape::new(n, 3, CIFAR_SIDE, CIFAR_SIDE), data)?,
        labels,
        10,
    )
}

/// Load CIFAR-10 binary batch files. `path` is a single `.bin` file or a
/// directory whose `data_batch_*.bin` files are read in name order.
/// `limit` truncates to the first records.
pub fn load_cifar10(path: &Path, limit: Option<usize>, threads: usize) -> Result<Dataset> {
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("data_batch") && n.ends_with(".bin"))
            })
            .collect();
        v.sort();
        v
    } else if path.is_file() {
        vec![path.to_path_buf()]
    } else {
        return Err(Error::Dataset(format!("{} does not exist", path.display())));
    };
    if files.is_empty() {
        return Err(Error::Dataset(format!("no data_batch_*.bin files in {}", path.display())));
    }
    let mut bytes = Vec::new();
    for f in files {
        bytes.extend(fs::read(&f).map_err(|e| Error::Dataset(format!("{}: {e}", f.display())))?);
        if limit.is_some_and(|l| bytes.len() >= l * CIFAR_RECORD) {
            break;
        }
    }
    if let Some(l) = limit {
        bytes.truncate(l * CIFAR_RECORD);
    }
    decode_cifar_records(&bytes, threads)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_balanced_and_thread_independent() {
        let a = synthetic(200, 5, 1).unwrap();
        let b = synthetic(200, 5, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.class_counts(), vec![20; 10]);
        assert_eq!(a.image_shape(), [3, 16, 16]);
        assert!(a.images.is_finite());
        assert_ne!(a, synthetic(200, 6, 4).unwrap());
        assert!(synthetic(0, 1, 1).is_err());
    }

    #[test]
    fn stratified_split_holds_out_a_tenth_per_class() {
        let d = synthetic(300, 1, 2).unwrap();
        let (train, eval) = d.split_stratified(0.1, 9).unwrap();
        assert_eq!(eval.class_counts(), vec![3; 10]);
        assert_eq!(train.len() + eval.len(), 300);
        assert_eq!((train, eval), d.split_stratified(0.1, 9).unwrap());
    }

    #[test]
    fn cifar_records_decode() {
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD];
        bytes[0] = 7;
        bytes[1] = 255;
        bytes[CIFAR_RECORD] = 2;
        bytes[CIFAR_RECORD + 1 + 1024] = 255; // first green pixel of record 2
        let d = decode_cifar_records(&bytes, 2).unwrap();
        assert_eq!(d.labels, vec![7, 2]);
        assert_eq!(d.images.shape(), Shape::new(2, 3, 32, 32));
        assert_eq!(d.images.data()[0], 0.5);
        assert_eq!(d.images.data()[1], -0.5);
        assert_eq!(d.images.data()[3072 + 1024], 0.5);
        assert!(decode_cifar_records(&bytes[..100], 1).is_err());
        bytes[0] = 10;
        assert!(decode_cifar_records(&bytes, 1).is_err());
    }

    #[test]
    fn batches_cover_everything() {
        let d = synthetic(25, 0, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = d.batches(8, Some(&mut rng));
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![8, 8, 8, 1]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..25).collect::<Vec<_>>());
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
        assert_eq!(derive_seed(3, 4), derive_seed(3, 4));
    }
}
