//! CIFAR-10 binary loading, a synthetic stand-in, augmentation and batching.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{CLASSES, INPUT_CHANNELS, INPUT_SIZE};
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor4};

const PIXELS: usize = INPUT_CHANNELS * INPUT_SIZE * INPUT_SIZE;
/// One label byte followed by the R, G and B planes.
pub const RECORD_BYTES: usize = 1 + PIXELS;
pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";

/// Images `(n, 3, 32, 32)` in `[0, 1]` with their labels. `ids` are the
/// positions of the samples in the dataset they were drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch<T> {
    pub images: Tensor4<T>,
    pub labels: Vec<u8>,
    pub ids: Vec<usize>,
}

impl<T: Scalar> LabeledBatch<T> {
    pub fn new(images: Tensor4<T>, labels: Vec<u8>) -> Result<Self> {
        let s = images.shape();
        if (s.c, s.h, s.w) != (INPUT_CHANNELS, INPUT_SIZE, INPUT_SIZE) || labels.len() != s.n {
            return Err(Error::Data(format!("batch of {} labels does not fit images {s}", labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= CLASSES) {
            return Err(Error::LabelOutOfRange {
                label: l as usize,
                classes: CLASSES,
            });
        }
        Ok(Self {
            images,
            labels,
            ids: (0..s.n).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
        }
    }

    /// Concatenates batches in order.
    pub fn concat(parts: Vec<Self>) -> Result<Self> {
        let n = parts.iter().map(Self::len).sum();
        let mut data = Vec::with_capacity(n * PIXELS);
        let mut labels = Vec::with_capacity(n);
        for p in parts {
            labels.extend(p.labels);
            data.extend(p.images.into_vec());
        }
        Self::new(Tensor4::from_vec(Shape4::new(n, INPUT_CHANNELS, INPUT_SIZE, INPUT_SIZE), data)?, labels)
    }

    pub fn class_histogram(&self) -> [usize; CLASSES] {
        let mut h = [0; CLASSES];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }
}

/// Decodes a buffer of whole CIFAR-10 records.
pub fn decode_records<T: Scalar>(bytes: &[u8]) -> Result<LabeledBatch<T>> {
    if !bytes.len().is_multiple_of(RECORD_BYTES) {
        return Err(Error::Data(format!(
            "{} bytes is not a whole number of {RECORD_BYTES}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / RECORD_BYTES;
    let scale = T::lit(1.0 / 255.0);
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * PIXELS);
    for rec in bytes.chunks_exact(RECORD_BYTES) {
        if rec[0] as usize >= CLASSES {
            return Err(Error::LabelOutOfRange {
                label: rec[0] as usize,
                classes: CLASSES,
            });
        }
        labels.push(rec[0]);
        data.extend(rec[1..].iter().map(|&b| T::lit(b as f64) * scale));
    }
    LabeledBatch::new(Tensor4::from_vec(Shape4::new(n, INPUT_CHANNELS, INPUT_SIZE, INPUT_SIZE), data)?, labels)
}

/// Inverse of [`decode_records`]; pixels are rounded to the nearest byte.
pub fn encode_records<T: Scalar>(batch: &LabeledBatch<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(batch.len() * RECORD_BYTES);
    for (i, &l) in batch.labels.iter().enumerate() {
        out.push(l);
        out.extend(
            batch
                .images
                .sample(i)
                .iter()
                .map(|v| (v.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8),
        );
    }
    out
}

pub fn read_batch_file<T: Scalar>(path: &Path) -> Result<LabeledBatch<T>> {
    let bytes = fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    decode_records(&bytes).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Reads the five training files and the test file from `dir`.
pub fn load_cifar10<T: Scalar>(dir: &Path) -> Result<(LabeledBatch<T>, LabeledBatch<T>)> {
    for f in TRAIN_FILES.iter().chain([&TEST_FILE]) {
        if !dir.join(f).is_file() {
            return Err(Error::Data(format!("missing {}", dir.join(f).display())));
        }
    }
    let parts = TRAIN_FILES
        .iter()
        .map(|f| read_batch_file(&dir.join(f)))
        .collect::<Result<Vec<_>>>()?;
    let train = LabeledBatch::concat(parts)?;
    let test = read_batch_file(&dir.join(TEST_FILE))?;
    Ok((train, test))
}

/// Per-class appearance used by [`synthetic`]: a base colour plus a stripe
/// pattern with its own orientation and period.
struct ClassTemplate {
    color: [f64; 3],
    vertical: bool,
    period: f64,
}

fn templates() -> Vec<ClassTemplate> {
    // fixed stream so every seed draws from the same ten classes
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_c1a5);
    (0..CLASSES)
        .map(|k| ClassTemplate {
            color: [rng.gen_range(0.35..0.65), rng.gen_range(0.35..0.65), rng.gen_range(0.35..0.65)],
            vertical: k % 2 == 0,
            period: 3.0 + (k / 2) as f64 * 1.5,
        })
        .collect()
}

/// A seeded, learnable ten-class set with CIFAR geometry, for running without
/// the real dataset. Labels cycle through the classes so every class is
/// equally represented.
pub fn synthetic<T: Scalar>(n: usize, seed: u64) -> Result<LabeledBatch<T>> {
    let classes = templates();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * PIXELS);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % CLASSES;
        let t = &classes[k];
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let jitter: [f64; 3] = [rng.gen_range(-0.25..0.25), rng.gen_range(-0.25..0.25), rng.gen_range(-0.25..0.25)];
        for (ch, (&base, &dj)) in t.color.iter().zip(&jitter).enumerate() {
            let sign = if ch == 1 { -1.0 } else { 1.0 };
            for r in 0..INPUT_SIZE {
                for c in 0..INPUT_SIZE {
                    let pos = if t.vertical { c } else { r } as f64;
                    let stripe = (pos * std::f64::consts::TAU / t.period + phase).sin();
                    let noise = rng.gen_range(-0.3..0.3);
                    data.push(T::lit((base + dj + sign * 0.1 * stripe + noise).clamp(0.0, 1.0)));
                }
            }
        }
        labels.push(k as u8);
    }
    LabeledBatch::new(Tensor4::from_vec(Shape4::new(n, INPUT_CHANNELS, INPUT_SIZE, INPUT_SIZE), data)?, labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fill {
    /// Replicate the nearest edge row or column.
    Nearest,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub max_shift: usize,
    pub fill: Fill,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            max_shift: (0.2 * INPUT_SIZE as f64).round() as usize,
            fill: Fill::Nearest,
        }
    }
}

impl AugmentConfig {
    /// No flips and no shifts.
    pub fn off() -> Self {
        Self {
            flip_prob: 0.0,
            max_shift: 0,
            fill: Fill::Nearest,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip probability {} outside [0, 1]", self.flip_prob)));
        }
        if self.max_shift >= INPUT_SIZE {
            return Err(Error::Config(format!("shift {} must be below {INPUT_SIZE}", self.max_shift)));
        }
        Ok(())
    }
}

/// Mirrors every plane of one image left to right, in place.
pub fn flip_horizontal<T: Scalar>(image: &mut [T], w: usize) {
    for row in image.chunks_exact_mut(w) {
        row.reverse();
    }
}

/// Shifts every `h × w` plane of `image` by `dx` columns right and `dy` rows
/// down: `out[r][c] = in[r - dy][c - dx]`, vacated pixels per `fill`.
pub fn shift<T: Scalar>(image: &[T], h: usize, w: usize, dx: isize, dy: isize, fill: Fill) -> Vec<T> {
    let mut out = Vec::with_capacity(image.len());
    for plane in image.chunks_exact(h * w) {
        for r in 0..h as isize {
            for c in 0..w as isize {
                let (sr, sc) = (r - dy, c - dx);
                let inside = (0..h as isize).contains(&sr) && (0..w as isize).contains(&sc);
                out.push(match (inside, fill) {
                    (true, _) | (false, Fill::Nearest) => {
                        plane[sr.clamp(0, h as isize - 1) as usize * w + sc.clamp(0, w as isize - 1) as usize]
                    }
                    (false, Fill::Zero) => T::zero(),
                });
            }
        }
    }
    out
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream for the image with dataset position `id` in `epoch`.
fn image_rng(seed: u64, epoch: usize, id: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed ^ mix(epoch as u64 ^ mix(id as u64))))
}

/// Random flip and shift per image. Draws depend only on
/// `(seed, epoch, id)`, so batch composition and order do not matter.
pub fn augment<T: Scalar>(batch: &LabeledBatch<T>, cfg: &AugmentConfig, seed: u64, epoch: usize) -> LabeledBatch<T> {
    let s = batch.images.shape();
    let mut out = batch.clone();
    let m = cfg.max_shift as isize;
    for (i, &id) in batch.ids.iter().enumerate() {
        let mut rng = image_rng(seed, epoch, id);
        let flip = rng.gen_bool(cfg.flip_prob);
        let dx = rng.gen_range(-m..=m);
        let dy = rng.gen_range(-m..=m);
        let img = out.images.sample_mut(i);
        if flip {
            flip_horizontal(img, s.w);
        }
        if dx != 0 || dy != 0 {
            let moved = shift(img, s.h, s.w, dx, dy, cfg.fill);
            img.copy_from_slice(&moved);
        }
    }
    out
}

/// Sample order for one epoch: a shuffle seeded by `seed ^ epoch`.
pub fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ epoch as u64));
    order
}

/// Batches of one shuffled epoch; the last batch keeps the remainder.
pub fn batch_iter<'a, T: Scalar>(
    data: &'a LabeledBatch<T>,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> impl Iterator<Item = LabeledBatch<T>> + 'a {
    let order = epoch_order(data.len(), seed, epoch);
    let size = batch_size.max(1);
    (0..order.len().div_ceil(size)).map(move |b| data.select(&order[b * size..((b + 1) * size).min(order.len())]))
}

/// Batches in dataset order, for evaluation.
pub fn sequential_batches<T: Scalar>(data: &LabeledBatch<T>, batch_size: usize) -> impl Iterator<Item = LabeledBatch<T>> + '_ {
    let size = batch_size.max(1);
    (0..data.len().div_ceil(size)).map(move |b| {
        let idx: Vec<usize> = (b * size..((b + 1) * size).min(data.len())).collect();
        data.select(&idx)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probe() -> Vec<f64> {
        (0..16).map(f64::from).collect()
    }

    #[test]
    fn record_arithmetic() {
        assert_eq!(RECORD_BYTES, 3073);
        assert_eq!(10_000 * RECORD_BYTES, 30_730_000);
    }

    #[test]
    fn decode_scaling() {
        let mut bytes = vec![0u8; 2 * RECORD_BYTES];
        bytes[0] = 9;
        bytes[RECORD_BYTES] = 4;
        bytes[RECORD_BYTES + 1..].fill(255);
        let b: LabeledBatch<f32> = decode_records(&bytes).unwrap();
        assert_eq!(b.labels, vec![9, 4]);
        assert!(b.images.sample(0).iter().all(|&v| v == 0.0));
        assert!(b.images.sample(1).iter().all(|&v| v == 1.0));
        assert_eq!(encode_records(&b), bytes);
    }

    #[test]
    fn decode_errors() {
        assert!(matches!(decode_records::<f32>(&[0u8; 3072]), Err(Error::Data(_))));
        let mut bytes = vec![0u8; RECORD_BYTES];
        bytes[0] = 10;
        assert!(matches!(decode_records::<f32>(&bytes), Err(Error::LabelOutOfRange { label: 10, .. })));
    }

    #[test]
    fn shift_right_with_zero_fill() {
        let out = shift(&probe(), 4, 4, 2, 0, Fill::Zero);
        assert_eq!(out, vec![0., 0., 0., 1., 0., 0., 4., 5., 0., 0., 8., 9., 0., 0., 12., 13.]);
        let full: Vec<f64> = (0..32 * 32).map(f64::from).collect();
        let out = shift(&full, 32, 32, 6, 0, Fill::Zero);
        for r in 0..32 {
            for c in 0..32 {
                let want = if c < 6 { 0.0 } else { full[r * 32 + c - 6] };
                assert_eq!(out[r * 32 + c], want);
            }
        }
    }

    #[test]
    fn shift_nearest_replicates_edges() {
        let out = shift(&probe(), 4, 4, -1, 1, Fill::Nearest);
        assert_eq!(out, vec![1., 2., 3., 3., 1., 2., 3., 3., 5., 6., 7., 7., 9., 10., 11., 11.]);
        assert_eq!(shift(&probe(), 4, 4, 0, 0, Fill::Zero), probe());
    }

    #[test]
    fn flip_is_an_involution() {
        let mut img = probe();
        flip_horizontal(&mut img, 4);
        assert_eq!(&img[..4], &[3., 2., 1., 0.]);
        flip_horizontal(&mut img, 4);
        assert_eq!(img, probe());
    }

    #[test]
    fn default_shift_is_a_fifth_of_the_side() {
        assert_eq!(AugmentConfig::default().max_shift, 6);
        assert!(AugmentConfig { flip_prob: 1.5, ..AugmentConfig::default() }.validate().is_err());
        assert!(AugmentConfig { max_shift: 32, ..AugmentConfig::default() }.validate().is_err());
    }

    #[test]
    fn batching_partitions_the_epoch() {
        let data: LabeledBatch<f32> = synthetic(50, 1).unwrap();
        let batches: Vec<_> = batch_iter(&data, 16, 3, 0).collect();
        assert_eq!(batches.iter().map(LabeledBatch::len).collect::<Vec<_>>(), vec![16, 16, 16, 2]);
        let mut ids: Vec<usize> = batches.iter().flat_map(|b| b.ids.clone()).collect();
        ids.sort();
        assert_eq!(ids, (0..50).collect::<Vec<_>>());
        let again: Vec<_> = batch_iter(&data, 16, 3, 0).collect();
        assert_eq!(batches, again);
        let next: Vec<usize> = batch_iter(&data, 16, 3, 1).flat_map(|b| b.ids).collect();
        assert_ne!(next, batches.iter().flat_map(|b| b.ids.clone()).collect::<Vec<_>>());
    }

    #[test]
    fn full_split_batch_count() {
        let order = epoch_order(50_000, 0, 0);
        let sizes: Vec<usize> = order.chunks(128).map(<[usize]>::len).collect();
        assert_eq!(sizes.len(), 391);
        assert_eq!(*sizes.last().unwrap(), 80);
    }

    #[test]
    fn augmentation_ignores_batch_composition() {
        let data: LabeledBatch<f32> = synthetic(20, 2).unwrap();
        let cfg = AugmentConfig::default();
        let whole = augment(&data, &cfg, 9, 4);
        let part = augment(&data.select(&[7, 3]), &cfg, 9, 4);
        assert_eq!(part.images.sample(0), whole.images.sample(7));
        assert_eq!(part.images.sample(1), whole.images.sample(3));
        assert_eq!(augment(&data, &AugmentConfig::off(), 9, 4), data);
    }

    #[test]
    fn synthetic_is_seeded_and_balanced() {
        let a: LabeledBatch<f32> = synthetic(100, 5).unwrap();
        assert_eq!(a, synthetic(100, 5).unwrap());
        assert_ne!(a, synthetic(100, 6).unwrap());
        assert_eq!(a.class_histogram(), [10; CLASSES]);
        assert!(a.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
