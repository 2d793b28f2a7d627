//! Labeled grayscale image sets: IDX files, synthetic shapes, stratified subsets.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{IbitError, Result};
use crate::linalg::Matrix;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Classes produced by [`synth_shapes`], in label order.
pub const SYNTH_CLASSES: [&str; 4] = ["filled_square", "hollow_square", "cross", "disk"];

/// Seed of the reference synthetic dataset.
pub const SYNTH_SEED: u64 = 42;
/// Share of a synthetic set held out for testing by [`synth_train_test`].
pub const SYNTH_TEST_FRACTION: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImageSet {
    images: Vec<Matrix>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledImageSet {
    pub fn new(images: Vec<Matrix>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(IbitError::InvalidArgument(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(IbitError::InvalidArgument(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if let Some(first) = images.first() {
            let shape = first.shape();
            for (i, img) in images.iter().enumerate() {
                if img.shape() != shape {
                    return Err(IbitError::dim("image set", img.shape(), shape));
                }
                if img.as_slice().iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(IbitError::InvalidArgument(format!("image {i} has pixels outside [0, 1]")));
                }
            }
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &[Matrix] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// `(height, width)` of every image, `None` when empty.
    pub fn image_shape(&self) -> Option<(usize, usize)> {
        self.images.first().map(Matrix::shape)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Items at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// First `n` items and the rest.
    pub fn split_at(&self, n: usize) -> (Self, Self) {
        let n = n.min(self.len());
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        (self.select(&head), self.select(&tail))
    }
}

fn format_err(offset: usize, reason: impl Into<String>) -> IbitError {
    IbitError::Format {
        offset: offset as u64,
        reason: reason.into(),
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| format_err(bytes.len(), "truncated header"))
}

/// Parses an IDX image file (`0x00000803`, count, rows, cols, bytes).
pub fn parse_idx_images(bytes: &[u8]) -> Result<Vec<Matrix>> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(format_err(0, format!("bad image magic {magic:#010x}")));
    }
    let n = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let pixels = rows * cols;
    let expected = 16 + n * pixels;
    if bytes.len() < expected {
        return Err(format_err(bytes.len(), format!("truncated image data, expected {expected} bytes")));
    }
    if bytes.len() > expected {
        return Err(format_err(expected, "trailing bytes after image data"));
    }
    Ok(bytes[16..]
        .chunks_exact(pixels.max(1))
        .take(n)
        .map(|chunk| Matrix::from_vec(rows, cols, chunk.iter().map(|&b| f64::from(b) / 255.0).collect()))
        .collect())
}

/// Parses an IDX label file (`0x00000801`, count, bytes).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(format_err(0, format!("bad label magic {magic:#010x}")));
    }
    let n = read_u32(bytes, 4)? as usize;
    let expected = 8 + n;
    if bytes.len() < expected {
        return Err(format_err(bytes.len(), format!("truncated label data, expected {expected} bytes")));
    }
    if bytes.len() > expected {
        return Err(format_err(expected, "trailing bytes after label data"));
    }
    Ok(bytes[8..].iter().map(|&b| usize::from(b)).collect())
}

/// Loads an image/label IDX pair. The class count is `max(label) + 1`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledImageSet> {
    let image_bytes = fs::read(images_path).map_err(|e| IbitError::io(images_path, e))?;
    let label_bytes = fs::read(labels_path).map_err(|e| IbitError::io(labels_path, e))?;
    let images = parse_idx_images(&image_bytes)?;
    let labels = parse_idx_labels(&label_bytes)?;
    if images.len() != labels.len() {
        return Err(format_err(
            4,
            format!("{} images but {} labels", images.len(), labels.len()),
        ));
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    LabeledImageSet::new(images, labels, num_classes)
}

fn to_byte(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn encode_idx_images(images: &[Matrix]) -> Result<Vec<u8>> {
    let (rows, cols) = images.first().map_or((0, 0), Matrix::shape);
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for dim in [images.len(), rows, cols] {
        let dim = u32::try_from(dim).map_err(|_| IbitError::InvalidArgument("dimension exceeds u32".into()))?;
        out.extend_from_slice(&dim.to_be_bytes());
    }
    for img in images {
        if img.shape() != (rows, cols) {
            return Err(IbitError::dim("idx images", img.shape(), (rows, cols)));
        }
        out.extend(img.as_slice().iter().map(|&v| to_byte(v)));
    }
    Ok(out)
}

pub fn encode_idx_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    let n = u32::try_from(labels.len()).map_err(|_| IbitError::InvalidArgument("too many labels".into()))?;
    out.extend_from_slice(&n.to_be_bytes());
    for &l in labels {
        out.push(u8::try_from(l).map_err(|_| IbitError::InvalidArgument(format!("label {l} exceeds 255")))?);
    }
    Ok(out)
}

/// Writes `set` as an IDX pair. Pixels are rounded to the nearest multiple of 1/255.
pub fn write_idx(set: &LabeledImageSet, images_path: &Path, labels_path: &Path) -> Result<()> {
    fs::write(images_path, encode_idx_images(set.images())?).map_err(|e| IbitError::io(images_path, e))?;
    fs::write(labels_path, encode_idx_labels(set.labels())?).map_err(|e| IbitError::io(labels_path, e))
}

fn draw_shape(class: usize, size: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let s = size as f64;
    let r = rng.random_range(s / 4.0..=0.3 * s);
    let lo = r + 0.5;
    let hi = (s - 1.5 - r).max(lo);
    let cy = rng.random_range(lo..=hi);
    let cx = rng.random_range(lo..=hi);
    let intensity = rng.random_range(0.9..=1.0);
    let stroke = (r / 3.0).max(1.0);
    Matrix::from_fn(size, size, |i, j| {
        let dy = i as f64 - cy;
        let dx = j as f64 - cx;
        let inside = match class {
            0 => dy.abs() <= r && dx.abs() <= r,
            1 => dy.abs().max(dx.abs()) <= r && dy.abs().max(dx.abs()) > r - stroke,
            2 => (dy.abs() <= stroke / 2.0 && dx.abs() <= r) || (dx.abs() <= stroke / 2.0 && dy.abs() <= r),
            _ => dy * dy + dx * dx <= r * r,
        };
        if inside {
            intensity
        } else {
            0.0
        }
    })
}

/// Deterministic four-class shapes (see [`SYNTH_CLASSES`]) with Gaussian noise.
///
/// Labels cycle `0, 1, 2, 3, ...`, so classes are exactly balanced when `n`
/// is a multiple of 4. Pixels are multiples of 1/255, which makes the set
/// survive an IDX round trip unchanged.
pub fn synth_shapes(n: usize, size: usize, seed: u64) -> Result<LabeledImageSet> {
    if n == 0 {
        return Err(IbitError::InvalidArgument("synth_shapes needs n >= 1".into()));
    }
    if size < 8 {
        return Err(IbitError::InvalidArgument(format!("image size {size} is below 8")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.05).expect("valid normal");
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % SYNTH_CLASSES.len();
        let clean = draw_shape(class, size, &mut rng);
        let noisy = clean.map(|v| f64::from(to_byte((v + noise.sample(&mut rng)).clamp(0.0, 1.0))) / 255.0);
        images.push(noisy);
        labels.push(class);
    }
    LabeledImageSet::new(images, labels, SYNTH_CLASSES.len())
}

/// [`synth_shapes`] split into leading training and trailing test items.
pub fn synth_train_test(n: usize, size: usize, seed: u64) -> Result<(LabeledImageSet, LabeledImageSet)> {
    let set = synth_shapes(n, size, seed)?;
    let test = ((n as f64 * SYNTH_TEST_FRACTION).round() as usize).min(n.saturating_sub(1));
    Ok(set.split_at(n - test))
}

/// Stratified deterministic subsample of `ceil(fraction * n)` items, in original order.
///
/// Within each class, items are shuffled by `seed`; the item at shuffled
/// position `k` of a class with `n_c` members gets priority `(k + 0.5) / n_c`.
/// The lowest priorities are kept, so every class contributes in proportion
/// and a smaller fraction always yields a subset of a larger one.
pub fn subset_fraction(set: &LabeledImageSet, fraction: f64, seed: u64) -> Result<LabeledImageSet> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(IbitError::InvalidArgument(format!("fraction {fraction} is outside (0, 1]")));
    }
    let n = set.len();
    let take = ((fraction * n as f64).ceil() as usize).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keyed: Vec<(f64, usize, usize, usize)> = Vec::with_capacity(n);
    for class in 0..set.num_classes() {
        let mut members: Vec<usize> = (0..n).filter(|&i| set.labels()[i] == class).collect();
        members.shuffle(&mut rng);
        let n_c = members.len() as f64;
        for (k, &idx) in members.iter().enumerate() {
            keyed.push(((k as f64 + 0.5) / n_c, class, k, idx));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut chosen: Vec<usize> = keyed[..take].iter().map(|k| k.3).collect();
    chosen.sort_unstable();
    Ok(set.select(&chosen))
}
