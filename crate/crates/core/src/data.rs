//! Dataset ingestion and batching: binary image records (CIFAR-style layout),
//! synthetic Gaussian-blob classification data, deterministic shuffled
//! batches, and the usual flip/pad-crop augmentations.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Immutable dataset: images (or feature vectors) plus integer labels.
#[derive(Clone, Debug)]
pub struct Dataset {
    /// `[N,C,H,W]` pixels in `[0,1]`, or `[N,D]` for vector tasks.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample feature count (product of non-batch dims).
    pub fn sample_numel(&self) -> usize {
        self.images.numel() / self.len().max(1)
    }

    fn sample_shape(&self) -> Vec<usize> {
        self.images.shape()[1..].to_vec()
    }

    /// Gather samples by index into a new (images, labels) pair.
    pub fn gather(&self, idxs: &[usize]) -> (Tensor, Vec<usize>) {
        let stride = self.sample_numel();
        let mut data = Vec::with_capacity(idxs.len() * stride);
        let mut labels = Vec::with_capacity(idxs.len());
        for &i in idxs {
            data.extend_from_slice(&self.images.data()[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![idxs.len()];
        shape.extend(self.sample_shape());
        (Tensor::new(shape, data).unwrap(), labels)
    }
}

/// Layout of one record in a binary image file: one label byte followed by
/// channel-planar pixel bytes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordLayout {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl RecordLayout {
    pub fn cifar10() -> Self {
        RecordLayout { channels: 3, height: 32, width: 32 }
    }

    fn record_bytes(&self) -> usize {
        1 + self.channels * self.height * self.width
    }
}

/// Parse a binary record file (label byte + pixel bytes per record) into a
/// dataset, scaling pixels by 1/255.
pub fn load_binary_records(
    path: &Path,
    layout: RecordLayout,
    class_count: usize,
) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    parse_binary_records(&bytes, layout, class_count)
}

pub(crate) fn parse_binary_records(
    bytes: &[u8],
    layout: RecordLayout,
    class_count: usize,
) -> Result<Dataset> {
    let rec = layout.record_bytes();
    if bytes.is_empty() || bytes.len() % rec != 0 {
        return Err(Error::InvalidArgument(format!(
            "file size {} bytes is not a positive multiple of the record size {rec} bytes",
            bytes.len()
        )));
    }
    let n = bytes.len() / rec;
    let pixels = rec - 1;
    let mut data = Vec::with_capacity(n * pixels);
    let mut labels = Vec::with_capacity(n);
    for r in 0..n {
        let label = bytes[r * rec] as usize;
        if label >= class_count {
            return Err(Error::InvalidArgument(format!(
                "record {r}: label byte {label} >= class count {class_count}"
            )));
        }
        labels.push(label);
        for &b in &bytes[r * rec + 1..(r + 1) * rec] {
            data.push(b as f64 / 255.0);
        }
    }
    let images =
        Tensor::new(vec![n, layout.channels, layout.height, layout.width], data)?;
    Ok(Dataset { images, labels, class_count })
}

/// Synthetic classification task: classes are isotropic Gaussians (std =
/// `spread`) centered on a radius-3 circle. Deterministic in `seed`.
pub fn synth_blobs(
    n_per_class: usize,
    classes: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_per_class == 0 || classes == 0 || dim == 0 || !(spread > 0.0) {
        return Err(Error::InvalidArgument(
            "synth_blobs requires positive n_per_class, classes, dim, spread".into(),
        ));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, spread)
        .map_err(|e| Error::InvalidArgument(format!("bad spread: {e}")))?;
    let n = n_per_class * classes;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for c in 0..classes {
        let theta = 2.0 * std::f64::consts::PI * c as f64 / classes as f64;
        let mut center = vec![0.0; dim];
        center[0] = 3.0 * theta.cos();
        if dim > 1 {
            center[1] = 3.0 * theta.sin();
        }
        for _ in 0..n_per_class {
            for &c_d in &center {
                data.push(c_d + normal.sample(&mut rng));
            }
            labels.push(c);
        }
    }
    Ok(Dataset { images: Tensor::new(vec![n, dim], data)?, labels, class_count: classes })
}

/// Split a dataset into shuffled mini-batches. The permutation comes from a
/// counter-based generator (ChaCha12 keyed by `shuffle_seed`, stream =
/// `epoch`) so every (seed, epoch) pair reproduces the same order; the last
/// partial batch is kept.
pub fn batches(
    ds: &Dataset,
    batch_size: usize,
    shuffle_seed: Option<u64>,
    epoch: usize,
) -> Vec<(Tensor, Vec<usize>)> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..ds.len()).collect();
    if let Some(seed) = shuffle_seed {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64);
        // Fisher-Yates
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
    }
    order.chunks(batch_size).map(|chunk| ds.gather(chunk)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentPolicy {
    None,
    /// Horizontal flip with probability 1/2 per sample.
    FlipLr,
    /// Zero-pad by 4 on each side, then crop back at a random offset.
    PadCrop,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy::None
    }
}

const PAD: usize = 4;

/// Label-preserving augmentation of an image batch; deterministic under the
/// supplied rng state. Vector batches only admit `None`.
pub fn augment(images: &Tensor, policy: AugmentPolicy, rng: &mut ChaCha12Rng) -> Result<Tensor> {
    if policy == AugmentPolicy::None {
        return Ok(images.detached());
    }
    let (n, c, h, w) = match images.shape() {
        [n, c, h, w] => (*n, *c, *h, *w),
        other => {
            return Err(Error::InvalidArgument(format!(
                "augmentation requires an image batch [N,C,H,W], got shape {other:?}"
            )))
        }
    };
    let mut out = images.data().to_vec();
    match policy {
        AugmentPolicy::None => unreachable!(),
        AugmentPolicy::FlipLr => {
            for ni in 0..n {
                if !rng.gen_bool(0.5) {
                    continue;
                }
                for ci in 0..c {
                    let plane = (ni * c + ci) * h * w;
                    for y in 0..h {
                        out[plane + y * w..plane + (y + 1) * w].reverse();
                    }
                }
            }
        }
        AugmentPolicy::PadCrop => {
            for ni in 0..n {
                let dy = rng.gen_range(0..=2 * PAD);
                let dx = rng.gen_range(0..=2 * PAD);
                for ci in 0..c {
                    let plane = (ni * c + ci) * h * w;
                    let src: Vec<f64> = out[plane..plane + h * w].to_vec();
                    for y in 0..h {
                        for x in 0..w {
                            // Source position in the padded canvas.
                            let sy = y as isize + dy as isize - PAD as isize;
                            let sx = x as isize + dx as isize - PAD as isize;
                            out[plane + y * w + x] =
                                if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                    src[sy as usize * w + sx as usize]
                                } else {
                                    0.0
                                };
                        }
                    }
                }
            }
        }
    }
    Tensor::new(images.shape().to_vec(), out)
}
