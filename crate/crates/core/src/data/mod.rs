//! Datasets and two-view augmentation.
//!
//! Byte-backed sources (CIFAR-10, STL-10, synthetic shapes) keep raw `u8`
//! pixels and expose them scaled to `[0, 1]`; standardization with the
//! per-channel [`Normalization`] happens after augmentation.

mod augment;
mod formats;
mod synth;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{stream_rng, Scalar, Tensor};

pub use augment::{make_views, AugmentationPolicy};
pub use formats::{
    load_cifar10, load_stl10, parse_cifar_records, read_cifar_file, write_cifar_records, write_stl_images, CifarSplit,
    StlSplit, CIFAR_RECORD_BYTES, STL_SIZE,
};
pub use synth::{synth_gaussian, synth_shapes, ShapeLabels, MAX_SHAPE_CLASSES, SHAPE_PRIMITIVES};

#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    Single { classes: usize, values: Vec<usize> },
    /// Row-major `[N, attributes]` bits.
    Multi { attributes: usize, values: Vec<u8> },
    Unlabeled,
}

impl Labels {
    /// Number of logits a classifier head needs.
    pub fn outputs(&self) -> Option<usize> {
        match self {
            Labels::Single { classes, .. } => Some(*classes),
            Labels::Multi { attributes, .. } => Some(*attributes),
            Labels::Unlabeled => None,
        }
    }

    fn subset(&self, indices: &[usize]) -> Labels {
        match self {
            Labels::Single { classes, values } => Labels::Single {
                classes: *classes,
                values: indices.iter().map(|&i| values[i]).collect(),
            },
            Labels::Multi { attributes, values } => Labels::Multi {
                attributes: *attributes,
                values: indices
                    .iter()
                    .flat_map(|&i| values[i * attributes..(i + 1) * attributes].iter().copied())
                    .collect(),
            },
            Labels::Unlabeled => Labels::Unlabeled,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Pixels {
    Bytes(Vec<u8>),
    Float(Vec<f32>),
}

/// Per-channel standardization `(x - mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Normalization {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Standardizes a `[C, H, W]` image in place.
    pub fn apply(&self, image: &mut [f32]) {
        let plane = image.len() / self.channels();
        for (c, chunk) in image.chunks_mut(plane).enumerate() {
            let (m, s) = (self.mean[c], self.std[c]);
            chunk.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
    }

    /// Range a `[0, 1]` pixel maps to in channel `c`.
    pub fn range(&self, c: usize) -> (f32, f32) {
        (-self.mean[c] / self.std[c], (1.0 - self.mean[c]) / self.std[c])
    }
}

#[derive(Clone, Debug)]
pub struct DatasetSource {
    name: String,
    item_shape: [usize; 3],
    pixels: Pixels,
    labels: Labels,
    normalization: Normalization,
}

impl DatasetSource {
    pub(crate) fn from_parts(
        name: impl Into<String>,
        item_shape: [usize; 3],
        pixels: Pixels,
        labels: Labels,
        normalization: Option<Normalization>,
    ) -> Result<Self> {
        let item: usize = item_shape.iter().product();
        if item == 0 {
            return Err(Error::InvalidShape(item_shape.to_vec()));
        }
        let total = match &pixels {
            Pixels::Bytes(b) => b.len(),
            Pixels::Float(f) => f.len(),
        };
        if total % item != 0 {
            return Err(Error::Length {
                expected: total / item * item,
                actual: total,
            });
        }
        let n = total / item;
        let label_len = match &labels {
            Labels::Single { values, classes } => {
                if let Some(&bad) = values.iter().find(|&&v| v >= *classes) {
                    return Err(Error::Label(format!("class {bad} out of range for {classes} classes")));
                }
                Some(values.len())
            }
            Labels::Multi { attributes, values } => {
                if values.iter().any(|&v| v > 1) {
                    return Err(Error::Label("attribute targets must be 0 or 1".into()));
                }
                Some(values.len() / attributes.max(&1))
            }
            Labels::Unlabeled => None,
        };
        if let Some(len) = label_len {
            if len != n {
                return Err(Error::Length { expected: n, actual: len });
            }
        }
        let mut source = DatasetSource {
            name: name.into(),
            item_shape,
            pixels,
            labels,
            normalization: Normalization::identity(item_shape[0]),
        };
        source.normalization = match normalization {
            Some(norm) => {
                if norm.channels() != item_shape[0] || norm.std.iter().any(|&s| s <= 0.0) {
                    return Err(Error::Config(format!(
                        "normalization needs {} channels with positive std",
                        item_shape[0]
                    )));
                }
                norm
            }
            None => source.channel_stats(),
        };
        Ok(source)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        let item: usize = self.item_shape.iter().product();
        match &self.pixels {
            Pixels::Bytes(b) => b.len() / item,
            Pixels::Float(f) => f.len() / item,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn item_shape(&self) -> [usize; 3] {
        self.item_shape
    }

    pub fn item_len(&self) -> usize {
        self.item_shape.iter().product()
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    pub fn set_normalization(&mut self, norm: Normalization) -> Result<()> {
        if norm.channels() != self.item_shape[0] {
            return Err(Error::Config(format!(
                "normalization has {} channels, images have {}",
                norm.channels(),
                self.item_shape[0]
            )));
        }
        self.normalization = norm;
        Ok(())
    }

    pub fn is_labeled(&self) -> bool {
        !matches!(self.labels, Labels::Unlabeled)
    }

    pub fn labels(&self) -> Result<&Labels> {
        match self.labels {
            Labels::Unlabeled => Err(Error::UnlabeledSplit),
            ref l => Ok(l),
        }
    }

    pub(crate) fn raw_bytes(&self) -> Option<&[u8]> {
        match &self.pixels {
            Pixels::Bytes(b) => Some(b),
            Pixels::Float(_) => None,
        }
    }

    /// Unnormalized image `i` as `[C, H, W]`; byte sources are scaled to `[0, 1]`.
    pub fn raw_image(&self, i: usize) -> Vec<f32> {
        let n = self.item_len();
        match &self.pixels {
            Pixels::Bytes(b) => b[i * n..(i + 1) * n].iter().map(|&v| f32::from(v) / 255.0).collect(),
            Pixels::Float(f) => f[i * n..(i + 1) * n].to_vec(),
        }
    }

    /// Standardized image `i`.
    pub fn image(&self, i: usize) -> Vec<f32> {
        let mut img = self.raw_image(i);
        self.normalization.apply(&mut img);
        img
    }

    /// Two standardized augmented views of image `i`.
    pub fn views(&self, i: usize, policy: &AugmentationPolicy) -> Result<(Vec<f32>, Vec<f32>)> {
        let (mut a, mut b) = make_views(&self.raw_image(i), policy, i as u64)?;
        self.normalization.apply(&mut a);
        self.normalization.apply(&mut b);
        Ok((a, b))
    }

    /// One standardized augmented view (view index 0) of image `i`.
    pub fn augmented(&self, i: usize, policy: &AugmentationPolicy) -> Result<Vec<f32>> {
        let mut a = augment::augment(&self.raw_image(i), policy, i as u64, 0)?;
        self.normalization.apply(&mut a);
        Ok(a)
    }

    fn batch_shape(&self, n: usize) -> Vec<usize> {
        let [c, h, w] = self.item_shape;
        vec![n, c, h, w]
    }

    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let data: Vec<T> = indices
            .par_iter()
            .flat_map_iter(|&i| self.image(i).into_iter().map(|v| T::lit(f64::from(v))))
            .collect();
        Tensor::new(&self.batch_shape(indices.len()), data)
    }

    pub fn augmented_batch<T: Scalar>(&self, indices: &[usize], policy: &AugmentationPolicy) -> Result<Tensor<T>> {
        let images = indices
            .par_iter()
            .map(|&i| self.augmented(i, policy))
            .collect::<Result<Vec<_>>>()?;
        let data = images.into_iter().flatten().map(|v| T::lit(f64::from(v))).collect();
        Tensor::new(&self.batch_shape(indices.len()), data)
    }

    /// Both views for a batch; item order is fixed regardless of thread count.
    pub fn view_batch<T: Scalar>(
        &self,
        indices: &[usize],
        policy: &AugmentationPolicy,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let pairs = indices
            .par_iter()
            .map(|&i| self.views(i, policy))
            .collect::<Result<Vec<_>>>()?;
        let item = self.item_len();
        let mut a = Vec::with_capacity(indices.len() * item);
        let mut b = Vec::with_capacity(indices.len() * item);
        for (x1, x2) in pairs {
            a.extend(x1.into_iter().map(|v| T::lit(f64::from(v))));
            b.extend(x2.into_iter().map(|v| T::lit(f64::from(v))));
        }
        let shape = self.batch_shape(indices.len());
        Ok((Tensor::new(&shape, a)?, Tensor::new(&shape, b)?))
    }

    /// Reproducible permutation of `0..len` for one epoch.
    pub fn shuffled_order(&self, seed: u64, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut stream_rng(seed, epoch));
        order
    }

    pub fn subset(&self, indices: &[usize]) -> Result<DatasetSource> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Length {
                expected: self.len(),
                actual: bad + 1,
            });
        }
        let n = self.item_len();
        let pixels = match &self.pixels {
            Pixels::Bytes(b) => Pixels::Bytes(indices.iter().flat_map(|&i| b[i * n..(i + 1) * n].iter().copied()).collect()),
            Pixels::Float(f) => Pixels::Float(indices.iter().flat_map(|&i| f[i * n..(i + 1) * n].iter().copied()).collect()),
        };
        Ok(DatasetSource {
            name: self.name.clone(),
            item_shape: self.item_shape,
            pixels,
            labels: self.labels.subset(indices),
            normalization: self.normalization.clone(),
        })
    }

    /// Seeded split into `(train, held_out)` with `round(len * fraction)` held out.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(DatasetSource, DatasetSource)> {
        let n = self.len();
        let held = ((n as f64) * fraction).round() as usize;
        if !(0.0..1.0).contains(&fraction) || held == 0 || held >= n {
            return Err(Error::Config(format!("cannot hold out fraction {fraction} of {n} items")));
        }
        let order = self.shuffled_order(seed, u64::MAX);
        let (held_idx, train_idx) = order.split_at(held);
        let mut train_idx = train_idx.to_vec();
        let mut held_idx = held_idx.to_vec();
        train_idx.sort_unstable();
        held_idx.sort_unstable();
        Ok((self.subset(&train_idx)?, self.subset(&held_idx)?))
    }

    /// Per-channel mean and (population) std of the unnormalized pixels.
    pub fn channel_stats(&self) -> Normalization {
        let [c, h, w] = self.item_shape;
        let plane = h * w;
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for i in 0..self.len() {
            let img = self.raw_image(i);
            for (ch, chunk) in img.chunks(plane).enumerate() {
                for &v in chunk {
                    sum[ch] += f64::from(v);
                    sq[ch] += f64::from(v) * f64::from(v);
                }
            }
        }
        let count = (self.len() * plane) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / count - m * m).max(0.0).sqrt())
            .map(|s| if s < 1e-6 { 1.0 } else { s });
        Normalization {
            mean: mean.iter().map(|&m| m as f32).collect(),
            std: std.map(|s| s as f32).collect(),
        }
    }
}

/// Index batches over an order; with `drop_last` the trailing partial batch is skipped.
pub fn batches(order: &[usize], batch_size: usize, drop_last: bool) -> impl Iterator<Item = &[usize]> {
    order
        .chunks(batch_size.max(1))
        .filter(move |c| !drop_last || c.len() == batch_size)
}
