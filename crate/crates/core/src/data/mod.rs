//! Datasets, codecs and persistence.

pub mod checkpoint;
pub mod idx;
pub mod pnm;
pub mod synthetic;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use checkpoint::Checkpoint;
pub use synthetic::{gen_gaussians_2d, gen_moons, gen_shapes};

/// How raw sample values map to model input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Encoding {
    /// Already in model space (2-D toy points).
    Points,
    /// Raw intensities in `[0, 255]`, scaled to `[-1, 1]` on the way in.
    Pixels,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// `[n, ..sample_shape]`.
    pub samples: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub encoding: Encoding,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        samples: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
        encoding: Encoding,
    ) -> Result<Self> {
        if samples.rank() < 2 || samples.shape()[0] != labels.len() {
            return Err(Error::invalid(format!(
                "{} samples {:?} vs {} labels",
                samples.shape().first().copied().unwrap_or(0),
                samples.shape(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!(
                "label {bad} >= class count {num_classes}"
            )));
        }
        if encoding == Encoding::Pixels && samples.data().iter().any(|v| !(0.0..=255.0).contains(v))
        {
            return Err(Error::invalid("pixel values must lie in [0, 255]"));
        }
        Ok(Dataset {
            name: name.into(),
            samples,
            labels,
            num_classes,
            encoding,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.samples.shape()[1..]
    }

    pub fn sample_numel(&self) -> usize {
        self.sample_shape().iter().product()
    }

    pub fn raw(&self, i: usize) -> &[f64] {
        let n = self.sample_numel();
        &self.samples.data()[i * n..(i + 1) * n]
    }

    /// Raw rows at `indices`, stacked to `[len, ..sample_shape]`.
    pub fn gather_raw(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.sample_numel());
        for &i in indices {
            data.extend_from_slice(self.raw(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        Tensor::new(shape, data).expect("gathered shape")
    }

    /// Model-space rows at `indices` with preprocessing noise `noise_std`.
    pub fn batch<R: Rng + ?Sized>(
        &self,
        indices: &[usize],
        noise_std: f64,
        rng: &mut R,
    ) -> Result<Tensor> {
        let raw = self.gather_raw(indices);
        match self.encoding {
            Encoding::Points => Ok(raw),
            Encoding::Pixels => preprocess(&raw, noise_std, rng),
        }
    }

    /// Every sample in model space, without noise.
    pub fn model_inputs(&self) -> Result<Tensor> {
        let all: Vec<usize> = (0..self.len()).collect();
        self.batch(&all, 0.0, &mut crate::rng::stream(0, "unused"))
    }

    pub fn indices_of_class(&self, c: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == c).collect()
    }

    /// The subset at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            samples: self.gather_raw(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            encoding: self.encoding,
        }
    }

    /// A model-space "blank" input: all ones (white after pixel scaling).
    pub fn blank(&self) -> Tensor {
        Tensor::ones(self.sample_shape())
    }
}

/// Maps `[0, 255]` to `[-1, 1]`, adds `N(0, noise_std^2)`, clips to `[-1, 1]`.
pub fn preprocess<R: Rng + ?Sized>(raw: &Tensor, noise_std: f64, rng: &mut R) -> Result<Tensor> {
    if raw.data().iter().any(|v| !(0.0..=255.0).contains(v)) {
        return Err(Error::invalid(
            "preprocess: raw values must lie in [0, 255]",
        ));
    }
    Ok(raw.map(|v| {
        let mut y = v / 127.5 - 1.0;
        if noise_std > 0.0 {
            y += noise_std * rng.sample::<f64, _>(StandardNormal);
        }
        y.clamp(-1.0, 1.0)
    }))
}
