//! Evaluation: cross-trained accuracies, Fréchet feature distance, k-NN
//! precision/recall, sample diversity and boundary compactness.
//!
//! Features are the penultimate activations of the classifier under test, so
//! distances here are not comparable to Inception-based numbers.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::mixup::{mean_ce, LabeledBatch};
use crate::model::{Architecture, ClassifierModel};
use crate::optim::Adam;
use crate::rng::{self, StreamRng};
use crate::sampler::{initial_state, neighborhood_starts, synthesize, Init, SamplerConfig, Target};
use crate::tensor::Tensor;

/// Ridge added to a singular covariance before taking square roots.
pub const COV_RIDGE: f64 = 1e-6;

pub const DEFAULT_K: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Real,
    Generated,
}

/// `n × d` feature matrix with optional labels.
#[derive(Clone, Debug)]
pub struct FeatureCloud {
    pub features: Tensor,
    pub source: Source,
    pub labels: Option<Vec<usize>>,
}

impl FeatureCloud {
    pub fn new(features: Tensor, source: Source, labels: Option<Vec<usize>>) -> Result<Self> {
        if features.rank() != 2 {
            return Err(Error::invalid(format!(
                "feature cloud must be n × d, got {:?}",
                features.shape()
            )));
        }
        if !features.is_finite() {
            return Err(Error::invalid("feature cloud has non-finite rows"));
        }
        if let Some(l) = &labels {
            if l.len() != features.shape()[0] {
                return Err(Error::invalid("label count does not match row count"));
            }
        }
        Ok(FeatureCloud {
            features,
            source,
            labels,
        })
    }

    /// Penultimate features of `model` on a batch of model-space inputs.
    pub fn from_model(
        model: &ClassifierModel,
        x: &Tensor,
        source: Source,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        FeatureCloud::new(model.penultimate_features(x)?, source, labels)
    }

    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.len(), self.dim(), self.features.data())
    }
}

fn moments(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let mean = m.row_mean().transpose();
    let mut centered = m.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (mean, cov)
}

/// Symmetric PSD square root with eigenvalues floored at 0.
fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

fn regularize(cov: DMatrix<f64>, which: &str) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(cov.clone());
    let top = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(0.0f64, |a, v| a.max(v.abs()));
    let low = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if low <= 1e-12 * top.max(1.0) {
        log::warn!("{which} covariance is singular; adding {COV_RIDGE}·I");
        let d = cov.nrows();
        cov + DMatrix::identity(d, d) * COV_RIDGE
    } else {
        cov
    }
}

/// Fréchet distance between Gaussians fitted to two clouds:
/// `‖μ₁ − μ₂‖² + tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^{1/2})`, with unbiased covariances.
pub fn frechet_distance(a: &FeatureCloud, b: &FeatureCloud) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::invalid(format!(
            "feature widths differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid(
            "moment fitting needs at least 2 rows per cloud",
        ));
    }
    let (mu1, s1) = moments(&a.matrix());
    let (mu2, s2) = moments(&b.matrix());
    let s1 = regularize(s1, "first");
    let s2 = regularize(s2, "second");
    // tr((Σ₁Σ₂)^{1/2}) = tr((Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2}); the inner form stays symmetric.
    let r1 = sqrt_psd(&s1);
    let cross = sqrt_psd(&(&r1 * &s2 * &r1)).trace();
    let d = (mu1 - mu2).norm_squared() + s1.trace() + s2.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn rows(t: &Tensor) -> Vec<&[f64]> {
    let d = t.numel() / t.shape()[0].max(1);
    t.data().chunks(d.max(1)).collect()
}

/// Squared distance from each row to its k-th nearest other row.
fn knn_radii(points: &[&[f64]], k: usize) -> Vec<f64> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut d: Vec<f64> = points
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| sq_dist(p, q))
                .collect();
            d.sort_by(|a, b| a.total_cmp(b));
            d[k - 1]
        })
        .collect()
}

fn coverage(support: &[&[f64]], radii: &[f64], queries: &[&[f64]]) -> f64 {
    let hits = queries
        .iter()
        .filter(|q| support.iter().zip(radii).any(|(s, r)| sq_dist(q, s) <= *r))
        .count();
    hits as f64 / queries.len() as f64
}

/// Precision: share of generated rows inside some real row's k-NN ball.
/// Recall: share of real rows inside some generated row's k-NN ball.
pub fn knn_precision_recall(
    real: &FeatureCloud,
    generated: &FeatureCloud,
    k: usize,
) -> Result<(f64, f64)> {
    if real.dim() != generated.dim() {
        return Err(Error::invalid("feature widths differ"));
    }
    if k == 0 || k >= real.len().min(generated.len()) {
        return Err(Error::invalid(format!(
            "k must be in 1..{}, got {k}",
            real.len().min(generated.len())
        )));
    }
    let r = rows(&real.features);
    let g = rows(&generated.features);
    let precision = coverage(&r, &knn_radii(&r, k), &g);
    let recall = coverage(&g, &knn_radii(&g, k), &r);
    Ok((precision, recall))
}

/// Settings for the fresh classifier trained inside [`cls_cross`].
#[derive(Clone, Debug)]
pub struct ClsConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClsConfig {
    fn default() -> Self {
        ClsConfig {
            epochs: 20,
            batch: 32,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Labelled inputs in model space.
#[derive(Clone, Copy, Debug)]
pub struct LabeledSet<'a> {
    pub x: &'a Tensor,
    pub labels: &'a [usize],
}

/// Trains a fresh classifier on `train` with cross-entropy and reports top-1
/// accuracy (percent, over real classes) on `test`. Test rows whose class never
/// appears in `train` are dropped with a warning.
pub fn cls_cross(
    train: LabeledSet,
    test: LabeledSet,
    template: &Architecture,
    config: &ClsConfig,
) -> Result<f64> {
    let c = template.num_real_classes;
    for set in [&train, &test] {
        if set.x.shape().first() != Some(&set.labels.len()) {
            return Err(Error::invalid("input rows and labels disagree"));
        }
        if let Some(bad) = set.labels.iter().find(|&&l| l >= c) {
            return Err(Error::invalid(format!("label {bad} outside {c} classes")));
        }
    }
    if train.labels.is_empty() || config.batch == 0 {
        return Err(Error::invalid(
            "training set and batch size must be nonempty",
        ));
    }
    let model = fit_classifier(train, template, config)?;

    let mut present = vec![false; c];
    for &l in train.labels {
        present[l] = true;
    }
    let keep: Vec<usize> = (0..test.labels.len())
        .filter(|&i| present[test.labels[i]])
        .collect();
    if keep.len() < test.labels.len() {
        log::warn!(
            "cls_cross: {} test rows belong to classes absent from training; excluded",
            test.labels.len() - keep.len()
        );
    }
    if keep.is_empty() {
        return Err(Error::invalid(
            "no test rows share a class with the training set",
        ));
    }
    let pred = model.predict_real(test.x)?;
    let hits = keep.iter().filter(|&&i| pred[i] == test.labels[i]).count();
    Ok(100.0 * hits as f64 / keep.len() as f64)
}

/// Plain cross-entropy training with Adam over shuffled minibatches.
pub fn fit_classifier(
    train: LabeledSet,
    template: &Architecture,
    config: &ClsConfig,
) -> Result<ClassifierModel> {
    let mut model =
        ClassifierModel::new(template.clone(), rng::derive_seed(config.seed, "cls/init"))?;
    let mut adam = Adam::new(model.params());
    let mut r = rng::stream(config.seed, "cls/order");
    let n = train.labels.len();
    let k = template.num_outputs();
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut r);
        for chunk in order.chunks(config.batch) {
            let x = Tensor::stack(&chunk.iter().map(|&i| train.x.row(i)).collect::<Vec<_>>())?;
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let batch = LabeledBatch::hard(x, &labels, k)?;
            let mut g = Graph::new();
            let bound = model.bind(&mut g, true);
            let loss = mean_ce(&mut g, &model, &bound, &batch)?;
            g.backward(loss)?;
            let grads: Vec<Option<&Tensor>> = bound.vars.iter().map(|v| g.grad(*v)).collect();
            adam.step(model.params_mut(), &grads, config.lr);
        }
    }
    Ok(model)
}

/// Mean pairwise L2 distances among samples started near one point and
/// among samples started independently.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiversityReport {
    pub within_near: f64,
    pub across_far: f64,
}

pub fn mean_pairwise_distance(samples: &[Tensor]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            total += sq_dist(samples[i].data(), samples[j].data()).sqrt();
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

/// Synthesises `n` chains from Gaussian-perturbed copies of one base start
/// and `n` chains from independent starts, then compares their spreads.
pub fn diversity_report(
    model: &ClassifierModel,
    class: usize,
    n: usize,
    sigma: f64,
    config: &SamplerConfig,
    seed: u64,
) -> Result<DiversityReport> {
    if n < 2 {
        return Err(Error::invalid(
            "diversity needs at least 2 chains per group",
        ));
    }
    let shape = model.arch().input_shape.clone();
    let mut r = rng::stream(seed, "diversity/starts");
    let base = initial_state(&config.init, &shape, &mut r)?;
    let near = neighborhood_starts(&base, sigma, n, &mut r)?;
    let far = (0..n)
        .map(|_| initial_state(&config.init, &shape, &mut r))
        .collect::<Result<Vec<_>>>()?;
    let run = |starts: Vec<Tensor>, tag: &str| -> Result<Vec<Tensor>> {
        starts
            .into_iter()
            .enumerate()
            .map(|(i, x0)| {
                let cfg = SamplerConfig {
                    init: Init::Given(x0),
                    ..config.clone()
                };
                let chain_rng: StreamRng = rng::stream(seed, &format!("diversity/{tag}/{i}"));
                Ok(synthesize(model, Target::Class(class), None, &cfg, chain_rng)?.sample)
            })
            .collect()
    };
    Ok(DiversityReport {
        within_near: mean_pairwise_distance(&run(near, "near")?),
        across_far: mean_pairwise_distance(&run(far, "far")?),
    })
}

/// Mean of the largest real-class probability over `n` inputs drawn
/// uniformly from the box `[lo, hi]` per coordinate.
pub fn boundary_proxy<R: Rng + ?Sized>(
    model: &ClassifierModel,
    lo: &[f64],
    hi: &[f64],
    n: usize,
    rng: &mut R,
) -> Result<f64> {
    let shape = &model.arch().input_shape;
    let d: usize = shape.iter().product();
    if lo.len() != d || hi.len() != d || n == 0 {
        return Err(Error::invalid(
            "box must match the input dimension and n must be positive",
        ));
    }
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        for k in 0..d {
            data.push(rng.random_range(lo[k]..=hi[k]));
        }
    }
    let mut full = vec![n];
    full.extend_from_slice(shape);
    let p = model.probabilities(&Tensor::new(full, data)?)?;
    let k = model.arch().num_outputs();
    let c = model.num_real_classes();
    Ok(p.data()
        .chunks(k)
        .map(|row| row[..c].iter().cloned().fold(0.0, f64::max))
        .sum::<f64>()
        / n as f64)
}
