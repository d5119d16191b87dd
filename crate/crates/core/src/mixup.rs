//! Mixup virtual pairs and the vicinal risk loss.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{validate_distribution, Bound, ClassifierModel};
use crate::tensor::Tensor;

pub const DEFAULT_ALPHA: f64 = 1.0;

/// One draw of `λ ~ Beta(α, α)`.
pub fn sample_beta<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!(
            "mixup alpha must be positive, got {alpha}"
        )));
    }
    let beta =
        Beta::new(alpha, alpha).map_err(|e| Error::invalid(format!("beta({alpha}): {e}")))?;
    Ok(beta.sample(rng))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixupPair {
    pub lambda: f64,
    pub i: usize,
    pub j: usize,
    pub mixed_image: Tensor,
    /// Distribution over all `C+1` outputs; the fake entry is always 0.
    pub mixed_label: Vec<f64>,
}

impl MixupPair {
    /// `λ x_i + (1-λ) x_j` with the labels mixed the same way.
    pub fn mix(
        (i, x_i, y_i): (usize, &Tensor, &[f64]),
        (j, x_j, y_j): (usize, &Tensor, &[f64]),
        lambda: f64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::invalid(format!("lambda {lambda} outside [0, 1]")));
        }
        if x_i.shape() != x_j.shape() || y_i.len() != y_j.len() {
            return Err(Error::invalid(format!(
                "mixup sources differ in shape: {:?} vs {:?}",
                x_i.shape(),
                x_j.shape()
            )));
        }
        let mu = 1.0 - lambda;
        let data = x_i
            .data()
            .iter()
            .zip(x_j.data())
            .map(|(a, b)| lambda * a + mu * b)
            .collect();
        Ok(MixupPair {
            lambda,
            i,
            j,
            mixed_image: Tensor::new(x_i.shape().to_vec(), data)?,
            mixed_label: y_i
                .iter()
                .zip(y_j)
                .map(|(a, b)| lambda * a + mu * b)
                .collect(),
        })
    }
}

/// Pairs every row `i` of `images` with `perm[i]`, where `perm` is a random
/// single-cycle permutation (so no row pairs with itself and every row is
/// used once as each side). Labels are real-class indices; mixed labels
/// span `num_outputs = C+1` entries.
pub fn make_mixup<R: Rng + ?Sized>(
    images: &Tensor,
    labels: &[usize],
    num_outputs: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<Vec<MixupPair>> {
    let n = labels.len();
    if n < 2 || images.shape()[0] != n {
        return Err(Error::invalid(format!(
            "mixup needs a batch of at least 2, got {n}"
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l + 1 >= num_outputs) {
        return Err(Error::invalid(format!(
            "mixup label {bad} is not a real class"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    // Sattolo's algorithm: a uniformly random n-cycle.
    for k in (1..n).rev() {
        let r = rng.random_range(0..k);
        perm.swap(k, r);
    }
    let rows: Vec<Tensor> = (0..n).map(|k| images.row(k)).collect();
    let hots: Vec<Vec<f64>> = labels
        .iter()
        .map(|&l| crate::model::one_hot(l, num_outputs))
        .collect();
    (0..n)
        .map(|i| {
            let j = perm[i];
            let lambda = sample_beta(alpha, rng)?;
            MixupPair::mix((i, &rows[i], &hots[i]), (j, &rows[j], &hots[j]), lambda)
        })
        .collect()
}

/// Inputs with per-row target distributions over `C+1` outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub x: Tensor,
    /// `[n, C+1]`.
    pub targets: Tensor,
}

impl LabeledBatch {
    pub fn new(x: Tensor, targets: Tensor) -> Result<Self> {
        let n = x.shape()[0];
        if targets.rank() != 2 || targets.shape()[0] != n {
            return Err(Error::invalid(format!(
                "targets {:?} do not match batch {:?}",
                targets.shape(),
                x.shape()
            )));
        }
        let k = targets.shape()[1];
        for row in targets.data().chunks(k) {
            validate_distribution(row, k)?;
        }
        Ok(LabeledBatch { x, targets })
    }

    pub fn hard(x: Tensor, labels: &[usize], num_outputs: usize) -> Result<Self> {
        let data = labels
            .iter()
            .flat_map(|&l| crate::model::one_hot(l, num_outputs))
            .collect();
        Self::new(x, Tensor::new(vec![labels.len(), num_outputs], data)?)
    }

    /// Every row labelled as the fake class (the last output).
    pub fn fake(x: Tensor, num_outputs: usize) -> Result<Self> {
        let n = x.shape()[0];
        Self::hard(x, &vec![num_outputs - 1; n], num_outputs)
    }

    pub fn from_pairs(pairs: &[MixupPair]) -> Result<Self> {
        let images: Vec<Tensor> = pairs.iter().map(|p| p.mixed_image.clone()).collect();
        let k = pairs.first().map_or(0, |p| p.mixed_label.len());
        let labels = pairs
            .iter()
            .flat_map(|p| p.mixed_label.iter().copied())
            .collect();
        Self::new(
            Tensor::stack(&images)?,
            Tensor::new(vec![pairs.len(), k], labels)?,
        )
    }

    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Concatenates along the batch axis.
    pub fn concat(parts: &[&LabeledBatch]) -> Result<Self> {
        let mut xs = Vec::new();
        let mut ts = Vec::new();
        for p in parts {
            xs.extend((0..p.len()).map(|i| p.x.row(i)));
            ts.extend((0..p.len()).map(|i| p.targets.row(i)));
        }
        Self::new(Tensor::stack(&xs)?, Tensor::stack(&ts)?)
    }
}

/// `mean_i CE(targets_i, softmax(logits_i))` as a graph node.
pub fn mean_ce(
    g: &mut Graph,
    model: &ClassifierModel,
    bound: &Bound,
    batch: &LabeledBatch,
) -> Result<Var> {
    let x = g.constant(batch.x.clone());
    let fwd = model.forward(g, bound, x)?;
    let t = g.constant(batch.targets.clone());
    let ce = g.cross_entropy_soft(fwd.logits, t)?;
    Ok(g.mean(ce))
}

/// `-mean log p(y|x_real) - mean log p(y_mix|x_mix)`; the mixup term is
/// dropped when `mixup` is `None`.
pub fn vrm_loss(
    model: &ClassifierModel,
    real: &LabeledBatch,
    mixup: Option<&LabeledBatch>,
) -> Result<f64> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let mut total = mean_ce(&mut g, model, &bound, real)?;
    if let Some(m) = mixup {
        let t = mean_ce(&mut g, model, &bound, m)?;
        total = g.add(total, t)?;
    }
    Ok(g.value(total).item())
}

/// Shuffles `0..n` and returns the first `k` indices, cycling if `k > n`.
pub(crate) fn draw_indices<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Vec<usize> {
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        out.extend(idx.into_iter().take(k - out.len()));
    }
    out
}
