//! Class-conditional score-matching regularizer.
//!
//! A model built with [`Architecture::with_score_head`] emits a vector field
//! `s(x)` shaped like its input next to the logits. The regularizer is
//!
//! ```text
//! ½‖s(x)‖² + tr(∂s/∂x) + ½‖e_y − softmax(logits(x))‖²
//! ```
//!
//! averaged over the real batch and added to the pass loss with a weight.
//!
//! [`Architecture::with_score_head`]: crate::model::Architecture::with_score_head

use rand::Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::mixup::LabeledBatch;
use crate::model::{Architecture, Bound, ClassifierModel};
use crate::rng::{self, StreamRng};
use crate::tensor::Tensor;
use crate::trainer::{LossHook, PassMetrics, PassState, TrainConfig, TrainLog, Trainer};

pub const DEFAULT_WEIGHT: f64 = 0.1;

/// Largest input dimension the exact estimator accepts.
pub const EXACT_MAX_DIM: usize = 64;

/// Half-width of the central difference used for the trace during training.
pub const TRAIN_FD_STEP: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub enum TraceEstimator {
    /// One backward pass per input coordinate.
    Exact,
    /// Hutchinson estimate with Rademacher probes.
    Stochastic { probes: usize },
}

impl TraceEstimator {
    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            TraceEstimator::Exact if dim > EXACT_MAX_DIM => Err(Error::invalid(format!(
                "exact trace limited to dimension {EXACT_MAX_DIM}, got {dim}"
            ))),
            TraceEstimator::Stochastic { probes: 0 } => {
                Err(Error::invalid("probe count must be at least 1"))
            }
            _ => Ok(()),
        }
    }
}

/// Tensor of independent ±1 entries.
pub fn rademacher<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Trace of the Jacobian of `f` at `x`.
///
/// `f` receives a leaf shaped like `x` and must return a node with the same
/// number of elements.
pub fn jacobian_trace<F, R>(
    f: F,
    x: &Tensor,
    estimator: &TraceEstimator,
    rng: &mut R,
) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
    R: Rng + ?Sized,
{
    let d = x.numel();
    estimator.validate(d)?;
    // vᵀ ∂(vᵀ f)/∂x for one direction.
    let directional = |v: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let xv = g.variable(x.clone());
        let out = f(&mut g, xv)?;
        if g.value(out).numel() != d {
            return Err(Error::invalid(format!(
                "vector field returned {} values for a {d}-dimensional input",
                g.value(out).numel()
            )));
        }
        let out = g.reshape(out, x.shape())?;
        let vv = g.constant(v.clone());
        let proj = g.mul(out, vv)?;
        let proj = g.sum(proj);
        let (grad, _) = g.grad_wrt_input(proj, xv)?;
        Ok(grad.data().iter().zip(v.data()).map(|(a, b)| a * b).sum())
    };
    match estimator {
        TraceEstimator::Exact => {
            let mut total = 0.0;
            for i in 0..d {
                let mut e = Tensor::zeros(x.shape());
                e.data_mut()[i] = 1.0;
                total += directional(&e)?;
            }
            Ok(total)
        }
        TraceEstimator::Stochastic { probes } => {
            let mut total = 0.0;
            for _ in 0..*probes {
                total += directional(&rademacher(x.shape(), rng))?;
            }
            Ok(total / *probes as f64)
        }
    }
}

/// The three regularizer terms for one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoreTerms {
    pub energy: f64,
    pub trace: f64,
    pub class: f64,
}

impl ScoreTerms {
    pub fn total(&self) -> f64 {
        self.energy + self.trace + self.class
    }
}

/// `½‖e_y − p‖²` between a one-hot target and a distribution.
pub fn class_term(class: usize, probs: &[f64]) -> f64 {
    probs
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let t = if k == class { 1.0 } else { 0.0 };
            (t - p) * (t - p)
        })
        .sum::<f64>()
        * 0.5
}

/// Regularizer value at a single sample `x` with target class `class`.
pub fn score_reg<R: Rng + ?Sized>(
    model: &ClassifierModel,
    x: &Tensor,
    class: usize,
    estimator: &TraceEstimator,
    rng: &mut R,
) -> Result<ScoreTerms> {
    if !model.arch().score_head {
        return Err(Error::invalid("score_reg needs a model with a score head"));
    }
    if class >= model.arch().num_outputs() {
        return Err(Error::invalid(format!("class {class} out of range")));
    }
    let xb = model.as_batch(x)?;
    if xb.shape()[0] != 1 {
        return Err(Error::invalid("score_reg takes a single sample"));
    }
    let s = model.score(&xb)?;
    let energy = 0.5 * s.data().iter().map(|v| v * v).sum::<f64>();
    let probs = model.probabilities(&xb)?;
    let class = class_term(class, probs.data());
    let frozen = |g: &mut Graph, xv: Var| -> Result<Var> {
        let bound = model.bind(g, false);
        let f = model.forward(g, &bound, xv)?;
        Ok(f.score.expect("score head"))
    };
    let trace = jacobian_trace(frozen, &xb, estimator, rng)?;
    Ok(ScoreTerms {
        energy,
        trace,
        class,
    })
}

/// Builds the batch-mean regularizer in `g` against bound parameters.
///
/// The trace uses one Rademacher probe per sample and the central difference
/// `vᵀ(s(x + hv) − s(x − hv)) / 2h`, which keeps the term differentiable in
/// the parameters without second-order autodiff.
pub fn score_reg_graph<R: Rng + ?Sized>(
    g: &mut Graph,
    model: &ClassifierModel,
    bound: &Bound,
    real: &LabeledBatch,
    rng: &mut R,
) -> Result<Var> {
    if !model.arch().score_head {
        return Err(Error::invalid(
            "score regularizer needs a model with a score head",
        ));
    }
    let x = &real.x;
    let b = x.shape()[0];
    let d = x.numel() / b;
    let score_of = |g: &mut Graph, input: Tensor| -> Result<(Var, Var)> {
        let xv = g.constant(input);
        let f = model.forward(g, bound, xv)?;
        Ok((f.score.expect("score head"), f.logits))
    };
    let (s, logits) = score_of(g, x.clone())?;
    let sq = g.square(s);
    let sq = g.sum(sq);
    let energy = g.scalar_mul(sq, 0.5 / b as f64);

    let v = rademacher(&[b, d], rng);
    let h = TRAIN_FD_STEP;
    let shift = |sign: f64| -> Result<Tensor> {
        let data = x
            .data()
            .iter()
            .zip(v.data())
            .map(|(a, p)| a + sign * h * p)
            .collect();
        Ok(Tensor::new(x.shape().to_vec(), data)?)
    };
    let (sp, _) = score_of(g, shift(1.0)?)?;
    let (sm, _) = score_of(g, shift(-1.0)?)?;
    let diff = g.sub(sp, sm)?;
    let vv = g.constant(v);
    let proj = g.mul(diff, vv)?;
    let proj = g.sum(proj);
    let trace = g.scalar_mul(proj, 1.0 / (2.0 * h * b as f64));

    let p = g.softmax(logits, 1)?;
    let t = g.constant(real.targets.clone());
    let r = g.sub(t, p)?;
    let r = g.square(r);
    let r = g.sum(r);
    let class = g.scalar_mul(r, 0.5 / b as f64);

    let total = g.add(energy, trace)?;
    Ok(g.add(total, class)?)
}

/// Adds `weight · score_reg` on every real batch. Probes come from a stream
/// of their own so the trainer's draws are unchanged.
pub struct ScoreHook {
    pub weight: f64,
    probes: StreamRng,
}

impl ScoreHook {
    pub fn new(weight: f64, seed: u64) -> Result<Self> {
        if !weight.is_finite() || weight < 0.0 {
            return Err(Error::invalid(format!(
                "score weight must be finite and ≥ 0, got {weight}"
            )));
        }
        Ok(ScoreHook {
            weight,
            probes: rng::stream(seed, "score/probes"),
        })
    }
}

impl LossHook for ScoreHook {
    fn extra(
        &mut self,
        g: &mut Graph,
        model: &ClassifierModel,
        bound: &Bound,
        real: &LabeledBatch,
        _labels: &[usize],
    ) -> Result<Option<Var>> {
        let reg = score_reg_graph(g, model, bound, real, &mut self.probes)?;
        Ok(Some(g.scalar_mul(reg, self.weight)))
    }
}

/// STIC training with the score regularizer on real batches.
pub fn train_score_stic(
    config: &TrainConfig,
    data: &Dataset,
    arch: Architecture,
    weight: f64,
    seed: u64,
    on_pass: impl FnMut(&PassState, &PassMetrics) -> Result<()>,
) -> Result<(ClassifierModel, TrainLog)> {
    if !arch.score_head {
        return Err(Error::invalid(
            "score-STIC needs an architecture with a score head",
        ));
    }
    let trainer = Trainer::new(config.clone(), data, seed)?;
    let mut hook = ScoreHook::new(weight, seed)?;
    let (state, log) = trainer.train_with(arch, &mut hook, on_pass)?;
    Ok((state.model, log))
}
