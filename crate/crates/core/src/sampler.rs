//! Langevin-style samplers that ascend the classifier's class log-probability,
//! with an optional Gram-matrix style term.
//!
//! One GRMALA step is
//!
//! ```text
//! x' = clip(x + eps1 * grad log p(target | x) - eps2 * grad style(x) + eps3 * z),  z ~ N(0, I)
//! ```
//!
//! The style term enters as descent on the style loss; adding the loss value
//! itself to `x` would not be shape-consistent.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{one_hot, validate_distribution, ClassifierModel};
use crate::rng::StreamRng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    /// `N(0, I)`.
    Gaussian,
    /// All ones: a white image after pixel scaling.
    Blank,
    /// `U[-1, 1]`.
    Uniform,
    Given(Tensor),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub eps1: f64,
    pub eps2: f64,
    pub eps3: f64,
    pub steps: usize,
    /// Conv layers for the style term; `None` uses the model's default.
    pub gram_layers: Option<Vec<usize>>,
    pub clip_to: Option<(f64, f64)>,
    pub init: Init,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            eps1: 1.0,
            eps2: 1.0,
            eps3: 0.01,
            steps: 20,
            gram_layers: None,
            clip_to: Some((-1.0, 1.0)),
            init: Init::Gaussian,
        }
    }
}

impl SamplerConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)] // rejects NaN
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("eps1", self.eps1),
            ("eps2", self.eps2),
            ("eps3", self.eps3),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!(
                    "{name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        if let Some((lo, hi)) = self.clip_to {
            if !(lo < hi) {
                return Err(Error::invalid(format!("clip range [{lo}, {hi}] is empty")));
            }
        }
        Ok(())
    }

    pub fn layers_for(&self, model: &ClassifierModel) -> Result<Vec<usize>> {
        let layers = match &self.gram_layers {
            Some(l) => l.clone(),
            None => model.arch().default_gram_layers(),
        };
        model.check_gram_layers(&layers)?;
        Ok(layers)
    }
}

/// What a chain ascends.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    /// `log p(y = c | x)`.
    Class(usize),
    /// `sum_c t_c log p(y = c | x)` for a distribution `t` over `C+1` outputs.
    Soft(Vec<f64>),
    /// `logsumexp(logits)`, the unnormalised marginal.
    Marginal,
}

impl Target {
    fn distribution(&self, k: usize) -> Result<Option<Vec<f64>>> {
        match self {
            Target::Class(c) if *c < k => Ok(Some(one_hot(*c, k))),
            Target::Class(c) => Err(Error::invalid(format!(
                "target class {c} out of range (C+1 = {k})"
            ))),
            Target::Soft(t) => {
                validate_distribution(t, k)?;
                Ok(Some(t.clone()))
            }
            Target::Marginal => Ok(None),
        }
    }
}

/// Where a Gram target came from.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GramSource {
    /// Dataset indices of the reference images.
    pub images: Vec<usize>,
    pub classes: Vec<usize>,
    /// Weight of the first source when two were mixed.
    pub lambda: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GramTarget {
    pub layers: Vec<usize>,
    /// One `[N_L, N_L]` matrix per layer.
    pub matrices: Vec<Tensor>,
    pub source: GramSource,
}

/// `F F^T` for a `[N, M]` feature matrix.
pub fn gram_matrix(f: &Tensor) -> Result<Tensor> {
    if f.rank() != 2 {
        return Err(Error::invalid(format!(
            "gram_matrix needs [N, M], got {:?}",
            f.shape()
        )));
    }
    let (n, m) = (f.shape()[0], f.shape()[1]);
    let d = f.data();
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let s: f64 = (0..m).map(|k| d[i * m + k] * d[j * m + k]).sum();
            g[i * n + j] = s;
            g[j * n + i] = s;
        }
    }
    Ok(Tensor::new(vec![n, n], g)?)
}

impl GramTarget {
    /// Gram matrices of one real image (model space) at `layers`.
    pub fn from_image(
        model: &ClassifierModel,
        x: &Tensor,
        layers: &[usize],
        source: GramSource,
    ) -> Result<Self> {
        let maps = model.feature_maps(x, layers)?;
        Ok(GramTarget {
            layers: layers.to_vec(),
            matrices: maps.iter().map(gram_matrix).collect::<Result<_>>()?,
            source,
        })
    }

    /// `lambda * a + (1 - lambda) * b`, layer by layer.
    pub fn mix(a: &GramTarget, b: &GramTarget, lambda: f64) -> Result<Self> {
        if a.layers != b.layers {
            return Err(Error::invalid(format!(
                "cannot mix Gram targets over layers {:?} and {:?}",
                a.layers, b.layers
            )));
        }
        let matrices = a
            .matrices
            .iter()
            .zip(&b.matrices)
            .map(|(p, q)| {
                let data = p
                    .data()
                    .iter()
                    .zip(q.data())
                    .map(|(u, v)| lambda * u + (1.0 - lambda) * v)
                    .collect();
                Ok(Tensor::new(p.shape().to_vec(), data)?)
            })
            .collect::<Result<_>>()?;
        let mut source = GramSource {
            images: a.source.images.clone(),
            classes: a.source.classes.clone(),
            lambda: Some(lambda),
        };
        source.images.extend(&b.source.images);
        source.classes.extend(&b.source.classes);
        Ok(GramTarget {
            layers: a.layers.clone(),
            matrices,
            source,
        })
    }
}

/// `sum_{ij} (G - A)^2 / (4 N^2 M^2)` for sample `b` of a `[B, N, H, W]` map.
fn layer_style(g: &mut Graph, maps: Var, b: usize, a: &Tensor) -> Result<Var> {
    let s = g.shape(maps).to_vec();
    let (n, m) = (s[1], s[2] * s[3]);
    if a.shape() != [n, n] {
        return Err(Error::invalid(format!(
            "Gram target {:?} does not match layer with {n} filters",
            a.shape()
        )));
    }
    let one = g.slice(maps, 0, b, 1)?;
    let f = g.reshape(one, &[n, m])?;
    let ft = g.transpose(f)?;
    let gram = g.matmul(f, ft)?;
    let av = g.constant(a.clone());
    let d = g.sub(gram, av)?;
    let sq = g.square(d);
    let total = g.sum(sq);
    let (nf, mf) = (n as f64, m as f64);
    Ok(g.scalar_mul(total, 1.0 / (4.0 * nf * nf * mf * mf)))
}

/// Style loss of sample `b` against `target`, given the forward's conv maps.
pub fn style_graph(
    g: &mut Graph,
    conv_maps: &[(usize, Var)],
    b: usize,
    target: &GramTarget,
) -> Result<Option<Var>> {
    let mut total: Option<Var> = None;
    for (layer, a) in target.layers.iter().zip(&target.matrices) {
        let (_, maps) = conv_maps.iter().find(|(i, _)| i == layer).ok_or_else(|| {
            Error::invalid(format!("layer {layer} is not a conv layer of this model"))
        })?;
        let term = layer_style(g, *maps, b, a)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total)
}

/// Style loss of one model-space sample.
pub fn style_loss(model: &ClassifierModel, x: &Tensor, target: &GramTarget) -> Result<f64> {
    model.check_gram_layers(&target.layers)?;
    let xb = model.as_batch(x)?;
    if xb.shape()[0] != 1 {
        return Err(Error::invalid("style_loss takes a single sample"));
    }
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let xv = g.constant(xb);
    let fwd = model.forward(&mut g, &bound, xv)?;
    Ok(style_graph(&mut g, &fwd.conv_maps, 0, target)?.map_or(0.0, |v| g.value(v).item()))
}

/// A single Langevin chain.
#[derive(Clone, Debug)]
pub struct Chain {
    pub x: Tensor,
    pub target: Target,
    pub gram: Option<GramTarget>,
    pub t: usize,
    /// Set when a step produced non-finite values; the state is left as it
    /// was before that step and the chain stops moving.
    pub failure: Option<String>,
    rng: StreamRng,
}

impl Chain {
    pub fn new(x: Tensor, target: Target, gram: Option<GramTarget>, rng: StreamRng) -> Self {
        Chain {
            x,
            target,
            gram,
            t: 0,
            failure: None,
            rng,
        }
    }

    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }
}

/// Objective values at the state a step started from.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepStats {
    pub log_cond: Vec<f64>,
    pub style: Vec<f64>,
}

/// `clip(x + eps1 * ascent - eps2 * descent + eps3 * noise)`. The descent
/// term is skipped entirely when absent.
pub fn langevin_update(
    x: &Tensor,
    ascent: &[f64],
    eps1: f64,
    descent: Option<(&[f64], f64)>,
    noise: &[f64],
    eps3: f64,
    clip: Option<(f64, f64)>,
) -> Tensor {
    let mut out = x.clone();
    for (k, v) in out.data_mut().iter_mut().enumerate() {
        let mut y = *v + eps1 * ascent[k];
        if let Some((d, eps2)) = descent {
            y -= eps2 * d[k];
        }
        y += eps3 * noise[k];
        if let Some((lo, hi)) = clip {
            y = y.clamp(lo, hi);
        }
        *v = y;
    }
    out
}

struct Objectives {
    xv: Var,
    log_cond: Var,
    log_cond_rows: Var,
    style: Option<Var>,
    style_rows: Vec<Option<Var>>,
}

fn build_objectives(
    g: &mut Graph,
    model: &ClassifierModel,
    chains: &[&Chain],
) -> Result<Objectives> {
    let k = model.arch().num_outputs();
    let states: Vec<Tensor> = chains.iter().map(|c| c.x.clone()).collect();
    let batch = model.as_batch(&Tensor::stack(&states)?)?;
    let bound = model.bind(g, false);
    let xv = g.variable(batch);
    let fwd = model.forward(g, &bound, xv)?;

    let dists: Vec<Option<Vec<f64>>> = chains
        .iter()
        .map(|c| c.target.distribution(k))
        .collect::<Result<_>>()?;
    let n = chains.len();
    let any_marginal = dists.iter().any(Option::is_none);
    let any_cond = dists.iter().any(Option::is_some);
    let mut rows: Option<Var> = None;
    if any_cond {
        let data = dists
            .iter()
            .flat_map(|d| d.clone().unwrap_or_else(|| vec![1.0 / k as f64; k]))
            .collect();
        let t = g.constant(Tensor::new(vec![n, k], data)?);
        let ce = g.cross_entropy_soft(fwd.logits, t)?;
        let mut lc = g.scalar_mul(ce, -1.0);
        if any_marginal {
            let mask = dists
                .iter()
                .map(|d| if d.is_some() { 1.0 } else { 0.0 })
                .collect();
            let m = g.constant(Tensor::vector(mask));
            lc = g.mul(lc, m)?;
        }
        rows = Some(lc);
    }
    if any_marginal {
        let mut lse = g.logsumexp(fwd.logits, 1)?;
        if any_cond {
            let mask = dists
                .iter()
                .map(|d| if d.is_none() { 1.0 } else { 0.0 })
                .collect();
            let m = g.constant(Tensor::vector(mask));
            lse = g.mul(lse, m)?;
        }
        rows = Some(match rows {
            Some(r) => g.add(r, lse)?,
            None => lse,
        });
    }
    let log_cond_rows = rows.expect("at least one chain");
    let log_cond = g.sum(log_cond_rows);

    let mut style_rows = Vec::with_capacity(n);
    let mut style: Option<Var> = None;
    for (b, c) in chains.iter().enumerate() {
        let term = match &c.gram {
            Some(gt) => style_graph(g, &fwd.conv_maps, b, gt)?,
            None => None,
        };
        if let Some(t) = term {
            style = Some(match style {
                Some(s) => g.add(s, t)?,
                None => t,
            });
        }
        style_rows.push(term);
    }
    Ok(Objectives {
        xv,
        log_cond,
        log_cond_rows,
        style,
        style_rows,
    })
}

/// Advances every live chain by one step, as one batched graph. Each chain
/// draws its noise from its own stream, and rows never interact, so the
/// result does not depend on how chains are grouped into batches.
pub fn step_chains(
    model: &ClassifierModel,
    chains: &mut [Chain],
    config: &SamplerConfig,
) -> Result<StepStats> {
    config.validate()?;
    let live: Vec<usize> = (0..chains.len()).filter(|&i| !chains[i].failed()).collect();
    let mut stats = StepStats {
        log_cond: vec![f64::NAN; chains.len()],
        style: vec![0.0; chains.len()],
    };
    if live.is_empty() {
        return Ok(stats);
    }
    let refs: Vec<&Chain> = live.iter().map(|&i| &chains[i]).collect();
    let mut g = Graph::new();
    let obj = build_objectives(&mut g, model, &refs)?;
    let lc_rows = g.value(obj.log_cond_rows).data().to_vec();
    let style_vals: Vec<f64> = obj
        .style_rows
        .iter()
        .map(|v| v.map_or(0.0, |v| g.value(v).item()))
        .collect();
    let (ascent, _) = g.grad_wrt_input(obj.log_cond, obj.xv)?;
    let descent = match obj.style {
        Some(s) if config.eps2 != 0.0 => Some(g.grad_wrt_input(s, obj.xv)?.0),
        _ => None,
    };
    let per = ascent.numel() / live.len();
    for (b, &ci) in live.iter().enumerate() {
        let chain = &mut chains[ci];
        stats.log_cond[ci] = lc_rows[b];
        stats.style[ci] = style_vals[b];
        let noise: Vec<f64> = (0..per).map(|_| chain.rng.sample(StandardNormal)).collect();
        let up = &ascent.data()[b * per..(b + 1) * per];
        let down = descent.as_ref().map(|d| &d.data()[b * per..(b + 1) * per]);
        let grads_ok = up.iter().all(|v| v.is_finite())
            && down.is_none_or(|d| d.iter().all(|v| v.is_finite()));
        let next = langevin_update(
            &chain.x,
            up,
            config.eps1,
            down.map(|d| (d, config.eps2)),
            &noise,
            config.eps3,
            config.clip_to,
        );
        if grads_ok && next.is_finite() {
            chain.x = next;
            chain.t += 1;
        } else {
            let msg = format!("non-finite gradient at step {}", chain.t);
            log::warn!("chain {ci}: {msg}");
            chain.failure = Some(msg);
        }
    }
    Ok(stats)
}

/// One GRMALA step on a single chain.
pub fn grmala_step(
    model: &ClassifierModel,
    chain: &mut Chain,
    config: &SamplerConfig,
) -> Result<StepStats> {
    step_chains(model, std::slice::from_mut(chain), config)
}

/// The baseline sampler: ascends the unnormalised marginal with gradient
/// scale `eps1` and noise scale `eps_noise`, no style term.
pub fn mala_approx_step(
    model: &ClassifierModel,
    chain: &mut Chain,
    eps1: f64,
    eps_noise: f64,
    clip_to: Option<(f64, f64)>,
) -> Result<StepStats> {
    let config = SamplerConfig {
        eps1,
        eps2: 0.0,
        eps3: eps_noise,
        steps: 1,
        gram_layers: Some(Vec::new()),
        clip_to,
        init: Init::Gaussian,
    };
    let saved = std::mem::replace(&mut chain.target, Target::Marginal);
    let out = grmala_step(model, chain, &config);
    chain.target = saved;
    out
}

/// Objective values at the chains' current states, without moving them.
pub fn evaluate(model: &ClassifierModel, chains: &[&Chain]) -> Result<StepStats> {
    let mut g = Graph::new();
    let obj = build_objectives(&mut g, model, chains)?;
    Ok(StepStats {
        log_cond: g.value(obj.log_cond_rows).data().to_vec(),
        style: obj
            .style_rows
            .iter()
            .map(|v| v.map_or(0.0, |v| g.value(v).item()))
            .collect(),
    })
}

/// Starting state drawn according to `init`.
pub fn initial_state<R: Rng + ?Sized>(init: &Init, shape: &[usize], rng: &mut R) -> Result<Tensor> {
    Ok(match init {
        Init::Gaussian => Tensor::randn(shape, 1.0, rng),
        Init::Blank => Tensor::ones(shape),
        Init::Uniform => Tensor::uniform(shape, -1.0, 1.0, rng),
        Init::Given(t) if t.shape() == shape => t.clone(),
        Init::Given(t) => {
            return Err(Error::invalid(format!(
                "given start {:?} does not match input {shape:?}",
                t.shape()
            )))
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryRow {
    pub step: usize,
    pub log_cond: f64,
    pub style_loss: f64,
}

#[derive(Clone, Debug)]
pub struct Synthesis {
    pub sample: Tensor,
    /// One row per visited state, `steps + 1` in total.
    pub trajectory: Vec<TrajectoryRow>,
}

/// Runs `config.steps` GRMALA steps from `config.init`.
pub fn synthesize(
    model: &ClassifierModel,
    target: Target,
    gram: Option<GramTarget>,
    config: &SamplerConfig,
    mut rng: StreamRng,
) -> Result<Synthesis> {
    config.validate()?;
    let x0 = initial_state(&config.init, &model.arch().input_shape, &mut rng)?;
    let mut chain = Chain::new(x0, target, gram, rng);
    let mut trajectory = Vec::with_capacity(config.steps + 1);
    for step in 0..config.steps {
        let s = grmala_step(model, &mut chain, config)?;
        if let Some(f) = &chain.failure {
            return Err(Error::ChainFailed(f.clone()));
        }
        trajectory.push(TrajectoryRow {
            step,
            log_cond: s.log_cond[0],
            style_loss: s.style[0],
        });
    }
    let last = evaluate(model, &[&chain])?;
    trajectory.push(TrajectoryRow {
        step: config.steps,
        log_cond: last.log_cond[0],
        style_loss: last.style[0],
    });
    Ok(Synthesis {
        sample: chain.x,
        trajectory,
    })
}

/// Runs `steps` steps on a set of chains, returning how many ended failed.
pub fn run_chains(
    model: &ClassifierModel,
    chains: &mut [Chain],
    config: &SamplerConfig,
) -> Result<usize> {
    for _ in 0..config.steps {
        step_chains(model, chains, config)?;
    }
    Ok(chains.iter().filter(|c| c.failed()).count())
}

pub fn trajectory_csv(rows: &[TrajectoryRow]) -> String {
    let mut out = String::from("step,log_cond,style_loss\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.step, r.log_cond, r.style_loss);
    }
    out
}

/// `n_points` convex combinations `(1 - w) a + w b` at `w = k / (n_points - 1)`.
pub fn interpolate(a: &Tensor, b: &Tensor, n_points: usize) -> Result<Vec<Tensor>> {
    if n_points < 2 {
        return Err(Error::invalid(format!(
            "interpolate needs at least 2 points, got {n_points}"
        )));
    }
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!(
            "interpolate endpoints differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok((0..n_points)
        .map(|k| {
            let w = k as f64 / (n_points - 1) as f64;
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(u, v)| (1.0 - w) * u + w * v)
                .collect();
            Tensor::new(a.shape().to_vec(), data).expect("same shape")
        })
        .collect())
}

/// `count` draws of `x + N(0, sigma^2 I)`.
pub fn neighborhood_starts<R: Rng + ?Sized>(
    x: &Tensor,
    sigma: f64,
    count: usize,
    rng: &mut R,
) -> Result<Vec<Tensor>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!(
            "neighbourhood radius must be nonnegative, got {sigma}"
        )));
    }
    Ok((0..count)
        .map(|_| x.map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal)))
        .collect())
}
