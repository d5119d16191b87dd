//! The recurrent training loop. Each pass trains on real, mixup, synthesized
//! and synthesized-mixup batches, then regenerates both fake buffers with
//! the freshly trained classifier.

use std::fmt::Write as _;

use rand::Rng;

use crate::data::{Dataset, Encoding};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::mixup::{draw_indices, make_mixup, mean_ce, sample_beta, LabeledBatch};
use crate::model::{one_hot, Architecture, Bound, ClassifierModel};
use crate::optim::{step_decay, Adam};
use crate::rng;
use crate::sampler::{run_chains, Chain, GramSource, GramTarget, SamplerConfig, Target};
use crate::tensor::Tensor;

/// Chains are advanced in groups of this many per batched graph.
const CHAIN_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub passes: usize,
    pub iterations_per_pass: usize,
    /// N real rows per step.
    pub batch_real: usize,
    /// N mixup rows per step.
    pub batch_mixup: usize,
    /// K synthesized rows per step.
    pub batch_fake: usize,
    /// K synthesized mixup rows per step.
    pub batch_fake_mixup: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_interval: usize,
    pub chain_restart_prob: f64,
    pub preprocess_noise: f64,
    pub mixup_alpha: f64,
    /// Buffer length is `batch_fake * iterations_per_pass / refresh_stride`
    /// unless `buffer_size` is set.
    pub refresh_stride: usize,
    pub buffer_size: Option<usize>,
    pub sampler: SamplerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            passes: 10,
            iterations_per_pass: 5000,
            batch_real: 32,
            batch_mixup: 32,
            batch_fake: 32,
            batch_fake_mixup: 32,
            lr: 1e-4,
            lr_decay: 0.3,
            decay_interval: 10_000,
            chain_restart_prob: 0.5,
            preprocess_noise: 0.3,
            mixup_alpha: 1.0,
            refresh_stride: 50,
            buffer_size: None,
            sampler: SamplerConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Three short passes, sized for a laptop.
    pub fn desk() -> Self {
        TrainConfig {
            passes: 3,
            iterations_per_pass: 500,
            lr: 1e-3,
            ..TrainConfig::default()
        }
    }

    pub fn buffer_len(&self) -> usize {
        self.buffer_size
            .unwrap_or(
                self.batch_fake.max(self.batch_fake_mixup) * self.iterations_per_pass
                    / self.refresh_stride.max(1),
            )
            .max(1)
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        step_decay(self.lr, self.lr_decay, self.decay_interval, iteration)
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)] // rejects NaN
    pub fn validate(&self) -> Result<()> {
        if self.passes == 0
            || self.batch_real == 0
            || self.refresh_stride == 0
            || self.decay_interval == 0
        {
            return Err(Error::invalid(
                "passes, batch_real, refresh_stride and decay_interval must be positive",
            ));
        }
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0) || !(self.preprocess_noise >= 0.0) {
            return Err(Error::invalid(
                "lr and lr_decay must be positive, preprocess_noise nonnegative",
            ));
        }
        if !(0.0..=1.0).contains(&self.chain_restart_prob) {
            return Err(Error::invalid(format!(
                "chain_restart_prob {} outside [0, 1]",
                self.chain_restart_prob
            )));
        }
        if !(self.mixup_alpha > 0.0) {
            return Err(Error::invalid("mixup_alpha must be positive"));
        }
        self.sampler.validate()
    }
}

/// Synthesized negatives with the pass whose classifier produced them
/// (0 for the initial blank images).
#[derive(Clone, Debug, PartialEq)]
pub struct FakeBuffer {
    pub samples: Vec<Tensor>,
    pub conditions: Vec<Target>,
    pub producer: u32,
}

impl FakeBuffer {
    pub fn empty(producer: u32) -> Self {
        FakeBuffer {
            samples: Vec::new(),
            conditions: Vec::new(),
            producer,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct PassState {
    /// The pass about to run (1-based).
    pub tau: u32,
    pub model: ClassifierModel,
    pub hard: FakeBuffer,
    pub mixup: FakeBuffer,
    /// Optimizer steps taken so far, across passes.
    pub iteration: usize,
    adam: Adam,
}

impl PassState {
    /// Pass 1: hard buffer full of blank images, mixup buffer empty.
    pub fn initial(model: ClassifierModel, data: &Dataset, config: &TrainConfig) -> Self {
        let n = config.buffer_len();
        let adam = Adam::new(model.params());
        PassState {
            tau: 1,
            hard: FakeBuffer {
                samples: vec![data.blank(); n],
                conditions: vec![Target::Marginal; n],
                producer: 0,
            },
            mixup: FakeBuffer::empty(0),
            model,
            iteration: 0,
            adam,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PassMetrics {
    pub pass: u32,
    /// Optimizer steps taken once this pass finished.
    pub iter: usize,
    /// Mean pass loss over the pass's iterations.
    pub loss: f64,
    /// Real-class argmax accuracy on the noiseless training set.
    pub train_acc: f64,
    /// Mean fake-class probability the trained model gives the fakes it
    /// was trained against this pass.
    pub mean_fake_prob: f64,
    /// Chains that failed during the end-of-pass refresh.
    pub refresh_failures: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub passes: Vec<PassMetrics>,
    pub loss_history: Vec<f64>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("pass,iter,loss,train_acc,mean_fake_prob\n");
        for p in &self.passes {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                p.pass, p.iter, p.loss, p.train_acc, p.mean_fake_prob
            );
        }
        out
    }
}

/// Extra loss terms computed on the real batch (used by score matching).
pub trait LossHook {
    fn extra(
        &mut self,
        g: &mut Graph,
        model: &ClassifierModel,
        bound: &Bound,
        real: &LabeledBatch,
        labels: &[usize],
    ) -> Result<Option<Var>>;
}

pub struct NoHook;

impl LossHook for NoHook {
    fn extra(
        &mut self,
        _: &mut Graph,
        _: &ClassifierModel,
        _: &Bound,
        _: &LabeledBatch,
        _: &[usize],
    ) -> Result<Option<Var>> {
        Ok(None)
    }
}

/// The four-term loss as a graph node; absent batches contribute nothing.
pub fn pass_loss_graph(
    g: &mut Graph,
    model: &ClassifierModel,
    bound: &Bound,
    real: &LabeledBatch,
    mixup: Option<&LabeledBatch>,
    fake: Option<&LabeledBatch>,
    fake_mixup: Option<&LabeledBatch>,
) -> Result<Var> {
    let fake_class = model.fake_class();
    for b in [fake, fake_mixup].into_iter().flatten() {
        let k = b.targets.shape()[1];
        if b.targets.data().chunks(k).any(|r| r[fake_class] != 1.0) {
            return Err(Error::invalid(
                "fake batches must be labelled with the fake class only",
            ));
        }
    }
    for b in [Some(real), mixup].into_iter().flatten() {
        let k = b.targets.shape()[1];
        if b.targets.data().chunks(k).any(|r| r[fake_class] != 0.0) {
            return Err(Error::invalid(
                "positive batches must carry no fake-class mass",
            ));
        }
    }
    let mut total = mean_ce(g, model, bound, real)?;
    for b in [mixup, fake, fake_mixup].into_iter().flatten() {
        let t = mean_ce(g, model, bound, b)?;
        total = g.add(total, t)?;
    }
    Ok(total)
}

/// Value of the four-term loss.
pub fn pass_loss(
    model: &ClassifierModel,
    real: &LabeledBatch,
    mixup: Option<&LabeledBatch>,
    fake: Option<&LabeledBatch>,
    fake_mixup: Option<&LabeledBatch>,
) -> Result<f64> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let v = pass_loss_graph(&mut g, model, &bound, real, mixup, fake, fake_mixup)?;
    Ok(g.value(v).item())
}

/// Per-coordinate box that restarted chains are drawn from: `[-1, 1]` for
/// images, the data's bounding box padded by 1 for point data.
fn restart_box(data: &Dataset) -> (Vec<f64>, Vec<f64>) {
    let d = data.sample_numel();
    match data.encoding {
        Encoding::Pixels => (vec![-1.0; d], vec![1.0; d]),
        Encoding::Points => {
            let mut lo = vec![f64::INFINITY; d];
            let mut hi = vec![f64::NEG_INFINITY; d];
            for i in 0..data.len() {
                for (k, v) in data.raw(i).iter().enumerate() {
                    lo[k] = lo[k].min(*v);
                    hi[k] = hi[k].max(*v);
                }
            }
            (
                lo.iter().map(|v| v - 1.0).collect(),
                hi.iter().map(|v| v + 1.0).collect(),
            )
        }
    }
}

pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub data: &'a Dataset,
    pub seed: u64,
    sampler: SamplerConfig,
    inputs: Tensor,
    by_class: Vec<Vec<usize>>,
    restart: (Vec<f64>, Vec<f64>),
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, data: &'a Dataset, seed: u64) -> Result<Self> {
        config.validate()?;
        if data.len() < 2 {
            return Err(Error::invalid("training needs at least 2 samples"));
        }
        let mut sampler = config.sampler.clone();
        if data.encoding == Encoding::Points {
            sampler.clip_to = None;
        }
        let by_class = (0..data.num_classes)
            .map(|c| data.indices_of_class(c))
            .collect();
        Ok(Trainer {
            inputs: data.model_inputs()?,
            restart: restart_box(data),
            config,
            data,
            seed,
            sampler,
            by_class,
        })
    }

    /// The sampler settings used for buffer refresh.
    pub fn sampler(&self) -> &SamplerConfig {
        &self.sampler
    }

    pub fn initial_state(&self, arch: Architecture) -> Result<PassState> {
        if arch.input_shape != self.data.sample_shape()
            || arch.num_real_classes != self.data.num_classes
        {
            return Err(Error::invalid(format!(
                "architecture input {:?} / {} classes does not fit dataset {:?} / {} classes",
                arch.input_shape,
                arch.num_real_classes,
                self.data.sample_shape(),
                self.data.num_classes
            )));
        }
        let model = ClassifierModel::new(arch, rng::derive_seed(self.seed, "model"))?;
        Ok(PassState::initial(model, self.data, &self.config))
    }

    fn sample_fakes<R: Rng + ?Sized>(
        &self,
        buf: &FakeBuffer,
        k: usize,
        r: &mut R,
    ) -> Result<Option<LabeledBatch>> {
        if k == 0 || buf.is_empty() {
            return Ok(None);
        }
        let idx = draw_indices(buf.len(), k, r);
        let rows: Vec<Tensor> = idx.iter().map(|&i| buf.samples[i].clone()).collect();
        Ok(Some(LabeledBatch::fake(
            Tensor::stack(&rows)?,
            self.data.num_classes + 1,
        )?))
    }

    /// One pass: `iterations_per_pass` optimizer steps, then a refresh of
    /// both buffers using the updated classifier.
    pub fn run_pass(
        &self,
        mut state: PassState,
        hook: &mut dyn LossHook,
        loss_history: &mut Vec<f64>,
    ) -> Result<(PassState, PassMetrics)> {
        let tau = state.tau;
        for buf in [&state.hard, &state.mixup] {
            if buf.producer + 1 != tau {
                return Err(Error::invalid(format!(
                    "pass {tau} would consume fakes produced at pass {}",
                    buf.producer
                )));
            }
        }
        let k = self.data.num_classes + 1;
        let c = &self.config;
        let mut r = rng::stream(self.seed, &format!("train/pass{tau}"));
        let mut pass_losses = Vec::with_capacity(c.iterations_per_pass);
        for _ in 0..c.iterations_per_pass {
            let idx = draw_indices(self.data.len(), c.batch_real, &mut r);
            let labels: Vec<usize> = idx.iter().map(|&i| self.data.labels[i]).collect();
            let real = LabeledBatch::hard(
                self.data.batch(&idx, c.preprocess_noise, &mut r)?,
                &labels,
                k,
            )?;
            let mixup = if c.batch_mixup >= 2 {
                let midx = draw_indices(self.data.len(), c.batch_mixup, &mut r);
                let mlabels: Vec<usize> = midx.iter().map(|&i| self.data.labels[i]).collect();
                let x = self.data.batch(&midx, c.preprocess_noise, &mut r)?;
                let pairs = make_mixup(&x, &mlabels, k, c.mixup_alpha, &mut r)?;
                Some(LabeledBatch::from_pairs(&pairs)?)
            } else {
                None
            };
            let fake = self.sample_fakes(&state.hard, c.batch_fake, &mut r)?;
            let fake_mixup = self.sample_fakes(&state.mixup, c.batch_fake_mixup, &mut r)?;

            let mut g = Graph::new();
            let bound = state.model.bind(&mut g, true);
            let mut loss = pass_loss_graph(
                &mut g,
                &state.model,
                &bound,
                &real,
                mixup.as_ref(),
                fake.as_ref(),
                fake_mixup.as_ref(),
            )?;
            if let Some(extra) = hook.extra(&mut g, &state.model, &bound, &real, &labels)? {
                loss = g.add(loss, extra)?;
            }
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::invalid(format!(
                    "pass {tau}: loss became non-finite at iteration {}",
                    state.iteration
                )));
            }
            g.backward(loss)?;
            let grads: Vec<Option<&Tensor>> = bound.vars.iter().map(|v| g.grad(*v)).collect();
            let lr = c.lr_at(state.iteration);
            state.adam.step(state.model.params_mut(), &grads, lr);
            state.iteration += 1;
            pass_losses.push(value);
            loss_history.push(value);
        }

        let mean_fake_prob = self.mean_fake_prob(&state)?;
        let train_acc = self.train_accuracy(&state.model)?;
        let (hard, hard_fail) = self.refresh(&state, false)?;
        let (mixup, mix_fail) = self.refresh(&state, true)?;
        let metrics = PassMetrics {
            pass: tau,
            iter: state.iteration,
            loss: if pass_losses.is_empty() {
                f64::NAN
            } else {
                pass_losses.iter().sum::<f64>() / pass_losses.len() as f64
            },
            train_acc,
            mean_fake_prob,
            refresh_failures: hard_fail + mix_fail,
        };
        log::info!(
            "pass {tau}: loss {:.4} acc {:.4} fake-prob {:.4}",
            metrics.loss,
            metrics.train_acc,
            metrics.mean_fake_prob
        );
        state.hard = hard;
        state.mixup = mixup;
        state.tau += 1;
        Ok((state, metrics))
    }

    pub fn train_accuracy(&self, model: &ClassifierModel) -> Result<f64> {
        let pred = model.predict_real(&self.inputs)?;
        let hits = pred
            .iter()
            .zip(&self.data.labels)
            .filter(|(p, l)| p == l)
            .count();
        Ok(hits as f64 / pred.len() as f64)
    }

    fn mean_fake_prob(&self, state: &PassState) -> Result<f64> {
        let all: Vec<Tensor> = state
            .hard
            .samples
            .iter()
            .chain(&state.mixup.samples)
            .cloned()
            .collect();
        if all.is_empty() {
            return Ok(0.0);
        }
        let p = state.model.probabilities(&Tensor::stack(&all)?)?;
        let k = state.model.arch().num_outputs();
        let f = state.model.fake_class();
        Ok(p.data().chunks(k).map(|r| r[f]).sum::<f64>() / all.len() as f64)
    }

    fn gram_for(
        &self,
        model: &ClassifierModel,
        layers: &[usize],
        class: usize,
        r: &mut impl Rng,
    ) -> Result<Option<GramTarget>> {
        if layers.is_empty() || self.by_class[class].is_empty() {
            return Ok(None);
        }
        let pool = &self.by_class[class];
        let i = pool[r.random_range(0..pool.len())];
        let source = GramSource {
            images: vec![i],
            classes: vec![class],
            lambda: None,
        };
        Ok(Some(GramTarget::from_image(
            model,
            &self.inputs.row(i),
            layers,
            source,
        )?))
    }

    fn uniform_start(&self, r: &mut impl Rng) -> Tensor {
        let (lo, hi) = &self.restart;
        let data = lo
            .iter()
            .zip(hi)
            .map(|(a, b)| r.random_range(*a..*b))
            .collect();
        Tensor::new(self.data.sample_shape().to_vec(), data).expect("sample shape")
    }

    /// Builds and runs the refresh chains for one buffer. Chain `i` reuses
    /// slot `i`'s previous end state unless it restarts from uniform noise.
    fn refresh(&self, state: &PassState, mixed: bool) -> Result<(FakeBuffer, usize)> {
        let tau = state.tau;
        let prev = if mixed { &state.mixup } else { &state.hard };
        let model = &state.model;
        let layers = self.sampler.layers_for(model)?;
        let n_classes = self.data.num_classes;
        let k = n_classes + 1;
        let n = self.config.buffer_len();
        let kind = if mixed { "mixup" } else { "hard" };
        let mut chains = Vec::with_capacity(n);
        for i in 0..n {
            let mut r = rng::stream(self.seed, &format!("refresh/{tau}/{kind}/{i}"));
            let restart = r.random::<f64>() < self.config.chain_restart_prob;
            let start = match prev.samples.get(i) {
                Some(x) if !restart => x.clone(),
                _ => self.uniform_start(&mut r),
            };
            let (target, gram) = if mixed {
                let c1 = r.random_range(0..n_classes);
                let c2 = if n_classes > 1 {
                    (c1 + r.random_range(1..n_classes)) % n_classes
                } else {
                    c1
                };
                let lambda = sample_beta(self.config.mixup_alpha, &mut r)?;
                let t: Vec<f64> = one_hot(c1, k)
                    .iter()
                    .zip(one_hot(c2, k))
                    .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
                    .collect();
                let gram = match (
                    self.gram_for(model, &layers, c1, &mut r)?,
                    self.gram_for(model, &layers, c2, &mut r)?,
                ) {
                    (Some(a), Some(b)) => Some(GramTarget::mix(&a, &b, lambda)?),
                    _ => None,
                };
                (Target::Soft(t), gram)
            } else {
                let class = i % n_classes;
                (
                    Target::Class(class),
                    self.gram_for(model, &layers, class, &mut r)?,
                )
            };
            chains.push(Chain::new(start, target, gram, r));
        }
        let mut failures = 0;
        for group in chains.chunks_mut(CHAIN_BATCH) {
            failures += run_chains(model, group, &self.sampler)?;
        }
        if failures > 0 {
            log::warn!(
                "pass {tau}: {failures} {kind} chains failed; {kind} buffer refresh aborted"
            );
            return Ok((FakeBuffer::empty(tau), failures));
        }
        Ok((
            FakeBuffer {
                conditions: chains.iter().map(|c| c.target.clone()).collect(),
                samples: chains.into_iter().map(|c| c.x).collect(),
                producer: tau,
            },
            0,
        ))
    }

    /// All passes. `on_pass` sees the state after each pass (the model is
    /// θ^τ and the buffers hold its syntheses) together with its metrics.
    pub fn train_with(
        &self,
        arch: Architecture,
        hook: &mut dyn LossHook,
        mut on_pass: impl FnMut(&PassState, &PassMetrics) -> Result<()>,
    ) -> Result<(PassState, TrainLog)> {
        let mut state = self.initial_state(arch)?;
        let mut log = TrainLog::default();
        for _ in 0..self.config.passes {
            let (next, metrics) = self.run_pass(state, hook, &mut log.loss_history)?;
            on_pass(&next, &metrics)?;
            log.passes.push(metrics);
            state = next;
        }
        Ok((state, log))
    }
}

/// Trains from scratch and returns the final classifier and its log.
pub fn train(
    config: &TrainConfig,
    data: &Dataset,
    arch: Architecture,
    seed: u64,
    on_pass: impl FnMut(&PassState, &PassMetrics) -> Result<()>,
) -> Result<(ClassifierModel, TrainLog)> {
    let trainer = Trainer::new(config.clone(), data, seed)?;
    let (state, log) = trainer.train_with(arch, &mut NoHook, on_pass)?;
    Ok((state.model, log))
}

/// The same loop with both mixup terms removed.
pub fn erm_config(config: &TrainConfig) -> TrainConfig {
    TrainConfig {
        batch_mixup: 0,
        batch_fake_mixup: 0,
        ..config.clone()
    }
}

pub fn ablate_erm(
    config: &TrainConfig,
    data: &Dataset,
    arch: Architecture,
    seed: u64,
) -> Result<(ClassifierModel, TrainLog)> {
    train(&erm_config(config), data, arch, seed, |_, _| Ok(()))
}
