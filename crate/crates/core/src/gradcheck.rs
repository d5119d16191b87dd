//! Central finite-difference gradient checking, plus a generator of random
//! composite graphs over the full op set. The oracle only ever evaluates
//! forward values; it never touches the backward sweep it is checking.

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::graph::{Graph, Var};
use crate::rng::{self, StreamRng};
use crate::tensor::{Tensor, TensorError};

pub type Builder<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var, TensorError> + 'a;

fn eval(build: &Builder<'_>, inputs: &[Tensor]) -> Result<f64, TensorError> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    Ok(g.value(out).sum())
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate of every input.
pub fn finite_difference(
    build: &Builder<'_>,
    inputs: &[Tensor],
    h: f64,
) -> Result<Vec<Tensor>, TensorError> {
    let mut out = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[k].shape());
        for i in 0..inputs[k].numel() {
            let mut probe = inputs.to_vec();
            probe[k].data_mut()[i] += h;
            let plus = eval(build, &probe)?;
            probe[k].data_mut()[i] -= 2.0 * h;
            let minus = eval(build, &probe)?;
            grad.data_mut()[i] = (plus - minus) / (2.0 * h);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Analytic gradients from one backward sweep.
pub fn analytic(build: &Builder<'_>, inputs: &[Tensor]) -> Result<Vec<Tensor>, TensorError> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    g.backward(out)?;
    Ok(vars
        .iter()
        .map(|v| {
            g.grad(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(g.shape(*v)))
        })
        .collect())
}

/// `|a - n| / max(|a|, |n|, floor)`, maximised over all coordinates.
pub fn max_relative_error(a: &[Tensor], n: &[Tensor], floor: f64) -> f64 {
    a.iter()
        .zip(n)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()))
        .map(|(p, q)| (p - q).abs() / p.abs().max(q.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

/// Compares backward against central differences at step `h`.
/// Relative error uses a floor of 1e-3 so that near-zero gradients are
/// compared absolutely.
pub fn check(build: &Builder<'_>, inputs: &[Tensor], h: f64) -> Result<GradCheck, TensorError> {
    let analytic = analytic(build, inputs)?;
    let numeric = finite_difference(build, inputs, h)?;
    Ok(GradCheck {
        max_rel_err: max_relative_error(&analytic, &numeric, 1e-3),
        analytic,
        numeric,
    })
}

/// One step of a random program acting on a matrix-valued node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Step {
    AddConst,
    SubFromConst,
    MulSelfTanh,
    ScalarMul,
    MatMulRight,
    MatMulLeft,
    Conv2d,
    ConvTranspose2d,
    ChannelBias,
    Relu,
    Sigmoid,
    Tanh,
    Softmax,
    LogSoftmax,
    LogSumExpColumn,
    Square,
    Transpose,
    ConcatTanh,
    Slice,
    AddBias,
    ExpHalf,
    LnSigmoid,
    Reshape,
    Filterbank,
}

pub const ALL_STEPS: [Step; 24] = [
    Step::AddConst,
    Step::SubFromConst,
    Step::MulSelfTanh,
    Step::ScalarMul,
    Step::MatMulRight,
    Step::MatMulLeft,
    Step::Conv2d,
    Step::ConvTranspose2d,
    Step::ChannelBias,
    Step::Relu,
    Step::Sigmoid,
    Step::Tanh,
    Step::Softmax,
    Step::LogSoftmax,
    Step::LogSumExpColumn,
    Step::Square,
    Step::Transpose,
    Step::ConcatTanh,
    Step::Slice,
    Step::AddBias,
    Step::ExpHalf,
    Step::LnSigmoid,
    Step::Reshape,
    Step::Filterbank,
];

/// Final reduction of a random program to a scalar.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    LogSumExpThenSum,
    CrossEntropy,
    WeightedSum,
}

/// A random program: input matrix shape, steps with their constant operands,
/// and a reduction. Deterministic in its seed.
#[derive(Clone, Debug)]
pub struct Composite {
    pub input_shape: Vec<usize>,
    pub steps: Vec<Step>,
    pub reduce: Reduce,
    seed: u64,
}

const MAX_SIDE: usize = 6;

impl Composite {
    pub fn random(seed: u64) -> Self {
        let mut r = rng::stream(seed, "composite/plan");
        let depth = r.random_range(2..=6);
        let steps = (0..depth)
            .map(|_| *ALL_STEPS.choose(&mut r).expect("non-empty"))
            .collect();
        let reduce = *[
            Reduce::Sum,
            Reduce::Mean,
            Reduce::LogSumExpThenSum,
            Reduce::CrossEntropy,
            Reduce::WeightedSum,
        ]
        .choose(&mut r)
        .expect("non-empty");
        Composite {
            input_shape: vec![r.random_range(2..=4), r.random_range(2..=5)],
            steps,
            reduce,
            seed,
        }
    }

    pub fn random_input(&self) -> Tensor {
        Tensor::uniform(
            &self.input_shape,
            -1.0,
            1.0,
            &mut rng::stream(self.seed, "composite/input"),
        )
    }

    /// Builds the program on top of `x`. Constant operands are redrawn from
    /// the same seed on every call, so repeated builds agree.
    pub fn build(&self, g: &mut Graph, x: Var) -> Result<Var, TensorError> {
        let mut r = rng::stream(self.seed, "composite/consts");
        let mut h = x;
        for step in &self.steps {
            h = apply(g, h, *step, &mut r)?;
            h = shrink(g, h)?;
        }
        let out = match self.reduce {
            Reduce::Sum => g.sum(h),
            Reduce::Mean => g.mean(h),
            Reduce::LogSumExpThenSum => {
                let l = g.logsumexp(h, 1)?;
                g.sum(l)
            }
            Reduce::CrossEntropy => {
                let s = g.shape(h).to_vec();
                let raw = Tensor::uniform(&s, 0.1, 1.0, &mut r);
                let mut t = raw.clone();
                for row in t.data_mut().chunks_mut(s[1]) {
                    let z: f64 = row.iter().sum();
                    row.iter_mut().for_each(|v| *v /= z);
                }
                let tv = g.constant(t);
                let ce = g.cross_entropy_soft(h, tv)?;
                g.mean(ce)
            }
            Reduce::WeightedSum => {
                let w = g.constant(Tensor::uniform(g.shape(h), -1.0, 1.0, &mut r));
                let p = g.mul(h, w)?;
                g.sum(p)
            }
        };
        Ok(out)
    }
}

fn shrink(g: &mut Graph, h: Var) -> Result<Var, TensorError> {
    let s = g.shape(h).to_vec();
    let mut h = h;
    if s[0] > MAX_SIDE {
        h = g.slice(h, 0, 0, MAX_SIDE)?;
    }
    if s[1] > MAX_SIDE {
        h = g.slice(h, 1, 0, MAX_SIDE)?;
    }
    Ok(h)
}

fn konst(g: &mut Graph, shape: &[usize], r: &mut StreamRng) -> Var {
    g.constant(Tensor::uniform(shape, -1.0, 1.0, r))
}

fn apply(g: &mut Graph, h: Var, step: Step, r: &mut StreamRng) -> Result<Var, TensorError> {
    let s = g.shape(h).to_vec();
    let (m, n) = (s[0], s[1]);
    Ok(match step {
        Step::AddConst => {
            let c = konst(g, &s, r);
            g.add(h, c)?
        }
        Step::SubFromConst => {
            let c = konst(g, &s, r);
            g.sub(c, h)?
        }
        Step::MulSelfTanh => {
            let t = g.tanh(h);
            g.mul(h, t)?
        }
        Step::ScalarMul => g.scalar_mul(h, r.random_range(-2.0..2.0)),
        Step::MatMulRight => {
            let k = r.random_range(2..=4);
            let w = konst(g, &[n, k], r);
            g.matmul(h, w)?
        }
        Step::MatMulLeft => {
            let k = r.random_range(2..=4);
            let w = konst(g, &[k, m], r);
            g.matmul(w, h)?
        }
        Step::Conv2d => {
            let x4 = g.reshape(h, &[1, 1, m, n])?;
            let stride = r.random_range(1..=2);
            let w = konst(g, &[2, 1, 3, 3], r);
            let y = g.conv2d(x4, w, stride, 1)?;
            let ys = g.shape(y).to_vec();
            g.reshape(y, &[ys[1] * ys[2], ys[3]])?
        }
        Step::ConvTranspose2d => {
            let x4 = g.reshape(h, &[1, 1, m, n])?;
            let w = konst(g, &[1, 2, 4, 4], r);
            let y = g.conv_transpose2d(x4, w, 2, 1)?;
            let ys = g.shape(y).to_vec();
            g.reshape(y, &[ys[1] * ys[2], ys[3]])?
        }
        Step::ChannelBias => {
            let x4 = g.reshape(h, &[1, m, n, 1])?;
            let b = konst(g, &[m], r);
            let y = g.add_channel_bias(x4, b)?;
            g.reshape(y, &[m, n])?
        }
        Step::Relu => g.relu(h),
        Step::Sigmoid => g.sigmoid(h),
        Step::Tanh => g.tanh(h),
        Step::Softmax => g.softmax(h, r.random_range(0..2))?,
        Step::LogSoftmax => g.log_softmax(h, r.random_range(0..2))?,
        Step::LogSumExpColumn => {
            let l = g.logsumexp(h, 1)?;
            let col = g.reshape(l, &[m, 1])?;
            let t = g.tanh(h);
            g.concat(&[col, t], 1)?
        }
        Step::Square => g.square(h),
        Step::Transpose => g.transpose(h)?,
        Step::ConcatTanh => {
            let t = g.tanh(h);
            g.concat(&[h, t], r.random_range(0..2))?
        }
        Step::Slice => {
            let axis = r.random_range(0..2);
            let len = s[axis];
            if len < 2 {
                h
            } else {
                let start = r.random_range(0..len - 1);
                g.slice(h, axis, start, len - start)?
            }
        }
        Step::AddBias => {
            let b = konst(g, &[n], r);
            g.add_bias(h, b)?
        }
        Step::ExpHalf => {
            let half = g.scalar_mul(h, 0.5);
            g.exp(half)
        }
        Step::LnSigmoid => {
            let sg = g.sigmoid(h);
            let shifted = g.add_scalar(sg, 0.1);
            g.ln(shifted)?
        }
        Step::Reshape => g.reshape(h, &[n, m])?,
        Step::Filterbank => {
            let flat = g.reshape(h, &[m * n])?;
            let three = if m * n >= 3 {
                g.slice(flat, 0, 0, 3)?
            } else {
                let c = konst(g, &[3 - m * n], r);
                g.concat(&[flat, c], 0)?
            };
            let p = g.scalar_mul(three, 0.5);
            g.filterbank(p, 3, 5)?
        }
    })
}

/// Builds `composite` and checks its input gradient at step `h`.
pub fn check_composite(c: &Composite, h: f64) -> Result<GradCheck, TensorError> {
    let build = |g: &mut Graph, v: &[Var]| c.build(g, v[0]);
    check(&build, &[c.random_input()], h)
}
