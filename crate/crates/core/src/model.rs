//! Classifier networks over `C` real classes plus one fake class.
//!
//! The fake class is the last logit (index `C`). Models carry no
//! normalisation layers, so a sample's output never depends on which other
//! samples share its batch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
        relu: bool,
    },
    /// Zero-padded convolution with per-channel bias, always followed by relu.
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Flatten,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct Architecture {
    /// Per-sample input shape, e.g. `[2]` or `[1, 8, 8]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub num_real_classes: usize,
    /// Linear head from the penultimate features back to input space.
    #[serde(default)]
    pub score_head: bool,
}

impl Architecture {
    /// Fully connected `input -> hidden.. -> C+1` with relu between layers.
    pub fn mlp(input_dim: usize, hidden: &[usize], num_real_classes: usize) -> Self {
        let mut layers = Vec::new();
        let mut width = input_dim;
        for &h in hidden {
            layers.push(LayerSpec::Dense {
                inputs: width,
                outputs: h,
                relu: true,
            });
            width = h;
        }
        layers.push(LayerSpec::Dense {
            inputs: width,
            outputs: num_real_classes + 1,
            relu: false,
        });
        Architecture {
            input_shape: vec![input_dim],
            layers,
            num_real_classes,
            score_head: false,
        }
    }

    /// Three 3x3 conv blocks (8, 16, 32 filters; the last two downsample by 2)
    /// followed by a 64-wide dense layer and the `C+1` logit layer.
    pub fn cnn(channels: usize, side: usize, num_real_classes: usize) -> Self {
        let conv = |i, o, s| LayerSpec::Conv {
            in_channels: i,
            out_channels: o,
            kernel: 3,
            stride: s,
            padding: 1,
        };
        let reduced = side.div_ceil(2).div_ceil(2);
        Architecture {
            input_shape: vec![channels, side, side],
            layers: vec![
                conv(channels, 8, 1),
                conv(8, 16, 2),
                conv(16, 32, 2),
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    inputs: 32 * reduced * reduced,
                    outputs: 64,
                    relu: true,
                },
                LayerSpec::Dense {
                    inputs: 64,
                    outputs: num_real_classes + 1,
                    relu: false,
                },
            ],
            num_real_classes,
            score_head: false,
        }
    }

    pub fn with_score_head(mut self) -> Self {
        self.score_head = true;
        self
    }

    pub fn num_outputs(&self) -> usize {
        self.num_real_classes + 1
    }

    pub fn fake_class(&self) -> usize {
        self.num_real_classes
    }

    pub fn input_numel(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Width of the activation feeding the final dense layer.
    pub fn penultimate_width(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Dense { inputs, .. }) => *inputs,
            _ => 0,
        }
    }

    pub fn conv_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::Conv { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    /// The two deepest conv blocks (fewer if the model has fewer).
    pub fn default_gram_layers(&self) -> Vec<usize> {
        let convs = self.conv_layers();
        convs[convs.len().saturating_sub(2)..].to_vec()
    }

    /// Per-sample output shape of every layer.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match layer {
                LayerSpec::Dense {
                    inputs, outputs, ..
                } => {
                    if shape != [*inputs] {
                        return Err(Error::invalid(format!(
                            "layer {i}: dense expects [{inputs}], got {shape:?}"
                        )));
                    }
                    vec![*outputs]
                }
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    if shape.len() != 3 || shape[0] != *in_channels || *stride == 0 {
                        return Err(Error::invalid(format!(
                            "layer {i}: conv expects [{in_channels}, H, W], got {shape:?}"
                        )));
                    }
                    let out = |s: usize| {
                        (s + 2 * padding)
                            .checked_sub(*kernel)
                            .map(|v| v / stride + 1)
                    };
                    match (out(shape[1]), out(shape[2])) {
                        (Some(h), Some(w)) => vec![*out_channels, h, w],
                        _ => {
                            return Err(Error::invalid(format!(
                                "layer {i}: kernel larger than input"
                            )))
                        }
                    }
                }
                LayerSpec::Flatten => vec![shape.iter().product()],
            };
            out.push(shape.clone());
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_real_classes == 0 || self.input_shape.is_empty() {
            return Err(Error::invalid(
                "architecture needs classes and an input shape",
            ));
        }
        let shapes = self.layer_shapes()?;
        match self.layers.last() {
            Some(LayerSpec::Dense {
                outputs,
                relu: false,
                ..
            }) if *outputs == self.num_outputs() => {}
            _ => {
                return Err(Error::invalid(format!(
                    "final layer must be a linear dense layer with {} outputs",
                    self.num_outputs()
                )))
            }
        }
        debug_assert_eq!(shapes.last(), Some(&vec![self.num_outputs()]));
        Ok(())
    }

    /// `(name, shape, fan_in, fan_out)` for every parameter, in binding order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>, usize, usize)> {
        let mut specs = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::Dense {
                    inputs, outputs, ..
                } => {
                    specs.push((
                        format!("layer{i}.weight"),
                        vec![*inputs, *outputs],
                        *inputs,
                        *outputs,
                    ));
                    specs.push((format!("layer{i}.bias"), vec![*outputs], 0, 0));
                }
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    let k2 = kernel * kernel;
                    specs.push((
                        format!("layer{i}.weight"),
                        vec![*out_channels, *in_channels, *kernel, *kernel],
                        in_channels * k2,
                        out_channels * k2,
                    ));
                    specs.push((format!("layer{i}.bias"), vec![*out_channels], 0, 0));
                }
                LayerSpec::Flatten => {}
            }
        }
        if self.score_head {
            let (d, n) = (self.penultimate_width(), self.input_numel());
            specs.push(("score.weight".into(), vec![d, n], d, n));
            specs.push(("score.bias".into(), vec![n], 0, 0));
        }
        specs
    }

    pub fn to_descriptor(&self) -> String {
        serde_json::to_string(self).expect("architecture serialises")
    }

    pub fn from_descriptor(text: &str) -> Result<Self> {
        let arch: Architecture = serde_json::from_str(text)
            .map_err(|e| Error::format(format!("architecture descriptor: {e}")))?;
        arch.validate()?;
        Ok(arch)
    }
}

/// Uniform Glorot initialisation, `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot<R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(shape, -a, a, rng)
}

/// Parameters bound into a graph for one forward pass.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
}

/// Outputs of a batched forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// `[B, C+1]` raw logits.
    pub logits: Var,
    /// Post-relu conv outputs `[B, N, H, W]`, keyed by layer index.
    pub conv_maps: Vec<(usize, Var)>,
    /// `[B, d]` activation feeding the last dense layer.
    pub penultimate: Var,
    /// `[B, input_numel]` when the model has a score head.
    pub score: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierModel {
    arch: Architecture,
    names: Vec<String>,
    params: Vec<Tensor>,
}

impl ClassifierModel {
    /// Seeded Glorot weights, zero biases. The score head draws from its own
    /// stream, so the trunk is identical with and without it.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut trunk_rng = rng::stream(seed, "init/trunk");
        let mut head_rng = rng::stream(seed, "init/score");
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape, fan_in, fan_out) in arch.param_specs() {
            let r = if name.starts_with("score.") {
                &mut head_rng
            } else {
                &mut trunk_rng
            };
            let t = if fan_in == 0 {
                Tensor::zeros(&shape)
            } else {
                glorot(&shape, fan_in, fan_out, r)
            };
            names.push(name);
            params.push(t);
        }
        Ok(ClassifierModel {
            arch,
            names,
            params,
        })
    }

    /// All parameters zero.
    pub fn zeroed(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let (names, params) = arch
            .param_specs()
            .into_iter()
            .map(|(n, s, _, _)| (n, Tensor::zeros(&s)))
            .unzip();
        Ok(ClassifierModel {
            arch,
            names,
            params,
        })
    }

    pub fn from_parts(arch: Architecture, named: Vec<(String, Tensor)>) -> Result<Self> {
        arch.validate()?;
        let specs = arch.param_specs();
        if specs.len() != named.len() {
            return Err(Error::format(format!(
                "expected {} parameter tensors, got {}",
                specs.len(),
                named.len()
            )));
        }
        for ((name, shape, ..), (n, t)) in specs.iter().zip(&named) {
            if name != n || shape.as_slice() != t.shape() {
                return Err(Error::format(format!(
                    "parameter {n} {:?} does not match {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        let (names, params) = named.into_iter().unzip();
        Ok(ClassifierModel {
            arch,
            names,
            params,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn num_real_classes(&self) -> usize {
        self.arch.num_real_classes
    }

    pub fn fake_class(&self) -> usize {
        self.arch.fake_class()
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.params[i])
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    /// Binds parameters as graph leaves; `trainable == false` freezes them.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| g.leaf(p.clone(), trainable))
                .collect(),
        }
    }

    /// Adds a leading batch axis to a single sample; batches pass through.
    pub fn as_batch(&self, x: &Tensor) -> Result<Tensor> {
        let shape = x.shape();
        if shape == self.arch.input_shape.as_slice() {
            let mut s = vec![1];
            s.extend_from_slice(shape);
            Ok(x.reshape(&s)?)
        } else if shape.len() == self.arch.input_shape.len() + 1
            && shape[1..] == self.arch.input_shape[..]
        {
            Ok(x.clone())
        } else {
            Err(Error::invalid(format!(
                "input shape {shape:?} does not match model input {:?}",
                self.arch.input_shape
            )))
        }
    }

    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: Var) -> Result<Forward> {
        let xs = g.shape(x).to_vec();
        if xs.len() != self.arch.input_shape.len() + 1 || xs[1..] != self.arch.input_shape[..] {
            return Err(Error::invalid(format!(
                "input shape {xs:?} does not match model input [B, {:?}]",
                self.arch.input_shape
            )));
        }
        let batch = xs[0];
        let mut h = x;
        let mut conv_maps = Vec::new();
        let mut penultimate = x;
        let mut p = 0;
        let last = self.arch.layers.len() - 1;
        for (i, layer) in self.arch.layers.iter().enumerate() {
            match layer {
                LayerSpec::Dense { relu, .. } => {
                    if i == last {
                        penultimate = h;
                    }
                    let z = g.matmul(h, bound.vars[p])?;
                    let z = g.add_bias(z, bound.vars[p + 1])?;
                    p += 2;
                    h = if *relu { g.relu(z) } else { z };
                }
                LayerSpec::Conv {
                    stride, padding, ..
                } => {
                    let z = g.conv2d(h, bound.vars[p], *stride, *padding)?;
                    let z = g.add_channel_bias(z, bound.vars[p + 1])?;
                    p += 2;
                    h = g.relu(z);
                    conv_maps.push((i, h));
                }
                LayerSpec::Flatten => {
                    let n = g.value(h).numel() / batch;
                    h = g.reshape(h, &[batch, n])?;
                }
            }
        }
        let score = if self.arch.score_head {
            let s = g.matmul(penultimate, bound.vars[p])?;
            Some(g.add_bias(s, bound.vars[p + 1])?)
        } else {
            None
        };
        Ok(Forward {
            logits: h,
            conv_maps,
            penultimate,
            score,
        })
    }

    fn eval<T>(&self, x: &Tensor, f: impl FnOnce(&mut Graph, &Forward) -> Result<T>) -> Result<T> {
        let xb = self.as_batch(x)?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let xv = g.constant(xb);
        let fwd = self.forward(&mut g, &bound, xv)?;
        f(&mut g, &fwd)
    }

    /// Raw `[B, C+1]` logits; softmax is not applied.
    pub fn forward_logits(&self, x: &Tensor) -> Result<Tensor> {
        self.eval(x, |g, f| Ok(g.value(f.logits).clone()))
    }

    /// `[B, C+1]` class probabilities.
    pub fn probabilities(&self, x: &Tensor) -> Result<Tensor> {
        self.eval(x, |g, f| {
            let p = g.softmax(f.logits, 1)?;
            Ok(g.value(p).clone())
        })
    }

    /// Feature maps of the selected conv layers for one sample, each
    /// flattened to `[N_L, H_L * W_L]` (row `i` = filter `i` over positions).
    pub fn feature_maps(&self, x: &Tensor, layers: &[usize]) -> Result<Vec<Tensor>> {
        self.check_gram_layers(layers)?;
        let xb = self.as_batch(x)?;
        if xb.shape()[0] != 1 {
            return Err(Error::invalid("feature_maps takes a single sample"));
        }
        self.eval(&xb, |g, f| {
            layers
                .iter()
                .map(|l| {
                    let (_, v) = f.conv_maps.iter().find(|(i, _)| i == l).expect("checked");
                    let s = g.shape(*v).to_vec();
                    Ok(g.value(*v).reshape(&[s[1], s[2] * s[3]])?)
                })
                .collect()
        })
    }

    pub fn check_gram_layers(&self, layers: &[usize]) -> Result<()> {
        for &l in layers {
            match self.arch.layers.get(l) {
                Some(LayerSpec::Conv { .. }) => {}
                Some(other) => {
                    return Err(Error::invalid(format!(
                        "layer {l} is {other:?}; Gram statistics need a conv layer"
                    )))
                }
                None => return Err(Error::invalid(format!("layer {l} does not exist"))),
            }
        }
        Ok(())
    }

    /// `sum_c t_c * log softmax(logits)_c` for every sample in the batch.
    pub fn log_cond(&self, x: &Tensor, target: &[f64]) -> Result<Vec<f64>> {
        validate_distribution(target, self.arch.num_outputs())?;
        self.eval(x, |g, f| {
            let b = g.shape(f.logits)[0];
            let t = repeat_rows(target, b);
            let tv = g.constant(t);
            let ce = g.cross_entropy_soft(f.logits, tv)?;
            Ok(g.value(ce).data().iter().map(|v| -v).collect())
        })
    }

    /// `logits[c]`, the joint log-density up to the shared log-partition.
    pub fn unnorm_log_joint(&self, x: &Tensor, class: usize) -> Result<Vec<f64>> {
        let k = self.arch.num_outputs();
        if class >= k {
            return Err(Error::invalid(format!(
                "class {class} out of range (C+1 = {k})"
            )));
        }
        let logits = self.forward_logits(x)?;
        Ok(logits.data().chunks(k).map(|r| r[class]).collect())
    }

    /// `logsumexp(logits)`, the marginal log-density up to the log-partition.
    pub fn unnorm_log_marginal(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.eval(x, |g, f| {
            let l = g.logsumexp(f.logits, 1)?;
            Ok(g.value(l).data().to_vec())
        })
    }

    /// Score-head output, shaped like the input batch.
    pub fn score(&self, x: &Tensor) -> Result<Tensor> {
        if !self.arch.score_head {
            return Err(Error::invalid("model has no score head"));
        }
        let xb = self.as_batch(x)?;
        let shape = xb.shape().to_vec();
        self.eval(&xb, |g, f| {
            Ok(g.value(f.score.expect("score head")).reshape(&shape)?)
        })
    }

    /// `[B, d]` activations feeding the final dense layer.
    pub fn penultimate_features(&self, x: &Tensor) -> Result<Tensor> {
        self.eval(x, |g, f| Ok(g.value(f.penultimate).clone()))
    }

    /// Argmax over the `C` real classes, one per sample.
    pub fn predict_real(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.forward_logits(x)?;
        let k = self.arch.num_outputs();
        let c = self.arch.num_real_classes;
        Ok(logits.data().chunks(k).map(|r| argmax(&r[..c])).collect())
    }

    /// Argmax over all `C+1` outputs, one per sample.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.forward_logits(x)?;
        Ok(logits
            .data()
            .chunks(self.arch.num_outputs())
            .map(argmax)
            .collect())
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn one_hot(class: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; k];
    v[class] = 1.0;
    v
}

pub(crate) fn repeat_rows(row: &[f64], n: usize) -> Tensor {
    let data = (0..n).flat_map(|_| row.iter().copied()).collect();
    Tensor::new(vec![n, row.len()], data).expect("non-empty row")
}

/// A probability vector of length `k`: nonnegative, summing to 1 within 1e-9.
pub fn validate_distribution(t: &[f64], k: usize) -> Result<()> {
    if t.len() != k {
        return Err(Error::invalid(format!(
            "target has {} entries, model has {k} outputs",
            t.len()
        )));
    }
    if t.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::invalid(
            "target entries must be finite and nonnegative",
        ));
    }
    let s: f64 = t.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("target sums to {s}, not 1")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn mlp_shapes_and_names() {
        let m = ClassifierModel::new(Architecture::mlp(2, &[64, 64], 3), 1).unwrap();
        assert_eq!(m.param_names().len(), 6);
        let mut names = m.param_names().to_vec();
        names.dedup();
        assert_eq!(names.len(), 6);
        let x = Tensor::randn(&[5, 2], 1.0, &mut stream(0, "x"));
        let logits = m.forward_logits(&x).unwrap();
        assert_eq!(logits.shape(), &[5, 4]);
        assert!(logits.is_finite());
        assert_eq!(m.penultimate_features(&x).unwrap().shape(), &[5, 64]);
    }

    #[test]
    fn zero_weights_give_uniform_softmax() {
        let m = ClassifierModel::zeroed(Architecture::mlp(2, &[8], 2)).unwrap();
        let p = m.probabilities(&Tensor::vector(vec![0.3, -2.0])).unwrap();
        for v in p.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn cnn_feature_map_shapes() {
        let arch = Architecture::cnn(1, 16, 3);
        assert_eq!(arch.default_gram_layers(), vec![1, 2]);
        let m = ClassifierModel::new(arch, 3).unwrap();
        let x = Tensor::uniform(&[1, 16, 16], -1.0, 1.0, &mut stream(0, "x"));
        let maps = m.feature_maps(&x, &[0, 1, 2]).unwrap();
        assert_eq!(maps[0].shape(), &[8, 256]);
        assert_eq!(maps[1].shape(), &[16, 64]);
        assert_eq!(maps[2].shape(), &[32, 16]);
        assert!(m.feature_maps(&x, &[4]).is_err());
        assert!(m.feature_maps(&x, &[3]).is_err());
    }

    #[test]
    fn feature_maps_match_direct_convolution() {
        // 1-filter 3x3 conv, padding 1, relu, on a 3x3 input.
        let arch = Architecture {
            input_shape: vec![1, 3, 3],
            layers: vec![
                LayerSpec::Conv {
                    in_channels: 1,
                    out_channels: 1,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    inputs: 9,
                    outputs: 2,
                    relu: false,
                },
            ],
            num_real_classes: 1,
            score_head: false,
        };
        let mut m = ClassifierModel::new(arch, 0).unwrap();
        let k = [0.5, -1.0, 0.25, 2.0, 1.0, -0.5, 0.0, 0.75, -0.25];
        *m.param_mut("layer0.weight").unwrap() = Tensor::new(vec![1, 1, 3, 3], k.to_vec()).unwrap();
        *m.param_mut("layer0.bias").unwrap() = Tensor::vector(vec![0.1]);
        let img = [1.0, -2.0, 3.0, 0.5, 0.0, -1.0, 2.0, 1.5, -0.5];
        let x = Tensor::new(vec![1, 3, 3], img.to_vec()).unwrap();
        let f = m.feature_maps(&x, &[0]).unwrap();
        for i in 0..3i32 {
            for j in 0..3i32 {
                let mut s = 0.1;
                for u in 0..3i32 {
                    for v in 0..3i32 {
                        let (r, c) = (i + u - 1, j + v - 1);
                        if (0..3).contains(&r) && (0..3).contains(&c) {
                            s += k[(u * 3 + v) as usize] * img[(r * 3 + c) as usize];
                        }
                    }
                }
                let got = f[0].data()[(i * 3 + j) as usize];
                assert!((got - s.max(0.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_kernel_on_constant_input_is_constant_row() {
        let arch = Architecture {
            input_shape: vec![1, 4, 4],
            layers: vec![
                LayerSpec::Conv {
                    in_channels: 1,
                    out_channels: 1,
                    kernel: 1,
                    stride: 1,
                    padding: 0,
                },
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    inputs: 16,
                    outputs: 2,
                    relu: false,
                },
            ],
            num_real_classes: 1,
            score_head: false,
        };
        let mut m = ClassifierModel::zeroed(arch).unwrap();
        *m.param_mut("layer0.weight").unwrap() = Tensor::ones(&[1, 1, 1, 1]);
        let f = m
            .feature_maps(&Tensor::full(&[1, 4, 4], 0.7), &[0])
            .unwrap();
        assert!(f[0].data().iter().all(|v| *v == 0.7));
    }

    #[test]
    fn log_cond_cases() {
        let m = ClassifierModel::zeroed(Architecture::mlp(2, &[4], 2)).unwrap();
        let x = Tensor::vector(vec![1.0, 1.0]);
        let lc = m.log_cond(&x, &[1.0, 0.0, 0.0]).unwrap();
        assert!((lc[0] - (1.0f64 / 3.0).ln()).abs() < 1e-12);
        assert!(m.log_cond(&x, &[0.5, 0.0, 0.0]).is_err());

        let m = ClassifierModel::new(Architecture::mlp(2, &[4], 2), 5).unwrap();
        let p = m.probabilities(&x).unwrap();
        let lc = m.log_cond(&x, p.data()).unwrap()[0];
        let neg_entropy: f64 = p.data().iter().map(|q| q * q.ln()).sum();
        assert!((lc - neg_entropy).abs() < 1e-12);
    }

    #[test]
    fn joint_minus_marginal_is_log_conditional() {
        let m = ClassifierModel::new(Architecture::mlp(2, &[16], 3), 9).unwrap();
        let x = Tensor::randn(&[6, 2], 1.0, &mut stream(1, "x"));
        let marg = m.unnorm_log_marginal(&x).unwrap();
        for c in 0..4 {
            let joint = m.unnorm_log_joint(&x, c).unwrap();
            let cond = m.log_cond(&x, &one_hot(c, 4)).unwrap();
            for b in 0..6 {
                assert!((joint[b] - marg[b] - cond[b]).abs() < 1e-9);
            }
        }
        assert!(m.unnorm_log_joint(&x, 4).is_err());
    }

    #[test]
    fn marginal_of_zero_logits_is_ln2() {
        let m = ClassifierModel::zeroed(Architecture::mlp(2, &[3], 1)).unwrap();
        let v = m
            .unnorm_log_marginal(&Tensor::vector(vec![0.0, 0.0]))
            .unwrap();
        assert!((v[0] - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn logit_shift_moves_joint_and_marginal_only() {
        let mut m = ClassifierModel::new(Architecture::mlp(2, &[8], 2), 4).unwrap();
        let x = Tensor::vector(vec![0.4, -0.9]);
        let (j0, m0, c0) = (
            m.unnorm_log_joint(&x, 1).unwrap()[0],
            m.unnorm_log_marginal(&x).unwrap()[0],
            m.log_cond(&x, &one_hot(1, 3)).unwrap()[0],
        );
        for b in m.param_mut("layer1.bias").unwrap().data_mut() {
            *b += 2.5;
        }
        assert!((m.unnorm_log_joint(&x, 1).unwrap()[0] - j0 - 2.5).abs() < 1e-12);
        assert!((m.unnorm_log_marginal(&x).unwrap()[0] - m0 - 2.5).abs() < 1e-12);
        assert!((m.log_cond(&x, &one_hot(1, 3)).unwrap()[0] - c0).abs() < 1e-12);
    }

    #[test]
    fn score_head_contract() {
        let plain = ClassifierModel::new(Architecture::mlp(2, &[8], 2), 1).unwrap();
        assert!(plain.score(&Tensor::vector(vec![0.0, 0.0])).is_err());

        let arch = Architecture::mlp(2, &[8], 2).with_score_head();
        let m = ClassifierModel::new(arch.clone(), 1).unwrap();
        let x = Tensor::uniform(&[4, 2], -1.0, 1.0, &mut stream(2, "x"));
        let s = m.score(&x).unwrap();
        assert_eq!(s.shape(), x.shape());
        assert!(s.is_finite());
        assert_eq!(m.forward_logits(&x).unwrap().shape(), &[4, 3]);
        // Trunk parameters do not depend on the head.
        assert_eq!(&m.params()[..4], plain.params());

        let mut z = m.clone();
        for n in ["score.weight", "score.bias"] {
            z.param_mut(n).unwrap().data_mut().fill(0.0);
        }
        assert!(z.score(&x).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn batch_composition_does_not_change_outputs() {
        let m = ClassifierModel::new(Architecture::cnn(1, 8, 3), 2).unwrap();
        let x = Tensor::uniform(&[3, 1, 8, 8], -1.0, 1.0, &mut stream(3, "x"));
        let batch = m.forward_logits(&x).unwrap();
        let single = m.forward_logits(&x.row(1)).unwrap();
        assert_eq!(&batch.data()[4..8], single.data());
    }

    #[test]
    fn descriptor_roundtrip() {
        let a = Architecture::cnn(1, 8, 3).with_score_head();
        assert_eq!(
            Architecture::from_descriptor(&a.to_descriptor()).unwrap(),
            a
        );
    }
}
