//! Feature-space STIC.
//!
//! An attention reader takes `glimpses` Gaussian-filterbank looks at an image
//! and its error image, and an LSTM turns the glimpses into a feature vector.
//! A classifier over those features is trained with the ordinary STIC loop
//! (its fakes are feature vectors), sampled with Langevin ascent in feature
//! space, and a small transposed-conv decoder maps sampled features back to
//! pixels.

use rand::Rng;

use crate::data::{Dataset, Encoding};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{glorot, Architecture, ClassifierModel};
use crate::optim::Adam;
use crate::rng::{self, StreamRng};
use crate::sampler::{synthesize, Init, SamplerConfig, Target};
use crate::tensor::Tensor;
use crate::trainer::{train, PassMetrics, PassState, TrainConfig, TrainLog};

pub const DEFAULT_FEATURE_WIDTH: usize = 100;
pub const DEFAULT_GLIMPSES: usize = 4;

/// Channels of the decoder's first spatial block.
const DECODER_CHANNELS: [usize; 2] = [16, 8];

#[derive(Clone, Debug, PartialEq)]
pub struct AttentiveConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Side of the square read grid.
    pub grid: usize,
    pub read_width: usize,
    pub feature_width: usize,
    pub glimpses: usize,
}

impl AttentiveConfig {
    pub fn for_images(channels: usize, height: usize, width: usize) -> Self {
        AttentiveConfig {
            channels,
            height,
            width,
            grid: (height.min(width) / 2).max(1),
            read_width: 64,
            feature_width: DEFAULT_FEATURE_WIDTH,
            glimpses: DEFAULT_GLIMPSES,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::invalid("image shape must be positive"));
        }
        if self.grid == 0 || self.read_width == 0 || self.feature_width == 0 {
            return Err(Error::invalid(
                "grid, read width and feature width must be positive",
            ));
        }
        if self.glimpses == 0 {
            return Err(Error::invalid("at least one glimpse is required"));
        }
        Ok(())
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    fn patch_len(&self) -> usize {
        2 * self.channels * self.grid * self.grid
    }
}

fn check_image(config: &AttentiveConfig, x: &Tensor) -> Result<Tensor> {
    let img = config.image_shape();
    match x.shape() {
        s if s == img => {
            let mut b = vec![1];
            b.extend_from_slice(&img);
            Ok(x.reshape(&b)?)
        }
        [_, rest @ ..] if rest == img => Ok(x.clone()),
        s => Err(Error::invalid(format!(
            "expected images shaped {img:?}, got {s:?}"
        ))),
    }
}

/// Attention reader plus LSTM. Parameter order: attention projection
/// (weight, bias), read projection (weight, bias), LSTM (weight, bias).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentiveEncoder {
    pub config: AttentiveConfig,
    params: Vec<Tensor>,
}

/// Parameters of one encoder bound into a graph.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    attn_w: Var,
    attn_b: Var,
    read_w: Var,
    read_b: Var,
    lstm_w: Var,
    lstm_b: Var,
}

impl AttentiveEncoder {
    pub fn new(config: AttentiveConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, "attentive/encoder");
        let f = config.feature_width;
        let rw = config.read_width;
        let read_in = config.patch_len() + rw;
        let mut lstm_b = Tensor::zeros(&[4 * f]);
        // Forget gate starts open.
        for v in &mut lstm_b.data_mut()[f..2 * f] {
            *v = 1.0;
        }
        let params = vec![
            glorot(&[f, 4], f, 4, &mut r),
            Tensor::zeros(&[4]),
            glorot(&[read_in, rw], read_in, rw, &mut r),
            Tensor::zeros(&[rw]),
            glorot(&[rw + f, 4 * f], rw + f, 4 * f, &mut r),
            lstm_b,
        ];
        Ok(AttentiveEncoder { config, params })
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> EncoderVars {
        let v: Vec<Var> = self
            .params
            .iter()
            .map(|p| g.leaf(p.clone(), trainable))
            .collect();
        EncoderVars {
            attn_w: v[0],
            attn_b: v[1],
            read_w: v[2],
            read_b: v[3],
            lstm_w: v[4],
            lstm_b: v[5],
        }
    }

    /// Vars in parameter order, for optimizer bookkeeping.
    pub fn var_list(vars: &EncoderVars) -> [Var; 6] {
        [
            vars.attn_w,
            vars.attn_b,
            vars.read_w,
            vars.read_b,
            vars.lstm_w,
            vars.lstm_b,
        ]
    }

    /// `[C, k, k]` patch of a `[C, H, W]` node under a `[4]` placement
    /// `(g_x, g_y, log stride, log variance)`.
    pub fn glimpse_graph(&self, g: &mut Graph, x: Var, placement: Var) -> Result<Var> {
        let c = &self.config;
        let gx = g.slice(placement, 0, 0, 1)?;
        let gy = g.slice(placement, 0, 1, 1)?;
        let shared = g.slice(placement, 0, 2, 2)?;
        let px = g.concat(&[gx, shared], 0)?;
        let py = g.concat(&[gy, shared], 0)?;
        let fx = g.filterbank(px, c.grid, c.width)?;
        let fy = g.filterbank(py, c.grid, c.height)?;
        let fxt = g.transpose(fx)?;
        let mut patches = Vec::with_capacity(c.channels);
        for ch in 0..c.channels {
            let plane = g.slice(x, 0, ch, 1)?;
            let plane = g.reshape(plane, &[c.height, c.width])?;
            let rows = g.matmul(fy, plane)?;
            let p = g.matmul(rows, fxt)?;
            patches.push(g.reshape(p, &[1, c.grid, c.grid])?);
        }
        Ok(g.concat(&patches, 0)?)
    }

    /// Patch values for a single image under an explicit placement.
    pub fn glimpse(&self, x: &Tensor, placement: [f64; 4]) -> Result<Tensor> {
        if x.shape() != self.config.image_shape() {
            return Err(Error::invalid("glimpse takes one [C, H, W] image"));
        }
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let pv = g.constant(Tensor::vector(placement.to_vec()));
        let out = self.glimpse_graph(&mut g, xv, pv)?;
        Ok(g.value(out).clone())
    }

    /// One read: placement from the previous hidden state, patches of `x`
    /// and the error image, projected together with the previous read.
    pub fn read_graph(
        &self,
        g: &mut Graph,
        vars: &EncoderVars,
        x: Var,
        xhat: Var,
        v_prev: Var,
        h_prev: Var,
    ) -> Result<Var> {
        let a = g.matmul(h_prev, vars.attn_w)?;
        let a = g.add_bias(a, vars.attn_b)?;
        let a = g.reshape(a, &[4])?;
        let centers = g.slice(a, 0, 0, 2)?;
        let centers = g.tanh(centers);
        let scales = g.slice(a, 0, 2, 2)?;
        let placement = g.concat(&[centers, scales], 0)?;
        let px = self.glimpse_graph(g, x, placement)?;
        let ph = self.glimpse_graph(g, xhat, placement)?;
        let half = self.config.patch_len() / 2;
        let px = g.reshape(px, &[1, half])?;
        let ph = g.reshape(ph, &[1, half])?;
        let input = g.concat(&[px, ph, v_prev], 1)?;
        let v = g.matmul(input, vars.read_w)?;
        let v = g.add_bias(v, vars.read_b)?;
        Ok(g.tanh(v))
    }

    /// LSTM cell: `(v, h, c) -> (h', c')`; the feature is `h'`.
    fn lstm_graph(
        &self,
        g: &mut Graph,
        vars: &EncoderVars,
        v: Var,
        h: Var,
        cell: Var,
    ) -> Result<(Var, Var)> {
        let f = self.config.feature_width;
        let input = g.concat(&[v, h], 1)?;
        let z = g.matmul(input, vars.lstm_w)?;
        let z = g.add_bias(z, vars.lstm_b)?;
        let gi = g.slice(z, 1, 0, f)?;
        let gf = g.slice(z, 1, f, f)?;
        let go = g.slice(z, 1, 2 * f, f)?;
        let gg = g.slice(z, 1, 3 * f, f)?;
        let i = g.sigmoid(gi);
        let fg = g.sigmoid(gf);
        let o = g.sigmoid(go);
        let cand = g.tanh(gg);
        let keep = g.mul(fg, cell)?;
        let write = g.mul(i, cand)?;
        let cell = g.add(keep, write)?;
        let squashed = g.tanh(cell);
        let h = g.mul(o, squashed)?;
        Ok((h, cell))
    }

    /// Feature `[1, F]` for one `[C, H, W]` image node after `steps` glimpses.
    /// The error image follows `x̂_t = x − σ(x̂_{t−1})` from `x̂_0 = 0`.
    pub fn encode_graph(
        &self,
        g: &mut Graph,
        vars: &EncoderVars,
        x: Var,
        steps: usize,
    ) -> Result<Var> {
        if steps == 0 {
            return Err(Error::invalid("encode needs at least one glimpse"));
        }
        let c = &self.config;
        let mut xhat = g.constant(Tensor::zeros(&c.image_shape()));
        let mut v = g.constant(Tensor::zeros(&[1, c.read_width]));
        let mut h = g.constant(Tensor::zeros(&[1, c.feature_width]));
        let mut cell = g.constant(Tensor::zeros(&[1, c.feature_width]));
        for _ in 0..steps {
            let s = g.sigmoid(xhat);
            xhat = g.sub(x, s)?;
            v = self.read_graph(g, vars, x, xhat, v, h)?;
            (h, cell) = self.lstm_graph(g, vars, v, h, cell)?;
        }
        Ok(h)
    }

    /// `[B, F]` features for a batch node `[B, C, H, W]`.
    pub fn encode_batch_graph(
        &self,
        g: &mut Graph,
        vars: &EncoderVars,
        x: Var,
        steps: usize,
    ) -> Result<Var> {
        let b = g.shape(x)[0];
        let img = self.config.image_shape();
        let mut rows = Vec::with_capacity(b);
        for i in 0..b {
            let xi = g.slice(x, 0, i, 1)?;
            let xi = g.reshape(xi, &img)?;
            rows.push(self.encode_graph(g, vars, xi, steps)?);
        }
        Ok(g.concat(&rows, 0)?)
    }

    /// Features `[B, F]` using the configured glimpse count.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.encode_steps(x, self.config.glimpses)
    }

    pub fn encode_steps(&self, x: &Tensor, steps: usize) -> Result<Tensor> {
        let xb = check_image(&self.config, x)?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let xv = g.constant(xb);
        let f = self.encode_batch_graph(&mut g, &vars, xv, steps)?;
        Ok(g.value(f).clone())
    }
}

/// Dense layer to a `[16, H/4, W/4]` block, then two stride-2 transposed
/// convolutions up to `[C, H, W]`, squashed by tanh.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub feature_width: usize,
    pub image_shape: [usize; 3],
    params: Vec<Tensor>,
}

impl Decoder {
    pub fn new(feature_width: usize, image_shape: [usize; 3], seed: u64) -> Result<Self> {
        let [c, h, w] = image_shape;
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 || c == 0 {
            return Err(Error::invalid(format!(
                "decoder needs sides divisible by 4, got {image_shape:?}"
            )));
        }
        let [c0, c1] = DECODER_CHANNELS;
        let cells = c0 * (h / 4) * (w / 4);
        let mut r = rng::stream(seed, "attentive/decoder");
        let params = vec![
            glorot(&[feature_width, cells], feature_width, cells, &mut r),
            Tensor::zeros(&[cells]),
            glorot(&[c0, c1, 4, 4], c1 * 16, c0 * 16, &mut r),
            Tensor::zeros(&[c1]),
            glorot(&[c1, c, 4, 4], c * 16, c1 * 16, &mut r),
            Tensor::zeros(&[c]),
        ];
        Ok(Decoder {
            feature_width,
            image_shape,
            params,
        })
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| g.leaf(p.clone(), trainable))
            .collect()
    }

    pub fn decode_graph(&self, g: &mut Graph, vars: &[Var], f: Var) -> Result<Var> {
        let b = g.shape(f)[0];
        let [_, h, w] = self.image_shape;
        let z = g.matmul(f, vars[0])?;
        let z = g.add_bias(z, vars[1])?;
        let z = g.relu(z);
        let z = g.reshape(z, &[b, DECODER_CHANNELS[0], h / 4, w / 4])?;
        let z = g.conv_transpose2d(z, vars[2], 2, 1)?;
        let z = g.add_channel_bias(z, vars[3])?;
        let z = g.relu(z);
        let z = g.conv_transpose2d(z, vars[4], 2, 1)?;
        let z = g.add_channel_bias(z, vars[5])?;
        Ok(g.tanh(z))
    }

    /// `[B, C, H, W]` images in `[-1, 1]` from `[B, F]` (or `[F]`) features.
    pub fn decode(&self, f: &Tensor) -> Result<Tensor> {
        let fb = match f.shape() {
            [n] if *n == self.feature_width => f.reshape(&[1, *n])?,
            [_, n] if *n == self.feature_width => f.clone(),
            s => {
                return Err(Error::invalid(format!(
                    "decoder expects feature width {}, got {s:?}",
                    self.feature_width
                )))
            }
        };
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let fv = g.constant(fb);
        let out = self.decode_graph(&mut g, &vars, fv)?;
        Ok(g.value(out).clone())
    }
}

/// Mean squared reconstruction error of `decode(encode(x))`.
pub fn reconstruction_error(
    encoder: &AttentiveEncoder,
    decoder: &Decoder,
    x: &Tensor,
) -> Result<f64> {
    let rec = decoder.decode(&encoder.encode(x)?)?;
    let xb = check_image(&encoder.config, x)?;
    Ok(rec
        .data()
        .iter()
        .zip(xb.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / rec.numel() as f64)
}

#[derive(Clone, Debug)]
pub struct WarmUp {
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for WarmUp {
    fn default() -> Self {
        WarmUp {
            iterations: 300,
            batch: 16,
            lr: 3e-3,
        }
    }
}

/// Joint autoencoder training of encoder and decoder on squared error.
/// Returns the per-iteration loss.
pub fn warm_up(
    encoder: &mut AttentiveEncoder,
    decoder: &mut Decoder,
    images: &Tensor,
    settings: &WarmUp,
    seed: u64,
) -> Result<Vec<f64>> {
    let images = check_image(&encoder.config, images)?;
    let n = images.shape()[0];
    if n == 0 || settings.batch == 0 {
        return Err(Error::invalid("warm-up needs images and a positive batch"));
    }
    let mut enc_opt = Adam::new(encoder.params());
    let mut dec_opt = Adam::new(decoder.params());
    let mut r = rng::stream(seed, "attentive/warmup");
    let steps = encoder.config.glimpses;
    let mut history = Vec::with_capacity(settings.iterations);
    for _ in 0..settings.iterations {
        let idx: Vec<usize> = (0..settings.batch.min(n))
            .map(|_| r.random_range(0..n))
            .collect();
        let xb = Tensor::stack(&idx.iter().map(|&i| images.row(i)).collect::<Vec<_>>())?;
        let mut g = Graph::new();
        let ev = encoder.bind(&mut g, true);
        let dv = decoder.bind(&mut g, true);
        let xv = g.constant(xb);
        let f = encoder.encode_batch_graph(&mut g, &ev, xv, steps)?;
        let rec = decoder.decode_graph(&mut g, &dv, f)?;
        let diff = g.sub(rec, xv)?;
        let sq = g.square(diff);
        let loss = g.mean(sq);
        history.push(g.value(loss).item());
        g.backward(loss)?;
        let eg: Vec<Option<&Tensor>> = AttentiveEncoder::var_list(&ev)
            .iter()
            .map(|v| g.grad(*v))
            .collect();
        let dg: Vec<Option<&Tensor>> = dv.iter().map(|v| g.grad(*v)).collect();
        enc_opt.step(encoder.params_mut(), &eg, settings.lr);
        dec_opt.step(decoder.params_mut(), &dg, settings.lr);
    }
    Ok(history)
}

/// Langevin ascent on `log p(class | f)` in feature space, without a style
/// term. Zero steps return `f0` unchanged.
pub fn feature_sample(
    classifier: &ClassifierModel,
    class: usize,
    eps_f: f64,
    eps3: f64,
    steps: usize,
    f0: &Tensor,
    rng: StreamRng,
) -> Result<Tensor> {
    let config = SamplerConfig {
        eps1: eps_f,
        eps2: 0.0,
        eps3,
        steps,
        gram_layers: Some(Vec::new()),
        clip_to: None,
        init: Init::Given(f0.clone()),
    };
    Ok(synthesize(classifier, Target::Class(class), None, &config, rng)?.sample)
}

/// Features of every image of `data`, as a point dataset with the same labels.
pub fn feature_dataset(encoder: &AttentiveEncoder, data: &Dataset) -> Result<Dataset> {
    let f = encoder.encode(&data.model_inputs()?)?;
    Dataset::new(
        format!("{}-features", data.name),
        f,
        data.labels.clone(),
        data.num_classes,
        Encoding::Points,
    )
}

#[derive(Clone, Debug)]
pub struct AttentiveSettings {
    pub encoder: AttentiveConfig,
    pub warm_up: WarmUp,
    pub train: TrainConfig,
    pub hidden: Vec<usize>,
}

impl AttentiveSettings {
    pub fn for_dataset(data: &Dataset, train: TrainConfig) -> Result<Self> {
        match data.sample_shape() {
            [c, h, w] => Ok(AttentiveSettings {
                encoder: AttentiveConfig::for_images(*c, *h, *w),
                warm_up: WarmUp::default(),
                train,
                hidden: vec![64],
            }),
            s => Err(Error::invalid(format!(
                "attentive STIC needs [C, H, W] images, got {s:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AttentiveModels {
    pub encoder: AttentiveEncoder,
    pub decoder: Decoder,
    pub classifier: ClassifierModel,
}

#[derive(Clone, Debug)]
pub struct AttentiveLog {
    pub reconstruction: Vec<f64>,
    pub train: TrainLog,
}

/// Warm-up, feature extraction, then STIC over features.
pub fn train_attentive(
    data: &Dataset,
    settings: &AttentiveSettings,
    seed: u64,
    on_pass: impl FnMut(&PassState, &PassMetrics) -> Result<()>,
) -> Result<(AttentiveModels, AttentiveLog)> {
    let mut encoder =
        AttentiveEncoder::new(settings.encoder.clone(), rng::derive_seed(seed, "encoder"))?;
    let mut decoder = Decoder::new(
        settings.encoder.feature_width,
        settings.encoder.image_shape(),
        rng::derive_seed(seed, "decoder"),
    )?;
    let reconstruction = warm_up(
        &mut encoder,
        &mut decoder,
        &data.model_inputs()?,
        &settings.warm_up,
        seed,
    )?;
    let features = feature_dataset(&encoder, data)?;
    let arch = Architecture::mlp(
        settings.encoder.feature_width,
        &settings.hidden,
        data.num_classes,
    );
    let (classifier, log) = train(&settings.train, &features, arch, seed, on_pass)?;
    Ok((
        AttentiveModels {
            encoder,
            decoder,
            classifier,
        },
        AttentiveLog {
            reconstruction,
            train: log,
        },
    ))
}

/// Decoded class-conditional samples. Each chain starts from the features
/// of a random training image.
pub fn sample_images(
    models: &AttentiveModels,
    data: &Dataset,
    class: usize,
    n: usize,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<Tensor> {
    let features = models.encoder.encode(&data.model_inputs()?)?;
    let mut pick = rng::stream(seed, "attentive/starts");
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let f0 = features.row(pick.random_range(0..features.shape()[0]));
        let f = feature_sample(
            &models.classifier,
            class,
            sampler.eps1,
            sampler.eps3,
            sampler.steps,
            &f0,
            rng::stream(seed, &format!("attentive/chain/{i}")),
        )?;
        out.push(f);
    }
    models.decoder.decode(&Tensor::stack(&out)?)
}
