use std::fmt::Write as _;

use rand::Rng;
use stic_core::attentive::{self, AttentiveSettings};
use stic_core::config::{DatasetKind, ModelKind, RunConfig};
use stic_core::data::{self, checkpoint, pnm, Dataset, Encoding};
use stic_core::metrics::{self, ClsConfig, FeatureCloud, LabeledSet, Source};
use stic_core::rng;
use stic_core::sampler::{
    self, GramSource, GramTarget, Init, SamplerConfig, Target, TrajectoryRow,
};
use stic_core::trainer::{self, PassMetrics, PassState, TrainLog};
use stic_core::{score, Architecture, ClassifierModel, LayerSpec, Tensor};

use crate::viz::{self, Bounds};
use crate::{usage_of, CkptArgs, CliError, CliResult, Common, Manifest};

/// Uniform draws for the boundary proxy on point data.
const PROXY_POINTS: usize = 10_000;
/// Uniform draws for the boundary proxy on images.
const PROXY_IMAGES: usize = 1_000;
/// Share of samples that must clear this probability to count as confident.
const CONFIDENT: f64 = 0.9;

fn load_config(common: &Common, command: &str, required: bool) -> CliResult<Option<RunConfig>> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path).map_err(|e| match e {
            stic_core::Error::Io(io) => {
                CliError::Usage(format!("cannot read config {}: {io}", path.display()))
            }
            other => CliError::Usage(other.to_string()),
        })?,
        None if required => {
            return Err(CliError::Usage(format!(
                "--config is required\n\n{}",
                usage_of(command)
            )));
        }
        None if common.overrides.is_empty() => return Ok(None),
        None => RunConfig::default(),
    };
    config
        .apply_overrides(&common.overrides)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(Some(config))
}

fn build_dataset(config: &RunConfig, run_seed: u64) -> CliResult<Dataset> {
    let d = &config.data;
    let seed = d.seed.unwrap_or(run_seed);
    let data = match d.kind {
        DatasetKind::Gaussians => data::gen_gaussians_2d(d.classes, d.per_class, d.spread, seed)?,
        DatasetKind::Moons => data::gen_moons(d.per_class * 2, d.noise, seed)?,
        DatasetKind::Shapes => data::gen_shapes(d.per_class, d.side, seed)?,
        DatasetKind::Idx => {
            if d.images.is_empty() || d.labels.is_empty() {
                return Err(CliError::Usage(
                    "data.kind = idx needs data.images and data.labels".into(),
                ));
            }
            data::idx::read_idx_dataset(&d.images, &d.labels)?
        }
    };
    Ok(data)
}

fn build_arch(config: &RunConfig, data: &Dataset, score_head: bool) -> CliResult<Architecture> {
    let shape = data.sample_shape().to_vec();
    let c = data.num_classes;
    let arch = match (shape.as_slice(), config.model.kind) {
        ([d], ModelKind::Mlp) => Architecture::mlp(*d, &config.model.hidden, c),
        ([ch, h, w], ModelKind::Cnn) if h == w => Architecture::cnn(*ch, *h, c),
        ([_, _, _], ModelKind::Cnn) => {
            return Err(CliError::Usage(format!(
                "model.kind = cnn needs square images, got {shape:?}"
            )));
        }
        ([_, _, _], ModelKind::Mlp) => {
            let mut arch = Architecture::mlp(shape.iter().product(), &config.model.hidden, c);
            arch.layers.insert(0, LayerSpec::Flatten);
            arch.input_shape = shape.clone();
            arch
        }
        _ => {
            return Err(CliError::Usage(format!(
                "no model for samples of shape {shape:?}"
            )))
        }
    };
    Ok(if score_head || config.model.score_head {
        arch.with_score_head()
    } else {
        arch
    })
}

fn is_image(model: &ClassifierModel) -> bool {
    model.arch().input_shape.len() == 3
}

fn is_planar(model: &ClassifierModel) -> bool {
    model.arch().input_shape == [2]
}

fn check_compatible(model: &ClassifierModel, data: &Dataset) -> CliResult<()> {
    if model.arch().input_shape != data.sample_shape()
        || model.num_real_classes() != data.num_classes
    {
        return Err(CliError::Runtime(format!(
            "checkpoint expects inputs {:?} over {} classes, dataset has {:?} over {}",
            model.arch().input_shape,
            model.num_real_classes(),
            data.sample_shape(),
            data.num_classes
        )));
    }
    Ok(())
}

/// Per-coordinate bounding box of the model inputs, padded by `pad`.
fn data_box(data: &Dataset, pad: f64) -> CliResult<(Vec<f64>, Vec<f64>)> {
    if data.encoding == Encoding::Pixels {
        let d = data.sample_numel();
        return Ok((vec![-1.0; d], vec![1.0; d]));
    }
    let x = data.model_inputs()?;
    let d = data.sample_numel();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for row in x.data().chunks(d) {
        for (j, v) in row.iter().enumerate() {
            lo[j] = lo[j].min(*v);
            hi[j] = hi[j].max(*v);
        }
    }
    Ok((
        lo.iter().map(|v| v - pad).collect(),
        hi.iter().map(|v| v + pad).collect(),
    ))
}

/// The configured sampler, without clipping for models over raw points.
fn sampler_for(config: Option<&RunConfig>, model: &ClassifierModel) -> SamplerConfig {
    let mut s = config.map(|c| c.train.sampler.clone()).unwrap_or_default();
    if !is_image(model) {
        s.clip_to = None;
    }
    s
}

/// Style target from a random training image of `class`, when the model has
/// conv layers to compare and a dataset is available.
fn gram_for<R: Rng>(
    model: &ClassifierModel,
    data: Option<&Dataset>,
    inputs: Option<&Tensor>,
    class: usize,
    sampler: &SamplerConfig,
    rng: &mut R,
) -> CliResult<Option<GramTarget>> {
    let (Some(data), Some(inputs)) = (data, inputs) else {
        return Ok(None);
    };
    let layers = sampler.layers_for(model)?;
    let pool = data.indices_of_class(class);
    if layers.is_empty() || pool.is_empty() || sampler.eps2 == 0.0 {
        return Ok(None);
    }
    let i = pool[rng.random_range(0..pool.len())];
    let source = GramSource {
        images: vec![i],
        classes: vec![class],
        lambda: None,
    };
    Ok(Some(GramTarget::from_image(
        model,
        &inputs.row(i),
        &layers,
        source,
    )?))
}

struct Batch {
    samples: Vec<Tensor>,
    trajectories: Vec<Vec<TrajectoryRow>>,
}

/// `n` chains for `class`, chain `i` on its own stream.
fn synthesize_class(
    model: &ClassifierModel,
    data: Option<&Dataset>,
    class: usize,
    n: usize,
    sampler: &SamplerConfig,
    seed: u64,
    tag: &str,
) -> CliResult<Batch> {
    let inputs = data.map(|d| d.model_inputs()).transpose()?;
    let mut refs = rng::stream(seed, &format!("{tag}/gram/{class}"));
    let mut out = Batch {
        samples: Vec::with_capacity(n),
        trajectories: Vec::with_capacity(n),
    };
    for i in 0..n {
        let gram = gram_for(model, data, inputs.as_ref(), class, sampler, &mut refs)?;
        let chain = rng::stream(seed, &format!("{tag}/{class}/{i}"));
        let s = sampler::synthesize(model, Target::Class(class), gram, sampler, chain)?;
        out.samples.push(s.sample);
        out.trajectories.push(s.trajectory);
    }
    Ok(out)
}

fn trajectories_csv(batch: &Batch) -> String {
    let mut out = String::from("chain,step,log_cond,style_loss\n");
    for (i, rows) in batch.trajectories.iter().enumerate() {
        for r in rows {
            let _ = writeln!(out, "{i},{},{},{}", r.step, r.log_cond, r.style_loss);
        }
    }
    out
}

fn image_ext(img: &Tensor) -> &'static str {
    if img.shape()[0] == 3 {
        "ppm"
    } else {
        "pgm"
    }
}

fn grid_bytes(images: &[Tensor]) -> CliResult<(Vec<u8>, &'static str)> {
    let cols = (images.len() as f64).sqrt().ceil().max(1.0) as usize;
    let grid = pnm::tile_grid(images, cols)?;
    let (bytes, _) = pnm::encode_image(&grid)?;
    Ok((bytes, image_ext(&grid)))
}

fn rows_csv(header: &str, rows: &[Tensor], extra: impl Fn(usize) -> String) -> String {
    let mut out = format!("{header}\n");
    for (i, r) in rows.iter().enumerate() {
        let vals: Vec<String> = r.data().iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "{i},{},{}", vals.join(","), extra(i));
    }
    out
}

fn value_header(width: usize) -> String {
    (0..width)
        .map(|j| format!("x{j}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn loss_csv(log: &TrainLog) -> String {
    let mut out = String::from("iter,loss\n");
    for (i, l) in log.loss_history.iter().enumerate() {
        let _ = writeln!(out, "{},{l}", i + 1);
    }
    out
}

fn open_manifest(common: &Common, command: &str) -> CliResult<Manifest> {
    Manifest::new(&common.out, command, common.seed, &common.overrides)
}

pub fn train(common: &Common, with_score: bool) -> CliResult<()> {
    let command = if with_score { "score-train" } else { "train" };
    let config = load_config(common, command, true)?.expect("required config");
    let mut manifest = open_manifest(common, command)?;
    manifest.set_config(&config);
    let data = build_dataset(&config, common.seed)?;
    let arch = build_arch(&config, &data, with_score)?;
    let proxy_box = (data.encoding == Encoding::Points)
        .then(|| data_box(&data, 1.0))
        .transpose()?;

    let mut written = Vec::new();
    let mut proxies = String::from("pass,proxy\n");
    let out = common.out.clone();
    let seed = common.seed;
    let on_pass = |state: &PassState, m: &PassMetrics| -> stic_core::Result<()> {
        let name = format!("p{}.stic", m.pass);
        checkpoint::save_checkpoint(out.join(&name), &state.model, m.pass, seed)?;
        written.push(name);
        if let Some((lo, hi)) = &proxy_box {
            let mut r = rng::stream(seed, &format!("proxy/{}", m.pass));
            let p = metrics::boundary_proxy(&state.model, lo, hi, PROXY_POINTS, &mut r)?;
            let _ = writeln!(proxies, "{},{p}", m.pass);
        }
        log::info!(
            "pass {}: loss {:.4}, train acc {:.3}",
            m.pass,
            m.loss,
            m.train_acc
        );
        Ok(())
    };
    let (_, log) = if with_score {
        score::train_score_stic(
            &config.train,
            &data,
            arch,
            config.score_weight,
            seed,
            on_pass,
        )?
    } else {
        trainer::train(&config.train, &data, arch, seed, on_pass)?
    };
    for name in &written {
        manifest.record(name);
    }
    manifest.write("metrics.csv", log.to_csv())?;
    manifest.write("loss.csv", loss_csv(&log))?;
    if proxy_box.is_some() {
        manifest.write("proxy.csv", proxies)?;
    }
    manifest.finish()
}

pub fn sample(common: &Common, ckpt: &CkptArgs, class: usize, n: usize) -> CliResult<()> {
    let config = load_config(common, "sample", false)?;
    let (model, _) = checkpoint::load_checkpoint(&ckpt.ckpt)?;
    if class >= model.num_real_classes() {
        return Err(CliError::Usage(format!(
            "--class {class} out of range; the checkpoint has {} real classes",
            model.num_real_classes()
        )));
    }
    if n == 0 {
        return Err(CliError::Usage("--n must be positive".into()));
    }
    let data = config
        .as_ref()
        .map(|c| build_dataset(c, common.seed))
        .transpose()?;
    if let Some(d) = &data {
        check_compatible(&model, d)?;
    }
    let mut manifest = open_manifest(common, "sample")?;
    if let Some(c) = &config {
        manifest.set_config(c);
    }
    manifest.note("checkpoint", ckpt.ckpt.display());
    manifest.note("class", class);

    let sampler = sampler_for(config.as_ref(), &model);
    let batch = synthesize_class(
        &model,
        data.as_ref(),
        class,
        n,
        &sampler,
        common.seed,
        "sample",
    )?;
    let probs = model.probabilities(&Tensor::stack(&batch.samples)?)?;
    let k = model.arch().num_outputs();
    let p_class = |i: usize| probs.data()[i * k + class].to_string();

    if is_image(&model) {
        for (i, s) in batch.samples.iter().enumerate() {
            let (bytes, _) = pnm::encode_image(s)?;
            manifest.write(&format!("sample_{i:03}.{}", image_ext(s)), bytes)?;
        }
        let (bytes, ext) = grid_bytes(&batch.samples)?;
        manifest.write(&format!("grid.{ext}"), bytes)?;
    } else {
        let header = format!("index,{},p_class", value_header(model.arch().input_numel()));
        manifest.write("samples.csv", rows_csv(&header, &batch.samples, p_class))?;
        if is_planar(&model) {
            let points: Vec<[f64; 2]> = batch
                .samples
                .iter()
                .map(|s| [s.data()[0], s.data()[1]])
                .collect();
            let bounds = planar_bounds(data.as_ref(), &points)?;
            let res = 256;
            let map = viz::boundary_map(&model, bounds, res)?;
            let mut rgb = viz::render(&map, model.fake_class());
            viz::mark_points(&mut rgb, res, bounds, &points);
            manifest.write("samples_map.ppm", pnm::encode_rgb(res, res, &rgb)?)?;
        }
    }
    manifest.write("trajectories.csv", trajectories_csv(&batch))?;
    manifest.finish()
}

/// Data bounding box padded by 1 and widened to cover `extra`; `[-3, 3]^2`
/// without data.
fn planar_bounds(data: Option<&Dataset>, extra: &[[f64; 2]]) -> CliResult<Bounds> {
    let mut b = match data {
        Some(d) => {
            let (lo, hi) = data_box(d, 1.0)?;
            Bounds {
                x0: lo[0],
                x1: hi[0],
                y0: lo[1],
                y1: hi[1],
            }
        }
        None => Bounds::square(-3.0, 3.0),
    };
    for p in extra {
        b.x0 = b.x0.min(p[0] - 0.5);
        b.x1 = b.x1.max(p[0] + 0.5);
        b.y0 = b.y0.min(p[1] - 0.5);
        b.y1 = b.y1.max(p[1] + 0.5);
    }
    Ok(b)
}

pub fn interpolate(
    common: &Common,
    ckpt: &CkptArgs,
    from: usize,
    to: usize,
    points: usize,
    refine: usize,
) -> CliResult<()> {
    let config = load_config(common, "interpolate", false)?;
    let (model, _) = checkpoint::load_checkpoint(&ckpt.ckpt)?;
    let c = model.num_real_classes();
    if from >= c || to >= c {
        return Err(CliError::Usage(format!(
            "--from and --to must be below {c}"
        )));
    }
    if points < 2 {
        return Err(CliError::Usage("--points must be at least 2".into()));
    }
    let data = config
        .as_ref()
        .map(|cfg| build_dataset(cfg, common.seed))
        .transpose()?;
    if let Some(d) = &data {
        check_compatible(&model, d)?;
    }
    let mut manifest = open_manifest(common, "interpolate")?;
    if let Some(cfg) = &config {
        manifest.set_config(cfg);
    }
    manifest.note("checkpoint", ckpt.ckpt.display());

    let sampler = sampler_for(config.as_ref(), &model);
    let a = synthesize_class(
        &model,
        data.as_ref(),
        from,
        1,
        &sampler,
        common.seed,
        "interpolate/ends",
    )?;
    let b = synthesize_class(
        &model,
        data.as_ref(),
        to,
        1,
        &sampler,
        common.seed,
        "interpolate/ends",
    )?;
    let mut path = sampler::interpolate(&a.samples[0], &b.samples[0], points)?;
    if refine > 0 {
        for (i, x) in path.iter_mut().enumerate() {
            let cfg = SamplerConfig {
                init: Init::Given(x.clone()),
                steps: refine,
                eps2: 0.0,
                ..sampler.clone()
            };
            let r = rng::stream(common.seed, &format!("interpolate/refine/{i}"));
            *x = sampler::synthesize(&model, Target::Marginal, None, &cfg, r)?.sample;
        }
    }
    let probs = model.probabilities(&Tensor::stack(&path)?)?;
    let k = model.arch().num_outputs();
    let mut csv = String::from("index,alpha");
    for j in 0..k {
        let _ = write!(csv, ",p{j}");
    }
    csv.push('\n');
    for (i, row) in probs.data().chunks(k).enumerate() {
        let alpha = i as f64 / (points - 1) as f64;
        let ps: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(csv, "{i},{alpha},{}", ps.join(","));
    }
    manifest.write("interpolation.csv", csv)?;
    if is_image(&model) {
        let (bytes, ext) = grid_bytes(&path)?;
        manifest.write(&format!("interpolation.{ext}"), bytes)?;
    } else {
        let header = format!("index,{},", value_header(model.arch().input_numel()));
        manifest.write(
            "path.csv",
            rows_csv(header.trim_end_matches(','), &path, |_| String::new()).replace(",\n", "\n"),
        )?;
    }
    manifest.finish()
}

/// Fraction of rows whose probability for their own label exceeds `CONFIDENT`.
fn confident_share(model: &ClassifierModel, x: &Tensor, labels: &[usize]) -> CliResult<f64> {
    let probs = model.probabilities(x)?;
    let k = model.arch().num_outputs();
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| probs.data()[i * k + y] > CONFIDENT)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64
}

pub fn eval(common: &Common, ckpt: &CkptArgs) -> CliResult<()> {
    let config = load_config(common, "eval", true)?.expect("required config");
    let (model, meta) = checkpoint::load_checkpoint(&ckpt.ckpt)?;
    let data = build_dataset(&config, common.seed)?;
    check_compatible(&model, &data)?;
    let mut manifest = open_manifest(common, "eval")?;
    manifest.set_config(&config);
    manifest.note("checkpoint", ckpt.ckpt.display());
    manifest.note("tau", meta.tau);

    let seed = common.seed;
    let real = data.model_inputs()?;
    let train_acc = accuracy(&model.predict_real(&real)?, &data.labels);
    let (lo, hi) = data_box(&data, 1.0)?;
    let n_proxy = if is_image(&model) {
        PROXY_IMAGES
    } else {
        PROXY_POINTS
    };
    let proxy = metrics::boundary_proxy(
        &model,
        &lo,
        &hi,
        n_proxy,
        &mut rng::stream(seed, "eval/proxy"),
    )?;

    let sampler = sampler_for(Some(&config), &model);
    let per_class = config.eval.samples_per_class;
    let mut generated = Vec::new();
    let mut gen_labels = Vec::new();
    for class in 0..data.num_classes {
        let batch = synthesize_class(
            &model,
            Some(&data),
            class,
            per_class,
            &sampler,
            seed,
            "eval",
        )?;
        if is_image(&model) {
            let (bytes, ext) = grid_bytes(&batch.samples)?;
            manifest.write(&format!("grid_class{class}.{ext}"), bytes)?;
        }
        gen_labels.extend(std::iter::repeat_n(class, batch.samples.len()));
        generated.extend(batch.samples);
    }
    let gen = Tensor::stack(&generated)?;
    if !is_image(&model) {
        let header = format!("index,{},label", value_header(model.arch().input_numel()));
        manifest.write(
            "samples.csv",
            rows_csv(&header, &generated, |i| gen_labels[i].to_string()),
        )?;
    }

    let mut template = model.arch().clone();
    template.score_head = false;
    let cls = ClsConfig {
        epochs: config.eval.cls_epochs,
        seed: rng::derive_seed(seed, "eval/cls"),
        ..ClsConfig::default()
    };
    let real_set = LabeledSet {
        x: &real,
        labels: &data.labels,
    };
    let gen_set = LabeledSet {
        x: &gen,
        labels: &gen_labels,
    };
    let cls_r = metrics::cls_cross(real_set, gen_set, &template, &cls)?;
    let cls_g = metrics::cls_cross(gen_set, real_set, &template, &cls)?;
    let real_cloud =
        FeatureCloud::from_model(&model, &real, Source::Real, Some(data.labels.clone()))?;
    let gen_cloud =
        FeatureCloud::from_model(&model, &gen, Source::Generated, Some(gen_labels.clone()))?;
    let fd = metrics::frechet_distance(&real_cloud, &gen_cloud)?;
    let (precision, recall) =
        metrics::knn_precision_recall(&real_cloud, &gen_cloud, config.eval.k)?;
    let confident = confident_share(&model, &gen, &gen_labels)?;

    let mut csv = String::from("metric,value\n");
    for (k, v) in [
        ("train_acc", train_acc),
        ("boundary_proxy", proxy),
        ("cls_r", cls_r),
        ("cls_g", cls_g),
        ("frechet", fd),
        ("precision", precision),
        ("recall", recall),
        ("confident_share", confident),
    ] {
        let _ = writeln!(csv, "{k},{v}");
    }
    manifest.write("eval.csv", csv)?;
    manifest.finish()
}

pub fn boundary_viz(
    common: &Common,
    ckpt: &CkptArgs,
    grid: usize,
    bounds: Option<&str>,
) -> CliResult<()> {
    let config = load_config(common, "boundary-viz", false)?;
    let (model, _) = checkpoint::load_checkpoint(&ckpt.ckpt)?;
    if !is_planar(&model) {
        return Err(CliError::Runtime(format!(
            "boundary-viz needs a model over 2-D inputs, got input shape {:?}",
            model.arch().input_shape
        )));
    }
    if grid == 0 {
        return Err(CliError::Usage("--grid must be positive".into()));
    }
    let bounds = match bounds {
        Some(text) => Bounds::parse(text).map_err(CliError::Usage)?,
        None => {
            let data = config
                .as_ref()
                .map(|c| build_dataset(c, common.seed))
                .transpose()?;
            planar_bounds(data.as_ref(), &[])?
        }
    };
    let mut manifest = open_manifest(common, "boundary-viz")?;
    if let Some(c) = &config {
        manifest.set_config(c);
    }
    manifest.note("checkpoint", ckpt.ckpt.display());
    manifest.note(
        "bounds",
        format!("{},{},{},{}", bounds.x0, bounds.x1, bounds.y0, bounds.y1),
    );
    let map = viz::boundary_map(&model, bounds, grid)?;
    let rgb = viz::render(&map, model.fake_class());
    manifest.write("boundary.ppm", pnm::encode_rgb(grid, grid, &rgb)?)?;
    manifest.write("boundary.csv", viz::map_csv(&map, grid))?;
    manifest.finish()
}

pub fn attentive_train(common: &Common) -> CliResult<()> {
    let config = load_config(common, "attentive-train", true)?.expect("required config");
    let mut manifest = open_manifest(common, "attentive-train")?;
    manifest.set_config(&config);
    let data = build_dataset(&config, common.seed)?;
    let mut settings = AttentiveSettings::for_dataset(&data, config.train.clone())?;
    let a = &config.attentive;
    settings.encoder.feature_width = a.features;
    settings.encoder.glimpses = a.glimpses;
    settings.encoder.read_width = a.read_width;
    if a.grid > 0 {
        settings.encoder.grid = a.grid;
    }
    settings.warm_up.iterations = a.warmup_iters;
    settings.warm_up.batch = a.warmup_batch;
    settings.warm_up.lr = a.warmup_lr;
    settings.hidden = config.model.hidden.clone();

    let seed = common.seed;
    let out = common.out.clone();
    let mut written = Vec::new();
    let on_pass = |state: &PassState, m: &PassMetrics| -> stic_core::Result<()> {
        let name = format!("feature_p{}.stic", m.pass);
        checkpoint::save_checkpoint(out.join(&name), &state.model, m.pass, seed)?;
        written.push(name);
        Ok(())
    };
    let (models, log) = attentive::train_attentive(&data, &settings, seed, on_pass)?;
    for name in &written {
        manifest.record(name);
    }
    let mut recon = String::from("iter,loss\n");
    for (i, l) in log.reconstruction.iter().enumerate() {
        let _ = writeln!(recon, "{},{l}", i + 1);
    }
    manifest.write("recon.csv", recon)?;
    manifest.write("metrics.csv", log.train.to_csv())?;
    manifest.write("loss.csv", loss_csv(&log.train))?;
    let sampler = &config.train.sampler;
    for class in 0..data.num_classes {
        let imgs = attentive::sample_images(
            &models,
            &data,
            class,
            config.eval.samples_per_class,
            sampler,
            seed,
        )?;
        let n = imgs.shape()[0];
        let rows: Vec<Tensor> = (0..n).map(|i| imgs.row(i)).collect();
        let (bytes, ext) = grid_bytes(&rows)?;
        manifest.write(&format!("grid_class{class}.{ext}"), bytes)?;
    }
    manifest.finish()
}
