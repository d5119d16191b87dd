//! Flat `key = value` run configuration.
//!
//! Lines hold one assignment each; `#` starts a comment. Unknown keys are
//! rejected with their line number. `profile` is applied before every other
//! key regardless of where it appears, so a file can pick the desk profile
//! and still override single values.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::sampler::Init;
use crate::score;
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    /// Full-scale defaults.
    Full,
    /// [`TrainConfig::desk`].
    Desk,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Gaussians,
    Moons,
    Shapes,
    Idx,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Mlp,
    Cnn,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub kind: DatasetKind,
    pub classes: usize,
    pub per_class: usize,
    pub spread: f64,
    pub noise: f64,
    pub side: usize,
    pub images: String,
    pub labels: String,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub hidden: Vec<usize>,
    pub score_head: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentiveKeys {
    pub features: usize,
    pub glimpses: usize,
    /// 0 picks half the image side.
    pub grid: usize,
    pub read_width: usize,
    pub warmup_iters: usize,
    pub warmup_batch: usize,
    pub warmup_lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub k: usize,
    pub cls_epochs: usize,
    pub samples_per_class: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub profile: Profile,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub score_weight: f64,
    pub attentive: AttentiveKeys,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            profile: Profile::Full,
            data: DataConfig {
                kind: DatasetKind::Gaussians,
                classes: 3,
                per_class: 100,
                spread: 0.2,
                noise: 0.1,
                side: 8,
                images: String::new(),
                labels: String::new(),
                seed: None,
            },
            model: ModelConfig {
                kind: ModelKind::Mlp,
                hidden: vec![64, 64],
                score_head: false,
            },
            train: TrainConfig::default(),
            score_weight: score::DEFAULT_WEIGHT,
            attentive: AttentiveKeys {
                features: crate::attentive::DEFAULT_FEATURE_WIDTH,
                glimpses: crate::attentive::DEFAULT_GLIMPSES,
                grid: 0,
                read_width: 64,
                warmup_iters: 300,
                warmup_batch: 16,
                warmup_lr: 3e-3,
            },
            eval: EvalConfig {
                k: crate::metrics::DEFAULT_K,
                cls_epochs: 20,
                samples_per_class: 16,
            },
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("{key}: cannot parse {value:?}"))
}

fn parse_bool(key: &str, value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("{key}: expected true or false, got {value:?}")),
    }
}

fn parse_list(key: &str, value: &str) -> std::result::Result<Vec<usize>, String> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|s| parse(key, s.trim())).collect()
}

fn list(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    /// Parses file contents on top of the defaults.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                line: i + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            entries.push((i + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let mut config = RunConfig::default();
        // Profile first, so later keys refine it.
        for (line, k, v) in entries.iter().filter(|(_, k, _)| k == "profile") {
            config
                .set(k, v)
                .map_err(|msg| Error::Config { line: *line, msg })?;
        }
        for (line, k, v) in entries.iter().filter(|(_, k, _)| k != "profile") {
            config
                .set(k, v)
                .map_err(|msg| Error::Config { line: *line, msg })?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::parse_str(&text)
    }

    /// Applies `key=value` overrides in order; the last occurrence wins.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for (i, o) in overrides.iter().enumerate() {
            let o = o.as_ref();
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Config {
                line: 0,
                msg: format!("override #{} must be key=value, got {o:?}", i + 1),
            })?;
            self.set(k.trim(), v.trim())
                .map_err(|msg| Error::Config { line: 0, msg })?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.train.sampler.validate()?;
        if self.data.classes < 2 {
            return Err(Error::invalid("data.classes must be at least 2"));
        }
        if self.data.per_class == 0 {
            return Err(Error::invalid("data.per_class must be positive"));
        }
        if self.eval.k == 0 {
            return Err(Error::invalid("eval.k must be positive"));
        }
        Ok(())
    }

    /// Assigns one key. Errors carry a message without line context.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let t = &mut self.train;
        match key {
            "profile" => {
                self.profile = match value {
                    "full" => Profile::Full,
                    "desk" => Profile::Desk,
                    _ => return Err(format!("profile: expected full or desk, got {value:?}")),
                };
                let sampler = t.sampler.clone();
                *t = match self.profile {
                    Profile::Full => TrainConfig::default(),
                    Profile::Desk => TrainConfig::desk(),
                };
                t.sampler = sampler;
            }
            "data.kind" => {
                self.data.kind = match value {
                    "gaussians" => DatasetKind::Gaussians,
                    "moons" => DatasetKind::Moons,
                    "shapes" => DatasetKind::Shapes,
                    "idx" => DatasetKind::Idx,
                    _ => return Err(format!("data.kind: unknown dataset {value:?}")),
                }
            }
            "data.classes" => self.data.classes = parse(key, value)?,
            "data.per_class" => self.data.per_class = parse(key, value)?,
            "data.spread" => self.data.spread = parse(key, value)?,
            "data.noise" => self.data.noise = parse(key, value)?,
            "data.side" => self.data.side = parse(key, value)?,
            "data.images" => self.data.images = value.to_string(),
            "data.labels" => self.data.labels = value.to_string(),
            "data.seed" => {
                self.data.seed = if value == "run" {
                    None
                } else {
                    Some(parse(key, value)?)
                }
            }
            "model.kind" => {
                self.model.kind = match value {
                    "mlp" => ModelKind::Mlp,
                    "cnn" => ModelKind::Cnn,
                    _ => return Err(format!("model.kind: expected mlp or cnn, got {value:?}")),
                }
            }
            "model.hidden" => self.model.hidden = parse_list(key, value)?,
            "model.score_head" => self.model.score_head = parse_bool(key, value)?,
            "train.passes" => t.passes = parse(key, value)?,
            "train.iterations" => t.iterations_per_pass = parse(key, value)?,
            "train.batch_real" => t.batch_real = parse(key, value)?,
            "train.batch_mixup" => t.batch_mixup = parse(key, value)?,
            "train.batch_fake" => t.batch_fake = parse(key, value)?,
            "train.batch_fake_mixup" => t.batch_fake_mixup = parse(key, value)?,
            "train.lr" => t.lr = parse(key, value)?,
            "train.lr_decay" => t.lr_decay = parse(key, value)?,
            "train.decay_interval" => t.decay_interval = parse(key, value)?,
            "train.restart_prob" => t.chain_restart_prob = parse(key, value)?,
            "train.preprocess_noise" => t.preprocess_noise = parse(key, value)?,
            "train.mixup_alpha" => t.mixup_alpha = parse(key, value)?,
            "train.refresh_stride" => t.refresh_stride = parse(key, value)?,
            "train.buffer_size" => {
                t.buffer_size = if value == "auto" {
                    None
                } else {
                    Some(parse(key, value)?)
                }
            }
            "sampler.eps1" => t.sampler.eps1 = parse(key, value)?,
            "sampler.eps2" => t.sampler.eps2 = parse(key, value)?,
            "sampler.eps3" => t.sampler.eps3 = parse(key, value)?,
            "sampler.steps" => t.sampler.steps = parse(key, value)?,
            "sampler.init" => {
                t.sampler.init = match value {
                    "gaussian" => Init::Gaussian,
                    "blank" => Init::Blank,
                    "uniform" => Init::Uniform,
                    _ => {
                        return Err(format!(
                            "sampler.init: expected gaussian, blank or uniform, got {value:?}"
                        ))
                    }
                }
            }
            "sampler.clip" => {
                t.sampler.clip_to = if value == "none" {
                    None
                } else {
                    let (lo, hi) = value.split_once(',').ok_or_else(|| {
                        format!("sampler.clip: expected none or lo,hi, got {value:?}")
                    })?;
                    Some((parse(key, lo.trim())?, parse(key, hi.trim())?))
                }
            }
            "sampler.gram_layers" => {
                t.sampler.gram_layers = if value == "auto" {
                    None
                } else {
                    Some(parse_list(key, value)?)
                }
            }
            "score.weight" => self.score_weight = parse(key, value)?,
            "attentive.features" => self.attentive.features = parse(key, value)?,
            "attentive.glimpses" => self.attentive.glimpses = parse(key, value)?,
            "attentive.grid" => self.attentive.grid = parse(key, value)?,
            "attentive.read_width" => self.attentive.read_width = parse(key, value)?,
            "attentive.warmup_iters" => self.attentive.warmup_iters = parse(key, value)?,
            "attentive.warmup_batch" => self.attentive.warmup_batch = parse(key, value)?,
            "attentive.warmup_lr" => self.attentive.warmup_lr = parse(key, value)?,
            "eval.k" => self.eval.k = parse(key, value)?,
            "eval.cls_epochs" => self.eval.cls_epochs = parse(key, value)?,
            "eval.samples_per_class" => self.eval.samples_per_class = parse(key, value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let s = &t.sampler;
        vec![
            (
                "profile",
                match self.profile {
                    Profile::Full => "full".into(),
                    Profile::Desk => "desk".into(),
                },
            ),
            (
                "data.kind",
                match self.data.kind {
                    DatasetKind::Gaussians => "gaussians".into(),
                    DatasetKind::Moons => "moons".into(),
                    DatasetKind::Shapes => "shapes".into(),
                    DatasetKind::Idx => "idx".into(),
                },
            ),
            ("data.classes", self.data.classes.to_string()),
            ("data.per_class", self.data.per_class.to_string()),
            ("data.spread", self.data.spread.to_string()),
            ("data.noise", self.data.noise.to_string()),
            ("data.side", self.data.side.to_string()),
            ("data.images", self.data.images.clone()),
            ("data.labels", self.data.labels.clone()),
            (
                "data.seed",
                self.data.seed.map_or("run".into(), |v| v.to_string()),
            ),
            (
                "model.kind",
                match self.model.kind {
                    ModelKind::Mlp => "mlp".into(),
                    ModelKind::Cnn => "cnn".into(),
                },
            ),
            ("model.hidden", list(&self.model.hidden)),
            ("model.score_head", self.model.score_head.to_string()),
            ("train.passes", t.passes.to_string()),
            ("train.iterations", t.iterations_per_pass.to_string()),
            ("train.batch_real", t.batch_real.to_string()),
            ("train.batch_mixup", t.batch_mixup.to_string()),
            ("train.batch_fake", t.batch_fake.to_string()),
            ("train.batch_fake_mixup", t.batch_fake_mixup.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.lr_decay", t.lr_decay.to_string()),
            ("train.decay_interval", t.decay_interval.to_string()),
            ("train.restart_prob", t.chain_restart_prob.to_string()),
            ("train.preprocess_noise", t.preprocess_noise.to_string()),
            ("train.mixup_alpha", t.mixup_alpha.to_string()),
            ("train.refresh_stride", t.refresh_stride.to_string()),
            (
                "train.buffer_size",
                t.buffer_size.map_or("auto".into(), |v| v.to_string()),
            ),
            ("sampler.eps1", s.eps1.to_string()),
            ("sampler.eps2", s.eps2.to_string()),
            ("sampler.eps3", s.eps3.to_string()),
            ("sampler.steps", s.steps.to_string()),
            (
                "sampler.init",
                match s.init {
                    Init::Gaussian => "gaussian".into(),
                    Init::Blank => "blank".into(),
                    Init::Uniform | Init::Given(_) => "uniform".into(),
                },
            ),
            (
                "sampler.clip",
                s.clip_to.map_or("none".into(), |(a, b)| format!("{a},{b}")),
            ),
            (
                "sampler.gram_layers",
                s.gram_layers.as_ref().map_or("auto".into(), |l| list(l)),
            ),
            ("score.weight", self.score_weight.to_string()),
            ("attentive.features", self.attentive.features.to_string()),
            ("attentive.glimpses", self.attentive.glimpses.to_string()),
            ("attentive.grid", self.attentive.grid.to_string()),
            (
                "attentive.read_width",
                self.attentive.read_width.to_string(),
            ),
            (
                "attentive.warmup_iters",
                self.attentive.warmup_iters.to_string(),
            ),
            (
                "attentive.warmup_batch",
                self.attentive.warmup_batch.to_string(),
            ),
            ("attentive.warmup_lr", self.attentive.warmup_lr.to_string()),
            ("eval.k", self.eval.k.to_string()),
            ("eval.cls_epochs", self.eval.cls_epochs.to_string()),
            (
                "eval.samples_per_class",
                self.eval.samples_per_class.to_string(),
            ),
        ]
    }

    /// The resolved configuration in the file grammar.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}
