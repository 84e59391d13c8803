//! Experiment configuration: a line-oriented `key = value` file with `#`
//! comments and dotted keys, plus `--key value` overrides.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dpl::imaging::synth::Task;
use dpl::imaging::{DistortionSpec, JitterRanges};
use dpl::networks::PretrainConfig;
use dpl::trainer::{DplConfig, FeatureSpace, FineTuneMode, TripletKind, TripletStrategy};

/// Where a setting came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Origin {
    Default,
    Line(usize),
    Env(&'static str),
    Flag,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Default => f.write_str("default"),
            Origin::Line(n) => write!(f, "line {n}"),
            Origin::Env(var) => write!(f, "environment variable {var}"),
            Origin::Flag => f.write_str("command line"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{key} ({origin}): {message}")]
pub struct ConfigError {
    pub key: String,
    pub origin: Origin,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    Psnr,
    MsSsim,
    Dfd,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Psnr, Metric::MsSsim, Metric::Dfd];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Psnr => "psnr",
            Metric::MsSsim => "ms_ssim",
            Metric::Dfd => "dfd",
        }
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "psnr" => Ok(Metric::Psnr),
            "ms_ssim" => Ok(Metric::MsSsim),
            "dfd" => Ok(Metric::Dfd),
            other => Err(format!("unknown metric '{other}' (expected psnr, ms_ssim or dfd)")),
        }
    }
}

/// Which distortion task-oriented anchors use; the ranges live alongside
/// so switching kinds keeps them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistortionKind {
    None,
    ColorJitter,
    GaussianBlur,
    Grayscale,
}

impl DistortionKind {
    fn name(self) -> &'static str {
        match self {
            DistortionKind::None => "none",
            DistortionKind::ColorJitter => "color_jitter",
            DistortionKind::GaussianBlur => "gaussian_blur",
            DistortionKind::Grayscale => "grayscale",
        }
    }
}

impl FromStr for DistortionKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(DistortionKind::None),
            "color_jitter" => Ok(DistortionKind::ColorJitter),
            "gaussian_blur" => Ok(DistortionKind::GaussianBlur),
            "grayscale" => Ok(DistortionKind::Grayscale),
            other => Err(format!(
                "unknown distortion '{other}' (expected none, color_jitter, gaussian_blur or grayscale)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletSettings {
    pub kind: TripletKind,
    pub crop: usize,
    pub distortion: DistortionKind,
    pub blur_sigma: (f64, f64),
    pub jitter: JitterRanges,
}

impl Default for TripletSettings {
    fn default() -> Self {
        TripletSettings {
            kind: TripletKind::TaskOriented,
            crop: 16,
            distortion: DistortionKind::ColorJitter,
            blur_sigma: (1.0, 2.0),
            jitter: JitterRanges::default(),
        }
    }
}

impl TripletSettings {
    /// The configured distortion, if any.
    pub fn distortion_spec(&self) -> Option<DistortionSpec> {
        match self.distortion {
            DistortionKind::None => None,
            DistortionKind::ColorJitter => Some(DistortionSpec::ColorJitter(self.jitter)),
            DistortionKind::GaussianBlur => Some(DistortionSpec::blur(self.blur_sigma.0, self.blur_sigma.1)),
            DistortionKind::Grayscale => Some(DistortionSpec::Grayscale),
        }
    }

    pub fn strategy(&self) -> TripletStrategy {
        let distortion = match self.kind {
            TripletKind::TaskOriented => self.distortion_spec(),
            _ => None,
        };
        TripletStrategy { kind: self.kind, distortion, crop: self.crop }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSettings {
    pub samples: usize,
    pub held_out: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    /// Held-out accuracy below which `pretrain` fails.
    pub gate: f64,
    pub augment: bool,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        let d = PretrainConfig::default();
        PretrainSettings {
            samples: 2000,
            held_out: 500,
            epochs: d.epochs,
            lr: d.lr,
            batch: d.batch,
            gate: 0.8,
            augment: d.augment,
        }
    }
}

impl PretrainSettings {
    pub fn config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            batch: self.batch,
            target_accuracy: self.gate,
            // the gate is applied by the command so the log is written either way
            min_accuracy: 0.0,
            augment: self.augment,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub task: Task,
    pub size: usize,
    pub train_pairs: usize,
    pub val_pairs: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub metrics: Vec<Metric>,
    pub pretrain: PretrainSettings,
    pub triplet: TripletSettings,
    /// Everything but the triplet strategy, which `dpl()` fills in.
    pub train: DplConfig,
    pub sample_every: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let triplet = TripletSettings::default();
        let train = DplConfig { strategy: triplet.strategy(), ..DplConfig::default() };
        ExperimentConfig {
            task: Task::Colorcast,
            size: 32,
            train_pairs: 400,
            val_pairs: 50,
            seed: 1,
            out: PathBuf::from("run"),
            metrics: Metric::ALL.to_vec(),
            pretrain: PretrainSettings::default(),
            triplet,
            train,
            sample_every: 500,
        }
    }
}

/// Every key, in emission order.
pub const KEYS: &[&str] = &[
    "task",
    "size",
    "seed",
    "out",
    "metrics",
    "data.train",
    "data.val",
    "pretrain.samples",
    "pretrain.held_out",
    "pretrain.epochs",
    "pretrain.lr",
    "pretrain.batch",
    "pretrain.gate",
    "pretrain.augment",
    "dpl.mode",
    "dpl.interval",
    "dpl.margin",
    "dpl.iterations",
    "dpl.lr_generator",
    "dpl.lr_selector",
    "dpl.augment",
    "dpl.loss.perceptual",
    "dpl.loss.contextual",
    "dpl.loss.pixel_l1",
    "dpl.loss.color",
    "dpl.loss.texture",
    "dpl.color_sigma",
    "dpl.contextual.bandwidth",
    "dpl.contextual.epsilon",
    "dpl.contextual.features",
    "dpl.triplet.kind",
    "dpl.triplet.crop",
    "dpl.triplet.distortion",
    "dpl.triplet.blur_sigma",
    "dpl.triplet.jitter_scale",
    "dpl.triplet.jitter_bias",
    "train.sample_every",
];

fn parse<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("cannot parse '{v}': {e}"))
}

fn positive_int(v: &str) -> Result<usize, String> {
    match parse::<usize>(v)? {
        0 => Err("must be ≥ 1".into()),
        n => Ok(n),
    }
}

fn non_negative(v: &str, what: &str) -> Result<f64, String> {
    let x = parse::<f64>(v)?;
    if x.is_finite() && x >= 0.0 {
        Ok(x)
    } else {
        Err(format!("{what} must be ≥ 0"))
    }
}

fn positive(v: &str, what: &str) -> Result<f64, String> {
    let x = parse::<f64>(v)?;
    if x.is_finite() && x > 0.0 {
        Ok(x)
    } else {
        Err(format!("{what} must be > 0"))
    }
}

fn range(v: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = v
        .split_once(',')
        .ok_or_else(|| format!("expected 'lo,hi', got '{v}'"))?;
    let (lo, hi) = (parse::<f64>(lo.trim())?, parse::<f64>(hi.trim())?);
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(format!("range {lo},{hi} must be finite with lo ≤ hi"));
    }
    Ok((lo, hi))
}

fn boolean(v: &str) -> Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(format!("expected true or false, got '{other}'")),
    }
}

impl ExperimentConfig {
    /// The trainer configuration with the triplet strategy filled in.
    pub fn dpl(&self) -> DplConfig {
        DplConfig { strategy: self.triplet.strategy(), ..self.train.clone() }
    }

    /// Sets one key from its textual value, checking that value on its own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let t = &mut self.train;
        match key {
            "task" => {
                self.task = parse(value)?;
                if self.task == Task::Textures {
                    return Err("textures is the pretraining set, not a translation task".into());
                }
            }
            "size" => {
                let n = parse::<usize>(value)?;
                if n < 8 || n % 4 != 0 {
                    return Err(format!("image size {n} must be a multiple of 4 and at least 8"));
                }
                self.size = n;
            }
            "seed" => self.seed = parse(value)?,
            "out" => {
                if value.is_empty() {
                    return Err("output directory must not be empty".into());
                }
                self.out = PathBuf::from(value);
            }
            "metrics" => {
                let mut m = value
                    .split(',')
                    .map(|s| parse::<Metric>(s.trim()))
                    .collect::<Result<Vec<_>, _>>()?;
                m.sort();
                m.dedup();
                if m.is_empty() {
                    return Err("at least one metric is required".into());
                }
                self.metrics = m;
            }
            "data.train" => self.train_pairs = positive_int(value)?,
            "data.val" => self.val_pairs = positive_int(value)?,
            "pretrain.samples" => self.pretrain.samples = positive_int(value)?,
            "pretrain.held_out" => self.pretrain.held_out = positive_int(value)?,
            "pretrain.epochs" => self.pretrain.epochs = positive_int(value)?,
            "pretrain.lr" => self.pretrain.lr = positive(value, "learning rate")?,
            "pretrain.batch" => self.pretrain.batch = positive_int(value)?,
            "pretrain.gate" => {
                let g = non_negative(value, "accuracy gate")?;
                if g > 1.0 {
                    return Err("accuracy gate must be ≤ 1".into());
                }
                self.pretrain.gate = g;
            }
            "pretrain.augment" => self.pretrain.augment = boolean(value)?,
            "dpl.mode" => t.mode = parse::<FineTuneMode>(value)?,
            "dpl.interval" => t.interval = positive_int(value)?,
            "dpl.margin" => t.margin = non_negative(value, "margin")?,
            "dpl.iterations" => t.iterations = positive_int(value)?,
            "dpl.lr_generator" => t.lr_generator = positive(value, "learning rate")?,
            "dpl.lr_selector" => t.lr_selector = positive(value, "learning rate")?,
            "dpl.augment" => t.augment = boolean(value)?,
            "dpl.loss.perceptual" => t.weights.perceptual = non_negative(value, "loss weight")?,
            "dpl.loss.contextual" => t.weights.contextual = non_negative(value, "loss weight")?,
            "dpl.loss.pixel_l1" => t.weights.pixel_l1 = non_negative(value, "loss weight")?,
            "dpl.loss.color" => t.weights.color = non_negative(value, "loss weight")?,
            "dpl.loss.texture" => t.weights.texture = non_negative(value, "loss weight")?,
            "dpl.color_sigma" => t.color_sigma = positive(value, "color blur sigma")?,
            "dpl.contextual.bandwidth" => t.contextual.bandwidth = positive(value, "bandwidth")?,
            "dpl.contextual.epsilon" => t.contextual.epsilon = positive(value, "epsilon")?,
            "dpl.contextual.features" => t.contextual_features = parse::<FeatureSpace>(value)?,
            "dpl.triplet.kind" => self.triplet.kind = parse(value)?,
            "dpl.triplet.crop" => {
                let n = parse::<usize>(value)?;
                if n == 0 || n % 4 != 0 {
                    return Err(format!("crop size {n} must be a positive multiple of 4"));
                }
                self.triplet.crop = n;
            }
            "dpl.triplet.distortion" => self.triplet.distortion = parse(value)?,
            "dpl.triplet.blur_sigma" => {
                let r = range(value)?;
                DistortionSpec::blur(r.0, r.1).validate().map_err(|e| e.to_string())?;
                self.triplet.blur_sigma = r;
            }
            "dpl.triplet.jitter_scale" => {
                let j = JitterRanges { scale: range(value)?, ..self.triplet.jitter };
                j.validate().map_err(|e| e.to_string())?;
                self.triplet.jitter = j;
            }
            "dpl.triplet.jitter_bias" => {
                let j = JitterRanges { bias: range(value)?, ..self.triplet.jitter };
                j.validate().map_err(|e| e.to_string())?;
                self.triplet.jitter = j;
            }
            "train.sample_every" => self.sample_every = positive_int(value)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Textual value of a key, in the form `set` accepts.
    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        let r = |(lo, hi): (f64, f64)| format!("{lo},{hi}");
        Some(match key {
            "task" => self.task.to_string(),
            "size" => self.size.to_string(),
            "seed" => self.seed.to_string(),
            "out" => self.out.display().to_string(),
            "metrics" => self.metrics.iter().map(|m| m.name()).collect::<Vec<_>>().join(","),
            "data.train" => self.train_pairs.to_string(),
            "data.val" => self.val_pairs.to_string(),
            "pretrain.samples" => self.pretrain.samples.to_string(),
            "pretrain.held_out" => self.pretrain.held_out.to_string(),
            "pretrain.epochs" => self.pretrain.epochs.to_string(),
            "pretrain.lr" => self.pretrain.lr.to_string(),
            "pretrain.batch" => self.pretrain.batch.to_string(),
            "pretrain.gate" => self.pretrain.gate.to_string(),
            "pretrain.augment" => self.pretrain.augment.to_string(),
            "dpl.mode" => t.mode.to_string(),
            "dpl.interval" => t.interval.to_string(),
            "dpl.margin" => t.margin.to_string(),
            "dpl.iterations" => t.iterations.to_string(),
            "dpl.lr_generator" => t.lr_generator.to_string(),
            "dpl.lr_selector" => t.lr_selector.to_string(),
            "dpl.augment" => t.augment.to_string(),
            "dpl.loss.perceptual" => t.weights.perceptual.to_string(),
            "dpl.loss.contextual" => t.weights.contextual.to_string(),
            "dpl.loss.pixel_l1" => t.weights.pixel_l1.to_string(),
            "dpl.loss.color" => t.weights.color.to_string(),
            "dpl.loss.texture" => t.weights.texture.to_string(),
            "dpl.color_sigma" => t.color_sigma.to_string(),
            "dpl.contextual.bandwidth" => t.contextual.bandwidth.to_string(),
            "dpl.contextual.epsilon" => t.contextual.epsilon.to_string(),
            "dpl.contextual.features" => t.contextual_features.name().to_string(),
            "dpl.triplet.kind" => self.triplet.kind.to_string(),
            "dpl.triplet.crop" => self.triplet.crop.to_string(),
            "dpl.triplet.distortion" => self.triplet.distortion.name().to_string(),
            "dpl.triplet.blur_sigma" => r(self.triplet.blur_sigma),
            "dpl.triplet.jitter_scale" => r(self.triplet.jitter.scale),
            "dpl.triplet.jitter_bias" => r(self.triplet.jitter.bias),
            "train.sample_every" => self.sample_every.to_string(),
            _ => return None,
        })
    }
}

/// Collects settings from their sources, remembering where each came from.
#[derive(Debug, Clone, Default)]
pub struct ConfigBuilder {
    config: ExperimentConfig,
    origins: HashMap<String, Origin>,
}

impl ConfigBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: &str, origin: Origin) -> Result<&mut Self, ConfigError> {
        let err = |message: String| ConfigError { key: key.to_owned(), origin: origin.clone(), message };
        if !KEYS.contains(&key) {
            return Err(err("unknown key".into()));
        }
        self.config.set(key, value).map_err(err)?;
        self.origins.insert(key.to_owned(), origin);
        Ok(self)
    }

    /// Applies a whole config file.
    pub fn text(&mut self, text: &str) -> Result<&mut Self, ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let origin = Origin::Line(i + 1);
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError {
                    key: line.to_owned(),
                    origin,
                    message: "expected 'key = value'".into(),
                });
            };
            self.set(key.trim(), value.trim(), origin)?;
        }
        Ok(self)
    }

    pub fn file(&mut self, path: &Path) -> Result<&mut Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            key: path.display().to_string(),
            origin: Origin::Default,
            message: format!("cannot read config file: {e}"),
        })?;
        self.text(&text)
    }

    /// `--key value` and `--key=value` pairs.
    pub fn flags<S: AsRef<str>>(&mut self, args: &[S]) -> Result<&mut Self, ConfigError> {
        let mut it = args.iter().map(AsRef::as_ref);
        while let Some(arg) = it.next() {
            let Some(flag) = arg.strip_prefix("--") else {
                return Err(ConfigError {
                    key: arg.to_owned(),
                    origin: Origin::Flag,
                    message: "expected --key value".into(),
                });
            };
            let (key, value) = match flag.split_once('=') {
                Some((k, v)) => (k, v.to_owned()),
                None => {
                    let v = it.next().ok_or_else(|| ConfigError {
                        key: flag.to_owned(),
                        origin: Origin::Flag,
                        message: "missing value".into(),
                    })?;
                    (flag, v.to_owned())
                }
            };
            self.set(key, &value, Origin::Flag)?;
        }
        Ok(self)
    }

    /// Settings that only make sense together.
    pub fn build(&self) -> Result<ExperimentConfig, ConfigError> {
        let c = &self.config;
        let err = |key: &str, message: String| ConfigError {
            key: key.to_owned(),
            origin: self.origins.get(key).cloned().unwrap_or(Origin::Default),
            message,
        };
        if !c.train.weights.as_array().iter().any(|w| *w > 0.0) {
            let key = KEYS
                .iter()
                .filter(|k| k.starts_with("dpl.loss."))
                .filter_map(|k| self.origins.get(*k).map(|o| (*k, o)))
                .max_by_key(|(_, o)| match o {
                    Origin::Line(n) => *n,
                    _ => usize::MAX,
                })
                .map_or("dpl.loss.perceptual", |(k, _)| k);
            return Err(err(key, "at least one loss weight must be positive".into()));
        }
        if c.triplet.kind == TripletKind::TaskOriented && c.triplet.distortion == DistortionKind::None {
            return Err(err("dpl.triplet.distortion", "task_oriented triplets need a distortion".into()));
        }
        if c.triplet.crop > c.size {
            return Err(err(
                "dpl.triplet.crop",
                format!("crop size {} exceeds image size {}", c.triplet.crop, c.size),
            ));
        }
        if c.metrics.contains(&Metric::MsSsim) && c.size < dpl::metrics::MS_SSIM_MIN_EXTENT {
            return Err(err(
                "metrics",
                format!("ms_ssim needs images of at least {} pixels", dpl::metrics::MS_SSIM_MIN_EXTENT),
            ));
        }
        c.dpl().validate().map_err(|e| err("dpl", e.to_string()))?;
        Ok(c.clone())
    }
}

/// Parses a config file's text on top of the defaults.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    ConfigBuilder::new().text(text)?.build()
}

/// Full `key = value` listing of `config`, one key per line.
pub fn emit_config(config: &ExperimentConfig) -> String {
    let mut s = String::new();
    for key in KEYS {
        let value = config.get(key).expect("every listed key has a value");
        s.push_str(&format!("{key} = {value}\n"));
    }
    s
}
