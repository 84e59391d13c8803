//! The subcommands as library functions over an [`ExperimentConfig`].

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use dpl::imaging::synth::{generate_pairs, generate_textures, Pair};
use dpl::imaging::{load_image, save_image, Image, ImageError, Rng};
use dpl::metrics::{score, MetricError, MetricReport, MetricRow};
use dpl::networks::{
    load_checkpoint, pretrain_psi, save_checkpoint, CheckpointError, FeatureNetPsi, GeneratorF, Module,
    NetworkError, PretrainReport,
};
use dpl::trainer::{DplNetworks, History, IterationRecord, TrainError, Trainer};

use crate::config::{ConfigError, ExperimentConfig, Metric};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("pretraining reached {accuracy:.4} held-out accuracy, below the {gate} gate; try another seed or more epochs")]
    Gate { accuracy: f64, gate: f64 },
    #[error("training halted at iteration {iteration}: non-finite {what}")]
    Halt { iteration: usize, what: &'static str },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(TrainError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { iteration, what } => CliError::Halt { iteration, what },
            other => CliError::Train(other),
        }
    }
}

impl CliError {
    /// 1 usage or config, 2 pretraining gate, 3 numerical halt.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Gate { .. } => 2,
            CliError::Halt { .. } => 3,
            _ => 1,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|source| CliError::Io { path: path.to_owned(), source })
}

fn create_dir(path: &Path) -> Result<()> {
    io(path, fs::create_dir_all(path))
}

/// Independent streams for data, pretraining and training, forked in a
/// fixed order from the run seed.
pub struct Streams {
    pub data: Rng,
    pub pretrain: Rng,
    pub train: Rng,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        let mut root = Rng::seed(seed);
        Streams { data: root.fork(), pretrain: root.fork(), train: root.fork() }
    }
}

pub const SPLITS: [&str; 2] = ["train", "val"];
pub const MANIFEST: &str = "manifest.txt";

pub fn psi_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out.join("psi.dplc")
}

pub fn generator_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out.join("f.dplc")
}

/// Writes `<out>/{train,val}/NNNN_{x,y}.ppm` and a manifest per split with
/// one `x y seed` line per pair. Returns the pair counts.
pub fn gen_data(cfg: &ExperimentConfig) -> Result<[usize; 2]> {
    let mut rng = Streams::new(cfg.seed).data;
    let mut counts = [0; 2];
    for (k, (split, count)) in SPLITS.iter().zip([cfg.train_pairs, cfg.val_pairs]).enumerate() {
        let dir = cfg.out.join(split);
        create_dir(&dir)?;
        let pairs = generate_pairs(cfg.task, count, cfg.size, &mut rng)?;
        let mut manifest = String::new();
        for (i, p) in pairs.iter().enumerate() {
            let (x, y) = (format!("{:04}_x.ppm", i + 1), format!("{:04}_y.ppm", i + 1));
            save_image(&p.x, dir.join(&x))?;
            save_image(&p.y, dir.join(&y))?;
            manifest.push_str(&format!("{x} {y} {}\n", cfg.seed));
        }
        io(&dir, fs::write(dir.join(MANIFEST), manifest))?;
        counts[k] = pairs.len();
    }
    Ok(counts)
}

/// Pairs of one split in manifest order, with their ids.
pub fn load_split(cfg: &ExperimentConfig, split: &str) -> Result<Vec<(String, Pair)>> {
    let dir = cfg.out.join(split);
    let manifest = dir.join(MANIFEST);
    let text = io(&manifest, fs::read_to_string(&manifest))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let mut parts = line.split_whitespace();
            let (Some(x), Some(y)) = (parts.next(), parts.next()) else {
                return Err(CliError::Usage(format!("{}: malformed line '{line}'", manifest.display())));
            };
            let id = x.trim_end_matches(".ppm").trim_end_matches("_x").to_owned();
            let pair = Pair { x: load_image(dir.join(x))?, y: load_image(dir.join(y))? };
            Ok((id, pair))
        })
        .collect()
}

/// Pretrains Ψ on freshly generated textures, writes `pretrain_log.csv`
/// and, if the gate is met, `psi.dplc`.
pub fn pretrain(cfg: &ExperimentConfig) -> Result<PretrainReport> {
    create_dir(&cfg.out)?;
    let mut rng = Streams::new(cfg.seed).pretrain;
    let train = generate_textures(cfg.pretrain.samples, cfg.size, &mut rng)?;
    let held = generate_textures(cfg.pretrain.held_out, cfg.size, &mut rng)?;
    let mut psi = FeatureNetPsi::<f32>::new(&mut rng);
    let report = pretrain_psi(&mut psi, &train, &held, &cfg.pretrain.config(), &mut rng)?;

    let log = cfg.out.join("pretrain_log.csv");
    let mut w = csv::Writer::from_path(&log)?;
    w.write_record(["epoch", "mean_loss", "held_out_accuracy"])?;
    w.write_record(["0", "", &report.initial_accuracy.to_string()])?;
    for (i, (loss, acc)) in report.mean_loss.iter().zip(&report.epoch_accuracy).enumerate() {
        w.write_record([(i + 1).to_string(), loss.to_string(), acc.to_string()])?;
    }
    w.flush().map_err(|source| CliError::Io { path: log.clone(), source })?;

    let accuracy = report.final_accuracy();
    if accuracy < cfg.pretrain.gate {
        return Err(CliError::Gate { accuracy, gate: cfg.pretrain.gate });
    }
    save_checkpoint(&psi.to_checkpoint(), psi_path(cfg))?;
    Ok(report)
}

pub fn load_psi(path: &Path) -> Result<FeatureNetPsi<f32>> {
    let mut psi = FeatureNetPsi::<f32>::new(&mut Rng::seed(0));
    psi.load_checkpoint(&load_checkpoint(path)?)?;
    psi.set_trainable(false);
    Ok(psi)
}

pub fn load_generator(path: &Path) -> Result<GeneratorF<f32>> {
    let mut f = GeneratorF::<f32>::new(&mut Rng::seed(0));
    f.load_checkpoint(&load_checkpoint(path)?)?;
    Ok(f)
}

pub const HISTORY_HEADER: [&str; 12] = [
    "iteration",
    "sample",
    "generator_loss",
    "d_c",
    "perceptual",
    "contextual",
    "pixel_l1",
    "color",
    "texture",
    "selector_updated",
    "generator_norm",
    "selector_norm",
];

fn history_row(r: &IterationRecord) -> [String; 12] {
    let c = &r.components;
    [
        r.iteration.to_string(),
        r.sample.to_string(),
        r.generator_loss.to_string(),
        r.d_c.to_string(),
        c.perceptual.to_string(),
        c.contextual.to_string(),
        c.pixel_l1.to_string(),
        c.color.to_string(),
        c.texture.to_string(),
        u8::from(r.selector_updated).to_string(),
        r.generator_norm.to_string(),
        r.selector_norm.to_string(),
    ]
}

/// Runs the training loop on the `train` split against `psi` and writes
/// `f.dplc`, `history.csv` and triptychs `samples/iter_NNNNN.ppm`
/// (x, F(x), y). On a numerical halt the history up to the halt is kept.
pub fn train(cfg: &ExperimentConfig, psi: &Path) -> Result<History> {
    let psi = load_psi(psi)?;
    let data: Vec<Pair> = load_split(cfg, "train")?.into_iter().map(|(_, p)| p).collect();
    let samples = cfg.out.join("samples");
    create_dir(&samples)?;
    let mut rng = Streams::new(cfg.seed).train;
    let nets = DplNetworks::new(psi, &mut rng);
    let mut trainer = Trainer::new(cfg.dpl(), nets, &mut rng)?;

    let path = cfg.out.join("history.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(HISTORY_HEADER)?;
    let outcome = (|| -> Result<()> {
        while trainer.state.iteration < trainer.config.iterations {
            let step = trainer.step(&data)?;
            let r = &step.record;
            w.write_record(history_row(r))?;
            if r.iteration % cfg.sample_every == 0 {
                let strip = Image::hconcat(&[&step.x, &step.generated, &step.y])?;
                save_image(&strip, samples.join(format!("iter_{:05}.ppm", r.iteration)))?;
            }
            if r.iteration % 500 == 0 {
                eprintln!(
                    "iteration {}: generator loss {:.5}, d_c {:.5}",
                    r.iteration, r.generator_loss, r.d_c
                );
            }
        }
        Ok(())
    })();
    w.flush().map_err(|source| CliError::Io { path: path.clone(), source })?;
    outcome?;
    save_checkpoint(&trainer.nets.f.to_checkpoint(), generator_path(cfg))?;
    Ok(trainer.history)
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    /// Generator checkpoint; `None` evaluates a freshly initialized
    /// (identity) generator.
    pub generator: Option<PathBuf>,
    pub psi: Option<PathBuf>,
    /// Feed the targets instead of the sources.
    pub targets_as_inputs: bool,
}

fn metric_value(row: &MetricRow, m: Metric) -> f64 {
    match m {
        Metric::Psnr => row.psnr,
        Metric::MsSsim => row.ms_ssim,
        Metric::Dfd => row.dfd,
    }
}

/// Scores the generator on the `val` split and writes `report.csv`: one row
/// per pair and a final `mean` row, columns `id` and the configured metrics.
pub fn eval(cfg: &ExperimentConfig, opts: &EvalOptions) -> Result<MetricReport> {
    let psi = load_psi(&opts.psi.clone().unwrap_or_else(|| psi_path(cfg)))?;
    let f = match &opts.generator {
        Some(p) => load_generator(p)?,
        None => GeneratorF::new(&mut Rng::seed(cfg.seed)),
    };
    let mut rows = Vec::new();
    for (id, pair) in load_split(cfg, "val")? {
        let input = if opts.targets_as_inputs { &pair.y } else { &pair.x };
        let out = Image::from_tensor(&f.apply(&input.to_tensor::<f32>())?)?;
        rows.push(score(id, &out, &pair.y, &psi)?);
    }
    let report = MetricReport::from_rows(rows)?;

    let path = cfg.out.join("report.csv");
    let mut w = csv::Writer::from_path(&path)?;
    let header: Vec<&str> = std::iter::once("id").chain(cfg.metrics.iter().map(|m| m.name())).collect();
    w.write_record(&header)?;
    for row in report.rows.iter().chain([&report.mean]) {
        let mut rec = vec![row.id.clone()];
        rec.extend(cfg.metrics.iter().map(|&m| metric_value(row, m).to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|source| CliError::Io { path, source })?;
    Ok(report)
}

/// Applies the configured anchor distortion to one PPM.
pub fn distort(cfg: &ExperimentConfig, input: &Path, output: &Path) -> Result<()> {
    let spec = cfg
        .triplet
        .distortion_spec()
        .ok_or_else(|| CliError::Usage("dpl.triplet.distortion is none; nothing to apply".into()))?;
    let image = load_image(input)?;
    let out = spec.apply(&image, &mut Rng::seed(cfg.seed))?;
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    save_image(&out, output)?;
    Ok(())
}

/// Writes the resolved configuration next to the outputs.
pub fn record_config(cfg: &ExperimentConfig) -> Result<()> {
    create_dir(&cfg.out)?;
    let path = cfg.out.join("config.txt");
    let mut f = io(&path, fs::File::create(&path))?;
    io(&path, f.write_all(crate::config::emit_config(cfg).as_bytes()))
}
