//! The DPL loop: generator updates through frozen perceptual features,
//! interleaved with triplet fine-tuning of the feature pathway whose
//! gradients are summed over an interval before each optimizer step.

mod triplet;

pub use triplet::{build_triplet, Provenance, Triplet, TripletKind, TripletStrategy};

use std::fmt;
use std::str::FromStr;

use crate::imaging::synth::Pair;
use crate::imaging::{Augmentation, DistortionSpec, Image, ImageError, JitterRanges, Rng};
use crate::losses::{
    color_loss, contextual_loss, perceptual_loss, pixel_loss, texture_loss, triplet_loss,
    ContextualParams, PixelLoss,
};
use crate::networks::{FeatureNetPsi, GeneratorF, Module, NetworkError, SelectionPhi};
use crate::tensor::{Adam, AdamConfig, Real, Tape, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite {what} at iteration {iteration}; run halted")]
    NonFinite { iteration: usize, what: &'static str },
    #[error("freeze discipline violated: {0}")]
    Freeze(String),
    #[error("selector updates are disabled in frozen mode")]
    FrozenMode,
    #[error("selector step requested after {pending} of {interval} accumulations")]
    PrematureApply { pending: usize, interval: usize },
    #[error("training dataset is empty")]
    EmptyDataset,
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// Which parameters the triplet objective trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FineTuneMode {
    /// `Ψ` frozen, `Φ` trained; generator losses see `Φ(Ψ(·))`.
    FeatureSelection,
    /// `Ψ` trained directly; generator losses see `Ψ(·)`.
    Full,
    /// Nothing is fine-tuned: plain perceptual training on `Ψ(·)`.
    Frozen,
}

impl FineTuneMode {
    pub fn name(self) -> &'static str {
        match self {
            FineTuneMode::FeatureSelection => "feature_selection",
            FineTuneMode::Full => "full",
            FineTuneMode::Frozen => "frozen",
        }
    }
}

impl fmt::Display for FineTuneMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FineTuneMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "feature_selection" => Ok(FineTuneMode::FeatureSelection),
            "full" => Ok(FineTuneMode::Full),
            "frozen" => Ok(FineTuneMode::Frozen),
            other => Err(format!(
                "unknown fine-tune mode '{other}' (expected feature_selection, full or frozen)"
            )),
        }
    }
}

/// Features fed to the contextual term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureSpace {
    /// Same features as the perceptual term.
    Selected,
    /// Raw `Ψ` taps.
    Raw,
}

impl FeatureSpace {
    pub fn name(self) -> &'static str {
        match self {
            FeatureSpace::Selected => "selected",
            FeatureSpace::Raw => "raw",
        }
    }
}

impl FromStr for FeatureSpace {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "selected" => Ok(FeatureSpace::Selected),
            "raw" => Ok(FeatureSpace::Raw),
            other => Err(format!("unknown feature space '{other}' (expected selected or raw)")),
        }
    }
}

/// Weights of the generator objective; zero terms are not evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub perceptual: f64,
    pub contextual: f64,
    pub pixel_l1: f64,
    pub color: f64,
    pub texture: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            perceptual: 1.0,
            contextual: 0.0,
            pixel_l1: 0.0,
            color: 0.0,
            texture: 0.0,
        }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 5] {
        [self.perceptual, self.contextual, self.pixel_l1, self.color, self.texture]
    }
}

/// Per-term values of one generator objective evaluation (unweighted).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossComponents {
    pub perceptual: f64,
    pub contextual: f64,
    pub pixel_l1: f64,
    pub color: f64,
    pub texture: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DplConfig {
    pub strategy: TripletStrategy,
    /// Accumulations per selector optimizer step.
    pub interval: usize,
    pub margin: f64,
    pub weights: LossWeights,
    pub contextual: ContextualParams,
    pub contextual_features: FeatureSpace,
    pub color_sigma: f64,
    pub mode: FineTuneMode,
    pub iterations: usize,
    pub lr_generator: f64,
    pub lr_selector: f64,
    /// Random flips and quarter turns of each drawn pair.
    pub augment: bool,
}

impl Default for DplConfig {
    fn default() -> Self {
        DplConfig {
            strategy: TripletStrategy::task_oriented(
                DistortionSpec::ColorJitter(JitterRanges::default()),
                16,
            ),
            interval: 4,
            margin: 1.0,
            weights: LossWeights::default(),
            contextual: ContextualParams::default(),
            contextual_features: FeatureSpace::Selected,
            color_sigma: 3.0,
            mode: FineTuneMode::FeatureSelection,
            iterations: 2000,
            lr_generator: 1e-4,
            lr_selector: 1e-4,
            augment: true,
        }
    }
}

impl DplConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TrainError::InvalidConfig(msg));
        let w = self.weights.as_array();
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("loss weights must be finite and >= 0".into());
        }
        if !w.iter().any(|v| *v > 0.0) {
            return bad("at least one loss weight must be positive".into());
        }
        if self.interval == 0 {
            return bad("accumulation interval must be >= 1".into());
        }
        if !(self.margin.is_finite() && self.margin >= 0.0) {
            return bad("margin must be ≥ 0".into());
        }
        for (name, lr) in [("generator", self.lr_generator), ("selector", self.lr_selector)] {
            if !(lr.is_finite() && lr > 0.0) {
                return bad(format!("{name} learning rate must be > 0"));
            }
        }
        if !(self.color_sigma.is_finite() && self.color_sigma > 0.0) {
            return bad("color blur sigma must be > 0".into());
        }
        self.contextual.validate()?;
        self.strategy.validate()
    }
}

/// `F`, `Ψ` and `Φ` together.
#[derive(Debug, Clone)]
pub struct DplNetworks<T: Real> {
    pub f: GeneratorF<T>,
    pub psi: FeatureNetPsi<T>,
    pub phi: SelectionPhi<T>,
}

impl<T: Real> DplNetworks<T> {
    /// Fresh `F` and `Φ` around a given (pretrained) `Ψ`.
    pub fn new(psi: FeatureNetPsi<T>, rng: &mut Rng) -> Self {
        let f = GeneratorF::new(rng);
        let phi = SelectionPhi::for_psi(rng);
        DplNetworks { f, psi, phi }
    }

    fn selector_params_mut(&mut self, mode: FineTuneMode) -> Vec<&mut Tensor<T>> {
        match mode {
            FineTuneMode::FeatureSelection => self.phi.params_mut(),
            FineTuneMode::Full => self.psi.params_mut(),
            FineTuneMode::Frozen => Vec::new(),
        }
    }

    fn selector_params(&self, mode: FineTuneMode) -> Vec<&Tensor<T>> {
        match mode {
            FineTuneMode::FeatureSelection => self.phi.params(),
            FineTuneMode::Full => self.psi.params(),
            FineTuneMode::Frozen => Vec::new(),
        }
    }

    /// `F` trainable, `Ψ` and `Φ` frozen.
    pub fn enter_generator_phase(&mut self) {
        self.f.set_trainable(true);
        self.psi.set_trainable(false);
        self.phi.set_trainable(false);
    }

    /// `F` frozen, the fine-tuned parameters trainable.
    pub fn enter_selector_phase(&mut self, mode: FineTuneMode) {
        self.f.set_trainable(false);
        self.psi.set_trainable(mode == FineTuneMode::Full);
        self.phi.set_trainable(mode == FineTuneMode::FeatureSelection);
    }

    /// Perceptual features of an image variable under `mode`.
    pub fn perceptual_features(&self, tape: &mut Tape<T>, x: Var, mode: FineTuneMode) -> Result<Vec<Var>> {
        let raw = self.psi.features(tape, x)?;
        if mode == FineTuneMode::FeatureSelection {
            Ok(self.phi.forward(tape, &raw)?)
        } else {
            Ok(raw)
        }
    }
}

/// Optimizer and counter state of a run.
#[derive(Debug, Clone)]
pub struct TrainState<T: Real> {
    /// Completed iterations.
    pub iteration: usize,
    /// Accumulations since the last selector step, in `0..=interval`.
    pub pending: usize,
    pub generator_opt: Adam<T>,
    pub selector_opt: Option<Adam<T>>,
    pub data_rng: Rng,
    pub triplet_rng: Rng,
}

impl<T: Real> TrainState<T> {
    pub fn new(cfg: &DplConfig, nets: &mut DplNetworks<T>, rng: &mut Rng) -> Self {
        let generator_opt = Adam::new(AdamConfig::with_lr(cfg.lr_generator), nets.f.params());
        let selector_opt = (cfg.mode != FineTuneMode::Frozen)
            .then(|| Adam::new(AdamConfig::with_lr(cfg.lr_selector), nets.selector_params(cfg.mode)));
        nets.f.zero_grads();
        for p in nets.selector_params_mut(cfg.mode) {
            p.zero_grad();
        }
        let data_rng = rng.fork();
        let triplet_rng = rng.fork();
        TrainState {
            iteration: 0,
            pending: 0,
            generator_opt,
            selector_opt,
            data_rng,
            triplet_rng,
        }
    }
}

/// Result of one generator update.
#[derive(Debug, Clone)]
pub struct GeneratorOutcome<T: Real> {
    pub loss: f64,
    pub components: LossComponents,
    /// `F(x)` before the update, unclamped.
    pub generated: Tensor<T>,
}

/// Records the weighted generator objective between `F(x)` and `y`.
fn generator_objective<T: Real>(
    tape: &mut Tape<T>,
    nets: &DplNetworks<T>,
    xt: Var,
    y: Var,
    cfg: &DplConfig,
) -> Result<(Var, [Option<Var>; 5])> {
    let w = cfg.weights;
    let mut terms: [Option<Var>; 5] = [None; 5];
    if w.perceptual > 0.0 || w.contextual > 0.0 {
        let raw_x = nets.psi.features(tape, xt)?;
        let raw_y = nets.psi.features(tape, y)?;
        let (sel_x, sel_y) = if cfg.mode == FineTuneMode::FeatureSelection {
            (nets.phi.forward(tape, &raw_x)?, nets.phi.forward(tape, &raw_y)?)
        } else {
            (raw_x.clone(), raw_y.clone())
        };
        if w.perceptual > 0.0 {
            terms[0] = Some(perceptual_loss(tape, &sel_x, &sel_y)?);
        }
        if w.contextual > 0.0 {
            let (cx, cy) = match cfg.contextual_features {
                FeatureSpace::Selected => (&sel_x, &sel_y),
                FeatureSpace::Raw => (&raw_x, &raw_y),
            };
            terms[1] = Some(contextual_loss(tape, cx, cy, &cfg.contextual)?);
        }
    }
    if w.pixel_l1 > 0.0 {
        terms[2] = Some(pixel_loss(tape, PixelLoss::L1, xt, y)?);
    }
    if w.color > 0.0 {
        terms[3] = Some(color_loss(tape, xt, y, cfg.color_sigma)?);
    }
    if w.texture > 0.0 {
        terms[4] = Some(texture_loss(tape, xt, y)?);
    }
    let mut total: Option<Var> = None;
    for (term, weight) in terms.iter().zip(w.as_array()) {
        if let Some(t) = *term {
            let scaled = tape.scale(t, weight)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, scaled)?,
                None => scaled,
            });
        }
    }
    let total = total.ok_or_else(|| TrainError::InvalidConfig("no active loss term".into()))?;
    Ok((total, terms))
}

/// One Adam step of `F` on the configured objective. `Ψ` and `Φ` must be
/// frozen; `F`'s gradients are zeroed afterwards.
pub fn generator_step<T: Real>(
    nets: &mut DplNetworks<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    cfg: &DplConfig,
    state: &mut TrainState<T>,
) -> Result<GeneratorOutcome<T>> {
    if !nets.psi.is_frozen() || !nets.phi.is_frozen() {
        return Err(TrainError::Freeze(
            "feature network and selection layer must be frozen for a generator step".into(),
        ));
    }
    if nets.f.params().iter().any(|p| !p.requires_grad()) {
        return Err(TrainError::Freeze("generator must be trainable for a generator step".into()));
    }
    let (loss, components, generated, grads) = {
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let yv = tape.constant(y);
        let xt = nets.f.forward(&mut tape, xv)?;
        let (total, terms) = generator_objective(&mut tape, nets, xt, yv, cfg)?;
        let value = |v: Option<Var>| -> Result<f64> {
            Ok(match v {
                Some(v) => tape.scalar(v)?.as_f64(),
                None => 0.0,
            })
        };
        let components = LossComponents {
            perceptual: value(terms[0])?,
            contextual: value(terms[1])?,
            pixel_l1: value(terms[2])?,
            color: value(terms[3])?,
            texture: value(terms[4])?,
        };
        let loss = tape.scalar(total)?.as_f64();
        if !loss.is_finite() {
            return Err(TrainError::NonFinite {
                iteration: state.iteration,
                what: "generator loss",
            });
        }
        (loss, components, tape.to_tensor(xt)?, tape.backward(total)?)
    };
    grads.accumulate_into(nets.f.params_mut())?;
    state.generator_opt.step(nets.f.params_mut())?;
    nets.f.zero_grads();
    Ok(GeneratorOutcome {
        loss,
        components,
        generated,
    })
}

/// Adds the triplet-loss gradient into the fine-tuned parameters without
/// stepping. Returns the loss value.
pub fn selector_accumulate<T: Real>(
    nets: &mut DplNetworks<T>,
    triplet: &Triplet,
    cfg: &DplConfig,
    state: &mut TrainState<T>,
) -> Result<f64> {
    if cfg.mode == FineTuneMode::Frozen {
        return Err(TrainError::FrozenMode);
    }
    if !nets.f.is_frozen() {
        return Err(TrainError::Freeze("generator must be frozen for a selector step".into()));
    }
    if nets.selector_params(cfg.mode).iter().any(|p| !p.requires_grad()) {
        return Err(TrainError::Freeze(format!(
            "{} parameters must be trainable for a selector step",
            if cfg.mode == FineTuneMode::Full { "feature network" } else { "selection layer" }
        )));
    }
    let (d_c, grads) = {
        let mut tape = Tape::new();
        let mut feats = |img: &Image| -> Result<Vec<Var>> {
            let v = tape.constant(&img.to_tensor::<T>());
            nets.perceptual_features(&mut tape, v, cfg.mode)
        };
        let a = feats(&triplet.anchor)?;
        let p = feats(&triplet.positive)?;
        let n = feats(&triplet.negative)?;
        let loss = triplet_loss(&mut tape, &a, &p, &n, cfg.margin)?;
        let d_c = tape.scalar(loss)?.as_f64();
        if !d_c.is_finite() {
            return Err(TrainError::NonFinite {
                iteration: state.iteration,
                what: "triplet loss",
            });
        }
        (d_c, tape.backward(loss)?)
    };
    grads.accumulate_into(nets.selector_params_mut(cfg.mode))?;
    state.pending += 1;
    Ok(d_c)
}

/// One Adam step of the fine-tuned parameters on the summed accumulated
/// gradient, then zeroes it.
pub fn selector_apply<T: Real>(nets: &mut DplNetworks<T>, cfg: &DplConfig, state: &mut TrainState<T>) -> Result<()> {
    let opt = state.selector_opt.as_mut().ok_or(TrainError::FrozenMode)?;
    if state.pending < cfg.interval {
        return Err(TrainError::PrematureApply {
            pending: state.pending,
            interval: cfg.interval,
        });
    }
    let mut params = nets.selector_params_mut(cfg.mode);
    opt.step(params.iter_mut().map(|p| &mut **p))?;
    for p in params {
        p.zero_grad();
    }
    state.pending = 0;
    Ok(())
}

/// Per-iteration history entry.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    /// 1-based.
    pub iteration: usize,
    pub sample: usize,
    pub generator_loss: f64,
    pub components: LossComponents,
    /// Triplet loss of this iteration; 0 in frozen mode.
    pub d_c: f64,
    pub selector_updated: bool,
    pub generator_norm: f64,
    pub selector_norm: f64,
}

pub type History = Vec<IterationRecord>;

/// What one iteration saw and produced.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub record: IterationRecord,
    pub x: Image,
    pub y: Image,
    /// `F(x)` before this iteration's update, clamped.
    pub generated: Image,
}

/// Drives the loop one iteration at a time and keeps the history.
#[derive(Debug, Clone)]
pub struct Trainer<T: Real> {
    pub config: DplConfig,
    pub nets: DplNetworks<T>,
    pub state: TrainState<T>,
    pub history: History,
    verify_freeze: bool,
}

impl<T: Real> Trainer<T> {
    pub fn new(config: DplConfig, mut nets: DplNetworks<T>, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let state = TrainState::new(&config, &mut nets, rng);
        nets.enter_generator_phase();
        Ok(Trainer {
            config,
            nets,
            state,
            history: Vec::new(),
            verify_freeze: false,
        })
    }

    /// Fingerprint parameters around every phase and fail on any change
    /// to a frozen set.
    pub fn verify_freeze(mut self, on: bool) -> Self {
        self.verify_freeze = on;
        self
    }

    fn unchanged(&self, what: &str, before: u64, after: u64) -> Result<()> {
        if before != after {
            return Err(TrainError::Freeze(format!(
                "{what} changed at iteration {}",
                self.state.iteration + 1
            )));
        }
        Ok(())
    }

    pub fn step(&mut self, dataset: &[Pair]) -> Result<StepReport> {
        if dataset.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let mode = self.config.mode;
        let sample = self.state.data_rng.below(dataset.len());
        let aug = if self.config.augment {
            Augmentation::draw(&mut self.state.data_rng)
        } else {
            Augmentation::default()
        };
        let x = aug.apply(&dataset[sample].x)?;
        let y = aug.apply(&dataset[sample].y)?;

        self.nets.enter_generator_phase();
        let guard = self.verify_freeze.then(|| (self.nets.psi.fingerprint(), self.nets.phi.fingerprint()));
        let out = generator_step(&mut self.nets, &x.to_tensor(), &y.to_tensor(), &self.config, &mut self.state)?;
        if let Some((psi, phi)) = guard {
            self.unchanged("feature network during a generator step", psi, self.nets.psi.fingerprint())?;
            self.unchanged("selection layer during a generator step", phi, self.nets.phi.fingerprint())?;
        }
        let generated = Image::from_tensor(&out.generated)?;

        let mut d_c = 0.0;
        let mut selector_updated = false;
        if mode != FineTuneMode::Frozen {
            let triplet = build_triplet(&self.config.strategy, &x, &y, &generated, &mut self.state.triplet_rng)?;
            self.nets.enter_selector_phase(mode);
            let guard = self.verify_freeze.then(|| (self.nets.f.fingerprint(), self.nets.psi.fingerprint()));
            d_c = selector_accumulate(&mut self.nets, &triplet, &self.config, &mut self.state)?;
            if self.state.pending >= self.config.interval {
                selector_apply(&mut self.nets, &self.config, &mut self.state)?;
                selector_updated = true;
            }
            if let Some((f, psi)) = guard {
                self.unchanged("generator during a selector step", f, self.nets.f.fingerprint())?;
                if mode == FineTuneMode::FeatureSelection {
                    self.unchanged("feature network during a selector step", psi, self.nets.psi.fingerprint())?;
                }
            }
            self.nets.enter_generator_phase();
        }

        self.state.iteration += 1;
        let record = IterationRecord {
            iteration: self.state.iteration,
            sample,
            generator_loss: out.loss,
            components: out.components,
            d_c,
            selector_updated,
            generator_norm: self.nets.f.norm(),
            selector_norm: match mode {
                FineTuneMode::FeatureSelection => self.nets.phi.norm(),
                FineTuneMode::Full => self.nets.psi.norm(),
                FineTuneMode::Frozen => 0.0,
            },
        };
        self.history.push(record.clone());
        Ok(StepReport {
            record,
            x,
            y,
            generated,
        })
    }

    /// Runs the remaining iterations of the budget.
    pub fn run(&mut self, dataset: &[Pair]) -> Result<()> {
        while self.state.iteration < self.config.iterations {
            self.step(dataset)?;
        }
        Ok(())
    }
}

/// Trains a fresh generator against `psi` and returns it with the history.
pub fn run_training<T: Real>(
    config: &DplConfig,
    dataset: &[Pair],
    psi: FeatureNetPsi<T>,
    rng: &mut Rng,
) -> Result<(GeneratorF<T>, History)> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let nets = DplNetworks::new(psi, rng);
    let mut trainer = Trainer::new(config.clone(), nets, rng)?;
    trainer.run(dataset)?;
    Ok((trainer.nets.f, trainer.history))
}
