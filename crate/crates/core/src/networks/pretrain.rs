use super::{FeatureNetPsi, Module, NetworkError, Result};
use crate::imaging::synth::{LabeledImage, TEXTURE_CLASSES};
use crate::imaging::{Augmentation, Rng};
use crate::tensor::{Adam, AdamConfig, Real, Tape, Tensor, Var};

/// Global average pool of the deepest tap followed by a linear layer.
/// Only used while pretraining.
#[derive(Debug, Clone)]
pub struct ClassifierHead<T: Real> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> ClassifierHead<T> {
    pub fn new(features: usize, classes: usize, rng: &mut Rng) -> Self {
        let std = (1.0 / features as f64).sqrt();
        let w = (0..features * classes).map(|_| T::lit(std * rng.normal())).collect();
        ClassifierHead {
            weight: Tensor::param(&[features, classes], w).expect("head weight shape"),
            bias: Tensor::param(&[classes], vec![T::zero(); classes]).expect("head bias shape"),
        }
    }

    /// `[1, classes]` logits from a `[C,H,W]` feature map.
    pub fn logits(&self, tape: &mut Tape<T>, h: Var) -> Result<Var> {
        let shape = tape.shape(h)?.to_vec();
        let (c, hw) = (shape[0], shape[1..].iter().product::<usize>());
        let flat = tape.reshape(h, &[c, hw])?;
        let pooled = tape.sum_axis(flat, 1)?;
        let pooled = tape.scale(pooled, 1.0 / hw as f64)?;
        let row = tape.reshape(pooled, &[1, c])?;
        let w = tape.param(&self.weight);
        let z = tape.matmul(row, w)?;
        let b = tape.param(&self.bias);
        let b = tape.reshape(b, &[1, self.bias.numel()])?;
        Ok(tape.add(z, b)?)
    }
}

impl<T: Real> Module<T> for ClassifierHead<T> {
    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        vec![("head.weight".into(), &self.weight), ("head.bias".into(), &self.bias)]
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![
            ("head.weight".into(), &mut self.weight),
            ("head.bias".into(), &mut self.bias),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Samples per optimizer step.
    pub batch: usize,
    /// Training stops after the first epoch at or above this accuracy.
    pub target_accuracy: f64,
    /// Below this final accuracy pretraining is reported as failed.
    pub min_accuracy: f64,
    pub augment: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 5,
            lr: 1e-3,
            batch: 8,
            target_accuracy: 0.8,
            min_accuracy: 0.5,
            augment: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub initial_accuracy: f64,
    /// Held-out accuracy after each completed epoch.
    pub epoch_accuracy: Vec<f64>,
    pub mean_loss: Vec<f64>,
}

impl PretrainReport {
    pub fn final_accuracy(&self) -> f64 {
        self.epoch_accuracy.last().copied().unwrap_or(self.initial_accuracy)
    }
}

fn class_logits<T: Real>(
    psi: &FeatureNetPsi<T>,
    head: &ClassifierHead<T>,
    tape: &mut Tape<T>,
    x: Var,
) -> Result<Var> {
    let taps = psi.features(tape, x)?;
    head.logits(tape, taps[taps.len() - 1])
}

/// Fraction of `set` whose arg-max logit is the true label.
pub fn accuracy<T: Real>(psi: &FeatureNetPsi<T>, head: &ClassifierHead<T>, set: &[LabeledImage]) -> Result<f64> {
    if set.is_empty() {
        return Err(NetworkError::EmptyDataset);
    }
    let mut tape = Tape::new();
    let mut correct = 0;
    for s in set {
        tape.clear();
        let x = tape.constant(&s.image.to_tensor::<T>());
        let z = class_logits(psi, head, &mut tape, x)?;
        let logits = tape.value(z)?;
        let best = logits
            .iter()
            .enumerate()
            .fold(0, |b, (i, v)| if *v > logits[b] { i } else { b });
        correct += usize::from(best == s.label);
    }
    Ok(correct as f64 / set.len() as f64)
}

/// Trains `psi` with a temporary classification head under cross-entropy,
/// then freezes it and drops the head.
pub fn pretrain_psi<T: Real>(
    psi: &mut FeatureNetPsi<T>,
    train: &[LabeledImage],
    held_out: &[LabeledImage],
    cfg: &PretrainConfig,
    rng: &mut Rng,
) -> Result<PretrainReport> {
    if train.is_empty() || held_out.is_empty() {
        return Err(NetworkError::EmptyDataset);
    }
    let mut head = ClassifierHead::new(psi.block3.out_channels(), TEXTURE_CLASSES, rng);
    psi.set_trainable(true);
    let mut opt = Adam::new(
        AdamConfig::with_lr(cfg.lr),
        psi.params().into_iter().chain(head.params()),
    );
    let mut report = PretrainReport {
        initial_accuracy: accuracy(psi, &head, held_out)?,
        epoch_accuracy: Vec::new(),
        mean_loss: Vec::new(),
    };
    let batch = cfg.batch.max(1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut tape = Tape::new();
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(batch) {
            psi.zero_grads();
            head.zero_grads();
            for &i in chunk {
                let sample = &train[i];
                let image = if cfg.augment {
                    Augmentation::draw(rng).apply(&sample.image)?
                } else {
                    sample.image.clone()
                };
                tape.clear();
                let x = tape.constant(&image.to_tensor::<T>());
                let z = class_logits(psi, &head, &mut tape, x)?;
                let logp = tape.log_softmax(z)?;
                let mut onehot = vec![T::zero(); TEXTURE_CLASSES];
                onehot[sample.label] = T::one();
                let target = tape.input(&[1, TEXTURE_CLASSES], onehot)?;
                let picked = tape.mul(logp, target)?;
                let picked = tape.sum(picked)?;
                let loss = tape.scale(picked, -1.0 / chunk.len() as f64)?;
                loss_sum += tape.scalar(loss)?.as_f64() * chunk.len() as f64;
                let grads = tape.backward(loss)?;
                grads.accumulate_into(psi.params_mut())?;
                grads.accumulate_into(head.params_mut())?;
            }
            tape.clear();
            let mut params = psi.params_mut();
            params.extend(head.params_mut());
            opt.step(params)?;
        }
        report.mean_loss.push(loss_sum / train.len() as f64);
        let acc = accuracy(psi, &head, held_out)?;
        report.epoch_accuracy.push(acc);
        if acc >= cfg.target_accuracy {
            break;
        }
    }
    psi.set_trainable(false);
    psi.zero_grads();
    let final_accuracy = report.final_accuracy();
    if final_accuracy < cfg.min_accuracy {
        return Err(NetworkError::PretrainFailed {
            accuracy: final_accuracy,
            required: cfg.min_accuracy,
            epochs: report.epoch_accuracy.len(),
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::synth::generate_textures;

    #[test]
    fn untrained_accuracy_is_near_chance() {
        let mut rng = Rng::seed(11);
        let set = generate_textures(400, 16, &mut rng).unwrap();
        let psi = FeatureNetPsi::<f32>::new(&mut rng);
        let head = ClassifierHead::new(64, TEXTURE_CLASSES, &mut rng);
        let acc = accuracy(&psi, &head, &set).unwrap();
        assert!((acc - 0.1).abs() <= 0.05, "accuracy {acc}");
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = Rng::seed(12);
        let set = generate_textures(20, 16, &mut rng).unwrap();
        let psi = FeatureNetPsi::<f32>::new(&mut rng);
        let head = ClassifierHead::new(64, TEXTURE_CLASSES, &mut rng);
        let mut tape = Tape::new();
        for s in &set {
            tape.clear();
            let x = tape.constant(&s.image.to_tensor::<f32>());
            let z = class_logits(&psi, &head, &mut tape, x).unwrap();
            let lp = tape.log_softmax(z).unwrap();
            let total: f64 = tape.value(lp).unwrap().iter().map(|v| f64::from(v.exp())).sum();
            assert!((total - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn short_pretraining_learns_and_freezes() {
        let mut rng = Rng::seed(13);
        let train = generate_textures(300, 16, &mut rng).unwrap();
        let val = generate_textures(100, 16, &mut rng).unwrap();
        let mut psi = FeatureNetPsi::<f32>::new(&mut rng);
        let cfg = PretrainConfig {
            epochs: 2,
            min_accuracy: 0.0,
            ..Default::default()
        };
        let report = pretrain_psi(&mut psi, &train, &val, &cfg, &mut rng).unwrap();
        assert!(psi.is_frozen());
        assert!(report.final_accuracy() > report.initial_accuracy.max(0.2), "{report:?}");
    }

    #[test]
    fn failure_below_floor() {
        let mut rng = Rng::seed(14);
        let train = generate_textures(10, 16, &mut rng).unwrap();
        let mut psi = FeatureNetPsi::<f32>::new(&mut rng);
        let cfg = PretrainConfig {
            epochs: 0,
            min_accuracy: 1.01,
            ..Default::default()
        };
        let err = pretrain_psi(&mut psi, &train, &train, &cfg, &mut rng).unwrap_err();
        assert!(err.to_string().contains("another seed"));
    }
}
