//! Generator `F`, feature network `Ψ`, selection layer `Φ`, their
//! persistence and the classification pretraining of `Ψ`.

mod checkpoint;
mod pretrain;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, StoredTensor, FORMAT_VERSION,
};
pub use pretrain::{accuracy, pretrain_psi, ClassifierHead, PretrainConfig, PretrainReport};

use crate::imaging::{ImageError, Rng};
use crate::tensor::{fingerprint_all, Real, Tape, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum NetworkError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{network} needs {requirement}, got input of shape {shape:?}")]
    Input {
        network: &'static str,
        requirement: &'static str,
        shape: Vec<usize>,
    },
    #[error("selection layer expects tap widths {expected:?}, got {found:?}")]
    Taps {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(
        "pretraining reached only {:.1}% held-out accuracy after {epochs} epochs \
         (at least {:.0}% is required); try another seed or a larger budget",
        accuracy * 100.0,
        required * 100.0
    )]
    PretrainFailed {
        accuracy: f64,
        required: f64,
        epochs: usize,
    },
}

pub type Result<T, E = NetworkError> = std::result::Result<T, E>;

/// A set of named, persistable parameters.
pub trait Module<T: Real> {
    /// Parameters with their checkpoint names, in a fixed order.
    fn named_params(&self) -> Vec<(String, &Tensor<T>)>;

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)>;

    fn params(&self) -> Vec<&Tensor<T>> {
        self.named_params().into_iter().map(|(_, p)| p).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.named_params_mut().into_iter().map(|(_, p)| p).collect()
    }

    fn set_trainable(&mut self, on: bool) {
        for p in self.params_mut() {
            p.set_requires_grad(on);
        }
    }

    fn is_frozen(&self) -> bool {
        self.params().iter().all(|p| !p.requires_grad())
    }

    fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn fingerprint(&self) -> u64 {
        fingerprint_all(self.params())
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    fn norm(&self) -> f64 {
        self.params().iter().map(|p| p.norm_sq()).sum::<f64>().sqrt()
    }

    fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        for (name, p) in self.named_params() {
            let data = p.data().iter().map(|v| v.as_f64() as f32).collect();
            c.insert(name, p.shape(), data)
                .expect("module parameter names are unique and non-empty");
        }
        c
    }

    /// Overwrites every parameter from `ckpt`. Entries under this module's
    /// name prefix that it does not own are rejected.
    fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let mut owned = Vec::new();
        for (name, p) in self.named_params_mut() {
            let stored = ckpt
                .get(&name)
                .ok_or_else(|| CheckpointError::Missing(name.clone()))?;
            if stored.shape != p.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    expected: p.shape().to_vec(),
                    found: stored.shape.clone(),
                }
                .into());
            }
            for (dst, &src) in p.data_mut().iter_mut().zip(&stored.data) {
                *dst = T::lit(f64::from(src));
            }
            owned.push(name);
        }
        if let Some(prefix) = owned.first().and_then(|n| n.split_once('.')).map(|(p, _)| p) {
            let prefix = format!("{prefix}.");
            if let Some(extra) = ckpt
                .names()
                .find(|n| n.starts_with(&prefix) && !owned.iter().any(|o| o == n))
            {
                return Err(CheckpointError::Unexpected(extra.to_owned()).into());
            }
        }
        Ok(())
    }
}

/// Square-kernel convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv2d<T: Real> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Real> Conv2d<T> {
    /// He-normal weights, zero bias.
    pub fn kaiming(c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        let w: Vec<f64> = (0..c_out * c_in * k * k).map(|_| std * rng.normal()).collect();
        Self::from_values(c_in, c_out, k, stride, pad, &w)
    }

    pub fn zeros(c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self::from_values(c_in, c_out, k, stride, pad, &vec![0.0; c_out * c_in * k * k])
    }

    fn from_values(c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize, w: &[f64]) -> Self {
        let weight = Tensor::param(&[c_out, c_in, k, k], w.iter().map(|&v| T::lit(v)).collect())
            .expect("weight length matches its shape");
        let bias = Tensor::param(&[c_out], vec![T::zero(); c_out]).expect("bias shape");
        Conv2d {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        Ok(tape.conv2d(x, w, b, self.stride, self.pad)?)
    }

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    fn named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
        out.push((format!("{prefix}.bias"), &mut self.bias));
    }
}

fn expect_rgb<T: Real>(
    tape: &Tape<T>,
    x: Var,
    network: &'static str,
    requirement: &'static str,
    ok: impl Fn(usize, usize) -> bool,
) -> Result<()> {
    let shape = tape.shape(x)?;
    match *shape {
        [3, h, w] if ok(h, w) => Ok(()),
        _ => Err(NetworkError::Input {
            network,
            requirement,
            shape: shape.to_vec(),
        }),
    }
}

/// Image-to-image generator: a small encoder/decoder whose output is
/// added to its input.
#[derive(Debug, Clone)]
pub struct GeneratorF<T: Real> {
    pub enc: Conv2d<T>,
    pub down: Conv2d<T>,
    pub mid: Conv2d<T>,
    pub dec: Conv2d<T>,
    pub out: Conv2d<T>,
}

impl<T: Real> GeneratorF<T> {
    /// He-initialized body and a zero output layer, so a fresh generator
    /// is the identity map.
    pub fn new(rng: &mut Rng) -> Self {
        GeneratorF {
            enc: Conv2d::kaiming(3, 16, 3, 1, 1, rng),
            down: Conv2d::kaiming(16, 32, 3, 2, 1, rng),
            mid: Conv2d::kaiming(32, 32, 3, 1, 1, rng),
            dec: Conv2d::kaiming(32, 16, 3, 1, 1, rng),
            out: Conv2d::zeros(16, 3, 3, 1, 1),
        }
    }

    /// `x` is `[3,H,W]` with `H`, `W` even and at least 8. The result is
    /// not clamped.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        expect_rgb(tape, x, "generator", "[3,H,W] with even H, W >= 8", |h, w| {
            h >= 8 && w >= 8 && h % 2 == 0 && w % 2 == 0
        })?;
        let h = self.enc.forward(tape, x)?;
        let h = tape.relu(h)?;
        let h = self.down.forward(tape, h)?;
        let h = tape.relu(h)?;
        let h = self.mid.forward(tape, h)?;
        let h = tape.relu(h)?;
        let h = tape.upsample_nearest2(h)?;
        let h = self.dec.forward(tape, h)?;
        let h = tape.relu(h)?;
        let residual = self.out.forward(tape, h)?;
        Ok(tape.add(x, residual)?)
    }

    /// Convenience forward without gradient tracking.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = self.forward(&mut tape, xv)?;
        Ok(tape.to_tensor(y)?)
    }
}

impl<T: Real> Module<T> for GeneratorF<T> {
    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = Vec::new();
        self.enc.named("f.enc", &mut v);
        self.down.named("f.down", &mut v);
        self.mid.named("f.mid", &mut v);
        self.dec.named("f.dec", &mut v);
        self.out.named("f.out", &mut v);
        v
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut v = Vec::new();
        self.enc.named_mut("f.enc", &mut v);
        self.down.named_mut("f.down", &mut v);
        self.mid.named_mut("f.mid", &mut v);
        self.dec.named_mut("f.dec", &mut v);
        self.out.named_mut("f.out", &mut v);
        v
    }
}

/// Tap widths of [`FeatureNetPsi`], shallow to deep.
pub const PSI_TAP_WIDTHS: [usize; 3] = [16, 32, 64];

/// Three-block CNN whose post-activation maps at each block are the
/// perceptual features.
#[derive(Debug, Clone)]
pub struct FeatureNetPsi<T: Real> {
    pub block1: Conv2d<T>,
    pub block2: Conv2d<T>,
    pub block3: Conv2d<T>,
}

impl<T: Real> FeatureNetPsi<T> {
    pub fn new(rng: &mut Rng) -> Self {
        FeatureNetPsi {
            block1: Conv2d::kaiming(3, 16, 3, 1, 1, rng),
            block2: Conv2d::kaiming(16, 32, 3, 1, 1, rng),
            block3: Conv2d::kaiming(32, 64, 3, 1, 1, rng),
        }
    }

    /// Tap activations `[16,H,W]`, `[32,H/2,W/2]`, `[64,H/4,W/4]` for a
    /// `[3,H,W]` input with `H`, `W` divisible by 4.
    pub fn features(&self, tape: &mut Tape<T>, x: Var) -> Result<Vec<Var>> {
        expect_rgb(tape, x, "feature network", "[3,H,W] with H, W divisible by 4", |h, w| {
            h > 0 && w > 0 && h % 4 == 0 && w % 4 == 0
        })?;
        let c1 = self.block1.forward(tape, x)?;
        let h1 = tape.relu(c1)?;
        let p1 = tape.max_pool2(h1)?;
        let c2 = self.block2.forward(tape, p1)?;
        let h2 = tape.relu(c2)?;
        let p2 = tape.max_pool2(h2)?;
        let c3 = self.block3.forward(tape, p2)?;
        let h3 = tape.relu(c3)?;
        Ok(vec![h1, h2, h3])
    }

    /// Tap activations as plain tensors.
    pub fn extract(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let taps = self.features(&mut tape, xv)?;
        taps.into_iter()
            .map(|v| tape.to_tensor(v).map_err(NetworkError::from))
            .collect()
    }
}

impl<T: Real> Module<T> for FeatureNetPsi<T> {
    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = Vec::new();
        self.block1.named("psi.block1", &mut v);
        self.block2.named("psi.block2", &mut v);
        self.block3.named("psi.block3", &mut v);
        v
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut v = Vec::new();
        self.block1.named_mut("psi.block1", &mut v);
        self.block2.named_mut("psi.block2", &mut v);
        self.block3.named_mut("psi.block3", &mut v);
        v
    }
}

/// Per-tap bottleneck: 1×1 conv `C→C`, relu, 1×1 conv `C→C/2`.
#[derive(Debug, Clone)]
pub struct SelectionBlock<T: Real> {
    pub mix: Conv2d<T>,
    pub reduce: Conv2d<T>,
}

impl<T: Real> SelectionBlock<T> {
    /// `mix` starts at the identity and `reduce` at a projection onto the
    /// first `C/2` channels, both with N(0, 0.01²) noise and zero bias.
    pub fn near_passthrough(channels: usize, rng: &mut Rng) -> Self {
        let half = channels / 2;
        let mut mix = Conv2d::zeros(channels, channels, 1, 1, 0);
        for (i, w) in mix.weight.data_mut().iter_mut().enumerate() {
            let (o, c) = (i / channels, i % channels);
            let base = if o == c { 1.0 } else { 0.0 };
            *w = T::lit(base + 0.01 * rng.normal());
        }
        let mut reduce = Conv2d::zeros(channels, half, 1, 1, 0);
        for (i, w) in reduce.weight.data_mut().iter_mut().enumerate() {
            let (o, c) = (i / channels, i % channels);
            let base = if o == c { 1.0 } else { 0.0 };
            *w = T::lit(base + 0.01 * rng.normal());
        }
        SelectionBlock { mix, reduce }
    }

    pub fn channels(&self) -> usize {
        self.mix.in_channels()
    }

    pub fn forward(&self, tape: &mut Tape<T>, h: Var) -> Result<Var> {
        let e = self.mix.forward(tape, h)?;
        let e = tape.relu(e)?;
        self.reduce.forward(tape, e)
    }
}

/// One [`SelectionBlock`] per feature tap.
#[derive(Debug, Clone)]
pub struct SelectionPhi<T: Real> {
    pub blocks: Vec<SelectionBlock<T>>,
}

impl<T: Real> SelectionPhi<T> {
    pub fn new(widths: &[usize], rng: &mut Rng) -> Self {
        SelectionPhi {
            blocks: widths
                .iter()
                .map(|&c| SelectionBlock::near_passthrough(c, rng))
                .collect(),
        }
    }

    /// Matches the taps of [`FeatureNetPsi`].
    pub fn for_psi(rng: &mut Rng) -> Self {
        Self::new(&PSI_TAP_WIDTHS, rng)
    }

    pub fn widths(&self) -> Vec<usize> {
        self.blocks.iter().map(SelectionBlock::channels).collect()
    }

    pub fn forward(&self, tape: &mut Tape<T>, features: &[Var]) -> Result<Vec<Var>> {
        let found = features
            .iter()
            .map(|&f| tape.shape(f).map(|s| s.first().copied().unwrap_or(0)))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if found != self.widths() {
            return Err(NetworkError::Taps {
                expected: self.widths(),
                found,
            });
        }
        features
            .iter()
            .zip(&self.blocks)
            .map(|(&f, block)| block.forward(tape, f))
            .collect()
    }
}

impl<T: Real> Module<T> for SelectionPhi<T> {
    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            b.mix.named(&format!("phi.tap{}.mix", i + 1), &mut v);
            b.reduce.named(&format!("phi.tap{}.reduce", i + 1), &mut v);
        }
        v
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut v = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.mix.named_mut(&format!("phi.tap{}.mix", i + 1), &mut v);
            b.reduce.named_mut(&format!("phi.tap{}.reduce", i + 1), &mut v);
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_input<T: Real>(h: usize, w: usize, rng: &mut Rng) -> Tensor<T> {
        let data = (0..3 * h * w).map(|_| T::lit(rng.uniform())).collect();
        Tensor::new(&[3, h, w], data).unwrap()
    }

    #[test]
    fn fresh_generator_is_identity() {
        let mut rng = Rng::seed(1);
        let f = GeneratorF::<f32>::new(&mut rng);
        for size in [16, 32, 64] {
            let x = random_input::<f32>(size, size, &mut rng);
            let y = f.apply(&x).unwrap();
            assert_eq!(y.shape(), x.shape());
            assert_eq!(y.data(), x.data());
        }
    }

    #[test]
    fn generator_rejects_odd_extent() {
        let mut rng = Rng::seed(1);
        let f = GeneratorF::<f32>::new(&mut rng);
        let x = random_input::<f32>(15, 16, &mut rng);
        assert!(matches!(f.apply(&x), Err(NetworkError::Input { .. })));
    }

    #[test]
    fn psi_tap_shapes() {
        let mut rng = Rng::seed(2);
        let psi = FeatureNetPsi::<f32>::new(&mut rng);
        let taps = psi.extract(&random_input(32, 32, &mut rng)).unwrap();
        let shapes: Vec<_> = taps.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![16, 32, 32], vec![32, 16, 16], vec![64, 8, 8]]);
        assert!(psi.extract(&random_input(30, 32, &mut rng)).is_err());
    }

    #[test]
    fn psi_of_zero_is_zero() {
        let psi = FeatureNetPsi::<f64>::new(&mut Rng::seed(3));
        let taps = psi.extract(&Tensor::zeros(&[3, 8, 8]).unwrap()).unwrap();
        assert!(taps.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn phi_halves_channels_and_keeps_extent() {
        let mut rng = Rng::seed(4);
        let psi = FeatureNetPsi::<f64>::new(&mut rng);
        let phi = SelectionPhi::<f64>::for_psi(&mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(&random_input(16, 12, &mut rng));
        let h = psi.features(&mut tape, x).unwrap();
        let e = phi.forward(&mut tape, &h).unwrap();
        for (hv, ev) in h.iter().zip(&e) {
            let (hs, es) = (tape.shape(*hv).unwrap(), tape.shape(*ev).unwrap());
            assert_eq!(es[0] * 2, hs[0]);
            assert_eq!(es[1..], hs[1..]);
        }
    }

    #[test]
    fn phi_starts_near_channel_slice() {
        let mut rng = Rng::seed(5);
        let psi = FeatureNetPsi::<f64>::new(&mut rng);
        let phi = SelectionPhi::<f64>::for_psi(&mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(&random_input(16, 16, &mut rng));
        let h = psi.features(&mut tape, x).unwrap();
        let e = phi.forward(&mut tape, &h).unwrap();
        for (hv, ev) in h.iter().zip(&e) {
            let c = tape.shape(*hv).unwrap()[0];
            let hw: usize = tape.shape(*hv).unwrap()[1..].iter().product();
            let hval = tape.value(*hv).unwrap();
            let eval = tape.value(*ev).unwrap();
            let scale = hval.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for (k, &ev) in eval.iter().enumerate() {
                let want = hval[k];
                assert!(k / hw < c / 2);
                // noise of 0.01 per weight over up to 64 channels
                assert!((ev - want).abs() < 0.25 * scale.max(1.0), "{ev} vs {want}");
            }
        }
    }

    #[test]
    fn phi_rejects_wrong_taps() {
        let mut rng = Rng::seed(6);
        let phi = SelectionPhi::<f64>::for_psi(&mut rng);
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::zeros(&[16, 4, 4]).unwrap());
        let b = tape.constant(&Tensor::zeros(&[16, 4, 4]).unwrap());
        assert!(matches!(phi.forward(&mut tape, &[a, b]), Err(NetworkError::Taps { .. })));
    }

    #[test]
    fn checkpoint_round_trip_restores_parameters() {
        let mut rng = Rng::seed(7);
        let f = GeneratorF::<f32>::new(&mut rng);
        let mut g = GeneratorF::<f32>::new(&mut rng);
        assert_ne!(f.fingerprint(), g.fingerprint());
        g.load_checkpoint(&f.to_checkpoint()).unwrap();
        assert_eq!(f.fingerprint(), g.fingerprint());
    }

    #[test]
    fn checkpoint_shape_mismatch_is_reported() {
        let mut rng = Rng::seed(8);
        let mut ckpt = Checkpoint::new();
        for (name, p) in GeneratorF::<f32>::new(&mut rng).named_params() {
            let shape = if name == "f.mid.bias" { vec![31] } else { p.shape().to_vec() };
            let n = shape.iter().product();
            ckpt.insert(name, &shape, vec![0.0; n]).unwrap();
        }
        let mut g = GeneratorF::<f32>::new(&mut rng);
        let err = g.load_checkpoint(&ckpt).unwrap_err();
        assert!(err.to_string().contains("f.mid.bias"), "{err}");
    }

    #[test]
    fn trainable_toggle() {
        let mut phi = SelectionPhi::<f32>::for_psi(&mut Rng::seed(9));
        assert!(!phi.is_frozen());
        phi.set_trainable(false);
        assert!(phi.is_frozen());
        assert_eq!(phi.param_count(), (16 * 16 + 16 + 8 * 16 + 8) + (32 * 32 + 32 + 16 * 32 + 16) + (64 * 64 + 64 + 32 * 64 + 32));
    }
}
