//! Central finite-difference checks of recorded gradients (64-bit).
//!
//! A check compares analytic gradients with `(f(x+h) - f(x-h)) / 2h` on a
//! set of coordinates plus one random direction. If the difference quotient
//! at `h` and at `h/2` disagree, the point sits on a kink at scale `h` and
//! the trial reports `None` so the caller can draw another point.

use super::{Result, Tape, Tensor, TensorError, Var};
use crate::imaging::Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdConfig {
    pub step: f64,
    /// Coordinates checked per trial; larger inputs are subsampled.
    pub max_coordinates: usize,
    /// Relative disagreement between the `h` and `h/2` quotients above
    /// which a point counts as non-smooth.
    pub kink_tolerance: f64,
    /// Fresh points drawn before a non-smooth streak is reported as failure.
    pub max_resamples: usize,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig {
            step: 1e-5,
            max_coordinates: 48,
            kink_tolerance: 1e-6,
            max_resamples: 50,
        }
    }
}

/// `|a-b| / max(|a|, |b|, 1e-3)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Worst relative error of one smooth trial, or `None` at a kink.
fn compare(
    analytic: &[Vec<f64>],
    eval: &mut dyn FnMut(&[(usize, usize, f64)]) -> std::result::Result<f64, String>,
    cfg: &FdConfig,
    rng: &mut Rng,
) -> std::result::Result<Option<f64>, String> {
    let total: usize = analytic.iter().map(Vec::len).sum();
    let mut probes: Vec<Vec<(usize, usize, f64)>> = Vec::new();
    let flat: Vec<(usize, usize)> = analytic
        .iter()
        .enumerate()
        .flat_map(|(t, g)| (0..g.len()).map(move |k| (t, k)))
        .collect();
    if total <= cfg.max_coordinates {
        probes.extend(flat.iter().map(|&(t, k)| vec![(t, k, 1.0)]));
    } else {
        for _ in 0..cfg.max_coordinates {
            let (t, k) = flat[rng.below(flat.len())];
            probes.push(vec![(t, k, 1.0)]);
        }
    }
    let mut dir: Vec<f64> = (0..total).map(|_| rng.normal()).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
    dir.iter_mut().for_each(|v| *v /= norm);
    probes.push(flat.iter().zip(&dir).map(|(&(t, k), &d)| (t, k, d)).collect());

    let mut worst: f64 = 0.0;
    for probe in &probes {
        let quotient = |h: f64, eval: &mut dyn FnMut(&[(usize, usize, f64)]) -> std::result::Result<f64, String>| {
            let plus: Vec<_> = probe.iter().map(|&(t, k, d)| (t, k, d * h)).collect();
            let minus: Vec<_> = probe.iter().map(|&(t, k, d)| (t, k, -d * h)).collect();
            Ok::<f64, String>((eval(&plus)? - eval(&minus)?) / (2.0 * h))
        };
        let fd = quotient(cfg.step, eval)?;
        let fd_half = quotient(cfg.step / 2.0, eval)?;
        if relative_error(fd, fd_half) > cfg.kink_tolerance {
            return Ok(None);
        }
        let exact: f64 = probe.iter().map(|&(t, k, d)| analytic[t][k] * d).sum();
        worst = worst.max(relative_error(exact, fd));
    }
    Ok(Some(worst))
}

/// One trial of `f` at `inputs`, differentiating with respect to every input.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], f: F, cfg: &FdConfig, rng: &mut Rng) -> Result<Option<f64>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let tracked: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.set_requires_grad(true);
            t
        })
        .collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = tracked.iter().map(|t| tape.param(t)).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = tracked
        .iter()
        .map(|t| grads.get(t.id()).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    let mut eval = |delta: &[(usize, usize, f64)]| -> std::result::Result<f64, String> {
        let mut moved: Vec<Tensor<f64>> = inputs.to_vec();
        for &(t, k, d) in delta {
            moved[t].data_mut()[k] += d;
        }
        let mut tape = Tape::new();
        let vars: Vec<Var> = moved.iter().map(|t| tape.constant(t)).collect();
        let loss = f(&mut tape, &vars).map_err(|e| e.to_string())?;
        tape.scalar(loss).map_err(|e| e.to_string())
    };
    compare(&analytic, &mut eval, cfg, rng).map_err(|reason| TensorError::InvalidArgument { op: "gradcheck", reason })
}

/// One trial with respect to the trainable tensors that `params` exposes
/// on a cloneable state (a network, a set of networks).
pub fn check_params<S, E, F>(
    state: &S,
    params: fn(&mut S) -> Vec<&mut Tensor<f64>>,
    f: F,
    cfg: &FdConfig,
    rng: &mut Rng,
) -> std::result::Result<Option<f64>, E>
where
    S: Clone,
    E: From<TensorError> + std::fmt::Display,
    F: Fn(&S, &mut Tape<f64>) -> std::result::Result<Var, E>,
{
    let mut work = state.clone();
    for p in params(&mut work) {
        p.zero_grad();
    }
    let mut tape = Tape::new();
    let loss = f(&work, &mut tape)?;
    tape.backward_into(loss, params(&mut work))?;
    let chosen: Vec<usize> = params(&mut work)
        .iter()
        .enumerate()
        .filter(|(_, p)| p.requires_grad())
        .map(|(i, _)| i)
        .collect();
    let analytic: Vec<Vec<f64>> = {
        let all = params(&mut work);
        chosen.iter().map(|&i| all[i].grad().unwrap_or(&[]).to_vec()).collect()
    };
    let mut eval = |delta: &[(usize, usize, f64)]| -> std::result::Result<f64, String> {
        let mut moved = state.clone();
        {
            let mut all = params(&mut moved);
            for &(t, k, d) in delta {
                all[chosen[t]].data_mut()[k] += d;
            }
        }
        let mut tape = Tape::new();
        let loss = f(&moved, &mut tape).map_err(|e| e.to_string())?;
        tape.scalar(loss).map_err(|e| e.to_string())
    };
    compare(&analytic, &mut eval, cfg, rng)
        .map_err(|reason| E::from(TensorError::InvalidArgument { op: "gradcheck", reason }))
}

/// Runs trials until `trials` smooth points were checked, resampling at kinks.
/// Returns the worst error and the number of points discarded as kinks.
pub fn smooth_trials<E: From<TensorError>>(
    trials: usize,
    cfg: &FdConfig,
    mut trial: impl FnMut() -> std::result::Result<Option<f64>, E>,
) -> std::result::Result<(f64, usize), E> {
    let (mut worst, mut done, mut skipped) = (0.0f64, 0, 0);
    while done < trials {
        match trial()? {
            Some(e) => {
                worst = worst.max(e);
                done += 1;
            }
            None => {
                skipped += 1;
                if skipped > cfg.max_resamples.max(trials) {
                    return Err(E::from(TensorError::InvalidArgument {
                        op: "gradcheck",
                        reason: format!("{skipped} points rejected as non-smooth"),
                    }));
                }
            }
        }
    }
    Ok((worst, skipped))
}

fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.range(lo, hi)).collect();
    Tensor::new(shape, data).expect("positive shape")
}

fn normal_tensor(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).expect("positive shape")
}

fn dim(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

/// A differentiable tape operation with a generator of random operands.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: fn(&mut Rng) -> Vec<Tensor<f64>>,
    pub apply: fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
}

impl OpCase {
    /// One trial: the op's output is contracted against fixed random
    /// weights so every output element carries a distinct gradient.
    pub fn trial(&self, cfg: &FdConfig, rng: &mut Rng) -> Result<Option<f64>> {
        let inputs = (self.inputs)(rng);
        let probe = {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t)).collect();
            let out = (self.apply)(&mut tape, &vars)?;
            tape.shape(out)?.to_vec()
        };
        let weights = if probe.is_empty() {
            None
        } else {
            Some(normal_tensor(&probe, rng))
        };
        let apply = self.apply;
        check_inputs(
            &inputs,
            |tape, vars| {
                let out = apply(tape, vars)?;
                match &weights {
                    Some(w) => {
                        let w = tape.constant(w);
                        let p = tape.mul(out, w)?;
                        tape.sum(p)
                    }
                    None => Ok(out),
                }
            },
            cfg,
            rng,
        )
    }
}

fn pair(rng: &mut Rng) -> Vec<Tensor<f64>> {
    let shape = [dim(rng, 1, 3), dim(rng, 1, 4)];
    vec![normal_tensor(&shape, rng), normal_tensor(&shape, rng)]
}

fn positive_pair(rng: &mut Rng) -> Vec<Tensor<f64>> {
    let shape = [dim(rng, 1, 3), dim(rng, 1, 4)];
    vec![normal_tensor(&shape, rng), random_tensor(&shape, 0.5, 2.0, rng)]
}

fn with_scalar(rng: &mut Rng) -> Vec<Tensor<f64>> {
    let shape = [dim(rng, 1, 3), dim(rng, 1, 4)];
    vec![normal_tensor(&shape, rng), Tensor::scalar(rng.range(0.5, 2.0))]
}

fn one(rng: &mut Rng) -> Vec<Tensor<f64>> {
    let shape = [dim(rng, 1, 3), dim(rng, 1, 4)];
    vec![normal_tensor(&shape, rng)]
}

fn one_positive(rng: &mut Rng) -> Vec<Tensor<f64>> {
    let shape = [dim(rng, 1, 3), dim(rng, 1, 4)];
    vec![random_tensor(&shape, 0.5, 2.0, rng)]
}

fn image(rng: &mut Rng) -> Vec<Tensor<f64>> {
    let shape = [dim(rng, 1, 2), 2 * dim(rng, 1, 3), 2 * dim(rng, 1, 3)];
    vec![normal_tensor(&shape, rng)]
}

fn conv_operands(rng: &mut Rng, k: usize) -> Vec<Tensor<f64>> {
    let (cin, cout) = (dim(rng, 1, 3), dim(rng, 1, 3));
    let (h, w) = (dim(rng, 3, 6), dim(rng, 3, 6));
    vec![
        normal_tensor(&[cin, h, w], rng),
        normal_tensor(&[cout, cin, k, k], rng),
        normal_tensor(&[cout], rng),
    ]
}

fn matmul_operands(rng: &mut Rng) -> Vec<Tensor<f64>> {
    let (m, k, n) = (dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
    vec![normal_tensor(&[m, k], rng), normal_tensor(&[k, n], rng)]
}

/// Every differentiable tape operation.
pub fn op_catalog() -> Vec<OpCase> {
    vec![
        OpCase { name: "add", inputs: pair, apply: |t, v| t.add(v[0], v[1]) },
        OpCase { name: "sub", inputs: pair, apply: |t, v| t.sub(v[0], v[1]) },
        OpCase { name: "mul", inputs: pair, apply: |t, v| t.mul(v[0], v[1]) },
        OpCase { name: "div", inputs: positive_pair, apply: |t, v| t.div(v[0], v[1]) },
        OpCase { name: "add_scalar", inputs: with_scalar, apply: |t, v| t.add(v[0], v[1]) },
        OpCase { name: "mul_scalar", inputs: with_scalar, apply: |t, v| t.mul(v[0], v[1]) },
        OpCase { name: "div_scalar", inputs: with_scalar, apply: |t, v| t.div(v[0], v[1]) },
        OpCase { name: "scale", inputs: one, apply: |t, v| t.scale(v[0], -1.7) },
        OpCase { name: "shift", inputs: one, apply: |t, v| t.shift(v[0], 0.3) },
        OpCase { name: "relu", inputs: one, apply: |t, v| t.relu(v[0]) },
        OpCase { name: "exp", inputs: one, apply: |t, v| t.exp(v[0]) },
        OpCase { name: "ln", inputs: one_positive, apply: |t, v| t.ln(v[0]) },
        OpCase { name: "sqrt", inputs: one_positive, apply: |t, v| t.sqrt(v[0]) },
        OpCase { name: "abs", inputs: one, apply: |t, v| t.abs(v[0]) },
        OpCase { name: "square", inputs: one, apply: |t, v| t.square(v[0]) },
        OpCase { name: "sum", inputs: one, apply: |t, v| t.sum(v[0]) },
        OpCase { name: "mean", inputs: one, apply: |t, v| t.mean(v[0]) },
        OpCase { name: "sum_axis", inputs: one, apply: |t, v| t.sum_axis(v[0], 1) },
        OpCase { name: "max_axis", inputs: one, apply: |t, v| t.max_axis(v[0], 1) },
        OpCase { name: "min_axis", inputs: one, apply: |t, v| t.min_axis(v[0], 0) },
        OpCase {
            name: "broadcast_to",
            inputs: one,
            apply: |t, v| {
                let s = t.shape(v[0])?.to_vec();
                let col = t.sum_axis(v[0], 1)?;
                t.broadcast_to(col, &[s[0], s[1] + 2])
            },
        },
        OpCase {
            name: "reshape",
            inputs: one,
            apply: |t, v| {
                let n: usize = t.shape(v[0])?.iter().product();
                let r = t.reshape(v[0], &[n])?;
                t.square(r)
            },
        },
        OpCase { name: "transpose", inputs: one, apply: |t, v| t.transpose(v[0]) },
        OpCase { name: "matmul", inputs: matmul_operands, apply: |t, v| t.matmul(v[0], v[1]) },
        OpCase {
            name: "conv2d_3x3_pad1",
            inputs: |r| conv_operands(r, 3),
            apply: |t, v| t.conv2d(v[0], v[1], v[2], 1, 1),
        },
        OpCase {
            name: "conv2d_3x3_stride2",
            inputs: |r| conv_operands(r, 3),
            apply: |t, v| t.conv2d(v[0], v[1], v[2], 2, 0),
        },
        OpCase {
            name: "conv2d_1x1",
            inputs: |r| conv_operands(r, 1),
            apply: |t, v| t.conv2d(v[0], v[1], v[2], 1, 0),
        },
        OpCase { name: "max_pool2", inputs: image, apply: |t, v| t.max_pool2(v[0]) },
        OpCase { name: "upsample_nearest2", inputs: image, apply: |t, v| t.upsample_nearest2(v[0]) },
        OpCase { name: "gaussian_blur", inputs: image, apply: |t, v| t.gaussian_blur(v[0], 1.2) },
        OpCase { name: "log_softmax", inputs: one, apply: |t, v| t.log_softmax(v[0]) },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catches_a_wrong_gradient() {
        let x = Tensor::new(&[3], vec![0.5, 1.5, 2.0]).unwrap();
        let mut rng = Rng::seed(1);
        let good = check_inputs(&[x.clone()], |t, v| {
            let s = t.square(v[0])?;
            t.sum(s)
        }, &FdConfig::default(), &mut rng)
        .unwrap()
        .unwrap();
        assert!(good < 1e-8, "{good}");
        // detach the input half way: the analytic gradient misses a term
        let bad = check_inputs(&[x.clone()], |t, v| {
            let frozen = t.constant(&Tensor::new(&[3], t.value(v[0])?.to_vec())?);
            let p = t.mul(v[0], frozen)?;
            t.sum(p)
        }, &FdConfig::default(), &mut rng)
        .unwrap()
        .unwrap();
        assert!(bad > 0.1, "{bad}");
    }

    #[test]
    fn kinks_are_reported() {
        let x = Tensor::new(&[1], vec![1e-7]).unwrap();
        let r = check_inputs(&[x], |t, v| {
            let a = t.abs(v[0])?;
            t.sum(a)
        }, &FdConfig::default(), &mut Rng::seed(2))
        .unwrap();
        assert!(r.is_none());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 1e-6).abs() < 1e-18);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
