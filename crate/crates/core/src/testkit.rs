//! Property suites shared by the crate's tests and the acceptance harness.
//! Every suite runs a fixed-seed proptest runner, so reruns see the same cases.

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};

use crate::imaging::Rng;
use crate::losses::{
    color_loss, contextual_loss, perceptual_loss, pixel_loss, texture_loss, triplet_loss, ContextualParams,
    PixelLoss,
};
use crate::networks::{Conv2d, FeatureNetPsi, Module};
use crate::tensor::gradcheck::{check_inputs, check_params, op_catalog, smooth_trials, FdConfig};
use crate::trainer::{DplNetworks, FineTuneMode, TrainError};
use crate::tensor::{Tape, Tensor, Var};

/// Outcome of one property over `cases` generated inputs.
#[derive(Debug, Clone)]
pub struct PropertyReport {
    pub name: &'static str,
    pub cases: u32,
    pub outcome: Result<(), String>,
}

impl PropertyReport {
    pub fn passed(&self) -> bool {
        self.outcome.is_ok()
    }
}

pub fn runner(cases: u32, seed: u64) -> TestRunner {
    let mut bytes = [0u8; 32];
    bytes[..8].copy_from_slice(&seed.to_le_bytes());
    let config = Config {
        cases,
        failure_persistence: None,
        max_global_rejects: cases * 4,
        ..Config::default()
    };
    TestRunner::new_with_rng(config, TestRng::from_seed(RngAlgorithm::ChaCha, &bytes))
}

/// `[C,H,W]` shape and values.
pub type Feature = (Vec<usize>, Vec<f64>);

fn tap_shapes(taps: std::ops::RangeInclusive<usize>, c: std::ops::Range<usize>) -> impl Strategy<Value = Vec<(usize, usize, usize)>> {
    taps.prop_flat_map(move |n| prop::collection::vec((c.clone(), 1usize..4, 1usize..4), n))
}

fn filled(shapes: Vec<(usize, usize, usize)>, copies: usize, range: f64) -> impl Strategy<Value = Vec<Vec<Feature>>> {
    let one = move |shapes: &Vec<(usize, usize, usize)>| {
        shapes
            .iter()
            .map(|&(c, h, w)| prop::collection::vec(-range..range, c * h * w).prop_map(move |v| (vec![c, h, w], v)))
            .collect::<Vec<_>>()
    };
    (0..copies).map(|_| one(&shapes)).collect::<Vec<_>>()
}

/// `copies` feature sets sharing one random list of tap shapes.
pub fn feature_sets(copies: usize) -> impl Strategy<Value = Vec<Vec<Feature>>> {
    tap_shapes(1..=3, 1..5).prop_flat_map(move |s| filled(s, copies, 2.0))
}

/// `copies` images `[3,H,W]` of one random extent with values in `[0,1]`.
pub fn images(copies: usize) -> impl Strategy<Value = Vec<Feature>> {
    (2usize..9, 2usize..9).prop_flat_map(move |(h, w)| {
        prop::collection::vec(
            prop::collection::vec(0.0..1.0f64, 3 * h * w).prop_map(move |v| (vec![3, h, w], v)),
            copies,
        )
    })
}

fn tensor(f: &Feature) -> Tensor<f64> {
    Tensor::new(&f.0, f.1.clone()).expect("generated shape")
}

fn record(tape: &mut Tape<f64>, set: &[Feature]) -> Vec<Var> {
    set.iter().map(|f| tape.constant(&tensor(f))).collect()
}

fn scalar(
    tape: &mut Tape<f64>,
    loss: impl FnOnce(&mut Tape<f64>) -> crate::tensor::Result<Var>,
) -> Result<f64, TestCaseError> {
    let v = loss(tape).map_err(|e| TestCaseError::fail(e.to_string()))?;
    tape.scalar(v).map_err(|e| TestCaseError::fail(e.to_string()))
}

/// Direct evaluation of the contextual loss for one tap, given as rows of
/// per-position vectors.
pub fn contextual_reference(x: &[Vec<f64>], y: &[Vec<f64>], p: &ContextualParams) -> f64 {
    let c = y[0].len();
    let mu: Vec<f64> = (0..c).map(|k| y.iter().map(|r| r[k]).sum::<f64>() / y.len() as f64).collect();
    let unit = |r: &Vec<f64>| -> Vec<f64> {
        let centered: Vec<f64> = r.iter().zip(&mu).map(|(a, m)| a - m).collect();
        let n = (centered.iter().map(|v| v * v).sum::<f64>() + p.epsilon * p.epsilon).sqrt();
        centered.iter().map(|v| v / n).collect()
    };
    let xs: Vec<Vec<f64>> = x.iter().map(unit).collect();
    let ys: Vec<Vec<f64>> = y.iter().map(unit).collect();
    let mut cx = vec![vec![0.0; ys.len()]; xs.len()];
    for (i, xi) in xs.iter().enumerate() {
        let d: Vec<f64> = ys
            .iter()
            .map(|yj| 1.0 - xi.iter().zip(yj).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let dmin = d.iter().cloned().fold(f64::INFINITY, f64::min);
        let w: Vec<f64> = d.iter().map(|dij| ((1.0 - dij / (dmin + p.epsilon)) / p.bandwidth).exp()).collect();
        let total: f64 = w.iter().sum();
        for j in 0..ys.len() {
            cx[i][j] = w[j] / total;
        }
    }
    let score: f64 = (0..ys.len())
        .map(|j| (0..xs.len()).map(|i| cx[i][j]).fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / ys.len() as f64;
    -score.ln()
}

fn rows(f: &Feature) -> Vec<Vec<f64>> {
    let (c, n) = (f.0[0], f.0[1] * f.0[2]);
    (0..n).map(|p| (0..c).map(|k| f.1[k * n + p]).collect()).collect()
}

fn sq_dist(a: &[Feature], b: &[Feature]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.1.iter().zip(&y.1).map(|(u, v)| (u - v).powi(2)).sum::<f64>() / x.1.len() as f64)
        .sum()
}

fn run<S: Strategy>(
    name: &'static str,
    cases: u32,
    seed: u64,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> PropertyReport {
    let outcome = runner(cases, seed).run(&strategy, test).map_err(|e| e.to_string());
    PropertyReport { name, cases, outcome }
}

/// Every invariant of the loss functions, `cases` inputs each.
pub fn loss_properties(cases: u32, seed: u64) -> Vec<PropertyReport> {
    let params = ContextualParams::default();
    let mut out = Vec::new();

    out.push(run(
        "losses are non-negative",
        cases,
        seed,
        (feature_sets(3), images(2), 0.0..2.0f64),
        |(sets, imgs, margin)| {
            let mut t = Tape::new();
            let (a, p, n) = (record(&mut t, &sets[0]), record(&mut t, &sets[1]), record(&mut t, &sets[2]));
            let (ia, ib) = (t.constant(&tensor(&imgs[0])), t.constant(&tensor(&imgs[1])));
            let values = [
                scalar(&mut t, |t| perceptual_loss(t, &a, &p))?,
                scalar(&mut t, |t| contextual_loss(t, &a, &p, &params))?,
                scalar(&mut t, |t| triplet_loss(t, &a, &p, &n, margin))?,
                scalar(&mut t, |t| color_loss(t, ia, ib, 3.0))?,
                scalar(&mut t, |t| texture_loss(t, ia, ib))?,
                scalar(&mut t, |t| pixel_loss(t, PixelLoss::L1, ia, ib))?,
                scalar(&mut t, |t| pixel_loss(t, PixelLoss::Mse, ia, ib))?,
            ];
            prop_assert!(values.iter().all(|v| *v >= 0.0), "{values:?}");
            Ok(())
        },
    ));

    out.push(run(
        "identical inputs give zero loss",
        cases,
        seed + 1,
        (feature_sets(1), images(1)),
        |(sets, imgs)| {
            let mut t = Tape::new();
            let (a, b) = (record(&mut t, &sets[0]), record(&mut t, &sets[0]));
            let (ia, ib) = (t.constant(&tensor(&imgs[0])), t.constant(&tensor(&imgs[0])));
            let values = [
                scalar(&mut t, |t| perceptual_loss(t, &a, &b))?,
                scalar(&mut t, |t| color_loss(t, ia, ib, 3.0))?,
                scalar(&mut t, |t| texture_loss(t, ia, ib))?,
                scalar(&mut t, |t| pixel_loss(t, PixelLoss::L1, ia, ib))?,
                scalar(&mut t, |t| pixel_loss(t, PixelLoss::Mse, ia, ib))?,
            ];
            prop_assert!(values.iter().all(|v| *v == 0.0), "{values:?}");
            Ok(())
        },
    ));

    out.push(run(
        "contextual self-match is below 0.01",
        cases,
        seed + 2,
        tap_shapes(1..=2, 4..9).prop_flat_map(|s| filled(s, 1, 2.0)),
        |sets| {
            let mut t = Tape::new();
            let (a, b) = (record(&mut t, &sets[0]), record(&mut t, &sets[0]));
            let v = scalar(&mut t, |t| contextual_loss(t, &a, &b, &params))?;
            prop_assert!(v < 0.01, "{v}");
            Ok(())
        },
    ));

    out.push(run(
        "triplet loss vanishes once the margin is met",
        cases,
        seed + 3,
        (feature_sets(3), 0.0..0.999f64),
        |(sets, frac)| {
            // pull the positive towards the anchor and push the negative away
            let anchor = sets[0].clone();
            let positive: Vec<Feature> = anchor
                .iter()
                .zip(&sets[1])
                .map(|(a, p)| (a.0.clone(), a.1.iter().zip(&p.1).map(|(x, y)| x + 0.1 * y).collect()))
                .collect();
            let negative: Vec<Feature> = anchor
                .iter()
                .zip(&sets[2])
                .map(|(a, n)| (a.0.clone(), a.1.iter().zip(&n.1).map(|(x, y)| x + 2.0 + y).collect()))
                .collect();
            let (dp, dn) = (sq_dist(&anchor, &positive), sq_dist(&anchor, &negative));
            prop_assume!(dn > dp);
            let margin = frac * (dn - dp);
            prop_assume!(dn >= dp + margin + 1e-9 * dn);
            let mut t = Tape::new();
            let (a, p, n) = (record(&mut t, &anchor), record(&mut t, &positive), record(&mut t, &negative));
            let v = scalar(&mut t, |t| triplet_loss(t, &a, &p, &n, margin))?;
            prop_assert_eq!(v, 0.0);
            Ok(())
        },
    ));

    out.push(run(
        "pixel, color and texture losses are symmetric",
        cases,
        seed + 4,
        images(2),
        |imgs| {
            let mut t = Tape::new();
            let (a, b) = (t.constant(&tensor(&imgs[0])), t.constant(&tensor(&imgs[1])));
            let pairs = [
                (scalar(&mut t, |t| color_loss(t, a, b, 3.0))?, scalar(&mut t, |t| color_loss(t, b, a, 3.0))?),
                (scalar(&mut t, |t| texture_loss(t, a, b))?, scalar(&mut t, |t| texture_loss(t, b, a))?),
                (
                    scalar(&mut t, |t| pixel_loss(t, PixelLoss::L1, a, b))?,
                    scalar(&mut t, |t| pixel_loss(t, PixelLoss::L1, b, a))?,
                ),
                (
                    scalar(&mut t, |t| pixel_loss(t, PixelLoss::Mse, a, b))?,
                    scalar(&mut t, |t| pixel_loss(t, PixelLoss::Mse, b, a))?,
                ),
            ];
            for (x, y) in pairs {
                prop_assert_eq!(x, y);
            }
            Ok(())
        },
    ));

    out.push(run(
        "contextual loss matches direct evaluation on 2-D features",
        cases,
        seed + 5,
        (1usize..7, 1usize..7).prop_flat_map(|(nx, ny)| {
            (
                prop::collection::vec(-2.0..2.0f64, 2 * nx).prop_map(move |v| (vec![2, 1, nx], v)),
                prop::collection::vec(-2.0..2.0f64, 2 * ny).prop_map(move |v| (vec![2, 1, ny], v)),
            )
        }),
        |(fx, fy)| {
            let mut t = Tape::new();
            let (a, b) = (t.constant(&tensor(&fx)), t.constant(&tensor(&fy)));
            let v = scalar(&mut t, |t| contextual_loss(t, &[a], &[b], &params))?;
            let r = contextual_reference(&rows(&fx), &rows(&fy), &params);
            prop_assert!((v - r).abs() <= 1e-6 * r.abs().max(1.0), "{v} vs {r}");
            Ok(())
        },
    ));

    out.push(gradient_property(cases, seed + 6));
    out
}

/// Loss gradients against central differences (1e-5 relative) at smooth points.
fn gradient_property(cases: u32, seed: u64) -> PropertyReport {
    let params = ContextualParams::default();
    let cfg = FdConfig {
        max_coordinates: 12,
        ..FdConfig::default()
    };
    run(
        "loss gradients match finite differences",
        cases,
        seed,
        (feature_sets(3), images(2), any::<u64>()),
        move |(sets, imgs, s)| {
            let mut rng = Rng::seed(s);
            let taps = sets[0].len();
            let flat: Vec<Tensor<f64>> = sets.iter().flatten().map(tensor).collect();
            let split = move |v: &[Var]| (v[..taps].to_vec(), v[taps..2 * taps].to_vec(), v[2 * taps..].to_vec());
            let pics: Vec<Tensor<f64>> = imgs.iter().map(tensor).collect();
            let checks: Vec<crate::tensor::Result<Option<f64>>> = vec![
                check_inputs(&flat, |t, v| {
                    let (a, b, _) = split(v);
                    perceptual_loss(t, &a, &b)
                }, &cfg, &mut rng),
                check_inputs(&flat, |t, v| {
                    let (a, b, _) = split(v);
                    contextual_loss(t, &a, &b, &params)
                }, &cfg, &mut rng),
                check_inputs(&flat, |t, v| {
                    let (a, p, n) = split(v);
                    triplet_loss(t, &a, &p, &n, 1.0)
                }, &cfg, &mut rng),
                check_inputs(&pics, |t, v| color_loss(t, v[0], v[1], 3.0), &cfg, &mut rng),
                check_inputs(&pics, |t, v| texture_loss(t, v[0], v[1]), &cfg, &mut rng),
                check_inputs(&pics, |t, v| pixel_loss(t, PixelLoss::Mse, v[0], v[1]), &cfg, &mut rng),
                check_inputs(&pics, |t, v| pixel_loss(t, PixelLoss::L1, v[0], v[1]), &cfg, &mut rng),
            ];
            for (k, c) in checks.into_iter().enumerate() {
                match c.map_err(|e| TestCaseError::fail(e.to_string()))? {
                    Some(err) => prop_assert!(err <= 1e-5, "loss #{k}: relative error {err:e}"),
                    None => return Err(TestCaseError::reject("non-smooth point")),
                }
            }
            Ok(())
        },
    )
}

/// Worst finite-difference disagreement over a batch of smooth trials.
#[derive(Debug, Clone)]
pub struct GradientReport {
    pub name: String,
    pub trials: usize,
    pub worst: f64,
    /// Points discarded as kinks.
    pub skipped: usize,
}

/// Every primitive of the op catalog.
pub fn op_gradients(trials: usize, seed: u64) -> crate::tensor::Result<Vec<GradientReport>> {
    let cfg = FdConfig::default();
    let mut rng = Rng::seed(seed);
    op_catalog()
        .into_iter()
        .map(|case| {
            let (worst, skipped) = smooth_trials(trials, &cfg, || case.trial(&cfg, &mut rng))?;
            Ok(GradientReport { name: case.name.to_owned(), trials, worst, skipped })
        })
        .collect()
}

#[derive(Debug, Clone)]
struct Pipeline {
    nets: DplNetworks<f64>,
    images: Vec<Tensor<f64>>,
}

impl Pipeline {
    fn random(rng: &mut Rng, images: usize) -> Self {
        let psi = FeatureNetPsi::new(rng);
        let mut nets = DplNetworks::new(psi, rng);
        // a zero output layer would leave the body without gradient
        nets.f.out = Conv2d::kaiming(16, 3, 3, 1, 1, rng);
        for w in nets.f.out.weight.data_mut() {
            *w *= 0.1;
        }
        let images = (0..images)
            .map(|_| Tensor::new(&[3, 8, 8], (0..192).map(|_| rng.uniform()).collect()).expect("fixed shape"))
            .collect();
        Pipeline { nets, images }
    }
}

fn generator_params(s: &mut Pipeline) -> Vec<&mut Tensor<f64>> {
    s.nets.f.params_mut()
}

fn phi_params(s: &mut Pipeline) -> Vec<&mut Tensor<f64>> {
    s.nets.phi.params_mut()
}

fn psi_params(s: &mut Pipeline) -> Vec<&mut Tensor<f64>> {
    s.nets.psi.params_mut()
}

fn generator_objective(s: &Pipeline, t: &mut Tape<f64>) -> Result<Var, TrainError> {
    let x = t.constant(&s.images[0]);
    let y = t.constant(&s.images[1]);
    let fx = s.nets.f.forward(t, x)?;
    let a = s.nets.perceptual_features(t, fx, FineTuneMode::FeatureSelection)?;
    let b = s.nets.perceptual_features(t, y, FineTuneMode::FeatureSelection)?;
    Ok(perceptual_loss(t, &a, &b)?)
}

fn selector_objective(s: &Pipeline, t: &mut Tape<f64>, mode: FineTuneMode) -> Result<Var, TrainError> {
    let feats = s
        .images
        .iter()
        .map(|img| {
            let v = t.constant(img);
            s.nets.perceptual_features(t, v, mode)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(triplet_loss(t, &feats[0], &feats[1], &feats[2], 1.0)?)
}

/// The generator objective through `Φ∘Ψ`, and the triplet objective
/// with respect to `Φ` and, in full fine-tuning, `Ψ`.
pub fn pipeline_gradients(trials: usize, seed: u64) -> Result<Vec<GradientReport>, TrainError> {
    let cfg = FdConfig::default();
    let mut rng = Rng::seed(seed);
    let mut out = Vec::new();

    let (worst, skipped) = smooth_trials(trials, &cfg, || {
        let mut s = Pipeline::random(&mut rng, 2);
        s.nets.enter_generator_phase();
        check_params(&s, generator_params, generator_objective, &cfg, &mut rng)
    })?;
    out.push(GradientReport { name: "generator through perceptual loss".into(), trials, worst, skipped });

    let (worst, skipped) = smooth_trials(trials, &cfg, || {
        let mut s = Pipeline::random(&mut rng, 3);
        s.nets.enter_selector_phase(FineTuneMode::FeatureSelection);
        check_params(
            &s,
            phi_params,
            |s, t| selector_objective(s, t, FineTuneMode::FeatureSelection),
            &cfg,
            &mut rng,
        )
    })?;
    out.push(GradientReport { name: "selection head through triplet loss".into(), trials, worst, skipped });

    let (worst, skipped) = smooth_trials(trials, &cfg, || {
        let mut s = Pipeline::random(&mut rng, 3);
        s.nets.enter_selector_phase(FineTuneMode::Full);
        check_params(&s, psi_params, |s, t| selector_objective(s, t, FineTuneMode::Full), &cfg, &mut rng)
    })?;
    out.push(GradientReport { name: "feature network through triplet loss".into(), trials, worst, skipped });
    Ok(out)
}
