//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! The process fails if a mechanical criterion (1-4, 7, 8) fails. The two
//! directional comparisons (5, 6) are reported but only fail the process
//! when `DPL_ACCEPTANCE_STRICT` is set.

use std::fs;
use std::path::Path;
use std::time::Instant;

use dpl::imaging::synth::{generate_pairs, generate_textures, scene, Pair, Task};
use dpl::imaging::{decode_ppm, encode_ppm, Image, Rng};
use dpl::losses::triplet_loss;
use dpl::metrics::{color_error, feature_distance, ms_ssim, psnr};
use dpl::networks::{pretrain_psi, Checkpoint, FeatureNetPsi, GeneratorF, Module, PretrainConfig};
use dpl::tensor::{Adam, AdamConfig, Tape};
use dpl::testkit::{loss_properties, op_gradients, pipeline_gradients};
use dpl::trainer::{
    build_triplet, run_training, selector_accumulate, selector_apply, DplConfig, DplNetworks, FineTuneMode,
    TrainState, Trainer, Triplet,
};
use dpl_cli::commands::{self, EvalOptions};
use dpl_cli::{emit_config, parse_config, ExperimentConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

type Check = Result<Outcome, Box<dyn std::error::Error>>;

fn gradients() -> Check {
    let mut worst = (0.0f64, String::new());
    let mut skipped = 0;
    let reports = op_gradients(100, 101)?.into_iter().chain(pipeline_gradients(100, 102)?);
    let mut count = 0;
    for r in reports {
        count += 1;
        skipped += r.skipped;
        if r.worst >= worst.0 {
            worst = (r.worst, r.name);
        }
    }
    Ok(outcome(
        worst.0 <= 1e-5,
        format!("{count} ops and pipelines x 100 points, worst relative error {:.2e} ({}), {skipped} kinks resampled", worst.0, worst.1),
    ))
}

fn mechanics() -> Check {
    let mut rng = Rng::seed(21);
    let data = generate_pairs(Task::Colorcast, 40, 32, &mut rng)?;
    let cfg = DplConfig { iterations: 200, ..DplConfig::default() };
    let nets = DplNetworks::<f32>::new(FeatureNetPsi::new(&mut rng), &mut rng);
    let psi = nets.psi.fingerprint();
    let mut trainer = Trainer::new(cfg, nets, &mut rng)?.verify_freeze(true);
    trainer.run(&data)?;
    let psi_kept = trainer.nets.psi.fingerprint() == psi;
    let updates = trainer.history.iter().filter(|r| r.selector_updated).count();

    // N accumulations + apply against one summed-loss tape, 64-bit
    let n = 4;
    let cfg = DplConfig { interval: n, ..DplConfig::default() };
    let mut nets = DplNetworks::<f64>::new(FeatureNetPsi::new(&mut rng), &mut rng);
    let mut state = TrainState::new(&cfg, &mut nets, &mut rng);
    nets.enter_selector_phase(cfg.mode);
    let triplets: Vec<Triplet> = (0..n)
        .map(|k| build_triplet(&cfg.strategy, &data[k].x, &data[k].y, &data[k].x, &mut rng))
        .collect::<Result<_, _>>()?;
    let mut reference = nets.clone();
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr_selector), reference.phi.params());
    for t in &triplets {
        selector_accumulate(&mut nets, t, &cfg, &mut state)?;
    }
    let accumulated: Vec<Vec<f64>> = nets.phi.params().iter().map(|p| p.grad().unwrap_or(&[]).to_vec()).collect();
    selector_apply(&mut nets, &cfg, &mut state)?;

    let mut tape = Tape::new();
    let mut total = None;
    for t in &triplets {
        let mut feats = |img: &Image| {
            let v = tape.constant(&img.to_tensor::<f64>());
            reference.perceptual_features(&mut tape, v, cfg.mode)
        };
        let (a, p, ng) = (feats(&t.anchor)?, feats(&t.positive)?, feats(&t.negative)?);
        let l = triplet_loss(&mut tape, &a, &p, &ng, cfg.margin)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
    }
    tape.backward_into(total.expect("n > 0"), reference.phi.params_mut())?;
    let summed: Vec<Vec<f64>> = reference.phi.params().iter().map(|p| p.grad().unwrap_or(&[]).to_vec()).collect();
    opt.step(reference.phi.params_mut())?;
    let grads_equal = accumulated == summed;
    let params_equal = nets.phi.params().iter().zip(reference.phi.params()).all(|(p, q)| p.data() == q.data());

    Ok(outcome(
        psi_kept && updates == 50 && grads_equal && params_equal,
        format!(
            "200 iterations with per-phase hash checks, feature network unchanged: {psi_kept}, {updates} selector steps; \
             accumulated vs summed-loss gradients identical: {grads_equal}, parameters identical: {params_equal}"
        ),
    ))
}

fn loss_suite() -> Check {
    let reports = loss_properties(1000, 31);
    let failed: Vec<String> = reports
        .iter()
        .filter_map(|r| r.outcome.as_ref().err().map(|e| format!("{}: {e}", r.name)))
        .collect();
    Ok(outcome(
        failed.is_empty(),
        if failed.is_empty() {
            format!("{} properties x 1000 cases", reports.len())
        } else {
            failed.join("; ")
        },
    ))
}

fn pretraining(cfg: &ExperimentConfig) -> Check {
    let report = commands::pretrain(cfg)?;
    let acc = report.final_accuracy();
    let epochs = report.epoch_accuracy.len();
    Ok(outcome(
        acc >= 0.8 && epochs <= 5,
        format!("held-out accuracy {acc:.4} after {epochs} epochs of 2000 samples"),
    ))
}

#[derive(Default, Clone, Copy)]
struct Scores {
    dfd: f64,
    color: f64,
    psnr: f64,
}

fn scores(f: &GeneratorF<f32>, psi: &FeatureNetPsi<f32>, val: &[Pair]) -> Result<Scores, Box<dyn std::error::Error>> {
    let mut s = Scores::default();
    for p in val {
        let out = Image::from_tensor(&f.apply(&p.x.to_tensor::<f32>())?)?;
        s.dfd += feature_distance(&out, &p.y, psi)?;
        s.color += color_error(&out, &p.y)?;
        s.psnr += psnr(&out, &p.y)?;
    }
    let n = val.len() as f64;
    Ok(Scores { dfd: s.dfd / n, color: s.color / n, psnr: s.psnr / n })
}

/// Frozen and feature-selection scores per task, seed-averaged.
fn directional_runs(tasks: &[Task]) -> Result<Vec<[Scores; 2]>, Box<dyn std::error::Error>> {
    let seeds = [1u64, 2, 3];
    let mut sums = vec![[Scores::default(); 2]; tasks.len()];
    for &seed in &seeds {
        let mut rng = Rng::seed(seed);
        let train = generate_textures(2000, 32, &mut rng)?;
        let held = generate_textures(500, 32, &mut rng)?;
        let mut psi = FeatureNetPsi::<f32>::new(&mut rng);
        pretrain_psi(&mut psi, &train, &held, &PretrainConfig::default(), &mut rng)?;
        for (t, &task) in tasks.iter().enumerate() {
            let mut data_rng = rng.clone();
            let data = generate_pairs(task, 400, 32, &mut data_rng)?;
            let val = generate_pairs(task, 50, 32, &mut data_rng)?;
            for (m, mode) in [FineTuneMode::Frozen, FineTuneMode::FeatureSelection].into_iter().enumerate() {
                let cfg = DplConfig { mode, iterations: 2000, ..DplConfig::default() };
                let (f, _) = run_training(&cfg, &data, psi.clone(), &mut Rng::seed(seed * 100))?;
                let s = scores(&f, &psi, &val)?;
                let acc = &mut sums[t][m];
                acc.dfd += s.dfd;
                acc.color += s.color;
                acc.psnr += s.psnr;
            }
        }
    }
    let k = seeds.len() as f64;
    Ok(sums
        .into_iter()
        .map(|pair| pair.map(|s| Scores { dfd: s.dfd / k, color: s.color / k, psnr: s.psnr / k }))
        .collect())
}

fn colorcast_claim(s: &[Scores; 2]) -> Outcome {
    let [frozen, fs] = s;
    outcome(
        fs.dfd < frozen.dfd && fs.color < frozen.color,
        format!(
            "DFD {:.4e} vs frozen {:.4e}, color error {:.5} vs frozen {:.5} (3 seeds, 50 held-out pairs)",
            fs.dfd, frozen.dfd, fs.color, frozen.color
        ),
    )
}

fn darken_claim(s: &[Scores; 2]) -> Outcome {
    let [frozen, fs] = s;
    outcome(
        fs.psnr >= frozen.psnr - 0.2 && fs.dfd < frozen.dfd,
        format!(
            "PSNR {:.3} dB vs frozen {:.3} dB (tolerance 0.2), DFD {:.4e} vs frozen {:.4e} (3 seeds, 50 held-out pairs)",
            fs.psnr, frozen.psnr, fs.dfd, frozen.dfd
        ),
    )
}

fn metric_sanity(cfg: &ExperimentConfig) -> Check {
    let black = Image::filled(32, 32, [0.0; 3])?;
    let offset = Image::filled(32, 32, [0.1; 3])?;
    let db = psnr(&black, &offset)?;
    let a = scene(32, &mut Rng::seed(71))?;
    let self_ssim = ms_ssim(&a, &a)?;
    commands::gen_data(cfg)?;
    let report = commands::eval(cfg, &EvalOptions { targets_as_inputs: true, ..EvalOptions::default() })?;
    let all_inf = report.rows.iter().all(|r| r.psnr == f64::INFINITY);
    Ok(outcome(
        (db - 20.0).abs() <= 1e-6 && self_ssim == 1.0 && all_inf,
        format!(
            "offset psnr {db:.9} dB, ms_ssim(a,a) = {self_ssim}, identity generator on (Y,Y): {} of {} rows inf",
            report.rows.iter().filter(|r| r.psnr.is_infinite()).count(),
            report.count()
        ),
    ))
}

fn determinism(base: &Path) -> Check {
    let mut notes = Vec::new();
    let run = |dir: &Path| -> Result<(Vec<u8>, Vec<u8>), Box<dyn std::error::Error>> {
        let cfg = parse_config(&format!(
            "out = {}\ndata.train = 50\ndata.val = 5\npretrain.samples = 300\npretrain.held_out = 100\n\
             pretrain.epochs = 1\npretrain.gate = 0\ndpl.iterations = 300\n",
            dir.display()
        ))?;
        commands::gen_data(&cfg)?;
        commands::pretrain(&cfg)?;
        commands::train(&cfg, &commands::psi_path(&cfg))?;
        Ok((fs::read(cfg.out.join("history.csv"))?, fs::read(commands::generator_path(&cfg))?))
    };
    let (a, b) = (run(&base.join("a"))?, run(&base.join("b"))?);
    let runs_equal = a == b;
    notes.push(format!("history.csv and f.dplc identical across runs: {runs_equal}"));

    let ckpt = Checkpoint::decode(&a.1)?;
    let ckpt_ok = ckpt.encode() == a.1 && {
        let path = base.join("copy.dplc");
        ckpt.save(&path)?;
        Checkpoint::load(&path)? == ckpt
    };
    notes.push(format!("checkpoint round-trip: {ckpt_ok}"));

    let img = scene(32, &mut Rng::seed(5))?;
    let bytes = encode_ppm(&img);
    let back = decode_ppm(&bytes)?;
    let ppm_ok = encode_ppm(&back) == bytes && decode_ppm(&encode_ppm(&back))? == back;
    notes.push(format!("PPM round-trip: {ppm_ok}"));

    let custom = parse_config("task = darken\nseed = 12\ndpl.mode = full\ndpl.margin = 0.3\ndpl.lr_selector = 2.5e-4\n")?;
    let config_ok = [ExperimentConfig::default(), custom]
        .iter()
        .all(|c| parse_config(&emit_config(c)).ok().as_ref() == Some(c));
    notes.push(format!("config round-trip: {config_ok}"));

    Ok(outcome(runs_equal && ckpt_ok && ppm_ok && config_ok, notes.join(", ")))
}

fn report(n: usize, what: &str, started: Instant, result: Check) -> bool {
    let (pass, detail) = match result {
        Ok(o) => (o.pass, o.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    println!(
        "criterion {n} {}: {what}: {detail} [{:.1}s]",
        if pass { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64()
    );
    pass
}

fn main() {
    let strict = std::env::var_os("DPL_ACCEPTANCE_STRICT").is_some();
    let tmp = tempfile::tempdir().expect("temporary directory");
    let shared = parse_config(&format!("out = {}\n", tmp.path().join("shared").display())).expect("default config");
    let mut mechanical_ok = true;
    let mut directional_ok = true;

    let t = Instant::now();
    mechanical_ok &= report(1, "gradient integrity", t, gradients());
    let t = Instant::now();
    mechanical_ok &= report(2, "training loop mechanics", t, mechanics());
    let t = Instant::now();
    mechanical_ok &= report(3, "loss properties", t, loss_suite());
    let t = Instant::now();
    mechanical_ok &= report(4, "pretraining gate", t, pretraining(&shared));

    let t = Instant::now();
    match directional_runs(&[Task::Colorcast, Task::Darken]) {
        Ok(runs) => {
            directional_ok &= report(5, "colorcast: feature selection vs frozen", t, Ok(colorcast_claim(&runs[0])));
            directional_ok &= report(6, "darken: feature selection vs frozen", Instant::now(), Ok(darken_claim(&runs[1])));
        }
        Err(e) => {
            let msg = e.to_string();
            directional_ok &= report(5, "colorcast: feature selection vs frozen", t, Err(msg.clone().into()));
            directional_ok &= report(6, "darken: feature selection vs frozen", t, Err(msg.into()));
        }
    }

    let t = Instant::now();
    mechanical_ok &= report(7, "metric sanity", t, metric_sanity(&shared));
    let t = Instant::now();
    mechanical_ok &= report(8, "determinism and formats", t, determinism(&tmp.path().join("det")));

    if !mechanical_ok || (strict && !directional_ok) {
        std::process::exit(1);
    }
}
