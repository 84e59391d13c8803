use std::fs;
use std::path::{Path, PathBuf};

use dpl::networks::load_checkpoint;
use dpl_cli::commands::{self, EvalOptions};
use dpl_cli::run::{resolve, run};
use dpl_cli::{parse_config, ExperimentConfig};

fn cfg(out: &Path, extra: &str) -> ExperimentConfig {
    let text = format!(
        "out = {}\ndata.train = 6\ndata.val = 3\npretrain.samples = 200\npretrain.held_out = 50\n\
         pretrain.epochs = 1\npretrain.gate = 0\ndpl.iterations = 20\ntrain.sample_every = 10\n{extra}",
        out.display()
    );
    parse_config(&text).unwrap()
}

fn args(cmd: &str, out: &Path, extra: &[&str]) -> Vec<String> {
    let mut v: Vec<String> = ["dpl", cmd, "--out"].iter().map(|s| s.to_string()).collect();
    v.push(out.display().to_string());
    v.extend(
        [
            "--data.train", "6", "--data.val", "3", "--pretrain.samples", "200", "--pretrain.held_out", "50",
            "--pretrain.epochs", "1", "--pretrain.gate", "0", "--dpl.iterations", "20", "--train.sample_every", "10",
        ]
        .iter()
        .chain(extra)
        .map(|s| s.to_string()),
    );
    v
}

/// Subcommand flags have to precede the `--key value` overrides.
fn with_flags(cmd: &str, flags: &[&str], out: &Path, extra: &[&str]) -> Vec<String> {
    let mut v = args(cmd, out, extra);
    for (i, f) in flags.iter().enumerate() {
        v.insert(2 + i, f.to_string());
    }
    v
}

fn ppms(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "ppm"))
        .collect();
    v.sort();
    v
}

#[test]
fn gen_data_writes_counted_deterministic_pairs() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let c = cfg(&a, "data.train = 10\n");
    assert_eq!(commands::gen_data(&c).unwrap(), [10, 3]);
    commands::gen_data(&cfg(&b, "data.train = 10\n")).unwrap();
    let files = ppms(&a.join("train"));
    assert_eq!(files.len(), 20);
    assert!(files[0].ends_with("0001_x.ppm") && files[19].ends_with("0010_y.ppm"));
    let manifest = fs::read_to_string(a.join("train/manifest.txt")).unwrap();
    assert_eq!(manifest.lines().count(), 10);
    assert_eq!(manifest.lines().next().unwrap(), "0001_x.ppm 0001_y.ppm 1");
    for f in &files {
        let twin = b.join("train").join(f.file_name().unwrap());
        assert_eq!(fs::read(f).unwrap(), fs::read(twin).unwrap());
    }
}

#[test]
fn pretrain_checkpoint_log_and_gate() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("p");
    assert_eq!(run(args("pretrain", &out, &[]), None), 0);
    let ckpt = load_checkpoint(out.join("psi.dplc")).unwrap();
    assert_eq!(ckpt.len(), 6);
    let log = fs::read(out.join("pretrain_log.csv")).unwrap();
    assert!(String::from_utf8_lossy(&log).starts_with("epoch,mean_loss,held_out_accuracy\n"));
    fs::remove_file(out.join("psi.dplc")).unwrap();
    assert_eq!(run(args("pretrain", &out, &[]), None), 0);
    assert_eq!(fs::read(out.join("pretrain_log.csv")).unwrap(), log);

    let gated = tmp.path().join("g");
    assert_eq!(run(args("pretrain", &gated, &["--pretrain.gate", "1"]), None), 2);
    assert!(gated.join("pretrain_log.csv").exists());
    assert!(!gated.join("psi.dplc").exists());
}

fn prepared(dir: &Path, extra: &[&str]) -> PathBuf {
    let out = dir.to_path_buf();
    assert_eq!(run(args("gen-data", &out, extra), None), 0);
    assert_eq!(run(args("pretrain", &out, extra), None), 0);
    out
}

#[test]
fn train_outputs_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let a = prepared(&tmp.path().join("a"), &[]);
    let b = prepared(&tmp.path().join("b"), &[]);
    for out in [&a, &b] {
        assert_eq!(run(args("train", out, &[]), None), 0);
    }
    let history = fs::read_to_string(a.join("history.csv")).unwrap();
    let mut lines = history.lines();
    assert_eq!(
        lines.next().unwrap(),
        "iteration,sample,generator_loss,d_c,perceptual,contextual,pixel_l1,color,texture,\
         selector_updated,generator_norm,selector_norm"
    );
    assert_eq!(lines.count(), 20);
    assert_eq!(history, fs::read_to_string(b.join("history.csv")).unwrap());
    assert_eq!(fs::read(a.join("f.dplc")).unwrap(), fs::read(b.join("f.dplc")).unwrap());
    let samples = ppms(&a.join("samples"));
    assert_eq!(samples.len(), 2);
    let strip = dpl::imaging::load_image(&samples[0]).unwrap();
    assert_eq!((strip.height(), strip.width()), (32, 96));
}

#[test]
fn frozen_mode_history_has_zero_d_c() {
    let tmp = tempfile::tempdir().unwrap();
    let out = prepared(tmp.path(), &["--dpl.mode", "frozen"]);
    assert_eq!(run(args("train", &out, &["--dpl.mode", "frozen"]), None), 0);
    let mut rdr = csv::Reader::from_path(out.join("history.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 20);
    assert!(rows.iter().all(|r| &r[3] == "0" && &r[9] == "0"));
}

#[test]
fn numerical_halt_exits_3_with_partial_history() {
    let tmp = tempfile::tempdir().unwrap();
    let out = prepared(tmp.path(), &[]);
    let code = run(args("train", &out, &["--dpl.lr_generator", "1e30", "--dpl.iterations", "50"]), None);
    assert_eq!(code, 3);
    let rows = fs::read_to_string(out.join("history.csv")).unwrap().lines().count() - 1;
    assert!(rows < 50, "{rows}");
    assert!(!out.join("f.dplc").exists());
}

#[test]
fn identity_eval_on_targets_reports_inf() {
    let tmp = tempfile::tempdir().unwrap();
    let out = prepared(tmp.path(), &[]);
    let c = cfg(&out, "");
    let report = commands::eval(&c, &EvalOptions { targets_as_inputs: true, ..EvalOptions::default() }).unwrap();
    assert!(report.rows.iter().all(|r| r.psnr == f64::INFINITY && r.ms_ssim == 1.0));
    let text = fs::read_to_string(out.join("report.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "id,psnr,ms_ssim,dfd");
    assert_eq!(lines.len(), 1 + 3 + 1);
    assert!(lines[1].starts_with("0001,inf,1,"), "{}", lines[1]);
    assert!(lines[4].starts_with("mean,inf,1,"));

    assert_eq!(run(with_flags("eval", &["--identity"], &out, &[]), None), 0);
    let mut rdr = csv::Reader::from_path(out.join("report.csv")).unwrap();
    let rows: Vec<Vec<f64>> = rdr
        .records()
        .map(|r| r.unwrap().iter().skip(1).map(|v| v.parse().unwrap()).collect())
        .collect();
    let (per, mean) = rows.split_at(3);
    for k in 0..3 {
        let avg = per.iter().map(|r| r[k]).sum::<f64>() / 3.0;
        assert!((avg - mean[0][k]).abs() <= 1e-9, "column {k}");
    }
}

#[test]
fn metric_selection_controls_report_columns() {
    let tmp = tempfile::tempdir().unwrap();
    let out = prepared(tmp.path(), &[]);
    assert_eq!(run(with_flags("eval", &["--identity"], &out, &["--metrics", "dfd,psnr"]), None), 0);
    let text = fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), "id,psnr,dfd");
}

#[test]
fn seed_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("c.txt");
    fs::write(&file, "seed = 3\n").unwrap();
    assert_eq!(resolve(Some(&file), None, &[]).unwrap().seed, 3);
    assert_eq!(resolve(Some(&file), Some("7"), &[]).unwrap().seed, 7);
    assert_eq!(resolve(Some(&file), Some("7"), &["--seed".into(), "9".into()]).unwrap().seed, 9);
    assert!(resolve(None, Some("x"), &[]).is_err());
}

#[test]
fn usage_and_config_errors_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("bad.txt");
    fs::write(&file, "dpl.margin = -1\n").unwrap();
    assert_eq!(run(["dpl", "gen-data", "--config", file.to_str().unwrap()], None), 1);
    assert_eq!(run(["dpl", "train", "--no.such.key", "1"], None), 1);
    assert_eq!(run(["dpl"], None), 1);
    assert_eq!(run(["dpl", "--help"], None), 0);
}

#[test]
fn binary_reads_seed_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("e");
    let status = std::process::Command::new(env!("CARGO_BIN_EXE_dpl"))
        .args(["gen-data", "--out", out.to_str().unwrap(), "--data.train", "1", "--data.val", "1"])
        .env("DPL_SEED", "42")
        .output()
        .unwrap();
    assert!(status.status.success());
    let manifest = fs::read_to_string(out.join("train/manifest.txt")).unwrap();
    assert_eq!(manifest, "0001_x.ppm 0001_y.ppm 42\n");
}

#[test]
fn distort_applies_the_configured_distortion() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    assert_eq!(run(args("gen-data", &out, &[]), None), 0);
    let input = out.join("train/0001_y.ppm");
    let output = tmp.path().join("gray.ppm");
    let a = [
        "dpl", "distort", "--input", input.to_str().unwrap(), "--output", output.to_str().unwrap(),
        "--dpl.triplet.distortion", "grayscale",
    ];
    assert_eq!(run(a, None), 0);
    let img = dpl::imaging::load_image(&output).unwrap();
    assert!(img.pixels().chunks(3).all(|p| p[0] == p[1] && p[1] == p[2]));
}
