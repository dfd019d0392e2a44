use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn xct(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xct"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = xct(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fail(args: &[&str]) -> String {
    let out = xct(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(
        err.lines().any(|l| l.starts_with("error kind=")),
        "no machine-readable error line in {err}"
    );
    err
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Data rows (non-comment, non-header) of a CSV as float vectors.
fn rows(path: &Path) -> Vec<Vec<f64>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

fn synth(dir: &Path, name: &str, args: &[&str]) -> PathBuf {
    let out = dir.join(name);
    let mut a = vec!["synth", "--out", s(&out)];
    a.extend_from_slice(args);
    ok(&a);
    out.join("synth.csv")
}

fn tiny_config(dir: &Path, data: &Path, extra: &str) -> PathBuf {
    let path = dir.join(format!("cfg{}.toml", extra.len()));
    let text = format!(
        "task = \"forecast\"\ndata_path = \"{}\"\nseq_len = 96\npred_len = 96\nfeatures = \"MS\"\n\
         d_model = 8\nn_heads = 2\ne_layers = 1\nepochs = 1\nbatch_size = 16\ntrain_stride = 32\n{extra}",
        s(data)
    );
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn synth_default_shape_noise_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let full = rows(&synth(dir.path(), "a", &[]));
    assert_eq!(full.len(), 10_000);
    assert!(full.iter().all(|r| r.len() == 7));

    let clean_a = rows(&synth(dir.path(), "b", &["--n-points", "600", "--noise", "0"]));
    let clean_b = rows(&synth(dir.path(), "c", &["--n-points", "600", "--noise", "0"]));
    assert_eq!(clean_a, clean_b);
    let reseeded = rows(&synth(dir.path(), "d", &["--n-points", "600", "--noise", "0", "--seed", "7"]));
    let target = |r: &Vec<Vec<f64>>| r.iter().map(|x| x[6]).collect::<Vec<_>>();
    let walks = |r: &Vec<Vec<f64>>| r.iter().map(|x| (x[4], x[5])).collect::<Vec<_>>();
    assert_eq!(target(&clean_a), target(&reseeded));
    assert_ne!(walks(&clean_a), walks(&reseeded));
}

#[test]
fn train_eval_and_mask_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "data", &["--n-points", "1500"]);
    let cfg = tiny_config(dir.path(), &data, "");
    let run = dir.path().join("run");
    let stdout = ok(&["train", "--config", s(&cfg), "--out", s(&run)]);
    assert!(stdout.contains("mse=") && stdout.contains("mae="), "{stdout}");
    for f in ["history.csv", "metrics.csv", "checkpoint/params.bin", "checkpoint/manifest.csv"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let meta = std::fs::read_to_string(run.join("checkpoint/meta.toml")).unwrap();
    assert!(meta.contains("attention_mode = \"crab\""), "{meta}");

    let ev = dir.path().join("eval");
    ok(&["eval", "--checkpoint", s(&run.join("checkpoint")), "--out", s(&ev)]);
    assert_eq!(
        std::fs::read(run.join("metrics.csv")).unwrap(),
        std::fs::read(ev.join("metrics.csv")).unwrap()
    );

    let rep = dir.path().join("report");
    ok(&[
        "mask-report",
        "--checkpoint",
        s(&run.join("checkpoint")),
        "--layer",
        "0",
        "--head",
        "1",
        "--weights",
        "--out",
        s(&rep),
    ]);
    let grid = std::fs::read_to_string(rep.join("heatmap.csv")).unwrap();
    assert_eq!(grid.lines().count(), 12);
    assert!(grid.lines().all(|l| l.split(',').count() == 12));
    assert_eq!(std::fs::read_to_string(rep.join("mask_hist.csv")).unwrap().lines().count(), 102);
    assert!(rep.join("weight_hist.csv").exists());
    assert!(rep.join("heatmap.pgm").exists());
}

#[test]
fn wide_dataset_enables_compression_and_rejects_mask_report() {
    let dir = tempfile::tempdir().unwrap();
    let c = 321;
    let mut csv = (0..c).map(|i| format!("v{i}")).collect::<Vec<_>>().join(",");
    csv.push('\n');
    for t in 0..200 {
        let row: Vec<String> = (0..c).map(|i| format!("{}", ((t * (i + 1)) as f64 * 0.01).sin())).collect();
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    let data = dir.path().join("wide.csv");
    std::fs::write(&data, csv).unwrap();
    let cfg = dir.path().join("wide.toml");
    std::fs::write(
        &cfg,
        format!(
            "task = \"forecast\"\ndata_path = \"{}\"\nseq_len = 32\npred_len = 8\npatch_len = 16\nstride = 16\n\
             d_model = 8\nn_heads = 2\ne_layers = 1\nk = 8\nepochs = 1\nbatch_size = 8\ntrain_stride = 50\n\
             split_train = 0.6\nsplit_val = 0.2\nsplit_test = 0.2\n",
            s(&data)
        ),
    )
    .unwrap();
    let run = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--out", s(&run)]);
    let meta = std::fs::read_to_string(run.join("checkpoint/meta.toml")).unwrap();
    assert!(meta.contains("crab_decop"), "{meta}");
    let err = fail(&["mask-report", "--checkpoint", s(&run.join("checkpoint")), "--out", s(&dir.path().join("r"))]);
    assert!(err.contains("mask not applicable"), "{err}");
}

#[test]
fn config_errors_are_reported_together() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "colour = 3\nd_model = \"big\"\n").unwrap();
    let err = fail(&["train", "--config", s(&cfg), "--out", s(dir.path())]);
    assert!(err.contains("kind=config"), "{err}");
    assert!(err.contains("colour") && err.contains("d_model") && err.contains("task, data_path, seq_len"), "{err}");
}

fn exponent(dir: &Path, name: &str, extra: &[&str]) -> f64 {
    let out = dir.join(name);
    let mut args = vec!["profile", "--out", s(&out)];
    args.extend_from_slice(extra);
    ok(&args);
    let fit = std::fs::read_to_string(out.join("profile_fit.csv")).unwrap();
    assert_eq!(std::fs::read_to_string(out.join("profile.csv")).unwrap().lines().count(), 11);
    fit.lines()
        .find_map(|l| l.strip_prefix("params,"))
        .unwrap()
        .parse()
        .unwrap()
}

#[test]
fn profile_growth_exponents() {
    let dir = tempfile::tempdir().unwrap();
    let full = exponent(dir.path(), "full", &[]);
    assert!((full - 2.0).abs() < 0.1, "{full}");
    let decop = exponent(dir.path(), "decop", &["--decop"]);
    assert!((decop - 1.0).abs() < 0.1, "{decop}");
    let err = fail(&["profile", "--values", "100,2000", "--out", s(&dir.path().join("x"))]);
    assert!(err.contains("cap"), "{err}");
}

#[test]
fn sweeps() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "data", &["--n-points", "1200"]);
    let cfg = tiny_config(dir.path(), &data, "");
    let out = dir.path().join("sweep");
    ok(&["sweep", "--config", s(&cfg), "--axis", "patch_len", "--values", "8,16", "--out", s(&out)]);
    let text = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.starts_with("patch_len,mse,mae\n8,"));

    let err = fail(&["sweep", "--config", s(&cfg), "--axis", "k", "--values", "4", "--out", s(&out)]);
    assert!(err.contains("compressed attention"), "{err}");

    // a single-value sweep reproduces plain training
    let single = dir.path().join("single");
    ok(&["sweep", "--config", s(&cfg), "--axis", "patch_len", "--values", "16", "--out", s(&single)]);
    let row = std::fs::read_to_string(single.join("sweep.csv")).unwrap();
    let mse: f64 = row.lines().nth(1).unwrap().split(',').nth(1).unwrap().parse().unwrap();
    let trained = ok(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("t"))]);
    let train_mse: f64 = trained
        .lines()
        .find_map(|l| l.strip_prefix("mse="))
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(mse, train_mse);
}

#[test]
fn seed_sweep_rows_and_identity() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "data", &["--n-points", "1200"]);
    let cfg = tiny_config(dir.path(), &data, "");
    let out = dir.path().join("seeds");
    let err = fail(&["seed-sweep", "--config", s(&cfg), "--seeds", "2021", "--out", s(&out)]);
    assert!(err.contains("at least 2"), "{err}");
    ok(&["seed-sweep", "--config", s(&cfg), "--seeds", "2021,2022,2023,2024,2025", "--out", s(&out)]);
    let text = std::fs::read_to_string(out.join("seed_sweep.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1 + 5 + 4);
    let get = |k: &str| -> f64 {
        lines
            .iter()
            .find_map(|l| l.strip_prefix(&format!("{k},")))
            .unwrap()
            .parse()
            .unwrap()
    };
    let (mean, std, cv, conf) = (get("mean"), get("std"), get("cv"), get("confidence"));
    assert!((cv - 100.0 * std / mean.abs()).abs() < 1e-12);
    assert!((conf - (100.0 - cv)).abs() < 1e-12);
}
