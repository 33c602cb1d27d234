use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lapyr::imageio::{load_image, save_image, BitDepth};
use lapyr::models::{save_checkpoint, ModelBundle, ModelConfig, Ordering};
use lapyr::numerics::Tensor;
use lapyr::testing::random;

fn lapyr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lapyr"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn identity_checkpoint(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("identity.lpyr");
    let b = ModelBundle::identity(&ModelConfig::default(), Ordering::Tfdl).unwrap();
    save_checkpoint(&b, &p).unwrap();
    p
}

#[test]
fn enhance_with_identity_checkpoint_keeps_flat_gray() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = identity_checkpoint(dir.path());
    let input = dir.path().join("gray.png");
    let gray = Tensor::full(&[150, 260, 3], 128.0 / 255.0);
    save_image(&gray, &input, BitDepth::Eight).unwrap();
    for order in ["tfdl", "dftl"] {
        let output = dir.path().join(format!("out_{order}.png"));
        let out = lapyr(&[
            "enhance", "--input", path(&input), "--checkpoint", path(&ckpt), "--order", order, "--output", path(&output),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let back = load_image(&output).unwrap();
        assert_eq!(back.shape(), gray.shape());
        assert!(back.max_abs_diff(&gray).unwrap() <= 1.0 / 255.0 + 1e-6, "{order}");
    }
}

fn train_args<'a>(out: &'a str, csv: &'a str) -> Vec<&'a str> {
    vec![
        "train", "--synthetic", "4", "--seed", "1", "--epochs", "1", "--batch", "2", "--out", out, "--loss-csv", csv,
    ]
}

#[test]
fn synthetic_training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.lpyr"), dir.path().join("b.lpyr"));
    let (ca, cb) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    for (ckpt, csv) in [(&a, &ca), (&b, &cb)] {
        let out = lapyr(&train_args(path(ckpt), path(csv)));
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let history = fs::read_to_string(&ca).unwrap();
    assert_eq!(history, fs::read_to_string(&cb).unwrap());
    let lines: Vec<&str> = history.lines().collect();
    assert_eq!(lines[0], "phase,epoch,loss");
    assert_eq!(lines.len(), 4);
}

#[test]
fn eval_of_identical_pairs_is_degenerate() {
    let dir = tempfile::tempdir().unwrap();
    let mut manifest = String::new();
    for i in 0..3 {
        let p = dir.path().join(format!("img{i}.png"));
        save_image(&random(&[40, 48, 3], 0.0, 1.0, i), &p, BitDepth::Sixteen).unwrap();
        manifest.push_str(&format!("img{i}.png\timg{i}.png\n"));
    }
    let pairs = dir.path().join("pairs.tsv");
    fs::write(&pairs, manifest).unwrap();
    let report = dir.path().join("report.csv");
    let out = lapyr(&["eval", "--pairs", path(&pairs), "--report", path(&report), "--lpips"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("LPIPS"));
    let text = fs::read_to_string(&report).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "name,psnr,ssim,tmqi_q,tmqi_s,tmqi_n");
    assert_eq!(lines.len(), 4);
    for (i, row) in lines[1..].iter().enumerate() {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols[0], format!("img{i}"));
        assert_eq!(cols[1], "100.000000");
        assert_eq!(cols[2], "1.000000");
    }
}

#[test]
fn decompose_and_stats_write_their_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.png");
    save_image(&random(&[64, 96, 3], 0.0, 1.0, 5), &input, BitDepth::Eight).unwrap();
    let outdir = dir.path().join("levels");
    let out = lapyr(&["decompose", "--input", path(&input), "--outdir", path(&outdir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let shapes: Vec<Vec<usize>> = ["level0", "level1", "level2", "base"]
        .iter()
        .map(|n| load_image(outdir.join(format!("{n}.png"))).unwrap().shape().to_vec())
        .collect();
    assert_eq!(shapes, [vec![64, 96, 3], vec![32, 48, 3], vec![16, 24, 3], vec![8, 12, 3]]);

    let ckpt = identity_checkpoint(dir.path());
    let out = lapyr(&["stats", "--checkpoint", path(&ckpt)]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("total params:"), "{text}");
    assert!(text.contains("denoiser 2:"), "{text}");
}

#[test]
fn compare_reports_both_orderings() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("orderings.csv");
    let outdir = dir.path().join("runs");
    let out = lapyr(&[
        "compare", "--synthetic", "2", "--held-out", "1", "--seed", "3", "--epochs", "1", "--report", path(&report),
        "--outdir", path(&outdir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&report).unwrap();
    let names: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["gamma", "tfdl_untrained", "dftl_untrained", "tfdl", "dftl"]);
    assert!(outdir.join("tfdl.lpyr").exists() && outdir.join("dftl.lpyr.loss.csv").exists());
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| lapyr(args).status.code().unwrap();

    assert_eq!(code(&["enhance", "--bogus"]), 1);
    assert_eq!(code(&["train", "--synthetic", "2", "--phases", "4", "--out", "x"]), 1);
    assert_eq!(code(&["train", "--synthetic", "2", "--epochs", "1,2", "--out", "x"]), 1);

    let missing = dir.path().join("missing.png");
    let ckpt = identity_checkpoint(dir.path());
    let out = dir.path().join("o.png");
    assert_eq!(
        code(&["enhance", "--input", path(&missing), "--checkpoint", path(&ckpt), "--output", path(&out)]),
        2
    );

    let bad = dir.path().join("bad.lpyr");
    fs::write(&bad, b"not a checkpoint").unwrap();
    let r = lapyr(&["stats", "--checkpoint", path(&bad)]);
    assert_eq!(r.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&r.stderr).contains("magic"));

    assert_eq!(code(&["--help"]), 0);
}
