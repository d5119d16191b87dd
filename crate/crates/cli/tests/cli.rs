use std::fs;
use std::path::Path;

use stic_cli::run;
use stic_core::data::checkpoint::save_checkpoint;
use stic_core::{Architecture, ClassifierModel, Tensor};

const TOY: &str = "\
profile = desk
data.kind = gaussians
data.spread = 0.5
model.hidden = 16
train.passes = 2
train.iterations = 60
";

fn stic(args: &[&str]) -> i32 {
    run(std::iter::once("stic").chain(args.iter().copied()))
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("toy.cfg");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn manifest_files(dir: &Path) -> Vec<String> {
    fs::read_to_string(dir.join("manifest.txt"))
        .unwrap()
        .lines()
        .filter_map(|l| l.strip_prefix("file = ").map(str::to_string))
        .collect()
}

#[test]
fn train_is_deterministic_and_manifested() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TOY);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for out in [&a, &b] {
        assert_eq!(
            stic(&[
                "train",
                "--config",
                &cfg,
                "--seed",
                "7",
                "--out",
                out.to_str().unwrap()
            ]),
            0
        );
    }
    let ma = fs::read(a.join("metrics.csv")).unwrap();
    assert_eq!(ma, fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(
        fs::read(a.join("p2.stic")).unwrap(),
        fs::read(b.join("p2.stic")).unwrap()
    );
    assert_eq!(
        fs::read(a.join("manifest.txt")).unwrap(),
        fs::read(b.join("manifest.txt")).unwrap()
    );

    let files = manifest_files(&a);
    for f in ["p1.stic", "p2.stic", "metrics.csv", "loss.csv", "proxy.csv"] {
        assert!(files.iter().any(|x| x == f), "{f} missing from manifest");
        assert!(a.join(f).exists());
    }
    let manifest = fs::read_to_string(a.join("manifest.txt")).unwrap();
    assert!(manifest.contains("config.train.passes = 2"));
    assert!(manifest.contains("seed = 7"));
}

#[test]
fn overrides_are_applied_and_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TOY);
    let out = tmp.path().join("o");
    let code = stic(&[
        "train",
        "--set",
        "train.passes=3",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--set",
        "train.passes=1",
    ]);
    assert_eq!(code, 0);
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("override = train.passes=3\noverride = train.passes=1"));
    assert!(manifest.contains("config.train.passes = 1"));
    assert!(out.join("p1.stic").exists());
    assert!(!out.join("p2.stic").exists());
}

#[test]
fn usage_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    let out = out.to_str().unwrap();
    let cfg = write_config(tmp.path(), TOY);
    assert_eq!(stic(&["train", "--out", out]), 1);
    assert_eq!(stic(&["frobnicate"]), 1);
    assert_eq!(
        stic(&[
            "train",
            "--config",
            &cfg,
            "--set",
            "no.such.key=1",
            "--out",
            out
        ]),
        1
    );
    assert_eq!(
        stic(&[
            "train",
            "--config",
            &cfg,
            "--set",
            "train.restart_prob=2",
            "--out",
            out
        ]),
        1
    );
    let bad = write_config(tmp.path(), "train.lr = 0.1\nsampler.epsl = 1\n");
    assert_eq!(stic(&["train", "--config", &bad, "--out", out]), 1);
    assert_eq!(stic(&["eval", "--ckpt", "missing.stic", "--out", out]), 1);
}

#[test]
fn runtime_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    assert_eq!(
        stic(&[
            "sample",
            "--ckpt",
            "does/not/exist.stic",
            "--class",
            "0",
            "--out",
            out.to_str().unwrap()
        ]),
        2
    );

    let ckpt = tmp.path().join("m3.stic");
    let model = ClassifierModel::new(Architecture::mlp(3, &[4], 2), 0).unwrap();
    save_checkpoint(&ckpt, &model, 1, 0).unwrap();
    assert_eq!(
        stic(&[
            "boundary-viz",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--out",
            out.to_str().unwrap()
        ]),
        2
    );
}

#[test]
fn sample_writes_requested_count_and_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let train_cfg = "\
profile = desk
data.kind = shapes
data.per_class = 6
data.side = 8
model.kind = cnn
train.passes = 1
train.iterations = 20
train.batch_fake = 4
train.batch_fake_mixup = 4
sampler.steps = 3
";
    let cfg = write_config(tmp.path(), train_cfg);
    let run_dir = tmp.path().join("run");
    assert_eq!(
        stic(&[
            "train",
            "--config",
            &cfg,
            "--out",
            run_dir.to_str().unwrap()
        ]),
        0
    );
    let ckpt = run_dir.join("p1.stic");
    let out = tmp.path().join("s");
    let code = stic(&[
        "sample",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--class",
        "0",
        "--n",
        "16",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let files = manifest_files(&out);
    assert_eq!(
        files.iter().filter(|f| f.starts_with("sample_")).count(),
        16
    );
    assert_eq!(files.iter().filter(|f| f.starts_with("grid.")).count(), 1);
    let grid = fs::read(out.join("grid.pgm")).unwrap();
    // 4x4 tiles of 8x8 with one-pixel gutters.
    assert!(grid.starts_with(b"P5\n35 35\n255\n"));

    assert_eq!(
        stic(&[
            "sample",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--class",
            "3",
            "--out",
            out.to_str().unwrap()
        ]),
        1
    );
}

#[test]
fn boundary_viz_on_linear_model() {
    let tmp = tempfile::tempdir().unwrap();
    let arch = Architecture::mlp(2, &[], 2);
    let mut m = ClassifierModel::zeroed(arch).unwrap();
    // Class 0 wins where x > y, class 1 elsewhere, fake never.
    m.params_mut()[0] = Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
    m.params_mut()[1] = Tensor::vector(vec![0.0, 0.0, -50.0]);
    let ckpt = tmp.path().join("lin.stic");
    save_checkpoint(&ckpt, &m, 1, 0).unwrap();
    let out = tmp.path().join("viz");
    let code = stic(&[
        "boundary-viz",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--grid",
        "32",
        "--bounds",
        "-1,1,-1,1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let ppm = fs::read(out.join("boundary.ppm")).unwrap();
    let header = b"P6\n32 32\n255\n";
    assert!(ppm.starts_with(header));
    assert_eq!(ppm.len(), header.len() + 32 * 32 * 3);
    let csv = fs::read_to_string(out.join("boundary.csv")).unwrap();
    let rows: Vec<Vec<usize>> = csv
        .lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 32);
    // Row 0 is the top; cell (r, c) has x above y iff c + r > 31.
    for (r, row) in rows.iter().enumerate() {
        for (c, &class) in row.iter().enumerate() {
            if r + c != 31 {
                assert_eq!(class, if r + c > 31 { 0 } else { 1 }, "cell ({r}, {c})");
            }
        }
    }
}

#[test]
fn eval_and_interpolate_on_toy_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        &format!("{TOY}eval.samples_per_class = 8\neval.cls_epochs = 5\n"),
    );
    let run_dir = tmp.path().join("run");
    assert_eq!(
        stic(&[
            "train",
            "--config",
            &cfg,
            "--out",
            run_dir.to_str().unwrap()
        ]),
        0
    );
    let ckpt = run_dir.join("p2.stic");
    let ev = tmp.path().join("eval");
    assert_eq!(
        stic(&[
            "eval",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--config",
            &cfg,
            "--out",
            ev.to_str().unwrap()
        ]),
        0
    );
    let csv = fs::read_to_string(ev.join("eval.csv")).unwrap();
    for key in [
        "train_acc",
        "boundary_proxy",
        "cls_r",
        "cls_g",
        "frechet",
        "precision",
        "recall",
    ] {
        let line = csv
            .lines()
            .find(|l| l.starts_with(&format!("{key},")))
            .unwrap();
        let v: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!(v.is_finite(), "{key} = {v}");
    }
    let ip = tmp.path().join("interp");
    let code = stic(&[
        "interpolate",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--from",
        "0",
        "--to",
        "2",
        "--points",
        "5",
        "--out",
        ip.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let lines = fs::read_to_string(ip.join("interpolation.csv")).unwrap();
    assert_eq!(lines.lines().count(), 6);
}
