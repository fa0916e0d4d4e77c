mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use ocunet::cli::{resolve_train_config, TrainArgs};
use ocunet::data::{load_manifest, quantize, read_gray, read_rgb, MaskEncoding, SampleManifest};
use ocunet::metrics::labels_from_probs;
use ocunet::predict::predict_image;
use ocunet::train::load_checkpoint;

fn ocunet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ocunet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, n: usize, size: usize, classes: usize, seed: u64) -> PathBuf {
    let o = ocunet(&[
        "synth-data",
        "--out",
        s(dir),
        "-n",
        &n.to_string(),
        "--patch-size",
        &size.to_string(),
        "--classes",
        &classes.to_string(),
        "--seed",
        &seed.to_string(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    dir.join("manifest.toml")
}

fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

const SMALL_RUN: &str = "\
[model]
base_channels = 4

[train.augment]
hflip = 0.0
vflip = 0.0
blur = 0.0
sharpen = 0.0
";

/// Small fast configuration that can memorize a handful of images.
const OVERFIT_RUN: &str = "\
[model]
base_channels = 8

[model.blocks.batch_norm]
momentum = 0.9

[train]
val_fraction = 0.0

[train.augment]
hflip = 0.0
vflip = 0.0
blur = 0.0
sharpen = 0.0

[train.plateau]
enabled = false

[train.early_stop]
enabled = false
";

fn train_small(root: &Path, manifest: &Path, epochs: usize) -> (PathBuf, Output) {
    let cfg = root.join("small.toml");
    fs::write(&cfg, SMALL_RUN).unwrap();
    let out = root.join("run");
    let o = ocunet(&[
        "train",
        "--manifest",
        s(manifest),
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--epochs",
        &epochs.to_string(),
        "--batch-size",
        "4",
        "--seed",
        "2",
    ]);
    (out, o)
}

#[test]
fn synth_data_writes_pairs_and_is_reproducible() {
    let root = tempfile::tempdir().unwrap();
    let a = root.path().join("a");
    let b = root.path().join("b");
    let manifest = synth(&a, 8, 32, 3, 4);
    synth(&b, 8, 32, 3, 4);
    let m = load_manifest(&manifest).unwrap();
    assert_eq!(m.entries.len(), 8);
    assert_eq!(m.encoding, MaskEncoding::Orca3);
    assert_eq!(fs::read_dir(a.join("images")).unwrap().count(), 8);
    assert_eq!(fs::read_dir(a.join("masks")).unwrap().count(), 8);
    assert_eq!(snapshot(&a), snapshot(&b));
}

#[test]
fn missing_manifest_is_reported_by_path() {
    let root = tempfile::tempdir().unwrap();
    let missing = root.path().join("nowhere/manifest.toml");
    let o = ocunet(&["train", "--manifest", s(&missing), "--epochs", "1"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("nowhere/manifest.toml") && err.contains("not found"), "{err}");
}

#[test]
fn bad_flags_and_configs_fail_cleanly() {
    let root = tempfile::tempdir().unwrap();
    let manifest = synth(root.path(), 2, 16, 3, 0);
    // --alpha only applies to a single-channel head.
    let o = ocunet(&["train", "--manifest", s(&manifest), "--alpha", "0.3", "--epochs", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--alpha"), "{}", stderr(&o));
    let cfg = root.path().join("bad.toml");
    fs::write(&cfg, "[optimizer]\nlr = 1\n").unwrap();
    let o = ocunet(&["train", "--manifest", s(&manifest), "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("unknown section `optimizer`"), "{}", stderr(&o));
    let o = ocunet(&["train", "--manifest", s(&manifest), "--classes", "1"]);
    assert!(stderr(&o).contains("class-count mismatch"), "{}", stderr(&o));
    // Unknown flag: usage error from the argument parser.
    assert!(!ocunet(&["train", "--learning-rate", "1"]).status.success());
}

#[test]
fn batch_size_follows_patch_size_unless_given() {
    let args = |batch: Option<usize>| TrainArgs {
        manifest: PathBuf::from("m.toml"),
        config: None,
        checkpoint: None,
        out: PathBuf::from("out"),
        seed: None,
        epochs: None,
        batch_size: batch,
        lr: None,
        alpha: None,
        classes: None,
        patch_size: None,
        base_channels: None,
    };
    let large = SampleManifest::new(MaskEncoding::Binary, [640, 640], ".");
    let small = SampleManifest::new(MaskEncoding::Orca3, [512, 512], ".");
    let cfg = resolve_train_config(&args(None), &large).unwrap();
    assert_eq!(cfg.train.batch_size, Some(4));
    assert_eq!(cfg.model.input_size, [640, 640]);
    assert_eq!(cfg.model.num_classes, 1);
    assert_eq!(cfg.train.adam.lr, 3e-4);
    assert_eq!(resolve_train_config(&args(None), &small).unwrap().train.batch_size, Some(8));
    assert_eq!(resolve_train_config(&args(Some(2)), &large).unwrap().train.batch_size, Some(2));
}

#[test]
fn train_eval_predict_round_trip() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    let o = ocunet(&[
        "synth-data", "--out", s(&data), "-n", "6", "--patch-size", "32", "--classes", "3",
        "--test-fraction", "0.34",
    ]);
    assert!(o.status.success());
    let manifest = data.join("manifest.toml");
    let before = snapshot(&data);

    let (run, o) = train_small(root.path(), &manifest, 3);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("# effective configuration"), "{text}");
    assert!(text.contains("batch_size = 4") && text.contains("lr = 0.0003"), "{text}");
    assert!(text.contains("final val dice"), "{text}");
    for f in ["best.ocun", "last.ocun", "epochs.csv", "config.toml", "val_metrics.txt", "val_metrics.json"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let log = fs::read_to_string(run.join("epochs.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("epoch,train_loss,val_dice,val_miou,lr"));
    assert_eq!(log.lines().count(), 4);

    // Same seed, same everything.
    let (run2, _) = {
        let other = root.path().join("again");
        fs::create_dir_all(&other).unwrap();
        train_small(&other, &manifest, 3)
    };
    assert_eq!(log, fs::read_to_string(run2.join("epochs.csv")).unwrap());
    assert_eq!(fs::read(run.join("last.ocun")).unwrap(), fs::read(run2.join("last.ocun")).unwrap());

    // Eval: one row per class plus the macro row, files written.
    let ckpt = run.join("best.ocun");
    let report_dir = root.path().join("report");
    let o = ocunet(&[
        "eval", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--out", s(&report_dir),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(report_dir.join("metrics.txt")).unwrap();
    let rows = table.lines().skip(1).filter(|l| !l.starts_with('#')).count();
    assert_eq!(rows, 3 + 1, "{table}");
    assert!(table.contains("carcinoma"));
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(report_dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(json["per_class"].as_array().unwrap().len(), 3);
    let again = ocunet(&[
        "eval", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--out", s(&report_dir),
    ]);
    assert_eq!(stdout(&o), stdout(&again));
    let o = ocunet(&["eval", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--classes", "2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("class-count mismatch"));

    // A binary manifest cannot be scored by a three-class checkpoint.
    let binary = synth(&root.path().join("binary"), 2, 32, 1, 9);
    let o = ocunet(&["eval", "--checkpoint", s(&ckpt), "--manifest", s(&binary), "--split", "all"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("class-count mismatch"), "{}", stderr(&o));

    // Predict: one odd-sized external image, one missing path.
    let img_path = root.path().join("odd.png");
    let src = read_rgb(&data.join("images/0000.png")).unwrap();
    image::imageops::resize(&src, 45, 29, image::imageops::FilterType::Triangle)
        .save(&img_path)
        .unwrap();
    let preds = root.path().join("preds");
    let missing = root.path().join("missing.png");
    let o = ocunet(&[
        "predict", "--checkpoint", s(&ckpt), "--out", s(&preds), s(&img_path), s(&missing),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("skipping") && stderr(&o).contains("missing.png"));

    let (model, _) = load_checkpoint(&ckpt).unwrap().restore::<f32>(None).unwrap();
    let img = read_rgb(&img_path).unwrap();
    let pred = predict_image(&model, &img).unwrap();
    let mask = read_gray(&preds.join("odd_mask.png")).unwrap();
    assert_eq!(mask.dimensions(), (45, 29));
    let argmax = labels_from_probs(&pred.probs);
    let decoded: Vec<usize> = mask
        .as_raw()
        .iter()
        .map(|&v| MaskEncoding::Orca3.decode(v).unwrap() as usize)
        .collect();
    assert_eq!(decoded, argmax);
    for (k, name) in ["non-tissue", "non-carcinoma", "carcinoma"].iter().enumerate() {
        let heat = read_gray(&preds.join(format!("odd_prob_{name}.png"))).unwrap();
        let want: Vec<u8> = pred.plane(k).into_iter().map(quantize).collect();
        assert_eq!(heat.as_raw(), &want, "heatmap {name}");
    }
    let overlay = read_rgb(&preds.join("odd_overlay.png")).unwrap();
    assert_eq!(overlay.dimensions(), img.dimensions());

    // Nothing readable: failure.
    let o = ocunet(&["predict", "--checkpoint", s(&ckpt), "--out", s(&preds), s(&missing)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("none of the 1 input images"));

    // Manifest-driven prediction covers every entry of the split.
    let o = ocunet(&[
        "predict", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--split", "test",
        "--out", s(&preds),
    ]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), 2);

    assert_eq!(snapshot(&data), before, "inputs were modified");
}

#[test]
fn warm_start_requires_matching_architecture() {
    let root = tempfile::tempdir().unwrap();
    let manifest = synth(&root.path().join("d"), 4, 32, 3, 1);
    let (run, o) = train_small(root.path(), &manifest, 1);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = ocunet(&[
        "train", "--manifest", s(&manifest), "--checkpoint", s(&run.join("last.ocun")),
        "--base-channels", "2", "--epochs", "1", "--out", s(&root.path().join("warm")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("architecture mismatch"), "{}", stderr(&o));
}

#[test]
fn gradcheck_command_passes_and_catches_faults() {
    let o = ocunet(&["gradcheck"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let text = stdout(&o);
    let units = text.lines().filter(|l| l.contains("PASS") || l.contains("FAIL")).count();
    assert!(units >= 10, "{text}");
    assert!(text.contains("units passed"));

    let o = ocunet(&["gradcheck", "--inject-fault", "conv2d"]);
    assert_eq!(o.status.code(), Some(1));
    let text = stdout(&o);
    let summary = text.lines().last().unwrap();
    assert!(summary.contains("failed:") && summary.contains("conv"), "{summary}");
}

#[test]
fn overfits_a_tiny_dataset() {
    let root = tempfile::tempdir().unwrap();
    let manifest = synth(&root.path().join("d"), 8, 32, 1, 1);
    let cfg = root.path().join("overfit.toml");
    fs::write(&cfg, OVERFIT_RUN).unwrap();
    let run = root.path().join("run");
    let started = Instant::now();
    let o = ocunet(&[
        "train", "--manifest", s(&manifest), "--config", s(&cfg), "--out", s(&run),
        "--epochs", "120", "--lr", "3e-3", "--seed", "1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = ocunet(&[
        "eval", "--checkpoint", s(&run.join("last.ocun")), "--manifest", s(&manifest),
        "--split", "train", "--out", s(&run),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    let dice = json["per_class"][1]["dice"].as_f64().unwrap();
    eprintln!("train-split dice {dice:.4} after {:.1?}", started.elapsed());
    assert!(dice >= 0.95, "{}", stdout(&o));
}
