use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use tightbox_core::dataset::{load_labels, save_labels, LabeledInstance, SampleConfig};
use tightbox_core::evaluation::EvalConfig;
use tightbox_core::geometry::{perturb, BBox, EdgeErrorModel};
use tightbox_core::model::save_truth_echo_checkpoint;
use tightbox_core::training::TrainConfig;

fn tightbox(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tightbox")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = tightbox(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn synth(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let out = dir.join(format!("synth_{seed}"));
    ok(&["synth", "--n", &n.to_string(), "--seed", &seed.to_string(), "--width", "96", "--height", "80", "--out", p(&out)]);
    out
}

fn files_under(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().unwrap() != "manifest.json" {
                out.push((path.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_byte_identical_for_a_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let fa = files_under(&synth(a.path(), 6, 3));
    let fb = files_under(&synth(b.path(), 6, 3));
    assert_eq!(fa.len(), 7);
    assert_eq!(fa, fb);
    let fc = files_under(&synth(b.path(), 6, 4));
    assert_ne!(fa, fc);
}

#[test]
fn every_command_writes_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let s = synth(dir.path(), 8, 1);
    let m = read_json(&s.join("manifest.json"));
    assert_eq!(m["command"], "synth");
    assert_eq!(m["seed"], 1);
    assert_eq!(m["config"]["n"], 8);
    assert_eq!(m["artifact_hashes"]["labels"].as_str().unwrap().len(), 64);

    let t = dir.path().join("train");
    let config = dir.path().join("train.json");
    std::fs::write(&config, r#"{"epochs": 3, "batch_size": 2, "sample": {"patch_size": 32}}"#).unwrap();
    let stdout = ok(&[
        "train", "--labels", p(&s.join("labels.jsonl")), "--images", p(&s.join("images")), "--out", p(&t),
        "--config", p(&config), "--epochs", "2", "--validation-fraction", "0.25",
    ]);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("epoch")).count(), 2);
    let m = read_json(&t.join("manifest.json"));
    assert_eq!(m["command"], "train");
    assert_eq!(m["config"]["epochs"], 2, "flag beats file");
    assert_eq!(m["config"]["batch_size"], 2, "file beats default");
    assert_eq!(m["config"]["learning_rate"], 1e-4);
    assert_eq!(m["config"]["sample"]["patch_size"], 32);
    assert_eq!(m["config"]["sample"]["expand_ratio"], 0.15);
    for f in ["checkpoint.json", "checkpoint.bin", "history.json", "config.json"] {
        assert!(t.join(f).is_file(), "{f}");
    }

    let ft = dir.path().join("finetune");
    ok(&[
        "finetune", "--checkpoint", p(&t), "--labels", p(&s.join("labels.jsonl")), "--images", p(&s.join("images")),
        "--out", p(&ft), "--epochs", "1", "--batch-size", "4",
    ]);
    let m = read_json(&ft.join("manifest.json"));
    assert_eq!(m["config"]["sample"]["patch_size"], 32, "inherited from the checkpoint");

    let e = dir.path().join("eval");
    ok(&["eval", "--checkpoint", p(&ft), "--labels", p(&s.join("labels.jsonl")), "--images", p(&s.join("images")), "--out", p(&e)]);
    assert!(e.join("report.txt").is_file());
    assert_eq!(read_json(&e.join("manifest.json"))["command"], "eval");
}

#[test]
fn eval_with_truth_echo_reaches_zero_error() {
    let dir = tempfile::tempdir().unwrap();
    let s = synth(dir.path(), 12, 5);
    let ck = dir.path().join("echo");
    save_truth_echo_checkpoint(&ck, &SampleConfig { patch_size: 64, ..SampleConfig::default() }).unwrap();
    let e = dir.path().join("eval");
    let stdout = ok(&[
        "eval", "--checkpoint", p(&ck), "--labels", p(&s.join("labels.jsonl")), "--images", p(&s.join("images")),
        "--out", p(&e), "--seed", "7", "--tolerances", "1,2.5",
    ]);
    assert!(stdout.contains("MAE/LE"));
    let r = read_json(&e.join("report.json"));
    assert_eq!(r["n_boxes"], 12);
    assert!(r["mae_le"]["before"].as_f64().unwrap() > 1.0);
    assert!(r["mae_le"]["after"].as_f64().unwrap() < 1e-9);
    assert_eq!(r["seed"], 7);
    assert_eq!(r["tolerance"].as_object().unwrap().len(), 2);

    let refined = dir.path().join("refined");
    ok(&["refine", "--checkpoint", p(&ck), "--labels", p(&s.join("labels.jsonl")), "--images", p(&s.join("images")), "--out", p(&refined), "--truth", p(&s.join("labels.jsonl"))]);
    let labels = load_labels(&refined.join("labels.jsonl")).unwrap();
    let truth = load_labels(&s.join("labels.jsonl")).unwrap();
    for (r, t) in labels.iter().zip(&truth) {
        let (a, b) = (r.prelabel_box.unwrap().to_array(), t.true_box.unwrap().to_array());
        assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-6));
    }
}

#[test]
fn stats_recovers_sigmas() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let model = EdgeErrorModel::default();
    let mut gt = Vec::new();
    let mut pre = Vec::new();
    for i in 0..6000 {
        let id = format!("img_{:03}.png", i / 6);
        let x = (i % 6) as f64 * 300.0;
        let truth = BBox::new(x + 10.0, 20.0, x + 110.0, 260.0).unwrap();
        gt.push(LabeledInstance::ground_truth(id.clone(), "person", truth));
        pre.push(LabeledInstance::ground_truth(id, "person", perturb(&truth, &model, &mut rng)));
    }
    let (g, pr) = (dir.path().join("gt.jsonl"), dir.path().join("pre.jsonl"));
    save_labels(&g, &gt).unwrap();
    save_labels(&pr, &pre).unwrap();
    let out = dir.path().join("stats");
    ok(&["stats", "--gt", p(&g), "--pre", p(&pr), "--out", p(&out), "--iou", "0.2"]);
    let v = read_json(&out.join("error_model.json"));
    assert_eq!(v["n_pairs"], 6000);
    let sv = v["error_model"]["sigma_vertical"].as_f64().unwrap();
    let sh = v["error_model"]["sigma_horizontal"].as_f64().unwrap();
    assert!((sv / 0.08 - 1.0).abs() < 0.05, "{sv}");
    assert!((sh / 0.14 - 1.0).abs() < 0.05, "{sh}");
    assert_eq!(load_labels(&out.join("matched.jsonl")).unwrap().len(), 6000);
}

#[test]
fn track_interp_marks_keyframes_and_refines_with_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let q = dir.path().join("seq");
    ok(&["synth", "--frames", "16", "--key-interval", "5", "--width", "128", "--height", "112", "--out", p(&q)]);
    let plain = dir.path().join("plain");
    ok(&["track-interp", "--track", p(&q.join("track.json")), "--images", p(&q.join("images")), "--out", p(&plain)]);
    let rows: Vec<Value> = std::fs::read_to_string(plain.join("track_labels.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 16);
    for r in &rows {
        let f = r["frame"].as_u64().unwrap();
        let expected = if f % 5 == 0 { "human" } else { "tracker" };
        assert_eq!(r["source"], expected);
        assert_eq!(r["image"], format!("frame_{f:04}.png"));
    }

    let ck = dir.path().join("echo");
    save_truth_echo_checkpoint(&ck, &SampleConfig { patch_size: 64, ..SampleConfig::default() }).unwrap();
    let refined = dir.path().join("refined");
    ok(&[
        "track-interp", "--track", p(&q.join("track.json")), "--images", p(&q.join("images")), "--out", p(&refined),
        "--checkpoint", p(&ck), "--truth", p(&q.join("truth.jsonl")),
    ]);
    let truth = load_labels(&q.join("truth.jsonl")).unwrap();
    for line in std::fs::read_to_string(refined.join("track_labels.jsonl")).unwrap().lines() {
        let r: Value = serde_json::from_str(line).unwrap();
        let f = r["frame"].as_u64().unwrap() as usize;
        let b: BBox = serde_json::from_value(r["box"].clone()).unwrap();
        let t = truth[f].true_box.unwrap();
        if f.is_multiple_of(5) {
            assert_eq!(b, t);
        } else {
            assert_eq!(r["source"], "model");
            assert!(b.to_array().iter().zip(t.to_array()).all(|(x, y)| (x - y).abs() < 1e-6));
        }
    }
}

#[test]
fn help_lists_module_defaults() {
    let train = ok(&["train", "--help"]);
    let t = TrainConfig::default();
    for expected in [
        format!("[default: {}]", t.epochs),
        format!("[default: {}]", t.batch_size),
        format!("[default: {}]", t.learning_rate),
        format!("[default: {}]", t.seed),
        format!("[default: {}]", t.data_fraction),
        format!("[default: {}]", t.error_scale),
        format!("[default: {}]", t.validation_fraction),
        format!("[default: {}]", t.backbone),
        format!("[default: {}]", t.optimizer),
        format!("[default: {}]", t.sample.patch_size),
        format!("[default: {}]", t.sample.expand_ratio),
        format!("[default: {}]", t.loss.huber_delta),
        format!("[default: {}]", t.horizontal_flip),
        format!("sigma {} / {}", t.sample.error_model.sigma_vertical, t.sample.error_model.sigma_horizontal),
    ] {
        assert!(train.contains(&expected), "missing {expected}");
    }
    let eval = ok(&["eval", "--help"]);
    let e = EvalConfig::default();
    let tol: Vec<String> = e.tolerances.iter().map(f64::to_string).collect();
    for expected in [
        format!("[default: {}]", tol.join(",")),
        format!("[default: {}]", e.seed),
        format!("[default: {}]", e.scenario.as_str()),
        "[default: per_box]".to_string(),
    ] {
        assert!(eval.contains(&expected), "missing {expected}");
    }
    assert!(ok(&["serve", "--help"]).contains("[default: 8321]"));
    assert!(ok(&["extract", "--help"]).contains("[default: 50]"));
    assert!(ok(&["stats", "--help"]).contains("[default: 0.5]"));
    for cmd in ["synth", "extract", "stats", "train", "finetune", "eval", "refine", "track-interp", "serve"] {
        assert!(ok(&["--help"]).contains(cmd));
    }
}

#[test]
fn exit_codes_and_error_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = tightbox(&["train", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(1), "missing required flag");

    let s = synth(dir.path(), 4, 2);
    let bad = dir.path().join("bad");
    let out = tightbox(&[
        "train", "--labels", p(&s.join("labels.jsonl")), "--images", p(&s.join("images")), "--out", p(&bad),
        "--learning-rate=-1",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = read_json(&bad.join("error.json"));
    assert_eq!(err["kind"], "validation");
    assert_eq!(err["exit_code"], 1);

    let cfg = dir.path().join("typo.json");
    std::fs::write(&cfg, r#"{"epoch": 3}"#).unwrap();
    let out = tightbox(&[
        "train", "--labels", p(&s.join("labels.jsonl")), "--images", p(&s.join("images")), "--out", p(&bad), "--config", p(&cfg),
    ]);
    assert_eq!(out.status.code(), Some(1), "unknown config field");

    let ck = dir.path().join("ck");
    std::fs::create_dir_all(&ck).unwrap();
    std::fs::write(ck.join("checkpoint.json"), "{not json").unwrap();
    let out = tightbox(&[
        "eval", "--checkpoint", p(&ck), "--labels", p(&s.join("labels.jsonl")), "--images", p(&s.join("images")), "--out", p(&bad),
    ]);
    assert_eq!(out.status.code(), Some(1));

    std::fs::remove_file(s.join("images/synth_00001.png")).unwrap();
    std::fs::write(s.join("images/synth_00001.png"), b"not a png").unwrap();
    let rt = dir.path().join("runtime");
    let out = tightbox(&["train", "--labels", p(&s.join("labels.jsonl")), "--images", p(&s.join("images")), "--out", p(&rt)]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read_json(&rt.join("error.json"))["kind"], "runtime");
}

#[test]
fn extract_reads_cityscapes_style_masks() {
    let dir = tempfile::tempdir().unwrap();
    let (masks, images) = (dir.path().join("masks"), dir.path().join("images"));
    std::fs::create_dir_all(masks.join("aachen")).unwrap();
    std::fs::create_dir_all(images.join("aachen")).unwrap();
    let mut mask = tightbox_core::dataset::InstanceMask::zeros(40, 30);
    for y in 5..15 {
        for x in 3..13 {
            mask.set(x, y, 24001);
        }
    }
    for y in 20..28 {
        for x in 20..38 {
            mask.set(x, y, 26000);
        }
    }
    mask.set(0, 0, 24002);
    mask.save_png(&masks.join("aachen/a_000001_gtFine_instanceIds.png")).unwrap();
    image::RgbImage::new(40, 30).save(images.join("aachen/a_000001_leftImg8bit.png")).unwrap();

    let out = dir.path().join("all");
    ok(&["extract", "--masks", p(&masks), "--images", p(&images), "--out", p(&out), "--min-pixels", "5"]);
    let labels = load_labels(&out.join("labels.jsonl")).unwrap();
    assert_eq!(labels.len(), 2);
    assert_eq!(labels[0].image_id, "aachen/a_000001_leftImg8bit.png");
    let person = labels.iter().find(|l| l.class_tag == "person").unwrap();
    assert_eq!(person.true_box, Some(BBox::new(3.0, 5.0, 13.0, 15.0).unwrap()));

    let only = dir.path().join("person");
    ok(&["extract", "--masks", p(&masks), "--images", p(&images), "--out", p(&only), "--min-pixels", "5", "--class", "person"]);
    assert_eq!(load_labels(&only.join("labels.jsonl")).unwrap().len(), 1);
}

#[test]
fn rerunning_the_manifest_config_reproduces_training() {
    let dir = tempfile::tempdir().unwrap();
    let s = synth(dir.path(), 6, 9);
    let run = |name: &str, config: Option<&Path>| {
        let out = dir.path().join(name);
        let (labels, images) = (s.join("labels.jsonl"), s.join("images"));
        let mut args = vec!["train", "--labels", p(&labels), "--images", p(&images), "--out", p(&out)];
        match config {
            Some(c) => args.extend(["--config", p(c)]),
            None => args.extend(["--epochs", "2", "--batch-size", "3", "--patch-size", "32", "--seed", "4"]),
        }
        ok(&args);
        read_json(&out.join("manifest.json"))
    };
    let first = run("a", None);
    let config = dir.path().join("resolved.json");
    std::fs::write(&config, first["config"].to_string()).unwrap();
    let second = run("b", Some(&config));
    assert_eq!(first["config"], second["config"]);
    assert_eq!(first["artifact_hashes"]["checkpoint_bin"], second["artifact_hashes"]["checkpoint_bin"]);
}
