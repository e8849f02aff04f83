use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use lungscope::commands::{
    cmd_evaluate, cmd_explain, cmd_synthesize, cmd_train, read_config_echo, write_score_file, GroundTruth, Quadrant,
    RunConfig, SplitCounts, SyntheticSpec, CONFIG_ECHO_FILE, GROUND_TRUTH_FILE, TRAINLOG_FILE,
};
use lungscope::data::{decode_image, scan_dataset, Label};
use lungscope::metrics::ScoredPrediction;

fn tiny_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        image_size: 16,
        sigma: [1.0, 1.5],
        texture_cells: 3,
        counts: SplitCounts { train: 16, val: 8, test: 8 },
        seed,
        ..SyntheticSpec::default()
    }
}

/// Every file under `root` with its bytes.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn synthesized_splits_are_balanced_and_labelled() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec { counts: SplitCounts { train: 100, val: 20, test: 40 }, image_size: 32, ..tiny_spec(1) };
    let truth = cmd_synthesize(&spec, dir.path()).unwrap();
    let m = scan_dataset(dir.path()).unwrap();
    for (split, n) in [("train", 100), ("val", 20), ("test", 40)] {
        let samples = m.split(split).unwrap();
        assert_eq!(samples.len(), n);
        assert_eq!(samples.iter().filter(|s| s.label == Label::Pneumonia).count(), n / 2);
    }
    assert_eq!(truth.blobs.len(), 80);
    assert_eq!(GroundTruth::load(&dir.path().join(GROUND_TRUTH_FILE)).unwrap(), truth);

    // the brightest pixel of every positive sits in the planted quadrant
    for (rel, blob) in &truth.blobs {
        let img = decode_image(&fs::read(dir.path().join(rel)).unwrap()).unwrap();
        assert_eq!((img.width(), img.height(), img.channels()), (32, 32, 3));
        assert!(img.data().chunks(3).all(|px| px[0] == px[1] && px[1] == px[2]), "{rel} is not gray");
        let lum = img.luminance();
        let peak = (0..lum.len()).max_by(|&a, &b| lum[a].total_cmp(&lum[b])).unwrap();
        let (x, y) = ((peak % 32) as f64, (peak / 32) as f64);
        assert!(truth.quadrant.contains(x, y, 32), "{rel}: peak at ({x}, {y})");
        assert!((x - blob.center_x).abs() <= 2.0 && (y - blob.center_y).abs() <= 2.0, "{rel}");
    }
}

#[test]
fn synthesis_is_a_function_of_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    cmd_synthesize(&tiny_spec(7), &a).unwrap();
    cmd_synthesize(&tiny_spec(7), &b).unwrap();
    cmd_synthesize(&SyntheticSpec { quadrant: Quadrant::BottomRight, ..tiny_spec(8) }, &c).unwrap();
    assert_eq!(snapshot(&a), snapshot(&b));
    let (sa, sc) = (snapshot(&a), snapshot(&c));
    assert_eq!(sa.keys().collect::<Vec<_>>(), sc.keys().collect::<Vec<_>>());
    assert_ne!(sa, sc);
}

#[test]
fn score_files_evaluate_perfect_and_single_class_splits() {
    let dir = tempfile::tempdir().unwrap();
    let perfect = dir.path().join("perfect.csv");
    let preds: Vec<_> = (0..10).map(|i| ScoredPrediction::new(if i < 5 { 1.0 } else { 0.0 }, (i < 5) as u8)).collect();
    write_score_file(&perfect, &preds, None).unwrap();
    let cfg = RunConfig { scores: Some(perfect), out_dir: Some(dir.path().join("p")), ..RunConfig::default() };
    let out = cmd_evaluate(&cfg).unwrap();
    let row = out.table.lines().nth(2).unwrap();
    assert_eq!(row.matches("1.0000").count(), 7, "{row}");
    assert!(row.contains("0.0000"));

    let single = dir.path().join("single.csv");
    let preds = [ScoredPrediction::new(0.8, 1), ScoredPrediction::new(0.3, 1), ScoredPrediction::new(0.6, 1)];
    write_score_file(&single, &preds, None).unwrap();
    let out_dir = dir.path().join("s");
    let cfg = RunConfig { scores: Some(single), out_dir: Some(out_dir.clone()), ..RunConfig::default() };
    let out = cmd_evaluate(&cfg).unwrap();
    assert_eq!((out.report.mcc, out.report.roc_auc), (None, None));
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("metrics.json")).unwrap()).unwrap();
    assert!(json["mcc"].is_null() && json["kappa"].is_null() && json["roc_auc"].is_null());
    assert!(json["undefined"]["mcc"].is_string());
}

fn train_cfg(data: &Path, out: &Path) -> RunConfig {
    RunConfig::default()
        .with_overrides(&["preprocess.target_size=16", "train.batch_size=4", "train.max_epochs=2"])
        .map(|c| RunConfig { dataset_root: Some(data.into()), out_dir: Some(out.into()), seed: 11, ..c })
        .unwrap()
}

fn explain_cfg(ckpt: &Path, image: &Path, out: &Path) -> RunConfig {
    RunConfig::default()
        .with_overrides(&["lime.n_segments=6", "lime.n_samples=64", "heatmap_csv=true"])
        .map(|c| RunConfig {
            checkpoint: Some(ckpt.into()),
            image: Some(image.into()),
            out_dir: Some(out.into()),
            seed: 11,
            ..c
        })
        .unwrap()
}

#[test]
fn train_evaluate_explain_are_reproducible_and_leave_the_dataset_alone() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    cmd_synthesize(&tiny_spec(2), &data).unwrap();
    let before = snapshot(&data);
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();

    let (run_a, run_b) = (dir.path().join("run_a"), dir.path().join("run_b"));
    let a = single.install(|| cmd_train(&train_cfg(&data, &run_a))).unwrap();
    let b = single.install(|| cmd_train(&train_cfg(&data, &run_b))).unwrap();
    assert_eq!(a.log.epochs.len(), 2);
    assert_eq!(fs::read(run_a.join(TRAINLOG_FILE)).unwrap(), fs::read(run_b.join(TRAINLOG_FILE)).unwrap());
    assert_eq!(fs::read(&a.checkpoint).unwrap(), fs::read(&b.checkpoint).unwrap());
    assert_eq!(fs::read_to_string(run_a.join(TRAINLOG_FILE)).unwrap(), a.log.to_jsonl());

    // the echo alone is enough to rerun
    let echoed = read_config_echo(&run_a.join(CONFIG_ECHO_FILE)).unwrap();
    let run_c = dir.path().join("run_c");
    single.install(|| cmd_train(&RunConfig { out_dir: Some(run_c.clone()), ..echoed })).unwrap();
    assert_eq!(fs::read(run_a.join(TRAINLOG_FILE)).unwrap(), fs::read(run_c.join(TRAINLOG_FILE)).unwrap());

    let eval = RunConfig {
        checkpoint: Some(a.checkpoint.clone()),
        out_dir: Some(dir.path().join("eval")),
        ..train_cfg(&data, &run_a)
    };
    let out = cmd_evaluate(&eval).unwrap();
    assert_eq!(out.report.n, 8);
    let preds = fs::read_to_string(dir.path().join("eval/predictions.csv")).unwrap();
    assert_eq!(preds.lines().next(), Some("path,label,score"));
    assert!(preds.lines().nth(1).unwrap().starts_with("test/NORMAL/"));

    let image = data.join("test/PNEUMONIA/test_pneumonia_00001.png");
    let (ea, eb) = (dir.path().join("explain_a"), dir.path().join("explain_b"));
    let x = single.install(|| cmd_explain(&explain_cfg(&a.checkpoint, &image, &ea))).unwrap();
    single.install(|| cmd_explain(&explain_cfg(&a.checkpoint, &image, &eb))).unwrap();
    for f in
        ["heatmap.png", "overlay.png", "gradcam.json", "heatmap.csv", "lime.json", "lime_overlay.png", "config.json"]
    {
        assert!(ea.join(f).is_file(), "{f} missing");
    }
    assert_eq!(x.files.len(), 6);
    assert_eq!(fs::read(ea.join("lime.json")).unwrap(), fs::read(eb.join("lime.json")).unwrap());
    let lime = x.lime.unwrap();
    assert_eq!(lime.weights.len(), lime.n_segments);
    assert!((lime.prediction - x.probability).abs() < 1e-6);
    let hm = x.heatmap.unwrap();
    assert_eq!(hm.normalized.shape(), &[16, 16]);

    // a different seed changes the perturbations
    let ec = dir.path().join("explain_c");
    cmd_explain(&RunConfig { seed: 12, ..explain_cfg(&a.checkpoint, &image, &ec) }).unwrap();
    assert_ne!(fs::read(ea.join("lime.json")).unwrap(), fs::read(ec.join("lime.json")).unwrap());

    assert_eq!(snapshot(&data), before);
}

#[test]
fn bad_inputs_fail_with_named_paths() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let err = cmd_train(&train_cfg(&missing, &dir.path().join("run"))).unwrap_err();
    assert!(err.to_string().contains(missing.to_str().unwrap()), "{err}");

    let ckpt = dir.path().join("broken.ckpt");
    fs::write(&ckpt, b"LSCK").unwrap();
    let err = cmd_explain(&explain_cfg(&ckpt, &dir.path().join("x.png"), &dir.path().join("e"))).unwrap_err();
    assert!(err.to_string().contains("checkpoint"), "{err}");

    let cfg = RunConfig { explain_method: "shap".into(), ..explain_cfg(&ckpt, &ckpt, &dir.path().join("e")) };
    assert!(cmd_explain(&cfg).unwrap_err().to_string().contains("gradcam, lime, both"));
    let cfg = RunConfig { threshold: 1.5, ..RunConfig::default() };
    assert!(cmd_evaluate(&cfg).is_err());
}
