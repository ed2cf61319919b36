use std::fs;

use dtmars::checkpoint::{load_detector, load_gan, read_jsonl, append_jsonl, save_detector, save_gan};
use dtmars::config::{apply_override, desk_preset, ExperimentConfig};
use dtmars::dataset::{
    format_labels, generate_dataset, load_labeled, load_yolo_dataset, parse_labels, validate_dataset, write_translated,
    AuditLog, Purpose,
};
use dtmars::pipeline::config_hash;
use dtmars_core::bbox::BBox;
use dtmars_core::detector::{Detector, DetectorConfig};
use dtmars_core::gan::{DiscriminatorConfig, GanBundle, GeneratorConfig, LossWeights};
use dtmars_core::nn::Module;
use dtmars_core::pseudoreal::RealStyle;
use dtmars_core::synth::{BackgroundSource, SynthConfig};
use proptest::prelude::*;

fn small_synth(n: usize) -> SynthConfig {
    SynthConfig { n_images: n, backgrounds: BackgroundSource::Procedural { count: 2 }, ..SynthConfig::default() }
}

proptest! {
    #[test]
    fn label_text_round_trips(raw in proptest::collection::vec((0.0..=1.0f64, 0.0..=1.0f64, 0.0..=1.0f64, 0.0..=1.0f64), 0..8)) {
        let boxes: Vec<BBox> = raw.into_iter().filter_map(|(a, b, c, d)| BBox::new(a, b, c, d).ok()).collect();
        prop_assert_eq!(parse_labels(&format_labels(&boxes)).unwrap(), boxes);
    }
}

#[test]
fn malformed_lines_report_their_position() {
    let err = parse_labels("0 0.5 0.5 0.1 0.1\n0 0.5 1.2 0.1 0.1\n").unwrap_err();
    assert_eq!(err.0, 2);
    assert!(err.1.contains("1.2"));
    assert_eq!(parse_labels("1 0.5 0.5 0.1 0.1").unwrap_err().0, 1);
    assert_eq!(parse_labels("0 0.5 0.5 0.1").unwrap_err().0, 1);
}

#[test]
fn validation_finds_bad_values_and_missing_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_dataset(&small_synth(3), None, dir.path()).unwrap();
    assert!(validate_dataset(&m).is_clean());
    let stems: Vec<String> = m.entries.iter().map(|e| e.stem.clone()).collect();
    fs::write(m.label_path(&stems[0]), "0 0.5 0.5 0.1 0.1\n0 0.5 1.2 0.1 0.1\n").unwrap();
    fs::remove_file(m.label_path(&stems[1])).unwrap();
    fs::write(dir.path().join("labels").join("stray.txt"), "").unwrap();
    let report = validate_dataset(&m);
    let text: Vec<String> = report.findings.iter().map(ToString::to_string).collect();
    assert_eq!(report.findings.len(), 3, "{text:?}");
    assert_eq!(report.findings[0].line, Some(2));
    assert!(text[0].ends_with(&format!("{}.txt:2: value 1.2 out of range [0,1]", stems[0])), "{}", text[0]);
    assert!(text[1].contains("missing label file"));
    assert!(text[2].contains("stray.txt"));
}

#[test]
fn generated_datasets_are_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = generate_dataset(&small_synth(3), Some(&RealStyle::default()), a.path()).unwrap();
    let mb = generate_dataset(&small_synth(3), Some(&RealStyle::default()), b.path()).unwrap();
    assert_eq!((ma.content_hash.clone(), ma.image_hash.clone()), (mb.content_hash, mb.image_hash));
    let reloaded = load_yolo_dataset(a.path()).unwrap();
    assert_eq!(reloaded.entries, ma.entries);
}

#[test]
fn real_labels_are_refused_for_training() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_dataset(&small_synth(2), Some(&RealStyle::default()), dir.path()).unwrap();
    let audit = AuditLog::new();
    let err = load_labeled(&m, &audit, Purpose::Training).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(audit.events().is_empty());
    assert_eq!(load_labeled(&m, &audit, Purpose::Evaluation).unwrap().len(), 2);
    assert_eq!(audit.events().len(), 2);
    assert!(audit.violations().is_empty());
}

#[test]
fn translation_copies_labels_byte_for_byte() {
    let (src, out) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let m = generate_dataset(&small_synth(3), None, src.path()).unwrap();
    let images: Vec<_> = dtmars::dataset::load_images(&m).unwrap().into_iter().map(|mut im| {
        im.data.iter_mut().for_each(|v| *v = 255 - *v);
        im
    }).collect();
    let t = write_translated(&m, &images, &out.path().join("t")).unwrap();
    assert_eq!(t.content_hash, m.content_hash);
    assert_ne!(t.image_hash, m.image_hash);
    for e in &m.entries {
        assert_eq!(fs::read(m.label_path(&e.stem)).unwrap(), fs::read(t.label_path(&e.stem)).unwrap());
    }
}

#[test]
fn detector_checkpoint_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.ckpt");
    let det: Detector<f32> = Detector::new(DetectorConfig { widths: [4, 6, 8] }, 11);
    save_detector(&path, &det, &serde_json::json!({"lr": 0.01}), 11, "abc").unwrap();
    let (back, header) = load_detector(&path).unwrap();
    assert_eq!(back.config, det.config);
    assert_eq!(back.params().tensors(), det.params().tensors());
    assert_eq!((header.seed, header.dataset_hash.as_str()), (11, "abc"));

    let mut bytes = fs::read(&path).unwrap();
    bytes.pop();
    fs::write(&path, &bytes).unwrap();
    assert!(load_detector(&path).is_err());
    fs::write(&path, b"not a checkpoint").unwrap();
    assert_eq!(load_detector(&path).unwrap_err().exit_code(), 2);
}

#[test]
fn gan_checkpoint_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.ckpt");
    let gc = GeneratorConfig { color_hidden: 4, context_width: 4, res_blocks: 1, ..Default::default() };
    let mut bundle: GanBundle<f32> = GanBundle::new(gc, DiscriminatorConfig { widths: [4, 8] }, LossWeights::default(), 4, 9);
    bundle.step = 17;
    save_gan(&path, &bundle, &serde_json::json!({}), 9, "h").unwrap();
    let (back, header) = load_gan(&path, 4).unwrap();
    assert_eq!(header.step, 17);
    assert_eq!(back.step, 17);
    assert_eq!(back.weights, bundle.weights);
    for (a, b) in [(&back.g_r, &bundle.g_r), (&back.g_s, &bundle.g_s)] {
        assert_eq!(a.params().tensors(), b.params().tensors());
    }
    for (a, b) in [(&back.d_r, &bundle.d_r), (&back.d_s, &bundle.d_s)] {
        assert_eq!(a.params().tensors(), b.params().tensors());
    }
    assert!(load_detector(&path).is_err());
}

#[test]
fn jsonl_appends() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("log.jsonl");
    append_jsonl(&p, &[1u32, 2]).unwrap();
    append_jsonl(&p, &[3u32]).unwrap();
    assert_eq!(read_jsonl::<u32>(&p).unwrap(), vec![1, 2, 3]);
}

#[test]
fn config_survives_toml_and_overrides() {
    let cfg = desk_preset();
    assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    let mut c = cfg.clone();
    apply_override(&mut c, "gan.weights.lambda_cyc=7").unwrap();
    assert_eq!(c.gan.weights.lambda_cyc, 7.0);
    assert!(apply_override(&mut c, "gan.weights.nope=1").is_err());
    assert!(apply_override(&mut c, "gan.weights.lambda_cyc=\"x\"").is_err());
    let mut moved = cfg.clone();
    moved.paths.work_dir = "/elsewhere".into();
    assert_eq!(config_hash(&moved), config_hash(&cfg));
    assert_ne!(config_hash(&c), config_hash(&cfg));
}
