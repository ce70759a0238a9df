//! End-to-end pipeline flow through the library API: synthesize to disk,
//! read back, train briefly, checkpoint, reload, evaluate, predict, and
//! render an overlay.

use cunet::data;
use cunet::metrics::UndefinedPolicy;
use cunet::model::{CuNet, CuNetConfig};
use cunet::tensor::ParamSet;
use cunet::train::{self, FileConfig, TrainConfig};

#[test]
fn full_pipeline_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds");
    let split = data::synthesize_to_dir(&ds, 15, 32, 41, 0.8).unwrap();
    assert_eq!(split.train.len() + split.val.len() + split.test.len(), 15);

    let train_set = data::read_dataset(ds.join("train")).unwrap();
    let val_set = data::read_dataset(ds.join("val")).unwrap();
    let test_set = data::read_dataset(ds.join("test")).unwrap();
    assert_eq!(train_set.len(), split.train.len());

    let model_config = CuNetConfig { base_channels: 2, depth: 1, seed: 41, ..Default::default() };
    let mut model = CuNet::new(model_config.clone()).unwrap();
    let config = TrainConfig {
        max_epochs: 3,
        batch_size: 4,
        contour_width: 2,
        seed: 41,
        ..Default::default()
    };
    let outcome = train::train(&mut model, &train_set, &val_set, &config).unwrap();
    assert!(!outcome.state.history.is_empty());
    // Every gradient step drew two fresh sample matrices.
    let drawn_per_step = outcome.w_matrices_sampled as f64 / outcome.steps as f64;
    assert_eq!(drawn_per_step, 2.0);

    // Checkpoint, reload into a fresh model, and verify predictions agree.
    let ckpt = dir.path().join("model.cun1");
    model.params().save(&ckpt).unwrap();
    let mut reloaded = CuNet::new(model_config).unwrap();
    reloaded.set_params(ParamSet::load(&ckpt).unwrap()).unwrap();

    let report_a = train::evaluate(&model, &test_set, UndefinedPolicy::Exclude).unwrap();
    let report_b = train::evaluate(&reloaded, &test_set, UndefinedPolicy::Exclude).unwrap();
    assert_eq!(report_a.to_csv().unwrap(), report_b.to_csv().unwrap());
    assert_eq!(report_a.cases.len(), test_set.len());

    // Prediction stays in vocabulary and respects the non-brain mask.
    let prediction = train::predict(&model, &test_set[0]).unwrap();
    assert!(prediction.is_in_vocabulary());
    let nonbrain = data::extract_nonbrain_mask(&test_set[0]);
    let (_, h, w) = prediction.shape();
    for y in 0..h {
        for x in 0..w {
            if nonbrain.get(0, y, x) {
                assert_eq!(prediction.get(0, y, x), 0);
            }
        }
    }

    // Overlay renders a valid PPM of the right size.
    let overlay = dir.path().join("overlay.ppm");
    train::render_overlay(&test_set[0], &prediction, &overlay).unwrap();
    let bytes = std::fs::read(&overlay).unwrap();
    let header = format!("P6\n{w} {h}\n255\n");
    assert!(bytes.starts_with(header.as_bytes()));
    assert_eq!(bytes.len(), header.len() + 3 * h * w);

    // Reports serialize to both formats.
    let csv_path = dir.path().join("report.csv");
    let json_path = dir.path().join("report.json");
    report_a.write_csv(&csv_path).unwrap();
    report_a.write_json(&json_path).unwrap();
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(json_path).unwrap()).unwrap();
    assert!(json.get("means").is_some());
}

#[test]
fn config_file_round_trip_and_overrides() {
    let cfg = FileConfig::default();
    let text = cfg.to_toml();
    let parsed = FileConfig::from_toml(&text).unwrap();
    assert_eq!(cfg, parsed);

    // Spot-check the protocol defaults.
    assert_eq!(parsed.train.lr0, 1e-3);
    assert_eq!(parsed.train.lr_floor, 1e-7);
    assert_eq!(parsed.train.momentum, 0.9);
    assert_eq!(parsed.train.weight_decay, 5e-5);
    assert_eq!(parsed.train.omega0, 0.1);
    assert_eq!(parsed.train.omega_floor, 1e-3);
    assert_eq!(parsed.train.alpha1, 2.0);
    assert_eq!(parsed.train.alpha2, 1.0);
    assert_eq!(parsed.train.beta, 1.5);
    assert_eq!(parsed.train.max_epochs, 50);
    assert_eq!(parsed.model.in_channels, 4);
    assert_eq!(parsed.model.branch1_classes, 2);
    assert_eq!(parsed.model.branch2_classes, 4);

    // Partial files fill in defaults; unknown keys are rejected.
    let partial = FileConfig::from_toml("[train]\nlr0 = 0.5\n").unwrap();
    assert_eq!(partial.train.lr0, 0.5);
    assert_eq!(partial.train.momentum, 0.9);
    assert!(FileConfig::from_toml("[train]\nlearning_rate = 0.5\n").is_err());
}

#[test]
fn training_skips_degenerate_batches_instead_of_failing() {
    // All-tumorless training data is rejected up front.
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
    let samples: Vec<_> = data::generate_dataset(&mut rng, 4, 32, 0.0);
    let mut model = CuNet::new(CuNetConfig { base_channels: 2, depth: 1, ..Default::default() }).unwrap();
    let config = TrainConfig { max_epochs: 1, ..Default::default() };
    assert!(train::train(&mut model, &samples, &[], &config).is_err());
}
