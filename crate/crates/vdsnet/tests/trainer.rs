use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vdsnet::checkpoint::Checkpoint;
use vdsnet::config::TrainConfig;
use vdsnet::core::optim::{Adam, AdamConfig};
use vdsnet::core::zoo::{ModelId, Network};
use vdsnet::fixtures::{synthetic_set, write_synthetic_dataset};
use vdsnet::predict::{format_confidence, predict_image, Prediction};
use vdsnet::report::{write_compare_csv, COMPARE_COLUMNS};
use vdsnet::trainer::*;

fn config(dir: &Path, model: ModelId, epochs: usize) -> TrainConfig {
    let (csv, image_dir) = write_synthetic_dataset(&dir.join("data"), 16, 80, 7).unwrap();
    TrainConfig {
        model,
        batch_size: 8,
        learning_rate: 1e-3,
        max_epochs: epochs,
        early_stop_patience: 5,
        seed: 11,
        threshold: 0.5,
        beta: 0.5,
        csv,
        image_dir,
        output_dir: dir.join(format!("out_{model}")),
        val_fraction: 0.25,
        augment: true,
        cache_images: 64,
        headers: Default::default(),
    }
}

fn opts(max_epochs: usize, patience: usize) -> FitOptions {
    FitOptions {
        batch_size: 8,
        max_epochs,
        patience,
        augment: false,
        seed: 1,
        threshold: 0.5,
        target_train_accuracy: None,
        verbose: false,
    }
}

fn fresh(model: ModelId, extent: usize, lr: f64) -> (Network<f32>, Adam<f32>) {
    let net = Network::<f32>::new(model.spec_at(extent).unwrap(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let adam = Adam::new(AdamConfig { learning_rate: lr, ..AdamConfig::default() }, net.params());
    (net, adam)
}

#[test]
fn patience_two_on_worsening_loss_stops_two_epochs_after_best() {
    let mut stop = EarlyStopping::new(2);
    assert_eq!(stop.observe(0, 1.0), Progress::Improved);
    assert_eq!(stop.observe(1, 1.1), Progress::Stale);
    assert_eq!(stop.observe(2, 1.2), Progress::Stop);
    assert_eq!(stop.best(), Some((0, 1.0)));

    let mut stop = EarlyStopping::new(2);
    let losses = [0.9, 0.7, 0.8, 0.6, 0.65, 0.6, 0.5];
    let ended = losses.iter().enumerate().find(|&(e, &l)| stop.observe(e, l) == Progress::Stop).map(|(e, _)| e);
    assert_eq!(ended, Some(5));
    assert_eq!(stop.best(), Some((3, 0.6)));
}

#[test]
fn fit_keeps_the_best_validation_epoch() {
    let train = synthetic_set(16, 1, 32, 1);
    let mut val = synthetic_set(8, 1, 32, 2);
    for l in &mut val.labels {
        *l = 1 - *l;
    }
    let (mut net, mut adam) = fresh(ModelId::VanillaGray, 32, 1e-2);
    let mut improved = Vec::new();
    let out = fit(&mut net, &mut adam, &train, Some(&val), &opts(12, 2), &mut |_, _, e, l| {
        improved.push((e, l));
        Ok(())
    })
    .unwrap();
    let best = out.best_epoch.unwrap();
    assert!(out.epochs.len() <= 12);
    if out.epochs.len() < 12 {
        assert_eq!(out.epochs.len(), best + 3);
    }
    let min = out.epochs.iter().filter_map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(out.best_val_loss, Some(min));
    assert_eq!(improved.last(), Some(&(best, min)));
    let (restored, _) = evaluate_source(&net, &val, 8).unwrap();
    assert!((restored - min).abs() < 1e-9, "{restored} vs {min}");
}

#[test]
fn empty_training_split_is_an_error() {
    let set = synthetic_set(4, 1, 32, 1).select(&[]);
    let (mut net, mut adam) = fresh(ModelId::VanillaGray, 32, 1e-3);
    let err = fit(&mut net, &mut adam, &set, None, &opts(1, 1), &mut |_, _, _, _| Ok(())).unwrap_err();
    assert!(err.to_string().contains("empty"), "{err}");
}

#[test]
fn non_finite_loss_aborts_with_a_diagnostic() {
    let set = synthetic_set(8, 1, 32, 1);
    let (mut net, mut adam) = fresh(ModelId::VanillaGray, 32, 1e-3);
    let last = net.params().len() - 1;
    net.params_mut()[last].data_mut().fill(f32::NAN);
    let err = fit(&mut net, &mut adam, &set, None, &opts(3, 1), &mut |_, _, _, _| Ok(())).unwrap_err();
    let msg = format!("{err:#}");
    assert!(msg.contains("epoch 0") && msg.contains("non-finite"), "{msg}");
}

#[test]
fn vanilla_overfits_sixty_four_samples() {
    let set = synthetic_set(64, 1, 64, 5);
    let out = overfit(ModelId::VanillaGray, &set, 1e-3, 32, 100, 0.95, 0).unwrap();
    let acc = *out.train_accuracy.last().unwrap();
    assert!(acc >= 0.95, "accuracy {acc} after {} epochs", out.epochs.len());
}

#[test]
fn same_seed_runs_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), ModelId::VanillaRgb, 2);
    let run = || {
        let out = single_threaded(|| run_training(&cfg, false)).unwrap().unwrap();
        (out.report, std::fs::read(&out.checkpoint).unwrap())
    };
    let (a, ckpt_a) = run();
    let (b, ckpt_b) = run();
    assert_eq!(a.epochs.len(), 2);
    assert_eq!(a.epochs, b.epochs);
    assert_eq!(a.best_epoch, b.best_epoch);
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(ckpt_a, ckpt_b);
    for f in ["report.csv", "loss.svg", "report.json", "train.txt", "val.txt", "best.ckpt"] {
        assert!(cfg.output_dir.join(f).exists(), "{f}");
    }
    let train = std::fs::read_to_string(cfg.output_dir.join("train.txt")).unwrap();
    let val = std::fs::read_to_string(cfg.output_dir.join("val.txt")).unwrap();
    assert!(train.lines().all(|l| !val.lines().any(|v| v == l)));
}

#[test]
fn evaluation_is_repeatable_and_threshold_zero_recalls_everything() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), ModelId::VanillaGray, 1);
    let out = run_training(&cfg, false).unwrap();
    let ck = Checkpoint::load(&out.checkpoint).unwrap();
    let a = evaluate_checkpoint(&ck, SplitName::Val, 0.5, 0.5).unwrap();
    let b = evaluate_checkpoint(&ck, SplitName::Val, 0.5, 0.5).unwrap();
    assert_eq!(a, b);
    for split in [SplitName::Train, SplitName::Val] {
        let m = evaluate_checkpoint(&ck, split, 0.0, 0.5).unwrap();
        assert_eq!(m.recall, 1.0);
    }
    assert!(evaluate_checkpoint(&ck, SplitName::Val, 1.5, 0.5).is_err());
}

#[test]
fn compare_keeps_input_order_and_records_failures() {
    let dir = tempfile::tempdir().unwrap();
    let mut paths = Vec::new();
    for model in [ModelId::VanillaRgb, ModelId::VanillaGray] {
        let cfg = config(dir.path(), model, 1);
        let p = dir.path().join(format!("{model}.json"));
        cfg.save(&p).unwrap();
        paths.push(p);
    }
    paths.push(dir.path().join("missing.json"));
    let rows = compare(&paths, None, false);
    assert_eq!(rows.iter().map(|r| r.model.as_str()).collect::<Vec<_>>(), ["vanilla_rgb", "vanilla_gray", "missing"]);
    assert!(rows[2].result.is_err());
    let (rgb, gray) = (rows[0].result.as_ref().unwrap(), rows[1].result.as_ref().unwrap());
    assert_eq!(rgb.1 - gray.1, 1568);

    let mut out = Vec::new();
    write_compare_csv(&rows[..2], &mut out).unwrap();
    let mut rdr = csv::Reader::from_reader(out.as_slice());
    assert_eq!(rdr.headers().unwrap().iter().collect::<Vec<_>>(), COMPARE_COLUMNS);
    let body: Vec<_> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(body.len(), 2);
    assert!(body.iter().all(|r| r.len() == 7));
}

#[test]
fn confidence_formatting_and_verdicts() {
    assert_eq!(format_confidence(0.585842), "58.5842%");
    assert_eq!(format_confidence(0.483327), "48.3327%");
    let near = Prediction::new(0.485, 0.5).unwrap();
    assert!(!near.positive && near.borderline);
    assert!(near.line().contains("borderline"));
    let at = Prediction::new(0.5, 0.5).unwrap();
    assert!(at.positive);
    let far = Prediction::new(0.9, 0.5).unwrap();
    assert!(far.positive && !far.borderline);
    assert!(Prediction::new(0.5, -0.1).is_err());
}

#[test]
fn predicting_a_png_gives_a_fraction() {
    let dir = tempfile::tempdir().unwrap();
    let (_, images) = write_synthetic_dataset(dir.path(), 1, 100, 3).unwrap();
    let png = std::fs::read_dir(&images).unwrap().next().unwrap().unwrap().path();
    for model in [ModelId::Vdsnet, ModelId::VanillaGray] {
        let (net, _) = fresh(model, 64, 1e-3);
        let p = predict_image(&net, &png, 58.0, vdsnet::core::data::Gender::F, vdsnet::core::data::ViewPosition::PA, 0.5).unwrap();
        assert!((0.0..=1.0).contains(&p.confidence));
    }
    let (net, _) = fresh(ModelId::VanillaGray, 64, 1e-3);
    let missing = dir.path().join("nope.png");
    assert!(predict_image(&net, &missing, 58.0, vdsnet::core::data::Gender::F, vdsnet::core::data::ViewPosition::PA, 0.5).is_err());
}
