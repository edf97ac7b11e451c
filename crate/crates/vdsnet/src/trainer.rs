//! Epoch loop with validation, early stopping and best-model checkpoints,
//! plus the config-driven training, evaluation and comparison runs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vdsnet_core::data::{split, Record};
use vdsnet_core::metrics::MetricRow;
use vdsnet_core::optim::{Adam, AdamConfig};
use vdsnet_core::train::{evaluate_batch, train_step_scored, Batch};
use vdsnet_core::zoo::{ModelId, Network};

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::dataset::{BatchSource, DiskDataset};
use crate::fixtures::InMemorySet;
use crate::image_io::Color;
use crate::metadata::parse_metadata_csv;
use crate::report::{CompareRow, EpochRow, RunReport};

#[derive(Clone, Debug, PartialEq)]
pub struct FitOptions {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub augment: bool,
    pub seed: u64,
    pub threshold: f64,
    /// Stop once inference-mode accuracy on the training set reaches this.
    pub target_train_accuracy: Option<f64>,
    pub verbose: bool,
}

impl FitOptions {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            batch_size: cfg.batch_size,
            max_epochs: cfg.max_epochs,
            patience: cfg.early_stop_patience,
            augment: cfg.augment,
            seed: cfg.seed,
            threshold: cfg.threshold,
            target_train_accuracy: None,
            verbose: false,
        }
    }
}

/// Called with the network, optimizer, epoch and validation loss whenever
/// validation loss improves.
pub type OnImprove<'a> = dyn FnMut(&Network<f32>, &Adam<f32>, usize, f64) -> Result<()> + 'a;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Progress {
    Improved,
    Stale,
    Stop,
}

/// Patience counter on validation loss. Only a strict decrease counts as
/// an improvement.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: None, stale: 0 }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> Progress {
        if self.best.is_none_or(|(_, b)| val_loss < b) {
            self.best = Some((epoch, val_loss));
            self.stale = 0;
            Progress::Improved
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                Progress::Stop
            } else {
                Progress::Stale
            }
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub epochs: Vec<EpochRow>,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    /// Inference-mode training accuracy after each epoch, when requested.
    pub train_accuracy: Vec<f64>,
    pub seconds: f64,
}

fn uses_meta(net: &Network<f32>) -> bool {
    net.spec().metadata_width > 0
}

fn accuracy(scores: &[f64], labels: &[u8], threshold: f64) -> f64 {
    let hits = scores.iter().zip(labels).filter(|(&s, &l)| (s >= threshold) == (l == 1)).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Sample-weighted inference-mode loss and positive-class scores.
pub fn evaluate_source(
    net: &Network<f32>,
    data: &dyn BatchSource,
    batch_size: usize,
) -> Result<(f64, Vec<f64>)> {
    let n = data.len();
    if n == 0 {
        bail!("cannot evaluate an empty split");
    }
    let idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut total, mut scores) = (0.0, Vec::with_capacity(n));
    for chunk in idx.chunks(batch_size.max(1)) {
        let set = data.batch(chunk, None)?;
        let batch = Batch {
            images: &set.images,
            meta: uses_meta(net).then_some(&set.meta),
            labels: &set.labels,
        };
        let (loss, s) = evaluate_batch(net, &batch, &mut rng)?;
        if !loss.is_finite() {
            bail!("non-finite validation loss");
        }
        total += loss * chunk.len() as f64;
        scores.extend(s);
    }
    Ok((total / n as f64, scores))
}

/// Mini-batch Adam training. With a validation source, the epoch with the
/// lowest validation loss is restored into `net` at the end and reported to
/// `on_improve` as it happens.
pub fn fit(
    net: &mut Network<f32>,
    adam: &mut Adam<f32>,
    train: &dyn BatchSource,
    val: Option<&dyn BatchSource>,
    opts: &FitOptions,
    on_improve: &mut OnImprove<'_>,
) -> Result<FitOutcome> {
    if train.is_empty() {
        bail!("training split is empty");
    }
    if opts.batch_size == 0 || opts.patience == 0 {
        bail!("batch size and patience must be at least 1");
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5348_5546);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x4155_4721);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x4452_4f50);
    let val_labels = val.map(|v| v.labels());
    let train_labels = train.labels();
    let start = Instant::now();
    let mut out = FitOutcome {
        epochs: Vec::new(),
        best_epoch: None,
        best_val_loss: None,
        train_accuracy: Vec::new(),
        seconds: 0.0,
    };
    let mut best: Option<(Network<f32>, Adam<f32>)> = None;
    let mut stopper = EarlyStopping::new(opts.patience);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..opts.max_epochs {
        order.shuffle(&mut order_rng);
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for chunk in order.chunks(opts.batch_size) {
            let aug: Option<&mut dyn RngCore> = if opts.augment { Some(&mut aug_rng) } else { None };
            let set = train.batch(chunk, aug)?;
            let batch = Batch {
                images: &set.images,
                meta: uses_meta(net).then_some(&set.meta),
                labels: &set.labels,
            };
            let (loss, scores) = train_step_scored(net, adam, &batch, &mut drop_rng)
                .with_context(|| format!("epoch {epoch}"))?;
            loss_sum += loss * chunk.len() as f64;
            hits += scores
                .iter()
                .zip(&set.labels)
                .filter(|(&s, &l)| (s >= opts.threshold) == (l == 1))
                .count();
        }
        let mut row = EpochRow {
            epoch,
            loss: loss_sum / train.len() as f64,
            val_loss: None,
            acc: hits as f64 / train.len() as f64,
            val_acc: None,
        };
        let mut stop = false;
        if let (Some(v), Some(labels)) = (val, &val_labels) {
            let (vl, scores) = evaluate_source(net, v, opts.batch_size)?;
            row.val_loss = Some(vl);
            row.val_acc = Some(accuracy(&scores, labels, opts.threshold));
            match stopper.observe(epoch, vl) {
                Progress::Improved => {
                    out.best_val_loss = Some(vl);
                    out.best_epoch = Some(epoch);
                    best = Some((net.clone(), adam.clone()));
                    on_improve(net, adam, epoch, vl)?;
                }
                Progress::Stale => {}
                Progress::Stop => stop = true,
            }
        }
        if let Some(target) = opts.target_train_accuracy {
            let (_, scores) = evaluate_source(net, train, opts.batch_size)?;
            let acc = accuracy(&scores, &train_labels, opts.threshold);
            out.train_accuracy.push(acc);
            stop |= acc >= target;
        }
        if opts.verbose {
            eprintln!(
                "epoch {epoch}: loss {:.4} acc {:.4} val_loss {} val_acc {}",
                row.loss,
                row.acc,
                row.val_loss.map_or("-".into(), |v| format!("{v:.4}")),
                row.val_acc.map_or("-".into(), |v| format!("{v:.4}")),
            );
        }
        out.epochs.push(row);
        if stop {
            break;
        }
    }
    out.seconds = start.elapsed().as_secs_f64();
    if let Some((n, a)) = best {
        *net = n;
        *adam = a;
    }
    Ok(out)
}

/// Parsed records and their seeded patient-grouped split.
pub struct PreparedData {
    pub records: Vec<Record>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub age_outliers: usize,
    pub skipped: usize,
}

pub fn prepare_data(cfg: &TrainConfig) -> Result<PreparedData> {
    let parsed = parse_metadata_csv(&cfg.csv, &cfg.headers)?;
    for (line, why) in &parsed.skipped {
        eprintln!("warning: skipped line {line}: {why}");
    }
    let s = split(&parsed.records, cfg.val_fraction, cfg.seed)?;
    Ok(PreparedData {
        records: parsed.records,
        train: s.train,
        val: s.val,
        age_outliers: parsed.age_outliers,
        skipped: parsed.skipped.len(),
    })
}

impl PreparedData {
    pub fn source(&self, which: &[usize], cfg: &TrainConfig) -> DiskDataset {
        let recs = which.iter().map(|&i| self.records[i].clone()).collect();
        let color = Color::for_channels(cfg.model.input_channels());
        DiskDataset::new(recs, &cfg.image_dir, color, cfg.cache_images)
    }

    pub fn write_manifests(&self, dir: &Path) -> Result<()> {
        for (name, idx) in [("train.txt", &self.train), ("val.txt", &self.val)] {
            let text: String = idx.iter().map(|&i| format!("{}\n", self.records[i].image_index)).collect();
            std::fs::write(dir.join(name), text)?;
        }
        Ok(())
    }
}

pub struct TrainOutcome {
    pub report: RunReport,
    pub checkpoint: PathBuf,
}

pub const BEST_CHECKPOINT: &str = "best.ckpt";

/// Full run from a config: split, fit, best checkpoint, validation metrics
/// and report files in `output_dir`.
pub fn run_training(cfg: &TrainConfig, verbose: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output_dir)
        .with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    let data = prepare_data(cfg)?;
    data.write_manifests(&cfg.output_dir)?;
    let train = data.source(&data.train, cfg);
    let val = data.source(&data.val, cfg);

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = Network::<f32>::new(cfg.model.spec()?, &mut init_rng)?;
    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
        net.params(),
    );
    let mut opts = FitOptions::from_config(cfg);
    opts.verbose = verbose;
    let path = cfg.output_dir.join(BEST_CHECKPOINT);
    let mut save = |n: &Network<f32>, a: &Adam<f32>, epoch: usize, vl: f64| -> Result<()> {
        Checkpoint::capture(n, a, Some(cfg), epoch, Some(vl)).save(&path)?;
        Ok(())
    };
    let outcome = fit(&mut net, &mut adam, &train, Some(&val), &opts, &mut save)?;
    let (_, scores) = evaluate_source(&net, &val, cfg.batch_size)?;
    let metrics = MetricRow::evaluate(&scores, &val.labels(), cfg.threshold, cfg.beta)?;
    let report = RunReport {
        model: cfg.model.to_string(),
        epochs: outcome.epochs,
        best_epoch: outcome.best_epoch,
        train_seconds: outcome.seconds,
        param_count: net.param_count(),
        metrics: Some(metrics),
    };
    report.write_files(&cfg.output_dir)?;
    Ok(TrainOutcome { report, checkpoint: path })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Val,
}

/// Metrics of a checkpoint on one side of the split recorded in its config.
pub fn evaluate_checkpoint(ck: &Checkpoint, which: SplitName, threshold: f64, beta: f64) -> Result<MetricRow> {
    let cfg = ck
        .meta
        .config
        .as_ref()
        .context("checkpoint carries no training config, so its split cannot be rebuilt")?;
    ck.expect_spec(&cfg.model.spec()?)?;
    let net = ck.network()?;
    let data = prepare_data(cfg)?;
    let idx = match which {
        SplitName::Train => &data.train,
        SplitName::Val => &data.val,
    };
    let source = data.source(idx, cfg);
    let (_, scores) = evaluate_source(&net, &source, cfg.batch_size)?;
    Ok(MetricRow::evaluate(&scores, &source.labels(), threshold, beta)?)
}

/// Checkpoint for a known model id, refusing one written for another
/// architecture.
pub fn load_for(path: &Path, model: ModelId) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    ck.expect_spec(&model.spec()?)?;
    Ok(ck)
}

/// Trains and scores each config in order. A failing config yields a row
/// with the error and the remaining configs still run.
pub fn compare(configs: &[PathBuf], seed: Option<u64>, verbose: bool) -> Vec<CompareRow> {
    configs
        .iter()
        .map(|path| {
            let cfg = TrainConfig::load(path).map(|mut c| {
                if let Some(s) = seed {
                    c.seed = s;
                }
                c
            });
            let model = cfg.as_ref().map_or_else(
                |_| path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned()),
                |c| c.model.to_string(),
            );
            let result = cfg.and_then(|c| run_training(&c, verbose)).and_then(|o| {
                let m = o.report.metrics.context("run produced no metrics")?;
                Ok((m, o.report.param_count, o.report.train_seconds))
            });
            CompareRow {
                model,
                result: result.map_err(|e| format!("{e:#}")),
            }
        })
        .collect()
}

/// Train a fixed in-memory set until inference-mode training accuracy
/// reaches `target` or `max_epochs` pass. Returns the per-epoch accuracies.
pub fn overfit(
    model: ModelId,
    set: &InMemorySet,
    learning_rate: f64,
    batch_size: usize,
    max_epochs: usize,
    target: f64,
    seed: u64,
) -> Result<FitOutcome> {
    let extent = set.images.shape()[2];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Network::<f32>::new(model.spec_at(extent)?, &mut rng)?;
    let mut adam = Adam::new(
        AdamConfig {
            learning_rate,
            ..AdamConfig::default()
        },
        net.params(),
    );
    let opts = FitOptions {
        batch_size,
        max_epochs,
        patience: max_epochs.max(1),
        augment: false,
        seed,
        threshold: 0.5,
        target_train_accuracy: Some(target),
        verbose: false,
    };
    fit(&mut net, &mut adam, set, None, &opts, &mut |_, _, _, _| Ok(()))
}

/// Runs `f` on a one-thread pool, the bit-exact reference path.
pub fn single_threaded<R: Send>(f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .context("building single-threaded pool")?;
    Ok(pool.install(f))
}
