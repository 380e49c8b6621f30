//! The full training loop over epochs, validation-based checkpointing,
//! evaluation, per-class metrics, and the resumable experiment grid.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    batches, steps_per_epoch, Dataset, DatasetTag, PrepareOptions, RawData, SplitData,
    STREAM_BATCH, STREAM_INIT,
};
use crate::ensemble::{EnsembleModel, Family};
use crate::error::{Error, Result};
use crate::linalg::Rng;
use crate::optim::{lr_at, sgd_step, LrSchedule, SgdConfig};
use crate::Matrix;

/// The ten fixed seeds used by the replication presets.
pub const PAPER_SEEDS: [u64; 10] = [42, 1234, 73, 1024, 86400, 31415, 2718, 30, 22, 17];

/// Competition delays exercised by the replication grid.
pub const PAPER_DELAYS: [usize; 4] = [0, 3, 5, 7];

/// Sub-network counts exercised by the replication grid.
pub const PAPER_SUBNET_COUNTS: [usize; 4] = [2, 3, 4, 5];

pub const RECORD_SCHEMA: u32 = 1;

/// Everything one training run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dataset: DatasetTag,
    pub family: Family,
    /// Number of sub-networks.
    pub m: usize,
    /// Competition delay in epochs (kWTA family only).
    pub d: usize,
    pub k_frac: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden_dim: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    /// WDBC: hold out the test split before oversampling.
    pub split_first: bool,
    /// Reload the best checkpoint into the live model after every epoch.
    pub reload_each_epoch: bool,
    /// Cap on the training pool, for reduced-scale runs.
    pub limit_train: Option<usize>,
}

impl TrainConfig {
    /// The replication hyperparameters: SGD momentum 0.9, learning rate
    /// decaying 0.1 to 1e-4, weight decay 1e-5, batch 100, 20 epochs,
    /// hidden width 100, k = 0.75.
    pub fn paper(dataset: DatasetTag, family: Family, m: usize, d: usize, seed: u64) -> Self {
        Self {
            dataset,
            family,
            m,
            d,
            k_frac: 0.75,
            epochs: 20,
            batch_size: 100,
            hidden_dim: 100,
            lr_start: 1e-1,
            lr_end: 1e-4,
            momentum: 0.9,
            weight_decay: 1e-5,
            lr_schedule: LrSchedule::Exponential,
            seed,
            split_first: false,
            reload_each_epoch: false,
            limit_train: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Domain("m must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Domain("batch_size must be >= 1".into()));
        }
        if self.hidden_dim == 0 {
            return Err(Error::Domain("hidden_dim must be >= 1".into()));
        }
        if self.family == Family::KwtaEnn && !(self.k_frac > 0.0 && self.k_frac <= 1.0) {
            return Err(Error::Domain(format!(
                "k_frac must lie in (0, 1], got {}",
                self.k_frac
            )));
        }
        Ok(())
    }

    pub fn prepare_options(&self) -> PrepareOptions {
        PrepareOptions {
            split_first: self.split_first,
            limit_train: self.limit_train,
        }
    }

    fn sgd(&self, train_len: usize) -> SgdConfig {
        SgdConfig {
            lr_start: self.lr_start,
            lr_end: self.lr_end,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            total_steps: (self.epochs * steps_per_epoch(train_len, self.batch_size)).max(1),
            schedule: self.lr_schedule,
        }
    }
}

/// One point of a per-epoch curve; `epoch` is 1-based (epoch 0 would be
/// the untrained model).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochPoint {
    pub epoch: usize,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Curves {
    pub train_loss: Vec<EpochPoint>,
    pub train_accuracy: Vec<EpochPoint>,
    pub val_loss: Vec<EpochPoint>,
    pub val_accuracy: Vec<EpochPoint>,
}

/// Per-sub-network probability vectors for one held-out sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleProbe {
    pub sample_index: usize,
    pub label: usize,
    pub subnet_probs: Vec<Vec<f64>>,
    pub gate_probs: Option<Vec<f64>>,
    pub final_probs: Vec<f64>,
}

/// Complete outcome of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema: u32,
    pub config: TrainConfig,
    pub curves: Curves,
    /// Epoch (1-based) whose snapshot was restored for testing; 0 means the
    /// initial parameters were never improved upon (or epochs == 0).
    pub best_val_epoch: usize,
    pub best_val_accuracy: f64,
    pub test_accuracy: f64,
    pub test_loss: f64,
    /// classes x (m + 1): per-class accuracy of each sub-network and, in
    /// the last column, of the full model. `None` marks classes with zero
    /// test samples.
    pub per_class_accuracy: Vec<Vec<Option<f64>>>,
    pub probe: Option<SampleProbe>,
    pub wall_time_secs: f64,
}

/// Fraction of rows whose argmax matches the label; argmax ties break to
/// the lowest index.
pub fn accuracy(probs: &Matrix, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    count_correct(probs, labels) as f64 / labels.len() as f64
}

fn count_correct(probs: &Matrix, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| probs.argmax_row(i) == l)
        .count()
}

/// Mean family loss and accuracy over a dataset, evaluated in deterministic
/// chunks with the given epoch's activation mode.
pub fn evaluate(
    model: &EnsembleModel<f64>,
    ds: &Dataset,
    epoch: usize,
    batch_size: usize,
) -> Result<(f64, f64)> {
    if ds.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut cursor = 0;
    while cursor < ds.len() {
        let end = (cursor + batch_size).min(ds.len());
        let idx: Vec<usize> = (cursor..end).collect();
        let chunk = ds.subset(&idx);
        let out = model.forward(&chunk.features, epoch)?;
        loss_sum += model.loss(&out, &chunk.labels)? * chunk.labels.len() as f64;
        correct += count_correct(&out.final_probs, &chunk.labels);
        cursor = end;
    }
    Ok((loss_sum / ds.len() as f64, correct as f64 / ds.len() as f64))
}

/// Per-class accuracy matrix (classes x (m+1)): entry (c, m) is sub-network
/// m's accuracy restricted to test samples of class c; the final column is
/// the full model. Classes absent from the test set yield `None`.
pub fn per_class_accuracy(
    model: &EnsembleModel<f64>,
    ds: &Dataset,
    epoch: usize,
    batch_size: usize,
) -> Result<Vec<Vec<Option<f64>>>> {
    let classes = ds.class_count;
    let m = model.subnet_count();
    let mut totals = vec![0usize; classes];
    let mut correct = vec![vec![0usize; m + 1]; classes];

    let mut cursor = 0;
    while cursor < ds.len() {
        let end = (cursor + batch_size).min(ds.len());
        let idx: Vec<usize> = (cursor..end).collect();
        let chunk = ds.subset(&idx);
        let out = model.forward(&chunk.features, epoch)?;
        for (i, &label) in chunk.labels.iter().enumerate() {
            totals[label] += 1;
            for (net, probs) in out.subnet_probs.iter().enumerate() {
                if probs.argmax_row(i) == label {
                    correct[label][net] += 1;
                }
            }
            if out.final_probs.argmax_row(i) == label {
                correct[label][m] += 1;
            }
        }
        cursor = end;
    }

    Ok((0..classes)
        .map(|c| {
            (0..=m)
                .map(|col| {
                    if totals[c] == 0 {
                        None
                    } else {
                        Some(correct[c][col] as f64 / totals[c] as f64)
                    }
                })
                .collect()
        })
        .collect())
}

/// Train one model to completion and return its record. Fully
/// deterministic under (seed, config).
pub fn train_one(config: &TrainConfig, data: &SplitData) -> Result<RunRecord> {
    train_one_with_model(config, data).map(|(record, _)| record)
}

/// Same as [`train_one`], additionally returning the restored best model.
pub fn train_one_with_model(
    config: &TrainConfig,
    data: &SplitData,
) -> Result<(RunRecord, EnsembleModel<f64>)> {
    config.validate()?;
    let start = Instant::now();

    let mut init_rng = Rng::with_stream(config.seed, STREAM_INIT);
    let mut model = EnsembleModel::init(
        config.family,
        &mut init_rng,
        data.train.dim(),
        config.hidden_dim,
        data.train.class_count,
        config.m,
        config.k_frac,
        config.d,
    )?;

    let sgd = config.sgd(data.train.len());
    sgd.validate()?;
    let mut batch_rng = Rng::with_stream(config.seed, STREAM_BATCH);

    let mut curves = Curves::default();
    // A snapshot is the model state *at* an epoch, including which
    // activation mode (competition delay) validated it; the restored
    // model is evaluated in that same mode.
    let mut best_snapshot = model.clone();
    let mut best_val_accuracy = f64::NEG_INFINITY;
    let mut best_val_epoch = 0usize;
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (x, labels) in batches(&data.train, config.batch_size, &mut batch_rng) {
            let out = model.forward(&x, epoch)?;
            let loss = model.backward(&out, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    step,
                    detail: format!("training loss became {loss}"),
                });
            }
            loss_sum += loss * labels.len() as f64;
            correct += count_correct(&out.final_probs, &labels);
            let mut params = model.params_mut();
            sgd_step(&mut params, &sgd, step).map_err(|e| match e {
                Error::PoisonedGradients { param, index } => Error::Diverged {
                    epoch: epoch + 1,
                    step,
                    detail: format!("non-finite gradient in '{param}' at flat index {index}"),
                },
                other => other,
            })?;
            step += 1;
        }

        let n = data.train.len() as f64;
        curves.train_loss.push(EpochPoint {
            epoch: epoch + 1,
            value: loss_sum / n,
        });
        curves.train_accuracy.push(EpochPoint {
            epoch: epoch + 1,
            value: correct as f64 / n,
        });

        let (val_loss, val_accuracy) = evaluate(&model, &data.val, epoch, config.batch_size)?;
        curves.val_loss.push(EpochPoint {
            epoch: epoch + 1,
            value: val_loss,
        });
        curves.val_accuracy.push(EpochPoint {
            epoch: epoch + 1,
            value: val_accuracy,
        });

        // Strict improvement only: ties keep the earlier snapshot.
        if val_accuracy > best_val_accuracy {
            best_val_accuracy = val_accuracy;
            best_snapshot = model.clone();
            best_val_epoch = epoch + 1;
        }
        if config.reload_each_epoch {
            model = best_snapshot.clone();
        }
    }

    // Restore the best checkpoint before touching the test set, and keep
    // evaluating it in the activation mode it was selected under.
    let model = best_snapshot;
    let eval_epoch = best_val_epoch.saturating_sub(1);
    let (test_loss, test_accuracy) = evaluate(&model, &data.test, eval_epoch, config.batch_size)?;
    let per_class = per_class_accuracy(&model, &data.test, eval_epoch, config.batch_size)?;
    let probe = if data.test.is_empty() {
        None
    } else {
        let first = data.test.subset(&[0]);
        let out = model.forward(&first.features, eval_epoch)?;
        Some(SampleProbe {
            sample_index: 0,
            label: first.labels[0],
            subnet_probs: out
                .subnet_probs
                .iter()
                .map(|p| p.row(0).to_vec())
                .collect(),
            gate_probs: out.gate_probs.as_ref().map(|p| p.row(0).to_vec()),
            final_probs: out.final_probs.row(0).to_vec(),
        })
    };

    let record = RunRecord {
        schema: RECORD_SCHEMA,
        config: config.clone(),
        curves,
        best_val_epoch,
        best_val_accuracy: if best_val_epoch == 0 {
            0.0
        } else {
            best_val_accuracy
        },
        test_accuracy,
        test_loss,
        per_class_accuracy: per_class,
        probe,
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    Ok((record, model))
}

pub use crate::data::{load_raw, split_raw};

/// Requested grid axes; non-kWTA families ignore the delay axis.
#[derive(Debug, Clone)]
pub struct GridSpec {
    pub base: TrainConfig,
    pub families: Vec<Family>,
    pub subnet_counts: Vec<usize>,
    pub delays: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl GridSpec {
    /// The replication grid for one dataset: kWTA at four delays plus MoE
    /// and the cooperative ensemble, across the four sub-network counts and
    /// all ten seeds.
    pub fn paper(dataset: DatasetTag) -> Self {
        GridSpec {
            base: TrainConfig::paper(dataset, Family::KwtaEnn, 2, 0, PAPER_SEEDS[0]),
            families: vec![Family::KwtaEnn, Family::MoE, Family::Cooperative],
            subnet_counts: PAPER_SUBNET_COUNTS.to_vec(),
            delays: PAPER_DELAYS.to_vec(),
            seeds: PAPER_SEEDS.to_vec(),
        }
    }

    /// Every cell in deterministic order.
    pub fn cells(&self) -> Vec<TrainConfig> {
        let mut out = Vec::new();
        for &family in &self.families {
            let delays: &[usize] = if family == Family::KwtaEnn {
                &self.delays
            } else {
                &[0]
            };
            for &m in &self.subnet_counts {
                for &d in delays {
                    for &seed in &self.seeds {
                        let mut cfg = self.base.clone();
                        cfg.family = family;
                        cfg.m = m;
                        cfg.d = d;
                        cfg.seed = seed;
                        out.push(cfg);
                    }
                }
            }
        }
        out
    }
}

/// File name a run record persists under.
pub fn record_filename(config: &TrainConfig) -> String {
    format!(
        "{}_{}_M{}_d{}_seed{}.json",
        config.dataset, config.family, config.m, config.d, config.seed
    )
}

fn failed_filename(config: &TrainConfig) -> String {
    format!(
        "{}_{}_M{}_d{}_seed{}.failed.json",
        config.dataset, config.family, config.m, config.d, config.seed
    )
}

/// Write a JSON document atomically (temp file + rename).
pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, serde_json::to_vec_pretty(value)?)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_record(path: &Path) -> Result<RunRecord> {
    let bytes = std::fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Outcome counts of one grid invocation.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct GridOutcome {
    pub completed: usize,
    pub skipped: usize,
    /// (record stem, error message) of every failed cell.
    pub failed: Vec<(String, String)>,
}

/// Run every requested cell, skipping those whose record file already
/// exists. Individual failures are recorded as `<stem>.failed.json` and do
/// not stop the grid. Cells execute in parallel across `jobs` threads;
/// each run owns its generator streams, so results are independent of the
/// scheduling.
pub fn run_grid(
    spec: &GridSpec,
    data_dir: &Path,
    out_dir: &Path,
    jobs: usize,
    on_complete: impl Fn(&RunRecord) + Sync,
) -> Result<GridOutcome> {
    std::fs::create_dir_all(out_dir)?;
    let cells = spec.cells();
    let raw_cache: Mutex<HashMap<DatasetTag, Arc<RawData>>> = Mutex::new(HashMap::new());
    let raw_for = |tag: DatasetTag| -> Result<Arc<RawData>> {
        let mut cache = raw_cache.lock().expect("raw cache lock");
        if let Some(raw) = cache.get(&tag) {
            return Ok(Arc::clone(raw));
        }
        let raw = Arc::new(load_raw(tag, data_dir)?);
        cache.insert(tag, Arc::clone(&raw));
        Ok(raw)
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Domain(format!("cannot build thread pool: {e}")))?;

    #[derive(Debug)]
    enum CellOutcome {
        Completed,
        Skipped,
        Failed(String, String),
    }

    let outcomes: Vec<CellOutcome> = pool.install(|| {
        cells
            .par_iter()
            .map(|config| {
                let path = out_dir.join(record_filename(config));
                if path.exists() {
                    return CellOutcome::Skipped;
                }
                let attempt = || -> Result<RunRecord> {
                    let raw = raw_for(config.dataset)?;
                    let data = split_raw(&raw, config.seed, config.prepare_options())?;
                    let record = train_one(config, &data)?;
                    write_json_atomic(&path, &record)?;
                    Ok(record)
                };
                match attempt() {
                    Ok(record) => {
                        let _ = std::fs::remove_file(out_dir.join(failed_filename(config)));
                        on_complete(&record);
                        CellOutcome::Completed
                    }
                    Err(e) => {
                        let stem = record_filename(config);
                        let failure = serde_json::json!({
                            "schema": RECORD_SCHEMA,
                            "config": config,
                            "error": e.to_string(),
                        });
                        let _ = write_json_atomic(
                            &out_dir.join(failed_filename(config)),
                            &failure,
                        );
                        CellOutcome::Failed(stem, e.to_string())
                    }
                }
            })
            .collect()
    });

    let mut outcome = GridOutcome::default();
    for o in outcomes {
        match o {
            CellOutcome::Completed => outcome.completed += 1,
            CellOutcome::Skipped => outcome.skipped += 1,
            CellOutcome::Failed(stem, err) => outcome.failed.push((stem, err)),
        }
    }
    Ok(outcome)
}

/// Learning rate actually applied at a given step of a config (diagnostic).
pub fn lr_for_config(config: &TrainConfig, train_len: usize, step: usize) -> Result<f64> {
    lr_at(&config.sgd(train_len), step)
}
