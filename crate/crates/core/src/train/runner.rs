use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::metrics::{classification_error, cluster_labels, evaluate_rmse};
use crate::dataio::{write_atomic, write_checkpoint};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{build_model, HeadMode, Model, ModelConfig};
use crate::tensor::Graph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub trials: usize,
    pub px_per_mm: f64,
    pub loss: LossKind,
    /// Keep parameters `f32`-representable after every update.
    pub f32_params: bool,
    /// Where to write the best-validation checkpoint, if anywhere.
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 32,
            learning_rate: 1e-4,
            weight_decay: 0.0,
            seed: 0,
            trials: 5,
            px_per_mm: 2.0,
            loss: LossKind::Mse,
            f32_params: true,
            checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.trials == 0 {
            return Err(Error::InvalidConfig("epochs, batch_size and trials must be >= 1".into()));
        }
        if !(self.px_per_mm > 0.0) {
            return Err(Error::InvalidConfig(format!("px_per_mm must be positive, got {}", self.px_per_mm)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            round_to_f32: self.f32_params,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    /// Validation RMSE in mm (regression) or error rate (classification).
    pub val_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestMetrics {
    pub rmse_mm: f64,
    pub mean_distance_mm: f64,
    /// Set for classification heads.
    pub error_rate: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub records: Vec<EpochRecord>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
    pub best_model: Model,
    pub checkpoint: Option<PathBuf>,
    pub test: Option<TestMetrics>,
    /// Training loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
}

/// (train, validation, test).
pub struct Splits<'d> {
    pub train: &'d Dataset,
    pub val: &'d Dataset,
    pub test: &'d Dataset,
}

/// 1-based index of the first minimum. Non-finite scores never win unless
/// every score is non-finite, in which case epoch 1 is returned.
pub fn best_epoch(scores: &[f64]) -> Option<usize> {
    if scores.is_empty() {
        return None;
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s < scores[best] || (!scores[best].is_finite() && s.is_finite()) {
            best = i;
        }
    }
    Some(best + 1)
}

fn step_seed(seed: u64, step: u64) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// One optimizer step on the given batch; returns the loss.
fn train_step(
    model: &mut Model,
    data: &Dataset,
    idx: &[usize],
    cfg: &TrainConfig,
    state: &mut AdamState,
    seed: u64,
) -> Result<f64> {
    let batch = data.batch(idx)?;
    let (loss, pass, grads) = {
        let mut g = Graph::new();
        let x = g.input(&batch);
        let pass = model.forward(&mut g, x, true, seed)?;
        let loss = match cfg.loss {
            LossKind::Mse => g.mse_loss(pass.output, &data.targets(idx))?,
            LossKind::CrossEntropy => {
                let labels = cluster_labels(data)?;
                let picked: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                g.cross_entropy(pass.output, &picked)?
            }
        };
        let value = g.scalar_value(loss)?;
        let grads = g.backward(loss)?;
        (value, pass, grads)
    };
    model.zero_grad();
    model.absorb(pass, &grads)?;
    adam_step(model.params_mut(), state, &cfg.adam())?;
    Ok(loss)
}

/// Trains for `cfg.epochs` epochs, scoring each epoch with `validate`
/// (lower is better), and returns the weights of the first best epoch.
pub fn train_loop_with<V>(mut model: Model, train: &Dataset, cfg: &TrainConfig, mut validate: V) -> Result<TrainRun>
where
    V: FnMut(&Model, usize) -> Result<f64>,
{
    cfg.validate()?;
    let expect_loss = match model.config().head {
        HeadMode::Regression => LossKind::Mse,
        HeadMode::Classification { .. } => LossKind::CrossEntropy,
    };
    if cfg.loss != expect_loss {
        return Err(Error::InvalidConfig(format!(
            "loss {:?} does not match head {:?}",
            cfg.loss,
            model.config().head
        )));
    }
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::new();
    let mut best: Option<(f64, Model)> = None;
    let mut best_epoch_no = 1;
    let mut step = 0u64;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for idx in order.chunks(cfg.batch_size) {
            step += 1;
            let loss = train_step(&mut model, train, idx, cfg, &mut state, step_seed(cfg.seed, step))?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step: step as usize,
                });
            }
            step_losses.push(loss);
            total += loss;
            batches += 1;
        }
        let val_score = validate(&model, epoch)?;
        records.push(EpochRecord {
            epoch,
            train_loss: total / batches as f64,
            val_score,
        });
        let improved = match &best {
            None => true,
            Some((s, _)) => val_score < *s || (!s.is_finite() && val_score.is_finite()),
        };
        if improved {
            best = Some((val_score, model.clone()));
            best_epoch_no = epoch;
            if let Some(path) = &cfg.checkpoint {
                write_checkpoint(path, &model)?;
            }
        }
    }
    let (_, best_model) = best.expect("at least one epoch ran");
    debug_assert_eq!(
        Some(best_epoch_no),
        best_epoch(&records.iter().map(|r| r.val_score).collect::<Vec<_>>())
    );
    Ok(TrainRun {
        records,
        best_epoch: best_epoch_no,
        best_model,
        checkpoint: cfg.checkpoint.clone(),
        test: None,
        step_losses,
    })
}

fn score(model: &Model, data: &Dataset, px_per_mm: f64) -> Result<f64> {
    match model.config().head {
        HeadMode::Regression => Ok(evaluate_rmse(model, data, px_per_mm)?.rmse_mm),
        HeadMode::Classification { .. } => classification_error(model, data),
    }
}

/// Full run: train, keep the best-validation weights and evaluate them
/// once on the test split.
pub fn train_loop(model: Model, splits: &Splits<'_>, cfg: &TrainConfig) -> Result<TrainRun> {
    if splits.val.is_empty() || splits.test.is_empty() {
        return Err(Error::InvalidArgument("validation and test splits must be non-empty".into()));
    }
    let mut run = train_loop_with(model, splits.train, cfg, |m, _| score(m, splits.val, cfg.px_per_mm))?;
    run.test = Some(test_metrics(&run.best_model, splits.test, cfg.px_per_mm)?);
    Ok(run)
}

pub fn test_metrics(model: &Model, test: &Dataset, px_per_mm: f64) -> Result<TestMetrics> {
    match model.config().head {
        HeadMode::Regression => {
            let r = evaluate_rmse(model, test, px_per_mm)?;
            Ok(TestMetrics {
                rmse_mm: r.rmse_mm,
                mean_distance_mm: r.mean_distance_mm,
                error_rate: None,
            })
        }
        HeadMode::Classification { .. } => Ok(TestMetrics {
            rmse_mm: f64::NAN,
            mean_distance_mm: f64::NAN,
            error_rate: Some(classification_error(model, test)?),
        }),
    }
}

/// Mean and population standard deviation over independent trials.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialSummary {
    pub seeds: Vec<u64>,
    pub per_trial: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl TrialSummary {
    pub fn from_values(seeds: Vec<u64>, per_trial: Vec<f64>) -> Self {
        let n = per_trial.len() as f64;
        let mean = per_trial.iter().sum::<f64>() / n;
        let std = (per_trial.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        Self {
            seeds,
            per_trial,
            mean,
            std,
        }
    }
}

/// Number of worker threads, capped by `DCVIT_THREADS` when set.
pub fn thread_budget() -> usize {
    let available = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    std::env::var("DCVIT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .map_or(available, |cap| cap.min(available))
}

/// Runs one trial per seed (fresh model and training stream each) and
/// summarizes the test metric: RMSE in mm, or error rate for
/// classification heads.
pub fn multi_trial_with_seeds(
    model_cfg: &ModelConfig,
    splits: &Splits<'_>,
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<(TrialSummary, Vec<TrainRun>)> {
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("at least one trial required".into()));
    }
    let run_one = |seed: u64| -> Result<TrainRun> {
        let model = build_model(model_cfg, seed)?;
        let trial_cfg = TrainConfig {
            seed,
            checkpoint: None,
            ..cfg.clone()
        };
        train_loop(model, splits, &trial_cfg)
    };
    let threads = thread_budget().min(seeds.len());
    let mut runs: Vec<Option<Result<TrainRun>>> = (0..seeds.len()).map(|_| None).collect();
    if threads <= 1 {
        for (slot, &s) in runs.iter_mut().zip(seeds) {
            *slot = Some(run_one(s));
        }
    } else {
        for (chunk_runs, chunk_seeds) in runs.chunks_mut(threads).zip(seeds.chunks(threads)) {
            std::thread::scope(|scope| {
                let handles: Vec<_> = chunk_seeds.iter().map(|&s| scope.spawn(move || run_one(s))).collect();
                for (slot, h) in chunk_runs.iter_mut().zip(handles) {
                    *slot = Some(h.join().expect("trial thread panicked"));
                }
            });
        }
    }
    let runs: Vec<TrainRun> = runs.into_iter().map(|r| r.expect("every trial ran")).collect::<Result<_>>()?;
    let values = runs
        .iter()
        .map(|r| {
            let t = r.test.as_ref().expect("train_loop evaluates the test split");
            t.error_rate.unwrap_or(t.rmse_mm)
        })
        .collect();
    Ok((TrialSummary::from_values(seeds.to_vec(), values), runs))
}

/// `cfg.trials` trials with seeds `base_seed + i`.
pub fn multi_trial(
    model_cfg: &ModelConfig,
    splits: &Splits<'_>,
    cfg: &TrainConfig,
    base_seed: u64,
) -> Result<(TrialSummary, Vec<TrainRun>)> {
    cfg.validate()?;
    let seeds: Vec<u64> = (0..cfg.trials as u64).map(|i| base_seed.wrapping_add(i)).collect();
    multi_trial_with_seeds(model_cfg, splits, cfg, &seeds)
}

/// Per-epoch CSV (`epoch,train_loss,val_rmse_mm`, or `val_error_rate` for
/// classification) followed by a `#`-prefixed summary line.
pub fn write_metrics_csv(path: &Path, run: &TrainRun) -> Result<()> {
    let classification = matches!(run.best_model.config().head, HeadMode::Classification { .. });
    let mut out = Vec::new();
    let col = if classification { "val_error_rate" } else { "val_rmse_mm" };
    writeln!(out, "epoch,train_loss,{col}").unwrap();
    for r in &run.records {
        writeln!(out, "{},{},{}", r.epoch, r.train_loss, r.val_score).unwrap();
    }
    write!(out, "# best_epoch={}", run.best_epoch).unwrap();
    if let Some(t) = &run.test {
        match t.error_rate {
            Some(e) => write!(out, " test_error_rate={e}").unwrap(),
            None => write!(out, " test_rmse_mm={} test_mean_distance_mm={}", t.rmse_mm, t.mean_distance_mm).unwrap(),
        }
    }
    writeln!(out).unwrap();
    write_atomic(path, &out)
}
