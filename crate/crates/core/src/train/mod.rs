//! Optimization loop with best-validation checkpoint selection, the gaze
//! error metric and multi-trial statistics.

mod adam;
mod metrics;
mod runner;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use metrics::{
    argmax_rows, classification_error, cluster_labels, evaluate_rmse, predict_dataset, rmse_from_predictions,
    RmseReport,
};
pub use runner::{
    best_epoch, multi_trial, multi_trial_with_seeds, test_metrics, thread_budget, train_loop, train_loop_with,
    write_metrics_csv, EpochRecord, LossKind, Splits, TestMetrics, TrainConfig, TrainRun, TrialSummary,
};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor};

/// Mean over batch and coordinates of the squared error.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "mse_loss",
            format!("{:?} vs {:?}", pred.shape(), target.shape()),
        ));
    }
    let mut g = Graph::new();
    let p = g.input(pred);
    let l = g.mse_loss(p, target.data())?;
    g.scalar_value(l)
}
