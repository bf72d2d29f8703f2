use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{HeadMode, Model};
use crate::tensor::{Graph, Tensor};

/// Gaze error of a set of predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct RmseReport {
    /// Root mean square of per-sample Euclidean distances, pixels.
    pub rmse_px: f64,
    pub rmse_mm: f64,
    /// Mean Euclidean distance, millimetres (the alternative reading of
    /// "RMSE" used by some gaze benchmarks).
    pub mean_distance_mm: f64,
    pub distances_px: Vec<f64>,
}

/// Error of `predictions` against `targets`, both flattened `(x, y)` pairs
/// in pixels.
pub fn rmse_from_predictions(predictions: &[f64], targets: &[f64], px_per_mm: f64) -> Result<RmseReport> {
    if predictions.len() != targets.len() || predictions.len() % 2 != 0 {
        return Err(Error::shape(
            "rmse",
            format!("{} predictions vs {} targets", predictions.len(), targets.len()),
        ));
    }
    if predictions.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty dataset".into()));
    }
    if !(px_per_mm > 0.0) {
        return Err(Error::InvalidArgument(format!("px_per_mm must be positive, got {px_per_mm}")));
    }
    let distances_px: Vec<f64> = predictions
        .chunks_exact(2)
        .zip(targets.chunks_exact(2))
        .map(|(p, t)| (p[0] - t[0]).hypot(p[1] - t[1]))
        .collect();
    let n = distances_px.len() as f64;
    let rmse_px = (distances_px.iter().map(|d| d * d).sum::<f64>() / n).sqrt();
    let mean_px = distances_px.iter().sum::<f64>() / n;
    Ok(RmseReport {
        rmse_px,
        rmse_mm: rmse_px / px_per_mm,
        mean_distance_mm: mean_px / px_per_mm,
        distances_px,
    })
}

/// Evaluation-mode outputs for every sample, `[n, outputs]`.
pub fn predict_dataset(model: &Model, dataset: &Dataset, batch_size: usize) -> Result<Tensor> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty dataset".into()));
    }
    let outputs = model.config().head.outputs();
    let mut data = Vec::with_capacity(dataset.len() * outputs);
    let idx: Vec<usize> = (0..dataset.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = dataset.batch(chunk)?;
        let mut g = Graph::new();
        let x = g.input(&batch);
        let pass = model.forward(&mut g, x, false, 0)?;
        data.extend_from_slice(g.value(pass.output));
    }
    Tensor::new(vec![dataset.len(), outputs], data)
}

/// RMSE of a regression model against the dataset labels.
pub fn evaluate_rmse(model: &Model, dataset: &Dataset, px_per_mm: f64) -> Result<RmseReport> {
    if model.config().head != HeadMode::Regression {
        return Err(Error::InvalidArgument("RMSE needs a regression head".into()));
    }
    let preds = predict_dataset(model, dataset, 64)?;
    let all: Vec<usize> = (0..dataset.len()).collect();
    rmse_from_predictions(preds.data(), &dataset.targets(&all), px_per_mm)
}

/// Predicted class per row of `[n, k]` logits (first maximum wins).
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Cluster ids of every label; errors when any label is unclustered.
pub fn cluster_labels(dataset: &Dataset) -> Result<Vec<usize>> {
    dataset
        .labels()
        .iter()
        .enumerate()
        .map(|(i, l)| {
            l.cluster_id
                .map(|c| c as usize)
                .ok_or_else(|| Error::InvalidArgument(format!("sample {i} has no cluster id")))
        })
        .collect()
}

/// Fraction of samples whose predicted cluster differs from the label.
pub fn classification_error(model: &Model, dataset: &Dataset) -> Result<f64> {
    let truth = cluster_labels(dataset)?;
    let preds = argmax_rows(&predict_dataset(model, dataset, 64)?);
    let wrong = preds.iter().zip(&truth).filter(|(p, t)| p != t).count();
    Ok(wrong as f64 / truth.len() as f64)
}
