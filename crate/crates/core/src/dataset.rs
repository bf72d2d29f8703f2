use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gaze label in screen pixels. `orig_*` keep the recorded position after
/// the label has been moved onto a cluster centre.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GazeLabel {
    pub x_px: f32,
    pub y_px: f32,
    pub orig_x_px: f32,
    pub orig_y_px: f32,
    pub participant_id: u32,
    pub cluster_id: Option<u32>,
}

impl GazeLabel {
    pub fn new(x_px: f32, y_px: f32, participant_id: u32) -> Self {
        Self {
            x_px,
            y_px,
            orig_x_px: x_px,
            orig_y_px: y_px,
            participant_id,
            cluster_id: None,
        }
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x_px as f64, self.y_px as f64]
    }
}

/// EEG windows (`channels × timesteps`, row-major, one after another) with
/// their gaze labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    channels: usize,
    timesteps: usize,
    labels: Vec<GazeLabel>,
    eeg: Vec<f32>,
}

impl Dataset {
    pub fn new(channels: usize, timesteps: usize, labels: Vec<GazeLabel>, eeg: Vec<f32>) -> Result<Self> {
        if channels == 0 || timesteps == 0 {
            return Err(Error::InvalidArgument("channels and timesteps must be positive".into()));
        }
        if eeg.len() != labels.len() * channels * timesteps {
            return Err(Error::shape(
                "dataset",
                format!(
                    "{} labels of {channels}x{timesteps} need {} values, got {}",
                    labels.len(),
                    labels.len() * channels * timesteps,
                    eeg.len()
                ),
            ));
        }
        if let Some(i) = labels.iter().position(|l| !(l.x_px.is_finite() && l.y_px.is_finite())) {
            return Err(Error::InvalidArgument(format!("label {i} is not finite")));
        }
        Ok(Self {
            channels,
            timesteps,
            labels,
            eeg,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[GazeLabel] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [GazeLabel] {
        &mut self.labels
    }

    pub fn eeg(&self) -> &[f32] {
        &self.eeg
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let n = self.channels * self.timesteps;
        &self.eeg[i * n..(i + 1) * n]
    }

    pub fn positions(&self) -> Vec<[f64; 2]> {
        self.labels.iter().map(GazeLabel::position).collect()
    }

    pub fn participants(&self) -> BTreeSet<u32> {
        self.labels.iter().map(|l| l.participant_id).collect()
    }

    /// `[B, 1, C, T]` input tensor for the given samples.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        if indices.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let mut data = Vec::with_capacity(indices.len() * self.channels * self.timesteps);
        for &i in indices {
            data.extend(self.sample(i).iter().map(|&v| v as f64));
        }
        Tensor::new(vec![indices.len(), 1, self.channels, self.timesteps], data)
    }

    /// Flattened `(x, y)` pairs for the given samples.
    pub fn targets(&self, indices: &[usize]) -> Vec<f64> {
        indices
            .iter()
            .flat_map(|&i| {
                let l = &self.labels[i];
                [l.x_px as f64, l.y_px as f64]
            })
            .collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut eeg = Vec::with_capacity(indices.len() * self.channels * self.timesteps);
        for &i in indices {
            eeg.extend_from_slice(self.sample(i));
        }
        Self {
            channels: self.channels,
            timesteps: self.timesteps,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            eeg,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let labels = (0..3).map(|i| GazeLabel::new(i as f32, 2.0 * i as f32, i)).collect();
        let eeg = (0..3 * 2 * 4).map(|v| v as f32).collect();
        Dataset::new(2, 4, labels, eeg).unwrap()
    }

    #[test]
    fn batch_layout() {
        let d = tiny();
        let b = d.batch(&[2, 0]).unwrap();
        assert_eq!(b.shape(), &[2, 1, 2, 4]);
        assert_eq!(b.data()[0], 16.0);
        assert_eq!(b.data()[8], 0.0);
        assert_eq!(d.targets(&[1]), vec![1.0, 2.0]);
    }

    #[test]
    fn subset_keeps_pairs() {
        let d = tiny();
        let s = d.subset(&[1]);
        assert_eq!(s.len(), 1);
        assert_eq!(s.sample(0), d.sample(1));
        assert_eq!(s.labels()[0], d.labels()[1]);
    }

    #[test]
    fn size_checked() {
        assert!(Dataset::new(2, 4, vec![GazeLabel::new(0.0, 0.0, 0)], vec![0.0; 7]).is_err());
        assert!(Dataset::new(2, 4, vec![GazeLabel::new(f32::NAN, 0.0, 0)], vec![0.0; 8]).is_err());
    }
}
