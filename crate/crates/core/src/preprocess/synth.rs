use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::kmeans::Point;
use crate::dataset::{Dataset, GazeLabel};
use crate::error::{Error, Result};

/// Largest label displacement the generator will produce, in pixels.
pub const MAX_JITTER_PX: f64 = 100.0;

pub const GRID_SIDE: usize = 5;

/// Synthetic fixation data on a 5×5 target grid. The EEG window encodes the
/// true target linearly through two fixed channel-time patterns; the label
/// is the target displaced inside a disk, mimicking eye-tracker error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub screen_w: f64,
    pub screen_h: f64,
    /// Distance from the screen edge to the outer grid targets.
    pub margin_px: f64,
    /// Relative frequency of the centre target (others have weight 1).
    pub center_weight: f64,
    pub jitter_radius_px: f64,
    pub n_samples: usize,
    pub participants: u32,
    pub channels: usize,
    pub timesteps: usize,
    pub noise_std: f64,
    pub signal_gain: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            screen_w: 800.0,
            screen_h: 600.0,
            margin_px: 100.0,
            center_weight: 3.0,
            jitter_radius_px: 40.0,
            n_samples: 1000,
            participants: 27,
            channels: 129,
            timesteps: 500,
            noise_std: 10.0,
            signal_gain: 20.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_samples == 0 {
            return bad("n_samples must be positive".into());
        }
        if !(0.0..=MAX_JITTER_PX).contains(&self.jitter_radius_px) {
            return bad(format!(
                "jitter_radius_px {} outside [0, {MAX_JITTER_PX}]",
                self.jitter_radius_px
            ));
        }
        if !(self.center_weight >= 1.0) {
            return bad(format!("center_weight {} must be >= 1", self.center_weight));
        }
        if !(self.screen_w > 2.0 * self.margin_px && self.screen_h > 2.0 * self.margin_px && self.margin_px >= 0.0) {
            return bad("screen must be larger than twice the margin".into());
        }
        if self.channels == 0 || self.timesteps == 0 || self.participants == 0 {
            return bad("channels, timesteps and participants must be positive".into());
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise_std must be non-negative".into());
        }
        Ok(())
    }

    /// The 25 targets, row-major from the top-left; index 12 is the centre.
    pub fn grid_targets(&self) -> Vec<Point> {
        let step_x = (self.screen_w - 2.0 * self.margin_px) / (GRID_SIDE - 1) as f64;
        let step_y = (self.screen_h - 2.0 * self.margin_px) / (GRID_SIDE - 1) as f64;
        (0..GRID_SIDE)
            .flat_map(|r| {
                (0..GRID_SIDE).map(move |c| {
                    [
                        self.margin_px + c as f64 * step_x,
                        self.margin_px + r as f64 * step_y,
                    ]
                })
            })
            .collect()
    }

    pub fn center_index(&self) -> usize {
        GRID_SIDE * GRID_SIDE / 2
    }

    /// Noise-free EEG window for a gaze target:
    /// `gain · (x̃ · P1 + ỹ · P2)` with `x̃, ỹ ∈ [-1, 1]`.
    pub fn clean_signal(&self, target: Point) -> Vec<f64> {
        let xn = (target[0] - self.screen_w / 2.0) / (self.screen_w / 2.0);
        let yn = (target[1] - self.screen_h / 2.0) / (self.screen_h / 2.0);
        let (c_n, t_n) = (self.channels as f64, self.timesteps as f64);
        let mut out = Vec::with_capacity(self.channels * self.timesteps);
        for c in 0..self.channels {
            let cf = c as f64 / c_n;
            for t in 0..self.timesteps {
                let tf = t as f64 / t_n;
                let p1 = (2.0 * PI * (3.0 * tf + cf)).sin() * (1.0 - 0.5 * cf);
                let p2 = (2.0 * PI * (5.0 * tf - 0.5 * cf)).cos() * (0.5 + 0.5 * cf);
                out.push(self.signal_gain * (xn * p1 + yn * p2));
            }
        }
        out
    }
}

/// Generated data together with the target each sample was drawn from.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub dataset: Dataset,
    pub targets: Vec<Point>,
    pub target_ids: Vec<usize>,
}

impl SyntheticData {
    /// Copy of the dataset whose labels are the true targets.
    pub fn with_true_labels(&self) -> Dataset {
        let mut d = self.dataset.clone();
        for (l, t) in d.labels_mut().iter_mut().zip(&self.targets) {
            l.x_px = t[0] as f32;
            l.y_px = t[1] as f32;
        }
        d
    }
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let grid = cfg.grid_targets();
    let center = cfg.center_index();
    let total_weight = (grid.len() - 1) as f64 + cfg.center_weight;
    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let signals: Vec<Vec<f64>> = grid.iter().map(|t| cfg.clean_signal(*t)).collect();

    let n = cfg.n_samples;
    let per_sample = cfg.channels * cfg.timesteps;
    let mut labels = Vec::with_capacity(n);
    let mut eeg = Vec::with_capacity(n * per_sample);
    let mut targets = Vec::with_capacity(n);
    let mut target_ids = Vec::with_capacity(n);
    for i in 0..n {
        let mut r = rng.gen::<f64>() * total_weight;
        let mut id = grid.len() - 1;
        for j in 0..grid.len() {
            let w = if j == center { cfg.center_weight } else { 1.0 };
            if r < w {
                id = j;
                break;
            }
            r -= w;
        }
        let t = grid[id];
        let radius = cfg.jitter_radius_px * rng.gen::<f64>().sqrt();
        let angle = 2.0 * PI * rng.gen::<f64>();
        let x = (t[0] + radius * angle.cos()).clamp(0.0, cfg.screen_w);
        let y = (t[1] + radius * angle.sin()).clamp(0.0, cfg.screen_h);
        let participant = (i as u64 * cfg.participants as u64 / n as u64) as u32;
        labels.push(GazeLabel::new(x as f32, y as f32, participant));
        if cfg.noise_std > 0.0 {
            eeg.extend(signals[id].iter().map(|s| (s + noise.sample(&mut rng)) as f32));
        } else {
            eeg.extend(signals[id].iter().map(|&s| s as f32));
        }
        targets.push(t);
        target_ids.push(id);
    }
    Ok(SyntheticData {
        dataset: Dataset::new(cfg.channels, cfg.timesteps, labels, eeg)?,
        targets,
        target_ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            n_samples: 200,
            channels: 4,
            timesteps: 10,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn zero_jitter_lands_on_targets() {
        let cfg = SynthConfig {
            jitter_radius_px: 0.0,
            ..small(1)
        };
        let data = generate_synthetic(&cfg).unwrap();
        let grid = cfg.grid_targets();
        for l in data.dataset.labels() {
            assert!(grid.iter().any(|g| g[0] as f32 == l.x_px && g[1] as f32 == l.y_px));
        }
    }

    #[test]
    fn jitter_bounded() {
        let cfg = small(2);
        let data = generate_synthetic(&cfg).unwrap();
        for (l, t) in data.dataset.labels().iter().zip(&data.targets) {
            let d = ((l.x_px as f64 - t[0]).powi(2) + (l.y_px as f64 - t[1]).powi(2)).sqrt();
            assert!(d <= cfg.jitter_radius_px + 1e-4);
        }
    }

    #[test]
    fn noiseless_signal_depends_only_on_target() {
        let cfg = SynthConfig {
            noise_std: 0.0,
            ..small(3)
        };
        let data = generate_synthetic(&cfg).unwrap();
        let ids = &data.target_ids;
        let (a, b) = (0..ids.len())
            .flat_map(|i| (i + 1..ids.len()).map(move |j| (i, j)))
            .find(|&(i, j)| ids[i] == ids[j])
            .unwrap();
        assert_eq!(data.dataset.sample(a), data.dataset.sample(b));
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_synthetic(&small(9)).unwrap();
        let b = generate_synthetic(&small(9)).unwrap();
        let c = generate_synthetic(&small(10)).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_ne!(a.dataset, c.dataset);
    }

    #[test]
    fn invalid_configs() {
        assert!(generate_synthetic(&SynthConfig { n_samples: 0, ..small(0) }).is_err());
        assert!(generate_synthetic(&SynthConfig { jitter_radius_px: 101.0, ..small(0) }).is_err());
        assert!(generate_synthetic(&SynthConfig { center_weight: 0.5, ..small(0) }).is_err());
    }

    #[test]
    fn grid_geometry() {
        let g = SynthConfig::default().grid_targets();
        assert_eq!(g.len(), 25);
        assert_eq!(g[12], [400.0, 300.0]);
        assert_eq!(g[0], [100.0, 100.0]);
        assert_eq!(g[24], [700.0, 500.0]);
    }
}
