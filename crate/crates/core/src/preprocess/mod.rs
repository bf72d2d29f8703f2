//! Label reconciliation by k-means, participant-disjoint splits and the
//! synthetic Large-Grid generator.

mod kmeans;
mod split;
mod synth;

pub use kmeans::{kmeans_fit, relabel, CentroidSet, KMeansInit, KMeansOptions, Point};
pub use split::{split_counts, split_dataset};
pub use synth::{generate_synthetic, SynthConfig, SyntheticData, GRID_SIDE, MAX_JITTER_PX};

use crate::dataset::Dataset;
use crate::error::Result;

/// Default number of gaze clusters (one per grid target).
pub const DEFAULT_CLUSTERS: usize = 25;

/// Fits `k` clusters to the labels of `fit_on`.
///
/// When `known_targets` holds exactly `k` positions they seed the fit and
/// each fitted centre is then snapped to its nearest known target, so that
/// relabeled points sit exactly on stimulus positions. Otherwise k-means++
/// seeding with `seed` is used and the fitted means are kept.
pub fn fit_label_clusters(
    fit_on: &Dataset,
    k: usize,
    known_targets: Option<&[Point]>,
    seed: u64,
) -> Result<CentroidSet> {
    let points = fit_on.positions();
    match known_targets {
        Some(t) if t.len() == k => {
            let mut fit = kmeans_fit(&points, k, &KMeansOptions::new(KMeansInit::Given(t.to_vec())))?;
            fit.snap_to(t)?;
            Ok(fit)
        }
        _ => kmeans_fit(&points, k, &KMeansOptions::new(KMeansInit::PlusPlus { seed })),
    }
}
