use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::Dataset;
use crate::error::{Error, Result};

pub type Point = [f64; 2];

#[derive(Debug, Clone, PartialEq)]
pub enum KMeansInit {
    /// Start from these centres (one per cluster).
    Given(Vec<Point>),
    /// k-means++ seeding.
    PlusPlus { seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansOptions {
    pub max_iter: usize,
    /// Stop once no centre moves farther than this (pixels).
    pub tol: f64,
    pub init: KMeansInit,
}

impl KMeansOptions {
    pub fn new(init: KMeansInit) -> Self {
        Self {
            max_iter: 300,
            tol: 1e-6,
            init,
        }
    }
}

/// Fitted cluster centres.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidSet {
    pub centroids: Vec<Point>,
    /// Sum of squared distances from each point to its assigned centre.
    pub inertia: f64,
    pub iterations_run: usize,
    /// Inertia after every assignment step, ending with the final one.
    pub inertia_trace: Vec<f64>,
    /// Final cluster of each input point.
    pub assignments: Vec<usize>,
}

impl CentroidSet {
    /// Centres at fixed positions, e.g. the known stimulus targets.
    pub fn from_centers(centroids: Vec<Point>) -> Result<Self> {
        if centroids.is_empty() {
            return Err(Error::InvalidArgument("at least one centroid required".into()));
        }
        Ok(Self {
            centroids,
            inertia: 0.0,
            iterations_run: 0,
            inertia_trace: Vec::new(),
            assignments: Vec::new(),
        })
    }

    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    /// Nearest centre by squared Euclidean distance; ties go to the lower
    /// index.
    pub fn nearest(&self, p: Point) -> usize {
        nearest(&self.centroids, p).0
    }

    /// Replaces each centre with the closest of `targets`.
    pub fn snap_to(&mut self, targets: &[Point]) -> Result<()> {
        if targets.is_empty() {
            return Err(Error::InvalidArgument("no targets to snap to".into()));
        }
        for c in &mut self.centroids {
            *c = targets[nearest(targets, *c).0];
        }
        Ok(())
    }
}

pub(crate) fn dist2(a: Point, b: Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

fn nearest(centroids: &[Point], p: Point) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, &c) in centroids.iter().enumerate() {
        let d = dist2(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign(points: &[Point], centroids: &[Point], labels: &mut [usize], dists: &mut [f64]) -> f64 {
    let mut inertia = 0.0;
    for ((p, l), d) in points.iter().zip(labels.iter_mut()).zip(dists.iter_mut()) {
        let (j, dd) = nearest(centroids, *p);
        *l = j;
        *d = dd;
        inertia += dd;
    }
    inertia
}

fn plus_plus(points: &[Point], k: usize, seed: u64) -> Vec<Point> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![points[rng.gen_range(0..points.len())]];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(*p, centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut pick = points.len() - 1;
            for (i, w) in d2.iter().enumerate() {
                if r < *w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        } else {
            rng.gen_range(0..points.len())
        };
        let c = points[next];
        centers.push(c);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(*p, c));
        }
    }
    centers
}

/// Lloyd's algorithm on 2-D points.
///
/// Each iteration assigns points to their nearest centre and moves every
/// centre to the mean of its points. A centre left without points is
/// re-seeded at the point farthest from its current centre (each such point
/// used once per iteration). Runs `O(n·k)` per iteration.
pub fn kmeans_fit(points: &[Point], k: usize, opts: &KMeansOptions) -> Result<CentroidSet> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    if points.len() < k {
        return Err(Error::InvalidArgument(format!(
            "need at least k = {k} points, got {}",
            points.len()
        )));
    }
    if !(opts.tol >= 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be non-negative, got {}", opts.tol)));
    }
    if points.iter().any(|p| !(p[0].is_finite() && p[1].is_finite())) {
        return Err(Error::InvalidArgument("points must be finite".into()));
    }
    let mut centroids = match &opts.init {
        KMeansInit::Given(c) if c.len() == k => c.clone(),
        KMeansInit::Given(c) => {
            return Err(Error::InvalidArgument(format!("{} initial centres for k = {k}", c.len())))
        }
        KMeansInit::PlusPlus { seed } => plus_plus(points, k, *seed),
    };

    let n = points.len();
    let mut labels = vec![0usize; n];
    let mut dists = vec![0.0; n];
    let mut trace = Vec::new();
    let mut iterations = 0;
    while iterations < opts.max_iter {
        trace.push(assign(points, &centroids, &mut labels, &mut dists));
        let mut sums = vec![[0.0f64; 2]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            sums[l][0] += p[0];
            sums[l][1] += p[1];
            counts[l] += 1;
        }
        let mut taken = vec![false; n];
        let mut shift: f64 = 0.0;
        for j in 0..k {
            let next = if counts[j] > 0 {
                [sums[j][0] / counts[j] as f64, sums[j][1] / counts[j] as f64]
            } else {
                let mut far = None;
                for i in 0..n {
                    if !taken[i] && far.map_or(true, |f: usize| dists[i] > dists[f]) {
                        far = Some(i);
                    }
                }
                let i = far.expect("n >= k leaves a point for every empty cluster");
                taken[i] = true;
                points[i]
            };
            shift = shift.max(dist2(next, centroids[j]).sqrt());
            centroids[j] = next;
        }
        iterations += 1;
        if shift <= opts.tol {
            break;
        }
    }
    let inertia = assign(points, &centroids, &mut labels, &mut dists);
    trace.push(inertia);
    Ok(CentroidSet {
        centroids,
        inertia,
        iterations_run: iterations,
        inertia_trace: trace,
        assignments: labels,
    })
}

/// Moves every label onto its nearest centre and records the cluster id.
/// The previous `orig_*` provenance fields are left untouched, so applying
/// the same centres twice changes nothing.
pub fn relabel(dataset: &Dataset, centroids: &CentroidSet) -> Dataset {
    let mut out = dataset.clone();
    for label in out.labels_mut() {
        let j = centroids.nearest(label.position());
        let c = centroids.centroids[j];
        label.x_px = c[0] as f32;
        label.y_px = c[1] as f32;
        label.cluster_id = Some(j as u32);
    }
    out
}
