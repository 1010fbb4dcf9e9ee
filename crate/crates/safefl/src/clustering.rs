//! Clustering utilities for the detection pipeline: K-means over model
//! vectors, flat-kernel mean-shift over 1-D losses, and DBSCAN over 1-D
//! losses.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::rng_from;

/// Assignment of points to clusters plus the index of the largest cluster.
#[derive(Debug, Clone)]
pub struct ClusterResult {
    assignments: Vec<usize>,
    n_clusters: usize,
    largest: usize,
}

impl ClusterResult {
    fn new(assignments: Vec<usize>, n_clusters: usize, largest: usize) -> Self {
        ClusterResult {
            assignments,
            n_clusters,
            largest,
        }
    }

    pub fn assignment(&self, point: usize) -> usize {
        self.assignments[point]
    }

    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }

    pub fn n_clusters(&self) -> usize {
        self.n_clusters
    }

    pub fn largest(&self) -> usize {
        self.largest
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] == cluster)
            .collect()
    }

    pub fn largest_members(&self) -> Vec<usize> {
        self.members(self.largest)
    }

    fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.n_clusters];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

/// K-means with k-means++ seeding and Lloyd iterations, run to an
/// assignment fixpoint or 100 iterations. Size ties for the largest
/// cluster break toward the cluster whose members lie nearer the
/// coordinate-wise median of all points.
pub fn kmeans(points: &[&[f64]], k: usize, seed: u64) -> Result<ClusterResult> {
    if k == 0 {
        return Err(Error::invalid("kmeans requires k >= 1"));
    }
    if points.len() < k {
        return Err(Error::invalid(format!(
            "kmeans requires at least k points ({} < {})",
            points.len(),
            k
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: 0,
        });
    }
    let mut rng = rng_from(seed, &[]);

    // k-means++ seeding.
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.gen_range(0..points.len())].to_vec());
    while centroids.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| {
                centroids
                    .iter()
                    .map(|c| sq_dist(p, c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // All remaining mass at distance zero; any point works.
            rng.gen_range(0..points.len())
        } else {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        };
        centroids.push(points[next].to_vec());
    }

    let mut assignments = vec![0usize; points.len()];
    for _ in 0..100 {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, centroid) in centroids.iter().enumerate() {
                let d = sq_dist(p, centroid);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if assignments[i] != best {
                assignments[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for (c, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<usize> = (0..points.len()).filter(|&i| assignments[i] == c).collect();
            if members.is_empty() {
                continue; // keep the previous centroid
            }
            for v in centroid.iter_mut() {
                *v = 0.0;
            }
            for &i in &members {
                for (s, &v) in centroid.iter_mut().zip(points[i]) {
                    *s += v;
                }
            }
            for v in centroid.iter_mut() {
                *v /= members.len() as f64;
            }
        }
    }

    let result = ClusterResult::new(assignments, k, 0);
    let largest = pick_largest_by_median(points, &result);
    Ok(ClusterResult { largest, ..result })
}

/// Largest cluster; ties break to the cluster with the smaller mean
/// distance to the coordinate-wise median of all points.
fn pick_largest_by_median(points: &[&[f64]], clusters: &ClusterResult) -> usize {
    let sizes = clusters.sizes();
    let max_size = *sizes.iter().max().expect("at least one cluster");
    let candidates: Vec<usize> = (0..sizes.len()).filter(|&c| sizes[c] == max_size).collect();
    if candidates.len() == 1 {
        return candidates[0];
    }
    let dim = points[0].len();
    let mut median = vec![0.0; dim];
    let mut column: Vec<f64> = Vec::with_capacity(points.len());
    for (j, slot) in median.iter_mut().enumerate() {
        column.clear();
        column.extend(points.iter().map(|p| p[j]));
        *slot = crate::aggregation::median_of(&mut column);
    }
    candidates
        .into_iter()
        .min_by(|&a, &b| {
            let da = mean_dist_to(points, &clusters.members(a), &median);
            let db = mean_dist_to(points, &clusters.members(b), &median);
            da.partial_cmp(&db).expect("finite distances")
        })
        .expect("nonempty candidate list")
}

fn mean_dist_to(points: &[&[f64]], members: &[usize], target: &[f64]) -> f64 {
    if members.is_empty() {
        return f64::INFINITY;
    }
    members
        .iter()
        .map(|&i| sq_dist(points[i], target).sqrt())
        .sum::<f64>()
        / members.len() as f64
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Flat-kernel mean-shift on 1-D values. Each point ascends to the mean of
/// its bandwidth window until the window membership stabilises; modes
/// within `bandwidth / 2` of each other are merged into one cluster.
/// With `bandwidth = None` the bandwidth defaults to the median absolute
/// pairwise difference, floored at 1e-9. Ties for the largest cluster
/// break toward the lower mean value.
pub fn meanshift(values: &[f64], bandwidth: Option<f64>) -> Result<ClusterResult> {
    if values.is_empty() {
        return Err(Error::EmptyUpdates);
    }
    let h = match bandwidth {
        Some(h) if h > 0.0 => h,
        Some(_) => return Err(Error::invalid("bandwidth must be positive")),
        None => default_bandwidth(values),
    };

    let mut modes = Vec::with_capacity(values.len());
    for &start in values {
        let mut x = start;
        let mut window: Vec<usize> = Vec::new();
        for _ in 0..300 {
            let next_window: Vec<usize> = (0..values.len())
                .filter(|&j| (values[j] - x).abs() <= h)
                .collect();
            let mean =
                next_window.iter().map(|&j| values[j]).sum::<f64>() / next_window.len() as f64;
            let stable = next_window == window;
            window = next_window;
            x = mean;
            if stable {
                break;
            }
        }
        modes.push(x);
    }

    // Merge modes within h/2 (union of chains).
    let mut order: Vec<usize> = (0..modes.len()).collect();
    order.sort_by(|&a, &b| modes[a].partial_cmp(&modes[b]).expect("finite modes"));
    let mut assignments = vec![0usize; values.len()];
    let mut n_clusters = 0usize;
    let mut prev_mode = f64::NEG_INFINITY;
    for &i in &order {
        if n_clusters == 0 || modes[i] - prev_mode > h / 2.0 {
            n_clusters += 1;
        }
        assignments[i] = n_clusters - 1;
        prev_mode = modes[i];
    }

    let result = ClusterResult::new(assignments, n_clusters, 0);
    let sizes = result.sizes();
    let max_size = *sizes.iter().max().expect("at least one cluster");
    let largest = (0..n_clusters)
        .filter(|&c| sizes[c] == max_size)
        .min_by(|&a, &b| {
            let ma = mean_value(values, &result.members(a));
            let mb = mean_value(values, &result.members(b));
            ma.partial_cmp(&mb).expect("finite means")
        })
        .expect("nonempty cluster set");
    Ok(ClusterResult { largest, ..result })
}

/// Median absolute pairwise difference, floored at 1e-9.
pub fn default_bandwidth(values: &[f64]) -> f64 {
    let mut diffs = Vec::with_capacity(values.len() * (values.len() - 1) / 2);
    for i in 0..values.len() {
        for j in (i + 1)..values.len() {
            diffs.push((values[i] - values[j]).abs());
        }
    }
    if diffs.is_empty() {
        return 1e-9;
    }
    crate::aggregation::median_of(&mut diffs).max(1e-9)
}

fn mean_value(values: &[f64], members: &[usize]) -> f64 {
    members.iter().map(|&i| values[i]).sum::<f64>() / members.len() as f64
}

/// DBSCAN label for one point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DbscanLabel {
    Cluster(usize),
    Noise,
}

/// Density clustering on 1-D values: a point is core if at least `min_pts`
/// points (itself included) lie within `eps`; clusters are the connected
/// components of core points plus their reachable border points.
pub fn dbscan(values: &[f64], eps: f64, min_pts: usize) -> Result<Vec<DbscanLabel>> {
    if values.is_empty() {
        return Err(Error::EmptyUpdates);
    }
    if eps.is_nan() || eps <= 0.0 || min_pts == 0 {
        return Err(Error::invalid("dbscan requires eps > 0 and min_pts >= 1"));
    }
    let n = values.len();
    let neighbours: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| (values[i] - values[j]).abs() <= eps)
                .collect()
        })
        .collect();
    let core: Vec<bool> = neighbours.iter().map(|nb| nb.len() >= min_pts).collect();

    let mut labels = vec![None::<DbscanLabel>; n];
    let mut next_cluster = 0usize;
    for i in 0..n {
        if labels[i].is_some() || !core[i] {
            continue;
        }
        // Grow a new cluster from this core point.
        let cluster = next_cluster;
        next_cluster += 1;
        let mut stack = vec![i];
        labels[i] = Some(DbscanLabel::Cluster(cluster));
        while let Some(p) = stack.pop() {
            for &q in &neighbours[p] {
                match labels[q] {
                    Some(DbscanLabel::Cluster(_)) => {}
                    Some(DbscanLabel::Noise) | None => {
                        labels[q] = Some(DbscanLabel::Cluster(cluster));
                        if core[q] {
                            stack.push(q);
                        }
                    }
                }
            }
        }
    }
    Ok(labels
        .into_iter()
        .map(|l| l.unwrap_or(DbscanLabel::Noise))
        .collect())
}
