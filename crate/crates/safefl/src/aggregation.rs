//! Server-side aggregation rules.
//!
//! FedAvg plus the coordinate-wise robust rules (median, trimmed mean),
//! Krum's representative-selection rule, and the loss-weighted average used
//! by the median-loss detector.

use crate::error::{Error, Result};
use crate::fl::ModelVector;

/// Aggregation rule selected by configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregator {
    FedAvg,
    Median,
    /// Drops the `k` largest and `k` smallest values per coordinate.
    TrimmedMean {
        k: usize,
    },
    /// Returns the update closest to its `n - k - 2` nearest neighbours.
    Krum {
        k: usize,
    },
}

impl Aggregator {
    /// Applies the rule. The trim and neighbour parameters are sized for
    /// the full cohort; when the rule runs over a filtered subset (the
    /// accepted cluster, or a partial selection) they are clamped to the
    /// largest value the subset supports, so the rule stays total.
    pub fn aggregate(&self, updates: &[ModelVector]) -> Result<ModelVector> {
        let n = updates.len();
        match *self {
            Aggregator::FedAvg => fedavg(updates),
            Aggregator::Median => coordinate_median(updates),
            Aggregator::TrimmedMean { k } => trimmed_mean(updates, k.min(n.saturating_sub(1) / 2)),
            Aggregator::Krum { k } => {
                if n < 3 {
                    // Too few for a neighbour set of any size; the single
                    // closest-to-the-rest notion degenerates to the mean.
                    return fedavg(updates);
                }
                krum(updates, k.min(n - 3)).map(|(v, _)| v)
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Aggregator::FedAvg => "fedavg",
            Aggregator::Median => "median",
            Aggregator::TrimmedMean { .. } => "trimmed_mean",
            Aggregator::Krum { .. } => "krum",
        }
    }
}

fn check_nonempty_same_dim(updates: &[ModelVector]) -> Result<usize> {
    let first = updates.first().ok_or(Error::EmptyUpdates)?;
    let d = first.dim();
    for u in updates {
        if u.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: u.dim(),
            });
        }
    }
    Ok(d)
}

/// Coordinate-wise arithmetic mean.
pub fn fedavg(updates: &[ModelVector]) -> Result<ModelVector> {
    let d = check_nonempty_same_dim(updates)?;
    let inv = 1.0 / updates.len() as f64;
    let mut out = vec![0.0; d];
    for u in updates {
        for (o, v) in out.iter_mut().zip(u.as_slice()) {
            *o += v;
        }
    }
    for o in out.iter_mut() {
        *o *= inv;
    }
    Ok(ModelVector::from_vec(out))
}

/// Coordinate-wise median; for an even count the midpoint of the two
/// central values.
pub fn coordinate_median(updates: &[ModelVector]) -> Result<ModelVector> {
    let d = check_nonempty_same_dim(updates)?;
    let mut out = vec![0.0; d];
    let mut column = vec![0.0; updates.len()];
    for (j, slot) in out.iter_mut().enumerate() {
        for (c, u) in column.iter_mut().zip(updates) {
            *c = u.as_slice()[j];
        }
        *slot = median_of(&mut column);
    }
    Ok(ModelVector::from_vec(out))
}

/// Median of a scratch slice (sorted in place); midpoint rule for even n.
pub fn median_of(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Removes the `k` largest and `k` smallest values per coordinate and
/// averages the remaining `n - 2k`.
pub fn trimmed_mean(updates: &[ModelVector], k: usize) -> Result<ModelVector> {
    let d = check_nonempty_same_dim(updates)?;
    let n = updates.len();
    if n <= 2 * k {
        return Err(Error::invalid(format!(
            "trimmed mean needs n > 2k ({} <= {})",
            n,
            2 * k
        )));
    }
    let mut out = vec![0.0; d];
    let mut column = vec![0.0; n];
    for (j, slot) in out.iter_mut().enumerate() {
        for (c, u) in column.iter_mut().zip(updates) {
            *c = u.as_slice()[j];
        }
        column.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
        let kept = &column[k..n - k];
        *slot = kept.iter().sum::<f64>() / kept.len() as f64;
    }
    Ok(ModelVector::from_vec(out))
}

/// Krum: scores each update by the sum of squared distances to its
/// `n - k - 2` nearest other updates and returns the lowest-scoring one
/// (ties broken by lowest index). Also returns the chosen index.
pub fn krum(updates: &[ModelVector], k: usize) -> Result<(ModelVector, usize)> {
    check_nonempty_same_dim(updates)?;
    let n = updates.len();
    if n < k + 3 {
        return Err(Error::invalid(format!(
            "krum needs n >= k + 3 ({} < {})",
            n,
            k + 3
        )));
    }
    let neighbours = n - k - 2;
    let mut best: Option<(f64, usize)> = None;
    for i in 0..n {
        let mut dists: Vec<f64> = (0..n)
            .filter(|&j| j != i)
            .map(|j| updates[i].squared_distance(&updates[j]))
            .collect();
        dists.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
        let score: f64 = dists[..neighbours].iter().sum();
        let better = match best {
            None => true,
            Some((s, _)) => score < s,
        };
        if better {
            best = Some((score, i));
        }
    }
    let (_, idx) = best.expect("nonempty update list");
    Ok((updates[idx].clone(), idx))
}

/// Weighted sum of updates; weights must be nonnegative but are not
/// required to sum to one.
pub fn weighted_average(updates: &[ModelVector], weights: &[f64]) -> Result<ModelVector> {
    let d = check_nonempty_same_dim(updates)?;
    if weights.len() != updates.len() {
        return Err(Error::invalid(format!(
            "{} weights for {} updates",
            weights.len(),
            updates.len()
        )));
    }
    if let Some(w) = weights.iter().find(|&&w| w.is_nan() || w < 0.0) {
        return Err(Error::invalid(format!("negative or NaN weight {}", w)));
    }
    let mut out = vec![0.0; d];
    for (u, &w) in updates.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        for (o, v) in out.iter_mut().zip(u.as_slice()) {
            *o += w * v;
        }
    }
    Ok(ModelVector::from_vec(out))
}
