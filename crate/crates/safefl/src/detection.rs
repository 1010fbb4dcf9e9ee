//! The detection core: synthetic-dataset generation by trajectory matching
//! and the two loss-based client filters.
//!
//! After the server has collected a filtered trajectory of global models,
//! it distills the trajectory into a small learnable dataset: features and
//! soft labels are optimized so that a few SGD steps on them reproduce the
//! movement between two trajectory models. Client models are then scored
//! by their loss on that dataset; benign models score low and coherent,
//! poisoned models stand out.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::aggregation::{median_of, weighted_average, Aggregator};
use crate::clustering::meanshift;
use crate::error::{Error, Result};
use crate::fl::{ModelVector, Trajectory, Verdict};
use crate::graph::Graph;
use crate::model::{softmax_rows_flat, ModelFamily};
use crate::rng::rng_from;
use crate::tensor::Tensor;

/// Learnable synthetic dataset: features `x` (`size x features`) and raw
/// soft-label logits `y` (`size x classes`). Labels are row-softmaxed
/// whenever they are used as targets.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub size: usize,
    pub features: usize,
    pub classes: usize,
}

impl SyntheticDataset {
    pub fn new(
        x: Vec<f64>,
        y: Vec<f64>,
        size: usize,
        features: usize,
        classes: usize,
    ) -> Result<Self> {
        if size == 0 {
            return Err(Error::invalid("synthetic dataset must be non-empty"));
        }
        if x.len() != size * features || y.len() != size * classes {
            return Err(Error::ShapeMismatch(format!(
                "synthetic dataset: x has {} values, y has {} ({} rows, {} features, {} classes)",
                x.len(),
                y.len(),
                size,
                features,
                classes
            )));
        }
        if !x.iter().chain(y.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("synthetic dataset"));
        }
        Ok(SyntheticDataset {
            x,
            y,
            size,
            features,
            classes,
        })
    }

    /// Row-softmaxed labels, ready to be used as cross-entropy targets.
    pub fn soft_targets(&self) -> Vec<f64> {
        softmax_rows_flat(&self.y, self.size, self.classes)
    }
}

/// Knobs of the synthetic-dataset generator.
#[derive(Debug, Clone, Copy)]
pub struct SynGenConfig {
    /// Outer optimization iterations.
    pub iterations: usize,
    /// Outer learning rate applied to features and labels.
    pub outer_lr: f64,
    /// Inner SGD steps unrolled per iteration.
    pub inner_steps: usize,
    /// Learning rate of the unrolled inner SGD.
    pub inner_lr: f64,
    /// Number of synthetic rows.
    pub size: usize,
    pub seed: u64,
}

impl SynGenConfig {
    fn validate(&self, trajectory_len: usize) -> Result<()> {
        if self.inner_steps == 0 {
            return Err(Error::invalid("syngen requires inner_steps >= 1"));
        }
        if trajectory_len <= self.inner_steps {
            return Err(Error::invalid(format!(
                "trajectory length {} must exceed inner_steps {}",
                trajectory_len, self.inner_steps
            )));
        }
        if self.size == 0 {
            return Err(Error::invalid("syngen requires size >= 1"));
        }
        if self.outer_lr <= 0.0
            || self.inner_lr <= 0.0
            || self.outer_lr.is_nan()
            || self.inner_lr.is_nan()
        {
            return Err(Error::invalid("syngen learning rates must be positive"));
        }
        Ok(())
    }
}

/// Initial synthetic dataset: standard-normal features and one-hot label
/// logits (classes cycled over the rows) with small jitter.
fn init_synthetic(family: &ModelFamily, cfg: &SynGenConfig) -> SyntheticDataset {
    let mut rng = rng_from(cfg.seed, &[]);
    let f = family.features();
    let m = family.classes();
    let x: Vec<f64> = (0..cfg.size * f)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let mut y = vec![0.0; cfg.size * m];
    for r in 0..cfg.size {
        y[r * m + (r % m)] = 1.0;
    }
    for v in y.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v += 0.01 * z;
    }
    SyntheticDataset::new(x, y, cfg.size, f, m).expect("valid construction")
}

/// Distills `trajectory` into a synthetic dataset. Each iteration samples a
/// start round `alpha`, unrolls `inner_steps` SGD steps on the current
/// synthetic data from the model at `alpha`, and descends the squared
/// distance between the unrolled endpoint and the model at
/// `alpha + inner_steps` with respect to the features and labels.
/// Returns the dataset and the per-iteration objective log.
pub fn syngen(
    trajectory: &Trajectory,
    family: &ModelFamily,
    cfg: &SynGenConfig,
) -> Result<(SyntheticDataset, Vec<f64>)> {
    cfg.validate(trajectory.len())?;
    if trajectory.dim() != family.dim() {
        return Err(Error::DimensionMismatch {
            expected: family.dim(),
            got: trajectory.dim(),
        });
    }
    let mut dsyn = init_synthetic(family, cfg);
    let mut rng = rng_from(cfg.seed, &[1]);
    let mut log = Vec::with_capacity(cfg.iterations);
    let max_alpha = trajectory.len() - cfg.inner_steps;

    for _ in 0..cfg.iterations {
        let alpha = rng.gen_range(1..=max_alpha);
        let start = trajectory.model(alpha);
        let target = trajectory.model(alpha + cfg.inner_steps);

        let mut g = Graph::new();
        let x = g.leaf(
            Tensor::matrix(dsyn.size, dsyn.features, dsyn.x.clone())?,
            true,
        );
        let y = g.leaf(
            Tensor::matrix(dsyn.size, dsyn.classes, dsyn.y.clone())?,
            true,
        );
        let targets = g.softmax_rows(y)?;
        let unrolled = family.unroll_inner_sgd(
            &mut g,
            x,
            targets,
            start.as_slice(),
            cfg.inner_steps,
            cfg.inner_lr,
        )?;
        let objective = unrolled.squared_distance_to(&mut g, family, target.as_slice())?;
        log.push(g.value(objective).scalar_value());

        let grads = g.backward(objective)?;
        let gx = grads.wrt(x).expect("x requires grad");
        let gy = grads.wrt(y).expect("y requires grad");
        for (v, d) in dsyn.x.iter_mut().zip(gx.data()) {
            *v -= cfg.outer_lr * d;
        }
        for (v, d) in dsyn.y.iter_mut().zip(gy.data()) {
            *v -= cfg.outer_lr * d;
        }
    }
    Ok((dsyn, log))
}

/// Mean soft-label cross-entropy of every client model on the synthetic
/// dataset.
pub fn eval_losses(
    updates: &[ModelVector],
    dsyn: &SyntheticDataset,
    family: &ModelFamily,
) -> Result<Vec<f64>> {
    let targets = dsyn.soft_targets();
    updates
        .iter()
        .map(|u| family.soft_ce_loss(u.as_slice(), &dsyn.x, &targets, dsyn.size))
        .collect()
}

/// Weight normalization used by the median-loss filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MlWeightMode {
    /// Inverse losses renormalized over the kept clients, so the weights
    /// sum to one and the aggregate preserves model scale.
    Renormalized,
    /// Inverse losses divided by the sum of inverse losses of all clients;
    /// kept weights then sum to less than one.
    LiteralEq4,
}

/// Result of a detection round.
#[derive(Debug, Clone)]
pub struct DetectionOutcome {
    pub verdicts: Vec<Verdict>,
    /// Present only for the median-loss filter.
    pub weights: Option<Vec<f64>>,
    pub aggregate: ModelVector,
}

/// Median-loss filter: clients at or below the median loss are kept and
/// aggregated by inverse-loss weighted average; the rest are flagged for
/// this round.
pub fn safefl_ml(
    updates: &[ModelVector],
    losses: &[f64],
    mode: MlWeightMode,
) -> Result<DetectionOutcome> {
    if updates.is_empty() {
        return Err(Error::EmptyUpdates);
    }
    if updates.len() != losses.len() {
        return Err(Error::invalid(format!(
            "{} losses for {} updates",
            losses.len(),
            updates.len()
        )));
    }
    let mut sorted = losses.to_vec();
    let median = median_of(&mut sorted);
    let verdicts: Vec<Verdict> = losses
        .iter()
        .map(|&l| {
            if l <= median {
                Verdict::Benign
            } else {
                Verdict::Malicious
            }
        })
        .collect();

    // Losses are floored before inversion so a perfect-fit model cannot
    // produce an infinite weight.
    let inv = |l: f64| 1.0 / l.max(1e-12);
    let denominator = match mode {
        MlWeightMode::Renormalized => verdicts
            .iter()
            .zip(losses)
            .filter(|(v, _)| **v == Verdict::Benign)
            .map(|(_, &l)| inv(l))
            .sum::<f64>(),
        MlWeightMode::LiteralEq4 => losses.iter().map(|&l| inv(l)).sum::<f64>(),
    };
    let weights: Vec<f64> = verdicts
        .iter()
        .zip(losses)
        .map(|(v, &l)| {
            if *v == Verdict::Benign {
                inv(l) / denominator
            } else {
                0.0
            }
        })
        .collect();
    let aggregate = weighted_average(updates, &weights)?;
    Ok(DetectionOutcome {
        verdicts,
        weights: Some(weights),
        aggregate,
    })
}

/// Cluster-loss filter: mean-shift groups the losses, the largest cluster
/// is kept, and the kept updates are combined by the configured rule.
pub fn safefl_cl(
    updates: &[ModelVector],
    losses: &[f64],
    ar: Aggregator,
) -> Result<DetectionOutcome> {
    if updates.is_empty() {
        return Err(Error::EmptyUpdates);
    }
    if updates.len() != losses.len() {
        return Err(Error::invalid(format!(
            "{} losses for {} updates",
            losses.len(),
            updates.len()
        )));
    }
    let clusters = meanshift(losses, None)?;
    let kept = clusters.largest_members();
    let verdicts: Vec<Verdict> = (0..updates.len())
        .map(|i| {
            if clusters.assignment(i) == clusters.largest() {
                Verdict::Benign
            } else {
                Verdict::Malicious
            }
        })
        .collect();
    let kept_updates: Vec<ModelVector> = kept.iter().map(|&i| updates[i].clone()).collect();
    let aggregate = ar.aggregate(&kept_updates)?;
    Ok(DetectionOutcome {
        verdicts,
        weights: None,
        aggregate,
    })
}
