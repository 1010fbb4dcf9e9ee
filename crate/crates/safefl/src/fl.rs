//! FL primitives: the exchanged model vector, client state, local SGD,
//! client-side Gaussian noise, and filtered trajectory collection.

use rand_distr::{Distribution, StandardNormal};

use crate::aggregation::Aggregator;
use crate::clustering::kmeans;
use crate::data::{sample_batch, Dataset};
use crate::error::{Error, Result};
use crate::model::ModelFamily;
use crate::rng::{rng_from, stream};

/// Flat parameter vector of the shared model; the unit exchanged between
/// clients and server.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelVector {
    params: Vec<f64>,
}

impl ModelVector {
    /// Checked constructor for externally produced values.
    pub fn new(params: Vec<f64>) -> Result<Self> {
        if params.is_empty() {
            return Err(Error::invalid("model vector must be non-empty"));
        }
        if !params.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("model vector"));
        }
        Ok(ModelVector { params })
    }

    pub fn from_vec(params: Vec<f64>) -> Self {
        ModelVector { params }
    }

    pub fn zeros(dim: usize) -> Self {
        ModelVector {
            params: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.params.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.params
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.params
    }

    pub fn squared_distance(&self, other: &ModelVector) -> f64 {
        self.params
            .iter()
            .zip(&other.params)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.params.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `self + factor * other`
    pub fn add_scaled(&self, other: &ModelVector, factor: f64) -> ModelVector {
        ModelVector {
            params: self
                .params
                .iter()
                .zip(&other.params)
                .map(|(a, b)| a + factor * b)
                .collect(),
        }
    }

    pub fn minus(&self, other: &ModelVector) -> ModelVector {
        self.add_scaled(other, -1.0)
    }
}

/// Per-client verdict for one round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Benign,
    Malicious,
    NotEvaluated,
}

impl Verdict {
    pub fn code(&self) -> char {
        match self {
            Verdict::Benign => 'b',
            Verdict::Malicious => 'm',
            Verdict::NotEvaluated => '-',
        }
    }
}

/// One client with its private shard. `is_malicious` is ground truth used
/// only by the attack hook and the metrics, never by the server.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub dataset: Dataset,
    pub is_malicious: bool,
    pub rng_seed: u64,
}

/// Ordered list of filtered global models collected over the first rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    models: Vec<ModelVector>,
}

impl Trajectory {
    pub fn new(first: ModelVector) -> Self {
        Trajectory {
            models: vec![first],
        }
    }

    pub fn from_models(models: Vec<ModelVector>) -> Result<Self> {
        let first = models.first().ok_or(Error::EmptyUpdates)?;
        let d = first.dim();
        if models.iter().any(|m| m.dim() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: 0,
            });
        }
        Ok(Trajectory { models })
    }

    pub fn push(&mut self, model: ModelVector) {
        debug_assert_eq!(model.dim(), self.models[0].dim());
        self.models.push(model);
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.models[0].dim()
    }

    /// 1-based round index into the trajectory.
    pub fn model(&self, round: usize) -> &ModelVector {
        &self.models[round - 1]
    }

    pub fn models(&self) -> &[ModelVector] {
        &self.models
    }
}

/// Parameters of client-side SGD.
#[derive(Debug, Clone, Copy)]
pub struct TrainParams {
    pub lr: f64,
    pub local_steps: usize,
    /// `None` selects the full batch; larger-than-dataset values clamp.
    pub batch_size: Option<usize>,
}

/// Runs `local_steps` mini-batch SGD steps from the broadcast global model
/// on `dataset`. Deterministic given the client seed and round index.
pub fn local_train(
    global: &ModelVector,
    client: &ClientState,
    dataset: &Dataset,
    family: &ModelFamily,
    params: &TrainParams,
    round: usize,
) -> Result<ModelVector> {
    if dataset.is_empty() {
        return Err(Error::invalid("client dataset is empty"));
    }
    let mut w = global.as_slice().to_vec();
    let mut rng = rng_from(client.rng_seed, &[stream::CLIENT, round as u64]);
    let batch = params
        .batch_size
        .unwrap_or(dataset.len())
        .min(dataset.len());
    for _ in 0..params.local_steps {
        let (x, labels): (Vec<f64>, Vec<usize>) = if batch == dataset.len() {
            (dataset.features.clone(), dataset.labels.clone())
        } else {
            let idx = sample_batch(dataset.len(), batch, &mut rng);
            let sub = dataset.subset(&idx)?;
            (sub.features, sub.labels)
        };
        let grad = family.grad_hard(&w, &x, &labels, labels.len())?;
        for (wi, gi) in w.iter_mut().zip(&grad) {
            *wi -= params.lr * gi;
        }
    }
    ModelVector::new(w)
}

/// Adds i.i.d. Gaussian noise with standard deviation `rho` per coordinate.
pub fn add_dp_noise(update: &ModelVector, rho: f64, seed: u64) -> Result<ModelVector> {
    if rho.is_nan() || rho < 0.0 {
        return Err(Error::invalid("noise level must be nonnegative"));
    }
    if rho == 0.0 {
        return Ok(update.clone());
    }
    let mut rng = rng_from(seed, &[stream::DP_NOISE]);
    let params = update
        .as_slice()
        .iter()
        .map(|v| {
            let z: f64 = StandardNormal.sample(&mut rng);
            v + rho * z
        })
        .collect();
    ModelVector::new(params)
}

/// One trajectory-collection round: clusters the received local models,
/// aggregates only the largest cluster, and returns the next global model
/// together with the per-client filter verdicts.
pub fn collect_trajectory_round(
    updates: &[ModelVector],
    ar: Aggregator,
    seed: u64,
) -> Result<(ModelVector, Vec<Verdict>)> {
    if updates.is_empty() {
        return Err(Error::EmptyUpdates);
    }
    let points: Vec<&[f64]> = updates.iter().map(|u| u.as_slice()).collect();
    let clusters = kmeans(&points, 2.min(points.len()), seed)?;
    let kept: Vec<ModelVector> = clusters
        .largest_members()
        .iter()
        .map(|&i| updates[i].clone())
        .collect();
    let verdicts = (0..updates.len())
        .map(|i| {
            if clusters.assignment(i) == clusters.largest() {
                Verdict::Benign
            } else {
                Verdict::Malicious
            }
        })
        .collect();
    Ok((ar.aggregate(&kept)?, verdicts))
}

/// Initial global model: i.i.d. normal with standard deviation 0.1.
pub fn init_global(family: &ModelFamily, seed: u64) -> ModelVector {
    let mut rng = rng_from(seed, &[stream::INIT]);
    let params = (0..family.dim())
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            0.1 * z
        })
        .collect();
    ModelVector::from_vec(params)
}
