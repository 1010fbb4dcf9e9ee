//! Malicious local-model crafting under a full-knowledge threat model: the
//! attacker sees every benign update of the round (and, for the adaptive
//! attack, runs its own replica of the server's detector) before choosing
//! what the compromised clients submit.

use rand::Rng;

use crate::data::{
    apply_trigger, flip_labels, reversal_permutation, Dataset, TriggerPart, TriggerSpec,
};
use crate::error::{Error, Result};
use crate::fl::ModelVector;
use crate::rng::rng_from;

/// Everything an attack may consult when crafting the round's malicious
/// updates. Benign updates are complete before crafting begins.
pub struct AttackContext<'a> {
    pub round: usize,
    pub global: &'a ModelVector,
    /// `(client id, update)` pairs for the round's benign participants, in
    /// ascending id order.
    pub benign: &'a [(usize, ModelVector)],
    /// Ids of the malicious participants, ascending.
    pub malicious_ids: &'a [usize],
    /// Total number of participants this round.
    pub n_participants: usize,
    pub seed: u64,
    /// Trains a client from the current global model on an arbitrary
    /// dataset (used by data-poisoning attacks).
    pub trainer: Option<&'a dyn LocalTrainer>,
    /// The attacker's own copy of the server's detector (adaptive attack).
    pub replica: Option<&'a dyn DefenderReplica>,
}

/// Round-scoped training handle handed to data-poisoning attacks.
pub trait LocalTrainer {
    fn dataset(&self, client: usize) -> &Dataset;
    fn train(&self, client: usize, dataset: &Dataset) -> Result<ModelVector>;
}

/// The attacker's simulation of the server-side filter. `submitted` holds
/// every participant's update in id order; `malicious_positions` indexes
/// the attacker-controlled entries.
pub trait DefenderReplica {
    fn accepts(&self, submitted: &[ModelVector], malicious_positions: &[usize]) -> Result<bool>;
}

/// Accepts everything; the unconstrained upper bound for the adaptive attack.
pub struct AcceptAllReplica;

impl DefenderReplica for AcceptAllReplica {
    fn accepts(&self, _: &[ModelVector], _: &[usize]) -> Result<bool> {
        Ok(true)
    }
}

/// Rejects everything; forces the adaptive attack onto its fallback.
pub struct RejectAllReplica;

impl DefenderReplica for RejectAllReplica {
    fn accepts(&self, _: &[ModelVector], _: &[usize]) -> Result<bool> {
        Ok(false)
    }
}

/// A poisoning attack: produces one update per malicious id, aligned with
/// `ctx.malicious_ids`.
pub trait Attack {
    fn craft(&self, ctx: &AttackContext<'_>) -> Result<Vec<ModelVector>>;
    fn name(&self) -> &'static str;
}

fn require_benign(ctx: &AttackContext<'_>) -> Result<()> {
    if ctx.benign.is_empty() {
        return Err(Error::invalid("attack requires at least one benign update"));
    }
    Ok(())
}

/// Coordinate-wise mean of the benign updates.
fn benign_mean(ctx: &AttackContext<'_>) -> ModelVector {
    let d = ctx.global.dim();
    let mut mean = vec![0.0; d];
    for (_, u) in ctx.benign {
        for (m, v) in mean.iter_mut().zip(u.as_slice()) {
            *m += v;
        }
    }
    let inv = 1.0 / ctx.benign.len() as f64;
    for m in mean.iter_mut() {
        *m *= inv;
    }
    ModelVector::from_vec(mean)
}

/// Coordinate-wise sample standard deviation (n-1 denominator) of the
/// benign updates; zero when only one benign update exists.
fn benign_std(ctx: &AttackContext<'_>, mean: &ModelVector) -> Vec<f64> {
    let d = ctx.global.dim();
    let n = ctx.benign.len();
    if n < 2 {
        return vec![0.0; d];
    }
    let mut var = vec![0.0; d];
    for (_, u) in ctx.benign {
        for ((s, v), m) in var.iter_mut().zip(u.as_slice()).zip(mean.as_slice()) {
            let diff = v - m;
            *s += diff * diff;
        }
    }
    let inv = 1.0 / (n - 1) as f64;
    var.into_iter().map(|v| (v * inv).sqrt()).collect()
}

/// Untargeted attack on coordinate-wise rules: every malicious client
/// submits `mean - z * std * sign(mean - global)` per coordinate with its
/// own `z` drawn uniformly from `[3, 4]`.
pub struct TrimAttack;

impl Attack for TrimAttack {
    fn craft(&self, ctx: &AttackContext<'_>) -> Result<Vec<ModelVector>> {
        require_benign(ctx)?;
        let mean = benign_mean(ctx);
        let std = benign_std(ctx, &mean);
        let dir: Vec<f64> = mean
            .as_slice()
            .iter()
            .zip(ctx.global.as_slice())
            .map(|(m, g)| (m - g).signum())
            .map(|s| if s.is_nan() { 0.0 } else { s })
            .collect();
        let mut out = Vec::with_capacity(ctx.malicious_ids.len());
        for &id in ctx.malicious_ids {
            let mut rng = rng_from(ctx.seed, &[ctx.round as u64, id as u64]);
            let z = rng.gen_range(3.0..4.0);
            let params: Vec<f64> = mean
                .as_slice()
                .iter()
                .zip(&std)
                .zip(&dir)
                .map(|((m, s), d)| m - z * s * d)
                .collect();
            out.push(ModelVector::new(params)?);
        }
        Ok(out)
    }

    fn name(&self) -> &'static str {
        "trim"
    }
}

/// Backdoor attack: each malicious client trains on its trigger-poisoned
/// shard and amplifies the delta: `global + lambda * (local - global)`.
/// `lambda = None` uses `n / m`.
pub struct ScalingAttack {
    pub trigger: TriggerSpec,
    pub poison_fraction: f64,
    pub lambda: Option<f64>,
}

impl Attack for ScalingAttack {
    fn craft(&self, ctx: &AttackContext<'_>) -> Result<Vec<ModelVector>> {
        let trainer = ctx
            .trainer
            .ok_or_else(|| Error::invalid("scaling attack requires a trainer"))?;
        let lambda = effective_lambda(self.lambda, ctx);
        let mut out = Vec::with_capacity(ctx.malicious_ids.len());
        for &id in ctx.malicious_ids {
            let poisoned = apply_trigger(
                trainer.dataset(id),
                &self.trigger,
                self.poison_fraction,
                TriggerPart::All,
            )?;
            let local = trainer.train(id, &poisoned)?;
            out.push(amplify(ctx.global, &local, lambda)?);
        }
        Ok(out)
    }

    fn name(&self) -> &'static str {
        "scaling"
    }
}

/// Distributed backdoor: malicious client at position `p` poisons with
/// trigger segment `p mod n_segments` only, then amplifies like the
/// scaling attack.
pub struct DbaAttack {
    pub trigger: TriggerSpec,
    pub poison_fraction: f64,
    pub lambda: Option<f64>,
}

impl Attack for DbaAttack {
    fn craft(&self, ctx: &AttackContext<'_>) -> Result<Vec<ModelVector>> {
        let trainer = ctx
            .trainer
            .ok_or_else(|| Error::invalid("dba attack requires a trainer"))?;
        let lambda = effective_lambda(self.lambda, ctx);
        let mut out = Vec::with_capacity(ctx.malicious_ids.len());
        for (pos, &id) in ctx.malicious_ids.iter().enumerate() {
            let segment = pos % self.trigger.n_segments;
            let poisoned = apply_trigger(
                trainer.dataset(id),
                &self.trigger,
                self.poison_fraction,
                TriggerPart::Segment(segment),
            )?;
            let local = trainer.train(id, &poisoned)?;
            out.push(amplify(ctx.global, &local, lambda)?);
        }
        Ok(out)
    }

    fn name(&self) -> &'static str {
        "dba"
    }
}

fn effective_lambda(lambda: Option<f64>, ctx: &AttackContext<'_>) -> f64 {
    lambda.unwrap_or_else(|| ctx.n_participants as f64 / ctx.malicious_ids.len().max(1) as f64)
}

fn amplify(global: &ModelVector, local: &ModelVector, lambda: f64) -> Result<ModelVector> {
    ModelVector::new(
        global
            .as_slice()
            .iter()
            .zip(local.as_slice())
            .map(|(g, l)| g + lambda * (l - g))
            .collect(),
    )
}

/// Data-poisoning attack that trains on label-flipped shards. The default
/// permutation reverses the class order.
pub struct LabelFlipAttack {
    pub permutation: Option<Vec<usize>>,
}

impl Attack for LabelFlipAttack {
    fn craft(&self, ctx: &AttackContext<'_>) -> Result<Vec<ModelVector>> {
        let trainer = ctx
            .trainer
            .ok_or_else(|| Error::invalid("label-flip attack requires a trainer"))?;
        let mut out = Vec::with_capacity(ctx.malicious_ids.len());
        for &id in ctx.malicious_ids {
            let data = trainer.dataset(id);
            let perm = match &self.permutation {
                Some(p) => p.clone(),
                None => reversal_permutation(data.n_classes),
            };
            let flipped = flip_labels(data, &perm)?;
            out.push(trainer.train(id, &flipped)?);
        }
        Ok(out)
    }

    fn name(&self) -> &'static str {
        "label_flip"
    }
}

/// Small-perturbation attack: every malicious client submits
/// `mean + z * std` per coordinate with a fixed `z`.
pub struct LieAttack {
    pub z: f64,
}

impl Attack for LieAttack {
    fn craft(&self, ctx: &AttackContext<'_>) -> Result<Vec<ModelVector>> {
        require_benign(ctx)?;
        let mean = benign_mean(ctx);
        let std = benign_std(ctx, &mean);
        let params: Vec<f64> = mean
            .as_slice()
            .iter()
            .zip(&std)
            .map(|(m, s)| m + self.z * s)
            .collect();
        let update = ModelVector::new(params)?;
        Ok(vec![update; ctx.malicious_ids.len()])
    }

    fn name(&self) -> &'static str {
        "lie"
    }
}

/// Hybrid: the first half of the malicious ids (by position) run attack
/// `a`, the rest run attack `b`.
pub struct HybridAttack {
    pub a: Box<dyn Attack>,
    pub b: Box<dyn Attack>,
    name: &'static str,
}

impl HybridAttack {
    pub fn new(a: Box<dyn Attack>, b: Box<dyn Attack>, name: &'static str) -> Self {
        HybridAttack { a, b, name }
    }

    /// `(ids for a, ids for b)`
    pub fn split(ids: &[usize]) -> (&[usize], &[usize]) {
        ids.split_at(ids.len() / 2)
    }
}

impl Attack for HybridAttack {
    fn craft(&self, ctx: &AttackContext<'_>) -> Result<Vec<ModelVector>> {
        fn sub<'a>(ctx: &AttackContext<'a>, ids: &'a [usize]) -> AttackContext<'a> {
            AttackContext {
                round: ctx.round,
                global: ctx.global,
                benign: ctx.benign,
                malicious_ids: ids,
                n_participants: ctx.n_participants,
                seed: ctx.seed,
                trainer: ctx.trainer,
                replica: ctx.replica,
            }
        }
        let (first, second) = Self::split(ctx.malicious_ids);
        let mut out = self.a.craft(&sub(ctx, first))?;
        out.extend(self.b.craft(&sub(ctx, second))?);
        Ok(out)
    }

    fn name(&self) -> &'static str {
        self.name
    }
}

/// Adaptive attack against a known defender: pushes all malicious updates
/// along the negated benign-deviation direction as far as the attacker's
/// replica of the detector still accepts them.
pub struct AdaptiveAttack {
    pub search_iterations: usize,
}

impl Default for AdaptiveAttack {
    fn default() -> Self {
        AdaptiveAttack {
            search_iterations: 20,
        }
    }
}

impl AdaptiveAttack {
    fn candidate(mean: &ModelVector, dir: &[f64], gamma: f64) -> ModelVector {
        ModelVector::from_vec(
            mean.as_slice()
                .iter()
                .zip(dir)
                .map(|(m, p)| m + gamma * p)
                .collect(),
        )
    }

    /// Merges benign updates and one malicious candidate per malicious id
    /// into id order, returning the full submission and the positions of
    /// the malicious entries.
    fn merged(ctx: &AttackContext<'_>, candidate: &ModelVector) -> (Vec<ModelVector>, Vec<usize>) {
        let mut entries: Vec<(usize, ModelVector)> = ctx.benign.to_vec();
        for &id in ctx.malicious_ids {
            entries.push((id, candidate.clone()));
        }
        entries.sort_by_key(|(id, _)| *id);
        let positions = entries
            .iter()
            .enumerate()
            .filter(|(_, (id, _))| ctx.malicious_ids.contains(id))
            .map(|(pos, _)| pos)
            .collect();
        (entries.into_iter().map(|(_, u)| u).collect(), positions)
    }
}

impl Attack for AdaptiveAttack {
    fn craft(&self, ctx: &AttackContext<'_>) -> Result<Vec<ModelVector>> {
        require_benign(ctx)?;
        let replica = ctx
            .replica
            .ok_or_else(|| Error::invalid("adaptive attack requires a defender replica"))?;
        let mean = benign_mean(ctx);
        let std = benign_std(ctx, &mean);
        let norm = std.iter().map(|s| s * s).sum::<f64>().sqrt();
        let dir: Vec<f64> = if norm > 0.0 {
            std.iter().map(|s| -s / norm).collect()
        } else {
            vec![0.0; std.len()]
        };
        let mean_delta_norm = ctx
            .benign
            .iter()
            .map(|(_, u)| u.minus(ctx.global).norm())
            .sum::<f64>()
            / ctx.benign.len() as f64;
        let gamma_max = 100.0 * mean_delta_norm;

        let accepts = |gamma: f64| -> Result<bool> {
            let cand = Self::candidate(&mean, &dir, gamma);
            let (submitted, positions) = Self::merged(ctx, &cand);
            replica.accepts(&submitted, &positions)
        };

        let gamma = if accepts(gamma_max)? {
            gamma_max
        } else if !accepts(0.0)? {
            // Even the benign mean is rejected; submit it anyway.
            0.0
        } else {
            let mut lo = 0.0;
            let mut hi = gamma_max;
            for _ in 0..self.search_iterations {
                let mid = 0.5 * (lo + hi);
                if accepts(mid)? {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            lo
        };
        let update = Self::candidate(&mean, &dir, gamma);
        Ok(vec![update; ctx.malicious_ids.len()])
    }

    fn name(&self) -> &'static str {
        "adaptive"
    }
}
