//! End-to-end experiment orchestration.
//!
//! Each round runs the three FL steps: broadcast, local updates (with the
//! attack hook replacing malicious submissions after all benign updates
//! exist), and server-side aggregation. When a detector is configured the
//! server filters the first `epsilon` rounds by clustering while it
//! collects the global-model trajectory, distills the synthetic dataset
//! once at round `epsilon`, and applies loss-based detection from then on.
//! Flagged clients are ignored for that round only.
//!
//! Client-side Gaussian noise, when enabled, is added to honestly trained
//! updates; attack-crafted submissions are whatever the attacker chose to
//! send.

use std::path::Path;

use crate::aggregation::Aggregator;
use crate::attacks::{
    AdaptiveAttack, Attack, AttackContext, DbaAttack, DefenderReplica, HybridAttack,
    LabelFlipAttack, LieAttack, LocalTrainer, ScalingAttack, TrimAttack,
};
use crate::clustering::kmeans;
use crate::config::{ArKind, AttackKind, DetectorKind, ExperimentConfig, MlMode, SchemeKind};
use crate::data::{gen_blobs, partition, Dataset, PartitionScheme, PartitionSpec, TriggerSpec};
use crate::detection::{
    eval_losses, safefl_cl, safefl_ml, syngen, MlWeightMode, SynGenConfig, SyntheticDataset,
};
use crate::error::{Error, Result};
use crate::fl::{
    add_dp_noise, collect_trajectory_round, init_global, local_train, ClientState, ModelVector,
    TrainParams, Trajectory, Verdict,
};
use crate::io;
use crate::metrics::{asr, detection_metrics, mean_defined, tacc, DetectionMetrics};
use crate::model::ModelFamily;
use crate::rng::{derive_seed, rng_from, stream};

/// What the server did in a round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// No detector: plain aggregation.
    Plain,
    /// Trajectory collection with cluster filtering.
    Trajectory,
    /// Loss-based detection on the synthetic dataset.
    Detection,
}

impl Phase {
    pub fn name(&self) -> &'static str {
        match self {
            Phase::Plain => "plain",
            Phase::Trajectory => "trajectory",
            Phase::Detection => "detection",
        }
    }
}

/// Per-round record written to `rounds.csv`.
#[derive(Debug, Clone)]
pub struct RoundReport {
    pub round: usize,
    pub phase: Phase,
    pub detection: Option<DetectionMetrics>,
    pub tacc: f64,
    pub asr: Option<f64>,
    /// One verdict per client; unselected clients are not evaluated.
    pub verdicts: Vec<Verdict>,
    /// Loss on the synthetic dataset per client, once detection is active.
    pub losses: Vec<Option<f64>>,
}

/// Averages over the detection window plus final-model quality.
#[derive(Debug, Clone)]
pub struct Summary {
    pub attack: String,
    pub defense: String,
    pub ar: String,
    pub rounds: usize,
    pub epsilon: usize,
    pub seed: u64,
    pub dacc: Option<f64>,
    pub fpr: Option<f64>,
    pub fnr: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub final_tacc: f64,
    pub final_asr: Option<f64>,
}

#[derive(Debug)]
pub struct ExperimentResult {
    pub rounds: Vec<RoundReport>,
    pub summary: Summary,
    pub trajectory: Option<Trajectory>,
    pub dsyn: Option<SyntheticDataset>,
    pub syngen_log: Vec<f64>,
}

/// One configured FL run. Rounds advance via [`Simulation::run_round`].
pub struct Simulation {
    cfg: ExperimentConfig,
    family: ModelFamily,
    clients: Vec<ClientState>,
    test_set: Dataset,
    trigger: Option<TriggerSpec>,
    aggregator: Aggregator,
    attack: Option<Box<dyn Attack>>,
    global: ModelVector,
    trajectory: Option<Trajectory>,
    dsyn: Option<SyntheticDataset>,
    syngen_log: Vec<f64>,
    next_round: usize,
}

impl Simulation {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let family = cfg.family();
        let master = cfg.seed;

        let train = gen_blobs(
            cfg.data.per_class,
            cfg.data.classes,
            cfg.data.features,
            cfg.data.separation,
            derive_seed(master, &[stream::DATA]),
        )?;
        let test_set = gen_blobs(
            cfg.data.test_per_class,
            cfg.data.classes,
            cfg.data.features,
            cfg.data.separation,
            derive_seed(master, &[stream::TEST_DATA]),
        )?;
        let spec = PartitionSpec {
            scheme: match cfg.partition.scheme {
                SchemeKind::Probabilistic => PartitionScheme::ProbabilisticQ,
                SchemeKind::LabelRestricted => PartitionScheme::LabelRestricted,
            },
            q: cfg.partition.q,
            classes_per_client: cfg.partition.classes_per_client,
            n_clients: cfg.n_clients,
            seed: derive_seed(master, &[stream::PARTITION]),
        };
        let shards = partition(&train, &spec)?;

        // Without an attack nobody misbehaves, so nobody is ground-truth
        // malicious regardless of the configured fraction.
        let malicious = if cfg.attack.kind == AttackKind::None {
            0
        } else {
            cfg.malicious_count()
        };
        let clients: Vec<ClientState> = shards
            .into_iter()
            .enumerate()
            .map(|(id, dataset)| ClientState {
                id,
                dataset,
                is_malicious: id < malicious,
                rng_seed: derive_seed(master, &[stream::CLIENT, id as u64]),
            })
            .collect();

        let trigger = if cfg.attack.kind.uses_trigger() {
            Some(cfg.trigger_spec())
        } else {
            None
        };
        let aggregator = build_aggregator(&cfg, malicious);
        let attack = build_attack(&cfg)?;
        let global = init_global(&family, master);
        let trajectory = if cfg.detector != DetectorKind::None {
            Some(Trajectory::new(global.clone()))
        } else {
            None
        };

        Ok(Simulation {
            cfg,
            family,
            clients,
            test_set,
            trigger,
            aggregator,
            attack,
            global,
            trajectory,
            dsyn: None,
            syngen_log: Vec::new(),
            next_round: 1,
        })
    }

    pub fn global(&self) -> &ModelVector {
        &self.global
    }

    pub fn dsyn(&self) -> Option<&SyntheticDataset> {
        self.dsyn.as_ref()
    }

    pub fn trajectory(&self) -> Option<&Trajectory> {
        self.trajectory.as_ref()
    }

    pub fn test_set(&self) -> &Dataset {
        &self.test_set
    }

    pub fn family(&self) -> &ModelFamily {
        &self.family
    }

    pub fn client(&self, id: usize) -> &ClientState {
        &self.clients[id]
    }

    fn train_params(&self) -> TrainParams {
        TrainParams {
            lr: self.cfg.lr,
            local_steps: self.cfg.local_steps,
            batch_size: self.cfg.batch_size,
        }
    }

    /// Ids participating this round, ascending.
    fn select_participants(&self, round: usize) -> Vec<usize> {
        let n = self.cfg.n_clients;
        if self.cfg.selection_rate >= 1.0 {
            return (0..n).collect();
        }
        let count = ((self.cfg.selection_rate * n as f64).ceil() as usize).clamp(1, n);
        let mut rng = rng_from(self.cfg.seed, &[stream::SELECTION, round as u64]);
        let mut ids = crate::data::sample_batch(n, count, &mut rng);
        ids.sort_unstable();
        ids
    }

    /// Distills the synthetic dataset once the trajectory is complete.
    /// Runs at the start of round `epsilon`: the trajectory was finished by
    /// round `epsilon - 1`, and the full-knowledge attacker is entitled to
    /// the dataset in the same round the server first uses it.
    fn build_dsyn(&mut self) -> Result<()> {
        let trajectory = self
            .trajectory
            .as_ref()
            .expect("trajectory exists when a detector is configured");
        let syn_cfg = SynGenConfig {
            iterations: self.cfg.syngen.iterations,
            outer_lr: self.cfg.syngen.outer_lr,
            inner_steps: self.cfg.syngen.delta,
            inner_lr: self.cfg.syngen.inner_lr,
            size: self.cfg.syngen.size,
            seed: derive_seed(self.cfg.seed, &[stream::SYNGEN]),
        };
        let (dsyn, log) = syngen(trajectory, &self.family, &syn_cfg)?;
        self.dsyn = Some(dsyn);
        self.syngen_log = log;
        Ok(())
    }

    /// Runs one full round and advances the round counter.
    pub fn run_round(&mut self) -> Result<RoundReport> {
        let t = self.next_round;
        self.next_round += 1;
        let master = self.cfg.seed;
        let participants = self.select_participants(t);
        let params = self.train_params();

        if self.cfg.detector != DetectorKind::None && t == self.cfg.epsilon {
            debug_assert!(self.dsyn.is_none());
            self.build_dsyn()?;
        }

        // Step II: honest local updates for the benign participants.
        let mut benign: Vec<(usize, ModelVector)> = Vec::new();
        let mut malicious_ids: Vec<usize> = Vec::new();
        for &id in &participants {
            let client = &self.clients[id];
            if client.is_malicious && self.attack.is_some() {
                malicious_ids.push(id);
                continue;
            }
            let mut update = local_train(
                &self.global,
                client,
                &client.dataset,
                &self.family,
                &params,
                t,
            )?;
            if self.cfg.dp_noise > 0.0 {
                update = add_dp_noise(
                    &update,
                    self.cfg.dp_noise,
                    derive_seed(master, &[stream::DP_NOISE, t as u64, id as u64]),
                )?;
            }
            benign.push((id, update));
        }

        // Attack hook: the attacker sees every benign update of the round.
        // With no benign participant to observe or hide among, malicious
        // clients just train honestly this round.
        let mut submissions: Vec<(usize, ModelVector)> = benign.clone();
        if benign.is_empty() {
            for &id in &malicious_ids {
                let client = &self.clients[id];
                let update = local_train(
                    &self.global,
                    client,
                    &client.dataset,
                    &self.family,
                    &params,
                    t,
                )?;
                submissions.push((id, update));
            }
            malicious_ids.clear();
        }
        if let Some(attack) = &self.attack {
            if !malicious_ids.is_empty() {
                let trainer = SimTrainer {
                    clients: &self.clients,
                    global: &self.global,
                    family: &self.family,
                    params,
                    round: t,
                };
                let replica = SimReplica {
                    detector: self.cfg.detector,
                    ml_mode: self.cfg.ml_mode,
                    aggregator: self.aggregator,
                    family: &self.family,
                    dsyn: self.dsyn.as_ref(),
                    cluster_seed: derive_seed(master, &[stream::TRAJECTORY_CLUSTER, t as u64]),
                    detection_active: self.cfg.detector != DetectorKind::None
                        && t >= self.cfg.epsilon,
                };
                let ctx = AttackContext {
                    round: t,
                    global: &self.global,
                    benign: &benign,
                    malicious_ids: &malicious_ids,
                    n_participants: participants.len(),
                    seed: derive_seed(master, &[stream::ATTACK]),
                    trainer: Some(&trainer),
                    replica: Some(&replica),
                };
                let crafted = attack.craft(&ctx)?;
                debug_assert_eq!(crafted.len(), malicious_ids.len());
                submissions.extend(malicious_ids.iter().copied().zip(crafted));
                submissions.sort_by_key(|(id, _)| *id);
            }
        }
        let updates: Vec<ModelVector> = submissions.iter().map(|(_, u)| u.clone()).collect();

        // Step III: aggregation, with trajectory filtering or detection
        // when a detector is configured.
        let mut verdicts = vec![Verdict::NotEvaluated; self.cfg.n_clients];
        let mut losses: Vec<Option<f64>> = vec![None; self.cfg.n_clients];
        let phase;
        match self.cfg.detector {
            DetectorKind::None => {
                phase = Phase::Plain;
                self.global = self.aggregator.aggregate(&updates)?;
            }
            detector => {
                if t < self.cfg.epsilon {
                    phase = Phase::Trajectory;
                    let (next, filter_verdicts) = collect_trajectory_round(
                        &updates,
                        self.aggregator,
                        derive_seed(master, &[stream::TRAJECTORY_CLUSTER, t as u64]),
                    )?;
                    for ((id, _), v) in submissions.iter().zip(filter_verdicts) {
                        verdicts[*id] = v;
                    }
                    self.global = next;
                    self.trajectory
                        .as_mut()
                        .expect("trajectory exists when a detector is configured")
                        .push(self.global.clone());
                } else {
                    phase = Phase::Detection;
                    let dsyn = self.dsyn.as_ref().ok_or_else(|| {
                        Error::invalid("detection reached without a synthetic dataset")
                    })?;
                    let round_losses = eval_losses(&updates, dsyn, &self.family)?;
                    let outcome = match detector {
                        DetectorKind::SafeflMl => safefl_ml(
                            &updates,
                            &round_losses,
                            match self.cfg.ml_mode {
                                MlMode::Renormalized => MlWeightMode::Renormalized,
                                MlMode::LiteralEq4 => MlWeightMode::LiteralEq4,
                            },
                        )?,
                        DetectorKind::SafeflCl => {
                            safefl_cl(&updates, &round_losses, self.aggregator)?
                        }
                        DetectorKind::None => unreachable!("handled above"),
                    };
                    for (((id, _), v), l) in
                        submissions.iter().zip(&outcome.verdicts).zip(&round_losses)
                    {
                        verdicts[*id] = *v;
                        losses[*id] = Some(*l);
                    }
                    self.global = outcome.aggregate;
                }
            }
        }

        let truth: Vec<bool> = self.clients.iter().map(|c| c.is_malicious).collect();
        let detection = if phase == Phase::Plain {
            None
        } else {
            detection_metrics(&verdicts, &truth)
        };
        let round_tacc = tacc(&self.global, &self.family, &self.test_set)?;
        let round_asr = match &self.trigger {
            Some(trigger) => asr(&self.global, &self.family, &self.test_set, trigger)?,
            None => None,
        };
        Ok(RoundReport {
            round: t,
            phase,
            detection,
            tacc: round_tacc,
            asr: round_asr,
            verdicts,
            losses,
        })
    }
}

struct SimTrainer<'a> {
    clients: &'a [ClientState],
    global: &'a ModelVector,
    family: &'a ModelFamily,
    params: TrainParams,
    round: usize,
}

impl LocalTrainer for SimTrainer<'_> {
    fn dataset(&self, client: usize) -> &Dataset {
        &self.clients[client].dataset
    }

    fn train(&self, client: usize, dataset: &Dataset) -> Result<ModelVector> {
        local_train(
            self.global,
            &self.clients[client],
            dataset,
            self.family,
            &self.params,
            self.round,
        )
    }
}

/// The attacker's faithful copy of the server's filter for the current
/// round (full-knowledge threat model: detector kind, synthetic dataset,
/// and clustering seed are all known).
struct SimReplica<'a> {
    detector: DetectorKind,
    ml_mode: MlMode,
    aggregator: Aggregator,
    family: &'a ModelFamily,
    dsyn: Option<&'a SyntheticDataset>,
    cluster_seed: u64,
    detection_active: bool,
}

impl DefenderReplica for SimReplica<'_> {
    fn accepts(&self, submitted: &[ModelVector], malicious_positions: &[usize]) -> Result<bool> {
        match self.detector {
            DetectorKind::None => Ok(true),
            _ if !self.detection_active => {
                let points: Vec<&[f64]> = submitted.iter().map(|u| u.as_slice()).collect();
                let clusters = kmeans(&points, 2.min(points.len()), self.cluster_seed)?;
                Ok(malicious_positions
                    .iter()
                    .all(|&p| clusters.assignment(p) == clusters.largest()))
            }
            detector => {
                let dsyn = self
                    .dsyn
                    .ok_or_else(|| Error::invalid("replica queried before the dataset exists"))?;
                let losses = eval_losses(submitted, dsyn, self.family)?;
                let verdicts = match detector {
                    DetectorKind::SafeflMl => {
                        let mode = match self.ml_mode {
                            MlMode::Renormalized => MlWeightMode::Renormalized,
                            MlMode::LiteralEq4 => MlWeightMode::LiteralEq4,
                        };
                        safefl_ml(submitted, &losses, mode)?.verdicts
                    }
                    DetectorKind::SafeflCl => {
                        safefl_cl(submitted, &losses, self.aggregator)?.verdicts
                    }
                    DetectorKind::None => unreachable!(),
                };
                Ok(malicious_positions
                    .iter()
                    .all(|&p| verdicts[p] == Verdict::Benign))
            }
        }
    }
}

fn build_aggregator(cfg: &ExperimentConfig, malicious: usize) -> Aggregator {
    let k = cfg.ar_k.unwrap_or(malicious);
    match cfg.ar {
        ArKind::Fedavg => Aggregator::FedAvg,
        ArKind::Median => Aggregator::Median,
        ArKind::TrimmedMean => Aggregator::TrimmedMean { k },
        ArKind::Krum => Aggregator::Krum { k },
    }
}

fn build_attack(cfg: &ExperimentConfig) -> Result<Option<Box<dyn Attack>>> {
    let trigger = cfg.trigger_spec();
    let scaling = || ScalingAttack {
        trigger: trigger.clone(),
        poison_fraction: cfg.attack.poison_fraction,
        lambda: cfg.attack.lambda,
    };
    let dba = || DbaAttack {
        trigger: trigger.clone(),
        poison_fraction: cfg.attack.poison_fraction,
        lambda: cfg.attack.lambda,
    };
    Ok(match cfg.attack.kind {
        AttackKind::None => None,
        AttackKind::Trim => Some(Box::new(TrimAttack)),
        AttackKind::Scaling => Some(Box::new(scaling())),
        AttackKind::Dba => Some(Box::new(dba())),
        AttackKind::LabelFlip => Some(Box::new(LabelFlipAttack {
            permutation: cfg.attack.flip_permutation.clone(),
        })),
        AttackKind::Lie => Some(Box::new(LieAttack { z: cfg.attack.z })),
        AttackKind::TrimDba => Some(Box::new(HybridAttack::new(
            Box::new(TrimAttack),
            Box::new(dba()),
            "trim_dba",
        ))),
        AttackKind::ScalingDba => Some(Box::new(HybridAttack::new(
            Box::new(scaling()),
            Box::new(dba()),
            "scaling_dba",
        ))),
        AttackKind::Adaptive => Some(Box::new(AdaptiveAttack::default())),
    })
}

/// Runs all configured rounds and assembles the summary. Detection metrics
/// are averaged over the rounds where loss-based detection was active
/// (`t >= epsilon`); trajectory-phase filter verdicts stay in the per-round
/// reports only.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let mut sim = Simulation::new(cfg.clone())?;
    let mut rounds = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        rounds.push(sim.run_round()?);
    }

    let window: Vec<&RoundReport> = rounds
        .iter()
        .filter(|r| r.phase == Phase::Detection)
        .collect();
    let avg = |pick: fn(&DetectionMetrics) -> Option<f64>| -> Option<f64> {
        let values: Vec<Option<f64>> = window
            .iter()
            .filter_map(|r| r.detection.as_ref())
            .map(pick)
            .collect();
        mean_defined(&values)
    };
    let last = rounds.last().expect("at least one round");
    let summary = Summary {
        attack: cfg.attack.kind.name().to_string(),
        defense: cfg.detector.name().to_string(),
        ar: sim.aggregator.name().to_string(),
        rounds: cfg.rounds,
        epsilon: cfg.epsilon,
        seed: cfg.seed,
        dacc: avg(|m| Some(m.dacc)),
        fpr: avg(|m| m.fpr),
        fnr: avg(|m| m.fnr),
        precision: avg(|m| m.precision),
        recall: avg(|m| m.recall),
        f1: avg(|m| m.f1),
        final_tacc: last.tacc,
        final_asr: last.asr,
    };
    Ok(ExperimentResult {
        rounds,
        summary,
        trajectory: sim.trajectory,
        dsyn: sim.dsyn,
        syngen_log: sim.syngen_log,
    })
}

/// Writes `rounds.csv`, `summary.csv`, and, when produced, the
/// trajectory and synthetic-dataset snapshots plus the distillation log.
pub fn write_outputs(cfg: &ExperimentConfig, result: &ExperimentResult, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut rounds = String::new();
    rounds.push_str("round,phase,dacc,fpr,fnr,precision,recall,f1,tacc,asr,verdicts");
    for i in 0..cfg.n_clients {
        rounds.push_str(&format!(",loss_{}", i));
    }
    rounds.push('\n');
    for r in &result.rounds {
        let d = r.detection.as_ref();
        let verdict_string: String = r.verdicts.iter().map(|v| v.code()).collect();
        rounds.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.round,
            r.phase.name(),
            io::fmt_opt(d.map(|m| m.dacc)),
            io::fmt_opt(d.and_then(|m| m.fpr)),
            io::fmt_opt(d.and_then(|m| m.fnr)),
            io::fmt_opt(d.and_then(|m| m.precision)),
            io::fmt_opt(d.and_then(|m| m.recall)),
            io::fmt_opt(d.and_then(|m| m.f1)),
            r.tacc,
            io::fmt_opt(r.asr),
            verdict_string,
        ));
        for l in &r.losses {
            rounds.push(',');
            rounds.push_str(&io::fmt_opt(*l));
        }
        rounds.push('\n');
    }
    std::fs::write(dir.join("rounds.csv"), rounds)?;

    let s = &result.summary;
    let summary = format!(
        "attack,defense,ar,rounds,epsilon,seed,dacc,fpr,fnr,precision,recall,f1,final_tacc,final_asr\n{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
        s.attack,
        s.defense,
        s.ar,
        s.rounds,
        s.epsilon,
        s.seed,
        io::fmt_opt(s.dacc),
        io::fmt_opt(s.fpr),
        io::fmt_opt(s.fnr),
        io::fmt_opt(s.precision),
        io::fmt_opt(s.recall),
        io::fmt_opt(s.f1),
        s.final_tacc,
        io::fmt_opt(s.final_asr),
    );
    std::fs::write(dir.join("summary.csv"), summary)?;

    if let Some(trajectory) = &result.trajectory {
        io::save_trajectory(&dir.join("trajectory.bin"), trajectory, cfg.seed)?;
    }
    if let Some(dsyn) = &result.dsyn {
        io::save_dsyn(&dir.join("dsyn.bin"), dsyn)?;
    }
    if !result.syngen_log.is_empty() {
        let mut buf = Vec::new();
        io::write_syngen_log(&mut buf, &result.syngen_log)?;
        std::fs::write(dir.join("syngen_log.csv"), buf)?;
    }
    Ok(())
}
