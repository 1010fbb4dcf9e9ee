//! Experiment configuration: a TOML file of typed scalars with dotted
//! sections for the model, data, partition, distillation, and attack
//! settings. Every knob has a default, so an empty file is a valid
//! experiment.

use serde::Deserialize;

use crate::data::TriggerSpec;
use crate::error::{Error, Result};
use crate::model::ModelFamily;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    None,
    SafeflMl,
    SafeflCl,
}

impl DetectorKind {
    pub fn name(&self) -> &'static str {
        match self {
            DetectorKind::None => "none",
            DetectorKind::SafeflMl => "safefl_ml",
            DetectorKind::SafeflCl => "safefl_cl",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlMode {
    Renormalized,
    LiteralEq4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArKind {
    Fedavg,
    Median,
    TrimmedMean,
    Krum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    None,
    Trim,
    Scaling,
    Dba,
    LabelFlip,
    Lie,
    TrimDba,
    ScalingDba,
    Adaptive,
}

impl AttackKind {
    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::Trim => "trim",
            AttackKind::Scaling => "scaling",
            AttackKind::Dba => "dba",
            AttackKind::LabelFlip => "label_flip",
            AttackKind::Lie => "lie",
            AttackKind::TrimDba => "trim_dba",
            AttackKind::ScalingDba => "scaling_dba",
            AttackKind::Adaptive => "adaptive",
        }
    }

    pub fn uses_trigger(&self) -> bool {
        matches!(
            self,
            AttackKind::Scaling | AttackKind::Dba | AttackKind::TrimDba | AttackKind::ScalingDba
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Softmax,
    Mlp,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "defaults::model_kind")]
    pub kind: ModelKind,
    #[serde(default = "defaults::hidden")]
    pub hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: defaults::model_kind(),
            hidden: defaults::hidden(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "defaults::classes")]
    pub classes: usize,
    #[serde(default = "defaults::features")]
    pub features: usize,
    #[serde(default = "defaults::per_class")]
    pub per_class: usize,
    #[serde(default = "defaults::test_per_class")]
    pub test_per_class: usize,
    #[serde(default = "defaults::separation")]
    pub separation: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            classes: defaults::classes(),
            features: defaults::features(),
            per_class: defaults::per_class(),
            test_per_class: defaults::test_per_class(),
            separation: defaults::separation(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    Probabilistic,
    LabelRestricted,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    #[serde(default = "defaults::scheme")]
    pub scheme: SchemeKind,
    #[serde(default = "defaults::q")]
    pub q: f64,
    #[serde(default = "defaults::classes_per_client")]
    pub classes_per_client: usize,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig {
            scheme: defaults::scheme(),
            q: defaults::q(),
            classes_per_client: defaults::classes_per_client(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynGenSection {
    /// Outer iterations (psi).
    #[serde(default = "defaults::iterations")]
    pub iterations: usize,
    /// Outer learning rate (gamma).
    #[serde(default = "defaults::outer_lr")]
    pub outer_lr: f64,
    /// Unrolled inner steps (delta).
    #[serde(default = "defaults::delta")]
    pub delta: usize,
    /// Learning rate of the unrolled inner SGD. Decoupled from the client
    /// rate: the hypergradient scales with this value, and desk-scale
    /// client rates are too small for the distillation to move.
    #[serde(default = "defaults::inner_lr")]
    pub inner_lr: f64,
    /// Synthetic rows (S).
    #[serde(default = "defaults::dsyn_size")]
    pub size: usize,
}

impl Default for SynGenSection {
    fn default() -> Self {
        SynGenSection {
            iterations: defaults::iterations(),
            outer_lr: defaults::outer_lr(),
            delta: defaults::delta(),
            inner_lr: defaults::inner_lr(),
            size: defaults::dsyn_size(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriggerConfig {
    /// Empty means "the last four features".
    #[serde(default)]
    pub feature_indices: Vec<usize>,
    #[serde(default = "defaults::trigger_value")]
    pub value: f64,
    #[serde(default)]
    pub target_label: usize,
    #[serde(default = "defaults::segments")]
    pub segments: usize,
}

impl Default for TriggerConfig {
    fn default() -> Self {
        TriggerConfig {
            feature_indices: Vec::new(),
            value: defaults::trigger_value(),
            target_label: 0,
            segments: defaults::segments(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    #[serde(default = "defaults::attack_kind")]
    pub kind: AttackKind,
    /// Amplification factor for scaling/dba; `None` means `n / m`.
    #[serde(default)]
    pub lambda: Option<f64>,
    /// Deviation multiplier of the small-perturbation attack.
    #[serde(default = "defaults::lie_z")]
    pub z: f64,
    #[serde(default = "defaults::poison_fraction")]
    pub poison_fraction: f64,
    /// Label permutation for the flip attack; `None` reverses class order.
    #[serde(default)]
    pub flip_permutation: Option<Vec<usize>>,
    #[serde(default)]
    pub trigger: TriggerConfig,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            kind: defaults::attack_kind(),
            lambda: None,
            z: defaults::lie_z(),
            poison_fraction: defaults::poison_fraction(),
            flip_permutation: None,
            trigger: TriggerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "defaults::seed")]
    pub seed: u64,
    #[serde(default = "defaults::n_clients")]
    pub n_clients: usize,
    #[serde(default = "defaults::malicious_fraction")]
    pub malicious_fraction: f64,
    /// Total global training rounds (T).
    #[serde(default = "defaults::rounds")]
    pub rounds: usize,
    /// Client learning rate (mu).
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default = "defaults::local_steps")]
    pub local_steps: usize,
    /// `None` trains on the full local shard.
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default = "defaults::selection_rate")]
    pub selection_rate: f64,
    /// Standard deviation of client-side Gaussian noise (rho).
    #[serde(default)]
    pub dp_noise: f64,
    /// Trajectory length (epsilon).
    #[serde(default = "defaults::epsilon")]
    pub epsilon: usize,
    #[serde(default = "defaults::detector")]
    pub detector: DetectorKind,
    #[serde(default = "defaults::ml_mode")]
    pub ml_mode: MlMode,
    #[serde(default = "defaults::ar")]
    pub ar: ArKind,
    /// Trim/neighbour parameter of the robust rules; defaults to the true
    /// malicious count.
    #[serde(default)]
    pub ar_k: Option<usize>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub partition: PartitionConfig,
    #[serde(default)]
    pub syngen: SynGenSection,
    #[serde(default)]
    pub attack: AttackConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty config uses defaults")
    }
}

mod defaults {
    use super::*;

    pub fn seed() -> u64 {
        42
    }
    pub fn n_clients() -> usize {
        20
    }
    pub fn malicious_fraction() -> f64 {
        0.3
    }
    pub fn rounds() -> usize {
        60
    }
    pub fn lr() -> f64 {
        0.1
    }
    pub fn local_steps() -> usize {
        1
    }
    pub fn selection_rate() -> f64 {
        1.0
    }
    pub fn epsilon() -> usize {
        25
    }
    pub fn detector() -> DetectorKind {
        DetectorKind::SafeflCl
    }
    pub fn ml_mode() -> MlMode {
        MlMode::Renormalized
    }
    pub fn ar() -> ArKind {
        ArKind::Fedavg
    }
    pub fn model_kind() -> ModelKind {
        ModelKind::Softmax
    }
    pub fn hidden() -> usize {
        8
    }
    pub fn classes() -> usize {
        4
    }
    pub fn features() -> usize {
        16
    }
    pub fn per_class() -> usize {
        50
    }
    pub fn test_per_class() -> usize {
        25
    }
    pub fn separation() -> f64 {
        6.0
    }
    pub fn scheme() -> SchemeKind {
        SchemeKind::Probabilistic
    }
    pub fn q() -> f64 {
        0.5
    }
    pub fn classes_per_client() -> usize {
        3
    }
    pub fn iterations() -> usize {
        500
    }
    pub fn outer_lr() -> f64 {
        0.1
    }
    pub fn delta() -> usize {
        15
    }
    pub fn inner_lr() -> f64 {
        0.5
    }
    pub fn dsyn_size() -> usize {
        20
    }
    pub fn trigger_value() -> f64 {
        3.0
    }
    pub fn segments() -> usize {
        4
    }
    pub fn attack_kind() -> AttackKind {
        AttackKind::None
    }
    pub fn lie_z() -> f64 {
        0.74
    }
    pub fn poison_fraction() -> f64 {
        0.3
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {}", path.display(), e)))?;
        Self::from_toml(&text)
    }

    /// Number of malicious clients implied by the fraction.
    pub fn malicious_count(&self) -> usize {
        (self.n_clients as f64 * self.malicious_fraction).round() as usize
    }

    pub fn family(&self) -> ModelFamily {
        match self.model.kind {
            ModelKind::Softmax => ModelFamily::SoftmaxRegression {
                features: self.data.features,
                classes: self.data.classes,
            },
            ModelKind::Mlp => ModelFamily::TanhMlp {
                features: self.data.features,
                hidden: self.model.hidden,
                classes: self.data.classes,
            },
        }
    }

    /// Trigger with the default index set resolved against the feature
    /// count.
    pub fn trigger_spec(&self) -> TriggerSpec {
        let indices = if self.attack.trigger.feature_indices.is_empty() {
            let n = self.data.features.clamp(1, 4);
            (self.data.features - n..self.data.features).collect()
        } else {
            self.attack.trigger.feature_indices.clone()
        };
        TriggerSpec {
            feature_indices: indices,
            trigger_value: self.attack.trigger.value,
            target_label: self.attack.trigger.target_label,
            n_segments: self.attack.trigger.segments,
        }
    }

    /// Checks every invariant, reporting all violations at once with their
    /// key paths.
    pub fn validate(&self) -> Result<()> {
        let mut problems: Vec<String> = Vec::new();
        fn check(problems: &mut Vec<String>, ok: bool, key: &str, msg: &str) {
            if !ok {
                problems.push(format!("{}: {}", key, msg));
            }
        }

        check(
            &mut problems,
            self.n_clients >= 1,
            "n_clients",
            "must be at least 1",
        );
        check(
            &mut problems,
            (0.0..0.5).contains(&self.malicious_fraction),
            "malicious_fraction",
            "must be in [0, 0.5)",
        );
        check(
            &mut problems,
            self.rounds >= 1,
            "rounds",
            "must be at least 1",
        );
        check(&mut problems, self.lr > 0.0, "lr", "must be positive");
        check(
            &mut problems,
            self.selection_rate > 0.0 && self.selection_rate <= 1.0,
            "selection_rate",
            "must be in (0, 1]",
        );
        check(
            &mut problems,
            self.dp_noise >= 0.0,
            "dp_noise",
            "must be nonnegative",
        );
        if self.detector != DetectorKind::None {
            check(
                &mut problems,
                self.epsilon >= 2,
                "epsilon",
                "must be at least 2",
            );
            check(
                &mut problems,
                self.epsilon < self.rounds,
                "epsilon",
                "must be smaller than rounds",
            );
            check(
                &mut problems,
                self.syngen.delta >= 1 && self.syngen.delta < self.epsilon,
                "syngen.delta",
                "must be in [1, epsilon - 1]",
            );
            check(
                &mut problems,
                self.syngen.iterations >= 1,
                "syngen.iterations",
                "must be at least 1",
            );
            check(
                &mut problems,
                self.syngen.size >= 1,
                "syngen.size",
                "must be at least 1",
            );
            check(
                &mut problems,
                self.syngen.outer_lr > 0.0,
                "syngen.outer_lr",
                "must be positive",
            );
            check(
                &mut problems,
                self.syngen.inner_lr > 0.0,
                "syngen.inner_lr",
                "must be positive",
            );
        }
        check(
            &mut problems,
            self.data.classes >= 2,
            "data.classes",
            "must be at least 2",
        );
        check(
            &mut problems,
            self.data.features >= self.data.classes,
            "data.features",
            "must be at least data.classes",
        );
        check(
            &mut problems,
            self.data.per_class >= 1,
            "data.per_class",
            "must be at least 1",
        );
        check(
            &mut problems,
            self.data.test_per_class >= 1,
            "data.test_per_class",
            "must be at least 1",
        );
        check(
            &mut problems,
            self.data.separation > 0.0,
            "data.separation",
            "must be positive",
        );
        match self.partition.scheme {
            SchemeKind::Probabilistic => {
                check(
                    &mut problems,
                    self.n_clients >= self.data.classes,
                    "n_clients",
                    "must be at least data.classes for the probabilistic scheme",
                );
                let min_q = 1.0 / self.data.classes as f64;
                check(
                    &mut problems,
                    self.partition.q >= min_q - 1e-12 && self.partition.q <= 1.0,
                    "partition.q",
                    "must be in [1/classes, 1]",
                );
            }
            SchemeKind::LabelRestricted => {
                check(
                    &mut problems,
                    self.partition.classes_per_client >= 1
                        && self.partition.classes_per_client <= self.data.classes,
                    "partition.classes_per_client",
                    "must be in [1, data.classes]",
                );
            }
        }
        if let Some(k) = self.ar_k {
            match self.ar {
                ArKind::TrimmedMean => check(
                    &mut problems,
                    self.n_clients > 2 * k,
                    "ar_k",
                    "trimmed mean requires n_clients > 2k",
                ),
                ArKind::Krum => check(
                    &mut problems,
                    self.n_clients >= k + 3,
                    "ar_k",
                    "krum requires n_clients >= k + 3",
                ),
                _ => {}
            }
        }
        check(
            &mut problems,
            self.attack.poison_fraction > 0.0 && self.attack.poison_fraction <= 1.0,
            "attack.poison_fraction",
            "must be in (0, 1]",
        );
        if let Some(lambda) = self.attack.lambda {
            check(
                &mut problems,
                lambda > 0.0,
                "attack.lambda",
                "must be positive",
            );
        }
        if self.attack.kind.uses_trigger() {
            if let Err(e) = self
                .trigger_spec()
                .validate(self.data.features, self.data.classes)
            {
                problems.push(format!("attack.trigger: {}", e));
            }
        }
        if let Some(perm) = &self.attack.flip_permutation {
            let m = self.data.classes;
            let mut seen = vec![false; m];
            let bijection = perm.len() == m
                && perm.iter().all(|&p| {
                    if p < m && !seen[p] {
                        seen[p] = true;
                        true
                    } else {
                        false
                    }
                });
            check(
                &mut problems,
                bijection,
                "attack.flip_permutation",
                "must be a bijection on [0, data.classes)",
            );
        }
        if self.attack.kind != AttackKind::None {
            check(
                &mut problems,
                self.malicious_count() >= 1,
                "malicious_fraction",
                "attack configured but the malicious count rounds to zero",
            );
        }

        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_valid_defaults() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg.n_clients, 20);
        assert_eq!(cfg.epsilon, 25);
        assert_eq!(cfg.syngen.delta, 15);
        assert_eq!(cfg.syngen.outer_lr, 0.1);
        assert_eq!(cfg.malicious_count(), 6);
        assert_eq!(cfg.detector, DetectorKind::SafeflCl);
    }

    #[test]
    fn dotted_keys_reach_nested_sections() {
        let cfg = ExperimentConfig::from_toml(
            "attack.kind = \"scaling\"\nattack.lambda = 10.0\nattack.trigger.value = 2.5\n",
        )
        .unwrap();
        assert_eq!(cfg.attack.kind, AttackKind::Scaling);
        assert_eq!(cfg.attack.lambda, Some(10.0));
        assert_eq!(cfg.attack.trigger.value, 2.5);
    }

    #[test]
    fn validation_reports_key_paths() {
        let err =
            ExperimentConfig::from_toml("malicious_fraction = 0.6\nepsilon = 99\n").unwrap_err();
        let text = err.to_string();
        assert!(text.contains("malicious_fraction"), "{}", text);
        assert!(text.contains("epsilon"), "{}", text);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml("no_such_key = 1\n").is_err());
        assert!(ExperimentConfig::from_toml("attack.bogus = 1\n").is_err());
    }

    #[test]
    fn default_trigger_takes_last_features() {
        let cfg = ExperimentConfig::from_toml("data.features = 16\n").unwrap();
        assert_eq!(cfg.trigger_spec().feature_indices, vec![12, 13, 14, 15]);
    }

    #[test]
    fn delta_must_fit_inside_epsilon() {
        let err = ExperimentConfig::from_toml("epsilon = 10\nsyngen.delta = 10\n").unwrap_err();
        assert!(err.to_string().contains("syngen.delta"));
        // Irrelevant when no detector is active.
        assert!(ExperimentConfig::from_toml(
            "detector = \"none\"\nepsilon = 10\nsyngen.delta = 10\n"
        )
        .is_ok());
    }
}
