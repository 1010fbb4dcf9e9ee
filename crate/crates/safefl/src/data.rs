//! Desk-scale classification datasets, client partitioning, and data-level
//! manipulations (backdoor triggers, label flips).

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Labeled feature matrix. Features are stored row-major, `n x features`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub n_features: usize,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<usize>,
        n_features: usize,
        n_classes: usize,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::invalid("dataset must contain at least one sample"));
        }
        if features.len() != labels.len() * n_features {
            return Err(Error::ShapeMismatch(format!(
                "{} feature values for {} samples of width {}",
                features.len(),
                labels.len(),
                n_features
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::invalid(format!(
                "label {} out of range for {} classes",
                bad, n_classes
            )));
        }
        if !features.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("dataset features"));
        }
        Ok(Dataset {
            features,
            labels,
            n_features,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    /// Sub-dataset from row indices (rows are copied in the given order).
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let mut features = Vec::with_capacity(indices.len() * self.n_features);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset::new(features, labels, self.n_features, self.n_classes)
    }

    /// Columnar CSV dump with header `f0..f{F-1},label`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        for j in 0..self.n_features {
            if j > 0 {
                write!(out, ",")?;
            }
            write!(out, "f{}", j)?;
        }
        writeln!(out, ",label")?;
        for i in 0..self.len() {
            for (j, v) in self.row(i).iter().enumerate() {
                if j > 0 {
                    write!(out, ",")?;
                }
                write!(out, "{}", v)?;
            }
            writeln!(out, ",{}", self.labels[i])?;
        }
        Ok(())
    }
}

/// Gaussian blob task: one unit-variance cluster per class, class means
/// placed on scaled coordinate axes so every pair of means is at distance
/// `separation * sqrt(2) >= separation`. Deterministic per seed.
pub fn gen_blobs(
    n_per_class: usize,
    n_classes: usize,
    n_features: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_classes < 2 {
        return Err(Error::invalid("gen_blobs requires at least 2 classes"));
    }
    if n_features < n_classes {
        return Err(Error::invalid(format!(
            "gen_blobs requires features >= classes ({} < {})",
            n_features, n_classes
        )));
    }
    if n_per_class == 0 {
        return Err(Error::invalid("gen_blobs requires n_per_class >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n_per_class * n_classes;
    let mut features = Vec::with_capacity(n * n_features);
    let mut labels = Vec::with_capacity(n);
    for class in 0..n_classes {
        for _ in 0..n_per_class {
            for j in 0..n_features {
                let mean = if j == class { separation } else { 0.0 };
                let noise: f64 = StandardNormal.sample(&mut rng);
                features.push(mean + noise);
            }
            labels.push(class);
        }
    }
    // Rows are emitted in shuffled order, like any real training dump.
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let dataset = Dataset::new(features, labels, n_features, n_classes)?;
    dataset.subset(&order)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionScheme {
    /// Group-probability scheme: a sample with label `g` joins group `g`
    /// with probability `q`, any other group with probability `(1-q)/(M-1)`.
    /// Clients are spread round-robin over the `M` groups.
    ProbabilisticQ,
    /// Purely label-based skew: client `i` holds only the classes
    /// `{cpc*i .. cpc*i + cpc - 1} mod M` where `cpc = classes_per_client`.
    LabelRestricted,
}

#[derive(Debug, Clone)]
pub struct PartitionSpec {
    pub scheme: PartitionScheme,
    pub q: f64,
    pub classes_per_client: usize,
    pub n_clients: usize,
    pub seed: u64,
}

impl PartitionSpec {
    fn validate(&self, n_classes: usize) -> Result<()> {
        if self.n_clients == 0 {
            return Err(Error::invalid("partition requires at least one client"));
        }
        match self.scheme {
            PartitionScheme::ProbabilisticQ => {
                if self.n_clients < n_classes {
                    return Err(Error::invalid(format!(
                        "probabilistic scheme requires n_clients >= classes ({} < {})",
                        self.n_clients, n_classes
                    )));
                }
                let min_q = 1.0 / n_classes as f64;
                if !(self.q > min_q - 1e-12 && self.q <= 1.0) {
                    return Err(Error::invalid(format!(
                        "q = {} outside [1/{}, 1]",
                        self.q, n_classes
                    )));
                }
            }
            PartitionScheme::LabelRestricted => {
                if self.classes_per_client == 0 || self.classes_per_client > n_classes {
                    return Err(Error::invalid(format!(
                        "classes_per_client = {} outside [1, {}]",
                        self.classes_per_client, n_classes
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Splits `dataset` into `n_clients` disjoint shards whose union is the
/// input exactly. Fails if any client would end up empty.
pub fn partition(dataset: &Dataset, spec: &PartitionSpec) -> Result<Vec<Dataset>> {
    spec.validate(dataset.n_classes)?;
    let m = dataset.n_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut per_client: Vec<Vec<usize>> = vec![Vec::new(); spec.n_clients];

    match spec.scheme {
        PartitionScheme::ProbabilisticQ => {
            // Clients are spread over the M groups round-robin by index.
            let mut group_members: Vec<Vec<usize>> = vec![Vec::new(); m];
            for client in 0..spec.n_clients {
                group_members[client % m].push(client);
            }
            for i in 0..dataset.len() {
                let own = dataset.labels[i];
                let group = if rng.gen::<f64>() < spec.q {
                    own
                } else {
                    // Uniform over the other M-1 groups.
                    let mut g = rng.gen_range(0..m - 1);
                    if g >= own {
                        g += 1;
                    }
                    g
                };
                let members = &group_members[group];
                let client = members[rng.gen_range(0..members.len())];
                per_client[client].push(i);
            }
        }
        PartitionScheme::LabelRestricted => {
            let cpc = restricted_class_sets(spec.classes_per_client, spec.n_clients, m);
            // eligible[c] = clients whose class set contains c
            let mut eligible: Vec<Vec<usize>> = vec![Vec::new(); m];
            for (client, classes) in cpc.iter().enumerate() {
                for &c in classes {
                    eligible[c].push(client);
                }
            }
            for (c, list) in eligible.iter().enumerate() {
                if list.is_empty() && dataset.labels.contains(&c) {
                    return Err(Error::invalid(format!(
                        "no client is eligible for class {}; add clients or widen classes_per_client",
                        c
                    )));
                }
            }
            for i in 0..dataset.len() {
                let list = &eligible[dataset.labels[i]];
                let client = list[rng.gen_range(0..list.len())];
                per_client[client].push(i);
            }
        }
    }

    if let Some(empty) = per_client.iter().position(|v| v.is_empty()) {
        return Err(Error::invalid(format!(
            "client {} received no samples; resize the dataset or client count",
            empty
        )));
    }
    per_client.iter().map(|idx| dataset.subset(idx)).collect()
}

/// Class set per client for the label-restricted scheme: client `i` holds
/// the contiguous block `{cpc*i + j mod M : j in 0..cpc}`.
fn restricted_class_sets(cpc: usize, n_clients: usize, m: usize) -> Vec<Vec<usize>> {
    (0..n_clients)
        .map(|i| (0..cpc).map(|j| (cpc * i + j) % m).collect())
        .collect()
}

/// Backdoor trigger: a fixed value stamped onto chosen feature positions,
/// with the label forced to `target_label`. `n_segments` supports the
/// distributed variant, which splits the index set into disjoint chunks.
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerSpec {
    pub feature_indices: Vec<usize>,
    pub trigger_value: f64,
    pub target_label: usize,
    pub n_segments: usize,
}

impl TriggerSpec {
    pub fn validate(&self, n_features: usize, n_classes: usize) -> Result<()> {
        if self.feature_indices.is_empty() {
            return Err(Error::invalid("trigger needs at least one feature index"));
        }
        let mut seen = vec![false; n_features];
        for &i in &self.feature_indices {
            if i >= n_features {
                return Err(Error::invalid(format!(
                    "trigger index {} out of range for {} features",
                    i, n_features
                )));
            }
            if seen[i] {
                return Err(Error::invalid(format!("duplicate trigger index {}", i)));
            }
            seen[i] = true;
        }
        if self.target_label >= n_classes {
            return Err(Error::invalid("trigger target label out of range"));
        }
        if self.n_segments == 0 || self.n_segments > self.feature_indices.len() {
            return Err(Error::invalid(
                "n_segments must be in [1, number of trigger indices]",
            ));
        }
        if !self.trigger_value.is_finite() {
            return Err(Error::NonFinite("trigger value"));
        }
        Ok(())
    }

    /// Disjoint contiguous chunks of the index list, balanced in size.
    pub fn segments(&self) -> Vec<Vec<usize>> {
        let n = self.feature_indices.len();
        (0..self.n_segments)
            .map(|s| {
                let lo = s * n / self.n_segments;
                let hi = (s + 1) * n / self.n_segments;
                self.feature_indices[lo..hi].to_vec()
            })
            .collect()
    }
}

/// Which part of the trigger to stamp.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TriggerPart {
    All,
    Segment(usize),
}

/// Appends poisoned copies of `ceil(fraction * n)` evenly spaced rows:
/// trigger positions overwritten with the trigger value, label set to the
/// target. Even spacing keeps the poisoned set representative regardless
/// of row order. Original rows are never modified.
pub fn apply_trigger(
    dataset: &Dataset,
    trigger: &TriggerSpec,
    fraction: f64,
    part: TriggerPart,
) -> Result<Dataset> {
    trigger.validate(dataset.n_features, dataset.n_classes)?;
    if fraction.is_nan() || fraction <= 0.0 || fraction > 1.0 {
        return Err(Error::invalid("poison fraction must be in (0, 1]"));
    }
    let indices: Vec<usize> = match part {
        TriggerPart::All => trigger.feature_indices.clone(),
        TriggerPart::Segment(s) => {
            if s >= trigger.n_segments {
                return Err(Error::invalid(format!(
                    "segment {} out of range for {} segments",
                    s, trigger.n_segments
                )));
            }
            trigger.segments()[s].clone()
        }
    };
    let n_poison = ((fraction * dataset.len() as f64).ceil() as usize).min(dataset.len());
    let mut features = dataset.features.clone();
    let mut labels = dataset.labels.clone();
    for k in 0..n_poison {
        let i = k * dataset.len() / n_poison;
        let mut row = dataset.row(i).to_vec();
        for &j in &indices {
            row[j] = trigger.trigger_value;
        }
        features.extend_from_slice(&row);
        labels.push(trigger.target_label);
    }
    Dataset::new(features, labels, dataset.n_features, dataset.n_classes)
}

/// Stamps the full trigger onto every row in place (used for evaluating
/// attack success on test data).
pub fn stamp_trigger(dataset: &Dataset, trigger: &TriggerSpec) -> Result<Dataset> {
    trigger.validate(dataset.n_features, dataset.n_classes)?;
    let mut features = dataset.features.clone();
    for i in 0..dataset.len() {
        for &j in &trigger.feature_indices {
            features[i * dataset.n_features + j] = trigger.trigger_value;
        }
    }
    Dataset::new(
        features,
        dataset.labels.clone(),
        dataset.n_features,
        dataset.n_classes,
    )
}

/// Maps every label through `permutation`, which must be a bijection on
/// `[0, n_classes)`.
pub fn flip_labels(dataset: &Dataset, permutation: &[usize]) -> Result<Dataset> {
    let m = dataset.n_classes;
    if permutation.len() != m {
        return Err(Error::invalid(format!(
            "permutation has {} entries, expected {}",
            permutation.len(),
            m
        )));
    }
    let mut seen = vec![false; m];
    for &p in permutation {
        if p >= m || seen[p] {
            return Err(Error::invalid("label map is not a bijection"));
        }
        seen[p] = true;
    }
    let labels = dataset.labels.iter().map(|&l| permutation[l]).collect();
    Dataset::new(dataset.features.clone(), labels, dataset.n_features, m)
}

/// The default flip `l -> M-1-l`.
pub fn reversal_permutation(n_classes: usize) -> Vec<usize> {
    (0..n_classes).map(|l| n_classes - 1 - l).collect()
}

/// Uniformly sampled row indices without replacement; clamps `count` to the
/// dataset size.
pub fn sample_batch(n: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let count = count.min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.truncate(count);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }

    #[test]
    fn blobs_two_points_far_apart() {
        let d = gen_blobs(1, 2, 2, 10.0, 7).unwrap();
        assert_eq!(d.len(), 2);
        let mut labels = d.labels.clone();
        labels.sort_unstable();
        assert_eq!(labels, vec![0, 1]);
        assert!(dist(d.row(0), d.row(1)) >= 10.0);
    }

    #[test]
    fn blobs_are_deterministic_per_seed() {
        let a = gen_blobs(10, 3, 5, 4.0, 99).unwrap();
        let b = gen_blobs(10, 3, 5, 4.0, 99).unwrap();
        assert_eq!(a, b);
        let c = gen_blobs(10, 3, 5, 4.0, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn blobs_validate_dimensions() {
        assert!(gen_blobs(1, 1, 4, 1.0, 0).is_err());
        assert!(gen_blobs(1, 4, 3, 1.0, 0).is_err());
    }

    #[test]
    fn partition_preserves_sample_multiset() {
        let d = gen_blobs(40, 3, 4, 5.0, 3).unwrap();
        let spec = PartitionSpec {
            scheme: PartitionScheme::ProbabilisticQ,
            q: 0.5,
            classes_per_client: 3,
            n_clients: 6,
            seed: 17,
        };
        let parts = partition(&d, &spec).unwrap();
        assert_eq!(parts.len(), 6);
        let mut rows: Vec<(Vec<u64>, usize)> = Vec::new();
        for p in &parts {
            for i in 0..p.len() {
                rows.push((p.row(i).iter().map(|v| v.to_bits()).collect(), p.labels[i]));
            }
        }
        let mut original: Vec<(Vec<u64>, usize)> = (0..d.len())
            .map(|i| (d.row(i).iter().map(|v| v.to_bits()).collect(), d.labels[i]))
            .collect();
        rows.sort();
        original.sort();
        assert_eq!(rows, original);
    }

    #[test]
    fn q_one_sends_every_sample_to_its_own_group() {
        let d = gen_blobs(50, 2, 3, 5.0, 5).unwrap();
        let spec = PartitionSpec {
            scheme: PartitionScheme::ProbabilisticQ,
            q: 1.0,
            classes_per_client: 1,
            n_clients: 4,
            seed: 2,
        };
        // Groups are round-robin: clients {0,2} hold group 0, {1,3} group 1.
        let parts = partition(&d, &spec).unwrap();
        for (client, p) in parts.iter().enumerate() {
            for &l in &p.labels {
                assert_eq!(l, client % 2);
            }
        }
    }

    #[test]
    fn label_restricted_caps_class_cardinality() {
        let d = gen_blobs(60, 6, 8, 5.0, 9).unwrap();
        let spec = PartitionSpec {
            scheme: PartitionScheme::LabelRestricted,
            q: 0.5,
            classes_per_client: 3,
            n_clients: 4,
            seed: 21,
        };
        let parts = partition(&d, &spec).unwrap();
        for p in &parts {
            let mut classes: Vec<usize> = p.labels.clone();
            classes.sort_unstable();
            classes.dedup();
            assert!(classes.len() <= 3, "client holds classes {:?}", classes);
        }
    }

    #[test]
    fn own_group_frequency_tracks_q() {
        // Empirical own-label frequency within 3 standard errors of q.
        let d = gen_blobs(3000, 4, 4, 5.0, 11).unwrap();
        let q = 0.7;
        let spec = PartitionSpec {
            scheme: PartitionScheme::ProbabilisticQ,
            q,
            classes_per_client: 1,
            n_clients: 4,
            seed: 31,
        };
        let parts = partition(&d, &spec).unwrap();
        // Client i is the sole member of group i here (4 clients, 4 groups).
        let own: usize = parts
            .iter()
            .enumerate()
            .map(|(c, p)| p.labels.iter().filter(|&&l| l == c % 4).count())
            .sum();
        let n = d.len() as f64;
        let se = (q * (1.0 - q) / n).sqrt();
        let freq = own as f64 / n;
        assert!(
            (freq - q).abs() <= 3.0 * se,
            "own-group freq {} vs q {} (se {})",
            freq,
            q,
            se
        );
    }

    #[test]
    fn iid_group_assignment_passes_chi_square() {
        // q = 1/M means the group of a sample is uniform; chi-square over
        // 10,000 samples must not reject uniformity at alpha = 0.01.
        let m = 4;
        let d = gen_blobs(2500, m, 4, 5.0, 13).unwrap();
        let spec = PartitionSpec {
            scheme: PartitionScheme::ProbabilisticQ,
            q: 1.0 / m as f64,
            classes_per_client: 1,
            n_clients: m,
            seed: 41,
        };
        let parts = partition(&d, &spec).unwrap();
        let expected = d.len() as f64 / m as f64;
        let chi2: f64 = parts
            .iter()
            .map(|p| {
                let o = p.len() as f64;
                (o - expected) * (o - expected) / expected
            })
            .sum();
        // Critical value of chi-square with 3 degrees of freedom at 0.01.
        assert!(chi2 < 11.345, "chi2 = {}", chi2);
    }

    #[test]
    fn trigger_appends_poisoned_copies() {
        let d = Dataset::new(vec![1.0, 2.0, 3.0, 4.0], vec![0, 1], 2, 2).unwrap();
        let trig = TriggerSpec {
            feature_indices: vec![1],
            trigger_value: 9.0,
            target_label: 1,
            n_segments: 1,
        };
        let p = apply_trigger(&d, &trig, 1.0, TriggerPart::All).unwrap();
        assert_eq!(p.len(), 4);
        assert_eq!(&p.labels[2..], &[1, 1]);
        assert_eq!(p.row(2), &[1.0, 9.0]);
        assert_eq!(p.row(3), &[3.0, 9.0]);
        // Originals untouched.
        assert_eq!(p.row(0), d.row(0));
        assert_eq!(p.row(1), d.row(1));
    }

    #[test]
    fn trigger_segments_are_disjoint_and_balanced() {
        let trig = TriggerSpec {
            feature_indices: (0..8).collect(),
            trigger_value: 1.0,
            target_label: 0,
            n_segments: 4,
        };
        let segs = trig.segments();
        assert_eq!(segs.len(), 4);
        let mut all: Vec<usize> = segs.iter().flatten().copied().collect();
        assert!(segs.iter().all(|s| s.len() == 2));
        all.sort_unstable();
        assert_eq!(all, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn segment_out_of_range_is_rejected() {
        let d = Dataset::new(vec![1.0, 2.0], vec![0], 2, 2).unwrap();
        let trig = TriggerSpec {
            feature_indices: vec![0, 1],
            trigger_value: 1.0,
            target_label: 0,
            n_segments: 2,
        };
        assert!(apply_trigger(&d, &trig, 0.5, TriggerPart::Segment(2)).is_err());
    }

    #[test]
    fn flip_labels_involution() {
        let d = gen_blobs(5, 4, 4, 3.0, 1).unwrap();
        let perm = reversal_permutation(4);
        let once = flip_labels(&d, &perm).unwrap();
        assert_ne!(once.labels, d.labels);
        let twice = flip_labels(&once, &perm).unwrap();
        assert_eq!(twice, d);
        let identity: Vec<usize> = (0..4).collect();
        assert_eq!(flip_labels(&d, &identity).unwrap(), d);
    }

    #[test]
    fn flip_rejects_non_bijection() {
        let d = gen_blobs(2, 2, 2, 3.0, 1).unwrap();
        assert!(flip_labels(&d, &[0, 0]).is_err());
        assert!(flip_labels(&d, &[0]).is_err());
    }

    #[test]
    fn csv_round_layout() {
        let d = Dataset::new(vec![1.5, -2.0, 0.25, 3.0], vec![1, 0], 2, 2).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "f0,f1,label\n1.5,-2,1\n0.25,3,0\n");
    }
}
