//! Detection and model-quality metrics.
//!
//! "Malicious" is the positive class throughout. Rates whose denominator
//! is zero are reported as absent rather than zero, matching the usual
//! "NA" table convention.

use crate::data::{stamp_trigger, Dataset, TriggerSpec};
use crate::error::Result;
use crate::fl::{ModelVector, Verdict};
use crate::model::ModelFamily;

/// Confusion-matrix summary of one round of verdicts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionMetrics {
    /// Fraction of evaluated clients classified correctly.
    pub dacc: f64,
    /// Benign clients flagged malicious / benign clients.
    pub fpr: Option<f64>,
    /// Malicious clients passed as benign / malicious clients.
    pub fnr: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

/// Compares verdicts against ground truth, ignoring clients that were not
/// evaluated this round.
pub fn detection_metrics(
    verdicts: &[Verdict],
    truth_malicious: &[bool],
) -> Option<DetectionMetrics> {
    assert_eq!(
        verdicts.len(),
        truth_malicious.len(),
        "verdict and truth vectors must align"
    );
    let mut tp = 0usize; // malicious flagged malicious
    let mut tn = 0usize; // benign passed benign
    let mut fp = 0usize; // benign flagged malicious
    let mut fne = 0usize; // malicious passed benign
    for (&v, &is_mal) in verdicts.iter().zip(truth_malicious) {
        match (v, is_mal) {
            (Verdict::NotEvaluated, _) => {}
            (Verdict::Malicious, true) => tp += 1,
            (Verdict::Malicious, false) => fp += 1,
            (Verdict::Benign, true) => fne += 1,
            (Verdict::Benign, false) => tn += 1,
        }
    }
    let evaluated = tp + tn + fp + fne;
    if evaluated == 0 {
        return None;
    }
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            None
        } else {
            Some(num as f64 / den as f64)
        }
    };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fne);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    Some(DetectionMetrics {
        dacc: (tp + tn) as f64 / evaluated as f64,
        fpr: ratio(fp, fp + tn),
        fnr: ratio(fne, fne + tp),
        precision,
        recall,
        f1,
    })
}

/// Fraction of test samples whose argmax prediction matches the label.
pub fn tacc(model: &ModelVector, family: &ModelFamily, test: &Dataset) -> Result<f64> {
    let logits = family.logits(model.as_slice(), &test.features, test.len())?;
    let m = family.classes();
    let correct = test
        .labels
        .iter()
        .enumerate()
        .filter(|(i, &label)| argmax(&logits[i * m..(i + 1) * m]) == label)
        .count();
    Ok(correct as f64 / test.len() as f64)
}

/// Fraction of trigger-stamped test samples classified as the attacker's
/// target, over samples whose true label differs from the target. `None`
/// when no sample is eligible.
pub fn asr(
    model: &ModelVector,
    family: &ModelFamily,
    test: &Dataset,
    trigger: &TriggerSpec,
) -> Result<Option<f64>> {
    let eligible: Vec<usize> = (0..test.len())
        .filter(|&i| test.labels[i] != trigger.target_label)
        .collect();
    if eligible.is_empty() {
        return Ok(None);
    }
    let subset = test.subset(&eligible)?;
    let stamped = stamp_trigger(&subset, trigger)?;
    let logits = family.logits(model.as_slice(), &stamped.features, stamped.len())?;
    let m = family.classes();
    let hits = (0..stamped.len())
        .filter(|&i| argmax(&logits[i * m..(i + 1) * m]) == trigger.target_label)
        .count();
    Ok(Some(hits as f64 / stamped.len() as f64))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean of the defined entries; `None` if every entry is absent.
pub fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().filter_map(|v| *v).collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}
