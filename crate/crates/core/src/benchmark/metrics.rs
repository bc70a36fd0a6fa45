use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{BenchmarkError, ConflictDataset, Provenance};
use crate::distribution::PredictiveDistribution;
use crate::fusion::CredibilityReport;

/// Accuracy and macro-averaged precision, recall and F1.
///
/// Macro averages run over the classes that occur among the labels or the
/// predictions. A class that is never predicted has precision 0; a class
/// whose precision and recall are both 0 has F1 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

/// Reliable-modality identification: the fraction of corrupted instances
/// whose corrupted modality gets credibility no greater than the clean one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmisScores {
    pub overall: f64,
    /// Mean over instances corrupted in each modality; `None` when there are
    /// none.
    pub by_modality: Vec<Option<f64>>,
    pub num_corrupted: usize,
}

/// Classification metrics plus RMIS (absent without corrupted instances).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(flatten)]
    pub classification: ClassificationMetrics,
    pub rmis: Option<RmisScores>,
}

pub fn classification_metrics(
    predictions: &[PredictiveDistribution],
    labels: &[usize],
) -> Result<ClassificationMetrics, BenchmarkError> {
    if predictions.is_empty() {
        return Err(BenchmarkError::EmptyInput);
    }
    if predictions.len() != labels.len() {
        return Err(BenchmarkError::LengthMismatch {
            what: "labels",
            expected: predictions.len(),
            got: labels.len(),
        });
    }
    let decisions: Vec<usize> = predictions.iter().map(|p| p.argmax()).collect();
    let classes: BTreeSet<usize> = labels.iter().chain(&decisions).copied().collect();
    let correct = decisions.iter().zip(labels).filter(|(d, y)| d == y).count();
    let (mut p_sum, mut r_sum, mut f_sum) = (0.0, 0.0, 0.0);
    for &c in &classes {
        let tp = decisions.iter().zip(labels).filter(|&(&d, &y)| d == c && y == c).count() as f64;
        let predicted = decisions.iter().filter(|&&d| d == c).count() as f64;
        let actual = labels.iter().filter(|&&y| y == c).count() as f64;
        let p = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let r = if actual > 0.0 { tp / actual } else { 0.0 };
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        p_sum += p;
        r_sum += r;
        f_sum += f;
    }
    let n = classes.len() as f64;
    Ok(ClassificationMetrics {
        accuracy: correct as f64 / labels.len() as f64,
        macro_precision: p_sum / n,
        macro_recall: r_sum / n,
        macro_f1: f_sum / n,
    })
}

/// RMIS over the corrupted instances of `dataset`. An instance scores 1 when
/// the corrupted modality's CSIC is at most the clean reference, which is
/// the smallest CSIC among the other modalities.
pub fn rmis(reports: &[CredibilityReport], dataset: &ConflictDataset) -> Result<Option<RmisScores>, BenchmarkError> {
    if reports.len() != dataset.len() {
        return Err(BenchmarkError::LengthMismatch {
            what: "credibility reports",
            expected: dataset.len(),
            got: reports.len(),
        });
    }
    let m_count = dataset.num_modalities();
    let mut hits = vec![0usize; m_count];
    let mut totals = vec![0usize; m_count];
    for (report, inst) in reports.iter().zip(&dataset.instances) {
        let Provenance::Corrupted { modality, .. } = inst.provenance else {
            continue;
        };
        if report.csic.len() != m_count {
            return Err(BenchmarkError::LengthMismatch {
                what: "csic entries",
                expected: m_count,
                got: report.csic.len(),
            });
        }
        let clean = report
            .csic
            .iter()
            .enumerate()
            .filter(|&(m, _)| m != modality)
            .map(|(_, &c)| c)
            .fold(f64::INFINITY, f64::min);
        totals[modality] += 1;
        if report.csic[modality] <= clean {
            hits[modality] += 1;
        }
    }
    let total: usize = totals.iter().sum();
    if total == 0 {
        return Ok(None);
    }
    Ok(Some(RmisScores {
        overall: hits.iter().sum::<usize>() as f64 / total as f64,
        by_modality: hits
            .iter()
            .zip(&totals)
            .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
            .collect(),
        num_corrupted: total,
    }))
}
