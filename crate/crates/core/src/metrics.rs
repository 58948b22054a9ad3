//! Stroke classification accuracy over a set of documents.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no documents to evaluate")]
    Empty,
    #[error("document {document}: {preds} predictions for {truths} strokes")]
    Length {
        document: usize,
        preds: usize,
        truths: usize,
    },
    #[error("{predictions} prediction lists for {truths} documents")]
    DocumentCount { predictions: usize, truths: usize },
    #[error("class {class} out of range for {classes} classes")]
    Class { class: usize, classes: usize },
}

fn check_aligned(preds: &[Vec<usize>], truths: &[Vec<usize>]) -> Result<(), MetricsError> {
    if preds.len() != truths.len() {
        return Err(MetricsError::DocumentCount {
            predictions: preds.len(),
            truths: truths.len(),
        });
    }
    for (document, (p, t)) in preds.iter().zip(truths).enumerate() {
        if p.len() != t.len() {
            return Err(MetricsError::Length {
                document,
                preds: p.len(),
                truths: t.len(),
            });
        }
    }
    Ok(())
}

/// Correct strokes over all strokes, pooled across documents.
pub fn overall_accuracy(preds: &[Vec<usize>], truths: &[Vec<usize>]) -> Result<f64, MetricsError> {
    check_aligned(preds, truths)?;
    let total: usize = truths.iter().map(Vec::len).sum();
    if truths.is_empty() || total == 0 {
        return Err(MetricsError::Empty);
    }
    let correct: usize = preds
        .iter()
        .zip(truths)
        .map(|(p, t)| p.iter().zip(t).filter(|(a, b)| a == b).count())
        .sum();
    Ok(correct as f64 / total as f64)
}

/// Per-class accuracy; `None` for classes without support.
pub fn per_class_accuracy(
    preds: &[Vec<usize>],
    truths: &[Vec<usize>],
    classes: usize,
) -> Result<Vec<Option<f64>>, MetricsError> {
    let confusion = confusion_matrix(preds, truths, classes)?;
    Ok(confusion
        .iter()
        .enumerate()
        .map(|(t, row)| {
            let support: usize = row.iter().sum();
            (support > 0).then(|| row[t] as f64 / support as f64)
        })
        .collect())
}

/// `confusion[truth][pred]` stroke counts.
pub fn confusion_matrix(
    preds: &[Vec<usize>],
    truths: &[Vec<usize>],
    classes: usize,
) -> Result<Vec<Vec<usize>>, MetricsError> {
    check_aligned(preds, truths)?;
    let mut m = vec![vec![0; classes]; classes];
    for (p, t) in preds.iter().zip(truths) {
        for (&a, &b) in p.iter().zip(t) {
            if let Some(class) = [a, b].into_iter().find(|&c| c >= classes) {
                return Err(MetricsError::Class { class, classes });
            }
            m[b][a] += 1;
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_documents: usize,
    pub num_strokes: usize,
    pub overall_accuracy: f64,
    /// `null` in JSON for classes without support.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub supports: Vec<usize>,
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn new(
        preds: &[Vec<usize>],
        truths: &[Vec<usize>],
        classes: usize,
    ) -> Result<Self, MetricsError> {
        let overall_accuracy = overall_accuracy(preds, truths)?;
        let confusion = confusion_matrix(preds, truths, classes)?;
        let supports = confusion.iter().map(|r| r.iter().sum()).collect();
        Ok(Self {
            num_documents: truths.len(),
            num_strokes: truths.iter().map(Vec::len).sum(),
            overall_accuracy,
            per_class_accuracy: per_class_accuracy(preds, truths, classes)?,
            supports,
            confusion,
        })
    }

    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec_pretty(self).expect("report serialization")
    }
}
