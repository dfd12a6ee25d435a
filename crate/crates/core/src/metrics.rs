//! Classification metrics over the six emotions: per-class
//! precision/recall/F1, macro-F1, accuracy, and confusion matrices.

use serde::{Deserialize, Serialize};

use crate::corpus::{Emotion, EMOTIONS};

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsTable {
    pub per_emotion: [ClassMetrics; 6],
    /// Unweighted mean of the six per-emotion F1 values.
    pub macro_f1: f64,
    pub accuracy: f64,
    /// confusion[true][predicted]
    pub confusion: [[usize; 6]; 6],
}

/// Unweighted mean of per-class F1 values.
pub fn macro_f1_of(per_class: &[f64]) -> f64 {
    per_class.iter().sum::<f64>() / per_class.len() as f64
}

pub fn confusion_matrix(predictions: &[Emotion], labels: &[Emotion]) -> [[usize; 6]; 6] {
    assert_eq!(predictions.len(), labels.len());
    let mut m = [[0usize; 6]; 6];
    for (p, t) in predictions.iter().zip(labels) {
        m[t.index()][p.index()] += 1;
    }
    m
}

/// Per-class F1 = 2PR/(P+R), 0 when P+R = 0 (classes never predicted score
/// zero). Macro-F1 is the unweighted mean over all six emotions.
pub fn f1_scores(predictions: &[Emotion], labels: &[Emotion]) -> MetricsTable {
    let confusion = confusion_matrix(predictions, labels);
    let mut per = [ClassMetrics::default(); 6];
    let mut correct = 0usize;
    for (c, m) in per.iter_mut().enumerate() {
        let tp = confusion[c][c];
        let support: usize = confusion[c].iter().sum();
        let predicted: usize = (0..6).map(|t| confusion[t][c]).sum();
        let precision = if predicted > 0 { tp as f64 / predicted as f64 } else { 0.0 };
        let recall = if support > 0 { tp as f64 / support as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        *m = ClassMetrics { precision, recall, f1, support };
        correct += tp;
    }
    let total: usize = labels.len();
    MetricsTable {
        per_emotion: per,
        macro_f1: macro_f1_of(&per.map(|m| m.f1)),
        accuracy: if total > 0 { correct as f64 / total as f64 } else { 0.0 },
        confusion,
    }
}

pub fn per_emotion_f1(table: &MetricsTable) -> [f64; 6] {
    table.per_emotion.map(|m| m.f1)
}

/// Display order helper for tables (canonical emotion order).
pub fn emotion_names() -> [&'static str; 6] {
    EMOTIONS.map(|e| e.name())
}
