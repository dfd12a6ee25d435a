//! Evaluation studies: steered-vs-unsteered comparisons, phase-restricted
//! steering ablations, and the training-data-size sweep.

use serde::{Deserialize, Serialize};

use crate::corpus::{sample_k_per_emotion, Emotion, Instance, Vocab, EMOTIONS};
use crate::error::Result;
use crate::flow::FeatureRef;
use crate::metrics::{f1_scores, MetricsTable};
use crate::model::{forward, LabelIds, Model};
use crate::sae::SaeParams;
use crate::steering::{
    steered_macro_f1, train_steering, SteeringConfig, SteeringContext, SteeringExample,
    SteeringVector,
};

// re-export the phase view used by the ablation study
pub use crate::flow::PhaseMap;

/// Builds cached steering examples for the given corpus ids.
pub fn build_examples(
    model: &Model,
    instances: &[Instance],
    vocab: &Vocab,
    ids: &[usize],
) -> Result<Vec<SteeringExample>> {
    ids.iter()
        .map(|&i| {
            let inst = &instances[i];
            let tokens = vocab.encode(&inst.prompt_tokens());
            SteeringExample::new(model, &tokens, inst.label)
        })
        .collect()
}

/// Unsteered restricted-logit predictions from cached examples.
pub fn unsteered_metrics(labels: &LabelIds, examples: &[&SteeringExample]) -> MetricsTable {
    let preds: Vec<Emotion> = examples
        .iter()
        .map(|ex| {
            let r = forward::restrict_logits(&ex.cache.final_logits, labels);
            EMOTIONS[forward::argmax6(&r)]
        })
        .collect();
    let truth: Vec<Emotion> = examples.iter().map(|e| e.label).collect();
    f1_scores(&preds, &truth)
}

/// Steered predictions and metrics for a trained vector.
pub fn steered_metrics(
    model: &Model,
    saes: &[SaeParams],
    labels: &LabelIds,
    vector: &SteeringVector,
    examples: &[&SteeringExample],
) -> Result<MetricsTable> {
    let refs: Vec<FeatureRef> = vector.entries.iter().map(|&(f, _)| f).collect();
    let ctx = SteeringContext::new(model, saes, &refs)?;
    let s = vector.values();
    let preds: Vec<Emotion> = examples
        .iter()
        .map(|ex| {
            let logits = ctx.steered_logits(&ex.cache, &s);
            let r = forward::restrict_logits(&logits, labels);
            EMOTIONS[forward::argmax6(&r)]
        })
        .collect();
    let truth: Vec<Emotion> = examples.iter().map(|e| e.label).collect();
    Ok(f1_scores(&preds, &truth))
}

/// Trains a steering vector on a feature set and evaluates it.
pub fn train_and_eval(
    model: &Model,
    saes: &[SaeParams],
    labels: &LabelIds,
    features: &[FeatureRef],
    train: &[&SteeringExample],
    validation: &[&SteeringExample],
    cfg: &SteeringConfig,
) -> Result<(SteeringVector, MetricsTable)> {
    let vector = train_steering(model, saes, labels, features, train, validation, cfg)?;
    let table = steered_metrics(model, saes, labels, &vector, validation)?;
    Ok((vector, table))
}

// ── phase ablation ──────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PhaseAblationRow {
    /// Empty set = unsteered baseline row.
    pub phases: Vec<usize>,
    pub n_features: usize,
    /// False when the phase filter leaves no features (row is n/a).
    pub available: bool,
    pub macro_f1: f64,
    pub per_emotion_f1: [f64; 6],
}

pub const PHASE_SUBSETS: [&[usize]; 7] =
    [&[], &[1], &[2], &[3], &[1, 2], &[2, 3], &[1, 2, 3]];

/// Retrains steering with the causal feature set restricted to each phase
/// subset and reports validation metrics per row. The empty subset is the
/// unsteered baseline.
#[allow(clippy::too_many_arguments)]
pub fn phase_ablation_study(
    model: &Model,
    saes: &[SaeParams],
    labels: &LabelIds,
    f_causal: &[FeatureRef],
    phases: &PhaseMap,
    train: &[&SteeringExample],
    validation: &[&SteeringExample],
    cfg: &SteeringConfig,
) -> Result<Vec<PhaseAblationRow>> {
    let mut rows = Vec::new();
    for subset in PHASE_SUBSETS {
        if subset.is_empty() {
            let t = unsteered_metrics(labels, validation);
            rows.push(PhaseAblationRow {
                phases: vec![],
                n_features: 0,
                available: true,
                macro_f1: t.macro_f1,
                per_emotion_f1: t.per_emotion.map(|m| m.f1),
            });
            continue;
        }
        let filtered: Vec<FeatureRef> = f_causal
            .iter()
            .copied()
            .filter(|f| subset.contains(&phases.phase(f.layer)))
            .collect();
        if filtered.is_empty() {
            rows.push(PhaseAblationRow {
                phases: subset.to_vec(),
                n_features: 0,
                available: false,
                macro_f1: 0.0,
                per_emotion_f1: [0.0; 6],
            });
            continue;
        }
        let (_, table) =
            train_and_eval(model, saes, labels, &filtered, train, validation, cfg)?;
        rows.push(PhaseAblationRow {
            phases: subset.to_vec(),
            n_features: filtered.len(),
            available: true,
            macro_f1: table.macro_f1,
            per_emotion_f1: table.per_emotion.map(|m| m.f1),
        });
    }
    Ok(rows)
}

// ── data efficiency ─────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DataEfficiencyRow {
    pub k: usize,
    pub seeds: usize,
    /// True when the train split cannot supply k per emotion (row skipped).
    pub skipped: bool,
    pub macro_f1: f64,
    pub per_emotion_f1: [f64; 6],
}

/// Retrains steering on k labeled examples per emotion for each k; rows
/// with k <= 100 are averaged over `n_seeds` samplings.
#[allow(clippy::too_many_arguments)]
pub fn data_efficiency_sweep(
    model: &Model,
    saes: &[SaeParams],
    labels: &LabelIds,
    f_causal: &[FeatureRef],
    instances: &[Instance],
    train_ids: &[usize],
    train_examples: &[SteeringExample],
    validation: &[&SteeringExample],
    ks: &[usize],
    n_seeds: usize,
    cfg: &SteeringConfig,
) -> Result<Vec<DataEfficiencyRow>> {
    // map corpus id -> cached example
    let by_id: std::collections::HashMap<usize, &SteeringExample> = train_ids
        .iter()
        .copied()
        .zip(train_examples.iter())
        .collect();
    let max_k = EMOTIONS
        .iter()
        .map(|&e| train_ids.iter().filter(|&&i| instances[i].label == e).count())
        .min()
        .unwrap_or(0);

    let mut rows = Vec::new();
    for &k in ks {
        if k > max_k {
            rows.push(DataEfficiencyRow {
                k,
                seeds: 0,
                skipped: true,
                macro_f1: 0.0,
                per_emotion_f1: [0.0; 6],
            });
            continue;
        }
        let seeds = if k <= 100 { n_seeds } else { 1 };
        let mut macro_acc = 0.0f64;
        let mut per_acc = [0.0f64; 6];
        for s in 0..seeds {
            let subset =
                sample_k_per_emotion(instances, train_ids, k, cfg.seed ^ (s as u64 + 1))?;
            let train: Vec<&SteeringExample> =
                subset.iter().map(|id| by_id[id]).collect();
            let run_cfg = SteeringConfig { seed: cfg.seed ^ (s as u64 + 1), ..cfg.clone() };
            let (_, table) =
                train_and_eval(model, saes, labels, f_causal, &train, validation, &run_cfg)?;
            macro_acc += table.macro_f1;
            for (acc, m) in per_acc.iter_mut().zip(table.per_emotion.iter()) {
                *acc += m.f1;
            }
        }
        rows.push(DataEfficiencyRow {
            k,
            seeds,
            skipped: false,
            macro_f1: macro_acc / seeds as f64,
            per_emotion_f1: per_acc.map(|v| v / seeds as f64),
        });
    }
    Ok(rows)
}

/// Language-model preservation: perplexity ratio steered / unsteered on
/// held-out sequences with all-position steering.
pub fn ppl_ratio(
    model: &Model,
    saes: &[SaeParams],
    vector: &SteeringVector,
    seqs: &[Vec<u32>],
) -> Result<(f64, f64)> {
    let base = forward::perplexity(model, seqs, None)?;
    let refs: Vec<FeatureRef> = vector.entries.iter().map(|&(f, _)| f).collect();
    let ctx = SteeringContext::new(model, saes, &refs)?;
    let iv = crate::steering::AllPositionSteering::new(&ctx, vector);
    let steered = forward::perplexity(model, seqs, Some(&iv))?;
    Ok((base, steered))
}

#[allow(dead_code)]
fn _doc(_: &SteeringVector) {}

/// Makes `steered_macro_f1` visible to integration tests through one path.
pub fn validation_macro_f1(
    model: &Model,
    saes: &[SaeParams],
    labels: &LabelIds,
    vector: &SteeringVector,
    validation: &[&SteeringExample],
) -> Result<f64> {
    let refs: Vec<FeatureRef> = vector.entries.iter().map(|&(f, _)| f).collect();
    let ctx = SteeringContext::new(model, saes, &refs)?;
    Ok(steered_macro_f1(&ctx, labels, validation, &vector.values()))
}
