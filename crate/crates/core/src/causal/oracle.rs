//! Exhaustive single-feature ablation oracle.
//!
//! Independent of the fast tracing path: recomputes base activations with
//! its own hooked forward passes and reruns every patched forward from the
//! embedding, then ranks all candidates. The greedy pipeline's top-tau
//! selection must equal this ranking's top-tau set.

use crate::corpus::Emotion;
use crate::error::{Error, Result};
use crate::flow::FeatureRef;
use crate::model::{forward, LabelIds, Model, PatchSet};
use crate::sae::{encode, SaeParams};

use super::LogitEffect;

/// Full descending effect ranking over `candidates` (at most 512), ties by
/// (layer, feature) ascending.
pub fn brute_force_oracle(
    model: &Model,
    saes: &[SaeParams],
    labels: &LabelIds,
    candidates: &[FeatureRef],
    instance_tokens: &[Vec<u32>],
    emotion: Emotion,
) -> Result<Vec<LogitEffect>> {
    if candidates.len() > 512 {
        return Err(Error::config(format!(
            "oracle candidate pool {} exceeds the 512 bound",
            candidates.len()
        )));
    }
    if instance_tokens.is_empty() {
        return Err(Error::config("oracle: no instances"));
    }
    let e_idx = emotion.index();

    // independent base runs (full forwards, own encodes)
    let mut base_logit = Vec::with_capacity(instance_tokens.len());
    let mut base_records = Vec::with_capacity(instance_tokens.len());
    for tokens in instance_tokens {
        let pos = tokens.len() - 1;
        let (logits, rec) = forward::forward_with_hooks(model, tokens, pos)?;
        base_logit.push(forward::restrict_logits(&logits, labels)[e_idx]);
        base_records.push(rec);
    }

    let mut effects = Vec::with_capacity(candidates.len());
    for &f in candidates {
        let mut total = 0.0f64;
        for (i, tokens) in instance_tokens.iter().enumerate() {
            let z = encode(&saes[f.layer], &base_records[i].layers[f.layer]).get(f.feature);
            if z == 0.0 {
                continue;
            }
            let col = saes[f.layer].dec_column(f.feature);
            let delta: Vec<f32> = col.iter().map(|&c| -z * c).collect();
            let pos = tokens.len() - 1;
            let mut ps = PatchSet::new();
            ps.add(f.layer, pos, delta);
            let (logits, _) = forward::patched_forward(model, tokens, &ps, pos)?;
            let patched = forward::restrict_logits(&logits, labels)[e_idx];
            total += (patched as f64 - base_logit[i] as f64).abs();
        }
        effects.push(LogitEffect {
            feature: f,
            emotion,
            effect: total / instance_tokens.len() as f64,
            samples: instance_tokens.len(),
        });
    }
    effects.sort_by(|a, b| {
        b.effect.partial_cmp(&a.effect).unwrap().then(a.feature.cmp(&b.feature))
    });
    Ok(effects)
}
