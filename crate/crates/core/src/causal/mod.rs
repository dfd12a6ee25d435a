//! Phase-stratified causal tracing.
//!
//! Phase-3 features are ranked by the mean absolute change of their
//! emotion's logit under single-feature ablation (a delta patch of
//! `-z_i * W_dec[:, i]` at the feature's own layer and the final token).
//! Phase-2 and phase-1 features are then ranked by how strongly their
//! ablation moves the already-selected downstream features, and the
//! per-emotion selections union into one causal feature set.

pub mod oracle;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{Emotion, Instance, Vocab, EMOTIONS};
use crate::error::{Error, Result};
use crate::flow::{ActivationStore, FeatureRef, FeatureSet, PhaseMap};
use crate::model::{forward, forward::ForwardCache, LabelIds, Model, PatchSet};
use crate::sae::SaeParams;

pub use oracle::brute_force_oracle;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LogitEffect {
    pub feature: FeatureRef,
    pub emotion: Emotion,
    /// mean |delta logit_e| over the traced instances
    pub effect: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CausalEdge {
    pub source: FeatureRef,
    pub target: FeatureRef,
    /// mean |delta activation of target| under source ablation
    pub weight: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmotionPathway {
    pub emotion: Emotion,
    /// selected[p-1] holds F^(p)_{e,causal}
    pub selected: [BTreeSet<FeatureRef>; 3],
    /// phase-3 candidates with their logit effects (descending)
    pub logit_effects: Vec<LogitEffect>,
    pub edges_p2_p3: Vec<CausalEdge>,
    pub edges_p1_p2: Vec<CausalEdge>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CausalGraph {
    pub pathways: Vec<EmotionPathway>,
    pub f_causal: BTreeSet<FeatureRef>,
    pub phase_map: PhaseMap,
}

impl CausalGraph {
    pub fn pathway(&self, e: Emotion) -> &EmotionPathway {
        &self.pathways[e.index()]
    }

    /// Per-phase pathway counts in the summary-table layout: total causal
    /// features, combined phase-1/2 count, and per-emotion phase-3 counts.
    pub fn structure_counts(&self) -> PathwayCounts {
        let mut early = BTreeSet::new();
        for p in &self.pathways {
            early.extend(p.selected[0].iter().copied());
            early.extend(p.selected[1].iter().copied());
        }
        PathwayCounts {
            total: self.f_causal.len(),
            phase12: early.len(),
            phase3_per_emotion: EMOTIONS.map(|e| self.pathway(e).selected[2].len()),
        }
    }

    /// Features selected for at least `min_emotions` emotions in phases 1-2.
    pub fn shared_early_features(&self, min_emotions: usize) -> Vec<FeatureRef> {
        let mut counts: std::collections::BTreeMap<FeatureRef, usize> = Default::default();
        for p in &self.pathways {
            for &f in p.selected[0].iter().chain(p.selected[1].iter()) {
                *counts.entry(f).or_insert(0) += 1;
            }
        }
        counts.into_iter().filter(|&(_, c)| c >= min_emotions).map(|(f, _)| f).collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PathwayCounts {
    pub total: usize,
    pub phase12: usize,
    pub phase3_per_emotion: [usize; 6],
}

// ── tracing context ─────────────────────────────────────────────────

/// Base-run state for one emotion's traced instances: forward caches plus
/// the store rows they came from.
pub struct TraceSet<'a> {
    pub emotion: Emotion,
    pub rows: Vec<usize>,
    pub caches: Vec<ForwardCache>,
    store: &'a ActivationStore,
}

impl<'a> TraceSet<'a> {
    /// The first `limit` store rows labeled `emotion`, in store order.
    pub fn build(
        model: &Model,
        store: &'a ActivationStore,
        instances: &[Instance],
        vocab: &Vocab,
        emotion: Emotion,
        limit: usize,
    ) -> Result<Self> {
        let rows: Vec<usize> = store
            .labels()
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == emotion)
            .map(|(r, _)| r)
            .take(limit)
            .collect();
        if rows.is_empty() {
            return Err(Error::config(format!("no stored instances labeled {}", emotion)));
        }
        let mut caches = Vec::with_capacity(rows.len());
        for &r in &rows {
            let inst = &instances[store.instance_ids()[r]];
            let tokens = vocab.encode(&inst.prompt_tokens());
            caches.push(forward::build_cache(model, &tokens)?);
        }
        Ok(TraceSet { emotion, rows, caches, store })
    }

    fn base_activation(&self, row_pos: usize, f: FeatureRef) -> f32 {
        self.store.features(self.rows[row_pos], f.layer).get(f.feature)
    }
}

/// Ablation patch for one feature on one instance: `-z_i * W_dec[:, i]` at
/// the feature's layer and the final token. None when the feature is
/// inactive there (an exact no-op).
fn ablation_patch(
    saes: &[SaeParams],
    f: FeatureRef,
    z: f32,
    final_pos: usize,
) -> Option<PatchSet> {
    if z == 0.0 {
        return None;
    }
    let col = saes[f.layer].dec_column(f.feature);
    let delta: Vec<f32> = col.iter().map(|&c| -z * c).collect();
    let mut ps = PatchSet::new();
    ps.add(f.layer, final_pos, delta);
    Some(ps)
}

/// Mean |delta logit_e| of ablating one phase-3 feature over the trace set.
pub fn ablate_logit_effect(
    model: &Model,
    saes: &[SaeParams],
    labels: &LabelIds,
    phase_map: &PhaseMap,
    trace: &TraceSet,
    feature: FeatureRef,
) -> Result<LogitEffect> {
    if phase_map.phase(feature.layer) != 3 {
        return Err(Error::config(format!(
            "feature {} sits in phase {}, not phase 3",
            feature,
            phase_map.phase(feature.layer)
        )));
    }
    let e_idx = trace.emotion.index();
    let mut total = 0.0f64;
    for (i, cache) in trace.caches.iter().enumerate() {
        let z = trace.base_activation(i, feature);
        let final_pos = cache.seq_len() - 1;
        let Some(ps) = ablation_patch(saes, feature, z, final_pos) else {
            continue; // inactive -> exactly zero change
        };
        let resume = forward::resume_final_row(model, cache, &ps)?;
        let base = forward::restrict_logits(&cache.final_logits, labels);
        let patched = forward::restrict_logits(&resume.logits, labels);
        total += (patched[e_idx] as f64 - base[e_idx] as f64).abs();
    }
    Ok(LogitEffect {
        feature,
        emotion: trace.emotion,
        effect: total / trace.caches.len() as f64,
        samples: trace.caches.len(),
    })
}

/// Top ceil(tau * candidates) by effect, ties broken by (layer, feature)
/// ascending.
pub fn select_causal(effects: &[(FeatureRef, f64)], tau_causal: f64) -> Vec<FeatureRef> {
    if effects.is_empty() {
        return Vec::new();
    }
    let mut ranked = effects.to_vec();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let keep = (tau_causal * ranked.len() as f64).ceil() as usize;
    ranked.into_iter().take(keep).map(|(f, _)| f).collect()
}

/// Ablates each upstream feature and records the mean |delta activation|
/// of every downstream feature. Returns all edges plus the per-upstream
/// mean effect over the downstream set.
pub fn backtrack_edges(
    model: &Model,
    saes: &[SaeParams],
    trace: &TraceSet,
    upstream: &[FeatureRef],
    downstream: &BTreeSet<FeatureRef>,
) -> Result<(Vec<CausalEdge>, Vec<(FeatureRef, f64)>)> {
    if downstream.is_empty() {
        return Err(Error::config("backtrack_edges: empty downstream set"));
    }
    let down: Vec<FeatureRef> = downstream.iter().copied().collect();
    let mut edges = Vec::with_capacity(upstream.len() * down.len());
    let mut means = Vec::with_capacity(upstream.len());
    for &fj in upstream {
        let mut acc = vec![0.0f64; down.len()];
        for (i, cache) in trace.caches.iter().enumerate() {
            let z = trace.base_activation(i, fj);
            let final_pos = cache.seq_len() - 1;
            let Some(ps) = ablation_patch(saes, fj, z, final_pos) else {
                continue;
            };
            let resume = forward::resume_final_row(model, cache, &ps)?;
            for (d, &fi) in down.iter().enumerate() {
                let base_z = trace.base_activation(i, fi);
                let new_z = if fi.layer >= resume.start_layer {
                    encode_single(&saes[fi.layer], resume.final_resid(fi.layer), fi.feature)
                } else {
                    base_z
                };
                acc[d] += (new_z as f64 - base_z as f64).abs();
            }
        }
        let n = trace.caches.len() as f64;
        let mut sum = 0.0f64;
        for (d, &fi) in down.iter().enumerate() {
            let w = acc[d] / n;
            sum += w;
            edges.push(CausalEdge { source: fj, target: fi, weight: w });
        }
        means.push((fj, sum / down.len() as f64));
    }
    Ok((edges, means))
}

/// One feature's JumpReLU activation from a residual vector.
fn encode_single(sae: &SaeParams, h: &[f32], feature: usize) -> f32 {
    let row = sae.w_enc.row(feature);
    let mut acc = 0.0f64;
    for (j, &hj) in h.iter().enumerate() {
        acc += row[j] as f64 * hj as f64;
    }
    let pre = (acc + sae.b_enc.data()[feature] as f64) as f32;
    if pre > sae.theta.data()[feature] {
        pre
    } else {
        0.0
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TraceConfig {
    pub tau_causal: f64,
    pub instances_per_emotion: usize,
}

impl Default for TraceConfig {
    fn default() -> Self {
        TraceConfig { tau_causal: 0.05, instances_per_emotion: 48 }
    }
}

/// Runs the full phase-stratified trace for all six emotions and assembles
/// the pathway graph. Upstream candidate pools are the union feature set F
/// restricted to the upstream phase; edges are kept from selected sources
/// only.
#[allow(clippy::too_many_arguments)]
pub fn trace_circuits(
    model: &Model,
    saes: &[SaeParams],
    labels: &LabelIds,
    store: &ActivationStore,
    instances: &[Instance],
    vocab: &Vocab,
    per_emotion_sets: &[FeatureSet],
    union_set: &FeatureSet,
    phase_map: &PhaseMap,
    cfg: &TraceConfig,
) -> Result<CausalGraph> {
    let mut pathways = Vec::with_capacity(6);
    for &e in &EMOTIONS {
        let trace = TraceSet::build(model, store, instances, vocab, e, cfg.instances_per_emotion)?;
        let f_e = &per_emotion_sets[e.index()];

        // phase 3: rank F_e features by logit effect
        let candidates: Vec<FeatureRef> =
            f_e.restricted_to_layers(phase_map.layers_of(3)).into_iter().collect();
        let mut effects = Vec::with_capacity(candidates.len());
        for &f in &candidates {
            effects.push(ablate_logit_effect(model, saes, labels, phase_map, &trace, f)?);
        }
        effects.sort_by(|a, b| {
            b.effect.partial_cmp(&a.effect).unwrap().then(a.feature.cmp(&b.feature))
        });
        let pairs: Vec<(FeatureRef, f64)> =
            effects.iter().map(|le| (le.feature, le.effect)).collect();
        let f3: BTreeSet<FeatureRef> = select_causal(&pairs, cfg.tau_causal).into_iter().collect();

        // phase 2 -> 3 backtracking over the union pool
        let pool2: Vec<FeatureRef> =
            union_set.restricted_to_layers(phase_map.layers_of(2)).into_iter().collect();
        let (mut edges23, f2) = if f3.is_empty() || pool2.is_empty() {
            (Vec::new(), BTreeSet::new())
        } else {
            let (edges, means) = backtrack_edges(model, saes, &trace, &pool2, &f3)?;
            let sel: BTreeSet<FeatureRef> =
                select_causal(&means, cfg.tau_causal).into_iter().collect();
            (edges, sel)
        };
        edges23.retain(|e| f2.contains(&e.source));

        // phase 1 -> 2 backtracking
        let pool1: Vec<FeatureRef> =
            union_set.restricted_to_layers(phase_map.layers_of(1)).into_iter().collect();
        let (mut edges12, f1) = if f2.is_empty() || pool1.is_empty() {
            (Vec::new(), BTreeSet::new())
        } else {
            let (edges, means) = backtrack_edges(model, saes, &trace, &pool1, &f2)?;
            let sel: BTreeSet<FeatureRef> =
                select_causal(&means, cfg.tau_causal).into_iter().collect();
            (edges, sel)
        };
        edges12.retain(|e| f1.contains(&e.source));

        pathways.push(EmotionPathway {
            emotion: e,
            selected: [f1, f2, f3],
            logit_effects: effects,
            edges_p2_p3: edges23,
            edges_p1_p2: edges12,
        });
    }
    let mut f_causal = BTreeSet::new();
    for p in &pathways {
        for s in &p.selected {
            f_causal.extend(s.iter().copied());
        }
    }
    Ok(CausalGraph { pathways, f_causal, phase_map: phase_map.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::phases::phase_boundaries;
    use crate::model::ModelConfig;
    use crate::numerics::Tensor;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_setup() -> (Model, Vec<SaeParams>, LabelIds, PhaseMap) {
        let model = Model::init(ModelConfig {
            n_layers: 4,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab_size: 40,
            context_len: 16,
            seed: 31,
            ..ModelConfig::default()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let saes = (0..4)
            .map(|layer| {
                let d = 16;
                let ds = 40;
                let mut w_dec =
                    Tensor::new(vec![d, ds], (0..d * ds).map(|_| rng.gen_range(-1.0..1.0)).collect());
                // unit decoder columns
                for i in 0..ds {
                    let mut n = 0.0f64;
                    for r in 0..d {
                        n += (w_dec.data()[r * ds + i] as f64).powi(2);
                    }
                    let inv = 1.0 / n.sqrt();
                    for r in 0..d {
                        let v = w_dec.data()[r * ds + i];
                        w_dec.data_mut()[r * ds + i] = (v as f64 * inv) as f32;
                    }
                }
                SaeParams {
                    layer,
                    w_enc: Tensor::new(
                        vec![ds, d],
                        (0..ds * d).map(|_| rng.gen_range(-0.8..0.8)).collect(),
                    ),
                    b_enc: Tensor::zeros(&[ds]),
                    w_dec,
                    b_dec: Tensor::zeros(&[d]),
                    theta: Tensor::filled(&[ds], 0.05),
                }
            })
            .collect();
        let labels = LabelIds([1, 2, 3, 4, 5, 6]);
        let phase_map = phase_boundaries(Some(0), Some(1), Some(2), 4).unwrap();
        (model, saes, labels, phase_map)
    }

    fn fake_instances(n: usize) -> (Vec<Instance>, Vec<usize>) {
        let insts: Vec<Instance> = (0..n)
            .map(|i| Instance {
                text: vec![format!("w{}", i % 7), format!("w{}", (i * 3) % 7), "w0".to_string()],
                label: EMOTIONS[i % 6],
                provenance: crate::corpus::Provenance::Synthetic,
                planted_cues: vec![],
            })
            .collect();
        let idx = (0..n).collect();
        (insts, idx)
    }

    fn build_vocab_for(insts: &[Instance]) -> Vocab {
        let mut toks: Vec<String> = vec![];
        for t in ["In", "this", "text", ":", ",", "the", "emotion", "implied", "is"] {
            toks.push(t.to_string());
        }
        for e in EMOTIONS {
            toks.push(e.name().to_string());
        }
        for inst in insts {
            toks.extend(inst.text.iter().cloned());
        }
        Vocab::build(toks)
    }

    fn build_store(
        model: &Model,
        saes: &[SaeParams],
        insts: &[Instance],
        idx: &[usize],
        vocab: &Vocab,
    ) -> ActivationStore {
        crate::flow::collect(model, saes, insts, idx, vocab).unwrap()
    }

    #[test]
    fn inactive_feature_has_exactly_zero_effect() {
        let (model, saes, labels, phase_map) = tiny_setup();
        let (insts, idx) = fake_instances(12);
        let vocab = build_vocab_for(&insts);
        let store = build_store(&model, &saes, &insts, &idx, &vocab);
        let trace = TraceSet::build(&model, &store, &insts, &vocab, Emotion::Anger, 2).unwrap();
        // find a phase-3 feature inactive on every traced instance
        let mut inactive = None;
        'scan: for layer in phase_map.layers_of(3) {
            for feat in 0..40 {
                let f = FeatureRef { layer, feature: feat };
                if trace
                    .rows
                    .iter()
                    .all(|&r| store.features(r, layer).get(feat) == 0.0)
                {
                    inactive = Some(f);
                    break 'scan;
                }
            }
        }
        let f = inactive.expect("some feature should be inactive");
        let le = ablate_logit_effect(&model, &saes, &labels, &phase_map, &trace, f).unwrap();
        assert_eq!(le.effect, 0.0);
    }

    #[test]
    fn effect_rejects_non_phase3_feature() {
        let (model, saes, labels, phase_map) = tiny_setup();
        let (insts, idx) = fake_instances(12);
        let vocab = build_vocab_for(&insts);
        let store = build_store(&model, &saes, &insts, &idx, &vocab);
        let trace = TraceSet::build(&model, &store, &insts, &vocab, Emotion::Anger, 2).unwrap();
        let f = FeatureRef { layer: 0, feature: 1 };
        assert!(ablate_logit_effect(&model, &saes, &labels, &phase_map, &trace, f).is_err());
    }

    #[test]
    fn select_causal_ceil_and_tie_rules() {
        let f = |l: usize, i: usize| FeatureRef { layer: l, feature: i };
        let effects: Vec<(FeatureRef, f64)> =
            (0..40).map(|i| (f(3, i), 1.0 - 0.01 * i as f64)).collect();
        let sel = select_causal(&effects, 0.05);
        assert_eq!(sel.len(), 2); // ceil(0.05 * 40) = 2
        assert_eq!(sel, vec![f(3, 0), f(3, 1)]);

        // all-equal effects: first ceil(tau n) in canonical (layer, feature) order
        let equal: Vec<(FeatureRef, f64)> = (0..40).rev().map(|i| (f(3, i), 0.5)).collect();
        let sel = select_causal(&equal, 0.05);
        assert_eq!(sel, vec![f(3, 0), f(3, 1)]);
    }

    #[test]
    fn select_causal_monotone_nesting() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let effects: Vec<(FeatureRef, f64)> = (0..30)
            .map(|i| (FeatureRef { layer: 3, feature: i }, rng.gen_range(0.0..1.0)))
            .collect();
        let mut prev: Vec<FeatureRef> = vec![];
        for tau in [0.03, 0.1, 0.25, 0.5, 1.0] {
            let sel = select_causal(&effects, tau);
            for f in &prev {
                assert!(sel.contains(f), "tau nesting violated");
            }
            prev = sel;
        }
    }

    #[test]
    fn effects_invariant_to_instance_order() {
        let (model, saes, labels, phase_map) = tiny_setup();
        let (insts, idx) = fake_instances(18);
        let vocab = build_vocab_for(&insts);
        let store = build_store(&model, &saes, &insts, &idx, &vocab);
        let trace = TraceSet::build(&model, &store, &insts, &vocab, Emotion::Joy, 3).unwrap();
        let f = FeatureRef { layer: 3, feature: 7 };
        let a = ablate_logit_effect(&model, &saes, &labels, &phase_map, &trace, f).unwrap();
        // reversed instance order
        let mut rev = TraceSet {
            emotion: trace.emotion,
            rows: trace.rows.clone(),
            caches: trace.caches.clone(),
            store: &store,
        };
        rev.rows.reverse();
        rev.caches.reverse();
        let b = ablate_logit_effect(&model, &saes, &labels, &phase_map, &rev, f).unwrap();
        assert!((a.effect - b.effect).abs() < 1e-12);
    }

    #[test]
    fn backtrack_edges_structure() {
        let (model, saes, _labels, phase_map) = tiny_setup();
        let (insts, idx) = fake_instances(18);
        let vocab = build_vocab_for(&insts);
        let store = build_store(&model, &saes, &insts, &idx, &vocab);
        let trace = TraceSet::build(&model, &store, &insts, &vocab, Emotion::Fear, 3).unwrap();
        let upstream: Vec<FeatureRef> =
            (0..5).map(|i| FeatureRef { layer: 1, feature: i }).collect();
        let downstream: BTreeSet<FeatureRef> =
            (0..3).map(|i| FeatureRef { layer: 2, feature: i * 2 }).collect();
        let (edges, means) =
            backtrack_edges(&model, &saes, &trace, &upstream, &downstream).unwrap();
        assert_eq!(edges.len(), 15);
        assert_eq!(means.len(), 5);
        for e in &edges {
            assert_eq!(phase_map.phase(e.source.layer) + 1, phase_map.phase(e.target.layer));
            assert!(e.weight >= 0.0);
        }
        // upstream feature never active -> all its edge weights zero
        if let Some(dead) = upstream.iter().find(|f| {
            trace.rows.iter().all(|&r| store.features(r, f.layer).get(f.feature) == 0.0)
        }) {
            for e in edges.iter().filter(|e| e.source == *dead) {
                assert_eq!(e.weight, 0.0);
            }
        }
        // empty downstream set errors
        assert!(backtrack_edges(&model, &saes, &trace, &upstream, &BTreeSet::new()).is_err());
    }
}
