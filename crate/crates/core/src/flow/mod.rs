//! Final-token sparse activations across layers: collection into a sealed
//! store, top-activated feature selection per emotion, category alignment,
//! activation curves, and three-phase detection.

pub mod categories;
pub mod phases;

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::{Emotion, Instance, Vocab, EMOTIONS};
use crate::error::{Error, Result};
use crate::model::{forward, Model};
use crate::sae::{encode, SaeParams, SparseFeatureVector};

pub use categories::{assign_categories, CategoryMap, FeatureCategory, ProbeSettings};
pub use phases::{category_curves, emergence_layer, phase_boundaries, CurveSet, PhaseMap};

/// Identity of one SAE feature: (layer, index). Total order is (layer,
/// feature), matching the `L{layer}-F{index}` naming used in reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FeatureRef {
    pub layer: usize,
    pub feature: usize,
}

impl fmt::Display for FeatureRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}-F{}", self.layer, self.feature)
    }
}

/// Final-token sparse feature vectors for every collected instance and
/// layer, plus a per-(emotion, layer, feature) mean-activation index.
/// Immutable once built.
pub struct ActivationStore {
    n_layers: usize,
    d_sae: usize,
    instance_ids: Vec<usize>,
    labels: Vec<Emotion>,
    feats: Vec<Vec<SparseFeatureVector>>,
    /// sums[layer][emotion][feature]
    sums: Vec<[Vec<f64>; 6]>,
    counts: [usize; 6],
    row_index: HashMap<usize, usize>,
}

impl ActivationStore {
    pub fn new(
        n_layers: usize,
        d_sae: usize,
        instance_ids: Vec<usize>,
        labels: Vec<Emotion>,
        feats: Vec<Vec<SparseFeatureVector>>,
    ) -> Result<Self> {
        if labels.len() != feats.len() || instance_ids.len() != labels.len() {
            return Err(Error::config("store: per-instance arrays disagree"));
        }
        for row in &feats {
            if row.len() != n_layers {
                return Err(Error::config("store: every instance needs exactly n_layers entries"));
            }
            for z in row {
                let sorted = z.active.windows(2).all(|w| w[0].0 < w[1].0);
                if !sorted || z.active.iter().any(|&(_, a)| a <= 0.0) {
                    return Err(Error::config(
                        "store: sparse vectors need sorted unique indices and positive values",
                    ));
                }
            }
        }
        let mut sums: Vec<[Vec<f64>; 6]> =
            (0..n_layers).map(|_| std::array::from_fn(|_| vec![0.0f64; d_sae])).collect();
        let mut counts = [0usize; 6];
        for (row, &label) in feats.iter().zip(&labels) {
            let e = label.index();
            counts[e] += 1;
            for (l, z) in row.iter().enumerate() {
                for &(i, a) in &z.active {
                    sums[l][e][i as usize] += a as f64;
                }
            }
        }
        let row_index = instance_ids.iter().enumerate().map(|(r, &id)| (id, r)).collect();
        Ok(ActivationStore { n_layers, d_sae, instance_ids, labels, feats, sums, counts, row_index })
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn d_sae(&self) -> usize {
        self.d_sae
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[Emotion] {
        &self.labels
    }

    pub fn instance_ids(&self) -> &[usize] {
        &self.instance_ids
    }

    pub fn features(&self, row: usize, layer: usize) -> &SparseFeatureVector {
        &self.feats[row][layer]
    }

    pub fn rows(&self) -> &[Vec<SparseFeatureVector>] {
        &self.feats
    }

    /// Store row holding the given corpus instance id.
    pub fn row_of(&self, instance_id: usize) -> Option<usize> {
        self.row_index.get(&instance_id).copied()
    }

    pub fn label_count(&self, e: Emotion) -> usize {
        self.counts[e.index()]
    }

    /// Mean activation of one feature over instances with the given label
    /// (inactive instances count as zero).
    pub fn mean_activation(&self, e: Emotion, f: FeatureRef) -> f64 {
        let c = self.counts[e.index()];
        if c == 0 {
            return 0.0;
        }
        self.sums[f.layer][e.index()][f.feature] / c as f64
    }

    /// Per-feature mean activations for one (emotion, layer).
    pub fn layer_means(&self, e: Emotion, layer: usize) -> Vec<f64> {
        let c = self.counts[e.index()].max(1) as f64;
        self.sums[layer][e.index()].iter().map(|&s| s / c).collect()
    }

    /// Dense feature matrix ([rows, d_sae]) for the given corpus ids.
    pub fn dense_matrix(&self, layer: usize, ids: &[usize]) -> Result<crate::numerics::Tensor> {
        let mut out = crate::numerics::Tensor::zeros(&[ids.len(), self.d_sae]);
        for (r, &id) in ids.iter().enumerate() {
            let row = self
                .row_of(id)
                .ok_or_else(|| Error::config(format!("instance {} not in store", id)))?;
            let dst = out.row_mut(r);
            for &(i, a) in &self.feats[row][layer].active {
                dst[i as usize] = a;
            }
        }
        Ok(out)
    }
}

/// Runs every instance through the model, encodes the final-token residual
/// of each layer with that layer's SAE, and seals the result.
pub fn collect(
    model: &Model,
    saes: &[SaeParams],
    instances: &[Instance],
    indices: &[usize],
    vocab: &Vocab,
) -> Result<ActivationStore> {
    let n_layers = model.config.n_layers;
    if saes.len() != n_layers {
        return Err(Error::config(format!(
            "need one SAE per layer: {} layers, {} SAEs",
            n_layers,
            saes.len()
        )));
    }
    for (l, s) in saes.iter().enumerate() {
        if s.layer != l {
            return Err(Error::config(format!("SAE at slot {} is for layer {}", l, s.layer)));
        }
    }
    let d_sae = saes[0].d_sae();
    let mut labels = Vec::with_capacity(indices.len());
    let mut feats = Vec::with_capacity(indices.len());
    for &idx in indices {
        let inst = &instances[idx];
        let tokens = vocab.encode(&inst.prompt_tokens());
        let pos = tokens.len() - 1;
        let (_, rec) = forward::forward_with_hooks(model, &tokens, pos)?;
        let row: Vec<SparseFeatureVector> =
            (0..n_layers).map(|l| encode(&saes[l], &rec.layers[l])).collect();
        labels.push(inst.label);
        feats.push(row);
    }
    ActivationStore::new(n_layers, d_sae, indices.to_vec(), labels, feats)
}

// ── top-activated feature selection ─────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeatureSet {
    /// None means the union set over all emotions.
    pub emotion: Option<Emotion>,
    pub members: BTreeSet<FeatureRef>,
    pub threshold: f64,
    pub statistic: String,
}

impl FeatureSet {
    pub fn union_of(sets: &[FeatureSet]) -> FeatureSet {
        let mut members = BTreeSet::new();
        for s in sets {
            members.extend(s.members.iter().copied());
        }
        FeatureSet {
            emotion: None,
            members,
            threshold: sets.first().map(|s| s.threshold).unwrap_or(0.0),
            statistic: sets
                .first()
                .map(|s| s.statistic.clone())
                .unwrap_or_else(|| "mean_activation".to_string()),
        }
    }

    pub fn restricted_to_layers(&self, range: std::ops::Range<usize>) -> BTreeSet<FeatureRef> {
        self.members.iter().copied().filter(|f| range.contains(&f.layer)).collect()
    }
}

/// Ranks features by mean activation per layer over instances with the
/// given label, keeps the top ceil(tau * d_sae) per layer (only features
/// with nonzero mean; ties by feature index ascending) and unions layers.
pub fn select_top_features(
    store: &ActivationStore,
    emotion: Emotion,
    tau_act: f64,
) -> Result<FeatureSet> {
    if !(0.0 < tau_act && tau_act <= 1.0) {
        return Err(Error::config("tau_act must lie in (0, 1]"));
    }
    if store.label_count(emotion) == 0 {
        return Err(Error::config(format!("no instances labeled {}", emotion)));
    }
    let keep = (tau_act * store.d_sae() as f64).ceil() as usize;
    let mut members = BTreeSet::new();
    for layer in 0..store.n_layers() {
        let means = store.layer_means(emotion, layer);
        let mut ranked: Vec<(usize, f64)> = means
            .iter()
            .enumerate()
            .filter(|&(_, &m)| m > 0.0)
            .map(|(i, &m)| (i, m))
            .collect();
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        for &(feature, _) in ranked.iter().take(keep) {
            members.insert(FeatureRef { layer, feature });
        }
    }
    Ok(FeatureSet {
        emotion: Some(emotion),
        members,
        threshold: tau_act,
        statistic: "mean_activation".to_string(),
    })
}

/// F_e for every emotion plus the union set F.
pub fn select_all(store: &ActivationStore, tau_act: f64) -> Result<(Vec<FeatureSet>, FeatureSet)> {
    let per: Vec<FeatureSet> = EMOTIONS
        .iter()
        .map(|&e| select_top_features(store, e, tau_act))
        .collect::<Result<_>>()?;
    let union = FeatureSet::union_of(&per);
    Ok((per, union))
}
