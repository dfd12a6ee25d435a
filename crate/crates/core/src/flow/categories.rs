//! Feature-category assignment by planted-cue alignment probes.
//!
//! For every selected feature we measure its mean final-token activation on
//! probe sentences that contain exactly one cue each, aggregate per cue
//! category, and assign the majority category when its normalized share
//! wins by a margin; overrides win over the automatic call.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{render_prompt, CueCategory, CueLexicon, Vocab};
use crate::error::Result;
use crate::flow::FeatureRef;
use crate::model::{forward, Model};
use crate::sae::{encode, SaeParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureCategory {
    Syntax,
    Concept,
    Emotion,
    Other,
}

impl FeatureCategory {
    pub fn name(self) -> &'static str {
        match self {
            FeatureCategory::Syntax => "syntax",
            FeatureCategory::Concept => "concept",
            FeatureCategory::Emotion => "emotion",
            FeatureCategory::Other => "other",
        }
    }

    fn from_cue(c: CueCategory) -> Self {
        match c {
            CueCategory::Syntax => FeatureCategory::Syntax,
            CueCategory::Concept => FeatureCategory::Concept,
            CueCategory::Emotion => FeatureCategory::Emotion,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CategoryAssignment {
    pub category: FeatureCategory,
    /// Normalized share of the winning category's alignment.
    pub score: f64,
    /// Single cue with the highest alignment, when any probe fired.
    pub best_cue: Option<String>,
}

/// Total map over the scored features; overrides applied last.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct CategoryMap {
    #[serde(with = "featureref_map")]
    pub assignments: BTreeMap<FeatureRef, CategoryAssignment>,
}

/// Serializes FeatureRef-keyed maps as entry arrays (json object keys must
/// be strings).
mod featureref_map {
    use super::{CategoryAssignment, FeatureRef};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::collections::BTreeMap;

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<FeatureRef, CategoryAssignment>,
        ser: S,
    ) -> Result<S::Ok, S::Error> {
        let entries: Vec<(&FeatureRef, &CategoryAssignment)> = map.iter().collect();
        entries.serialize(ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        de: D,
    ) -> Result<BTreeMap<FeatureRef, CategoryAssignment>, D::Error> {
        let entries: Vec<(FeatureRef, CategoryAssignment)> = Vec::deserialize(de)?;
        Ok(entries.into_iter().collect())
    }
}

impl CategoryMap {
    pub fn category(&self, f: FeatureRef) -> FeatureCategory {
        self.assignments.get(&f).map(|a| a.category).unwrap_or(FeatureCategory::Other)
    }

    pub fn of_category(&self, c: FeatureCategory) -> Vec<FeatureRef> {
        self.assignments
            .iter()
            .filter(|(_, a)| a.category == c)
            .map(|(&f, _)| f)
            .collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeSettings {
    /// Probe sentences per cue.
    pub probes_per_cue: usize,
    /// Filler tokens per probe body.
    pub probe_len: usize,
    /// Margin of normalized category shares required for a non-other call.
    pub margin: f64,
    pub seed: u64,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        ProbeSettings { probes_per_cue: 6, probe_len: 8, margin: 0.1, seed: 101 }
    }
}

/// Probe sentences for one cue: neutral fillers with the cue at a random
/// position. Deterministic per (settings.seed, cue index).
fn probe_bodies(
    lexicon: &CueLexicon,
    cue: &str,
    cue_idx: usize,
    settings: &ProbeSettings,
) -> Vec<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed.wrapping_add(cue_idx as u64 * 7919));
    (0..settings.probes_per_cue)
        .map(|_| {
            let mut body: Vec<String> = (0..settings.probe_len)
                .map(|_| lexicon.fillers[rng.gen_range(0..lexicon.fillers.len())].clone())
                .collect();
            let pos = rng.gen_range(0..=body.len());
            body.insert(pos, cue.to_string());
            body
        })
        .collect()
}

/// Mean final-token activation of every feature on one cue's probes.
/// Returns a dense [n_layers][d_sae] matrix.
fn cue_mean_activations(
    model: &Model,
    saes: &[SaeParams],
    vocab: &Vocab,
    bodies: &[Vec<String>],
) -> Result<Vec<Vec<f64>>> {
    let n_layers = model.config.n_layers;
    let d_sae = saes[0].d_sae();
    let mut acc = vec![vec![0.0f64; d_sae]; n_layers];
    for body in bodies {
        let tokens = vocab.encode(&render_prompt(body)?);
        let pos = tokens.len() - 1;
        let (_, rec) = forward::forward_with_hooks(model, &tokens, pos)?;
        for l in 0..n_layers {
            let z = encode(&saes[l], &rec.layers[l]);
            for &(i, a) in &z.active {
                acc[l][i as usize] += a as f64;
            }
        }
    }
    let n = bodies.len().max(1) as f64;
    for layer in &mut acc {
        for v in layer.iter_mut() {
            *v /= n;
        }
    }
    Ok(acc)
}

/// Full cue-by-feature alignment: mean activation of every feature on every
/// cue's probes. Used both for category assignment and for planted-circuit
/// ground truth.
pub struct CueAlignment {
    /// (cue, category) in lexicon order.
    pub cues: Vec<(String, CueCategory)>,
    /// alignment[cue_idx][layer][feature]
    pub alignment: Vec<Vec<Vec<f64>>>,
}

impl CueAlignment {
    pub fn value(&self, cue_idx: usize, f: FeatureRef) -> f64 {
        self.alignment[cue_idx][f.layer][f.feature]
    }

    /// The feature with the highest alignment to `cue_idx` among layers in
    /// `layers`, if any probe fired there.
    pub fn top_feature_in_layers(
        &self,
        cue_idx: usize,
        layers: std::ops::Range<usize>,
    ) -> Option<(FeatureRef, f64)> {
        let mut best: Option<(FeatureRef, f64)> = None;
        for layer in layers {
            for (feature, &v) in self.alignment[cue_idx][layer].iter().enumerate() {
                if v > 0.0 && best.map(|(_, b)| v > b).unwrap_or(true) {
                    best = Some((FeatureRef { layer, feature }, v));
                }
            }
        }
        best
    }
}

pub fn compute_cue_alignment(
    model: &Model,
    saes: &[SaeParams],
    vocab: &Vocab,
    lexicon: &CueLexicon,
    settings: &ProbeSettings,
) -> Result<CueAlignment> {
    let cues = lexicon.tagged_cues();
    let mut alignment = Vec::with_capacity(cues.len());
    for (idx, (cue, _)) in cues.iter().enumerate() {
        let bodies = probe_bodies(lexicon, cue, idx, settings);
        alignment.push(cue_mean_activations(model, saes, vocab, &bodies)?);
    }
    Ok(CueAlignment { cues, alignment })
}

/// Category shares for one feature: per-category mean alignment, normalized
/// to sum to one. Returns None when no probe fired the feature at all.
fn category_shares(align: &CueAlignment, f: FeatureRef) -> Option<([f64; 3], usize, f64)> {
    let mut sums = [0.0f64; 3];
    let mut counts = [0usize; 3];
    let mut best_cue = 0usize;
    let mut best_val = 0.0f64;
    for (idx, (_, cat)) in align.cues.iter().enumerate() {
        let v = align.value(idx, f);
        let c = match cat {
            CueCategory::Syntax => 0,
            CueCategory::Concept => 1,
            CueCategory::Emotion => 2,
        };
        sums[c] += v;
        counts[c] += 1;
        if v > best_val {
            best_val = v;
            best_cue = idx;
        }
    }
    let mut means = [0.0f64; 3];
    for c in 0..3 {
        means[c] = sums[c] / counts[c].max(1) as f64;
    }
    let total: f64 = means.iter().sum();
    if total <= 0.0 {
        return None;
    }
    for m in &mut means {
        *m /= total;
    }
    Some((means, best_cue, best_val))
}

/// Margin rule shared by the public entry point and its unit tests.
fn decide(shares: [f64; 3], margin: f64) -> (FeatureCategory, f64) {
    let cats = [FeatureCategory::Syntax, FeatureCategory::Concept, FeatureCategory::Emotion];
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| shares[b].partial_cmp(&shares[a]).unwrap());
    let (top, second) = (order[0], order[1]);
    if shares[top] - shares[second] >= margin {
        (cats[top], shares[top])
    } else {
        (FeatureCategory::Other, shares[top])
    }
}

/// Assigns a category to every feature in `features` by probe alignment,
/// then applies `overrides`.
pub fn assign_categories(
    align: &CueAlignment,
    features: &std::collections::BTreeSet<FeatureRef>,
    settings: &ProbeSettings,
    overrides: &BTreeMap<FeatureRef, FeatureCategory>,
) -> CategoryMap {
    let mut map = CategoryMap::default();
    for &f in features {
        let assignment = match category_shares(align, f) {
            None => CategoryAssignment {
                category: FeatureCategory::Other,
                score: 0.0,
                best_cue: None,
            },
            Some((shares, best_cue, _)) => {
                let (category, score) = decide(shares, settings.margin);
                CategoryAssignment {
                    category,
                    score,
                    best_cue: Some(align.cues[best_cue].0.clone()),
                }
            }
        };
        map.assignments.insert(f, assignment);
    }
    for (&f, &cat) in overrides {
        if let Some(a) = map.assignments.get_mut(&f) {
            a.category = cat;
        } else {
            map.assignments.insert(
                f,
                CategoryAssignment { category: cat, score: 1.0, best_cue: None },
            );
        }
    }
    map
}

/// Ground truth for planted-circuit recovery: for each emotion, the
/// top-aligned feature (within the given layer range) of each of its
/// emotion-category cues.
pub fn planted_cue_features(
    align: &CueAlignment,
    lexicon: &CueLexicon,
    emotion: crate::corpus::Emotion,
    layers: std::ops::Range<usize>,
) -> Vec<FeatureRef> {
    let mut out = std::collections::BTreeSet::new();
    for (idx, (cue, cat)) in align.cues.iter().enumerate() {
        if *cat != CueCategory::Emotion {
            continue;
        }
        if lexicon.emotion_of_cue(cue) != Some(emotion) {
            continue;
        }
        if let Some((f, _)) = align.top_feature_in_layers(idx, layers.clone()) {
            out.insert(f);
        }
    }
    out.into_iter().collect()
}

pub fn cue_of_category(c: CueCategory) -> FeatureCategory {
    FeatureCategory::from_cue(c)
}
