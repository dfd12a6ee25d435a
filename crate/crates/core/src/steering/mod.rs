//! Sparse causal-feature steering.
//!
//! A steering vector holds one positive multiplier per causal feature;
//! applying it scales those features' activations by encoding the residual
//! stream, forming the delta `sum_i (s_i - 1) * z_i * W_dec[:, i]`, and
//! adding it back after the feature's layer. The vector is trained with a
//! composite objective: task cross entropy, a KL term against the
//! unsteered next-token distribution, and an L1 pull toward multipliers
//! of one.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::Emotion;
use crate::error::{Error, Result};
use crate::flow::{CategoryMap, FeatureRef};
use crate::model::{
    forward,
    forward::{ForwardCache, ResidualIntervention},
    LabelIds, Model, NORM_EPS,
};
use crate::numerics::{softmax_f64, AdamConfig, NodeId, OptimState, Tape, Tensor};
use crate::sae::SaeParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionsPolicy {
    FinalToken,
    AllPositions,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SteeringConfig {
    /// KL coefficient.
    pub alpha: f32,
    /// L1 coefficient.
    pub lambda: f32,
    pub lr: f32,
    pub steps: usize,
    pub batch_size: usize,
    pub positions: PositionsPolicy,
    /// Multipliers are clamped into [0, s_max] after every step.
    pub s_max: f32,
    /// Validation cadence for best-checkpoint tracking.
    pub eval_interval: usize,
    /// Verify the loss gradient against central differences at init.
    pub check_gradients: bool,
    pub seed: u64,
}

impl Default for SteeringConfig {
    fn default() -> Self {
        SteeringConfig {
            alpha: 0.5,
            lambda: 0.01,
            lr: 0.05,
            steps: 240,
            batch_size: 24,
            positions: PositionsPolicy::FinalToken,
            s_max: 4.0,
            eval_interval: 20,
            check_gradients: true,
            seed: 0,
        }
    }
}

impl SteeringConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.lambda < 0.0 {
            return Err(Error::config("alpha and lambda must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SteeringMeta {
    pub alpha: f32,
    pub lambda: f32,
    pub seed: u64,
    pub train_size: usize,
    pub steps: usize,
    pub best_validation_macro_f1: f64,
}

/// Multipliers over the causal feature set; features not listed are
/// implicitly 1 (untouched).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SteeringVector {
    pub entries: Vec<(FeatureRef, f32)>,
    pub metadata: SteeringMeta,
}

impl SteeringVector {
    pub fn identity(features: &[FeatureRef]) -> Self {
        let mut refs: Vec<FeatureRef> = features.to_vec();
        refs.sort();
        refs.dedup();
        SteeringVector {
            entries: refs.into_iter().map(|f| (f, 1.0)).collect(),
            metadata: SteeringMeta::default(),
        }
    }

    pub fn multiplier(&self, f: FeatureRef) -> f32 {
        self.entries
            .binary_search_by(|(r, _)| r.cmp(&f))
            .map(|p| self.entries[p].1)
            .unwrap_or(1.0)
    }

    pub fn values(&self) -> Vec<f32> {
        self.entries.iter().map(|&(_, v)| v).collect()
    }

    pub fn with_values(&self, values: &[f32]) -> Self {
        assert_eq!(values.len(), self.entries.len());
        SteeringVector {
            entries: self
                .entries
                .iter()
                .zip(values)
                .map(|(&(f, _), &v)| (f, v))
                .collect(),
            metadata: self.metadata.clone(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.entries.iter().all(|&(_, v)| v == 1.0)
    }
}

// ── per-layer steering machinery ────────────────────────────────────

/// Selected-feature slices of one layer's SAE, in slot order of the global
/// steering vector.
struct LayerSteering {
    layer: usize,
    slots: Vec<usize>,
    /// encoder rows for the selected features [m, d_model]
    enc_rows: Tensor,
    b_enc: Tensor,
    theta: Tensor,
    /// decoder columns as rows [m, d_model]
    dec_rows: Tensor,
}

/// Precomputed steering plan over a model + SAE stack.
pub struct SteeringContext<'a> {
    model: &'a Model,
    layers: Vec<LayerSteering>,
    refs: Vec<FeatureRef>,
}

impl<'a> SteeringContext<'a> {
    pub fn new(model: &'a Model, saes: &'a [SaeParams], features: &[FeatureRef]) -> Result<Self> {
        let mut refs: Vec<FeatureRef> = features.to_vec();
        refs.sort();
        refs.dedup();
        for f in &refs {
            if f.layer >= model.config.n_layers {
                return Err(Error::config(format!("steered feature {} has no layer", f)));
            }
            if f.feature >= saes[f.layer].d_sae() {
                return Err(Error::config(format!("steered feature {} outside d_sae", f)));
            }
        }
        let d = model.config.d_model;
        let mut layers = Vec::new();
        for layer in 0..model.config.n_layers {
            let sel: Vec<(usize, usize)> = refs
                .iter()
                .enumerate()
                .filter(|(_, f)| f.layer == layer)
                .map(|(slot, f)| (slot, f.feature))
                .collect();
            if sel.is_empty() {
                continue;
            }
            let sae = &saes[layer];
            let m = sel.len();
            let mut enc_rows = Tensor::zeros(&[m, d]);
            let mut dec_rows = Tensor::zeros(&[m, d]);
            let mut b_enc = Tensor::zeros(&[m]);
            let mut theta = Tensor::zeros(&[m]);
            for (r, &(slot, feat)) in sel.iter().enumerate() {
                let _ = slot;
                enc_rows.row_mut(r).copy_from_slice(sae.w_enc.row(feat));
                dec_rows.row_mut(r).copy_from_slice(&sae.dec_column(feat));
                b_enc.data_mut()[r] = sae.b_enc.data()[feat];
                theta.data_mut()[r] = sae.theta.data()[feat];
            }
            layers.push(LayerSteering {
                layer,
                slots: sel.iter().map(|&(slot, _)| slot).collect(),
                enc_rows,
                b_enc,
                theta,
                dec_rows,
            });
        }
        Ok(SteeringContext { model, layers, refs })
    }

    pub fn features(&self) -> &[FeatureRef] {
        &self.refs
    }

    pub fn dim(&self) -> usize {
        self.refs.len()
    }

    fn min_layer(&self) -> Option<usize> {
        self.layers.first().map(|l| l.layer)
    }

    /// Selected-feature activations from a residual row (JumpReLU gate).
    fn encode_selected(&self, ls: &LayerSteering, row: &[f32]) -> Vec<f32> {
        let m = ls.slots.len();
        let mut z = vec![0.0f32; m];
        for r in 0..m {
            let w = ls.enc_rows.row(r);
            let mut acc = 0.0f64;
            for (j, &h) in row.iter().enumerate() {
                acc += w[j] as f64 * h as f64;
            }
            let pre = (acc + ls.b_enc.data()[r] as f64) as f32;
            if pre > ls.theta.data()[r] {
                z[r] = pre;
            }
        }
        z
    }

    /// Adds the steering delta for one layer in place. Contributions with
    /// `(s - 1) * z == 0` are skipped entirely so identity steering and
    /// inactive features are exact no-ops.
    fn apply_delta(&self, ls: &LayerSteering, s: &[f32], row: &mut [f32]) {
        let z = self.encode_selected(ls, row);
        let mut any = false;
        let m = ls.slots.len();
        let mut coeff = vec![0.0f32; m];
        for r in 0..m {
            let c = (s[ls.slots[r]] - 1.0) * z[r];
            if c != 0.0 {
                any = true;
            }
            coeff[r] = c;
        }
        if !any {
            return;
        }
        for (j, out) in row.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for r in 0..m {
                if coeff[r] != 0.0 {
                    acc += coeff[r] as f64 * ls.dec_rows.row(r)[j] as f64;
                }
            }
            *out += acc as f32;
        }
    }

    /// Steered next-token logits at the final position, resuming from the
    /// lowest steered layer of a cached base run.
    pub fn steered_logits(&self, cache: &ForwardCache, s: &[f32]) -> Vec<f32> {
        let Some(start) = self.min_layer() else {
            return cache.final_logits.clone();
        };
        if self.refs.iter().all(|&f| s[self.slot_of(f)] == 1.0) {
            return cache.final_logits.clone();
        }
        let t = cache.seq_len();
        let mut row: Vec<f32> = cache.resid[start].row(t - 1).to_vec();
        let mut li = 0usize;
        for l in start..self.model.config.n_layers {
            if l > start {
                row = forward::resume_block_row(self.model, l, &row, &cache.k[l], &cache.v[l], t);
            }
            while li < self.layers.len() && self.layers[li].layer < l {
                li += 1;
            }
            if li < self.layers.len() && self.layers[li].layer == l {
                self.apply_delta(&self.layers[li], s, &mut row);
            }
        }
        forward::unembed_final(self.model, &row)
    }

    fn slot_of(&self, f: FeatureRef) -> usize {
        self.refs.binary_search(&f).expect("feature registered")
    }
}

/// All-position steering for language-model evaluation.
pub struct AllPositionSteering<'a> {
    ctx: &'a SteeringContext<'a>,
    s: Vec<f32>,
}

impl<'a> AllPositionSteering<'a> {
    pub fn new(ctx: &'a SteeringContext<'a>, vector: &SteeringVector) -> Self {
        AllPositionSteering { ctx, s: vector.values() }
    }
}

impl ResidualIntervention for AllPositionSteering<'_> {
    fn apply(&self, layer: usize, x: &mut Tensor) {
        if let Some(ls) = self.ctx.layers.iter().find(|l| l.layer == layer) {
            for i in 0..x.nrows() {
                self.ctx.apply_delta(ls, &self.s, x.row_mut(i));
            }
        }
    }
}

/// Steered logits for arbitrary tokens under either positions policy.
pub fn apply_steering(
    model: &Model,
    saes: &[SaeParams],
    vector: &SteeringVector,
    tokens: &[u32],
    positions: PositionsPolicy,
) -> Result<Vec<f32>> {
    let refs: Vec<FeatureRef> = vector.entries.iter().map(|&(f, _)| f).collect();
    let ctx = SteeringContext::new(model, saes, &refs)?;
    match positions {
        PositionsPolicy::FinalToken => {
            let cache = forward::build_cache(model, tokens)?;
            Ok(ctx.steered_logits(&cache, &vector.values()))
        }
        PositionsPolicy::AllPositions => {
            let iv = AllPositionSteering::new(&ctx, vector);
            forward::steered_full_logits(model, tokens, &iv)
        }
    }
}

// ── loss and training ───────────────────────────────────────────────

/// One labeled training example: a cached base run, its label, and the
/// unsteered next-token distribution for the KL term.
pub struct SteeringExample {
    pub cache: ForwardCache,
    pub label: Emotion,
    pub p_base: Vec<f64>,
}

impl SteeringExample {
    pub fn new(model: &Model, tokens: &[u32], label: Emotion) -> Result<Self> {
        let cache = forward::build_cache(model, tokens)?;
        let p_base = softmax_f64(&cache.final_logits);
        Ok(SteeringExample { cache, label, p_base })
    }
}

/// Builds the steered final-row graph for one example on a tape and returns
/// the (ce, kl) scalar nodes.
fn tape_example_loss<'a>(
    tape: &mut Tape<'a>,
    ctx: &'a SteeringContext<'a>,
    labels: &LabelIds,
    example: &'a SteeringExample,
    s_node: NodeId,
) -> (NodeId, NodeId) {
    let model = ctx.model;
    let start = ctx.min_layer().expect("steering context has layers");
    let t = cacheln(example);
    let mut row = tape.constant_owned(Tensor::new(
        vec![1, model.config.d_model],
        example.cache.resid[start].row(t - 1).to_vec(),
    ));
    let mut li = 0usize;
    for l in start..model.config.n_layers {
        if l > start {
            row = forward::tape_resume_block(tape, model, l, row, &example.cache.k[l], &example.cache.v[l], t);
        }
        while li < ctx.layers.len() && ctx.layers[li].layer < l {
            li += 1;
        }
        if li < ctx.layers.len() && ctx.layers[li].layer == l {
            let ls = &ctx.layers[li];
            let enc = tape.constant(&ls.enc_rows);
            let pre0 = tape.matmul_bt(row, enc);
            let be = tape.constant(&ls.b_enc);
            let pre = tape.add_row(pre0, be);
            let th = tape.constant(&ls.theta);
            let z = tape.jump_relu(pre, th);
            let s_sel = tape.gather_cols(s_node, ls.slots.clone());
            let sm1 = tape.sub_const(s_sel, 1.0);
            let coeff = tape.mul(sm1, z);
            let dec = tape.constant(&ls.dec_rows);
            let delta = tape.matmul(coeff, dec);
            row = tape.add(row, delta);
        }
    }
    let fg = tape.constant(&model.final_gain);
    let xn = tape.rms_norm(row, fg, NORM_EPS);
    let emb = tape.constant(&model.embed);
    let logits = tape.matmul_bt(xn, emb);
    let label_cols: Vec<usize> = labels.0.iter().map(|&id| id as usize).collect();
    let restricted = tape.gather_cols(logits, label_cols);
    let ce = tape.cross_entropy_rows(restricted, vec![example.label.index()]);
    let kl = tape.kl_from_const_p(example.p_base.clone(), logits);
    (ce, kl)
}

fn cacheln(e: &SteeringExample) -> usize {
    e.cache.seq_len()
}

/// Composite loss over a batch and its gradient w.r.t. the steering vector:
/// `mean(CE + alpha*KL) + lambda * sum |s_i - 1|`. The L1 subgradient at
/// s_i = 1 is zero.
pub fn steering_loss(
    ctx: &SteeringContext,
    labels: &LabelIds,
    batch: &[&SteeringExample],
    s: &[f32],
    alpha: f32,
    lambda: f32,
) -> Result<(f64, Vec<f32>)> {
    assert_eq!(s.len(), ctx.dim());
    let s_tensor = Tensor::new(vec![1, s.len()], s.to_vec());
    let w = 1.0 / batch.len() as f32;
    let mut total = 0.0f64;
    let mut grad = vec![0.0f64; s.len()];
    for ex in batch {
        let mut tape = Tape::new();
        let s_node = tape.param(&s_tensor);
        let (ce, kl) = tape_example_loss(&mut tape, ctx, labels, ex, s_node);
        let loss = tape.weighted_sum(vec![(ce, 1.0), (kl, alpha)]);
        let v = tape.value(loss).item() as f64;
        if !v.is_finite() {
            return Err(Error::numerical("non-finite steering loss".to_string()));
        }
        total += v * w as f64;
        let mut grads = tape.backward(loss, w);
        if let Some(g) = grads.take(s_node) {
            for (acc, &gv) in grad.iter_mut().zip(g.data()) {
                *acc += gv as f64;
            }
        }
    }
    let mut l1 = 0.0f64;
    for (i, &si) in s.iter().enumerate() {
        let d = si as f64 - 1.0;
        l1 += d.abs();
        grad[i] += lambda as f64 * d.signum() * if d == 0.0 { 0.0 } else { 1.0 };
    }
    total += lambda as f64 * l1;
    Ok((total, grad.into_iter().map(|g| g as f32).collect()))
}

/// Macro-F1 of steered predictions over cached examples.
pub fn steered_macro_f1(
    ctx: &SteeringContext,
    labels: &LabelIds,
    examples: &[&SteeringExample],
    s: &[f32],
) -> f64 {
    let preds: Vec<Emotion> = examples
        .iter()
        .map(|ex| {
            let logits = ctx.steered_logits(&ex.cache, s);
            let restricted = forward::restrict_logits(&logits, labels);
            crate::corpus::EMOTIONS[forward::argmax6(&restricted)]
        })
        .collect();
    let truth: Vec<Emotion> = examples.iter().map(|e| e.label).collect();
    crate::metrics::f1_scores(&preds, &truth).macro_f1
}

/// Trains the steering vector with Adam, clamping into [0, s_max] each
/// step, and returns the checkpoint with the best validation macro-F1.
pub fn train_steering(
    model: &Model,
    saes: &[SaeParams],
    labels: &LabelIds,
    features: &[FeatureRef],
    train: &[&SteeringExample],
    validation: &[&SteeringExample],
    cfg: &SteeringConfig,
) -> Result<SteeringVector> {
    cfg.validate()?;
    if features.is_empty() {
        return Err(Error::config("train_steering: empty causal feature set"));
    }
    if train.is_empty() {
        return Err(Error::config("train_steering: empty training split"));
    }
    let ctx = SteeringContext::new(model, saes, features)?;
    let dim = ctx.dim();
    let mut s = vec![1.0f32; dim];

    if cfg.check_gradients {
        let probe: Vec<&SteeringExample> = train.iter().take(4).copied().collect();
        let (_, g) = steering_loss(&ctx, labels, &probe, &s, cfg.alpha, cfg.lambda)?;
        let coords: Vec<usize> = (0..dim.min(6)).collect();
        let err = crate::numerics::grad_check(
            |p| {
                steering_loss(&ctx, labels, &probe, p, cfg.alpha, cfg.lambda).map(|(v, _)| v)
            },
            &g,
            &s,
            1e-3,
            &coords,
        )?;
        if err > 1e-3 {
            return Err(Error::numerical(format!(
                "steering gradient check failed at init: {}",
                err
            )));
        }
    }

    let mut optim = OptimState::new(
        AdamConfig { lr: cfg.lr, ..AdamConfig::default() },
        &[Tensor::from_vec(s.clone())],
    );
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;

    let mut best_s = s.clone();
    let mut best_f1 = steered_macro_f1(&ctx, labels, validation, &s);

    let bs = cfg.batch_size.min(train.len());
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(bs);
        for _ in 0..bs {
            if cursor >= order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(train[order[cursor]]);
            cursor += 1;
        }
        let (loss, grad) = steering_loss(&ctx, labels, &batch, &s, cfg.alpha, cfg.lambda)?;
        if !loss.is_finite() {
            return Err(Error::numerical(format!("steering diverged at step {}", step)));
        }
        let mut params = [Tensor::from_vec(s.clone())];
        optim.adam_step(&mut params, &[Tensor::from_vec(grad)])?;
        s = params[0].data().to_vec();
        for v in &mut s {
            *v = v.clamp(0.0, cfg.s_max);
        }
        if (step + 1) % cfg.eval_interval == 0 || step + 1 == cfg.steps {
            let f1 = steered_macro_f1(&ctx, labels, validation, &s);
            if f1 > best_f1 {
                best_f1 = f1;
                best_s.copy_from_slice(&s);
            }
        }
    }

    let mut vector = SteeringVector::identity(ctx.features());
    vector = vector.with_values(&best_s);
    vector.metadata = SteeringMeta {
        alpha: cfg.alpha,
        lambda: cfg.lambda,
        seed: cfg.seed,
        train_size: train.len(),
        steps: cfg.steps,
        best_validation_macro_f1: best_f1,
    };
    Ok(vector)
}

// ── sparsity report ─────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SparsityRow {
    pub feature: FeatureRef,
    pub multiplier: f32,
    pub category: String,
    pub best_cue: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SparsityReport {
    pub threshold: f64,
    pub changed: Vec<SparsityRow>,
    pub total_features: usize,
}

/// Features whose multiplier moved more than `threshold` from 1, sorted by
/// |s - 1| descending, annotated with category and best-aligned cue.
pub fn sparsity_report(
    vector: &SteeringVector,
    threshold: f64,
    categories: Option<&CategoryMap>,
) -> SparsityReport {
    let mut changed: Vec<SparsityRow> = vector
        .entries
        .iter()
        .filter(|&&(_, s)| ((s as f64) - 1.0).abs() > threshold)
        .map(|&(f, s)| {
            let (category, best_cue) = match categories.and_then(|c| c.assignments.get(&f)) {
                Some(a) => (a.category.name().to_string(), a.best_cue.clone()),
                None => ("other".to_string(), None),
            };
            SparsityRow { feature: f, multiplier: s, category, best_cue }
        })
        .collect();
    changed.sort_by(|a, b| {
        let da = (a.multiplier as f64 - 1.0).abs();
        let db = (b.multiplier as f64 - 1.0).abs();
        db.partial_cmp(&da).unwrap().then(a.feature.cmp(&b.feature))
    });
    SparsityReport { threshold, changed, total_features: vector.entries.len() }
}

/// Loads/stores the steering vector as json: entries plus metadata.
pub fn to_json(vector: &SteeringVector) -> serde_json::Value {
    serde_json::json!({
        "entries": vector.entries.iter().map(|(f, s)| {
            serde_json::json!({"layer": f.layer, "feature": f.feature, "multiplier": s})
        }).collect::<Vec<_>>(),
        "metadata": vector.metadata,
    })
}

pub fn from_json(v: &serde_json::Value) -> Result<SteeringVector> {
    let entries = v["entries"]
        .as_array()
        .ok_or_else(|| Error::format("steering json: missing entries"))?
        .iter()
        .map(|e| {
            let layer = e["layer"].as_u64().ok_or_else(|| Error::format("bad layer"))?;
            let feature =
                e["feature"].as_u64().ok_or_else(|| Error::format("bad feature"))?;
            let s =
                e["multiplier"].as_f64().ok_or_else(|| Error::format("bad multiplier"))?;
            Ok((FeatureRef { layer: layer as usize, feature: feature as usize }, s as f32))
        })
        .collect::<Result<Vec<_>>>()?;
    let metadata: SteeringMeta =
        serde_json::from_value(v["metadata"].clone()).unwrap_or_default();
    Ok(SteeringVector { entries, metadata })
}

/// Map view of the entries (for report joins).
pub fn entry_map(vector: &SteeringVector) -> BTreeMap<FeatureRef, f32> {
    vector.entries.iter().copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (Model, Vec<SaeParams>, LabelIds) {
        let model = Model::init(ModelConfig {
            n_layers: 4,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab_size: 40,
            context_len: 16,
            seed: 77,
            ..ModelConfig::default()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let saes = (0..4)
            .map(|layer| {
                let (d, ds) = (16usize, 40usize);
                SaeParams {
                    layer,
                    w_enc: Tensor::new(
                        vec![ds, d],
                        (0..ds * d).map(|_| rng.gen_range(-0.7..0.7)).collect(),
                    ),
                    b_enc: Tensor::zeros(&[ds]),
                    w_dec: Tensor::new(
                        vec![d, ds],
                        (0..d * ds).map(|_| rng.gen_range(-0.5..0.5)).collect(),
                    ),
                    b_dec: Tensor::zeros(&[d]),
                    theta: Tensor::filled(&[ds], 0.05),
                }
            })
            .collect();
        (model, saes, LabelIds([1, 2, 3, 4, 5, 6]))
    }

    fn feats() -> Vec<FeatureRef> {
        vec![
            FeatureRef { layer: 1, feature: 3 },
            FeatureRef { layer: 2, feature: 10 },
            FeatureRef { layer: 2, feature: 21 },
            FeatureRef { layer: 3, feature: 5 },
        ]
    }

    #[test]
    fn identity_steering_is_bit_exact() {
        let (model, saes, _) = setup();
        let v = SteeringVector::identity(&feats());
        let tokens = vec![2u32, 9, 17, 4, 30];
        let base = forward::forward_with_hooks(&model, &tokens, 4).unwrap().0;
        let steered =
            apply_steering(&model, &saes, &v, &tokens, PositionsPolicy::FinalToken).unwrap();
        assert_eq!(base, steered);
        let steered_all =
            apply_steering(&model, &saes, &v, &tokens, PositionsPolicy::AllPositions).unwrap();
        assert_eq!(base, steered_all);
    }

    #[test]
    fn scaling_inactive_features_changes_nothing() {
        let (model, saes, _) = setup();
        let tokens = vec![2u32, 9, 17, 4, 30];
        // find a feature inactive at the final token of every layer
        let (_, rec) = forward::forward_with_hooks(&model, &tokens, 4).unwrap();
        let mut inactive = None;
        'l: for layer in 0..4 {
            for f in 0..40 {
                if crate::sae::encode(&saes[layer], &rec.layers[layer]).get(f) == 0.0 {
                    inactive = Some(FeatureRef { layer, feature: f });
                    break 'l;
                }
            }
        }
        let f = inactive.unwrap();
        let mut v = SteeringVector::identity(&[f]);
        v.entries[0].1 = 3.0;
        let base = forward::forward_with_hooks(&model, &tokens, 4).unwrap().0;
        let steered =
            apply_steering(&model, &saes, &v, &tokens, PositionsPolicy::FinalToken).unwrap();
        assert_eq!(base, steered);
    }

    #[test]
    fn tape_loss_matches_plain_steered_logits() {
        let (model, saes, labels) = setup();
        let ctx = SteeringContext::new(&model, &saes, &feats()).unwrap();
        let tokens = vec![1u32, 8, 23, 5, 11, 7];
        let ex = SteeringExample::new(&model, &tokens, Emotion::Fear).unwrap();
        let s = vec![1.7f32, 0.4, 2.2, 1.1];

        // plain path
        let plain = ctx.steered_logits(&ex.cache, &s);

        // tape path: rebuild the graph and read the logits node value
        let s_tensor = Tensor::new(vec![1, 4], s.clone());
        let mut tape = Tape::new();
        let s_node = tape.param(&s_tensor);
        let start = ctx.min_layer().unwrap();
        let t = ex.cache.seq_len();
        let mut row = tape.constant_owned(Tensor::new(
            vec![1, model.config.d_model],
            ex.cache.resid[start].row(t - 1).to_vec(),
        ));
        let mut li = 0usize;
        for l in start..model.config.n_layers {
            if l > start {
                row = forward::tape_resume_block(
                    &mut tape, &model, l, row, &ex.cache.k[l], &ex.cache.v[l], t,
                );
            }
            while li < ctx.layers.len() && ctx.layers[li].layer < l {
                li += 1;
            }
            if li < ctx.layers.len() && ctx.layers[li].layer == l {
                let ls = &ctx.layers[li];
                let enc = tape.constant(&ls.enc_rows);
                let pre0 = tape.matmul_bt(row, enc);
                let be = tape.constant(&ls.b_enc);
                let pre = tape.add_row(pre0, be);
                let th = tape.constant(&ls.theta);
                let z = tape.jump_relu(pre, th);
                let s_sel = tape.gather_cols(s_node, ls.slots.clone());
                let sm1 = tape.sub_const(s_sel, 1.0);
                let coeff = tape.mul(sm1, z);
                let dec = tape.constant(&ls.dec_rows);
                let delta = tape.matmul(coeff, dec);
                row = tape.add(row, delta);
            }
        }
        let fg = tape.constant(&model.final_gain);
        let xn = tape.rms_norm(row, fg, NORM_EPS);
        let emb = tape.constant(&model.embed);
        let logits = tape.matmul_bt(xn, emb);
        assert_eq!(tape.value(logits).data(), &plain[..]);
        let _ = labels;
    }

    #[test]
    fn loss_terms_switch_off_and_l1_hand_value() {
        let (model, saes, labels) = setup();
        let ctx = SteeringContext::new(&model, &saes, &feats()).unwrap();
        let exs: Vec<SteeringExample> = (0..3)
            .map(|i| {
                SteeringExample::new(&model, &[2, 9 + i as u32, 17, 4, 30], Emotion::Joy).unwrap()
            })
            .collect();
        let batch: Vec<&SteeringExample> = exs.iter().collect();

        // identity steering: KL = 0 and L1 = 0, so loss is the baseline CE
        let ones = vec![1.0f32; 4];
        let (l_full, _) = steering_loss(&ctx, &labels, &batch, &ones, 0.5, 0.01).unwrap();
        let (l_ce, _) = steering_loss(&ctx, &labels, &batch, &ones, 0.0, 0.0).unwrap();
        assert!((l_full - l_ce).abs() < 1e-9, "identity steering must zero KL and L1");

        // lambda scales a hand-computed L1 value: entries {1.5, 0.8}, rest 1
        let s = vec![1.5f32, 0.8, 1.0, 1.0];
        let (with_l1, _) = steering_loss(&ctx, &labels, &batch, &s, 0.0, 0.01).unwrap();
        let (without, _) = steering_loss(&ctx, &labels, &batch, &s, 0.0, 0.0).unwrap();
        let l1_term = with_l1 - without;
        assert!((l1_term - 0.007).abs() < 1e-7, "l1 term {}", l1_term);
    }

    #[test]
    fn loss_monotone_in_lambda_for_non_identity_s() {
        let (model, saes, labels) = setup();
        let ctx = SteeringContext::new(&model, &saes, &feats()).unwrap();
        let ex = SteeringExample::new(&model, &[2, 9, 17, 4, 30], Emotion::Sadness).unwrap();
        let batch = [&ex];
        let s = vec![1.4f32, 0.6, 1.0, 2.0];
        let mut prev = f64::NEG_INFINITY;
        for lambda in [0.0f32, 0.01, 0.1, 1.0] {
            let (l, _) = steering_loss(&ctx, &labels, &batch, &s, 0.3, lambda).unwrap();
            assert!(l >= prev, "loss must be non-decreasing in lambda");
            prev = l;
        }
    }

    #[test]
    fn gradient_matches_central_differences_at_ones_and_perturbed() {
        let (model, saes, labels) = setup();
        let ctx = SteeringContext::new(&model, &saes, &feats()).unwrap();
        let exs: Vec<SteeringExample> = (0..3)
            .map(|i| {
                SteeringExample::new(
                    &model,
                    &[3 + i as u32, 9, 17, 4, 30, 12],
                    crate::corpus::EMOTIONS[i % 6],
                )
                .unwrap()
            })
            .collect();
        let batch: Vec<&SteeringExample> = exs.iter().collect();
        for s in [vec![1.0f32; 4], vec![1.3f32, 0.7, 1.9, 0.2]] {
            let (_, grad) =
                steering_loss(&ctx, &labels, &batch, &s, 0.5, 0.01).unwrap();
            let coords: Vec<usize> = (0..4).collect();
            let err = crate::numerics::grad_check(
                |p| steering_loss(&ctx, &labels, &batch, p, 0.5, 0.01).map(|(v, _)| v),
                &grad,
                &s,
                1e-3,
                &coords,
            )
            .unwrap();
            assert!(err < 1e-3, "steering grad check error {} at s = {:?}", err, s);
        }
    }

    #[test]
    fn unresolved_feature_is_error() {
        let (model, saes, _) = setup();
        let bad = SteeringVector::identity(&[FeatureRef { layer: 9, feature: 0 }]);
        assert!(
            apply_steering(&model, &saes, &bad, &[1, 2, 3], PositionsPolicy::FinalToken).is_err()
        );
    }

    #[test]
    fn sparsity_report_threshold_rule() {
        let mut v = SteeringVector::identity(&feats());
        v.entries[0].1 = 1.53;
        v.entries[1].1 = 0.81;
        v.entries[2].1 = 1.05;
        let rep = sparsity_report(&v, 0.10, None);
        assert_eq!(rep.changed.len(), 2);
        assert_eq!(rep.changed[0].multiplier, 1.53);
        assert_eq!(rep.changed[1].multiplier, 0.81);
        let identity = SteeringVector::identity(&feats());
        assert!(sparsity_report(&identity, 0.10, None).changed.is_empty());
    }

    #[test]
    fn steering_json_round_trip() {
        let mut v = SteeringVector::identity(&feats());
        v.entries[2].1 = 1.7;
        v.metadata.alpha = 0.5;
        let j = to_json(&v);
        let back = from_json(&j).unwrap();
        assert_eq!(v.entries, back.entries);
        assert_eq!(v.metadata.alpha, back.metadata.alpha);
    }
}
