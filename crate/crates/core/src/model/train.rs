//! Next-token language-model training on the gradient tape.
//!
//! The tape forward reproduces exactly the arithmetic of the plain
//! inference path in `forward.rs`; a bit-equality test pins that.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Instance, Vocab};
use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, NodeId, OptimState, Tape, Tensor};

use super::{Model, ModelConfig, NORM_EPS};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LmTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// Fraction of draws trained as full prompt+label sequences; the rest
    /// train as raw body text. Low exposure leaves the label mapping
    /// under-fit while the language itself is well modeled.
    pub label_exposure: f64,
    /// Per-emotion exposure overrides (emotion index -> fraction).
    pub label_exposure_overrides: Vec<(usize, f64)>,
    pub seed: u64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        LmTrainConfig {
            steps: 900,
            batch_size: 16,
            lr: 2e-3,
            label_exposure: 1.0,
            label_exposure_overrides: Vec::new(),
            seed: 0,
        }
    }
}

pub struct TrainedModel {
    pub model: Model,
    pub loss_curve: Vec<f32>,
}

/// Registers all model parameters on a tape (as trainable leaves when
/// `trainable`, constants otherwise), in `Model::params` order.
pub fn register_params<'a>(tape: &mut Tape<'a>, model: &'a Model, trainable: bool) -> Vec<NodeId> {
    model
        .params()
        .into_iter()
        .map(|t| if trainable { tape.param(t) } else { tape.constant(t) })
        .collect()
}

struct ParamIds<'s> {
    ids: &'s [NodeId],
    n_layers: usize,
}

impl ParamIds<'_> {
    fn embed(&self) -> NodeId {
        self.ids[0]
    }
    fn pos(&self) -> NodeId {
        self.ids[1]
    }
    fn block(&self, l: usize, j: usize) -> NodeId {
        self.ids[2 + l * 8 + j]
    }
    fn final_gain(&self) -> NodeId {
        self.ids[2 + self.n_layers * 8]
    }
}

/// Builds the LM forward graph up to the post-block residuals; returns the
/// residual node after every block.
pub fn tape_forward<'a>(
    tape: &mut Tape<'a>,
    model: &'a Model,
    param_ids: &[NodeId],
    tokens: &[u32],
) -> Vec<NodeId> {
    let cfg = &model.config;
    let p = ParamIds { ids: param_ids, n_layers: cfg.n_layers };
    let t = tokens.len();
    let dh = cfg.d_head();
    let scale = 1.0 / (dh as f32).sqrt();
    let tok_ids: Vec<usize> = tokens.iter().map(|&u| u as usize).collect();

    let tok_emb = tape.gather_rows(p.embed(), tok_ids);
    let pos_emb = tape.gather_rows(p.pos(), (0..t).collect());
    let mut x = tape.add(tok_emb, pos_emb);
    let lens: Vec<usize> = (1..=t).collect();
    let mut resid = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let xn = tape.rms_norm(x, p.block(l, 4), NORM_EPS);
        let q = tape.matmul(xn, p.block(l, 0));
        let k = tape.matmul(xn, p.block(l, 1));
        let v = tape.matmul(xn, p.block(l, 2));
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let off = h * dh;
            let qh = tape.slice_cols(q, off, dh);
            let kh = tape.slice_cols(k, off, dh);
            let vh = tape.slice_cols(v, off, dh);
            let scores = tape.matmul_bt(qh, kh);
            let scaled = tape.scale(scores, scale);
            let probs = tape.softmax_rows(scaled, lens.clone());
            heads.push(tape.matmul(probs, vh));
        }
        let ctx = tape.concat_cols(heads);
        let attn = tape.matmul(ctx, p.block(l, 3));
        x = tape.add(x, attn);
        let xn2 = tape.rms_norm(x, p.block(l, 7), NORM_EPS);
        let h1 = tape.matmul(xn2, p.block(l, 5));
        let a = tape.gelu(h1);
        let m = tape.matmul(a, p.block(l, 6));
        x = tape.add(x, m);
        resid.push(x);
    }
    resid
}

/// Full-sequence next-token cross entropy as a tape scalar.
pub fn tape_lm_loss<'a>(
    tape: &mut Tape<'a>,
    model: &'a Model,
    param_ids: &[NodeId],
    tokens: &[u32],
) -> NodeId {
    let p = ParamIds { ids: param_ids, n_layers: model.config.n_layers };
    let resid = tape_forward(tape, model, param_ids, tokens);
    let x = *resid.last().unwrap();
    let xn = tape.rms_norm(x, p.final_gain(), NORM_EPS);
    let logits = tape.matmul_bt(xn, p.embed());
    let t = tokens.len();
    let preds = tape.slice_rows(logits, 0, t - 1);
    let targets: Vec<usize> = tokens[1..].iter().map(|&u| u as usize).collect();
    tape.cross_entropy_rows(preds, targets)
}

/// Mean LM loss over sequences (no gradients); used by gradient checks.
pub fn lm_loss_value(model: &Model, seqs: &[Vec<u32>]) -> f64 {
    let mut total = 0.0f64;
    for tokens in seqs {
        let mut tape = Tape::new();
        let ids = register_params(&mut tape, model, false);
        let loss = tape_lm_loss(&mut tape, model, &ids, tokens);
        total += tape.value(loss).item() as f64;
    }
    total / seqs.len() as f64
}

/// Mean LM loss and its gradient w.r.t. every parameter group.
pub fn lm_loss_and_grads(model: &Model, seqs: &[Vec<u32>]) -> (f64, Vec<Tensor>) {
    let mut acc: Vec<Tensor> = model.params().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut total = 0.0f64;
    let w = 1.0 / seqs.len() as f32;
    for tokens in seqs {
        let mut tape = Tape::new();
        let ids = register_params(&mut tape, model, true);
        let loss = tape_lm_loss(&mut tape, model, &ids, tokens);
        total += tape.value(loss).item() as f64;
        let mut grads = tape.backward(loss, w);
        for (slot, &id) in acc.iter_mut().zip(&ids) {
            if let Some(g) = grads.take(id) {
                slot.add_assign(&g);
            }
        }
    }
    (total / seqs.len() as f64, acc)
}

pub fn flatten_params(model: &Model) -> Vec<f32> {
    let mut out = Vec::new();
    for t in model.params() {
        out.extend_from_slice(t.data());
    }
    out
}

pub fn unflatten_params(model: &mut Model, flat: &[f32]) {
    let mut off = 0;
    for t in model.params_mut() {
        let n = t.len();
        t.data_mut().copy_from_slice(&flat[off..off + n]);
        off += n;
    }
    assert_eq!(off, flat.len());
}

/// Trains a next-token LM on the prompt+label sequences of the given
/// instances. Deterministic per seed; aborts on divergence.
pub fn train_lm(
    instances: &[Instance],
    train_idx: &[usize],
    vocab: &Vocab,
    model_config: ModelConfig,
    cfg: &LmTrainConfig,
) -> Result<TrainedModel> {
    if train_idx.is_empty() {
        return Err(Error::config("train_lm: empty training set"));
    }
    let seqs: Vec<Vec<u32>> = train_idx
        .iter()
        .map(|&i| vocab.encode(&instances[i].training_sequence()))
        .collect();
    let bodies: Vec<Vec<u32>> =
        train_idx.iter().map(|&i| vocab.encode(&instances[i].text)).collect();
    for s in &seqs {
        if s.len() > model_config.context_len {
            return Err(Error::config(format!(
                "training sequence length {} exceeds context {}",
                s.len(),
                model_config.context_len
            )));
        }
    }
    let mut model = Model::init(model_config)?;
    let mut optim = OptimState::new(
        AdamConfig { lr: cfg.lr, ..AdamConfig::default() },
        &model.param_tensors(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;
    let mut curve = Vec::with_capacity(cfg.steps);

    let mut grad_acc: Vec<Tensor> =
        model.params().iter().map(|t| Tensor::zeros(t.shape())).collect();

    for step in 0..cfg.steps {
        for g in &mut grad_acc {
            g.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut batch_loss = 0.0f64;
        let bs = cfg.batch_size.min(seqs.len());
        let w = 1.0 / bs as f32;
        for _ in 0..bs {
            if cursor >= order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let pick = order[cursor];
            cursor += 1;
            let label_idx = instances[train_idx[pick]].label.index();
            let exposure = cfg
                .label_exposure_overrides
                .iter()
                .find(|&&(e, _)| e == label_idx)
                .map(|&(_, q)| q)
                .unwrap_or(cfg.label_exposure);
            let tokens = if rng.gen_bool(exposure) {
                &seqs[pick]
            } else {
                &bodies[pick]
            };
            if tokens.len() < 2 {
                continue;
            }
            let mut tape = Tape::new();
            let ids = register_params(&mut tape, &model, true);
            let loss = tape_lm_loss(&mut tape, &model, &ids, tokens);
            batch_loss += tape.value(loss).item() as f64 * w as f64;
            let mut grads = tape.backward(loss, w);
            for (slot, &id) in grad_acc.iter_mut().zip(&ids) {
                if let Some(g) = grads.take(id) {
                    slot.add_assign(&g);
                }
            }
        }
        if !batch_loss.is_finite() {
            return Err(Error::numerical(format!(
                "LM training diverged at step {}: loss = {}",
                step, batch_loss
            )));
        }
        let mut params = model.param_tensors();
        optim.adam_step(&mut params, &grad_acc)?;
        model.set_params(&params);
        curve.push(batch_loss as f32);
    }
    Ok(TrainedModel { model, loss_curve: curve })
}
