//! Inference-path forward passes: hooked observation, delta patching,
//! per-instance caches, and the final-row resume fast path.
//!
//! Every code path here reproduces the training tape's arithmetic
//! bit-for-bit: reductions accumulate in f64 in the same fixed order, so a
//! patched resume equals a full patched rerun exactly.

use crate::error::{Error, Result};
use crate::numerics::tape::{gelu, rms_norm_forward};
use crate::numerics::tensor::softmax_prefix_in_place;
use crate::numerics::Tensor;

use super::{LabelIds, Model, PatchSet, ResidualRecord, NORM_EPS};

/// A read-only transform applied to the residual stream after each block
/// (used for all-position steering during language-model evaluation).
pub trait ResidualIntervention {
    fn apply(&self, layer: usize, x: &mut Tensor);
}

/// Per-instance cache of a base (unpatched) forward pass, enabling resumes
/// that recompute only the final row of layers above a patch point.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub tokens: Vec<u32>,
    /// Post-block residual stream per layer, all positions.
    pub resid: Vec<Tensor>,
    /// Keys/values per layer, all positions.
    pub k: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Next-token logits at the final position.
    pub final_logits: Vec<f32>,
}

impl ForwardCache {
    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    /// Residual vector after `layer` at the final position.
    pub fn final_resid(&self, layer: usize) -> &[f32] {
        let t = self.seq_len() - 1;
        self.resid[layer].row(t)
    }
}

fn check_tokens(model: &Model, tokens: &[u32]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::config("forward: empty token sequence"));
    }
    if tokens.len() > model.config.context_len {
        return Err(Error::config(format!(
            "sequence length {} exceeds context length {}",
            tokens.len(),
            model.config.context_len
        )));
    }
    for &t in tokens {
        if t as usize >= model.config.vocab_size {
            return Err(Error::config(format!("token id {} out of vocab", t)));
        }
    }
    Ok(())
}

fn embed_tokens(model: &Model, tokens: &[u32]) -> Tensor {
    let d = model.config.d_model;
    let mut x = Tensor::zeros(&[tokens.len(), d]);
    for (i, &t) in tokens.iter().enumerate() {
        let e = model.embed.row(t as usize);
        let p = model.pos.row(i);
        let row = x.row_mut(i);
        for j in 0..d {
            row[j] = e[j] + p[j];
        }
    }
    x
}

/// Causal multi-head attention over all positions. Scores and context are
/// accumulated in f64 in ascending key order, matching the tape kernels.
fn attention_full(model: &Model, layer: usize, xn: &Tensor) -> (Tensor, Tensor, Tensor) {
    let b = &model.blocks[layer];
    let t = xn.nrows();
    let d = model.config.d_model;
    let dh = model.config.d_head();
    let scale = 1.0 / (dh as f32).sqrt();
    let q = xn.matmul(&b.wq);
    let k = xn.matmul(&b.wk);
    let v = xn.matmul(&b.wv);
    let mut ctx = Tensor::zeros(&[t, d]);
    let mut scores = vec![0.0f32; t];
    for h in 0..model.config.n_heads {
        let off = h * dh;
        for i in 0..t {
            let qrow = &q.row(i)[off..off + dh];
            for j in 0..=i {
                let krow = &k.row(j)[off..off + dh];
                let mut acc = 0.0f64;
                for p in 0..dh {
                    acc += qrow[p] as f64 * krow[p] as f64;
                }
                scores[j] = acc as f32 * scale;
            }
            softmax_prefix_in_place(&mut scores[..i + 1], i + 1);
            let mut acc = vec![0.0f64; dh];
            for j in 0..=i {
                let w = scores[j] as f64;
                let vrow = &v.row(j)[off..off + dh];
                for (p, a) in acc.iter_mut().enumerate() {
                    *a += w * vrow[p] as f64;
                }
            }
            let dst = &mut ctx.row_mut(i)[off..off + dh];
            for p in 0..dh {
                dst[p] = acc[p] as f32;
            }
        }
    }
    (ctx.matmul(&b.wo), k, v)
}

fn mlp_full(model: &Model, layer: usize, xn: &Tensor) -> Tensor {
    let b = &model.blocks[layer];
    let h = xn.matmul(&b.w1);
    let a = Tensor::new(h.shape().to_vec(), h.data().iter().map(|&u| gelu(u)).collect());
    a.matmul(&b.w2)
}

pub(crate) fn unembed_row(model: &Model, row: &[f32]) -> Vec<f32> {
    let xn = rms_norm_row(row, model.final_gain.data());
    let v = model.config.vocab_size;
    let d = model.config.d_model;
    let mut logits = vec![0.0f32; v];
    for (t, l) in logits.iter_mut().enumerate() {
        let e = model.embed.row(t);
        let mut acc = 0.0f64;
        for j in 0..d {
            acc += xn[j] as f64 * e[j] as f64;
        }
        *l = acc as f32;
    }
    logits
}

fn rms_norm_row(row: &[f32], gain: &[f32]) -> Vec<f32> {
    let n = row.len();
    let ms: f64 = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / n as f64;
    let inv = 1.0 / (ms + NORM_EPS as f64).sqrt();
    row.iter().zip(gain).map(|(&x, &g)| (x as f64 * inv * g as f64) as f32).collect()
}

pub struct RunOutput {
    /// Residual stream after every block, all positions.
    pub resid: Vec<Tensor>,
    pub k: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Final normed hidden states, all positions.
    pub normed: Tensor,
}

/// Full forward pass; applies `patches` after each block.
pub fn run(model: &Model, tokens: &[u32], patches: &PatchSet) -> Result<RunOutput> {
    check_tokens(model, tokens)?;
    patches.validate(&model.config)?;
    let mut x = embed_tokens(model, tokens);
    let mut resid = Vec::with_capacity(model.config.n_layers);
    let mut ks = Vec::with_capacity(model.config.n_layers);
    let mut vs = Vec::with_capacity(model.config.n_layers);
    for l in 0..model.config.n_layers {
        let b = &model.blocks[l];
        let xn = rms_norm_forward(&x, &b.attn_gain, NORM_EPS);
        let (attn, k, v) = attention_full(model, l, &xn);
        x = x.add(&attn);
        let xn2 = rms_norm_forward(&x, &b.mlp_gain, NORM_EPS);
        x = x.add(&mlp_full(model, l, &xn2));
        for p in patches.at_layer(l) {
            if p.position >= tokens.len() {
                return Err(Error::config("patch position out of range"));
            }
            let row = x.row_mut(p.position);
            for (r, dv) in row.iter_mut().zip(&p.delta) {
                *r += dv;
            }
        }
        resid.push(x.clone());
        ks.push(k);
        vs.push(v);
    }
    let normed = rms_norm_forward(&x, &model.final_gain, NORM_EPS);
    Ok(RunOutput { resid, k: ks, v: vs, normed })
}

/// Logits over the vocabulary at all positions ([T, V]).
pub fn all_logits(model: &Model, out: &RunOutput) -> Tensor {
    out.normed.matmul_bt(&model.embed)
}

/// Next-token logits at `position` plus the residual record there.
/// Observation does not perturb the forward pass.
pub fn forward_with_hooks(
    model: &Model,
    tokens: &[u32],
    position: usize,
) -> Result<(Vec<f32>, ResidualRecord)> {
    if position >= tokens.len() {
        return Err(Error::config(format!(
            "hook position {} out of range for length {}",
            position,
            tokens.len()
        )));
    }
    let out = run(model, tokens, &PatchSet::new())?;
    let logits = unembed_from(model, &out, position);
    Ok((logits, record_at(&out, position)))
}

fn unembed_from(model: &Model, out: &RunOutput, position: usize) -> Vec<f32> {
    let x = out.resid.last().unwrap().row(position);
    unembed_row(model, x)
}

fn record_at(out: &RunOutput, position: usize) -> ResidualRecord {
    ResidualRecord {
        position,
        layers: out.resid.iter().map(|r| r.row(position).to_vec()).collect(),
    }
}

/// Patched forward (full rerun). Deltas are added to the residual stream
/// immediately after their layer's block, before subsequent layers run.
pub fn patched_forward(
    model: &Model,
    tokens: &[u32],
    patches: &PatchSet,
    position: usize,
) -> Result<(Vec<f32>, ResidualRecord)> {
    if position >= tokens.len() {
        return Err(Error::config("position out of range"));
    }
    let out = run(model, tokens, patches)?;
    Ok((unembed_from(model, &out, position), record_at(&out, position)))
}

/// Builds the resume cache from one unpatched pass.
pub fn build_cache(model: &Model, tokens: &[u32]) -> Result<ForwardCache> {
    let out = run(model, tokens, &PatchSet::new())?;
    let final_logits = unembed_from(model, &out, tokens.len() - 1);
    Ok(ForwardCache { tokens: tokens.to_vec(), resid: out.resid, k: out.k, v: out.v, final_logits })
}

/// Output of a final-row resume: residual vectors at the final position for
/// every layer >= the resume point, and the next-token logits there.
pub struct ResumeOutput {
    pub start_layer: usize,
    /// resid_rows[l - start_layer] = post-block-l residual at the final token.
    pub resid_rows: Vec<Vec<f32>>,
    pub logits: Vec<f32>,
}

impl ResumeOutput {
    pub fn final_resid(&self, layer: usize) -> &[f32] {
        &self.resid_rows[layer - self.start_layer]
    }
}

/// Recomputes only the final row of every layer at or above the lowest
/// patched layer, reusing cached keys/values for prefix positions. All
/// patches must target the final position. Bit-identical to
/// `patched_forward` at the final position.
pub fn resume_final_row(
    model: &Model,
    cache: &ForwardCache,
    patches: &PatchSet,
) -> Result<ResumeOutput> {
    patches.validate(&model.config)?;
    let t = cache.seq_len();
    let last = t - 1;
    for p in patches.iter() {
        if p.position != last {
            return Err(Error::config("resume_final_row requires final-position patches"));
        }
    }
    let start = match patches.min_layer() {
        Some(l) => l,
        None => {
            return Ok(ResumeOutput {
                start_layer: model.config.n_layers,
                resid_rows: Vec::new(),
                logits: cache.final_logits.clone(),
            })
        }
    };

    // apply the start-layer patches to the cached post-block residual
    let mut row: Vec<f32> = cache.resid[start].row(last).to_vec();
    for p in patches.at_layer(start) {
        for (r, dv) in row.iter_mut().zip(&p.delta) {
            *r += dv;
        }
    }
    let mut resid_rows = vec![row.clone()];

    for l in start + 1..model.config.n_layers {
        row = block_final_row(model, l, &row, &cache.k[l], &cache.v[l], t);
        for p in patches.at_layer(l) {
            for (r, dv) in row.iter_mut().zip(&p.delta) {
                *r += dv;
            }
        }
        resid_rows.push(row.clone());
    }
    let logits = unembed_row(model, &row);
    Ok(ResumeOutput { start_layer: start, resid_rows, logits })
}

/// Public alias for driving the resume path one block at a time (steering
/// interleaves deltas between blocks).
pub fn resume_block_row(
    model: &Model,
    layer: usize,
    row: &[f32],
    k_cache: &Tensor,
    v_cache: &Tensor,
    t: usize,
) -> Vec<f32> {
    block_final_row(model, layer, row, k_cache, v_cache, t)
}

/// Final norm + tied unembedding of a single residual row.
pub fn unembed_final(model: &Model, row: &[f32]) -> Vec<f32> {
    unembed_row(model, row)
}

/// Full forward with a residual intervention after every block; returns the
/// next-token logits at the final position.
pub fn steered_full_logits(
    model: &Model,
    tokens: &[u32],
    intervention: &dyn ResidualIntervention,
) -> Result<Vec<f32>> {
    check_tokens(model, tokens)?;
    let mut x = embed_tokens(model, tokens);
    for l in 0..model.config.n_layers {
        let b = &model.blocks[l];
        let xn = rms_norm_forward(&x, &b.attn_gain, NORM_EPS);
        let (attn, _, _) = attention_full(model, l, &xn);
        x = x.add(&attn);
        let xn2 = rms_norm_forward(&x, &b.mlp_gain, NORM_EPS);
        x = x.add(&mlp_full(model, l, &xn2));
        intervention.apply(l, &mut x);
    }
    Ok(unembed_row(model, x.row(tokens.len() - 1)))
}

/// Tape twin of `resume_block_row`: identical arithmetic, recorded for
/// reverse-mode gradients. Cached prefix keys/values enter as constants.
pub fn tape_resume_block<'a>(
    tape: &mut crate::numerics::Tape<'a>,
    model: &'a Model,
    layer: usize,
    row: crate::numerics::NodeId,
    k_cache: &Tensor,
    v_cache: &Tensor,
    t: usize,
) -> crate::numerics::NodeId {
    let b = &model.blocks[layer];
    let d = model.config.d_model;
    let dh = model.config.d_head();
    let scale = 1.0 / (dh as f32).sqrt();
    let ag = tape.constant(&b.attn_gain);
    let xn = tape.rms_norm(row, ag, NORM_EPS);
    let wq = tape.constant(&b.wq);
    let wk = tape.constant(&b.wk);
    let wv = tape.constant(&b.wv);
    let q = tape.matmul(xn, wq);
    let k_new = tape.matmul(xn, wk);
    let v_new = tape.matmul(xn, wv);
    let k_prefix = tape.constant_owned(Tensor::new(
        vec![t - 1, d],
        k_cache.data()[..(t - 1) * d].to_vec(),
    ));
    let v_prefix = tape.constant_owned(Tensor::new(
        vec![t - 1, d],
        v_cache.data()[..(t - 1) * d].to_vec(),
    ));
    let keys = tape.concat_rows(k_prefix, k_new);
    let vals = tape.concat_rows(v_prefix, v_new);
    let mut heads = Vec::with_capacity(model.config.n_heads);
    for h in 0..model.config.n_heads {
        let off = h * dh;
        let qh = tape.slice_cols(q, off, dh);
        let kh = tape.slice_cols(keys, off, dh);
        let vh = tape.slice_cols(vals, off, dh);
        let scores = tape.matmul_bt(qh, kh);
        let scaled = tape.scale(scores, scale);
        let probs = tape.softmax_rows(scaled, vec![t]);
        heads.push(tape.matmul(probs, vh));
    }
    let ctx = tape.concat_cols(heads);
    let wo = tape.constant(&b.wo);
    let attn = tape.matmul(ctx, wo);
    let after_attn = tape.add(row, attn);
    let mg = tape.constant(&b.mlp_gain);
    let xn2 = tape.rms_norm(after_attn, mg, NORM_EPS);
    let w1 = tape.constant(&b.w1);
    let h1 = tape.matmul(xn2, w1);
    let a = tape.gelu(h1);
    let w2 = tape.constant(&b.w2);
    let m = tape.matmul(a, w2);
    tape.add(after_attn, m)
}

/// One block applied to the final row only, attending over cached
/// prefix keys/values plus the recomputed final key/value.
fn block_final_row(
    model: &Model,
    layer: usize,
    row: &[f32],
    k_cache: &Tensor,
    v_cache: &Tensor,
    t: usize,
) -> Vec<f32> {
    let b = &model.blocks[layer];
    let d = model.config.d_model;
    let dh = model.config.d_head();
    let scale = 1.0 / (dh as f32).sqrt();
    let xn = rms_norm_row(row, b.attn_gain.data());
    let xnt = Tensor::new(vec![1, d], xn);
    let q = xnt.matmul(&b.wq);
    let k_new = xnt.matmul(&b.wk);
    let v_new = xnt.matmul(&b.wv);

    let key_row = |j: usize| -> &[f32] { if j + 1 == t { k_new.row(0) } else { k_cache.row(j) } };
    let val_row = |j: usize| -> &[f32] { if j + 1 == t { v_new.row(0) } else { v_cache.row(j) } };

    let mut ctx = vec![0.0f32; d];
    let mut scores = vec![0.0f32; t];
    for h in 0..model.config.n_heads {
        let off = h * dh;
        let qrow = &q.row(0)[off..off + dh];
        for (j, s) in scores.iter_mut().enumerate() {
            let krow = &key_row(j)[off..off + dh];
            let mut acc = 0.0f64;
            for p in 0..dh {
                acc += qrow[p] as f64 * krow[p] as f64;
            }
            *s = acc as f32 * scale;
        }
        softmax_prefix_in_place(&mut scores, t);
        let mut acc = vec![0.0f64; dh];
        for (j, &w) in scores.iter().enumerate() {
            let vrow = &val_row(j)[off..off + dh];
            for (p, a) in acc.iter_mut().enumerate() {
                *a += w as f64 * vrow[p] as f64;
            }
        }
        for p in 0..dh {
            ctx[off + p] = acc[p] as f32;
        }
    }
    let ctxt = Tensor::new(vec![1, d], ctx);
    let attn = ctxt.matmul(&b.wo);
    let mut out: Vec<f32> = row.iter().zip(attn.row(0)).map(|(&x, &a)| x + a).collect();

    let xn2 = rms_norm_row(&out, b.mlp_gain.data());
    let h = Tensor::new(vec![1, d], xn2).matmul(&b.w1);
    let a = Tensor::new(h.shape().to_vec(), h.data().iter().map(|&u| gelu(u)).collect());
    let m = a.matmul(&b.w2);
    for (o, &mv) in out.iter_mut().zip(m.row(0)) {
        *o += mv;
    }
    out
}

// ── restricted emotion logits ───────────────────────────────────────

/// Next-token logits at the final prompt token restricted to the six label
/// tokens, in canonical emotion order.
pub fn emotion_logits(
    model: &Model,
    labels: &LabelIds,
    prompt_tokens: &[u32],
    patches: Option<&PatchSet>,
) -> Result<[f32; 6]> {
    let position = prompt_tokens.len() - 1;
    let full = match patches {
        Some(p) if !p.is_empty() => patched_forward(model, prompt_tokens, p, position)?.0,
        _ => forward_with_hooks(model, prompt_tokens, position)?.0,
    };
    Ok(restrict_logits(&full, labels))
}

pub fn restrict_logits(full: &[f32], labels: &LabelIds) -> [f32; 6] {
    let mut out = [0.0f32; 6];
    for (i, &id) in labels.0.iter().enumerate() {
        out[i] = full[id as usize];
    }
    out
}

pub fn argmax6(logits: &[f32; 6]) -> usize {
    let mut best = 0;
    for i in 1..6 {
        if logits[i] > logits[best] {
            best = i;
        }
    }
    best
}

// ── perplexity ──────────────────────────────────────────────────────

/// exp(mean next-token negative log-likelihood) over all positions of all
/// sequences; an optional residual intervention (all-position steering) is
/// applied after every block.
pub fn perplexity(
    model: &Model,
    seqs: &[Vec<u32>],
    intervention: Option<&dyn ResidualIntervention>,
) -> Result<f64> {
    if seqs.is_empty() {
        return Err(Error::config("perplexity: no sequences"));
    }
    let mut total_nll = 0.0f64;
    let mut count = 0usize;
    for tokens in seqs {
        if tokens.len() < 2 {
            continue;
        }
        check_tokens(model, tokens)?;
        let mut x = embed_tokens(model, tokens);
        for l in 0..model.config.n_layers {
            let b = &model.blocks[l];
            let xn = rms_norm_forward(&x, &b.attn_gain, NORM_EPS);
            let (attn, _, _) = attention_full(model, l, &xn);
            x = x.add(&attn);
            let xn2 = rms_norm_forward(&x, &b.mlp_gain, NORM_EPS);
            x = x.add(&mlp_full(model, l, &xn2));
            if let Some(iv) = intervention {
                iv.apply(l, &mut x);
            }
        }
        let normed = rms_norm_forward(&x, &model.final_gain, NORM_EPS);
        let logits = normed.matmul_bt(&model.embed);
        for i in 0..tokens.len() - 1 {
            let row = logits.row(i);
            let lse = crate::numerics::log_sum_exp(row);
            total_nll += lse - row[tokens[i + 1] as usize] as f64;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::config("perplexity: sequences too short"));
    }
    Ok((total_nll / count as f64).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::Rng;
    use rand::SeedableRng;

    fn tiny_model(seed: u64) -> Model {
        Model::init(ModelConfig {
            n_layers: 4,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab_size: 40,
            context_len: 16,
            seed,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn random_tokens(rng: &mut rand_chacha::ChaCha8Rng, len: usize, vocab: usize) -> Vec<u32> {
        (0..len).map(|_| rng.gen_range(0..vocab as u32)).collect()
    }

    #[test]
    fn residual_record_shape_contract() {
        let m = tiny_model(1);
        let tokens = vec![3, 5, 7, 2];
        let (logits, rec) = forward_with_hooks(&m, &tokens, 3).unwrap();
        assert_eq!(logits.len(), 40);
        assert_eq!(rec.layers.len(), 4);
        assert!(rec.layers.iter().all(|l| l.len() == 16));
    }

    #[test]
    fn hooks_do_not_perturb_and_empty_patchset_is_noop() {
        let m = tiny_model(2);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let len = rng.gen_range(2..10);
            let tokens = random_tokens(&mut rng, len, 40);
            let pos = len - 1;
            let (a, _) = forward_with_hooks(&m, &tokens, pos).unwrap();
            let (b, _) = patched_forward(&m, &tokens, &PatchSet::new(), pos).unwrap();
            assert_eq!(a, b, "empty patchset must be bit-identical");
        }
    }

    #[test]
    fn differing_early_token_changes_record() {
        let m = tiny_model(3);
        let t1 = vec![1, 2, 3, 4, 5];
        let t2 = vec![9, 2, 3, 4, 5];
        let (_, r1) = forward_with_hooks(&m, &t1, 4).unwrap();
        let (_, r2) = forward_with_hooks(&m, &t2, 4).unwrap();
        assert_ne!(r1.layers, r2.layers);
    }

    #[test]
    fn final_layer_patch_closed_form() {
        let m = tiny_model(4);
        let tokens = vec![1, 4, 9, 11];
        let pos = 3;
        let (base_logits, rec) = forward_with_hooks(&m, &tokens, pos).unwrap();
        let mut delta = vec![0.0f32; 16];
        delta[2] = 0.35;
        delta[7] = -0.2;
        let mut ps = PatchSet::new();
        ps.add(3, pos, delta.clone());
        let (patched, _) = patched_forward(&m, &tokens, &ps, pos).unwrap();
        // closed form: only the final norm + unembed sit above the patch
        let h = &rec.layers[3];
        let hp: Vec<f32> = h.iter().zip(&delta).map(|(&a, &b)| a + b).collect();
        let expect_base = unembed_row(&m, h);
        let expect_patch = unembed_row(&m, &hp);
        for t in 0..40 {
            let got = patched[t] - base_logits[t];
            let want = expect_patch[t] - expect_base[t];
            assert!((got - want).abs() < 1e-5, "token {}: {} vs {}", t, got, want);
        }
    }

    #[test]
    fn resume_matches_naive_patched_forward_bitwise() {
        let m = tiny_model(6);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        for trial in 0..8 {
            let len = rng.gen_range(3..12);
            let tokens = random_tokens(&mut rng, len, 40);
            let pos = len - 1;
            let cache = build_cache(&m, &tokens).unwrap();
            let mut ps = PatchSet::new();
            for _ in 0..rng.gen_range(1..3) {
                let layer = rng.gen_range(0..4);
                let delta: Vec<f32> = (0..16).map(|_| rng.gen_range(-0.5..0.5)).collect();
                ps.add(layer, pos, delta);
            }
            let (naive_logits, naive_rec) = patched_forward(&m, &tokens, &ps, pos).unwrap();
            let resume = resume_final_row(&m, &cache, &ps).unwrap();
            assert_eq!(resume.logits, naive_logits, "trial {} logits differ", trial);
            for l in resume.start_layer..4 {
                assert_eq!(
                    resume.final_resid(l),
                    &naive_rec.layers[l][..],
                    "trial {} layer {} residual differs",
                    trial,
                    l
                );
            }
        }
    }

    #[test]
    fn disjoint_patches_compose() {
        // Two single-layer patches applied together equal the sequential
        // composition with fixed deltas; re-deriving the second delta from
        // the first patched run is a different (non-commuting) operation.
        let m = tiny_model(7);
        let tokens = vec![2, 8, 5, 13, 1];
        let pos = 4;
        let d1: Vec<f32> = (0..16).map(|i| 0.02 * i as f32).collect();
        let d2: Vec<f32> = (0..16).map(|i| -0.015 * i as f32 + 0.1).collect();
        let mut both = PatchSet::new();
        both.add(1, pos, d1.clone());
        both.add(2, pos, d2.clone());
        let (together, _) = patched_forward(&m, &tokens, &both, pos).unwrap();

        let cache = build_cache(&m, &tokens).unwrap();
        let resume = resume_final_row(&m, &cache, &both).unwrap();
        assert_eq!(together, resume.logits);

        let mut only1 = PatchSet::new();
        only1.add(1, pos, d1);
        let (after1, rec1) = patched_forward(&m, &tokens, &only1, pos).unwrap();
        assert_ne!(together, after1);
        // the layer-2 residual under patch 1 differs from the base run, so a
        // delta derived from the base run is stale after patch 1
        let (_, rec_base) = forward_with_hooks(&m, &tokens, pos).unwrap();
        assert_ne!(rec1.layers[2], rec_base.layers[2]);
    }

    #[test]
    fn zero_embedding_gives_equal_restricted_logits_and_uniform_ppl() {
        let mut m = tiny_model(8);
        m.embed = Tensor::zeros(&[40, 16]);
        let labels = LabelIds([4, 9, 11, 20, 23, 31]);
        let logits = emotion_logits(&m, &labels, &[1, 2, 3], None).unwrap();
        for i in 1..6 {
            assert_eq!(logits[0], logits[i]);
        }
        // zero unembedding -> uniform next-token distribution -> PPL = vocab
        let ppl = perplexity(&m, &[vec![1, 2, 3, 4, 5]], None).unwrap();
        assert!((ppl - 40.0).abs() < 1e-3, "ppl {}", ppl);
    }

    #[test]
    fn restricted_logits_are_a_subvector() {
        let m = tiny_model(9);
        let tokens = vec![3, 1, 4, 1, 5];
        let labels = LabelIds([0, 7, 14, 21, 28, 35]);
        let (full, _) = forward_with_hooks(&m, &tokens, 4).unwrap();
        let restricted = emotion_logits(&m, &labels, &tokens, None).unwrap();
        for (i, &id) in labels.0.iter().enumerate() {
            assert_eq!(restricted[i], full[id as usize]);
        }
    }

    #[test]
    fn patch_layer_out_of_range_errors() {
        let m = tiny_model(10);
        let mut ps = PatchSet::new();
        ps.add(4, 0, vec![0.0; 16]);
        assert!(patched_forward(&m, &[1, 2], &ps, 1).is_err());
    }

    #[test]
    fn position_out_of_range_errors() {
        let m = tiny_model(11);
        assert!(forward_with_hooks(&m, &[1, 2, 3], 3).is_err());
    }
}
