//! Small decoder-only transformer: pre-norm blocks, learned positional
//! embeddings, weight-tied unembedding. The residual stream after each
//! block is the observation and intervention site for the whole pipeline.

pub mod forward;
pub mod train;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Vocab, EMOTIONS};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use forward::{ForwardCache, ResidualIntervention};
pub use train::{train_lm, LmTrainConfig, TrainedModel};

pub const NORM_EPS: f32 = 1e-5;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub context_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 8,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            vocab_size: 512,
            context_len: 48,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers < 3 {
            return Err(Error::config("n_layers must be >= 3 so three phases are expressible"));
        }
        if self.vocab_size == 0 || self.context_len == 0 {
            return Err(Error::config("vocab_size and context_len must be positive"));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub attn_gain: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
    pub mlp_gain: Tensor,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub embed: Tensor,
    pub pos: Tensor,
    pub blocks: Vec<Block>,
    pub final_gain: Tensor,
}

fn normal(rng: &mut ChaCha8Rng, std: f32, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        // Box-Muller
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let a = 2.0 * std::f64::consts::PI * u2;
        data.push((r * a.cos() * std as f64) as f32);
        if data.len() < n {
            data.push((r * a.sin() * std as f64) as f32);
        }
    }
    Tensor::new(shape.to_vec(), data)
}

impl Model {
    pub fn init(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let out_std = 0.02 / (2.0 * config.n_layers as f32).sqrt();
        let embed = normal(&mut rng, 0.02, &[config.vocab_size, d]);
        let pos = normal(&mut rng, 0.01, &[config.context_len, d]);
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                wq: normal(&mut rng, 0.02, &[d, d]),
                wk: normal(&mut rng, 0.02, &[d, d]),
                wv: normal(&mut rng, 0.02, &[d, d]),
                wo: normal(&mut rng, out_std, &[d, d]),
                attn_gain: Tensor::filled(&[d], 1.0),
                w1: normal(&mut rng, 0.02, &[d, config.d_ff]),
                w2: normal(&mut rng, out_std, &[config.d_ff, d]),
                mlp_gain: Tensor::filled(&[d], 1.0),
            })
            .collect();
        let final_gain = Tensor::filled(&[d], 1.0);
        Ok(Model { config, embed, pos, blocks, final_gain })
    }

    /// Parameter tensors in a stable order shared by the optimizer, the
    /// checkpoint format, and gradient accumulation.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["embed".to_string(), "pos".to_string()];
        for l in 0..self.blocks.len() {
            for p in ["wq", "wk", "wv", "wo", "attn_gain", "w1", "w2", "mlp_gain"] {
                names.push(format!("block{}.{}", l, p));
            }
        }
        names.push("final_gain".to_string());
        names
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut ps = vec![&self.embed, &self.pos];
        for b in &self.blocks {
            ps.extend([&b.wq, &b.wk, &b.wv, &b.wo, &b.attn_gain, &b.w1, &b.w2, &b.mlp_gain]);
        }
        ps.push(&self.final_gain);
        ps
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut ps: Vec<&mut Tensor> = vec![&mut self.embed, &mut self.pos];
        for b in &mut self.blocks {
            ps.push(&mut b.wq);
            ps.push(&mut b.wk);
            ps.push(&mut b.wv);
            ps.push(&mut b.wo);
            ps.push(&mut b.attn_gain);
            ps.push(&mut b.w1);
            ps.push(&mut b.w2);
            ps.push(&mut b.mlp_gain);
        }
        ps.push(&mut self.final_gain);
        ps
    }

    pub fn param_tensors(&self) -> Vec<Tensor> {
        self.params().into_iter().cloned().collect()
    }

    pub fn set_params(&mut self, values: &[Tensor]) {
        let mut ps = self.params_mut();
        assert_eq!(ps.len(), values.len());
        for (dst, src) in ps.iter_mut().zip(values) {
            assert_eq!(dst.shape(), src.shape());
            **dst = src.clone();
        }
    }
}

// ── residual capture and patching ───────────────────────────────────

/// Residual-stream vectors `h^(l)` after each block, at one token position.
#[derive(Clone, Debug)]
pub struct ResidualRecord {
    pub position: usize,
    pub layers: Vec<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub layer: usize,
    pub position: usize,
    pub delta: Vec<f32>,
}

/// Residual-stream additions, at most one delta per (layer, position);
/// duplicate additions merge by summation.
#[derive(Clone, Debug, Default)]
pub struct PatchSet {
    patches: Vec<Patch>,
}

impl PatchSet {
    pub fn new() -> Self {
        PatchSet::default()
    }

    pub fn add(&mut self, layer: usize, position: usize, delta: Vec<f32>) {
        if let Some(p) =
            self.patches.iter_mut().find(|p| p.layer == layer && p.position == position)
        {
            for (d, v) in p.delta.iter_mut().zip(&delta) {
                *d += v;
            }
        } else {
            self.patches.push(Patch { layer, position, delta });
        }
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Patch> {
        self.patches.iter()
    }

    pub fn at_layer(&self, layer: usize) -> impl Iterator<Item = &Patch> {
        self.patches.iter().filter(move |p| p.layer == layer)
    }

    pub fn min_layer(&self) -> Option<usize> {
        self.patches.iter().map(|p| p.layer).min()
    }

    pub fn max_layer(&self) -> Option<usize> {
        self.patches.iter().map(|p| p.layer).max()
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        for p in &self.patches {
            if p.layer >= config.n_layers {
                return Err(Error::config(format!(
                    "patch layer {} out of range (n_layers {})",
                    p.layer, config.n_layers
                )));
            }
            if p.delta.len() != config.d_model {
                return Err(Error::config("patch delta length != d_model"));
            }
        }
        Ok(())
    }
}

/// Token ids of the six emotion labels, in canonical order.
#[derive(Clone, Debug)]
pub struct LabelIds(pub [u32; 6]);

impl LabelIds {
    pub fn from_vocab(vocab: &Vocab) -> Result<Self> {
        let mut ids = [0u32; 6];
        for (i, e) in EMOTIONS.iter().enumerate() {
            ids[i] = vocab
                .id(e.name())
                .ok_or_else(|| Error::config(format!("label token `{}` missing from vocab", e)))?;
        }
        Ok(LabelIds(ids))
    }
}
