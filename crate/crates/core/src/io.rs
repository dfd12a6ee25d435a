//! On-disk formats and atomic artifact writes.
//!
//! Tensor binary ("SCL1"): magic `SCL1`, u32 version = 1, u32 rank,
//! u64 dims[rank], then little-endian f32 values row-major.
//!
//! Sparse store layer ("CSR1"): magic `CSR1`, u32 version = 1, u64 n_rows,
//! u64 n_cols, u64 nnz, then row offsets ((n_rows + 1) x u64), column
//! indices (nnz x u32), values (nnz x f32), all little-endian.
//!
//! Every write goes to `<path>.tmp` in the target directory and is renamed
//! into place.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::corpus::Emotion;
use crate::error::{Error, Result};
use crate::flow::ActivationStore;
use crate::model::{Block, Model, ModelConfig};
use crate::numerics::Tensor;
use crate::sae::{SaeParams, SparseFeatureVector};

pub const TENSOR_MAGIC: &[u8; 4] = b"SCL1";
pub const CSR_MAGIC: &[u8; 4] = b"CSR1";
pub const FORMAT_VERSION: u32 = 1;

/// Writes bytes atomically (temp file + rename).
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("part")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let s = serde_json::to_string_pretty(value).map_err(|e| Error::format(e.to_string()))?;
    write_atomic(path, s.as_bytes())
}

pub fn read_json(path: &Path) -> Result<serde_json::Value> {
    let s = fs::read_to_string(path)?;
    serde_json::from_str(&s).map_err(|e| Error::format(format!("{}: {}", path.display(), e)))
}

// ── tensor binary ───────────────────────────────────────────────────

pub fn tensor_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + t.len() * 4);
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    write_atomic(path, &tensor_bytes(t))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let mut f = fs::File::open(path)?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    tensor_from_bytes(&bytes).map_err(|e| Error::format(format!("{}: {}", path.display(), e)))
}

pub fn tensor_from_bytes(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    if bytes.len() < 12 || &bytes[0..4] != TENSOR_MAGIC {
        return Err("bad magic".to_string());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(format!("unsupported version {}", version));
    }
    let rank = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let mut off = 12;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        if off + 8 > bytes.len() {
            return Err("truncated dims".to_string());
        }
        shape.push(u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()) as usize);
        off += 8;
    }
    let n: usize = shape.iter().product();
    if bytes.len() != off + n * 4 {
        return Err(format!("expected {} value bytes, found {}", n * 4, bytes.len() - off));
    }
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let s = off + i * 4;
        data.push(f32::from_le_bytes(bytes[s..s + 4].try_into().unwrap()));
    }
    Ok(Tensor::new(shape, data))
}

// ── model checkpoints ───────────────────────────────────────────────

pub fn save_model(dir: &Path, model: &Model, seed: u64, config_hash: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    let names = model.param_names();
    for (name, tensor) in names.iter().zip(model.params()) {
        write_tensor(&dir.join(format!("{}.scl", name)), tensor)?;
    }
    let manifest = serde_json::json!({
        "kind": "model",
        "config": serde_json::to_value(&model.config).unwrap(),
        "tensors": names,
        "seed": seed,
        "config_hash": config_hash,
        "version": env!("CARGO_PKG_VERSION"),
    });
    write_json(&dir.join("manifest.json"), &manifest)
}

pub fn load_model(dir: &Path) -> Result<Model> {
    let manifest = read_json(&dir.join("manifest.json"))?;
    let config: ModelConfig = serde_json::from_value(manifest["config"].clone())
        .map_err(|e| Error::format(e.to_string()))?;
    let mut model = Model::init(config)?;
    let names = model.param_names();
    let mut tensors = Vec::with_capacity(names.len());
    for name in &names {
        tensors.push(read_tensor(&dir.join(format!("{}.scl", name)))?);
    }
    model.set_params(&tensors);
    Ok(model)
}

// ── sae checkpoints ─────────────────────────────────────────────────

pub fn save_sae(dir: &Path, sae: &SaeParams, beta: f32, seed: u64, config_hash: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_tensor(&dir.join("w_enc.scl"), &sae.w_enc)?;
    write_tensor(&dir.join("b_enc.scl"), &sae.b_enc)?;
    write_tensor(&dir.join("w_dec.scl"), &sae.w_dec)?;
    write_tensor(&dir.join("b_dec.scl"), &sae.b_dec)?;
    write_tensor(&dir.join("theta.scl"), &sae.theta)?;
    let manifest = serde_json::json!({
        "kind": "sae",
        "layer": sae.layer,
        "d_sae": sae.d_sae(),
        "d_model": sae.d_model(),
        "beta": beta,
        "seed": seed,
        "config_hash": config_hash,
        "version": env!("CARGO_PKG_VERSION"),
    });
    write_json(&dir.join("manifest.json"), &manifest)
}

pub fn load_sae(dir: &Path) -> Result<SaeParams> {
    let manifest = read_json(&dir.join("manifest.json"))?;
    let layer = manifest["layer"]
        .as_u64()
        .ok_or_else(|| Error::format("sae manifest missing layer"))? as usize;
    let sae = SaeParams {
        layer,
        w_enc: read_tensor(&dir.join("w_enc.scl"))?,
        b_enc: read_tensor(&dir.join("b_enc.scl"))?,
        w_dec: read_tensor(&dir.join("w_dec.scl"))?,
        b_dec: read_tensor(&dir.join("b_dec.scl"))?,
        theta: read_tensor(&dir.join("theta.scl"))?,
    };
    sae.validate()?;
    Ok(sae)
}

// ── activation store ────────────────────────────────────────────────

fn csr_layer_bytes(store: &ActivationStore, layer: usize) -> Vec<u8> {
    let n_rows = store.len();
    let mut offsets = Vec::with_capacity(n_rows + 1);
    let mut indices: Vec<u32> = Vec::new();
    let mut values: Vec<f32> = Vec::new();
    offsets.push(0u64);
    for row in 0..n_rows {
        let z = store.features(row, layer);
        for &(i, a) in &z.active {
            indices.push(i);
            values.push(a);
        }
        offsets.push(indices.len() as u64);
    }
    let mut out = Vec::new();
    out.extend_from_slice(CSR_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(n_rows as u64).to_le_bytes());
    out.extend_from_slice(&(store.d_sae() as u64).to_le_bytes());
    out.extend_from_slice(&(indices.len() as u64).to_le_bytes());
    for &o in &offsets {
        out.extend_from_slice(&o.to_le_bytes());
    }
    for &i in &indices {
        out.extend_from_slice(&i.to_le_bytes());
    }
    for &v in &values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct CsrLayer {
    n_rows: usize,
    n_cols: usize,
    offsets: Vec<u64>,
    indices: Vec<u32>,
    values: Vec<f32>,
}

fn csr_layer_from_bytes(bytes: &[u8]) -> std::result::Result<CsrLayer, String> {
    if bytes.len() < 32 || &bytes[0..4] != CSR_MAGIC {
        return Err("bad magic".into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(format!("unsupported version {}", version));
    }
    let n_rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let n_cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let nnz = u64::from_le_bytes(bytes[24..32].try_into().unwrap()) as usize;
    let mut off = 32;
    let need = (n_rows + 1) * 8 + nnz * 4 + nnz * 4;
    if bytes.len() != off + need {
        return Err("truncated csr payload".into());
    }
    let mut offsets = Vec::with_capacity(n_rows + 1);
    for _ in 0..=n_rows {
        offsets.push(u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()));
        off += 8;
    }
    let mut indices = Vec::with_capacity(nnz);
    for _ in 0..nnz {
        indices.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
        off += 4;
    }
    let mut values = Vec::with_capacity(nnz);
    for _ in 0..nnz {
        values.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
        off += 4;
    }
    Ok(CsrLayer { n_rows, n_cols, offsets, indices, values })
}

pub fn save_store(dir: &Path, store: &ActivationStore, config_hash: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    for layer in 0..store.n_layers() {
        write_atomic(&dir.join(format!("layer_{}.csr", layer)), &csr_layer_bytes(store, layer))?;
    }
    let manifest = serde_json::json!({
        "kind": "activation_store",
        "n_layers": store.n_layers(),
        "d_sae": store.d_sae(),
        "instance_ids": store.instance_ids(),
        "labels": store.labels().iter().map(|e| e.name()).collect::<Vec<_>>(),
        "config_hash": config_hash,
        "version": env!("CARGO_PKG_VERSION"),
    });
    write_json(&dir.join("manifest.json"), &manifest)
}

pub fn load_store(dir: &Path) -> Result<ActivationStore> {
    let manifest = read_json(&dir.join("manifest.json"))?;
    let n_layers = manifest["n_layers"].as_u64().unwrap_or(0) as usize;
    let d_sae = manifest["d_sae"].as_u64().unwrap_or(0) as usize;
    let instance_ids: Vec<usize> = manifest["instance_ids"]
        .as_array()
        .ok_or_else(|| Error::format("store manifest missing instance_ids"))?
        .iter()
        .map(|v| v.as_u64().unwrap_or(0) as usize)
        .collect();
    let labels: Vec<Emotion> = manifest["labels"]
        .as_array()
        .ok_or_else(|| Error::format("store manifest missing labels"))?
        .iter()
        .map(|v| {
            Emotion::from_name(v.as_str().unwrap_or(""))
                .ok_or_else(|| Error::format("bad label in store manifest"))
        })
        .collect::<Result<_>>()?;
    let mut layers = Vec::with_capacity(n_layers);
    for layer in 0..n_layers {
        let bytes = fs::read(dir.join(format!("layer_{}.csr", layer)))?;
        let csr = csr_layer_from_bytes(&bytes)
            .map_err(|e| Error::format(format!("layer_{}.csr: {}", layer, e)))?;
        if csr.n_rows != labels.len() || csr.n_cols != d_sae {
            return Err(Error::format("csr layer shape disagrees with manifest"));
        }
        layers.push(csr);
    }
    let mut feats = Vec::with_capacity(labels.len());
    for row in 0..labels.len() {
        let mut per_layer = Vec::with_capacity(n_layers);
        for csr in layers.iter() {
            let lo = csr.offsets[row] as usize;
            let hi = csr.offsets[row + 1] as usize;
            let active: Vec<(u32, f32)> =
                csr.indices[lo..hi].iter().copied().zip(csr.values[lo..hi].iter().copied()).collect();
            per_layer.push(SparseFeatureVector { layer: per_layer.len(), d_sae, active });
        }
        feats.push(per_layer);
    }
    ActivationStore::new(n_layers, d_sae, instance_ids, labels, feats)
}

// ── misc helpers ────────────────────────────────────────────────────

pub fn save_blocks_summary(model: &Model) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    for (name, t) in model.param_names().iter().zip(model.params()) {
        out.push((name.clone(), t.shape().to_vec()));
    }
    out
}

pub fn artifact_path(root: &Path, parts: &[&str]) -> PathBuf {
    let mut p = root.to_path_buf();
    for part in parts {
        p.push(part);
    }
    p
}

// keep Block referenced so checkpoint layout stays in one place
#[allow(dead_code)]
fn _block_fields(b: &Block) -> usize {
    b.wq.len() + b.wk.len() + b.wv.len() + b.wo.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tensor_round_trip_exact() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::new(vec![2, 3], vec![1.5, -0.25, 3.75, f32::MIN_POSITIVE, 0.0, -8.5e8]);
        let path = dir.path().join("t.scl");
        write_tensor(&path, &t).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(t, back);
        // header layout: magic, version, rank, dims
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"SCL1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[20..28].try_into().unwrap()), 3);
    }

    #[test]
    fn corrupt_tensor_rejected() {
        assert!(tensor_from_bytes(b"XXXX").is_err());
        let t = Tensor::from_vec(vec![1.0, 2.0]);
        let mut bytes = tensor_bytes(&t);
        bytes.truncate(bytes.len() - 1);
        assert!(tensor_from_bytes(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn tensor_bytes_round_trip(data in proptest::collection::vec(-1e6f32..1e6, 1..40)) {
            let t = Tensor::from_vec(data);
            let back = tensor_from_bytes(&tensor_bytes(&t)).unwrap();
            prop_assert_eq!(t, back);
        }
    }

    #[test]
    fn model_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::init(ModelConfig {
            n_layers: 3,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 20,
            context_len: 10,
            seed: 4,
            ..ModelConfig::default()
        })
        .unwrap();
        save_model(dir.path(), &model, 4, "hash").unwrap();
        let back = load_model(dir.path()).unwrap();
        for (a, b) in model.params().iter().zip(back.params()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn sae_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let sae = SaeParams {
            layer: 3,
            w_enc: Tensor::new(vec![8, 4], (0..32).map(|i| i as f32 * 0.1).collect()),
            b_enc: Tensor::zeros(&[8]),
            w_dec: Tensor::new(vec![4, 8], (0..32).map(|i| 1.0 - i as f32 * 0.05).collect()),
            b_dec: Tensor::from_vec(vec![0.1, 0.2, 0.3, 0.4]),
            theta: Tensor::filled(&[8], 0.02),
        };
        save_sae(dir.path(), &sae, 0.02, 9, "hash").unwrap();
        let back = load_sae(dir.path()).unwrap();
        assert_eq!(back.layer, 3);
        assert_eq!(back.w_enc, sae.w_enc);
        assert_eq!(back.theta, sae.theta);
    }

    #[test]
    fn store_round_trip() {
        use crate::corpus::Emotion;
        let dir = tempfile::tempdir().unwrap();
        let mk = |layer: usize, active: Vec<(u32, f32)>| SparseFeatureVector {
            layer,
            d_sae: 16,
            active,
        };
        let store = ActivationStore::new(
            2,
            16,
            vec![10, 11, 12],
            vec![Emotion::Joy, Emotion::Fear, Emotion::Joy],
            vec![
                vec![mk(0, vec![(1, 0.5), (9, 2.0)]), mk(1, vec![])],
                vec![mk(0, vec![]), mk(1, vec![(15, 0.25)])],
                vec![mk(0, vec![(0, 1.0)]), mk(1, vec![(3, 0.75), (4, 0.5)])],
            ],
        )
        .unwrap();
        save_store(dir.path(), &store, "h").unwrap();
        let back = load_store(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back.instance_ids(), store.instance_ids());
        for row in 0..3 {
            for layer in 0..2 {
                assert_eq!(back.features(row, layer).active, store.features(row, layer).active);
            }
        }
    }
}
