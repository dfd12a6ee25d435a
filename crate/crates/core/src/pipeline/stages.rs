//! Stage implementations: each loads its inputs from upstream artifacts,
//! computes, and writes its own artifacts atomically.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{
    self, build_vocab, sample_k_per_emotion, CueLexicon, Instance, SplitSpec, Splits, Vocab,
    EMOTIONS,
};
use crate::error::{Error, Result};
use crate::flow::{
    self, assign_categories, categories::compute_cue_alignment, categories::planted_cue_features,
    category_curves, emergence_layer, phase_boundaries, phases::scaled_k,
    CategoryMap, FeatureCategory, FeatureRef, FeatureSet, PhaseMap, ProbeSettings,
};
use crate::io;
use crate::metrics;
use crate::model::{forward, LabelIds, ModelConfig};
use crate::numerics::Tensor;
use crate::probe::{probe_confusion, train_probe, ProbeConfig};
use crate::sae::{train_sae, SaeParams, SaeTrainConfig};
use crate::steering::{self, SteeringConfig, SteeringVector};
use crate::studies;

use super::PipelineConfig;

// ── artifact paths ──────────────────────────────────────────────────

pub fn corpus_dir(root: &Path) -> PathBuf {
    root.join("corpus")
}

pub fn model_dir(root: &Path) -> PathBuf {
    root.join("model")
}

pub fn saes_dir(root: &Path) -> PathBuf {
    root.join("saes")
}

pub fn store_dir(root: &Path) -> PathBuf {
    root.join("store")
}

pub fn phases_dir(root: &Path) -> PathBuf {
    root.join("phases")
}

pub fn trace_dir(root: &Path) -> PathBuf {
    root.join("trace")
}

pub fn steering_dir(root: &Path) -> PathBuf {
    root.join("steering")
}

pub fn probes_dir(root: &Path) -> PathBuf {
    root.join("probes")
}

pub fn eval_dir(root: &Path) -> PathBuf {
    root.join("eval")
}

pub fn report_dir(root: &Path) -> PathBuf {
    root.join("report")
}

// ── csv helper ──────────────────────────────────────────────────────

pub(crate) fn csv_escape(field: &str) -> String {
    if field.contains(',') || field.contains('"') || field.contains('\n') {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

pub(crate) fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut s = String::new();
    s.push_str(&header.join(","));
    s.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(|c| csv_escape(c)).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    io::write_atomic(path, s.as_bytes())
}

// ── shared loaders ──────────────────────────────────────────────────

pub struct CorpusBundle {
    pub lexicon: CueLexicon,
    pub vocab: Vocab,
    pub instances: Vec<Instance>,
    pub splits: Splits,
    pub labels: LabelIds,
}

pub fn load_corpus_bundle(root: &Path) -> Result<CorpusBundle> {
    let dir = corpus_dir(root);
    let lexicon: CueLexicon = serde_json::from_value(io::read_json(&dir.join("lexicon.json"))?)
        .map_err(|e| Error::format(e.to_string()))?;
    let instances = corpus::load_jsonl(&dir.join("corpus.jsonl"))?;
    let splits: Splits = serde_json::from_value(io::read_json(&dir.join("splits.json"))?)
        .map_err(|e| Error::format(e.to_string()))?;
    let vocab = build_vocab(&lexicon);
    let labels = LabelIds::from_vocab(&vocab)?;
    Ok(CorpusBundle { lexicon, vocab, instances, splits, labels })
}

pub fn load_saes(root: &Path, n_layers: usize) -> Result<Vec<SaeParams>> {
    (0..n_layers)
        .map(|l| io::load_sae(&saes_dir(root).join(format!("layer_{}", l))))
        .collect()
}

#[derive(Serialize, Deserialize)]
pub struct FeatureSelection {
    pub per_emotion: Vec<FeatureSet>,
    pub union: FeatureSet,
}

pub fn load_feature_selection(root: &Path) -> Result<FeatureSelection> {
    serde_json::from_value(io::read_json(&phases_dir(root).join("feature_sets.json"))?)
        .map_err(|e| Error::format(e.to_string()))
}

pub fn load_phase_map(root: &Path) -> Result<PhaseMap> {
    serde_json::from_value(io::read_json(&phases_dir(root).join("phase_map.json"))?)
        .map_err(|e| Error::format(e.to_string()))
}

pub fn load_category_map(root: &Path) -> Result<CategoryMap> {
    serde_json::from_value(io::read_json(&phases_dir(root).join("category_map.json"))?)
        .map_err(|e| Error::format(e.to_string()))
}

pub fn load_graph(root: &Path) -> Result<crate::causal::CausalGraph> {
    serde_json::from_value(io::read_json(&trace_dir(root).join("graph.json"))?)
        .map_err(|e| Error::format(e.to_string()))
}

pub fn load_steering(root: &Path) -> Result<SteeringVector> {
    steering::from_json(&io::read_json(&steering_dir(root).join("steering.json"))?)
}

pub fn load_planted(root: &Path) -> Result<BTreeMap<String, Vec<FeatureRef>>> {
    serde_json::from_value(io::read_json(&phases_dir(root).join("planted.json"))?)
        .map_err(|e| Error::format(e.to_string()))
}

// ── stage: gen-corpus ───────────────────────────────────────────────

pub fn gen_corpus(cfg: &PipelineConfig) -> Result<()> {
    let root = cfg.root();
    let dir = corpus_dir(&root);
    std::fs::create_dir_all(&dir)?;
    let lexicon = corpus::default_lexicon();
    let gen = corpus::GeneratorConfig {
        n_per_emotion: cfg.corpus.n_per_emotion,
        min_len: cfg.corpus.min_len,
        max_len: cfg.corpus.max_len,
        ambiguity_p: cfg.corpus.ambiguity_p,
        seed: cfg.sub_seed(1),
    };
    let instances = corpus::generate_corpus(&lexicon, &gen)?;
    let spec = SplitSpec {
        train: cfg.split.train,
        validation: cfg.split.validation,
        test: cfg.split.test,
        seed: cfg.sub_seed(2),
    };
    let splits = corpus::split(&instances, &spec)?;
    io::write_json(
        &dir.join("lexicon.json"),
        &serde_json::to_value(&lexicon).map_err(|e| Error::format(e.to_string()))?,
    )?;
    corpus::save_jsonl(&dir.join("corpus.jsonl"), &instances)?;
    io::write_json(
        &dir.join("splits.json"),
        &serde_json::to_value(&splits).map_err(|e| Error::format(e.to_string()))?,
    )?;
    Ok(())
}

// ── stage: train-model ──────────────────────────────────────────────

fn model_config_for(cfg: &PipelineConfig, vocab_len: usize) -> ModelConfig {
    ModelConfig {
        n_layers: cfg.model.n_layers,
        d_model: cfg.model.d_model,
        n_heads: cfg.model.n_heads,
        d_ff: cfg.model.d_ff,
        vocab_size: vocab_len,
        context_len: cfg.model.context_len,
        seed: cfg.sub_seed(3),
    }
}

pub fn train_model(cfg: &PipelineConfig) -> Result<()> {
    let root = cfg.root();
    let bundle = load_corpus_bundle(&root)?;
    let mc = model_config_for(cfg, bundle.vocab.len());
    let tc = crate::model::LmTrainConfig {
        steps: cfg.model.lm_steps,
        batch_size: cfg.model.lm_batch,
        lr: cfg.model.lm_lr,
        label_exposure: cfg.model.lm_label_exposure,
        label_exposure_overrides: vec![
            (crate::corpus::Emotion::Surprise.index(), cfg.model.lm_weak_label_exposure),
            (crate::corpus::Emotion::Disgust.index(), cfg.model.lm_weak_label_exposure),
        ],
        seed: cfg.sub_seed(4),
    };
    let trained =
        crate::model::train_lm(&bundle.instances, &bundle.splits.train, &bundle.vocab, mc, &tc)?;
    let dir = model_dir(&root);
    io::save_model(&dir, &trained.model, cfg.sub_seed(3), &super::cone_hash(cfg, super::Stage::TrainModel))?;
    let rows: Vec<Vec<String>> = trained
        .loss_curve
        .iter()
        .enumerate()
        .map(|(i, l)| vec![i.to_string(), l.to_string()])
        .collect();
    write_csv(&dir.join("loss_curve.csv"), &["step", "loss"], &rows)
}

// ── stage: train-sae ────────────────────────────────────────────────

pub fn train_saes(cfg: &PipelineConfig) -> Result<()> {
    let root = cfg.root();
    let bundle = load_corpus_bundle(&root)?;
    let model = io::load_model(&model_dir(&root))?;
    let n_layers = model.config.n_layers;
    let d = model.config.d_model;

    // residual vectors per layer: every final token plus a sampled fraction
    // of non-final positions
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sub_seed(5));
    let mut per_layer: Vec<Vec<f32>> = vec![Vec::new(); n_layers];
    let mut n_rows = 0usize;
    for &i in &bundle.splits.train {
        let tokens = bundle.vocab.encode(&bundle.instances[i].prompt_tokens());
        let out = forward::run(&model, &tokens, &crate::model::PatchSet::new())?;
        let t = tokens.len();
        let keep: Vec<bool> = (0..t)
            .map(|p| p == t - 1 || rng.gen_bool(cfg.sae.nonfinal_fraction))
            .collect();
        for (p, &k) in keep.iter().enumerate() {
            if !k {
                continue;
            }
            n_rows += 1;
            for l in 0..n_layers {
                per_layer[l].extend_from_slice(out.resid[l].row(p));
            }
        }
    }

    let dir = saes_dir(&root);
    std::fs::create_dir_all(&dir)?;
    let hash = super::cone_hash(cfg, super::Stage::TrainSae);
    let mut summary = Vec::new();
    for l in 0..n_layers {
        let acts = Tensor::new(vec![n_rows, d], std::mem::take(&mut per_layer[l]));
        let sc = SaeTrainConfig {
            d_sae: cfg.sae.d_sae,
            beta: cfg.sae.beta,
            lr: cfg.sae.lr,
            steps: cfg.sae.steps,
            batch_size: cfg.sae.batch_size,
            bandwidth: cfg.sae.bandwidth,
            theta_init: cfg.sae.theta_init,
            seed: cfg.sub_seed(6).wrapping_add(l as u64),
        };
        let sae = train_sae(&acts, l, &sc)?;
        let m = crate::sae::feature_metrics(&sae, &acts);
        io::save_sae(&dir.join(format!("layer_{}", l)), &sae, cfg.sae.beta, sc.seed, &hash)?;
        summary.push(serde_json::json!({
            "layer": l,
            "mean_l0": m.mean_l0,
            "fvu": m.fvu,
            "dead_features": m.dead_features,
            "rows": n_rows,
        }));
    }
    io::write_json(&dir.join("summary.json"), &serde_json::Value::Array(summary))
}

// ── stage: collect ──────────────────────────────────────────────────

pub fn collect(cfg: &PipelineConfig) -> Result<()> {
    let root = cfg.root();
    let bundle = load_corpus_bundle(&root)?;
    let model = io::load_model(&model_dir(&root))?;
    let saes = load_saes(&root, model.config.n_layers)?;
    let all: Vec<usize> = (0..bundle.instances.len()).collect();
    let store = flow::collect(&model, &saes, &bundle.instances, &all, &bundle.vocab)?;
    io::save_store(&store_dir(&root), &store, &super::cone_hash(cfg, super::Stage::Collect))
}

// ── stage: phases ───────────────────────────────────────────────────

#[derive(Deserialize)]
struct OverrideRow {
    layer: usize,
    feature: usize,
    category: String,
}

fn load_overrides(root: &Path) -> Result<BTreeMap<FeatureRef, FeatureCategory>> {
    let path = root.join("phases_overrides.json");
    if !path.exists() {
        return Ok(BTreeMap::new());
    }
    let rows: Vec<OverrideRow> = serde_json::from_value(io::read_json(&path)?)
        .map_err(|e| Error::format(e.to_string()))?;
    let mut out = BTreeMap::new();
    for r in rows {
        let cat = match r.category.as_str() {
            "syntax" => FeatureCategory::Syntax,
            "concept" => FeatureCategory::Concept,
            "emotion" => FeatureCategory::Emotion,
            "other" => FeatureCategory::Other,
            other => {
                return Err(Error::config(format!("unknown override category `{}`", other)))
            }
        };
        out.insert(FeatureRef { layer: r.layer, feature: r.feature }, cat);
    }
    Ok(out)
}

pub fn phases(cfg: &PipelineConfig) -> Result<()> {
    let root = cfg.root();
    let bundle = load_corpus_bundle(&root)?;
    let model = io::load_model(&model_dir(&root))?;
    let saes = load_saes(&root, model.config.n_layers)?;
    let store = io::load_store(&store_dir(&root))?;

    let (per_emotion, union) = flow::select_all(&store, cfg.flow.tau_act)?;
    let settings = ProbeSettings {
        probes_per_cue: cfg.flow.probes_per_cue,
        probe_len: cfg.flow.probe_len,
        margin: cfg.flow.margin,
        seed: cfg.sub_seed(7),
    };
    let align = compute_cue_alignment(&model, &saes, &bundle.vocab, &bundle.lexicon, &settings)?;
    let overrides = load_overrides(&root)?;
    let categories = assign_categories(&align, &union.members, &settings, &overrides);
    let curves = category_curves(&store, &categories);

    // diagnostics land on disk before the fallible boundary computation
    let dir = phases_dir(&root);
    std::fs::create_dir_all(&dir)?;
    io::write_json(
        &dir.join("feature_sets.json"),
        &serde_json::to_value(FeatureSelection { per_emotion, union })
            .map_err(|e| Error::format(e.to_string()))?,
    )?;
    io::write_json(
        &dir.join("category_map.json"),
        &serde_json::to_value(&categories).map_err(|e| Error::format(e.to_string()))?,
    )?;
    let mut rows = Vec::new();
    for (cat, curve) in &curves.curves {
        for (layer, v) in curve.iter().enumerate() {
            rows.push(vec![layer.to_string(), cat.name().to_string(), v.to_string()]);
        }
    }
    write_csv(&dir.join("curves.csv"), &["layer", "category", "activation"], &rows)?;

    let k = scaled_k(model.config.n_layers);
    let em = |c: FeatureCategory| {
        curves.get(c).and_then(|curve| emergence_layer(curve, cfg.flow.emergence_tau, k))
    };
    let phase_map = phase_boundaries(
        em(FeatureCategory::Syntax),
        em(FeatureCategory::Concept),
        em(FeatureCategory::Emotion),
        model.config.n_layers,
    )?;
    let planted: BTreeMap<String, Vec<FeatureRef>> = EMOTIONS
        .iter()
        .map(|&e| {
            (
                e.name().to_string(),
                planted_cue_features(&align, &bundle.lexicon, e, phase_map.layers_of(3)),
            )
        })
        .collect();
    io::write_json(
        &dir.join("phase_map.json"),
        &serde_json::to_value(&phase_map).map_err(|e| Error::format(e.to_string()))?,
    )?;
    io::write_json(
        &dir.join("planted.json"),
        &serde_json::to_value(&planted).map_err(|e| Error::format(e.to_string()))?,
    )
}

// ── stage: trace ────────────────────────────────────────────────────

pub fn trace(cfg: &PipelineConfig) -> Result<()> {
    let root = cfg.root();
    let bundle = load_corpus_bundle(&root)?;
    let model = io::load_model(&model_dir(&root))?;
    let saes = load_saes(&root, model.config.n_layers)?;
    let store = io::load_store(&store_dir(&root))?;
    let selection = load_feature_selection(&root)?;
    let phase_map = load_phase_map(&root)?;
    let tc = crate::causal::TraceConfig {
        tau_causal: cfg.trace.tau_causal,
        instances_per_emotion: cfg.trace.instances_per_emotion,
    };
    let graph = crate::causal::trace_circuits(
        &model,
        &saes,
        &bundle.labels,
        &store,
        &bundle.instances,
        &bundle.vocab,
        &selection.per_emotion,
        &selection.union,
        &phase_map,
        &tc,
    )?;
    let dir = trace_dir(&root);
    std::fs::create_dir_all(&dir)?;
    io::write_json(
        &dir.join("graph.json"),
        &serde_json::to_value(&graph).map_err(|e| Error::format(e.to_string()))?,
    )?;
    let mut rows = Vec::new();
    for p in &graph.pathways {
        for le in &p.logit_effects {
            rows.push(vec![
                le.feature.to_string(),
                le.emotion.name().to_string(),
                le.effect.to_string(),
            ]);
        }
    }
    write_csv(&dir.join("logit_effects.csv"), &["feature", "emotion", "logit_effect"], &rows)
}

// ── stage: steer-train ──────────────────────────────────────────────

fn steer_train_ids(cfg: &PipelineConfig, bundle: &CorpusBundle) -> Result<Vec<usize>> {
    let per: usize = EMOTIONS
        .iter()
        .map(|&e| {
            bundle
                .splits
                .train
                .iter()
                .filter(|&&i| bundle.instances[i].label == e)
                .count()
        })
        .min()
        .unwrap_or(0);
    let k = cfg.steer.train_per_emotion.min(per);
    sample_k_per_emotion(&bundle.instances, &bundle.splits.train, k, cfg.sub_seed(8))
}

fn steering_config(cfg: &PipelineConfig) -> SteeringConfig {
    SteeringConfig {
        alpha: cfg.steer.alpha,
        lambda: cfg.steer.lambda,
        lr: cfg.steer.lr,
        steps: cfg.steer.steps,
        batch_size: cfg.steer.batch_size,
        positions: steering::PositionsPolicy::FinalToken,
        s_max: cfg.steer.s_max,
        eval_interval: cfg.steer.eval_interval,
        check_gradients: true,
        seed: cfg.sub_seed(9),
    }
}

pub fn steer_train(cfg: &PipelineConfig) -> Result<()> {
    let root = cfg.root();
    let bundle = load_corpus_bundle(&root)?;
    let model = io::load_model(&model_dir(&root))?;
    let saes = load_saes(&root, model.config.n_layers)?;
    let graph = load_graph(&root)?;
    let features: Vec<FeatureRef> = graph.f_causal.iter().copied().collect();

    let train_ids = steer_train_ids(cfg, &bundle)?;
    let train_examples =
        studies::build_examples(&model, &bundle.instances, &bundle.vocab, &train_ids)?;
    let val_examples = studies::build_examples(
        &model,
        &bundle.instances,
        &bundle.vocab,
        &bundle.splits.validation,
    )?;
    let train_refs: Vec<&steering::SteeringExample> = train_examples.iter().collect();
    let val_refs: Vec<&steering::SteeringExample> = val_examples.iter().collect();

    let sc = steering_config(cfg);
    let vector = steering::train_steering(
        &model,
        &saes,
        &bundle.labels,
        &features,
        &train_refs,
        &val_refs,
        &sc,
    )?;
    let dir = steering_dir(&root);
    std::fs::create_dir_all(&dir)?;
    io::write_json(&dir.join("steering.json"), &steering::to_json(&vector))
}

// ── stage: probe ────────────────────────────────────────────────────

pub fn split_hash(ids: &[usize]) -> String {
    let mut sorted: Vec<usize> = ids.to_vec();
    sorted.sort_unstable();
    let mut hasher = Sha256::new();
    for id in sorted {
        hasher.update(id.to_le_bytes());
    }
    let d = hasher.finalize();
    d.iter().take(8).map(|b| format!("{:02x}", b)).collect()
}

pub fn probe(cfg: &PipelineConfig) -> Result<()> {
    let root = cfg.root();
    let bundle = load_corpus_bundle(&root)?;
    let store = io::load_store(&store_dir(&root))?;
    let per: usize = EMOTIONS
        .iter()
        .map(|&e| {
            bundle.splits.train.iter().filter(|&&i| bundle.instances[i].label == e).count()
        })
        .min()
        .unwrap_or(0);
    let k = cfg.probe.train_per_emotion.min(per);
    let train_ids =
        sample_k_per_emotion(&bundle.instances, &bundle.splits.train, k, cfg.sub_seed(10))?;
    let test_ids = &bundle.splits.test;
    // every layer is evaluated on the identical test split
    let test_hash = split_hash(test_ids);

    let pc = ProbeConfig {
        l1_ratio: cfg.probe.l1_ratio,
        c: cfg.probe.c,
        max_iterations: cfg.probe.max_iterations,
        ..ProbeConfig::default()
    };
    let dir = probes_dir(&root);
    std::fs::create_dir_all(&dir)?;
    let mut rows = Vec::new();
    for layer in 0..store.n_layers() {
        let probe = train_probe(&store, &[], layer, &train_ids, &pc)?;
        let confusion = probe_confusion(&probe, &store, layer, test_ids)?;
        // metrics from the matrix
        let xm = store.dense_matrix(layer, test_ids)?;
        let preds: Vec<corpus::Emotion> =
            (0..test_ids.len()).map(|r| probe.predict(xm.row(r))).collect();
        let truth: Vec<corpus::Emotion> = test_ids
            .iter()
            .map(|&id| store.labels()[store.row_of(id).unwrap()])
            .collect();
        let table = metrics::f1_scores(&preds, &truth);
        rows.push(vec![
            layer.to_string(),
            table.accuracy.to_string(),
            table.macro_f1.to_string(),
            probe.converged.to_string(),
            probe.iterations.to_string(),
            probe.objective.to_string(),
            probe.nonzero_weights.to_string(),
            test_hash.clone(),
        ]);
        let conf_rows: Vec<Vec<String>> = (0..6)
            .map(|t| {
                let mut row = vec![EMOTIONS[t].name().to_string()];
                row.extend((0..6).map(|p| confusion[t][p].to_string()));
                row
            })
            .collect();
        write_csv(
            &dir.join(format!("confusion_layer_{}.csv", layer)),
            &["true\\pred", "anger", "joy", "sadness", "fear", "surprise", "disgust"],
            &conf_rows,
        )?;
    }
    write_csv(
        &dir.join("probe_metrics.csv"),
        &[
            "layer",
            "accuracy",
            "macro_f1",
            "converged",
            "iterations",
            "objective",
            "nonzero_weights",
            "test_split_hash",
        ],
        &rows,
    )
}

// ── stage: eval ─────────────────────────────────────────────────────

fn result_row(
    method: &str,
    table: &metrics::MetricsTable,
    ppl: Option<(f64, f64)>,
) -> Vec<String> {
    let mut row = vec![method.to_string()];
    for m in &table.per_emotion {
        row.push(m.f1.to_string());
    }
    row.push(table.macro_f1.to_string());
    match ppl {
        Some((base, steered)) => {
            row.push(steered.to_string());
            row.push((steered / base).to_string());
        }
        None => {
            row.push(String::new());
            row.push(String::new());
        }
    }
    row
}

pub fn eval(cfg: &PipelineConfig) -> Result<()> {
    let root = cfg.root();
    let bundle = load_corpus_bundle(&root)?;
    let model = io::load_model(&model_dir(&root))?;
    let saes = load_saes(&root, model.config.n_layers)?;
    let graph = load_graph(&root)?;
    let vector = load_steering(&root)?;
    let selection = load_feature_selection(&root)?;
    let f_causal: Vec<FeatureRef> = graph.f_causal.iter().copied().collect();

    let val_examples = studies::build_examples(
        &model,
        &bundle.instances,
        &bundle.vocab,
        &bundle.splits.validation,
    )?;
    let val_refs: Vec<&steering::SteeringExample> = val_examples.iter().collect();

    // held-out sequences for language-model preservation
    let ppl_seqs: Vec<Vec<u32>> = bundle
        .splits
        .test
        .iter()
        .take(cfg.eval.ppl_max_instances)
        .map(|&i| bundle.vocab.encode(&bundle.instances[i].training_sequence()))
        .collect();
    let base_ppl = forward::perplexity(&model, &ppl_seqs, None)?;

    let sc = steering_config(cfg);
    let mut rows = Vec::new();

    let zero = studies::unsteered_metrics(&bundle.labels, &val_refs);
    rows.push(result_row("zero-shot", &zero, Some((base_ppl, base_ppl))));

    let causal_table =
        studies::steered_metrics(&model, &saes, &bundle.labels, &vector, &val_refs)?;
    let (pb, ps) = studies::ppl_ratio(&model, &saes, &vector, &ppl_seqs)?;
    rows.push(result_row("causal-feat", &causal_table, Some((pb, ps))));

    if cfg.eval.run_baselines {
        let train_ids = steer_train_ids(cfg, &bundle)?;
        let train_examples =
            studies::build_examples(&model, &bundle.instances, &bundle.vocab, &train_ids)?;
        let train_refs: Vec<&steering::SteeringExample> = train_examples.iter().collect();

        // top-activated features (the union set F)
        let top_feats: Vec<FeatureRef> = selection.union.members.iter().copied().collect();
        let mut top_cfg = sc.clone();
        top_cfg.check_gradients = false;
        let (top_vec, top_table) = studies::train_and_eval(
            &model,
            &saes,
            &bundle.labels,
            &top_feats,
            &train_refs,
            &val_refs,
            &top_cfg,
        )?;
        let (tb, ts) = studies::ppl_ratio(&model, &saes, &top_vec, &ppl_seqs)?;
        rows.push(result_row("top-act-feat", &top_table, Some((tb, ts))));

        // random features, same count as the causal set
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.sub_seed(11));
        let mut random_feats = std::collections::BTreeSet::new();
        while random_feats.len() < f_causal.len() {
            random_feats.insert(FeatureRef {
                layer: rng.gen_range(0..model.config.n_layers),
                feature: rng.gen_range(0..cfg.sae.d_sae),
            });
        }
        let random_feats: Vec<FeatureRef> = random_feats.into_iter().collect();
        let (rand_vec, rand_table) = studies::train_and_eval(
            &model,
            &saes,
            &bundle.labels,
            &random_feats,
            &train_refs,
            &val_refs,
            &top_cfg,
        )?;
        let (rb, rs) = studies::ppl_ratio(&model, &saes, &rand_vec, &ppl_seqs)?;
        rows.push(result_row("random-feat", &rand_table, Some((rb, rs))));

        if cfg.eval.run_phase_ablation {
            let phase_rows = studies::phase_ablation_study(
                &model,
                &saes,
                &bundle.labels,
                &f_causal,
                &graph.phase_map,
                &train_refs,
                &val_refs,
                &top_cfg,
            )?;
            let csv_rows: Vec<Vec<String>> = phase_rows
                .iter()
                .map(|r| {
                    let name = if r.phases.is_empty() {
                        "baseline".to_string()
                    } else {
                        r.phases.iter().map(|p| p.to_string()).collect::<Vec<_>>().join("+")
                    };
                    let mut row = vec![
                        name,
                        r.n_features.to_string(),
                        if r.available { "ok".into() } else { "n/a".into() },
                        if r.available { r.macro_f1.to_string() } else { String::new() },
                    ];
                    for v in r.per_emotion_f1 {
                        row.push(if r.available { v.to_string() } else { String::new() });
                    }
                    row
                })
                .collect();
            write_csv(
                &eval_dir(&root).join("phase_ablation.csv"),
                &[
                    "phases",
                    "n_features",
                    "status",
                    "macro_f1",
                    "anger",
                    "joy",
                    "sadness",
                    "fear",
                    "surprise",
                    "disgust",
                ],
                &csv_rows,
            )?;
        }

        if cfg.eval.run_data_efficiency && !cfg.eval.data_efficiency_ks.is_empty() {
            // the sweep samples from the full training split
            let full_train_examples = studies::build_examples(
                &model,
                &bundle.instances,
                &bundle.vocab,
                &bundle.splits.train,
            )?;
            let mut sweep_cfg = top_cfg.clone();
            sweep_cfg.steps = cfg.eval.sweep_steps;
            let sweep = studies::data_efficiency_sweep(
                &model,
                &saes,
                &bundle.labels,
                &f_causal,
                &bundle.instances,
                &bundle.splits.train,
                &full_train_examples,
                &val_refs,
                &cfg.eval.data_efficiency_ks,
                cfg.eval.data_efficiency_seeds,
                &sweep_cfg,
            )?;
            let csv_rows: Vec<Vec<String>> = sweep
                .iter()
                .map(|r| {
                    let mut row = vec![
                        r.k.to_string(),
                        r.seeds.to_string(),
                        if r.skipped { "skipped".into() } else { "ok".into() },
                        if r.skipped { String::new() } else { r.macro_f1.to_string() },
                    ];
                    for v in r.per_emotion_f1 {
                        row.push(if r.skipped { String::new() } else { v.to_string() });
                    }
                    row
                })
                .collect();
            write_csv(
                &eval_dir(&root).join("data_efficiency.csv"),
                &[
                    "k",
                    "seeds",
                    "status",
                    "macro_f1",
                    "anger",
                    "joy",
                    "sadness",
                    "fear",
                    "surprise",
                    "disgust",
                ],
                &csv_rows,
            )?;
        }
    }

    let dir = eval_dir(&root);
    std::fs::create_dir_all(&dir)?;
    write_csv(
        &dir.join("steering_results.csv"),
        &[
            "method",
            "anger",
            "joy",
            "sadness",
            "fear",
            "surprise",
            "disgust",
            "macro_f1",
            "ppl",
            "ppl_ratio",
        ],
        &rows,
    )?;
    io::write_json(
        &dir.join("ppl.json"),
        &serde_json::json!({
            "base_ppl": base_ppl,
            "causal_ppl": ps,
            "ppl_ratio": ps / pb,
            "sequences": ppl_seqs.len(),
        }),
    )
}
