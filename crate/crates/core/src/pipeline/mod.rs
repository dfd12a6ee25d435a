//! Stage-oriented pipeline: one structured-text config, content-addressed
//! stage manifests, atomic artifact writes, and dependency checking.
//!
//! Each stage's manifest records a hash over the config sections that feed
//! it (its "cone"). Rerunning a completed stage with an unchanged cone is a
//! no-op; running a stage whose dependency carries a stale hash refuses
//! unless forced.

pub mod report;
pub mod stages;

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io;

// ── configuration ───────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusCfg {
    pub n_per_emotion: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub ambiguity_p: f64,
}

impl Default for CorpusCfg {
    fn default() -> Self {
        CorpusCfg { n_per_emotion: 500, min_len: 9, max_len: 14, ambiguity_p: 0.3 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitCfg {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitCfg {
    fn default() -> Self {
        SplitCfg { train: 0.8, validation: 0.1, test: 0.1 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelCfg {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub context_len: usize,
    pub lm_steps: usize,
    pub lm_batch: usize,
    pub lm_lr: f32,
    pub lm_label_exposure: f64,
    /// Exposure override for under-supervised emotions (surprise, disgust).
    pub lm_weak_label_exposure: f64,
}

impl Default for ModelCfg {
    fn default() -> Self {
        ModelCfg {
            n_layers: 8,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            context_len: 48,
            lm_steps: 750,
            lm_batch: 12,
            lm_lr: 2.5e-3,
            lm_label_exposure: 0.3,
            lm_weak_label_exposure: 0.06,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SaeCfg {
    pub d_sae: usize,
    pub beta: f32,
    pub lr: f32,
    pub steps: usize,
    pub batch_size: usize,
    pub bandwidth: f32,
    pub theta_init: f32,
    /// Fraction of non-final token positions sampled into SAE training.
    pub nonfinal_fraction: f64,
}

impl Default for SaeCfg {
    fn default() -> Self {
        SaeCfg {
            d_sae: 512,
            beta: 1.6,
            lr: 1.5e-3,
            steps: 1500,
            batch_size: 64,
            bandwidth: 1e-3,
            theta_init: 1e-3,
            nonfinal_fraction: 0.25,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowCfg {
    pub tau_act: f64,
    pub emergence_tau: f64,
    pub probes_per_cue: usize,
    pub probe_len: usize,
    pub margin: f64,
}

impl Default for FlowCfg {
    fn default() -> Self {
        FlowCfg { tau_act: 0.05, emergence_tau: 0.05, probes_per_cue: 6, probe_len: 8, margin: 0.1 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TraceCfg {
    pub tau_causal: f64,
    pub instances_per_emotion: usize,
}

impl Default for TraceCfg {
    fn default() -> Self {
        TraceCfg { tau_causal: 0.15, instances_per_emotion: 48 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SteerCfg {
    pub alpha: f32,
    pub lambda: f32,
    pub lr: f32,
    pub steps: usize,
    pub batch_size: usize,
    pub train_per_emotion: usize,
    pub s_max: f32,
    pub eval_interval: usize,
    pub sparsity_threshold: f64,
}

impl Default for SteerCfg {
    fn default() -> Self {
        SteerCfg {
            alpha: 0.5,
            lambda: 0.01,
            lr: 0.05,
            steps: 240,
            batch_size: 24,
            train_per_emotion: 400,
            s_max: 4.0,
            eval_interval: 20,
            sparsity_threshold: 0.10,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalCfg {
    pub run_baselines: bool,
    pub run_phase_ablation: bool,
    pub run_data_efficiency: bool,
    pub data_efficiency_ks: Vec<usize>,
    pub data_efficiency_seeds: usize,
    pub sweep_steps: usize,
    pub ppl_max_instances: usize,
    pub min_effect: f64,
}

impl Default for EvalCfg {
    fn default() -> Self {
        EvalCfg {
            run_baselines: true,
            run_phase_ablation: true,
            run_data_efficiency: true,
            data_efficiency_ks: vec![1, 2, 5, 10, 50, 100, 200, 400],
            data_efficiency_seeds: 5,
            sweep_steps: 160,
            ppl_max_instances: 120,
            min_effect: 0.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeCfgSection {
    pub l1_ratio: f64,
    pub c: f64,
    pub max_iterations: usize,
    pub train_per_emotion: usize,
}

impl Default for ProbeCfgSection {
    fn default() -> Self {
        ProbeCfgSection { l1_ratio: 0.3, c: 0.002, max_iterations: 2000, train_per_emotion: 100 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub artifact_root: String,
    pub corpus: CorpusCfg,
    pub split: SplitCfg,
    pub model: ModelCfg,
    pub sae: SaeCfg,
    pub flow: FlowCfg,
    pub trace: TraceCfg,
    pub steer: SteerCfg,
    pub eval: EvalCfg,
    pub probe: ProbeCfgSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 11,
            artifact_root: "artifacts".to_string(),
            corpus: Default::default(),
            split: Default::default(),
            model: Default::default(),
            sae: Default::default(),
            flow: Default::default(),
            trace: Default::default(),
            steer: Default::default(),
            eval: Default::default(),
            probe: Default::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("config parse error: {}", e)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {}", path.display(), e)))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn root(&self) -> PathBuf {
        PathBuf::from(&self.artifact_root)
    }

    /// Deterministic sub-seed for a named stage.
    pub fn sub_seed(&self, salt: u64) -> u64 {
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(salt)
    }
}

// ── stages ──────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    GenCorpus,
    TrainModel,
    TrainSae,
    Collect,
    Phases,
    Trace,
    SteerTrain,
    Probe,
    Eval,
    Report,
}

pub const ALL_STAGES: [Stage; 10] = [
    Stage::GenCorpus,
    Stage::TrainModel,
    Stage::TrainSae,
    Stage::Collect,
    Stage::Phases,
    Stage::Trace,
    Stage::SteerTrain,
    Stage::Probe,
    Stage::Eval,
    Stage::Report,
];

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::GenCorpus => "gen-corpus",
            Stage::TrainModel => "train-model",
            Stage::TrainSae => "train-sae",
            Stage::Collect => "collect",
            Stage::Phases => "phases",
            Stage::Trace => "trace",
            Stage::SteerTrain => "steer-train",
            Stage::Probe => "probe",
            Stage::Eval => "eval",
            Stage::Report => "report",
        }
    }

    pub fn from_name(name: &str) -> Option<Stage> {
        ALL_STAGES.iter().copied().find(|s| s.name() == name)
    }

    pub fn dir(self) -> &'static str {
        match self {
            Stage::GenCorpus => "corpus",
            Stage::TrainModel => "model",
            Stage::TrainSae => "saes",
            Stage::Collect => "store",
            Stage::Phases => "phases",
            Stage::Trace => "trace",
            Stage::SteerTrain => "steering",
            Stage::Probe => "probes",
            Stage::Eval => "eval",
            Stage::Report => "report",
        }
    }

    pub fn deps(self) -> &'static [Stage] {
        match self {
            Stage::GenCorpus => &[],
            Stage::TrainModel => &[Stage::GenCorpus],
            Stage::TrainSae => &[Stage::GenCorpus, Stage::TrainModel],
            Stage::Collect => &[Stage::GenCorpus, Stage::TrainModel, Stage::TrainSae],
            Stage::Phases => &[Stage::GenCorpus, Stage::TrainModel, Stage::TrainSae, Stage::Collect],
            Stage::Trace => &[
                Stage::GenCorpus,
                Stage::TrainModel,
                Stage::TrainSae,
                Stage::Collect,
                Stage::Phases,
            ],
            Stage::SteerTrain => &[
                Stage::GenCorpus,
                Stage::TrainModel,
                Stage::TrainSae,
                Stage::Collect,
                Stage::Phases,
                Stage::Trace,
            ],
            Stage::Probe => &[Stage::GenCorpus, Stage::TrainModel, Stage::TrainSae, Stage::Collect],
            Stage::Eval => &[
                Stage::GenCorpus,
                Stage::TrainModel,
                Stage::TrainSae,
                Stage::Collect,
                Stage::Phases,
                Stage::Trace,
                Stage::SteerTrain,
            ],
            Stage::Report => &[
                Stage::GenCorpus,
                Stage::TrainModel,
                Stage::TrainSae,
                Stage::Collect,
                Stage::Phases,
                Stage::Trace,
                Stage::SteerTrain,
                Stage::Probe,
                Stage::Eval,
            ],
        }
    }

    /// Config sections feeding this stage's artifacts.
    fn cone_sections(self, cfg: &PipelineConfig) -> Vec<(&'static str, serde_json::Value)> {
        let mut v: Vec<(&'static str, serde_json::Value)> = vec![
            ("seed", serde_json::json!(cfg.seed)),
            ("corpus", serde_json::to_value(&cfg.corpus).unwrap()),
            ("split", serde_json::to_value(&cfg.split).unwrap()),
        ];
        let add_model = |v: &mut Vec<_>| v.push(("model", serde_json::to_value(&cfg.model).unwrap()));
        let add_sae = |v: &mut Vec<_>| v.push(("sae", serde_json::to_value(&cfg.sae).unwrap()));
        let add_flow = |v: &mut Vec<_>| v.push(("flow", serde_json::to_value(&cfg.flow).unwrap()));
        let add_trace = |v: &mut Vec<_>| v.push(("trace", serde_json::to_value(&cfg.trace).unwrap()));
        let add_steer = |v: &mut Vec<_>| v.push(("steer", serde_json::to_value(&cfg.steer).unwrap()));
        match self {
            Stage::GenCorpus => {}
            Stage::TrainModel => add_model(&mut v),
            Stage::TrainSae | Stage::Collect => {
                add_model(&mut v);
                add_sae(&mut v);
            }
            Stage::Phases => {
                add_model(&mut v);
                add_sae(&mut v);
                add_flow(&mut v);
            }
            Stage::Trace => {
                add_model(&mut v);
                add_sae(&mut v);
                add_flow(&mut v);
                add_trace(&mut v);
            }
            Stage::SteerTrain => {
                add_model(&mut v);
                add_sae(&mut v);
                add_flow(&mut v);
                add_trace(&mut v);
                add_steer(&mut v);
            }
            Stage::Probe => {
                add_model(&mut v);
                add_sae(&mut v);
                v.push(("probe", serde_json::to_value(&cfg.probe).unwrap()));
            }
            Stage::Eval => {
                add_model(&mut v);
                add_sae(&mut v);
                add_flow(&mut v);
                add_trace(&mut v);
                add_steer(&mut v);
                v.push(("eval", serde_json::to_value(&cfg.eval).unwrap()));
            }
            Stage::Report => {
                add_model(&mut v);
                add_sae(&mut v);
                add_flow(&mut v);
                add_trace(&mut v);
                add_steer(&mut v);
                v.push(("eval", serde_json::to_value(&cfg.eval).unwrap()));
                v.push(("probe", serde_json::to_value(&cfg.probe).unwrap()));
            }
        }
        v
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Hash of the config cone feeding a stage.
pub fn cone_hash(cfg: &PipelineConfig, stage: Stage) -> String {
    let mut hasher = Sha256::new();
    for (name, value) in stage.cone_sections(cfg) {
        hasher.update(name.as_bytes());
        hasher.update(b"=");
        hasher.update(value.to_string().as_bytes());
        hasher.update(b";");
    }
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{:02x}", b)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    SkippedUpToDate,
}

fn manifest_path(root: &Path, stage: Stage) -> PathBuf {
    // stage manifests are named apart from checkpoint manifests, which
    // also live at the stage directory root
    root.join(stage.dir()).join("stage.json")
}

pub fn stage_manifest_hash(root: &Path, stage: Stage) -> Option<String> {
    let m = io::read_json(&manifest_path(root, stage)).ok()?;
    m["config_hash"].as_str().map(|s| s.to_string())
}

fn write_stage_manifest(root: &Path, stage: Stage, cfg: &PipelineConfig) -> Result<()> {
    let manifest = serde_json::json!({
        "stage": stage.name(),
        "config_hash": cone_hash(cfg, stage),
        "seed": cfg.seed,
        "version": env!("CARGO_PKG_VERSION"),
        "format_version": io::FORMAT_VERSION,
    });
    io::write_json(&manifest_path(root, stage), &manifest)
}

/// Runs one stage: no-op when its manifest matches the current config cone,
/// dependency error when an upstream stage is missing, refuses on stale
/// upstream hashes unless `force`.
pub fn run_stage(cfg: &PipelineConfig, stage: Stage, force: bool) -> Result<StageOutcome> {
    let root = cfg.root();
    let own_hash = cone_hash(cfg, stage);
    if !force {
        if let Some(existing) = stage_manifest_hash(&root, stage) {
            if existing == own_hash {
                return Ok(StageOutcome::SkippedUpToDate);
            }
        }
    }
    for &dep in stage.deps() {
        match stage_manifest_hash(&root, dep) {
            None => {
                return Err(Error::Dependency {
                    stage: stage.name().to_string(),
                    missing: dep.name().to_string(),
                })
            }
            Some(h) => {
                if h != cone_hash(cfg, dep) && !force {
                    return Err(Error::config(format!(
                        "artifact for `{}` was built from a different config (stale hash); \
                         rerun `{}` or pass --force",
                        dep.name(),
                        dep.name()
                    )));
                }
            }
        }
    }
    match stage {
        Stage::GenCorpus => stages::gen_corpus(cfg)?,
        Stage::TrainModel => stages::train_model(cfg)?,
        Stage::TrainSae => stages::train_saes(cfg)?,
        Stage::Collect => stages::collect(cfg)?,
        Stage::Phases => stages::phases(cfg)?,
        Stage::Trace => stages::trace(cfg)?,
        Stage::SteerTrain => stages::steer_train(cfg)?,
        Stage::Probe => stages::probe(cfg)?,
        Stage::Eval => stages::eval(cfg)?,
        Stage::Report => report::emit_report(cfg)?,
    }
    write_stage_manifest(&root, stage, cfg)?;
    Ok(StageOutcome::Ran)
}

/// Runs every stage in dependency order.
pub fn run_all(cfg: &PipelineConfig, force: bool) -> Result<Vec<(Stage, StageOutcome)>> {
    let mut out = Vec::new();
    for stage in ALL_STAGES {
        out.push((stage, run_stage(cfg, stage, force)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = PipelineConfig::default();
        let text = cfg.to_toml();
        let back = PipelineConfig::from_toml(&text).unwrap();
        assert_eq!(cfg.seed, back.seed);
        assert_eq!(cfg.sae.d_sae, back.sae.d_sae);
        assert_eq!(cfg.eval.data_efficiency_ks, back.eval.data_efficiency_ks);
    }

    #[test]
    fn partial_toml_uses_defaults() {
        let cfg = PipelineConfig::from_toml("seed = 3\n[model]\nn_layers = 6\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.model.n_layers, 6);
        assert_eq!(cfg.model.d_model, 64);
        assert_eq!(cfg.corpus.n_per_emotion, 500);
    }

    #[test]
    fn cone_hashes_isolate_downstream_config() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.steer.lambda = 0.5;
        // steering config change must not invalidate upstream corpora
        assert_eq!(cone_hash(&a, Stage::GenCorpus), cone_hash(&b, Stage::GenCorpus));
        assert_eq!(cone_hash(&a, Stage::Collect), cone_hash(&b, Stage::Collect));
        assert_ne!(cone_hash(&a, Stage::SteerTrain), cone_hash(&b, Stage::SteerTrain));
        // seed change invalidates everything
        let mut c = a.clone();
        c.seed = 999;
        for stage in ALL_STAGES {
            assert_ne!(cone_hash(&a, stage), cone_hash(&c, stage), "stage {}", stage);
        }
    }

    #[test]
    fn missing_dependency_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = PipelineConfig::default();
        cfg.artifact_root = dir.path().to_str().unwrap().to_string();
        let err = run_stage(&cfg, Stage::Trace, false).unwrap_err();
        match err {
            Error::Dependency { stage, missing } => {
                assert_eq!(stage, "trace");
                assert_eq!(missing, "gen-corpus");
            }
            other => panic!("expected dependency error, got {}", other),
        }
    }

    #[test]
    fn stage_names_round_trip() {
        for s in ALL_STAGES {
            assert_eq!(Stage::from_name(s.name()), Some(s));
        }
        assert_eq!(Stage::from_name("nope"), None);
    }
}
