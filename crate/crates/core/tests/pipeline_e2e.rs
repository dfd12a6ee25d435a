//! Pipeline contract tests on a miniature configuration: stage wiring,
//! no-op reruns, stale-hash refusal, atomic report layout, and byte-level
//! reproducibility.

use emoflow::pipeline::{
    cone_hash, report::REPORT_FILES, run_stage, stages, PipelineConfig, Stage, StageOutcome,
};
use emoflow::Error;

fn tiny_config(root: &std::path::Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.seed = 5;
    cfg.artifact_root = root.display().to_string();
    cfg.corpus.n_per_emotion = 30;
    cfg.model.n_layers = 4;
    cfg.model.d_model = 24;
    cfg.model.n_heads = 2;
    cfg.model.d_ff = 48;
    cfg.model.lm_steps = 60;
    cfg.model.lm_batch = 8;
    cfg.sae.d_sae = 64;
    cfg.sae.steps = 220;
    cfg.sae.batch_size = 32;
    cfg.sae.beta = 1.0;
    cfg.trace.instances_per_emotion = 8;
    cfg.steer.steps = 30;
    cfg.steer.eval_interval = 10;
    cfg.steer.batch_size = 8;
    cfg.steer.train_per_emotion = 16;
    cfg.probe.train_per_emotion = 20;
    cfg.probe.max_iterations = 300;
    cfg.eval.run_phase_ablation = false;
    cfg.eval.data_efficiency_ks = vec![1, 4];
    cfg.eval.data_efficiency_seeds = 2;
    cfg.eval.sweep_steps = 20;
    cfg.eval.ppl_max_instances = 12;
    cfg
}

/// Phase detection on an arbitrary miniature model is not guaranteed; this
/// helper substitutes a fixed phase map when the phases stage rejects the
/// run, so the downstream wiring can still be exercised.
fn run_phases_tolerant(cfg: &PipelineConfig) {
    match run_stage(cfg, Stage::Phases, false) {
        Ok(_) => {}
        Err(Error::Eval(_)) => {
            // write a fallback phase map + planted file, then stamp the
            // stage manifest by rerunning with a forced boundary override
            let dir = stages::phases_dir(&cfg.root());
            let n = cfg.model.n_layers;
            let pm = emoflow::flow::phases::PhaseMap {
                b1: n / 3,
                b2: 2 * n / 3,
                n_layers: n,
                emergence_syntax: Some(0),
                emergence_concept: Some(n / 3),
                emergence_emotion: Some(2 * n / 3),
                warning: Some("fallback phase map for wiring test".into()),
            };
            emoflow::io::write_json(
                &dir.join("phase_map.json"),
                &serde_json::to_value(&pm).unwrap(),
            )
            .unwrap();
            let planted: std::collections::BTreeMap<String, Vec<emoflow::flow::FeatureRef>> =
                emoflow::corpus::EMOTIONS
                    .iter()
                    .map(|e| (e.name().to_string(), vec![]))
                    .collect();
            emoflow::io::write_json(
                &dir.join("planted.json"),
                &serde_json::to_value(&planted).unwrap(),
            )
            .unwrap();
            let manifest = serde_json::json!({
                "stage": "phases",
                "config_hash": cone_hash(cfg, Stage::Phases),
                "seed": cfg.seed,
                "version": env!("CARGO_PKG_VERSION"),
            });
            emoflow::io::write_json(&dir.join("stage.json"), &manifest).unwrap();
        }
        Err(e) => panic!("phases stage failed unexpectedly: {}", e),
    }
}

#[test]
fn full_pipeline_wiring_and_contracts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());

    // dependency error before anything exists, naming the missing stage
    match run_stage(&cfg, Stage::Trace, false) {
        Err(Error::Dependency { missing, .. }) => assert_eq!(missing, "gen-corpus"),
        other => panic!("expected dependency error, got {:?}", other.map(|_| ())),
    }

    for stage in [Stage::GenCorpus, Stage::TrainModel, Stage::TrainSae, Stage::Collect] {
        assert_eq!(run_stage(&cfg, stage, false).unwrap(), StageOutcome::Ran);
    }
    run_phases_tolerant(&cfg);
    for stage in [Stage::Trace, Stage::SteerTrain, Stage::Probe, Stage::Eval, Stage::Report] {
        assert_eq!(run_stage(&cfg, stage, false).unwrap(), StageOutcome::Ran, "stage {}", stage);
    }

    // rerunning a completed stage with unchanged config is a no-op
    assert_eq!(run_stage(&cfg, Stage::GenCorpus, false).unwrap(), StageOutcome::SkippedUpToDate);
    assert_eq!(run_stage(&cfg, Stage::Collect, false).unwrap(), StageOutcome::SkippedUpToDate);

    // report directory holds exactly the documented files
    let report = stages::report_dir(&cfg.root());
    for f in REPORT_FILES {
        assert!(report.join(f).exists(), "missing report file {}", f);
    }
    let listed: Vec<String> =
        serde_json::from_value(emoflow::io::read_json(&report.join("files.json")).unwrap()["files"].clone())
            .unwrap();
    assert_eq!(listed.len(), 8);

    // a downstream config change leaves upstream stages untouched but
    // invalidates the stale downstream artifact
    let mut cfg2 = cfg.clone();
    cfg2.steer.lambda = 0.3;
    assert_eq!(run_stage(&cfg2, Stage::GenCorpus, false).unwrap(), StageOutcome::SkippedUpToDate);
    // eval depends on steer-train, whose artifact is now stale
    match run_stage(&cfg2, Stage::Eval, false) {
        Err(Error::Config(msg)) => assert!(msg.contains("stale"), "{}", msg),
        other => panic!("expected stale-hash refusal, got {:?}", other.map(|_| ())),
    }
    // --force accepts the stale upstream
    assert_eq!(run_stage(&cfg2, Stage::SteerTrain, true).unwrap(), StageOutcome::Ran);

    // upstream artifacts were never mutated by downstream stages:
    // the corpus stage still matches its own manifest hash
    let corpus_hash = emoflow::pipeline::stage_manifest_hash(&cfg.root(), Stage::GenCorpus);
    assert_eq!(corpus_hash, Some(cone_hash(&cfg, Stage::GenCorpus)));
}

#[test]
fn gen_corpus_is_byte_reproducible() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let cfg_a = tiny_config(dir_a.path());
    let cfg_b = tiny_config(dir_b.path());
    run_stage(&cfg_a, Stage::GenCorpus, false).unwrap();
    run_stage(&cfg_b, Stage::GenCorpus, false).unwrap();
    for f in ["corpus.jsonl", "lexicon.json", "splits.json"] {
        let a = std::fs::read(stages::corpus_dir(&cfg_a.root()).join(f)).unwrap();
        let b = std::fs::read(stages::corpus_dir(&cfg_b.root()).join(f)).unwrap();
        assert_eq!(a, b, "{} differs between identical runs", f);
    }
}

#[test]
fn model_training_is_byte_reproducible() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let mut cfg_a = tiny_config(dir_a.path());
    let mut cfg_b = tiny_config(dir_b.path());
    cfg_a.model.lm_steps = 25;
    cfg_b.model.lm_steps = 25;
    for cfg in [&cfg_a, &cfg_b] {
        run_stage(cfg, Stage::GenCorpus, false).unwrap();
        run_stage(cfg, Stage::TrainModel, false).unwrap();
    }
    let a = std::fs::read(stages::model_dir(&cfg_a.root()).join("block0.wq.scl")).unwrap();
    let b = std::fs::read(stages::model_dir(&cfg_b.root()).join("block0.wq.scl")).unwrap();
    assert_eq!(a, b, "trained weights differ between identical runs");
}
