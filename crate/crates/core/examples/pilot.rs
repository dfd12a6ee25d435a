//! Pilot run: executes the pipeline on a scratch directory and prints the
//! quality numbers every acceptance criterion depends on.

use emoflow::corpus::EMOTIONS;
use emoflow::io;
use emoflow::model::forward;
use emoflow::pipeline::{run_stage, stages, PipelineConfig, Stage};
use emoflow::steering;
use emoflow::studies;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(11);
    let upto: String = args.get(2).cloned().unwrap_or_else(|| "eval".to_string());

    let mut cfg = PipelineConfig::default();
    cfg.seed = seed;
    cfg.artifact_root = format!("/tmp/pilot_{}", seed);
    // keep the pilot fast while representative
    cfg.eval.data_efficiency_ks = vec![1, 5, 400];
    cfg.eval.data_efficiency_seeds = 2;

    let order = [
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
    for stage in order {
        let t0 = std::time::Instant::now();
        match run_stage(&cfg, stage, false) {
            Ok(_) => println!("[stage] {:<12} {:>7.1}s", stage.name(), t0.elapsed().as_secs_f64()),
            Err(e) => {
                println!("[stage] {:<12} FAILED: {}", stage.name(), e);
                inspect(&cfg);
                return;
            }
        }
        if stage.name() == upto {
            break;
        }
    }
    inspect(&cfg);
}

fn inspect(cfg: &PipelineConfig) {
    let root = cfg.root();
    let Ok(bundle) = stages::load_corpus_bundle(&root) else { return };

    if let Ok(model) = io::load_model(&stages::model_dir(&root)) {
        // validation accuracy of the raw model
        let val = &bundle.splits.validation;
        let mut correct = 0usize;
        let mut per = [[0usize; 2]; 6];
        for &i in val {
            let inst = &bundle.instances[i];
            let ids = bundle.vocab.encode(&inst.prompt_tokens());
            let logits =
                forward::emotion_logits(&model, &bundle.labels, &ids, None).unwrap();
            let pred = forward::argmax6(&logits);
            per[inst.label.index()][1] += 1;
            if pred == inst.label.index() {
                correct += 1;
                per[inst.label.index()][0] += 1;
            }
        }
        println!("\n[model] val accuracy {:.3}", correct as f64 / val.len() as f64);
        for (i, e) in EMOTIONS.iter().enumerate() {
            println!("  {:<9} {:>3}/{}", e.name(), per[i][0], per[i][1]);
        }
    }

    if let Ok(v) = io::read_json(&stages::saes_dir(&root).join("summary.json")) {
        println!("[sae] layer metrics:");
        for row in v.as_array().unwrap_or(&vec![]) {
            println!(
                "  layer {} l0 {:>6.2} fvu {:.4} dead {}",
                row["layer"], row["mean_l0"].as_f64().unwrap_or(0.0),
                row["fvu"].as_f64().unwrap_or(0.0), row["dead_features"]
            );
        }
    }

    if let Ok(text) = std::fs::read_to_string(stages::phases_dir(&root).join("curves.csv")) {
        println!("[curves]\n{}", text);
    }
    if let Ok(cm) = stages::load_category_map(&root) {
        use emoflow::flow::FeatureCategory::*;
        for c in [Syntax, Concept, Emotion, Other] {
            let members = cm.of_category(c);
            let mut per_layer = vec![0usize; 8];
            for f in &members {
                if f.layer < 8 { per_layer[f.layer] += 1; }
            }
            println!("[categories] {:<8} {:>3} features, per layer {:?}", format!("{:?}", c), members.len(), per_layer);
        }
    }
    if let Ok(pm) = stages::load_phase_map(&root) {
        println!(
            "[phases] syn {:?} con {:?} emo {:?}  -> b1 {} b2 {} warn {:?}",
            pm.emergence_syntax, pm.emergence_concept, pm.emergence_emotion, pm.b1, pm.b2,
            pm.warning
        );
    }

    if let Ok(g) = stages::load_graph(&root) {
        let c = g.structure_counts();
        println!(
            "[trace] total {} phase1-2 {} phase3 {:?}",
            c.total, c.phase12, c.phase3_per_emotion
        );
        if let Ok(planted) = stages::load_planted(&root) {
            let mut recalls = Vec::new();
            for e in EMOTIONS {
                let gt = &planted[e.name()];
                if gt.is_empty() {
                    println!("  {:<9} planted set empty!", e.name());
                    continue;
                }
                let sel = &g.pathway(e).selected[2];
                let hit = gt.iter().filter(|f| sel.contains(f)).count();
                let r = hit as f64 / gt.len() as f64;
                recalls.push(r);
                println!(
                    "  {:<9} recall {}/{} = {:.2}  (selected {})",
                    e.name(), hit, gt.len(), r, sel.len()
                );
            }
            if !recalls.is_empty() {
                println!(
                    "  mean recall {:.3}",
                    recalls.iter().sum::<f64>() / recalls.len() as f64
                );
            }
        }
    }

    if let (Ok(model), Ok(vector)) =
        (io::load_model(&stages::model_dir(&root)), stages::load_steering(&root))
    {
        let saes = stages::load_saes(&root, model.config.n_layers).unwrap();
        let val_examples = studies::build_examples(
            &model,
            &bundle.instances,
            &bundle.vocab,
            &bundle.splits.validation,
        )
        .unwrap();
        let val_refs: Vec<&steering::SteeringExample> = val_examples.iter().collect();
        let base = studies::unsteered_metrics(&bundle.labels, &val_refs);
        let steered =
            studies::steered_metrics(&model, &saes, &bundle.labels, &vector, &val_refs).unwrap();
        println!(
            "[steer] macro f1 {:.3} -> {:.3}  (gain {:+.3})",
            base.macro_f1,
            steered.macro_f1,
            steered.macro_f1 - base.macro_f1
        );
        for (i, e) in EMOTIONS.iter().enumerate() {
            println!(
                "  {:<9} {:.2} -> {:.2}",
                e.name(),
                base.per_emotion[i].f1,
                steered.per_emotion[i].f1
            );
        }
        let rep = steering::sparsity_report(&vector, 0.10, None);
        println!("  changed >10%: {} of {}", rep.changed.len(), rep.total_features);
        if let Ok(ppl) = io::read_json(&stages::eval_dir(&root).join("ppl.json")) {
            println!("  ppl ratio {}", ppl["ppl_ratio"]);
        }
    }

    if let Ok(text) = std::fs::read_to_string(stages::probes_dir(&root).join("probe_metrics.csv"))
    {
        println!("[probe] layer accuracies:");
        for line in text.lines().skip(1) {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() > 2 {
                println!("  layer {} acc {}", cells[0], cells[1]);
            }
        }
    }

    if let Ok(text) =
        std::fs::read_to_string(stages::eval_dir(&root).join("data_efficiency.csv"))
    {
        println!("[data-efficiency]\n{}", text);
    }
}
