//! Report emission: one directory with the eight table/summary files that
//! mirror the analysis figures, derived verbatim from stage artifacts.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io;
use crate::steering;

use super::stages::{
    self, csv_escape, eval_dir, phases_dir, probes_dir, report_dir, trace_dir, write_csv,
};
use super::PipelineConfig;

pub const REPORT_FILES: [&str; 8] = [
    "category_curves.csv",
    "logit_effects.csv",
    "pathway_structure.csv",
    "steering_results.csv",
    "sparsity_report.csv",
    "data_efficiency.csv",
    "probe_accuracy.csv",
    "summary.json",
];

fn read_csv_rows(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::format(format!("{}: empty csv", path.display())))?
        .split(',')
        .map(|s| s.to_string())
        .collect();
    // plain split is safe for the numeric tables read back here
    let rows = lines
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').map(|s| s.to_string()).collect())
        .collect();
    Ok((header, rows))
}

pub fn emit_report(cfg: &PipelineConfig) -> Result<()> {
    let root = cfg.root();
    let dir = report_dir(&root);
    std::fs::create_dir_all(&dir)?;

    // category curves, annotated with each layer's phase
    let phase_map = stages::load_phase_map(&root)?;
    let (_, curve_rows) = read_csv_rows(&phases_dir(&root).join("curves.csv"))?;
    let annotated: Vec<Vec<String>> = curve_rows
        .iter()
        .map(|r| {
            let layer: usize = r[0].parse().unwrap_or(0);
            vec![r[0].clone(), r[1].clone(), r[2].clone(), phase_map.phase(layer).to_string()]
        })
        .collect();
    write_csv(
        &dir.join("category_curves.csv"),
        &["layer", "category", "activation", "phase"],
        &annotated,
    )?;

    // feature x emotion logit effects, filtered by the min-effect flag
    let (_, effect_rows) = read_csv_rows(&trace_dir(&root).join("logit_effects.csv"))?;
    let filtered: Vec<Vec<String>> = effect_rows
        .into_iter()
        .filter(|r| r[2].parse::<f64>().map(|v| v >= cfg.eval.min_effect).unwrap_or(false))
        .collect();
    write_csv(
        &dir.join("logit_effects.csv"),
        &["feature", "emotion", "logit_effect"],
        &filtered,
    )?;

    // pathway structure counts
    let graph = stages::load_graph(&root)?;
    let counts = graph.structure_counts();
    let mut prow = vec![counts.total.to_string(), counts.phase12.to_string()];
    prow.extend(counts.phase3_per_emotion.iter().map(|c| c.to_string()));
    write_csv(
        &dir.join("pathway_structure.csv"),
        &["total", "phase1_2", "anger", "joy", "sadness", "fear", "surprise", "disgust"],
        &[prow],
    )?;

    // steering results table is copied verbatim
    let steering_csv = std::fs::read(eval_dir(&root).join("steering_results.csv"))?;
    io::write_atomic(&dir.join("steering_results.csv"), &steering_csv)?;

    // sparsity report from the trained vector + category map
    let vector = stages::load_steering(&root)?;
    let categories = stages::load_category_map(&root)?;
    let report =
        steering::sparsity_report(&vector, cfg.steer.sparsity_threshold, Some(&categories));
    let sp_rows: Vec<Vec<String>> = report
        .changed
        .iter()
        .map(|r| {
            vec![
                r.feature.to_string(),
                r.feature.layer.to_string(),
                r.feature.feature.to_string(),
                r.multiplier.to_string(),
                ((r.multiplier as f64) - 1.0).abs().to_string(),
                r.category.clone(),
                r.best_cue.clone().unwrap_or_default(),
            ]
        })
        .collect();
    write_csv(
        &dir.join("sparsity_report.csv"),
        &["feature", "layer", "index", "multiplier", "abs_change", "category", "best_cue"],
        &sp_rows,
    )?;

    // data efficiency table copied verbatim (empty placeholder if disabled)
    let de_path = eval_dir(&root).join("data_efficiency.csv");
    if de_path.exists() {
        io::write_atomic(&dir.join("data_efficiency.csv"), &std::fs::read(de_path)?)?;
    } else {
        write_csv(
            &dir.join("data_efficiency.csv"),
            &["k", "seeds", "status", "macro_f1"],
            &[],
        )?;
    }

    // per-layer probe accuracy
    let (_, probe_rows) = read_csv_rows(&probes_dir(&root).join("probe_metrics.csv"))?;
    let pa: Vec<Vec<String>> =
        probe_rows.iter().map(|r| vec![r[0].clone(), r[1].clone(), r[2].clone()]).collect();
    write_csv(&dir.join("probe_accuracy.csv"), &["layer", "accuracy", "macro_f1"], &pa)?;

    // summary: numbers lifted from the artifacts byte-for-byte
    let (_, steer_rows) = read_csv_rows(&eval_dir(&root).join("steering_results.csv"))?;
    let find_row = |name: &str| -> Option<&Vec<String>> {
        steer_rows.iter().find(|r| r[0] == name)
    };
    let ppl = io::read_json(&eval_dir(&root).join("ppl.json"))?;
    let de5 = de_macro(&dir.join("data_efficiency.csv"), 5)?;
    let de400 = de_macro(&dir.join("data_efficiency.csv"), 400)?;
    let summary = serde_json::json!({
        "phase_map": {
            "b1": phase_map.b1,
            "b2": phase_map.b2,
            "emergence_syntax": phase_map.emergence_syntax,
            "emergence_concept": phase_map.emergence_concept,
            "emergence_emotion": phase_map.emergence_emotion,
        },
        "pathway_counts": {
            "total": counts.total,
            "phase1_2": counts.phase12,
            "phase3": counts.phase3_per_emotion,
        },
        "steering": {
            "zero_shot_macro_f1": find_row("zero-shot").map(|r| r[7].clone()),
            "causal_feat_macro_f1": find_row("causal-feat").map(|r| r[7].clone()),
            "ppl_ratio": ppl["ppl_ratio"].clone(),
        },
        "sparsity": {
            "threshold": report.threshold,
            "changed": report.changed.len(),
            "total_features": report.total_features,
        },
        "probe": {
            "first_layer_accuracy": probe_rows.first().map(|r| r[1].clone()),
            "last_layer_accuracy": probe_rows.last().map(|r| r[1].clone()),
        },
        "data_efficiency": { "k5_macro_f1": de5, "k400_macro_f1": de400 },
    });
    io::write_json(&dir.join("summary.json"), &summary)?;

    let manifest = serde_json::json!({
        "kind": "report",
        "files": REPORT_FILES,
        "min_effect": cfg.eval.min_effect,
        "version": env!("CARGO_PKG_VERSION"),
    });
    io::write_json(&dir.join("files.json"), &manifest)?;
    let _ = csv_escape(" ");
    Ok(())
}

fn de_macro(path: &Path, k: usize) -> Result<Option<String>> {
    if !path.exists() {
        return Ok(None);
    }
    let (_, rows) = read_csv_rows(path)?;
    Ok(rows
        .iter()
        .find(|r| r.first().map(|v| v == &k.to_string()).unwrap_or(false))
        .and_then(|r| r.get(3).cloned()))
}
