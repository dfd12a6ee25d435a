//! Sparsity sweep: trains one layer's SAE at several beta values against
//! existing pilot artifacts and prints L0 / FVU / dead counts.

use emoflow::io;
use emoflow::model::forward;
use emoflow::numerics::Tensor;
use emoflow::pipeline::stages;
use emoflow::sae::{feature_metrics, train_sae, SaeTrainConfig};
use rand::Rng;
use rand::SeedableRng;

fn main() {
    let root = std::path::PathBuf::from(
        std::env::args().nth(1).unwrap_or_else(|| "/tmp/pilot_11".into()),
    );
    let layers: Vec<usize> = vec![1, 4, 7];
    let betas: Vec<f32> = std::env::args()
        .skip(2)
        .filter_map(|a| a.parse().ok())
        .collect();
    let betas = if betas.is_empty() { vec![0.05, 0.1, 0.2, 0.4] } else { betas };

    let bundle = stages::load_corpus_bundle(&root).unwrap();
    let model = io::load_model(&stages::model_dir(&root)).unwrap();
    let d = model.config.d_model;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);

    // activation matrices (final + 25% other positions) for probe layers
    let mut per_layer: Vec<Vec<f32>> = vec![Vec::new(); model.config.n_layers];
    let mut n_rows = 0;
    for &i in bundle.splits.train.iter().take(1200) {
        let tokens = bundle.vocab.encode(&bundle.instances[i].prompt_tokens());
        let out = forward::run(&model, &tokens, &emoflow::model::PatchSet::new()).unwrap();
        let t = tokens.len();
        for p in 0..t {
            if p == t - 1 || rng.gen_bool(0.25) {
                n_rows += 1;
                for l in 0..model.config.n_layers {
                    per_layer[l].extend_from_slice(out.resid[l].row(p));
                }
            }
        }
    }
    println!("{} activation rows", n_rows);
    for &layer in &layers {
        let acts = Tensor::new(vec![n_rows, d], per_layer[layer].clone());
        // residual scale per layer
        let norm: f64 = (0..n_rows.min(500))
            .map(|r| {
                acts.row(r).iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
            })
            .sum::<f64>()
            / n_rows.min(500) as f64;
        println!("layer {} mean |h| = {:.3}", layer, norm);
        for &beta in &betas {
            let cfg = SaeTrainConfig {
                d_sae: 512,
                beta,
                lr: 1.5e-3,
                steps: 1200,
                batch_size: 64,
                seed: 1,
                ..SaeTrainConfig::default()
            };
            let t0 = std::time::Instant::now();
            let sae = train_sae(&acts, layer, &cfg).unwrap();
            let m = feature_metrics(&sae, &acts);
            println!(
                "  beta {:>5}: l0 {:>7.2} fvu {:.4} dead {:>3}  ({:.0}s)",
                beta,
                m.mean_l0,
                m.fvu,
                m.dead_features,
                t0.elapsed().as_secs_f64()
            );
        }
    }
}
