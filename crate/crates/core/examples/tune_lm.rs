//! LM step-count sweep: per-emotion validation F1 for several budgets.

use emoflow::corpus::{self, EMOTIONS};
use emoflow::metrics::f1_scores;
use emoflow::model::{forward, train_lm, LabelIds, LmTrainConfig, ModelConfig};

fn main() {
    let steps_list: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let steps_list = if steps_list.is_empty() { vec![250, 350, 500] } else { steps_list };
    let lex = corpus::default_lexicon();
    let gen = corpus::GeneratorConfig { n_per_emotion: 500, seed: 1, ..Default::default() };
    let instances = corpus::generate_corpus(&lex, &gen).unwrap();
    let vocab = corpus::build_vocab(&lex);
    let labels = LabelIds::from_vocab(&vocab).unwrap();
    let splits = corpus::split(&instances, &corpus::SplitSpec { seed: 2, ..Default::default() }).unwrap();
    let mc = ModelConfig { vocab_size: vocab.len(), context_len: 48, seed: 7, ..Default::default() };

    let exposure: f64 = std::env::var("EXPOSURE").ok().and_then(|v| v.parse().ok()).unwrap_or(0.2);
    println!("label exposure {}", exposure);
    for &steps in &steps_list {
        let weak: f64 = std::env::var("WEAK").ok().and_then(|v| v.parse().ok()).unwrap_or(0.06);
        let seed: u64 = std::env::var("SEED").ok().and_then(|v| v.parse().ok()).unwrap_or(4);
        let cfg = LmTrainConfig {
            steps, batch_size: 12, lr: 2.5e-3, label_exposure: exposure,
            label_exposure_overrides: vec![(4, weak), (5, weak)], seed,
        };
        let t0 = std::time::Instant::now();
        let tm = train_lm(&instances, &splits.train, &vocab, mc.clone(), &cfg).unwrap();
        let mut preds = Vec::new();
        let mut truth = Vec::new();
        for &i in &splits.validation {
            let ids = vocab.encode(&instances[i].prompt_tokens());
            let l = forward::emotion_logits(&tm.model, &labels, &ids, None).unwrap();
            preds.push(EMOTIONS[forward::argmax6(&l)]);
            truth.push(instances[i].label);
        }
        let t = f1_scores(&preds, &truth);
        print!("steps {:>4} ({:>4.0}s): macro {:.3} acc {:.3} | ", steps, t0.elapsed().as_secs_f64(), t.macro_f1, t.accuracy);
        for (i, e) in EMOTIONS.iter().enumerate() {
            print!("{} {:.2} ", &e.name()[..2], t.per_emotion[i].f1);
        }
        println!("| loss {:.3}", tm.loss_curve.last().unwrap());
    }
}
