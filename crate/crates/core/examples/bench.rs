use emoflow::corpus;
use emoflow::model::{self, train::*, ModelConfig};
use std::time::Instant;

fn main() {
    let lex = corpus::default_lexicon();
    let gen = corpus::GeneratorConfig { n_per_emotion: 40, seed: 1, ..Default::default() };
    let instances = corpus::generate_corpus(&lex, &gen).unwrap();
    let vocab = corpus::build_vocab(&lex);
    println!("vocab size {}", vocab.len());
    let mc = ModelConfig { vocab_size: vocab.len(), context_len: 48, seed: 7, ..Default::default() };
    let idx: Vec<usize> = (0..instances.len()).collect();

    // measure LM training step cost: 30 steps batch 16
    let cfg = LmTrainConfig { steps: 30, batch_size: 16, lr: 2e-3, label_exposure: 1.0, label_exposure_overrides: vec![], seed: 4 };
    let t0 = Instant::now();
    let tm = train_lm(&instances, &idx, &vocab, mc.clone(), &cfg).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!("30 train steps (batch 16): {:.2}s  -> {:.1} ms/step", dt, dt / 30.0 * 1000.0);

    // inference forward cost
    let m = &tm.model;
    let toks = vocab.encode(&instances[0].prompt_tokens());
    let t1 = Instant::now();
    for _ in 0..200 {
        let _ = model::forward::forward_with_hooks(m, &toks, toks.len() - 1).unwrap();
    }
    let dt1 = t1.elapsed().as_secs_f64();
    println!("full forward (T={}): {:.2} ms", toks.len(), dt1 / 200.0 * 1000.0);

    // cache + resume cost
    let cache = model::forward::build_cache(m, &toks).unwrap();
    let mut ps = model::PatchSet::new();
    ps.add(5, toks.len() - 1, vec![0.01; 64]);
    let t2 = Instant::now();
    for _ in 0..2000 {
        let _ = model::forward::resume_final_row(m, &cache, &ps).unwrap();
    }
    println!("resume from layer 5: {:.3} ms", t2.elapsed().as_secs_f64() / 2000.0 * 1000.0);
}
