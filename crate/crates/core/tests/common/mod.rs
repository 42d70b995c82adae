#![allow(dead_code)]

pub mod checks;
pub mod oracle;

use std::sync::OnceLock;

use gradsam::dataset::{encode_records, Example, Split};
use gradsam::synthetic::{generate_corpus, SyntheticTaskSpec};
use gradsam::trainer::{train, TrainConfig, TrainReport};
use gradsam::tokenizer::TokenSequence;
use gradsam::{EncoderWeights, Exec, Model, ModelConfig, Tensor, Tokenizer, Vocab};

pub const CORPUS_SEED: u64 = 20;
pub const CORPUS_SIZE: usize = 2000;
pub const INIT_SEED: u64 = 7;

pub struct Planted {
    pub model: Model<f32>,
    pub report: TrainReport,
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    pub test: Vec<Example>,
    pub seconds: f64,
}

/// The tiny model trained on the single-trigger corpus, built once per test
/// binary.
pub fn planted() -> &'static Planted {
    static CELL: OnceLock<Planted> = OnceLock::new();
    CELL.get_or_init(|| {
        let started = std::time::Instant::now();
        let vocab = Vocab::builtin();
        let spec = SyntheticTaskSpec::single_trigger();
        let data = generate_corpus(&spec, &vocab, CORPUS_SIZE, CORPUS_SEED, Exec::default()).unwrap();
        let cfg = ModelConfig::tiny(vocab.len(), 2);
        let tok = Tokenizer::new(vocab);
        let enc = |s| encode_records(&tok, &data.split(s), cfg.seq_len).unwrap();
        let (train_set, validation, test) = (enc(Split::Train), enc(Split::Validation), enc(Split::Test));
        let init = EncoderWeights::<f32>::init(&cfg, INIT_SEED).unwrap();
        let tc = TrainConfig::default();
        let (weights, report) = train(init, &train_set, &validation, &tc, Exec::default()).unwrap();
        Planted {
            model: Model::new(weights).unwrap(),
            report,
            train: train_set,
            validation,
            test,
            seconds: started.elapsed().as_secs_f64(),
        }
    })
}

/// Largest normwise relative error, over all heads, between the tape
/// gradient of the target logit with respect to each attention matrix and
/// a finite-difference estimate that re-runs the forward pass with one
/// perturbed entry substituted for that head's attention.
pub fn attention_gradient_error(model: &Model<f64>, seq: &TokenSequence, class: Option<usize>) -> f64 {
    let mut trace = model.forward(seq).unwrap();
    let root = trace.target_score(class).unwrap();
    trace.backward(root).unwrap();
    let cfg = model.config();
    let col = class.unwrap_or(0);
    let n = cfg.seq_len;
    // Difference quotients carry rounding noise near eps·|s|/h ≈ 2e-11·|s|,
    // so a vanishing gradient is measured against a floor above it.
    let floor = 1e-4 * trace.logits()[col].abs().max(1.0);
    let mut worst = 0.0f64;
    for l in 0..cfg.layers {
        for m in 0..cfg.heads {
            let a = trace.attention(l, m).clone();
            let g = trace.attention_grad(l, m).expect("every head has a gradient");
            let eval = |i: usize, j: usize, delta: f64| {
                let mut t = a.clone();
                t.set(i, j, a.get(i, j) + delta);
                let mut over: Vec<Vec<Option<Tensor<f64>>>> = vec![vec![None; cfg.heads]; cfg.layers];
                over[l][m] = Some(t);
                model.forward_with_injected_attention(seq, &over).unwrap()[col]
            };
            let mut diff = 0.0f64;
            for i in 0..n {
                for j in 0..n {
                    let x = a.get(i, j);
                    let h = 1e-5 * x.abs().max(1.0);
                    let fd = if x - h >= 0.0 {
                        (eval(i, j, h) - eval(i, j, -h)) / (2.0 * h)
                    } else {
                        // one-sided, second order, so the entry stays nonnegative
                        (-3.0 * eval(i, j, 0.0) + 4.0 * eval(i, j, h) - eval(i, j, 2.0 * h)) / (2.0 * h)
                    };
                    diff = diff.max((fd - g.get(i, j)).abs());
                }
            }
            worst = worst.max(diff / g.max_abs().max(floor));
        }
    }
    worst
}
