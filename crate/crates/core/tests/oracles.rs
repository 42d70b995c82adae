mod common;

use common::oracle::{self, from_mat, to_mat, Mat};
use common::attention_gradient_error;
use gradsam::attribution::{explain, ExplainOptions, MethodKind};
use gradsam::model::EncoderWeights;
use gradsam::{Model, ModelConfig, Precision, Tensor};
use rand::Rng;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

/// One layer, one head, width two, on `[CLS] t [SEP]`.
fn hand_set_model() -> Model<f64> {
    let cfg = ModelConfig {
        layers: 1,
        heads: 1,
        hidden: 2,
        head_dim: 2,
        seq_len: 3,
        max_positions: 3,
        num_outputs: 1,
        vocab_size: 6,
        ffn_dim: 2,
        layer_norm_eps: 1e-12,
        precision: Precision::F64,
    };
    let mut w = EncoderWeights::<f64>::init(&cfg, 0).unwrap();
    let names = w.layout().names.clone();
    for (i, name) in names.iter().enumerate() {
        let t = w.get_mut(i);
        let len = t.len();
        for (k, v) in t.data_mut().iter_mut().enumerate() {
            *v = if name.ends_with("norm.gain") {
                1.0 + 0.1 * k as f64
            } else {
                let sign = if (i + k) % 2 == 0 { 1.0 } else { -1.0 };
                sign * 0.1 * ((i * 3 + k) % 7 + 1) as f64 / len as f64
            };
        }
    }
    Model::new(w).unwrap()
}

#[test]
fn hand_set_micro_model_matches_straight_line() {
    let model = hand_set_model();
    let mut rng = oracle::rng(0);
    let seq = oracle::random_sequence(&mut rng, 3, 1, false);
    let mut w6 = seq.clone();
    w6.ids[1] = 5;
    let got = model.logits(&w6).unwrap();
    let want = oracle::straight_line_forward(model.weights(), &w6, None).logits;
    assert_eq!(got.len(), 1);
    assert!(close(got[0], want[0], 1e-12), "{got:?} vs {want:?}");
}

#[test]
fn random_micro_models_match_straight_line() {
    let mut rng = oracle::rng(1);
    for _ in 0..30 {
        let cfg = oracle::micro_config(&mut rng);
        let w = oracle::random_weights(&cfg, &mut rng);
        let real = rng.random_range(0..=cfg.seq_len - 2);
        let seq = oracle::random_sequence(&mut rng, cfg.seq_len, real, false);
        let model = Model::new(w).unwrap();
        let trace = model.forward(&seq).unwrap();
        let want = oracle::straight_line_forward(model.weights(), &seq, None);
        for (g, w) in trace.logits().iter().zip(&want.logits) {
            assert!(close(*g, *w, 1e-10), "{g} vs {w}");
        }
        for l in 0..cfg.layers {
            for m in 0..cfg.heads {
                let got = to_mat(trace.attention(l, m));
                for (gr, wr) in got.iter().zip(&want.attention[l][m]) {
                    for (g, w) in gr.iter().zip(wr) {
                        assert!((g - w).abs() <= 1e-12);
                    }
                }
            }
        }
    }
}

#[test]
fn injected_attention_matches_straight_line_override() {
    let mut rng = oracle::rng(2);
    for _ in 0..10 {
        let cfg = oracle::micro_config(&mut rng);
        let model = Model::new(oracle::random_weights(&cfg, &mut rng)).unwrap();
        let seq = oracle::random_sequence(&mut rng, cfg.seq_len, cfg.seq_len - 2, false);
        let n = cfg.seq_len;
        let over: Vec<Vec<Option<Mat>>> = (0..cfg.layers)
            .map(|_| {
                (0..cfg.heads)
                    .map(|_| {
                        rng.random_bool(0.5).then(|| {
                            (0..n).map(|_| (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).collect()
                        })
                    })
                    .collect()
            })
            .collect();
        let as_tensors: Vec<Vec<Option<Tensor<f64>>>> = over
            .iter()
            .map(|l| l.iter().map(|a| a.as_ref().map(from_mat)).collect())
            .collect();
        let got = model.forward_with_injected_attention(&seq, &as_tensors).unwrap();
        let want = oracle::straight_line_forward(model.weights(), &seq, Some(&over)).logits;
        for (g, w) in got.iter().zip(&want) {
            assert!(close(*g, *w, 1e-10));
        }
    }
}

#[test]
fn attention_gradients_match_finite_differences() {
    let mut rng = oracle::rng(3);
    for _ in 0..6 {
        let cfg = oracle::micro_config(&mut rng);
        let model = Model::new(oracle::random_weights(&cfg, &mut rng)).unwrap();
        let real = rng.random_range(1..=cfg.seq_len - 2);
        let seq = oracle::random_sequence(&mut rng, cfg.seq_len, real, false);
        let class = (cfg.num_outputs > 1).then(|| rng.random_range(0..cfg.num_outputs));
        let err = attention_gradient_error(&model, &seq, class);
        assert!(err <= 1e-6, "relative error {err}");
    }
}

#[test]
fn single_precision_gradients_track_double_precision_differences() {
    let mut rng = oracle::rng(4);
    for _ in 0..5 {
        let cfg = oracle::micro_config(&mut rng);
        let w64 = oracle::random_weights(&cfg, &mut rng);
        let seq = oracle::random_sequence(&mut rng, cfg.seq_len, cfg.seq_len - 2, false);
        let class = (cfg.num_outputs > 1).then_some(0);
        // the f64 tape is itself checked against differences above
        let m64 = Model::new(w64.clone()).unwrap();
        let m32 = Model::new(w64.cast::<f32>()).unwrap();
        let mut t64 = m64.forward(&seq).unwrap();
        let r = t64.target_score(class).unwrap();
        t64.backward(r).unwrap();
        let mut t32 = m32.forward(&seq).unwrap();
        let r = t32.target_score(class).unwrap();
        t32.backward(r).unwrap();
        for l in 0..cfg.layers {
            for m in 0..cfg.heads {
                let g64 = t64.attention_grad(l, m).unwrap();
                let g32: Tensor<f64> = t32.attention_grad(l, m).unwrap().cast();
                let diff = g64.data().iter().zip(g32.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(diff <= 1e-3 * g64.max_abs().max(1e-3), "{diff}");
            }
        }
        assert!(attention_gradient_error(&m64, &seq, class) <= 1e-6);
    }
}

#[test]
fn grad_sam_matches_triple_loop() {
    let mut rng = oracle::rng(5);
    for _ in 0..30 {
        let cfg = oracle::micro_config(&mut rng);
        let model = Model::new(oracle::random_weights(&cfg, &mut rng)).unwrap();
        let real = rng.random_range(1..=cfg.seq_len - 2);
        let seq = oracle::random_sequence(&mut rng, cfg.seq_len, real, false);
        let class = (cfg.num_outputs > 1).then(|| rng.random_range(0..cfg.num_outputs));
        let mut trace = model.forward(&seq).unwrap();
        let root = trace.target_score(class).unwrap();
        trace.backward(root).unwrap();
        let a: Vec<Vec<Mat>> = (0..cfg.layers)
            .map(|l| (0..cfg.heads).map(|m| to_mat(trace.attention(l, m))).collect())
            .collect();
        let g: Vec<Vec<Mat>> = (0..cfg.layers)
            .map(|l| (0..cfg.heads).map(|m| to_mat(trace.attention_grad(l, m).unwrap())).collect())
            .collect();
        let want = oracle::grad_sam_triple_loop(&a, &g, &seq);
        let got = explain(&model, &seq, MethodKind::GradSam, class, &ExplainOptions::default())
            .unwrap()
            .scores();
        for (x, y) in got.iter().zip(&want) {
            assert!(x == y || (x - y).abs() <= 1e-12, "{x} vs {y}");
        }
    }
}

#[test]
fn gradient_method_matches_directional_difference() {
    let mut rng = oracle::rng(6);
    for _ in 0..8 {
        let cfg = oracle::micro_config(&mut rng);
        let w = oracle::random_weights(&cfg, &mut rng);
        let real = rng.random_range(1..=cfg.seq_len - 2);
        let seq = oracle::random_sequence(&mut rng, cfg.seq_len, real, true);
        let class = (cfg.num_outputs > 1).then_some(cfg.num_outputs - 1);
        let col = class.unwrap_or(0);
        let model = Model::new(w.clone()).unwrap();
        let result = explain(&model, &seq, MethodKind::Gradient, class, &ExplainOptions::default()).unwrap();
        let mut trace = model.forward(&seq).unwrap();
        let root = trace.target_score(class).unwrap();
        trace.backward(root).unwrap();
        let grad = trace.tape.grad(trace.embeddings).unwrap().clone();
        let table = w.layout().token_embedding;
        for i in 1..=real {
            let norm = result.tokens[i].score;
            if norm < 1e-9 {
                continue;
            }
            let dir: Vec<f64> = grad.row(i).iter().map(|g| g / norm).collect();
            let id = seq.ids[i] as usize;
            let shifted = |h: f64| {
                let mut w2 = w.clone();
                for (k, d) in dir.iter().enumerate() {
                    let v = w2.get(table).get(id, k);
                    w2.get_mut(table).set(id, k, v + h * d);
                }
                oracle::straight_line_forward(&w2, &seq, None).logits[col]
            };
            let h = 1e-5;
            let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
            assert!((fd - norm).abs() <= 1e-3 * norm, "token {i}: {fd} vs {norm}");
        }
    }
}

#[test]
fn cls_attention_is_head_mean_of_cls_row() {
    let mut rng = oracle::rng(7);
    for _ in 0..10 {
        let cfg = oracle::micro_config(&mut rng);
        let model = Model::new(oracle::random_weights(&cfg, &mut rng)).unwrap();
        let real = rng.random_range(1..=cfg.seq_len - 2);
        let seq = oracle::random_sequence(&mut rng, cfg.seq_len, real, false);
        let class = (cfg.num_outputs > 1).then_some(0);
        let got = explain(&model, &seq, MethodKind::ClsAtt, class, &ExplainOptions::default())
            .unwrap()
            .scores();
        let last = &oracle::straight_line_forward(model.weights(), &seq, None).attention[cfg.layers - 1];
        for i in 1..=real {
            let want = last.iter().map(|a| a[0][i]).sum::<f64>() / cfg.heads as f64;
            assert!((got[i] - want).abs() <= 1e-12);
        }
        assert!(got[0] == f64::NEG_INFINITY && got[real + 1] == f64::NEG_INFINITY);
    }
}
