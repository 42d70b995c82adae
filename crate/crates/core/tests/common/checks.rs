//! Invariant checks shared by the property tests and the acceptance run.
//! Each takes a seed for a random micro-model and reports the first
//! violation it finds.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

use std::collections::BTreeSet;

use gradsam::attribution::{explain, maps_from_parts, token_importance, Aggregation, ExplainOptions, MethodKind};
use gradsam::tokenizer::TokenSequence;
use gradsam::{Model, Tensor};
use rand::Rng;

use super::oracle;

pub type Check = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

pub struct Case {
    pub model: Model<f64>,
    pub seq: TokenSequence,
    pub class: Option<usize>,
}

pub fn case(seed: u64) -> Case {
    let mut rng = oracle::rng(seed);
    let cfg = oracle::micro_config(&mut rng);
    let model = Model::new(oracle::random_weights(&cfg, &mut rng)).unwrap();
    let real = rng.random_range(1..=cfg.seq_len - 2);
    let seq = oracle::random_sequence(&mut rng, cfg.seq_len, real, false);
    let class = (cfg.num_outputs > 1).then(|| rng.random_range(0..cfg.num_outputs));
    Case { model, seq, class }
}

fn opts() -> ExplainOptions {
    ExplainOptions::default()
}

pub fn attention_rows_are_stochastic(seed: u64) -> Check {
    let c = case(seed);
    let trace = c.model.forward(&c.seq).map_err(|e| e.to_string())?;
    for l in 0..trace.layers() {
        for m in 0..trace.heads() {
            let a = trace.attention(l, m);
            for r in 0..a.rows() {
                let row = a.row(r);
                ensure!(row.iter().all(|&v| v >= 0.0), "negative weight in layer {l} head {m}");
                let sum: f64 = row.iter().sum();
                ensure!((sum - 1.0).abs() <= 1e-5, "row {r} of layer {l} head {m} sums to {sum}");
                for (j, &v) in row.iter().enumerate() {
                    ensure!(c.seq.attention_mask[j] || v == 0.0, "padded key {j} has weight {v}");
                }
            }
        }
    }
    Ok(())
}

/// Finite scores on exactly the real tokens, `-inf` elsewhere, a ranking
/// that is a permutation of the real positions, and nonnegative Grad-SAM.
pub fn scores_are_well_formed(seed: u64) -> Check {
    let c = case(seed);
    let real: BTreeSet<usize> = c.seq.real_positions().into_iter().collect();
    for method in MethodKind::ALL {
        let r = explain(&c.model, &c.seq, method, c.class, &opts()).map_err(|e| e.to_string())?;
        ensure!(r.tokens.len() == c.seq.len(), "{method:?}: wrong length");
        for (i, t) in r.tokens.iter().enumerate() {
            if real.contains(&i) {
                ensure!(t.score.is_finite(), "{method:?}: token {i} scored {}", t.score);
            } else {
                ensure!(t.score == f64::NEG_INFINITY, "{method:?}: special {i} scored {}", t.score);
            }
        }
        let ranked: BTreeSet<usize> = r.ranking.iter().copied().collect();
        ensure!(ranked.len() == r.ranking.len() && ranked == real, "{method:?}: bad ranking");
        if method == MethodKind::GradSam {
            ensure!(
                r.scores().iter().filter(|s| s.is_finite()).all(|&s| s >= 0.0),
                "negative Grad-SAM score"
            );
        }
    }
    Ok(())
}

/// H is `A · max(G, 0)` bit for bit: zero where G ≤ 0 and equal to the
/// untrimmed product elsewhere.
pub fn trimming_identity(seed: u64) -> Check {
    let c = case(seed);
    let keep = ExplainOptions { keep_maps: true, ..opts() };
    let run = |method| {
        explain(&c.model, &c.seq, method, c.class, &keep)
            .map_err(|e| e.to_string())
            .map(|r| r.maps.unwrap())
    };
    let gs = run(MethodKind::GradSam)?;
    let axg = run(MethodKind::AttTimesAttGrad)?;
    let grads = gs.gradients.as_ref().unwrap();
    for l in 0..gs.combined.len() {
        for m in 0..gs.combined[l].len() {
            let (h, a, g) = (&gs.combined[l][m], &gs.attention[l][m], &grads[l][m]);
            let hx = &axg.combined[l][m];
            for k in 0..h.len() {
                let (hv, av, gv) = (h.data()[k], a.data()[k], g.data()[k]);
                ensure!(hv == av * gv.max(0.0), "H != A·relu(G) at {l},{m},{k}");
                if gv > 0.0 {
                    ensure!(hv == hx.data()[k], "H != A∘G where G > 0 at {l},{m},{k}");
                } else {
                    ensure!(hv == 0.0, "H = {hv} where G = {gv}");
                }
            }
        }
    }
    Ok(())
}

/// Scaling the classifier weights and bias by `scale > 0` scales the
/// explained logit, so every gradient-based score scales with it and the
/// ranking is unchanged.
pub fn logit_scale_preserves_ranking(seed: u64, scale: f64) -> Check {
    let c = case(seed);
    let mut w = c.model.weights().clone();
    let (clf, bias) = (w.layout().classifier, w.layout().classifier_bias);
    for idx in [clf, bias] {
        for v in w.get_mut(idx).data_mut() {
            *v *= scale;
        }
    }
    let scaled = Model::new(w).unwrap();
    for method in MethodKind::ALL.into_iter().filter(|m| m.needs_gradients()) {
        let base = explain(&c.model, &c.seq, method, c.class, &opts()).map_err(|e| e.to_string())?;
        let up = explain(&scaled, &c.seq, method, c.class, &opts()).map_err(|e| e.to_string())?;
        // floor for models whose gradients vanish to rounding noise
        let top = base.scores().iter().filter(|s| s.is_finite()).fold(1e-12f64, |m, s| m.max(s.abs()));
        for (b, u) in base.scores().iter().zip(up.scores()) {
            if b.is_finite() {
                ensure!((b * scale - u).abs() <= 1e-9 * top * scale, "{method:?}: {b}·{scale} vs {u}");
            }
        }
        // rankings can only differ where base scores are within rounding of a tie
        if base.ranking != up.ranking {
            let s = base.scores();
            let gap = base.ranking.windows(2).map(|p| (s[p[0]] - s[p[1]]).abs()).fold(f64::INFINITY, f64::min);
            ensure!(gap <= 1e-9 * top, "{method:?}: ranking changed with gap {gap}");
        }
    }
    Ok(())
}

/// Running the same weights at a longer sequence length with extra padding
/// changes neither the logits nor the Grad-SAM ranking.
pub fn padding_extension_keeps_ranking(seed: u64) -> Check {
    let c = case(seed);
    let n = c.seq.len();
    for extra in [1, 3] {
        let longer = c.model.with_seq_len(n + extra).map_err(|e| e.to_string())?;
        let seq = c.seq.padded_to(n + extra).map_err(|e| e.to_string())?;
        let (a, b) = (c.model.logits(&c.seq).unwrap(), longer.logits(&seq).unwrap());
        for (x, y) in a.iter().zip(&b) {
            ensure!((x - y).abs() <= 1e-5, "+{extra} padding: logit {x} vs {y}");
        }
        let r0 = explain(&c.model, &c.seq, MethodKind::GradSam, c.class, &opts()).unwrap();
        let r1 = explain(&longer, &seq, MethodKind::GradSam, c.class, &opts()).unwrap();
        ensure!(r0.ranking == r1.ranking, "+{extra} padding: {:?} vs {:?}", r0.ranking, r1.ranking);
    }
    Ok(())
}

fn m(rows: &[&[f64]]) -> Tensor<f64> {
    Tensor::from_rows(rows).unwrap()
}

/// Token 1 carries the single largest positive gradient but also larger
/// negative ones; token 2 carries a small, purely positive gradient.
/// Returns the top token under Att-Grad, Att-Grad-R and Grad-SAM.
pub fn suppression_top_tokens() -> [usize; 3] {
    let seq = {
        let mut rng = oracle::rng(0);
        oracle::random_sequence(&mut rng, 4, 2, false)
    };
    let a = m(&[
        &[0.25, 0.25, 0.25, 0.25],
        &[0.25, 0.25, 0.25, 0.25],
        &[0.25, 0.25, 0.25, 0.25],
        &[0.25, 0.25, 0.25, 0.25],
    ]);
    let g = m(&[
        &[0.0, 0.0, 0.0, 0.0],
        &[2.0, -1.5, -0.5, -0.4],
        &[0.5, 0.0, 0.0, 0.0],
        &[0.0, 0.0, 0.0, 0.0],
    ]);
    let positive_mass = |row: usize| g.row(row).iter().map(|v| v.max(0.0)).sum::<f64>();
    assert!(positive_mass(1) > positive_mass(2));
    assert!(g.row(1).iter().sum::<f64>() < g.row(2).iter().sum::<f64>());
    let top = |method| {
        let maps = maps_from_parts(method, vec![vec![a.clone()]], Some(vec![vec![g.clone()]])).unwrap();
        token_importance(&maps, &seq, None, Aggregation::Row).unwrap().ranking[0]
    };
    [top(MethodKind::AttGrad), top(MethodKind::AttGradR), top(MethodKind::GradSam)]
}

pub const SUPPRESSION_EXPECTED: [usize; 3] = [2, 1, 1];
