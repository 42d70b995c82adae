//! Reference computations that share no code with the library: a
//! straight-line encoder forward over nested vectors, random micro-models and
//! brute-force importance sums.

use gradsam::model::EncoderWeights;
use gradsam::tokenizer::{TokenSequence, CLS_ID, PAD_ID, SEP_ID};
use gradsam::{ModelConfig, Precision, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor<f64>) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn from_mat(m: &Mat) -> Tensor<f64> {
    let rows: Vec<&[f64]> = m.iter().map(Vec::as_slice).collect();
    Tensor::from_rows(&rows).unwrap()
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (p, q, r) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; r]; p];
    for i in 0..p {
        for k in 0..q {
            for j in 0..r {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|row| row[j]).collect()).collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect())
        .collect()
}

fn add_bias(a: &Mat, bias: &[f64]) -> Mat {
    a.iter()
        .map(|row| row.iter().zip(bias).map(|(u, v)| u + v).collect())
        .collect()
}

fn norm(a: &Mat, gain: &[f64], bias: &[f64], eps: f64) -> Mat {
    a.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + eps).sqrt() * gain[j] + bias[j])
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub struct OracleOutput {
    pub logits: Vec<f64>,
    pub attention: Vec<Vec<Mat>>,
}

/// Encoder forward written out step by step. Heads with an override use it
/// in place of their softmax output.
pub fn straight_line_forward(
    w: &EncoderWeights<f64>,
    seq: &TokenSequence,
    overrides: Option<&[Vec<Option<Mat>>]>,
) -> OracleOutput {
    let cfg = w.config();
    let names = &w.layout().names;
    let get = |name: &str| -> Mat {
        let idx = names.iter().position(|n| n == name).unwrap_or_else(|| panic!("{name}"));
        to_mat(w.get(idx))
    };
    let vec_of = |name: &str| get(name)[0].clone();
    let n = seq.ids.len();
    let tok = get("embeddings.token");
    let pos = get("embeddings.position");
    let segment = get("embeddings.segment");
    let emb: Mat = (0..n)
        .map(|i| {
            (0..cfg.hidden)
                .map(|k| tok[seq.ids[i] as usize][k] + pos[i][k] + segment[0][k])
                .collect()
        })
        .collect();
    let eps = cfg.layer_norm_eps;
    let mut u = norm(&emb, &vec_of("embeddings.norm.gain"), &vec_of("embeddings.norm.bias"), eps);
    let mut attention = Vec::new();
    for l in 0..cfg.layers {
        let mut heads_out: Vec<Mat> = Vec::new();
        let mut maps = Vec::new();
        for m in 0..cfg.heads {
            let h = |s: &str| format!("layer.{l}.head.{m}.{s}");
            let q = matmul(&u, &transpose(&get(&h("query"))));
            let k = matmul(&u, &transpose(&get(&h("key"))));
            let given = overrides.and_then(|o| o[l][m].clone());
            let a = given.unwrap_or_else(|| {
                let scale = 1.0 / (cfg.head_dim as f64).sqrt();
                (0..n)
                    .map(|i| {
                        let scores: Vec<f64> = (0..n)
                            .map(|j| (0..cfg.head_dim).map(|c| q[i][c] * k[j][c]).sum::<f64>() * scale)
                            .collect();
                        let top = (0..n)
                            .filter(|&j| seq.attention_mask[j])
                            .map(|j| scores[j])
                            .fold(f64::NEG_INFINITY, f64::max);
                        let e: Vec<f64> = (0..n)
                            .map(|j| if seq.attention_mask[j] { (scores[j] - top).exp() } else { 0.0 })
                            .collect();
                        let z: f64 = e.iter().sum();
                        e.iter().map(|v| v / z).collect()
                    })
                    .collect()
            });
            let v = add_bias(&matmul(&u, &transpose(&get(&h("value")))), &vec_of(&h("value.bias")));
            heads_out.push(matmul(&a, &v));
            maps.push(a);
        }
        attention.push(maps);
        let concat: Mat = (0..n)
            .map(|i| heads_out.iter().flat_map(|o| o[i].iter().copied()).collect())
            .collect();
        let p = |s: &str| format!("layer.{l}.{s}");
        let proj = add_bias(&matmul(&concat, &get(&p("attention.output"))), &vec_of(&p("attention.output.bias")));
        let u1 = norm(
            &add(&u, &proj),
            &vec_of(&p("attention.norm.gain")),
            &vec_of(&p("attention.norm.bias")),
            eps,
        );
        let f: Mat = add_bias(&matmul(&u1, &get(&p("ffn.in"))), &vec_of(&p("ffn.in.bias")))
            .into_iter()
            .map(|row| row.into_iter().map(gelu).collect())
            .collect();
        let f = add_bias(&matmul(&f, &get(&p("ffn.out"))), &vec_of(&p("ffn.out.bias")));
        u = norm(&add(&u1, &f), &vec_of(&p("ffn.norm.gain")), &vec_of(&p("ffn.norm.bias")), eps);
    }
    let cls = vec![u[0].clone()];
    let pooled: Mat = add_bias(&matmul(&cls, &get("pooler")), &vec_of("pooler.bias"))
        .into_iter()
        .map(|row| row.into_iter().map(f64::tanh).collect())
        .collect();
    let logits = add_bias(&matmul(&pooled, &get("classifier")), &vec_of("classifier.bias"));
    OracleOutput {
        logits: logits[0].clone(),
        attention,
    }
}

pub const MICRO_VOCAB: usize = 14;

/// A random config within L ≤ 3, M ≤ 2, d ≤ 16, N ≤ 8.
pub fn micro_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let heads = rng.random_range(1..=2);
    let head_dim = rng.random_range(1..=16 / heads);
    let seq_len = rng.random_range(3..=8);
    ModelConfig {
        layers: rng.random_range(1..=3),
        heads,
        hidden: heads * head_dim,
        head_dim,
        seq_len,
        max_positions: 12,
        num_outputs: rng.random_range(1..=3),
        vocab_size: MICRO_VOCAB,
        ffn_dim: rng.random_range(1..=8),
        layer_norm_eps: 1e-12,
        precision: Precision::F64,
    }
}

/// Every parameter drawn at random, gains near one.
pub fn random_weights(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> EncoderWeights<f64> {
    let mut w = EncoderWeights::<f64>::init(cfg, rng.random()).unwrap();
    let names = w.layout().names.clone();
    for (i, name) in names.iter().enumerate() {
        for v in w.get_mut(i).data_mut() {
            *v = if name.ends_with("norm.gain") {
                1.0 + rng.random_range(-0.3..0.3)
            } else {
                rng.random_range(-1.0..1.0)
            };
        }
    }
    w
}

/// `[CLS] t… [SEP] [PAD]…` with `real` random tokens. With `distinct`, no
/// token id repeats.
pub fn random_sequence(rng: &mut ChaCha8Rng, n: usize, real: usize, distinct: bool) -> TokenSequence {
    assert!(real + 2 <= n);
    let mut pool: Vec<u32> = (5..MICRO_VOCAB as u32).collect();
    let mut body = Vec::with_capacity(real);
    for _ in 0..real {
        if distinct {
            let k = rng.random_range(0..pool.len());
            body.push(pool.swap_remove(k));
        } else {
            body.push(rng.random_range(5..MICRO_VOCAB as u32));
        }
    }
    let mut ids = vec![CLS_ID];
    ids.extend(&body);
    ids.push(SEP_ID);
    ids.resize(n, PAD_ID);
    let live = real + 2;
    TokenSequence {
        tokens: ids.iter().map(|id| format!("t{id}")).collect(),
        attention_mask: (0..n).map(|i| i < live).collect(),
        spans: vec![None; n],
        word_ids: (0..n).map(|i| (1..=real).contains(&i).then(|| i - 1)).collect(),
        mask_policy: None,
        ids,
    }
}

/// Mean over layers, heads and key positions of `A ∘ max(G, 0)`, one query
/// row per token, written as explicit loops. Specials get `-inf`.
pub fn grad_sam_triple_loop(a: &[Vec<Mat>], g: &[Vec<Mat>], seq: &TokenSequence) -> Vec<f64> {
    let layers = a.len();
    let heads = a[0].len();
    let n = seq.ids.len();
    let mut r = vec![0.0; n];
    for i in 0..n {
        let mut total = 0.0;
        for l in 0..layers {
            for m in 0..heads {
                for j in 0..n {
                    let gij = g[l][m][i][j];
                    if gij > 0.0 {
                        total += a[l][m][i][j] * gij;
                    }
                }
            }
        }
        r[i] = total / (layers * heads * n) as f64;
        if matches!(seq.ids[i], CLS_ID | SEP_ID | PAD_ID) {
            r[i] = f64::NEG_INFINITY;
        }
    }
    r
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
