//! Token importance from attention maps and their gradients.
//!
//! For each layer `l` and head `m` a map `H` is built from the captured
//! attention `A` and its gradient `G = ∂s/∂A`. Grad-SAM uses
//! `H = A ∘ ReLU(G)`; the ablations swap in `A`, `G`, `ReLU(G)` or `A ∘ G`.
//! A token's score is the mean of its row of `H` over every layer, head and
//! key position:
//!
//! ```text
//! r_i = 1/(L·M·N) · Σ_l Σ_m Σ_j H[l][m][i][j]
//! ```
//!
//! Row `i` of `A` holds the attention query token `i` pays to every key, so
//! the default row aggregation scores a token by the gradient-weighted
//! attention it pays. The alternate reading, where `A[i][j]` is attention
//! token `i` receives from `j`, corresponds to summing column `i`; it is
//! available as [`Aggregation::Column`].
//!
//! `[CLS]`, `[SEP]` and `[PAD]` always score `-inf` and never appear in a
//! ranking.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForwardTrace, Model};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::tokenizer::TokenSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MethodKind {
    /// L2 norm of the target's gradient w.r.t. each input embedding.
    #[serde(rename = "gradient")]
    Gradient,
    /// Final-layer attention from `[CLS]`, averaged over heads.
    #[serde(rename = "cls-att")]
    ClsAtt,
    /// `H = A`
    #[serde(rename = "att")]
    Att,
    /// `H = G`
    #[serde(rename = "att-grad")]
    AttGrad,
    /// `H = ReLU(G)`
    #[serde(rename = "att-grad-r")]
    AttGradR,
    /// `H = A ∘ G`
    #[serde(rename = "att-x-att-grad")]
    AttTimesAttGrad,
    /// `H = A ∘ ReLU(G)`
    #[serde(rename = "grad-sam")]
    GradSam,
}

impl MethodKind {
    pub const ALL: [MethodKind; 7] = [
        MethodKind::Gradient,
        MethodKind::ClsAtt,
        MethodKind::Att,
        MethodKind::AttGrad,
        MethodKind::AttGradR,
        MethodKind::AttTimesAttGrad,
        MethodKind::GradSam,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodKind::Gradient => "gradient",
            MethodKind::ClsAtt => "cls-att",
            MethodKind::Att => "att",
            MethodKind::AttGrad => "att-grad",
            MethodKind::AttGradR => "att-grad-r",
            MethodKind::AttTimesAttGrad => "att-x-att-grad",
            MethodKind::GradSam => "grad-sam",
        }
    }

    /// Whether the method needs a backward pass.
    pub fn needs_gradients(self) -> bool {
        !matches!(self, MethodKind::ClsAtt | MethodKind::Att)
    }

    /// Whether the method aggregates per-head maps.
    pub fn uses_maps(self) -> bool {
        !matches!(self, MethodKind::Gradient | MethodKind::ClsAtt)
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodKind::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

/// Which index of `H` identifies the token being scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// `r_i` sums row `i`.
    #[default]
    Row,
    /// `r_i` sums column `i`.
    Column,
}

/// How the embedding gradient becomes a scalar per token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientVariant {
    #[default]
    Norm,
    /// `⟨∂s/∂e_i, e_i⟩`
    DotProduct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainOptions {
    pub aggregation: Aggregation,
    pub gradient_variant: GradientVariant,
    /// Keep `A`, `G` and `H` on the result.
    pub keep_maps: bool,
}

/// Per-layer, per-head `A`, `G` and combined `H`, all `N×N`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamMaps<T> {
    pub method: MethodKind,
    pub attention: Vec<Vec<Tensor<T>>>,
    pub gradients: Option<Vec<Vec<Tensor<T>>>>,
    pub combined: Vec<Vec<Tensor<T>>>,
}

/// Builds one `H` map from an attention matrix and its gradient.
pub fn combine<T: Real>(method: MethodKind, a: &Tensor<T>, g: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let need = |g: Option<&Tensor<T>>| -> Result<Tensor<T>> {
        let g = g.ok_or_else(|| Error::MissingGradient(format!("{method} needs attention gradients")))?;
        if g.shape() != a.shape() {
            return Err(Error::shape("combine", format!("{:?} vs {:?}", a.shape(), g.shape())));
        }
        Ok(g.clone())
    };
    let relu = |v: T| v.max(T::zero());
    Ok(match method {
        MethodKind::Att => a.clone(),
        MethodKind::AttGrad => need(g)?,
        MethodKind::AttGradR => need(g)?.map(relu),
        MethodKind::AttTimesAttGrad => a.zip_map(&need(g)?, |x, y| x * y),
        MethodKind::GradSam => a.zip_map(&need(g)?, |x, y| x * relu(y)),
        MethodKind::Gradient | MethodKind::ClsAtt => {
            return Err(Error::Contract(format!("{method} does not use attention maps")))
        }
    })
}

/// Builds `H` for every layer and head of a trace. Gradient-based methods
/// require that backward has already run from the target score.
pub fn compute_maps<T: Real>(trace: &ForwardTrace<T>, method: MethodKind) -> Result<SamMaps<T>> {
    let (layers, heads) = (trace.layers(), trace.heads());
    let attention: Vec<Vec<Tensor<T>>> = (0..layers)
        .map(|l| (0..heads).map(|m| trace.attention(l, m).clone()).collect())
        .collect();
    let gradients = if method.needs_gradients() {
        let mut out = Vec::with_capacity(layers);
        for l in 0..layers {
            let mut row = Vec::with_capacity(heads);
            for m in 0..heads {
                let g = trace.attention_grad(l, m).ok_or_else(|| {
                    Error::MissingGradient(format!("no gradient for layer {l} head {m}"))
                })?;
                row.push(g.clone());
            }
            out.push(row);
        }
        Some(out)
    } else {
        None
    };
    maps_from_parts(method, attention, gradients)
}

/// Same as [`compute_maps`] for matrices supplied directly.
pub fn maps_from_parts<T: Real>(
    method: MethodKind,
    attention: Vec<Vec<Tensor<T>>>,
    gradients: Option<Vec<Vec<Tensor<T>>>>,
) -> Result<SamMaps<T>> {
    let mut combined = Vec::with_capacity(attention.len());
    for (l, layer) in attention.iter().enumerate() {
        let mut row = Vec::with_capacity(layer.len());
        for (m, a) in layer.iter().enumerate() {
            let g = gradients.as_ref().and_then(|g| g.get(l)).and_then(|g| g.get(m));
            row.push(combine(method, a, g)?);
        }
        combined.push(row);
    }
    Ok(SamMaps {
        method,
        attention,
        gradients,
        combined,
    })
}

/// Serializes `-inf` as the string `"-inf"` and finite values as numbers.
pub mod score_serde {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if *v == f64::NEG_INFINITY {
            s.serialize_str("-inf")
        } else if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            Err(serde::ser::Error::custom(format!("unserializable score {v}")))
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Str(s) if s == "-inf" => Ok(f64::NEG_INFINITY),
            Raw::Str(s) => Err(de::Error::custom(format!("invalid score {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub text: String,
    pub index: usize,
    #[serde(with = "score_serde")]
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    pub method: MethodKind,
    pub class_id: Option<usize>,
    pub tokens: Vec<TokenScore>,
    /// Real-token positions, most important first.
    pub ranking: Vec<usize>,
    #[serde(skip)]
    pub maps: Option<SamMaps<f64>>,
}

impl AttributionResult {
    fn new(
        method: MethodKind,
        class_id: Option<usize>,
        seq: &TokenSequence,
        scores: Vec<f64>,
    ) -> Self {
        let ranking = rank_positions(&scores);
        let tokens = scores
            .into_iter()
            .enumerate()
            .map(|(index, score)| TokenScore {
                text: seq.tokens[index].clone(),
                index,
                score,
            })
            .collect();
        AttributionResult {
            method,
            class_id,
            tokens,
            ranking,
            maps: None,
        }
    }

    pub fn scores(&self) -> Vec<f64> {
        self.tokens.iter().map(|t| t.score).collect()
    }
}

/// Finite-score positions sorted by descending score, lower index first on
/// ties.
pub fn rank_positions(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).filter(|&i| scores[i].is_finite()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

fn mask_specials(seq: &TokenSequence, scores: &mut [f64]) {
    for (i, s) in scores.iter_mut().enumerate() {
        if seq.is_special(i) {
            *s = f64::NEG_INFINITY;
        }
    }
}

/// Mean of each token's row (or column) of `H` over all layers, heads and
/// positions, with specials forced to `-inf`.
pub fn token_importance<T: Real>(
    maps: &SamMaps<T>,
    seq: &TokenSequence,
    class_id: Option<usize>,
    aggregation: Aggregation,
) -> Result<AttributionResult> {
    let n = seq.len();
    let layers = maps.combined.len();
    let heads = maps.combined.first().map_or(0, Vec::len);
    if layers == 0 || heads == 0 {
        return Err(Error::Contract("no attention maps".into()));
    }
    let mut totals = vec![0.0f64; n];
    for h in maps.combined.iter().flatten() {
        if h.shape() != [n, n] {
            return Err(Error::shape(
                "token_importance",
                format!("map {:?} for sequence length {n}", h.shape()),
            ));
        }
        match aggregation {
            Aggregation::Row => {
                for (i, total) in totals.iter_mut().enumerate() {
                    *total += h.row(i).iter().map(|v| v.as_f64()).sum::<f64>();
                }
            }
            Aggregation::Column => {
                for i in 0..n {
                    for (j, total) in totals.iter_mut().enumerate() {
                        *total += h.get(i, j).as_f64();
                    }
                }
            }
        }
    }
    let norm = (layers * heads * n) as f64;
    let mut scores: Vec<f64> = totals.into_iter().map(|t| t / norm).collect();
    mask_specials(seq, &mut scores);
    Ok(AttributionResult::new(maps.method, class_id, seq, scores))
}

/// Per-token size of `∂s/∂e_i`. Backward must already have run.
pub fn input_gradient_importance<T: Real>(
    trace: &ForwardTrace<T>,
    seq: &TokenSequence,
    class_id: Option<usize>,
    variant: GradientVariant,
) -> Result<AttributionResult> {
    let grad = trace
        .tape
        .grad(trace.embeddings)
        .ok_or_else(|| Error::MissingGradient("no gradient on input embeddings".into()))?;
    let emb = trace.tape.value(trace.embeddings);
    if grad.rows() != seq.len() {
        return Err(Error::shape("input_gradient_importance", "sequence/trace length mismatch"));
    }
    let mut scores: Vec<f64> = (0..seq.len())
        .map(|i| match variant {
            GradientVariant::Norm => grad.row(i).iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt(),
            GradientVariant::DotProduct => grad
                .row(i)
                .iter()
                .zip(emb.row(i))
                .map(|(g, e)| g.as_f64() * e.as_f64())
                .sum(),
        })
        .collect();
    mask_specials(seq, &mut scores);
    Ok(AttributionResult::new(MethodKind::Gradient, class_id, seq, scores))
}

/// Attention paid by `[CLS]` to each token in the final layer, averaged
/// over heads.
pub fn cls_attention_importance<T: Real>(
    trace: &ForwardTrace<T>,
    seq: &TokenSequence,
    class_id: Option<usize>,
) -> Result<AttributionResult> {
    let last = trace
        .layers()
        .checked_sub(1)
        .ok_or_else(|| Error::Contract("trace has no layers".into()))?;
    let heads = trace.heads();
    let mut scores = vec![0.0f64; seq.len()];
    for m in 0..heads {
        for (i, s) in scores.iter_mut().enumerate() {
            *s += trace.attention(last, m).get(0, i).as_f64();
        }
    }
    for s in &mut scores {
        *s /= heads as f64;
    }
    mask_specials(seq, &mut scores);
    Ok(AttributionResult::new(MethodKind::ClsAtt, class_id, seq, scores))
}

fn to_f64_maps<T: Real>(maps: &SamMaps<T>) -> SamMaps<f64> {
    let conv = |v: &Vec<Vec<Tensor<T>>>| -> Vec<Vec<Tensor<f64>>> {
        v.iter().map(|l| l.iter().map(Tensor::cast).collect()).collect()
    };
    SamMaps {
        method: maps.method,
        attention: conv(&maps.attention),
        gradients: maps.gradients.as_ref().map(conv),
        combined: conv(&maps.combined),
    }
}

/// Scores a trace on which the caller has already run any required
/// backward pass.
pub fn attribute_trace<T: Real>(
    trace: &ForwardTrace<T>,
    seq: &TokenSequence,
    method: MethodKind,
    class_id: Option<usize>,
    opts: &ExplainOptions,
) -> Result<AttributionResult> {
    match method {
        MethodKind::Gradient => input_gradient_importance(trace, seq, class_id, opts.gradient_variant),
        MethodKind::ClsAtt => cls_attention_importance(trace, seq, class_id),
        _ => {
            let maps = compute_maps(trace, method)?;
            let mut result = token_importance(&maps, seq, class_id, opts.aggregation)?;
            if opts.keep_maps {
                result.maps = Some(to_f64_maps(&maps));
            }
            Ok(result)
        }
    }
}

/// Forward, backward from the target logit when the method needs it, and
/// score every token.
pub fn explain<T: Real>(
    model: &Model<T>,
    seq: &TokenSequence,
    method: MethodKind,
    class_id: Option<usize>,
    opts: &ExplainOptions,
) -> Result<AttributionResult> {
    let mut trace = model.forward(seq)?;
    let root = trace.target_score(class_id)?;
    if method.needs_gradients() {
        trace.backward(root)?;
    }
    attribute_trace(&trace, seq, method, class_id, opts)
}
