//! BERT-style encoder classifier with attention taps.
//!
//! Token, position and segment embeddings are summed and layer-normalized,
//! then passed through `layers` encoder blocks. Each block runs `heads`
//! self-attention heads
//!
//! ```text
//! A = softmax((U·W_qᵀ)(U·W_kᵀ)ᵀ / sqrt(head_dim))      (padded keys → -inf)
//! ```
//!
//! followed by the usual value/output projection, residual, layer norm and
//! GELU feed-forward. The `[CLS]` row of the last layer goes through a tanh
//! pooler and a linear classifier to produce the logits.
//!
//! Tokens are rows here (`U` is `N×d`), so `A[i][j]` couples query `i` with
//! key `j`. Every attention matrix stays on the tape as a tap, which lets one
//! backward pass deliver `∂s/∂A` for all layers and heads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::real::{Precision, Real};
use crate::tensor::Tensor;
use crate::tokenizer::TokenSequence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub head_dim: usize,
    /// Token positions per input sequence.
    pub seq_len: usize,
    /// Rows in the position table; any `seq_len` up to this is accepted.
    pub max_positions: usize,
    /// Logit count; 1 for binary classification.
    pub num_outputs: usize,
    pub vocab_size: usize,
    pub ffn_dim: usize,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
    #[serde(default)]
    pub precision: Precision,
}

fn default_eps() -> f64 {
    1e-12
}

/// Segment table rows. Only segment 0 is ever used.
pub const SEGMENTS: usize = 2;

impl ModelConfig {
    /// The small configuration used throughout the tests: two layers of two
    /// heads at width 32.
    pub fn tiny(vocab_size: usize, num_outputs: usize) -> Self {
        ModelConfig {
            layers: 2,
            heads: 2,
            hidden: 32,
            head_dim: 16,
            seq_len: 16,
            max_positions: 32,
            num_outputs,
            vocab_size,
            ffn_dim: 64,
            layer_norm_eps: 1e-12,
            precision: Precision::F32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.heads * self.head_dim != self.hidden {
            return fail(format!(
                "heads ({}) x head_dim ({}) != hidden ({})",
                self.heads, self.head_dim, self.hidden
            ));
        }
        if self.layers == 0 || self.heads == 0 {
            return fail("need at least one layer and one head".into());
        }
        if self.seq_len < 3 {
            return fail(format!("seq_len {} < 3", self.seq_len));
        }
        if self.max_positions < self.seq_len {
            return fail(format!(
                "max_positions {} < seq_len {}",
                self.max_positions, self.seq_len
            ));
        }
        if self.num_outputs == 0 {
            return fail("num_outputs must be at least 1".into());
        }
        if self.vocab_size < crate::tokenizer::RESERVED.len() {
            return fail(format!("vocab_size {} too small", self.vocab_size));
        }
        if self.ffn_dim == 0 {
            return fail("ffn_dim must be positive".into());
        }
        if !(self.layer_norm_eps > 0.0 && self.layer_norm_eps.is_finite()) {
            return fail("layer_norm_eps must be positive".into());
        }
        Ok(())
    }

    /// Number of classes predicted: 2 for a single binary logit.
    pub fn num_classes(&self) -> usize {
        if self.num_outputs == 1 {
            2
        } else {
            self.num_outputs
        }
    }
}

/// Indices of one head's parameters in [`EncoderWeights::params`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadParams {
    /// `head_dim × hidden`
    pub query: usize,
    /// `head_dim × hidden`
    pub key: usize,
    /// `head_dim × hidden`
    pub value: usize,
    pub value_bias: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerParams {
    pub heads: Vec<HeadParams>,
    /// `hidden × hidden`, applied to the concatenated head outputs.
    pub output: usize,
    pub output_bias: usize,
    pub attn_norm_gain: usize,
    pub attn_norm_bias: usize,
    pub ffn_in: usize,
    pub ffn_in_bias: usize,
    pub ffn_out: usize,
    pub ffn_out_bias: usize,
    pub ffn_norm_gain: usize,
    pub ffn_norm_bias: usize,
}

/// Fixed ordering and shapes of every learnable matrix for a config.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub names: Vec<String>,
    pub shapes: Vec<[usize; 2]>,
    pub token_embedding: usize,
    pub position_embedding: usize,
    pub segment_embedding: usize,
    pub embed_norm_gain: usize,
    pub embed_norm_bias: usize,
    pub layers: Vec<LayerParams>,
    pub pooler: usize,
    pub pooler_bias: usize,
    pub classifier: usize,
    pub classifier_bias: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Uniform { fan_in: usize },
    Zeros,
    Ones,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self::with_inits(cfg).0
    }

    fn with_inits(cfg: &ModelConfig) -> (Self, Vec<Init>) {
        let mut names = Vec::new();
        let mut shapes = Vec::new();
        let mut inits = Vec::new();
        let mut add = |name: String, shape: [usize; 2], init: Init| {
            names.push(name);
            shapes.push(shape);
            inits.push(init);
            names.len() - 1
        };
        let (d, da, f) = (cfg.hidden, cfg.head_dim, cfg.ffn_dim);
        let unit = Init::Uniform { fan_in: 1 };
        let token_embedding = add("embeddings.token".into(), [cfg.vocab_size, d], unit);
        let position_embedding = add("embeddings.position".into(), [cfg.max_positions, d], unit);
        let segment_embedding = add("embeddings.segment".into(), [SEGMENTS, d], unit);
        let embed_norm_gain = add("embeddings.norm.gain".into(), [1, d], Init::Ones);
        let embed_norm_bias = add("embeddings.norm.bias".into(), [1, d], Init::Zeros);
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = |s: &str| format!("layer.{l}.{s}");
            let heads = (0..cfg.heads)
                .map(|m| {
                    let h = |s: &str| format!("layer.{l}.head.{m}.{s}");
                    HeadParams {
                        query: add(h("query"), [da, d], Init::Uniform { fan_in: d }),
                        key: add(h("key"), [da, d], Init::Uniform { fan_in: d }),
                        value: add(h("value"), [da, d], Init::Uniform { fan_in: d }),
                        value_bias: add(h("value.bias"), [1, da], Init::Zeros),
                    }
                })
                .collect();
            layers.push(LayerParams {
                heads,
                output: add(p("attention.output"), [d, d], Init::Uniform { fan_in: d }),
                output_bias: add(p("attention.output.bias"), [1, d], Init::Zeros),
                attn_norm_gain: add(p("attention.norm.gain"), [1, d], Init::Ones),
                attn_norm_bias: add(p("attention.norm.bias"), [1, d], Init::Zeros),
                ffn_in: add(p("ffn.in"), [d, f], Init::Uniform { fan_in: d }),
                ffn_in_bias: add(p("ffn.in.bias"), [1, f], Init::Zeros),
                ffn_out: add(p("ffn.out"), [f, d], Init::Uniform { fan_in: f }),
                ffn_out_bias: add(p("ffn.out.bias"), [1, d], Init::Zeros),
                ffn_norm_gain: add(p("ffn.norm.gain"), [1, d], Init::Ones),
                ffn_norm_bias: add(p("ffn.norm.bias"), [1, d], Init::Zeros),
            });
        }
        let pooler = add("pooler".into(), [d, d], Init::Uniform { fan_in: d });
        let pooler_bias = add("pooler.bias".into(), [1, d], Init::Zeros);
        let classifier = add(
            "classifier".into(),
            [d, cfg.num_outputs],
            Init::Uniform { fan_in: d },
        );
        let classifier_bias = add("classifier.bias".into(), [1, cfg.num_outputs], Init::Zeros);
        (
            ParamLayout {
                names,
                shapes,
                token_embedding,
                position_embedding,
                segment_embedding,
                embed_norm_gain,
                embed_norm_bias,
                layers,
                pooler,
                pooler_bias,
                classifier,
                classifier_bias,
            },
            inits,
        )
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Every learnable matrix of a model, in [`ParamLayout`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights<T> {
    config: ModelConfig,
    layout: ParamLayout,
    params: Vec<Tensor<T>>,
}

impl<T: Real> EncoderWeights<T> {
    /// Seeded initialization: matrices uniform in `±1/sqrt(fan_in)`, norm
    /// gains one, biases zero.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, inits) = ParamLayout::with_inits(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layout
            .shapes
            .iter()
            .zip(&inits)
            .map(|(&[r, c], init)| match *init {
                Init::Zeros => Tensor::zeros(vec![r, c]),
                Init::Ones => Tensor::full(vec![r, c], T::one()),
                Init::Uniform { fan_in } => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    let data = (0..r * c)
                        .map(|_| T::of(rng.random_range(-bound..bound)))
                        .collect();
                    Tensor::matrix(r, c, data).expect("layout shape")
                }
            })
            .collect();
        Ok(EncoderWeights {
            config: config.clone(),
            layout,
            params,
        })
    }

    /// Assembles weights from tensors in layout order, checking every shape.
    pub fn from_params(config: ModelConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let w = EncoderWeights {
            config,
            layout,
            params,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.params.len() != self.layout.len() {
            return Err(Error::Config(format!(
                "expected {} tensors, got {}",
                self.layout.len(),
                self.params.len()
            )));
        }
        for ((name, shape), t) in self.layout.names.iter().zip(&self.layout.shapes).zip(&self.params) {
            if t.shape() != shape {
                return Err(Error::Config(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite { op: "weights" });
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn get(&self, idx: usize) -> &Tensor<T> {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Tensor<T> {
        &mut self.params[idx]
    }

    pub fn cast<U: Real>(&self) -> EncoderWeights<U> {
        let mut config = self.config.clone();
        config.precision = U::PRECISION;
        EncoderWeights {
            config,
            layout: self.layout.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// The same weights run at a different sequence length.
    pub fn with_seq_len(&self, seq_len: usize) -> Result<Self> {
        let mut out = self.clone();
        out.config.seq_len = seq_len;
        out.config.validate()?;
        Ok(out)
    }
}

/// Per-layer, per-head attention matrices that replace the softmax output.
/// `None` leaves that head's attention to be computed as usual.
pub type AttentionOverride<T> = [Vec<Option<Tensor<T>>>];

/// Wraps a full set of matrices as an override of every head.
pub fn override_all<T: Real>(attention: Vec<Vec<Tensor<T>>>) -> Vec<Vec<Option<Tensor<T>>>> {
    attention
        .into_iter()
        .map(|heads| heads.into_iter().map(Some).collect())
        .collect()
}

/// Everything recorded by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    pub tape: Tape<T>,
    /// `1 × num_outputs`.
    pub logits: Var,
    /// Summed token, position and segment embeddings, one row per token,
    /// before the embedding layer norm.
    pub embeddings: Var,
    /// `hidden[0]` is the normalized embedding; `hidden[l]` is layer `l`'s output.
    pub hidden: Vec<Var>,
    /// `attention[l][m]`, each `seq_len × seq_len`.
    pub attention: Vec<Vec<Var>>,
    /// Tape handles of the weights, in layout order.
    pub params: Vec<Var>,
    num_outputs: usize,
}

impl<T: Real> ForwardTrace<T> {
    pub fn logits(&self) -> &[T] {
        self.tape.value(self.logits).data()
    }

    pub fn layers(&self) -> usize {
        self.attention.len()
    }

    pub fn heads(&self) -> usize {
        self.attention.first().map_or(0, Vec::len)
    }

    pub fn attention(&self, layer: usize, head: usize) -> &Tensor<T> {
        self.tape.value(self.attention[layer][head])
    }

    pub fn attention_grad(&self, layer: usize, head: usize) -> Option<&Tensor<T>> {
        self.tape.grad(self.attention[layer][head])
    }

    /// The scalar to explain: the only logit for binary models, or the
    /// logit of `class_id` otherwise.
    pub fn target_score(&mut self, class_id: Option<usize>) -> Result<Var> {
        let col = match (self.num_outputs, class_id) {
            (1, None) => 0,
            (1, Some(c)) => {
                return Err(Error::Contract(format!(
                    "binary model takes no class id (got {c})"
                )))
            }
            (n, Some(c)) if c < n => c,
            (n, Some(c)) => {
                return Err(Error::Contract(format!("class id {c} out of range 0..{n}")))
            }
            (n, None) => {
                return Err(Error::Contract(format!(
                    "model with {n} outputs needs a class id"
                )))
            }
        };
        self.tape.pick(self.logits, 0, col)
    }

    pub fn backward(&mut self, root: Var) -> Result<()> {
        self.tape.backward(root)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    weights: EncoderWeights<T>,
}

impl<T: Real> Model<T> {
    pub fn new(weights: EncoderWeights<T>) -> Result<Self> {
        weights.validate()?;
        Ok(Model { weights })
    }

    pub fn config(&self) -> &ModelConfig {
        self.weights.config()
    }

    pub fn weights(&self) -> &EncoderWeights<T> {
        &self.weights
    }

    pub fn into_weights(self) -> EncoderWeights<T> {
        self.weights
    }

    pub fn with_seq_len(&self, seq_len: usize) -> Result<Self> {
        Ok(Model {
            weights: self.weights.with_seq_len(seq_len)?,
        })
    }

    pub fn forward(&self, seq: &TokenSequence) -> Result<ForwardTrace<T>> {
        self.run(seq, None)
    }

    /// Runs the forward pass with the given attention matrices substituted
    /// for the softmax output. Rows need not sum to one. Heads left as `None`
    /// are computed from their inputs, so overriding a single head measures
    /// its total effect on the logits.
    pub fn forward_with_injected_attention(
        &self,
        seq: &TokenSequence,
        attention: &AttentionOverride<T>,
    ) -> Result<Vec<T>> {
        let cfg = self.config();
        let n = cfg.seq_len;
        if attention.len() != cfg.layers || attention.iter().any(|l| l.len() != cfg.heads) {
            return Err(Error::shape(
                "attention override",
                format!("need {} layers x {} heads", cfg.layers, cfg.heads),
            ));
        }
        for a in attention.iter().flatten().flatten() {
            if a.shape() != [n, n] {
                return Err(Error::shape(
                    "attention override",
                    format!("matrix {:?}, expected [{n}, {n}]", a.shape()),
                ));
            }
            if a.data().iter().any(|&v| v < T::zero()) {
                return Err(Error::Contract("attention override has negative entries".into()));
            }
        }
        Ok(self.run(seq, Some(attention))?.logits().to_vec())
    }

    pub fn logits(&self, seq: &TokenSequence) -> Result<Vec<T>> {
        Ok(self.forward(seq)?.logits().to_vec())
    }

    pub fn predict(&self, seq: &TokenSequence) -> Result<usize> {
        Ok(predicted_class(&self.logits(seq)?))
    }

    fn run(
        &self,
        seq: &TokenSequence,
        injected: Option<&AttentionOverride<T>>,
    ) -> Result<ForwardTrace<T>> {
        let cfg = self.config();
        let n = cfg.seq_len;
        if seq.len() != n {
            return Err(Error::shape(
                "forward",
                format!("sequence length {} != configured {n}", seq.len()),
            ));
        }
        if let Some(&bad) = seq.ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(Error::shape("forward", format!("token id {bad} >= vocab size")));
        }
        let layout = self.weights.layout();
        let mut tape = Tape::new();
        let params: Vec<Var> = self
            .weights
            .params()
            .iter()
            .map(|t| tape.leaf(t.clone()))
            .collect::<Result<_>>()?;
        let p = |i: usize| params[i];
        let eps = T::of(cfg.layer_norm_eps);

        let ids: Vec<usize> = seq.ids.iter().map(|&i| i as usize).collect();
        let tok = tape.gather(p(layout.token_embedding), &ids)?;
        let pos = tape.slice_rows(p(layout.position_embedding), 0, n)?;
        let seg = tape.gather(p(layout.segment_embedding), &vec![0; n])?;
        let sum = tape.add(tok, pos)?;
        let embeddings = tape.add(sum, seg)?;
        let mut u = tape.layer_norm(
            embeddings,
            p(layout.embed_norm_gain),
            p(layout.embed_norm_bias),
            eps,
        )?;

        let scale = T::one() / T::of(cfg.head_dim as f64).sqrt();
        let mut hidden = vec![u];
        let mut attention = Vec::with_capacity(cfg.layers);
        for (l, lp) in layout.layers.iter().enumerate() {
            let mut head_out = Vec::with_capacity(cfg.heads);
            let mut taps = Vec::with_capacity(cfg.heads);
            for (m, hp) in lp.heads.iter().enumerate() {
                let a = match injected.and_then(|over| over[l][m].as_ref()) {
                    Some(a) => tape.leaf(a.clone())?,
                    None => {
                        let q = tape.matmul_t(u, p(hp.query))?;
                        let k = tape.matmul_t(u, p(hp.key))?;
                        let s = tape.matmul_t(q, k)?;
                        let s = tape.scale(s, scale)?;
                        tape.masked_softmax_rows(s, Some(&seq.attention_mask))?
                    }
                };
                taps.push(a);
                let v = tape.matmul_t(u, p(hp.value))?;
                let v = tape.add_row(v, p(hp.value_bias))?;
                head_out.push(tape.matmul(a, v)?);
            }
            attention.push(taps);
            let concat = tape.concat_cols(&head_out)?;
            let proj = tape.matmul(concat, p(lp.output))?;
            let proj = tape.add_row(proj, p(lp.output_bias))?;
            let res = tape.add(u, proj)?;
            let u1 = tape.layer_norm(res, p(lp.attn_norm_gain), p(lp.attn_norm_bias), eps)?;
            let f = tape.matmul(u1, p(lp.ffn_in))?;
            let f = tape.add_row(f, p(lp.ffn_in_bias))?;
            let f = tape.gelu(f)?;
            let f = tape.matmul(f, p(lp.ffn_out))?;
            let f = tape.add_row(f, p(lp.ffn_out_bias))?;
            let res = tape.add(u1, f)?;
            u = tape.layer_norm(res, p(lp.ffn_norm_gain), p(lp.ffn_norm_bias), eps)?;
            hidden.push(u);
        }

        let cls = tape.slice_rows(u, 0, 1)?;
        let pooled = tape.matmul(cls, p(layout.pooler))?;
        let pooled = tape.add_row(pooled, p(layout.pooler_bias))?;
        let pooled = tape.tanh(pooled)?;
        let logits = tape.matmul(pooled, p(layout.classifier))?;
        let logits = tape.add_row(logits, p(layout.classifier_bias))?;

        Ok(ForwardTrace {
            tape,
            logits,
            embeddings,
            hidden,
            attention,
            params,
            num_outputs: cfg.num_outputs,
        })
    }
}

/// Class with the highest logit (lowest index on ties); a single logit is
/// read as class 1 when positive.
pub fn predicted_class<T: Real>(logits: &[T]) -> usize {
    if logits.len() == 1 {
        return usize::from(logits[0] > T::zero());
    }
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}
