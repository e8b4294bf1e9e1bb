//! Miniature transformer language model.
//!
//! The model accepts input *embeddings* directly so that prompt rows
//! (gated or not) can be injected ahead of the instance tokens. It runs in
//! two modes: `causal` (unidirectional next-token model) and `masked`
//! (bidirectional mask-filling model). Blocks are pre-norm, positions are
//! learned, and the output projection is tied to the token embeddings.
//!
//! With zero layers the model degenerates to the closed form
//! `logits = (embeddings + positions) * E^T`, which the tests use as an
//! independent oracle.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, VarId};

/// Epsilon inside every layer normalization.
pub const LN_EPS: f64 = 1e-5;

/// Standard deviation for projection and feed-forward weight
/// initialization.
const INIT_STD: f64 = 0.02;

/// Attention direction: `Causal` forbids looking at later positions,
/// `Masked` allows full attention among valid positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Causal,
    Masked,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "causal" => Ok(Mode::Causal),
            "masked" => Ok(Mode::Masked),
            other => Err(Error::Config(format!(
                "unknown mode '{other}' (expected 'causal' or 'masked')"
            ))),
        }
    }
}

/// Architecture hyperparameters. The defaults describe the toy model used
/// throughout the experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_e: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub mode: Mode,
    /// Token id standing in for the cloze blank; scored in masked mode.
    pub mask_token_id: u32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_e: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_len: 64,
            mode: Mode::Masked,
            mask_token_id: crate::tasks::MASK,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0
            || self.d_e == 0
            || self.n_heads == 0
            || self.d_ff == 0
            || self.max_len == 0
        {
            return Err(Error::Config(
                "model dimensions must all be positive".into(),
            ));
        }
        if self.d_e % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_e={} not divisible by n_heads={}",
                self.d_e, self.n_heads
            )));
        }
        if (self.mask_token_id as usize) >= self.vocab_size {
            return Err(Error::Vocabulary {
                id: self.mask_token_id,
                vocab_size: self.vocab_size,
            });
        }
        Ok(())
    }
}

/// One transformer block's parameters.
///
/// The key projection carries no bias: a key bias shifts every attention
/// score of a given query by the same amount, which row softmax removes,
/// so the network function would be exactly independent of it. Leaving
/// it out keeps every parameter trainable and gradient-checkable.
#[derive(Debug, Clone)]
struct Layer {
    ln1_g: Tensor,
    ln1_b: Tensor,
    w_q: Tensor,
    b_q: Tensor,
    w_k: Tensor,
    w_v: Tensor,
    b_v: Tensor,
    w_o: Tensor,
    b_o: Tensor,
    ln2_g: Tensor,
    ln2_b: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

/// Per-block parameter names in the canonical ordering.
const LAYER_FIELDS: [&str; 15] = [
    "ln1_g", "ln1_b", "w_q", "b_q", "w_k", "w_v", "b_v", "w_o", "b_o", "ln2_g", "ln2_b", "w1",
    "b1", "w2", "b2",
];

/// The language model: embeddings plus a stack of pre-norm blocks with a
/// final normalization and an output projection tied to the token table.
#[derive(Debug, Clone)]
pub struct TransformerLM {
    config: ModelConfig,
    tok_emb: Tensor,
    pos_emb: Tensor,
    layers: Vec<Layer>,
    ln_f_g: Tensor,
    ln_f_b: Tensor,
}

/// Tape handles for the model's parameters within one computation graph,
/// in the same order as [`TransformerLM::parameters`].
#[derive(Debug, Clone)]
pub struct LmVars {
    pub tok_emb: VarId,
    pub pos_emb: VarId,
    layers: Vec<Vec<VarId>>,
    ln_f_g: VarId,
    ln_f_b: VarId,
}

impl LmVars {
    /// All parameter handles, ordered exactly like `parameters()`.
    pub fn ordered(&self) -> Vec<VarId> {
        let mut out = vec![self.tok_emb, self.pos_emb];
        for layer in &self.layers {
            out.extend_from_slice(layer);
        }
        out.push(self.ln_f_g);
        out.push(self.ln_f_b);
        out
    }
}

/// Everything a forward pass yields: per-position logits plus the
/// per-layer, per-head attention matrices for analysis exports.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: VarId,
    /// `attentions[layer][head]` is the `T x T` attention-weight matrix.
    pub attentions: Vec<Vec<VarId>>,
}

impl TransformerLM {
    /// Fresh model with Xavier-style Gaussian(0, 1/d_e) embedding tables,
    /// Gaussian(0, 0.02) weights, unit layer-norm gains, and zero biases,
    /// deterministic under `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_e;
        // Embeddings scale with width so token geometry (and everything
        // derived from it, e.g. embedding-sampled prompts) has unit-order
        // norms; the projections they feed all sit behind layer norms.
        let emb_std = 1.0 / (d as f64).sqrt();
        let tok_emb = Tensor::randn(vec![config.vocab_size, d], emb_std, &mut rng)?;
        let pos_emb = Tensor::randn(vec![config.max_len, d], emb_std, &mut rng)?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(Layer {
                ln1_g: Tensor::full(vec![d], 1.0)?,
                ln1_b: Tensor::zeros(vec![d])?,
                w_q: Tensor::randn(vec![d, d], INIT_STD, &mut rng)?,
                b_q: Tensor::zeros(vec![d])?,
                w_k: Tensor::randn(vec![d, d], INIT_STD, &mut rng)?,
                w_v: Tensor::randn(vec![d, d], INIT_STD, &mut rng)?,
                b_v: Tensor::zeros(vec![d])?,
                w_o: Tensor::randn(vec![d, d], INIT_STD, &mut rng)?,
                b_o: Tensor::zeros(vec![d])?,
                ln2_g: Tensor::full(vec![d], 1.0)?,
                ln2_b: Tensor::zeros(vec![d])?,
                w1: Tensor::randn(vec![d, config.d_ff], INIT_STD, &mut rng)?,
                b1: Tensor::zeros(vec![config.d_ff])?,
                w2: Tensor::randn(vec![config.d_ff, d], INIT_STD, &mut rng)?,
                b2: Tensor::zeros(vec![d])?,
            });
        }
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            layers,
            ln_f_g: Tensor::full(vec![d], 1.0)?,
            ln_f_b: Tensor::zeros(vec![d])?,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Total number of scalar parameters implied by a config, as a pure
    /// function (no model needed).
    pub fn param_count(config: &ModelConfig) -> usize {
        let d = config.d_e;
        let per_layer = 2 * d            // first layer norm
            + 4 * d * d + 3 * d          // q, k, v, o projections; biases on q, v, o
            + 2 * d                      // second layer norm
            + (d * config.d_ff + config.d_ff) // ffn in
            + (config.d_ff * d + d); // ffn out
        config.vocab_size * d            // token table (also the output head)
            + config.max_len * d         // positions
            + config.n_layers * per_layer
            + 2 * d // final layer norm
    }

    /// Named views of every parameter, in a fixed canonical order shared
    /// with [`TransformerLM::parameters_mut`] and [`LmVars::ordered`].
    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let fields: [&Tensor; 15] = [
                &l.ln1_g, &l.ln1_b, &l.w_q, &l.b_q, &l.w_k, &l.w_v, &l.b_v, &l.w_o, &l.b_o,
                &l.ln2_g, &l.ln2_b, &l.w1, &l.b1, &l.w2, &l.b2,
            ];
            for (name, t) in LAYER_FIELDS.iter().zip(fields) {
                out.push((format!("layer{i}.{name}"), t));
            }
        }
        out.push(("ln_f_g".into(), &self.ln_f_g));
        out.push(("ln_f_b".into(), &self.ln_f_b));
        out
    }

    /// Mutable counterpart of [`TransformerLM::parameters`], same order.
    pub fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("tok_emb".into(), &mut self.tok_emb),
            ("pos_emb".into(), &mut self.pos_emb),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let fields: [&mut Tensor; 15] = [
                &mut l.ln1_g,
                &mut l.ln1_b,
                &mut l.w_q,
                &mut l.b_q,
                &mut l.w_k,
                &mut l.w_v,
                &mut l.b_v,
                &mut l.w_o,
                &mut l.b_o,
                &mut l.ln2_g,
                &mut l.ln2_b,
                &mut l.w1,
                &mut l.b1,
                &mut l.w2,
                &mut l.b2,
            ];
            for (name, t) in LAYER_FIELDS.iter().zip(fields) {
                out.push((format!("layer{i}.{name}"), t));
            }
        }
        out.push(("ln_f_g".into(), &mut self.ln_f_g));
        out.push(("ln_f_b".into(), &mut self.ln_f_b));
        out
    }

    /// Places every parameter on the tape as a leaf.
    pub fn register(&self, tape: &mut Tape) -> LmVars {
        LmVars {
            tok_emb: tape.leaf(self.tok_emb.clone()),
            pos_emb: tape.leaf(self.pos_emb.clone()),
            layers: self
                .layers
                .iter()
                .map(|l| {
                    [
                        &l.ln1_g, &l.ln1_b, &l.w_q, &l.b_q, &l.w_k, &l.w_v, &l.b_v, &l.w_o,
                        &l.b_o, &l.ln2_g, &l.ln2_b, &l.w1, &l.b1, &l.w2, &l.b2,
                    ]
                    .into_iter()
                    .map(|t| tape.leaf(t.clone()))
                    .collect()
                })
                .collect(),
            ln_f_g: tape.leaf(self.ln_f_g.clone()),
            ln_f_b: tape.leaf(self.ln_f_b.clone()),
        }
    }

    /// Token-embedding lookup: one row per id, *without* positional
    /// embeddings (positions are added inside [`TransformerLM::forward`]
    /// after any prompt rows are prepended).
    pub fn embed(&self, tape: &mut Tape, vars: &LmVars, tokens: &[u32]) -> Result<VarId> {
        if tokens.len() > self.config.max_len {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max_len: self.config.max_len,
            });
        }
        tape.embed_lookup(vars.tok_emb, tokens)
    }

    /// Runs the transformer over a `T x d_e` embedding matrix.
    ///
    /// `valid[t]` marks position `t` as attendable (padding positions are
    /// false; prompt rows must be passed as true). Causal mode further
    /// restricts attention to positions `<= t`. Logits cover every
    /// position against the tied token table.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &LmVars,
        inputs_embeds: VarId,
        valid: &[bool],
    ) -> Result<ForwardOutput> {
        let t_len = tape.value(inputs_embeds).shape()[0];
        let d = self.config.d_e;
        if tape.value(inputs_embeds).shape() != [t_len, d] {
            return Err(Error::InvalidShape(format!(
                "forward expects [T x {d}] embeddings, got {:?}",
                tape.value(inputs_embeds).shape()
            )));
        }
        if t_len > self.config.max_len {
            return Err(Error::SequenceTooLong {
                len: t_len,
                max_len: self.config.max_len,
            });
        }
        if valid.len() != t_len {
            return Err(Error::InvalidShape(format!(
                "validity mask covers {} positions for a length-{t_len} input",
                valid.len()
            )));
        }

        let positions = tape.gather_rows(vars.pos_emb, (0..t_len).collect())?;
        let mut h = tape.add(inputs_embeds, positions)?;

        let n_heads = self.config.n_heads;
        let d_head = d / n_heads;
        let scale = 1.0 / (d_head as f64).sqrt();
        let allowed = attention_mask(self.config.mode, valid);

        let mut attentions = Vec::with_capacity(self.layers.len());
        for layer in &vars.layers {
            let [ln1_g, ln1_b, w_q, b_q, w_k, w_v, b_v, w_o, b_o, ln2_g, ln2_b, w1, b1, w2, b2]: [VarId; 15] =
                layer.as_slice().try_into().expect("15 tensors per layer");

            let a_in = tape.layer_norm(h, ln1_g, ln1_b, LN_EPS)?;
            let q = tape.matmul(a_in, w_q)?;
            let q = tape.add_bias(q, b_q)?;
            let k = tape.matmul(a_in, w_k)?;
            let v = tape.matmul(a_in, w_v)?;
            let v = tape.add_bias(v, b_v)?;

            let mut head_ctx: Option<VarId> = None;
            let mut head_attn = Vec::with_capacity(n_heads);
            for head in 0..n_heads {
                let cols: Vec<usize> = (head * d_head..(head + 1) * d_head).collect();
                let q_h = tape.gather_cols(q, cols.clone())?;
                let k_h = tape.gather_cols(k, cols.clone())?;
                let v_h = tape.gather_cols(v, cols)?;
                let scores = tape.matmul_nt(q_h, k_h)?;
                let scores = tape.scale(scores, scale);
                let attn = tape.masked_row_softmax(scores, allowed.clone())?;
                head_attn.push(attn);
                let ctx = tape.matmul(attn, v_h)?;
                head_ctx = Some(match head_ctx {
                    None => ctx,
                    Some(prev) => tape.concat_cols(prev, ctx)?,
                });
            }
            attentions.push(head_attn);
            let ctx = head_ctx.expect("at least one head");
            let proj = tape.matmul(ctx, w_o)?;
            let proj = tape.add_bias(proj, b_o)?;
            h = tape.add(h, proj)?;

            let f_in = tape.layer_norm(h, ln2_g, ln2_b, LN_EPS)?;
            let ff = tape.matmul(f_in, w1)?;
            let ff = tape.add_bias(ff, b1)?;
            let ff = tape.gelu(ff);
            let ff = tape.matmul(ff, w2)?;
            let ff = tape.add_bias(ff, b2)?;
            h = tape.add(h, ff)?;
        }

        // A zero-layer stack stays in embedding space so the closed form
        // (embeddings + positions) * E^T holds exactly.
        if !self.layers.is_empty() {
            h = tape.layer_norm(h, vars.ln_f_g, vars.ln_f_b, LN_EPS)?;
        }
        let logits = tape.matmul_nt(h, vars.tok_emb)?;
        Ok(ForwardOutput { logits, attentions })
    }

    /// Gathers the logits rows at the given positions, in the given order
    /// (the mask/answer positions to score).
    pub fn mask_logits(tape: &mut Tape, logits: VarId, positions: &[usize]) -> Result<VarId> {
        tape.gather_rows(logits, positions.to_vec())
    }
}

/// Row-major `T x T` attention permission matrix: entry `(t, u)` is true
/// when position `t` may attend to position `u`.
fn attention_mask(mode: Mode, valid: &[bool]) -> Vec<bool> {
    let t_len = valid.len();
    let mut allowed = vec![false; t_len * t_len];
    for t in 0..t_len {
        for u in 0..t_len {
            allowed[t * t_len + u] = valid[u] && (mode == Mode::Masked || u <= t);
        }
    }
    allowed
}
