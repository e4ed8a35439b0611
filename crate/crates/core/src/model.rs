//! Tiny decoder-only transformer over a byte-level vocabulary.
//!
//! The parameter tree lives in a [`Checkpoint`]; this module defines the
//! tensor-name schema, initialization, the tape-based forward pass, masked
//! sequence loss, and greedy decoding. Pre-norm blocks, RMS normalization
//! with learned gains, no biases, learned absolute positions, SiLU MLP.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{structural_id_of, Checkpoint};
use crate::error::{Error, Result};
use crate::rng::{gaussian_fill, SeededRng};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Byte values 0..=255 are themselves tokens; specials sit above them.
pub const BYTE_VOCAB: usize = 256;
pub const BOS: usize = 256;
pub const EOS: usize = 257;
pub const PAD: usize = 258;
pub const SEP: usize = 259;
pub const VOCAB_SIZE: usize = 260;

/// Initialization scale for embeddings and projection weights.
pub const INIT_STD: f64 = 0.02;

pub const MODEL_CONFIG_KEY: &str = "model_config";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    #[serde(default = "default_n_layers")]
    pub n_layers: usize,
    #[serde(default = "default_n_heads")]
    pub n_heads: usize,
    #[serde(default = "default_d_ff")]
    pub d_ff: usize,
    #[serde(default = "default_max_seq_len")]
    pub max_seq_len: usize,
    /// Distinguishes toy model families that share a seed but must not share
    /// weights.
    #[serde(default)]
    pub family_seed: u64,
}

fn default_vocab() -> usize {
    VOCAB_SIZE
}
fn default_d_model() -> usize {
    64
}
fn default_n_layers() -> usize {
    2
}
fn default_n_heads() -> usize {
    2
}
fn default_d_ff() -> usize {
    256
}
fn default_max_seq_len() -> usize {
    128
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: VOCAB_SIZE,
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            d_ff: 256,
            max_seq_len: 128,
            family_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::argument(format!("{name} must be at least 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::argument(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Token sequence with a marked response span.
///
/// Training pairs take the shape `BOS prompt… SEP response… EOS` with the
/// response span covering the response bytes and the closing EOS; generation
/// prompts end at SEP with an empty span.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    tokens: Vec<usize>,
    response_start: usize,
}

impl TokenSeq {
    pub fn new(tokens: Vec<usize>, response_start: usize) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::argument("token sequence must be non-empty"));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= VOCAB_SIZE) {
            return Err(Error::Index(format!(
                "token {bad} out of range for vocab {VOCAB_SIZE}"
            )));
        }
        if response_start > tokens.len() {
            return Err(Error::argument(format!(
                "response_start {response_start} past end {}",
                tokens.len()
            )));
        }
        Ok(TokenSeq {
            tokens,
            response_start,
        })
    }

    /// `BOS prompt SEP response EOS` with the span over `response EOS`.
    pub fn from_pair(prompt: &[u8], response: &[u8]) -> Self {
        let mut tokens = Vec::with_capacity(prompt.len() + response.len() + 3);
        tokens.push(BOS);
        tokens.extend(prompt.iter().map(|&b| b as usize));
        tokens.push(SEP);
        let response_start = tokens.len();
        tokens.extend(response.iter().map(|&b| b as usize));
        tokens.push(EOS);
        TokenSeq {
            tokens,
            response_start,
        }
    }

    /// `BOS prompt SEP` with an empty response span; decoding starts here.
    pub fn prompt_only(prompt: &[u8]) -> Self {
        let mut tokens = Vec::with_capacity(prompt.len() + 2);
        tokens.push(BOS);
        tokens.extend(prompt.iter().map(|&b| b as usize));
        tokens.push(SEP);
        let response_start = tokens.len();
        TokenSeq {
            tokens,
            response_start,
        }
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn response_start(&self) -> usize {
        self.response_start
    }

    /// Tokens inside the response span.
    pub fn response(&self) -> &[usize] {
        &self.tokens[self.response_start..]
    }

    /// Next-token view: inputs, shifted targets, and the span mask that
    /// keeps only positions whose target falls in the response span.
    pub fn shifted(&self) -> Result<(Vec<usize>, Vec<usize>, Vec<bool>)> {
        if self.response_start >= self.tokens.len() {
            return Err(Error::DegenerateBatch(
                "training sample has an empty response span".into(),
            ));
        }
        let n = self.tokens.len();
        let inputs = self.tokens[..n - 1].to_vec();
        let targets = self.tokens[1..].to_vec();
        let mask = (1..n).map(|i| i >= self.response_start).collect();
        Ok((inputs, targets, mask))
    }
}

/// Tensor-name schema implied by a config: name → shape.
pub fn expected_schema(cfg: &ModelConfig) -> BTreeMap<String, Vec<usize>> {
    let (v, d, ff) = (cfg.vocab_size, cfg.d_model, cfg.d_ff);
    let mut schema = BTreeMap::new();
    schema.insert("tok_embedding".into(), vec![v, d]);
    schema.insert("pos_embedding".into(), vec![cfg.max_seq_len, d]);
    for l in 0..cfg.n_layers {
        schema.insert(format!("layers.{l}.attn_norm.gain"), vec![d]);
        for proj in ["wq", "wk", "wv", "wo"] {
            schema.insert(format!("layers.{l}.attn.{proj}"), vec![d, d]);
        }
        schema.insert(format!("layers.{l}.mlp_norm.gain"), vec![d]);
        schema.insert(format!("layers.{l}.mlp.w_up"), vec![ff, d]);
        schema.insert(format!("layers.{l}.mlp.w_down"), vec![d, ff]);
    }
    schema.insert("final_norm.gain".into(), vec![d]);
    schema.insert("lm_head".into(), vec![v, d]);
    schema
}

/// The arch id a checkpoint initialized from this config will carry.
pub fn schema_arch_id(cfg: &ModelConfig) -> String {
    let schema = expected_schema(cfg);
    structural_id_of(schema.iter().map(|(n, s)| (n.as_str(), s.as_slice())))
}

/// Verifies that a checkpoint structurally matches a config.
pub fn check_arch(ckpt: &Checkpoint, cfg: &ModelConfig) -> Result<()> {
    let want = schema_arch_id(cfg);
    let got = ckpt.arch_id();
    if want != got {
        return Err(Error::homology(format!(
            "checkpoint arch {got} does not match config arch {want}"
        )));
    }
    Ok(())
}

/// Fresh checkpoint with the documented schema. Projection weights and
/// embeddings are N(0, 0.02²); norm gains start at one. Draws are derived
/// per tensor name, so the result does not depend on iteration order.
pub fn init_model(cfg: &ModelConfig, rng: &SeededRng) -> Result<Checkpoint> {
    cfg.validate()?;
    let rng = rng.derive(&format!("init/family/{}", cfg.family_seed));
    let mut ckpt = Checkpoint::new();
    for (name, shape) in expected_schema(cfg) {
        let tensor = if name.ends_with(".gain") {
            Tensor::filled(shape, 1.0)?
        } else {
            let mut trng = rng.derive(&name);
            gaussian_fill(&shape, &mut trng, INIT_STD)?
        };
        ckpt.insert(name, tensor);
    }
    ckpt.stamp_arch_id();
    ckpt.set_metadata("format_version", crate::FORMAT_VERSION);
    ckpt.set_metadata(
        MODEL_CONFIG_KEY,
        serde_json::to_string(cfg).expect("config serializes"),
    );
    Ok(ckpt)
}

/// Reads the config a checkpoint was initialized with, if recorded.
pub fn embedded_config(ckpt: &Checkpoint) -> Option<ModelConfig> {
    ckpt.metadata_value(MODEL_CONFIG_KEY)
        .and_then(|s| serde_json::from_str(s).ok())
}

/// Casts checkpoint tensors into the working scalar type.
pub fn params_from_checkpoint<S: Scalar>(ckpt: &Checkpoint) -> BTreeMap<String, Tensor<S>> {
    ckpt.tensors()
        .map(|(n, t)| (n.clone(), t.cast::<S>()))
        .collect()
}

/// Model parameters bound onto a tape as leaves.
pub struct BoundModel {
    vars: BTreeMap<String, Var>,
}

impl BoundModel {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::shape(format!("model has no tensor `{name}`")))
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, Var)> {
        self.vars.iter().map(|(n, &v)| (n, v))
    }
}

/// Low-rank pairs attached to named linear layers for one forward pass.
/// `pairs[name] = (a, b)` with `a: [out, r]`, `b: [in, r]`; the attached
/// layer computes `x·Wᵀ + scale·(x·b)·aᵀ`.
pub struct LoraBinding<S: Scalar> {
    pub pairs: BTreeMap<String, (Var, Var)>,
    pub scale: S,
}

pub fn bind_params<S: Scalar>(
    tape: &mut Tape<S>,
    params: &BTreeMap<String, Tensor<S>>,
    trainable: impl Fn(&str) -> bool,
) -> BoundModel {
    let vars = params
        .iter()
        .map(|(name, tensor)| (name.clone(), tape.leaf(tensor.clone(), trainable(name))))
        .collect();
    BoundModel { vars }
}

fn linear<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &BoundModel,
    lora: Option<&LoraBinding<S>>,
    x: Var,
    name: &str,
) -> Result<Var> {
    let w = bound.var(name)?;
    let mut y = tape.matmul_nt(x, w)?;
    if let Some(binding) = lora {
        if let Some(&(a, b)) = binding.pairs.get(name) {
            let xb = tape.matmul(x, b)?;
            let xba = tape.matmul_nt(xb, a)?;
            let scaled = tape.scale(xba, binding.scale);
            y = tape.add(y, scaled)?;
        }
    }
    Ok(y)
}

/// Full forward pass over already-bound parameters; returns the `[T, V]`
/// logits node. The same tape may serve several calls (greedy decoding).
pub fn forward_tokens<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &BoundModel,
    cfg: &ModelConfig,
    tokens: &[usize],
    lora: Option<&LoraBinding<S>>,
) -> Result<Var> {
    let t = tokens.len();
    if t == 0 {
        return Err(Error::argument("forward needs at least one token"));
    }
    if t > cfg.max_seq_len {
        return Err(Error::Length(format!(
            "sequence length {t} exceeds max_seq_len {}",
            cfg.max_seq_len
        )));
    }
    let d_h = cfg.head_dim();
    let tok = tape.gather_rows(bound.var("tok_embedding")?, tokens)?;
    let positions: Vec<usize> = (0..t).collect();
    let pos = tape.gather_rows(bound.var("pos_embedding")?, &positions)?;
    let mut h = tape.add(tok, pos)?;
    let score_scale = S::from_f64(1.0 / (d_h as f64).sqrt());
    for l in 0..cfg.n_layers {
        let name = |suffix: &str| format!("layers.{l}.{suffix}");
        let normed = tape.rms_norm(h, bound.var(&name("attn_norm.gain"))?)?;
        let q = linear(tape, bound, lora, normed, &name("attn.wq"))?;
        let k = linear(tape, bound, lora, normed, &name("attn.wk"))?;
        let v = linear(tape, bound, lora, normed, &name("attn.wv"))?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for head in 0..cfg.n_heads {
            let qs = tape.slice_cols(q, head * d_h, d_h)?;
            let ks = tape.slice_cols(k, head * d_h, d_h)?;
            let vs = tape.slice_cols(v, head * d_h, d_h)?;
            let scores = tape.matmul_nt(qs, ks)?;
            let scaled = tape.scale(scores, score_scale);
            let probs = tape.causal_softmax(scaled)?;
            heads.push(tape.matmul(probs, vs)?);
        }
        let merged = tape.concat_cols(&heads)?;
        let projected = linear(tape, bound, lora, merged, &name("attn.wo"))?;
        h = tape.add(h, projected)?;
        let normed = tape.rms_norm(h, bound.var(&name("mlp_norm.gain"))?)?;
        let up = linear(tape, bound, lora, normed, &name("mlp.w_up"))?;
        let act = tape.silu(up);
        let down = linear(tape, bound, lora, act, &name("mlp.w_down"))?;
        h = tape.add(h, down)?;
    }
    let fin = tape.rms_norm(h, bound.var("final_norm.gain")?)?;
    linear(tape, bound, lora, fin, "lm_head")
}

/// Logits for every position of `seq` as given (no shift).
pub fn forward(ckpt: &Checkpoint, cfg: &ModelConfig, seq: &TokenSeq) -> Result<Tensor<f32>> {
    check_arch(ckpt, cfg)?;
    let params = params_from_checkpoint::<f32>(ckpt);
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, &params, |_| false);
    let logits = forward_tokens(&mut tape, &bound, cfg, seq.tokens(), None)?;
    Ok(tape.value(logits).clone())
}

/// NLL sum and unmasked count for one sequence (evaluation path).
pub fn seq_nll_sum<S: Scalar>(
    params: &BTreeMap<String, Tensor<S>>,
    cfg: &ModelConfig,
    seq: &TokenSeq,
) -> Result<(S, usize)> {
    let (inputs, targets, mask) = seq.shifted()?;
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, params, |_| false);
    let logits = forward_tokens(&mut tape, &bound, cfg, &inputs, None)?;
    let (loss, count) = tape.cross_entropy_sum(logits, &targets, &mask)?;
    Ok((tape.value(loss).data()[0], count))
}

/// Mean cross-entropy over response-span positions across the batch.
/// Sequences evaluate in parallel; the reduction runs in batch order.
pub fn seq_loss(ckpt: &Checkpoint, cfg: &ModelConfig, batch: &[TokenSeq]) -> Result<f64> {
    check_arch(ckpt, cfg)?;
    if batch.is_empty() {
        return Err(Error::DegenerateBatch("seq_loss over an empty batch".into()));
    }
    let params = params_from_checkpoint::<f32>(ckpt);
    let per_seq: Vec<Result<(f64, usize)>> = batch
        .par_iter()
        .map(|seq| {
            let (sum, count) = seq_nll_sum(&params, cfg, seq)?;
            Ok((sum.to_f64_lossy(), count))
        })
        .collect();
    let mut total = 0.0;
    let mut count = 0usize;
    for r in per_seq {
        let (s, c) = r?;
        total += s;
        count += c;
    }
    Ok(total / count as f64)
}

/// First index holding the maximum value; the strict comparison makes ties
/// resolve toward the lowest token index.
pub fn argmax_lowest(row: &[f32]) -> usize {
    let mut best = f32::NEG_INFINITY;
    let mut idx = 0usize;
    for (i, &v) in row.iter().enumerate() {
        if v > best {
            best = v;
            idx = i;
        }
    }
    idx
}

/// Greedy decoding driven by a caller-supplied last-position logits
/// function; keeps the decode rules (argmax, EOS stop, length budget) in
/// one place for plain and adapter-attached models alike.
pub fn decode_greedy_with(
    cfg: &ModelConfig,
    prompt: &TokenSeq,
    max_new: usize,
    mut last_logits: impl FnMut(&[usize]) -> Result<Vec<f32>>,
) -> Result<TokenSeq> {
    let n0 = prompt.len();
    if n0 + max_new > cfg.max_seq_len {
        return Err(Error::Length(format!(
            "prompt {n0} + max_new {max_new} exceeds max_seq_len {}",
            cfg.max_seq_len
        )));
    }
    let mut tokens = prompt.tokens().to_vec();
    for _ in 0..max_new {
        let row = last_logits(&tokens)?;
        let next = argmax_lowest(&row);
        if next == EOS {
            break;
        }
        tokens.push(next);
    }
    TokenSeq::new(tokens, n0)
}

/// Greedy continuation of `prompt` by up to `max_new` tokens; stops early at
/// EOS (not emitted). The continuation is the returned response span.
pub fn generate_greedy(
    ckpt: &Checkpoint,
    cfg: &ModelConfig,
    prompt: &TokenSeq,
    max_new: usize,
) -> Result<TokenSeq> {
    check_arch(ckpt, cfg)?;
    let params = params_from_checkpoint::<f32>(ckpt);
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, &params, |_| false);
    decode_greedy_with(cfg, prompt, max_new, |tokens| {
        let logits = forward_tokens(&mut tape, &bound, cfg, tokens, None)?;
        let lv = tape.value(logits);
        Ok(lv.row(lv.nrows() - 1).to_vec())
    })
}
