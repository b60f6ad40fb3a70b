//! Transformer decoder with a copy mechanism over the source tokens.
//!
//! The source memory is the context's token states followed by the selected
//! knowledge sentence's token states, each tagged with a segment embedding.
//! At every position the output distribution mixes a vocabulary softmax with
//! a copy distribution over source positions scattered onto their token ids:
//!
//! ```text
//! p_copy = softmax(q Kᵀ)           q = h W_qᵀ, K = M W_kᵀ, V = M W_vᵀ
//! α      = σ(w_copy · (p_copy V) + b_copy)
//! p      = (1 − α) p_gen + α scatter(p_copy)
//! ```

pub use crate::nn::scatter_copy;

use crate::corpus::{TokenId, BOS, EOS};
use crate::error::{invalid, Result};
use crate::nn::{
    argmax_masked, causal_mask, feed_forward, layer_norm, linear, multi_head_attention,
    sinusoidal_positions, FeedForwardParams, LayerNormParams, MhaParams, ParamId, ParamStore, Rng,
    Scalar, Tape, Var,
};

#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub ln_self: LayerNormParams,
    pub self_attn: MhaParams,
    pub ln_cross: LayerNormParams,
    pub cross_attn: MhaParams,
    pub ln_ff: LayerNormParams,
    pub ff: FeedForwardParams,
}

#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub d_model: usize,
    pub vocab_size: usize,
    /// Token embedding table shared with the encoder, `[V × d]`.
    pub embed: ParamId,
    /// `[2 × d]`: row 0 tags context positions, row 1 knowledge positions.
    pub segment: ParamId,
    pub blocks: Vec<DecoderBlock>,
    pub ln_out: LayerNormParams,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    /// `[V × d]`
    pub w_out: ParamId,
    pub b_out: ParamId,
    /// `[1 × d]`
    pub w_copy: ParamId,
    pub b_copy: ParamId,
}

impl DecoderParams {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        embed: ParamId,
        vocab_size: usize,
        d_model: usize,
        layers: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut blocks = Vec::with_capacity(layers);
        for i in 0..layers {
            let pre = format!("decoder.block{i}");
            blocks.push(DecoderBlock {
                ln_self: LayerNormParams::new(store, &format!("{pre}.ln_self"), d_model)?,
                self_attn: MhaParams::new(store, &format!("{pre}.self_attn"), d_model, heads, rng)?,
                ln_cross: LayerNormParams::new(store, &format!("{pre}.ln_cross"), d_model)?,
                cross_attn: MhaParams::new(store, &format!("{pre}.cross_attn"), d_model, heads, rng)?,
                ln_ff: LayerNormParams::new(store, &format!("{pre}.ln_ff"), d_model)?,
                ff: FeedForwardParams::new(store, &format!("{pre}.ff"), d_model, 4 * d_model, rng)?,
            });
        }
        Ok(DecoderParams {
            d_model,
            vocab_size,
            embed,
            segment: store.add_xavier("decoder.segment", 2, d_model, rng)?,
            blocks,
            ln_out: LayerNormParams::new(store, "decoder.ln_out", d_model)?,
            w_q: store.add_xavier("decoder.copy.w_q", d_model, d_model, rng)?,
            w_k: store.add_xavier("decoder.copy.w_k", d_model, d_model, rng)?,
            w_v: store.add_xavier("decoder.copy.w_v", d_model, d_model, rng)?,
            w_out: store.add_xavier("decoder.w_out", vocab_size, d_model, rng)?,
            b_out: store.add_zeros("decoder.b_out", &[vocab_size])?,
            w_copy: store.add_xavier("decoder.copy.w_gate", 1, d_model, rng)?,
            b_copy: store.add_zeros("decoder.copy.b_gate", &[1])?,
        })
    }
}

/// Concatenated context and knowledge token states with their token ids.
#[derive(Debug, Clone)]
pub struct SourceMemory {
    /// `[S × d]`, segment embeddings included.
    pub states: Var,
    pub ids: Vec<TokenId>,
    pub context_len: usize,
}

impl SourceMemory {
    pub fn new<F: Scalar>(
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        p: &DecoderParams,
        context: (Var, &[TokenId]),
        knowledge: (Var, &[TokenId]),
    ) -> Result<Self> {
        let (hx, x_ids) = context;
        let (hk, k_ids) = knowledge;
        if tape.dims(hx) != (x_ids.len(), p.d_model) || tape.dims(hk) != (k_ids.len(), p.d_model) {
            return Err(invalid!(
                "source states {:?}/{:?} do not match {} context and {} knowledge tokens",
                tape.shape(hx),
                tape.shape(hk),
                x_ids.len(),
                k_ids.len()
            ));
        }
        if x_ids.is_empty() && k_ids.is_empty() {
            return Err(invalid!("empty source memory"));
        }
        let seg = tape.param(store, p.segment);
        let mut segs = vec![0usize; x_ids.len()];
        segs.resize(x_ids.len() + k_ids.len(), 1);
        let seg_rows = tape.gather_rows(seg, &segs);
        let parts: Vec<Var> = [(hx, x_ids.len()), (hk, k_ids.len())]
            .iter()
            .filter(|(_, n)| *n > 0)
            .map(|(v, _)| *v)
            .collect();
        let cat = if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat_rows(&parts)
        };
        let states = tape.add(cat, seg_rows);
        let mut ids = x_ids.to_vec();
        ids.extend_from_slice(k_ids);
        Ok(SourceMemory {
            states,
            ids,
            context_len: x_ids.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Outputs for every position of a teacher-forced input, rows aligned with
/// input positions.
#[derive(Debug, Clone, Copy)]
pub struct DecoderOutput {
    pub hidden: Var,
    /// `[N × V]`
    pub p_gen: Var,
    /// `[N × S]`
    pub p_copy: Var,
    /// `[N × 1]`
    pub alpha: Var,
    /// `[N × V]`
    pub p_mixed: Var,
}

/// Run the decoder over `inputs` (which start with BOS) attending to `memory`.
pub fn decode<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    p: &DecoderParams,
    memory: &SourceMemory,
    inputs: &[TokenId],
) -> Result<DecoderOutput> {
    if memory.is_empty() {
        return Err(invalid!("empty source memory"));
    }
    if inputs.first() != Some(&BOS) {
        return Err(invalid!("decoder input must start with BOS"));
    }
    if let Some(&t) = inputs.iter().find(|&&t| t as usize >= p.vocab_size) {
        return Err(invalid!("token id {t} outside vocabulary of {}", p.vocab_size));
    }
    let n = inputs.len();
    let d = p.d_model;
    let embed = tape.param(store, p.embed);
    let ids: Vec<usize> = inputs.iter().map(|&t| t as usize).collect();
    let x = tape.gather_rows(embed, &ids);
    let x = tape.scale(x, F::lit((d as f64).sqrt()));
    let pos = tape.constant(sinusoidal_positions(n, d));
    let mut h = tape.add(x, pos);
    let causal = causal_mask(n);
    for b in &p.blocks {
        let a = layer_norm(tape, store, &b.ln_self, h);
        let a = multi_head_attention(tape, store, &b.self_attn, a, a, Some(&causal))?;
        h = tape.add(h, a);
        let c = layer_norm(tape, store, &b.ln_cross, h);
        let c = multi_head_attention(tape, store, &b.cross_attn, c, memory.states, None)?;
        h = tape.add(h, c);
        let f = layer_norm(tape, store, &b.ln_ff, h);
        let f = feed_forward(tape, store, &b.ff, f);
        h = tape.add(h, f);
    }
    let hidden = layer_norm(tape, store, &p.ln_out, h);

    let logits = linear(tape, store, p.w_out, Some(p.b_out), hidden);
    let p_gen = tape.softmax_rows(logits, None);

    let q = linear(tape, store, p.w_q, None, hidden);
    let k = linear(tape, store, p.w_k, None, memory.states);
    let v = linear(tape, store, p.w_v, None, memory.states);
    let scores = tape.matmul_t(q, k);
    let p_copy = tape.softmax_rows(scores, None);
    let ctx = tape.matmul(p_copy, v);
    let gate = linear(tape, store, p.w_copy, Some(p.b_copy), ctx);
    let alpha = tape.sigmoid(gate);

    let src: Vec<usize> = memory.ids.iter().map(|&t| t as usize).collect();
    let copied = tape.scatter_cols(p_copy, &src, p.vocab_size);
    let delta = tape.sub(copied, p_gen);
    let delta = tape.mul_col(delta, alpha);
    let p_mixed = tape.add(p_gen, delta);
    Ok(DecoderOutput {
        hidden,
        p_gen,
        p_copy,
        alpha,
        p_mixed,
    })
}

/// Distributions for the next token after `prefix`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeStepOutput {
    pub hidden: Vec<f64>,
    pub p_gen: Vec<f64>,
    pub p_copy_positions: Vec<f64>,
    pub alpha_copy: f64,
    pub p_mixed: Vec<f64>,
}

pub fn decode_step<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    p: &DecoderParams,
    memory: &SourceMemory,
    prefix: &[TokenId],
) -> Result<DecodeStepOutput> {
    let out = decode(tape, store, p, memory, prefix)?;
    let last = prefix.len() - 1;
    let row = |tape: &Tape<F>, v: Var| tape.value(v).row(last).iter().map(|x| x.as_f64()).collect();
    Ok(DecodeStepOutput {
        hidden: row(tape, out.hidden),
        p_gen: row(tape, out.p_gen),
        p_copy_positions: row(tape, out.p_copy),
        alpha_copy: tape.data(out.alpha)[last].as_f64(),
        p_mixed: row(tape, out.p_mixed),
    })
}

/// Teacher-forced per-token losses `[N+1]` for response `y` (EOS appended),
/// each a cross entropy of the mixed distribution against a target that puts
/// `1 − ε` on the gold token and spreads `ε` over the rest of the vocabulary.
pub fn sequence_nll<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    p: &DecoderParams,
    memory: &SourceMemory,
    y: &[TokenId],
    smoothing: f64,
) -> Result<Var> {
    if !(0.0..1.0).contains(&smoothing) {
        return Err(invalid!("smoothing {smoothing} outside [0, 1)"));
    }
    let mut inputs = Vec::with_capacity(y.len() + 1);
    inputs.push(BOS);
    inputs.extend_from_slice(y);
    let out = decode(tape, store, p, memory, &inputs)?;
    let v = p.vocab_size;
    let off = if v > 1 { smoothing / (v - 1) as f64 } else { 0.0 };
    let mut targets = vec![F::lit(off); inputs.len() * v];
    for (i, &t) in y.iter().chain(std::iter::once(&EOS)).enumerate() {
        targets[i * v + t as usize] = F::lit(1.0 - smoothing);
    }
    Ok(tape.cross_entropy_rows(out.p_mixed, targets))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    /// Tokens before EOS.
    pub tokens: Vec<TokenId>,
    /// True when `max_len` tokens were produced without EOS.
    pub truncated: bool,
}

/// Greedy decoding; ties go to the lowest token id.
pub fn generate<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    p: &DecoderParams,
    memory: &SourceMemory,
    max_len: usize,
) -> Result<Generation> {
    if max_len == 0 {
        return Err(invalid!("max_len must be at least 1"));
    }
    let mut prefix = vec![BOS];
    for _ in 0..max_len {
        let out = decode(tape, store, p, memory, &prefix)?;
        let next = argmax_masked(tape.value(out.p_mixed).row(prefix.len() - 1), None)
            .expect("vocabulary is nonempty") as TokenId;
        if next == EOS {
            return Ok(Generation {
                tokens: prefix[1..].to_vec(),
                truncated: false,
            });
        }
        prefix.push(next);
    }
    Ok(Generation {
        tokens: prefix[1..].to_vec(),
        truncated: true,
    })
}
