//! Sentence encoding with masked mean pooling, and the dialogue-level GRU.

use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, PAD};
use crate::error::{invalid, shape_err, Result};
use crate::nn::{
    feed_forward, gru_cell_step, layer_norm, multi_head_attention, sinusoidal_positions,
    FeedForwardParams, GruParams, LayerNormParams, MhaParams, ParamId, ParamStore, Rng, Scalar,
    Tape, Tensor, Var,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SentenceEncoderKind {
    BiGru,
    SelfAttention,
}

#[derive(Debug, Clone)]
pub struct AttentionLayer {
    pub ln_attn: LayerNormParams,
    pub attn: MhaParams,
    pub ln_ff: LayerNormParams,
    pub ff: FeedForwardParams,
}

#[derive(Debug, Clone)]
pub enum SentenceEncoderParams {
    /// Forward and backward GRUs with `d_model / 2` hidden units each.
    BiGru { fwd: GruParams, bwd: GruParams },
    /// Pre-norm self-attention stack over embeddings plus positions.
    SelfAttention {
        layers: Vec<AttentionLayer>,
        ln_out: LayerNormParams,
    },
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub d_model: usize,
    pub vocab_size: usize,
    /// `[V × d_model]`, shared with the decoder input.
    pub embed: ParamId,
    pub sentence: SentenceEncoderParams,
    /// Input `2·d_model`, hidden `d_model`.
    pub dialog: GruParams,
}

impl EncoderParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        vocab_size: usize,
        d_model: usize,
        kind: SentenceEncoderKind,
        layers: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if d_model < 2 || d_model % 2 != 0 {
            return Err(invalid!("d_model must be even and positive, got {d_model}"));
        }
        let embed = store.add_xavier("encoder.embed", vocab_size, d_model, rng)?;
        let sentence = match kind {
            SentenceEncoderKind::BiGru => SentenceEncoderParams::BiGru {
                fwd: GruParams::new(store, "encoder.fwd", d_model, d_model / 2, rng)?,
                bwd: GruParams::new(store, "encoder.bwd", d_model, d_model / 2, rng)?,
            },
            SentenceEncoderKind::SelfAttention => {
                let mut ls = Vec::with_capacity(layers);
                for i in 0..layers {
                    let pre = format!("encoder.layer{i}");
                    ls.push(AttentionLayer {
                        ln_attn: LayerNormParams::new(store, &format!("{pre}.ln_attn"), d_model)?,
                        attn: MhaParams::new(store, &format!("{pre}.attn"), d_model, heads, rng)?,
                        ln_ff: LayerNormParams::new(store, &format!("{pre}.ln_ff"), d_model)?,
                        ff: FeedForwardParams::new(
                            store,
                            &format!("{pre}.ff"),
                            d_model,
                            4 * d_model,
                            rng,
                        )?,
                    });
                }
                SentenceEncoderParams::SelfAttention {
                    layers: ls,
                    ln_out: LayerNormParams::new(store, "encoder.ln_out", d_model)?,
                }
            }
        };
        let dialog = GruParams::new(store, "encoder.dialog", 2 * d_model, d_model, rng)?;
        Ok(EncoderParams {
            d_model,
            vocab_size,
            embed,
            sentence,
            dialog,
        })
    }
}

/// Token states `[len × d]` and their mean `[1 × d]`.
#[derive(Debug, Clone, Copy)]
pub struct SentenceEncoding {
    pub states: Var,
    pub pooled: Var,
    pub len: usize,
}

/// Encodings of several sentences plus their pooled vectors stacked `[B × d]`.
#[derive(Debug, Clone)]
pub struct EncodedSentences {
    pub sentences: Vec<SentenceEncoding>,
    pub pooled: Var,
}

fn check_ids(seqs: &[&[TokenId]], vocab: usize) -> Result<()> {
    for (i, s) in seqs.iter().enumerate() {
        if s.iter().all(|&t| t == PAD) {
            return Err(invalid!("sentence {i} has no tokens after padding removal"));
        }
        if let Some(&t) = s.iter().find(|&&t| t as usize >= vocab) {
            return Err(invalid!("token id {t} outside vocabulary of {vocab}"));
        }
    }
    Ok(())
}

/// Mean of the rows of `states` (`len` rows).
fn mean_rows<F: Scalar>(tape: &mut Tape<F>, states: Var, len: usize) -> Var {
    let w = tape.constant(Tensor::new(vec![1, len], vec![F::lit(1.0 / len as f64); len]).unwrap());
    tape.matmul(w, states)
}

/// Encode a group of sentences together.
///
/// PAD tokens are dropped: each sentence contributes only its real tokens.
pub fn encode_sentences<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    p: &EncoderParams,
    seqs: &[&[TokenId]],
) -> Result<EncodedSentences> {
    check_ids(seqs, p.vocab_size)?;
    let cleaned: Vec<Vec<TokenId>> = seqs
        .iter()
        .map(|s| s.iter().copied().filter(|&t| t != PAD).collect())
        .collect();
    let states = match &p.sentence {
        SentenceEncoderParams::BiGru { fwd, bwd } => bigru_states(tape, store, p, fwd, bwd, &cleaned)?,
        SentenceEncoderParams::SelfAttention { layers, ln_out } => cleaned
            .iter()
            .map(|s| self_attention_states(tape, store, p, layers, ln_out, s))
            .collect::<Result<Vec<_>>>()?,
    };
    let mut sentences = Vec::with_capacity(states.len());
    for (h, s) in states.into_iter().zip(&cleaned) {
        let pooled = mean_rows(tape, h, s.len());
        sentences.push(SentenceEncoding {
            states: h,
            pooled,
            len: s.len(),
        });
    }
    let pooled_rows: Vec<Var> = sentences.iter().map(|s| s.pooled).collect();
    let pooled = if pooled_rows.len() == 1 {
        pooled_rows[0]
    } else {
        tape.concat_rows(&pooled_rows)
    };
    Ok(EncodedSentences { sentences, pooled })
}

pub fn encode_sentence<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    p: &EncoderParams,
    tokens: &[TokenId],
) -> Result<SentenceEncoding> {
    Ok(encode_sentences(tape, store, p, &[tokens])?.sentences[0])
}

/// Pooled embeddings of every pool sentence, sentinel included, as `[L × d]`.
pub fn encode_pool<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    p: &EncoderParams,
    pool: &[Vec<TokenId>],
) -> Result<EncodedSentences> {
    if pool.is_empty() {
        return Err(invalid!("empty knowledge pool"));
    }
    let refs: Vec<&[TokenId]> = pool.iter().map(Vec::as_slice).collect();
    encode_sentences(tape, store, p, &refs)
}

/// Run both directions over the padded batch, step by step, holding each
/// row's state fixed on padding so that pads never reach a real token.
fn bigru_states<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    p: &EncoderParams,
    fwd: &GruParams,
    bwd: &GruParams,
    seqs: &[Vec<TokenId>],
) -> Result<Vec<Var>> {
    let b = seqs.len();
    let width = seqs.iter().map(Vec::len).max().unwrap_or(0);
    let half = p.d_model / 2;
    let embed = tape.param(store, p.embed);
    let step_inputs: Vec<(Var, Vec<bool>)> = (0..width)
        .map(|t| {
            let ids: Vec<usize> = seqs.iter().map(|s| *s.get(t).unwrap_or(&PAD) as usize).collect();
            let mask = seqs.iter().map(|s| t < s.len()).collect();
            (tape.gather_rows(embed, &ids), mask)
        })
        .collect();

    let run = |tape: &mut Tape<F>, g: &GruParams, order: Vec<usize>| -> Result<Vec<Var>> {
        let mut h = tape.zeros(&[b, half]);
        let mut outs = vec![h; width];
        for t in order {
            let (x, mask) = &step_inputs[t];
            let all_real = mask.iter().all(|&m| m);
            let next = gru_cell_step(tape, store, g, *x, h)?;
            h = if all_real {
                next
            } else {
                tape.blend_rows(next, h, mask.clone())
            };
            outs[t] = h;
        }
        Ok(outs)
    };
    let fw = run(tape, fwd, (0..width).collect())?;
    let bw = run(tape, bwd, (0..width).rev().collect())?;
    let steps: Vec<Var> = fw
        .iter()
        .zip(&bw)
        .map(|(&f, &r)| tape.concat_cols(&[f, r]))
        .collect();
    let stacked = if steps.len() == 1 {
        steps[0]
    } else {
        tape.concat_rows(&steps)
    };
    Ok(seqs
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let rows: Vec<usize> = (0..s.len()).map(|t| t * b + i).collect();
            tape.gather_rows(stacked, &rows)
        })
        .collect())
}

fn self_attention_states<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    p: &EncoderParams,
    layers: &[AttentionLayer],
    ln_out: &LayerNormParams,
    seq: &[TokenId],
) -> Result<Var> {
    let embed = tape.param(store, p.embed);
    let ids: Vec<usize> = seq.iter().map(|&t| t as usize).collect();
    let x = tape.gather_rows(embed, &ids);
    let x = tape.scale(x, F::lit((p.d_model as f64).sqrt()));
    let pos = tape.constant(sinusoidal_positions(seq.len(), p.d_model));
    let mut h = tape.add(x, pos);
    for l in layers {
        let n = layer_norm(tape, store, &l.ln_attn, h);
        let a = multi_head_attention(tape, store, &l.attn, n, n, None)?;
        h = tape.add(h, a);
        let n = layer_norm(tape, store, &l.ln_ff, h);
        let f = feed_forward(tape, store, &l.ff, n);
        h = tape.add(h, f);
    }
    Ok(layer_norm(tape, store, ln_out, h))
}

/// Dialogue-level recurrent state.
#[derive(Debug, Clone, Copy)]
pub struct DialogState {
    pub dialog_summary: Var,
    /// Number of exchanges folded in so far.
    pub turn: usize,
}

impl DialogState {
    pub fn initial<F: Scalar>(tape: &mut Tape<F>, d_model: usize) -> Self {
        DialogState {
            dialog_summary: tape.zeros(&[1, d_model]),
            turn: 0,
        }
    }
}

/// Fold one exchange `[apprentice; response]` into the dialogue state.
pub fn dialog_step<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    p: &EncoderParams,
    state: DialogState,
    apprentice: Var,
    response: Var,
) -> Result<DialogState> {
    if tape.dims(apprentice) != (1, p.d_model) || tape.dims(response) != (1, p.d_model) {
        return Err(shape_err!(
            "dialog step expects two [1×{}] inputs, got {:?} and {:?}",
            p.d_model,
            tape.shape(apprentice),
            tape.shape(response)
        ));
    }
    let xy = tape.concat_cols(&[apprentice, response]);
    let dialog_summary = gru_cell_step(tape, store, &p.dialog, xy, state.dialog_summary)?;
    Ok(DialogState {
        dialog_summary,
        turn: state.turn + 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_params, FD_TOLERANCE};

    fn params(kind: SentenceEncoderKind, seed: u64) -> (ParamStore<f64>, EncoderParams) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let p = EncoderParams::new(&mut store, 12, 6, kind, 2, 2, &mut rng).unwrap();
        (store, p)
    }

    const KINDS: [SentenceEncoderKind; 2] =
        [SentenceEncoderKind::BiGru, SentenceEncoderKind::SelfAttention];

    #[test]
    fn pooled_is_mean_of_states() {
        for kind in KINDS {
            let (store, p) = params(kind, 1);
            let mut tape = Tape::new();
            let enc = encode_sentence(&mut tape, &store, &p, &[4, 5, 6, 0, 0]).unwrap();
            assert_eq!(enc.len, 3);
            let h = tape.value(enc.states).clone();
            assert_eq!(h.shape(), &[3, 6]);
            for c in 0..6 {
                let mean = (0..3).map(|r| h.row(r)[c]).sum::<f64>() / 3.0;
                assert!((tape.data(enc.pooled)[c] - mean).abs() < 1e-12);
            }
            let single = encode_sentence(&mut tape, &store, &p, &[7]).unwrap();
            assert_eq!(tape.data(single.states), tape.data(single.pooled));
        }
    }

    #[test]
    fn reversal_changes_states() {
        for kind in KINDS {
            let (store, p) = params(kind, 2);
            let mut tape = Tape::new();
            let a = encode_sentence(&mut tape, &store, &p, &[4, 5, 6]).unwrap();
            let b = encode_sentence(&mut tape, &store, &p, &[6, 5, 4]).unwrap();
            let ha = tape.value(a.states).row(0).to_vec();
            let hb = tape.value(b.states).row(2).to_vec();
            assert_ne!(ha, hb);
        }
    }

    #[test]
    fn all_pad_rejected() {
        let (store, p) = params(SentenceEncoderKind::BiGru, 3);
        let mut tape = Tape::new();
        assert!(encode_sentence(&mut tape, &store, &p, &[0, 0]).is_err());
        assert!(encode_sentence(&mut tape, &store, &p, &[]).is_err());
        assert!(encode_sentence(&mut tape, &store, &p, &[99]).is_err());
    }

    #[test]
    fn batch_matches_loop() {
        let pool: Vec<Vec<TokenId>> =
            vec![vec![4, 5], vec![6, 7, 8, 9], vec![10], vec![4, 5], vec![11, 4, 6]];
        for kind in KINDS {
            let (store, p) = params(kind, 4);
            let store32: ParamStore<f32> = store.cast();
            let mut tape = Tape::new();
            let batch = encode_pool(&mut tape, &store32, &p, &pool).unwrap();
            assert_eq!(tape.shape(batch.pooled), &[5, 6]);
            for (i, s) in pool.iter().enumerate() {
                let single = encode_sentence(&mut tape, &store32, &p, s).unwrap();
                let a = tape.data(single.pooled).to_vec();
                let b = &tape.value(batch.pooled).row(i).to_vec();
                for (x, y) in a.iter().zip(b) {
                    assert!((x - y).abs() <= 1e-6, "{x} vs {y}");
                }
            }
            assert_eq!(
                tape.value(batch.pooled).row(0),
                tape.value(batch.pooled).row(3)
            );
            let one = encode_pool(&mut tape, &store32, &p, &pool[..1]).unwrap();
            assert_eq!(one.sentences.len(), 1);
        }
    }

    #[test]
    fn dialog_step_zero_weights_halves() {
        let (mut store, p) = params(SentenceEncoderKind::BiGru, 5);
        for id in [p.dialog.w_ih, p.dialog.w_hh] {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(shape)).unwrap();
        }
        let mut tape = Tape::new();
        let s0 = DialogState::initial(&mut tape, 6);
        assert!(tape.data(s0.dialog_summary).iter().all(|&v| v == 0.0));
        let prev = tape.constant(Tensor::from_f64(vec![1, 6], &[1.0, 2.0, -4.0, 0.5, 0.0, 8.0]).unwrap());
        let state = DialogState { dialog_summary: prev, turn: 1 };
        let hx = tape.constant(Tensor::from_f64(vec![1, 6], &[0.3; 6]).unwrap());
        let next = dialog_step(&mut tape, &store, &p, state, hx, hx).unwrap();
        assert_eq!(next.turn, 2);
        assert_eq!(tape.data(next.dialog_summary), &[0.5, 1.0, -2.0, 0.25, 0.0, 4.0]);
        let bad = tape.constant(Tensor::zeros(vec![1, 5]));
        assert!(dialog_step(&mut tape, &store, &p, state, hx, bad).is_err());
    }

    #[test]
    fn dialog_recurrence_is_order_dependent() {
        let (store, p) = params(SentenceEncoderKind::BiGru, 6);
        let run = |order: [usize; 3]| {
            let mut tape = Tape::new();
            let sents = [vec![4, 5], vec![6, 7, 8], vec![9, 10]];
            let mut st = DialogState::initial(&mut tape, 6);
            for &i in &order {
                let e = encode_sentence(&mut tape, &store, &p, &sents[i]).unwrap();
                st = dialog_step(&mut tape, &store, &p, st, e.pooled, e.pooled).unwrap();
            }
            tape.data(st.dialog_summary).to_vec()
        };
        assert_ne!(run([0, 1, 2]), run([2, 1, 0]));
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (seed, kind) in [(7, SentenceEncoderKind::BiGru), (8, SentenceEncoderKind::SelfAttention)] {
            let (store, p) = params(kind, seed);
            let mut rng = Rng::new(seed);
            let report = check_params(
                &store,
                |s, tape| {
                    let enc = encode_pool(tape, s, &p, &[vec![4, 5, 6], vec![7], vec![8, 9]])?;
                    let mut st = DialogState::initial(tape, 6);
                    st = dialog_step(tape, s, &p, st, enc.sentences[0].pooled, enc.sentences[1].pooled)?;
                    let w = tape.constant(Tensor::from_f64(vec![1, 6], &[0.3, -0.2, 0.5, 1.0, -0.7, 0.1]).unwrap());
                    let a = tape.mul(st.dialog_summary, w);
                    let b = tape.mul(enc.pooled, enc.pooled);
                    let sa = tape.sum(a);
                    let sb = tape.sum(b);
                    Ok(tape.add(sa, sb))
                },
                &mut rng,
                6,
                8,
            )
            .unwrap();
            assert!(report.passed(), "{kind:?}: worst {} at {}", report.worst_rel_err, report.worst_item);
            assert!(report.worst_rel_err <= FD_TOLERANCE);
        }
    }
}
