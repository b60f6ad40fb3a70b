//! The full model: parameters, per-episode encoding and the test-time pipeline.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{EncodedEpisode, EncodedTurn, TokenId, EOS};
use crate::decoder::{generate, sequence_nll, DecoderParams, Generation, SourceMemory};
use crate::encoder::{
    dialog_step, encode_sentences, DialogState, EncodedSentences, EncoderParams,
    SentenceEncoderKind, SentenceEncoding,
};
use crate::error::{invalid, Result};
use crate::nn::{ParamStore, Rng, Scalar, Tape, Tensor, Var};
use crate::selector::{
    history_step, posterior_distribution, prior_distribution, select_knowledge, HistoryState,
    KnowledgeDistribution, SelectionMode, SelectorParams,
};
use crate::nn::ZeroNoise;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Filled in from the vocabulary when training starts.
    pub vocab_size: usize,
    pub d_model: usize,
    pub sentence_encoder: SentenceEncoderKind,
    /// Depth and heads of the self-attention sentence encoder.
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    /// Divide knowledge scores by `√d_model`.
    pub scaled_scores: bool,
    /// Feed zeros to the knowledge-history GRU instead of selected sentences.
    pub history_ablation: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 0,
            d_model: 64,
            sentence_encoder: SentenceEncoderKind::BiGru,
            encoder_layers: 2,
            encoder_heads: 4,
            decoder_layers: 2,
            decoder_heads: 4,
            scaled_scores: false,
            history_ablation: false,
        }
    }
}

/// All trainable parameters and their layout.
#[derive(Debug, Clone)]
pub struct SktModel<F: Scalar = f32> {
    pub config: ModelConfig,
    pub encoder: EncoderParams,
    pub selector: SelectorParams,
    pub decoder: DecoderParams,
    pub store: ParamStore<F>,
}

impl<F: Scalar> SktModel<F> {
    /// Xavier-uniform matrices and zero biases drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        if config.vocab_size < 5 {
            return Err(invalid!("vocabulary size {} too small", config.vocab_size));
        }
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let encoder = EncoderParams::new(
            &mut store,
            config.vocab_size,
            config.d_model,
            config.sentence_encoder,
            config.encoder_layers,
            config.encoder_heads,
            &mut rng,
        )?;
        let selector = SelectorParams::new(&mut store, config.d_model, config.scaled_scores, &mut rng)?;
        let decoder = DecoderParams::new(
            &mut store,
            encoder.embed,
            config.vocab_size,
            config.d_model,
            config.decoder_layers,
            config.decoder_heads,
            &mut rng,
        )?;
        Ok(SktModel {
            config,
            encoder,
            selector,
            decoder,
            store,
        })
    }

    pub fn cast<G: Scalar>(&self) -> SktModel<G> {
        SktModel {
            config: self.config.clone(),
            encoder: self.encoder.clone(),
            selector: self.selector.clone(),
            decoder: self.decoder.clone(),
            store: self.store.cast(),
        }
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }
}

/// Encoder input for an utterance; an empty utterance is read as a lone EOS.
pub fn utterance_ids(ids: &[TokenId]) -> Vec<TokenId> {
    if ids.is_empty() {
        vec![EOS]
    } else {
        ids.to_vec()
    }
}

/// Every distinct sentence of an episode encoded in one batch.
pub struct SentenceTable {
    index: HashMap<Vec<TokenId>, usize>,
    encoded: EncodedSentences,
}

impl SentenceTable {
    pub fn build<F: Scalar>(
        tape: &mut Tape<F>,
        model: &SktModel<F>,
        sentences: &[&[TokenId]],
    ) -> Result<Self> {
        let mut index = HashMap::new();
        let mut order: Vec<&[TokenId]> = Vec::new();
        for &s in sentences {
            if !index.contains_key(s) {
                index.insert(s.to_vec(), order.len());
                order.push(s);
            }
        }
        let encoded = encode_sentences(tape, &model.store, &model.encoder, &order)?;
        Ok(SentenceTable { index, encoded })
    }

    pub fn get(&self, s: &[TokenId]) -> SentenceEncoding {
        self.encoded.sentences[self.index[s]]
    }

    /// Pooled embeddings of `pool` stacked `[L × d]`.
    pub fn pool<F: Scalar>(&self, tape: &mut Tape<F>, pool: &[Vec<TokenId>]) -> Var {
        let rows: Vec<usize> = pool.iter().map(|s| self.index[s.as_slice()]).collect();
        tape.gather_rows(self.encoded.pooled, &rows)
    }
}

/// Encoded inputs of one turn.
#[derive(Debug, Clone)]
pub struct TurnInputs {
    pub x_ids: Vec<TokenId>,
    pub x: SentenceEncoding,
    pub y: SentenceEncoding,
    pub pool: Var,
    pub pool_sentences: Vec<SentenceEncoding>,
    pub mask: Vec<bool>,
}

/// Encode every sentence of `ep` and assemble per-turn inputs.
pub fn encode_turns<F: Scalar>(
    tape: &mut Tape<F>,
    model: &SktModel<F>,
    ep: &EncodedEpisode,
) -> Result<Vec<TurnInputs>> {
    for (i, t) in ep.turns.iter().enumerate() {
        if t.pool.is_empty() {
            return Err(invalid!("turn {} has an empty pool", i + 1));
        }
    }
    let xs: Vec<Vec<TokenId>> = ep.turns.iter().map(|t| utterance_ids(&t.x)).collect();
    let ys: Vec<Vec<TokenId>> = ep.turns.iter().map(|t| utterance_ids(&t.y)).collect();
    let mut all: Vec<&[TokenId]> = Vec::new();
    for (t, (x, y)) in ep.turns.iter().zip(xs.iter().zip(&ys)) {
        all.push(x);
        all.push(y);
        all.extend(t.pool.iter().map(Vec::as_slice));
    }
    let table = SentenceTable::build(tape, model, &all)?;
    Ok(ep
        .turns
        .iter()
        .zip(xs.into_iter().zip(ys))
        .map(|(t, (x, y))| TurnInputs {
            x: table.get(&x),
            y: table.get(&y),
            x_ids: x,
            pool: table.pool(tape, &t.pool),
            pool_sentences: t.pool.iter().map(|s| table.get(s)).collect(),
            mask: vec![true; t.pool.len()],
        })
        .collect())
}

/// Source memory from the context and pool sentence `index`, whose states
/// are scaled by `weight` (a selection weight that is 1 in the forward pass).
pub fn memory_for<F: Scalar>(
    tape: &mut Tape<F>,
    model: &SktModel<F>,
    inputs: &TurnInputs,
    turn: &EncodedTurn,
    index: usize,
    weight: Option<Var>,
) -> Result<SourceMemory> {
    let k = inputs.pool_sentences[index];
    let k_ids: Vec<TokenId> = turn.pool[index].iter().copied().filter(|&t| t != 0).collect();
    let k_states = match weight {
        Some(w) => tape.mul_scalar_var(k.states, w),
        None => k.states,
    };
    SourceMemory::new(
        tape,
        &model.store,
        &model.decoder,
        (inputs.x.states, &inputs.x_ids),
        (k_states, &k_ids),
    )
}

/// Where the test-time pipeline takes the previously selected knowledge from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HistorySource {
    /// Posterior argmax of earlier turns (their responses are observed).
    #[default]
    Posterior,
    /// Prior argmax of earlier turns.
    Prior,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceOptions {
    pub history: HistorySource,
    /// Condition the response likelihood on the gold sentence instead of the
    /// predicted one (labeled turns only).
    pub gold_knowledge_ppl: bool,
    /// Greedy-decode a response at every turn.
    pub generate: bool,
    pub max_len: usize,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        InferenceOptions {
            history: HistorySource::Posterior,
            gold_knowledge_ppl: false,
            generate: true,
            max_len: 40,
        }
    }
}

/// Test-time results for one turn.
#[derive(Debug, Clone, PartialEq)]
pub struct TurnInference {
    pub prior: Vec<f64>,
    pub posterior: Vec<f64>,
    /// Prior argmax.
    pub selected: usize,
    /// Summed negative log-likelihood of the gold response plus EOS.
    pub nll: f64,
    /// Number of predicted tokens (response length + 1).
    pub tokens: usize,
    pub generation: Option<Generation>,
}

/// Run the test-time pipeline over an episode with gold utterances.
pub fn infer_episode<F: Scalar>(
    model: &SktModel<F>,
    ep: &EncodedEpisode,
    opts: &InferenceOptions,
) -> Result<Vec<TurnInference>> {
    let mut tape = Tape::inference();
    let tape = &mut tape;
    let d = model.d_model();
    let inputs = encode_turns(tape, model, ep)?;
    let mut dialog = DialogState::initial(tape, d);
    let mut hist = HistoryState::initial(tape, d);
    let zero = tape.zeros(&[1, d]);
    let mut out = Vec::with_capacity(ep.turns.len());
    for (turn, inp) in ep.turns.iter().zip(&inputs) {
        let prior = prior_distribution(
            tape,
            &model.store,
            &model.selector,
            dialog.dialog_summary,
            inp.x.pooled,
            &hist,
            inp.pool,
            &inp.mask,
        )?;
        let next = dialog_step(tape, &model.store, &model.encoder, dialog, inp.x.pooled, inp.y.pooled)?;
        let post = posterior_distribution(tape, &model.store, &model.selector, next.dialog_summary, &hist, inp.pool, &inp.mask)?;
        let selected = prior.argmax(tape);
        let ppl_index = match (opts.gold_knowledge_ppl, turn.gold) {
            (true, Some(g)) => g,
            _ => selected,
        };
        let mem = memory_for(tape, model, inp, turn, ppl_index, None)?;
        let nll = sequence_nll(tape, &model.store, &model.decoder, &mem, &turn.y, 0.0)?;
        let nll_sum: f64 = tape.value(nll).to_f64_vec().iter().sum();
        let generation = if opts.generate {
            let mem = if ppl_index == selected {
                mem
            } else {
                memory_for(tape, model, inp, turn, selected, None)?
            };
            Some(generate(tape, &model.store, &model.decoder, &mem, opts.max_len)?)
        } else {
            None
        };
        let hist_dist: &KnowledgeDistribution = match opts.history {
            HistorySource::Posterior => &post,
            HistorySource::Prior => &prior,
        };
        let hsel = select_knowledge(tape, hist_dist, inp.pool, SelectionMode::Argmax, &mut ZeroNoise)?;
        let hist_input = if model.config.history_ablation { zero } else { hsel.embedding };
        hist = history_step(tape, &model.store, &model.selector, hist, hist_input)?;
        out.push(TurnInference {
            prior: prior.probs_f64(tape),
            posterior: post.probs_f64(tape),
            selected,
            nll: nll_sum,
            tokens: turn.y.len() + 1,
            generation,
        });
        dialog = next;
    }
    Ok(out)
}

/// Recurrent state of a live conversation, kept outside any tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Conversation<F: Scalar = f32> {
    pub dialog_summary: Tensor<F>,
    pub knowledge_summary: Tensor<F>,
    pub turn: usize,
}

impl<F: Scalar> Conversation<F> {
    pub fn new(d_model: usize) -> Self {
        Conversation {
            dialog_summary: Tensor::zeros(vec![1, d_model]),
            knowledge_summary: Tensor::zeros(vec![1, d_model]),
            turn: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reply {
    pub prior: Vec<f64>,
    pub selected: usize,
    pub response: Generation,
    /// 1-based index of this exchange.
    pub turn: usize,
}

/// One live exchange: select knowledge with the prior, generate a response,
/// then fold the exchange and the selection into the conversation state.
pub fn respond<F: Scalar>(
    model: &SktModel<F>,
    conv: &mut Conversation<F>,
    x: &[TokenId],
    pool: &[Vec<TokenId>],
    max_len: usize,
) -> Result<Reply> {
    if pool.is_empty() {
        return Err(invalid!("empty knowledge pool"));
    }
    let mut tape = Tape::inference();
    let tape = &mut tape;
    let x_ids = utterance_ids(x);
    let mut all: Vec<&[TokenId]> = vec![&x_ids];
    all.extend(pool.iter().map(Vec::as_slice));
    let table = SentenceTable::build(tape, model, &all)?;
    let inp = TurnInputs {
        x: table.get(&x_ids),
        y: table.get(&x_ids),
        x_ids: x_ids.clone(),
        pool: table.pool(tape, pool),
        pool_sentences: pool.iter().map(|s| table.get(s)).collect(),
        mask: vec![true; pool.len()],
    };
    let dialog_summary = tape.constant(conv.dialog_summary.clone());
    let knowledge_summary = tape.constant(conv.knowledge_summary.clone());
    let hist = HistoryState { knowledge_summary, turn: conv.turn };
    let prior = prior_distribution(tape, &model.store, &model.selector, dialog_summary, inp.x.pooled, &hist, inp.pool, &inp.mask)?;
    let selected = prior.argmax(tape);
    let turn = EncodedTurn {
        x: x.to_vec(),
        y: Vec::new(),
        pool: pool.to_vec(),
        gold: None,
        alt_golds: Vec::new(),
        references: Vec::new(),
    };
    let mem = memory_for(tape, model, &inp, &turn, selected, None)?;
    let response = generate(tape, &model.store, &model.decoder, &mem, max_len)?;
    let y_ids = utterance_ids(&response.tokens);
    let y = encode_sentences(tape, &model.store, &model.encoder, &[&y_ids])?.sentences[0];
    let dialog = DialogState { dialog_summary, turn: conv.turn };
    let next = dialog_step(tape, &model.store, &model.encoder, dialog, inp.x.pooled, y.pooled)?;
    let sel = if model.config.history_ablation {
        tape.zeros(&[1, model.d_model()])
    } else {
        tape.gather_rows(inp.pool, &[selected])
    };
    let hist = history_step(tape, &model.store, &model.selector, hist, sel)?;
    conv.dialog_summary = tape.value(next.dialog_summary).clone();
    conv.knowledge_summary = tape.value(hist.knowledge_summary).clone();
    conv.turn += 1;
    Ok(Reply {
        prior: prior.probs_f64(tape),
        selected,
        response,
        turn: conv.turn,
    })
}
