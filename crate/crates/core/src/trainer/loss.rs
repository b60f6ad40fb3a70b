use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::corpus::EncodedEpisode;
use crate::decoder::sequence_nll;
use crate::encoder::{dialog_step, DialogState};
use crate::error::Result;
use crate::model::{encode_turns, memory_for, SktModel};
use crate::nn::{smoothed_target, GumbelNoise, Scalar, Tape, Var};
use crate::selector::{
    history_step, posterior_distribution, prior_distribution, select_knowledge, HistoryState,
    SelectionMode,
};

/// Loss terms of one turn; all are minimized.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TurnLoss {
    pub nll: f64,
    pub kl: f64,
    pub knowledge_loss: f64,
    pub total: f64,
    pub labeled: bool,
}

/// Per-turn terms and their means over the episode.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TurnLossBreakdown {
    pub turns: Vec<TurnLoss>,
    pub nll: f64,
    pub kl: f64,
    pub knowledge_loss: f64,
    pub total: f64,
}

pub struct EpisodeLoss {
    /// Scalar on the tape: mean over turns of `nll + kl + λ·knowledge_loss`.
    pub total: Var,
    pub breakdown: TurnLossBreakdown,
    /// Sampled knowledge index per turn.
    pub selections: Vec<usize>,
}

/// Training objective for one episode.
///
/// At each turn the posterior is sampled with Gumbel-Softmax (straight-through
/// when `hard`); the sample grounds the decoder and feeds the history GRU for
/// later turns. The knowledge loss uses the posterior and applies only to
/// labeled turns.
pub fn episode_loss<F: Scalar>(
    tape: &mut Tape<F>,
    model: &SktModel<F>,
    ep: &EncodedEpisode,
    cfg: &TrainConfig,
    noise: &mut dyn GumbelNoise,
    hard: bool,
) -> Result<EpisodeLoss> {
    let d = model.d_model();
    let inputs = encode_turns(tape, model, ep)?;
    let mut dialog = DialogState::initial(tape, d);
    let mut hist = HistoryState::initial(tape, d);
    let mut terms = Vec::with_capacity(ep.turns.len());
    let mut breakdown = TurnLossBreakdown::default();
    let mut selections = Vec::with_capacity(ep.turns.len());
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
        let sel = select_knowledge(
            tape,
            &post,
            inp.pool,
            SelectionMode::Gumbel { tau: cfg.tau, hard },
            noise,
        )?;
        selections.push(sel.index);
        let weight = tape.pick(sel.one_hot, sel.index);
        let mem = memory_for(tape, model, inp, turn, sel.index, Some(weight))?;
        let nll = sequence_nll(tape, &model.store, &model.decoder, &mem, &turn.y, cfg.generation_smoothing)?;
        let nll = tape.sum(nll);
        let kl = tape.kl_categorical(post.probs, prior.probs, &inp.mask);
        let mut term = tape.add(nll, kl);
        let mut kloss_value = 0.0;
        if let Some(g) = turn.gold {
            let target = smoothed_target::<F>(inp.mask.len(), g, cfg.knowledge_smoothing);
            let kloss = tape.cross_entropy_rows(post.probs, target);
            let kloss = tape.sum(kloss);
            kloss_value = tape.value(kloss).item().as_f64();
            let weighted = tape.scale(kloss, F::lit(cfg.lambda));
            term = tape.add(term, weighted);
        }
        let t = TurnLoss {
            nll: tape.value(nll).item().as_f64(),
            kl: tape.value(kl).item().as_f64(),
            knowledge_loss: kloss_value,
            total: tape.value(term).item().as_f64(),
            labeled: turn.gold.is_some(),
        };
        breakdown.turns.push(t);
        terms.push(term);

        let hist_input = if model.config.history_ablation {
            tape.zeros(&[1, d])
        } else {
            sel.embedding
        };
        hist = history_step(tape, &model.store, &model.selector, hist, hist_input)?;
        dialog = next;
    }
    let n = terms.len().max(1) as f64;
    let stacked = tape.concat_cols(&terms);
    let total = tape.mean(stacked);
    for t in &breakdown.turns {
        breakdown.nll += t.nll / n;
        breakdown.kl += t.kl / n;
        breakdown.knowledge_loss += t.knowledge_loss / n;
        breakdown.total += t.total / n;
    }
    Ok(EpisodeLoss {
        total,
        breakdown,
        selections,
    })
}
