//! Exact marginal likelihood and exact sequential ELBO by enumerating every
//! knowledge sequence. Only feasible for tiny pools and short dialogues.

use crate::corpus::EncodedEpisode;
use crate::decoder::sequence_nll;
use crate::encoder::{dialog_step, DialogState};
use crate::error::{Error, Result};
use crate::model::{encode_turns, memory_for, SktModel, TurnInputs};
use crate::nn::{Scalar, Tape, Var};
use crate::selector::{history_step, posterior_distribution, prior_distribution, HistoryState};

/// Upper bound on the number of enumerated knowledge sequences.
pub const MAX_SEQUENCES: f64 = 1e4;

struct Prepared<'a, F: Scalar> {
    model: &'a SktModel<F>,
    inputs: Vec<TurnInputs>,
    /// Dialogue summary before and after each turn.
    dialog: Vec<(Var, Var)>,
    /// `log p(y^t | x^t, k)` for every pool entry `k`.
    log_lik: Vec<Vec<f64>>,
}

fn prepare<'a, F: Scalar>(
    tape: &mut Tape<F>,
    model: &'a SktModel<F>,
    ep: &EncodedEpisode,
) -> Result<Prepared<'a, F>> {
    let sequences: f64 = ep.turns.iter().map(|t| t.pool.len() as f64).product();
    if sequences > MAX_SEQUENCES {
        return Err(Error::Infeasible(format!(
            "{sequences} knowledge sequences exceed the enumeration limit of {MAX_SEQUENCES}"
        )));
    }
    let inputs = encode_turns(tape, model, ep)?;
    let mut state = DialogState::initial(tape, model.d_model());
    let mut dialog = Vec::with_capacity(inputs.len());
    let mut log_lik = Vec::with_capacity(inputs.len());
    for (turn, inp) in ep.turns.iter().zip(&inputs) {
        let next = dialog_step(tape, &model.store, &model.encoder, state, inp.x.pooled, inp.y.pooled)?;
        dialog.push((state.dialog_summary, next.dialog_summary));
        state = next;
        let mut ll = Vec::with_capacity(turn.pool.len());
        for k in 0..turn.pool.len() {
            let mem = memory_for(tape, model, inp, turn, k, None)?;
            let nll = sequence_nll(tape, &model.store, &model.decoder, &mem, &turn.y, 0.0)?;
            ll.push(-tape.value(nll).to_f64_vec().iter().sum::<f64>());
        }
        log_lik.push(ll);
    }
    Ok(Prepared {
        model,
        inputs,
        dialog,
        log_lik,
    })
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn next_history<F: Scalar>(
    tape: &mut Tape<F>,
    p: &Prepared<'_, F>,
    t: usize,
    hist: HistoryState,
    k: usize,
) -> Result<HistoryState> {
    let m = p.model;
    let input = if m.config.history_ablation {
        tape.zeros(&[1, m.d_model()])
    } else {
        tape.gather_rows(p.inputs[t].pool, &[k])
    };
    history_step(tape, &m.store, &m.selector, hist, input)
}

fn prior_probs<F: Scalar>(tape: &mut Tape<F>, p: &Prepared<'_, F>, t: usize, hist: &HistoryState) -> Result<Vec<f64>> {
    let inp = &p.inputs[t];
    let m = p.model;
    let d = prior_distribution(tape, &m.store, &m.selector, p.dialog[t].0, inp.x.pooled, hist, inp.pool, &inp.mask)?;
    Ok(d.probs_f64(tape))
}

fn marginal_from<F: Scalar>(tape: &mut Tape<F>, p: &Prepared<'_, F>, t: usize, hist: HistoryState) -> Result<f64> {
    if t == p.inputs.len() {
        return Ok(0.0);
    }
    let prior = prior_probs(tape, p, t, &hist)?;
    let mut terms = Vec::with_capacity(prior.len());
    for (k, &pk) in prior.iter().enumerate() {
        if pk <= 0.0 {
            continue;
        }
        let next = next_history(tape, p, t, hist, k)?;
        let rest = marginal_from(tape, p, t + 1, next)?;
        terms.push(pk.ln() + p.log_lik[t][k] + rest);
    }
    Ok(log_sum_exp(&terms))
}

fn elbo_from<F: Scalar>(tape: &mut Tape<F>, p: &Prepared<'_, F>, t: usize, hist: HistoryState) -> Result<f64> {
    if t == p.inputs.len() {
        return Ok(0.0);
    }
    let prior = prior_probs(tape, p, t, &hist)?;
    let inp = &p.inputs[t];
    let m = p.model;
    let post = posterior_distribution(tape, &m.store, &m.selector, p.dialog[t].1, &hist, inp.pool, &inp.mask)?
        .probs_f64(tape);
    let mut total = 0.0;
    for (k, &qk) in post.iter().enumerate() {
        if qk <= 0.0 {
            continue;
        }
        let next = next_history(tape, p, t, hist, k)?;
        let rest = elbo_from(tape, p, t + 1, next)?;
        total += qk * (p.log_lik[t][k] + prior[k].max(f64::MIN_POSITIVE).ln() - qk.ln() + rest);
    }
    Ok(total)
}

/// `log p(y^{1..T} | x^{1..T})`, summing the prior-weighted likelihood over
/// every knowledge sequence.
pub fn enumerate_marginal<F: Scalar>(model: &SktModel<F>, ep: &EncodedEpisode) -> Result<f64> {
    let mut tape = Tape::inference();
    let p = prepare(&mut tape, model, ep)?;
    let hist = HistoryState::initial(&mut tape, model.d_model());
    marginal_from(&mut tape, &p, 0, hist)
}

/// Sequential ELBO with every expectation over the posterior chain computed
/// exactly: `E_q[Σ_t log p(y^t|k^t) + log π(k^t|k^{<t}) − log q(k^t|k^{<t})]`.
pub fn exact_elbo<F: Scalar>(model: &SktModel<F>, ep: &EncodedEpisode) -> Result<f64> {
    let mut tape = Tape::inference();
    let p = prepare(&mut tape, model, ep)?;
    let hist = HistoryState::initial(&mut tape, model.d_model());
    elbo_from(&mut tape, &p, 0, hist)
}
