//! Sequential knowledge selection.
//!
//! The prior scores the pool from the dialogue state before the current
//! response, the current apprentice utterance and the knowledge-history state;
//! the posterior scores it from the dialogue state after the response and the
//! same history. The history state is a GRU over the embeddings of the
//! sentences selected at earlier turns.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::nn::{
    argmax_masked, gru_cell_step, GruParams, GumbelNoise, ParamId, ParamStore, Rng, Scalar, Tape,
    Tensor, Var,
};

#[derive(Debug, Clone)]
pub struct SelectorParams {
    pub d_model: usize,
    /// `[d × 3d]` over the previous dialogue summary, the current utterance and the knowledge summary.
    pub w_prior: ParamId,
    /// `[d × 2d]` over the dialogue summary including the current response, and the knowledge summary.
    pub w_post: ParamId,
    /// Input `d`, hidden `d`.
    pub hist: GruParams,
    /// Divide knowledge scores by `√d`.
    pub scaled_scores: bool,
}

impl SelectorParams {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        d_model: usize,
        scaled_scores: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(SelectorParams {
            d_model,
            w_prior: store.add_xavier("selector.w_prior", d_model, 3 * d_model, rng)?,
            w_post: store.add_xavier("selector.w_post", d_model, 2 * d_model, rng)?,
            hist: GruParams::new(store, "selector.hist", d_model, d_model, rng)?,
            scaled_scores,
        })
    }
}

/// Summary of the knowledge selected so far.
#[derive(Debug, Clone, Copy)]
pub struct HistoryState {
    pub knowledge_summary: Var,
    /// Number of selections folded in.
    pub turn: usize,
}

impl HistoryState {
    pub fn initial<F: Scalar>(tape: &mut Tape<F>, d_model: usize) -> Self {
        HistoryState {
            knowledge_summary: tape.zeros(&[1, d_model]),
            turn: 0,
        }
    }
}

/// Advance the history with the embedding of the sentence just selected.
pub fn history_step<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    p: &SelectorParams,
    state: HistoryState,
    selected: Var,
) -> Result<HistoryState> {
    let knowledge_summary = gru_cell_step(tape, store, &p.hist, selected, state.knowledge_summary)?;
    Ok(HistoryState {
        knowledge_summary,
        turn: state.turn + 1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistributionKind {
    Prior,
    Posterior,
}

/// Masked categorical over one turn's pool.
#[derive(Debug, Clone)]
pub struct KnowledgeDistribution {
    pub logits: Var,
    /// `[1 × L]`
    pub probs: Var,
    pub mask: Vec<bool>,
    pub kind: DistributionKind,
    pub turn: usize,
}

impl KnowledgeDistribution {
    pub fn probs_f64<F: Scalar>(&self, tape: &Tape<F>) -> Vec<f64> {
        tape.value(self.probs).to_f64_vec()
    }

    pub fn argmax<F: Scalar>(&self, tape: &Tape<F>) -> usize {
        argmax_masked(tape.data(self.probs), Some(&self.mask)).expect("mask has a true entry")
    }
}

fn check_pool<F: Scalar>(tape: &Tape<F>, pool: Var, mask: &[bool], d: usize) -> Result<()> {
    let (l, w) = tape.dims(pool);
    if w != d || l == 0 {
        return Err(shape_err!("pool embeddings must be [L×{d}], got {:?}", tape.shape(pool)));
    }
    if mask.len() != l {
        return Err(shape_err!("pool mask has {} entries for {l} sentences", mask.len()));
    }
    if !mask.iter().any(|&m| m) {
        return Err(invalid!("knowledge pool mask has no true entry"));
    }
    Ok(())
}

fn attend<F: Scalar>(
    tape: &mut Tape<F>,
    p: &SelectorParams,
    query: Var,
    pool: Var,
    mask: &[bool],
    kind: DistributionKind,
    turn: usize,
) -> KnowledgeDistribution {
    let mut logits = tape.matmul_t(query, pool);
    if p.scaled_scores {
        logits = tape.scale(logits, F::lit(1.0 / (p.d_model as f64).sqrt()));
    }
    let probs = tape.softmax_rows(logits, Some(mask));
    KnowledgeDistribution {
        logits,
        probs,
        mask: mask.to_vec(),
        kind,
        turn,
    }
}

/// Prior over the pool at turn `history.turn + 1`.
#[allow(clippy::too_many_arguments)]
pub fn prior_distribution<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    p: &SelectorParams,
    dialog_prev: Var,
    utterance: Var,
    history: &HistoryState,
    pool: Var,
    mask: &[bool],
) -> Result<KnowledgeDistribution> {
    check_pool(tape, pool, mask, p.d_model)?;
    let input = tape.concat_cols(&[dialog_prev, utterance, history.knowledge_summary]);
    let w = tape.param(store, p.w_prior);
    let query = tape.matmul_t(input, w);
    Ok(attend(tape, p, query, pool, mask, DistributionKind::Prior, history.turn + 1))
}

/// Posterior over the pool; `dialog_summary` must already include the current response.
pub fn posterior_distribution<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    p: &SelectorParams,
    dialog_summary: Var,
    history: &HistoryState,
    pool: Var,
    mask: &[bool],
) -> Result<KnowledgeDistribution> {
    check_pool(tape, pool, mask, p.d_model)?;
    let input = tape.concat_cols(&[dialog_summary, history.knowledge_summary]);
    let w = tape.param(store, p.w_post);
    let query = tape.matmul_t(input, w);
    Ok(attend(tape, p, query, pool, mask, DistributionKind::Posterior, history.turn + 1))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SelectionMode {
    Argmax,
    /// Gumbel-Softmax at temperature `tau`. With `hard`, the forward pass
    /// uses the exact one-hot sample and gradients reach the relaxed sample
    /// (straight-through); otherwise the relaxed sample is used throughout.
    Gumbel { tau: f64, hard: bool },
}

#[derive(Debug, Clone, Copy)]
pub struct SelectionResult {
    pub index: usize,
    /// Selection weights `[1 × L]`: one-hot, except for relaxed Gumbel
    /// selection where it equals `soft`.
    pub one_hot: Var,
    pub soft: Option<Var>,
    /// `one_hot · pool`, i.e. the selected sentence's embedding `[1 × d]`.
    pub embedding: Var,
}

pub fn select_knowledge<F: Scalar>(
    tape: &mut Tape<F>,
    dist: &KnowledgeDistribution,
    pool: Var,
    mode: SelectionMode,
    noise: &mut dyn GumbelNoise,
) -> Result<SelectionResult> {
    let l = dist.mask.len();
    match mode {
        SelectionMode::Argmax => {
            let index = dist.argmax(tape);
            let mut oh = vec![F::zero(); l];
            oh[index] = F::one();
            let one_hot = tape.constant(Tensor::new(vec![1, l], oh).unwrap());
            let embedding = tape.gather_rows(pool, &[index]);
            Ok(SelectionResult {
                index,
                one_hot,
                soft: None,
                embedding,
            })
        }
        SelectionMode::Gumbel { tau, hard } => {
            if !(tau > 0.0) {
                return Err(invalid!("Gumbel-Softmax temperature must be > 0, got {tau}"));
            }
            let g: Vec<F> = noise.draw(l).into_iter().map(F::lit).collect();
            let perturbed_values: Vec<F> =
                tape.data(dist.logits).iter().zip(&g).map(|(&a, &b)| a + b).collect();
            let index = argmax_masked(&perturbed_values, Some(&dist.mask))
                .ok_or_else(|| invalid!("knowledge pool mask has no true entry"))?;
            let gv = tape.constant(Tensor::new(vec![1, l], g).unwrap());
            let perturbed = tape.add(dist.logits, gv);
            let perturbed = tape.scale(perturbed, F::lit(1.0 / tau));
            let soft = tape.softmax_rows(perturbed, Some(&dist.mask));
            let one_hot = if hard {
                tape.straight_through(soft, index)
            } else {
                soft
            };
            let embedding = tape.matmul(one_hot, pool);
            Ok(SelectionResult {
                index,
                one_hot,
                soft: Some(soft),
                embedding,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_params;
    use crate::nn::{FixedNoise, ZeroNoise};

    const D: usize = 4;

    fn setup(seed: u64) -> (ParamStore<f64>, SelectorParams) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let p = SelectorParams::new(&mut store, D, false, &mut rng).unwrap();
        (store, p)
    }

    fn rand_mat(tape: &mut Tape<f64>, rng: &mut Rng, r: usize, c: usize) -> Var {
        let d: Vec<f64> = (0..r * c).map(|_| rng.normal()).collect();
        tape.constant(Tensor::new(vec![r, c], d).unwrap())
    }

    #[test]
    fn single_sentence_pool_is_certain() {
        let (store, p) = setup(1);
        let mut rng = Rng::new(1);
        let mut tape = Tape::new();
        let hist = HistoryState::initial(&mut tape, D);
        let d = rand_mat(&mut tape, &mut rng, 1, D);
        let pool = rand_mat(&mut tape, &mut rng, 1, D);
        let pr = prior_distribution(&mut tape, &store, &p, d, d, &hist, pool, &[true]).unwrap();
        let po = posterior_distribution(&mut tape, &store, &p, d, &hist, pool, &[true]).unwrap();
        assert_eq!(tape.data(pr.probs), &[1.0]);
        assert_eq!(tape.data(po.probs), &[1.0]);
    }

    #[test]
    fn padded_entries_get_zero_and_rows_normalize() {
        let (store, p) = setup(2);
        let mut rng = Rng::new(2);
        for _ in 0..50 {
            let mut tape = Tape::new();
            let hist = HistoryState::initial(&mut tape, D);
            let d = rand_mat(&mut tape, &mut rng, 1, D);
            let pool = rand_mat(&mut tape, &mut rng, 5, D);
            let mask = [true, true, false, true, false];
            for dist in [
                prior_distribution(&mut tape, &store, &p, d, d, &hist, pool, &mask).unwrap(),
                posterior_distribution(&mut tape, &store, &p, d, &hist, pool, &mask).unwrap(),
            ] {
                let probs = tape.data(dist.probs);
                assert_eq!(probs[2], 0.0);
                assert_eq!(probs[4], 0.0);
                assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
        let mut tape = Tape::new();
        let hist = HistoryState::initial(&mut tape, D);
        let d = rand_mat(&mut tape, &mut rng, 1, D);
        let pool = rand_mat(&mut tape, &mut rng, 2, D);
        assert!(prior_distribution(&mut tape, &store, &p, d, d, &hist, pool, &[false, false]).is_err());
    }

    #[test]
    fn history_halves_under_zero_weights_and_is_order_sensitive() {
        let (mut store, p) = setup(3);
        let mut rng = Rng::new(3);
        let mut tape = Tape::new();
        let embs: Vec<Var> = (0..3).map(|_| rand_mat(&mut tape, &mut rng, 1, D)).collect();
        let run = |tape: &mut Tape<f64>, store: &ParamStore<f64>, order: &[usize]| {
            let mut h = HistoryState::initial(tape, D);
            for &i in order {
                h = history_step(tape, store, &p, h, embs[i]).unwrap();
            }
            tape.data(h.knowledge_summary).to_vec()
        };
        assert_ne!(run(&mut tape, &store, &[0, 1, 2]), run(&mut tape, &store, &[2, 1, 0]));

        for id in [p.hist.w_ih, p.hist.w_hh] {
            store.set(id, Tensor::zeros(vec![3 * D, D])).unwrap();
        }
        let mut tape = Tape::new();
        let embs: Vec<Var> = (0..2).map(|_| rand_mat(&mut tape, &mut rng, 1, D)).collect();
        let start = tape.constant(Tensor::from_f64(vec![1, D], &[4.0, -8.0, 2.0, 1.0]).unwrap());
        let mut h = HistoryState { knowledge_summary: start, turn: 1 };
        h = history_step(&mut tape, &store, &p, h, embs[0]).unwrap();
        assert_eq!(tape.data(h.knowledge_summary), &[2.0, -4.0, 1.0, 0.5]);
        h = history_step(&mut tape, &store, &p, h, embs[1]).unwrap();
        assert_eq!(tape.data(h.knowledge_summary), &[1.0, -2.0, 0.5, 0.25]);
        assert_eq!(h.turn, 3);
    }

    fn dist_from(tape: &mut Tape<f64>, probs: &[f64]) -> KnowledgeDistribution {
        let logits: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
        let l = tape.constant(Tensor::new(vec![1, probs.len()], logits).unwrap());
        let pr = tape.softmax_rows(l, None);
        KnowledgeDistribution {
            logits: l,
            probs: pr,
            mask: vec![true; probs.len()],
            kind: DistributionKind::Prior,
            turn: 1,
        }
    }

    #[test]
    fn argmax_selection_and_ties() {
        let mut tape = Tape::new();
        let pool = tape.constant(Tensor::from_f64(vec![3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let d = dist_from(&mut tape, &[0.2, 0.5, 0.3]);
        let s = select_knowledge(&mut tape, &d, pool, SelectionMode::Argmax, &mut ZeroNoise).unwrap();
        assert_eq!(s.index, 1);
        assert_eq!(tape.data(s.embedding), &[3.0, 4.0]);
        let pool2 = tape.constant(Tensor::from_f64(vec![2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let tie = dist_from(&mut tape, &[0.5, 0.5]);
        let s = select_knowledge(&mut tape, &tie, pool2, SelectionMode::Argmax, &mut ZeroNoise).unwrap();
        assert_eq!(s.index, 0);
    }

    #[test]
    fn gumbel_selection_frequencies() {
        let probs = [0.1, 0.6, 0.3];
        let mut tape = Tape::new();
        let pool = tape.constant(Tensor::from_f64(vec![3, 1], &[0.0, 1.0, 2.0]).unwrap());
        let d = dist_from(&mut tape, &probs);
        let mut rng = Rng::new(17);
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            let mut t = Tape::new();
            let logits = t.constant(tape.value(d.logits).clone());
            let pr = t.softmax_rows(logits, None);
            let pool = t.constant(tape.value(pool).clone());
            let dd = KnowledgeDistribution { logits, probs: pr, ..d.clone() };
            let s = select_knowledge(&mut t, &dd, pool, SelectionMode::Gumbel { tau: 0.1, hard: true }, &mut rng)
                .unwrap();
            assert_eq!(t.data(s.embedding), &[s.index as f64]);
            counts[s.index] += 1;
        }
        for (c, p) in counts.iter().zip(probs) {
            assert!((*c as f64 / n as f64 - p).abs() < 0.01);
        }
    }

    #[test]
    fn gumbel_rejects_bad_temperature() {
        let mut tape = Tape::new();
        let pool = tape.constant(Tensor::zeros(vec![2, 1]));
        let d = dist_from(&mut tape, &[0.5, 0.5]);
        assert!(select_knowledge(&mut tape, &d, pool, SelectionMode::Gumbel { tau: 0.0, hard: true }, &mut ZeroNoise).is_err());
    }

    #[test]
    fn prior_ignores_current_response() {
        let (store, p) = setup(5);
        let mut rng = Rng::new(5);
        for _ in 0..100 {
            let mut tape = Tape::new();
            let hist = HistoryState::initial(&mut tape, D);
            let d_prev = rand_mat(&mut tape, &mut rng, 1, D);
            let utterance = rand_mat(&mut tape, &mut rng, 1, D);
            let pool = rand_mat(&mut tape, &mut rng, 4, D);
            let mask = [true; 4];
            let prior_a = prior_distribution(&mut tape, &store, &p, d_prev, utterance, &hist, pool, &mask).unwrap();
            let d_a = rand_mat(&mut tape, &mut rng, 1, D);
            let d_b = rand_mat(&mut tape, &mut rng, 1, D);
            let post_a = posterior_distribution(&mut tape, &store, &p, d_a, &hist, pool, &mask).unwrap();
            let post_b = posterior_distribution(&mut tape, &store, &p, d_b, &hist, pool, &mask).unwrap();
            let prior_b = prior_distribution(&mut tape, &store, &p, d_prev, utterance, &hist, pool, &mask).unwrap();
            assert_eq!(tape.data(prior_a.probs), tape.data(prior_b.probs));
            assert_ne!(tape.data(post_a.probs), tape.data(post_b.probs));
        }
    }

    #[test]
    fn gradients_through_query_history_and_sample() {
        for seed in 0..3 {
            let (store, p) = setup(10 + seed);
            let mut rng = Rng::new(seed);
            let pool_data: Vec<f64> = (0..4 * D).map(|_| rng.normal()).collect();
            let ctx: Vec<f64> = (0..3 * D).map(|_| rng.normal()).collect();
            let report = check_params(
                &store,
                |s, tape| {
                    let pool = tape.constant(Tensor::new(vec![4, D], pool_data.clone()).unwrap());
                    let d_prev = tape.constant(Tensor::new(vec![1, D], ctx[..D].to_vec()).unwrap());
                    let utterance = tape.constant(Tensor::new(vec![1, D], ctx[D..2 * D].to_vec()).unwrap());
                    let d_now = tape.constant(Tensor::new(vec![1, D], ctx[2 * D..].to_vec()).unwrap());
                    let mut hist = HistoryState::initial(tape, D);
                    let first = tape.gather_rows(pool, &[2]);
                    hist = history_step(tape, s, &p, hist, first)?;
                    let mask = [true, true, false, true];
                    let pr = prior_distribution(tape, s, &p, d_prev, utterance, &hist, pool, &mask)?;
                    let po = posterior_distribution(tape, s, &p, d_now, &hist, pool, &mask)?;
                    let mut noise = FixedNoise::new(vec![0.3, -0.2, 0.1, 0.5]);
                    let sel = select_knowledge(tape, &po, pool, SelectionMode::Gumbel { tau: 2.0, hard: false }, &mut noise)?;
                    let kl = tape.kl_categorical(po.probs, pr.probs, &mask);
                    let e = tape.sum(sel.embedding);
                    Ok(tape.add(kl, e))
                },
                &mut rng,
                4,
                8,
            )
            .unwrap();
            assert!(report.passed(), "worst {} at {}", report.worst_rel_err, report.worst_item);
        }
    }
}
