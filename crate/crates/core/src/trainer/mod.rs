//! Optimization of the sequential latent objective.

mod checkpoint;
mod enumerate;
mod loss;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, MAGIC,
    VERSION,
};
pub use enumerate::{enumerate_marginal, exact_elbo, MAX_SEQUENCES};
pub use loss::{episode_loss, EpisodeLoss, TurnLoss, TurnLossBreakdown};

use std::sync::mpsc::sync_channel;

use serde::{Deserialize, Serialize};

use crate::corpus::{build_vocab, make_batches, EncodedEpisode, Episode, Vocab};
use crate::error::{invalid, Error, Result};
use crate::model::{ModelConfig, SktModel};
use crate::nn::{clip_global_norm, AdamConfig, AdamState, GradBuffer, Rng, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Weight of the knowledge loss.
    pub lambda: f64,
    /// Gumbel-Softmax temperature.
    pub tau: f64,
    pub knowledge_smoothing: f64,
    pub generation_smoothing: f64,
    pub epochs: usize,
    /// Dialogues per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of labeled turns whose knowledge label is kept.
    pub labeled_fraction: f64,
    pub clip_norm: f64,
    /// Batches prepared ahead on a loader thread (0 = inline).
    pub prefetch: usize,
    pub vocab_max: usize,
    pub vocab_min_freq: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            lambda: 1.0,
            tau: 0.1,
            knowledge_smoothing: 0.1,
            generation_smoothing: 0.05,
            epochs: 5,
            batch_size: 8,
            seed: 0,
            labeled_fraction: 1.0,
            clip_norm: 1.0,
            prefetch: 2,
            vocab_max: 10_000,
            vocab_min_freq: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(invalid!("tau must be > 0, got {}", self.tau));
        }
        if !(self.lambda >= 0.0) {
            return Err(invalid!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.labeled_fraction) {
            return Err(invalid!("labeled fraction {} outside [0, 1]", self.labeled_fraction));
        }
        for (name, v) in [
            ("knowledge_smoothing", self.knowledge_smoothing),
            ("generation_smoothing", self.generation_smoothing),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(invalid!("{name} {v} outside [0, 1)"));
            }
        }
        if !(self.lr > 0.0) || !(self.clip_norm > 0.0) {
            return Err(invalid!("lr and clip_norm must be positive"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

/// Keep `⌊ρ · N⌋` of the `N` labeled turns, chosen uniformly without
/// replacement; the rest become unlabeled.
pub fn mask_labels(episodes: &[Episode], rho: f64, seed: u64) -> Result<Vec<Episode>> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(invalid!("labeled fraction {rho} outside [0, 1]"));
    }
    let labeled: Vec<(usize, usize)> = episodes
        .iter()
        .enumerate()
        .flat_map(|(e, ep)| {
            ep.turns
                .iter()
                .enumerate()
                .filter(|(_, t)| t.is_labeled())
                .map(move |(t, _)| (e, t))
        })
        .collect();
    let keep = (rho * labeled.len() as f64 + 1e-9).floor() as usize;
    let mut rng = Rng::new(seed);
    let mut kept = vec![false; labeled.len()];
    for i in rng.sample_indices(labeled.len(), keep.min(labeled.len())) {
        kept[i] = true;
    }
    let mut out = episodes.to_vec();
    for (&(e, t), keep) in labeled.iter().zip(kept) {
        if !keep {
            out[e].turns[t].gold = None;
            out[e].turns[t].alt_golds.clear();
        }
    }
    Ok(out)
}

/// Mean loss terms over the episodes of one epoch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    pub episodes: usize,
    pub nll: f64,
    pub kl: f64,
    pub knowledge_loss: f64,
    pub total: f64,
    /// Mean gradient norm before clipping.
    pub grad_norm: f64,
}

fn noise_stream(seed: u64, epoch: usize, batch: usize) -> Rng {
    Rng::new(seed ^ 0x9e37_79b9_7f4a_7c15).fork(((epoch as u64) << 32) | batch as u64)
}

/// One optimizer step over a group of dialogues. Returns the mean breakdown
/// and the pre-clip gradient norm.
pub fn train_step(
    model: &mut SktModel<f32>,
    adam: &mut AdamState,
    batch: &[EncodedEpisode],
    cfg: &TrainConfig,
    noise: &mut Rng,
) -> Result<(TurnLossBreakdown, f64)> {
    let mut grads = GradBuffer::for_store(&model.store);
    let mut mean = TurnLossBreakdown::default();
    let scale = 1.0 / batch.len().max(1) as f32;
    for ep in batch {
        let mut tape = Tape::new();
        let loss = episode_loss(&mut tape, model, ep, cfg, noise, true)?;
        let b = &loss.breakdown;
        if !b.total.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite loss on dialogue `{}`: nll {} kl {} knowledge {}",
                ep.topic, b.nll, b.kl, b.knowledge_loss
            )));
        }
        mean.nll += b.nll * scale as f64;
        mean.kl += b.kl * scale as f64;
        mean.knowledge_loss += b.knowledge_loss * scale as f64;
        mean.total += b.total * scale as f64;
        let scaled = tape.scale(loss.total, scale);
        tape.backward(scaled)?;
        tape.accumulate_param_grads(&mut grads);
    }
    if !grads.is_finite() {
        return Err(Error::Diverged("non-finite gradient".into()));
    }
    let norm = clip_global_norm(&mut grads, cfg.clip_norm);
    adam.step(&mut model.store, &grads)?;
    Ok((mean, norm))
}

/// One pass over `data` in seeded dialogue batches.
pub fn train_epoch(
    model: &mut SktModel<f32>,
    adam: &mut AdamState,
    data: &[EncodedEpisode],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochMetrics> {
    let batch_seed = cfg.seed.wrapping_add((epoch as u64).wrapping_mul(0x2545_f491_4f6c_dd1d));
    let mut metrics = EpochMetrics {
        epoch,
        ..EpochMetrics::default()
    };
    let mut consume = |i: usize, eps: Vec<EncodedEpisode>| -> Result<()> {
        let mut noise = noise_stream(cfg.seed, epoch, i);
        let (b, norm) = train_step(model, adam, &eps, cfg, &mut noise)?;
        let n = eps.len() as f64;
        metrics.steps += 1;
        metrics.episodes += eps.len();
        metrics.nll += b.nll * n;
        metrics.kl += b.kl * n;
        metrics.knowledge_loss += b.knowledge_loss * n;
        metrics.total += b.total * n;
        metrics.grad_norm += norm;
        Ok(())
    };
    if cfg.prefetch == 0 {
        for (i, b) in make_batches(data, cfg.batch_size, batch_seed).iter().enumerate() {
            consume(i, b.unbatch())?;
        }
    } else {
        std::thread::scope(|s| -> Result<()> {
            let (tx, rx) = sync_channel(cfg.prefetch);
            s.spawn(move || {
                for b in make_batches(data, cfg.batch_size, batch_seed) {
                    if tx.send(b.unbatch()).is_err() {
                        break;
                    }
                }
            });
            for (i, eps) in rx.iter().enumerate() {
                consume(i, eps)?;
            }
            Ok(())
        })?;
    }
    let n = metrics.episodes.max(1) as f64;
    metrics.nll /= n;
    metrics.kl /= n;
    metrics.knowledge_loss /= n;
    metrics.total /= n;
    metrics.grad_norm /= metrics.steps.max(1) as f64;
    Ok(metrics)
}

/// A model trained from scratch together with its vocabulary.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: SktModel<f32>,
    pub vocab: Vocab,
    pub optimizer: AdamState,
    pub history: Vec<EpochMetrics>,
}

/// Build the vocabulary, mask labels to the configured fraction, initialize
/// and train for `cfg.epochs` epochs.
pub fn train(
    episodes: &[Episode],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainedModel> {
    cfg.validate()?;
    if episodes.is_empty() {
        return Err(invalid!("no training dialogues"));
    }
    let vocab = build_vocab(episodes, cfg.vocab_max, cfg.vocab_min_freq)?;
    let masked = mask_labels(episodes, cfg.labeled_fraction, cfg.seed)?;
    let data = EncodedEpisode::encode_all(&masked, &vocab);
    let mut mc = model_cfg.clone();
    mc.vocab_size = vocab.len();
    let mut model = SktModel::new(mc, cfg.seed)?;
    let mut optimizer = AdamState::new(&model.store, cfg.adam());
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let m = train_epoch(&mut model, &mut optimizer, &data, cfg, epoch)?;
        on_epoch(&m);
        history.push(m);
    }
    Ok(TrainedModel {
        model,
        vocab,
        optimizer,
        history,
    })
}
