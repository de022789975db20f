use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{LossGrad, MixtureModel, OptimizerKind, Query, TrainConfig, TuneMode, WeightingMode};
use crate::error::{Error, Result};
use crate::eval::rank_gold;
use crate::lm::MaskedLm;
use crate::optim::Adam;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-example log-loss over the epoch's training batches.
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_p_at_1: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were restored.
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub wall_time: Duration,
}

/// Equality ignores wall time.
impl PartialEq for TrainReport {
    fn eq(&self, other: &Self) -> bool {
        self.epochs == other.epochs && self.best_epoch == other.best_epoch && self.stopped_early == other.stopped_early
    }
}

impl TrainReport {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch - 1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    /// This epoch is the new best.
    Improved,
    Continue,
    Stop,
}

/// Stops once `patience` epochs have passed without a strictly lower dev loss.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            epoch: 0,
        }
    }

    pub fn observe(&mut self, dev_loss: f64) -> StopDecision {
        self.epoch += 1;
        if dev_loss < self.best {
            self.best = dev_loss;
            self.best_epoch = self.epoch;
            StopDecision::Improved
        } else if self.epoch - self.best_epoch >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

const LOGITS: usize = 0;
const LOG_T: usize = 1;

fn slot_group(t: usize) -> usize {
    2 + 2 * t
}

fn delta_group(t: usize) -> usize {
    3 + 2 * t
}

/// Applies one Adam step to the groups selected by `mode`. Δ⁽⁰⁾ duplicates the
/// slot vectors, so in deep mode only layers `1..=L` are updated.
fn apply(model: &mut MixtureModel, lg: &LossGrad, scale: f64, mode: TuneMode, adam: &mut Adam, update_weights: bool) {
    adam.tick();
    let g = &lg.grad;
    if update_weights && mode.tunes_weights() {
        let grad: Vec<f64> = g.logits.iter().map(|v| v * scale).collect();
        adam.update(LOGITS, &mut model.mixture_logits, &grad);
    }
    if model.weighting == WeightingMode::DataDependent {
        let mut lt = [model.log_temperature];
        adam.update(LOG_T, &mut lt, &[g.log_temperature * scale]);
        model.log_temperature = lt[0];
    }
    if mode.tunes_vectors() {
        for (t, p) in model.prompt_set.prompts.iter_mut().enumerate() {
            let grad: Vec<f64> = g.slots[t].iter().map(|v| v * scale).collect();
            adam.update(slot_group(t), &mut p.slots, &grad);
            if mode.tunes_deep() {
                let layer0 = p.slot_count() * p.d();
                let grad: Vec<f64> = g.deltas[t]
                    .iter()
                    .enumerate()
                    .map(|(i, v)| if i < layer0 { 0.0 } else { v * scale })
                    .collect();
                adam.update(delta_group(t), &mut p.deep.deltas, &grad);
            }
        }
    }
}

fn check_finite(loss: f64, what: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("{what} loss is {loss}")))
    }
}

/// Mean loss and P@1 over `set`.
fn evaluate(model: &MixtureModel, set: &[Query], lm: &MaskedLm) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut hits = 0usize;
    for q in set {
        let p = model.predict(&q.x, lm)?;
        loss -= p[q.y].ln();
        if rank_gold(&p, q.y) == 1 {
            hits += 1;
        }
    }
    Ok((loss / set.len() as f64, hits as f64 / set.len() as f64))
}

/// One EM iteration over the full training set. The E-step posteriors give
/// the new prior (their average); when `vector_step` is set the slot vectors
/// (and Δ in deep mode) take one Adam step on the expected complete-data
/// log-loss `Σ q(t|x,y) · (−log p_LM(y|t,x))`. Returns the objective before
/// the update.
pub fn em_step(
    model: &mut MixtureModel,
    train_set: &[Query],
    lm: &MaskedLm,
    adam: &mut Adam,
    mode: TuneMode,
    vector_step: bool,
) -> Result<f64> {
    if model.weighting != WeightingMode::Static {
        return Err(Error::input("EM training requires static mixture weights"));
    }
    if train_set.is_empty() {
        return Err(Error::input("EM needs a nonempty training set"));
    }
    let with_vectors = vector_step && mode.tunes_vectors();
    let lg = model.loss_and_grad(train_set, lm, with_vectors)?;
    check_finite(lg.loss, "training")?;
    if mode.tunes_weights() {
        let n = train_set.len() as f64;
        model.mixture_logits = lg
            .posterior_sum
            .iter()
            .map(|s| (s / n).max(f64::MIN_POSITIVE).ln())
            .collect();
    }
    if with_vectors {
        // the weights were just set in closed form; only vectors move here
        apply(model, &lg, 1.0 / train_set.len() as f64, mode, adam, false);
    }
    Ok(lg.loss)
}

/// Trains the parameter groups chosen by `config.tune_mode` (plus the
/// temperature under data-dependent weighting), evaluating on `dev` after
/// every epoch and restoring the best-dev-loss parameters at the end. The LM
/// is borrowed immutably throughout.
pub fn train(model: &mut MixtureModel, train_set: &[Query], dev: &[Query], lm: &MaskedLm, config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    if train_set.is_empty() || dev.is_empty() {
        return Err(Error::input("training and dev sets must be nonempty"));
    }
    if config.optimizer == OptimizerKind::Em && model.weighting != WeightingMode::Static {
        return Err(Error::input("EM training requires static mixture weights"));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config.adam);
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = model.clone();
    let mut epochs = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut stopped_early = false;

    for epoch in 1..=config.max_epochs {
        let train_loss = match config.optimizer {
            OptimizerKind::Adam => {
                order.shuffle(&mut rng);
                let mut total = 0.0;
                for chunk in order.chunks(config.batch_size) {
                    let batch: Vec<Query> = chunk.iter().map(|&i| train_set[i].clone()).collect();
                    let lg = model.loss_and_grad(&batch, lm, config.tune_mode.tunes_vectors())?;
                    check_finite(lg.loss, "training")?;
                    total += lg.loss;
                    apply(model, &lg, 1.0 / batch.len() as f64, config.tune_mode, &mut adam, true);
                }
                total / train_set.len() as f64
            }
            OptimizerKind::Em => em_step(model, train_set, lm, &mut adam, config.tune_mode, true)? / train_set.len() as f64,
        };
        let (dev_loss, dev_p_at_1) = evaluate(model, dev, lm)?;
        check_finite(dev_loss, "dev")?;
        log::info!(
            "epoch {epoch}: train {train_loss:.4} dev {dev_loss:.4} dev P@1 {dev_p_at_1:.4}"
        );
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            dev_loss,
            dev_p_at_1,
        });
        match stopper.observe(dev_loss) {
            StopDecision::Improved => best = model.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                stopped_early = epoch < config.max_epochs;
                break;
            }
        }
    }
    *model = best;
    Ok(TrainReport {
        epochs,
        best_epoch: stopper.best_epoch(),
        stopped_early,
        wall_time: start.elapsed(),
    })
}
