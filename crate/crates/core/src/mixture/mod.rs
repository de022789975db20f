//! The mixture of soft prompts for one relation: ensemble prediction, optional
//! data-dependent (Bayes) weighting with a learned temperature, the log-loss
//! objective and its gradient.

mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{MaskedLm, Seed, Trace};
use crate::optim::AdamConfig;
use crate::prompts::{PromptSet, SoftPrompt};

pub use train::{em_step, train, EarlyStopping, EpochRecord, StopDecision, TrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightingMode {
    Static,
    DataDependent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuneMode {
    WeightsOnly,
    VectorsOnly,
    Both,
    DeepAllLayers,
}

impl TuneMode {
    pub const ALL: [TuneMode; 4] = [
        TuneMode::WeightsOnly,
        TuneMode::VectorsOnly,
        TuneMode::Both,
        TuneMode::DeepAllLayers,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TuneMode::WeightsOnly => "weights_only",
            TuneMode::VectorsOnly => "vectors_only",
            TuneMode::Both => "both",
            TuneMode::DeepAllLayers => "deep_all_layers",
        }
    }

    pub fn tunes_weights(self) -> bool {
        !matches!(self, TuneMode::VectorsOnly)
    }

    pub fn tunes_vectors(self) -> bool {
        !matches!(self, TuneMode::WeightsOnly)
    }

    pub fn tunes_deep(self) -> bool {
        matches!(self, TuneMode::DeepAllLayers)
    }
}

impl fmt::Display for TuneMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TuneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TuneMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::input(format!("unknown tune mode {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Em,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub optimizer: OptimizerKind,
    pub tune_mode: TuneMode,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            patience: 4,
            max_epochs: 16,
            optimizer: OptimizerKind::Adam,
            tune_mode: TuneMode::Both,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::input("batch_size and max_epochs must be positive"));
        }
        if self.patience > self.max_epochs {
            return Err(Error::input("patience cannot exceed max_epochs"));
        }
        Ok(())
    }
}

/// One `(x, y)` training or evaluation pair in token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub x: Vec<usize>,
    pub y: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureModel {
    pub prompt_set: PromptSet,
    /// Softmax-parameterized `p(t | r)`.
    pub mixture_logits: Vec<f64>,
    pub log_temperature: f64,
    pub weighting: WeightingMode,
}

/// Gradient of the summed log-loss with respect to every mixture parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureGrad {
    pub logits: Vec<f64>,
    pub log_temperature: f64,
    /// Per prompt, `n × d`.
    pub slots: Vec<Vec<f64>>,
    /// Per prompt, `(L+1) × n × d`.
    pub deltas: Vec<Vec<f64>>,
}

/// Result of a loss/gradient pass over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: MixtureGrad,
    /// `Σ_examples q(t | x, y)`.
    pub posterior_sum: Vec<f64>,
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `Σ_t w_t · p_t` over equally long distributions.
pub(crate) fn combine(weights: &[f64], comps: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; comps[0].len()];
    for (wt, c) in weights.iter().zip(comps) {
        for (o, p) in out.iter_mut().zip(c) {
            *o += wt * p;
        }
    }
    out
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Forward state of one prompt on one query.
struct PromptPass {
    trace: Trace,
    blank: usize,
    log_p_y: f64,
    /// Trace over the x-masked sequence and the x positions, when weighting is
    /// data-dependent.
    x_pass: Option<(Trace, Vec<(usize, usize)>, f64)>,
}

/// Per-prompt `log p̂(x | t)` from the x-masked instantiation.
fn x_masked_pass(prompt: &SoftPrompt, x: &[usize], lm: &MaskedLm) -> Result<(Trace, Vec<(usize, usize)>, f64, Vec<crate::lm::Origin>)> {
    let seq = prompt.instantiate_x_masked(x, lm)?;
    let targets: Vec<(usize, usize)> = seq
        .origin
        .iter()
        .enumerate()
        .filter_map(|(pos, o)| match o {
            crate::lm::Origin::X(j) => Some((pos, x[*j])),
            _ => None,
        })
        .collect();
    let trace = lm.trace(&seq, Some(&prompt.deep))?;
    let log_px: f64 = lm.log_probs_of(&trace, &targets).iter().sum();
    Ok((trace, targets, log_px, seq.origin))
}

/// `softmax(logits + log p(x | t) / T)` with `T = exp(log_temperature)`.
pub fn bayes_weights(logits: &[f64], log_temperature: f64, log_px: &[f64]) -> Vec<f64> {
    let inv_t = (-log_temperature).exp();
    let a: Vec<f64> = logits.iter().zip(log_px).map(|(l, lp)| l + inv_t * lp).collect();
    softmax(&a)
}

impl MixtureModel {
    /// Uniform mixture (zero logits) at temperature 1.
    pub fn new(prompt_set: PromptSet, weighting: WeightingMode) -> Self {
        let k = prompt_set.len();
        Self {
            prompt_set,
            mixture_logits: vec![0.0; k],
            log_temperature: 0.0,
            weighting,
        }
    }

    pub fn len(&self) -> usize {
        self.prompt_set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompt_set.is_empty()
    }

    /// Static prior `p(t | r)`.
    pub fn prior(&self) -> Vec<f64> {
        softmax(&self.mixture_logits)
    }

    /// `p̂(x | t)`: with every x position and the y position masked, the
    /// product over x positions of the probability of the true x token.
    pub fn estimate_x_likelihood(prompt: &SoftPrompt, x: &[usize], lm: &MaskedLm) -> Result<f64> {
        Ok(x_masked_pass(prompt, x, lm)?.2.exp())
    }

    fn log_x_likelihoods(&self, x: &[usize], lm: &MaskedLm) -> Result<Vec<f64>> {
        self.prompt_set
            .prompts
            .iter()
            .map(|p| Ok(x_masked_pass(p, x, lm)?.2))
            .collect()
    }

    /// Bayes weights `p(t | r, x) ∝ p(t | r) · p̂(x | t)^{1/T}`, regardless of
    /// the configured weighting mode.
    pub fn data_dependent_weights(&self, x: &[usize], lm: &MaskedLm) -> Result<Vec<f64>> {
        let log_px = self.log_x_likelihoods(x, lm)?;
        Ok(self.bayes_weights(&log_px))
    }

    fn bayes_weights(&self, log_px: &[f64]) -> Vec<f64> {
        bayes_weights(&self.mixture_logits, self.log_temperature, log_px)
    }

    /// Mixture weights used for query `x` under the configured mode.
    pub fn weights(&self, x: &[usize], lm: &MaskedLm) -> Result<Vec<f64>> {
        match self.weighting {
            WeightingMode::Static => Ok(self.prior()),
            WeightingMode::DataDependent => self.data_dependent_weights(x, lm),
        }
    }

    /// `p_LM(· | t, x)` for every prompt.
    pub fn component_distributions(&self, x: &[usize], lm: &MaskedLm) -> Result<Vec<Vec<f64>>> {
        self.prompt_set
            .prompts
            .iter()
            .map(|p| {
                let seq = p.instantiate(x, lm)?;
                lm.predict_blank(&seq, Some(&p.deep))
            })
            .collect()
    }

    /// Ensemble distribution `Σ_t w_t(x) · p_LM(· | t, x)`.
    pub fn predict(&self, x: &[usize], lm: &MaskedLm) -> Result<Vec<f64>> {
        let w = self.weights(x, lm)?;
        let comps = self.component_distributions(x, lm)?;
        Ok(combine(&w, &comps))
    }

    /// Summed natural-log loss `Σ −ln p(y | x, r)`.
    pub fn loss(&self, batch: &[Query], lm: &MaskedLm) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::input("loss needs a nonempty batch"));
        }
        let mut total = 0.0;
        for q in batch {
            if q.y >= lm.vocab_size() {
                return Err(Error::input(format!("answer id {} is not in the vocabulary", q.y)));
            }
            total += -self.log_prob(q, lm)?;
        }
        Ok(total)
    }

    /// `ln p(y | x, r)` computed in log space.
    pub fn log_prob(&self, q: &Query, lm: &MaskedLm) -> Result<f64> {
        let mut terms = Vec::with_capacity(self.len());
        let w = self.weights(&q.x, lm)?;
        for (p, wt) in self.prompt_set.prompts.iter().zip(&w) {
            let seq = p.instantiate(&q.x, lm)?;
            let trace = lm.trace(&seq, Some(&p.deep))?;
            let lp = lm.log_probs_of(&trace, &[(seq.blank_y.expect("prompts always have a y blank"), q.y)])[0];
            terms.push(wt.ln() + lp);
        }
        Ok(log_sum_exp(&terms))
    }

    fn pass(&self, p: &SoftPrompt, q: &Query, lm: &MaskedLm) -> Result<(PromptPass, Vec<crate::lm::Origin>, Option<Vec<crate::lm::Origin>>)> {
        let seq = p.instantiate(&q.x, lm)?;
        let blank = seq.blank_y.expect("prompts always have a y blank");
        let trace = lm.trace(&seq, Some(&p.deep))?;
        let log_p_y = lm.log_probs_of(&trace, &[(blank, q.y)])[0];
        let (x_pass, x_origin) = match self.weighting {
            WeightingMode::Static => (None, None),
            WeightingMode::DataDependent => {
                let (t, targets, lp, origin) = x_masked_pass(p, &q.x, lm)?;
                (Some((t, targets, lp)), Some(origin))
            }
        };
        Ok((
            PromptPass {
                trace,
                blank,
                log_p_y,
                x_pass,
            },
            seq.origin,
            x_origin,
        ))
    }

    /// Summed loss over `batch` with its gradient. Vector and Δ gradients are
    /// only computed when `with_vectors` is set.
    pub fn loss_and_grad(&self, batch: &[Query], lm: &MaskedLm, with_vectors: bool) -> Result<LossGrad> {
        let k = self.len();
        let prompts = &self.prompt_set.prompts;
        let mut grad = MixtureGrad {
            logits: vec![0.0; k],
            log_temperature: 0.0,
            slots: prompts.iter().map(|p| vec![0.0; p.slots.len()]).collect(),
            deltas: prompts.iter().map(|p| vec![0.0; p.deep.deltas.len()]).collect(),
        };
        let mut posterior_sum = vec![0.0; k];
        let mut loss = 0.0;
        let inv_t = (-self.log_temperature).exp();
        for q in batch {
            if q.y >= lm.vocab_size() {
                return Err(Error::input(format!("answer id {} is not in the vocabulary", q.y)));
            }
            let mut passes = Vec::with_capacity(k);
            for p in prompts {
                passes.push(self.pass(p, q, lm)?);
            }
            let w = match self.weighting {
                WeightingMode::Static => self.prior(),
                WeightingMode::DataDependent => {
                    let log_px: Vec<f64> = passes.iter().map(|(pp, _, _)| pp.x_pass.as_ref().unwrap().2).collect();
                    self.bayes_weights(&log_px)
                }
            };
            let joint: Vec<f64> = w.iter().zip(&passes).map(|(wt, (pp, _, _))| wt.ln() + pp.log_p_y).collect();
            let log_mix = log_sum_exp(&joint);
            loss -= log_mix;
            let post: Vec<f64> = joint.iter().map(|j| (j - log_mix).exp()).collect();
            for t in 0..k {
                posterior_sum[t] += post[t];
                let dw = w[t] - post[t];
                grad.logits[t] += dw;
                if let Some((_, _, log_px)) = &passes[t].0.x_pass {
                    grad.log_temperature += dw * (-log_px * inv_t);
                }
            }
            if !with_vectors {
                continue;
            }
            for (t, (pp, origin, x_origin)) in passes.iter().enumerate() {
                let n = prompts[t].slot_count();
                let g = lm.prompt_grads(
                    &pp.trace,
                    origin,
                    n,
                    &[Seed {
                        pos: pp.blank,
                        token: q.y,
                        weight: post[t],
                    }],
                );
                add_into(&mut grad.slots[t], &g.slots);
                add_into(&mut grad.deltas[t], &g.deltas);
                if let (Some((xt, targets, _)), Some(xo)) = (&pp.x_pass, x_origin) {
                    let coef = -(w[t] - post[t]) * inv_t;
                    let seeds: Vec<Seed> = targets
                        .iter()
                        .map(|&(pos, token)| Seed { pos, token, weight: coef })
                        .collect();
                    let g = lm.prompt_grads(xt, xo, n, &seeds);
                    add_into(&mut grad.slots[t], &g.slots);
                    add_into(&mut grad.deltas[t], &g.deltas);
                }
            }
        }
        Ok(LossGrad {
            loss,
            grad,
            posterior_sum,
        })
    }

    /// Posterior `q(t | x, y) ∝ w_t(x) · p_LM(y | t, x)`.
    pub fn posterior(&self, q: &Query, lm: &MaskedLm) -> Result<Vec<f64>> {
        let lg = self.loss_and_grad(std::slice::from_ref(q), lm, false)?;
        Ok(lg.posterior_sum)
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

#[cfg(test)]
mod tests;
