//! Desk-scale pretraining on the synthetic corpus.
//!
//! Fact sentences are trained with exactly their fact token masked; distractor
//! sentences mask one position drawn from the run seed.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{sentence_nll_and_grad, transformer, LmConfig, MaskedLm, Origin, Weights};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::vocab::{Vocabulary, MASK_ID};
use crate::world::CorpusSentence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
    /// Fraction of fact sentences withheld to measure masked-fact accuracy.
    pub held_out_fraction: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            adam: AdamConfig {
                lr: 3e-3,
                ..AdamConfig::default()
            },
            clip_norm: 1.0,
            held_out_fraction: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    /// Mean masked-token cross-entropy per epoch on the training sentences.
    pub train_loss: Vec<f64>,
    pub held_out_loss_init: f64,
    pub held_out_loss_final: f64,
    pub held_out_accuracy: f64,
    pub held_out_sentences: usize,
}

struct Example {
    ids: Vec<usize>,
    target: Option<usize>,
}

fn encode(corpus: &[CorpusSentence], vocab: &Vocabulary) -> Result<Vec<Example>> {
    corpus
        .iter()
        .map(|s| {
            let ids = s
                .tokens
                .iter()
                .map(|t| {
                    vocab
                        .id(t)
                        .ok_or_else(|| Error::input(format!("corpus token {t:?} is not in the vocabulary")))
                })
                .collect::<Result<Vec<_>>>()?;
            if ids.is_empty() {
                return Err(Error::input("empty corpus sentence"));
            }
            if let Some(i) = s.fact_token_index {
                if i >= ids.len() {
                    return Err(Error::input("fact token index outside its sentence"));
                }
            }
            Ok(Example {
                ids,
                target: s.fact_token_index,
            })
        })
        .collect()
}

fn masked(ids: &[usize], pos: usize) -> Vec<usize> {
    let mut m = ids.to_vec();
    m[pos] = MASK_ID;
    m
}

fn masked_nll(lm: &MaskedLm, ids: &[usize], pos: usize) -> f64 {
    let input = masked(ids, pos);
    let vectors: Vec<f64> = input.iter().flat_map(|&i| lm.embedding(i).iter().copied()).collect();
    let trace = transformer::run(lm, &vectors, &vec![Origin::Token; input.len()], None);
    -transformer::log_probs_at(lm, &trace, pos)[ids[pos]]
}

fn mean_fact_nll(lm: &MaskedLm, set: &[Example]) -> f64 {
    let facts: Vec<&Example> = set.iter().filter(|e| e.target.is_some()).collect();
    if facts.is_empty() {
        return f64::NAN;
    }
    facts
        .iter()
        .map(|e| masked_nll(lm, &e.ids, e.target.unwrap()))
        .sum::<f64>()
        / facts.len() as f64
}

/// Fraction of fact sentences whose masked fact token is the LM's top
/// prediction (ties broken toward the lower token id).
pub fn masked_fact_accuracy(lm: &MaskedLm, corpus: &[CorpusSentence], vocab: &Vocabulary) -> Result<f64> {
    let set = encode(corpus, vocab)?;
    Ok(fact_accuracy(lm, &set))
}

fn fact_accuracy(lm: &MaskedLm, set: &[Example]) -> f64 {
    let mut hits = 0usize;
    let mut total = 0usize;
    for e in set {
        let Some(pos) = e.target else { continue };
        let input = masked(&e.ids, pos);
        let vectors: Vec<f64> = input.iter().flat_map(|&i| lm.embedding(i).iter().copied()).collect();
        let trace = transformer::run(lm, &vectors, &vec![Origin::Token; input.len()], None);
        let lp = transformer::log_probs_at(lm, &trace, pos);
        let gold = lp[e.ids[pos]];
        let beaten = lp
            .iter()
            .enumerate()
            .any(|(w, &p)| p > gold || (p == gold && w < e.ids[pos]));
        total += 1;
        if !beaten {
            hits += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Trains a fresh LM on `corpus`. The result is rounded to `f32` precision so
/// that it survives a checkpoint round trip unchanged.
pub fn pretrain(
    config: LmConfig,
    corpus: &[CorpusSentence],
    vocab: &Vocabulary,
    pcfg: &PretrainConfig,
) -> Result<(MaskedLm, PretrainReport)> {
    if corpus.is_empty() {
        return Err(Error::input("pretraining corpus is empty"));
    }
    if config.vocab_size != vocab.len() {
        return Err(Error::input(format!(
            "LM vocab_size {} differs from vocabulary size {}",
            config.vocab_size,
            vocab.len()
        )));
    }
    if pcfg.batch_size == 0 {
        return Err(Error::input("batch_size must be positive"));
    }
    let examples = encode(corpus, vocab)?;
    if let Some(e) = examples.iter().find(|e| e.ids.len() > config.max_len) {
        return Err(Error::input(format!(
            "corpus sentence of length {} exceeds max_len {}",
            e.ids.len(),
            config.max_len
        )));
    }
    let mut lm = MaskedLm::new(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(pcfg.seed);

    // Hold out a slice of fact sentences; a one-sentence corpus is held out as
    // a copy so memorization can still be checked.
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng);
    let n_fact = examples.iter().filter(|e| e.target.is_some()).count();
    let n_hold = ((n_fact as f64) * pcfg.held_out_fraction).floor() as usize;
    let mut held_out = Vec::new();
    let mut train = Vec::new();
    for &i in &order {
        if examples[i].target.is_some() && held_out.len() < n_hold {
            held_out.push(i);
        } else {
            train.push(i);
        }
    }
    let held: Vec<&Example> = if held_out.is_empty() {
        train.iter().map(|&i| &examples[i]).collect()
    } else {
        held_out.iter().map(|&i| &examples[i]).collect()
    };
    let held_owned: Vec<Example> = held
        .iter()
        .map(|e| Example {
            ids: e.ids.clone(),
            target: e.target,
        })
        .collect();

    let held_out_loss_init = mean_fact_nll(&lm, &held_owned);
    let mut adam = Adam::new(pcfg.adam);
    let mut grads = Weights::zeros(&lm.config);
    let mut train_loss = Vec::with_capacity(pcfg.epochs);

    for epoch in 0..pcfg.epochs {
        train.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in train.chunks(pcfg.batch_size) {
            grads.fill_zero();
            let mut batch_loss = 0.0;
            for &i in batch {
                let e = &examples[i];
                let pos = match e.target {
                    Some(p) => p,
                    None => rng.random_range(0..e.ids.len()),
                };
                let input = masked(&e.ids, pos);
                batch_loss += sentence_nll_and_grad(&lm, &input, &[(pos, e.ids[pos])], &mut grads);
            }
            if !batch_loss.is_finite() {
                return Err(Error::Numerical(format!("non-finite pretraining loss in epoch {}", epoch + 1)));
            }
            epoch_loss += batch_loss;
            let scale = 1.0 / batch.len() as f64;
            let mut sq = 0.0;
            for t in grads.tensors_mut() {
                for g in t.iter_mut() {
                    *g *= scale;
                    sq += *g * *g;
                }
            }
            let norm = sq.sqrt();
            if pcfg.clip_norm > 0.0 && norm > pcfg.clip_norm {
                let c = pcfg.clip_norm / norm;
                for t in grads.tensors_mut() {
                    t.iter_mut().for_each(|g| *g *= c);
                }
            }
            adam.tick();
            for (k, (p, g)) in lm.weights.tensors_mut().into_iter().zip(grads.tensors()).enumerate() {
                adam.update(k, p, g);
            }
        }
        let mean = epoch_loss / train.len().max(1) as f64;
        log::debug!("pretrain epoch {} loss {:.4}", epoch + 1, mean);
        train_loss.push(mean);
    }

    lm.quantize();
    lm.check_finite()?;
    let report = PretrainReport {
        train_loss,
        held_out_loss_init,
        held_out_loss_final: mean_fact_nll(&lm, &held_owned),
        held_out_accuracy: fact_accuracy(&lm, &held_owned),
        held_out_sentences: held_owned.len(),
    };
    Ok((lm, report))
}
