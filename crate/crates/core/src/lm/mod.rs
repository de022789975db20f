//! A small masked transformer LM whose forward pass takes raw embedding
//! vectors, supports additive per-layer perturbations at prompt positions, and
//! returns gradients with respect to those inputs.
//!
//! All arithmetic is `f64`. Checkpoints are stored as `f32`; [`MaskedLm::quantize`]
//! rounds the in-memory weights so that a saved model reloads bit-identically.

mod pretrain;
pub(crate) mod transformer;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use pretrain::{masked_fact_accuracy, pretrain, PretrainConfig, PretrainReport};
pub(crate) use transformer::{Seed, Trace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub seed: u64,
    /// Share the output projection with the embedding table.
    pub tie_output: bool,
    pub init_std: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            d: 32,
            layers: 2,
            heads: 4,
            ffn_dim: 128,
            vocab_size: 0,
            max_len: 24,
            seed: 0,
            tie_output: true,
            init_std: 0.02,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::input(format!(
                "embedding dimension {} must be a positive multiple of heads {}",
                self.d, self.heads
            )));
        }
        if self.layers == 0 {
            return Err(Error::input("at least one encoder layer is required"));
        }
        if self.vocab_size < 2 || self.max_len == 0 || self.ffn_dim == 0 {
            return Err(Error::input("vocab_size, max_len and ffn_dim must be positive"));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(Error::input("init_std must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

/// Parameters of one pre-norm encoder block. Matrices are row-major `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_g: Vec<f64>,
    pub ln1_b: Vec<f64>,
    pub wq: Vec<f64>,
    pub bq: Vec<f64>,
    pub wk: Vec<f64>,
    pub bk: Vec<f64>,
    pub wv: Vec<f64>,
    pub bv: Vec<f64>,
    pub wo: Vec<f64>,
    pub bo: Vec<f64>,
    pub ln2_g: Vec<f64>,
    pub ln2_b: Vec<f64>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

const LAYER_TENSORS: [&str; 16] = [
    "ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2_g", "ln2_b", "w1", "b1",
    "w2", "b2",
];

impl LayerWeights {
    fn shapes(d: usize, f: usize) -> [Vec<usize>; 16] {
        [
            vec![d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d],
            vec![d],
            vec![d, f],
            vec![f],
            vec![f, d],
            vec![d],
        ]
    }

    fn fields(&self) -> [&Vec<f64>; 16] {
        [
            &self.ln1_g, &self.ln1_b, &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv,
            &self.wo, &self.bo, &self.ln2_g, &self.ln2_b, &self.w1, &self.b1, &self.w2, &self.b2,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Vec<f64>; 16] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

/// Every trainable tensor of the LM. Also used as the gradient accumulator
/// during pretraining.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub embed: Vec<f64>,
    pub pos: Vec<f64>,
    pub layers: Vec<LayerWeights>,
    pub lnf_g: Vec<f64>,
    pub lnf_b: Vec<f64>,
    /// Untied output projection `|V| × d`; empty when tied to `embed`.
    pub head: Vec<f64>,
    pub head_bias: Vec<f64>,
}

/// A named tensor shape in canonical storage order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Weights {
    pub fn zeros(cfg: &LmConfig) -> Self {
        let (d, f, v) = (cfg.d, cfg.ffn_dim, cfg.vocab_size);
        let layer = LayerWeights {
            ln1_g: vec![0.0; d],
            ln1_b: vec![0.0; d],
            wq: vec![0.0; d * d],
            bq: vec![0.0; d],
            wk: vec![0.0; d * d],
            bk: vec![0.0; d],
            wv: vec![0.0; d * d],
            bv: vec![0.0; d],
            wo: vec![0.0; d * d],
            bo: vec![0.0; d],
            ln2_g: vec![0.0; d],
            ln2_b: vec![0.0; d],
            w1: vec![0.0; d * f],
            b1: vec![0.0; f],
            w2: vec![0.0; f * d],
            b2: vec![0.0; d],
        };
        Self {
            embed: vec![0.0; v * d],
            pos: vec![0.0; cfg.max_len * d],
            layers: vec![layer; cfg.layers],
            lnf_g: vec![0.0; d],
            lnf_b: vec![0.0; d],
            head: if cfg.tie_output { Vec::new() } else { vec![0.0; v * d] },
            head_bias: vec![0.0; v],
        }
    }

    /// Random initialization: normal(0, init_std) for matrices and embeddings,
    /// unit gains and zero biases for normalization, zero output bias. An untied
    /// head starts at zero so the untrained model predicts uniformly.
    pub fn init(cfg: &LmConfig) -> Self {
        let mut w = Self::zeros(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0, cfg.init_std).expect("validated std");
        let mut fill = |t: &mut Vec<f64>| t.iter_mut().for_each(|x| *x = normal.sample(&mut rng));
        fill(&mut w.embed);
        fill(&mut w.pos);
        for layer in &mut w.layers {
            layer.ln1_g.fill(1.0);
            layer.ln2_g.fill(1.0);
            fill(&mut layer.wq);
            fill(&mut layer.wk);
            fill(&mut layer.wv);
            fill(&mut layer.wo);
            fill(&mut layer.w1);
            fill(&mut layer.w2);
        }
        w.lnf_g.fill(1.0);
        w
    }

    pub fn specs(cfg: &LmConfig) -> Vec<TensorSpec> {
        let (d, v) = (cfg.d, cfg.vocab_size);
        let mut out = vec![
            TensorSpec { name: "embed".into(), shape: vec![v, d] },
            TensorSpec { name: "pos".into(), shape: vec![cfg.max_len, d] },
        ];
        for l in 0..cfg.layers {
            for (name, shape) in LAYER_TENSORS.iter().zip(LayerWeights::shapes(d, cfg.ffn_dim)) {
                out.push(TensorSpec { name: format!("layer{l}.{name}"), shape });
            }
        }
        out.push(TensorSpec { name: "lnf_g".into(), shape: vec![d] });
        out.push(TensorSpec { name: "lnf_b".into(), shape: vec![d] });
        if !cfg.tie_output {
            out.push(TensorSpec { name: "head".into(), shape: vec![v, d] });
        }
        out.push(TensorSpec { name: "head_bias".into(), shape: vec![v] });
        out
    }

    /// Tensors in the same order as [`Weights::specs`].
    pub fn tensors(&self) -> Vec<&Vec<f64>> {
        let mut out = vec![&self.embed, &self.pos];
        for l in &self.layers {
            out.extend(l.fields());
        }
        out.push(&self.lnf_g);
        out.push(&self.lnf_b);
        if !self.head.is_empty() {
            out.push(&self.head);
        }
        out.push(&self.head_bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = vec![&mut self.embed, &mut self.pos];
        for l in &mut self.layers {
            out.extend(l.fields_mut());
        }
        out.push(&mut self.lnf_g);
        out.push(&mut self.lnf_b);
        if !self.head.is_empty() {
            out.push(&mut self.head);
        }
        out.push(&mut self.head_bias);
        out
    }

    pub fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill(0.0);
        }
    }
}

/// Where each position of an [`EmbeddingSequence`] came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    /// Tunable prompt slot `i`; perturbations apply here.
    Slot(usize),
    /// The `j`-th token of the subject x.
    X(usize),
    /// The masked answer position.
    YMask,
    /// A literal vocabulary token (plain sentences).
    Token,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    /// Row-major `len × d`.
    pub vectors: Vec<f64>,
    pub d: usize,
    pub blank_y: Option<usize>,
    pub origin: Vec<Origin>,
}

impl EmbeddingSequence {
    pub fn len(&self) -> usize {
        self.origin.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origin.is_empty()
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.d..(i + 1) * self.d]
    }

    /// Number of distinct prompt slots (highest slot index + 1).
    pub fn slot_count(&self) -> usize {
        self.origin
            .iter()
            .filter_map(|o| match o {
                Origin::Slot(i) => Some(i + 1),
                _ => None,
            })
            .max()
            .unwrap_or(0)
    }
}

/// Additive offsets `Δ[layer][slot]` for layers `0..=L`, stored `(L+1) × n × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPerturbations {
    pub layers: usize,
    pub slots: usize,
    pub d: usize,
    pub deltas: Vec<f64>,
}

impl LayerPerturbations {
    pub fn zeros(cfg: &LmConfig, slots: usize) -> Self {
        Self {
            layers: cfg.layers,
            slots,
            d: cfg.d,
            deltas: vec![0.0; (cfg.layers + 1) * slots * cfg.d],
        }
    }

    pub fn get(&self, layer: usize, slot: usize) -> &[f64] {
        let o = (layer * self.slots + slot) * self.d;
        &self.deltas[o..o + self.d]
    }

    pub fn get_mut(&mut self, layer: usize, slot: usize) -> &mut [f64] {
        let o = (layer * self.slots + slot) * self.d;
        &mut self.deltas[o..o + self.d]
    }

    pub fn norm(&self) -> f64 {
        self.deltas.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.deltas.iter().all(|&x| x == 0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardResult {
    /// Per position, a length-|V| log-distribution.
    pub log_probs: Vec<Vec<f64>>,
    /// `hidden[l]` is the `len × d` state after layer `l` (including Δ⁽ˡ⁾);
    /// `hidden[0]` is the perturbed input.
    pub hidden: Vec<Vec<f64>>,
}

/// Gradients of a negative log-likelihood with respect to the prompt inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptGrads {
    /// `n × d`, one row per prompt slot (summed over repeated occurrences).
    pub slots: Vec<f64>,
    /// Same layout as [`LayerPerturbations::deltas`].
    pub deltas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedLm {
    pub config: LmConfig,
    pub weights: Weights,
}

impl MaskedLm {
    pub fn new(config: LmConfig) -> Result<Self> {
        config.validate()?;
        let weights = Weights::init(&config);
        Ok(Self { config, weights })
    }

    pub fn from_weights(config: LmConfig, weights: Weights) -> Result<Self> {
        config.validate()?;
        let specs = Weights::specs(&config);
        let tensors = weights.tensors();
        if specs.len() != tensors.len() || specs.iter().zip(&tensors).any(|(s, t)| s.len() != t.len()) {
            return Err(Error::input("weight shapes do not match the configuration"));
        }
        Ok(Self { config, weights })
    }

    pub fn d(&self) -> usize {
        self.config.d
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn embedding(&self, id: usize) -> &[f64] {
        let d = self.config.d;
        &self.weights.embed[id * d..(id + 1) * d]
    }

    pub fn check_finite(&self) -> Result<()> {
        for (spec, t) in Weights::specs(&self.config).iter().zip(self.weights.tensors()) {
            if t.iter().any(|x| !x.is_finite()) {
                return Err(Error::Internal(format!("non-finite value in LM tensor {}", spec.name)));
            }
        }
        Ok(())
    }

    /// Round every weight to the nearest `f32`, matching checkpoint storage.
    pub fn quantize(&mut self) {
        for t in self.weights.tensors_mut() {
            for x in t.iter_mut() {
                *x = *x as f32 as f64;
            }
        }
    }

    /// SHA-256 over the little-endian bytes of all weights, used to verify that
    /// prompt tuning leaves the LM untouched.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for t in self.weights.tensors() {
            for x in t {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn embed_tokens(&self, ids: &[usize]) -> Result<EmbeddingSequence> {
        let d = self.config.d;
        let mut vectors = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= self.config.vocab_size {
                return Err(Error::input(format!(
                    "token id {id} out of range for vocabulary of {}",
                    self.config.vocab_size
                )));
            }
            vectors.extend_from_slice(self.embedding(id));
        }
        Ok(EmbeddingSequence {
            vectors,
            d,
            blank_y: ids.iter().position(|&i| i == crate::vocab::MASK_ID),
            origin: vec![Origin::Token; ids.len()],
        })
    }

    fn check_sequence(&self, seq: &EmbeddingSequence, perturb: Option<&LayerPerturbations>) -> Result<()> {
        if seq.d != self.config.d || seq.vectors.len() != seq.len() * seq.d {
            return Err(Error::input("embedding sequence dimension does not match the LM"));
        }
        if seq.is_empty() || seq.len() > self.config.max_len {
            return Err(Error::input(format!(
                "sequence length {} outside 1..={}",
                seq.len(),
                self.config.max_len
            )));
        }
        if let Some(p) = perturb {
            if p.layers != self.config.layers || p.d != self.config.d || p.slots < seq.slot_count() {
                return Err(Error::input(format!(
                    "perturbation shape ({}+1)×{}×{} does not match LM layers {} / d {} / slots {}",
                    p.layers,
                    p.slots,
                    p.d,
                    self.config.layers,
                    self.config.d,
                    seq.slot_count()
                )));
            }
            if p.deltas.len() != (p.layers + 1) * p.slots * p.d {
                return Err(Error::input("perturbation tensor has the wrong length"));
            }
        }
        Ok(())
    }

    pub(crate) fn trace(&self, seq: &EmbeddingSequence, perturb: Option<&LayerPerturbations>) -> Result<Trace> {
        self.check_sequence(seq, perturb)?;
        Ok(transformer::run(self, &seq.vectors, &seq.origin, perturb))
    }

    /// Full forward pass: every position's log-distribution plus all hidden states.
    pub fn forward(&self, seq: &EmbeddingSequence, perturb: Option<&LayerPerturbations>) -> Result<ForwardResult> {
        self.check_finite()?;
        let trace = self.trace(seq, perturb)?;
        let log_probs = (0..seq.len()).map(|p| transformer::log_probs_at(self, &trace, p)).collect();
        Ok(ForwardResult {
            log_probs,
            hidden: trace.hidden,
        })
    }

    /// Distribution over the vocabulary at the masked answer position.
    pub fn predict_blank(&self, seq: &EmbeddingSequence, perturb: Option<&LayerPerturbations>) -> Result<Vec<f64>> {
        let blank = seq
            .blank_y
            .ok_or_else(|| Error::input("sequence has no masked answer position"))?;
        let trace = self.trace(seq, perturb)?;
        Ok(transformer::log_probs_at(self, &trace, blank)
            .into_iter()
            .map(f64::exp)
            .collect())
    }

    /// Log-probability of `token` at each requested position, sharing one forward pass.
    pub(crate) fn log_probs_of(&self, trace: &Trace, targets: &[(usize, usize)]) -> Vec<f64> {
        targets
            .iter()
            .map(|&(pos, tok)| transformer::log_probs_at(self, trace, pos)[tok])
            .collect()
    }

    /// Gradients of `−log p(gold)` at the answer position with respect to the
    /// prompt-slot input vectors and every Δ entry. The LM itself is borrowed
    /// immutably and receives nothing.
    pub fn grad(
        &self,
        seq: &EmbeddingSequence,
        perturb: Option<&LayerPerturbations>,
        gold_id: usize,
    ) -> Result<PromptGrads> {
        if gold_id >= self.config.vocab_size {
            return Err(Error::input(format!("gold id {gold_id} out of range")));
        }
        let blank = seq
            .blank_y
            .ok_or_else(|| Error::input("sequence has no masked answer position"))?;
        let trace = self.trace(seq, perturb)?;
        let slots = perturb.map(|p| p.slots).unwrap_or_else(|| seq.slot_count());
        Ok(self.prompt_grads(&trace, &seq.origin, slots, &[Seed { pos: blank, token: gold_id, weight: 1.0 }]))
    }

    /// Backpropagates `Σ weight · (−log p_pos(token))` to the prompt slots and Δ.
    pub(crate) fn prompt_grads(&self, trace: &Trace, origin: &[Origin], slots: usize, seeds: &[Seed]) -> PromptGrads {
        transformer::backward_prompt(self, trace, origin, slots, seeds)
    }

    /// Per-dimension mean and (population) standard deviation over all
    /// embedding rows.
    pub fn fit_embedding_gaussian(&self) -> (Vec<f64>, Vec<f64>) {
        let d = self.config.d;
        let rows = self.weights.embed.len() / d;
        let mut mean = vec![0.0; d];
        let mut m2 = vec![0.0; d];
        // Welford, one pass.
        for (k, row) in self.weights.embed.chunks_exact(d).enumerate() {
            let n = (k + 1) as f64;
            for j in 0..d {
                let delta = row[j] - mean[j];
                mean[j] += delta / n;
                m2[j] += delta * (row[j] - mean[j]);
            }
        }
        let std = m2.iter().map(|s| (s / rows as f64).max(0.0).sqrt()).collect();
        (mean, std)
    }
}

/// Masked-LM cross-entropy gradient of a plain token sentence, used by pretraining.
pub(crate) fn sentence_nll_and_grad(
    lm: &MaskedLm,
    ids: &[usize],
    targets: &[(usize, usize)],
    grads: &mut Weights,
) -> f64 {
    let vectors: Vec<f64> = ids.iter().flat_map(|&i| lm.embedding(i).iter().copied()).collect();
    let origin = vec![Origin::Token; ids.len()];
    let trace = transformer::run(lm, &vectors, &origin, None);
    let seeds: Vec<Seed> = targets
        .iter()
        .map(|&(pos, token)| Seed { pos, token, weight: 1.0 })
        .collect();
    transformer::backward_full(lm, &trace, ids, &seeds, grads)
}

#[cfg(test)]
mod grad_tests;
