//! WebAssembly bindings for the static page in `www/`.
//!
//! Each exported function wraps a plain Rust function of the same name with a
//! `_impl` suffix so the logic can be tested natively.

use softmix::eval::{effective_prompt_count, paired_permutation_test, sign_test, Metrics, PermutationMode};
use softmix::mixture::bayes_weights;
use wasm_bindgen::prelude::*;

/// Sampled permutation draws used above the exact-enumeration limit.
const RESAMPLES: usize = 20_000;
const EXACT_LIMIT: usize = 20;

/// `[w_1..w_K, H, 2^H]`. With an empty `log_px` the weights are the static
/// prior `softmax(logits)`.
pub fn mixture_weights_impl(logits: &[f64], log_temperature: f64, log_px: &[f64]) -> Result<Vec<f64>, String> {
    if logits.is_empty() {
        return Err("need at least one prompt".into());
    }
    if !log_px.is_empty() && log_px.len() != logits.len() {
        return Err(format!("{} log-likelihoods for {} prompts", log_px.len(), logits.len()));
    }
    if logits.iter().chain(log_px).any(|v| !v.is_finite()) || !log_temperature.is_finite() {
        return Err("inputs must be finite".into());
    }
    let zeros = vec![0.0; logits.len()];
    let px = if log_px.is_empty() { &zeros[..] } else { log_px };
    let mut w = bayes_weights(logits, log_temperature, px);
    let (h, eff) = effective_prompt_count(&w).map_err(|e| e.to_string())?;
    w.extend([h, eff]);
    Ok(w)
}

fn parse_bits(s: &str) -> Result<Vec<bool>, String> {
    s.chars()
        .filter(|c| !c.is_whitespace() && *c != ',')
        .map(|c| match c {
            '1' => Ok(true),
            '0' => Ok(false),
            other => Err(format!("unexpected character {other:?}; use 0 and 1")),
        })
        .collect()
}

/// Per-example correctness strings such as `"1101 0011"` → `[sign p, permutation p, exact (1 or 0)]`.
pub fn significance_impl(a: &str, b: &str, seed: u64) -> Result<Vec<f64>, String> {
    let (a, b) = (parse_bits(a)?, parse_bits(b)?);
    if a.len() != b.len() {
        return Err(format!("system A has {} examples, system B has {}", a.len(), b.len()));
    }
    let sign = sign_test(&a, &b).map_err(|e| e.to_string())?;
    let score = |v: &[bool]| v.iter().map(|&x| f64::from(u8::from(x))).collect::<Vec<f64>>();
    let exact = a.len() <= EXACT_LIMIT;
    let mode = if exact {
        PermutationMode::Exact
    } else {
        PermutationMode::Sampled {
            resamples: RESAMPLES,
            seed,
        }
    };
    let perm = paired_permutation_test(&score(&a), &score(&b), mode).map_err(|e| e.to_string())?;
    Ok(vec![sign, perm, f64::from(u8::from(exact))])
}

/// Whitespace- or comma-separated 1-based ranks → `[P@1, P@10, MRR, n]`.
pub fn ranking_metrics_impl(ranks: &str) -> Result<Vec<f64>, String> {
    let ranks = ranks
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|_| format!("{s:?} is not a rank")))
        .collect::<Result<Vec<_>, _>>()?;
    let m = Metrics::from_ranks(&ranks).map_err(|e| e.to_string())?;
    Ok(vec![m.p_at_1, m.p_at_10, m.mrr, m.n as f64])
}

#[wasm_bindgen]
pub fn mixture_weights(logits: Vec<f64>, log_temperature: f64, log_px: Vec<f64>) -> Result<Vec<f64>, JsError> {
    mixture_weights_impl(&logits, log_temperature, &log_px).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn significance(a: &str, b: &str, seed: u32) -> Result<Vec<f64>, JsError> {
    significance_impl(a, b, u64::from(seed)).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn ranking_metrics(ranks: &str) -> Result<Vec<f64>, JsError> {
    ranking_metrics_impl(ranks).map_err(|e| JsError::new(&e))
}
