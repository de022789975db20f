//! Nearest-word readout of soft prompts.
//!
//! `p(w | v)` is the softmax over the vocabulary of the inner products between
//! `v` and each embedding row.

use std::fmt::Write as _;

use crate::lm::MaskedLm;
use crate::mixture::MixtureModel;
use crate::prompts::SoftPrompt;
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, PartialEq)]
pub struct SlotRow {
    pub slot: usize,
    pub nearest: String,
    pub p_nearest: f64,
    /// Token the slot was initialized from, for hard-prompt provenance.
    pub original: Option<String>,
    pub p_original: Option<f64>,
    /// `‖v‖ / ‖v₀‖`.
    pub norm_ratio: Option<f64>,
}

fn word_distribution(v: &[f64], lm: &MaskedLm) -> Vec<f64> {
    let d = lm.d();
    let scores: Vec<f64> = lm
        .weights
        .embed
        .chunks_exact(d)
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn visualize_prompt(prompt: &SoftPrompt, lm: &MaskedLm, vocab: &Vocabulary) -> Vec<SlotRow> {
    let originals: Option<Vec<&str>> = prompt.provenance.hard().map(|h| h.ordinary_tokens().collect());
    (0..prompt.slot_count())
        .map(|i| {
            let v = prompt.slot(i);
            let dist = word_distribution(v, lm);
            // first maximum, i.e. ties go to the lower id
            let best = dist
                .iter()
                .enumerate()
                .fold(0, |b, (w, &p)| if p > dist[b] { w } else { b });
            let (original, p_original, norm_ratio) = match &originals {
                Some(toks) => {
                    let w0 = toks[i];
                    let id = vocab.id(w0);
                    let ratio = id.map(|id| norm(v) / norm(lm.embedding(id)));
                    (Some(w0.to_string()), id.map(|id| dist[id]), ratio)
                }
                None => (None, None, None),
            };
            SlotRow {
                slot: i,
                nearest: vocab.token(best).unwrap_or("<?>").to_string(),
                p_nearest: dist[best],
                original,
                p_original,
                norm_ratio,
            }
        })
        .collect()
}

/// Per prompt `(index, weight, rows)`, ordered by decreasing mixture weight.
pub fn visualize_mixture(model: &MixtureModel, lm: &MaskedLm, vocab: &Vocabulary) -> Vec<(usize, f64, Vec<SlotRow>)> {
    let w = model.prior();
    let mut out: Vec<(usize, f64, Vec<SlotRow>)> = model
        .prompt_set
        .prompts
        .iter()
        .enumerate()
        .map(|(i, p)| (i, w[i], visualize_prompt(p, lm, vocab)))
        .collect();
    out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    out
}

/// Tab-separated table, 4 decimals.
pub fn render_tsv(model: &MixtureModel, rows: &[(usize, f64, Vec<SlotRow>)]) -> String {
    let mut s = String::from("prompt\tweight\tprovenance\tslot\tnearest\tp_nearest\toriginal\tp_original\tnorm_ratio\n");
    for (i, w, slots) in rows {
        let prov = model.prompt_set.prompts[*i].provenance.describe();
        for r in slots {
            let _ = writeln!(
                s,
                "{i}\t{w:.4}\t{prov}\t{}\t{}\t{:.4e}\t{}\t{}\t{}",
                r.slot,
                r.nearest,
                r.p_nearest,
                r.original.as_deref().unwrap_or("-"),
                r.p_original.map(|p| format!("{p:.4e}")).unwrap_or_else(|| "-".into()),
                r.norm_ratio.map(|p| format!("{p:.4}")).unwrap_or_else(|| "-".into()),
            );
        }
    }
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Static page: one line per prompt, each slot shown as its nearest word
/// (blue) over the original word (red), sized by the norm ratio.
pub fn render_html(title: &str, model: &MixtureModel, rows: &[(usize, f64, Vec<SlotRow>)]) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "<!doctype html>\n<html><head><meta charset=\"utf-8\"><title>{t}</title>\n<style>\n\
body{{font-family:sans-serif;margin:2em}} .p{{margin:.6em 0}} .w{{color:#888;width:5em;display:inline-block}}\n\
.s{{display:inline-block;text-align:center;margin:0 .3em;vertical-align:middle}} .n{{color:#1f4fd1}} .o{{color:#c22;font-size:70%}}\n\
.b{{color:#555;font-style:italic;margin:0 .3em}}\n</style></head><body>\n<h1>{t}</h1>\n",
        t = escape(title)
    );
    for (i, w, slots) in rows {
        let prompt = &model.prompt_set.prompts[*i];
        let _ = write!(s, "<div class=\"p\"><span class=\"w\">{w:.4}</span>");
        for piece in prompt.layout() {
            match piece {
                crate::prompts::Piece::X => s.push_str("<span class=\"b\">[X]</span>"),
                crate::prompts::Piece::Y => s.push_str("<span class=\"b\">[Y]</span>"),
                crate::prompts::Piece::Slot(k) => {
                    let r = &slots[*k];
                    let size = 100.0 * r.norm_ratio.unwrap_or(1.0);
                    let _ = write!(
                        s,
                        "<span class=\"s\" style=\"font-size:{size:.0}%\" title=\"p={:.2e}\"><span class=\"n\">{}</span><br><span class=\"o\">{}</span></span>",
                        r.p_nearest,
                        escape(&r.nearest),
                        escape(r.original.as_deref().unwrap_or("")),
                    );
                }
            }
        }
        s.push_str("</div>\n");
    }
    s.push_str("</body></html>\n");
    s
}
