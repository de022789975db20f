//! Forward pass with a retained trace, and the matching reverse pass.
//!
//! Block layout (pre-norm):
//!   h   = x + Attn(LN1(x))
//!   out = h + W2·gelu(W1·LN2(h))
//! followed by Δ⁽ˡ⁾ at prompt-slot positions. The final state goes through LNf
//! and a (tied by default) projection onto the vocabulary.

use super::{LayerWeights, MaskedLm, Origin, PromptGrads, Weights};
use crate::lm::LayerPerturbations;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// One term of a weighted negative log-likelihood: `weight · (−log p_pos(token))`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Seed {
    pub pos: usize,
    pub token: usize,
    pub weight: f64,
}

struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

struct LayerCache {
    ln1: LnCache,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// heads × n × n attention probabilities.
    probs: Vec<f64>,
    o: Vec<f64>,
    ln2: LnCache,
    b: Vec<f64>,
    f1: Vec<f64>,
    g: Vec<f64>,
}

pub(crate) struct Trace {
    pub n: usize,
    pub hidden: Vec<Vec<f64>>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    z: Vec<f64>,
}

// ---------------------------------------------------------------------------
// dense helpers, row-major
// ---------------------------------------------------------------------------

/// `x (n×k) · w (k×m) + bias`.
fn affine(x: &[f64], n: usize, k: usize, w: &[f64], bias: &[f64]) -> Vec<f64> {
    let m = bias.len();
    let mut out = Vec::with_capacity(n * m);
    for _ in 0..n {
        out.extend_from_slice(bias);
    }
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let a = x[i * k + p];
            let wr = &w[p * m..(p + 1) * m];
            for (o, &wv) in row.iter_mut().zip(wr) {
                *o += a * wv;
            }
        }
    }
    out
}

/// `dy (n×m) · wᵀ` where `w` is `k×m`; returns `n×k`.
fn times_transpose(dy: &[f64], n: usize, m: usize, w: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let dr = &dy[i * m..(i + 1) * m];
        for p in 0..k {
            out[i * k + p] = dot(dr, &w[p * m..(p + 1) * m]);
        }
    }
    out
}

/// `dw (k×m) += xᵀ dy`, `db += Σ_rows dy`.
fn accumulate_affine(x: &[f64], n: usize, k: usize, dy: &[f64], dw: &mut [f64], db: &mut [f64]) {
    let m = db.len();
    for i in 0..n {
        let dr = &dy[i * m..(i + 1) * m];
        for (b, &g) in db.iter_mut().zip(dr) {
            *b += g;
        }
        for p in 0..k {
            let a = x[i * k + p];
            if a == 0.0 {
                continue;
            }
            for (w, &g) in dw[p * m..(p + 1) * m].iter_mut().zip(dr) {
                *w += a * g;
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn layer_norm(x: &[f64], d: usize, g: &[f64], b: &[f64]) -> (Vec<f64>, LnCache) {
    let n = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; n];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        for j in 0..d {
            let h = (row[j] - mean) * r;
            xhat[i * d + j] = h;
            y[i * d + j] = g[j] * h + b[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward(
    dy: &[f64],
    d: usize,
    cache: &LnCache,
    g: &[f64],
    grads: Option<(&mut Vec<f64>, &mut Vec<f64>)>,
) -> Vec<f64> {
    let n = dy.len() / d;
    if let Some((dg, db)) = grads {
        for i in 0..n {
            for j in 0..d {
                dg[j] += dy[i * d + j] * cache.xhat[i * d + j];
                db[j] += dy[i * d + j];
            }
        }
    }
    let mut dx = vec![0.0; dy.len()];
    for i in 0..n {
        let xh = &cache.xhat[i * d..(i + 1) * d];
        let dxhat: Vec<f64> = (0..d).map(|j| dy[i * d + j] * g[j]).collect();
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xhat = dot(&dxhat, xh) / d as f64;
        for j in 0..d {
            dx[i * d + j] = cache.rstd[i] * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    dx
}

#[inline]
fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn add_deltas(state: &mut [f64], d: usize, origin: &[Origin], perturb: Option<&LayerPerturbations>, layer: usize) {
    let Some(p) = perturb else { return };
    for (pos, o) in origin.iter().enumerate() {
        if let Origin::Slot(i) = *o {
            for (s, &dv) in state[pos * d..(pos + 1) * d].iter_mut().zip(p.get(layer, i)) {
                *s += dv;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// forward
// ---------------------------------------------------------------------------

fn layer_forward(lw: &LayerWeights, x: Vec<f64>, d: usize, heads: usize, ffn: usize) -> (Vec<f64>, LayerCache) {
    let n = x.len() / d;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (a, ln1) = layer_norm(&x, d, &lw.ln1_g, &lw.ln1_b);
    let q = affine(&a, n, d, &lw.wq, &lw.bq);
    let k = affine(&a, n, d, &lw.wk, &lw.bk);
    let v = affine(&a, n, d, &lw.wv, &lw.bv);

    let mut probs = vec![0.0; heads * n * n];
    let mut o = vec![0.0; n * d];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..n {
            let qi = &q[i * d + off..i * d + off + dh];
            let row = &mut probs[(h * n + i) * n..(h * n + i + 1) * n];
            let mut max = f64::NEG_INFINITY;
            for j in 0..n {
                let s = dot(qi, &k[j * d + off..j * d + off + dh]) * scale;
                row[j] = s;
                max = max.max(s);
            }
            let mut sum = 0.0;
            for r in row.iter_mut() {
                *r = (*r - max).exp();
                sum += *r;
            }
            for r in row.iter_mut() {
                *r /= sum;
            }
            let oi = &mut o[i * d + off..i * d + off + dh];
            for j in 0..n {
                let pj = row[j];
                for (ov, &vv) in oi.iter_mut().zip(&v[j * d + off..j * d + off + dh]) {
                    *ov += pj * vv;
                }
            }
        }
    }
    let y = affine(&o, n, d, &lw.wo, &lw.bo);
    let h: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
    let (b, ln2) = layer_norm(&h, d, &lw.ln2_g, &lw.ln2_b);
    let f1 = affine(&b, n, d, &lw.w1, &lw.b1);
    let g: Vec<f64> = f1.iter().map(|&u| gelu(u)).collect();
    let f2 = affine(&g, n, ffn, &lw.w2, &lw.b2);
    let out: Vec<f64> = h.iter().zip(&f2).map(|(a, b)| a + b).collect();
    (
        out,
        LayerCache {
            ln1,
            a,
            q,
            k,
            v,
            probs,
            o,
            ln2,
            b,
            f1,
            g,
        },
    )
}

pub(crate) fn run(lm: &MaskedLm, inputs: &[f64], origin: &[Origin], perturb: Option<&LayerPerturbations>) -> Trace {
    let cfg = &lm.config;
    let w = &lm.weights;
    let d = cfg.d;
    let n = origin.len();
    let mut h0 = inputs.to_vec();
    add_deltas(&mut h0, d, origin, perturb, 0);
    let mut hidden = Vec::with_capacity(cfg.layers + 1);
    let mut stream: Vec<f64> = h0.iter().zip(&w.pos[..n * d]).map(|(a, b)| a + b).collect();
    hidden.push(h0);
    let mut layers = Vec::with_capacity(cfg.layers);
    for (l, lw) in w.layers.iter().enumerate() {
        let (mut out, cache) = layer_forward(lw, stream, d, cfg.heads, cfg.ffn_dim);
        add_deltas(&mut out, d, origin, perturb, l + 1);
        hidden.push(out.clone());
        layers.push(cache);
        stream = out;
    }
    let (z, lnf) = layer_norm(&stream, d, &w.lnf_g, &w.lnf_b);
    Trace {
        n,
        hidden,
        layers,
        lnf,
        z,
    }
}

fn output_rows(lm: &MaskedLm) -> &[f64] {
    if lm.config.tie_output {
        &lm.weights.embed
    } else {
        &lm.weights.head
    }
}

pub(crate) fn logits_at(lm: &MaskedLm, trace: &Trace, pos: usize) -> Vec<f64> {
    let d = lm.config.d;
    let z = &trace.z[pos * d..(pos + 1) * d];
    output_rows(lm)
        .chunks_exact(d)
        .zip(&lm.weights.head_bias)
        .map(|(row, b)| dot(z, row) + b)
        .collect()
}

pub(crate) fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

pub(crate) fn log_probs_at(lm: &MaskedLm, trace: &Trace, pos: usize) -> Vec<f64> {
    log_softmax(&logits_at(lm, trace, pos))
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

/// Gradient of the seeded loss with respect to the output logits, grouped by
/// position: `Σ weight · (softmax − onehot(token))`.
fn seeded_logit_grads(lm: &MaskedLm, trace: &Trace, seeds: &[Seed]) -> Vec<(usize, Vec<f64>)> {
    let mut positions: Vec<usize> = seeds.iter().filter(|s| s.weight != 0.0).map(|s| s.pos).collect();
    positions.sort_unstable();
    positions.dedup();
    positions
        .into_iter()
        .map(|pos| {
            let total: f64 = seeds.iter().filter(|s| s.pos == pos).map(|s| s.weight).sum();
            let mut g: Vec<f64> = log_probs_at(lm, trace, pos)
                .into_iter()
                .map(|lp| total * lp.exp())
                .collect();
            for s in seeds.iter().filter(|s| s.pos == pos) {
                g[s.token] -= s.weight;
            }
            (pos, g)
        })
        .collect()
}

fn layer_backward(
    lw: &LayerWeights,
    c: &LayerCache,
    dout: &[f64],
    d: usize,
    heads: usize,
    ffn: usize,
    mut grads: Option<&mut LayerWeights>,
) -> Vec<f64> {
    let n = dout.len() / d;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    // feed-forward branch
    let dg = times_transpose(dout, n, d, &lw.w2, ffn);
    if let Some(gw) = grads.as_deref_mut() {
        accumulate_affine(&c.g, n, ffn, dout, &mut gw.w2, &mut gw.b2);
    }
    let df1: Vec<f64> = dg.iter().zip(&c.f1).map(|(g, &u)| g * gelu_grad(u)).collect();
    let db = times_transpose(&df1, n, ffn, &lw.w1, d);
    if let Some(gw) = grads.as_deref_mut() {
        accumulate_affine(&c.b, n, d, &df1, &mut gw.w1, &mut gw.b1);
    }
    let ln2_grads = grads.as_deref_mut().map(|gw| (&mut gw.ln2_g, &mut gw.ln2_b));
    let dh_ln = layer_norm_backward(&db, d, &c.ln2, &lw.ln2_g, ln2_grads);
    let dhs: Vec<f64> = dout.iter().zip(&dh_ln).map(|(a, b)| a + b).collect();

    // attention branch
    let do_ = times_transpose(&dhs, n, d, &lw.wo, d);
    if let Some(gw) = grads.as_deref_mut() {
        accumulate_affine(&c.o, n, d, &dhs, &mut gw.wo, &mut gw.bo);
    }
    let mut dq = vec![0.0; n * d];
    let mut dk = vec![0.0; n * d];
    let mut dv = vec![0.0; n * d];
    let mut dp = vec![0.0; n];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..n {
            let row = &c.probs[(h * n + i) * n..(h * n + i + 1) * n];
            let doi = &do_[i * d + off..i * d + off + dh];
            for j in 0..n {
                dp[j] = dot(doi, &c.v[j * d + off..j * d + off + dh]);
                for (dvv, &g) in dv[j * d + off..j * d + off + dh].iter_mut().zip(doi) {
                    *dvv += row[j] * g;
                }
            }
            let inner = dot(row, &dp);
            for j in 0..n {
                let ds = row[j] * (dp[j] - inner) * scale;
                if ds == 0.0 {
                    continue;
                }
                for t in 0..dh {
                    dq[i * d + off + t] += ds * c.k[j * d + off + t];
                    dk[j * d + off + t] += ds * c.q[i * d + off + t];
                }
            }
        }
    }
    let mut da = times_transpose(&dq, n, d, &lw.wq, d);
    for (x, y) in da.iter_mut().zip(times_transpose(&dk, n, d, &lw.wk, d)) {
        *x += y;
    }
    for (x, y) in da.iter_mut().zip(times_transpose(&dv, n, d, &lw.wv, d)) {
        *x += y;
    }
    if let Some(gw) = grads.as_deref_mut() {
        accumulate_affine(&c.a, n, d, &dq, &mut gw.wq, &mut gw.bq);
        accumulate_affine(&c.a, n, d, &dk, &mut gw.wk, &mut gw.bk);
        accumulate_affine(&c.a, n, d, &dv, &mut gw.wv, &mut gw.bv);
    }
    let ln1_grads = grads.map(|gw| (&mut gw.ln1_g, &mut gw.ln1_b));
    let dx_ln = layer_norm_backward(&da, d, &c.ln1, &lw.ln1_g, ln1_grads);
    dhs.iter().zip(&dx_ln).map(|(a, b)| a + b).collect()
}

/// Runs the reverse pass; returns `d loss / d hidden[l]` for `l = 0..=L`.
fn backward(lm: &MaskedLm, trace: &Trace, seeds: &[Seed], mut grads: Option<&mut Weights>) -> Vec<Vec<f64>> {
    let cfg = &lm.config;
    let d = cfg.d;
    let n = trace.n;
    let w = &lm.weights;

    let mut dz = vec![0.0; n * d];
    for (pos, dlogits) in seeded_logit_grads(lm, trace, seeds) {
        let dzr = &mut dz[pos * d..(pos + 1) * d];
        for (row, &g) in output_rows(lm).chunks_exact(d).zip(&dlogits) {
            if g == 0.0 {
                continue;
            }
            for (a, &r) in dzr.iter_mut().zip(row) {
                *a += g * r;
            }
        }
        if let Some(gw) = grads.as_deref_mut() {
            let z = &trace.z[pos * d..(pos + 1) * d];
            let rows = if cfg.tie_output { &mut gw.embed } else { &mut gw.head };
            for (row, &g) in rows.chunks_exact_mut(d).zip(&dlogits) {
                for (a, &zv) in row.iter_mut().zip(z) {
                    *a += g * zv;
                }
            }
            for (b, &g) in gw.head_bias.iter_mut().zip(&dlogits) {
                *b += g;
            }
        }
    }
    let lnf_grads = grads.as_deref_mut().map(|gw| (&mut gw.lnf_g, &mut gw.lnf_b));
    let mut dstream = layer_norm_backward(&dz, d, &trace.lnf, &w.lnf_g, lnf_grads);

    let mut dhidden = vec![Vec::new(); cfg.layers + 1];
    for l in (0..cfg.layers).rev() {
        dhidden[l + 1] = dstream.clone();
        let lg = grads.as_deref_mut().map(|gw| &mut gw.layers[l]);
        dstream = layer_backward(&w.layers[l], &trace.layers[l], &dstream, d, cfg.heads, cfg.ffn_dim, lg);
    }
    if let Some(gw) = grads {
        for (a, b) in gw.pos[..n * d].iter_mut().zip(&dstream) {
            *a += b;
        }
    }
    dhidden[0] = dstream;
    dhidden
}

pub(crate) fn backward_prompt(
    lm: &MaskedLm,
    trace: &Trace,
    origin: &[Origin],
    slots: usize,
    seeds: &[Seed],
) -> PromptGrads {
    let d = lm.config.d;
    let dhidden = backward(lm, trace, seeds, None);
    let mut deltas = vec![0.0; (lm.config.layers + 1) * slots * d];
    for (l, dh) in dhidden.iter().enumerate() {
        for (pos, o) in origin.iter().enumerate() {
            if let Origin::Slot(i) = *o {
                let off = (l * slots + i) * d;
                for (a, b) in deltas[off..off + d].iter_mut().zip(&dh[pos * d..(pos + 1) * d]) {
                    *a += b;
                }
            }
        }
    }
    PromptGrads {
        slots: deltas[..slots * d].to_vec(),
        deltas,
    }
}

/// Accumulates parameter gradients of a plain token sentence into `grads` and
/// returns the seeded loss.
pub(crate) fn backward_full(lm: &MaskedLm, trace: &Trace, ids: &[usize], seeds: &[Seed], grads: &mut Weights) -> f64 {
    let d = lm.config.d;
    let loss: f64 = seeds
        .iter()
        .map(|s| -s.weight * log_probs_at(lm, trace, s.pos)[s.token])
        .sum();
    let dhidden = backward(lm, trace, seeds, Some(grads));
    for (pos, &id) in ids.iter().enumerate() {
        for (a, b) in grads.embed[id * d..(id + 1) * d].iter_mut().zip(&dhidden[0][pos * d..(pos + 1) * d]) {
            *a += b;
        }
    }
    loss
}
