use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::lm::{LmConfig, Weights};
use crate::optim::Adam;
use crate::prompts::{init_soft_from_hard, init_soft_random, parse_hard_prompt, PromptSource};
use crate::testutil::tiny_lm;
use crate::vocab::Vocabulary;

fn vocab() -> Vocabulary {
    Vocabulary::new((0..38).map(|i| format!("w{i}"))).unwrap()
}

const PATTERNS: [&str; 4] = ["[X] w2 w3 [Y] w4", "w5 [X] w6 [Y]", "w7 w8 [X] w9 w10 [Y] w11", "[X] [Y] w12"];

fn random_prompts(lm: &MaskedLm, count: usize, seed: u64) -> Vec<SoftPrompt> {
    let v = vocab();
    let (mean, std) = lm.fit_embedding_gaussian();
    (0..count)
        .map(|i| {
            let donor = parse_hard_prompt(PATTERNS[i % PATTERNS.len()], &v, PromptSource::Mined).unwrap();
            init_soft_random(&donor, (&mean, &std), &lm.config, seed * 100 + i as u64).unwrap()
        })
        .collect()
}

fn model(lm: &MaskedLm, count: usize, seed: u64, weighting: WeightingMode) -> MixtureModel {
    MixtureModel::new(PromptSet::new("r", random_prompts(lm, count, seed)).unwrap(), weighting)
}

fn queries(n: usize, seed: u64) -> Vec<Query> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Query {
            x: (0..rng.random_range(1..3)).map(|_| rng.random_range(13..38)).collect(),
            y: rng.random_range(2..40),
        })
        .collect()
}

/// An LM whose every output is `softmax(bias)`: the head is untied and zero.
fn constant_output_lm(bias: &[f64]) -> MaskedLm {
    let cfg = LmConfig {
        tie_output: false,
        ..tiny_lm(0).config
    };
    let mut lm = MaskedLm::new(cfg).unwrap();
    lm.weights.head.iter_mut().for_each(|x| *x = 0.0);
    lm.weights.head_bias.copy_from_slice(bias);
    lm
}

/// Untied head scaled so that log-probabilities spread over hundreds of nats.
fn sharp_lm(seed: u64) -> MaskedLm {
    let base = tiny_lm(seed);
    let cfg = LmConfig {
        tie_output: false,
        ..base.config.clone()
    };
    let mut lm = MaskedLm::new(cfg).unwrap();
    let head = base.weights.embed.iter().map(|x| 300.0 * x).collect();
    lm.weights = Weights { head, ..base.weights };
    lm
}

#[test]
fn convex_combination() {
    let a = vec![0.8, 0.2];
    let b = vec![0.4, 0.6];
    let p = combine(&[0.5, 0.5], &[a, b]);
    assert!((p[0] - 0.6).abs() < 1e-15);
}

#[test]
fn single_prompt_equals_component() {
    let lm = tiny_lm(1);
    let m = model(&lm, 1, 1, WeightingMode::Static);
    let x = [20, 21];
    let p = m.predict(&x, &lm).unwrap();
    let seq = m.prompt_set.prompts[0].instantiate(&x, &lm).unwrap();
    assert_eq!(p, lm.predict_blank(&seq, None).unwrap());
}

#[test]
fn three_prompt_prediction_matches_summation() {
    let lm = tiny_lm(2);
    let mut m = model(&lm, 3, 2, WeightingMode::Static);
    m.mixture_logits = vec![0.3, -1.2, 0.8];
    let w = m.prior();
    for q in queries(5, 3) {
        let p = m.predict(&q.x, &lm).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        for tok in 0..lm.vocab_size() {
            let mut want = 0.0;
            for (t, pr) in m.prompt_set.prompts.iter().enumerate() {
                let seq = pr.instantiate(&q.x, &lm).unwrap();
                let f = lm.forward(&seq, Some(&pr.deep)).unwrap();
                let blank = seq.blank_y.unwrap();
                want += w[t] * f.log_probs[blank][tok].exp();
            }
            assert!((p[tok] - want).abs() < 1e-10);
        }
    }
}

#[test]
fn bayes_weight_arithmetic() {
    let lm = tiny_lm(3);
    let m = model(&lm, 2, 3, WeightingMode::DataDependent);
    let w = m.bayes_weights(&[0.2f64.ln(), 0.1f64.ln()]);
    assert!((w[0] - 2.0 / 3.0).abs() < 1e-15 && (w[1] - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn data_dependent_weights_match_formula() {
    let lm = tiny_lm(4);
    let mut m = model(&lm, 3, 4, WeightingMode::DataDependent);
    m.mixture_logits = vec![0.5, -0.25, 1.0];
    m.log_temperature = 0.4;
    let t = m.log_temperature.exp();
    for q in queries(6, 4) {
        let w = m.data_dependent_weights(&q.x, &lm).unwrap();
        let prior = m.prior();
        let un: Vec<f64> = m
            .prompt_set
            .prompts
            .iter()
            .zip(&prior)
            .map(|(p, pr)| pr * MixtureModel::estimate_x_likelihood(p, &q.x, &lm).unwrap().powf(1.0 / t))
            .collect();
        let z: f64 = un.iter().sum();
        for (a, b) in w.iter().zip(&un) {
            assert!((a - b / z).abs() < 1e-10);
        }
    }
}

#[test]
fn high_temperature_recovers_static_weights() {
    let lm = tiny_lm(5);
    let mut dd = model(&lm, 3, 5, WeightingMode::DataDependent);
    dd.mixture_logits = vec![0.2, 1.1, -0.7];
    dd.log_temperature = 20.0;
    let mut st = dd.clone();
    st.weighting = WeightingMode::Static;
    for q in queries(10, 5) {
        let a = dd.predict(&q.x, &lm).unwrap();
        let b = st.predict(&q.x, &lm).unwrap();
        let max = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(max < 1e-6, "{max}");
    }
}

#[test]
fn x_likelihood_is_product_of_positions() {
    // p(w5) = 0.5, p(w6) = 0.2, the remaining 0.3 spread evenly
    let v = vocab();
    let rest: f64 = 0.3 / 38.0;
    let bias: Vec<f64> = (0..40)
        .map(|i| match i {
            7 => 0.5f64.ln(),
            8 => 0.2f64.ln(),
            _ => rest.ln(),
        })
        .collect();
    let lm = constant_output_lm(&bias);
    let hard = parse_hard_prompt("[X] w2 [Y]", &v, PromptSource::Single).unwrap();
    let p = init_soft_from_hard(&hard, &lm, &v).unwrap();
    let w5 = v.id("w5").unwrap();
    let w6 = v.id("w6").unwrap();
    assert_eq!((w5, w6), (7, 8));
    assert!((MixtureModel::estimate_x_likelihood(&p, &[w5], &lm).unwrap() - 0.5).abs() < 1e-12);
    assert!((MixtureModel::estimate_x_likelihood(&p, &[w5, w6], &lm).unwrap() - 0.1).abs() < 1e-12);
}

#[test]
fn x_likelihood_in_unit_interval() {
    for s in 0..10 {
        let lm = tiny_lm(10 + s);
        let prompts = random_prompts(&lm, 2, s);
        for q in queries(5, s) {
            for p in &prompts {
                let v = MixtureModel::estimate_x_likelihood(p, &q.x, &lm).unwrap();
                assert!(v > 0.0 && v <= 1.0);
                assert_eq!(v, MixtureModel::estimate_x_likelihood(p, &q.x, &lm).unwrap());
            }
        }
    }
}

#[test]
fn loss_arithmetic() {
    let v = vocab();
    let mut bias = vec![-1000.0; 40];
    bias[2] = 0.0;
    bias[3] = 0.0;
    let lm = constant_output_lm(&bias);
    let hard = parse_hard_prompt("[X] w4 [Y]", &v, PromptSource::Single).unwrap();
    let m = MixtureModel::new(
        PromptSet::new("r", vec![init_soft_from_hard(&hard, &lm, &v).unwrap()]).unwrap(),
        WeightingMode::Static,
    );
    let q = Query { x: vec![10], y: 2 };
    assert!((m.loss(&[q.clone()], &lm).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);

    bias[3] = -1000.0;
    let lm = constant_output_lm(&bias);
    assert_eq!(m.loss(&[q], &lm).unwrap(), 0.0);
    assert!(matches!(m.loss(&[Query { x: vec![10], y: 40 }], &lm), Err(Error::Input(_))));
}

#[test]
fn batch_loss_matches_per_example_sum() {
    let lm = tiny_lm(6);
    for weighting in [WeightingMode::Static, WeightingMode::DataDependent] {
        let mut m = model(&lm, 3, 6, weighting);
        m.mixture_logits = vec![-0.4, 0.9, 0.1];
        let batch = queries(8, 6);
        let want: f64 = batch.iter().map(|q| -m.predict(&q.x, &lm).unwrap()[q.y].ln()).sum();
        assert!((m.loss(&batch, &lm).unwrap() - want).abs() < 1e-10);
        assert!((m.loss_and_grad(&batch, &lm, true).unwrap().loss - want).abs() < 1e-10);
    }
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-3)
}

/// Model with every parameter group nonzero.
fn rich_model(lm: &MaskedLm, weighting: WeightingMode) -> MixtureModel {
    let mut m = model(lm, 3, 7, weighting);
    m.mixture_logits = vec![0.3, -0.5, 0.1];
    m.log_temperature = 0.6;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for p in m.prompt_set.prompts.iter_mut() {
        p.deep.deltas.iter_mut().for_each(|x| *x = rng.random_range(-0.3..0.3));
    }
    m
}

#[test]
fn gradients_match_finite_differences() {
    let lm = tiny_lm(7);
    let batch = queries(4, 7);
    let h = 1e-5;
    for weighting in [WeightingMode::Static, WeightingMode::DataDependent] {
        let m = rich_model(&lm, weighting);
        let g = m.loss_and_grad(&batch, &lm, true).unwrap().grad;
        let fd = |f: &dyn Fn(&mut MixtureModel, f64)| {
            let mut a = m.clone();
            f(&mut a, h);
            let mut b = m.clone();
            f(&mut b, -h);
            (a.loss(&batch, &lm).unwrap() - b.loss(&batch, &lm).unwrap()) / (2.0 * h)
        };
        for t in 0..3 {
            let n = fd(&|mm, e| mm.mixture_logits[t] += e);
            assert!(rel_close(n, g.logits[t], 1e-4), "logit {t}: {n} vs {}", g.logits[t]);
        }
        let n = fd(&|mm, e| mm.log_temperature += e);
        assert!(rel_close(n, g.log_temperature, 1e-4), "log T: {n} vs {}", g.log_temperature);
        if weighting == WeightingMode::Static {
            assert_eq!(g.log_temperature, 0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..12 {
            let t = rng.random_range(0..3);
            let i = rng.random_range(0..m.prompt_set.prompts[t].slots.len());
            let n = fd(&|mm, e| mm.prompt_set.prompts[t].slots[i] += e);
            assert!(rel_close(n, g.slots[t][i], 1e-4), "slot {t}/{i}: {n} vs {}", g.slots[t][i]);
            let j = rng.random_range(0..m.prompt_set.prompts[t].deep.deltas.len());
            let n = fd(&|mm, e| mm.prompt_set.prompts[t].deep.deltas[j] += e);
            assert!(rel_close(n, g.deltas[t][j], 1e-4), "delta {t}/{j}: {n} vs {}", g.deltas[t][j]);
        }
    }
}

#[test]
fn directional_derivative_matches() {
    let lm = tiny_lm(8);
    let batch = queries(3, 8);
    let m = rich_model(&lm, WeightingMode::DataDependent);
    let g = m.loss_and_grad(&batch, &lm, true).unwrap().grad;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let dir_logits: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let dir_t: f64 = rng.random_range(-1.0..1.0);
    let dir_slots: Vec<Vec<f64>> = m.prompt_set.prompts.iter().map(|p| p.slots.iter().map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let dir_deltas: Vec<Vec<f64>> = m
        .prompt_set
        .prompts
        .iter()
        .map(|p| p.deep.deltas.iter().map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let step = |e: f64| {
        let mut a = m.clone();
        a.mixture_logits.iter_mut().zip(&dir_logits).for_each(|(x, d)| *x += e * d);
        a.log_temperature += e * dir_t;
        for (t, p) in a.prompt_set.prompts.iter_mut().enumerate() {
            p.slots.iter_mut().zip(&dir_slots[t]).for_each(|(x, d)| *x += e * d);
            p.deep.deltas.iter_mut().zip(&dir_deltas[t]).for_each(|(x, d)| *x += e * d);
        }
        a.loss(&batch, &lm).unwrap()
    };
    let h = 1e-6;
    let numeric = (step(h) - step(-h)) / (2.0 * h);
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut analytic = dot(&g.logits, &dir_logits) + g.log_temperature * dir_t;
    for t in 0..3 {
        analytic += dot(&g.slots[t], &dir_slots[t]) + dot(&g.deltas[t], &dir_deltas[t]);
    }
    assert!(rel_close(numeric, analytic, 1e-4), "{numeric} vs {analytic}");
}

fn small_config(mode: TuneMode, optimizer: OptimizerKind) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        patience: 3,
        max_epochs: 5,
        optimizer,
        tune_mode: mode,
        seed: 3,
        adam: crate::optim::AdamConfig {
            lr: 0.05,
            ..Default::default()
        },
    }
}

#[test]
fn tune_modes_touch_only_their_groups() {
    let lm = tiny_lm(9);
    let train_set = queries(12, 9);
    let dev = queries(4, 10);
    let before = lm.checksum();
    for mode in TuneMode::ALL {
        let start = model(&lm, 2, 9, WeightingMode::Static);
        let mut m = start.clone();
        train(&mut m, &train_set, &dev, &lm, &small_config(mode, OptimizerKind::Adam)).unwrap();
        let slots_same = m.prompt_set.prompts.iter().zip(&start.prompt_set.prompts).all(|(a, b)| a.slots == b.slots);
        let deltas_same = m.prompt_set.prompts.iter().zip(&start.prompt_set.prompts).all(|(a, b)| a.deep == b.deep);
        let layouts_same = m.prompt_set.prompts.iter().zip(&start.prompt_set.prompts).all(|(a, b)| a.layout() == b.layout());
        assert!(layouts_same);
        assert_eq!(m.log_temperature, 0.0);
        match mode {
            TuneMode::WeightsOnly => {
                assert!(slots_same && deltas_same);
                assert_ne!(m.mixture_logits, start.mixture_logits);
            }
            TuneMode::VectorsOnly => {
                assert_eq!(m.mixture_logits, start.mixture_logits);
                assert!(!slots_same && deltas_same);
            }
            TuneMode::Both => assert!(!slots_same && deltas_same && m.mixture_logits != start.mixture_logits),
            TuneMode::DeepAllLayers => {
                assert!(!slots_same && !deltas_same);
                // layer 0 is carried by the slot vectors themselves
                for p in &m.prompt_set.prompts {
                    let n = p.slot_count() * p.d();
                    assert!(p.deep.deltas[..n].iter().all(|&x| x == 0.0));
                }
            }
        }
    }
    assert_eq!(lm.checksum(), before);
}

#[test]
fn data_dependent_training_moves_temperature() {
    let lm = tiny_lm(9);
    let mut m = model(&lm, 2, 9, WeightingMode::DataDependent);
    train(&mut m, &queries(12, 9), &queries(4, 10), &lm, &small_config(TuneMode::WeightsOnly, OptimizerKind::Adam)).unwrap();
    assert_ne!(m.log_temperature, 0.0);
    assert!(m.log_temperature.is_finite());
}

#[test]
fn em_posterior_is_one_hot_when_other_prompt_gives_zero() {
    let mut found = false;
    'search: for seed in 0..20 {
        let lm = sharp_lm(seed);
        let m = model(&lm, 2, seed, WeightingMode::Static);
        for x in 13..38 {
            let c = m.component_distributions(&[x], &lm).unwrap();
            for y in 0..40 {
                if c[0][y] > 1e-3 && c[1][y] == 0.0 {
                    let post = m.posterior(&Query { x: vec![x], y }, &lm).unwrap();
                    assert_eq!(post, vec![1.0, 0.0]);
                    found = true;
                    break 'search;
                }
            }
        }
    }
    assert!(found, "no instance with a vanishing component");
}

#[test]
fn weights_only_em_is_monotone() {
    let lm = tiny_lm(11);
    let mut m = model(&lm, 3, 11, WeightingMode::Static);
    let data = queries(16, 11);
    let mut adam = Adam::new(Default::default());
    let mut trace = Vec::new();
    for _ in 0..20 {
        trace.push(em_step(&mut m, &data, &lm, &mut adam, TuneMode::WeightsOnly, false).unwrap());
    }
    trace.push(m.loss(&data, &lm).unwrap());
    for w in trace.windows(2) {
        assert!(w[1] <= w[0] + 1e-12, "{trace:?}");
    }
}

/// Full-batch gradient descent on the logits until the gradient vanishes.
fn converge_weights(m: &mut MixtureModel, data: &[Query], lm: &MaskedLm) -> f64 {
    let n = data.len() as f64;
    let mut gnorm = f64::INFINITY;
    for _ in 0..20_000 {
        let g = m.loss_and_grad(data, lm, false).unwrap().grad.logits;
        gnorm = g.iter().map(|v| (v / n).powi(2)).sum::<f64>().sqrt();
        if gnorm < 1e-10 {
            break;
        }
        m.mixture_logits.iter_mut().zip(&g).for_each(|(l, v)| *l -= 2.0 * v / n);
    }
    gnorm
}

#[test]
fn em_fixed_point_at_gradient_minimum() {
    let lm = tiny_lm(12);
    let data = queries(12, 12);
    let mut m = model(&lm, 2, 12, WeightingMode::Static);
    let gnorm = converge_weights(&mut m, &data, &lm);
    assert!(gnorm < 1e-10, "gradient norm {gnorm}");
    let before = m.prior();
    let mut adam = Adam::new(Default::default());
    em_step(&mut m, &data, &lm, &mut adam, TuneMode::WeightsOnly, false).unwrap();
    let after = m.prior();
    for (a, b) in before.iter().zip(&after) {
        assert!((a - b).abs() < 1e-6, "{before:?} -> {after:?}");
    }
}

#[test]
fn learned_weights_beat_uniform() {
    let lm = tiny_lm(13);
    let data = queries(12, 13);
    let mut m = model(&lm, 3, 13, WeightingMode::Static);
    let uniform = m.loss(&data, &lm).unwrap();
    converge_weights(&mut m, &data, &lm);
    assert!(m.loss(&data, &lm).unwrap() <= uniform + 1e-9);
}

/// 1-D grid search over `π = p(A)` for two fixed component likelihoods.
fn grid_optimum(pa: &[f64], pb: &[f64]) -> f64 {
    (0..=1000)
        .map(|i| i as f64 / 1000.0)
        .map(|pi| (pi, pa.iter().zip(pb).map(|(a, b)| -(pi * a + (1.0 - pi) * b).ln()).sum::<f64>()))
        .fold((0.0, f64::INFINITY), |best, c| if c.1 < best.1 { c } else { best })
        .0
}

#[test]
fn dominant_prompt_takes_the_weight() {
    let lm = tiny_lm(14);
    let mut m = model(&lm, 2, 14, WeightingMode::Static);
    // gold = prompt A's favourite answer
    let xs: Vec<Vec<usize>> = queries(16, 14).into_iter().map(|q| q.x).collect();
    let data: Vec<Query> = xs
        .into_iter()
        .map(|x| {
            let c = m.component_distributions(&x, &lm).unwrap();
            let y = (0..40).fold(0, |b, w| if c[0][w] > c[0][b] { w } else { b });
            Query { x, y }
        })
        .collect();
    let pa: Vec<f64> = data.iter().map(|q| m.component_distributions(&q.x, &lm).unwrap()[0][q.y]).collect();
    let pb: Vec<f64> = data.iter().map(|q| m.component_distributions(&q.x, &lm).unwrap()[1][q.y]).collect();
    let oracle = grid_optimum(&pa, &pb);
    let cfg = TrainConfig {
        batch_size: 16,
        max_epochs: 200,
        patience: 200,
        ..small_config(TuneMode::WeightsOnly, OptimizerKind::Adam)
    };
    train(&mut m, &data, &data, &lm, &cfg).unwrap();
    let learned = m.prior()[0];
    assert!(oracle > 0.9 && learned > 0.9, "oracle {oracle}, learned {learned}");
    // a per-example loss of 0.1 against 2.0 puts the optimum at the edge
    assert_eq!(grid_optimum(&[(-0.1f64).exp(); 5], &[(-2.0f64).exp(); 5]), 1.0);
}

#[test]
fn em_rejects_data_dependent_weighting() {
    let lm = tiny_lm(15);
    let mut m = model(&lm, 2, 15, WeightingMode::DataDependent);
    let cfg = small_config(TuneMode::WeightsOnly, OptimizerKind::Em);
    assert!(matches!(train(&mut m, &queries(4, 1), &queries(4, 2), &lm, &cfg), Err(Error::Input(_))));
}

#[test]
fn training_is_deterministic() {
    let lm = tiny_lm(16);
    let tr = queries(10, 16);
    let dev = queries(4, 17);
    for opt in [OptimizerKind::Adam, OptimizerKind::Em] {
        let cfg = small_config(TuneMode::Both, opt);
        let mut a = model(&lm, 2, 16, WeightingMode::Static);
        let mut b = a.clone();
        let ra = train(&mut a, &tr, &dev, &lm, &cfg).unwrap();
        let rb = train(&mut b, &tr, &dev, &lm, &cfg).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a, b);
        let best = ra.best().dev_loss;
        assert!(ra.epochs.iter().all(|e| e.dev_loss >= best));
    }
}
