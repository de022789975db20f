use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::testutil::tiny_lm;

/// slot, slot, x, slot, [MASK], slot
fn prompt_sequence(lm: &MaskedLm, seed: u64) -> EmbeddingSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let origin = vec![Origin::Slot(0), Origin::Slot(1), Origin::X(0), Origin::Slot(2), Origin::YMask, Origin::Slot(3)];
    let d = lm.d();
    let mut vectors = Vec::new();
    for o in &origin {
        match o {
            Origin::YMask => vectors.extend_from_slice(lm.embedding(crate::vocab::MASK_ID)),
            Origin::X(_) => vectors.extend_from_slice(lm.embedding(17)),
            _ => vectors.extend((0..d).map(|_| rng.random_range(-1.0..1.0))),
        }
    }
    EmbeddingSequence {
        vectors,
        d,
        blank_y: Some(4),
        origin,
    }
}

fn random_deltas(lm: &MaskedLm, slots: usize, seed: u64) -> LayerPerturbations {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = LayerPerturbations::zeros(&lm.config, slots);
    p.deltas.iter_mut().for_each(|x| *x = rng.random_range(-0.5..0.5));
    p
}

fn nll(lm: &MaskedLm, seq: &EmbeddingSequence, p: &LayerPerturbations, gold: usize) -> f64 {
    -lm.predict_blank(seq, Some(p)).unwrap()[gold].ln()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-4 * a.abs().max(b.abs()).max(1e-4)
}

#[test]
fn hundred_coordinates_match_finite_differences() {
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut checked = 0;
    for s in 0..4 {
        let lm = tiny_lm(s);
        let seq = prompt_sequence(&lm, s);
        let p = random_deltas(&lm, 4, s);
        let gold = 2 + s as usize;
        let g = lm.grad(&seq, Some(&p), gold).unwrap();
        let d = lm.d();
        for _ in 0..13 {
            // an input coordinate at a slot position
            let slot = rng.random_range(0..4);
            let pos = seq.origin.iter().position(|o| *o == Origin::Slot(slot)).unwrap();
            let k = rng.random_range(0..d);
            let mut a = seq.clone();
            a.vectors[pos * d + k] += h;
            let mut b = seq.clone();
            b.vectors[pos * d + k] -= h;
            let num = (nll(&lm, &a, &p, gold) - nll(&lm, &b, &p, gold)) / (2.0 * h);
            assert!(close(num, g.slots[slot * d + k]), "input {slot}/{k}: {num} vs {}", g.slots[slot * d + k]);

            // a Δ coordinate on any layer
            let j = rng.random_range(0..p.deltas.len());
            let mut a = p.clone();
            a.deltas[j] += h;
            let mut b = p.clone();
            b.deltas[j] -= h;
            let num = (nll(&lm, &seq, &a, gold) - nll(&lm, &seq, &b, gold)) / (2.0 * h);
            assert!(close(num, g.deltas[j]), "delta {j}: {num} vs {}", g.deltas[j]);
            checked += 2;
        }
    }
    assert!(checked >= 100);
}

#[test]
fn layer_zero_delta_gradient_equals_input_gradient() {
    let lm = tiny_lm(5);
    let seq = prompt_sequence(&lm, 5);
    let g = lm.grad(&seq, Some(&random_deltas(&lm, 4, 5)), 9).unwrap();
    let n = 4 * lm.d();
    assert_eq!(&g.deltas[..n], &g.slots[..]);
    assert_eq!(g.slots.len(), n);
    assert_eq!(g.deltas.len(), (lm.config.layers + 1) * n);
}

#[test]
fn pretraining_gradient_matches_finite_differences() {
    let lm = tiny_lm(6);
    let ids = [5, 9, crate::vocab::MASK_ID, 11, 4];
    let targets = [(2, 13)];
    let mut g = Weights::zeros(&lm.config);
    let loss = sentence_nll_and_grad(&lm, &ids, &targets, &mut g);
    let mut scratch = Weights::zeros(&lm.config);
    assert_eq!(loss, sentence_nll_and_grad(&lm, &ids, &targets, &mut scratch));
    let specs = Weights::specs(&lm.config);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let h = 1e-5;
    for (k, spec) in specs.iter().enumerate() {
        if spec.is_empty() {
            continue;
        }
        for _ in 0..3 {
            let i = rng.random_range(0..spec.len());
            let eval = |e: f64| {
                let mut m = lm.clone();
                m.weights.tensors_mut()[k][i] += e;
                sentence_nll_and_grad(&m, &ids, &targets, &mut Weights::zeros(&lm.config))
            };
            let num = (eval(h) - eval(-h)) / (2.0 * h);
            let ana = g.tensors()[k][i];
            assert!(close(num, ana), "{}[{i}]: {num} vs {ana}", spec.name);
        }
    }
}

#[test]
fn zero_perturbation_is_identity() {
    let lm = tiny_lm(7);
    let seq = prompt_sequence(&lm, 7);
    let a = lm.forward(&seq, None).unwrap();
    let b = lm.forward(&seq, Some(&LayerPerturbations::zeros(&lm.config, 4))).unwrap();
    assert_eq!(a, b);
}

#[test]
fn perturbation_only_touches_slot_positions_at_layer_zero() {
    let lm = tiny_lm(8);
    let seq = prompt_sequence(&lm, 8);
    let p = random_deltas(&lm, 4, 8);
    let f = lm.forward(&seq, Some(&p)).unwrap();
    let d = lm.d();
    for (pos, o) in seq.origin.iter().enumerate() {
        let h0 = &f.hidden[0][pos * d..(pos + 1) * d];
        match o {
            Origin::Slot(i) => {
                for k in 0..d {
                    let want = seq.vector(pos)[k] + p.get(0, *i)[k];
                    assert!((h0[k] - want).abs() < 1e-12);
                }
            }
            _ => {
                for k in 0..d {
                    assert_eq!(h0[k], seq.vector(pos)[k]);
                }
            }
        }
    }
    assert_eq!(f.hidden.len(), lm.config.layers + 1);
}

#[test]
fn distributions_are_normalized() {
    for s in 0..5 {
        let lm = tiny_lm(s);
        let seq = prompt_sequence(&lm, s);
        let f = lm.forward(&seq, Some(&random_deltas(&lm, 4, s))).unwrap();
        for lp in &f.log_probs {
            assert!((lp.iter().map(|x| x.exp()).sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn zero_untied_head_predicts_uniformly() {
    let cfg = LmConfig {
        tie_output: false,
        ..tiny_lm(0).config
    };
    let lm = MaskedLm::new(cfg).unwrap();
    assert!(lm.weights.head.iter().all(|&x| x == 0.0));
    let p = lm.predict_blank(&prompt_sequence(&lm, 1), None).unwrap();
    let max = p.iter().cloned().fold(0.0, f64::max);
    let min = p.iter().cloned().fold(1.0, f64::min);
    assert!(max / min < 1.05);
}

#[test]
fn predictions_are_pure() {
    let lm = tiny_lm(9);
    let seq = prompt_sequence(&lm, 9);
    let p = random_deltas(&lm, 4, 9);
    let a = lm.predict_blank(&seq, Some(&p)).unwrap();
    let b = lm.predict_blank(&seq, Some(&p)).unwrap();
    assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
}

#[test]
fn confident_gold_has_vanishing_gradient() {
    let base = tiny_lm(10);
    let cfg = LmConfig {
        tie_output: false,
        ..base.config.clone()
    };
    let mut lm = MaskedLm::new(cfg).unwrap();
    lm.weights = Weights {
        head: base.weights.embed.iter().map(|x| 400.0 * x).collect(),
        ..base.weights
    };
    let seq = prompt_sequence(&lm, 10);
    let p = lm.predict_blank(&seq, None).unwrap();
    let gold = (0..p.len()).fold(0, |b, w| if p[w] > p[b] { w } else { b });
    assert!(p[gold] > 1.0 - 1e-9, "{}", p[gold]);
    let g = lm.grad(&seq, None, gold).unwrap();
    let norm = g.slots.iter().chain(&g.deltas).map(|x| x * x).sum::<f64>().sqrt();
    assert!(norm < 1e-6, "{norm}");
}

#[test]
fn shape_errors() {
    let lm = tiny_lm(11);
    let seq = prompt_sequence(&lm, 11);
    let wrong = LayerPerturbations::zeros(&lm.config, 2);
    assert!(matches!(lm.forward(&seq, Some(&wrong)), Err(Error::Input(_))));
    let long = lm.embed_tokens(&vec![3; lm.config.max_len + 1]).unwrap();
    assert!(matches!(lm.forward(&long, None), Err(Error::Input(_))));
    assert!(matches!(lm.grad(&seq, None, 40), Err(Error::Input(_))));
    let no_blank = lm.embed_tokens(&[3, 4]).unwrap();
    assert!(matches!(lm.predict_blank(&no_blank, None), Err(Error::Input(_))));
    let mut bad = lm.clone();
    bad.weights.lnf_b[0] = f64::NAN;
    assert!(matches!(bad.forward(&seq, None), Err(Error::Internal(_))));
}
