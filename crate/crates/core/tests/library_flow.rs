//! The whole pipeline through the public library API, at toy size.

use softmix::checkpoint::{load_lm, load_mixture, save_lm, save_mixture};
use softmix::datasets::{encode_triples, filter_single_token_y, split_random, Triple};
use softmix::eval::{compute_metrics, rank_gold, RankRecord};
use softmix::lm::{pretrain, PretrainConfig};
use softmix::prompts::{init_soft_from_hard, parse_hard_prompt};
use softmix::world::{default_relations, generate_corpus, generate_world, CorpusOptions};
use softmix::{LmConfig, MixtureModel, PromptSet, PromptSource, TrainConfig, TuneMode, WeightingMode};

#[test]
fn world_to_metrics_and_back_from_disk() {
    let world = generate_world(50, &default_relations(30), 2).unwrap();
    let corpus = generate_corpus(&world, &CorpusOptions { repetitions_per_fact: 3, ..CorpusOptions::default() }, &[]).unwrap();
    let cfg = LmConfig {
        d: 16,
        layers: 1,
        heads: 2,
        ffn_dim: 32,
        vocab_size: world.vocab.len(),
        max_len: 24,
        seed: 2,
        tie_output: true,
        init_std: 0.02,
    };
    let pcfg = PretrainConfig { epochs: 20, seed: 2, ..PretrainConfig::default() };
    let (lm, report) = pretrain(cfg, &corpus, &world.vocab, &pcfg).unwrap();
    assert!(report.held_out_loss_final < report.held_out_loss_init);

    let rel = &world.relations[0];
    let triples: Vec<Triple> = world
        .facts
        .facts()
        .iter()
        .filter(|f| f.relation == rel.name)
        .map(|f| Triple { relation: f.relation.clone(), x: f.x.clone(), y: f.y.clone() })
        .collect();
    let triples = filter_single_token_y(&triples, &world.vocab);
    let split = split_random(&triples, 2).unwrap();
    let train_q = encode_triples(&split.train, &world.vocab).unwrap();
    let dev_q = encode_triples(&split.dev, &world.vocab).unwrap();
    let test_q = encode_triples(&split.test, &world.vocab).unwrap();

    let prompts = rel
        .surface_templates
        .iter()
        .map(|t| {
            let h = parse_hard_prompt(&t.join(" "), &world.vocab, PromptSource::Paraphrase).unwrap();
            init_soft_from_hard(&h, &lm, &world.vocab).unwrap()
        })
        .collect();
    let mut model = MixtureModel::new(PromptSet::new(rel.name.clone(), prompts).unwrap(), WeightingMode::Static);
    let before = model.loss(&train_q, &lm).unwrap();
    let tcfg = TrainConfig { batch_size: 8, max_epochs: 6, patience: 2, tune_mode: TuneMode::Both, ..TrainConfig::default() };
    let tr = softmix::mixture::train(&mut model, &train_q, &dev_q, &lm, &tcfg).unwrap();
    assert!(!tr.epochs.is_empty());
    assert!(model.loss(&train_q, &lm).unwrap() < before);

    let records: Vec<RankRecord> = test_q
        .iter()
        .enumerate()
        .map(|(i, q)| RankRecord {
            example_id: i.to_string(),
            relation: rel.name.clone(),
            rank: rank_gold(&model.predict(&q.x, &lm).unwrap(), q.y),
        })
        .collect();
    let m = compute_metrics(&records).unwrap();
    assert_eq!(m.per_relation[&rel.name].n, test_q.len());
    assert!(m.micro_avg.p_at_1 <= m.micro_avg.mrr && m.micro_avg.mrr <= m.micro_avg.p_at_10);

    let dir = tempfile::tempdir().unwrap();
    save_lm(&lm, &dir.path().join("lm"), &[]).unwrap();
    save_mixture(&model, &tcfg, &dir.path().join("mix"), &[]).unwrap();
    let lm2 = load_lm(&dir.path().join("lm")).unwrap();
    let (model2, tcfg2) = load_mixture(&dir.path().join("mix")).unwrap();
    assert_eq!(tcfg2.tune_mode, tcfg.tune_mode);
    for q in &test_q {
        let a = model.predict(&q.x, &lm).unwrap();
        let b = model2.predict(&q.x, &lm2).unwrap();
        let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-5, "reloaded prediction differs by {diff}");
    }
}
