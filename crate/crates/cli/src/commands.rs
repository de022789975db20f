//! Subcommand bodies. Each returns its main result so that callers other than
//! the binary can inspect it.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use softmix::checkpoint::{load_lm, load_mixture, save_lm, save_mixture};
use softmix::datasets::{
    encode_triples, filter_single_token_y, split_distinct_y, split_random, Part, Split, SplitRegime, Triple,
};
use softmix::eval::{
    compute_metrics, effective_prompt_count, paired_permutation_test, rank_gold, render_html, render_tsv, sign_test,
    visualize_mixture, MetricReport, Metrics, PermutationMode, RankRecord,
};
use softmix::lm::{pretrain, PretrainReport};
use softmix::mixture::{train, Query};
use softmix::prompts::{
    aggregate_example_prompts, init_soft_from_hard, init_soft_random, load_prompt_file, load_prompt_manifest,
    parse_hard_prompt, HardPrompt, ManifestEntry,
};
use softmix::world::{
    corpus_from_text, corpus_to_text, default_relations, generate_corpus, generate_world, load_world,
    per_example_prompts, prompt_sources, save_world, CorpusOptions, World,
};
use softmix::{MaskedLm, MixtureModel, PromptSet, PromptSource, SoftPrompt, TuneMode};

use crate::config::{tune_spec_name, RunConfig};
use crate::CliError;

pub const PER_EXAMPLE_FILE: &str = "per_example.tsv";
pub const RUN_FILE: &str = "run.txt";
pub const TRAIN_REPORT_FILE: &str = "train_report.tsv";
pub const SUMMARY_FILE: &str = "summary.tsv";
pub const PRETRAIN_REPORT_FILE: &str = "pretrain_report.tsv";

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Other(format!("cannot create {}: {e}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::Other(format!("cannot write {}: {e}", path.display())))
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))
}

fn require_dir(path: &Path, what: &str, hint: &str) -> Result<(), CliError> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} not found at {} ({hint})", path.display())))
    }
}

fn load_world_checked(cfg: &RunConfig) -> Result<World, CliError> {
    let dir = cfg.world_dir();
    require_dir(&dir, "world", "run `softmix world` first")?;
    Ok(load_world(&dir)?)
}

fn load_lm_checked(cfg: &RunConfig, world: &World) -> Result<MaskedLm, CliError> {
    let dir = cfg.lm_dir();
    require_dir(&dir, "LM checkpoint", "run `softmix pretrain` first")?;
    let lm = load_lm(&dir)?;
    if lm.vocab_size() != world.vocab.len() {
        return Err(CliError::Usage(format!(
            "LM vocabulary size {} does not match the world's {}",
            lm.vocab_size(),
            world.vocab.len()
        )));
    }
    Ok(lm)
}

pub fn cmd_world(cfg: &RunConfig) -> Result<(), CliError> {
    let header = cfg.header();
    let w = generate_world(cfg.world.entities, &default_relations(cfg.world.facts_per_relation), cfg.seed)?;
    let dir = cfg.world_dir();
    save_world(&w, &dir, &header)?;

    let opts = CorpusOptions {
        repetitions_per_fact: cfg.world.repetitions,
        distractor_rate: cfg.world.distractor_rate,
        seed: cfg.seed,
    };
    let corpus = generate_corpus(&w, &opts, &[])?;
    write(&cfg.corpus_path(), &format!("{header}{}", corpus_to_text(&corpus)))?;

    let prompts_dir = dir.join("prompts");
    let mut manifest = header.clone();
    for (rel, sources) in &prompt_sources(&w, cfg.seed).by_relation {
        for (source, patterns) in sources {
            let file = format!("{rel}.{source}.txt");
            let body: String = patterns.iter().map(|p| format!("{p}\n")).collect();
            write(&prompts_dir.join(&file), &format!("{header}{body}"))?;
            let _ = writeln!(manifest, "{rel}\t{source}\t{file}");
        }
    }
    write(&prompts_dir.join("manifest.tsv"), &manifest)?;

    let mut per_example = format!("{header}# relation\tpattern\tx\ty\n");
    for (rel, pattern, x, y) in per_example_prompts(&w, &corpus, cfg.seed) {
        let _ = writeln!(per_example, "{rel}\t{pattern}\t{x}\t{y}");
    }
    write(&prompts_dir.join(PER_EXAMPLE_FILE), &per_example)?;

    info!(
        "world: {} entities, {} relations, {} facts, {} corpus sentences, vocabulary {}",
        w.entities.len(),
        w.relations.len(),
        w.facts.len(),
        corpus.len(),
        w.vocab.len()
    );
    println!("wrote world to {}", dir.display());
    Ok(())
}

pub fn cmd_pretrain(cfg: &RunConfig) -> Result<PretrainReport, CliError> {
    let w = load_world_checked(cfg)?;
    let corpus_path = cfg.corpus_path();
    let corpus = corpus_from_text(&read(&corpus_path)?, &w).map_err(|e| e.with_path(&corpus_path))?;
    let (lm, report) = pretrain(cfg.lm_config(w.vocab.len()), &corpus, &w.vocab, &cfg.pretrain_config())?;
    let dir = cfg.lm_dir();
    save_lm(&lm, &dir, &cfg.comments())?;

    let mut s = cfg.header();
    let _ = writeln!(s, "# held_out_sentences={}", report.held_out_sentences);
    let _ = writeln!(s, "# held_out_loss_init={}", report.held_out_loss_init);
    let _ = writeln!(s, "# held_out_loss_final={}", report.held_out_loss_final);
    let _ = writeln!(s, "# held_out_accuracy={}", report.held_out_accuracy);
    s.push_str("epoch\ttrain_loss\n");
    for (i, l) in report.train_loss.iter().enumerate() {
        let _ = writeln!(s, "{}\t{l}", i + 1);
    }
    write(&dir.join(PRETRAIN_REPORT_FILE), &s)?;
    println!(
        "pretrained LM: held-out masked-fact accuracy {:.4}, loss {:.4} -> {:.4}",
        report.held_out_accuracy, report.held_out_loss_init, report.held_out_loss_final
    );
    Ok(report)
}

fn relations(cfg: &RunConfig, w: &World) -> Result<Vec<String>, CliError> {
    if cfg.data.relations.is_empty() {
        return Ok(w.relations.iter().map(|r| r.name.clone()).collect());
    }
    for r in &cfg.data.relations {
        if w.relation(r).is_none() {
            return Err(CliError::Usage(format!("relation {r:?} is not in the world")));
        }
    }
    Ok(cfg.data.relations.clone())
}

/// Splits every relation independently and concatenates the parts.
pub fn build_split(cfg: &RunConfig, w: &World) -> Result<Split, CliError> {
    let regime = cfg.regime()?;
    let triples: Vec<Triple> = w.facts.facts().iter().map(Triple::from).collect();
    let triples = filter_single_token_y(&triples, &w.vocab);
    let mut out = Split {
        train: vec![],
        dev: vec![],
        test: vec![],
        regime,
        seed: cfg.seed,
    };
    for r in &w.relations {
        let rel: Vec<Triple> = triples.iter().filter(|t| t.relation == r.name).cloned().collect();
        let s = match regime {
            SplitRegime::Random => split_random(&rel, cfg.seed),
            SplitRegime::DistinctY => split_distinct_y(&rel, cfg.seed),
        }
        .map_err(|e| CliError::Usage(format!("relation {}: {e}", r.name)))?;
        out.train.extend(s.train);
        out.dev.extend(s.dev);
        out.test.extend(s.test);
    }
    Ok(out)
}

fn load_split(cfg: &RunConfig) -> Result<Split, CliError> {
    let path = cfg.splits_path();
    if !path.is_file() {
        return Err(CliError::Usage(format!(
            "split file not found at {} (run `softmix train` first)",
            path.display()
        )));
    }
    Ok(Split::from_tsv(&read(&path)?).map_err(|e| e.with_path(&path))?)
}

fn prompts_for(
    cfg: &RunConfig,
    w: &World,
    lm: &MaskedLm,
    manifest: &[ManifestEntry],
    rel_index: usize,
    rel: &str,
    train_part: &[Triple],
) -> Result<Vec<SoftPrompt>, CliError> {
    let from_manifest = |source: PromptSource| -> Result<Vec<HardPrompt>, CliError> {
        let mut out = Vec::new();
        for e in manifest.iter().filter(|e| e.relation == rel && e.source == source) {
            out.extend(load_prompt_file(&e.path, &w.vocab, source)?);
        }
        if out.is_empty() {
            return Err(CliError::Usage(format!("no {source} prompts listed for relation {rel}")));
        }
        Ok(out)
    };
    let hard = match cfg.train.init.as_str() {
        "random" => {
            let donors = from_manifest(PromptSource::Mined)?;
            let (mean, std) = lm.fit_embedding_gaussian();
            return donors
                .iter()
                .enumerate()
                .map(|(i, h)| {
                    let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add((rel_index * 1000 + i) as u64);
                    Ok(init_soft_random(h, (&mean, &std), &lm.config, seed)?)
                })
                .collect();
        }
        "per-example" | "per_example" => {
            let path = cfg.prompts_manifest().with_file_name(PER_EXAMPLE_FILE);
            let text = read(&path)?;
            let train_x: HashSet<&str> = train_part.iter().map(|t| t.x.as_str()).collect();
            let mut examples = Vec::new();
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() || line.starts_with('#') {
                    continue;
                }
                let f: Vec<&str> = line.split('\t').collect();
                if f.len() != 4 {
                    return Err(CliError::Format(format!(
                        "{}:{}: expected relation<TAB>pattern<TAB>x<TAB>y",
                        path.display(),
                        i + 1
                    )));
                }
                if f[0] != rel || !train_x.contains(f[2]) {
                    continue;
                }
                let h = parse_hard_prompt(f[1], &w.vocab, PromptSource::PerExample)?;
                examples.push((h, f[2].to_string(), f[3].to_string()));
            }
            let kept = aggregate_example_prompts(&examples, cfg.train.per_example_min_count);
            if kept.is_empty() {
                return Err(CliError::Usage(format!("no per-example prompts survive for relation {rel}")));
            }
            kept
        }
        other => {
            let source: PromptSource = other
                .parse()
                .map_err(|_| CliError::Usage(format!("unknown init {other:?}")))?;
            from_manifest(source)?
        }
    };
    hard.iter()
        .map(|h| Ok(init_soft_from_hard(h, lm, &w.vocab)?))
        .collect()
}

fn dev_summary(model: &MixtureModel, dev: &[Query], lm: &MaskedLm) -> Result<(f64, f64), CliError> {
    if dev.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let loss = model.loss(dev, lm)? / dev.len() as f64;
    let mut hits = 0;
    for q in dev {
        if rank_gold(&model.predict(&q.x, lm)?, q.y) == 1 {
            hits += 1;
        }
    }
    Ok((loss, hits as f64 / dev.len() as f64))
}

/// Trains one run per tune mode; returns the run directories.
pub fn cmd_train(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let specs = cfg.tune_specs()?;
    let weighting = cfg.weighting()?;
    let w = load_world_checked(cfg)?;
    let lm = load_lm_checked(cfg, &w)?;
    let rels = relations(cfg, &w)?;
    let split = match &cfg.paths.splits {
        Some(_) => load_split(cfg)?,
        None => {
            let s = build_split(cfg, &w)?;
            write(&cfg.splits_path(), &format!("{}{}", cfg.header(), s.to_tsv()))?;
            s
        }
    };
    let needs_manifest = !matches!(cfg.train.init.as_str(), "per-example" | "per_example");
    let manifest = if needs_manifest {
        load_prompt_manifest(&cfg.prompts_manifest())?
    } else {
        vec![]
    };

    let mut dirs = Vec::new();
    for spec in specs {
        let name = cfg.run_name(spec);
        let run_dir = cfg.runs_dir().join(&name);
        let mut report = format!("{}relation\tepoch\ttrain_loss\tdev_loss\tdev_p_at_1\tbest\n", cfg.header());
        let mut summary = format!(
            "{}relation\tprompts\ttrain\tdev\tbest_epoch\tepochs_run\tstopped_early\tdev_loss\tdev_p_at_1\n",
            cfg.header()
        );
        for (ri, rel) in rels.iter().enumerate() {
            let s = split.for_relation(rel);
            let enc = |v: &[Triple]| encode_triples(v, &w.vocab);
            let (train_q, dev_q) = (enc(&s.train)?, enc(&s.dev)?);
            let ri_world = w.relations.iter().position(|r| &r.name == rel).unwrap_or(ri);
            let prompts = prompts_for(cfg, &w, &lm, &manifest, ri_world, rel, &s.train)?;
            let mut model = MixtureModel::new(PromptSet::new(rel.clone(), prompts)?, weighting);
            let tc = cfg.train_config(spec.unwrap_or(TuneMode::Both))?;
            let (best, ran, early) = match spec {
                Some(_) => {
                    let r = train(&mut model, &train_q, &dev_q, &lm, &tc)?;
                    for e in &r.epochs {
                        let _ = writeln!(
                            report,
                            "{rel}\t{}\t{}\t{}\t{}\t{}",
                            e.epoch,
                            e.train_loss,
                            e.dev_loss,
                            e.dev_p_at_1,
                            u8::from(e.epoch == r.best_epoch)
                        );
                    }
                    (r.best_epoch, r.epochs.len(), r.stopped_early)
                }
                None => (0, 0, false),
            };
            let (dev_loss, dev_p1) = dev_summary(&model, &dev_q, &lm)?;
            info!("{name} {rel}: best epoch {best}/{ran}, dev P@1 {dev_p1:.4}");
            let _ = writeln!(
                summary,
                "{rel}\t{}\t{}\t{}\t{best}\t{ran}\t{early}\t{dev_loss}\t{dev_p1}",
                model.len(),
                train_q.len(),
                dev_q.len()
            );
            save_mixture(&model, &tc, &run_dir.join(rel), &cfg.comments())?;
        }
        let mut run_info = cfg.header();
        let _ = writeln!(run_info, "init = {}", cfg.train.init);
        let _ = writeln!(run_info, "tune_mode = {}", tune_spec_name(spec));
        let _ = writeln!(run_info, "weighting = {}", cfg.train.weighting);
        let _ = writeln!(run_info, "optimizer = {}", cfg.train.optimizer);
        let _ = writeln!(run_info, "regime = {}", split.regime);
        let _ = writeln!(run_info, "relations = {}", rels.join(" "));
        write(&run_dir.join(RUN_FILE), &run_info)?;
        write(&run_dir.join(TRAIN_REPORT_FILE), &report)?;
        write(&run_dir.join(SUMMARY_FILE), &summary)?;
        println!("trained run {}", run_dir.display());
        dirs.push(run_dir);
    }
    Ok(dirs)
}

fn resolve_run(cfg: &RunConfig, run: &Path) -> Result<PathBuf, CliError> {
    let candidates = [run.to_path_buf(), cfg.runs_dir().join(run)];
    candidates
        .into_iter()
        .find(|p| p.join(RUN_FILE).is_file())
        .ok_or_else(|| CliError::Usage(format!("no trained run at {}", run.display())))
}

fn run_name(dir: &Path) -> String {
    dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn run_relations(dir: &Path) -> Result<Vec<String>, CliError> {
    let text = read(&dir.join(RUN_FILE))?;
    text.lines()
        .find_map(|l| l.strip_prefix("relations = "))
        .map(|v| v.split_whitespace().map(str::to_string).collect())
        .ok_or_else(|| CliError::Format(format!("{} lacks a relations line", dir.join(RUN_FILE).display())))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    pub relation: String,
    pub prompts: usize,
    pub entropy_bits: f64,
    pub effective_prompts: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutput {
    pub records: Vec<RankRecord>,
    pub report: MetricReport,
    pub diagnostics: Vec<Diagnostic>,
}

fn metrics_table(
    cfg: &RunConfig,
    name: &str,
    part: Part,
    out: &EvalOutput,
    num: &dyn Fn(f64) -> String,
) -> String {
    let mut s = cfg.header();
    let _ = writeln!(s, "# run={name} part={part}");
    s.push_str("relation\tn\tp_at_1\tp_at_10\tmrr\tentropy_bits\teffective_prompts\tprompts\n");
    let row = |s: &mut String, label: &str, m: &Metrics, d: Option<&Diagnostic>| {
        let (h, e, k) = match d {
            Some(d) => (num(d.entropy_bits), num(d.effective_prompts), d.prompts.to_string()),
            None => ("-".into(), "-".into(), "-".into()),
        };
        let _ = writeln!(
            s,
            "{label}\t{}\t{}\t{}\t{}\t{h}\t{e}\t{k}",
            m.n,
            num(m.p_at_1),
            num(m.p_at_10),
            num(m.mrr)
        );
    };
    for (rel, m) in &out.report.per_relation {
        row(&mut s, rel, m, out.diagnostics.iter().find(|d| &d.relation == rel));
    }
    row(&mut s, "macro", &out.report.macro_avg, None);
    row(&mut s, "micro", &out.report.micro_avg, None);
    s
}

pub fn eval_file(run_dir: &Path, part: Part) -> PathBuf {
    run_dir.join(format!("eval_{part}.tsv"))
}

pub fn predictions_file(run_dir: &Path, part: Part) -> PathBuf {
    run_dir.join(format!("predictions_{part}.tsv"))
}

pub fn cmd_eval(cfg: &RunConfig, run: &Path) -> Result<EvalOutput, CliError> {
    let part = cfg.part()?;
    let run_dir = resolve_run(cfg, run)?;
    let w = load_world_checked(cfg)?;
    let lm = load_lm_checked(cfg, &w)?;
    let split = load_split(cfg)?;

    let mut records = Vec::new();
    let mut diagnostics = Vec::new();
    let mut preds = format!("{}example_id\trelation\tx\ty\trank\treciprocal_rank\tcorrect\n", cfg.header());
    for rel in run_relations(&run_dir)? {
        let (model, _) = load_mixture(&run_dir.join(&rel))?;
        let triples = split.for_relation(&rel).part(part).to_vec();
        let queries = encode_triples(&triples, &w.vocab)?;
        for (t, q) in triples.iter().zip(&queries) {
            let rank = rank_gold(&model.predict(&q.x, &lm)?, q.y);
            let id = format!("{rel}/{}", t.x);
            let _ = writeln!(
                preds,
                "{id}\t{rel}\t{}\t{}\t{rank}\t{}\t{}",
                t.x,
                t.y,
                1.0 / rank as f64,
                u8::from(rank == 1)
            );
            records.push(RankRecord {
                example_id: id,
                relation: rel.clone(),
                rank,
            });
        }
        let (h, eff) = effective_prompt_count(&model.prior())?;
        diagnostics.push(Diagnostic {
            relation: rel.clone(),
            prompts: model.len(),
            entropy_bits: h,
            effective_prompts: eff,
        });
    }
    if records.is_empty() {
        return Err(CliError::Usage(format!("the {part} part has no examples for this run")));
    }
    let report = compute_metrics(&records)?;
    let out = EvalOutput {
        records,
        report,
        diagnostics,
    };
    let name = run_name(&run_dir);
    let table = metrics_table(cfg, &name, part, &out, &|x| format!("{x:.4}"));
    write(&eval_file(&run_dir, part), &table)?;
    write(
        &run_dir.join(format!("eval_{part}.full.tsv")),
        &metrics_table(cfg, &name, part, &out, &|x| format!("{x}")),
    )?;
    write(&predictions_file(&run_dir, part), &preds)?;
    print!("{}", table.lines().filter(|l| !l.starts_with('#')).map(|l| format!("{l}\n")).collect::<String>());
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub n: usize,
    pub a_only: usize,
    pub b_only: usize,
    pub sign_p: f64,
    pub permutation_p: f64,
    pub sign_significant: bool,
    pub permutation_significant: bool,
}

pub fn verdict(significant: bool, alpha: f64) -> String {
    if significant {
        format!("significant at {alpha}")
    } else {
        "not significant".into()
    }
}

/// `(example_id, correct)` rows of a predictions file.
fn read_predictions(path: &Path) -> Result<Vec<(String, bool)>, CliError> {
    let text = read(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.starts_with("example_id\t") || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || CliError::Format(format!("{}:{}: malformed prediction row", path.display(), i + 1));
        if f.len() != 7 {
            return Err(bad());
        }
        let correct = match f[6] {
            "1" => true,
            "0" => false,
            _ => return Err(bad()),
        };
        out.push((f[0].to_string(), correct));
    }
    Ok(out)
}

pub fn cmd_compare(cfg: &RunConfig, run_a: &Path, run_b: &Path) -> Result<Comparison, CliError> {
    let part = cfg.part()?;
    let (da, db) = (resolve_run(cfg, run_a)?, resolve_run(cfg, run_b)?);
    let missing = |d: &Path| CliError::Usage(format!("run {} has no {part} evaluation; run `softmix eval` first", d.display()));
    let (pa, pb) = (predictions_file(&da, part), predictions_file(&db, part));
    if !pa.is_file() {
        return Err(missing(&da));
    }
    if !pb.is_file() {
        return Err(missing(&db));
    }
    let (a, b) = (read_predictions(&pa)?, read_predictions(&pb)?);
    if a.len() != b.len() || a.iter().zip(&b).any(|(x, y)| x.0 != y.0) {
        return Err(CliError::Usage(
            "the two runs were evaluated on different example sets or orders".into(),
        ));
    }
    let ca: Vec<bool> = a.iter().map(|x| x.1).collect();
    let cb: Vec<bool> = b.iter().map(|x| x.1).collect();
    let sign_p = sign_test(&ca, &cb)?;
    let score = |v: &[bool]| v.iter().map(|&c| f64::from(u8::from(c))).collect::<Vec<f64>>();
    let mode = if ca.len() <= 20 {
        PermutationMode::Exact
    } else {
        PermutationMode::Sampled {
            resamples: cfg.compare.resamples,
            seed: cfg.seed,
        }
    };
    let permutation_p = paired_permutation_test(&score(&ca), &score(&cb), mode)?;
    let alpha = cfg.compare.alpha;
    let c = Comparison {
        n: ca.len(),
        a_only: ca.iter().zip(&cb).filter(|(x, y)| **x && !**y).count(),
        b_only: ca.iter().zip(&cb).filter(|(x, y)| !**x && **y).count(),
        sign_p,
        permutation_p,
        sign_significant: sign_p < alpha,
        permutation_significant: permutation_p < alpha,
    };

    let (na, nb) = (run_name(&da), run_name(&db));
    let p1 = |v: &[bool]| v.iter().filter(|&&x| x).count() as f64 / v.len().max(1) as f64;
    let mut s = cfg.header();
    let _ = writeln!(s, "# run_a={na} run_b={nb} part={part} n={}", c.n);
    let _ = writeln!(s, "# p_at_1_a={} p_at_1_b={}", p1(&ca), p1(&cb));
    let _ = writeln!(s, "# a_only_correct={} b_only_correct={}", c.a_only, c.b_only);
    let _ = writeln!(s, "# sign_test_p={} verdict={}", c.sign_p, verdict(c.sign_significant, alpha));
    let _ = writeln!(
        s,
        "# permutation_p={} verdict={}",
        c.permutation_p,
        verdict(c.permutation_significant, alpha)
    );
    s.push_str("example_id\ta_correct\tb_correct\n");
    for ((id, x), (_, y)) in a.iter().zip(&b) {
        let _ = writeln!(s, "{id}\t{}\t{}", u8::from(*x), u8::from(*y));
    }
    let path = cfg.out.join("compare").join(format!("{na}_vs_{nb}.{part}.tsv"));
    write(&path, &s)?;
    println!("{na} vs {nb} on {part} (n={}): P@1 {:.4} vs {:.4}", c.n, p1(&ca), p1(&cb));
    println!("sign test p={:.4} ({})", c.sign_p, verdict(c.sign_significant, alpha));
    println!("permutation test p={:.4} ({})", c.permutation_p, verdict(c.permutation_significant, alpha));
    Ok(c)
}

pub fn cmd_viz(cfg: &RunConfig, run: &Path) -> Result<(), CliError> {
    let run_dir = resolve_run(cfg, run)?;
    let w = load_world_checked(cfg)?;
    let lm = load_lm_checked(cfg, &w)?;
    let rels = run_relations(&run_dir)?;
    for rel in &rels {
        let (model, _) = load_mixture(&run_dir.join(rel))?;
        let rows = visualize_mixture(&model, &lm, &w.vocab);
        let dir = run_dir.join("viz");
        write(&dir.join(format!("{rel}.tsv")), &format!("{}{}", cfg.header(), render_tsv(&model, &rows)))?;
        let html = render_html(&format!("{} / {rel}", run_name(&run_dir)), &model, &rows);
        let stamp = cfg.header().trim_start_matches("# ").trim_end().to_string();
        write(&dir.join(format!("{rel}.html")), &format!("{html}<!-- {stamp} -->\n"))?;
    }
    println!("wrote {} visualization pages to {}", rels.len(), run_dir.join("viz").display());
    Ok(())
}
