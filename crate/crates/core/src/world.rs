//! A closed synthetic world: entities, relations, functional gold facts, and a
//! corpus of template sentences that expresses them.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::Vocabulary;

pub const X_MARK: &str = "[X]";
pub const Y_MARK: &str = "[Y]";

/// Requested shape of one relation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationSpec {
    pub name: String,
    /// Number of entities that receive a fact for this relation.
    pub facts: usize,
    pub y_domain: Vec<String>,
    /// Surface templates, space-separated, with one `[X]` and one `[Y]` each.
    pub templates: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationSchema {
    pub name: String,
    pub surface_templates: Vec<Vec<String>>,
    pub y_domain: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Fact {
    pub relation: String,
    /// Space-separated entity tokens.
    pub x: String,
    pub y: String,
}

/// Functional fact table: at most one `y` per `(relation, x)`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FactTable {
    facts: Vec<Fact>,
}

impl FactTable {
    pub fn new(facts: Vec<Fact>) -> Result<Self> {
        let mut seen = HashSet::new();
        for f in &facts {
            if !seen.insert((f.relation.as_str(), f.x.as_str())) {
                return Err(Error::input(format!(
                    "relation {} has more than one fact for {:?}",
                    f.relation, f.x
                )));
            }
        }
        Ok(Self { facts })
    }

    pub fn facts(&self) -> &[Fact] {
        &self.facts
    }

    pub fn len(&self) -> usize {
        self.facts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }

    pub fn for_relation<'a>(&'a self, relation: &'a str) -> impl Iterator<Item = &'a Fact> + 'a {
        self.facts.iter().filter(move |f| f.relation == relation)
    }

    pub fn lookup(&self, relation: &str, x: &str) -> Option<&str> {
        self.facts
            .iter()
            .find(|f| f.relation == relation && f.x == x)
            .map(|f| f.y.as_str())
    }

    /// `relation<TAB>x<TAB>y` lines.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for f in &self.facts {
            s.push_str(&format!("{}\t{}\t{}\n", f.relation, f.x, f.y));
        }
        s
    }

    /// Inverse of [`FactTable::to_tsv`]; `#` lines are skipped.
    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut facts = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 || f.iter().any(|x| x.is_empty()) {
                return Err(Error::format_at(None, i + 1, "expected relation<TAB>x<TAB>y"));
            }
            facts.push(Fact {
                relation: f[0].to_string(),
                x: f[1].to_string(),
                y: f[2].to_string(),
            });
        }
        Self::new(facts).map_err(|e| Error::format(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusSentence {
    pub tokens: Vec<String>,
    /// Position of the y token; `None` for distractors.
    pub fact_token_index: Option<usize>,
    pub relation: Option<String>,
    /// Half-open token range holding x.
    pub x_span: Option<(usize, usize)>,
}

impl CorpusSentence {
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub vocab: Vocabulary,
    pub relations: Vec<RelationSchema>,
    pub facts: FactTable,
    /// Entity names in generation order; each is 1 to 3 tokens.
    pub entities: Vec<String>,
    pub seed: u64,
}

impl World {
    pub fn relation(&self, name: &str) -> Option<&RelationSchema> {
        self.relations.iter().find(|r| r.name == name)
    }
}

const SYLLABLES: [&str; 24] = [
    "ka", "lo", "mi", "ren", "tu", "sa", "vel", "dor", "ni", "ba", "ro", "shi", "mar", "ten", "qui", "po",
    "zel", "ha", "fi", "gor", "lu", "win", "ce", "da",
];

/// Names that appear as the leading token(s) of multi-token entities.
const GIVEN: [&str; 12] = [
    "ada", "bram", "cleo", "dov", "elin", "fenn", "gita", "hugo", "ines", "jory", "kato", "lise",
];

/// Pseudo-words not used anywhere else in the world.
fn pseudo_words(n: usize, rng: &mut ChaCha8Rng, reserved: &HashSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    let mut seen: HashSet<String> = reserved.clone();
    while out.len() < n {
        let k = rng.random_range(2..=3);
        let w: String = (0..k).map(|_| *SYLLABLES.choose(rng).unwrap()).collect();
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn parse_template(t: &str) -> Result<Vec<String>> {
    let toks: Vec<String> = t.split_whitespace().map(str::to_string).collect();
    let nx = toks.iter().filter(|t| *t == X_MARK).count();
    let ny = toks.iter().filter(|t| *t == Y_MARK).count();
    if nx != 1 || ny != 1 {
        return Err(Error::input(format!("template {t:?} needs exactly one [X] and one [Y]")));
    }
    Ok(toks)
}

/// Generates the world. Entities are mostly single pseudo-words; a fifth get a
/// leading given name and a twentieth two. Each relation picks `facts`
/// distinct entities and assigns each a uniformly drawn `y`.
pub fn generate_world(n_entities: usize, relations: &[RelationSpec], seed: u64) -> Result<World> {
    if relations.is_empty() {
        return Err(Error::input("at least one relation is required"));
    }
    if n_entities == 0 {
        return Err(Error::input("at least one entity is required"));
    }
    let mut schemas = Vec::with_capacity(relations.len());
    let mut reserved: HashSet<String> = GIVEN.iter().map(|s| s.to_string()).collect();
    let mut names = HashSet::new();
    for r in relations {
        if !names.insert(r.name.as_str()) {
            return Err(Error::input(format!("duplicate relation {}", r.name)));
        }
        if r.y_domain.is_empty() {
            return Err(Error::input(format!("relation {} has an empty y domain", r.name)));
        }
        if r.templates.len() < 2 {
            return Err(Error::input(format!("relation {} needs at least two surface templates", r.name)));
        }
        if r.facts > n_entities {
            return Err(Error::input(format!(
                "relation {} requests {} facts but only {} entities exist",
                r.name, r.facts, n_entities
            )));
        }
        let templates = r.templates.iter().map(|t| parse_template(t)).collect::<Result<Vec<_>>>()?;
        for t in templates.iter().flatten() {
            if t != X_MARK && t != Y_MARK {
                reserved.insert(t.clone());
            }
        }
        for y in &r.y_domain {
            if y.split_whitespace().count() != 1 {
                return Err(Error::input(format!("y value {y:?} must be a single token")));
            }
            reserved.insert(y.clone());
        }
        schemas.push(RelationSchema {
            name: r.name.clone(),
            surface_templates: templates,
            y_domain: r.y_domain.clone(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let surnames = pseudo_words(n_entities, &mut rng, &reserved);
    let entities: Vec<String> = surnames
        .into_iter()
        .map(|s| {
            let u: f64 = rng.random();
            if u < 0.05 {
                let a = GIVEN.choose(&mut rng).unwrap();
                let b = GIVEN.choose(&mut rng).unwrap();
                format!("{a} {b} {s}")
            } else if u < 0.25 {
                format!("{} {s}", GIVEN.choose(&mut rng).unwrap())
            } else {
                s
            }
        })
        .collect();

    let mut facts = Vec::new();
    for r in relations {
        let chosen = rand::seq::index::sample(&mut rng, n_entities, r.facts).into_vec();
        let mut chosen = chosen;
        chosen.sort_unstable();
        for i in chosen {
            let y = r.y_domain.choose(&mut rng).unwrap().clone();
            facts.push(Fact {
                relation: r.name.clone(),
                x: entities[i].clone(),
                y,
            });
        }
    }

    // Vocabulary: template words, then y values, then entity tokens, each in
    // first-seen order.
    let mut words: Vec<String> = Vec::new();
    let push = |w: &str, words: &mut Vec<String>| {
        if w != X_MARK && w != Y_MARK {
            words.push(w.to_string());
        }
    };
    for s in &schemas {
        for t in s.surface_templates.iter().flatten() {
            push(t, &mut words);
        }
    }
    for extra in FILLER_WORDS.iter().copied().chain(DISTRACTORS.iter().flat_map(|d| d.split(' '))) {
        push(extra, &mut words);
    }
    for s in &schemas {
        for y in &s.y_domain {
            push(y, &mut words);
        }
    }
    for g in GIVEN {
        push(g, &mut words);
    }
    for e in &entities {
        for t in e.split_whitespace() {
            push(t, &mut words);
        }
    }
    let vocab = Vocabulary::new(words)?;

    Ok(World {
        vocab,
        relations: schemas,
        facts: FactTable::new(facts)?,
        entities,
        seed,
    })
}

/// Words used by distractor sentences and prompt variants.
pub const FILLER_WORDS: [&str; 8] = ["we", "heard", "about", "again", "also", "indeed", "that", "someone"];

const DISTRACTORS: [&str; 3] = ["we heard about [X] again .", "someone mentioned [X] .", "that is [X] indeed ."];

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusOptions {
    pub repetitions_per_fact: usize,
    /// Distractor sentences per fact sentence.
    pub distractor_rate: f64,
    pub seed: u64,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        Self {
            repetitions_per_fact: 6,
            distractor_rate: 0.1,
            seed: 0,
        }
    }
}

fn render(template: &[String], x: &str, y: &str) -> CorpusSentence {
    let mut tokens = Vec::with_capacity(template.len() + 2);
    let mut fact = None;
    let mut span = None;
    for t in template {
        if t == X_MARK {
            let start = tokens.len();
            tokens.extend(x.split_whitespace().map(str::to_string));
            span = Some((start, tokens.len()));
        } else if t == Y_MARK {
            fact = Some(tokens.len());
            tokens.push(y.to_string());
        } else {
            tokens.push(t.clone());
        }
    }
    CorpusSentence {
        tokens,
        fact_token_index: fact,
        relation: None,
        x_span: span,
    }
}

/// Expresses every fact `repetitions_per_fact` times through uniformly chosen
/// surface templates, interleaved with distractor sentences about random
/// entities. Facts listed in `exclude` are left out entirely.
pub fn generate_corpus(world: &World, opts: &CorpusOptions, exclude: &[Fact]) -> Result<Vec<CorpusSentence>> {
    if opts.repetitions_per_fact == 0 {
        return Err(Error::input("repetitions_per_fact must be at least 1"));
    }
    if !(opts.distractor_rate >= 0.0 && opts.distractor_rate.is_finite()) {
        return Err(Error::input("distractor_rate must be finite and non-negative"));
    }
    let excluded: HashSet<&Fact> = exclude.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let distractors: Vec<Vec<String>> = DISTRACTORS
        .iter()
        .map(|t| t.split_whitespace().map(str::to_string).collect())
        .collect();
    let mut out = Vec::new();
    let mut carry = 0.0;
    for f in world.facts.facts() {
        if excluded.contains(f) {
            continue;
        }
        let schema = world
            .relation(&f.relation)
            .ok_or_else(|| Error::Internal(format!("fact for unknown relation {}", f.relation)))?;
        for _ in 0..opts.repetitions_per_fact {
            let t = schema.surface_templates.choose(&mut rng).unwrap();
            let mut s = render(t, &f.x, &f.y);
            s.relation = Some(f.relation.clone());
            out.push(s);
            carry += opts.distractor_rate;
            while carry >= 1.0 {
                carry -= 1.0;
                let t = distractors.choose(&mut rng).unwrap();
                let e = world.entities.choose(&mut rng).unwrap();
                let mut d = render(t, e, "");
                d.fact_token_index = None;
                out.push(d);
            }
        }
    }
    out.shuffle(&mut rng);
    Ok(out)
}

/// One sentence per line, space-separated tokens.
pub fn corpus_to_text(corpus: &[CorpusSentence]) -> String {
    let mut s = String::new();
    for c in corpus {
        s.push_str(&c.text());
        s.push('\n');
    }
    s
}

/// Reads a corpus back. The fact position is recovered by matching each
/// sentence against the relation templates and the fact table; sentences that
/// match no fact are distractors.
pub fn corpus_from_text(text: &str, world: &World) -> Result<Vec<CorpusSentence>> {
    let mut index: BTreeMap<Vec<String>, CorpusSentence> = BTreeMap::new();
    for f in world.facts.facts() {
        if let Some(schema) = world.relation(&f.relation) {
            for t in &schema.surface_templates {
                let mut s = render(t, &f.x, &f.y);
                s.relation = Some(f.relation.clone());
                index.insert(s.tokens.clone(), s);
            }
        }
    }
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tokens: Vec<String> = line.split_whitespace().map(str::to_string).collect();
        for t in &tokens {
            if world.vocab.id(t).is_none() {
                return Err(Error::format_at(None, i + 1, format!("unknown token {t:?}")));
            }
        }
        out.push(index.get(&tokens).cloned().unwrap_or(CorpusSentence {
            tokens,
            fact_token_index: None,
            relation: None,
            x_span: None,
        }));
    }
    Ok(out)
}

pub const VOCAB_FILE: &str = "vocab.txt";
pub const RELATIONS_FILE: &str = "relations.tsv";
pub const FACTS_FILE: &str = "facts.tsv";
pub const ENTITIES_FILE: &str = "entities.txt";

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn with_header(header: &str, body: String) -> String {
    if header.is_empty() {
        body
    } else {
        format!("{header}{body}")
    }
}

/// Writes the vocabulary, relation schemas, facts and entities of `world`
/// into `dir`. `header` (e.g. `# seed=...` lines) is prepended to each file.
pub fn save_world(world: &World, dir: &Path, header: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let vocab: String = world.vocab.tokens().iter().map(|t| format!("{t}\n")).collect();
    write(&dir.join(VOCAB_FILE), &with_header(header, vocab))?;
    let mut rel = format!("# world_seed={}\n", world.seed);
    for r in &world.relations {
        for t in &r.surface_templates {
            rel.push_str(&format!("{}\ttemplate\t{}\n", r.name, t.join(" ")));
        }
        for y in &r.y_domain {
            rel.push_str(&format!("{}\ty\t{y}\n", r.name));
        }
    }
    write(&dir.join(RELATIONS_FILE), &with_header(header, rel))?;
    write(&dir.join(FACTS_FILE), &with_header(header, world.facts.to_tsv()))?;
    let ents: String = world.entities.iter().map(|e| format!("{e}\n")).collect();
    write(&dir.join(ENTITIES_FILE), &with_header(header, ents))
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

/// Reads a world written by [`save_world`].
pub fn load_world(dir: &Path) -> Result<World> {
    let vp = dir.join(VOCAB_FILE);
    let tokens: Vec<String> = data_lines(&read(&vp)?).map(|(_, l)| l.to_string()).collect();
    let vocab = Vocabulary::from_tokens(tokens).map_err(|e| Error::format(e.to_string()).with_path(&vp))?;

    let rp = dir.join(RELATIONS_FILE);
    let rel_text = read(&rp)?;
    let seed = rel_text
        .lines()
        .find_map(|l| l.strip_prefix("# world_seed="))
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(0);
    let mut relations: Vec<RelationSchema> = Vec::new();
    for (n, line) in data_lines(&rel_text) {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(Error::format_at(Some(&rp), n, "expected relation<TAB>kind<TAB>value"));
        }
        let idx = match relations.iter().position(|r| r.name == f[0]) {
            Some(i) => i,
            None => {
                relations.push(RelationSchema {
                    name: f[0].to_string(),
                    surface_templates: vec![],
                    y_domain: vec![],
                });
                relations.len() - 1
            }
        };
        match f[1] {
            "template" => relations[idx]
                .surface_templates
                .push(parse_template(f[2]).map_err(|e| Error::format_at(Some(&rp), n, e.to_string()))?),
            "y" => relations[idx].y_domain.push(f[2].to_string()),
            other => return Err(Error::format_at(Some(&rp), n, format!("unknown kind {other:?}"))),
        }
    }

    let fp = dir.join(FACTS_FILE);
    let facts = FactTable::from_tsv(&read(&fp)?).map_err(|e| e.with_path(&fp))?;
    let ep = dir.join(ENTITIES_FILE);
    let entities = data_lines(&read(&ep)?).map(|(_, l)| l.to_string()).collect();
    Ok(World {
        vocab,
        relations,
        facts,
        entities,
        seed,
    })
}

/// The bundled default world: a small-|y| relation, a medium one and a
/// large-|y| one.
pub fn default_relations(facts_per_relation: usize) -> Vec<RelationSpec> {
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    vec![
        RelationSpec {
            name: "located-in".into(),
            facts: facts_per_relation,
            y_domain: s(&["norvia", "sudland", "estmark", "wesmoor", "centra", "ostrea"]),
            templates: s(&[
                "[X] is located in [Y] .",
                "[X] lies within the region of [Y] .",
                "the town of [X] belongs to [Y] .",
            ]),
        },
        RelationSpec {
            name: "speaks".into(),
            facts: facts_per_relation,
            y_domain: s(&[
                "arvish", "belic", "corran", "dulese", "eskar", "fyrish", "gannic", "holt", "ismic", "jurr",
                "kelvan", "lorish",
            ]),
            templates: s(&[
                "[X] speaks [Y] .",
                "the native language of [X] is [Y] .",
                "people in [X] talk in [Y] .",
            ]),
        },
        RelationSpec {
            name: "plays-instrument".into(),
            facts: facts_per_relation,
            y_domain: (0..40).map(|i| format!("instr{i:02}")).collect(),
            templates: s(&[
                "[X] plays the [Y] .",
                "[X] is a famous [Y] player .",
                "on stage [X] performs with a [Y] .",
            ]),
        },
    ]
}

const MINED_SWAP_RATE: f64 = 0.5;

/// Prompt sources derived from the world, standing in for hand-written,
/// paraphrased and text-mined prompt collections.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSources {
    /// relation → source name → patterns.
    pub by_relation: BTreeMap<String, BTreeMap<String, Vec<String>>>,
}

/// * `single`: the first surface template.
/// * `paraphrase`: every surface template plus each with a filler word inserted.
/// * `mined`: a bare `[X] [Y] .` pattern plus two noisy variants per surface
///   template, in which content words are swapped for words from other
///   relations' templates (at least one per variant) and sometimes one word
///   is dropped.
pub fn prompt_sources(world: &World, seed: u64) -> PromptSources {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_relation = BTreeMap::new();
    for (ri, schema) in world.relations.iter().enumerate() {
        let foreign: Vec<String> = world
            .relations
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != ri)
            .flat_map(|(_, r)| r.surface_templates.iter().flatten().cloned())
            .filter(|t| t != X_MARK && t != Y_MARK && t != ".")
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let join = |t: &[String]| t.join(" ");
        let mut sources: BTreeMap<String, Vec<String>> = BTreeMap::new();
        sources.insert("single".into(), vec![join(&schema.surface_templates[0])]);

        let mut para = Vec::new();
        for t in &schema.surface_templates {
            para.push(join(t));
        }
        for t in &schema.surface_templates {
            let mut v = t.clone();
            let at = rng.random_range(0..=v.len());
            v.insert(at, FILLER_WORDS.choose(&mut rng).unwrap().to_string());
            para.push(join(&v));
        }
        sources.insert("paraphrase".into(), dedup(para));

        let mut mined = vec![format!("{X_MARK} {Y_MARK} .")];
        for t in &schema.surface_templates {
            let content: Vec<usize> = (0..t.len())
                .filter(|&i| t[i] != X_MARK && t[i] != Y_MARK && t[i] != ".")
                .collect();
            if content.is_empty() || foreign.is_empty() {
                continue;
            }
            for _ in 0..2 {
                let mut v = t.clone();
                let forced = *content.choose(&mut rng).unwrap();
                for &i in &content {
                    if i == forced || rng.random::<f64>() < MINED_SWAP_RATE {
                        v[i] = foreign.choose(&mut rng).unwrap().clone();
                    }
                }
                if content.len() > 1 && rng.random::<f64>() < 0.5 {
                    v.remove(*content.choose(&mut rng).unwrap());
                }
                mined.push(join(&v));
            }
        }
        sources.insert("mined".into(), dedup(mined));
        by_relation.insert(schema.name.clone(), sources);
    }
    PromptSources { by_relation }
}

fn dedup(v: Vec<String>) -> Vec<String> {
    let mut seen = HashSet::new();
    v.into_iter().filter(|s| seen.insert(s.clone())).collect()
}

/// One `(pattern, x, y)` record per fact sentence, plus occasional one-off
/// over-specific patterns, in the style of per-example prompt collections.
pub fn per_example_prompts(world: &World, corpus: &[CorpusSentence], seed: u64) -> Vec<(String, String, String, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for s in corpus {
        let (Some(rel), Some(fi), Some((xs, xe))) = (&s.relation, s.fact_token_index, s.x_span) else {
            continue;
        };
        let mut pattern = Vec::new();
        for (i, t) in s.tokens.iter().enumerate() {
            if i == xs {
                pattern.push(X_MARK.to_string());
            } else if i > xs && i < xe {
                continue;
            } else if i == fi {
                pattern.push(Y_MARK.to_string());
            } else {
                pattern.push(t.clone());
            }
        }
        if rng.random::<f64>() < 0.05 {
            let at = rng.random_range(0..=pattern.len());
            let w = world.vocab.token(rng.random_range(2..world.vocab.len())).unwrap();
            pattern.insert(at, w.to_string());
        }
        let x = s.tokens[xs..xe].join(" ");
        out.push((rel.clone(), pattern.join(" "), x, s.tokens[fi].clone()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_relation(facts: usize, y: &[&str], templates: &[&str]) -> Vec<RelationSpec> {
        vec![RelationSpec {
            name: "r".into(),
            facts,
            y_domain: y.iter().map(|s| s.to_string()).collect(),
            templates: templates.iter().map(|s| s.to_string()).collect(),
        }]
    }

    #[test]
    fn single_forced_fact() {
        let w = generate_world(1, &one_relation(1, &["yes"], &["[X] is [Y] .", "[Y] is [X] ."]), 3).unwrap();
        assert_eq!(w.facts.len(), 1);
        assert_eq!(w.facts.facts()[0].y, "yes");
    }

    #[test]
    fn deterministic_per_seed() {
        let rel = default_relations(50);
        let a = generate_world(80, &rel, 9).unwrap();
        let b = generate_world(80, &rel, 9).unwrap();
        assert_eq!(a, b);
        let c = generate_world(80, &rel, 10).unwrap();
        assert_ne!(a.facts, c.facts);
    }

    #[test]
    fn counts_and_functionality() {
        let mut rel = default_relations(0);
        rel[0].facts = 500;
        rel[1].facts = 120;
        rel[2].facts = 333;
        let w = generate_world(500, &rel, 1).unwrap();
        // independent recount
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        let mut keys = HashSet::new();
        for f in w.facts.facts() {
            *counts.entry(f.relation.as_str()).or_default() += 1;
            assert!(keys.insert((f.relation.clone(), f.x.clone())));
            let schema = w.relation(&f.relation).unwrap();
            assert!(schema.y_domain.contains(&f.y));
            assert!(w.vocab.id(&f.y).is_some());
            for t in f.x.split_whitespace() {
                assert!(w.vocab.id(t).is_some());
            }
        }
        assert_eq!(counts["located-in"], 500);
        assert_eq!(counts["speaks"], 120);
        assert_eq!(counts["plays-instrument"], 333);
        assert!(w.entities.iter().any(|e| e.split_whitespace().count() > 1));
        assert!(w.entities.iter().all(|e| (1..=3).contains(&e.split_whitespace().count())));
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(generate_world(5, &[], 0).is_err());
        assert!(generate_world(5, &one_relation(1, &[], &["[X] [Y]", "[Y] [X]"]), 0).is_err());
        assert!(generate_world(5, &one_relation(1, &["a"], &["[X] [Y]"]), 0).is_err());
        assert!(generate_world(5, &one_relation(1, &["a"], &["[X] [Y] [X]", "[Y] [X]"]), 0).is_err());
        assert!(generate_world(5, &one_relation(6, &["a"], &["[X] [Y]", "[Y] [X]"]), 0).is_err());
    }

    #[test]
    fn corpus_counts_without_distractors() {
        let w = generate_world(10, &one_relation(10, &["a", "b"], &["[X] is [Y] .", "[Y] has [X] ."]), 2).unwrap();
        let mut w1 = w.clone();
        w1.relations[0].surface_templates.truncate(1);
        let c = generate_corpus(
            &w1,
            &CorpusOptions {
                repetitions_per_fact: 1,
                distractor_rate: 0.0,
                seed: 1,
            },
            &[],
        )
        .unwrap();
        assert_eq!(c.len(), 10);
        assert!(c.iter().all(|s| s.fact_token_index.is_some()));
    }

    #[test]
    fn corpus_closure_and_ground_truth() {
        let w = generate_world(60, &default_relations(40), 4).unwrap();
        let c = generate_corpus(&w, &CorpusOptions::default(), &[]).unwrap();
        for s in &c {
            for t in &s.tokens {
                assert!(w.vocab.id(t).is_some(), "{t}");
            }
            if let (Some(fi), Some(rel), Some((a, b))) = (s.fact_token_index, &s.relation, s.x_span) {
                let x = s.tokens[a..b].join(" ");
                // memorized-table oracle yields exactly the masked token
                assert_eq!(w.facts.lookup(rel, &x), Some(s.tokens[fi].as_str()));
            } else {
                let ys: HashSet<&str> = w.relations.iter().flat_map(|r| r.y_domain.iter().map(String::as_str)).collect();
                assert!(s.tokens.iter().all(|t| !ys.contains(t.as_str())));
            }
        }
        assert!(c.iter().any(|s| s.fact_token_index.is_none()));
    }

    #[test]
    fn repetitions_met_and_exclusion_respected() {
        let w = generate_world(30, &default_relations(20), 5).unwrap();
        let excluded = vec![w.facts.facts()[0].clone(), w.facts.facts()[25].clone()];
        let opts = CorpusOptions {
            repetitions_per_fact: 3,
            distractor_rate: 0.5,
            seed: 8,
        };
        let c = generate_corpus(&w, &opts, &excluded).unwrap();
        let mut per_fact: BTreeMap<(String, String), usize> = BTreeMap::new();
        for s in &c {
            if let (Some(rel), Some((a, b))) = (&s.relation, s.x_span) {
                *per_fact.entry((rel.clone(), s.tokens[a..b].join(" "))).or_default() += 1;
            }
        }
        for f in w.facts.facts() {
            let n = per_fact.get(&(f.relation.clone(), f.x.clone())).copied().unwrap_or(0);
            if excluded.contains(f) {
                assert_eq!(n, 0);
            } else {
                assert!(n >= 3);
            }
        }
    }

    #[test]
    fn template_usage_is_uniform() {
        let w = generate_world(1000, &one_relation(1000, &["a", "b"], &["[X] is [Y] .", "[Y] has [X] .", "so [X] got [Y] ."]), 6).unwrap();
        let c = generate_corpus(
            &w,
            &CorpusOptions {
                repetitions_per_fact: 10,
                distractor_rate: 0.0,
                seed: 3,
            },
            &[],
        )
        .unwrap();
        assert_eq!(c.len(), 10_000);
        let mut counts = [0usize; 3];
        for s in &c {
            let k = if s.tokens.contains(&"got".to_string()) {
                2
            } else if s.tokens.contains(&"has".to_string()) {
                1
            } else {
                0
            };
            counts[k] += 1;
        }
        for n in counts {
            let frac = n as f64 / 10_000.0;
            assert!((frac - 1.0 / 3.0).abs() <= 0.05 / 3.0, "{counts:?}");
        }
    }

    #[test]
    fn corpus_text_round_trip() {
        let w = generate_world(40, &default_relations(30), 7).unwrap();
        let c = generate_corpus(&w, &CorpusOptions::default(), &[]).unwrap();
        let back = corpus_from_text(&corpus_to_text(&c), &w).unwrap();
        assert_eq!(back.len(), c.len());
        for (a, b) in c.iter().zip(&back) {
            assert_eq!(a.tokens, b.tokens);
            assert_eq!(a.fact_token_index, b.fact_token_index);
        }
    }

    #[test]
    fn prompt_sources_are_well_formed() {
        let w = generate_world(20, &default_relations(10), 2).unwrap();
        let p = prompt_sources(&w, 1);
        for (rel, sources) in &p.by_relation {
            assert!(w.relation(rel).is_some());
            assert_eq!(sources["single"].len(), 1);
            assert!(sources["mined"].len() >= 3);
            for pat in sources.values().flatten() {
                assert!(parse_template(pat).is_ok(), "{pat}");
                for t in pat.split_whitespace() {
                    assert!(t == X_MARK || t == Y_MARK || w.vocab.id(t).is_some(), "{t}");
                }
            }
        }
    }

    #[test]
    fn world_files_round_trip() {
        let w = generate_world(60, &default_relations(40), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_world(&w, dir.path(), "# seed=5\n").unwrap();
        let back = load_world(dir.path()).unwrap();
        assert_eq!(back, w);
        let facts = FactTable::from_tsv(&std::fs::read_to_string(dir.path().join(FACTS_FILE)).unwrap()).unwrap();
        assert_eq!(facts, w.facts);
        assert!(FactTable::from_tsv("r\ta\tb\nr\ta\tc\n").is_err());
        assert!(matches!(FactTable::from_tsv("r\ta\n"), Err(Error::Format { line: Some(1), .. })));
    }
}
