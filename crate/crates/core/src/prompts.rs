//! Hard (token) prompts, soft (vector) prompts, prompt files and the four
//! initialization regimes: from a hard prompt, random with a donor's shape,
//! and per-example prompts aggregated by frequency.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::lm::{EmbeddingSequence, LayerPerturbations, LmConfig, MaskedLm, Origin};
use crate::vocab::{Vocabulary, MASK_ID};
use crate::world::{X_MARK, Y_MARK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PromptSource {
    Single,
    Mined,
    Paraphrase,
    PerExample,
}

impl PromptSource {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptSource::Single => "single",
            PromptSource::Mined => "mined",
            PromptSource::Paraphrase => "paraphrase",
            PromptSource::PerExample => "per-example",
        }
    }
}

impl fmt::Display for PromptSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Self::Single),
            "mined" => Ok(Self::Mined),
            "paraphrase" => Ok(Self::Paraphrase),
            "per-example" | "per_example" => Ok(Self::PerExample),
            other => Err(Error::input(format!("unknown prompt source {other:?}"))),
        }
    }
}

/// A token pattern with exactly one `[X]` and one `[Y]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct HardPrompt {
    pub pattern: Vec<String>,
    pub source: PromptSource,
}

impl HardPrompt {
    pub fn x_index(&self) -> usize {
        self.pattern.iter().position(|t| t == X_MARK).expect("validated")
    }

    pub fn y_index(&self) -> usize {
        self.pattern.iter().position(|t| t == Y_MARK).expect("validated")
    }

    /// Tokens other than the two blanks, in order.
    pub fn ordinary_tokens(&self) -> impl Iterator<Item = &str> {
        self.pattern
            .iter()
            .filter(|t| *t != X_MARK && *t != Y_MARK)
            .map(String::as_str)
    }

    pub fn render(&self) -> String {
        self.pattern.join(" ")
    }
}

/// Parses a whitespace-tokenized pattern. Blank-marker problems are format
/// errors; unknown ordinary tokens are input errors.
pub fn parse_hard_prompt(text: &str, vocab: &Vocabulary, source: PromptSource) -> Result<HardPrompt> {
    let pattern: Vec<String> = text.split_whitespace().map(str::to_string).collect();
    let nx = pattern.iter().filter(|t| *t == X_MARK).count();
    let ny = pattern.iter().filter(|t| *t == Y_MARK).count();
    if nx != 1 || ny != 1 {
        return Err(Error::format(format!(
            "prompt {text:?} must contain exactly one {X_MARK} and one {Y_MARK} (found {nx} and {ny})"
        )));
    }
    for t in &pattern {
        if t != X_MARK && t != Y_MARK && vocab.id(t).is_none() {
            return Err(Error::input(format!("prompt token {t:?} is not in the vocabulary")));
        }
    }
    Ok(HardPrompt { pattern, source })
}

/// Parses a prompt file: one pattern per line, `#` comments and blank lines
/// skipped, repeated patterns collapsed to their first occurrence.
pub fn parse_prompt_file(text: &str, vocab: &Vocabulary, source: PromptSource) -> Result<Vec<HardPrompt>> {
    let mut out: Vec<HardPrompt> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let p = parse_hard_prompt(line, vocab, source).map_err(|e| match e {
            Error::Format { message, .. } => Error::format_at(None, i + 1, message),
            other => other,
        })?;
        if out.iter().any(|q| q.pattern == p.pattern) {
            log::warn!("line {}: duplicate prompt {:?} ignored", i + 1, p.render());
            continue;
        }
        out.push(p);
    }
    Ok(out)
}

pub fn load_prompt_file(path: &Path, vocab: &Vocabulary, source: PromptSource) -> Result<Vec<HardPrompt>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_prompt_file(&text, vocab, source).map_err(|e| e.with_path(path))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub relation: String,
    pub source: PromptSource,
    pub path: PathBuf,
}

/// `relation<TAB>source<TAB>path` lines; relative paths resolve against the
/// manifest's directory.
pub fn load_prompt_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::format_at(Some(path), i + 1, "expected relation<TAB>source<TAB>path"));
        }
        let source = fields[1]
            .parse()
            .map_err(|_| Error::format_at(Some(path), i + 1, format!("unknown source {:?}", fields[1])))?;
        out.push(ManifestEntry {
            relation: fields[0].to_string(),
            source,
            path: base.join(fields[2]),
        });
    }
    Ok(out)
}

/// Per-example prompts that occur strictly more than `min_count` times, most
/// frequent first (ties keep first-seen order).
pub fn aggregate_example_prompts(examples: &[(HardPrompt, String, String)], min_count: usize) -> Vec<HardPrompt> {
    let mut counts: HashMap<&[String], (usize, usize)> = HashMap::new();
    for (i, (p, _, _)) in examples.iter().enumerate() {
        counts.entry(&p.pattern).or_insert((0, i)).0 += 1;
    }
    let mut kept: Vec<(usize, usize)> = counts
        .values()
        .filter(|(c, _)| *c > min_count)
        .copied()
        .collect();
    kept.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    kept.into_iter()
        .map(|(_, i)| HardPrompt {
            pattern: examples[i].0.pattern.clone(),
            source: PromptSource::PerExample,
        })
        .collect()
}

/// One element of a soft prompt's layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Piece {
    Slot(usize),
    X,
    Y,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    Hard(HardPrompt),
    /// Random vectors shaped like the donor prompt.
    Random { donor: HardPrompt },
}

impl Provenance {
    pub fn describe(&self) -> String {
        match self {
            Provenance::Hard(h) => format!("{}:{}", h.source, h.render()),
            Provenance::Random { donor } => format!("random:{}", donor.render()),
        }
    }

    pub fn hard(&self) -> Option<&HardPrompt> {
        match self {
            Provenance::Hard(h) => Some(h),
            Provenance::Random { .. } => None,
        }
    }
}

/// Tunable vectors `v_1..v_n` with fixed x/y insertion points and a
/// deep-perturbation tensor. The layout never changes after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftPrompt {
    layout: Vec<Piece>,
    d: usize,
    /// Row-major `n × d`.
    pub slots: Vec<f64>,
    pub deep: LayerPerturbations,
    pub provenance: Provenance,
}

fn layout_of(hard: &HardPrompt) -> Vec<Piece> {
    let mut next = 0;
    hard.pattern
        .iter()
        .map(|t| {
            if t == X_MARK {
                Piece::X
            } else if t == Y_MARK {
                Piece::Y
            } else {
                next += 1;
                Piece::Slot(next - 1)
            }
        })
        .collect()
}

impl SoftPrompt {
    /// Assembles a prompt from stored parts (used when loading checkpoints).
    pub fn from_parts(
        layout: Vec<Piece>,
        d: usize,
        slots: Vec<f64>,
        deep: LayerPerturbations,
        provenance: Provenance,
    ) -> Result<Self> {
        let n = layout.iter().filter(|p| matches!(p, Piece::Slot(_))).count();
        let nx = layout.iter().filter(|p| **p == Piece::X).count();
        let ny = layout.iter().filter(|p| **p == Piece::Y).count();
        let ordered = layout
            .iter()
            .filter_map(|p| match p {
                Piece::Slot(i) => Some(*i),
                _ => None,
            })
            .eq(0..n);
        if nx != 1 || ny != 1 || !ordered {
            return Err(Error::format("soft prompt layout must hold slots 0..n in order plus one X and one Y"));
        }
        if slots.len() != n * d || deep.slots != n || deep.d != d {
            return Err(Error::format("soft prompt tensors do not match its layout"));
        }
        Ok(Self {
            layout,
            d,
            slots,
            deep,
            provenance,
        })
    }

    pub fn layout(&self) -> &[Piece] {
        &self.layout
    }

    pub fn slot_count(&self) -> usize {
        self.slots.len() / self.d
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Index of the x blank within the layout.
    pub fn x_blank_slot(&self) -> usize {
        self.layout.iter().position(|p| *p == Piece::X).expect("validated")
    }

    pub fn y_blank_slot(&self) -> usize {
        self.layout.iter().position(|p| *p == Piece::Y).expect("validated")
    }

    pub fn slot(&self, i: usize) -> &[f64] {
        &self.slots[i * self.d..(i + 1) * self.d]
    }

    /// Layer-0 tunable numbers (`n · d`).
    pub fn tunable_len(&self) -> usize {
        self.slots.len()
    }

    fn assemble(&self, x_ids: &[usize], lm: &MaskedLm, mask_x: bool) -> Result<EmbeddingSequence> {
        if x_ids.is_empty() {
            return Err(Error::input("x must have at least one token"));
        }
        if lm.d() != self.d {
            return Err(Error::input("prompt dimension differs from the LM"));
        }
        let len = self.slot_count() + x_ids.len() + 1;
        if len > lm.config.max_len {
            return Err(Error::input(format!(
                "instantiated prompt length {len} exceeds max_len {}",
                lm.config.max_len
            )));
        }
        if let Some(&bad) = x_ids.iter().find(|&&i| i >= lm.vocab_size()) {
            return Err(Error::input(format!("x token id {bad} out of range")));
        }
        let mut vectors = Vec::with_capacity(len * self.d);
        let mut origin = Vec::with_capacity(len);
        let mut blank_y = None;
        for piece in &self.layout {
            match *piece {
                Piece::Slot(i) => {
                    vectors.extend_from_slice(self.slot(i));
                    origin.push(Origin::Slot(i));
                }
                Piece::X => {
                    for (j, &id) in x_ids.iter().enumerate() {
                        let id = if mask_x { MASK_ID } else { id };
                        vectors.extend_from_slice(lm.embedding(id));
                        origin.push(Origin::X(j));
                    }
                }
                Piece::Y => {
                    blank_y = Some(origin.len());
                    vectors.extend_from_slice(lm.embedding(MASK_ID));
                    origin.push(Origin::YMask);
                }
            }
        }
        Ok(EmbeddingSequence {
            vectors,
            d: self.d,
            blank_y,
            origin,
        })
    }

    /// Splices the embeddings of `x_ids` at the x blank and the MASK embedding at
    /// the y blank.
    pub fn instantiate(&self, x_ids: &[usize], lm: &MaskedLm) -> Result<EmbeddingSequence> {
        self.assemble(x_ids, lm, false)
    }

    /// Like [`SoftPrompt::instantiate`] but with every x position masked too.
    pub fn instantiate_x_masked(&self, x_ids: &[usize], lm: &MaskedLm) -> Result<EmbeddingSequence> {
        self.assemble(x_ids, lm, true)
    }
}

/// Slot vectors copied from the embedding rows of the hard prompt's tokens;
/// perturbations start at zero.
pub fn init_soft_from_hard(hard: &HardPrompt, lm: &MaskedLm, vocab: &Vocabulary) -> Result<SoftPrompt> {
    let mut slots = Vec::new();
    for t in hard.ordinary_tokens() {
        let id = vocab
            .id(t)
            .ok_or_else(|| Error::input(format!("prompt token {t:?} is not in the vocabulary")))?;
        slots.extend_from_slice(lm.embedding(id));
    }
    let layout = layout_of(hard);
    let n = slots.len() / lm.d();
    Ok(SoftPrompt {
        layout,
        d: lm.d(),
        slots,
        deep: LayerPerturbations::zeros(&lm.config, n),
        provenance: Provenance::Hard(hard.clone()),
    })
}

/// Slot vectors drawn independently per dimension from `N(mean_j, std_j²)`,
/// with the donor's slot count and blank positions.
pub fn init_soft_random(donor: &HardPrompt, gaussian: (&[f64], &[f64]), cfg: &LmConfig, seed: u64) -> Result<SoftPrompt> {
    let (mean, std) = gaussian;
    if mean.len() != cfg.d || std.len() != cfg.d {
        return Err(Error::input("Gaussian dimension differs from the LM"));
    }
    if std.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
        return Err(Error::input("Gaussian standard deviations must be finite and non-negative"));
    }
    let layout = layout_of(donor);
    let n = donor.ordinary_tokens().count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dists: Vec<Normal<f64>> = mean
        .iter()
        .zip(std)
        .map(|(&m, &s)| Normal::new(m, s).expect("checked std"))
        .collect();
    let mut slots = Vec::with_capacity(n * cfg.d);
    for _ in 0..n {
        for dist in &dists {
            slots.push(dist.sample(&mut rng));
        }
    }
    Ok(SoftPrompt {
        layout,
        d: cfg.d,
        slots,
        deep: LayerPerturbations::zeros(cfg, n),
        provenance: Provenance::Random { donor: donor.clone() },
    })
}

/// The prompt set `T_r` for one relation.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    pub relation: String,
    pub prompts: Vec<SoftPrompt>,
}

impl PromptSet {
    pub fn new(relation: impl Into<String>, prompts: Vec<SoftPrompt>) -> Result<Self> {
        if prompts.is_empty() {
            return Err(Error::input("a prompt set needs at least one prompt"));
        }
        Ok(Self {
            relation: relation.into(),
            prompts,
        })
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }
}
