//! Run configuration: one TOML file per run, overridable by flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use softmix::datasets::{Part, SplitRegime};
use softmix::lm::PretrainConfig;
use softmix::mixture::OptimizerKind;
use softmix::optim::AdamConfig;
use softmix::{LmConfig, TrainConfig, TuneMode, WeightingMode};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Output root; not part of the checksum.
    pub out: PathBuf,
    pub paths: Paths,
    pub world: WorldSection,
    pub lm: LmSection,
    pub pretrain: PretrainSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub compare: CompareSection,
}

/// Input locations. Unset entries default to the layout under `out`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub world: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub lm: Option<PathBuf>,
    pub prompts: Option<PathBuf>,
    pub splits: Option<PathBuf>,
    pub runs: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSection {
    pub entities: usize,
    pub facts_per_relation: usize,
    pub repetitions: usize,
    pub distractor_rate: f64,
}

impl Default for WorldSection {
    fn default() -> Self {
        Self {
            entities: 500,
            facts_per_relation: 400,
            repetitions: 6,
            distractor_rate: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmSection {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub tie_output: bool,
    pub init_std: f64,
}

impl Default for LmSection {
    fn default() -> Self {
        let c = LmConfig::default();
        Self {
            d: c.d,
            layers: c.layers,
            heads: c.heads,
            ffn_dim: c.ffn_dim,
            max_len: c.max_len,
            tie_output: c.tie_output,
            init_std: c.init_std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub held_out_fraction: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let c = PretrainConfig::default();
        Self {
            epochs: 15,
            batch_size: c.batch_size,
            lr: c.adam.lr,
            clip_norm: c.clip_norm,
            held_out_fraction: c.held_out_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// `random` or `distinct_y`.
    pub regime: String,
    /// Relations to train and evaluate; empty means all.
    pub relations: Vec<String>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            regime: "random".into(),
            relations: vec![],
        }
    }
}

/// A single mode or a list; a list expands into one run per entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany {
    One(String),
    Many(Vec<String>),
}

impl OneOrMany {
    pub fn items(&self) -> Vec<String> {
        match self {
            OneOrMany::One(s) => vec![s.clone()],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// `single`, `mined`, `paraphrase`, `per-example` or `random`.
    pub init: String,
    /// `static` or `data_dependent`.
    pub weighting: String,
    /// `untuned`, `weights_only`, `vectors_only`, `both`, `deep_all_layers`.
    pub tune_mode: OneOrMany,
    /// `adam` or `em`.
    pub optimizer: String,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Per-example patterns must occur more often than this to be kept.
    pub per_example_min_count: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            init: "mined".into(),
            weighting: "static".into(),
            tune_mode: OneOrMany::One("both".into()),
            optimizer: "adam".into(),
            batch_size: t.batch_size,
            patience: t.patience,
            max_epochs: t.max_epochs,
            lr: 1e-2,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            eps: t.adam.eps,
            per_example_min_count: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub part: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { part: "test".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSection {
    pub alpha: f64,
    /// Sampled permutation draws when the example count is above 20.
    pub resamples: usize,
}

impl Default for CompareSection {
    fn default() -> Self {
        Self {
            alpha: 0.02,
            resamples: 10_000,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out: PathBuf::from("out"),
            paths: Paths::default(),
            world: WorldSection::default(),
            lm: LmSection::default(),
            pretrain: PretrainSection::default(),
            data: DataSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            compare: CompareSection::default(),
        }
    }
}

/// Tune modes of a train invocation; `None` is the untuned initialization.
pub type TuneSpec = Option<TuneMode>;

pub fn tune_spec_name(t: TuneSpec) -> &'static str {
    t.map_or("untuned", TuneMode::as_str)
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))
    }

    /// SHA-256 of the experiment parameters. Paths are excluded so that the
    /// same experiment written to two places yields identical files.
    pub fn checksum(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        c.paths = Paths::default();
        let text = toml::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// The `# seed=... config_sha256=...` line embedded in every output.
    pub fn header(&self) -> String {
        format!("# seed={} config_sha256={}\n", self.seed, self.checksum())
    }

    pub fn comments(&self) -> Vec<String> {
        vec![format!("seed={} config_sha256={}", self.seed, self.checksum())]
    }

    pub fn world_dir(&self) -> PathBuf {
        self.paths.world.clone().unwrap_or_else(|| self.out.join("world"))
    }

    pub fn corpus_path(&self) -> PathBuf {
        self.paths.corpus.clone().unwrap_or_else(|| self.world_dir().join("corpus.txt"))
    }

    pub fn prompts_manifest(&self) -> PathBuf {
        self.paths
            .prompts
            .clone()
            .unwrap_or_else(|| self.world_dir().join("prompts").join("manifest.tsv"))
    }

    pub fn lm_dir(&self) -> PathBuf {
        self.paths.lm.clone().unwrap_or_else(|| self.out.join("lm"))
    }

    pub fn splits_path(&self) -> PathBuf {
        self.paths.splits.clone().unwrap_or_else(|| self.out.join("splits.tsv"))
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.paths.runs.clone().unwrap_or_else(|| self.out.join("runs"))
    }

    pub fn lm_config(&self, vocab_size: usize) -> LmConfig {
        LmConfig {
            d: self.lm.d,
            layers: self.lm.layers,
            heads: self.lm.heads,
            ffn_dim: self.lm.ffn_dim,
            vocab_size,
            max_len: self.lm.max_len,
            seed: self.seed,
            tie_output: self.lm.tie_output,
            init_std: self.lm.init_std,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let p = &self.pretrain;
        PretrainConfig {
            epochs: p.epochs,
            batch_size: p.batch_size,
            adam: AdamConfig {
                lr: p.lr,
                ..AdamConfig::default()
            },
            clip_norm: p.clip_norm,
            held_out_fraction: p.held_out_fraction,
            seed: self.seed,
        }
    }

    pub fn regime(&self) -> Result<SplitRegime, CliError> {
        self.data
            .regime
            .parse()
            .map_err(|_| CliError::Usage(format!("unknown split regime {:?}", self.data.regime)))
    }

    pub fn part(&self) -> Result<Part, CliError> {
        self.eval
            .part
            .parse()
            .map_err(|_| CliError::Usage(format!("unknown split part {:?} (train, dev or test)", self.eval.part)))
    }

    pub fn weighting(&self) -> Result<WeightingMode, CliError> {
        match self.train.weighting.as_str() {
            "static" => Ok(WeightingMode::Static),
            "data_dependent" => Ok(WeightingMode::DataDependent),
            other => Err(CliError::Usage(format!("unknown weighting {other:?}"))),
        }
    }

    pub fn tune_specs(&self) -> Result<Vec<TuneSpec>, CliError> {
        let items = self.train.tune_mode.items();
        if items.is_empty() {
            return Err(CliError::Usage("tune_mode list is empty".into()));
        }
        items
            .iter()
            .map(|s| match s.as_str() {
                "untuned" => Ok(None),
                m => m
                    .parse()
                    .map(Some)
                    .map_err(|_| CliError::Usage(format!("unknown tune mode {m:?}"))),
            })
            .collect()
    }

    pub fn train_config(&self, mode: TuneMode) -> Result<TrainConfig, CliError> {
        let t = &self.train;
        let optimizer = match t.optimizer.as_str() {
            "adam" => OptimizerKind::Adam,
            "em" => OptimizerKind::Em,
            other => return Err(CliError::Usage(format!("unknown optimizer {other:?}"))),
        };
        let cfg = TrainConfig {
            batch_size: t.batch_size,
            patience: t.patience,
            max_epochs: t.max_epochs,
            optimizer,
            tune_mode: mode,
            seed: self.seed,
            adam: AdamConfig {
                lr: t.lr,
                beta1: t.beta1,
                beta2: t.beta2,
                eps: t.eps,
            },
        };
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }

    /// Directory name of the run for `spec`.
    pub fn run_name(&self, spec: TuneSpec) -> String {
        let mut name = format!("{}-{}", self.train.init, tune_spec_name(spec));
        if self.train.weighting != "static" {
            name.push_str("-dd");
        }
        if self.train.optimizer != "adam" {
            name.push('-');
            name.push_str(&self.train.optimizer);
        }
        name
    }
}
