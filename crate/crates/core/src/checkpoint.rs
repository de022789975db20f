//! On-disk checkpoints: a text manifest (`key = value` lines plus one
//! `tensor <name> <shape> <byte offset>` line per tensor) next to a single blob
//! of little-endian `f32` values. The manifest records the blob's SHA-256,
//! which is verified on load together with every tensor shape.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lm::{LayerPerturbations, LmConfig, MaskedLm, Weights};
use crate::mixture::{MixtureModel, OptimizerKind, TrainConfig, TuneMode, WeightingMode};
use crate::optim::AdamConfig;
use crate::prompts::{HardPrompt, Piece, PromptSet, PromptSource, Provenance, SoftPrompt};

pub const MANIFEST: &str = "manifest.txt";
pub const BLOB: &str = "tensors.bin";
const LM_FORMAT: &str = "softmix-lm/1";
const MIXTURE_FORMAT: &str = "softmix-mixture/1";

struct Manifest {
    keys: BTreeMap<String, String>,
    tensors: Vec<(String, Vec<usize>, usize)>,
}

impl Manifest {
    fn get(&self, key: &str) -> Result<&str> {
        self.keys
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::format(format!("checkpoint manifest lacks {key:?}")))
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key)?;
        v.parse().map_err(|_| Error::format(format!("bad value {v:?} for {key:?}")))
    }
}

fn parse_manifest(text: &str) -> Result<Manifest> {
    let mut keys = BTreeMap::new();
    let mut tensors = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix("tensor ") {
            let f: Vec<&str> = rest.split(' ').collect();
            if f.len() != 3 {
                return Err(Error::format_at(None, line_no, "tensor line needs name, shape and offset"));
            }
            let shape = if f[1] == "-" {
                vec![0]
            } else {
                f[1].split('x')
                    .map(|s| s.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| Error::format_at(None, line_no, format!("bad shape {:?}", f[1])))?
            };
            let offset = f[2]
                .parse()
                .map_err(|_| Error::format_at(None, line_no, format!("bad offset {:?}", f[2])))?;
            tensors.push((f[0].to_string(), shape, offset));
        } else if let Some((k, v)) = line.split_once(" = ") {
            keys.insert(k.trim().to_string(), v.to_string());
        } else {
            return Err(Error::format_at(None, line_no, format!("unrecognized manifest line {line:?}")));
        }
    }
    Ok(Manifest { keys, tensors })
}

struct Writer {
    text: String,
    blob: Vec<u8>,
}

impl Writer {
    fn new(format: &str, comments: &[String]) -> Self {
        let mut text = String::new();
        for c in comments {
            let _ = writeln!(text, "# {c}");
        }
        let _ = writeln!(text, "format = {format}");
        Self { text, blob: Vec::new() }
    }

    fn key(&mut self, k: &str, v: impl std::fmt::Display) {
        let _ = writeln!(self.text, "{k} = {v}");
    }

    fn tensor(&mut self, name: &str, shape: &[usize], data: &[f64]) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let shape_s = if data.is_empty() {
            "-".to_string()
        } else {
            shape.iter().map(|s| s.to_string()).collect::<Vec<_>>().join("x")
        };
        let _ = writeln!(self.text, "tensor {name} {shape_s} {}", self.blob.len());
        for &x in data {
            self.blob.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }

    fn finish(mut self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let sha = hex::encode(Sha256::digest(&self.blob));
        let _ = writeln!(self.text, "blob = {BLOB}");
        let _ = writeln!(self.text, "blob_sha256 = {sha}");
        let blob_path = dir.join(BLOB);
        std::fs::write(&blob_path, &self.blob).map_err(|e| Error::io(&blob_path, e))?;
        let m = dir.join(MANIFEST);
        std::fs::write(&m, self.text).map_err(|e| Error::io(&m, e))
    }
}

struct Reader {
    manifest: Manifest,
    blob: Vec<u8>,
}

impl Reader {
    fn open(dir: &Path, format: &str) -> Result<Self> {
        let m = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&m).map_err(|e| Error::io(&m, e))?;
        let manifest = parse_manifest(&text).map_err(|e| e.with_path(&m))?;
        let found = manifest.get("format").map_err(|e| e.with_path(&m))?;
        if found != format {
            return Err(Error::format(format!("expected a {format} checkpoint, found {found}")).with_path(&m));
        }
        let blob_path = dir.join(manifest.get("blob")?);
        let blob = std::fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        let sha = hex::encode(Sha256::digest(&blob));
        if sha != manifest.get("blob_sha256")? {
            return Err(Error::format("tensor blob checksum does not match the manifest").with_path(&blob_path));
        }
        Ok(Self { manifest, blob })
    }

    fn tensor(&self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        let (_, found, offset) = self
            .manifest
            .tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .ok_or_else(|| Error::format(format!("checkpoint lacks tensor {name:?}")))?;
        let len: usize = shape.iter().product();
        if found.iter().product::<usize>() != len || (len > 0 && found.as_slice() != shape) {
            return Err(Error::format(format!("tensor {name:?} has shape {found:?}, expected {shape:?}")));
        }
        let end = offset + 4 * len;
        if end > self.blob.len() {
            return Err(Error::format(format!("tensor {name:?} runs past the end of the blob")));
        }
        Ok(self.blob[*offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect())
    }
}

fn write_lm_config(w: &mut Writer, prefix: &str, c: &LmConfig) {
    w.key(&format!("{prefix}d"), c.d);
    w.key(&format!("{prefix}layers"), c.layers);
    w.key(&format!("{prefix}heads"), c.heads);
    w.key(&format!("{prefix}ffn_dim"), c.ffn_dim);
    w.key(&format!("{prefix}vocab_size"), c.vocab_size);
    w.key(&format!("{prefix}max_len"), c.max_len);
    w.key(&format!("{prefix}seed"), c.seed);
    w.key(&format!("{prefix}tie_output"), c.tie_output);
    w.key(&format!("{prefix}init_std"), c.init_std);
}

fn read_lm_config(m: &Manifest, prefix: &str) -> Result<LmConfig> {
    let p = |k: &str| format!("{prefix}{k}");
    Ok(LmConfig {
        d: m.parse(&p("d"))?,
        layers: m.parse(&p("layers"))?,
        heads: m.parse(&p("heads"))?,
        ffn_dim: m.parse(&p("ffn_dim"))?,
        vocab_size: m.parse(&p("vocab_size"))?,
        max_len: m.parse(&p("max_len"))?,
        seed: m.parse(&p("seed"))?,
        tie_output: m.parse(&p("tie_output"))?,
        init_std: m.parse(&p("init_std"))?,
    })
}

/// Writes `dir/manifest.txt` and `dir/tensors.bin`. `comments` become `#`
/// lines at the top of the manifest.
pub fn save_lm(lm: &MaskedLm, dir: &Path, comments: &[String]) -> Result<()> {
    let mut w = Writer::new(LM_FORMAT, comments);
    write_lm_config(&mut w, "config.", &lm.config);
    for (spec, t) in Weights::specs(&lm.config).iter().zip(lm.weights.tensors()) {
        w.tensor(&spec.name, &spec.shape, t);
    }
    w.finish(dir)
}

pub fn load_lm(dir: &Path) -> Result<MaskedLm> {
    let r = Reader::open(dir, LM_FORMAT)?;
    let config = read_lm_config(&r.manifest, "config.")?;
    config.validate().map_err(|e| Error::format(e.to_string()))?;
    let mut weights = Weights::zeros(&config);
    for (spec, t) in Weights::specs(&config).iter().zip(weights.tensors_mut()) {
        *t = r.tensor(&spec.name, &spec.shape)?;
    }
    MaskedLm::from_weights(config, weights)
}

fn layout_to_string(layout: &[Piece]) -> String {
    layout
        .iter()
        .map(|p| match p {
            Piece::X => "X",
            Piece::Y => "Y",
            Piece::Slot(_) => "S",
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn layout_from_string(s: &str) -> Result<Vec<Piece>> {
    let mut next = 0;
    s.split(' ')
        .map(|t| match t {
            "X" => Ok(Piece::X),
            "Y" => Ok(Piece::Y),
            "S" => {
                next += 1;
                Ok(Piece::Slot(next - 1))
            }
            other => Err(Error::format(format!("bad layout piece {other:?}"))),
        })
        .collect()
}

fn provenance_to_string(p: &Provenance) -> String {
    match p {
        Provenance::Hard(h) => format!("hard {} {}", h.source, h.render()),
        Provenance::Random { donor } => format!("random {} {}", donor.source, donor.render()),
    }
}

fn provenance_from_string(s: &str) -> Result<Provenance> {
    let mut parts = s.splitn(3, ' ');
    let (kind, source, pattern) = match (parts.next(), parts.next(), parts.next()) {
        (Some(k), Some(src), Some(p)) => (k, src, p),
        _ => return Err(Error::format(format!("bad provenance {s:?}"))),
    };
    let hard = HardPrompt {
        pattern: pattern.split(' ').map(str::to_string).collect(),
        source: PromptSource::from_str(source).map_err(|e| Error::format(e.to_string()))?,
    };
    match kind {
        "hard" => Ok(Provenance::Hard(hard)),
        "random" => Ok(Provenance::Random { donor: hard }),
        other => Err(Error::format(format!("bad provenance kind {other:?}"))),
    }
}

fn optimizer_str(o: OptimizerKind) -> &'static str {
    match o {
        OptimizerKind::Adam => "adam",
        OptimizerKind::Em => "em",
    }
}

fn weighting_str(w: WeightingMode) -> &'static str {
    match w {
        WeightingMode::Static => "static",
        WeightingMode::DataDependent => "data_dependent",
    }
}

/// Saves a trained mixture and the configuration it was trained with.
/// Tensors are stored in 32 bits, like the LM.
pub fn save_mixture(model: &MixtureModel, config: &TrainConfig, dir: &Path, comments: &[String]) -> Result<()> {
    let mut w = Writer::new(MIXTURE_FORMAT, comments);
    let first = &model.prompt_set.prompts[0];
    w.key("relation", &model.prompt_set.relation);
    w.key("weighting", weighting_str(model.weighting));
    w.key("prompts", model.prompt_set.len());
    w.key("d", first.d());
    w.key("layers", first.deep.layers);
    w.key("train.batch_size", config.batch_size);
    w.key("train.patience", config.patience);
    w.key("train.max_epochs", config.max_epochs);
    w.key("train.optimizer", optimizer_str(config.optimizer));
    w.key("train.tune_mode", config.tune_mode);
    w.key("train.seed", config.seed);
    w.key("train.lr", config.adam.lr);
    w.key("train.beta1", config.adam.beta1);
    w.key("train.beta2", config.adam.beta2);
    w.key("train.eps", config.adam.eps);
    for (t, p) in model.prompt_set.prompts.iter().enumerate() {
        w.key(&format!("prompt{t}.layout"), layout_to_string(p.layout()));
        w.key(&format!("prompt{t}.provenance"), provenance_to_string(&p.provenance));
    }
    w.tensor("mixture_logits", &[model.len()], &model.mixture_logits);
    w.tensor("log_temperature", &[1], &[model.log_temperature]);
    for (t, p) in model.prompt_set.prompts.iter().enumerate() {
        let n = p.slot_count();
        w.tensor(&format!("prompt{t}.slots"), &[n, p.d()], &p.slots);
        w.tensor(&format!("prompt{t}.deltas"), &[p.deep.layers + 1, n, p.d()], &p.deep.deltas);
    }
    w.finish(dir)
}

pub fn load_mixture(dir: &Path) -> Result<(MixtureModel, TrainConfig)> {
    let r = Reader::open(dir, MIXTURE_FORMAT)?;
    let m = &r.manifest;
    let weighting = match m.get("weighting")? {
        "static" => WeightingMode::Static,
        "data_dependent" => WeightingMode::DataDependent,
        other => return Err(Error::format(format!("bad weighting {other:?}"))),
    };
    let optimizer = match m.get("train.optimizer")? {
        "adam" => OptimizerKind::Adam,
        "em" => OptimizerKind::Em,
        other => return Err(Error::format(format!("bad optimizer {other:?}"))),
    };
    let config = TrainConfig {
        batch_size: m.parse("train.batch_size")?,
        patience: m.parse("train.patience")?,
        max_epochs: m.parse("train.max_epochs")?,
        optimizer,
        tune_mode: TuneMode::from_str(m.get("train.tune_mode")?).map_err(|e| Error::format(e.to_string()))?,
        seed: m.parse("train.seed")?,
        adam: AdamConfig {
            lr: m.parse("train.lr")?,
            beta1: m.parse("train.beta1")?,
            beta2: m.parse("train.beta2")?,
            eps: m.parse("train.eps")?,
        },
    };
    let count: usize = m.parse("prompts")?;
    let d: usize = m.parse("d")?;
    let layers: usize = m.parse("layers")?;
    let mut prompts = Vec::with_capacity(count);
    for t in 0..count {
        let layout = layout_from_string(m.get(&format!("prompt{t}.layout"))?)?;
        let n = layout.iter().filter(|p| matches!(p, Piece::Slot(_))).count();
        let slots = r.tensor(&format!("prompt{t}.slots"), &[n, d])?;
        let deltas = r.tensor(&format!("prompt{t}.deltas"), &[layers + 1, n, d])?;
        let deep = LayerPerturbations {
            layers,
            slots: n,
            d,
            deltas,
        };
        let provenance = provenance_from_string(m.get(&format!("prompt{t}.provenance"))?)?;
        prompts.push(SoftPrompt::from_parts(layout, d, slots, deep, provenance)?);
    }
    let set = PromptSet::new(m.get("relation")?, prompts).map_err(|e| Error::format(e.to_string()))?;
    let mut model = MixtureModel::new(set, weighting);
    model.mixture_logits = r.tensor("mixture_logits", &[count])?;
    model.log_temperature = r.tensor("log_temperature", &[1])?[0];
    Ok((model, config))
}
