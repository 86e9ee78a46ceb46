//! Experiment configuration: one TOML file with flat sections, overridable
//! by `PATHSTAR_SECTION_KEY` environment variables and then by CLI flags.
//! The fully resolved config is fingerprinted and echoed into every
//! manifest so no default is ever silent.

use std::path::PathBuf;

use pathstar::data::{DatasetSpec, Topology};
use pathstar::error::{Error, Result};
use pathstar::model::{ModelConfig, RecurrentConfig, TransformerConfig};
use pathstar::train::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub escalation: Option<EscalationSection>,
    /// Default output directory; `--out` wins over it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub d: usize,
    pub l: usize,
    pub n_labels: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl DatasetSection {
    pub fn spec(&self) -> Result<DatasetSpec> {
        Ok(DatasetSpec {
            topology: Topology::new(self.d, self.l, self.n_labels)?,
            n_train: self.n_train,
            n_test: self.n_test,
            seed: self.seed,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// "transformer" or "recurrent".
    pub arch: String,
    pub n_layers: usize,
    pub d_model: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_heads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mlp_expansion: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_seq_len: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_scale: Option<f64>,
}

impl ModelSection {
    /// Resolves against the dataset: vocabulary is the label count plus the
    /// four markers, and the default context is exactly the longest grid
    /// any pipeline stage feeds the model (full sequence minus one).
    pub fn resolve(&self, dataset: &DatasetSection) -> Result<ModelConfig> {
        let vocab_size = dataset.n_labels + 4;
        let seq_len = 3 * dataset.d * (dataset.l - 1) + 4 + dataset.l;
        let config = match self.arch.as_str() {
            "transformer" => ModelConfig::Transformer(TransformerConfig {
                n_layers: self.n_layers,
                d_model: self.d_model,
                n_heads: self.n_heads.ok_or_else(|| {
                    Error::Config("transformer needs model.n_heads".into())
                })?,
                mlp_expansion: self.mlp_expansion.unwrap_or(4),
                max_seq_len: self.max_seq_len.unwrap_or(seq_len - 1),
                vocab_size,
                init_scale: self.init_scale.unwrap_or(0.02),
            }),
            "recurrent" => {
                for (knob, set) in [
                    ("n_heads", self.n_heads.is_some()),
                    ("mlp_expansion", self.mlp_expansion.is_some()),
                    ("max_seq_len", self.max_seq_len.is_some()),
                    ("init_scale", self.init_scale.is_some()),
                ] {
                    if set {
                        return Err(Error::Config(format!(
                            "model.{knob} is not a recurrent-model knob"
                        )));
                    }
                }
                ModelConfig::Recurrent(RecurrentConfig {
                    n_layers: self.n_layers,
                    d_model: self.d_model,
                    vocab_size,
                })
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown arch '{other}' (expected transformer or recurrent)"
                )))
            }
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_n_eval")]
    pub n_eval: usize,
    #[serde(default = "default_eval_batch")]
    pub batch_size: usize,
    #[serde(default = "default_eval_seed")]
    pub seed: u64,
}

fn default_n_eval() -> usize {
    2000
}
fn default_eval_batch() -> usize {
    128
}
fn default_eval_seed() -> u64 {
    1
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            n_eval: default_n_eval(),
            batch_size: default_eval_batch(),
            seed: default_eval_seed(),
        }
    }
}

/// One-shot fallback dimensions applied when training ends below the
/// accuracy stop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EscalationSection {
    pub n_layers: usize,
    pub d_model: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_heads: Option<usize>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.spec()?;
        self.model.resolve(&self.dataset)?;
        self.train.validate()?;
        if self.eval.n_eval == 0 {
            return Err(Error::Config("eval.n_eval must be at least 1".into()));
        }
        if let Some(esc) = &self.escalation {
            self.escalated_model_section(esc).resolve(&self.dataset)?;
        }
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        self.model.resolve(&self.dataset)
    }

    fn escalated_model_section(&self, esc: &EscalationSection) -> ModelSection {
        ModelSection {
            n_layers: esc.n_layers,
            d_model: esc.d_model,
            n_heads: esc.n_heads.or(self.model.n_heads),
            ..self.model.clone()
        }
    }

    pub fn escalated_model_config(&self) -> Result<Option<ModelConfig>> {
        match &self.escalation {
            Some(esc) => Ok(Some(
                self.escalated_model_section(esc).resolve(&self.dataset)?,
            )),
            None => Ok(None),
        }
    }

    /// Sixteen hex chars over the canonical serialization of the fully
    /// resolved config; any field change moves it.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

// ── sources and overrides ───────────────────────────────────────────────

pub const RECIPES: &[(&str, &str)] = &[
    ("desk-g2l5-tf", include_str!("../recipes/desk-g2l5-tf.toml")),
    ("desk-g2l5-rev", include_str!("../recipes/desk-g2l5-rev.toml")),
    ("desk-g2l5-tless", include_str!("../recipes/desk-g2l5-tless.toml")),
    ("desk-g5l5-tf", include_str!("../recipes/desk-g5l5-tf.toml")),
    ("desk-snowball", include_str!("../recipes/desk-snowball.toml")),
    (
        "desk-g2l5-tf-recurrent",
        include_str!("../recipes/desk-g2l5-tf-recurrent.toml"),
    ),
];

pub fn recipe_text(name: &str) -> Result<&'static str> {
    RECIPES
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| *text)
        .ok_or_else(|| {
            let names: Vec<&str> = RECIPES.iter().map(|(n, _)| *n).collect();
            Error::Config(format!(
                "unknown recipe '{name}' (available: {})",
                names.join(", ")
            ))
        })
}

/// Flag-level overrides applied after the file and the environment.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub objective: Option<String>,
    pub arch: Option<String>,
    pub out: Option<PathBuf>,
}

/// A fully resolved configuration plus where to put its outputs.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: ExperimentConfig,
    pub out_dir: PathBuf,
}

pub fn load(
    config_path: Option<&PathBuf>,
    recipe: Option<&str>,
    overrides: &Overrides,
) -> Result<Resolved> {
    let (text, origin) = match (config_path, recipe) {
        (Some(_), Some(_)) => {
            return Err(Error::Config(
                "pass either --config or --recipe, not both".into(),
            ))
        }
        (Some(path), None) => {
            let stem = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "run".into());
            (std::fs::read_to_string(path)?, stem)
        }
        (None, Some(name)) => (recipe_text(name)?.to_string(), name.to_string()),
        (None, None) => {
            return Err(Error::Config(
                "pass --config PATH or --recipe NAME".into(),
            ))
        }
    };

    let mut value: toml::Value = text
        .parse()
        .map_err(|e| Error::Config(format!("bad TOML in {origin}: {e}")))?;
    apply_env_overrides(&mut value, std::env::vars())?;
    let mut config: ExperimentConfig = value
        .try_into()
        .map_err(|e| Error::Config(format!("bad config {origin}: {e}")))?;

    if let Some(seed) = overrides.seed {
        config.dataset.seed = seed;
        config.train.seed = seed;
        config.eval.seed = seed;
    }
    if let Some(objective) = &overrides.objective {
        config.train.objective = objective.parse()?;
    }
    if let Some(arch) = &overrides.arch {
        config.model.arch = arch.clone();
        if arch == "recurrent" {
            // drop transformer-only knobs instead of rejecting the swap
            config.model.n_heads = None;
            config.model.mlp_expansion = None;
            config.model.max_seq_len = None;
            config.model.init_scale = None;
        }
    }
    if let Some(out) = &overrides.out {
        config.out_dir = Some(out.display().to_string());
    }
    config.validate()?;

    let out_dir = PathBuf::from(
        config
            .out_dir
            .clone()
            .unwrap_or_else(|| format!("runs/{origin}")),
    );
    Ok(Resolved { config, out_dir })
}

fn apply_env_overrides(
    root: &mut toml::Value,
    vars: impl Iterator<Item = (String, String)>,
) -> Result<()> {
    const SECTIONS: [&str; 5] = ["dataset", "model", "train", "eval", "escalation"];
    let mut pairs: Vec<(String, String)> = vars
        .filter(|(k, _)| k.starts_with("PATHSTAR_"))
        .collect();
    pairs.sort(); // env iteration order is unspecified; make application stable
    for (name, raw) in pairs {
        let rest = name.strip_prefix("PATHSTAR_").unwrap();
        let (section, key) = rest.split_once('_').ok_or_else(|| {
            Error::Config(format!(
                "malformed override {name}: expected PATHSTAR_<SECTION>_<KEY>"
            ))
        })?;
        let section = section.to_ascii_lowercase();
        let key = key.to_ascii_lowercase();
        if !SECTIONS.contains(&section.as_str()) {
            return Err(Error::Config(format!(
                "override {name} names unknown section '{section}'"
            )));
        }
        let table = root
            .as_table_mut()
            .ok_or_else(|| Error::Config("config root is not a table".into()))?
            .entry(section.clone())
            .or_insert_with(|| toml::Value::Table(Default::default()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("section {section} is not a table")))?;
        table.insert(key, parse_scalar(&raw));
    }
    Ok(())
}

/// Numbers and booleans parse as themselves; anything else is a string.
fn parse_scalar(raw: &str) -> toml::Value {
    format!("x = {raw}")
        .parse::<toml::Value>()
        .ok()
        .and_then(|t| t.get("x").cloned())
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
