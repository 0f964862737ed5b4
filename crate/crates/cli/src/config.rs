//! Run configuration: one TOML file per experiment.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use fas_core::data::{ProtocolId, ProtocolSpec, SyntheticConfig};
use fas_core::evaluation::ThresholdPolicy;
use fas_core::prompts::PromptSet;
use fas_core::training::TrainPlan;

/// Environment variable naming the directory that holds one sub-directory
/// per dataset.
pub const DATA_ROOT_ENV: &str = "FAS_DATA_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Every artifact lands under `<output_dir>/seed_<seed>/`.
    pub output_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub protocol: ProtocolConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelSource,
    /// TOML file with `real` and `spoof` prompt lists; the built-in six
    /// per class when absent.
    #[serde(default)]
    pub prompts: Option<PathBuf>,
    #[serde(default)]
    pub train: TrainPlan,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub id: ProtocolId,
    /// Split name (`OCI→M`, `C->I`) or its target (`M`, `replay`).
    pub split: String,
    #[serde(default)]
    pub shots: usize,
    /// Add the CelebA-Spoof domain to training.
    #[serde(default)]
    pub supplementary: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset root; falls back to `$FAS_DATA_ROOT`.
    #[serde(default)]
    pub root: Option<PathBuf>,
    /// Generate every domain in memory instead of reading a dataset root.
    #[serde(default)]
    pub synthetic: Option<SyntheticConfig>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// The miniature dual encoder, randomly initialized from the run seed.
    #[default]
    Toy,
    /// A randomly initialized ViT-B/16 dual encoder.
    VitB16,
    /// Published dual-encoder weights in safetensors form.
    Pretrained,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSource {
    #[serde(default)]
    pub kind: ModelKind,
    /// Weights file; required for `pretrained`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// BPE merge list; defaults to `merges.txt` beside the weights.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub merges: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub threshold: ThresholdPolicy,
    pub fpr_target: f64,
    /// Output directory of another method's run, compared seed by seed with
    /// a one-sided paired t-test on HTER.
    pub baseline: Option<PathBuf>,
    /// Write ROC and score-histogram SVGs next to each report.
    pub plots: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: ThresholdPolicy::default(),
            fpr_target: 0.01,
            baseline: None,
            plots: true,
        }
    }
}

/// A `key.path=value` assignment from the command line.
#[derive(Clone, Debug, PartialEq)]
pub struct Override {
    pub key: String,
    pub value: toml::Value,
}

impl std::str::FromStr for Override {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (key, raw) = s
            .split_once('=')
            .ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))?;
        let key = key.trim();
        if key.is_empty() || key.split('.').any(str::is_empty) {
            return Err(format!("bad key `{key}`"));
        }
        // Anything that is not a TOML literal is taken as a bare string.
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
        Ok(Override {
            key: key.to_string(),
            value,
        })
    }
}

fn apply_override(root: &mut toml::Table, ov: &Override) -> Result<()> {
    let mut parts: Vec<&str> = ov.key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut table = root;
    for p in parts {
        table = table
            .entry(p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .with_context(|| format!("override {}: `{p}` is not a table", ov.key))?;
    }
    if matches!(table.get(last), Some(toml::Value::Table(_))) {
        bail!("override {}: only scalar and array fields can be overridden", ov.key);
    }
    log::info!("override {} = {}", ov.key, ov.value);
    table.insert(last.to_string(), ov.value.clone());
    Ok(())
}

impl RunConfig {
    /// Parses `text`, applies `overrides` and validates the result.
    pub fn parse(text: &str, overrides: &[Override]) -> Result<Self> {
        let cfg: RunConfig = if overrides.is_empty() {
            toml::from_str(text)?
        } else {
            let mut table: toml::Table = toml::from_str(text)?;
            for ov in overrides {
                apply_override(&mut table, ov)?;
            }
            toml::from_str(&toml::to_string(&table)?)?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[Override]) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text, overrides).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.output_dir.as_os_str().is_empty(), "output_dir: must not be empty");
        ensure!(!self.seeds.is_empty(), "seeds: at least one seed is required");
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        ensure!(seen.len() == self.seeds.len(), "seeds: a seed is listed twice");
        ensure!(
            self.train.seed == 0,
            "train.seed: set `seeds` instead; each run uses its own seed"
        );
        self.train.validate().context("train")?;
        self.spec().context("protocol.split")?;
        ensure!(
            self.eval.fpr_target > 0.0 && self.eval.fpr_target < 1.0,
            "eval.fpr_target: must lie in (0, 1), got {}",
            self.eval.fpr_target
        );
        if let ThresholdPolicy::Fixed(t) = self.eval.threshold {
            ensure!((0.0..=1.0).contains(&t), "eval.threshold: {t} is not a probability");
        }
        if let Some(s) = &self.data.synthetic {
            ensure!(s.size > 0, "data.synthetic.size: must be positive");
            ensure!(s.real > 0 && s.print + s.replay > 0, "data.synthetic: both classes need samples");
        }
        match (self.model.kind, &self.model.path) {
            (ModelKind::Pretrained, Some(p)) => ensure!(p.is_file(), "model.path: {} does not exist", p.display()),
            (ModelKind::Pretrained, None) => bail!("model.path: required when model.kind is `pretrained`"),
            (_, Some(_)) => bail!("model.path: only used when model.kind is `pretrained`"),
            _ => {}
        }
        if let Some(p) = &self.prompts {
            PromptSet::load(p).context("prompts")?;
        }
        Ok(())
    }

    pub fn spec(&self) -> Result<ProtocolSpec> {
        Ok(self.protocol.id.find(&self.protocol.split)?)
    }

    /// SHA-256 of the parsed configuration, so formatting and comments do
    /// not change it.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("configuration serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serializes")
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.output_dir.join(format!("seed_{seed}"))
    }

    /// The dataset root from the config or the environment.
    pub fn data_root(&self) -> Result<PathBuf> {
        if let Some(root) = &self.data.root {
            return Ok(root.clone());
        }
        match std::env::var_os(DATA_ROOT_ENV) {
            Some(v) if !v.is_empty() => Ok(PathBuf::from(v)),
            _ => bail!("no dataset root: set data.root, ${DATA_ROOT_ENV}, or data.synthetic"),
        }
    }

    pub fn prompt_set(&self) -> Result<PromptSet> {
        match &self.prompts {
            Some(p) => Ok(PromptSet::load(p)?),
            None => Ok(PromptSet::default()),
        }
    }
}
