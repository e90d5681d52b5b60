//! Experiment configuration: a TOML file, command-line overrides on top, and
//! the fully resolved form written next to every run's outputs.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use layerprobe::embedding::{ExternalAdapter, ModelAdapter, SyntheticAdapter};
use layerprobe::eval::AggregationMode;
use layerprobe::probe::TrainConfig;

pub const CACHE_ENV: &str = "LAYERPROBE_CACHE";
pub const DEFAULT_CACHE_DIR: &str = ".layerprobe-cache";
pub const SYNTHETIC_LAYERS: usize = 24;
pub const SYNTHETIC_DIM: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AdapterSetting {
    /// `synthetic:<seed>`
    Short(String),
    Table(AdapterSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum AdapterSpec {
    Synthetic {
        #[serde(default = "default_synthetic_id")]
        model_id: String,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_synthetic_layers")]
        num_layers: usize,
        #[serde(default = "default_synthetic_dim")]
        hidden_dim: usize,
    },
    External {
        model_id: String,
        command: Vec<String>,
        num_layers: usize,
        hidden_dim: usize,
        #[serde(default = "default_rate")]
        sample_rate_hz: u32,
        #[serde(default = "default_min_samples")]
        min_samples: usize,
    },
}

fn default_synthetic_id() -> String {
    "synthetic".into()
}
fn default_synthetic_layers() -> usize {
    SYNTHETIC_LAYERS
}
fn default_synthetic_dim() -> usize {
    SYNTHETIC_DIM
}
fn default_rate() -> u32 {
    16_000
}
fn default_min_samples() -> usize {
    400
}

impl AdapterSetting {
    pub fn resolve(&self) -> Result<AdapterSpec> {
        match self {
            AdapterSetting::Table(spec) => Ok(spec.clone()),
            AdapterSetting::Short(text) => {
                let seed = text
                    .strip_prefix("synthetic:")
                    .ok_or_else(|| anyhow!("adapter: expected \"synthetic:<seed>\" or a table, got {text:?}"))?;
                let seed = seed
                    .parse()
                    .map_err(|_| anyhow!("adapter: seed in {text:?} is not an unsigned integer"))?;
                Ok(AdapterSpec::Synthetic {
                    model_id: default_synthetic_id(),
                    seed,
                    num_layers: SYNTHETIC_LAYERS,
                    hidden_dim: SYNTHETIC_DIM,
                })
            }
        }
    }
}

impl AdapterSpec {
    pub fn num_layers(&self) -> usize {
        match self {
            AdapterSpec::Synthetic { num_layers, .. } | AdapterSpec::External { num_layers, .. } => *num_layers,
        }
    }

    pub fn build(&self) -> Box<dyn ModelAdapter> {
        match self {
            AdapterSpec::Synthetic {
                model_id,
                seed,
                num_layers,
                hidden_dim,
            } => Box::new(SyntheticAdapter::new(model_id.clone(), *seed, *num_layers, *hidden_dim)),
            AdapterSpec::External {
                model_id,
                command,
                num_layers,
                hidden_dim,
                sample_rate_hz,
                min_samples,
            } => Box::new(ExternalAdapter {
                model_id: model_id.clone(),
                num_layers: *num_layers,
                hidden_dim: *hidden_dim,
                required_rate_hz: *sample_rate_hz,
                min_samples: *min_samples,
                command: command.clone(),
            }),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            AdapterSpec::Synthetic {
                model_id,
                num_layers,
                hidden_dim,
                ..
            } => {
                if model_id.is_empty() || *num_layers == 0 || *hidden_dim == 0 {
                    bail!("adapter: model_id, num_layers and hidden_dim must be non-empty / positive");
                }
            }
            AdapterSpec::External {
                model_id,
                command,
                num_layers,
                hidden_dim,
                sample_rate_hz,
                min_samples,
            } => {
                if model_id.is_empty() || command.is_empty() {
                    bail!("adapter: model_id and command must be non-empty");
                }
                if *num_layers == 0 || *hidden_dim == 0 || *sample_rate_hz == 0 || *min_samples == 0 {
                    bail!("adapter: num_layers, hidden_dim, sample_rate_hz and min_samples must be positive");
                }
            }
        }
        Ok(())
    }
}

/// `"all"`, `"3"`, `"1-4"`, `"1,5,9-12"` or an explicit list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LayerSelection {
    Text(String),
    List(Vec<usize>),
}

impl Default for LayerSelection {
    fn default() -> Self {
        LayerSelection::Text("all".into())
    }
}

impl LayerSelection {
    pub fn resolve(&self, num_layers: usize) -> Result<Vec<usize>> {
        let mut out = match self {
            LayerSelection::List(list) => list.clone(),
            LayerSelection::Text(text) if text.trim() == "all" => (1..=num_layers).collect(),
            LayerSelection::Text(text) if text.trim().is_empty() => Vec::new(),
            LayerSelection::Text(text) => {
                let mut out = Vec::new();
                for part in text.split(',') {
                    let part = part.trim();
                    let parse = |s: &str| {
                        s.trim()
                            .parse::<usize>()
                            .map_err(|_| anyhow!("layers: {part:?} is not a layer number or range"))
                    };
                    match part.split_once('-') {
                        Some((a, b)) => {
                            let (a, b) = (parse(a)?, parse(b)?);
                            if a > b {
                                bail!("layers: empty range {part:?}");
                            }
                            out.extend(a..=b);
                        }
                        None => out.push(parse(part)?),
                    }
                }
                out
            }
        };
        if let Some(bad) = out.iter().find(|&&l| l == 0 || l > num_layers) {
            bail!("layers: {bad} is outside 1..={num_layers}");
        }
        out.sort_unstable();
        out.dedup();
        Ok(out)
    }
}

/// The config file as written. Every field may be supplied or overridden on
/// the command line instead.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub manifest: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub adapter: Option<AdapterSetting>,
    pub k: Option<usize>,
    pub split_seed: Option<u64>,
    pub layers: Option<LayerSelection>,
    pub aggregation_mode: Option<AggregationMode>,
    pub train: Option<TrainConfig>,
}

impl ConfigFile {
    /// Reads a config file; relative paths in it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let mut config: ConfigFile =
            toml::from_str(&text).map_err(|e| anyhow!("config {}: {}", path.display(), e.message()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut config.manifest, &mut config.cache_dir, &mut config.output_dir]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }
}

/// Command-line values that win over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub manifest: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub adapter: Option<String>,
    pub k: Option<usize>,
    pub split_seed: Option<u64>,
    pub seed: Option<u64>,
    pub layers: Option<String>,
    pub aggregation_mode: Option<AggregationMode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub manifest: PathBuf,
    pub cache_dir: PathBuf,
    pub output_dir: PathBuf,
    pub k: usize,
    pub split_seed: u64,
    pub layers: Vec<usize>,
    pub aggregation_mode: AggregationMode,
    pub adapter: AdapterSpec,
    pub train: TrainConfig,
}

fn absolute(p: PathBuf) -> PathBuf {
    std::path::absolute(&p).unwrap_or(p)
}

impl ExperimentConfig {
    /// Merges file and flags (flags win), applies defaults and checks every
    /// field. Errors name the offending field.
    pub fn resolve(file: ConfigFile, flags: Overrides, cache_env: Option<PathBuf>) -> Result<Self> {
        let manifest = flags
            .manifest
            .or(file.manifest)
            .ok_or_else(|| anyhow!("manifest: not set in the config or with --manifest"))?;
        let cache_dir = flags
            .cache_dir
            .or(file.cache_dir)
            .or(cache_env)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_CACHE_DIR));
        let output_dir = flags
            .output_dir
            .or(file.output_dir)
            .unwrap_or_else(|| PathBuf::from("results"));
        let adapter = match flags.adapter {
            Some(text) => AdapterSetting::Short(text),
            None => file
                .adapter
                .ok_or_else(|| anyhow!("adapter: not set in the config or with --adapter"))?,
        }
        .resolve()?;
        adapter.validate()?;

        let k = flags.k.or(file.k).unwrap_or(10);
        if k < 2 {
            bail!("k: must be at least 2, got {k}");
        }
        let layers = match flags.layers {
            Some(text) => LayerSelection::Text(text),
            None => file.layers.unwrap_or_default(),
        }
        .resolve(adapter.num_layers())?;
        let mut train = file.train.unwrap_or_default();
        if let Some(seed) = flags.seed {
            train.seed = seed;
        }
        train.validate().map_err(|e| anyhow!("train: {e}"))?;

        if !manifest.is_file() {
            bail!("manifest: {} does not exist", manifest.display());
        }
        Ok(ExperimentConfig {
            manifest: absolute(manifest),
            cache_dir: absolute(cache_dir),
            output_dir: absolute(output_dir),
            k,
            split_seed: flags.split_seed.or(file.split_seed).unwrap_or(0),
            layers,
            aggregation_mode: flags.aggregation_mode.or(file.aggregation_mode).unwrap_or_default(),
            adapter,
            train,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest_file() -> tempfile::NamedTempFile {
        tempfile::NamedTempFile::new().unwrap()
    }

    #[test]
    fn layer_selection_forms() {
        let t = |s: &str| LayerSelection::Text(s.into()).resolve(24);
        assert_eq!(t("all").unwrap(), (1..=24).collect::<Vec<_>>());
        assert_eq!(t("1-4").unwrap(), vec![1, 2, 3, 4]);
        assert_eq!(t("13, 4,1-2").unwrap(), vec![1, 2, 4, 13]);
        assert_eq!(t("").unwrap(), Vec::<usize>::new());
        assert!(t("0").is_err() && t("25").is_err() && t("x").is_err() && t("4-1").is_err());
        assert_eq!(LayerSelection::List(vec![3, 1]).resolve(4).unwrap(), vec![1, 3]);
    }

    #[test]
    fn flags_win_over_file() {
        let m = manifest_file();
        let file: ConfigFile = toml::from_str(&format!(
            "manifest = {:?}\nadapter = \"synthetic:3\"\nk = 5\nlayers = [1, 2]\n[train]\nseed = 9\n",
            m.path()
        ))
        .unwrap();
        let flags = Overrides {
            k: Some(4),
            layers: Some("3".into()),
            seed: Some(11),
            ..Overrides::default()
        };
        let c = ExperimentConfig::resolve(file, flags, Some("/env/cache".into())).unwrap();
        assert_eq!((c.k, c.layers.clone(), c.train.seed), (4, vec![3], 11));
        assert_eq!(c.cache_dir, PathBuf::from("/env/cache"));
        assert!(matches!(c.adapter, AdapterSpec::Synthetic { seed: 3, .. }));
        let back: ExperimentConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn errors_name_the_field() {
        let m = manifest_file();
        let base = format!("manifest = {:?}\n", m.path());
        let err = |extra: &str| {
            let file: ConfigFile = toml::from_str(&format!("{base}{extra}")).unwrap();
            ExperimentConfig::resolve(file, Overrides::default(), None).unwrap_err().to_string()
        };
        assert!(err("").starts_with("adapter:"));
        assert!(err("adapter = \"bogus\"").starts_with("adapter:"));
        assert!(err("adapter = \"synthetic:1\"\nk = 1").starts_with("k:"));
        assert!(err("adapter = \"synthetic:1\"\nlayers = \"30\"").starts_with("layers:"));
        assert!(err("adapter = \"synthetic:1\"\n[train]\ninitial_lr = -1.0").starts_with("train:"));
        assert!(toml::from_str::<ConfigFile>("colour = 1").is_err());
    }

    #[test]
    fn external_adapter_table() {
        let file: ConfigFile = toml::from_str(
            "[adapter]\nkind = \"external\"\nmodel_id = \"w2v2-large\"\ncommand = [\"python3\", \"x.py\"]\nnum_layers = 24\nhidden_dim = 1024\n",
        )
        .unwrap();
        let spec = file.adapter.unwrap().resolve().unwrap();
        let adapter = spec.build();
        assert_eq!((adapter.model_id(), adapter.num_layers(), adapter.required_rate_hz()), ("w2v2-large", 24, 16_000));
    }
}
