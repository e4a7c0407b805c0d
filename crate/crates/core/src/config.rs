//! TOML run configuration: model, training recipe and data source.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_cifar10_binary, AugmentFlags, Dataset, SyntheticConfig};
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::train::TrainConfig;

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_train_size() -> usize {
    2000
}

fn default_eval_size() -> usize {
    500
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataConfig {
    /// Generated oriented gratings; the eval split uses `seed + 1`.
    Synthetic {
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_train_size")]
        train_size: usize,
        #[serde(default = "default_eval_size")]
        eval_size: usize,
        #[serde(default)]
        noise: Option<f32>,
    },
    /// CIFAR-10 binary batches. Relative paths resolve against the config
    /// file's directory.
    Cifar10Binary {
        train_files: Vec<PathBuf>,
        eval_files: Vec<PathBuf>,
        /// Keep only the first `n` samples of a split.
        #[serde(default)]
        train_size: Option<usize>,
        #[serde(default)]
        eval_size: Option<usize>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub augment: AugmentFlags,
    /// Standardize each channel with training-set statistics.
    #[serde(default)]
    pub normalize: bool,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl RunConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, &base).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| Error::Config(format!("model: {e}")))?;
        self.train.validate()?;
        if let DataConfig::Cifar10Binary {
            train_files,
            eval_files,
            ..
        } = &self.data
        {
            if train_files.is_empty() || eval_files.is_empty() {
                return Err(Error::Config("cifar10-binary needs train_files and eval_files".into()));
            }
            let m = &self.model;
            if m.input_channels != 3 || m.input_size != 32 || m.num_classes != 10 {
                return Err(Error::Config("cifar10-binary needs a 3 x 32 x 32 input, 10-class model".into()));
            }
        }
        Ok(())
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Loads (or generates) the training and evaluation splits, normalized
    /// if requested.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        let (mut train, mut eval) = match &self.data {
            DataConfig::Synthetic {
                seed,
                train_size,
                eval_size,
                noise,
            } => {
                let syn = SyntheticConfig {
                    num_classes: self.model.num_classes,
                    image_size: self.model.input_size,
                    noise: noise.unwrap_or(SyntheticConfig::default().noise),
                };
                if self.model.input_channels != 3 {
                    return Err(Error::Config("synthetic data has 3 channels".into()));
                }
                (syn.generate(*seed, *train_size)?, syn.generate(seed.wrapping_add(1), *eval_size)?)
            }
            DataConfig::Cifar10Binary {
                train_files,
                eval_files,
                train_size,
                eval_size,
            } => {
                let load = |files: &[PathBuf], limit: Option<usize>| -> Result<Dataset> {
                    let mut parts = files.iter().map(|f| load_cifar10_binary(self.resolve(f)));
                    let mut all = parts.next().expect("validated non-empty")?;
                    for p in parts {
                        all = all.concat(&p?)?;
                    }
                    Ok(match limit {
                        Some(n) => all.truncated(n),
                        None => all,
                    })
                };
                (load(train_files, *train_size)?, load(eval_files, *eval_size)?)
            }
        };
        if train.is_empty() || eval.is_empty() {
            return Err(Error::Config("training and evaluation splits must be non-empty".into()));
        }
        if self.normalize {
            let (mean, std) = train.channel_stats();
            let std: Vec<f32> = std.into_iter().map(|s| if s > 0.0 { s } else { 1.0 }).collect();
            train.normalize(&mean, &std)?;
            eval.normalize(&mean, &std)?;
        }
        Ok((train, eval))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [model]
        input_channels = 3
        input_size = 8
        num_classes = 4
        backbone = [{ kind = "conv", filters = 4, gated = true }]
        gater = [{ kind = "conv", filters = 4 }]

        [train]
        epochs = 2
        lr_schedule = [[0, 0.1], [1, 0.01]]

        [data]
        source = "synthetic"
        train_size = 12
        eval_size = 8
    "#;

    #[test]
    fn parses_minimal_config() {
        let c = RunConfig::from_toml(MINIMAL, Path::new(".")).unwrap();
        assert_eq!(c.train.lr_schedule, vec![(0, 0.1), (1, 0.01)]);
        assert_eq!(c.train.lambda, 0.1);
        let (tr, ev) = c.load_data().unwrap();
        assert_eq!((tr.len(), ev.len()), (12, 8));
    }

    #[test]
    fn rejects_unknown_keys() {
        let text = MINIMAL.replace("epochs = 2", "epochs = 2\nlamda = 0.3");
        assert!(matches!(RunConfig::from_toml(&text, Path::new(".")), Err(Error::Config(_))));
        let text = MINIMAL.replace("source = \"synthetic\"", "source = \"mnist\"");
        assert!(RunConfig::from_toml(&text, Path::new(".")).is_err());
    }
}
