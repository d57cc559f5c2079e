use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::energy::EnergyConfig;
use crate::error::{Error, Result};
use crate::nn::data::{read_csv, read_idx, synthetic_clusters, Dataset, SyntheticSpec};
use crate::nn::{NetworkSpec, TrainConfig};

/// Directory searched for configuration files given by bare name.
pub const CONFIG_DIR_ENV: &str = "MFTRAIN_CONFIG_DIR";

/// Where training and test samples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        #[serde(default)]
        generator: SyntheticSpec,
        /// Samples held out from the end of the generated set.
        #[serde(default = "default_test_samples")]
        test_samples: usize,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Csv {
        train: PathBuf,
        test: PathBuf,
        #[serde(default = "default_label_column")]
        label_column: String,
    },
}

fn default_test_samples() -> usize {
    512
}

fn default_label_column() -> String {
    "label".into()
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            generator: SyntheticSpec::default(),
            test_samples: default_test_samples(),
        }
    }
}

impl DataSource {
    /// Loads `(train, test)`, resolving relative paths against `base`.
    pub fn load(&self, base: &Path) -> Result<(Dataset, Dataset)> {
        let at = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
        let dataset_err = |e: Error| match e {
            Error::Io { path, source } => {
                Error::Dataset(format!("{}: {source}", path.display()))
            }
            Error::Input(msg) => Error::Dataset(msg),
            other => other,
        };
        match self {
            DataSource::Synthetic {
                generator,
                test_samples,
            } => {
                if *test_samples >= generator.samples {
                    return Err(Error::Config(format!(
                        "test_samples {test_samples} leaves no training data out of {}",
                        generator.samples
                    )));
                }
                let data = synthetic_clusters(generator)?;
                Ok(data.split(generator.samples - test_samples))
            }
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => Ok((
                read_idx(&at(train_images), &at(train_labels)).map_err(dataset_err)?,
                read_idx(&at(test_images), &at(test_labels)).map_err(dataset_err)?,
            )),
            DataSource::Csv {
                train,
                test,
                label_column,
            } => Ok((
                read_csv(&at(train), label_column).map_err(dataset_err)?,
                read_csv(&at(test), label_column).map_err(dataset_err)?,
            )),
        }
    }
}

/// A complete training run description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub network: NetworkSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataSource,
    #[serde(default)]
    pub energy: EnergyConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("run")
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("{origin}: {e}")))?;
        cfg.validate()
            .map_err(|e| Error::Config(format!("{origin}: {}", strip_prefix(&e))))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text, &path.display().to_string())?;
        if cfg.output_dir.is_relative() {
            if let Some(parent) = path.parent() {
                cfg.output_dir = parent.join(&cfg.output_dir);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        crate::nn::Network::from_spec(&self.network)?;
        self.train.validate()?;
        self.energy.table()?;
        Ok(())
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(msg) => msg.clone(),
        other => other.to_string(),
    }
}

/// Resolves a configuration path: as given when it exists, otherwise
/// relative to `$MFTRAIN_CONFIG_DIR`; with no path, `default_name` inside
/// that directory if present.
pub fn resolve_config(path: Option<&Path>, default_name: &str) -> Result<Option<PathBuf>> {
    let dir = std::env::var_os(CONFIG_DIR_ENV).map(PathBuf::from);
    match path {
        Some(p) if p.exists() => Ok(Some(p.to_path_buf())),
        Some(p) => match dir.map(|d| d.join(p)).filter(|c| c.exists()) {
            Some(found) => Ok(Some(found)),
            None => Err(Error::Config(format!(
                "configuration file {} not found (also searched ${CONFIG_DIR_ENV})",
                p.display()
            ))),
        },
        None => Ok(dir.map(|d| d.join(default_name)).filter(|c| c.exists())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
output_dir = "out"

[network]
input_shape = [4]
layers = [{ kind = "linear", outputs = 3 }]

[train]
epochs = 2
learning_rate = 0.05

[data]
source = "synthetic"
test_samples = 16

[data.generator]
samples = 64
classes = 3
sample_shape = [4]
"#;

    #[test]
    fn parses_minimal_config() {
        let cfg = RunConfig::from_toml(MINIMAL, "run.toml").unwrap();
        assert_eq!(cfg.train.epochs, 2);
        let (train, test) = cfg.data.load(Path::new(".")).unwrap();
        assert_eq!((train.len(), test.len()), (48, 16));
    }

    #[test]
    fn unknown_keys_report_location() {
        let bad = MINIMAL.replace("epochs = 2", "epochs = 2\nepoch = 3");
        let err = RunConfig::from_toml(&bad, "run.toml").unwrap_err().to_string();
        assert!(err.contains("run.toml"), "{err}");
        assert!(err.contains("line 10"), "{err}");
        assert!(err.contains("epoch"), "{err}");
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let bad = MINIMAL.replace("learning_rate = 0.05", "learning_rate = -1.0");
        assert!(matches!(
            RunConfig::from_toml(&bad, "run.toml"),
            Err(Error::Config(_))
        ));
        let bad = format!("{MINIMAL}\n[energy.costs]\nxor = -0.01\n");
        assert!(matches!(
            RunConfig::from_toml(&bad, "run.toml"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn missing_dataset_files_are_dataset_errors() {
        let src = DataSource::Idx {
            train_images: "nope-images".into(),
            train_labels: "nope-labels".into(),
            test_images: "nope-images".into(),
            test_labels: "nope-labels".into(),
        };
        assert!(matches!(src.load(Path::new("/nonexistent")), Err(Error::Dataset(_))));
    }
}
