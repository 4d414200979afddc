//! Run configuration documents (TOML).

use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    generate_synthetic, split_train_test, Dataset, DelimitedSource, SplitMode, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::sweep::SweepGrid;
use crate::train::TrainConfig;

/// Environment variable naming the default output directory. A config's
/// `output_dir` takes precedence over it.
pub const OUT_DIR_ENV: &str = "HYBRID_DP_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Delimited(DelimitedSource),
}

fn d_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    #[serde(default = "d_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub mode: SplitMode,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            test_fraction: d_fraction(),
            mode: SplitMode::Random,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    /// Non-private reference AUC for the relative loss. Sweeps measure it
    /// themselves when unset.
    #[serde(default)]
    pub baseline_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: DataSource,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default)]
    pub sweep: Option<SweepGrid>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().replace('\n', " ")))
    }

    /// Reads and validates a config file. Relative paths inside it are taken
    /// relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let DataSource::Delimited(src) = &mut cfg.data {
            src.resolve_paths(base);
        }
        if let Some(dir) = &cfg.output_dir {
            if dir.is_relative() {
                cfg.output_dir = Some(base.join(dir));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match &self.data {
            DataSource::Synthetic(s) => s.validate()?,
            DataSource::Delimited(src) => {
                src.schema.validate()?;
                if !src.path.is_file() {
                    return Err(Error::Config(format!(
                        "dataset file {} does not exist",
                        src.path.display()
                    )));
                }
                for f in &src.schema.fields {
                    if let Some(v) = &f.vocab_file {
                        if !v.is_file() {
                            return Err(Error::Config(format!(
                                "vocabulary file {} for field {} does not exist",
                                v.display(),
                                f.name
                            )));
                        }
                    }
                }
            }
        }
        if !(self.split.test_fraction > 0.0 && self.split.test_fraction < 1.0) {
            return Err(Error::Config(
                "split.test_fraction must lie in (0, 1)".into(),
            ));
        }
        if let Some(b) = self.metrics.baseline_auc {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(
                    "metrics.baseline_auc must lie in [0, 1)".into(),
                ));
            }
        }
        self.train.validate()?;
        if let Some(g) = &self.sweep {
            g.validate()?;
        }
        Ok(())
    }

    /// The train config with metric options folded in.
    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train;
        if self.metrics.baseline_auc.is_some() {
            t.baseline_auc = self.metrics.baseline_auc;
        }
        t
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match &self.data {
            DataSource::Synthetic(s) => generate_synthetic(s),
            DataSource::Delimited(src) => Ok(src.load()?.dataset),
        }
    }

    pub fn load_split(&self) -> Result<(Dataset, Dataset)> {
        let d = self.load_dataset()?;
        split_train_test(
            &d,
            self.split.test_fraction,
            self.split.mode,
            self.split.seed,
        )
    }

    /// Output directory: `flag`, else the config's `output_dir`, else the
    /// environment variable, else `runs`.
    pub fn output_dir(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.output_dir.clone())
            .or_else(|| env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }
}
