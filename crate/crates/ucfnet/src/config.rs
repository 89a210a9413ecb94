//! Run configuration: a single JSON document with one section per
//! component, unknown keys rejected everywhere. Every section falls back
//! to its defaults, which reproduce the published training recipe
//! (lr 0.001, 300 epochs, batch 8, theta 0.7).

use crate::data::synth::SynthConfig;
use crate::eval::EvalConfig;
use crate::loss::LossConfig;
use crate::model::UcfConfig;
use crate::optim::OptimConfig;
use crate::tensor::ElemWidth;
use crate::{Error, Result};

use serde::{Deserialize, Serialize};
use std::borrow::Cow;
use std::path::{Path, PathBuf};

/// Where training and evaluation data comes from: an existing directory
/// in the images/masks layout, or a synthetic dataset generated under
/// the run's output directory. Setting both is an error; setting neither
/// selects the default synthetic set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dir: Option<PathBuf>,
    pub synth: Option<SynthConfig>,
    /// Train fraction of the shuffled split.
    pub split_ratio: f64,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: None,
            synth: None,
            split_ratio: 0.8,
            split_seed: 0,
        }
    }
}

/// Resolved data source.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource<'a> {
    Dir(&'a Path),
    Synth(Cow<'a, SynthConfig>),
}

impl DataConfig {
    /// The effective source; defaults to the built-in synthetic set when
    /// the section names neither.
    pub fn source(&self) -> Result<DataSource<'_>> {
        match (&self.dir, &self.synth) {
            (Some(_), Some(_)) => {
                Err(Error::config("data: set either dir or synth, not both"))
            }
            (Some(dir), None) => Ok(DataSource::Dir(dir)),
            (None, Some(s)) => Ok(DataSource::Synth(Cow::Borrowed(s))),
            (None, None) => Ok(DataSource::Synth(Cow::Owned(SynthConfig::default()))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let DataSource::Synth(s) = self.source()? {
            s.validate()?;
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::config(format!(
                "data: split_ratio must lie strictly between 0 and 1, got {}",
                self.split_ratio
            )));
        }
        Ok(())
    }
}

/// Run-wide knobs: seeding, element width, output location, parallelism.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Seeds model init and batch order for train/eval commands.
    pub seed: u64,
    /// Seed list for ablation medians.
    pub seeds: Vec<u64>,
    /// Element width of all math: "f32" (training default) or "f64".
    pub precision: ElemWidth,
    /// Every output lands under this directory.
    pub output_dir: PathBuf,
    /// Worker threads for per-image evaluation; 1 keeps runs
    /// bit-reproducible.
    pub threads: usize,
    /// Periodic checkpoint cadence in epochs; 0 keeps only best + final.
    pub checkpoint_every: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 0,
            seeds: vec![0, 1, 2],
            precision: ElemWidth::F32,
            output_dir: PathBuf::from("runs"),
            threads: 1,
            checkpoint_every: 0,
        }
    }
}

impl RunSection {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("run: seeds must not be empty"));
        }
        if self.threads == 0 {
            return Err(Error::config("run: threads must be at least 1"));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::config("run: output_dir must not be empty"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: UcfConfig,
    pub optim: OptimConfig,
    pub loss: LossConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub run: RunSection,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim.validate()?;
        self.loss.validate()?;
        self.data.validate()?;
        self.eval.validate()?;
        self.run.validate()
    }

    /// Parses and validates a config document. Parse failures surface as
    /// config errors so the caller can exit accordingly.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}
