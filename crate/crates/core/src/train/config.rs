//! Training configuration, read from TOML.
//!
//! ```toml
//! seed = 7
//! learning_rate = 0.1
//! epochs = 5
//! batch_size = 10
//! holdout_fraction = 0.2
//! gradcheck_gate = true
//!
//! [model]
//! layers = [784, 300, 100, 10]
//! activations = ["relu", "relu"]
//! head = "softmax_ce"
//!
//! [data]
//! source = "idx"
//! images = "train-images-idx3-ubyte"
//! labels = "train-labels-idx1-ubyte"
//! limit = 1000
//!
//! [output]
//! metrics = "metrics.jsonl"
//! model = "model.jpnn"
//! wall_time = true
//! ```
//!
//! Relative paths are resolved against the directory holding the config file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::data::{SynthKind, SynthSpec};
use crate::activations::ActivationKind;
use crate::error::{Error, Result};
use crate::losses::HeadKind;
use crate::network::NetworkShape;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub learning_rate: f64,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
    #[serde(default = "default_true")]
    pub gradcheck_gate: bool,
    pub model: ModelConfig,
    pub data: DataSource,
    #[serde(default)]
    pub output: OutputConfig,
    /// File the config was read from; named in errors found after loading.
    #[serde(skip)]
    pub origin: Option<PathBuf>,
}

fn default_batch() -> usize {
    1
}

fn default_holdout() -> f64 {
    0.2
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Widths `n^[0], …, n^[L]`.
    pub layers: Vec<usize>,
    /// One per hidden layer; a single entry is repeated.
    #[serde(default)]
    pub activations: Vec<ActivationKind>,
    pub head: HeadKind,
}

impl ModelConfig {
    pub fn shape(&self) -> Result<NetworkShape> {
        let hidden = self.layers.len().saturating_sub(2);
        let acts = match self.activations.as_slice() {
            [one] => vec![*one; hidden],
            acts => acts.to_vec(),
        };
        NetworkShape::new(self.layers.clone(), acts, self.head)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        limit: Option<usize>,
    },
    Synth {
        kind: SynthKind,
        n: usize,
        dims: usize,
        /// Defaults to the top-level seed.
        #[serde(default)]
        seed: Option<u64>,
        #[serde(default)]
        classes: Option<usize>,
        #[serde(default)]
        outputs: Option<usize>,
        #[serde(default)]
        noise: Option<f64>,
    },
}

impl DataSource {
    pub fn synth_spec(&self, default_seed: u64) -> Option<SynthSpec> {
        let DataSource::Synth {
            kind,
            n,
            dims,
            seed,
            classes,
            outputs,
            noise,
        } = *self
        else {
            return None;
        };
        let base = SynthSpec::new(kind, n, dims, seed.unwrap_or(default_seed));
        Some(SynthSpec {
            classes: classes.unwrap_or(base.classes),
            outputs: outputs.unwrap_or(base.outputs),
            noise: noise.unwrap_or(base.noise),
            ..base
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub metrics: Option<PathBuf>,
    #[serde(default)]
    pub model: Option<PathBuf>,
    /// When false, `wall_time_s` is written as null so logs of equal runs
    /// are byte-identical.
    #[serde(default = "default_true")]
    pub wall_time: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            metrics: None,
            model: None,
            wall_time: true,
        }
    }
}

impl TrainConfig {
    /// Parses `text`; `origin` names the file in errors and anchors relative
    /// paths.
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| config_err(origin, "", e.message()))?;
        let mut cfg: TrainConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            config_err(origin, if field == "." { "" } else { &field }, e.into_inner().message())
        })?;
        let base = origin.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        cfg.origin = Some(origin.to_path_buf());
        cfg.validate(origin)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| config_err(path, "", e.to_string()))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is plain data")
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let DataSource::Idx { images, labels, .. } = &mut self.data {
            fix(images);
            fix(labels);
        }
        self.output.metrics.as_mut().map(fix);
        self.output.model.as_mut().map(fix);
    }

    /// Checks ranges and that the model shape is well formed. Agreement with
    /// the data's dimensions is checked once the data is loaded.
    pub fn validate(&self, origin: &Path) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(config_err(
                origin,
                "learning_rate",
                format!("must be finite and >= 0, got {}", self.learning_rate),
            ));
        }
        if self.batch_size == 0 {
            return Err(config_err(origin, "batch_size", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(config_err(
                origin,
                "holdout_fraction",
                format!("must be in [0, 1), got {}", self.holdout_fraction),
            ));
        }
        self.model
            .shape()
            .map_err(|e| config_err(origin, "model", e.to_string()))?;
        if let Some(spec) = self.data.synth_spec(self.seed) {
            if spec.n == 0 {
                return Err(config_err(origin, "data.n", "must be >= 1"));
            }
            if spec.dims == 0 {
                return Err(config_err(origin, "data.dims", "must be >= 1"));
            }
        }
        Ok(())
    }
}

pub(crate) fn config_err(path: &Path, field: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        path: path.to_path_buf(),
        field: field.to_string(),
        msg: msg.into(),
    }
}
