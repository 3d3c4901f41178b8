//! JSON run configuration shared by the command line and the tests.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cac::GateMode;
use crate::data::{load_cifar10, synth_dataset, Dataset, Normalization, SynthKind};
use crate::error::{CacError, Result};
use crate::nn::{ModelSpec, OptimizerConfig, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Cifar10,
    #[default]
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Directory holding the CIFAR-10 binary batches.
    pub path: Option<PathBuf>,
    /// Training samples kept after a seeded shuffle; `None` keeps all.
    pub subset_size: Option<usize>,
    pub test_subset_size: Option<usize>,
    pub normalization: Normalization,
    pub synth_kind: SynthKind,
    /// Synthetic samples generated in total, before the hold-out split.
    pub synth_n: usize,
    pub synth_holdout: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::Synthetic,
            path: None,
            subset_size: None,
            test_subset_size: None,
            normalization: Normalization::default(),
            synth_kind: SynthKind::SmoothVsTextured,
            synth_n: 1000,
            synth_holdout: 200,
        }
    }
}

/// Inline spec or a path to a JSON spec file (relative to the config file).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelRef {
    Path(PathBuf),
    Inline(ModelSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    #[default]
    Train,
    Eval,
    Analyze,
    Verify,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dataset: DatasetConfig,
    pub model: ModelRef,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub penalty_warmup_epochs: usize,
    #[serde(default)]
    pub augment_flip: bool,
    #[serde(default)]
    pub augment_crop_pad: usize,
    /// Train with every gate fixed open (`M ≡ 1`).
    #[serde(default)]
    pub freeze_gates: bool,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub mode: RunMode,
}

fn default_lambda() -> f64 {
    TrainConfig::default().lambda
}
fn default_epochs() -> usize {
    TrainConfig::default().epochs
}
fn default_batch() -> usize {
    TrainConfig::default().batch_size
}
fn default_output() -> PathBuf {
    PathBuf::from("runs/default")
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| CacError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Reads a config file. Relative paths inside it are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CacError::io(path, e))?;
        let mut cfg = Self::from_json(&text).map_err(|e| match e {
            CacError::Config(m) => CacError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let ModelRef::Path(p) = &mut cfg.model {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(p) = &mut cfg.dataset.path {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        if self.dataset.kind == DatasetKind::Cifar10 && self.dataset.path.is_none() {
            return Err(CacError::Config("dataset.path is required for cifar10".into()));
        }
        if let ModelRef::Inline(spec) = &self.model {
            spec.validate()?;
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lambda: self.lambda,
            optimizer: self.optimizer.clone(),
            penalty_warmup_epochs: self.penalty_warmup_epochs,
            augment_flip: self.augment_flip,
            augment_crop_pad: self.augment_crop_pad,
            ..TrainConfig::default()
        }
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let mut spec = match &self.model {
            ModelRef::Inline(s) => s.clone(),
            ModelRef::Path(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CacError::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| CacError::Config(format!("{}: {e}", p.display())))?
            }
        };
        if self.freeze_gates {
            spec.gate = GateMode::FrozenSharp;
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Training set and optional held-out set.
    pub fn load_datasets(&self, spec: &ModelSpec) -> Result<(Dataset, Option<Dataset>)> {
        let d = &self.dataset;
        match d.kind {
            DatasetKind::Cifar10 => {
                let dir = d.path.as_deref().ok_or_else(|| CacError::Config("dataset.path missing".into()))?;
                let (train, test) = load_cifar10(dir, &d.normalization)?;
                let train = match d.subset_size {
                    Some(n) => train.seeded_subset(n, self.seed)?,
                    None => train,
                };
                let test = match d.test_subset_size {
                    Some(n) => test.seeded_subset(n, self.seed.wrapping_add(1))?,
                    None => test,
                };
                Ok((train, Some(test)))
            }
            DatasetKind::Synthetic => {
                let [c, n, _] = spec.input;
                let all = synth_dataset(d.synth_kind, d.synth_n, self.seed, c, n)?;
                if d.synth_holdout == 0 {
                    return Ok((all, None));
                }
                let (train, test) = all.split_tail(d.synth_holdout)?;
                Ok((train, Some(test)))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "seed": 3,
        "model": {"input": [1, 8, 8], "num_classes": 2,
                  "layers": [{"type": "conv", "c_out": 2, "k": 3, "cac": true},
                             {"type": "global_avgpool"}]},
        "lambda": 0.3,
        "epochs": 2
    }"#;

    #[test]
    fn round_trip_is_idempotent() {
        let cfg = RunConfig::from_json(MINIMAL).unwrap();
        let once = cfg.to_json();
        let twice = RunConfig::from_json(&once).unwrap().to_json();
        assert_eq!(once, twice);
        assert_eq!(RunConfig::from_json(&once).unwrap(), cfg);
        assert_eq!(cfg.batch_size, 64);
        assert_eq!(cfg.optimizer.momentum, 0.9);
    }

    #[test]
    fn rejects_malformed() {
        assert!(RunConfig::from_json("{").is_err());
        assert!(RunConfig::from_json(&MINIMAL.replace("\"lambda\"", "\"lamda\"")).is_err());
        assert!(RunConfig::from_json(&MINIMAL.replace("0.3", "-1.0")).is_err());
        let no_path = MINIMAL.replace("\"seed\": 3", "\"seed\": 3, \"dataset\": {\"kind\": \"cifar10\"}");
        assert!(RunConfig::from_json(&no_path).is_err());
    }

    #[test]
    fn freeze_and_synthetic_loading() {
        let mut cfg = RunConfig::from_json(MINIMAL).unwrap();
        cfg.freeze_gates = true;
        cfg.dataset.synth_n = 30;
        cfg.dataset.synth_holdout = 10;
        let spec = cfg.model_spec().unwrap();
        assert_eq!(spec.gate, GateMode::FrozenSharp);
        let (tr, te) = cfg.load_datasets(&spec).unwrap();
        assert_eq!((tr.len(), te.unwrap().len()), (20, 10));
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ModelSpec::one_cac_layer([1, 8, 8], 2, 2);
        std::fs::write(dir.path().join("model.json"), serde_json::to_string(&spec).unwrap()).unwrap();
        let cfg_path = dir.path().join("run.json");
        std::fs::write(&cfg_path, r#"{"model": "model.json", "output_dir": "out"}"#).unwrap();
        let cfg = RunConfig::load(&cfg_path).unwrap();
        assert_eq!(cfg.model_spec().unwrap(), spec);
        assert_eq!(cfg.output_dir, dir.path().join("out"));
    }
}
