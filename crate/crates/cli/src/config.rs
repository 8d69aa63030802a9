//! `key = value` run configuration: defaults, then a file, then flags.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ctdense::preprocess::{CropPolicy, PreprocessConfig, SlicePolicy};
use ctdense::train::{AdamConfig, TrainConfig};
use ctdense::DenseNetConfig;

use crate::CliError;

/// Every key a configuration file or `--set` may name.
pub const KEYS: &[&str] = &[
    "preset",
    "dataset",
    "data_dir",
    "reference",
    "output_dir",
    "epochs",
    "batch_size",
    "seed",
    "lr",
    "beta1",
    "beta2",
    "eps",
    "threshold",
    "validation_count",
    "validate_on_train",
    "checkpoint_every",
    "cache_dir",
    "target_size",
    "clip_lo",
    "clip_hi",
    "crop",
    "slice",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    /// Directory holding `reference.csv` and `data/`.
    pub dataset: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub threshold: f64,
    pub validation_count: usize,
    /// Use every record for both training and validation.
    pub validate_on_train: bool,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub cache_dir: Option<PathBuf>,
    /// Overrides the preset's input size; images are resampled to it.
    pub target_size: Option<usize>,
    pub clip_window: (f32, f32),
    pub crop: CropPolicy,
    pub slice: SlicePolicy,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let pre = PreprocessConfig::default();
        Self {
            preset: "densenet121".into(),
            dataset: None,
            data_dir: None,
            reference: None,
            output_dir: PathBuf::from("run"),
            epochs: train.epochs,
            batch_size: train.batch_size,
            seed: train.seed,
            adam: train.adam,
            threshold: train.threshold,
            validation_count: 300,
            validate_on_train: false,
            checkpoint_every: 10,
            cache_dir: None,
            target_size: None,
            clip_window: pre.clip_window,
            crop: pre.crop,
            slice: pre.slice,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(CliError::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

impl RunConfig {
    /// Defaults, overlaid by `file` (if any), overlaid by `overrides` in order.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            cfg.apply_text(&text)
                .map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.to_string().trim_start_matches("config: "))))?;
        }
        for (key, value) in overrides {
            cfg.set(key, value)?;
        }
        Ok(cfg)
    }

    /// Applies `key = value` lines; `#` starts a comment. A key may appear once.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        let mut seen: Vec<&str> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| CliError::Config(format!("line {}: {msg}", i + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected `key = value`, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.contains(&key) {
                return Err(at(format!("duplicate key {key:?}")));
            }
            self.set(key, value).map_err(|e| at(e.to_string().trim_start_matches("config: ").into()))?;
            seen.push(key);
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let path = || Some(PathBuf::from(value));
        match key {
            "preset" => {
                DenseNetConfig::preset(value)
                    .ok_or_else(|| CliError::Config(format!("preset: unknown {value:?} (densenet121, densenet169, reduced)")))?;
                self.preset = value.to_ascii_lowercase();
            }
            "dataset" => self.dataset = path(),
            "data_dir" => self.data_dir = path(),
            "reference" => self.reference = path(),
            "output_dir" => self.output_dir = PathBuf::from(value),
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "lr" => self.adam.lr = parse(key, value)?,
            "beta1" => self.adam.beta1 = parse(key, value)?,
            "beta2" => self.adam.beta2 = parse(key, value)?,
            "eps" => self.adam.eps = parse(key, value)?,
            "threshold" => self.threshold = parse(key, value)?,
            "validation_count" => self.validation_count = parse(key, value)?,
            "validate_on_train" => self.validate_on_train = parse_bool(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "cache_dir" => self.cache_dir = path(),
            "target_size" => self.target_size = Some(parse(key, value)?),
            "clip_lo" => self.clip_window.0 = parse(key, value)?,
            "clip_hi" => self.clip_window.1 = parse(key, value)?,
            "crop" => self.crop = value.parse().map_err(|e| CliError::Config(format!("crop: {e}")))?,
            "slice" => self.slice = value.parse().map_err(|e| CliError::Config(format!("slice: {e}")))?,
            other => {
                return Err(CliError::Config(format!(
                    "unknown key {other:?}; known keys: {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// The preset, resized to `target_size` when one is set.
    pub fn model_config(&self) -> Result<DenseNetConfig, CliError> {
        let mut cfg = DenseNetConfig::preset(&self.preset)
            .ok_or_else(|| CliError::Config(format!("preset: unknown {:?}", self.preset)))?;
        if let Some(size) = self.target_size {
            cfg.input_size = size;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Preprocessing for a model whose input is `input_size` square.
    pub fn preprocess_config(&self, input_size: usize) -> Result<PreprocessConfig, CliError> {
        if let Some(size) = self.target_size.filter(|&s| s != input_size) {
            return Err(CliError::Config(format!(
                "target_size {size} does not match the model input size {input_size}"
            )));
        }
        let cfg = PreprocessConfig {
            target_size: input_size,
            clip_window: self.clip_window,
            crop: self.crop,
            slice: self.slice,
        };
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn train_config(&self, input_size: usize) -> Result<TrainConfig, CliError> {
        let cfg = TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            adam: self.adam,
            preprocess: self.preprocess_config(input_size)?,
            threshold: self.threshold,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Volume directory and reference CSV, from explicit keys or `dataset`.
    pub fn data_paths(&self) -> Result<(PathBuf, PathBuf), CliError> {
        let from_dataset = |name: &str| self.dataset.as_ref().map(|d| d.join(name));
        let data_dir = self.data_dir.clone().or_else(|| from_dataset("data"));
        let reference = self.reference.clone().or_else(|| from_dataset("reference.csv"));
        match (data_dir, reference) {
            (Some(d), Some(r)) => Ok((d, r)),
            _ => Err(CliError::Config("no data: set `dataset`, or both `data_dir` and `reference`".into())),
        }
    }

    /// Every key with its effective value, in [`KEYS`] order; re-loadable.
    pub fn to_text(&self) -> String {
        let opt = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let mut out = String::new();
        let mut put = |key: &str, value: Option<String>| {
            if let Some(v) = value {
                let _ = writeln!(out, "{key} = {v}");
            }
        };
        put("preset", Some(self.preset.clone()));
        put("dataset", opt(&self.dataset));
        put("data_dir", opt(&self.data_dir));
        put("reference", opt(&self.reference));
        put("output_dir", Some(self.output_dir.display().to_string()));
        put("epochs", Some(self.epochs.to_string()));
        put("batch_size", Some(self.batch_size.to_string()));
        put("seed", Some(self.seed.to_string()));
        put("lr", Some(self.adam.lr.to_string()));
        put("beta1", Some(self.adam.beta1.to_string()));
        put("beta2", Some(self.adam.beta2.to_string()));
        put("eps", Some(self.adam.eps.to_string()));
        put("threshold", Some(self.threshold.to_string()));
        put("validation_count", Some(self.validation_count.to_string()));
        put("validate_on_train", Some(self.validate_on_train.to_string()));
        put("checkpoint_every", Some(self.checkpoint_every.to_string()));
        put("cache_dir", opt(&self.cache_dir));
        put("target_size", self.target_size.map(|s| s.to_string()));
        put("clip_lo", Some(self.clip_window.0.to_string()));
        put("clip_hi", Some(self.clip_window.1.to_string()));
        put("crop", Some(self.crop.to_string()));
        put("slice", Some(self.slice.to_string()));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("preset = reduced\nepochs = 3\ncrop = center:0.8\ndataset = /tmp/x\n").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn comments_and_blank_lines() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("# a run\n\nseed = 4 # trailing\n").unwrap();
        assert_eq!(cfg.seed, 4);
    }

    #[test]
    fn bad_lines_are_numbered() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply_text("seed = 1\nepochs = many\n").unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("epochs"), "{err}");
        let err = cfg.apply_text("seed = 1\nseed = 2\n").unwrap_err().to_string();
        assert!(err.contains("duplicate"), "{err}");
        let err = cfg.apply_text("no equals sign\n").unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
    }

    #[test]
    fn dataset_expands_to_both_paths() {
        let mut cfg = RunConfig::default();
        assert!(cfg.data_paths().is_err());
        cfg.set("dataset", "/d").unwrap();
        cfg.set("reference", "/elsewhere.csv").unwrap();
        assert_eq!(cfg.data_paths().unwrap(), (PathBuf::from("/d/data"), PathBuf::from("/elsewhere.csv")));
    }

    #[test]
    fn target_size_resizes_the_model() {
        let mut cfg = RunConfig::default();
        cfg.set("preset", "reduced").unwrap();
        cfg.set("target_size", "48").unwrap();
        assert_eq!(cfg.model_config().unwrap().input_size, 48);
        assert!(cfg.preprocess_config(32).is_err());
        assert_eq!(cfg.preprocess_config(48).unwrap().target_size, 48);
    }
}
