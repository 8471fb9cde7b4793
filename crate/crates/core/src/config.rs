//! Run configuration as flat `key = value` text.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys,
//! repeated keys and malformed values are errors naming the key. Keys and
//! defaults:
//!
//! | key | default |
//! |---|---|
//! | `dataset_path` | required; a CSV path or `synthetic:<variant>` |
//! | `dataset_name` | file stem of `dataset_path` (or the synthetic variant) |
//! | `task` | `forecast` (`forecast` or `classify`) |
//! | `seq_len` | 512 |
//! | `pred_len` | 96 (forecast only) |
//! | `label_column` | `label` (classify only) |
//! | `patch_len`, `stride` | 12 for forecast, 8 for classify |
//! | `d_model` | 128 |
//! | `windows` | `2,5` |
//! | `learner` | `linear` |
//! | `dropout` | 0.1 |
//! | `mlp_ratio` | 1 |
//! | `beta` | 0.3 |
//! | `gamma` | 0.1 |
//! | `alpha_init` | 0.01 |
//! | `mask_ratio` | 0.4 |
//! | `lr` | 1e-4 (pretraining) |
//! | `finetune_lr` | value of `lr` |
//! | `epochs` | 20 (pretraining) |
//! | `finetune_epochs` | 10 |
//! | `batch_size` | 32 look-back positions per step |
//! | `max_batches` | 0 (no cap on pretraining steps per epoch) |
//! | `finetune_max_batches` | 0 (no cap) |
//! | `eval_positions` | 0 (evaluate every window) |
//! | `patience` | 5 |
//! | `probe` | false |
//! | `seed` | 2024 |
//! | `output_dir` | `runs/<dataset_name>` |

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::data::{self, Dataset, DatasetSpec};
use crate::dcl::{DclConfig, LearnerKind};
use crate::error::{Error, Result};
use crate::finetune::FinetuneConfig;
use crate::model::ModelConfig;
use crate::pretrain::PretrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Forecast,
    Classify,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Forecast => "forecast",
            Task::Classify => "classify",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset_path: String,
    pub dataset_name: String,
    pub task: Task,
    pub seq_len: usize,
    pub pred_len: usize,
    pub label_column: String,
    pub patch_len: usize,
    pub stride: usize,
    pub d_model: usize,
    pub windows: Vec<usize>,
    pub learner: LearnerKind,
    pub dropout: f64,
    pub mlp_ratio: usize,
    pub beta: f64,
    pub gamma: f64,
    pub alpha_init: f64,
    pub mask_ratio: f64,
    pub lr: f64,
    pub finetune_lr: f64,
    pub epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub max_batches: usize,
    pub finetune_max_batches: usize,
    pub eval_positions: usize,
    pub patience: usize,
    pub probe: bool,
    pub seed: u64,
    pub output_dir: PathBuf,
}

const KEYS: &[&str] = &[
    "dataset_path",
    "dataset_name",
    "task",
    "seq_len",
    "pred_len",
    "label_column",
    "patch_len",
    "stride",
    "d_model",
    "windows",
    "learner",
    "dropout",
    "mlp_ratio",
    "beta",
    "gamma",
    "alpha_init",
    "mask_ratio",
    "lr",
    "finetune_lr",
    "epochs",
    "finetune_epochs",
    "batch_size",
    "max_batches",
    "finetune_max_batches",
    "eval_positions",
    "patience",
    "probe",
    "seed",
    "output_dir",
];

/// Keys that fix the shapes of the learned parameters.
pub const STRUCTURAL_KEYS: &[&str] = &["seq_len", "patch_len", "stride", "d_model", "windows", "learner", "mlp_ratio"];

fn parse_value<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{raw}`")))
}

fn parse_windows(raw: &str) -> Result<Vec<usize>> {
    raw.split(',').map(|w| parse_value("windows", w.trim())).collect()
}

/// Splits `key = value` lines into a map.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config {
                field: format!("line {}", i + 1),
                message: format!("expected `key = value`, got `{line}`"),
            });
        };
        let key = k.trim().to_string();
        if !KEYS.contains(&key.as_str()) {
            return Err(Error::config(&key, "unknown key"));
        }
        if map.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(Error::config(&key, "given more than once"));
        }
    }
    Ok(map)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let map = parse_pairs(text)?;
        let get = |k: &str| map.get(k).map(String::as_str);
        fn or<T: std::str::FromStr>(v: Option<&str>, key: &str, default: T) -> Result<T> {
            v.map_or(Ok(default), |raw| parse_value(key, raw))
        }
        let dataset_path = get("dataset_path")
            .filter(|s| !s.is_empty())
            .ok_or_else(|| Error::config("dataset_path", "is required"))?
            .to_string();
        let task = match get("task").unwrap_or("forecast") {
            "forecast" => Task::Forecast,
            "classify" => Task::Classify,
            other => return Err(Error::config("task", format!("`{other}` is not forecast or classify"))),
        };
        let dataset_name = match get("dataset_name") {
            Some(n) => n.to_string(),
            None => default_name(&dataset_path),
        };
        let patch_default = match task {
            Task::Forecast => 12,
            Task::Classify => 8,
        };
        let lr = or(get("lr"), "lr", 1e-4)?;
        let cfg = RunConfig {
            task,
            seq_len: or(get("seq_len"), "seq_len", 512)?,
            pred_len: match task {
                Task::Forecast => or(get("pred_len"), "pred_len", 96)?,
                Task::Classify => 0,
            },
            label_column: get("label_column").unwrap_or("label").to_string(),
            patch_len: or(get("patch_len"), "patch_len", patch_default)?,
            stride: or(get("stride"), "stride", patch_default)?,
            d_model: or(get("d_model"), "d_model", 128)?,
            windows: parse_windows(get("windows").unwrap_or("2,5"))?,
            learner: get("learner").unwrap_or("linear").parse()?,
            dropout: or(get("dropout"), "dropout", 0.1)?,
            mlp_ratio: or(get("mlp_ratio"), "mlp_ratio", 1)?,
            beta: or(get("beta"), "beta", 0.3)?,
            gamma: or(get("gamma"), "gamma", 0.1)?,
            alpha_init: or(get("alpha_init"), "alpha_init", 0.01)?,
            mask_ratio: or(get("mask_ratio"), "mask_ratio", 0.4)?,
            lr,
            finetune_lr: or(get("finetune_lr"), "finetune_lr", lr)?,
            epochs: or(get("epochs"), "epochs", 20)?,
            finetune_epochs: or(get("finetune_epochs"), "finetune_epochs", 10)?,
            batch_size: or(get("batch_size"), "batch_size", 32)?,
            max_batches: or(get("max_batches"), "max_batches", 0)?,
            finetune_max_batches: or(get("finetune_max_batches"), "finetune_max_batches", 0)?,
            eval_positions: or(get("eval_positions"), "eval_positions", 0)?,
            patience: or(get("patience"), "patience", 5)?,
            probe: or(get("probe"), "probe", false)?,
            seed: or(get("seed"), "seed", 2024)?,
            output_dir: get("output_dir")
                .map(PathBuf::from)
                .unwrap_or_else(|| Path::new("runs").join(&dataset_name)),
            dataset_path,
            dataset_name,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len < 2 {
            return Err(Error::config("seq_len", "must be at least 2"));
        }
        if self.task == Task::Forecast && self.pred_len == 0 {
            return Err(Error::config("pred_len", "must be positive for forecasting"));
        }
        if self.dataset_name.is_empty() {
            return Err(Error::config("dataset_name", "must not be empty"));
        }
        if self.epochs == 0 && self.finetune_epochs == 0 {
            return Err(Error::config("epochs", "epochs and finetune_epochs cannot both be 0"));
        }
        if self.patience == 0 {
            return Err(Error::config("patience", "must be positive"));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::config("output_dir", "must not be empty"));
        }
        self.model_config().validate()?;
        self.pretrain_config().validate()?;
        self.finetune_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            seq_len: self.seq_len,
            patch_len: self.patch_len,
            stride: self.stride,
            alpha_init: self.alpha_init,
            dcl: DclConfig {
                d_model: self.d_model,
                windows: self.windows.clone(),
                learner: self.learner,
                dropout: self.dropout,
                mlp_ratio: self.mlp_ratio,
            },
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            gamma: self.gamma,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            mask_ratio: self.mask_ratio,
            beta: self.beta,
            seed: self.seed,
            max_batches: (self.max_batches > 0).then_some(self.max_batches),
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            lr: self.finetune_lr,
            epochs: self.finetune_epochs,
            batch_size: self.batch_size,
            patience: self.patience,
            probe: self.probe,
            seed: self.seed,
            max_batches: (self.finetune_max_batches > 0).then_some(self.finetune_max_batches),
            eval_positions: (self.eval_positions > 0).then_some(self.eval_positions),
        }
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        match self.task {
            Task::Forecast => DatasetSpec::forecasting(&self.dataset_name, self.seq_len, self.pred_len),
            Task::Classify => DatasetSpec::classification(&self.dataset_name, self.seq_len, &self.label_column),
        }
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let spec = self.dataset_spec();
        match self.dataset_path.strip_prefix("synthetic:") {
            Some(variant) => data::synthetic::load(variant, &spec),
            None => data::load_csv(&self.dataset_path, &spec),
        }
    }

    /// Every key with its resolved value, one `key = value` line each, in a
    /// fixed order. Parsing the echo yields the same configuration.
    pub fn echo(&self) -> String {
        let windows: Vec<String> = self.windows.iter().map(usize::to_string).collect();
        let values: Vec<String> = vec![
            self.dataset_path.clone(),
            self.dataset_name.clone(),
            self.task.as_str().into(),
            self.seq_len.to_string(),
            self.pred_len.to_string(),
            self.label_column.clone(),
            self.patch_len.to_string(),
            self.stride.to_string(),
            self.d_model.to_string(),
            windows.join(","),
            self.learner.to_string(),
            self.dropout.to_string(),
            self.mlp_ratio.to_string(),
            self.beta.to_string(),
            self.gamma.to_string(),
            self.alpha_init.to_string(),
            self.mask_ratio.to_string(),
            self.lr.to_string(),
            self.finetune_lr.to_string(),
            self.epochs.to_string(),
            self.finetune_epochs.to_string(),
            self.batch_size.to_string(),
            self.max_batches.to_string(),
            self.finetune_max_batches.to_string(),
            self.eval_positions.to_string(),
            self.patience.to_string(),
            self.probe.to_string(),
            self.seed.to_string(),
            self.output_dir.display().to_string(),
        ];
        KEYS.iter()
            .zip(values)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Structural values keyed by name, as they appear in the echo.
    pub fn structural(&self) -> Vec<(&'static str, String)> {
        let echo = self.echo();
        let map = parse_pairs(&echo).expect("echo is well formed");
        STRUCTURAL_KEYS.iter().map(|&k| (k, map[k].clone())).collect()
    }
}

fn default_name(path: &str) -> String {
    match path.strip_prefix("synthetic:") {
        Some(variant) => variant.to_string(),
        None => Path::new(path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_task() {
        let f = RunConfig::parse("dataset_path = synthetic:sine").unwrap();
        assert_eq!((f.patch_len, f.stride, f.pred_len), (12, 12, 96));
        assert_eq!(f.windows, vec![2, 5]);
        assert_eq!((f.beta, f.gamma, f.alpha_init, f.lr), (0.3, 0.1, 0.01, 1e-4));
        assert_eq!(f.output_dir, Path::new("runs/sine"));
        let c = RunConfig::parse("dataset_path = synthetic:ramps\ntask = classify").unwrap();
        assert_eq!((c.patch_len, c.stride, c.pred_len), (8, 8, 0));
    }

    #[test]
    fn echo_round_trips() {
        let c = RunConfig::parse("dataset_path = data/x.csv\nwindows = 4,8\nlearner = mlp\nfinetune_lr = 0.001\n").unwrap();
        assert_eq!(c.dataset_name, "x");
        let echo = c.echo();
        assert_eq!(echo.lines().count(), KEYS.len());
        assert_eq!(RunConfig::parse(&echo).unwrap(), c);
    }

    #[test]
    fn errors_name_the_field() {
        let cases = [
            ("dataset_path = a.csv\nbeta = 0", "beta"),
            ("dataset_path = a.csv\nseq_len = x", "seq_len"),
            ("dataset_path = a.csv\nbogus = 1", "bogus"),
            ("dataset_path = a.csv\nwindows = 5,2", "windows"),
            ("dataset_path = a.csv\nmask_ratio = 1", "mask_ratio"),
            ("seq_len = 10", "dataset_path"),
            ("dataset_path = a.csv\nseed = 1\nseed = 2", "seed"),
            ("dataset_path = a.csv\nstride = 13", "stride"),
        ];
        for (text, field) in cases {
            match RunConfig::parse(text) {
                Err(Error::Config { field: f, .. }) => assert_eq!(f, field, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn comments_and_blank_lines() {
        let c = RunConfig::parse("# run\n\ndataset_path = synthetic:sine\n  # d\nd_model = 16\n").unwrap();
        assert_eq!(c.d_model, 16);
    }
}
