//! Run configuration: a flat `key = value` file whose keys mirror the
//! command-line flags.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset};
use crate::distill::train::{
    LossMode, DEFAULT_BATCH, DEFAULT_BLOCK_EPOCHS, DEFAULT_BLOCK_LR, DEFAULT_EVAL_EVERY, DEFAULT_FINETUNE_EPOCHS,
    DEFAULT_FINETUNE_LR, DEFAULT_LAMBDA_LOCAL,
};
use crate::error::{Error, Result};
use crate::replacement::CandidateKind;
use crate::scheduler::Policy;

/// Where images come from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetSource {
    /// `synthetic:<samples>`
    Synthetic { samples: usize },
    /// `cifar10:<path>` or `cifar10:<path>:<limit>`
    Cifar10 { path: PathBuf, limit: Option<usize> },
}

impl fmt::Display for DatasetSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetSource::Synthetic { samples } => write!(f, "synthetic:{samples}"),
            DatasetSource::Cifar10 { path, limit: None } => write!(f, "cifar10:{}", path.display()),
            DatasetSource::Cifar10 { path, limit: Some(l) } => write!(f, "cifar10:{}:{l}", path.display()),
        }
    }
}

impl FromStr for DatasetSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("dataset `{s}` is not `synthetic:<n>` or `cifar10:<path>[:<limit>]`"));
        if let Some(n) = s.strip_prefix("synthetic:") {
            let samples = n.parse().map_err(|_| bad())?;
            return Ok(DatasetSource::Synthetic { samples });
        }
        if let Some(rest) = s.strip_prefix("cifar10:") {
            if let Some((p, l)) = rest.rsplit_once(':') {
                if let Ok(limit) = l.parse() {
                    return Ok(DatasetSource::Cifar10 {
                        path: p.into(),
                        limit: Some(limit),
                    });
                }
            }
            if rest.is_empty() {
                return Err(bad());
            }
            return Ok(DatasetSource::Cifar10 {
                path: rest.into(),
                limit: None,
            });
        }
        Err(bad())
    }
}

impl DatasetSource {
    /// Load or generate the full dataset.
    pub fn load(&self, seed: u64, threads: usize) -> Result<Dataset> {
        match self {
            DatasetSource::Synthetic { samples } => data::synthetic(*samples, seed, threads),
            DatasetSource::Cifar10 { path, limit } => data::load_cifar10(path, *limit, threads),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: String,
    pub global_seed: u64,
    pub workers: usize,
    pub policy: Policy,
    pub profile: Option<PathBuf>,
    pub teacher_epochs: usize,
    pub teacher_lr: f64,
    pub epochs_per_block: usize,
    pub eval_every: usize,
    pub block_lr: f64,
    pub max_steps: Option<usize>,
    /// `None` means teacher accuracy minus 0.02.
    pub threshold: Option<f64>,
    pub lambda_local: f64,
    pub loss_mode: LossMode,
    pub candidate: CandidateKind,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub freeze_non_replaced: bool,
    pub batch_size: usize,
    pub preprocess_threads: usize,
    pub dataset: DatasetSource,
    pub eval_fraction: f64,
    pub idle_watts: f64,
    pub active_watts: f64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: "toy_teacher".into(),
            global_seed: 42,
            workers: 1,
            policy: Policy::RoundRobin,
            profile: None,
            teacher_epochs: 15,
            teacher_lr: DEFAULT_BLOCK_LR,
            epochs_per_block: DEFAULT_BLOCK_EPOCHS,
            eval_every: DEFAULT_EVAL_EVERY,
            block_lr: DEFAULT_BLOCK_LR,
            max_steps: None,
            threshold: None,
            lambda_local: DEFAULT_LAMBDA_LOCAL,
            loss_mode: LossMode::LocalOnly,
            candidate: CandidateKind::TwoLayer,
            finetune_epochs: DEFAULT_FINETUNE_EPOCHS,
            finetune_lr: DEFAULT_FINETUNE_LR,
            freeze_non_replaced: true,
            batch_size: DEFAULT_BATCH,
            preprocess_threads: 4,
            dataset: DatasetSource::Synthetic { samples: 2000 },
            eval_fraction: 0.1,
            idle_watts: 50.0,
            active_watts: 100.0,
            output_dir: PathBuf::from("runs/latest"),
        }
    }
}

pub const KEYS: [&str; 25] = [
    "model",
    "global_seed",
    "workers",
    "policy",
    "profile",
    "teacher_epochs",
    "teacher_lr",
    "epochs_per_block",
    "eval_every",
    "block_lr",
    "max_steps",
    "threshold",
    "lambda_local",
    "loss_mode",
    "candidate",
    "finetune_epochs",
    "finetune_lr",
    "freeze_non_replaced",
    "batch_size",
    "preprocess_threads",
    "dataset",
    "eval_fraction",
    "idle_watts",
    "active_watts",
    "output_dir",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("`{key}`: cannot parse `{value}`: {e}")))
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>>
where
    T::Err: fmt::Display,
{
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn show_opt<T: fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or("none".into(), T::to_string)
}

impl RunConfig {
    /// Set one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "model" => self.model = v.to_string(),
            "global_seed" => self.global_seed = parse(key, v)?,
            "workers" => self.workers = parse(key, v)?,
            "policy" => self.policy = parse(key, v)?,
            "profile" => self.profile = parse_opt(key, v)?,
            "teacher_epochs" => self.teacher_epochs = parse(key, v)?,
            "teacher_lr" => self.teacher_lr = parse(key, v)?,
            "epochs_per_block" => self.epochs_per_block = parse(key, v)?,
            "eval_every" => self.eval_every = parse(key, v)?,
            "block_lr" => self.block_lr = parse(key, v)?,
            "max_steps" => self.max_steps = parse_opt(key, v)?,
            "threshold" => self.threshold = parse_opt(key, v)?,
            "lambda_local" => self.lambda_local = parse(key, v)?,
            "loss_mode" => self.loss_mode = parse(key, v)?,
            "candidate" => self.candidate = parse(key, v)?,
            "finetune_epochs" => self.finetune_epochs = parse(key, v)?,
            "finetune_lr" => self.finetune_lr = parse(key, v)?,
            "freeze_non_replaced" => self.freeze_non_replaced = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "preprocess_threads" => self.preprocess_threads = parse(key, v)?,
            "dataset" => self.dataset = parse(key, v)?,
            "eval_fraction" => self.eval_fraction = parse(key, v)?,
            "idle_watts" => self.idle_watts = parse(key, v)?,
            "active_watts" => self.active_watts = parse(key, v)?,
            "output_dir" => self.output_dir = v.into(),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "model" => self.model.clone(),
            "global_seed" => self.global_seed.to_string(),
            "workers" => self.workers.to_string(),
            "policy" => self.policy.to_string(),
            "profile" => show_opt(&self.profile.as_ref().map(|p| p.display())),
            "teacher_epochs" => self.teacher_epochs.to_string(),
            "teacher_lr" => self.teacher_lr.to_string(),
            "epochs_per_block" => self.epochs_per_block.to_string(),
            "eval_every" => self.eval_every.to_string(),
            "block_lr" => self.block_lr.to_string(),
            "max_steps" => show_opt(&self.max_steps),
            "threshold" => show_opt(&self.threshold),
            "lambda_local" => self.lambda_local.to_string(),
            "loss_mode" => self.loss_mode.to_string(),
            "candidate" => self.candidate.to_string(),
            "finetune_epochs" => self.finetune_epochs.to_string(),
            "finetune_lr" => self.finetune_lr.to_string(),
            "freeze_non_replaced" => self.freeze_non_replaced.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "preprocess_threads" => self.preprocess_threads.to_string(),
            "dataset" => self.dataset.to_string(),
            "eval_fraction" => self.eval_fraction.to_string(),
            "idle_watts" => self.idle_watts.to_string(),
            "active_watts" => self.active_watts.to_string(),
            "output_dir" => self.output_dir.display().to_string(),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        })
    }

    /// Apply a config file's lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            self.set(k.trim(), v).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut c = Self::default();
        c.apply_text(&text)?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("known key")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.workers == 0 {
            return fail("workers must be at least 1".into());
        }
        if self.epochs_per_block == 0 {
            return fail("epochs_per_block must be at least 1".into());
        }
        if self.eval_every == 0 || self.eval_every > self.epochs_per_block {
            return fail(format!("eval_every must be in 1..={}", self.epochs_per_block));
        }
        if let Some(t) = self.threshold {
            if !(t.is_finite() && t >= 0.0) {
                return fail(format!("threshold {t} must be non-negative"));
            }
        }
        if !(self.lambda_local >= 0.0 && self.lambda_local.is_finite()) {
            return fail("lambda_local must be non-negative".into());
        }
        for (name, lr) in [
            ("teacher_lr", self.teacher_lr),
            ("block_lr", self.block_lr),
            ("finetune_lr", self.finetune_lr),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.batch_size == 0 || self.preprocess_threads == 0 {
            return fail("batch_size and preprocess_threads must be positive".into());
        }
        if !(0.0..1.0).contains(&self.eval_fraction) || self.eval_fraction == 0.0 {
            return fail("eval_fraction must be in (0, 1)".into());
        }
        if !(self.idle_watts >= 0.0 && self.active_watts >= 0.0) {
            return fail("wattages must be non-negative".into());
        }
        Ok(())
    }

    /// The train/eval split this config describes.
    pub fn load_splits(&self) -> Result<(Dataset, Dataset)> {
        let all = self.dataset.load(data::derive_seed(self.global_seed, 100), self.preprocess_threads)?;
        all.split_stratified(self.eval_fraction, data::derive_seed(self.global_seed, 101))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_is_lossless() {
        let mut c = RunConfig::default();
        c.threshold = Some(0.1 + 0.2);
        c.profile = Some("p.csv".into());
        c.dataset = DatasetSource::Cifar10 {
            path: "/d/cifar".into(),
            limit: Some(500),
        };
        c.policy = Policy::WorkStealing;
        c.max_steps = Some(7);
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        let mut d = RunConfig::default();
        d.apply_text(&RunConfig::default().to_text()).unwrap();
        assert_eq!(d, RunConfig::default());
    }

    #[test]
    fn errors_name_the_line() {
        let mut c = RunConfig::default();
        let e = c.apply_text("workers = 2\n\nbogus = 1\n").unwrap_err().to_string();
        assert!(e.contains("line 3") && e.contains("bogus"), "{e}");
        assert!(c.apply_text("workers = two").is_err());
        assert!(c.apply_text("workers 2").is_err());
        c.apply_text("# comment\nworkers = 4 # trailing\n").unwrap();
        assert_eq!(c.workers, 4);
    }

    #[test]
    fn dataset_sources() {
        assert_eq!(
            "synthetic:300".parse::<DatasetSource>().unwrap(),
            DatasetSource::Synthetic { samples: 300 }
        );
        assert_eq!(
            "cifar10:/x/y".parse::<DatasetSource>().unwrap(),
            DatasetSource::Cifar10 {
                path: "/x/y".into(),
                limit: None
            }
        );
        assert!("mnist".parse::<DatasetSource>().is_err());
        assert!("synthetic:x".parse::<DatasetSource>().is_err());
    }

    #[test]
    fn validation() {
        assert!(RunConfig::default().validate().is_ok());
        let mut c = RunConfig::default();
        c.eval_every = 31;
        assert!(c.validate().is_err());
        c = RunConfig::default();
        c.workers = 0;
        assert!(c.validate().is_err());
    }
}
