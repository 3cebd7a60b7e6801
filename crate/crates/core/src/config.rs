//! TOML experiment configuration. Unknown keys are rejected, and the one
//! top-level `seed` feeds data generation, initialization, batching and
//! evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SynthConfig};
use crate::error::{Error, Result};
use crate::histogram::DEFAULT_CAPACITY;
use crate::losses::LossKind;
use crate::model::{Milestone, SgdConfig};
use crate::trainer::{TrainConfig, TrainMode};
use crate::weighting::WeightPolicy;

const DEFAULT_ARCFACE_MARGIN: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_snapshot_stride")]
    pub snapshot_stride: usize,
    #[serde(default = "default_log_stride")]
    pub log_stride: usize,
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub loss: LossSection,
    #[serde(default)]
    pub paradigm: ParadigmSection,
    #[serde(default)]
    pub evaluation: EvaluationSection,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_snapshot_stride() -> usize {
    2000
}

fn default_log_stride() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSection {
    Synthetic(SynthSection),
    Csv { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub classes: usize,
    pub samples_per_class: usize,
    pub input_dim: usize,
    pub spread: f64,
    pub noise_rate: f64,
    pub flip_outlier_ratio: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let d = SynthConfig::default();
        SynthSection {
            classes: d.classes,
            samples_per_class: d.samples_per_class,
            input_dim: d.input_dim,
            spread: d.spread,
            noise_rate: d.noise_rate,
            flip_outlier_ratio: d.flip_outlier_ratio,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        ModelSection {
            hidden: d.hidden,
            embedding_dim: d.embedding_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_milestones: Vec<Milestone>,
    pub total_iters: usize,
    pub batch_size: usize,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let d = SgdConfig::default();
        OptimizerSection {
            lr: d.lr,
            momentum: d.momentum,
            weight_decay: d.weight_decay,
            lr_milestones: d.lr_milestones,
            total_iters: d.total_iters,
            batch_size: d.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    /// `l2-softmax` or `arcface`.
    pub kind: String,
    /// Additive angular margin in radians; arcface only.
    pub margin: Option<f64>,
    pub scale: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection {
            kind: "l2-softmax".into(),
            margin: None,
            scale: 32.0,
        }
    }
}

impl LossSection {
    pub fn kind(&self) -> Result<LossKind> {
        match (self.kind.as_str(), self.margin) {
            ("l2-softmax", None) => Ok(LossKind::L2Softmax),
            ("l2-softmax", Some(_)) => Err(Error::Config("loss: margin only applies to arcface".into())),
            ("arcface", m) => Ok(LossKind::ArcFace {
                margin: m.unwrap_or(DEFAULT_ARCFACE_MARGIN),
            }),
            (other, _) => Err(Error::Config(format!(
                "loss: unknown kind {other:?}; expected l2-softmax or arcface"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParadigmSection {
    pub mode: TrainMode,
    pub lambda: f64,
    pub zeta: f64,
    pub sigma_divisor: f64,
    pub eps: f64,
    pub hist_capacity: usize,
}

impl Default for ParadigmSection {
    fn default() -> Self {
        let p = WeightPolicy::default();
        ParadigmSection {
            mode: TrainConfig::default().mode,
            lambda: p.lambda,
            zeta: p.zeta,
            sigma_divisor: p.sigma_divisor,
            eps: p.eps,
            hist_capacity: DEFAULT_CAPACITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    pub train_fraction: f64,
    pub verification_pairs: usize,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        EvaluationSection {
            train_fraction: d.train_fraction,
            verification_pairs: d.verification_pairs,
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates; relative CSV paths resolve against the config
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        if let DataSection::Csv { path: csv } = &mut cfg.data {
            if csv.is_relative() {
                if let Some(dir) = path.parent() {
                    *csv = dir.join(&*csv);
                }
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.synth_config() {
            s.validate()?;
        }
        self.train_config()?.validate()
    }

    pub fn synth_config(&self) -> Option<SynthConfig> {
        match &self.data {
            DataSection::Synthetic(s) => Some(SynthConfig {
                classes: s.classes,
                samples_per_class: s.samples_per_class,
                input_dim: s.input_dim,
                spread: s.spread,
                noise_rate: s.noise_rate,
                flip_outlier_ratio: s.flip_outlier_ratio,
                seed: self.seed,
            }),
            DataSection::Csv { .. } => None,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let o = &self.optimizer;
        let p = &self.paradigm;
        Ok(TrainConfig {
            hidden: self.model.hidden.clone(),
            embedding_dim: self.model.embedding_dim,
            optimizer: SgdConfig {
                lr: o.lr,
                momentum: o.momentum,
                weight_decay: o.weight_decay,
                lr_milestones: o.lr_milestones.clone(),
                total_iters: o.total_iters,
                batch_size: o.batch_size,
                seed: self.seed,
            },
            loss: self.loss.kind()?,
            scale: self.loss.scale,
            policy: WeightPolicy {
                lambda: p.lambda,
                zeta: p.zeta,
                sigma_divisor: p.sigma_divisor,
                eps: p.eps,
                ..WeightPolicy::default()
            },
            mode: p.mode,
            hist_capacity: p.hist_capacity,
            train_fraction: self.evaluation.train_fraction,
            verification_pairs: self.evaluation.verification_pairs,
            log_stride: self.log_stride,
            snapshot_stride: self.snapshot_stride,
        })
    }

    /// Generates or loads the dataset this config describes.
    pub fn dataset(&self) -> Result<Dataset> {
        match &self.data {
            DataSection::Csv { path } => Dataset::load_csv(path),
            DataSection::Synthetic(_) => {
                crate::data::generate(&self.synth_config().expect("synthetic section"))
            }
        }
    }
}
