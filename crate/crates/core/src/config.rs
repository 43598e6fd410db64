//! JSON run configuration shared by the CLI commands. Every section has
//! defaults, so an empty object `{}` is a valid config; CLI flags override
//! file values.

use crate::classifier::ClassifierTrainConfig;
use crate::dot::{DotConfig, DotTrainConfig};
use crate::error::{CoreError, Result};
use crate::kde::KdeConfig;
use crate::vqvae::{VqvaeConfig, VqvaeTrainConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub per_class: usize,
    pub seed: u64,
    pub snr_db: Option<f64>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { per_class: 100, seed: 0, snr_db: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VqvaeSection {
    pub beta: f32,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
    pub seed: u64,
    pub val_frac: f64,
}

impl Default for VqvaeSection {
    fn default() -> Self {
        let t = VqvaeTrainConfig::default();
        VqvaeSection {
            beta: VqvaeConfig::default().beta,
            epochs: t.epochs,
            batch: t.batch,
            lr: t.lr,
            seed: t.seed,
            val_frac: t.val_frac,
        }
    }
}

impl VqvaeSection {
    pub fn model(&self) -> VqvaeConfig {
        VqvaeConfig { beta: self.beta }
    }

    pub fn train(&self) -> VqvaeTrainConfig {
        VqvaeTrainConfig {
            epochs: self.epochs,
            batch: self.batch,
            lr: self.lr,
            seed: self.seed,
            val_frac: self.val_frac,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DotSection {
    /// "nano" or "large"
    pub size: String,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
    pub seed: u64,
    pub val_frac: f64,
    pub temperature: f32,
}

impl Default for DotSection {
    fn default() -> Self {
        let t = DotTrainConfig::default();
        DotSection {
            size: "nano".into(),
            epochs: t.epochs,
            batch: t.batch,
            lr: t.lr,
            seed: t.seed,
            val_frac: t.val_frac,
            temperature: 1.0,
        }
    }
}

impl DotSection {
    pub fn model(&self) -> Result<DotConfig> {
        match self.size.as_str() {
            "nano" => Ok(DotConfig::nano()),
            "large" => Ok(DotConfig::large()),
            other => Err(CoreError::InvalidArgument(format!(
                "dot.size must be \"nano\" or \"large\", got {other:?}"
            ))),
        }
    }

    pub fn train(&self) -> DotTrainConfig {
        DotTrainConfig {
            epochs: self.epochs,
            batch: self.batch,
            lr: self.lr,
            seed: self.seed,
            val_frac: self.val_frac,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub bandwidth: Option<f64>,
    pub bootstrap_iters: usize,
    pub alpha: f64,
    pub seed: u64,
    pub classifier_epochs: usize,
    pub classifier_lr: f32,
    /// abort threshold on classifier held-out accuracy; lower it for
    /// small-budget smoke runs
    pub classifier_min_accuracy: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        let k = KdeConfig::default();
        let c = ClassifierTrainConfig::default();
        EvalSection {
            bandwidth: k.bandwidth,
            bootstrap_iters: k.bootstrap_iters,
            alpha: k.alpha,
            seed: k.seed,
            classifier_epochs: c.epochs,
            classifier_lr: c.lr,
            classifier_min_accuracy: c.min_accuracy,
        }
    }
}

impl EvalSection {
    pub fn kde(&self) -> KdeConfig {
        KdeConfig {
            bandwidth: self.bandwidth,
            bootstrap_iters: self.bootstrap_iters,
            alpha: self.alpha,
            seed: self.seed,
        }
    }

    pub fn classifier(&self) -> ClassifierTrainConfig {
        ClassifierTrainConfig {
            epochs: self.classifier_epochs,
            lr: self.classifier_lr,
            min_accuracy: self.classifier_min_accuracy,
            ..Default::default()
        }
    }
}

/// Default artifact locations, overridable per command with `--out` etc.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub dataset: String,
    pub vqvae: String,
    pub tokens: String,
    pub dot: String,
    pub fakes: String,
    pub classifier: String,
    pub report: String,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            dataset: "out/real.rfds".into(),
            vqvae: "out/vqvae.rfvq".into(),
            tokens: "out/tokens.rftk".into(),
            dot: "out/dot.rfdt".into(),
            fakes: "out/fakes.rfds".into(),
            classifier: "out/classifier.rfcl".into(),
            report: "out/report.json".into(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub vqvae: VqvaeSection,
    pub dot: DotSection,
    pub eval: EvalSection,
    pub paths: PathsSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.vqvae.model().validate()?;
        self.dot.model()?.validate()?;
        if self.data.per_class == 0 {
            return Err(CoreError::InvalidArgument("data.per_class must be >= 1".into()));
        }
        if self.dot.temperature < 0.0 {
            return Err(CoreError::InvalidArgument("dot.temperature must be >= 0".into()));
        }
        Ok(())
    }

    /// Echoed into manifests and the metric report.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("RunConfig is always serializable")
    }
}
