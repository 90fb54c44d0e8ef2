//! Strict JSON run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use igdm_core::attack::{AttackConfig, InnerKind};
use igdm_core::data::{gen_synthetic, Dataset, SyntheticSpec};
use igdm_core::diagnostics::LinearityProbeConfig;
use igdm_core::loss::{AdKind, LossSpec};
use igdm_core::trainer::{DiagnosticsConfig, TrainConfig};
use igdm_core::{Activation, Architecture};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::idx::load_idx;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub attack: AttackSection,
    #[serde(default = "default_loss")]
    pub loss: LossSpec,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub probe: LinearityProbeConfig,
}

fn default_loss() -> LossSpec {
    LossSpec::new(AdKind::PgdAt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idx: Option<IdxSource>,
    /// Half-open sample range `[start, end)` taken from the source.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSource {
    pub images: PathBuf,
    pub labels: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    /// Initial (train) or evaluated (probe, eval) parameters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackParams {
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    pub random_start: bool,
}

impl AttackParams {
    fn from_core(a: &AttackConfig) -> Self {
        AttackParams {
            epsilon: a.epsilon,
            step_size: a.step_size,
            steps: a.steps,
            random_start: a.random_start,
        }
    }

    pub fn with_clamp(&self, clamp: (f64, f64)) -> AttackConfig {
        AttackConfig {
            epsilon: self.epsilon,
            step_size: self.step_size,
            steps: self.steps,
            random_start: self.random_start,
            clamp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub inner: InnerKind,
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    pub random_start: bool,
    pub eval: AttackParams,
}

impl AttackSection {
    pub fn training(&self) -> AttackParams {
        AttackParams {
            epsilon: self.epsilon,
            step_size: self.step_size,
            steps: self.steps,
            random_start: self.random_start,
        }
    }
}

impl Default for AttackSection {
    fn default() -> Self {
        let unit = (0.0, 1.0);
        let t = AttackConfig::training(unit);
        AttackSection {
            inner: InnerKind::PgdCe,
            epsilon: t.epsilon,
            step_size: t.step_size,
            steps: t.steps,
            random_start: t.random_start,
            eval: AttackParams::from_core(&AttackConfig::evaluation(unit)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    #[serde(default)]
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<DiagnosticsConfig>,
    #[serde(default)]
    pub force_aux: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 50,
            batch_size: 128,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_drop_epochs: Vec::new(),
            lr_drop_factor: 0.1,
            diagnostics: None,
            force_aux: false,
        }
    }
}

fn absolutize(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| LabError::Config(e.to_string()))
    }

    /// Parses `path` and resolves every relative path against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LabError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = RunConfig::from_json(&text)?;
        let base = path
            .canonicalize()
            .ok()
            .and_then(|p| p.parent().map(Path::to_path_buf))
            .unwrap_or_else(|| PathBuf::from("."));
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        absolutize(base, &mut self.output_dir);
        if let Some(idx) = &mut self.data.idx {
            absolutize(base, &mut idx.images);
            absolutize(base, &mut idx.labels);
        }
        for p in [&mut self.model.checkpoint, &mut self.model.teacher_checkpoint].into_iter().flatten() {
            absolutize(base, p);
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn dataset(&self) -> Result<Dataset> {
        let full = match (&self.data.synthetic, &self.data.idx) {
            (Some(s), None) => gen_synthetic(s)?,
            (None, Some(i)) => load_idx(&i.images, &i.labels, i.num_classes)?,
            _ => return Err(LabError::Config("data needs exactly one of synthetic or idx".into())),
        };
        match self.data.range {
            None => Ok(full),
            Some((start, end)) if start < end && end <= full.len() => {
                Ok(full.subset(&(start..end).collect::<Vec<_>>()))
            }
            Some((start, end)) => Err(LabError::Config(format!(
                "data range [{start}, {end}) outside the {} available samples",
                full.len()
            ))),
        }
    }

    pub fn architecture(&self, data: &Dataset) -> Architecture {
        Architecture::new(data.dim(), self.model.hidden.clone(), data.num_classes, self.model.activation)
    }

    pub fn train_config(&self, data: &Dataset) -> Result<TrainConfig> {
        let t = &self.train;
        let cfg = TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            lr_drop_epochs: t.lr_drop_epochs.clone(),
            lr_drop_factor: t.lr_drop_factor,
            seed: self.seed,
            loss: self.loss.clone(),
            inner_kind: self.attack.inner,
            inner_attack: self.attack.training().with_clamp(data.input_range),
            eval_attack: self.eval_attack(data),
            eval_inner: InnerKind::PgdCe,
            diagnostics: t.diagnostics.clone(),
            force_aux: t.force_aux,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn eval_attack(&self, data: &Dataset) -> AttackConfig {
        self.attack.eval.with_clamp(data.input_range)
    }
}
