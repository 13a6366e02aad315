use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ModelKind, ModelSpec};
use crate::optim::{eta_for_elr, HyperParams, ScheduleSpec};
use crate::regularizers::{RegKind, DEFAULT_LAMBDA2};
use crate::tasks::TaskParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridMode {
    /// Cells are (elr, momentum, wd); the learning rate is derived.
    FixElr,
    /// Cells are (eta, momentum, wd).
    FixEta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridAxes {
    pub mode: GridMode,
    #[serde(default)]
    pub elr_values: Vec<f64>,
    #[serde(default)]
    pub eta_values: Vec<f64>,
    pub momentum_values: Vec<f64>,
    /// Regularization strength per cell; an empty list uses `reg.lambda1`.
    #[serde(default)]
    pub wd_values: Vec<f64>,
    pub batch_size: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub epochs: usize,
    #[serde(default)]
    pub milestones: Vec<usize>,
    #[serde(default = "default_factor")]
    pub factor: f64,
}

fn default_factor() -> f64 {
    0.1
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            milestones: vec![30, 50],
            factor: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    #[serde(default)]
    pub hidden: usize,
    #[serde(default)]
    pub normalized: bool,
}

impl ModelConfig {
    pub fn spec(&self, task: &TaskParams) -> ModelSpec {
        ModelSpec {
            kind: self.kind,
            input_dim: task.dim,
            hidden: self.hidden,
            classes: task.classes,
            normalized: self.normalized,
        }
    }
}

/// How an L2 penalty enters the update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayMode {
    /// `- eta_t * lambda * theta` inside the parameter update.
    #[default]
    Decoupled,
    /// `lambda * theta` added to the loss gradient.
    Penalty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegConfig {
    #[serde(default)]
    pub kind: RegKind,
    #[serde(default)]
    pub lambda1: f64,
    #[serde(default = "default_lambda2")]
    pub lambda2: f64,
    /// Only meaningful for `l2`; `l2sp` always uses the penalty form.
    #[serde(default)]
    pub decay: DecayMode,
}

fn default_lambda2() -> f64 {
    DEFAULT_LAMBDA2
}

impl Default for RegConfig {
    fn default() -> Self {
        Self {
            kind: RegKind::L2,
            lambda1: 1e-4,
            lambda2: DEFAULT_LAMBDA2,
            decay: DecayMode::Decoupled,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    Finetune,
    Scratch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub elr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    /// Epochs without a new best validation error before stopping.
    pub patience: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            elr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            max_epochs: 200,
            patience: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitConfig {
    pub mode: InitMode,
    #[serde(default = "default_head_std")]
    pub head_std: f64,
    #[serde(default)]
    pub pretrain: PretrainConfig,
}

fn default_head_std() -> f64 {
    0.01
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            mode: InitMode::Finetune,
            head_std: default_head_std(),
            pretrain: PretrainConfig::default(),
        }
    }
}

/// A complete run configuration: grid axes, schedule, model, task,
/// regularizer and initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub grid: GridAxes,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    pub model: ModelConfig,
    pub task: TaskParams,
    #[serde(default)]
    pub reg: RegConfig,
    #[serde(default)]
    pub init: InitConfig,
    /// Records wall time per trial; off by default so reruns are byte-identical.
    #[serde(default)]
    pub record_timing: bool,
}

/// One point of the grid before a seed is attached.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub index: usize,
    pub hyperparams: HyperParams,
}

impl GridSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn model_spec(&self) -> ModelSpec {
        self.model.spec(&self.task)
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        let lr_axis = match g.mode {
            GridMode::FixElr => &g.elr_values,
            GridMode::FixEta => &g.eta_values,
        };
        if lr_axis.is_empty() {
            return Err(Error::Input(format!("{:?} grid needs learning-rate values", g.mode)));
        }
        if g.momentum_values.is_empty() || g.seeds.is_empty() {
            return Err(Error::Input("grid needs momentum values and seeds".into()));
        }
        if g.batch_size == 0 {
            return Err(Error::Input("batch size must be positive".into()));
        }
        self.task.validate()?;
        self.model_spec().validate()?;
        if self.reg.kind == RegKind::L2sp && self.init.mode == InitMode::Scratch {
            return Err(Error::Input("l2sp needs a pre-trained starting point".into()));
        }
        if self.init.mode == InitMode::Finetune && self.model.kind == ModelKind::Linear {
            return Err(Error::Input("a linear model has no body to fine-tune".into()));
        }
        for cell in self.cells()? {
            cell.hyperparams.validate()?;
        }
        Ok(())
    }

    fn schedule(&self, eta: f64) -> Result<ScheduleSpec> {
        ScheduleSpec::new(
            eta,
            self.schedule.milestones.clone(),
            self.schedule.factor,
            self.schedule.epochs,
        )
    }

    fn wd_axis(&self) -> Vec<f64> {
        if self.grid.wd_values.is_empty() {
            vec![self.reg.lambda1]
        } else {
            self.grid.wd_values.clone()
        }
    }

    /// Expands the grid in learning-rate, momentum, weight-decay order.
    pub fn cells(&self) -> Result<Vec<Cell>> {
        let g = &self.grid;
        let lr_axis = match g.mode {
            GridMode::FixElr => &g.elr_values,
            GridMode::FixEta => &g.eta_values,
        };
        let mut cells = Vec::new();
        for &lr in lr_axis {
            for &momentum in &g.momentum_values {
                let eta = match g.mode {
                    GridMode::FixElr => eta_for_elr(lr, momentum),
                    GridMode::FixEta => lr,
                };
                for wd in self.wd_axis() {
                    cells.push(Cell {
                        index: cells.len(),
                        hyperparams: HyperParams {
                            eta,
                            momentum,
                            weight_decay: wd,
                            batch_size: g.batch_size,
                            schedule: self.schedule(eta)?,
                        },
                    });
                }
            }
        }
        Ok(cells)
    }
}
