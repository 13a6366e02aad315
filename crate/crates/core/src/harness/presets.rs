//! Named grids. Schedules are scaled down for synthetic tasks: the 300-epoch
//! fine-tuning schedule with decays at 150 and 250 becomes 60 epochs with
//! decays at 30 and 50.

use super::config::{DecayMode, GridAxes, GridMode, GridSpec, InitConfig, ModelConfig, RegConfig, ScheduleConfig};
use crate::error::{Error, Result};
use crate::models::ModelKind;
use crate::regularizers::{RegKind, DEFAULT_LAMBDA2};
use crate::tasks::TaskParams;

pub const PRESETS: [&str; 3] = ["desk-default", "paper-default", "l2sp-protocol"];

fn desk_task() -> TaskParams {
    TaskParams {
        classes: 5,
        dim: 20,
        delta: 1.0,
        n_per_class: 100,
        sigma: 2.0,
    }
}

fn desk_model() -> ModelConfig {
    ModelConfig {
        kind: ModelKind::Mlp,
        hidden: 32,
        normalized: true,
    }
}

pub fn preset(name: &str) -> Result<GridSpec> {
    let spec = match name {
        // The single default cell: eta 0.01, momentum 0.9, weight decay 1e-4.
        "desk-default" => GridSpec {
            grid: GridAxes {
                mode: GridMode::FixEta,
                elr_values: vec![],
                eta_values: vec![0.01],
                momentum_values: vec![0.9],
                wd_values: vec![1e-4],
                batch_size: 32,
                seeds: vec![0],
            },
            schedule: ScheduleConfig::default(),
            model: desk_model(),
            task: desk_task(),
            reg: RegConfig::default(),
            init: InitConfig::default(),
            record_timing: false,
        },
        // Full learning-rate x momentum x weight-decay search. Each momentum
        // value appears once (0.9 is not repeated).
        "paper-default" => GridSpec {
            grid: GridAxes {
                mode: GridMode::FixEta,
                elr_values: vec![],
                eta_values: vec![0.1, 0.05, 0.01, 0.005, 0.001, 0.0001],
                momentum_values: vec![0.99, 0.95, 0.9, 0.8, 0.0],
                wd_values: vec![0.0, 0.0001, 0.0005, 0.001],
                batch_size: 32,
                seeds: vec![0],
            },
            schedule: ScheduleConfig::default(),
            model: desk_model(),
            task: desk_task(),
            reg: RegConfig::default(),
            init: InitConfig::default(),
            record_timing: false,
        },
        // L2-SP comparison: batch 64, momentum 0.9, one decay at two thirds of
        // training, constant lambda2.
        "l2sp-protocol" => GridSpec {
            grid: GridAxes {
                mode: GridMode::FixEta,
                elr_values: vec![],
                eta_values: vec![0.02, 0.01, 0.005, 0.001, 0.0001],
                momentum_values: vec![0.9],
                wd_values: vec![0.1, 0.01, 0.001, 0.0001],
                batch_size: 64,
                seeds: vec![0],
            },
            schedule: ScheduleConfig {
                epochs: 60,
                milestones: vec![40],
                factor: 0.1,
            },
            model: desk_model(),
            task: desk_task(),
            reg: RegConfig {
                kind: RegKind::L2sp,
                lambda1: 0.01,
                lambda2: DEFAULT_LAMBDA2,
                decay: DecayMode::Penalty,
            },
            init: InitConfig::default(),
            record_timing: false,
        },
        other => {
            return Err(Error::Input(format!(
                "unknown preset '{other}', expected one of {}",
                PRESETS.join(", ")
            )))
        }
    };
    spec.validate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_presets_validate() {
        for name in PRESETS {
            preset(name).unwrap();
        }
        assert!(preset("nope").is_err());
    }

    #[test]
    fn paper_default_cells() {
        let spec = preset("paper-default").unwrap();
        let cells = spec.cells().unwrap();
        assert_eq!(cells.len(), 6 * 5 * 4);
        let has_default = cells.iter().any(|c| {
            let h = &c.hyperparams;
            h.eta == 0.01 && h.momentum == 0.9 && h.weight_decay == 1e-4
        });
        assert!(has_default);
        assert_eq!(cells[0].hyperparams.schedule.milestones, vec![30, 50]);
        assert_eq!(cells[0].hyperparams.schedule.total_epochs, 60);
    }

    #[test]
    fn l2sp_protocol_grid() {
        let spec = preset("l2sp-protocol").unwrap();
        assert_eq!(spec.cells().unwrap().len(), 20);
        assert_eq!(spec.grid.batch_size, 64);
        assert_eq!(spec.reg.lambda2, 0.01);
    }
}
