use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Cell, DecayMode, GridSpec, InitMode, PretrainConfig};
use super::results::{RegRecord, TrialResult};
use crate::error::{Error, Result};
use crate::models::{error_rate, loss_and_grad, Batch, ModelSpec, ParamVector};
use crate::optim::{effective_wd, elr, eta_for_elr, nag_step, schedule_eta, HyperParams, OptimState, ScheduleSpec};
use crate::regularizers::{add_penalty_gradient, normalized_l2, normalized_l2sp, RegKind, RegularizerSpec};
use crate::tasks::{Dataset, SyntheticTask};

const STREAM_PRETRAIN_INIT: u64 = 101;
const STREAM_PRETRAIN_SHUFFLE: u64 = 102;
const STREAM_SCRATCH_INIT: u64 = 103;
const STREAM_HEAD_INIT: u64 = 104;
const STREAM_SHUFFLE: u64 = 105;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// How the penalty and the decoupled decay are applied during one run.
struct UpdateRule {
    /// Added to the loss gradient at the lookahead point.
    penalty: Option<RegularizerSpec>,
    /// Decoupled decay handed to the optimizer.
    hyperparams: HyperParams,
}

/// Shuffled minibatch Nesterov SGD over one dataset, with gradients taken at
/// the lookahead point.
struct EpochLoop<'a> {
    model: &'a ModelSpec,
    data: &'a Dataset,
    rule: UpdateRule,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    x_buf: Vec<f64>,
    y_buf: Vec<usize>,
}

impl<'a> EpochLoop<'a> {
    fn new(model: &'a ModelSpec, data: &'a Dataset, rule: UpdateRule, rng: ChaCha8Rng) -> Self {
        Self {
            model,
            data,
            rule,
            rng,
            order: (0..data.len()).collect(),
            x_buf: Vec::new(),
            y_buf: Vec::new(),
        }
    }

    fn run(&mut self, state: &mut OptimState, eta_t: f64) -> Result<()> {
        self.order.shuffle(&mut self.rng);
        let h = &self.rule.hyperparams;
        for chunk in self.order.chunks(h.batch_size) {
            self.data.gather_into(chunk, &mut self.x_buf, &mut self.y_buf);
            let lookahead = state.lookahead(h.momentum);
            let (_, mut grad) = loss_and_grad(self.model, &lookahead, &Batch::new(&self.x_buf, &self.y_buf))
                .map_err(|e| at_step(e, state.step))?;
            if let Some(spec) = &self.rule.penalty {
                add_penalty_gradient(spec, &lookahead, &mut grad)?;
            }
            nag_step(state, &grad, h, eta_t)?;
            if state.theta.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    step: state.step,
                    message: "parameters became non-finite".into(),
                });
            }
        }
        Ok(())
    }
}

fn at_step(e: Error, step: u64) -> Error {
    match e {
        Error::Numeric { message, .. } => Error::Numeric { step, message },
        other => other,
    }
}

/// Trains from a seeded initialization on the source task until validation
/// error has not improved for `patience` epochs, and returns the parameters of
/// the best epoch.
pub fn pretrain(
    model: &ModelSpec,
    source: &SyntheticTask,
    batch_size: usize,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<ParamVector> {
    let init = ParamVector::init(model, &mut stream(seed, STREAM_PRETRAIN_INIT));
    let eta = eta_for_elr(cfg.elr, cfg.momentum);
    let hyperparams = HyperParams {
        eta,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        batch_size,
        schedule: ScheduleSpec::new(eta, vec![], 1.0, cfg.max_epochs.max(1))?,
    };
    hyperparams.validate()?;
    let rule = UpdateRule {
        penalty: None,
        hyperparams,
    };
    let mut looper = EpochLoop::new(model, &source.train, rule, stream(seed, STREAM_PRETRAIN_SHUFFLE));
    let mut state = OptimState::new(init.values.clone());
    let mut best = (
        error_rate(model, &state.theta, &source.val.batch())?,
        state.theta.clone(),
    );
    let mut since_best = 0;
    for _ in 0..cfg.max_epochs {
        looper.run(&mut state, eta)?;
        let val = error_rate(model, &state.theta, &source.val.batch())?;
        if val < best.0 {
            best = (val, state.theta.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    log::debug!("pretrained seed {seed}: best source val error {:.4}", best.0);
    ParamVector::from_values(model, best.1)
}

/// Starting parameters for a trial.
pub fn initial_params(
    spec: &GridSpec,
    model: &ModelSpec,
    pretrained: Option<&ParamVector>,
    seed: u64,
) -> Result<ParamVector> {
    match spec.init.mode {
        InitMode::Scratch => Ok(ParamVector::init(model, &mut stream(seed, STREAM_SCRATCH_INIT))),
        InitMode::Finetune => {
            let mut p = pretrained
                .cloned()
                .ok_or_else(|| Error::Input("fine-tuning trial without pre-trained parameters".into()))?;
            p.reinit_head(spec.init.head_std, &mut stream(seed, STREAM_HEAD_INIT));
            Ok(p)
        }
    }
}

/// Trains one grid cell on the target task.
pub fn run_trial(
    spec: &GridSpec,
    cell: &Cell,
    seed: u64,
    target: &SyntheticTask,
    pretrained: Option<&ParamVector>,
) -> Result<TrialResult> {
    let started = Instant::now();
    let model = spec.model_spec();
    let h = cell.hyperparams.clone();
    let start = initial_params(spec, &model, pretrained, seed)?;
    let mask = start.shared_mask();
    let len = start.values.len();

    let (penalty, decoupled, reg) = match spec.reg.kind {
        RegKind::None => (None, 0.0, RegRecord::new(RegKind::None, 0.0, 0.0, None)),
        RegKind::L2 => match spec.reg.decay {
            DecayMode::Decoupled => (
                None,
                h.weight_decay,
                RegRecord::new(RegKind::L2, h.weight_decay, 0.0, Some(DecayMode::Decoupled)),
            ),
            DecayMode::Penalty => (
                Some(RegularizerSpec::l2(h.weight_decay, len)),
                0.0,
                RegRecord::new(RegKind::L2, h.weight_decay, 0.0, Some(DecayMode::Penalty)),
            ),
        },
        RegKind::L2sp => (
            Some(RegularizerSpec::l2sp(
                h.weight_decay,
                spec.reg.lambda2,
                &start.values,
                mask,
            )?),
            0.0,
            RegRecord::new(
                RegKind::L2sp,
                h.weight_decay,
                spec.reg.lambda2,
                Some(DecayMode::Penalty),
            ),
        ),
    };
    let tracked_l2sp = penalty.as_ref().filter(|p| p.kind == RegKind::L2sp).cloned();
    let rule = UpdateRule {
        penalty,
        hyperparams: HyperParams {
            weight_decay: decoupled,
            ..h.clone()
        },
    };

    let epochs = spec.schedule.epochs;
    let mut train_error = Vec::with_capacity(epochs);
    let mut val_error = Vec::with_capacity(epochs);
    let mut norm_l2 = Vec::with_capacity(epochs);
    let mut norm_l2sp = tracked_l2sp.as_ref().map(|_| Vec::with_capacity(epochs));
    let mut diverged_at = None;

    let mut state = OptimState::new(start.values.clone());
    let mut looper = EpochLoop::new(&model, &target.train, rule, stream(seed, STREAM_SHUFFLE));
    for epoch in 0..epochs {
        let eta_t = schedule_eta(&h.schedule, epoch)?;
        let outcome = looper.run(&mut state, eta_t).and_then(|_| {
            Ok((
                error_rate(&model, &state.theta, &target.train.batch())?,
                error_rate(&model, &state.theta, &target.val.batch())?,
            ))
        });
        match outcome {
            Ok((tr, va)) => {
                train_error.push(tr);
                val_error.push(va);
                norm_l2.push(normalized_l2(&state.theta, &start.values)?);
                if let (Some(track), Some(spec_sp)) = (norm_l2sp.as_mut(), tracked_l2sp.as_ref()) {
                    track.push(normalized_l2sp(&state.theta, &start.values, spec_sp)?);
                }
            }
            Err(Error::Numeric { step, message }) => {
                log::warn!("cell {} seed {seed} diverged at step {step}: {message}", cell.index);
                diverged_at = Some(epoch);
                break;
            }
            Err(e) => return Err(e),
        }
    }
    if diverged_at.is_some() {
        train_error.resize(epochs, 1.0);
        val_error.resize(epochs, 1.0);
    }

    let final_val_error = *val_error.last().unwrap_or(&1.0);
    let min_val_error = val_error.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(TrialResult {
        cell: cell.index,
        seed,
        elr: elr(&h),
        effective_wd: effective_wd(&h)?,
        hyperparams: h,
        reg,
        init: spec.init.mode,
        delta: spec.task.delta,
        train_error,
        val_error,
        final_val_error,
        min_val_error,
        norm_l2,
        norm_l2sp,
        diverged: diverged_at.is_some(),
        diverged_at_epoch: diverged_at,
        wall_time_ms: spec.record_timing.then(|| started.elapsed().as_millis() as u64),
    })
}
