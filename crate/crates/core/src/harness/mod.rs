//! Hyperparameter grids over synthetic fine-tuning tasks.
//!
//! A [`GridSpec`] expands into cells; every cell runs once per seed. For each
//! seed the task pair is generated and, when fine-tuning, a source model is
//! pre-trained once and shared read-only by that seed's trials. Trials are
//! independent, so the result list is identical for any worker count.

mod config;
mod presets;
mod results;
mod trainer;

use std::collections::BTreeMap;

use rayon::prelude::*;

pub use config::{
    Cell, DecayMode, GridAxes, GridMode, GridSpec, InitConfig, InitMode, ModelConfig, PretrainConfig, RegConfig,
    ScheduleConfig,
};
pub use presets::{preset, PRESETS};
pub use results::{
    best_per_group, best_per_group_with, load_results, persist_results, report_csv, to_jsonl, GroupKey, GroupRow,
    RegRecord, SeedAggregate, TrialResult,
};
pub use trainer::{initial_params, pretrain, run_trial};

use crate::error::{Error, Result};
use crate::models::ParamVector;
use crate::tasks::{make_task_pair, SyntheticTask};

/// Per-seed inputs shared by all cells.
pub struct SeedContext {
    pub seed: u64,
    pub source: SyntheticTask,
    pub target: SyntheticTask,
    pub pretrained: Option<ParamVector>,
}

pub fn prepare_seed(spec: &GridSpec, seed: u64) -> Result<SeedContext> {
    let (source, target) = make_task_pair(seed, &spec.task)?;
    let pretrained = match spec.init.mode {
        InitMode::Finetune => Some(pretrain(
            &spec.model_spec(),
            &source,
            spec.grid.batch_size,
            &spec.init.pretrain,
            seed,
        )?),
        InitMode::Scratch => None,
    };
    Ok(SeedContext {
        seed,
        source,
        target,
        pretrained,
    })
}

fn pool(parallelism: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::Input(format!("cannot start worker pool: {e}")))
}

/// Runs every (cell, seed) pair with at most `parallelism` workers. Results
/// are ordered by cell, then by the seed's position in the grid.
pub fn run_grid(spec: &GridSpec, parallelism: usize) -> Result<Vec<TrialResult>> {
    spec.validate()?;
    let cells = spec.cells()?;
    let pool = pool(parallelism)?;
    pool.install(|| {
        let contexts: Vec<SeedContext> = spec
            .grid
            .seeds
            .par_iter()
            .map(|&seed| prepare_seed(spec, seed))
            .collect::<Result<_>>()?;
        let jobs: Vec<(&Cell, &SeedContext)> = cells
            .iter()
            .flat_map(|c| contexts.iter().map(move |ctx| (c, ctx)))
            .collect();
        log::info!(
            "running {} trials ({} cells x {} seeds)",
            jobs.len(),
            cells.len(),
            contexts.len()
        );
        jobs.par_iter()
            .map(|(cell, ctx)| run_trial(spec, cell, ctx.seed, &ctx.target, ctx.pretrained.as_ref()))
            .collect()
    })
}

/// Runs only the first cell at `seed`.
pub fn run_single(spec: &GridSpec, seed: u64) -> Result<TrialResult> {
    spec.validate()?;
    let cells = spec.cells()?;
    let ctx = prepare_seed(spec, seed)?;
    run_trial(spec, &cells[0], seed, &ctx.target, ctx.pretrained.as_ref())
}

/// Groups results by an arbitrary key, preserving input order within groups.
pub fn partition_by<K: Ord, F: Fn(&TrialResult) -> K>(
    results: &[TrialResult],
    key: F,
) -> BTreeMap<K, Vec<TrialResult>> {
    let mut out: BTreeMap<K, Vec<TrialResult>> = BTreeMap::new();
    for r in results {
        out.entry(key(r)).or_default().push(r.clone());
    }
    out
}
