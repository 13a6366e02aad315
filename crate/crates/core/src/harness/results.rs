use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{DecayMode, InitMode};
use crate::error::{Error, Result};
use crate::optim::HyperParams;
use crate::regularizers::RegKind;

/// Regularizer as applied in a trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegRecord {
    pub kind: RegKind,
    pub lambda1: f64,
    pub lambda2: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub applied_as: Option<DecayMode>,
}

impl RegRecord {
    pub fn new(kind: RegKind, lambda1: f64, lambda2: f64, applied_as: Option<DecayMode>) -> Self {
        Self {
            kind,
            lambda1,
            lambda2,
            applied_as,
        }
    }
}

/// Outcome of one grid cell at one seed.
///
/// `hyperparams.weight_decay` is the cell's regularization strength; `reg`
/// records whether it was applied as decoupled decay or as a loss penalty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub cell: usize,
    pub seed: u64,
    pub hyperparams: HyperParams,
    pub elr: f64,
    pub effective_wd: f64,
    pub reg: RegRecord,
    pub init: InitMode,
    pub delta: f64,
    pub train_error: Vec<f64>,
    pub val_error: Vec<f64>,
    pub final_val_error: f64,
    /// Lowest per-epoch validation error, kept for analysis only.
    pub min_val_error: f64,
    pub norm_l2: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub norm_l2sp: Option<Vec<f64>>,
    pub diverged: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub diverged_at_epoch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_time_ms: Option<u64>,
}

impl TrialResult {
    /// Error used for grouping; diverged trials count as 1.0.
    pub fn score(&self) -> f64 {
        if self.diverged {
            1.0
        } else {
            self.final_val_error
        }
    }
}

pub fn to_jsonl(results: &[TrialResult]) -> Result<String> {
    let mut out = String::new();
    for r in results {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Writes one JSON object per line, appending when `append` is set.
pub fn persist_results(results: &[TrialResult], path: &Path, append: bool) -> Result<()> {
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(to_jsonl(results)?.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_results(path: &Path) -> Result<Vec<TrialResult>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(r);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum GroupKey {
    Elr,
    EffectiveWd,
    Momentum,
}

impl GroupKey {
    pub fn value(&self, r: &TrialResult) -> f64 {
        match self {
            GroupKey::Elr => r.elr,
            GroupKey::EffectiveWd => r.effective_wd,
            GroupKey::Momentum => r.hyperparams.momentum,
        }
    }
}

/// How seeds of the same cell are combined before grouping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SeedAggregate {
    /// Every trial competes on its own.
    #[default]
    Min,
    /// Trials sharing a cell are averaged over seeds first.
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub group_value: f64,
    pub best_error: f64,
}

/// Values closer than this relative gap share a group; derived quantities
/// such as `eta / (1 - m)` can differ in the last bits across cells.
const GROUP_REL_TOL: f64 = 1e-9;

/// Lowest error per group value, minimizing over every other hyperparameter
/// and seed. Rows are sorted by group value; each group is labelled by its
/// smallest member.
pub fn best_per_group(results: &[TrialResult], key: GroupKey) -> Vec<GroupRow> {
    best_per_group_with(results, key, SeedAggregate::Min)
}

pub fn best_per_group_with(results: &[TrialResult], key: GroupKey, aggregate: SeedAggregate) -> Vec<GroupRow> {
    let mut points: Vec<(f64, f64)> = match aggregate {
        SeedAggregate::Min => results.iter().map(|r| (key.value(r), r.score())).collect(),
        SeedAggregate::Mean => cell_means(results)
            .into_iter()
            .map(|(r, mean)| (key.value(r), mean))
            .collect(),
    };
    points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let mut rows: Vec<GroupRow> = Vec::new();
    for (value, error) in points {
        match rows.last_mut() {
            Some(row) if (value - row.group_value).abs() <= GROUP_REL_TOL * row.group_value.abs().max(1e-300) => {
                row.best_error = row.best_error.min(error);
            }
            _ => rows.push(GroupRow {
                group_value: value,
                best_error: error,
            }),
        }
    }
    rows
}

/// Mean score per cell index, paired with a representative trial. Scores are
/// summed in sorted order so the mean does not depend on input order.
fn cell_means(results: &[TrialResult]) -> Vec<(&TrialResult, f64)> {
    let mut by_cell: std::collections::BTreeMap<usize, (&TrialResult, Vec<f64>)> = Default::default();
    for r in results {
        by_cell.entry(r.cell).or_insert((r, Vec::new())).1.push(r.score());
    }
    by_cell
        .into_values()
        .map(|(r, mut scores)| {
            scores.sort_by(f64::total_cmp);
            (r, scores.iter().sum::<f64>() / scores.len() as f64)
        })
        .collect()
}

/// `group_value,best_error` CSV.
pub fn report_csv(rows: &[GroupRow]) -> String {
    let mut out = String::from("group_value,best_error\n");
    for r in rows {
        out.push_str(&format!("{},{}\n", r.group_value, r.best_error));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::ScheduleSpec;

    pub(crate) fn fake(cell: usize, seed: u64, eta: f64, momentum: f64, wd: f64, err: f64) -> TrialResult {
        let hyperparams = HyperParams {
            eta,
            momentum,
            weight_decay: wd,
            batch_size: 8,
            schedule: ScheduleSpec::new(eta, vec![], 0.1, 1).unwrap(),
        };
        TrialResult {
            cell,
            seed,
            elr: eta / (1.0 - momentum),
            effective_wd: wd / eta,
            hyperparams,
            reg: RegRecord::new(RegKind::L2, wd, 0.0, Some(DecayMode::Decoupled)),
            init: InitMode::Finetune,
            delta: 1.0,
            train_error: vec![err],
            val_error: vec![err],
            final_val_error: err,
            min_val_error: err,
            norm_l2: vec![1.0],
            norm_l2sp: None,
            diverged: false,
            diverged_at_epoch: None,
            wall_time_ms: None,
        }
    }

    #[test]
    fn single_result_single_row() {
        let rows = best_per_group(&[fake(0, 0, 0.01, 0.9, 1e-4, 0.25)], GroupKey::Elr);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].best_error, 0.25);
    }

    #[test]
    fn min_within_group() {
        let rs = vec![
            fake(0, 0, 0.01, 0.9, 1e-4, 0.3),
            fake(1, 0, 0.1, 0.0, 0.0, 0.2),
            fake(2, 0, 0.05, 0.0, 0.0, 0.4),
        ];
        let rows = best_per_group(&rs, GroupKey::Elr);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].group_value, 0.05);
        assert_eq!(rows[0].best_error, 0.4);
        assert!((rows[1].group_value - 0.1).abs() < 1e-12);
        assert_eq!(rows[1].best_error, 0.2);
    }

    #[test]
    fn diverged_scores_one() {
        let mut r = fake(0, 0, 0.01, 0.9, 0.0, 0.1);
        r.diverged = true;
        assert_eq!(best_per_group(&[r], GroupKey::Momentum)[0].best_error, 1.0);
    }

    #[test]
    fn mean_aggregation_averages_seeds() {
        let rs = vec![
            fake(0, 0, 0.01, 0.9, 0.0, 0.1),
            fake(0, 1, 0.01, 0.9, 0.0, 0.3),
            fake(1, 0, 0.01, 0.9, 1e-4, 0.25),
            fake(1, 1, 0.01, 0.9, 1e-4, 0.25),
        ];
        let rows = best_per_group_with(&rs, GroupKey::Elr, SeedAggregate::Mean);
        assert_eq!(rows.len(), 1);
        assert!((rows[0].best_error - 0.2).abs() < 1e-15);
        let rows = best_per_group_with(&rs, GroupKey::Elr, SeedAggregate::Min);
        assert_eq!(rows[0].best_error, 0.1);
    }

    #[test]
    fn report_format() {
        let rows = vec![GroupRow {
            group_value: 0.1,
            best_error: 0.25,
        }];
        assert_eq!(report_csv(&rows), "group_value,best_error\n0.1,0.25\n");
    }

    #[test]
    fn jsonl_round_trip_and_append() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let a = vec![fake(0, 0, 0.01, 0.9, 1e-4, 0.3), fake(1, 2, 0.1, 0.0, 0.0, 0.2)];
        let b = vec![fake(5, 7, 0.05, 0.5, 5e-4, 0.15)];
        persist_results(&a, &path, false).unwrap();
        assert_eq!(load_results(&path).unwrap(), a);
        persist_results(&b, &path, true).unwrap();
        let all = load_results(&path).unwrap();
        assert_eq!(all, [a.clone(), b].concat());
        persist_results(&a, &path, false).unwrap();
        assert_eq!(load_results(&path).unwrap(), a);
    }

    #[test]
    fn malformed_line_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let mut text = to_jsonl(&[fake(0, 0, 0.01, 0.9, 1e-4, 0.3)]).unwrap();
        text.push_str("{not json}\n");
        std::fs::write(&path, text).unwrap();
        match load_results(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
