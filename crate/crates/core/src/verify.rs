//! Self-checks run by `finetune verify`. Each suite exercises one module
//! against an independent oracle or a structural invariant.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::Result;
use crate::features::{build_domain_profile, DomainProfile, FeatureRow, RawFeatures};
use crate::harness::{
    self, GridAxes, GridMode, GridSpec, InitConfig, ModelConfig, PretrainConfig, RegConfig, ScheduleConfig,
};
use crate::models::{backward, forward_loss, gradcheck, Batch, ModelKind, ModelSpec, ParamVector};
use crate::optim::{elr, eta_for_elr, nag_step, schedule_eta, HyperParams, OptimState, ScheduleSpec};
use crate::recommender::{default_reference_db, recommend_elr};
use crate::regularizers::{penalty, penalty_gradient, RegularizerSpec};
use crate::tasks::TaskParams;
use crate::transport::{domain_similarity, solve_transport, DEFAULT_GAMMA};

/// Exhaustive transportation oracle for small integer problems.
pub mod oracle {
    /// Minimum average cost over all non-negative integer flow matrices whose
    /// row sums are `supply` and column sums are `demand` (equal totals).
    pub fn brute_force_emd(supply: &[u32], demand: &[u32], cost: &[Vec<f64>]) -> f64 {
        let total: u32 = supply.iter().sum();
        assert_eq!(total, demand.iter().sum::<u32>(), "unbalanced oracle instance");
        let mut cols = demand.to_vec();
        let mut best = f64::INFINITY;
        search(supply, &mut cols, cost, 0, 0, supply[0], 0.0, &mut best);
        best / total as f64
    }

    #[allow(clippy::too_many_arguments)]
    fn search(
        supply: &[u32],
        cols: &mut [u32],
        cost: &[Vec<f64>],
        i: usize,
        j: usize,
        row_left: u32,
        acc: f64,
        best: &mut f64,
    ) {
        let n = cols.len();
        if i == supply.len() {
            if cols.iter().all(|&c| c == 0) && acc < *best {
                *best = acc;
            }
            return;
        }
        let (lo, hi) = if j == n - 1 {
            (row_left, row_left)
        } else {
            (0, row_left.min(cols[j]))
        };
        if lo > cols[j] {
            return;
        }
        for f in lo..=hi {
            cols[j] -= f;
            let acc = acc + f as f64 * cost[i][j];
            if j == n - 1 {
                let next_left = supply.get(i + 1).copied().unwrap_or(0);
                search(supply, cols, cost, i + 1, 0, next_left, acc, best);
            } else {
                search(supply, cols, cost, i, j + 1, row_left - f, acc, best);
            }
            cols[j] += f;
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteOutcome {
    pub suite: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn outcome(suite: &'static str, checks: std::result::Result<String, String>) -> SuiteOutcome {
    match checks {
        Ok(detail) => SuiteOutcome {
            suite,
            passed: true,
            detail,
        },
        Err(detail) => SuiteOutcome {
            suite,
            passed: false,
            detail,
        },
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn lift<T>(r: Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

pub fn run_all(seed: u64) -> Vec<SuiteOutcome> {
    vec![
        outcome("domain_features", features_suite(seed)),
        outcome("transport_oracle", transport_oracle_suite(seed, 200)),
        outcome("transport_symmetry", transport_symmetry_suite(seed)),
        outcome("optim", optim_suite()),
        outcome("regularizers", regularizer_suite(seed)),
        outcome("desk_models", models_suite(seed)),
        outcome("recommender", recommender_suite(seed)),
        outcome("harness", harness_suite(seed)),
    ]
}

fn random_rows(rng: &mut ChaCha8Rng, n: usize, dim: usize, classes: usize) -> Vec<FeatureRow> {
    (0..n)
        .map(|_| FeatureRow {
            label: format!("k{}", rng.random_range(0..classes)),
            vector: (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect(),
        })
        .collect()
}

fn features_suite(seed: u64) -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..20 {
        let mut rows = random_rows(&mut rng, 40, 3, 5);
        let a = lift(build_domain_profile(&lift(RawFeatures::new(rows.clone()))?, "s", "x"))?;
        rows.shuffle(&mut rng);
        let b = lift(build_domain_profile(&lift(RawFeatures::new(rows))?, "s", "x"))?;
        ensure(a.labels() == b.labels(), || "labels depend on row order".into())?;
        for (ca, cb) in a.centroids().iter().zip(b.centroids()) {
            for (x, y) in ca.iter().zip(cb) {
                ensure((x - y).abs() <= 1e-12, || "centroids depend on row order".into())?;
            }
        }
        let sum: f64 = a.weights().iter().sum();
        ensure((sum - 1.0).abs() <= 1e-9, || format!("weights sum to {sum}"))?;
    }
    Ok("20 permuted tables".into())
}

fn transport_oracle_suite(seed: u64, instances: usize) -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (supply, demand, cost) = random_integer_instance(&mut rng);
        let expected = oracle::brute_force_emd(&supply, &demand, &cost);
        let s: Vec<f64> = supply.iter().map(|&v| v as f64).collect();
        let d: Vec<f64> = demand.iter().map(|&v| v as f64).collect();
        let got = lift(solve_transport(&s, &d, &cost))?.distance;
        worst = worst.max((got - expected).abs());
    }
    ensure(worst <= 1e-9, || format!("max |solver - oracle| = {worst:e}"))?;
    Ok(format!("{instances} instances, max error {worst:.1e}"))
}

/// Random `m, n <= 3` instance with positive integer marginals of a common
/// total `Q <= 6` and costs uniform in [0, 10].
pub fn random_integer_instance<R: Rng>(rng: &mut R) -> (Vec<u32>, Vec<u32>, Vec<Vec<f64>>) {
    let m = rng.random_range(1..=3usize);
    let n = rng.random_range(1..=3usize);
    let q = rng.random_range(m.max(n) as u32..=6);
    let split = |rng: &mut R, parts: usize| -> Vec<u32> {
        let mut units = vec![1u32; parts];
        for _ in 0..(q as usize - parts) {
            units[rng.random_range(0..parts)] += 1;
        }
        units
    };
    let supply = split(rng, m);
    let demand = split(rng, n);
    let cost = (0..m)
        .map(|_| (0..n).map(|_| rng.random_range(0.0..10.0)).collect())
        .collect();
    (supply, demand, cost)
}

fn random_profile(rng: &mut ChaCha8Rng, k: usize, dim: usize) -> DomainProfile {
    let labels = (0..k).map(|i| format!("c{i}")).collect();
    let centroids = (0..k)
        .map(|_| (0..dim).map(|_| rng.random_range(-20.0..20.0)).collect())
        .collect();
    let masses = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
    DomainProfile::from_masses("p", "x", labels, centroids, masses).expect("valid random profile")
}

fn transport_symmetry_suite(seed: u64) -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for _ in 0..30 {
        let ks = rng.random_range(1..6);
        let kt = rng.random_range(1..6);
        let s = random_profile(&mut rng, ks, 4);
        let t = random_profile(&mut rng, kt, 4);
        let st = lift(domain_similarity(&s, &t, DEFAULT_GAMMA))?;
        let ts = lift(domain_similarity(&t, &s, DEFAULT_GAMMA))?;
        ensure((st.value - ts.value).abs() <= 1e-9, || {
            "similarity is not symmetric".into()
        })?;
        let ss = lift(domain_similarity(&s, &s, DEFAULT_GAMMA))?;
        ensure((ss.value - 1.0).abs() <= 1e-12, || {
            format!("self similarity {}", ss.value)
        })?;
        let c = rng.random_range(0.2..5.0);
        let scaled = lift(domain_similarity(&s.scaled(c), &t.scaled(c), DEFAULT_GAMMA))?;
        ensure(
            (scaled.distance - c * st.distance).abs() <= 1e-9 * (1.0 + st.distance * c),
            || "distance does not scale linearly".into(),
        )?;
        ensure((scaled.value - st.value.powf(c)).abs() <= 1e-9, || {
            "similarity does not map v -> v^c".into()
        })?;
    }
    Ok("30 random profile pairs".into())
}

fn optim_suite() -> std::result::Result<String, String> {
    let schedule = lift(ScheduleSpec::new(0.1, vec![30, 50], 0.1, 60))?;
    let h = HyperParams {
        eta: 0.1,
        momentum: 0.9,
        weight_decay: 0.0,
        batch_size: 1,
        schedule: schedule.clone(),
    };
    let mut state = OptimState::new(vec![1.0]);
    for _ in 0..2 {
        let g = state.lookahead(h.momentum);
        lift(nag_step(&mut state, &g, &h, 0.1))?;
    }
    ensure((state.theta[0] - 0.729).abs() <= 1e-12, || {
        format!("NAG trace theta_2 = {}", state.theta[0])
    })?;

    for &(eta, m) in &[(0.01, 0.9), (0.05, 0.0), (0.3, 0.99), (1e-4, 0.95), (0.123, 0.5)] {
        let h = HyperParams {
            eta,
            momentum: m,
            ..h.clone()
        };
        let back = eta_for_elr(elr(&h), m);
        ensure((back - eta).abs() <= 1e-15, || {
            format!("elr round trip {eta} -> {back}")
        })?;
    }

    let mut prev = f64::INFINITY;
    for epoch in 0..schedule.total_epochs {
        let eta = lift(schedule_eta(&schedule, epoch))?;
        ensure(eta <= prev, || format!("schedule increases at epoch {epoch}"))?;
        prev = eta;
    }
    Ok("trace, round trip, monotone schedule".into())
}

fn regularizer_suite(seed: u64) -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1234);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let len = rng.random_range(2..12);
        let theta: Vec<f64> = (0..len).map(|_| rng.random_range(-3.0..3.0)).collect();
        let start: Vec<f64> = (0..len).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mask: Vec<bool> = (0..len).map(|_| rng.random_bool(0.5)).collect();
        let spec = if rng.random_bool(0.5) {
            lift(RegularizerSpec::l2sp(
                rng.random_range(0.0..2.0),
                rng.random_range(0.0..2.0),
                &start,
                mask,
            ))?
        } else {
            RegularizerSpec::l2(rng.random_range(0.0..2.0), len)
        };
        let analytic = lift(penalty_gradient(&spec, &theta))?;
        let eps = 1e-5;
        let mut probe = theta.clone();
        for i in 0..len {
            probe[i] = theta[i] + eps;
            let plus = lift(penalty(&spec, &probe))?;
            probe[i] = theta[i] - eps;
            let minus = lift(penalty(&spec, &probe))?;
            probe[i] = theta[i];
            let numeric = (plus - minus) / (2.0 * eps);
            let rel = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs()).max(1e-12);
            worst = worst.max(rel);
        }
        ensure(lift(penalty(&spec, &theta))? >= 0.0, || "negative penalty".into())?;
    }
    ensure(worst < 1e-6, || format!("finite-difference mismatch {worst:e}"))?;
    Ok(format!("100 instances, max rel error {worst:.1e}"))
}

fn models_suite(seed: u64) -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let kinds = [
        ModelSpec::linear(5, 3),
        ModelSpec::mlp(5, 6, 3, false),
        ModelSpec::mlp(5, 6, 3, true),
    ];
    let mut worst = 0.0f64;
    for model in &kinds {
        for _ in 0..10 {
            let p = ParamVector::init(model, &mut rng);
            let (x, y) = random_batch(&mut rng, model, 8);
            worst = worst.max(lift(gradcheck(model, &p.values, &Batch::new(&x, &y), 1e-5))?);
        }
    }
    ensure(worst < 1e-6, || format!("gradcheck error {worst:e}"))?;

    let model = &kinds[2];
    let p = ParamVector::init(model, &mut rng);
    let (x, y) = random_batch(&mut rng, model, 8);
    let batch = Batch::new(&x, &y);
    let (base, _) = lift(forward_loss(model, &p.values, &batch))?;
    let base_grad = lift(backward(model, &p.values, &batch))?;
    let w1 = model.layout().block("w1").expect("mlp has w1").range();
    let base_norm = block_norm(&base_grad[w1.clone()]);
    for alpha in [0.5, 2.0, 10.0] {
        let mut q = p.clone();
        q.values[w1.clone()].iter_mut().for_each(|v| *v *= alpha);
        let (loss, _) = lift(forward_loss(model, &q.values, &batch))?;
        ensure(((loss - base) / base).abs() <= 1e-9, || {
            format!("loss not invariant at alpha {alpha}")
        })?;
        let g = lift(backward(model, &q.values, &batch))?;
        let norm = block_norm(&g[w1.clone()]);
        ensure(((norm * alpha - base_norm) / base_norm).abs() <= 1e-8, || {
            format!("gradient does not scale as 1/alpha at {alpha}")
        })?;
    }
    Ok(format!("30 gradchecks (max {worst:.1e}), scale invariance"))
}

fn block_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn random_batch<R: Rng>(rng: &mut R, model: &ModelSpec, n: usize) -> (Vec<f64>, Vec<usize>) {
    let x = (0..n * model.input_dim).map(|_| StandardNormal.sample(rng)).collect();
    let y = (0..n).map(|_| rng.random_range(0..model.classes)).collect();
    (x, y)
}

fn recommender_suite(seed: u64) -> std::result::Result<String, String> {
    let db = default_reference_db();
    for e in &db {
        let r = lift(recommend_elr(&db, &e.source_model, e.sim))?;
        ensure(r.elr == e.optimal_elr, || {
            format!("{} / {} not self-consistent", e.source_model, e.target_name)
        })?;
        ensure(r.bucket.lo <= r.elr && r.elr <= r.bucket.hi, || {
            "elr outside its bucket".into()
        })?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = db.clone();
    shuffled.shuffle(&mut rng);
    for _ in 0..200 {
        let q = rng.random_range(0.80..0.92);
        let a = lift(recommend_elr(&db, "imagenet/resnet101", q))?;
        let b = lift(recommend_elr(&shuffled, "imagenet/resnet101", q))?;
        ensure(a == b, || format!("row order changes the answer at sim {q}"))?;
    }
    Ok(format!("{} self queries, 200 order checks", db.len()))
}

fn harness_suite(seed: u64) -> std::result::Result<String, String> {
    let spec = GridSpec {
        grid: GridAxes {
            mode: GridMode::FixElr,
            elr_values: vec![0.05],
            eta_values: vec![],
            momentum_values: vec![0.9, 0.0],
            wd_values: vec![1e-4],
            batch_size: 16,
            seeds: vec![seed, seed + 1],
        },
        schedule: ScheduleConfig {
            epochs: 3,
            milestones: vec![2],
            factor: 0.1,
        },
        model: ModelConfig {
            kind: ModelKind::Mlp,
            hidden: 8,
            normalized: true,
        },
        task: TaskParams {
            classes: 3,
            dim: 4,
            delta: 1.0,
            n_per_class: 20,
            sigma: 1.0,
        },
        reg: RegConfig::default(),
        init: InitConfig {
            pretrain: PretrainConfig {
                max_epochs: 5,
                ..Default::default()
            },
            ..Default::default()
        },
        record_timing: false,
    };
    let serial = lift(harness::run_grid(&spec, 1))?;
    let parallel = lift(harness::run_grid(&spec, 4))?;
    let a = lift(harness::to_jsonl(&serial))?;
    let b = lift(harness::to_jsonl(&parallel))?;
    ensure(a == b, || "parallel and serial grids differ".into())?;
    for r in &serial {
        ensure((r.elr - elr(&r.hyperparams)).abs() <= 1e-15, || {
            "recorded elr drifted".into()
        })?;
    }
    Ok(format!("{} trials identical at 1 and 4 workers", serial.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_two_by_two() {
        let v = oracle::brute_force_emd(&[1, 1], &[1, 1], &[vec![1.0, 2.0], vec![3.0, 1.0]]);
        assert_eq!(v, 1.0);
        let v = oracle::brute_force_emd(&[2], &[1, 1], &[vec![1.0, 3.0]]);
        assert_eq!(v, 2.0);
    }

    #[test]
    fn every_suite_passes() {
        for o in run_all(0) {
            assert!(o.passed, "{}: {}", o.suite, o.detail);
        }
    }
}
