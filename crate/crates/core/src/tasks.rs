//! Synthetic Gaussian-mixture source/target task pairs with a controllable
//! domain shift.
//!
//! Source class means are drawn from `N(0, I)`; each target mean is the
//! source mean moved by `delta` along a random unit direction. Means,
//! directions, noise and the train/validation split each come from their own
//! ChaCha stream, so two pairs that differ only in `delta` share every random
//! draw.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{build_domain_profile, DomainProfile, FeatureRow, RawFeatures};
use crate::models::Batch;

/// Fraction of samples held out for validation.
pub const VAL_FRACTION: f64 = 0.2;

const STREAM_MEANS: u64 = 1;
const STREAM_DIRECTIONS: u64 = 2;
const STREAM_SOURCE_NOISE: u64 = 3;
const STREAM_TARGET_NOISE: u64 = 4;
const STREAM_SOURCE_SPLIT: u64 = 5;
const STREAM_TARGET_SPLIT: u64 = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub dim: usize,
    /// Row-major inputs.
    pub x: Vec<f64>,
    pub y: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn batch(&self) -> Batch<'_> {
        Batch::new(&self.x, &self.y)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    /// Copies the rows named by `indices` into `x_buf` / `y_buf`.
    pub fn gather_into(&self, indices: &[usize], x_buf: &mut Vec<f64>, y_buf: &mut Vec<usize>) {
        x_buf.clear();
        y_buf.clear();
        for &i in indices {
            x_buf.extend_from_slice(self.row(i));
            y_buf.push(self.y[i]);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub train: Dataset,
    pub val: Dataset,
    pub means: Vec<Vec<f64>>,
    pub delta: f64,
    pub seed: u64,
    pub n_per_class: usize,
    pub sigma: f64,
}

impl SyntheticTask {
    pub fn classes(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.train.dim
    }

    /// Per-class centroids of the raw training inputs.
    pub fn profile(&self, name: &str) -> Result<DomainProfile> {
        let rows = (0..self.train.len())
            .map(|i| FeatureRow {
                label: class_label(self.train.y[i]),
                vector: self.train.row(i).to_vec(),
            })
            .collect();
        build_domain_profile(&RawFeatures::new(rows)?, name, "raw-input")
    }

    /// Writes `label,f0,...,f{D-1},split`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["label".to_string()];
        header.extend((0..self.dim()).map(|j| format!("f{j}")));
        header.push("split".into());
        let to_err = |e: csv::Error| Error::Data(e.to_string());
        w.write_record(&header).map_err(to_err)?;
        for (split, data) in [("train", &self.train), ("val", &self.val)] {
            for i in 0..data.len() {
                let mut rec = vec![class_label(data.y[i])];
                rec.extend(data.row(i).iter().map(|v| v.to_string()));
                rec.push(split.into());
                w.write_record(&rec).map_err(to_err)?;
            }
        }
        w.flush().map_err(|e| Error::io("<task-csv>", e))?;
        Ok(())
    }
}

/// Zero-padded so lexicographic order matches class index order.
pub fn class_label(class: usize) -> String {
    format!("c{class:04}")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskParams {
    pub classes: usize,
    pub dim: usize,
    pub delta: f64,
    pub n_per_class: usize,
    pub sigma: f64,
}

impl TaskParams {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.dim < 2 {
            return Err(Error::Input(
                "synthetic tasks need at least 2 classes and 2 dimensions".into(),
            ));
        }
        if !(self.delta.is_finite() && self.delta >= 0.0) {
            return Err(Error::Input(format!("shift must be >= 0, got {}", self.delta)));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::Input(format!("noise scale must be >= 0, got {}", self.sigma)));
        }
        if self.n_per_class < 2 {
            return Err(Error::Input("need at least 2 samples per class".into()));
        }
        Ok(())
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn make_task_pair(seed: u64, params: &TaskParams) -> Result<(SyntheticTask, SyntheticTask)> {
    params.validate()?;
    let TaskParams {
        classes,
        dim,
        delta,
        n_per_class,
        ..
    } = *params;

    let mut means_rng = stream(seed, STREAM_MEANS);
    let source_means: Vec<Vec<f64>> = (0..classes).map(|_| gaussian_vec(&mut means_rng, dim)).collect();

    let mut dir_rng = stream(seed, STREAM_DIRECTIONS);
    let target_means: Vec<Vec<f64>> = source_means
        .iter()
        .map(|mu| {
            let mut u = gaussian_vec(&mut dir_rng, dim);
            let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            u.iter_mut().for_each(|v| *v /= norm);
            mu.iter().zip(&u).map(|(m, d)| m + delta * d).collect()
        })
        .collect();

    let source = sample_task(
        seed,
        source_means,
        (STREAM_SOURCE_NOISE, STREAM_SOURCE_SPLIT),
        0.0,
        params,
    );
    let target = sample_task(
        seed,
        target_means,
        (STREAM_TARGET_NOISE, STREAM_TARGET_SPLIT),
        delta,
        params,
    );
    debug_assert_eq!(source.train.len() + source.val.len(), classes * n_per_class);
    Ok((source, target))
}

fn sample_task(
    seed: u64,
    means: Vec<Vec<f64>>,
    (noise_stream, split_stream): (u64, u64),
    delta: f64,
    params: &TaskParams,
) -> SyntheticTask {
    let dim = params.dim;
    let total = params.classes * params.n_per_class;
    let mut noise = stream(seed, noise_stream);
    let mut x = Vec::with_capacity(total * dim);
    let mut y = Vec::with_capacity(total);
    for (k, mu) in means.iter().enumerate() {
        for _ in 0..params.n_per_class {
            for m in mu {
                let z: f64 = StandardNormal.sample(&mut noise);
                x.push(m + params.sigma * z);
            }
            y.push(k);
        }
    }

    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut stream(seed, split_stream));
    let n_val = ((total as f64) * VAL_FRACTION).round() as usize;
    let all = Dataset { dim, x, y };
    let pick = |idx: &[usize]| {
        let mut d = Dataset {
            dim,
            x: Vec::new(),
            y: Vec::new(),
        };
        all.gather_into(idx, &mut d.x, &mut d.y);
        d
    };
    SyntheticTask {
        val: pick(&order[..n_val]),
        train: pick(&order[n_val..]),
        means,
        delta,
        seed,
        n_per_class: params.n_per_class,
        sigma: params.sigma,
    }
}
