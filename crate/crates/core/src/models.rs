//! Small differentiable classifiers with analytic gradients.
//!
//! Three shapes are shipped: a linear softmax classifier, a one-hidden-layer
//! tanh MLP, and the same MLP whose first layer is weight-normalized,
//! `h = tanh(g * (W x) / |W|_F + b)`. The normalized layer makes the loss
//! exactly invariant to rescaling `W`, which is the property batch
//! normalization gives the weights that precede it.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Linear,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    #[serde(default)]
    pub hidden: usize,
    pub classes: usize,
    #[serde(default)]
    pub normalized: bool,
}

impl ModelSpec {
    pub fn linear(input_dim: usize, classes: usize) -> Self {
        Self {
            kind: ModelKind::Linear,
            input_dim,
            hidden: 0,
            classes,
            normalized: false,
        }
    }

    pub fn mlp(input_dim: usize, hidden: usize, classes: usize, normalized: bool) -> Self {
        Self {
            kind: ModelKind::Mlp,
            input_dim,
            hidden,
            classes,
            normalized,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.classes == 0 {
            return Err(Error::Input("model dimensions must be positive".into()));
        }
        match self.kind {
            ModelKind::Linear if self.normalized => Err(Error::Input("only mlp models have a normalized layer".into())),
            ModelKind::Mlp if self.hidden == 0 => Err(Error::Input("mlp needs a positive hidden width".into())),
            _ => Ok(()),
        }
    }

    pub fn layout(&self) -> Layout {
        let (d, h, k) = (self.input_dim, self.hidden, self.classes);
        let mut blocks = Vec::new();
        let mut push = |name: &'static str, len: usize, shared: bool| {
            let start = blocks.last().map_or(0, |b: &Block| b.start + b.len);
            blocks.push(Block {
                name,
                start,
                len,
                shared,
            });
        };
        match self.kind {
            ModelKind::Linear => {
                push("w_out", k * d, false);
                push("b_out", k, false);
            }
            ModelKind::Mlp => {
                push("w1", h * d, true);
                if self.normalized {
                    push("g1", h, true);
                }
                push("b1", h, true);
                push("w_out", k * h, false);
                push("b_out", k, false);
            }
        }
        Layout { blocks }
    }

    pub fn num_params(&self) -> usize {
        self.layout().len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub name: &'static str,
    pub start: usize,
    pub len: usize,
    /// Body parameters carried over from pre-training; the head is novel.
    pub shared: bool,
}

impl Block {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub blocks: Vec<Block>,
}

impl Layout {
    pub fn len(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.start + b.len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn block(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn shared_mask(&self) -> Vec<bool> {
        let mut mask = Vec::with_capacity(self.len());
        for b in &self.blocks {
            mask.extend(std::iter::repeat_n(b.shared, b.len));
        }
        mask
    }
}

/// Flat parameters together with the layout they follow.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub layout: Layout,
}

impl ParamVector {
    pub fn zeros(model: &ModelSpec) -> Self {
        let layout = model.layout();
        Self {
            values: vec![0.0; layout.len()],
            layout,
        }
    }

    pub fn from_values(model: &ModelSpec, values: Vec<f64>) -> Result<Self> {
        let layout = model.layout();
        if values.len() != layout.len() {
            return Err(Error::dim("parameter vector", layout.len(), values.len()));
        }
        Ok(Self { values, layout })
    }

    /// Scaled-Gaussian initialization; the normalized layer's gains start at
    /// `sqrt(hidden)` so the first layer matches its unnormalized counterpart
    /// in scale.
    pub fn init<R: Rng + ?Sized>(model: &ModelSpec, rng: &mut R) -> Self {
        let mut p = Self::zeros(model);
        let fan_in = |name: &str| match name {
            "w1" => model.input_dim,
            "w_out" if model.kind == ModelKind::Mlp => model.hidden,
            _ => model.input_dim,
        };
        for b in p.layout.blocks.clone() {
            match b.name {
                "w1" | "w_out" => {
                    let normal = Normal::new(0.0, 1.0 / (fan_in(b.name) as f64).sqrt()).unwrap();
                    for v in &mut p.values[b.range()] {
                        *v = normal.sample(rng);
                    }
                }
                "g1" => p.values[b.range()].fill((model.hidden as f64).sqrt()),
                _ => {}
            }
        }
        p
    }

    /// Redraws the head from `N(0, std^2)`.
    pub fn reinit_head<R: Rng + ?Sized>(&mut self, std: f64, rng: &mut R) {
        let normal = Normal::new(0.0, std).unwrap();
        for b in self.layout.blocks.clone() {
            if !b.shared {
                for v in &mut self.values[b.range()] {
                    *v = normal.sample(rng);
                }
            }
        }
    }

    pub fn shared_mask(&self) -> Vec<bool> {
        self.layout.shared_mask()
    }

    pub fn block(&self, name: &str) -> Option<&[f64]> {
        self.layout.block(name).map(|b| &self.values[b.range()])
    }

    pub fn block_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.layout.block(name)?.range();
        Some(&mut self.values[range])
    }
}

/// Row-major inputs with one label per row.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub x: &'a [f64],
    pub y: &'a [usize],
}

impl<'a> Batch<'a> {
    pub fn new(x: &'a [f64], y: &'a [usize]) -> Self {
        Self { x, y }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

fn check_batch(model: &ModelSpec, params: &[f64], batch: &Batch) -> Result<()> {
    let expected = model.num_params();
    if params.len() != expected {
        return Err(Error::dim("parameter vector", expected, params.len()));
    }
    if batch.is_empty() {
        return Err(Error::EmptyInput("batch has no samples".into()));
    }
    if batch.x.len() != batch.len() * model.input_dim {
        return Err(Error::dim("batch inputs", batch.len() * model.input_dim, batch.x.len()));
    }
    if let Some(&y) = batch.y.iter().find(|&&y| y >= model.classes) {
        return Err(Error::Input(format!("label {y} outside {} classes", model.classes)));
    }
    Ok(())
}

/// Borrowed view of the parameter blocks.
struct Weights<'a> {
    w1: &'a [f64],
    g1: Option<&'a [f64]>,
    b1: &'a [f64],
    w_out: &'a [f64],
    b_out: &'a [f64],
    w1_norm: f64,
}

impl<'a> Weights<'a> {
    fn split(model: &ModelSpec, params: &'a [f64]) -> Self {
        let layout = model.layout();
        let get = |name: &str| layout.block(name).map(|b| &params[b.range()]);
        let w1 = get("w1").unwrap_or(&[]);
        Self {
            w1,
            g1: get("g1"),
            b1: get("b1").unwrap_or(&[]),
            w_out: get("w_out").unwrap(),
            b_out: get("b_out").unwrap(),
            w1_norm: w1.iter().map(|v| v * v).sum::<f64>().sqrt(),
        }
    }
}

/// Per-sample activations kept for the backward pass.
struct Activations {
    /// `W1 x`, before normalization.
    z1: Vec<f64>,
    /// tanh outputs.
    hidden: Vec<f64>,
    logits: Vec<f64>,
}

fn forward_sample(model: &ModelSpec, w: &Weights, x: &[f64], act: &mut Activations) {
    let (d, k) = (model.input_dim, model.classes);
    let features: &[f64] = match model.kind {
        ModelKind::Linear => x,
        ModelKind::Mlp => {
            let h = model.hidden;
            for u in 0..h {
                let row = &w.w1[u * d..(u + 1) * d];
                act.z1[u] = row.iter().zip(x).map(|(a, b)| a * b).sum();
                let pre = match w.g1 {
                    Some(g) => g[u] * act.z1[u] / w.w1_norm + w.b1[u],
                    None => act.z1[u] + w.b1[u],
                };
                act.hidden[u] = pre.tanh();
            }
            &act.hidden
        }
    };
    let width = features.len();
    for c in 0..k {
        let row = &w.w_out[c * width..(c + 1) * width];
        act.logits[c] = w.b_out[c] + row.iter().zip(features).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// Softmax probabilities in place; returns `-log p[label]`.
fn softmax_nll(logits: &mut [f64], label: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let shifted_label = logits[label] - max;
    let mut total = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        total += *l;
    }
    let nll = total.ln() - shifted_label;
    for l in logits.iter_mut() {
        *l /= total;
    }
    nll
}

fn activations(model: &ModelSpec) -> Activations {
    Activations {
        z1: vec![0.0; model.hidden],
        hidden: vec![0.0; model.hidden],
        logits: vec![0.0; model.classes],
    }
}

/// Mean cross-entropy and the row-major logits of every sample.
pub fn forward_loss(model: &ModelSpec, params: &[f64], batch: &Batch) -> Result<(f64, Vec<f64>)> {
    check_batch(model, params, batch)?;
    let w = Weights::split(model, params);
    let mut act = activations(model);
    let mut logits = Vec::with_capacity(batch.len() * model.classes);
    let mut loss = 0.0;
    for (i, &y) in batch.y.iter().enumerate() {
        let x = &batch.x[i * model.input_dim..(i + 1) * model.input_dim];
        forward_sample(model, &w, x, &mut act);
        logits.extend_from_slice(&act.logits);
        loss += softmax_nll(&mut act.logits, y);
    }
    let loss = loss / batch.len() as f64;
    if !loss.is_finite() {
        return Err(non_finite());
    }
    Ok((loss, logits))
}

/// Analytic gradient of [`forward_loss`] with respect to the parameters.
pub fn backward(model: &ModelSpec, params: &[f64], batch: &Batch) -> Result<Vec<f64>> {
    loss_and_grad(model, params, batch).map(|(_, g)| g)
}

pub fn loss_and_grad(model: &ModelSpec, params: &[f64], batch: &Batch) -> Result<(f64, Vec<f64>)> {
    check_batch(model, params, batch)?;
    let layout = model.layout();
    let w = Weights::split(model, params);
    let (d, k) = (model.input_dim, model.classes);
    let inv_n = 1.0 / batch.len() as f64;

    let mut grad = vec![0.0; params.len()];
    let range = |name: &str| layout.block(name).map(|b| b.range());
    let w_out_r = range("w_out").unwrap();
    let b_out_r = range("b_out").unwrap();
    let w1_r = range("w1");
    let g1_r = range("g1");
    let b1_r = range("b1");

    let mut act = activations(model);
    let mut d_hidden = vec![0.0; model.hidden];
    // d loss / d |W1|_F, accumulated over the batch
    let mut d_norm = 0.0;
    let mut loss = 0.0;

    for (i, &y) in batch.y.iter().enumerate() {
        let x = &batch.x[i * d..(i + 1) * d];
        forward_sample(model, &w, x, &mut act);
        loss += softmax_nll(&mut act.logits, y);
        // act.logits now holds probabilities
        let delta: Vec<f64> = (0..k)
            .map(|c| (act.logits[c] - if c == y { 1.0 } else { 0.0 }) * inv_n)
            .collect();

        let features: &[f64] = match model.kind {
            ModelKind::Linear => x,
            ModelKind::Mlp => &act.hidden,
        };
        let width = features.len();
        for c in 0..k {
            grad[b_out_r.start + c] += delta[c];
            let g_row = &mut grad[w_out_r.start + c * width..w_out_r.start + (c + 1) * width];
            for (g, f) in g_row.iter_mut().zip(features) {
                *g += delta[c] * f;
            }
        }

        if model.kind == ModelKind::Linear {
            continue;
        }
        let h = model.hidden;
        for (u, (dh, a)) in d_hidden.iter_mut().zip(&act.hidden).enumerate() {
            let back: f64 = (0..k).map(|c| w.w_out[c * h + u] * delta[c]).sum();
            *dh = back * (1.0 - a * a);
        }
        let w1_r = w1_r.clone().unwrap();
        let b1_r = b1_r.clone().unwrap();
        for u in 0..h {
            let da = d_hidden[u];
            grad[b1_r.start + u] += da;
            let dz = match (w.g1, &g1_r) {
                (Some(g), Some(g1_r)) => {
                    grad[g1_r.start + u] += da * act.z1[u] / w.w1_norm;
                    d_norm -= da * g[u] * act.z1[u] / (w.w1_norm * w.w1_norm);
                    da * g[u] / w.w1_norm
                }
                _ => da,
            };
            let g_row = &mut grad[w1_r.start + u * d..w1_r.start + (u + 1) * d];
            for (g, xv) in g_row.iter_mut().zip(x) {
                *g += dz * xv;
            }
        }
    }

    if model.normalized {
        let w1_r = w1_r.unwrap();
        for (g, wv) in grad[w1_r].iter_mut().zip(w.w1) {
            *g += d_norm * wv / w.w1_norm;
        }
    }

    let loss = loss * inv_n;
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(non_finite());
    }
    Ok((loss, grad))
}

fn non_finite() -> Error {
    Error::Numeric {
        step: 0,
        message: "non-finite activations".into(),
    }
}

/// Fraction of samples whose arg-max logit differs from the label.
pub fn error_rate(model: &ModelSpec, params: &[f64], batch: &Batch) -> Result<f64> {
    let (_, logits) = forward_loss(model, params, batch)?;
    let k = model.classes;
    let wrong = batch
        .y
        .iter()
        .enumerate()
        .filter(|(i, &y)| {
            let row = &logits[i * k..(i + 1) * k];
            let mut best = 0;
            for c in 1..k {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best != y
        })
        .count();
    Ok(wrong as f64 / batch.len() as f64)
}

/// Largest relative disagreement between the analytic gradient and central
/// differences with step `eps`, using `|a - n| / max(1e-12, |a| + |n|)`.
pub fn gradcheck(model: &ModelSpec, params: &[f64], batch: &Batch, eps: f64) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Input(format!("gradcheck step {eps} outside [1e-7, 1e-3]")));
    }
    let analytic = backward(model, params, batch)?;
    let mut probe = params.to_vec();
    let mut worst = 0.0f64;
    for (i, a) in analytic.iter().enumerate() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let (plus, _) = forward_loss(model, &probe, batch)?;
        probe[i] = orig - eps;
        let (minus, _) = forward_loss(model, &probe, batch)?;
        probe[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_batch(model: &ModelSpec, n: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<usize>) {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let x = (0..n * model.input_dim).map(|_| normal.sample(rng)).collect();
        let y = (0..n).map(|_| rng.random_range(0..model.classes)).collect();
        (x, y)
    }

    fn kinds() -> Vec<ModelSpec> {
        vec![
            ModelSpec::linear(4, 3),
            ModelSpec::mlp(4, 5, 3, false),
            ModelSpec::mlp(4, 5, 3, true),
        ]
    }

    #[test]
    fn layout_marks_head_novel() {
        let m = ModelSpec::mlp(3, 4, 2, true);
        let layout = m.layout();
        assert_eq!(layout.len(), 12 + 4 + 4 + 8 + 2);
        let mask = layout.shared_mask();
        assert_eq!(mask.iter().filter(|s| **s).count(), 20);
        assert!(!mask[29]);
        assert!(ModelSpec::linear(3, 2).layout().shared_mask().iter().all(|s| !s));
    }

    #[test]
    fn zero_weights_give_uniform_loss() {
        let m = ModelSpec::linear(3, 2);
        let p = ParamVector::zeros(&m);
        let x = [1.0, -2.0, 0.5, 3.0, 0.0, 1.0];
        let (loss, _) = forward_loss(&m, &p.values, &Batch::new(&x, &[0, 1])).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn linear_single_sample_closed_form() {
        let m = ModelSpec::linear(2, 3);
        // rows of W, then b
        let params = [1.0, 0.0, 0.0, 1.0, -1.0, -1.0, 0.1, 0.2, 0.3];
        let x = [0.5, 2.0];
        let logits = [0.5 + 0.1, 2.0 + 0.2, -2.5 + 0.3];
        let lse = logits.iter().map(|l: &f64| l.exp()).sum::<f64>().ln();
        let (loss, got) = forward_loss(&m, &params, &Batch::new(&x, &[1])).unwrap();
        assert!((loss - (lse - logits[1])).abs() < 1e-14);
        for (a, b) in got.iter().zip(logits) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_weight_head_bias_gradient() {
        // With zero weights every sample predicts 1/K, so the bias gradient is
        // 1/K minus the class frequency.
        let m = ModelSpec::linear(2, 2);
        let p = ParamVector::zeros(&m);
        let x = [1.0, 2.0, -1.0, 0.5, 3.0, 3.0, 0.0, -2.0];
        let y = [0, 1, 1, 0];
        let g = backward(&m, &p.values, &Batch::new(&x, &y)).unwrap();
        let b = m.layout().block("b_out").unwrap().range();
        assert!((g[b.start] - 0.0).abs() < 1e-15);
        assert!((g[b.start + 1] - 0.0).abs() < 1e-15);

        let y = [0, 0, 0, 1];
        let g = backward(&m, &p.values, &Batch::new(&x, &y)).unwrap();
        assert!((g[b.start] - (0.5 - 0.75)).abs() < 1e-15);
        assert!((g[b.start + 1] - (0.5 - 0.25)).abs() < 1e-15);
    }

    #[test]
    fn gradcheck_all_kinds() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for m in kinds() {
            for _ in 0..5 {
                let p = ParamVector::init(&m, &mut rng);
                let (x, y) = random_batch(&m, 6, &mut rng);
                let err = gradcheck(&m, &p.values, &Batch::new(&x, &y), 1e-5).unwrap();
                assert!(err < 1e-6, "{:?} gradcheck {err}", m.kind);
            }
        }
    }

    #[test]
    fn normalized_layer_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = ModelSpec::mlp(4, 5, 3, true);
        let p = ParamVector::init(&m, &mut rng);
        let (x, y) = random_batch(&m, 8, &mut rng);
        let batch = Batch::new(&x, &y);
        let (base, _) = forward_loss(&m, &p.values, &batch).unwrap();
        let base_grad = backward(&m, &p.values, &batch).unwrap();
        let w1 = m.layout().block("w1").unwrap().range();
        for alpha in [0.5, 2.0, 10.0] {
            let mut scaled = p.clone();
            scaled.block_mut("w1").unwrap().iter_mut().for_each(|v| *v *= alpha);
            let (loss, _) = forward_loss(&m, &scaled.values, &batch).unwrap();
            assert!(((loss - base) / base).abs() <= 1e-9);
            let grad = backward(&m, &scaled.values, &batch).unwrap();
            for i in w1.clone() {
                assert!((grad[i] * alpha - base_grad[i]).abs() <= 1e-8 * base_grad[i].abs().max(1e-12));
            }
        }
    }

    #[test]
    fn rejects_bad_batches() {
        let m = ModelSpec::linear(2, 2);
        let p = ParamVector::zeros(&m);
        assert!(matches!(
            forward_loss(&m, &p.values, &Batch::new(&[1.0], &[0])),
            Err(Error::Dimension { .. })
        ));
        assert!(matches!(
            forward_loss(&m, &p.values, &Batch::new(&[1.0, 1.0], &[2])),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            forward_loss(&m, &p.values, &Batch::new(&[], &[])),
            Err(Error::EmptyInput(_))
        ));
        assert!(matches!(
            forward_loss(&m, &p.values, &Batch::new(&[f64::NAN, 0.0], &[0])),
            Err(Error::Numeric { .. })
        ));
        assert!(gradcheck(&m, &p.values, &Batch::new(&[1.0, 1.0], &[0]), 1e-2).is_err());
    }

    #[test]
    fn error_rate_counts_mistakes() {
        let m = ModelSpec::linear(1, 2);
        // logit_0 = x, logit_1 = -x
        let params = [1.0, -1.0, 0.0, 0.0];
        let x = [1.0, -1.0, 2.0, 3.0];
        let y = [0, 1, 1, 0];
        assert_eq!(error_rate(&m, &params, &Batch::new(&x, &y)).unwrap(), 0.25);
    }

    #[test]
    fn head_reinit_leaves_body() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = ModelSpec::mlp(3, 4, 2, false);
        let p = ParamVector::init(&m, &mut rng);
        let mut q = p.clone();
        q.reinit_head(0.01, &mut rng);
        assert_eq!(p.block("w1"), q.block("w1"));
        assert_eq!(p.block("b1"), q.block("b1"));
        assert_ne!(p.block("w_out"), q.block("w_out"));
        assert!(q.block("w_out").unwrap().iter().all(|v| v.abs() < 0.1));
    }
}
