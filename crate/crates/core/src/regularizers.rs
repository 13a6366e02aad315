//! L2 and L2-SP penalties, their gradients, and normalized norm trackers.
//!
//! L2-SP pulls the shared parameters toward their pre-trained values and the
//! novel (head) parameters toward zero:
//! `(l1 / 2) |theta' - theta0|^2 + (l2 / 2) |theta''|^2`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default novel-parameter strength for L2-SP.
pub const DEFAULT_LAMBDA2: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegKind {
    None,
    #[default]
    L2,
    L2sp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegularizerSpec {
    pub kind: RegKind,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Pre-trained values of the shared coordinates, in mask order.
    pub reference: Vec<f64>,
    /// `true` for shared (pre-trained) coordinates, `false` for novel ones.
    pub shared_mask: Vec<bool>,
}

impl RegularizerSpec {
    pub fn none(len: usize) -> Self {
        Self {
            kind: RegKind::None,
            lambda1: 0.0,
            lambda2: 0.0,
            reference: Vec::new(),
            shared_mask: vec![false; len],
        }
    }

    pub fn l2(lambda: f64, len: usize) -> Self {
        Self {
            kind: RegKind::L2,
            lambda1: lambda,
            lambda2: 0.0,
            reference: Vec::new(),
            shared_mask: vec![false; len],
        }
    }

    /// L2-SP anchored at the shared coordinates of `start`.
    pub fn l2sp(lambda1: f64, lambda2: f64, start: &[f64], shared_mask: Vec<bool>) -> Result<Self> {
        if start.len() != shared_mask.len() {
            return Err(Error::dim("l2sp reference parameters", shared_mask.len(), start.len()));
        }
        let reference = start
            .iter()
            .zip(&shared_mask)
            .filter(|(_, s)| **s)
            .map(|(v, _)| *v)
            .collect();
        let spec = Self {
            kind: RegKind::L2sp,
            lambda1,
            lambda2,
            reference,
            shared_mask,
        };
        spec.validate(spec.shared_mask.len())?;
        Ok(spec)
    }

    pub fn validate(&self, len: usize) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite() && self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return Err(Error::Input("regularization strengths must be finite and >= 0".into()));
        }
        if self.kind != RegKind::L2sp {
            return Ok(());
        }
        if self.shared_mask.len() != len {
            return Err(Error::dim("l2sp shared mask", len, self.shared_mask.len()));
        }
        let shared = self.shared_mask.iter().filter(|s| **s).count();
        if self.reference.len() != shared {
            return Err(Error::dim("l2sp reference", shared, self.reference.len()));
        }
        Ok(())
    }
}

pub fn penalty(spec: &RegularizerSpec, theta: &[f64]) -> Result<f64> {
    spec.validate(theta.len())?;
    // One weighted sum in coordinate order for both kinds, so L2-SP anchored
    // at zero with equal strengths reproduces L2 bit for bit.
    let total: f64 = match spec.kind {
        RegKind::None => 0.0,
        RegKind::L2 => theta.iter().map(|t| spec.lambda1 * t * t).sum(),
        RegKind::L2sp => {
            let mut reference = spec.reference.iter();
            theta
                .iter()
                .zip(&spec.shared_mask)
                .map(|(t, shared)| {
                    if *shared {
                        let d = t - reference.next().expect("validated reference length");
                        spec.lambda1 * d * d
                    } else {
                        spec.lambda2 * t * t
                    }
                })
                .sum()
        }
    };
    Ok(0.5 * total)
}

pub fn penalty_gradient(spec: &RegularizerSpec, theta: &[f64]) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; theta.len()];
    add_penalty_gradient(spec, theta, &mut grad)?;
    Ok(grad)
}

/// Accumulates the penalty gradient into `grad`.
pub fn add_penalty_gradient(spec: &RegularizerSpec, theta: &[f64], grad: &mut [f64]) -> Result<()> {
    spec.validate(theta.len())?;
    if grad.len() != theta.len() {
        return Err(Error::dim("penalty gradient buffer", theta.len(), grad.len()));
    }
    match spec.kind {
        RegKind::None => {}
        RegKind::L2 => {
            for (g, t) in grad.iter_mut().zip(theta) {
                *g += spec.lambda1 * t;
            }
        }
        RegKind::L2sp => {
            let mut reference = spec.reference.iter();
            for ((g, t), shared) in grad.iter_mut().zip(theta).zip(&spec.shared_mask) {
                if *shared {
                    let r = reference.next().expect("validated reference length");
                    *g += spec.lambda1 * (t - r);
                } else {
                    *g += spec.lambda2 * t;
                }
            }
        }
    }
    Ok(())
}

/// `|theta_t|^2 / |theta_0|^2`.
pub fn normalized_l2(theta_t: &[f64], theta_0: &[f64]) -> Result<f64> {
    if theta_t.len() != theta_0.len() {
        return Err(Error::dim("normalized l2", theta_0.len(), theta_t.len()));
    }
    let base = sq_norm(theta_0);
    if base == 0.0 {
        return Err(Error::Division("initial parameters have zero norm".into()));
    }
    Ok(sq_norm(theta_t) / base)
}

/// `(l1 |theta'_t - theta0|^2 + l2 |theta''_t|^2) / (l2 |theta''_0|^2)`.
pub fn normalized_l2sp(theta_t: &[f64], theta_0: &[f64], spec: &RegularizerSpec) -> Result<f64> {
    if spec.kind != RegKind::L2sp {
        return Err(Error::Input("normalized l2sp needs an l2sp regularizer".into()));
    }
    if theta_t.len() != theta_0.len() {
        return Err(Error::dim("normalized l2sp", theta_0.len(), theta_t.len()));
    }
    spec.validate(theta_t.len())?;
    let (_, novel0) = split_sq_norms(spec, theta_0);
    let denom = spec.lambda2 * novel0;
    if denom == 0.0 {
        return Err(Error::Division(
            "initial novel parameters have zero weighted norm".into(),
        ));
    }
    let (drift, novel) = split_sq_norms(spec, theta_t);
    Ok((spec.lambda1 * drift + spec.lambda2 * novel) / denom)
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Squared distance of the shared block from the reference, and squared norm
/// of the novel block.
fn split_sq_norms(spec: &RegularizerSpec, theta: &[f64]) -> (f64, f64) {
    let mut reference = spec.reference.iter();
    let mut drift = 0.0;
    let mut novel = 0.0;
    for (t, shared) in theta.iter().zip(&spec.shared_mask) {
        if *shared {
            let d = t - reference.next().expect("validated reference length");
            drift += d * d;
        } else {
            novel += t * t;
        }
    }
    (drift, novel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l2_value() {
        let spec = RegularizerSpec::l2(2.0, 2);
        assert_eq!(penalty(&spec, &[3.0, 4.0]).unwrap(), 25.0);
        assert_eq!(penalty_gradient(&spec, &[3.0, 4.0]).unwrap(), vec![6.0, 8.0]);
    }

    #[test]
    fn l2sp_with_zero_reference_is_l2() {
        let theta = [0.3, -1.2, 2.5, 0.7];
        let mask = vec![true, true, false, false];
        let sp = RegularizerSpec::l2sp(0.4, 0.4, &[0.0; 4], mask).unwrap();
        let l2 = RegularizerSpec::l2(0.4, 4);
        assert_eq!(penalty(&sp, &theta).unwrap(), penalty(&l2, &theta).unwrap());
        assert_eq!(
            penalty_gradient(&sp, &theta).unwrap(),
            penalty_gradient(&l2, &theta).unwrap()
        );
    }

    #[test]
    fn l2sp_zero_at_reference() {
        let start = [1.0, -2.0, 0.5];
        let sp = RegularizerSpec::l2sp(1.0, 0.01, &start, vec![true, true, false]).unwrap();
        assert_eq!(penalty(&sp, &[1.0, -2.0, 0.0]).unwrap(), 0.0);
        assert!(penalty(&sp, &start).unwrap() > 0.0);
    }

    #[test]
    fn l2sp_shared_gradient() {
        let sp = RegularizerSpec::l2sp(0.5, 0.01, &[1.0, 9.0], vec![true, false]).unwrap();
        let g = penalty_gradient(&sp, &[2.0, 3.0]).unwrap();
        assert_eq!(g[0], 0.5);
        assert!((g[1] - 0.03).abs() < 1e-15);
    }

    #[test]
    fn zero_strengths_give_zero_gradient() {
        let sp = RegularizerSpec::l2sp(0.0, 0.0, &[1.0, 2.0, 3.0], vec![true, false, true]).unwrap();
        assert_eq!(penalty_gradient(&sp, &[5.0, -5.0, 1.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn none_is_zero() {
        let spec = RegularizerSpec::none(2);
        assert_eq!(penalty(&spec, &[3.0, 4.0]).unwrap(), 0.0);
    }

    #[test]
    fn shape_mismatch_is_input_error() {
        let mut sp = RegularizerSpec::l2sp(0.1, 0.1, &[1.0, 2.0], vec![true, false]).unwrap();
        assert!(matches!(penalty(&sp, &[1.0, 2.0, 3.0]), Err(Error::Dimension { .. })));
        sp.reference.push(4.0);
        assert!(matches!(
            penalty_gradient(&sp, &[1.0, 2.0]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn normalized_l2_examples() {
        let t0 = [1.0, -2.0, 0.5];
        assert_eq!(normalized_l2(&t0, &t0).unwrap(), 1.0);
        let doubled: Vec<f64> = t0.iter().map(|v| 2.0 * v).collect();
        assert_eq!(normalized_l2(&doubled, &t0).unwrap(), 4.0);
        assert_eq!(normalized_l2(&[0.0; 3], &t0).unwrap(), 0.0);
        assert!(matches!(normalized_l2(&t0, &[0.0; 3]), Err(Error::Division(_))));
    }

    #[test]
    fn normalized_l2sp_examples() {
        let t0 = [1.0, -2.0, 0.5, 0.25];
        let mask = vec![true, true, false, false];
        let sp = RegularizerSpec::l2sp(0.3, 0.7, &t0, mask.clone()).unwrap();
        assert!((normalized_l2sp(&t0, &t0, &sp).unwrap() - 1.0).abs() < 1e-15);
        let grown = [1.0, -2.0, 1.0, 0.5];
        assert!((normalized_l2sp(&grown, &t0, &sp).unwrap() - 4.0).abs() < 1e-15);

        let sp0 = RegularizerSpec::l2sp(0.0, 0.7, &t0, mask).unwrap();
        let moved = [3.0, 3.0, 0.1, -0.2];
        let expect = (0.01 + 0.04) / (0.25 + 0.0625);
        assert!((normalized_l2sp(&moved, &t0, &sp0).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn normalized_l2sp_needs_nonzero_head() {
        let t0 = [1.0, 0.0];
        let sp = RegularizerSpec::l2sp(0.1, 0.1, &t0, vec![true, false]).unwrap();
        assert!(matches!(normalized_l2sp(&t0, &t0, &sp), Err(Error::Division(_))));
        let l2 = RegularizerSpec::l2(0.1, 2);
        assert!(matches!(normalized_l2sp(&t0, &t0, &l2), Err(Error::Input(_))));
    }
}
