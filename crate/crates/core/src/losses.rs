//! Dice and binary cross-entropy losses over voxel probabilities.
//!
//! The arithmetic is written once, generic over the float type, and returns
//! the loss together with its gradient. The tape ops reuse it in `f64`, and
//! tests check it against finite differences in `f64`.

use mvrecon_tensor::{Tensor, Var};
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::voxgrid::{VoxelError, VoxelField, VoxelGrid};

pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Dice,
    CrossEntropy,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub kind: LossKind,
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Dice,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), VoxelError> {
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(VoxelError::Argument(format!(
                "loss epsilon {} must lie in (0, 0.5)",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Two-sided Dice loss and its gradient with respect to `p`.
///
/// `1 - Σpy/(Σ(p+y)+ε) - Σ(1-p)(1-y)/(Σ(2-p-y)+ε)`
pub fn dice_with_grad<F: Float>(p: &[F], y: &[F], eps: F) -> (F, Vec<F>) {
    assert_eq!(p.len(), y.len(), "dice operands differ in length");
    let one = F::one();
    let two = one + one;
    let a = ordered_sum(p.iter().zip(y).map(|(&p, &y)| p * y));
    let b = ordered_sum(p.iter().zip(y).map(|(&p, &y)| p + y)) + eps;
    let c = ordered_sum(p.iter().zip(y).map(|(&p, &y)| (one - p) * (one - y)));
    let e = ordered_sum(p.iter().zip(y).map(|(&p, &y)| two - p - y)) + eps;
    let loss = one - a / b - c / e;
    let (b2, e2) = (b * b, e * e);
    let grad = y.iter().map(|&y| (a - y * b) / b2 + ((one - y) * e - c) / e2).collect();
    (loss, grad)
}

/// Sums in ascending order so the result depends only on the multiset of
/// terms, which makes both losses exactly invariant under voxel permutation.
fn ordered_sum<F: Float>(terms: impl Iterator<Item = F>) -> F {
    let mut terms: Vec<F> = terms.collect();
    terms.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    terms.into_iter().fold(F::zero(), |acc, t| acc + t)
}

/// Mean binary cross-entropy and its gradient; `p` is clamped to `[ε, 1-ε]`
/// and the gradient vanishes where the clamp is active.
pub fn bce_with_grad<F: Float>(p: &[F], y: &[F], eps: F) -> (F, Vec<F>) {
    assert_eq!(p.len(), y.len(), "cross-entropy operands differ in length");
    let one = F::one();
    let n = F::from(p.len()).expect("length fits the float type");
    let mut terms = Vec::with_capacity(p.len());
    let mut grad = Vec::with_capacity(p.len());
    for (&p, &y) in p.iter().zip(y) {
        let clamped = p.max(eps).min(one - eps);
        terms.push(-(y * clamped.ln() + (one - y) * (one - clamped).ln()));
        let g = if p < eps || p > one - eps {
            F::zero()
        } else {
            (-y / clamped + (one - y) / (one - clamped)) / n
        };
        grad.push(g);
    }
    let total = ordered_sum(terms.into_iter());
    (total / n, grad)
}

fn check_pair(p: &VoxelField, y: &VoxelGrid) -> Result<(Vec<f64>, Vec<f64>), VoxelError> {
    if p.resolution() != y.resolution() {
        return Err(VoxelError::Argument(format!(
            "resolution mismatch: prediction {} vs target {}",
            p.resolution(),
            y.resolution()
        )));
    }
    Ok((
        p.values().iter().map(|&v| v as f64).collect(),
        y.occupancy().iter().map(|&v| v as f64).collect(),
    ))
}

pub fn dice_loss(p: &VoxelField, y: &VoxelGrid, eps: f64) -> Result<f64, VoxelError> {
    let (p, y) = check_pair(p, y)?;
    Ok(dice_with_grad(&p, &y, eps).0)
}

pub fn ce_loss(p: &VoxelField, y: &VoxelGrid, eps: f64) -> Result<f64, VoxelError> {
    let (p, y) = check_pair(p, y)?;
    Ok(bce_with_grad(&p, &y, eps).0)
}

/// Records a loss of `p` (any shape) against a constant binary target of the
/// same element count.
pub fn loss_var<'t>(p: &Var<'t>, target: &Tensor, cfg: &LossConfig) -> Var<'t> {
    assert_eq!(p.value().numel(), target.numel(), "loss target size");
    let pv: Vec<f64> = p.value().data().iter().map(|&v| v as f64).collect();
    let yv: Vec<f64> = target.data().iter().map(|&v| v as f64).collect();
    let (loss, grad) = match cfg.kind {
        LossKind::Dice => dice_with_grad(&pv, &yv, cfg.epsilon),
        LossKind::CrossEntropy => bce_with_grad(&pv, &yv, cfg.epsilon),
    };
    let shape = p.shape().to_vec();
    let grad: Vec<f32> = grad.into_iter().map(|g| g as f32).collect();
    p.tape().record(Tensor::scalar(loss as f32), &[p], move |g, _| {
        let s = g.item();
        vec![Some(Tensor::from_vec(shape, grad.iter().map(|v| v * s).collect()))]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn field(values: Vec<f32>, n: usize) -> VoxelField {
        VoxelField::new(n, values).unwrap()
    }

    fn checkerboard(n: usize) -> VoxelGrid {
        let occ = (0..n * n * n).map(|i| (i % 3 == 0) as u8).collect();
        VoxelGrid::from_occupancy(n, occ).unwrap()
    }

    #[test]
    fn dice_of_exact_prediction_is_zero() {
        let y = checkerboard(4);
        let p = field(y.to_f32(), 4);
        assert!(dice_loss(&p, &y, DEFAULT_EPSILON).unwrap().abs() < 1e-6);
    }

    #[test]
    fn dice_of_inverted_prediction_is_one() {
        let y = checkerboard(4);
        let p = field(y.to_f32().iter().map(|v| 1.0 - v).collect(), 4);
        assert!((dice_loss(&p, &y, DEFAULT_EPSILON).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn dice_two_voxel_example() {
        // Direct evaluation on the two-voxel case, no epsilon.
        let (l, _) = dice_with_grad(&[0.5f64, 0.5], &[1.0, 0.0], 0.0);
        assert!((l - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_examples() {
        let (l, _) = bce_with_grad(&[0.5f64; 8], &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0], 1e-6);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let (l, _) = bce_with_grad(&[0.9f64, 0.2], &[1.0, 0.0], 1e-6);
        assert!((l - 0.164_252_033_486_018).abs() < 1e-9);
        let (l, _) = bce_with_grad(&[1.0f64, 0.0], &[1.0, 0.0], 1e-6);
        assert!((l + (1.0f64 - 1e-6).ln()).abs() < 1e-12);
    }

    #[test]
    fn resolution_mismatch_is_an_error() {
        let p = VoxelField::uniform(2, 0.5).unwrap();
        assert!(dice_loss(&p, &VoxelGrid::empty(3), 1e-6).is_err());
        assert!(ce_loss(&p, &VoxelGrid::empty(3), 1e-6).is_err());
    }

    #[test]
    fn tape_op_matches_direct_evaluation() {
        let tape = mvrecon_tensor::Tape::new();
        let p = Tensor::from_vec([8], vec![0.1, 0.4, 0.8, 0.3, 0.9, 0.2, 0.5, 0.7]);
        let y = Tensor::from_vec([8], vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let pv = tape.leaf(std::sync::Arc::new(p.clone()));
        for kind in [LossKind::Dice, LossKind::CrossEntropy] {
            let cfg = LossConfig {
                kind,
                ..Default::default()
            };
            let out = loss_var(&pv, &y, &cfg);
            let pd: Vec<f64> = p.data().iter().map(|&v| v as f64).collect();
            let yd: Vec<f64> = y.data().iter().map(|&v| v as f64).collect();
            let expect = match kind {
                LossKind::Dice => dice_with_grad(&pd, &yd, 1e-6).0,
                LossKind::CrossEntropy => bce_with_grad(&pd, &yd, 1e-6).0,
            };
            assert!((out.value().item() as f64 - expect).abs() < 1e-6);
        }
    }

    /// Central finite differences in f64 against the analytic gradient.
    fn assert_gradient(f: impl Fn(&[f64]) -> (f64, Vec<f64>), p: &[f64]) {
        let h = 1e-5;
        let (_, analytic) = f(p);
        for i in 0..p.len() {
            let mut hi = p.to_vec();
            let mut lo = p.to_vec();
            hi[i] += h;
            lo[i] -= h;
            let numeric = (f(&hi).0 - f(&lo).0) / (2.0 * h);
            let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-8);
            assert!(err < 1e-4, "voxel {i}: analytic {} vs numeric {numeric}", analytic[i]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let n = 6 * 6 * 6;
        let p: Vec<f64> = (0..n).map(|i| 0.05 + 0.9 * ((i * 37 % 101) as f64 / 100.0)).collect();
        let y: Vec<f64> = (0..n).map(|i| ((i * 11) % 7 < 3) as u8 as f64).collect();
        assert_gradient(|p| dice_with_grad(p, &y, 1e-6), &p);
        assert_gradient(|p| bce_with_grad(p, &y, 1e-6), &p);
    }

    proptest! {
        #[test]
        fn dice_lies_in_unit_interval(
            pairs in prop::collection::vec((0.0f64..=1.0, any::<bool>()), 1..200)
        ) {
            let p: Vec<f64> = pairs.iter().map(|x| x.0).collect();
            let y: Vec<f64> = pairs.iter().map(|x| x.1 as u8 as f64).collect();
            let (l, _) = dice_with_grad(&p, &y, DEFAULT_EPSILON);
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&l));
        }

        #[test]
        fn losses_are_permutation_equivariant(
            pairs in prop::collection::vec((0.0f64..=1.0, any::<bool>()), 2..64),
            rotate in 0usize..64,
        ) {
            let p: Vec<f64> = pairs.iter().map(|x| x.0).collect();
            let y: Vec<f64> = pairs.iter().map(|x| x.1 as u8 as f64).collect();
            let mut perm: Vec<usize> = (0..p.len()).rev().collect();
            perm.rotate_left(rotate % p.len());
            let pp: Vec<f64> = perm.iter().map(|&i| p[i]).collect();
            let yp: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
            prop_assert_eq!(dice_with_grad(&p, &y, 1e-6).0, dice_with_grad(&pp, &yp, 1e-6).0);
            prop_assert_eq!(bce_with_grad(&p, &y, 1e-6).0, bce_with_grad(&pp, &yp, 1e-6).0);
        }
    }
}
