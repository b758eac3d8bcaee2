//! Classification and feature-orthogonal losses with their analytic gradients.

use ndarray::{Array2, ArrayD, ArrayView2, ArrayViewD, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Nonnegative feature tensors of the two branches. The first axis is the batch.
#[derive(Debug, Clone)]
pub struct FeaturePair<'a> {
    pub f1: ArrayViewD<'a, f64>,
    pub f2: ArrayViewD<'a, f64>,
}

impl<'a> FeaturePair<'a> {
    pub fn new(f1: ArrayViewD<'a, f64>, f2: ArrayViewD<'a, f64>) -> Result<Self> {
        if f1.shape() != f2.shape() {
            return Err(Error::Contract(format!(
                "feature shapes differ: {:?} vs {:?}",
                f1.shape(),
                f2.shape()
            )));
        }
        if f1.ndim() == 0 || f1.shape()[0] == 0 {
            return Err(Error::Contract(
                "features need a nonempty batch axis".into(),
            ));
        }
        if f1.iter().chain(f2.iter()).any(|&v| !(v >= 0.0)) {
            return Err(Error::Contract("features must be nonnegative".into()));
        }
        Ok(Self { f1, f2 })
    }

    pub fn batch(&self) -> usize {
        self.f1.shape()[0]
    }
}

/// Sum of `f1 ⊙ f2` over all elements, divided by the batch size.
pub fn orthogonal_loss(pair: &FeaturePair<'_>) -> f64 {
    let mut acc = 0.0;
    Zip::from(&pair.f1)
        .and(&pair.f2)
        .for_each(|a, b| acc += a * b);
    acc / pair.batch() as f64
}

/// `(dL_o/df1, dL_o/df2) = (f2 / B, f1 / B)`.
pub fn orthogonal_loss_grad(pair: &FeaturePair<'_>) -> (ArrayD<f64>, ArrayD<f64>) {
    let b = pair.batch() as f64;
    (pair.f2.mapv(|v| v / b), pair.f1.mapv(|v| v / b))
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `-(y ln σ(z) + (1-y) ln(1-σ(z)))`.
#[inline]
fn bce_term(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

fn check_targets(logits: ArrayView2<'_, f64>, targets: ArrayView2<'_, f64>) -> Result<()> {
    if logits.dim() != targets.dim() {
        return Err(Error::Contract(format!(
            "logits {:?} and targets {:?} differ in shape",
            logits.dim(),
            targets.dim()
        )));
    }
    if logits.is_empty() {
        return Err(Error::Contract("empty logits".into()));
    }
    if targets.iter().any(|&t| t != 0.0 && t != 1.0) {
        return Err(Error::Contract("targets must be 0 or 1".into()));
    }
    Ok(())
}

/// Mean binary cross entropy over every label entry.
pub fn bce_with_logits(logits: ArrayView2<'_, f64>, targets: ArrayView2<'_, f64>) -> Result<f64> {
    check_targets(logits, targets)?;
    let mut acc = 0.0;
    Zip::from(&logits)
        .and(&targets)
        .for_each(|&z, &y| acc += bce_term(z, y));
    Ok(acc / logits.len() as f64)
}

/// Gradient of [`bce_with_logits`] w.r.t. the logits.
pub fn bce_with_logits_grad(
    logits: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
) -> Array2<f64> {
    let n = logits.len() as f64;
    Zip::from(&logits)
        .and(&targets)
        .map_collect(|&z, &y| (sigmoid(z) - y) / n)
}

/// Per-step loss components; `l_all = l_c1 + l_c2 + λ·l_o`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_c1: f64,
    pub l_c2: f64,
    pub l_o: f64,
    pub l_all: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.l_c1.is_finite()
            && self.l_c2.is_finite()
            && self.l_o.is_finite()
            && self.l_all.is_finite()
    }
}

pub fn total_loss(
    logits1: ArrayView2<'_, f64>,
    logits2: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
    pair: &FeaturePair<'_>,
    lambda: f64,
) -> Result<LossBreakdown> {
    let l_c1 = bce_with_logits(logits1, targets)?;
    let l_c2 = bce_with_logits(logits2, targets)?;
    if pair.batch() != logits1.nrows() {
        return Err(Error::Contract(format!(
            "feature batch {} does not match logits batch {}",
            pair.batch(),
            logits1.nrows()
        )));
    }
    let l_o = orthogonal_loss(pair);
    Ok(LossBreakdown {
        l_c1,
        l_c2,
        l_o,
        l_all: l_c1 + l_c2 + lambda * l_o,
    })
}

/// Gradients of `l_all` w.r.t. both logit matrices and both feature tensors.
#[derive(Debug, Clone)]
pub struct TotalLossGrads {
    pub logits1: Array2<f64>,
    pub logits2: Array2<f64>,
    pub f1: ArrayD<f64>,
    pub f2: ArrayD<f64>,
}

pub fn total_loss_grads(
    logits1: ArrayView2<'_, f64>,
    logits2: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
    pair: &FeaturePair<'_>,
    lambda: f64,
) -> Result<TotalLossGrads> {
    check_targets(logits1, targets)?;
    check_targets(logits2, targets)?;
    let (mut f1, mut f2) = orthogonal_loss_grad(pair);
    f1 *= lambda;
    f2 *= lambda;
    Ok(TotalLossGrads {
        logits1: bce_with_logits_grad(logits1, targets),
        logits2: bce_with_logits_grad(logits2, targets),
        f1,
        f2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array, IxDyn};

    fn pair_of<'a>(a: &'a ArrayD<f64>, b: &'a ArrayD<f64>) -> FeaturePair<'a> {
        FeaturePair::new(a.view(), b.view()).unwrap()
    }

    #[test]
    fn disjoint_support_gives_zero() {
        let a = array![[1.0, 0.0, 0.0]].into_dyn();
        let b = array![[0.0, 1.0, 1.0]].into_dyn();
        assert_eq!(orthogonal_loss(&pair_of(&a, &b)), 0.0);
    }

    #[test]
    fn ones_give_element_count() {
        let a = Array::ones(IxDyn(&[1, 4]));
        assert_eq!(orthogonal_loss(&pair_of(&a, &a)), 4.0);
    }

    #[test]
    fn shape_mismatch_and_negative_features_are_rejected() {
        let a = Array::ones(IxDyn(&[1, 4]));
        let b = Array::ones(IxDyn(&[1, 3]));
        assert!(matches!(
            FeaturePair::new(a.view(), b.view()),
            Err(Error::Contract(_))
        ));
        let c = array![[1.0, -0.5, 0.0, 0.0]].into_dyn();
        assert!(matches!(
            FeaturePair::new(a.view(), c.view()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn saturated_correct_logits_have_near_zero_loss() {
        let targets = array![[1.0, 0.0, 1.0], [0.0, 0.0, 1.0]];
        let logits = targets.mapv(|t| if t == 1.0 { 30.0 } else { -30.0 });
        let f = Array::ones(IxDyn(&[2, 5]));
        let b = total_loss(
            logits.view(),
            logits.view(),
            targets.view(),
            &pair_of(&f, &f),
            0.0,
        )
        .unwrap();
        assert!(b.l_all <= 1e-3);
    }

    #[test]
    fn zero_lambda_drops_orthogonal_term() {
        let targets = array![[1.0, 0.0], [0.0, 1.0]];
        let l1 = array![[0.3, -1.2], [2.0, 0.1]];
        let l2 = array![[-0.7, 0.4], [1.5, -0.2]];
        let f = Array::from_elem(IxDyn(&[2, 3]), 2.0);
        let b = total_loss(l1.view(), l2.view(), targets.view(), &pair_of(&f, &f), 0.0).unwrap();
        assert_eq!(b.l_all, b.l_c1 + b.l_c2);
        assert!(b.l_o > 0.0);
    }

    #[test]
    fn bce_matches_scalar_oracle() {
        let targets = array![[1.0, 0.0, 1.0], [0.0, 1.0, 0.0]];
        let logits = array![[0.5, -1.5, 2.25], [3.0, -0.75, 0.0]];
        let mut oracle = 0.0;
        for (z, y) in logits.iter().zip(targets.iter()) {
            let p = 1.0 / (1.0 + (-z as f64).exp());
            oracle += -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
        }
        oracle /= 6.0;
        let got = bce_with_logits(logits.view(), targets.view()).unwrap();
        assert!((got - oracle).abs() < 1e-6);
    }

    #[test]
    fn non_binary_targets_are_rejected() {
        let targets = array![[0.5, 0.0]];
        let logits = array![[0.0, 0.0]];
        assert!(matches!(
            bce_with_logits(logits.view(), targets.view()),
            Err(Error::Contract(_))
        ));
    }
}
