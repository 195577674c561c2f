//! Output heads: the final nonlinearity fused with its loss.
//!
//! Only three pairings exist, so the pairing is a single enum rather than an
//! activation plus a loss. The gradient with respect to the last
//! pre-activation `z` collapses to `ŷ − y` for the two cross-entropy heads and
//! to `2(ŷ − y)` for squared error.

use serde::{Deserialize, Serialize};

use crate::activations::{sigmoid, softmax};
use crate::error::{Error, Result};
use crate::numkernel::DenseVector;

/// Lower clamp for probabilities inside `log`.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Sigmoid output, binary cross entropy.
    SigmoidBce,
    /// Softmax output, cross entropy against a one-hot label.
    SoftmaxCe,
    /// Identity output, un-averaged squared error `‖y − ŷ‖²`.
    IdentitySe,
}

impl HeadKind {
    pub const ALL: [HeadKind; 3] = [HeadKind::SigmoidBce, HeadKind::SoftmaxCe, HeadKind::IdentitySe];

    pub fn is_classifier(self) -> bool {
        !matches!(self, HeadKind::IdentitySe)
    }

    /// Checks that a last layer of width `dim` can feed this head.
    pub fn check_dim(self, dim: usize) -> Result<()> {
        let ok = match self {
            HeadKind::SigmoidBce => dim == 1,
            HeadKind::SoftmaxCe => dim >= 2,
            HeadKind::IdentitySe => dim >= 1,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidHead(format!(
                "{self:?} cannot take an output of width {dim}"
            )))
        }
    }
}

impl std::str::FromStr for HeadKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        crate::activations::parse_name(s)
    }
}

/// Label for one sample. Validated against the head on every use.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    /// `y ∈ {0, 1}`.
    Binary(f64),
    /// One-hot vector over the classes.
    OneHot(DenseVector),
    /// Arbitrary real target.
    Real(DenseVector),
}

impl Target {
    pub fn binary(y: f64) -> Result<Self> {
        let t = Target::Binary(y);
        t.validate()?;
        Ok(t)
    }

    pub fn one_hot(class: usize, classes: usize) -> Result<Self> {
        if class >= classes {
            return Err(Error::InvalidTarget(format!("class {class} out of range 0..{classes}")));
        }
        Ok(Target::OneHot(DenseVector::basis(classes, class)))
    }

    pub fn real(y: Vec<f64>) -> Result<Self> {
        Ok(Target::Real(DenseVector::new(y)?))
    }

    /// Class index for classification targets. Binary labels map to 0/1.
    pub fn class(&self) -> Option<usize> {
        match self {
            Target::Binary(y) => Some(*y as usize),
            Target::OneHot(v) => v.iter().position(|&p| p == 1.0),
            Target::Real(_) => None,
        }
    }

    /// The target as a vector, the shape `ŷ` is compared against.
    pub fn as_vector(&self) -> DenseVector {
        match self {
            Target::Binary(y) => DenseVector::from_vec_unchecked(vec![*y]),
            Target::OneHot(v) | Target::Real(v) => v.clone(),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Target::Binary(y) if *y == 0.0 || *y == 1.0 => Ok(()),
            Target::Binary(y) => Err(Error::InvalidTarget(format!("binary label must be 0 or 1, got {y}"))),
            Target::OneHot(v) => {
                let ones = v.iter().filter(|&&p| p == 1.0).count();
                let zeros = v.iter().filter(|&&p| p == 0.0).count();
                if ones == 1 && ones + zeros == v.len() {
                    Ok(())
                } else {
                    Err(Error::InvalidTarget(format!("not a one-hot vector: {v:?}")))
                }
            }
            Target::Real(v) if v.is_finite() => Ok(()),
            Target::Real(_) => Err(Error::InvalidTarget("non-finite regression target".into())),
        }
    }

    /// Checks variant, label values and length against `head` with output width `dim`.
    pub fn check_for(&self, head: HeadKind, dim: usize) -> Result<()> {
        self.validate()?;
        let len = match (head, self) {
            (HeadKind::SigmoidBce, Target::Binary(_)) => 1,
            (HeadKind::SoftmaxCe, Target::OneHot(v)) | (HeadKind::IdentitySe, Target::Real(v)) => v.len(),
            (head, t) => {
                return Err(Error::InvalidTarget(format!("{head:?} cannot take target {t:?}")));
            }
        };
        if len != dim {
            return Err(Error::InvalidTarget(format!(
                "target length {len} does not match output width {dim}"
            )));
        }
        Ok(())
    }
}

/// `ŷ = f^[L](z^[L])` for the head's output nonlinearity.
pub fn head_apply(head: HeadKind, z_last: &DenseVector) -> Result<DenseVector> {
    head.check_dim(z_last.len())
        .map_err(|_| Error::dim("head_apply", format!("valid width for {head:?}"), z_last.len()))?;
    match head {
        HeadKind::SigmoidBce => Ok(DenseVector::from_vec_unchecked(vec![sigmoid(z_last[0])])),
        HeadKind::SoftmaxCe => softmax(z_last),
        HeadKind::IdentitySe => Ok(z_last.clone()),
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Evaluates the head's loss `ℓ(y, ŷ)`.
pub fn loss_eval(head: HeadKind, y: &Target, yhat: &DenseVector) -> Result<f64> {
    y.check_for(head, yhat.len())?;
    let loss = match (head, y) {
        (HeadKind::SigmoidBce, Target::Binary(y)) => {
            let p = clamp_prob(yhat[0]);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        }
        (HeadKind::SoftmaxCe, Target::OneHot(y)) => {
            let mut acc = 0.0;
            for (yi, pi) in y.iter().zip(yhat.iter()) {
                if *yi != 0.0 {
                    acc -= yi * clamp_prob(*pi).ln();
                }
            }
            acc
        }
        (HeadKind::IdentitySe, Target::Real(y)) => {
            let mut acc = 0.0;
            for (yi, pi) in y.iter().zip(yhat.iter()) {
                let r = yi - pi;
                acc += r * r;
            }
            acc
        }
        _ => unreachable!("checked by check_for"),
    };
    Ok(loss)
}

/// `∇_{z^[L]} ℓ(y, f^[L](z^[L]))` expressed through `ŷ`.
pub fn grad_z_last(head: HeadKind, y: &Target, yhat: &DenseVector) -> Result<DenseVector> {
    y.check_for(head, yhat.len())?;
    let y = y.as_vector();
    let factor = match head {
        HeadKind::SigmoidBce | HeadKind::SoftmaxCe => -1.0,
        HeadKind::IdentitySe => -2.0,
    };
    Ok(y.iter().zip(yhat.iter()).map(|(yi, pi)| factor * (yi - pi)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn heads_parse_by_config_name() {
        assert_eq!("softmax_ce".parse::<HeadKind>(), Ok(HeadKind::SoftmaxCe));
        assert_eq!("identity_se".parse::<HeadKind>(), Ok(HeadKind::IdentitySe));
        assert!("softmax".parse::<HeadKind>().unwrap_err().contains("sigmoid_bce"));
        assert_eq!("relu".parse::<crate::ActivationKind>(), Ok(crate::ActivationKind::Relu));
    }

    fn v(data: &[f64]) -> DenseVector {
        DenseVector::new(data.to_vec()).unwrap()
    }

    #[test]
    fn head_apply_examples() {
        assert_eq!(
            head_apply(HeadKind::IdentitySe, &v(&[1.5, -2.0])).unwrap().as_slice(),
            &[1.5, -2.0]
        );
        assert_eq!(head_apply(HeadKind::SigmoidBce, &v(&[0.0])).unwrap().as_slice(), &[0.5]);
        assert_eq!(
            head_apply(HeadKind::SoftmaxCe, &v(&[0.0, 0.0])).unwrap().as_slice(),
            &[0.5, 0.5]
        );
    }

    #[test]
    fn head_apply_rejects_bad_width() {
        assert!(matches!(
            head_apply(HeadKind::SigmoidBce, &v(&[0.0, 1.0])),
            Err(Error::Dimension { .. })
        ));
        assert!(matches!(
            head_apply(HeadKind::SoftmaxCe, &v(&[0.0])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn loss_examples() {
        let se = loss_eval(
            HeadKind::IdentitySe,
            &Target::real(vec![1.0, 2.0]).unwrap(),
            &v(&[1.0, 2.0]),
        )
        .unwrap();
        assert_eq!(se, 0.0);
        let bce = loss_eval(HeadKind::SigmoidBce, &Target::binary(1.0).unwrap(), &v(&[0.5])).unwrap();
        assert!((bce - 2f64.ln()).abs() < 1e-15);
        let third = 1.0 / 3.0;
        let ce = loss_eval(HeadKind::SoftmaxCe, &Target::one_hot(0, 3).unwrap(), &v(&[third; 3])).unwrap();
        assert!((ce - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn fused_gradient_examples() {
        let g = grad_z_last(HeadKind::SoftmaxCe, &Target::one_hot(0, 2).unwrap(), &v(&[0.7, 0.3])).unwrap();
        assert!((g[0] + 0.3).abs() < 1e-15 && (g[1] - 0.3).abs() < 1e-15);
        let g = grad_z_last(
            HeadKind::IdentitySe,
            &Target::real(vec![1.0, 2.0]).unwrap(),
            &v(&[1.0, 2.0]),
        )
        .unwrap();
        assert_eq!(g.as_slice(), &[0.0, 0.0]);
        let g = grad_z_last(HeadKind::SigmoidBce, &Target::binary(1.0).unwrap(), &v(&[0.8])).unwrap();
        assert!((g[0] + 0.2).abs() < 1e-15);
    }

    #[test]
    fn invalid_targets_rejected() {
        assert!(Target::binary(0.5).is_err());
        assert!(Target::one_hot(3, 3).is_err());
        let two_hot = Target::OneHot(v(&[1.0, 1.0, 0.0]));
        assert!(matches!(
            loss_eval(HeadKind::SoftmaxCe, &two_hot, &v(&[0.3, 0.3, 0.4])),
            Err(Error::InvalidTarget(_))
        ));
        assert!(matches!(
            loss_eval(
                HeadKind::SoftmaxCe,
                &Target::real(vec![1.0, 0.0]).unwrap(),
                &v(&[0.5, 0.5])
            ),
            Err(Error::InvalidTarget(_))
        ));
        assert!(matches!(
            grad_z_last(HeadKind::IdentitySe, &Target::real(vec![1.0]).unwrap(), &v(&[0.5, 0.5])),
            Err(Error::InvalidTarget(_))
        ));
    }

    #[test]
    fn clamp_keeps_loss_finite() {
        let l = loss_eval(HeadKind::SigmoidBce, &Target::binary(1.0).unwrap(), &v(&[0.0])).unwrap();
        assert!(l.is_finite() && (l + PROB_EPS.ln()).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn ce_gradient_sums_to_zero(z in proptest::collection::vec(-5.0f64..5.0, 2..7), class in 0usize..6) {
            let c = z.len();
            let y = Target::one_hot(class % c, c).unwrap();
            let yhat = head_apply(HeadKind::SoftmaxCe, &v(&z)).unwrap();
            let g = grad_z_last(HeadKind::SoftmaxCe, &y, &yhat).unwrap();
            prop_assert!(g.iter().sum::<f64>().abs() < 1e-14);
        }

        #[test]
        fn losses_are_nonnegative(z in proptest::collection::vec(-20.0f64..20.0, 2..7), bit in any::<bool>()) {
            let c = z.len();
            let ce = loss_eval(HeadKind::SoftmaxCe, &Target::one_hot(0, c).unwrap(),
                &head_apply(HeadKind::SoftmaxCe, &v(&z)).unwrap()).unwrap();
            prop_assert!(ce >= 0.0);
            let y = Target::binary(if bit { 1.0 } else { 0.0 }).unwrap();
            let bce = loss_eval(HeadKind::SigmoidBce, &y, &head_apply(HeadKind::SigmoidBce, &v(&z[..1])).unwrap()).unwrap();
            prop_assert!(bce >= 0.0);
            let se = loss_eval(HeadKind::IdentitySe, &Target::real(vec![0.0; c]).unwrap(), &v(&z)).unwrap();
            prop_assert!(se >= 0.0);
        }
    }
}
