//! Elementwise activations and their diagonal Jacobians.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::DenseVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Relu,
    Sigmoid,
    Identity,
    /// Only valid as the output nonlinearity of a head.
    Softmax,
}

impl ActivationKind {
    pub const ELEMENTWISE: [ActivationKind; 3] =
        [ActivationKind::Relu, ActivationKind::Sigmoid, ActivationKind::Identity];

    pub fn is_elementwise(self) -> bool {
        !matches!(self, ActivationKind::Softmax)
    }
}

/// Parses the serde name of a unit variant, e.g. `"relu"`.
pub(crate) fn parse_name<'a, T: Deserialize<'a>>(s: &'a str) -> std::result::Result<T, String> {
    T::deserialize(serde::de::value::StrDeserializer::<serde::de::value::Error>::new(s)).map_err(|e| e.to_string())
}

impl std::str::FromStr for ActivationKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        parse_name(s)
    }
}

/// Logistic function, evaluated so that `exp` only ever sees a non-positive
/// argument.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax with max subtraction.
pub fn softmax(z: &[f64]) -> Result<DenseVector> {
    if z.len() < 2 {
        return Err(Error::InvalidHead(format!(
            "softmax needs at least 2 entries, got {}",
            z.len()
        )));
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

pub fn apply_activation(kind: ActivationKind, z: &DenseVector) -> Result<DenseVector> {
    Ok(match kind {
        ActivationKind::Relu => z.iter().map(|&v| v.max(0.0)).collect(),
        ActivationKind::Sigmoid => z.iter().map(|&v| sigmoid(v)).collect(),
        ActivationKind::Identity => z.clone(),
        ActivationKind::Softmax => softmax(z)?,
    })
}

/// Diagonal of `J_z f(z)` for an elementwise activation.
///
/// ReLU uses `f'(0) = 0`, so a unit sitting exactly at zero is pruned along
/// with the negative ones.
pub fn activation_jacobian_diag(kind: ActivationKind, z: &DenseVector) -> Result<DenseVector> {
    Ok(match kind {
        ActivationKind::Relu => z.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect(),
        ActivationKind::Sigmoid => z
            .iter()
            .map(|&v| {
                let s = sigmoid(v);
                s * (1.0 - s)
            })
            .collect(),
        ActivationKind::Identity => DenseVector::filled(z.len(), 1.0),
        ActivationKind::Softmax => return Err(Error::UnsupportedActivation(kind)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::DenseMatrix;
    use proptest::prelude::*;

    fn v(data: &[f64]) -> DenseVector {
        DenseVector::new(data.to_vec()).unwrap()
    }

    #[test]
    fn apply_examples() {
        assert_eq!(
            apply_activation(ActivationKind::Sigmoid, &v(&[0.0]))
                .unwrap()
                .as_slice(),
            &[0.5]
        );
        let s = apply_activation(ActivationKind::Softmax, &v(&[0.0, 0.0, 0.0])).unwrap();
        for p in s.iter() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(
            apply_activation(ActivationKind::Relu, &v(&[-1.0, 2.0, 0.0]))
                .unwrap()
                .as_slice(),
            &[0.0, 2.0, 0.0]
        );
    }

    #[test]
    fn softmax_rejects_length_one() {
        assert!(matches!(
            apply_activation(ActivationKind::Softmax, &v(&[1.0])),
            Err(Error::InvalidHead(_))
        ));
    }

    #[test]
    fn stable_at_extremes() {
        assert_eq!(sigmoid(1000.0), 1.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
        let s = softmax(&[1000.0, 0.0, -1000.0]).unwrap();
        assert!(s.is_finite());
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn jacobian_examples() {
        assert_eq!(
            activation_jacobian_diag(ActivationKind::Relu, &v(&[-1.0, 2.0, 0.0]))
                .unwrap()
                .as_slice(),
            &[0.0, 1.0, 0.0]
        );
        assert_eq!(
            activation_jacobian_diag(ActivationKind::Identity, &v(&[3.0, -1.0, 0.0, 9.0]))
                .unwrap()
                .as_slice(),
            &[1.0; 4]
        );
        assert_eq!(
            activation_jacobian_diag(ActivationKind::Sigmoid, &v(&[0.0]))
                .unwrap()
                .as_slice(),
            &[0.25]
        );
        assert!(matches!(
            activation_jacobian_diag(ActivationKind::Softmax, &v(&[0.0, 1.0])),
            Err(Error::UnsupportedActivation(ActivationKind::Softmax))
        ));
    }

    fn vector(max: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-6.0f64..6.0, 1..=max)
    }

    proptest! {
        #[test]
        fn jacobian_matches_central_differences(z in vector(10)) {
            let h = 1e-6;
            for kind in ActivationKind::ELEMENTWISE {
                let zv = DenseVector::new(z.clone()).unwrap();
                let diag = activation_jacobian_diag(kind, &zv).unwrap();
                for i in 0..z.len() {
                    if kind == ActivationKind::Relu && z[i].abs() < 1e-4 {
                        continue;
                    }
                    let mut plus = z.clone();
                    let mut minus = z.clone();
                    plus[i] += h;
                    minus[i] -= h;
                    let fp = apply_activation(kind, &DenseVector::new(plus).unwrap()).unwrap();
                    let fm = apply_activation(kind, &DenseVector::new(minus).unwrap()).unwrap();
                    let fd = (fp[i] - fm[i]) / (2.0 * h);
                    prop_assert!((fd - diag[i]).abs() < 1e-7, "{kind:?} i={i} fd={fd} diag={}", diag[i]);
                }
            }
        }

        #[test]
        fn softmax_is_a_distribution(z in proptest::collection::vec(-50.0f64..50.0, 2..10)) {
            let s = softmax(&z).unwrap();
            prop_assert!((s.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(s.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }

        #[test]
        fn relu_diag_prunes_rows(z in vector(6), seed in any::<u64>()) {
            let n = z.len();
            let zv = DenseVector::new(z.clone()).unwrap();
            let diag = activation_jacobian_diag(ActivationKind::Relu, &zv).unwrap();
            let data: Vec<f64> = (0..n * 4).map(|k| ((seed.wrapping_add(k as u64) % 97) as f64) - 48.0).collect();
            let w = DenseMatrix::new(n, 4, data).unwrap();
            let scaled = DenseMatrix::from_diag(&diag).matmul(&w).unwrap();
            for (i, &zi) in z.iter().enumerate() {
                if zi <= 0.0 {
                    prop_assert!(scaled.row(i).iter().all(|&x| x == 0.0));
                } else {
                    prop_assert_eq!(scaled.row(i), w.row(i));
                }
            }
        }
    }
}
