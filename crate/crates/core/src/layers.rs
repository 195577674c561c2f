//! Fully connected layer `z = Wᵀx + b` and its parameter Jacobian.
//!
//! With parameters ordered as `[vec_columns(W); b]`, the Jacobian of `z` with
//! respect to them is the `n_out × (n_in·n_out + n_out)` block matrix
//!
//! ```text
//! [ xᵀ  0  …  0 |    ]
//! [ 0   xᵀ …  0 |  I ]
//! [ …           |    ]
//! [ 0   0  … xᵀ |    ]
//! ```
//!
//! [`LocalJacobian`] keeps only `x` and `n_out`; its transpose-product is an
//! outer product and is what the backward pass uses.

use crate::activations::{apply_activation, ActivationKind};
use crate::error::{Error, Result};
use crate::numkernel::{check_len, vec_columns, DenseMatrix, DenseVector};

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `n_in × n_out`.
    weights: DenseMatrix,
    bias: DenseVector,
    /// `None` on the last layer, whose nonlinearity belongs to the head.
    activation: Option<ActivationKind>,
}

impl DenseLayer {
    pub fn new(weights: DenseMatrix, bias: DenseVector, activation: Option<ActivationKind>) -> Result<Self> {
        if bias.len() != weights.cols() {
            return Err(Error::dim(
                "DenseLayer::new",
                format!("bias of length {}", weights.cols()),
                bias.len(),
            ));
        }
        if !weights.is_finite() || !bias.is_finite() {
            return Err(Error::NonFinite("DenseLayer::new"));
        }
        if let Some(kind) = activation {
            if !kind.is_elementwise() {
                return Err(Error::InvalidHead(format!("{kind:?} is not allowed in a hidden layer")));
            }
        }
        Ok(DenseLayer {
            weights,
            bias,
            activation,
        })
    }

    pub fn weights(&self) -> &DenseMatrix {
        &self.weights
    }

    pub fn bias(&self) -> &DenseVector {
        &self.bias
    }

    pub fn activation(&self) -> Option<ActivationKind> {
        self.activation
    }

    pub fn n_in(&self) -> usize {
        self.weights.rows()
    }

    pub fn n_out(&self) -> usize {
        self.weights.cols()
    }

    pub fn param_count(&self) -> usize {
        self.n_in() * self.n_out() + self.n_out()
    }

    /// Returns `(z, a)`.
    pub fn forward(&self, input: &[f64]) -> Result<(DenseVector, DenseVector)> {
        check_len("dense_forward", self.n_in(), input.len())?;
        let mut z = self.weights.t_matvec(input)?;
        for (zi, bi) in z.iter_mut().zip(self.bias.iter()) {
            *zi += bi;
        }
        let a = match self.activation {
            Some(kind) => apply_activation(kind, &z)?,
            None => z.clone(),
        };
        Ok((z, a))
    }
}

/// Free-function form of [`DenseLayer::forward`].
pub fn dense_forward(layer: &DenseLayer, input: &[f64]) -> Result<(DenseVector, DenseVector)> {
    layer.forward(input)
}

/// Structured `J_{W,b} z` for one layer evaluated at input `a_prev`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalJacobian {
    a_prev: DenseVector,
    out_dim: usize,
}

impl LocalJacobian {
    pub fn a_prev(&self) -> &DenseVector {
        &self.a_prev
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// Logical `(rows, cols)`.
    pub fn shape(&self) -> (usize, usize) {
        let n_in = self.a_prev.len();
        (self.out_dim, n_in * self.out_dim + self.out_dim)
    }

    pub fn materialize(&self) -> DenseMatrix {
        materialize_local_jacobian(self)
    }

    /// `Jᵀ v = [vec_columns(a_prev · vᵀ); v]`.
    pub fn apply_transpose(&self, v: &[f64]) -> Result<DenseVector> {
        apply_local_jacobian_transpose(self, v)
    }
}

pub fn local_param_jacobian(a_prev: &DenseVector, out_dim: usize) -> Result<LocalJacobian> {
    if a_prev.is_empty() || out_dim == 0 {
        return Err(Error::dim(
            "local_param_jacobian",
            "nonempty input and out_dim >= 1",
            format!("input {} / out_dim {out_dim}", a_prev.len()),
        ));
    }
    Ok(LocalJacobian {
        a_prev: a_prev.clone(),
        out_dim,
    })
}

pub fn materialize_local_jacobian(j: &LocalJacobian) -> DenseMatrix {
    let n_in = j.a_prev.len();
    let (rows, cols) = j.shape();
    let w_len = n_in * j.out_dim;
    let mut m = DenseMatrix::zeros(rows, cols);
    for i in 0..rows {
        for (k, &a) in j.a_prev.iter().enumerate() {
            m[(i, i * n_in + k)] = a;
        }
        m[(i, w_len + i)] = 1.0;
    }
    m
}

pub fn apply_local_jacobian_transpose(j: &LocalJacobian, v: &[f64]) -> Result<DenseVector> {
    check_len("apply_local_jacobian_transpose", j.out_dim, v.len())?;
    let n_in = j.a_prev.len();
    let mut out = Vec::with_capacity(n_in * j.out_dim + j.out_dim);
    for &vj in v {
        out.extend(j.a_prev.iter().map(|a| a * vj));
    }
    out.extend_from_slice(v);
    Ok(DenseVector::from_vec_unchecked(out))
}

/// `vec_columns(W)` followed by `b`: the layer's slice of the parameter vector.
pub fn layer_params(layer: &DenseLayer) -> Vec<f64> {
    let mut out = vec_columns(&layer.weights).into_vec();
    out.extend_from_slice(&layer.bias);
    out
}
