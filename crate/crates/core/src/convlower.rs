//! Valid, stride-1 2-D convolution written as a matrix product.
//!
//! For an input `X` (`m_X × n_X`) and kernel `K` (`m_K × n_K`),
//! `vec_rows(X ∗ K) = Teop(K) · vec_rows(X)`, where row `(i, j)` of `Teop(K)`
//! holds `K[p][q]` at column `(i + p)·n_X + (j + q)`. A convolution layer with
//! filters `K_r` and bias matrices `B_r` is therefore a dense layer with
//! `W_r = Teop(K_r)ᵀ` and `b_r = vec_rows(B_r)`.
//!
//! `∗` is cross-correlation (no kernel flip), as is usual for CNNs.

use crate::activations::ActivationKind;
use crate::error::{Error, Result};
use crate::layers::DenseLayer;
use crate::numkernel::{vec_rows, DenseMatrix, DenseVector};

fn output_shape(input: (usize, usize), kernel: (usize, usize)) -> Result<(usize, usize)> {
    let (mx, nx) = input;
    let (mk, nk) = kernel;
    if mk == 0 || nk == 0 || mk > mx || nk > nx {
        return Err(Error::dim(
            "convolution",
            format!("nonempty kernel no larger than {mx}x{nx}"),
            format!("{mk}x{nk}"),
        ));
    }
    Ok((mx - mk + 1, nx - nk + 1))
}

/// Sliding-window sum; entry `(i, j) = Σ_{p,q} X[i+p, j+q]·K[p, q]`, summed
/// with `p` outer and `q` inner.
pub fn conv2d_direct(x: &DenseMatrix, k: &DenseMatrix) -> Result<DenseMatrix> {
    let (mo, no) = output_shape(x.shape(), k.shape())?;
    let mut out = DenseMatrix::zeros(mo, no);
    for i in 0..mo {
        for j in 0..no {
            let mut acc = 0.0;
            for p in 0..k.rows() {
                for q in 0..k.cols() {
                    acc += x[(i + p, j + q)] * k[(p, q)];
                }
            }
            out[(i, j)] = acc;
        }
    }
    Ok(out)
}

/// `Teop(K)` for an input of `input_shape`: `(#outputs) × (m_X·n_X)`.
pub fn toeplitz_of_kernel(k: &DenseMatrix, input_shape: (usize, usize)) -> Result<DenseMatrix> {
    let (mo, no) = output_shape(input_shape, k.shape())?;
    let nx = input_shape.1;
    let mut t = DenseMatrix::zeros(mo * no, input_shape.0 * nx);
    for i in 0..mo {
        for j in 0..no {
            let row = i * no + j;
            for p in 0..k.rows() {
                for q in 0..k.cols() {
                    t[(row, (i + p) * nx + (j + q))] = k[(p, q)];
                }
            }
        }
    }
    Ok(t)
}

/// One filter and its output-shaped bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvFilter {
    pub kernel: DenseMatrix,
    pub bias: DenseMatrix,
}

/// Single-channel convolution layer: stride 1, no padding.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec {
    input_shape: (usize, usize),
    filters: Vec<ConvFilter>,
}

impl ConvSpec {
    pub fn new(input_shape: (usize, usize), filters: Vec<ConvFilter>) -> Result<Self> {
        if filters.is_empty() {
            return Err(Error::dim("ConvSpec::new", "at least one filter", 0));
        }
        for (r, f) in filters.iter().enumerate() {
            let out = output_shape(input_shape, f.kernel.shape())?;
            if f.bias.shape() != out {
                return Err(Error::dim(
                    "ConvSpec::new",
                    format!("bias {}x{} for filter {r}", out.0, out.1),
                    format!("{}x{}", f.bias.rows(), f.bias.cols()),
                ));
            }
        }
        Ok(ConvSpec { input_shape, filters })
    }

    /// Filters with zero bias.
    pub fn unbiased(input_shape: (usize, usize), kernels: Vec<DenseMatrix>) -> Result<Self> {
        let filters = kernels
            .into_iter()
            .map(|kernel| {
                let (mo, no) = output_shape(input_shape, kernel.shape())?;
                Ok(ConvFilter {
                    kernel,
                    bias: DenseMatrix::zeros(mo, no),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(input_shape, filters)
    }

    pub fn input_shape(&self) -> (usize, usize) {
        self.input_shape
    }

    pub fn filters(&self) -> &[ConvFilter] {
        &self.filters
    }

    /// `X ∗ K_r + B_r` for every filter.
    pub fn forward_direct(&self, x: &DenseMatrix) -> Result<Vec<DenseMatrix>> {
        if x.shape() != self.input_shape {
            return Err(Error::dim(
                "ConvSpec::forward_direct",
                format!("{:?}", self.input_shape),
                format!("{:?}", x.shape()),
            ));
        }
        self.filters
            .iter()
            .map(|f| conv2d_direct(x, &f.kernel)?.add(&f.bias))
            .collect()
    }
}

/// Per-filter `(W_r, b_r)` with `W_r = Teop(K_r)ᵀ` (`m_X·n_X × #outputs_r`) and
/// `b_r = vec_rows(B_r)`.
pub fn conv_layer_to_dense(spec: &ConvSpec) -> Result<Vec<(DenseMatrix, DenseVector)>> {
    spec.filters
        .iter()
        .map(|f| {
            let w = toeplitz_of_kernel(&f.kernel, spec.input_shape)?.transpose();
            Ok((w, vec_rows(&f.bias)))
        })
        .collect()
}

/// All filters as one dense layer: weight blocks side by side in filter order,
/// so output unit `r·#outputs + k` is entry `k` of filter `r`'s feature map.
pub fn lower_to_dense_layer(spec: &ConvSpec, activation: Option<ActivationKind>) -> Result<DenseLayer> {
    let parts = conv_layer_to_dense(spec)?;
    let weights: Vec<DenseMatrix> = parts.iter().map(|(w, _)| w.clone()).collect();
    let bias: DenseVector = parts.iter().flat_map(|(_, b)| b.iter().copied()).collect();
    DenseLayer::new(DenseMatrix::hconcat(&weights)?, bias, activation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::DenseVector;
    use proptest::prelude::*;

    fn m<R: AsRef<[f64]>>(rows: &[R]) -> DenseMatrix {
        DenseMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn direct_examples() {
        let k = m(&[[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(
            conv2d_direct(&DenseMatrix::identity(3), &k).unwrap(),
            m(&[[2.0, 0.0], [0.0, 2.0]])
        );

        let x = DenseMatrix::new(3, 4, (0..12).map(f64::from).collect()).unwrap();
        assert_eq!(conv2d_direct(&x, &m(&[[1.0]])).unwrap(), x);

        let ones = DenseMatrix::new(3, 3, vec![1.0; 9]).unwrap();
        let k = DenseMatrix::new(2, 2, vec![1.0; 4]).unwrap();
        assert_eq!(
            conv2d_direct(&ones, &k).unwrap(),
            DenseMatrix::new(2, 2, vec![4.0; 4]).unwrap()
        );

        assert!(matches!(conv2d_direct(&k, &ones), Err(Error::Dimension { .. })));
    }

    #[test]
    fn toeplitz_three_by_three_two_by_two() {
        let (k1, k2, k3, k4) = (1.0, 2.0, 3.0, 4.0);
        let t = toeplitz_of_kernel(&m(&[[k1, k2], [k3, k4]]), (3, 3)).unwrap();
        assert_eq!(t.shape(), (4, 9));
        assert_eq!(t.row(0), &[k1, k2, 0.0, k3, k4, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(t.row(1), &[0.0, k1, k2, 0.0, k3, k4, 0.0, 0.0, 0.0]);
        assert_eq!(t.row(2), &[0.0, 0.0, 0.0, k1, k2, 0.0, k3, k4, 0.0]);
        assert_eq!(t.row(3), &[0.0, 0.0, 0.0, 0.0, k1, k2, 0.0, k3, k4]);
    }

    #[test]
    fn one_by_one_kernel_is_scaled_identity() {
        let t = toeplitz_of_kernel(&m(&[[2.5]]), (2, 3)).unwrap();
        assert_eq!(t, DenseMatrix::identity(6).scale(2.5));
    }

    #[test]
    fn identical_filters_give_identical_blocks() {
        let k = m(&[[1.0, -1.0], [0.5, 2.0]]);
        let spec = ConvSpec::unbiased((3, 3), vec![k.clone(), k]).unwrap();
        let parts = conv_layer_to_dense(&spec).unwrap();
        assert_eq!(parts[0], parts[1]);
        assert_eq!(parts[0].0.shape(), (9, 4));
    }

    #[test]
    fn zero_kernel_outputs_bias() {
        let bias = m(&[[1.0, 2.0], [3.0, 4.0]]);
        let spec = ConvSpec::new(
            (3, 3),
            vec![ConvFilter {
                kernel: DenseMatrix::zeros(2, 2),
                bias: bias.clone(),
            }],
        )
        .unwrap();
        let layer = lower_to_dense_layer(&spec, None).unwrap();
        let (z, _) = layer.forward(&[5.0, -1.0, 2.0, 0.0, 3.0, 8.0, -2.0, 1.0, 9.0]).unwrap();
        assert_eq!(z, vec_rows(&bias));
    }

    #[test]
    fn spec_validation() {
        assert!(ConvSpec::unbiased((2, 2), vec![DenseMatrix::zeros(3, 1)]).is_err());
        assert!(ConvSpec::new(
            (3, 3),
            vec![ConvFilter {
                kernel: DenseMatrix::zeros(2, 2),
                bias: DenseMatrix::zeros(3, 3),
            }]
        )
        .is_err());
        assert!(ConvSpec::unbiased((3, 3), vec![]).is_err());
    }

    fn conv_case() -> impl Strategy<Value = (DenseMatrix, DenseMatrix)> {
        (1usize..=6, 1usize..=6)
            .prop_flat_map(|(mx, nx)| (Just(mx), Just(nx), 1..=mx, 1..=nx))
            .prop_flat_map(|(mx, nx, mk, nk)| {
                (
                    proptest::collection::vec(-3.0f64..3.0, mx * nx)
                        .prop_map(move |d| DenseMatrix::new(mx, nx, d).unwrap()),
                    proptest::collection::vec(-3.0f64..3.0, mk * nk)
                        .prop_map(move |d| DenseMatrix::new(mk, nk, d).unwrap()),
                )
            })
    }

    proptest! {
        #[test]
        fn toeplitz_rows_have_kernel_support((x, k) in conv_case()) {
            let t = toeplitz_of_kernel(&k, x.shape()).unwrap();
            let support = k.rows() * k.cols();
            for i in 0..t.rows() {
                // nonzero kernel entries are dense with probability one here
                let nz = t.row(i).iter().filter(|&&v| v != 0.0).count();
                prop_assert_eq!(nz, support);
            }
            // Column sums of the support pattern count how many windows cover each pixel.
            let ones = DenseMatrix::new(k.rows(), k.cols(), vec![1.0; support]).unwrap();
            let pattern = toeplitz_of_kernel(&ones, x.shape()).unwrap();
            let coverage = pattern.t_matvec(&vec![1.0; pattern.rows()]).unwrap();
            let (mo, no) = (x.rows() - k.rows() + 1, x.cols() - k.cols() + 1);
            for r in 0..x.rows() {
                for c in 0..x.cols() {
                    let rows_cov = (0..mo).filter(|&i| i <= r && r < i + k.rows()).count();
                    let cols_cov = (0..no).filter(|&j| j <= c && c < j + k.cols()).count();
                    prop_assert_eq!(coverage[r * x.cols() + c], (rows_cov * cols_cov) as f64);
                }
            }
        }

        #[test]
        fn lowered_layer_matches_direct((x, k) in conv_case(), bias_seed in -2.0f64..2.0) {
            let (mo, no) = (x.rows() - k.rows() + 1, x.cols() - k.cols() + 1);
            let bias = DenseMatrix::new(mo, no, (0..mo * no).map(|i| bias_seed + i as f64).collect()).unwrap();
            let spec = ConvSpec::new(x.shape(), vec![ConvFilter { kernel: k.clone(), bias }]).unwrap();
            let layer = lower_to_dense_layer(&spec, None).unwrap();
            let (z, _) = layer.forward(&vec_rows(&x)).unwrap();
            let direct: DenseVector = vec_rows(&spec.forward_direct(&x).unwrap()[0]);
            for (a, b) in z.iter().zip(direct.iter()) {
                prop_assert!((a - b).abs() <= 1e-14 * (1.0 + b.abs()));
            }
        }
    }
}
