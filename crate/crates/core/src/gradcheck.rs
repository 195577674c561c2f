//! Gradient oracles that share no code with the backward pass: central finite
//! differences and the textbook closed forms for one-layer models.

use std::fmt;

use rand::Rng;
use serde::Serialize;

use crate::activations::{sigmoid, ActivationKind};
use crate::error::{Error, Result};
use crate::layers::DenseLayer;
use crate::losses::{HeadKind, Target};
use crate::network::{backprop, backprop_dense_reference, forward, loss_of_params, Network, NetworkShape, ParamLayout};
use crate::numkernel::{DenseMatrix, DenseVector};

/// Floor on the denominator of the symmetric relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-12;

/// Central-difference formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stencil {
    /// `(f(θ + h e_i) − f(θ − h e_i)) / 2h`, error `O(h²)`.
    #[default]
    Central2,
    /// `(8(f(θ + h e_i) − f(θ − h e_i)) − (f(θ + 2h e_i) − f(θ − 2h e_i))) / 12h`,
    /// error `O(h⁴)`. Reaches `2h` from `θ`.
    Central4,
}

impl Stencil {
    /// Step exponent balancing truncation against roundoff:
    /// `ε^(1/3)` for the second-order formula, `ε^(1/5)` for the fourth.
    fn base_step(self) -> f64 {
        match self {
            Stencil::Central2 => f64::EPSILON.cbrt(),
            Stencil::Central4 => f64::EPSILON.powf(0.2),
        }
    }

    /// Kink margin that keeps the whole stencil on one side of every ReLU
    /// kink for inputs and parameters of order one.
    pub fn kink_margin(self) -> f64 {
        match self {
            Stencil::Central2 => KINK_MARGIN,
            Stencil::Central4 => 1e-2,
        }
    }
}

/// Per-coordinate step for central differences.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum StepRule {
    /// `h_i = base · max(1, |θ_i|)` with the stencil's base step
    /// (`cbrt(ε_machine)` for [`Stencil::Central2`]).
    #[default]
    Scaled,
    Fixed(f64),
}

impl StepRule {
    pub fn step(self, theta_i: f64, stencil: Stencil) -> f64 {
        match self {
            StepRule::Scaled => stencil.base_step() * theta_i.abs().max(1.0),
            StepRule::Fixed(h) => h,
        }
    }
}

/// `g_i = (f(θ + h_i e_i) − f(θ − h_i e_i)) / (2 h_i)`, coordinates in order.
pub fn finite_diff_gradient<F>(f: F, theta: &[f64], rule: StepRule) -> Result<DenseVector>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    finite_diff_gradient_with(f, theta, Stencil::Central2, rule)
}

pub fn finite_diff_gradient_with<F>(f: F, theta: &[f64], stencil: Stencil, rule: StepRule) -> Result<DenseVector>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let mut point = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    let eval = |i: usize, offset: f64, point: &mut Vec<f64>| -> Result<f64> {
        point[i] = theta[i] + offset;
        let value = f(point)?;
        point[i] = theta[i];
        if !value.is_finite() {
            return Err(Error::OracleFailure { index: i, value });
        }
        Ok(value)
    };
    for (i, &t) in theta.iter().enumerate() {
        let h = rule.step(t, stencil);
        if h.is_nan() || h <= 0.0 {
            return Err(Error::OracleFailure { index: i, value: h });
        }
        let near = eval(i, h, &mut point)? - eval(i, -h, &mut point)?;
        let g = match stencil {
            Stencil::Central2 => near / (2.0 * h),
            Stencil::Central4 => {
                let far = eval(i, 2.0 * h, &mut point)? - eval(i, -2.0 * h, &mut point)?;
                (8.0 * near - far) / (12.0 * h)
            }
        };
        grad.push(g);
    }
    Ok(DenseVector::from_vec_unchecked(grad))
}

/// `|a − b| / max(floor, |a| + |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(REL_ERROR_FLOOR)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockError {
    /// 1-based layer number.
    pub layer: usize,
    /// `"W"` or `"b"`.
    pub part: &'static str,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// 0-based index of the worst component; `None` for empty inputs.
    pub worst_index: Option<usize>,
    pub blocks: Vec<BlockError>,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradCheckReport {
    /// Fills [`GradCheckReport::blocks`] from a parameter layout.
    pub fn with_layout(mut self, g1: &[f64], g2: &[f64], layout: &ParamLayout) -> Self {
        self.blocks = layout
            .blocks()
            .iter()
            .enumerate()
            .flat_map(|(l, b)| [(l, "W", b.offset_w..b.offset_b), (l, "b", b.offset_b..b.end())])
            .map(|(l, part, range)| BlockError {
                layer: l + 1,
                part,
                max_rel_error: range.map(|i| relative_error(g1[i], g2[i])).fold(0.0, f64::max),
            })
            .collect();
        self
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{}: max relative error {:.3e} (tolerance {:.1e})",
            if self.pass { "PASS" } else { "FAIL" },
            self.max_rel_error,
            self.tolerance
        )?;
        if let Some(i) = self.worst_index {
            writeln!(f, "  worst component: {i}")?;
        }
        for b in &self.blocks {
            writeln!(f, "  layer {} {}: {:.3e}", b.layer, b.part, b.max_rel_error)?;
        }
        Ok(())
    }
}

pub fn compare_gradients(g1: &[f64], g2: &[f64], tol: f64) -> Result<GradCheckReport> {
    if g1.len() != g2.len() {
        return Err(Error::dim("compare_gradients", g1.len(), g2.len()));
    }
    let mut max = 0.0;
    let mut worst = None;
    for (i, (a, b)) in g1.iter().zip(g2).enumerate() {
        let e = relative_error(*a, *b);
        if worst.is_none() || e > max {
            max = e;
            worst = Some(i);
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max,
        worst_index: worst,
        blocks: Vec::new(),
        tolerance: tol,
        pass: max <= tol,
    })
}

/// Pre-activations closer than this to a ReLU kink invalidate the
/// finite-difference oracle; such samples are redrawn.
pub const KINK_MARGIN: f64 = 1e-4;

/// A network with one input and label.
#[derive(Debug, Clone)]
pub struct Instance {
    pub network: Network,
    pub x: DenseVector,
    pub y: Target,
}

/// True if any ReLU layer has a pre-activation within `margin` of zero.
pub fn near_relu_kink(network: &Network, x: &[f64], margin: f64) -> Result<bool> {
    let trace = forward(network, x)?;
    Ok(network
        .layers()
        .iter()
        .zip(&trace.z)
        .any(|(layer, z)| layer.activation() == Some(ActivationKind::Relu) && z.iter().any(|v| v.abs() < margin)))
}

/// A label valid for `head` with `dim` outputs.
pub fn random_target<R: Rng + ?Sized>(head: HeadKind, dim: usize, rng: &mut R) -> Target {
    match head {
        HeadKind::SigmoidBce => Target::Binary(if rng.random_bool(0.5) { 1.0 } else { 0.0 }),
        HeadKind::SoftmaxCe => Target::one_hot(rng.random_range(0..dim), dim).expect("class in range"),
        HeadKind::IdentitySe => Target::Real((0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect()),
    }
}

/// Seeded network, input uniform on `[−1, 1]` and a random label, redrawn
/// (network and input) until no ReLU pre-activation is within `margin` of
/// zero.
pub fn sample_instance<R: Rng + ?Sized>(shape: &NetworkShape, margin: f64, rng: &mut R) -> Instance {
    loop {
        let network = Network::random(shape, rng);
        let x: DenseVector = (0..shape.input_dim()).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let y = random_target(shape.head(), shape.output_dim(), rng);
        if !near_relu_kink(&network, &x, margin).expect("shapes agree") {
            return Instance { network, x, y };
        }
    }
}

/// Structured gradient checked against the dense reference and against
/// central differences of the loss.
#[derive(Debug, Clone, Serialize)]
pub struct TriangleReport {
    pub loss: f64,
    pub dense: GradCheckReport,
    pub finite_diff: GradCheckReport,
}

impl TriangleReport {
    pub fn pass(&self) -> bool {
        self.dense.pass && self.finite_diff.pass
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriangleTolerances {
    pub dense: f64,
    pub finite_diff: f64,
    pub stencil: Stencil,
}

impl Default for TriangleTolerances {
    fn default() -> Self {
        TriangleTolerances {
            dense: 1e-12,
            finite_diff: 1e-6,
            stencil: Stencil::Central2,
        }
    }
}

pub fn oracle_triangle(instance: &Instance, tol: TriangleTolerances) -> Result<TriangleReport> {
    let Instance { network, x, y } = instance;
    let structured = backprop(network, x, y)?;
    let dense = backprop_dense_reference(network, x, y)?;
    let shape = network.shape();
    let layout = shape.layout();
    let theta = network.params().theta;
    let fd = finite_diff_gradient_with(
        |t| loss_of_params(&shape, t, x, y),
        &theta,
        tol.stencil,
        StepRule::Scaled,
    )?;
    Ok(TriangleReport {
        loss: structured.loss,
        dense: compare_gradients(&structured.grad, &dense.grad, tol.dense)?.with_layout(
            &structured.grad,
            &dense.grad,
            &layout,
        ),
        finite_diff: compare_gradients(&structured.grad, &fd, tol.finite_diff)?.with_layout(
            &structured.grad,
            &fd,
            &layout,
        ),
    })
}

/// The four one-layer models with vector weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ClassicModelKind {
    /// `x ∈ ℝ`, `ŷ = wx + b`, squared error.
    SimpleLinearRegression,
    /// `x ∈ ℝ²`, `ŷ = σ(wᵀx + b)`, binary cross entropy.
    SimpleBinaryClassifier,
    /// `x ∈ ℝⁿ`, `ŷ = wᵀx + b`, squared error.
    MultipleLinearRegression,
    /// `x ∈ ℝⁿ`, `ŷ = σ(wᵀx + b)`, binary cross entropy.
    LogisticRegression,
}

impl ClassicModelKind {
    pub const ALL: [ClassicModelKind; 4] = [
        ClassicModelKind::SimpleLinearRegression,
        ClassicModelKind::SimpleBinaryClassifier,
        ClassicModelKind::MultipleLinearRegression,
        ClassicModelKind::LogisticRegression,
    ];

    /// Fixed input width, or `None` when any `n ≥ 1` is allowed.
    pub fn input_dim(self) -> Option<usize> {
        match self {
            ClassicModelKind::SimpleLinearRegression => Some(1),
            ClassicModelKind::SimpleBinaryClassifier => Some(2),
            _ => None,
        }
    }

    pub fn head(self) -> HeadKind {
        match self {
            ClassicModelKind::SimpleLinearRegression | ClassicModelKind::MultipleLinearRegression => {
                HeadKind::IdentitySe
            }
            _ => HeadKind::SigmoidBce,
        }
    }

    fn check(self, x: &[f64], theta: &[f64]) -> Result<()> {
        if x.is_empty() || self.input_dim().is_some_and(|n| n != x.len()) {
            return Err(Error::dim(
                "closed_form_one_layer_gradient",
                format!("input width for {self:?}"),
                x.len(),
            ));
        }
        if theta.len() != x.len() + 1 {
            return Err(Error::dim("closed_form_one_layer_gradient", x.len() + 1, theta.len()));
        }
        Ok(())
    }

    /// Equivalent one-layer network with `W = w` (`n × 1`) and `b`.
    pub fn as_network(self, theta: &[f64]) -> Result<Network> {
        let n = theta.len() - 1;
        let w = DenseMatrix::new(n, 1, theta[..n].to_vec())?;
        let b = DenseVector::new(vec![theta[n]])?;
        Network::new(vec![DenseLayer::new(w, b, None)?], self.head())
    }
}

/// `ŷ` with `θ = [w; b]`.
pub fn classic_prediction(kind: ClassicModelKind, x: &[f64], theta: &[f64]) -> Result<f64> {
    kind.check(x, theta)?;
    let n = x.len();
    let linear: f64 = x.iter().zip(&theta[..n]).map(|(a, b)| a * b).sum::<f64>() + theta[n];
    Ok(match kind.head() {
        HeadKind::IdentitySe => linear,
        _ => sigmoid(linear),
    })
}

/// `−2[x; 1](y − ŷ)` for the regressions and `−[x; 1](y − σ(wᵀx + b))` for
/// the classifiers.
pub fn closed_form_one_layer_gradient(kind: ClassicModelKind, x: &[f64], y: f64, theta: &[f64]) -> Result<DenseVector> {
    if kind.head() == HeadKind::SigmoidBce {
        Target::binary(y)?;
    }
    let yhat = classic_prediction(kind, x, theta)?;
    let factor = match kind.head() {
        HeadKind::IdentitySe => -2.0,
        _ => -1.0,
    };
    let resid = y - yhat;
    Ok(x.iter()
        .chain(std::iter::once(&1.0))
        .map(|xi| factor * xi * resid)
        .collect())
}

/// Loss of the classic model, written out directly for the finite-difference
/// oracle.
pub fn classic_loss(kind: ClassicModelKind, x: &[f64], y: f64, theta: &[f64]) -> Result<f64> {
    let yhat = classic_prediction(kind, x, theta)?;
    Ok(match kind.head() {
        HeadKind::IdentitySe => (y - yhat) * (y - yhat),
        _ => -(y * yhat.ln() + (1.0 - y) * (1.0 - yhat).ln()),
    })
}
