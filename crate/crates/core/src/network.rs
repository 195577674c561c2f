//! Chains of dense layers feeding a head, and the two backward passes.
//!
//! The gradient of the loss with respect to all parameters factors as
//!
//! ```text
//! ∇_θ ℓ = (J_θ z^[L])ᵀ ∇_{z^[L]} ℓ
//! ```
//!
//! where `J_θ z^[L] = [J_{W^[1],b^[1]} z^[L] | … | J_{W^[L],b^[L]} z^[L]]` and
//! each block is
//!
//! ```text
//! W^[L]ᵀ D^[L-1] W^[L-1]ᵀ … D^[l] [blockdiag(a^[l-1]ᵀ) | I]
//! ```
//!
//! with `D^[k] = diag(f'(z^[k]))`.
//!
//! [`backprop`] associates those products right to left: it carries the
//! backward vector `δ^[l] = D^[l] W^[l+1] δ^[l+1]` (starting from
//! `δ^[L] = ∇_{z^[L]} ℓ`) and emits each block as the outer product
//! `a^[l-1] δ^[l]ᵀ` followed by `δ^[l]`. Rows of `W` belonging to units with
//! `f'(z) = 0` are skipped entirely.
//!
//! [`backprop_dense_reference`] builds every Jacobian block as a dense matrix,
//! concatenates them and multiplies once. It exists as an oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::activations::{activation_jacobian_diag, ActivationKind};
use crate::error::{Error, Result};
use crate::layers::{layer_params, local_param_jacobian, DenseLayer};
use crate::losses::{grad_z_last, head_apply, loss_eval, HeadKind, Target};
use crate::numkernel::{dot, unvec, DenseMatrix, DenseVector};

/// Default parameter cap for [`backprop_dense_reference`].
pub const DENSE_REFERENCE_CAP: usize = 20_000;

/// Layer widths, hidden activations and head, without any parameter values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkShape {
    /// `[n_0, n_1, …, n_L]`; `n_0` is the input width.
    dims: Vec<usize>,
    /// One per hidden layer (`L − 1` entries).
    hidden: Vec<ActivationKind>,
    head: HeadKind,
}

impl NetworkShape {
    pub fn new(dims: Vec<usize>, hidden: Vec<ActivationKind>, head: HeadKind) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::dim(
                "NetworkShape::new",
                "at least input and output widths",
                dims.len(),
            ));
        }
        if dims.contains(&0) {
            return Err(Error::dim("NetworkShape::new", "nonzero widths", format!("{dims:?}")));
        }
        if hidden.len() != dims.len() - 2 {
            return Err(Error::dim(
                "NetworkShape::new",
                format!("{} hidden activations", dims.len() - 2),
                hidden.len(),
            ));
        }
        if let Some(kind) = hidden.iter().find(|k| !k.is_elementwise()) {
            return Err(Error::InvalidHead(format!("{kind:?} is not allowed in a hidden layer")));
        }
        head.check_dim(*dims.last().unwrap())?;
        Ok(NetworkShape { dims, hidden, head })
    }

    /// Same hidden activation on every hidden layer.
    pub fn uniform(dims: Vec<usize>, hidden: ActivationKind, head: HeadKind) -> Result<Self> {
        let n = dims.len().saturating_sub(2);
        Self::new(dims, vec![hidden; n], head)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn hidden_activations(&self) -> &[ActivationKind] {
        &self.hidden
    }

    pub fn head(&self) -> HeadKind {
        self.head
    }

    pub fn depth(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    /// Activation of layer `l` (0-based), `None` for the last layer.
    pub fn activation(&self, l: usize) -> Option<ActivationKind> {
        self.hidden.get(l).copied()
    }

    pub fn layout(&self) -> ParamLayout {
        let mut blocks = Vec::with_capacity(self.depth());
        let mut offset = 0;
        for w in self.dims.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            blocks.push(LayerBlock {
                offset_w: offset,
                offset_b: offset + n_in * n_out,
                n_in,
                n_out,
            });
            offset += n_in * n_out + n_out;
        }
        ParamLayout { blocks, len: offset }
    }

    pub fn param_count(&self) -> usize {
        self.layout().len()
    }
}

/// Where layer `l`'s `vec_columns(W)` and `b` sit inside `θ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerBlock {
    pub offset_w: usize,
    pub offset_b: usize,
    pub n_in: usize,
    pub n_out: usize,
}

impl LayerBlock {
    pub fn end(&self) -> usize {
        self.offset_b + self.n_out
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset_w..self.end()
    }
}

/// Contiguous `[vec(W^[1]); b^[1]; …; vec(W^[L]); b^[L]]` layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    blocks: Vec<LayerBlock>,
    len: usize,
}

impl ParamLayout {
    pub fn blocks(&self) -> &[LayerBlock] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Layer (0-based) and whether the index falls in the bias part.
    pub fn locate(&self, index: usize) -> Option<(usize, bool)> {
        self.blocks
            .iter()
            .position(|b| b.range().contains(&index))
            .map(|l| (l, index >= self.blocks[l].offset_b))
    }
}

/// Flattened parameters with their layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub theta: DenseVector,
    pub layout: ParamLayout,
}

impl ParamVector {
    pub fn new(theta: DenseVector, layout: ParamLayout) -> Result<Self> {
        if theta.len() != layout.len() {
            return Err(Error::dim("ParamVector::new", layout.len(), theta.len()));
        }
        Ok(ParamVector { theta, layout })
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn block(&self, layer: usize) -> &[f64] {
        &self.theta[self.layout.blocks[layer].range()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<DenseLayer>,
    head: HeadKind,
}

impl Network {
    pub fn new(layers: Vec<DenseLayer>, head: HeadKind) -> Result<Self> {
        let Some(last) = layers.last() else {
            return Err(Error::dim("Network::new", "at least one layer", 0));
        };
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[0].n_out() != pair[1].n_in() {
                return Err(Error::dim(
                    "Network::new",
                    format!("layer {} input width {}", l + 2, pair[0].n_out()),
                    pair[1].n_in(),
                ));
            }
        }
        if let Some(l) = layers[..layers.len() - 1].iter().position(|l| l.activation().is_none()) {
            return Err(Error::InvalidHead(format!("hidden layer {} has no activation", l + 1)));
        }
        if last.activation().is_some() {
            return Err(Error::InvalidHead(
                "the last layer's activation is the head; set it to None".into(),
            ));
        }
        head.check_dim(last.n_out())?;
        Ok(Network { layers, head })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn head(&self) -> HeadKind {
        self.head
    }

    pub fn shape(&self) -> NetworkShape {
        let mut dims = vec![self.layers[0].n_in()];
        dims.extend(self.layers.iter().map(|l| l.n_out()));
        let hidden = self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| l.activation().unwrap())
            .collect();
        NetworkShape {
            dims,
            hidden,
            head: self.head,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    /// `θ` in `[vec(W^[1]); b^[1]; …]` order.
    pub fn params(&self) -> ParamVector {
        param_pack(self)
    }

    /// Rebuilds a network of `shape` from a flat parameter slice.
    pub fn from_params(shape: &NetworkShape, theta: &[f64]) -> Result<Network> {
        param_unpack(shape, theta)
    }

    /// Weights and biases uniform on `[−1/√n_in, 1/√n_in]`, drawn layer by
    /// layer in `θ` order.
    pub fn random<R: Rng + ?Sized>(shape: &NetworkShape, rng: &mut R) -> Network {
        let layout = shape.layout();
        let mut theta = Vec::with_capacity(layout.len());
        for block in layout.blocks() {
            let bound = 1.0 / (block.n_in as f64).sqrt();
            for _ in 0..block.n_in * block.n_out + block.n_out {
                theta.push(rng.random_range(-bound..=bound));
            }
        }
        param_unpack(shape, &theta).expect("layout built from shape")
    }

    /// [`Network::random`] with a ChaCha8 generator seeded from `seed`.
    pub fn seeded(shape: &NetworkShape, seed: u64) -> Network {
        Self::random(shape, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardTrace> {
        forward(self, x)
    }

    /// Head output only.
    pub fn predict(&self, x: &[f64]) -> Result<DenseVector> {
        Ok(forward(self, x)?.yhat)
    }
}

pub fn param_pack(network: &Network) -> ParamVector {
    let theta: Vec<f64> = network.layers.iter().flat_map(layer_params).collect();
    ParamVector {
        theta: DenseVector::from_vec_unchecked(theta),
        layout: network.shape().layout(),
    }
}

pub fn param_unpack(shape: &NetworkShape, theta: &[f64]) -> Result<Network> {
    let layout = shape.layout();
    if theta.len() != layout.len() {
        return Err(Error::dim("param_unpack", layout.len(), theta.len()));
    }
    let layers = layout
        .blocks()
        .iter()
        .enumerate()
        .map(|(l, b)| {
            let w = unvec(&theta[b.offset_w..b.offset_b], b.n_in, b.n_out)?;
            let bias = DenseVector::from_vec_unchecked(theta[b.offset_b..b.end()].to_vec());
            DenseLayer::new(w, bias, shape.activation(l))
        })
        .collect::<Result<Vec<_>>>()?;
    Network::new(layers, shape.head)
}

/// Cached forward quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `z[l-1] = z^[l]` for `l = 1..=L`.
    pub z: Vec<DenseVector>,
    /// `a[l] = a^[l]` for `l = 0..=L`; `a[0]` is the input and `a[L] = z^[L]`.
    pub a: Vec<DenseVector>,
    pub yhat: DenseVector,
}

impl ForwardTrace {
    pub fn input(&self) -> &DenseVector {
        &self.a[0]
    }

    pub fn z_last(&self) -> &DenseVector {
        self.z.last().unwrap()
    }
}

pub fn forward(network: &Network, x: &[f64]) -> Result<ForwardTrace> {
    let first = &network.layers[0];
    if x.len() != first.n_in() {
        return Err(Error::dim("forward", first.n_in(), x.len()));
    }
    let mut z = Vec::with_capacity(network.layers.len());
    let mut a = Vec::with_capacity(network.layers.len() + 1);
    a.push(DenseVector::from_vec_unchecked(x.to_vec()));
    for layer in &network.layers {
        let (zl, al) = layer.forward(a.last().unwrap())?;
        z.push(zl);
        a.push(al);
    }
    let yhat = head_apply(network.head, z.last().unwrap())?;
    Ok(ForwardTrace { z, a, yhat })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradResult {
    /// Same layout as [`Network::params`].
    pub grad: DenseVector,
    pub loss: f64,
    pub yhat: DenseVector,
}

/// Backward vectors `δ^[1], …, δ^[L]` given `δ^[L] = g`.
///
/// `δ^[l]_i` is zero without touching row `i` of `W^[l+1]` whenever
/// `f'(z^[l]_i) = 0`.
pub fn backward_vectors(network: &Network, trace: &ForwardTrace, g: DenseVector) -> Result<Vec<DenseVector>> {
    let depth = network.layers.len();
    if g.len() != network.layers[depth - 1].n_out() {
        return Err(Error::dim(
            "backward_vectors",
            network.layers[depth - 1].n_out(),
            g.len(),
        ));
    }
    let mut deltas = vec![DenseVector::default(); depth];
    deltas[depth - 1] = g;
    for l in (0..depth - 1).rev() {
        let kind = network.layers[l].activation().expect("hidden layers have activations");
        let diag = activation_jacobian_diag(kind, &trace.z[l])?;
        let next_w = network.layers[l + 1].weights();
        let next = &deltas[l + 1];
        let delta: DenseVector = diag
            .iter()
            .enumerate()
            .map(|(i, &d)| if d == 0.0 { 0.0 } else { d * dot(next_w.row(i), next) })
            .collect();
        deltas[l] = delta;
    }
    Ok(deltas)
}

/// Places `[vec_columns(a^[l-1] δ^[l]ᵀ); δ^[l]]` for every layer into one
/// gradient vector.
pub fn assemble_gradient(network: &Network, trace: &ForwardTrace, deltas: &[DenseVector]) -> Result<DenseVector> {
    if deltas.len() != network.layers.len() {
        return Err(Error::dim("assemble_gradient", network.layers.len(), deltas.len()));
    }
    let mut grad = Vec::with_capacity(network.param_count());
    for (l, layer) in network.layers.iter().enumerate() {
        let j = local_param_jacobian(&trace.a[l], layer.n_out())?;
        grad.extend_from_slice(&j.apply_transpose(&deltas[l])?);
    }
    Ok(DenseVector::from_vec_unchecked(grad))
}

/// Structured single-sample gradient.
pub fn backprop(network: &Network, x: &[f64], y: &Target) -> Result<GradResult> {
    let trace = forward(network, x)?;
    let loss = loss_eval(network.head, y, &trace.yhat)?;
    let g = grad_z_last(network.head, y, &trace.yhat)?;
    let deltas = backward_vectors(network, &trace, g)?;
    let grad = assemble_gradient(network, &trace, &deltas)?;
    Ok(GradResult {
        grad,
        loss,
        yhat: trace.yhat,
    })
}

/// `J_{W^[l],b^[l]} z^[L]` as a dense `n_L × (n_in·n_out + n_out)` matrix.
fn dense_layer_block(network: &Network, trace: &ForwardTrace, l: usize) -> Result<DenseMatrix> {
    let depth = network.layers.len();
    let local = local_param_jacobian(&trace.a[l], network.layers[l].n_out())?.materialize();
    if l == depth - 1 {
        return Ok(local);
    }
    // W^[L]ᵀ D^[L-1] W^[L-1]ᵀ … D^[l] J_local, multiplied left to right.
    let mut chain = network.layers[depth - 1].weights().transpose();
    for k in (l + 1..depth - 1).rev() {
        let d = diag_matrix(network, trace, k)?;
        chain = chain.matmul(&d)?.matmul(&network.layers[k].weights().transpose())?;
    }
    chain.matmul(&diag_matrix(network, trace, l)?)?.matmul(&local)
}

fn diag_matrix(network: &Network, trace: &ForwardTrace, l: usize) -> Result<DenseMatrix> {
    let kind = network.layers[l].activation().expect("hidden layers have activations");
    Ok(DenseMatrix::from_diag(&activation_jacobian_diag(kind, &trace.z[l])?))
}

/// Dense `J_θ z^[L]` (`n_L × |θ|`).
pub fn full_parameter_jacobian(network: &Network, trace: &ForwardTrace) -> Result<DenseMatrix> {
    let blocks = (0..network.layers.len())
        .map(|l| dense_layer_block(network, trace, l))
        .collect::<Result<Vec<_>>>()?;
    DenseMatrix::hconcat(&blocks)
}

/// Reference gradient from the materialized `J_θ z^[L]`, refusing networks
/// above [`DENSE_REFERENCE_CAP`] parameters.
pub fn backprop_dense_reference(network: &Network, x: &[f64], y: &Target) -> Result<GradResult> {
    backprop_dense_reference_with_cap(network, x, y, DENSE_REFERENCE_CAP)
}

pub fn backprop_dense_reference_with_cap(network: &Network, x: &[f64], y: &Target, cap: usize) -> Result<GradResult> {
    let params = network.param_count();
    if params > cap {
        return Err(Error::ReferenceTooLarge { params, cap });
    }
    let trace = forward(network, x)?;
    let loss = loss_eval(network.head, y, &trace.yhat)?;
    let g = grad_z_last(network.head, y, &trace.yhat)?;
    let jacobian = full_parameter_jacobian(network, &trace)?;
    let grad = jacobian.transpose().matvec(&g)?;
    Ok(GradResult {
        grad,
        loss,
        yhat: trace.yhat,
    })
}

/// `θ ↦ ℓ(y, ŷ(θ))` for a fixed sample.
pub fn loss_of_params(shape: &NetworkShape, theta: &[f64], x: &[f64], y: &Target) -> Result<f64> {
    let net = param_unpack(shape, theta)?;
    let trace = forward(&net, x)?;
    loss_eval(shape.head, y, &trace.yhat)
}
