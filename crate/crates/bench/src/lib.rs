//! Seeded fixtures shared by the benches.

use jacprop::gradcheck::random_target;
use jacprop::{ActivationKind, DenseMatrix, DenseVector, HeadKind, Network, NetworkShape, Target};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Fixture {
    pub network: Network,
    pub x: DenseVector,
    pub y: Target,
}

/// ReLU network with a softmax head and a random input and label.
pub fn fixture(dims: &[usize], seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = NetworkShape::uniform(dims.to_vec(), ActivationKind::Relu, HeadKind::SoftmaxCe).unwrap();
    let network = Network::random(&shape, &mut rng);
    let x = (0..shape.input_dim()).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let y = random_target(HeadKind::SoftmaxCe, shape.output_dim(), &mut rng);
    Fixture { network, x, y }
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DenseMatrix::new(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-1.0..=1.0)).collect(),
    )
    .unwrap()
}
