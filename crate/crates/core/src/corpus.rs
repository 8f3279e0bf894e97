//! Reference chains used by tests, the acceptance suite and the CLI examples.

use nalgebra::DMatrix;
use rand::Rng;

use crate::chain::{ChainModel, RateMatrix};
use crate::rng::{self, domain};

/// Complete graph on `p` sites with unit rates.
pub fn complete(p: usize, b: f64) -> ChainModel {
    let r = DMatrix::from_fn(p, p, |i, j| if i == j { 0.0 } else { 1.0 });
    ChainModel::build(RateMatrix::new(r).expect("complete graph is irreducible"), b)
        .expect("valid complete chain")
}

/// A fixed asymmetric, non-reversible chain on four sites.
pub fn asymmetric_four(b: f64) -> ChainModel {
    ChainModel::from_rows(
        &[
            vec![0.0, 2.0, 0.5, 0.0],
            vec![0.3, 0.0, 1.5, 0.7],
            vec![1.0, 0.0, 0.0, 2.5],
            vec![0.8, 1.2, 0.4, 0.0],
        ],
        b,
    )
    .expect("valid asymmetric chain")
}

/// Random irreducible chain: a random directed cycle through all sites plus
/// each remaining ordered pair with probability 1/2, rates uniform on
/// `[0.2, 3)`.
pub fn random_chain(p: usize, b: f64, seed: u64) -> ChainModel {
    let mut rng = rng::stream(seed, domain::CORPUS, p as u64);
    let mut order: Vec<usize> = (0..p).collect();
    for i in (1..p).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut r = DMatrix::zeros(p, p);
    for w in 0..p {
        let (i, j) = (order[w], order[(w + 1) % p]);
        r[(i, j)] = rng.random_range(0.2..3.0);
    }
    for i in 0..p {
        for j in 0..p {
            if i != j && r[(i, j)] == 0.0 && rng.random_bool(0.5) {
                r[(i, j)] = rng.random_range(0.2..3.0);
            }
        }
    }
    ChainModel::build(RateMatrix::new(r).expect("cycle makes the chain irreducible"), b)
        .expect("valid random chain")
}

/// The fixed 20-chain corpus: five chains each of 3, 4, 5 and 6 sites.
pub fn acceptance_corpus() -> Vec<ChainModel> {
    (0..20u64).map(|k| random_chain(3 + (k / 5) as usize, 1.0, 1000 + k)).collect()
}
