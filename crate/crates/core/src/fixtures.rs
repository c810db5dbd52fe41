//! Reference instances and seeded random model generators.
//!
//! `t1` is the two-node, two-label instance used throughout the tests:
//! ψ_u = [[0, ln 2], [ln 2, 0]], Potts compatibility, constant kernel 0.5.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::f64::consts::LN_2;

use crate::kernels::{GaussianComponent, KernelSpec};
use crate::model::{
    CompatibilityMatrix, CrfModel, LabelSpace, MarginalField, ObservedSequence, UnaryPotentials,
};
use crate::table::Table;

pub fn t1() -> CrfModel {
    let seq = ObservedSequence::new(
        Table::from_rows(&[[0.0], [1.0]]).unwrap(),
        Table::from_rows(&[[0.0], [0.0]]).unwrap(),
    )
    .unwrap();
    let unary =
        UnaryPotentials::new(Table::from_rows(&[[0.0, LN_2], [LN_2, 0.0]]).unwrap()).unwrap();
    CrfModel::new(
        LabelSpace::new(2).unwrap(),
        seq,
        unary,
        CompatibilityMatrix::potts(2),
        KernelSpec::constant(2, 0.5),
    )
    .unwrap()
}

/// Random positions (2-D, in [0, 4)) and observations (3-D, standard normal).
pub fn random_sequence(rng: &mut impl Rng, n: usize) -> ObservedSequence {
    let positions = Table::from_fn(n, 2, |_, _| rng.random_range(0.0..4.0));
    let observations = Table::from_fn(n, 3, |_, _| StandardNormal.sample(rng));
    ObservedSequence::new(positions, observations).unwrap()
}

/// A random Gaussian-bilateral kernel with one or two components.
pub fn random_gaussian_kernel(rng: &mut impl Rng) -> KernelSpec {
    let count = rng.random_range(1..=2);
    KernelSpec::GaussianBilateral {
        components: (0..count)
            .map(|_| {
                GaussianComponent::new(
                    rng.random_range(0.1..1.5),
                    rng.random_range(0.5..2.5),
                    rng.random_range(0.5..2.5),
                )
            })
            .collect(),
    }
}

/// Random compatibility with entries in [-1, 2); mirrored when `symmetric`.
pub fn random_compatibility(rng: &mut impl Rng, k: usize, symmetric: bool) -> CompatibilityMatrix {
    let mut mu = Table::from_fn(k, k, |_, _| rng.random_range(-1.0..2.0));
    if symmetric {
        for a in 0..k {
            for b in 0..a {
                let v = mu.get(b, a);
                mu.set(a, b, v);
            }
        }
    }
    CompatibilityMatrix::new(mu, symmetric).unwrap()
}

pub fn random_unary(rng: &mut impl Rng, n: usize, k: usize) -> UnaryPotentials {
    UnaryPotentials::new(Table::from_fn(n, k, |_, _| rng.random_range(0.0..3.0))).unwrap()
}

/// Random row-stochastic field with every entry bounded away from zero.
pub fn random_marginals(rng: &mut impl Rng, n: usize, k: usize) -> MarginalField {
    let mut t = Table::from_fn(n, k, |_, _| rng.random_range(0.05..1.0));
    for i in 0..n {
        let row = t.row_mut(i);
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    MarginalField::from_table_unchecked(t)
}

pub fn random_model_with(rng: &mut impl Rng, n: usize, k: usize, symmetric_mu: bool) -> CrfModel {
    let seq = random_sequence(rng, n);
    let kernel = random_gaussian_kernel(rng);
    let mu = random_compatibility(rng, k, symmetric_mu);
    let unary = random_unary(rng, n, k);
    CrfModel::new(LabelSpace::new(k).unwrap(), seq, unary, mu, kernel).unwrap()
}

pub fn random_model(seed: u64, n: usize, k: usize, symmetric_mu: bool) -> CrfModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_model_with(&mut rng, n, k, symmetric_mu)
}
