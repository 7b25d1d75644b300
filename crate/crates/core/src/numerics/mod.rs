//! Dense arrays, a reverse-mode tape, optimizers and a finite-difference checker.

mod array;
mod gradcheck;
mod graph;
pub mod kernels;
pub mod optim;
mod params;

pub use array::Array;
pub use gradcheck::{gradient_check, GradCheckReport};
pub use graph::{BatchNormMode, BatchStats, CustomBackward, Graph, Var};
pub use optim::{OptimizerConfig, OptimizerState};
pub use params::{Gradients, Parameter, ParameterSet};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Array of i.i.d. normal entries with the given standard deviation.
pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Array {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Array::new(shape, data).expect("length matches shape")
}

/// Array of i.i.d. uniform entries in `[lo, hi)`.
pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Array {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Array::new(shape, data).expect("length matches shape")
}
