//! Model factory, benchmark sweeps and report writers behind the `binconv`
//! command.

pub mod emacs;
pub mod factory;
pub mod report;
pub mod sweep;

use binconv_core::bitpack::FloatTensor;
use binconv_core::runtime::ExecutionPlan;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seeded uniform [-1, 1) inputs matching a plan's input shapes.
pub fn random_inputs(plan: &ExecutionPlan, seed: u64) -> Vec<FloatTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    plan.input_shapes()
        .into_iter()
        .map(|s| FloatTensor::new(s, (0..s.elements()).map(|_| rng.gen_range(-1.0..1.0)).collect()))
        .collect()
}

/// Thread count used when no flag or environment override is given.
pub fn default_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}
