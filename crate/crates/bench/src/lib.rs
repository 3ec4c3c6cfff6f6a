//! Seeded fixtures shared by the benchmarks.

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seqpack_core::packing::{pack_rows, plan_greedy_sorted, PackPlan};
use seqpack_core::{ConvParams, SsmParams};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// One scan lane: decays in `[0.5, 1)`, inputs in `[-1, 1)`.
pub fn lane(len: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut r = rng(seed);
    let a = (0..len).map(|_| r.random_range(0.5..1.0)).collect();
    let b = (0..len).map(|_| r.random_range(-1.0..1.0)).collect();
    (a, b)
}

pub fn lengths(count: usize, max_len: usize, seed: u64) -> Vec<usize> {
    let mut r = rng(seed);
    (0..count).map(|_| r.random_range(1..=max_len)).collect()
}

fn uniform3(r: &mut ChaCha8Rng, plan: &PackPlan, width: usize, lo: f64, hi: f64) -> Array3<f64> {
    let rows: Vec<Array2<f64>> = plan
        .lengths
        .iter()
        .map(|&l| Array2::from_shape_fn((l, width), |_| r.random_range(lo..hi)))
        .collect();
    pack_rows(&rows, plan).expect("plan matches rows")
}

pub struct PackedFixture {
    pub plan: PackPlan,
    pub x: Array3<f64>,
    pub conv: ConvParams<f64>,
    pub ssm: SsmParams<f64>,
}

/// Greedy-packed random inputs for the conv and SSM operators.
pub fn packed_fixture(
    lengths: &[usize],
    capacity: usize,
    channels: usize,
    states: usize,
    seed: u64,
) -> PackedFixture {
    let mut r = rng(seed);
    let plan = plan_greedy_sorted(lengths, capacity).expect("lengths fit");
    let x = uniform3(&mut r, &plan, channels, -1.0, 1.0);
    let conv = ConvParams {
        weight: Array2::from_shape_fn((channels, 4), |_| r.random_range(-1.0..1.0)),
        bias: Array1::from_shape_fn(channels, |_| r.random_range(-0.5..0.5)),
    };
    let ssm = SsmParams {
        a: Array2::from_shape_fn((channels, states), |_| -r.random_range(0.1..2.0)),
        delta: uniform3(&mut r, &plan, channels, 0.01, 1.0),
        b: uniform3(&mut r, &plan, states, -1.0, 1.0),
        c: uniform3(&mut r, &plan, states, -1.0, 1.0),
        d_skip: Array1::from_shape_fn(channels, |_| r.random_range(-1.0..1.0)),
        x: x.clone(),
    };
    PackedFixture { plan, x, conv, ssm }
}
