//! Wall-clock measurements: scan length sweeps and end-to-end block timing.
//!
//! Times are reported as medians over repetitions after one discarded
//! warm-up run. They depend on the machine and are never asserted on.

use std::time::Instant;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::block::{mamba_block_backward_packed, BlockDims, BlockParams};
use crate::error::{Error, Result};
use crate::packing::{pack_rows, plan_greedy_sorted, plan_pad_to_max, PackPlan};
use crate::real::{lit, Precision, Real};
use crate::scan::parallel_scan;

pub const MIN_REPETITIONS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub seqlen: usize,
    pub lanes: usize,
    pub repetitions: usize,
    pub median_seconds: f64,
    /// Scanned elements (`seqlen · lanes`) per second.
    pub elements_per_second: f64,
}

pub fn median(samples: &mut [f64]) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    }
}

fn time_median(repetitions: usize, mut run: impl FnMut()) -> f64 {
    run();
    let mut samples: Vec<f64> = (0..repetitions.max(MIN_REPETITIONS))
        .map(|_| {
            let start = Instant::now();
            run();
            start.elapsed().as_secs_f64()
        })
        .collect();
    median(&mut samples)
}

fn scan_lanes<T: Real>(seqlen: usize, lanes: usize, rng: &mut ChaCha8Rng) -> Vec<(Vec<T>, Vec<T>)> {
    (0..lanes)
        .map(|_| {
            let a = (0..seqlen)
                .map(|_| lit(rng.random_range(0.5..1.0)))
                .collect();
            let b = (0..seqlen)
                .map(|_| lit(rng.random_range(-1.0..1.0)))
                .collect();
            (a, b)
        })
        .collect()
}

fn profile_typed<T: Real>(
    sweep: &[usize],
    lanes: usize,
    repetitions: usize,
    seed: u64,
) -> Vec<ProfileRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sweep
        .iter()
        .map(|&seqlen| {
            let data = scan_lanes::<T>(seqlen, lanes, &mut rng);
            let median_seconds = time_median(repetitions, || {
                let out: Vec<Vec<T>> = data.par_iter().map(|(a, b)| parallel_scan(a, b)).collect();
                std::hint::black_box(out);
            });
            ProfileRow {
                seqlen,
                lanes,
                repetitions: repetitions.max(MIN_REPETITIONS),
                median_seconds,
                elements_per_second: (seqlen * lanes) as f64 / median_seconds,
            }
        })
        .collect()
}

/// Times [`parallel_scan`] over `channels · states` independent lanes for
/// each length in `sweep`.
pub fn profile_scan(
    sweep: &[usize],
    channels: usize,
    states: usize,
    precision: Precision,
    repetitions: usize,
    seed: u64,
) -> Result<Vec<ProfileRow>> {
    if let Some(bad) = sweep.iter().find(|&&l| l == 0) {
        return Err(Error::InvalidLength(format!("sweep length {bad}")));
    }
    if channels == 0 || states == 0 {
        return Err(Error::ShapeMismatch(
            "profile needs at least one channel and state".into(),
        ));
    }
    let lanes = channels * states;
    Ok(match precision {
        Precision::F32 => profile_typed::<f32>(sweep, lanes, repetitions, seed),
        Precision::F64 => profile_typed::<f64>(sweep, lanes, repetitions, seed),
    })
}

/// 1, then every power of two up to `max_len` with its neighbours.
pub fn default_sweep(max_len: usize) -> Vec<usize> {
    let mut out = vec![1];
    let mut p = 2;
    while p <= max_len {
        for l in [p - 1, p, p + 1] {
            if l > out[out.len() - 1] && l <= max_len {
                out.push(l);
            }
        }
        p *= 2;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BatchMode {
    /// Greedy-packed layout, one call.
    Packed,
    /// One sequence per row padded to capacity, one call.
    Padded,
    /// One call per sequence at its own length.
    SingleSequence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputRow {
    pub mode: BatchMode,
    pub calls: usize,
    pub tokens: usize,
    pub slots: usize,
    pub repetitions: usize,
    pub median_seconds: f64,
    pub tokens_per_second: f64,
}

fn random_rows<T: Real>(
    rng: &mut ChaCha8Rng,
    lengths: &[usize],
    width: usize,
) -> Vec<ndarray::Array2<T>> {
    lengths
        .iter()
        .map(|&l| ndarray::Array2::from_shape_fn((l, width), |_| lit(rng.random_range(-1.0..1.0))))
        .collect()
}

fn time_plan<T: Real>(
    rows: &[ndarray::Array2<T>],
    plan: &PackPlan,
    params: &BlockParams<T>,
    repetitions: usize,
) -> Result<f64> {
    let x = pack_rows(rows, plan)?;
    let pos = plan.position_indices();
    let dout = Array3::from_elem(x.dim(), T::one());
    let mut failure = None;
    let t = time_median(repetitions, || {
        if let Err(e) = mamba_block_backward_packed(&x, &pos, params, &dout) {
            failure = Some(e);
        }
    });
    failure.map_or(Ok(t), Err)
}

fn bench_typed<T: Real>(
    lengths: &[usize],
    capacity: usize,
    dims: BlockDims,
    repetitions: usize,
    seed: u64,
) -> Result<Vec<ThroughputRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = BlockParams::<T>::init(dims, rng.random());
    let rows = random_rows::<T>(&mut rng, lengths, dims.model_dim);
    let tokens: usize = lengths.iter().sum();
    let reps = repetitions.max(MIN_REPETITIONS);

    let packed = plan_greedy_sorted(lengths, capacity)?;
    let padded = plan_pad_to_max(lengths, capacity)?;
    let mut out = Vec::new();
    for (mode, plan) in [(BatchMode::Packed, &packed), (BatchMode::Padded, &padded)] {
        let t = time_plan(&rows, plan, &params, reps)?;
        out.push(ThroughputRow {
            mode,
            calls: 1,
            tokens,
            slots: plan.total_slots(),
            repetitions: reps,
            median_seconds: t,
            tokens_per_second: tokens as f64 / t,
        });
    }

    let singles: Vec<PackPlan> = lengths
        .iter()
        .map(|&l| PackPlan::new(l, vec![vec![0]], vec![l]))
        .collect::<Result<_>>()?;
    let inputs: Vec<(Array3<T>, ndarray::Array2<usize>)> = rows
        .iter()
        .zip(&singles)
        .map(|(r, p)| Ok((pack_rows(std::slice::from_ref(r), p)?, p.position_indices())))
        .collect::<Result<_>>()?;
    let mut failure = None;
    let t = time_median(reps, || {
        for (x, pos) in &inputs {
            let dout = Array3::from_elem(x.dim(), T::one());
            if let Err(e) = mamba_block_backward_packed(x, pos, &params, &dout) {
                failure = Some(e);
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    out.push(ThroughputRow {
        mode: BatchMode::SingleSequence,
        calls: lengths.len(),
        tokens,
        slots: tokens,
        repetitions: reps,
        median_seconds: t,
        tokens_per_second: tokens as f64 / t,
    });
    Ok(out)
}

/// Forward plus backward through one block for the same sequences laid out
/// packed, padded, and one call per sequence.
pub fn bench_forward_backward(
    lengths: &[usize],
    capacity: usize,
    dims: BlockDims,
    precision: Precision,
    repetitions: usize,
    seed: u64,
) -> Result<Vec<ThroughputRow>> {
    if lengths.is_empty() {
        return Err(Error::InvalidLength("no sequences to benchmark".into()));
    }
    match precision {
        Precision::F32 => bench_typed::<f32>(lengths, capacity, dims, repetitions, seed),
        Precision::F64 => bench_typed::<f64>(lengths, capacity, dims, repetitions, seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_rows_and_positive_times() {
        let rows = profile_scan(&[1, 7, 64], 2, 3, Precision::F64, 5, 1).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].seqlen, 1);
        assert!(rows
            .iter()
            .all(|r| r.median_seconds > 0.0 && r.lanes == 6 && r.repetitions == 5));
        assert!(profile_scan(&[0], 1, 1, Precision::F32, 5, 1).is_err());
    }

    #[test]
    fn repetitions_have_a_floor() {
        let rows = profile_scan(&[4], 1, 1, Precision::F32, 1, 1).unwrap();
        assert_eq!(rows[0].repetitions, MIN_REPETITIONS);
    }

    #[test]
    fn medians() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn default_sweep_shape() {
        assert_eq!(default_sweep(8), vec![1, 2, 3, 4, 5, 7, 8]);
    }

    #[test]
    fn bench_reports_three_modes() {
        let dims = BlockDims {
            model_dim: 4,
            expanded_dim: 8,
            state_dim: 2,
            conv_width: 3,
        };
        let rows = bench_forward_backward(&[3, 5, 2], 8, dims, Precision::F64, 5, 2).unwrap();
        let modes: Vec<_> = rows.iter().map(|r| r.mode).collect();
        assert_eq!(
            modes,
            vec![
                BatchMode::Packed,
                BatchMode::Padded,
                BatchMode::SingleSequence
            ]
        );
        assert!(rows.iter().all(|r| r.tokens == 10));
        assert_eq!(rows[1].slots, 24);
        assert_eq!(rows[2].calls, 3);
    }
}
