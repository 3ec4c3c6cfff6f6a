//! First-order linear recurrence `h_t = a_t * h_{t-1} + b_t` as a prefix scan.
//!
//! Each step is the affine map `h -> a*h + b`. Composing two steps gives
//! another affine map, and composition is associative, so the recurrence is a
//! prefix scan over the pairs `(a_t, b_t)` with identity `(1, 0)`.
//!
//! The parallel version runs a work-efficient up-sweep/down-sweep over a fixed
//! binary tree. The tree depends only on the lane length, never on the number
//! of worker threads, so results are bit-reproducible.

use std::ops::{Add, Mul};

use ndarray::ArrayView1;
use num_traits::{One, Zero};
use rayon::prelude::*;

/// Element type of a scan lane.
///
/// Only ring operations are needed, so exact types such as big rationals work
/// as well as floats.
pub trait ScanValue:
    Clone + Add<Output = Self> + Mul<Output = Self> + Zero + One + Send + Sync
{
}

impl<T> ScanValue for T where T: Clone + Add<Output = T> + Mul<Output = T> + Zero + One + Send + Sync
{}

/// Tree levels with at least this many independent combines run on rayon.
const PAR_LEVEL_MIN_NODES: usize = 2048;

/// Composes step `first` followed by step `second`.
///
/// `(a1, b1) ⊕ (a2, b2) = (a1·a2, a2·b1 + b2)`, identity `(1, 0)`.
#[inline]
pub fn combine<T: ScanValue>(first: &(T, T), second: &(T, T)) -> (T, T) {
    (
        first.0.clone() * second.0.clone(),
        second.0.clone() * first.1.clone() + second.1.clone(),
    )
}

pub fn identity<T: ScanValue>() -> (T, T) {
    (T::one(), T::zero())
}

/// Reference recurrence with `h_{-1} = 0`.
pub fn serial_scan<T: ScanValue>(a: &[T], b: &[T]) -> Vec<T> {
    assert_eq!(
        a.len(),
        b.len(),
        "scan lane coefficient/value length mismatch"
    );
    let mut h = T::zero();
    a.iter()
        .zip(b)
        .map(|(a, b)| {
            h = a.clone() * h.clone() + b.clone();
            h.clone()
        })
        .collect()
}

/// Same result as [`serial_scan`], computed by a two-sweep tree scan.
///
/// The lane is padded with identity pairs up to the next power of two; the
/// up-sweep builds subtree compositions and the down-sweep turns them into
/// exclusive prefixes, `2·log2(L)` levels in total.
pub fn parallel_scan<T: ScanValue>(a: &[T], b: &[T]) -> Vec<T> {
    assert_eq!(
        a.len(),
        b.len(),
        "scan lane coefficient/value length mismatch"
    );
    let n = a.len();
    if n == 0 {
        return Vec::new();
    }
    let m = n.next_power_of_two();
    let leaves: Vec<(T, T)> = a
        .iter()
        .zip(b)
        .map(|(a, b)| (a.clone(), b.clone()))
        .collect();
    let mut tree = leaves.clone();
    tree.resize(m, identity());

    let mut stride = 1;
    while stride < m {
        let span = 2 * stride;
        let sweep = |chunk: &mut [(T, T)]| {
            chunk[span - 1] = combine(&chunk[stride - 1], &chunk[span - 1]);
        };
        if m / span >= PAR_LEVEL_MIN_NODES {
            tree.par_chunks_mut(span).for_each(sweep);
        } else {
            tree.chunks_mut(span).for_each(sweep);
        }
        stride = span;
    }

    tree[m - 1] = identity();
    let mut stride = m / 2;
    while stride >= 1 {
        let span = 2 * stride;
        let sweep = |chunk: &mut [(T, T)]| {
            let parent = chunk[span - 1].clone();
            let left = std::mem::replace(&mut chunk[stride - 1], parent);
            chunk[span - 1] = combine(&chunk[span - 1], &left);
        };
        if m / span >= PAR_LEVEL_MIN_NODES {
            tree.par_chunks_mut(span).for_each(sweep);
        } else {
            tree.chunks_mut(span).for_each(sweep);
        }
        stride /= 2;
    }

    // Inclusive prefix = exclusive prefix then the element itself; applied to
    // h_{-1} = 0 only the additive part survives.
    tree.iter()
        .zip(&leaves)
        .map(|(prefix, leaf)| combine(prefix, leaf).1)
        .collect()
}

/// Zeroes `a[i]` wherever `position_indices[i] == 0`.
pub fn apply_boundary_reset<T: ScanValue>(
    a: &[T],
    position_indices: ArrayView1<'_, usize>,
) -> Vec<T> {
    assert_eq!(
        a.len(),
        position_indices.len(),
        "reset mask length mismatch"
    );
    a.iter()
        .zip(position_indices.iter())
        .map(|(a, &idx)| if idx == 0 { T::zero() } else { a.clone() })
        .collect()
}

/// In-place variant of [`apply_boundary_reset`].
pub fn apply_boundary_reset_in_place<T: ScanValue>(
    a: &mut [T],
    position_indices: ArrayView1<'_, usize>,
) {
    assert_eq!(
        a.len(),
        position_indices.len(),
        "reset mask length mismatch"
    );
    for (a, &idx) in a.iter_mut().zip(position_indices.iter()) {
        if idx == 0 {
            *a = T::zero();
        }
    }
}

/// Reference time-reversed recurrence `g_t = a_t·g_{t+1} + b_t`, `g_L = 0`.
pub fn reverse_serial_scan<T: ScanValue>(a: &[T], b: &[T]) -> Vec<T> {
    assert_eq!(
        a.len(),
        b.len(),
        "scan lane coefficient/value length mismatch"
    );
    let mut g = vec![T::zero(); a.len()];
    let mut carry = T::zero();
    for t in (0..a.len()).rev() {
        carry = a[t].clone() * carry + b[t].clone();
        g[t] = carry.clone();
    }
    g
}

/// Tree-scan version of [`reverse_serial_scan`].
pub fn reverse_scan<T: ScanValue>(a: &[T], b: &[T]) -> Vec<T> {
    let ra: Vec<T> = a.iter().rev().cloned().collect();
    let rb: Vec<T> = b.iter().rev().cloned().collect();
    let mut g = parallel_scan(&ra, &rb);
    g.reverse();
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;
    use num_bigint::BigInt;
    use num_rational::BigRational;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(x: &[f64], y: &[f64], tol: f64) -> bool {
        let scale = y.iter().fold(1e-300f64, |m, v| m.max(v.abs()));
        x.iter().zip(y).all(|(a, b)| (a - b).abs() <= tol * scale)
    }

    #[test]
    fn combine_identity_and_value() {
        let p = (2.5f64, -1.25);
        assert_eq!(combine(&identity(), &p), p);
        assert_eq!(combine(&p, &identity()), p);
        assert_eq!(combine(&(2.0, 1.0), &(3.0, 4.0)), (6.0, 7.0));
    }

    #[test]
    fn serial_examples() {
        assert_eq!(
            serial_scan(&[0.0, 0.5, 0.5], &[1.0, 2.0, 3.0]),
            vec![1.0, 2.5, 4.25]
        );
        assert_eq!(
            serial_scan(&[0.0; 3], &[4.0, -1.0, 2.0]),
            vec![4.0, -1.0, 2.0]
        );
        assert_eq!(serial_scan(&[1.0; 4], &[1.0; 4]), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn parallel_examples() {
        assert_eq!(
            parallel_scan(&[0.0, 0.5, 0.0, 0.5], &[1.0, 1.0, 1.0, 1.0]),
            vec![1.0, 1.5, 1.0, 1.5]
        );
        assert_eq!(parallel_scan(&[0.0f64], &[3.5]), vec![3.5]);
        assert!(parallel_scan::<f64>(&[], &[]).is_empty());
    }

    #[test]
    fn reset_masks_sequence_starts() {
        let idx = arr1(&[0usize, 1, 0]);
        assert_eq!(
            apply_boundary_reset(&[0.5, 0.5, 0.5], idx.view()),
            vec![0.0, 0.5, 0.0]
        );
        let idx = arr1(&[0usize, 1, 2, 3]);
        assert_eq!(
            apply_boundary_reset(&[0.9; 4], idx.view()),
            vec![0.0, 0.9, 0.9, 0.9]
        );
        assert_eq!(apply_boundary_reset(&[0.0; 4], idx.view()), vec![0.0; 4]);
    }

    #[test]
    fn reverse_examples() {
        let a = [0.5, 0.5, 0.0];
        let b = [1.0, 1.0, 1.0];
        assert_eq!(reverse_serial_scan(&a, &b), vec![1.75, 1.5, 1.0]);
        assert_eq!(reverse_scan(&a, &b), vec![1.75, 1.5, 1.0]);
        assert_eq!(reverse_serial_scan(&[0.0; 2], &[3.0, 4.0]), vec![3.0, 4.0]);
    }

    #[test]
    fn reverse_is_serial_on_reversed_lane() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for len in 1..40 {
            let a: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let ra: Vec<f64> = a.iter().rev().copied().collect();
            let rb: Vec<f64> = b.iter().rev().copied().collect();
            let mut want = serial_scan(&ra, &rb);
            want.reverse();
            assert_eq!(reverse_serial_scan(&a, &b), want);
            assert!(close(&reverse_scan(&a, &b), &want, 1e-12));
        }
    }

    #[test]
    fn large_lane_uses_parallel_levels_deterministically() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 3 * PAR_LEVEL_MIN_NODES * 4 + 17;
        let a: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let first = parallel_scan(&a, &b);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let single = pool.install(|| parallel_scan(&a, &b));
        assert!(first
            .iter()
            .zip(&single)
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        let serial = serial_scan(&a, &b);
        let scale = serial.iter().fold(0f32, |m, v| m.max(v.abs()));
        let worst = first
            .iter()
            .zip(&serial)
            .fold(0f32, |m, (x, y)| m.max((x - y).abs()));
        assert!(worst <= 1e-4 * scale, "worst {worst} scale {scale}");
    }

    fn rational(num: i64, den: i64) -> BigRational {
        BigRational::new(BigInt::from(num), BigInt::from(den))
    }

    proptest! {
        #[test]
        fn combine_is_associative_exactly(v in prop::collection::vec((-50i64..50, 1i64..20), 6)) {
            let p: Vec<BigRational> = v.iter().map(|&(n, d)| rational(n, d)).collect();
            let x = (p[0].clone(), p[1].clone());
            let y = (p[2].clone(), p[3].clone());
            let z = (p[4].clone(), p[5].clone());
            prop_assert_eq!(combine(&combine(&x, &y), &z), combine(&x, &combine(&y, &z)));
        }

        #[test]
        fn parallel_equals_serial_in_exact_arithmetic(
            v in prop::collection::vec((-9i64..10, 1i64..8, -9i64..10, 1i64..8), 1..17)
        ) {
            let a: Vec<BigRational> = v.iter().map(|&(n, d, _, _)| rational(n, d)).collect();
            let b: Vec<BigRational> = v.iter().map(|&(_, _, n, d)| rational(n, d)).collect();
            prop_assert_eq!(parallel_scan(&a, &b), serial_scan(&a, &b));
            prop_assert_eq!(reverse_scan(&a, &b), reverse_serial_scan(&a, &b));
        }

        #[test]
        fn parallel_matches_serial_f64(
            v in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 1..=64)
        ) {
            let (a, b): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            prop_assert!(close(&parallel_scan(&a, &b), &serial_scan(&a, &b), 1e-10));
        }

        #[test]
        fn parallel_matches_serial_f32(
            v in prop::collection::vec((-1.0f32..1.0, -1.0f32..1.0), 1..=64)
        ) {
            let (a, b): (Vec<f32>, Vec<f32>) = v.into_iter().unzip();
            let p: Vec<f64> = parallel_scan(&a, &b).into_iter().map(f64::from).collect();
            let s: Vec<f64> = serial_scan(&a, &b).into_iter().map(f64::from).collect();
            prop_assert!(close(&p, &s, 1e-4));
        }

        #[test]
        fn zero_coefficient_isolates_prefix(
            v in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 2..=80),
            cut in any::<prop::sample::Index>(),
            noise in prop::collection::vec(-5.0f64..5.0, 80),
        ) {
            let (mut a, mut b): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            let k = 1 + cut.index(a.len() - 1);
            a[k] = 0.0;
            let before = parallel_scan(&a, &b);
            for j in 0..k {
                a[j] = noise[j];
                b[j] = noise[79 - j];
            }
            let after = parallel_scan(&a, &b);
            for t in k..a.len() {
                prop_assert_eq!(before[t].to_bits(), after[t].to_bits());
            }
        }
    }
}
