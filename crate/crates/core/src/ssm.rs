//! Selective state-space layer over packed sequences.
//!
//! Per channel `d` and state `n` the layer runs
//!
//! ```text
//! z      = Δ[t,d] · A[d,n]
//! ā      = exp(z)
//! b̄      = (exp(z) - 1) / z · Δ[t,d] · B[t,n]
//! h[t,n] = ā · h[t-1,n] + b̄ · x[t,d]
//! y[t,d] = Σ_n C[t,n] · h[t,n] + D[d] · x[t,d]
//! ```
//!
//! In packed form `ā` is forced to exactly zero on every slot whose position
//! index is 0, so no state (and no gradient) crosses a sequence boundary.

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{shape_err, Error, Result};
use crate::packing::{pack_rows, PackPlan};
use crate::real::{lit, Real};
use crate::scan::{apply_boundary_reset_in_place, parallel_scan, reverse_scan};

/// Below this `|Δ·A|` the ZOH factor uses its Taylor expansion.
pub const TAYLOR_THRESHOLD: f64 = 1e-4;

/// Continuous-time parameters and inputs, laid out `(packs, len, ·)`.
///
/// A single unpacked sequence is the `packs == 1` case.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams<T> {
    /// `(channels, states)`, diagonal dynamics; negative for stability.
    pub a: Array2<T>,
    /// `(packs, len, channels)`, step sizes, must be ≥ 0.
    pub delta: Array3<T>,
    /// `(packs, len, states)`
    pub b: Array3<T>,
    /// `(packs, len, states)`
    pub c: Array3<T>,
    /// `(channels)`
    pub d_skip: Array1<T>,
    /// `(packs, len, channels)`
    pub x: Array3<T>,
}

/// Per-token inputs of one unpacked sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmSequence<T> {
    pub delta: Array2<T>,
    pub b: Array2<T>,
    pub c: Array2<T>,
    pub x: Array2<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SsmDims {
    pub packs: usize,
    pub len: usize,
    pub channels: usize,
    pub states: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SsmGrads<T> {
    pub dx: Array3<T>,
    pub ddelta: Array3<T>,
    pub da: Array2<T>,
    pub db: Array3<T>,
    pub dc: Array3<T>,
    pub dd_skip: Array1<T>,
}

impl<T: Real> SsmParams<T> {
    pub fn single(a: Array2<T>, d_skip: Array1<T>, seq: &SsmSequence<T>) -> Self {
        let lift = |m: &Array2<T>| m.clone().insert_axis(Axis(0));
        Self {
            a,
            delta: lift(&seq.delta),
            b: lift(&seq.b),
            c: lift(&seq.c),
            d_skip,
            x: lift(&seq.x),
        }
    }

    /// Packs per-sequence inputs following `plan`; padding slots get zeros.
    pub fn packed(
        a: Array2<T>,
        d_skip: Array1<T>,
        seqs: &[SsmSequence<T>],
        plan: &PackPlan,
    ) -> Result<Self> {
        let gather = |f: fn(&SsmSequence<T>) -> &Array2<T>| -> Result<Array3<T>> {
            let rows: Vec<Array2<T>> = seqs.iter().map(|s| f(s).clone()).collect();
            pack_rows(&rows, plan)
        };
        Ok(Self {
            a,
            delta: gather(|s| &s.delta)?,
            b: gather(|s| &s.b)?,
            c: gather(|s| &s.c)?,
            d_skip,
            x: gather(|s| &s.x)?,
        })
    }

    pub fn dims(&self) -> Result<SsmDims> {
        let (channels, states) = self.a.dim();
        let (packs, len, xc) = self.x.dim();
        if xc != channels {
            return shape_err(format!("x has {xc} channels, A has {channels}"));
        }
        if self.delta.dim() != (packs, len, channels) {
            return shape_err(format!(
                "delta is {:?}, expected {:?}",
                self.delta.dim(),
                (packs, len, channels)
            ));
        }
        if self.b.dim() != (packs, len, states) {
            return shape_err(format!(
                "B is {:?}, expected {:?}",
                self.b.dim(),
                (packs, len, states)
            ));
        }
        if self.c.dim() != (packs, len, states) {
            return shape_err(format!(
                "C is {:?}, expected {:?}",
                self.c.dim(),
                (packs, len, states)
            ));
        }
        if self.d_skip.len() != channels {
            return shape_err(format!(
                "D has {} entries, expected {channels}",
                self.d_skip.len()
            ));
        }
        if let Some(bad) = self
            .delta
            .iter()
            .find(|v| **v < T::zero() || !v.is_finite())
        {
            return Err(Error::InvalidStepSize(bad.to_f64_lossy()));
        }
        Ok(SsmDims {
            packs,
            len,
            channels,
            states,
        })
    }
}

/// `(exp(z) - 1) / z`, continuous at 0.
#[inline]
pub fn zoh_factor<T: Real>(z: T) -> T {
    if z.abs() < lit(TAYLOR_THRESHOLD) {
        T::one() + z / lit(2.0) + z * z / lit(6.0)
    } else {
        z.exp_m1() / z
    }
}

/// Derivative of [`zoh_factor`].
#[inline]
pub fn zoh_factor_derivative<T: Real>(z: T) -> T {
    if z.abs() < lit(0.1) {
        // Σ_{k≥1} k z^{k-1} / (k+1)!
        let c = [
            1.0 / 2.0,
            1.0 / 3.0,
            1.0 / 8.0,
            1.0 / 30.0,
            1.0 / 144.0,
            1.0 / 840.0,
            1.0 / 5760.0,
        ];
        c.iter().rev().fold(T::zero(), |acc, &k| acc * z + lit(k))
    } else {
        (z * z.exp() - z.exp_m1()) / (z * z)
    }
}

#[inline]
fn discretize_unchecked<T: Real>(delta: T, a: T, b: T) -> (T, T) {
    let z = delta * a;
    (z.exp(), zoh_factor(z) * delta * b)
}

/// Zero-order-hold discretization of one `(Δ, A, B)` triple into `(ā, b̄)`.
pub fn discretize<T: Real>(delta: T, a: T, b: T) -> Result<(T, T)> {
    if delta < T::zero() || !delta.is_finite() {
        return Err(Error::InvalidStepSize(delta.to_f64_lossy()));
    }
    Ok(discretize_unchecked(delta, a, b))
}

fn check_single(dims: SsmDims) -> Result<()> {
    if dims.packs != 1 {
        return shape_err(format!(
            "serial path takes one sequence, got {} packs",
            dims.packs
        ));
    }
    Ok(())
}

/// Step-by-step recurrence over one sequence. This is the reference the
/// packed operator is checked against.
pub fn ssm_forward_serial<T: Real>(params: &SsmParams<T>) -> Result<Array2<T>> {
    let dims = params.dims()?;
    check_single(dims)?;
    let SsmDims {
        len,
        channels,
        states,
        ..
    } = dims;
    let mut y = Array2::zeros((len, channels));
    let mut h = Array2::<T>::zeros((channels, states));
    for t in 0..len {
        for d in 0..channels {
            let delta = params.delta[[0, t, d]];
            let x = params.x[[0, t, d]];
            let mut acc = T::zero();
            for n in 0..states {
                let (a_bar, b_bar) =
                    discretize_unchecked(delta, params.a[[d, n]], params.b[[0, t, n]]);
                h[[d, n]] = a_bar * h[[d, n]] + b_bar * x;
                acc = acc + params.c[[0, t, n]] * h[[d, n]];
            }
            y[[t, d]] = acc + params.d_skip[d] * x;
        }
    }
    Ok(y)
}

/// Hand-derived adjoint of [`ssm_forward_serial`], also step by step.
pub fn ssm_backward_serial<T: Real>(
    params: &SsmParams<T>,
    dy: ArrayView2<'_, T>,
) -> Result<SsmGrads<T>> {
    let dims = params.dims()?;
    check_single(dims)?;
    let SsmDims {
        len,
        channels,
        states,
        ..
    } = dims;
    if dy.dim() != (len, channels) {
        return shape_err(format!(
            "dy is {:?}, expected {:?}",
            dy.dim(),
            (len, channels)
        ));
    }
    let mut grads = SsmGrads::zeros(dims);
    for d in 0..channels {
        for n in 0..states {
            let a = params.a[[d, n]];
            let mut prev = T::zero();
            let h: Vec<T> = (0..len)
                .map(|t| {
                    let (a_bar, b_bar) =
                        discretize_unchecked(params.delta[[0, t, d]], a, params.b[[0, t, n]]);
                    prev = a_bar * prev + b_bar * params.x[[0, t, d]];
                    prev
                })
                .collect();
            let mut g = T::zero();
            for t in (0..len).rev() {
                let delta = params.delta[[0, t, d]];
                let bt = params.b[[0, t, n]];
                let x = params.x[[0, t, d]];
                let g_next = if t + 1 < len {
                    (params.delta[[0, t + 1, d]] * a).exp() * g
                } else {
                    T::zero()
                };
                g = g_next + params.c[[0, t, n]] * dy[[t, d]];
                let z = delta * a;
                let a_bar = z.exp();
                let phi = zoh_factor(z);
                let dphi = zoh_factor_derivative(z);
                let h_prev = if t > 0 { h[t - 1] } else { T::zero() };
                let d_abar = g * h_prev;
                let d_bbar = g * x;
                grads.dx[[0, t, d]] = grads.dx[[0, t, d]] + g * phi * delta * bt;
                grads.ddelta[[0, t, d]] = grads.ddelta[[0, t, d]]
                    + d_abar * a_bar * a
                    + d_bbar * (dphi * a * delta * bt + phi * bt);
                grads.da[[d, n]] =
                    grads.da[[d, n]] + d_abar * a_bar * delta + d_bbar * dphi * delta * delta * bt;
                grads.db[[0, t, n]] = grads.db[[0, t, n]] + d_bbar * phi * delta;
                grads.dc[[0, t, n]] = grads.dc[[0, t, n]] + dy[[t, d]] * h[t];
            }
        }
        for t in 0..len {
            let x = params.x[[0, t, d]];
            grads.dx[[0, t, d]] = grads.dx[[0, t, d]] + params.d_skip[d] * dy[[t, d]];
            grads.dd_skip[d] = grads.dd_skip[d] + dy[[t, d]] * x;
        }
    }
    Ok(grads)
}

impl<T: Real> SsmGrads<T> {
    fn zeros(dims: SsmDims) -> Self {
        let SsmDims {
            packs,
            len,
            channels,
            states,
        } = dims;
        Self {
            dx: Array3::zeros((packs, len, channels)),
            ddelta: Array3::zeros((packs, len, channels)),
            da: Array2::zeros((channels, states)),
            db: Array3::zeros((packs, len, states)),
            dc: Array3::zeros((packs, len, states)),
            dd_skip: Array1::zeros(channels),
        }
    }
}

fn check_indices(dims: SsmDims, position_indices: &Array2<usize>) -> Result<()> {
    if position_indices.dim() != (dims.packs, dims.len) {
        return shape_err(format!(
            "position indices are {:?}, expected {:?}",
            position_indices.dim(),
            (dims.packs, dims.len)
        ));
    }
    Ok(())
}

/// Scan inputs for one `(pack, channel, state)` lane, reset applied.
struct Lane<T> {
    a_bar: Vec<T>,
    u: Vec<T>,
}

fn build_lane<T: Real>(
    params: &SsmParams<T>,
    pos: &Array2<usize>,
    p: usize,
    d: usize,
    n: usize,
) -> Lane<T> {
    let len = params.x.dim().1;
    let a = params.a[[d, n]];
    let mut a_bar = Vec::with_capacity(len);
    let mut u = Vec::with_capacity(len);
    for t in 0..len {
        let (ab, bb) = discretize_unchecked(params.delta[[p, t, d]], a, params.b[[p, t, n]]);
        a_bar.push(ab);
        u.push(bb * params.x[[p, t, d]]);
    }
    apply_boundary_reset_in_place(&mut a_bar, pos.row(p));
    Lane { a_bar, u }
}

/// Boundary-aware forward pass over a packed batch.
pub fn ssm_forward_packed<T: Real>(
    params: &SsmParams<T>,
    position_indices: &Array2<usize>,
) -> Result<Array3<T>> {
    let dims = params.dims()?;
    check_indices(dims, position_indices)?;
    let SsmDims {
        packs,
        len,
        channels,
        states,
    } = dims;

    let columns: Vec<Vec<T>> = (0..packs * channels)
        .into_par_iter()
        .map(|lane| {
            let (p, d) = (lane / channels, lane % channels);
            let mut y: Vec<T> = (0..len)
                .map(|t| params.d_skip[d] * params.x[[p, t, d]])
                .collect();
            // Σ_n in fixed order, then the skip term.
            let mut acc = vec![T::zero(); len];
            for n in 0..states {
                let Lane { a_bar, u } = build_lane(params, position_indices, p, d, n);
                let h = parallel_scan(&a_bar, &u);
                for t in 0..len {
                    acc[t] = acc[t] + params.c[[p, t, n]] * h[t];
                }
            }
            for t in 0..len {
                y[t] = acc[t] + y[t];
            }
            y
        })
        .collect();

    let mut y = Array3::zeros((packs, len, channels));
    for (lane, col) in columns.into_iter().enumerate() {
        let (p, d) = (lane / channels, lane % channels);
        for (t, v) in col.into_iter().enumerate() {
            y[[p, t, d]] = v;
        }
    }
    Ok(y)
}

/// Gradients of `Σ dy ∘ y` with respect to every input of
/// [`ssm_forward_packed`].
///
/// The state adjoint `g_t = ā_{t+1} g_{t+1} + Σ C_t dy_t` is a reverse scan
/// whose coefficients are the reset `ā` shifted by one slot, so a zero at a
/// sequence start also blocks the gradient flowing out of that sequence.
pub fn ssm_backward_packed<T: Real>(
    params: &SsmParams<T>,
    position_indices: &Array2<usize>,
    dy: &Array3<T>,
) -> Result<SsmGrads<T>> {
    let dims = params.dims()?;
    check_indices(dims, position_indices)?;
    let SsmDims {
        packs,
        len,
        channels,
        states,
    } = dims;
    if dy.dim() != (packs, len, channels) {
        return shape_err(format!(
            "dy is {:?}, expected {:?}",
            dy.dim(),
            (packs, len, channels)
        ));
    }

    let per_pack: Vec<SsmGrads<T>> = (0..packs)
        .into_par_iter()
        .map(|p| {
            let mut g_out = SsmGrads::zeros(SsmDims { packs: 1, ..dims });
            for d in 0..channels {
                for n in 0..states {
                    let a = params.a[[d, n]];
                    let Lane { a_bar, u } = build_lane(params, position_indices, p, d, n);
                    let h = parallel_scan(&a_bar, &u);
                    let coef: Vec<T> = (0..len)
                        .map(|t| if t + 1 < len { a_bar[t + 1] } else { T::zero() })
                        .collect();
                    let rhs: Vec<T> = (0..len)
                        .map(|t| params.c[[p, t, n]] * dy[[p, t, d]])
                        .collect();
                    let g = reverse_scan(&coef, &rhs);
                    for t in 0..len {
                        let delta = params.delta[[p, t, d]];
                        let bt = params.b[[p, t, n]];
                        let x = params.x[[p, t, d]];
                        let z = delta * a;
                        let phi = zoh_factor(z);
                        let dphi = zoh_factor_derivative(z);
                        // ā is a constant 0 on reset slots.
                        let (d_abar, a_bar_t) = if position_indices[[p, t]] == 0 {
                            (T::zero(), T::zero())
                        } else {
                            let h_prev = if t > 0 { h[t - 1] } else { T::zero() };
                            (g[t] * h_prev, z.exp())
                        };
                        let d_bbar = g[t] * x;
                        g_out.dx[[0, t, d]] = g_out.dx[[0, t, d]] + g[t] * phi * delta * bt;
                        g_out.ddelta[[0, t, d]] = g_out.ddelta[[0, t, d]]
                            + d_abar * a_bar_t * a
                            + d_bbar * (dphi * a * delta * bt + phi * bt);
                        g_out.da[[d, n]] = g_out.da[[d, n]]
                            + d_abar * a_bar_t * delta
                            + d_bbar * dphi * delta * delta * bt;
                        g_out.db[[0, t, n]] = g_out.db[[0, t, n]] + d_bbar * phi * delta;
                        g_out.dc[[0, t, n]] = g_out.dc[[0, t, n]] + dy[[p, t, d]] * h[t];
                    }
                }
                for t in 0..len {
                    let x = params.x[[p, t, d]];
                    g_out.dx[[0, t, d]] = g_out.dx[[0, t, d]] + params.d_skip[d] * dy[[p, t, d]];
                    g_out.dd_skip[d] = g_out.dd_skip[d] + dy[[p, t, d]] * x;
                }
            }
            g_out
        })
        .collect();

    let mut grads = SsmGrads::zeros(dims);
    for (p, part) in per_pack.into_iter().enumerate() {
        grads
            .dx
            .index_axis_mut(Axis(0), p)
            .assign(&part.dx.index_axis(Axis(0), 0));
        grads
            .ddelta
            .index_axis_mut(Axis(0), p)
            .assign(&part.ddelta.index_axis(Axis(0), 0));
        grads
            .db
            .index_axis_mut(Axis(0), p)
            .assign(&part.db.index_axis(Axis(0), 0));
        grads
            .dc
            .index_axis_mut(Axis(0), p)
            .assign(&part.dc.index_axis(Axis(0), 0));
        grads.da = grads.da + &part.da;
        grads.dd_skip = grads.dd_skip + &part.dd_skip;
    }
    Ok(grads)
}
