//! Causal depthwise 1-D convolution that never reads across sequence starts.
//!
//! Tap `j` of a width-`W` kernel reaches `W - 1 - j` slots back. In packed
//! form a tap is dropped whenever that reach exceeds the slot's position
//! index, which is exactly zero left-padding inside every sequence.

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{shape_err, Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    /// `(channels, width)`; the last column multiplies the current element.
    pub weight: Array2<T>,
    /// `(channels)`
    pub bias: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads<T> {
    pub dx: Array3<T>,
    pub dweight: Array2<T>,
    pub dbias: Array1<T>,
}

impl<T: Real> ConvParams<T> {
    pub fn new(weight: Array2<T>, bias: Array1<T>) -> Result<Self> {
        let params = Self { weight, bias };
        params.check()?;
        Ok(params)
    }

    pub fn width(&self) -> usize {
        self.weight.ncols()
    }

    pub fn channels(&self) -> usize {
        self.weight.nrows()
    }

    fn check(&self) -> Result<()> {
        if self.width() == 0 {
            return Err(Error::ShapeMismatch(
                "kernel width must be at least 1".into(),
            ));
        }
        if self.bias.len() != self.channels() {
            return shape_err(format!(
                "bias has {} entries, weight has {} channels",
                self.bias.len(),
                self.channels()
            ));
        }
        Ok(())
    }
}

fn check_packed<T: Real>(
    x: &Array3<T>,
    params: &ConvParams<T>,
    indices: &Array2<usize>,
    what: &str,
) -> Result<()> {
    params.check()?;
    let (packs, cap, channels) = x.dim();
    if channels != params.channels() {
        return shape_err(format!(
            "x has {channels} channels, weight has {}",
            params.channels()
        ));
    }
    if indices.dim() != (packs, cap) {
        return shape_err(format!(
            "{what} are {:?}, expected {:?}",
            indices.dim(),
            (packs, cap)
        ));
    }
    Ok(())
}

/// Forward pass over a packed batch.
///
/// `y[i,d] = bias[d] + Σ_j weight[d,j] · x[i - (W-1) + j, d]`, keeping only
/// taps with `W - 1 - j ≤ position_indices[i]`. Padding slots (index 0, zero
/// data) therefore produce `bias`.
pub fn conv1d_pack_forward<T: Real>(
    x: &Array3<T>,
    params: &ConvParams<T>,
    position_indices: &Array2<usize>,
) -> Result<Array3<T>> {
    check_packed(x, params, position_indices, "position indices")?;
    Ok(conv_impl(x, params, |p, i| position_indices[[p, i]]))
}

/// The same convolution with no boundary mask: taps run across sequence
/// starts up to the pack edge. Not invariant under packing; kept for fault
/// injection and counterexample checks.
pub fn conv1d_forward_unmasked<T: Real>(
    x: &Array3<T>,
    params: &ConvParams<T>,
) -> Result<Array3<T>> {
    params.check()?;
    if x.dim().2 != params.channels() {
        return shape_err(format!(
            "x has {} channels, weight has {}",
            x.dim().2,
            params.channels()
        ));
    }
    Ok(conv_impl(x, params, |_, i| i))
}

fn conv_impl<T: Real>(
    x: &Array3<T>,
    params: &ConvParams<T>,
    reach: impl Fn(usize, usize) -> usize + Sync,
) -> Array3<T> {
    let (packs, cap, channels) = x.dim();
    let width = params.width();
    let mut y = Array3::zeros((packs, cap, channels));
    y.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(p, mut out)| {
            for i in 0..cap {
                let max_back = reach(p, i).min(width - 1);
                for d in 0..channels {
                    let mut acc = params.bias[d];
                    for back in (0..=max_back).rev() {
                        acc = acc + params.weight[[d, width - 1 - back]] * x[[p, i - back, d]];
                    }
                    out[[i, d]] = acc;
                }
            }
        });
    y
}

/// Per-sequence causal convolution with zero left-padding: the oracle.
pub fn conv1d_serial<T: Real>(x: ArrayView2<'_, T>, params: &ConvParams<T>) -> Result<Array2<T>> {
    params.check()?;
    let (len, channels) = x.dim();
    if channels != params.channels() {
        return shape_err(format!(
            "x has {channels} channels, weight has {}",
            params.channels()
        ));
    }
    let width = params.width();
    let mut y = Array2::zeros((len, channels));
    for i in 0..len {
        for d in 0..channels {
            let mut acc = params.bias[d];
            for j in 0..width {
                let back = width - 1 - j;
                if back <= i {
                    acc = acc + params.weight[[d, j]] * x[[i - back, d]];
                }
            }
            y[[i, d]] = acc;
        }
    }
    Ok(y)
}

/// Backward pass for [`conv1d_pack_forward`] with loss cotangent `dy`.
///
/// Input gradients gather from the outputs that read slot `p`, limited to
/// `reverse_indices[p]` slots ahead so they stay inside `p`'s sequence.
/// Weight gradients reuse the forward mask.
pub fn conv1d_pack_backward<T: Real>(
    x: &Array3<T>,
    params: &ConvParams<T>,
    position_indices: &Array2<usize>,
    reverse_indices: &Array2<usize>,
    dy: &Array3<T>,
) -> Result<ConvGrads<T>> {
    check_packed(x, params, position_indices, "position indices")?;
    check_packed(x, params, reverse_indices, "reverse indices")?;
    if dy.dim() != x.dim() {
        return shape_err(format!("dy is {:?}, expected {:?}", dy.dim(), x.dim()));
    }
    let (packs, cap, channels) = x.dim();
    let width = params.width();

    let mut dx = Array3::zeros((packs, cap, channels));
    dx.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(p, mut out)| {
            for i in 0..cap {
                let ahead = reverse_indices[[p, i]].min(width - 1).min(cap - 1 - i);
                for d in 0..channels {
                    let mut acc = T::zero();
                    for o in 0..=ahead {
                        acc = acc + params.weight[[d, width - 1 - o]] * dy[[p, i + o, d]];
                    }
                    out[[i, d]] = acc;
                }
            }
        });

    // Reduced over packs in order so the result does not depend on threads.
    let parts: Vec<(Array2<T>, Array1<T>)> = (0..packs)
        .into_par_iter()
        .map(|p| {
            let mut dw = Array2::zeros((channels, width));
            let mut db = Array1::zeros(channels);
            for i in 0..cap {
                let max_back = position_indices[[p, i]].min(width - 1);
                for d in 0..channels {
                    let g = dy[[p, i, d]];
                    db[d] = db[d] + g;
                    for back in 0..=max_back {
                        let j = width - 1 - back;
                        dw[[d, j]] = dw[[d, j]] + x[[p, i - back, d]] * g;
                    }
                }
            }
            (dw, db)
        })
        .collect();
    let mut dweight = Array2::zeros((channels, width));
    let mut dbias = Array1::zeros(channels);
    for (dw, db) in parts {
        dweight = dweight + &dw;
        dbias = dbias + &db;
    }
    Ok(ConvGrads { dx, dweight, dbias })
}
