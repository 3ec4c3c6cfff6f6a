//! Element-wise and token-wise operators.
//!
//! Everything here acts on rows (tokens) independently, in a fixed
//! accumulation order, so packing tokens differently never changes a single
//! output bit.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{shape_err, Result};
use crate::real::{lit, Real};

pub const RMSNORM_EPS: f64 = 1e-6;

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub fn silu_derivative<T: Real>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// `ln(1 + e^x)`, linear above 20 to avoid overflow.
#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    if x > lit(20.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Views a `(packs, len, k)` tensor as `(packs·len, k)` token rows.
pub fn tokens<T: Real>(x: &Array3<T>) -> Array2<T> {
    let (p, l, k) = x.dim();
    x.as_standard_layout()
        .into_owned()
        .into_shape_with_order((p * l, k))
        .expect("standard layout reshape")
}

/// Inverse of [`tokens`].
pub fn untokens<T: Real>(x: Array2<T>, packs: usize, len: usize) -> Array3<T> {
    let k = x.ncols();
    x.as_standard_layout()
        .into_owned()
        .into_shape_with_order((packs, len, k))
        .expect("standard layout reshape")
}

/// `x · weight + bias` per row; `weight` is `(in, out)`.
pub fn linear<T: Real>(
    x: ArrayView2<'_, T>,
    weight: ArrayView2<'_, T>,
    bias: Option<ArrayView1<'_, T>>,
) -> Result<Array2<T>> {
    let (rows, inp) = x.dim();
    let (w_in, out) = weight.dim();
    if inp != w_in {
        return shape_err(format!(
            "linear input width {inp} does not match weight rows {w_in}"
        ));
    }
    if let Some(b) = &bias {
        if b.len() != out {
            return shape_err(format!(
                "linear bias has {} entries, expected {out}",
                b.len()
            ));
        }
    }
    let mut y = Array2::zeros((rows, out));
    y.axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(x.axis_iter(Axis(0)))
        .for_each(|(mut yr, xr)| {
            if let Some(b) = &bias {
                yr.assign(b);
            }
            for k in 0..inp {
                let xv = xr[k];
                let wr = weight.row(k);
                for j in 0..out {
                    yr[j] = yr[j] + xv * wr[j];
                }
            }
        });
    Ok(y)
}

/// Gradients of `Σ dy ∘ linear(x)`: `(dx, dweight, dbias)`.
pub fn linear_backward<T: Real>(
    x: ArrayView2<'_, T>,
    weight: ArrayView2<'_, T>,
    dy: ArrayView2<'_, T>,
) -> Result<(Array2<T>, Array2<T>, Array1<T>)> {
    let (rows, inp) = x.dim();
    let (w_in, out) = weight.dim();
    if inp != w_in || dy.dim() != (rows, out) {
        return shape_err(format!(
            "linear backward shapes x {:?}, weight {:?}, dy {:?}",
            x.dim(),
            weight.dim(),
            dy.dim()
        ));
    }
    let wt = weight.t();
    let dx = linear(dy, wt, None)?;
    let mut dw = Array2::zeros((inp, out));
    let mut db = Array1::zeros(out);
    for r in 0..rows {
        for k in 0..inp {
            let xv = x[[r, k]];
            for j in 0..out {
                dw[[k, j]] = dw[[k, j]] + xv * dy[[r, j]];
            }
        }
        for j in 0..out {
            db[j] = db[j] + dy[[r, j]];
        }
    }
    Ok((dx, dw, db))
}

fn inv_rms<T: Real>(row: ArrayView1<'_, T>) -> T {
    let dim = T::from_usize(row.len()).expect("dimension fits");
    let ms = row.iter().fold(T::zero(), |acc, &v| acc + v * v) / dim;
    T::one() / (ms + lit(RMSNORM_EPS)).sqrt()
}

/// `x / sqrt(mean(x²) + ε) ∘ weight` per row.
pub fn rmsnorm<T: Real>(x: ArrayView2<'_, T>, weight: ArrayView1<'_, T>) -> Result<Array2<T>> {
    if x.ncols() != weight.len() {
        return shape_err(format!(
            "rmsnorm width {} does not match weight {}",
            x.ncols(),
            weight.len()
        ));
    }
    let mut y = Array2::zeros(x.dim());
    y.axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(x.axis_iter(Axis(0)))
        .for_each(|(mut yr, xr)| {
            let r = inv_rms(xr);
            for j in 0..xr.len() {
                yr[j] = xr[j] * r * weight[j];
            }
        });
    Ok(y)
}

/// Gradients of `Σ dy ∘ rmsnorm(x)`: `(dx, dweight)`.
pub fn rmsnorm_backward<T: Real>(
    x: ArrayView2<'_, T>,
    weight: ArrayView1<'_, T>,
    dy: ArrayView2<'_, T>,
) -> Result<(Array2<T>, Array1<T>)> {
    if x.ncols() != weight.len() || dy.dim() != x.dim() {
        return shape_err("rmsnorm backward shape mismatch");
    }
    let dim = T::from_usize(x.ncols()).expect("dimension fits");
    let mut dx = Array2::zeros(x.dim());
    let mut dw = Array1::zeros(weight.len());
    for (r, xr) in x.axis_iter(Axis(0)).enumerate() {
        let s = inv_rms(xr);
        let mut dot = T::zero();
        for j in 0..xr.len() {
            dot = dot + dy[[r, j]] * weight[j] * xr[j];
            dw[j] = dw[j] + dy[[r, j]] * xr[j] * s;
        }
        let s3 = s * s * s;
        for j in 0..xr.len() {
            dx[[r, j]] = s * weight[j] * dy[[r, j]] - xr[j] * s3 * dot / dim;
        }
    }
    Ok((dx, dw))
}
