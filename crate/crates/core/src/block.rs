//! Residual selective-SSM block over packed or unpacked sequences.
//!
//! ```text
//! u        = rmsnorm(x)
//! [xi, z]  = u · W_in
//! xa       = silu(conv(xi))
//! Δ        = softplus(xa · W_dt + b_dt)
//! B, C     = xa · W_B, xa · W_C
//! y        = ssm(A, Δ, B, C, D, xa) ∘ silu(z)
//! out      = x + y · W_out
//! ```
//!
//! Only the convolution and the SSM see position indices; every other step
//! is token-wise.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{concatenate, s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conv::{conv1d_pack_backward, conv1d_pack_forward, conv1d_serial, ConvParams};
use crate::error::{shape_err, Result};
use crate::ops::{
    linear, linear_backward, rmsnorm, rmsnorm_backward, sigmoid, silu, silu_derivative, softplus,
    tokens, untokens,
};
use crate::packing::reverse_from_positions;
use crate::real::{lit, Real};
use crate::ssm::{ssm_backward_packed, ssm_forward_packed, ssm_forward_serial, SsmParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockDims {
    pub model_dim: usize,
    pub expanded_dim: usize,
    pub state_dim: usize,
    pub conv_width: usize,
}

impl Default for BlockDims {
    fn default() -> Self {
        Self {
            model_dim: 64,
            expanded_dim: 128,
            state_dim: 16,
            conv_width: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub norm_weight: Array1<T>,
    /// `(model_dim, 2·expanded_dim)`: first half feeds the SSM branch, second
    /// half the gate.
    pub in_proj: Array2<T>,
    pub conv: ConvParams<T>,
    pub dt_proj: Array2<T>,
    pub dt_bias: Array1<T>,
    pub b_proj: Array2<T>,
    pub c_proj: Array2<T>,
    pub a: Array2<T>,
    pub d_skip: Array1<T>,
    pub out_proj: Array2<T>,
}

impl<T: Real> BlockParams<T> {
    /// Seeded uniform `[-0.1, 0.1]` weights; `A = -exp(U[-0.1, 0.1])` and the
    /// norm scale is `1 + U[-0.1, 0.1]`.
    pub fn init(dims: BlockDims, seed: u64) -> Self {
        Self::init_scaled(dims, seed, 0.1)
    }

    /// Like [`BlockParams::init`] with entries drawn from `U[-scale, scale]`.
    pub fn init_scaled(dims: BlockDims, seed: u64, scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u = |shape: (usize, usize)| {
            Array2::from_shape_fn(shape, |_| lit::<T>(rng.random_range(-scale..=scale)))
        };
        let BlockDims {
            model_dim: m,
            expanded_dim: e,
            state_dim: n,
            conv_width: w,
        } = dims;
        let norm_weight = u((1, m)).row(0).mapv(|v| T::one() + v);
        let in_proj = u((m, 2 * e));
        let conv = ConvParams {
            weight: u((e, w)),
            bias: u((1, e)).row(0).to_owned(),
        };
        let dt_proj = u((e, e));
        let dt_bias = u((1, e)).row(0).to_owned();
        let b_proj = u((e, n));
        let c_proj = u((e, n));
        let a = u((e, n)).mapv(|v| -v.exp());
        let d_skip = u((1, e)).row(0).to_owned();
        let out_proj = u((e, m));
        Self {
            norm_weight,
            in_proj,
            conv,
            dt_proj,
            dt_bias,
            b_proj,
            c_proj,
            a,
            d_skip,
            out_proj,
        }
    }

    pub fn dims(&self) -> BlockDims {
        BlockDims {
            model_dim: self.norm_weight.len(),
            expanded_dim: self.dt_proj.nrows(),
            state_dim: self.a.ncols(),
            conv_width: self.conv.width(),
        }
    }

    pub fn validate(&self) -> Result<BlockDims> {
        let d = self.dims();
        let (m, e, n) = (d.model_dim, d.expanded_dim, d.state_dim);
        let checks = [
            ("in_proj", self.in_proj.dim(), (m, 2 * e)),
            ("conv.weight", self.conv.weight.dim(), (e, d.conv_width)),
            ("dt_proj", self.dt_proj.dim(), (e, e)),
            ("b_proj", self.b_proj.dim(), (e, n)),
            ("c_proj", self.c_proj.dim(), (e, n)),
            ("a", self.a.dim(), (e, n)),
            ("out_proj", self.out_proj.dim(), (e, m)),
        ];
        for (name, got, want) in checks {
            if got != want {
                return shape_err(format!("{name} is {got:?}, expected {want:?}"));
            }
        }
        for (name, len) in [
            ("conv.bias", self.conv.bias.len()),
            ("dt_bias", self.dt_bias.len()),
            ("d_skip", self.d_skip.len()),
        ] {
            if len != e {
                return shape_err(format!("{name} has {len} entries, expected {e}"));
            }
        }
        Ok(d)
    }

    /// Applies `f(param, grad)` to every parameter tensor in a fixed order.
    pub fn zip_mut_with(&mut self, grads: &BlockGrads<T>, mut f: impl FnMut(&mut T, T)) {
        let mut go = |p: &mut [T], g: &[T]| p.iter_mut().zip(g).for_each(|(p, &g)| f(p, g));
        go(
            self.norm_weight.as_slice_mut().unwrap(),
            grads.norm_weight.as_slice().unwrap(),
        );
        go(
            self.in_proj.as_slice_mut().unwrap(),
            grads.in_proj.as_slice().unwrap(),
        );
        go(
            self.conv.weight.as_slice_mut().unwrap(),
            grads.conv_weight.as_slice().unwrap(),
        );
        go(
            self.conv.bias.as_slice_mut().unwrap(),
            grads.conv_bias.as_slice().unwrap(),
        );
        go(
            self.dt_proj.as_slice_mut().unwrap(),
            grads.dt_proj.as_slice().unwrap(),
        );
        go(
            self.dt_bias.as_slice_mut().unwrap(),
            grads.dt_bias.as_slice().unwrap(),
        );
        go(
            self.b_proj.as_slice_mut().unwrap(),
            grads.b_proj.as_slice().unwrap(),
        );
        go(
            self.c_proj.as_slice_mut().unwrap(),
            grads.c_proj.as_slice().unwrap(),
        );
        go(self.a.as_slice_mut().unwrap(), grads.a.as_slice().unwrap());
        go(
            self.d_skip.as_slice_mut().unwrap(),
            grads.d_skip.as_slice().unwrap(),
        );
        go(
            self.out_proj.as_slice_mut().unwrap(),
            grads.out_proj.as_slice().unwrap(),
        );
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrads<T> {
    pub dx: Array3<T>,
    pub norm_weight: Array1<T>,
    pub in_proj: Array2<T>,
    pub conv_weight: Array2<T>,
    pub conv_bias: Array1<T>,
    pub dt_proj: Array2<T>,
    pub dt_bias: Array1<T>,
    pub b_proj: Array2<T>,
    pub c_proj: Array2<T>,
    pub a: Array2<T>,
    pub d_skip: Array1<T>,
    pub out_proj: Array2<T>,
}

/// Operator categories tracked by [`FlopCounter`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlopKind {
    Linear,
    Conv,
    Scan,
    Norm,
}

/// Per-operator floating-point operation tallies, filled in as operators run.
#[derive(Debug, Default)]
pub struct FlopCounter {
    linear: AtomicU64,
    conv: AtomicU64,
    scan: AtomicU64,
    norm: AtomicU64,
}

impl FlopCounter {
    pub fn new() -> Self {
        Self::default()
    }

    fn slot(&self, kind: FlopKind) -> &AtomicU64 {
        match kind {
            FlopKind::Linear => &self.linear,
            FlopKind::Conv => &self.conv,
            FlopKind::Scan => &self.scan,
            FlopKind::Norm => &self.norm,
        }
    }

    pub fn add(&self, kind: FlopKind, amount: u64) {
        self.slot(kind).fetch_add(amount, Ordering::Relaxed);
    }

    pub fn get(&self, kind: FlopKind) -> u64 {
        self.slot(kind).load(Ordering::Relaxed)
    }

    pub fn total(&self) -> u64 {
        [
            FlopKind::Linear,
            FlopKind::Conv,
            FlopKind::Scan,
            FlopKind::Norm,
        ]
        .into_iter()
        .map(|k| self.get(k))
        .sum()
    }
}

/// Work per `(token, channel, state)` of the scan: `ā·h + b̄·x` (3) plus the
/// `C·h` contraction (2).
pub const SCAN_FLOPS_PER_STATE: u64 = 5;
/// Work per `(token, channel)` of the skip term `D·x` added to the output.
pub const SCAN_FLOPS_PER_CHANNEL: u64 = 2;
/// Square, accumulate, normalize and scale per element.
pub const NORM_FLOPS_PER_ELEMENT: u64 = 4;

fn count_linear(
    counter: Option<&FlopCounter>,
    rows: usize,
    weight: ArrayView2<'_, impl Real>,
    bias: bool,
) {
    if let Some(c) = counter {
        let (inp, out) = weight.dim();
        let per_row = 2 * inp * out + if bias { out } else { 0 };
        c.add(FlopKind::Linear, (rows * per_row) as u64);
    }
}

struct Forward<T> {
    x_tok: Array2<T>,
    u: Array2<T>,
    xi: Array3<T>,
    xc: Array3<T>,
    xa: Array3<T>,
    dt_raw: Array2<T>,
    ssm: SsmParams<T>,
    ys: Array2<T>,
    z: Array2<T>,
    g: Array2<T>,
    out: Array3<T>,
}

fn forward_impl<T: Real>(
    x: &Array3<T>,
    position_indices: &Array2<usize>,
    params: &BlockParams<T>,
    counter: Option<&FlopCounter>,
) -> Result<Forward<T>> {
    let dims = params.validate()?;
    let (packs, len, m) = x.dim();
    if m != dims.model_dim {
        return shape_err(format!(
            "block input has width {m}, model_dim is {}",
            dims.model_dim
        ));
    }
    if position_indices.dim() != (packs, len) {
        return shape_err(format!(
            "position indices are {:?}, expected {:?}",
            position_indices.dim(),
            (packs, len)
        ));
    }
    let e = dims.expanded_dim;
    let rows = packs * len;

    let x_tok = tokens(x);
    let u = rmsnorm(x_tok.view(), params.norm_weight.view())?;
    if let Some(c) = counter {
        c.add(FlopKind::Norm, NORM_FLOPS_PER_ELEMENT * (rows * m) as u64);
    }
    let xz = linear(u.view(), params.in_proj.view(), None)?;
    count_linear(counter, rows, params.in_proj.view(), false);
    let xi = untokens(xz.slice(s![.., ..e]).to_owned(), packs, len);
    let z = xz.slice(s![.., e..]).to_owned();

    let xc = conv1d_pack_forward(&xi, &params.conv, position_indices)?;
    if let Some(c) = counter {
        c.add(FlopKind::Conv, (rows * e * 2 * params.conv.width()) as u64);
    }
    let xa = xc.mapv(silu);
    let xa_tok = tokens(&xa);

    let dt_raw = linear(
        xa_tok.view(),
        params.dt_proj.view(),
        Some(params.dt_bias.view()),
    )?;
    count_linear(counter, rows, params.dt_proj.view(), true);
    let b_tok = linear(xa_tok.view(), params.b_proj.view(), None)?;
    count_linear(counter, rows, params.b_proj.view(), false);
    let c_tok = linear(xa_tok.view(), params.c_proj.view(), None)?;
    count_linear(counter, rows, params.c_proj.view(), false);

    let ssm = SsmParams {
        a: params.a.clone(),
        delta: untokens(dt_raw.mapv(softplus), packs, len),
        b: untokens(b_tok, packs, len),
        c: untokens(c_tok, packs, len),
        d_skip: params.d_skip.clone(),
        x: xa.clone(),
    };
    let ys = tokens(&ssm_forward_packed(&ssm, position_indices)?);
    if let Some(c) = counter {
        let n = params.a.ncols() as u64;
        c.add(
            FlopKind::Scan,
            (rows * e) as u64 * (SCAN_FLOPS_PER_STATE * n + SCAN_FLOPS_PER_CHANNEL),
        );
    }

    let g = &ys * &z.mapv(silu);
    let o = linear(g.view(), params.out_proj.view(), None)?;
    count_linear(counter, rows, params.out_proj.view(), false);
    let out = untokens(&x_tok + &o, packs, len);
    Ok(Forward {
        x_tok,
        u,
        xi,
        xc,
        xa,
        dt_raw,
        ssm,
        ys,
        z,
        g,
        out,
    })
}

/// Packed forward pass; padding-slot outputs are meaningless and discarded
/// on unpack.
pub fn mamba_block_forward_packed<T: Real>(
    x: &Array3<T>,
    position_indices: &Array2<usize>,
    params: &BlockParams<T>,
) -> Result<Array3<T>> {
    Ok(forward_impl(x, position_indices, params, None)?.out)
}

/// Packed forward pass that also tallies per-operator FLOPs into `counter`.
pub fn mamba_block_forward_counted<T: Real>(
    x: &Array3<T>,
    position_indices: &Array2<usize>,
    params: &BlockParams<T>,
    counter: &FlopCounter,
) -> Result<Array3<T>> {
    Ok(forward_impl(x, position_indices, params, Some(counter))?.out)
}

/// One unpacked sequence through the serial operators (per-sequence conv
/// oracle and step-by-step SSM recurrence).
pub fn mamba_block_forward_sequence<T: Real>(
    x: ArrayView2<'_, T>,
    params: &BlockParams<T>,
) -> Result<Array2<T>> {
    let dims = params.validate()?;
    let (len, m) = x.dim();
    if m != dims.model_dim {
        return shape_err(format!(
            "block input has width {m}, model_dim is {}",
            dims.model_dim
        ));
    }
    let e = dims.expanded_dim;
    let u = rmsnorm(x, params.norm_weight.view())?;
    let xz = linear(u.view(), params.in_proj.view(), None)?;
    let xi = xz.slice(s![.., ..e]);
    let z = xz.slice(s![.., e..]);
    let xa = conv1d_serial(xi, &params.conv)?.mapv(silu);
    let delta = linear(
        xa.view(),
        params.dt_proj.view(),
        Some(params.dt_bias.view()),
    )?
    .mapv(softplus);
    let b = linear(xa.view(), params.b_proj.view(), None)?;
    let c = linear(xa.view(), params.c_proj.view(), None)?;
    let lift = |m: Array2<T>| m.insert_axis(Axis(0));
    let ssm = SsmParams {
        a: params.a.clone(),
        delta: lift(delta),
        b: lift(b),
        c: lift(c),
        d_skip: params.d_skip.clone(),
        x: lift(xa.clone()),
    };
    debug_assert_eq!(ssm.x.dim(), (1, len, e));
    let ys = ssm_forward_serial(&ssm)?;
    let g = &ys * &z.mapv(silu);
    let o = linear(g.view(), params.out_proj.view(), None)?;
    Ok(&x + &o)
}

/// Gradients of `Σ dout ∘ out` through the packed block.
pub fn mamba_block_backward_packed<T: Real>(
    x: &Array3<T>,
    position_indices: &Array2<usize>,
    params: &BlockParams<T>,
    dout: &Array3<T>,
) -> Result<BlockGrads<T>> {
    let fw = forward_impl(x, position_indices, params, None)?;
    if dout.dim() != x.dim() {
        return shape_err(format!("dout is {:?}, expected {:?}", dout.dim(), x.dim()));
    }
    let (packs, len, _) = x.dim();
    let dout_tok = tokens(dout);

    let (dg, d_out_proj, _) =
        linear_backward(fw.g.view(), params.out_proj.view(), dout_tok.view())?;
    let dys = &dg * &fw.z.mapv(silu);
    let dz = &dg * &fw.ys * fw.z.mapv(silu_derivative);

    let sg = ssm_backward_packed(&fw.ssm, position_indices, &untokens(dys, packs, len))?;
    let xa_tok = tokens(&fw.xa);
    let ddt_raw = tokens(&sg.ddelta) * fw.dt_raw.mapv(sigmoid);
    let (dxa_dt, d_dt_proj, d_dt_bias) =
        linear_backward(xa_tok.view(), params.dt_proj.view(), ddt_raw.view())?;
    let (dxa_b, d_b_proj, _) =
        linear_backward(xa_tok.view(), params.b_proj.view(), tokens(&sg.db).view())?;
    let (dxa_c, d_c_proj, _) =
        linear_backward(xa_tok.view(), params.c_proj.view(), tokens(&sg.dc).view())?;
    let dxa = tokens(&sg.dx) + dxa_dt + dxa_b + dxa_c;
    let dxc = untokens(dxa * tokens(&fw.xc).mapv(silu_derivative), packs, len);

    let rev = reverse_from_positions(position_indices);
    let cg = conv1d_pack_backward(&fw.xi, &params.conv, position_indices, &rev, &dxc)?;
    let dxz = concatenate(Axis(1), &[tokens(&cg.dx).view(), dz.view()]).expect("matching rows");
    let (du, d_in_proj, _) = linear_backward(fw.u.view(), params.in_proj.view(), dxz.view())?;
    let (dx_norm, d_norm) =
        rmsnorm_backward(fw.x_tok.view(), params.norm_weight.view(), du.view())?;

    Ok(BlockGrads {
        dx: untokens(dout_tok + dx_norm, packs, len),
        norm_weight: d_norm,
        in_proj: d_in_proj,
        conv_weight: cg.dweight,
        conv_bias: cg.dbias,
        dt_proj: d_dt_proj,
        dt_bias: d_dt_bias,
        b_proj: d_b_proj,
        c_proj: d_c_proj,
        a: sg.da,
        d_skip: sg.dd_skip,
        out_proj: d_out_proj,
    })
}
