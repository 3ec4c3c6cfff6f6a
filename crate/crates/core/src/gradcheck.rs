//! Central finite-difference checks of the packed backward passes.
//!
//! Each instance draws a small packed batch, a random cotangent `dy` (zero
//! on padding slots), and compares the analytic gradient of `Σ dy ∘ f` with
//! `(L(θ + h) − L(θ − h)) / 2h` for every real-slot input and every
//! parameter. Errors are normwise per tensor: the largest absolute
//! deviation over the largest numeric gradient magnitude.

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conv::{conv1d_pack_backward, conv1d_pack_forward, ConvParams};
use crate::error::Result;
use crate::packing::{compute_reverse_indices, plan_fifo, PackPlan};
use crate::ssm::{ssm_backward_packed, ssm_forward_packed, SsmParams};

pub const DEFAULT_STEP: f64 = 1e-6;
pub const MAX_INSTANCE_LEN: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub tensor: String,
    pub entries: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    /// Flat row-major index of the largest deviation.
    pub worst_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub operator: String,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheck {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

fn compare(tensor: &str, analytic: &[f64], numeric: &[f64]) -> TensorCheck {
    let mut max_abs = 0f64;
    let mut scale = 0f64;
    let mut worst = None;
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let dev = (a - n).abs();
        scale = scale.max(n.abs());
        if dev > max_abs || dev.is_nan() {
            max_abs = dev;
            worst = Some(i);
        }
    }
    TensorCheck {
        tensor: tensor.to_string(),
        entries: numeric.len(),
        max_abs_err: max_abs,
        max_rel_err: if max_abs == 0.0 {
            0.0
        } else {
            max_abs / scale.max(f64::MIN_POSITIVE)
        },
        worst_index: worst,
    }
}

/// Central differences of `loss` with respect to the entries of the tensor
/// that `field` selects; entries where `active` is false are skipped and
/// reported as 0.
fn numeric_grad<I: Clone>(
    inst: &I,
    field: impl Fn(&mut I) -> &mut [f64],
    active: impl Fn(usize) -> bool,
    loss: impl Fn(&I) -> Result<f64>,
    h: f64,
) -> Result<Vec<f64>> {
    let n = field(&mut inst.clone()).len();
    let mut out = vec![0.0; n];
    for (i, g) in out.iter_mut().enumerate() {
        if !active(i) {
            continue;
        }
        let mut plus = inst.clone();
        field(&mut plus)[i] += h;
        let mut minus = inst.clone();
        field(&mut minus)[i] -= h;
        *g = (loss(&plus)? - loss(&minus)?) / (2.0 * h);
    }
    Ok(out)
}

fn masked(values: &[f64], active: impl Fn(usize) -> bool) -> Vec<f64> {
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| if active(i) { v } else { 0.0 })
        .collect()
}

fn slot_mask(pos: &Array2<usize>, plan: &PackPlan) -> Vec<bool> {
    let mut real = vec![false; pos.len()];
    for (id, (p, off)) in plan.placements().into_iter().enumerate() {
        for t in 0..plan.lengths[id] {
            real[p * plan.capacity + off + t] = true;
        }
    }
    real
}

fn uniform3(
    rng: &mut ChaCha8Rng,
    shape: (usize, usize, usize),
    lo: f64,
    hi: f64,
    real: &[bool],
) -> Array3<f64> {
    let k = shape.2;
    let mut i = 0;
    Array3::from_shape_fn(shape, |_| {
        let v = rng.random_range(lo..hi);
        let keep = real[i / k];
        i += 1;
        if keep {
            v
        } else {
            0.0
        }
    })
}

fn small_plan(rng: &mut ChaCha8Rng) -> Result<PackPlan> {
    let count = rng.random_range(1..=4);
    let lengths: Vec<usize> = (0..count)
        .map(|_| rng.random_range(1..=MAX_INSTANCE_LEN))
        .collect();
    plan_fifo(&lengths, MAX_INSTANCE_LEN)
}

#[derive(Debug, Clone)]
pub struct SsmInstance {
    pub plan: PackPlan,
    pub params: SsmParams<f64>,
    pub dy: Array3<f64>,
}

impl SsmInstance {
    pub fn random(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plan = small_plan(&mut rng)?;
        let channels = rng.random_range(1..=3);
        let states = rng.random_range(1..=3);
        let pos = plan.position_indices();
        let real = slot_mask(&pos, &plan);
        let shape = |k| (plan.num_packs(), plan.capacity, k);
        let params = SsmParams {
            a: Array2::from_shape_fn((channels, states), |_| -rng.random_range(0.1..2.0)),
            delta: uniform3(&mut rng, shape(channels), 0.05, 1.0, &real),
            b: uniform3(&mut rng, shape(states), -1.0, 1.0, &real),
            c: uniform3(&mut rng, shape(states), -1.0, 1.0, &real),
            d_skip: Array1::from_shape_fn(channels, |_| rng.random_range(-1.0..1.0)),
            x: uniform3(&mut rng, shape(channels), -1.0, 1.0, &real),
        };
        let dy = uniform3(&mut rng, shape(channels), -1.0, 1.0, &real);
        Ok(Self { plan, params, dy })
    }

    fn loss(&self, params: &SsmParams<f64>) -> Result<f64> {
        let y = ssm_forward_packed(params, &self.plan.position_indices())?;
        Ok((&y * &self.dy).sum())
    }

    pub fn check(&self, h: f64) -> Result<GradCheck> {
        let pos = self.plan.position_indices();
        let grads = ssm_backward_packed(&self.params, &pos, &self.dy)?;
        let real = slot_mask(&pos, &self.plan);
        let loss = |p: &SsmParams<f64>| self.loss(p);
        let per_slot = |k: usize| {
            let real = &real;
            move |i: usize| real[i / k]
        };
        let (channels, states) = self.params.a.dim();
        let all = |_: usize| true;

        let mut tensors = Vec::new();
        let mut slot_tensor = |name: &str,
                               k: usize,
                               analytic: &Array3<f64>,
                               field: fn(&mut SsmParams<f64>) -> &mut [f64]|
         -> Result<()> {
            let num = numeric_grad(&self.params, field, per_slot(k), loss, h)?;
            let ana = masked(analytic.as_slice().expect("standard layout"), per_slot(k));
            tensors.push(compare(name, &ana, &num));
            Ok(())
        };
        slot_tensor("x", channels, &grads.dx, |p| p.x.as_slice_mut().unwrap())?;
        slot_tensor("delta", channels, &grads.ddelta, |p| {
            p.delta.as_slice_mut().unwrap()
        })?;
        slot_tensor("b", states, &grads.db, |p| p.b.as_slice_mut().unwrap())?;
        slot_tensor("c", states, &grads.dc, |p| p.c.as_slice_mut().unwrap())?;

        let num = numeric_grad(&self.params, |p| p.a.as_slice_mut().unwrap(), all, loss, h)?;
        tensors.push(compare("a", grads.da.as_slice().unwrap(), &num));
        let num = numeric_grad(
            &self.params,
            |p| p.d_skip.as_slice_mut().unwrap(),
            all,
            loss,
            h,
        )?;
        tensors.push(compare("d_skip", grads.dd_skip.as_slice().unwrap(), &num));
        Ok(GradCheck {
            operator: "ssm_pack".into(),
            tensors,
        })
    }
}

#[derive(Debug, Clone)]
struct ConvState {
    x: Array3<f64>,
    params: ConvParams<f64>,
}

#[derive(Debug, Clone)]
pub struct ConvInstance {
    pub plan: PackPlan,
    pub x: Array3<f64>,
    pub params: ConvParams<f64>,
    pub dy: Array3<f64>,
}

impl ConvInstance {
    pub fn random(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plan = small_plan(&mut rng)?;
        let channels = rng.random_range(1..=3);
        let width = rng.random_range(1..=4);
        let pos = plan.position_indices();
        let real = slot_mask(&pos, &plan);
        let shape = (plan.num_packs(), plan.capacity, channels);
        let x = uniform3(&mut rng, shape, -1.0, 1.0, &real);
        let params = ConvParams {
            weight: Array2::from_shape_fn((channels, width), |_| rng.random_range(-1.0..1.0)),
            bias: Array1::from_shape_fn(channels, |_| rng.random_range(-0.5..0.5)),
        };
        let dy = uniform3(&mut rng, shape, -1.0, 1.0, &real);
        Ok(Self {
            plan,
            x,
            params,
            dy,
        })
    }

    pub fn check(&self, h: f64) -> Result<GradCheck> {
        let pos = self.plan.position_indices();
        let rev = compute_reverse_indices(&pos, &self.plan)?;
        let grads = conv1d_pack_backward(&self.x, &self.params, &pos, rev.values(), &self.dy)?;
        let real = slot_mask(&pos, &self.plan);
        let channels = self.params.channels();
        let state = ConvState {
            x: self.x.clone(),
            params: self.params.clone(),
        };
        let loss = |s: &ConvState| -> Result<f64> {
            Ok((&conv1d_pack_forward(&s.x, &s.params, &pos)? * &self.dy).sum())
        };
        let real_slot = |i: usize| real[i / channels];
        let all = |_: usize| true;

        let num = numeric_grad(&state, |s| s.x.as_slice_mut().unwrap(), real_slot, loss, h)?;
        let ana = masked(grads.dx.as_slice().unwrap(), real_slot);
        let mut tensors = vec![compare("x", &ana, &num)];
        let num = numeric_grad(
            &state,
            |s| s.params.weight.as_slice_mut().unwrap(),
            all,
            loss,
            h,
        )?;
        tensors.push(compare("weight", grads.dweight.as_slice().unwrap(), &num));
        let num = numeric_grad(
            &state,
            |s| s.params.bias.as_slice_mut().unwrap(),
            all,
            loss,
            h,
        )?;
        tensors.push(compare("bias", grads.dbias.as_slice().unwrap(), &num));
        Ok(GradCheck {
            operator: "conv1d_pack".into(),
            tensors,
        })
    }
}
