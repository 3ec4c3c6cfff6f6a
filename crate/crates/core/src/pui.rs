//! Packing-unpacking invariance checks.
//!
//! An operator `f` is invariant under packing when
//! `unpack(f(pack(S))) == f(S)` for every batch `S`. Element-wise and
//! token-wise operators satisfy this for free; sequence-wise ones only when
//! they respect the position indices.

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::block::{
    mamba_block_forward_packed, mamba_block_forward_sequence, BlockDims, BlockParams,
};
use crate::conv::{conv1d_forward_unmasked, conv1d_pack_forward, conv1d_serial, ConvParams};
use crate::error::Result;
use crate::ops::{linear, rmsnorm, sigmoid, silu, softplus, tokens, untokens};
use crate::packing::{pack, unpack_rows, PackPlan, SequenceBatch};
use crate::real::{lit, Real};
use crate::ssm::{ssm_forward_packed, ssm_forward_serial, SsmParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OperatorClass {
    ElementWise,
    TokenWise,
    SequenceWise,
}

/// An operator that can run on one unpacked sequence or on a packed batch.
pub trait PackableOp<T: Real>: Send + Sync {
    fn name(&self) -> &str;

    fn class(&self) -> OperatorClass;

    fn apply_sequence(&self, seq: ArrayView2<'_, T>) -> Result<Array2<T>>;

    fn apply_packed(&self, data: &Array3<T>, position_indices: &Array2<usize>)
        -> Result<Array3<T>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Location {
    pub sequence: usize,
    pub position: usize,
    pub channel: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PuiReport {
    pub operator: String,
    pub class: OperatorClass,
    pub passed: bool,
    pub tolerance: f64,
    pub max_abs_dev: f64,
    /// `max_abs_dev` divided by the largest reference magnitude.
    pub max_rel_dev: f64,
    pub worst_location: Option<Location>,
}

/// Runs `op` both ways and compares `unpack(op(pack(batch)))` with `op`
/// applied to each sequence on its own.
pub fn pui_check<T: Real>(
    op: &dyn PackableOp<T>,
    batch: &SequenceBatch<T>,
    plan: &PackPlan,
    tolerance: f64,
) -> Result<PuiReport> {
    let packed = pack(batch, plan)?;
    let out = op.apply_packed(&packed.data, &packed.position_indices)?;
    let via_pack = unpack_rows(out.view(), plan)?;

    let mut max_abs = 0f64;
    let mut scale = 0f64;
    let mut worst = None;
    for (id, seq) in batch.sequences().iter().enumerate() {
        let reference = op.apply_sequence(seq.view())?;
        for ((pos, ch), &want) in reference.indexed_iter() {
            let got = via_pack[id][[pos, ch]];
            let dev = (got.to_f64_lossy() - want.to_f64_lossy()).abs();
            scale = scale.max(want.to_f64_lossy().abs());
            // NaN deviations always count as worst.
            if dev > max_abs || (dev.is_nan() && !max_abs.is_nan()) {
                max_abs = dev;
                worst = Some(Location {
                    sequence: id,
                    position: pos,
                    channel: ch,
                });
            }
        }
    }
    let max_rel = if max_abs == 0.0 {
        0.0
    } else {
        max_abs / scale.max(f64::MIN_POSITIVE)
    };
    Ok(PuiReport {
        operator: op.name().to_string(),
        class: op.class(),
        passed: max_rel <= tolerance,
        tolerance,
        max_abs_dev: max_abs,
        max_rel_dev: max_rel,
        worst_location: if max_abs > 0.0 || max_abs.is_nan() {
            worst
        } else {
            None
        },
    })
}

pub struct SigmoidOp;
pub struct SiluOp;

impl<T: Real> PackableOp<T> for SigmoidOp {
    fn name(&self) -> &str {
        "sigmoid"
    }
    fn class(&self) -> OperatorClass {
        OperatorClass::ElementWise
    }
    fn apply_sequence(&self, seq: ArrayView2<'_, T>) -> Result<Array2<T>> {
        Ok(seq.mapv(sigmoid))
    }
    fn apply_packed(&self, data: &Array3<T>, _: &Array2<usize>) -> Result<Array3<T>> {
        Ok(data.mapv(sigmoid))
    }
}

impl<T: Real> PackableOp<T> for SiluOp {
    fn name(&self) -> &str {
        "silu"
    }
    fn class(&self) -> OperatorClass {
        OperatorClass::ElementWise
    }
    fn apply_sequence(&self, seq: ArrayView2<'_, T>) -> Result<Array2<T>> {
        Ok(seq.mapv(silu))
    }
    fn apply_packed(&self, data: &Array3<T>, _: &Array2<usize>) -> Result<Array3<T>> {
        Ok(data.mapv(silu))
    }
}

pub struct LinearOp<T> {
    pub weight: Array2<T>,
    pub bias: Option<Array1<T>>,
}

impl<T: Real> PackableOp<T> for LinearOp<T> {
    fn name(&self) -> &str {
        "linear"
    }
    fn class(&self) -> OperatorClass {
        OperatorClass::TokenWise
    }
    fn apply_sequence(&self, seq: ArrayView2<'_, T>) -> Result<Array2<T>> {
        linear(
            seq,
            self.weight.view(),
            self.bias.as_ref().map(|b| b.view()),
        )
    }
    fn apply_packed(&self, data: &Array3<T>, _: &Array2<usize>) -> Result<Array3<T>> {
        let (p, l, _) = data.dim();
        Ok(untokens(self.apply_sequence(tokens(data).view())?, p, l))
    }
}

pub struct RmsNormOp<T> {
    pub weight: Array1<T>,
}

impl<T: Real> PackableOp<T> for RmsNormOp<T> {
    fn name(&self) -> &str {
        "rmsnorm"
    }
    fn class(&self) -> OperatorClass {
        OperatorClass::TokenWise
    }
    fn apply_sequence(&self, seq: ArrayView2<'_, T>) -> Result<Array2<T>> {
        rmsnorm(seq, self.weight.view())
    }
    fn apply_packed(&self, data: &Array3<T>, _: &Array2<usize>) -> Result<Array3<T>> {
        let (p, l, _) = data.dim();
        Ok(untokens(self.apply_sequence(tokens(data).view())?, p, l))
    }
}

pub struct ConvOp<T> {
    pub params: ConvParams<T>,
}

impl<T: Real> PackableOp<T> for ConvOp<T> {
    fn name(&self) -> &str {
        "conv1d_pack"
    }
    fn class(&self) -> OperatorClass {
        OperatorClass::SequenceWise
    }
    fn apply_sequence(&self, seq: ArrayView2<'_, T>) -> Result<Array2<T>> {
        conv1d_serial(seq, &self.params)
    }
    fn apply_packed(
        &self,
        data: &Array3<T>,
        position_indices: &Array2<usize>,
    ) -> Result<Array3<T>> {
        conv1d_pack_forward(data, &self.params, position_indices)
    }
}

/// Convolution that ignores position indices when packed; a known-bad
/// operator for exercising the checker.
pub struct UnmaskedConvOp<T> {
    pub params: ConvParams<T>,
}

impl<T: Real> PackableOp<T> for UnmaskedConvOp<T> {
    fn name(&self) -> &str {
        "conv1d_unmasked"
    }
    fn class(&self) -> OperatorClass {
        OperatorClass::SequenceWise
    }
    fn apply_sequence(&self, seq: ArrayView2<'_, T>) -> Result<Array2<T>> {
        conv1d_serial(seq, &self.params)
    }
    fn apply_packed(&self, data: &Array3<T>, _: &Array2<usize>) -> Result<Array3<T>> {
        conv1d_forward_unmasked(data, &self.params)
    }
}

/// Selective SSM whose step size and input/output projections are
/// token-wise functions of its input.
pub struct SelectiveSsmOp<T> {
    pub a: Array2<T>,
    pub d_skip: Array1<T>,
    pub dt_proj: Array2<T>,
    pub dt_bias: Array1<T>,
    pub b_proj: Array2<T>,
    pub c_proj: Array2<T>,
}

impl<T: Real> SelectiveSsmOp<T> {
    fn params_for(&self, x: Array3<T>) -> Result<SsmParams<T>> {
        let (p, l, _) = x.dim();
        let xt = tokens(&x);
        let delta =
            linear(xt.view(), self.dt_proj.view(), Some(self.dt_bias.view()))?.mapv(softplus);
        Ok(SsmParams {
            a: self.a.clone(),
            delta: untokens(delta, p, l),
            b: untokens(linear(xt.view(), self.b_proj.view(), None)?, p, l),
            c: untokens(linear(xt.view(), self.c_proj.view(), None)?, p, l),
            d_skip: self.d_skip.clone(),
            x,
        })
    }
}

impl<T: Real> PackableOp<T> for SelectiveSsmOp<T> {
    fn name(&self) -> &str {
        "ssm_pack"
    }
    fn class(&self) -> OperatorClass {
        OperatorClass::SequenceWise
    }
    fn apply_sequence(&self, seq: ArrayView2<'_, T>) -> Result<Array2<T>> {
        let params = self.params_for(seq.to_owned().insert_axis(Axis(0)))?;
        ssm_forward_serial(&params)
    }
    fn apply_packed(
        &self,
        data: &Array3<T>,
        position_indices: &Array2<usize>,
    ) -> Result<Array3<T>> {
        ssm_forward_packed(&self.params_for(data.clone())?, position_indices)
    }
}

pub struct BlockOp<T> {
    pub params: BlockParams<T>,
}

impl<T: Real> PackableOp<T> for BlockOp<T> {
    fn name(&self) -> &str {
        "mamba_block"
    }
    fn class(&self) -> OperatorClass {
        OperatorClass::SequenceWise
    }
    fn apply_sequence(&self, seq: ArrayView2<'_, T>) -> Result<Array2<T>> {
        mamba_block_forward_sequence(seq, &self.params)
    }
    fn apply_packed(
        &self,
        data: &Array3<T>,
        position_indices: &Array2<usize>,
    ) -> Result<Array3<T>> {
        mamba_block_forward_packed(data, position_indices, &self.params)
    }
}

fn uniform<T: Real>(rng: &mut ChaCha8Rng, shape: (usize, usize), lo: f64, hi: f64) -> Array2<T> {
    Array2::from_shape_fn(shape, |_| lit(rng.random_range(lo..hi)))
}

pub fn random_conv<T: Real>(rng: &mut ChaCha8Rng, channels: usize, width: usize) -> ConvParams<T> {
    ConvParams {
        weight: uniform(rng, (channels, width), -1.0, 1.0),
        bias: uniform(rng, (1, channels), -0.5, 0.5).row(0).to_owned(),
    }
}

pub fn random_selective_ssm<T: Real>(
    rng: &mut ChaCha8Rng,
    channels: usize,
    states: usize,
) -> SelectiveSsmOp<T> {
    SelectiveSsmOp {
        a: uniform::<T>(rng, (channels, states), 0.1, 2.0).mapv(|v| -v),
        d_skip: uniform(rng, (1, channels), -1.0, 1.0).row(0).to_owned(),
        dt_proj: uniform(rng, (channels, channels), -0.5, 0.5),
        dt_bias: uniform(rng, (1, channels), -1.0, 0.5).row(0).to_owned(),
        b_proj: uniform(rng, (channels, states), -1.0, 1.0),
        c_proj: uniform(rng, (channels, states), -1.0, 1.0),
    }
}

/// Every registered operator, instantiated with seeded parameters for inputs
/// of width `channels`.
pub fn registry<T: Real>(channels: usize, seed: u64) -> Vec<Box<dyn PackableOp<T>>> {
    registry_with(channels, 4, seed, true)
}

/// Like [`registry`] with the SSM state size chosen by the caller. With
/// `masked_conv == false` the convolution ignores position indices, which
/// breaks packing invariance on purpose.
pub fn registry_with<T: Real>(
    channels: usize,
    states: usize,
    seed: u64,
    masked_conv: bool,
) -> Vec<Box<dyn PackableOp<T>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let linear_op = LinearOp {
        weight: uniform(&mut rng, (channels, channels + 1), -1.0, 1.0),
        bias: Some(
            uniform(&mut rng, (1, channels + 1), -1.0, 1.0)
                .row(0)
                .to_owned(),
        ),
    };
    let norm = RmsNormOp {
        weight: uniform(&mut rng, (1, channels), 0.5, 1.5).row(0).to_owned(),
    };
    let conv_params = random_conv(&mut rng, channels, 4);
    let conv: Box<dyn PackableOp<T>> = if masked_conv {
        Box::new(ConvOp {
            params: conv_params,
        })
    } else {
        Box::new(UnmaskedConvOp {
            params: conv_params,
        })
    };
    let ssm = random_selective_ssm(&mut rng, channels, states);
    let block = BlockOp {
        // Unit-scale weights so the sequence-wise path is not hidden under
        // the residual.
        params: BlockParams::init_scaled(
            BlockDims {
                model_dim: channels,
                expanded_dim: 2 * channels,
                state_dim: states,
                conv_width: 4,
            },
            rng.random(),
            1.0,
        ),
    };
    vec![
        Box::new(SigmoidOp),
        Box::new(SiluOp),
        Box::new(linear_op),
        Box::new(norm),
        conv,
        Box::new(ssm),
        Box::new(block),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::packing::{plan_fifo, plan_greedy_sorted};
    use ndarray::{arr1, arr2, Array};

    fn random_batch(
        rng: &mut ChaCha8Rng,
        lengths: &[usize],
        channels: usize,
    ) -> SequenceBatch<f64> {
        SequenceBatch::new(
            lengths
                .iter()
                .map(|&l| Array::from_shape_fn((l, channels), |_| rng.random_range(-1.0..1.0)))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn element_and_token_wise_ops_are_exactly_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for trial in 0..20 {
            let count = rng.random_range(1..=8);
            let lengths: Vec<usize> = (0..count).map(|_| rng.random_range(1..=32)).collect();
            let batch = random_batch(&mut rng, &lengths, 3);
            let plan = plan_greedy_sorted(&lengths, 64).unwrap();
            for op in registry::<f64>(3, trial) {
                let report = pui_check(op.as_ref(), &batch, &plan, 1e-10).unwrap();
                assert!(report.passed, "{report:?}");
                if op.class() != OperatorClass::SequenceWise {
                    assert_eq!(report.max_abs_dev, 0.0, "{}", report.operator);
                    assert!(report.worst_location.is_none());
                }
            }
        }
    }

    #[test]
    fn unmasked_conv_fails_at_second_sequence_start() {
        let batch =
            SequenceBatch::new(vec![arr2(&[[1.0], [2.0], [3.0]]), arr2(&[[4.0], [5.0]])]).unwrap();
        let plan = plan_fifo(&[3, 2], 8).unwrap();
        let params = ConvParams::new(arr2(&[[2.0, 3.0]]), arr1(&[0.0])).unwrap();
        let bad = pui_check(
            &UnmaskedConvOp {
                params: params.clone(),
            },
            &batch,
            &plan,
            1e-6,
        )
        .unwrap();
        assert!(!bad.passed);
        assert_eq!(
            bad.worst_location,
            Some(Location {
                sequence: 1,
                position: 0,
                channel: 0
            })
        );
        // The leaked term is weight[0] · last element of sequence 0.
        assert_eq!(bad.max_abs_dev, 6.0);

        let good = pui_check(&ConvOp { params }, &batch, &plan, 1e-6).unwrap();
        assert!(good.passed);
        assert_eq!(good.max_abs_dev, 0.0);
    }

    #[test]
    fn registry_classes() {
        let classes: Vec<_> = registry::<f32>(2, 0).iter().map(|op| op.class()).collect();
        assert_eq!(
            classes,
            vec![
                OperatorClass::ElementWise,
                OperatorClass::ElementWise,
                OperatorClass::TokenWise,
                OperatorClass::TokenWise,
                OperatorClass::SequenceWise,
                OperatorClass::SequenceWise,
                OperatorClass::SequenceWise,
            ]
        );
    }
}
