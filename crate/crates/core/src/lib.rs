//! Packed training of selective state-space models on variable-length
//! sequences.
//!
//! Sequences are concatenated into fixed-capacity packs instead of being
//! padded one per row. Position indices mark where each sequence starts, and
//! the two sequence-wise operators (causal depthwise convolution and the
//! selective scan) use them so that nothing flows across a boundary. Every
//! packed operator has a serial per-sequence oracle to compare against.

pub mod block;
pub mod conv;
pub mod error;
pub mod flops;
pub mod gradcheck;
pub mod io;
pub mod lengths;
pub mod ops;
pub mod packing;
pub mod profile;
pub mod pui;
pub mod real;
pub mod scan;
pub mod ssm;
pub mod strategies;
pub mod verify;

pub use block::{BlockDims, BlockGrads, BlockParams, FlopCounter, FlopKind};
pub use conv::{ConvGrads, ConvParams};
pub use error::{Error, Result};
pub use flops::{flops_estimate, ModelConfig};
pub use lengths::{gen_lengths, LengthDistributionSpec, LengthKind};
pub use packing::{
    pack, padding_rate, plan_fifo, plan_greedy_sorted, plan_pad_to_max, unpack, PackPlan,
    PackedBatch, ReverseIndices, SequenceBatch,
};
pub use real::{Precision, Real};
pub use ssm::{SsmGrads, SsmParams, SsmSequence};
pub use strategies::{compare_strategies, BenchReport, Strategy, StrategyRow};
pub use verify::{run_verify, Suite, VerifyConfig, VerifyReport};
