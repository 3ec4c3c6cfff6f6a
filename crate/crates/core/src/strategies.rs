//! Side-by-side padding and FLOP comparison of the batching strategies.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops::{flops_estimate, ModelConfig};
use crate::packing::{padding_rate, plan_fifo, plan_greedy_sorted, plan_pad_to_max, PackPlan};
use crate::real::Precision;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    PadToMax,
    FifoPack,
    GreedyPack,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::PadToMax, Strategy::FifoPack, Strategy::GreedyPack];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::PadToMax => "pad-to-max",
            Strategy::FifoPack => "fifo-pack",
            Strategy::GreedyPack => "greedy-pack",
        }
    }

    pub fn plan(self, lengths: &[usize], capacity: usize) -> Result<PackPlan> {
        match self {
            Strategy::PadToMax => plan_pad_to_max(lengths, capacity),
            Strategy::FifoPack => plan_fifo(lengths, capacity),
            Strategy::GreedyPack => plan_greedy_sorted(lengths, capacity),
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidPlan(format!("unknown strategy `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyRow {
    pub strategy: Strategy,
    pub capacity: usize,
    pub num_packs: usize,
    pub num_sequences: usize,
    pub tokens: usize,
    pub slots: usize,
    pub padding_slots: usize,
    pub padding_rate: f64,
    pub total_flops: u128,
    /// `total_flops` over the pad-to-max row's.
    pub flop_ratio_vs_padded: f64,
    /// Planning time only.
    pub wall_time_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub precision: Precision,
    pub threads: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub model: ModelConfig,
    pub environment: Environment,
    pub rows: Vec<StrategyRow>,
}

/// Plans `lengths` with every strategy at `capacity` and accounts for the
/// padding and the forward FLOPs of `model` over each layout.
pub fn compare_strategies(
    lengths: &[usize],
    capacity: usize,
    model: &ModelConfig,
) -> Result<Vec<StrategyRow>> {
    if lengths.is_empty() {
        return Err(Error::InvalidLength("no sequences to plan".into()));
    }
    let mut rows = Vec::with_capacity(Strategy::ALL.len());
    for strategy in Strategy::ALL {
        let start = Instant::now();
        let plan = strategy.plan(lengths, capacity)?;
        let wall_time_seconds = start.elapsed().as_secs_f64();
        rows.push(StrategyRow {
            strategy,
            capacity,
            num_packs: plan.num_packs(),
            num_sequences: plan.num_sequences(),
            tokens: plan.total_tokens(),
            slots: plan.total_slots(),
            padding_slots: plan.padding_slots(),
            padding_rate: padding_rate(&plan)?,
            total_flops: flops_estimate(model, &plan)?,
            flop_ratio_vs_padded: 0.0,
            wall_time_seconds,
        });
    }
    let padded = rows[0].total_flops as f64;
    for row in &mut rows {
        row.flop_ratio_vs_padded = row.total_flops as f64 / padded;
    }
    Ok(rows)
}
