//! Pack plans and the pack/unpack transforms along the sequence dimension.
//!
//! A packed batch is a dense `(num_packs, capacity, channels)` tensor plus a
//! `(num_packs, capacity)` array of position indices. Every slot carries the
//! offset of its element inside the original sequence, so index `0` marks a
//! sequence start. Padding slots hold zero data and index `0`, which makes
//! each of them look like an isolated one-token sequence to the
//! boundary-aware operators.

use ndarray::{s, Array2, Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// Unpacked input: an ordered list of `(length, channels)` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch<T> {
    sequences: Vec<Array2<T>>,
    channels: usize,
}

impl<T: Real> SequenceBatch<T> {
    pub fn new(sequences: Vec<Array2<T>>) -> Result<Self> {
        let channels = match sequences.first() {
            Some(first) => first.ncols(),
            None => return Err(Error::InvalidLength("batch has no sequences".into())),
        };
        if channels == 0 {
            return Err(Error::ShapeMismatch(
                "channel count must be positive".into(),
            ));
        }
        for (id, seq) in sequences.iter().enumerate() {
            if seq.nrows() == 0 {
                return Err(Error::InvalidLength(format!("sequence {id} is empty")));
            }
            if seq.ncols() != channels {
                return Err(Error::ShapeMismatch(format!(
                    "sequence {id} has {} channels, expected {channels}",
                    seq.ncols()
                )));
            }
        }
        Ok(Self {
            sequences,
            channels,
        })
    }

    pub fn sequences(&self) -> &[Array2<T>] {
        &self.sequences
    }

    pub fn into_sequences(self) -> Vec<Array2<T>> {
        self.sequences
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.sequences.iter().map(|s| s.nrows()).collect()
    }
}

/// Assignment of sequence ids to fixed-capacity packs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackPlan {
    pub capacity: usize,
    pub packs: Vec<Vec<usize>>,
    pub lengths: Vec<usize>,
}

impl PackPlan {
    /// Builds a plan and checks every structural invariant.
    pub fn new(capacity: usize, packs: Vec<Vec<usize>>, lengths: Vec<usize>) -> Result<Self> {
        let plan = Self {
            capacity,
            packs,
            lengths,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.capacity == 0 {
            return Err(Error::InvalidPlan("capacity must be positive".into()));
        }
        let mut seen = vec![false; self.lengths.len()];
        for (p, members) in self.packs.iter().enumerate() {
            let mut used = 0usize;
            for &id in members {
                let Some(&len) = self.lengths.get(id) else {
                    return Err(Error::InvalidPlan(format!(
                        "pack {p} references unknown sequence {id}"
                    )));
                };
                if seen[id] {
                    return Err(Error::InvalidPlan(format!(
                        "sequence {id} placed more than once"
                    )));
                }
                seen[id] = true;
                if len == 0 {
                    return Err(Error::InvalidLength(format!("sequence {id} has length 0")));
                }
                if len > self.capacity {
                    return Err(Error::SequenceExceedsCapacity {
                        id,
                        length: len,
                        capacity: self.capacity,
                    });
                }
                used += len;
            }
            if used > self.capacity {
                return Err(Error::InvalidPlan(format!(
                    "pack {p} holds {used} tokens, capacity is {}",
                    self.capacity
                )));
            }
        }
        if let Some(id) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidPlan(format!("sequence {id} is not placed")));
        }
        Ok(())
    }

    pub fn num_packs(&self) -> usize {
        self.packs.len()
    }

    pub fn num_sequences(&self) -> usize {
        self.lengths.len()
    }

    pub fn total_slots(&self) -> usize {
        self.packs.len() * self.capacity
    }

    pub fn total_tokens(&self) -> usize {
        self.lengths.iter().sum()
    }

    pub fn padding_slots(&self) -> usize {
        self.total_slots() - self.total_tokens()
    }

    /// `(pack, start offset)` of every sequence id.
    pub fn placements(&self) -> Vec<(usize, usize)> {
        let mut out = vec![(0, 0); self.lengths.len()];
        for (p, members) in self.packs.iter().enumerate() {
            let mut offset = 0;
            for &id in members {
                out[id] = (p, offset);
                offset += self.lengths[id];
            }
        }
        out
    }

    /// Position indices implied by the plan, padding slots set to 0.
    pub fn position_indices(&self) -> Array2<usize> {
        let mut idx = Array2::zeros((self.packs.len(), self.capacity));
        for (p, members) in self.packs.iter().enumerate() {
            let mut offset = 0;
            for &id in members {
                for k in 0..self.lengths[id] {
                    idx[[p, offset + k]] = k;
                }
                offset += self.lengths[id];
            }
        }
        idx
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let plan: PackPlan = serde_json::from_str(text)?;
        plan.validate()?;
        Ok(plan)
    }
}

fn check_lengths(lengths: &[usize], capacity: usize) -> Result<()> {
    if capacity == 0 {
        return Err(Error::InvalidPlan("capacity must be positive".into()));
    }
    for (id, &length) in lengths.iter().enumerate() {
        if length == 0 {
            return Err(Error::InvalidLength(format!("sequence {id} has length 0")));
        }
        if length > capacity {
            return Err(Error::SequenceExceedsCapacity {
                id,
                length,
                capacity,
            });
        }
    }
    Ok(())
}

/// Packs sequences in received order, sealing the open pack as soon as the
/// next sequence does not fit.
pub fn plan_fifo(lengths: &[usize], capacity: usize) -> Result<PackPlan> {
    check_lengths(lengths, capacity)?;
    let mut packs: Vec<Vec<usize>> = Vec::new();
    let mut current = Vec::new();
    let mut used = 0;
    for (id, &len) in lengths.iter().enumerate() {
        if used + len > capacity {
            packs.push(std::mem::take(&mut current));
            used = 0;
        }
        current.push(id);
        used += len;
    }
    if !current.is_empty() {
        packs.push(current);
    }
    Ok(PackPlan {
        capacity,
        packs,
        lengths: lengths.to_vec(),
    })
}

/// First-fit-decreasing over the whole batch.
///
/// Sequences are ordered by descending length (ties by ascending id) and each
/// goes into the earliest pack that still has room. The leftmost fitting pack
/// is found through a max-tree over remaining capacities, so placement is
/// `O(n log n)`.
pub fn plan_greedy_sorted(lengths: &[usize], capacity: usize) -> Result<PackPlan> {
    check_lengths(lengths, capacity)?;
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by(|&a, &b| lengths[b].cmp(&lengths[a]).then(a.cmp(&b)));

    let mut tree = RemainingTree::new(lengths.len().max(1), capacity);
    let mut packs: Vec<Vec<usize>> = Vec::new();
    for id in order {
        let len = lengths[id];
        // Every unopened pack has full capacity, so a fit always exists.
        let bin = tree
            .leftmost_fitting(len)
            .expect("unopened pack always fits");
        if bin == packs.len() {
            packs.push(Vec::new());
        }
        packs[bin].push(id);
        tree.consume(bin, len);
    }
    Ok(PackPlan {
        capacity,
        packs,
        lengths: lengths.to_vec(),
    })
}

/// One sequence per pack: the pad-to-capacity baseline.
pub fn plan_pad_to_max(lengths: &[usize], capacity: usize) -> Result<PackPlan> {
    check_lengths(lengths, capacity)?;
    Ok(PackPlan {
        capacity,
        packs: (0..lengths.len()).map(|id| vec![id]).collect(),
        lengths: lengths.to_vec(),
    })
}

/// Max segment tree over per-bin remaining capacity.
struct RemainingTree {
    size: usize,
    max: Vec<usize>,
}

impl RemainingTree {
    fn new(bins: usize, capacity: usize) -> Self {
        let size = bins.next_power_of_two();
        let mut max = vec![0; 2 * size];
        for leaf in &mut max[size..size + bins] {
            *leaf = capacity;
        }
        for node in (1..size).rev() {
            max[node] = max[2 * node].max(max[2 * node + 1]);
        }
        Self { size, max }
    }

    fn leftmost_fitting(&self, need: usize) -> Option<usize> {
        if self.max[1] < need {
            return None;
        }
        let mut node = 1;
        while node < self.size {
            node = if self.max[2 * node] >= need {
                2 * node
            } else {
                2 * node + 1
            };
        }
        Some(node - self.size)
    }

    fn consume(&mut self, bin: usize, amount: usize) {
        let mut node = bin + self.size;
        self.max[node] -= amount;
        node /= 2;
        while node >= 1 {
            self.max[node] = self.max[2 * node].max(self.max[2 * node + 1]);
            node /= 2;
        }
    }
}

/// Fraction of slots that carry no sequence data.
pub fn padding_rate(plan: &PackPlan) -> Result<f64> {
    if plan.packs.is_empty() || plan.lengths.is_empty() {
        return Err(Error::EmptyPlan);
    }
    Ok(plan.padding_slots() as f64 / plan.total_slots() as f64)
}

/// Dense packed tensor plus position indices and the plan that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedBatch<T> {
    pub data: Array3<T>,
    pub position_indices: Array2<usize>,
    pub plan: PackPlan,
}

impl<T: Real> PackedBatch<T> {
    pub fn num_packs(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn capacity(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[2]
    }
}

/// Lays out `(length, k)` row blocks contiguously per pack following `plan`.
///
/// Works for any trailing width `k`, so it also packs per-token side inputs
/// such as step sizes or input-dependent projections.
pub fn pack_rows<T: Real>(rows: &[Array2<T>], plan: &PackPlan) -> Result<Array3<T>> {
    if rows.len() != plan.lengths.len() {
        return Err(Error::ShapeMismatch(format!(
            "plan describes {} sequences, batch has {}",
            plan.lengths.len(),
            rows.len()
        )));
    }
    let width = rows.first().map(|r| r.ncols()).unwrap_or(0);
    for (id, r) in rows.iter().enumerate() {
        if r.nrows() != plan.lengths[id] {
            return Err(Error::ShapeMismatch(format!(
                "sequence {id} has length {}, plan says {}",
                r.nrows(),
                plan.lengths[id]
            )));
        }
        if r.ncols() != width {
            return Err(Error::ShapeMismatch(format!(
                "sequence {id} has width {}, expected {width}",
                r.ncols()
            )));
        }
    }
    let mut out = Array3::zeros((plan.packs.len(), plan.capacity, width));
    for (p, members) in plan.packs.iter().enumerate() {
        let mut offset = 0;
        for &id in members {
            let len = plan.lengths[id];
            out.slice_mut(s![p, offset..offset + len, ..])
                .assign(&rows[id]);
            offset += len;
        }
    }
    Ok(out)
}

/// Inverse of [`pack_rows`]: extracts each sequence's rows, in id order.
pub fn unpack_rows<T: Real>(packed: ArrayView3<'_, T>, plan: &PackPlan) -> Result<Vec<Array2<T>>> {
    let shape = packed.shape();
    if shape[0] != plan.packs.len() || shape[1] != plan.capacity {
        return Err(Error::ShapeMismatch(format!(
            "packed tensor is {:?}, plan expects ({}, {}, _)",
            shape,
            plan.packs.len(),
            plan.capacity
        )));
    }
    let placements = plan.placements();
    Ok(placements
        .iter()
        .enumerate()
        .map(|(id, &(p, offset))| {
            packed
                .slice(s![p, offset..offset + plan.lengths[id], ..])
                .to_owned()
        })
        .collect())
}

pub fn pack<T: Real>(batch: &SequenceBatch<T>, plan: &PackPlan) -> Result<PackedBatch<T>> {
    plan.validate()?;
    let data = pack_rows(batch.sequences(), plan)?;
    Ok(PackedBatch {
        data,
        position_indices: plan.position_indices(),
        plan: plan.clone(),
    })
}

/// Checks that `indices` agree with the boundaries described by `plan`.
pub fn check_position_indices(indices: &Array2<usize>, plan: &PackPlan) -> Result<()> {
    if indices.dim() != (plan.packs.len(), plan.capacity) {
        return Err(Error::ShapeMismatch(format!(
            "position indices are {:?}, plan expects ({}, {})",
            indices.dim(),
            plan.packs.len(),
            plan.capacity
        )));
    }
    for (p, members) in plan.packs.iter().enumerate() {
        let mut offset = 0;
        for &id in members {
            for k in 0..plan.lengths[id] {
                let got = indices[[p, offset + k]];
                if got != k {
                    return Err(Error::CorruptedIndices(format!(
                        "pack {p} slot {} (sequence {id}) has index {got}, expected {k}",
                        offset + k
                    )));
                }
            }
            offset += plan.lengths[id];
        }
        for slot in offset..plan.capacity {
            if indices[[p, slot]] != 0 {
                return Err(Error::CorruptedIndices(format!(
                    "padding slot {slot} of pack {p} has nonzero index"
                )));
            }
        }
    }
    Ok(())
}

pub fn unpack<T: Real>(packed: &PackedBatch<T>) -> Result<SequenceBatch<T>> {
    packed.plan.validate()?;
    check_position_indices(&packed.position_indices, &packed.plan)?;
    SequenceBatch::new(unpack_rows(packed.data.view(), &packed.plan)?)
}

/// Distance from each slot to the end of its sequence; 0 on padding slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReverseIndices(pub Array2<usize>);

impl ReverseIndices {
    pub fn values(&self) -> &Array2<usize> {
        &self.0
    }
}

/// Derives reverse indices from position indices alone.
///
/// Scanning each pack right to left, a slot continues its successor's
/// sequence iff the successor's position index is exactly one larger. The
/// plan is only used to validate the indices.
pub fn compute_reverse_indices(
    position_indices: &Array2<usize>,
    plan: &PackPlan,
) -> Result<ReverseIndices> {
    check_position_indices(position_indices, plan)?;
    Ok(ReverseIndices(reverse_from_positions(position_indices)))
}

pub(crate) fn reverse_from_positions(position_indices: &Array2<usize>) -> Array2<usize> {
    let (packs, cap) = position_indices.dim();
    let mut rev = Array2::zeros((packs, cap));
    for p in 0..packs {
        for slot in (0..cap.saturating_sub(1)).rev() {
            if position_indices[[p, slot + 1]] == position_indices[[p, slot]] + 1 {
                rev[[p, slot]] = rev[[p, slot + 1]] + 1;
            }
        }
    }
    rev
}
