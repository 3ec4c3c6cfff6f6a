//! Interchange formats for plans and packed tensors.
//!
//! JSON: a [`PackPlan`] serializes as `{"capacity", "packs", "lengths"}`;
//! a packed batch as [`PackedBatchJson`].
//!
//! Binary dump, all little-endian:
//!
//! ```text
//! u64 ndim
//! u64 dims[ndim]
//! f32 or f64 data[prod(dims)]   row-major
//! ```
//!
//! The element width is implied by the number of bytes that follow the
//! header.

use ndarray::{Array2, Array3, ArrayD, ArrayView, Dimension, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::packing::{check_position_indices, PackPlan, PackedBatch};
use crate::real::{Precision, Real};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackedBatchJson {
    pub plan: PackPlan,
    pub precision: Precision,
    /// `[packs, capacity, channels]`
    pub shape: [usize; 3],
    pub position_indices: Vec<Vec<usize>>,
    /// Row-major, widened to f64.
    pub data: Vec<f64>,
}

impl PackedBatchJson {
    pub fn from_batch<T: Real>(batch: &PackedBatch<T>) -> Self {
        let (p, l, c) = batch.data.dim();
        Self {
            plan: batch.plan.clone(),
            precision: T::PRECISION,
            shape: [p, l, c],
            position_indices: batch
                .position_indices
                .rows()
                .into_iter()
                .map(|r| r.to_vec())
                .collect(),
            data: batch.data.iter().map(|v| v.to_f64_lossy()).collect(),
        }
    }

    pub fn into_batch<T: Real>(self) -> Result<PackedBatch<T>> {
        self.plan.validate()?;
        let [p, l, c] = self.shape;
        if p != self.plan.num_packs() || l != self.plan.capacity {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} does not match plan with {} packs of capacity {}",
                self.shape,
                self.plan.num_packs(),
                self.plan.capacity
            )));
        }
        let flat: Vec<usize> = self.position_indices.iter().flatten().copied().collect();
        if self.position_indices.len() != p || flat.len() != p * l {
            return Err(Error::ShapeMismatch(
                "position indices do not match shape".into(),
            ));
        }
        let position_indices = Array2::from_shape_vec((p, l), flat).expect("length checked");
        check_position_indices(&position_indices, &self.plan)?;
        let data = Array3::from_shape_vec(
            (p, l, c),
            self.data.into_iter().map(T::from_f64_lossy).collect(),
        )
        .map_err(|e| Error::ShapeMismatch(format!("data does not match shape: {e}")))?;
        Ok(PackedBatch {
            data,
            position_indices,
            plan: self.plan,
        })
    }
}

pub fn packed_to_json<T: Real>(batch: &PackedBatch<T>) -> Result<String> {
    Ok(serde_json::to_string(&PackedBatchJson::from_batch(batch))?)
}

pub fn packed_from_json<T: Real>(text: &str) -> Result<PackedBatch<T>> {
    serde_json::from_str::<PackedBatchJson>(text)?.into_batch()
}

pub fn write_dump<T: Real, D: Dimension>(tensor: ArrayView<'_, T, D>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 * (1 + tensor.ndim()) + T::BYTES * tensor.len());
    out.extend_from_slice(&(tensor.ndim() as u64).to_le_bytes());
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in tensor.iter() {
        v.write_le(&mut out);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub enum DumpTensor {
    F32(ArrayD<f32>),
    F64(ArrayD<f64>),
}

fn read_u64(bytes: &[u8], at: usize) -> Result<u64> {
    bytes
        .get(at..at + 8)
        .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
        .ok_or_else(|| Error::MalformedDump(format!("truncated header at byte {at}")))
}

fn read_header(bytes: &[u8]) -> Result<(Vec<usize>, usize, &[u8])> {
    let ndim = read_u64(bytes, 0)? as usize;
    if ndim > 32 {
        return Err(Error::MalformedDump(format!("implausible rank {ndim}")));
    }
    let dims = (0..ndim)
        .map(|i| read_u64(bytes, 8 * (1 + i)).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::MalformedDump("element count overflows".into()))?;
    Ok((dims, count, &bytes[8 * (1 + ndim)..]))
}

fn decode<T: Real>(dims: Vec<usize>, body: &[u8]) -> ArrayD<T> {
    let data = body.chunks_exact(T::BYTES).map(T::read_le).collect();
    ArrayD::from_shape_vec(IxDyn(&dims), data).expect("size checked")
}

/// Reads a dump of either element width.
pub fn read_dump(bytes: &[u8]) -> Result<DumpTensor> {
    let (dims, count, body) = read_header(bytes)?;
    match (body.len(), count) {
        (0, 0) => Ok(DumpTensor::F64(ArrayD::zeros(IxDyn(&dims)))),
        (n, c) if n == 4 * c => Ok(DumpTensor::F32(decode(dims, body))),
        (n, c) if n == 8 * c => Ok(DumpTensor::F64(decode(dims, body))),
        (n, c) => Err(Error::MalformedDump(format!(
            "{n} data bytes for {c} elements"
        ))),
    }
}

/// Reads a dump whose element width must match `T`.
pub fn read_dump_as<T: Real>(bytes: &[u8]) -> Result<ArrayD<T>> {
    let (dims, count, body) = read_header(bytes)?;
    if body.len() != count * T::BYTES {
        return Err(Error::MalformedDump(format!(
            "{} data bytes for {count} {} elements",
            body.len(),
            T::PRECISION.name()
        )));
    }
    Ok(decode(dims, body))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::packing::{pack, plan_fifo, SequenceBatch};
    use ndarray::{arr2, Array};

    fn sample() -> PackedBatch<f32> {
        let batch = SequenceBatch::new(vec![
            arr2(&[[1.0f32, 2.0], [3.0, 4.0]]),
            arr2(&[[5.0, 6.0]]),
        ])
        .unwrap();
        let plan = plan_fifo(&[2, 1], 4).unwrap();
        pack(&batch, &plan).unwrap()
    }

    #[test]
    fn dump_layout() {
        let t = Array::from_shape_vec((1, 2), vec![1.5f32, -2.0]).unwrap();
        let bytes = write_dump(t.view());
        assert_eq!(&bytes[..8], &2u64.to_le_bytes());
        assert_eq!(&bytes[8..16], &1u64.to_le_bytes());
        assert_eq!(&bytes[16..24], &2u64.to_le_bytes());
        assert_eq!(&bytes[24..28], &1.5f32.to_le_bytes());
        assert_eq!(bytes.len(), 32);
    }

    #[test]
    fn dump_round_trip_both_widths() {
        let packed = sample();
        let bytes = write_dump(packed.data.view());
        match read_dump(&bytes).unwrap() {
            DumpTensor::F32(t) => assert_eq!(t, packed.data.clone().into_dyn()),
            other => panic!("wrong width: {other:?}"),
        }
        let wide = packed.data.mapv(|v| v as f64);
        let back = read_dump_as::<f64>(&write_dump(wide.view())).unwrap();
        assert_eq!(back, wide.into_dyn());
        assert!(read_dump_as::<f64>(&bytes).is_err());
    }

    #[test]
    fn malformed_dumps_are_rejected() {
        assert!(matches!(
            read_dump(&[1, 2, 3]),
            Err(Error::MalformedDump(_))
        ));
        let mut bytes = write_dump(sample().data.view());
        bytes.pop();
        assert!(matches!(read_dump(&bytes), Err(Error::MalformedDump(_))));
    }

    #[test]
    fn packed_json_round_trip() {
        let packed = sample();
        let text = packed_to_json(&packed).unwrap();
        let back: PackedBatch<f32> = packed_from_json(&text).unwrap();
        assert_eq!(back, packed);

        let mut doc = PackedBatchJson::from_batch(&packed);
        doc.position_indices[0][1] = 5;
        assert!(matches!(
            doc.into_batch::<f32>(),
            Err(Error::CorruptedIndices(_))
        ));
    }

    #[test]
    fn plan_json_shape() {
        let v: serde_json::Value = serde_json::from_str(&sample().plan.to_json().unwrap()).unwrap();
        assert_eq!(v["capacity"], 4);
        assert_eq!(v["packs"], serde_json::json!([[0, 1]]));
        assert_eq!(v["lengths"], serde_json::json!([2, 1]));
    }
}
