//! Dense tensors and the ZPT binary interchange format.
//!
//! A ZPT file is little-endian throughout:
//!
//! ```text
//! offset  size        field
//! 0       8           ASCII magic "ZPTENSOR"
//! 8       2           version (u16) = 1
//! 10      1           dtype (u8): 1 = f32, 2 = u32
//! 11      1           rank (u8): 1..=3
//! 12      8 * rank    dims (u64 each)
//! ...     4 * prod    row-major payload
//! ```
//!
//! There is no padding and no footer. Files that end early, carry extra
//! bytes, or contain NaN/Inf in an f32 payload are rejected on load.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ZPTENSOR";
pub const VERSION: u16 = 1;
pub const MAX_RANK: usize = 3;
const HEADER_LEN: usize = 12;

/// Tolerance on row norms for an embedding matrix to count as unit-norm.
pub const UNIT_NORM_TOL: f64 = 1e-4;
/// Rows with a norm below this are rejected by [`l2_normalize_rows`].
pub const ZERO_ROW_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 1,
    U32 = 2,
}

impl DType {
    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            1 => Ok(DType::F32),
            2 => Ok(DType::U32),
            other => Err(Error::UnsupportedDtype(other)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U32(Vec<u32>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U32(v) => v.len(),
        }
    }
}

/// Immutable dense row-major tensor of rank 1 to 3.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: TensorData,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self> {
        if dims.is_empty() || dims.len() > MAX_RANK {
            return Err(Error::UnsupportedRank(dims.len()));
        }
        if let Some(axis) = dims.iter().position(|&d| d == 0) {
            return Err(Error::InvalidTensor(format!("dimension {axis} is zero")));
        }
        let expected = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::InvalidTensor("dims product overflows".into()))?;
        if expected != data.len() {
            return Err(Error::InvalidTensor(format!(
                "dims {dims:?} imply {expected} elements, data has {}",
                data.len()
            )));
        }
        if let TensorData::F32(values) = &data {
            if let Some(index) = values.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinitePayload { index });
            }
        }
        Ok(Tensor { dims, data })
    }

    pub fn from_f32(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(dims, TensorData::F32(data))
    }

    pub fn from_u32(dims: Vec<usize>, data: Vec<u32>) -> Result<Self> {
        Self::new(dims, TensorData::U32(data))
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            TensorData::F32(_) => DType::F32,
            TensorData::U32(_) => DType::U32,
        }
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.len() == 0
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            TensorData::U32(_) => None,
        }
    }

    pub fn as_u32(&self) -> Option<&[u32]> {
        match &self.data {
            TensorData::U32(v) => Some(v),
            TensorData::F32(_) => None,
        }
    }

    /// The f32 payload, or a `DimMismatch` naming `what` if the dtype or rank is wrong.
    pub fn expect_f32(&self, rank: usize, what: &str) -> Result<&[f32]> {
        if self.rank() != rank {
            return Err(Error::dims(format!(
                "{what}: expected rank {rank}, got dims {:?}",
                self.dims
            )));
        }
        self.as_f32()
            .ok_or_else(|| Error::dims(format!("{what}: expected f32 tensor, got u32")))
    }

    pub fn expect_u32(&self, rank: usize, what: &str) -> Result<&[u32]> {
        if self.rank() != rank {
            return Err(Error::dims(format!(
                "{what}: expected rank {rank}, got dims {:?}",
                self.dims
            )));
        }
        self.as_u32()
            .ok_or_else(|| Error::dims(format!("{what}: expected u32 tensor, got f32")))
    }

    /// Encodes the tensor into its ZPT byte representation.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.rank() + 4 * self.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.dtype() as u8);
        out.push(self.rank() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    /// Decodes a ZPT byte buffer.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let magic_len = bytes.len().min(MAGIC.len());
        if bytes[..magic_len] != MAGIC[..magic_len] {
            return Err(Error::BadMagic);
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::TruncatedPayload {
                expected: HEADER_LEN,
                actual: bytes.len(),
            });
        }
        let version = u16::from_le_bytes([bytes[8], bytes[9]]);
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let dtype = DType::from_tag(bytes[10])?;
        let rank = bytes[11] as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::UnsupportedRank(rank));
        }
        let dims_end = HEADER_LEN + 8 * rank;
        if bytes.len() < dims_end {
            return Err(Error::TruncatedPayload {
                expected: dims_end,
                actual: bytes.len(),
            });
        }
        let mut dims = Vec::with_capacity(rank);
        for chunk in bytes[HEADER_LEN..dims_end].chunks_exact(8) {
            let d = u64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
            let d = usize::try_from(d).map_err(|_| {
                Error::InvalidTensor(format!("dimension {d} does not fit in memory"))
            })?;
            dims.push(d);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::InvalidTensor("dims product overflows".into()))?;
        let expected = dims_end + count;
        if bytes.len() < expected {
            return Err(Error::TruncatedPayload {
                expected,
                actual: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(Error::TrailingBytes(bytes.len() - expected));
        }
        let payload = bytes[dims_end..].chunks_exact(4);
        let data = match dtype {
            DType::F32 => TensorData::F32(
                payload
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                    .collect(),
            ),
            DType::U32 => TensorData::U32(
                payload
                    .map(|c| u32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                    .collect(),
            ),
        };
        Tensor::new(dims, data)
    }
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::from_bytes(&bytes)
}

pub fn write_tensor(tensor: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, tensor.to_bytes()).map_err(|e| Error::io(path, e))
}

/// An N×D f32 matrix of embeddings, one row per item.
///
/// `normalized` is only ever true when every row norm is within
/// [`UNIT_NORM_TOL`] of one.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    tensor: Tensor,
    normalized: bool,
}

impl EmbeddingMatrix {
    /// Wraps a rank-2 f32 tensor, setting the normalized flag if every row
    /// is already unit-norm.
    pub fn from_tensor(tensor: Tensor) -> Result<Self> {
        tensor.expect_f32(2, "embedding matrix")?;
        let normalized = first_off_unit_row(&tensor).is_none();
        Ok(EmbeddingMatrix { tensor, normalized })
    }

    pub fn from_rows(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        Self::from_tensor(Tensor::from_f32(vec![rows, dim], data)?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Fails with `NotNormalized` naming the first offending row.
    pub fn require_normalized(&self) -> Result<()> {
        if self.normalized {
            return Ok(());
        }
        match first_off_unit_row(&self.tensor) {
            Some((row, norm)) => Err(Error::NotNormalized { row, norm }),
            None => Ok(()),
        }
    }

    pub fn rows(&self) -> usize {
        self.tensor.dims()[0]
    }

    pub fn dim(&self) -> usize {
        self.tensor.dims()[1]
    }

    pub fn values(&self) -> &[f32] {
        self.tensor.as_f32().expect("embedding matrix is f32")
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.dim();
        &self.values()[i * d..(i + 1) * d]
    }

    /// The first `count` rows (all rows if `count` exceeds the row count).
    pub fn head(&self, count: usize) -> Result<Self> {
        let keep = count.min(self.rows());
        if keep == 0 {
            return Err(Error::InvalidConfig("cannot keep zero rows".into()));
        }
        if keep == self.rows() {
            return Ok(self.clone());
        }
        let data = self.values()[..keep * self.dim()].to_vec();
        Ok(EmbeddingMatrix {
            tensor: Tensor::from_f32(vec![keep, self.dim()], data)?,
            normalized: self.normalized,
        })
    }
}

fn first_off_unit_row(tensor: &Tensor) -> Option<(usize, f64)> {
    let d = tensor.dims()[1];
    let values = tensor.as_f32()?;
    values
        .chunks_exact(d)
        .map(row_norm)
        .enumerate()
        .find(|(_, norm)| (norm - 1.0).abs() > UNIT_NORM_TOL)
}

pub(crate) fn row_norm(row: &[f32]) -> f64 {
    row.iter()
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt()
}

/// Divides every row of a rank-2 f32 tensor by its Euclidean norm.
pub fn l2_normalize_rows(m: &Tensor) -> Result<EmbeddingMatrix> {
    let values = m.expect_f32(2, "l2_normalize_rows")?;
    let d = m.dims()[1];
    let mut out = Vec::with_capacity(values.len());
    for (row, chunk) in values.chunks_exact(d).enumerate() {
        let norm = row_norm(chunk);
        if norm < ZERO_ROW_EPS {
            return Err(Error::ZeroRow { row });
        }
        out.extend(chunk.iter().map(|&x| (f64::from(x) / norm) as f32));
    }
    Ok(EmbeddingMatrix {
        tensor: Tensor::from_f32(m.dims().to_vec(), out)?,
        normalized: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn identity2() -> Tensor {
        Tensor::from_f32(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()
    }

    #[test]
    fn identity_round_trip() {
        let t = identity2();
        let back = Tensor::from_bytes(&t.to_bytes()).unwrap();
        assert_eq!(back.rank(), 2);
        assert_eq!(back.dims(), &[2, 2]);
        assert_eq!(back.as_f32().unwrap(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn label_file_size() {
        let t = Tensor::from_u32(vec![3], vec![0, 1, 2]).unwrap();
        let bytes = t.to_bytes();
        // magic + version + dtype + rank + one u64 dim + payload
        assert_eq!(bytes.len(), 8 + 2 + 1 + 1 + 8 + 12);
        assert_eq!(&bytes[..8], b"ZPTENSOR");
        assert_eq!(bytes[10], 2);
        assert_eq!(bytes[11], 1);
    }

    #[test]
    fn truncated_by_four_bytes() {
        let bytes = identity2().to_bytes();
        let err = Tensor::from_bytes(&bytes[..bytes.len() - 4]).unwrap_err();
        assert!(matches!(err, Error::TruncatedPayload { .. }), "{err}");
    }

    #[test]
    fn header_errors() {
        let mut bytes = identity2().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(Tensor::from_bytes(&bytes), Err(Error::BadMagic)));
        assert!(matches!(
            Tensor::from_bytes(b"ZPT"),
            Err(Error::TruncatedPayload { .. })
        ));
        assert!(matches!(Tensor::from_bytes(b"NOPE"), Err(Error::BadMagic)));

        let mut bytes = identity2().to_bytes();
        bytes[8] = 2;
        assert!(matches!(
            Tensor::from_bytes(&bytes),
            Err(Error::UnsupportedVersion(2))
        ));

        let mut bytes = identity2().to_bytes();
        bytes[10] = 7;
        assert!(matches!(
            Tensor::from_bytes(&bytes),
            Err(Error::UnsupportedDtype(7))
        ));

        let mut bytes = identity2().to_bytes();
        bytes[11] = 4;
        assert!(matches!(
            Tensor::from_bytes(&bytes),
            Err(Error::UnsupportedRank(4))
        ));

        let mut bytes = identity2().to_bytes();
        bytes.push(0);
        assert!(matches!(
            Tensor::from_bytes(&bytes),
            Err(Error::TrailingBytes(1))
        ));
    }

    #[test]
    fn non_finite_rejected_on_load() {
        let mut bytes = identity2().to_bytes();
        let at = bytes.len() - 4;
        bytes[at..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            Tensor::from_bytes(&bytes),
            Err(Error::NonFinitePayload { index: 3 })
        ));
    }

    #[test]
    fn invalid_construction_rejected() {
        assert!(matches!(
            Tensor::from_f32(vec![2, 3], vec![0.0; 5]),
            Err(Error::InvalidTensor(_))
        ));
        assert!(matches!(
            Tensor::from_f32(vec![1, 1, 1, 1], vec![0.0]),
            Err(Error::UnsupportedRank(4))
        ));
        assert!(Tensor::from_u32(vec![0], vec![]).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.zpt");
        let t = Tensor::from_f32(vec![1, 2, 3], vec![0.5, -1.0, 2.0, 3.5, -0.0, 7.25]).unwrap();
        write_tensor(&t, &path).unwrap();
        assert_eq!(read_tensor(&path).unwrap().to_bytes(), t.to_bytes());
        assert!(matches!(
            read_tensor(dir.path().join("missing.zpt")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn normalize_examples() {
        let m = Tensor::from_f32(vec![2, 2], vec![3.0, 4.0, 1.0, 0.0]).unwrap();
        let e = l2_normalize_rows(&m).unwrap();
        assert!(e.is_normalized());
        assert!((e.row(0)[0] - 0.6).abs() < 1e-7);
        assert!((e.row(0)[1] - 0.8).abs() < 1e-7);
        assert_eq!(e.row(1), &[1.0, 0.0]);

        let zero = Tensor::from_f32(vec![2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            l2_normalize_rows(&zero),
            Err(Error::ZeroRow { row: 1 })
        ));
    }

    #[test]
    fn embedding_flag_tracks_norms() {
        let raw = EmbeddingMatrix::from_rows(1, 2, vec![3.0, 4.0]).unwrap();
        assert!(!raw.is_normalized());
        assert!(matches!(
            raw.require_normalized(),
            Err(Error::NotNormalized { row: 0, .. })
        ));
        let unit = EmbeddingMatrix::from_rows(1, 2, vec![0.6, 0.8]).unwrap();
        assert!(unit.is_normalized());
    }

    fn arb_tensor() -> impl Strategy<Value = Tensor> {
        prop_oneof![
            proptest::collection::vec(1usize..5, 1..=3).prop_flat_map(|dims| {
                let n: usize = dims.iter().product();
                proptest::collection::vec(-1e6f32..1e6, n)
                    .prop_map(move |data| Tensor::from_f32(dims.clone(), data).unwrap())
            }),
            proptest::collection::vec(1usize..5, 1..=3).prop_flat_map(|dims| {
                let n: usize = dims.iter().product();
                proptest::collection::vec(any::<u32>(), n)
                    .prop_map(move |data| Tensor::from_u32(dims.clone(), data).unwrap())
            }),
        ]
    }

    proptest! {
        #[test]
        fn bytes_round_trip_bit_identical(t in arb_tensor()) {
            let bytes = t.to_bytes();
            let back = Tensor::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
            prop_assert_eq!(back, t);
        }

        #[test]
        fn normalization_is_idempotent(
            rows in proptest::collection::vec(proptest::collection::vec(0.1f32..10.0, 4), 1..6)
        ) {
            let n = rows.len();
            let t = Tensor::from_f32(vec![n, 4], rows.concat()).unwrap();
            let once = l2_normalize_rows(&t).unwrap();
            let twice = l2_normalize_rows(once.tensor()).unwrap();
            for (a, b) in once.values().iter().zip(twice.values()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
            for i in 0..n {
                prop_assert!((row_norm(once.row(i)) - 1.0).abs() < 1e-6);
            }
        }
    }
}
