//! Compressed-row sparse blocks and their on-disk shard encoding.
//!
//! Shard layout, all little-endian:
//!
//! ```text
//! 0   magic   "VCSB"
//! 4   version u32
//! 8   rows    u64
//! 16  cols    u32
//! 20  nnz     u64
//! 28  crc32   u32   (of everything after the header)
//! 32  offsets (rows + 1) × u64
//!     indices nnz × u32
//!     values  nnz × f32
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::ndmath::Tensor;

pub const MAGIC: [u8; 4] = *b"VCSB";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 32;

/// Cells × genes in compressed-row form.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseBlock {
    rows: usize,
    cols: usize,
    offsets: Vec<u64>,
    indices: Vec<u32>,
    values: Vec<f32>,
}

impl SparseBlock {
    pub fn new(
        rows: usize,
        cols: usize,
        offsets: Vec<u64>,
        indices: Vec<u32>,
        values: Vec<f32>,
    ) -> Result<Self> {
        let bad = |m: String| Err(Error::Ingestion(m));
        if offsets.len() != rows + 1 || offsets[0] != 0 {
            return bad(format!("{} offsets for {rows} rows", offsets.len()));
        }
        if offsets.windows(2).any(|w| w[0] > w[1]) {
            return bad("row offsets decrease".into());
        }
        let nnz = offsets[rows] as usize;
        if indices.len() != nnz || values.len() != nnz {
            return bad(format!(
                "nnz {nnz} but {} indices and {} values",
                indices.len(),
                values.len()
            ));
        }
        if cols > u32::MAX as usize {
            return bad(format!("{cols} columns exceed the index width"));
        }
        for r in 0..rows {
            let row = &indices[offsets[r] as usize..offsets[r + 1] as usize];
            if row.windows(2).any(|w| w[0] >= w[1]) || row.last().is_some_and(|&c| c as usize >= cols) {
                return bad(format!("row {r} has unsorted or out-of-range column indices"));
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return bad("non-finite stored value".into());
        }
        Ok(SparseBlock {
            rows,
            cols,
            offsets,
            indices,
            values,
        })
    }

    pub fn empty(cols: usize) -> Self {
        SparseBlock {
            rows: 0,
            cols,
            offsets: vec![0],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Keeps the non-zero entries of a row-major dense matrix, rounded to 32 bits.
    pub fn from_dense(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} values for a {rows}×{cols} block",
                data.len()
            )));
        }
        let mut offsets = Vec::with_capacity(rows + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        offsets.push(0u64);
        for r in 0..rows {
            for (c, &v) in data[r * cols..(r + 1) * cols].iter().enumerate() {
                let v = v as f32;
                if v != 0.0 {
                    indices.push(c as u32);
                    values.push(v);
                }
            }
            offsets.push(indices.len() as u64);
        }
        SparseBlock::new(rows, cols, offsets, indices, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn offsets(&self) -> &[u64] {
        &self.offsets
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, r: usize) -> (&[u32], &[f32]) {
        let (a, b) = (self.offsets[r] as usize, self.offsets[r + 1] as usize);
        (&self.indices[a..b], &self.values[a..b])
    }

    pub fn to_dense(&self) -> Tensor {
        let mut t = Tensor::zeros(&[self.rows, self.cols]);
        let d = t.data_mut();
        for r in 0..self.rows {
            let (idx, val) = self.row(r);
            for (&c, &v) in idx.iter().zip(val) {
                d[r * self.cols + c as usize] = v as f64;
            }
        }
        t
    }

    /// Applies `f` row by row; `f` sees the dense row and returns the new one.
    pub fn map_rows(&self, mut f: impl FnMut(&mut [f64]) -> Result<()>) -> Result<SparseBlock> {
        let mut dense = self.to_dense();
        let cols = self.cols;
        for r in 0..self.rows {
            f(&mut dense.data_mut()[r * cols..(r + 1) * cols])?;
        }
        SparseBlock::from_dense(self.rows, cols, dense.data())
    }

    /// Keeps the listed columns, renumbered in the given order.
    pub fn select_columns(&self, keep: &[usize]) -> Result<SparseBlock> {
        let dense = self.to_dense();
        let mut out = Vec::with_capacity(self.rows * keep.len());
        for r in 0..self.rows {
            let row = dense.row(r);
            for &c in keep {
                out.push(*row.get(c).ok_or_else(|| {
                    Error::Argument(format!("column {c} outside {} columns", self.cols))
                })?);
            }
        }
        SparseBlock::from_dense(self.rows, keep.len(), &out)
    }

    fn payload(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.offsets.len() * 8 + self.nnz() * 8);
        for o in &self.offsets {
            out.extend_from_slice(&o.to_le_bytes());
        }
        for i in &self.indices {
            out.extend_from_slice(&i.to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Full shard bytes: header followed by the payload.
    pub fn encode(&self) -> Vec<u8> {
        let payload = self.payload();
        let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows as u64).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        out.extend_from_slice(&(self.nnz() as u64).to_le_bytes());
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        out.extend_from_slice(&payload);
        out
    }

    /// Checksum stored in the header of the encoded shard.
    pub fn checksum(&self) -> u32 {
        crc32fast::hash(&self.payload())
    }

    /// Parses shard bytes; `path` only labels errors.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<SparseBlock> {
        let corrupt = |detail: String| Error::Corruption {
            path: path.to_path_buf(),
            detail,
        };
        if bytes.len() < HEADER_LEN {
            return Err(corrupt(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if bytes[0..4] != MAGIC {
            return Err(corrupt("bad magic".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let version = u32_at(4);
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let rows = u64_at(8) as usize;
        let cols = u32_at(16) as usize;
        let nnz = u64_at(20) as usize;
        let crc = u32_at(28);
        let payload = &bytes[HEADER_LEN..];
        let expected = rows
            .checked_add(1)
            .and_then(|r| r.checked_mul(8))
            .and_then(|o| nnz.checked_mul(8).and_then(|v| o.checked_add(v)));
        if expected != Some(payload.len()) {
            return Err(corrupt(format!(
                "payload of {} bytes does not fit {rows} rows and {nnz} entries",
                payload.len()
            )));
        }
        if crc32fast::hash(payload) != crc {
            return Err(corrupt("checksum mismatch".into()));
        }
        let (off_bytes, rest) = payload.split_at((rows + 1) * 8);
        let (idx_bytes, val_bytes) = rest.split_at(nnz * 4);
        let offsets = off_bytes
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let indices = idx_bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let values = val_bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        SparseBlock::new(rows, cols, offsets, indices, values).map_err(|e| corrupt(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn block_strategy() -> impl Strategy<Value = SparseBlock> {
        (0usize..12, 1usize..40).prop_flat_map(|(rows, cols)| {
            prop::collection::vec(
                prop::option::weighted(0.3, -1e6f32..1e6f32),
                rows * cols,
            )
            .prop_map(move |cells| {
                let dense: Vec<f64> = cells.iter().map(|c| c.unwrap_or(0.0) as f64).collect();
                SparseBlock::from_dense(rows, cols, &dense).unwrap()
            })
        })
    }

    #[test]
    fn header_layout() {
        let b = SparseBlock::from_dense(2, 3, &[0.0, 1.5, 0.0, 2.0, 0.0, -3.0]).unwrap();
        let bytes = b.encode();
        assert_eq!(&bytes[0..4], b"VCSB");
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 3);
        assert_eq!(u64::from_le_bytes(bytes[20..28].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[28..32].try_into().unwrap()), b.checksum());
        assert_eq!(bytes.len(), 32 + 3 * 8 + 3 * 4 + 3 * 4);
        assert_eq!(b.offsets(), &[0, 1, 3]);
        assert_eq!(b.indices(), &[1, 0, 2]);
    }

    #[test]
    fn corruption_is_detected() {
        let b = SparseBlock::from_dense(2, 2, &[1.0, 0.0, 0.0, 4.0]).unwrap();
        let p = Path::new("x.vcsb");
        let mut bytes = b.encode();
        *bytes.last_mut().unwrap() ^= 0x40;
        assert!(matches!(SparseBlock::decode(&bytes, p), Err(Error::Corruption { .. })));
        let bytes = b.encode();
        assert!(matches!(SparseBlock::decode(&bytes[..20], p), Err(Error::Corruption { .. })));
        assert!(matches!(SparseBlock::decode(&bytes[..bytes.len() - 4], p), Err(Error::Corruption { .. })));
        let mut bytes = b.encode();
        bytes[0] = b'X';
        assert!(matches!(SparseBlock::decode(&bytes, p), Err(Error::Corruption { .. })));
    }

    #[test]
    fn invalid_structure_is_rejected() {
        assert!(SparseBlock::new(1, 3, vec![0, 2], vec![2, 1], vec![1.0, 1.0]).is_err());
        assert!(SparseBlock::new(1, 3, vec![0, 1], vec![3], vec![1.0]).is_err());
        assert!(SparseBlock::new(2, 3, vec![0, 2, 1], vec![0, 1], vec![1.0, 1.0]).is_err());
        assert!(SparseBlock::new(1, 3, vec![0, 1], vec![0], vec![f32::NAN]).is_err());
    }

    #[test]
    fn column_selection() {
        let b = SparseBlock::from_dense(2, 3, &[1.0, 2.0, 3.0, 4.0, 0.0, 6.0]).unwrap();
        let s = b.select_columns(&[2, 0]).unwrap();
        assert_eq!(s.to_dense().data(), &[3.0, 1.0, 6.0, 4.0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn roundtrip_is_bit_exact(b in block_strategy()) {
            let back = SparseBlock::decode(&b.encode(), Path::new("mem")).unwrap();
            prop_assert_eq!(back.offsets(), b.offsets());
            prop_assert_eq!(back.indices(), b.indices());
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(back.values()), bits(b.values()));
        }
    }
}
