//! Sparse vectors and CSR matrices, plus the little-endian matrix file format
//! shared by label embeddings and classifier weights.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sorted index/value pairs over a feature space of size `dim`.
///
/// Indices are strictly increasing, every index is `< dim`, and no stored
/// value is zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseVector {
    dim: usize,
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl SparseVector {
    pub fn zeros(dim: usize) -> Self {
        SparseVector {
            dim,
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Validating constructor.
    pub fn new(dim: usize, indices: Vec<u32>, values: Vec<f64>) -> Result<Self> {
        if indices.len() != values.len() {
            return Err(Error::invalid(format!(
                "{} indices but {} values",
                indices.len(),
                values.len()
            )));
        }
        for w in indices.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::invalid("sparse indices must be strictly increasing"));
            }
        }
        if let Some(&last) = indices.last() {
            if last as usize >= dim {
                return Err(Error::invalid(format!("index {last} out of range for dim {dim}")));
            }
        }
        if values.iter().any(|v| *v == 0.0 || !v.is_finite()) {
            return Err(Error::invalid("sparse values must be finite and nonzero"));
        }
        Ok(SparseVector {
            dim,
            indices,
            values,
        })
    }

    /// Builds a vector from unordered pairs; duplicate indices are summed and
    /// resulting zeros dropped.
    pub fn from_pairs(dim: usize, mut pairs: Vec<(u32, f64)>) -> Self {
        pairs.sort_unstable_by_key(|&(i, _)| i);
        let mut indices = Vec::with_capacity(pairs.len());
        let mut values: Vec<f64> = Vec::with_capacity(pairs.len());
        for (i, v) in pairs {
            debug_assert!((i as usize) < dim);
            if indices.last() == Some(&i) {
                *values.last_mut().unwrap() += v;
            } else {
                indices.push(i);
                values.push(v);
            }
        }
        let mut out = SparseVector {
            dim,
            indices,
            values,
        };
        out.prune_zeros();
        out
    }

    fn prune_zeros(&mut self) {
        if self.values.iter().all(|v| *v != 0.0) {
            return;
        }
        let (indices, values) = self
            .indices
            .iter()
            .zip(&self.values)
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, v)| (*i, *v))
            .unzip();
        self.indices = indices;
        self.values = values;
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn is_zero(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }

    pub fn get(&self, index: u32) -> f64 {
        match self.indices.binary_search(&index) {
            Ok(pos) => self.values[pos],
            Err(_) => 0.0,
        }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Scales to unit Euclidean norm. Returns `false` (and leaves the vector
    /// untouched) for the zero vector.
    pub fn normalize(&mut self) -> bool {
        let norm = self.norm();
        if norm == 0.0 {
            return false;
        }
        for v in &mut self.values {
            *v /= norm;
        }
        true
    }

    pub fn normalized(mut self) -> Self {
        self.normalize();
        self
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.values {
            *v *= factor;
        }
        self.prune_zeros();
    }

    pub fn dot(&self, other: &SparseVector) -> f64 {
        let (mut a, mut b) = (0, 0);
        let mut acc = 0.0;
        while a < self.indices.len() && b < other.indices.len() {
            match self.indices[a].cmp(&other.indices[b]) {
                std::cmp::Ordering::Less => a += 1,
                std::cmp::Ordering::Greater => b += 1,
                std::cmp::Ordering::Equal => {
                    acc += self.values[a] * other.values[b];
                    a += 1;
                    b += 1;
                }
            }
        }
        acc
    }

    pub fn cosine(&self, other: &SparseVector) -> f64 {
        let denom = self.norm() * other.norm();
        if denom == 0.0 {
            0.0
        } else {
            self.dot(other) / denom
        }
    }

    /// `self ‖ other`, with `other`'s indices shifted by `self.dim()`.
    pub fn concat(&self, other: &SparseVector) -> SparseVector {
        let offset = self.dim as u32;
        let mut indices = Vec::with_capacity(self.nnz() + other.nnz());
        let mut values = Vec::with_capacity(self.nnz() + other.nnz());
        indices.extend_from_slice(&self.indices);
        values.extend_from_slice(&self.values);
        indices.extend(other.indices.iter().map(|i| i + offset));
        values.extend_from_slice(&other.values);
        SparseVector {
            dim: self.dim + other.dim,
            indices,
            values,
        }
    }

    /// Adds `self` into a dense accumulator.
    pub fn add_to_dense(&self, dense: &mut [f64]) {
        for (i, v) in self.iter() {
            dense[i as usize] += v;
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut dense = vec![0.0; self.dim];
        self.add_to_dense(&mut dense);
        dense
    }

    pub fn from_dense(dense: &[f64]) -> Self {
        let (indices, values) = dense
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, v)| (i as u32, *v))
            .unzip();
        SparseVector {
            dim: dense.len(),
            indices,
            values,
        }
    }
}

/// Dot product of a stored row (sorted indices) with a sparse query.
///
/// Walks the query's nonzeros and binary-searches the row, shrinking the
/// search window as it goes; the query is typically far sparser than the row.
#[inline]
pub fn row_dot<V: Scalar>(row_idx: &[u32], row_val: &[V], x: &SparseVector) -> f64 {
    let mut acc = 0.0;
    let mut lo = 0;
    for (i, xv) in x.iter() {
        if lo >= row_idx.len() {
            break;
        }
        match row_idx[lo..].binary_search(&i) {
            Ok(pos) => {
                acc += row_val[lo + pos].to_f64() * xv;
                lo += pos + 1;
            }
            Err(pos) => lo += pos,
        }
    }
    acc
}

/// Element type of a [`CsrMatrix`].
pub trait Scalar: Copy + Default + PartialEq + Send + Sync + 'static {
    const WIDTH: u8;
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
    fn write_le<W: Write>(self, w: &mut W) -> std::io::Result<()>;
    fn read_le<R: Read>(r: &mut R) -> std::io::Result<Self>;
}

impl Scalar for f32 {
    const WIDTH: u8 = 4;
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn write_le<W: Write>(self, w: &mut W) -> std::io::Result<()> {
        w.write_f32::<LittleEndian>(self)
    }
    fn read_le<R: Read>(r: &mut R) -> std::io::Result<Self> {
        r.read_f32::<LittleEndian>()
    }
}

impl Scalar for f64 {
    const WIDTH: u8 = 8;
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f64(v: f64) -> Self {
        v
    }
    fn write_le<W: Write>(self, w: &mut W) -> std::io::Result<()> {
        w.write_f64::<LittleEndian>(self)
    }
    fn read_le<R: Read>(r: &mut R) -> std::io::Result<Self> {
        r.read_f64::<LittleEndian>()
    }
}

/// Row-compressed sparse matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix<V> {
    dim: usize,
    indptr: Vec<u64>,
    indices: Vec<u32>,
    values: Vec<V>,
}

const CSR_MAGIC: &[u8; 8] = b"PFXCSR01";

impl<V: Scalar> CsrMatrix<V> {
    pub fn with_dim(dim: usize) -> Self {
        CsrMatrix {
            dim,
            indptr: vec![0],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn push_row<I>(&mut self, entries: I)
    where
        I: IntoIterator<Item = (u32, V)>,
    {
        for (i, v) in entries {
            debug_assert!((i as usize) < self.dim);
            self.indices.push(i);
            self.values.push(v);
        }
        self.indptr.push(self.indices.len() as u64);
    }

    pub fn push_sparse(&mut self, row: &SparseVector) {
        self.push_row(row.iter().map(|(i, v)| (i, V::from_f64(v))));
    }

    pub fn from_rows<'a, I>(dim: usize, rows: I) -> Self
    where
        I: IntoIterator<Item = &'a SparseVector>,
    {
        let mut m = CsrMatrix::with_dim(dim);
        for row in rows {
            m.push_sparse(row);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.indptr.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    #[inline]
    pub fn row(&self, r: usize) -> (&[u32], &[V]) {
        let (start, end) = (self.indptr[r] as usize, self.indptr[r + 1] as usize);
        (&self.indices[start..end], &self.values[start..end])
    }

    #[inline]
    pub fn row_dot(&self, r: usize, x: &SparseVector) -> f64 {
        let (idx, val) = self.row(r);
        row_dot(idx, val, x)
    }

    pub fn row_vector(&self, r: usize) -> SparseVector {
        let (idx, val) = self.row(r);
        SparseVector {
            dim: self.dim,
            indices: idx.to_vec(),
            values: val.iter().map(|v| v.to_f64()).collect(),
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CSR_MAGIC)?;
        w.write_u8(V::WIDTH)?;
        w.write_u64::<LittleEndian>(self.rows() as u64)?;
        w.write_u64::<LittleEndian>(self.dim as u64)?;
        w.write_u64::<LittleEndian>(self.nnz() as u64)?;
        for &p in &self.indptr {
            w.write_u64::<LittleEndian>(p)?;
        }
        for &i in &self.indices {
            w.write_u32::<LittleEndian>(i)?;
        }
        for &v in &self.values {
            v.write_le(&mut w)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CSR_MAGIC {
            return Err(Error::format("sparse matrix", "bad magic"));
        }
        let width = r.read_u8()?;
        if width != V::WIDTH {
            return Err(Error::format(
                "sparse matrix",
                format!("value width {width}, expected {}", V::WIDTH),
            ));
        }
        let rows = r.read_u64::<LittleEndian>()? as usize;
        let dim = r.read_u64::<LittleEndian>()? as usize;
        let nnz = r.read_u64::<LittleEndian>()? as usize;
        let mut indptr = vec![0u64; rows + 1];
        r.read_u64_into::<LittleEndian>(&mut indptr)?;
        let mut indices = vec![0u32; nnz];
        r.read_u32_into::<LittleEndian>(&mut indices)?;
        let mut values = Vec::with_capacity(nnz);
        for _ in 0..nnz {
            values.push(V::read_le(&mut r)?);
        }
        if indptr[0] != 0 || indptr[rows] as usize != nnz || indptr.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::format("sparse matrix", "inconsistent row pointers"));
        }
        if indices.iter().any(|&i| i as usize >= dim) {
            return Err(Error::format("sparse matrix", "column index out of range"));
        }
        Ok(CsrMatrix {
            dim,
            indptr,
            indices,
            values,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::file(path, e))?;
        self.write_to(BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::file(path, e))?;
        Self::read_from(BufReader::new(file))
    }
}
