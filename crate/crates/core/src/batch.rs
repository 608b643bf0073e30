use crate::error::{Error, Result};

/// Row-major batch of vectors, `rows × dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl Batch {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::Shape(format!(
                "batch of {rows}x{dim} needs {} values, got {}",
                rows * dim,
                data.len()
            )));
        }
        Ok(Self { rows, dim, data })
    }

    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self {
            rows,
            dim,
            data: vec![0.0; rows * dim],
        }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::Shape(format!(
                    "row {i} has length {}, expected {dim}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            dim,
            data,
        })
    }

    /// One-dimensional batch from scalars.
    pub fn column(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            dim: 1,
            data: values.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        // chunks_exact on an empty dim would panic
        let dim = self.dim.max(1);
        self.data.chunks_exact(dim).take(self.rows)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn check_same_shape(&self, other: &Batch) -> Result<()> {
        if self.rows != other.rows || self.dim != other.dim {
            return Err(Error::Shape(format!(
                "{}x{} vs {}x{}",
                self.rows, self.dim, other.rows, other.dim
            )));
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows `start..end` as a new batch.
    pub fn slice_rows(&self, start: usize, end: usize) -> Batch {
        Batch {
            rows: end - start,
            dim: self.dim,
            data: self.data[start * self.dim..end * self.dim].to_vec(),
        }
    }

    /// Concatenate batches of equal dimension.
    pub fn concat(parts: &[Batch]) -> Result<Batch> {
        let dim = parts.first().map_or(0, |b| b.dim);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.dim != dim {
                return Err(Error::Shape(format!("concat of dim {} onto {dim}", p.dim)));
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(Batch { rows, dim, data })
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for r in self.iter_rows() {
            for (a, b) in m.iter_mut().zip(r) {
                *a += b;
            }
        }
        let n = self.rows.max(1) as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    /// Per-coordinate population variance.
    pub fn variance(&self) -> Vec<f64> {
        let mean = self.mean();
        let mut v = vec![0.0; self.dim];
        for r in self.iter_rows() {
            for ((acc, x), m) in v.iter_mut().zip(r).zip(&mean) {
                *acc += (x - m) * (x - m);
            }
        }
        let n = self.rows.max(1) as f64;
        v.iter_mut().for_each(|x| *x /= n);
        v
    }
}
