//! Fixed-capacity FIFO feature stores with cosine top-k retrieval.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct FifoBuffer {
    capacity: usize,
    dim: usize,
    /// Ring storage, `capacity × dim` once full.
    data: Vec<f32>,
    /// Physical slot of the oldest row.
    head: usize,
    fill: usize,
}

impl FifoBuffer {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::Config(format!(
                "buffer capacity {capacity} and dim {dim} must be positive"
            )));
        }
        Ok(FifoBuffer { capacity, dim, data: Vec::new(), head: 0, fill: 0 })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fill(&self) -> usize {
        self.fill
    }

    pub fn is_empty(&self) -> bool {
        self.fill == 0
    }

    fn slot(&self, logical: usize) -> &[f32] {
        let s = (self.head + logical) % self.capacity;
        &self.data[s * self.dim..(s + 1) * self.dim]
    }

    /// Rows in insertion order, oldest first.
    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        (0..self.fill).map(|i| self.slot(i))
    }

    /// Appends `batch: [n, d]` in row order, evicting the oldest rows.
    pub fn push_batch(&mut self, batch: &Tensor) -> Result<()> {
        if batch.rank() != 2 || batch.shape()[1] != self.dim {
            return Err(Error::Contract(format!(
                "buffer of dim {} cannot take batch of shape {:?}",
                self.dim,
                batch.shape()
            )));
        }
        if !batch.is_finite() {
            return Err(Error::NonFinite("buffer push".into()));
        }
        for row in batch.data().chunks(self.dim) {
            self.push_row(row);
        }
        Ok(())
    }

    fn push_row(&mut self, row: &[f32]) {
        let d = self.dim;
        if self.fill < self.capacity {
            let s = (self.head + self.fill) % self.capacity;
            if self.data.len() < (s + 1) * d {
                self.data.resize((s + 1) * d, 0.0);
            }
            self.data[s * d..(s + 1) * d].copy_from_slice(row);
            self.fill += 1;
        } else {
            let s = self.head;
            self.data[s * d..(s + 1) * d].copy_from_slice(row);
            self.head = (self.head + 1) % self.capacity;
        }
    }

    /// Copy of the current contents `[fill, d]`, oldest first.
    pub fn snapshot_negatives(&self) -> Result<Tensor> {
        if self.fill == 0 {
            return Err(Error::EmptyInput("buffer snapshot"));
        }
        let data = self.rows().flatten().copied().collect();
        Tensor::new([self.fill, self.dim], data)
    }

    /// Like [`snapshot_negatives`](Self::snapshot_negatives) but `None` when
    /// empty.
    pub fn snapshot(&self) -> Option<Tensor> {
        self.snapshot_negatives().ok()
    }

    /// The `k` stored rows most cosine-similar to `query`, most similar
    /// first; equal similarities keep insertion order.
    pub fn topk_neighbors(&self, query: &[f32], k: usize) -> Result<Tensor> {
        let q = Tensor::new([1, query.len()], query.to_vec())?;
        let out = self.topk_batch(&q, k)?;
        out.reshape([k, self.dim])
    }

    /// Logical indices (0 = oldest) of the top-k rows for each query row.
    pub fn topk_indices(&self, queries: &Tensor, k: usize) -> Result<Vec<Vec<usize>>> {
        if queries.rank() != 2 || queries.shape()[1] != self.dim {
            return Err(Error::Contract(format!(
                "queries of shape {:?} for buffer of dim {}",
                queries.shape(),
                self.dim
            )));
        }
        if k == 0 || self.fill < k {
            return Err(Error::InsufficientNeighbors { fill: self.fill, k });
        }
        let d = self.dim;
        let qnorms: Vec<f32> = queries.data().chunks(d).map(norm).collect();
        if qnorms.iter().any(|&n| n <= 1e-12) {
            return Err(Error::Degenerate("zero-norm retrieval query"));
        }
        let stored = self.snapshot_negatives()?;
        let rnorms: Vec<f32> = stored.data().chunks(d).map(|r| norm(r).max(1e-12)).collect();
        let dots = crate::tensor::ops::matmul_t(queries, &stored)?;
        let mut out = Vec::with_capacity(qnorms.len());
        for (qi, row) in dots.data().chunks(self.fill).enumerate() {
            let mut scored: Vec<(f32, usize)> = row
                .iter()
                .zip(&rnorms)
                .enumerate()
                .map(|(i, (dot, rn))| (dot / (rn * qnorms[qi]), i))
                .collect();
            scored.select_nth_unstable_by(k - 1, rank_order);
            scored.truncate(k);
            scored.sort_by(rank_order);
            out.push(scored.into_iter().map(|(_, i)| i).collect());
        }
        Ok(out)
    }

    /// Top-k for every row of `queries: [b, d]`, stacked as `[b, k, d]`.
    pub fn topk_batch(&self, queries: &Tensor, k: usize) -> Result<Tensor> {
        let idx = self.topk_indices(queries, k)?;
        let data = idx
            .iter()
            .flatten()
            .flat_map(|&i| self.slot(i).iter().copied())
            .collect();
        Tensor::new([idx.len(), k, self.dim], data)
    }

    /// Rebuilds a buffer from rows in insertion order.
    pub fn from_rows(capacity: usize, dim: usize, rows: &[f32]) -> Result<Self> {
        let mut buf = FifoBuffer::new(capacity, dim)?;
        if rows.len() % dim != 0 || rows.len() / dim > capacity {
            return Err(Error::Contract(format!(
                "{} values do not fit a {capacity}x{dim} buffer",
                rows.len()
            )));
        }
        for row in rows.chunks(dim) {
            buf.push_row(row);
        }
        Ok(buf)
    }
}

fn rank_order(a: &(f32, usize), b: &(f32, usize)) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

fn norm(v: &[f32]) -> f32 {
    v.iter().map(|x| x * x).sum::<f32>().sqrt()
}
