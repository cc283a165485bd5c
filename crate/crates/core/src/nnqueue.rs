//! FIFO queue of past text embeddings with exact nearest-neighbor lookup.

use crate::error::{Error, Result};
use crate::tensor::{kernels, Tensor};

/// Fixed-capacity ring buffer of unit vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureQueue {
    capacity: usize,
    dim: usize,
    storage: Vec<f32>,
    fill: usize,
    head: usize,
}

/// Result of [`FeatureQueue::nearest`].
#[derive(Debug, Clone, PartialEq)]
pub struct Neighbors {
    /// `[N × d]` retrieved rows.
    pub rows: Tensor<f32>,
    /// Age rank of each neighbor, 0 being the oldest stored row.
    pub indices: Vec<usize>,
    pub similarities: Vec<f32>,
}

impl FeatureQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::Config(format!(
                "queue needs positive capacity and dim, got {capacity}×{dim}"
            )));
        }
        Ok(FeatureQueue {
            capacity,
            dim,
            storage: vec![0.0; capacity * dim],
            fill: 0,
            head: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.fill
    }

    pub fn is_empty(&self) -> bool {
        self.fill == 0
    }

    /// Storage slots from oldest to newest.
    fn slots(&self) -> impl Iterator<Item = usize> + '_ {
        let start = if self.fill < self.capacity { 0 } else { self.head };
        (0..self.fill).map(move |i| (start + i) % self.capacity)
    }

    /// Stored rows ordered from oldest to newest, `[fill × d]`.
    pub fn contents(&self) -> Tensor<f32> {
        let mut data = Vec::with_capacity(self.fill * self.dim);
        for s in self.slots() {
            data.extend_from_slice(&self.storage[s * self.dim..(s + 1) * self.dim]);
        }
        Tensor::new(vec![self.fill, self.dim], data).expect("consistent queue")
    }

    /// Appends rows in batch order, evicting the oldest once full.
    pub fn push_batch(&mut self, feats: &Tensor<f32>) -> Result<()> {
        let s = feats.shape();
        if s.len() != 2 || s[1] != self.dim {
            return Err(Error::dim("queue push", s, &[s.first().copied().unwrap_or(0), self.dim]));
        }
        for r in 0..s[0] {
            let slot = self.head;
            self.storage[slot * self.dim..(slot + 1) * self.dim].copy_from_slice(feats.row(r));
            self.head = (self.head + 1) % self.capacity;
            self.fill = (self.fill + 1).min(self.capacity);
        }
        Ok(())
    }

    /// Most cosine-similar stored row for each unit query. Ties go to the
    /// oldest row. Returns `None` while the queue is empty.
    pub fn nearest(&self, queries: &Tensor<f32>) -> Result<Option<Neighbors>> {
        let s = queries.shape();
        if s.len() != 2 || s[1] != self.dim {
            return Err(Error::dim("queue nearest", s, &[s.first().copied().unwrap_or(0), self.dim]));
        }
        if self.fill == 0 {
            return Ok(None);
        }
        let bank = self.contents();
        let n = s[0];
        let sims = kernels::matmul_nt(queries.data(), bank.data(), n, self.dim, self.fill);
        let mut indices = Vec::with_capacity(n);
        let mut similarities = Vec::with_capacity(n);
        for row in sims.chunks(self.fill) {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            indices.push(best);
            similarities.push(row[best]);
        }
        Ok(Some(Neighbors {
            rows: bank.select_rows(&indices),
            indices,
            similarities,
        }))
    }

    /// `(storage [capacity × d], meta [capacity, dim, fill, head])`.
    pub fn to_arrays(&self) -> (Tensor<f32>, Tensor<f32>) {
        let storage = Tensor::new(vec![self.capacity, self.dim], self.storage.clone()).expect("consistent queue");
        let meta = Tensor::new(
            vec![4],
            vec![self.capacity as f32, self.dim as f32, self.fill as f32, self.head as f32],
        )
        .expect("four values");
        (storage, meta)
    }

    pub fn from_arrays(storage: &Tensor<f32>, meta: &Tensor<f32>) -> Result<Self> {
        let m = meta.data();
        if m.len() != 4 {
            return Err(Error::Checkpoint(format!("queue.meta has {} values, expected 4", m.len())));
        }
        let as_count = |v: f32| -> Result<usize> {
            if v >= 0.0 && v.fract() == 0.0 && v < 16_777_216.0 {
                Ok(v as usize)
            } else {
                Err(Error::Checkpoint(format!("bad queue.meta value {v}")))
            }
        };
        let (capacity, dim, fill, head) = (as_count(m[0])?, as_count(m[1])?, as_count(m[2])?, as_count(m[3])?);
        if storage.shape() != [capacity, dim] || fill > capacity || head >= capacity.max(1) {
            return Err(Error::Checkpoint(format!(
                "queue.storage {:?} inconsistent with meta {:?}",
                storage.shape(),
                m
            )));
        }
        Ok(FeatureQueue {
            capacity,
            dim,
            storage: storage.data().to_vec(),
            fill,
            head,
        })
    }
}
