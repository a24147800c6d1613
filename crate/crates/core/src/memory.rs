//! Fixed-capacity FIFO of recent RoI features.

use std::collections::VecDeque;

use ndarray::{Array2, ArrayView2};

use crate::error::{NcdlError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMemory {
    capacity: usize,
    dim: usize,
    rows: VecDeque<Vec<f64>>,
}

impl FeatureMemory {
    pub fn new(capacity: usize, dim: usize) -> Self {
        FeatureMemory {
            capacity,
            dim,
            rows: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Appends every row, evicting the oldest rows beyond capacity.
    pub fn push_batch(&mut self, features: ArrayView2<'_, f64>) -> Result<()> {
        if features.ncols() != self.dim {
            return Err(NcdlError::Shape(format!(
                "memory holds {}-dim features, got {}",
                self.dim,
                features.ncols()
            )));
        }
        if self.capacity == 0 {
            return Ok(());
        }
        let skip = features.nrows().saturating_sub(self.capacity);
        for row in features.rows().into_iter().skip(skip) {
            if self.rows.len() == self.capacity {
                // reuse the evicted allocation
                let mut v = self.rows.pop_front().expect("non-empty at capacity");
                v.iter_mut().zip(row).for_each(|(d, &s)| *d = s);
                self.rows.push_back(v);
            } else {
                self.rows.push_back(row.to_vec());
            }
        }
        Ok(())
    }

    /// Copy of the contents, oldest first.
    pub fn snapshot(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.rows.len(), self.dim));
        for (mut dst, src) in out.rows_mut().into_iter().zip(&self.rows) {
            dst.iter_mut().zip(src).for_each(|(d, &s)| *d = s);
        }
        out
    }
}
