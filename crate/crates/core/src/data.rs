//! In-memory classification datasets and the shared batch stream.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::net::Batch;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Row-major `len × n_features`.
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub n_features: usize,
    pub n_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn gather(&self, indices: &[usize]) -> Batch {
        let mut features = Vec::with_capacity(indices.len() * self.n_features);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        Batch {
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            width: self.n_features,
        }
    }

    /// First `n` samples.
    pub fn truncate(mut self, n: usize) -> Result<Self> {
        if n == 0 || n > self.len() {
            return Err(Error::config(format!(
                "subset size {n} must lie in 1..={}",
                self.len()
            )));
        }
        self.labels.truncate(n);
        self.features.truncate(n * self.n_features);
        Ok(self)
    }

    /// The whole dataset as one batch.
    pub fn as_batch(&self) -> Batch {
        Batch {
            features: self.features.clone(),
            labels: self.labels.clone(),
            width: self.n_features,
        }
    }
}

/// Mini-batches drawn from reshuffled epochs of a ChaCha8 stream. The last
/// partial batch of an epoch is dropped so every batch has the same size.
#[derive(Debug, Clone)]
pub struct BatchStream {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
}

impl BatchStream {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || batch_size > len {
            return Err(Error::config(format!(
                "batch size {batch_size} must lie in 1..={len}"
            )));
        }
        let mut s = Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..len).collect(),
            cursor: len,
            batch_size,
        };
        s.reshuffle();
        Ok(s)
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    pub fn next_indices(&mut self) -> &[usize] {
        if self.cursor + self.batch_size > self.order.len() {
            self.reshuffle();
        }
        let start = self.cursor;
        self.cursor += self.batch_size;
        &self.order[start..self.cursor]
    }

    pub fn next_batch(&mut self, data: &Dataset) -> Batch {
        let idx = self.next_indices().to_vec();
        data.gather(&idx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        Dataset {
            features: (0..10).map(f64::from).collect(),
            labels: vec![0, 1, 0, 1, 0],
            n_features: 2,
            n_classes: 2,
        }
    }

    #[test]
    fn stream_covers_each_epoch_once() {
        let mut s = BatchStream::new(10, 5, 1).unwrap();
        let mut seen: Vec<usize> = Vec::new();
        seen.extend(s.next_indices());
        seen.extend(s.next_indices());
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn stream_is_deterministic() {
        let mut a = BatchStream::new(100, 7, 3).unwrap();
        let mut b = BatchStream::new(100, 7, 3).unwrap();
        for _ in 0..50 {
            assert_eq!(a.next_indices(), b.next_indices());
        }
        assert!(BatchStream::new(3, 4, 0).is_err());
        assert!(BatchStream::new(3, 0, 0).is_err());
    }

    #[test]
    fn gather_and_truncate() {
        let d = tiny();
        let b = d.gather(&[4, 0]);
        assert_eq!(b.features, vec![8.0, 9.0, 0.0, 1.0]);
        assert_eq!(b.labels, vec![0, 0]);
        let t = d.clone().truncate(2).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.features.len(), 4);
        assert!(d.truncate(6).is_err());
    }
}
