//! Momentum key encoder and the FIFO key dictionary.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::mat::{l2_norm, Matrix};
use crate::nn::MlpState;

/// Key-side network updated as an exponential moving average of the query
/// network: `θ_k ← m·θ_k + (1−m)·θ_q`.
#[derive(Debug, Clone)]
pub struct MomentumPair {
    pub key: MlpState,
    pub momentum: f64,
}

impl MomentumPair {
    pub fn new(query: &MlpState, momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::OutOfRange {
                what: "momentum coefficient",
                value: momentum,
                lo: 0.0,
                hi: 1.0,
            });
        }
        Ok(Self { key: query.clone(), momentum })
    }

    /// Moves the key parameters toward the query parameters; the query state
    /// is untouched and per-domain statistics stay with the key network.
    pub fn momentum_update(&mut self, query: &MlpState) -> Result<()> {
        let q = query.flatten_params();
        let mut k = self.key.flatten_params();
        if q.len() != k.len() {
            return Err(Error::DimensionMismatch {
                what: "momentum pair parameters",
                expected: k.len(),
                got: q.len(),
            });
        }
        for (kv, qv) in k.iter_mut().zip(&q) {
            *kv = self.momentum * *kv + (1.0 - self.momentum) * qv;
        }
        self.key.load_params(&k)
    }
}

/// Fixed-capacity FIFO dictionary of unit-norm keys with class labels.
///
/// Labels ride along because positives and negatives are label-defined here,
/// unlike instance-discrimination dictionaries.
#[derive(Debug, Clone)]
pub struct KeyQueue {
    capacity: usize,
    keys: VecDeque<Vec<f64>>,
    labels: VecDeque<usize>,
}

impl KeyQueue {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Empty("queue capacity"));
        }
        Ok(Self {
            capacity,
            keys: VecDeque::new(),
            labels: VecDeque::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.keys.len() == self.capacity
    }

    /// Inserts a batch of keys, evicting the oldest entries so the size never
    /// exceeds capacity. Insertion order is preserved.
    pub fn enqueue_batch(&mut self, keys: &Matrix, labels: &[usize]) -> Result<()> {
        if keys.rows != labels.len() {
            return Err(Error::DimensionMismatch {
                what: "queue labels",
                expected: keys.rows,
                got: labels.len(),
            });
        }
        if keys.rows > self.capacity {
            return Err(Error::Contract(format!(
                "batch of {} exceeds queue capacity {}",
                keys.rows, self.capacity
            )));
        }
        for i in 0..keys.rows {
            let row = keys.row(i);
            if (l2_norm(row) - 1.0).abs() > 1e-9 {
                return Err(Error::Contract(format!(
                    "key {i} is not unit-norm (norm {})",
                    l2_norm(row)
                )));
            }
        }
        for i in 0..keys.rows {
            if self.keys.len() == self.capacity {
                self.keys.pop_front();
                self.labels.pop_front();
            }
            self.keys.push_back(keys.row(i).to_vec());
            self.labels.push_back(labels[i]);
        }
        Ok(())
    }

    /// Snapshot of the stored keys as a matrix plus their labels, oldest
    /// first.
    pub fn snapshot(&self) -> (Matrix, Vec<usize>) {
        let dim = self.keys.front().map_or(0, |k| k.len());
        let mut m = Matrix::zeros(self.keys.len(), dim);
        for (i, k) in self.keys.iter().enumerate() {
            m.row_mut(i).copy_from_slice(k);
        }
        (m, self.labels.iter().copied().collect())
    }

    /// Splits the stored indices by label match with the query label.
    pub fn partition_by_label(&self, query_label: usize) -> (Vec<usize>, Vec<usize>) {
        let mut positives = Vec::new();
        let mut negatives = Vec::new();
        for (i, &l) in self.labels.iter().enumerate() {
            if l == query_label {
                positives.push(i);
            } else {
                negatives.push(i);
            }
        }
        (positives, negatives)
    }

    /// Debug dump: `index,label,k1..kd`.
    pub fn to_csv(&self) -> String {
        let dim = self.keys.front().map_or(0, |k| k.len());
        let mut out = String::from("index,label");
        for j in 0..dim {
            out.push_str(&format!(",k{}", j + 1));
        }
        out.push('\n');
        for (i, (k, l)) in self.keys.iter().zip(&self.labels).enumerate() {
            out.push_str(&format!("{i},{l}"));
            for v in k {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}
