use ndarray::{Array1, Array2};
use rand::seq::index;
use rand::Rng;

use crate::error::{Result, TrfpError};

/// One environment step. `a` is the executed (clamped) action.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub s_next: Vec<f64>,
    /// True termination only; time-limit truncation keeps bootstrapping.
    pub done: bool,
}

/// Transitions stacked row-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub s: Array2<f64>,
    pub a: Array2<f64>,
    pub r: Array1<f64>,
    pub s_next: Array2<f64>,
    pub done: Array1<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }

    pub fn from_transitions(items: &[&Transition]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| TrfpError::Usage("cannot build an empty batch".into()))?;
        let (ds, da) = (first.s.len(), first.a.len());
        let n = items.len();
        let mut s = Array2::zeros((n, ds));
        let mut a = Array2::zeros((n, da));
        let mut s_next = Array2::zeros((n, ds));
        let mut r = Array1::zeros(n);
        let mut done = Array1::zeros(n);
        for (i, t) in items.iter().enumerate() {
            if t.s.len() != ds || t.s_next.len() != ds || t.a.len() != da {
                return Err(TrfpError::Shape(format!("transition {i} has inconsistent widths")));
            }
            s.row_mut(i).assign(&Array1::from(t.s.clone()));
            a.row_mut(i).assign(&Array1::from(t.a.clone()));
            s_next.row_mut(i).assign(&Array1::from(t.s_next.clone()));
            r[i] = t.r;
            done[i] = if t.done { 1.0 } else { 0.0 };
        }
        Ok(Self { s, a, r, s_next, done })
    }
}

/// Fixed-capacity ring of transitions; the oldest entry is overwritten once
/// full.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    storage: Vec<Transition>,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(TrfpError::Usage("replay capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            storage: Vec::with_capacity(capacity.min(1 << 16)),
            cursor: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.storage.len() < self.capacity {
            self.storage.push(t);
        } else {
            self.storage[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.storage.get(i)
    }

    /// `batch` distinct indices drawn uniformly from the stored entries.
    pub fn sample_indices(&self, rng: &mut (impl Rng + ?Sized), batch: usize) -> Result<Vec<usize>> {
        if batch == 0 || self.storage.len() < batch {
            return Err(TrfpError::Usage(format!(
                "cannot sample {batch} transitions from a buffer holding {}",
                self.storage.len()
            )));
        }
        Ok(index::sample(rng, self.storage.len(), batch).into_vec())
    }

    pub fn sample(&self, rng: &mut (impl Rng + ?Sized), batch: usize) -> Result<Batch> {
        let idx = self.sample_indices(rng, batch)?;
        let items: Vec<&Transition> = idx.iter().map(|&i| &self.storage[i]).collect();
        Batch::from_transitions(&items)
    }
}
