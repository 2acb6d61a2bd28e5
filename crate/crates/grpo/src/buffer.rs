use std::collections::VecDeque;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::GrpoError;

/// Ring of trajectories with FIFO eviction and seeded uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    items: VecDeque<T>,
    rng: ChaCha8Rng,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize, seed: u64) -> Result<Self, GrpoError> {
        if capacity == 0 {
            return Err(GrpoError::Config("buffer capacity must be at least 1".into()));
        }
        Ok(ReplayBuffer { capacity, items: VecDeque::with_capacity(capacity), rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.items.iter()
    }

    /// Inserts at the back; returns the oldest item if it had to make room.
    pub fn push(&mut self, item: T) -> Option<T> {
        let evicted = if self.items.len() == self.capacity { self.items.pop_front() } else { None };
        self.items.push_back(item);
        evicted
    }

    pub fn count_where(&self, pred: impl Fn(&T) -> bool) -> usize {
        self.items.iter().filter(|t| pred(t)).count()
    }

    /// Removes every matching item, oldest first.
    pub fn take_where(&mut self, pred: impl Fn(&T) -> bool) -> Vec<T> {
        let (taken, kept): (VecDeque<T>, VecDeque<T>) = self.items.drain(..).partition(|t| pred(t));
        self.items = kept;
        taken.into()
    }

    /// Removes the oldest matching item.
    pub fn take_first(&mut self, pred: impl Fn(&T) -> bool) -> Option<T> {
        let i = self.items.iter().position(pred)?;
        self.items.remove(i)
    }

    /// Removes `n` matching items drawn uniformly without replacement, in
    /// draw order. `None` (and nothing removed) if fewer than `n` match.
    pub fn sample_where(&mut self, n: usize, pred: impl Fn(&T) -> bool) -> Option<Vec<T>> {
        let candidates: Vec<usize> = (0..self.items.len()).filter(|&i| pred(&self.items[i])).collect();
        if candidates.len() < n {
            return None;
        }
        let picks: Vec<usize> =
            index::sample(&mut self.rng, candidates.len(), n).into_iter().map(|k| candidates[k]).collect();
        let mut slots: Vec<Option<T>> = self.items.drain(..).map(Some).collect();
        let drawn = picks.iter().map(|&i| slots[i].take().expect("indices are distinct")).collect();
        self.items = slots.into_iter().flatten().collect();
        Some(drawn)
    }

    pub fn into_items(self) -> Vec<T> {
        self.items.into()
    }
}
