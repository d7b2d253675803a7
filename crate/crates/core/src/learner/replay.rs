use std::collections::VecDeque;

use rand::Rng;

use crate::error::{Error, Result};

/// Fixed-capacity FIFO buffer with uniform sampling (with replacement).
#[derive(Clone, Debug)]
pub struct ReplayBuffer<T> {
    items: VecDeque<T>,
    capacity: usize,
    pushed: u64,
    evicted: u64,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        Ok(ReplayBuffer {
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
            capacity,
            pushed: 0,
            evicted: 0,
        })
    }

    pub fn push(&mut self, item: T) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
            self.evicted += 1;
        }
        self.items.push_back(item);
        self.pushed += 1;
    }

    pub fn extend(&mut self, items: impl IntoIterator<Item = T>) {
        for item in items {
            self.push(item);
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn pushed(&self) -> u64 {
        self.pushed
    }

    pub fn evicted(&self) -> u64 {
        self.evicted
    }

    /// Oldest item first.
    pub fn get(&self, i: usize) -> Option<&T> {
        self.items.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.items.iter()
    }

    /// `batch_size` indices drawn uniformly with replacement. Fails while the
    /// buffer holds fewer than `min_fill` items.
    pub fn sample_indices<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        min_fill: usize,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        let required = min_fill.max(1);
        if self.items.len() < required {
            return Err(Error::BufferUnderfilled {
                size: self.items.len(),
                required,
            });
        }
        Ok((0..batch_size)
            .map(|_| rng.gen_range(0..self.items.len()))
            .collect())
    }

    pub fn sample<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        min_fill: usize,
        rng: &mut R,
    ) -> Result<Vec<&T>> {
        Ok(self
            .sample_indices(batch_size, min_fill, rng)?
            .into_iter()
            .map(|i| &self.items[i])
            .collect())
    }
}
