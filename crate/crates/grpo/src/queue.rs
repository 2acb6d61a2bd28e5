use std::collections::VecDeque;
use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::Duration;

use crate::GrpoError;

#[derive(Debug, PartialEq, Eq)]
pub enum PushError<T> {
    Full(T),
    Closed(T),
}

impl<T> PushError<T> {
    pub fn into_inner(self) -> T {
        match self {
            PushError::Full(t) | PushError::Closed(t) => t,
        }
    }
}

struct State<T> {
    items: VecDeque<T>,
    closed: bool,
}

/// FIFO hand-off with a hard capacity. Producers block (or get the item back
/// from `try_push`) while it is full.
pub struct BoundedQueue<T> {
    capacity: usize,
    state: Mutex<State<T>>,
    not_full: Condvar,
    not_empty: Condvar,
}

impl<T> BoundedQueue<T> {
    pub fn new(capacity: usize) -> Result<Self, GrpoError> {
        if capacity == 0 {
            return Err(GrpoError::Config("queue capacity must be at least 1".into()));
        }
        Ok(BoundedQueue {
            capacity,
            state: Mutex::new(State { items: VecDeque::with_capacity(capacity), closed: false }),
            not_full: Condvar::new(),
            not_empty: Condvar::new(),
        })
    }

    fn lock(&self) -> MutexGuard<'_, State<T>> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.lock().items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_closed(&self) -> bool {
        self.lock().closed
    }

    /// Returns the occupancy after the push.
    pub fn try_push(&self, item: T) -> Result<usize, PushError<T>> {
        let mut s = self.lock();
        if s.closed {
            return Err(PushError::Closed(item));
        }
        if s.items.len() >= self.capacity {
            return Err(PushError::Full(item));
        }
        s.items.push_back(item);
        let n = s.items.len();
        drop(s);
        self.not_empty.notify_one();
        Ok(n)
    }

    /// Blocks while full. Hands the item back if the queue is closed.
    pub fn push(&self, item: T) -> Result<usize, T> {
        let mut s = self.lock();
        while !s.closed && s.items.len() >= self.capacity {
            s = self.not_full.wait(s).unwrap_or_else(|e| e.into_inner());
        }
        if s.closed {
            return Err(item);
        }
        s.items.push_back(item);
        let n = s.items.len();
        drop(s);
        self.not_empty.notify_one();
        Ok(n)
    }

    /// Item and the occupancy left behind.
    pub fn try_pop(&self) -> Option<(T, usize)> {
        let mut s = self.lock();
        let item = s.items.pop_front()?;
        let n = s.items.len();
        drop(s);
        self.not_full.notify_one();
        Some((item, n))
    }

    /// Waits up to `timeout` for an item. `None` on timeout or once closed
    /// and drained.
    pub fn pop_timeout(&self, timeout: Duration) -> Option<(T, usize)> {
        let s = self.lock();
        let (mut s, _) = self
            .not_empty
            .wait_timeout_while(s, timeout, |s| s.items.is_empty() && !s.closed)
            .unwrap_or_else(|e| e.into_inner());
        let item = s.items.pop_front()?;
        let n = s.items.len();
        drop(s);
        self.not_full.notify_one();
        Some((item, n))
    }

    /// Wakes every waiter; later pushes fail and pops drain what is left.
    pub fn close(&self) {
        self.lock().closed = true;
        self.not_full.notify_all();
        self.not_empty.notify_all();
    }

    /// Everything still queued, in order.
    pub fn drain(&self) -> Vec<T> {
        let items = self.lock().items.drain(..).collect();
        self.not_full.notify_all();
        items
    }
}
