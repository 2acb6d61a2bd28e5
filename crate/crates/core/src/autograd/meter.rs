//! Byte accounting for tensor payloads.
//!
//! Every metered allocation registers its payload size with a thread-local
//! [`MemoryMeter`] and unregisters on drop. Allocations are tagged with a
//! [`Category`] (taken from the innermost [`category_scope`]) and attributed to
//! the current training [`Phase`]. Only payload bytes are counted; allocator
//! overhead and unmetered scratch vectors are not.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::marker::PhantomData;

use serde::{Deserialize, Serialize};

/// Training phase an allocation is attributed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Idle,
    Forward,
    Loss,
    Backward,
    Optimizer,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Idle => "idle",
            Phase::Forward => "forward",
            Phase::Loss => "loss",
            Phase::Backward => "backward",
            Phase::Optimizer => "optimizer",
        }
    }
}

/// What a metered buffer holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Parameter,
    Activation,
    /// Gradient buffers owned by parameters (accumulation slots and `Parameter::grad`).
    Gradient,
    Logits,
    OptimizerState,
}

/// Snapshot of the meter state.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryMeter {
    pub live_bytes: usize,
    pub peak_bytes: usize,
    pub phase_peaks: BTreeMap<Phase, usize>,
    pub category_live: BTreeMap<Category, usize>,
    pub category_peaks: BTreeMap<Category, usize>,
    pub allocations: u64,
    pub frees: u64,
}

impl MemoryMeter {
    pub fn phase_peak(&self, phase: Phase) -> usize {
        self.phase_peaks.get(&phase).copied().unwrap_or(0)
    }

    pub fn category_live(&self, category: Category) -> usize {
        self.category_live.get(&category).copied().unwrap_or(0)
    }

    pub fn category_peak(&self, category: Category) -> usize {
        self.category_peaks.get(&category).copied().unwrap_or(0)
    }
}

struct MeterState {
    meter: MemoryMeter,
    phase: Phase,
    categories: Vec<Category>,
    // Open watermarks by slot: the tracked category (all bytes when `None`)
    // and the running maximum.
    watermarks: Vec<Option<(Option<Category>, usize)>>,
}

impl MeterState {
    fn new() -> Self {
        MeterState { meter: MemoryMeter::default(), phase: Phase::Idle, categories: Vec::new(), watermarks: Vec::new() }
    }

    fn bump_peaks(&mut self, category: Option<Category>) {
        let live = self.meter.live_bytes;
        self.meter.peak_bytes = self.meter.peak_bytes.max(live);
        let phase_peak = self.meter.phase_peaks.entry(self.phase).or_insert(0);
        *phase_peak = (*phase_peak).max(live);
        if let Some(category) = category {
            let cat_live = self.meter.category_live(category);
            let cat_peak = self.meter.category_peaks.entry(category).or_insert(0);
            *cat_peak = (*cat_peak).max(cat_live);
        }
        for (tracked, mark) in self.watermarks.iter_mut().flatten() {
            let current = match tracked {
                None => live,
                Some(c) => self.meter.category_live.get(c).copied().unwrap_or(0),
            };
            *mark = (*mark).max(current);
        }
    }
}

thread_local! {
    static STATE: RefCell<MeterState> = RefCell::new(MeterState::new());
}

fn record_alloc(category: Category, bytes: usize) {
    STATE.with(|s| {
        let mut s = s.borrow_mut();
        s.meter.live_bytes += bytes;
        s.meter.allocations += 1;
        *s.meter.category_live.entry(category).or_insert(0) += bytes;
        s.bump_peaks(Some(category));
    });
}

fn record_free(category: Category, bytes: usize) {
    STATE.with(|s| {
        let mut s = s.borrow_mut();
        s.meter.live_bytes = s.meter.live_bytes.saturating_sub(bytes);
        s.meter.frees += 1;
        let live = s.meter.category_live.entry(category).or_insert(0);
        *live = live.saturating_sub(bytes);
    });
}

/// Copy of the current thread's meter. Does not reset anything.
pub fn memory_report() -> MemoryMeter {
    STATE.with(|s| s.borrow().meter.clone())
}

/// Resets peak statistics to the current live values. Live counts are untouched.
pub fn reset_peaks() {
    STATE.with(|s| {
        let mut s = s.borrow_mut();
        let live = s.meter.live_bytes;
        s.meter.peak_bytes = live;
        s.meter.phase_peaks.clear();
        let current: Vec<(Category, usize)> = s.meter.category_live.iter().map(|(c, b)| (*c, *b)).collect();
        s.meter.category_peaks = current.into_iter().collect();
        let phase = s.phase;
        s.meter.phase_peaks.insert(phase, live);
    });
}

pub fn current_phase() -> Phase {
    STATE.with(|s| s.borrow().phase)
}

/// Switches the current phase and returns the previous one.
pub fn set_phase(phase: Phase) -> Phase {
    STATE.with(|s| {
        let mut s = s.borrow_mut();
        let prev = std::mem::replace(&mut s.phase, phase);
        s.bump_peaks(None);
        prev
    })
}

/// Restores the previous phase on drop.
#[must_use]
pub struct PhaseGuard {
    prev: Phase,
    _not_send: PhantomData<*const ()>,
}

impl Drop for PhaseGuard {
    fn drop(&mut self) {
        set_phase(self.prev);
    }
}

pub fn phase_scope(phase: Phase) -> PhaseGuard {
    PhaseGuard { prev: set_phase(phase), _not_send: PhantomData }
}

/// Category used for tensors created on this thread outside any scope.
pub const DEFAULT_CATEGORY: Category = Category::Activation;

pub fn current_category() -> Category {
    STATE.with(|s| s.borrow().categories.last().copied().unwrap_or(DEFAULT_CATEGORY))
}

#[must_use]
pub struct CategoryGuard {
    _not_send: PhantomData<*const ()>,
}

impl Drop for CategoryGuard {
    fn drop(&mut self) {
        STATE.with(|s| {
            s.borrow_mut().categories.pop();
        });
    }
}

/// Tags tensors created while the guard lives with `category`.
pub fn category_scope(category: Category) -> CategoryGuard {
    STATE.with(|s| s.borrow_mut().categories.push(category));
    CategoryGuard { _not_send: PhantomData }
}

/// Tracks the maximum of `live_bytes` (or of one category's live bytes) from
/// creation until [`Watermark::peak`]. Independent of [`reset_peaks`].
pub struct Watermark {
    slot: usize,
    start: usize,
    _not_send: PhantomData<*const ()>,
}

impl Watermark {
    pub fn start() -> Self {
        Watermark::open(None)
    }

    pub fn for_category(category: Category) -> Self {
        Watermark::open(Some(category))
    }

    fn open(tracked: Option<Category>) -> Self {
        STATE.with(|s| {
            let mut s = s.borrow_mut();
            let live = match tracked {
                None => s.meter.live_bytes,
                Some(c) => s.meter.category_live(c),
            };
            let entry = Some((tracked, live));
            let slot = match s.watermarks.iter().position(Option::is_none) {
                Some(i) => {
                    s.watermarks[i] = entry;
                    i
                }
                None => {
                    s.watermarks.push(entry);
                    s.watermarks.len() - 1
                }
            };
            Watermark { slot, start: live, _not_send: PhantomData }
        })
    }

    /// Highest value seen since the watermark opened.
    pub fn peak(&self) -> usize {
        STATE.with(|s| s.borrow().watermarks[self.slot].map_or(0, |(_, peak)| peak))
    }

    /// Value when the watermark opened.
    pub fn start_bytes(&self) -> usize {
        self.start
    }

    /// `peak() - start_bytes()`: the most this region added on top of what
    /// was already live.
    pub fn growth(&self) -> usize {
        self.peak().saturating_sub(self.start)
    }
}

impl Drop for Watermark {
    fn drop(&mut self) {
        STATE.with(|s| s.borrow_mut().watermarks[self.slot] = None);
    }
}

/// RAII registration of `bytes` of payload with the thread's meter.
#[derive(Debug)]
pub struct Allocation {
    bytes: usize,
    category: Category,
    _not_send: PhantomData<*const ()>,
}

impl Allocation {
    pub fn new(category: Category, bytes: usize) -> Self {
        record_alloc(category, bytes);
        Allocation { bytes, category, _not_send: PhantomData }
    }

    pub fn bytes(&self) -> usize {
        self.bytes
    }

    pub fn category(&self) -> Category {
        self.category
    }
}

impl Drop for Allocation {
    fn drop(&mut self) {
        record_free(self.category, self.bytes);
    }
}
