//! Live-bytes accounting for transient numeric buffers.
//!
//! Memory claims in this crate are made against an internal counter, not OS
//! RSS: every buffer allocated through [`TrackedVec`] (or guarded by
//! [`MemGuard`]) while a counter is active on the current thread registers its
//! byte size, and releases it on drop. The deferred-backpropagation scheduler
//! activates a counter around each mode so peak working sets can be compared
//! deterministically across platforms.

use std::cell::RefCell;
use std::ops::{Deref, DerefMut};
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;

#[derive(Debug, Default)]
pub struct MemCounter {
    current: AtomicI64,
    peak: AtomicI64,
}

impl MemCounter {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn current_live_bytes(&self) -> i64 {
        self.current.load(Ordering::Relaxed)
    }

    pub fn peak_live_bytes(&self) -> i64 {
        self.peak.load(Ordering::Relaxed)
    }

    pub fn reset_peak(&self) {
        self.peak
            .store(self.current.load(Ordering::Relaxed), Ordering::Relaxed);
    }

    fn add(&self, bytes: i64) {
        let now = self.current.fetch_add(bytes, Ordering::Relaxed) + bytes;
        // Racing peaks only matter if workers allocate, which they do not.
        self.peak.fetch_max(now, Ordering::Relaxed);
    }

    fn sub(&self, bytes: i64) {
        self.current.fetch_sub(bytes, Ordering::Relaxed);
    }
}

thread_local! {
    static ACTIVE: RefCell<Vec<Arc<MemCounter>>> = const { RefCell::new(Vec::new()) };
}

/// Runs `f` with `counter` active on this thread; nesting is allowed.
pub fn with_counter<T>(counter: &Arc<MemCounter>, f: impl FnOnce() -> T) -> T {
    ACTIVE.with(|a| a.borrow_mut().push(Arc::clone(counter)));
    let out = f();
    ACTIVE.with(|a| {
        a.borrow_mut().pop();
    });
    out
}

fn active_counters() -> Vec<Arc<MemCounter>> {
    ACTIVE.with(|a| a.borrow().clone())
}

/// RAII registration of `bytes` against the counters active at creation.
#[derive(Debug, Default)]
pub struct MemGuard {
    bytes: i64,
    counters: Vec<Arc<MemCounter>>,
}

impl MemGuard {
    pub fn new(bytes: usize) -> Self {
        let counters = active_counters();
        let bytes = bytes as i64;
        for c in &counters {
            c.add(bytes);
        }
        Self { bytes, counters }
    }

    pub fn of_slice<T>(slice: &[T]) -> Self {
        Self::new(std::mem::size_of_val(slice))
    }
}

impl Drop for MemGuard {
    fn drop(&mut self) {
        for c in &self.counters {
            c.sub(self.bytes);
        }
    }
}

/// A `Vec<f64>` whose allocation is reported to the active counters.
///
/// Dropping unregisters against the same counters it registered with, so a
/// buffer that outlives its tracking scope still balances the books.
#[derive(Debug, Default)]
pub struct TrackedVec {
    data: Vec<f64>,
    #[allow(dead_code)] // RAII registration, dropped with the buffer
    guard: MemGuard,
}

impl TrackedVec {
    pub fn zeros(len: usize) -> Self {
        Self {
            data: vec![0.0; len],
            guard: MemGuard::new(len * std::mem::size_of::<f64>()),
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let guard = MemGuard::new(data.len() * std::mem::size_of::<f64>());
        Self { data, guard }
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }
}

impl Clone for TrackedVec {
    fn clone(&self) -> Self {
        Self::from_vec(self.data.clone())
    }
}

impl Deref for TrackedVec {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.data
    }
}

impl DerefMut for TrackedVec {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

impl PartialEq for TrackedVec {
    fn eq(&self, other: &Self) -> bool {
        self.data == other.data
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counter_balances_to_baseline() {
        let c = MemCounter::new();
        with_counter(&c, || {
            let a = TrackedVec::zeros(100);
            assert_eq!(c.current_live_bytes(), 800);
            let b = TrackedVec::zeros(50);
            assert_eq!(c.current_live_bytes(), 1200);
            drop(a);
            assert_eq!(c.current_live_bytes(), 400);
            drop(b);
        });
        assert_eq!(c.current_live_bytes(), 0);
        assert_eq!(c.peak_live_bytes(), 1200);
    }

    #[test]
    fn buffer_outliving_scope_still_releases() {
        let c = MemCounter::new();
        let v = with_counter(&c, || TrackedVec::zeros(10));
        assert_eq!(c.current_live_bytes(), 80);
        drop(v);
        assert_eq!(c.current_live_bytes(), 0);
    }

    #[test]
    fn untracked_allocation_is_free() {
        let v = TrackedVec::zeros(10);
        let c = MemCounter::new();
        with_counter(&c, || drop(v));
        assert_eq!(c.current_live_bytes(), 0);
        assert_eq!(c.peak_live_bytes(), 0);
    }
}
