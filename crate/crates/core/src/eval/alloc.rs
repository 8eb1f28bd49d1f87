//! Heap accounting for memory measurements.
//!
//! Binaries and test targets opt in with
//!
//! ```ignore
//! #[global_allocator]
//! static ALLOC: featseg_core::eval::TrackingAllocator = featseg_core::eval::TrackingAllocator;
//! ```
//!
//! Without that, [`peak_bytes`] and friends return `None`.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);
static ACTIVE: AtomicBool = AtomicBool::new(false);

/// System allocator that keeps live and peak byte counts.
pub struct TrackingAllocator;

fn grow(by: usize) {
    let now = CURRENT.fetch_add(by, Ordering::Relaxed) + by;
    PEAK.fetch_max(now, Ordering::Relaxed);
}

unsafe impl GlobalAlloc for TrackingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            ACTIVE.store(true, Ordering::Relaxed);
            grow(layout.size());
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc_zeroed(layout);
        if !p.is_null() {
            ACTIVE.store(true, Ordering::Relaxed);
            grow(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            if new_size > layout.size() {
                grow(new_size - layout.size());
            } else {
                CURRENT.fetch_sub(layout.size() - new_size, Ordering::Relaxed);
            }
        }
        p
    }
}

pub fn tracking_active() -> bool {
    ACTIVE.load(Ordering::Relaxed)
}

pub fn current_bytes() -> Option<usize> {
    tracking_active().then(|| CURRENT.load(Ordering::Relaxed))
}

pub fn peak_bytes() -> Option<usize> {
    tracking_active().then(|| PEAK.load(Ordering::Relaxed))
}

/// Starts a new measurement window; returns the live bytes at its start.
pub fn reset_peak() -> Option<usize> {
    let now = CURRENT.load(Ordering::Relaxed);
    PEAK.store(now, Ordering::Relaxed);
    tracking_active().then_some(now)
}

/// Runs `f` and reports the peak bytes allocated above the starting level.
pub fn measure_peak<T>(f: impl FnOnce() -> T) -> (T, Option<usize>) {
    let base = reset_peak();
    let out = f();
    let peak = peak_bytes();
    (out, base.zip(peak).map(|(b, p)| p.saturating_sub(b)))
}
