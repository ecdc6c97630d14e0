//! Byte-level allocation accounting.
//!
//! [`CountingAllocator`] wraps the system allocator and tracks live and
//! peak allocated bytes. Binaries that want measurements register it:
//!
//! ```ignore
//! #[global_allocator]
//! static ALLOC: diffcast_core::memstats::CountingAllocator = CountingAllocator::new();
//! ```
//!
//! Scaling benchmarks read the peak counter instead of OS RSS so the
//! measurement isolates the model's own footprint from runtime noise.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicUsize, Ordering};

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

pub struct CountingAllocator;

impl CountingAllocator {
    pub const fn new() -> Self {
        CountingAllocator
    }
}

impl Default for CountingAllocator {
    fn default() -> Self {
        Self::new()
    }
}

fn on_alloc(size: usize) {
    let now = CURRENT.fetch_add(size, Ordering::Relaxed) + size;
    PEAK.fetch_max(now, Ordering::Relaxed);
}

fn on_dealloc(size: usize) {
    CURRENT.fetch_sub(size, Ordering::Relaxed);
}

unsafe impl GlobalAlloc for CountingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let ptr = System.alloc(layout);
        if !ptr.is_null() {
            on_alloc(layout.size());
        }
        ptr
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        on_dealloc(layout.size());
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let new_ptr = System.realloc(ptr, layout, new_size);
        if !new_ptr.is_null() {
            on_dealloc(layout.size());
            on_alloc(new_size);
        }
        new_ptr
    }
}

/// Live allocated bytes right now.
pub fn current_bytes() -> usize {
    CURRENT.load(Ordering::Relaxed)
}

/// High-water mark since the last [`reset_peak`].
pub fn peak_bytes() -> usize {
    PEAK.load(Ordering::Relaxed)
}

/// Sets the peak back to the current live figure.
pub fn reset_peak() {
    PEAK.store(CURRENT.load(Ordering::Relaxed), Ordering::Relaxed);
}

/// Runs `f` and reports the extra peak bytes it allocated beyond the live
/// baseline at entry. Meaningful only when the counting allocator is the
/// registered global allocator and nothing else allocates concurrently.
pub fn measure_peak<R>(f: impl FnOnce() -> R) -> (R, usize) {
    let baseline = current_bytes();
    reset_peak();
    let result = f();
    let peak = peak_bytes();
    (result, peak.saturating_sub(baseline))
}
