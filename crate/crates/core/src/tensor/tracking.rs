//! Byte accounting for tensor buffers.
//!
//! Every tensor registers its buffer size on creation and releases it on drop.
//! Counters are per thread, so a measurement only sees allocations made by the
//! thread that runs the measured code.

use std::cell::Cell;

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

pub(crate) fn record_alloc(bytes: usize) {
    LIVE.with(|live| {
        let now = live.get() + bytes;
        live.set(now);
        PEAK.with(|peak| {
            if now > peak.get() {
                peak.set(now);
            }
        });
    });
}

pub(crate) fn record_free(bytes: usize) {
    LIVE.with(|live| live.set(live.get().saturating_sub(bytes)));
}

/// Bytes currently held by tensors created on this thread.
pub fn live_bytes() -> usize {
    LIVE.with(Cell::get)
}

/// High-water mark of [`live_bytes`] since the last [`reset_peak`].
pub fn peak_bytes() -> usize {
    PEAK.with(Cell::get)
}

/// Restarts the high-water mark from the current live total.
pub fn reset_peak() {
    let live = live_bytes();
    PEAK.with(|peak| peak.set(live));
}

/// Measures the extra bytes a closure keeps live at its high-water mark,
/// relative to what was live when it started.
pub fn measure_peak<T>(f: impl FnOnce() -> T) -> (T, usize) {
    let outer_peak = peak_bytes();
    let base = live_bytes();
    reset_peak();
    let out = f();
    let extra = peak_bytes().saturating_sub(base);
    PEAK.with(|peak| peak.set(peak.get().max(outer_peak)));
    (out, extra)
}
