//! Accounting of tensor buffer allocations.
//!
//! Every tensor buffer registers its size on creation and unregisters on drop.
//! Counters are per thread, so concurrently running tests and benchmarks do
//! not observe each other's allocations.

use std::cell::Cell;

thread_local! {
    static LIVE_BYTES: Cell<i64> = const { Cell::new(0) };
    static PEAK_BYTES: Cell<i64> = const { Cell::new(0) };
    static LIVE_BUFFERS: Cell<i64> = const { Cell::new(0) };
    static PEAK_BUFFERS: Cell<i64> = const { Cell::new(0) };
}

pub(crate) fn track_alloc(bytes: usize) {
    LIVE_BYTES.with(|live| {
        let now = live.get() + bytes as i64;
        live.set(now);
        PEAK_BYTES.with(|peak| peak.set(peak.get().max(now)));
    });
    LIVE_BUFFERS.with(|live| {
        let now = live.get() + 1;
        live.set(now);
        PEAK_BUFFERS.with(|peak| peak.set(peak.get().max(now)));
    });
}

pub(crate) fn track_free(bytes: usize) {
    LIVE_BYTES.with(|live| live.set(live.get() - bytes as i64));
    LIVE_BUFFERS.with(|live| live.set(live.get() - 1));
}

/// Snapshot of the tensor allocation counters on the current thread.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AllocStats {
    pub live_bytes: i64,
    pub peak_bytes: i64,
    pub live_buffers: i64,
    pub peak_buffers: i64,
}

pub fn stats() -> AllocStats {
    AllocStats {
        live_bytes: LIVE_BYTES.with(Cell::get),
        peak_bytes: PEAK_BYTES.with(Cell::get),
        live_buffers: LIVE_BUFFERS.with(Cell::get),
        peak_buffers: PEAK_BUFFERS.with(Cell::get),
    }
}

/// Reset the peak counters to the current live values.
pub fn reset_peak() {
    PEAK_BYTES.with(|peak| peak.set(LIVE_BYTES.with(Cell::get)));
    PEAK_BUFFERS.with(|peak| peak.set(LIVE_BUFFERS.with(Cell::get)));
}

/// Run `f` and report the peak number of bytes and buffers allocated on top
/// of what was live when it started.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, AllocStats) {
    let before = stats();
    reset_peak();
    let out = f();
    let after = stats();
    let delta = AllocStats {
        live_bytes: after.live_bytes - before.live_bytes,
        peak_bytes: after.peak_bytes - before.live_bytes,
        live_buffers: after.live_buffers - before.live_buffers,
        peak_buffers: after.peak_buffers - before.live_buffers,
    };
    // keep the enclosing peak meaningful
    PEAK_BYTES.with(|peak| peak.set(peak.get().max(before.peak_bytes)));
    PEAK_BUFFERS.with(|peak| peak.set(peak.get().max(before.peak_buffers)));
    (out, delta)
}
