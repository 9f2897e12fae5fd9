//! Thread-local instrumentation: live activation bytes and analytic FLOP counts.
//!
//! Every tracked [`Tensor`](super::Tensor) registers its buffer size on creation
//! and releases it on drop. Parameters, gradients held by parameters and
//! optimizer moments are untracked. Kernels add their closed-form operation
//! count to the FLOP counter.

use std::cell::Cell;

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static HIGH_WATER: Cell<usize> = const { Cell::new(0) };
    static FLOPS: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn acquire(bytes: usize) {
    LIVE.with(|live| {
        let now = live.get() + bytes;
        live.set(now);
        HIGH_WATER.with(|hw| {
            if now > hw.get() {
                hw.set(now);
            }
        });
    });
}

pub(crate) fn release(bytes: usize) {
    LIVE.with(|live| {
        let cur = live.get();
        debug_assert!(cur >= bytes, "meter underflow: {cur} < {bytes}");
        live.set(cur.saturating_sub(bytes));
    });
}

/// Bytes held by tracked tensors on this thread right now.
pub fn live_bytes() -> usize {
    LIVE.with(Cell::get)
}

/// Highest live byte count since the last [`reset_high_water`].
pub fn high_water() -> usize {
    HIGH_WATER.with(Cell::get)
}

/// Restarts high-water tracking from the current live count.
pub fn reset_high_water() {
    let now = live_bytes();
    HIGH_WATER.with(|hw| hw.set(now));
}

pub(crate) fn add_flops(n: u64) {
    FLOPS.with(|f| f.set(f.get().wrapping_add(n)));
}

/// Total FLOPs counted on this thread.
pub fn flops() -> u64 {
    FLOPS.with(Cell::get)
}

/// Runs `f` and returns its result with the FLOPs it counted.
pub fn count_flops<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = flops();
    let out = f();
    (out, flops().wrapping_sub(before))
}
