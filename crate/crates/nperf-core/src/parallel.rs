//! Deterministic data-parallel helpers.
//!
//! Work is split into fixed-size chunks whose boundaries depend only on the
//! input length, never on the worker count. Each chunk is processed
//! sequentially and results are returned in chunk order, so any reduction the
//! caller performs is bit-identical for 1 or N threads.

use std::sync::atomic::{AtomicUsize, Ordering};

/// Worker count: `NPERF_THREADS` if set and nonzero, else available parallelism.
pub fn worker_count() -> usize {
    if let Ok(v) = std::env::var("NPERF_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            if n >= 1 {
                return n;
            }
        }
    }
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

/// Maps `f` over fixed chunks of `0..len` on `threads` workers and returns
/// the per-chunk outputs in chunk order.
///
/// `chunk_size` controls the work granularity and is part of the deterministic
/// contract: results for a given (`len`, `chunk_size`) are identical for any
/// `threads >= 1`.
pub fn map_chunks<R, F>(len: usize, chunk_size: usize, threads: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(std::ops::Range<usize>) -> R + Sync,
{
    assert!(chunk_size >= 1);
    let n_chunks = len.div_ceil(chunk_size);
    if n_chunks == 0 {
        return Vec::new();
    }
    let threads = threads.max(1).min(n_chunks);
    if threads == 1 {
        return (0..n_chunks)
            .map(|c| f(c * chunk_size..((c + 1) * chunk_size).min(len)))
            .collect();
    }

    let mut slots: Vec<Option<R>> = (0..n_chunks).map(|_| None).collect();
    let next = AtomicUsize::new(0);
    let slot_ptr = SlotPtr(slots.as_mut_ptr());
    std::thread::scope(|scope| {
        for _ in 0..threads {
            let f = &f;
            let next = &next;
            let slot_ptr = &slot_ptr;
            scope.spawn(move || loop {
                let c = next.fetch_add(1, Ordering::Relaxed);
                if c >= n_chunks {
                    break;
                }
                let out = f(c * chunk_size..((c + 1) * chunk_size).min(len));
                // Safety: each chunk index is claimed by exactly one worker,
                // so no two threads write the same slot.
                unsafe { *slot_ptr.0.add(c) = Some(out) };
            });
        }
    });
    slots.into_iter().map(|s| s.expect("chunk completed")).collect()
}

struct SlotPtr<R>(*mut Option<R>);
unsafe impl<R: Send> Sync for SlotPtr<R> {}
