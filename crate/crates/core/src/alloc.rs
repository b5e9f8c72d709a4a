//! Process-wide accounting of tensor payload bytes.
//!
//! Every [`Tensor`](crate::tensor::Tensor) reports its payload on creation and
//! on drop. Scratch buffers inside kernels and bookkeeping are not counted.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocStats {
    pub current_bytes: usize,
    pub peak_bytes: usize,
}

pub(crate) fn record_alloc(bytes: usize) {
    if bytes == 0 {
        return;
    }
    let now = CURRENT.fetch_add(bytes, Ordering::Relaxed) + bytes;
    PEAK.fetch_max(now, Ordering::Relaxed);
}

pub(crate) fn record_free(bytes: usize) {
    if bytes == 0 {
        return;
    }
    // Saturate instead of wrapping if a counter was reset underneath us.
    let _ = CURRENT.fetch_update(Ordering::Relaxed, Ordering::Relaxed, |cur| {
        Some(cur.saturating_sub(bytes))
    });
}

pub fn stats() -> AllocStats {
    let current_bytes = CURRENT.load(Ordering::Relaxed);
    let peak_bytes = PEAK.load(Ordering::Relaxed).max(current_bytes);
    AllocStats {
        current_bytes,
        peak_bytes,
    }
}

/// Starts a new measurement scope: the high-water mark drops to the bytes
/// currently live.
pub fn reset_peak() {
    let cur = CURRENT.load(Ordering::Relaxed);
    PEAK.store(cur, Ordering::Relaxed);
}
