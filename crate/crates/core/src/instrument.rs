//! Per-thread multiply-accumulate counters.
//!
//! Kernels report the MACs they execute to the counter of the calling
//! thread. Counting is off unless a [`count_macs`] scope is active, so the
//! hot paths only pay for a thread-local flag check. Each worker thread owns
//! its counters; nothing is shared.

use std::cell::Cell;

/// Cost bucket a kernel's work is attributed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostCategory {
    /// Channel resizing convolutions (the reducer in front of the graph).
    ChannelResize,
    /// Moving features along graph edges or attention weights.
    InfoPropagation,
    /// Every other 1x1 convolution (edge kernels, layer transforms, Q/K/V).
    OtherConv,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MacCounts {
    pub channel_resize: u64,
    pub info_propagation: u64,
    pub other_conv: u64,
}

impl MacCounts {
    pub fn total(&self) -> u64 {
        self.channel_resize + self.info_propagation + self.other_conv
    }
}

thread_local! {
    static ENABLED: Cell<bool> = const { Cell::new(false) };
    static CATEGORY: Cell<CostCategory> = const { Cell::new(CostCategory::OtherConv) };
    static COUNTS: Cell<MacCounts> = const {
        Cell::new(MacCounts { channel_resize: 0, info_propagation: 0, other_conv: 0 })
    };
}

/// Run `f` with counting enabled and return its result with the MACs it
/// executed on this thread.
pub fn count_macs<R>(f: impl FnOnce() -> R) -> (R, MacCounts) {
    let was_enabled = ENABLED.with(|e| e.replace(true));
    let before = COUNTS.with(|c| c.replace(MacCounts::default()));
    let out = f();
    let counted = COUNTS.with(|c| c.get());
    COUNTS.with(|c| {
        let mut restored = before;
        if was_enabled {
            restored.channel_resize += counted.channel_resize;
            restored.info_propagation += counted.info_propagation;
            restored.other_conv += counted.other_conv;
        }
        c.set(restored)
    });
    ENABLED.with(|e| e.set(was_enabled));
    (out, counted)
}

/// Attribute convolutions executed inside `f` to `category`.
pub fn with_category<R>(category: CostCategory, f: impl FnOnce() -> R) -> R {
    let prev = CATEGORY.with(|c| c.replace(category));
    let out = f();
    CATEGORY.with(|c| c.set(prev));
    out
}

#[inline]
pub(crate) fn record_conv(macs: u64) {
    if ENABLED.with(|e| e.get()) {
        let category = CATEGORY.with(|c| c.get());
        record(category, macs);
    }
}

#[inline]
pub(crate) fn record(category: CostCategory, macs: u64) {
    if !ENABLED.with(|e| e.get()) {
        return;
    }
    COUNTS.with(|c| {
        let mut counts = c.get();
        match category {
            CostCategory::ChannelResize => counts.channel_resize += macs,
            CostCategory::InfoPropagation => counts.info_propagation += macs,
            CostCategory::OtherConv => counts.other_conv += macs,
        }
        c.set(counts);
    });
}
