//! Opt-in wall-clock accounting per operation kind. Off by default; when
//! enabled it accumulates per-label totals in a thread-local table.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

static ENABLED: AtomicBool = AtomicBool::new(false);

thread_local! {
    static TOTALS: RefCell<BTreeMap<&'static str, (f64, u64)>> = RefCell::new(BTreeMap::new());
}

pub fn set_enabled(on: bool) {
    ENABLED.store(on, Ordering::Relaxed);
}

pub fn reset() {
    TOTALS.with(|t| t.borrow_mut().clear());
}

pub(crate) struct Span {
    label: &'static str,
    start: Option<Instant>,
}

pub(crate) fn span(label: &'static str) -> Span {
    let start = ENABLED.load(Ordering::Relaxed).then(Instant::now);
    Span { label, start }
}

impl Drop for Span {
    fn drop(&mut self) {
        if let Some(start) = self.start {
            let dt = start.elapsed().as_secs_f64();
            TOTALS.with(|t| {
                let mut map = t.borrow_mut();
                let e = map.entry(self.label).or_insert((0.0, 0));
                e.0 += dt;
                e.1 += 1;
            });
        }
    }
}

/// Per-label (seconds, calls) sorted by descending time.
pub fn report() -> Vec<(&'static str, f64, u64)> {
    TOTALS.with(|t| {
        let mut rows: Vec<(&'static str, f64, u64)> =
            t.borrow().iter().map(|(k, (s, c))| (*k, *s, *c)).collect();
        rows.sort_by(|a, b| b.1.total_cmp(&a.1));
        rows
    })
}
