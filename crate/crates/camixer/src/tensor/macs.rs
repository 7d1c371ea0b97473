//! Multiply-accumulate counter for instrumented forward passes.
//!
//! Every tensor op that performs contractions reports its MAC count here once
//! per call. Counts can be attributed to a named scope (e.g. "attention") via
//! [`scope`]; scopes nest, with the innermost label winning.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Mutex;

static TOTAL: AtomicU64 = AtomicU64::new(0);
static ELEMENTWISE: AtomicBool = AtomicBool::new(false);
static BY_LABEL: Mutex<BTreeMap<&'static str, u64>> = Mutex::new(BTreeMap::new());

thread_local! {
    static LABEL_STACK: std::cell::RefCell<Vec<&'static str>> = const { std::cell::RefCell::new(Vec::new()) };
}

/// Record `n` multiply-accumulates under the current scope.
pub fn add(n: u64) {
    TOTAL.fetch_add(n, Ordering::Relaxed);
    let label = LABEL_STACK.with(|s| s.borrow().last().copied());
    if let Some(label) = label {
        *BY_LABEL.lock().unwrap().entry(label).or_insert(0) += n;
    }
}

/// Record elementwise multiplies only when opted in; excluded by default to
/// match the convention of counting contraction MACs.
pub fn add_elementwise(n: u64) {
    if ELEMENTWISE.load(Ordering::Relaxed) {
        add(n);
    }
}

pub fn set_count_elementwise(on: bool) {
    ELEMENTWISE.store(on, Ordering::Relaxed);
}

pub fn reset() {
    TOTAL.store(0, Ordering::Relaxed);
    BY_LABEL.lock().unwrap().clear();
}

pub fn total() -> u64 {
    TOTAL.load(Ordering::Relaxed)
}

pub fn labeled(label: &str) -> u64 {
    BY_LABEL.lock().unwrap().get(label).copied().unwrap_or(0)
}

pub fn snapshot() -> BTreeMap<String, u64> {
    BY_LABEL
        .lock()
        .unwrap()
        .iter()
        .map(|(k, v)| (k.to_string(), *v))
        .collect()
}

/// Run `f` with MACs attributed to `label`.
pub fn scope<R>(label: &'static str, f: impl FnOnce() -> R) -> R {
    LABEL_STACK.with(|s| s.borrow_mut().push(label));
    let out = f();
    LABEL_STACK.with(|s| {
        s.borrow_mut().pop();
    });
    out
}
