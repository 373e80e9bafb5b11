//! Fault injection for the gradient-check harness.
//!
//! While a fault is armed for an op name, every gradient that op's backward
//! rule produces is scaled by [`CORRUPTION_FACTOR`]. This exists so the
//! harness can prove it notices a wrong backward rule.

use std::cell::RefCell;

use super::Float;

pub const CORRUPTION_FACTOR: f64 = 1.25;

thread_local! {
    static ARMED: RefCell<Option<String>> = const { RefCell::new(None) };
}

/// Runs `f` with the backward rule of `op` corrupted on this thread.
pub fn with_fault<R>(op: &str, f: impl FnOnce() -> R) -> R {
    struct Disarm(Option<String>);
    impl Drop for Disarm {
        fn drop(&mut self) {
            ARMED.with(|a| *a.borrow_mut() = self.0.take());
        }
    }
    let previous = ARMED.with(|a| a.borrow_mut().replace(op.to_string()));
    let _disarm = Disarm(previous);
    f()
}

pub fn armed() -> Option<String> {
    ARMED.with(|a| a.borrow().clone())
}

pub(super) fn apply<T: Float>(op: &str, grads: &mut [Option<Vec<T>>]) {
    let hit = ARMED.with(|a| a.borrow().as_deref() == Some(op));
    if !hit {
        return;
    }
    let factor = T::lit(CORRUPTION_FACTOR);
    for g in grads.iter_mut().flatten() {
        g.iter_mut().for_each(|v| *v *= factor);
    }
}
