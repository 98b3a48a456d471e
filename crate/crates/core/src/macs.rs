//! Thread-local tally of the multiply-accumulates actually executed by
//! the matrix kernels. Used to check the analytical counts in
//! [`crate::planner`] against a real forward pass.

use std::cell::Cell;

thread_local! {
    static TALLY: Cell<Option<u64>> = const { Cell::new(None) };
}

pub(crate) fn record(count: u64) {
    TALLY.with(|t| {
        if let Some(v) = t.get() {
            t.set(Some(v + count));
        }
    });
}

/// Runs `f` with counting enabled on this thread and returns its result
/// together with the number of multiply-accumulates performed inside it.
/// Nested calls are not supported; the inner call resets the count.
pub fn tally<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let previous = TALLY.with(|t| t.replace(Some(0)));
    let out = f();
    let count = TALLY.with(|t| t.replace(previous)).unwrap_or(0);
    (out, count)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_only_inside_scope() {
        record(5);
        let ((), n) = tally(|| {
            record(3);
            record(4);
        });
        assert_eq!(n, 7);
    }
}
