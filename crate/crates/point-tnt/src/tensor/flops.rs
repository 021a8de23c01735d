//! Op-counting hook for the tensor core.
//!
//! When a counter is active, every forward op records its cost under the
//! innermost active scope label. The analytical cost model in
//! [`crate::analysis`] uses the same per-element constants, and an
//! integration test checks that an instrumented forward pass matches the
//! closed-form count exactly, component by component.

use std::cell::RefCell;
use std::collections::BTreeMap;

/// FLOP convention shared by the hook and the analytical model.
/// One multiply-accumulate counts as 2 FLOPs; element-wise costs below.
pub mod cost {
    pub const SOFTMAX_PER_ELEM: u64 = 5;
    pub const LAYER_NORM_PER_ELEM: u64 = 8;
    pub const GELU_PER_ELEM: u64 = 8;
    pub const BATCH_NORM_EVAL_PER_ELEM: u64 = 4;
    pub const BATCH_NORM_TRAIN_PER_ELEM: u64 = 8;
    pub const DROPOUT_TRAIN_PER_ELEM: u64 = 2;
    /// sum-of-squares (2/elem) + divide (1/elem); per-row sqrt counted via
    /// [`l2_normalize_flops`].
    pub const L2_NORM_PER_ELEM: u64 = 3;
    pub const L2_NORM_PER_ROW: u64 = 2;

    pub fn matmul_flops(m: usize, k: usize, p: usize) -> u64 {
        2 * m as u64 * k as u64 * p as u64
    }

    pub fn l2_normalize_flops(rows: usize, cols: usize) -> u64 {
        rows as u64 * cols as u64 * L2_NORM_PER_ELEM + rows as u64 * L2_NORM_PER_ROW
    }
}

struct CounterState {
    by_scope: BTreeMap<String, u64>,
    /// Dotted join of the active scope stack, e.g. `"local.mlp"`.
    path: String,
    depths: Vec<usize>,
}

thread_local! {
    static COUNTER: RefCell<Option<CounterState>> = const { RefCell::new(None) };
}

/// Forward-op FLOPs grouped by dotted scope path.
#[derive(Debug, Clone, Default)]
pub struct FlopCount {
    pub by_scope: BTreeMap<String, u64>,
}

impl FlopCount {
    pub fn total(&self) -> u64 {
        self.by_scope.values().sum()
    }

    pub fn get(&self, scope: &str) -> u64 {
        self.by_scope.get(scope).copied().unwrap_or(0)
    }

    /// Sum over every path equal to `prefix` or nested under it.
    pub fn get_prefix(&self, prefix: &str) -> u64 {
        self.by_scope
            .iter()
            .filter(|(k, _)| {
                k.as_str() == prefix
                    || (k.starts_with(prefix) && k.as_bytes().get(prefix.len()) == Some(&b'.'))
            })
            .map(|(_, v)| v)
            .sum()
    }

    /// Sum over every path whose final segment is `leaf`.
    pub fn get_leaf(&self, leaf: &str) -> u64 {
        self.by_scope
            .iter()
            .filter(|(k, _)| {
                k.as_str() == leaf || k.ends_with(&format!(".{leaf}"))
            })
            .map(|(_, v)| v)
            .sum()
    }
}

/// Starts counting on this thread (resets any previous count).
pub fn start() {
    COUNTER.with(|c| {
        *c.borrow_mut() = Some(CounterState {
            by_scope: BTreeMap::new(),
            path: String::new(),
            depths: Vec::new(),
        })
    });
}

/// Stops counting and returns the totals.
pub fn stop() -> FlopCount {
    COUNTER.with(|c| match c.borrow_mut().take() {
        Some(state) => FlopCount {
            by_scope: state.by_scope,
        },
        None => FlopCount::default(),
    })
}

/// Charges `flops` to the current scope path (or `"unscoped"`).
#[inline]
pub(crate) fn record(flops: u64) {
    COUNTER.with(|c| {
        if let Some(state) = c.borrow_mut().as_mut() {
            let key = if state.path.is_empty() {
                "unscoped".to_string()
            } else {
                state.path.clone()
            };
            *state.by_scope.entry(key).or_insert(0) += flops;
        }
    });
}

/// RAII guard appending a segment to the scope path while it lives.
pub struct ScopeGuard {
    active: bool,
}

pub fn scope(label: &'static str) -> ScopeGuard {
    let active = COUNTER.with(|c| {
        if let Some(state) = c.borrow_mut().as_mut() {
            let before = state.path.len();
            if !state.path.is_empty() {
                state.path.push('.');
            }
            state.path.push_str(label);
            state.depths.push(before);
            true
        } else {
            false
        }
    });
    ScopeGuard { active }
}

impl Drop for ScopeGuard {
    fn drop(&mut self) {
        if self.active {
            COUNTER.with(|c| {
                if let Some(state) = c.borrow_mut().as_mut() {
                    if let Some(before) = state.depths.pop() {
                        state.path.truncate(before);
                    }
                }
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn matmul_records_2mnp() {
        start();
        let a = Tensor::<f32>::zeros(&[3, 4]);
        let b = Tensor::<f32>::zeros(&[4, 2]);
        let _ = a.matmul(&b).unwrap();
        let count = stop();
        assert_eq!(count.total(), 2 * 3 * 4 * 2);
    }

    #[test]
    fn scopes_attribute_costs() {
        start();
        let a = Tensor::<f32>::zeros(&[2, 2]);
        {
            let _g = scope("left");
            let _ = a.matmul(&a).unwrap();
            let _h = scope("inner");
            let _ = a.add(&a).unwrap();
        }
        {
            let _g = scope("right");
            let _ = a.add(&a).unwrap();
        }
        let count = stop();
        assert_eq!(count.get("left"), 16);
        assert_eq!(count.get("left.inner"), 4);
        assert_eq!(count.get_prefix("left"), 20);
        assert_eq!(count.get_leaf("inner"), 4);
        assert_eq!(count.get("right"), 4);
        assert_eq!(count.total(), 24);
    }

    #[test]
    fn inactive_counter_is_free() {
        let a = Tensor::<f32>::zeros(&[2, 2]);
        let _ = a.matmul(&a).unwrap();
        let count = stop();
        assert_eq!(count.total(), 0);
    }
}
