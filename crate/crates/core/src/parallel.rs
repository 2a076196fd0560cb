//! Data-parallel map with a deterministic, order-preserving contract.
//!
//! With the `parallel` feature (the default) the maps run on rayon; without
//! it they degrade to plain sequential iteration. Results are collected in
//! input order and every reduction downstream happens over that ordered
//! collection, so parallel and sequential execution produce bit-identical
//! results. [`force_sequential`] flips the rayon path off at runtime, which
//! is what the comparison benches and the parity test use.

use std::sync::atomic::{AtomicBool, Ordering};

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Globally disable the rayon path (no-op when the `parallel` feature is off).
pub fn force_sequential(on: bool) {
    FORCE_SEQUENTIAL.store(on, Ordering::SeqCst);
}

pub fn is_sequential() -> bool {
    !cfg!(feature = "parallel") || FORCE_SEQUENTIAL.load(Ordering::SeqCst)
}

/// Map over a slice, preserving input order in the output.
#[cfg(feature = "parallel")]
pub fn ordered_map<T: Sync, R: Send, F: Fn(&T) -> R + Sync + Send>(items: &[T], f: F) -> Vec<R> {
    use rayon::prelude::*;
    if FORCE_SEQUENTIAL.load(Ordering::Relaxed) {
        items.iter().map(f).collect()
    } else {
        items.par_iter().map(f).collect()
    }
}

#[cfg(not(feature = "parallel"))]
pub fn ordered_map<T: Sync, R: Send, F: Fn(&T) -> R + Sync + Send>(items: &[T], f: F) -> Vec<R> {
    items.iter().map(f).collect()
}

/// Map over an index range, preserving index order in the output.
#[cfg(feature = "parallel")]
pub fn ordered_map_indices<R: Send, F: Fn(usize) -> R + Sync + Send>(n: usize, f: F) -> Vec<R> {
    use rayon::prelude::*;
    if FORCE_SEQUENTIAL.load(Ordering::Relaxed) {
        (0..n).map(f).collect()
    } else {
        (0..n).into_par_iter().map(f).collect()
    }
}

#[cfg(not(feature = "parallel"))]
pub fn ordered_map_indices<R: Send, F: Fn(usize) -> R + Sync + Send>(n: usize, f: F) -> Vec<R> {
    (0..n).map(f).collect()
}
