//! Index-parallel map with a sequential fallback.
//!
//! Results always come back in index order, so any reduction performed by
//! the caller over the returned `Vec` is independent of the thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub(crate) fn map_indexed<T, F>(len: usize, parallel: bool, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel && len > 1 {
        return (0..len).into_par_iter().map(f).collect();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = parallel;
    (0..len).map(f).collect()
}

/// Fallible variant: the first error in index order wins.
pub(crate) fn try_map_indexed<T, E, F>(len: usize, parallel: bool, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    map_indexed(len, parallel, f).into_iter().collect()
}

/// Whether the crate was built with the rayon backend.
pub fn parallel_available() -> bool {
    cfg!(feature = "parallel")
}
