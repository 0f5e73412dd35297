//! Data-parallel map over an index range, sequential without the `parallel`
//! feature. Output order always follows the index order.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub(crate) fn map_indices<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}
