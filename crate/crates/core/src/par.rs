//! Data-parallel map helpers. With the `parallel` feature (default) the maps
//! run on rayon's pool; without it they fall back to plain sequential
//! iteration so the crate builds without a thread-pool dependency.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub(crate) fn map_slice<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}
