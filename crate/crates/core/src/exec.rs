//! Row-parallel execution helpers.
//!
//! With the `parallel` feature (default) rows are processed on the rayon
//! pool; without it the same closures run sequentially. Every helper writes
//! each output row from exactly one closure invocation, so results do not
//! depend on thread count or scheduling.

use ndarray::{Array2, ArrayViewMut1, Axis};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `0..len` to a vector, preserving index order.
pub fn map_indices<T, F>(len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..len).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..len).map(f).collect()
    }
}

/// Visit every row of `mat` mutably together with its row index.
pub fn for_each_row_mut<F>(mat: &mut Array2<f64>, f: F)
where
    F: Fn(usize, ArrayViewMut1<'_, f64>) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        mat.axis_iter_mut(Axis(0))
            .into_par_iter()
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    }
    #[cfg(not(feature = "parallel"))]
    {
        mat.axis_iter_mut(Axis(0))
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    }
}

/// Whether this build runs rows on the rayon pool.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
