//! Per-node fan-out that uses rayon when available and requested.

use crate::config::Execution;

/// Maps `f` over `items`, preserving order.
pub(crate) fn map<T, R, F>(exec: Execution, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec == Execution::Parallel && items.len() > 1 {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    let _ = exec;
    items.iter().map(f).collect()
}

/// Like [`map`] but consumes per-item inputs.
pub(crate) fn map_with<T, I, R, F>(exec: Execution, items: &[T], inputs: Vec<I>, f: F) -> Vec<R>
where
    T: Sync,
    I: Send,
    R: Send,
    F: Fn(&T, I) -> R + Sync + Send,
{
    debug_assert_eq!(items.len(), inputs.len());
    #[cfg(feature = "parallel")]
    if exec == Execution::Parallel && items.len() > 1 {
        use rayon::prelude::*;
        return items
            .par_iter()
            .zip(inputs.into_par_iter())
            .map(|(t, i)| f(t, i))
            .collect();
    }
    let _ = exec;
    items.iter().zip(inputs).map(|(t, i)| f(t, i)).collect()
}
