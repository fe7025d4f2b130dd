//! Replication-level parallelism. With the `parallel` feature off every
//! mode runs sequentially.

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parallelism {
    Sequential,
    Threads(usize),
    /// Rayon's global pool.
    #[default]
    Auto,
}

impl Parallelism {
    /// `0` means automatic, `1` sequential, anything else a dedicated pool.
    pub fn from_threads(n: usize) -> Self {
        match n {
            0 => Parallelism::Auto,
            1 => Parallelism::Sequential,
            n => Parallelism::Threads(n),
        }
    }
}

/// Evaluates `f(0), …, f(n - 1)` and returns the results in index order.
pub fn map_indexed<T, F>(n: u64, parallelism: Parallelism, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        match parallelism {
            Parallelism::Sequential => {}
            Parallelism::Auto => return (0..n).into_par_iter().map(&f).collect(),
            Parallelism::Threads(t) => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(t)
                    .build()
                    .map_err(|e| crate::error::QcdError::Io(e.to_string()))?;
                return pool.install(|| (0..n).into_par_iter().map(&f).collect());
            }
        }
    }
    #[cfg(not(feature = "parallel"))]
    let _ = parallelism;
    (0..n).map(f).collect()
}
