//! Index-ordered fan-out used by evaluation and gradient checking.
//!
//! With the `parallel` feature the work is spread over the rayon pool;
//! without it (or through [`map_sequential`]) it runs in order on the
//! calling thread. Either way the output vector is ordered by index, so
//! reductions over it do not depend on completion order.

/// Map `f` over `0..n`, in parallel when the `parallel` feature is on.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_sequential(n, f)
    }
}

/// Sequential reference path; always available.
pub fn map_sequential<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Which execution path a fan-out should take.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Exec {
    Sequential,
    #[default]
    Auto,
}

impl Exec {
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            Exec::Sequential => map_sequential(n, f),
            Exec::Auto => map_indexed(n, f),
        }
    }
}
