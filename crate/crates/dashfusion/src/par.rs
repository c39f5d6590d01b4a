//! Data-parallel helpers with a sequential fallback.
//!
//! All entry points are order-preserving: `map_indexed(n, f)[i] == f(i)`
//! regardless of thread count, so results are bitwise identical whether or
//! not the `parallel` feature is enabled. Only embarrassingly parallel work
//! goes through here (dataset generation, read-only evaluation fan-out,
//! finite-difference coordinates); training steps stay single-threaded on
//! one tape.

/// Map `f` over `0..n`, in parallel when the `parallel` feature is enabled.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    map_indexed_par(n, f)
}

/// Map `f` over `0..n` sequentially (fallback build).
#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    map_indexed_seq(n, f)
}

/// Sequential reference path; always available for benchmarks and tests.
pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Rayon path, exported so benchmarks can compare it against the
/// sequential one inside a single build.
#[cfg(feature = "parallel")]
pub fn map_indexed_par<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_preserved() {
        let got = map_indexed(100, |i| i * i);
        let want: Vec<usize> = (0..100).map(|i| i * i).collect();
        assert_eq!(got, want);
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn par_matches_seq() {
        let a = map_indexed_par(257, |i| (i as f64).sin());
        let b = map_indexed_seq(257, |i| (i as f64).sin());
        assert_eq!(a, b);
    }
}
