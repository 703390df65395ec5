//! Data-parallel map helpers.
//!
//! The `parallel` feature routes batch-shaped work through rayon; the
//! sequential fallback produces identical results because all callers are
//! pure per-item functions and outputs are collected in index order.
//! The explicit `*_seq` / `*_par` variants exist so the bench suite can
//! compare both paths in a single build.

/// Sequential map, always available.
pub fn map_seq<T, U>(items: &[T], f: impl Fn(&T) -> U) -> Vec<U> {
    items.iter().map(f).collect()
}

/// Sequential indexed map.
pub fn map_enumerate_seq<T, U>(items: &[T], f: impl Fn(usize, &T) -> U) -> Vec<U> {
    items.iter().enumerate().map(|(i, x)| f(i, x)).collect()
}

/// Parallel map; output order matches input order.
#[cfg(feature = "parallel")]
pub fn map_par<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync + Send) -> Vec<U> {
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

/// Parallel indexed map; output order matches input order.
#[cfg(feature = "parallel")]
pub fn map_enumerate_par<T: Sync, U: Send>(
    items: &[T],
    f: impl Fn(usize, &T) -> U + Sync + Send,
) -> Vec<U> {
    use rayon::prelude::*;
    items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()
}

/// Feature-dispatched map.
pub fn map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync + Send) -> Vec<U> {
    #[cfg(feature = "parallel")]
    {
        map_par(items, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_seq(items, f)
    }
}

/// Feature-dispatched indexed map.
pub fn map_enumerate<T: Sync, U: Send>(items: &[T], f: impl Fn(usize, &T) -> U + Sync + Send) -> Vec<U> {
    #[cfg(feature = "parallel")]
    {
        map_enumerate_par(items, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_enumerate_seq(items, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_matches_sequential() {
        let xs: Vec<u64> = (0..257).collect();
        let f = |x: &u64| x.wrapping_mul(0x9E37).rotate_left(13);
        assert_eq!(map(&xs, f), map_seq(&xs, f));
        let g = |i: usize, x: &u64| (i as u64) ^ *x;
        assert_eq!(map_enumerate(&xs, g), map_enumerate_seq(&xs, g));
    }
}
