//! Shard execution helpers for the Monte-Carlo paths.
//!
//! Work is split into shards indexed `0..n_shards`; every shard derives its
//! own seeded stream from the shard index, and results are collected in shard
//! order, so the parallel and sequential paths produce identical output.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Runs one closure per shard, in parallel when the `parallel` feature is
/// enabled, collecting results in shard order.
#[cfg(feature = "parallel")]
pub fn map_shards<R, F>(n_shards: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    (0..n_shards).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_shards<R, F>(n_shards: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    map_shards_seq(n_shards, f)
}

/// Sequential shard execution; the fallback path, also used by the benchmark
/// suite as the baseline.
pub fn map_shards_seq<R, F>(n_shards: usize, f: F) -> Vec<R>
where
    F: Fn(usize) -> R,
{
    (0..n_shards).map(f).collect()
}

/// Mixes a shard index into a base seed. Shard 0 keeps the base seed.
pub fn shard_seed(base: u64, shard: u64) -> u64 {
    base ^ shard.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}
