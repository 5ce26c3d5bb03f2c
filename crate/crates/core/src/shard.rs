//! Emulated multi-device batching: a batch is split into `n_shards`
//! contiguous groups of `per_shard` samples, and batch statistics are taken
//! inside each group only.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ShardConfig {
    pub n_shards: usize,
    pub per_shard: usize,
}

impl ShardConfig {
    pub fn new(n_shards: usize, per_shard: usize) -> Result<Self> {
        if n_shards == 0 || per_shard == 0 {
            return Err(Error::Config(format!("shard config ({n_shards},{per_shard}) must have positive counts")));
        }
        Ok(Self { n_shards, per_shard })
    }

    /// A single shard covering the whole batch of `n` samples.
    pub fn single(n: usize) -> Self {
        Self { n_shards: 1, per_shard: n.max(1) }
    }

    pub fn total(&self) -> usize {
        self.n_shards * self.per_shard
    }

    pub fn check_batch(&self, n: usize) -> Result<()> {
        if n != self.total() {
            return Err(Error::Config(format!(
                "batch of {n} samples cannot be split into {} shards of {}",
                self.n_shards, self.per_shard
            )));
        }
        Ok(())
    }

    pub fn shard_of(&self, sample: usize) -> usize {
        sample / self.per_shard
    }
}

impl std::fmt::Display for ShardConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{})", self.n_shards, self.per_shard)
    }
}
