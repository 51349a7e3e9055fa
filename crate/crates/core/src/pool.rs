//! Exploration data pool with per-entry lifetimes.
//!
//! Every pushed `(context, action, reward)` triple starts with lifetime `L` and
//! loses one unit per training episode; it is trainable in the episode it was
//! pushed and the `L - 1` episodes after that.

use serde::{Deserialize, Serialize};

use crate::types::TokenId;

pub const DEFAULT_LIFETIME: u32 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    /// Prefix plus every token generated before `action`.
    pub context: Vec<TokenId>,
    pub action: TokenId,
    pub raw_reward: f64,
    /// Set by a shaping pass; cleared at the end of every episode.
    pub shaped_reward: Option<f64>,
    pub lifetime: u32,
    /// Episode counter value at insertion.
    pub born: u64,
}

#[derive(Clone, Debug)]
pub struct DataPool {
    entries: Vec<PoolEntry>,
    episode: u64,
    lifetime_init: Option<u32>,
}

impl DataPool {
    /// # Panics
    /// If `lifetime` is zero.
    pub fn new(lifetime: u32) -> Self {
        assert!(lifetime > 0, "pool lifetime must be positive");
        Self {
            entries: Vec::new(),
            episode: 0,
            lifetime_init: Some(lifetime),
        }
    }

    /// A pool whose entries never expire.
    pub fn unbounded() -> Self {
        Self {
            entries: Vec::new(),
            episode: 0,
            lifetime_init: None,
        }
    }

    pub fn push(&mut self, context: Vec<TokenId>, action: TokenId, raw_reward: f64) {
        self.entries.push(PoolEntry {
            context,
            action,
            raw_reward,
            shaped_reward: None,
            lifetime: self.lifetime_init.unwrap_or(u32::MAX),
            born: self.episode,
        });
    }

    /// Ends the current episode: decrements every lifetime, evicts entries that
    /// reach zero, and returns how many were evicted.
    pub fn tick(&mut self) -> usize {
        let before = self.entries.len();
        if self.lifetime_init.is_some() {
            for e in &mut self.entries {
                e.lifetime -= 1;
            }
            self.entries.retain(|e| e.lifetime > 0);
        }
        for e in &mut self.entries {
            e.shaped_reward = None;
        }
        self.episode += 1;
        before - self.entries.len()
    }

    /// Raw rewards of every live entry, in insertion order.
    pub fn snapshot_rewards(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.raw_reward).collect()
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [PoolEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn episode(&self) -> u64 {
        self.episode
    }

    pub fn lifetime_init(&self) -> Option<u32> {
        self.lifetime_init
    }
}
