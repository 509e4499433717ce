use rustc_hash::FxHashMap;
use serde::Serialize;

use crate::buddy::BlockId;
use crate::rng::DiversityRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CacheKind {
    Allocation,
    Shadow,
}

/// Per-order pool of blocks with randomised insert and remove.
///
/// Removal is swap-remove at a uniform index; insertion appends and then
/// swaps with a uniform index. Shadow caches additionally keep a position
/// index so a specific block (a buddy) can be found and pulled out in O(1),
/// and a running count of buddy pairs so merge scans only run when a pair
/// exists.
#[derive(Debug, Clone)]
pub struct Cache {
    order: u8,
    kind: CacheKind,
    slots: Vec<u32>,
    index: Option<FxHashMap<u32, u32>>,
    pairs: u32,
    lower_bound: u32,
    upper_bound: u32,
    capacity: u32,
}

impl Cache {
    pub fn new(
        order: u8,
        kind: CacheKind,
        lower_bound: u32,
        upper_bound: u32,
        capacity: u32,
    ) -> Self {
        debug_assert!(lower_bound < upper_bound && upper_bound <= capacity);
        let index = match kind {
            CacheKind::Shadow => Some(FxHashMap::default()),
            CacheKind::Allocation => None,
        };
        Self {
            order,
            kind,
            slots: Vec::with_capacity(capacity as usize),
            index,
            pairs: 0,
            lower_bound,
            upper_bound,
            capacity,
        }
    }

    pub fn order(&self) -> u8 {
        self.order
    }

    pub fn kind(&self) -> CacheKind {
        self.kind
    }

    pub fn lower_bound(&self) -> u32 {
        self.lower_bound
    }

    pub fn upper_bound(&self) -> u32 {
        self.upper_bound
    }

    pub fn capacity(&self) -> u32 {
        self.capacity
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Occupancy has reached the upper threshold.
    #[inline]
    pub fn at_upper_bound(&self) -> bool {
        self.slots.len() >= self.upper_bound as usize
    }

    /// Buddy pairs currently co-resident (shadow caches only; zero otherwise).
    pub fn buddy_pairs(&self) -> u32 {
        self.pairs
    }

    pub fn blocks(&self) -> impl Iterator<Item = BlockId> + '_ {
        let order = self.order;
        self.slots.iter().map(move |&n| BlockId::new(n, order))
    }

    pub fn contains(&self, block: BlockId) -> bool {
        if block.order != self.order {
            return false;
        }
        match &self.index {
            Some(index) => index.contains_key(&block.number),
            None => self.slots.contains(&block.number),
        }
    }

    /// Inserts at a uniformly random slot and returns that slot.
    pub fn insert_random(&mut self, block: BlockId, rng: &mut DiversityRng) -> usize {
        debug_assert_eq!(block.order, self.order);
        debug_assert!(self.slots.len() < self.capacity as usize, "cache overflow");
        let last = self.slots.len();
        self.slots.push(block.number);
        let slot = rng.below(last + 1);
        self.slots.swap(slot, last);
        if let Some(index) = &mut self.index {
            if index.contains_key(&block.buddy().number) {
                self.pairs += 1;
            }
            index.insert(self.slots[last], last as u32);
            index.insert(block.number, slot as u32);
        }
        slot
    }

    /// Removes a uniformly random slot, returning the slot and its block.
    pub fn remove_random(&mut self, rng: &mut DiversityRng) -> Option<(usize, BlockId)> {
        if self.slots.is_empty() {
            return None;
        }
        let slot = rng.below(self.slots.len());
        let block = self.take_slot(slot);
        Some((slot, block))
    }

    /// Removes a specific block if present.
    pub fn remove(&mut self, block: BlockId) -> bool {
        if block.order != self.order {
            return false;
        }
        let slot = match &self.index {
            Some(index) => index.get(&block.number).map(|&s| s as usize),
            None => self.slots.iter().position(|&n| n == block.number),
        };
        match slot {
            Some(slot) => {
                self.take_slot(slot);
                true
            }
            None => false,
        }
    }

    /// Pulls every co-resident buddy pair out of the cache and returns the
    /// merged parents in slot order of their lower halves.
    pub fn take_buddy_pairs(&mut self) -> Vec<BlockId> {
        if self.pairs == 0 {
            return Vec::new();
        }
        let order = self.order;
        let parents: Vec<BlockId> = self
            .slots
            .iter()
            .map(|&n| BlockId::new(n, order))
            .filter(|b| b.number < b.buddy().number && self.contains(b.buddy()))
            .map(BlockId::parent)
            .collect();
        for parent in &parents {
            let (lo, hi) = parent.halves();
            self.remove(lo);
            self.remove(hi);
        }
        debug_assert_eq!(self.pairs, 0);
        parents
    }

    fn take_slot(&mut self, slot: usize) -> BlockId {
        let number = self.slots.swap_remove(slot);
        let block = BlockId::new(number, self.order);
        if let Some(index) = &mut self.index {
            index.remove(&number);
            if let Some(&moved) = self.slots.get(slot) {
                index.insert(moved, slot as u32);
            }
            if index.contains_key(&block.buddy().number) {
                self.pairs -= 1;
            }
        }
        block
    }
}
