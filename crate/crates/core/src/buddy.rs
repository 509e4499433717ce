//! Textbook binary buddy allocator over a fixed range of order-0 blocks.
//!
//! Sizes are counted in order-0 blocks (one 4 KiB page each); the simulator
//! never touches real memory. Free lists are FIFO queues: allocation takes
//! the oldest free block of the needed order, and every block that becomes
//! free (after merging, or as the upper half of a split) is appended at the
//! tail. The initial free list of the top order is sorted by address, so a
//! fresh allocator hands out the lowest addresses first.
//!
//! With eager merging, the free lists always hold the canonical buddy
//! decomposition of the free set, so the allocator state is fully
//! determined by the set of held blocks plus the queue order.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::AllocError;

/// Default highest order, following the Linux buddy allocator.
pub const DEFAULT_MAX_ORDER: u8 = 10;

const NONE: u8 = u8::MAX;
const NIL: u32 = u32::MAX;

/// A physical block: `2^order` contiguous order-0 blocks starting at `number`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlockId {
    pub number: u32,
    pub order: u8,
}

impl BlockId {
    pub const fn new(number: u32, order: u8) -> Self {
        Self { number, order }
    }

    /// Number of order-0 blocks covered.
    #[inline]
    pub const fn span(self) -> u32 {
        1 << self.order
    }

    /// One past the last order-0 block covered.
    #[inline]
    pub const fn end(self) -> u32 {
        self.number + self.span()
    }

    #[inline]
    pub const fn is_aligned(self) -> bool {
        self.number & (self.span() - 1) == 0
    }

    /// The equal-sized neighbour this block merges with.
    #[inline]
    pub const fn buddy(self) -> BlockId {
        BlockId {
            number: self.number ^ self.span(),
            order: self.order,
        }
    }

    /// Lower and upper halves, one order down. `order` must be positive.
    #[inline]
    pub fn halves(self) -> (BlockId, BlockId) {
        debug_assert!(self.order > 0);
        let order = self.order - 1;
        (
            BlockId::new(self.number, order),
            BlockId::new(self.number + (1 << order), order),
        )
    }

    /// The block one order up that contains this one.
    #[inline]
    pub const fn parent(self) -> BlockId {
        let order = self.order + 1;
        BlockId {
            number: self.number & !((1u32 << order) - 1),
            order,
        }
    }

    #[inline]
    pub fn contains_index(self, index: u32) -> bool {
        (self.number..self.end()).contains(&index)
    }

    #[inline]
    pub fn overlaps(self, start: u32, end: u32) -> bool {
        self.number < end && start < self.end()
    }
}

/// Free-standing form of [`BlockId::buddy`].
pub fn buddy_of(block: BlockId) -> BlockId {
    block.buddy()
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GeometryError {
    #[error("total_blocks must be a non-zero power of two, got {0}")]
    NotPowerOfTwo(u64),
    #[error("max_order {max_order} exceeds log2(total_blocks) = {log2_total}")]
    OrderTooLarge { max_order: u8, log2_total: u32 },
}

/// Checks the allocator geometry shared by the buddy backend and the MAD layer.
pub fn validate_geometry(total_blocks: u64, max_order: u8) -> Result<(), GeometryError> {
    if total_blocks == 0 || !total_blocks.is_power_of_two() || total_blocks > 1 << 31 {
        return Err(GeometryError::NotPowerOfTwo(total_blocks));
    }
    let log2_total = total_blocks.trailing_zeros();
    if u32::from(max_order) > log2_total {
        return Err(GeometryError::OrderTooLarge {
            max_order,
            log2_total,
        });
    }
    Ok(())
}

/// Intrusive FIFO queue head for one order.
#[derive(Debug, Clone, Copy)]
struct FreeQueue {
    head: u32,
    tail: u32,
    len: u32,
}

impl FreeQueue {
    const EMPTY: FreeQueue = FreeQueue {
        head: NIL,
        tail: NIL,
        len: 0,
    };
}

#[derive(Debug, Clone)]
pub struct BuddyAllocator {
    total_blocks: u32,
    max_order: u8,
    queues: Vec<FreeQueue>,
    // Indexed by the first order-0 block of a free block.
    next: Vec<u32>,
    prev: Vec<u32>,
    free_order: Vec<u8>,
    // Indexed by the first order-0 block of an allocated block.
    alloc_order: Vec<u8>,
    allocated: u32,
    allocated_span: u64,
}

impl BuddyAllocator {
    pub fn new(total_blocks: u64, max_order: u8) -> Result<Self, GeometryError> {
        validate_geometry(total_blocks, max_order)?;
        let n = total_blocks as usize;
        let mut buddy = BuddyAllocator {
            total_blocks: total_blocks as u32,
            max_order,
            queues: vec![FreeQueue::EMPTY; usize::from(max_order) + 1],
            next: vec![NIL; n],
            prev: vec![NIL; n],
            free_order: vec![NONE; n],
            alloc_order: vec![NONE; n],
            allocated: 0,
            allocated_span: 0,
        };
        let step = 1u32 << max_order;
        for number in (0..buddy.total_blocks).step_by(step as usize) {
            buddy.push_back(BlockId::new(number, max_order));
        }
        Ok(buddy)
    }

    /// An allocator whose every page has been handed out once at order 0
    /// and given back in random order, standing in for memory after boot.
    /// All blocks merge back, so the top-order list ends up in random order.
    pub fn booted<R: Rng + ?Sized>(
        total_blocks: u64,
        max_order: u8,
        rng: &mut R,
    ) -> Result<Self, GeometryError> {
        let mut buddy = Self::new(total_blocks, max_order)?;
        let mut pages: Vec<BlockId> = (0..buddy.total_blocks)
            .map(|n| BlockId::new(n, 0))
            .collect();
        for &p in &pages {
            buddy.claim(p).expect("fresh allocator");
        }
        pages.shuffle(rng);
        for p in pages {
            buddy.free(p).expect("claimed above");
        }
        Ok(buddy)
    }

    pub fn total_blocks(&self) -> u32 {
        self.total_blocks
    }

    pub fn max_order(&self) -> u8 {
        self.max_order
    }

    /// Number of blocks currently handed out.
    pub fn allocated_count(&self) -> u32 {
        self.allocated
    }

    /// Order-0 blocks currently free.
    pub fn free_span(&self) -> u64 {
        u64::from(self.total_blocks) - self.allocated_span
    }

    pub fn free_count(&self, order: u8) -> usize {
        self.queues
            .get(usize::from(order))
            .map_or(0, |q| q.len as usize)
    }

    /// Free blocks of `order` in queue order (next to be allocated first).
    pub fn free_blocks(&self, order: u8) -> FreeIter<'_> {
        let head = self.queues.get(usize::from(order)).map_or(NIL, |q| q.head);
        FreeIter {
            buddy: self,
            cursor: head,
            order,
        }
    }

    pub fn is_free(&self, block: BlockId) -> bool {
        (block.number as usize) < self.free_order.len()
            && self.free_order[block.number as usize] == block.order
    }

    pub fn is_allocated(&self, block: BlockId) -> bool {
        (block.number as usize) < self.alloc_order.len()
            && self.alloc_order[block.number as usize] == block.order
    }

    pub fn allocated_blocks(&self) -> impl Iterator<Item = BlockId> + '_ {
        self.alloc_order
            .iter()
            .enumerate()
            .filter(|(_, &o)| o != NONE)
            .map(|(n, &o)| BlockId::new(n as u32, o))
    }

    /// Takes the oldest free block of `order`, splitting the oldest block of
    /// the smallest larger order when none is free.
    pub fn alloc(&mut self, order: u8) -> Result<BlockId, AllocError> {
        if order > self.max_order {
            return Err(AllocError::InvalidOrder(order));
        }
        let source = (order..=self.max_order)
            .find(|&o| self.queues[usize::from(o)].len > 0)
            .ok_or(AllocError::OutOfMemory)?;
        let mut block = self.pop_front(source);
        while block.order > order {
            let (lower, upper) = block.halves();
            self.push_back(upper);
            block = lower;
        }
        self.alloc_order[block.number as usize] = order;
        self.allocated += 1;
        self.allocated_span += u64::from(block.span());
        Ok(block)
    }

    /// Returns `block` and merges it with free buddies as far as possible.
    pub fn free(&mut self, block: BlockId) -> Result<(), AllocError> {
        if !self.is_allocated(block) {
            return Err(AllocError::DoubleFree(block));
        }
        self.alloc_order[block.number as usize] = NONE;
        self.allocated -= 1;
        self.allocated_span -= u64::from(block.span());

        let mut block = block;
        while block.order < self.max_order {
            let buddy = block.buddy();
            if !self.is_free(buddy) {
                break;
            }
            self.unlink(buddy);
            block = block.parent();
        }
        self.push_back(block);
        Ok(())
    }

    /// Allocates exactly `block`, splitting the free block that contains it.
    pub fn claim(&mut self, block: BlockId) -> Result<(), AllocError> {
        if block.order > self.max_order {
            return Err(AllocError::InvalidOrder(block.order));
        }
        if !block.is_aligned() || block.end() > self.total_blocks {
            return Err(AllocError::OutOfMemory);
        }
        let mut container = block;
        while !self.is_free(container) {
            if container.order == self.max_order {
                return Err(AllocError::OutOfMemory);
            }
            container = container.parent();
        }
        self.unlink(container);
        while container.order > block.order {
            let (lower, upper) = container.halves();
            if block.number >= upper.number {
                self.push_back(lower);
                container = upper;
            } else {
                self.push_back(upper);
                container = lower;
            }
        }
        self.alloc_order[block.number as usize] = block.order;
        self.allocated += 1;
        self.allocated_span += u64::from(block.span());
        Ok(())
    }

    /// Re-registers an allocated block as its two allocated halves, the way
    /// a kernel splits a high-order page it owns. No memory changes hands.
    pub fn split_allocated(&mut self, block: BlockId) -> Result<(BlockId, BlockId), AllocError> {
        if !self.is_allocated(block) || block.order == 0 {
            return Err(AllocError::DoubleFree(block));
        }
        let (lower, upper) = block.halves();
        self.alloc_order[lower.number as usize] = lower.order;
        self.alloc_order[upper.number as usize] = upper.order;
        self.allocated += 1;
        Ok((lower, upper))
    }

    /// Inverse of [`split_allocated`](Self::split_allocated): two allocated
    /// buddies become one allocated parent.
    pub fn join_allocated(&mut self, lower: BlockId) -> Result<BlockId, AllocError> {
        let upper = lower.buddy();
        if lower.order >= self.max_order || !self.is_allocated(lower) {
            return Err(AllocError::DoubleFree(lower));
        }
        if !self.is_allocated(upper) {
            return Err(AllocError::DoubleFree(upper));
        }
        let parent = lower.parent();
        let other = if parent.number == lower.number {
            upper
        } else {
            lower
        };
        self.alloc_order[other.number as usize] = NONE;
        self.alloc_order[parent.number as usize] = parent.order;
        self.allocated -= 1;
        Ok(parent)
    }

    /// Full structural check: free and allocated blocks tile the range
    /// exactly, every block is aligned, and no free buddies coexist.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut covered = vec![false; self.total_blocks as usize];
        let mut mark = |b: BlockId, what: &str| -> Result<(), String> {
            if !b.is_aligned() || b.end() > self.total_blocks || b.order > self.max_order {
                return Err(format!("{what} block {b:?} is misaligned or out of range"));
            }
            for i in b.number..b.end() {
                if std::mem::replace(&mut covered[i as usize], true) {
                    return Err(format!("{what} block {b:?} overlaps index {i}"));
                }
            }
            Ok(())
        };
        let mut free_seen = 0u32;
        for order in 0..=self.max_order {
            let mut count = 0;
            for b in self.free_blocks(order) {
                mark(b, "free")?;
                if order < self.max_order && self.is_free(b.buddy()) {
                    return Err(format!("free block {b:?} has a free buddy"));
                }
                count += 1;
            }
            if count != self.queues[usize::from(order)].len {
                return Err(format!("queue length mismatch at order {order}"));
            }
            free_seen += count;
        }
        let mut alloc_seen = 0;
        for b in self.allocated_blocks() {
            mark(b, "allocated")?;
            alloc_seen += 1;
        }
        if alloc_seen != self.allocated {
            return Err("allocated count mismatch".into());
        }
        let stray = self.free_order.iter().filter(|&&o| o != NONE).count() as u32;
        if stray != free_seen {
            return Err("free index out of sync with queues".into());
        }
        match covered.iter().position(|c| !c) {
            Some(i) => Err(format!("order-0 block {i} is neither free nor allocated")),
            None => Ok(()),
        }
    }

    fn push_back(&mut self, block: BlockId) {
        let q = &mut self.queues[usize::from(block.order)];
        let n = block.number;
        self.free_order[n as usize] = block.order;
        self.next[n as usize] = NIL;
        self.prev[n as usize] = q.tail;
        if q.tail == NIL {
            q.head = n;
        } else {
            self.next[q.tail as usize] = n;
        }
        q.tail = n;
        q.len += 1;
    }

    fn pop_front(&mut self, order: u8) -> BlockId {
        let head = self.queues[usize::from(order)].head;
        debug_assert_ne!(head, NIL);
        let block = BlockId::new(head, order);
        self.unlink(block);
        block
    }

    fn unlink(&mut self, block: BlockId) {
        let n = block.number as usize;
        let (prev, next) = (self.prev[n], self.next[n]);
        let q = &mut self.queues[usize::from(block.order)];
        if prev == NIL {
            q.head = next;
        } else {
            self.next[prev as usize] = next;
        }
        if next == NIL {
            q.tail = prev;
        } else {
            self.prev[next as usize] = prev;
        }
        q.len -= 1;
        self.free_order[n] = NONE;
        self.next[n] = NIL;
        self.prev[n] = NIL;
    }
}

pub struct FreeIter<'a> {
    buddy: &'a BuddyAllocator,
    cursor: u32,
    order: u8,
}

impl Iterator for FreeIter<'_> {
    type Item = BlockId;

    fn next(&mut self) -> Option<BlockId> {
        if self.cursor == NIL {
            return None;
        }
        let block = BlockId::new(self.cursor, self.order);
        self.cursor = self.buddy.next[self.cursor as usize];
        Some(block)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn free_list(b: &BuddyAllocator, order: u8) -> Vec<u32> {
        b.free_blocks(order).map(|b| b.number).collect()
    }

    #[test]
    fn init_single_top_block() {
        let b = BuddyAllocator::new(8, 3).unwrap();
        assert_eq!(free_list(&b, 3), vec![0]);
        for o in 0..3 {
            assert!(free_list(&b, o).is_empty());
        }
        assert_eq!(b.allocated_count(), 0);
    }

    #[test]
    fn init_tiles_with_top_order_blocks() {
        let b = BuddyAllocator::new(16, 2).unwrap();
        assert_eq!(free_list(&b, 2), vec![0, 4, 8, 12]);
    }

    #[test]
    fn init_full_scale_geometry() {
        // 4 Mi pages of 4 KiB is 16 GiB.
        let b = BuddyAllocator::new(4_194_304, 10).unwrap();
        assert_eq!(b.free_count(10), 4096);
        assert_eq!(u64::from(b.total_blocks()) * 4096, 16 << 30);
    }

    #[test]
    fn init_rejects_bad_geometry() {
        assert_eq!(
            BuddyAllocator::new(12, 2).unwrap_err(),
            GeometryError::NotPowerOfTwo(12)
        );
        assert!(matches!(
            BuddyAllocator::new(8, 4).unwrap_err(),
            GeometryError::OrderTooLarge { .. }
        ));
        assert!(BuddyAllocator::new(0, 0).is_err());
    }

    #[test]
    fn alloc_free_alloc_on_fresh_allocator_recycles_merged_block() {
        let mut b = BuddyAllocator::new(8, 3).unwrap();
        let phi = b.alloc(0).unwrap();
        assert_eq!(phi, BlockId::new(0, 0));
        b.free(phi).unwrap();
        // Everything merged back into one block, so there is no distinct
        // candidate to enumerate.
        assert_eq!(b.alloc(0).unwrap(), phi);
    }

    #[test]
    fn alloc_free_alloc_enumerates_when_another_block_is_free() {
        let mut b = BuddyAllocator::new(16, 2).unwrap();
        let first = b.alloc(0).unwrap();
        let _pin1 = b.alloc(0).unwrap();
        let _pin2 = b.alloc(0).unwrap();
        b.free(first).unwrap();
        let phi = b.alloc(0).unwrap();
        b.free(phi).unwrap();
        let psi = b.alloc(0).unwrap();
        assert_eq!((phi.number, psi.number), (3, 0));
    }

    #[test]
    fn alloc_whole_range() {
        let mut b = BuddyAllocator::new(8, 3).unwrap();
        assert_eq!(b.alloc(3).unwrap(), BlockId::new(0, 3));
        assert_eq!(b.alloc(0), Err(AllocError::OutOfMemory));
    }

    #[test]
    fn ninth_order0_alloc_fails() {
        let mut b = BuddyAllocator::new(8, 3).unwrap();
        for _ in 0..8 {
            b.alloc(0).unwrap();
        }
        assert_eq!(b.alloc(0), Err(AllocError::OutOfMemory));
        b.check_invariants().unwrap();
    }

    #[test]
    fn alloc_rejects_order_above_max() {
        let mut b = BuddyAllocator::new(8, 2).unwrap();
        assert_eq!(b.alloc(3), Err(AllocError::InvalidOrder(3)));
    }

    #[test]
    fn split_returns_lower_half_and_frees_upper_halves() {
        let mut b = BuddyAllocator::new(8, 3).unwrap();
        assert_eq!(b.alloc(0).unwrap(), BlockId::new(0, 0));
        assert_eq!(free_list(&b, 0), vec![1]);
        assert_eq!(free_list(&b, 1), vec![2]);
        assert_eq!(free_list(&b, 2), vec![4]);
    }

    #[test]
    fn free_merges_with_free_buddy() {
        let mut b = BuddyAllocator::new(8, 3).unwrap();
        let low = b.alloc(2).unwrap();
        let x = b.alloc(1).unwrap();
        let y = b.alloc(1).unwrap();
        assert_eq!((x.number, y.number), (4, 6));
        b.free(y).unwrap();
        assert_eq!(free_list(&b, 1), vec![6]);
        b.free(x).unwrap();
        // buddy(4, 1) = 6 was free, so the pair merged into (4, 2).
        assert_eq!(free_list(&b, 2), vec![4]);
        assert!(free_list(&b, 1).is_empty());
        b.free(low).unwrap();
        assert_eq!(free_list(&b, 3), vec![0]);
    }

    #[test]
    fn free_keeps_block_when_buddy_is_held() {
        let mut b = BuddyAllocator::new(8, 3).unwrap();
        let zero = b.alloc(0).unwrap();
        let one = b.alloc(0).unwrap();
        assert_eq!(one.number, 1);
        b.free(zero).unwrap();
        assert_eq!(free_list(&b, 0), vec![0]);
    }

    #[test]
    fn double_free_and_foreign_blocks_are_rejected() {
        let mut b = BuddyAllocator::new(8, 3).unwrap();
        let blk = b.alloc(1).unwrap();
        b.free(blk).unwrap();
        assert_eq!(b.free(blk), Err(AllocError::DoubleFree(blk)));
        let never = BlockId::new(4, 0);
        assert_eq!(b.free(never), Err(AllocError::DoubleFree(never)));
        let b2 = b.alloc(1).unwrap();
        // Right start, wrong order.
        let wrong = BlockId::new(b2.number, 0);
        assert_eq!(b.free(wrong), Err(AllocError::DoubleFree(wrong)));
    }

    #[test]
    fn buddy_of_examples() {
        assert_eq!(buddy_of(BlockId::new(4, 1)), BlockId::new(6, 1));
        assert_eq!(buddy_of(BlockId::new(6, 1)), BlockId::new(4, 1));
        assert_eq!(buddy_of(BlockId::new(0, 3)), BlockId::new(8, 3));
    }

    #[test]
    fn freed_blocks_queue_behind_older_ones() {
        let mut b = BuddyAllocator::new(16, 2).unwrap();
        let first = b.alloc(2).unwrap();
        assert_eq!(first.number, 0);
        b.free(first).unwrap();
        assert_eq!(free_list(&b, 2), vec![4, 8, 12, 0]);
        assert_eq!(b.alloc(2).unwrap().number, 4);
    }

    #[test]
    fn claim_takes_exact_block() {
        let mut b = BuddyAllocator::new(16, 2).unwrap();
        b.claim(BlockId::new(9, 0)).unwrap();
        assert!(b.is_allocated(BlockId::new(9, 0)));
        assert_eq!(free_list(&b, 0), vec![8]);
        assert_eq!(free_list(&b, 1), vec![10]);
        assert_eq!(b.claim(BlockId::new(9, 0)), Err(AllocError::OutOfMemory));
        assert_eq!(b.claim(BlockId::new(8, 1)), Err(AllocError::OutOfMemory));
        b.check_invariants().unwrap();
        b.free(BlockId::new(9, 0)).unwrap();
        assert_eq!(free_list(&b, 2), vec![0, 4, 12, 8]);
    }

    #[test]
    fn split_and_join_allocated_blocks() {
        let mut b = BuddyAllocator::new(16, 2).unwrap();
        let blk = b.alloc(2).unwrap();
        let (lo, hi) = b.split_allocated(blk).unwrap();
        assert_eq!(b.allocated_count(), 2);
        b.check_invariants().unwrap();
        b.free(hi).unwrap();
        assert_eq!(b.join_allocated(lo), Err(AllocError::DoubleFree(hi)));
        b.claim(hi).unwrap();
        assert_eq!(b.join_allocated(hi).unwrap(), blk);
        assert_eq!(b.allocated_count(), 1);
        b.free(blk).unwrap();
        b.check_invariants().unwrap();
        assert_eq!(b.allocated_count(), 0);
    }
}
