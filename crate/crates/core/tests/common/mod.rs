//! Shared oracles for the integration tests.

#![allow(dead_code)]

use std::collections::BTreeSet;

use mad_sim::{AllocError, BlockId, BuddyAllocator};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Reference model of a buddy allocator: a plain bitmap of free pages.
/// Because free buddies always merge, the free lists must equal the
/// canonical decomposition of the free set into maximal aligned blocks.
pub struct IntervalOracle {
    free: Vec<bool>,
    max_order: u8,
}

impl IntervalOracle {
    pub fn new(total: u32, max_order: u8) -> Self {
        Self {
            free: vec![true; total as usize],
            max_order,
        }
    }

    pub fn set(&mut self, b: BlockId, free: bool) {
        for p in b.number..b.end() {
            self.free[p as usize] = free;
        }
    }

    pub fn all_free(&self, b: BlockId) -> bool {
        (b.number..b.end()).all(|p| self.free[p as usize])
    }

    pub fn canonical(&self) -> Vec<BTreeSet<u32>> {
        let mut lists = vec![BTreeSet::new(); usize::from(self.max_order) + 1];
        let top = 1u32 << self.max_order;
        for start in (0..self.free.len() as u32).step_by(top as usize) {
            self.decompose(BlockId::new(start, self.max_order), &mut lists);
        }
        lists
    }

    fn decompose(&self, b: BlockId, lists: &mut [BTreeSet<u32>]) {
        if self.all_free(b) {
            lists[usize::from(b.order)].insert(b.number);
        } else if b.order > 0 {
            let (lo, hi) = b.halves();
            self.decompose(lo, lists);
            self.decompose(hi, lists);
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Op {
    Alloc(u8),
    /// Free the held block at this index (modulo the held count).
    Free(usize),
    /// Free an already freed block again.
    DoubleFree(usize),
}

pub fn random_ops(rng: &mut impl Rng, len: usize, max_order: u8) -> Vec<Op> {
    (0..len)
        .map(|_| match rng.gen_range(0..20) {
            0 => Op::DoubleFree(rng.gen()),
            1..=9 => Op::Free(rng.gen()),
            _ => Op::Alloc(rng.gen_range(0..=max_order)),
        })
        .collect()
}

/// Replays `ops` on a buddy allocator and the oracle, comparing the free
/// lists after every step.
pub fn check_against_oracle(total: u32, max_order: u8, ops: &[Op]) -> Result<(), String> {
    let mut buddy = BuddyAllocator::new(u64::from(total), max_order).map_err(|e| e.to_string())?;
    let mut oracle = IntervalOracle::new(total, max_order);
    let mut held: Vec<BlockId> = Vec::new();
    let mut freed: Vec<BlockId> = Vec::new();
    for (step, op) in ops.iter().enumerate() {
        match *op {
            Op::Alloc(order) => {
                let possible = oracle.canonical()[usize::from(order)..]
                    .iter()
                    .any(|l| !l.is_empty());
                match buddy.alloc(order) {
                    Ok(b) => {
                        if b.order != order || !b.is_aligned() || !oracle.all_free(b) {
                            return Err(format!("step {step}: alloc({order}) returned {b:?}"));
                        }
                        oracle.set(b, false);
                        held.push(b);
                        freed.retain(|f| !b.overlaps(f.number, f.end()));
                    }
                    Err(AllocError::OutOfMemory) if !possible => {}
                    Err(e) => return Err(format!("step {step}: alloc({order}) failed with {e}")),
                }
            }
            Op::Free(i) if !held.is_empty() => {
                let b = held.swap_remove(i % held.len());
                buddy
                    .free(b)
                    .map_err(|e| format!("step {step}: free {b:?}: {e}"))?;
                oracle.set(b, true);
                freed.push(b);
            }
            Op::DoubleFree(i) if !freed.is_empty() => {
                let b = freed[i % freed.len()];
                if buddy.free(b).is_ok() {
                    return Err(format!("step {step}: double free of {b:?} accepted"));
                }
            }
            _ => {}
        }
        let expected = oracle.canonical();
        for (order, want) in expected.iter().enumerate() {
            let got: BTreeSet<u32> = buddy.free_blocks(order as u8).map(|b| b.number).collect();
            if &got != want {
                return Err(format!(
                    "step {step}: order {order} free list {got:?}, oracle {want:?}"
                ));
            }
        }
    }
    Ok(())
}

/// One random geometry with at most 256 blocks.
pub fn random_geometry(rng: &mut impl Rng) -> (u32, u8) {
    let log2 = rng.gen_range(0..=8u8);
    (1 << log2, rng.gen_range(0..=log2))
}

/// Runs `cases` oracle comparisons from `seed`; returns the first mismatch.
pub fn oracle_campaign(seed: u64, cases: usize, max_len: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let (total, max_order) = random_geometry(&mut rng);
        let len = rng.gen_range(1..=max_len);
        let ops = random_ops(&mut rng, len, max_order);
        check_against_oracle(total, max_order, &ops)
            .map_err(|e| format!("case {case} ({total} blocks): {e}"))?;
    }
    Ok(())
}

/// Upper-tail p-value of Pearson's statistic against a uniform
/// distribution over `counts.len()` bins.
pub fn chi_square_uniform_p(counts: &[u64]) -> f64 {
    let n: u64 = counts.iter().sum();
    let expected = n as f64 / counts.len() as f64;
    let stat: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    ChiSquared::new((counts.len() - 1) as f64).unwrap().sf(stat)
}
