//! Memory-massaging adversaries.
//!
//! Strategies are generic over [`Allocator`] and see nothing but the blocks
//! that `alloc` hands back. Where a strategy reports whether the defender
//! noticed, it reads [`AlarmSource`] for the record only; the attack logic
//! never branches on it.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rustc_hash::FxHashMap;
use serde::Serialize;
use thiserror::Error;

use crate::buddy::BlockId;
use crate::detect::AlarmSource;
use crate::error::AllocError;
use crate::mad::MadState;
use crate::metrics::RunRecord;
use crate::Allocator;

/// Order of the block designated vulnerable in the worst-case experiment.
pub const VULNERABLE_ORDER: u8 = 6;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AdversaryError {
    #[error("allocator failed during sparse massaging: {0}")]
    Alloc(#[from] AllocError),
    #[error("no target hit within {0} rounds")]
    RoundBudgetExhausted(u32),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Attacker-side random stream, seeded independently of the allocator.
pub type AdversaryRng = ChaCha12Rng;

pub fn adversary_rng(seed: u64) -> AdversaryRng {
    ChaCha12Rng::seed_from_u64(seed)
}

/// What the attacker knows: the blocks it holds and every order-0 block
/// number it has ever been handed.
#[derive(Debug, Clone)]
pub struct AdversaryView {
    held: Vec<BlockId>,
    observed: Vec<bool>,
    observed_count: u64,
}

impl AdversaryView {
    pub fn new(total_blocks: u32) -> Self {
        Self {
            held: Vec::new(),
            observed: vec![false; total_blocks as usize],
            observed_count: 0,
        }
    }

    fn observe(&mut self, block: BlockId) {
        for seen in &mut self.observed[block.number as usize..block.end() as usize] {
            if !*seen {
                *seen = true;
                self.observed_count += 1;
            }
        }
    }

    pub fn held(&self) -> &[BlockId] {
        &self.held
    }

    pub fn has_observed(&self, index: u32) -> bool {
        self.observed[index as usize]
    }

    /// Distinct order-0 blocks seen so far.
    pub fn observed_count(&self) -> u64 {
        self.observed_count
    }
}

/// Request orders for sparse massaging, with relative weights.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderPolicy {
    pub weights: Vec<(u8, u32)>,
}

impl OrderPolicy {
    pub fn single(order: u8) -> Self {
        Self {
            weights: vec![(order, 1)],
        }
    }

    /// Weight halves with every order up to `max`.
    pub fn geometric(max: u8) -> Self {
        Self {
            weights: (0..=max).map(|o| (o, 1 << (max - o))).collect(),
        }
    }

    fn draw(&self, rng: &mut AdversaryRng) -> u8 {
        let total: u32 = self.weights.iter().map(|w| w.1).sum();
        let mut pick = rng.gen_range(0..total);
        for &(order, weight) in &self.weights {
            if pick < weight {
                return order;
            }
            pick -= weight;
        }
        unreachable!("weights sum to total")
    }
}

#[derive(Debug, Clone)]
pub struct SparseTrace {
    pub record: RunRecord,
    pub view: AdversaryView,
}

/// Sparse-allocation massaging: allocate, record, and keep each block only
/// until the next allocation has returned.
pub fn sparse_massage<A: Allocator>(
    alloc: &mut A,
    n_allocs: u64,
    policy: &OrderPolicy,
    rng: &mut AdversaryRng,
    interval: u64,
) -> Result<SparseTrace, AdversaryError> {
    let record = RunRecord::new(alloc.total_blocks(), interval);
    sparse_massage_into(alloc, n_allocs, policy, rng, record)
}

/// [`sparse_massage`] filling a caller-built record, e.g. one with a log.
pub fn sparse_massage_into<A: Allocator>(
    alloc: &mut A,
    n_allocs: u64,
    policy: &OrderPolicy,
    rng: &mut AdversaryRng,
    mut record: RunRecord,
) -> Result<SparseTrace, AdversaryError> {
    let total = alloc.total_blocks();
    let mut view = AdversaryView::new(total);
    let mut previous: Option<BlockId> = None;
    for _ in 0..n_allocs {
        let order = policy.draw(rng).min(alloc.max_order());
        let block = alloc.alloc(order)?;
        record.record_alloc(block);
        view.observe(block);
        view.held.push(block);
        if let Some(prev) = previous.replace(block) {
            alloc.free(prev)?;
            view.held.retain(|&b| b != prev);
        }
    }
    if let Some(prev) = previous {
        alloc.free(prev)?;
        view.held.clear();
    }
    Ok(SparseTrace { record, view })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExhaustiveTrace {
    /// Successful order-0 allocations before `OutOfMemory`.
    pub allocs: u64,
    pub freed: Option<BlockId>,
    pub victim: Option<BlockId>,
    pub victim_landed: bool,
    /// Allocation index at which the first alarm was visible, if any.
    pub first_alarm: Option<u64>,
}

impl ExhaustiveTrace {
    pub fn alarmed_before_exhaustion(&self) -> bool {
        self.first_alarm.is_some_and(|i| i <= self.allocs)
    }
}

/// Exhaustive-allocation massaging: take everything, release one block,
/// and see where the victim's next allocation lands.
pub fn exhaustive_massage<A: Allocator + AlarmSource>(
    alloc: &mut A,
    rng: &mut AdversaryRng,
) -> Result<ExhaustiveTrace, AdversaryError> {
    let mut held = Vec::with_capacity(alloc.total_blocks() as usize);
    let mut first_alarm = None;
    loop {
        match alloc.alloc(0) {
            Ok(block) => held.push(block),
            Err(AllocError::OutOfMemory) => break,
            Err(e) => return Err(e.into()),
        }
        if first_alarm.is_none() && alloc.alarm_count() > 0 {
            first_alarm = Some(held.len() as u64);
        }
    }
    let allocs = held.len() as u64;
    let (freed, victim) = if held.is_empty() {
        (None, None)
    } else {
        let i = rng.gen_range(0..held.len());
        let target = held.swap_remove(i);
        alloc.free(target)?;
        let victim = alloc.alloc(0).ok();
        (Some(target), victim)
    };
    if let Some(v) = victim {
        held.push(v);
    }
    for b in held {
        alloc.free(b)?;
    }
    Ok(ExhaustiveTrace {
        allocs,
        freed,
        victim,
        victim_landed: victim.is_some() && victim == freed,
        first_alarm,
    })
}

/// Ordinary client churn, not an attack: order-0 allocations and frees in
/// random interleaving with at most `max_live` blocks held at once. Runs
/// until `n_allocs` allocations have been made and returns the allocator
/// with nothing held.
pub fn benign_workload<A: Allocator>(
    alloc: &mut A,
    n_allocs: u64,
    max_live: usize,
    rng: &mut AdversaryRng,
) -> Result<(), AdversaryError> {
    let mut live: Vec<BlockId> = Vec::with_capacity(max_live);
    let mut made = 0;
    while made < n_allocs {
        if live.len() < max_live && (live.is_empty() || rng.gen_bool(0.5)) {
            live.push(alloc.alloc(0)?);
            made += 1;
        } else {
            let i = rng.gen_range(0..live.len());
            alloc.free(live.swap_remove(i))?;
        }
    }
    for b in live {
        alloc.free(b)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SprayTrace {
    pub rounds: u32,
    /// Order-0 blocks requested per round.
    pub round_size: u64,
    pub observed: u64,
}

/// Spraying: allocate `fraction` of memory in order-0 blocks, check whether
/// any held block covers `target`, release everything, and retry.
pub fn spray_massage<A: Allocator>(
    alloc: &mut A,
    fraction: f64,
    target: u32,
    round_budget: u32,
    rng: &mut AdversaryRng,
) -> Result<SprayTrace, AdversaryError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(AdversaryError::InvalidParameter(format!(
            "spray fraction {fraction} outside (0, 1]"
        )));
    }
    let total = alloc.total_blocks();
    let round_size = ((f64::from(total) * fraction).ceil() as u64).max(1);
    let mut view = AdversaryView::new(total);
    let mut held = Vec::with_capacity(round_size as usize);
    for round in 1..=round_budget {
        for _ in 0..round_size {
            match alloc.alloc(0) {
                Ok(block) => {
                    view.observe(block);
                    held.push(block);
                }
                Err(AllocError::OutOfMemory) => break,
                Err(e) => return Err(e.into()),
            }
        }
        let hit = held.iter().any(|b| b.contains_index(target));
        held.shuffle(rng);
        for b in held.drain(..) {
            alloc.free(b)?;
        }
        if hit {
            return Ok(SprayTrace {
                rounds: round,
                round_size,
                observed: view.observed_count,
            });
        }
    }
    Err(AdversaryError::RoundBudgetExhausted(round_budget))
}

/// A vulnerable order-6 block and its two physically adjacent order-6
/// ranges, identified purely by block numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct VulnerableConfig {
    pub target: BlockId,
    pub neighbors: [BlockId; 2],
}

impl VulnerableConfig {
    /// The aligned order-6 range containing `index`, if both neighbours
    /// exist inside `total_blocks`.
    pub fn around(index: u32, total_blocks: u32) -> Option<Self> {
        let span = 1u32 << VULNERABLE_ORDER;
        let start = index & !(span - 1);
        if start < span || start + 2 * span > total_blocks {
            return None;
        }
        Some(Self {
            target: BlockId::new(start, VULNERABLE_ORDER),
            neighbors: [
                BlockId::new(start - span, VULNERABLE_ORDER),
                BlockId::new(start + span, VULNERABLE_ORDER),
            ],
        })
    }

    /// Order-0 range covered by target and neighbours together.
    pub fn range(&self) -> (u32, u32) {
        (self.neighbors[0].number, self.neighbors[1].end())
    }

    pub fn touches(&self, block: BlockId) -> bool {
        let (start, end) = self.range();
        block.overlaps(start, end)
    }
}

/// Picks the vulnerable block the way the worst-case experiment assumes:
/// an order-6 range around a uniformly random order-0 block that currently
/// sits in one of MAD's allocation caches.
pub fn pick_vulnerable_in_mad(mad: &MadState, rng: &mut AdversaryRng) -> Option<VulnerableConfig> {
    let cached: Vec<BlockId> = (0..=mad.max_order())
        .flat_map(|o| mad.alloc_cache(o).blocks())
        .collect();
    let span: u64 = cached.iter().map(|b| u64::from(b.span())).sum();
    if span == 0 {
        return None;
    }
    for _ in 0..64 {
        let mut pick = rng.gen_range(0..span);
        for b in &cached {
            if pick < u64::from(b.span()) {
                let index = b.number + pick as u32;
                if let Some(cfg) = VulnerableConfig::around(index, mad.total_blocks()) {
                    return Some(cfg);
                }
                break;
            }
            pick -= u64::from(b.span());
        }
    }
    None
}

/// Picks a vulnerable block anywhere in memory.
pub fn pick_vulnerable_anywhere(total_blocks: u32, rng: &mut AdversaryRng) -> VulnerableConfig {
    let span = 1u32 << VULNERABLE_ORDER;
    let slots = total_blocks / span;
    assert!(
        slots >= 3,
        "memory too small for a vulnerable configuration"
    );
    let slot = rng.gen_range(1..slots - 1);
    VulnerableConfig::around(slot * span, total_blocks).expect("interior slot")
}

/// Splits a request of `blocks` order-0 blocks into power-of-two pieces,
/// largest first, capped at `max_order`.
pub fn decompose_request(blocks: u32, max_order: u8) -> Vec<u8> {
    let mut orders = Vec::new();
    let mut rest = blocks;
    while rest > 0 {
        let order = (31 - rest.leading_zeros()).min(u32::from(max_order)) as u8;
        orders.push(order);
        rest -= 1 << order;
    }
    orders
}

/// Knobs of one worst-case run. Request sizes are drawn uniformly from
/// `[lb, ub]` order-0 blocks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WorstCaseParams {
    pub lb: u32,
    pub ub: u32,
    /// Requests after which the run gives up.
    pub budget: u64,
    /// Mean number of order-0 blocks the attacker keeps live, apart from
    /// the blocks it collects inside the vulnerable range.
    pub hold_blocks: f64,
}

impl WorstCaseParams {
    /// Defaults for `total_blocks` of memory: a live set of 1/16 of it.
    pub fn new(lb: u32, ub: u32, total_blocks: u32) -> Self {
        Self {
            lb,
            ub,
            budget: 5_000_000,
            hold_blocks: f64::from(total_blocks) / 16.0,
        }
    }

    /// Mean number of later requests a request is held for.
    pub fn mean_hold(&self) -> f64 {
        (self.hold_blocks / ((f64::from(self.lb) + f64::from(self.ub)) / 2.0)).max(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct WorstCaseOutcome {
    /// Requests issued until the configuration was held, `None` on timeout.
    pub required_allocs: Option<u64>,
    pub requests: u64,
    /// An alarm was raised before success (or at all, on timeout).
    pub detected: bool,
    /// The victim allocation after releasing the target landed in it.
    pub victim_landed: bool,
    /// Landed without an earlier alarm, i.e. the attack went through.
    pub placement_success: bool,
}

impl WorstCaseOutcome {
    pub fn timed_out(&self) -> bool {
        self.required_allocs.is_none()
    }
}

/// Worst-case experiment. The attacker keeps every block touching the
/// vulnerable configuration; the rest of each request is released after a
/// geometrically distributed number of further requests, so that on
/// average `hold_blocks` blocks stay live. Once target and neighbours are
/// fully held the target is released, with everything else still held, and
/// the next order-0 allocation (the victim's) is checked for landing inside
/// it.
pub fn worst_case_experiment<A: Allocator + AlarmSource>(
    alloc: &mut A,
    config: VulnerableConfig,
    params: WorstCaseParams,
    rng: &mut AdversaryRng,
) -> Result<WorstCaseOutcome, AdversaryError> {
    let WorstCaseParams { lb, ub, budget, .. } = params;
    if lb == 0 || lb > ub || params.hold_blocks.is_nan() || params.hold_blocks < 0.0 {
        return Err(AdversaryError::InvalidParameter(format!(
            "request bounds [{lb}, {ub}], hold {}",
            params.hold_blocks
        )));
    }
    let release_p = 1.0 / params.mean_hold();
    let (start, end) = config.range();
    let needed = end - start;
    let mut covered = 0u32;
    let mut kept: Vec<BlockId> = Vec::new();
    let mut pending: BinaryHeap<Reverse<(u64, u64)>> = BinaryHeap::new();
    let mut held: FxHashMap<u64, Vec<BlockId>> = FxHashMap::default();
    let mut requests = 0u64;
    let mut success = None;
    let mut detected_at_success = false;
    while requests < budget {
        requests += 1;
        while let Some(&Reverse((due, id))) = pending.peek() {
            if due > requests {
                break;
            }
            pending.pop();
            for b in held.remove(&id).unwrap_or_default() {
                alloc.free(b)?;
            }
        }
        let size = rng.gen_range(lb..=ub);
        let mut pieces = Vec::new();
        for order in decompose_request(size, alloc.max_order()) {
            let block = match alloc.alloc(order) {
                Ok(b) => b,
                Err(AllocError::OutOfMemory) => continue,
                Err(e) => return Err(e.into()),
            };
            if config.touches(block) {
                covered += block.end().min(end) - block.number.max(start);
                kept.push(block);
            } else {
                pieces.push(block);
            }
        }
        if !pieces.is_empty() {
            let due = requests + geometric(rng, release_p);
            held.insert(requests, pieces);
            pending.push(Reverse((due, requests)));
        }
        if covered == needed {
            success = Some(requests);
            detected_at_success = alloc.alarm_count() > 0;
            break;
        }
    }
    let mut victim_landed = false;
    if success.is_some() {
        let target = config.target;
        let (in_target, rest): (Vec<_>, Vec<_>) = kept
            .into_iter()
            .partition(|b| b.overlaps(target.number, target.end()));
        kept = rest;
        for b in in_target {
            alloc.free(b)?;
        }
        if let Ok(victim) = alloc.alloc(0) {
            victim_landed = target.overlaps(victim.number, victim.end());
            alloc.free(victim)?;
        }
    }
    let mut leftovers: Vec<_> = held.into_iter().collect();
    leftovers.sort_unstable_by_key(|(id, _)| *id);
    for b in kept
        .into_iter()
        .chain(leftovers.into_iter().flat_map(|(_, v)| v))
    {
        alloc.free(b)?;
    }
    let detected = match success {
        Some(_) => detected_at_success,
        None => alloc.alarm_count() > 0,
    };
    Ok(WorstCaseOutcome {
        required_allocs: success,
        requests,
        detected,
        victim_landed,
        placement_success: victim_landed && !detected,
    })
}

/// Number of trials up to and including the first success.
fn geometric(rng: &mut AdversaryRng, p: f64) -> u64 {
    if p >= 1.0 {
        return 1;
    }
    let u: f64 = rng.gen();
    ((1.0 - u).ln() / (1.0 - p).ln()).ceil().max(1.0) as u64
}

/// Fraction of runs in which the attacker predictably placed the victim.
pub fn success_probability(placements: &[bool]) -> Result<f64, AdversaryError> {
    if placements.is_empty() {
        return Err(AdversaryError::InvalidParameter("no runs".into()));
    }
    Ok(placements.iter().filter(|&&p| p).count() as f64 / placements.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decompose_is_greedy_powers_of_two() {
        assert_eq!(decompose_request(7, 10), vec![2, 1, 0]);
        assert_eq!(decompose_request(100, 10), vec![6, 5, 2]);
        assert_eq!(decompose_request(128, 10), vec![7]);
        assert_eq!(decompose_request(128, 5), vec![5, 5, 5, 5]);
    }

    #[test]
    fn vulnerable_neighbours_by_number() {
        let c = VulnerableConfig::around(200, 1024).unwrap();
        assert_eq!(c.target, BlockId::new(192, 6));
        assert_eq!(c.neighbors, [BlockId::new(128, 6), BlockId::new(256, 6)]);
        assert_eq!(c.range(), (128, 320));
        assert!(VulnerableConfig::around(10, 1024).is_none());
        assert!(VulnerableConfig::around(1000, 1024).is_none());
    }

    #[test]
    fn success_probability_examples() {
        let mut runs = vec![false; 400];
        runs[17] = true;
        let p = success_probability(&runs).unwrap();
        assert!((p - 0.0025).abs() < 1e-12 && p < 0.003);
        assert_eq!(success_probability(&[false; 50]).unwrap(), 0.0);
        assert!(success_probability(&[]).is_err());
    }

    #[test]
    fn geometric_policy_weights() {
        let p = OrderPolicy::geometric(2);
        assert_eq!(p.weights, vec![(0, 4), (1, 2), (2, 1)]);
    }

    #[test]
    fn sparse_with_no_allocations_is_empty() {
        let mut buddy = crate::BuddyAllocator::new(64, 2).unwrap();
        let t = sparse_massage(
            &mut buddy,
            0,
            &OrderPolicy::single(0),
            &mut adversary_rng(0),
            1,
        )
        .unwrap();
        assert_eq!(t.record.total_allocs(), 0);
        assert_eq!(t.view.observed_count(), 0);
    }

    #[test]
    fn geometric_hold_has_the_requested_mean() {
        let mut rng = adversary_rng(5);
        let n = 100_000;
        let mean = (0..n)
            .map(|_| geometric(&mut rng, 0.25) as f64)
            .sum::<f64>()
            / n as f64;
        assert!((mean - 4.0).abs() < 0.1, "{mean}");
        assert_eq!(geometric(&mut rng, 1.0), 1);
    }

    #[test]
    fn worst_case_reaches_the_configuration_on_the_baseline() {
        let total = 4096;
        let mut buddy = crate::BuddyAllocator::new(u64::from(total), 4).unwrap();
        let config = VulnerableConfig::around(2000, total).unwrap();
        let params = WorstCaseParams::new(16, 32, total);
        let out = worst_case_experiment(&mut buddy, config, params, &mut adversary_rng(1)).unwrap();
        assert!(out.required_allocs.is_some());
        assert!(!out.detected);
        assert_eq!(out.placement_success, out.victim_landed);
        assert_eq!(buddy.allocated_count(), 0);
    }

    #[test]
    fn worst_case_budget_runs_out() {
        let total = 4096;
        let mut buddy = crate::BuddyAllocator::new(u64::from(total), 4).unwrap();
        let config = VulnerableConfig::around(4000, total).unwrap();
        let params = WorstCaseParams {
            budget: 3,
            ..WorstCaseParams::new(4, 8, total)
        };
        let out = worst_case_experiment(&mut buddy, config, params, &mut adversary_rng(1)).unwrap();
        assert!(out.timed_out());
        assert!(!out.placement_success);
    }
}
