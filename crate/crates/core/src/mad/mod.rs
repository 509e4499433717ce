//! The diversified allocation layer.
//!
//! Every order has an allocation cache, which serves requests, and a shadow
//! cache, which receives frees. Blocks circulate between the two
//! (horizontal diversity), buddy pairs found in a shadow cache move one
//! order up (vertical diversity), and an empty allocation cache can be
//! refilled by splitting a random block from a higher allocation cache
//! (inverse vertical diversity). The backend buddy allocator is only
//! consulted at initialisation, when every refill tier is exhausted, and
//! when a full shadow cache has to drain. All of those interactions draw
//! their counts and positions from the layer's private random stream.

mod cache;
mod config;

use serde::Serialize;
use thiserror::Error;

pub use cache::{Cache, CacheKind};
pub use config::{ConfigError, MadConfig, DESK_MAX_ORDER};

use crate::buddy::{BlockId, BuddyAllocator};
use crate::error::AllocError;
use crate::rng::DiversityRng;

const NONE: u8 = u8::MAX;

#[derive(Debug, Error)]
pub enum MadError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("backend could not supply {requested} blocks of order {order} during initialisation (got {obtained})")]
    InitFailure {
        order: u8,
        requested: u32,
        obtained: u32,
    },
    #[error("backend geometry does not match the configuration")]
    BackendMismatch,
    #[error("no higher-order allocation cache holds a block to split")]
    SplitSourceEmpty,
    #[error(transparent)]
    Alloc(#[from] AllocError),
}

/// Everything the layer reports to observers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum MadEvent {
    Alloc { block: BlockId },
    Free { block: BlockId },
    HorizontalRefill { order: u8, moved: u32 },
    VerticalMerge { order: u8, pairs: u32 },
    InverseSplit { order: u8, source_order: u8 },
    BackendRefill { order: u8, count: u32 },
    Drain { order: u8, count: u32 },
}

/// Cumulative activity counters, monotone over the life of a state.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MadCounters {
    pub allocs: u64,
    pub frees: u64,
    pub horizontal_moves: u64,
    pub merges: u64,
    pub splits: u64,
    pub backend_refills: u64,
    pub backend_refill_blocks: u64,
    pub drains: u64,
    pub drained_blocks: u64,
}

/// Read-only view handed to observers alongside each event.
#[derive(Clone, Copy)]
pub struct CacheView<'a> {
    pub alloc_caches: &'a [Cache],
    pub shadow_caches: &'a [Cache],
    pub counters: &'a MadCounters,
}

pub trait Observer {
    fn on_event(&mut self, event: &MadEvent, view: &CacheView<'_>);
}

/// Observer that ignores everything.
pub struct NoObserver;

impl Observer for NoObserver {
    fn on_event(&mut self, _: &MadEvent, _: &CacheView<'_>) {}
}

impl<A: Observer, B: Observer> Observer for (A, B) {
    fn on_event(&mut self, event: &MadEvent, view: &CacheView<'_>) {
        self.0.on_event(event, view);
        self.1.on_event(event, view);
    }
}

impl<T: Observer + ?Sized> Observer for &mut T {
    fn on_event(&mut self, event: &MadEvent, view: &CacheView<'_>) {
        (**self).on_event(event, view);
    }
}

/// Records the full event stream.
#[derive(Debug, Default, Clone)]
pub struct EventLog {
    pub events: Vec<MadEvent>,
}

impl Observer for EventLog {
    fn on_event(&mut self, event: &MadEvent, _: &CacheView<'_>) {
        self.events.push(*event);
    }
}

#[derive(Debug, Clone)]
pub struct MadState {
    config: MadConfig,
    alloc_caches: Vec<Cache>,
    shadow_caches: Vec<Cache>,
    backend: BuddyAllocator,
    rng: DiversityRng,
    held: Vec<u8>,
    held_count: u32,
    counters: MadCounters,
    verify: bool,
}

impl MadState {
    /// Builds a fresh backend from `config` and initialises on top of it,
    /// seeding the layer's stream from `config.seed`.
    pub fn new(config: MadConfig) -> Result<Self, MadError> {
        config.validate()?;
        let backend = BuddyAllocator::new(config.total_blocks, config.max_order)
            .map_err(ConfigError::from)?;
        let rng = DiversityRng::new(config.seed);
        Self::init(backend, config, rng)
    }

    /// Draws per-cache thresholds and fills every allocation cache with a
    /// random number of blocks taken from `backend`, visiting the orders in
    /// random sequence.
    pub fn init(
        backend: BuddyAllocator,
        config: MadConfig,
        rng: DiversityRng,
    ) -> Result<Self, MadError> {
        let mut state = Self::with_empty_caches(backend, config, rng)?;
        let mut orders: Vec<u8> = (0..=state.config.max_order).collect();
        for i in (1..orders.len()).rev() {
            let j = state.rng.below(i + 1);
            orders.swap(i, j);
        }
        for order in orders {
            let cache = &state.alloc_caches[usize::from(order)];
            let requested = state.rng.between(cache.lower_bound(), cache.upper_bound());
            let obtained = state.fill_from_backend(order, requested);
            if obtained < requested {
                return Err(MadError::InitFailure {
                    order,
                    requested,
                    obtained,
                });
            }
        }
        Ok(state)
    }

    /// Draws thresholds but leaves every cache empty. Used to stage exact
    /// cache contents with [`stage`](Self::stage).
    pub fn with_empty_caches(
        backend: BuddyAllocator,
        config: MadConfig,
        mut rng: DiversityRng,
    ) -> Result<Self, MadError> {
        config.validate()?;
        if u64::from(backend.total_blocks()) != config.total_blocks
            || backend.max_order() != config.max_order
        {
            return Err(MadError::BackendMismatch);
        }
        let [lo_min, lo_max] = config.threshold_lower_range;
        let [up_min, up_max] = config.threshold_upper_range;
        let mut make = |order: u8, kind: CacheKind| {
            let lower = rng.between(lo_min, lo_max);
            let upper = rng.between(up_min, up_max);
            Cache::new(order, kind, lower, upper, config.cache_capacity)
        };
        let mut alloc_caches = Vec::new();
        let mut shadow_caches = Vec::new();
        for order in 0..=config.max_order {
            alloc_caches.push(make(order, CacheKind::Allocation));
            shadow_caches.push(make(order, CacheKind::Shadow));
        }
        Ok(Self {
            held: vec![NONE; config.total_blocks as usize],
            config,
            alloc_caches,
            shadow_caches,
            backend,
            rng,
            held_count: 0,
            counters: MadCounters::default(),
            verify: cfg!(debug_assertions),
        })
    }

    /// Claims `block` from the backend and places it in a cache at a random
    /// slot.
    pub fn stage(&mut self, kind: CacheKind, block: BlockId) -> Result<(), AllocError> {
        if block.order > self.config.max_order {
            return Err(AllocError::InvalidOrder(block.order));
        }
        self.backend.claim(block)?;
        let cache = match kind {
            CacheKind::Allocation => &mut self.alloc_caches[usize::from(block.order)],
            CacheKind::Shadow => &mut self.shadow_caches[usize::from(block.order)],
        };
        cache.insert_random(block, &mut self.rng);
        Ok(())
    }

    /// Turns the full tiling check after every public operation on or off.
    /// On by default in debug builds.
    pub fn set_verify(&mut self, verify: bool) {
        self.verify = verify;
    }

    pub fn config(&self) -> &MadConfig {
        &self.config
    }

    pub fn max_order(&self) -> u8 {
        self.config.max_order
    }

    pub fn total_blocks(&self) -> u32 {
        self.backend.total_blocks()
    }

    pub fn alloc_cache(&self, order: u8) -> &Cache {
        &self.alloc_caches[usize::from(order)]
    }

    pub fn shadow_cache(&self, order: u8) -> &Cache {
        &self.shadow_caches[usize::from(order)]
    }

    pub fn backend(&self) -> &BuddyAllocator {
        &self.backend
    }

    pub fn counters(&self) -> &MadCounters {
        &self.counters
    }

    pub fn view(&self) -> CacheView<'_> {
        CacheView {
            alloc_caches: &self.alloc_caches,
            shadow_caches: &self.shadow_caches,
            counters: &self.counters,
        }
    }

    /// Blocks currently handed out to clients.
    pub fn held_count(&self) -> u32 {
        self.held_count
    }

    pub fn is_held(&self, block: BlockId) -> bool {
        self.held.get(block.number as usize) == Some(&block.order)
    }

    /// Forks an independent stream from the layer's private one, for
    /// components (like the snapshot monitor) that belong to the defender.
    pub fn fork_rng(&mut self) -> DiversityRng {
        self.rng.fork()
    }

    pub fn alloc(&mut self, order: u8) -> Result<BlockId, AllocError> {
        self.alloc_with(order, &mut NoObserver)
    }

    pub fn free(&mut self, block: BlockId) -> Result<(), AllocError> {
        self.free_with(block, &mut NoObserver)
    }

    /// Serves a random block from the allocation cache of `order`, refilling
    /// it first if empty: shadow cache, then a split from above, then the
    /// backend.
    pub fn alloc_with(&mut self, order: u8, obs: &mut dyn Observer) -> Result<BlockId, AllocError> {
        if order > self.config.max_order {
            return Err(AllocError::InvalidOrder(order));
        }
        let o = usize::from(order);
        if self.alloc_caches[o].is_empty() {
            self.refill_with(order, obs)?;
        }
        let (_, block) = self.alloc_caches[o]
            .remove_random(&mut self.rng)
            .ok_or(AllocError::OutOfMemory)?;
        self.held[block.number as usize] = order;
        self.held_count += 1;
        self.counters.allocs += 1;
        self.emit(MadEvent::Alloc { block }, obs);
        self.verify_after("alloc");
        Ok(block)
    }

    /// Puts `block` at a random slot of its shadow cache, draining that
    /// cache first if it sits at its upper bound, then merges buddy pairs
    /// while the shadow cache is above its lower bound.
    pub fn free_with(&mut self, block: BlockId, obs: &mut dyn Observer) -> Result<(), AllocError> {
        if !self.is_held(block) {
            return Err(AllocError::DoubleFree(block));
        }
        self.held[block.number as usize] = NONE;
        self.held_count -= 1;
        self.counters.frees += 1;
        self.insert_shadow(block, obs);
        self.emit(MadEvent::Free { block }, obs);

        let mut level = block.order;
        while level < self.config.max_order {
            let shadow = &self.shadow_caches[usize::from(level)];
            if shadow.len() <= shadow.lower_bound() as usize || shadow.buddy_pairs() == 0 {
                break;
            }
            self.vertical_merge_with(level, obs);
            level += 1;
        }
        self.verify_after("free");
        Ok(())
    }

    /// Refill precedence for an empty allocation cache.
    fn refill_with(&mut self, order: u8, obs: &mut dyn Observer) -> Result<(), AllocError> {
        if self.horizontal_refill_with(order, obs) > 0 {
            return Ok(());
        }
        if order < self.config.max_order && self.inverse_vertical_split_with(order, obs).is_ok() {
            return Ok(());
        }
        self.backend_refill_with(order, obs)
    }

    pub fn horizontal_refill(&mut self, order: u8) -> u32 {
        self.horizontal_refill_with(order, &mut NoObserver)
    }

    /// Moves random shadow blocks to random allocation slots until the
    /// allocation cache reaches its lower bound or the shadow cache empties.
    pub fn horizontal_refill_with(&mut self, order: u8, obs: &mut dyn Observer) -> u32 {
        let o = usize::from(order);
        let target = self.alloc_caches[o].lower_bound() as usize;
        let mut moved = 0;
        while self.alloc_caches[o].len() < target {
            let Some((_, block)) = self.shadow_caches[o].remove_random(&mut self.rng) else {
                break;
            };
            self.alloc_caches[o].insert_random(block, &mut self.rng);
            moved += 1;
        }
        if moved > 0 {
            self.counters.horizontal_moves += u64::from(moved);
            self.emit(MadEvent::HorizontalRefill { order, moved }, obs);
        }
        moved
    }

    pub fn vertical_merge(&mut self, order: u8) -> u32 {
        self.vertical_merge_with(order, &mut NoObserver)
    }

    /// Merges every buddy pair in the shadow cache of `order` and places the
    /// parents at random slots one order up.
    pub fn vertical_merge_with(&mut self, order: u8, obs: &mut dyn Observer) -> u32 {
        if order >= self.config.max_order {
            return 0;
        }
        let parents = self.shadow_caches[usize::from(order)].take_buddy_pairs();
        for &parent in &parents {
            let (lower, _) = parent.halves();
            let joined = self.backend.join_allocated(lower);
            debug_assert_eq!(joined, Ok(parent));
            self.insert_shadow(parent, obs);
        }
        let pairs = parents.len() as u32;
        if pairs > 0 {
            self.counters.merges += u64::from(pairs);
            self.emit(MadEvent::VerticalMerge { order, pairs }, obs);
        }
        pairs
    }

    pub fn inverse_vertical_split(&mut self, order: u8) -> Result<(), MadError> {
        self.inverse_vertical_split_with(order, &mut NoObserver)
    }

    /// Splits a random block of the nearest non-empty higher allocation
    /// cache, cascading down one order at a time; both halves of every split
    /// land at random slots of the cache below.
    pub fn inverse_vertical_split_with(
        &mut self,
        order: u8,
        obs: &mut dyn Observer,
    ) -> Result<(), MadError> {
        let source_order = (order + 1..=self.config.max_order)
            .find(|&k| !self.alloc_caches[usize::from(k)].is_empty())
            .ok_or(MadError::SplitSourceEmpty)?;
        for level in (order + 1..=source_order).rev() {
            let (_, block) = self.alloc_caches[usize::from(level)]
                .remove_random(&mut self.rng)
                .expect("source cache checked non-empty");
            let (lower, upper) = self.backend.split_allocated(block)?;
            let below = &mut self.alloc_caches[usize::from(level - 1)];
            below.insert_random(lower, &mut self.rng);
            below.insert_random(upper, &mut self.rng);
            self.counters.splits += 1;
        }
        self.emit(
            MadEvent::InverseSplit {
                order,
                source_order,
            },
            obs,
        );
        Ok(())
    }

    pub fn backend_refill(&mut self, order: u8) -> Result<(), AllocError> {
        self.backend_refill_with(order, &mut NoObserver)
    }

    /// Pulls a freshly drawn count in `[lower_bound, upper_bound]` of blocks
    /// from the backend. A partial refill succeeds; nothing at all is
    /// `OutOfMemory`.
    pub fn backend_refill_with(
        &mut self,
        order: u8,
        obs: &mut dyn Observer,
    ) -> Result<(), AllocError> {
        if order > self.config.max_order {
            return Err(AllocError::InvalidOrder(order));
        }
        let cache = &self.alloc_caches[usize::from(order)];
        let room = cache.capacity() - cache.len() as u32;
        let count = self
            .rng
            .between(cache.lower_bound(), cache.upper_bound())
            .min(room);
        let obtained = self.fill_from_backend(order, count);
        if obtained == 0 {
            return Err(AllocError::OutOfMemory);
        }
        self.counters.backend_refills += 1;
        self.counters.backend_refill_blocks += u64::from(obtained);
        self.emit(
            MadEvent::BackendRefill {
                order,
                count: obtained,
            },
            obs,
        );
        Ok(())
    }

    pub fn drain_to_backend(&mut self, order: u8) -> u32 {
        self.drain_to_backend_with(order, &mut NoObserver)
    }

    /// Once a shadow cache sits at its upper bound, hands random blocks back
    /// to the backend until occupancy falls to a random target in
    /// `[lower_bound, upper_bound)`.
    pub fn drain_to_backend_with(&mut self, order: u8, obs: &mut dyn Observer) -> u32 {
        let o = usize::from(order);
        let cache = &self.shadow_caches[o];
        if !cache.at_upper_bound() {
            return 0;
        }
        let target = self
            .rng
            .between(cache.lower_bound(), cache.upper_bound() - 1) as usize;
        let mut count = 0;
        while self.shadow_caches[o].len() > target {
            let (_, block) = self.shadow_caches[o]
                .remove_random(&mut self.rng)
                .expect("non-empty above target");
            self.backend
                .free(block)
                .expect("cached blocks are allocated in the backend");
            count += 1;
        }
        self.counters.drains += 1;
        self.counters.drained_blocks += u64::from(count);
        self.emit(MadEvent::Drain { order, count }, obs);
        count
    }

    fn insert_shadow(&mut self, block: BlockId, obs: &mut dyn Observer) {
        let o = usize::from(block.order);
        if self.shadow_caches[o].at_upper_bound() {
            self.drain_to_backend_with(block.order, obs);
        }
        self.shadow_caches[o].insert_random(block, &mut self.rng);
    }

    fn fill_from_backend(&mut self, order: u8, count: u32) -> u32 {
        let o = usize::from(order);
        let mut obtained = 0;
        while obtained < count {
            match self.backend.alloc(order) {
                Ok(block) => {
                    self.alloc_caches[o].insert_random(block, &mut self.rng);
                    obtained += 1;
                }
                Err(_) => break,
            }
        }
        obtained
    }

    fn emit(&self, event: MadEvent, obs: &mut dyn Observer) {
        obs.on_event(&event, &self.view());
    }

    fn verify_after(&self, op: &str) {
        if self.verify {
            if let Err(msg) = self.check_invariants() {
                panic!("MAD invariant violated after {op}: {msg}");
            }
        }
    }

    /// Full coverage check: the backend's free and allocated blocks tile the
    /// range, and its allocated blocks are exactly the cached blocks plus
    /// the client-held ones, each claimed once, in caches of their order.
    pub fn check_invariants(&self) -> Result<(), String> {
        self.backend.check_invariants()?;
        let mut claimed = vec![false; self.held.len()];
        let mut claim = |b: BlockId, what: &str| -> Result<(), String> {
            if !self.backend.is_allocated(b) {
                return Err(format!(
                    "{what} block {b:?} is not allocated in the backend"
                ));
            }
            if std::mem::replace(&mut claimed[b.number as usize], true) {
                return Err(format!("{what} block {b:?} appears twice"));
            }
            Ok(())
        };
        let mut total = 0u32;
        for (kind, caches) in [
            ("allocation", &self.alloc_caches),
            ("shadow", &self.shadow_caches),
        ] {
            for (order, cache) in caches.iter().enumerate() {
                if cache.len() > cache.capacity() as usize {
                    return Err(format!("{kind} cache {order} over capacity"));
                }
                for b in cache.blocks() {
                    if usize::from(b.order) != order {
                        return Err(format!("{kind} cache {order} holds {b:?}"));
                    }
                    claim(b, kind)?;
                    total += 1;
                }
            }
        }
        let mut held = 0;
        for (n, &o) in self.held.iter().enumerate() {
            if o != NONE {
                claim(BlockId::new(n as u32, o), "client")?;
                held += 1;
            }
        }
        if held != self.held_count {
            return Err("client-held count out of sync".into());
        }
        total += held;
        if total != self.backend.allocated_count() {
            return Err(format!(
                "backend has {} allocated blocks but MAD accounts for {total}",
                self.backend.allocated_count()
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;

    fn config(lower: [u32; 2], upper: [u32; 2], seed: u64) -> MadConfig {
        MadConfig {
            total_blocks: 256,
            max_order: 3,
            cache_capacity: 16,
            threshold_lower_range: lower,
            threshold_upper_range: upper,
            seed,
        }
    }

    /// Empty caches with every lower bound 4 and every upper bound 8.
    fn staged() -> MadState {
        let cfg = config([4, 4], [8, 8], 1);
        let backend = BuddyAllocator::new(cfg.total_blocks, cfg.max_order).unwrap();
        let mut s = MadState::with_empty_caches(backend, cfg, DiversityRng::new(1)).unwrap();
        s.set_verify(true);
        s
    }

    fn b(number: u32, order: u8) -> BlockId {
        BlockId::new(number, order)
    }

    fn contents(c: &Cache) -> BTreeSet<BlockId> {
        c.blocks().collect()
    }

    fn small_desk(seed: u64) -> MadConfig {
        MadConfig {
            total_blocks: 4096,
            seed,
            ..MadConfig::default()
        }
    }

    #[test]
    fn init_bounds_stay_in_ranges() {
        for seed in 0..1000 {
            let s = MadState::new(small_desk(seed)).unwrap();
            for o in 0..=s.max_order() {
                for c in [s.alloc_cache(o), s.shadow_cache(o)] {
                    assert!((8..=16).contains(&c.lower_bound()), "seed {seed}");
                    assert!((32..=64).contains(&c.upper_bound()), "seed {seed}");
                    assert!(c.lower_bound() < c.upper_bound());
                }
                let a = s.alloc_cache(o);
                assert!((a.lower_bound()..=a.upper_bound()).contains(&(a.len() as u32)));
                assert!(s.shadow_cache(o).is_empty());
            }
        }
    }

    #[test]
    fn init_is_seed_determined() {
        let snapshot = |s: &MadState| {
            (0..=s.max_order())
                .map(|o| {
                    (
                        s.alloc_cache(o).blocks().collect::<Vec<_>>(),
                        s.alloc_cache(o).lower_bound(),
                    )
                })
                .collect::<Vec<_>>()
        };
        let one = MadState::new(small_desk(1)).unwrap();
        assert_eq!(
            snapshot(&one),
            snapshot(&MadState::new(small_desk(1)).unwrap())
        );
        assert_ne!(
            snapshot(&one),
            snapshot(&MadState::new(small_desk(2)).unwrap())
        );
    }

    #[test]
    fn init_fails_when_backend_is_short() {
        let cfg = MadConfig {
            total_blocks: 256,
            max_order: 3,
            ..MadConfig::default()
        };
        assert!(matches!(
            MadState::new(cfg),
            Err(MadError::InitFailure { .. })
        ));
    }

    #[test]
    fn singleton_cache_returns_its_block() {
        for seed in 0..20 {
            let mut s = staged();
            s.rng = DiversityRng::new(seed);
            s.stage(CacheKind::Allocation, b(40, 0)).unwrap();
            assert_eq!(s.alloc(0).unwrap(), b(40, 0));
            assert_eq!(s.counters().backend_refills, 0);
        }
    }

    #[test]
    fn free_lands_in_shadow_cache() {
        let mut s = staged();
        s.stage(CacheKind::Allocation, b(7, 0)).unwrap();
        let p = s.alloc(0).unwrap();
        s.free(p).unwrap();
        assert_eq!(contents(s.shadow_cache(0)), BTreeSet::from([p]));
        assert!(matches!(s.free(p), Err(AllocError::DoubleFree(_))));
    }

    #[test]
    fn free_into_full_shadow_drains_first() {
        let mut s = staged();
        for n in 0..8 {
            s.stage(CacheKind::Shadow, b(2 * n, 0)).unwrap();
        }
        s.stage(CacheKind::Allocation, b(101, 0)).unwrap();
        let p = s.alloc(0).unwrap();
        s.free(p).unwrap();
        assert_eq!(s.counters().drains, 1);
        let shadow = s.shadow_cache(0);
        assert!(shadow.len() <= shadow.upper_bound() as usize);
        assert!(shadow.contains(p));
    }

    #[test]
    fn horizontal_refill_stops_at_lower_bound() {
        let mut s = staged();
        for n in 0..8 {
            s.stage(CacheKind::Shadow, b(2 * n, 0)).unwrap();
        }
        assert_eq!(s.horizontal_refill(0), 4);
        assert_eq!((s.alloc_cache(0).len(), s.shadow_cache(0).len()), (4, 4));
        assert_eq!(s.horizontal_refill(1), 0);
    }

    #[test]
    fn horizontal_refill_empties_short_shadow() {
        let mut s = staged();
        s.stage(CacheKind::Shadow, b(0, 0)).unwrap();
        s.stage(CacheKind::Shadow, b(2, 0)).unwrap();
        assert_eq!(s.horizontal_refill(0), 2);
        assert!(s.shadow_cache(0).is_empty());
    }

    #[test]
    fn vertical_merge_moves_pair_up() {
        let mut s = staged();
        for block in [b(4, 0), b(5, 0), b(8, 0)] {
            s.stage(CacheKind::Shadow, block).unwrap();
        }
        assert_eq!(s.vertical_merge(0), 1);
        assert_eq!(contents(s.shadow_cache(0)), BTreeSet::from([b(8, 0)]));
        assert_eq!(contents(s.shadow_cache(1)), BTreeSet::from([b(4, 1)]));
        assert_eq!(s.vertical_merge(0), 0);
    }

    #[test]
    fn vertical_merge_chains() {
        let mut s = staged();
        for n in 0..4 {
            s.stage(CacheKind::Shadow, b(n, 0)).unwrap();
        }
        assert_eq!(s.vertical_merge(0), 2);
        assert_eq!(s.vertical_merge(1), 1);
        assert_eq!(contents(s.shadow_cache(2)), BTreeSet::from([b(0, 2)]));
        assert!(s.shadow_cache(0).is_empty() && s.shadow_cache(1).is_empty());
    }

    #[test]
    fn inverse_split_one_level() {
        let mut s = staged();
        s.stage(CacheKind::Allocation, b(8, 1)).unwrap();
        s.inverse_vertical_split(0).unwrap();
        assert_eq!(
            contents(s.alloc_cache(0)),
            BTreeSet::from([b(8, 0), b(9, 0)])
        );
    }

    #[test]
    fn inverse_split_cascades_and_keeps_coverage() {
        let mut s = staged();
        s.stage(CacheKind::Allocation, b(0, 2)).unwrap();
        s.inverse_vertical_split(0).unwrap();
        let mut pages: Vec<u32> = (0..=2)
            .flat_map(|o| s.alloc_cache(o).blocks().collect::<Vec<_>>())
            .flat_map(|blk| blk.number..blk.end())
            .collect();
        pages.sort_unstable();
        assert_eq!(pages, vec![0, 1, 2, 3]);
        assert_eq!(s.alloc_cache(1).len(), 1);
        assert_eq!(s.alloc_cache(0).len(), 2);
    }

    #[test]
    fn inverse_split_without_source_fails() {
        let mut s = staged();
        assert!(matches!(
            s.inverse_vertical_split(0),
            Err(MadError::SplitSourceEmpty)
        ));
    }

    #[test]
    fn split_then_merge_restores_block() {
        let mut s = staged();
        s.stage(CacheKind::Allocation, b(16, 1)).unwrap();
        s.inverse_vertical_split(0).unwrap();
        let x = s.alloc(0).unwrap();
        let y = s.alloc(0).unwrap();
        s.shadow_caches[0].insert_random(x, &mut s.rng);
        s.shadow_caches[0].insert_random(y, &mut s.rng);
        s.held[x.number as usize] = NONE;
        s.held[y.number as usize] = NONE;
        s.held_count -= 2;
        assert_eq!(s.vertical_merge(0), 1);
        assert_eq!(contents(s.shadow_cache(1)), BTreeSet::from([b(16, 1)]));
        s.check_invariants().unwrap();
    }

    #[test]
    fn backend_refill_count_in_bounds() {
        let mut counts = BTreeSet::new();
        for seed in 0..1000 {
            let mut s = staged();
            s.rng = DiversityRng::new(seed);
            s.backend_refill(0).unwrap();
            let n = s.alloc_cache(0).len();
            assert!((4..=8).contains(&n), "seed {seed}: {n}");
            counts.insert(n);
        }
        assert!(counts.len() > 1);
    }

    #[test]
    fn backend_refill_on_exhausted_backend() {
        let mut s = staged();
        while s.backend.alloc(3).is_ok() {}
        assert_eq!(s.backend_refill(0), Err(AllocError::OutOfMemory));
        assert_eq!(s.alloc(0), Err(AllocError::OutOfMemory));
    }

    #[test]
    fn drain_goes_below_upper_bound() {
        let mut s = staged();
        assert_eq!(s.drain_to_backend(0), 0);
        for n in 0..8 {
            s.stage(CacheKind::Shadow, b(2 * n, 0)).unwrap();
        }
        let before = s.backend.allocated_count();
        let drained = s.drain_to_backend(0);
        assert!(drained > 0);
        assert!(s.shadow_cache(0).len() < 8);
        assert_eq!(s.backend.allocated_count(), before - drained);
        s.check_invariants().unwrap();
    }

    #[test]
    fn alloc_free_alloc_recycles() {
        for seed in 0..200 {
            let mut s = MadState::new(small_desk(seed)).unwrap();
            let pool = contents(s.alloc_cache(0));
            let refills = s.counters().backend_refills;
            let phi = s.alloc(0).unwrap();
            s.free(phi).unwrap();
            let again = s.alloc(0).unwrap();
            assert!(pool.contains(&again));
            assert_eq!(s.counters().backend_refills, refills);
        }
    }

    #[test]
    fn small_working_set_never_hits_backend() {
        let mut s = MadState::new(small_desk(3)).unwrap();
        s.set_verify(true);
        let refills = s.counters().backend_refills;
        let mut live = Vec::new();
        for i in 0..5000u32 {
            if live.len() < 4 && i % 3 != 2 {
                live.push(s.alloc(0).unwrap());
            } else if let Some(x) = live.pop() {
                s.free(x).unwrap();
            }
        }
        assert_eq!(s.counters().backend_refills, refills);
    }

    #[test]
    fn event_trace_is_seed_determined() {
        let trace = |seed| {
            let mut s = MadState::new(small_desk(seed)).unwrap();
            let mut log = EventLog::default();
            let mut live = Vec::new();
            for i in 0..2000u32 {
                if i % 5 < 3 {
                    live.push(s.alloc_with((i % 3) as u8, &mut log).unwrap());
                } else if !live.is_empty() {
                    let x = live.swap_remove((i as usize * 7) % live.len());
                    s.free_with(x, &mut log).unwrap();
                }
            }
            log.events
        };
        assert_eq!(trace(9), trace(9));
        assert_ne!(trace(9), trace(10));
    }
}
