//! Deterministic simulation of a diversified memory-allocation layer (MAD)
//! running on top of a buddy allocator, together with memory-massaging
//! adversaries, an exhaustion detector, and run metrics.

pub mod adversary;
pub mod buddy;
pub mod detect;
pub mod error;
pub mod experiment;
pub mod mad;
pub mod metrics;
pub mod rng;

pub use buddy::{buddy_of, BlockId, BuddyAllocator};
pub use error::AllocError;
pub use mad::{MadConfig, MadError, MadState};
pub use rng::DiversityRng;

/// The only surface adversaries get: allocate and free.
pub trait Allocator {
    fn alloc(&mut self, order: u8) -> Result<BlockId, AllocError>;
    fn free(&mut self, block: BlockId) -> Result<(), AllocError>;
    fn total_blocks(&self) -> u32;
    fn max_order(&self) -> u8;
}

impl Allocator for BuddyAllocator {
    fn alloc(&mut self, order: u8) -> Result<BlockId, AllocError> {
        BuddyAllocator::alloc(self, order)
    }

    fn free(&mut self, block: BlockId) -> Result<(), AllocError> {
        BuddyAllocator::free(self, block)
    }

    fn total_blocks(&self) -> u32 {
        BuddyAllocator::total_blocks(self)
    }

    fn max_order(&self) -> u8 {
        BuddyAllocator::max_order(self)
    }
}

impl Allocator for MadState {
    fn alloc(&mut self, order: u8) -> Result<BlockId, AllocError> {
        MadState::alloc(self, order)
    }

    fn free(&mut self, block: BlockId) -> Result<(), AllocError> {
        MadState::free(self, block)
    }

    fn total_blocks(&self) -> u32 {
        MadState::total_blocks(self)
    }

    fn max_order(&self) -> u8 {
        MadState::max_order(self)
    }
}
