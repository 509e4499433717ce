use thiserror::Error;

use crate::buddy::BlockId;

/// Failures shared by every allocator front end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum AllocError {
    #[error("out of memory")]
    OutOfMemory,
    #[error("block {0:?} is not currently allocated")]
    DoubleFree(BlockId),
    #[error("order {0} exceeds the configured maximum")]
    InvalidOrder(u8),
}
