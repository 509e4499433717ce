use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::buddy::{validate_geometry, GeometryError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("invalid threshold configuration: {0}")]
    Thresholds(String),
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed config: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Default top order for the 65,536-block default memory. Scaling order 10
/// on 4 Mi blocks down by the same factor as memory keeps 4,096 top-level
/// blocks, and keeps the initial cache fill near 1.5% of memory.
pub const DESK_MAX_ORDER: u8 = 4;

/// Geometry and diversification parameters of one MAD instance.
///
/// Per-cache bounds are drawn from the two threshold ranges, independently
/// for every cache, when the state is initialised.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MadConfig {
    pub total_blocks: u64,
    pub max_order: u8,
    pub cache_capacity: u32,
    pub threshold_lower_range: [u32; 2],
    pub threshold_upper_range: [u32; 2],
    pub seed: u64,
}

impl Default for MadConfig {
    fn default() -> Self {
        Self {
            total_blocks: 65_536,
            max_order: DESK_MAX_ORDER,
            cache_capacity: 64,
            threshold_lower_range: [8, 16],
            threshold_upper_range: [32, 64],
            seed: 0,
        }
    }
}

impl MadConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let config: MadConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        validate_geometry(self.total_blocks, self.max_order)?;
        let [lo_min, lo_max] = self.threshold_lower_range;
        let [up_min, up_max] = self.threshold_upper_range;
        let fail = |msg: String| Err(ConfigError::Thresholds(msg));
        if lo_min == 0 {
            return fail("lower bounds must be at least 1".into());
        }
        if lo_min > lo_max || up_min > up_max {
            return fail("each range must be written as [min, max]".into());
        }
        if lo_max >= up_min {
            return fail(format!(
                "lower range {:?} must lie strictly below upper range {:?}",
                self.threshold_lower_range, self.threshold_upper_range
            ));
        }
        if up_max > self.cache_capacity {
            return fail(format!(
                "upper bound {up_max} exceeds cache capacity {}",
                self.cache_capacity
            ));
        }
        Ok(())
    }

    /// Worst-case number of order-0 blocks the initial fill can request.
    pub fn max_initial_footprint(&self) -> u64 {
        let per_order = u64::from(self.threshold_upper_range[1]);
        (0..=self.max_order).map(|o| per_order << o).sum()
    }
}
