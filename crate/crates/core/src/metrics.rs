//! Per-run statistics: unique-block time series, attrition, recycling
//! frequencies, and heat-map frames. Everything is counted in order-0
//! blocks, whatever the order of the allocation that touched them.

use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::buddy::BlockId;

/// Sampling stride of full-scale (4 Mi block) runs.
pub const FULL_SCALE_INTERVAL: u64 = 25_000;
/// Samples per desk-scale run.
pub const DESK_SAMPLES: u64 = 40_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("need at least two samples, have {0}")]
    InsufficientSamples(usize),
    #[error("attrition rate must be positive")]
    ZeroRate,
    #[error("heat-map frames need an allocation log; build the record with `with_log`")]
    NoLog,
    #[error("grid width must be positive")]
    ZeroWidth,
}

/// Sampling stride that yields [`DESK_SAMPLES`] samples over `n_allocs`.
pub fn desk_interval(n_allocs: u64) -> u64 {
    (n_allocs / DESK_SAMPLES).max(1)
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    interval: u64,
    unique_series: Vec<u64>,
    recycle_counts: Vec<u64>,
    unique: u64,
    total_allocs: u64,
    log: Option<Vec<BlockId>>,
}

impl RunRecord {
    pub fn new(total_blocks: u32, interval: u64) -> Self {
        Self {
            interval: interval.max(1),
            unique_series: Vec::new(),
            recycle_counts: vec![0; total_blocks as usize],
            unique: 0,
            total_allocs: 0,
            log: None,
        }
    }

    /// Also keeps every allocated block, so heat-map frames can be replayed.
    pub fn with_log(mut self) -> Self {
        self.log = Some(Vec::new());
        self
    }

    pub fn record_alloc(&mut self, block: BlockId) {
        for count in &mut self.recycle_counts[block.number as usize..block.end() as usize] {
            if *count == 0 {
                self.unique += 1;
            }
            *count += 1;
        }
        if let Some(log) = &mut self.log {
            log.push(block);
        }
        self.total_allocs += 1;
        if self.total_allocs.is_multiple_of(self.interval) {
            self.unique_series.push(self.unique);
        }
    }

    pub fn interval(&self) -> u64 {
        self.interval
    }

    /// Cumulative unique order-0 blocks at each interval boundary.
    pub fn unique_series(&self) -> &[u64] {
        &self.unique_series
    }

    pub fn recycle_counts(&self) -> &[u64] {
        &self.recycle_counts
    }

    pub fn unique_blocks(&self) -> u64 {
        self.unique
    }

    pub fn total_allocs(&self) -> u64 {
        self.total_allocs
    }

    /// New unique blocks per interval, averaged over the run.
    pub fn attrition_rate(&self) -> Result<f64, MetricsError> {
        attrition_rate(&self.unique_series)
    }

    pub fn recycle_stats(&self) -> FiveNumber {
        recycle_stats(&self.recycle_counts)
    }

    /// Recycle counters after every `frame_stride` allocations (and after
    /// the last one), reshaped row-major into grids `width` cells wide.
    pub fn heatmap_frames(
        &self,
        frame_stride: u64,
        width: usize,
    ) -> Result<Vec<Grid>, MetricsError> {
        let log = self.log.as_ref().ok_or(MetricsError::NoLog)?;
        if width == 0 {
            return Err(MetricsError::ZeroWidth);
        }
        let stride = frame_stride.max(1) as usize;
        let mut counts = vec![0u64; self.recycle_counts.len()];
        let mut frames = Vec::with_capacity(log.len().div_ceil(stride));
        for (i, b) in log.iter().enumerate() {
            for c in &mut counts[b.number as usize..b.end() as usize] {
                *c += 1;
            }
            if (i + 1) % stride == 0 || i + 1 == log.len() {
                frames.push(Grid::from_counts(&counts, width));
            }
        }
        Ok(frames)
    }

    pub fn write_unique_csv(&self, out: impl Write) -> io::Result<()> {
        write_unique_csv(out, self.interval, &self.unique_series)
    }
}

/// Mean of successive differences.
pub fn attrition_rate(series: &[u64]) -> Result<f64, MetricsError> {
    if series.len() < 2 {
        return Err(MetricsError::InsufficientSamples(series.len()));
    }
    let first = series[0] as f64;
    let last = series[series.len() - 1] as f64;
    Ok((last - first) / (series.len() - 1) as f64)
}

/// Allocations needed to see every one of `total_blocks` blocks at
/// `rate_per_alloc` new blocks per allocation.
pub fn extrapolate_enumeration(
    rate_per_alloc: f64,
    total_blocks: u64,
) -> Result<f64, MetricsError> {
    if rate_per_alloc.is_nan() || rate_per_alloc <= 0.0 {
        return Err(MetricsError::ZeroRate);
    }
    Ok(total_blocks as f64 / rate_per_alloc)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiveNumber {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Five-number summary with linearly interpolated quartiles.
pub fn recycle_stats(counts: &[u64]) -> FiveNumber {
    if counts.is_empty() {
        return FiveNumber {
            min: 0.0,
            q1: 0.0,
            median: 0.0,
            q3: 0.0,
            max: 0.0,
        };
    }
    let mut sorted = counts.to_vec();
    sorted.sort_unstable();
    let q = |p: f64| {
        let pos = p * (sorted.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        sorted[lo] as f64 + (sorted[hi] as f64 - sorted[lo] as f64) * frac
    };
    FiveNumber {
        min: sorted[0] as f64,
        q1: q(0.25),
        median: q(0.5),
        q3: q(0.75),
        max: sorted[sorted.len() - 1] as f64,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
    pub cells: Vec<u64>,
}

impl Grid {
    fn from_counts(counts: &[u64], width: usize) -> Self {
        let height = counts.len().div_ceil(width);
        let mut cells = counts.to_vec();
        cells.resize(width * height, 0);
        Grid {
            width,
            height,
            cells,
        }
    }

    pub fn total(&self) -> u64 {
        self.cells.iter().sum()
    }

    pub fn write_csv(&self, mut out: impl Write) -> io::Result<()> {
        for row in self.cells.chunks(self.width) {
            let line: Vec<String> = row.iter().map(u64::to_string).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        Ok(())
    }
}

pub fn write_unique_csv(mut out: impl Write, interval: u64, series: &[u64]) -> io::Result<()> {
    writeln!(out, "alloc_index,unique_blocks")?;
    for (i, u) in series.iter().enumerate() {
        writeln!(out, "{},{}", (i as u64 + 1) * interval, u)?;
    }
    Ok(())
}

/// Writes one CSV per frame as `frame_00000.csv`, `frame_00001.csv`, ...
pub fn write_frames(dir: &Path, frames: &[Grid]) -> io::Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, frame) in frames.iter().enumerate() {
        let file = std::fs::File::create(dir.join(format!("frame_{i:05}.csv")))?;
        frame.write_csv(io::BufWriter::new(file))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_alloc_counts_one_unique() {
        let mut r = RunRecord::new(16, 1);
        r.record_alloc(BlockId::new(5, 0));
        assert_eq!(r.unique_blocks(), 1);
        r.record_alloc(BlockId::new(5, 0));
        assert_eq!(r.unique_blocks(), 1);
        assert_eq!(r.recycle_counts()[5], 2);
        assert_eq!(r.unique_series(), &[1, 1]);
    }

    #[test]
    fn higher_order_alloc_touches_its_span() {
        let mut r = RunRecord::new(16, 10);
        r.record_alloc(BlockId::new(0, 2));
        assert_eq!(&r.recycle_counts()[..5], &[1, 1, 1, 1, 0]);
        assert_eq!(r.unique_blocks(), 4);
    }

    #[test]
    fn series_sampled_at_interval_boundaries() {
        let mut r = RunRecord::new(64, 3);
        for n in 0..10 {
            r.record_alloc(BlockId::new(n, 0));
        }
        assert_eq!(r.unique_series(), &[3, 6, 9]);
    }

    #[test]
    fn attrition_examples() {
        assert_eq!(attrition_rate(&[0, 10, 20]).unwrap(), 10.0);
        assert_eq!(attrition_rate(&[7, 7, 7, 7]).unwrap(), 0.0);
        assert_eq!(
            attrition_rate(&[7]),
            Err(MetricsError::InsufficientSamples(1))
        );
    }

    #[test]
    fn extrapolation_matches_reported_rates() {
        let total = 4_194_304;
        let buddy = extrapolate_enumeration(1.4832 / 25_000.0, total).unwrap();
        let mad = extrapolate_enumeration(0.3563 / 25_000.0, total).unwrap();
        // 4 Mi blocks at 1.4832 per 25k allocations is 70.7e9 allocations.
        assert!((buddy / 1e9 - 70.70).abs() < 0.01, "{buddy}");
        assert!((mad / 1e9 - 294.3).abs() < 0.1, "{mad}");
        assert_eq!(extrapolate_enumeration(1.0, total).unwrap(), total as f64);
        assert_eq!(
            extrapolate_enumeration(0.0, total),
            Err(MetricsError::ZeroRate)
        );
    }

    #[test]
    fn five_number_summary() {
        let s = recycle_stats(&[0, 0, 0, 0, 0, 0, 3, 9]);
        assert_eq!((s.min, s.q1, s.median), (0.0, 0.0, 0.0));
        assert_eq!(s.max, 9.0);
        assert!((s.q3 - 0.75).abs() < 1e-12);
        let z = recycle_stats(&[0; 32]);
        assert_eq!(z, recycle_stats(&[]));
        assert_eq!(z.max, 0.0);
    }

    #[test]
    fn heatmap_grid_shape_and_frame_count() {
        let mut r = RunRecord::new(16, 1).with_log();
        for n in 0..10u32 {
            r.record_alloc(BlockId::new(n % 16, 0));
        }
        let frames = r.heatmap_frames(4, 4).unwrap();
        assert_eq!(frames.len(), 3);
        assert_eq!((frames[0].width, frames[0].height), (4, 4));
        let last = frames.last().unwrap();
        assert_eq!(last.total(), r.recycle_counts().iter().sum::<u64>());
    }

    #[test]
    fn heatmap_requires_log() {
        let r = RunRecord::new(16, 1);
        assert_eq!(r.heatmap_frames(4, 4), Err(MetricsError::NoLog));
    }

    #[test]
    fn unique_csv_layout() {
        let mut out = Vec::new();
        write_unique_csv(&mut out, 250, &[3, 5]).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "alloc_index,unique_blocks\n250,3\n500,5\n"
        );
    }
}
