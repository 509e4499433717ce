//! Snapshot-based detection of exhaustive-allocation massaging.
//!
//! The monitor looks at the MAD caches every `n` allocations, with `n`
//! redrawn uniformly from `[13, 997]` after each look. A snapshot is
//! asymptomatic when the caches show the footprint of exhaustion (all empty,
//! or a backend refill since the previous look) or of mass release (a full
//! shadow cache, or a drain since the previous look). An alarm is raised
//! whenever asymptomatic snapshots make up more than `alarm_threshold` of a
//! sliding window.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::buddy::BlockId;
use crate::error::AllocError;
use crate::mad::{CacheView, MadEvent, MadState, Observer};
use crate::rng::DiversityRng;
use crate::Allocator;

pub const SNAPSHOT_INTERVAL_MIN: u32 = 13;
pub const SNAPSHOT_INTERVAL_MAX: u32 = 997;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    /// Benign-looking configuration.
    Symptomatic,
    AsymptomaticExhaust,
    AsymptomaticRelease,
}

impl Classification {
    pub fn is_asymptomatic(self) -> bool {
        self != Classification::Symptomatic
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Occupancy {
    pub len: u32,
    pub upper_bound: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Snapshot {
    pub alloc: Vec<Occupancy>,
    pub shadow: Vec<Occupancy>,
    pub refills_since: u64,
    pub drains_since: u64,
    pub alloc_events: u64,
}

pub fn classify_snapshot(snap: &Snapshot) -> Classification {
    let all_empty = snap.alloc.iter().chain(&snap.shadow).all(|o| o.len == 0);
    if all_empty || snap.refills_since > 0 {
        return Classification::AsymptomaticExhaust;
    }
    let shadow_full = snap.shadow.iter().any(|o| o.len >= o.upper_bound);
    if shadow_full || snap.drains_since > 0 {
        return Classification::AsymptomaticRelease;
    }
    Classification::Symptomatic
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Alarm {
    pub alloc_index: u64,
    pub window_fraction: f64,
    pub class: Classification,
}

impl Alarm {
    /// One line of the run's JSON-lines event log.
    pub fn to_json_line(&self) -> String {
        #[derive(Serialize)]
        struct Line<'a> {
            event: &'static str,
            #[serde(flatten)]
            alarm: &'a Alarm,
        }
        serde_json::to_string(&Line {
            event: "alarm",
            alarm: self,
        })
        .expect("alarm serialises")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonitorConfig {
    pub window: usize,
    pub alarm_threshold: f64,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            window: 8,
            alarm_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SnapshotMonitor {
    config: MonitorConfig,
    rng: DiversityRng,
    countdown: u32,
    window: VecDeque<bool>,
    window_asymptomatic: usize,
    asymptomatic_count: u64,
    total_count: u64,
    alloc_events: u64,
    last_refills: u64,
    last_drains: u64,
    intervals: Vec<u32>,
    alarms: Vec<Alarm>,
}

impl SnapshotMonitor {
    pub fn new(config: MonitorConfig, mut rng: DiversityRng) -> Self {
        let first = draw_interval(&mut rng);
        Self {
            config,
            rng,
            countdown: first,
            window: VecDeque::with_capacity(config.window),
            window_asymptomatic: 0,
            asymptomatic_count: 0,
            total_count: 0,
            alloc_events: 0,
            last_refills: 0,
            last_drains: 0,
            intervals: vec![first],
            alarms: Vec::new(),
        }
    }

    /// Counts one allocation; at the end of the current interval takes and
    /// classifies a snapshot and possibly raises an alarm.
    pub fn on_alloc(&mut self, view: &CacheView<'_>) -> Option<Alarm> {
        self.alloc_events += 1;
        self.countdown -= 1;
        if self.countdown > 0 {
            return None;
        }
        let next = draw_interval(&mut self.rng);
        self.countdown = next;
        self.intervals.push(next);

        let snap = self.snapshot(view);
        let class = classify_snapshot(&snap);
        let asymptomatic = class.is_asymptomatic();
        self.total_count += 1;
        if asymptomatic {
            self.asymptomatic_count += 1;
            self.window_asymptomatic += 1;
        }
        self.window.push_back(asymptomatic);
        if self.window.len() > self.config.window && self.window.pop_front() == Some(true) {
            self.window_asymptomatic -= 1;
        }
        let fraction = self.window_fraction();
        if fraction > self.config.alarm_threshold {
            let alarm = Alarm {
                alloc_index: self.alloc_events,
                window_fraction: fraction,
                class,
            };
            self.alarms.push(alarm);
            return Some(alarm);
        }
        None
    }

    /// Asymptomatic share of the window, counted against the full window
    /// length so that a handful of early snapshots cannot raise an alarm.
    pub fn window_fraction(&self) -> f64 {
        self.window_asymptomatic as f64 / self.config.window as f64
    }

    fn snapshot(&mut self, view: &CacheView<'_>) -> Snapshot {
        let occ = |c: &crate::mad::Cache| Occupancy {
            len: c.len() as u32,
            upper_bound: c.upper_bound(),
        };
        let refills = view.counters.backend_refills;
        let drains = view.counters.drains;
        let snap = Snapshot {
            alloc: view.alloc_caches.iter().map(occ).collect(),
            shadow: view.shadow_caches.iter().map(occ).collect(),
            refills_since: refills - self.last_refills,
            drains_since: drains - self.last_drains,
            alloc_events: self.alloc_events,
        };
        self.last_refills = refills;
        self.last_drains = drains;
        snap
    }

    pub fn alarms(&self) -> &[Alarm] {
        &self.alarms
    }

    pub fn alarmed(&self) -> bool {
        !self.alarms.is_empty()
    }

    /// Every snapshot interval drawn so far, including the pending one.
    pub fn intervals(&self) -> &[u32] {
        &self.intervals
    }

    pub fn snapshots_taken(&self) -> u64 {
        self.total_count
    }

    pub fn asymptomatic_count(&self) -> u64 {
        self.asymptomatic_count
    }

    pub fn alloc_events(&self) -> u64 {
        self.alloc_events
    }
}

impl Observer for SnapshotMonitor {
    fn on_event(&mut self, event: &MadEvent, view: &CacheView<'_>) {
        if let MadEvent::Alloc { .. } = event {
            self.on_alloc(view);
        }
    }
}

fn draw_interval(rng: &mut DiversityRng) -> u32 {
    rng.between(SNAPSHOT_INTERVAL_MIN, SNAPSHOT_INTERVAL_MAX)
}

/// Whether an allocator can report a detector alarm. Experiments read
/// this; adversary strategies never base decisions on it.
pub trait AlarmSource {
    fn alarm_count(&self) -> usize;
}

impl AlarmSource for crate::buddy::BuddyAllocator {
    fn alarm_count(&self) -> usize {
        0
    }
}

/// A MAD instance with its snapshot monitor attached.
#[derive(Debug, Clone)]
pub struct MonitoredMad {
    pub mad: MadState,
    pub monitor: SnapshotMonitor,
}

impl MonitoredMad {
    /// Attaches a monitor whose stream is forked from the layer's own.
    pub fn new(mut mad: MadState, config: MonitorConfig) -> Self {
        let rng = mad.fork_rng();
        Self {
            mad,
            monitor: SnapshotMonitor::new(config, rng),
        }
    }
}

impl Allocator for MonitoredMad {
    fn alloc(&mut self, order: u8) -> Result<BlockId, AllocError> {
        self.mad.alloc_with(order, &mut self.monitor)
    }

    fn free(&mut self, block: BlockId) -> Result<(), AllocError> {
        self.mad.free_with(block, &mut self.monitor)
    }

    fn total_blocks(&self) -> u32 {
        self.mad.total_blocks()
    }

    fn max_order(&self) -> u8 {
        self.mad.max_order()
    }
}

impl AlarmSource for MonitoredMad {
    fn alarm_count(&self) -> usize {
        self.monitor.alarms().len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum DetectionError {
    #[error("no runs to aggregate")]
    EmptyInput,
}

/// Fraction of runs in which an alarm fired before the attack succeeded.
pub fn detection_rate(detected: &[bool]) -> Result<f64, DetectionError> {
    if detected.is_empty() {
        return Err(DetectionError::EmptyInput);
    }
    Ok(detected.iter().filter(|&&d| d).count() as f64 / detected.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn occ(len: u32, upper: u32) -> Occupancy {
        Occupancy {
            len,
            upper_bound: upper,
        }
    }

    fn snap(alloc: &[u32], shadow: &[u32], refills: u64, drains: u64) -> Snapshot {
        Snapshot {
            alloc: alloc.iter().map(|&l| occ(l, 8)).collect(),
            shadow: shadow.iter().map(|&l| occ(l, 8)).collect(),
            refills_since: refills,
            drains_since: drains,
            alloc_events: 0,
        }
    }

    #[test]
    fn empty_caches_are_exhaust() {
        assert_eq!(
            classify_snapshot(&snap(&[0, 0, 0], &[0, 0, 0], 0, 0)),
            Classification::AsymptomaticExhaust
        );
    }

    #[test]
    fn refill_is_exhaust() {
        assert_eq!(
            classify_snapshot(&snap(&[3, 1, 0], &[2, 0, 0], 1, 0)),
            Classification::AsymptomaticExhaust
        );
    }

    #[test]
    fn drain_is_release() {
        assert_eq!(
            classify_snapshot(&snap(&[3, 1, 0], &[2, 0, 0], 0, 2)),
            Classification::AsymptomaticRelease
        );
    }

    #[test]
    fn full_shadow_is_release() {
        assert_eq!(
            classify_snapshot(&snap(&[3, 1, 0], &[8, 0, 0], 0, 0)),
            Classification::AsymptomaticRelease
        );
    }

    #[test]
    fn quiet_partial_caches_are_benign() {
        assert_eq!(
            classify_snapshot(&snap(&[3, 1, 5], &[2, 0, 4], 0, 0)),
            Classification::Symptomatic
        );
    }

    #[test]
    fn detection_rate_examples() {
        let mut runs = vec![true; 50];
        assert_eq!(detection_rate(&runs).unwrap(), 1.0);
        runs[7] = false;
        assert!((detection_rate(&runs).unwrap() - 0.98).abs() < 1e-12);
        assert_eq!(detection_rate(&[false; 10]).unwrap(), 0.0);
        assert_eq!(detection_rate(&[]), Err(DetectionError::EmptyInput));
    }

    #[test]
    fn alarm_json_line_shape() {
        let a = Alarm {
            alloc_index: 1234,
            window_fraction: 0.5625,
            class: Classification::AsymptomaticExhaust,
        };
        let v: serde_json::Value = serde_json::from_str(&a.to_json_line()).unwrap();
        assert_eq!(v["event"], "alarm");
        assert_eq!(v["alloc_index"], 1234);
        assert_eq!(v["window_fraction"], 0.5625);
        assert_eq!(v["class"], "asymptomatic_exhaust");
    }
}
