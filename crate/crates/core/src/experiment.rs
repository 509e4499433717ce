//! Experiment runner.
//!
//! Repetition `i` of a spec runs with seed `seed_base + i`. Every random
//! stream of that run (backend boot churn, MAD, adversary, target choice)
//! is derived from that seed alone, so repetitions can run in any order on
//! any thread and still write identical artifacts.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::adversary::{
    self, adversary_rng, exhaustive_massage, pick_vulnerable_in_mad, spray_massage, AdversaryError,
    AdversaryRng, ExhaustiveTrace, OrderPolicy, VulnerableConfig, WorstCaseOutcome,
    WorstCaseParams,
};
use crate::buddy::BuddyAllocator;
use crate::detect::{detection_rate, Alarm, AlarmSource, MonitorConfig, MonitoredMad};
use crate::mad::{ConfigError, MadConfig, MadError, MadState};
use crate::metrics::{desk_interval, MetricsError, RunRecord};
use crate::rng::{mix_seed, DiversityRng};
use crate::Allocator;

const SALT_BOOT: u64 = 0xB007;
const SALT_ADVERSARY: u64 = 0xADE5;
const SALT_TARGET: u64 = 0x7A26;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment: {0}")]
    Invalid(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Mad(#[from] MadError),
    #[error(transparent)]
    Adversary(#[from] AdversaryError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

impl ExperimentError {
    /// Whether the error comes from the spec rather than from running it.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            ExperimentError::Invalid(_) | ExperimentError::Config(_)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    SparseCompare,
    ExhaustiveDetect,
    Spray,
    WorstCase,
    Sweep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum AllocatorChoice {
    Mad,
    Buddy,
    Both,
}

impl AllocatorChoice {
    pub fn kinds(self) -> Vec<AllocKind> {
        match self {
            AllocatorChoice::Mad => vec![AllocKind::Mad],
            AllocatorChoice::Buddy => vec![AllocKind::Buddy],
            AllocatorChoice::Both => vec![AllocKind::Buddy, AllocKind::Mad],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AllocKind {
    Mad,
    Buddy,
}

impl AllocKind {
    pub fn name(self) -> &'static str {
        match self {
            AllocKind::Mad => "mad",
            AllocKind::Buddy => "buddy",
        }
    }
}

/// Parameter grid of a sweep; every combination is one point.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub cache_capacity: Vec<u32>,
    pub threshold_lower_range: Vec<[u32; 2]>,
    pub threshold_upper_range: Vec<[u32; 2]>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            cache_capacity: vec![64, 128],
            threshold_lower_range: vec![[4, 8], [8, 16]],
            threshold_upper_range: vec![[32, 64]],
        }
    }
}

impl SweepGrid {
    pub fn from_file(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(|source| ExperimentError::Io {
            path: path.to_owned(),
            source,
        })?;
        serde_json::from_str(&text)
            .map_err(|e| ExperimentError::Invalid(format!("sweep grid: {e}")))
    }

    pub fn points(&self, base: &MadConfig) -> Vec<MadConfig> {
        let mut points = Vec::new();
        for &cache_capacity in &self.cache_capacity {
            for &threshold_lower_range in &self.threshold_lower_range {
                for &threshold_upper_range in &self.threshold_upper_range {
                    points.push(MadConfig {
                        cache_capacity,
                        threshold_lower_range,
                        threshold_upper_range,
                        ..base.clone()
                    });
                }
            }
        }
        points
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeatmapSpec {
    pub stride: u64,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub scenario: Scenario,
    pub allocator: AllocatorChoice,
    pub mad_config: MadConfig,
    pub n_allocs: u64,
    pub repetitions: u32,
    pub seed_base: u64,
    #[serde(skip)]
    pub output_dir: PathBuf,
    pub lb: Option<u32>,
    pub ub: Option<u32>,
    pub spray_fraction: f64,
    pub round_budget: u32,
    pub worst_case_budget: u64,
    /// Attacker live set in the worst-case runs; 1/16 of memory if unset.
    pub hold_blocks: Option<f64>,
    pub monitor: MonitorConfig,
    pub grid: Option<SweepGrid>,
    pub heatmap: Option<HeatmapSpec>,
    /// Full tiling check after every MAD operation.
    pub verify: bool,
}

impl ExperimentSpec {
    pub fn new(scenario: Scenario, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            scenario,
            allocator: AllocatorChoice::Both,
            mad_config: MadConfig::default(),
            n_allocs: 10_000_000,
            repetitions: 50,
            seed_base: 0,
            output_dir: output_dir.into(),
            lb: None,
            ub: None,
            spray_fraction: 1.0 / 3.0,
            round_budget: 1_000,
            worst_case_budget: 5_000_000,
            hold_blocks: None,
            monitor: MonitorConfig::default(),
            grid: None,
            heatmap: None,
            verify: false,
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let invalid = |msg: &str| Err(ExperimentError::Invalid(msg.to_owned()));
        self.mad_config.validate()?;
        if self.repetitions == 0 {
            return invalid("repetitions must be at least 1");
        }
        if self.monitor.window == 0 || !(0.0..1.0).contains(&self.monitor.alarm_threshold) {
            return invalid("monitor window must be positive and threshold in [0, 1)");
        }
        match self.scenario {
            Scenario::SparseCompare | Scenario::Sweep
                if self.n_allocs < 2 * desk_interval(self.n_allocs) =>
            {
                invalid("too few allocations for two samples")
            }
            Scenario::Spray if !(self.spray_fraction > 0.0 && self.spray_fraction <= 1.0) => {
                invalid("spray fraction must lie in (0, 1]")
            }
            Scenario::WorstCase => match (self.lb, self.ub) {
                (Some(lb), Some(ub)) if lb >= 1 && lb <= ub => {
                    if self.allocator == AllocatorChoice::Buddy {
                        return invalid("worst-case runs against MAD only");
                    }
                    Ok(())
                }
                (Some(_), Some(_)) => invalid("worst-case needs 1 <= lb <= ub"),
                _ => invalid("worst-case needs --lb and --ub"),
            },
            Scenario::Sweep => match &self.grid {
                Some(g) if g.points(&self.mad_config).is_empty() => invalid("sweep grid is empty"),
                _ => Ok(()),
            },
            _ => Ok(()),
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..u64::from(self.repetitions))
            .map(|i| self.seed_base + i)
            .collect()
    }

    pub fn worst_case_params(&self) -> Option<WorstCaseParams> {
        let (lb, ub) = (self.lb?, self.ub?);
        let mut p = WorstCaseParams::new(lb, ub, self.mad_config.total_blocks as u32);
        p.budget = self.worst_case_budget;
        if let Some(h) = self.hold_blocks {
            p.hold_blocks = h;
        }
        Some(p)
    }
}

/// One line of `runs.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLine {
    pub strategy: String,
    pub allocator: AllocKind,
    pub seed: u64,
    pub allocs: u64,
    pub unique_blocks: u64,
    pub detected: bool,
    pub required_allocs: Option<u64>,
}

fn boot_rng(seed: u64) -> AdversaryRng {
    adversary_rng(mix_seed(seed, SALT_BOOT))
}

fn attacker_rng(seed: u64) -> AdversaryRng {
    adversary_rng(mix_seed(seed, SALT_ADVERSARY))
}

/// The backend every run starts from: memory after boot churn.
pub fn booted_backend(config: &MadConfig, seed: u64) -> Result<BuddyAllocator, ExperimentError> {
    Ok(
        BuddyAllocator::booted(config.total_blocks, config.max_order, &mut boot_rng(seed))
            .map_err(ConfigError::from)?,
    )
}

/// MAD initialised on a booted backend, its stream seeded with `seed`.
pub fn booted_mad(
    config: &MadConfig,
    seed: u64,
    verify: bool,
) -> Result<MadState, ExperimentError> {
    let config = MadConfig {
        seed,
        ..config.clone()
    };
    let backend = booted_backend(&config, seed)?;
    let mut mad = MadState::init(backend, config, DiversityRng::new(seed))?;
    mad.set_verify(verify);
    Ok(mad)
}

/// Either allocator behind one interface, so runs are written once.
#[derive(Debug, Clone)]
pub enum Subject {
    Buddy(BuddyAllocator),
    Mad(Box<MonitoredMad>),
}

impl Subject {
    pub fn build(
        kind: AllocKind,
        config: &MadConfig,
        seed: u64,
        monitor: MonitorConfig,
        verify: bool,
    ) -> Result<Self, ExperimentError> {
        Ok(match kind {
            AllocKind::Buddy => Subject::Buddy(booted_backend(config, seed)?),
            AllocKind::Mad => Subject::Mad(Box::new(MonitoredMad::new(
                booted_mad(config, seed, verify)?,
                monitor,
            ))),
        })
    }

    pub fn alarms(&self) -> &[Alarm] {
        match self {
            Subject::Buddy(_) => &[],
            Subject::Mad(m) => m.monitor.alarms(),
        }
    }

    pub fn mad(&self) -> Option<&MadState> {
        match self {
            Subject::Buddy(_) => None,
            Subject::Mad(m) => Some(&m.mad),
        }
    }
}

impl Allocator for Subject {
    fn alloc(&mut self, order: u8) -> Result<crate::BlockId, crate::AllocError> {
        match self {
            Subject::Buddy(b) => b.alloc(order),
            Subject::Mad(m) => m.alloc(order),
        }
    }

    fn free(&mut self, block: crate::BlockId) -> Result<(), crate::AllocError> {
        match self {
            Subject::Buddy(b) => b.free(block),
            Subject::Mad(m) => m.free(block),
        }
    }

    fn total_blocks(&self) -> u32 {
        match self {
            Subject::Buddy(b) => b.total_blocks(),
            Subject::Mad(m) => m.total_blocks(),
        }
    }

    fn max_order(&self) -> u8 {
        match self {
            Subject::Buddy(b) => b.max_order(),
            Subject::Mad(m) => Allocator::max_order(m.as_ref()),
        }
    }
}

impl AlarmSource for Subject {
    fn alarm_count(&self) -> usize {
        self.alarms().len()
    }
}

#[derive(Debug, Clone)]
pub struct SparseRun {
    pub allocator: AllocKind,
    pub seed: u64,
    pub record: RunRecord,
    pub alarms: Vec<Alarm>,
}

impl SparseRun {
    pub fn line(&self) -> RunLine {
        RunLine {
            strategy: "sparse".into(),
            allocator: self.allocator,
            seed: self.seed,
            allocs: self.record.total_allocs(),
            unique_blocks: self.record.unique_blocks(),
            detected: !self.alarms.is_empty(),
            required_allocs: None,
        }
    }
}

/// Sparse massaging with orders drawn geometrically over every order the
/// allocator supports.
pub fn sparse_run(
    kind: AllocKind,
    config: &MadConfig,
    n_allocs: u64,
    seed: u64,
    monitor: MonitorConfig,
    verify: bool,
    keep_log: bool,
) -> Result<SparseRun, ExperimentError> {
    let mut subject = Subject::build(kind, config, seed, monitor, verify)?;
    let policy = OrderPolicy::geometric(config.max_order);
    let mut record = RunRecord::new(subject.total_blocks(), desk_interval(n_allocs));
    if keep_log {
        record = record.with_log();
    }
    let trace = adversary::sparse_massage_into(
        &mut subject,
        n_allocs,
        &policy,
        &mut attacker_rng(seed),
        record,
    )?;
    Ok(SparseRun {
        allocator: kind,
        seed,
        record: trace.record,
        alarms: subject.alarms().to_vec(),
    })
}

#[derive(Debug, Clone)]
pub struct ExhaustiveRun {
    pub allocator: AllocKind,
    pub seed: u64,
    pub trace: ExhaustiveTrace,
    pub alarms: Vec<Alarm>,
}

impl ExhaustiveRun {
    pub fn line(&self) -> RunLine {
        RunLine {
            strategy: "exhaustive".into(),
            allocator: self.allocator,
            seed: self.seed,
            allocs: self.trace.allocs,
            unique_blocks: self.trace.allocs,
            detected: self.trace.alarmed_before_exhaustion(),
            required_allocs: Some(self.trace.allocs),
        }
    }
}

pub fn exhaustive_run(
    kind: AllocKind,
    config: &MadConfig,
    seed: u64,
    monitor: MonitorConfig,
    verify: bool,
) -> Result<ExhaustiveRun, ExperimentError> {
    let mut subject = Subject::build(kind, config, seed, monitor, verify)?;
    let trace = exhaustive_massage(&mut subject, &mut attacker_rng(seed))?;
    Ok(ExhaustiveRun {
        allocator: kind,
        seed,
        trace,
        alarms: subject.alarms().to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SprayRun {
    pub allocator: AllocKind,
    pub seed: u64,
    pub target: u32,
    /// `None` when the round budget ran out.
    pub rounds: Option<u32>,
    pub round_size: u64,
    pub observed: u64,
    pub detected: bool,
}

impl SprayRun {
    pub fn line(&self) -> RunLine {
        RunLine {
            strategy: "spray".into(),
            allocator: self.allocator,
            seed: self.seed,
            allocs: u64::from(self.rounds.unwrap_or(0)) * self.round_size,
            unique_blocks: self.observed,
            detected: self.detected,
            required_allocs: self.rounds.map(|r| u64::from(r) * self.round_size),
        }
    }
}

pub fn spray_run(
    kind: AllocKind,
    config: &MadConfig,
    seed: u64,
    fraction: f64,
    round_budget: u32,
    monitor: MonitorConfig,
    verify: bool,
) -> Result<SprayRun, ExperimentError> {
    let mut subject = Subject::build(kind, config, seed, monitor, verify)?;
    let target = adversary_rng(mix_seed(seed, SALT_TARGET)).gen_range(0..subject.total_blocks());
    let round_size = ((f64::from(subject.total_blocks()) * fraction).ceil() as u64).max(1);
    let (rounds, observed) = match spray_massage(
        &mut subject,
        fraction,
        target,
        round_budget,
        &mut attacker_rng(seed),
    ) {
        Ok(t) => (Some(t.rounds), t.observed),
        Err(AdversaryError::RoundBudgetExhausted(_)) => (None, 0),
        Err(e) => return Err(e.into()),
    };
    Ok(SprayRun {
        allocator: kind,
        seed,
        target,
        rounds,
        round_size,
        observed,
        detected: subject.alarm_count() > 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WorstCaseRun {
    pub seed: u64,
    pub target: VulnerableConfig,
    pub outcome: WorstCaseOutcome,
}

impl WorstCaseRun {
    pub fn line(&self) -> RunLine {
        RunLine {
            strategy: "worst-case".into(),
            allocator: AllocKind::Mad,
            seed: self.seed,
            allocs: self.outcome.requests,
            unique_blocks: 0,
            detected: self.outcome.detected,
            required_allocs: self.outcome.required_allocs,
        }
    }
}

/// One worst-case run against MAD. The vulnerable block is drawn around a
/// block currently sitting in one of MAD's allocation caches.
pub fn worst_case_run(
    config: &MadConfig,
    seed: u64,
    params: WorstCaseParams,
    monitor: MonitorConfig,
    verify: bool,
) -> Result<WorstCaseRun, ExperimentError> {
    let mad = booted_mad(config, seed, verify)?;
    let target = pick_vulnerable_in_mad(&mad, &mut adversary_rng(mix_seed(seed, SALT_TARGET)))
        .ok_or_else(|| {
            ExperimentError::Invalid("no vulnerable block inside MAD's caches".into())
        })?;
    let mut subject = MonitoredMad::new(mad, monitor);
    let outcome =
        adversary::worst_case_experiment(&mut subject, target, params, &mut attacker_rng(seed))?;
    Ok(WorstCaseRun {
        seed,
        target,
        outcome,
    })
}

/// Summary row of a batch of worst-case runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WorstCaseRow {
    pub lb: u32,
    pub ub: u32,
    pub runs: usize,
    pub timeouts: usize,
    /// Over runs that reached the configuration.
    pub average: f64,
    pub median: f64,
    pub detection_rate: f64,
    pub placement_rate: f64,
}

impl WorstCaseRow {
    pub fn from_runs(lb: u32, ub: u32, runs: &[WorstCaseRun]) -> Result<Self, ExperimentError> {
        let mut required: Vec<u64> = runs
            .iter()
            .filter_map(|r| r.outcome.required_allocs)
            .collect();
        required.sort_unstable();
        let detected: Vec<bool> = runs.iter().map(|r| r.outcome.detected).collect();
        let placed: Vec<bool> = runs.iter().map(|r| r.outcome.placement_success).collect();
        let rate =
            |v: &[bool]| detection_rate(v).map_err(|e| ExperimentError::Invalid(e.to_string()));
        Ok(Self {
            lb,
            ub,
            runs: runs.len(),
            timeouts: runs.len() - required.len(),
            average: mean(required.iter().map(|&r| r as f64)),
            median: median_sorted(&required),
            detection_rate: rate(&detected)?,
            placement_rate: rate(&placed)?,
        })
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Median of an ascending slice; the mean of the middle pair for even sizes.
pub fn median_sorted(sorted: &[u64]) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => sorted[n / 2] as f64,
        n => (sorted[n / 2 - 1] as f64 + sorted[n / 2] as f64) / 2.0,
    }
}

/// Per-point result of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub cache_capacity: u32,
    pub threshold_lower_range: [u32; 2],
    pub threshold_upper_range: [u32; 2],
    pub mad_attrition_rate: f64,
    pub buddy_attrition_rate: f64,
    pub max_recycle: f64,
    pub detection_rate: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.into(),
            passed,
            detail,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub scenario: Scenario,
    pub artifacts: Vec<Artifact>,
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    spec: &'a ExperimentSpec,
    seeds: Vec<u64>,
    artifacts: &'a [Artifact],
}

/// Collects artifact files under the output directory.
struct Writer {
    dir: PathBuf,
    artifacts: Vec<Artifact>,
}

impl Writer {
    fn new(dir: &Path) -> Result<Self, ExperimentError> {
        fs::create_dir_all(dir).map_err(|source| ExperimentError::Io {
            path: dir.to_owned(),
            source,
        })?;
        Ok(Self {
            dir: dir.to_owned(),
            artifacts: Vec::new(),
        })
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), ExperimentError> {
        let path = self.dir.join(rel);
        let io_err = |source| ExperimentError::Io {
            path: path.clone(),
            source,
        };
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err)?;
        }
        let mut file = BufWriter::new(fs::File::create(&path).map_err(io_err)?);
        file.write_all(bytes).map_err(io_err)?;
        file.flush().map_err(io_err)?;
        self.artifacts.push(Artifact {
            path: rel.to_owned(),
            sha256: hex(&Sha256::digest(bytes)),
        });
        Ok(())
    }

    fn write_with(
        &mut self,
        rel: &str,
        f: impl FnOnce(&mut Vec<u8>) -> io::Result<()>,
    ) -> Result<(), ExperimentError> {
        let mut buf = Vec::new();
        f(&mut buf).expect("writing to memory");
        self.write(rel, &buf)
    }

    fn finish(mut self, spec: &ExperimentSpec) -> Result<Vec<Artifact>, ExperimentError> {
        self.artifacts.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = Manifest {
            spec,
            seeds: spec.seeds(),
            artifacts: &self.artifacts,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises") + "\n";
        let path = self.dir.join("manifest.json");
        fs::write(&path, text).map_err(|source| ExperimentError::Io { path, source })?;
        Ok(self.artifacts)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes
        .iter()
        .fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

fn jsonl<T: Serialize>(items: impl IntoIterator<Item = T>) -> Vec<u8> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, &item).expect("record serialises");
        out.push(b'\n');
    }
    out
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Runs `spec`, writes its artifacts and manifest, and evaluates the
/// scenario's checks.
pub fn run(spec: &ExperimentSpec) -> Result<Report, ExperimentError> {
    spec.validate()?;
    let mut out = Writer::new(&spec.output_dir)?;
    let checks = match spec.scenario {
        Scenario::SparseCompare => run_sparse_compare(spec, &mut out)?,
        Scenario::ExhaustiveDetect => run_exhaustive(spec, &mut out)?,
        Scenario::Spray => run_spray(spec, &mut out)?,
        Scenario::WorstCase => run_worst_case(spec, &mut out)?,
        Scenario::Sweep => run_sweep(spec, &mut out)?,
    };
    let artifacts = out.finish(spec)?;
    Ok(Report {
        scenario: spec.scenario,
        artifacts,
        checks,
    })
}

fn run_sparse_compare(
    spec: &ExperimentSpec,
    out: &mut Writer,
) -> Result<Vec<Check>, ExperimentError> {
    let kinds = spec.allocator.kinds();
    let jobs: Vec<(AllocKind, u64)> = spec
        .seeds()
        .into_iter()
        .flat_map(|s| kinds.iter().map(move |&k| (k, s)))
        .collect();
    let runs: Vec<SparseRun> = jobs
        .par_iter()
        .map(|&(kind, seed)| {
            let log = spec.heatmap.is_some() && seed == spec.seed_base;
            sparse_run(
                kind,
                &spec.mad_config,
                spec.n_allocs,
                seed,
                spec.monitor,
                spec.verify,
                log,
            )
        })
        .collect::<Result<_, _>>()?;

    let mut summary =
        String::from("allocator,seed,attrition_rate,unique_blocks,min,q1,median,q3,max\n");
    for run in &runs {
        let name = run.allocator.name();
        out.write_with(&format!("unique_{name}_seed{}.csv", run.seed), |b| {
            run.record.write_unique_csv(b)
        })?;
        let stats = run.record.recycle_stats();
        let json = serde_json::to_vec_pretty(&stats).expect("summary serialises");
        out.write(&format!("recycle_{name}_seed{}.json", run.seed), &json)?;
        let s = stats;
        let _ = writeln!(
            summary,
            "{name},{},{},{},{},{},{},{},{}",
            run.seed,
            run.record.attrition_rate()?,
            run.record.unique_blocks(),
            s.min,
            s.q1,
            s.median,
            s.q3,
            s.max
        );
        if let (Some(h), true) = (spec.heatmap, run.seed == spec.seed_base) {
            for (i, frame) in run
                .record
                .heatmap_frames(h.stride, h.width)?
                .iter()
                .enumerate()
            {
                out.write_with(&format!("heatmap_{name}/frame_{i:05}.csv"), |b| {
                    frame.write_csv(b)
                })?;
            }
        }
    }
    out.write("summary.csv", summary.as_bytes())?;
    out.write("runs.jsonl", &jsonl(runs.iter().map(SparseRun::line)))?;
    let alarms: Vec<String> = runs
        .iter()
        .flat_map(|r| r.alarms.iter().map(Alarm::to_json_line))
        .collect();
    out.write(
        "alarms.jsonl",
        alarms
            .iter()
            .map(|l| l.clone() + "\n")
            .collect::<String>()
            .as_bytes(),
    )?;

    sparse_checks(&runs)
}

fn pair<T>(
    runs: &[T],
    seed: u64,
    kind: AllocKind,
    f: impl Fn(&T) -> (AllocKind, u64),
) -> Option<&T> {
    runs.iter().find(|r| f(r) == (kind, seed))
}

fn sparse_checks(runs: &[SparseRun]) -> Result<Vec<Check>, ExperimentError> {
    let key = |r: &SparseRun| (r.allocator, r.seed);
    let mut checks = Vec::new();
    let mad: Vec<&SparseRun> = runs
        .iter()
        .filter(|r| r.allocator == AllocKind::Mad)
        .collect();
    let buddy: Vec<&SparseRun> = runs
        .iter()
        .filter(|r| r.allocator == AllocKind::Buddy)
        .collect();
    if !mad.is_empty() {
        let worst = mad
            .iter()
            .map(|r| plateau_growth(r.record.unique_series()))
            .fold(0.0f64, f64::max);
        checks.push(Check::new(
            "plateau",
            worst < 1.25,
            format!("largest final / 10%-mark unique ratio {worst:.4}"),
        ));
        let zero_quartiles = mad.iter().all(|r| {
            let s = r.record.recycle_stats();
            s.min == 0.0 && s.q1 == 0.0 && s.median == 0.0
        });
        checks.push(Check::new(
            "recycle-quartiles",
            zero_quartiles,
            "MAD min = q1 = median = 0 in every run".into(),
        ));
    }
    if !mad.is_empty() && !buddy.is_empty() {
        let rates = |v: &[&SparseRun]| -> Result<f64, ExperimentError> {
            Ok(mean(
                v.iter()
                    .map(|r| r.record.attrition_rate())
                    .collect::<Result<Vec<_>, _>>()?
                    .into_iter(),
            ))
        };
        let (b, m) = (rates(&buddy)?, rates(&mad)?);
        let ratio = b / m;
        checks.push(Check::new(
            "attrition-ratio",
            ratio >= 3.0,
            format!("buddy {b:.4} / MAD {m:.4} = {ratio:.2}"),
        ));
        let mut worst = f64::INFINITY;
        for m in &mad {
            if let Some(b) = pair(runs, m.seed, AllocKind::Buddy, key) {
                worst = worst.min(m.record.recycle_stats().max / b.record.recycle_stats().max);
            }
        }
        checks.push(Check::new(
            "recycle-max-ratio",
            worst >= 3.0,
            format!("smallest paired max(MAD)/max(buddy) {worst:.2}"),
        ));
    }
    Ok(checks)
}

/// Final unique count over the count at the 10% mark of the run.
pub fn plateau_growth(series: &[u64]) -> f64 {
    if series.len() < 10 {
        return f64::NAN;
    }
    let mark = series[series.len() / 10 - 1].max(1);
    *series.last().expect("non-empty") as f64 / mark as f64
}

fn run_exhaustive(spec: &ExperimentSpec, out: &mut Writer) -> Result<Vec<Check>, ExperimentError> {
    let kinds = spec.allocator.kinds();
    let jobs: Vec<(AllocKind, u64)> = spec
        .seeds()
        .into_iter()
        .flat_map(|s| kinds.iter().map(move |&k| (k, s)))
        .collect();
    let runs: Vec<ExhaustiveRun> = jobs
        .par_iter()
        .map(|&(kind, seed)| {
            exhaustive_run(kind, &spec.mad_config, seed, spec.monitor, spec.verify)
        })
        .collect::<Result<_, _>>()?;
    let mut csv =
        String::from("allocator,seed,allocs,first_alarm,alarmed_before_exhaustion,victim_landed\n");
    for r in &runs {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            r.allocator.name(),
            r.seed,
            r.trace.allocs,
            opt(r.trace.first_alarm),
            r.trace.alarmed_before_exhaustion(),
            r.trace.victim_landed
        );
        if r.allocator == AllocKind::Mad {
            let lines: String = r.alarms.iter().map(|a| a.to_json_line() + "\n").collect();
            out.write(
                &format!("events_mad_seed{}.jsonl", r.seed),
                lines.as_bytes(),
            )?;
        }
    }
    out.write("exhaustive.csv", csv.as_bytes())?;
    out.write("runs.jsonl", &jsonl(runs.iter().map(ExhaustiveRun::line)))?;

    let mut checks = Vec::new();
    let mad: Vec<bool> = runs
        .iter()
        .filter(|r| r.allocator == AllocKind::Mad)
        .map(|r| r.trace.alarmed_before_exhaustion())
        .collect();
    if !mad.is_empty() {
        let n = mad.iter().filter(|&&d| d).count();
        checks.push(Check::new(
            "exhaustion-alarms",
            n == mad.len(),
            format!("{n}/{} MAD runs alarmed before OutOfMemory", mad.len()),
        ));
    }
    let buddy: Vec<bool> = runs
        .iter()
        .filter(|r| r.allocator == AllocKind::Buddy)
        .map(|r| r.trace.victim_landed)
        .collect();
    if !buddy.is_empty() {
        let n = buddy.iter().filter(|&&d| d).count();
        checks.push(Check::new(
            "baseline-placement",
            n == buddy.len(),
            format!(
                "victim landed on the freed block in {n}/{} buddy runs",
                buddy.len()
            ),
        ));
    }
    Ok(checks)
}

fn run_spray(spec: &ExperimentSpec, out: &mut Writer) -> Result<Vec<Check>, ExperimentError> {
    let kinds = spec.allocator.kinds();
    let jobs: Vec<(AllocKind, u64)> = spec
        .seeds()
        .into_iter()
        .flat_map(|s| kinds.iter().map(move |&k| (k, s)))
        .collect();
    let runs: Vec<SprayRun> = jobs
        .par_iter()
        .map(|&(kind, seed)| {
            spray_run(
                kind,
                &spec.mad_config,
                seed,
                spec.spray_fraction,
                spec.round_budget,
                spec.monitor,
                spec.verify,
            )
        })
        .collect::<Result<_, _>>()?;
    let mut csv = String::from("allocator,seed,target,rounds,round_size,detected\n");
    for r in &runs {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            r.allocator.name(),
            r.seed,
            r.target,
            opt(r.rounds),
            r.round_size,
            r.detected
        );
    }
    out.write("spray.csv", csv.as_bytes())?;
    out.write("runs.jsonl", &jsonl(runs.iter().map(SprayRun::line)))?;

    let mut checks = Vec::new();
    let bound = (1.0 / spec.spray_fraction).ceil() as u32 + 1;
    let buddy: Vec<&SprayRun> = runs
        .iter()
        .filter(|r| r.allocator == AllocKind::Buddy)
        .collect();
    if !buddy.is_empty() {
        let ok = buddy.iter().all(|r| r.rounds.is_some_and(|n| n <= bound));
        checks.push(Check::new(
            "baseline-spray-rounds",
            ok,
            format!("every buddy run hits its target within {bound} rounds"),
        ));
    }
    Ok(checks)
}

fn run_worst_case(spec: &ExperimentSpec, out: &mut Writer) -> Result<Vec<Check>, ExperimentError> {
    let params = spec.worst_case_params().expect("validated");
    let runs: Vec<WorstCaseRun> = spec
        .seeds()
        .par_iter()
        .map(|&seed| worst_case_run(&spec.mad_config, seed, params, spec.monitor, spec.verify))
        .collect::<Result<_, _>>()?;
    let mut csv = String::from(
        "seed,target,required_allocs,requests,detected,victim_landed,placement_success\n",
    );
    for r in &runs {
        let o = r.outcome;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            r.seed,
            r.target.target.number,
            opt(o.required_allocs),
            o.requests,
            o.detected,
            o.victim_landed,
            o.placement_success
        );
    }
    out.write("worst_case_runs.csv", csv.as_bytes())?;
    out.write("runs.jsonl", &jsonl(runs.iter().map(WorstCaseRun::line)))?;
    let row = WorstCaseRow::from_runs(params.lb, params.ub, &runs)?;
    let table = format!(
        "lb,ub,runs,timeouts,average,median,detection_rate,placement_rate\n{},{},{},{},{},{},{},{}\n",
        row.lb,
        row.ub,
        row.runs,
        row.timeouts,
        row.average,
        row.median,
        row.detection_rate,
        row.placement_rate
    );
    out.write("worst_case.csv", table.as_bytes())?;
    Ok(vec![
        Check::new(
            "average-above-median",
            row.average > row.median,
            format!("average {:.1}, median {:.1}", row.average, row.median),
        ),
        Check::new(
            "detection-rate",
            row.detection_rate >= 0.95,
            format!("{:.3}", row.detection_rate),
        ),
        Check::new(
            "placement-rate",
            row.placement_rate <= 0.005,
            format!("{:.4}", row.placement_rate),
        ),
    ])
}

fn sweep_point(
    spec: &ExperimentSpec,
    config: &MadConfig,
) -> Result<(f64, f64, f64, f64), ExperimentError> {
    config.validate()?;
    let seeds = spec.seeds();
    let mut mad_rates = Vec::new();
    let mut buddy_rates = Vec::new();
    let mut max_recycle = Vec::new();
    let mut detected = Vec::new();
    for &seed in &seeds {
        let m = sparse_run(
            AllocKind::Mad,
            config,
            spec.n_allocs,
            seed,
            spec.monitor,
            spec.verify,
            false,
        )?;
        mad_rates.push(m.record.attrition_rate()?);
        max_recycle.push(m.record.recycle_stats().max);
        let b = sparse_run(
            AllocKind::Buddy,
            config,
            spec.n_allocs,
            seed,
            spec.monitor,
            spec.verify,
            false,
        )?;
        buddy_rates.push(b.record.attrition_rate()?);
        let e = exhaustive_run(AllocKind::Mad, config, seed, spec.monitor, spec.verify)?;
        detected.push(e.trace.alarmed_before_exhaustion());
    }
    let rate = detection_rate(&detected).map_err(|e| ExperimentError::Invalid(e.to_string()))?;
    Ok((
        mean(mad_rates.into_iter()),
        mean(buddy_rates.into_iter()),
        mean(max_recycle.into_iter()),
        rate,
    ))
}

fn run_sweep(spec: &ExperimentSpec, out: &mut Writer) -> Result<Vec<Check>, ExperimentError> {
    let grid = spec.grid.clone().unwrap_or_default();
    let points = grid.points(&spec.mad_config);
    let rows: Vec<SweepRow> = points
        .par_iter()
        .map(|config| {
            let mut row = SweepRow {
                cache_capacity: config.cache_capacity,
                threshold_lower_range: config.threshold_lower_range,
                threshold_upper_range: config.threshold_upper_range,
                mad_attrition_rate: f64::NAN,
                buddy_attrition_rate: f64::NAN,
                max_recycle: f64::NAN,
                detection_rate: f64::NAN,
                error: None,
            };
            match sweep_point(spec, config) {
                Ok((m, b, r, d)) => {
                    row.mad_attrition_rate = m;
                    row.buddy_attrition_rate = b;
                    row.max_recycle = r;
                    row.detection_rate = d;
                }
                Err(e) => row.error = Some(e.to_string()),
            }
            row
        })
        .collect();
    let mut csv = String::from(
        "cache_capacity,lower_min,lower_max,upper_min,upper_max,attrition_rate,buddy_attrition_rate,max_recycle,detection_rate,error\n",
    );
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{}",
            r.cache_capacity,
            r.threshold_lower_range[0],
            r.threshold_lower_range[1],
            r.threshold_upper_range[0],
            r.threshold_upper_range[1],
            r.mad_attrition_rate,
            r.buddy_attrition_rate,
            r.max_recycle,
            r.detection_rate,
            r.error.as_deref().unwrap_or("").replace(',', ";")
        );
    }
    out.write("sweep.csv", csv.as_bytes())?;
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    Ok(vec![Check::new(
        "sweep-points",
        failed == 0,
        format!("{failed} of {} points failed", rows.len()),
    )])
}

/// Summary of one worst-case batch with the checks evaluated on it, for
/// callers that drive several rows themselves.
pub fn worst_case_batch(
    config: &MadConfig,
    seeds: &[u64],
    params: WorstCaseParams,
    monitor: MonitorConfig,
) -> Result<(WorstCaseRow, Vec<WorstCaseRun>), ExperimentError> {
    let runs: Vec<WorstCaseRun> = seeds
        .par_iter()
        .map(|&seed| worst_case_run(config, seed, params, monitor, false))
        .collect::<Result<_, _>>()?;
    Ok((WorstCaseRow::from_runs(params.lb, params.ub, &runs)?, runs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_expands_to_cartesian_product() {
        let points = SweepGrid::default().points(&MadConfig::default());
        assert_eq!(points.len(), 4);
        assert_eq!(points[1].threshold_lower_range, [8, 16]);
        assert_eq!(points[2].cache_capacity, 128);
    }

    #[test]
    fn seeds_follow_the_base() {
        let mut spec = ExperimentSpec::new(Scenario::Spray, "out");
        spec.seed_base = 7;
        spec.repetitions = 3;
        assert_eq!(spec.seeds(), vec![7, 8, 9]);
    }

    #[test]
    fn worst_case_needs_bounds_and_mad() {
        let mut spec = ExperimentSpec::new(Scenario::WorstCase, "out");
        assert!(spec.validate().is_err());
        spec.lb = Some(8);
        spec.ub = Some(4);
        assert!(spec.validate().is_err());
        spec.ub = Some(16);
        spec.validate().unwrap();
        spec.allocator = AllocatorChoice::Buddy;
        assert!(spec.validate().unwrap_err().is_usage());
    }

    #[test]
    fn plateau_growth_uses_the_tenth_sample() {
        let series: Vec<u64> = (1..=20).collect();
        assert_eq!(plateau_growth(&series), 10.0);
        assert_eq!(plateau_growth(&[5; 40]), 1.0);
        assert!(plateau_growth(&[1, 2]).is_nan());
    }

    #[test]
    fn paired_runs_share_boot_and_attacker_streams() {
        let config = MadConfig::default();
        let a = booted_backend(&config, 3).unwrap();
        let b = booted_backend(&config, 3).unwrap();
        let top = |x: &BuddyAllocator| x.free_blocks(config.max_order).take(16).collect::<Vec<_>>();
        assert_eq!(top(&a), top(&b));
        assert_ne!(top(&a), top(&booted_backend(&config, 4).unwrap()));
    }

    #[test]
    fn hex_encoding() {
        assert_eq!(hex(&[0x00, 0xab, 0x7f]), "00ab7f");
    }
}
