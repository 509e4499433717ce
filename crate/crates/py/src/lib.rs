//! Python bindings: the buddy backend, the MAD layer with its monitor, and
//! the experiment runner. Blocks cross the boundary as `(number, order)`
//! tuples.

use std::path::PathBuf;

use pyo3::exceptions::{PyMemoryError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use mad_sim::adversary::{adversary_rng, WorstCaseParams};
use mad_sim::detect::{MonitorConfig, MonitoredMad};
use mad_sim::experiment::{self, AllocKind, AllocatorChoice, ExperimentSpec, Scenario};
use mad_sim::{AllocError, Allocator, BlockId, MadConfig};

type Block = (u32, u8);

fn block(b: Block) -> BlockId {
    BlockId::new(b.0, b.1)
}

fn tuple(b: BlockId) -> Block {
    (b.number, b.order)
}

fn alloc_err(e: AllocError) -> PyErr {
    match e {
        AllocError::OutOfMemory => PyMemoryError::new_err("out of memory"),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn to_py<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(runtime_err)?;
    let json = py.import("json")?;
    Ok(json.call_method1("loads", (text,))?.unbind())
}

fn config_from(
    total_blocks: u64,
    max_order: Option<u8>,
    seed: u64,
    config_json: Option<&str>,
) -> PyResult<MadConfig> {
    let mut config = match config_json {
        Some(text) => MadConfig::from_json(text).map_err(value_err)?,
        None => MadConfig::default(),
    };
    if config_json.is_none() {
        config.total_blocks = total_blocks;
    }
    if let Some(o) = max_order {
        config.max_order = o;
    }
    config.seed = seed;
    config.validate().map_err(value_err)?;
    Ok(config)
}

/// Textbook buddy allocator with FIFO free lists.
#[pyclass(name = "BuddyAllocator")]
struct PyBuddy {
    inner: mad_sim::BuddyAllocator,
}

#[pymethods]
impl PyBuddy {
    /// A fresh allocator, or a boot-churned one when `boot_seed` is given.
    #[new]
    #[pyo3(signature = (total_blocks, max_order, boot_seed=None))]
    fn new(total_blocks: u64, max_order: u8, boot_seed: Option<u64>) -> PyResult<Self> {
        let inner = match boot_seed {
            Some(s) => {
                mad_sim::BuddyAllocator::booted(total_blocks, max_order, &mut adversary_rng(s))
            }
            None => mad_sim::BuddyAllocator::new(total_blocks, max_order),
        }
        .map_err(value_err)?;
        Ok(Self { inner })
    }

    fn alloc(&mut self, order: u8) -> PyResult<Block> {
        self.inner.alloc(order).map(tuple).map_err(alloc_err)
    }

    fn free(&mut self, b: Block) -> PyResult<()> {
        self.inner.free(block(b)).map_err(alloc_err)
    }

    fn free_blocks(&self, order: u8) -> Vec<Block> {
        self.inner.free_blocks(order).map(tuple).collect()
    }

    #[getter]
    fn total_blocks(&self) -> u32 {
        self.inner.total_blocks()
    }

    #[getter]
    fn max_order(&self) -> u8 {
        self.inner.max_order()
    }

    #[getter]
    fn allocated_count(&self) -> u32 {
        self.inner.allocated_count()
    }

    fn check_invariants(&self) -> PyResult<()> {
        self.inner.check_invariants().map_err(runtime_err)
    }
}

/// The MAD layer over a boot-churned backend, with the snapshot monitor
/// attached.
#[pyclass(name = "Mad")]
struct PyMad {
    inner: MonitoredMad,
}

#[pymethods]
impl PyMad {
    /// `config_json` takes the same keys as the CLI's `--config` file and,
    /// when given, replaces `total_blocks`.
    #[new]
    #[pyo3(signature = (seed=0, total_blocks=65_536, max_order=None, config_json=None, window=None, verify=false))]
    fn new(
        seed: u64,
        total_blocks: u64,
        max_order: Option<u8>,
        config_json: Option<&str>,
        window: Option<usize>,
        verify: bool,
    ) -> PyResult<Self> {
        let config = config_from(total_blocks, max_order, seed, config_json)?;
        let mad = experiment::booted_mad(&config, seed, verify).map_err(value_err)?;
        let mut monitor = MonitorConfig::default();
        if let Some(w) = window {
            monitor.window = w;
        }
        Ok(Self {
            inner: MonitoredMad::new(mad, monitor),
        })
    }

    fn alloc(&mut self, order: u8) -> PyResult<Block> {
        self.inner.alloc(order).map(tuple).map_err(alloc_err)
    }

    fn free(&mut self, b: Block) -> PyResult<()> {
        self.inner.free(block(b)).map_err(alloc_err)
    }

    fn alloc_cache(&self, order: u8) -> PyResult<Vec<Block>> {
        self.check_order(order)?;
        Ok(self
            .inner
            .mad
            .alloc_cache(order)
            .blocks()
            .map(tuple)
            .collect())
    }

    fn shadow_cache(&self, order: u8) -> PyResult<Vec<Block>> {
        self.check_order(order)?;
        Ok(self
            .inner
            .mad
            .shadow_cache(order)
            .blocks()
            .map(tuple)
            .collect())
    }

    /// Lower and upper bound of the allocation and shadow cache of `order`.
    fn bounds(&self, order: u8) -> PyResult<((u32, u32), (u32, u32))> {
        self.check_order(order)?;
        let a = self.inner.mad.alloc_cache(order);
        let s = self.inner.mad.shadow_cache(order);
        Ok((
            (a.lower_bound(), a.upper_bound()),
            (s.lower_bound(), s.upper_bound()),
        ))
    }

    fn counters(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, self.inner.mad.counters())
    }

    fn alarms(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.monitor.alarms())
    }

    #[getter]
    fn held_count(&self) -> u32 {
        self.inner.mad.held_count()
    }

    #[getter]
    fn total_blocks(&self) -> u32 {
        self.inner.mad.total_blocks()
    }

    #[getter]
    fn max_order(&self) -> u8 {
        self.inner.mad.max_order()
    }

    fn check_invariants(&self) -> PyResult<()> {
        self.inner.mad.check_invariants().map_err(runtime_err)
    }
}

impl PyMad {
    fn check_order(&self, order: u8) -> PyResult<()> {
        if order > self.inner.mad.max_order() {
            return Err(PyValueError::new_err(format!(
                "order {order} above max order"
            )));
        }
        Ok(())
    }
}

fn kind(name: &str) -> PyResult<AllocKind> {
    match name {
        "mad" => Ok(AllocKind::Mad),
        "buddy" => Ok(AllocKind::Buddy),
        other => Err(PyValueError::new_err(format!(
            "unknown allocator {other:?}"
        ))),
    }
}

/// Sparse massaging of one allocator; returns the unique-block series and
/// summary statistics.
#[pyfunction]
#[pyo3(signature = (allocator, n_allocs, seed=0, total_blocks=65_536))]
fn sparse_run(
    py: Python<'_>,
    allocator: &str,
    n_allocs: u64,
    seed: u64,
    total_blocks: u64,
) -> PyResult<Py<PyAny>> {
    let config = config_from(total_blocks, None, seed, None)?;
    let run = py.detach(|| {
        experiment::sparse_run(
            kind(allocator)?,
            &config,
            n_allocs,
            seed,
            MonitorConfig::default(),
            false,
            false,
        )
        .map_err(runtime_err)
    })?;
    let out = PyDict::new(py);
    out.set_item("interval", run.record.interval())?;
    out.set_item("unique_series", run.record.unique_series().to_vec())?;
    out.set_item("unique_blocks", run.record.unique_blocks())?;
    out.set_item(
        "attrition_rate",
        run.record.attrition_rate().map_err(runtime_err)?,
    )?;
    out.set_item("recycle", to_py(py, &run.record.recycle_stats())?)?;
    out.set_item("alarms", run.alarms.len())?;
    Ok(out.into_any().unbind())
}

/// One worst-case run against MAD.
#[pyfunction]
#[pyo3(signature = (lb, ub, seed=0, total_blocks=65_536, budget=5_000_000))]
fn worst_case_run(
    py: Python<'_>,
    lb: u32,
    ub: u32,
    seed: u64,
    total_blocks: u64,
    budget: u64,
) -> PyResult<Py<PyAny>> {
    if lb == 0 || lb > ub {
        return Err(PyValueError::new_err("need 1 <= lb <= ub"));
    }
    let config = config_from(total_blocks, None, seed, None)?;
    let params = WorstCaseParams {
        budget,
        ..WorstCaseParams::new(lb, ub, total_blocks as u32)
    };
    let run = py
        .detach(|| {
            experiment::worst_case_run(&config, seed, params, MonitorConfig::default(), false)
        })
        .map_err(runtime_err)?;
    to_py(py, &run.outcome)
}

fn parse_enum<T: clap::ValueEnum>(s: &str) -> PyResult<T> {
    T::from_str(s, false).map_err(PyValueError::new_err)
}

/// Runs a full experiment like `mad-sim run` and returns its report.
#[pyfunction]
#[pyo3(signature = (scenario, out_dir, allocator="both", n_allocs=10_000_000, repetitions=50, seed=0, total_blocks=65_536, lb=None, ub=None))]
#[allow(clippy::too_many_arguments)]
fn run_experiment(
    py: Python<'_>,
    scenario: &str,
    out_dir: PathBuf,
    allocator: &str,
    n_allocs: u64,
    repetitions: u32,
    seed: u64,
    total_blocks: u64,
    lb: Option<u32>,
    ub: Option<u32>,
) -> PyResult<Py<PyAny>> {
    let mut spec = ExperimentSpec::new(parse_enum::<Scenario>(scenario)?, out_dir);
    spec.allocator = parse_enum::<AllocatorChoice>(allocator)?;
    spec.n_allocs = n_allocs;
    spec.repetitions = repetitions;
    spec.seed_base = seed;
    spec.mad_config.total_blocks = total_blocks;
    spec.lb = lb;
    spec.ub = ub;
    let report = py.detach(|| experiment::run(&spec)).map_err(|e| {
        if e.is_usage() {
            value_err(e)
        } else {
            runtime_err(e)
        }
    })?;
    to_py(py, &report)
}

#[pymodule]
fn mad_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBuddy>()?;
    m.add_class::<PyMad>()?;
    m.add_function(wrap_pyfunction!(sparse_run, m)?)?;
    m.add_function(wrap_pyfunction!(worst_case_run, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
