//! End-to-end runs: baseline (one process) or pipelined (host + worker),
//! summarised in the per-batch reporting format.

use edgepipe_core::data::SyntheticData;
use edgepipe_core::graph::{plan_split, CostModel, LinkModel, ModelGraph, PartitionSpec};
use edgepipe_core::trace::{analyze_series, percent_decrease, RunSummary, TraceSink};
use edgepipe_core::Tensor;

use crate::host::{BatchReport, HostSession, Pipeline, PipelineConfig};
use crate::serial::SerialTrainer;
use crate::worker::{spawn_loopback, WorkerOptions};
use crate::{Result, RuntimeError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WorkerTarget {
    /// In-process worker on an ephemeral localhost port.
    Loopback,
    Remote(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitChoice {
    Auto,
    Index(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Baseline,
    Pipelined,
}

#[derive(Clone)]
pub struct Experiment {
    /// Model with initialised weights; its batch axis is ignored.
    pub graph: ModelGraph,
    pub batches: usize,
    pub microbatches: usize,
    pub microbatch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub data_seed: u64,
    pub split: SplitChoice,
    pub link: LinkModel,
    /// Synthetic cost file text; enables sleep-padded compute.
    pub cost_text: Option<String>,
    pub worker: WorkerTarget,
    pub worker_options: WorkerOptions,
    pub trace: TraceSink,
}

impl Experiment {
    pub fn new(graph: ModelGraph) -> Experiment {
        let microbatch_size = graph.batch_size();
        Experiment {
            graph,
            batches: 1,
            microbatches: 8,
            microbatch_size,
            lr: 0.05,
            seed: 0,
            data_seed: 1,
            split: SplitChoice::Auto,
            link: LinkModel::IDEAL,
            cost_text: None,
            worker: WorkerTarget::Loopback,
            worker_options: WorkerOptions::default(),
            trace: TraceSink::disabled(),
        }
    }

    pub fn costs(&self) -> Result<Option<CostModel>> {
        Ok(match &self.cost_text {
            Some(t) => Some(CostModel::parse(t, self.graph.len())?),
            None => None,
        })
    }

    pub fn data(&self) -> SyntheticData {
        SyntheticData::new(
            &self.graph.input_shape()[1..],
            self.graph.num_classes().unwrap_or(2),
            self.data_seed,
        )
    }

    pub fn batch_size(&self) -> usize {
        self.microbatches * self.microbatch_size
    }

    /// Cut to use: the explicit index, or the planner's choice under the
    /// synthetic costs (measured costs when none are given).
    pub fn partition(&self) -> Result<PartitionSpec> {
        let g = self.graph.with_batch(self.microbatch_size)?;
        match self.split {
            SplitChoice::Index(c) => Ok(g.partition(c)?),
            SplitChoice::Auto => {
                let costs = match self.costs()? {
                    Some(c) => c,
                    None => {
                        let (x, y) = self.data().batch(0, self.microbatch_size);
                        CostModel::measure(&g, &x, &y)?
                    }
                };
                Ok(plan_split(&g, &costs, &self.link, self.microbatches)?.spec)
            }
        }
    }

    pub fn pipeline_config(&self) -> Result<PipelineConfig> {
        Ok(PipelineConfig {
            microbatches: self.microbatches,
            microbatch_size: self.microbatch_size,
            lr: self.lr,
            seed: self.seed,
            costs: self.costs()?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub mode: RunMode,
    pub model: String,
    pub batches: usize,
    pub spec: Option<PartitionSpec>,
    pub reports: Vec<BatchReport>,
    pub summary: RunSummary,
    /// Final parameters, `(layer, slot, tensor)` ascending.
    pub weights: Vec<(usize, usize, Tensor)>,
}

fn with_pipeline<T>(exp: &Experiment, f: impl FnOnce(&mut Pipeline) -> Result<T>) -> Result<(T, PartitionSpec)> {
    let spec = exp.partition()?;
    let config = exp.pipeline_config()?;
    match &exp.worker {
        WorkerTarget::Loopback => {
            let mut opts = exp.worker_options.clone();
            if opts.cost_text.is_none() {
                opts.cost_text = exp.cost_text.clone();
            }
            if !opts.trace.is_enabled() {
                opts.trace = exp.trace.clone();
            }
            let worker = spawn_loopback(opts)?;
            let session = HostSession::connect(worker.addr, exp.trace.clone())?;
            let mut p = Pipeline::setup(session, &exp.graph, spec.clone(), config)?;
            let out = f(&mut p);
            p.session.shutdown()?;
            worker.join()?;
            Ok((out?, spec))
        }
        WorkerTarget::Remote(addr) => {
            let session = HostSession::connect(addr.as_str(), exp.trace.clone())?;
            let mut p = Pipeline::setup(session, &exp.graph, spec.clone(), config)?;
            Ok((f(&mut p)?, spec))
        }
    }
}

pub fn run_experiment(exp: &Experiment, mode: RunMode) -> Result<RunOutcome> {
    if exp.batches == 0 {
        return Err(RuntimeError::Config("need at least one batch".into()));
    }
    let data = exp.data();
    let bs = exp.batch_size();
    let (reports, weights, spec) = match mode {
        RunMode::Baseline => {
            let mut t = SerialTrainer::new(&exp.graph, exp.microbatch_size, exp.microbatches, exp.seed)?
                .with_trace(exp.trace.clone());
            if let Some(c) = exp.costs()? {
                t = t.with_costs(&c);
            }
            let mut reports = Vec::with_capacity(exp.batches);
            for b in 0..exp.batches as u64 {
                let (x, y) = data.batch(b, bs);
                reports.push(t.train_batch(b, &x, &y, exp.lr)?);
            }
            (reports, t.weights(), None)
        }
        RunMode::Pipelined => {
            let ((reports, weights), spec) = with_pipeline(exp, |p| {
                let mut reports = Vec::with_capacity(exp.batches);
                for b in 0..exp.batches as u64 {
                    let (x, y) = data.batch(b, bs);
                    reports.push(p.train_batch(b, &x, &y)?);
                }
                Ok((reports, p.weights()?))
            })?;
            (reports, weights, Some(spec))
        }
    };
    let summary = analyze_series(&reports.iter().map(|r| r.wall_ms).collect::<Vec<_>>())?;
    Ok(RunOutcome {
        mode,
        model: exp.graph.name.clone(),
        batches: exp.batches,
        spec,
        reports,
        summary,
        weights,
    })
}

/// Forward-only runs; returns the per-batch outputs and wall times (ms).
pub fn run_inference(exp: &Experiment, mode: RunMode) -> Result<(Vec<Tensor>, Vec<f64>)> {
    let data = exp.data();
    let bs = exp.batch_size();
    let mut outs = Vec::with_capacity(exp.batches);
    let mut times = Vec::with_capacity(exp.batches);
    match mode {
        RunMode::Baseline => {
            let t = SerialTrainer::new(&exp.graph, exp.microbatch_size, exp.microbatches, exp.seed)?;
            for b in 0..exp.batches as u64 {
                let start = std::time::Instant::now();
                outs.push(t.infer(&data.batch(b, bs).0)?);
                times.push(start.elapsed().as_secs_f64() * 1e3);
            }
        }
        RunMode::Pipelined => {
            with_pipeline(exp, |p| {
                for b in 0..exp.batches as u64 {
                    let start = std::time::Instant::now();
                    outs.push(p.infer_batch(b, &data.batch(b, bs).0)?);
                    times.push(start.elapsed().as_secs_f64() * 1e3);
                }
                Ok(())
            })?;
        }
    }
    Ok((outs, times))
}

/// Percent decrease of `new` against `base`; both must be the same model
/// and batch count.
pub fn percent_vs(base: &RunOutcome, new: &RunOutcome) -> Result<f64> {
    if base.model != new.model || base.batches != new.batches {
        return Err(RuntimeError::Config(format!(
            "cannot compare {} x{} with {} x{}",
            base.model, base.batches, new.model, new.batches
        )));
    }
    Ok(percent_decrease(base.summary.mean_ms, new.summary.mean_ms))
}
