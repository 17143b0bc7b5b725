//! The worker daemon: holds the second stage, runs unified forward+backward
//! passes in arrival order, owns the stage-1 optimizer step, and executes
//! offloaded tools on a separate lane.

use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc::{channel, Receiver};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use edgepipe_core::graph::{deserialize_stage, CostModel};
use edgepipe_core::stage::{GradAccumulator, Stage, StageCtx};
use edgepipe_core::tensor::numel;
use edgepipe_core::trace::{Device, EventKind, TraceSink};
use edgepipe_core::wire::{
    error_code, handshake, read_frame, FrameWriter, Message, Role, WeightEntry, WireError, DEFAULT_MAX_PAYLOAD,
    PROTOCOL_MAJOR, PROTOCOL_MINOR, WAIT_FOREVER_MS,
};
use edgepipe_core::{DType, Tensor};

use crate::thermal::{ThermalConfig, ThermalModel, ThermalState};
use crate::tools::{ToolQueue, ToolRegistry};
use crate::Result;

#[derive(Clone)]
pub struct WorkerOptions {
    /// Synthetic cost file text; when set, compute is padded to the listed
    /// per-layer costs (scaled by the thermal throttle).
    pub cost_text: Option<String>,
    pub thermal: ThermalConfig,
    /// Reject partitions whose weights plus activations exceed this.
    pub max_bytes: Option<u64>,
    pub max_payload: u64,
    pub trace: TraceSink,
    pub tools: ToolRegistry,
    pub tool_cap: usize,
    /// Receives a record per finished session.
    pub session_log: Option<Arc<Mutex<Vec<SessionRecord>>>>,
}

impl Default for WorkerOptions {
    fn default() -> Self {
        WorkerOptions {
            cost_text: None,
            thermal: ThermalConfig::default(),
            max_bytes: None,
            max_payload: DEFAULT_MAX_PAYLOAD,
            trace: TraceSink::disabled(),
            tools: ToolRegistry::with_default_search(0.0),
            tool_cap: ToolQueue::DEFAULT_CAP,
            session_log: None,
        }
    }
}

/// Observable worker state, for session-isolation checks.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkerSnapshot {
    pub partition: Option<Stage>,
    pub seed: u64,
    pub pending_grads: usize,
    pub heat: f64,
    pub tickets_issued: u64,
    pub pending_tools: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionRecord {
    pub start: WorkerSnapshot,
    pub end: WorkerSnapshot,
}

struct Compute {
    stage: Option<Stage>,
    seed: u64,
    acc: GradAccumulator,
    thermal: ThermalModel,
    last_end: Option<Instant>,
    costs: Option<CostModel>,
}

/// Weights plus forward activations and their gradients for one microbatch.
fn stage_footprint(stage: &Stage) -> u64 {
    let mut shape = stage.input_shape.clone();
    let mut act = numel(&shape);
    for l in &stage.layers {
        match l.kind.output_shape(&shape) {
            Ok(s) => shape = s,
            Err(_) => break,
        }
        act += numel(&shape);
    }
    (stage.weight_bytes() + 2 * act * DType::F32.byte_width()) as u64
}

fn err(code: u16, message: impl Into<String>) -> Message {
    Message::Error {
        code,
        message: message.into(),
    }
}

fn shape_matches(stage: &Stage, t: &Tensor) -> bool {
    t.ndim() == stage.input_shape.len() && t.shape()[1..] == stage.input_shape[1..] && t.shape()[0] > 0
}

fn one_like(t: &Tensor) -> Tensor {
    match t.dtype() {
        DType::F64 => Tensor::from_f64(&[], vec![1.0]).expect("scalar"),
        _ => Tensor::scalar_f32(1.0),
    }
}

impl Compute {
    fn new(opts: &WorkerOptions) -> Compute {
        Compute {
            stage: None,
            seed: 0,
            acc: GradAccumulator::new(),
            thermal: ThermalModel::new(opts.thermal),
            last_end: None,
            costs: None,
        }
    }

    fn snapshot(&self, tools: &ToolQueue) -> WorkerSnapshot {
        WorkerSnapshot {
            partition: self.stage.clone(),
            seed: self.seed,
            pending_grads: self.acc.count(),
            heat: self.thermal.heat,
            tickets_issued: tools.issued(),
            pending_tools: tools.pending(),
        }
    }

    fn report(&self) -> Message {
        Message::ThermalReport {
            heat: self.thermal.heat,
            state: self.thermal.state() as u8,
            throttle: self.thermal.throttle(),
        }
    }

    /// Simulated seconds for the stage: (forward, forward + backward).
    fn sim_costs(&self) -> Option<(f64, f64)> {
        let (stage, costs) = (self.stage.as_ref()?, self.costs.as_ref()?);
        let r = stage.first_index..stage.end_index();
        let f: f64 = costs.forward[r.clone()].iter().sum();
        let b: f64 = costs.backward[r].iter().sum();
        Some((f, f + b))
    }

    /// Sleeps out the rest of the simulated duration, then updates heat.
    fn finish(&mut self, start: Instant, simulated: Option<f64>) -> Instant {
        if let Some(target) = simulated {
            let target = Duration::from_secs_f64(target * self.thermal.throttle());
            let spent = start.elapsed();
            if target > spent {
                std::thread::sleep(target - spent);
            }
        }
        let end = Instant::now();
        let idle = self
            .last_end
            .map_or(0.0, |t| start.saturating_duration_since(t).as_secs_f64());
        self.thermal.advance((end - start).as_secs_f64(), idle);
        self.last_end = Some(end);
        end
    }

    fn handle(&mut self, msg: Message, opts: &WorkerOptions, cost_text: Option<&str>) -> Message {
        let trace = &opts.trace;
        match msg {
            Message::LoadPartition { seed, partition } => {
                let stage = match deserialize_stage(&partition) {
                    Ok(s) => s,
                    Err(e) => return err(error_code::BAD_PARTITION, e.to_string()),
                };
                let need = stage_footprint(&stage);
                if let Some(cap) = opts.max_bytes {
                    if need > cap {
                        return err(
                            error_code::OVER_MEMORY,
                            format!("partition needs {need} bytes, cap is {cap}"),
                        );
                    }
                }
                self.costs = match cost_text.map(|t| CostModel::parse(t, stage.end_index())) {
                    None => None,
                    Some(Ok(c)) => Some(c),
                    Some(Err(e)) => return err(error_code::BAD_PARTITION, e.to_string()),
                };
                self.stage = Some(stage);
                self.seed = seed;
                self.acc.clear();
                self.report()
            }
            Message::FwdBwdReq {
                batch,
                microbatch,
                activations,
                labels,
            } => {
                let Some(stage) = self.stage.as_ref() else {
                    return err(error_code::NO_PARTITION, "no partition loaded");
                };
                if !shape_matches(stage, &activations) {
                    return err(
                        error_code::SHAPE_MISMATCH,
                        format!(
                            "activations {:?} do not match cut {:?}",
                            activations.shape(),
                            stage.input_shape
                        ),
                    );
                }
                if !activations.all_finite() {
                    return err(
                        error_code::NON_FINITE,
                        format!("batch {batch} microbatch {microbatch}: non-finite activations"),
                    );
                }
                let start = Instant::now();
                let ctx = StageCtx::train(self.seed, batch as u64, microbatch as u64, Some(&labels));
                let result = stage.forward(&activations, &ctx).and_then(|(loss, cache)| {
                    let (grad, params) = stage.backward(&cache, &one_like(&loss))?;
                    Ok((loss, grad, params))
                });
                let (loss, grad, params) = match result {
                    Ok(r) => r,
                    Err(e) => return err(error_code::SHAPE_MISMATCH, e.to_string()),
                };
                if !loss.all_finite() || !grad.all_finite() {
                    return err(
                        error_code::NON_FINITE,
                        format!("batch {batch} microbatch {microbatch}: non-finite loss or gradient"),
                    );
                }
                if let Err(e) = self.acc.add(params) {
                    return err(error_code::SHAPE_MISMATCH, e.to_string());
                }
                let sim = self.sim_costs().map(|c| c.1);
                let end = self.finish(start, sim);
                trace.span(
                    Device::Stage1,
                    EventKind::FwdBwd,
                    batch as u64,
                    microbatch as u64,
                    "",
                    start,
                    end,
                );
                Message::GradResp {
                    batch,
                    microbatch,
                    compute_us: (end - start).as_micros() as u64,
                    loss,
                    grad,
                }
            }
            Message::FwdReq {
                batch,
                microbatch,
                activations,
            } => {
                let Some(stage) = self.stage.as_ref() else {
                    return err(error_code::NO_PARTITION, "no partition loaded");
                };
                if self.acc.count() > 0 {
                    return err(error_code::TRAINING_PENDING, "gradients pending; send STEP first");
                }
                if !shape_matches(stage, &activations) {
                    return err(
                        error_code::SHAPE_MISMATCH,
                        format!(
                            "activations {:?} do not match cut {:?}",
                            activations.shape(),
                            stage.input_shape
                        ),
                    );
                }
                let start = Instant::now();
                let out = match stage.infer(&activations) {
                    Ok(y) => y,
                    Err(e) => return err(error_code::SHAPE_MISMATCH, e.to_string()),
                };
                let sim = self.sim_costs().map(|c| c.0);
                let end = self.finish(start, sim);
                trace.span(
                    Device::Stage1,
                    EventKind::Forward,
                    batch as u64,
                    microbatch as u64,
                    "",
                    start,
                    end,
                );
                Message::Tensor(out)
            }
            Message::Step { lr } => {
                let Some(stage) = self.stage.as_mut() else {
                    return err(error_code::NO_PARTITION, "no partition loaded");
                };
                let start = Instant::now();
                let mean = match self.acc.mean() {
                    None => return err(error_code::NO_GRADS, "no accumulated gradients"),
                    Some(Ok(m)) => m,
                    Some(Err(e)) => return err(error_code::SHAPE_MISMATCH, e.to_string()),
                };
                if let Err(e) = stage.apply_sgd(&mean, lr) {
                    return err(error_code::PROTOCOL, e.to_string());
                }
                self.acc.clear();
                trace.span(
                    Device::Stage1,
                    EventKind::Step,
                    0,
                    0,
                    format!("lr={lr}"),
                    start,
                    Instant::now(),
                );
                self.report()
            }
            Message::FetchWeights => match self.stage.as_ref() {
                None => err(error_code::NO_PARTITION, "no partition loaded"),
                Some(stage) => Message::WeightsResp(
                    stage
                        .param_entries()
                        .into_iter()
                        .map(|(layer, slot, t)| WeightEntry {
                            layer: layer as u32,
                            slot: slot as u8,
                            tensor: t.clone(),
                        })
                        .collect(),
                ),
            },
            other => err(
                error_code::PROTOCOL,
                format!("unexpected {:?} on compute lane", other.kind()),
            ),
        }
    }
}

fn tool_lane(queue: &ToolQueue, rx: Receiver<Message>, writer: FrameWriter<TcpStream>) {
    for msg in rx {
        let reply = match msg {
            Message::ToolBegin { name, args, .. } => match queue.begin(&name, &args) {
                Ok(ticket) => Message::ToolBegin {
                    ticket,
                    name,
                    args: Vec::new(),
                },
                Err(e) => err(e.code(), e.wire_message()),
            },
            Message::ToolRetrieve { timeout_ms } => {
                let timeout = (timeout_ms != WAIT_FOREVER_MS).then(|| Duration::from_millis(timeout_ms));
                match queue.retrieve(timeout) {
                    Ok(r) => Message::ToolResult {
                        ticket: r.ticket,
                        start_us: r.start_us,
                        end_us: r.end_us,
                        status: r.status,
                        payload: r.payload,
                    },
                    Err(e) => err(e.code(), e.wire_message()),
                }
            }
            other => err(
                error_code::PROTOCOL,
                format!("unexpected {:?} on tool lane", other.kind()),
            ),
        };
        if writer.send(&reply).is_err() {
            return;
        }
    }
}

/// Serves one host connection. Returns true when the host asked the
/// worker to shut down.
fn run_session(stream: TcpStream, opts: &WorkerOptions) -> Result<bool> {
    stream.set_nodelay(true)?;
    let mut conn = stream.try_clone()?;
    handshake(&mut conn, Role::Worker, PROTOCOL_MAJOR, PROTOCOL_MINOR)?;
    let writer = FrameWriter::new(stream.try_clone()?);
    let queue = Arc::new(ToolQueue::new(opts.tools.clone(), opts.tool_cap, opts.trace.clone()));
    let compute = Compute::new(opts);
    let start_snapshot = compute.snapshot(&queue);

    let (ctx, crx) = channel::<Message>();
    let (ttx, trx) = channel::<Message>();
    let compute_thread = {
        let writer = writer.clone();
        let opts = opts.clone();
        std::thread::Builder::new()
            .name("worker-compute".into())
            .spawn(move || {
                let mut compute = compute;
                let cost_text = opts.cost_text.clone();
                for msg in crx {
                    let reply = compute.handle(msg, &opts, cost_text.as_deref());
                    if writer.send(&reply).is_err() {
                        break;
                    }
                }
                compute
            })?
    };
    let tool_thread = {
        let writer = writer.clone();
        let queue = queue.clone();
        std::thread::Builder::new()
            .name("worker-tools".into())
            .spawn(move || tool_lane(&queue, trx, writer))?
    };

    let mut shutdown = false;
    loop {
        let frame = match read_frame(&mut conn, opts.max_payload) {
            Ok(f) => f,
            Err(WireError::Transport(_)) => break,
            Err(e) => {
                // The stream position is unknown after a bad envelope.
                let _ = writer.send(&err(error_code::PROTOCOL, e.to_string()));
                break;
            }
        };
        let msg = match Message::from_frame(&frame) {
            Ok(m) => m,
            Err(e) => {
                let _ = writer.send(&err(error_code::PROTOCOL, e.to_string()));
                continue;
            }
        };
        match msg {
            Message::Shutdown => {
                shutdown = true;
                break;
            }
            Message::ToolBegin { .. } | Message::ToolRetrieve { .. } => {
                let _ = ttx.send(msg);
            }
            Message::LoadPartition { .. }
            | Message::FwdReq { .. }
            | Message::FwdBwdReq { .. }
            | Message::Step { .. }
            | Message::FetchWeights => {
                let _ = ctx.send(msg);
            }
            other => {
                let _ = writer.send(&err(
                    error_code::PROTOCOL,
                    format!("{:?} is not a request", other.kind()),
                ));
            }
        }
    }
    drop(ctx);
    drop(ttx);
    let compute = compute_thread.join().expect("compute lane panicked");
    tool_thread.join().expect("tool lane panicked");
    let end_snapshot = compute.snapshot(&queue);
    if let Some(log) = &opts.session_log {
        log.lock().expect("session log poisoned").push(SessionRecord {
            start: start_snapshot,
            end: end_snapshot,
        });
    }
    let _ = stream.shutdown(std::net::Shutdown::Both);
    Ok(shutdown)
}

/// Accepts one host at a time until a host sends SHUTDOWN.
pub fn serve(listener: TcpListener, opts: WorkerOptions) -> Result<()> {
    for stream in listener.incoming() {
        match run_session(stream?, &opts) {
            Ok(true) => return Ok(()),
            Ok(false) => {}
            // A failed handshake ends that session only.
            Err(_) => {}
        }
    }
    Ok(())
}

pub struct WorkerHandle {
    pub addr: SocketAddr,
    thread: Option<JoinHandle<Result<()>>>,
}

impl WorkerHandle {
    pub fn join(mut self) -> Result<()> {
        self.thread
            .take()
            .expect("joined once")
            .join()
            .expect("worker panicked")
    }
}

/// Starts a worker on an ephemeral localhost port in a background thread.
pub fn spawn_loopback(opts: WorkerOptions) -> Result<WorkerHandle> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    let thread = std::thread::Builder::new()
        .name("worker".into())
        .spawn(move || serve(listener, opts))?;
    Ok(WorkerHandle {
        addr,
        thread: Some(thread),
    })
}

/// `ThermalState` reported in a THERMAL_REPORT frame.
pub fn reported_state(code: u8) -> ThermalState {
    ThermalState::from_code(code).unwrap_or(ThermalState::Minimal)
}
