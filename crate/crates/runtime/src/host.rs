//! Host coordinator: stage-0 compute, streaming microbatches to the worker,
//! gradient accumulation and the optimizer step.

use std::net::{TcpStream, ToSocketAddrs};
use std::sync::mpsc::{channel, Receiver, Sender, TryRecvError};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use edgepipe_core::graph::{serialize_partition, CostModel, ModelGraph, PartitionSpec};
use edgepipe_core::stage::{GradAccumulator, Stage, StageCache, StageCtx};
use edgepipe_core::trace::{Device, EventKind, TraceSink};
use edgepipe_core::wire::{
    error_code, handshake, read_frame_timed, FrameWriter, Message, Role, WeightEntry, DEFAULT_MAX_PAYLOAD,
    PROTOCOL_MAJOR, PROTOCOL_MINOR, WAIT_FOREVER_MS,
};
use edgepipe_core::Tensor;

use crate::thermal::ThermalState;
use crate::tools::{Broker, ToolError, ToolResult};
use crate::worker::reported_state;
use crate::{Result, RuntimeError};

type Inbound = std::result::Result<Message, String>;

/// A connected, handshaken worker. Replies are split by lane: compute
/// replies and tool replies each arrive on their own channel.
pub struct HostSession {
    writer: FrameWriter<TcpStream>,
    stream: TcpStream,
    compute_rx: Receiver<Inbound>,
    tool_rx: Receiver<Inbound>,
    reader: Option<JoinHandle<()>>,
    trace: TraceSink,
}

fn route(msg: &Message) -> bool {
    // true: tool lane
    match msg {
        Message::ToolBegin { .. } | Message::ToolResult { .. } => true,
        Message::Error { code, .. } => error_code::is_tool(*code),
        _ => false,
    }
}

fn demux(mut conn: TcpStream, compute: Sender<Inbound>, tools: Sender<Inbound>, trace: TraceSink) {
    loop {
        let (frame, arrived) = match read_frame_timed(&mut conn, DEFAULT_MAX_PAYLOAD) {
            Ok(f) => f,
            Err(e) => {
                let msg = format!("connection lost: {e}");
                let _ = compute.send(Err(msg.clone()));
                let _ = tools.send(Err(msg));
                return;
            }
        };
        let done = Instant::now();
        let msg = match Message::from_frame(&frame) {
            Ok(m) => m,
            Err(e) => {
                let _ = compute.send(Err(e.to_string()));
                continue;
            }
        };
        if let Message::GradResp { batch, microbatch, .. } = &msg {
            trace.span(
                Device::Link,
                EventKind::Recv,
                *batch as u64,
                *microbatch as u64,
                "grad",
                arrived,
                done,
            );
        }
        let ok = if route(&msg) {
            tools.send(Ok(msg))
        } else {
            compute.send(Ok(msg))
        };
        if ok.is_err() {
            return;
        }
    }
}

fn remote(msg: Message) -> RuntimeError {
    match msg {
        Message::Error { code, message } => RuntimeError::Remote { code, message },
        other => RuntimeError::Protocol(format!("unexpected {:?}", other.kind())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThermalReport {
    pub heat: f64,
    pub state: ThermalState,
    pub throttle: f64,
}

fn thermal(msg: Message) -> Result<ThermalReport> {
    match msg {
        Message::ThermalReport { heat, state, throttle } => Ok(ThermalReport {
            heat,
            state: reported_state(state),
            throttle,
        }),
        other => Err(remote(other)),
    }
}

impl HostSession {
    pub fn connect(addr: impl ToSocketAddrs, trace: TraceSink) -> Result<HostSession> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let mut conn = stream.try_clone()?;
        handshake(&mut conn, Role::Host, PROTOCOL_MAJOR, PROTOCOL_MINOR)?;
        let (ctx, crx) = channel();
        let (ttx, trx) = channel();
        let reader_trace = trace.clone();
        let reader = std::thread::Builder::new()
            .name("host-demux".into())
            .spawn(move || demux(conn, ctx, ttx, reader_trace))?;
        Ok(HostSession {
            writer: FrameWriter::new(stream.try_clone()?),
            stream,
            compute_rx: crx,
            tool_rx: trx,
            reader: Some(reader),
            trace,
        })
    }

    pub fn send(&self, msg: &Message) -> Result<()> {
        Ok(self.writer.send(msg)?)
    }

    fn next_compute(&self) -> Result<Message> {
        match self.compute_rx.recv() {
            Ok(Ok(m)) => Ok(m),
            Ok(Err(e)) => Err(RuntimeError::Protocol(e)),
            Err(_) => Err(RuntimeError::Protocol("connection closed".into())),
        }
    }

    fn try_compute(&self) -> Result<Option<Message>> {
        match self.compute_rx.try_recv() {
            Ok(Ok(m)) => Ok(Some(m)),
            Ok(Err(e)) => Err(RuntimeError::Protocol(e)),
            Err(TryRecvError::Empty) => Ok(None),
            Err(TryRecvError::Disconnected) => Err(RuntimeError::Protocol("connection closed".into())),
        }
    }

    /// Next compute-lane reply.
    pub fn recv(&self) -> Result<Message> {
        self.next_compute()
    }

    /// Sends one compute-lane request and waits for its reply.
    pub fn request(&self, msg: &Message) -> Result<Message> {
        self.send(msg)?;
        self.next_compute()
    }

    pub fn load_partition(&self, seed: u64, partition: Vec<u8>) -> Result<ThermalReport> {
        thermal(self.request(&Message::LoadPartition { seed, partition })?)
    }

    pub fn step(&self, lr: f64) -> Result<ThermalReport> {
        thermal(self.request(&Message::Step { lr })?)
    }

    pub fn fetch_weights(&self) -> Result<Vec<WeightEntry>> {
        match self.request(&Message::FetchWeights)? {
            Message::WeightsResp(w) => Ok(w),
            other => Err(remote(other)),
        }
    }

    /// Asks the worker to exit and closes the connection.
    pub fn shutdown(mut self) -> Result<()> {
        self.send(&Message::Shutdown)?;
        self.close();
        Ok(())
    }

    fn close(&mut self) {
        let _ = self.stream.shutdown(std::net::Shutdown::Both);
        if let Some(r) = self.reader.take() {
            let _ = r.join();
        }
    }

    pub fn broker(&self) -> RemoteBroker<'_> {
        RemoteBroker { session: self }
    }
}

impl Drop for HostSession {
    fn drop(&mut self) {
        self.close();
    }
}

/// Begin/retrieve over the wire to the worker's tool lane.
pub struct RemoteBroker<'a> {
    session: &'a HostSession,
}

impl RemoteBroker<'_> {
    fn reply(&self) -> std::result::Result<Message, ToolError> {
        match self.session.tool_rx.recv() {
            Ok(Ok(Message::Error { code, message })) => Err(ToolError::from_wire(code, message)),
            Ok(Ok(m)) => Ok(m),
            Ok(Err(e)) => Err(ToolError::Transport(e)),
            Err(_) => Err(ToolError::Transport("connection closed".into())),
        }
    }
}

impl Broker for RemoteBroker<'_> {
    fn begin(&mut self, name: &str, args: &[u8]) -> std::result::Result<u64, ToolError> {
        self.session
            .send(&Message::ToolBegin {
                ticket: 0,
                name: name.to_string(),
                args: args.to_vec(),
            })
            .map_err(|e| ToolError::Transport(e.to_string()))?;
        match self.reply()? {
            Message::ToolBegin { ticket, .. } => Ok(ticket),
            other => Err(ToolError::Transport(format!("unexpected {:?}", other.kind()))),
        }
    }

    fn retrieve(&mut self, timeout: Option<Duration>) -> std::result::Result<ToolResult, ToolError> {
        let timeout_ms = timeout.map_or(WAIT_FOREVER_MS, |t| t.as_millis() as u64);
        self.session
            .send(&Message::ToolRetrieve { timeout_ms })
            .map_err(|e| ToolError::Transport(e.to_string()))?;
        match self.reply()? {
            Message::ToolResult {
                ticket,
                start_us,
                end_us,
                status,
                payload,
            } => Ok(ToolResult {
                ticket,
                start_us,
                end_us,
                status,
                payload,
            }),
            other => Err(ToolError::Transport(format!("unexpected {:?}", other.kind()))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub microbatches: usize,
    pub microbatch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Synthetic per-layer costs; stage-0 compute is padded to them.
    pub costs: Option<CostModel>,
}

impl PipelineConfig {
    pub fn batch_size(&self) -> usize {
        self.microbatches * self.microbatch_size
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchReport {
    pub batch: u64,
    pub wall_ms: f64,
    pub loss: f64,
    pub stage0_busy_ms: f64,
    pub stage1_busy_ms: f64,
    pub thermal: Option<ThermalReport>,
}

impl BatchReport {
    pub fn stage0_idle_ms(&self) -> f64 {
        (self.wall_ms - self.stage0_busy_ms).max(0.0)
    }

    pub fn stage1_idle_ms(&self) -> f64 {
        (self.wall_ms - self.stage1_busy_ms).max(0.0)
    }
}

fn pad(start: Instant, seconds: Option<f64>) {
    if let Some(s) = seconds {
        let target = Duration::from_secs_f64(s);
        let spent = start.elapsed();
        if target > spent {
            std::thread::sleep(target - spent);
        }
    }
}

/// Splits `[M*S, ...]` into M row blocks.
pub fn split_microbatches(t: &Tensor, m: usize) -> Result<Vec<Tensor>> {
    let rows = t.shape().first().copied().unwrap_or(0);
    if m == 0 || rows == 0 || rows % m != 0 {
        return Err(RuntimeError::Config(format!(
            "batch of {rows} rows does not split into {m} microbatches"
        )));
    }
    let s = rows / m;
    (0..m).map(|i| Ok(t.slice_rows(i * s, s)?)).collect()
}

/// Host end of a two-stage pipeline.
pub struct Pipeline {
    pub session: HostSession,
    pub stage0: Stage,
    pub spec: PartitionSpec,
    pub config: PipelineConfig,
    trace: TraceSink,
    /// Simulated stage-0 (forward, backward) seconds per microbatch.
    sim: Option<(f64, f64)>,
}

impl Pipeline {
    /// Loads stage 1 onto the worker and keeps stage 0 locally.
    pub fn setup(
        session: HostSession,
        graph: &ModelGraph,
        spec: PartitionSpec,
        config: PipelineConfig,
    ) -> Result<Pipeline> {
        if config.microbatches == 0 || config.microbatch_size == 0 {
            return Err(RuntimeError::Config(
                "microbatches and microbatch size must be >= 1".into(),
            ));
        }
        let mb_graph = graph.with_batch(config.microbatch_size)?;
        let spec = mb_graph.partition(spec.cut)?;
        session.load_partition(config.seed, serialize_partition(&mb_graph, &spec)?)?;
        let sim = config.costs.as_ref().map(|c| {
            (
                c.forward[spec.stage0.clone()].iter().sum(),
                c.backward[spec.stage0.clone()].iter().sum(),
            )
        });
        let trace = session.trace.clone();
        Ok(Pipeline {
            stage0: mb_graph.stage(spec.stage0.clone()),
            session,
            spec,
            config,
            trace,
            sim,
        })
    }

    /// One training batch under the hybrid schedule.
    pub fn train_batch(&mut self, batch: u64, inputs: &Tensor, labels: &Tensor) -> Result<BatchReport> {
        let m = self.config.microbatches;
        let xs = split_microbatches(inputs, m)?;
        let ys = split_microbatches(labels, m)?;
        let t_batch = Instant::now();
        let trace = self.trace.clone();
        let writer = self.session.writer.clone();
        let seed = self.config.seed;
        let sim = self.sim;
        let stage0 = &self.stage0;
        let session = &self.session;

        let (acc, losses, busy0, busy1) = std::thread::scope(|scope| -> Result<_> {
            let (tx, rx) = channel::<Message>();
            let send_trace = trace.clone();
            let sender = scope.spawn(move || -> Result<()> {
                for msg in rx {
                    let (b, mb) = match &msg {
                        Message::FwdBwdReq { batch, microbatch, .. } => (*batch as u64, *microbatch as u64),
                        _ => (0, 0),
                    };
                    let t = Instant::now();
                    writer.send(&msg)?;
                    send_trace.span(Device::Link, EventKind::Send, b, mb, "act", t, Instant::now());
                }
                Ok(())
            });
            let mut caches: Vec<Option<StageCache>> = (0..m).map(|_| None).collect();
            let mut losses = Vec::with_capacity(m);
            let mut acc = GradAccumulator::new();
            let (mut next_f, mut next_b) = (0usize, 0usize);
            let (mut busy0, mut busy1) = (Duration::ZERO, 0u64);
            let result = (|| -> Result<()> {
                while next_b < m {
                    let inbound = if next_f < m {
                        session.try_compute()?
                    } else {
                        Some(session.next_compute()?)
                    };
                    if let Some(msg) = inbound {
                        let Message::GradResp {
                            batch: rb,
                            microbatch,
                            compute_us,
                            loss,
                            grad,
                        } = msg
                        else {
                            return Err(remote(msg));
                        };
                        if rb as u64 != batch || microbatch as usize != next_b {
                            return Err(RuntimeError::Protocol(format!(
                                "expected gradient for {batch}/{next_b}, got {rb}/{microbatch}"
                            )));
                        }
                        let lv = loss.to_f64_vec();
                        if lv.len() != 1 || !lv[0].is_finite() {
                            return Err(RuntimeError::NonFinite(format!(
                                "loss {lv:?} at batch {batch} microbatch {microbatch}"
                            )));
                        }
                        losses.push(lv[0]);
                        busy1 += compute_us;
                        let t = Instant::now();
                        let cache = caches[next_b].take().expect("forward ran first");
                        let (_, grads) = stage0.backward(&cache, &grad)?;
                        acc.add(grads)?;
                        pad(t, sim.map(|s| s.1));
                        let end = Instant::now();
                        busy0 += end - t;
                        trace.span(Device::Stage0, EventKind::Backward, batch, next_b as u64, "", t, end);
                        next_b += 1;
                        continue;
                    }
                    let t = Instant::now();
                    let ctx = StageCtx::train(seed, batch, next_f as u64, None);
                    let (act, cache) = stage0.forward(&xs[next_f], &ctx)?;
                    pad(t, sim.map(|s| s.0));
                    let end = Instant::now();
                    busy0 += end - t;
                    trace.span(Device::Stage0, EventKind::Forward, batch, next_f as u64, "", t, end);
                    caches[next_f] = Some(cache);
                    tx.send(Message::FwdBwdReq {
                        batch: batch as u32,
                        microbatch: next_f as u32,
                        activations: act,
                        labels: ys[next_f].clone(),
                    })
                    .map_err(|_| RuntimeError::Protocol("sender stopped".into()))?;
                    next_f += 1;
                }
                Ok(())
            })();
            drop(tx);
            let sent = sender.join().expect("sender panicked");
            result?;
            sent?;
            Ok((acc, losses, busy0, busy1))
        })?;

        let t = Instant::now();
        let mean = acc.mean().expect("m >= 1")?;
        let report = self.session.step(self.config.lr)?;
        self.stage0.apply_sgd(&mean, self.config.lr)?;
        let end = Instant::now();
        self.trace.span(
            Device::Stage0,
            EventKind::Step,
            batch,
            0,
            format!("lr={}", self.config.lr),
            t,
            end,
        );
        let wall = t_batch.elapsed();
        Ok(BatchReport {
            batch,
            wall_ms: wall.as_secs_f64() * 1e3,
            loss: losses.iter().sum::<f64>() / m as f64,
            stage0_busy_ms: (busy0 + (end - t)).as_secs_f64() * 1e3,
            stage1_busy_ms: busy1 as f64 / 1e3,
            thermal: Some(report),
        })
    }

    /// Pipelined forward-only pass; returns the stage-1 outputs in row order.
    pub fn infer_batch(&mut self, batch: u64, inputs: &Tensor) -> Result<Tensor> {
        let m = self.config.microbatches;
        let xs = split_microbatches(inputs, m)?;
        let mut outs = Vec::with_capacity(m);
        let mut next_f = 0;
        while outs.len() < m {
            let inbound = if next_f < m {
                self.session.try_compute()?
            } else {
                Some(self.session.next_compute()?)
            };
            if let Some(msg) = inbound {
                match msg {
                    Message::Tensor(t) => outs.push(t),
                    other => return Err(remote(other)),
                }
                continue;
            }
            let t = Instant::now();
            let act = self.stage0.infer(&xs[next_f])?;
            pad(t, self.sim.map(|s| s.0));
            let end = Instant::now();
            self.trace.span(
                Device::Stage0,
                EventKind::Forward,
                batch,
                next_f as u64,
                "infer",
                t,
                end,
            );
            self.session.send(&Message::FwdReq {
                batch: batch as u32,
                microbatch: next_f as u32,
                activations: act,
            })?;
            next_f += 1;
        }
        Ok(Tensor::concat_rows(&outs)?)
    }

    /// Current parameters of both stages as `(layer, slot, tensor)`, ascending.
    pub fn weights(&self) -> Result<Vec<(usize, usize, Tensor)>> {
        let mut out: Vec<(usize, usize, Tensor)> = self
            .stage0
            .param_entries()
            .into_iter()
            .map(|(l, s, t)| (l, s, t.clone()))
            .collect();
        out.extend(
            self.session
                .fetch_weights()?
                .into_iter()
                .map(|w| (w.layer as usize, w.slot as usize, w.tensor)),
        );
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn microbatch_split_rejects_ragged() {
        let t = Tensor::from_f32(&[6, 1], vec![0.0; 6]).unwrap();
        assert_eq!(split_microbatches(&t, 3).unwrap().len(), 3);
        assert!(split_microbatches(&t, 4).is_err());
        let empty = Tensor::from_f32(&[0, 1], vec![]).unwrap();
        assert!(split_microbatches(&empty, 1).is_err());
    }
}
