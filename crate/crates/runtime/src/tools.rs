//! Offloaded tools: vector search, the FIFO begin/retrieve queue, and a
//! scripted agent that drives it.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::Path;
use std::sync::mpsc::{channel, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use sha2::{Digest, Sha256};
use thiserror::Error;

use edgepipe_core::trace::{Device, EventKind, TraceSink};
use edgepipe_core::wire::{error_code, PayloadReader, PayloadWriter};
use edgepipe_core::Prng;

use crate::RuntimeError;

#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub index: usize,
    pub score: f32,
    pub text: String,
}

/// Brute-force dot-product index over `N x d` f32 embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    pub dim: usize,
    pub rows: Vec<f32>,
    pub texts: Vec<String>,
}

/// Deterministic unit vector for a piece of text, seeded from its SHA-256.
pub fn embed_text(text: &str, dim: usize) -> Vec<f32> {
    let digest = Sha256::digest(text.as_bytes());
    let seed = u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"));
    let mut prng = Prng::new(seed);
    let v: Vec<f64> = (0..dim).map(|_| prng.normal()).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    v.iter().map(|x| (x / norm) as f32).collect()
}

const TOPICS: [&str; 4] = ["World", "Sports", "Business", "Sci/Tech"];
const WORDS: [&str; 16] = [
    "markets",
    "league",
    "election",
    "chip",
    "merger",
    "storm",
    "final",
    "launch",
    "earnings",
    "summit",
    "transfer",
    "satellite",
    "tariff",
    "record",
    "software",
    "treaty",
];

impl VectorIndex {
    pub fn new(dim: usize, rows: Vec<f32>, texts: Vec<String>) -> Result<VectorIndex, RuntimeError> {
        if dim == 0 || rows.len() != dim * texts.len() {
            return Err(RuntimeError::Config(format!(
                "{} values do not form {} rows of dimension {dim}",
                rows.len(),
                texts.len()
            )));
        }
        Ok(VectorIndex { dim, rows, texts })
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    /// Small news-like corpus whose embeddings come from [`embed_text`].
    pub fn synthetic(n: usize, dim: usize, seed: u64) -> VectorIndex {
        let mut prng = Prng::new(seed);
        let texts: Vec<String> = (0..n)
            .map(|i| {
                let topic = TOPICS[prng.below(TOPICS.len() as u64) as usize];
                let a = WORDS[prng.below(WORDS.len() as u64) as usize];
                let b = WORDS[prng.below(WORDS.len() as u64) as usize];
                format!("[{topic}] {a} {b} #{i}")
            })
            .collect();
        let rows = texts.iter().flat_map(|t| embed_text(t, dim)).collect();
        VectorIndex { dim, rows, texts }
    }

    /// `embdb <N> <d>` header, then `<base64 f32 LE x d>\t<text>` per line.
    pub fn parse_embedding_file(text: &str) -> Result<VectorIndex, RuntimeError> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or("");
        let bad = |m: String| RuntimeError::Config(format!("embedding file: {m}"));
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 3 || parts[0] != "embdb" {
            return Err(bad(format!("bad header {header:?}")));
        }
        let n: usize = parts[1].parse().map_err(|_| bad("bad N".into()))?;
        let dim: usize = parts[2].parse().map_err(|_| bad("bad d".into()))?;
        let mut rows = Vec::with_capacity(n * dim);
        let mut texts = Vec::with_capacity(n);
        for (i, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
            let (enc, doc) = line
                .split_once('\t')
                .ok_or_else(|| bad(format!("line {}: missing tab", i + 2)))?;
            let bytes = B64
                .decode(enc.trim())
                .map_err(|e| bad(format!("line {}: {e}", i + 2)))?;
            if bytes.len() != dim * 4 {
                return Err(bad(format!(
                    "line {}: {} bytes, expected {}",
                    i + 2,
                    bytes.len(),
                    dim * 4
                )));
            }
            rows.extend(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())));
            texts.push(doc.to_string());
        }
        if texts.len() != n {
            return Err(bad(format!("header says {n} rows, found {}", texts.len())));
        }
        VectorIndex::new(dim, rows, texts)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<VectorIndex, RuntimeError> {
        VectorIndex::parse_embedding_file(&std::fs::read_to_string(path)?)
    }

    pub fn to_embedding_file(&self) -> String {
        let mut out = format!("embdb {} {}\n", self.len(), self.dim);
        for (row, text) in self.rows.chunks_exact(self.dim).zip(&self.texts) {
            let bytes: Vec<u8> = row.iter().flat_map(|v| v.to_le_bytes()).collect();
            out.push_str(&format!("{}\t{}\n", B64.encode(bytes), text));
        }
        out
    }

    /// Top `k` rows by raw dot product, descending, ties to the lower index.
    pub fn search(&self, query: &[f32], k: usize) -> Result<Vec<Hit>, RuntimeError> {
        if query.len() != self.dim {
            return Err(RuntimeError::Config(format!(
                "query has dimension {}, index has {}",
                query.len(),
                self.dim
            )));
        }
        if k == 0 || k > self.len() {
            return Err(RuntimeError::Config(format!("k={k} outside 1..={}", self.len())));
        }
        let scores: Vec<f32> = self
            .rows
            .chunks_exact(self.dim)
            .map(|r| r.iter().zip(query).map(|(a, b)| a * b).sum::<f32>() + 0.0) // -0 ties with 0
            .collect();
        let mut order: Vec<usize> = (0..scores.len()).collect();
        let cmp = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
        if k < order.len() {
            order.select_nth_unstable_by(k - 1, cmp);
            order.truncate(k);
        }
        order.sort_by(cmp);
        Ok(order
            .into_iter()
            .map(|i| Hit {
                index: i,
                score: scores[i],
                text: self.texts[i].clone(),
            })
            .collect())
    }
}

pub fn encode_search_args(query: &str, k: usize) -> Vec<u8> {
    let mut w = PayloadWriter::default();
    w.u32(k as u32).str(query);
    w.buf
}

pub fn decode_search_args(args: &[u8]) -> Result<(String, usize), String> {
    let mut r = PayloadReader::new(args, "vector_search args");
    let k = r.u32().map_err(|e| e.to_string())? as usize;
    let q = r.str().map_err(|e| e.to_string())?;
    Ok((q, k))
}

pub fn encode_hits(hits: &[Hit]) -> Vec<u8> {
    let mut w = PayloadWriter::default();
    w.u32(hits.len() as u32);
    for h in hits {
        w.u32(h.index as u32).f32(h.score).str(&h.text);
    }
    w.buf
}

pub fn decode_hits(payload: &[u8]) -> Result<Vec<Hit>, RuntimeError> {
    let mut r = PayloadReader::new(payload, "vector_search result");
    let n = r.u32()? as usize;
    (0..n)
        .map(|_| {
            Ok(Hit {
                index: r.u32()? as usize,
                score: r.f32()?,
                text: r.str()?,
            })
        })
        .collect()
}

pub trait Tool: Send + Sync {
    fn call(&self, args: &[u8]) -> Result<Vec<u8>, String>;
}

/// Text query, embedded with [`embed_text`], searched against the index.
pub struct VectorSearchTool {
    pub index: VectorIndex,
}

impl Tool for VectorSearchTool {
    fn call(&self, args: &[u8]) -> Result<Vec<u8>, String> {
        let (query, k) = decode_search_args(args)?;
        let hits = self
            .index
            .search(&embed_text(&query, self.index.dim), k)
            .map_err(|e| e.to_string())?;
        Ok(encode_hits(&hits))
    }
}

pub const VECTOR_SEARCH: &str = "vector_search";

#[derive(Clone, Default)]
pub struct ToolRegistry {
    tools: BTreeMap<String, (Arc<dyn Tool>, Duration)>,
}

impl ToolRegistry {
    pub fn new() -> ToolRegistry {
        ToolRegistry::default()
    }

    /// Registry holding `vector_search` over a synthetic corpus.
    pub fn with_default_search(delay_s: f64) -> ToolRegistry {
        let mut reg = ToolRegistry::new();
        reg.register(
            VECTOR_SEARCH,
            Arc::new(VectorSearchTool {
                index: VectorIndex::synthetic(256, 32, 1),
            }),
        );
        reg.inject_delay(VECTOR_SEARCH, delay_s).expect("just registered");
        reg
    }

    pub fn register(&mut self, name: &str, tool: Arc<dyn Tool>) {
        self.tools.insert(name.to_string(), (tool, Duration::ZERO));
    }

    /// Extra sleep before `name` returns, on the tool lane only.
    pub fn inject_delay(&mut self, name: &str, seconds: f64) -> Result<(), RuntimeError> {
        if !(seconds >= 0.0 && seconds.is_finite()) {
            return Err(RuntimeError::Config(format!("delay {seconds} must be >= 0")));
        }
        let entry = self
            .tools
            .get_mut(name)
            .ok_or_else(|| RuntimeError::Config(format!("unknown tool {name:?}")))?;
        entry.1 = Duration::from_secs_f64(seconds);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<(Arc<dyn Tool>, Duration)> {
        self.tools.get(name).cloned()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolResult {
    pub ticket: u64,
    /// Executor clock, µs.
    pub start_us: u64,
    pub end_us: u64,
    /// 0 done, 1 failed.
    pub status: u8,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ToolError {
    #[error("unknown tool {0:?}")]
    UnknownTool(String),
    #[error("tool queue full ({0} pending)")]
    QueueFull(usize),
    #[error("nothing pending")]
    NothingPending,
    #[error("ticket {0} not ready")]
    NotReady(u64),
    #[error("ticket {ticket} failed: {message}")]
    Failed { ticket: u64, message: String },
    #[error("broker transport: {0}")]
    Transport(String),
}

impl ToolError {
    pub fn code(&self) -> u16 {
        match self {
            ToolError::UnknownTool(_) => error_code::UNKNOWN_TOOL,
            ToolError::QueueFull(_) => error_code::QUEUE_FULL,
            ToolError::NothingPending => error_code::NOTHING_PENDING,
            ToolError::NotReady(_) => error_code::NOT_READY,
            ToolError::Failed { .. } => error_code::TOOL_FAILED,
            ToolError::Transport(_) => error_code::PROTOCOL,
        }
    }

    /// Rebuilds an error from an ERROR frame sent by a remote queue.
    pub fn from_wire(code: u16, message: String) -> ToolError {
        match code {
            error_code::UNKNOWN_TOOL => ToolError::UnknownTool(message),
            error_code::QUEUE_FULL => ToolError::QueueFull(message.parse().unwrap_or(0)),
            error_code::NOTHING_PENDING => ToolError::NothingPending,
            error_code::NOT_READY => ToolError::NotReady(message.parse().unwrap_or(0)),
            error_code::TOOL_FAILED => {
                let (ticket, msg) = message.split_once(' ').unwrap_or(("0", message.as_str()));
                ToolError::Failed {
                    ticket: ticket.parse().unwrap_or(0),
                    message: msg.to_string(),
                }
            }
            _ => ToolError::Transport(format!("error {code}: {message}")),
        }
    }

    /// Message text that [`ToolError::from_wire`] parses back.
    pub fn wire_message(&self) -> String {
        match self {
            ToolError::UnknownTool(n) => n.clone(),
            ToolError::QueueFull(n) => n.to_string(),
            ToolError::NotReady(t) => t.to_string(),
            ToolError::Failed { ticket, message } => format!("{ticket} {message}"),
            other => other.to_string(),
        }
    }
}

/// The begin/retrieve interface, local or remote.
pub trait Broker {
    fn begin(&mut self, name: &str, args: &[u8]) -> Result<u64, ToolError>;
    /// Oldest unretrieved ticket; `None` waits forever.
    fn retrieve(&mut self, timeout: Option<Duration>) -> Result<ToolResult, ToolError>;
}

struct Job {
    ticket: u64,
    name: String,
    tool: Arc<dyn Tool>,
    delay: Duration,
    args: Vec<u8>,
}

#[derive(Default)]
struct QueueState {
    next_ticket: u64,
    pending: VecDeque<u64>,
    done: HashMap<u64, ToolResult>,
    failures: HashMap<u64, String>,
}

type Shared = Arc<(Mutex<QueueState>, Condvar)>;

/// FIFO tool queue with a single executor thread: tools run one at a time
/// in ticket order and are retrieved in ticket order.
pub struct ToolQueue {
    registry: ToolRegistry,
    cap: usize,
    shared: Shared,
    jobs: Option<Sender<Job>>,
    executor: Option<JoinHandle<()>>,
}

impl ToolQueue {
    pub const DEFAULT_CAP: usize = 64;

    pub fn new(registry: ToolRegistry, cap: usize, trace: TraceSink) -> ToolQueue {
        let shared: Shared = Arc::new((
            Mutex::new(QueueState {
                next_ticket: 1,
                ..Default::default()
            }),
            Condvar::new(),
        ));
        let (tx, rx) = channel::<Job>();
        let worker_shared = shared.clone();
        let executor = std::thread::Builder::new()
            .name("tool-executor".into())
            .spawn(move || {
                for job in rx {
                    let start = Instant::now();
                    std::thread::sleep(job.delay);
                    let out = job.tool.call(&job.args);
                    let end = Instant::now();
                    trace.span(
                        Device::Tool,
                        EventKind::ToolExec,
                        0,
                        job.ticket,
                        job.name.clone(),
                        start,
                        end,
                    );
                    let (lock, cv) = &*worker_shared;
                    let mut st = lock.lock().expect("tool queue poisoned");
                    match out {
                        Ok(payload) => {
                            st.done.insert(
                                job.ticket,
                                ToolResult {
                                    ticket: job.ticket,
                                    start_us: trace.micros(start),
                                    end_us: trace.micros(end),
                                    status: 0,
                                    payload,
                                },
                            );
                        }
                        Err(msg) => {
                            st.failures.insert(job.ticket, msg);
                        }
                    }
                    cv.notify_all();
                }
            })
            .expect("spawn tool executor");
        ToolQueue {
            registry,
            cap,
            shared,
            jobs: Some(tx),
            executor: Some(executor),
        }
    }

    /// Tickets issued so far.
    pub fn issued(&self) -> u64 {
        self.shared.0.lock().expect("tool queue poisoned").next_ticket - 1
    }

    pub fn pending(&self) -> usize {
        self.shared.0.lock().expect("tool queue poisoned").pending.len()
    }

    pub fn begin(&self, name: &str, args: &[u8]) -> Result<u64, ToolError> {
        let (tool, delay) = self
            .registry
            .get(name)
            .ok_or_else(|| ToolError::UnknownTool(name.to_string()))?;
        let mut st = self.shared.0.lock().expect("tool queue poisoned");
        if st.pending.len() >= self.cap {
            return Err(ToolError::QueueFull(st.pending.len()));
        }
        let ticket = st.next_ticket;
        st.next_ticket += 1;
        st.pending.push_back(ticket);
        self.jobs
            .as_ref()
            .expect("executor alive")
            .send(Job {
                ticket,
                name: name.to_string(),
                tool,
                delay,
                args: args.to_vec(),
            })
            .map_err(|_| ToolError::Transport("tool executor stopped".into()))?;
        Ok(ticket)
    }

    pub fn retrieve(&self, timeout: Option<Duration>) -> Result<ToolResult, ToolError> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let (lock, cv) = &*self.shared;
        let mut st = lock.lock().expect("tool queue poisoned");
        let ticket = *st.pending.front().ok_or(ToolError::NothingPending)?;
        loop {
            if let Some(r) = st.done.remove(&ticket) {
                st.pending.pop_front();
                return Ok(r);
            }
            if let Some(message) = st.failures.remove(&ticket) {
                st.pending.pop_front();
                return Err(ToolError::Failed { ticket, message });
            }
            st = match deadline {
                None => cv.wait(st).expect("tool queue poisoned"),
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        return Err(ToolError::NotReady(ticket));
                    }
                    cv.wait_timeout(st, d - now).expect("tool queue poisoned").0
                }
            };
        }
    }
}

impl Drop for ToolQueue {
    fn drop(&mut self) {
        self.jobs.take();
        if let Some(h) = self.executor.take() {
            let _ = h.join();
        }
    }
}

impl Broker for &ToolQueue {
    fn begin(&mut self, name: &str, args: &[u8]) -> Result<u64, ToolError> {
        ToolQueue::begin(self, name, args)
    }
    fn retrieve(&mut self, timeout: Option<Duration>) -> Result<ToolResult, ToolError> {
        ToolQueue::retrieve(self, timeout)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AgentStep {
    Begin { query: String, k: usize },
    Retrieve,
    Think { seconds: f64, label: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentScript {
    pub steps: Vec<AgentStep>,
}

fn quoted(s: &str, line: usize) -> Result<(String, &str), RuntimeError> {
    let s = s.trim_start();
    let rest = s
        .strip_prefix('"')
        .ok_or_else(|| RuntimeError::Config(format!("script line {line}: expected a quoted string")))?;
    let end = rest
        .find('"')
        .ok_or_else(|| RuntimeError::Config(format!("script line {line}: unterminated string")))?;
    Ok((rest[..end].to_string(), &rest[end + 1..]))
}

impl AgentScript {
    pub fn new(steps: Vec<AgentStep>) -> Result<AgentScript, RuntimeError> {
        let mut outstanding = 0usize;
        for (i, s) in steps.iter().enumerate() {
            match s {
                AgentStep::Begin { .. } => outstanding += 1,
                AgentStep::Retrieve if outstanding == 0 => {
                    return Err(RuntimeError::Config(format!(
                        "step {}: retrieve with no outstanding begin",
                        i + 1
                    )))
                }
                AgentStep::Retrieve => outstanding -= 1,
                AgentStep::Think { seconds, .. } if !(*seconds >= 0.0 && seconds.is_finite()) => {
                    return Err(RuntimeError::Config(format!("step {}: bad think duration", i + 1)))
                }
                AgentStep::Think { .. } => {}
            }
        }
        Ok(AgentScript { steps })
    }

    /// One step per line: `begin "<query>" k=<k>`, `retrieve`,
    /// `think <seconds> "<label>"`. `#` starts a comment line.
    pub fn parse(text: &str) -> Result<AgentScript, RuntimeError> {
        let mut steps = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let t = raw.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let (word, rest) = t.split_once(char::is_whitespace).unwrap_or((t, ""));
            let err = |m: &str| RuntimeError::Config(format!("script line {line}: {m}"));
            steps.push(match word {
                "begin" => {
                    let (query, tail) = quoted(rest, line)?;
                    let k = match tail.trim() {
                        "" => 3,
                        kv => kv
                            .strip_prefix("k=")
                            .and_then(|v| v.parse().ok())
                            .ok_or_else(|| err("expected k=<int>"))?,
                    };
                    AgentStep::Begin { query, k }
                }
                "retrieve" => AgentStep::Retrieve,
                "think" => {
                    let (secs, tail) = rest.trim().split_once(char::is_whitespace).unwrap_or((rest.trim(), ""));
                    let seconds: f64 = secs.parse().map_err(|_| err("bad think duration"))?;
                    let label = if tail.trim().is_empty() {
                        "think".to_string()
                    } else {
                        quoted(tail, line)?.0
                    };
                    AgentStep::Think { seconds, label }
                }
                other => return Err(err(&format!("unknown step {other:?}"))),
            });
        }
        AgentScript::new(steps)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<AgentScript, RuntimeError> {
        AgentScript::parse(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimelineEntry {
    pub step: usize,
    pub kind: EventKind,
    pub label: String,
    /// µs since the script started.
    pub start_us: u64,
    pub end_us: u64,
    /// Time a retrieve spent waiting for its result.
    pub blocked_us: u64,
    pub ticket: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Timeline {
    pub entries: Vec<TimelineEntry>,
    pub results: Vec<ToolResult>,
    pub total_us: u64,
}

impl Timeline {
    pub fn blocked_us(&self) -> u64 {
        self.entries.iter().map(|e| e.blocked_us).sum()
    }

    pub fn think_us(&self) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.kind == EventKind::Think)
            .map(|e| e.end_us - e.start_us)
            .sum()
    }

    pub fn tool_us(&self) -> u64 {
        self.results.iter().map(|r| r.end_us.saturating_sub(r.start_us)).sum()
    }

    /// The same script with every tool call run inline.
    pub fn serialized_baseline_us(&self) -> u64 {
        self.think_us() + self.tool_us()
    }
}

/// Runs the script against `broker`, sleeping for each think step.
pub fn run_agent_script<B: Broker>(
    script: &AgentScript,
    broker: &mut B,
    trace: &TraceSink,
) -> Result<Timeline, ToolError> {
    let t0 = Instant::now();
    let us = |t: Instant| t.duration_since(t0).as_micros() as u64;
    let mut entries = Vec::new();
    let mut results = Vec::new();
    for (i, step) in script.steps.iter().enumerate() {
        let start = Instant::now();
        let (kind, label, ticket) = match step {
            AgentStep::Begin { query, k } => {
                let ticket = broker.begin(VECTOR_SEARCH, &encode_search_args(query, *k))?;
                (EventKind::Send, format!("begin {query}"), Some(ticket))
            }
            AgentStep::Retrieve => {
                let r = broker.retrieve(None)?;
                let ticket = r.ticket;
                results.push(r);
                (EventKind::RetrieveWait, "retrieve".to_string(), Some(ticket))
            }
            AgentStep::Think { seconds, label } => {
                std::thread::sleep(Duration::from_secs_f64(*seconds));
                (EventKind::Think, label.clone(), None)
            }
        };
        let end = Instant::now();
        let blocked = if kind == EventKind::RetrieveWait {
            us(end) - us(start)
        } else {
            0
        };
        if kind != EventKind::Send {
            trace.span(Device::Agent, kind, 0, i as u64, label.clone(), start, end);
        }
        entries.push(TimelineEntry {
            step: i,
            kind,
            label,
            start_us: us(start),
            end_us: us(end),
            blocked_us: blocked,
            ticket,
        });
    }
    Ok(Timeline {
        entries,
        results,
        total_us: us(Instant::now()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_corpus_search() {
        let mut rows = vec![0.0; 16];
        for i in 0..4 {
            rows[i * 4 + i] = 1.0;
        }
        let idx = VectorIndex::new(4, rows, (0..4).map(|i| format!("d{i}")).collect()).unwrap();
        let hits = idx.search(&[0.0, 0.0, 1.0, 0.0], 1).unwrap();
        assert_eq!((hits[0].index, hits[0].score), (2, 1.0));
        let all = idx.search(&[0.0, 0.0, 1.0, 0.0], 4).unwrap();
        assert_eq!(all.iter().map(|h| h.index).collect::<Vec<_>>(), vec![2, 0, 1, 3]);
        assert!(idx.search(&[0.0; 4], 0).is_err());
        assert!(idx.search(&[0.0; 3], 1).is_err());
    }

    #[test]
    fn embedding_file_round_trip() {
        let idx = VectorIndex::synthetic(10, 8, 4);
        let back = VectorIndex::parse_embedding_file(&idx.to_embedding_file()).unwrap();
        assert_eq!(back, idx);
        assert!(VectorIndex::parse_embedding_file("embdb 2 8\n").is_err());
    }

    #[test]
    fn exact_text_query_finds_itself() {
        let idx = VectorIndex::synthetic(50, 16, 2);
        let hits = idx.search(&embed_text(&idx.texts[17], 16), 1).unwrap();
        assert_eq!(hits[0].index, 17);
        assert!((hits[0].score - 1.0).abs() < 1e-5);
    }

    #[test]
    fn queue_is_fifo_with_timeouts() {
        let mut reg = ToolRegistry::with_default_search(0.0);
        reg.inject_delay(VECTOR_SEARCH, 0.2).unwrap();
        let q = ToolQueue::new(reg, ToolQueue::DEFAULT_CAP, TraceSink::disabled());
        assert_eq!(q.retrieve(Some(Duration::ZERO)), Err(ToolError::NothingPending));
        let args = encode_search_args("markets", 2);
        assert_eq!(q.begin(VECTOR_SEARCH, &args).unwrap(), 1);
        assert_eq!(q.begin(VECTOR_SEARCH, &args).unwrap(), 2);
        assert_eq!(q.retrieve(Some(Duration::from_millis(10))), Err(ToolError::NotReady(1)));
        let r = q.retrieve(Some(Duration::from_secs(2))).unwrap();
        assert_eq!(r.ticket, 1);
        assert!(r.end_us - r.start_us >= 200_000);
        assert_eq!(decode_hits(&r.payload).unwrap().len(), 2);
        assert_eq!(q.retrieve(None).unwrap().ticket, 2);
    }

    #[test]
    fn unknown_tool_consumes_no_ticket() {
        let q = ToolQueue::new(ToolRegistry::with_default_search(0.0), 1, TraceSink::disabled());
        assert!(matches!(q.begin("nope", &[]), Err(ToolError::UnknownTool(_))));
        let args = encode_search_args("x", 1);
        assert_eq!(q.begin(VECTOR_SEARCH, &args).unwrap(), 1);
        assert_eq!(q.begin(VECTOR_SEARCH, &args), Err(ToolError::QueueFull(1)));
    }

    #[test]
    fn failed_tool_reports_error() {
        let q = ToolQueue::new(ToolRegistry::with_default_search(0.0), 4, TraceSink::disabled());
        q.begin(VECTOR_SEARCH, &[1]).unwrap();
        assert!(matches!(q.retrieve(None), Err(ToolError::Failed { ticket: 1, .. })));
        let e = ToolError::Failed {
            ticket: 3,
            message: "bad args".into(),
        };
        assert_eq!(ToolError::from_wire(e.code(), e.wire_message()), e);
    }

    #[test]
    fn script_parse_and_prefix_rule() {
        let s = AgentScript::parse("begin \"a b\" k=2\n# c\nthink 0.5 \"plan\"\nretrieve\n").unwrap();
        assert_eq!(
            s.steps[0],
            AgentStep::Begin {
                query: "a b".into(),
                k: 2
            }
        );
        assert!(AgentScript::parse("retrieve\n").is_err());
        assert!(AgentScript::parse("dance\n").is_err());
    }

    #[test]
    fn think_only_script() {
        let q = ToolQueue::new(ToolRegistry::with_default_search(0.0), 4, TraceSink::disabled());
        let s = AgentScript::parse("think 0.02\nthink 0.03\n").unwrap();
        let tl = run_agent_script(&s, &mut &q, &TraceSink::disabled()).unwrap();
        assert!(tl.total_us >= 50_000);
        assert_eq!(tl.tool_us(), 0);
        assert_eq!(tl.blocked_us(), 0);
    }
}
