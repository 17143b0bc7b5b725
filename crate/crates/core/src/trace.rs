//! Execution traces: capture, JSONL storage, Gantt rendering and summaries.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;
use std::sync::mpsc::{sync_channel, Receiver, SyncSender};
use std::thread::JoinHandle;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TraceError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Device {
    Agent,
    Stage0,
    Link,
    Stage1,
    Tool,
}

impl Device {
    pub fn name(self) -> &'static str {
        match self {
            Device::Agent => "agent",
            Device::Stage0 => "stage0",
            Device::Link => "link",
            Device::Stage1 => "stage1",
            Device::Tool => "tool",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Forward,
    Backward,
    FwdBwd,
    Send,
    Recv,
    ToolExec,
    Think,
    RetrieveWait,
    Step,
}

impl EventKind {
    pub const ALL: [EventKind; 9] = [
        EventKind::Forward,
        EventKind::Backward,
        EventKind::FwdBwd,
        EventKind::Send,
        EventKind::Recv,
        EventKind::ToolExec,
        EventKind::Think,
        EventKind::RetrieveWait,
        EventKind::Step,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EventKind::Forward => "forward",
            EventKind::Backward => "backward",
            EventKind::FwdBwd => "fwd_bwd",
            EventKind::Send => "send",
            EventKind::Recv => "recv",
            EventKind::ToolExec => "tool_exec",
            EventKind::Think => "think",
            EventKind::RetrieveWait => "retrieve_wait",
            EventKind::Step => "step",
        }
    }

    pub fn color(self) -> &'static str {
        match self {
            EventKind::Forward => "#f2c94c",
            EventKind::Backward => "#f2994a",
            EventKind::FwdBwd => "#56ccf2",
            EventKind::Send => "#9b51e0",
            EventKind::Recv => "#bb6bd9",
            EventKind::ToolExec => "#27ae60",
            EventKind::Think => "#2f80ed",
            EventKind::RetrieveWait => "#eb5757",
            EventKind::Step => "#828282",
        }
    }

    pub fn glyph(self) -> char {
        match self {
            EventKind::Forward => 'F',
            EventKind::Backward => 'B',
            EventKind::FwdBwd => 'X',
            EventKind::Send => '>',
            EventKind::Recv => '<',
            EventKind::ToolExec => 'T',
            EventKind::Think => 't',
            EventKind::RetrieveWait => 'w',
            EventKind::Step => 'S',
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub t_start: u64,
    pub t_end: u64,
    pub device: Device,
    pub kind: EventKind,
    pub batch: u64,
    pub microbatch: u64,
    #[serde(default)]
    pub label: String,
}

impl TraceEvent {
    pub fn duration_us(&self) -> u64 {
        self.t_end.saturating_sub(self.t_start)
    }

    /// Lane the event occupies. Link sends and receives run on separate
    /// threads, so they get separate lanes.
    pub fn lane(&self) -> (Device, Option<EventKind>) {
        match self.device {
            Device::Link => (Device::Link, Some(self.kind)),
            d => (d, None),
        }
    }
}

fn lane_name(lane: (Device, Option<EventKind>)) -> String {
    match lane {
        (d, Some(EventKind::Send)) => format!("{}/send", d.name()),
        (d, Some(EventKind::Recv)) => format!("{}/recv", d.name()),
        (d, _) => d.name().to_string(),
    }
}

/// Cheap cloneable handle that timestamps spans against a shared epoch.
#[derive(Clone)]
pub struct TraceSink {
    tx: Option<SyncSender<TraceEvent>>,
    epoch: Instant,
}

impl TraceSink {
    pub fn disabled() -> TraceSink {
        TraceSink {
            tx: None,
            epoch: Instant::now(),
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.tx.is_some()
    }

    pub fn epoch(&self) -> Instant {
        self.epoch
    }

    pub fn micros(&self, at: Instant) -> u64 {
        at.saturating_duration_since(self.epoch).as_micros() as u64
    }

    pub fn now_us(&self) -> u64 {
        self.micros(Instant::now())
    }

    pub fn record(&self, event: TraceEvent) {
        if let Some(tx) = &self.tx {
            // The collector only goes away after every sink is dropped.
            let _ = tx.send(event);
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn span(
        &self,
        device: Device,
        kind: EventKind,
        batch: u64,
        microbatch: u64,
        label: impl Into<String>,
        start: Instant,
        end: Instant,
    ) {
        if self.tx.is_none() {
            return;
        }
        self.record(TraceEvent {
            t_start: self.micros(start),
            t_end: self.micros(end).max(self.micros(start)),
            device,
            kind,
            batch,
            microbatch,
            label: label.into(),
        });
    }
}

/// Collects events from any number of sinks through a bounded queue.
pub struct Recorder {
    sink: TraceSink,
    collector: JoinHandle<Vec<TraceEvent>>,
}

impl Recorder {
    pub const QUEUE_DEPTH: usize = 4096;

    pub fn new() -> Recorder {
        Recorder::with_epoch(Instant::now())
    }

    pub fn with_epoch(epoch: Instant) -> Recorder {
        let (tx, rx): (SyncSender<TraceEvent>, Receiver<TraceEvent>) = sync_channel(Self::QUEUE_DEPTH);
        let collector = std::thread::Builder::new()
            .name("trace-collector".into())
            .spawn(move || rx.into_iter().collect())
            .expect("spawn trace collector");
        Recorder {
            sink: TraceSink { tx: Some(tx), epoch },
            collector,
        }
    }

    pub fn sink(&self) -> TraceSink {
        self.sink.clone()
    }

    /// Waits for every outstanding sink to drop, then returns the events
    /// sorted by start time.
    pub fn finish(self) -> Vec<TraceEvent> {
        drop(self.sink);
        let mut events = self.collector.join().expect("trace collector panicked");
        sort_events(&mut events);
        events
    }
}

impl Default for Recorder {
    fn default() -> Self {
        Recorder::new()
    }
}

pub fn sort_events(events: &mut [TraceEvent]) {
    events.sort_by_key(|a| (a.t_start, a.t_end, a.device, a.kind));
}

pub fn write_jsonl(path: impl AsRef<Path>, events: &[TraceEvent]) -> Result<()> {
    let mut sorted = events.to_vec();
    sort_events(&mut sorted);
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for e in &sorted {
        serde_json::to_writer(&mut w, e).map_err(|e| TraceError::Invalid(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<TraceEvent>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut events = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: TraceEvent = serde_json::from_str(&line).map_err(|err| TraceError::Parse {
            line: i + 1,
            msg: err.to_string(),
        })?;
        if e.t_end < e.t_start {
            return Err(TraceError::Parse {
                line: i + 1,
                msg: "t_end precedes t_start".into(),
            });
        }
        events.push(e);
    }
    Ok(events)
}

/// Two events that double-book one lane.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LaneConflict {
    pub lane: String,
    pub first: TraceEvent,
    pub second: TraceEvent,
}

/// Every pair of overlapping events on the same lane. Touching endpoints
/// are not an overlap.
pub fn lane_conflicts(events: &[TraceEvent]) -> Vec<LaneConflict> {
    let mut lanes: BTreeMap<(Device, Option<EventKind>), Vec<&TraceEvent>> = BTreeMap::new();
    for e in events {
        lanes.entry(e.lane()).or_default().push(e);
    }
    let mut out = Vec::new();
    for (lane, mut evs) in lanes {
        evs.sort_by_key(|e| (e.t_start, e.t_end));
        let mut latest: Option<&TraceEvent> = None;
        for e in evs {
            if let Some(prev) = latest {
                if e.t_start < prev.t_end && e.duration_us() > 0 && prev.duration_us() > 0 {
                    out.push(LaneConflict {
                        lane: lane_name(lane),
                        first: prev.clone(),
                        second: e.clone(),
                    });
                }
            }
            if latest.is_none_or(|p| e.t_end > p.t_end) {
                latest = Some(e);
            }
        }
    }
    out
}

fn lanes_in_order(events: &[TraceEvent]) -> Vec<(Device, Option<EventKind>)> {
    let mut lanes: Vec<_> = events.iter().map(TraceEvent::lane).collect();
    lanes.sort();
    lanes.dedup();
    lanes
}

/// SVG Gantt chart, one row per lane. Byte-identical for identical input.
pub fn render_svg(events: &[TraceEvent]) -> String {
    const LEFT: f64 = 110.0;
    const WIDTH: f64 = 1000.0;
    const ROW: f64 = 28.0;
    const TOP: f64 = 30.0;
    let lanes = lanes_in_order(events);
    let t0 = events.iter().map(|e| e.t_start).min().unwrap_or(0);
    let t1 = events.iter().map(|e| e.t_end).max().unwrap_or(0);
    let span = (t1 - t0).max(1) as f64;
    let legend_y = TOP + ROW * lanes.len() as f64 + 20.0;
    let height = legend_y + 30.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.0}" height="{:.0}" font-family="monospace" font-size="11">"#,
        LEFT + WIDTH + 20.0,
        height
    );
    let _ = writeln!(
        s,
        r#"<text x="{LEFT:.0}" y="16">0 ms .. {:.3} ms</text>"#,
        (t1 - t0) as f64 / 1000.0
    );
    for (row, lane) in lanes.iter().enumerate() {
        let y = TOP + ROW * row as f64;
        let _ = writeln!(s, r#"<text x="4" y="{:.1}">{}</text>"#, y + ROW * 0.6, lane_name(*lane));
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT:.0}" y1="{:.1}" x2="{:.0}" y2="{:.1}" stroke="#dddddd"/>"##,
            y + ROW,
            LEFT + WIDTH,
            y + ROW
        );
        for e in events.iter().filter(|e| e.lane() == *lane) {
            let x = LEFT + WIDTH * (e.t_start - t0) as f64 / span;
            let w = (WIDTH * e.duration_us() as f64 / span).max(0.5);
            let _ = writeln!(
                s,
                r##"<rect x="{x:.2}" y="{:.1}" width="{w:.2}" height="{:.1}" fill="{}" stroke="#333333" stroke-width="0.3"><title>{:?} b{} mb{} {}</title></rect>"##,
                y + 3.0,
                ROW - 6.0,
                e.kind.color(),
                e.kind,
                e.batch,
                e.microbatch,
                xml_escape(&e.label)
            );
        }
    }
    for (i, k) in EventKind::ALL.iter().enumerate() {
        let x = LEFT + 110.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{:.0}" y="{:.0}" width="12" height="12" fill="{}"/><text x="{:.0}" y="{:.0}">{:?}</text>"#,
            x - 100.0,
            legend_y,
            k.color(),
            x - 84.0,
            legend_y + 10.0,
            k
        );
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Text Gantt chart, `cols` characters of timeline per lane.
pub fn render_ascii(events: &[TraceEvent], cols: usize) -> String {
    let cols = cols.max(1);
    let lanes = lanes_in_order(events);
    let t0 = events.iter().map(|e| e.t_start).min().unwrap_or(0);
    let t1 = events.iter().map(|e| e.t_end).max().unwrap_or(0);
    let span = (t1 - t0).max(1) as f64;
    let mut out = String::new();
    for lane in lanes {
        let mut row = vec!['.'; cols];
        for e in events.iter().filter(|e| e.lane() == lane) {
            let a = ((e.t_start - t0) as f64 / span * cols as f64).floor() as usize;
            let b = (((e.t_end - t0) as f64 / span * cols as f64).ceil() as usize).clamp(a + 1, cols);
            for c in row.iter_mut().take(b).skip(a.min(cols - 1)) {
                *c = e.kind.glyph();
            }
        }
        let _ = writeln!(out, "{:<12}|{}|", lane_name(lane), row.into_iter().collect::<String>());
    }
    out
}

/// Named raw series in milliseconds, as shipped in the appendix fixture.
pub fn load_raw_series(path: impl AsRef<Path>) -> Result<BTreeMap<String, Vec<f64>>> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| TraceError::Parse {
        line: e.line(),
        msg: e.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub per_batch_ms: Vec<f64>,
    /// Mean per-batch time, rounded to two decimals.
    pub avg_ms: f64,
    /// Unrounded mean.
    pub mean_ms: f64,
    pub total_s: f64,
    /// `device -> (busy s, idle s)` over the run's span.
    pub devices: BTreeMap<String, (f64, f64)>,
}

pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Summary of a plain list of per-batch times.
pub fn analyze_series(per_batch_ms: &[f64]) -> Result<RunSummary> {
    if per_batch_ms.is_empty() {
        return Err(TraceError::Invalid("need at least one batch".into()));
    }
    let total: f64 = per_batch_ms.iter().sum();
    let mean = total / per_batch_ms.len() as f64;
    Ok(RunSummary {
        per_batch_ms: per_batch_ms.to_vec(),
        avg_ms: round2(mean),
        mean_ms: mean,
        total_s: total / 1000.0,
        devices: BTreeMap::new(),
    })
}

/// Summary of a recorded run. A batch spans from its first to its last
/// stage or link event; `Step` events close it.
pub fn analyze_trace(events: &[TraceEvent]) -> Result<RunSummary> {
    let mut spans: BTreeMap<u64, (u64, u64)> = BTreeMap::new();
    for e in events
        .iter()
        .filter(|e| matches!(e.device, Device::Stage0 | Device::Stage1 | Device::Link))
    {
        let s = spans.entry(e.batch).or_insert((e.t_start, e.t_end));
        s.0 = s.0.min(e.t_start);
        s.1 = s.1.max(e.t_end);
    }
    if spans.is_empty() {
        return Err(TraceError::Invalid("trace has no batches".into()));
    }
    let per_batch: Vec<f64> = spans.values().map(|(a, b)| (b - a) as f64 / 1000.0).collect();
    let mut summary = analyze_series(&per_batch)?;
    let t0 = events.iter().map(|e| e.t_start).min().unwrap_or(0);
    let t1 = events.iter().map(|e| e.t_end).max().unwrap_or(0);
    let wall = (t1 - t0) as f64 / 1e6;
    let mut busy: BTreeMap<String, f64> = BTreeMap::new();
    for e in events {
        *busy.entry(e.device.name().to_string()).or_default() += e.duration_us() as f64 / 1e6;
    }
    summary.devices = busy.into_iter().map(|(d, b)| (d, (b, (wall - b).max(0.0)))).collect();
    Ok(summary)
}

/// `(base − new) / base × 100`.
pub fn percent_decrease(base_avg: f64, new_avg: f64) -> f64 {
    (base_avg - new_avg) / base_avg * 100.0
}

/// Percent decrease between two runs of the same length.
pub fn compare(base: &RunSummary, new: &RunSummary) -> Result<f64> {
    if base.per_batch_ms.len() != new.per_batch_ms.len() {
        return Err(TraceError::Invalid(format!(
            "batch counts differ: {} vs {}",
            base.per_batch_ms.len(),
            new.per_batch_ms.len()
        )));
    }
    Ok(percent_decrease(base.mean_ms, new.mean_ms))
}
