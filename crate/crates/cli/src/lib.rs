//! The `edgepipe` command line. [`run`] parses arguments and executes one
//! subcommand, returning the process exit code.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use edgepipe_core::graph::{plan_split, CostModel, LinkModel, ModelGraph};
use edgepipe_core::trace::{
    analyze_series, analyze_trace, lane_conflicts, load_raw_series, read_jsonl, render_ascii, render_svg, round2,
    write_jsonl, Recorder, RunSummary, TraceSink,
};
use edgepipe_core::verify::run_suite;
use edgepipe_runtime::experiment::{
    percent_vs, run_experiment, run_inference, Experiment, RunMode, RunOutcome, SplitChoice, WorkerTarget,
};
use edgepipe_runtime::host::HostSession;
use edgepipe_runtime::thermal::{first_batch_in, simulate_run, ThermalConfig, ThermalState};
use edgepipe_runtime::tools::{
    run_agent_script, AgentScript, Timeline, ToolQueue, ToolRegistry, VectorIndex, VectorSearchTool, VECTOR_SEARCH,
};
use edgepipe_runtime::worker::{serve, spawn_loopback, WorkerOptions};

#[derive(Parser)]
#[command(
    name = "edgepipe",
    version,
    about = "Two-stage pipeline training between a host and a worker device",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train, run inference or benchmark from the host side
    #[command(subcommand, arg_required_else_help = true)]
    Host(HostCmd),
    /// Run a worker daemon that serves one host at a time
    Worker(WorkerArgs),
    /// Split begin/retrieve tool calls
    #[command(subcommand, arg_required_else_help = true)]
    Tools(ToolsCmd),
    /// Render and analyze execution traces
    #[command(subcommand, arg_required_else_help = true)]
    Trace(TraceCmd),
    /// Compare every operator against its nested-loop oracle
    VerifyOps(VerifyArgs),
    /// Pick the split point for a model
    Plan(PlanArgs),
    /// Thermal model utilities
    #[command(subcommand, arg_required_else_help = true)]
    Thermal(ThermalCmd),
}

#[derive(Subcommand)]
enum HostCmd {
    /// Pipelined training against a worker
    Train(TrainArgs),
    /// Pipelined forward-only inference
    Infer(RunArgs),
    /// Time the single-process baseline and, unless --baseline, the pipeline
    Bench(BenchArgs),
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Model config file
    #[arg(long)]
    model: PathBuf,
    /// Worker address, or `loopback` for an in-process worker
    #[arg(long, default_value = "loopback")]
    worker: String,
    #[arg(long, default_value_t = 1)]
    batches: usize,
    #[arg(long, default_value_t = 8)]
    microbatches: usize,
    /// Samples per microbatch [default: the model's input batch]
    #[arg(long = "mb-size")]
    mb_size: Option<usize>,
    /// Seeds weight init and dropout
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "data-seed", default_value_t = 1)]
    data_seed: u64,
    /// `auto` or `index:<i>`
    #[arg(long, default_value = "auto", value_parser = parse_split)]
    split: SplitChoice,
    /// Per-layer cost file; pads compute to these durations
    #[arg(long = "synthetic-costs")]
    synthetic_costs: Option<PathBuf>,
    /// Link used by the planner: ideal, lightning, usb-c or bytes/s
    #[arg(long, default_value = "ideal", value_parser = parse_link)]
    link: LinkModel,
    /// Write a JSONL trace here
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Print JSON lines instead of a table
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    /// Only run the single-process baseline
    #[arg(long)]
    baseline: bool,
}

#[derive(Args)]
struct WorkerArgs {
    #[arg(long, default_value = "127.0.0.1:7878")]
    listen: String,
    /// Per-layer cost file; pads compute to these durations
    #[arg(long = "simulate-costs")]
    simulate_costs: Option<PathBuf>,
    /// Thermal config (key=value lines)
    #[arg(long)]
    thermal: Option<PathBuf>,
    /// Reject partitions whose weights and activations exceed this
    #[arg(long = "max-bytes")]
    max_bytes: Option<u64>,
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Seconds added to every vector_search call
    #[arg(long = "tool-delay", default_value_t = 0.0)]
    tool_delay: f64,
    /// Embedding file for vector_search [default: synthetic corpus]
    #[arg(long)]
    index: Option<PathBuf>,
}

#[derive(Subcommand)]
enum ToolsCmd {
    /// Run a scripted agent and report blocked time against the serialized baseline
    Demo(DemoArgs),
}

#[derive(Args)]
struct DemoArgs {
    #[arg(long)]
    script: PathBuf,
    /// Seconds each tool call takes
    #[arg(long, default_value_t = 5.0)]
    delay: f64,
    /// Worker address, `loopback`, or `local` for an in-process queue
    #[arg(long, default_value = "loopback")]
    worker: String,
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Subcommand)]
enum TraceCmd {
    /// Draw a Gantt chart of a trace
    Render(RenderArgs),
    /// Per-batch statistics for a trace or a raw series
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct RenderArgs {
    input: PathBuf,
    /// SVG output path
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print a text chart
    #[arg(long)]
    ascii: bool,
    #[arg(long, default_value_t = 100)]
    cols: usize,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Trace JSONL file
    #[arg(required_unless_present = "raw", conflicts_with = "raw")]
    input: Option<PathBuf>,
    /// JSON file of named per-batch series (ms)
    #[arg(long)]
    raw: Option<PathBuf>,
    /// Series to analyze [default: all]
    #[arg(long, requires = "raw")]
    series: Vec<String>,
    /// Series to compare against
    #[arg(long, requires = "raw")]
    baseline: Option<String>,
    /// Fail when two events share a lane
    #[arg(long = "check-lanes")]
    check_lanes: bool,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 100)]
    cases: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    model: PathBuf,
    /// Per-layer cost file [default: measure on this machine]
    #[arg(long)]
    costs: Option<PathBuf>,
    /// Bytes per second; `inf` for a free link
    #[arg(long, default_value = "inf")]
    bandwidth: f64,
    /// Seconds per message
    #[arg(long, default_value_t = 0.0)]
    latency: f64,
    #[arg(long, default_value_t = 8)]
    microbatches: usize,
    #[arg(long = "mb-size")]
    mb_size: Option<usize>,
    #[arg(long)]
    json: bool,
}

#[derive(Subcommand)]
enum ThermalCmd {
    /// Heat and state over a run of identical batches
    Simulate(ThermalArgs),
}

#[derive(Args)]
struct ThermalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    batches: usize,
    /// Busy seconds per batch
    #[arg(long, default_value_t = 15.0)]
    busy: f64,
    /// Idle seconds between batches
    #[arg(long, default_value_t = 1.0)]
    idle: f64,
    #[arg(long)]
    json: bool,
}

fn parse_split(s: &str) -> std::result::Result<SplitChoice, String> {
    if s == "auto" {
        return Ok(SplitChoice::Auto);
    }
    s.strip_prefix("index:")
        .and_then(|i| i.parse().ok())
        .map(SplitChoice::Index)
        .ok_or_else(|| format!("expected `auto` or `index:<i>`, got {s:?}"))
}

fn parse_link(s: &str) -> std::result::Result<LinkModel, String> {
    match s {
        "ideal" => Ok(LinkModel::IDEAL),
        "lightning" => Ok(LinkModel::LIGHTNING),
        "usb-c" => Ok(LinkModel::USB_C),
        other => match other.parse::<f64>() {
            Ok(bw) if bw > 0.0 => Ok(LinkModel {
                bandwidth: bw,
                latency: 0.0,
            }),
            _ => Err(format!("expected ideal, lightning, usb-c or bytes/s, got {other:?}")),
        },
    }
}

/// Parses `args` (including the program name) and runs the command,
/// writing results to `out`. Returns the exit code: 0 success, 1 runtime
/// failure, 2 usage error.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn execute(cmd: Command, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Host(HostCmd::Train(a)) => host_train(&a.run, a.lr, out),
        Command::Host(HostCmd::Infer(a)) => host_infer(&a, out),
        Command::Host(HostCmd::Bench(a)) => host_bench(&a, out),
        Command::Worker(a) => worker(&a, out),
        Command::Tools(ToolsCmd::Demo(a)) => tools_demo(&a, out),
        Command::Trace(TraceCmd::Render(a)) => trace_render(&a, out),
        Command::Trace(TraceCmd::Analyze(a)) => trace_analyze(&a, out),
        Command::VerifyOps(a) => verify_ops(&a, out),
        Command::Plan(a) => plan(&a, out),
        Command::Thermal(ThermalCmd::Simulate(a)) => thermal_simulate(&a, out),
    }
}

fn load_model(path: &Path, seed: u64) -> Result<ModelGraph> {
    let mut g = ModelGraph::load(path).with_context(|| format!("loading {}", path.display()))?;
    g.init_weights(seed);
    Ok(g)
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn experiment(a: &RunArgs, lr: f64, trace: TraceSink) -> Result<Experiment> {
    let graph = load_model(&a.model, a.seed)?;
    let mut e = Experiment::new(graph);
    e.batches = a.batches;
    e.microbatches = a.microbatches;
    if let Some(s) = a.mb_size {
        e.microbatch_size = s;
    }
    e.lr = lr;
    e.seed = a.seed;
    e.data_seed = a.data_seed;
    e.split = a.split;
    e.link = a.link;
    e.cost_text = a.synthetic_costs.as_deref().map(read_text).transpose()?;
    e.worker = match a.worker.as_str() {
        "loopback" => WorkerTarget::Loopback,
        addr => WorkerTarget::Remote(addr.to_string()),
    };
    e.trace = trace;
    Ok(e)
}

/// Runs `f` with a trace sink, writing the collected events afterwards.
fn traced<T>(path: Option<&Path>, f: impl FnOnce(TraceSink) -> Result<T>) -> Result<T> {
    match path {
        None => f(TraceSink::disabled()),
        Some(p) => {
            let rec = Recorder::new();
            let out = f(rec.sink());
            let events = rec.finish();
            write_jsonl(p, &events).with_context(|| format!("writing {}", p.display()))?;
            out
        }
    }
}

fn print_run(out: &mut dyn Write, run: &RunOutcome, json: bool) -> Result<()> {
    let mode = match run.mode {
        RunMode::Baseline => "baseline",
        RunMode::Pipelined => "pipelined",
    };
    if json {
        for r in &run.reports {
            writeln!(
                out,
                "{}",
                json!({
                    "mode": mode,
                    "batch": r.batch,
                    "wall_ms": r.wall_ms,
                    "loss": r.loss,
                    "stage0_idle_ms": r.stage0_idle_ms(),
                    "stage1_idle_ms": r.stage1_idle_ms(),
                    "thermal": r.thermal.map(|t| t.state.to_string()),
                })
            )?;
        }
        writeln!(
            out,
            "{}",
            json!({
                "mode": mode,
                "model": run.model,
                "cut": run.spec.as_ref().map(|s| s.cut),
                "batches": run.batches,
                "avg_ms": run.summary.avg_ms,
                "total_s": run.summary.total_s,
            })
        )?;
        return Ok(());
    }
    match &run.spec {
        Some(s) => writeln!(out, "{mode} {}: {s}", run.model)?,
        None => writeln!(out, "{mode} {}: single process", run.model)?,
    }
    writeln!(
        out,
        "{:>5} {:>12} {:>10} {:>14} {:>14} {:>8}",
        "batch", "wall_ms", "loss", "stage0_idle_ms", "stage1_idle_ms", "thermal"
    )?;
    for r in &run.reports {
        writeln!(
            out,
            "{:>5} {:>12.2} {:>10.4} {:>14.2} {:>14.2} {:>8}",
            r.batch,
            r.wall_ms,
            r.loss,
            r.stage0_idle_ms(),
            r.stage1_idle_ms(),
            r.thermal.map_or("-".to_string(), |t| t.state.to_string())
        )?;
    }
    writeln!(
        out,
        "avg_ms={:.2} total_s={:.2}",
        run.summary.avg_ms, run.summary.total_s
    )?;
    Ok(())
}

fn host_train(a: &RunArgs, lr: f64, out: &mut dyn Write) -> Result<i32> {
    let run = traced(a.trace.as_deref(), |t| {
        Ok(run_experiment(&experiment(a, lr, t)?, RunMode::Pipelined)?)
    })?;
    print_run(out, &run, a.json)?;
    Ok(0)
}

fn host_infer(a: &RunArgs, out: &mut dyn Write) -> Result<i32> {
    let (outputs, times) = traced(a.trace.as_deref(), |t| {
        Ok(run_inference(&experiment(a, 0.0, t)?, RunMode::Pipelined)?)
    })?;
    let summary = analyze_series(&times)?;
    for (i, (o, ms)) in outputs.iter().zip(&times).enumerate() {
        if a.json {
            writeln!(out, "{}", json!({"batch": i, "wall_ms": ms, "output_shape": o.shape()}))?;
        } else {
            writeln!(out, "batch {i:>4} {ms:>12.2} ms  output {:?}", o.shape())?;
        }
    }
    if a.json {
        writeln!(out, "{}", json!({"avg_ms": summary.avg_ms, "total_s": summary.total_s}))?;
    } else {
        writeln!(out, "avg_ms={:.2} total_s={:.2}", summary.avg_ms, summary.total_s)?;
    }
    Ok(0)
}

fn host_bench(a: &BenchArgs, out: &mut dyn Write) -> Result<i32> {
    let base = traced(a.run.trace.as_deref(), |t| {
        Ok(run_experiment(&experiment(&a.run, a.lr, t)?, RunMode::Baseline)?)
    })?;
    print_run(out, &base, a.run.json)?;
    if a.baseline {
        return Ok(0);
    }
    let pipe = run_experiment(&experiment(&a.run, a.lr, TraceSink::disabled())?, RunMode::Pipelined)?;
    print_run(out, &pipe, a.run.json)?;
    let pct = percent_vs(&base, &pipe)?;
    if a.run.json {
        writeln!(out, "{}", json!({"percent_decrease": pct}))?;
    } else {
        writeln!(out, "decrease vs baseline: {pct:.2}% (~{pct:.0}%)")?;
    }
    Ok(0)
}

fn registry(index: Option<&Path>, delay: f64) -> Result<ToolRegistry> {
    let mut reg = match index {
        None => ToolRegistry::with_default_search(0.0),
        Some(p) => {
            let mut r = ToolRegistry::new();
            r.register(
                VECTOR_SEARCH,
                Arc::new(VectorSearchTool {
                    index: VectorIndex::load(p)?,
                }),
            );
            r
        }
    };
    reg.inject_delay(VECTOR_SEARCH, delay)?;
    Ok(reg)
}

fn worker(a: &WorkerArgs, out: &mut dyn Write) -> Result<i32> {
    let listener = std::net::TcpListener::bind(&a.listen).with_context(|| format!("binding {}", a.listen))?;
    writeln!(out, "listening on {}", listener.local_addr()?)?;
    out.flush()?;
    traced(a.trace.as_deref(), |trace| {
        let opts = WorkerOptions {
            cost_text: a.simulate_costs.as_deref().map(read_text).transpose()?,
            thermal: match &a.thermal {
                Some(p) => ThermalConfig::load(p)?,
                None => ThermalConfig::default(),
            },
            max_bytes: a.max_bytes,
            trace,
            tools: registry(a.index.as_deref(), a.tool_delay)?,
            ..WorkerOptions::default()
        };
        Ok(serve(listener, opts)?)
    })?;
    Ok(0)
}

/// Runs the script against the chosen broker.
pub fn run_demo(script: &AgentScript, worker: &str, tools: ToolRegistry, trace: TraceSink) -> Result<Timeline> {
    let timeline = match worker {
        "local" => {
            let q = ToolQueue::new(tools, ToolQueue::DEFAULT_CAP, trace.clone());
            run_agent_script(script, &mut &q, &trace)?
        }
        "loopback" => {
            let w = spawn_loopback(WorkerOptions {
                tools,
                trace: trace.clone(),
                ..WorkerOptions::default()
            })?;
            let s = HostSession::connect(w.addr, trace.clone())?;
            let t = run_agent_script(script, &mut s.broker(), &trace);
            s.shutdown()?;
            w.join()?;
            t?
        }
        addr => {
            let s = HostSession::connect(addr, trace.clone())?;
            let t = run_agent_script(script, &mut s.broker(), &trace)?;
            drop(s);
            t
        }
    };
    Ok(timeline)
}

fn tools_demo(a: &DemoArgs, out: &mut dyn Write) -> Result<i32> {
    let script = AgentScript::load(&a.script)?;
    let tools = registry(a.index.as_deref(), a.delay)?;
    let tl = traced(a.trace.as_deref(), |t| run_demo(&script, &a.worker, tools, t))?;
    let ms = |us: u64| us as f64 / 1000.0;
    let saved = tl.serialized_baseline_us() as f64 - tl.total_us as f64;
    if a.json {
        for e in &tl.entries {
            writeln!(
                out,
                "{}",
                json!({"step": e.step, "kind": e.kind, "label": e.label, "start_ms": ms(e.start_us),
                       "end_ms": ms(e.end_us), "blocked_ms": ms(e.blocked_us), "ticket": e.ticket})
            )?;
        }
        writeln!(
            out,
            "{}",
            json!({"total_ms": ms(tl.total_us), "blocked_ms": ms(tl.blocked_us()),
                   "serialized_baseline_ms": ms(tl.serialized_baseline_us()), "saved_ms": saved / 1000.0})
        )?;
        return Ok(0);
    }
    writeln!(
        out,
        "{:>4} {:<14} {:>10} {:>10} {:>10}  label",
        "step", "kind", "start_ms", "end_ms", "blocked"
    )?;
    for e in &tl.entries {
        writeln!(
            out,
            "{:>4} {:<14} {:>10.1} {:>10.1} {:>10.1}  {}",
            e.step,
            e.kind.name(),
            ms(e.start_us),
            ms(e.end_us),
            ms(e.blocked_us),
            e.label
        )?;
    }
    writeln!(
        out,
        "total_ms={:.1} blocked_ms={:.1} serialized_baseline_ms={:.1} saved_ms={:.1}",
        ms(tl.total_us),
        ms(tl.blocked_us()),
        ms(tl.serialized_baseline_us()),
        saved / 1000.0
    )?;
    Ok(0)
}

fn trace_render(a: &RenderArgs, out: &mut dyn Write) -> Result<i32> {
    let events = read_jsonl(&a.input)?;
    if let Some(p) = &a.out {
        std::fs::write(p, render_svg(&events)).with_context(|| format!("writing {}", p.display()))?;
    }
    if a.ascii || a.out.is_none() {
        write!(out, "{}", render_ascii(&events, a.cols))?;
    }
    Ok(0)
}

fn summary_line(out: &mut dyn Write, name: &str, s: &RunSummary, json: bool) -> Result<()> {
    if json {
        writeln!(
            out,
            "{}",
            json!({"series": name, "batches": s.per_batch_ms.len(), "avg_ms": s.avg_ms,
                   "mean_ms": s.mean_ms, "total_s": s.total_s, "devices": s.devices})
        )?;
    } else {
        writeln!(
            out,
            "{name:<16} batches={:<4} avg_ms={:.2} total_s={:.2}",
            s.per_batch_ms.len(),
            s.avg_ms,
            s.total_s
        )?;
        for (d, (busy, idle)) in &s.devices {
            writeln!(out, "  {d:<8} busy_s={busy:.3} idle_s={idle:.3}")?;
        }
    }
    Ok(())
}

fn trace_analyze(a: &AnalyzeArgs, out: &mut dyn Write) -> Result<i32> {
    if let Some(path) = &a.input {
        let events = read_jsonl(path)?;
        let s = analyze_trace(&events)?;
        summary_line(out, &path.display().to_string(), &s, a.json)?;
        let conflicts = lane_conflicts(&events);
        if a.check_lanes {
            for c in &conflicts {
                writeln!(out, "lane conflict: {c:?}")?;
            }
            if !conflicts.is_empty() {
                return Ok(1);
            }
            writeln!(out, "lanes ok")?;
        }
        return Ok(0);
    }
    let raw = load_raw_series(a.raw.as_ref().expect("required by clap"))?;
    let names: Vec<String> = if a.series.is_empty() {
        raw.keys().cloned().collect()
    } else {
        a.series.clone()
    };
    let get = |n: &str| {
        raw.get(n)
            .ok_or_else(|| anyhow!("no series {n:?}; have {:?}", raw.keys()))
    };
    let base = a
        .baseline
        .as_deref()
        .map(|b| Ok::<_, anyhow::Error>((b, analyze_series(get(b)?)?)))
        .transpose()?;
    for n in &names {
        let s = analyze_series(get(n)?)?;
        summary_line(out, n, &s, a.json)?;
        if let Some((bname, b)) = &base {
            if bname == n {
                continue;
            }
            if a.series.is_empty() && b.per_batch_ms.len() != s.per_batch_ms.len() {
                if !a.json {
                    writeln!(
                        out,
                        "  vs {bname}: not comparable ({} vs {} batches)",
                        b.per_batch_ms.len(),
                        s.per_batch_ms.len()
                    )?;
                }
                continue;
            }
            let pct = edgepipe_core::trace::compare(b, &s)?;
            if a.json {
                writeln!(
                    out,
                    "{}",
                    json!({"series": n, "baseline": bname, "percent_decrease": pct})
                )?;
            } else {
                writeln!(out, "  vs {bname}: {:.2}% decrease (~{pct:.0}%)", round2(pct))?;
            }
        }
    }
    Ok(0)
}

fn verify_ops(a: &VerifyArgs, out: &mut dyn Write) -> Result<i32> {
    let reports = run_suite(a.cases, a.seed)?;
    let mut ok = true;
    for r in &reports {
        writeln!(out, "{r}")?;
        // The inverse-rate dropout fixture exists to be caught.
        let expect_pass = !r.op_name.contains("inverse_rate");
        ok &= r.passes() == expect_pass;
    }
    Ok(if ok { 0 } else { 1 })
}

fn plan(a: &PlanArgs, out: &mut dyn Write) -> Result<i32> {
    let mut g = load_model(&a.model, 0)?;
    if let Some(s) = a.mb_size {
        g = g.with_batch(s)?;
    }
    let costs = match &a.costs {
        Some(p) => CostModel::load(p, g.len())?,
        None => {
            let data = edgepipe_core::data::SyntheticData::new(&g.input_shape()[1..], g.num_classes().unwrap_or(2), 1);
            let (x, y) = data.batch(0, g.batch_size());
            CostModel::measure(&g, &x, &y)?
        }
    };
    if !(a.bandwidth > 0.0) || !(a.latency >= 0.0) {
        bail!("bandwidth must be > 0 and latency >= 0");
    }
    let link = LinkModel {
        bandwidth: a.bandwidth,
        latency: a.latency,
    };
    let p = plan_split(&g, &costs, &link, a.microbatches)?;
    if a.json {
        writeln!(
            out,
            "{}",
            json!({"cut": p.spec.cut, "predicted_makespan_ms": p.makespan * 1e3,
                   "candidates": p.candidates.iter().map(|(c, t)| json!({"cut": c, "makespan_ms": t * 1e3})).collect::<Vec<_>>()})
        )?;
    } else {
        writeln!(out, "{:>4} {:>16} {:>14}", "cut", "makespan_ms", "activation_B")?;
        for (c, t) in &p.candidates {
            let bytes = g.partition(*c)?.activation_bytes();
            writeln!(out, "{c:>4} {:>16.3} {bytes:>14}", t * 1e3)?;
        }
        writeln!(out, "cut={} predicted_makespan_ms={:.3}", p.spec.cut, p.makespan * 1e3)?;
    }
    Ok(0)
}

fn thermal_simulate(a: &ThermalArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = match &a.config {
        Some(p) => ThermalConfig::load(p)?,
        None => ThermalConfig::default(),
    };
    let run = simulate_run(cfg, a.batches, a.busy, a.idle);
    for b in &run {
        if a.json {
            writeln!(
                out,
                "{}",
                json!({"batch": b.batch, "busy_s": b.busy_s, "heat": b.heat_after, "state": b.state_after.to_string()})
            )?;
        } else {
            writeln!(
                out,
                "batch {:>3} busy_s={:.3} heat={:.1} {}",
                b.batch, b.busy_s, b.heat_after, b.state_after
            )?;
        }
    }
    let first = |s| first_batch_in(&run, s).map_or("never".to_string(), |b| b.to_string());
    if !a.json {
        writeln!(
            out,
            "fair_from={} serious_from={}",
            first(ThermalState::Fair),
            first(ThermalState::Serious)
        )?;
    }
    Ok(0)
}
