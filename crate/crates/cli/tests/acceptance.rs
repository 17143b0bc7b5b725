//! One test per acceptance check, each printing a single
//! `[n] name: PASS|FAIL detail` line. Run with `--nocapture` to see them.

use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use edgepipe_core::gradcheck::{worst_rel_err, KINDS};
use edgepipe_core::graph::{predict_makespan, CostModel, LinkModel, ModelGraph};
use edgepipe_core::trace::TraceSink;
use edgepipe_core::verify::{run_suite, MAX_ABS_BOUND, MEAN_ABS_BOUND, WRONG_DROPOUT_FIXTURE};
use edgepipe_core::wire::{
    decode_tensor, encode_tensor, read_frame, read_message, Message, Role, WeightEntry, WireError,
};
use edgepipe_core::{DType, Prng, Storage, Tensor};
use edgepipe_runtime::experiment::{run_experiment, Experiment, RunMode, SplitChoice};
use edgepipe_runtime::thermal::{first_batch_in, simulate_run, ThermalConfig, ThermalModel, ThermalState};
use edgepipe_runtime::tools::{AgentScript, Tool, ToolQueue, ToolRegistry};

// Wall-clock criteria share one core with everything else in this binary.
static SERIAL: Mutex<()> = Mutex::new(());

fn lock() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn fixture(name: &str) -> String {
    format!("{}/../../fixtures/{name}", env!("CARGO_MANIFEST_DIR"))
}

fn report(n: u8, name: &str, ok: bool, detail: String) {
    println!("[{n}] {name}: {} {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "check {n} ({name}) failed: {detail}");
}

#[test]
fn c1_serial_equivalence() {
    let _g = lock();
    let mut g = ModelGraph::load(fixture("mini-resnet.cfg")).unwrap();
    let (layers, skips, params) = (g.len(), g.skip_edges().len(), g.param_count());
    g.init_weights(2024);
    let mut e = Experiment::new(g);
    e.batches = 20;
    e.microbatches = 8;
    e.microbatch_size = 8;
    e.split = SplitChoice::Index(24);
    e.seed = 17;

    let start = Instant::now();
    let base = run_experiment(&e, RunMode::Baseline).unwrap();
    let pipe = run_experiment(&e, RunMode::Pipelined).unwrap();
    let secs = start.elapsed().as_secs_f64();

    let mut differing = 0;
    let mut worst = 0.0f64;
    for ((la, sa, a), (lb, sb, b)) in base.weights.iter().zip(&pipe.weights) {
        assert_eq!((la, sa), (lb, sb));
        if !a.bit_eq(b) {
            differing += 1;
            worst = worst.max(a.max_abs_diff(b).unwrap_or(f64::INFINITY));
        }
    }
    let ok = base.weights.len() == pipe.weights.len()
        && differing == 0
        && params <= 50_000
        && layers == 36
        && skips == 8
        && secs < 60.0;
    report(
        1,
        "serial equivalence",
        ok,
        format!(
            "params={params} tensors={} differing={differing} max_abs={worst:e} runtime_s={secs:.1} (serial+pipelined)",
            base.weights.len()
        ),
    );
}

#[test]
fn c2_makespan_law() {
    let _g = lock();
    let g = ModelGraph::load(fixture("mlp.cfg")).unwrap();
    let costs_text = std::fs::read_to_string(fixture("mlp-balanced.costs")).unwrap();
    let mut graph = g.clone();
    graph.init_weights(3);
    let mut e = Experiment::new(graph);
    e.batches = 6;
    e.microbatches = 8;
    e.microbatch_size = 8;
    e.split = SplitChoice::Index(3);
    e.link = LinkModel::IDEAL;
    e.cost_text = Some(costs_text.clone());

    let costs = CostModel::parse(&costs_text, g.len()).unwrap();
    let predicted_ms = predict_makespan(&g.partition(3).unwrap(), &costs, &LinkModel::IDEAL, 8) * 1e3;

    let pipe = run_experiment(&e, RunMode::Pipelined).unwrap();
    e.batches = 3;
    let base = run_experiment(&e, RunMode::Baseline).unwrap();
    let pipe_ms = pipe.summary.mean_ms;
    let base_ms = base.summary.mean_ms;
    let decrease = (base_ms - pipe_ms) / base_ms * 100.0;
    let ok = (predicted_ms - 450.0).abs() < 1e-9
        && (pipe_ms - 450.0).abs() <= 0.05 * 450.0
        && (base_ms - 800.0).abs() <= 0.05 * 800.0;
    report(
        2,
        "makespan law",
        ok,
        format!(
            "predicted_ms={predicted_ms:.2} measured_ms={pipe_ms:.2} (450 +/- 5%) serial_ms={base_ms:.2} decrease={decrease:.2}% (ideal 43.75%)"
        ),
    );
}

#[test]
fn c3_op_verification() {
    let reports = run_suite(100, 7).unwrap();
    let mut bad = Vec::new();
    let mut flagged = false;
    for r in &reports {
        if r.op_name == WRONG_DROPOUT_FIXTURE {
            flagged = !r.passes();
        } else if !(r.max_abs_diff < MAX_ABS_BOUND && r.mean_abs_diff < MEAN_ABS_BOUND) {
            bad.push(r.to_string());
        }
    }
    let worst = reports
        .iter()
        .filter(|r| r.op_name != WRONG_DROPOUT_FIXTURE)
        .map(|r| r.max_abs_diff)
        .fold(0.0, f64::max);
    report(
        3,
        "op verification",
        bad.is_empty() && flagged && reports.len() >= 7,
        format!(
            "ops={} worst_max_abs={worst:e} wrong_dropout_flagged={flagged} failures={bad:?}",
            reports.len() - 1
        ),
    );
}

#[test]
fn c4_gradient_checks() {
    let mut worst32 = 0.0f64;
    let mut worst64 = 0.0f64;
    let mut failures = Vec::new();
    for (i, kind) in KINDS.iter().enumerate() {
        let e32 = worst_rel_err(kind, DType::F32, 20, 100 + i as u64).unwrap();
        let e64 = worst_rel_err(kind, DType::F64, 20, 200 + i as u64).unwrap();
        if e32 > 1e-3 || e64 > 1e-6 {
            failures.push(format!("{kind}: f32={e32:e} f64={e64:e}"));
        }
        worst32 = worst32.max(e32);
        worst64 = worst64.max(e64);
    }
    report(
        4,
        "gradient checks",
        failures.is_empty(),
        format!(
            "kinds={} instances=20 worst_f32={worst32:.2e} worst_f64={worst64:.2e} {failures:?}",
            KINDS.len()
        ),
    );
}

fn random_tensor(p: &mut Prng) -> Tensor {
    let rank = p.below(4) as usize;
    let shape: Vec<usize> = (0..rank).map(|_| p.below(4) as usize).collect();
    let n: usize = shape.iter().product();
    let storage = match p.below(5) {
        0 => Storage::F32((0..n).map(|_| f32::from_bits(p.next_u64() as u32)).collect()),
        1 => Storage::F64((0..n).map(|_| f64::from_bits(p.next_u64())).collect()),
        2 => Storage::I32((0..n).map(|_| p.next_u64() as i32).collect()),
        3 => Storage::I64((0..n).map(|_| p.next_u64() as i64).collect()),
        _ => Storage::U8((0..n).map(|_| p.next_u64() as u8).collect()),
    };
    Tensor::new(shape, storage).unwrap()
}

fn random_bytes(p: &mut Prng) -> Vec<u8> {
    (0..p.below(24)).map(|_| p.next_u64() as u8).collect()
}

fn random_string(p: &mut Prng) -> String {
    (0..p.below(12))
        .map(|_| char::from_u32(0x61 + p.below(26) as u32).unwrap())
        .collect()
}

fn random_message(p: &mut Prng) -> Message {
    let u32_ = |p: &mut Prng| p.next_u64() as u32;
    match p.below(15) {
        0 => Message::Tensor(random_tensor(p)),
        1 => Message::Hello {
            major: p.next_u64() as u16,
            minor: p.next_u64() as u16,
            role: if p.below(2) == 0 { Role::Host } else { Role::Worker },
        },
        2 => Message::LoadPartition {
            seed: p.next_u64(),
            partition: random_bytes(p),
        },
        3 => Message::FwdReq {
            batch: u32_(p),
            microbatch: u32_(p),
            activations: random_tensor(p),
        },
        4 => Message::FwdBwdReq {
            batch: u32_(p),
            microbatch: u32_(p),
            activations: random_tensor(p),
            labels: random_tensor(p),
        },
        5 => Message::GradResp {
            batch: u32_(p),
            microbatch: u32_(p),
            compute_us: p.next_u64(),
            loss: random_tensor(p),
            grad: random_tensor(p),
        },
        6 => Message::Step {
            lr: f64::from_bits(p.next_u64()),
        },
        7 => Message::FetchWeights,
        8 => Message::WeightsResp(
            (0..p.below(3))
                .map(|_| WeightEntry {
                    layer: u32_(p),
                    slot: p.next_u64() as u8,
                    tensor: random_tensor(p),
                })
                .collect(),
        ),
        9 => Message::ToolBegin {
            ticket: p.next_u64(),
            name: random_string(p),
            args: random_bytes(p),
        },
        10 => Message::ToolRetrieve {
            timeout_ms: p.next_u64(),
        },
        11 => Message::ToolResult {
            ticket: p.next_u64(),
            start_us: p.next_u64(),
            end_us: p.next_u64(),
            status: p.next_u64() as u8,
            payload: random_bytes(p),
        },
        12 => Message::ThermalReport {
            heat: f64::from_bits(p.next_u64()),
            state: p.next_u64() as u8,
            throttle: f64::from_bits(p.next_u64()),
        },
        13 => Message::Shutdown,
        _ => Message::Error {
            code: p.next_u64() as u16,
            message: random_string(p),
        },
    }
}

#[test]
fn c5_wire_conformance() {
    // Golden vectors: every shipped .bin decodes and re-encodes to the same bytes.
    let dir = std::path::PathBuf::from(fixture("vectors"));
    let mut golden = 0;
    let mut golden_bad = Vec::new();
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().and_then(|e| e.to_str()) != Some("bin") {
            continue;
        }
        let bytes = std::fs::read(&path).unwrap();
        let name = path.file_stem().unwrap().to_string_lossy().to_string();
        let again = if name.starts_with("tensor_") {
            encode_tensor(&decode_tensor(&mut &bytes[..]).unwrap()).unwrap()
        } else {
            read_message(&mut &bytes[..], u64::MAX)
                .unwrap()
                .to_frame()
                .unwrap()
                .to_bytes()
        };
        golden += 1;
        if again != bytes {
            golden_bad.push(name);
        }
    }
    let two_by_two = Tensor::from_f32(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let fixture_ok = encode_tensor(&two_by_two).unwrap() == std::fs::read(dir.join("tensor_f32_2x2.bin")).unwrap();

    let mut p = Prng::new(0x5eed);
    let mut fuzz_failures = 0;
    for _ in 0..10_000 {
        let msg = random_message(&mut p);
        let bytes = msg.to_frame().unwrap().to_bytes();
        let ok = match read_message(&mut &bytes[..], u64::MAX) {
            Ok(back) => back.kind() == msg.kind() && back.to_frame().unwrap().to_bytes() == bytes,
            Err(_) => false,
        };
        fuzz_failures += usize::from(!ok);
    }

    let t = std::fs::read(dir.join("tensor_f32_2x2.bin")).unwrap();
    let header = matches!(decode_tensor(&mut &t[..5]), Err(WireError::TruncatedHeader { .. }));
    let payload = matches!(
        decode_tensor(&mut &t[..20]),
        Err(WireError::TruncatedPayload { expected: 16, got: 10 })
    );
    let mut bad_dtype = t.clone();
    bad_dtype[0] = 0xFF;
    let dtype = matches!(decode_tensor(&mut &bad_dtype[..]), Err(WireError::UnknownDType(0xFF)));
    let mut bad_kind = std::fs::read(dir.join("frame_shutdown.bin")).unwrap();
    bad_kind[0] = 0xEE;
    let kind = matches!(
        read_frame(&mut &bad_kind[..], u64::MAX),
        Err(WireError::UnknownFrameKind(0xEE))
    );
    let step = std::fs::read(dir.join("frame_step.bin")).unwrap();
    let short_frame = read_frame(&mut &step[..step.len() - 1], u64::MAX).is_err();

    let ok = golden >= 21
        && golden_bad.is_empty()
        && fixture_ok
        && fuzz_failures == 0
        && header
        && payload
        && dtype
        && kind
        && short_frame;
    report(
        5,
        "wire conformance",
        ok,
        format!(
            "golden={golden} mismatched={golden_bad:?} fuzz=10000 failures={fuzz_failures} truncated_header={header} truncated_payload={payload} unknown_dtype={dtype} unknown_kind={kind} short_frame={short_frame}"
        ),
    );
}

struct Sleeper;

impl Tool for Sleeper {
    fn call(&self, args: &[u8]) -> Result<Vec<u8>, String> {
        std::thread::sleep(Duration::from_micros(u64::from_le_bytes(args[..8].try_into().unwrap())));
        Ok(args.to_vec())
    }
}

#[test]
fn c6_tool_overlap() {
    const EPSILON_MS: f64 = 25.0;
    let _g = lock();
    let script = AgentScript::load(fixture("agent_demo.script")).unwrap();
    let begins = script
        .steps
        .iter()
        .filter(|s| matches!(s, edgepipe_runtime::tools::AgentStep::Begin { .. }))
        .count();
    let tl = edgepipe::run_demo(
        &script,
        "loopback",
        ToolRegistry::with_default_search(0.2),
        TraceSink::disabled(),
    )
    .unwrap();
    let blocked_ms = tl.blocked_us() as f64 / 1e3;
    let saved_ms = (tl.serialized_baseline_us() as f64 - tl.total_us as f64) / 1e3;

    let mut reg = ToolRegistry::new();
    reg.register("sleep", Arc::new(Sleeper));
    let q = ToolQueue::new(reg, ToolQueue::DEFAULT_CAP, TraceSink::disabled());
    let mut p = Prng::new(6);
    let mut fifo_violations = 0;
    for trial in 0..1000u64 {
        let n = 1 + p.below(5);
        let mut issued = Vec::new();
        for i in 0..n {
            let mut args = p.below(1500).to_le_bytes().to_vec();
            args.extend_from_slice(&(trial * 8 + i).to_le_bytes());
            issued.push((q.begin("sleep", &args).unwrap(), args));
        }
        for (ticket, args) in issued {
            let r = q.retrieve(None).unwrap();
            fifo_violations += usize::from(r.ticket != ticket || r.payload != args);
        }
    }

    let ok = begins == 3 && blocked_ms < 10.0 && saved_ms >= 600.0 - EPSILON_MS && fifo_violations == 0;
    report(
        6,
        "tool overlap",
        ok,
        format!(
            "total_ms={:.1} blocked_ms={blocked_ms:.2} serialized_ms={:.1} saved_ms={saved_ms:.1} (>= {}) fifo_trials=1000 violations={fifo_violations}",
            tl.total_us as f64 / 1e3,
            tl.serialized_baseline_us() as f64 / 1e3,
            600.0 - EPSILON_MS
        ),
    );
}

fn analyze(args: &[&str]) -> String {
    let mut out = Vec::new();
    let argv = [
        "edgepipe",
        "trace",
        "analyze",
        "--raw",
        &fixture("appendix_a1.json"),
        "--json",
    ];
    let code = edgepipe::run(argv.iter().copied().chain(args.iter().copied()), &mut out);
    assert_eq!(code, 0);
    String::from_utf8(out).unwrap()
}

fn field(out: &str, key: &str) -> Vec<f64> {
    out.lines()
        .filter_map(|l| serde_json::from_str::<serde_json::Value>(l).ok())
        .filter_map(|v| v.get(key).and_then(|x| x.as_f64()))
        .collect()
}

#[test]
fn c7_appendix_reproduction() {
    let averages = [
        ("desktop_alone", 13104.75),
        ("desktop_iph11", 10162.54),
        ("desktop_iph16", 7308.26),
        ("mac_alone", 9008.52),
        ("mac_iph16", 6719.06),
    ];
    let mut lines = Vec::new();
    let mut ok = true;
    for (series, want) in averages {
        let got = field(&analyze(&["--series", series]), "avg_ms")[0];
        let hit = format!("{got:.2}") == format!("{want:.2}");
        ok &= hit;
        let note = if hit {
            String::new()
        } else {
            format!(" (expected {want:.2})")
        };
        lines.push(format!("{series}={got:.2}{note}"));
    }
    let decreases = [
        ("desktop_iph11", "desktop_alone", 22.45, 22),
        ("desktop_iph16", "desktop_alone", 44.23, 44),
        ("mac_iph16", "mac_alone", 25.41, 25),
    ];
    for (series, base, want, rounded) in decreases {
        let got = field(&analyze(&["--series", series, "--baseline", base]), "percent_decrease")[0];
        let hit = format!("{got:.2}") == format!("{want:.2}") && got.round() as i64 == rounded;
        ok &= hit;
        lines.push(format!("{series}/{base}={got:.2}% (~{}%)", got.round()));
    }
    report(7, "appendix reproduction", ok, lines.join(" "));
}

#[test]
fn c8_thermal_simulation() {
    let cfg = ThermalConfig::load(fixture("thermal.cfg")).unwrap();
    let run = simulate_run(cfg, 30, 15.0, 1.0);
    let fair = first_batch_in(&run, ThermalState::Fair);
    let serious = first_batch_in(&run, ThermalState::Serious);
    let states_ordered = run.windows(2).all(|w| w[1].state_after >= w[0].state_after);
    let near = |got: Option<usize>, want: usize| got.is_some_and(|b| b.abs_diff(want) <= 1);
    // Batches that start in Serious run exactly throttle_factor slower.
    let mut throttle_ok = true;
    for w in run.windows(2) {
        let expect = if w[0].state_after == ThermalState::Serious {
            15.0 * cfg.throttle_factor
        } else {
            15.0
        };
        throttle_ok &= w[1].busy_s == expect;
    }
    let slowed = run.iter().filter(|b| b.busy_s > 15.0).count();

    let mut p = Prng::new(8);
    let mut violations = 0;
    for _ in 0..1000 {
        let mut model = ThermalModel::new(cfg);
        let busy_only = p.below(2) == 0;
        let mut prev = model.state();
        if !busy_only {
            model.advance(p.uniform(0.0, 400.0), 0.0);
            prev = model.state();
        }
        for _ in 0..1 + p.below(40) {
            let amount = p.uniform(0.0, 30.0);
            let s = if busy_only {
                model.advance(amount, 0.0)
            } else {
                model.advance(0.0, amount)
            };
            violations += usize::from(if busy_only {
                s < prev
            } else {
                s > prev || model.heat < 0.0
            });
            prev = s;
        }
    }

    let ok = near(fair, 13) && near(serious, 17) && states_ordered && throttle_ok && slowed > 0 && violations == 0;
    report(
        8,
        "thermal simulation",
        ok,
        format!(
            "fair_from={fair:?} serious_from={serious:?} minimal->fair->serious={states_ordered} throttled_batches={slowed} busy_s_after_serious={:.3} monotonic_sequences=1000 violations={violations}",
            run.last().map(|b| b.busy_s).unwrap_or(0.0)
        ),
    );
}
