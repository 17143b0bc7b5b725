use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use edgepipe_core::graph::{serialize_partition, serialize_stage, ModelGraph};
use edgepipe_core::trace::TraceSink;
use edgepipe_core::wire::{error_code, Message};
use edgepipe_core::Tensor;
use edgepipe_runtime::host::HostSession;
use edgepipe_runtime::thermal::{ThermalConfig, ThermalState};
use edgepipe_runtime::tools::{decode_hits, encode_search_args, Broker, ToolRegistry, VECTOR_SEARCH};
use edgepipe_runtime::worker::{spawn_loopback, WorkerOptions};
use edgepipe_runtime::RuntimeError;

const XENT: &str = "name xent\ninput 1x2\n0: Linear(2,2)\n1: SoftmaxXent\n";

fn xent_partition() -> Vec<u8> {
    let g = ModelGraph::parse(XENT).unwrap();
    serialize_partition(&g, &g.partition(1).unwrap()).unwrap()
}

fn mlp() -> ModelGraph {
    let mut g = ModelGraph::load(format!("{}/../../fixtures/mlp.cfg", env!("CARGO_MANIFEST_DIR"))).unwrap();
    g.init_weights(3);
    g
}

fn remote_code(r: Result<Message, RuntimeError>) -> u16 {
    match r {
        Ok(Message::Error { code, .. }) => code,
        other => panic!("expected ERROR, got {other:?}"),
    }
}

fn fwdbwd(acts: Tensor, labels: Tensor, mb: u32) -> Message {
    Message::FwdBwdReq {
        batch: 0,
        microbatch: mb,
        activations: acts,
        labels,
    }
}

fn with_worker<T>(opts: WorkerOptions, f: impl FnOnce(&HostSession) -> T) -> T {
    let w = spawn_loopback(opts).unwrap();
    let s = HostSession::connect(w.addr, TraceSink::disabled()).unwrap();
    let out = f(&s);
    s.shutdown().unwrap();
    w.join().unwrap();
    out
}

#[test]
fn hello_then_shutdown_exits_cleanly() {
    let log = Arc::new(Mutex::new(Vec::new()));
    let opts = WorkerOptions {
        session_log: Some(log.clone()),
        ..Default::default()
    };
    with_worker(opts, |_| ());
    let log = log.lock().unwrap();
    assert_eq!(log.len(), 1);
    assert_eq!(log[0].start, log[0].end);
}

#[test]
fn requests_before_partition_are_rejected() {
    with_worker(WorkerOptions::default(), |s| {
        let x = Tensor::from_f32(&[1, 2], vec![0.0, 0.0]).unwrap();
        let y = Tensor::from_i64(&[1], vec![0]).unwrap();
        assert_eq!(remote_code(s.request(&fwdbwd(x, y, 0))), error_code::NO_PARTITION);
        assert_eq!(
            remote_code(s.request(&Message::Step { lr: 0.1 })),
            error_code::NO_PARTITION
        );
        assert_eq!(remote_code(s.request(&Message::FetchWeights)), error_code::NO_PARTITION);
    });
}

#[test]
fn softmax_xent_only_stage_gives_ln2() {
    with_worker(WorkerOptions::default(), |s| {
        s.load_partition(0, xent_partition()).unwrap();
        let x = Tensor::from_f32(&[1, 2], vec![0.0, 0.0]).unwrap();
        let y = Tensor::from_i64(&[1], vec![0]).unwrap();
        match s.request(&fwdbwd(x, y, 0)).unwrap() {
            Message::GradResp { loss, grad, .. } => {
                assert!((loss.to_f64_vec()[0] - std::f64::consts::LN_2).abs() < 1e-6);
                let g = grad.to_f64_vec();
                assert!((g[0] + 0.5).abs() < 1e-6 && (g[1] - 0.5).abs() < 1e-6, "{g:?}");
            }
            other => panic!("{other:?}"),
        }
    });
}

#[test]
fn error_codes_for_bad_requests() {
    with_worker(WorkerOptions::default(), |s| {
        let g = mlp();
        let spec = g.partition(3).unwrap();
        s.load_partition(0, serialize_partition(&g, &spec).unwrap()).unwrap();
        let y = Tensor::from_i64(&[8], vec![0; 8]).unwrap();
        assert_eq!(remote_code(s.request(&Message::Step { lr: 0.1 })), error_code::NO_GRADS);
        let wrong = Tensor::from_f32(&[8, 31], vec![0.0; 8 * 31]).unwrap();
        assert_eq!(
            remote_code(s.request(&fwdbwd(wrong, y.clone(), 0))),
            error_code::SHAPE_MISMATCH
        );
        let mut nan = vec![0.0; 8 * 32];
        nan[5] = f32::NAN;
        let nan = Tensor::from_f32(&[8, 32], nan).unwrap();
        assert_eq!(
            remote_code(s.request(&fwdbwd(nan, y.clone(), 0))),
            error_code::NON_FINITE
        );
        assert_eq!(
            remote_code(s.request(&Message::LoadPartition {
                seed: 0,
                partition: vec![1, 2, 3]
            })),
            error_code::BAD_PARTITION
        );
        // Session survives the errors above.
        let ok = Tensor::from_f32(&[8, 32], vec![0.1; 8 * 32]).unwrap();
        assert!(matches!(
            s.request(&fwdbwd(ok.clone(), y, 0)).unwrap(),
            Message::GradResp { .. }
        ));
        let fwd = Message::FwdReq {
            batch: 0,
            microbatch: 0,
            activations: ok.clone(),
        };
        assert_eq!(remote_code(s.request(&fwd)), error_code::TRAINING_PENDING);
        s.step(0.1).unwrap();
        assert!(matches!(s.request(&fwd).unwrap(), Message::Tensor(t) if t.shape() == [8, 4]));
    });
}

#[test]
fn memory_cap_rejects_large_partitions() {
    let opts = WorkerOptions {
        max_bytes: Some(64),
        ..Default::default()
    };
    with_worker(opts, |s| {
        let g = mlp();
        let bytes = serialize_partition(&g, &g.partition(1).unwrap()).unwrap();
        match s.load_partition(0, bytes) {
            Err(RuntimeError::Remote { code, .. }) => assert_eq!(code, error_code::OVER_MEMORY),
            other => panic!("{other:?}"),
        }
    });
}

#[test]
fn fetch_after_load_returns_loaded_weights() {
    with_worker(WorkerOptions::default(), |s| {
        let g = mlp();
        let spec = g.partition(3).unwrap();
        s.load_partition(0, serialize_partition(&g, &spec).unwrap()).unwrap();
        let got = s.fetch_weights().unwrap();
        let (_, stage1) = g.split(&spec);
        let want = stage1.param_entries();
        assert_eq!(got.len(), want.len());
        for (w, (l, slot, t)) in got.iter().zip(want) {
            assert_eq!((w.layer as usize, w.slot as usize), (l, slot));
            assert!(w.tensor.bit_eq(t));
        }
        assert!(got
            .windows(2)
            .all(|p| (p[0].layer, p[0].slot) < (p[1].layer, p[1].slot)));
    });
}

fn weights_after(reps: usize) -> Vec<Tensor> {
    with_worker(WorkerOptions::default(), |s| {
        let g = mlp();
        s.load_partition(0, serialize_partition(&g, &g.partition(3).unwrap()).unwrap())
            .unwrap();
        let x = Tensor::from_f32(&[8, 32], (0..256).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
        let y = Tensor::from_i64(&[8], (0..8).map(|i| i % 4).collect()).unwrap();
        for _ in 0..reps {
            assert!(matches!(
                s.request(&fwdbwd(x.clone(), y.clone(), 0)).unwrap(),
                Message::GradResp { .. }
            ));
        }
        s.step(0.5).unwrap();
        s.fetch_weights().unwrap().into_iter().map(|w| w.tensor).collect()
    })
}

#[test]
fn repeated_microbatches_accumulate_to_the_same_mean() {
    let one = weights_after(1);
    let two = weights_after(2);
    let four = weights_after(4);
    for ((a, b), c) in one.iter().zip(&two).zip(&four) {
        assert!(a.bit_eq(b) && a.bit_eq(c));
    }
}

#[test]
fn second_session_starts_clean() {
    let log = Arc::new(Mutex::new(Vec::new()));
    let opts = WorkerOptions {
        session_log: Some(log.clone()),
        ..Default::default()
    };
    let w = spawn_loopback(opts).unwrap();
    {
        let s = HostSession::connect(w.addr, TraceSink::disabled()).unwrap();
        let g = mlp();
        s.load_partition(9, serialize_partition(&g, &g.partition(3).unwrap()).unwrap())
            .unwrap();
        let x = Tensor::from_f32(&[8, 32], vec![0.2; 256]).unwrap();
        let y = Tensor::from_i64(&[8], vec![1; 8]).unwrap();
        s.request(&fwdbwd(x, y, 0)).unwrap();
        s.broker().begin(VECTOR_SEARCH, &encode_search_args("q", 2)).unwrap();
    }
    let s = HostSession::connect(w.addr, TraceSink::disabled()).unwrap();
    s.shutdown().unwrap();
    w.join().unwrap();
    let log = log.lock().unwrap();
    assert_eq!(log.len(), 2);
    assert_ne!(log[0].end, log[0].start);
    assert!(log[0].end.partition.is_some());
    assert_eq!(log[1].start, log[0].start);
    assert_eq!(log[1].end, log[1].start);
}

#[test]
fn serious_state_scales_synthetic_compute_by_throttle() {
    let cfg = ThermalConfig {
        gain: 1.0,
        dissipation: 0.0,
        fair_at: 1e-9,
        serious_at: 2e-9,
        throttle_factor: 1.5,
    };
    let opts = WorkerOptions {
        cost_text: Some("default fwd=0 bwd=0\n1 fwd=0.04 bwd=0.04\n".into()),
        thermal: cfg,
        ..Default::default()
    };
    with_worker(opts, |s| {
        s.load_partition(0, xent_partition()).unwrap();
        let x = Tensor::from_f32(&[1, 2], vec![0.0, 0.0]).unwrap();
        let y = Tensor::from_i64(&[1], vec![0]).unwrap();
        let mut us = Vec::new();
        for mb in 0..2 {
            match s.request(&fwdbwd(x.clone(), y.clone(), mb)).unwrap() {
                Message::GradResp { compute_us, .. } => us.push(compute_us as f64 / 1e6),
                other => panic!("{other:?}"),
            }
        }
        let report = s.step(0.0).unwrap();
        assert_eq!(report.state, ThermalState::Serious);
        assert!((us[0] - 0.08).abs() < 0.01, "{us:?}");
        assert!((us[1] - 0.12).abs() < 0.01, "{us:?}");
    });
}

#[test]
fn tool_lane_runs_while_compute_is_busy() {
    let opts = WorkerOptions {
        cost_text: Some("default fwd=0 bwd=0\n1 fwd=0.2 bwd=0.2\n".into()),
        tools: ToolRegistry::with_default_search(0.0),
        ..Default::default()
    };
    with_worker(opts, |s| {
        s.load_partition(0, xent_partition()).unwrap();
        let x = Tensor::from_f32(&[1, 2], vec![0.0, 0.0]).unwrap();
        let y = Tensor::from_i64(&[1], vec![0]).unwrap();
        let t = Instant::now();
        s.send(&fwdbwd(x, y, 0)).unwrap();
        let mut b = s.broker();
        let ticket = b.begin(VECTOR_SEARCH, &encode_search_args("weather", 3)).unwrap();
        let r = b.retrieve(Some(Duration::from_secs(5))).unwrap();
        let tool_done = t.elapsed();
        assert_eq!(r.ticket, ticket);
        assert_eq!(decode_hits(&r.payload).unwrap().len(), 3);
        assert!(matches!(s.recv().unwrap(), Message::GradResp { .. }));
        assert!(tool_done < Duration::from_millis(200), "{tool_done:?}");
        assert!(t.elapsed() >= Duration::from_millis(390));
    });
}

#[test]
fn stage_bytes_round_trip_through_worker() {
    let g = mlp();
    let (_, stage1) = g.split(&g.partition(3).unwrap());
    let bytes = serialize_stage(&stage1).unwrap();
    with_worker(WorkerOptions::default(), |s| {
        s.load_partition(0, bytes).unwrap();
        assert_eq!(s.fetch_weights().unwrap().len(), stage1.param_entries().len());
    });
}
