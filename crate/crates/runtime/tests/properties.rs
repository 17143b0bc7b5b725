use std::sync::Arc;
use std::time::Duration;

use proptest::prelude::*;

use edgepipe_core::trace::TraceSink;
use edgepipe_runtime::schedule::{build_schedule, simulate, Durations};
use edgepipe_runtime::thermal::{ThermalConfig, ThermalModel};
use edgepipe_runtime::tools::{Tool, ToolQueue, ToolRegistry, VectorIndex};

fn durations(f: f64, b: f64, fb: f64, link: f64) -> Durations {
    Durations {
        forward: f,
        backward: b,
        fwdbwd: fb,
        send: link,
        recv: link,
        step: 0.0,
    }
}

fn formula(f: f64, b: f64, fb: f64, link: f64, m: usize) -> f64 {
    let (t0, t1) = (f + b, fb);
    t0 + t1 + (m as f64 - 1.0) * t0.max(t1) + 2.0 * m as f64 * link
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1_000))]

    #[test]
    fn simulated_makespan_never_exceeds_prediction(
        f in 0u32..50, b in 0u32..50, fb in 0u32..100, link in 0u32..20, m in 1usize..17,
    ) {
        let (f, b, fb, link) = (f as f64, b as f64, fb as f64, link as f64);
        let sim = simulate(&build_schedule(m), &durations(f, b, fb, link));
        let pred = formula(f, b, fb, link, m);
        prop_assert!(sim.makespan <= pred + 1e-9, "sim {} > predicted {}", sim.makespan, pred);
        // Neither stage can finish faster than its own serial work.
        prop_assert!(sim.makespan + 1e-9 >= m as f64 * (f + b).max(fb));
    }

    #[test]
    fn prediction_is_exact_when_stage1_dominates(f in 0u32..50, b in 0u32..50, extra in 0u32..50, m in 1usize..17) {
        let (f, b) = (f as f64, b as f64);
        let fb = f + b + extra as f64;
        let sim = simulate(&build_schedule(m), &durations(f, b, fb, 0.0));
        prop_assert!((sim.makespan - formula(f, b, fb, 0.0, m)).abs() < 1e-9);
    }

    #[test]
    fn busy_only_heat_never_lowers_state(steps in prop::collection::vec(0.0f64..50.0, 1..40), gain in 0.1f64..3.0) {
        let cfg = ThermalConfig { gain, dissipation: 1.0, fair_at: 100.0, serious_at: 200.0, throttle_factor: 1.05 };
        let mut t = ThermalModel::new(cfg);
        let mut prev = t.state();
        for busy in steps {
            let s = t.advance(busy, 0.0);
            prop_assert!(s >= prev);
            prev = s;
        }
    }

    #[test]
    fn idle_only_heat_never_raises_state(start in 0.0f64..400.0, steps in prop::collection::vec(0.0f64..50.0, 1..40)) {
        let cfg = ThermalConfig { gain: 1.0, dissipation: 1.5, fair_at: 100.0, serious_at: 200.0, throttle_factor: 1.05 };
        let mut t = ThermalModel::new(cfg);
        t.advance(start, 0.0);
        let mut prev = t.state();
        for idle in steps {
            let s = t.advance(0.0, idle);
            prop_assert!(s <= prev);
            prop_assert!(t.heat >= 0.0);
            prev = s;
        }
    }

    #[test]
    fn mixed_sequences_keep_state_a_function_of_heat(
        steps in prop::collection::vec((0.0f64..30.0, 0.0f64..30.0), 1..40),
    ) {
        let cfg = ThermalConfig { gain: 1.0, dissipation: 1.0, fair_at: 100.0, serious_at: 200.0, throttle_factor: 1.05 };
        let mut t = ThermalModel::new(cfg);
        for (busy, idle) in steps {
            let before = t.heat;
            t.advance(busy, idle);
            prop_assert_eq!(t.heat, (before + busy - idle).max(0.0));
            let want = if t.heat < 100.0 { 0 } else if t.heat < 200.0 { 1 } else { 2 };
            prop_assert_eq!(t.state() as u8, want);
        }
    }

    #[test]
    fn top_k_matches_full_sort(
        dim in 1usize..6,
        base in prop::collection::vec(-3i8..4, 1..200),
        dup in 1usize..6,
        query in prop::collection::vec(-3i8..4, 6),
        k_pick in any::<prop::sample::Index>(),
    ) {
        // Small integers keep every dot product exact, so ties are real ties.
        let mut rows: Vec<f32> = base.iter().map(|&v| v as f32).collect();
        rows.truncate(rows.len() / dim * dim);
        prop_assume!(!rows.is_empty());
        let one = rows.clone();
        for _ in 1..dup {
            rows.extend_from_slice(&one);
        }
        rows.truncate(1000 * dim);
        let n = rows.len() / dim;
        let index = VectorIndex::new(dim, rows.clone(), (0..n).map(|i| format!("doc{i}")).collect()).unwrap();
        let q: Vec<f32> = query[..dim].iter().map(|&v| v as f32).collect();
        let k = 1 + k_pick.index(n);
        let hits = index.search(&q, k).unwrap();

        let mut all: Vec<(i64, usize)> = rows
            .chunks(dim)
            .enumerate()
            .map(|(i, r)| (r.iter().zip(&q).map(|(a, b)| (*a as i64) * (*b as i64)).sum(), i))
            .collect();
        all.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        let want: Vec<usize> = all[..k].iter().map(|e| e.1).collect();
        let got: Vec<usize> = hits.iter().map(|h| h.index).collect();
        prop_assert_eq!(got, want);
    }
}

/// Sleeps for the microseconds encoded in its args, then echoes them.
struct Sleeper;

impl Tool for Sleeper {
    fn call(&self, args: &[u8]) -> Result<Vec<u8>, String> {
        let us = u64::from_le_bytes(args[..8].try_into().unwrap());
        std::thread::sleep(Duration::from_micros(us));
        Ok(args.to_vec())
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1_000))]

    #[test]
    fn results_come_back_in_begin_order(
        delays in prop::collection::vec(0u64..1500, 1..6),
        tag in any::<u32>(),
    ) {
        let mut reg = ToolRegistry::new();
        reg.register("sleep", Arc::new(Sleeper));
        let q = ToolQueue::new(reg, ToolQueue::DEFAULT_CAP, TraceSink::disabled());
        let mut tickets = Vec::new();
        for (i, d) in delays.iter().enumerate() {
            let mut args = d.to_le_bytes().to_vec();
            args.extend_from_slice(&(tag ^ i as u32).to_le_bytes());
            tickets.push((q.begin("sleep", &args).unwrap(), args));
        }
        prop_assert!(tickets.windows(2).all(|w| w[0].0 < w[1].0));
        for (ticket, args) in tickets {
            let r = q.retrieve(None).unwrap();
            prop_assert_eq!(r.ticket, ticket);
            prop_assert_eq!(r.payload, args);
            prop_assert!(r.end_us >= r.start_us);
        }
        prop_assert!(q.retrieve(Some(Duration::ZERO)).is_err());
    }
}
