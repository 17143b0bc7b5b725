//! The hybrid two-stage schedule and a discrete-event simulator for it.
//!
//! Stage 0 runs forwards eagerly and each backward as soon as its gradient
//! is back (backward first when both are ready). Stage 1 runs one unified
//! forward+backward per microbatch in arrival order.

use std::fmt;

use edgepipe_core::graph::{CostModel, LinkModel, PartitionSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Lane {
    Stage0,
    LinkSend,
    Stage1,
    LinkRecv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Forward(usize),
    Send(usize),
    FwdBwd(usize),
    Recv(usize),
    Backward(usize),
    Step,
}

impl Action {
    pub fn lane(self) -> Lane {
        match self {
            Action::Forward(_) | Action::Backward(_) | Action::Step => Lane::Stage0,
            Action::Send(_) => Lane::LinkSend,
            Action::FwdBwd(_) => Lane::Stage1,
            Action::Recv(_) => Lane::LinkRecv,
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // 1-based microbatch numbers, as in the usual pipeline diagrams.
        match *self {
            Action::Forward(i) => write!(f, "F{}", i + 1),
            Action::Send(i) => write!(f, "S{}", i + 1),
            Action::FwdBwd(i) => write!(f, "FB{}", i + 1),
            Action::Recv(i) => write!(f, "R{}", i + 1),
            Action::Backward(i) => write!(f, "B{}", i + 1),
            Action::Step => f.write_str("Step"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub microbatches: usize,
    pub slots: Vec<Action>,
    /// `deps[k]`: indices into `slots` that must finish before slot `k` starts.
    pub deps: Vec<Vec<usize>>,
}

impl Schedule {
    pub fn index_of(&self, a: Action) -> usize {
        self.slots.iter().position(|&s| s == a).expect("action in schedule")
    }
}

/// Dependency set of one training batch with `m` microbatches.
pub fn build_schedule(m: usize) -> Schedule {
    assert!(m >= 1, "need at least one microbatch");
    let mut slots = Vec::with_capacity(5 * m + 1);
    for i in 0..m {
        slots.extend([
            Action::Forward(i),
            Action::Send(i),
            Action::FwdBwd(i),
            Action::Recv(i),
            Action::Backward(i),
        ]);
    }
    slots.push(Action::Step);
    let at = |a: Action| slots.iter().position(|&s| s == a).unwrap();
    let deps = slots
        .iter()
        .map(|&a| match a {
            Action::Forward(_) => vec![],
            Action::Send(i) => vec![at(Action::Forward(i))],
            Action::FwdBwd(i) => vec![at(Action::Send(i))],
            Action::Recv(i) => vec![at(Action::FwdBwd(i))],
            Action::Backward(i) => vec![at(Action::Recv(i))],
            Action::Step => (0..m).map(|i| at(Action::Backward(i))).collect(),
        })
        .collect();
    Schedule {
        microbatches: m,
        slots,
        deps,
    }
}

/// Per-action durations for the simulator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Durations {
    pub forward: f64,
    pub backward: f64,
    pub fwdbwd: f64,
    pub send: f64,
    pub recv: f64,
    pub step: f64,
}

impl Durations {
    pub fn from_costs(spec: &PartitionSpec, costs: &CostModel, link: &LinkModel) -> Durations {
        let sum = |v: &[f64], r: std::ops::Range<usize>| v[r].iter().sum::<f64>();
        let bytes = spec.activation_bytes();
        Durations {
            forward: sum(&costs.forward, spec.stage0.clone()),
            backward: sum(&costs.backward, spec.stage0.clone()),
            fwdbwd: sum(&costs.forward, spec.stage1.clone()) + sum(&costs.backward, spec.stage1.clone()),
            send: link.transfer_time(bytes),
            recv: link.transfer_time(bytes),
            step: 0.0,
        }
    }

    fn of(&self, a: Action) -> f64 {
        match a {
            Action::Forward(_) => self.forward,
            Action::Backward(_) => self.backward,
            Action::FwdBwd(_) => self.fwdbwd,
            Action::Send(_) => self.send,
            Action::Recv(_) => self.recv,
            Action::Step => self.step,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimEvent {
    pub action: Action,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    /// In start order.
    pub events: Vec<SimEvent>,
    pub makespan: f64,
}

impl Simulation {
    pub fn get(&self, a: Action) -> &SimEvent {
        self.events.iter().find(|e| e.action == a).expect("action simulated")
    }

    /// Groups of actions sharing a start time, in time order.
    pub fn levels(&self) -> Vec<Vec<Action>> {
        let mut out: Vec<(f64, Vec<Action>)> = Vec::new();
        for e in &self.events {
            match out.last_mut() {
                Some((t, group)) if *t == e.start => group.push(e.action),
                _ => out.push((e.start, vec![e.action])),
            }
        }
        out.into_iter().map(|(_, g)| g).collect()
    }
}

/// Event-driven execution of `schedule`. Each lane runs one action at a
/// time; stage 0 prefers a ready backward over the next forward.
pub fn simulate(schedule: &Schedule, d: &Durations) -> Simulation {
    let n = schedule.slots.len();
    let mut end: Vec<Option<f64>> = vec![None; n];
    let mut started = vec![false; n];
    let mut lane_free = std::collections::HashMap::new();
    let mut events = Vec::with_capacity(n);
    let m = schedule.microbatches;
    let ready_at = |k: usize, end: &[Option<f64>]| -> Option<f64> {
        schedule.deps[k]
            .iter()
            .try_fold(0.0f64, |acc, &p| end[p].map(|e| acc.max(e)))
    };
    while events.len() < n {
        // Candidate per lane: the next action it would take, with its earliest start.
        let mut best: Option<(f64, usize, usize)> = None;
        for lane in [Lane::Stage0, Lane::LinkSend, Lane::Stage1, Lane::LinkRecv] {
            let free = *lane_free.get(&lane).unwrap_or(&0.0f64);
            let candidates: Vec<usize> = match lane {
                Lane::Stage0 => {
                    let next_b = (0..m)
                        .map(Action::Backward)
                        .map(|a| schedule.index_of(a))
                        .find(|&k| !started[k]);
                    let next_f = (0..m)
                        .map(Action::Forward)
                        .map(|a| schedule.index_of(a))
                        .find(|&k| !started[k]);
                    let step = schedule.index_of(Action::Step);
                    [next_b, next_f, (!started[step]).then_some(step)]
                        .into_iter()
                        .flatten()
                        .collect()
                }
                _ => schedule
                    .slots
                    .iter()
                    .enumerate()
                    .filter(|(k, a)| a.lane() == lane && !started[*k])
                    .map(|(k, _)| k)
                    .take(1)
                    .collect(),
            };
            // Earliest feasible start on this lane; ties keep candidate order
            // (backward before forward before step).
            let mut lane_best: Option<(f64, usize)> = None;
            for k in candidates {
                if let Some(r) = ready_at(k, &end) {
                    let s = r.max(free);
                    if lane_best.is_none_or(|(bs, _)| s < bs) {
                        lane_best = Some((s, k));
                    }
                }
            }
            if let Some((s, k)) = lane_best {
                // Stage 0 decides last among simultaneous starts so that
                // zero-length transfers finishing now are visible to it.
                let rank = match lane {
                    Lane::Stage1 => 0,
                    Lane::LinkRecv => 1,
                    Lane::LinkSend => 2,
                    Lane::Stage0 => 3,
                };
                if best.is_none_or(|(bs, _, br)| s < bs || (s == bs && rank < br)) {
                    best = Some((s, k, rank));
                }
            }
        }
        let (s, k, _) = best.expect("schedule is acyclic");
        let a = schedule.slots[k];
        let e = s + d.of(a);
        started[k] = true;
        end[k] = Some(e);
        lane_free.insert(a.lane(), e);
        events.push(SimEvent {
            action: a,
            start: s,
            end: e,
        });
    }
    events.sort_by(|a, b| {
        a.start
            .total_cmp(&b.start)
            .then((a.action.lane() as u8).cmp(&(b.action.lane() as u8)))
    });
    let makespan = events.iter().map(|e| e.end).fold(0.0, f64::max);
    Simulation { events, makespan }
}

/// Single-device time for the same work: every microbatch through both stages.
pub fn serial_time(d: &Durations, m: usize) -> f64 {
    m as f64 * (d.forward + d.backward + d.fwdbwd) + d.step
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(f: f64, b: f64, fb: f64) -> Durations {
        Durations {
            forward: f,
            backward: b,
            fwdbwd: fb,
            send: 0.0,
            recv: 0.0,
            step: 0.0,
        }
    }

    fn compute_levels(sim: &Simulation) -> Vec<Vec<String>> {
        sim.levels()
            .into_iter()
            .map(|g| {
                g.into_iter()
                    .filter(|a| matches!(a.lane(), Lane::Stage0 | Lane::Stage1))
                    .map(|a| a.to_string())
                    .collect::<Vec<_>>()
            })
            .filter(|g| !g.is_empty())
            .collect()
    }

    #[test]
    fn one_microbatch() {
        let sim = simulate(&build_schedule(1), &unit(1.0, 1.0, 1.0));
        assert_eq!(
            compute_levels(&sim),
            vec![vec!["F1"], vec!["FB1"], vec!["B1"], vec!["Step"]]
        );
    }

    #[test]
    fn two_microbatches_overlap() {
        let sim = simulate(&build_schedule(2), &unit(1.0, 1.0, 1.0));
        assert_eq!(
            compute_levels(&sim),
            vec![
                vec!["F1"],
                vec!["F2", "FB1"],
                vec!["B1", "FB2"],
                vec!["B2"],
                vec!["Step"]
            ]
        );
    }

    #[test]
    fn balanced_eight_is_nine_units() {
        let sim = simulate(&build_schedule(8), &unit(0.5, 0.5, 1.0));
        assert_eq!(sim.makespan, 9.0);
        assert_eq!(serial_time(&unit(0.5, 0.5, 1.0), 8), 16.0);
    }

    #[test]
    fn stage_counts() {
        let s = build_schedule(5);
        let on = |l: Lane| s.slots.iter().filter(|a| a.lane() == l && **a != Action::Step).count();
        assert_eq!(on(Lane::Stage0), 10);
        assert_eq!(on(Lane::Stage1), 5);
    }
}
