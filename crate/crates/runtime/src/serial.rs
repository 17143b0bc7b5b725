//! Single-process trainer running the same microbatch order as the
//! pipeline. Used as the reference for pipelined results and as the
//! one-device baseline.

use std::time::{Duration, Instant};

use edgepipe_core::graph::{CostModel, ModelGraph};
use edgepipe_core::stage::{GradAccumulator, Stage, StageCtx};
use edgepipe_core::trace::{Device, EventKind, TraceSink};
use edgepipe_core::Tensor;

use crate::host::{split_microbatches, BatchReport};
use crate::{Result, RuntimeError};

pub struct SerialTrainer {
    pub stage: Stage,
    pub seed: u64,
    pub microbatches: usize,
    /// Simulated seconds per microbatch through the whole model.
    sim: Option<f64>,
    trace: TraceSink,
}

impl SerialTrainer {
    pub fn new(graph: &ModelGraph, microbatch_size: usize, microbatches: usize, seed: u64) -> Result<SerialTrainer> {
        if microbatches == 0 {
            return Err(RuntimeError::Config("need at least one microbatch".into()));
        }
        Ok(SerialTrainer {
            stage: graph.with_batch(microbatch_size)?.full_stage(),
            seed,
            microbatches,
            sim: None,
            trace: TraceSink::disabled(),
        })
    }

    pub fn with_costs(mut self, costs: &CostModel) -> SerialTrainer {
        self.sim = Some(costs.forward.iter().sum::<f64>() + costs.backward.iter().sum::<f64>());
        self
    }

    pub fn with_trace(mut self, trace: TraceSink) -> SerialTrainer {
        self.trace = trace;
        self
    }

    pub fn train_batch(&mut self, batch: u64, inputs: &Tensor, labels: &Tensor, lr: f64) -> Result<BatchReport> {
        let t_batch = Instant::now();
        let xs = split_microbatches(inputs, self.microbatches)?;
        let ys = split_microbatches(labels, self.microbatches)?;
        let mut acc = GradAccumulator::new();
        let mut loss_sum = 0.0;
        for (i, (x, y)) in xs.iter().zip(&ys).enumerate() {
            let t = Instant::now();
            let ctx = StageCtx::train(self.seed, batch, i as u64, Some(y));
            let (loss, cache) = self.stage.forward(x, &ctx)?;
            let l = loss.to_f64_vec()[0];
            if !l.is_finite() {
                return Err(RuntimeError::NonFinite(format!(
                    "loss {l} at batch {batch} microbatch {i}"
                )));
            }
            loss_sum += l;
            let (_, grads) = self
                .stage
                .backward(&cache, &Tensor::scalar_f32(1.0).cast(loss.dtype())?)?;
            acc.add(grads)?;
            if let Some(s) = self.sim {
                let spent = t.elapsed();
                let target = Duration::from_secs_f64(s);
                if target > spent {
                    std::thread::sleep(target - spent);
                }
            }
            self.trace.span(
                Device::Stage0,
                EventKind::FwdBwd,
                batch,
                i as u64,
                "serial",
                t,
                Instant::now(),
            );
        }
        let mean = acc.mean().expect("at least one microbatch")?;
        self.stage.apply_sgd(&mean, lr)?;
        let wall = t_batch.elapsed().as_secs_f64() * 1e3;
        Ok(BatchReport {
            batch,
            wall_ms: wall,
            loss: loss_sum / self.microbatches as f64,
            stage0_busy_ms: wall,
            stage1_busy_ms: 0.0,
            thermal: None,
        })
    }

    /// Forward-only over the whole batch, one microbatch at a time.
    pub fn infer(&self, inputs: &Tensor) -> Result<Tensor> {
        let xs = split_microbatches(inputs, self.microbatches)?;
        let outs = xs
            .iter()
            .map(|x| self.stage.infer(x))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Tensor::concat_rows(&outs)?)
    }

    pub fn weights(&self) -> Vec<(usize, usize, Tensor)> {
        self.stage
            .param_entries()
            .into_iter()
            .map(|(l, s, t)| (l, s, t.clone()))
            .collect()
    }
}
