//! Execution of a contiguous run of layers.
//!
//! A [`Stage`] is what each device holds: the host keeps the prefix of the
//! model, the worker the suffix, and the serial oracle the whole thing.
//! Layer indices stay global so dropout streams and residual edges line up
//! across the split.

use std::time::Instant;

use crate::layers::{
    add, div_scalar, layer_backward, layer_forward, sgd_step, Cache, ForwardCtx, LayerError, LayerKind, LayerSpec, Mode,
};
use crate::prng::StreamKey;
use crate::tensor::{DType, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    /// Global index of `layers[0]`.
    pub first_index: usize,
    /// Activation shape entering the stage, batch axis first.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, Copy)]
pub struct StageCtx<'a> {
    pub mode: Mode,
    pub seed: u64,
    pub batch: u64,
    pub microbatch: u64,
    pub labels: Option<&'a Tensor>,
}

impl<'a> StageCtx<'a> {
    pub fn train(seed: u64, batch: u64, microbatch: u64, labels: Option<&'a Tensor>) -> Self {
        StageCtx {
            mode: Mode::Train,
            seed,
            batch,
            microbatch,
            labels,
        }
    }

    pub fn infer() -> Self {
        StageCtx {
            mode: Mode::Infer,
            seed: 0,
            batch: 0,
            microbatch: 0,
            labels: None,
        }
    }
}

/// Activations and per-layer caches from a forward pass.
#[derive(Debug, Clone)]
pub struct StageCache {
    acts: Vec<Tensor>,
    caches: Vec<Cache>,
}

/// Parameter gradients, one list per layer (empty for parameter-free layers).
pub type ParamGrads = Vec<Vec<Tensor>>;

impl Stage {
    pub fn end_index(&self) -> usize {
        self.first_index + self.layers.len()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    pub fn weight_bytes(&self) -> usize {
        self.layers.iter().flat_map(|l| &l.params).map(Tensor::size_bytes).sum()
    }

    fn skip_input<'c>(&self, k: usize, acts: &'c [Tensor]) -> Result<Option<&'c Tensor>, LayerError> {
        match self.layers[k].kind {
            LayerKind::ResidualAdd { skip } => {
                if skip < self.first_index || skip >= self.first_index + k {
                    return Err(LayerError::MissingSkip);
                }
                Ok(Some(&acts[skip - self.first_index]))
            }
            _ => Ok(None),
        }
    }

    fn run(&self, input: &Tensor, ctx: &StageCtx, upto: usize) -> Result<(Tensor, StageCache), LayerError> {
        let mut acts = Vec::with_capacity(upto + 1);
        let mut caches = Vec::with_capacity(upto);
        acts.push(input.clone());
        for k in 0..upto {
            let global = (self.first_index + k) as u64;
            let mut lctx = ForwardCtx {
                mode: ctx.mode,
                stream: StreamKey::new(ctx.seed, ctx.batch, ctx.microbatch, global),
                labels: ctx.labels,
                skip: None,
            };
            lctx.skip = self.skip_input(k, &acts)?;
            let (y, cache) = layer_forward(&self.layers[k], &acts[k], &lctx)?;
            acts.push(y);
            caches.push(cache);
        }
        let out = acts.last().cloned().expect("input pushed");
        Ok((out, StageCache { acts, caches }))
    }

    pub fn forward(&self, input: &Tensor, ctx: &StageCtx) -> Result<(Tensor, StageCache), LayerError> {
        self.run(input, ctx, self.layers.len())
    }

    /// Forward-only pass in inference mode, stopping before a trailing loss layer.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor, LayerError> {
        let upto = match self.layers.last() {
            Some(l) if l.kind == LayerKind::SoftmaxXent => self.layers.len() - 1,
            _ => self.layers.len(),
        };
        self.run(input, &StageCtx::infer(), upto).map(|(y, _)| y)
    }

    /// Backpropagates `grad_out` (gradient of the stage output) to the stage input.
    pub fn backward(&self, cache: &StageCache, grad_out: &Tensor) -> Result<(Tensor, ParamGrads), LayerError> {
        let n = cache.caches.len();
        // grads[k]: gradient w.r.t. acts[k]; contributions arrive in
        // descending layer order, first one assigned, later ones added.
        let mut grads: Vec<Option<Tensor>> = vec![None; n + 1];
        grads[n] = Some(grad_out.clone());
        let mut params = vec![Vec::new(); n];
        let accumulate = |slot: &mut Option<Tensor>, g: Tensor| -> Result<(), TensorError> {
            *slot = Some(match slot.take() {
                None => g,
                Some(prev) => add(&prev, &g)?,
            });
            Ok(())
        };
        for k in (0..n).rev() {
            let gout = grads[k + 1]
                .take()
                .ok_or_else(|| TensorError::Invalid(format!("no gradient reached layer {}", self.first_index + k)))?;
            let lg = layer_backward(&self.layers[k], &gout, &cache.caches[k])?;
            if let (Some(gs), LayerKind::ResidualAdd { skip }) = (lg.skip, &self.layers[k].kind) {
                accumulate(&mut grads[skip - self.first_index], gs)?;
            }
            accumulate(&mut grads[k], lg.input)?;
            params[k] = lg.params;
        }
        let gin = grads[0].take().expect("layer 0 always contributes");
        Ok((gin, params))
    }

    pub fn cast(&self, dtype: DType) -> Result<Stage, LayerError> {
        Ok(Stage {
            first_index: self.first_index,
            input_shape: self.input_shape.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| l.cast_params(dtype))
                .collect::<Result<_, _>>()?,
        })
    }

    /// `params <- params - lr * mean_grads`, layer by layer.
    pub fn apply_sgd(&mut self, mean_grads: &ParamGrads, lr: f64) -> Result<(), TensorError> {
        if mean_grads.len() != self.layers.len() {
            return Err(TensorError::Invalid(format!(
                "{} gradient groups for {} layers",
                mean_grads.len(),
                self.layers.len()
            )));
        }
        for (layer, g) in self.layers.iter_mut().zip(mean_grads) {
            if !layer.params.is_empty() {
                layer.params = sgd_step(&layer.params, g, lr)?;
            }
        }
        Ok(())
    }

    /// All parameters as `(global layer index, slot, tensor)`, ascending.
    pub fn param_entries(&self) -> Vec<(usize, usize, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(k, l)| {
                l.params
                    .iter()
                    .enumerate()
                    .map(move |(s, t)| (self.first_index + k, s, t))
            })
            .collect()
    }

    /// Per-layer forward/backward wall time on one input, median of `repeats`.
    pub fn time_layers(
        &self,
        input: &Tensor,
        labels: Option<&Tensor>,
        repeats: usize,
    ) -> Result<Vec<(f64, f64)>, LayerError> {
        let repeats = repeats.max(1);
        let n = self.layers.len();
        let mut fwd = vec![Vec::new(); n];
        let mut bwd = vec![Vec::new(); n];
        for r in 0..repeats {
            let ctx = StageCtx::train(0, 0, r as u64, labels);
            let (_, cache) = self.forward(input, &ctx)?;
            for k in 0..n {
                let lctx = ForwardCtx {
                    mode: Mode::Train,
                    stream: StreamKey::new(0, 0, r as u64, (self.first_index + k) as u64),
                    labels,
                    skip: self.skip_input(k, &cache.acts)?,
                };
                let t = Instant::now();
                let (y, c) = layer_forward(&self.layers[k], &cache.acts[k], &lctx)?;
                fwd[k].push(t.elapsed().as_secs_f64());
                let ones = ones_like(&y);
                let t = Instant::now();
                layer_backward(&self.layers[k], &ones, &c)?;
                bwd[k].push(t.elapsed().as_secs_f64());
            }
        }
        let median = |v: &mut Vec<f64>| {
            v.sort_by(|a, b| a.total_cmp(b));
            v[v.len() / 2]
        };
        Ok((0..n).map(|k| (median(&mut fwd[k]), median(&mut bwd[k]))).collect())
    }
}

fn ones_like(t: &Tensor) -> Tensor {
    match t.dtype() {
        DType::F64 => Tensor::from_f64(t.shape(), vec![1.0; t.len()]).expect("same shape"),
        _ => Tensor::from_f32(t.shape(), vec![1.0; t.len()]).expect("same shape"),
    }
}

/// Sums per-microbatch parameter gradients in arrival order and produces
/// their arithmetic mean.
#[derive(Debug, Clone, Default)]
pub struct GradAccumulator {
    sums: Option<ParamGrads>,
    count: usize,
}

impl GradAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn add(&mut self, grads: ParamGrads) -> Result<(), TensorError> {
        self.sums = Some(match self.sums.take() {
            None => grads,
            Some(prev) => {
                if prev.len() != grads.len() {
                    return Err(TensorError::Invalid("gradient group count changed".into()));
                }
                prev.iter()
                    .zip(&grads)
                    .map(|(a, b)| a.iter().zip(b).map(|(x, y)| add(x, y)).collect::<Result<Vec<_>, _>>())
                    .collect::<Result<_, _>>()?
            }
        });
        self.count += 1;
        Ok(())
    }

    /// Running sums, before division.
    pub fn sums(&self) -> Option<&ParamGrads> {
        self.sums.as_ref()
    }

    pub fn mean(&self) -> Option<Result<ParamGrads, TensorError>> {
        let sums = self.sums.as_ref()?;
        let n = self.count as f64;
        Some(
            sums.iter()
                .map(|g| g.iter().map(|t| div_scalar(t, n)).collect::<Result<Vec<_>, _>>())
                .collect(),
        )
    }

    pub fn clear(&mut self) {
        self.sums = None;
        self.count = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prng::Prng;

    fn residual_stage() -> Stage {
        let mut prng = Prng::new(5);
        let mut layers = vec![
            LayerSpec::new(LayerKind::Linear {
                in_features: 3,
                out_features: 3,
            })
            .unwrap(),
            LayerSpec::new(LayerKind::Relu).unwrap(),
            LayerSpec::new(LayerKind::ResidualAdd { skip: 0 }).unwrap(),
            LayerSpec::new(LayerKind::Linear {
                in_features: 3,
                out_features: 2,
            })
            .unwrap(),
            LayerSpec::new(LayerKind::SoftmaxXent).unwrap(),
        ];
        for l in &mut layers {
            l.init_params(&mut prng);
        }
        Stage {
            first_index: 0,
            input_shape: vec![2, 3],
            layers,
        }
    }

    #[test]
    fn residual_gradient_reaches_input_twice() {
        let stage = residual_stage();
        let x = Tensor::from_f32(&[2, 3], vec![0.5, -0.2, 0.1, 0.3, 0.9, -0.7]).unwrap();
        let y = Tensor::from_i64(&[2], vec![0, 1]).unwrap();
        let (loss, cache) = stage.forward(&x, &StageCtx::train(1, 0, 0, Some(&y))).unwrap();
        assert_eq!(loss.shape(), &[] as &[usize]);
        let (gin, params) = stage.backward(&cache, &Tensor::scalar_f32(1.0)).unwrap();
        assert_eq!(gin.shape(), &[2, 3]);
        assert_eq!(params[0].len(), 2);
        assert!(params[1].is_empty());
    }

    #[test]
    fn infer_stops_before_loss() {
        let stage = residual_stage();
        let x = Tensor::from_f32(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(stage.infer(&x).unwrap().shape(), &[2, 2]);
    }

    #[test]
    fn accumulator_mean_of_two() {
        let g = |v: f32| vec![vec![Tensor::from_f32(&[1], vec![v]).unwrap()]];
        let mut acc = GradAccumulator::new();
        assert!(acc.mean().is_none());
        acc.add(g(1.0)).unwrap();
        acc.add(g(2.0)).unwrap();
        let m = acc.mean().unwrap().unwrap();
        assert_eq!(m[0][0].as_f32().unwrap(), &[1.5]);
        acc.clear();
        assert_eq!(acc.count(), 0);
    }
}
