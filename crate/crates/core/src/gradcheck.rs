//! Central finite-difference checks of every layer's backward pass.

use crate::layers::{layer_backward, layer_forward, ForwardCtx, LayerKind, LayerSpec};
use crate::{DType, Prng, StreamKey, Tensor};

/// Norm-wise relative error, `||a - n|| / max(||a||, ||n||)`.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

fn random(prng: &mut Prng, shape: &[usize], dtype: DType, away_from_zero: bool) -> Tensor {
    let n: usize = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let x = prng.uniform(-1.0, 1.0);
            if away_from_zero && x.abs() < 0.1 {
                x.signum() * 0.1 + x
            } else {
                x
            }
        })
        .collect();
    Tensor::from_f64(shape, v).unwrap().cast(dtype).unwrap()
}

fn perturbed(t: &Tensor, i: usize, d: f64) -> Tensor {
    let mut v = t.to_f64_vec();
    v[i] += d;
    Tensor::from_f64(t.shape(), v).unwrap().cast(t.dtype()).unwrap()
}

struct Case {
    layer: LayerSpec,
    input: Tensor,
    skip: Option<Tensor>,
    labels: Option<Tensor>,
    /// Weights of the scalar objective sum(out * r); `None` for scalar outputs.
    r: Option<Vec<f64>>,
}

impl Case {
    fn objective(&self, layer: &LayerSpec, input: &Tensor, skip: Option<&Tensor>) -> f64 {
        let stream = StreamKey::new(5, 1, 2, 3);
        let mut ctx = ForwardCtx::train(stream);
        if let Some(s) = skip {
            ctx = ctx.with_skip(s);
        }
        if let Some(l) = &self.labels {
            ctx = ctx.with_labels(l);
        }
        let (out, _) = layer_forward(layer, input, &ctx).unwrap();
        let v = out.to_f64_vec();
        match &self.r {
            Some(r) => v.iter().zip(r).map(|(a, b)| a * b).sum(),
            None => v[0],
        }
    }

    /// Worst relative error over input, skip and parameter gradients.
    fn check(&self, h: f64) -> f64 {
        let stream = StreamKey::new(5, 1, 2, 3);
        let mut ctx = ForwardCtx::train(stream);
        if let Some(s) = &self.skip {
            ctx = ctx.with_skip(s);
        }
        if let Some(l) = &self.labels {
            ctx = ctx.with_labels(l);
        }
        let (out, cache) = layer_forward(&self.layer, &self.input, &ctx).unwrap();
        let dtype = self.input.dtype();
        let g_out = match &self.r {
            Some(r) => Tensor::from_f64(out.shape(), r.clone()).unwrap().cast(dtype).unwrap(),
            None => Tensor::from_f64(&[], vec![1.0]).unwrap().cast(dtype).unwrap(),
        };
        let grads = layer_backward(&self.layer, &g_out, &cache).unwrap();

        let central = |f: &dyn Fn(f64) -> f64| (f(h) - f(-h)) / (2.0 * h);
        let mut worst = 0.0f64;

        let num: Vec<f64> = (0..self.input.len())
            .map(|i| central(&|d| self.objective(&self.layer, &perturbed(&self.input, i, d), self.skip.as_ref())))
            .collect();
        worst = worst.max(rel_err(&grads.input.to_f64_vec(), &num));

        if let Some(skip) = &self.skip {
            let num: Vec<f64> = (0..skip.len())
                .map(|i| central(&|d| self.objective(&self.layer, &self.input, Some(&perturbed(skip, i, d)))))
                .collect();
            worst = worst.max(rel_err(&grads.skip.as_ref().unwrap().to_f64_vec(), &num));
        }

        for (p, g) in grads.params.iter().enumerate() {
            let num: Vec<f64> = (0..self.layer.params[p].len())
                .map(|i| {
                    central(&|d| {
                        let mut l = self.layer.clone();
                        l.params[p] = perturbed(&l.params[p], i, d);
                        self.objective(&l, &self.input, self.skip.as_ref())
                    })
                })
                .collect();
            worst = worst.max(rel_err(&g.to_f64_vec(), &num));
        }
        worst
    }
}

fn make_case(kind: &str, seed: u64, dtype: DType) -> Case {
    let mut prng = Prng::new(seed);
    let b = 1 + prng.below(3) as usize;
    let (k, in_shape, relu_like) = match kind {
        "linear" => {
            let (i, o) = (1 + prng.below(5) as usize, 1 + prng.below(5) as usize);
            (
                LayerKind::Linear {
                    in_features: i,
                    out_features: o,
                },
                vec![b, i],
                false,
            )
        }
        "conv2d" => {
            let (ci, co) = (1 + prng.below(3) as usize, 1 + prng.below(3) as usize);
            let kernel = [1, 3][prng.below(2) as usize];
            let stride = 1 + prng.below(2) as usize;
            let padding = prng.below(kernel as u64 / 2 + 1) as usize;
            let hw = 3 + prng.below(3) as usize;
            (
                LayerKind::Conv2d {
                    in_channels: ci,
                    out_channels: co,
                    kernel,
                    stride,
                    padding,
                },
                vec![b, ci, hw, hw],
                false,
            )
        }
        "relu" => (LayerKind::Relu, vec![b, 2 + prng.below(6) as usize], true),
        "dropout" => (
            LayerKind::Dropout {
                rate: prng.uniform(0.1, 0.7),
            },
            vec![b, 2 + prng.below(8) as usize],
            false,
        ),
        "residual_add" => (
            LayerKind::ResidualAdd { skip: 0 },
            vec![b, 2 + prng.below(6) as usize],
            false,
        ),
        "global_avg_pool" => (
            LayerKind::GlobalAvgPool,
            vec![b, 1 + prng.below(3) as usize, 2, 3],
            false,
        ),
        "softmax_xent" => (LayerKind::SoftmaxXent, vec![b, 2 + prng.below(4) as usize], false),
        _ => unreachable!("checked by caller"),
    };
    let mut layer = LayerSpec::new(k.clone()).unwrap();
    layer.init_params(&mut prng);
    let layer = layer.cast_params(dtype).unwrap();
    let input = random(&mut prng, &in_shape, dtype, relu_like);
    let out_shape = k.output_shape(&in_shape).unwrap();
    let skip = matches!(k, LayerKind::ResidualAdd { .. }).then(|| random(&mut prng, &in_shape, dtype, false));
    let labels = matches!(k, LayerKind::SoftmaxXent).then(|| {
        let classes = in_shape[1] as u64;
        Tensor::from_i64(&[b], (0..b).map(|_| prng.below(classes) as i64).collect()).unwrap()
    });
    let r = (!matches!(k, LayerKind::SoftmaxXent)).then(|| {
        let n: usize = out_shape.iter().product();
        (0..n).map(|_| prng.uniform(-1.0, 1.0)).collect()
    });
    Case {
        layer,
        input,
        skip,
        labels,
        r,
    }
}

/// Layer kinds covered by [`worst_rel_err`].
pub const KINDS: [&str; 7] = [
    "linear",
    "conv2d",
    "relu",
    "dropout",
    "residual_add",
    "global_avg_pool",
    "softmax_xent",
];

/// Worst relative error over `instances` random instances of `kind`.
/// Uses step `h` = 1e-3 in F32 and 1e-6 in F64.
pub fn worst_rel_err(kind: &str, dtype: DType, instances: u64, seed: u64) -> Option<f64> {
    if !KINDS.contains(&kind) {
        return None;
    }
    let h = if dtype == DType::F64 { 1e-6 } else { 1e-3 };
    Some(
        (0..instances)
            .map(|i| make_case(kind, seed.wrapping_add(i), dtype).check(h))
            .fold(0.0, f64::max),
    )
}
