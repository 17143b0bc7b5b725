//! The fixed layer set, with forward and backward passes.

use std::fmt;

use thiserror::Error;

use crate::ops::{self, ConvGeom};
use crate::prng::{Prng, StreamKey};
use crate::tensor::{expect_view, numel, DType, Real, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LayerError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{layer}: expected input shape {expected}, got {actual:?}")]
    BadInput {
        layer: String,
        expected: String,
        actual: Vec<usize>,
    },
    #[error("invalid layer: {0}")]
    InvalidSpec(String),
    #[error("residual add has no skip input")]
    MissingSkip,
    #[error("softmax cross-entropy needs labels")]
    MissingLabels,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: i64, classes: usize },
    #[error("cache does not belong to a {0} layer")]
    CacheMismatch(&'static str),
}

pub type Result<T> = std::result::Result<T, LayerError>;

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    Dropout {
        rate: f64,
    },
    /// Adds the input of layer `skip` (an earlier index) to the current input.
    ResidualAdd {
        skip: usize,
    },
    GlobalAvgPool,
    SoftmaxXent,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Linear { .. } => "Linear",
            LayerKind::Conv2d { .. } => "Conv2d",
            LayerKind::Relu => "ReLU",
            LayerKind::Dropout { .. } => "Dropout",
            LayerKind::ResidualAdd { .. } => "ResidualAdd",
            LayerKind::GlobalAvgPool => "GlobalAvgPool",
            LayerKind::SoftmaxXent => "SoftmaxXent",
        }
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerKind::Linear {
                in_features,
                out_features,
            } => vec![vec![in_features, out_features], vec![out_features]],
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![vec![out_channels, in_channels, kernel, kernel], vec![out_channels]],
            _ => Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LayerError::InvalidSpec(format!("{}: {m}", self.name())));
        match *self {
            LayerKind::Linear {
                in_features,
                out_features,
            } if in_features == 0 || out_features == 0 => bad("features must be positive"),
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => {
                if kernel == 0 {
                    bad("kernel must be >= 1")
                } else if stride == 0 {
                    bad("stride must be >= 1")
                } else if in_channels == 0 || out_channels == 0 {
                    bad("channels must be positive")
                } else {
                    Ok(())
                }
            }
            LayerKind::Dropout { rate } if !(0.0..1.0).contains(&rate) => bad(&format!("rate {rate} outside [0, 1)")),
            _ => Ok(()),
        }
    }

    /// Output shape for a batch-leading input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |expected: &str| LayerError::BadInput {
            layer: self.name().to_string(),
            expected: expected.to_string(),
            actual: input.to_vec(),
        };
        match *self {
            LayerKind::Linear {
                in_features,
                out_features,
            } => match input {
                [n, f] if *f == in_features => Ok(vec![*n, out_features]),
                _ => Err(bad(&format!("[batch, {in_features}]"))),
            },
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => match input {
                [n, c, h, w] if *c == in_channels && h + 2 * padding >= kernel && w + 2 * padding >= kernel => {
                    let g = ConvGeom {
                        batch: *n,
                        in_ch: *c,
                        out_ch: out_channels,
                        height: *h,
                        width: *w,
                        kernel,
                        stride,
                        pad: padding,
                    };
                    let (oh, ow) = g.out_hw();
                    Ok(vec![*n, out_channels, oh, ow])
                }
                _ => Err(bad(&format!(
                    "[batch, {in_channels}, h, w] with h,w >= {kernel} - 2*{padding}"
                ))),
            },
            LayerKind::Relu | LayerKind::Dropout { .. } | LayerKind::ResidualAdd { .. } => Ok(input.to_vec()),
            LayerKind::GlobalAvgPool => match input {
                [n, c, _, _] => Ok(vec![*n, *c]),
                _ => Err(bad("[batch, channels, h, w]")),
            },
            LayerKind::SoftmaxXent => match input {
                [_, _] => Ok(Vec::new()),
                _ => Err(bad("[batch, classes]")),
            },
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerKind::Linear {
                in_features,
                out_features,
            } => write!(f, "Linear({in_features},{out_features})"),
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => write!(f, "Conv2d({in_channels},{out_channels},{kernel},{stride},{padding})"),
            LayerKind::Relu => write!(f, "ReLU"),
            LayerKind::Dropout { rate } => write!(f, "Dropout({rate})"),
            LayerKind::ResidualAdd { skip } => write!(f, "ResidualAdd skip={skip}"),
            LayerKind::GlobalAvgPool => write!(f, "GlobalAvgPool"),
            LayerKind::SoftmaxXent => write!(f, "SoftmaxXent"),
        }
    }
}

/// A layer together with its parameter tensors (weight first, then bias).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub params: Vec<Tensor>,
}

impl LayerSpec {
    /// A layer with zero-filled F32 parameters.
    pub fn new(kind: LayerKind) -> Result<LayerSpec> {
        kind.validate()?;
        let params = kind
            .param_shapes()
            .iter()
            .map(|s| Tensor::zeros(DType::F32, s))
            .collect();
        Ok(LayerSpec { kind, params })
    }

    pub fn with_params(kind: LayerKind, params: Vec<Tensor>) -> Result<LayerSpec> {
        kind.validate()?;
        let shapes = kind.param_shapes();
        if shapes.len() != params.len() {
            return Err(LayerError::InvalidSpec(format!(
                "{} takes {} parameter tensors, got {}",
                kind.name(),
                shapes.len(),
                params.len()
            )));
        }
        for (s, p) in shapes.iter().zip(&params) {
            if s.as_slice() != p.shape() {
                return Err(TensorError::ShapeMismatch(s.clone(), p.shape().to_vec()).into());
            }
        }
        Ok(LayerSpec { kind, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Uniform fan-in initialisation for weights; biases start at zero.
    pub fn init_params(&mut self, prng: &mut Prng) {
        let fan_in = match self.kind {
            LayerKind::Linear { in_features, .. } => in_features,
            LayerKind::Conv2d {
                in_channels, kernel, ..
            } => in_channels * kernel * kernel,
            _ => return,
        };
        let bound = (6.0 / fan_in as f64).sqrt();
        let shapes = self.kind.param_shapes();
        let w: Vec<f32> = (0..numel(&shapes[0]))
            .map(|_| prng.uniform(-bound, bound) as f32)
            .collect();
        self.params[0] = Tensor::from_f32(&shapes[0], w).expect("shape from kind");
        self.params[1] = Tensor::zeros(DType::F32, &shapes[1]);
    }

    pub fn cast_params(&self, dtype: DType) -> Result<LayerSpec> {
        let params = self
            .params
            .iter()
            .map(|p| p.cast(dtype))
            .collect::<std::result::Result<_, _>>()?;
        Ok(LayerSpec {
            kind: self.kind.clone(),
            params,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardCtx<'a> {
    pub mode: Mode,
    pub stream: StreamKey,
    pub labels: Option<&'a Tensor>,
    pub skip: Option<&'a Tensor>,
}

impl<'a> ForwardCtx<'a> {
    pub fn infer() -> Self {
        ForwardCtx {
            mode: Mode::Infer,
            stream: StreamKey::new(0, 0, 0, 0),
            labels: None,
            skip: None,
        }
    }

    pub fn train(stream: StreamKey) -> Self {
        ForwardCtx {
            mode: Mode::Train,
            stream,
            labels: None,
            skip: None,
        }
    }

    pub fn with_labels(mut self, labels: &'a Tensor) -> Self {
        self.labels = Some(labels);
        self
    }

    pub fn with_skip(mut self, skip: &'a Tensor) -> Self {
        self.skip = Some(skip);
        self
    }
}

/// What a forward pass keeps for its backward pass.
#[derive(Debug, Clone)]
pub enum Cache {
    Linear { input: Tensor },
    Conv2d { input: Tensor },
    Relu { input: Tensor },
    Dropout { mask: Option<Vec<bool>>, dtype: DType },
    ResidualAdd,
    GlobalAvgPool { input_shape: Vec<usize> },
    SoftmaxXent { probs: Tensor, labels: Vec<usize> },
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub input: Tensor,
    /// Gradient routed to the skip source of a residual add.
    pub skip: Option<Tensor>,
    pub params: Vec<Tensor>,
}

fn conv_geom(kind: &LayerKind, input: &[usize]) -> ConvGeom {
    match (kind, input) {
        (
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            },
            [n, _, h, w],
        ) => ConvGeom {
            batch: *n,
            in_ch: *in_channels,
            out_ch: *out_channels,
            height: *h,
            width: *w,
            kernel: *kernel,
            stride: *stride,
            pad: *padding,
        },
        _ => unreachable!("shape validated by output_shape"),
    }
}

fn labels_of(labels: Option<&Tensor>, rows: usize, classes: usize) -> Result<Vec<usize>> {
    let t = labels.ok_or(LayerError::MissingLabels)?;
    let v = t.as_i64().ok_or(TensorError::DTypeMismatch {
        expected: DType::I64,
        actual: t.dtype(),
    })?;
    if t.shape() != [rows] {
        return Err(TensorError::ShapeMismatch(vec![rows], t.shape().to_vec()).into());
    }
    v.iter()
        .map(|&l| {
            if l >= 0 && (l as usize) < classes {
                Ok(l as usize)
            } else {
                Err(LayerError::LabelOutOfRange { label: l, classes })
            }
        })
        .collect()
}

fn forward_t<T: Real>(layer: &LayerSpec, input: &Tensor, ctx: &ForwardCtx) -> Result<(Tensor, Cache)> {
    let out_shape = layer.kind.output_shape(input.shape())?;
    let x = expect_view::<T>(input)?;
    let param = |i: usize| expect_view::<T>(&layer.params[i]);
    Ok(match layer.kind {
        LayerKind::Linear {
            in_features,
            out_features,
        } => {
            let y = ops::linear_forward(x, param(0)?, param(1)?, input.shape()[0], in_features, out_features);
            (T::wrap(out_shape, y), Cache::Linear { input: input.clone() })
        }
        LayerKind::Conv2d { .. } => {
            let g = conv_geom(&layer.kind, input.shape());
            let y = ops::conv2d_forward(&g, x, param(0)?, param(1)?);
            (T::wrap(out_shape, y), Cache::Conv2d { input: input.clone() })
        }
        LayerKind::Relu => {
            let y = x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
            (T::wrap(out_shape, y), Cache::Relu { input: input.clone() })
        }
        LayerKind::Dropout { rate } => match ctx.mode {
            Mode::Infer => (
                input.clone(),
                Cache::Dropout {
                    mask: None,
                    dtype: T::DTYPE,
                },
            ),
            Mode::Train => {
                let mask = ops::dropout_mask(x.len(), rate, &mut Prng::for_stream(ctx.stream));
                let y = ops::apply_dropout_mask(x, &mask, rate);
                (
                    T::wrap(out_shape, y),
                    Cache::Dropout {
                        mask: Some(mask),
                        dtype: T::DTYPE,
                    },
                )
            }
        },
        LayerKind::ResidualAdd { .. } => {
            let skip = ctx.skip.ok_or(LayerError::MissingSkip)?;
            if skip.shape() != input.shape() {
                return Err(TensorError::ShapeMismatch(input.shape().to_vec(), skip.shape().to_vec()).into());
            }
            let s = expect_view::<T>(skip)?;
            let y = x.iter().zip(s).map(|(&a, &b)| a + b).collect();
            (T::wrap(out_shape, y), Cache::ResidualAdd)
        }
        LayerKind::GlobalAvgPool => {
            let sh = input.shape();
            let y = ops::global_avg_pool(x, sh[0] * sh[1], sh[2] * sh[3]);
            (
                T::wrap(out_shape, y),
                Cache::GlobalAvgPool {
                    input_shape: sh.to_vec(),
                },
            )
        }
        LayerKind::SoftmaxXent => {
            let (rows, classes) = (input.shape()[0], input.shape()[1]);
            let labels = labels_of(ctx.labels, rows, classes)?;
            let out = ops::softmax_xent(x, &labels, classes);
            (
                T::wrap(Vec::new(), vec![out.loss]),
                Cache::SoftmaxXent {
                    probs: T::wrap(input.shape().to_vec(), out.probs),
                    labels,
                },
            )
        }
    })
}

fn backward_t<T: Real>(layer: &LayerSpec, gout: &Tensor, cache: &Cache) -> Result<LayerGrads> {
    let g = expect_view::<T>(gout)?;
    let param = |i: usize| expect_view::<T>(&layer.params[i]);
    let plain = |input: Tensor| LayerGrads {
        input,
        skip: None,
        params: Vec::new(),
    };
    let check = |expected: &[usize]| -> Result<()> {
        if gout.shape() != expected {
            return Err(TensorError::ShapeMismatch(expected.to_vec(), gout.shape().to_vec()).into());
        }
        Ok(())
    };
    match (&layer.kind, cache) {
        (
            LayerKind::Linear {
                in_features,
                out_features,
            },
            Cache::Linear { input },
        ) => {
            let rows = input.shape()[0];
            check(&[rows, *out_features])?;
            let gr = ops::linear_backward(
                expect_view::<T>(input)?,
                param(0)?,
                g,
                rows,
                *in_features,
                *out_features,
            );
            Ok(LayerGrads {
                input: T::wrap(input.shape().to_vec(), gr.input),
                skip: None,
                params: vec![
                    T::wrap(vec![*in_features, *out_features], gr.weight),
                    T::wrap(vec![*out_features], gr.bias),
                ],
            })
        }
        (LayerKind::Conv2d { .. }, Cache::Conv2d { input }) => {
            check(&layer.kind.output_shape(input.shape())?)?;
            let geom = conv_geom(&layer.kind, input.shape());
            let gr = ops::conv2d_backward(&geom, expect_view::<T>(input)?, param(0)?, g);
            let shapes = layer.kind.param_shapes();
            Ok(LayerGrads {
                input: T::wrap(input.shape().to_vec(), gr.input),
                skip: None,
                params: vec![
                    T::wrap(shapes[0].clone(), gr.weight),
                    T::wrap(shapes[1].clone(), gr.bias),
                ],
            })
        }
        (LayerKind::Relu, Cache::Relu { input }) => {
            check(input.shape())?;
            let x = expect_view::<T>(input)?;
            let gi = x
                .iter()
                .zip(g)
                .map(|(&xv, &gv)| if xv > T::zero() { gv } else { T::zero() })
                .collect();
            Ok(plain(T::wrap(input.shape().to_vec(), gi)))
        }
        (LayerKind::Dropout { rate }, Cache::Dropout { mask, .. }) => Ok(plain(match mask {
            None => gout.clone(),
            Some(m) => {
                if m.len() != g.len() {
                    return Err(LayerError::CacheMismatch("Dropout"));
                }
                T::wrap(gout.shape().to_vec(), ops::apply_dropout_mask(g, m, *rate))
            }
        })),
        (LayerKind::ResidualAdd { .. }, Cache::ResidualAdd) => Ok(LayerGrads {
            input: gout.clone(),
            skip: Some(gout.clone()),
            params: Vec::new(),
        }),
        (LayerKind::GlobalAvgPool, Cache::GlobalAvgPool { input_shape }) => {
            check(&input_shape[..2])?;
            let hw = input_shape[2] * input_shape[3];
            let denom = T::of(hw as f64);
            let gi = g.iter().flat_map(|&gv| std::iter::repeat_n(gv / denom, hw)).collect();
            Ok(plain(T::wrap(input_shape.clone(), gi)))
        }
        (LayerKind::SoftmaxXent, Cache::SoftmaxXent { probs, labels }) => {
            check(&[])?;
            let classes = probs.shape()[1];
            let gi = ops::softmax_xent_backward(expect_view::<T>(probs)?, labels, classes, g[0]);
            Ok(plain(T::wrap(probs.shape().to_vec(), gi)))
        }
        (kind, _) => Err(LayerError::CacheMismatch(kind.name())),
    }
}

fn check_param_dtypes(layer: &LayerSpec, dtype: DType) -> Result<()> {
    for p in &layer.params {
        if p.dtype() != dtype {
            return Err(TensorError::DTypeMismatch {
                expected: dtype,
                actual: p.dtype(),
            }
            .into());
        }
    }
    Ok(())
}

pub fn layer_forward(layer: &LayerSpec, input: &Tensor, ctx: &ForwardCtx) -> Result<(Tensor, Cache)> {
    check_param_dtypes(layer, input.dtype())?;
    match input.dtype() {
        DType::F32 => forward_t::<f32>(layer, input, ctx),
        DType::F64 => forward_t::<f64>(layer, input, ctx),
        dtype => Err(TensorError::UnsupportedDType {
            op: layer.kind.name(),
            dtype,
        }
        .into()),
    }
}

pub fn layer_backward(layer: &LayerSpec, grad_out: &Tensor, cache: &Cache) -> Result<LayerGrads> {
    check_param_dtypes(layer, grad_out.dtype())?;
    match grad_out.dtype() {
        DType::F32 => backward_t::<f32>(layer, grad_out, cache),
        DType::F64 => backward_t::<f64>(layer, grad_out, cache),
        dtype => Err(TensorError::UnsupportedDType {
            op: layer.kind.name(),
            dtype,
        }
        .into()),
    }
}

fn zip_map(
    a: &Tensor,
    b: &Tensor,
    f32op: impl Fn(f32, f32) -> f32,
    f64op: impl Fn(f64, f64) -> f64,
) -> std::result::Result<Tensor, TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch(a.shape().to_vec(), b.shape().to_vec()));
    }
    match (a.as_f32(), b.as_f32(), a.as_f64(), b.as_f64()) {
        (Some(x), Some(y), _, _) => Tensor::from_f32(a.shape(), x.iter().zip(y).map(|(&p, &q)| f32op(p, q)).collect()),
        (_, _, Some(x), Some(y)) => Tensor::from_f64(a.shape(), x.iter().zip(y).map(|(&p, &q)| f64op(p, q)).collect()),
        _ => Err(TensorError::DTypeMismatch {
            expected: a.dtype(),
            actual: b.dtype(),
        }),
    }
}

/// Elementwise `a + b`.
pub fn add(a: &Tensor, b: &Tensor) -> std::result::Result<Tensor, TensorError> {
    zip_map(a, b, |x, y| x + y, |x, y| x + y)
}

/// Elementwise `a / d` for a float scalar.
pub fn div_scalar(a: &Tensor, d: f64) -> std::result::Result<Tensor, TensorError> {
    match (a.as_f32(), a.as_f64()) {
        (Some(x), _) => Tensor::from_f32(a.shape(), x.iter().map(|&v| v / d as f32).collect()),
        (_, Some(x)) => Tensor::from_f64(a.shape(), x.iter().map(|&v| v / d).collect()),
        _ => Err(TensorError::UnsupportedDType {
            op: "div_scalar",
            dtype: a.dtype(),
        }),
    }
}

/// Plain SGD, `p <- p - lr * g`, applied in parameter order.
pub fn sgd_step(params: &[Tensor], grads: &[Tensor], lr: f64) -> std::result::Result<Vec<Tensor>, TensorError> {
    if params.len() != grads.len() {
        return Err(TensorError::Invalid(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(TensorError::Invalid(format!(
            "learning rate {lr} must be finite and >= 0"
        )));
    }
    let lr32 = lr as f32;
    params
        .iter()
        .zip(grads)
        .map(|(p, g)| zip_map(p, g, |x, y| x - lr32 * y, |x, y| x - lr * y))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f32t(shape: &[usize], v: &[f32]) -> Tensor {
        Tensor::from_f32(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn relu_forward_backward() {
        let l = LayerSpec::new(LayerKind::Relu).unwrap();
        let (y, c) = layer_forward(&l, &f32t(&[3], &[-1.0, 0.0, 2.0]), &ForwardCtx::infer()).unwrap();
        assert_eq!(y.as_f32().unwrap(), &[0.0, 0.0, 2.0]);
        let (_, c2) = layer_forward(&l, &f32t(&[2], &[-1.0, 2.0]), &ForwardCtx::infer()).unwrap();
        let g = layer_backward(&l, &f32t(&[2], &[5.0, 7.0]), &c2).unwrap();
        assert_eq!(g.input.as_f32().unwrap(), &[0.0, 7.0]);
        drop(c);
    }

    #[test]
    fn unit_conv_sums_channels() {
        let kind = LayerKind::Conv2d {
            in_channels: 2,
            out_channels: 1,
            kernel: 1,
            stride: 1,
            padding: 0,
        };
        let l = LayerSpec::with_params(kind, vec![f32t(&[1, 2, 1, 1], &[1.0, 1.0]), f32t(&[1], &[0.0])]).unwrap();
        let x = f32t(&[1, 2, 2, 2], &[1., 2., 3., 4., 10., 20., 30., 40.]);
        let (y, _) = layer_forward(&l, &x, &ForwardCtx::infer()).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.as_f32().unwrap(), &[11., 22., 33., 44.]);
    }

    #[test]
    fn xent_symmetric_two_class() {
        let l = LayerSpec::new(LayerKind::SoftmaxXent).unwrap();
        let labels = Tensor::from_i64(&[1], vec![0]).unwrap();
        let ctx = ForwardCtx::infer().with_labels(&labels);
        let (loss, c) = layer_forward(&l, &f32t(&[1, 2], &[0.0, 0.0]), &ctx).unwrap();
        assert!((loss.as_f32().unwrap()[0] - std::f32::consts::LN_2).abs() < 1e-7);
        let g = layer_backward(&l, &Tensor::scalar_f32(1.0), &c).unwrap();
        assert_eq!(g.input.as_f32().unwrap(), &[-0.5, 0.5]);
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        let l = LayerSpec::new(LayerKind::Dropout { rate: 0.0 }).unwrap();
        let x = f32t(&[4], &[1.5, -2.0, 3.25, 0.1]);
        let ctx = ForwardCtx::train(StreamKey::new(1, 2, 3, 4));
        let (y, _) = layer_forward(&l, &x, &ctx).unwrap();
        assert!(y.bit_eq(&x));
    }

    #[test]
    fn dropout_half_doubles_kept() {
        let l = LayerSpec::new(LayerKind::Dropout { rate: 0.5 }).unwrap();
        let x = f32t(&[64], &[3.0; 64]);
        let (y, _) = layer_forward(&l, &x, &ForwardCtx::train(StreamKey::new(9, 0, 0, 0))).unwrap();
        let ys = y.as_f32().unwrap();
        assert!(ys.iter().all(|&v| v == 0.0 || v == 6.0));
        assert!(ys.contains(&0.0) && ys.contains(&6.0));
    }

    #[test]
    fn dropout_rejects_bad_rates() {
        assert!(LayerSpec::new(LayerKind::Dropout { rate: 1.0 }).is_err());
        assert!(LayerSpec::new(LayerKind::Dropout { rate: -0.1 }).is_err());
    }

    #[test]
    fn dropout_inference_is_identity() {
        let l = LayerSpec::new(LayerKind::Dropout { rate: 0.9 }).unwrap();
        let x = f32t(&[3], &[1.0, 2.0, 3.0]);
        let (y, _) = layer_forward(&l, &x, &ForwardCtx::infer()).unwrap();
        assert!(y.bit_eq(&x));
    }

    #[test]
    fn residual_needs_skip() {
        let l = LayerSpec::new(LayerKind::ResidualAdd { skip: 0 }).unwrap();
        let x = f32t(&[2], &[1.0, 2.0]);
        assert_eq!(
            layer_forward(&l, &x, &ForwardCtx::infer()).unwrap_err(),
            LayerError::MissingSkip
        );
        let (y, _) = layer_forward(&l, &x, &ForwardCtx::infer().with_skip(&x)).unwrap();
        assert_eq!(y.as_f32().unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let l = LayerSpec::new(LayerKind::Linear {
            in_features: 4,
            out_features: 2,
        })
        .unwrap();
        let err = layer_forward(&l, &Tensor::zeros(DType::F32, &[2, 3]), &ForwardCtx::infer()).unwrap_err();
        assert!(matches!(err, LayerError::BadInput { .. }));
    }

    #[test]
    fn backward_rejects_foreign_cache() {
        let relu = LayerSpec::new(LayerKind::Relu).unwrap();
        let pool = LayerSpec::new(LayerKind::GlobalAvgPool).unwrap();
        let (_, cache) = layer_forward(&relu, &f32t(&[1], &[1.0]), &ForwardCtx::infer()).unwrap();
        assert!(matches!(
            layer_backward(&pool, &f32t(&[1], &[1.0]), &cache),
            Err(LayerError::CacheMismatch(_))
        ));
    }

    #[test]
    fn sgd_examples() {
        let p = vec![f32t(&[2], &[1.0, 2.0])];
        let out = sgd_step(&p, &[f32t(&[2], &[0.0, 0.0])], 0.1).unwrap();
        assert_eq!(out[0].as_f32().unwrap(), &[1.0, 2.0]);
        let out = sgd_step(&[f32t(&[1], &[1.0])], &[f32t(&[1], &[2.0])], 0.5).unwrap();
        assert_eq!(out[0].as_f32().unwrap(), &[0.0]);
        assert!(sgd_step(&p, &[f32t(&[3], &[0.0; 3])], 0.1).is_err());
    }

    #[test]
    fn sgd_converges_on_quadratic() {
        // loss = 0.5 * (p - 3)^2; closed form p_k = 3 + (p_0 - 3)(1 - lr)^k
        let lr = 0.6;
        let mut p = vec![Tensor::from_f64(&[1], vec![-5.0]).unwrap()];
        for _ in 0..20 {
            let g = Tensor::from_f64(&[1], vec![p[0].as_f64().unwrap()[0] - 3.0]).unwrap();
            p = sgd_step(&p, &[g], lr).unwrap();
        }
        let closed = 3.0 + (-8.0) * (1.0f64 - lr).powi(20);
        let got = p[0].as_f64().unwrap()[0];
        assert!((got - closed).abs() < 1e-12);
        assert!((got - 3.0).abs() < 1e-6);
    }
}
