//! Dual-implementation op verification.
//!
//! Each layer kernel has a second, deliberately naive implementation in
//! [`naive`]. [`verify_pair`] runs both on the same inputs and reports the
//! elementwise max and mean absolute difference; [`run_suite`] sweeps random
//! cases for every op.

use std::fmt;

use thiserror::Error;

use crate::layers::{layer_forward, ForwardCtx, LayerKind, LayerSpec};
use crate::ops;
use crate::prng::{Prng, StreamKey};
use crate::tensor::{numel, Tensor};

/// Upper bounds for both max and mean absolute differences.
pub const MAX_ABS_BOUND: f64 = 1e-5;
pub const MEAN_ABS_BOUND: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VerifyError {
    #[error("{op}: output shapes disagree: {a:?} vs {b:?}")]
    ShapeDisagreement { op: String, a: Vec<usize>, b: Vec<usize> },
    #[error("{op}: implementation failed: {message}")]
    Failed { op: String, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffReport {
    pub op_name: String,
    pub max_abs_diff: f64,
    pub mean_abs_diff: f64,
    pub element_count: usize,
}

impl DiffReport {
    pub fn passes(&self) -> bool {
        self.max_abs_diff < MAX_ABS_BOUND && self.mean_abs_diff < MEAN_ABS_BOUND
    }

    /// Folds another report for the same op into this one, weighting the
    /// mean by element count.
    pub fn merge(&mut self, other: &DiffReport) {
        let total = self.element_count + other.element_count;
        if total > 0 {
            self.mean_abs_diff = (self.mean_abs_diff * self.element_count as f64
                + other.mean_abs_diff * other.element_count as f64)
                / total as f64;
        }
        self.max_abs_diff = self.max_abs_diff.max(other.max_abs_diff);
        self.element_count = total;
    }
}

impl fmt::Display for DiffReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "op={} max={:.3e} mean={:.3e} status={}",
            self.op_name,
            self.max_abs_diff,
            self.mean_abs_diff,
            if self.passes() { "pass" } else { "fail" }
        )
    }
}

pub fn verify_pair<A, B, E1, E2>(
    op_name: &str,
    inputs: &[Tensor],
    impl_a: A,
    impl_b: B,
) -> Result<DiffReport, VerifyError>
where
    A: Fn(&[Tensor]) -> Result<Tensor, E1>,
    B: Fn(&[Tensor]) -> Result<Tensor, E2>,
    E1: fmt::Display,
    E2: fmt::Display,
{
    let failed = |e: &dyn fmt::Display| VerifyError::Failed {
        op: op_name.to_string(),
        message: e.to_string(),
    };
    let a = impl_a(inputs).map_err(|e| failed(&e))?;
    let b = impl_b(inputs).map_err(|e| failed(&e))?;
    if a.shape() != b.shape() {
        return Err(VerifyError::ShapeDisagreement {
            op: op_name.to_string(),
            a: a.shape().to_vec(),
            b: b.shape().to_vec(),
        });
    }
    let (av, bv) = (a.to_f64_vec(), b.to_f64_vec());
    let diffs: Vec<f64> = av.iter().zip(&bv).map(|(x, y)| (x - y).abs()).collect();
    let n = diffs.len();
    let max = diffs.iter().copied().fold(
        0.0,
        |m: f64, d| if d.is_nan() || m.is_nan() { f64::NAN } else { m.max(d) },
    );
    let mean = if n == 0 {
        0.0
    } else {
        diffs.iter().sum::<f64>() / n as f64
    };
    Ok(DiffReport {
        op_name: op_name.to_string(),
        max_abs_diff: max,
        mean_abs_diff: mean,
        element_count: n,
    })
}

/// Straightforward nested-loop implementations used as verification oracles.
pub mod naive {
    use crate::tensor::{numel, DType, Tensor, TensorError};

    fn vals(t: &Tensor) -> Vec<f64> {
        t.to_f64_vec()
    }

    fn out(dtype: DType, shape: &[usize], v: Vec<f64>) -> Result<Tensor, TensorError> {
        match dtype {
            DType::F32 => Tensor::from_f32(shape, v.into_iter().map(|x| x as f32).collect()),
            _ => Tensor::from_f64(shape, v),
        }
    }

    /// Matmul by decoding every output multi-index. Accumulates in the input
    /// dtype so it is bit-comparable with the reference kernel.
    pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        let (sa, sb) = (a.shape(), b.shape());
        let shape = crate::ops::matmul_output_shape(sa, sb)?;
        let nd = shape.len();
        let inner = sa[sa.len() - 1];
        let index_of = |src: &[usize], idx: &[usize], r: usize, c: usize| -> usize {
            // src has its own (possibly shorter) leading axes; align right
            let pad = nd - src.len();
            let mut flat = 0;
            for (axis, &extent) in src.iter().enumerate() {
                let i = if axis + 2 >= src.len() {
                    if axis + 2 == src.len() {
                        r
                    } else {
                        c
                    }
                } else if extent == 1 {
                    0
                } else {
                    idx[axis + pad]
                };
                flat = flat * extent + i;
            }
            flat
        };
        let total = numel(&shape);
        let mut idx = vec![0usize; nd];
        macro_rules! run {
            ($av:expr, $bv:expr, $zero:expr, $wrap:path) => {{
                let (av, bv) = ($av, $bv);
                let mut res = Vec::with_capacity(total);
                for _ in 0..total {
                    let (i, j) = (idx[nd - 2], idx[nd - 1]);
                    let mut acc = $zero;
                    for k in 0..inner {
                        acc += av[index_of(sa, &idx, i, k)] * bv[index_of(sb, &idx, k, j)];
                    }
                    res.push(acc);
                    for axis in (0..nd).rev() {
                        idx[axis] += 1;
                        if idx[axis] < shape[axis] {
                            break;
                        }
                        idx[axis] = 0;
                    }
                }
                $wrap(&shape, res)
            }};
        }
        match (a.as_f32(), b.as_f32(), a.as_f64(), b.as_f64()) {
            (Some(x), Some(y), _, _) => run!(x, y, 0.0f32, Tensor::from_f32),
            (_, _, Some(x), Some(y)) => run!(x, y, 0.0f64, Tensor::from_f64),
            _ => Err(TensorError::UnsupportedDType {
                op: "naive::matmul",
                dtype: a.dtype(),
            }),
        }
    }

    /// Seven nested loops, computed in f64.
    pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor, TensorError> {
        let (xs, ws) = (x.shape(), w.shape());
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let (xv, wv, bv) = (vals(x), vals(w), vals(b));
        let mut res = vec![0.0; n * o * oh * ow];
        for ni in 0..n {
            for oi in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for kh in 0..k {
                                for kw in 0..k {
                                    let iy = (oy * stride + kh) as isize - pad as isize;
                                    let ix = (ox * stride + kw) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    let xi = ((ni * c + ci) * h + iy as usize) * wd + ix as usize;
                                    let wi = ((oi * c + ci) * k + kh) * k + kw;
                                    acc += xv[xi] * wv[wi];
                                }
                            }
                        }
                        res[((ni * o + oi) * oh + oy) * ow + ox] = acc + bv[oi];
                    }
                }
            }
        }
        out(x.dtype(), &[n, o, oh, ow], res)
    }

    pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        let (rows, inp, outp) = (x.shape()[0], w.shape()[0], w.shape()[1]);
        let (xv, wv, bv) = (vals(x), vals(w), vals(b));
        let mut res = vec![0.0; rows * outp];
        for r in 0..rows {
            for j in 0..outp {
                let mut acc = bv[j];
                for i in 0..inp {
                    acc += xv[r * inp + i] * wv[i * outp + j];
                }
                res[r * outp + j] = acc;
            }
        }
        out(x.dtype(), &[rows, outp], res)
    }

    pub fn relu(x: &Tensor) -> Result<Tensor, TensorError> {
        out(x.dtype(), x.shape(), vals(x).into_iter().map(|v| v.max(0.0)).collect())
    }

    /// Inverted dropout with an explicit mask, scaling kept values by `1/(1-r)`.
    pub fn dropout_with_mask(x: &Tensor, mask: &[bool], rate: f64) -> Result<Tensor, TensorError> {
        let scale = 1.0 / (1.0 - rate);
        let v = vals(x)
            .into_iter()
            .zip(mask)
            .map(|(v, &m)| if m { v * scale } else { 0.0 })
            .collect();
        out(x.dtype(), x.shape(), v)
    }

    /// The faulty `1/r` scaling some frameworks shipped. Kept as a negative fixture.
    pub fn dropout_inverse_rate(x: &Tensor, mask: &[bool], rate: f64) -> Result<Tensor, TensorError> {
        let v = vals(x)
            .into_iter()
            .zip(mask)
            .map(|(v, &m)| if m { v / rate } else { 0.0 })
            .collect();
        out(x.dtype(), x.shape(), v)
    }

    pub fn residual_add(x: &Tensor, skip: &Tensor) -> Result<Tensor, TensorError> {
        let v = vals(x).iter().zip(vals(skip)).map(|(a, b)| a + b).collect();
        out(x.dtype(), x.shape(), v)
    }

    pub fn global_avg_pool(x: &Tensor) -> Result<Tensor, TensorError> {
        let s = x.shape();
        let hw = s[2] * s[3];
        let xv = vals(x);
        let v = xv.chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
        out(x.dtype(), &s[..2], v)
    }

    /// Mean of `-ln(softmax(z)[y])` without the max shift.
    pub fn softmax_xent(logits: &Tensor, labels: &Tensor) -> Result<Tensor, TensorError> {
        let classes = logits.shape()[1];
        let z = vals(logits);
        let y = labels.as_i64().ok_or(TensorError::DTypeMismatch {
            expected: DType::I64,
            actual: labels.dtype(),
        })?;
        let mut total = 0.0;
        for (r, &label) in y.iter().enumerate() {
            let row = &z[r * classes..(r + 1) * classes];
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            total += -(row[label as usize].exp() / denom).ln();
        }
        out(logits.dtype(), &[], vec![total / y.len() as f64])
    }
}

fn random_f32(prng: &mut Prng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_f32(
        shape,
        (0..numel(shape)).map(|_| prng.uniform(-scale, scale) as f32).collect(),
    )
    .expect("length matches shape")
}

fn dim(prng: &mut Prng, lo: usize, hi: usize) -> usize {
    lo + prng.below((hi - lo + 1) as u64) as usize
}

/// One verification case: op name, inputs, and the two implementations.
type Case = (
    Vec<Tensor>,
    Box<dyn Fn(&[Tensor]) -> Result<Tensor, String>>,
    Box<dyn Fn(&[Tensor]) -> Result<Tensor, String>>,
);

fn layer_impl(kind: LayerKind) -> Box<dyn Fn(&[Tensor]) -> Result<Tensor, String>> {
    Box::new(move |inp: &[Tensor]| {
        let params = inp[1..].to_vec();
        let spec = LayerSpec::with_params(kind.clone(), params).map_err(|e| e.to_string())?;
        layer_forward(&spec, &inp[0], &ForwardCtx::infer())
            .map(|(y, _)| y)
            .map_err(|e| e.to_string())
    })
}

fn make_case(op: &str, prng: &mut Prng) -> Case {
    type Impl = Box<dyn Fn(&[Tensor]) -> Result<Tensor, String>>;
    let es = |e: crate::tensor::TensorError| e.to_string();
    match op {
        "matmul_broadcast" => {
            let nd = dim(prng, 2, 5);
            let mut sa = Vec::new();
            let mut sb = Vec::new();
            for _ in 0..nd - 2 {
                let d = dim(prng, 1, 3);
                sa.push(if prng.below(3) == 0 { 1 } else { d });
                sb.push(if prng.below(3) == 0 { 1 } else { d });
            }
            if prng.below(2) == 0 && !sa.is_empty() {
                sa.remove(0);
            }
            let (r, k, c) = (dim(prng, 1, 5), dim(prng, 1, 6), dim(prng, 1, 5));
            sa.extend([r, k]);
            sb.extend([k, c]);
            let a: Impl = Box::new(move |i: &[Tensor]| ops::matmul_broadcast(&i[0], &i[1]).map_err(es));
            let b: Impl = Box::new(move |i: &[Tensor]| naive::matmul(&i[0], &i[1]).map_err(es));
            (vec![random_f32(prng, &sa, 1.0), random_f32(prng, &sb, 1.0)], a, b)
        }
        "conv2d" => {
            let (n, ci, co) = (dim(prng, 1, 2), dim(prng, 1, 3), dim(prng, 1, 3));
            let k = dim(prng, 1, 3);
            let stride = dim(prng, 1, 2);
            let pad = dim(prng, 0, 1);
            let h = dim(prng, k.max(3), 7);
            let w = dim(prng, k.max(3), 7);
            let kind = LayerKind::Conv2d {
                in_channels: ci,
                out_channels: co,
                kernel: k,
                stride,
                padding: pad,
            };
            let inputs = vec![
                random_f32(prng, &[n, ci, h, w], 1.0),
                random_f32(prng, &[co, ci, k, k], 1.0),
                random_f32(prng, &[co], 1.0),
            ];
            let b: Impl = Box::new(move |i: &[Tensor]| naive::conv2d(&i[0], &i[1], &i[2], stride, pad).map_err(es));
            (inputs, layer_impl(kind), b)
        }
        "linear" => {
            let (n, fi, fo) = (dim(prng, 1, 6), dim(prng, 1, 12), dim(prng, 1, 8));
            let inputs = vec![
                random_f32(prng, &[n, fi], 1.0),
                random_f32(prng, &[fi, fo], 1.0),
                random_f32(prng, &[fo], 1.0),
            ];
            let kind = LayerKind::Linear {
                in_features: fi,
                out_features: fo,
            };
            let b: Impl = Box::new(move |i: &[Tensor]| naive::linear(&i[0], &i[1], &i[2]).map_err(es));
            (inputs, layer_impl(kind), b)
        }
        "relu" => {
            let n = dim(prng, 1, 64);
            let b: Impl = Box::new(move |i: &[Tensor]| naive::relu(&i[0]).map_err(es));
            (vec![random_f32(prng, &[n], 2.0)], layer_impl(LayerKind::Relu), b)
        }
        "dropout" | "dropout_inverse_rate_fixture" => {
            let n = dim(prng, 8, 64);
            let rate = if op == "dropout" { prng.uniform(0.05, 0.9) } else { 0.25 };
            let mask = ops::dropout_mask(n, rate, &mut Prng::new(prng.next_u64()));
            let m2 = mask.clone();
            let a: Impl = Box::new(move |i: &[Tensor]| {
                let x = i[0].as_f32().ok_or("f32 input")?;
                Tensor::from_f32(i[0].shape(), ops::apply_dropout_mask(x, &mask, rate)).map_err(es)
            });
            let b: Impl = if op == "dropout" {
                Box::new(move |i: &[Tensor]| naive::dropout_with_mask(&i[0], &m2, rate).map_err(es))
            } else {
                Box::new(move |i: &[Tensor]| naive::dropout_inverse_rate(&i[0], &m2, rate).map_err(es))
            };
            (vec![random_f32(prng, &[n], 1.0)], a, b)
        }
        "residual_add" => {
            let s = [dim(prng, 1, 3), dim(prng, 1, 4), dim(prng, 1, 5), dim(prng, 1, 5)];
            let a: Impl = Box::new(|i: &[Tensor]| {
                let spec = LayerSpec::new(LayerKind::ResidualAdd { skip: 0 }).map_err(|e| e.to_string())?;
                layer_forward(&spec, &i[0], &ForwardCtx::infer().with_skip(&i[1]))
                    .map(|(y, _)| y)
                    .map_err(|e| e.to_string())
            });
            let b: Impl = Box::new(move |i: &[Tensor]| naive::residual_add(&i[0], &i[1]).map_err(es));
            (vec![random_f32(prng, &s, 1.0), random_f32(prng, &s, 1.0)], a, b)
        }
        "global_avg_pool" => {
            let s = [dim(prng, 1, 3), dim(prng, 1, 4), dim(prng, 1, 6), dim(prng, 1, 6)];
            let b: Impl = Box::new(move |i: &[Tensor]| naive::global_avg_pool(&i[0]).map_err(es));
            (vec![random_f32(prng, &s, 1.0)], layer_impl(LayerKind::GlobalAvgPool), b)
        }
        "softmax_xent" => {
            let (n, c) = (dim(prng, 1, 8), dim(prng, 2, 10));
            let labels = Tensor::from_i64(&[n], (0..n).map(|_| prng.below(c as u64) as i64).collect()).expect("len");
            let a: Impl = Box::new(|i: &[Tensor]| {
                let spec = LayerSpec::new(LayerKind::SoftmaxXent).map_err(|e| e.to_string())?;
                layer_forward(&spec, &i[0], &ForwardCtx::infer().with_labels(&i[1]))
                    .map(|(y, _)| y)
                    .map_err(|e| e.to_string())
            });
            let b: Impl = Box::new(move |i: &[Tensor]| naive::softmax_xent(&i[0], &i[1]).map_err(es));
            (vec![random_f32(prng, &[n, c], 3.0), labels], a, b)
        }
        other => panic!("unknown op {other}"),
    }
}

/// Ops covered by the suite, in report order.
pub const SUITE_OPS: [&str; 8] = [
    "matmul_broadcast",
    "conv2d",
    "linear",
    "relu",
    "dropout",
    "residual_add",
    "global_avg_pool",
    "softmax_xent",
];

/// Negative control: the `1/r` dropout scaling must be flagged.
pub const WRONG_DROPOUT_FIXTURE: &str = "dropout_inverse_rate_fixture";

/// Runs `cases` random F32 instances per op and returns one merged report per
/// op, followed by the negative-control fixture's report.
pub fn run_suite(cases: usize, seed: u64) -> Result<Vec<DiffReport>, VerifyError> {
    let mut reports = Vec::new();
    for (oi, op) in SUITE_OPS.iter().chain([WRONG_DROPOUT_FIXTURE].iter()).enumerate() {
        let mut prng = Prng::for_stream(StreamKey::new(seed, 0, 0, oi as u64));
        let mut merged: Option<DiffReport> = None;
        for _ in 0..cases {
            let (inputs, a, b) = make_case(op, &mut prng);
            let r = verify_pair(op, &inputs, &*a, &*b)?;
            match merged.as_mut() {
                Some(m) => m.merge(&r),
                None => merged = Some(r),
            }
        }
        if let Some(m) = merged {
            reports.push(m);
        }
    }
    Ok(reports)
}

/// True when every real op passes and the negative control fails.
pub fn suite_ok(reports: &[DiffReport]) -> bool {
    reports.iter().all(|r| {
        if r.op_name == WRONG_DROPOUT_FIXTURE {
            !r.passes()
        } else {
            r.passes()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_impls_report_zero() {
        let x = Tensor::from_f32(&[3], vec![1.0, -2.0, 3.0]).unwrap();
        let id = |i: &[Tensor]| -> Result<Tensor, String> { Ok(i[0].clone()) };
        let r = verify_pair("id", &[x], id, id).unwrap();
        assert_eq!((r.max_abs_diff, r.mean_abs_diff, r.element_count), (0.0, 0.0, 3));
        assert!(r.passes());
    }

    #[test]
    fn shape_disagreement_is_distinct() {
        let x = Tensor::from_f32(&[4], vec![0.0; 4]).unwrap();
        let a = |i: &[Tensor]| -> Result<Tensor, String> { Ok(i[0].clone()) };
        let b = |i: &[Tensor]| -> Result<Tensor, String> { i[0].reshape(&[2, 2]).map_err(|e| e.to_string()) };
        assert!(matches!(
            verify_pair("reshape", &[x], a, b),
            Err(VerifyError::ShapeDisagreement { .. })
        ));
    }

    #[test]
    fn wrong_dropout_scale_is_flagged() {
        // r = 0.25: correct scale 4/3, faulty scale 4; a kept 1.0 differs by 8/3
        let x = Tensor::from_f32(&[2], vec![1.0, 1.0]).unwrap();
        let mask = [true, false];
        let r = verify_pair(
            "dropout",
            &[x],
            |i: &[Tensor]| naive::dropout_with_mask(&i[0], &mask, 0.25),
            |i: &[Tensor]| naive::dropout_inverse_rate(&i[0], &mask, 0.25),
        )
        .unwrap();
        assert!((r.max_abs_diff - 8.0 / 3.0).abs() < 1e-6);
        assert!(!r.passes());
    }

    #[test]
    fn report_line_format() {
        let r = DiffReport {
            op_name: "relu".into(),
            max_abs_diff: 0.0,
            mean_abs_diff: 0.0,
            element_count: 1,
        };
        assert_eq!(r.to_string(), "op=relu max=0.000e0 mean=0.000e0 status=pass");
    }

    #[test]
    fn small_suite_passes() {
        let reports = run_suite(5, 3).unwrap();
        assert_eq!(reports.len(), SUITE_OPS.len() + 1);
        assert!(suite_ok(&reports), "{reports:#?}");
    }
}
