//! Reference compute kernels.
//!
//! Every reduction accumulates from zero with the innermost index last, so
//! two call sites that feed the same inputs get bit-identical outputs. Loop
//! nests are ordered for cache locality only where that keeps the per-element
//! summation sequence unchanged.

use crate::prng::Prng;
use crate::tensor::{expect_view, numel, Real, Result, Tensor, TensorError};

/// Broadcasts two leading-axis shapes (size-1 axes stretch, missing axes prepend).
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Flat offsets (in units of whole matrices) of `src` slices for every index of
/// the broadcast shape `out`.
fn broadcast_offsets(src: &[usize], out: &[usize]) -> Vec<usize> {
    let pad = out.len() - src.len();
    let mut strides = vec![0usize; out.len()];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        strides[i + pad] = if src[i] == 1 { 0 } else { acc };
        acc *= src[i];
    }
    let total = numel(out);
    let mut offsets = Vec::with_capacity(total);
    let mut idx = vec![0usize; out.len()];
    for _ in 0..total {
        offsets.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for axis in (0..out.len()).rev() {
            idx[axis] += 1;
            if idx[axis] < out[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
    offsets
}

/// Shape of `matmul_broadcast(a, b)`, or a mismatch error naming both shapes.
pub fn matmul_output_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let mismatch = || TensorError::ShapeMismatch(a.to_vec(), b.to_vec());
    if a.len() < 2 || b.len() < 2 {
        return Err(mismatch());
    }
    let (ra, ka) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, cb) = (b[b.len() - 2], b[b.len() - 1]);
    if ka != kb {
        return Err(mismatch());
    }
    let mut out = broadcast_shapes(&a[..a.len() - 2], &b[..b.len() - 2]).ok_or_else(mismatch)?;
    out.push(ra);
    out.push(cb);
    Ok(out)
}

fn matmul_into<T: Real>(a: &[T], b: &[T], out: &mut [T], rows: usize, inner: usize, cols: usize) {
    // i-k-j order: each out[i][j] still receives its products in ascending k.
    for i in 0..rows {
        let orow = &mut out[i * cols..(i + 1) * cols];
        for k in 0..inner {
            let av = a[i * inner + k];
            let brow = &b[k * cols..(k + 1) * cols];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn matmul_broadcast_t<T: Real>(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let out_shape = matmul_output_shape(a.shape(), b.shape())?;
    let (av, bv) = (expect_view::<T>(a)?, expect_view::<T>(b)?);
    let (sa, sb) = (a.shape(), b.shape());
    let rows = sa[sa.len() - 2];
    let inner = sa[sa.len() - 1];
    let cols = sb[sb.len() - 1];
    let lead = &out_shape[..out_shape.len() - 2];
    let a_off = broadcast_offsets(&sa[..sa.len() - 2], lead);
    let b_off = broadcast_offsets(&sb[..sb.len() - 2], lead);
    let (amat, bmat, omat) = (rows * inner, inner * cols, rows * cols);
    let mut out = vec![T::zero(); numel(&out_shape)];
    for (slot, (&ao, &bo)) in a_off.iter().zip(&b_off).enumerate() {
        matmul_into(
            &av[ao * amat..(ao + 1) * amat],
            &bv[bo * bmat..(bo + 1) * bmat],
            &mut out[slot * omat..(slot + 1) * omat],
            rows,
            inner,
            cols,
        );
    }
    Ok(T::wrap(out_shape, out))
}

/// Batched matrix product over the last two axes with broadcasting leading axes.
pub fn matmul_broadcast(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dtype() != b.dtype() {
        return Err(TensorError::DTypeMismatch {
            expected: a.dtype(),
            actual: b.dtype(),
        });
    }
    match a.dtype() {
        crate::DType::F32 => matmul_broadcast_t::<f32>(a, b),
        crate::DType::F64 => matmul_broadcast_t::<f64>(a, b),
        dtype => Err(TensorError::UnsupportedDType {
            op: "matmul_broadcast",
            dtype,
        }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        let oh = (self.height + 2 * self.pad - self.kernel) / self.stride + 1;
        let ow = (self.width + 2 * self.pad - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    /// Input row/col for an output position and kernel tap, `None` inside padding.
    #[cfg(test)]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        (o * self.stride + k).checked_sub(self.pad).filter(|&i| i < extent)
    }

    /// Output positions `lo..hi` whose tap `k` lands inside the input.
    #[inline]
    fn valid(&self, k: usize, extent: usize, out: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(k).div_ceil(self.stride);
        if extent + self.pad <= k {
            return (0, 0);
        }
        let hi = ((extent - 1 + self.pad - k) / self.stride + 1).min(out);
        (lo.min(hi), hi)
    }
}

pub(crate) fn conv2d_forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], bias: &[T]) -> Vec<T> {
    let (oh, ow) = g.out_hw();
    let (hw, ohw, kk) = (g.height * g.width, oh * ow, g.kernel * g.kernel);
    let mut out = vec![T::zero(); g.batch * g.out_ch * ohw];
    for n in 0..g.batch {
        for o in 0..g.out_ch {
            let plane = &mut out[(n * g.out_ch + o) * ohw..(n * g.out_ch + o + 1) * ohw];
            for c in 0..g.in_ch {
                let xin = &x[(n * g.in_ch + c) * hw..(n * g.in_ch + c + 1) * hw];
                for kh in 0..g.kernel {
                    for kw in 0..g.kernel {
                        let wv = w[(o * g.in_ch + c) * kk + kh * g.kernel + kw];
                        let (y0, y1) = g.valid(kh, g.height, oh);
                        let (x0, x1) = g.valid(kw, g.width, ow);
                        for oy in y0..y1 {
                            let iy = oy * g.stride + kh - g.pad;
                            let row = &mut plane[oy * ow..(oy + 1) * ow];
                            let xrow = &xin[iy * g.width..(iy + 1) * g.width];
                            for ox in x0..x1 {
                                row[ox] += wv * xrow[ox * g.stride + kw - g.pad];
                            }
                        }
                    }
                }
            }
            let b = bias[o];
            for v in plane.iter_mut() {
                *v += b;
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Vec<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub(crate) fn conv2d_backward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], gout: &[T]) -> ConvGrads<T> {
    let (oh, ow) = g.out_hw();
    let (hw, ohw, kk) = (g.height * g.width, oh * ow, g.kernel * g.kernel);
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); w.len()];
    let mut gb = vec![T::zero(); g.out_ch];
    for n in 0..g.batch {
        for o in 0..g.out_ch {
            let gplane = &gout[(n * g.out_ch + o) * ohw..(n * g.out_ch + o + 1) * ohw];
            for &gv in gplane {
                gb[o] += gv;
            }
            for c in 0..g.in_ch {
                let base = (n * g.in_ch + c) * hw;
                for kh in 0..g.kernel {
                    for kw in 0..g.kernel {
                        let widx = (o * g.in_ch + c) * kk + kh * g.kernel + kw;
                        let wv = w[widx];
                        let mut acc = T::zero();
                        let (y0, y1) = g.valid(kh, g.height, oh);
                        let (x0, x1) = g.valid(kw, g.width, ow);
                        for oy in y0..y1 {
                            let rb = base + (oy * g.stride + kh - g.pad) * g.width;
                            for ox in x0..x1 {
                                let gv = gplane[oy * ow + ox];
                                let xi = rb + ox * g.stride + kw - g.pad;
                                acc += gv * x[xi];
                                gx[xi] += gv * wv;
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    }
}

pub(crate) fn linear_forward<T: Real>(x: &[T], w: &[T], b: &[T], rows: usize, inp: usize, outp: usize) -> Vec<T> {
    let mut y = vec![T::zero(); rows * outp];
    matmul_into(x, w, &mut y, rows, inp, outp);
    for r in 0..rows {
        for (v, &bv) in y[r * outp..(r + 1) * outp].iter_mut().zip(b) {
            *v += bv;
        }
    }
    y
}

pub(crate) struct LinearGrads<T> {
    pub input: Vec<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub(crate) fn linear_backward<T: Real>(
    x: &[T],
    w: &[T],
    gout: &[T],
    rows: usize,
    inp: usize,
    outp: usize,
) -> LinearGrads<T> {
    let mut gx = vec![T::zero(); rows * inp];
    for r in 0..rows {
        for i in 0..inp {
            let mut acc = T::zero();
            for o in 0..outp {
                acc += gout[r * outp + o] * w[i * outp + o];
            }
            gx[r * inp + i] = acc;
        }
    }
    let mut gw = vec![T::zero(); inp * outp];
    let mut gb = vec![T::zero(); outp];
    for r in 0..rows {
        let grow = &gout[r * outp..(r + 1) * outp];
        for i in 0..inp {
            let xv = x[r * inp + i];
            for (acc, &gv) in gw[i * outp..(i + 1) * outp].iter_mut().zip(grow) {
                *acc += xv * gv;
            }
        }
        for (acc, &gv) in gb.iter_mut().zip(grow) {
            *acc += gv;
        }
    }
    LinearGrads {
        input: gx,
        weight: gw,
        bias: gb,
    }
}

/// Draws the keep-mask for inverted dropout: each element is dropped with
/// probability `rate`.
pub fn dropout_mask(len: usize, rate: f64, prng: &mut Prng) -> Vec<bool> {
    (0..len).map(|_| prng.next_f64() >= rate).collect()
}

/// Kept elements are divided by `1 - rate` (rounded to the compute dtype).
pub(crate) fn apply_dropout_mask<T: Real>(x: &[T], mask: &[bool], rate: f64) -> Vec<T> {
    let keep = T::of(1.0 - rate);
    x.iter()
        .zip(mask)
        .map(|(&v, &m)| if m { v / keep } else { T::zero() })
        .collect()
}

pub(crate) fn global_avg_pool<T: Real>(x: &[T], planes: usize, hw: usize) -> Vec<T> {
    let denom = T::of(hw as f64);
    (0..planes)
        .map(|p| {
            let mut acc = T::zero();
            for &v in &x[p * hw..(p + 1) * hw] {
                acc += v;
            }
            acc / denom
        })
        .collect()
}

pub(crate) struct XentOut<T> {
    pub loss: T,
    pub probs: Vec<T>,
}

pub(crate) fn softmax_xent<T: Real>(logits: &[T], labels: &[usize], classes: usize) -> XentOut<T> {
    let rows = labels.len();
    let mut probs = vec![T::zero(); logits.len()];
    let mut total = T::zero();
    for r in 0..rows {
        let z = &logits[r * classes..(r + 1) * classes];
        let m = z.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for &v in z {
            s += (v - m).exp();
        }
        for (p, &v) in probs[r * classes..(r + 1) * classes].iter_mut().zip(z) {
            *p = (v - m).exp() / s;
        }
        total += m + s.ln() - z[labels[r]];
    }
    XentOut {
        loss: total / T::of(rows as f64),
        probs,
    }
}

pub(crate) fn softmax_xent_backward<T: Real>(probs: &[T], labels: &[usize], classes: usize, gscale: T) -> Vec<T> {
    let rows = T::of(labels.len() as f64);
    let mut g = probs.to_vec();
    for (r, &y) in labels.iter().enumerate() {
        g[r * classes + y] = g[r * classes + y] - T::one();
    }
    g.iter().map(|&v| gscale * v / rows).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_valid_ranges_match_tap_lookup() {
        for stride in 1..=3 {
            for pad in 0..=2 {
                for kernel in 1..=3 {
                    for extent in kernel.max(1)..=7 {
                        let g = ConvGeom {
                            batch: 1,
                            in_ch: 1,
                            out_ch: 1,
                            height: extent,
                            width: extent,
                            kernel,
                            stride,
                            pad,
                        };
                        let (out, _) = g.out_hw();
                        for k in 0..kernel {
                            let (lo, hi) = g.valid(k, extent, out);
                            for o in 0..out {
                                assert_eq!(
                                    g.src(o, k, extent).is_some(),
                                    (lo..hi).contains(&o),
                                    "{g:?} k={k} o={o}"
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shapes(&[2, 1], &[1, 5]), Some(vec![2, 5]));
        assert_eq!(broadcast_shapes(&[3], &[2, 1]), Some(vec![2, 3]));
        assert_eq!(broadcast_shapes(&[], &[4]), Some(vec![4]));
        assert_eq!(broadcast_shapes(&[2], &[3]), None);
    }

    #[test]
    fn identity_matmul() {
        let eye = Tensor::from_f32(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let x = Tensor::from_f32(&[3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert!(matmul_broadcast(&eye, &x).unwrap().bit_eq(&x));
    }

    #[test]
    fn broadcast_output_shape() {
        let a = Tensor::zeros(crate::DType::F32, &[2, 1, 3, 4]);
        let b = Tensor::zeros(crate::DType::F32, &[1, 5, 4, 2]);
        assert_eq!(matmul_broadcast(&a, &b).unwrap().shape(), &[2, 5, 3, 2]);
    }

    #[test]
    fn mismatch_names_both_shapes() {
        let a = Tensor::zeros(crate::DType::F32, &[2, 3]);
        let b = Tensor::zeros(crate::DType::F32, &[4, 2]);
        let msg = matmul_broadcast(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
        let c = Tensor::zeros(crate::DType::F32, &[2, 3, 4]);
        let d = Tensor::zeros(crate::DType::F32, &[3, 4, 2]);
        assert!(matmul_broadcast(&c, &d).is_err());
    }

    #[test]
    fn int_matmul_unsupported() {
        let a = Tensor::zeros(crate::DType::I32, &[2, 2]);
        assert!(matches!(
            matmul_broadcast(&a, &a),
            Err(TensorError::UnsupportedDType { .. })
        ));
    }
}
