//! Dense row-major tensors.
//!
//! A [`Tensor`] owns a shape and a typed storage vector. Tensors are
//! immutable once built; every op returns a fresh tensor, so they can be
//! moved between threads freely.

use std::fmt;

use num_traits::Float;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("data length {len} does not match shape {shape:?} (expected {expected})")]
    LengthMismatch {
        shape: Vec<usize>,
        len: usize,
        expected: usize,
    },
    #[error("dtype mismatch: expected {expected}, got {actual}")]
    DTypeMismatch { expected: DType, actual: DType },
    #[error("operation `{op}` does not support dtype {dtype}")]
    UnsupportedDType { op: &'static str, dtype: DType },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
    I32,
    I64,
    U8,
}

impl DType {
    pub const ALL: [DType; 5] = [DType::F32, DType::F64, DType::I32, DType::I64, DType::U8];

    pub fn byte_width(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::F64 | DType::I64 => 8,
            DType::U8 => 1,
        }
    }

    pub fn is_float(self) -> bool {
        matches!(self, DType::F32 | DType::F64)
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
            DType::I32 => "i32",
            DType::I64 => "i64",
            DType::U8 => "u8",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Storage {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I32(Vec<i32>),
    I64(Vec<i64>),
    U8(Vec<u8>),
}

impl Storage {
    pub fn dtype(&self) -> DType {
        match self {
            Storage::F32(_) => DType::F32,
            Storage::F64(_) => DType::F64,
            Storage::I32(_) => DType::I32,
            Storage::I64(_) => DType::I64,
            Storage::U8(_) => DType::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Storage::F32(v) => v.len(),
            Storage::F64(v) => v.len(),
            Storage::I32(v) => v.len(),
            Storage::I64(v) => v.len(),
            Storage::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn zeros(dtype: DType, len: usize) -> Storage {
        match dtype {
            DType::F32 => Storage::F32(vec![0.0; len]),
            DType::F64 => Storage::F64(vec![0.0; len]),
            DType::I32 => Storage::I32(vec![0; len]),
            DType::I64 => Storage::I64(vec![0; len]),
            DType::U8 => Storage::U8(vec![0; len]),
        }
    }
}

/// Number of elements for a shape; the empty shape is a scalar.
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    storage: Storage,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor<{}>{:?}", self.dtype(), self.shape)?;
        if self.len() <= 16 {
            match &self.storage {
                Storage::F32(v) => write!(f, " {v:?}"),
                Storage::F64(v) => write!(f, " {v:?}"),
                Storage::I32(v) => write!(f, " {v:?}"),
                Storage::I64(v) => write!(f, " {v:?}"),
                Storage::U8(v) => write!(f, " {v:?}"),
            }
        } else {
            Ok(())
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, storage: Storage) -> Result<Tensor> {
        let expected = numel(&shape);
        if storage.len() != expected {
            return Err(TensorError::LengthMismatch {
                shape,
                len: storage.len(),
                expected,
            });
        }
        Ok(Tensor { shape, storage })
    }

    pub fn zeros(dtype: DType, shape: &[usize]) -> Tensor {
        Tensor {
            storage: Storage::zeros(dtype, numel(shape)),
            shape: shape.to_vec(),
        }
    }

    pub fn from_f32(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), Storage::F32(data))
    }

    pub fn from_f64(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), Storage::F64(data))
    }

    pub fn from_i64(shape: &[usize], data: Vec<i64>) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), Storage::I64(data))
    }

    pub fn scalar_f32(v: f32) -> Tensor {
        Tensor {
            shape: Vec::new(),
            storage: Storage::F32(vec![v]),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn dtype(&self) -> DType {
        self.storage.dtype()
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn storage(&self) -> &Storage {
        &self.storage
    }

    pub fn into_storage(self) -> Storage {
        self.storage
    }

    pub fn size_bytes(&self) -> usize {
        self.len() * self.dtype().byte_width()
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.storage {
            Storage::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<&[f64]> {
        match &self.storage {
            Storage::F64(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_i64(&self) -> Option<&[i64]> {
        match &self.storage {
            Storage::I64(v) => Some(v),
            _ => None,
        }
    }

    /// Floating-point values widened to f64; integer dtypes are converted too.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.storage {
            Storage::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Storage::F64(v) => v.clone(),
            Storage::I32(v) => v.iter().map(|&x| x as f64).collect(),
            Storage::I64(v) => v.iter().map(|&x| x as f64).collect(),
            Storage::U8(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.len() {
            return Err(TensorError::ShapeMismatch(self.shape.clone(), shape.to_vec()));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            storage: self.storage.clone(),
        })
    }

    /// Converts between float dtypes. Used by the f64 gradient-check mode.
    pub fn cast(&self, dtype: DType) -> Result<Tensor> {
        let storage = match (&self.storage, dtype) {
            (s, d) if s.dtype() == d => s.clone(),
            (Storage::F32(v), DType::F64) => Storage::F64(v.iter().map(|&x| x as f64).collect()),
            (Storage::F64(v), DType::F32) => Storage::F32(v.iter().map(|&x| x as f32).collect()),
            _ => {
                return Err(TensorError::UnsupportedDType {
                    op: "cast",
                    dtype: self.dtype(),
                })
            }
        };
        Ok(Tensor {
            shape: self.shape.clone(),
            storage,
        })
    }

    /// Rows `[start, start + count)` along axis 0.
    pub fn slice_rows(&self, start: usize, count: usize) -> Result<Tensor> {
        let rows = *self
            .shape
            .first()
            .ok_or_else(|| TensorError::Invalid("cannot slice a scalar".into()))?;
        if start + count > rows {
            return Err(TensorError::Invalid(format!(
                "row range {start}..{} out of bounds for {rows} rows",
                start + count
            )));
        }
        let row = numel(&self.shape[1..]);
        let (a, b) = (start * row, (start + count) * row);
        let storage = match &self.storage {
            Storage::F32(v) => Storage::F32(v[a..b].to_vec()),
            Storage::F64(v) => Storage::F64(v[a..b].to_vec()),
            Storage::I32(v) => Storage::I32(v[a..b].to_vec()),
            Storage::I64(v) => Storage::I64(v[a..b].to_vec()),
            Storage::U8(v) => Storage::U8(v[a..b].to_vec()),
        };
        let mut shape = self.shape.clone();
        shape[0] = count;
        Ok(Tensor { shape, storage })
    }

    /// Concatenates along axis 0. All parts must share dtype and trailing shape.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
        if first.ndim() == 0 {
            return Err(TensorError::Invalid("cannot concat scalars".into()));
        }
        let mut shape = first.shape.clone();
        shape[0] = 0;
        let mut storage = Storage::zeros(first.dtype(), 0);
        for p in parts {
            if p.dtype() != first.dtype() || p.ndim() == 0 || p.shape[1..] != first.shape[1..] {
                return Err(TensorError::ShapeMismatch(first.shape.clone(), p.shape.clone()));
            }
            shape[0] += p.shape[0];
            match (&mut storage, &p.storage) {
                (Storage::F32(a), Storage::F32(b)) => a.extend_from_slice(b),
                (Storage::F64(a), Storage::F64(b)) => a.extend_from_slice(b),
                (Storage::I32(a), Storage::I32(b)) => a.extend_from_slice(b),
                (Storage::I64(a), Storage::I64(b)) => a.extend_from_slice(b),
                (Storage::U8(a), Storage::U8(b)) => a.extend_from_slice(b),
                _ => unreachable!("dtype checked above"),
            }
        }
        Tensor::new(shape, storage)
    }

    /// Bitwise equality: NaN payloads and signed zeros must match too.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        if self.shape != other.shape {
            return false;
        }
        match (&self.storage, &other.storage) {
            (Storage::F32(a), Storage::F32(b)) => a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
            (Storage::F64(a), Storage::F64(b)) => a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
            (a, b) => a == b,
        }
    }

    pub fn all_finite(&self) -> bool {
        match &self.storage {
            Storage::F32(v) => v.iter().all(|x| x.is_finite()),
            Storage::F64(v) => v.iter().all(|x| x.is_finite()),
            _ => true,
        }
    }

    /// Largest absolute elementwise difference; `None` when shapes or dtypes differ.
    pub fn max_abs_diff(&self, other: &Tensor) -> Option<f64> {
        if self.shape != other.shape || self.dtype() != other.dtype() {
            return None;
        }
        let a = self.to_f64_vec();
        let b = other.to_f64_vec();
        Some(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
    }
}

/// Float element types the layer kernels are generic over.
pub trait Real: Float + std::ops::AddAssign + Default + fmt::Debug + Send + Sync + 'static {
    const DTYPE: DType;
    fn view(t: &Tensor) -> Option<&[Self]>;
    fn wrap(shape: Vec<usize>, data: Vec<Self>) -> Tensor;
    fn of(v: f64) -> Self;
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;
    fn view(t: &Tensor) -> Option<&[f32]> {
        t.as_f32()
    }
    fn wrap(shape: Vec<usize>, data: Vec<f32>) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            shape,
            storage: Storage::F32(data),
        }
    }
    fn of(v: f64) -> f32 {
        v as f32
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;
    fn view(t: &Tensor) -> Option<&[f64]> {
        t.as_f64()
    }
    fn wrap(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            shape,
            storage: Storage::F64(data),
        }
    }
    fn of(v: f64) -> f64 {
        v
    }
}

pub(crate) fn expect_view<T: Real>(t: &Tensor) -> Result<&[T]> {
    T::view(t).ok_or(TensorError::DTypeMismatch {
        expected: T::DTYPE,
        actual: t.dtype(),
    })
}
