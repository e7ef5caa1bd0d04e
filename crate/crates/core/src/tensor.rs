//! Dense row-major tensors.
//!
//! A [`Tensor`] owns its shape and a flat buffer. Operations return new
//! tensors; nothing mutates a tensor that has been shared. Broadcasting is
//! limited to tensor-with-scalar ([`Tensor::scale`], [`Tensor::add_scalar`]).

use std::fmt;

use num_traits::Float;

use crate::error::{shape_err, Error, Result};

/// On-disk and FFI dtype tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        })
    }
}

/// Floating-point element type. Reductions accumulate in `f64` for both widths.
pub trait Scalar: Float + Default + fmt::Debug + Send + Sync + 'static {
    const DTYPE: DType;

    fn as_f64(self) -> f64;
    fn of_f64(v: f64) -> Self;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn of_f64(v: f64) -> Self {
        v
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("dtype", &T::DTYPE)
            .field("shape", &self.shape)
            .field("data[..8]", &preview)
            .finish()
    }
}

fn check_extents(shape: &[usize]) -> Result<usize> {
    if let Some(axis) = shape.iter().position(|&e| e == 0) {
        return Err(shape_err!("extent 0 on axis {axis} of {shape:?}"));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| shape_err!("element count of {shape:?} overflows"))
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n = check_extents(&shape)?;
        if n != data.len() {
            return Err(shape_err!("shape {shape:?} needs {n} elements, got {}", data.len()));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let n = check_extents(shape)?;
        Ok(Tensor { shape: shape.to_vec(), data: vec![value; n] })
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: Vec::new(), data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let n = check_extents(shape)?;
        Ok(Tensor { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() })
    }

    /// Square identity matrix.
    pub fn eye(n: usize) -> Result<Self> {
        Self::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Extent of `axis`, or a shape error if the tensor has fewer axes.
    pub fn dim(&self, axis: usize) -> Result<usize> {
        self.shape
            .get(axis)
            .copied()
            .ok_or_else(|| shape_err!("axis {axis} out of range for rank {}", self.rank()))
    }

    /// Row-major flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> Result<usize> {
        ravel(&self.shape, index)
    }

    pub fn get(&self, index: &[usize]) -> Result<T> {
        Ok(self.data[self.offset(index)?])
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    fn zip_with(&self, other: &Self, op: &str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(shape_err!("{op}: {:?} vs {:?}", self.shape, other.shape));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    pub fn add_scalar(&self, s: T) -> Self {
        self.map(|x| x + s)
    }

    pub fn relu(&self) -> Self {
        self.map(relu)
    }

    pub fn silu(&self) -> Self {
        self.map(silu)
    }

    /// Sum of all elements, accumulated in ascending flat order in `f64`.
    pub fn sum(&self) -> T {
        T::of_f64(self.data.iter().fold(0.0, |acc, &x| acc + x.as_f64()))
    }

    pub fn mean(&self) -> T {
        T::of_f64(self.sum().as_f64() / self.numel() as f64)
    }

    /// Sum over one axis; the axis is removed from the result.
    pub fn sum_axis(&self, axis: usize) -> Result<Self> {
        let extent = self.dim(axis)?;
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = vec![0.0f64; outer * inner];
        for o in 0..outer {
            for a in 0..extent {
                let base = (o * extent + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += self.data[base + i].as_f64();
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Tensor::new(shape, out.into_iter().map(T::of_f64).collect())
    }

    pub fn transpose(&self) -> Result<Self> {
        let [m, n] = self.as_matrix()?;
        let mut data = Vec::with_capacity(m * n);
        for j in 0..n {
            for i in 0..m {
                data.push(self.data[i * n + j]);
            }
        }
        Tensor::new(vec![n, m], data)
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let [m, k] = self.as_matrix()?;
        let [k2, n] = other.as_matrix()?;
        if k != k2 {
            return Err(shape_err!("matmul inner dims {m}x{k} · {k2}x{n}"));
        }
        let mut acc = vec![0.0f64; m * n];
        for i in 0..m {
            let row = &mut acc[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p].as_f64();
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                for (r, &b) in row.iter_mut().zip(brow) {
                    *r += a * b.as_f64();
                }
            }
        }
        Tensor::new(vec![m, n], acc.into_iter().map(T::of_f64).collect())
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&self, other: &Self, axis: usize) -> Result<Self> {
        if self.rank() != other.rank() || axis >= self.rank() {
            return Err(shape_err!("concat axis {axis}: {:?} vs {:?}", self.shape, other.shape));
        }
        for (i, (a, b)) in self.shape.iter().zip(&other.shape).enumerate() {
            if i != axis && a != b {
                return Err(shape_err!("concat axis {axis}: {:?} vs {:?}", self.shape, other.shape));
            }
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let (ca, cb) = (self.shape[axis] * inner, other.shape[axis] * inner);
        let mut data = Vec::with_capacity(self.numel() + other.numel());
        for o in 0..outer {
            data.extend_from_slice(&self.data[o * ca..(o + 1) * ca]);
            data.extend_from_slice(&other.data[o * cb..(o + 1) * cb]);
        }
        let mut shape = self.shape.clone();
        shape[axis] += other.shape[axis];
        Tensor::new(shape, data)
    }

    /// Split along `axis` at `at`: the first part gets extents `[0, at)`.
    pub fn split(&self, axis: usize, at: usize) -> Result<(Self, Self)> {
        let extent = self.dim(axis)?;
        if at == 0 || at >= extent {
            return Err(shape_err!("split point {at} outside (0, {extent})"));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let (ca, cb) = (at * inner, (extent - at) * inner);
        let mut a = Vec::with_capacity(outer * ca);
        let mut b = Vec::with_capacity(outer * cb);
        for o in 0..outer {
            let base = o * (ca + cb);
            a.extend_from_slice(&self.data[base..base + ca]);
            b.extend_from_slice(&self.data[base + ca..base + ca + cb]);
        }
        let mut sa = self.shape.clone();
        sa[axis] = at;
        let mut sb = self.shape.clone();
        sb[axis] = extent - at;
        Ok((Tensor::new(sa, a)?, Tensor::new(sb, b)?))
    }

    pub fn as_matrix(&self) -> Result<[usize; 2]> {
        match self.shape[..] {
            [m, n] => Ok([m, n]),
            _ => Err(shape_err!("expected a matrix, got shape {:?}", self.shape)),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Returns `Err(NonFinite)` naming `what` if any element is NaN or infinite.
    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|x| !x.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NonFinite(format!("{what}[{i}] = {:?}", self.data[i]))),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|x| U::of_f64(x.as_f64())).collect() }
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, x| m.max(x.abs()))
    }
}

pub fn ravel(shape: &[usize], index: &[usize]) -> Result<usize> {
    if index.len() != shape.len() {
        return Err(shape_err!("index rank {} vs tensor rank {}", index.len(), shape.len()));
    }
    let mut off = 0usize;
    for (axis, (&i, &e)) in index.iter().zip(shape).enumerate() {
        if i >= e {
            return Err(shape_err!("index {i} out of bounds for axis {axis} (extent {e})"));
        }
        off = off * e + i;
    }
    Ok(off)
}

pub fn unravel(shape: &[usize], mut offset: usize) -> Vec<usize> {
    let mut index = vec![0; shape.len()];
    for (slot, &e) in index.iter_mut().zip(shape).rev() {
        *slot = offset % e;
        offset /= e;
    }
    index
}

#[inline]
pub fn relu<T: Float>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

#[inline]
pub fn silu<T: Float>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

/// d/dx silu(x) = σ(x)·(1 + x·(1 − σ(x))).
#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-form GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}
