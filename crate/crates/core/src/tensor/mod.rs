//! Dense row-major tensors and the numeric kernels built on them.

mod kernels;
pub mod meter;
mod prng;

pub use kernels::{conv3d, conv3d_backward, matmul, matmul_nt, matmul_tn, softmax, Conv3dGrads};
pub use prng::Prng;

use crate::error::{Error, Result};
use std::fmt::{Debug, Display};

/// Maximum supported rank: batch, channel, depth, height, width.
pub const MAX_RANK: usize = 5;

/// Smallest denominator magnitude accepted by [`Tensor::div`].
pub const DIV_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    /// On-disk code used by the volume and checkpoint formats.
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<DType> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

impl std::str::FromStr for DType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(Error::Config(format!("unknown dtype `{other}`"))),
        }
    }
}

/// Floating point element type of a [`Tensor`].
pub trait Scalar:
    num_traits::Float
    + num_traits::FloatConst
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    /// Reads one value from the first `DTYPE.size()` bytes.
    fn read_le(bytes: &[u8]) -> Self;
    /// Exact bit pattern, for bit-identity comparisons.
    fn to_bits_u64(self) -> u64;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
    fn to_bits_u64(self) -> u64 {
        self.to_bits() as u64
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
    fn to_bits_u64(self) -> u64 {
        self.to_bits()
    }
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: format!("rank must be in 1..={MAX_RANK}"),
        });
    }
    if shape.contains(&0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "zero extent".into(),
        });
    }
    Ok(())
}

/// Dense row-major tensor.
///
/// Buffers are registered with the thread-local [`meter`] unless the tensor
/// has been marked untracked (parameters and optimizer state).
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
    tracked: bool,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_shape(shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("data length {} != {}", data.len(), n),
            });
        }
        Ok(Self::from_parts(shape.to_vec(), data))
    }

    fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        meter::acquire(data.len() * std::mem::size_of::<T>());
        Tensor {
            shape,
            data,
            tracked: true,
        }
    }

    /// Internal constructor for kernels whose output shape is already valid.
    pub(crate) fn from_shape_vec(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self::from_parts(shape, data)
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Result<Self> {
        check_shape(shape)?;
        let n = shape.iter().product();
        Ok(Self::from_parts(shape.to_vec(), vec![v; n]))
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Result<Self> {
        check_shape(shape)?;
        let n = shape.iter().product();
        Ok(Self::from_parts(shape.to_vec(), (0..n).map(&mut f).collect()))
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self::from_parts(other.shape.clone(), vec![T::zero(); other.len()])
    }

    pub fn ones_like(other: &Self) -> Self {
        Self::from_parts(other.shape.clone(), vec![T::one(); other.len()])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn bytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<T>()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn is_tracked(&self) -> bool {
        self.tracked
    }

    /// Removes this buffer from activation accounting.
    pub fn untracked(mut self) -> Self {
        if self.tracked {
            meter::release(self.bytes());
            self.tracked = false;
        }
        self
    }

    pub fn into_vec(mut self) -> Vec<T> {
        if self.tracked {
            meter::release(self.bytes());
            self.tracked = false;
        }
        std::mem::take(&mut self.data)
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        if shape.iter().product::<usize>() != self.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits_u64() == b.to_bits_u64())
    }

    /// `max |a - b| / max |b|`, the roundtrip error measure used throughout.
    pub fn max_rel_diff(&self, reference: &Self) -> f64 {
        let denom = reference.max_abs().as_f64().max(f64::MIN_POSITIVE);
        let diff = self
            .data
            .iter()
            .zip(&reference.data)
            .fold(0.0f64, |m, (a, b)| m.max((a.as_f64() - b.as_f64()).abs()));
        diff / denom
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        )
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn map_inplace(&mut self, f: impl Fn(T) -> T) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }

    pub fn exp(&self) -> Self {
        meter::add_flops(self.len() as u64);
        self.map(T::exp)
    }

    pub fn tanh(&self) -> Self {
        meter::add_flops(self.len() as u64);
        self.map(T::tanh)
    }

    pub fn sigmoid(&self) -> Self {
        meter::add_flops(self.len() as u64);
        self.map(|v| T::one() / (T::one() + (-v).exp()))
    }

    pub fn scale(&self, alpha: T) -> Self {
        meter::add_flops(self.len() as u64);
        self.map(|v| v * alpha)
    }

    fn broadcast_zip(
        &self,
        other: &Self,
        op: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Self> {
        meter::add_flops(self.len().max(other.len()) as u64);
        if self.shape == other.shape {
            let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
            return Ok(Self::from_parts(self.shape.clone(), data));
        }
        if self.shape.ends_with(&other.shape) {
            let m = other.len();
            let data = self
                .data
                .iter()
                .enumerate()
                .map(|(i, &a)| f(a, other.data[i % m]))
                .collect();
            return Ok(Self::from_parts(self.shape.clone(), data));
        }
        if other.shape.ends_with(&self.shape) {
            let m = self.len();
            let data = other
                .data
                .iter()
                .enumerate()
                .map(|(i, &b)| f(self.data[i % m], b))
                .collect();
            return Ok(Self::from_parts(other.shape.clone(), data));
        }
        Err(Error::shape(
            op,
            format!("cannot broadcast {:?} with {:?}", self.shape, other.shape),
        ))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.broadcast_zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.broadcast_zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.broadcast_zip(other, "mul", |a, b| a * b)
    }

    /// Elementwise division; any denominator entry below [`DIV_FLOOR`] in
    /// magnitude is a numeric-domain error.
    pub fn div(&self, other: &Self) -> Result<Self> {
        let floor = T::from_f64(DIV_FLOOR);
        if let Some(bad) = other.data.iter().find(|v| !(v.abs() >= floor)) {
            return Err(Error::NumericDomain {
                op: "div",
                detail: format!("denominator {bad} below floor {DIV_FLOOR:e}"),
            });
        }
        self.broadcast_zip(other, "div", |a, b| a / b)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "add_assign",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        meter::add_flops(self.len() as u64);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Number of channels of a `[B, C, ...]` tensor.
    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    /// Product of the extents after the channel axis.
    pub fn spatial_len(&self) -> usize {
        self.shape[2..].iter().product()
    }

    /// Channels `start..start + len` of a `[B, C, ...]` tensor.
    pub fn narrow_channels(&self, start: usize, len: usize) -> Result<Self> {
        if self.rank() < 2 || len == 0 || start + len > self.channels() {
            return Err(Error::shape(
                "narrow_channels",
                format!("{start}+{len} of {:?}", self.shape),
            ));
        }
        let b = self.shape[0];
        let c = self.channels();
        let s = self.spatial_len();
        let mut data = Vec::with_capacity(b * len * s);
        for bi in 0..b {
            let base = (bi * c + start) * s;
            data.extend_from_slice(&self.data[base..base + len * s]);
        }
        let mut shape = self.shape.clone();
        shape[1] = len;
        Ok(Self::from_parts(shape, data))
    }

    /// Splits channels into `[0, at)` and `[at, C)`.
    pub fn split_channels(&self, at: usize) -> Result<(Self, Self)> {
        let c = if self.rank() >= 2 { self.channels() } else { 0 };
        if at == 0 || at >= c {
            return Err(Error::shape(
                "split_channels",
                format!("split at {at} of {:?}", self.shape),
            ));
        }
        Ok((self.narrow_channels(0, at)?, self.narrow_channels(at, c - at)?))
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(a: &Self, b: &Self) -> Result<Self> {
        if a.rank() < 2
            || a.rank() != b.rank()
            || a.shape[0] != b.shape[0]
            || a.shape[2..] != b.shape[2..]
        {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} vs {:?}", a.shape, b.shape),
            ));
        }
        let n = a.shape[0];
        let s = a.spatial_len();
        let (ca, cb) = (a.channels(), b.channels());
        let mut data = Vec::with_capacity(a.len() + b.len());
        for bi in 0..n {
            data.extend_from_slice(&a.data[bi * ca * s..(bi + 1) * ca * s]);
            data.extend_from_slice(&b.data[bi * cb * s..(bi + 1) * cb * s]);
        }
        let mut shape = a.shape.clone();
        shape[1] = ca + cb;
        Ok(Self::from_parts(shape, data))
    }

    /// Sum over every axis except the channel axis of a `[B, C, ...]` tensor.
    pub fn sum_per_channel(&self) -> Vec<T> {
        let c = self.channels();
        let s = self.spatial_len();
        let mut out = vec![T::zero(); c];
        for (i, chunk) in self.data.chunks_exact(s).enumerate() {
            out[i % c] += chunk.iter().copied().sum();
        }
        out
    }

    /// Squared L2 norm, accumulated in f64.
    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64() * v.as_f64()).sum()
    }
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        if self.tracked {
            Self::from_parts(self.shape.clone(), self.data.clone())
        } else {
            Tensor {
                shape: self.shape.clone(),
                data: self.data.clone(),
                tracked: false,
            }
        }
    }
}

impl<T: Scalar> Drop for Tensor<T> {
    fn drop(&mut self) {
        if self.tracked {
            meter::release(self.data.len() * std::mem::size_of::<T>());
        }
    }
}

impl<T: Scalar> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor<{}>{:?}", T::DTYPE.name(), self.shape)
    }
}

impl<T: Scalar> PartialEq for Tensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

/// Panics in debug builds if a kernel produced non-finite output from
/// finite inputs.
#[inline]
pub(crate) fn debug_check_finite<T: Scalar>(op: &str, inputs: &[&[T]], output: &[T]) {
    if cfg!(debug_assertions) && !output.iter().all(|v| v.is_finite()) {
        let inputs_finite = inputs.iter().all(|s| s.iter().all(|v| v.is_finite()));
        assert!(!inputs_finite, "{op} produced non-finite output from finite inputs");
    }
}
