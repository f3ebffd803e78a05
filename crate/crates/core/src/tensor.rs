//! Dense row-major tensors, FLOP instrumentation and the eager numeric kernels
//! shared by the plain forward path and the gradient tape.

use std::fmt;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::TensorError;

/// Layernorm epsilon used everywhere in the model.
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Scalar element type. Implemented for `f32` (default, fast) and `f64`
/// (used by every oracle and equivalence test).
pub trait Element:
    Float + FromPrimitive + ToPrimitive + Default + Sum + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    const DTYPE: DType;

    /// `c = alpha * a·b + beta * c` with arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }
    fn f64(self) -> f64 {
        self.to_f64().expect("finite element")
    }
}

macro_rules! element_impl {
    ($t:ty, $dtype:expr, $gemm:path, $n:expr) => {
        impl Element for $t {
            const DTYPE: DType = $dtype;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                let span = |rows: usize, cols: usize, s: (isize, isize)| {
                    if rows == 0 || cols == 0 {
                        0
                    } else {
                        (rows as isize - 1) * s.0 + (cols as isize - 1) * s.1 + 1
                    }
                };
                assert!(span(m, k, a_strides) as usize <= a.len(), "gemm: lhs buffer too small");
                assert!(span(k, n, b_strides) as usize <= b.len(), "gemm: rhs buffer too small");
                assert!(span(m, n, c_strides) as usize <= c.len(), "gemm: output buffer too small");
                // SAFETY: all strides are non-negative and the spans were checked above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    );
                }
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; $n];
                buf.copy_from_slice(&bytes[..$n]);
                <$t>::from_le_bytes(buf)
            }
        }
    };
}

element_impl!(f32, DType::F32, matrixmultiply::sgemm, 4);
element_impl!(f64, DType::F64, matrixmultiply::dgemm, 8);

/// One FLOP attribution: a `k×m` by `m×j` product costing `2·k·m·j`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlopRecord {
    pub label: &'static str,
    pub k: u64,
    pub m: u64,
    pub j: u64,
}

impl FlopRecord {
    pub fn flops(&self) -> u64 {
        2 * self.k * self.m * self.j
    }
}

/// Matmul FLOP counter, scoped to one forward pass.
#[derive(Clone, Debug, Default)]
pub struct FlopCounter {
    total: u64,
    records: Vec<FlopRecord>,
}

impl FlopCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, label: &'static str, k: usize, m: usize, j: usize) {
        let rec = FlopRecord { label, k: k as u64, m: m as u64, j: j as u64 };
        self.total += rec.flops();
        self.records.push(rec);
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn records(&self) -> &[FlopRecord] {
        &self.records
    }

    /// Sum of recorded attributions carrying `label`.
    pub fn total_for(&self, label: &str) -> u64 {
        self.records.iter().filter(|r| r.label == label).map(FlopRecord::flops).sum()
    }

    pub fn reset(&mut self) {
        self.total = 0;
        self.records.clear();
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Softplus,
    Sigmoid,
    Exp,
}

pub fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn silu<T: Element>(x: T) -> T {
    x * sigmoid(x)
}

/// `ln(1 + e^x)` without overflow for large `x`.
pub fn softplus<T: Element>(x: T) -> T {
    if x > T::of(30.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl Activation {
    pub fn apply<T: Element>(self, x: T) -> T {
        match self {
            Activation::Silu => silu(x),
            Activation::Softplus => softplus(x),
            Activation::Sigmoid => sigmoid(x),
            Activation::Exp => x.exp(),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    pub fn derivative<T: Element>(self, x: T, y: T) -> T {
        match self {
            Activation::Silu => {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
            Activation::Softplus => sigmoid(x),
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Exp => y,
        }
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} elements]", self.shape, self.data.len())
        }
    }
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::EmptyDimension(shape));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::DataLength { shape, len: data.len() });
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor whose shape is known to match `data`.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self, TensorError> {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    pub fn scalar(v: T) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |k| if k / n == k % n { T::one() } else { T::zero() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    /// Number of rows when all but the last axis are flattened.
    pub fn rows(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.last_dim();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Self { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch { op, lhs: self.shape.clone(), rhs: other.shape.clone() });
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self, TensorError> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self, TensorError> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// Adds a vector along the last axis of every row.
    pub fn add_row(&self, bias: &Self) -> Result<Self, TensorError> {
        let c = self.last_dim();
        if bias.len() != c {
            return Err(TensorError::ShapeMismatch { op: "add_row", lhs: self.shape.clone(), rhs: bias.shape.clone() });
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(c) {
            for (v, &b) in row.iter_mut().zip(&bias.data) {
                *v = *v + b;
            }
        }
        Ok(out)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().f64())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::of(v.f64())).collect() }
    }

    pub fn transpose2(&self) -> Result<Self, TensorError> {
        if self.rank() != 2 {
            return Err(TensorError::Rank { op: "transpose", expected: 2, shape: self.shape.clone() });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        Ok(Self::from_fn(&[c, r], |k| self.data[(k % r) * c + k / r]))
    }

    /// `self[.., K, M] · rhs[M, J]`, counted as `2·K·M·J` FLOPs with `K` the
    /// flattened leading size.
    pub fn matmul_counted(&self, rhs: &Self, counter: &mut FlopCounter) -> Result<Self, TensorError> {
        let out = matmul(self, rhs, false)?;
        counter.record("matmul", self.rows(), self.last_dim(), out.last_dim());
        Ok(out)
    }

    /// `self · rhsᵀ` where `rhs` is `[J, M]`.
    pub fn matmul_t_counted(&self, rhs: &Self, counter: &mut FlopCounter) -> Result<Self, TensorError> {
        let out = matmul(self, rhs, true)?;
        counter.record("matmul", self.rows(), self.last_dim(), out.last_dim());
        Ok(out)
    }

    pub fn activation(&self, kind: Activation) -> Self {
        self.map(|v| kind.apply(v))
    }

    pub fn silu(&self) -> Self {
        self.activation(Activation::Silu)
    }

    pub fn softplus(&self) -> Self {
        self.activation(Activation::Softplus)
    }

    pub fn sigmoid(&self) -> Self {
        self.activation(Activation::Sigmoid)
    }

    pub fn exp(&self) -> Self {
        self.activation(Activation::Exp)
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Self {
        let c = self.last_dim();
        let mut out = self.clone();
        for row in out.data.chunks_mut(c) {
            softmax_in_place(row);
        }
        out
    }

    /// Per-row standardization scaled by `gain`; there is no additive bias.
    pub fn layernorm_nobias(&self, gain: &Self) -> Result<Self, TensorError> {
        Ok(layernorm_forward(self, gain)?.0)
    }

    /// Causal depthwise convolution of `self` (`[L, I]` or `[B, L, I]`) with
    /// `filters[I, C]`; tap `C-1` multiplies the current position.
    pub fn causal_depthwise_conv1d(&self, filters: &Self, bias: &Self, counter: &mut FlopCounter) -> Result<Self, TensorError> {
        let out = conv1d_forward(self, filters, bias)?;
        counter.record("conv", self.len(), filters.last_dim(), 1);
        Ok(out)
    }
}

pub(crate) fn softmax_in_place<T: Element>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s = s + *v;
    }
    for v in row.iter_mut() {
        *v = *v / s;
    }
}

/// Raw matmul with optional transposed right operand. Leading axes of `a`
/// are flattened into rows.
pub(crate) fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>, transpose_b: bool) -> Result<Tensor<T>, TensorError> {
    if b.rank() != 2 {
        return Err(TensorError::Rank { op: "matmul", expected: 2, shape: b.shape.clone() });
    }
    let (m_b, j, b_strides) = if transpose_b {
        (b.shape[1], b.shape[0], (1isize, b.shape[1] as isize))
    } else {
        (b.shape[0], b.shape[1], (b.shape[1] as isize, 1isize))
    };
    let m = a.last_dim();
    if m != m_b {
        return Err(TensorError::ShapeMismatch { op: "matmul", lhs: a.shape.clone(), rhs: b.shape.clone() });
    }
    let k = a.rows();
    let mut shape = a.shape.clone();
    *shape.last_mut().expect("rank >= 1") = j;
    let mut out = vec![T::zero(); k * j];
    T::gemm(k, m, j, T::one(), &a.data, (m as isize, 1), &b.data, b_strides, T::zero(), &mut out, (j as isize, 1));
    Ok(Tensor::from_parts(shape, out))
}

/// Layernorm forward returning `(output, per-row mean, per-row 1/std)`.
pub(crate) fn layernorm_forward<T: Element>(x: &Tensor<T>, gain: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>, Vec<T>), TensorError> {
    let d = x.last_dim();
    if gain.len() != d {
        return Err(TensorError::ShapeMismatch { op: "layernorm", lhs: x.shape.clone(), rhs: gain.shape.clone() });
    }
    let rows = x.rows();
    let mut out = vec![T::zero(); x.len()];
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    let n = T::of(d as f64);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rstd = T::one() / (var + T::of(LN_EPS)).sqrt();
        for (c, &v) in row.iter().enumerate() {
            out[r * d + c] = (v - mean) * rstd * gain.data[c];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    Ok((Tensor::from_parts(x.shape.clone(), out), means, rstds))
}

/// Splits a `[L, I]` or `[B, L, I]` shape into `(B, L, I)`.
pub(crate) fn seq_dims(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match *shape {
        [l, i] => Some((1, l, i)),
        [b, l, i] => Some((b, l, i)),
        _ => None,
    }
}

pub(crate) fn conv1d_forward<T: Element>(x: &Tensor<T>, filters: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (b, l, i) = seq_dims(&x.shape).ok_or_else(|| TensorError::Rank { op: "conv1d", expected: 3, shape: x.shape.clone() })?;
    if filters.rank() != 2 || filters.shape[0] != i {
        return Err(TensorError::ShapeMismatch { op: "conv1d", lhs: x.shape.clone(), rhs: filters.shape.clone() });
    }
    if bias.len() != i {
        return Err(TensorError::ShapeMismatch { op: "conv1d bias", lhs: x.shape.clone(), rhs: bias.shape.clone() });
    }
    let c = filters.shape[1];
    let mut out = vec![T::zero(); x.len()];
    for bb in 0..b {
        let base = bb * l * i;
        for t in 0..l {
            for ch in 0..i {
                let mut acc = bias.data[ch];
                for tap in 0..c {
                    // tap c-1 is the current position, tap 0 the oldest
                    let back = c - 1 - tap;
                    if back <= t {
                        acc = acc + filters.data[ch * c + tap] * x.data[base + (t - back) * i + ch];
                    }
                }
                out[base + t * i + ch] = acc;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape.clone(), out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn identity_matmul_returns_operand() {
        let b = t(&[3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let mut c = FlopCounter::new();
        assert_eq!(Tensor::eye(3).matmul_counted(&b, &mut c).unwrap(), b);
    }

    #[test]
    fn small_matmul_and_flops() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        let b = t(&[2, 1], &[5., 6.]);
        let mut c = FlopCounter::new();
        let out = a.matmul_counted(&b, &mut c).unwrap();
        assert_eq!(out.data(), &[17., 39.]);
        assert_eq!(c.total(), 2 * 2 * 2);

        let mut c = FlopCounter::new();
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[3, 4]);
        a.matmul_counted(&b, &mut c).unwrap();
        assert_eq!(c.total(), 48);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[4, 5]);
        let err = a.matmul_counted(&b, &mut FlopCounter::new()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn transposed_matmul_matches_explicit_transpose() {
        let a = t(&[2, 3], &[1., -2., 3., 0.5, 4., -1.]);
        let w = t(&[4, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9., 10., 11., 12.]);
        let mut c = FlopCounter::new();
        let x = a.matmul_t_counted(&w, &mut c).unwrap();
        let y = a.matmul_counted(&w.transpose2().unwrap(), &mut c).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn activation_values() {
        assert_eq!(silu(0.0f64), 0.0);
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
        let s = t(&[1, 3], &[2.5, 2.5, 2.5]).softmax();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(softplus(1000.0f64).is_finite());
        assert_eq!(softplus(-1000.0f64), 0.0);
    }

    #[test]
    fn layernorm_cases() {
        let g = Tensor::<f64>::full(&[4], 1.0);
        let out = t(&[1, 4], &[3., 3., 3., 3.]).layernorm_nobias(&g).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));

        let g = Tensor::<f64>::full(&[2], 1.0);
        let out = t(&[1, 2], &[-1., 1.]).layernorm_nobias(&g).unwrap();
        assert!((out.data()[0] + 1.0).abs() < 1e-4 && (out.data()[1] - 1.0).abs() < 1e-4);

        let g1 = Tensor::<f64>::full(&[1], 1.0);
        let out = t(&[1, 1], &[7.0]).layernorm_nobias(&g1).unwrap();
        assert_eq!(out.data(), &[0.0]);
    }

    #[test]
    fn conv_identity_and_shift() {
        let x = t(&[4, 2], &[1., 2., 3., 4., 5., 6., 7., 8.]);
        let bias = Tensor::<f64>::zeros(&[2]);
        let mut c = FlopCounter::new();
        let ident = t(&[2, 3], &[0., 0., 1., 0., 0., 1.]);
        assert_eq!(x.causal_depthwise_conv1d(&ident, &bias, &mut c).unwrap(), x);

        let shift = t(&[2, 2], &[1., 0., 1., 0.]);
        let y = x.causal_depthwise_conv1d(&shift, &bias, &mut c).unwrap();
        assert_eq!(y.data(), &[0., 0., 1., 2., 3., 4., 5., 6.]);
    }

    #[test]
    fn conv_filter_longer_than_sequence_is_padded() {
        let x = t(&[2, 1], &[1., 2.]);
        let f = t(&[1, 5], &[1., 1., 1., 1., 1.]);
        let y = x.causal_depthwise_conv1d(&f, &Tensor::zeros(&[1]), &mut FlopCounter::new()).unwrap();
        assert_eq!(y.data(), &[1., 3.]);
    }

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new(vec![0, 2], vec![]).is_err());
    }
}
