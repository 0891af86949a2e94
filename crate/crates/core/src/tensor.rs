//! Dense row-major tensors with a declared storage precision.
//!
//! Values are always held as `f64`, but every tensor's values are constrained
//! to the representable set of its [`Precision`]: FP32 tensors hold only
//! `f32`-representable numbers, `SimFp16` tensors only binary16-representable
//! numbers. Arithmetic follows the precision of the operands:
//!
//! * `Fp64`: `f64` arithmetic.
//! * `Fp32`: `f32` arithmetic, every intermediate rounded to `f32`.
//! * `SimFp16`: `f32` arithmetic (including accumulation), with each produced
//!   element rounded to binary16. This mirrors FP16 kernels that accumulate
//!   in a wider register.
//!
//! All reductions run left to right from a zero accumulator. Nothing here is
//! parallel, so identical inputs give bitwise-identical outputs.

use std::fmt;

use num_traits::{Float, Zero};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Precision {
    Fp64,
    Fp32,
    SimFp16,
}

impl Precision {
    /// Bytes charged per element by the memory ledger.
    pub const fn bytes_per_element(self) -> u64 {
        match self {
            Precision::Fp64 => 8,
            Precision::Fp32 => 4,
            Precision::SimFp16 => 2,
        }
    }

    /// Rounds `x` to the nearest value representable in this precision.
    pub fn round(self, x: f64) -> f64 {
        match self {
            Precision::Fp64 => x,
            Precision::Fp32 => x as f32 as f64,
            Precision::SimFp16 => round_binary16(x),
        }
    }

    pub fn is_representable(self, x: f64) -> bool {
        let r = self.round(x);
        r.to_bits() == x.to_bits() || (r.is_nan() && x.is_nan())
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::Fp64 => "fp64",
            Precision::Fp32 => "fp32",
            Precision::SimFp16 => "fp16",
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Largest finite binary16 value.
pub const BINARY16_MAX: f64 = 65504.0;
const BINARY16_MIN_NORMAL: f64 = 6.103_515_625e-5; // 2^-14
const BINARY16_SUBNORMAL_STEP: f64 = 5.960_464_477_539_063e-8; // 2^-24

/// Rounds to the nearest binary16 value, ties to even, saturating at ±65504.
///
/// NaN propagates; infinities saturate like any other out-of-range magnitude.
pub fn round_binary16(x: f64) -> f64 {
    if x.is_nan() {
        return x;
    }
    let a = x.abs();
    if a >= BINARY16_MAX {
        return BINARY16_MAX.copysign(x);
    }
    let q = if a < BINARY16_MIN_NORMAL {
        (a / BINARY16_SUBNORMAL_STEP).round_ties_even() * BINARY16_SUBNORMAL_STEP
    } else {
        let exponent = ((a.to_bits() >> 52) & 0x7ff) as i32 - 1023;
        let quantum = 2f64.powi(exponent - 10);
        (a / quantum).round_ties_even() * quantum
    };
    q.copysign(x)
}

/// Scalar type used inside kernels.
pub(crate) trait Scalar: Float + std::ops::AddAssign {
    fn of(x: f64) -> Self;
    fn to(self) -> f64;
    fn erf(self) -> Self;
}

impl Scalar for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn to(self) -> f64 {
        self
    }
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

impl Scalar for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn to(self) -> f64 {
        self as f64
    }
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

/// Runs `$body` with `$t` bound to the arithmetic type of `$prec`.
macro_rules! with_scalar {
    ($prec:expr, $t:ident => $body:expr) => {
        match $prec {
            Precision::Fp64 => {
                type $t = f64;
                $body
            }
            Precision::Fp32 | Precision::SimFp16 => {
                type $t = f32;
                $body
            }
        }
    };
}
pub(crate) use with_scalar;

/// Standard normal CDF, `0.5 * (1 + erf(x / sqrt 2))`.
pub(crate) fn normal_cdf<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    half * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// Standard normal density.
pub(crate) fn normal_pdf<T: Scalar>(x: T) -> T {
    let inv_sqrt_2pi = T::of(0.398_942_280_401_432_7);
    inv_sqrt_2pi * (-(x * x) * T::of(0.5)).exp()
}

pub(crate) fn gelu_scalar<T: Scalar>(x: T) -> T {
    x * normal_cdf(x)
}

pub(crate) fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    normal_cdf(x) + x * normal_pdf(x)
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    precision: Precision,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("precision", &self.precision)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    /// Builds a tensor from values that must already be representable in
    /// `precision`.
    pub fn new(shape: Vec<usize>, precision: Precision, data: Vec<f64>) -> Result<Self> {
        check_shape(&shape, data.len())?;
        if let Some(bad) = data.iter().find(|v| !precision.is_representable(**v)) {
            return Err(Error::Precision {
                op: "new",
                detail: format!("{bad} is not representable in {precision}"),
            });
        }
        Ok(Tensor {
            shape,
            precision,
            data,
        })
    }

    /// Builds a tensor, rounding every value into `precision`.
    pub fn from_f64(shape: Vec<usize>, precision: Precision, data: Vec<f64>) -> Result<Self> {
        check_shape(&shape, data.len())?;
        let data = data.into_iter().map(|v| precision.round(v)).collect();
        Ok(Tensor {
            shape,
            precision,
            data,
        })
    }

    /// Convenience constructor for a 2-D tensor from nested rows.
    pub fn from_rows(rows: &[Vec<f64>], precision: Precision) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("from_rows", "ragged rows"));
        }
        let data = rows.iter().flatten().copied().collect();
        Tensor::from_f64(vec![rows.len(), cols], precision, data)
    }

    pub fn zeros(shape: Vec<usize>, precision: Precision) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            precision,
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: Vec<usize>, precision: Precision, value: f64) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            precision,
            data: vec![precision.round(value); len],
        }
    }

    pub fn identity(n: usize, precision: Precision) -> Self {
        let mut t = Tensor::zeros(vec![n, n], precision);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Bytes this tensor occupies under ledger accounting.
    pub fn byte_size(&self) -> u64 {
        self.data.len() as u64 * self.precision.bytes_per_element()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    /// Mutable access for perturbation in finite-difference checks; the new
    /// value is rounded into the tensor's precision.
    pub fn set(&mut self, index: usize, value: f64) {
        self.data[index] = self.precision.round(value);
    }

    pub fn to_precision(&self, precision: Precision) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            precision,
            data: self.data.iter().map(|v| precision.round(*v)).collect(),
        }
    }

    /// Bitwise equality of shape, precision and every element.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.precision == other.precision
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    fn expect_2d(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::dim(
                op,
                format!("expected 2-D tensor, got {other:?}"),
            )),
        }
    }

    fn same_precision(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.precision != other.precision {
            return Err(Error::Precision {
                op,
                detail: format!("{} vs {}", self.precision, other.precision),
            });
        }
        Ok(())
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        self.same_precision(other, op)?;
        if self.shape != other.shape {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(())
    }

    fn with_data(&self, data: Vec<f64>) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            precision: self.precision,
            data,
        }
    }

    fn finish(&self, shape: Vec<usize>, mut data: Vec<f64>) -> Tensor {
        if self.precision == Precision::SimFp16 {
            for v in &mut data {
                *v = round_binary16(*v);
            }
        }
        Tensor {
            shape,
            precision: self.precision,
            data,
        }
    }

    fn map<F>(&self, f: F) -> Tensor
    where
        F: Fn(f64) -> f64,
    {
        let data = self.data.iter().map(|v| f(*v)).collect();
        self.finish(self.shape.clone(), data)
    }

    fn zip<F>(&self, other: &Tensor, op: &'static str, f: F) -> Result<Tensor>
    where
        F: Fn(f64, f64) -> f64,
    {
        self.same_shape(other, op)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| f(*a, *b))
            .collect();
        Ok(self.finish(self.shape.clone(), data))
    }

    /// `self[m×k] · other[k×n]`, each output summed over `k` left to right.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_precision(other, "matmul")?;
        let (m, k) = self.expect_2d("matmul")?;
        let (k2, n) = other.expect_2d("matmul")?;
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("inner dimensions {k} and {k2} differ"),
            ));
        }
        let mut out = vec![0.0; m * n];
        with_scalar!(self.precision, T => {
            let a: Vec<T> = self.data.iter().map(|v| T::of(*v)).collect();
            let b: Vec<T> = other.data.iter().map(|v| T::of(*v)).collect();
            for i in 0..m {
                let row = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    let mut acc = T::zero();
                    for (p, lhs) in row.iter().enumerate() {
                        acc += *lhs * b[p * n + j];
                    }
                    out[i * n + j] = acc.to();
                }
            }
        });
        Ok(self.finish(vec![m, n], out))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.expect_2d("transpose")?;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            precision: self.precision,
            data,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        with_scalar!(self.precision, T => {
            self.zip(other, "add", |a, b| (T::of(a) + T::of(b)).to())
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        with_scalar!(self.precision, T => {
            self.zip(other, "sub", |a, b| (T::of(a) - T::of(b)).to())
        })
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        with_scalar!(self.precision, T => {
            self.zip(other, "mul", |a, b| (T::of(a) * T::of(b)).to())
        })
    }

    /// Multiplies by a scalar; the scalar is first rounded into the working
    /// type of the tensor.
    pub fn scale(&self, factor: f64) -> Tensor {
        with_scalar!(self.precision, T => {
            let f = T::of(factor);
            self.map(|a| (T::of(a) * f).to())
        })
    }

    pub fn div_scalar(&self, divisor: f64) -> Tensor {
        with_scalar!(self.precision, T => {
            let d = T::of(divisor);
            self.map(|a| (T::of(a) / d).to())
        })
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&self) -> Tensor {
        with_scalar!(self.precision, T => self.map(|a| gelu_scalar(T::of(a)).to()))
    }

    /// Derivative of exact GELU, `Phi(x) + x * phi(x)`.
    pub fn gelu_grad(&self) -> Tensor {
        with_scalar!(self.precision, T => self.map(|a| gelu_grad_scalar(T::of(a)).to()))
    }

    /// Adds a `[1×n]` row vector to every row of a `[m×n]` tensor.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        self.same_precision(row, "add_row")?;
        let (m, n) = self.expect_2d("add_row")?;
        if row.shape != [1, n] {
            return Err(Error::dim(
                "add_row",
                format!("row {:?} does not match width {n}", row.shape),
            ));
        }
        let mut data = vec![0.0; m * n];
        with_scalar!(self.precision, T => {
            for i in 0..m {
                for j in 0..n {
                    data[i * n + j] = (T::of(self.data[i * n + j]) + T::of(row.data[j])).to();
                }
            }
        });
        Ok(self.finish(vec![m, n], data))
    }

    /// Column sums of a `[m×n]` tensor as a `[1×n]` row, rows added in order.
    pub fn sum_rows(&self) -> Result<Tensor> {
        let (m, n) = self.expect_2d("sum_rows")?;
        let mut data = vec![0.0; n];
        with_scalar!(self.precision, T => {
            for (j, out) in data.iter_mut().enumerate() {
                let mut acc = T::zero();
                for i in 0..m {
                    acc += T::of(self.data[i * n + j]);
                }
                *out = acc.to();
            }
        });
        Ok(self.finish(vec![1, n], data))
    }

    /// Rows `[start, start + count)` of a 2-D tensor.
    pub fn slice_rows(&self, start: usize, count: usize) -> Result<Tensor> {
        let (m, n) = self.expect_2d("slice_rows")?;
        if count == 0 || start + count > m {
            return Err(Error::dim(
                "slice_rows",
                format!("rows {start}..{} out of 0..{m}", start + count),
            ));
        }
        Ok(Tensor {
            shape: vec![count, n],
            precision: self.precision,
            data: self.data[start * n..(start + count) * n].to_vec(),
        })
    }

    /// Stacks 2-D tensors of equal width and precision vertically.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat_rows", "no parts"))?;
        let (_, n) = first.expect_2d("concat_rows")?;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            first.same_precision(p, "concat_rows")?;
            let (r, c) = p.expect_2d("concat_rows")?;
            if c != n {
                return Err(Error::dim("concat_rows", format!("width {c} vs {n}")));
            }
            rows += r;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            shape: vec![rows, n],
            precision: first.precision,
            data,
        })
    }

    /// Sum of all elements in the tensor's working precision.
    pub fn sum(&self) -> f64 {
        with_scalar!(self.precision, T => {
            let mut acc = T::zero();
            for v in &self.data {
                acc += T::of(*v);
            }
            acc.to()
        })
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub(crate) fn with_same_layout(&self, data: Vec<f64>) -> Tensor {
        self.with_data(data)
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::dim(
            "new",
            format!("shape {shape:?} must have positive dimensions"),
        ));
    }
    let expected: usize = shape.iter().product();
    if expected != len {
        return Err(Error::dim(
            "new",
            format!("shape {shape:?} needs {expected} elements, got {len}"),
        ));
    }
    Ok(())
}

/// Rounds every element of an FP32 or FP64 tensor to binary16.
pub fn quantize_sim_fp16(t: &Tensor) -> Result<Tensor> {
    if t.precision == Precision::SimFp16 {
        return Err(Error::Precision {
            op: "quantize_sim_fp16",
            detail: "input is already fp16".into(),
        });
    }
    Ok(t.to_precision(Precision::SimFp16))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t2(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows, Precision::Fp64).unwrap()
    }

    /// Decodes a binary16 bit pattern.
    fn decode_binary16(bits: u16) -> f64 {
        let sign = if bits & 0x8000 != 0 { -1.0 } else { 1.0 };
        let exp = ((bits >> 10) & 0x1f) as i32;
        let frac = (bits & 0x3ff) as f64;
        match exp {
            0 => sign * frac * 2f64.powi(-24),
            31 => f64::NAN,
            e => sign * (1.0 + frac / 1024.0) * 2f64.powi(e - 15),
        }
    }

    /// Brute force: nearest finite binary16 value, ties to even mantissa,
    /// clamped to the finite range.
    fn nearest_binary16_bruteforce(x: f64) -> f64 {
        let mut best = (f64::INFINITY, 0.0f64, 0u16);
        for bits in 0u16..=0x7bff {
            let v = decode_binary16(bits).copysign(x);
            let d = (v - x).abs();
            if d < best.0 || (d == best.0 && bits & 1 == 0 && best.2 & 1 == 1) {
                best = (d, v, bits);
            }
        }
        best.1
    }

    #[test]
    fn matmul_identity() {
        let a = t2(&[vec![1.5, -2.0, 3.0], vec![0.25, 4.0, -1.0]]);
        let out = a.matmul(&Tensor::identity(3, Precision::Fp64)).unwrap();
        assert!(out.bitwise_eq(&a));
    }

    #[test]
    fn matmul_two_by_two() {
        let a = t2(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = t2(&[vec![5.0, 6.0], vec![7.0, 8.0]]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_zeros() {
        let z = Tensor::zeros(vec![2, 3], Precision::Fp32);
        let b = Tensor::from_f64(
            vec![3, 4],
            Precision::Fp32,
            (0..12).map(f64::from).collect(),
        )
        .unwrap();
        let c = z.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 4]);
        assert!(c.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(vec![2, 3], Precision::Fp64);
        let b = Tensor::zeros(vec![2, 3], Precision::Fp64);
        assert!(matches!(a.matmul(&b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn mixed_precision_rejected() {
        let a = Tensor::zeros(vec![2, 2], Precision::Fp64);
        let b = Tensor::zeros(vec![2, 2], Precision::Fp32);
        assert!(matches!(a.add(&b), Err(Error::Precision { .. })));
    }

    #[test]
    fn elementwise_shape_mismatch() {
        let a = Tensor::zeros(vec![2, 2], Precision::Fp64);
        let b = Tensor::zeros(vec![2, 3], Precision::Fp64);
        assert!(matches!(a.sub(&b), Err(Error::Dimension { .. })));
    }

    /// Phi(1) by composite Simpson quadrature of the normal density.
    fn phi_quadrature(x: f64) -> f64 {
        let n = 20_000;
        let h = x / n as f64;
        let pdf = |t: f64| (-t * t / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut s = pdf(0.0) + pdf(x);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * pdf(i as f64 * h);
        }
        0.5 + s * h / 3.0
    }

    #[test]
    fn gelu_values() {
        let t = t2(&[vec![0.0, 1.0]]);
        let g = t.gelu();
        assert_eq!(g.data()[0], 0.0);
        let oracle = phi_quadrature(1.0);
        assert!((oracle - 0.841_344_746).abs() < 1e-9);
        assert!((g.data()[1] - oracle).abs() < 1e-13);
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        let xs = [-2.5, -0.7, 0.0, 0.3, 1.9];
        let t = t2(&[xs.to_vec()]);
        let g = t.gelu_grad();
        let h = 1e-5;
        for (i, x) in xs.iter().enumerate() {
            let f = |v: f64| t2(&[vec![v]]).gelu().data()[0];
            let fd = (f(x + h) - f(x - h)) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn scale_by_one_is_identity() {
        let t = Tensor::from_f64(vec![3], Precision::Fp32, vec![0.1, -7.5, 3.25]).unwrap();
        assert!(t.scale(1.0).bitwise_eq(&t));
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(round_binary16(1.0), 1.0);
        assert_eq!(round_binary16(0.1), 0.099_975_585_937_5);
        assert_eq!(nearest_binary16_bruteforce(0.1), 0.099_975_585_937_5);
        assert_eq!(round_binary16(70000.0), 65504.0);
        assert_eq!(round_binary16(-70000.0), -65504.0);
        assert_eq!(round_binary16(f64::INFINITY), 65504.0);
        assert!(round_binary16(f64::NAN).is_nan());
        // ties to even: 1 + 2^-11 sits halfway between 1 and 1 + 2^-10
        assert_eq!(round_binary16(1.0 + 2f64.powi(-11)), 1.0);
        assert_eq!(
            round_binary16(1.0 + 3.0 * 2f64.powi(-11)),
            1.0 + 2.0 * 2f64.powi(-10)
        );
        // smallest subnormal survives, half of it rounds to zero (even)
        assert_eq!(round_binary16(2f64.powi(-24)), 2f64.powi(-24));
        assert_eq!(round_binary16(2f64.powi(-25)), 0.0);
    }

    #[test]
    fn quantize_tensor_marks_precision() {
        let t = Tensor::from_f64(vec![2], Precision::Fp32, vec![0.1, 70000.0]).unwrap();
        let q = quantize_sim_fp16(&t).unwrap();
        assert_eq!(q.precision(), Precision::SimFp16);
        assert_eq!(q.data(), &[0.099_975_585_937_5, 65504.0]);
        assert!(quantize_sim_fp16(&q).is_err());
    }

    #[test]
    fn new_rejects_unrepresentable() {
        assert!(Tensor::new(vec![1], Precision::SimFp16, vec![0.1]).is_err());
        assert!(Tensor::new(vec![2], Precision::Fp64, vec![0.1]).is_err());
        assert!(Tensor::new(vec![1], Precision::Fp32, vec![0.5]).is_ok());
    }

    #[test]
    fn fp16_arithmetic_stays_on_grid() {
        let a = Tensor::from_f64(vec![1, 3], Precision::SimFp16, vec![0.1, 0.2, 0.3]).unwrap();
        let b = Tensor::from_f64(vec![3, 1], Precision::SimFp16, vec![1.1, 2.2, 3.3]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert!(Precision::SimFp16.is_representable(c.data()[0]));
        assert!(a
            .gelu()
            .data()
            .iter()
            .all(|v| Precision::SimFp16.is_representable(*v)));
    }

    #[test]
    fn sum_rows_and_add_row() {
        let a = t2(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(a.sum_rows().unwrap().data(), &[4.0, 6.0]);
        let row = t2(&[vec![10.0, 20.0]]);
        assert_eq!(a.add_row(&row).unwrap().data(), &[11.0, 22.0, 13.0, 24.0]);
        assert!(a.add_row(&a).is_err());
    }

    #[test]
    fn slice_and_concat_rows() {
        let a = t2(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        let top = a.slice_rows(0, 1).unwrap();
        let rest = a.slice_rows(1, 2).unwrap();
        assert!(Tensor::concat_rows(&[top, rest]).unwrap().bitwise_eq(&a));
        assert!(a.slice_rows(2, 2).is_err());
    }

    proptest! {
        #[test]
        fn quantize_matches_bruteforce(x in -70000.0f64..70000.0) {
            prop_assert_eq!(round_binary16(x), nearest_binary16_bruteforce(x));
        }

        #[test]
        fn quantize_small_matches_bruteforce(x in -1e-3f64..1e-3) {
            prop_assert_eq!(round_binary16(x), nearest_binary16_bruteforce(x));
        }

        #[test]
        fn quantize_idempotent(x in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO) {
            let q = round_binary16(x);
            prop_assert_eq!(round_binary16(q).to_bits(), q.to_bits());
        }

        #[test]
        fn quantize_relative_error_bound(x in 6.103515625e-5f64..65504.0, neg in any::<bool>()) {
            let x = if neg { -x } else { x };
            let q = round_binary16(x);
            prop_assert!((q - x).abs() <= 2f64.powi(-11) * x.abs());
        }

        #[test]
        fn matmul_is_deterministic(vals in proptest::collection::vec(-10.0f64..10.0, 12)) {
            let a = Tensor::from_f64(vec![3, 4], Precision::Fp32, vals.clone()).unwrap();
            let b = Tensor::from_f64(vec![4, 3], Precision::Fp32, vals).unwrap();
            let c1 = a.matmul(&b).unwrap();
            let c2 = a.matmul(&b).unwrap();
            prop_assert!(c1.bitwise_eq(&c2));
        }
    }
}
