//! Small dense kernels: tridiagonal matrices and log-space accumulation.

use serde::{Serialize, Serializer};

use crate::error::{Error, Result};

/// Tridiagonal matrix stored by its three diagonals.
///
/// Row `i` reads `lower[i-1] x[i-1] + diag[i] x[i] + upper[i] x[i+1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tridiag {
    /// Sub-diagonal, length `n − 1`.
    pub lower: Vec<f64>,
    /// Main diagonal, length `n`.
    pub diag: Vec<f64>,
    /// Super-diagonal, length `n − 1`.
    pub upper: Vec<f64>,
}

impl Tridiag {
    /// Zero matrix of size `n`.
    pub fn zeros(n: usize) -> Self {
        Self {
            lower: vec![0.0; n - 1],
            diag: vec![0.0; n],
            upper: vec![0.0; n - 1],
        }
    }

    /// Dimension.
    pub fn len(&self) -> usize {
        self.diag.len()
    }

    /// Whether the matrix is empty.
    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    /// `y = A x`.
    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        let n = self.len();
        for i in 0..n {
            let mut acc = self.diag[i] * x[i];
            if i > 0 {
                acc += self.lower[i - 1] * x[i - 1];
            }
            if i + 1 < n {
                acc += self.upper[i] * x[i + 1];
            }
            y[i] = acc;
        }
    }

    /// `y = Aᵀ x`.
    pub fn apply_transpose(&self, x: &[f64], y: &mut [f64]) {
        let n = self.len();
        for i in 0..n {
            let mut acc = self.diag[i] * x[i];
            if i > 0 {
                acc += self.upper[i - 1] * x[i - 1];
            }
            if i + 1 < n {
                acc += self.lower[i] * x[i + 1];
            }
            y[i] = acc;
        }
    }

    /// Transposed matrix.
    pub fn transpose(&self) -> Self {
        Self {
            lower: self.upper.clone(),
            diag: self.diag.clone(),
            upper: self.lower.clone(),
        }
    }

    /// `self + c·diag(d)`.
    pub fn add_diagonal(&mut self, c: f64, d: &[f64]) {
        for (a, b) in self.diag.iter_mut().zip(d) {
            *a += c * b;
        }
    }

    /// LU factorization without pivoting (Thomas algorithm).
    ///
    /// Every matrix factored by this crate is a positive diagonal plus an
    /// M-matrix-like stiffness part, so pivoting is unnecessary; a vanishing
    /// pivot is still reported as an error.
    pub fn factor(&self) -> Result<TridiagLu> {
        let n = self.len();
        let mut c = vec![0.0; n];
        let mut inv_pivot = vec![0.0; n];
        let mut prev_c = 0.0;
        for i in 0..n {
            let sub = if i > 0 { self.lower[i - 1] } else { 0.0 };
            let pivot = self.diag[i] - sub * prev_c;
            if !pivot.is_finite() || pivot.abs() <= f64::MIN_POSITIVE * 1e4 {
                return Err(Error::Internal(format!(
                    "singular tridiagonal step matrix (pivot {pivot:e} in row {i})"
                )));
            }
            inv_pivot[i] = 1.0 / pivot;
            c[i] = if i + 1 < n {
                self.upper[i] * inv_pivot[i]
            } else {
                0.0
            };
            prev_c = c[i];
        }
        Ok(TridiagLu {
            lower: self.lower.clone(),
            c,
            inv_pivot,
        })
    }
}

/// Factored tridiagonal matrix, reusable across right-hand sides.
#[derive(Debug, Clone)]
pub struct TridiagLu {
    lower: Vec<f64>,
    c: Vec<f64>,
    inv_pivot: Vec<f64>,
}

impl TridiagLu {
    /// Solve `A x = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.c.len();
        let mut prev = 0.0;
        for i in 0..n {
            let sub = if i > 0 { self.lower[i - 1] } else { 0.0 };
            b[i] = (b[i] - sub * prev) * self.inv_pivot[i];
            prev = b[i];
        }
        for i in (0..n.saturating_sub(1)).rev() {
            b[i] -= self.c[i] * b[i + 1];
        }
    }
}

/// Nonnegative real number stored by its natural logarithm.
///
/// Zero is represented by `log = −∞`. Weighted norms in this crate easily
/// exceed the double range, so they are accumulated and reported this way.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogValue {
    /// Natural logarithm of the value.
    pub log: f64,
}

impl LogValue {
    /// The value zero.
    pub const ZERO: LogValue = LogValue {
        log: f64::NEG_INFINITY,
    };

    /// From a nonnegative real.
    pub fn from_value(v: f64) -> Self {
        Self { log: v.ln() }
    }

    /// Whether the value is zero.
    pub fn is_zero(&self) -> bool {
        self.log == f64::NEG_INFINITY
    }

    /// Linear value (may overflow to infinity).
    pub fn value(&self) -> f64 {
        self.log.exp()
    }

    /// Sum of two values.
    pub fn add(self, other: LogValue) -> LogValue {
        let (hi, lo) = if self.log >= other.log {
            (self.log, other.log)
        } else {
            (other.log, self.log)
        };
        if lo == f64::NEG_INFINITY {
            return LogValue { log: hi };
        }
        LogValue {
            log: hi + (lo - hi).exp().ln_1p(),
        }
    }

    /// Product of two values.
    pub fn mul(self, other: LogValue) -> LogValue {
        if self.is_zero() || other.is_zero() {
            return LogValue::ZERO;
        }
        LogValue {
            log: self.log + other.log,
        }
    }

    /// Square root.
    pub fn sqrt(self) -> LogValue {
        LogValue {
            log: 0.5 * self.log,
        }
    }

    /// Logarithm of the ratio `self / other`, with the convention that
    /// `0 / 0` is `−∞` (a zero ratio) and `x / 0` for `x > 0` is `+∞`.
    pub fn log_ratio(self, other: LogValue) -> f64 {
        match (self.is_zero(), other.is_zero()) {
            (true, _) => f64::NEG_INFINITY,
            (false, true) => f64::INFINITY,
            _ => self.log - other.log,
        }
    }
}

impl Serialize for LogValue {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        // JSON has no infinities; zero is written as null.
        if self.log.is_finite() {
            s.serialize_f64(self.log)
        } else {
            s.serialize_none()
        }
    }
}

/// Streaming log-sum-exp accumulator for sums `Σ e^{l_k} v_k` with `v_k ≥ 0`.
///
/// The running maximum exponent is tracked so partial sums never overflow.
#[derive(Debug, Clone, Copy)]
pub struct LogSum {
    shift: f64,
    acc: f64,
}

impl Default for LogSum {
    fn default() -> Self {
        Self::new()
    }
}

impl LogSum {
    /// Empty sum.
    pub fn new() -> Self {
        Self {
            shift: f64::NEG_INFINITY,
            acc: 0.0,
        }
    }

    /// Add `e^{log_weight} · value` with `value ≥ 0`.
    pub fn add(&mut self, log_weight: f64, value: f64) {
        if value <= 0.0 || log_weight == f64::NEG_INFINITY {
            return;
        }
        let l = log_weight + value.ln();
        if l > self.shift {
            self.acc = self.acc * (self.shift - l).exp() + 1.0;
            self.shift = l;
        } else {
            self.acc += (l - self.shift).exp();
        }
    }

    /// Add another accumulated value.
    pub fn add_log(&mut self, v: LogValue) {
        if !v.is_zero() {
            self.add(v.log, 1.0);
        }
    }

    /// The accumulated sum.
    pub fn total(&self) -> LogValue {
        if self.acc == 0.0 {
            LogValue::ZERO
        } else {
            LogValue {
                log: self.shift + self.acc.ln(),
            }
        }
    }
}

/// Plain dot product with a fixed summation order.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Dot product weighted by a diagonal, `Σ a_i w_i b_i`.
pub fn wdot(a: &[f64], w: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(w).zip(b).map(|((x, w), y)| x * w * y).sum()
}

/// Arithmetic shared by `f64` and double-double values, for kernels that
/// must run in either precision.
pub trait Scalar:
    Copy
    + std::fmt::Debug
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Mul<f64, Output = Self>
    + std::ops::Div<f64, Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + From<f64>
{
    /// Nearest `f64`.
    fn to_f64(self) -> f64;
}

impl Scalar for f64 {
    fn to_f64(self) -> f64 {
        self
    }
}

impl Scalar for twofloat::TwoFloat {
    fn to_f64(self) -> f64 {
        self.hi() + self.lo()
    }
}

/// Double-double value (about 32 significant digits).
pub type DoubleDouble = twofloat::TwoFloat;

impl Tridiag {
    /// `y = A x` in any precision.
    pub fn apply_generic<T: Scalar>(&self, x: &[T], y: &mut [T]) {
        let n = self.len();
        for i in 0..n {
            let mut acc = x[i] * self.diag[i];
            if i > 0 {
                acc += x[i - 1] * self.lower[i - 1];
            }
            if i + 1 < n {
                acc += x[i + 1] * self.upper[i];
            }
            y[i] = acc;
        }
    }
}

/// `Σ aᵢ wᵢ bᵢ` in any precision.
pub fn wdot_generic<T: Scalar>(a: &[T], w: &[f64], b: &[T]) -> T {
    let mut acc = T::from(0.0);
    for ((x, w), y) in a.iter().zip(w).zip(b) {
        acc += *x * *y * *w;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thomas_solves_random_system() {
        let n = 17;
        let mut a = Tridiag::zeros(n);
        for i in 0..n {
            a.diag[i] = 4.0 + (i as f64).sin();
            if i + 1 < n {
                a.upper[i] = -1.0 + 0.1 * i as f64 / n as f64;
                a.lower[i] = -0.7;
            }
        }
        let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).cos()).collect();
        let mut b = vec![0.0; n];
        a.apply(&x, &mut b);
        a.factor().unwrap().solve_in_place(&mut b);
        for (u, v) in b.iter().zip(&x) {
            assert!((u - v).abs() < 1e-13);
        }
    }

    #[test]
    fn transpose_apply_matches_explicit_transpose() {
        let n = 6;
        let mut a = Tridiag::zeros(n);
        for i in 0..n {
            a.diag[i] = i as f64 + 1.0;
            if i + 1 < n {
                a.upper[i] = 0.5 * i as f64;
                a.lower[i] = -(i as f64) - 2.0;
            }
        }
        let x: Vec<f64> = (0..n).map(|i| i as f64 - 2.5).collect();
        let mut y1 = vec![0.0; n];
        let mut y2 = vec![0.0; n];
        a.apply_transpose(&x, &mut y1);
        a.transpose().apply(&x, &mut y2);
        assert_eq!(y1, y2);
    }

    #[test]
    fn log_sum_matches_direct_sum_and_survives_overflow() {
        let mut s = LogSum::new();
        for (l, v) in [(0.0, 1.0), (1.0, 2.0), (-3.0, 0.5)] {
            s.add(l, v);
        }
        let direct = 1.0 + 2.0 * 1.0_f64.exp() + 0.5 * (-3.0_f64).exp();
        assert!((s.total().value() - direct).abs() < 1e-14 * direct);

        let mut big = LogSum::new();
        big.add(1000.0, 1.0);
        big.add(1000.0, 1.0);
        assert!((big.total().log - (1000.0 + 2.0_f64.ln())).abs() < 1e-12);
        assert!(LogSum::new().total().is_zero());
    }

    #[test]
    fn log_value_ratio_conventions() {
        assert_eq!(LogValue::ZERO.log_ratio(LogValue::ZERO), f64::NEG_INFINITY);
        assert_eq!(
            LogValue::from_value(1.0).log_ratio(LogValue::ZERO),
            f64::INFINITY
        );
        let r = LogValue::from_value(6.0).log_ratio(LogValue::from_value(3.0));
        assert!((r - 2.0_f64.ln()).abs() < 1e-15);
    }
}
