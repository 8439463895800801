//! Double-double arithmetic: an unevaluated sum `hi + lo` of two `f64`s with
//! about 106 significant bits.
//!
//! Only used as a high-precision reference, for example by the finite
//! difference side of [`crate::optim::grad_check`]. Arithmetic, `sqrt`, `exp`,
//! `ln`, `exp_m1`, `tanh` and `powi` carry full precision; trigonometric and
//! other rarely needed functions fall back to `f64`.

use std::cmp::Ordering;
use std::fmt;
use std::iter::Sum;
use std::num::FpCategory;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Rem, RemAssign, Sub, SubAssign};

use num_traits::{Float, FromPrimitive, Num, NumCast, One, ToPrimitive, Zero};

use crate::scalar::Scalar;

#[derive(Clone, Copy, Default)]
pub struct DoubleDouble {
    hi: f64,
    lo: f64,
}

const LN2: DoubleDouble = DoubleDouble {
    hi: std::f64::consts::LN_2,
    lo: 2.319_046_813_846_299_6e-17,
};

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[inline]
fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl DoubleDouble {
    pub const fn from_f64(x: f64) -> Self {
        Self { hi: x, lo: 0.0 }
    }

    pub fn hi(self) -> f64 {
        self.hi
    }

    pub fn lo(self) -> f64 {
        self.lo
    }

    fn norm(hi: f64, lo: f64) -> Self {
        if !hi.is_finite() {
            return Self::from_f64(hi);
        }
        let (hi, lo) = quick_two_sum(hi, lo);
        Self { hi, lo }
    }

    /// Multiplies by `2^k` exactly (barring overflow or underflow).
    fn ldexp(self, k: i32) -> Self {
        // split so that neither factor overflows on its own
        let half = k / 2;
        let a = 2f64.powi(half);
        let b = 2f64.powi(k - half);
        Self {
            hi: self.hi * a * b,
            lo: self.lo * a * b,
        }
    }

    /// `exp(r) - 1` for `|r| <= ln2 / 2`.
    fn expm1_reduced(r: Self) -> Self {
        const SQUARINGS: i32 = 10;
        let s = r.ldexp(-SQUARINGS);
        // Taylor series of exp(s) - 1; |s| < 4e-4 so 12 terms reach 1e-40
        let mut term = s;
        let mut sum = s;
        for n in 2..=12 {
            term = term * s / Self::from_f64(n as f64);
            sum += term;
        }
        // exp(2s) - 1 = e(e + 2) with e = exp(s) - 1
        for _ in 0..SQUARINGS {
            sum = sum * (sum + Self::from_f64(2.0));
        }
        sum
    }

    /// Splits `x = k·ln2 + r` with `|r| <= ln2 / 2`.
    fn reduce(self) -> (i32, Self) {
        let k = (self.hi / LN2.hi).round();
        (k as i32, self - LN2 * Self::from_f64(k))
    }
}

impl PartialEq for DoubleDouble {
    fn eq(&self, other: &Self) -> bool {
        self.hi == other.hi && self.lo == other.lo
    }
}

impl PartialOrd for DoubleDouble {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match self.hi.partial_cmp(&other.hi) {
            Some(Ordering::Equal) => self.lo.partial_cmp(&other.lo),
            o => o,
        }
    }
}

impl fmt::Debug for DoubleDouble {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DoubleDouble({:e} + {:e})", self.hi, self.lo)
    }
}

impl fmt::Display for DoubleDouble {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&(self.hi + self.lo), f)
    }
}

impl Neg for DoubleDouble {
    type Output = Self;
    fn neg(self) -> Self {
        Self {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Add for DoubleDouble {
    type Output = Self;
    fn add(self, b: Self) -> Self {
        let (s, e) = two_sum(self.hi, b.hi);
        let (t, f) = two_sum(self.lo, b.lo);
        let (s, e) = quick_two_sum(s, e + t);
        Self::norm(s, e + f)
    }
}

impl Sub for DoubleDouble {
    type Output = Self;
    fn sub(self, b: Self) -> Self {
        self + (-b)
    }
}

impl Mul for DoubleDouble {
    type Output = Self;
    fn mul(self, b: Self) -> Self {
        let (p, e) = two_prod(self.hi, b.hi);
        Self::norm(p, e + (self.hi * b.lo + self.lo * b.hi))
    }
}

impl Div for DoubleDouble {
    type Output = Self;
    fn div(self, b: Self) -> Self {
        let q1 = self.hi / b.hi;
        if !q1.is_finite() {
            return Self::from_f64(q1);
        }
        let r = self - b * Self::from_f64(q1);
        let q2 = r.hi / b.hi;
        let r = r - b * Self::from_f64(q2);
        let q3 = r.hi / b.hi;
        Self::norm(q1, q2) + Self::from_f64(q3)
    }
}

impl Rem for DoubleDouble {
    type Output = Self;
    fn rem(self, b: Self) -> Self {
        self - (self / b).trunc() * b
    }
}

macro_rules! assign_ops {
    ($($tr:ident $m:ident $op:tt),*) => {$(
        impl $tr for DoubleDouble {
            fn $m(&mut self, b: Self) {
                *self = *self $op b;
            }
        }
    )*};
}
assign_ops!(AddAssign add_assign +, SubAssign sub_assign -, MulAssign mul_assign *, DivAssign div_assign /, RemAssign rem_assign %);

impl Sum for DoubleDouble {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::zero(), |a, b| a + b)
    }
}

impl Zero for DoubleDouble {
    fn zero() -> Self {
        Self::from_f64(0.0)
    }
    fn is_zero(&self) -> bool {
        self.hi == 0.0
    }
}

impl One for DoubleDouble {
    fn one() -> Self {
        Self::from_f64(1.0)
    }
}

impl Num for DoubleDouble {
    type FromStrRadixErr = <f64 as Num>::FromStrRadixErr;
    fn from_str_radix(s: &str, radix: u32) -> Result<Self, Self::FromStrRadixErr> {
        f64::from_str_radix(s, radix).map(Self::from_f64)
    }
}

impl ToPrimitive for DoubleDouble {
    fn to_i64(&self) -> Option<i64> {
        self.trunc().hi.to_i64()
    }
    fn to_u64(&self) -> Option<u64> {
        self.trunc().hi.to_u64()
    }
    fn to_f64(&self) -> Option<f64> {
        Some(self.hi + self.lo)
    }
}

impl FromPrimitive for DoubleDouble {
    fn from_i64(n: i64) -> Option<Self> {
        let hi = n as f64;
        Some(Self::norm(hi, (n - hi as i64) as f64))
    }
    fn from_u64(n: u64) -> Option<Self> {
        let hi = n as f64;
        Some(Self::norm(hi, n.wrapping_sub(hi as u64) as i64 as f64))
    }
    fn from_f64(x: f64) -> Option<Self> {
        Some(Self::from_f64(x))
    }
}

impl NumCast for DoubleDouble {
    fn from<T: ToPrimitive>(n: T) -> Option<Self> {
        n.to_f64().map(Self::from_f64)
    }
}

/// Applies an `f64` function to the leading part.
fn via_f64(x: DoubleDouble, f: impl Fn(f64) -> f64) -> DoubleDouble {
    DoubleDouble::from_f64(f(x.hi + x.lo))
}

impl Float for DoubleDouble {
    fn nan() -> Self {
        Self::from_f64(f64::NAN)
    }
    fn infinity() -> Self {
        Self::from_f64(f64::INFINITY)
    }
    fn neg_infinity() -> Self {
        Self::from_f64(f64::NEG_INFINITY)
    }
    fn neg_zero() -> Self {
        Self::from_f64(-0.0)
    }
    fn min_value() -> Self {
        Self::from_f64(f64::MIN)
    }
    fn min_positive_value() -> Self {
        Self::from_f64(f64::MIN_POSITIVE)
    }
    fn epsilon() -> Self {
        Self::from_f64(f64::EPSILON * f64::EPSILON)
    }
    fn max_value() -> Self {
        Self::from_f64(f64::MAX)
    }
    fn is_nan(self) -> bool {
        self.hi.is_nan()
    }
    fn is_infinite(self) -> bool {
        self.hi.is_infinite()
    }
    fn is_finite(self) -> bool {
        self.hi.is_finite()
    }
    fn is_normal(self) -> bool {
        self.hi.is_normal()
    }
    fn classify(self) -> FpCategory {
        self.hi.classify()
    }
    fn floor(self) -> Self {
        let hi = self.hi.floor();
        if hi == self.hi {
            Self::norm(hi, self.lo.floor())
        } else {
            Self::from_f64(hi)
        }
    }
    fn ceil(self) -> Self {
        -(-self).floor()
    }
    fn round(self) -> Self {
        (self + Self::from_f64(0.5)).floor()
    }
    fn trunc(self) -> Self {
        if self.hi >= 0.0 {
            self.floor()
        } else {
            self.ceil()
        }
    }
    fn fract(self) -> Self {
        self - self.trunc()
    }
    fn abs(self) -> Self {
        if self.hi < 0.0 {
            -self
        } else {
            self
        }
    }
    fn signum(self) -> Self {
        Self::from_f64(self.hi.signum())
    }
    fn is_sign_positive(self) -> bool {
        self.hi.is_sign_positive()
    }
    fn is_sign_negative(self) -> bool {
        self.hi.is_sign_negative()
    }
    fn mul_add(self, a: Self, b: Self) -> Self {
        self * a + b
    }
    fn recip(self) -> Self {
        Self::one() / self
    }
    fn powi(self, n: i32) -> Self {
        let mut base = if n < 0 { self.recip() } else { self };
        let mut e = n.unsigned_abs();
        let mut acc = Self::one();
        while e > 0 {
            if e & 1 == 1 {
                acc *= base;
            }
            base = base * base;
            e >>= 1;
        }
        acc
    }
    fn powf(self, n: Self) -> Self {
        (n * self.ln()).exp()
    }
    fn sqrt(self) -> Self {
        if self.hi <= 0.0 {
            return Self::from_f64(self.hi.sqrt());
        }
        let q = Self::from_f64(self.hi.sqrt());
        q + (self - q * q) / (q + q)
    }
    fn exp(self) -> Self {
        if self.hi > 709.8 {
            return Self::infinity();
        }
        if self.hi < -745.2 {
            return Self::zero();
        }
        let (k, r) = self.reduce();
        (Self::expm1_reduced(r) + Self::one()).ldexp(k)
    }
    fn exp2(self) -> Self {
        (self * LN2).exp()
    }
    fn ln(self) -> Self {
        if self.hi <= 0.0 || !self.hi.is_finite() {
            return Self::from_f64(self.hi.ln());
        }
        // Newton on exp(y) = x, each step doubles the correct digits
        let mut y = Self::from_f64(self.hi.ln());
        for _ in 0..2 {
            y = y + self * (-y).exp() - Self::one();
        }
        y
    }
    fn log(self, base: Self) -> Self {
        self.ln() / base.ln()
    }
    fn log2(self) -> Self {
        self.ln() / LN2
    }
    fn log10(self) -> Self {
        self.ln() / Self::from_f64(10.0).ln()
    }
    fn max(self, other: Self) -> Self {
        if self.is_nan() || other > self {
            other
        } else {
            self
        }
    }
    fn min(self, other: Self) -> Self {
        if self.is_nan() || other < self {
            other
        } else {
            self
        }
    }
    fn abs_sub(self, other: Self) -> Self {
        if self > other {
            self - other
        } else {
            Self::zero()
        }
    }
    fn cbrt(self) -> Self {
        via_f64(self, f64::cbrt)
    }
    fn hypot(self, other: Self) -> Self {
        (self * self + other * other).sqrt()
    }
    fn sin(self) -> Self {
        via_f64(self, f64::sin)
    }
    fn cos(self) -> Self {
        via_f64(self, f64::cos)
    }
    fn tan(self) -> Self {
        via_f64(self, f64::tan)
    }
    fn asin(self) -> Self {
        via_f64(self, f64::asin)
    }
    fn acos(self) -> Self {
        via_f64(self, f64::acos)
    }
    fn atan(self) -> Self {
        via_f64(self, f64::atan)
    }
    fn atan2(self, other: Self) -> Self {
        Self::from_f64((self.hi + self.lo).atan2(other.hi + other.lo))
    }
    fn sin_cos(self) -> (Self, Self) {
        (self.sin(), self.cos())
    }
    fn exp_m1(self) -> Self {
        if self.hi.abs() <= 0.5 * LN2.hi {
            Self::expm1_reduced(self)
        } else {
            self.exp() - Self::one()
        }
    }
    fn ln_1p(self) -> Self {
        (self + Self::one()).ln()
    }
    fn sinh(self) -> Self {
        let e = self.exp();
        (e - e.recip()) / Self::from_f64(2.0)
    }
    fn cosh(self) -> Self {
        let e = self.exp();
        (e + e.recip()) / Self::from_f64(2.0)
    }
    fn tanh(self) -> Self {
        if self.hi.abs() > 40.0 {
            return Self::from_f64(self.hi.signum());
        }
        // tanh(x) = -expm1(-2|x|) / (2 + expm1(-2|x|)), sign restored
        let t = (self.abs() * Self::from_f64(-2.0)).exp_m1();
        let r = -t / (t + Self::from_f64(2.0));
        if self.hi < 0.0 {
            -r
        } else {
            r
        }
    }
    fn asinh(self) -> Self {
        via_f64(self, f64::asinh)
    }
    fn acosh(self) -> Self {
        via_f64(self, f64::acosh)
    }
    fn atanh(self) -> Self {
        via_f64(self, f64::atanh)
    }
    fn integer_decode(self) -> (u64, i16, i8) {
        self.hi.integer_decode()
    }
}

impl Scalar for DoubleDouble {}

#[cfg(test)]
mod tests {
    use super::*;

    type D = DoubleDouble;

    fn d(x: f64) -> D {
        D::from_f64(x)
    }

    /// |a - b| measured in double-double.
    fn gap(a: D, b: D) -> f64 {
        (a - b).abs().to_f64().unwrap()
    }

    #[test]
    fn one_third_times_three() {
        let third = d(1.0) / d(3.0);
        assert!(gap(third * d(3.0), d(1.0)) < 1e-31);
        assert!(third.lo() != 0.0);
    }

    #[test]
    fn addition_keeps_the_low_part() {
        let x = d(1.0) + d(1e-20);
        assert_eq!(x.hi(), 1.0);
        assert_eq!(x.lo(), 1e-20);
        assert_eq!((x - d(1.0)).to_f64().unwrap(), 1e-20);
    }

    #[test]
    fn sqrt_squares_back() {
        for x in [2.0, 3.0, 0.5, 1e-10, 12345.678] {
            let r = d(x).sqrt();
            assert!(gap(r * r, d(x)) < 1e-30 * x, "{x}");
        }
    }

    #[test]
    fn exp_ln_round_trip() {
        for x in [-30.0, -2.5, -1e-3, 1e-8, 0.3, 1.0, 7.25, 100.0] {
            let y = d(x).exp().ln();
            assert!(gap(y, d(x)) < 1e-30 * x.abs().max(1.0), "{x}: {y:?}");
        }
    }

    #[test]
    fn known_constants() {
        // e = 2.718281828459045 + 1.4456468917292502e-16
        let e = d(1.0).exp();
        assert_eq!(e.hi(), std::f64::consts::E);
        assert!((e.lo() - 1.445_646_891_729_250_2e-16).abs() < 1e-31);
        let l = d(2.0).ln();
        assert_eq!(l.hi(), LN2.hi);
        assert!((l.lo() - LN2.lo).abs() < 1e-31);
    }

    #[test]
    fn exp_of_sum_is_product() {
        let (a, b) = (d(0.7), d(-1.9));
        assert!(gap((a + b).exp(), a.exp() * b.exp()) < 1e-30);
    }

    #[test]
    fn tanh_matches_exp_form_and_is_odd() {
        for x in [1e-9, 0.01, 0.4, 1.3, 5.0] {
            let t = d(x).tanh();
            let e = (d(2.0 * x)).exp();
            assert!(gap(t, (e - d(1.0)) / (e + d(1.0))) < 1e-30, "{x}");
            assert_eq!(d(-x).tanh(), -t);
        }
        // small argument: tanh x = x - x³/3 + ...
        let x = d(1e-9);
        assert!(gap(x.tanh(), x - x * x * x / d(3.0)) < 1e-40);
    }

    #[test]
    fn ordering_and_rounding() {
        assert!(d(1.0) + d(1e-20) > d(1.0));
        assert_eq!(d(2.5).floor(), d(2.0));
        assert_eq!(d(-2.5).ceil(), d(-2.0));
        assert_eq!((d(3.0) - d(1e-20)).floor(), d(2.0));
        assert_eq!(d(3.0).powi(-2) * d(9.0), d(1.0));
        assert_eq!(d(1.0).max(D::nan()), d(1.0));
    }
}
