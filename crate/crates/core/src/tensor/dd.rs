//! Double-double arithmetic (an unevaluated sum `hi + lo` of two `f64`s,
//! about 32 significant digits).
//!
//! Used as the evaluation type of finite-difference oracles so that their
//! rounding noise sits far below the tolerances being audited. Arithmetic,
//! `sqrt`, `exp`, `ln` and `erf` are carried at full precision; the
//! remaining `Float` methods (trigonometry and friends) are evaluated in
//! `f64` and are not used by the engine.

use std::cmp::Ordering;
use std::fmt;
use std::num::FpCategory;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Rem, RemAssign, Sub, SubAssign};

use num_traits::{Float, FromPrimitive, Num, NumCast, One, ToPrimitive, Zero};

use super::Real;

#[derive(Clone, Copy, Default, PartialEq)]
pub struct DoubleDouble {
    hi: f64,
    lo: f64,
}

const LN2: DoubleDouble = DoubleDouble::from_parts(std::f64::consts::LN_2, 2.3190468138462996e-17);
const SQRT_PI: DoubleDouble = DoubleDouble::from_parts(1.772453850905516, -7.666586499825799e-17);
const TWO_OVER_SQRT_PI: DoubleDouble =
    DoubleDouble::from_parts(std::f64::consts::FRAC_2_SQRT_PI, 1.533545961316588e-17);

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
    pub const fn from_parts(hi: f64, lo: f64) -> Self {
        DoubleDouble { hi, lo }
    }

    pub const fn from_f64(x: f64) -> Self {
        DoubleDouble { hi: x, lo: 0.0 }
    }

    pub fn hi(self) -> f64 {
        self.hi
    }

    pub fn lo(self) -> f64 {
        self.lo
    }

    fn normalized(hi: f64, lo: f64) -> Self {
        if !hi.is_finite() {
            return DoubleDouble { hi, lo: 0.0 };
        }
        let (h, l) = quick_two_sum(hi, lo);
        DoubleDouble { hi: h, lo: l }
    }

    /// Exact scaling by a power of two.
    fn ldexp(self, k: i32) -> Self {
        let f = 2f64.powi(k);
        DoubleDouble { hi: self.hi * f, lo: self.lo * f }
    }

    fn dd_exp(self) -> Self {
        if self.hi > 709.7 {
            return Self::from_f64(f64::INFINITY);
        }
        if self.hi < -745.0 {
            return Self::zero();
        }
        if self.hi == 0.0 && self.lo == 0.0 {
            return Self::one();
        }
        let k = (self.hi / LN2.hi).round();
        let r = (self - LN2 * Self::from_f64(k)).ldexp(-10);
        // Taylor series of exp(r) - 1 for |r| < 4e-4
        let mut term = r;
        let mut sum = r;
        for n in 2..=14 {
            term = term * r / Self::from_f64(n as f64);
            sum += term;
            if term.hi.abs() < 1e-36 {
                break;
            }
        }
        // (1 + s)^2 - 1 = s (2 + s), repeated ten times
        for _ in 0..10 {
            sum = sum * (sum + Self::from_f64(2.0));
        }
        (sum + Self::one()).ldexp(k as i32)
    }

    fn dd_ln(self) -> Self {
        if self.hi <= 0.0 || self.hi.is_nan() {
            return Self::from_f64(if self.hi == 0.0 { f64::NEG_INFINITY } else { f64::NAN });
        }
        if self.hi.is_infinite() {
            return self;
        }
        // Newton on exp: y <- y + x·exp(-y) - 1
        let mut y = Self::from_f64(self.hi.ln());
        for _ in 0..2 {
            y = y + self * (-y).dd_exp() - Self::one();
        }
        y
    }

    fn dd_sqrt(self) -> Self {
        if self.hi <= 0.0 {
            return Self::from_f64(self.hi.sqrt());
        }
        let a = self.hi.sqrt();
        let y = Self::from_f64(a);
        let (p, e) = two_prod(a, a);
        let resid = (self - Self::normalized(p, e)).hi;
        y + Self::from_f64(resid / (2.0 * a))
    }

    fn dd_erf(self) -> Self {
        let ax = self.abs();
        if ax.hi == 0.0 {
            return self;
        }
        let r = if ax.hi < 5.0 {
            // 2/√π Σ (-1)^n x^(2n+1) / (n! (2n+1))
            let x2 = ax * ax;
            let mut power = ax;
            let mut sum = ax;
            let mut n = 1.0;
            loop {
                power = -(power * x2) / Self::from_f64(n);
                let term = power / Self::from_f64(2.0 * n + 1.0);
                sum += term;
                if term.hi.abs() < 1e-34 * sum.hi.abs() {
                    break;
                }
                n += 1.0;
            }
            sum * TWO_OVER_SQRT_PI
        } else if ax.hi < 27.0 {
            // erfc(x) = exp(-x²) / (√π · K), K = x + (1/2)/(x + 1/(x + (3/2)/(x + ...)))
            let mut k = ax;
            for n in (1..=120).rev() {
                k = ax + Self::from_f64(n as f64 * 0.5) / k;
            }
            Self::one() - (-(ax * ax)).dd_exp() / (SQRT_PI * k)
        } else {
            Self::one()
        };
        if self.hi < 0.0 {
            -r
        } else {
            r
        }
    }
}

impl fmt::Debug for DoubleDouble {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:e}{:+e}", self.hi, self.lo)
    }
}

impl fmt::Display for DoubleDouble {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&(self.hi + self.lo), f)
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

impl Neg for DoubleDouble {
    type Output = Self;
    fn neg(self) -> Self {
        DoubleDouble { hi: -self.hi, lo: -self.lo }
    }
}

impl Add for DoubleDouble {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        let (s, e) = two_sum(self.hi, o.hi);
        if !s.is_finite() {
            return Self::from_f64(s);
        }
        let (t, f) = two_sum(self.lo, o.lo);
        let (s, e) = quick_two_sum(s, e + t);
        Self::normalized(s, e + f)
    }
}

impl Sub for DoubleDouble {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        self + (-o)
    }
}

impl Mul for DoubleDouble {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let (p, e) = two_prod(self.hi, o.hi);
        if !p.is_finite() {
            return Self::from_f64(p);
        }
        Self::normalized(p, e + (self.hi * o.lo + self.lo * o.hi))
    }
}

impl Div for DoubleDouble {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let q1 = self.hi / o.hi;
        if !q1.is_finite() || o.hi == 0.0 {
            return Self::from_f64(q1);
        }
        let r = self - o * Self::from_f64(q1);
        let q2 = r.hi / o.hi;
        let r = r - o * Self::from_f64(q2);
        let q3 = r.hi / o.hi;
        let (q, e) = quick_two_sum(q1, q2);
        Self::normalized(q, e) + Self::from_f64(q3)
    }
}

impl Rem for DoubleDouble {
    type Output = Self;
    fn rem(self, o: Self) -> Self {
        self - (self / o).trunc() * o
    }
}

macro_rules! assign_ops {
    ($($tr:ident $m:ident $op:tt),*) => {$(
        impl $tr for DoubleDouble {
            fn $m(&mut self, o: Self) {
                *self = *self $op o;
            }
        }
    )*};
}
assign_ops!(AddAssign add_assign +, SubAssign sub_assign -, MulAssign mul_assign *, DivAssign div_assign /, RemAssign rem_assign %);

impl std::iter::Sum for DoubleDouble {
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
    type FromStrRadixErr = num_traits::ParseFloatError;
    fn from_str_radix(s: &str, radix: u32) -> Result<Self, Self::FromStrRadixErr> {
        f64::from_str_radix(s, radix).map(Self::from_f64)
    }
}

impl ToPrimitive for DoubleDouble {
    fn to_i64(&self) -> Option<i64> {
        (self.hi + self.lo).to_i64()
    }
    fn to_u64(&self) -> Option<u64> {
        (self.hi + self.lo).to_u64()
    }
    fn to_f64(&self) -> Option<f64> {
        Some(self.hi + self.lo)
    }
}

impl FromPrimitive for DoubleDouble {
    fn from_i64(n: i64) -> Option<Self> {
        let hi = n as f64;
        let lo = (n - hi as i64) as f64;
        Some(Self::normalized(hi, lo))
    }
    fn from_u64(n: u64) -> Option<Self> {
        let hi = n as f64;
        let lo = (n as i128 - hi as i128) as f64;
        Some(Self::normalized(hi, lo))
    }
    fn from_f64(x: f64) -> Option<Self> {
        Some(DoubleDouble::from_f64(x))
    }
}

impl NumCast for DoubleDouble {
    fn from<N: ToPrimitive>(n: N) -> Option<Self> {
        n.to_f64().map(Self::from_f64)
    }
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
        let h = self.hi.floor();
        if h == self.hi {
            Self::normalized(h, self.lo.floor())
        } else {
            Self::from_f64(h)
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
            base *= base;
            e >>= 1;
        }
        acc
    }
    fn powf(self, n: Self) -> Self {
        (n * self.ln()).exp()
    }
    fn sqrt(self) -> Self {
        self.dd_sqrt()
    }
    fn exp(self) -> Self {
        self.dd_exp()
    }
    fn exp2(self) -> Self {
        (self * LN2).exp()
    }
    fn ln(self) -> Self {
        self.dd_ln()
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
    fn max(self, o: Self) -> Self {
        if self.is_nan() || o > self {
            o
        } else {
            self
        }
    }
    fn min(self, o: Self) -> Self {
        if self.is_nan() || o < self {
            o
        } else {
            self
        }
    }
    fn abs_sub(self, o: Self) -> Self {
        if self > o {
            self - o
        } else {
            Self::zero()
        }
    }
    fn cbrt(self) -> Self {
        Self::from_f64(self.hi.cbrt())
    }
    fn hypot(self, o: Self) -> Self {
        (self * self + o * o).sqrt()
    }
    fn sin(self) -> Self {
        Self::from_f64(self.hi.sin())
    }
    fn cos(self) -> Self {
        Self::from_f64(self.hi.cos())
    }
    fn tan(self) -> Self {
        Self::from_f64(self.hi.tan())
    }
    fn asin(self) -> Self {
        Self::from_f64(self.hi.asin())
    }
    fn acos(self) -> Self {
        Self::from_f64(self.hi.acos())
    }
    fn atan(self) -> Self {
        Self::from_f64(self.hi.atan())
    }
    fn atan2(self, o: Self) -> Self {
        Self::from_f64(self.hi.atan2(o.hi))
    }
    fn sin_cos(self) -> (Self, Self) {
        (self.sin(), self.cos())
    }
    fn exp_m1(self) -> Self {
        self.exp() - Self::one()
    }
    fn ln_1p(self) -> Self {
        (self + Self::one()).ln()
    }
    fn sinh(self) -> Self {
        (self.exp() - (-self).exp()) / Self::from_f64(2.0)
    }
    fn cosh(self) -> Self {
        (self.exp() + (-self).exp()) / Self::from_f64(2.0)
    }
    fn tanh(self) -> Self {
        let e = (self * Self::from_f64(2.0)).exp();
        (e - Self::one()) / (e + Self::one())
    }
    fn asinh(self) -> Self {
        Self::from_f64(self.hi.asinh())
    }
    fn acosh(self) -> Self {
        Self::from_f64(self.hi.acosh())
    }
    fn atanh(self) -> Self {
        Self::from_f64(self.hi.atanh())
    }
    fn integer_decode(self) -> (u64, i16, i8) {
        self.hi.integer_decode()
    }
}

impl Real for DoubleDouble {
    const NAME: &'static str = "f64x2";

    fn erf(self) -> Self {
        self.dd_erf()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type Dd = DoubleDouble;

    fn close(a: Dd, b: Dd, rel: f64) -> bool {
        let d = (a - b).abs();
        (d.hi / b.abs().hi.max(1e-300)) < rel
    }

    #[test]
    fn third_times_three_is_one_to_double_double_precision() {
        let third = Dd::one() / Dd::from_f64(3.0);
        let back = third * Dd::from_f64(3.0);
        assert!((back - Dd::one()).abs().hi < 1e-31);
        assert!(third.lo != 0.0);
    }

    #[test]
    fn exp_ln_round_trip() {
        for x in [-20.0, -1.3, -1e-3, 0.0, 0.7, 1.0, 5.5, 40.0] {
            let v = Dd::from_f64(x);
            let back = v.exp().ln();
            assert!((back - v).abs().hi < 1e-29 * (1.0 + x.abs()), "x={x} back={back:?}");
        }
        // e to double-double accuracy
        let e = Dd::one().exp();
        assert_eq!(e.hi, std::f64::consts::E);
        assert!((e.lo - 1.4456468917292502e-16).abs() < 1e-31);
    }

    #[test]
    fn sqrt_squares_back() {
        for x in [2.0, 0.3, 1e-8, 12345.678] {
            let v = Dd::from_f64(x);
            let r = v.sqrt();
            assert!(close(r * r, v, 1e-30));
        }
    }

    #[test]
    fn erf_agrees_with_libm_and_is_continuous_across_branches() {
        for x in [-3.0, -0.5, 0.1, 0.9, 2.2, 4.9, 5.1, 6.0] {
            let v = Dd::from_f64(x).erf();
            assert!((v.hi - libm::erf(x)).abs() < 4e-16, "x={x}");
        }
        let a = Dd::from_f64(5.0 - 1e-12).erf();
        let b = Dd::from_f64(5.0 + 1e-12).erf();
        // slope at 5 is 2/√π·e^-25 ≈ 1.6e-11
        assert!((b - a).hi.abs() < 1e-22);
        // erf(1) to 30 digits: 0.842700792949714869341220635082609
        let one = Dd::one().erf();
        let want = Dd::from_parts(0.8427007929497149, -2.4801011789118602e-17);
        assert!((one - want).abs().hi < 1e-30, "{one:?}");
    }

    #[test]
    fn ordering_uses_low_word() {
        let a = Dd::from_parts(1.0, 1e-20);
        let b = Dd::from_parts(1.0, 2e-20);
        assert!(a < b);
        assert_eq!(a.max(b), b);
    }
}
