//! Exact arithmetic shared by every other module.
//!
//! All timeout quantities (`srtt`, `rttvar`, `rto`, the smoothing weights,
//! steady-state bounds) are rationals and every comparison in this crate is
//! exact; there is no floating-point fast path. Bound checks run the
//! smoothing recursions a couple hundred steps deep, which pushes
//! denominators toward 8^200, so the representation is arbitrary-precision
//! throughout.
//!
//! [`ExtNat`] is the naturals extended with a single infinity. Queue delays
//! only ever need finite tick counts, their sums, and "never expires", so one
//! absorbing infinity is enough.

use std::cmp::Ordering;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::str::FromStr;

use num::bigint::BigInt;
use num::rational::BigRational;
use num::{One, Signed, Zero};
use serde::de::Visitor;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// An exact rational, stored reduced with a positive denominator.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Rational(BigRational);

impl Rational {
    /// Builds `numer/denom`, reducing the fraction.
    ///
    /// Panics if `denom` is zero.
    pub fn new(numer: i64, denom: i64) -> Self {
        assert!(denom != 0, "zero denominator");
        Rational(BigRational::new(BigInt::from(numer), BigInt::from(denom)))
    }

    pub fn from_integer(n: i64) -> Self {
        Rational(BigRational::from_integer(BigInt::from(n)))
    }

    pub fn from_u64(n: u64) -> Self {
        Rational(BigRational::from_integer(BigInt::from(n)))
    }

    pub fn zero() -> Self {
        Rational(BigRational::zero())
    }

    pub fn one() -> Self {
        Rational(BigRational::one())
    }

    pub fn numer(&self) -> &BigInt {
        self.0.numer()
    }

    pub fn denom(&self) -> &BigInt {
        self.0.denom()
    }

    pub fn is_zero(&self) -> bool {
        self.0.is_zero()
    }

    pub fn is_positive(&self) -> bool {
        self.0.is_positive()
    }

    pub fn is_negative(&self) -> bool {
        self.0.is_negative()
    }

    pub fn abs(&self) -> Self {
        Rational(self.0.abs())
    }

    pub fn min(self, other: Self) -> Self {
        if self <= other {
            self
        } else {
            other
        }
    }

    pub fn max(self, other: Self) -> Self {
        if self >= other {
            self
        } else {
            other
        }
    }

    /// Exact `self^exp` by binary exponentiation; `exp = 0` yields 1.
    pub fn pow(&self, exp: u64) -> Self {
        let mut result = BigRational::one();
        let mut base = self.0.clone();
        let mut e = exp;
        while e > 0 {
            if e & 1 == 1 {
                result *= &base;
            }
            e >>= 1;
            if e > 0 {
                base = &base * &base;
            }
        }
        Rational(result)
    }

    /// Decimal rendering with `sig` significant digits (round half up).
    ///
    /// Used for the optional plotting column in CSV output; the exact "p/q"
    /// form is the one that round-trips.
    pub fn decimal_string(&self, sig: u32) -> String {
        assert!(sig > 0);
        if self.0.is_zero() {
            return "0".to_string();
        }
        let neg = self.0.is_negative();
        let a = self.0.numer().abs();
        let b = self.0.denom().clone();
        let ten = BigInt::from(10);

        // Exponent e with 10^e <= a/b < 10^(e+1).
        let mut e = a.to_string().len() as i64 - b.to_string().len() as i64;
        let pow10 = |k: u64| ten.pow(k as u32);
        let ge_pow10 = |e: i64| {
            if e >= 0 {
                a >= &b * pow10(e as u64)
            } else {
                &a * pow10((-e) as u64) >= b
            }
        };
        if ge_pow10(e + 1) {
            e += 1;
        } else if !ge_pow10(e) {
            e -= 1;
        }

        // m = round(a/b * 10^(sig-1-e)) has exactly `sig` digits, except when
        // rounding carries it to 10^sig.
        let shift = sig as i64 - 1 - e;
        let (num, den) = if shift >= 0 {
            (&a * pow10(shift as u64), b)
        } else {
            (a.clone(), &b * pow10((-shift) as u64))
        };
        let (q, r) = num::Integer::div_rem(&num, &den);
        let mut m = if &r * 2 >= den { q + 1 } else { q };
        let mut e = e;
        if m == pow10(sig as u64) {
            m /= &ten;
            e += 1;
        }

        let digits = m.to_string();
        let mut s = String::new();
        if neg {
            s.push('-');
        }
        if e >= sig as i64 - 1 {
            // Integral value: pad with zeros.
            s.push_str(&digits);
            for _ in 0..(e - (sig as i64 - 1)) {
                s.push('0');
            }
        } else if e >= 0 {
            let point = (e + 1) as usize;
            s.push_str(&digits[..point]);
            let frac = digits[point..].trim_end_matches('0');
            if !frac.is_empty() {
                s.push('.');
                s.push_str(frac);
            }
        } else {
            s.push_str("0.");
            for _ in 0..(-e - 1) {
                s.push('0');
            }
            s.push_str(digits.trim_end_matches('0'));
        }
        s
    }

}

/// Exact `base^exp`, reduced.
pub fn qpow(base: &Rational, exp: u64) -> Rational {
    base.pow(exp)
}

macro_rules! rational_binop {
    ($trait:ident, $method:ident) => {
        impl $trait for Rational {
            type Output = Rational;
            fn $method(self, rhs: Rational) -> Rational {
                Rational((self.0).$method(rhs.0))
            }
        }
        impl<'a> $trait<&'a Rational> for Rational {
            type Output = Rational;
            fn $method(self, rhs: &'a Rational) -> Rational {
                Rational((self.0).$method(&rhs.0))
            }
        }
        impl<'a> $trait<Rational> for &'a Rational {
            type Output = Rational;
            fn $method(self, rhs: Rational) -> Rational {
                Rational((&self.0).$method(rhs.0))
            }
        }
        impl<'a, 'b> $trait<&'b Rational> for &'a Rational {
            type Output = Rational;
            fn $method(self, rhs: &'b Rational) -> Rational {
                Rational((&self.0).$method(&rhs.0))
            }
        }
    };
}

rational_binop!(Add, add);
rational_binop!(Sub, sub);
rational_binop!(Mul, mul);
rational_binop!(Div, div);

impl Neg for Rational {
    type Output = Rational;
    fn neg(self) -> Rational {
        Rational(-self.0)
    }
}

impl Neg for &Rational {
    type Output = Rational;
    fn neg(self) -> Rational {
        Rational(-&self.0)
    }
}

impl fmt::Display for Rational {
    /// Always "p/q", even for integers, so output parses back exactly.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.0.numer(), self.0.denom())
    }
}

impl fmt::Debug for Rational {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self)
    }
}

impl FromStr for Rational {
    type Err = Error;

    /// Accepts "p/q", a plain integer, or a decimal like "67.5".
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() {
            return Err(Error::Parse("empty rational".into()));
        }
        if let Some((n, d)) = s.split_once('/') {
            let numer: BigInt =
                n.trim().parse().map_err(|_| Error::Parse(format!("bad numerator in {s:?}")))?;
            let denom: BigInt =
                d.trim().parse().map_err(|_| Error::Parse(format!("bad denominator in {s:?}")))?;
            if denom.is_zero() {
                return Err(Error::Parse(format!("zero denominator in {s:?}")));
            }
            return Ok(Rational(BigRational::new(numer, denom)));
        }
        if let Some((int, frac)) = s.split_once('.') {
            let neg = int.trim_start().starts_with('-');
            let int_part: BigInt =
                int.parse().map_err(|_| Error::Parse(format!("bad decimal in {s:?}")))?;
            if frac.is_empty() || !frac.bytes().all(|b| b.is_ascii_digit()) {
                return Err(Error::Parse(format!("bad decimal in {s:?}")));
            }
            let frac_num: BigInt = frac.parse().unwrap();
            let scale = BigInt::from(10).pow(frac.len() as u32);
            let mut numer = int_part * &scale;
            if neg {
                numer -= frac_num;
            } else {
                numer += frac_num;
            }
            return Ok(Rational(BigRational::new(numer, scale)));
        }
        let n: BigInt = s.parse().map_err(|_| Error::Parse(format!("bad rational {s:?}")))?;
        Ok(Rational(BigRational::from_integer(n)))
    }
}

impl Serialize for Rational {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

struct RationalVisitor;

impl Visitor<'_> for RationalVisitor {
    type Value = Rational;

    fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("a rational as \"p/q\", an integer, or a decimal string")
    }

    fn visit_str<E: serde::de::Error>(self, v: &str) -> std::result::Result<Rational, E> {
        v.parse().map_err(|e| E::custom(format!("{e}")))
    }

    fn visit_u64<E: serde::de::Error>(self, v: u64) -> std::result::Result<Rational, E> {
        Ok(Rational::from_u64(v))
    }

    fn visit_i64<E: serde::de::Error>(self, v: i64) -> std::result::Result<Rational, E> {
        Ok(Rational::from_integer(v))
    }
}

impl<'de> Deserialize<'de> for Rational {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        deserializer.deserialize_any(RationalVisitor)
    }
}

/// A natural number or a single absorbing infinity.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub enum ExtNat {
    Finite(u64),
    Infinity,
}

impl ExtNat {
    pub fn is_finite(&self) -> bool {
        matches!(self, ExtNat::Finite(_))
    }

    /// Predecessor; infinity is a fixed point, zero has none.
    pub fn pred(self) -> Result<ExtNat> {
        match self {
            ExtNat::Finite(0) => {
                Err(Error::precondition("ExtNat::pred", "zero has no predecessor"))
            }
            ExtNat::Finite(n) => Ok(ExtNat::Finite(n - 1)),
            ExtNat::Infinity => Ok(ExtNat::Infinity),
        }
    }
}

impl Add for ExtNat {
    type Output = ExtNat;

    /// Infinity absorbs; finite sums must not overflow.
    fn add(self, rhs: ExtNat) -> ExtNat {
        match (self, rhs) {
            (ExtNat::Finite(a), ExtNat::Finite(b)) => {
                ExtNat::Finite(a.checked_add(b).expect("ExtNat sum overflow"))
            }
            _ => ExtNat::Infinity,
        }
    }
}

impl PartialOrd for ExtNat {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for ExtNat {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (ExtNat::Finite(a), ExtNat::Finite(b)) => a.cmp(b),
            (ExtNat::Finite(_), ExtNat::Infinity) => Ordering::Less,
            (ExtNat::Infinity, ExtNat::Finite(_)) => Ordering::Greater,
            (ExtNat::Infinity, ExtNat::Infinity) => Ordering::Equal,
        }
    }
}

impl fmt::Display for ExtNat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExtNat::Finite(n) => write!(f, "{n}"),
            ExtNat::Infinity => f.write_str("inf"),
        }
    }
}

impl FromStr for ExtNat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "inf" {
            return Ok(ExtNat::Infinity);
        }
        s.parse::<u64>()
            .map(ExtNat::Finite)
            .map_err(|_| Error::Parse(format!("bad extended natural {s:?}")))
    }
}

impl Serialize for ExtNat {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            ExtNat::Finite(n) => serializer.serialize_u64(*n),
            ExtNat::Infinity => serializer.serialize_str("inf"),
        }
    }
}

struct ExtNatVisitor;

impl Visitor<'_> for ExtNatVisitor {
    type Value = ExtNat;

    fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("a natural number or \"inf\"")
    }

    fn visit_u64<E: serde::de::Error>(self, v: u64) -> std::result::Result<ExtNat, E> {
        Ok(ExtNat::Finite(v))
    }

    fn visit_str<E: serde::de::Error>(self, v: &str) -> std::result::Result<ExtNat, E> {
        v.parse().map_err(|e| E::custom(format!("{e}")))
    }
}

impl<'de> Deserialize<'de> for ExtNat {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        deserializer.deserialize_any(ExtNatVisitor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn r(n: i64, d: i64) -> Rational {
        Rational::new(n, d)
    }

    #[test]
    fn pow_basics() {
        assert_eq!(qpow(&r(7, 8), 0), Rational::one());
        assert_eq!(qpow(&r(1, 2), 3), r(1, 8));
        assert_eq!(qpow(&r(7, 8), 6), r(117_649, 262_144));
    }

    #[test]
    fn stored_reduced() {
        let x = r(6, 8);
        assert_eq!(x, r(3, 4));
        assert_eq!(x.to_string(), "3/4");
        assert_eq!(r(-6, 8).to_string(), "-3/4");
    }

    #[test]
    fn parse_forms() {
        assert_eq!("4977361/65536".parse::<Rational>().unwrap(), r(4_977_361, 65_536));
        assert_eq!("13".parse::<Rational>().unwrap(), r(13, 1));
        assert_eq!("67.5".parse::<Rational>().unwrap(), r(135, 2));
        assert_eq!("-0.25".parse::<Rational>().unwrap(), r(-1, 4));
        assert!("1/0".parse::<Rational>().is_err());
        assert!("".parse::<Rational>().is_err());
    }

    #[test]
    fn decimal_rendering() {
        assert_eq!(r(1, 2).decimal_string(12), "0.5");
        assert_eq!(r(135, 2).decimal_string(12), "67.5");
        assert_eq!(r(1, 3).decimal_string(5), "0.33333");
        assert_eq!(r(2, 3).decimal_string(5), "0.66667");
        assert_eq!(r(-1, 8).decimal_string(12), "-0.125");
        assert_eq!(Rational::zero().decimal_string(12), "0");
        assert_eq!(r(1000, 1).decimal_string(3), "1000");
        assert_eq!(r(999, 1000).decimal_string(2), "1");
        assert_eq!(r(1, 1024).decimal_string(4), "0.0009766");
    }

    #[test]
    fn ext_nat_order_and_ops() {
        assert!(ExtNat::Finite(u64::MAX) < ExtNat::Infinity);
        assert_eq!(ExtNat::Finite(3) + ExtNat::Finite(4), ExtNat::Finite(7));
        assert_eq!(ExtNat::Infinity + ExtNat::Finite(5), ExtNat::Infinity);
        assert_eq!(ExtNat::Infinity + ExtNat::Infinity, ExtNat::Infinity);
        assert_eq!(ExtNat::Finite(1).pred().unwrap(), ExtNat::Finite(0));
        assert_eq!(ExtNat::Finite(10).pred().unwrap(), ExtNat::Finite(9));
        assert_eq!(ExtNat::Infinity.pred().unwrap(), ExtNat::Infinity);
        assert!(ExtNat::Finite(0).pred().is_err());
    }

    #[test]
    fn ext_nat_text() {
        assert_eq!(ExtNat::Infinity.to_string(), "inf");
        assert_eq!("inf".parse::<ExtNat>().unwrap(), ExtNat::Infinity);
        assert_eq!("12".parse::<ExtNat>().unwrap(), ExtNat::Finite(12));
        assert!("-1".parse::<ExtNat>().is_err());
    }

    fn arb_rational() -> impl Strategy<Value = Rational> {
        (-1000i64..1000, 1i64..200).prop_map(|(n, d)| Rational::new(n, d))
    }

    proptest! {
        #[test]
        fn add_sub_cancels(a in arb_rational(), b in arb_rational()) {
            prop_assert_eq!(&(&a + &b) - &b, a);
        }

        #[test]
        fn pow_is_multiplicative(n in 1i64..50, d in 1i64..50, m in 0u64..32, k in 0u64..32) {
            let q = Rational::new(n, d);
            prop_assert_eq!(qpow(&q, m + k), qpow(&q, m) * qpow(&q, k));
        }

        #[test]
        fn display_round_trips(a in arb_rational()) {
            prop_assert_eq!(a.to_string().parse::<Rational>().unwrap(), a);
        }

        #[test]
        fn ext_add_assoc_comm(a in 0u64..1000, b in 0u64..1000, c in 0u64..1000) {
            use ExtNat::*;
            let vals = [Finite(a), Finite(b), Finite(c), Infinity];
            for &x in &vals {
                for &y in &vals {
                    prop_assert_eq!(x + y, y + x);
                    for &z in &vals {
                        prop_assert_eq!((x + y) + z, x + (y + z));
                    }
                }
            }
        }
    }
}
