//! Identifiers and small value types shared across modules.

use std::fmt;

use num_bigint::BigInt;
use num_rational::BigRational;
use serde::{Deserialize, Serialize};

/// An account on the simulated chain. One account per agent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentId(pub u32);

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "agent-{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(pub u64);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "task-{}", self.0)
    }
}

/// An evaluation score in `[0, 1]`, stored in parts per million.
///
/// Scores travel through commitments and on-chain threshold rules, so they
/// are kept on an integer grid: every rule (median, the 0.5 deviation cut,
/// proportional payouts) is then exact in rational arithmetic.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Score(u32);

impl Score {
    pub const SCALE: u32 = 1_000_000;
    pub const ZERO: Score = Score(0);
    pub const ONE: Score = Score(Self::SCALE);

    /// Builds a score from parts per million, saturating at 1.0.
    pub fn from_ppm(ppm: u32) -> Self {
        Score(ppm.min(Self::SCALE))
    }

    /// Rounds a real value onto the ppm grid. Non-finite input maps to 0.
    pub fn from_f64(x: f64) -> Self {
        if !x.is_finite() {
            return Score::ZERO;
        }
        let clamped = x.clamp(0.0, 1.0);
        Score((clamped * f64::from(Self::SCALE)).round() as u32)
    }

    pub fn ppm(self) -> u32 {
        self.0
    }

    pub fn to_f64(self) -> f64 {
        f64::from(self.0) / f64::from(Self::SCALE)
    }

    pub fn to_rational(self) -> BigRational {
        BigRational::new(BigInt::from(self.0), BigInt::from(Self::SCALE))
    }
}

impl fmt::Display for Score {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6}", self.to_f64())
    }
}

/// Rational numbers as they appear in configuration files: `"97/100"` or an
/// integer such as `"1"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub const fn new(num: u64, den: u64) -> Self {
        Ratio { num, den }
    }

    pub fn to_big(self) -> BigRational {
        BigRational::new(BigInt::from(self.num), BigInt::from(self.den))
    }

    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// `floor(value * self)` in exact integer arithmetic.
    pub fn floor_mul(self, value: u64) -> u64 {
        ((u128::from(value) * u128::from(self.num)) / u128::from(self.den)) as u64
    }

    pub fn is_unit_interval(self) -> bool {
        self.num <= self.den
    }
}

impl TryFrom<String> for Ratio {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Ratio> for String {
    fn from(r: Ratio) -> String {
        r.to_string()
    }
}

impl std::str::FromStr for Ratio {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let (num, den) = match s.split_once('/') {
            Some((n, d)) => (n.trim(), d.trim()),
            None => (s, "1"),
        };
        let num: u64 = num.parse().map_err(|_| format!("invalid ratio numerator in {s:?}"))?;
        let den: u64 = den.parse().map_err(|_| format!("invalid ratio denominator in {s:?}"))?;
        if den == 0 {
            return Err(format!("zero denominator in {s:?}"));
        }
        Ok(Ratio { num, den })
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

/// Exact rational that serializes as `"num/den"`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Rational(pub BigRational);

impl Rational {
    pub fn zero() -> Self {
        Rational(BigRational::from_integer(BigInt::from(0)))
    }

    pub fn to_f64(&self) -> f64 {
        use num_traits::ToPrimitive;
        self.0.to_f64().unwrap_or(f64::NAN)
    }
}

impl From<BigRational> for Rational {
    fn from(r: BigRational) -> Self {
        Rational(r)
    }
}

impl fmt::Display for Rational {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.0.numer(), self.0.denom())
    }
}

impl Serialize for Rational {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Rational {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let (n, den) = s
            .split_once('/')
            .ok_or_else(|| serde::de::Error::custom("expected num/den"))?;
        let n: BigInt = n.parse().map_err(serde::de::Error::custom)?;
        let den: BigInt = den.parse().map_err(serde::de::Error::custom)?;
        if den == BigInt::from(0) {
            return Err(serde::de::Error::custom("zero denominator"));
        }
        Ok(Rational(BigRational::new(n, den)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_grid() {
        assert_eq!(Score::from_f64(0.85).ppm(), 850_000);
        assert_eq!(Score::from_f64(1.7), Score::ONE);
        assert_eq!(Score::from_f64(-0.2), Score::ZERO);
        assert_eq!(Score::from_f64(f64::NAN), Score::ZERO);
    }

    #[test]
    fn ratio_parsing() {
        assert_eq!("97/100".parse::<Ratio>().unwrap(), Ratio::new(97, 100));
        assert_eq!("1".parse::<Ratio>().unwrap(), Ratio::new(1, 1));
        assert!("1/0".parse::<Ratio>().is_err());
        assert_eq!(Ratio::new(7, 100).floor_mul(1_000), 70);
        assert_eq!(Ratio::new(1, 3).floor_mul(10), 3);
    }

    #[test]
    fn rational_serde() {
        let r = Rational(BigRational::new(BigInt::from(6), BigInt::from(-4)));
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(json, "\"-3/2\"");
        assert_eq!(serde_json::from_str::<Rational>(&json).unwrap(), r);
        assert!(serde_json::from_str::<Rational>("\"1/0\"").is_err());
    }
}
