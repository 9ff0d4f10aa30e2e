//! Arithmetic in the prime field of order `2^61 - 1`.

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};

use rand::RngCore;
use serde::{Deserialize, Serialize};

/// The Mersenne prime `2^61 - 1`.
pub const MODULUS: u64 = (1 << 61) - 1;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Fp(u64);

impl Fp {
    pub const ZERO: Fp = Fp(0);
    pub const ONE: Fp = Fp(1);

    /// Reduces an arbitrary `u64` into the field.
    pub fn new(v: u64) -> Self {
        Fp(reduce64(v))
    }

    /// Accepts only canonical representatives.
    pub fn from_canonical(v: u64) -> Option<Self> {
        (v < MODULUS).then_some(Fp(v))
    }

    pub fn from_i64(v: i64) -> Self {
        if v >= 0 {
            Fp::new(v as u64)
        } else {
            -Fp::new(v.unsigned_abs())
        }
    }

    pub fn value(self) -> u64 {
        self.0
    }

    /// Uniform draw by rejection from the low 61 bits.
    pub fn random<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        loop {
            let v = rng.next_u64() & MODULUS;
            if v < MODULUS {
                return Fp(v);
            }
        }
    }

    pub fn pow(self, mut exp: u64) -> Self {
        let mut base = self;
        let mut acc = Fp::ONE;
        while exp > 0 {
            if exp & 1 == 1 {
                acc = acc * base;
            }
            base = base * base;
            exp >>= 1;
        }
        acc
    }

    /// Multiplicative inverse; `None` for zero.
    pub fn inverse(self) -> Option<Self> {
        (self.0 != 0).then(|| self.pow(MODULUS - 2))
    }
}

fn reduce64(v: u64) -> u64 {
    let folded = (v & MODULUS) + (v >> 61);
    if folded >= MODULUS {
        folded - MODULUS
    } else {
        folded
    }
}

fn reduce128(v: u128) -> u64 {
    let lo = (v as u64) & MODULUS;
    let hi = (v >> 61) as u64;
    // Operands are below 2^61, so the product is below 2^122 and `hi` fits in 61 bits.
    reduce64(lo + reduce64(hi))
}

impl fmt::Debug for Fp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fp({})", self.0)
    }
}

impl Add for Fp {
    type Output = Fp;
    fn add(self, rhs: Fp) -> Fp {
        let s = self.0 + rhs.0;
        Fp(if s >= MODULUS { s - MODULUS } else { s })
    }
}

impl AddAssign for Fp {
    fn add_assign(&mut self, rhs: Fp) {
        *self = *self + rhs;
    }
}

impl Sub for Fp {
    type Output = Fp;
    fn sub(self, rhs: Fp) -> Fp {
        if self.0 >= rhs.0 {
            Fp(self.0 - rhs.0)
        } else {
            Fp(self.0 + MODULUS - rhs.0)
        }
    }
}

impl SubAssign for Fp {
    fn sub_assign(&mut self, rhs: Fp) {
        *self = *self - rhs;
    }
}

impl Neg for Fp {
    type Output = Fp;
    fn neg(self) -> Fp {
        Fp::ZERO - self
    }
}

impl Mul for Fp {
    type Output = Fp;
    fn mul(self, rhs: Fp) -> Fp {
        Fp(reduce128(u128::from(self.0) * u128::from(rhs.0)))
    }
}

impl Sum for Fp {
    fn sum<I: Iterator<Item = Fp>>(iter: I) -> Fp {
        iter.fold(Fp::ZERO, Add::add)
    }
}

/// Elementwise `acc += v`.
pub fn add_assign_vec(acc: &mut [Fp], v: &[Fp]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += *b;
    }
}

/// Elementwise `acc -= v`.
pub fn sub_assign_vec(acc: &mut [Fp], v: &[Fp]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a -= *b;
    }
}
