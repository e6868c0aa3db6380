//! Double-double arithmetic (an unevaluated sum `hi + lo` of two `f64`s,
//! about 32 significant digits) for the finite-difference reference.

use std::ops::{Add, Div, Mul, Neg, Sub};
use std::sync::OnceLock;

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default)]
pub(crate) struct Dd {
    pub hi: f64,
    pub lo: f64,
}

const LN2: Dd = Dd {
    hi: std::f64::consts::LN_2,
    lo: 2.319_046_813_846_299_6e-17,
};

/// `1 / i!` for `i = 0..=8`.
fn inverse_factorials() -> &'static [Dd; 9] {
    static TABLE: OnceLock<[Dd; 9]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [Dd::ONE; 9];
        for i in 1..9 {
            t[i] = t[i - 1] / Dd::from_f64(i as f64);
        }
        t
    })
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };

    pub fn from_f64(x: f64) -> Self {
        Dd { hi: x, lo: 0.0 }
    }

    fn normalized(hi: f64, lo: f64) -> Self {
        let (hi, lo) = quick_two_sum(hi, lo);
        Dd { hi, lo }
    }

    /// Multiplication by a power of two, exact barring over/underflow.
    fn ldexp(self, e: i32) -> Self {
        let f = 2f64.powi(e);
        Dd {
            hi: self.hi * f,
            lo: self.lo * f,
        }
    }

    pub fn exp(self) -> Self {
        if self.hi < -745.0 {
            return Dd::ZERO;
        }
        // exp(x) = 2^k * exp(r)^(2^10), r = (x - k ln 2) / 2^10.
        const SQUARINGS: i32 = 10;
        let k = (self.hi / LN2.hi).round();
        let r = (self - LN2 * Dd::from_f64(k)).ldexp(-SQUARINGS);
        // |r| <= ln(2) / 2^11, so terms past r^8 / 8! are below 1e-36.
        let coeffs = inverse_factorials();
        let mut sum = coeffs[8];
        for &c in coeffs[..8].iter().rev() {
            sum = sum * r + c;
        }
        for _ in 0..SQUARINGS {
            sum = sum * sum;
        }
        sum.ldexp(k as i32)
    }

    /// Natural log of a positive value: one Newton step on `exp(y) = x`.
    pub fn ln(self) -> Self {
        let y = Dd::from_f64(self.hi.ln());
        y + self * (-y).exp() - Dd::ONE
    }

    #[cfg(test)]
    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }
}

impl Add for Dd {
    type Output = Dd;

    fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let (s, e) = quick_two_sum(s, e + t);
        Dd::normalized(s, e + f)
    }
}

impl Neg for Dd {
    type Output = Dd;

    fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Sub for Dd {
    type Output = Dd;

    fn sub(self, o: Dd) -> Dd {
        self + -o
    }
}

impl Mul for Dd {
    type Output = Dd;

    fn mul(self, o: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, o.hi);
        Dd::normalized(p, e + (self.hi * o.lo + self.lo * o.hi))
    }
}

impl Div for Dd {
    type Output = Dd;

    fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self - o * Dd::from_f64(q1);
        let q2 = r.hi / o.hi;
        let r = r - o * Dd::from_f64(q2);
        let q3 = r.hi / o.hi;
        Dd::normalized(q1, q2) + Dd::from_f64(q3)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sums_keep_low_order_bits() {
        let x = Dd::from_f64(1.0) + Dd::from_f64(1e-20);
        assert_eq!(x.hi, 1.0);
        assert_eq!(x.lo, 1e-20);
        assert_eq!((x - Dd::ONE).to_f64(), 1e-20);
    }

    #[test]
    fn third_times_three_is_one() {
        let third = Dd::ONE / Dd::from_f64(3.0);
        let err = (third * Dd::from_f64(3.0) - Dd::ONE).to_f64().abs();
        assert!(err < 1e-31, "{err:e}");
    }

    #[test]
    fn exp_and_ln_invert() {
        for x in [-30.5, -1.0, -1e-3, 0.0, 0.7, 12.25] {
            let y = Dd::from_f64(x).exp().ln();
            assert!((y - Dd::from_f64(x)).to_f64().abs() < 1e-29, "x = {x}");
            assert!((Dd::from_f64(x).exp().to_f64() - x.exp()).abs() <= 4.0 * f64::EPSILON * x.exp());
        }
        // exp(1) to 32 digits: 2.71828182845904523536028747135266. The ten
        // squarings grow the relative error by about 2^10.
        let e = Dd::ONE.exp();
        assert_eq!(e.hi, std::f64::consts::E);
        assert!((e.lo - 1.445_646_891_729_250_2e-16).abs() < 1e-28, "{e:?}");
        assert_eq!(Dd::from_f64(-800.0).exp(), Dd::ZERO);
    }

    #[test]
    fn ln_of_power_of_two() {
        let l = Dd::from_f64(16.0).ln() - LN2 * Dd::from_f64(4.0);
        assert!(l.to_f64().abs() < 1e-30);
    }
}
