//! Scalars usable by the box geometry: plain `f64` and a forward-mode dual
//! number carrying derivatives with respect to four box parameters.

use std::ops::{Add, Div, Mul, Neg, Sub};

pub trait Scalar:
    Copy + PartialOrd + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Neg<Output = Self>
{
    fn lit(v: f64) -> Self;
    fn val(self) -> f64;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn sin(self) -> Self;
    fn asin(self) -> Self;
    fn atan(self) -> Self;

    fn abs(self) -> Self {
        if self.val() < 0.0 {
            -self
        } else {
            self
        }
    }

    fn max(self, o: Self) -> Self {
        if o.val() > self.val() {
            o
        } else {
            self
        }
    }

    fn min(self, o: Self) -> Self {
        if o.val() < self.val() {
            o
        } else {
            self
        }
    }

    fn square(self) -> Self {
        self * self
    }
}

impl Scalar for f64 {
    fn lit(v: f64) -> Self {
        v
    }
    fn val(self) -> f64 {
        self
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn asin(self) -> Self {
        f64::asin(self)
    }
    fn atan(self) -> Self {
        f64::atan(self)
    }
}

/// Value plus gradient with respect to (cx, cy, w, h).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual {
    pub v: f64,
    pub d: [f64; 4],
}

impl Dual {
    pub fn var(v: f64, i: usize) -> Self {
        let mut d = [0.0; 4];
        d[i] = 1.0;
        Self { v, d }
    }

    fn chain(self, v: f64, k: f64) -> Self {
        Self {
            v,
            d: self.d.map(|x| x * k),
        }
    }
}

impl PartialOrd for Dual {
    fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
        self.v.partial_cmp(&o.v)
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual {
            v: self.v + o.v,
            d: std::array::from_fn(|i| self.d[i] + o.d[i]),
        }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual {
            v: self.v - o.v,
            d: std::array::from_fn(|i| self.d[i] - o.d[i]),
        }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual {
            v: self.v * o.v,
            d: std::array::from_fn(|i| self.d[i] * o.v + self.v * o.d[i]),
        }
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        let q = self.v / o.v;
        Dual {
            v: q,
            d: std::array::from_fn(|i| (self.d[i] - q * o.d[i]) / o.v),
        }
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        self.chain(-self.v, -1.0)
    }
}

impl Scalar for Dual {
    fn lit(v: f64) -> Self {
        Dual { v, d: [0.0; 4] }
    }
    fn val(self) -> f64 {
        self.v
    }
    fn sqrt(self) -> Self {
        let r = self.v.sqrt();
        // Zero slope at the origin keeps coincident centers finite.
        self.chain(r, if r > 0.0 { 0.5 / r } else { 0.0 })
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        self.chain(e, e)
    }
    fn sin(self) -> Self {
        self.chain(self.v.sin(), self.v.cos())
    }
    fn asin(self) -> Self {
        let s = 1.0 - self.v * self.v;
        self.chain(self.v.asin(), if s > 0.0 { 1.0 / s.sqrt() } else { 0.0 })
    }
    fn atan(self) -> Self {
        self.chain(self.v.atan(), 1.0 / (1.0 + self.v * self.v))
    }
    fn abs(self) -> Self {
        if self.v < 0.0 {
            -self
        } else if self.v > 0.0 {
            self
        } else {
            self.chain(0.0, 0.0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivatives_of_composites() {
        let x = Dual::var(0.3, 0);
        let y = (x * x).exp().sin() / (x + Dual::lit(1.0));
        let f = |x: f64| (x * x).exp().sin() / (x + 1.0);
        let h = 1e-6;
        let num = (f(0.3 + h) - f(0.3 - h)) / (2.0 * h);
        assert!((y.d[0] - num).abs() < 1e-8);
        assert_eq!(y.d[1..], [0.0; 3]);
        let z = Dual::var(0.4, 2).asin().atan();
        let g = |x: f64| x.asin().atan();
        assert!((z.d[2] - (g(0.4 + h) - g(0.4 - h)) / (2.0 * h)).abs() < 1e-8);
    }

    #[test]
    fn kinks_are_finite() {
        assert_eq!(Dual::lit(0.0).sqrt().d, [0.0; 4]);
        assert_eq!(Dual::var(0.0, 1).abs().d, [0.0; 4]);
        assert!(Dual::var(1.0, 0).asin().d[0].is_finite());
    }
}
