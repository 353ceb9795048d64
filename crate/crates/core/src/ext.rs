//! Double-double arithmetic (about 32 significant digits).
//!
//! Dual-mode ranging recovers distance from a power ratio that differs from
//! its far-field limit only in the ninth digit, so the forward synthesis and
//! the inversion are carried out in this type.

use std::cmp::Ordering;
use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::geometry::Vec3;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Ext {
    pub hi: f64,
    pub lo: f64,
}

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    let err = (a - (s - bb)) + (b - bb);
    (s, err)
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

impl Ext {
    pub const ZERO: Ext = Ext { hi: 0.0, lo: 0.0 };
    pub const ONE: Ext = Ext { hi: 1.0, lo: 0.0 };
    pub const PI: Ext = Ext {
        hi: std::f64::consts::PI,
        lo: 1.224_646_799_147_353_2e-16,
    };

    pub const fn new(hi: f64, lo: f64) -> Self {
        Ext { hi, lo }
    }

    /// Exact sum of two doubles.
    pub fn sum(a: f64, b: f64) -> Self {
        let (hi, lo) = two_sum(a, b);
        Ext { hi, lo }
    }

    /// Exact product of two doubles.
    pub fn prod(a: f64, b: f64) -> Self {
        let (hi, lo) = two_prod(a, b);
        Ext { hi, lo }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    pub fn abs(self) -> Self {
        if self.hi < 0.0 {
            -self
        } else {
            self
        }
    }

    pub fn is_finite(self) -> bool {
        self.hi.is_finite() && self.lo.is_finite()
    }

    pub fn sqr(self) -> Self {
        self * self
    }

    pub fn sqrt(self) -> Self {
        if self.hi <= 0.0 {
            return if self.hi == 0.0 {
                Ext::ZERO
            } else {
                Ext::new(f64::NAN, f64::NAN)
            };
        }
        let x = 1.0 / self.hi.sqrt();
        let ax = self.hi * x;
        let r = (self - Ext::prod(ax, ax)).hi * (x * 0.5);
        Ext::sum(ax, r)
    }

    pub fn recip(self) -> Self {
        Ext::ONE / self
    }
}

impl From<f64> for Ext {
    fn from(x: f64) -> Self {
        Ext { hi: x, lo: 0.0 }
    }
}

impl Neg for Ext {
    type Output = Ext;
    fn neg(self) -> Ext {
        Ext {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Add for Ext {
    type Output = Ext;
    fn add(self, b: Ext) -> Ext {
        let (s1, mut s2) = two_sum(self.hi, b.hi);
        let (t1, t2) = two_sum(self.lo, b.lo);
        s2 += t1;
        let (s1, mut s2) = quick_two_sum(s1, s2);
        s2 += t2;
        let (hi, lo) = quick_two_sum(s1, s2);
        Ext { hi, lo }
    }
}

impl Sub for Ext {
    type Output = Ext;
    fn sub(self, b: Ext) -> Ext {
        self + (-b)
    }
}

impl Mul for Ext {
    type Output = Ext;
    fn mul(self, b: Ext) -> Ext {
        let (p1, mut p2) = two_prod(self.hi, b.hi);
        p2 += self.hi * b.lo + self.lo * b.hi;
        let (hi, lo) = quick_two_sum(p1, p2);
        Ext { hi, lo }
    }
}

impl Div for Ext {
    type Output = Ext;
    fn div(self, b: Ext) -> Ext {
        let q1 = self.hi / b.hi;
        let r = self - b * Ext::from(q1);
        let q2 = r.hi / b.hi;
        let r = r - b * Ext::from(q2);
        let q3 = r.hi / b.hi;
        let (q1, q2) = quick_two_sum(q1, q2);
        Ext { hi: q1, lo: q2 } + Ext::from(q3)
    }
}

macro_rules! mixed_ops {
    ($($tr:ident $f:ident),*) => {$(
        impl $tr<f64> for Ext {
            type Output = Ext;
            fn $f(self, b: f64) -> Ext { self.$f(Ext::from(b)) }
        }
        impl $tr<Ext> for f64 {
            type Output = Ext;
            fn $f(self, b: Ext) -> Ext { Ext::from(self).$f(b) }
        }
    )*};
}
mixed_ops!(Add add, Sub sub, Mul mul, Div div);

impl PartialOrd for Ext {
    fn partial_cmp(&self, other: &Ext) -> Option<Ordering> {
        match self.hi.partial_cmp(&other.hi) {
            Some(Ordering::Equal) => self.lo.partial_cmp(&other.lo),
            o => o,
        }
    }
}

/// Three-vector in double-double precision.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ExtVec3(pub [Ext; 3]);

impl ExtVec3 {
    pub fn from_vec(v: &Vec3) -> Self {
        ExtVec3([v.x.into(), v.y.into(), v.z.into()])
    }

    /// Exact componentwise difference of two f64 points.
    pub fn diff(a: &Vec3, b: &Vec3) -> Self {
        ExtVec3([
            Ext::sum(a.x, -b.x),
            Ext::sum(a.y, -b.y),
            Ext::sum(a.z, -b.z),
        ])
    }

    pub fn to_vec(&self) -> Vec3 {
        Vec3::new(self.0[0].to_f64(), self.0[1].to_f64(), self.0[2].to_f64())
    }

    pub fn dot(&self, o: &ExtVec3) -> Ext {
        self.0[0] * o.0[0] + self.0[1] * o.0[1] + self.0[2] * o.0[2]
    }

    pub fn cross(&self, o: &ExtVec3) -> ExtVec3 {
        let [a0, a1, a2] = self.0;
        let [b0, b1, b2] = o.0;
        ExtVec3([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0])
    }

    pub fn norm_sq(&self) -> Ext {
        self.dot(self)
    }

    pub fn norm(&self) -> Ext {
        self.norm_sq().sqrt()
    }

    pub fn scale(&self, s: Ext) -> ExtVec3 {
        ExtVec3([self.0[0] * s, self.0[1] * s, self.0[2] * s])
    }

    pub fn add(&self, o: &ExtVec3) -> ExtVec3 {
        ExtVec3([self.0[0] + o.0[0], self.0[1] + o.0[1], self.0[2] + o.0[2]])
    }

    pub fn sub(&self, o: &ExtVec3) -> ExtVec3 {
        ExtVec3([self.0[0] - o.0[0], self.0[1] - o.0[1], self.0[2] - o.0[2]])
    }
}
