//! Planar vectors, rigid transforms and segment queries.

use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2<T> {
    pub x: T,
    pub y: T,
}

impl<T: Real> Vec2<T> {
    #[inline]
    pub fn new(x: T, y: T) -> Self {
        Self { x, y }
    }

    #[inline]
    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero())
    }

    /// Unit vector at angle `a`.
    #[inline]
    pub fn from_angle(a: T) -> Self {
        Self::new(a.cos(), a.sin())
    }

    #[inline]
    pub fn dot(self, o: Self) -> T {
        self.x * o.x + self.y * o.y
    }

    /// z-component of the 3D cross product.
    #[inline]
    pub fn cross(self, o: Self) -> T {
        self.x * o.y - self.y * o.x
    }

    #[inline]
    pub fn norm(self) -> T {
        self.x.hypot(self.y)
    }

    #[inline]
    pub fn norm_sq(self) -> T {
        self.dot(self)
    }

    /// Counter-clockwise perpendicular.
    #[inline]
    pub fn perp(self) -> Self {
        Self::new(-self.y, self.x)
    }

    #[inline]
    pub fn rotate(self, a: T) -> Self {
        let (s, c) = a.sin_cos();
        Self::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    pub fn normalized(self) -> Option<Self> {
        let n = self.norm();
        if n > T::zero() && n.is_finite() {
            Some(self * (T::one() / n))
        } else {
            None
        }
    }

    #[inline]
    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl<T: Real> Add for Vec2<T> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y)
    }
}

impl<T: Real> Sub for Vec2<T> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y)
    }
}

impl<T: Real> Mul<T> for Vec2<T> {
    type Output = Self;
    #[inline]
    fn mul(self, k: T) -> Self {
        Self::new(self.x * k, self.y * k)
    }
}

impl<T: Real> Neg for Vec2<T> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y)
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle<T: Real>(a: T) -> T {
    let two_pi = T::PI() + T::PI();
    let mut r = a % two_pi;
    if r <= -T::PI() {
        r += two_pi;
    } else if r > T::PI() {
        r -= two_pi;
    }
    r
}

/// Planar rigid transform: rotation by `theta` then translation by `(x, y)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose2<T> {
    pub x: T,
    pub y: T,
    pub theta: T,
}

impl<T: Real> Pose2<T> {
    pub fn new(x: T, y: T, theta: T) -> Self {
        Self { x, y, theta }
    }

    pub fn identity() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }

    #[inline]
    pub fn translation(&self) -> Vec2<T> {
        Vec2::new(self.x, self.y)
    }

    /// Maps a point from this frame into the parent frame.
    #[inline]
    pub fn apply(&self, p: Vec2<T>) -> Vec2<T> {
        p.rotate(self.theta) + self.translation()
    }

    /// Rotates a direction from this frame into the parent frame.
    #[inline]
    pub fn apply_dir(&self, d: Vec2<T>) -> Vec2<T> {
        d.rotate(self.theta)
    }

    /// Maps a parent-frame point into this frame.
    #[inline]
    pub fn inverse_apply(&self, p: Vec2<T>) -> Vec2<T> {
        (p - self.translation()).rotate(-self.theta)
    }

    /// `self * other`: `other` expressed in this frame, lifted to the parent.
    pub fn compose(&self, other: &Self) -> Self {
        let t = self.apply(other.translation());
        Self::new(t.x, t.y, wrap_angle(self.theta + other.theta))
    }

    pub fn inverse(&self) -> Self {
        let t = (-self.translation()).rotate(-self.theta);
        Self::new(t.x, t.y, wrap_angle(-self.theta))
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.theta.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment<T> {
    pub a: Vec2<T>,
    pub b: Vec2<T>,
}

impl<T: Real> Segment<T> {
    pub fn new(a: Vec2<T>, b: Vec2<T>) -> Self {
        Self { a, b }
    }

    #[inline]
    pub fn at(&self, u: T) -> Vec2<T> {
        self.a + (self.b - self.a) * u
    }

    /// Parameter in `[0, 1]` of the point closest to `p`.
    pub fn closest_param(&self, p: Vec2<T>) -> T {
        let d = self.b - self.a;
        let l2 = d.norm_sq();
        if l2 <= T::zero() {
            return T::zero();
        }
        ((p - self.a).dot(d) / l2).max(T::zero()).min(T::one())
    }

    pub fn closest_point(&self, p: Vec2<T>) -> Vec2<T> {
        self.at(self.closest_param(p))
    }

    pub fn transformed(&self, pose: &Pose2<T>) -> Self {
        Self::new(pose.apply(self.a), pose.apply(self.b))
    }

    pub fn translated(&self, d: Vec2<T>) -> Self {
        Self::new(self.a + d, self.b + d)
    }
}

/// Closest pair `(p on s1, q on s2)` between two segments.
pub fn segment_closest_pair<T: Real>(s1: &Segment<T>, s2: &Segment<T>) -> (Vec2<T>, Vec2<T>) {
    if let Some(x) = segment_intersection(s1, s2) {
        return (x, x);
    }
    let cands = [
        (s1.a, s2.closest_point(s1.a)),
        (s1.b, s2.closest_point(s1.b)),
        (s1.closest_point(s2.a), s2.a),
        (s1.closest_point(s2.b), s2.b),
    ];
    let mut best = cands[0];
    let mut best_d = (best.0 - best.1).norm_sq();
    for c in &cands[1..] {
        let d = (c.0 - c.1).norm_sq();
        if d < best_d {
            best = *c;
            best_d = d;
        }
    }
    best
}

/// Proper or touching intersection point of two segments, if any.
pub fn segment_intersection<T: Real>(s1: &Segment<T>, s2: &Segment<T>) -> Option<Vec2<T>> {
    let r = s1.b - s1.a;
    let s = s2.b - s2.a;
    let denom = r.cross(s);
    if denom == T::zero() {
        return None;
    }
    let qp = s2.a - s1.a;
    let t = qp.cross(s) / denom;
    let u = qp.cross(r) / denom;
    if t >= T::zero() && t <= T::one() && u >= T::zero() && u <= T::one() {
        Some(s1.at(t))
    } else {
        None
    }
}
