use serde::{Deserialize, Serialize};

use super::{EnvError, Result};
use crate::geom::{Pose2, Segment, Vec2};
use crate::scalar::Real;

/// Number of actuated finger joints.
pub const NUM_JOINTS: usize = 6;
pub const NUM_FINGERS: usize = 3;

/// Externally driven wrist pose; `theta` is kept in `(-pi, pi]`.
pub type WristPose<T> = Pose2<T>;

/// Raw joint angles in radians, two per finger (proximal, distal).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct JointVector<T> {
    pub q: [T; NUM_JOINTS],
}

impl<T: Real> JointVector<T> {
    pub fn new(q: [T; NUM_JOINTS]) -> Self {
        Self { q }
    }

    pub fn zeros() -> Self {
        Self {
            q: [T::zero(); NUM_JOINTS],
        }
    }

    pub fn distance(&self, other: &Self) -> T {
        self.q
            .iter()
            .zip(&other.q)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>()
            .sqrt()
    }

    pub fn finger(&self, f: usize) -> [T; 2] {
        [self.q[2 * f], self.q[2 * f + 1]]
    }

    pub fn set_finger(&mut self, f: usize, v: [T; 2]) {
        self.q[2 * f] = v[0];
        self.q[2 * f + 1] = v[1];
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FingerSpec<T> {
    /// Attachment point on the palm, palm frame.
    pub attach: Vec2<T>,
    /// Direction of the straight finger at zero joints, palm frame.
    pub base_angle: T,
    /// `+1` curls counter-clockwise, `-1` clockwise.
    pub curl_sign: T,
    pub link_len: [T; 2],
}

/// Planar three-finger hand. In the palm frame the palm lies on the x axis
/// and the fingers hang towards `-y`; at `theta = 0` the hand reaches down.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandModel<T> {
    pub palm_half_width: T,
    pub fingers: [FingerSpec<T>; NUM_FINGERS],
    pub joint_limits: [(T, T); NUM_JOINTS],
    /// Capsule radius of every link and of the palm.
    pub finger_thickness: T,
}

impl<T: Real> Default for HandModel<T> {
    fn default() -> Self {
        let l = T::lit;
        let pi = std::f64::consts::PI;
        let finger = |ax: f64, base: f64, sign: f64, l0: f64, l1: f64| FingerSpec {
            attach: Vec2::new(l(ax), T::zero()),
            base_angle: l(base),
            curl_sign: l(sign),
            link_len: [l(l0), l(l1)],
        };
        Self {
            palm_half_width: l(0.05),
            fingers: [
                // thumb, splayed down-left, curls counter-clockwise
                finger(-0.05, -2.0 * pi / 3.0, 1.0, 0.06, 0.05),
                // index, splayed down-right, curls clockwise
                finger(0.05, -pi / 3.0, -1.0, 0.06, 0.05),
                // middle, nearly horizontal at rest
                finger(0.02, -pi / 6.0, -1.0, 0.05, 0.04),
            ],
            joint_limits: [(T::zero(), l(2.0)); NUM_JOINTS],
            finger_thickness: l(0.008),
        }
    }
}

/// Identifies the body part carrying a contact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LinkId {
    Finger { finger: u8, link: u8 },
    Palm,
}

impl LinkId {
    pub fn finger_index(self) -> Option<usize> {
        match self {
            LinkId::Finger { finger, .. } => Some(finger as usize),
            LinkId::Palm => None,
        }
    }
}

/// World-frame geometry of the hand.
#[derive(Debug, Clone, PartialEq)]
pub struct HandGeometry<T> {
    /// Finger links, index `2 * finger + link`.
    pub links: [Segment<T>; NUM_JOINTS],
    pub palm: Segment<T>,
    pub fingertips: [Vec2<T>; NUM_FINGERS],
}

impl<T: Real> HandGeometry<T> {
    /// Every capsule with its identifier, palm last.
    pub fn bodies(&self) -> impl Iterator<Item = (LinkId, Segment<T>)> + '_ {
        self.links
            .iter()
            .enumerate()
            .map(|(i, s)| {
                (
                    LinkId::Finger {
                        finger: (i / 2) as u8,
                        link: (i % 2) as u8,
                    },
                    *s,
                )
            })
            .chain(std::iter::once((LinkId::Palm, self.palm)))
    }

    pub fn fingertip_centroid(&self) -> Vec2<T> {
        let n = T::lit(NUM_FINGERS as f64);
        let s = self
            .fingertips
            .iter()
            .fold(Vec2::zero(), |acc: Vec2<T>, &p| acc + p);
        s * (T::one() / n)
    }
}

impl<T: Real> HandModel<T> {
    pub fn validate(&self) -> Result<()> {
        let ok_len = self.palm_half_width > T::zero()
            && self.finger_thickness > T::zero()
            && self
                .fingers
                .iter()
                .all(|f| f.link_len.iter().all(|&l| l > T::zero()));
        if !ok_len {
            return Err(EnvError::Contract("hand lengths must be positive".into()));
        }
        if self.joint_limits.iter().any(|&(lo, hi)| !(lo < hi)) {
            return Err(EnvError::Contract("joint limits need lo < hi".into()));
        }
        Ok(())
    }

    pub fn check_joints(&self, j: &JointVector<T>) -> Result<()> {
        for (i, (&q, &(lo, hi))) in j.q.iter().zip(&self.joint_limits).enumerate() {
            if !(q >= lo && q <= hi) {
                return Err(EnvError::JointLimit {
                    index: i,
                    value: q.as_f64(),
                });
            }
        }
        Ok(())
    }

    pub fn clamp_joints(&self, j: &mut JointVector<T>) {
        for (q, &(lo, hi)) in j.q.iter_mut().zip(&self.joint_limits) {
            *q = q.max(lo).min(hi);
        }
    }

    /// Affine map of each joint onto `[-1, 1]`.
    pub fn normalize(&self, j: &JointVector<T>) -> [T; NUM_JOINTS] {
        let two = T::lit(2.0);
        let mut out = [T::zero(); NUM_JOINTS];
        for (i, o) in out.iter_mut().enumerate() {
            let (lo, hi) = self.joint_limits[i];
            *o = two * (j.q[i] - lo) / (hi - lo) - T::one();
        }
        out
    }

    pub fn denormalize(&self, n: &[T; NUM_JOINTS]) -> JointVector<T> {
        let two = T::lit(2.0);
        let mut q = [T::zero(); NUM_JOINTS];
        for (i, v) in q.iter_mut().enumerate() {
            let (lo, hi) = self.joint_limits[i];
            *v = lo + (n[i] + T::one()) * (hi - lo) / two;
        }
        JointVector { q }
    }

    /// Largest possible distance between two fingertips, over the joint range
    /// sampled on a coarse grid.
    pub fn max_aperture(&self) -> T {
        let steps = 9;
        let tips = |f: usize| -> Vec<Vec2<T>> {
            let spec = &self.fingers[f];
            let (lo0, hi0) = self.joint_limits[2 * f];
            let (lo1, hi1) = self.joint_limits[2 * f + 1];
            let mut v = Vec::new();
            for a in 0..=steps {
                for b in 0..=steps {
                    let q0 = lo0 + (hi0 - lo0) * T::lit(a as f64 / steps as f64);
                    let q1 = lo1 + (hi1 - lo1) * T::lit(b as f64 / steps as f64);
                    v.push(finger_chain(spec, q0, q1).1);
                }
            }
            v
        };
        let all: Vec<Vec<Vec2<T>>> = (0..NUM_FINGERS).map(tips).collect();
        let mut best = T::zero();
        for f in 0..NUM_FINGERS {
            for g in f + 1..NUM_FINGERS {
                for &p in &all[f] {
                    for &q in &all[g] {
                        best = best.max((p - q).norm());
                    }
                }
            }
        }
        best
    }

    /// Link segments and fingertips in world coordinates.
    pub fn forward_kinematics(
        &self,
        wrist: &WristPose<T>,
        joints: &JointVector<T>,
    ) -> Result<HandGeometry<T>> {
        self.check_joints(joints)?;
        Ok(self.forward_kinematics_unchecked(wrist, joints))
    }

    pub(crate) fn forward_kinematics_unchecked(
        &self,
        wrist: &WristPose<T>,
        joints: &JointVector<T>,
    ) -> HandGeometry<T> {
        let mut links = [Segment::new(Vec2::zero(), Vec2::zero()); NUM_JOINTS];
        let mut tips = [Vec2::zero(); NUM_FINGERS];
        for (f, spec) in self.fingers.iter().enumerate() {
            let (knuckle, tip) = finger_chain(spec, joints.q[2 * f], joints.q[2 * f + 1]);
            let base = wrist.apply(spec.attach);
            let k = wrist.apply(knuckle);
            let t = wrist.apply(tip);
            links[2 * f] = Segment::new(base, k);
            links[2 * f + 1] = Segment::new(k, t);
            tips[f] = t;
        }
        let w = self.palm_half_width;
        let palm = Segment::new(
            wrist.apply(Vec2::new(-w, T::zero())),
            wrist.apply(Vec2::new(w, T::zero())),
        );
        HandGeometry {
            links,
            palm,
            fingertips: tips,
        }
    }
}

/// Palm-frame knuckle and tip of one finger.
fn finger_chain<T: Real>(spec: &FingerSpec<T>, q0: T, q1: T) -> (Vec2<T>, Vec2<T>) {
    let a0 = spec.base_angle + spec.curl_sign * q0;
    let a1 = a0 + spec.curl_sign * q1;
    let knuckle = spec.attach + Vec2::from_angle(a0) * spec.link_len[0];
    let tip = knuckle + Vec2::from_angle(a1) * spec.link_len[1];
    (knuckle, tip)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn zero_joints_extend_straight() {
        let hand = HandModel::<f64>::default();
        let g = hand
            .forward_kinematics(&Pose2::identity(), &JointVector::zeros())
            .unwrap();
        for (f, spec) in hand.fingers.iter().enumerate() {
            let reach = (g.fingertips[f] - spec.attach).norm();
            assert_relative_eq!(reach, spec.link_len[0] + spec.link_len[1], epsilon = 1e-12);
            let dir = (g.fingertips[f] - spec.attach).normalized().unwrap();
            assert_relative_eq!(dir.x, spec.base_angle.cos(), epsilon = 1e-12);
            assert_relative_eq!(dir.y, spec.base_angle.sin(), epsilon = 1e-12);
        }
    }

    #[test]
    fn quarter_turn_of_proximal_joint() {
        // Index finger: base -pi/3, clockwise curl. q0 = pi/2 gives the
        // proximal direction -pi/3 - pi/2 = -5pi/6 = (-sqrt(3)/2, -1/2).
        // With q1 = 0 the distal link continues the same direction.
        let hand = HandModel::<f64>::default();
        let mut j = JointVector::zeros();
        j.q[2] = std::f64::consts::FRAC_PI_2;
        let g = hand.forward_kinematics(&Pose2::identity(), &j).unwrap();
        let s3 = 3f64.sqrt() / 2.0;
        let knuckle = Vec2::new(0.05 - 0.06 * s3, -0.06 * 0.5);
        let tip = Vec2::new(0.05 - 0.11 * s3, -0.11 * 0.5);
        assert_relative_eq!(g.links[2].b.x, knuckle.x, epsilon = 1e-12);
        assert_relative_eq!(g.links[2].b.y, knuckle.y, epsilon = 1e-12);
        assert_relative_eq!(g.fingertips[1].x, tip.x, epsilon = 1e-12);
        assert_relative_eq!(g.fingertips[1].y, tip.y, epsilon = 1e-12);
    }

    #[test]
    fn out_of_limit_joints_rejected() {
        let hand = HandModel::<f64>::default();
        let mut j = JointVector::zeros();
        j.q[4] = 2.5;
        assert!(matches!(
            hand.forward_kinematics(&Pose2::identity(), &j),
            Err(EnvError::JointLimit { index: 4, .. })
        ));
    }

    #[test]
    fn normalization_is_affine_bijection() {
        let hand = HandModel::<f64>::default();
        let j = JointVector::new([0.0, 2.0, 1.0, 0.5, 1.5, 0.25]);
        let n = hand.normalize(&j);
        assert_eq!(n[0], -1.0);
        assert_eq!(n[1], 1.0);
        assert_eq!(n[2], 0.0);
        let back = hand.denormalize(&n);
        for i in 0..NUM_JOINTS {
            assert_relative_eq!(back.q[i], j.q[i], epsilon = 1e-15);
        }
    }

    proptest! {
        #[test]
        fn rigid_motion_equivariance(
            q in proptest::array::uniform6(0.0f64..2.0),
            x in -1.0f64..1.0, y in -1.0f64..1.0, th in -3.0f64..3.0,
            dx in -1.0f64..1.0, dy in -1.0f64..1.0, dth in -3.0f64..3.0,
        ) {
            let hand = HandModel::<f64>::default();
            let j = JointVector::new(q);
            let wrist = Pose2::new(x, y, th);
            let g = Pose2::new(dx, dy, dth);
            let moved = g.compose(&wrist);
            let a = hand.forward_kinematics(&wrist, &j).unwrap();
            let b = hand.forward_kinematics(&moved, &j).unwrap();
            for (sa, sb) in a.links.iter().zip(&b.links) {
                let ta = g.apply(sa.a);
                let tb = g.apply(sa.b);
                prop_assert!((ta - sb.a).norm() < 1e-12);
                prop_assert!((tb - sb.b).norm() < 1e-12);
            }
        }
    }
}
