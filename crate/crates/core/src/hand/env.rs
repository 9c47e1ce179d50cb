//! Episode simulator: an externally driven wrist, contact-aware joint
//! stepping with quasi-static pushing, and the terminal squeeze-and-lift test.
//!
//! Pushing is horizontal: objects stay on the table, circles roll and
//! polygons slide. A joint whose motion would push the object into a
//! blocked direction halts at first contact.

use std::fmt::Write as _;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::closure::force_closure;
use super::contact::{detect_contacts, Contact};
use super::model::{HandGeometry, HandModel, JointVector, WristPose, NUM_FINGERS, NUM_JOINTS};
use super::object::{ObjectShape, ShapeKind};
use super::{EnvError, Result};
use crate::geom::{wrap_angle, Pose2};

const BODIES: usize = NUM_JOINTS + 1;
const BISECT_ITERS: usize = 24;
const PUSH_ITERS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub horizon: usize,
    pub action_scale: f64,
    pub mu: f64,
    pub contact_tol: f64,
    /// Smallest horizontal share of a contact normal that can push the object.
    pub min_push_normal: f64,
    pub squeeze_delta: f64,
    pub squeeze_substeps: usize,
    pub lift_height: f64,
    pub lift_substeps: usize,
    pub success_height: f64,
    pub success_rel_disp: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            horizon: 50,
            action_scale: 0.05,
            mu: 0.5,
            contact_tol: super::CONTACT_TOL,
            min_push_normal: 0.3,
            squeeze_delta: 0.1,
            squeeze_substeps: 5,
            lift_height: 1.0,
            lift_substeps: 10,
            success_height: 0.1,
            success_rel_disp: 0.05,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.horizon >= 1
            && self.action_scale > 0.0
            && self.mu > 0.0
            && self.contact_tol > 0.0
            && (0.0..=1.0).contains(&self.min_push_normal)
            && self.squeeze_substeps >= 1
            && self.lift_substeps >= 1
            && self.lift_height >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(EnvError::Contract(format!(
                "invalid environment config {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Approach,
    Lifted,
    Done,
}

/// Latest-value slot written by one producer and read by the environment.
#[derive(Debug, Clone)]
pub struct LiveWrist {
    slot: Arc<Mutex<(u64, WristPose<f64>)>>,
}

impl LiveWrist {
    pub fn new(initial: WristPose<f64>) -> Self {
        Self {
            slot: Arc::new(Mutex::new((0, initial))),
        }
    }

    /// Stores `pose` unless `seq` is not newer than the stored one.
    pub fn push(&self, seq: u64, pose: WristPose<f64>) -> bool {
        let mut s = self.slot.lock().unwrap_or_else(|e| e.into_inner());
        if seq <= s.0 && s.0 != 0 {
            return false;
        }
        *s = (seq, pose);
        true
    }

    pub fn latest(&self) -> (u64, WristPose<f64>) {
        *self.slot.lock().unwrap_or_else(|e| e.into_inner())
    }
}

#[derive(Debug, Clone)]
pub enum WristSource {
    Scripted(Vec<WristPose<f64>>),
    Live(LiveWrist),
}

impl WristSource {
    fn pose_at(&self, t: usize) -> WristPose<f64> {
        match self {
            WristSource::Scripted(p) => p[t.min(p.len() - 1)],
            WristSource::Live(l) => l.latest().1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub wrist: WristPose<f64>,
    pub joints: JointVector<f64>,
    pub object: ObjectShape<f64>,
    pub t: usize,
    pub accum_trans: f64,
    pub accum_rot: f64,
    pub phase: Phase,
    /// Wrist poses visited so far, starting with the reset pose.
    pub wrist_history: Vec<WristPose<f64>>,
    pub initial_object_pose: Pose2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LiftOutcome {
    pub success: bool,
    pub height_gain: f64,
    pub rel_displacement: f64,
    pub delta_h: f64,
    pub closure: bool,
}

/// Per-step diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    /// Joint change actually applied this step.
    pub delta_joints: [f64; NUM_JOINTS],
    pub object_shift: f64,
}

#[derive(Debug, Clone)]
pub struct Env {
    pub hand: HandModel<f64>,
    pub config: EnvConfig,
    pub state: EnvState,
    source: WristSource,
    /// Disables hand-object contact resolution during the approach.
    pub no_collision: bool,
}

impl Env {
    pub fn reset(
        hand: HandModel<f64>,
        config: EnvConfig,
        object: ObjectShape<f64>,
        source: WristSource,
        init_joints: JointVector<f64>,
    ) -> Result<Self> {
        hand.validate()?;
        config.validate()?;
        hand.check_joints(&init_joints)?;
        if let WristSource::Scripted(p) = &source {
            if p.len() != config.horizon {
                return Err(EnvError::TrajectoryLength {
                    expected: config.horizon,
                    got: p.len(),
                });
            }
        }
        let wrist = source.pose_at(0);
        if !wrist.is_finite() || !object.pose.is_finite() {
            return Err(EnvError::InvalidInit("non-finite pose".into()));
        }
        let env = Self {
            state: EnvState {
                wrist,
                joints: init_joints,
                initial_object_pose: object.pose,
                object,
                t: 0,
                accum_trans: 0.0,
                accum_rot: 0.0,
                phase: Phase::Approach,
                wrist_history: vec![wrist],
            },
            hand,
            config,
            source,
            no_collision: false,
        };
        let pen = env.penetrations(&wrist, &init_joints, &env.state.object);
        if let Some(b) = (0..BODIES).find(|&b| pen[b] > env.config.contact_tol) {
            return Err(EnvError::InvalidInit(format!(
                "hand body {b} intersects the object by {:.3e} m",
                pen[b]
            )));
        }
        Ok(env)
    }

    pub fn with_no_collision(mut self, on: bool) -> Self {
        self.no_collision = on;
        self
    }

    pub fn geometry(&self) -> HandGeometry<f64> {
        self.hand
            .forward_kinematics_unchecked(&self.state.wrist, &self.state.joints)
    }

    pub fn contacts(&self) -> Vec<Contact<f64>> {
        detect_contacts(
            &self.geometry(),
            &self.state.object,
            self.hand.finger_thickness,
            self.config.contact_tol,
        )
    }

    pub fn is_terminal_step(&self) -> bool {
        self.state.t >= self.config.horizon
    }

    /// Advances one control step.
    pub fn step(&mut self, action: &[f64]) -> Result<StepInfo> {
        if action.len() != NUM_JOINTS {
            return Err(EnvError::ActionDim {
                expected: NUM_JOINTS,
                got: action.len(),
            });
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(EnvError::NonFiniteAction);
        }
        if self.state.phase != Phase::Approach || self.state.t >= self.config.horizon {
            return Err(EnvError::Contract(format!(
                "step called at t = {} in phase {:?}",
                self.state.t, self.state.phase
            )));
        }
        let before_joints = self.state.joints;
        let before_obj = self.state.object.pose;

        let wrist = self.source.pose_at(self.state.t + 1);
        let wrist = if wrist.is_finite() {
            wrist
        } else {
            self.state.wrist
        };
        self.move_wrist(wrist);

        let collide = !self.no_collision;
        for (j, a) in action.iter().enumerate() {
            let d = a.clamp(-1.0, 1.0) * self.config.action_scale;
            self.move_joint(j, d, collide);
        }

        self.state.t += 1;
        self.state.wrist_history.push(self.state.wrist);
        let mut delta = [0.0; NUM_JOINTS];
        for (j, d) in delta.iter_mut().enumerate() {
            *d = self.state.joints.q[j] - before_joints.q[j];
        }
        let after = self.state.object.pose;
        Ok(StepInfo {
            delta_joints: delta,
            object_shift: ((after.x - before_obj.x).powi(2) + (after.y - before_obj.y).powi(2))
                .sqrt(),
        })
    }

    /// Closes the distal joints, evaluates force closure, and lifts the wrist.
    pub fn terminal_squeeze_and_lift(&mut self) -> Result<LiftOutcome> {
        if self.state.phase != Phase::Approach || self.state.t != self.config.horizon {
            return Err(EnvError::Contract(format!(
                "squeeze-and-lift called at t = {} in phase {:?}",
                self.state.t, self.state.phase
            )));
        }
        let start_y = self.state.initial_object_pose.y;
        let n = self.config.squeeze_substeps;
        let inc = self.config.squeeze_delta / n as f64;
        for _ in 0..n {
            for f in 0..NUM_FINGERS {
                self.move_joint(2 * f + 1, inc, true);
            }
        }
        let contacts = self.contacts();
        let closure = force_closure(&contacts, self.config.mu, self.state.object.com());

        let rise = self.config.lift_height / self.config.lift_substeps as f64;
        for _ in 0..self.config.lift_substeps {
            self.state.wrist.y += rise;
            if closure {
                self.state.object.pose.y += rise;
            }
        }
        let height_gain = if closure {
            self.config.lift_height
        } else {
            0.0
        };
        let rel_displacement = if closure {
            0.0
        } else {
            self.config.lift_height
        };
        let delta_h = self.state.object.pose.y - start_y;
        let success = height_gain > self.config.success_height
            && rel_displacement < self.config.success_rel_disp;
        self.state.phase = if success { Phase::Lifted } else { Phase::Done };
        Ok(LiftOutcome {
            success,
            height_gain,
            rel_displacement,
            delta_h,
            closure,
        })
    }

    /// Per-body penetration depth (positive when the capsule overlaps the
    /// object), finger links first then the palm.
    fn penetrations(
        &self,
        wrist: &WristPose<f64>,
        joints: &JointVector<f64>,
        object: &ObjectShape<f64>,
    ) -> [f64; BODIES] {
        let g = self.hand.forward_kinematics_unchecked(wrist, joints);
        let mut out = [0.0; BODIES];
        for (i, (_, seg)) in g.bodies().enumerate() {
            out[i] = self.hand.finger_thickness - object.segment_proximity(&seg).distance;
        }
        out
    }

    fn allowed(&self, old: f64) -> f64 {
        old.max(self.config.contact_tol)
    }

    fn admissible(&self, old: &[f64; BODIES], new: &[f64; BODIES], bodies: &[usize]) -> bool {
        bodies
            .iter()
            .all(|&b| new[b] <= self.allowed(old[b]) + 1e-12)
    }

    /// Pushes the object horizontally until every body is admissible; `None`
    /// when a push is blocked.
    fn resolve_push(
        &self,
        wrist: &WristPose<f64>,
        joints: &JointVector<f64>,
        old: &[f64; BODIES],
    ) -> Option<ObjectShape<f64>> {
        let mut obj = self.state.object.clone();
        let g0 = self.hand.forward_kinematics_unchecked(wrist, joints);
        let segs: Vec<_> = g0.bodies().map(|(_, s)| s).collect();
        let mut pushed_by: Option<usize> = None;
        for _ in 0..PUSH_ITERS {
            let mut worst: Option<(usize, f64)> = None;
            let mut prox = Vec::with_capacity(BODIES);
            for (b, seg) in segs.iter().enumerate() {
                let p = obj.segment_proximity(seg);
                let excess = self.hand.finger_thickness - p.distance - self.allowed(old[b]);
                if excess > 1e-12 && worst.is_none_or(|w| excess > w.1) {
                    worst = Some((b, excess));
                }
                prox.push(p);
            }
            let Some((b, _)) = worst else {
                return Some(obj);
            };
            // Only one body may drive the object; a second violator would
            // squeeze it and halts the motion instead.
            if pushed_by.is_some_and(|p| p != b) {
                return None;
            }
            pushed_by = Some(b);
            let n = prox[b].normal;
            if n.x.abs() < self.config.min_push_normal {
                return None;
            }
            let depth = self.hand.finger_thickness - prox[b].distance;
            let target = (self.allowed(old[b]) - 0.5 * self.config.contact_tol).max(0.0);
            let dx = -(depth - target) / n.x;
            obj.pose.x += dx;
            if let ShapeKind::Circle { radius } = obj.kind {
                obj.pose.theta = wrap_angle(obj.pose.theta - dx / radius);
            }
        }
        None
    }

    fn commit_object(&mut self, obj: ObjectShape<f64>) {
        let old = self.state.object.pose;
        let dx = obj.pose.x - old.x;
        let dy = obj.pose.y - old.y;
        self.state.accum_trans += (dx * dx + dy * dy).sqrt();
        self.state.accum_rot += wrap_angle(obj.pose.theta - old.theta).abs();
        self.state.object = obj;
    }

    fn move_joint(&mut self, j: usize, delta: f64, collide: bool) {
        let base = self.state.joints;
        let (lo, hi) = self.hand.joint_limits[j];
        let mut cand = base;
        cand.q[j] = (base.q[j] + delta).clamp(lo, hi);
        if cand.q[j] == base.q[j] {
            return;
        }
        if !collide {
            self.state.joints = cand;
            return;
        }
        let wrist = self.state.wrist;
        let old = self.penetrations(&wrist, &base, &self.state.object);
        let f = j / 2;
        let moved = [2 * f, 2 * f + 1];
        let new = self.penetrations(&wrist, &cand, &self.state.object);
        if self.admissible(&old, &new, &moved) {
            self.state.joints = cand;
            return;
        }
        if let Some(obj) = self.resolve_push(&wrist, &cand, &old) {
            self.commit_object(obj);
            self.state.joints = cand;
            return;
        }
        let full = cand.q[j] - base.q[j];
        let (mut a, mut b) = (0.0, 1.0);
        for _ in 0..BISECT_ITERS {
            let m = 0.5 * (a + b);
            let mut c = base;
            c.q[j] = base.q[j] + m * full;
            let pen = self.penetrations(&wrist, &c, &self.state.object);
            if self.admissible(&old, &pen, &moved) {
                a = m;
            } else {
                b = m;
            }
        }
        self.state.joints.q[j] = (base.q[j] + a * full).clamp(lo, hi);
    }

    /// Moves the wrist; penetration it causes pushes the object, else opens
    /// the offending fingers, else is tolerated.
    fn move_wrist(&mut self, wrist: WristPose<f64>) {
        let old_wrist = self.state.wrist;
        let theta = wrap_angle(wrist.theta);
        let wrist = Pose2::new(wrist.x, wrist.y, theta);
        if self.no_collision {
            self.state.wrist = wrist;
            return;
        }
        let old = self.penetrations(&old_wrist, &self.state.joints, &self.state.object);
        let all: Vec<usize> = (0..BODIES).collect();
        let new = self.penetrations(&wrist, &self.state.joints, &self.state.object);
        self.state.wrist = wrist;
        if self.admissible(&old, &new, &all) {
            return;
        }
        if let Some(obj) = self.resolve_push(&wrist, &self.state.joints, &old) {
            self.commit_object(obj);
            return;
        }
        for f in 0..NUM_FINGERS {
            let moved = [2 * f, 2 * f + 1];
            if self.admissible(&old, &new, &moved) {
                continue;
            }
            let base = self.state.joints;
            let scaled = |s: f64| {
                let mut c = base;
                let q = base.finger(f);
                c.set_finger(f, [q[0] * s, q[1] * s]);
                c
            };
            let (mut a, mut b) = (0.0, 1.0);
            let closed = self.penetrations(&wrist, &scaled(0.0), &self.state.object);
            if !self.admissible(&old, &closed, &moved) {
                continue;
            }
            for _ in 0..BISECT_ITERS {
                let m = 0.5 * (a + b);
                let pen = self.penetrations(&wrist, &scaled(m), &self.state.object);
                if self.admissible(&old, &pen, &moved) {
                    b = m;
                } else {
                    a = m;
                }
            }
            // `b` is the largest admissible scale found.
            let _ = a;
            let mut c = scaled(b);
            self.hand.clamp_joints(&mut c);
            self.state.joints = c;
        }
        let now = self.penetrations(&wrist, &self.state.joints, &self.state.object);
        if !self.admissible(&old, &now, &all) {
            if let Some(obj) = self.resolve_push(&wrist, &self.state.joints, &old) {
                self.commit_object(obj);
            }
        }
    }

    /// Exact textual image of the physical state, for trace files and
    /// bit-level comparisons.
    pub fn trace_line(&self) -> String {
        let s = &self.state;
        let mut out = format!("t={} phase={:?}", s.t, s.phase);
        let mut put = |k: &str, v: f64| {
            write!(out, " {k}={:016x}", v.to_bits()).unwrap();
        };
        put("wx", s.wrist.x);
        put("wy", s.wrist.y);
        put("wt", s.wrist.theta);
        for (i, q) in s.joints.q.iter().enumerate() {
            put(&format!("q{i}"), *q);
        }
        put("ox", s.object.pose.x);
        put("oy", s.object.pose.y);
        put("ot", s.object.pose.theta);
        put("at", s.accum_trans);
        put("ar", s.accum_rot);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn circle_at(x: f64, r: f64) -> ObjectShape<f64> {
        let mut o = ObjectShape::circle("c", "test", r).unwrap();
        o.rest_on_table(x);
        o
    }

    fn static_traj(p: WristPose<f64>) -> WristSource {
        WristSource::Scripted(vec![p; 50])
    }

    fn env_with(obj: ObjectShape<f64>, wrist: WristPose<f64>, q: [f64; 6]) -> Env {
        Env::reset(
            HandModel::default(),
            EnvConfig::default(),
            obj,
            static_traj(wrist),
            JointVector::new(q),
        )
        .unwrap()
    }

    #[test]
    fn zero_action_far_from_object_only_advances_time() {
        let mut env = env_with(circle_at(5.0, 0.04), Pose2::new(0.0, 0.5, 0.0), [0.5; 6]);
        let before = env.state.clone();
        env.step(&[0.0; 6]).unwrap();
        assert_eq!(env.state.t, 1);
        assert_eq!(env.state.joints, before.joints);
        assert_eq!(env.state.object, before.object);
        assert_eq!(env.state.wrist, before.wrist);
    }

    #[test]
    fn unit_action_moves_each_joint_by_scale() {
        let mut env = env_with(circle_at(5.0, 0.04), Pose2::new(0.0, 0.5, 0.0), [1.0; 6]);
        env.step(&[1.0; 6]).unwrap();
        for q in env.state.joints.q {
            assert!((q - 1.05).abs() < 1e-15, "{q}");
        }
        env.step(&[-7.0; 6]).unwrap();
        for q in env.state.joints.q {
            assert!((q - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn joint_limits_hold_under_saturating_actions() {
        let mut env = env_with(circle_at(5.0, 0.04), Pose2::new(0.0, 0.5, 0.0), [1.98; 6]);
        env.step(&[1.0; 6]).unwrap();
        assert!(env.state.joints.q.iter().all(|&q| q == 2.0));
    }

    #[test]
    fn rejects_wrong_action_length_and_late_steps() {
        let mut env = env_with(circle_at(5.0, 0.04), Pose2::new(0.0, 0.5, 0.0), [0.0; 6]);
        assert!(matches!(
            env.step(&[0.0; 5]),
            Err(EnvError::ActionDim { .. })
        ));
        assert!(matches!(
            env.terminal_squeeze_and_lift(),
            Err(EnvError::Contract(_))
        ));
        for _ in 0..50 {
            env.step(&[0.0; 6]).unwrap();
        }
        assert!(matches!(env.step(&[0.0; 6]), Err(EnvError::Contract(_))));
    }

    #[test]
    fn reset_validates_trajectory_and_overlap() {
        let r = Env::reset(
            HandModel::default(),
            EnvConfig::default(),
            circle_at(0.0, 0.04),
            WristSource::Scripted(vec![Pose2::new(0.0, 0.5, 0.0); 49]),
            JointVector::zeros(),
        );
        assert!(matches!(r, Err(EnvError::TrajectoryLength { got: 49, .. })));
        let r = Env::reset(
            HandModel::default(),
            EnvConfig::default(),
            circle_at(0.0, 0.04),
            static_traj(Pose2::new(0.0, 0.04, 0.0)),
            JointVector::zeros(),
        );
        assert!(matches!(r, Err(EnvError::InvalidInit(_))));
    }

    #[test]
    fn no_contact_lift_fails_without_height() {
        let mut env = env_with(circle_at(5.0, 0.04), Pose2::new(0.0, 0.5, 0.0), [0.0; 6]);
        for _ in 0..50 {
            env.step(&[0.0; 6]).unwrap();
        }
        let out = env.terminal_squeeze_and_lift().unwrap();
        assert!(!out.success);
        assert_eq!(out.height_gain, 0.0);
        assert_eq!(out.delta_h, 0.0);
        assert_eq!(env.state.phase, Phase::Done);
    }

    #[test]
    fn live_wrist_ignores_stale_sequence_numbers() {
        let live = LiveWrist::new(Pose2::identity());
        assert!(live.push(3, Pose2::new(1.0, 0.0, 0.0)));
        assert!(!live.push(2, Pose2::new(2.0, 0.0, 0.0)));
        assert!(!live.push(3, Pose2::new(2.0, 0.0, 0.0)));
        assert_eq!(live.latest(), (3, Pose2::new(1.0, 0.0, 0.0)));
    }

    #[test]
    fn wrist_descending_onto_object_never_leaves_deep_finger_penetration() {
        let obj = circle_at(0.0, 0.04);
        let poses: Vec<_> = (0..50)
            .map(|k| Pose2::new(0.0, 0.35 - 0.005 * k as f64, 0.0))
            .collect();
        let mut env = Env::reset(
            HandModel::default(),
            EnvConfig::default(),
            obj,
            WristSource::Scripted(poses),
            JointVector::new([0.3; 6]),
        )
        .unwrap();
        for _ in 0..50 {
            env.step(&[0.2; 6]).unwrap();
            let pen = env.penetrations(&env.state.wrist, &env.state.joints, &env.state.object);
            for (b, p) in pen.iter().enumerate().take(NUM_JOINTS) {
                assert!(*p < 0.02, "body {b} penetrates {p}");
            }
        }
    }
}
