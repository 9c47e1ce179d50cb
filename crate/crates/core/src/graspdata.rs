//! Verified success grasps: synthesis by close-until-contact rejection
//! sampling, diversity selection, object splits, and the dataset file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::geom::{Pose2, Vec2};
use crate::hand::{
    closure_margin, Env, EnvConfig, EnvError, HandModel, JointVector, ObjectShape, WristPose,
    WristSource, NUM_FINGERS, NUM_JOINTS,
};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unsupported dataset version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("dataset was built for hand model {found}, current model is {expected}")]
    HandMismatch { found: String, expected: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraspExample {
    pub object_id: String,
    /// World wrist pose with the object resting on the table at `x = 0`.
    pub wrist: WristPose<f64>,
    pub joints: JointVector<f64>,
    pub fingertip_centroid: Vec2<f64>,
    /// Force-closure hull margin after the squeeze.
    pub quality: f64,
}

impl GraspExample {
    /// The same grasp with object and hand shifted by `dx` along the table.
    pub fn shifted(&self, dx: f64) -> Self {
        let mut g = self.clone();
        g.wrist.x += dx;
        g.fingertip_centroid.x += dx;
        g
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    SeenCatUnseenInst,
    UnseenCat,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::SeenCatUnseenInst, Split::UnseenCat];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::SeenCatUnseenInst => "seen-cat-unseen-inst",
            Split::UnseenCat => "unseen-cat",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GraspDataset {
    pub examples: Vec<GraspExample>,
    pub splits: BTreeMap<String, Split>,
}

impl GraspDataset {
    pub fn objects_in(&self, split: Split) -> Vec<String> {
        self.splits
            .iter()
            .filter(|(_, &s)| s == split)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn examples_for(&self, object_id: &str) -> Vec<&GraspExample> {
        self.examples
            .iter()
            .filter(|e| e.object_id == object_id)
            .collect()
    }

    pub fn examples_in(&self, split: Split) -> Vec<&GraspExample> {
        self.examples
            .iter()
            .filter(|e| self.splits.get(&e.object_id) == Some(&split))
            .collect()
    }
}

/// Hex SHA-256 over the textual hand description; stored in dataset files.
pub fn hand_hash(hand: &HandModel<f64>) -> String {
    let mut s = String::new();
    write!(s, "{:e}|{:e}", hand.palm_half_width, hand.finger_thickness).unwrap();
    for f in &hand.fingers {
        write!(
            s,
            "|{:e},{:e},{:e},{:e},{:e},{:e}",
            f.attach.x, f.attach.y, f.base_angle, f.curl_sign, f.link_len[0], f.link_len[1]
        )
        .unwrap();
    }
    for (lo, hi) in &hand.joint_limits {
        write!(s, "|{lo:e},{hi:e}").unwrap();
    }
    hex::encode(&Sha256::digest(s.as_bytes())[..8])
}

/// The desk object suite: 8 categories of 5 instances each, resting at `x = 0`.
pub fn desk_library() -> Vec<ObjectShape<f64>> {
    let mut out = Vec::new();
    let regular = |n: usize, r: f64, phase: f64| -> Vec<Vec2<f64>> {
        (0..n)
            .map(|k| {
                let a = phase + 2.0 * std::f64::consts::PI * k as f64 / n as f64;
                Vec2::from_angle(a) * r
            })
            .collect()
    };
    let rect = |w: f64, h: f64| {
        vec![
            Vec2::new(-w / 2.0, -h / 2.0),
            Vec2::new(w / 2.0, -h / 2.0),
            Vec2::new(w / 2.0, h / 2.0),
            Vec2::new(-w / 2.0, h / 2.0),
        ]
    };
    let capsule = |w: f64, h: f64| {
        // Stadium outline: two half circles of radius h/2 joined by flats.
        let r = h / 2.0;
        let c = w / 2.0 - r;
        let mut v = Vec::new();
        for k in 0..=4 {
            let a = -std::f64::consts::FRAC_PI_2 + std::f64::consts::PI * k as f64 / 4.0;
            v.push(Vec2::new(c, 0.0) + Vec2::from_angle(a) * r);
        }
        for k in 0..=4 {
            let a = std::f64::consts::FRAC_PI_2 + std::f64::consts::PI * k as f64 / 4.0;
            v.push(Vec2::new(-c, 0.0) + Vec2::from_angle(a) * r);
        }
        v
    };
    let pi = std::f64::consts::PI;
    let mut push = |o: crate::hand::Result<ObjectShape<f64>>| {
        let mut o = o.expect("desk object is valid");
        o.rest_on_table(0.0);
        out.push(o);
    };
    for (i, r) in [0.034, 0.038, 0.042, 0.046, 0.050].into_iter().enumerate() {
        push(ObjectShape::circle(&format!("circle_{i}"), "circle", r));
    }
    for (i, s) in [0.056, 0.062, 0.068, 0.074, 0.080].into_iter().enumerate() {
        push(ObjectShape::polygon(
            &format!("square_{i}"),
            "square",
            &rect(s, s),
        ));
    }
    for (i, (w, h)) in [
        (0.08, 0.065),
        (0.10, 0.07),
        (0.07, 0.10),
        (0.07, 0.075),
        (0.06, 0.09),
    ]
    .into_iter()
    .enumerate()
    {
        push(ObjectShape::polygon(
            &format!("rect_{i}"),
            "rectangle",
            &rect(w, h),
        ));
    }
    for (i, (a, b)) in [
        (0.045, 0.030),
        (0.050, 0.035),
        (0.040, 0.032),
        (0.055, 0.035),
        (0.035, 0.045),
    ]
    .into_iter()
    .enumerate()
    {
        let v: Vec<Vec2<f64>> = (0..12)
            .map(|k| {
                let t = 2.0 * pi * k as f64 / 12.0;
                Vec2::new(a * t.cos(), b * t.sin())
            })
            .collect();
        push(ObjectShape::polygon(&format!("ellipse_{i}"), "ellipse", &v));
    }
    for (i, r) in [0.035, 0.040, 0.045, 0.050, 0.055].into_iter().enumerate() {
        push(ObjectShape::polygon(
            &format!("pentagon_{i}"),
            "pentagon",
            &regular(5, r, pi / 2.0),
        ));
    }
    for (i, r) in [0.032, 0.038, 0.044, 0.050, 0.056].into_iter().enumerate() {
        push(ObjectShape::polygon(
            &format!("hexagon_{i}"),
            "hexagon",
            &regular(6, r, 0.0),
        ));
    }
    for (i, r) in [0.032, 0.038, 0.044, 0.050, 0.056].into_iter().enumerate() {
        push(ObjectShape::polygon(
            &format!("octagon_{i}"),
            "octagon",
            &regular(8, r, pi / 8.0),
        ));
    }
    for (i, (w, h)) in [
        (0.08, 0.065),
        (0.09, 0.07),
        (0.075, 0.06),
        (0.10, 0.075),
        (0.07, 0.065),
    ]
    .into_iter()
    .enumerate()
    {
        push(ObjectShape::polygon(
            &format!("capsule_{i}"),
            "capsule",
            &capsule(w, h),
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Candidate proposals per object.
    pub budget: usize,
    pub n_target: usize,
    /// Ring angle range in degrees, measured from the +x axis.
    pub ring_deg: (f64, f64),
    /// Palm standoff beyond the object's bounding radius, meters.
    pub standoff: (f64, f64),
    /// Uniform wrist-angle noise half width, radians.
    pub theta_noise: f64,
    pub dedup: f64,
    pub keep_per_object: usize,
    /// Normalized closing direction `(proximal, distal)` shared by all fingers.
    pub synergy: (f64, f64),
    /// Uniform jitter half width applied to each synergy component.
    pub synergy_jitter: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            budget: 10000,
            n_target: 20,
            ring_deg: (35.0, 145.0),
            standoff: (0.01, 0.07),
            theta_noise: 0.2,
            dedup: 0.1,
            keep_per_object: 20,
            synergy: (0.5, 1.0),
            synergy_jitter: 0.1,
        }
    }
}

/// Replays a grasp: holds `(wrist, joints)` for the full horizon with zero
/// actions, then squeezes and lifts.
pub fn replay_grasp(
    hand: &HandModel<f64>,
    env_cfg: &EnvConfig,
    object: &ObjectShape<f64>,
    wrist: WristPose<f64>,
    joints: JointVector<f64>,
) -> crate::hand::Result<(bool, f64)> {
    let mut env = Env::reset(
        hand.clone(),
        env_cfg.clone(),
        object.clone(),
        WristSource::Scripted(vec![wrist; env_cfg.horizon]),
        joints,
    )?;
    let zero = [0.0; NUM_JOINTS];
    for _ in 0..env_cfg.horizon {
        env.step(&zero)?;
    }
    let out = env.terminal_squeeze_and_lift()?;
    let quality = if out.success {
        // Re-measure the squeezed contacts before the lift moved the hand.
        let mut probe = env.clone();
        probe.state.wrist = wrist;
        probe.state.object.pose.y -= env_cfg.lift_height;
        closure_margin(
            &probe.contacts(),
            env_cfg.mu,
            probe.state.object.com(),
            object.bounding_radius(),
        )
    } else {
        0.0
    };
    Ok((out.success, quality))
}

/// Largest penetration of any hand body into the object.
fn max_penetration(
    hand: &HandModel<f64>,
    wrist: &WristPose<f64>,
    joints: &JointVector<f64>,
    object: &ObjectShape<f64>,
    bodies: impl Fn(usize) -> bool,
) -> f64 {
    let g = hand.forward_kinematics_unchecked(wrist, joints);
    let deepest = g
        .bodies()
        .enumerate()
        .filter(|(i, _)| bodies(*i))
        .map(|(_, (_, s))| hand.finger_thickness - object.segment_proximity(&s).distance)
        .fold(f64::NEG_INFINITY, f64::max);
    deepest
}

fn hand_above_table(
    hand: &HandModel<f64>,
    wrist: &WristPose<f64>,
    joints: &JointVector<f64>,
) -> bool {
    let g = hand.forward_kinematics_unchecked(wrist, joints);
    let above = g
        .bodies()
        .all(|(_, s)| s.a.y >= hand.finger_thickness && s.b.y >= hand.finger_thickness);
    above
}

/// Closes one finger along direction `u` until it touches the object.
fn close_finger(
    hand: &HandModel<f64>,
    wrist: &WristPose<f64>,
    joints: &mut JointVector<f64>,
    f: usize,
    u: [f64; 2],
    object: &ObjectShape<f64>,
    tol: f64,
) -> bool {
    let (lo0, hi0) = hand.joint_limits[2 * f];
    let (lo1, hi1) = hand.joint_limits[2 * f + 1];
    let at = |s: f64, j: &JointVector<f64>| {
        let mut c = *j;
        c.set_finger(
            f,
            [
                (lo0 + s * u[0] * (hi0 - lo0)).min(hi0),
                (lo1 + s * u[1] * (hi1 - lo1)).min(hi1),
            ],
        );
        c
    };
    let finger = |i: usize| i / 2 == f && i < NUM_JOINTS;
    let pen = |c: &JointVector<f64>| max_penetration(hand, wrist, c, object, finger);
    let smax = 1.0 / u[0].max(u[1]);
    if pen(&at(0.0, joints)) > 0.5 * tol {
        return false;
    }
    if pen(&at(smax, joints)) <= 0.5 * tol {
        return false;
    }
    let (mut a, mut b) = (0.0, smax);
    for _ in 0..40 {
        let m = 0.5 * (a + b);
        if pen(&at(m, joints)) <= 0.5 * tol {
            a = m;
        } else {
            b = m;
        }
    }
    *joints = at(a, joints);
    true
}

/// Rejection-samples verified grasps of `object` (resting at `x = 0`).
pub fn synthesize_grasps<R: Rng + ?Sized>(
    hand: &HandModel<f64>,
    env_cfg: &EnvConfig,
    object: &ObjectShape<f64>,
    cfg: &SynthConfig,
    rng: &mut R,
) -> Result<Vec<GraspExample>> {
    if object.horizontal_extent() > hand.max_aperture() {
        log::warn!("object {} is wider than the hand aperture", object.id);
        return Ok(Vec::new());
    }
    let com = object.com();
    let mut kept: Vec<GraspExample> = Vec::new();
    for _ in 0..cfg.budget {
        if kept.len() >= cfg.n_target {
            break;
        }
        let phi = rng.gen_range(cfg.ring_deg.0..=cfg.ring_deg.1).to_radians();
        let r = object.bounding_radius()
            + hand.finger_thickness
            + rng.gen_range(cfg.standoff.0..=cfg.standoff.1);
        let pos = com + Vec2::from_angle(phi) * r;
        let theta =
            phi - std::f64::consts::FRAC_PI_2 + rng.gen_range(-cfg.theta_noise..=cfg.theta_noise);
        let wrist = Pose2::new(pos.x, pos.y, theta);
        let mut joints = JointVector::zeros();
        if max_penetration(hand, &wrist, &joints, object, |i| i == NUM_JOINTS) > 0.0 {
            continue;
        }
        let mut touched = 0;
        for f in 0..NUM_FINGERS {
            let j = cfg.synergy_jitter;
            let a = (cfg.synergy.0 + rng.gen_range(-j..=j)).clamp(0.05, 1.0);
            let b = (cfg.synergy.1 + rng.gen_range(-j..=j)).clamp(0.05, 1.0);
            if close_finger(
                hand,
                &wrist,
                &mut joints,
                f,
                [a, b],
                object,
                env_cfg.contact_tol,
            ) {
                touched += 1;
            }
        }
        if touched < 2 || !hand_above_table(hand, &wrist, &joints) {
            continue;
        }
        if kept.iter().any(|k| k.joints.distance(&joints) < cfg.dedup) {
            continue;
        }
        let Ok((ok1, quality)) = replay_grasp(hand, env_cfg, object, wrist, joints) else {
            continue;
        };
        if !ok1 {
            continue;
        }
        let (ok2, _) = replay_grasp(hand, env_cfg, object, wrist, joints)?;
        if !ok2 {
            continue;
        }
        let g = hand.forward_kinematics_unchecked(&wrist, &joints);
        kept.push(GraspExample {
            object_id: object.id.clone(),
            wrist,
            joints,
            fingertip_centroid: g.fingertip_centroid(),
            quality,
        });
    }
    if kept.is_empty() {
        log::warn!("no verified grasps found for object {}", object.id);
    }
    Ok(kept)
}

/// Greedy farthest-point selection in joint space, starting from the
/// highest-quality example.
pub fn diversity_filter(examples: &[GraspExample], k: usize) -> Vec<GraspExample> {
    if examples.len() <= k {
        return examples.to_vec();
    }
    if k == 0 {
        return Vec::new();
    }
    let first = (0..examples.len())
        .max_by(|&a, &b| {
            examples[a]
                .quality
                .total_cmp(&examples[b].quality)
                .then(b.cmp(&a))
        })
        .unwrap_or(0);
    let mut chosen = vec![first];
    let mut dmin: Vec<f64> = examples
        .iter()
        .map(|e| e.joints.distance(&examples[first].joints))
        .collect();
    while chosen.len() < k {
        let next = (0..examples.len())
            .filter(|i| !chosen.contains(i))
            .max_by(|&a, &b| dmin[a].total_cmp(&dmin[b]).then(b.cmp(&a)))
            .unwrap();
        chosen.push(next);
        for (i, e) in examples.iter().enumerate() {
            dmin[i] = dmin[i].min(e.joints.distance(&examples[next].joints));
        }
    }
    chosen.into_iter().map(|i| examples[i].clone()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub unseen_categories: usize,
    /// Fraction of each remaining category held out as unseen instances.
    pub seen_unseen_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            unseen_categories: 2,
            seen_unseen_fraction: 0.2,
        }
    }
}

/// Assigns each object (id, category) to a split.
pub fn split_objects<R: Rng + ?Sized>(
    objects: &[(String, String)],
    cfg: &SplitConfig,
    rng: &mut R,
) -> Result<BTreeMap<String, Split>> {
    let mut cats: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (id, cat) in objects {
        cats.entry(cat.as_str()).or_default().push(id.as_str());
    }
    if cats.len() < 3 || cfg.unseen_categories + 1 > cats.len() {
        return Err(DataError::Invalid(format!(
            "need at least 3 categories and more than {} of them, found {}",
            cfg.unseen_categories,
            cats.len()
        )));
    }
    let mut names: Vec<&str> = cats.keys().copied().collect();
    names.shuffle(rng);
    let mut out = BTreeMap::new();
    for (i, cat) in names.iter().enumerate() {
        let mut ids = cats[cat].clone();
        if i < cfg.unseen_categories {
            for id in ids {
                out.insert(id.to_string(), Split::UnseenCat);
            }
            continue;
        }
        ids.shuffle(rng);
        let held =
            ((ids.len() as f64 * cfg.seen_unseen_fraction).round() as usize).min(ids.len() - 1);
        for (j, id) in ids.into_iter().enumerate() {
            let s = if j < held {
                Split::SeenCatUnseenInst
            } else {
                Split::Train
            };
            out.insert(id.to_string(), s);
        }
    }
    Ok(out)
}

pub const DATASET_MAGIC: &str = "HGFDATA";
pub const DATASET_VERSION: u32 = 1;

/// Writes the dataset.
///
/// ```text
/// HGFDATA <version> <hand hash>
/// split <object_id> <split name>                          (one per object)
/// grasp <object_id> <x> <y> <theta> <q0>..<q5> <quality>  (one per example)
/// ```
/// Reals use 17 significant digits.
pub fn save_dataset(ds: &GraspDataset, hand: &HandModel<f64>, path: &Path) -> Result<()> {
    let mut s = format!("{DATASET_MAGIC} {DATASET_VERSION} {}\n", hand_hash(hand));
    for (id, split) in &ds.splits {
        writeln!(s, "split {id} {}", split.name()).unwrap();
    }
    for e in &ds.examples {
        write!(s, "grasp {}", e.object_id).unwrap();
        for v in [e.wrist.x, e.wrist.y, e.wrist.theta]
            .iter()
            .chain(e.joints.q.iter())
            .chain(std::iter::once(&e.quality))
        {
            write!(s, " {v:.16e}").unwrap();
        }
        s.push('\n');
    }
    crate::io_util::write_atomic(path, s.as_bytes())?;
    Ok(())
}

pub fn load_dataset(path: &Path, hand: &HandModel<f64>) -> Result<GraspDataset> {
    parse_dataset(&std::fs::read_to_string(path)?, hand)
}

pub fn parse_dataset(text: &str, hand: &HandModel<f64>) -> Result<GraspDataset> {
    let mut lines = text.lines().enumerate();
    let perr = |line: usize, m: &str| DataError::Parse {
        line,
        message: m.to_string(),
    };
    let (_, header) = lines.next().ok_or_else(|| perr(1, "empty file"))?;
    let h: Vec<&str> = header.split_whitespace().collect();
    if h.len() != 3 || h[0] != DATASET_MAGIC {
        return Err(perr(1, "bad header"));
    }
    let version: u32 = h[1].parse().map_err(|_| perr(1, "bad version"))?;
    if version != DATASET_VERSION {
        return Err(DataError::Version {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let expected = hand_hash(hand);
    if h[2] != expected {
        return Err(DataError::HandMismatch {
            found: h[2].to_string(),
            expected,
        });
    }
    let mut ds = GraspDataset::default();
    for (i, line) in lines {
        let ln = i + 1;
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.first() {
            None => continue,
            Some(&"split") if f.len() == 3 => {
                let s = Split::from_name(f[2]).ok_or_else(|| perr(ln, "unknown split"))?;
                ds.splits.insert(f[1].to_string(), s);
            }
            Some(&"grasp") if f.len() == 2 + 3 + NUM_JOINTS + 1 => {
                let v = f[2..]
                    .iter()
                    .map(|s| s.parse::<f64>().map_err(|_| perr(ln, "bad number")))
                    .collect::<Result<Vec<f64>>>()?;
                let mut q = [0.0; NUM_JOINTS];
                q.copy_from_slice(&v[3..3 + NUM_JOINTS]);
                let wrist = Pose2::new(v[0], v[1], v[2]);
                let joints = JointVector::new(q);
                hand.check_joints(&joints)
                    .map_err(|e| perr(ln, &e.to_string()))?;
                let g = hand.forward_kinematics_unchecked(&wrist, &joints);
                ds.examples.push(GraspExample {
                    object_id: f[1].to_string(),
                    wrist,
                    joints,
                    fingertip_centroid: g.fingertip_centroid(),
                    quality: v[3 + NUM_JOINTS],
                });
            }
            Some(_) => return Err(perr(ln, "malformed record")),
        }
    }
    if let Some(e) = ds
        .examples
        .iter()
        .find(|e| !ds.splits.contains_key(&e.object_id))
    {
        return Err(DataError::Invalid(format!(
            "object {} has no split",
            e.object_id
        )));
    }
    Ok(ds)
}

/// Replays every `stride`-th example and reports the failures.
pub fn verify_examples(
    ds: &GraspDataset,
    objects: &[ObjectShape<f64>],
    hand: &HandModel<f64>,
    env_cfg: &EnvConfig,
    stride: usize,
) -> Result<Vec<usize>> {
    let mut bad = Vec::new();
    for (i, e) in ds.examples.iter().enumerate().step_by(stride.max(1)) {
        let obj = objects
            .iter()
            .find(|o| o.id == e.object_id)
            .ok_or_else(|| DataError::Invalid(format!("unknown object {}", e.object_id)))?;
        let mut o = obj.clone();
        o.rest_on_table(0.0);
        if !replay_grasp(hand, env_cfg, &o, e.wrist, e.joints)?.0 {
            bad.push(i);
        }
    }
    Ok(bad)
}
