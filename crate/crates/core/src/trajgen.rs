//! Human-like wrist trajectories that end at a target grasp.
//!
//! A trajectory starts behind the grasp along the approach axis and follows a
//! blend of two normalized progress patterns per channel (x, y, theta).

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geom::{wrap_angle, Pose2};
use crate::graspdata::GraspExample;
use crate::hand::{ObjectShape, WristPose};

pub const PATTERN_LEN: usize = 50;

#[derive(Debug, thiserror::Error)]
pub enum TrajError {
    #[error("invalid pattern: {0}")]
    Pattern(String),
    #[error("degenerate grasp target: {0}")]
    Degenerate(String),
    #[error("pattern library needs at least 2 patterns, got {0}")]
    TooFewPatterns(usize),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrajError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPattern {
    /// Progress in `[0, 1]` for the x, y, and theta channels.
    pub samples: Vec<[f64; 3]>,
}

impl TrajectoryPattern {
    pub fn from_channels(f: impl Fn(usize, f64) -> f64) -> Self {
        let samples = (0..PATTERN_LEN)
            .map(|k| {
                let u = k as f64 / (PATTERN_LEN - 1) as f64;
                [f(0, u), f(1, u), f(2, u)]
            })
            .collect();
        Self { samples }
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.len() != PATTERN_LEN {
            return Err(TrajError::Pattern(format!(
                "{} samples, expected {PATTERN_LEN}",
                self.samples.len()
            )));
        }
        let last = PATTERN_LEN - 1;
        for c in 0..3 {
            if self.samples[0][c] != 0.0 || self.samples[last][c] != 1.0 {
                return Err(TrajError::Pattern(format!(
                    "channel {c} endpoints must be 0 and 1"
                )));
            }
        }
        if self
            .samples
            .iter()
            .flatten()
            .any(|v| !(0.0..=1.0).contains(v))
        {
            return Err(TrajError::Pattern("values must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

pub fn min_jerk(u: f64) -> f64 {
    u * u * u * (10.0 - 15.0 * u + 6.0 * u * u)
}

/// Element-wise `c * p1 + (1 - c) * p2`.
pub fn blend_patterns(
    p1: &TrajectoryPattern,
    p2: &TrajectoryPattern,
    c: f64,
) -> Result<TrajectoryPattern> {
    if p1.samples.len() != p2.samples.len() {
        return Err(TrajError::Pattern("mismatched pattern lengths".into()));
    }
    let samples = p1
        .samples
        .iter()
        .zip(&p2.samples)
        .map(|(a, b)| {
            let mut o = [0.0; 3];
            for k in 0..3 {
                o[k] = (c * a[k] + (1.0 - c) * b[k]).clamp(0.0, 1.0);
            }
            o
        })
        .collect::<Vec<_>>();
    let mut p = TrajectoryPattern { samples };
    // Pin endpoints against rounding.
    p.samples[0] = [0.0; 3];
    if let Some(l) = p.samples.last_mut() {
        *l = [1.0; 3];
    }
    Ok(p)
}

/// Per-channel interpolation from `init` to `fin`, theta along the shorter arc.
pub fn generate_trajectory(
    init: &WristPose<f64>,
    fin: &WristPose<f64>,
    pattern: &TrajectoryPattern,
) -> Vec<WristPose<f64>> {
    let dth = wrap_angle(fin.theta - init.theta);
    let n = pattern.samples.len();
    let mut out: Vec<WristPose<f64>> = pattern
        .samples
        .iter()
        .map(|s| {
            Pose2::new(
                init.x + s[0] * (fin.x - init.x),
                init.y + s[1] * (fin.y - init.y),
                wrap_angle(init.theta + s[2] * dth),
            )
        })
        .collect();
    if n > 0 {
        out[0] = *init;
        out[n - 1] = *fin;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajGenConfig {
    /// Initial distance behind the grasp, meters.
    pub distance: (f64, f64),
    pub max_deviation_deg: f64,
    /// Rotation-change distribution: normal, truncated to `[0, rot_max]`.
    pub rot_mean: f64,
    pub rot_sd: f64,
    pub rot_max: f64,
    /// Half width of the uniform object shift along the table.
    pub object_shift: f64,
    pub n_patterns: usize,
    pub n_test_patterns: usize,
}

impl Default for TrajGenConfig {
    fn default() -> Self {
        Self {
            distance: (0.15, 0.2),
            max_deviation_deg: 20.0,
            rot_mean: 0.5,
            rot_sd: 0.3,
            rot_max: std::f64::consts::FRAC_PI_2,
            object_shift: 0.5,
            n_patterns: 20,
            n_test_patterns: 5,
        }
    }
}

/// Draws the rotation change from the truncated normal.
pub fn sample_rotation_change<R: Rng + ?Sized>(cfg: &TrajGenConfig, rng: &mut R) -> f64 {
    if cfg.rot_sd <= 0.0 {
        return cfg.rot_mean.clamp(0.0, cfg.rot_max);
    }
    let n = Normal::new(cfg.rot_mean, cfg.rot_sd).expect("finite sd");
    for _ in 0..1000 {
        let v = n.sample(rng);
        if (0.0..=cfg.rot_max).contains(&v) {
            return v;
        }
    }
    cfg.rot_mean.clamp(0.0, cfg.rot_max)
}

/// Initial wrist from explicit draws: distance `d`, signed deviation `dev`
/// (radians), and rotation change `delta_a`.
pub fn initial_wrist_from(
    target: &GraspExample,
    d: f64,
    dev: f64,
    delta_a: f64,
) -> Result<WristPose<f64>> {
    let axis = (target.wrist.translation() - target.fingertip_centroid)
        .normalized()
        .ok_or_else(|| {
            TrajError::Degenerate("fingertip centroid coincides with the wrist".into())
        })?;
    let p = target.wrist.translation() + axis.rotate(dev) * d;
    let theta = wrap_angle(target.wrist.theta * (1.0 - delta_a / (2.0 * std::f64::consts::PI)));
    Ok(Pose2::new(p.x, p.y, theta))
}

pub fn sample_initial_wrist<R: Rng + ?Sized>(
    target: &GraspExample,
    cfg: &TrajGenConfig,
    rng: &mut R,
) -> Result<WristPose<f64>> {
    let d = rng.gen_range(cfg.distance.0..=cfg.distance.1);
    let mut dev = rng.gen_range(0.0..=cfg.max_deviation_deg).to_radians();
    if rng.gen_bool(0.5) {
        dev = -dev;
    }
    let delta_a = sample_rotation_change(cfg, rng);
    initial_wrist_from(target, d, dev, delta_a)
}

/// Synthetic library: minimum-jerk and s-curve base profiles mixed across
/// channels, plus small smooth perturbations.
pub fn make_pattern_library<R: Rng + ?Sized>(
    n: usize,
    rng: &mut R,
) -> Result<Vec<TrajectoryPattern>> {
    if n < 2 {
        return Err(TrajError::TooFewPatterns(n));
    }
    type Profile = Box<dyn Fn(f64) -> f64>;
    let mut bases: Vec<Profile> = vec![Box::new(min_jerk), Box::new(|u: f64| u)];
    for p in [1.6, 2.2, 3.0] {
        bases.push(Box::new(move |u: f64| 1.0 - (1.0 - u).powf(p)));
        bases.push(Box::new(move |u: f64| u.powf(p)));
    }
    for k in [0.35, 0.65] {
        // Logistic s-curve centered at k, renormalized to hit 0 and 1.
        bases.push(Box::new(move |u: f64| {
            let s = |x: f64| 1.0 / (1.0 + (-12.0 * (x - k)).exp());
            (s(u) - s(0.0)) / (s(1.0) - s(0.0))
        }));
    }
    let mut out: Vec<TrajectoryPattern> = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n {
        attempts += 1;
        let idx: [usize; 3] = [
            rng.gen_range(0..bases.len()),
            rng.gen_range(0..bases.len()),
            rng.gen_range(0..bases.len()),
        ];
        let perturb = out.len() >= bases.len() || attempts > 50 * n;
        let amp: [f64; 3] = if perturb {
            [
                rng.gen_range(-0.08..0.08),
                rng.gen_range(-0.08..0.08),
                rng.gen_range(-0.08..0.08),
            ]
        } else {
            [0.0; 3]
        };
        let pat = TrajectoryPattern::from_channels(|c, u| {
            let v = bases[idx[c]](u)
                + amp[c] * (std::f64::consts::PI * u).sin() * (std::f64::consts::PI * u).sin();
            v.clamp(0.0, 1.0)
        });
        let mut pat = pat;
        pat.samples[0] = [0.0; 3];
        pat.samples[PATTERN_LEN - 1] = [1.0; 3];
        if out.iter().all(|p| pattern_distance(p, &pat) > 1e-3) {
            out.push(pat);
        }
    }
    Ok(out)
}

fn pattern_distance(a: &TrajectoryPattern, b: &TrajectoryPattern) -> f64 {
    a.samples
        .iter()
        .zip(&b.samples)
        .flat_map(|(x, y)| (0..3).map(move |c| (x[c] - y[c]).abs()))
        .fold(0.0, f64::max)
}

/// Shuffles and splits into (train, test).
pub fn split_patterns<R: Rng + ?Sized>(
    mut lib: Vec<TrajectoryPattern>,
    n_test: usize,
    rng: &mut R,
) -> (Vec<TrajectoryPattern>, Vec<TrajectoryPattern>) {
    lib.shuffle(rng);
    let cut = lib.len().saturating_sub(n_test);
    let test = lib.split_off(cut);
    (lib, test)
}

pub const PATTERN_HEADER: &str = "HGFPAT 1";

/// Pattern file: header line, then per pattern a `pattern <index>` line
/// followed by 50 lines of `x y theta` progress values.
pub fn write_patterns(patterns: &[TrajectoryPattern], path: &Path) -> Result<()> {
    let mut s = format!("{PATTERN_HEADER}\n");
    for (i, p) in patterns.iter().enumerate() {
        writeln!(s, "pattern {i}").unwrap();
        for v in &p.samples {
            writeln!(s, "{:.17e} {:.17e} {:.17e}", v[0], v[1], v[2]).unwrap();
        }
    }
    crate::io_util::write_atomic(path, s.as_bytes())?;
    Ok(())
}

pub fn read_patterns(path: &Path) -> Result<Vec<TrajectoryPattern>> {
    parse_patterns(&std::fs::read_to_string(path)?)
}

pub fn parse_patterns(text: &str) -> Result<Vec<TrajectoryPattern>> {
    let mut lines = text.lines().enumerate();
    let perr = |line: usize, m: &str| TrajError::Parse {
        line,
        message: m.to_string(),
    };
    match lines.next() {
        Some((_, h)) if h.trim() == PATTERN_HEADER => {}
        _ => return Err(perr(1, "bad header")),
    }
    let mut out: Vec<TrajectoryPattern> = Vec::new();
    for (i, line) in lines {
        let ln = i + 1;
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        if f[0] == "pattern" {
            if let Some(p) = out.last() {
                p.validate().map_err(|e| perr(ln, &e.to_string()))?;
            }
            out.push(TrajectoryPattern {
                samples: Vec::new(),
            });
            continue;
        }
        let cur = out
            .last_mut()
            .ok_or_else(|| perr(ln, "values before first pattern"))?;
        if f.len() != 3 {
            return Err(perr(ln, "expected 3 values"));
        }
        let mut v = [0.0; 3];
        for k in 0..3 {
            v[k] = f[k].parse().map_err(|_| perr(ln, "bad number"))?;
        }
        cur.samples.push(v);
    }
    for p in &out {
        p.validate()?;
    }
    Ok(out)
}

/// One episode's scene: the shifted object, its target grasp, and the wrist
/// trajectory ending there.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSpec {
    pub object: ObjectShape<f64>,
    pub target: GraspExample,
    pub trajectory: Vec<WristPose<f64>>,
}

/// Per-environment grasp picker: never repeats the previous target and
/// cycles through all targets before clearing its history.
#[derive(Debug, Clone, Default)]
pub struct GraspPicker {
    history: Vec<usize>,
    last: Option<usize>,
}

impl GraspPicker {
    pub fn pick<R: Rng + ?Sized>(&mut self, n: usize, rng: &mut R) -> usize {
        if n <= 1 {
            self.last = Some(0);
            return 0;
        }
        let mut free: Vec<usize> = (0..n).filter(|i| !self.history.contains(i)).collect();
        if free.is_empty() {
            self.history.clear();
            free = (0..n).filter(|&i| Some(i) != self.last).collect();
        }
        let i = free[rng.gen_range(0..free.len())];
        self.history.push(i);
        self.last = Some(i);
        i
    }
}

/// Samples a full episode for `target` on `object` (both given at `x = 0`).
pub fn sample_episode<R: Rng + ?Sized>(
    object: &ObjectShape<f64>,
    target: &GraspExample,
    patterns: &[TrajectoryPattern],
    cfg: &TrajGenConfig,
    rng: &mut R,
) -> Result<EpisodeSpec> {
    if patterns.is_empty() {
        return Err(TrajError::TooFewPatterns(0));
    }
    let shift = if cfg.object_shift > 0.0 {
        rng.gen_range(-cfg.object_shift..cfg.object_shift)
    } else {
        0.0
    };
    let mut obj = object.clone();
    obj.rest_on_table(object.pose.x + shift);
    let target = target.shifted(shift);
    let init = sample_initial_wrist(&target, cfg, rng)?;
    let i1 = rng.gen_range(0..patterns.len());
    let i2 = rng.gen_range(0..patterns.len());
    let c = rng.gen_range(0.0..1.0);
    let pattern = blend_patterns(&patterns[i1], &patterns[i2], c)?;
    let trajectory = generate_trajectory(&init, &target.wrist, &pattern);
    Ok(EpisodeSpec {
        object: obj,
        target,
        trajectory,
    })
}
