//! Grasp metrics, the multi-seed evaluation protocol and report files.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::geom::Pose2;
use crate::graspdata::{diversity_filter, GraspDataset, GraspExample, Split};
use crate::hand::{EnvConfig, JointVector, ObjectShape};
use crate::rl::{
    sample_feasible_episode, ActMode, Agent, EpisodeResult, EpisodeRunner, RewardConfig, RlError,
    WristNoise,
};
use crate::trajgen::{EpisodeSpec, TrajGenConfig, TrajectoryPattern};
use crate::Real;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("evaluation config: {0}")]
    Config(String),
    #[error("adaptability histogram needs {expected} targets per object, {object} has {got}")]
    UnevenTargets {
        object: String,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Rl(#[from] RlError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Joint-space distance to the target grasp, radians.
pub fn posture_metric(final_joints: &JointVector<f64>, target: &GraspExample) -> f64 {
    final_joints.distance(&target.joints)
}

/// Object translation (meters) and `1 - cos` of its rotation between two poses.
pub fn stability_metric(initial: &Pose2<f64>, last: &Pose2<f64>) -> (f64, f64) {
    let trans = (last.translation() - initial.translation()).norm();
    let rot = 1.0 - (last.theta - initial.theta).cos();
    (trans, rot.max(0.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub object_id: String,
    /// Index into the object's evaluated targets.
    pub target: usize,
    pub seed: u64,
    pub repeat: usize,
    pub success: bool,
    pub posture: f64,
    pub stability_trans: f64,
    pub stability_rot: f64,
}

impl EpisodeRecord {
    pub fn from_episode(e: &EpisodeResult, target: usize, seed: u64, repeat: usize) -> Self {
        let (stability_trans, stability_rot) =
            stability_metric(&e.initial_object_pose, &e.final_object_pose);
        Self {
            object_id: e.object_id.clone(),
            target,
            seed,
            repeat,
            success: e.outcome.success,
            posture: posture_metric(&e.final_joints, &e.target),
            stability_trans,
            stability_rot,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    /// Population mean and standard deviation.
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self::default();
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Self {
            mean,
            sd: var.sqrt(),
        }
    }
}

/// Per-seed means.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeedSummary {
    pub seed: u64,
    pub episodes: usize,
    pub success: f64,
    pub posture: f64,
    pub stability_trans: f64,
    pub stability_rot: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub label: String,
    pub config_hash: String,
    pub per_seed: Vec<SeedSummary>,
    pub success: MeanSd,
    pub posture: MeanSd,
    pub stability_trans: MeanSd,
    pub stability_rot: MeanSd,
    /// Fraction of objects with `k` of their targets grasped at least once, `k = 0..=5`.
    pub adaptability: Option<[f64; TARGETS_PER_OBJECT + 1]>,
}

pub const TARGETS_PER_OBJECT: usize = 5;

/// Bins objects by how many of their targets succeeded at least once.
pub fn adaptability_histogram(records: &[EpisodeRecord]) -> Result<[f64; TARGETS_PER_OBJECT + 1]> {
    let mut objects: Vec<&str> = records.iter().map(|r| r.object_id.as_str()).collect();
    objects.sort_unstable();
    objects.dedup();
    if objects.is_empty() {
        return Err(EvalError::Config("no records".into()));
    }
    let mut hist = [0.0; TARGETS_PER_OBJECT + 1];
    for o in &objects {
        let mine: Vec<&EpisodeRecord> = records.iter().filter(|r| r.object_id == *o).collect();
        let mut targets: Vec<usize> = mine.iter().map(|r| r.target).collect();
        targets.sort_unstable();
        targets.dedup();
        if targets.len() != TARGETS_PER_OBJECT {
            return Err(EvalError::UnevenTargets {
                object: o.to_string(),
                expected: TARGETS_PER_OBJECT,
                got: targets.len(),
            });
        }
        let hit = targets
            .iter()
            .filter(|&&t| mine.iter().any(|r| r.target == t && r.success))
            .count();
        hist[hit] += 1.0;
    }
    let n = objects.len() as f64;
    hist.iter_mut().for_each(|h| *h /= n);
    Ok(hist)
}

/// Aggregates records into a report; seeds appear in first-seen order.
pub fn aggregate(records: &[EpisodeRecord], label: &str, config_hash: &str) -> MetricsReport {
    let mut seeds: Vec<u64> = Vec::new();
    for r in records {
        if !seeds.contains(&r.seed) {
            seeds.push(r.seed);
        }
    }
    let per_seed: Vec<SeedSummary> = seeds
        .iter()
        .map(|&seed| {
            let rs: Vec<&EpisodeRecord> = records.iter().filter(|r| r.seed == seed).collect();
            let n = rs.len().max(1) as f64;
            SeedSummary {
                seed,
                episodes: rs.len(),
                success: rs.iter().filter(|r| r.success).count() as f64 / n,
                posture: rs.iter().map(|r| r.posture).sum::<f64>() / n,
                stability_trans: rs.iter().map(|r| r.stability_trans).sum::<f64>() / n,
                stability_rot: rs.iter().map(|r| r.stability_rot).sum::<f64>() / n,
            }
        })
        .collect();
    let col = |f: fn(&SeedSummary) -> f64| MeanSd::of(&per_seed.iter().map(f).collect::<Vec<_>>());
    let adaptability = match adaptability_histogram(records) {
        Ok(h) => Some(h),
        Err(e) => {
            log::warn!("{label}: no adaptability histogram: {e}");
            None
        }
    };
    MetricsReport {
        label: label.to_string(),
        config_hash: config_hash.to_string(),
        success: col(|s| s.success),
        posture: col(|s| s.posture),
        stability_trans: col(|s| s.stability_trans),
        stability_rot: col(|s| s.stability_rot),
        per_seed,
        adaptability,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub seeds: Vec<u64>,
    pub repeats: usize,
    pub targets_per_object: usize,
    pub noise: Option<WristNoise>,
    pub record_trace: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
            repeats: 5,
            targets_per_object: TARGETS_PER_OBJECT,
            noise: None,
            record_trace: false,
        }
    }
}

/// Objects of one split with their evaluation targets.
#[derive(Debug, Clone)]
pub struct EvalSuite {
    pub split: String,
    pub objects: Vec<(ObjectShape<f64>, Vec<GraspExample>)>,
}

impl EvalSuite {
    /// Picks `targets` diverse grasps per object of `split`; objects with
    /// fewer grasps are skipped, and at most `max_objects` are kept.
    pub fn from_dataset(
        ds: &GraspDataset,
        library: &[ObjectShape<f64>],
        split: Split,
        targets: usize,
        max_objects: Option<usize>,
    ) -> Result<Self> {
        let mut objects = Vec::new();
        for id in ds.objects_in(split) {
            if max_objects.is_some_and(|m| objects.len() >= m) {
                break;
            }
            let Some(o) = library.iter().find(|o| o.id == id) else {
                return Err(EvalError::Config(format!(
                    "object {id} missing from the library"
                )));
            };
            let ex: Vec<GraspExample> = ds.examples_for(&id).into_iter().cloned().collect();
            if ex.is_empty() || ex.len() < targets {
                log::warn!(
                    "object {id} has {} grasp targets, needs {targets}; skipped",
                    ex.len()
                );
                continue;
            }
            objects.push((o.clone(), diversity_filter(&ex, targets)));
        }
        if objects.is_empty() {
            return Err(EvalError::Config(format!(
                "split {} has no evaluable objects",
                split.name()
            )));
        }
        Ok(Self {
            split: split.name().to_string(),
            objects,
        })
    }
}

/// Shared inputs of every episode in an evaluation.
pub struct EvalContext<'a> {
    pub env: &'a EnvConfig,
    pub reward: &'a RewardConfig,
    pub traj: &'a TrajGenConfig,
    pub patterns: &'a [TrajectoryPattern],
}

/// Episode specs for one seed, ordered object, target, repeat.
pub fn seed_specs(
    suite: &EvalSuite,
    ctx: &EvalContext<'_>,
    hand: &crate::hand::HandModel<f64>,
    seed: u64,
    repeats: usize,
) -> Result<Vec<(usize, usize, EpisodeSpec)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (object, targets) in &suite.objects {
        for (ti, target) in targets.iter().enumerate() {
            for rep in 0..repeats {
                let spec = sample_feasible_episode(
                    hand,
                    ctx.env,
                    object,
                    target,
                    ctx.patterns,
                    ctx.traj,
                    &mut rng,
                )?;
                out.push((ti, rep, spec));
            }
        }
    }
    Ok(out)
}

/// Runs the protocol for one agent: every seed draws its own trajectories
/// and observation noise; the policy acts with its mean action.
pub fn evaluate<T: Real>(
    agent: Agent<'_, T>,
    suite: &EvalSuite,
    ctx: &EvalContext<'_>,
    cfg: &EvalConfig,
) -> Result<(Vec<EpisodeRecord>, Vec<EpisodeResult>)> {
    if cfg.seeds.is_empty() || cfg.repeats == 0 {
        return Err(EvalError::Config(
            "need at least one seed and one repeat".into(),
        ));
    }
    agent.validate()?;
    let hand = agent.hand;
    let runner = EpisodeRunner {
        agent,
        env_config: ctx.env,
        reward: ctx.reward,
        noise: cfg.noise.filter(|n| !n.is_zero()),
        mode: ActMode::Mean,
        record_trace: cfg.record_trace,
    };
    let mut records = Vec::new();
    let mut episodes = Vec::new();
    for &seed in &cfg.seeds {
        let specs = seed_specs(suite, ctx, hand, seed, cfg.repeats)?;
        let plain: Vec<EpisodeSpec> = specs.iter().map(|(_, _, s)| s.clone()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0b5e);
        let results = runner.run(&plain, &mut rng)?;
        for ((ti, rep, _), e) in specs.iter().zip(&results) {
            records.push(EpisodeRecord::from_episode(e, *ti, seed, *rep));
        }
        episodes.extend(results);
    }
    Ok((records, episodes))
}

/// Text report: one section per report, fixed column order.
pub fn format_reports(reports: &[MetricsReport]) -> String {
    let mut s = String::new();
    for r in reports {
        let _ = writeln!(s, "[{}]", r.label);
        let _ = writeln!(s, "config {}", r.config_hash);
        let _ = writeln!(
            s,
            "success {:.4} {:.4} posture {:.4} {:.4} trans_cm {:.4} {:.4} rot {:.5} {:.5}",
            r.success.mean,
            r.success.sd,
            r.posture.mean,
            r.posture.sd,
            100.0 * r.stability_trans.mean,
            100.0 * r.stability_trans.sd,
            r.stability_rot.mean,
            r.stability_rot.sd
        );
        for p in &r.per_seed {
            let _ = writeln!(
                s,
                "seed {} episodes {} success {:.4} posture {:.4} trans_cm {:.4} rot {:.5}",
                p.seed,
                p.episodes,
                p.success,
                p.posture,
                100.0 * p.stability_trans,
                p.stability_rot
            );
        }
        if let Some(h) = r.adaptability {
            let bins: Vec<String> = h.iter().map(|v| format!("{v:.3}")).collect();
            let _ = writeln!(s, "adaptability {}", bins.join(" "));
        }
        s.push('\n');
    }
    s
}

pub fn write_reports(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    std::fs::write(path, format_reports(reports))?;
    Ok(())
}
