//! Residual policy over the primitive action: a Gaussian actor producing
//! scaling and residual actions, a value critic, the shaped rewards, and
//! clipped-surrogate training against a frozen gradient field.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{Pose2, Vec2};
use crate::graspdata::GraspExample;
use crate::graspgf::{
    cloud_in_wrist_frame, primitive_scores, unit_max, PrimitiveQuery, ScoreModel,
};
use crate::hand::{
    Env, EnvConfig, EnvError, HandGeometry, HandModel, JointVector, LiftOutcome, ObjectShape,
    WristPose, WristSource, NUM_JOINTS,
};
use crate::nn::{
    clip_grad_norm, Activation, AdamConfig, Checkpoint, Mlp, MlpCache, MlpSpec, NnError, OptState,
    ParamSet, SetCache, SetEncoder, SetEncoderSpec, TensorBuf,
};
use crate::scalar::Real;
use crate::trajgen::{sample_episode, EpisodeSpec, TrajError, TrajGenConfig, TrajectoryPattern};

/// Wrist poses in the observation history.
pub const HISTORY_LEN: usize = 5;
/// Actor output: six scaling entries followed by six residual entries.
pub const RAW_DIM: usize = 2 * NUM_JOINTS;
const HISTORY_WIDTH: usize = 3 * HISTORY_LEN;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Error)]
pub enum RlError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("curve file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Traj(#[from] TrajError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, RlError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub lambda_s: f64,
    pub lambda_a: f64,
    pub lambda_h: f64,
    /// The alignment reward is paid only on steps divisible by this.
    pub sim_frequency: usize,
    /// Weight of the fingertip distance penalty used without the gradient field.
    pub fingertip_coef: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            lambda_s: 1.0,
            lambda_a: 0.09,
            lambda_h: 0.5,
            sim_frequency: 5,
            fingertip_coef: 1.0,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        let w = [
            self.lambda_s,
            self.lambda_a,
            self.lambda_h,
            self.fingertip_coef,
        ];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || self.sim_frequency == 0 {
            return Err(RlError::Config(format!("invalid reward config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    /// Rollout length per environment; equals the episode horizon.
    pub nsteps: usize,
    pub epochs: usize,
    pub minibatch: usize,
    pub num_envs: usize,
    pub lr: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub total_steps: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            nsteps: 50,
            epochs: 2,
            minibatch: 64,
            num_envs: 64,
            lr: 3e-4,
            entropy_coef: 0.003,
            value_coef: 0.5,
            max_grad_norm: 0.5,
            total_steps: 200_000,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self, env: &EnvConfig) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let ok = unit(self.gamma)
            && unit(self.gae_lambda)
            && self.clip > 0.0
            && self.epochs > 0
            && self.minibatch > 0
            && self.num_envs > 0
            && self.lr > 0.0
            && self.entropy_coef >= 0.0
            && self.value_coef >= 0.0
            && self.max_grad_norm > 0.0;
        if !ok {
            return Err(RlError::Config(format!(
                "invalid optimizer config {self:?}"
            )));
        }
        if self.nsteps != env.horizon {
            return Err(RlError::Config(format!(
                "rollout length {} must equal the episode horizon {}",
                self.nsteps, env.horizon
            )));
        }
        Ok(())
    }

    pub fn iterations(&self) -> usize {
        let per = self.num_envs * self.nsteps;
        self.total_steps.div_ceil(per).max(1)
    }
}

/// Which action modules are switched off.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    pub no_gf: bool,
    pub no_rl: bool,
    pub no_scale: bool,
    pub no_residual: bool,
    pub no_collision: bool,
}

impl AblationFlags {
    pub fn validate(&self) -> Result<()> {
        if self.no_gf && self.no_rl {
            return Err(RlError::Config("no_gf and no_rl cannot both be set".into()));
        }
        Ok(())
    }

    /// `"full"` or the set flags joined by `+`.
    pub fn name(&self) -> String {
        let parts: Vec<&str> = [
            (self.no_gf, "no_gf"),
            (self.no_rl, "no_rl"),
            (self.no_scale, "no_scale"),
            (self.no_residual, "no_residual"),
            (self.no_collision, "no_collision"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join("+")
        }
    }

    /// Parses the output of [`AblationFlags::name`].
    pub fn parse(s: &str) -> Result<Self> {
        let mut f = Self::default();
        if s.trim() == "full" || s.trim().is_empty() {
            return Ok(f);
        }
        for p in s.split(['+', ',']) {
            match p.trim() {
                "no_gf" => f.no_gf = true,
                "no_rl" => f.no_rl = true,
                "no_scale" => f.no_scale = true,
                "no_residual" => f.no_residual = true,
                "no_collision" => f.no_collision = true,
                other => return Err(RlError::Config(format!("unknown flag {other:?}"))),
            }
        }
        f.validate()?;
        Ok(f)
    }

    /// Actor outputs that influence the composed action.
    pub fn active_dims(&self) -> [bool; RAW_DIM] {
        let scale = !self.no_scale && !self.no_gf && !self.no_rl;
        let residual = !self.no_residual && !self.no_rl;
        let mut m = [false; RAW_DIM];
        m[..NUM_JOINTS].fill(scale);
        m[NUM_JOINTS..].fill(residual);
        m
    }
}

/// `1 + tanh(raw)`, in `(0, 2)`.
pub fn scale_map(raw: &[f64; NUM_JOINTS]) -> [f64; NUM_JOINTS] {
    raw.map(|r| 1.0 + r.tanh())
}

/// `clip(a_p * a_s + a_r, -1, 1)`.
pub fn combine_action(
    a_p: &[f64; NUM_JOINTS],
    a_s: &[f64; NUM_JOINTS],
    a_r: &[f64; NUM_JOINTS],
) -> [f64; NUM_JOINTS] {
    let mut a = [0.0; NUM_JOINTS];
    for k in 0..NUM_JOINTS {
        a[k] = (a_p[k] * a_s[k] + a_r[k]).clamp(-1.0, 1.0);
    }
    a
}

/// Scaling and residual actions selected from a raw actor output.
pub fn split_raw(
    raw: &[f64; RAW_DIM],
    flags: &AblationFlags,
) -> ([f64; NUM_JOINTS], [f64; NUM_JOINTS]) {
    let m = flags.active_dims();
    let mut s = [0.0; NUM_JOINTS];
    let mut r = [0.0; NUM_JOINTS];
    s.copy_from_slice(&raw[..NUM_JOINTS]);
    r.copy_from_slice(&raw[NUM_JOINTS..]);
    let a_s = if m[0] {
        scale_map(&s)
    } else {
        [1.0; NUM_JOINTS]
    };
    let a_r = if m[NUM_JOINTS] { r } else { [0.0; NUM_JOINTS] };
    (a_s, a_r)
}

/// `<a_p / |a_p|, delta_j>`, zero when `a_p` vanishes.
pub fn alignment(a_p: &[f64; NUM_JOINTS], delta_j: &[f64; NUM_JOINTS]) -> f64 {
    let n = a_p.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return 0.0;
    }
    a_p.iter().zip(delta_j).map(|(a, d)| a / n * d).sum()
}

fn terminal_reward(outcome: Option<&LiftOutcome>, cfg: &RewardConfig) -> f64 {
    match outcome {
        Some(o) if o.success => cfg.lambda_s,
        Some(o) => cfg.lambda_h * o.delta_h,
        None => 0.0,
    }
}

/// Reward for the transition ending at step `t` (1-based).
pub fn compute_reward(
    t: usize,
    a_p: &[f64; NUM_JOINTS],
    delta_j: &[f64; NUM_JOINTS],
    outcome: Option<&LiftOutcome>,
    cfg: &RewardConfig,
) -> f64 {
    let sim = if t.is_multiple_of(cfg.sim_frequency) {
        cfg.lambda_a * alignment(a_p, delta_j)
    } else {
        0.0
    };
    sim + terminal_reward(outcome, cfg)
}

/// Mean distance from each fingertip to its closest cloud point.
pub fn fingertip_distance(geom: &HandGeometry<f64>, cloud_world: &[Vec2<f64>]) -> f64 {
    if cloud_world.is_empty() {
        return 0.0;
    }
    let n = geom.fingertips.len() as f64;
    geom.fingertips
        .iter()
        .map(|&tip| {
            cloud_world
                .iter()
                .map(|&p| (p - tip).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .sum::<f64>()
        / n
}

/// Dense fingertip reward used when the gradient field is ablated.
pub fn compute_reward_no_gf(
    geom: &HandGeometry<f64>,
    cloud_world: &[Vec2<f64>],
    outcome: Option<&LiftOutcome>,
    cfg: &RewardConfig,
) -> f64 {
    -cfg.fingertip_coef * fingertip_distance(geom, cloud_world) + terminal_reward(outcome, cfg)
}

/// Advantages and returns for one complete episode, with no bootstrap after
/// the final step.
pub fn gae_advantages(
    rewards: &[f64],
    values: &[f64],
    gamma: f64,
    decay: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_value = 0.0;
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let delta = rewards[t] + gamma * next_value - values[t];
        acc = delta + gamma * decay * acc;
        adv[t] = acc;
        next_value = values[t];
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Shifts and scales to mean 0, standard deviation 1.
pub fn normalize_advantages(adv: &mut [f64]) {
    let n = adv.len() as f64;
    if adv.is_empty() {
        return;
    }
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let sd = var.sqrt().max(1e-8);
    adv.iter_mut().for_each(|a| *a = (*a - mean) / sd);
}

/// Policy input at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// Normalized joint angles.
    pub joints: [f64; NUM_JOINTS],
    /// Last wrist poses, oldest first, relative to the object centroid.
    pub history: [f64; HISTORY_WIDTH],
    /// Object cloud in the current wrist frame, flattened `(x, y)` pairs.
    pub cloud: Vec<f64>,
    pub a_p: [f64; NUM_JOINTS],
}

const FLAT_WIDTH: usize = 2 * NUM_JOINTS + HISTORY_WIDTH;

impl Observation {
    fn flat_features(&self) -> impl Iterator<Item = f64> + '_ {
        self.joints
            .iter()
            .chain(self.history.iter())
            .chain(self.a_p.iter())
            .copied()
    }
}

/// Builds the observation; `wrist_history` ends at the current pose.
pub fn observe(
    hand: &HandModel<f64>,
    joints: &JointVector<f64>,
    wrist_history: &[WristPose<f64>],
    cloud_world: &[Vec2<f64>],
    a_p: [f64; NUM_JOINTS],
) -> Observation {
    let n = cloud_world.len().max(1) as f64;
    let c = cloud_world.iter().fold(Vec2::zero(), |a, &p| a + p) * (1.0 / n);
    let mut history = [0.0; HISTORY_WIDTH];
    let len = wrist_history.len();
    for k in 0..HISTORY_LEN {
        // Oldest slot first; pad by repeating the first pose.
        let back = HISTORY_LEN - 1 - k;
        let pose = if len > back {
            wrist_history[len - 1 - back]
        } else {
            wrist_history[0]
        };
        history[3 * k] = pose.x - c.x;
        history[3 * k + 1] = pose.y - c.y;
        history[3 * k + 2] = pose.theta;
    }
    let wrist = wrist_history[len - 1];
    Observation {
        joints: hand.normalize(joints),
        history,
        cloud: cloud_in_wrist_frame::<f64>(cloud_world, &wrist),
        a_p,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySpec {
    pub encoder: SetEncoderSpec,
    pub hidden: Vec<usize>,
    pub log_std_init: f64,
}

impl Default for PolicySpec {
    fn default() -> Self {
        Self {
            encoder: SetEncoderSpec::new(&[2, 32, 64], Activation::Silu),
            hidden: vec![128, 128],
            log_std_init: -0.5,
        }
    }
}

impl PolicySpec {
    fn input_width(&self) -> usize {
        self.encoder.feature_width() + 2 * NUM_JOINTS + HISTORY_WIDTH
    }

    fn head(&self, out: usize) -> MlpSpec {
        let mut w = vec![self.input_width()];
        w.extend(&self.hidden);
        w.push(out);
        MlpSpec::new(&w, Activation::Tanh)
    }
}

/// Running mean and variance of the flat observation features.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningNorm {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: f64,
}

impl RunningNorm {
    const CLIP: f64 = 5.0;

    pub fn new(width: usize) -> Self {
        Self {
            mean: vec![0.0; width],
            var: vec![1.0; width],
            count: 0.0,
        }
    }

    /// Merges the statistics of `rows` (each of the norm's width).
    pub fn update(&mut self, rows: &[Vec<f64>]) {
        if rows.is_empty() {
            return;
        }
        let n = rows.len() as f64;
        for k in 0..self.mean.len() {
            let m = rows.iter().map(|r| r[k]).sum::<f64>() / n;
            let v = rows.iter().map(|r| (r[k] - m) * (r[k] - m)).sum::<f64>() / n;
            let total = self.count + n;
            let d = m - self.mean[k];
            let m2 = self.var[k] * self.count + v * n + d * d * self.count * n / total;
            self.mean[k] += d * n / total;
            self.var[k] = m2 / total;
        }
        self.count += n;
    }

    pub fn apply(&self, k: usize, x: f64) -> f64 {
        ((x - self.mean[k]) / (self.var[k] + 1e-8).sqrt()).clamp(-Self::CLIP, Self::CLIP)
    }
}

/// Actor and critic sharing an object encoder; only the actor loss
/// fine-tunes the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualPolicy<T> {
    pub spec: PolicySpec,
    pub encoder: SetEncoder<T>,
    pub actor: Mlp<T>,
    pub critic: Mlp<T>,
    /// State-independent log standard deviation, `[1, RAW_DIM]`.
    pub log_std: TensorBuf<T>,
    /// Input normalization of joints, history and `a^p`; not trained.
    pub obs_norm: RunningNorm,
}

pub struct PolicyCache<T> {
    enc: SetCache<T>,
    actor: MlpCache<T>,
    critic: MlpCache<T>,
}

impl<T: Real> ResidualPolicy<T> {
    pub fn init<R: Rng + ?Sized>(spec: &PolicySpec, rng: &mut R) -> Result<Self> {
        let encoder = SetEncoder::init(&spec.encoder, rng)?;
        let mut actor = Mlp::init(&spec.head(RAW_DIM), rng)?;
        actor.scale_output_layer(T::lit(0.01));
        let critic = Mlp::init(&spec.head(1), rng)?;
        let log_std = TensorBuf::from_vec(&[1, RAW_DIM], vec![T::lit(spec.log_std_init); RAW_DIM])?;
        Ok(Self {
            spec: spec.clone(),
            encoder,
            actor,
            critic,
            log_std,
            obs_norm: RunningNorm::new(FLAT_WIDTH),
        })
    }

    /// Copies the object encoder of a score model with the same encoder shape.
    pub fn load_encoder(&mut self, gf: &ScoreModel<T>) -> Result<()> {
        match &gf.encoder {
            Some(e) if e.spec == self.spec.encoder => {
                self.encoder = e.clone();
                Ok(())
            }
            _ => Err(RlError::Config(
                "gradient field encoder does not match the policy encoder".into(),
            )),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.fill_zero();
        g
    }

    /// Actor means `[b, RAW_DIM]` and critic values.
    pub fn forward(&self, obs: &[Observation]) -> Result<(TensorBuf<T>, Vec<T>, PolicyCache<T>)> {
        let b = obs.len();
        if b == 0 {
            return Err(NnError::EmptySet.into());
        }
        let set_len = obs[0].cloud.len() / 2;
        let mut pts = Vec::with_capacity(b * set_len * 2);
        let mut rest = Vec::with_capacity(b * (2 * NUM_JOINTS + HISTORY_WIDTH));
        for o in obs {
            if o.cloud.len() != 2 * set_len {
                return Err(NnError::Shape {
                    context: "policy cloud",
                    expected: vec![2 * set_len],
                    got: vec![o.cloud.len()],
                }
                .into());
            }
            pts.extend(o.cloud.iter().map(|&v| T::lit(v)));
            rest.extend(
                o.flat_features()
                    .enumerate()
                    .map(|(k, v)| T::lit(self.obs_norm.apply(k, v))),
            );
        }
        let points = TensorBuf::from_vec(&[b * set_len, 2], pts)?;
        let (feat, enc) = self.encoder.forward(&points, set_len)?;
        let rest = TensorBuf::from_vec(&[b, 2 * NUM_JOINTS + HISTORY_WIDTH], rest)?;
        let input = TensorBuf::hcat(&[&feat, &rest])?;
        let (mean, actor) = self.actor.forward(&input)?;
        let (value, critic) = self.critic.forward(&input)?;
        Ok((mean, value.data, PolicyCache { enc, actor, critic }))
    }

    /// Accumulates gradients of the actor means and critic values; the
    /// log-std gradient is handled by the caller.
    pub fn backward_into(
        &self,
        cache: &PolicyCache<T>,
        dmean: &TensorBuf<T>,
        dvalue: &[T],
        grads: &mut ResidualPolicy<T>,
    ) -> Result<()> {
        let b = dmean.rows();
        let dv = TensorBuf::from_vec(&[b, 1], dvalue.to_vec())?;
        let din = self
            .actor
            .backward_into(&cache.actor, dmean, &mut grads.actor)?;
        // The critic reads the encoder features but does not train them.
        self.critic
            .backward_into(&cache.critic, &dv, &mut grads.critic)?;
        let f = self.spec.encoder.feature_width();
        let parts = din.hsplit(&[f, 2 * NUM_JOINTS + HISTORY_WIDTH]);
        self.encoder
            .backward_into(&cache.enc, &parts[0], &mut grads.encoder)?;
        Ok(())
    }

    pub fn std(&self) -> [f64; RAW_DIM] {
        let mut s = [0.0; RAW_DIM];
        for (o, v) in s.iter_mut().zip(&self.log_std.data) {
            *o = v.as_f64().exp();
        }
        s
    }

    pub fn to_checkpoint(&self, flags: &AblationFlags) -> Checkpoint {
        let mut c = Checkpoint::new("residual_policy");
        c.set(
            "spec_toml",
            toml::to_string(&self.spec)
                .unwrap_or_default()
                .replace('\n', "\\n"),
        );
        c.set("flags", flags.name());
        c.set("scalar", T::NAME);
        self.write_arrays("p", &mut c);
        c.set("obs_count", self.obs_norm.count);
        c.push_array(
            "obs_mean".into(),
            vec![FLAT_WIDTH],
            self.obs_norm.mean.clone(),
        );
        c.push_array(
            "obs_var".into(),
            vec![FLAT_WIDTH],
            self.obs_norm.var.clone(),
        );
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<(Self, AblationFlags)> {
        if c.get("kind") != Some("residual_policy") {
            return Err(NnError::Checkpoint("not a residual policy checkpoint".into()).into());
        }
        let spec: PolicySpec = toml::from_str(&c.require("spec_toml")?.replace("\\n", "\n"))
            .map_err(|e| NnError::Checkpoint(format!("bad spec: {e}")))?;
        let flags = AblationFlags::parse(c.require("flags")?)?;
        let mut p = Self::init(&spec, &mut rand::rngs::mock::StepRng::new(0, 0))?;
        p.read_arrays("p", c)?;
        p.obs_norm.count = c.require_f64("obs_count")?;
        for (name, dst) in [
            ("obs_mean", &mut p.obs_norm.mean),
            ("obs_var", &mut p.obs_norm.var),
        ] {
            match c.array(name) {
                Some((shape, data)) if shape == [FLAT_WIDTH] => dst.copy_from_slice(data),
                _ => return Err(NnError::Checkpoint(format!("missing or malformed {name}")).into()),
            }
        }
        Ok((p, flags))
    }
}

impl<T: Real> ParamSet<T> for ResidualPolicy<T> {
    fn tensors(&self) -> Vec<&TensorBuf<T>> {
        let mut v = self.encoder.tensors();
        v.extend(self.actor.tensors());
        v.extend(self.critic.tensors());
        v.push(&self.log_std);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut TensorBuf<T>> {
        let mut v = self.encoder.tensors_mut();
        v.extend(self.actor.tensors_mut());
        v.extend(self.critic.tensors_mut());
        v.push(&mut self.log_std);
        v
    }
}

/// Diagonal Gaussian log-density over the active dimensions.
pub fn gaussian_log_prob(
    raw: &[f64],
    mean: &[f64],
    log_std: &[f64],
    mask: &[bool; RAW_DIM],
) -> f64 {
    let mut lp = 0.0;
    for k in 0..RAW_DIM {
        if mask[k] {
            let z = (raw[k] - mean[k]) / log_std[k].exp();
            lp += -0.5 * z * z - log_std[k] - HALF_LN_2PI;
        }
    }
    lp
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    /// Draw from the actor distribution.
    Sample,
    /// Use the actor mean.
    Mean,
}

/// Everything decided at one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionParts {
    pub a_p: [f64; NUM_JOINTS],
    pub a_s: [f64; NUM_JOINTS],
    pub a_r: [f64; NUM_JOINTS],
    pub action: [f64; NUM_JOINTS],
    pub raw: [f64; RAW_DIM],
    pub log_prob: f64,
    pub value: f64,
}

/// What the agent sees of one environment.
#[derive(Debug, Clone, Copy)]
pub struct AgentInput<'a> {
    pub joints: &'a JointVector<f64>,
    /// Observed wrist poses, ending at the current one.
    pub wrist_history: &'a [WristPose<f64>],
    pub cloud_world: &'a [Vec2<f64>],
}

/// Gradient field, residual policy and ablation switches acting together.
#[derive(Debug, Clone, Copy)]
pub struct Agent<'a, T> {
    pub hand: &'a HandModel<f64>,
    pub gf: Option<&'a ScoreModel<T>>,
    pub policy: Option<&'a ResidualPolicy<T>>,
    pub flags: AblationFlags,
}

impl<T: Real> Agent<'_, T> {
    pub fn validate(&self) -> Result<()> {
        self.flags.validate()?;
        if !self.flags.no_gf && self.gf.is_none() {
            return Err(RlError::Config(
                "a gradient field is required unless no_gf is set".into(),
            ));
        }
        if !self.flags.no_rl && self.policy.is_none() {
            return Err(RlError::Config(
                "a residual policy is required unless no_rl is set".into(),
            ));
        }
        Ok(())
    }

    /// Decides actions for a batch of environments.
    pub fn act<R: Rng + ?Sized>(
        &self,
        inputs: &[AgentInput<'_>],
        mode: ActMode,
        rng: &mut R,
    ) -> Result<Vec<(Observation, ActionParts)>> {
        self.validate()?;
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let a_ps: Vec<[f64; NUM_JOINTS]> = match (self.flags.no_gf, self.gf) {
            (false, Some(gf)) => {
                let queries: Vec<PrimitiveQuery<'_>> = inputs
                    .iter()
                    .map(|i| PrimitiveQuery {
                        joints: i.joints,
                        cloud_world: i.cloud_world,
                        wrist: i.wrist_history.last().expect("non-empty wrist history"),
                    })
                    .collect();
                primitive_scores(gf, self.hand, &queries)?
                    .into_iter()
                    .map(unit_max)
                    .collect()
            }
            _ => vec![[0.0; NUM_JOINTS]; inputs.len()],
        };
        let obs: Vec<Observation> = inputs
            .iter()
            .zip(&a_ps)
            .map(|(i, &a_p)| observe(self.hand, i.joints, i.wrist_history, i.cloud_world, a_p))
            .collect();
        let mut out = Vec::with_capacity(inputs.len());
        match (self.flags.no_rl, self.policy) {
            (false, Some(policy)) => {
                let (mean, values, _) = policy.forward(&obs)?;
                let mask = self.flags.active_dims();
                let log_std: Vec<f64> = policy.log_std.data.iter().map(|v| v.as_f64()).collect();
                for (i, o) in obs.into_iter().enumerate() {
                    let m: Vec<f64> = mean.row(i).iter().map(|v| v.as_f64()).collect();
                    let mut raw = [0.0; RAW_DIM];
                    for k in 0..RAW_DIM {
                        if mask[k] {
                            raw[k] = m[k];
                            if mode == ActMode::Sample {
                                raw[k] += log_std[k].exp() * rng.sample::<f64, _>(StandardNormal);
                            }
                        }
                    }
                    if raw.iter().any(|v| !v.is_finite()) {
                        return Err(RlError::NonFinite("actor output".into()));
                    }
                    let (a_s, a_r) = split_raw(&raw, &self.flags);
                    let action = combine_action(&o.a_p, &a_s, &a_r);
                    out.push((
                        o.clone(),
                        ActionParts {
                            a_p: o.a_p,
                            a_s,
                            a_r,
                            action,
                            raw,
                            log_prob: gaussian_log_prob(&raw, &m, &log_std, &mask),
                            value: values[i].as_f64(),
                        },
                    ));
                }
            }
            _ => {
                for o in obs {
                    let ones = [1.0; NUM_JOINTS];
                    let zeros = [0.0; NUM_JOINTS];
                    let action = combine_action(&o.a_p, &ones, &zeros);
                    out.push((
                        o.clone(),
                        ActionParts {
                            a_p: o.a_p,
                            a_s: ones,
                            a_r: zeros,
                            action,
                            raw: [0.0; RAW_DIM],
                            log_prob: 0.0,
                            value: 0.0,
                        },
                    ));
                }
            }
        }
        Ok(out)
    }
}

/// Wrist observation noise: Gaussian with the given standard deviations,
/// clipped at one standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WristNoise {
    pub deg: f64,
    pub cm: f64,
}

impl WristNoise {
    pub fn is_zero(&self) -> bool {
        self.deg == 0.0 && self.cm == 0.0
    }

    pub fn apply<R: Rng + ?Sized>(&self, pose: &WristPose<f64>, rng: &mut R) -> WristPose<f64> {
        if self.is_zero() {
            return *pose;
        }
        let mut draw = |sd: f64| {
            if sd == 0.0 {
                0.0
            } else {
                (sd * rng.sample::<f64, _>(StandardNormal)).clamp(-sd, sd)
            }
        };
        let pos = self.cm / 100.0;
        let dx = draw(pos);
        let dy = draw(pos);
        let dth = draw(self.deg.to_radians());
        Pose2::new(pose.x + dx, pose.y + dy, pose.theta + dth)
    }
}

/// One recorded control step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub obs: Observation,
    pub parts: ActionParts,
    pub reward: f64,
    pub done: bool,
    pub delta_joints: [f64; NUM_JOINTS],
    /// `<a_p / |a_p|, delta_j>` at every step, for diagnostics.
    pub alignment: f64,
}

/// A finished episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub object_id: String,
    pub target: GraspExample,
    pub steps: Vec<StepRecord>,
    pub outcome: LiftOutcome,
    /// Joints at the end of the approach, before the squeeze.
    pub final_joints: JointVector<f64>,
    pub initial_object_pose: Pose2<f64>,
    /// Object pose at the end of the approach, before the lift.
    pub final_object_pose: Pose2<f64>,
    /// Environment state lines, one per step, when requested.
    pub trace: Vec<String>,
}

impl EpisodeResult {
    pub fn episode_return(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

/// Samples an episode whose initial hand pose does not intersect the object.
pub fn sample_feasible_episode<R: Rng + ?Sized>(
    hand: &HandModel<f64>,
    env_cfg: &EnvConfig,
    object: &ObjectShape<f64>,
    target: &GraspExample,
    patterns: &[TrajectoryPattern],
    traj: &TrajGenConfig,
    rng: &mut R,
) -> Result<EpisodeSpec> {
    let mut last = None;
    for _ in 0..50 {
        let spec = sample_episode(object, target, patterns, traj, rng)?;
        match Env::reset(
            hand.clone(),
            env_cfg.clone(),
            spec.object.clone(),
            WristSource::Scripted(spec.trajectory.clone()),
            JointVector::zeros(),
        ) {
            Ok(_) => return Ok(spec),
            Err(EnvError::InvalidInit(m)) => last = Some(m),
            Err(e) => return Err(e.into()),
        }
    }
    Err(EnvError::InvalidInit(last.unwrap_or_default()).into())
}

/// Step-synchronous driver for a set of environments.
pub struct EpisodeRunner<'a, T> {
    pub agent: Agent<'a, T>,
    pub env_config: &'a EnvConfig,
    pub reward: &'a RewardConfig,
    pub noise: Option<WristNoise>,
    pub mode: ActMode,
    pub record_trace: bool,
}

impl<T: Real> EpisodeRunner<'_, T> {
    /// Runs environments built from `specs` to termination.
    pub fn run<R: Rng + ?Sized>(
        &self,
        specs: &[EpisodeSpec],
        rng: &mut R,
    ) -> Result<Vec<EpisodeResult>> {
        let envs = specs
            .iter()
            .map(|s| {
                Env::reset(
                    self.agent.hand.clone(),
                    self.env_config.clone(),
                    s.object.clone(),
                    WristSource::Scripted(s.trajectory.clone()),
                    JointVector::zeros(),
                )
                .map(|e| e.with_no_collision(self.agent.flags.no_collision))
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let targets: Vec<(String, GraspExample)> = specs
            .iter()
            .map(|s| (s.object.id.clone(), s.target.clone()))
            .collect();
        self.run_envs(envs, targets, rng)
    }

    /// Runs already reset environments to termination.
    pub fn run_envs<R: Rng + ?Sized>(
        &self,
        mut envs: Vec<Env>,
        targets: Vec<(String, GraspExample)>,
        rng: &mut R,
    ) -> Result<Vec<EpisodeResult>> {
        self.reward.validate()?;
        let n = envs.len();
        let mut observed: Vec<Vec<WristPose<f64>>> = Vec::with_capacity(n);
        for e in &envs {
            observed.push(vec![self.observe_wrist(&e.state.wrist, rng)]);
        }
        let mut steps: Vec<Vec<StepRecord>> = vec![Vec::new(); n];
        let mut traces: Vec<Vec<String>> = vec![Vec::new(); n];
        if self.record_trace {
            for (tr, e) in traces.iter_mut().zip(&envs) {
                tr.push(e.trace_line());
            }
        }
        let mut outcomes: Vec<Option<LiftOutcome>> = vec![None; n];
        let mut finals: Vec<Option<(JointVector<f64>, Pose2<f64>)>> = vec![None; n];
        let horizon = self.env_config.horizon;
        for _ in 0..horizon {
            let clouds: Vec<Vec<Vec2<f64>>> =
                envs.iter().map(|e| e.state.object.world_cloud()).collect();
            let inputs: Vec<AgentInput<'_>> = (0..n)
                .map(|i| AgentInput {
                    joints: &envs[i].state.joints,
                    wrist_history: &observed[i],
                    cloud_world: &clouds[i],
                })
                .collect();
            let decided = self.agent.act(&inputs, self.mode, rng)?;
            for (i, (obs, parts)) in decided.into_iter().enumerate() {
                let env = &mut envs[i];
                let info = env.step(&parts.action)?;
                let t = env.state.t;
                let done = env.is_terminal_step();
                if self.record_trace {
                    traces[i].push(env.trace_line());
                }
                let outcome = if done {
                    finals[i] = Some((env.state.joints, env.state.object.pose));
                    let o = env.terminal_squeeze_and_lift()?;
                    outcomes[i] = Some(o);
                    Some(o)
                } else {
                    None
                };
                let reward = if self.agent.flags.no_gf {
                    let cloud = env.state.object.world_cloud();
                    compute_reward_no_gf(&env.geometry(), &cloud, outcome.as_ref(), self.reward)
                } else {
                    compute_reward(
                        t,
                        &parts.a_p,
                        &info.delta_joints,
                        outcome.as_ref(),
                        self.reward,
                    )
                };
                if !reward.is_finite() {
                    return Err(RlError::NonFinite(format!("reward at step {t}")));
                }
                steps[i].push(StepRecord {
                    alignment: alignment(&parts.a_p, &info.delta_joints),
                    obs,
                    parts,
                    reward,
                    done,
                    delta_joints: info.delta_joints,
                });
                let seen = self.observe_wrist(&env.state.wrist, rng);
                observed[i].push(seen);
            }
        }
        let mut results = Vec::with_capacity(n);
        for (i, env) in envs.into_iter().enumerate() {
            let (final_joints, final_object_pose) = finals[i].expect("episode reached the horizon");
            results.push(EpisodeResult {
                object_id: targets[i].0.clone(),
                target: targets[i].1.clone(),
                steps: std::mem::take(&mut steps[i]),
                outcome: outcomes[i].expect("terminal outcome"),
                final_joints,
                initial_object_pose: env.state.initial_object_pose,
                final_object_pose,
                trace: std::mem::take(&mut traces[i]),
            });
        }
        Ok(results)
    }

    fn observe_wrist<R: Rng + ?Sized>(&self, pose: &WristPose<f64>, rng: &mut R) -> WristPose<f64> {
        match &self.noise {
            Some(n) => n.apply(pose, rng),
            None => *pose,
        }
    }
}

/// Flattened on-policy samples with advantages.
#[derive(Debug, Clone, Default)]
pub struct PpoBatch {
    pub obs: Vec<Observation>,
    pub raw: Vec<[f64; RAW_DIM]>,
    pub log_prob: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl PpoBatch {
    /// Computes per-episode advantages and normalizes them over the batch.
    pub fn from_episodes(episodes: &[EpisodeResult], gamma: f64, decay: f64) -> Self {
        let mut b = PpoBatch::default();
        for e in episodes {
            let r: Vec<f64> = e.steps.iter().map(|s| s.reward).collect();
            let v: Vec<f64> = e.steps.iter().map(|s| s.parts.value).collect();
            let (adv, ret) = gae_advantages(&r, &v, gamma, decay);
            for (s, (a, rt)) in e.steps.iter().zip(adv.into_iter().zip(ret)) {
                b.obs.push(s.obs.clone());
                b.raw.push(s.parts.raw);
                b.log_prob.push(s.parts.log_prob);
                b.advantages.push(a);
                b.returns.push(rt);
            }
        }
        normalize_advantages(&mut b.advantages);
        b
    }

    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PpoStats {
    /// Fraction of return variance explained by the value estimates before the update.
    pub explained_variance: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

/// Clipped-surrogate loss and its gradient for one minibatch; returns the
/// stats and accumulates into `grads`.
pub fn ppo_loss_and_grad<T: Real>(
    policy: &ResidualPolicy<T>,
    batch: &PpoBatch,
    idx: &[usize],
    cfg: &PpoConfig,
    flags: &AblationFlags,
    grads: &mut ResidualPolicy<T>,
) -> Result<(f64, PpoStats)> {
    let m = idx.len();
    let obs: Vec<Observation> = idx.iter().map(|&i| batch.obs[i].clone()).collect();
    let (mean, values, cache) = policy.forward(&obs)?;
    let mask = flags.active_dims();
    let log_std: Vec<f64> = policy.log_std.data.iter().map(|v| v.as_f64()).collect();
    let inv = 1.0 / m as f64;
    let mut dmean = TensorBuf::<T>::zeros(&[m, RAW_DIM]);
    let mut dvalue = vec![T::zero(); m];
    let mut dlog_std = [0.0; RAW_DIM];
    let mut st = PpoStats::default();
    for (r, &i) in idx.iter().enumerate() {
        let mu: Vec<f64> = mean.row(r).iter().map(|v| v.as_f64()).collect();
        let x = &batch.raw[i];
        let lp = gaussian_log_prob(x, &mu, &log_std, &mask);
        let log_ratio = lp - batch.log_prob[i];
        let ratio = log_ratio.exp();
        let a = batch.advantages[i];
        let unclipped = ratio * a;
        let clipped = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip) * a;
        st.policy_loss -= unclipped.min(clipped) * inv;
        st.approx_kl += ((ratio - 1.0) - log_ratio) * inv;
        if (ratio - 1.0).abs() > cfg.clip {
            st.clip_fraction += inv;
        }
        // d(-min)/d(logp) is nonzero only when the unclipped branch is active.
        let dlp = if unclipped <= clipped {
            -a * ratio * inv
        } else {
            0.0
        };
        for k in 0..RAW_DIM {
            if !mask[k] {
                continue;
            }
            let sd = log_std[k].exp();
            let z = (x[k] - mu[k]) / sd;
            dmean.data[r * RAW_DIM + k] = T::lit(dlp * z / sd);
            dlog_std[k] += dlp * (z * z - 1.0);
        }
        let v = values[r].as_f64();
        let err = v - batch.returns[i];
        st.value_loss += 0.5 * err * err * inv;
        dvalue[r] = T::lit(cfg.value_coef * err * inv);
    }
    for k in 0..RAW_DIM {
        if mask[k] {
            st.entropy += log_std[k] + 0.5 + HALF_LN_2PI;
            dlog_std[k] -= cfg.entropy_coef;
        }
    }
    let loss = st.policy_loss + cfg.value_coef * st.value_loss - cfg.entropy_coef * st.entropy;
    if !loss.is_finite() {
        return Err(RlError::NonFinite(format!("surrogate loss {st:?}")));
    }
    policy.backward_into(&cache, &dmean, &dvalue, grads)?;
    for (g, d) in grads.log_std.data.iter_mut().zip(dlog_std) {
        *g += T::lit(d);
    }
    Ok((loss, st))
}

/// Runs the configured epochs of minibatch updates over `batch`.
pub fn ppo_update<T: Real, R: Rng + ?Sized>(
    policy: &mut ResidualPolicy<T>,
    opt: &mut OptState<T>,
    batch: &PpoBatch,
    cfg: &PpoConfig,
    flags: &AblationFlags,
    rng: &mut R,
) -> Result<PpoStats> {
    let mut order: Vec<usize> = (0..batch.len()).collect();
    let mut total = PpoStats::default();
    let mut count = 0.0;
    let mut grads = policy.zeros_like();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for idx in order.chunks(cfg.minibatch) {
            grads.fill_zero();
            let (_, st) = ppo_loss_and_grad(policy, batch, idx, cfg, flags, &mut grads)?;
            clip_grad_norm(&mut grads, T::lit(cfg.max_grad_norm));
            opt.step(policy, &grads)?;
            total.policy_loss += st.policy_loss;
            total.value_loss += st.value_loss;
            total.entropy += st.entropy;
            total.approx_kl += st.approx_kl;
            total.clip_fraction += st.clip_fraction;
            count += 1.0;
        }
    }
    if count > 0.0 {
        total.policy_loss /= count;
        total.value_loss /= count;
        total.entropy /= count;
        total.approx_kl /= count;
        total.clip_fraction /= count;
    }
    Ok(total)
}

/// One point of the training curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub iteration: usize,
    pub env_steps: usize,
    pub mean_reward: f64,
    pub success_rate: f64,
    pub mean_posture: f64,
    pub mean_stability: f64,
}

/// Scenes and settings for residual training.
#[derive(Debug, Clone, Copy)]
pub struct TrainSetup<'a> {
    pub hand: &'a HandModel<f64>,
    pub env: &'a EnvConfig,
    pub reward: &'a RewardConfig,
    pub ppo: &'a PpoConfig,
    pub traj: &'a TrajGenConfig,
    pub policy: &'a PolicySpec,
    pub flags: AblationFlags,
    /// Objects at `x = 0`, looked up by the examples' ids.
    pub objects: &'a [ObjectShape<f64>],
    pub examples: &'a [GraspExample],
    pub patterns: &'a [TrajectoryPattern],
}

impl TrainSetup<'_> {
    /// Draws one feasible episode per environment.
    pub fn sample_specs<R: Rng + ?Sized>(
        &self,
        count: usize,
        rng: &mut R,
    ) -> Result<Vec<EpisodeSpec>> {
        if self.examples.is_empty() {
            return Err(RlError::Config("no grasp examples to train on".into()));
        }
        let mut specs = Vec::with_capacity(count);
        while specs.len() < count {
            let g = &self.examples[rng.gen_range(0..self.examples.len())];
            let Some(o) = self.objects.iter().find(|o| o.id == g.object_id) else {
                return Err(RlError::Config(format!("unknown object {}", g.object_id)));
            };
            match sample_feasible_episode(self.hand, self.env, o, g, self.patterns, self.traj, rng)
            {
                Ok(s) => specs.push(s),
                Err(RlError::Env(EnvError::InvalidInit(m))) => {
                    log::warn!("skipping grasp on {}: {m}", g.object_id);
                }
                Err(e) => return Err(e),
            }
        }
        Ok(specs)
    }
}

/// Summary statistics of a set of episodes.
pub fn summarize(episodes: &[EpisodeResult]) -> (f64, f64, f64, f64) {
    let n = episodes.len().max(1) as f64;
    let ret = episodes.iter().map(|e| e.episode_return()).sum::<f64>() / n;
    let succ = episodes.iter().filter(|e| e.outcome.success).count() as f64 / n;
    let post = episodes
        .iter()
        .map(|e| e.final_joints.distance(&e.target.joints))
        .sum::<f64>()
        / n;
    let stab = episodes
        .iter()
        .map(|e| {
            let d = e.final_object_pose.translation() - e.initial_object_pose.translation();
            d.norm()
        })
        .sum::<f64>()
        / n;
    (ret, succ, post, stab)
}

/// `1 - var(returns - values) / var(returns)`.
pub fn explained_variance(episodes: &[EpisodeResult], gamma: f64, decay: f64) -> f64 {
    let mut ret = Vec::new();
    let mut val = Vec::new();
    for e in episodes {
        let r: Vec<f64> = e.steps.iter().map(|s| s.reward).collect();
        let v: Vec<f64> = e.steps.iter().map(|s| s.parts.value).collect();
        ret.extend(gae_advantages(&r, &v, gamma, decay).1);
        val.extend(v);
    }
    let var = |x: &[f64]| {
        let n = x.len().max(1) as f64;
        let m = x.iter().sum::<f64>() / n;
        x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n
    };
    let resid: Vec<f64> = ret.iter().zip(&val).map(|(r, v)| r - v).collect();
    let vr = var(&ret);
    if vr == 0.0 {
        0.0
    } else {
        1.0 - var(&resid) / vr
    }
}

/// Trains a residual policy on top of the frozen field `gf`.
pub fn train_residual<T: Real, R: Rng + ?Sized>(
    setup: &TrainSetup<'_>,
    gf: Option<&ScoreModel<T>>,
    rng: &mut R,
) -> Result<(ResidualPolicy<T>, Vec<CurvePoint>)> {
    train_residual_with(setup, gf, rng, &mut |_, _| {})
}

/// [`train_residual`] with a callback after every iteration.
pub fn train_residual_with<T: Real, R: Rng + ?Sized>(
    setup: &TrainSetup<'_>,
    gf: Option<&ScoreModel<T>>,
    rng: &mut R,
    progress: &mut dyn FnMut(&CurvePoint, &PpoStats),
) -> Result<(ResidualPolicy<T>, Vec<CurvePoint>)> {
    setup.flags.validate()?;
    setup.reward.validate()?;
    setup.ppo.validate(setup.env)?;
    if setup.flags.no_rl {
        return Err(RlError::Config("nothing to train with no_rl set".into()));
    }
    let mut policy = ResidualPolicy::<T>::init(setup.policy, rng)?;
    if let (false, Some(g)) = (setup.flags.no_gf, gf) {
        policy.load_encoder(g)?;
    }
    let mut opt = OptState::new(AdamConfig::with_lr(setup.ppo.lr), &policy);
    let mut curve = Vec::new();
    let mut env_steps = 0;
    for it in 0..setup.ppo.iterations() {
        let specs = setup.sample_specs(setup.ppo.num_envs, rng)?;
        let runner = EpisodeRunner {
            agent: Agent {
                hand: setup.hand,
                gf,
                policy: Some(&policy),
                flags: setup.flags,
            },
            env_config: setup.env,
            reward: setup.reward,
            noise: None,
            mode: ActMode::Sample,
            record_trace: false,
        };
        let episodes = runner.run(&specs, rng)?;
        env_steps += episodes.iter().map(|e| e.steps.len()).sum::<usize>();
        let (ret, succ, post, stab) = summarize(&episodes);
        let batch = PpoBatch::from_episodes(&episodes, setup.ppo.gamma, setup.ppo.gae_lambda);
        let mut st = ppo_update(&mut policy, &mut opt, &batch, setup.ppo, &setup.flags, rng)?;
        st.explained_variance =
            explained_variance(&episodes, setup.ppo.gamma, setup.ppo.gae_lambda);
        // Refreshed after the update so stored log-probs match the policy that sampled them.
        policy.obs_norm.update(
            &batch
                .obs
                .iter()
                .map(|o| o.flat_features().collect())
                .collect::<Vec<_>>(),
        );
        if !policy.all_finite() {
            return Err(RlError::NonFinite(format!(
                "policy parameters after iteration {it}"
            )));
        }
        log::info!(
            "iter {it} steps {env_steps} return {ret:.4} success {succ:.3} posture {post:.3} kl {:.4} clip {:.3}",
            st.approx_kl,
            st.clip_fraction
        );
        let point = CurvePoint {
            iteration: it,
            env_steps,
            mean_reward: ret,
            success_rate: succ,
            mean_posture: post,
            mean_stability: stab,
        };
        progress(&point, &st);
        curve.push(point);
    }
    Ok((policy, curve))
}

const CURVE_HEADER: &str =
    "# iteration env_steps mean_reward success_rate mean_posture mean_stability";

pub fn write_curve(path: &Path, config_hash: &str, curve: &[CurvePoint]) -> Result<()> {
    let mut s = format!("# config {config_hash}\n{CURVE_HEADER}\n");
    for p in curve {
        let _ = writeln!(
            s,
            "{} {} {:.9e} {:.9e} {:.9e} {:.9e}",
            p.iteration,
            p.env_steps,
            p.mean_reward,
            p.success_rate,
            p.mean_posture,
            p.mean_stability
        );
    }
    crate::io_util::write_atomic(path, s.as_bytes())?;
    Ok(())
}

pub fn parse_curve(text: &str) -> Result<Vec<CurvePoint>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let err = |m: &str| RlError::Parse {
            line: i + 1,
            message: m.to_string(),
        };
        if f.len() != 6 {
            return Err(err("expected 6 fields"));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|_| err("bad integer"));
        let num = |s: &str| s.parse::<f64>().map_err(|_| err("bad number"));
        out.push(CurvePoint {
            iteration: int(f[0])?,
            env_steps: int(f[1])?,
            mean_reward: num(f[2])?,
            success_rate: num(f[3])?,
            mean_posture: num(f[4])?,
            mean_stability: num(f[5])?,
        });
    }
    Ok(out)
}

/// Per-step means of the alignment term and of `|a_p|` over episodes.
pub fn alignment_trace(episodes: &[EpisodeResult]) -> Vec<(usize, f64, f64)> {
    let len = episodes.iter().map(|e| e.steps.len()).max().unwrap_or(0);
    (0..len)
        .map(|t| {
            let rows: Vec<&StepRecord> = episodes.iter().filter_map(|e| e.steps.get(t)).collect();
            let n = rows.len().max(1) as f64;
            let al = rows.iter().map(|s| s.alignment).sum::<f64>() / n;
            let ap = rows
                .iter()
                .map(|s| s.parts.a_p.iter().map(|v| v * v).sum::<f64>().sqrt())
                .sum::<f64>()
                / n;
            (t + 1, al, ap)
        })
        .collect()
}
