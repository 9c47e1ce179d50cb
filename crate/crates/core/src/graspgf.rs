//! Grasping gradient field: a conditional, time-dependent score network
//! trained by denoising score matching on verified grasps.
//!
//! The raw network output `h` is scaled to a score by
//! `s = h / (sigma(t)^2 + sigma_ref^2)`. At moderate noise `h` then learns the
//! denoising displacement `J* - J~`, which keeps the score direction
//! meaningful away from the data at the small inference time. With
//! `J~ = J* + sigma * z` the weighted objective
//! `sigma^2 * |s - (J* - J~) / sigma^2|^2` equals `|sigma * s + z|^2`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::graspdata::GraspExample;
use crate::hand::{HandModel, JointVector, ObjectShape, WristPose, NUM_JOINTS};
use crate::nn::{
    clip_grad_norm, Activation, AdamConfig, Checkpoint, Mlp, MlpCache, MlpSpec, NnError, OptState,
    ParamSet, SetCache, SetEncoder, SetEncoderSpec, TensorBuf,
};
use crate::scalar::Real;
use crate::trajgen::{sample_initial_wrist, TrajGenConfig};

pub type Result<T> = std::result::Result<T, NnError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub t_inference: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            beta_min: 0.1,
            beta_max: 10.0,
            t_min: 1e-5,
            t_max: 1.0,
            t_inference: 0.005,
        }
    }
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 < self.t_min
            && self.t_min < self.t_inference
            && self.t_inference < self.t_max
            && self.t_max <= 1.0
            && self.beta_min >= 0.0
            && self.beta_max > self.beta_min;
        if ok {
            Ok(())
        } else {
            Err(NnError::Spec(format!("invalid noise schedule {self:?}")))
        }
    }

    /// `1 - exp(-t^2 (beta_max - beta_min) / 2 - t beta_min)`.
    pub fn sigma(&self, t: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&t) {
            return Err(NnError::Spec(format!("noise time {t} outside [0, 1]")));
        }
        Ok(self.sigma_unchecked(t))
    }

    pub(crate) fn sigma_unchecked(&self, t: f64) -> f64 {
        let e = -0.5 * t * t * (self.beta_max - self.beta_min) - t * self.beta_min;
        -e.exp_m1()
    }

    pub fn sample_t<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        rng.gen_range(self.t_min..self.t_max)
    }
}

/// `J* + sigma(t) * z`.
pub fn perturb<R: Rng + ?Sized>(
    schedule: &NoiseSchedule,
    j_star: &[f64],
    t: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let s = schedule.sigma(t)?;
    Ok(j_star
        .iter()
        .map(|&j| j + s * rng.sample::<f64, _>(StandardNormal))
        .collect())
}

/// How the network sees its condition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionSpec {
    /// A point set, encoded by a max-pooled set encoder.
    PointSet(SetEncoderSpec),
    /// A plain feature vector of the given width.
    Vector(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreSpec {
    pub data_dim: usize,
    pub condition: ConditionSpec,
    pub joint_widths: Vec<usize>,
    /// Number of sinusoid frequencies; the time feature has twice as many entries.
    pub time_freqs: usize,
    pub time_widths: Vec<usize>,
    pub trunk_hidden: Vec<usize>,
    /// Output scale offset `sigma_ref`.
    pub sigma_ref: f64,
}

impl Default for ScoreSpec {
    fn default() -> Self {
        Self {
            data_dim: NUM_JOINTS,
            condition: ConditionSpec::PointSet(SetEncoderSpec::new(&[2, 32, 64], Activation::Silu)),
            joint_widths: vec![64],
            time_freqs: 8,
            time_widths: vec![32],
            trunk_hidden: vec![128, 128],
            sigma_ref: 0.07,
        }
    }
}

impl ScoreSpec {
    fn condition_width(&self) -> usize {
        match &self.condition {
            ConditionSpec::PointSet(s) => s.feature_width(),
            ConditionSpec::Vector(w) => *w,
        }
    }

    fn joint_spec(&self) -> MlpSpec {
        let mut w = vec![self.data_dim];
        w.extend(&self.joint_widths);
        MlpSpec::new(&w, Activation::Silu)
    }

    fn time_spec(&self) -> MlpSpec {
        let mut w = vec![2 * self.time_freqs];
        w.extend(&self.time_widths);
        MlpSpec::new(&w, Activation::Silu)
    }

    fn trunk_spec(&self) -> MlpSpec {
        let mut w = vec![
            self.condition_width()
                + self.joint_widths.last().copied().unwrap_or(self.data_dim)
                + self
                    .time_widths
                    .last()
                    .copied()
                    .unwrap_or(2 * self.time_freqs),
        ];
        w.extend(&self.trunk_hidden);
        w.push(self.data_dim);
        MlpSpec::new(&w, Activation::Silu)
    }

    pub fn describe(&self) -> String {
        let cond = match &self.condition {
            ConditionSpec::PointSet(s) => {
                format!("set:{}", MlpSpec::new(&s.point_widths, s.hidden).describe())
            }
            ConditionSpec::Vector(w) => format!("vec:{w}"),
        };
        format!(
            "dim={};cond={};joint={};time={}x{};trunk={};sigma_ref={}",
            self.data_dim,
            cond,
            self.joint_spec().describe(),
            self.time_freqs,
            self.time_spec().describe(),
            self.trunk_spec().describe(),
            self.sigma_ref
        )
    }
}

/// Fixed sinusoidal features of the noise time.
pub fn time_features<T: Real>(t: f64, freqs: usize, out: &mut [T]) {
    for k in 0..freqs {
        let w = std::f64::consts::PI * (1u64 << k) as f64;
        out[2 * k] = T::lit((w * t).sin());
        out[2 * k + 1] = T::lit((w * t).cos());
    }
}

/// Condition inputs for `b` conditions.
#[derive(Debug, Clone)]
pub enum ConditionBatch<T> {
    /// `[b * set_len, point_dim]` stacked point sets.
    Points {
        points: TensorBuf<T>,
        set_len: usize,
    },
    /// `[b, width]`.
    Vectors(TensorBuf<T>),
}

impl<T: Real> ConditionBatch<T> {
    pub fn count(&self) -> usize {
        match self {
            ConditionBatch::Points { points, set_len } => points.rows() / (*set_len).max(1),
            ConditionBatch::Vectors(v) => v.rows(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreModel<T> {
    pub spec: ScoreSpec,
    pub schedule: NoiseSchedule,
    pub encoder: Option<SetEncoder<T>>,
    pub joint_net: Mlp<T>,
    pub time_net: Mlp<T>,
    pub trunk: Mlp<T>,
}

pub struct ScoreCache<T> {
    enc: Option<SetCache<T>>,
    joint: MlpCache<T>,
    time: MlpCache<T>,
    trunk: MlpCache<T>,
    widths: [usize; 3],
    repeat: usize,
}

impl<T: Real> ScoreModel<T> {
    fn build(
        spec: &ScoreSpec,
        schedule: NoiseSchedule,
        zero: bool,
        rng: &mut dyn rand::RngCore,
    ) -> Result<Self> {
        schedule.validate()?;
        let encoder = match &spec.condition {
            ConditionSpec::PointSet(s) => Some(if zero {
                SetEncoder::zeros(s)?
            } else {
                SetEncoder::init(s, rng)?
            }),
            ConditionSpec::Vector(_) => None,
        };
        let mk = |s: &MlpSpec, rng: &mut dyn rand::RngCore| {
            if zero {
                Mlp::zeros(s)
            } else {
                Mlp::init(s, rng)
            }
        };
        let joint_net = mk(&spec.joint_spec(), rng)?;
        let time_net = mk(&spec.time_spec(), rng)?;
        let mut trunk = mk(&spec.trunk_spec(), rng)?;
        if !zero {
            trunk.scale_output_layer(T::lit(0.1));
        }
        Ok(Self {
            spec: spec.clone(),
            schedule,
            encoder,
            joint_net,
            time_net,
            trunk,
        })
    }

    pub fn init<R: Rng>(spec: &ScoreSpec, schedule: NoiseSchedule, rng: &mut R) -> Result<Self> {
        Self::build(spec, schedule, false, rng)
    }

    /// Zero-valued parameters with this model's shapes; used for gradients.
    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.fill_zero();
        g
    }

    pub fn encode_condition(
        &self,
        cond: &ConditionBatch<T>,
    ) -> Result<(TensorBuf<T>, Option<SetCache<T>>)> {
        match (cond, &self.encoder) {
            (ConditionBatch::Points { points, set_len }, Some(enc)) => {
                let (f, c) = enc.forward(points, *set_len)?;
                Ok((f, Some(c)))
            }
            (ConditionBatch::Vectors(v), None) => {
                if v.cols() != self.spec.condition_width() {
                    return Err(NnError::Shape {
                        context: "score condition",
                        expected: vec![v.rows(), self.spec.condition_width()],
                        got: v.shape.clone(),
                    });
                }
                Ok((v.clone(), None))
            }
            _ => Err(NnError::Spec(
                "condition kind does not match the model".into(),
            )),
        }
    }

    /// Raw network output `h` for `x` (`[b * repeat, dim]`) where rows
    /// `i * repeat .. (i + 1) * repeat` share condition `i`.
    pub fn forward(
        &self,
        cond: &ConditionBatch<T>,
        repeat: usize,
        x: &TensorBuf<T>,
        t: &[f64],
    ) -> Result<(TensorBuf<T>, ScoreCache<T>)> {
        let b = cond.count();
        let n = b * repeat;
        if x.shape != [n, self.spec.data_dim] || t.len() != n {
            return Err(NnError::Shape {
                context: "score forward",
                expected: vec![n, self.spec.data_dim],
                got: x.shape.clone(),
            });
        }
        let (cfeat, enc) = self.encode_condition(cond)?;
        let cw = cfeat.cols();
        let mut crep = TensorBuf::zeros(&[n, cw]);
        for i in 0..b {
            for r in 0..repeat {
                crep.row_mut(i * repeat + r).copy_from_slice(cfeat.row(i));
            }
        }
        let (jf, joint) = self.joint_net.forward(x)?;
        let nf = self.spec.time_freqs;
        let mut tf = TensorBuf::zeros(&[n, 2 * nf]);
        for (i, &ti) in t.iter().enumerate() {
            time_features(ti, nf, tf.row_mut(i));
        }
        let (tfeat, time) = self.time_net.forward(&tf)?;
        let widths = [cw, jf.cols(), tfeat.cols()];
        let h = TensorBuf::hcat(&[&crep, &jf, &tfeat])?;
        let (out, trunk) = self.trunk.forward(&h)?;
        Ok((
            out,
            ScoreCache {
                enc,
                joint,
                time,
                trunk,
                widths,
                repeat,
            },
        ))
    }

    /// Accumulates parameter gradients for upstream `dout`.
    pub fn backward_into(
        &self,
        cache: &ScoreCache<T>,
        dout: &TensorBuf<T>,
        grads: &mut ScoreModel<T>,
    ) -> Result<()> {
        let dh = self
            .trunk
            .backward_into(&cache.trunk, dout, &mut grads.trunk)?;
        let parts = dh.hsplit(&cache.widths);
        self.joint_net
            .backward_into(&cache.joint, &parts[1], &mut grads.joint_net)?;
        self.time_net
            .backward_into(&cache.time, &parts[2], &mut grads.time_net)?;
        if let (Some(enc), Some(ec), Some(genc)) =
            (&self.encoder, &cache.enc, grads.encoder.as_mut())
        {
            let n = parts[0].rows();
            let b = n / cache.repeat;
            let mut dc = TensorBuf::zeros(&[b, cache.widths[0]]);
            for i in 0..n {
                let dst = dc.row_mut(i / cache.repeat);
                for (d, &s) in dst.iter_mut().zip(parts[0].row(i)) {
                    *d += s;
                }
            }
            enc.backward_into(ec, &dc, genc)?;
        }
        Ok(())
    }

    /// Multiplier taking the raw output to the score at time `t`.
    pub fn output_scale(&self, t: f64) -> f64 {
        let s = self.schedule.sigma_unchecked(t);
        1.0 / (s * s + self.spec.sigma_ref * self.spec.sigma_ref)
    }

    /// Score for a single query.
    pub fn score(&self, cond: &ConditionBatch<T>, x: &[T], t: f64) -> Result<Vec<T>> {
        self.schedule.sigma(t)?;
        let xb = TensorBuf::from_vec(&[1, x.len()], x.to_vec())?;
        let (h, _) = self.forward(cond, 1, &xb, &[t])?;
        let k = T::lit(self.output_scale(t));
        Ok(h.data.into_iter().map(|v| v * k).collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new("score_model");
        c.set("spec", self.spec.describe());
        c.set(
            "spec_toml",
            toml::to_string(&self.spec)
                .unwrap_or_default()
                .replace('\n', "\\n"),
        );
        c.set("beta_min", self.schedule.beta_min);
        c.set("beta_max", self.schedule.beta_max);
        c.set("t_min", self.schedule.t_min);
        c.set("t_max", self.schedule.t_max);
        c.set("t_inference", self.schedule.t_inference);
        c.set("scalar", T::NAME);
        self.write_arrays("p", &mut c);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        if c.get("kind") != Some("score_model") {
            return Err(NnError::Checkpoint("not a score model checkpoint".into()));
        }
        let spec: ScoreSpec = toml::from_str(&c.require("spec_toml")?.replace("\\n", "\n"))
            .map_err(|e| NnError::Checkpoint(format!("bad spec: {e}")))?;
        let schedule = NoiseSchedule {
            beta_min: c.require_f64("beta_min")?,
            beta_max: c.require_f64("beta_max")?,
            t_min: c.require_f64("t_min")?,
            t_max: c.require_f64("t_max")?,
            t_inference: c.require_f64("t_inference")?,
        };
        let mut m = Self::build(
            &spec,
            schedule,
            true,
            &mut rand::rngs::mock::StepRng::new(0, 0),
        )?;
        m.read_arrays("p", c)?;
        Ok(m)
    }
}

impl<T: Real> ParamSet<T> for ScoreModel<T> {
    fn tensors(&self) -> Vec<&TensorBuf<T>> {
        let mut v = Vec::new();
        if let Some(e) = &self.encoder {
            v.extend(e.tensors());
        }
        v.extend(self.joint_net.tensors());
        v.extend(self.time_net.tensors());
        v.extend(self.trunk.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut TensorBuf<T>> {
        let mut v = Vec::new();
        if let Some(e) = &mut self.encoder {
            v.extend(e.tensors_mut());
        }
        v.extend(self.joint_net.tensors_mut());
        v.extend(self.time_net.tensors_mut());
        v.extend(self.trunk.tensors_mut());
        v
    }
}

/// One DSM minibatch: `b` conditions with `repeat` noisy samples each.
#[derive(Debug, Clone)]
pub struct DsmBatch<T> {
    pub cond: ConditionBatch<T>,
    pub repeat: usize,
    /// Clean data per condition, `[b, dim]`.
    pub targets: TensorBuf<T>,
    /// Noise time per sample, length `b * repeat`.
    pub t: Vec<f64>,
    /// Standard normal noise per sample, `[b * repeat, dim]`.
    pub z: TensorBuf<T>,
}

impl<T: Real> DsmBatch<T> {
    /// Draws times and noise for the given conditions and targets.
    pub fn sample<R: Rng + ?Sized>(
        schedule: &NoiseSchedule,
        cond: ConditionBatch<T>,
        targets: TensorBuf<T>,
        repeat: usize,
        rng: &mut R,
    ) -> Self {
        let n = targets.rows() * repeat;
        let d = targets.cols();
        let t: Vec<f64> = (0..n).map(|_| schedule.sample_t(rng)).collect();
        let z = TensorBuf {
            shape: vec![n, d],
            data: (0..n * d)
                .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal)))
                .collect(),
        };
        Self {
            cond,
            repeat,
            targets,
            t,
            z,
        }
    }

    /// Perturbed samples `J* + sigma(t) z`.
    pub fn perturbed(&self, schedule: &NoiseSchedule) -> TensorBuf<T> {
        let d = self.targets.cols();
        let mut x = self.z.clone();
        for i in 0..x.rows() {
            let s = T::lit(schedule.sigma_unchecked(self.t[i]));
            let tgt = self.targets.row(i / self.repeat);
            for (k, v) in x.row_mut(i).iter_mut().enumerate() {
                *v = tgt[k] + s * *v;
            }
            debug_assert_eq!(d, tgt.len());
        }
        x
    }
}

/// Weighted denoising score-matching loss and its parameter gradients.
pub fn dsm_loss<T: Real>(model: &ScoreModel<T>, batch: &DsmBatch<T>) -> Result<(T, ScoreModel<T>)> {
    let x = batch.perturbed(&model.schedule);
    let (h, cache) = model.forward(&batch.cond, batch.repeat, &x, &batch.t)?;
    let n = h.rows();
    if n == 0 {
        return Err(NnError::EmptySet);
    }
    let d = h.cols();
    let inv = T::one() / T::lit(n as f64);
    let mut loss = T::zero();
    let mut dh = h.clone();
    for i in 0..n {
        // sigma * s = c * h
        let c = T::lit(model.schedule.sigma_unchecked(batch.t[i]) * model.output_scale(batch.t[i]));
        for k in 0..d {
            let r = c * h.data[i * d + k] + batch.z.data[i * d + k];
            loss += r * r;
            dh.data[i * d + k] = T::lit(2.0) * r * c * inv;
        }
    }
    loss *= inv;
    if !loss.is_finite() {
        return Err(NnError::NonFinite("dsm loss"));
    }
    let mut grads = model.zeros_like();
    model.backward_into(&cache, &dh, &mut grads)?;
    Ok((loss, grads))
}

/// Object cloud expressed in the wrist frame, as rows of `[x, y]`.
pub fn cloud_in_wrist_frame<T: Real>(
    cloud_world: &[crate::geom::Vec2<f64>],
    wrist: &WristPose<f64>,
) -> Vec<T> {
    cloud_world
        .iter()
        .flat_map(|&p| {
            let q = wrist.inverse_apply(p);
            [T::lit(q.x), T::lit(q.y)]
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GfTrainConfig {
    pub steps: usize,
    /// Conditions per batch; zero uses one fifth of the examples (at least 8, at most 128).
    pub batch_conditions: usize,
    /// Noisy samples per condition.
    pub repeat: usize,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr` (cosine decay).
    pub lr_final_frac: f64,
    pub grad_clip: f64,
    /// Also condition on wrist poses sampled along approach paths.
    pub augment_mid_wrist: bool,
    pub log_every: usize,
}

impl Default for GfTrainConfig {
    fn default() -> Self {
        Self {
            steps: 6000,
            batch_conditions: 0,
            repeat: 4,
            lr: 1e-3,
            lr_final_frac: 0.1,
            grad_clip: 10.0,
            augment_mid_wrist: false,
            log_every: 100,
        }
    }
}

/// Average DSM loss per logging window.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossTrace {
    pub steps: Vec<usize>,
    pub loss: Vec<f64>,
}

/// Prepared training condition: wrist-frame cloud and normalized target.
struct GfSample {
    cloud: Vec<f64>,
    target: [f64; NUM_JOINTS],
}

fn normalized(hand: &HandModel<f64>, j: &JointVector<f64>) -> [f64; NUM_JOINTS] {
    hand.normalize(j)
}

pub fn train_gf<R: Rng>(
    examples: &[GraspExample],
    objects: &[ObjectShape<f64>],
    hand: &HandModel<f64>,
    spec: &ScoreSpec,
    schedule: NoiseSchedule,
    cfg: &GfTrainConfig,
    rng: &mut R,
) -> Result<(ScoreModel<f64>, LossTrace)> {
    if examples.is_empty() {
        return Err(NnError::EmptySet);
    }
    let mut samples = Vec::with_capacity(examples.len());
    let mut clouds = Vec::with_capacity(examples.len());
    for e in examples {
        let obj = objects
            .iter()
            .find(|o| o.id == e.object_id)
            .ok_or_else(|| NnError::Spec(format!("unknown object {}", e.object_id)))?;
        let mut o = obj.clone();
        o.rest_on_table(0.0);
        let world = o.world_cloud();
        samples.push(GfSample {
            cloud: cloud_in_wrist_frame(&world, &e.wrist),
            target: normalized(hand, &e.joints),
        });
        clouds.push(world);
    }
    let set_len = crate::hand::CLOUD_SIZE;
    let b = if cfg.batch_conditions > 0 {
        cfg.batch_conditions
    } else {
        (examples.len() / 5).clamp(8, 128)
    };
    let mut model = ScoreModel::<f64>::init(spec, schedule, rng)?;
    let mut opt = OptState::new(AdamConfig::with_lr(cfg.lr), &model);
    let mut trace = LossTrace::default();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut cursor = order.len();
    let mut window = 0.0;
    let mut count = 0usize;
    let traj_cfg = TrajGenConfig::default();
    for step in 0..cfg.steps {
        let mut pts = Vec::with_capacity(b * set_len * 2);
        let mut tg = Vec::with_capacity(b * NUM_JOINTS);
        for _ in 0..b {
            if cursor >= order.len() {
                order.shuffle(rng);
                cursor = 0;
            }
            let i = order[cursor];
            cursor += 1;
            if cfg.augment_mid_wrist && rng.gen_bool(0.5) {
                let start = sample_initial_wrist(&examples[i], &traj_cfg, rng)
                    .map_err(|e| NnError::Spec(e.to_string()))?;
                let u: f64 = rng.gen_range(0.0..1.0);
                let w = examples[i].wrist;
                let mid = crate::geom::Pose2::new(
                    start.x + u * (w.x - start.x),
                    start.y + u * (w.y - start.y),
                    start.theta + u * crate::geom::wrap_angle(w.theta - start.theta),
                );
                pts.extend(cloud_in_wrist_frame::<f64>(&clouds[i], &mid));
            } else {
                pts.extend_from_slice(&samples[i].cloud);
            }
            tg.extend_from_slice(&samples[i].target);
        }
        let cond = ConditionBatch::Points {
            points: TensorBuf::from_vec(&[b * set_len, 2], pts)?,
            set_len,
        };
        let targets = TensorBuf::from_vec(&[b, NUM_JOINTS], tg)?;
        let batch = DsmBatch::sample(&schedule, cond, targets, cfg.repeat, rng);
        let (loss, mut grads) = dsm_loss(&model, &batch)?;
        if cfg.grad_clip > 0.0 {
            clip_grad_norm(&mut grads, cfg.grad_clip);
        }
        let frac = step as f64 / cfg.steps.max(1) as f64;
        let lr = cfg.lr
            * (cfg.lr_final_frac
                + (1.0 - cfg.lr_final_frac) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()));
        opt.set_lr(lr);
        opt.step(&mut model, &grads)?;
        window += loss;
        count += 1;
        if count == cfg.log_every.max(1) || step + 1 == cfg.steps {
            trace.steps.push(step + 1);
            trace.loss.push(window / count as f64);
            log::debug!("gf step {} loss {:.5}", step + 1, window / count as f64);
            window = 0.0;
            count = 0;
        }
    }
    Ok((model, trace))
}

/// Raw score at inference time in normalized joint space.
pub fn primitive_score<T: Real>(
    model: &ScoreModel<T>,
    hand: &HandModel<f64>,
    joints: &JointVector<f64>,
    cloud_world: &[crate::geom::Vec2<f64>],
    wrist: &WristPose<f64>,
) -> Result<[f64; NUM_JOINTS]> {
    Ok(primitive_scores(
        model,
        hand,
        &[PrimitiveQuery {
            joints,
            cloud_world,
            wrist,
        }],
    )?[0])
}

/// Inputs of one primitive-action query.
#[derive(Debug, Clone, Copy)]
pub struct PrimitiveQuery<'a> {
    pub joints: &'a JointVector<f64>,
    pub cloud_world: &'a [crate::geom::Vec2<f64>],
    pub wrist: &'a WristPose<f64>,
}

/// Inference-time scores for several queries sharing one cloud size.
pub fn primitive_scores<T: Real>(
    model: &ScoreModel<T>,
    hand: &HandModel<f64>,
    queries: &[PrimitiveQuery<'_>],
) -> Result<Vec<[f64; NUM_JOINTS]>> {
    let Some(first) = queries.first() else {
        return Ok(Vec::new());
    };
    let set_len = first.cloud_world.len();
    let mut pts = Vec::with_capacity(queries.len() * set_len * 2);
    let mut x = Vec::with_capacity(queries.len() * NUM_JOINTS);
    for q in queries {
        if q.cloud_world.len() != set_len {
            return Err(NnError::Shape {
                context: "primitive_scores cloud",
                expected: vec![set_len],
                got: vec![q.cloud_world.len()],
            });
        }
        pts.extend(cloud_in_wrist_frame::<T>(q.cloud_world, q.wrist));
        x.extend(hand.normalize(q.joints).iter().map(|&v| T::lit(v)));
    }
    let cond = ConditionBatch::Points {
        points: TensorBuf::from_vec(&[queries.len() * set_len, 2], pts)?,
        set_len,
    };
    let t = model.schedule.t_inference;
    model.schedule.sigma(t)?;
    let xb = TensorBuf::from_vec(&[queries.len(), NUM_JOINTS], x)?;
    let (h, _) = model.forward(&cond, 1, &xb, &vec![t; queries.len()])?;
    let k = model.output_scale(t);
    let mut out = Vec::with_capacity(queries.len());
    for i in 0..queries.len() {
        let mut s = [0.0; NUM_JOINTS];
        for (o, v) in s.iter_mut().zip(h.row(i)) {
            *o = v.as_f64() * k;
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite("primitive action"));
        }
        out.push(s);
    }
    Ok(out)
}

/// Primitive action: the inference-time score direction, rescaled so its
/// largest component has magnitude at most one.
pub fn primitive_action<T: Real>(
    model: &ScoreModel<T>,
    hand: &HandModel<f64>,
    joints: &JointVector<f64>,
    cloud_world: &[crate::geom::Vec2<f64>],
    wrist: &WristPose<f64>,
) -> Result<[f64; NUM_JOINTS]> {
    let s = primitive_score(model, hand, joints, cloud_world, wrist)?;
    Ok(unit_max(s))
}

pub fn unit_max(mut s: [f64; NUM_JOINTS]) -> [f64; NUM_JOINTS] {
    let m = s.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if m > 1.0 {
        s.iter_mut().for_each(|v| *v /= m);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sigma_rejects_out_of_range() {
        let s = NoiseSchedule::default();
        assert!(s.sigma(-0.1).is_err());
        assert!(s.sigma(1.5).is_err());
        assert_eq!(s.sigma(0.0).unwrap(), 0.0);
    }

    #[test]
    fn zero_noise_perturbation_is_identity() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let j = [0.1, -0.2];
        let p = perturb(&s, &j, 0.0, &mut rng).unwrap();
        assert_eq!(p, j);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = ScoreSpec {
            condition: ConditionSpec::PointSet(SetEncoderSpec::new(&[2, 8, 8], Activation::Silu)),
            joint_widths: vec![8],
            time_widths: vec![8],
            trunk_hidden: vec![16],
            ..Default::default()
        };
        let m = ScoreModel::<f64>::init(&spec, NoiseSchedule::default(), &mut rng).unwrap();
        let back = ScoreModel::<f64>::from_checkpoint(&m.to_checkpoint()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn unit_max_preserves_direction() {
        let a = unit_max([4.0, -2.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(a, [1.0, -0.5, 0.0, 0.25, 0.0, 0.0]);
        let small = [0.5, -0.1, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(unit_max(small), small);
    }
}
