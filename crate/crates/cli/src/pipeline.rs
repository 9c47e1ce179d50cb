//! Run directories and the artifact pipeline shared by the subcommands.
//!
//! Every artifact of a run lives in `<root>/<config hash>-s<seed>/`; stages
//! reuse artifacts already present there.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use handgf_core::eval::{self, EvalConfig, EvalContext, EvalSuite, MetricsReport};
use handgf_core::graspdata::{
    desk_library, load_dataset, save_dataset, split_objects, synthesize_grasps, GraspDataset,
    GraspExample, Split,
};
use handgf_core::graspgf::{train_gf, ScoreModel};
use handgf_core::hand::ObjectShape;
use handgf_core::nn::Checkpoint;
use handgf_core::rl::{
    train_residual_with, write_curve, AblationFlags, Agent, EpisodeResult, ResidualPolicy,
    TrainSetup, WristNoise,
};
use handgf_core::trajgen::{
    make_pattern_library, read_patterns, split_patterns, write_patterns, TrajectoryPattern,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const RUN_ROOT_ENV: &str = "HANDGF_RUN_ROOT";

/// Random streams of the stages, so that rerunning one stage does not
/// shift the others.
#[derive(Debug, Clone, Copy)]
enum Stream {
    Data = 1,
    Patterns = 2,
    Gf = 3,
    Rl = 4,
    Demo = 5,
}

pub struct Run {
    pub cfg: RunConfig,
    pub hash: String,
    pub seed: u64,
    pub dir: PathBuf,
}

impl Run {
    /// Root directory from the environment, defaulting to `./runs`.
    pub fn root_from_env() -> PathBuf {
        std::env::var_os(RUN_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    pub fn open(cfg: RunConfig, seed: u64, root: &Path) -> Result<Self> {
        cfg.validate()?;
        let hash = cfg.hash();
        let dir = root.join(format!("{hash}-s{seed}"));
        std::fs::create_dir_all(&dir)?;
        let run = Self {
            cfg,
            hash,
            seed,
            dir,
        };
        let cfg_path = run.path("config.toml");
        if !cfg_path.exists() {
            std::fs::write(
                &cfg_path,
                format!("# config {}\n{}", run.hash, run.cfg.to_toml()),
            )?;
        }
        Ok(run)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn rng(&self, stream: Stream) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(stream as u64);
        r
    }

    pub fn library(&self) -> Vec<ObjectShape<f64>> {
        desk_library()
    }

    /// Loads the dataset of this run, synthesizing it first if needed.
    pub fn dataset(&self) -> Result<GraspDataset> {
        let path = self.path("dataset.txt");
        let hand = &self.cfg.hand.model;
        if path.exists() {
            return Ok(load_dataset(&path, hand)?);
        }
        let mut rng = self.rng(Stream::Data);
        let lib = self.library();
        let mut ds = GraspDataset::default();
        for o in &lib {
            let ex = synthesize_grasps(
                hand,
                &self.cfg.hand.env,
                o,
                &self.cfg.objects.synth,
                &mut rng,
            )?;
            log::info!("{}: {} grasps", o.id, ex.len());
            ds.examples.extend(ex);
        }
        let ids: Vec<(String, String)> = lib
            .iter()
            .map(|o| (o.id.clone(), o.category.clone()))
            .collect();
        ds.splits = split_objects(&ids, &self.cfg.objects.split, &mut rng)?;
        save_dataset(&ds, hand, &path)?;
        Ok(ds)
    }

    /// Training and test trajectory patterns, disjoint.
    pub fn patterns(&self) -> Result<(Vec<TrajectoryPattern>, Vec<TrajectoryPattern>)> {
        let (tp, sp) = (
            self.path("patterns_train.txt"),
            self.path("patterns_test.txt"),
        );
        if tp.exists() && sp.exists() {
            return Ok((read_patterns(&tp)?, read_patterns(&sp)?));
        }
        let mut rng = self.rng(Stream::Patterns);
        let lib = make_pattern_library(self.cfg.trajgen.n_patterns, &mut rng)?;
        let (train, test) = split_patterns(lib, self.cfg.trajgen.n_test_patterns, &mut rng);
        write_patterns(&train, &tp)?;
        write_patterns(&test, &sp)?;
        Ok((train, test))
    }

    pub fn train_examples(&self, ds: &GraspDataset) -> Vec<GraspExample> {
        ds.examples_in(Split::Train).into_iter().cloned().collect()
    }

    /// The gradient field of this run, trained first if needed.
    pub fn gf(&self) -> Result<ScoreModel<f64>> {
        let path = self.path("gf.ckpt");
        if path.exists() {
            return Ok(ScoreModel::from_checkpoint(&Checkpoint::load(&path)?)?);
        }
        let ds = self.dataset()?;
        let train = self.train_examples(&ds);
        let mut rng = self.rng(Stream::Gf);
        let g = &self.cfg.gf;
        let t0 = std::time::Instant::now();
        let (model, trace) = train_gf(
            &train,
            &self.library(),
            &self.cfg.hand.model,
            &g.model,
            g.schedule,
            &g.train,
            &mut rng,
        )?;
        log::info!("gradient field trained in {:.1?}", t0.elapsed());
        let mut loss = format!("# config {}\n# step loss\n", self.hash);
        for (s, l) in trace.steps.iter().zip(&trace.loss) {
            writeln!(loss, "{s} {l:.6e}").unwrap();
        }
        std::fs::write(self.path("gf_loss.txt"), loss)?;
        let mut ck = model.to_checkpoint();
        ck.set("config_hash", &self.hash);
        ck.save(&path)?;
        Ok(model)
    }

    fn policy_path(flags: &AblationFlags) -> String {
        let train = AblationFlags {
            no_collision: false,
            ..*flags
        };
        format!("policy_{}.ckpt", train.name())
    }

    /// The residual policy for `flags` (trained with collisions), or `None`
    /// when the flags switch the policy off.
    pub fn policy(&self, flags: &AblationFlags) -> Result<Option<ResidualPolicy<f64>>> {
        flags.validate()?;
        if flags.no_rl {
            return Ok(None);
        }
        let path = self.path(&Self::policy_path(flags));
        if path.exists() {
            let (p, _) = ResidualPolicy::from_checkpoint(&Checkpoint::load(&path)?)?;
            return Ok(Some(p));
        }
        let train_flags = AblationFlags {
            no_collision: false,
            ..*flags
        };
        let ds = self.dataset()?;
        let (patterns, _) = self.patterns()?;
        let gf = if train_flags.no_gf {
            None
        } else {
            Some(self.gf()?)
        };
        let examples = self.train_examples(&ds);
        let lib = self.library();
        let rl = &self.cfg.rl;
        let setup = TrainSetup {
            hand: &self.cfg.hand.model,
            env: &self.cfg.hand.env,
            reward: &rl.reward,
            ppo: &rl.ppo,
            traj: &self.cfg.trajgen,
            policy: &rl.policy,
            flags: train_flags,
            objects: &lib,
            examples: &examples,
            patterns: &patterns,
        };
        let mut rng = self.rng(Stream::Rl);
        let t0 = std::time::Instant::now();
        let (policy, curve) = train_residual_with(&setup, gf.as_ref(), &mut rng, &mut |c, st| {
            if c.iteration % 10 == 0 {
                log::info!(
                    "{}: iter {} steps {} success {:.3} ev {:.3}",
                    train_flags.name(),
                    c.iteration,
                    c.env_steps,
                    c.success_rate,
                    st.explained_variance
                );
            }
        })?;
        log::info!("{} trained in {:.1?}", train_flags.name(), t0.elapsed());
        write_curve(
            &self.path(&format!("curve_{}.txt", train_flags.name())),
            &self.hash,
            &curve,
        )?;
        let mut ck = policy.to_checkpoint(&train_flags);
        ck.set("config_hash", &self.hash);
        ck.save(&path)?;
        Ok(Some(policy))
    }

    pub fn suite(&self, ds: &GraspDataset, split: Split) -> Result<EvalSuite> {
        let max = (self.cfg.eval.max_objects > 0).then_some(self.cfg.eval.max_objects);
        Ok(EvalSuite::from_dataset(
            ds,
            &self.library(),
            split,
            self.cfg.eval.targets_per_object,
            max,
        )?)
    }

    pub fn eval_config(&self, noise: Option<WristNoise>, record_trace: bool) -> EvalConfig {
        EvalConfig {
            seeds: self.cfg.eval.seeds.clone(),
            repeats: self.cfg.eval.repeats,
            targets_per_object: self.cfg.eval.targets_per_object,
            noise,
            record_trace,
        }
    }

    /// Evaluates one flag combination on `split` with the test patterns.
    pub fn evaluate(
        &self,
        flags: &AblationFlags,
        split: Split,
        noise: Option<WristNoise>,
        record_trace: bool,
    ) -> Result<(MetricsReport, Vec<EpisodeResult>)> {
        let ds = self.dataset()?;
        let suite = self.suite(&ds, split)?;
        let (_, test_patterns) = self.patterns()?;
        let gf = if flags.no_gf { None } else { Some(self.gf()?) };
        let policy = self.policy(flags)?;
        let ctx = EvalContext {
            env: &self.cfg.hand.env,
            reward: &self.cfg.rl.reward,
            traj: &self.cfg.trajgen,
            patterns: &test_patterns,
        };
        let agent = Agent {
            hand: &self.cfg.hand.model,
            gf: gf.as_ref(),
            policy: policy.as_ref(),
            flags: *flags,
        };
        let (records, episodes) =
            eval::evaluate(agent, &suite, &ctx, &self.eval_config(noise, record_trace))?;
        let mut label = format!("{} {}", split.name(), flags.name());
        if let Some(n) = noise.filter(|n| !n.is_zero()) {
            write!(label, " noise {}deg {}cm", n.deg, n.cm).unwrap();
        }
        Ok((eval::aggregate(&records, &label, &self.hash), episodes))
    }

    /// Rolls out `episodes` episodes on training grasps with the test
    /// patterns and writes their state traces.
    pub fn demo(&self, flags: &AblationFlags, episodes: usize) -> Result<PathBuf> {
        let ds = self.dataset()?;
        let (_, test_patterns) = self.patterns()?;
        let gf = if flags.no_gf { None } else { Some(self.gf()?) };
        let policy = self.policy(flags)?;
        let lib = self.library();
        let examples = self.train_examples(&ds);
        if examples.is_empty() {
            return Err(CliError::Data("no training grasps".into()));
        }
        let mut rng = self.rng(Stream::Demo);
        let mut specs = Vec::with_capacity(episodes);
        for k in 0..episodes {
            let g = &examples[(k * 7919) % examples.len()];
            let o = lib
                .iter()
                .find(|o| o.id == g.object_id)
                .ok_or_else(|| CliError::Data(format!("unknown object {}", g.object_id)))?;
            specs.push(handgf_core::rl::sample_feasible_episode(
                &self.cfg.hand.model,
                &self.cfg.hand.env,
                o,
                g,
                &test_patterns,
                &self.cfg.trajgen,
                &mut rng,
            )?);
        }
        let runner = handgf_core::rl::EpisodeRunner {
            agent: Agent {
                hand: &self.cfg.hand.model,
                gf: gf.as_ref(),
                policy: policy.as_ref(),
                flags: *flags,
            },
            env_config: &self.cfg.hand.env,
            reward: &self.cfg.rl.reward,
            noise: None,
            mode: handgf_core::rl::ActMode::Mean,
            record_trace: true,
        };
        let results = runner.run(&specs, &mut rng)?;
        let path = self.path(&format!("demo_{}.txt", flags.name()));
        write_traces(&path, &self.hash, &results)?;
        Ok(path)
    }
}

/// Writes per-episode state traces with their outcomes.
pub fn write_traces(path: &Path, hash: &str, episodes: &[EpisodeResult]) -> Result<()> {
    let mut s = format!("# config {hash}\n");
    for (i, e) in episodes.iter().enumerate() {
        writeln!(
            s,
            "episode {i} object {} success {} delta_h {:.6}",
            e.object_id, e.outcome.success, e.outcome.delta_h
        )
        .unwrap();
        for line in &e.trace {
            s.push_str(line);
            s.push('\n');
        }
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// The ablation rows: label and flags.
pub fn ablation_modes() -> Vec<(&'static str, AblationFlags)> {
    let f = AblationFlags::default();
    vec![
        ("a^p", AblationFlags { no_rl: true, ..f }),
        (
            "a^p (no collision)",
            AblationFlags {
                no_rl: true,
                no_collision: true,
                ..f
            },
        ),
        (
            "a^p*a^s",
            AblationFlags {
                no_residual: true,
                ..f
            },
        ),
        (
            "a^p+a^r",
            AblationFlags {
                no_scale: true,
                ..f
            },
        ),
        ("a^p*a^s+a^r", f),
        ("no_gf", AblationFlags { no_gf: true, ..f }),
    ]
}

/// One line per mode: success, posture and stability means with their
/// spread over seeds.
pub fn comparison_table(rows: &[(&str, MetricsReport)]) -> String {
    let mut s = String::from("mode                 success        posture        trans_cm\n");
    for (name, r) in rows {
        writeln!(
            s,
            "{name:<20} {:.3} ± {:.3}  {:.3} ± {:.3}  {:.3} ± {:.3}",
            r.success.mean,
            r.success.sd,
            r.posture.mean,
            r.posture.sd,
            100.0 * r.stability_trans.mean,
            100.0 * r.stability_trans.sd
        )
        .unwrap();
    }
    s
}
