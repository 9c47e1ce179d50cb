//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! Trains the gradient field and the residual policies of a fresh run
//! directory (or reuses one under `HANDGF_RUN_ROOT`), so a full run takes
//! tens of minutes on one core.

use std::time::Instant;

use handgf_cli::config::RunConfig;
use handgf_cli::pipeline::Run;
use handgf_cli::protocol::SessionMessage;
use handgf_cli::server::{Catalog, Session};
use handgf_core::geom::Vec2;
use handgf_core::graspdata::{GraspExample, Split};
use handgf_core::graspgf::{
    dsm_loss, primitive_scores, unit_max, ConditionBatch, ConditionSpec, DsmBatch, NoiseSchedule,
    PrimitiveQuery, ScoreModel, ScoreSpec,
};
use handgf_core::hand::{
    edge_wrenches, force_closure, Contact, JointVector, LiftOutcome, LinkId, NUM_JOINTS,
};
use handgf_core::nn::{
    clip_grad_norm, Activation, AdamConfig, Mlp, MlpSpec, OptState, ParamSet, SetEncoder,
    SetEncoderSpec, TensorBuf,
};
use handgf_core::rl::{
    combine_action, compute_reward, sample_feasible_episode, split_raw, AblationFlags, ActMode,
    Agent, EpisodeRunner, WristNoise, RAW_DIM,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const CONFIG: &str = "\
[hand]
[objects]
[trajgen]
[gf]
[rl]
[eval]
seeds = [1, 2, 3]
repeats = 4
targets_per_object = 5
max_objects = 10
[server]
";

#[derive(Default)]
struct Report {
    failed: Vec<String>,
}

impl Report {
    fn check(&mut self, name: &str, pass: bool, detail: String) {
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failed.push(name.to_string());
        }
    }
}

fn rand_buf(rows: usize, cols: usize, rng: &mut impl Rng) -> TensorBuf<f64> {
    TensorBuf::from_vec(
        &[rows, cols],
        (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let d: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    norm(&d) / (norm(a) + norm(n)).max(1e-12)
}

fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let h = 1e-6;
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let v = x[i];
            x[i] = v + h;
            let up = f(&x);
            x[i] = v - h;
            let down = f(&x);
            x[i] = v;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn gradient_check(report: &mut Report) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for case in 0..50 {
        let act = [Activation::Silu, Activation::Tanh][case % 2];
        let widths = [3, 6, 5, 2];
        let mlp = Mlp::<f64>::init(&MlpSpec::new(&widths, act), &mut rng).unwrap();
        let x = rand_buf(2, 3, &mut rng);
        let w = rand_buf(2, 2, &mut rng);
        let (_, cache) = mlp.forward(&x).unwrap();
        let (g, _) = mlp.backward(&cache, &w).unwrap();
        let mut probe = mlp.clone();
        let num = numeric_grad(&mlp.flat(), |p| {
            probe.set_flat(p).unwrap();
            dot(&probe.predict(&x).unwrap().data, &w.data)
        });
        worst = worst.max(rel_err(&g.flat(), &num));

        let spec = SetEncoderSpec::new(&[2, 6, 4], act);
        let enc = SetEncoder::<f64>::init(&spec, &mut rng).unwrap();
        let pts = rand_buf(2 * 7, 2, &mut rng);
        let w = rand_buf(2, 4, &mut rng);
        let (_, cache) = enc.forward(&pts, 7).unwrap();
        let mut g = SetEncoder::zeros(&spec).unwrap();
        enc.backward_into(&cache, &w, &mut g).unwrap();
        let mut probe = enc.clone();
        let num = numeric_grad(&enc.flat(), |p| {
            probe.set_flat(p).unwrap();
            dot(&probe.forward(&pts, 7).unwrap().0.data, &w.data)
        });
        worst = worst.max(rel_err(&g.flat(), &num));
    }
    let secs = start.elapsed().as_secs_f64();
    report.check(
        "gradient check (MLP and set encoder, 50 cases)",
        worst < 1e-4 && secs < 60.0,
        format!("worst relative error {worst:.2e} (< 1e-4), {secs:.1} s (< 60 s)"),
    );
}

fn schedule_check(report: &mut Report) {
    let s = NoiseSchedule::default();
    let s0 = s.sigma(0.0).unwrap();
    let s1 = s.sigma(1.0).unwrap();
    let want = 1.0 - (-5.05f64).exp();
    report.check(
        "noise schedule endpoints",
        s0 == 0.0 && (s1 - want).abs() < 1e-9,
        format!(
            "sigma(0) = {s0:e} (exactly 0), |sigma(1) - (1 - e^-5.05)| = {:.1e} (< 1e-9)",
            (s1 - want).abs()
        ),
    );
}

fn dsm_check(report: &mut Report) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let spec = ScoreSpec {
        data_dim: 1,
        condition: ConditionSpec::Vector(1),
        joint_widths: vec![32],
        time_freqs: 4,
        time_widths: vec![16],
        trunk_hidden: vec![64, 64],
        sigma_ref: 0.07,
    };
    let schedule = NoiseSchedule::default();
    let data_sd = 0.2;
    let mut model = ScoreModel::<f64>::init(&spec, schedule, &mut rng).unwrap();
    let mut opt = OptState::new(AdamConfig::with_lr(2e-3), &model);
    let steps = 4000;
    for step in 0..steps {
        let c: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x: Vec<f64> = c
            .iter()
            .map(|&c| 0.5 * c + data_sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let cond = ConditionBatch::Vectors(TensorBuf::from_vec(&[64, 1], c).unwrap());
        let batch = DsmBatch::sample(
            &schedule,
            cond,
            TensorBuf::from_vec(&[64, 1], x).unwrap(),
            4,
            &mut rng,
        );
        let (_, mut g) = dsm_loss(&model, &batch).unwrap();
        clip_grad_norm(&mut g, 10.0);
        opt.set_lr(2e-3 * (1.0 - 0.9 * step as f64 / steps as f64));
        opt.step(&mut model, &g).unwrap();
    }
    let mut worst = f64::INFINITY;
    for &c in &[-0.8, 0.0, 0.8] {
        for &t in &[schedule.t_inference, 0.1, 0.3, 0.6] {
            let sigma = schedule.sigma(t).unwrap();
            let var = data_sd * data_sd + sigma * sigma;
            let cond = ConditionBatch::Vectors(TensorBuf::from_vec(&[1, 1], vec![c]).unwrap());
            let (mut got, mut want) = (Vec::new(), Vec::new());
            for k in 0..=30 {
                let x = 0.5 * c + var.sqrt() * (6.0 * k as f64 / 30.0 - 3.0);
                got.push(model.score(&cond, &[x], t).unwrap()[0]);
                want.push(-(x - 0.5 * c) / var);
            }
            let cos = dot(&got, &want) / (dot(&got, &got) * dot(&want, &want)).sqrt();
            worst = worst.min(cos);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report.check(
        "score matching on a 1-D conditional Gaussian",
        worst >= 0.95 && secs < 300.0,
        format!("worst cosine {worst:.4} (>= 0.95), {secs:.1} s (< 300 s)"),
    );
}

fn closure_check(report: &mut Report) {
    type W = [f64; 3];
    let det = |a: W, b: W, c: W| {
        a[0] * (b[1] * c[2] - b[2] * c[1]) - a[1] * (b[0] * c[2] - b[2] * c[0])
            + a[2] * (b[0] * c[1] - b[1] * c[0])
    };
    let in_tetra = |p: [W; 4]| {
        let s = |a: W, b: W| [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
        let (a, b, c) = (s(p[1], p[0]), s(p[2], p[0]), s(p[3], p[0]));
        let d = det(a, b, c);
        if d.abs() < 1e-12 {
            return false;
        }
        let r = [-p[0][0], -p[0][1], -p[0][2]];
        let l = [det(r, b, c) / d, det(a, r, c) / d, det(a, b, r) / d];
        l.iter().all(|&v| v > 0.0) && 1.0 - l.iter().sum::<f64>() > 0.0
    };
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let (mut agree, mut closed) = (0, 0);
    for _ in 0..200 {
        let n = rng.gen_range(1..=3);
        let contacts: Vec<Contact<f64>> = (0..n)
            .map(|_| {
                let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let r: f64 = rng.gen_range(0.3..1.0);
                let tilt: f64 = rng.gen_range(-1.0..1.0);
                Contact {
                    point: Vec2::new(r * a.cos(), r * a.sin()),
                    normal: Vec2::new((a + tilt).cos(), (a + tilt).sin()),
                    link: LinkId::Palm,
                    gap: 0.0,
                }
            })
            .collect();
        let mu = rng.gen_range(0.1..1.2);
        let com = Vec2::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2));
        let w = edge_wrenches(&contacts, mu, com, 1.0);
        let mut oracle = false;
        for i in 0..w.len() {
            for j in i + 1..w.len() {
                for k in j + 1..w.len() {
                    for l in k + 1..w.len() {
                        oracle |= in_tetra([w[i], w[j], w[k], w[l]]);
                    }
                }
            }
        }
        closed += oracle as usize;
        agree += (force_closure(&contacts, mu, com) == oracle) as usize;
    }
    report.check(
        "force closure against brute-force simplex oracle",
        agree == 200,
        format!("{agree}/200 agree (100% required), {closed} force closed"),
    );
}

fn composition_check(report: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let flags = AblationFlags {
        no_rl: true,
        ..Default::default()
    };
    let mut exact = 0;
    for _ in 0..10_000 {
        let scale: f64 = 10f64.powf(rng.gen_range(-3.0..3.0));
        let a_p = unit_max(std::array::from_fn(|_| {
            scale * rng.sample::<f64, _>(StandardNormal)
        }));
        let raw: [f64; RAW_DIM] = std::array::from_fn(|_| rng.gen_range(-5.0..5.0));
        let (a_s, a_r) = split_raw(&raw, &flags);
        let a = combine_action(&a_p, &a_s, &a_r);
        exact += (0..NUM_JOINTS).all(|k| a[k].to_bits() == a_p[k].to_bits()) as usize;
    }
    report.check(
        "composition identity",
        exact == 10_000,
        format!("{exact}/10000 bit-exact"),
    );
}

fn reward_check(report: &mut Report) {
    let cfg = handgf_core::rl::RewardConfig::default();
    let success = LiftOutcome {
        success: true,
        height_gain: 0.5,
        rel_displacement: 0.0,
        delta_h: 0.5,
        closure: true,
    };
    let a_p = [0.3, -0.2, 0.1, 0.0, 0.5, -0.4];
    let terminal = compute_reward(49, &a_p, &[0.01; NUM_JOINTS], Some(&success), &cfg);
    let off_grid = (1..=50)
        .filter(|t| t % 5 != 0)
        .all(|t| compute_reward(t, &a_p, &[0.02; NUM_JOINTS], None, &cfg) == 0.0);
    let mut p = [0.0; NUM_JOINTS];
    p[0] = 2.0;
    let mut dj = [0.0; NUM_JOINTS];
    dj[0] = 0.05;
    let example = compute_reward(10, &p, &dj, None, &cfg);
    report.check(
        "reward suite",
        terminal == 1.0 && off_grid && (example - 0.0045).abs() < 1e-12,
        format!("terminal success {terminal} (exactly 1.0), zero off grid {off_grid}, example {example:.6} (0.0045)"),
    );
}

fn mode_recovery(report: &mut Report, run: &Run, gf: &ScoreModel<f64>, train: &[GraspExample]) {
    let start = Instant::now();
    let hand = &run.cfg.hand.model;
    let lib = run.library();
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let trials = 200;
    let picks: Vec<&GraspExample> = (0..trials)
        .map(|_| &train[rng.gen_range(0..train.len())])
        .collect();
    let clouds: Vec<Vec<Vec2<f64>>> = picks
        .iter()
        .map(|e| {
            let mut o = lib.iter().find(|o| o.id == e.object_id).unwrap().clone();
            o.rest_on_table(0.0);
            o.world_cloud()
        })
        .collect();
    let mut joints: Vec<JointVector<f64>> = picks
        .iter()
        .map(|e| {
            let mut j = e.joints;
            for q in j.q.iter_mut() {
                *q += rng.gen_range(-0.3..0.3);
            }
            hand.clamp_joints(&mut j);
            j
        })
        .collect();
    for _ in 0..200 {
        let queries: Vec<PrimitiveQuery<'_>> = (0..trials)
            .map(|i| PrimitiveQuery {
                joints: &joints[i],
                cloud_world: &clouds[i],
                wrist: &picks[i].wrist,
            })
            .collect();
        let a: Vec<[f64; NUM_JOINTS]> = primitive_scores(gf, hand, &queries)
            .unwrap()
            .into_iter()
            .map(unit_max)
            .collect();
        for (j, a) in joints.iter_mut().zip(a) {
            for (q, d) in j.q.iter_mut().zip(a) {
                *q += 0.01 * d;
            }
            hand.clamp_joints(j);
        }
    }
    let ok = joints
        .iter()
        .zip(&picks)
        .filter(|(j, e)| j.distance(&e.joints) < 0.15)
        .count();
    let secs = start.elapsed().as_secs_f64();
    report.check(
        "mode recovery",
        ok * 100 >= 80 * trials && secs < 600.0,
        format!("{ok}/{trials} within 0.15 rad (>= 80%), {secs:.1} s (< 600 s)"),
    );
}

/// Replays one stored wrist sequence through a live session and through the
/// batch runner.
fn equivalence(report: &mut Report, run: &Run, gf: &ScoreModel<f64>, train: &[GraspExample]) {
    let full = AblationFlags::default();
    let policy = run.policy(&full).unwrap().unwrap();
    let (_, test_patterns) = run.patterns().unwrap();
    let catalog = Catalog {
        hand: run.cfg.hand.model.clone(),
        env: run.cfg.hand.env.clone(),
        objects: run.library(),
        grasps: train.to_vec(),
        gf: Some(gf.clone()),
        policies: vec![("full".into(), policy)],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let (mut same, mut total) = (0, 0);
    for k in 0..5 {
        let g = &train[(k * 37) % train.len()];
        let o = catalog
            .objects
            .iter()
            .find(|o| o.id == g.object_id)
            .unwrap();
        let mut spec = sample_feasible_episode(
            &catalog.hand,
            &catalog.env,
            o,
            g,
            &test_patterns,
            &run.cfg.trajgen,
            &mut rng,
        )
        .unwrap();
        let dx = spec.object.pose.x;
        spec.object.rest_on_table(0.0);
        spec.target = spec.target.shifted(-dx);
        spec.trajectory.iter_mut().for_each(|p| p.x -= dx);
        let runner = EpisodeRunner {
            agent: Agent {
                hand: &catalog.hand,
                gf: catalog.gf.as_ref(),
                policy: Some(&catalog.policies[0].1),
                flags: full,
            },
            env_config: &catalog.env,
            reward: &run.cfg.rl.reward,
            noise: None,
            mode: ActMode::Mean,
            record_trace: true,
        };
        let reference = runner
            .run(std::slice::from_ref(&spec), &mut rng)
            .unwrap()
            .remove(0);

        let mut s = Session::new(&catalog);
        s.handle(SessionMessage::LoadSession {
            object_id: spec.object.id.clone(),
            gf_path: String::new(),
            policy_path: String::new(),
            flags: "full".into(),
        });
        let input = |p: handgf_core::hand::WristPose<f64>, seq| SessionMessage::WristInput {
            x: p.x,
            y: p.y,
            theta: p.theta,
            seq,
        };
        s.handle(input(spec.trajectory[0], 1));
        let mut trace = vec![s.env().unwrap().trace_line()];
        for t in 1..=catalog.env.horizon {
            s.handle(input(
                spec.trajectory[t.min(spec.trajectory.len() - 1)],
                t as u64 + 1,
            ));
            s.tick();
            trace.push(s.env().unwrap().trace_line());
        }
        let lift = s.handle(SessionMessage::TriggerLift {});
        let outcome_same = matches!(
            lift[..],
            [SessionMessage::LiftResult { success, height_gain, .. }]
                if success == reference.outcome.success
                    && height_gain.to_bits() == reference.outcome.height_gain.to_bits()
        );
        same += (trace == reference.trace && outcome_same) as usize;
        total += 1;
    }
    report.check(
        "headless and interactive rollouts",
        same == total,
        format!("{same}/{total} episodes identical in every joint state and outcome"),
    );
}

#[test]
fn acceptance() {
    let mut report = Report::default();
    gradient_check(&mut report);
    schedule_check(&mut report);
    dsm_check(&mut report);
    closure_check(&mut report);
    composition_check(&mut report);
    reward_check(&mut report);

    let tmp = tempfile::tempdir().unwrap();
    let root = std::env::var_os(handgf_cli::pipeline::RUN_ROOT_ENV)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| tmp.path().to_path_buf());
    let start = Instant::now();
    let run = Run::open(RunConfig::parse(CONFIG).unwrap(), 0, &root).unwrap();
    let ds = run.dataset().unwrap();
    let train = run.train_examples(&ds);
    let gf = run.gf().unwrap();
    println!("gradient field ready after {:.1?}", start.elapsed());
    mode_recovery(&mut report, &run, &gf, &train);

    let full = AblationFlags::default();
    let ap = AblationFlags {
        no_rl: true,
        ..full
    };
    let ap_free = AblationFlags {
        no_collision: true,
        ..ap
    };
    let no_gf = AblationFlags {
        no_gf: true,
        ..full
    };
    let eval = |f: &AblationFlags, noise: Option<WristNoise>| {
        let (r, _) = run.evaluate(f, Split::Train, noise, false).unwrap();
        println!(
            "  {:<40} success {:.3} ± {:.3}  posture {:.3} ± {:.3}  episodes/seed {}  [{:.1?}]",
            r.label,
            r.success.mean,
            r.success.sd,
            r.posture.mean,
            r.posture.sd,
            r.per_seed[0].episodes,
            start.elapsed()
        );
        r
    };
    let r_full = eval(&full, None);
    let r_ap = eval(&ap, None);
    let r_free = eval(&ap_free, None);
    let r_nogf = eval(&no_gf, None);
    let r_n2 = eval(&full, Some(WristNoise { deg: 2.0, cm: 2.0 }));
    let r_n5 = eval(&full, Some(WristNoise { deg: 5.0, cm: 5.0 }));
    let minutes = start.elapsed().as_secs_f64() / 60.0;

    let objects =
        r_full.per_seed[0].episodes / (run.cfg.eval.targets_per_object * run.cfg.eval.repeats);
    let pp = 100.0 * (r_full.success.mean - r_ap.success.mean);
    report.check(
        "primitive and residual success ordering",
        pp >= 15.0 && r_free.success.mean >= 0.40 && minutes <= 120.0,
        format!(
            "full {:.1}% vs a^p with collisions {:.1}% (+{pp:.1} pp, >= 15), a^p without collisions {:.1}% (>= 40%); \
             {objects} objects, 20 episodes/object, {} seeds; pipeline {minutes:.1} min (<= 120)",
            100.0 * r_full.success.mean,
            100.0 * r_ap.success.mean,
            100.0 * r_free.success.mean,
            r_full.per_seed.len()
        ),
    );
    report.check(
        "posture with and without the gradient field",
        r_full.posture.mean < r_nogf.posture.mean,
        format!(
            "full {:.3} rad < no_gf {:.3} rad (means over {} seeds)",
            r_full.posture.mean,
            r_nogf.posture.mean,
            r_full.per_seed.len()
        ),
    );
    let (s0, s2, s5) = (
        100.0 * r_full.success.mean,
        100.0 * r_n2.success.mean,
        100.0 * r_n5.success.mean,
    );
    report.check(
        "wrist noise robustness",
        (s2 - s0).abs() <= 5.0 && s5 > s0 / 2.0 && s0 >= s2 && s2 >= s5,
        format!(
            "noiseless {s0:.1}% >= (2 deg, 2 cm) {s2:.1}% (within 5 pp) >= (5 deg, 5 cm) {s5:.1}% (> {:.1}%)",
            s0 / 2.0
        ),
    );
    equivalence(&mut report, &run, &gf, &train);

    assert!(report.failed.is_empty(), "failed: {:?}", report.failed);
}
