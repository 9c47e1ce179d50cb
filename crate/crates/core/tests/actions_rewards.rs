//! Action composition, reward terms and episode metrics on hand-built inputs.

use handgf_core::eval::{posture_metric, stability_metric};
use handgf_core::geom::{Pose2, Vec2};
use handgf_core::graspdata::GraspExample;
use handgf_core::graspgf::unit_max;
use handgf_core::hand::{JointVector, LiftOutcome, NUM_JOINTS};
use handgf_core::rl::{
    alignment, combine_action, compute_reward, gae_advantages, split_raw, AblationFlags,
    RewardConfig, RAW_DIM,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[test]
fn primitive_only_composition_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let flags = AblationFlags {
        no_rl: true,
        ..Default::default()
    };
    for _ in 0..10_000 {
        let scale: f64 = 10f64.powf(rng.gen_range(-3.0..3.0));
        let s: [f64; NUM_JOINTS] =
            std::array::from_fn(|_| scale * rng.sample::<f64, _>(StandardNormal));
        let a_p = unit_max(s);
        let raw: [f64; RAW_DIM] = std::array::from_fn(|_| rng.gen_range(-5.0..5.0));
        let (a_s, a_r) = split_raw(&raw, &flags);
        let a = combine_action(&a_p, &a_s, &a_r);
        for k in 0..NUM_JOINTS {
            assert_eq!(a[k].to_bits(), a_p[k].to_bits(), "{a_p:?} -> {a:?}");
        }
    }
}

#[test]
fn ablated_modules_are_neutral() {
    let raw: [f64; RAW_DIM] = std::array::from_fn(|k| 0.3 * k as f64 - 1.0);
    let (a_s, a_r) = split_raw(
        &raw,
        &AblationFlags {
            no_scale: true,
            ..Default::default()
        },
    );
    assert_eq!(a_s, [1.0; NUM_JOINTS]);
    assert_eq!(&a_r[..], &raw[NUM_JOINTS..]);
    let (a_s, a_r) = split_raw(
        &raw,
        &AblationFlags {
            no_residual: true,
            ..Default::default()
        },
    );
    assert_eq!(a_r, [0.0; NUM_JOINTS]);
    for k in 0..NUM_JOINTS {
        assert_eq!(a_s[k], 1.0 + raw[k].tanh());
    }
}

fn outcome(success: bool, delta_h: f64) -> LiftOutcome {
    LiftOutcome {
        success,
        height_gain: if success { 0.5 } else { 0.0 },
        rel_displacement: 0.0,
        delta_h,
        closure: success,
    }
}

#[test]
fn terminal_success_reward_is_exactly_lambda_s() {
    let cfg = RewardConfig::default();
    let a_p = [0.3, -0.2, 0.1, 0.0, 0.5, -0.4];
    let dj = [0.01; NUM_JOINTS];
    // Off the alignment grid only the terminal term remains.
    let r = compute_reward(49, &a_p, &dj, Some(&outcome(true, 0.7)), &cfg);
    assert_eq!(r.to_bits(), 1.0f64.to_bits());
    let on_grid = compute_reward(50, &a_p, &dj, Some(&outcome(true, 0.7)), &cfg);
    let sim = compute_reward(50, &a_p, &dj, None, &cfg);
    assert_eq!(on_grid - sim, cfg.lambda_s);
    let fail = compute_reward(49, &a_p, &dj, Some(&outcome(false, 0.2)), &cfg);
    assert!((fail - cfg.lambda_h * 0.2).abs() < 1e-15);
}

#[test]
fn alignment_reward_only_on_grid() {
    let cfg = RewardConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for t in 1..=50 {
        let a_p: [f64; NUM_JOINTS] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let dj: [f64; NUM_JOINTS] = std::array::from_fn(|_| rng.gen_range(-0.05..0.05));
        let r = compute_reward(t, &a_p, &dj, None, &cfg);
        if t % 5 != 0 {
            assert_eq!(r, 0.0, "t={t}");
        } else {
            let n = a_p.iter().map(|v| v * v).sum::<f64>().sqrt();
            let want = 0.09 * a_p.iter().zip(&dj).map(|(a, d)| a * d).sum::<f64>() / n;
            assert!((r - want).abs() < 1e-15, "t={t}");
        }
    }
}

#[test]
fn alignment_reward_example() {
    let cfg = RewardConfig::default();
    let mut a_p = [0.0; NUM_JOINTS];
    a_p[0] = 2.0;
    let mut dj = [0.0; NUM_JOINTS];
    dj[0] = 0.05;
    let r = compute_reward(10, &a_p, &dj, None, &cfg);
    assert!((r - 0.0045).abs() < 1e-12, "{r}");
    assert_eq!(alignment(&[0.0; NUM_JOINTS], &dj), 0.0);
}

#[test]
fn gae_matches_discounted_returns_without_decay_cutoff() {
    let rewards = [0.0, 0.1, 0.0, 1.0];
    let values = [0.2, 0.3, 0.1, 0.5];
    let (adv, ret) = gae_advantages(&rewards, &values, 0.9, 1.0);
    // With decay 1 the returns are plain discounted sums.
    let mut g = 0.0;
    let mut want = [0.0; 4];
    for t in (0..4).rev() {
        g = rewards[t] + 0.9 * g;
        want[t] = g;
    }
    for t in 0..4 {
        assert!((ret[t] - want[t]).abs() < 1e-12);
        assert!((adv[t] - (want[t] - values[t])).abs() < 1e-12);
    }
}

fn target(q: [f64; NUM_JOINTS]) -> GraspExample {
    GraspExample {
        object_id: "box".into(),
        wrist: Pose2::new(0.0, 0.3, 0.0),
        joints: JointVector::new(q),
        fingertip_centroid: Vec2::zero(),
        quality: 0.1,
    }
}

#[test]
fn stability_example() {
    let (trans, rot) = stability_metric(&Pose2::new(0.0, 0.1, 0.0), &Pose2::new(0.03, 0.1, 0.1));
    assert!((trans - 0.03).abs() < 1e-12);
    assert!((rot - 0.004996).abs() < 1e-6, "{rot}");
    let (trans, rot) = stability_metric(&Pose2::new(0.2, 0.1, 0.4), &Pose2::new(0.2, 0.1, 0.4));
    assert_eq!((trans, rot), (0.0, 0.0));
}

#[test]
fn posture_examples() {
    let t = target([0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
    assert_eq!(posture_metric(&t.joints, &t), 0.0);
    let off = JointVector::new([0.4, 0.6, 0.3, 0.4, 0.5, 0.6]);
    assert!((posture_metric(&off, &t) - 0.5).abs() < 1e-12);
}

proptest! {
    #[test]
    fn combined_action_is_clipped(
        a_p in prop::array::uniform6(-1.0f64..1.0),
        raw in prop::array::uniform6(-10.0f64..10.0),
        a_r in prop::array::uniform6(-3.0f64..3.0),
    ) {
        let a_s = raw.map(|r| 1.0 + r.tanh());
        let a = combine_action(&a_p, &a_s, &a_r);
        for k in 0..NUM_JOINTS {
            prop_assert!((-1.0..=1.0).contains(&a[k]));
            prop_assert_eq!(a[k], (a_p[k] * a_s[k] + a_r[k]).clamp(-1.0, 1.0));
        }
    }

    #[test]
    fn unit_max_bounds_and_preserves_direction(s in prop::array::uniform6(-100.0f64..100.0)) {
        let u = unit_max(s);
        let m = u.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        prop_assert!(m <= 1.0 + 1e-15);
        let dot: f64 = u.iter().zip(&s).map(|(a, b)| a * b).sum();
        prop_assert!(dot >= 0.0);
    }

    #[test]
    fn stability_is_translation_invariant(
        x in -1.0f64..1.0, y in 0.0f64..1.0, th in -3.0f64..3.0,
        dx in -0.1f64..0.1, dy in -0.1f64..0.1, dth in -1.0f64..1.0,
    ) {
        let (a, ra) = stability_metric(&Pose2::new(x, y, th), &Pose2::new(x + dx, y + dy, th + dth));
        let (b, rb) = stability_metric(&Pose2::new(0.0, 0.0, 0.0), &Pose2::new(dx, dy, dth));
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((ra - rb).abs() < 1e-12);
    }
}
