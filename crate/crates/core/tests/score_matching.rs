//! Noise schedule values and denoising score matching on a conditional
//! Gaussian whose perturbed score is known in closed form.

use std::time::Instant;

use handgf_core::graspgf::{
    dsm_loss, ConditionBatch, ConditionSpec, DsmBatch, NoiseSchedule, ScoreModel, ScoreSpec,
};
use handgf_core::nn::{clip_grad_norm, AdamConfig, OptState, TensorBuf};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[test]
fn sigma_endpoints() {
    let s = NoiseSchedule::default();
    assert_eq!(s.sigma(0.0).unwrap(), 0.0);
    let expected = 1.0 - (-5.05f64).exp();
    assert!((s.sigma(1.0).unwrap() - expected).abs() < 1e-9);
    assert!(s.sigma(1.5).is_err());
    assert!(s.sigma(-0.1).is_err());
}

#[test]
fn sigma_matches_closed_form_and_increases() {
    let s = NoiseSchedule::default();
    let mut prev = 0.0;
    for k in 1..=100 {
        let t = k as f64 / 100.0;
        let v = s.sigma(t).unwrap();
        let e = 1.0 - (-(t * t * 9.9 / 2.0 + 0.1 * t)).exp();
        assert!((v - e).abs() < 1e-12, "t={t}");
        assert!(v > prev);
        prev = v;
    }
}

const DATA_SD: f64 = 0.2;

fn mean_of(c: f64) -> f64 {
    0.5 * c
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / (na * nb)
}

#[test]
fn dsm_recovers_conditional_gaussian_score() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
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
    let mut model = ScoreModel::<f64>::init(&spec, schedule, &mut rng).unwrap();
    let mut opt = OptState::new(AdamConfig::with_lr(2e-3), &model);
    let (b, repeat, steps) = (64, 4, 4000);
    for step in 0..steps {
        let c: Vec<f64> = (0..b).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x: Vec<f64> = c
            .iter()
            .map(|&c| mean_of(c) + DATA_SD * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let cond = ConditionBatch::Vectors(TensorBuf::from_vec(&[b, 1], c).unwrap());
        let targets = TensorBuf::from_vec(&[b, 1], x).unwrap();
        let batch = DsmBatch::sample(&schedule, cond, targets, repeat, &mut rng);
        let (_, mut grads) = dsm_loss(&model, &batch).unwrap();
        clip_grad_norm(&mut grads, 10.0);
        opt.set_lr(2e-3 * (1.0 - 0.9 * step as f64 / steps as f64));
        opt.step(&mut model, &grads).unwrap();
    }

    let mut worst = f64::INFINITY;
    for &c in &[-0.8, 0.0, 0.8] {
        for &t in &[schedule.t_inference, 0.1, 0.3, 0.6] {
            let sigma = schedule.sigma(t).unwrap();
            let var = DATA_SD * DATA_SD + sigma * sigma;
            let sd = var.sqrt();
            let cond = ConditionBatch::Vectors(TensorBuf::from_vec(&[1, 1], vec![c]).unwrap());
            let (mut got, mut want) = (Vec::new(), Vec::new());
            for k in 0..=30 {
                let x = mean_of(c) - 3.0 * sd + 6.0 * sd * k as f64 / 30.0;
                got.push(model.score(&cond, &[x], t).unwrap()[0]);
                want.push(-(x - mean_of(c)) / var);
            }
            let cs = cosine(&got, &want);
            println!("c={c} t={t}: cosine {cs:.4}");
            worst = worst.min(cs);
        }
    }
    assert!(worst >= 0.95, "worst cosine {worst:.4}");
    assert!(start.elapsed().as_secs() < 300);
}
