//! Analytic gradients against central finite differences.

use std::time::Instant;

use handgf_core::graspgf::{ConditionBatch, ConditionSpec, NoiseSchedule, ScoreModel, ScoreSpec};
use handgf_core::nn::{Activation, Mlp, MlpSpec, ParamSet, SetEncoder, SetEncoderSpec, TensorBuf};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CASES: usize = 50;
const TOL: f64 = 1e-4;
const H: f64 = 1e-6;

fn random_buf(rows: usize, cols: usize, rng: &mut impl Rng) -> TensorBuf<f64> {
    TensorBuf::from_vec(
        &[rows, cols],
        (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `|a - n| / (|a| + |n|)` over the whole vector.
fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / (na + nn).max(1e-12)
}

/// Central differences of `f` at `x`.
fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let v = x[i];
            x[i] = v + H;
            let up = f(&x);
            x[i] = v - H;
            let down = f(&x);
            x[i] = v;
            (up - down) / (2.0 * H)
        })
        .collect()
}

#[test]
fn mlp_parameter_and_input_gradients() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for case in 0..CASES {
        let act = [Activation::Silu, Activation::Tanh, Activation::Linear][case % 3];
        let widths = [
            rng.gen_range(1..5),
            rng.gen_range(2..8),
            rng.gen_range(2..8),
            rng.gen_range(1..4),
        ];
        let mlp = Mlp::<f64>::init(&MlpSpec::new(&widths, act), &mut rng).unwrap();
        let rows = rng.gen_range(1..4);
        let x = random_buf(rows, widths[0], &mut rng);
        let w = random_buf(rows, widths[3], &mut rng);
        let (_, cache) = mlp.forward(&x).unwrap();
        let (grads, dx) = mlp.backward(&cache, &w).unwrap();

        let p0 = mlp.flat();
        let mut probe = mlp.clone();
        let num_p = numeric_grad(&p0, |p| {
            probe.set_flat(p).unwrap();
            dot(&probe.predict(&x).unwrap().data, &w.data)
        });
        let num_x = numeric_grad(&x.data, |xi| {
            let xb = TensorBuf::from_vec(&x.shape, xi.to_vec()).unwrap();
            dot(&mlp.predict(&xb).unwrap().data, &w.data)
        });
        let e = rel_err(&grads.flat(), &num_p).max(rel_err(&dx.data, &num_x));
        assert!(e < TOL, "case {case}: relative error {e:.3e}");
        worst = worst.max(e);
    }
    println!("mlp worst relative error {worst:.3e}");
    assert!(start.elapsed().as_secs() < 60);
}

#[test]
fn set_encoder_parameter_gradients() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0.0f64;
    for case in 0..CASES {
        let act = [Activation::Silu, Activation::Tanh][case % 2];
        let spec = SetEncoderSpec::new(&[2, rng.gen_range(3..8), rng.gen_range(2..6)], act);
        let enc = SetEncoder::<f64>::init(&spec, &mut rng).unwrap();
        let (batch, set_len) = (rng.gen_range(1..4), rng.gen_range(2..9));
        let pts = random_buf(batch * set_len, 2, &mut rng);
        let w = random_buf(batch, spec.feature_width(), &mut rng);
        let (_, cache) = enc.forward(&pts, set_len).unwrap();
        let mut grads = SetEncoder::zeros(&spec).unwrap();
        enc.backward_into(&cache, &w, &mut grads).unwrap();

        let mut probe = enc.clone();
        let num = numeric_grad(&enc.flat(), |p| {
            probe.set_flat(p).unwrap();
            dot(&probe.forward(&pts, set_len).unwrap().0.data, &w.data)
        });
        let e = rel_err(&grads.flat(), &num);
        assert!(e < TOL, "case {case}: relative error {e:.3e}");
        worst = worst.max(e);
    }
    println!("set encoder worst relative error {worst:.3e}");
    assert!(start.elapsed().as_secs() < 60);
}

#[test]
fn score_model_parameter_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for case in 0..10 {
        let spec = ScoreSpec {
            data_dim: 3,
            condition: ConditionSpec::PointSet(SetEncoderSpec::new(&[2, 6, 4], Activation::Silu)),
            joint_widths: vec![5],
            time_freqs: 2,
            time_widths: vec![4],
            trunk_hidden: vec![6],
            sigma_ref: 0.07,
        };
        let model = ScoreModel::<f64>::init(&spec, NoiseSchedule::default(), &mut rng).unwrap();
        let (b, repeat, set_len) = (2, 2, 5);
        let cond = ConditionBatch::Points {
            points: random_buf(b * set_len, 2, &mut rng),
            set_len,
        };
        let x = random_buf(b * repeat, 3, &mut rng);
        let t: Vec<f64> = (0..b * repeat).map(|_| rng.gen_range(0.01..1.0)).collect();
        let w = random_buf(b * repeat, 3, &mut rng);
        let (_, cache) = model.forward(&cond, repeat, &x, &t).unwrap();
        let mut grads = model.zeros_like();
        model.backward_into(&cache, &w, &mut grads).unwrap();

        let mut probe = model.clone();
        let num = numeric_grad(&model.flat(), |p| {
            probe.set_flat(p).unwrap();
            dot(
                &probe.forward(&cond, repeat, &x, &t).unwrap().0.data,
                &w.data,
            )
        });
        let e = rel_err(&grads.flat(), &num);
        assert!(e < TOL, "case {case}: relative error {e:.3e}");
    }
}
