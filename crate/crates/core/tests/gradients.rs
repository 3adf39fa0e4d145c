mod common;

use scdma::channel::{channel_gain, snr_db_to_linear};
use scdma::detect_pg::{stpg_forward_recorded, DetectorParams};
use scdma::rng::SimRng;
use scdma::train::{backward, batch_gradients, WeightGrad};

fn flatten(g: &scdma::train::Gradients) -> Vec<f64> {
    let mut v = g.d_gamma_raw.clone();
    v.push(g.d_alpha);
    if let Some(w) = &g.d_weights {
        v.extend_from_slice(w);
    }
    v
}

fn check_instance(seed: u64, mode: WeightGrad) {
    let mut rng = SimRng::new(seed);
    let a = common::random_small_signature(&mut rng, 12, 10);
    let depth = 1 + rng.below(4);
    let gamma_raw = (0..depth).map(|_| 0.05 + 0.4 * rng.uniform()).collect();
    let params = DetectorParams::new(gamma_raw, 0.5 + 2.5 * rng.uniform()).unwrap();
    let n0 = snr_db_to_linear(-2.0 + 14.0 * rng.uniform());
    let c = channel_gain(n0, a.k()).unwrap();
    let x: Vec<f64> = (0..a.n()).map(|_| rng.bpsk()).collect();
    let w: Vec<f64> = (0..a.m()).map(|_| rng.normal()).collect();
    let y: Vec<f64> = a.apply(&x).unwrap().iter().zip(&w).map(|(v, w)| c * v + w).collect();

    let tape = stpg_forward_recorded(&a, &y, n0, &params).unwrap();
    let (_, grads) = backward(&tape, &params, &x, mode).unwrap();
    let probe = common::LossProbe {
        a: &a,
        x: &x,
        w: &w,
        y: &y,
        n0,
        through_channel: mode == WeightGrad::EndToEnd,
    };
    let fd = probe.finite_differences(&params, mode != WeightGrad::Off, 1e-5);
    let analytic = flatten(&grads);
    assert_eq!(fd.len(), analytic.len());
    for (i, (g, f)) in analytic.iter().zip(&fd).enumerate() {
        assert!(
            common::close(*g, *f, 1e-4, 1e-7),
            "seed {seed} {mode:?} coordinate {i}: {g} vs {f}"
        );
    }
}

#[test]
fn detector_parameter_gradients() {
    for seed in 0..8 {
        check_instance(seed, WeightGrad::Off);
    }
}

#[test]
fn weight_gradients_with_fixed_observation() {
    for seed in 100..108 {
        check_instance(seed, WeightGrad::DetectorOnly);
    }
}

#[test]
fn weight_gradients_through_the_channel() {
    for seed in 200..208 {
        check_instance(seed, WeightGrad::EndToEnd);
    }
}

#[test]
fn batch_gradient_is_the_sample_mean() {
    let mut rng = SimRng::new(77);
    let a = common::random_small_signature(&mut rng, 10, 8);
    let params = DetectorParams::initial(3).unwrap();
    let batch = scdma::channel::generate_batch(&a, 4.0, 5, 3).unwrap();
    let (loss, g) = batch_gradients(&a, &batch, &params, WeightGrad::EndToEnd).unwrap();
    let mut loss_sum = 0.0;
    let mut sum = vec![0.0; flatten(&g).len()];
    for s in 0..batch.bs {
        let tape = stpg_forward_recorded(&a, batch.y_sample(s), batch.n0, &params).unwrap();
        let (l, gs) = backward(&tape, &params, batch.x_sample(s), WeightGrad::EndToEnd).unwrap();
        loss_sum += l;
        for (acc, v) in sum.iter_mut().zip(flatten(&gs)) {
            *acc += v;
        }
    }
    assert!((loss - loss_sum / 5.0).abs() < 1e-14);
    for (a, b) in flatten(&g).iter().zip(&sum) {
        assert!((a - b / 5.0).abs() < 1e-14);
    }
}
