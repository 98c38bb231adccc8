use grfp::optim::{AdamConfig, AdamState, MomentumConfig, MomentumState, StepOutcome};
use grfp::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

#[test]
fn adam_matches_transcription() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = AdamConfig {
        lr: 0.01,
        ..AdamConfig::default()
    };
    let mut p = Tensor::new(&[7], random(7, &mut rng)).unwrap();
    let mut q = p.data().to_vec();
    let (mut m, mut v) = (vec![0.0; 7], vec![0.0; 7]);
    let mut state = AdamState::new(cfg, &[&p]);
    for t in 1..=25 {
        let g = random(7, &mut rng);
        state.step(&mut [&mut p], &[Tensor::new(&[7], g.clone()).unwrap()]).unwrap();
        for k in 0..7 {
            m[k] = 0.95 * m[k] + 0.05 * g[k];
            v[k] = 0.99 * v[k] + 0.01 * g[k] * g[k];
            let mh = m[k] / (1.0 - 0.95f64.powi(t));
            let vh = v[k] / (1.0 - 0.99f64.powi(t));
            q[k] -= 0.01 * mh / (vh.sqrt() + 1e-8);
        }
        for (a, b) in p.data().iter().zip(&q) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn momentum_matches_transcription() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = MomentumConfig { lr: 0.05, momentum: 0.95 };
    let mut p = Tensor::new(&[2, 3], random(6, &mut rng)).unwrap();
    let mut q = p.data().to_vec();
    let mut vel = vec![0.0; 6];
    let mut state = MomentumState::new(cfg, &[&p]);
    for _ in 0..25 {
        let g = random(6, &mut rng);
        state.step(&mut [&mut p], &[Tensor::new(&[2, 3], g.clone()).unwrap()]).unwrap();
        for k in 0..6 {
            vel[k] = 0.95 * vel[k] - 0.05 * g[k];
            q[k] += vel[k];
        }
        for (a, b) in p.data().iter().zip(&q) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn non_finite_step_leaves_state_untouched() {
    let mut p = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
    let mut adam = AdamState::new(AdamConfig::default(), &[&p]);
    adam.step(&mut [&mut p], &[Tensor::new(&[2], vec![0.5, -0.5]).unwrap()]).unwrap();
    let (before, m, t) = (p.clone(), adam.m.clone(), adam.t);
    let out = adam
        .step(&mut [&mut p], &[Tensor::new(&[2], vec![f64::INFINITY, 0.0]).unwrap()])
        .unwrap();
    assert_eq!(out, StepOutcome::SkippedNonFinite);
    assert_eq!((p, adam.m, adam.t), (before, m, t));
}
