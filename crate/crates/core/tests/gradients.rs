use grfp::backbone::{unary_belief_on, BackboneArch, BackboneParams};
use grfp::gradcheck::{grad_check, grad_check_with, off_grid_flow, standard_suite, Coverage};
use grfp::labels::LabelMap;
use grfp::optim::ParamSet;
use grfp::stgru::{stgru_step_on, StgruParams, StgruVars, LOG_FLOOR};
use grfp::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn standard_suite_is_within_tolerance() {
    let results = standard_suite(1).unwrap();
    let names: Vec<_> = results.iter().map(|r| r.name).collect();
    assert_eq!(
        names,
        ["warp_bilinear", "stgru_step", "unroll_3_frames", "backbone", "segmentation_loss"]
    );
    for r in results {
        assert!(r.max_rel_error <= 1e-4, "{}: {:e}", r.name, r.max_rel_error);
    }
}

#[test]
fn per_class_reset_gate_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (h, w, c) = (5, 5, 3);
    let mut p = StgruParams::<f64>::init(c, c, 3, 2.0, &mut rng).unwrap();
    for t in p.params_mut() {
        let s = t.shape().to_vec();
        *t = Tensor::from_fn(&s, |_| rng.random_range(-0.3..0.3));
    }
    let mut inputs: Vec<Tensor<f64>> = p.params().into_iter().cloned().collect();
    let probs = |rng: &mut ChaCha8Rng| {
        let raw = Tensor::from_fn(&[h, w, c], |_| rng.random_range(-1.0..1.0));
        grfp::tape::softmax_channels(&raw).unwrap()
    };
    inputs.push(probs(&mut rng));
    inputs.push(probs(&mut rng));
    inputs.push(Tensor::from_fn(&[h, w, 3], |_| rng.random_range(0.0..1.0)));
    inputs.push(Tensor::from_fn(&[h, w, 3], |_| rng.random_range(0.0..1.0)));
    inputs.push(off_grid_flow(h, w, 1.5, &mut rng));
    let labels = LabelMap::new(h, w, (0..h * w).map(|k| (k % c) as u8).collect()).unwrap();
    let err = grad_check(
        |t, v| {
            let p = StgruVars {
                w_ir: v[0],
                b_r: v[1],
                w_xh: v[2],
                w_hh: v[3],
                w_xz: v[4],
                w_hz: v[5],
                b_z: v[6],
                log_lambda: v[7],
            };
            let out = stgru_step_on(t, v[8], v[9], v[10], v[11], v[12], &p)?;
            t.nll(out, &labels, LOG_FLOOR)
        },
        &inputs,
        1e-6,
    )
    .unwrap();
    assert!(err <= 1e-4, "{err:e}");
}

#[test]
fn full_width_backbone_sampled_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let arch = BackboneArch::standard(4);
    let bp = BackboneParams::<f64>::init(arch.clone(), &mut rng).unwrap();
    let mut inputs: Vec<Tensor<f64>> = bp.params().into_iter().cloned().collect();
    for t in inputs.iter_mut().skip(1).step_by(2) {
        let s = t.shape().to_vec();
        *t = Tensor::from_fn(&s, |_| rng.random_range(-0.1..0.1));
    }
    let n = inputs.len();
    inputs.push(Tensor::from_fn(&[8, 8, 3], |_| rng.random_range(0.0..1.0)));
    let labels = LabelMap::new(8, 8, (0..64).map(|k| (k * 7 % 4) as u8).collect()).unwrap();
    let err = grad_check_with(
        |t, v| {
            let vars = grfp::backbone::BackboneVars {
                layers: arch.dilations.iter().enumerate().map(|(l, &d)| (v[2 * l], v[2 * l + 1], d)).collect(),
            };
            let u = unary_belief_on(t, v[n], &vars)?;
            t.nll(u, &labels, LOG_FLOOR)
        },
        &inputs,
        1e-6,
        Coverage::Sampled { per_input: 12, seed: 3 },
    )
    .unwrap();
    assert!(err <= 1e-4, "{err:e}");
}

#[test]
fn uniform_belief_loss_is_log_c_per_pixel() {
    for c in [2usize, 5, 19] {
        let u = grfp::SegBelief::<f64>::uniform(4, 3, c);
        let labels = LabelMap::filled(4, 3, (c - 1) as u8);
        let l = grfp::stgru::segmentation_loss(&u, &labels).unwrap();
        assert!((l / 12.0 - (c as f64).ln()).abs() < 1e-6);
    }
}
