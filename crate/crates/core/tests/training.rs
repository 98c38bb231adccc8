use grfp::backbone::{unary_belief, unary_belief_on, BackboneArch, BackboneParams};
use grfp::flowdata::{generate_clip, SceneTemplate, VideoSample};
use grfp::optim::ParamSet;
use grfp::pipeline::{chain_inputs, clip_unaries, noisy_flows};
use grfp::stgru::{unroll_on, Direction, StgruParams, KERNEL_SIZE, LOG_FLOOR};
use grfp::tape::{Tape, Var};
use grfp::train::{chain_gradients, pretrain_backbone, train_grfp, PretrainConfig, TrainConfig};
use grfp::{SegBelief, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_template() -> SceneTemplate {
    SceneTemplate {
        height: 24,
        width: 24,
        min_size: 5,
        max_size: 9,
        frames_after_label: 2,
        ..SceneTemplate::default()
    }
}

fn clips(n: u64, seed: u64) -> Vec<VideoSample> {
    let t = small_template();
    (0..n).map(|k| generate_clip(&t.sample(seed + k).unwrap(), seed + k).unwrap()).collect()
}

fn backbone(seed: u64) -> BackboneParams<f32> {
    BackboneParams::init(BackboneArch::with_width(5, 8), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn perturbed_cell(seed: u64) -> StgruParams<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = StgruParams::<f32>::init(5, 1, KERNEL_SIZE, 2.0, &mut rng).unwrap();
    for t in p.params_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
    }
    p
}

fn rel_close(a: &Tensor<f32>, b: &Tensor<f32>, tol: f32) -> bool {
    let scale = b.data().iter().fold(0.0f32, |m, v| m.max(v.abs())).max(1e-6);
    a.max_abs_diff(b) <= tol * scale
}

/// Backbone gradient of a chain decomposed frame by frame: the full chain is
/// differentiated with respect to each unary, then every unary's gradient is
/// pulled back through its own backbone pass.
fn per_frame_backbone_grads(
    frames: &[Tensor<f32>],
    flows: &[Tensor<f32>],
    labels: &grfp::LabelMap,
    cell: &StgruParams<f32>,
    b: &BackboneParams<f32>,
) -> Vec<Vec<Tensor<f32>>> {
    let unaries: Vec<SegBelief<f32>> = frames.iter().map(|f| unary_belief(f, b).unwrap()).collect();
    let mut tape = Tape::new();
    let sv = cell.on_tape(&mut tape, false);
    let fr: Vec<Var> = frames.iter().map(|f| tape.constant(f.clone())).collect();
    let fl: Vec<Var> = flows.iter().map(|f| tape.constant(f.clone())).collect();
    let un: Vec<Var> = unaries.iter().map(|u| tape.param(u.tensor().clone())).collect();
    let h = unroll_on(&mut tape, &fr, &fl, &un, &sv).unwrap();
    let loss = tape.nll(h, labels, LOG_FLOOR as f32).unwrap();
    let g = tape.backward(loss).unwrap();
    frames
        .iter()
        .zip(&un)
        .map(|(f, &u)| {
            let upstream = g.get(u);
            let mut t = Tape::new();
            let bv = b.on_tape(&mut t, true);
            let x = t.constant(f.clone());
            let belief = unary_belief_on(&mut t, x, &bv).unwrap();
            let w = t.constant(upstream);
            let prod = t.mul(belief, w).unwrap();
            let s = t.sum(prod);
            let gb = t.backward(s).unwrap();
            bv.all().iter().map(|&v| gb.get(v)).collect()
        })
        .collect()
}

#[test]
fn backbone_gradient_flows_only_through_the_last_d_unaries() {
    let clip = &clips(1, 40)[0];
    let b = backbone(1);
    let cell = perturbed_cell(2);
    let unaries = clip_unaries(clip, &b).unwrap();
    let flows = noisy_flows(clip, 0.3, 5);
    let n = 4;
    let inputs = chain_inputs(clip, &flows, &unaries, clip.label_index, n, Direction::Forward).unwrap();
    let flow_t: Vec<Tensor<f32>> = inputs.flows.iter().map(|f| f.tensor().clone()).collect();
    let per_frame = per_frame_backbone_grads(&inputs.frames, &flow_t, &clip.labels, &cell, &b);

    for d in 1..=n {
        let got = chain_gradients(&inputs, &clip.labels, &cell, Some((&b, d))).unwrap();
        let got = got.backbone.unwrap();
        for (p, g) in got.iter().enumerate() {
            let mut expect = Tensor::zeros(g.shape());
            for frame in &per_frame[n - d..] {
                expect = expect.zip_map(&frame[p], |a, b| a + b).unwrap();
            }
            assert!(rel_close(g, &expect, 2e-4), "d={d} param {p}: {}", g.max_abs_diff(&expect));
        }
    }
    // earlier frames would have contributed
    assert!(per_frame[0].iter().any(|t| t.data().iter().any(|v| v.abs() > 1e-6)));
}

#[test]
fn recomputed_positions_ignore_supplied_unaries() {
    let clip = &clips(1, 41)[0];
    let b = backbone(3);
    let cell = perturbed_cell(4);
    let unaries = clip_unaries(clip, &b).unwrap();
    let flows = noisy_flows(clip, 0.3, 6);
    let inputs = chain_inputs(clip, &flows, &unaries, clip.label_index, 5, Direction::Forward).unwrap();
    let base = chain_gradients(&inputs, &clip.labels, &cell, Some((&b, 2))).unwrap();
    let mut altered = inputs.clone();
    for u in &mut altered.unaries[3..] {
        *u = SegBelief::uniform(clip.height(), clip.width(), 5);
    }
    let same = chain_gradients(&altered, &clip.labels, &cell, Some((&b, 2))).unwrap();
    assert_eq!(base.loss, same.loss);
    assert_eq!(base.stgru, same.stgru);
    assert_eq!(base.backbone, same.backbone);
    // a constant (earlier) position does matter
    altered.unaries[1] = SegBelief::uniform(clip.height(), clip.width(), 5);
    let moved = chain_gradients(&altered, &clip.labels, &cell, Some((&b, 2))).unwrap();
    assert_ne!(base.stgru, moved.stgru);
}

#[test]
fn pretraining_overfits_one_clip() {
    let data = clips(1, 50);
    let cfg = PretrainConfig {
        epochs: 10,
        augment: false,
        ..PretrainConfig::default()
    };
    let out = pretrain_backbone(&data, backbone(7), &cfg).unwrap();
    assert_eq!(out.losses.len(), 10);
    for w in out.losses.windows(2) {
        assert!(w[1] < w[0], "{:?}", out.losses);
    }
}

#[test]
fn zero_epochs_return_the_initialisation() {
    let init = backbone(8);
    let out = pretrain_backbone(&clips(2, 60), init.clone(), &PretrainConfig { epochs: 0, ..Default::default() }).unwrap();
    assert_eq!(out.backbone, init);
    assert!(out.losses.is_empty());
}

#[test]
fn pretraining_is_deterministic() {
    let data = clips(3, 70);
    let cfg = PretrainConfig { epochs: 2, ..Default::default() };
    let a = pretrain_backbone(&data, backbone(9), &cfg).unwrap();
    let b = pretrain_backbone(&data, backbone(9), &cfg).unwrap();
    assert_eq!(a.backbone, b.backbone);
    assert_eq!(a.losses, b.losses);
}

fn quick_config() -> TrainConfig {
    TrainConfig {
        steps: 6,
        backward_steps: 3,
        eval_every: 3,
        n_frames: 3,
        backbone_truncation_depth: 2,
        backbone_lr: 1e-6,
        ..TrainConfig::default()
    }
}

#[test]
fn training_is_deterministic() {
    let (train, val) = (clips(3, 80), clips(1, 90));
    let cfg = TrainConfig {
        train_backward_chain: true,
        ..quick_config()
    };
    let a = train_grfp(&train, &val, &cfg, backbone(1), perturbed_cell(1)).unwrap();
    let b = train_grfp(&train, &val, &cfg, backbone(1), perturbed_cell(1)).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.forward, b.forward);
    assert_eq!(a.backward, b.backward);
    assert_eq!(a.backbone, b.backbone);
    assert_eq!(a.log.len(), 9);
    assert!(a.log.iter().filter(|e| e.val_miou.is_some()).count() == 3);
    assert_ne!(a.forward, perturbed_cell(1));
    assert_ne!(a.backbone, backbone(1));
}

#[test]
fn one_frame_chains_without_refinement_change_nothing() {
    let (train, val) = (clips(2, 100), clips(1, 110));
    let cfg = TrainConfig {
        n_frames: 1,
        backbone_truncation_depth: 1,
        refine_backbone: false,
        ..quick_config()
    };
    let cell = perturbed_cell(3);
    let out = train_grfp(&train, &val, &cfg, backbone(2), cell.clone()).unwrap();
    assert_eq!(out.forward, cell);
    assert_eq!(out.backbone, backbone(2));
}

#[test]
fn backbone_sees_exactly_its_receptive_field() {
    let b = backbone(12);
    let r = BackboneArch::with_width(5, 8).receptive_radius();
    assert_eq!(r, 17);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let img = Tensor::from_fn(&[48, 48, 3], |_| rng.random_range(0.0f32..1.0));
    let base = unary_belief(&img, &b).unwrap();
    let probe = |di: usize| {
        let mut x = img.clone();
        for c in 0..3 {
            x.set(5 + di, 5, c, x.at(5 + di, 5, c) + 1.0);
        }
        let out = unary_belief(&x, &b).unwrap();
        (0..5).map(|c| (out.tensor().at(5, 5, c) - base.tensor().at(5, 5, c)).abs()).fold(0.0, f32::max)
    };
    assert!(probe(r) > 0.0);
    assert_eq!(probe(r + 1), 0.0);
}
