use grfp::eval::{build_trajectories, miou, temporal_consistency, ConfusionMatrix};
use grfp::flowdata::{generate_clip, SceneTemplate};
use grfp::{LabelMap, IGNORE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn map(h: usize, w: usize, d: &[u8]) -> LabelMap {
    LabelMap::new(h, w, d.to_vec()).unwrap()
}

#[test]
fn hand_counted_third() {
    // class 1: predicted {a, b}, true {b, c} → 1 / 3
    let pred = map(1, 4, &[1, 1, 0, 0]);
    let truth = map(1, 4, &[0, 1, 1, 0]);
    let r = miou(&[pred], &[truth], 2).unwrap();
    assert_eq!(r.per_class[1], Some(1.0 / 3.0));
    assert_eq!(r.per_class[0], Some(1.0 / 3.0));
    assert_eq!(r.mean, 1.0 / 3.0);
}

#[test]
fn miou_matches_per_pixel_recount() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let c = 4;
    let preds: Vec<_> = (0..5)
        .map(|_| map(6, 5, &(0..30).map(|_| rng.random_range(0..c as u8)).collect::<Vec<_>>()))
        .collect();
    let truth: Vec<_> = (0..5)
        .map(|_| {
            let d: Vec<u8> = (0..30)
                .map(|_| if rng.random_bool(0.1) { IGNORE } else { rng.random_range(0..c as u8) })
                .collect();
            map(6, 5, &d)
        })
        .collect();
    let r = miou(&preds, &truth, c).unwrap();
    let mut sum = 0.0;
    let mut present = 0;
    for class in 0..c as u8 {
        let (mut i, mut u) = (0, 0);
        for (p, t) in preds.iter().zip(&truth) {
            for (&a, &b) in p.data().iter().zip(t.data()) {
                if b == IGNORE {
                    continue;
                }
                i += (a == class && b == class) as usize;
                u += (a == class || b == class) as usize;
            }
        }
        if u > 0 {
            let iou = i as f64 / u as f64;
            assert_eq!(r.per_class[class as usize], Some(iou));
            sum += iou;
            present += 1;
        }
    }
    assert!((r.mean - sum / present as f64).abs() < 1e-15);
    let mut cm = ConfusionMatrix::new(c);
    for (p, t) in preds.iter().zip(&truth) {
        cm.accumulate(p, t).unwrap();
    }
    assert_eq!(cm, r.confusion);
}

/// Direct recount: a trajectory is consistent if every visited rounded
/// position carries the label of its first one.
fn recount(preds: &[LabelMap], trajs: &[grfp::eval::Trajectory]) -> (usize, usize) {
    let (mut good, mut total) = (0, 0);
    for t in trajs {
        if t.positions.len() < 2 {
            continue;
        }
        total += 1;
        let at = |k: usize| {
            let (y, x) = t.positions[k];
            preds[k].get(y.round() as usize, x.round() as usize)
        };
        let first = at(0);
        good += (1..t.positions.len()).all(|k| at(k) == first) as usize;
    }
    (good, total)
}

#[test]
fn consistency_matches_brute_force_on_20_sequences() {
    let template = SceneTemplate {
        height: 20,
        width: 24,
        min_size: 4,
        max_size: 8,
        frames_after_label: 2,
        ..SceneTemplate::default()
    };
    for seed in 0..20u64 {
        let clip = generate_clip(&template.sample(seed).unwrap(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // truth with random flips so some trajectories break
        let preds: Vec<LabelMap> = (0..clip.n_frames())
            .map(|_| {
                let d: Vec<u8> = (0..20 * 24)
                    .map(|k| if rng.random_bool(0.02) { rng.random_range(0..5) } else { (k / 97 % 5) as u8 })
                    .collect();
                map(20, 24, &d)
            })
            .collect();
        let trajs = build_trajectories(&clip.flows, &clip.occlusions, 1 + (seed as usize % 3)).unwrap();
        let (good, total) = recount(&preds, &trajs);
        let got = temporal_consistency(&preds, &trajs).unwrap();
        assert_eq!(got, good as f64 / total as f64, "seed {seed}");
    }
}
