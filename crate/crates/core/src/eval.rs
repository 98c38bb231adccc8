//! Evaluation: confusion-matrix mIoU at the labelled frame, trajectory-based
//! temporal consistency, the frames ablation and their text reports.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{GrfpError, Result};
use crate::io::write_ppm;
use crate::labels::{LabelMap, IGNORE};
use crate::pipeline::{predict_frame, Predictor, PreparedClip};
use crate::stgru::StgruParams;
use crate::tensor::Tensor;
use crate::warp::FlowField;

/// `counts[a * C + b]`: pixels of true class `a` predicted as `b`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        ConfusionMatrix {
            n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Adds every non-ignore pixel of `truth`.
    pub fn accumulate(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if (pred.height(), pred.width()) != (truth.height(), truth.width()) {
            return Err(GrfpError::shape(
                "confusion matrix",
                &[pred.height(), pred.width()],
                &[truth.height(), truth.width()],
            ));
        }
        truth.validate(self.n_classes)?;
        let c = self.n_classes;
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            if t == IGNORE {
                continue;
            }
            if p as usize >= c {
                return Err(GrfpError::contract(format!("predicted class {p} outside 0..{c}")));
            }
            self.counts[t as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n_classes != self.n_classes {
            return Err(GrfpError::contract("merging confusion matrices of different class counts"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `TP / (TP + FP + FN)`, or `None` if the class appears in neither
    /// prediction nor truth.
    pub fn iou(&self, class: usize) -> Option<f64> {
        let c = self.n_classes;
        let tp = self.count(class, class);
        let row: u64 = (0..c).map(|b| self.count(class, b)).sum();
        let col: u64 = (0..c).map(|a| self.count(a, class)).sum();
        let union = row + col - tp;
        (union > 0).then(|| tp as f64 / union as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiouReport {
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes with a defined IoU.
    pub mean: f64,
    pub confusion: ConfusionMatrix,
}

impl MiouReport {
    pub fn from_confusion(confusion: ConfusionMatrix) -> Result<Self> {
        let per_class: Vec<Option<f64>> = (0..confusion.n_classes()).map(|c| confusion.iou(c)).collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        if present.is_empty() {
            return Err(GrfpError::contract("mIoU over zero evaluated pixels"));
        }
        Ok(MiouReport {
            mean: present.iter().sum::<f64>() / present.len() as f64,
            per_class,
            confusion,
        })
    }
}

pub fn miou(preds: &[LabelMap], labels: &[LabelMap], n_classes: usize) -> Result<MiouReport> {
    if preds.len() != labels.len() {
        return Err(GrfpError::contract(format!(
            "{} predictions for {} label maps",
            preds.len(),
            labels.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(n_classes);
    for (p, t) in preds.iter().zip(labels) {
        cm.accumulate(p, t)?;
    }
    MiouReport::from_confusion(cm)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    /// Survived to the last frame.
    End,
    Occluded,
    OutOfImage,
}

/// A tracked point. `positions[t]` is `(row, col)` in frame `t` of the
/// sequence the trajectory was built from.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub start: (usize, usize),
    pub positions: Vec<(f64, f64)>,
    pub termination: Termination,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

fn nearest(p: (f64, f64), h: usize, w: usize) -> Option<(usize, usize)> {
    let (i, j) = (p.0.round(), p.1.round());
    (i >= 0.0 && j >= 0.0 && (i as usize) < h && (j as usize) < w).then_some((i as usize, j as usize))
}

/// Bilinear flow sample at a sub-pixel location, clamped to the grid.
fn sample_flow(f: &FlowField<f32>, p: (f64, f64)) -> (f64, f64) {
    let (h, w) = (f.height(), f.width());
    let y = p.0.clamp(0.0, (h - 1) as f64);
    let x = p.1.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (ty, tx) = (y - y0 as f64, x - x0 as f64);
    let lerp = |get: &dyn Fn(usize, usize) -> f32| {
        let top = get(y0, x0) as f64 * (1.0 - tx) + get(y0, x1) as f64 * tx;
        let bot = get(y1, x0) as f64 * (1.0 - tx) + get(y1, x1) as f64 * tx;
        top * (1.0 - ty) + bot * ty
    };
    (lerp(&|i, j| f.fy(i, j)), lerp(&|i, j| f.fx(i, j)))
}

/// Where `p` of the earlier frame lands in the later one, found by looking up
/// later-frame pixels whose backward flow points at `p`.
fn invert_flow(f: &FlowField<f32>, disoccluded: Option<&Tensor<f32>>, p: (f64, f64), radius: usize) -> Option<(f64, f64)> {
    let (h, w) = (f.height(), f.width());
    let (ci, cj) = (p.0.round() as i64, p.1.round() as i64);
    let r = radius as i64;
    let mut best: Option<((usize, usize), f64)> = None;
    for i in (ci - r).max(0)..=(ci + r).min(h as i64 - 1) {
        for j in (cj - r).max(0)..=(cj + r).min(w as i64 - 1) {
            let (i, j) = (i as usize, j as usize);
            if disoccluded.is_some_and(|m| m.at(i, j, 0) != 0.0) {
                continue;
            }
            let ey = i as f64 + f.fy(i, j) as f64 - p.0;
            let ex = j as f64 + f.fx(i, j) as f64 - p.1;
            let err = ey.abs().max(ex.abs());
            if err <= 0.5 && best.is_none_or(|(_, e)| err < e) {
                best = Some(((i, j), err));
            }
        }
    }
    let ((i, j), _) = best?;
    let q0 = (p.0 - f.fy(i, j) as f64, p.1 - f.fx(i, j) as f64);
    // one bilinear refinement, kept only if it stays next to the lookup
    let d = sample_flow(f, q0);
    let q1 = (p.0 - d.0, p.1 - d.1);
    if (q1.0 - q0.0).abs() <= 0.5 && (q1.1 - q0.1).abs() <= 0.5 {
        Some(q1)
    } else {
        Some(q0)
    }
}

/// Seeds a grid with spacing `stride` at frame 0 and tracks it forward.
///
/// `flows[k]` maps frame `k + 1` back into frame `k`. `occlusions`, if not
/// empty, holds one `H × W × 2` mask per pair as produced by the synthetic
/// generator: channel 1 flags points of frame `k` that get covered in frame
/// `k + 1`, channel 0 flags pixels of frame `k + 1` that have no source.
pub fn build_trajectories(flows: &[FlowField<f32>], occlusions: &[Tensor<f32>], stride: usize) -> Result<Vec<Trajectory>> {
    let Some(first) = flows.first() else {
        return Err(GrfpError::contract("trajectories need at least one flow field"));
    };
    if stride == 0 {
        return Err(GrfpError::contract("trajectory grid stride must be positive"));
    }
    let (h, w) = (first.height(), first.width());
    if flows.iter().any(|f| (f.height(), f.width()) != (h, w)) {
        return Err(GrfpError::contract("flow fields of differing extents"));
    }
    if !occlusions.is_empty() {
        if occlusions.len() != flows.len() {
            return Err(GrfpError::contract(format!(
                "{} occlusion masks for {} flows",
                occlusions.len(),
                flows.len()
            )));
        }
        for m in occlusions {
            if m.shape() != [h, w, 2] {
                return Err(GrfpError::shape("occlusion mask", m.shape(), &[h, w, 2]));
            }
        }
    }
    let radius: Vec<usize> = flows
        .iter()
        .map(|f| f.tensor().data().iter().fold(0.0f32, |m, v| m.max(v.abs())).ceil() as usize + 1)
        .collect();

    let mut out = Vec::new();
    for si in (0..h).step_by(stride) {
        for sj in (0..w).step_by(stride) {
            let mut pos = (si as f64, sj as f64);
            let mut positions = vec![pos];
            let mut termination = Termination::End;
            for (k, f) in flows.iter().enumerate() {
                let mask = occlusions.get(k);
                let (pi, pj) = nearest(pos, h, w).expect("tracked points stay on the grid");
                if mask.is_some_and(|m| m.at(pi, pj, 1) != 0.0) {
                    termination = Termination::Occluded;
                    break;
                }
                match invert_flow(f, mask, pos, radius[k]) {
                    Some(q) if nearest(q, h, w).is_some() => {
                        pos = q;
                        positions.push(q);
                    }
                    Some(_) => {
                        termination = Termination::OutOfImage;
                        break;
                    }
                    None => {
                        // no pixel claims this point: it either left the frame
                        // or vanished behind something
                        let (dy, dx) = (f.fy(pi, pj) as f64, f.fx(pi, pj) as f64);
                        termination = if nearest((pos.0 - dy, pos.1 - dx), h, w).is_none() {
                            Termination::OutOfImage
                        } else {
                            Termination::Occluded
                        };
                        break;
                    }
                }
            }
            out.push(Trajectory {
                start: (si, sj),
                positions,
                termination,
            });
        }
    }
    Ok(out)
}

/// Fraction of trajectories (of length ≥ 2) whose nearest-pixel predicted
/// label never changes.
pub fn temporal_consistency(preds: &[LabelMap], trajectories: &[Trajectory]) -> Result<f64> {
    let mut total = 0usize;
    let mut consistent = 0usize;
    for t in trajectories.iter().filter(|t| t.len() >= 2) {
        if t.len() > preds.len() {
            return Err(GrfpError::contract(format!(
                "trajectory of {} frames for a {}-frame prediction sequence",
                t.len(),
                preds.len()
            )));
        }
        let mut labels = t.positions.iter().zip(preds).map(|(&p, m)| {
            nearest(p, m.height(), m.width())
                .map(|(i, j)| m.get(i, j))
                .ok_or_else(|| GrfpError::contract(format!("trajectory position {p:?} outside the image")))
        });
        let first = labels.next().expect("length ≥ 2")?;
        let mut same = true;
        for l in labels {
            same &= l? == first;
        }
        total += 1;
        consistent += same as usize;
    }
    if total == 0 {
        return Err(GrfpError::contract("no trajectory of length ≥ 2 to score"));
    }
    Ok(consistent as f64 / total as f64)
}

/// mIoU of `predictor` at the labelled frame of every clip.
pub fn label_frame_miou(prepared: &[PreparedClip], predictor: Predictor) -> Result<MiouReport> {
    let c = prepared
        .first()
        .ok_or_else(|| GrfpError::contract("evaluation needs at least one clip"))?
        .clip
        .n_classes;
    let parts: Vec<ConfusionMatrix> = prepared
        .par_iter()
        .map(|pc| {
            let belief = predict_frame(pc, pc.clip.label_index, predictor)?;
            let mut cm = ConfusionMatrix::new(c);
            cm.accumulate(&belief.labels(), &pc.clip.labels)?;
            Ok(cm)
        })
        .collect::<Result<_>>()?;
    let mut cm = ConfusionMatrix::new(c);
    for p in &parts {
        cm.merge(p)?;
    }
    MiouReport::from_confusion(cm)
}

/// mIoU per chain length, all with the same parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<(usize, f64)>,
}

impl AblationTable {
    pub fn miou(&self, n_frames: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.0 == n_frames).map(|r| r.1)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("frames\tmIoU\n");
        for (n, m) in &self.rows {
            let _ = writeln!(s, "{n}\t{m:.4}");
        }
        s
    }
}

pub fn frames_ablation(prepared: &[PreparedClip], params: &StgruParams<f32>, n_frames: &[usize]) -> Result<AblationTable> {
    let rows = n_frames
        .iter()
        .map(|&n| Ok((n, label_frame_miou(prepared, Predictor::Forward { params, n })?.mean)))
        .collect::<Result<_>>()?;
    Ok(AblationTable { rows })
}

/// Per-class IoU of several methods side by side.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassIouTable {
    pub methods: Vec<(String, MiouReport)>,
}

impl ClassIouTable {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("class");
        for (name, _) in &self.methods {
            let _ = write!(s, "\t{name}");
        }
        s.push('\n');
        let c = self.methods.first().map_or(0, |m| m.1.per_class.len());
        for class in 0..c {
            let _ = write!(s, "{class}");
            for (_, r) in &self.methods {
                match r.per_class[class] {
                    Some(v) => {
                        let _ = write!(s, "\t{v:.4}");
                    }
                    None => s.push_str("\t-"),
                }
            }
            s.push('\n');
        }
        s.push_str("mIoU");
        for (_, r) in &self.methods {
            let _ = write!(s, "\t{:.4}", r.mean);
        }
        s.push('\n');
        s
    }
}

/// Consistency per clip and method, plus the per-method average over clips.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyTable {
    pub methods: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
    pub average: Vec<f64>,
}

impl ConsistencyTable {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("clip");
        for m in &self.methods {
            let _ = write!(s, "\t{m}");
        }
        s.push('\n');
        let rows = self.rows.iter().map(|(n, v)| (n.as_str(), v)).chain([("Average", &self.average)]);
        for (name, vals) in rows {
            s.push_str(name);
            for v in vals {
                let _ = write!(s, "\t{:.2}%", 100.0 * v);
            }
            s.push('\n');
        }
        s
    }
}

/// Predicted labels for frames `start..` of a clip.
pub fn predict_sequence(pc: &PreparedClip, start: usize, predictor: Predictor) -> Result<Vec<LabelMap>> {
    (start..pc.clip.n_frames())
        .map(|t| Ok(predict_frame(pc, t, predictor)?.labels()))
        .collect()
}

/// Temporal consistency of each predictor over frames `start..` of every
/// clip, along trajectories chained through the clip's exact flow.
pub fn consistency_table(
    prepared: &[PreparedClip],
    names: &[String],
    predictors: &[Predictor],
    start: usize,
    stride: usize,
) -> Result<ConsistencyTable> {
    if names.len() != prepared.len() {
        return Err(GrfpError::contract("one name per clip required"));
    }
    let rows: Vec<(String, Vec<f64>)> = prepared
        .par_iter()
        .zip(names)
        .map(|(pc, name)| {
            let clip = &pc.clip;
            if start + 1 >= clip.n_frames() {
                return Err(GrfpError::contract(format!(
                    "clip {name} has {} frames; consistency from frame {start} needs at least two",
                    clip.n_frames()
                )));
            }
            let trajs = build_trajectories(&clip.flows[start..], &clip.occlusions[start..], stride)?;
            let vals = predictors
                .iter()
                .map(|&p| temporal_consistency(&predict_sequence(pc, start, p)?, &trajs))
                .collect::<Result<_>>()?;
            Ok((name.clone(), vals))
        })
        .collect::<Result<_>>()?;
    let average = (0..predictors.len())
        .map(|m| rows.iter().map(|r| r.1[m]).sum::<f64>() / rows.len().max(1) as f64)
        .collect();
    Ok(ConsistencyTable {
        methods: predictors.iter().map(|p| p.name()).collect(),
        rows,
        average,
    })
}

/// Fixed colour per class id; ignore renders black.
pub const PALETTE: [[f32; 3]; 8] = [
    [0.35, 0.35, 0.35],
    [0.9, 0.1, 0.1],
    [0.1, 0.8, 0.2],
    [0.15, 0.3, 1.0],
    [1.0, 0.85, 0.1],
    [0.75, 0.2, 0.9],
    [0.1, 0.9, 0.9],
    [1.0, 0.5, 0.0],
];

/// Half-and-half blend of `image` with the palette colour of each label.
pub fn overlay(image: &Tensor<f32>, labels: &LabelMap) -> Result<Tensor<f32>> {
    let (h, w, c) = image.hwc()?;
    if c != 3 || (h, w) != (labels.height(), labels.width()) {
        return Err(GrfpError::shape("overlay", image.shape(), &[labels.height(), labels.width(), 3]));
    }
    let mut out = image.clone();
    for i in 0..h {
        for j in 0..w {
            let l = labels.get(i, j);
            let col = if l == IGNORE { [0.0; 3] } else { PALETTE[l as usize % PALETTE.len()] };
            for ch in 0..3 {
                out.set(i, j, ch, 0.5 * image.at(i, j, ch) + 0.5 * col[ch]);
            }
        }
    }
    Ok(out)
}

pub fn write_overlay(image: &Tensor<f32>, labels: &LabelMap, path: &Path) -> Result<()> {
    write_ppm(&overlay(image, labels)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lm(h: usize, w: usize, d: &[u8]) -> LabelMap {
        LabelMap::new(h, w, d.to_vec()).unwrap()
    }

    #[test]
    fn hand_counted_iou() {
        // class 1 predicted at (0,0),(0,1); true at (0,1),(1,1)
        let r = miou(&[lm(2, 2, &[1, 1, 0, 0])], &[lm(2, 2, &[0, 1, 0, 1])], 2).unwrap();
        assert_eq!(r.per_class[1], Some(1.0 / 3.0));
        assert_eq!(r.per_class[0], Some(1.0 / 3.0));
        assert_eq!(r.confusion.total(), 4);
    }

    #[test]
    fn absent_classes_are_excluded() {
        let r = miou(&[lm(1, 2, &[0, 2])], &[lm(1, 2, &[0, 2])], 4).unwrap();
        assert_eq!(r.per_class, vec![Some(1.0), None, Some(1.0), None]);
        assert_eq!(r.mean, 1.0);
    }

    #[test]
    fn ignore_and_bad_ids() {
        let r = miou(&[lm(1, 3, &[0, 1, 1])], &[lm(1, 3, &[0, IGNORE, 1])], 2).unwrap();
        assert_eq!(r.confusion.total(), 2);
        assert_eq!(r.mean, 1.0);
        assert!(matches!(miou(&[lm(1, 1, &[0])], &[lm(1, 1, &[3])], 2), Err(GrfpError::Contract(_))));
    }

    #[test]
    fn zero_flow_trajectories_are_constant() {
        let flows = vec![FlowField::zeros(6, 5); 3];
        let t = build_trajectories(&flows, &[], 2).unwrap();
        assert_eq!(t.len(), 9);
        for tr in &t {
            assert_eq!(tr.termination, Termination::End);
            assert_eq!(tr.len(), 4);
            let s = (tr.start.0 as f64, tr.start.1 as f64);
            assert!(tr.positions.iter().all(|&p| p == s));
        }
    }

    #[test]
    fn rightward_motion_exits_right_edge() {
        // content moves one column right per frame
        let flows = vec![FlowField::constant(3, 4, -1.0, 0.0); 3];
        let t = build_trajectories(&flows, &[], 1).unwrap();
        let tr = t.iter().find(|t| t.start == (1, 2)).unwrap();
        assert_eq!(tr.positions, vec![(1.0, 2.0), (1.0, 3.0)]);
        assert_eq!(tr.termination, Termination::OutOfImage);
        let tr = t.iter().find(|t| t.start == (0, 0)).unwrap();
        assert_eq!(tr.positions.len(), 4);
        assert_eq!(tr.termination, Termination::End);
    }

    #[test]
    fn consistency_counts() {
        let a = lm(1, 2, &[0, 1]);
        let b = lm(1, 2, &[0, 0]);
        let trajs = build_trajectories(&[FlowField::zeros(1, 2)], &[], 1).unwrap();
        assert_eq!(temporal_consistency(&[a.clone(), b], &trajs).unwrap(), 0.5);
        assert_eq!(temporal_consistency(&[a.clone(), a], &trajs).unwrap(), 1.0);
        assert!(temporal_consistency(&[], &[]).is_err());
    }

    #[test]
    fn tables_render() {
        let t = AblationTable { rows: vec![(1, 0.5), (2, 0.625)] };
        assert_eq!(t.to_tsv(), "frames\tmIoU\n1\t0.5000\n2\t0.6250\n");
        let c = ConsistencyTable {
            methods: vec!["static".into()],
            rows: vec![("a".into(), vec![0.5])],
            average: vec![0.5],
        };
        assert_eq!(c.to_tsv(), "clip\tstatic\na\t50.00%\nAverage\t50.00%\n");
    }
}
