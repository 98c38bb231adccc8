//! Training: backbone pretraining on labelled frames, then the recurrent
//! cell on chains ending at the labelled frame, with optional truncated
//! refinement of the backbone and an optional backward chain.

use std::fmt;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{unary_belief, unary_belief_on, BackboneParams};
use crate::error::{GrfpError, Result};
use crate::eval::label_frame_miou;
use crate::flowdata::VideoSample;
use crate::labels::LabelMap;
use crate::optim::{AdamConfig, AdamState, MomentumConfig, MomentumState, ParamSet, StepOutcome};
use crate::pipeline::{chain_frames, chain_indices, chain_inputs, clip_unaries, noisy_flows, prepare_clips, ChainInputs, Predictor};
use crate::stgru::{unroll_on, Direction, SegBelief, StgruParams, LOG_FLOOR};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Seed offset of the fixed flow-noise draw used for validation.
const VAL_NOISE_SEED: u64 = 0x7a1_0015e;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Chain length used for training, ending at the labelled frame.
    pub n_frames: usize,
    /// Steps nearest the loss whose unaries pass gradient into the backbone.
    pub backbone_truncation_depth: usize,
    /// After the forward phase, train a backward cell initialised from the
    /// forward one on the fused prediction.
    pub train_backward_chain: bool,
    pub refine_backbone: bool,
    pub seed: u64,
    pub steps: usize,
    pub backward_steps: usize,
    pub stgru_lr: f64,
    pub backbone_lr: f64,
    pub backbone_momentum: f64,
    /// Standard deviation of the Gaussian noise added to every flow vector, pixels.
    pub flow_noise: f64,
    /// Validation interval in steps; 0 disables it.
    pub eval_every: usize,
    pub lambda_init: f64,
    /// Channels of the reset gate: 1 (shared) or the class count.
    pub reset_channels: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_frames: 5,
            backbone_truncation_depth: 2,
            train_backward_chain: false,
            refine_backbone: true,
            seed: 0,
            steps: 600,
            backward_steps: 100,
            stgru_lr: 3e-3,
            backbone_lr: MomentumConfig::default().lr,
            backbone_momentum: MomentumConfig::default().momentum,
            flow_noise: 0.5,
            eval_every: 100,
            lambda_init: 2.0,
            reset_channels: 1,
            pretrain_epochs: 150,
            pretrain_lr: 1e-3,
        }
    }
}

macro_rules! train_fields {
    ($m:ident) => {
        $m!(n_frames, backbone_truncation_depth, train_backward_chain, refine_backbone, seed, steps, backward_steps, stgru_lr, backbone_lr, backbone_momentum, flow_noise, eval_every, lambda_init, reset_channels, pretrain_epochs, pretrain_lr)
    };
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_frames == 0 {
            return Err(GrfpError::contract("n_frames must be at least 1"));
        }
        if self.backbone_truncation_depth == 0 || self.backbone_truncation_depth > self.n_frames {
            return Err(GrfpError::contract(format!(
                "backbone_truncation_depth {} outside 1..={}",
                self.backbone_truncation_depth, self.n_frames
            )));
        }
        if self.lambda_init <= 0.0 {
            return Err(GrfpError::contract("lambda_init must be positive"));
        }
        Ok(())
    }

    /// Flat `key = value` lines, one per field.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        macro_rules! emit {
            ($($f:ident),*) => { $( s.push_str(&format!("{} = {}\n", stringify!($f), self.$f)); )* };
        }
        train_fields!(emit);
        s
    }

    /// Starts from the defaults; unknown keys are rejected.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| GrfpError::contract(format!("config line {line:?} is not key = value")))?;
            let (k, v) = (k.trim(), v.trim());
            let bad = || GrfpError::contract(format!("bad config value {k} = {v}"));
            macro_rules! parse {
                ($($f:ident),*) => {
                    match k {
                        $( stringify!($f) => c.$f = v.parse().map_err(|_| bad())?, )*
                        _ => return Err(GrfpError::contract(format!("unknown config key {k}"))),
                    }
                };
            }
            train_fields!(parse);
        }
        c.validate()?;
        Ok(c)
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogEntry {
    pub step: usize,
    pub loss: f64,
    pub val_miou: Option<f64>,
}

impl fmt::Display for LogEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{:.6}", self.step, self.loss)?;
        if let Some(m) = self.val_miou {
            write!(f, "\t{m:.6}")?;
        }
        Ok(())
    }
}

pub fn format_log(entries: &[LogEntry]) -> String {
    entries.iter().map(|e| format!("{e}\n")).collect()
}

/// Loss and parameter gradients of one training chain.
#[derive(Clone, Debug)]
pub struct ChainGradients {
    pub loss: f64,
    pub stgru: Vec<Tensor<f32>>,
    /// Present when the backbone was refined.
    pub backbone: Option<Vec<Tensor<f32>>>,
}

/// Forward chain loss at the last frame and its gradients.
///
/// With `refine = Some((backbone, d))` the unaries of the last `d` chain
/// positions are recomputed from their frames on the tape, so the backbone
/// receives gradient only through them; `inputs.unaries` at those positions
/// is ignored. Earlier positions use `inputs.unaries` as constants.
pub fn chain_gradients(
    inputs: &ChainInputs,
    labels: &LabelMap,
    stgru: &StgruParams<f32>,
    refine: Option<(&BackboneParams<f32>, usize)>,
) -> Result<ChainGradients> {
    let n = inputs.frames.len();
    let mut tape = Tape::new();
    let sv = stgru.on_tape(&mut tape, true);
    let frames: Vec<Var> = inputs.frames.iter().map(|f| tape.constant(f.clone())).collect();
    let flows: Vec<Var> = inputs.flows.iter().map(|f| tape.constant(f.tensor().clone())).collect();
    let (bv, window) = match refine {
        Some((b, d)) => (Some(b.on_tape(&mut tape, true)), n - d.min(n)),
        None => (None, n),
    };
    let mut unaries = Vec::with_capacity(n);
    for k in 0..n {
        unaries.push(match &bv {
            Some(bv) if k >= window => unary_belief_on(&mut tape, frames[k], bv)?,
            _ => tape.constant(inputs.unaries[k].tensor().clone()),
        });
    }
    let h = unroll_on(&mut tape, &frames, &flows, &unaries, &sv)?;
    let loss = tape.nll(h, labels, LOG_FLOOR as f32)?;
    let g = tape.backward(loss)?;
    Ok(ChainGradients {
        loss: tape.value(loss).item() as f64,
        stgru: sv.all().iter().map(|&v| g.get(v)).collect(),
        backbone: bv.map(|bv| bv.all().iter().map(|&v| g.get(v)).collect()),
    })
}

/// Loss of the averaged forward/backward prediction and its gradient with
/// respect to the backward cell only.
pub fn fused_gradients(
    fwd: &ChainInputs,
    bwd: &ChainInputs,
    labels: &LabelMap,
    forward: &StgruParams<f32>,
    backward: &StgruParams<f32>,
) -> Result<(f64, Vec<Tensor<f32>>)> {
    let mut tape = Tape::new();
    let fv = forward.on_tape(&mut tape, false);
    let bv = backward.on_tape(&mut tape, true);
    let mut chain = |inputs: &ChainInputs, p| -> Result<Var> {
        let fr: Vec<Var> = inputs.frames.iter().map(|f| tape.constant(f.clone())).collect();
        let fl: Vec<Var> = inputs.flows.iter().map(|f| tape.constant(f.tensor().clone())).collect();
        let un: Vec<Var> = inputs.unaries.iter().map(|u| tape.constant(u.tensor().clone())).collect();
        unroll_on(&mut tape, &fr, &fl, &un, p)
    };
    let hf = chain(fwd, &fv)?;
    let hb = chain(bwd, &bv)?;
    let sum = tape.add(hf, hb)?;
    let fused = tape.scale(sum, 0.5);
    let loss = tape.nll(fused, labels, LOG_FLOOR as f32)?;
    let g = tape.backward(loss)?;
    Ok((tape.value(loss).item() as f64, bv.all().iter().map(|&v| g.get(v)).collect()))
}

/// Trained parameters plus the metrics log.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub backbone: BackboneParams<f32>,
    pub forward: StgruParams<f32>,
    pub backward: Option<StgruParams<f32>>,
    pub log: Vec<LogEntry>,
}

fn usable(clips: &[VideoSample], n: usize, direction: Direction) -> Vec<usize> {
    clips
        .iter()
        .enumerate()
        .filter_map(|(k, c)| match chain_indices(c.label_index, n, direction, c.n_frames()) {
            Ok(_) => Some(k),
            Err(_) => {
                warn!("skipping clip {k}: {} frames cannot hold a {direction:?} chain of {n}", c.n_frames());
                None
            }
        })
        .collect()
}

fn report(outcome: StepOutcome, what: &str, step: usize) {
    if outcome == StepOutcome::SkippedNonFinite {
        warn!("step {step}: non-finite {what} gradient, update skipped");
    }
}

/// Trains the forward cell (and optionally refines the backbone), then, if
/// requested, a backward cell on the fused prediction. Deterministic given
/// `cfg.seed`.
pub fn train_grfp(
    train: &[VideoSample],
    val: &[VideoSample],
    cfg: &TrainConfig,
    backbone: BackboneParams<f32>,
    forward: StgruParams<f32>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n = cfg.n_frames;
    let d = cfg.backbone_truncation_depth;
    let fwd_clips = usable(train, n, Direction::Forward);
    if fwd_clips.is_empty() && cfg.steps > 0 {
        return Err(GrfpError::contract(format!("no training clip holds {n} frames up to its label")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut backbone = backbone;
    let mut forward = forward;
    let mut log = Vec::with_capacity(cfg.steps + cfg.backward_steps);

    let mut cache: Vec<Option<Vec<SegBelief<f32>>>> = vec![None; train.len()];
    let mut unaries_for = |backbone: &BackboneParams<f32>, k: usize, indices: &[usize], skip_from: usize| -> Result<Vec<SegBelief<f32>>> {
        if !cfg.refine_backbone {
            if cache[k].is_none() {
                cache[k] = Some(clip_unaries(&train[k], backbone)?);
            }
            let all = cache[k].as_ref().expect("filled");
            return Ok(indices.iter().map(|&i| all[i].clone()).collect());
        }
        // positions recomputed on the tape only need a placeholder
        let clip = &train[k];
        indices
            .iter()
            .enumerate()
            .map(|(pos, &i)| {
                if pos >= skip_from {
                    Ok(SegBelief::uniform(clip.height(), clip.width(), clip.n_classes))
                } else {
                    unary_belief(&clip.frames[i], backbone)
                }
            })
            .collect()
    };

    let validate = |backbone: &BackboneParams<f32>, predictor: Predictor| -> Result<Option<f64>> {
        if val.is_empty() {
            return Ok(None);
        }
        let prepared = prepare_clips(val, backbone, cfg.flow_noise, cfg.seed ^ VAL_NOISE_SEED)?;
        Ok(Some(label_frame_miou(&prepared, predictor)?.mean))
    };
    let due = |step: usize, total: usize| cfg.eval_every > 0 && ((step + 1) % cfg.eval_every == 0 || step + 1 == total);

    let mut adam = AdamState::new(AdamConfig { lr: cfg.stgru_lr, ..AdamConfig::default() }, &forward.params());
    let mut momentum = MomentumState::new(
        MomentumConfig {
            lr: cfg.backbone_lr,
            momentum: cfg.backbone_momentum,
        },
        &backbone.params(),
    );
    for step in 0..cfg.steps {
        let k = fwd_clips[rng.random_range(0..fwd_clips.len())];
        let clip = &train[k];
        let flows = noisy_flows(clip, cfg.flow_noise, rng.random());
        let mut inputs = chain_frames(clip, &flows, clip.label_index, n, Direction::Forward)?;
        inputs.unaries = unaries_for(&backbone, k, &inputs.indices, n - d)?;
        let refine = cfg.refine_backbone.then_some((&backbone, d));
        let g = chain_gradients(&inputs, &clip.labels, &forward, refine)?;
        report(adam.step(&mut forward.params_mut(), &g.stgru)?, "recurrent", step);
        if let Some(bg) = &g.backbone {
            report(momentum.step(&mut backbone.params_mut(), bg)?, "backbone", step);
        }
        let val_miou = if due(step, cfg.steps) {
            let m = validate(&backbone, Predictor::Forward { params: &forward, n })?;
            if let Some(m) = m {
                info!("step {step}: loss {:.3}, val mIoU {m:.4}", g.loss);
            }
            m
        } else {
            None
        };
        log.push(LogEntry {
            step,
            loss: g.loss,
            val_miou,
        });
    }

    let mut backward = None;
    if cfg.train_backward_chain {
        let both: Vec<usize> = usable(train, n, Direction::Backward)
            .into_iter()
            .filter(|k| fwd_clips.contains(k))
            .collect();
        if both.is_empty() && cfg.backward_steps > 0 {
            return Err(GrfpError::contract(format!(
                "no training clip holds {n} frames on both sides of its label"
            )));
        }
        let mut alpha = forward.clone();
        let mut adam = AdamState::new(AdamConfig { lr: cfg.stgru_lr, ..AdamConfig::default() }, &alpha.params());
        let mut cache: Vec<Option<Vec<SegBelief<f32>>>> = vec![None; train.len()];
        for s in 0..cfg.backward_steps {
            let step = cfg.steps + s;
            let k = both[rng.random_range(0..both.len())];
            let clip = &train[k];
            if cache[k].is_none() {
                cache[k] = Some(clip_unaries(clip, &backbone)?);
            }
            let unaries = cache[k].as_ref().expect("filled");
            let flows = noisy_flows(clip, cfg.flow_noise, rng.random());
            let fwd = chain_inputs(clip, &flows, unaries, clip.label_index, n, Direction::Forward)?;
            let bwd = chain_inputs(clip, &flows, unaries, clip.label_index, n, Direction::Backward)?;
            let (loss, g) = fused_gradients(&fwd, &bwd, &clip.labels, &forward, &alpha)?;
            report(adam.step(&mut alpha.params_mut(), &g)?, "backward-chain", step);
            let val_miou = if due(s, cfg.backward_steps) {
                validate(
                    &backbone,
                    Predictor::Fused {
                        forward: &forward,
                        backward: &alpha,
                        n,
                    },
                )?
            } else {
                None
            };
            log.push(LogEntry { step, loss, val_miou });
        }
        backward = Some(alpha);
    }

    Ok(TrainOutcome {
        backbone,
        forward,
        backward,
        log,
    })
}

/// Backbone pretraining settings.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Random flips (and transposes of square frames) of each sample.
    pub augment: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 150,
            lr: 1e-3,
            seed: 0,
            augment: true,
        }
    }
}

/// Applies one of the eight square symmetries (`code` bit 0: flip rows,
/// bit 1: flip columns, bit 2: transpose) to an `H × W × C` tensor.
pub fn dihedral(t: &Tensor<f32>, code: u8) -> Result<Tensor<f32>> {
    let (h, w, c) = t.hwc()?;
    let transpose = code & 4 != 0;
    if transpose && h != w {
        return Err(GrfpError::contract("transpose needs a square frame"));
    }
    let mut out = Tensor::zeros(t.shape());
    for i in 0..h {
        for j in 0..w {
            let si = if code & 1 != 0 { h - 1 - i } else { i };
            let sj = if code & 2 != 0 { w - 1 - j } else { j };
            let (si, sj) = if transpose { (sj, si) } else { (si, sj) };
            for ch in 0..c {
                out.set(i, j, ch, t.at(si, sj, ch));
            }
        }
    }
    Ok(out)
}

fn dihedral_labels(l: &LabelMap, code: u8) -> Result<LabelMap> {
    let t = l.to_tensor().reshape(&[l.height(), l.width(), 1])?;
    let d = dihedral(&t, code)?;
    LabelMap::from_tensor(&d.reshape(&[l.height(), l.width()])?)
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub backbone: BackboneParams<f32>,
    /// Loss of every step before its update.
    pub losses: Vec<f64>,
}

/// Per-frame supervised training of the backbone on each clip's labelled
/// frame with Adam, one clip per step, clips shuffled every epoch.
pub fn pretrain_backbone(train: &[VideoSample], init: BackboneParams<f32>, cfg: &PretrainConfig) -> Result<PretrainOutcome> {
    let mut backbone = init;
    let mut losses = Vec::new();
    if cfg.epochs == 0 {
        return Ok(PretrainOutcome { backbone, losses });
    }
    if train.is_empty() {
        return Err(GrfpError::contract("pretraining needs at least one clip"));
    }
    if let Some(c) = train.iter().find(|c| c.n_classes != backbone.n_classes()) {
        return Err(GrfpError::contract(format!(
            "backbone predicts {} classes, clip has {}",
            backbone.n_classes(),
            c.n_classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, &backbone.params());
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &k in &order {
            let clip = &train[k];
            let square = clip.height() == clip.width();
            let code = if cfg.augment { rng.random_range(0..if square { 8 } else { 4 }) } else { 0 };
            let image = dihedral(&clip.frames[clip.label_index], code)?;
            let labels = dihedral_labels(&clip.labels, code)?;
            let mut tape = Tape::new();
            let bv = backbone.on_tape(&mut tape, true);
            let x = tape.constant(image);
            let u = unary_belief_on(&mut tape, x, &bv)?;
            let loss = tape.nll(u, &labels, LOG_FLOOR as f32)?;
            let g = tape.backward(loss)?;
            let grads: Vec<Tensor<f32>> = bv.all().iter().map(|&v| g.get(v)).collect();
            losses.push(tape.value(loss).item() as f64);
            report(adam.step(&mut backbone.params_mut(), &grads)?, "backbone", losses.len() - 1);
        }
    }
    Ok(PretrainOutcome { backbone, losses })
}
