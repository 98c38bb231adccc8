//! The spatio-temporal transformer GRU cell and its unrolled chains.
//!
//! One step fuses the previous belief, warped into the current frame along
//! optical flow, with the current frame's static prediction:
//!
//! ```text
//! w_t = warp(h_{t-1}, f)
//! r_t = 1 − tanh(|W_ir ∗ (I_t − warp(I_{t-1}, f)) + b_r|)
//! h̃_t = W_xh ∗ x_t + W_hh ∗ (r_t ⊙ w_t)
//! z_t = σ(W_xz ∗ x_t + W_hz ∗ w_t + b_z)
//! h_t = softmax(λ (1 − z_t) ⊙ w_t + z_t ⊙ h̃_t)
//! ```
//!
//! `r_t` measures how well the flow explains the new image, and the previous
//! belief only enters through its warped version `w_t`. λ is stored as its
//! logarithm so it stays positive under gradient updates.

use rand::Rng;

use crate::checkpoint::Checkpoint;
use crate::conv::check_kernel;
use crate::error::{GrfpError, Result};
use crate::labels::LabelMap;
use crate::optim::ParamSet;
use crate::tape::{softmax_channels, Tape, Var};
use crate::tensor::{Real, Tensor};
use crate::warp::FlowField;

/// Floor applied inside the log of the segmentation loss.
pub const LOG_FLOOR: f64 = 1e-12;

/// Largest deviation of a pixel's channel sum from 1 accepted as a belief.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-3;

/// Default spatial extent of every recurrent-cell kernel.
pub const KERNEL_SIZE: usize = 7;

/// Manifest names of the cell parameters, in [`ParamSet`] order.
pub const PARAM_NAMES: [&str; 8] = ["W_ir", "b_r", "W_xh", "W_hh", "W_xz", "W_hz", "b_z", "lambda"];

/// Per-pixel class probabilities `H × W × C`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegBelief<T>(Tensor<T>);

impl<T: Real> SegBelief<T> {
    /// Accepts `probs` if every pixel's channels are non-negative and sum to 1
    /// within [`NORMALIZATION_TOLERANCE`].
    pub fn new(probs: Tensor<T>) -> Result<Self> {
        check_normalized(&probs, "belief")?;
        Ok(SegBelief(probs))
    }

    pub fn uniform(h: usize, w: usize, c: usize) -> Self {
        SegBelief(Tensor::full(&[h, w, c], T::one() / T::lit(c as f64)))
    }

    pub fn from_scores(scores: &Tensor<T>) -> Result<Self> {
        Ok(SegBelief(softmax_channels(scores)?))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    pub fn n_classes(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn labels(&self) -> LabelMap {
        LabelMap::from_scores(&self.0).expect("rank-3 belief")
    }

    /// Largest per-pixel deviation of the channel sum from 1.
    pub fn normalization_error(&self) -> f64 {
        max_sum_error(&self.0)
    }

    pub fn cast<U: Real>(&self) -> SegBelief<U> {
        SegBelief(self.0.cast())
    }
}

fn max_sum_error<T: Real>(t: &Tensor<T>) -> f64 {
    let c = t.shape().last().copied().unwrap_or(1).max(1);
    t.data()
        .chunks(c)
        .map(|px| (px.iter().map(|v| v.as_f64()).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

fn check_normalized<T: Real>(t: &Tensor<T>, what: &str) -> Result<()> {
    t.hwc()?;
    let err = max_sum_error(t);
    if !(err <= NORMALIZATION_TOLERANCE) {
        return Err(GrfpError::contract(format!(
            "{what} is not channel-normalized (max |Σ−1| = {err:.3e})"
        )));
    }
    if t.data().iter().any(|&v| v < T::zero()) {
        return Err(GrfpError::contract(format!("{what} has negative probabilities")));
    }
    Ok(())
}

/// Learnable parameters of one cell.
#[derive(Clone, Debug, PartialEq)]
pub struct StgruParams<T> {
    /// `k × k × 3 × C_r`, image residual to flow confidence.
    pub w_ir: Tensor<T>,
    pub b_r: Tensor<T>,
    pub w_xh: Tensor<T>,
    pub w_hh: Tensor<T>,
    pub w_xz: Tensor<T>,
    pub w_hz: Tensor<T>,
    pub b_z: Tensor<T>,
    /// Rank-0 `ln λ`.
    pub log_lambda: Tensor<T>,
}

impl<T: Real> StgruParams<T> {
    /// `W_xh` starts as 5 × identity on the centre tap so an untrained cell
    /// reproduces its input prediction; the other kernels are uniform in
    /// ±0.01 and the biases zero.
    pub fn init<R: Rng>(
        n_classes: usize,
        reset_channels: usize,
        kernel: usize,
        lambda_init: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(lambda_init > 0.0) {
            return Err(GrfpError::contract(format!("lambda must be positive, got {lambda_init}")));
        }
        let c = n_classes;
        let mut uniform = |shape: &[usize]| Tensor::from_fn(shape, |_| T::lit(rng.random_range(-0.01..=0.01)));
        let w_ir = uniform(&[kernel, kernel, 3, reset_channels]);
        let w_hh = uniform(&[kernel, kernel, c, c]);
        let w_xz = uniform(&[kernel, kernel, c, c]);
        let w_hz = uniform(&[kernel, kernel, c, c]);
        let mut w_xh = Tensor::zeros(&[kernel, kernel, c, c]);
        let centre = kernel / 2;
        for ch in 0..c {
            let idx = ((centre * kernel + centre) * c + ch) * c + ch;
            w_xh.data_mut()[idx] = T::lit(5.0);
        }
        let p = StgruParams {
            w_ir,
            b_r: Tensor::zeros(&[reset_channels]),
            w_xh,
            w_hh,
            w_xz,
            w_hz,
            b_z: Tensor::zeros(&[c]),
            log_lambda: Tensor::scalar(T::lit(lambda_init.ln())),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn n_classes(&self) -> usize {
        self.w_xh.shape()[3]
    }

    pub fn reset_channels(&self) -> usize {
        self.w_ir.shape()[3]
    }

    pub fn lambda(&self) -> T {
        self.log_lambda.item().exp()
    }

    pub fn set_lambda(&mut self, lambda: T) {
        self.log_lambda = Tensor::scalar(lambda.ln());
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.n_classes();
        let cr = self.reset_channels();
        check_kernel(self.w_ir.shape(), Some(self.b_r.shape()), 1)?;
        if self.w_ir.shape()[2] != 3 {
            return Err(GrfpError::shape("W_ir", self.w_ir.shape(), &[0, 0, 3, cr]));
        }
        if cr != 1 && cr != c {
            return Err(GrfpError::contract(format!(
                "reset gate needs 1 or {c} channels, got {cr}"
            )));
        }
        for (name, w) in [("W_xh", &self.w_xh), ("W_hh", &self.w_hh), ("W_xz", &self.w_xz), ("W_hz", &self.w_hz)] {
            check_kernel(w.shape(), None, 1)?;
            if w.shape()[2] != c || w.shape()[3] != c {
                return Err(GrfpError::shape(name, w.shape(), &[w.shape()[0], w.shape()[1], c, c]));
            }
        }
        if self.b_z.shape() != [c] {
            return Err(GrfpError::shape("b_z", self.b_z.shape(), &[c]));
        }
        if self.log_lambda.numel() != 1 || !self.log_lambda.item().is_finite() {
            return Err(GrfpError::contract("lambda must be a finite positive scalar"));
        }
        Ok(())
    }

    pub fn on_tape(&self, tape: &mut Tape<T>, trainable: bool) -> StgruVars {
        let mut leaf = |t: &Tensor<T>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        StgruVars {
            w_ir: leaf(&self.w_ir),
            b_r: leaf(&self.b_r),
            w_xh: leaf(&self.w_xh),
            w_hh: leaf(&self.w_hh),
            w_xz: leaf(&self.w_xz),
            w_hz: leaf(&self.w_hz),
            b_z: leaf(&self.b_z),
            log_lambda: leaf(&self.log_lambda),
        }
    }

    pub fn cast<U: Real>(&self) -> StgruParams<U> {
        StgruParams {
            w_ir: self.w_ir.cast(),
            b_r: self.b_r.cast(),
            w_xh: self.w_xh.cast(),
            w_hh: self.w_hh.cast(),
            w_xz: self.w_xz.cast(),
            w_hz: self.w_hz.cast(),
            b_z: self.b_z.cast(),
            log_lambda: self.log_lambda.cast(),
        }
    }

    /// λ is written as its value (a rank-0 tensor), not its logarithm.
    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let mut ck = Checkpoint::new();
        for (name, t) in PARAM_NAMES.iter().zip(self.params()) {
            if *name == "lambda" {
                ck.insert(name, Tensor::scalar(self.lambda()));
            } else {
                ck.insert(name, t.clone());
            }
        }
        ck.meta.insert("kind".into(), "stgru".into());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<Self> {
        let lambda = ck.tensor("lambda")?;
        if lambda.numel() != 1 || !(lambda.item() > T::zero()) {
            return Err(GrfpError::contract("checkpoint lambda must be a positive scalar"));
        }
        let p = StgruParams {
            w_ir: ck.tensor("W_ir")?.clone(),
            b_r: ck.tensor("b_r")?.clone(),
            w_xh: ck.tensor("W_xh")?.clone(),
            w_hh: ck.tensor("W_hh")?.clone(),
            w_xz: ck.tensor("W_xz")?.clone(),
            w_hz: ck.tensor("W_hz")?.clone(),
            b_z: ck.tensor("b_z")?.clone(),
            log_lambda: Tensor::scalar(lambda.item().ln()),
        };
        p.validate()?;
        Ok(p)
    }
}

impl<T: Real> ParamSet<T> for StgruParams<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        vec![
            &self.w_ir,
            &self.b_r,
            &self.w_xh,
            &self.w_hh,
            &self.w_xz,
            &self.w_hz,
            &self.b_z,
            &self.log_lambda,
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![
            &mut self.w_ir,
            &mut self.b_r,
            &mut self.w_xh,
            &mut self.w_hh,
            &mut self.w_xz,
            &mut self.w_hz,
            &mut self.b_z,
            &mut self.log_lambda,
        ]
    }
}

/// Tape handles of a [`StgruParams`] instance, in [`ParamSet`] order.
#[derive(Clone, Copy, Debug)]
pub struct StgruVars {
    pub w_ir: Var,
    pub b_r: Var,
    pub w_xh: Var,
    pub w_hh: Var,
    pub w_xz: Var,
    pub w_hz: Var,
    pub b_z: Var,
    pub log_lambda: Var,
}

impl StgruVars {
    pub fn all(&self) -> [Var; 8] {
        [
            self.w_ir,
            self.b_r,
            self.w_xh,
            self.w_hh,
            self.w_xz,
            self.w_hz,
            self.b_z,
            self.log_lambda,
        ]
    }
}

/// Which way a chain runs through the clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Past frames toward the prediction frame.
    Forward,
    /// Future frames back toward the prediction frame.
    Backward,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainConfig {
    /// Frames consumed, ending at the prediction frame.
    pub n_frames: usize,
    pub direction: Direction,
    pub fuse_bidirectional: bool,
    pub lambda_init: f64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            n_frames: 5,
            direction: Direction::Forward,
            fuse_bidirectional: false,
            lambda_init: 2.0,
        }
    }
}

/// Reset gate `1 − tanh(|W_ir ∗ (I_t − warp(I_prev, f)) + b_r|)`.
pub fn flow_confidence_on<T: Real>(
    tape: &mut Tape<T>,
    image: Var,
    prev_image: Var,
    flow: Var,
    p: &StgruVars,
) -> Result<Var> {
    if tape.value(image).shape() != tape.value(prev_image).shape() {
        return Err(GrfpError::shape(
            "flow_confidence",
            tape.value(image).shape(),
            tape.value(prev_image).shape(),
        ));
    }
    let warped = tape.warp(prev_image, flow)?;
    let residual = tape.sub(image, warped)?;
    let pre = tape.conv2d(residual, p.w_ir, Some(p.b_r), 1)?;
    let mag = tape.abs(pre);
    let squashed = tape.tanh(mag);
    Ok(tape.affine(squashed, -T::one(), T::one()))
}

/// One recurrent step; returns `h_t`.
pub fn stgru_step_on<T: Real>(
    tape: &mut Tape<T>,
    h_prev: Var,
    unary: Var,
    prev_image: Var,
    image: Var,
    flow: Var,
    p: &StgruVars,
) -> Result<Var> {
    check_normalized(tape.value(unary), "unary x_t")?;
    if tape.value(h_prev).shape() != tape.value(unary).shape() {
        return Err(GrfpError::shape("stgru_step", tape.value(h_prev).shape(), tape.value(unary).shape()));
    }
    let warped = tape.warp(h_prev, flow)?;
    let confidence = flow_confidence_on(tape, image, prev_image, flow, p)?;

    let gated = tape.mul(confidence, warped)?;
    let from_x = tape.conv2d(unary, p.w_xh, None, 1)?;
    let from_h = tape.conv2d(gated, p.w_hh, None, 1)?;
    let candidate = tape.add(from_x, from_h)?;

    let zx = tape.conv2d(unary, p.w_xz, Some(p.b_z), 1)?;
    let zh = tape.conv2d(warped, p.w_hz, None, 1)?;
    let zpre = tape.add(zx, zh)?;
    let update = tape.sigmoid(zpre);

    let lambda = tape.exp(p.log_lambda);
    let keep = tape.affine(update, -T::one(), T::one());
    let propagated = tape.mul(keep, warped)?;
    let propagated = tape.scale_by(propagated, lambda)?;
    let refreshed = tape.mul(update, candidate)?;
    let logits = tape.add(propagated, refreshed)?;
    tape.softmax_channels(logits)
}

/// Runs the cell along a chain with one shared parameter instance.
///
/// `flows[k]` carries frame `k` into frame `k + 1` of the chain (stored at
/// the pixels of frame `k + 1`, pointing back into frame `k`). Returns the
/// belief at the last frame; a one-frame chain returns `unaries[0]`.
pub fn unroll_on<T: Real>(
    tape: &mut Tape<T>,
    frames: &[Var],
    flows: &[Var],
    unaries: &[Var],
    p: &StgruVars,
) -> Result<Var> {
    let n = unaries.len();
    if n == 0 || frames.len() != n || flows.len() + 1 != n {
        return Err(GrfpError::contract(format!(
            "chain needs n frames, n unaries and n−1 flows; got {} frames, {} unaries, {} flows",
            frames.len(),
            unaries.len(),
            flows.len()
        )));
    }
    let mut h = unaries[0];
    for k in 1..n {
        h = stgru_step_on(tape, h, unaries[k], frames[k - 1], frames[k], flows[k - 1], p)?;
    }
    Ok(h)
}

/// Reset gate evaluated outside any training tape.
pub fn flow_confidence<T: Real>(
    image: &Tensor<T>,
    prev_image: &Tensor<T>,
    flow: &FlowField<T>,
    p: &StgruParams<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let vars = p.on_tape(&mut tape, false);
    let i = tape.constant(image.clone());
    let ip = tape.constant(prev_image.clone());
    let f = tape.constant(flow.tensor().clone());
    let r = flow_confidence_on(&mut tape, i, ip, f, &vars)?;
    Ok(tape.value(r).clone())
}

pub fn stgru_step<T: Real>(
    h_prev: &SegBelief<T>,
    unary: &SegBelief<T>,
    prev_image: &Tensor<T>,
    image: &Tensor<T>,
    flow: &FlowField<T>,
    p: &StgruParams<T>,
) -> Result<SegBelief<T>> {
    let mut tape = Tape::new();
    let vars = p.on_tape(&mut tape, false);
    let h = tape.constant(h_prev.tensor().clone());
    let x = tape.constant(unary.tensor().clone());
    let ip = tape.constant(prev_image.clone());
    let i = tape.constant(image.clone());
    let f = tape.constant(flow.tensor().clone());
    let out = stgru_step_on(&mut tape, h, x, ip, i, f, &vars)?;
    Ok(SegBelief(tape.value(out).clone()))
}

/// Unrolls `cfg.n_frames` frames given in chain order.
pub fn unroll<T: Real>(
    frames: &[Tensor<T>],
    flows: &[FlowField<T>],
    unaries: &[SegBelief<T>],
    p: &StgruParams<T>,
    cfg: &ChainConfig,
) -> Result<SegBelief<T>> {
    if frames.len() != cfg.n_frames || unaries.len() != cfg.n_frames {
        return Err(GrfpError::contract(format!(
            "chain of {} frames got {} frames and {} unaries",
            cfg.n_frames,
            frames.len(),
            unaries.len()
        )));
    }
    let mut tape = Tape::new();
    let vars = p.on_tape(&mut tape, false);
    let fr: Vec<Var> = frames.iter().map(|t| tape.constant(t.clone())).collect();
    let fl: Vec<Var> = flows.iter().map(|f| tape.constant(f.tensor().clone())).collect();
    let un: Vec<Var> = unaries.iter().map(|u| tape.constant(u.tensor().clone())).collect();
    let out = unroll_on(&mut tape, &fr, &fl, &un, &vars)?;
    Ok(SegBelief(tape.value(out).clone()))
}

/// Mean of the forward and backward chain beliefs.
pub fn fuse_bidirectional<T: Real>(forward: &SegBelief<T>, backward: &SegBelief<T>) -> Result<SegBelief<T>> {
    let half = T::lit(0.5);
    let fused = forward.0.zip_map(&backward.0, |a, b| (a + b) * half)?;
    Ok(SegBelief(fused))
}

/// `−Σ log p(true class)` over non-ignore pixels; not normalized by pixel count.
pub fn segmentation_loss<T: Real>(h: &SegBelief<T>, labels: &LabelMap) -> Result<T> {
    let mut tape = Tape::new();
    let v = tape.constant(h.tensor().clone());
    let l = tape.nll(v, labels, T::lit(LOG_FLOOR))?;
    Ok(tape.value(l).item())
}
