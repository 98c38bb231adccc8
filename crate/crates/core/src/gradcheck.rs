//! Central finite-difference verification of tape gradients (64-bit).

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{unary_belief_on, BackboneArch, BackboneParams, BackboneVars};
use crate::error::{GrfpError, Result};
use crate::labels::LabelMap;
use crate::optim::ParamSet;
use crate::stgru::{stgru_step_on, unroll_on, StgruParams, StgruVars, LOG_FLOOR};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which coordinates of each input to perturb.
#[derive(Clone, Copy, Debug)]
pub enum Coverage {
    All,
    /// At most this many coordinates per input, drawn with the given seed.
    Sampled { per_input: usize, seed: u64 },
}

fn evaluate<F>(program: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = program(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.rank() != 0 {
        return Err(GrfpError::contract(format!(
            "grad_check program must return a scalar, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.item())
}

/// Maximum over checked coordinates of
/// `|analytic − central difference| / max(1, |central difference|)`.
pub fn grad_check<F>(program: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    grad_check_with(program, inputs, eps, Coverage::All)
}

/// Like [`grad_check`], optionally restricted to a random subset of coordinates.
pub fn grad_check_with<F>(program: F, inputs: &[Tensor<f64>], eps: f64, coverage: Coverage) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = program(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut rng = match coverage {
        Coverage::Sampled { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Coverage::All => None,
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v);
        let n = inputs[k].numel();
        let coords: Vec<usize> = match (coverage, rng.as_mut()) {
            (Coverage::Sampled { per_input, .. }, Some(r)) if per_input < n => {
                let mut c = sample(r, n, per_input).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for idx in coords {
            let orig = inputs[k].data()[idx];
            work[k].data_mut()[idx] = orig + eps;
            let fp = evaluate(&program, &work)?;
            work[k].data_mut()[idx] = orig - eps;
            let fm = evaluate(&program, &work)?;
            work[k].data_mut()[idx] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let err = (analytic.data()[idx] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Step used by [`standard_suite`].
pub const SUITE_EPS: f64 = 1e-6;

/// Outcome of one named check.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_error: f64,
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Flow components at least `1e-3` from every integer, so finite
/// differences never straddle a kink of the bilinear kernel.
pub fn off_grid_flow(h: usize, w: usize, bound: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(&[h, w, 2], |_| {
        let v: f64 = rng.random_range(-bound..bound);
        let frac = v - v.floor();
        if frac < 1e-3 {
            v + 2e-3
        } else if frac > 1.0 - 1e-3 {
            v - 2e-3
        } else {
            v
        }
    })
}

fn belief(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let raw = uniform(&[h, w, c], 0.1, 1.0, rng);
    let mut out = raw.clone();
    for px in out.data_mut().chunks_mut(c) {
        let s: f64 = px.iter().sum();
        px.iter_mut().for_each(|v| *v /= s);
    }
    out
}

fn random_labels(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> LabelMap {
    LabelMap::new(h, w, (0..h * w).map(|_| rng.random_range(0..c) as u8).collect()).expect("extents")
}

fn stgru_vars(v: &[Var]) -> StgruVars {
    StgruVars {
        w_ir: v[0],
        b_r: v[1],
        w_xh: v[2],
        w_hh: v[3],
        w_xz: v[4],
        w_hz: v[5],
        b_z: v[6],
        log_lambda: v[7],
    }
}

/// Random cell parameters of moderate size so every gate is away from saturation.
fn random_cell(c: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let mut p = StgruParams::<f64>::init(c, 1, k, 2.0, rng).expect("valid cell");
    for t in p.params_mut() {
        let shape = t.shape().to_vec();
        *t = uniform(&shape, -0.3, 0.3, rng);
    }
    p.params().into_iter().cloned().collect()
}

/// Weighted sum `Σ r ⊙ y` with fixed random weights, so no symmetry hides errors.
fn probe(tape: &mut Tape<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    let r = tape.constant(weights.clone());
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

/// Finite-difference checks of every differentiable building block in
/// 64-bit: the warp (image and flow), one recurrent step, a three-frame
/// chain, the backbone and the segmentation loss.
pub fn standard_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, c) = (6, 6, 3);
    let mut out = Vec::new();

    let x = uniform(&[h, w, 3], -1.0, 1.0, &mut rng);
    let f = off_grid_flow(h, w, 2.0, &mut rng);
    let r = uniform(&[h, w, 3], -1.0, 1.0, &mut rng);
    out.push(CheckResult {
        name: "warp_bilinear",
        max_rel_error: grad_check(
            |t, v| {
                let y = t.warp(v[0], v[1])?;
                probe(t, y, &r)
            },
            &[x, f],
            SUITE_EPS,
        )?,
    });

    let k = 3;
    let mut inputs = random_cell(c, k, &mut rng);
    inputs.push(belief(h, w, c, &mut rng));
    inputs.push(belief(h, w, c, &mut rng));
    inputs.push(uniform(&[h, w, 3], 0.0, 1.0, &mut rng));
    inputs.push(uniform(&[h, w, 3], 0.0, 1.0, &mut rng));
    inputs.push(off_grid_flow(h, w, 1.5, &mut rng));
    let r = uniform(&[h, w, c], -1.0, 1.0, &mut rng);
    out.push(CheckResult {
        name: "stgru_step",
        max_rel_error: grad_check(
            |t, v| {
                let p = stgru_vars(v);
                let y = stgru_step_on(t, v[8], v[9], v[10], v[11], v[12], &p)?;
                probe(t, y, &r)
            },
            &inputs,
            SUITE_EPS,
        )?,
    });

    let mut inputs = random_cell(c, k, &mut rng);
    for _ in 0..3 {
        inputs.push(uniform(&[h, w, 3], 0.0, 1.0, &mut rng));
    }
    for _ in 0..2 {
        inputs.push(off_grid_flow(h, w, 1.5, &mut rng));
    }
    let unaries: Vec<Tensor<f64>> = (0..3).map(|_| belief(h, w, c, &mut rng)).collect();
    let labels = random_labels(h, w, c, &mut rng);
    out.push(CheckResult {
        name: "unroll_3_frames",
        max_rel_error: grad_check(
            |t, v| {
                let p = stgru_vars(v);
                let un: Vec<Var> = unaries.iter().map(|u| t.constant(u.clone())).collect();
                let hh = unroll_on(t, &v[8..11], &v[11..13], &un, &p)?;
                t.nll(hh, &labels, LOG_FLOOR)
            },
            &inputs,
            SUITE_EPS,
        )?,
    });

    let arch = BackboneArch::with_width(c, 4);
    let bp = BackboneParams::<f64>::init(arch.clone(), &mut rng)?;
    let mut inputs: Vec<Tensor<f64>> = bp.params().into_iter().cloned().collect();
    for t in inputs.iter_mut().skip(1).step_by(2) {
        let shape = t.shape().to_vec();
        *t = uniform(&shape, -0.1, 0.1, &mut rng);
    }
    let n_params = inputs.len();
    inputs.push(uniform(&[8, 8, 3], 0.0, 1.0, &mut rng));
    let labels = random_labels(8, 8, c, &mut rng);
    out.push(CheckResult {
        name: "backbone",
        max_rel_error: grad_check(
            |t, v| {
                let vars = BackboneVars {
                    layers: arch
                        .dilations
                        .iter()
                        .enumerate()
                        .map(|(l, &d)| (v[2 * l], v[2 * l + 1], d))
                        .collect(),
                };
                let u = unary_belief_on(t, v[n_params], &vars)?;
                t.nll(u, &labels, LOG_FLOOR)
            },
            &inputs,
            SUITE_EPS,
        )?,
    });

    let scores = uniform(&[h, w, c], -2.0, 2.0, &mut rng);
    let mut labels = random_labels(h, w, c, &mut rng);
    labels.set(0, 0, crate::labels::IGNORE);
    out.push(CheckResult {
        name: "segmentation_loss",
        max_rel_error: grad_check(
            |t, v| {
                let p = t.softmax_channels(v[0])?;
                t.nll(p, &labels, LOG_FLOOR)
            },
            &[scores],
            SUITE_EPS,
        )?,
    });
    Ok(out)
}
