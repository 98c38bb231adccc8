//! Inference plumbing shared by training and evaluation: per-frame unaries,
//! noisy flow draws and chain assembly in either direction.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::backbone::{unary_belief, BackboneParams};
use crate::error::{GrfpError, Result};
use crate::flowdata::{perturb_flow, VideoSample};
use crate::stgru::{fuse_bidirectional, unroll, ChainConfig, Direction, SegBelief, StgruParams};
use crate::tensor::Tensor;
use crate::warp::FlowField;

/// Static beliefs for every frame of a clip.
pub fn clip_unaries(clip: &VideoSample, backbone: &BackboneParams<f32>) -> Result<Vec<SegBelief<f32>>> {
    if backbone.n_classes() != clip.n_classes {
        return Err(GrfpError::contract(format!(
            "backbone predicts {} classes, clip has {}",
            backbone.n_classes(),
            clip.n_classes
        )));
    }
    clip.frames.par_iter().map(|f| unary_belief(f, backbone)).collect()
}

/// The flows a model actually sees, in both directions.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipFlows {
    pub forward: Vec<FlowField<f32>>,
    pub backward: Vec<FlowField<f32>>,
}

/// Ground-truth flows with i.i.d. Gaussian noise of `sigma` pixels. Each
/// field gets its own stream of `seed`, so the draw for a given pair does not
/// depend on which other pairs are used.
pub fn noisy_flows(clip: &VideoSample, sigma: f64, seed: u64) -> ClipFlows {
    let draw = |flows: &[FlowField<f32>], offset: u64| -> Vec<FlowField<f32>> {
        flows
            .iter()
            .enumerate()
            .map(|(k, f)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(2 * k as u64 + offset);
                perturb_flow(f, sigma, &mut rng)
            })
            .collect()
    };
    ClipFlows {
        forward: draw(&clip.flows, 1),
        backward: draw(&clip.back_flows, 2),
    }
}

/// Frame indices of an `n`-frame chain ending at `target`, in chain order.
pub fn chain_indices(target: usize, n: usize, direction: Direction, n_total: usize) -> Result<Vec<usize>> {
    if n == 0 || target >= n_total {
        return Err(GrfpError::contract(format!(
            "chain of {n} frames ending at frame {target} in a {n_total}-frame clip"
        )));
    }
    match direction {
        Direction::Forward if target + 1 >= n => Ok((target + 1 - n..=target).collect()),
        Direction::Backward if target + n <= n_total => Ok((target..target + n).rev().collect()),
        _ => Err(GrfpError::contract(format!(
            "clip of {n_total} frames cannot hold a {direction:?} chain of {n} frames ending at frame {target}"
        ))),
    }
}

/// Owned inputs of one chain in chain order.
#[derive(Clone, Debug)]
pub struct ChainInputs {
    pub frames: Vec<Tensor<f32>>,
    pub flows: Vec<FlowField<f32>>,
    pub unaries: Vec<SegBelief<f32>>,
    /// Clip frame index of each chain position.
    pub indices: Vec<usize>,
}

/// Frames and flows of a chain; `unaries` is left empty for the caller.
pub fn chain_frames(
    clip: &VideoSample,
    flows: &ClipFlows,
    target: usize,
    n: usize,
    direction: Direction,
) -> Result<ChainInputs> {
    let indices = chain_indices(target, n, direction, clip.n_frames())?;
    let step_flow = |from: usize, to: usize| match direction {
        Direction::Forward => flows.forward[from].clone(),
        Direction::Backward => flows.backward[to].clone(),
    };
    Ok(ChainInputs {
        frames: indices.iter().map(|&k| clip.frames[k].clone()).collect(),
        flows: indices.windows(2).map(|p| step_flow(p[0], p[1])).collect(),
        unaries: Vec::new(),
        indices,
    })
}

pub fn chain_inputs(
    clip: &VideoSample,
    flows: &ClipFlows,
    unaries: &[SegBelief<f32>],
    target: usize,
    n: usize,
    direction: Direction,
) -> Result<ChainInputs> {
    let mut c = chain_frames(clip, flows, target, n, direction)?;
    c.unaries = c.indices.iter().map(|&k| unaries[k].clone()).collect();
    Ok(c)
}

/// A clip with its unaries and flow draw computed once.
#[derive(Clone, Debug)]
pub struct PreparedClip {
    pub clip: VideoSample,
    pub unaries: Vec<SegBelief<f32>>,
    pub flows: ClipFlows,
}

/// Prepares clips in parallel; clip `k` draws its flow noise from `seed + k`.
pub fn prepare_clips(
    clips: &[VideoSample],
    backbone: &BackboneParams<f32>,
    flow_noise: f64,
    seed: u64,
) -> Result<Vec<PreparedClip>> {
    clips
        .par_iter()
        .enumerate()
        .map(|(k, clip)| {
            Ok(PreparedClip {
                clip: clip.clone(),
                unaries: clip_unaries(clip, backbone)?,
                flows: noisy_flows(clip, flow_noise, seed.wrapping_add(k as u64)),
            })
        })
        .collect()
}

/// How a frame's belief is produced.
#[derive(Clone, Copy, Debug)]
pub enum Predictor<'a> {
    /// The backbone alone.
    Static,
    /// Forward chain of up to `n` frames.
    Forward { params: &'a StgruParams<f32>, n: usize },
    /// Mean of a forward chain under `forward` and a backward chain under
    /// `backward`, each of up to `n` frames.
    Fused {
        forward: &'a StgruParams<f32>,
        backward: &'a StgruParams<f32>,
        n: usize,
    },
}

impl Predictor<'_> {
    pub fn name(&self) -> String {
        match self {
            Predictor::Static => "static".into(),
            Predictor::Forward { n, .. } => format!("GRFP({n})"),
            Predictor::Fused { n, .. } => format!("GRFP-fwbw({n})"),
        }
    }
}

fn run_chain(pc: &PreparedClip, target: usize, n: usize, direction: Direction, p: &StgruParams<f32>) -> Result<SegBelief<f32>> {
    let inputs = chain_inputs(&pc.clip, &pc.flows, &pc.unaries, target, n, direction)?;
    let cfg = ChainConfig {
        n_frames: n,
        direction,
        ..ChainConfig::default()
    };
    unroll(&inputs.frames, &inputs.flows, &inputs.unaries, p, &cfg)
}

/// Belief at frame `target`. Chains are shortened where the clip runs out of
/// frames, so early frames fall back toward the static prediction.
pub fn predict_frame(pc: &PreparedClip, target: usize, predictor: Predictor) -> Result<SegBelief<f32>> {
    let total = pc.clip.n_frames();
    if target >= total {
        return Err(GrfpError::contract(format!("frame {target} outside a {total}-frame clip")));
    }
    match predictor {
        Predictor::Static => Ok(pc.unaries[target].clone()),
        Predictor::Forward { params, n } => run_chain(pc, target, n.min(target + 1), Direction::Forward, params),
        Predictor::Fused { forward, backward, n } => {
            let f = run_chain(pc, target, n.min(target + 1), Direction::Forward, forward)?;
            let b = run_chain(pc, target, n.min(total - target), Direction::Backward, backward)?;
            fuse_bidirectional(&f, &b)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_index_order() {
        assert_eq!(chain_indices(4, 3, Direction::Forward, 9).unwrap(), vec![2, 3, 4]);
        assert_eq!(chain_indices(4, 3, Direction::Backward, 9).unwrap(), vec![6, 5, 4]);
        assert_eq!(chain_indices(4, 1, Direction::Backward, 5).unwrap(), vec![4]);
        assert!(chain_indices(1, 3, Direction::Forward, 9).is_err());
        assert!(chain_indices(7, 3, Direction::Backward, 9).is_err());
    }
}
