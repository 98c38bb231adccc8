//! Small dilated per-frame segmentation network producing the unary beliefs.

use rand::Rng;

use crate::checkpoint::Checkpoint;
use crate::conv::ConvKernel;
use crate::error::{GrfpError, Result};
use crate::optim::ParamSet;
use crate::stgru::SegBelief;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Channel widths (input first) and per-layer dilations of a stack of
/// square `kernel × kernel` convolutions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneArch {
    pub channels: Vec<usize>,
    pub dilations: Vec<usize>,
    pub kernel: usize,
}

impl BackboneArch {
    /// 3→32→32→32→32→32→C, 3×3 kernels, dilations 1,1,2,4,8,1.
    pub fn standard(n_classes: usize) -> Self {
        Self::with_width(n_classes, 32)
    }

    pub fn with_width(n_classes: usize, width: usize) -> Self {
        BackboneArch {
            channels: vec![3, width, width, width, width, width, n_classes],
            dilations: vec![1, 1, 2, 4, 8, 1],
            kernel: 3,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.dilations.len()
    }

    pub fn n_classes(&self) -> usize {
        *self.channels.last().expect("non-empty arch")
    }

    /// Pixels an output value can see in each direction.
    pub fn receptive_radius(&self) -> usize {
        self.dilations.iter().map(|d| d * (self.kernel / 2)).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dilations.is_empty() || self.channels.len() != self.dilations.len() + 1 {
            return Err(GrfpError::contract(format!(
                "backbone needs one more channel width than layers, got {:?} / {:?}",
                self.channels, self.dilations
            )));
        }
        if self.channels[0] != 3 {
            return Err(GrfpError::contract("backbone input must have 3 channels"));
        }
        if self.kernel % 2 == 0 || self.dilations.contains(&0) {
            return Err(GrfpError::contract("backbone kernels must be odd with dilation ≥ 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams<T> {
    pub arch: BackboneArch,
    pub layers: Vec<ConvKernel<T>>,
}

impl<T: Real> BackboneParams<T> {
    /// Uniform weights in `±sqrt(1 / fan_in)`, zero biases.
    pub fn init<R: Rng>(arch: BackboneArch, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let k = arch.kernel;
        let layers = (0..arch.n_layers())
            .map(|l| {
                let (cin, cout) = (arch.channels[l], arch.channels[l + 1]);
                let scale = (1.0 / (k * k * cin) as f64).sqrt();
                ConvKernel::uniform(k, cin, cout, arch.dilations[l], scale, true, rng)
            })
            .collect();
        Ok(BackboneParams { arch, layers })
    }

    pub fn n_classes(&self) -> usize {
        self.arch.n_classes()
    }

    pub fn on_tape(&self, tape: &mut Tape<T>, trainable: bool) -> BackboneVars {
        let mut leaf = |t: &Tensor<T>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        BackboneVars {
            layers: self
                .layers
                .iter()
                .map(|l| (leaf(&l.weight), leaf(l.bias.as_ref().expect("backbone layers carry a bias")), l.dilation))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> BackboneParams<U> {
        BackboneParams {
            arch: self.arch.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| ConvKernel {
                    weight: l.weight.cast(),
                    bias: l.bias.as_ref().map(|b| b.cast()),
                    dilation: l.dilation,
                })
                .collect(),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let mut ck = Checkpoint::new();
        for (l, layer) in self.layers.iter().enumerate() {
            ck.insert(&format!("layer{l}.weight"), layer.weight.clone());
            if let Some(b) = &layer.bias {
                ck.insert(&format!("layer{l}.bias"), b.clone());
            }
        }
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        ck.meta.insert("kind".into(), "backbone".into());
        ck.meta.insert("channels".into(), join(&self.arch.channels));
        ck.meta.insert("dilations".into(), join(&self.arch.dilations));
        ck.meta.insert("kernel".into(), self.arch.kernel.to_string());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<Self> {
        let parse = |key: &str| -> Result<Vec<usize>> {
            ck.meta(key)?
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| GrfpError::contract(format!("bad {key} entry {s:?}")))
                })
                .collect()
        };
        let arch = BackboneArch {
            channels: parse("channels")?,
            dilations: parse("dilations")?,
            kernel: ck
                .meta("kernel")?
                .parse()
                .map_err(|_| GrfpError::contract("bad kernel size"))?,
        };
        arch.validate()?;
        let mut layers = Vec::new();
        for l in 0..arch.n_layers() {
            let weight = ck.tensor(&format!("layer{l}.weight"))?.clone();
            let bias = ck.tensor(&format!("layer{l}.bias"))?.clone();
            let want = [arch.kernel, arch.kernel, arch.channels[l], arch.channels[l + 1]];
            if weight.shape() != want {
                return Err(GrfpError::shape("backbone layer", weight.shape(), &want));
            }
            layers.push(ConvKernel::new(weight, Some(bias), arch.dilations[l])?);
        }
        Ok(BackboneParams { arch, layers })
    }
}

impl<T: Real> ParamSet<T> for BackboneParams<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, l.bias.as_ref().expect("bias")])
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, l.bias.as_mut().expect("bias")])
            .collect()
    }
}

/// Tape handles of the backbone layers: `(weight, bias, dilation)`.
#[derive(Clone, Debug)]
pub struct BackboneVars {
    pub layers: Vec<(Var, Var, usize)>,
}

impl BackboneVars {
    /// Handles in [`ParamSet`] order.
    pub fn all(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b, _)| [w, b]).collect()
    }
}

/// Class scores for `image`, rectifying between layers but not after the last.
pub fn backbone_forward_on<T: Real>(tape: &mut Tape<T>, image: Var, p: &BackboneVars) -> Result<Var> {
    let mut x = image;
    let last = p.layers.len() - 1;
    for (l, &(w, b, d)) in p.layers.iter().enumerate() {
        x = tape.conv2d(x, w, Some(b), d)?;
        if l != last {
            x = tape.relu(x);
        }
    }
    Ok(x)
}

/// Softmax-normalized backbone scores.
pub fn unary_belief_on<T: Real>(tape: &mut Tape<T>, image: Var, p: &BackboneVars) -> Result<Var> {
    let scores = backbone_forward_on(tape, image, p)?;
    tape.softmax_channels(scores)
}

pub fn backbone_forward<T: Real>(image: &Tensor<T>, p: &BackboneParams<T>) -> Result<Tensor<T>> {
    let (_, _, c) = image.hwc()?;
    if c != 3 {
        return Err(GrfpError::contract(format!("backbone expects 3-channel images, got {c}")));
    }
    let mut x = image.clone();
    let last = p.layers.len() - 1;
    for (l, layer) in p.layers.iter().enumerate() {
        x = layer.apply(&x)?;
        if l != last {
            x = x.map(|v| v.max(T::zero()));
        }
    }
    Ok(x)
}

pub fn unary_belief<T: Real>(image: &Tensor<T>, p: &BackboneParams<T>) -> Result<SegBelief<T>> {
    SegBelief::from_scores(&backbone_forward(image, p)?)
}
