use crate::error::{GrfpError, Result};
use crate::tensor::{Real, Tensor};

/// Class id reserved for pixels excluded from loss and evaluation.
pub const IGNORE: u8 = 255;

/// Per-pixel class ids, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(GrfpError::contract(format!(
                "label map {}×{} needs {} ids, got {}",
                height,
                width,
                height * width,
                data.len()
            )));
        }
        Ok(LabelMap {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        LabelMap {
            height,
            width,
            data: vec![class; height * width],
        }
    }

    /// Argmax over the channels of a belief or score map.
    pub fn from_scores<T: Real>(scores: &Tensor<T>) -> Result<Self> {
        let (h, w, _) = scores.hwc()?;
        let data = scores
            .argmax_channels()?
            .into_iter()
            .map(|c| c as u8)
            .collect();
        LabelMap::new(h, w, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.data[i * self.width + j]
    }

    pub fn set(&mut self, i: usize, j: usize, class: u8) {
        self.data[i * self.width + j] = class;
    }

    /// Fails if any id is neither a class below `n_classes` nor [`IGNORE`].
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        match self
            .data
            .iter()
            .find(|&&v| v != IGNORE && v as usize >= n_classes)
        {
            Some(v) => Err(GrfpError::contract(format!(
                "label id {} outside 0..{} (and not ignore)",
                v, n_classes
            ))),
            None => Ok(()),
        }
    }

    /// One-hot encoding as an `H × W × C` tensor; ignore pixels are all zero.
    pub fn one_hot<T: Real>(&self, n_classes: usize) -> Tensor<T> {
        let mut t = Tensor::zeros(&[self.height, self.width, n_classes]);
        for (k, &v) in self.data.iter().enumerate() {
            if (v as usize) < n_classes {
                t.data_mut()[k * n_classes + v as usize] = T::one();
            }
        }
        t
    }

    /// Stored as a rank-2 float tensor in the binary container.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(
            &[self.height, self.width],
            self.data.iter().map(|&v| v as f32).collect(),
        )
        .expect("consistent extents")
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let [h, w] = t.shape()[..] else {
            return Err(GrfpError::contract(format!(
                "label tensor must be rank 2, got shape {:?}",
                t.shape()
            )));
        };
        let mut data = Vec::with_capacity(h * w);
        for &v in t.data() {
            if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
                return Err(GrfpError::contract(format!("label value {} is not a class id", v)));
            }
            data.push(v as u8);
        }
        LabelMap::new(h, w, data)
    }
}
