//! "Same"-padded dilated 2-D cross-correlation.
//!
//! Implemented as a sum of matrix products, one per group of kernel taps,
//! each reading a strided view of the zero-padded input. The weights are
//! viewed as a `(kh·kw·c_in) × c_out` matrix.

use rand::Rng;

use crate::error::{GrfpError, Result};
use crate::tensor::{Real, Tensor};

/// Convolution weights `kh × kw × c_in × c_out`, an optional bias and a dilation.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub dilation: usize,
}

impl<T: Real> ConvKernel<T> {
    pub fn new(weight: Tensor<T>, bias: Option<Tensor<T>>, dilation: usize) -> Result<Self> {
        check_kernel(weight.shape(), bias.as_ref().map(|b| b.shape()), dilation)?;
        Ok(ConvKernel {
            weight,
            bias,
            dilation,
        })
    }

    /// Zero-mean uniform weights in `±scale`, zero bias.
    pub fn uniform<R: Rng>(
        k: usize,
        c_in: usize,
        c_out: usize,
        dilation: usize,
        scale: f64,
        with_bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = Tensor::from_fn(&[k, k, c_in, c_out], |_| {
            T::lit(rng.random_range(-scale..=scale))
        });
        ConvKernel {
            weight,
            bias: with_bias.then(|| Tensor::zeros(&[c_out])),
            dilation,
        }
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[3]
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(x, &self.weight, self.bias.as_ref(), self.dilation)
    }
}

pub(crate) fn check_kernel(w: &[usize], bias: Option<&[usize]>, dilation: usize) -> Result<()> {
    let [kh, kw, _, c_out] = w[..] else {
        return Err(GrfpError::contract(format!(
            "conv weight must be kh×kw×c_in×c_out, got {:?}",
            w
        )));
    };
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(GrfpError::contract(format!(
            "conv kernel extents must be odd, got {}×{}",
            kh, kw
        )));
    }
    if dilation == 0 {
        return Err(GrfpError::contract("conv dilation must be ≥ 1"));
    }
    if let Some(b) = bias {
        if b != [c_out] {
            return Err(GrfpError::shape("conv2d bias", b, &[c_out]));
        }
    }
    Ok(())
}

fn check_input(x: &[usize], w: &[usize]) -> Result<()> {
    if x.len() != 3 || x[2] != w[2] {
        return Err(GrfpError::shape("conv2d", x, w));
    }
    Ok(())
}

/// Layout of a convolution evaluated on a zero-padded copy of the input.
///
/// Outputs are computed on a grid as wide as the padded input (`wp`
/// columns); the extra columns are discarded. On that grid every kernel tap
/// reads the padded input at a fixed offset, so the patch matrix of a tap is
/// a plain strided view and no explicit patch matrix is built.
struct Geometry {
    h: usize,
    w: usize,
    c_in: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    d: usize,
    wp: usize,
    /// Padded buffer length, including one spare row read past the end by
    /// the rightmost taps of the last output row.
    padded_len: usize,
}

impl Geometry {
    fn new(x: &[usize], w: &[usize], dilation: usize) -> Self {
        let (kh, kw) = (w[0], w[1]);
        let (ph, pw) = ((kh / 2) * dilation, (kw / 2) * dilation);
        let wp = x[1] + 2 * pw;
        Geometry {
            h: x[0],
            w: x[1],
            c_in: x[2],
            c_out: w[3],
            kh,
            kw,
            d: dilation,
            wp,
            padded_len: (x[0] + 2 * ph + 1) * wp * x[2],
        }
    }

    fn rows(&self) -> usize {
        self.h * self.wp
    }

    /// `(offset into the padded input, first patch column, patch columns)` of
    /// each group of taps sharing one strided view. Without dilation a whole
    /// kernel row is contiguous; otherwise every tap is its own group.
    fn groups(&self) -> Vec<(usize, usize, usize)> {
        let c = self.c_in;
        if self.d == 1 {
            (0..self.kh).map(|a| (a * self.wp * c, a * self.kw * c, self.kw * c)).collect()
        } else {
            (0..self.kh)
                .flat_map(|a| (0..self.kw).map(move |b| (a, b)))
                .map(|(a, b)| ((a * self.wp + b) * self.d * c, (a * self.kw + b) * c, c))
                .collect()
        }
    }

    fn taps(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let c = self.c_in;
        (0..self.kh)
            .flat_map(move |a| (0..self.kw).map(move |b| (a, b)))
            .map(move |(a, b)| ((a * self.wp + b) * self.d * c, (a * self.kw + b) * c))
    }

    fn pad<T: Real>(&self, x: &[T]) -> Vec<T> {
        let c = self.c_in;
        let (ph, pw) = ((self.kh / 2) * self.d, (self.kw / 2) * self.d);
        let mut out = vec![T::zero(); self.padded_len];
        for i in 0..self.h {
            let to = ((i + ph) * self.wp + pw) * c;
            out[to..to + self.w * c].copy_from_slice(&x[i * self.w * c..(i + 1) * self.w * c]);
        }
        out
    }

    fn unpad<T: Real>(&self, padded: &[T]) -> Tensor<T> {
        let c = self.c_in;
        let (ph, pw) = ((self.kh / 2) * self.d, (self.kw / 2) * self.d);
        let mut data = Vec::with_capacity(self.h * self.w * c);
        for i in 0..self.h {
            let from = ((i + ph) * self.wp + pw) * c;
            data.extend_from_slice(&padded[from..from + self.w * c]);
        }
        Tensor::new(&[self.h, self.w, c], data).expect("extents")
    }

    /// `H × W × c` values spread onto the wide output grid.
    fn widen<T: Real>(&self, y: &[T], c: usize) -> Vec<T> {
        let mut out = vec![T::zero(); self.rows() * c];
        for i in 0..self.h {
            out[i * self.wp * c..(i * self.wp + self.w) * c].copy_from_slice(&y[i * self.w * c..(i + 1) * self.w * c]);
        }
        out
    }

    fn narrow<T: Real>(&self, wide: &[T], c: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(self.h * self.w * c);
        for i in 0..self.h {
            out.extend_from_slice(&wide[i * self.wp * c..(i * self.wp + self.w) * c]);
        }
        out
    }
}

/// Cross-correlation with zero padding; output spatial size equals the input's.
///
/// `x` is `H × W × c_in`, `weight` is `kh × kw × c_in × c_out`. Each output
/// value is accumulated as the bias followed by the taps in `(row, column,
/// input channel)` order.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    dilation: usize,
) -> Result<Tensor<T>> {
    check_kernel(weight.shape(), bias.map(|b| b.shape()), dilation)?;
    check_input(x.shape(), weight.shape())?;
    let g = Geometry::new(x.shape(), weight.shape(), dilation);
    let xp = g.pad(x.data());
    let m = g.rows();
    let mut wide = match bias {
        Some(b) => b.data().repeat(m),
        None => vec![T::zero(); m * g.c_out],
    };
    let wd = weight.data();
    for (offset, first, k) in g.groups() {
        T::gemm_acc(
            m,
            k,
            g.c_out,
            &xp[offset..],
            g.c_in,
            1,
            &wd[first * g.c_out..],
            g.c_out,
            1,
            &mut wide,
            g.c_out,
            1,
        );
    }
    Tensor::new(&[g.h, g.w, g.c_out], g.narrow(&wide, g.c_out))
}

/// Gradients of a [`conv2d`] call.
#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub x: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

/// Vector-Jacobian product of [`conv2d`] for an output gradient `grad_out`.
///
/// The input gradient is only formed when `need_x` is set.
pub fn conv2d_backward<T: Real>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    dilation: usize,
    need_x: bool,
) -> Result<ConvGrads<T>> {
    check_input(x.shape(), weight.shape())?;
    let g = Geometry::new(x.shape(), weight.shape(), dilation);
    if grad_out.shape() != [g.h, g.w, g.c_out] {
        return Err(GrfpError::shape("conv2d backward", grad_out.shape(), &[g.h, g.w, g.c_out]));
    }
    let m = g.rows();
    let (c_in, c_out) = (g.c_in, g.c_out);
    let gy = g.widen(grad_out.data(), c_out);
    let xp = g.pad(x.data());

    let mut gw = Tensor::zeros(weight.shape());
    // patch viewᵀ · grad, one tap group at a time
    for (offset, first, k) in g.groups() {
        T::gemm_acc(k, m, c_out, &xp[offset..], 1, c_in, &gy, c_out, 1, &mut gw.data_mut()[first * c_out..], c_out, 1);
    }

    let gb = has_bias.then(|| {
        let mut gb = Tensor::zeros(&[c_out]);
        for px in grad_out.data().chunks(c_out) {
            for (acc, &v) in gb.data_mut().iter_mut().zip(px) {
                *acc += v;
            }
        }
        gb
    });

    let gx = need_x.then(|| {
        // grad · tapᵀ scattered back through each tap's offset view
        let mut gxp = vec![T::zero(); g.padded_len];
        let wd = weight.data();
        for (offset, first) in g.taps() {
            T::gemm_acc(m, c_out, c_in, &gy, c_out, 1, &wd[first * c_out..], 1, c_out, &mut gxp[offset..], c_in, 1);
        }
        g.unpad(&gxp)
    });

    Ok(ConvGrads {
        x: gx,
        weight: gw,
        bias: gb,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn delta5() -> Tensor<f64> {
        let mut x = Tensor::zeros(&[5, 5, 1]);
        x.set(2, 2, 0, 1.0);
        x
    }

    #[test]
    fn identity_1x1_kernel_returns_input() {
        let x = Tensor::<f64>::from_fn(&[4, 3, 2], |k| (k as f64).cos());
        let w = Tensor::new(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = conv2d(&x, &w, Some(&Tensor::zeros(&[2])), 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn ones_kernel_on_delta_gives_a_block() {
        let w = Tensor::ones(&[3, 3, 1, 1]);
        let y = conv2d(&delta5(), &w, None, 1).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let inside = (1..=3).contains(&i) && (1..=3).contains(&j);
                assert_eq!(y.at(i, j, 0), if inside { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn dilated_ones_kernel_on_delta_hits_offsets_of_two() {
        let w = Tensor::ones(&[3, 3, 1, 1]);
        let y = conv2d(&delta5(), &w, None, 2).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let hit = i % 2 == 0 && j % 2 == 0;
                assert_eq!(y.at(i, j, 0), if hit { 1.0 } else { 0.0 }, "({i},{j})");
            }
        }
    }

    #[test]
    fn rejects_channel_mismatch_and_even_kernels() {
        let x = Tensor::<f64>::zeros(&[4, 4, 3]);
        let err = conv2d(&x, &Tensor::zeros(&[3, 3, 2, 1]), None, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[4, 4, 3]") && msg.contains("[3, 3, 2, 1]"), "{msg}");
        assert!(conv2d(&x, &Tensor::zeros(&[2, 2, 3, 1]), None, 1).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[3, 3, 3, 1]), None, 0).is_err());
    }

    #[test]
    fn bias_is_added_per_output_channel() {
        let x = Tensor::<f32>::zeros(&[2, 2, 1]);
        let b = Tensor::new(&[2], vec![0.5, -1.0]).unwrap();
        let y = conv2d(&x, &Tensor::zeros(&[3, 3, 1, 2]), Some(&b), 1).unwrap();
        assert_eq!(y.pixel(1, 1), &[0.5, -1.0]);
    }
}
