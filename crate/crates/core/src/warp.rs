//! Backward warping of feature maps along optical flow.
//!
//! The output at target pixel `(i, j)` samples the source map at
//! `(i + f^y, j + f^x)` through the separable bilinear kernel
//! `k(t) = max(0, 1 − |t|)`. Source taps outside the image contribute nothing,
//! so samples that leave the image fade to zero.

use crate::error::{GrfpError, Result};
use crate::tensor::{Real, Tensor};

/// Per-pixel displacement `H × W × 2`: channel 0 is `f^x` (columns, positive
/// rightward), channel 1 is `f^y` (rows, positive downward). The vector stored
/// at a target pixel points at its source location in the other frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField<T>(Tensor<T>);

impl<T: Real> FlowField<T> {
    pub fn new(data: Tensor<T>) -> Result<Self> {
        match data.shape() {
            [_, _, 2] => Ok(FlowField(data)),
            s => Err(GrfpError::contract(format!(
                "flow field must be H×W×2, got {:?}",
                s
            ))),
        }
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        FlowField(Tensor::zeros(&[h, w, 2]))
    }

    pub fn constant(h: usize, w: usize, fx: T, fy: T) -> Self {
        FlowField(Tensor::from_fn(&[h, w, 2], |k| if k % 2 == 0 { fx } else { fy }))
    }

    pub fn height(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn fx(&self, i: usize, j: usize) -> T {
        self.0.at(i, j, 0)
    }

    pub fn fy(&self, i: usize, j: usize) -> T {
        self.0.at(i, j, 1)
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    pub fn cast<U: Real>(&self) -> FlowField<U> {
        FlowField(self.0.cast())
    }
}

/// Bilinear interpolation kernel.
#[inline]
pub(crate) fn kernel<T: Real>(t: T) -> T {
    (T::one() - t.abs()).max(T::zero())
}

/// Derivative of [`kernel`]; zero at the kinks `|t| ∈ {0, 1}`.
#[inline]
fn kernel_deriv<T: Real>(t: T) -> T {
    let a = t.abs();
    if a >= T::one() || t == T::zero() {
        T::zero()
    } else if t > T::zero() {
        -T::one()
    } else {
        T::one()
    }
}

/// Sample location and the first row/column whose kernel weight can be nonzero.
#[inline]
fn sample_base<T: Real>(i: usize, j: usize, flow: &Tensor<T>) -> (T, T, isize, isize) {
    let sy = T::lit(i as f64) + flow.at(i, j, 1);
    let sx = T::lit(j as f64) + flow.at(i, j, 0);
    // floor(s) − 1 and floor(s) + 1 always have zero weight unless s is an
    // integer, in which case only floor(s) itself is nonzero.
    let m0 = sy.floor().to_isize().unwrap_or(isize::MIN / 2);
    let n0 = sx.floor().to_isize().unwrap_or(isize::MIN / 2);
    (sy, sx, m0, n0)
}

fn check_shapes<T: Real>(x: &Tensor<T>, flow: &FlowField<T>) -> Result<(usize, usize, usize)> {
    let (h, w, c) = x.hwc()?;
    if flow.height() != h || flow.width() != w {
        return Err(GrfpError::shape("warp", x.shape(), flow.tensor().shape()));
    }
    Ok((h, w, c))
}

/// Warps `x` (`H × W × C`) along `flow`.
///
/// At most four source taps contribute to each output value and they are
/// accumulated row-major, the same order as the dense double sum in
/// [`warp_oracle`], so the two agree bit for bit.
pub fn warp_bilinear<T: Real>(x: &Tensor<T>, flow: &FlowField<T>) -> Result<Tensor<T>> {
    let (h, w, c) = check_shapes(x, flow)?;
    let f = flow.tensor();
    let mut out = Tensor::zeros(&[h, w, c]);
    let (hi, wi) = (h as isize, w as isize);
    for i in 0..h {
        for j in 0..w {
            let (sy, sx, m0, n0) = sample_base(i, j, f);
            let base = (i * w + j) * c;
            for m in m0..=m0 + 1 {
                if m < 0 || m >= hi {
                    continue;
                }
                let ky = kernel(sy - T::lit(m as f64));
                for n in n0..=n0 + 1 {
                    if n < 0 || n >= wi {
                        continue;
                    }
                    let kx = kernel(sx - T::lit(n as f64));
                    let wgt = ky * kx;
                    let src = (m as usize * w + n as usize) * c;
                    for ch in 0..c {
                        let v = x.data()[src + ch] * wgt;
                        out.data_mut()[base + ch] += v;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`warp_bilinear`] with respect to the source map and the flow.
pub fn warp_backward<T: Real>(
    grad_y: &Tensor<T>,
    x: &Tensor<T>,
    flow: &FlowField<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (h, w, c) = check_shapes(x, flow)?;
    if grad_y.shape() != x.shape() {
        return Err(GrfpError::shape("warp backward", grad_y.shape(), x.shape()));
    }
    let f = flow.tensor();
    let mut gx = Tensor::zeros(&[h, w, c]);
    let mut gf = Tensor::zeros(&[h, w, 2]);
    let (hi, wi) = (h as isize, w as isize);
    for i in 0..h {
        for j in 0..w {
            let (sy, sx, m0, n0) = sample_base(i, j, f);
            let g = grad_y.pixel(i, j);
            let (mut dfx, mut dfy) = (T::zero(), T::zero());
            for m in m0..=m0 + 1 {
                if m < 0 || m >= hi {
                    continue;
                }
                let ty = sy - T::lit(m as f64);
                let (ky, dky) = (kernel(ty), kernel_deriv(ty));
                for n in n0..=n0 + 1 {
                    if n < 0 || n >= wi {
                        continue;
                    }
                    let tx = sx - T::lit(n as f64);
                    let (kx, dkx) = (kernel(tx), kernel_deriv(tx));
                    let src = (m as usize * w + n as usize) * c;
                    let wgt = ky * kx;
                    // Σ_c g_c · x_c at this tap
                    let mut gdotx = T::zero();
                    for ch in 0..c {
                        gx.data_mut()[src + ch] += g[ch] * wgt;
                        gdotx += g[ch] * x.data()[src + ch];
                    }
                    dfy += gdotx * dky * kx;
                    dfx += gdotx * ky * dkx;
                }
            }
            gf.set(i, j, 0, dfx);
            gf.set(i, j, 1, dfy);
        }
    }
    Ok((gx, gf))
}

/// Dense evaluation of the warping sum over every source pixel.
///
/// Quadratic in the pixel count; meant for checking [`warp_bilinear`] on
/// small inputs.
pub fn warp_oracle<T: Real>(x: &Tensor<T>, flow: &FlowField<T>) -> Result<Tensor<T>> {
    let (h, w, c) = check_shapes(x, flow)?;
    let mut out = Tensor::zeros(&[h, w, c]);
    for i in 0..h {
        for j in 0..w {
            let sy = T::lit(i as f64) + flow.fy(i, j);
            let sx = T::lit(j as f64) + flow.fx(i, j);
            for ch in 0..c {
                let mut acc = T::zero();
                for m in 0..h {
                    let ky = kernel(sy - T::lit(m as f64));
                    for n in 0..w {
                        let kx = kernel(sx - T::lit(n as f64));
                        if ky * kx != T::zero() {
                            acc += x.at(m, n, ch) * (ky * kx);
                        }
                    }
                }
                out.set(i, j, ch, acc);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_flow_is_identity() {
        let x = Tensor::<f64>::from_fn(&[3, 4, 2], |k| k as f64 * 0.3 - 1.0);
        let y = warp_bilinear(&x, &FlowField::zeros(3, 4)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn integer_shift_pads_with_zero() {
        let x = Tensor::<f64>::from_fn(&[4, 4, 1], |k| (k % 4) as f64);
        let y = warp_bilinear(&x, &FlowField::constant(4, 4, 1.0, 0.0)).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                assert_eq!(y.at(i, j, 0), j as f64 + 1.0);
            }
            assert_eq!(y.at(i, 3, 0), 0.0);
        }
    }

    #[test]
    fn half_pixel_diagonal_sample_averages_four_taps() {
        let x = Tensor::<f64>::new(&[2, 2, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let mut f = Tensor::zeros(&[2, 2, 2]);
        f.set(0, 0, 0, 0.5);
        f.set(0, 0, 1, 0.5);
        let y = warp_bilinear(&x, &FlowField::new(f).unwrap()).unwrap();
        assert_eq!(y.at(0, 0, 0), 1.5);
    }

    #[test]
    fn quarter_shift_splits_mass() {
        let mut x = Tensor::<f64>::zeros(&[1, 4, 1]);
        x.set(0, 2, 0, 1.0);
        let f = FlowField::constant(1, 4, 0.25, 0.0);
        for y in [warp_bilinear(&x, &f).unwrap(), warp_oracle(&x, &f).unwrap()] {
            assert_eq!(y.data(), &[0.0, 0.25, 0.75, 0.0]);
        }
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let x = Tensor::<f64>::from_fn(&[3, 3, 2], |k| k as f64);
        let f = FlowField::constant(3, 3, 0.3, -0.6);
        let (gx, gf) = warp_backward(&Tensor::zeros(&[3, 3, 2]), &x, &f).unwrap();
        assert!(gx.data().iter().all(|&v| v == 0.0));
        assert!(gf.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_mismatched_flow() {
        let x = Tensor::<f64>::zeros(&[3, 3, 1]);
        assert!(warp_bilinear(&x, &FlowField::zeros(3, 4)).is_err());
        assert!(FlowField::new(Tensor::<f64>::zeros(&[3, 3, 1])).is_err());
    }
}
