//! Forward and backward kernels shared by the graph and by plain inference code.

use super::Tensor2D;
use crate::error::{Error, Result};

/// Kernel size, stride and zero padding of a temporal convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub const fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self { kernel, stride, padding }
    }

    /// Output length `floor((t + 2p - k) / s) + 1`.
    pub fn output_len(&self, t: usize) -> Result<usize> {
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::Contract(format!("kernel and stride must be >= 1, got {self:?}")));
        }
        let padded = t + 2 * self.padding;
        if padded < self.kernel {
            return Err(Error::DegenerateLength(format!(
                "input length {t} with {self:?} yields no output positions"
            )));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }
}

fn check_conv(input: &Tensor2D, weight: &Tensor2D, bias: &Tensor2D, spec: ConvSpec) -> Result<usize> {
    let din = input.cols();
    if weight.rows() != spec.kernel * din {
        return Err(Error::Dimension(format!(
            "conv1d weight has {} rows, expected kernel {} x input width {din}",
            weight.rows(),
            spec.kernel
        )));
    }
    if bias.shape() != (1, weight.cols()) {
        return Err(Error::Dimension(format!(
            "conv1d bias is {}x{}, expected 1x{}",
            bias.rows(),
            bias.cols(),
            weight.cols()
        )));
    }
    spec.output_len(input.rows())
}

/// Cross-correlation over the time axis with zero padding.
///
/// `input` is `T x Din`, `weight` is `(k*Din) x Dout` with row `j*Din + c` holding
/// tap `j` of input channel `c`, `bias` is `1 x Dout`.
pub fn conv1d(input: &Tensor2D, weight: &Tensor2D, bias: &Tensor2D, spec: ConvSpec) -> Result<Tensor2D> {
    let tout = check_conv(input, weight, bias, spec)?;
    let (t_in, din) = input.shape();
    let dout = weight.cols();
    let mut out = Tensor2D::zeros(tout, dout);
    for t in 0..tout {
        let orow = out.row_mut(t);
        orow.copy_from_slice(bias.data());
        for j in 0..spec.kernel {
            let src = t * spec.stride + j;
            if src < spec.padding || src - spec.padding >= t_in {
                continue;
            }
            let x = input.row(src - spec.padding);
            for (c, &xv) in x.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let w = weight.row(j * din + c);
                for (o, wv) in orow.iter_mut().zip(w) {
                    *o += xv * wv;
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv1d`] with respect to input, weight and bias.
pub fn conv1d_backward(
    input: &Tensor2D,
    weight: &Tensor2D,
    grad_out: &Tensor2D,
    spec: ConvSpec,
) -> (Tensor2D, Tensor2D, Tensor2D) {
    let (t_in, din) = input.shape();
    let dout = weight.cols();
    let mut gin = Tensor2D::zeros(t_in, din);
    let mut gw = Tensor2D::zeros(weight.rows(), dout);
    let mut gb = Tensor2D::zeros(1, dout);
    for t in 0..grad_out.rows() {
        let g = grad_out.row(t);
        gb.data_mut().iter_mut().zip(g).for_each(|(a, b)| *a += b);
        for j in 0..spec.kernel {
            let src = t * spec.stride + j;
            if src < spec.padding || src - spec.padding >= t_in {
                continue;
            }
            let r = src - spec.padding;
            for c in 0..din {
                let xv = input.get(r, c);
                let wrow = j * din + c;
                let w = weight.row(wrow);
                let mut acc = 0.0;
                for (wv, gv) in w.iter().zip(g) {
                    acc += wv * gv;
                }
                gin.row_mut(r)[c] += acc;
                if xv != 0.0 {
                    for (gwv, gv) in gw.row_mut(wrow).iter_mut().zip(g) {
                        *gwv += xv * gv;
                    }
                }
            }
        }
    }
    (gin, gw, gb)
}

/// `a · b`, or `a · bᵀ` when `transpose_rhs` is set.
pub fn matmul(a: &Tensor2D, b: &Tensor2D, transpose_rhs: bool) -> Result<Tensor2D> {
    if transpose_rhs {
        if a.cols() != b.cols() {
            return Err(Error::Dimension(format!(
                "cannot multiply {}x{} by transpose of {}x{}",
                a.rows(),
                a.cols(),
                b.rows(),
                b.cols()
            )));
        }
        let mut out = Tensor2D::zeros(a.rows(), b.rows());
        for i in 0..a.rows() {
            let ar = a.row(i);
            for j in 0..b.rows() {
                out.set(i, j, super::dot(ar, b.row(j)));
            }
        }
        Ok(out)
    } else {
        if a.cols() != b.rows() {
            return Err(Error::Dimension(format!(
                "cannot multiply {}x{} by {}x{}",
                a.rows(),
                a.cols(),
                b.rows(),
                b.cols()
            )));
        }
        let mut out = Tensor2D::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for (k, &av) in a.row(i).iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let br = b.row(k);
                for (o, bv) in out.row_mut(i).iter_mut().zip(br) {
                    *o += av * bv;
                }
            }
        }
        Ok(out)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
