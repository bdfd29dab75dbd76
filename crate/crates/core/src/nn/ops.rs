//! Forward and backward passes of the layer primitives.
//!
//! Convolutions are cross-correlations with zero padding `(k - 1) / 2`. Weights are
//! stored `(out, in, k, k)` for both convolution kinds. A stride-2 transposed
//! convolution uses output augmentation 1 so that it exactly doubles the spatial size.

use super::tensor::{ensure_same, Scalar, Tensor4};
use crate::error::{Error, Result};

/// Geometry shared by both convolution kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    /// Same-padding geometry for an odd kernel.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: (kernel - 1) / 2,
        }
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    fn conv_out(&self, x: usize) -> Option<usize> {
        (x + 2 * self.padding)
            .checked_sub(self.kernel)
            .map(|v| v / self.stride + 1)
    }

    fn tconv_out(&self, x: usize) -> Option<usize> {
        ((x - 1) * self.stride + self.kernel + (self.stride - 1)).checked_sub(2 * self.padding)
    }

    fn check(&self, x_channels: usize, weight: &[impl Sized], bias: &[impl Sized]) -> Result<()> {
        if x_channels != self.in_channels {
            return Err(Error::Shape(format!(
                "input has {x_channels} channels, layer expects {}",
                self.in_channels
            )));
        }
        if weight.len() != self.weight_len() || bias.len() != self.out_channels {
            return Err(Error::Shape(format!(
                "parameter buffers ({}, {}) do not match geometry {self:?}",
                weight.len(),
                bias.len()
            )));
        }
        if self.stride != 1 && self.stride != 2 {
            return Err(Error::Shape(format!("unsupported stride {}", self.stride)));
        }
        Ok(())
    }
}

pub struct ConvGrads<T> {
    pub input: Tensor4<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Lowers one `c × h × w` image to a `(c·k·k) × (oh·ow)` patch matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    img: &[T],
    c: usize,
    h: usize,
    w: usize,
    g: &ConvGeom,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let k = g.kernel;
    let plane = oh * ow;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &img[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates the patch matrix back into the image.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    g: &ConvGeom,
    oh: usize,
    ow: usize,
    img: &mut [T],
) {
    let k = g.kernel;
    let plane = oh * ow;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < w {
                            img[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<T: Scalar>(y: &mut [T], bias: &[T], plane: usize) {
    for (o, &b) in bias.iter().enumerate() {
        for v in &mut y[o * plane..(o + 1) * plane] {
            *v += b;
        }
    }
}

fn accumulate_bias_grad<T: Scalar>(dy: &[T], grad: &mut [T], plane: usize) {
    for (o, g) in grad.iter_mut().enumerate() {
        *g += dy[o * plane..(o + 1) * plane].iter().copied().sum::<T>();
    }
}

pub fn conv2d<T: Scalar>(
    x: &Tensor4<T>,
    weight: &[T],
    bias: &[T],
    g: &ConvGeom,
) -> Result<Tensor4<T>> {
    g.check(x.channels(), weight, bias)?;
    let (h, w) = (x.height(), x.width());
    let (oh, ow) = match (g.conv_out(h), g.conv_out(w)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::Shape(format!("kernel {} exceeds input {h}x{w}", g.kernel))),
    };
    let kk = g.in_channels * g.kernel * g.kernel;
    let mut y = Tensor4::zeros([x.batch(), g.out_channels, oh, ow]);
    let mut cols = vec![T::zero(); kk * oh * ow];
    for b in 0..x.batch() {
        im2col(x.item(b), g.in_channels, h, w, g, oh, ow, &mut cols);
        let out = y.item_mut(b);
        T::gemm(g.out_channels, kk, oh * ow, weight, false, &cols, false, out, false);
        add_bias(out, bias, oh * ow);
    }
    Ok(y)
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor4<T>,
    weight: &[T],
    dy: &Tensor4<T>,
    g: &ConvGeom,
) -> Result<ConvGrads<T>> {
    let (h, w) = (x.height(), x.width());
    let (oh, ow) = (dy.height(), dy.width());
    if g.conv_out(h) != Some(oh)
        || g.conv_out(w) != Some(ow)
        || dy.channels() != g.out_channels
        || dy.batch() != x.batch()
        || x.channels() != g.in_channels
    {
        return Err(Error::Shape(format!(
            "conv backward: input {:?}, upstream {:?}, geometry {g:?}",
            x.dims(),
            dy.dims()
        )));
    }
    let kk = g.in_channels * g.kernel * g.kernel;
    let mut grads = ConvGrads {
        input: Tensor4::zeros(x.dims()),
        weight: vec![T::zero(); g.weight_len()],
        bias: vec![T::zero(); g.out_channels],
    };
    let mut cols = vec![T::zero(); kk * oh * ow];
    let mut dcols = vec![T::zero(); kk * oh * ow];
    for b in 0..x.batch() {
        let dyb = dy.item(b);
        im2col(x.item(b), g.in_channels, h, w, g, oh, ow, &mut cols);
        T::gemm(g.out_channels, oh * ow, kk, dyb, false, &cols, true, &mut grads.weight, true);
        accumulate_bias_grad(dyb, &mut grads.bias, oh * ow);
        T::gemm(kk, g.out_channels, oh * ow, weight, true, dyb, false, &mut dcols, false);
        col2im(&dcols, g.in_channels, h, w, g, oh, ow, grads.input.item_mut(b));
    }
    Ok(grads)
}

/// `(out, in, k, k)` weights rearranged to a `(out·k·k) × in` matrix.
fn tconv_matrix<T: Scalar>(weight: &[T], g: &ConvGeom) -> Vec<T> {
    let kk = g.kernel * g.kernel;
    let mut m = vec![T::zero(); weight.len()];
    for o in 0..g.out_channels {
        for i in 0..g.in_channels {
            for q in 0..kk {
                m[(o * kk + q) * g.in_channels + i] = weight[(o * g.in_channels + i) * kk + q];
            }
        }
    }
    m
}

/// Transposed convolution: every input pixel scatters a weighted kernel footprint into
/// the output at `stride` spacing.
pub fn tconv2d<T: Scalar>(
    x: &Tensor4<T>,
    weight: &[T],
    bias: &[T],
    g: &ConvGeom,
) -> Result<Tensor4<T>> {
    g.check(x.channels(), weight, bias)?;
    let (h, w) = (x.height(), x.width());
    let (oh, ow) = match (g.tconv_out(h), g.tconv_out(w)) {
        (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
        _ => return Err(Error::Shape(format!("transposed conv on {h}x{w} collapses"))),
    };
    let kk = g.out_channels * g.kernel * g.kernel;
    let wm = tconv_matrix(weight, g);
    let mut y = Tensor4::zeros([x.batch(), g.out_channels, oh, ow]);
    let mut cols = vec![T::zero(); kk * h * w];
    for b in 0..x.batch() {
        T::gemm(kk, g.in_channels, h * w, &wm, false, x.item(b), false, &mut cols, false);
        let out = y.item_mut(b);
        col2im(&cols, g.out_channels, oh, ow, g, h, w, out);
        add_bias(out, bias, oh * ow);
    }
    Ok(y)
}

pub fn tconv2d_backward<T: Scalar>(
    x: &Tensor4<T>,
    weight: &[T],
    dy: &Tensor4<T>,
    g: &ConvGeom,
) -> Result<ConvGrads<T>> {
    let (h, w) = (x.height(), x.width());
    let (oh, ow) = (dy.height(), dy.width());
    if g.tconv_out(h) != Some(oh)
        || g.tconv_out(w) != Some(ow)
        || dy.channels() != g.out_channels
        || dy.batch() != x.batch()
        || x.channels() != g.in_channels
    {
        return Err(Error::Shape(format!(
            "transposed conv backward: input {:?}, upstream {:?}, geometry {g:?}",
            x.dims(),
            dy.dims()
        )));
    }
    let kk = g.out_channels * g.kernel * g.kernel;
    let wm = tconv_matrix(weight, g);
    let mut dwm = vec![T::zero(); wm.len()];
    let mut grads = ConvGrads {
        input: Tensor4::zeros(x.dims()),
        weight: vec![T::zero(); g.weight_len()],
        bias: vec![T::zero(); g.out_channels],
    };
    let mut dcols = vec![T::zero(); kk * h * w];
    for b in 0..x.batch() {
        let dyb = dy.item(b);
        im2col(dyb, g.out_channels, oh, ow, g, h, w, &mut dcols);
        accumulate_bias_grad(dyb, &mut grads.bias, oh * ow);
        T::gemm(g.in_channels, kk, h * w, &wm, true, &dcols, false, grads.input.item_mut(b), false);
        T::gemm(kk, h * w, g.in_channels, &dcols, false, x.item(b), true, &mut dwm, true);
    }
    let kk1 = g.kernel * g.kernel;
    for o in 0..g.out_channels {
        for i in 0..g.in_channels {
            for q in 0..kk1 {
                grads.weight[(o * g.in_channels + i) * kk1 + q] = dwm[(o * kk1 + q) * g.in_channels + i];
            }
        }
    }
    Ok(grads)
}

pub fn relu<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of ReLU given its pre-activation; the derivative at exactly 0 is 0.
pub fn relu_backward<T: Scalar>(pre: &Tensor4<T>, dy: &Tensor4<T>) -> Result<Tensor4<T>> {
    ensure_same(pre, dy, "relu backward")?;
    let data = pre
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&z, &d)| if z > T::zero() { d } else { T::zero() })
        .collect();
    Tensor4::from_vec(pre.dims(), data)
}

pub fn skip_add<T: Scalar>(pre: &Tensor4<T>, skip: &Tensor4<T>) -> Result<Tensor4<T>> {
    let mut out = pre.clone();
    out.add_assign(skip)?;
    Ok(out)
}

/// Both operands receive the upstream gradient unchanged.
pub fn skip_add_backward<T: Scalar>(dy: &Tensor4<T>) -> (Tensor4<T>, Tensor4<T>) {
    (dy.clone(), dy.clone())
}

/// Mean over all elements of the squared difference, and its gradient wrt `pred`.
pub fn mse_loss<T: Scalar>(pred: &Tensor4<T>, target: &Tensor4<T>) -> Result<(T, Tensor4<T>)> {
    ensure_same(pred, target, "mse")?;
    let n = T::from_f64(pred.len() as f64);
    let two = T::from_f64(2.0);
    let mut sum = T::zero();
    let grad = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p - t;
            sum += d * d;
            two * d / n
        })
        .collect();
    Ok((sum / n, Tensor4::from_vec(pred.dims(), grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_of_ones_sums_padded_windows() {
        let x = Tensor4::filled([1, 1, 3, 3], 1.0f64);
        let g = ConvGeom::same(1, 1, 3, 1);
        let y = conv2d(&x, &[1.0; 9], &[0.0], &g).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn strided_identity_conv_samples_grid() {
        let x = Tensor4::from_vec([1, 1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        let g = ConvGeom::same(1, 1, 1, 2);
        let y = conv2d(&x, &[1.0], &[0.0], &g).unwrap();
        assert_eq!(y.dims(), [1, 1, 2, 2]);
        assert_eq!(y.data(), &[0.0, 2.0, 8.0, 10.0]);
    }

    #[test]
    fn strided_conv_rounds_up() {
        let x = Tensor4::<f32>::zeros([2, 3, 5, 7]);
        let g = ConvGeom::same(3, 4, 3, 2);
        let y = conv2d(&x, &vec![0.0; g.weight_len()], &[0.0; 4], &g).unwrap();
        assert_eq!(y.dims(), [2, 4, 3, 4]);
    }

    #[test]
    fn tconv_scatters_at_stride() {
        let x = Tensor4::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let g = ConvGeom::same(1, 1, 1, 2);
        let y = tconv2d(&x, &[1.0], &[0.0], &g).unwrap();
        assert_eq!(y.dims(), [1, 1, 4, 4]);
        #[rustfmt::skip]
        let expected = [
            1.0, 0.0, 2.0, 0.0,
            0.0, 0.0, 0.0, 0.0,
            3.0, 0.0, 4.0, 0.0,
            0.0, 0.0, 0.0, 0.0,
        ];
        assert_eq!(y.data(), &expected);
    }

    #[test]
    fn tconv_shapes() {
        for k in [1, 3, 5] {
            let x = Tensor4::<f64>::zeros([1, 2, 4, 6]);
            let g1 = ConvGeom::same(2, 3, k, 1);
            let y = tconv2d(&x, &vec![0.0; g1.weight_len()], &[0.0; 3], &g1).unwrap();
            assert_eq!(y.dims(), [1, 3, 4, 6]);
            let g2 = ConvGeom::same(2, 3, k, 2);
            let y = tconv2d(&x, &vec![0.0; g2.weight_len()], &[0.0; 3], &g2).unwrap();
            assert_eq!(y.dims(), [1, 3, 8, 12]);
        }
    }

    #[test]
    fn tconv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, tconv(y)> with the same weights read as (in, out) swapped
        let g = ConvGeom::same(1, 1, 3, 2);
        let x: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let w: Vec<f64> = (0..9).map(|i| (i as f64 * 1.3).cos()).collect();
        let xt = Tensor4::from_vec([1, 1, 4, 4], x.clone()).unwrap();
        let cx = conv2d(&xt, &w, &[0.0], &g).unwrap();
        let y: Vec<f64> = (0..4).map(|i| i as f64 - 1.5).collect();
        let yt = Tensor4::from_vec([1, 1, 2, 2], y.clone()).unwrap();
        let ty = tconv2d(&yt, &w, &[0.0], &g).unwrap();
        let lhs: f64 = cx.data().iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = ty.data().iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let x = Tensor4::<f32>::zeros([1, 2, 4, 4]);
        let g = ConvGeom::same(3, 1, 3, 1);
        assert!(matches!(conv2d(&x, &[0.0; 27], &[0.0], &g), Err(Error::Shape(_))));
        assert!(matches!(tconv2d(&x, &[0.0; 27], &[0.0], &g), Err(Error::Shape(_))));
    }

    #[test]
    fn relu_and_skip() {
        let x = Tensor4::from_vec([1, 1, 1, 3], vec![-1.0f32, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let d = Tensor4::filled([1, 1, 1, 3], 1.0f32);
        assert_eq!(relu_backward(&x, &d).unwrap().data(), &[0.0, 0.0, 1.0]);
        let z = Tensor4::zeros([1, 1, 1, 3]);
        assert_eq!(skip_add(&x, &z).unwrap(), x);
        assert!(skip_add(&x, &Tensor4::zeros([1, 1, 3, 1])).is_err());
    }

    #[test]
    fn mse_basics() {
        let p = Tensor4::filled([2, 3, 4, 5], 1.0f64);
        let t = Tensor4::zeros([2, 3, 4, 5]);
        assert_eq!(mse_loss(&p, &t).unwrap().0, 1.0);
        let (l, g) = mse_loss(&p, &p).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));
        assert!(mse_loss(&p, &Tensor4::zeros([1, 3, 4, 5])).is_err());
    }
}
