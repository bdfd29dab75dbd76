//! Central finite-difference checks of the analytic gradients (64-bit).
//!
//! The numerical side only ever calls forward passes, so it stays independent of the
//! backward code it verifies.

use rand::Rng as _;
use rand_distr::StandardNormal;

use super::network::TrainableNetwork;
use super::ops::{self, ConvGeom};
use super::tensor::Tensor4;
use crate::arch::CaeSpec;
use crate::error::Result;
use crate::seed::Rng;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Step for whole-network checks. The per-element MSE makes many parameter gradients
/// small relative to the loss, so a larger step keeps roundoff below the tolerance; the
/// loss is piecewise quadratic in any single parameter, so central differences carry no
/// truncation error away from ReLU kinks.
pub const NETWORK_EPS: f64 = 1e-4;

/// Floor on the denominator of [`relative_error`], so that two vanishing gradients
/// compare as equal rather than as 0/0.
pub const RELATIVE_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + eps;
            let up = f(&probe);
            probe[i] = x[i] - eps;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * eps)
        })
        .collect()
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

fn normal_vec(len: usize, rng: &mut Rng) -> Vec<f64> {
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConvKind {
    Conv,
    Transposed,
}

/// Checks input, weight and bias gradients of one (transposed) convolution under the
/// scalar objective `⟨r, layer(x)⟩` for a random projection `r`.
pub fn check_conv(kind: ConvKind, stride: usize, kernel: usize, eps: f64, rng: &mut Rng) -> Result<f64> {
    let g = ConvGeom::same(2, 3, kernel, stride);
    let dims = [2, 2, 6, 6];
    let x = normal_vec(dims.iter().product(), rng);
    let w = normal_vec(g.weight_len(), rng);
    let b = normal_vec(g.out_channels, rng);
    let apply = |x: &[f64], w: &[f64], b: &[f64]| -> Result<Tensor4<f64>> {
        let xt = Tensor4::from_vec(dims, x.to_vec())?;
        match kind {
            ConvKind::Conv => ops::conv2d(&xt, w, b, &g),
            ConvKind::Transposed => ops::tconv2d(&xt, w, b, &g),
        }
    };
    let y = apply(&x, &w, &b)?;
    let r = normal_vec(y.len(), rng);
    let dy = Tensor4::from_vec(y.dims(), r.clone())?;
    let xt = Tensor4::from_vec(dims, x.clone())?;
    let grads = match kind {
        ConvKind::Conv => ops::conv2d_backward(&xt, &w, &dy, &g)?,
        ConvKind::Transposed => ops::tconv2d_backward(&xt, &w, &dy, &g)?,
    };
    let obj = |x: &[f64], w: &[f64], b: &[f64]| dot(apply(x, w, b).expect("shapes fixed").data(), &r);
    let nx = numeric_gradient(|p| obj(p, &w, &b), &x, eps);
    let nw = numeric_gradient(|p| obj(&x, p, &b), &w, eps);
    let nb = numeric_gradient(|p| obj(&x, &w, p), &b, eps);
    Ok(max_relative_error(grads.input.data(), &nx)
        .max(max_relative_error(&grads.weight, &nw))
        .max(max_relative_error(&grads.bias, &nb)))
}

/// ReLU gradient away from the kink (inputs kept at least 0.1 from zero).
pub fn check_relu(eps: f64, rng: &mut Rng) -> Result<f64> {
    let dims = [2, 3, 4, 4];
    let x: Vec<f64> = normal_vec(dims.iter().product(), rng)
        .into_iter()
        .map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
        .collect();
    let r = normal_vec(x.len(), rng);
    let xt = Tensor4::from_vec(dims, x.clone())?;
    let dy = Tensor4::from_vec(dims, r.clone())?;
    let analytic = ops::relu_backward(&xt, &dy)?;
    let numeric = numeric_gradient(
        |p| dot(ops::relu(&Tensor4::from_vec(dims, p.to_vec()).unwrap()).data(), &r),
        &x,
        eps,
    );
    Ok(max_relative_error(analytic.data(), &numeric))
}

pub fn check_skip_add(eps: f64, rng: &mut Rng) -> Result<f64> {
    let dims = [2, 3, 4, 4];
    let len: usize = dims.iter().product();
    let a = normal_vec(len, rng);
    let s = normal_vec(len, rng);
    let r = normal_vec(len, rng);
    let (ga, gs) = ops::skip_add_backward(&Tensor4::from_vec(dims, r.clone())?);
    let obj = |a: &[f64], s: &[f64]| {
        let out = ops::skip_add(
            &Tensor4::from_vec(dims, a.to_vec()).unwrap(),
            &Tensor4::from_vec(dims, s.to_vec()).unwrap(),
        )
        .unwrap();
        dot(out.data(), &r)
    };
    let na = numeric_gradient(|p| obj(p, &s), &a, eps);
    let ns = numeric_gradient(|p| obj(&a, p), &s, eps);
    Ok(max_relative_error(ga.data(), &na).max(max_relative_error(gs.data(), &ns)))
}

pub fn check_mse(eps: f64, rng: &mut Rng) -> Result<f64> {
    let dims = [2, 2, 3, 3];
    let len: usize = dims.iter().product();
    let p = normal_vec(len, rng);
    let t = normal_vec(len, rng);
    let tt = Tensor4::from_vec(dims, t)?;
    let (_, grad) = ops::mse_loss(&Tensor4::from_vec(dims, p.clone())?, &tt)?;
    let numeric = numeric_gradient(
        |q| ops::mse_loss(&Tensor4::from_vec(dims, q.to_vec()).unwrap(), &tt).unwrap().0,
        &p,
        eps,
    );
    Ok(max_relative_error(grad.data(), &numeric))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_param_error: f64,
    pub max_input_error: f64,
    /// Coordinates left out because a ±eps step flipped some ReLU on or off.
    pub skipped: usize,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.max_param_error.max(self.max_input_error)
    }
}

/// Loss and the on/off state of every ReLU for one forward pass.
fn loss_and_pattern(net: &TrainableNetwork<f64>, x: &Tensor4<f64>, target: &Tensor4<f64>) -> (f64, Vec<bool>) {
    let (out, cache) = net.forward_cached(x).expect("shapes fixed");
    let loss = ops::mse_loss(&out, target).expect("shapes fixed").0;
    let relus = cache.pre.len() - 1;
    let pattern = cache.pre[..relus].iter().flat_map(|z| z.data().iter().map(|&v| v > 0.0)).collect();
    (loss, pattern)
}

/// Central differences of `f` at `x`, with `None` wherever a step changes the ReLU
/// pattern, since the loss is not differentiable across that boundary.
fn numeric_gradient_smooth(
    mut f: impl FnMut(&[f64]) -> (f64, Vec<bool>),
    x: &[f64],
    base: &[bool],
    eps: f64,
) -> Vec<Option<f64>> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + eps;
            let (plus, pp) = f(&probe);
            probe[i] = x[i] - eps;
            let (minus, pm) = f(&probe);
            probe[i] = x[i];
            (pp == base && pm == base).then(|| (plus - minus) / (2.0 * eps))
        })
        .collect()
}

fn smooth_error(analytic: &[f64], numeric: &[Option<f64>], skipped: &mut usize) -> f64 {
    let mut worst: f64 = 0.0;
    for (&a, n) in analytic.iter().zip(numeric) {
        match n {
            Some(n) => worst = worst.max(relative_error(a, *n)),
            None => *skipped += 1,
        }
    }
    worst
}

/// Compares every parameter and input gradient of `net` under the MSE loss against
/// central differences.
pub fn gradcheck_network(
    net: &TrainableNetwork<f64>,
    input: &Tensor4<f64>,
    target: &Tensor4<f64>,
    eps: f64,
) -> Result<GradCheckReport> {
    let (out, cache) = net.forward_cached(input)?;
    let (_, dy) = ops::mse_loss(&out, target)?;
    let (grads, dx) = net.backward(&cache, &dy)?;
    let (_, base) = loss_and_pattern(net, input, target);

    let mut skipped = 0;
    let mut checked = 0;
    let mut max_param_error: f64 = 0.0;
    let mut probe = net.clone();
    for li in 0..net.params().len() {
        for which in [true, false] {
            let values = if which {
                net.params()[li].weight.clone()
            } else {
                net.params()[li].bias.clone()
            };
            let numeric = numeric_gradient_smooth(
                |p| {
                    let slot = &mut probe.params_mut()[li];
                    if which {
                        slot.weight.copy_from_slice(p);
                    } else {
                        slot.bias.copy_from_slice(p);
                    }
                    loss_and_pattern(&probe, input, target)
                },
                &values,
                &base,
                eps,
            );
            let slot = &mut probe.params_mut()[li];
            let analytic = if which {
                slot.weight.copy_from_slice(&values);
                &grads.layers[li].weight
            } else {
                slot.bias.copy_from_slice(&values);
                &grads.layers[li].bias
            };
            checked += analytic.len();
            max_param_error = max_param_error.max(smooth_error(analytic, &numeric, &mut skipped));
        }
    }

    let numeric_x = numeric_gradient_smooth(
        |p| loss_and_pattern(net, &Tensor4::from_vec(input.dims(), p.to_vec()).unwrap(), target),
        input.data(),
        &base,
        eps,
    );
    checked += numeric_x.len();
    let max_input_error = smooth_error(dx.data(), &numeric_x, &mut skipped);
    Ok(GradCheckReport {
        max_param_error,
        max_input_error,
        skipped,
        checked,
    })
}

/// Randomly initialised instance of `spec` on a random `batch`-sized input and target.
pub fn gradcheck(spec: &CaeSpec, batch: usize, eps: f64, rng: &mut Rng) -> Result<GradCheckReport> {
    let mut net = TrainableNetwork::<f64>::init(spec, rng)?;
    // Non-zero biases so that every code path carries signal.
    for p in net.params_mut() {
        for b in &mut p.bias {
            *b = 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let s = spec.input_shape();
    let dims = [batch, s.channels, s.height, s.width];
    let len: usize = dims.iter().product();
    let input = Tensor4::from_vec(dims, (0..len).map(|_| rng.random::<f64>()).collect())?;
    let target = Tensor4::from_vec(dims, (0..len).map(|_| rng.random::<f64>()).collect())?;
    gradcheck_network(&net, &input, &target, eps)
}
