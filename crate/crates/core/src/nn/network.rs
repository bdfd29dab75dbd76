use rand_distr::{Distribution, Normal};

use super::ops::{self, ConvGeom};
use super::tensor::{Scalar, Tensor4};
use crate::arch::{trace_shapes, CaeSpec, LayerKind, LayerSpec};
use crate::error::{Error, Result};
use crate::seed::Rng;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> LayerParams<T> {
    fn zeros_like(spec: &LayerSpec) -> Self {
        Self {
            weight: vec![T::zero(); spec.weight_len()],
            bias: vec![T::zero(); spec.out_channels],
        }
    }
}

/// ADAM moment estimates for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub first: LayerParams<T>,
    pub second: LayerParams<T>,
}

/// Gradients for every layer, in [`CaeSpec::layers`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<LayerParams<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }
}

/// Activations kept from a forward pass for the backward pass.
pub struct ForwardCache<T> {
    /// Input of every layer.
    pub(crate) inputs: Vec<Tensor4<T>>,
    /// Pre-activation (after any skip addition) of every layer.
    pub(crate) pre: Vec<Tensor4<T>>,
}

/// Instantiated network with parameters and optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainableNetwork<T> {
    spec: CaeSpec,
    params: Vec<LayerParams<T>>,
    moments: Vec<Moments<T>>,
    step: u64,
}

fn geom(l: &LayerSpec) -> ConvGeom {
    ConvGeom::same(l.in_channels, l.out_channels, l.kernel, l.stride)
}

impl<T: Scalar> TrainableNetwork<T> {
    /// He-normal weights (`std = sqrt(2 / (in · k²))`), zero biases, zero moments.
    pub fn init(spec: &CaeSpec, rng: &mut Rng) -> Result<Self> {
        trace_shapes(spec)?;
        let mut params = Vec::with_capacity(spec.layer_count());
        for l in spec.layers() {
            let std = (2.0 / (l.in_channels * l.kernel * l.kernel) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            let weight = (0..l.weight_len())
                .map(|_| T::from_f64(normal.sample(rng)))
                .collect();
            params.push(LayerParams {
                weight,
                bias: vec![T::zero(); l.out_channels],
            });
        }
        Self::from_parts(spec.clone(), params, None, 0)
    }

    pub fn from_parts(
        spec: CaeSpec,
        params: Vec<LayerParams<T>>,
        moments: Option<Vec<Moments<T>>>,
        step: u64,
    ) -> Result<Self> {
        if params.len() != spec.layer_count() {
            return Err(Error::Shape(format!(
                "{} parameter sets for {} layers",
                params.len(),
                spec.layer_count()
            )));
        }
        for (i, (l, p)) in spec.layers().zip(&params).enumerate() {
            if p.weight.len() != l.weight_len() || p.bias.len() != l.out_channels {
                return Err(Error::Shape(format!("layer {i} parameter dims do not match spec")));
            }
        }
        let moments = match moments {
            Some(m) => {
                if m.len() != params.len()
                    || m.iter().zip(&params).any(|(m, p)| {
                        m.first.weight.len() != p.weight.len()
                            || m.second.weight.len() != p.weight.len()
                            || m.first.bias.len() != p.bias.len()
                            || m.second.bias.len() != p.bias.len()
                    })
                {
                    return Err(Error::Shape("moment dims do not match parameters".into()));
                }
                m
            }
            None => spec
                .layers()
                .map(|l| Moments {
                    first: LayerParams::zeros_like(l),
                    second: LayerParams::zeros_like(l),
                })
                .collect(),
        };
        Ok(Self {
            spec,
            params,
            moments,
            step,
        })
    }

    pub fn spec(&self) -> &CaeSpec {
        &self.spec
    }

    pub fn params(&self) -> &[LayerParams<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [LayerParams<T>] {
        &mut self.params
    }

    pub fn moments(&self) -> &[Moments<T>] {
        &self.moments
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn zero_gradients(&self) -> Gradients<T> {
        Gradients {
            layers: self.spec.layers().map(LayerParams::zeros_like).collect(),
        }
    }

    fn apply_layer(&self, idx: usize, l: &LayerSpec, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let p = &self.params[idx];
        match l.kind {
            LayerKind::TransposedConv => ops::tconv2d(x, &p.weight, &p.bias, &geom(l)),
            LayerKind::Conv | LayerKind::OutputConv => ops::conv2d(x, &p.weight, &p.bias, &geom(l)),
        }
    }

    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.forward_cached(x).map(|(y, _)| y)
    }

    /// Output together with the intermediate shapes of every layer.
    pub fn forward_shapes(&self, x: &Tensor4<T>) -> Result<Vec<[usize; 4]>> {
        let (_, cache) = self.forward_cached(x)?;
        Ok(cache.pre.iter().map(Tensor4::dims).collect())
    }

    pub fn forward_cached(&self, x: &Tensor4<T>) -> Result<(Tensor4<T>, ForwardCache<T>)> {
        let n = self.spec.encoder.len();
        let expected = self.spec.input_shape();
        if [x.channels(), x.height(), x.width()]
            != [expected.channels, expected.height, expected.width]
        {
            return Err(Error::Shape(format!(
                "network expects {expected}, got {:?}",
                x.dims()
            )));
        }
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(2 * n + 1),
            pre: Vec::with_capacity(2 * n + 1),
        };
        let mut act = x.clone();
        let mut encoder_acts = Vec::with_capacity(n);
        for (j, l) in self.spec.encoder.iter().enumerate() {
            let z = self.apply_layer(j, l, &act)?;
            let a = ops::relu(&z);
            cache.inputs.push(std::mem::replace(&mut act, a));
            cache.pre.push(z);
            encoder_acts.push(act.clone());
        }
        for (i, l) in self.spec.decoder.iter().enumerate() {
            let mut z = self.apply_layer(n + i, l, &act)?;
            if let Some(src) = l.skip_source {
                z.add_assign(&encoder_acts[src])?;
            }
            let a = ops::relu(&z);
            cache.inputs.push(std::mem::replace(&mut act, a));
            cache.pre.push(z);
        }
        let y = self.apply_layer(2 * n, &self.spec.output_layer, &act)?;
        cache.inputs.push(act);
        cache.pre.push(y.clone());
        Ok((y, cache))
    }

    /// Gradients of all parameters and of the network input, given `dy = ∂loss/∂output`.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        dy: &Tensor4<T>,
    ) -> Result<(Gradients<T>, Tensor4<T>)> {
        let n = self.spec.encoder.len();
        let mut grads = Vec::with_capacity(2 * n + 1);
        let layer_back = |idx: usize, l: &LayerSpec, d: &Tensor4<T>| {
            let w = &self.params[idx].weight;
            match l.kind {
                LayerKind::TransposedConv => {
                    ops::tconv2d_backward(&cache.inputs[idx], w, d, &geom(l))
                }
                _ => ops::conv2d_backward(&cache.inputs[idx], w, d, &geom(l)),
            }
        };

        let g = layer_back(2 * n, &self.spec.output_layer, dy)?;
        grads.push(LayerParams {
            weight: g.weight,
            bias: g.bias,
        });
        let mut d = g.input;

        let mut skip_grads: Vec<Option<Tensor4<T>>> = vec![None; n];
        for i in (0..n).rev() {
            let l = &self.spec.decoder[i];
            let dz = ops::relu_backward(&cache.pre[n + i], &d)?;
            if let Some(src) = l.skip_source {
                let (_, to_skip) = ops::skip_add_backward(&dz);
                match &mut skip_grads[src] {
                    Some(acc) => acc.add_assign(&to_skip)?,
                    slot => *slot = Some(to_skip),
                }
            }
            let g = layer_back(n + i, l, &dz)?;
            grads.push(LayerParams {
                weight: g.weight,
                bias: g.bias,
            });
            d = g.input;
        }
        for j in (0..n).rev() {
            if let Some(extra) = &skip_grads[j] {
                d.add_assign(extra)?;
            }
            let dz = ops::relu_backward(&cache.pre[j], &d)?;
            let g = layer_back(j, &self.spec.encoder[j], &dz)?;
            grads.push(LayerParams {
                weight: g.weight,
                bias: g.bias,
            });
            d = g.input;
        }
        grads.reverse();
        Ok((Gradients { layers: grads }, d))
    }

    /// One bias-corrected ADAM update with the default moment decay rates.
    pub fn adam_step(&mut self, grads: &Gradients<T>, lr: f64) -> Result<()> {
        if grads.layers.len() != self.params.len()
            || grads.layers.iter().zip(&self.params).any(|(g, p)| {
                g.weight.len() != p.weight.len() || g.bias.len() != p.bias.len()
            })
        {
            return Err(Error::Shape("gradient dims do not match parameters".into()));
        }
        if !grads.is_finite() {
            return Err(Error::Diverged {
                iteration: self.step as usize,
                message: "non-finite gradient".into(),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64(ADAM_BETA1);
        let b2 = T::from_f64(ADAM_BETA2);
        let one = T::one();
        let c1 = one - b1.powi(t);
        let c2 = one - b2.powi(t);
        let lr = T::from_f64(lr);
        let eps = T::from_f64(ADAM_EPS);
        let update = |p: &mut [T], m: &mut [T], v: &mut [T], g: &[T]| {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] = p[i] - lr * mh / (vh.sqrt() + eps);
            }
        };
        for ((p, mo), g) in self.params.iter_mut().zip(&mut self.moments).zip(&grads.layers) {
            update(&mut p.weight, &mut mo.first.weight, &mut mo.second.weight, &g.weight);
            update(&mut p.bias, &mut mo.first.bias, &mut mo.second.bias, &g.bias);
        }
        Ok(())
    }

    /// Fresh copy of the parameters in another precision, optimizer state reset.
    pub fn cast<U: Scalar>(&self) -> TrainableNetwork<U> {
        let conv = |v: &[T]| v.iter().map(|&x| U::from_f64(x.to_f64())).collect();
        let params = self
            .params
            .iter()
            .map(|p| LayerParams {
                weight: conv(&p.weight),
                bias: conv(&p.bias),
            })
            .collect();
        TrainableNetwork::from_parts(self.spec.clone(), params, None, 0)
            .expect("dims carried over unchanged")
    }
}
