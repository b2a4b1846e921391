//! Layers, parameter bookkeeping and the Adam optimizer.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Tensor, Var};
use crate::error::{Error, Result};

/// Anything owning named trainable parameters.
pub trait Parameterized {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Var));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Snapshot of every parameter value, keyed by dotted name.
pub fn named_tensors(module: &dyn Parameterized) -> BTreeMap<String, Tensor> {
    let mut out = BTreeMap::new();
    module.visit("", &mut |name, v| {
        out.insert(name.to_string(), v.value().clone());
    });
    out
}

/// Overwrites every parameter from `tensors`; names and shapes must match exactly.
pub fn load_named(module: &mut dyn Parameterized, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    let mut seen = 0usize;
    let mut err: Option<Error> = None;
    module.visit_mut("", &mut |name, v| {
        if err.is_some() {
            return;
        }
        match tensors.get(name) {
            Some(t) if t.shape() == v.shape() => {
                *v = Var::param(t.clone());
                seen += 1;
            }
            Some(t) => {
                err = Some(Error::shape(format!(
                    "parameter {name}: stored {:?}, expected {:?}",
                    t.shape(),
                    v.shape()
                )))
            }
            None => err = Some(Error::shape(format!("parameter {name} missing"))),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if seen != tensors.len() {
        return Err(Error::shape(format!(
            "{} stored parameters but module has {seen}",
            tensors.len()
        )));
    }
    Ok(())
}

pub fn parameter_count(module: &dyn Parameterized) -> usize {
    let mut n = 0;
    module.visit("", &mut |_, v| n += v.value().numel());
    n
}

/// Copies of the parameters cut from any graph, for frozen use.
pub fn frozen<T: Parameterized + Clone>(module: &T) -> T {
    let mut m = module.clone();
    m.visit_mut("", &mut |_, v| *v = v.detach());
    m
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data)
}

/// Fully connected layer, `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn new(rng: &mut impl Rng, input: usize, output: usize) -> Self {
        let bound = (6.0 / (input + output) as f64).sqrt();
        Self {
            weight: Var::param(uniform(rng, &[input, output], bound)),
            bias: Var::param(Tensor::zeros(&[output])),
        }
    }

    pub fn zeroed(input: usize, output: usize) -> Self {
        Self {
            weight: Var::param(Tensor::zeros(&[input, output])),
            bias: Var::param(Tensor::zeros(&[output])),
        }
    }

    pub fn forward(&self, x: &Var) -> Var {
        let y = x.matmul(&self.weight);
        let shape = y.shape().to_vec();
        y.add(&self.bias.expand(&shape))
    }
}

impl Parameterized for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Var)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Square-kernel 2-D convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Var,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// He-uniform initialisation scaled by `gain`.
    pub fn new(
        rng: &mut impl Rng,
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        gain: f64,
    ) -> Self {
        let fan_in = (input * kernel * kernel) as f64;
        let bound = gain * (6.0 / fan_in).sqrt();
        Self {
            weight: Var::param(uniform(rng, &[output, input, kernel, kernel], bound)),
            bias: Var::param(Tensor::zeros(&[output])),
            stride,
            padding,
        }
    }

    pub fn zeroed(input: usize, output: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            weight: Var::param(Tensor::zeros(&[output, input, kernel, kernel])),
            bias: Var::param(Tensor::zeros(&[output])),
            stride,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Var) -> Var {
        let y = x.conv2d(&self.weight, self.stride, self.padding);
        let shape = y.shape().to_vec();
        let b = self.bias.reshape(&[1, shape[1], 1, 1]).expand(&shape);
        y.add(&b)
    }
}

impl Parameterized for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Var)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Tiles a `[N, C]` conditioning matrix over an `h x w` grid.
pub fn tile_spatial(c: &Var, h: usize, w: usize) -> Var {
    let (n, ch) = (c.shape()[0], c.shape()[1]);
    c.reshape(&[n, ch, 1, 1]).expand(&[n, ch, h, w])
}

/// Per-sample mean over all non-batch axes: `[N, ...] -> [N, 1]`.
pub fn per_sample_mean(x: &Var) -> Var {
    let n = x.shape()[0];
    let per = x.value().numel() / n;
    x.reshape(&[n, per]).sum_to(&[n, 1]).scale(1.0 / per as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction; moments are keyed by parameter name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    pub t: u64,
    pub moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Advances the step counter; call once before the `update` calls of one step.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Applies one update to every parameter of `module` that has a gradient.
    pub fn update(&mut self, prefix: &str, module: &mut dyn Parameterized, grads: &Gradients, lr: f64) {
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.t.max(1) as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let moments = &mut self.moments;
        module.visit_mut(prefix, &mut |name, v| {
            let Some(g) = grads.get(v) else {
                return;
            };
            let (m, s) = moments
                .entry(name.to_string())
                .or_insert_with(|| (Tensor::zeros(v.shape()), Tensor::zeros(v.shape())));
            let mut p = v.value().clone();
            for (((pi, &gi), mi), si) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(s.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *si = beta2 * *si + (1.0 - beta2) * gi * gi;
                let mhat = *mi / c1;
                let shat = *si / c2;
                *pi -= lr * mhat / (shat.sqrt() + eps);
            }
            *v = Var::param(p);
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::backward;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut lin = Linear::zeroed(1, 1);
        lin.bias = Var::param(Tensor::new(&[1], vec![1.0]));
        let x = Var::constant(Tensor::new(&[1, 1], vec![0.0]));
        let loss = lin.forward(&x).square().sum();
        let g = backward(&loss);
        let mut adam = Adam::new(AdamConfig::default());
        adam.begin_step();
        adam.update("lin", &mut lin, &g, 0.1);
        // first bias-corrected step is lr * g / (|g| + eps)
        assert!((lin.bias.value().item() - 0.9).abs() < 1e-7);
        // weight has gradient 0 and stays put
        assert_eq!(lin.weight.value().item(), 0.0);
        assert!(adam.moments.contains_key("lin.bias"));
    }

    #[test]
    fn load_named_checks_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Linear::new(&mut rng, 3, 2);
        let mut b = Linear::zeroed(3, 2);
        load_named(&mut b, &named_tensors(&a)).unwrap();
        assert_eq!(a.weight.value(), b.weight.value());
        let mut c = Linear::zeroed(2, 2);
        assert!(load_named(&mut c, &named_tensors(&a)).is_err());
    }
}
