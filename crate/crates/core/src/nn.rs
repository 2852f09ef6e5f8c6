//! Named parameters, initializers, common layers and the Adam optimizer.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Conv3dSpec, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::random::{normal_tensor, Rng};
use crate::tensor::Tensor;

/// Ordered map of named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Records every parameter on `tape` as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.param(v.clone())))
                .collect(),
        }
    }

    /// Records every parameter as a constant (inference).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }
}

/// Parameters recorded on one tape.
pub struct Bound<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    /// Swaps in `var` for an existing parameter, e.g. to differentiate
    /// with respect to one tensor only.
    pub fn replace(&mut self, name: &str, var: Var<'t>) -> Result<()> {
        let slot = self
            .vars
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        *slot = var;
        Ok(())
    }

    /// Gradients by parameter name; parameters the loss did not reach get zeros.
    pub fn gradients(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), grads.get_or_zeros(*v)))
            .collect()
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    let mut s = String::with_capacity(prefix.len() + name.len() + 1);
    s.push_str(prefix);
    s.push('.');
    s.push_str(name);
    s
}

/// Gaussian tensor with standard deviation `std`.
pub fn init_normal(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    normal_tensor(rng, shape).map(|x| x * std)
}

/// Dense layer `x W + b`: `prefix.w` is `[fan_in, fan_out]`, `prefix.b` is `[fan_out]`.
pub fn init_linear(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, zero: bool, rng: &mut Rng) {
    let w = if zero {
        Tensor::zeros(&[fan_in, fan_out])
    } else {
        init_normal(rng, &[fan_in, fan_out], libm::sqrt(1.0 / fan_in as f64))
    };
    store.insert(join(prefix, "w"), w);
    store.insert(join(prefix, "b"), Tensor::zeros(&[fan_out]));
}

pub fn linear<'t>(p: &Bound<'t>, prefix: &str, x: Var<'t>) -> Result<Var<'t>> {
    x.matmul(p.get(&join(prefix, "w"))?)?
        .bias_add(p.get(&join(prefix, "b"))?)
}

/// Convolution with kernel `[kf, kh, kw, cin, cout]` and bias `[cout]`.
pub fn init_conv(
    store: &mut ParamStore,
    prefix: &str,
    kernel: [usize; 3],
    cin: usize,
    cout: usize,
    zero: bool,
    rng: &mut Rng,
) {
    let shape = [kernel[0], kernel[1], kernel[2], cin, cout];
    let fan_in = kernel.iter().product::<usize>() * cin;
    let w = if zero {
        Tensor::zeros(&shape)
    } else {
        init_normal(rng, &shape, libm::sqrt(1.0 / fan_in as f64))
    };
    store.insert(join(prefix, "w"), w);
    store.insert(join(prefix, "b"), Tensor::zeros(&[cout]));
}

pub fn conv<'t>(p: &Bound<'t>, prefix: &str, x: Var<'t>, spec: Conv3dSpec) -> Result<Var<'t>> {
    x.conv3d(p.get(&join(prefix, "w"))?, spec)?
        .bias_add(p.get(&join(prefix, "b"))?)
}

/// Scales all gradients so their joint Euclidean norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let sq: f64 = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum();
    let norm = libm::sqrt(sq);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            *g = g.map(|x| x * s);
        }
    }
    norm
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.step as f64);
        for (name, g) in grads {
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(Error::shape("adam", p.shape(), g.shape()));
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            let mut data = p.to_vec();
            for i in 0..data.len() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= self.lr * mhat / (libm::sqrt(vhat) + self.eps);
            }
            let shape = p.shape().to_vec();
            params.insert(name.clone(), Tensor::new(&shape, data)?);
        }
        Ok(())
    }
}

/// Element-wise sum of two gradient tables with identical keys.
pub fn accumulate(into: &mut BTreeMap<String, Tensor>, add: BTreeMap<String, Tensor>) {
    for (k, g) in add {
        match into.get_mut(&k) {
            Some(acc) => {
                let data = acc.data().iter().zip(g.data()).map(|(a, b)| a + b).collect();
                *acc = Tensor::new(acc.shape(), data).expect("matching gradient shapes");
            }
            None => {
                into.insert(k, g);
            }
        }
    }
}

pub fn scale_grads(grads: &mut BTreeMap<String, Tensor>, s: f64) {
    for g in grads.values_mut() {
        *g = g.map(|x| x * s);
    }
}
