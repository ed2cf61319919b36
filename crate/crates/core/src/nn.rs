//! Parameters, layers and optimizers shared by the detector and the GAN.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Grads, Var};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Ordered, named parameter tensors of one network.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn push(&mut self, name: &str, t: Tensor<T>) -> usize {
        self.names.push(name.to_string());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Places every parameter on the tape; `trainable = false` freezes them.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.tensors.iter().map(|t| g.leaf(t.clone(), trainable)).collect()
    }

    /// Gradients of bound parameters, zero-filled where none flowed.
    pub fn collect_grads(&self, grads: &mut Grads<T>, bound: &[Var]) -> Vec<Tensor<T>> {
        self.tensors
            .iter()
            .zip(bound)
            .map(|(t, &v)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }

    /// Same layout with a different element type.
    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }

    /// Replaces tensor values; names and shapes must match.
    pub fn load(&mut self, other: &ParamSet<T>) -> Result<(), crate::Error> {
        if other.names != self.names {
            return Err(crate::Error::ParamMismatch("parameter names differ".into()));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return Err(crate::Error::ParamMismatch(alloc::format!(
                    "shape {:?} vs {:?}",
                    dst.shape(),
                    src.shape()
                )));
            }
            *dst = src.clone();
        }
        Ok(())
    }

    pub fn from_parts(names: Vec<String>, tensors: Vec<Tensor<T>>) -> Self {
        assert_eq!(names.len(), tensors.len());
        Self { names, tensors }
    }
}

/// A differentiable network mapping one NCHW tensor to another.
pub trait Module<T: Real> {
    fn params(&self) -> &ParamSet<T>;
    fn params_mut(&mut self) -> &mut ParamSet<T>;
    /// Forward pass with parameters already bound to `g`.
    fn forward(&self, g: &mut Graph<T>, params: &[Var], x: Var) -> Var;

    /// Binds parameters and runs the forward pass.
    fn apply(&self, g: &mut Graph<T>, x: Var, trainable: bool) -> (Var, Vec<Var>) {
        let p = self.params().bind(g, trainable);
        let y = self.forward(g, &p, x);
        (y, p)
    }

    /// Inference on a plain tensor.
    fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (y, _) = self.apply(&mut g, xv, false);
        g.value(y).clone()
    }
}

/// Convolution layer geometry; parameters live in the owning [`ParamSet`].
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub weight: usize,
    pub bias: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    /// Registers a conv layer with He-uniform weights scaled by `gain`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        ps: &mut ParamSet<T>,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        gain: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = (in_c * k * k) as f64;
        let bound = gain * Float::sqrt(6.0 / fan_in);
        let w: Vec<T> = (0..out_c * in_c * k * k).map(|_| T::lit(rng.gen_range(-bound..=bound))).collect();
        let weight = ps.push(&alloc::format!("{name}.weight"), Tensor::from_vec(&[out_c, in_c, k, k], w));
        let bias = ps.push(&alloc::format!("{name}.bias"), Tensor::zeros(&[out_c]));
        Self { weight, bias, stride, pad }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Var {
        g.conv2d(x, p[self.weight], Some(p[self.bias]), self.stride, self.pad)
    }
}

/// Global L2 norm of a gradient list.
pub fn grad_norm<T: Real>(grads: &[Tensor<T>]) -> f64 {
    grads.iter().flat_map(|g| g.data()).map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`.
pub fn clip_grad_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) {
    let norm = grad_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
}

/// Adam with coupled L2 weight decay.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self { beta1, beta2, eps: 1e-8, weight_decay, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>], lr: f64) {
        if self.m.is_empty() {
            self.m = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - Float::powi(self.beta1, self.t as i32);
        let bc2 = 1.0 - Float::powi(self.beta2, self.t as i32);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (wd, eps) = (T::lit(self.weight_decay), T::lit(self.eps));
        let step = T::lit(lr / bc1);
        let bc2 = T::lit(bc2);
        for (((p, g), m), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                let g = g + wd * *p;
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *p -= step * *m / ((*v / bc2).sqrt() + eps);
            }
        }
    }
}

/// SGD with (Nesterov) momentum and L2 weight decay.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    velocity: Vec<Tensor<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(momentum: f64, nesterov: bool, weight_decay: f64) -> Self {
        Self { momentum, nesterov, weight_decay, velocity: Vec::new() }
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>], lr: f64) {
        if self.velocity.is_empty() {
            self.velocity = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        }
        let (mu, wd, lr) = (T::lit(self.momentum), T::lit(self.weight_decay), T::lit(lr));
        for ((p, g), vel) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((p, &g), vel) in p.data_mut().iter_mut().zip(g.data()).zip(vel.data_mut()) {
                let g = g + wd * *p;
                *vel = mu * *vel + g;
                let d = if self.nesterov { g + mu * *vel } else { *vel };
                *p -= lr * d;
            }
        }
    }
}

/// Cosine decay from `base` to `base * final_factor` over `total` steps.
pub fn cosine_lr(base: f64, final_factor: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return base;
    }
    let t = (step as f64 / (total - 1) as f64).min(1.0);
    let lo = base * final_factor;
    lo + 0.5 * (base - lo) * (1.0 + Float::cos(core::f64::consts::PI * t))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert!((cosine_lr(1e-2, 0.01, 0, 100) - 1e-2).abs() < 1e-15);
        assert!((cosine_lr(1e-2, 0.01, 99, 100) - 1e-4).abs() < 1e-15);
        let mid = cosine_lr(1.0, 0.0, 50, 101);
        assert!((mid - 0.5).abs() < 1e-12);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut ps = ParamSet::<f64>::new();
        ps.push("x", Tensor::from_vec(&[2], alloc::vec![3.0, -2.0]));
        let mut opt = Adam::new(0.9, 0.999, 0.0);
        for _ in 0..2000 {
            let grads: Vec<_> = ps.tensors().iter().map(|t| t.map(|v| 2.0 * v)).collect();
            opt.step(&mut ps, &grads, 0.01);
        }
        assert!(ps.tensors()[0].data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn sgd_minimizes_quadratic() {
        let mut ps = ParamSet::<f64>::new();
        ps.push("x", Tensor::from_vec(&[1], alloc::vec![5.0]));
        let mut opt = Sgd::new(0.9, true, 0.0);
        for _ in 0..500 {
            let grads: Vec<_> = ps.tensors().iter().map(|t| t.map(|v| 2.0 * v)).collect();
            opt.step(&mut ps, &grads, 0.01);
        }
        assert!(ps.tensors()[0].data()[0].abs() < 1e-6);
    }
}
