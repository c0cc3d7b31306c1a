use crate::engine::params::global_norm;
use crate::engine::{GradStore, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Scale every tensor by `threshold / norm` when their joint L2 norm exceeds
/// `threshold`. Returns the factor applied (1 when untouched).
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], threshold: T) -> Result<T> {
    if !(threshold > T::zero()) {
        return Err(Error::InvalidArgument(format!(
            "clip threshold must be positive, got {threshold}"
        )));
    }
    let norm = global_norm(grads);
    if norm <= threshold {
        return Ok(T::one());
    }
    let scale = threshold / norm;
    for g in grads.iter_mut() {
        g.scale_in_place(scale);
    }
    Ok(scale)
}

fn check_layout<T: Scalar>(
    params: &ParamStore<T>,
    grads: &GradStore<T>,
    state: &[Tensor<T>],
) -> Result<()> {
    if grads.len() != params.len() || state.len() != params.len() {
        return Err(Error::shape(
            "optimizer",
            format!(
                "{} parameters, {} gradients, {} state tensors",
                params.len(),
                grads.len(),
                state.len()
            ),
        ));
    }
    for ((id, name, p), (g, s)) in params.iter().zip(grads.tensors().iter().zip(state)) {
        let _ = id;
        if g.shape() != p.shape() || s.shape() != p.shape() {
            return Err(Error::shape(
                "optimizer",
                format!(
                    "parameter {name:?} {:?}: gradient {:?}, state {:?}",
                    p.shape(),
                    g.shape(),
                    s.shape()
                ),
            ));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T: Scalar> {
    pub config: AdamConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Adam {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor<T>] {
        &self.v
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &GradStore<T>) -> Result<()> {
        check_layout(params, grads, &self.m)?;
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let correction1 = T::from_f64_lossy(1.0 - c.beta1.powi(t));
        let correction2 = T::from_f64_lossy(1.0 - c.beta2.powi(t));
        let lr = T::from_f64_lossy(c.lr);
        let eps = T::from_f64_lossy(c.eps);
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let g = grads.tensors()[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                m[k] = b1 * m[k] + (T::one() - b1) * g[k];
                v[k] = b2 * v[k] + (T::one() - b2) * g[k] * g[k];
                let mhat = m[k] / correction1;
                let vhat = v[k] / correction2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaGradConfig {
    pub lr: f64,
    pub eps: f64,
}

impl Default for AdaGradConfig {
    fn default() -> Self {
        AdaGradConfig { lr: 1e-4, eps: 1e-8 }
    }
}

/// AdaGrad with a zero-initialised squared-gradient accumulator.
#[derive(Clone, Debug)]
pub struct AdaGrad<T: Scalar> {
    pub config: AdaGradConfig,
    acc: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Scalar> AdaGrad<T> {
    pub fn new(params: &ParamStore<T>, config: AdaGradConfig) -> Self {
        AdaGrad {
            config,
            acc: params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn accumulators(&self) -> &[Tensor<T>] {
        &self.acc
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &GradStore<T>) -> Result<()> {
        check_layout(params, grads, &self.acc)?;
        self.step += 1;
        let lr = T::from_f64_lossy(self.config.lr);
        let eps = T::from_f64_lossy(self.config.eps);
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let g = grads.tensors()[i].data();
            let a = self.acc[i].data_mut();
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                a[k] += g[k] * g[k];
                *w -= lr * g[k] / (a[k].sqrt() + eps);
            }
        }
        Ok(())
    }
}
