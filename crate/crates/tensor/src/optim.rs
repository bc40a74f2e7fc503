//! Named parameter storage and first-order optimizers.

use crate::container::{Container, ContainerError};
use crate::real::Real;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Ordered set of named parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor<f32>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) -> usize {
        self.names.push(name.into());
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

    pub fn get(&self, i: usize) -> &Tensor<f32> {
        &self.tensors[i]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<f32>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn set(&mut self, i: usize, t: Tensor<f32>) {
        assert_eq!(t.shape(), self.tensors[i].shape(), "parameter shape is fixed");
        self.tensors[i] = t;
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter on `tape`, as trainable leaves when
    /// `trainable` is set and as constants otherwise.
    pub fn register<T: Real>(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                let v = t.cast::<T>();
                if trainable {
                    tape.param(v)
                } else {
                    tape.constant(v)
                }
            })
            .collect()
    }

    pub fn write_to(&self, c: &mut Container, prefix: &str) -> Result<(), ContainerError> {
        for (n, t) in self.names.iter().zip(&self.tensors) {
            c.insert_tensor(format!("{prefix}{n}"), t.clone())?;
        }
        Ok(())
    }

    /// Replaces every parameter with the same-named entry of `c`.
    pub fn read_from(&mut self, c: &Container, prefix: &str) -> Result<(), ContainerError> {
        for (n, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let name = format!("{prefix}{n}");
            let loaded = c.tensor::<f32>(&name)?;
            if loaded.shape() != t.shape() {
                return Err(ContainerError::Missing(format!(
                    "{name} with shape {:?}",
                    t.shape()
                )));
            }
            *t = loaded.clone();
        }
        Ok(())
    }
}

/// Collects the gradient of each registered parameter, zeros when unused.
pub fn collect_grads<T: Real>(store: &ParamStore, vars: &[Var], grads: &Gradients<T>) -> Vec<Vec<f32>> {
    vars.iter()
        .enumerate()
        .map(|(i, v)| match grads.get(*v) {
            Some(g) => g.data().iter().map(|x| x.as_f64() as f32).collect(),
            None => vec![0.0; store.get(i).numel()],
        })
        .collect()
}

/// Rescales gradients so their global ℓ2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f32>], max_norm: f32) -> f32 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt() as f32;
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|v| *v *= s);
    }
    norm
}

pub trait Optimizer {
    fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f32>]);
    fn set_lr(&mut self, lr: f32);
    fn lr(&self) -> f32;
}

/// Gradient descent with heavy-ball momentum: `v ← μv + g; θ ← θ − lr·v`.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    lr: f32,
    momentum: f32,
    velocity: Vec<Vec<f32>>,
}

impl SgdMomentum {
    pub fn new(lr: f32, momentum: f32) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }
}

impl Optimizer for SgdMomentum {
    fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f32>]) {
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        }
        for (i, g) in grads.iter().enumerate() {
            let vel = &mut self.velocity[i];
            let p = store.get(i);
            let mut data = p.data().to_vec();
            for ((w, v), &gv) in data.iter_mut().zip(vel.iter_mut()).zip(g) {
                *v = self.momentum * *v + gv;
                *w -= self.lr * *v;
            }
            let shape = p.shape().to_vec();
            store.set(i, Tensor::new(&shape, data).expect("same shape"));
        }
    }

    fn set_lr(&mut self, lr: f32) {
        self.lr = lr;
    }

    fn lr(&self) -> f32 {
        self.lr
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f32>]) {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, g) in grads.iter().enumerate() {
            let p = store.get(i);
            let mut data = p.data().to_vec();
            for (j, &gv) in g.iter().enumerate() {
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gv;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gv * gv;
                data[j] -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
            let shape = p.shape().to_vec();
            store.set(i, Tensor::new(&shape, data).expect("same shape"));
        }
    }

    fn set_lr(&mut self, lr: f32) {
        self.lr = lr;
    }

    fn lr(&self) -> f32 {
        self.lr
    }
}
