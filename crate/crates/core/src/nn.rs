//! Parameter storage, basic layers and the Adam optimizer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tape::{Mat, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named trainable matrices. Slot numbers on the tape equal the index here.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
}

/// Tape handles for every parameter of a store.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Mat> {
        self.values.iter_mut()
    }

    /// Registers every parameter on `tape` as a leaf with slot `offset + index`.
    pub fn bind(&self, tape: &mut Tape, offset: usize) -> Bound {
        let vars = self
            .values
            .iter()
            .enumerate()
            .map(|(i, v)| tape.leaf(v.clone(), offset + i))
            .collect();
        Bound { vars }
    }
}

/// Glorot-uniform matrix.
pub fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Mat {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Mat::from_shape_simple_fn((rows, cols), || rng.random_range(-a..a))
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Linear {
            w: store.add(format!("{name}.w"), glorot(fan_in, fan_out, rng)),
            b: store.add(format!("{name}.b"), Mat::zeros((1, fan_out))),
        }
    }

    pub fn param_count(fan_in: usize, fan_out: usize) -> usize {
        fan_in * fan_out + fan_out
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let h = tape.matmul(x, p.get(self.w));
        tape.add_row(h, p.get(self.b))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Mat::ones((1, dim))),
            beta: store.add(format!("{name}.beta"), Mat::zeros((1, dim))),
        }
    }

    pub fn param_count(dim: usize) -> usize {
        2 * dim
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        tape.layer_norm(x, p.get(self.gamma), p.get(self.beta), Self::EPS)
    }
}

/// Adam moments for a fixed list of tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    #[serde(with = "crate::checkpoint::mat_list")]
    m: Vec<Mat>,
    #[serde(with = "crate::checkpoint::mat_list")]
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(lr: f64, shapes: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let m: Vec<Mat> = shapes.into_iter().map(Mat::zeros).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One update; `grads[i]` is `None` for tensors the loss did not reach.
    pub fn step(&mut self, params: &mut [&mut Mat], grads: &[Option<&Mat>]) {
        self.step_scaled(params, grads, &vec![1.0; grads.len()]);
    }

    /// Like [`Adam::step`] with the learning rate of tensor `i` multiplied
    /// by `scales[i]`.
    pub fn step_scaled(&mut self, params: &mut [&mut Mat], grads: &[Option<&Mat>], scales: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(scales.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let step = self.lr * c2.sqrt() / c1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = grads[i] else { continue };
            let step = step * scales[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut **p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step * *m / (v.sqrt() + eps * c2.sqrt());
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = array![[1.0, -1.0]];
        let g = array![[0.5, -2.0]];
        let mut opt = Adam::new(0.1, [(1, 2)]);
        opt.step(&mut [&mut p], &[Some(&g)]);
        // bias-corrected first step is lr * sign(g)
        assert!((p[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((p[[0, 1]] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = array![[3.0]];
        let mut opt = Adam::new(0.05, [(1, 1)]);
        for _ in 0..500 {
            let g = &p * 2.0;
            opt.step(&mut [&mut p], &[Some(&g)]);
        }
        assert!(p[[0, 0]].abs() < 1e-2);
    }
}
