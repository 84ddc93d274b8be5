use ndarray::ArrayD;

use crate::error::{Error, Result};

/// Handle to one tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named parameter tensors in registration order. Gradients and optimizer
/// state use a `ParamSet` of identical layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<ArrayD<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: ArrayD<f64>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f64> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.tensors[id.0]
    }

    pub fn slice(&self, id: ParamId) -> &[f64] {
        self.tensors[id.0].as_slice().expect("parameters are contiguous")
    }

    pub fn slice_mut(&mut self, id: ParamId) -> &mut [f64] {
        self.tensors[id.0].as_slice_mut().expect("parameters are contiguous")
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| ArrayD::zeros(t.raw_dim())).collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        for t in &mut self.tensors {
            t.fill(0.0);
        }
    }

    pub fn add_assign(&mut self, other: &ParamSet) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            t.mapv_inplace(|v| v * factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Flat view over every scalar, in registration order.
    pub fn scalars(&self) -> impl Iterator<Item = f64> + '_ {
        self.tensors.iter().flat_map(|t| t.iter().copied())
    }

    pub fn scalar_mut(&mut self, mut flat_index: usize) -> &mut f64 {
        for t in &mut self.tensors {
            if flat_index < t.len() {
                return &mut t.as_slice_mut().expect("contiguous")[flat_index];
            }
            flat_index -= t.len();
        }
        panic!("scalar index out of range");
    }

    /// Replaces tensor values from `other`, which must match names and shapes.
    pub fn copy_from(&mut self, other: &ParamSet) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Input("parameter names differ".into()));
        }
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            if a.shape() != b.shape() {
                return Err(Error::Input("parameter shapes differ".into()));
            }
        }
        self.tensors.clone_from(&other.tensors);
        Ok(())
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Stochastic gradient descent with heavy-ball momentum:
/// `v <- momentum * v + g`, `p <- p - lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    velocity: ParamSet,
}

impl Sgd {
    pub fn new(params: &ParamSet, momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64) {
        for ((p, v), g) in params
            .tensors
            .iter_mut()
            .zip(&mut self.velocity.tensors)
            .zip(&grads.tensors)
        {
            ndarray::Zip::from(p).and(v).and(g).for_each(|p, v, &g| {
                *v = self.momentum * *v + g;
                *p -= lr * *v;
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn sgd_momentum_matches_hand_iteration() {
        let mut p = ParamSet::new();
        let id = p.register("w", ArrayD::from_elem(IxDyn(&[1]), 1.0));
        let mut g = p.zeros_like();
        g.slice_mut(id)[0] = 0.5;
        let mut opt = Sgd::new(&p, 0.9);
        opt.step(&mut p, &g, 0.1);
        assert!((p.slice(id)[0] - 0.95).abs() < 1e-15);
        opt.step(&mut p, &g, 0.1);
        // v = 0.9 * 0.5 + 0.5 = 0.95
        assert!((p.slice(id)[0] - (0.95 - 0.095)).abs() < 1e-15);
    }

    #[test]
    fn flat_scalar_access() {
        let mut p = ParamSet::new();
        p.register("a", ArrayD::zeros(IxDyn(&[2])));
        p.register("b", ArrayD::zeros(IxDyn(&[3])));
        *p.scalar_mut(3) = 7.0;
        assert_eq!(p.scalars().collect::<Vec<_>>(), vec![0.0, 0.0, 0.0, 7.0, 0.0]);
    }
}
