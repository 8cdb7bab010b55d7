//! Named trainable parameters and their per-pass tape bindings.
//!
//! A [`ParamRegistry`] owns the master copy of every trainable buffer.
//! Each forward pass binds the parameters it touches onto a fresh
//! [`Tape`] through [`PassBindings`], which memoizes so a parameter
//! shared by several layers becomes a single leaf and its gradient
//! accumulates across all uses.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, TensorId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamRegistry {
    params: Vec<Param>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = ParamId(self.params.len());
        self.params.push(Param { name: name.into(), shape: shape.to_vec(), data });
        id
    }

    /// Weight matrix initialized uniform in (-1/sqrt(fan_in), 1/sqrt(fan_in))
    /// with fan_in = input rows.
    pub fn matrix<R: Rng>(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut R) -> ParamId {
        let bound = 1.0 / (rows as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
        self.add(name, &[rows, cols], data)
    }

    /// Lookup table initialized by the width of the looked-up vectors.
    pub fn embedding<R: Rng>(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut R) -> ParamId {
        let bound = 1.0 / (cols as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
        self.add(name, &[rows, cols], data)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        let numel = shape.iter().product();
        self.add(name, shape, vec![0.0; numel])
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        let numel = shape.iter().product();
        self.add(name, shape, vec![1.0; numel])
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut Vec<f64> {
        &mut self.params[id.0].data
    }

    pub fn set_all(&mut self, id: ParamId, v: f64) {
        for x in self.params[id.0].data.iter_mut() {
            *x = v;
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total trainable coordinates across all parameters.
    pub fn total_coords(&self) -> usize {
        self.params.iter().map(Param::numel).sum()
    }

    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| p.data.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Vec<f64>]) {
        assert_eq!(snapshot.len(), self.params.len());
        for (p, s) in self.params.iter_mut().zip(snapshot) {
            p.data.copy_from_slice(s);
        }
    }
}

/// Memoized parameter-to-leaf map for one forward pass.
pub struct PassBindings {
    slots: Vec<Option<TensorId>>,
}

impl PassBindings {
    pub fn new(registry: &ParamRegistry) -> Self {
        PassBindings { slots: vec![None; registry.len()] }
    }

    /// The tape leaf for `id`, creating it on first use.
    pub fn bind(&mut self, tape: &mut Tape, registry: &ParamRegistry, id: ParamId) -> Result<TensorId> {
        if let Some(t) = self.slots[id.0] {
            return Ok(t);
        }
        let p = registry.get(id);
        let t = tape.tensor(p.data.clone(), &p.shape, true)?;
        self.slots[id.0] = Some(t);
        Ok(t)
    }

    pub fn lookup(&self, id: ParamId) -> Option<TensorId> {
        self.slots[id.0]
    }

    /// Per-parameter gradients after backward, zeros for parameters that
    /// were never bound or received no gradient.
    pub fn collect_grads(&self, tape: &Tape, registry: &ParamRegistry) -> Vec<Vec<f64>> {
        registry
            .iter()
            .map(|(id, p)| match self.slots[id.0].and_then(|t| tape.grad(t).map(<[f64]>::to_vec)) {
                Some(g) => g,
                None => vec![0.0; p.numel()],
            })
            .collect()
    }
}

/// Validate a parameter-gradient buffer against its registry entry.
pub fn check_grad_shape(registry: &ParamRegistry, id: ParamId, grad: &[f64]) -> Result<()> {
    let p = registry.get(id);
    if grad.len() != p.numel() {
        return Err(Error::ShapeMismatch { op: "param_grad", lhs: p.shape.clone(), rhs: vec![grad.len()] });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn binding_is_memoized_and_grads_accumulate_across_uses() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut reg = ParamRegistry::new();
        let w = reg.matrix("w", 2, 2, &mut rng);
        let mut tape = Tape::new();
        let mut bind = PassBindings::new(&reg);
        let t1 = bind.bind(&mut tape, &reg, w).unwrap();
        let t2 = bind.bind(&mut tape, &reg, w).unwrap();
        assert_eq!(t1, t2);

        // use the same leaf twice: grad of sum(w) + sum(w) is all twos
        let s1 = tape.sum_all(t1).unwrap();
        let s2 = tape.sum_all(t2).unwrap();
        let total = tape.add(s1, s2).unwrap();
        tape.backward(total).unwrap();
        let grads = bind.collect_grads(&tape, &reg);
        assert_eq!(grads[0], vec![2.0; 4]);
    }

    #[test]
    fn unbound_params_collect_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut reg = ParamRegistry::new();
        let _a = reg.matrix("a", 2, 3, &mut rng);
        let b = reg.matrix("b", 1, 2, &mut rng);
        let mut tape = Tape::new();
        let mut bind = PassBindings::new(&reg);
        let tb = bind.bind(&mut tape, &reg, b).unwrap();
        let s = tape.sum_all(tb).unwrap();
        tape.backward(s).unwrap();
        let grads = bind.collect_grads(&tape, &reg);
        assert_eq!(grads[0], vec![0.0; 6]);
        assert_eq!(grads[1], vec![1.0; 2]);
    }

    #[test]
    fn init_bounds_respect_fan_in() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut reg = ParamRegistry::new();
        let w = reg.matrix("w", 16, 8, &mut rng);
        let bound = 1.0 / 4.0;
        assert!(reg.get(w).data.iter().all(|v| v.abs() < bound));
    }
}
