use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::rng::Rng;
use crate::{invalid_err, shape_err};

/// Handle to one named parameter inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Initialization rule applied at registration time.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// N(0, std^2)
    Normal { std: f64 },
}

/// One named parameter with its gradient buffer and AdamW moments.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub dims: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Param {
    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Named parameters in registration order, exclusively owned by one trainer.
///
/// Every parameter has exactly one gradient buffer of identical shape;
/// moments start at zero and the shared step counter at 0.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<Param>,
    index: BTreeMap<String, usize>,
    step: u64,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        name: &str,
        dims: &[usize],
        init: Init,
        rng: &mut Rng,
    ) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(invalid_err!("parameter {name:?} registered twice"));
        }
        let n: usize = dims.iter().product();
        if n == 0 {
            return Err(shape_err!("parameter {name:?} has empty shape {dims:?}"));
        }
        let value = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal { std } => {
                let mut v = rng.normal_vec(n);
                for x in &mut v {
                    *x *= std;
                }
                v
            }
        };
        let id = ParamId(self.entries.len());
        self.index.insert(name.to_string(), id.0);
        self.entries.push(Param {
            name: name.to_string(),
            dims: dims.to_vec(),
            value,
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn dims(&self, id: ParamId) -> &[usize] {
        &self.entries[id.0].dims
    }

    #[inline]
    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.0].value
    }

    /// Accumulates `delta` into the gradient buffer of `id`.
    pub fn add_grad(&mut self, id: ParamId, delta: &[f64]) {
        let g = &mut self.entries[id.0].grad;
        debug_assert_eq!(g.len(), delta.len());
        math::axpy(g, 1.0, delta);
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.0].grad
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.entries {
            p.grad.fill(0.0);
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub(crate) fn bump_step(&mut self) -> u64 {
        self.step += 1;
        self.step
    }

    pub fn entries(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub(crate) fn entries_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.entries.iter_mut()
    }

    pub fn total_params(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Overwrites all values with N(0, std^2) draws. Used by the gradient
    /// checker so nominally zero-initialized layers still exercise their
    /// backward paths.
    pub fn randomize_all(&mut self, rng: &mut Rng, std: f64) {
        for p in &mut self.entries {
            for x in &mut p.value {
                *x = rng.next_normal() * std;
            }
        }
    }

    /// Restores a parameter (with optimizer state) from a checkpoint record.
    pub fn load_entry(
        &mut self,
        name: &str,
        dims: &[usize],
        value: Vec<f64>,
        m: Vec<f64>,
        v: Vec<f64>,
    ) -> Result<()> {
        let idx = *self
            .index
            .get(name)
            .ok_or_else(|| invalid_err!("checkpoint parameter {name:?} unknown to this model"))?;
        let p = &mut self.entries[idx];
        if p.dims != dims {
            return Err(shape_err!(
                "checkpoint parameter {name:?} has dims {dims:?}, model expects {:?}",
                p.dims
            ));
        }
        if value.len() != p.value.len() || m.len() != p.m.len() || v.len() != p.v.len() {
            return Err(shape_err!("checkpoint parameter {name:?} payload length mismatch"));
        }
        if !math::all_finite(&value) || !math::all_finite(&m) || !math::all_finite(&v) {
            return Err(Error::NonFinite(alloc::format!(
                "checkpoint parameter {name:?} contains NaN/Inf"
            )));
        }
        p.value = value;
        p.m = m;
        p.v = v;
        Ok(())
    }

    /// Step counter restore for checkpoint loads.
    pub fn restore_step(&mut self, step: u64) {
        self.step = step;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn register_and_lookup() {
        let mut rng = Rng::new(0);
        let mut ps = ParamSet::new();
        let id = ps.register("w", &[2, 3], Init::Normal { std: 0.1 }, &mut rng).unwrap();
        assert_eq!(ps.value(id).len(), 6);
        assert_eq!(ps.id("w"), Some(id));
        assert!(ps.register("w", &[1], Init::Zeros, &mut rng).is_err());
    }

    #[test]
    fn moments_and_grads_start_zero() {
        let mut rng = Rng::new(0);
        let mut ps = ParamSet::new();
        let id = ps.register("b", &[4], Init::Ones, &mut rng).unwrap();
        assert!(ps.grad(id).iter().all(|&g| g == 0.0));
        let p = ps.entries().next().unwrap();
        assert!(p.m.iter().all(|&x| x == 0.0));
        assert!(p.v.iter().all(|&x| x == 0.0));
        assert_eq!(ps.step(), 0);
    }
}
