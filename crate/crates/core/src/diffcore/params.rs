//! Named parameter tensors together with their Adam moment estimates.

use crate::diffcore::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to one tensor inside a [`ParameterSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Entry<T> {
    name: String,
    value: Tensor<T>,
    first_moment: Tensor<T>,
    second_moment: Tensor<T>,
}

/// Adam hyper-parameters.
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
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Trainable tensors and the optimizer state attached to them.
///
/// The step counter is shared: one [`ParameterSet::adam_step`] call advances
/// every parameter by exactly one step.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParameterSet<T = f32> {
    entries: Vec<Entry<T>>,
    step: u64,
}

impl<T: Real> ParameterSet<T> {
    pub fn new() -> Self {
        ParameterSet {
            entries: Vec::new(),
            step: 0,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.id(&name).is_some() {
            return Err(Error::Usage(format!("duplicate parameter name `{name}`")));
        }
        let shape = value.shape().to_vec();
        self.entries.push(Entry {
            name,
            value,
            first_moment: Tensor::zeros(&shape),
            second_moment: Tensor::zeros(&shape),
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn first_moment(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].first_moment
    }

    pub fn second_moment(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].second_moment
    }

    /// Number of Adam steps applied so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// Replaces a tensor, possibly with a new shape. Moments restart at zero.
    pub fn replace(&mut self, id: ParamId, value: Tensor<T>) {
        let e = &mut self.entries[id.0];
        e.first_moment = Tensor::zeros(value.shape());
        e.second_moment = Tensor::zeros(value.shape());
        e.value = value;
    }

    /// Clears moments and the step counter, keeping the values.
    pub fn reset_optimizer(&mut self) {
        for e in &mut self.entries {
            e.first_moment = Tensor::zeros(e.value.shape());
            e.second_moment = Tensor::zeros(e.value.shape());
        }
        self.step = 0;
    }

    /// Copies values (not moments) from another set with identical layout.
    pub fn copy_values_from(&mut self, other: &ParameterSet<T>) -> Result<()> {
        if other.entries.len() != self.entries.len() {
            return Err(Error::Usage("parameter sets differ in length".into()));
        }
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::Usage(format!(
                    "parameter `{}` does not match `{}`",
                    dst.name, src.name
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParameterSet<U> {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    first_moment: e.first_moment.cast(),
                    second_moment: e.second_moment.cast(),
                })
                .collect(),
            step: self.step,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.is_finite())
    }

    /// Total number of scalar values.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Zero gradients shaped like this set.
    pub fn zero_grads(&self) -> Grads<T> {
        Grads {
            tensors: self
                .entries
                .iter()
                .map(|e| Tensor::zeros(e.value.shape()))
                .collect(),
        }
    }

    /// One bias-corrected Adam update.
    ///
    /// A parameter whose gradient is entirely zero keeps its value; its
    /// moments still decay.
    pub fn adam_step(&mut self, grads: &Grads<T>, cfg: &AdamConfig) -> Result<()> {
        if grads.tensors.len() != self.entries.len() {
            return Err(Error::Usage(format!(
                "{} gradients for {} parameters",
                grads.tensors.len(),
                self.entries.len()
            )));
        }
        for (e, g) in self.entries.iter().zip(&grads.tensors) {
            if g.shape() != e.value.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!(
                        "gradient {:?} for parameter `{}` {:?}",
                        g.shape(),
                        e.name,
                        e.value.shape()
                    ),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(e.name.clone()));
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - cfg.beta1.powi(t);
        let bias2 = 1.0 - cfg.beta2.powi(t);
        for (e, g) in self.entries.iter_mut().zip(&grads.tensors) {
            let all_zero = g.data().iter().all(|v| v.is_zero());
            let m = e.first_moment.data_mut();
            let v = e.second_moment.data_mut();
            let w = e.value.data_mut();
            for i in 0..w.len() {
                let gi = g.data()[i].as_f64();
                let mi = cfg.beta1 * m[i].as_f64() + (1.0 - cfg.beta1) * gi;
                let vi = cfg.beta2 * v[i].as_f64() + (1.0 - cfg.beta2) * gi * gi;
                m[i] = T::from_f64(mi);
                v[i] = T::from_f64(vi);
                if !all_zero {
                    let update = cfg.lr * (mi / bias1) / ((vi / bias2).sqrt() + cfg.eps);
                    w[i] = T::from_f64(w[i].as_f64() - update);
                }
            }
        }
        Ok(())
    }
}

/// Gradient tensors aligned with a [`ParameterSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<T = f32> {
    pub(crate) tensors: Vec<Tensor<T>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their joint L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm.is_finite() {
            let scale = T::from_f64(max_norm / norm);
            for t in &mut self.tensors {
                for v in t.data_mut() {
                    *v = *v * scale;
                }
            }
        }
        norm
    }
}
