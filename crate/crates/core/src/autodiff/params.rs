use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::tape::{Bound, Tape};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.8,
            beta2: 0.99,
            eps: 1e-9,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    value: Tensor,
    trainable: bool,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Named parameters plus Adam moment buffers.
///
/// Names are kept sorted so iteration (and serialization) order is stable.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        value: Tensor,
        trainable: bool,
    ) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        let n = value.len();
        self.entries.insert(
            name,
            Entry {
                value,
                trainable,
                m: vec![0.0; n],
                v: vec![0.0; n],
            },
        );
        Ok(())
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<()> {
        self.insert(name, Tensor::zeros(shape), true)
    }

    pub fn normal(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?, true)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// Replace a parameter's value; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(Error::shape(
                "param set",
                format!("`{name}`: {:?} vs {:?}", slot.shape(), value.shape()),
            ));
        }
        *slot = value;
        Ok(())
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?
            .trainable = trainable;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.value))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Merge another store's parameters (names must not collide).
    pub fn extend(&mut self, other: ParamStore) -> Result<()> {
        for (name, e) in other.entries {
            if self.entries.contains_key(&name) {
                return Err(Error::invalid(format!("duplicate parameter `{name}`")));
            }
            self.entries.insert(name, e);
        }
        Ok(())
    }

    /// Parameters whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, e)| (k.clone(), e.clone()))
                .collect(),
            step: self.step,
        }
    }

    /// Put every parameter on `tape`; trainable ones become differentiable leaves.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let mut b = Bound::default();
        for (name, e) in &self.entries {
            let v = if e.trainable {
                tape.leaf(e.value.clone())
            } else {
                tape.constant(e.value.clone())
            };
            b.insert(name.clone(), v, e.trainable);
        }
        b
    }

    /// Put every parameter on `tape` as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        let mut b = Bound::default();
        for (name, e) in &self.entries {
            let v = tape.constant(e.value.clone());
            b.insert(name.clone(), v, false);
        }
        b
    }

    /// One bias-corrected Adam update over every trainable parameter.
    pub fn adam_step(&mut self, grads: &HashMap<String, Tensor>, cfg: &AdamConfig) -> Result<()> {
        for (name, e) in &self.entries {
            if !e.trainable {
                continue;
            }
            let g = grads
                .get(name)
                .ok_or_else(|| Error::MissingGradient(name.clone()))?;
            if g.shape() != e.value.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!(
                        "gradient for `{name}` is {:?}, parameter {:?}",
                        g.shape(),
                        e.value.shape()
                    ),
                ));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        for (name, e) in self.entries.iter_mut() {
            if !e.trainable {
                continue;
            }
            let g = grads[name].data();
            let Entry { value, m, v, .. } = e;
            for (i, p) in value.data_mut().iter_mut().enumerate() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *p -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(value: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(value), true).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_params_and_counts_step() {
        let mut s = one(1.5);
        let grads = HashMap::from([("w".to_string(), Tensor::scalar(0.0))]);
        s.adam_step(&grads, &AdamConfig::default()).unwrap();
        assert_eq!(s.get("w").unwrap().item().unwrap(), 1.5);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g² after bias correction, so Δ = lr·g/(|g|+ε).
        let mut s = one(0.0);
        let grads = HashMap::from([("w".to_string(), Tensor::scalar(1.0))]);
        let cfg = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        s.adam_step(&grads, &cfg).unwrap();
        let w = s.get("w").unwrap().item().unwrap();
        assert!((w + 0.1).abs() < 1e-8, "{w}");
    }

    #[test]
    fn identical_calls_are_bit_identical() {
        let grads = HashMap::from([("w".to_string(), Tensor::scalar(0.37))]);
        let mut a = one(0.2);
        let mut b = one(0.2);
        for _ in 0..5 {
            a.adam_step(&grads, &AdamConfig::default()).unwrap();
            b.adam_step(&grads, &AdamConfig::default()).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut s = one(0.0);
        let err = s
            .adam_step(&HashMap::new(), &AdamConfig::default())
            .unwrap_err();
        assert!(matches!(err, Error::MissingGradient(ref n) if n == "w"));
        assert_eq!(s.step(), 0);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = one(0.0);
        assert!(s.insert("w", Tensor::scalar(1.0), true).is_err());
    }
}
