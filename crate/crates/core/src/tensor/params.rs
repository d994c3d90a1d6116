//! Named parameter collection with Adam optimizer state.

use std::collections::BTreeMap;

use super::array::Array;
use super::TensorError;
use crate::scalar::Scalar;

/// One learnable tensor plus its first/second moment accumulators.
#[derive(Debug, Clone)]
pub struct Param<T: Scalar> {
    pub value: Array<T>,
    pub m: Array<T>,
    pub v: Array<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Array<T>) -> Self {
        let m = Array::zeros(value.shape());
        let v = Array::zeros(value.shape());
        Param { value, m, v }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Ordered map of named parameters. Iteration order is the sorted name order,
/// which training relies on for reproducibility.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Scalar> {
    params: BTreeMap<String, Param<T>>,
    step: u64,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: BTreeMap::new(), step: 0 }
    }

    /// Registers a fresh parameter. Names must be unique.
    pub fn register(&mut self, name: &str, value: Array<T>) -> Result<(), TensorError> {
        if self.params.contains_key(name) {
            return Err(TensorError::Invalid {
                op: "register",
                why: format!("duplicate parameter name {name:?}"),
            });
        }
        self.params.insert(name.to_string(), Param::new(value));
        Ok(())
    }

    /// Inserts a parameter with explicit optimizer state (checkpoint loading).
    pub fn insert_raw(&mut self, name: String, param: Param<T>) {
        self.params.insert(name, param);
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn value(&self, name: &str) -> Option<&Array<T>> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Optimizer step count, shared across all parameters.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn total_elements(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// Checks that `other` holds exactly the same names and shapes, reporting
    /// the first offender in sorted name order.
    pub fn validate_same_shapes(&self, other: &ParamStore<T>) -> Result<(), TensorError> {
        for (name, p) in &self.params {
            match other.params.get(name) {
                None => {
                    return Err(TensorError::Invalid {
                        op: "validate_same_shapes",
                        why: format!("parameter {name:?} missing from counterpart"),
                    })
                }
                Some(q) if q.value.shape() != p.value.shape() => {
                    return Err(TensorError::ShapeMismatch {
                        op: "validate_same_shapes",
                        expected: format!("{name:?} {:?}", p.value.shape()),
                        got: format!("{:?}", q.value.shape()),
                    })
                }
                _ => {}
            }
        }
        if let Some(name) = other.params.keys().find(|n| !self.params.contains_key(*n)) {
            return Err(TensorError::Invalid {
                op: "validate_same_shapes",
                why: format!("unexpected parameter {name:?}"),
            });
        }
        Ok(())
    }

    /// One bias-corrected Adam update. Parameters without a gradient entry are
    /// left untouched; gradient shapes must match their parameters.
    pub fn adam_step(
        &mut self,
        grads: &BTreeMap<String, Array<T>>,
        cfg: &AdamConfig,
    ) -> Result<(), TensorError> {
        for name in grads.keys() {
            if !self.params.contains_key(name) {
                return Err(TensorError::Invalid {
                    op: "adam_step",
                    why: format!("gradient for unknown parameter {name:?}"),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2) = (T::cast(cfg.beta1), T::cast(cfg.beta2));
        let (ob1, ob2) = (T::cast(1.0 - cfg.beta1), T::cast(1.0 - cfg.beta2));
        for (name, grad) in grads {
            let param = self.params.get_mut(name).expect("validated above");
            if grad.shape() != param.value.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    expected: format!("{name:?} {:?}", param.value.shape()),
                    got: format!("{:?}", grad.shape()),
                });
            }
            if !grad.is_all_finite() {
                return Err(TensorError::NonFinite { op: "adam_step" });
            }
            let n = grad.numel();
            for i in 0..n {
                let g = grad.data()[i];
                let m = b1 * param.m.data()[i] + ob1 * g;
                let v = b2 * param.v.data()[i] + ob2 * g * g;
                param.m.data_mut()[i] = m;
                param.v.data_mut()[i] = v;
                let m_hat = m.as_f64() / bc1;
                let v_hat = v.as_f64() / bc2;
                let delta = cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
                let cur = param.value.data()[i];
                param.value.data_mut()[i] = cur - T::cast(delta);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grads_leave_params_unchanged() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.register("w", Array::from_vec(vec![2], vec![1.0, -2.0])).unwrap();
        let before = store.value("w").unwrap().clone();
        store.adam_step(&BTreeMap::new(), &AdamConfig::default()).unwrap();
        assert_eq!(store.value("w").unwrap().data(), before.data());
        assert_eq!(store.step(), 1);
    }

    #[test]
    fn single_step_moves_against_gradient_and_is_bounded() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.register("w", Array::scalar(0.5)).unwrap();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Array::scalar(3.0));
        let cfg = AdamConfig { lr: 1e-2, ..AdamConfig::default() };
        store.adam_step(&grads, &cfg).unwrap();
        let delta = store.value("w").unwrap().first() - 0.5;
        assert!(delta < 0.0, "positive gradient must decrease the parameter");
        assert!(delta.abs() <= cfg.lr * 1.001);
    }

    #[test]
    fn hundred_steps_descend_a_convex_quadratic() {
        // loss = 0.5*(w-3)^2, gradient = w-3.
        let mut store: ParamStore<f64> = ParamStore::new();
        store.register("w", Array::scalar(0.0)).unwrap();
        let cfg = AdamConfig { lr: 0.05, ..AdamConfig::default() };
        let loss = |w: f64| 0.5 * (w - 3.0) * (w - 3.0);
        let initial = loss(store.value("w").unwrap().first());
        let mut window_losses = Vec::new();
        for i in 0..100 {
            let w = store.value("w").unwrap().first();
            if i % 10 == 0 {
                window_losses.push(loss(w));
            }
            let mut grads = BTreeMap::new();
            grads.insert("w".to_string(), Array::scalar(w - 3.0));
            store.adam_step(&grads, &cfg).unwrap();
        }
        let final_loss = loss(store.value("w").unwrap().first());
        assert!(final_loss < initial / 10.0);
        for pair in window_losses.windows(2) {
            assert!(pair[1] < pair[0], "loss trend must decrease over windows");
        }
    }

    #[test]
    fn mismatched_gradient_shape_is_an_error() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.register("w", Array::from_vec(vec![2], vec![0.0, 0.0])).unwrap();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Array::scalar(1.0));
        assert!(store.adam_step(&grads, &AdamConfig::default()).is_err());
    }

    #[test]
    fn shape_validation_names_the_offender() {
        let mut a: ParamStore<f64> = ParamStore::new();
        let mut b: ParamStore<f64> = ParamStore::new();
        a.register("conv.w", Array::zeros(&[2, 2])).unwrap();
        b.register("conv.w", Array::zeros(&[2, 3])).unwrap();
        let err = a.validate_same_shapes(&b).unwrap_err();
        assert!(err.to_string().contains("conv.w"));
    }
}
