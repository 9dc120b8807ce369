use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::scalar::Scalar;

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
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are aligned with the
/// registration order of the store passed to [`Adam::new`].
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || store.ids().map(|id| vec![T::zero(); store.get(id).numel()]).collect();
        Adam {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update with `grads[i]` the gradient of parameter `i`.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Vec<T>]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(TensorError::invalid(
                "adam",
                format!("expected {} gradients, got {}", self.m.len(), grads.len()),
            ));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let step_size = T::lit(c.lr / bc1);
        let inv_sqrt_bc2 = T::lit(1.0 / bc2.sqrt());
        let eps = T::lit(c.eps);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = &grads[i];
            let p = store.get_mut(id).data_mut();
            if g.len() != p.len() {
                return Err(TensorError::invalid(
                    "adam",
                    format!("gradient {i} has {} elements, parameter has {}", g.len(), p.len()),
                ));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = b1 * m[j] + one_b1 * g[j];
                v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
                p[j] -= step_size * m[j] / (v[j].sqrt() * inv_sqrt_bc2 + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let before = store.get(crate::ParamId(0)).clone();
        let mut adam = Adam::new(&store, AdamConfig::default());
        for _ in 0..10 {
            adam.step(&mut store, &[vec![0.0; 3]]).unwrap();
        }
        assert_eq!(store.get(crate::ParamId(0)), &before);
    }

    #[test]
    fn constant_gradient_matches_scalar_recurrence() {
        let cfg = AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        };
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::scalar(0.25));
        let mut adam = Adam::new(&store, cfg);
        let g = 0.3;
        // independent recurrence written the textbook way
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.25f64);
        for t in 1..=25 {
            adam.step(&mut store, &[vec![g]]).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 1e-3 * mh / (vh.sqrt() + 1e-8);
            let got = store.get(crate::ParamId(0)).item();
            assert!((got - x).abs() <= 1e-12, "step {t}: {got} vs {x}");
        }
        // with a constant gradient each bias-corrected step is ~lr
        assert!((0.25 - x - 25.0 * 1e-3).abs() < 1e-6);
    }

    #[test]
    fn repeated_runs_are_bitwise_identical() {
        let run = || {
            let mut store = ParamStore::<f32>::new();
            store.add("w", Tensor::from_fn(&[16], |i| i as f32 * 0.1 - 0.7));
            let mut adam = Adam::new(&store, AdamConfig::default());
            for k in 0..50 {
                let g: Vec<f32> = (0..16).map(|i| ((i * 7 + k) % 5) as f32 - 2.0).collect();
                adam.step(&mut store, &[g]).unwrap();
            }
            store.get(crate::ParamId(0)).data().to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
