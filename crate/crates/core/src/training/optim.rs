use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
    /// Completed updates.
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamStore<T>, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<T>> = params.entries().iter().map(|e| vec![T::zero(); e.tensor.len()]).collect();
        AdamW {
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            weight_decay: T::lit(weight_decay),
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Vec<T>], lr: T) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::shape("adamw", &[params.len()], &[grads.len()]));
        }
        self.t += 1;
        let one = T::one();
        let c1 = one - self.beta1.powi(self.t as i32);
        let c2 = one - self.beta2.powi(self.t as i32);
        for (i, entry) in params.entries_mut().iter_mut().enumerate() {
            let g = &grads[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let decay = if entry.decay { lr * self.weight_decay } else { T::zero() };
            for (j, p) in entry.tensor.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (one - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (one - self.beta2) * g[j] * g[j];
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                *p = *p - decay * *p - lr * update;
            }
        }
        Ok(())
    }
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`; returns the norm before scaling.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Vec<T>], max_norm: T) -> T {
    let norm = grads.iter().flatten().map(|&g| g * g).sum::<T>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_rescales_only_above_threshold() {
        let mut g: Vec<Vec<f64>> = vec![vec![3.0, 0.0], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
        let mut h = vec![vec![0.3, 0.4]];
        clip_global_norm(&mut h, 1.0);
        assert_eq!(h, vec![vec![0.3, 0.4]]);
    }

    #[test]
    fn first_update_has_step_size_lr() {
        use crate::tensor::Tensor;
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::vector(vec![1.0, -1.0]), false);
        let mut opt = AdamW::new(&store, 0.0);
        opt.step(&mut store, &[vec![0.5, -2.0]], 0.01).unwrap();
        let w = store.get(crate::params::ParamId(0)).data();
        assert!((w[0] - 0.99).abs() < 1e-9 && (w[1] + 0.99).abs() < 1e-9);
    }
}
