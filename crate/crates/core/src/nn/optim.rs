use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use super::params::{Grads, ParamStore};
use crate::{Error, Real, Result};

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<T: Real>(store: &ParamStore<T>, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.params().iter().map(|p| vec![0.0; p.data.len()]).collect();
        AdamW { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4, step: 0, m: zeros.clone(), v: zeros }
    }

    /// Updates applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update<T: Real>(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>) -> Result<()> {
        if grads.data.len() != self.m.len() || store.len() != self.m.len() {
            return Err(Error::shape("optimizer state does not match the parameters"));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in store.params_mut().iter_mut().zip(&grads.data).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &g), m), v) in p.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g.as_f64();
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                let x = w.as_f64();
                *w = T::of(x - self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * x));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::Init;
    use crate::rng::stream_rng;
    use alloc::string::ToString;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut rng = stream_rng(0, 0);
        let mut store = ParamStore::<f64>::default();
        let id = store.add("w".to_string(), vec![2], Init::Zeros, &mut rng);
        let mut opt = AdamW::new(&store, 0.1);
        let mut g = store.zero_grads();
        g.get_mut(id).copy_from_slice(&[3.0, -0.5]);
        opt.update(&mut store, &g).unwrap();
        let w = store.get(id);
        assert!((w[0] + 0.1).abs() < 1e-6 && (w[1] - 0.1).abs() < 1e-6);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut rng = stream_rng(0, 0);
        let mut store = ParamStore::<f64>::default();
        let id = store.add("w".to_string(), vec![1], Init::Zeros, &mut rng);
        let mut opt = AdamW::new(&store, 0.05);
        opt.weight_decay = 0.0;
        for _ in 0..500 {
            let mut g = store.zero_grads();
            g.get_mut(id)[0] = 2.0 * (store.get(id)[0] - 2.0);
            opt.update(&mut store, &g).unwrap();
        }
        assert!((store.get(id)[0] - 2.0).abs() < 1e-2);
    }
}
