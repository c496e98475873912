//! Bias-corrected Adam.

use super::tape::{Gradients, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros = |s: &ParamStore| {
            s.ids()
                .map(|id| {
                    let t = s.get(id);
                    Tensor::zeros(t.rows(), t.cols())
                })
                .collect::<Vec<_>>()
        };
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(store),
            v: zeros(store),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::shape(
                "adam_step",
                (store.len(), 1),
                (grads.len(), self.m.len()),
            ));
        }
        for (id, g) in grads.iter() {
            if g.shape() != store.get(id).shape() {
                return Err(Error::shape("adam_step", store.get(id).shape(), g.shape()));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (id, g) in grads.iter() {
            let i = id.index();
            let p = store.get_mut(id);
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::Tape;

    fn store_with(value: f64) -> (ParamStore, crate::diffmath::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::filled(2, 2, value));
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let (mut s, id) = store_with(0.7);
        let before = s.get(id).clone();
        let mut adam = Adam::new(&s, 0.1);
        let zeros = Gradients::zeros_like(&s);
        adam.step(&mut s, &zeros).unwrap();
        assert_eq!(s.get(id), &before);
    }

    #[test]
    fn unit_gradient_first_step_moves_by_lr() {
        // m_hat = 1, v_hat = 1 after bias correction, so the step is lr / (1 + eps).
        let (mut s, id) = store_with(0.0);
        let mut adam = Adam::new(&s, 0.1);
        let mut tape = Tape::new();
        let w = tape.param(&s, id);
        let loss = tape.sum(w).unwrap();
        let grads = tape.backward(loss, &s).unwrap();
        adam.step(&mut s, &grads).unwrap();
        for &v in s.get(id).data() {
            assert!((v + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
        }
        assert_eq!(adam.steps_taken(), 1);
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let run = || {
            let (mut s, id) = store_with(0.3);
            let mut adam = Adam::new(&s, 0.05);
            for _ in 0..10 {
                let mut tape = Tape::new();
                let w = tape.param(&s, id);
                let q = tape.hadamard(w, w).unwrap();
                let t = tape.tanh(q);
                let loss = tape.sum(t).unwrap();
                let g = tape.backward(loss, &s).unwrap();
                adam.step(&mut s, &g).unwrap();
            }
            s.get(id).clone()
        };
        let (a, b) = (run(), run());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn mismatched_gradients_are_rejected() {
        let (mut s, _) = store_with(0.0);
        let mut adam = Adam::new(&s, 0.1);
        let other = {
            let mut o = ParamStore::new();
            o.add("a", Tensor::zeros(1, 1));
            o.add("b", Tensor::zeros(1, 1));
            o
        };
        assert!(adam.step(&mut s, &Gradients::zeros_like(&other)).is_err());
    }
}
