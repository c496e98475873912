//! Graph-convolutional GRU cell carrying node hidden states across snapshots.

use rand::Rng;

use crate::diffmath::{Linear, ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Weights of one recurrent cell. Every gate has its own graph convolution
/// for the input stream and for the hidden stream.
#[derive(Clone, Debug)]
pub struct GcrnParams {
    /// Feature extractor, `feat_dim -> hidden / 2`, tanh.
    pub phi_x: Linear,
    /// Embedding extractor, `embed_dim -> hidden / 2`, tanh.
    pub phi_z: Linear,
    pub reset_x: Linear,
    pub reset_h: Linear,
    pub update_x: Linear,
    pub update_h: Linear,
    pub cand_x: Linear,
    pub cand_h: Linear,
    pub hidden: usize,
}

impl GcrnParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        feat_dim: usize,
        embed_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if hidden == 0 || hidden % 2 != 0 {
            return Err(Error::config("hidden", format!("{hidden} must be even and positive")));
        }
        let half = hidden / 2;
        let mut lin = |suffix: &str, i: usize, o: usize| Linear::new(store, &format!("{name}.{suffix}"), i, o, rng);
        Ok(GcrnParams {
            phi_x: lin("phi_x", feat_dim, half),
            phi_z: lin("phi_z", embed_dim, half),
            reset_x: lin("reset_x", hidden, hidden),
            reset_h: lin("reset_h", hidden, hidden),
            update_x: lin("update_x", hidden, hidden),
            update_h: lin("update_h", hidden, hidden),
            cand_x: lin("cand_x", hidden, hidden),
            cand_h: lin("cand_h", hidden, hidden),
            hidden,
        })
    }

    /// `tanh(x W + b)`.
    pub fn extract_features(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.phi_x.forward(tape, store, x)?;
        Ok(tape.tanh(h))
    }

    /// One GRU update from raw features `x`.
    pub fn step(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        a_hat: Var,
        x: Var,
        z: Var,
        h_prev: Var,
    ) -> Result<Var> {
        let fx = self.extract_features(tape, store, x)?;
        self.step_with_features(tape, store, a_hat, fx, z, h_prev)
    }

    /// One GRU update when `phi_x(x)` has already been computed.
    pub fn step_with_features(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        a_hat: Var,
        fx: Var,
        z: Var,
        h_prev: Var,
    ) -> Result<Var> {
        let (rows, cols) = tape.shape(h_prev);
        if cols != self.hidden || rows != tape.shape(fx).0 || rows != tape.shape(z).0 {
            return Err(Error::shape("gcrn_step", (rows, cols), tape.shape(z)));
        }
        let fz = self.phi_z.forward(tape, store, z)?;
        let fz = tape.tanh(fz);
        let input = tape.concat_cols(fx, fz)?;

        let gate = |tape: &mut Tape, wx: &Linear, wh: &Linear, h: Var| -> Result<Var> {
            let a = wx.convolve(tape, store, a_hat, input)?;
            let b = wh.convolve(tape, store, a_hat, h)?;
            tape.add(a, b)
        };
        let r = gate(tape, &self.reset_x, &self.reset_h, h_prev)?;
        let reset = tape.sigmoid(r);
        let u = gate(tape, &self.update_x, &self.update_h, h_prev)?;
        let update = tape.sigmoid(u);
        let rh = tape.hadamard(reset, h_prev)?;
        let c = gate(tape, &self.cand_x, &self.cand_h, rh)?;
        let cand = tape.tanh(c);

        let keep = tape.hadamard(update, h_prev)?;
        let one_minus = tape.one_minus(update);
        let fresh = tape.hadamard(one_minus, cand)?;
        tape.add(keep, fresh)
    }
}

/// Applies one recurrent step; see [`GcrnParams::step`].
pub fn gcrn_step(
    tape: &mut Tape,
    store: &ParamStore,
    params: &GcrnParams,
    a_hat: Var,
    x: Var,
    z: Var,
    h_prev: Var,
) -> Result<Var> {
    params.step(tape, store, a_hat, x, z, h_prev)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::diffmath::Tensor;
    use crate::graph::{normalize_adjacency, Snapshot};
    use crate::testutil::assert_grads_match;

    struct Toy {
        store: ParamStore,
        cell: GcrnParams,
        a_hat: Tensor,
        x: Tensor,
        z: Tensor,
    }

    fn toy(seed: u64) -> Toy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cell = GcrnParams::new(&mut store, "gcrn", 4, 3, 4, &mut rng).unwrap();
        let s = Snapshot::from_edges(4, [(0, 1), (1, 2), (2, 3)]).unwrap();
        let x = Tensor::identity(4);
        let z = crate::diffmath::glorot(&mut rng, 4, 3);
        Toy {
            store,
            cell,
            a_hat: normalize_adjacency(&s),
            x,
            z,
        }
    }

    fn zero_all(store: &mut ParamStore) {
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn run(t: &Toy, store: &ParamStore, h: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let a = tape.constant(t.a_hat.clone());
        let x = tape.constant(t.x.clone());
        let z = tape.constant(t.z.clone());
        let hp = tape.constant(h.clone());
        let out = gcrn_step(&mut tape, store, &t.cell, a, x, z, hp).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn zero_weights_halve_the_hidden_state() {
        let mut t = toy(1);
        zero_all(&mut t.store);
        let h = Tensor::from_rows(&[[1.0, -2.0, 0.5, 4.0]; 4]);
        assert_eq!(run(&t, &t.store, &h), h.map(|v| 0.5 * v));
        assert_eq!(run(&t, &t.store, &Tensor::zeros(4, 4)), Tensor::zeros(4, 4));
    }

    #[test]
    fn saturated_update_gate_keeps_previous_state() {
        let mut t = toy(2);
        t.store.get_mut(t.cell.update_x.bias).data_mut().iter_mut().for_each(|v| *v = 50.0);
        let h = Tensor::from_rows(&[[0.3, -0.7, 0.1, 0.9]; 4]);
        let out = run(&t, &t.store, &h);
        for (a, b) in out.data().iter().zip(h.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn output_is_bounded_by_previous_state_and_one() {
        let t = toy(3);
        let h = Tensor::from_rows(&[[3.0, -2.5, 0.1, 0.0]; 4]);
        let out = run(&t, &t.store, &h);
        for (r, &o) in out.data().iter().enumerate() {
            let bound = h.data()[r].abs().max(1.0);
            assert!(o.abs() <= bound + 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let t = toy(4);
        let h = Tensor::from_rows(&[[0.2, -0.4, 0.6, 0.1], [0.0, 0.3, -0.2, 0.5], [0.7, 0.1, 0.0, -0.3], [0.1, 0.1, 0.1, 0.1]]);
        let loss_of = |store: &ParamStore| run(&t, store, &h).sum();
        let mut tape = Tape::new();
        let a = tape.constant(t.a_hat.clone());
        let x = tape.constant(t.x.clone());
        let z = tape.constant(t.z.clone());
        let hp = tape.constant(h.clone());
        let out = gcrn_step(&mut tape, &t.store, &t.cell, a, x, z, hp).unwrap();
        let loss = tape.sum(out).unwrap();
        let grads = tape.backward(loss, &t.store).unwrap();
        assert_grads_match(&t.store, &grads, &loss_of, 1e-4);
    }

    #[test]
    fn rejects_mismatched_hidden_width() {
        let t = toy(5);
        let mut tape = Tape::new();
        let a = tape.constant(t.a_hat.clone());
        let x = tape.constant(t.x.clone());
        let z = tape.constant(t.z.clone());
        let hp = tape.constant(Tensor::zeros(4, 6));
        assert!(gcrn_step(&mut tape, &t.store, &t.cell, a, x, z, hp).is_err());
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(GcrnParams::new(&mut store, "g", 4, 3, 5, &mut rng).is_err());
    }
}
