//! Finite-difference oracle shared by unit tests.

use crate::diffmath::{Gradients, ParamStore, Tensor};

/// Central-difference gradient of `f` w.r.t. every entry of every parameter.
pub fn fd_grads(store: &ParamStore, h: f64, f: &dyn Fn(&ParamStore) -> f64) -> Vec<Tensor> {
    store
        .ids()
        .map(|id| {
            let base = store.get(id).clone();
            let mut out = Tensor::zeros(base.rows(), base.cols());
            let mut s = store.clone();
            for k in 0..base.len() {
                s.get_mut(id).data_mut()[k] = base.data()[k] + h;
                let plus = f(&s);
                s.get_mut(id).data_mut()[k] = base.data()[k] - h;
                let minus = f(&s);
                s.get_mut(id).data_mut()[k] = base.data()[k];
                out.data_mut()[k] = (plus - minus) / (2.0 * h);
            }
            out
        })
        .collect()
}

/// Max entrywise relative error, with absolute error used for near-zero
/// entries.
pub fn max_rel_err(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Asserts analytic and numeric gradients agree for every parameter.
pub fn assert_grads_match(store: &ParamStore, analytic: &Gradients, f: &dyn Fn(&ParamStore) -> f64, tol: f64) {
    let numeric = fd_grads(store, 1e-5, f);
    for (id, fd) in store.ids().zip(&numeric) {
        let err = max_rel_err(analytic.get(id), fd);
        assert!(err < tol, "{}: relative error {err:e}", store.name(id));
    }
}

/// Moves every parameter off zero so no rectifier sits at its kink.
pub fn jitter(store: &mut ParamStore, seed: u64) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for id in store.ids().collect::<Vec<_>>() {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
    }
}
