//! Pieces shared by both training stages: feature input, the variational
//! two-layer GCN encoder and the recurrent prior network.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffmath::{glorot, Linear, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::Result;
use crate::graph::{DynamicGraph, Features};

/// Diagonal Gaussian over node embeddings, as tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    pub mu: Tensor,
    pub logvar: Tensor,
}

/// Diagonal Gaussian recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct Gaussian {
    pub mu: Var,
    pub logvar: Var,
}

impl Gaussian {
    pub fn values(&self, tape: &Tape) -> GaussianParams {
        GaussianParams {
            mu: tape.value(self.mu).clone(),
            logvar: tape.value(self.logvar).clone(),
        }
    }

    /// Restriction to the given node rows.
    pub fn rows(&self, tape: &mut Tape, idx: &[usize]) -> Result<Gaussian> {
        Ok(Gaussian {
            mu: tape.gather_rows(self.mu, idx)?,
            logvar: tape.gather_rows(self.logvar, idx)?,
        })
    }
}

/// `KL(q || p)` summed over all entries.
pub fn kl_divergence(tape: &mut Tape, q: &Gaussian, p: &Gaussian) -> Result<Var> {
    tape.gaussian_kl(q.mu, q.logvar, p.mu, p.logvar)
}

/// Where node features come from for one model.
#[derive(Clone, Debug)]
pub enum FeatureSource {
    Fixed(Tensor),
    Learned(ParamId),
}

impl FeatureSource {
    pub fn new<R: Rng + ?Sized>(g: &DynamicGraph, store: &mut ParamStore, name: &str, rng: &mut R) -> Self {
        let n = g.n_global();
        match g.features() {
            Features::Learnable { dim } => {
                FeatureSource::Learned(store.add(format!("{name}.features"), glorot(rng, n, *dim)))
            }
            other => FeatureSource::Fixed(other.materialize(n).expect("fixed features")),
        }
    }

    pub fn var(&self, tape: &mut Tape, store: &ParamStore) -> Var {
        match self {
            FeatureSource::Fixed(t) => tape.constant(t.clone()),
            FeatureSource::Learned(id) => tape.param(store, *id),
        }
    }
}

/// Two-layer GCN with a shared rectified first layer and linear mean and
/// log-variance heads.
#[derive(Clone, Debug)]
pub struct VariationalEncoder {
    pub shared: Linear,
    pub mu: Linear,
    pub logvar: Linear,
}

impl VariationalEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        embed_dim: usize,
        rng: &mut R,
    ) -> Self {
        VariationalEncoder {
            shared: Linear::new(store, &format!("{name}.gcn1"), in_dim, hidden, rng),
            mu: Linear::new(store, &format!("{name}.gcn_mu"), hidden, embed_dim, rng),
            logvar: Linear::new(store, &format!("{name}.gcn_logvar"), hidden, embed_dim, rng),
        }
    }

    /// Posterior over embeddings given the adjacency, extracted features and
    /// the previous hidden state.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, a_hat: Var, fx: Var, h_prev: Var) -> Result<Gaussian> {
        let input = tape.concat_cols(fx, h_prev)?;
        let h = self.shared.convolve(tape, store, a_hat, input)?;
        let h = tape.relu(h);
        Ok(Gaussian {
            mu: self.mu.convolve(tape, store, a_hat, h)?,
            logvar: self.logvar.convolve(tape, store, a_hat, h)?,
        })
    }
}

/// Prior `p(Z_t | H_{t-1})`: one rectified hidden layer and two linear heads.
#[derive(Clone, Debug)]
pub struct PriorNet {
    pub hidden: Linear,
    pub mu: Linear,
    pub logvar: Linear,
}

impl PriorNet {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, state_dim: usize, embed_dim: usize, rng: &mut R) -> Self {
        PriorNet {
            hidden: Linear::new(store, &format!("{name}.hidden"), state_dim, state_dim, rng),
            mu: Linear::new(store, &format!("{name}.mu"), state_dim, embed_dim, rng),
            logvar: Linear::new(store, &format!("{name}.logvar"), state_dim, embed_dim, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, h_prev: Var) -> Result<Gaussian> {
        let h = self.hidden.forward(tape, store, h_prev)?;
        let h = tape.relu(h);
        Ok(Gaussian {
            mu: self.mu.forward(tape, store, h)?,
            logvar: self.logvar.forward(tape, store, h)?,
        })
    }
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_vec(rows, cols, data).expect("sized by construction")
}

/// Sets every parameter of `store` to zero.
pub fn zero_params(store: &mut ParamStore) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}
