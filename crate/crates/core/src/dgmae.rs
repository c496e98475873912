//! Stage two: masked autoencoding of the bias subgraph.
//!
//! Each snapshot is encoded from its informative edges only, and the model
//! is trained to recover the masked bias edges with a softmax over nodes.

use std::io::Write;

use log::{debug, info, warn};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffmath::{dot, sigmoid, Adam, Linear, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::{normalize_edges, DynamicGraph, Edge, Snapshot, SubgraphSplit};
use crate::model::{kl_divergence, standard_normal, FeatureSource, Gaussian, PriorNet, VariationalEncoder};
use crate::temporal::GcrnParams;

/// Candidate count of the sampled softmax.
pub const SAMPLED_SOFTMAX_CANDIDATES: usize = 512;

#[derive(Clone, Debug, PartialEq)]
pub struct DgmaeConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Replace the softmax over all active nodes by one over
    /// [`SAMPLED_SOFTMAX_CANDIDATES`] uniform candidates plus the targets.
    pub sampled_softmax: bool,
}

impl Default for DgmaeConfig {
    fn default() -> Self {
        DgmaeConfig {
            embed_dim: 32,
            hidden: 32,
            epochs: 1000,
            lr: 1e-3,
            seed: 0,
            sampled_softmax: false,
        }
    }
}

impl DgmaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::config("embed_dim", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("learning_rate", format!("{} must be positive", self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct DgmaeParams {
    pub features: FeatureSource,
    pub encoder: VariationalEncoder,
    pub prior: PriorNet,
    /// Single GCN layer applied before the inner-product decoder.
    pub decoder: Linear,
    pub gcrn: GcrnParams,
    pub embed_dim: usize,
}

/// Node embeddings per snapshot, with the recurrent state after each one.
#[derive(Clone, Debug, PartialEq)]
pub struct Representation {
    pub z: Vec<Tensor>,
    pub hidden: Vec<Tensor>,
}

impl Representation {
    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn embed_dim(&self) -> usize {
        self.z.first().map_or(0, Tensor::cols)
    }
}

/// `sigmoid(z_u . z_v)`. Both nodes must be active in `active`, the mask of
/// the snapshot being evaluated.
pub fn link_score(z: &Tensor, active: &[bool], u: usize, v: usize) -> Result<f64> {
    for node in [u, v] {
        if !active.get(node).copied().unwrap_or(false) {
            return Err(Error::InactiveNode { node });
        }
    }
    Ok(sigmoid(dot(z.row(u), z.row(v))))
}

/// Fixed per-snapshot inputs of stage two.
#[derive(Clone, Debug)]
pub struct MaskedInputs {
    /// Normalized adjacency of the informative edges.
    pub a_hat: Tensor,
    pub active: Vec<usize>,
    /// Each bias edge in both directions.
    pub targets: Vec<Edge>,
}

impl MaskedInputs {
    pub fn new(s: &Snapshot, split: &SubgraphSplit) -> Self {
        let targets = split.bias().iter().flat_map(|&(u, v)| [(u, v), (v, u)]).collect();
        MaskedInputs {
            a_hat: normalize_edges(s.num_nodes(), s.active(), split.informative()),
            active: s.active_nodes(),
            targets,
        }
    }
}

/// Candidate nodes of the softmax denominator for each snapshot, plus
/// the reparameterization noise, drawn per epoch.
#[derive(Clone, Debug)]
pub struct MaskedNoise {
    pub eps: Vec<Tensor>,
    pub candidates: Vec<Vec<usize>>,
}

impl MaskedNoise {
    pub fn draw<R: Rng + ?Sized>(inputs: &[MaskedInputs], n: usize, embed_dim: usize, sampled: bool, rng: &mut R) -> Self {
        let mut eps = Vec::with_capacity(inputs.len());
        let mut candidates = Vec::with_capacity(inputs.len());
        for inp in inputs {
            eps.push(standard_normal(rng, n, embed_dim));
            if sampled && inp.active.len() > SAMPLED_SOFTMAX_CANDIDATES {
                let mut c: Vec<usize> = sample(rng, inp.active.len(), SAMPLED_SOFTMAX_CANDIDATES)
                    .into_iter()
                    .map(|i| inp.active[i])
                    .collect();
                c.extend(inp.targets.iter().map(|&(_, u)| u));
                c.sort_unstable();
                c.dedup();
                candidates.push(c);
            } else {
                candidates.push(inp.active.clone());
            }
        }
        MaskedNoise { eps, candidates }
    }
}

#[derive(Clone, Debug)]
pub struct MaskedPass {
    pub loss: Var,
    pub reconstruction: Vec<Option<Var>>,
    pub kl: Vec<Var>,
}

impl DgmaeParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, g: &DynamicGraph, cfg: &DgmaeConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let features = FeatureSource::new(g, store, "dgmae", rng);
        let feat_dim = g.features().dim(g.n_global());
        let gcrn = GcrnParams::new(store, "dgmae.gcrn", feat_dim, cfg.embed_dim, cfg.hidden, rng)?;
        let d = cfg.embed_dim;
        Ok(DgmaeParams {
            features,
            encoder: VariationalEncoder::new(store, "dgmae.enc", cfg.hidden / 2 + cfg.hidden, cfg.hidden, d, rng),
            prior: PriorNet::new(store, "dgmae.prior", cfg.hidden, d, rng),
            decoder: Linear::new(store, "dgmae.dec", d, d, rng),
            gcrn,
            embed_dim: d,
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.gcrn.hidden
    }

    /// Posterior and prior for one snapshot given its informative adjacency.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        a_hat: Var,
        fx: Var,
        h_prev: Var,
    ) -> Result<(Gaussian, Gaussian)> {
        let q = self.encoder.forward(tape, store, a_hat, fx, h_prev)?;
        let p = self.prior.forward(tape, store, h_prev)?;
        Ok((q, p))
    }

    /// Mean over directed bias edges `(v, u)` of the softmax cross-entropy
    /// of `u` among `candidates`, scored by `g(v, w) = P_v . P_w` with
    /// `P = A_I Z W + b`. `None` when there are no targets.
    pub fn bias_reconstruction(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        a_hat: Var,
        z: Var,
        targets: &[Edge],
        candidates: &[usize],
    ) -> Result<Option<Var>> {
        if targets.is_empty() {
            return Ok(None);
        }
        if candidates.is_empty() {
            return Err(Error::Empty("softmax candidates"));
        }
        let mut sources: Vec<usize> = targets.iter().map(|&(v, _)| v).collect();
        sources.sort_unstable();
        sources.dedup();
        let col_of = |u: usize| candidates.binary_search(&u);
        let mut cells = Vec::with_capacity(targets.len());
        let mut rows = Vec::with_capacity(targets.len());
        for &(v, u) in targets {
            let r = sources.binary_search(&v).expect("source listed");
            let c = col_of(u).map_err(|_| Error::InvalidSnapshot(format!("target {u} is not a candidate")))?;
            cells.push((r, c));
            rows.push(r);
        }
        let p = self.decoder.convolve(tape, store, a_hat, z)?;
        let ps = tape.gather_rows(p, &sources)?;
        let pc = tape.gather_rows(p, candidates)?;
        let pc_t = tape.transpose(pc);
        let logits = tape.matmul(ps, pc_t)?;
        let lse = tape.log_sum_exp_rows(logits)?;
        let lse = tape.gather_rows(lse, &rows)?;
        let target = tape.gather_elements(logits, &cells)?;
        let nll = tape.sub(lse, target)?;
        Ok(Some(tape.mean(nll)?))
    }

    /// Full stage-two loss over the sequence.
    pub fn sequence_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        inputs: &[MaskedInputs],
        noise: &MaskedNoise,
    ) -> Result<MaskedPass> {
        let x = self.features.var(tape, store);
        let fx = self.gcrn.extract_features(tape, store, x)?;
        let n = tape.shape(x).0;
        let mut h = tape.constant(Tensor::zeros(n, self.hidden_dim()));
        let mut total: Option<Var> = None;
        let mut reconstruction = Vec::with_capacity(inputs.len());
        let mut kls = Vec::with_capacity(inputs.len());
        for (t, inp) in inputs.iter().enumerate() {
            let a = tape.constant(inp.a_hat.clone());
            let (q, p) = self.encode(tape, store, a, fx, h)?;
            let z = tape.reparameterize(q.mu, q.logvar, noise.eps[t].clone())?;
            let mut step = if inp.active.is_empty() {
                tape.constant(Tensor::scalar(0.0))
            } else {
                let qa = q.rows(tape, &inp.active)?;
                let pa = p.rows(tape, &inp.active)?;
                let kl = kl_divergence(tape, &qa, &pa)?;
                tape.scale(kl, 1.0 / inp.active.len() as f64)
            };
            kls.push(step);
            let rec = self.bias_reconstruction(tape, store, a, z, &inp.targets, &noise.candidates[t])?;
            if let Some(r) = rec {
                step = tape.add(step, r)?;
            }
            reconstruction.push(rec);
            total = Some(match total {
                None => step,
                Some(acc) => tape.add(acc, step)?,
            });
            h = self.gcrn.step_with_features(tape, store, a, fx, z, h)?;
        }
        Ok(MaskedPass {
            loss: total.ok_or(Error::Empty("snapshot sequence"))?,
            reconstruction,
            kl: kls,
        })
    }

    /// Posterior means for every snapshot, carrying the recurrence on them.
    pub fn infer(&self, store: &ParamStore, snapshots: &[Snapshot], splits: &[SubgraphSplit]) -> Result<Representation> {
        if snapshots.len() != splits.len() {
            return Err(Error::InvalidSnapshot(format!(
                "{} splits for {} snapshots",
                splits.len(),
                snapshots.len()
            )));
        }
        let mut tape = Tape::new();
        let x = self.features.var(&mut tape, store);
        let fx = self.gcrn.extract_features(&mut tape, store, x)?;
        let n = tape.shape(x).0;
        let mut h = tape.constant(Tensor::zeros(n, self.hidden_dim()));
        let mut rep = Representation {
            z: Vec::with_capacity(snapshots.len()),
            hidden: Vec::with_capacity(snapshots.len()),
        };
        for (s, split) in snapshots.iter().zip(splits) {
            let inp = MaskedInputs::new(s, split);
            let a = tape.constant(inp.a_hat);
            let q = self.encoder.forward(&mut tape, store, a, fx, h)?;
            h = self.gcrn.step_with_features(&mut tape, store, a, fx, q.mu, h)?;
            rep.z.push(tape.value(q.mu).clone());
            rep.hidden.push(tape.value(h).clone());
        }
        Ok(rep)
    }
}

#[derive(Clone, Debug)]
pub struct TrainedDgmae {
    pub params: DgmaeParams,
    pub store: ParamStore,
    pub representation: Representation,
    pub loss_history: Vec<f64>,
}

/// Trains stage two on `g` masked by `splits` and returns the final means.
pub fn train_dgmae(g: &DynamicGraph, splits: &[SubgraphSplit], cfg: &DgmaeConfig) -> Result<TrainedDgmae> {
    cfg.validate()?;
    if splits.len() != g.len() {
        return Err(Error::InvalidSnapshot(format!("{} splits for {} snapshots", splits.len(), g.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let params = DgmaeParams::new(&mut store, g, cfg, &mut rng)?;
    let inputs: Vec<MaskedInputs> = g
        .snapshots()
        .iter()
        .zip(splits)
        .map(|(s, split)| MaskedInputs::new(s, split))
        .collect();
    for (t, inp) in inputs.iter().enumerate() {
        if inp.targets.is_empty() {
            warn!("snapshot {t} has no bias edges; only its KL term is trained");
        }
    }
    let mut adam = Adam::new(&store, cfg.lr);
    let mut loss_history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let noise = MaskedNoise::draw(&inputs, g.n_global(), cfg.embed_dim, cfg.sampled_softmax, &mut rng);
        let mut tape = Tape::new();
        let pass = params.sequence_loss(&mut tape, &store, &inputs, &noise)?;
        let loss = tape.value(pass.loss).item();
        if !loss.is_finite() {
            return Err(Error::Domain {
                op: "train_dgmae",
                detail: format!("loss became {loss} at epoch {epoch}"),
            });
        }
        loss_history.push(loss);
        let grads = tape.backward(pass.loss, &store)?;
        adam.step(&mut store, &grads)?;
        if epoch % 100 == 0 {
            debug!("dgmae epoch {epoch}: loss {loss:.4}");
        }
    }
    let representation = params.infer(&store, g.snapshots(), splits)?;
    info!("dgmae trained for {} epochs", cfg.epochs);
    Ok(TrainedDgmae {
        params,
        store,
        representation,
        loss_history,
    })
}

/// Per snapshot: a header `t n D`, then `n` rows of `D` reals.
pub fn write_representation<W: Write>(rep: &Representation, mut out: W) -> Result<()> {
    for (t, z) in rep.z.iter().enumerate() {
        writeln!(out, "{t} {} {}", z.rows(), z.cols())?;
        for r in 0..z.rows() {
            let row: Vec<String> = z.row(r).iter().map(|v| format!("{v:e}")).collect();
            writeln!(out, "{}", row.join(" "))?;
        }
    }
    Ok(())
}

/// Reads the embeddings written by [`write_representation`]; hidden states
/// are not part of the format and come back empty.
pub fn parse_representation(text: &str) -> Result<Representation> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let mut z = Vec::new();
    while let Some((i, header)) = lines.next() {
        let bad = |line: usize, msg: String| Error::Parse { line: line + 1, msg };
        let h: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| bad(i, format!("bad header field `{t}`"))))
            .collect::<Result<_>>()?;
        if h.len() != 3 || h[0] != z.len() {
            return Err(bad(i, format!("expected header `{} n D`", z.len())));
        }
        let (n, d) = (h[1], h[2]);
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            let (j, row) = lines.next().ok_or_else(|| bad(i, "truncated block".into()))?;
            let vals: Vec<f64> = row
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| bad(j, format!("not a real: `{t}`"))))
                .collect::<Result<_>>()?;
            if vals.len() != d {
                return Err(bad(j, format!("expected {d} values, found {}", vals.len())));
            }
            data.extend(vals);
        }
        z.push(Tensor::from_vec(n, d, data)?);
    }
    Ok(Representation { z, hidden: Vec::new() })
}
