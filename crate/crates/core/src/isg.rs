//! Stage one: the informative subgraph generator.
//!
//! A variational recurrent graph autoencoder is trained on every snapshot
//! while its embeddings are pushed toward those of a random graph with the
//! same size. Edges the resulting model reconstructs worst form the
//! informative subgraph of each snapshot.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffmath::{sigmoid, Adam, Linear, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::{
    erdos_renyi_like, informative_count, normalize_adjacency, pair_capacity, sample_non_edges, DynamicGraph, Edge,
    Snapshot, SubgraphSplit,
};
use crate::model::{kl_divergence, standard_normal, FeatureSource, Gaussian, PriorNet, VariationalEncoder};
use crate::temporal::GcrnParams;

/// Value written in place of self-similarities before the row softmax.
const MASKED_LOGIT: f64 = -1e30;

#[derive(Clone, Debug, PartialEq)]
pub struct IsgConfig {
    pub embed_dim: usize,
    /// Width of the recurrent state and of the encoder's first layer.
    pub hidden: usize,
    pub epochs: usize,
    pub lambda: f64,
    pub tau: f64,
    pub ratio: f64,
    pub lr: f64,
    pub seed: u64,
    /// Score every node pair instead of positives plus sampled negatives.
    pub dense_bce: bool,
}

impl Default for IsgConfig {
    fn default() -> Self {
        IsgConfig {
            embed_dim: 32,
            hidden: 32,
            epochs: 100,
            lambda: 0.5,
            tau: 0.7,
            ratio: 0.1,
            lr: 1e-3,
            seed: 0,
            dense_bce: false,
        }
    }
}

/// Largest graph for which dense reconstruction is allowed.
pub const DENSE_BCE_MAX_NODES: usize = 2000;

impl IsgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::config("embed_dim", "must be positive"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config("tau", format!("{} must be positive", self.tau)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda", format!("{} must be non-negative", self.lambda)));
        }
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::config("r", format!("{} is outside (0, 1]", self.ratio)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("learning_rate", format!("{} must be positive", self.lr)));
        }
        Ok(())
    }
}

/// Parameter layout of the generator. Values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct IsgParams {
    pub features: FeatureSource,
    /// Shared by the original and the noise-graph path.
    pub encoder: VariationalEncoder,
    pub prior: PriorNet,
    pub decoder_hidden: Linear,
    pub decoder_out: Linear,
    pub gcrn: GcrnParams,
    pub tau: f64,
    pub lambda: f64,
    pub embed_dim: usize,
}

/// Reconstruction probability per edge of one snapshot.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EdgeScoreMatrix {
    scores: BTreeMap<Edge, f64>,
}

impl EdgeScoreMatrix {
    pub fn new(scores: BTreeMap<Edge, f64>) -> Result<Self> {
        if let Some((e, v)) = scores.iter().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain {
                op: "edge scores",
                detail: format!("score {v} for {e:?} is outside [0, 1]"),
            });
        }
        Ok(EdgeScoreMatrix { scores })
    }

    pub fn get(&self, e: Edge) -> Option<f64> {
        self.scores.get(&e).copied()
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Edge, f64)> + '_ {
        self.scores.iter().map(|(&e, &v)| (e, v))
    }
}

/// Inputs of one snapshot that stay fixed during training.
#[derive(Clone, Debug)]
pub struct SnapshotInputs {
    pub a_hat: Tensor,
    pub a_hat_noise: Tensor,
    pub active: Vec<usize>,
    pub positives: Vec<Edge>,
    /// Every active non-edge when dense reconstruction is on.
    pub dense_negatives: Option<Vec<Edge>>,
}

impl SnapshotInputs {
    pub fn new<R: Rng + ?Sized>(s: &Snapshot, dense: bool, rng: &mut R) -> Result<Self> {
        let noise = erdos_renyi_like(s, rng)?;
        let active = s.active_nodes();
        let dense_negatives = dense.then(|| {
            let mut out = Vec::new();
            for (i, &u) in active.iter().enumerate() {
                for &v in &active[i + 1..] {
                    if !s.contains((u, v)) {
                        out.push((u, v));
                    }
                }
            }
            out
        });
        Ok(SnapshotInputs {
            a_hat: normalize_adjacency(s),
            a_hat_noise: normalize_adjacency(&noise),
            active,
            positives: s.edges().to_vec(),
            dense_negatives,
        })
    }
}

/// Randomness drawn afresh for every epoch.
#[derive(Clone, Debug)]
pub struct EpochNoise {
    pub eps: Vec<Tensor>,
    pub eps_noise: Vec<Tensor>,
    pub negatives: Vec<Vec<Edge>>,
}

impl EpochNoise {
    pub fn draw<R: Rng + ?Sized>(
        snapshots: &[Snapshot],
        inputs: &[SnapshotInputs],
        embed_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut eps = Vec::with_capacity(snapshots.len());
        let mut eps_noise = Vec::with_capacity(snapshots.len());
        let mut negatives = Vec::with_capacity(snapshots.len());
        for (s, inp) in snapshots.iter().zip(inputs) {
            let n = s.num_nodes();
            eps.push(standard_normal(rng, n, embed_dim));
            eps_noise.push(standard_normal(rng, n, embed_dim));
            let neg = match &inp.dense_negatives {
                Some(all) => all.clone(),
                None => {
                    let free = pair_capacity(inp.active.len()) - s.num_edges();
                    sample_non_edges(s, s.num_edges().min(free), &HashSet::new(), rng)?
                }
            };
            negatives.push(neg);
        }
        Ok(EpochNoise {
            eps,
            eps_noise,
            negatives,
        })
    }
}

/// Per-snapshot quantities of one forward pass over the sequence.
#[derive(Clone, Debug)]
pub struct SequencePass {
    pub loss: Var,
    pub reconstruction: Vec<Var>,
    pub infonce: Vec<Var>,
    pub z: Vec<Var>,
}

impl IsgParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, g: &DynamicGraph, cfg: &IsgConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let features = FeatureSource::new(g, store, "isg", rng);
        let feat_dim = g.features().dim(g.n_global());
        let gcrn = GcrnParams::new(store, "isg.gcrn", feat_dim, cfg.embed_dim, cfg.hidden, rng)?;
        let enc_in = cfg.hidden / 2 + cfg.hidden;
        let d = cfg.embed_dim;
        Ok(IsgParams {
            features,
            encoder: VariationalEncoder::new(store, "isg.enc", enc_in, cfg.hidden, d, rng),
            prior: PriorNet::new(store, "isg.prior", cfg.hidden, d, rng),
            decoder_hidden: Linear::new(store, "isg.dec1", d, d, rng),
            decoder_out: Linear::new(store, "isg.dec2", d, d, rng),
            gcrn,
            tau: cfg.tau,
            lambda: cfg.lambda,
            embed_dim: d,
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.gcrn.hidden
    }

    /// Posterior over embeddings of the observed snapshot.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, a_hat: Var, fx: Var, h_prev: Var) -> Result<Gaussian> {
        self.encoder.forward(tape, store, a_hat, fx, h_prev)
    }

    /// Posterior over embeddings of the noise graph, same weights.
    pub fn encode_noisy(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        a_hat_noise: Var,
        fx: Var,
        h_prev: Var,
    ) -> Result<Gaussian> {
        self.encode(tape, store, a_hat_noise, fx, h_prev)
    }

    pub fn prior(&self, tape: &mut Tape, store: &ParamStore, h_prev: Var) -> Result<Gaussian> {
        self.prior.forward(tape, store, h_prev)
    }

    /// The two-layer perceptron `f` applied to every embedding row.
    pub fn decoder(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Result<Var> {
        let h = self.decoder_hidden.forward(tape, store, z)?;
        let h = tape.relu(h);
        self.decoder_out.forward(tape, store, h)
    }

    /// Logits `f(z_u) . f(z_v)` for the given pairs, as a column.
    pub fn pair_logits(&self, tape: &mut Tape, store: &ParamStore, z: Var, pairs: &[Edge]) -> Result<Var> {
        let f = self.decoder(tape, store, z)?;
        tape.pair_dots(f, pairs)
    }

    /// Runs the recurrence over `snapshots` and returns the full loss.
    pub fn sequence_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        snapshots: &[Snapshot],
        inputs: &[SnapshotInputs],
        noise: &EpochNoise,
    ) -> Result<SequencePass> {
        let x = self.features.var(tape, store);
        let fx = self.gcrn.extract_features(tape, store, x)?;
        let n = tape.shape(x).0;
        let mut h = tape.constant(Tensor::zeros(n, self.hidden_dim()));
        let mut total: Option<Var> = None;
        let mut pass = SequencePass {
            loss: h,
            reconstruction: Vec::new(),
            infonce: Vec::new(),
            z: Vec::new(),
        };
        for (t, (s, inp)) in snapshots.iter().zip(inputs).enumerate() {
            let a = tape.constant(inp.a_hat.clone());
            let a_noise = tape.constant(inp.a_hat_noise.clone());
            let q = self.encode(tape, store, a, fx, h)?;
            let q_noise = self.encode_noisy(tape, store, a_noise, fx, h)?;
            let p = self.prior(tape, store, h)?;
            let z = tape.reparameterize(q.mu, q.logvar, noise.eps[t].clone())?;
            let z_noise = tape.reparameterize(q_noise.mu, q_noise.logvar, noise.eps_noise[t].clone())?;

            let l1 = self.reconstruction_elbo(tape, store, s, z, &noise.negatives[t], &q, &p)?;
            let mut step = l1;
            pass.reconstruction.push(l1);
            if !inp.active.is_empty() {
                let l2 = infonce_loss(tape, z, z_noise, &inp.active, self.tau)?;
                pass.infonce.push(l2);
                if self.lambda != 0.0 {
                    let weighted = tape.scale(l2, -self.lambda);
                    step = tape.add(step, weighted)?;
                }
            }
            total = Some(match total {
                None => step,
                Some(acc) => tape.add(acc, step)?,
            });
            pass.z.push(z);
            h = self.gcrn.step_with_features(tape, store, a, fx, z, h)?;
        }
        pass.loss = total.ok_or(Error::Empty("snapshot sequence"))?;
        Ok(pass)
    }

    /// `KL(q || p)` over active nodes plus the cross-entropy of the
    /// snapshot's edges against `negatives`.
    #[allow(clippy::too_many_arguments)]
    pub fn reconstruction_elbo(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        s: &Snapshot,
        z: Var,
        negatives: &[Edge],
        q: &Gaussian,
        p: &Gaussian,
    ) -> Result<Var> {
        let active = s.active_nodes();
        let kl = if active.is_empty() {
            tape.constant(Tensor::scalar(0.0))
        } else {
            let qa = q.rows(tape, &active)?;
            let pa = p.rows(tape, &active)?;
            kl_divergence(tape, &qa, &pa)?
        };
        let mut pairs: Vec<Edge> = s.edges().to_vec();
        pairs.extend_from_slice(negatives);
        if pairs.is_empty() {
            return Ok(kl);
        }
        let mut labels = vec![1.0; s.num_edges()];
        labels.resize(pairs.len(), 0.0);
        let logits = self.pair_logits(tape, store, z, &pairs)?;
        let bce = tape.bce_sum(logits, &labels)?;
        tape.add(kl, bce)
    }

    /// Deterministic pass with posterior means: scores every edge of each
    /// snapshot and returns `(scores, means)` per snapshot.
    pub fn score_snapshots(&self, store: &ParamStore, snapshots: &[Snapshot]) -> Result<Vec<(EdgeScoreMatrix, Tensor)>> {
        let mut tape = Tape::new();
        let x = self.features.var(&mut tape, store);
        let fx = self.gcrn.extract_features(&mut tape, store, x)?;
        let n = tape.shape(x).0;
        let mut h = tape.constant(Tensor::zeros(n, self.hidden_dim()));
        let mut out = Vec::with_capacity(snapshots.len());
        for s in snapshots {
            let a = tape.constant(normalize_adjacency(s));
            let q = self.encode(&mut tape, store, a, fx, h)?;
            let mu = tape.value(q.mu).clone();
            out.push((self.decode_probabilistic(store, &mu, s.edges())?, mu));
            h = self.gcrn.step_with_features(&mut tape, store, a, fx, q.mu, h)?;
        }
        Ok(out)
    }

    /// Edge probabilities `sigmoid(f(z_u) . f(z_v))`.
    pub fn decode_probabilistic(&self, store: &ParamStore, z: &Tensor, edges: &[Edge]) -> Result<EdgeScoreMatrix> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let logits = self.pair_logits(&mut tape, store, zv, edges)?;
        let scores = edges
            .iter()
            .zip(tape.value(logits).data())
            .map(|(&e, &l)| (e, sigmoid(l)))
            .collect();
        EdgeScoreMatrix::new(scores)
    }

    /// Splits every snapshot using the current weights.
    pub fn generate_splits(&self, store: &ParamStore, snapshots: &[Snapshot], ratio: f64) -> Result<Vec<SubgraphSplit>> {
        self.score_snapshots(store, snapshots)?
            .into_iter()
            .zip(snapshots)
            .map(|((scores, _), s)| {
                if s.num_edges() == 0 {
                    SubgraphSplit::from_informative(s, Vec::new(), ratio)
                } else {
                    select_subgraphs(s, &scores, ratio)
                }
            })
            .collect()
    }
}

/// Mean InfoNCE term over the `active` anchors with cosine similarity at
/// temperature `tau`. Positives are the same node's noise-graph embedding;
/// negatives are every other node in both views.
pub fn infonce_loss(tape: &mut Tape, z: Var, z_noise: Var, active: &[usize], tau: f64) -> Result<Var> {
    if tape.shape(z) != tape.shape(z_noise) {
        return Err(Error::shape("infonce", tape.shape(z), tape.shape(z_noise)));
    }
    if !(tau > 0.0) {
        return Err(Error::config("tau", format!("{tau} must be positive")));
    }
    if active.is_empty() {
        return Err(Error::Empty("infonce anchors"));
    }
    let za = tape.gather_rows(z, active)?;
    let zr = tape.gather_rows(z_noise, active)?;
    let za = tape.row_normalize(za);
    let zr = tape.row_normalize(zr);
    let zr_t = tape.transpose(zr);
    let za_t = tape.transpose(za);
    let cross = tape.matmul(za, zr_t)?;
    let cross = tape.scale(cross, 1.0 / tau);
    let own = tape.matmul(za, za_t)?;
    let own = tape.scale(own, 1.0 / tau);
    let own = tape.fill_diagonal(own, MASKED_LOGIT)?;
    let positive = tape.diag(cross)?;
    let all = tape.concat_cols(cross, own)?;
    let denom = tape.log_sum_exp_rows(all)?;
    let terms = tape.sub(positive, denom)?;
    tape.mean(terms)
}

/// The `max(1, round(r |E|))` edges with the lowest scores, ties broken by
/// ascending edge order.
pub fn select_subgraphs(s: &Snapshot, scores: &EdgeScoreMatrix, ratio: f64) -> Result<SubgraphSplit> {
    if s.num_edges() == 0 {
        return Err(Error::Empty("snapshot edges"));
    }
    if scores.len() != s.num_edges() || s.edges().iter().any(|e| scores.get(*e).is_none()) {
        return Err(Error::InvalidSnapshot(format!(
            "{} scores for {} edges",
            scores.len(),
            s.num_edges()
        )));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::config("r", format!("{ratio} is outside (0, 1]")));
    }
    let mut ranked: Vec<(Edge, f64)> = scores.iter().collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let k = informative_count(s.num_edges(), ratio);
    let chosen = ranked[..k].iter().map(|&(e, _)| e).collect();
    SubgraphSplit::from_informative(s, chosen, ratio)
}

/// Result of stage-one training.
#[derive(Clone, Debug)]
pub struct TrainedIsg {
    pub params: IsgParams,
    pub store: ParamStore,
    pub splits: Vec<SubgraphSplit>,
    /// Full-sequence loss before each optimizer step.
    pub loss_history: Vec<f64>,
}

/// Trains the generator on every snapshot of `g` and splits each one.
pub fn train_isg(g: &DynamicGraph, cfg: &IsgConfig) -> Result<TrainedIsg> {
    cfg.validate()?;
    if cfg.dense_bce && g.n_global() > DENSE_BCE_MAX_NODES {
        return Err(Error::config(
            "dense_bce",
            format!("{} nodes exceed the limit of {DENSE_BCE_MAX_NODES}", g.n_global()),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let params = IsgParams::new(&mut store, g, cfg, &mut rng)?;
    let snapshots = g.snapshots();
    let inputs = snapshots
        .iter()
        .map(|s| SnapshotInputs::new(s, cfg.dense_bce, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let mut adam = Adam::new(&store, cfg.lr);
    let mut loss_history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let noise = EpochNoise::draw(snapshots, &inputs, cfg.embed_dim, &mut rng)?;
        let mut tape = Tape::new();
        let pass = params.sequence_loss(&mut tape, &store, snapshots, &inputs, &noise)?;
        let loss = tape.value(pass.loss).item();
        if !loss.is_finite() {
            return Err(Error::Domain {
                op: "train_isg",
                detail: format!("loss became {loss} at epoch {epoch}"),
            });
        }
        loss_history.push(loss);
        let grads = tape.backward(pass.loss, &store)?;
        adam.step(&mut store, &grads)?;
        debug!("isg epoch {epoch}: loss {loss:.4}");
    }
    let splits = params.generate_splits(&store, snapshots, cfg.ratio)?;
    info!(
        "isg trained for {} epochs; {} informative edges selected",
        cfg.epochs,
        splits.iter().map(|s| s.informative().len()).sum::<usize>()
    );
    Ok(TrainedIsg {
        params,
        store,
        splits,
        loss_history,
    })
}

/// Writes splits as `<snapshot> <u> <v> <I|B>` lines with original node ids.
pub fn write_splits<W: Write>(g: &DynamicGraph, splits: &[SubgraphSplit], mut out: W) -> Result<()> {
    let ids = g.node_ids();
    writeln!(out, "# snapshot src dst I|B")?;
    for (t, split) in splits.iter().enumerate() {
        let mut rows: Vec<(Edge, char)> = split.informative().iter().map(|&e| (e, 'I')).collect();
        rows.extend(split.bias().iter().map(|&e| (e, 'B')));
        rows.sort_unstable();
        for ((u, v), tag) in rows {
            writeln!(out, "{t} {} {} {tag}", ids[u], ids[v])?;
        }
    }
    Ok(())
}

/// Reads the format of [`write_splits`] back against `g`.
pub fn parse_splits(text: &str, g: &DynamicGraph, ratio: f64) -> Result<Vec<SubgraphSplit>> {
    let index: BTreeMap<u64, usize> = g.node_ids().iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut informative: Vec<Vec<Edge>> = vec![Vec::new(); g.len()];
    let mut seen: Vec<HashSet<Edge>> = vec![HashSet::new(); g.len()];
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("");
        let toks: Vec<&str> = body.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Parse { line, msg };
        if toks.len() != 4 {
            return Err(bad(format!("expected 4 fields, found {}", toks.len())));
        }
        let t: usize = toks[0].parse().map_err(|_| bad(format!("bad snapshot `{}`", toks[0])))?;
        if t >= g.len() {
            return Err(bad(format!("snapshot {t} out of range")));
        }
        let node = |tok: &str| -> Result<usize> {
            let id: u64 = tok.parse().map_err(|_| bad(format!("bad node id `{tok}`")))?;
            index.get(&id).copied().ok_or_else(|| bad(format!("unknown node {id}")))
        };
        let e = crate::graph::edge(node(toks[1])?, node(toks[2])?);
        if !g.snapshot(t).contains(e) {
            return Err(bad(format!("{e:?} is not an edge of snapshot {t}")));
        }
        match toks[3] {
            "I" => informative[t].push(e),
            "B" => {}
            other => return Err(bad(format!("tag must be I or B, found `{other}`"))),
        }
        seen[t].insert(e);
    }
    g.snapshots()
        .iter()
        .zip(informative)
        .zip(seen)
        .enumerate()
        .map(|(t, ((s, inf), seen))| {
            if seen.len() != s.num_edges() {
                return Err(Error::InvalidSnapshot(format!(
                    "snapshot {t}: {} of {} edges labelled",
                    seen.len(),
                    s.num_edges()
                )));
            }
            SubgraphSplit::from_informative(s, inf, ratio)
        })
        .collect()
}
