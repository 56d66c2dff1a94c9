//! Supervised linkage model: encoder MLP, Gaussian heads, decoder, losses,
//! the batch trainer and pairwise scoring.

use crate::autodiff::{Gradients, Optimizer, OptimizerKind, ParamId, ParamStore, Tape, Tensor, Var};
use crate::corpus::{EmbeddingTable, Link, NetworkPair, Side, SocialNetwork, Vocab};
use crate::encoder::{Encoder, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::gaussian::{self, GaussianEmbedding, GaussianVars, VARIANCE_FLOOR};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::time::Instant;

/// Distance used by the linkage loss and for scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    #[default]
    Wasserstein,
    Kl,
    /// Squared Euclidean distance between means; variances unused.
    Deterministic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Widths of the two encoder MLP layers; the decoder mirrors them.
    pub mlp_dims: [usize; 2],
    pub latent_dim: usize,
    /// Start the target network from a copy of the source initialization.
    pub mirror_init: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { encoder: EncoderConfig::default(), mlp_dims: [64, 32], latent_dim: 32, mirror_init: true }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.mlp_dims.contains(&0) || self.latent_dim == 0 {
            return Err(Error::Config("mlp_dims and latent_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Loss weights carried by a trained model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub beta: f64,
    pub distance: DistanceKind,
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 0.3, beta: 0.4, distance: DistanceKind::Wasserstein, temperature: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Identities per step: linked pairs plus unlinked identities.
    pub batch_size: usize,
    /// Share of the batch drawn from annotated pairs.
    pub annotation_fraction: f64,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub max_epochs: usize,
    pub tolerance: f64,
    pub convergence_window: usize,
    pub negatives_per_positive: usize,
    pub lambda: f64,
    pub beta: f64,
    pub distance: DistanceKind,
    pub temperature: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub max_grad_norm: f64,
    /// Keep the word embedding tables at their initial values.
    pub freeze_word_embeddings: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let loss = LossConfig::default();
        Self {
            batch_size: 64,
            annotation_fraction: 0.5,
            learning_rate: 5e-4,
            optimizer: OptimizerKind::Adam,
            max_epochs: 100,
            tolerance: 1e-4,
            convergence_window: 5,
            negatives_per_positive: 1,
            lambda: loss.lambda,
            beta: loss.beta,
            distance: loss.distance,
            temperature: loss.temperature,
            max_grad_norm: 0.0,
            freeze_word_embeddings: false,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if !(self.annotation_fraction > 0.0 && self.annotation_fraction <= 1.0) {
            return bad("annotation_fraction must lie in (0, 1]");
        }
        if !(self.learning_rate > 0.0) || !(self.temperature > 0.0) || !(self.tolerance > 0.0) {
            return bad("learning_rate, temperature and tolerance must be positive");
        }
        if self.lambda < 0.0 || self.beta < 0.0 || self.max_grad_norm < 0.0 {
            return bad("lambda, beta and max_grad_norm must be non-negative");
        }
        if self.max_epochs == 0 || self.convergence_window == 0 || self.negatives_per_positive == 0 {
            return bad("max_epochs, convergence_window and negatives_per_positive must be positive");
        }
        Ok(())
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig { lambda: self.lambda, beta: self.beta, distance: self.distance, temperature: self.temperature }
    }

    fn linked_per_batch(&self) -> usize {
        ((self.batch_size as f64 * self.annotation_fraction).round() as usize).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    fn init(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut dyn RngCore) -> Self {
        let bound = (6.0 / (input + output) as f64).sqrt();
        let data = (0..input * output).map(|_| rng.random_range(-bound..=bound)).collect();
        Dense {
            w: store.add(format!("{name}.w"), Tensor::from_vec(output, input, data)),
            b: store.add(format!("{name}.b"), Tensor::zeros(output, 1)),
        }
    }

    fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.affine(w, x, b)
    }
}

/// Encoder MLP, mean and variance heads, and decoder of one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalParams {
    pub enc1: Dense,
    pub enc2: Dense,
    pub mean: Dense,
    pub var: Dense,
    pub dec1: Dense,
    pub dec2: Dense,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub g: Var,
    pub gaussian: GaussianVars,
}

impl VariationalParams {
    pub fn init(store: &mut ParamStore, prefix: &str, input: usize, cfg: &ModelConfig, rng: &mut dyn RngCore) -> Self {
        let [h1, h2] = cfg.mlp_dims;
        let l = cfg.latent_dim;
        Self {
            enc1: Dense::init(store, &format!("{prefix}.enc1"), input, h1, rng),
            enc2: Dense::init(store, &format!("{prefix}.enc2"), h1, h2, rng),
            mean: Dense::init(store, &format!("{prefix}.mean"), h2, l, rng),
            var: Dense::init(store, &format!("{prefix}.var"), h2, l, rng),
            dec1: Dense::init(store, &format!("{prefix}.dec1"), l, h1, rng),
            dec2: Dense::init(store, &format!("{prefix}.dec2"), h1, input, rng),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [self.enc1, self.enc2, self.mean, self.var, self.dec1, self.dec2].iter().flat_map(|d| [d.w, d.b]).collect()
    }

    /// `g = tanh(W2 tanh(W1 z + b1) + b2)`, `mean = tanh(Wm g + bm)`,
    /// `variance = softplus(Wv g + bv)`.
    pub fn heads(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> HeadVars {
        let a = self.enc1.apply(tape, store, z);
        let g1 = tape.tanh(a);
        let a = self.enc2.apply(tape, store, g1);
        let g = tape.tanh(a);
        let m = self.mean.apply(tape, store, g);
        let mean = tape.tanh(m);
        let v = self.var.apply(tape, store, g);
        let v = tape.softplus(v);
        let variance = tape.floor(v, VARIANCE_FLOOR);
        HeadVars { g, gaussian: GaussianVars { mean, variance } }
    }

    /// Two-layer decoder: tanh hidden layer, linear output.
    pub fn decode(&self, tape: &mut Tape, store: &ParamStore, sample: Var) -> Var {
        let a = self.dec1.apply(tape, store, sample);
        let h = tape.tanh(a);
        self.dec2.apply(tape, store, h)
    }
}

/// Trained or freshly initialized linkage model for one network pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkageModel {
    pub config: ModelConfig,
    pub loss: LossConfig,
    pub store: ParamStore,
    pub source: EncoderParams,
    pub target: EncoderParams,
    pub source_var: VariationalParams,
    pub target_var: VariationalParams,
    pub words: Vocab,
    pub demographics: Vocab,
}

impl LinkageModel {
    pub fn new(
        cfg: &ModelConfig,
        loss: LossConfig,
        pair: &NetworkPair,
        words: &EmbeddingTable,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if words.len() != pair.words.len() {
            return Err(Error::Dimension { expected: pair.words.len(), got: words.len() });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let nd = pair.demographics.len();
        let zdim = cfg.encoder.output_dim();
        let source = EncoderParams::init(&mut store, "source", &cfg.encoder, words, nd, &mut rng)?;
        let source_var = VariationalParams::init(&mut store, "source", zdim, cfg, &mut rng);
        let target = EncoderParams::init(&mut store, "target", &cfg.encoder, words, nd, &mut rng)?;
        let target_var = VariationalParams::init(&mut store, "target", zdim, cfg, &mut rng);
        if cfg.mirror_init {
            for (s, t) in
                source.ids().into_iter().chain(source_var.ids()).zip(target.ids().into_iter().chain(target_var.ids()))
            {
                let copy = store.get(s).clone();
                *store.get_mut(t) = copy;
            }
        }
        Ok(Self {
            config: cfg.clone(),
            loss,
            store,
            source,
            target,
            source_var,
            target_var,
            words: pair.words.clone(),
            demographics: pair.demographics.clone(),
        })
    }

    pub fn encoder_params(&self, side: Side) -> &EncoderParams {
        match side {
            Side::Source => &self.source,
            Side::Target => &self.target,
        }
    }

    pub fn variational(&self, side: Side) -> &VariationalParams {
        match side {
            Side::Source => &self.source_var,
            Side::Target => &self.target_var,
        }
    }

    pub fn encoder(&self, side: Side) -> Encoder<'_> {
        Encoder::new(&self.config.encoder, self.encoder_params(side), &self.store)
    }

    /// Parameters covered by the regularizer: both encoders.
    pub fn regularized_ids(&self) -> Vec<ParamId> {
        let mut ids = self.source.ids();
        ids.extend(self.target.ids());
        ids
    }

    /// `sum of squares` over both encoders.
    pub fn encoder_squared_norm(&self) -> f64 {
        self.source.squared_norm(&self.store) + self.target.squared_norm(&self.store)
    }

    /// Checks that `pair` uses the vocabularies the model was built with.
    pub fn check_pair(&self, pair: &NetworkPair) -> Result<()> {
        if pair.words != self.words || pair.demographics != self.demographics {
            return Err(Error::Data(
                "dataset vocabularies differ from the model's; load it with the model vocabularies".into(),
            ));
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    /// Gaussian, `z` and `g` of one user, looked up by id.
    pub fn embed_identity(&self, pair: &NetworkPair, side: Side, user_id: &str) -> Result<IdentityEmbedding> {
        let net = pair.network(side);
        let idx = net.require(user_id, "embedding")?;
        let mut tape = Tape::new();
        let (ctx, _) = self.encoder(side).encode_in_network(&mut tape, net, idx)?;
        Ok(self.identity_from_z(side, tape.value(ctx.z)))
    }

    fn identity_from_z(&self, side: Side, z: &[f64]) -> IdentityEmbedding {
        let mut tape = Tape::new();
        let zv = tape.input(z);
        let h = self.variational(side).heads(&mut tape, &self.store, zv);
        IdentityEmbedding { z: z.to_vec(), g: tape.value(h.g).to_vec(), gaussian: h.gaussian.read(&tape) }
    }

    /// Decoder output for the reparameterized sample of the Gaussian of `z`.
    pub fn reconstruct(&self, side: Side, z: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
        let zdim = self.config.encoder.output_dim();
        if z.len() != zdim {
            return Err(Error::Dimension { expected: zdim, got: z.len() });
        }
        if eps.len() != self.latent_dim() {
            return Err(Error::Dimension { expected: self.latent_dim(), got: eps.len() });
        }
        let mut tape = Tape::new();
        let zv = tape.input(z);
        let vp = self.variational(side);
        let h = vp.heads(&mut tape, &self.store, zv);
        let sample = gaussian::reparameterized_sample_var(&mut tape, h.gaussian, eps);
        let out = vp.decode(&mut tape, &self.store, sample);
        Ok(tape.value(out).to_vec())
    }

    /// Embeddings of every user on both sides.
    pub fn embed_all(&self, pair: &NetworkPair) -> Result<EmbeddingCache> {
        let side = |s: Side| -> Result<Vec<IdentityEmbedding>> {
            let zs = self.encoder(s).contextual_vectors(pair.network(s))?;
            Ok(zs.iter().map(|z| self.identity_from_z(s, z)).collect())
        };
        Ok(EmbeddingCache { source: side(Side::Source)?, target: side(Side::Target)?, distance: self.loss.distance })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint { format_version: CHECKPOINT_VERSION, model: self.clone() };
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(std::io::BufWriter::new(file), &ck)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "checkpoint format {} is not supported (expected {CHECKPOINT_VERSION})",
                ck.format_version
            )));
        }
        let m = ck.model;
        m.config.validate()?;
        m.source.check(&m.store, &m.config.encoder, m.demographics.len())?;
        m.target.check(&m.store, &m.config.encoder, m.demographics.len())?;
        Ok(m)
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    model: LinkageModel,
}

/// Deterministic encoding, latent code and Gaussian of one user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityEmbedding {
    pub z: Vec<f64>,
    pub g: Vec<f64>,
    pub gaussian: GaussianEmbedding,
}

/// Anything that can score a (source, target) user pair; higher is more
/// confident.
pub trait Scorer {
    fn score(&self, source: usize, target: usize) -> f64;
}

pub fn distance(kind: DistanceKind, a: &GaussianEmbedding, b: &GaussianEmbedding) -> f64 {
    match kind {
        DistanceKind::Wasserstein => gaussian::w2_squared(a, b).expect("equal latent dimensions"),
        DistanceKind::Kl => gaussian::kl_divergence(a, b).expect("equal latent dimensions"),
        DistanceKind::Deterministic => a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum(),
    }
}

/// Precomputed embeddings of every user of a pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingCache {
    pub source: Vec<IdentityEmbedding>,
    pub target: Vec<IdentityEmbedding>,
    pub distance: DistanceKind,
}

impl Scorer for EmbeddingCache {
    fn score(&self, source: usize, target: usize) -> f64 {
        -distance(self.distance, &self.source[source].gaussian, &self.target[target].gaussian)
    }
}

/// Score of a pair by ids: the negated distance between the two Gaussians.
pub fn score_pair(model: &LinkageModel, pair: &NetworkPair, source_id: &str, target_id: &str) -> Result<f64> {
    let s = model.embed_identity(pair, Side::Source, source_id)?;
    let t = model.embed_identity(pair, Side::Target, target_id)?;
    Ok(-distance(model.loss.distance, &s.gaussian, &t.gaussian))
}

/// Candidates sorted by descending score, ties by ascending target id.
pub fn rank_candidates(
    scorer: &impl Scorer,
    target: &SocialNetwork,
    source: usize,
    candidates: &[usize],
) -> Vec<(usize, f64)> {
    let mut scored: Vec<(usize, f64)> = candidates.iter().map(|&t| (t, scorer.score(source, t))).collect();
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then_with(|| target.user(a.0).id.cmp(&target.user(b.0).id))
    });
    scored
}

/// One linked pair with its sampled negative target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub source: usize,
    pub target: usize,
    pub negative: usize,
}

/// One training step's worth of identities.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Batch {
    pub triplets: Vec<Triplet>,
    /// Identities whose reconstruction is scored, per side.
    pub sources: Vec<usize>,
    pub targets: Vec<usize>,
}

/// Loss components of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    /// Triplet term only.
    pub linkage: f64,
    pub regularizer: f64,
    pub reconstruction_source: f64,
    pub reconstruction_target: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy)]
struct IdentityVars {
    z: Var,
    heads: HeadVars,
}

/// One forward pass over a tape with per-user caches.
struct Forward<'m> {
    model: &'m LinkageModel,
    pair: &'m NetworkPair,
    tape: Tape,
    users: HashMap<(Side, usize), Var>,
    identities: HashMap<(Side, usize), IdentityVars>,
}

impl<'m> Forward<'m> {
    fn new(model: &'m LinkageModel, pair: &'m NetworkPair) -> Self {
        Self { model, pair, tape: Tape::new(), users: HashMap::new(), identities: HashMap::new() }
    }

    fn user(&mut self, side: Side, idx: usize) -> Result<Var> {
        if let Some(&v) = self.users.get(&(side, idx)) {
            return Ok(v);
        }
        let enc = self.model.encoder(side);
        let v = enc.encode_user(&mut self.tape, self.pair.network(side).user(idx))?.vector;
        self.users.insert((side, idx), v);
        Ok(v)
    }

    fn identity(&mut self, side: Side, idx: usize) -> Result<IdentityVars> {
        if let Some(&v) = self.identities.get(&(side, idx)) {
            return Ok(v);
        }
        let enc = self.model.encoder(side);
        let center = self.user(side, idx)?;
        let neighbors = enc.capped_neighbors(self.pair.network(side), idx);
        let mut vecs = Vec::with_capacity(neighbors.len());
        for n in neighbors {
            vecs.push(self.user(side, n)?);
        }
        let (z, _) = enc.encode_user_contextual(&mut self.tape, center, &vecs)?;
        let heads = self.model.variational(side).heads(&mut self.tape, &self.model.store, z);
        let id = IdentityVars { z, heads };
        self.identities.insert((side, idx), id);
        Ok(id)
    }

    fn distance(&mut self, a: IdentityVars, b: IdentityVars) -> Var {
        let t = &mut self.tape;
        match self.model.loss.distance {
            DistanceKind::Wasserstein => gaussian::w2_squared_var(t, a.heads.gaussian, b.heads.gaussian),
            DistanceKind::Kl => gaussian::kl_divergence_var(t, a.heads.gaussian, b.heads.gaussian),
            DistanceKind::Deterministic => {
                let d = t.sub(a.heads.gaussian.mean, b.heads.gaussian.mean);
                t.sq_norm(d)
            }
        }
    }

    fn linkage(&mut self, triplets: &[Triplet]) -> Result<Var> {
        if triplets.is_empty() {
            return Err(Error::Data("linkage loss needs at least one triplet".into()));
        }
        let inv_t = 1.0 / self.model.loss.temperature;
        let mut terms = Vec::with_capacity(triplets.len());
        for tr in triplets {
            if tr.negative == tr.target {
                return Err(Error::Data("negative target equals the true match".into()));
            }
            let s = self.identity(Side::Source, tr.source)?;
            let t = self.identity(Side::Target, tr.target)?;
            let n = self.identity(Side::Target, tr.negative)?;
            let pos = self.distance(s, t);
            let neg = self.distance(s, n);
            let margin = self.tape.sub(neg, pos);
            let margin = self.tape.scale(margin, inv_t);
            terms.push(self.tape.log_sigmoid(margin));
        }
        let sum = self.tape.add_all(&terms);
        Ok(self.tape.scale(sum, -1.0))
    }

    fn regularizer(&mut self) -> Var {
        let ids = self.model.regularized_ids();
        let terms: Vec<Var> = ids
            .into_iter()
            .map(|id| {
                let p = self.tape.param(&self.model.store, id);
                self.tape.sq_norm(p)
            })
            .collect();
        let sum = self.tape.add_all(&terms);
        self.tape.scale(sum, self.model.loss.lambda)
    }

    /// `|z - z_hat|^2 + 0.5 sum(-ln var + mean^2 + var - 1)`.
    fn reconstruction(&mut self, side: Side, idx: usize, eps: &[f64]) -> Result<Var> {
        let id = self.identity(side, idx)?;
        let vp = self.model.variational(side);
        let store = &self.model.store;
        let t = &mut self.tape;
        let g = id.heads.gaussian;
        if self.model.loss.distance == DistanceKind::Deterministic {
            let out = vp.decode(t, store, g.mean);
            let diff = t.sub(id.z, out);
            return Ok(t.sq_norm(diff));
        }
        let sample = gaussian::reparameterized_sample_var(t, g, eps);
        let out = vp.decode(t, store, sample);
        let diff = t.sub(id.z, out);
        let rec = t.sq_norm(diff);
        let lv = t.ln(g.variance);
        let m2 = t.square(g.mean);
        let a = t.sub(m2, lv);
        let b = t.add(a, g.variance);
        let c = t.offset(b, -1.0);
        let s = t.sum(c);
        let kl = t.scale(s, 0.5);
        Ok(t.add(rec, kl))
    }

    fn reconstruction_sum(
        &mut self,
        side: Side,
        users: &[usize],
        eps: &HashMap<(Side, usize), Vec<f64>>,
    ) -> Result<Option<Var>> {
        if users.is_empty() {
            return Ok(None);
        }
        let mut terms = Vec::with_capacity(users.len());
        for &u in users {
            let e = eps.get(&(side, u)).ok_or_else(|| Error::Data("missing noise draw".into()))?;
            terms.push(self.reconstruction(side, u, e)?);
        }
        Ok(Some(self.tape.add_all(&terms)))
    }
}

/// Standard-normal noise, one draw per identity in the batch.
pub fn draw_noise(batch: &Batch, latent: usize, rng: &mut impl Rng) -> HashMap<(Side, usize), Vec<f64>> {
    let mut out = HashMap::new();
    let mut keys: Vec<(Side, usize)> = batch.sources.iter().map(|&s| (Side::Source, s)).collect();
    keys.extend(batch.targets.iter().map(|&t| (Side::Target, t)));
    for k in keys {
        out.entry(k).or_insert_with(|| (0..latent).map(|_| StandardNormal.sample(rng)).collect());
    }
    out
}

fn build_total(
    fwd: &mut Forward<'_>,
    batch: &Batch,
    eps: &HashMap<(Side, usize), Vec<f64>>,
) -> Result<(Var, [Option<Var>; 4])> {
    let link = if batch.triplets.is_empty() { None } else { Some(fwd.linkage(&batch.triplets)?) };
    let reg = fwd.regularizer();
    let rs = fwd.reconstruction_sum(Side::Source, &batch.sources, eps)?;
    let rt = fwd.reconstruction_sum(Side::Target, &batch.targets, eps)?;
    let mut terms = vec![reg];
    terms.extend(link);
    let beta = fwd.model.loss.beta;
    for r in [rs, rt].into_iter().flatten() {
        terms.push(fwd.tape.scale(r, beta));
    }
    let total = fwd.tape.add_all(&terms);
    Ok((total, [link, Some(reg), rs, rt]))
}

fn read_parts(tape: &Tape, total: Var, parts: [Option<Var>; 4]) -> LossParts {
    let v = |p: Option<Var>| p.map_or(0.0, |x| tape.scalar(x));
    LossParts {
        linkage: v(parts[0]),
        regularizer: v(parts[1]),
        reconstruction_source: v(parts[2]),
        reconstruction_target: v(parts[3]),
        total: tape.scalar(total),
    }
}

/// Triplet term plus the regularizer on both encoders.
pub fn linkage_loss(model: &LinkageModel, pair: &NetworkPair, triplets: &[Triplet]) -> Result<f64> {
    let mut fwd = Forward::new(model, pair);
    let l = fwd.linkage(triplets)?;
    let r = fwd.regularizer();
    let s = fwd.tape.add(l, r);
    Ok(fwd.tape.scalar(s))
}

/// Reconstruction loss summed over `users` of one side with the given noise.
pub fn reconstruction_loss(
    model: &LinkageModel,
    pair: &NetworkPair,
    side: Side,
    users: &[usize],
    eps: &[Vec<f64>],
) -> Result<f64> {
    if users.is_empty() {
        return Err(Error::Data("reconstruction loss needs at least one identity".into()));
    }
    if eps.len() != users.len() {
        return Err(Error::Dimension { expected: users.len(), got: eps.len() });
    }
    let mut fwd = Forward::new(model, pair);
    let map = users.iter().zip(eps).map(|(&u, e)| ((side, u), e.clone())).collect();
    let v = fwd.reconstruction_sum(side, users, &map)?.expect("non-empty");
    Ok(fwd.tape.scalar(v))
}

pub fn total_loss(
    model: &LinkageModel,
    pair: &NetworkPair,
    batch: &Batch,
    eps: &HashMap<(Side, usize), Vec<f64>>,
) -> Result<LossParts> {
    let mut fwd = Forward::new(model, pair);
    let (total, parts) = build_total(&mut fwd, batch, eps)?;
    Ok(read_parts(&fwd.tape, total, parts))
}

/// Records the total loss on `tape` for gradient checks and custom loops.
pub fn total_loss_on_tape(
    model: &LinkageModel,
    pair: &NetworkPair,
    batch: &Batch,
    eps: &HashMap<(Side, usize), Vec<f64>>,
    tape: &mut Tape,
) -> Result<Var> {
    let mut fwd = Forward::new(model, pair);
    std::mem::swap(&mut fwd.tape, tape);
    let out = build_total(&mut fwd, batch, eps);
    std::mem::swap(&mut fwd.tape, tape);
    Ok(out?.0)
}

/// Loss and gradients of one batch.
pub fn loss_and_gradients(
    model: &LinkageModel,
    pair: &NetworkPair,
    batch: &Batch,
    eps: &HashMap<(Side, usize), Vec<f64>>,
) -> Result<(LossParts, Gradients)> {
    let mut fwd = Forward::new(model, pair);
    let (total, parts) = build_total(&mut fwd, batch, eps)?;
    let grads = fwd.tape.backward(total);
    Ok((read_parts(&fwd.tape, total, parts), grads))
}

/// Per-epoch record of a training run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<LossParts>,
    pub steps: usize,
    pub converged: bool,
    pub seconds: f64,
}

/// Samples batches of linked pairs, unlinked identities and in-batch
/// negatives.
pub struct BatchSampler {
    links: Vec<Link>,
    unlinked_sources: Vec<usize>,
    unlinked_targets: Vec<usize>,
    linked_per_batch: usize,
    unlinked_per_batch: usize,
    negatives: usize,
}

impl BatchSampler {
    pub fn new(pair: &NetworkPair, cfg: &TrainConfig) -> Result<Self> {
        let links = pair.annotations.links().to_vec();
        let sources = pair.annotations.sources();
        let targets = pair.annotations.targets();
        let unlinked_sources: Vec<usize> = (0..pair.source.len()).filter(|s| !sources.contains(s)).collect();
        let unlinked_targets: Vec<usize> = (0..pair.target.len()).filter(|t| !targets.contains(t)).collect();
        if links.len() < 2 && (links.is_empty() || unlinked_targets.is_empty()) {
            return Err(Error::InsufficientAnnotations(format!(
                "training needs at least two annotated pairs or one pair plus unlinked targets, got {}",
                links.len()
            )));
        }
        let linked_per_batch = cfg.linked_per_batch().min(links.len());
        Ok(Self {
            unlinked_per_batch: cfg.batch_size.saturating_sub(cfg.linked_per_batch()),
            links,
            unlinked_sources,
            unlinked_targets,
            linked_per_batch,
            negatives: cfg.negatives_per_positive,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.links.len().div_ceil(self.linked_per_batch)
    }

    /// Batches for one epoch covering every annotated pair once.
    pub fn epoch(&self, rng: &mut impl Rng) -> Vec<Batch> {
        let mut order = self.links.clone();
        order.shuffle(rng);
        let n = self.steps_per_epoch();
        (0..n)
            .map(|i| {
                let chunk = &order[i * order.len() / n..(i + 1) * order.len() / n];
                self.batch(chunk, rng)
            })
            .collect()
    }

    fn batch(&self, linked: &[Link], rng: &mut impl Rng) -> Batch {
        let us: Vec<usize> = self.unlinked_sources.choose_multiple(rng, self.unlinked_per_batch).copied().collect();
        let ut: Vec<usize> = self.unlinked_targets.choose_multiple(rng, self.unlinked_per_batch).copied().collect();
        let mut pool: Vec<usize> = linked.iter().map(|l| l.target).collect();
        pool.extend(&ut);
        let mut triplets = Vec::with_capacity(linked.len() * self.negatives);
        for l in linked {
            let others: Vec<usize> = pool.iter().copied().filter(|&t| t != l.target).collect();
            for _ in 0..self.negatives {
                if let Some(&neg) = others.choose(rng) {
                    triplets.push(Triplet { source: l.source, target: l.target, negative: neg });
                }
            }
        }
        let mut sources: Vec<usize> = linked.iter().map(|l| l.source).collect();
        sources.extend(us);
        let mut seen = HashSet::new();
        let targets = pool.into_iter().filter(|t| seen.insert(*t)).collect();
        Batch { triplets, sources, targets }
    }
}

fn mean_parts(parts: &[LossParts]) -> LossParts {
    let n = parts.len().max(1) as f64;
    let mut m = LossParts::default();
    for p in parts {
        m.linkage += p.linkage / n;
        m.regularizer += p.regularizer / n;
        m.reconstruction_source += p.reconstruction_source / n;
        m.reconstruction_target += p.reconstruction_target / n;
        m.total += p.total / n;
    }
    m
}

/// Continues training `model` on the annotations of `pair` for at most
/// `epochs` epochs (or `cfg.max_epochs` when `None`).
pub fn fit(
    model: &mut LinkageModel,
    pair: &NetworkPair,
    cfg: &TrainConfig,
    epochs: Option<usize>,
) -> Result<TrainReport> {
    cfg.validate()?;
    model.check_pair(pair)?;
    model.loss = cfg.loss();
    let start = Instant::now();
    let sampler = BatchSampler::new(pair, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut report = TrainReport::default();
    let max_epochs = epochs.unwrap_or(cfg.max_epochs);
    let w = cfg.convergence_window;
    for epoch in 0..max_epochs {
        let mut parts = Vec::new();
        for batch in sampler.epoch(&mut rng) {
            let eps = draw_noise(&batch, model.latent_dim(), &mut rng);
            let (p, mut grads) = loss_and_gradients(model, pair, &batch, &eps)?;
            if !p.total.is_finite() {
                return Err(Error::Data(format!("loss diverged at epoch {epoch}")));
            }
            if cfg.freeze_word_embeddings {
                grads.remove(model.source.word_emb);
                grads.remove(model.target.word_emb);
            }
            if cfg.max_grad_norm > 0.0 {
                let norm = grads.global_norm();
                if norm > cfg.max_grad_norm {
                    grads.scale(cfg.max_grad_norm / norm);
                }
            }
            opt.apply(&mut model.store, &grads);
            parts.push(p);
            report.steps += 1;
        }
        let m = mean_parts(&parts);
        log::debug!("epoch {epoch}: loss {:.6} (linkage {:.6})", m.total, m.linkage);
        report.epoch_losses.push(m);
        let n = report.epoch_losses.len();
        if n > w {
            let prev = report.epoch_losses[n - 1 - w].total;
            if ((m.total - prev) / prev.abs().max(1e-12)).abs() < cfg.tolerance {
                report.converged = true;
                break;
            }
        }
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Builds a model for `pair` and trains it on the pair's annotations.
pub fn train_supervised(
    pair: &NetworkPair,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    words: Option<&EmbeddingTable>,
) -> Result<(LinkageModel, TrainReport)> {
    cfg.validate()?;
    let random;
    let table = match words {
        Some(t) => t,
        None => {
            random = EmbeddingTable::random(pair.words.len(), model_cfg.encoder.word_dim, cfg.seed);
            &random
        }
    };
    let mut model = LinkageModel::new(model_cfg, cfg.loss(), pair, table, cfg.seed)?;
    let report = fit(&mut model, pair, cfg, None)?;
    Ok((model, report))
}
