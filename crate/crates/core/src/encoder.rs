//! Hierarchical attention encoder: BiGRU over words, attention pooling over
//! words, sentences and microblogs, max-pooled demographics and neighbor
//! attention on top.

use crate::autodiff::{Activation, ParamId, ParamStore, Tape, Tensor, Var};
use crate::corpus::{stride_subsample, EmbeddingTable, SocialNetwork, UserProfile};
use crate::error::{Error, Result};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub word_dim: usize,
    /// GRU state size per direction.
    pub hidden_dim: usize,
    pub demographic_dim: usize,
    pub max_neighbors: usize,
    pub attention_activation: Activation,
    pub neighbor_activation: Activation,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            word_dim: 64,
            hidden_dim: 32,
            demographic_dim: 16,
            max_neighbors: 64,
            attention_activation: Activation::Tanh,
            neighbor_activation: Activation::Tanh,
        }
    }
}

impl EncoderConfig {
    pub fn text_dim(&self) -> usize {
        2 * self.hidden_dim
    }

    /// Dimension of the single-user vector `[u_t || u_d]`.
    pub fn user_dim(&self) -> usize {
        self.text_dim() + self.demographic_dim
    }

    /// Dimension of the contextual vector `[z_r || u_c]`.
    pub fn output_dim(&self) -> usize {
        2 * self.user_dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.word_dim == 0 || self.hidden_dim == 0 || self.max_neighbors == 0 {
            return Err(Error::Config("encoder dimensions and max_neighbors must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GruParams {
    /// Reset and update gates stacked: `2h x (d_in + h)`.
    pub gates_w: ParamId,
    pub gates_b: ParamId,
    pub cand_w: ParamId,
    pub cand_b: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub w: ParamId,
    pub b: ParamId,
}

/// Parameter handles for one network's encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub word_emb: ParamId,
    pub forward: GruParams,
    pub backward: GruParams,
    pub word_attn: AttentionParams,
    pub sentence_attn: AttentionParams,
    pub microblog_attn: AttentionParams,
    pub demo_emb: ParamId,
    pub neighbor_attn: ParamId,
}

fn uniform(rng: &mut dyn RngCore, rows: usize, cols: usize, bound: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::from_vec(rows, cols, data)
}

impl EncoderParams {
    /// Registers a fresh parameter set under `prefix`. Word embeddings are
    /// copied from `words`, whose dimension must match the config.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &EncoderConfig,
        words: &EmbeddingTable,
        demographic_vocab: usize,
        rng: &mut impl RngCore,
    ) -> Result<Self> {
        cfg.validate()?;
        if words.dim != cfg.word_dim {
            return Err(Error::Dimension { expected: cfg.word_dim, got: words.dim });
        }
        let (d, h) = (cfg.word_dim, cfg.hidden_dim);
        let flat: Vec<f64> = words.vectors.iter().flatten().copied().collect();
        let word_emb = store.add(format!("{prefix}.word_emb"), Tensor::from_vec(words.len(), d, flat));
        let gb = 1.0 / (h as f64).sqrt();
        let gru = |store: &mut ParamStore, dir: &str, rng: &mut dyn RngCore| GruParams {
            gates_w: store.add(format!("{prefix}.gru_{dir}.gates_w"), uniform(rng, 2 * h, d + h, gb)),
            gates_b: store.add(format!("{prefix}.gru_{dir}.gates_b"), uniform(rng, 2 * h, 1, gb)),
            cand_w: store.add(format!("{prefix}.gru_{dir}.cand_w"), uniform(rng, h, d + h, gb)),
            cand_b: store.add(format!("{prefix}.gru_{dir}.cand_b"), uniform(rng, h, 1, gb)),
        };
        let forward = gru(store, "fwd", rng);
        let backward = gru(store, "bwd", rng);
        let ab = 1.0 / (cfg.text_dim() as f64).sqrt();
        let attn = |store: &mut ParamStore, name: &str, rng: &mut dyn RngCore| AttentionParams {
            w: store.add(format!("{prefix}.{name}.w"), uniform(rng, cfg.text_dim(), 1, ab)),
            b: store.add(format!("{prefix}.{name}.b"), Tensor::zeros(1, 1)),
        };
        let word_attn = attn(store, "word_attn", rng);
        let sentence_attn = attn(store, "sentence_attn", rng);
        let microblog_attn = attn(store, "microblog_attn", rng);
        let demo_emb =
            store.add(format!("{prefix}.demo_emb"), uniform(rng, demographic_vocab, cfg.demographic_dim, 0.5));
        let nb = 1.0 / (2.0 * cfg.user_dim() as f64).sqrt();
        let neighbor_attn = store.add(format!("{prefix}.neighbor_attn"), uniform(rng, 2 * cfg.user_dim(), 1, nb));
        Ok(Self { word_emb, forward, backward, word_attn, sentence_attn, microblog_attn, demo_emb, neighbor_attn })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.word_emb];
        for g in [self.forward, self.backward] {
            ids.extend([g.gates_w, g.gates_b, g.cand_w, g.cand_b]);
        }
        for a in [self.word_attn, self.sentence_attn, self.microblog_attn] {
            ids.extend([a.w, a.b]);
        }
        ids.extend([self.demo_emb, self.neighbor_attn]);
        ids
    }

    /// `sum of squared entries` over every tensor of this encoder.
    pub fn squared_norm(&self, store: &ParamStore) -> f64 {
        self.ids().iter().map(|&id| store.get(id).squared_norm()).sum()
    }

    pub fn check(&self, store: &ParamStore, cfg: &EncoderConfig, demographic_vocab: usize) -> Result<()> {
        let shape = |id: ParamId| (store.get(id).rows, store.get(id).cols);
        let expect = |id: ParamId, want: (usize, usize)| {
            if shape(id) != want {
                return Err(Error::Config(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    store.name(id),
                    shape(id),
                    want
                )));
            }
            Ok(())
        };
        for a in [self.word_attn, self.sentence_attn, self.microblog_attn] {
            expect(a.w, (cfg.text_dim(), 1))?;
        }
        expect(self.demo_emb, (demographic_vocab, cfg.demographic_dim))?;
        expect(self.neighbor_attn, (2 * cfg.user_dim(), 1))?;
        if store.get(self.word_emb).cols != cfg.word_dim {
            return Err(Error::Dimension { expected: cfg.word_dim, got: store.get(self.word_emb).cols });
        }
        Ok(())
    }
}

/// Attention weights of one sentence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceTrace {
    pub index: usize,
    pub weight: f64,
    pub words: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicroblogTrace {
    pub index: usize,
    pub weight: f64,
    pub sentences: Vec<SentenceTrace>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborTrace {
    pub id: String,
    pub weight: f64,
}

/// Every attention weight group produced while encoding one user.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub microblogs: Vec<MicroblogTrace>,
    pub neighbors: Vec<NeighborTrace>,
}

impl AttentionTrace {
    /// All weight groups, innermost first.
    pub fn groups(&self) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for m in &self.microblogs {
            for s in &m.sentences {
                out.push(s.words.clone());
            }
            out.push(m.sentences.iter().map(|s| s.weight).collect());
        }
        if !self.microblogs.is_empty() {
            out.push(self.microblogs.iter().map(|m| m.weight).collect());
        }
        if !self.neighbors.is_empty() {
            out.push(self.neighbors.iter().map(|n| n.weight).collect());
        }
        out
    }
}

/// Tape handles for the attention weights of one user; read into an
/// [`AttentionTrace`] after the forward pass.
#[derive(Debug, Clone, Default)]
pub struct TraceVars {
    /// Per microblog: (sentence weights, word weights per sentence).
    pub microblogs: Vec<(Var, Vec<Var>)>,
    pub microblog_weights: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct UserEncoding {
    pub vector: Var,
    pub trace: TraceVars,
    /// True when the user had no microblogs.
    pub no_text: bool,
}

#[derive(Debug, Clone)]
pub struct ContextEncoding {
    pub z: Var,
    pub weights: Option<Var>,
    /// Neighbor indices actually attended over, after the cap.
    pub neighbors: Vec<usize>,
}

/// Read-only view of one encoder bound to its parameter store.
#[derive(Debug, Clone, Copy)]
pub struct Encoder<'a> {
    pub cfg: &'a EncoderConfig,
    pub params: &'a EncoderParams,
    pub store: &'a ParamStore,
}

impl<'a> Encoder<'a> {
    pub fn new(cfg: &'a EncoderConfig, params: &'a EncoderParams, store: &'a ParamStore) -> Self {
        Self { cfg, params, store }
    }

    fn gru_step(&self, tape: &mut Tape, p: &GruParams, x: Var, h: Var) -> Var {
        let hd = self.cfg.hidden_dim;
        let gw = tape.param(self.store, p.gates_w);
        let gb = tape.param(self.store, p.gates_b);
        let cw = tape.param(self.store, p.cand_w);
        let cb = tape.param(self.store, p.cand_b);
        let xh = tape.concat(&[x, h]);
        let pre = tape.affine(gw, xh, gb);
        let gates = tape.sigmoid(pre);
        let r = tape.slice(gates, 0, hd);
        let u = tape.slice(gates, hd, hd);
        let rh = tape.mul(r, h);
        let xrh = tape.concat(&[x, rh]);
        let cand_pre = tape.affine(cw, xrh, cb);
        let cand = tape.tanh(cand_pre);
        tape.lerp(u, cand, h)
    }

    /// Contextual word states `[forward_t || backward_t]`.
    pub fn bigru(&self, tape: &mut Tape, words: &[usize]) -> Result<Vec<Var>> {
        let vocab = self.store.get(self.params.word_emb).rows;
        if let Some(&bad) = words.iter().find(|&&w| w >= vocab) {
            return Err(Error::Data(format!("word id {bad} outside vocabulary of {vocab}")));
        }
        let xs: Vec<Var> = words.iter().map(|&w| tape.param_row(self.store, self.params.word_emb, w)).collect();
        let n = xs.len();
        let mut fwd = Vec::with_capacity(n);
        let mut h = tape.zeros(self.cfg.hidden_dim);
        for &x in &xs {
            h = self.gru_step(tape, &self.params.forward, x, h);
            fwd.push(h);
        }
        let mut bwd = vec![h; n];
        let mut h = tape.zeros(self.cfg.hidden_dim);
        for t in (0..n).rev() {
            h = self.gru_step(tape, &self.params.backward, xs[t], h);
            bwd[t] = h;
        }
        Ok(fwd.into_iter().zip(bwd).map(|(f, b)| tape.concat(&[f, b])).collect())
    }

    /// `softmax_k act(w . h_k + b)` and `sum_k alpha_k h_k`.
    fn attend(&self, tape: &mut Tape, p: &AttentionParams, items: &[Var]) -> (Var, Var) {
        let w = tape.param(self.store, p.w);
        let b = tape.param(self.store, p.b);
        let scores: Vec<Var> = items
            .iter()
            .map(|&h| {
                let s = tape.dot(w, h);
                let s = tape.add(s, b);
                tape.act(s, self.cfg.attention_activation)
            })
            .collect();
        let stacked = tape.concat(&scores);
        let alpha = tape.softmax(stacked);
        (tape.weighted_sum(alpha, items), alpha)
    }

    /// Sentence vector and word weights.
    pub fn encode_sentence(&self, tape: &mut Tape, words: &[usize]) -> Result<(Var, Var)> {
        if words.is_empty() {
            return Err(Error::Data("cannot encode an empty sentence".into()));
        }
        let states = self.bigru(tape, words)?;
        Ok(self.attend(tape, &self.params.word_attn, &states))
    }

    /// Microblog vector and sentence weights.
    pub fn encode_microblog(&self, tape: &mut Tape, sentences: &[Var]) -> Result<(Var, Var)> {
        if sentences.is_empty() {
            return Err(Error::Data("cannot encode a microblog without sentences".into()));
        }
        Ok(self.attend(tape, &self.params.sentence_attn, sentences))
    }

    /// Text vector and microblog weights; `None` weights mark a user with no
    /// microblogs, whose text vector is zero.
    pub fn encode_user_text(&self, tape: &mut Tape, microblogs: &[Var]) -> (Var, Option<Var>) {
        if microblogs.is_empty() {
            return (tape.zeros(self.cfg.text_dim()), None);
        }
        let (v, a) = self.attend(tape, &self.params.microblog_attn, microblogs);
        (v, Some(a))
    }

    /// Elementwise max over the selected demographic rows; zero when empty.
    pub fn encode_demographics(&self, tape: &mut Tape, features: &[usize]) -> Result<Var> {
        let rows = self.store.get(self.params.demo_emb).rows;
        if let Some(&bad) = features.iter().find(|&&f| f >= rows) {
            return Err(Error::Data(format!("demographic id {bad} outside vocabulary of {rows}")));
        }
        if features.is_empty() {
            return Ok(tape.zeros(self.cfg.demographic_dim));
        }
        let items: Vec<Var> = features.iter().map(|&f| tape.param_row(self.store, self.params.demo_emb, f)).collect();
        Ok(tape.max_pool(&items))
    }

    pub fn encode_user(&self, tape: &mut Tape, profile: &UserProfile) -> Result<UserEncoding> {
        let mut trace = TraceVars::default();
        let mut blogs = Vec::with_capacity(profile.microblogs.len());
        for blog in &profile.microblogs {
            let mut sents = Vec::with_capacity(blog.sentences.len());
            let mut word_weights = Vec::with_capacity(blog.sentences.len());
            for s in &blog.sentences {
                let (v, a) = self.encode_sentence(tape, s)?;
                sents.push(v);
                word_weights.push(a);
            }
            let (m, a) = self.encode_microblog(tape, &sents)?;
            blogs.push(m);
            trace.microblogs.push((a, word_weights));
        }
        let (text, mw) = self.encode_user_text(tape, &blogs);
        trace.microblog_weights = mw;
        let demo = self.encode_demographics(tape, &profile.demographics)?;
        let vector = tape.concat(&[text, demo]);
        Ok(UserEncoding { vector, trace, no_text: mw.is_none() })
    }

    /// `z = [act(sum_n alpha_n u_n) || u_c]` with
    /// `alpha = softmax_n act(a . [u_c || u_n])`. No neighbors gives a zero
    /// first half and `None` weights.
    pub fn encode_user_contextual(
        &self,
        tape: &mut Tape,
        center: Var,
        neighbors: &[Var],
    ) -> Result<(Var, Option<Var>)> {
        let d = tape.dim(center);
        if d != self.cfg.user_dim() {
            return Err(Error::Dimension { expected: self.cfg.user_dim(), got: d });
        }
        if let Some(&bad) = neighbors.iter().find(|&&n| tape.dim(n) != d) {
            return Err(Error::Dimension { expected: d, got: tape.dim(bad) });
        }
        if neighbors.is_empty() {
            let zr = tape.zeros(d);
            return Ok((tape.concat(&[zr, center]), None));
        }
        let a = tape.param(self.store, self.params.neighbor_attn);
        let scores: Vec<Var> = neighbors
            .iter()
            .map(|&n| {
                let pair = tape.concat(&[center, n]);
                let s = tape.dot(a, pair);
                tape.act(s, self.cfg.neighbor_activation)
            })
            .collect();
        let stacked = tape.concat(&scores);
        let alpha = tape.softmax(stacked);
        let agg = tape.weighted_sum(alpha, neighbors);
        let zr = tape.act(agg, self.cfg.neighbor_activation);
        Ok((tape.concat(&[zr, center]), Some(alpha)))
    }

    /// Neighbors attended over for `user`, capped by stride.
    pub fn capped_neighbors(&self, net: &SocialNetwork, user: usize) -> Vec<usize> {
        let all = net.neighbors(user);
        stride_subsample(all.len(), self.cfg.max_neighbors).into_iter().map(|i| all[i]).collect()
    }

    /// Full contextual encoding of `user`, encoding each neighbor from scratch.
    pub fn encode_in_network(
        &self,
        tape: &mut Tape,
        net: &SocialNetwork,
        user: usize,
    ) -> Result<(ContextEncoding, UserEncoding)> {
        let center = self.encode_user(tape, net.user(user))?;
        let neighbors = self.capped_neighbors(net, user);
        let mut vecs = Vec::with_capacity(neighbors.len());
        for &n in &neighbors {
            vecs.push(self.encode_user(tape, net.user(n))?.vector);
        }
        let (z, weights) = self.encode_user_contextual(tape, center.vector, &vecs)?;
        Ok((ContextEncoding { z, weights, neighbors }, center))
    }

    /// Reads the attention weights of an encoded user out of the tape.
    pub fn read_trace(
        tape: &Tape,
        net: &SocialNetwork,
        center: &UserEncoding,
        context: &ContextEncoding,
    ) -> AttentionTrace {
        let blog_w = center.trace.microblog_weights.map(|v| tape.value(v).to_vec()).unwrap_or_default();
        let microblogs = center
            .trace
            .microblogs
            .iter()
            .enumerate()
            .map(|(i, (sw, words))| {
                let sw = tape.value(*sw);
                MicroblogTrace {
                    index: i,
                    weight: blog_w[i],
                    sentences: words
                        .iter()
                        .enumerate()
                        .map(|(j, ww)| SentenceTrace { index: j, weight: sw[j], words: tape.value(*ww).to_vec() })
                        .collect(),
                }
            })
            .collect();
        let neighbors = match context.weights {
            Some(w) => context
                .neighbors
                .iter()
                .zip(tape.value(w))
                .map(|(&n, &weight)| NeighborTrace { id: net.user(n).id.clone(), weight })
                .collect(),
            None => Vec::new(),
        };
        AttentionTrace { microblogs, neighbors }
    }

    /// Attention trace and contextual vector of one user.
    pub fn trace_user(&self, net: &SocialNetwork, user: usize) -> Result<(AttentionTrace, Vec<f64>)> {
        let mut tape = Tape::new();
        let (ctx, center) = self.encode_in_network(&mut tape, net, user)?;
        Ok((Self::read_trace(&tape, net, &center, &ctx), tape.value(ctx.z).to_vec()))
    }

    /// Single-user vectors for every user of `net`, without gradients.
    pub fn user_vectors(&self, net: &SocialNetwork) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let mut out = Vec::with_capacity(net.len());
        for u in net.users() {
            tape.clear();
            let e = self.encode_user(&mut tape, u)?;
            out.push(tape.value(e.vector).to_vec());
        }
        Ok(out)
    }

    /// Contextual vectors for every user of `net`, without gradients.
    pub fn contextual_vectors(&self, net: &SocialNetwork) -> Result<Vec<Vec<f64>>> {
        let users = self.user_vectors(net)?;
        let mut tape = Tape::new();
        let mut out = Vec::with_capacity(net.len());
        for (i, u) in users.iter().enumerate() {
            tape.clear();
            let c = tape.input(u);
            let ns: Vec<Var> = self.capped_neighbors(net, i).iter().map(|&n| tape.input(&users[n])).collect();
            let (z, _) = self.encode_user_contextual(&mut tape, c, &ns)?;
            out.push(tape.value(z).to_vec());
        }
        Ok(out)
    }
}
