//! Self-learning with filtered pseudo-labels: confident-pair selection, a two-component
//! matched/noise mixture fit by EM, and the outer pseudo-labelling loop.

use crate::corpus::{AnnotationSet, EmbeddingTable, Link, NetworkPair};
use crate::error::{Error, Result};
use crate::eval::{confident_pair_accuracy, evaluate_model, EvalConfig};
use crate::gaussian::VARIANCE_FLOOR;
use crate::linkage::{fit, train_supervised, EmbeddingCache, LinkageModel, ModelConfig, Scorer, TrainConfig};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::HashSet;
use std::f64::consts::PI;
use std::path::Path;

pub const GAMMA_MIN: f64 = 1e-4;
pub const GAMMA_MAX: f64 = 1.0 - 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePair {
    pub link: Link,
    pub source: String,
    pub target: String,
    pub source_mean: Vec<f64>,
    pub target_mean: Vec<f64>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmState {
    /// Prior probability that a candidate is a true match.
    pub gamma: f64,
    pub previous_gamma: f64,
    /// Isotropic variance of matched target means around their source.
    pub match_variance: f64,
    pub noise_mean: Vec<f64>,
    pub noise_variance: f64,
    pub iteration: usize,
}

impl EmState {
    pub fn validate(&self) -> Result<()> {
        if !(self.match_variance > 0.0 && self.noise_variance > 0.0) {
            return Err(Error::Data(format!(
                "mixture variances must be positive, got {} and {}",
                self.match_variance, self.noise_variance
            )));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Data(format!("mixture prior must lie in (0, 1), got {}", self.gamma)));
        }
        Ok(())
    }

    pub fn converged(&self, epsilon: f64) -> bool {
        (self.gamma - self.previous_gamma).abs() <= epsilon
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MStep {
    /// Parameters from the candidates above the responsibility threshold.
    #[default]
    Hard,
    /// Responsibility-weighted parameters; classical EM.
    Soft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelfLearnConfig {
    pub confident_pairs: usize,
    pub epsilon: f64,
    pub outer_iterations: usize,
    pub fine_tune_epochs: usize,
    pub threshold: f64,
    pub max_inner_iterations: usize,
    /// Fine-tune on `A ∪ A_c` inside every EM round rather than only after the filter.
    pub fine_tune_in_loop: bool,
    /// Add the raw confident pairs without filtering.
    pub vanilla: bool,
    pub m_step: MStep,
}

impl Default for SelfLearnConfig {
    fn default() -> Self {
        Self {
            confident_pairs: 50,
            epsilon: 0.1,
            outer_iterations: 3,
            fine_tune_epochs: 2,
            threshold: 0.5,
            max_inner_iterations: 50,
            fine_tune_in_loop: true,
            vanilla: false,
            m_step: MStep::Hard,
        }
    }
}

impl SelfLearnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.confident_pairs == 0 {
            return Err(Error::Config("confident_pairs must be at least 1".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config("threshold must lie in (0, 1)".into()));
        }
        if self.max_inner_iterations == 0 {
            return Err(Error::Config("max_inner_iterations must be at least 1".into()));
        }
        Ok(())
    }
}

/// Greedy one-to-one selection of the `k_c` best-scoring pairs whose
/// endpoints are not already annotated.
pub fn select_confident_pairs(
    cache: &EmbeddingCache,
    pair: &NetworkPair,
    exclude: &AnnotationSet,
    k_c: usize,
) -> Result<Vec<CandidatePair>> {
    let used_s = exclude.sources();
    let used_t = exclude.targets();
    let free_s: Vec<usize> = (0..pair.source.len()).filter(|s| !used_s.contains(s)).collect();
    let free_t: Vec<usize> = (0..pair.target.len()).filter(|t| !used_t.contains(t)).collect();
    if k_c > free_s.len().min(free_t.len()) {
        return Err(Error::Config(format!(
            "{k_c} confident pairs requested but only {} unlabeled sources and {} unlabeled targets remain",
            free_s.len(),
            free_t.len()
        )));
    }
    let mut scored = Vec::with_capacity(free_s.len() * free_t.len());
    for &s in &free_s {
        for &t in &free_t {
            scored.push((s, t, cache.score(s, t)));
        }
    }
    scored.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap_or(Ordering::Equal)
            .then_with(|| pair.source.user(a.0).id.cmp(&pair.source.user(b.0).id))
            .then_with(|| pair.target.user(a.1).id.cmp(&pair.target.user(b.1).id))
    });
    let mut taken_s = HashSet::new();
    let mut taken_t = HashSet::new();
    let mut out = Vec::with_capacity(k_c);
    for (s, t, score) in scored {
        if out.len() == k_c {
            break;
        }
        if taken_s.contains(&s) || taken_t.contains(&t) {
            continue;
        }
        taken_s.insert(s);
        taken_t.insert(t);
        out.push(candidate(cache, pair, Link::new(s, t), score));
    }
    Ok(out)
}

fn candidate(cache: &EmbeddingCache, pair: &NetworkPair, link: Link, score: f64) -> CandidatePair {
    let (s, t) = pair.link_ids(&link);
    CandidatePair {
        link,
        source: s.to_string(),
        target: t.to_string(),
        source_mean: cache.source[link.source].gaussian.mean.clone(),
        target_mean: cache.target[link.target].gaussian.mean.clone(),
        score,
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn log_isotropic(x: &[f64], mean: &[f64], variance: f64) -> f64 {
    let d = x.len() as f64;
    -0.5 * d * (2.0 * PI * variance).ln() - sq_dist(x, mean) / (2.0 * variance)
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Log densities of the matched and noise components weighted by their priors.
fn weighted_logs(target: &[f64], source: &[f64], state: &EmState) -> (f64, f64) {
    let matched = state.gamma.ln() + log_isotropic(target, source, state.match_variance);
    let noise = (1.0 - state.gamma).ln() + log_isotropic(target, &state.noise_mean, state.noise_variance);
    (matched, noise)
}

fn check_dims(target: &[f64], source: &[f64], state: &EmState) -> Result<()> {
    let d = state.noise_mean.len();
    for v in [target, source] {
        if v.len() != d {
            return Err(Error::Dimension { expected: d, got: v.len() });
        }
    }
    Ok(())
}

pub fn log_mixture_density(target: &[f64], source: &[f64], state: &EmState) -> Result<f64> {
    if !(state.match_variance > 0.0 && state.noise_variance > 0.0) {
        return Err(Error::Data("mixture variances must be positive".into()));
    }
    check_dims(target, source, state)?;
    // the endpoints are allowed here so each component can be isolated
    let lg = |w: f64| if w <= 0.0 { f64::NEG_INFINITY } else { w.ln() };
    let matched = lg(state.gamma) + log_isotropic(target, source, state.match_variance);
    let noise = lg(1.0 - state.gamma) + log_isotropic(target, &state.noise_mean, state.noise_variance);
    Ok(log_sum_exp(matched, noise))
}

/// Density of a target mean given its candidate source mean.
pub fn mixture_density(target: &[f64], source: &[f64], state: &EmState) -> Result<f64> {
    log_mixture_density(target, source, state).map(f64::exp)
}

/// Posterior probability that the candidate is a true match.
pub fn responsibility(target: &[f64], source: &[f64], state: &EmState) -> f64 {
    let (m, n) = weighted_logs(target, source, state);
    1.0 / (1.0 + (n - m).exp())
}

/// Observed-data log-likelihood of the candidates.
pub fn log_likelihood(state: &EmState, candidates: &[CandidatePair]) -> f64 {
    candidates
        .iter()
        .map(|c| {
            let (m, n) = weighted_logs(&c.target_mean, &c.source_mean, state);
            log_sum_exp(m, n)
        })
        .sum()
}

/// Matched variance from annotated mean pairs, noise component from the
/// whole target platform, and an even prior.
pub fn em_initialize(annotated: &[(Vec<f64>, Vec<f64>)], target_means: &[Vec<f64>]) -> Result<EmState> {
    let (first, _) =
        annotated.first().ok_or_else(|| Error::InsufficientAnnotations("EM needs at least one annotation".into()))?;
    let d = first.len();
    if d == 0 || target_means.is_empty() {
        return Err(Error::Data("EM needs non-empty means and target platform".into()));
    }
    for (s, t) in annotated {
        if s.len() != d || t.len() != d {
            return Err(Error::Dimension { expected: d, got: if s.len() != d { s.len() } else { t.len() } });
        }
    }
    let spread: f64 = annotated.iter().map(|(s, t)| sq_dist(s, t)).sum();
    let match_variance = (spread / (annotated.len() * d) as f64).max(VARIANCE_FLOOR);
    let (noise_mean, noise_variance) = mean_and_variance(target_means.iter().map(|v| (v.as_slice(), 1.0)), d)?;
    Ok(EmState { gamma: 0.5, previous_gamma: 0.5, match_variance, noise_mean, noise_variance, iteration: 0 })
}

/// Weighted mean and scalar variance averaged over dimensions.
fn mean_and_variance<'a>(items: impl Iterator<Item = (&'a [f64], f64)> + Clone, d: usize) -> Result<(Vec<f64>, f64)> {
    let mut mean = vec![0.0; d];
    let mut total = 0.0;
    for (v, w) in items.clone() {
        if v.len() != d {
            return Err(Error::Dimension { expected: d, got: v.len() });
        }
        for (m, x) in mean.iter_mut().zip(v) {
            *m += w * x;
        }
        total += w;
    }
    for m in &mut mean {
        *m /= total;
    }
    let spread: f64 = items.map(|(v, w)| w * sq_dist(v, &mean)).sum();
    Ok((mean, (spread / (total * d as f64)).max(VARIANCE_FLOOR)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Degenerate {
    /// Nothing accepted; the matched component was left unchanged.
    NoneAccepted,
    /// Everything accepted; the noise component was left unchanged.
    AllAccepted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmStep {
    pub state: EmState,
    pub responsibilities: Vec<f64>,
    /// Indices into the candidate list with responsibility above the threshold.
    pub accepted: Vec<usize>,
    pub degenerate: Option<Degenerate>,
}

pub fn em_iterate(state: &EmState, candidates: &[CandidatePair], threshold: f64, m_step: MStep) -> Result<EmStep> {
    if candidates.is_empty() {
        return Err(Error::Data("EM needs at least one candidate".into()));
    }
    state.validate()?;
    for c in candidates {
        check_dims(&c.target_mean, &c.source_mean, state)?;
    }
    let g: Vec<f64> = candidates.iter().map(|c| responsibility(&c.target_mean, &c.source_mean, state)).collect();
    let accepted: Vec<usize> = (0..g.len()).filter(|&i| g[i] > threshold).collect();
    let d = state.noise_mean.len();
    let k_c = candidates.len();
    let k_t = accepted.len();
    let mut next = state.clone();
    next.previous_gamma = state.gamma;
    next.iteration += 1;
    let degenerate = match k_t {
        0 => Some(Degenerate::NoneAccepted),
        k if k == k_c => Some(Degenerate::AllAccepted),
        _ => None,
    };
    let weights: Vec<(f64, f64)> = match m_step {
        MStep::Hard => g.iter().map(|&x| if x > threshold { (1.0, 0.0) } else { (0.0, 1.0) }).collect(),
        MStep::Soft => g.iter().map(|&x| (x, 1.0 - x)).collect(),
    };
    let matched: f64 = weights.iter().map(|w| w.0).sum();
    let noise: f64 = weights.iter().map(|w| w.1).sum();
    if matched > 0.0 {
        let spread: f64 =
            candidates.iter().zip(&weights).map(|(c, w)| w.0 * sq_dist(&c.source_mean, &c.target_mean)).sum();
        next.match_variance = (spread / (matched * d as f64)).max(VARIANCE_FLOOR);
    }
    if noise > 0.0 {
        let (mean, var) =
            mean_and_variance(candidates.iter().zip(&weights).map(|(c, w)| (c.target_mean.as_slice(), w.1)), d)?;
        next.noise_mean = mean;
        next.noise_variance = var;
    }
    next.gamma = (matched / k_c as f64).clamp(GAMMA_MIN, GAMMA_MAX);
    Ok(EmStep { state: next, responsibilities: g, accepted, degenerate })
}

/// One EM round as written to the audit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmRound {
    pub inner: usize,
    pub gamma: f64,
    pub previous_gamma: f64,
    pub match_variance: f64,
    pub noise_variance: f64,
    pub accepted_count: usize,
    pub degenerate: Option<Degenerate>,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub candidates: Vec<CandidatePair>,
    pub accepted: Vec<Link>,
    pub rounds: Vec<EmRound>,
    pub state: EmState,
}

fn links_of(candidates: &[CandidatePair], idx: &[usize]) -> Vec<Link> {
    idx.iter().map(|&i| candidates[i].link).collect()
}

fn refresh_means(candidates: &mut [CandidatePair], cache: &EmbeddingCache) {
    for c in candidates {
        c.source_mean = cache.source[c.link.source].gaussian.mean.clone();
        c.target_mean = cache.target[c.link.target].gaussian.mean.clone();
        c.score = cache.score(c.link.source, c.link.target);
    }
}

/// Selects confident pairs for the current annotations and keeps the ones
/// the mixture attributes to the matched component.
pub fn run_noise_filter(
    model: &mut LinkageModel,
    pair: &NetworkPair,
    cfg: &SelfLearnConfig,
    train: &TrainConfig,
    ground_truth: Option<&[Link]>,
) -> Result<FilterOutcome> {
    cfg.validate()?;
    let annotations = &pair.annotations;
    let cache = model.embed_all(pair)?;
    let mut candidates = select_confident_pairs(&cache, pair, annotations, cfg.confident_pairs)?;
    let annotated_means: Vec<(Vec<f64>, Vec<f64>)> = annotations
        .links()
        .iter()
        .map(|l| (cache.source[l.source].gaussian.mean.clone(), cache.target[l.target].gaussian.mean.clone()))
        .collect();
    let targets: Vec<Vec<f64>> = cache.target.iter().map(|e| e.gaussian.mean.clone()).collect();
    let mut state = em_initialize(&annotated_means, &targets)?;
    let mut rounds = Vec::new();
    let mut accepted = Vec::new();
    for inner in 0..cfg.max_inner_iterations {
        let step = em_iterate(&state, &candidates, cfg.threshold, cfg.m_step)?;
        accepted = links_of(&candidates, &step.accepted);
        state = step.state;
        rounds.push(EmRound {
            inner,
            gamma: state.gamma,
            previous_gamma: state.previous_gamma,
            match_variance: state.match_variance,
            noise_variance: state.noise_variance,
            accepted_count: accepted.len(),
            degenerate: step.degenerate,
            accuracy: ground_truth.map(|gt| confident_pair_accuracy(&accepted, gt)),
        });
        if state.converged(cfg.epsilon) {
            break;
        }
        if cfg.fine_tune_in_loop && cfg.fine_tune_epochs > 0 {
            let tuned = pair.with_annotations(annotations.extended(&accepted));
            let round_cfg = TrainConfig { seed: train.seed.wrapping_add(1 + inner as u64), ..train.clone() };
            fit(model, &tuned, &round_cfg, Some(cfg.fine_tune_epochs))?;
            refresh_means(&mut candidates, &model.embed_all(pair)?);
        }
    }
    Ok(FilterOutcome { candidates, accepted, rounds, state })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub annotations: usize,
    pub added: usize,
    pub candidate_accuracy: Option<f64>,
    pub added_accuracy: Option<f64>,
    /// Mean Hit-Precision aligned with the evaluation `ks`.
    pub hit_precision: Option<Vec<f64>>,
}

/// One JSON line of the self-learning audit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AuditEntry {
    Em { outer: usize, round: EmRound },
    Iteration { vanilla: bool, accepted: Vec<(String, String)>, metrics: IterationMetrics },
}

#[derive(Debug)]
pub struct SelfLearnOutcome {
    pub model: LinkageModel,
    pub annotations: AnnotationSet,
    pub metrics: Vec<IterationMetrics>,
    pub audit: Vec<AuditEntry>,
}

impl SelfLearnOutcome {
    pub fn write_audit(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for e in &self.audit {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Held-out evaluation run after every outer iteration.
#[derive(Debug, Clone, Copy)]
pub struct Checkpoints<'a> {
    pub eval: &'a EvalConfig,
    pub ground_truth: &'a [Link],
}

/// Trains on the pair's annotations, then repeatedly adds filtered (or raw)
/// confident pairs and fine-tunes.
pub fn self_learning_loop(
    pair: &NetworkPair,
    model_cfg: &ModelConfig,
    train: &TrainConfig,
    cfg: &SelfLearnConfig,
    words: Option<&EmbeddingTable>,
    checkpoints: Option<Checkpoints<'_>>,
) -> Result<SelfLearnOutcome> {
    let (model, _) = train_supervised(pair, model_cfg, train, words)?;
    continue_self_learning(model, pair, train, cfg, checkpoints)
}

/// [`self_learning_loop`] starting from an already trained model.
pub fn continue_self_learning(
    mut model: LinkageModel,
    pair: &NetworkPair,
    train: &TrainConfig,
    cfg: &SelfLearnConfig,
    checkpoints: Option<Checkpoints<'_>>,
) -> Result<SelfLearnOutcome> {
    cfg.validate()?;
    let original = pair.annotations.clone();
    let ground_truth = checkpoints.map(|c| c.ground_truth);
    let measure = |model: &LinkageModel| -> Result<Option<Vec<f64>>> {
        match checkpoints {
            Some(c) => {
                let cache = model.embed_all(pair)?;
                Ok(Some(evaluate_model(&cache, pair, c.ground_truth, &original, c.eval)?.mean))
            }
            None => Ok(None),
        }
    };
    let mut annotations = original.clone();
    let first = IterationMetrics {
        iteration: 0,
        annotations: annotations.len(),
        added: 0,
        candidate_accuracy: None,
        added_accuracy: None,
        hit_precision: measure(&model)?,
    };
    let mut audit = vec![AuditEntry::Iteration { vanilla: cfg.vanilla, accepted: vec![], metrics: first.clone() }];
    let mut metrics = vec![first];
    for outer in 1..=cfg.outer_iterations {
        let current = pair.with_annotations(annotations.clone());
        let round_train = TrainConfig { seed: train.seed.wrapping_add(1000 * outer as u64), ..train.clone() };
        let (candidates, added) = if cfg.vanilla {
            let cache = model.embed_all(&current)?;
            let c = select_confident_pairs(&cache, &current, &annotations, cfg.confident_pairs)?;
            let links: Vec<Link> = c.iter().map(|c| c.link).collect();
            (c, links)
        } else {
            let f = run_noise_filter(&mut model, &current, cfg, &round_train, ground_truth)?;
            audit.extend(f.rounds.into_iter().map(|round| AuditEntry::Em { outer, round }));
            (f.candidates, f.accepted)
        };
        annotations = annotations.extended(&added);
        if cfg.fine_tune_epochs > 0 && !added.is_empty() {
            fit(&mut model, &pair.with_annotations(annotations.clone()), &round_train, Some(cfg.fine_tune_epochs))?;
        }
        let raw: Vec<Link> = candidates.iter().map(|c| c.link).collect();
        let m = IterationMetrics {
            iteration: outer,
            annotations: annotations.len(),
            added: added.len(),
            candidate_accuracy: ground_truth.map(|gt| confident_pair_accuracy(&raw, gt)),
            added_accuracy: ground_truth.map(|gt| confident_pair_accuracy(&added, gt)),
            hit_precision: measure(&model)?,
        };
        log::info!("self-learning iteration {outer}: {m:?}");
        let accepted = added.iter().map(|l| {
            let (s, t) = pair.link_ids(l);
            (s.to_string(), t.to_string())
        });
        audit.push(AuditEntry::Iteration { vanilla: cfg.vanilla, accepted: accepted.collect(), metrics: m.clone() });
        metrics.push(m);
    }
    Ok(SelfLearnOutcome { model, annotations, metrics, audit })
}
