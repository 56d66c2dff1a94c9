//! Hit-Precision, ranking evaluation, confident-pair audits, sparsity sweeps,
//! attention export and phase timing.

use crate::corpus::{apply_sparsity_to_pair, AnnotationSet, EmbeddingTable, Link, NetworkPair, Side, SocialNetwork};
use crate::encoder::AttentionTrace;
use crate::error::{Error, Result};
use crate::linkage::{train_supervised, LinkageModel, ModelConfig, Scorer, TrainConfig};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::time::Instant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    /// Test pairs sampled per repetition.
    pub test_pairs: usize,
    /// Share of ground-truth pairs used as training annotations.
    pub training_ratio: f64,
    pub repetitions: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { ks: vec![3, 5, 10], test_pairs: 300, training_ratio: 0.1, repetitions: 5, seed: 13 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::Config("ks must be a non-empty list of positive cut-offs".into()));
        }
        if !(self.training_ratio > 0.0 && self.training_ratio < 1.0) {
            return Err(Error::Config("training_ratio must lie in (0, 1)".into()));
        }
        if self.repetitions == 0 || self.test_pairs == 0 {
            return Err(Error::Config("repetitions and test_pairs must be positive".into()));
        }
        Ok(())
    }
}

/// `(k - (rank - 1)) / k` inside the top `k`, zero below it.
pub fn hit_score(rank: usize, k: usize) -> f64 {
    if rank >= 1 && rank <= k {
        (k + 1 - rank) as f64 / k as f64
    } else {
        0.0
    }
}

/// 1-based position of `truth` in `ranked`.
pub fn hit_rank(ranked: &[usize], truth: usize) -> Option<usize> {
    ranked.iter().position(|&t| t == truth).map(|p| p + 1)
}

/// Mean Hit-Precision over ranked candidate lists, one per test source.
pub fn hit_precision(ranked: &[Vec<usize>], truth: &[usize], k: usize) -> Result<f64> {
    if ranked.len() != truth.len() {
        return Err(Error::Dimension { expected: ranked.len(), got: truth.len() });
    }
    if ranked.is_empty() {
        return Err(Error::Data("no test sources to evaluate".into()));
    }
    let mut total = 0.0;
    for (i, (list, &t)) in ranked.iter().zip(truth).enumerate() {
        let rank = hit_rank(list, t)
            .ok_or_else(|| Error::Data(format!("ground-truth target {t} missing from candidate list {i}")))?;
        total += hit_score(rank, k);
    }
    Ok(total / ranked.len() as f64)
}

/// Rank of `truth` among all targets under the ordering of
/// [`crate::linkage::rank_candidates`], without sorting.
pub fn true_rank(scorer: &impl Scorer, target: &SocialNetwork, source: usize, truth: usize) -> usize {
    let s = scorer.score(source, truth);
    let id = &target.user(truth).id;
    1 + (0..target.len())
        .filter(|&t| t != truth)
        .filter(|&t| {
            let v = scorer.score(source, t);
            v > s || (v == s && target.user(t).id < *id)
        })
        .count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceRank {
    pub source: String,
    pub target: String,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ks: Vec<usize>,
    /// Mean over repetitions, aligned with `ks`.
    pub mean: Vec<f64>,
    /// Per repetition, aligned with `ks`.
    pub repetitions: Vec<Vec<f64>>,
    pub ranks: Vec<Vec<SourceRank>>,
    pub seconds: f64,
}

impl EvalReport {
    pub fn mean_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.mean[i])
    }

    /// One row per repetition plus a final `mean` row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        let mut header = vec!["repetition".to_string()];
        header.extend(self.ks.iter().map(|k| format!("hit_precision@{k}")));
        w.write_record(&header).map_err(|e| csv_error(path, e))?;
        for (i, rep) in self.repetitions.iter().enumerate() {
            let mut row = vec![i.to_string()];
            row.extend(rep.iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(|e| csv_error(path, e))?;
        }
        let mut row = vec!["mean".to_string()];
        row.extend(self.mean.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Per-source ranks as JSON lines.
    pub fn write_ranks_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (rep, ranks) in self.ranks.iter().enumerate() {
            for r in ranks {
                let line =
                    serde_json::json!({"repetition": rep, "source": r.source, "target": r.target, "rank": r.rank});
                out.push_str(&line.to_string());
                out.push('\n');
            }
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

/// Ground-truth pairs not used for training.
pub fn held_out(ground_truth: &[Link], training: &AnnotationSet) -> Vec<Link> {
    ground_truth.iter().filter(|l| !training.contains(l)).copied().collect()
}

/// Samples `ratio` of the ground truth as training annotations.
pub fn split_annotations(ground_truth: &[Link], ratio: f64, seed: u64) -> Result<AnnotationSet> {
    let n = (ratio * ground_truth.len() as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<Link> = ground_truth.choose_multiple(&mut rng, n).copied().collect();
    picked.sort();
    AnnotationSet::new(picked)
}

/// Ranks all targets for sampled held-out sources and reports Hit-Precision
/// per cut-off, averaged over repetitions.
pub fn evaluate_model(
    scorer: &impl Scorer,
    pair: &NetworkPair,
    ground_truth: &[Link],
    training: &AnnotationSet,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    let start = Instant::now();
    let held = held_out(ground_truth, training);
    if cfg.test_pairs > held.len() {
        return Err(Error::Data(format!(
            "{} test pairs requested but only {} held-out ground-truth pairs exist",
            cfg.test_pairs,
            held.len()
        )));
    }
    let mut cache: HashMap<Link, usize> = HashMap::new();
    let mut repetitions = Vec::with_capacity(cfg.repetitions);
    let mut ranks = Vec::with_capacity(cfg.repetitions);
    for rep in 0..cfg.repetitions {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(rep as u64));
        let sample: Vec<Link> = held.choose_multiple(&mut rng, cfg.test_pairs).copied().collect();
        let rs: Vec<SourceRank> = sample
            .iter()
            .map(|l| {
                let rank = *cache.entry(*l).or_insert_with(|| true_rank(scorer, &pair.target, l.source, l.target));
                let (s, t) = pair.link_ids(l);
                SourceRank { source: s.to_string(), target: t.to_string(), rank }
            })
            .collect();
        let scores =
            cfg.ks.iter().map(|&k| rs.iter().map(|r| hit_score(r.rank, k)).sum::<f64>() / rs.len() as f64).collect();
        repetitions.push(scores);
        ranks.push(rs);
    }
    let mean = (0..cfg.ks.len())
        .map(|i| repetitions.iter().map(|r: &Vec<f64>| r[i]).sum::<f64>() / repetitions.len() as f64)
        .collect();
    Ok(EvalReport { ks: cfg.ks.clone(), mean, repetitions, ranks, seconds: start.elapsed().as_secs_f64() })
}

/// Fraction of `candidates` that are true matches; zero for no candidates.
pub fn confident_pair_accuracy(candidates: &[Link], ground_truth: &[Link]) -> f64 {
    if candidates.is_empty() {
        return 0.0;
    }
    let truth: HashSet<&Link> = ground_truth.iter().collect();
    candidates.iter().filter(|c| truth.contains(c)).count() as f64 / candidates.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparsityKind {
    Relations,
    Microblogs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityRow {
    pub kind: SparsityKind,
    pub ratio: f64,
    /// Aligned with the table's `ks`.
    pub hit_precision: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityTable {
    pub ks: Vec<usize>,
    pub rows: Vec<SparsityRow>,
}

impl SparsityTable {
    pub fn row(&self, kind: SparsityKind, ratio: f64) -> Option<&SparsityRow> {
        self.rows.iter().find(|r| r.kind == kind && r.ratio == ratio)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        let mut header = vec!["kind".to_string(), "ratio".to_string()];
        header.extend(self.ks.iter().map(|k| format!("hit_precision@{k}")));
        w.write_record(&header).map_err(|e| csv_error(path, e))?;
        for r in &self.rows {
            let kind = match r.kind {
                SparsityKind::Relations => "relations",
                SparsityKind::Microblogs => "microblogs",
            };
            let mut row = vec![kind.to_string(), r.ratio.to_string()];
            row.extend(r.hit_precision.iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Series keyed by kind, ready for plotting.
    pub fn plot_json(&self) -> serde_json::Value {
        let series = |kind: SparsityKind| {
            let rows: Vec<&SparsityRow> = self.rows.iter().filter(|r| r.kind == kind).collect();
            serde_json::json!({
                "ratio": rows.iter().map(|r| r.ratio).collect::<Vec<_>>(),
                "hit_precision": self.ks.iter().enumerate().map(|(i, k)| {
                    (format!("{k}"), serde_json::json!(rows.iter().map(|r| r.hit_precision[i]).collect::<Vec<_>>()))
                }).collect::<serde_json::Map<_, _>>(),
            })
        };
        serde_json::json!({
            "ks": self.ks,
            "relations": series(SparsityKind::Relations),
            "microblogs": series(SparsityKind::Microblogs),
        })
    }
}

/// Everything a sweep needs to retrain from scratch at every ratio.
#[derive(Debug, Clone)]
pub struct SweepSetup<'a> {
    pub pair: &'a NetworkPair,
    pub ground_truth: &'a [Link],
    pub words: Option<&'a EmbeddingTable>,
    pub model: &'a ModelConfig,
    pub train: &'a TrainConfig,
    pub eval: &'a EvalConfig,
}

/// Trains and evaluates a supervised model on `pair`.
pub fn train_and_evaluate(setup: &SweepSetup<'_>, pair: &NetworkPair) -> Result<EvalReport> {
    let (model, _) = train_supervised(pair, setup.model, setup.train, setup.words)?;
    let cache = model.embed_all(pair)?;
    evaluate_model(&cache, pair, setup.ground_truth, &pair.annotations, setup.eval)
}

/// Hit-Precision after removing each ratio of relations (with text intact)
/// and each ratio of microblogs (with relations intact).
pub fn sparsity_sweep(
    setup: &SweepSetup<'_>,
    relations: &[f64],
    microblogs: &[f64],
    seed: u64,
) -> Result<SparsityTable> {
    let mut rows = Vec::new();
    for (kind, ratios) in [(SparsityKind::Relations, relations), (SparsityKind::Microblogs, microblogs)] {
        for &ratio in ratios {
            let (rr, rt) = match kind {
                SparsityKind::Relations => (ratio, 0.0),
                SparsityKind::Microblogs => (0.0, ratio),
            };
            let sparse = apply_sparsity_to_pair(setup.pair, rr, rt, seed)?;
            let report = train_and_evaluate(setup, &sparse)?;
            log::info!("sparsity {kind:?} {ratio}: {:?}", report.mean);
            rows.push(SparsityRow { kind, ratio, hit_precision: report.mean });
        }
    }
    Ok(SparsityTable { ks: setup.eval.ks.clone(), rows })
}

/// Attention weights of one user alongside the words they weigh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionExport {
    pub side: Side,
    pub user: String,
    /// Tokens per microblog and sentence, aligned with the trace indices.
    pub tokens: Vec<Vec<Vec<String>>>,
    pub trace: AttentionTrace,
}

pub fn export_attention(
    model: &LinkageModel,
    pair: &NetworkPair,
    side: Side,
    user_id: &str,
) -> Result<AttentionExport> {
    let net = pair.network(side);
    let idx = net.require(user_id, "attention export")?;
    let (trace, _) = model.encoder(side).trace_user(net, idx)?;
    let tokens = net
        .user(idx)
        .microblogs
        .iter()
        .map(|m| m.sentences.iter().map(|s| s.iter().map(|&w| pair.words.word(w).to_string()).collect()).collect())
        .collect();
    Ok(AttentionExport { side, user: user_id.to_string(), tokens, trace })
}

/// Wall-clock time per named phase.
#[derive(Debug)]
pub struct PhaseTimer {
    start: Instant,
    phases: Vec<(String, f64)>,
}

impl Default for PhaseTimer {
    fn default() -> Self {
        Self::new()
    }
}

impl PhaseTimer {
    pub fn new() -> Self {
        Self { start: Instant::now(), phases: Vec::new() }
    }

    pub fn time<T>(&mut self, name: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        let secs = t.elapsed().as_secs_f64();
        match self.phases.iter_mut().find(|(n, _)| n == name) {
            Some((_, s)) => *s += secs,
            None => self.phases.push((name.to_string(), secs)),
        }
        out
    }

    pub fn report(&self) -> TimingReport {
        TimingReport { phases: self.phases.clone(), total: self.start.elapsed().as_secs_f64() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub phases: Vec<(String, f64)>,
    pub total: f64,
}

impl TimingReport {
    pub fn phase(&self, name: &str) -> Option<f64> {
        self.phases.iter().find(|(n, _)| n == name).map(|(_, s)| *s)
    }

    pub fn phase_sum(&self) -> f64 {
        self.phases.iter().map(|(_, s)| s).sum()
    }
}
