//! Command-line front end: dataset generation, training, self-learning,
//! evaluation and attention export.

pub mod config;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use config::{Resolved, RunConfig};
use idlink_core::corpus::{
    generate_synthetic_pair, load_embeddings, load_links, load_network_pair, EmbeddingTable, Link, LoadOptions,
    NetworkPair, Side,
};
use idlink_core::eval::{
    confident_pair_accuracy, evaluate_model, export_attention, held_out, sparsity_sweep, EvalReport, PhaseTimer,
    SweepSetup,
};
use idlink_core::linkage::{train_supervised, LinkageModel, Scorer, TrainReport};
use idlink_core::selflearn::{
    continue_self_learning, run_noise_filter, select_confident_pairs, Checkpoints, SelfLearnConfig,
};
use std::collections::HashSet;
use std::path::{Path, PathBuf};

pub const OUT_ENV: &str = "IDLINK_OUT";

#[derive(Debug, Parser)]
#[command(name = "idlink", version, about = "Match user accounts across two social networks")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = OUT_ENV, default_value = "runs")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic network pair with ground truth.
    Generate(GenerateArgs),
    /// Train the supervised linkage model.
    Train(TrainArgs),
    /// Add filtered pseudo-labels to a trained model.
    Selflearn(SelflearnArgs),
    /// Report Hit-Precision on held-out ground truth.
    Evaluate(EvaluateArgs),
    /// Print the attention weights of one user as JSON.
    Visualize(VisualizeArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub users: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SelflearnArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Add raw confident pairs without the noise filter.
    #[arg(long)]
    pub vanilla: bool,
    #[arg(long)]
    pub outer: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Score with the ground truth itself.
    #[arg(long)]
    pub oracle: bool,
    /// Retrain and evaluate at every configured sparsity ratio.
    #[arg(long)]
    pub sparsity: bool,
    /// Report the accuracy of the confident pairs before and after filtering.
    #[arg(long)]
    pub audit: bool,
    #[arg(long)]
    pub test_pairs: Option<usize>,
    #[arg(long)]
    pub repetitions: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SideArg {
    Source,
    Target,
}

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub user: String,
    #[arg(long, value_enum, default_value = "source")]
    pub side: SideArg,
    /// Also write word-level weights as CSV.
    #[arg(long)]
    pub heatmap: Option<PathBuf>,
}

/// Configuration or usage problem, reported with exit code 1.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

/// 1 for usage and configuration errors, 2 for data errors, 3 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use idlink_core::Error as E;
    for cause in err.chain() {
        if cause.is::<UsageError>() || cause.is::<toml::de::Error>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config(_) => 1,
                E::Parse { .. }
                | E::UnknownUser { .. }
                | E::Data(_)
                | E::Dimension { .. }
                | E::InsufficientAnnotations(_)
                | E::Io { .. }
                | E::Serde(_) => 2,
            };
        }
    }
    3
}

pub fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| UsageError(format!("{}: {e}", p.display())))?;
            RunConfig::from_toml(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    let data_flag = match &cli.command {
        Command::Generate(a) => &a.data,
        Command::Train(a) => &a.data,
        Command::Selflearn(a) => &a.data,
        Command::Evaluate(a) => &a.data,
        Command::Visualize(a) => &a.data,
    };
    if let Some(d) = &data_flag.data {
        cfg.paths.data = Some(d.clone());
    }
    match &cli.command {
        Command::Generate(a) => {
            if let Some(u) = a.users {
                cfg.synth.users_per_side = u;
            }
            if let Some(n) = a.noise {
                cfg.synth.profile_noise = n;
            }
        }
        Command::Train(a) => {
            if let Some(e) = a.epochs {
                cfg.train.max_epochs = e;
            }
            if let Some(lr) = a.learning_rate {
                cfg.train.learning_rate = lr;
            }
        }
        Command::Selflearn(a) => {
            cfg.selflearn.vanilla |= a.vanilla;
            if let Some(o) = a.outer {
                cfg.selflearn.outer_iterations = o;
            }
            if let Some(c) = &a.checkpoint {
                cfg.paths.checkpoint = Some(c.clone());
            }
        }
        Command::Evaluate(a) => {
            if let Some(n) = a.test_pairs {
                cfg.eval.test_pairs = n;
            }
            if let Some(r) = a.repetitions {
                cfg.eval.repetitions = r;
            }
            if let Some(c) = &a.checkpoint {
                cfg.paths.checkpoint = Some(c.clone());
            }
        }
        Command::Visualize(a) => {
            if let Some(c) = &a.checkpoint {
                cfg.paths.checkpoint = Some(c.clone());
            }
        }
    }
    cfg.validate()?;
    let paths = Resolved::new(&cfg.paths, &cli.out);
    std::fs::create_dir_all(&paths.out).with_context(|| format!("creating {}", paths.out.display()))?;
    match &cli.command {
        Command::Generate(_) => cmd_generate(&cfg, &paths).map(|_| ()),
        Command::Train(_) => cmd_train(&cfg, &paths).map(|_| ()),
        Command::Selflearn(_) => cmd_selflearn(&cfg, &paths),
        Command::Evaluate(a) => cmd_evaluate(&cfg, &paths, a),
        Command::Visualize(a) => {
            use std::io::Write;
            let json = cmd_visualize(&paths, &cfg, a)?;
            match writeln!(std::io::stdout().lock(), "{json}") {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
                _ => Ok(()),
            }
        }
    }
}

pub fn cmd_generate(cfg: &RunConfig, paths: &Resolved) -> Result<Vec<PathBuf>> {
    let ds = generate_synthetic_pair(&cfg.synth)?;
    let files = ds.write_to(&paths.data)?;
    log::info!(
        "wrote {} users per side, {} annotations, {} ground-truth pairs to {}",
        cfg.synth.users_per_side,
        ds.pair.annotations.len(),
        ds.ground_truth.len(),
        paths.data.display()
    );
    Ok(files)
}

fn load_opts(cfg: &RunConfig, model: Option<&LinkageModel>) -> LoadOptions {
    LoadOptions {
        limits: (&cfg.limits).into(),
        words: model.map(|m| m.words.clone()),
        demographics: model.map(|m| m.demographics.clone()),
    }
}

fn load_pair(cfg: &RunConfig, paths: &Resolved, model: Option<&LinkageModel>) -> Result<NetworkPair> {
    let (pair, warnings) = load_network_pair(&paths.dataset(), &load_opts(cfg, model))
        .with_context(|| format!("loading dataset from {}", paths.data.display()))?;
    for w in warnings {
        log::warn!("{w}");
    }
    Ok(pair)
}

fn load_checkpoint(paths: &Resolved) -> Result<LinkageModel> {
    LinkageModel::load(&paths.checkpoint).with_context(|| format!("loading checkpoint {}", paths.checkpoint.display()))
}

fn load_ground_truth(paths: &Resolved, pair: &NetworkPair) -> Result<Vec<Link>> {
    load_links(&paths.ground_truth, pair)
        .with_context(|| format!("loading ground truth {}", paths.ground_truth.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn write_csv<R: AsRef<str>>(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<R>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r.iter().map(|c| c.as_ref()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_training_curve(path: &Path, report: &TrainReport) -> Result<()> {
    let rows = report.epoch_losses.iter().enumerate().map(|(i, p)| {
        vec![
            (i + 1).to_string(),
            p.linkage.to_string(),
            p.regularizer.to_string(),
            p.reconstruction_source.to_string(),
            p.reconstruction_target.to_string(),
            p.total.to_string(),
        ]
    });
    write_csv(
        path,
        &["epoch", "linkage", "regularizer", "reconstruction_source", "reconstruction_target", "total"],
        rows,
    )
}

/// Word vectors from the configured file, or seeded random ones.
fn word_table(cfg: &RunConfig, paths: &Resolved, pair: &NetworkPair) -> Result<Option<EmbeddingTable>> {
    if cfg.paths.embeddings.is_none() && !paths.embeddings.exists() {
        log::warn!("no embedding file at {}; using random word vectors", paths.embeddings.display());
        return Ok(None);
    }
    let table = load_embeddings(&paths.embeddings, &pair.words, cfg.train.seed)
        .with_context(|| format!("loading embeddings {}", paths.embeddings.display()))?;
    log::info!("{} word vectors from file, {} random", table.from_file, table.random_init);
    Ok(Some(table))
}

pub fn cmd_train(cfg: &RunConfig, paths: &Resolved) -> Result<LinkageModel> {
    let mut timer = PhaseTimer::new();
    let pair = timer.time("load", || load_pair(cfg, paths, None))?;
    let table = word_table(cfg, paths, &pair)?;
    let mut model_cfg = cfg.model.clone();
    if let Some(t) = &table {
        if t.dim != model_cfg.encoder.word_dim {
            log::info!("word_dim set to {} to match the embedding file", t.dim);
            model_cfg.encoder.word_dim = t.dim;
        }
    }
    let (model, report) = timer.time("train", || train_supervised(&pair, &model_cfg, &cfg.train, table.as_ref()))?;
    log::info!(
        "trained {} epochs ({} steps, converged: {}), final loss {:.5}",
        report.epoch_losses.len(),
        report.steps,
        report.converged,
        report.epoch_losses.last().map_or(f64::NAN, |p| p.total)
    );
    model.save(&paths.checkpoint)?;
    write_training_curve(&paths.out.join("training_curve.csv"), &report)?;
    write_json(&paths.out.join("train_timings.json"), &timer.report())?;
    Ok(model)
}

pub fn cmd_selflearn(cfg: &RunConfig, paths: &Resolved) -> Result<()> {
    let mut timer = PhaseTimer::new();
    let model = load_checkpoint(paths)?;
    let pair = load_pair(cfg, paths, Some(&model))?;
    let ground_truth = if paths.ground_truth.exists() { Some(load_ground_truth(paths, &pair)?) } else { None };
    let eval = fit_eval_config(cfg, ground_truth.as_deref(), &pair);
    let checkpoints = ground_truth.as_deref().map(|gt| Checkpoints { eval: &eval, ground_truth: gt });
    let out =
        timer.time("self_learn", || continue_self_learning(model, &pair, &cfg.train, &cfg.selflearn, checkpoints))?;
    out.model.save(&paths.out.join("model_selflearn.json"))?;
    out.write_audit(&paths.out.join("audit.jsonl"))?;
    let ks = &eval.ks;
    let mut header = vec![
        "iteration".to_string(),
        "annotations".into(),
        "added".into(),
        "candidate_accuracy".into(),
        "added_accuracy".into(),
    ];
    header.extend(ks.iter().map(|k| format!("hit_precision@{k}")));
    let rows = out.metrics.iter().map(|m| {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let mut r = vec![
            m.iteration.to_string(),
            m.annotations.to_string(),
            m.added.to_string(),
            opt(m.candidate_accuracy),
            opt(m.added_accuracy),
        ];
        match &m.hit_precision {
            Some(h) => r.extend(h.iter().map(|x| x.to_string())),
            None => r.extend(ks.iter().map(|_| String::new())),
        }
        r
    });
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(&paths.out.join("selflearn_metrics.csv"), &header, rows)?;
    write_json(&paths.out.join("selflearn_timings.json"), &timer.report())?;
    Ok(())
}

/// Self-learning checkpoints evaluate on every held-out pair when the
/// configured test count does not fit.
fn fit_eval_config(
    cfg: &RunConfig,
    ground_truth: Option<&[Link]>,
    pair: &NetworkPair,
) -> idlink_core::eval::EvalConfig {
    let mut eval = cfg.eval.clone();
    if let Some(gt) = ground_truth {
        let held = held_out(gt, &pair.annotations).len();
        if eval.test_pairs > held && held > 0 {
            log::warn!("only {held} held-out pairs; checkpoints use all of them");
            eval.test_pairs = held;
        }
    }
    eval
}

struct Oracle(HashSet<Link>);

impl Scorer for Oracle {
    fn score(&self, source: usize, target: usize) -> f64 {
        if self.0.contains(&Link::new(source, target)) {
            1.0
        } else {
            0.0
        }
    }
}

fn write_report(out: &Path, name: &str, report: &EvalReport) -> Result<()> {
    report.write_csv(&out.join(format!("{name}.csv")))?;
    report.write_ranks_jsonl(&out.join(format!("{name}_ranks.jsonl")))?;
    let summary = serde_json::json!({"ks": report.ks, "mean": report.mean, "repetitions": report.repetitions});
    write_json(&out.join(format!("{name}.json")), &summary)
}

pub fn cmd_evaluate(cfg: &RunConfig, paths: &Resolved, args: &EvaluateArgs) -> Result<()> {
    let mut timer = PhaseTimer::new();
    if args.oracle {
        let pair = load_pair(cfg, paths, None)?;
        let gt = load_ground_truth(paths, &pair)?;
        let oracle = Oracle(gt.iter().copied().collect());
        let report = timer.time("evaluate", || evaluate_model(&oracle, &pair, &gt, &pair.annotations, &cfg.eval))?;
        write_report(&paths.out, "oracle_eval", &report)?;
        println!("{}", summary_line(&report));
        return Ok(());
    }
    let model = load_checkpoint(paths)?;
    let pair = load_pair(cfg, paths, Some(&model))?;
    let gt = load_ground_truth(paths, &pair)?;
    let cache = timer.time("embed", || model.embed_all(&pair))?;
    let report = timer.time("evaluate", || evaluate_model(&cache, &pair, &gt, &pair.annotations, &cfg.eval))?;
    write_report(&paths.out, "eval", &report)?;
    println!("{}", summary_line(&report));
    if args.audit {
        let audit = timer.time("audit", || audit_confident_pairs(&model, &pair, &gt, &cfg.selflearn, cfg))?;
        write_json(&paths.out.join("confident_audit.json"), &audit)?;
    }
    if args.sparsity {
        let table = word_table(cfg, paths, &pair)?;
        let setup = SweepSetup {
            pair: &pair,
            ground_truth: &gt,
            words: table.as_ref(),
            model: &model.config,
            train: &cfg.train,
            eval: &cfg.eval,
        };
        let sweep = timer.time("sparsity", || {
            sparsity_sweep(&setup, &cfg.sparsity.relations, &cfg.sparsity.microblogs, cfg.eval.seed)
        })?;
        sweep.write_csv(&paths.out.join("sparsity.csv"))?;
        write_json(&paths.out.join("sparsity.json"), &sweep.plot_json())?;
    }
    write_json(&paths.out.join("eval_timings.json"), &timer.report())?;
    Ok(())
}

fn summary_line(report: &EvalReport) -> String {
    report.ks.iter().zip(&report.mean).map(|(k, v)| format!("hit_precision@{k}={v:.4}")).collect::<Vec<_>>().join(" ")
}

/// Raw confident-pair accuracy against the accuracy of the pairs the
/// mixture filter keeps, on a copy of the model with in-loop tuning off.
fn audit_confident_pairs(
    model: &LinkageModel,
    pair: &NetworkPair,
    gt: &[Link],
    sl: &SelfLearnConfig,
    cfg: &RunConfig,
) -> Result<serde_json::Value> {
    let cache = model.embed_all(pair)?;
    let raw = select_confident_pairs(&cache, pair, &pair.annotations, sl.confident_pairs)?;
    let raw_links: Vec<Link> = raw.iter().map(|c| c.link).collect();
    let mut copy = model.clone();
    let no_tune = SelfLearnConfig { fine_tune_in_loop: false, ..sl.clone() };
    let filtered = run_noise_filter(&mut copy, pair, &no_tune, &cfg.train, Some(gt))?;
    let ids = |links: &[Link]| -> Vec<(String, String)> {
        links.iter().map(|l| pair.link_ids(l)).map(|(s, t)| (s.to_string(), t.to_string())).collect()
    };
    Ok(serde_json::json!({
        "confident_pairs": raw_links.len(),
        "raw_accuracy": confident_pair_accuracy(&raw_links, gt),
        "filtered_pairs": filtered.accepted.len(),
        "filtered_accuracy": confident_pair_accuracy(&filtered.accepted, gt),
        "gamma": filtered.state.gamma,
        "raw": ids(&raw_links),
        "filtered": ids(&filtered.accepted),
    }))
}

pub fn cmd_visualize(paths: &Resolved, cfg: &RunConfig, args: &VisualizeArgs) -> Result<String> {
    let model = load_checkpoint(paths)?;
    let pair = load_pair(cfg, paths, Some(&model))?;
    let side = match args.side {
        SideArg::Source => Side::Source,
        SideArg::Target => Side::Target,
    };
    let export = export_attention(&model, &pair, side, &args.user)?;
    if let Some(path) = &args.heatmap {
        let mut rows = Vec::new();
        for m in &export.trace.microblogs {
            for s in &m.sentences {
                for (w, weight) in s.words.iter().enumerate() {
                    rows.push(vec![
                        m.index.to_string(),
                        s.index.to_string(),
                        w.to_string(),
                        export.tokens[m.index][s.index][w].clone(),
                        weight.to_string(),
                        s.weight.to_string(),
                        m.weight.to_string(),
                    ]);
                }
            }
        }
        write_csv(
            path,
            &["microblog", "sentence", "position", "token", "word_weight", "sentence_weight", "microblog_weight"],
            rows,
        )?;
    }
    serde_json::to_string_pretty(&export).map_err(|e| anyhow!(e))
}
