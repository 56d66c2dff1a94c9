use idlink_cli::config::RunConfig;
use idlink_core::corpus::{load_embeddings, load_links, load_network_pair, DatasetPaths, LoadOptions, Side};
use idlink_core::eval::{export_attention, AttentionExport};
use idlink_core::linkage::{train_supervised, LinkageModel, Scorer};
use idlink_core::selflearn::AuditEntry;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[synth]
users_per_side = 80
[model]
latent_dim = 8
mlp_dims = [16, 8]
[model.encoder]
word_dim = 16
hidden_dim = 6
demographic_dim = 4
[train]
max_epochs = 3
[eval]
test_pairs = 40
repetitions = 2
[selflearn]
confident_pairs = 10
outer_iterations = 2
fine_tune_epochs = 1
[sparsity]
relations = [0.0, 0.5]
microblogs = [0.0, 0.5]
"#;

fn idlink(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_idlink"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("IDLINK_OUT")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = idlink(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    dir
}

fn trained() -> tempfile::TempDir {
    let dir = workspace();
    ok(dir.path(), &["--config", "small.toml", "--out", "r", "generate"]);
    ok(dir.path(), &["--config", "small.toml", "--out", "r", "train"]);
    dir
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

#[test]
fn generate_writes_reloadable_reproducible_files() {
    let dir = workspace();
    ok(dir.path(), &["--config", "small.toml", "--out", "a", "generate"]);
    ok(dir.path(), &["--config", "small.toml", "--out", "b", "generate"]);
    ok(dir.path(), &["--config", "small.toml", "--seed", "9", "--out", "c", "generate"]);
    let files: Vec<_> = std::fs::read_dir(dir.path().join("a/data")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(files.len(), 7);
    for f in &files {
        assert_eq!(read(dir.path().join("a/data").join(f)), read(dir.path().join("b/data").join(f)), "{f:?}");
    }
    assert_ne!(read(dir.path().join("a/data/source_users.jsonl")), read(dir.path().join("c/data/source_users.jsonl")));
    let paths = DatasetPaths::in_dir(dir.path().join("a/data"));
    let (pair, _) = load_network_pair(&paths, &LoadOptions::default()).unwrap();
    assert_eq!((pair.source.len(), pair.target.len()), (80, 80));
    let gt = load_links(&dir.path().join("a/data").join(DatasetPaths::GROUND_TRUTH), &pair).unwrap();
    for l in pair.annotations.links() {
        assert!(gt.contains(l));
    }
}

#[test]
fn flags_override_config() {
    let dir = workspace();
    ok(dir.path(), &["--config", "small.toml", "--out", "r", "generate", "--users", "30"]);
    let paths = DatasetPaths::in_dir(dir.path().join("r/data"));
    let (pair, _) = load_network_pair(&paths, &LoadOptions::default()).unwrap();
    assert_eq!(pair.source.len(), 30);
}

#[test]
fn out_dir_comes_from_environment() {
    let dir = workspace();
    let out = Command::new(env!("CARGO_BIN_EXE_idlink"))
        .current_dir(dir.path())
        .env("IDLINK_OUT", "from_env")
        .args(["--config", "small.toml", "generate"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("from_env/data/ground_truth.jsonl").exists());
}

#[test]
fn checkpoint_reload_reproduces_scores() {
    let dir = trained();
    let r = dir.path().join("r");
    let cfg = RunConfig::from_toml(SMALL).unwrap();
    let (pair, _) = load_network_pair(&DatasetPaths::in_dir(r.join("data")), &LoadOptions::default()).unwrap();
    let table = load_embeddings(&r.join("data").join(DatasetPaths::EMBEDDINGS), &pair.words, cfg.train.seed).unwrap();
    let (expected, _) = train_supervised(&pair, &cfg.model, &cfg.train, Some(&table)).unwrap();
    let loaded = LinkageModel::load(&r.join("model.json")).unwrap();
    let (a, b) = (expected.embed_all(&pair).unwrap(), loaded.embed_all(&pair).unwrap());
    for s in 0..pair.source.len() {
        for t in 0..pair.target.len() {
            assert_eq!(a.score(s, t).to_bits(), b.score(s, t).to_bits());
        }
    }
    assert_eq!(loaded, expected);
    let curve = String::from_utf8(read(r.join("training_curve.csv"))).unwrap();
    assert!(curve.starts_with("epoch,linkage,"));
    assert_eq!(curve.lines().count(), 4);
}

#[test]
fn evaluate_reports_three_k_and_reproduces() {
    let dir = trained();
    let r = dir.path().join("r");
    let first = ok(dir.path(), &["--config", "small.toml", "--out", "r", "evaluate"]);
    let csv = read(r.join("eval.csv"));
    let json = read(r.join("eval.json"));
    let header = String::from_utf8(csv.clone()).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header, "repetition,hit_precision@3,hit_precision@5,hit_precision@10");
    let second = ok(dir.path(), &["--config", "small.toml", "--out", "r", "evaluate"]);
    assert_eq!(first.stdout, second.stdout);
    assert_eq!(csv, read(r.join("eval.csv")));
    assert_eq!(json, read(r.join("eval.json")));
}

#[test]
fn oracle_scores_one() {
    let dir = workspace();
    ok(dir.path(), &["--config", "small.toml", "--out", "r", "generate"]);
    let out = ok(dir.path(), &["--config", "small.toml", "--out", "r", "evaluate", "--oracle"]);
    let line = String::from_utf8(out.stdout).unwrap();
    assert_eq!(line.trim(), "hit_precision@3=1.0000 hit_precision@5=1.0000 hit_precision@10=1.0000");
}

#[test]
fn audit_and_sparsity_outputs() {
    let dir = trained();
    let r = dir.path().join("r");
    ok(dir.path(), &["--config", "small.toml", "--out", "r", "evaluate", "--audit", "--sparsity"]);
    let audit: serde_json::Value = serde_json::from_slice(&read(r.join("confident_audit.json"))).unwrap();
    assert_eq!(audit["confident_pairs"], 10);
    let raw = audit["raw_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&raw));
    let sparsity = String::from_utf8(read(r.join("sparsity.csv"))).unwrap();
    assert_eq!(sparsity.lines().count(), 5);
    let plot: serde_json::Value = serde_json::from_slice(&read(r.join("sparsity.json"))).unwrap();
    assert!(plot.is_object());
}

fn audit_entries(path: &Path) -> Vec<AuditEntry> {
    String::from_utf8(read(path)).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn selflearn_audit_log() {
    let dir = trained();
    let r = dir.path().join("r");
    ok(dir.path(), &["--config", "small.toml", "--out", "r", "selflearn"]);
    let log = audit_entries(&r.join("audit.jsonl"));
    let outer = |log: &[AuditEntry]| {
        log.iter().filter(|e| matches!(e, AuditEntry::Iteration { metrics, .. } if metrics.iteration > 0)).count()
    };
    assert_eq!(outer(&log), 2);
    let gammas: Vec<f64> = log
        .iter()
        .filter_map(|e| match e {
            AuditEntry::Em { round, .. } => Some(round.gamma),
            _ => None,
        })
        .collect();
    assert!(!gammas.is_empty());
    assert!(gammas.iter().all(|g| (0.0..=1.0).contains(g)));
    assert!(r.join("model_selflearn.json").exists());
    let metrics = String::from_utf8(read(r.join("selflearn_metrics.csv"))).unwrap();
    assert_eq!(metrics.lines().count(), 4);

    ok(dir.path(), &["--config", "small.toml", "--out", "r", "selflearn", "--vanilla", "--outer", "3"]);
    let log = audit_entries(&r.join("audit.jsonl"));
    assert!(log.iter().all(|e| matches!(e, AuditEntry::Iteration { vanilla: true, .. })));
    assert_eq!(outer(&log), 3);
}

#[test]
fn visualize_matches_library_export() {
    let dir = trained();
    let r = dir.path().join("r");
    let out = ok(
        dir.path(),
        &[
            "--config",
            "small.toml",
            "--out",
            "r",
            "visualize",
            "--user",
            "t0005",
            "--side",
            "target",
            "--heatmap",
            "r/heat.csv",
        ],
    );
    let cli: AttentionExport = serde_json::from_slice(&out.stdout).unwrap();
    for group in cli.trace.groups() {
        assert!((group.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    let model = LinkageModel::load(&r.join("model.json")).unwrap();
    let cfg = RunConfig::from_toml(SMALL).unwrap();
    let opts = LoadOptions {
        limits: (&cfg.limits).into(),
        words: Some(model.words.clone()),
        demographics: Some(model.demographics.clone()),
    };
    let (pair, _) = load_network_pair(&DatasetPaths::in_dir(r.join("data")), &opts).unwrap();
    assert_eq!(cli, export_attention(&model, &pair, Side::Target, "t0005").unwrap());
    let heat = String::from_utf8(read(r.join("heat.csv"))).unwrap();
    let words: usize = cli.tokens.iter().flatten().map(Vec::len).sum();
    assert_eq!(heat.lines().count(), words + 1);
}

#[test]
fn exit_codes() {
    let dir = trained();
    let code = |args: &[&str]| idlink(dir.path(), args).status.code().unwrap();
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["--no-such-flag"]), 1);
    std::fs::write(dir.path().join("unknown.toml"), "[train]\nbogus = 1\n").unwrap();
    assert_eq!(code(&["--config", "unknown.toml", "generate"]), 1);
    std::fs::write(dir.path().join("invalid.toml"), "[train]\nlearning_rate = -1.0\n").unwrap();
    assert_eq!(code(&["--config", "invalid.toml", "generate"]), 1);
    assert_eq!(code(&["--config", "missing.toml", "generate"]), 1);
    let missing = idlink(dir.path(), &["--out", "empty", "train", "--data", "nowhere"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nowhere"));
    assert_eq!(code(&["--out", "empty", "selflearn"]), 2);
    assert_eq!(code(&["--config", "small.toml", "--out", "r", "visualize", "--user", "nobody"]), 2);
}
