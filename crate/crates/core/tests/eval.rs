use idlink_core::corpus::{
    generate_synthetic_pair, AnnotationSet, Link, Microblog, NetworkPair, Side, SocialNetwork, SynthConfig,
    UserProfile, Vocab,
};
use idlink_core::encoder::EncoderConfig;
use idlink_core::eval::*;
use idlink_core::linkage::{rank_candidates, LinkageModel, LossConfig, ModelConfig, Scorer, TrainConfig};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Matrix(Vec<Vec<f64>>);

impl Scorer for Matrix {
    fn score(&self, s: usize, t: usize) -> f64 {
        self.0[s][t]
    }
}

fn network(prefix: &str, n: usize) -> SocialNetwork {
    let users = (0..n)
        .map(|i| UserProfile {
            id: format!("{prefix}{i:03}"),
            microblogs: vec![Microblog { sentences: vec![vec![i % 3]] }],
            demographics: vec![],
        })
        .collect();
    SocialNetwork::new(users, &[]).unwrap()
}

fn pair(n: usize) -> NetworkPair {
    let mut words = Vocab::new();
    for w in ["a", "b", "c"] {
        words.intern(w);
    }
    NetworkPair {
        source: network("s", n),
        target: network("t", n),
        annotations: AnnotationSet::default(),
        words,
        demographics: Vocab::new(),
    }
}

fn identity(n: usize) -> Vec<Link> {
    (0..n).map(|i| Link::new(i, i)).collect()
}

fn brute_force(ranked: &[Vec<usize>], truth: &[usize], k: usize) -> f64 {
    let mut total = 0.0;
    for (list, &t) in ranked.iter().zip(truth) {
        for (pos, &c) in list.iter().enumerate() {
            if c == t && pos < k {
                total += (k - pos) as f64 / k as f64;
            }
        }
    }
    total / ranked.len() as f64
}

#[test]
fn hit_score_examples() {
    assert_eq!(hit_score(1, 3), 1.0);
    assert!((hit_score(2, 3) - 2.0 / 3.0).abs() < 1e-15);
    assert!((hit_score(3, 3) - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(hit_score(4, 3), 0.0);
    assert_eq!(hit_score(5, 10), 0.6);
}

#[test]
fn hit_precision_reports_missing_truth() {
    assert!(hit_precision(&[vec![0, 1]], &[2], 3).is_err());
    assert!(hit_precision(&[vec![0, 1]], &[0, 1], 3).is_err());
    assert!(hit_precision(&[], &[], 3).is_err());
}

proptest! {
    #[test]
    fn hit_precision_matches_brute_force(seed in 0u64..1000, n in 1usize..12, sources in 1usize..8, k in 1usize..15) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ranked = Vec::new();
        let mut truth = Vec::new();
        for _ in 0..sources {
            let mut l: Vec<usize> = (0..n).collect();
            l.shuffle(&mut rng);
            truth.push(rng.random_range(0..n));
            ranked.push(l);
        }
        let hp = hit_precision(&ranked, &truth, k).unwrap();
        prop_assert!((hp - brute_force(&ranked, &truth, k)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&hp));
    }

    #[test]
    fn hit_precision_ignores_order_below_k(seed in 0u64..1000, n in 4usize..12, k in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut l: Vec<usize> = (0..n).collect();
        l.shuffle(&mut rng);
        let truth = vec![l[rng.random_range(0..k)]];
        let before = hit_precision(std::slice::from_ref(&l), &truth, k).unwrap();
        l[k..].shuffle(&mut rng);
        prop_assert_eq!(before, hit_precision(&[l], &truth, k).unwrap());
    }

    #[test]
    fn top_one_is_accuracy(seed in 0u64..1000, n in 2usize..10, sources in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ranked = Vec::new();
        let mut truth = Vec::new();
        for _ in 0..sources {
            let mut l: Vec<usize> = (0..n).collect();
            l.shuffle(&mut rng);
            truth.push(rng.random_range(0..n));
            ranked.push(l);
        }
        let acc = ranked.iter().zip(&truth).filter(|(l, t)| l[0] == **t).count() as f64 / sources as f64;
        prop_assert!((hit_precision(&ranked, &truth, 1).unwrap() - acc).abs() < 1e-12);
    }

    #[test]
    fn true_rank_matches_sorted_ranking(seed in 0u64..500, n in 2usize..15) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // coarse scores force ties
        let m = Matrix((0..n).map(|_| (0..n).map(|_| rng.random_range(0..4) as f64).collect()).collect());
        let p = pair(n);
        for s in 0..n {
            let all: Vec<usize> = (0..n).collect();
            let ranked: Vec<usize> = rank_candidates(&m, &p.target, s, &all).into_iter().map(|x| x.0).collect();
            for t in 0..n {
                prop_assert_eq!(true_rank(&m, &p.target, s, t), hit_rank(&ranked, t).unwrap());
            }
        }
    }
}

#[test]
fn oracle_scorer_is_perfect() {
    let n = 30;
    let m = Matrix((0..n).map(|s| (0..n).map(|t| if s == t { 1.0 } else { 0.0 }).collect()).collect());
    let cfg = EvalConfig { test_pairs: 20, repetitions: 3, ..Default::default() };
    let r = evaluate_model(&m, &pair(n), &identity(n), &AnnotationSet::default(), &cfg).unwrap();
    assert_eq!(r.mean, vec![1.0, 1.0, 1.0]);
    assert_eq!(r.repetitions.len(), 3);
    assert!(r.ranks.iter().flatten().all(|x| x.rank == 1));
}

#[test]
fn random_scorer_matches_uniform_expectation() {
    // uniform rank over n candidates gives (k + 1) / (2n)
    let n = 200;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let m = Matrix((0..n).map(|_| (0..n).map(|_| rng.random::<f64>()).collect()).collect());
    let cfg = EvalConfig { test_pairs: 200, repetitions: 1, ..Default::default() };
    let r = evaluate_model(&m, &pair(n), &identity(n), &AnnotationSet::default(), &cfg).unwrap();
    for (i, &k) in cfg.ks.iter().enumerate() {
        let want = (k + 1) as f64 / (2 * n) as f64;
        assert!((r.mean[i] - want).abs() < 0.03, "k={k}: {} vs {want}", r.mean[i]);
    }
}

#[test]
fn evaluation_excludes_training_pairs_and_checks_size() {
    let n = 10;
    let m = Matrix((0..n).map(|s| (0..n).map(|t| -((s as f64 - t as f64).abs())).collect()).collect());
    let training = AnnotationSet::new(identity(4)).unwrap();
    let cfg = EvalConfig { test_pairs: 6, repetitions: 2, ..Default::default() };
    let r = evaluate_model(&m, &pair(n), &identity(n), &training, &cfg).unwrap();
    for reps in &r.ranks {
        let mut sources: Vec<&str> = reps.iter().map(|x| x.source.as_str()).collect();
        sources.sort();
        assert_eq!(sources, ["s004", "s005", "s006", "s007", "s008", "s009"]);
    }
    let too_many = EvalConfig { test_pairs: 7, ..cfg };
    assert!(evaluate_model(&m, &pair(n), &identity(n), &training, &too_many).is_err());
}

#[test]
fn evaluation_is_seeded() {
    let n = 40;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let m = Matrix((0..n).map(|_| (0..n).map(|_| rng.random::<f64>()).collect()).collect());
    let cfg = EvalConfig { test_pairs: 10, repetitions: 3, ..Default::default() };
    let a = evaluate_model(&m, &pair(n), &identity(n), &AnnotationSet::default(), &cfg).unwrap();
    let b = evaluate_model(&m, &pair(n), &identity(n), &AnnotationSet::default(), &cfg).unwrap();
    assert_eq!(a.repetitions, b.repetitions);
    assert_eq!(a.ranks, b.ranks);
}

#[test]
fn confident_accuracy() {
    let truth = identity(5);
    assert_eq!(confident_pair_accuracy(&[Link::new(0, 0), Link::new(1, 2)], &truth), 0.5);
    assert_eq!(confident_pair_accuracy(&[], &truth), 0.0);
}

#[test]
fn split_annotations_takes_ratio() {
    let a = split_annotations(&identity(50), 0.1, 3).unwrap();
    assert_eq!(a.len(), 5);
    assert!(a.links().iter().all(|l| l.source == l.target));
    assert_eq!(a, split_annotations(&identity(50), 0.1, 3).unwrap());
}

#[test]
fn report_csv_and_jsonl() {
    let n = 12;
    let m = Matrix((0..n).map(|s| (0..n).map(|t| if s == t { 1.0 } else { 0.0 }).collect()).collect());
    let cfg = EvalConfig { test_pairs: 5, repetitions: 2, ..Default::default() };
    let r = evaluate_model(&m, &pair(n), &identity(n), &AnnotationSet::default(), &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    r.write_csv(&dir.path().join("hp.csv")).unwrap();
    let text = std::fs::read_to_string(dir.path().join("hp.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "repetition,hit_precision@3,hit_precision@5,hit_precision@10");
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("mean,1"));
    r.write_ranks_jsonl(&dir.path().join("ranks.jsonl")).unwrap();
    let ranks = std::fs::read_to_string(dir.path().join("ranks.jsonl")).unwrap();
    assert_eq!(ranks.lines().count(), 10);
    let first: serde_json::Value = serde_json::from_str(ranks.lines().next().unwrap()).unwrap();
    assert_eq!(first["rank"], 1);
}

fn small_model_cfg() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig { word_dim: 16, hidden_dim: 4, demographic_dim: 4, ..EncoderConfig::default() },
        mlp_dims: [8, 4],
        latent_dim: 4,
        mirror_init: true,
    }
}

#[test]
fn sparsity_sweep_baseline_matches_direct_evaluation() {
    let ds = generate_synthetic_pair(&SynthConfig { users_per_side: 40, seed: 4, ..Default::default() }).unwrap();
    let table = ds.embedding_table(4).unwrap();
    let model = small_model_cfg();
    let train = TrainConfig { max_epochs: 2, ..TrainConfig::default() };
    let eval = EvalConfig { test_pairs: 20, repetitions: 2, ..Default::default() };
    let setup = SweepSetup {
        pair: &ds.pair,
        ground_truth: &ds.ground_truth,
        words: Some(&table),
        model: &model,
        train: &train,
        eval: &eval,
    };
    let table_out = sparsity_sweep(&setup, &[0.0, 0.5], &[0.5], 9).unwrap();
    assert_eq!(table_out.rows.len(), 3);
    let direct = train_and_evaluate(&setup, &ds.pair).unwrap();
    assert_eq!(table_out.row(SparsityKind::Relations, 0.0).unwrap().hit_precision, direct.mean);
    let dir = tempfile::tempdir().unwrap();
    table_out.write_csv(&dir.path().join("sweep.csv")).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert_eq!(table_out.plot_json()["relations"]["ratio"], serde_json::json!([0.0, 0.5]));
}

#[test]
fn attention_export_aligns_tokens_with_weights() {
    let ds = generate_synthetic_pair(&SynthConfig { users_per_side: 20, seed: 8, ..Default::default() }).unwrap();
    let table = ds.embedding_table(8).unwrap();
    let model = LinkageModel::new(&small_model_cfg(), LossConfig::default(), &ds.pair, &table, 1).unwrap();
    let id = ds.pair.source.user(3).id.clone();
    let ex = export_attention(&model, &ds.pair, Side::Source, &id).unwrap();
    assert_eq!(ex.tokens.len(), ex.trace.microblogs.len());
    for m in &ex.trace.microblogs {
        for s in &m.sentences {
            assert_eq!(ex.tokens[m.index][s.index].len(), s.words.len());
        }
    }
    let json = serde_json::to_string(&ex).unwrap();
    let back: AttentionExport = serde_json::from_str(&json).unwrap();
    assert_eq!(back.user, id);
    assert!(export_attention(&model, &ds.pair, Side::Target, "nobody").is_err());
}

#[test]
fn phase_timings_sum_to_total() {
    let mut t = PhaseTimer::new();
    for name in ["train", "self_learn", "evaluate"] {
        t.time(name, || std::thread::sleep(std::time::Duration::from_millis(20)));
    }
    let r = t.report();
    assert_eq!(r.phases.len(), 3);
    assert!((r.phase_sum() - r.total).abs() <= 0.05 * r.total, "{r:?}");
    assert!(r.phase("train").unwrap() >= 0.02);
}
