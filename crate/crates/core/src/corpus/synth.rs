//! Synthetic partially aligned network pairs with planted ground truth.
//!
//! Every identity has a latent persona: a topic, a handful of favourite words
//! and a few demographic tags. Source profiles are sampled from the persona;
//! the matched target profile is a copy in which each word, tag and relation
//! is independently resampled with probability `profile_noise`. Word vectors
//! are clustered by topic so that a loaded embedding file carries semantics.

use super::io::{build_pair, LoadOptions, RawEdge, RawLink, RawUser};
use super::{write_embeddings, write_links, write_network, DatasetPaths, EmbeddingTable, Link, NetworkPair};
use crate::error::{Error, Result};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub users_per_side: usize,
    pub aligned_fraction: f64,
    /// Share of aligned pairs published as annotations.
    pub annotation_fraction: f64,
    pub vocab_size: usize,
    pub topic_count: usize,
    pub words_per_sentence: (usize, usize),
    pub sentences_per_microblog: (usize, usize),
    pub microblogs_per_user: (usize, usize),
    pub demographic_vocab: usize,
    pub demographics_per_user: (usize, usize),
    /// Persona-specific favourite words per identity.
    pub personal_words: usize,
    /// Probability that a generated word is a favourite word.
    pub personal_weight: f64,
    pub edge_probability_intra: f64,
    pub edge_probability_inter: f64,
    pub profile_noise: f64,
    pub embedding_dim: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            users_per_side: 200,
            aligned_fraction: 0.9,
            annotation_fraction: 0.1,
            vocab_size: 500,
            topic_count: 10,
            words_per_sentence: (4, 8),
            sentences_per_microblog: (1, 3),
            microblogs_per_user: (3, 6),
            demographic_vocab: 40,
            demographics_per_user: (1, 3),
            personal_words: 6,
            personal_weight: 0.4,
            edge_probability_intra: 0.15,
            edge_probability_inter: 0.004,
            profile_noise: 0.2,
            embedding_dim: 16,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synth: {m}")));
        if self.users_per_side == 0 || self.vocab_size == 0 || self.topic_count == 0 || self.demographic_vocab == 0 {
            return bad("counts must be positive".into());
        }
        if self.embedding_dim == 0 {
            return bad("embedding_dim must be positive".into());
        }
        if !(self.aligned_fraction > 0.0 && self.aligned_fraction <= 1.0) {
            return bad(format!("aligned_fraction {} not in (0, 1]", self.aligned_fraction));
        }
        for (name, p) in [
            ("annotation_fraction", self.annotation_fraction),
            ("personal_weight", self.personal_weight),
            ("edge_probability_intra", self.edge_probability_intra),
            ("edge_probability_inter", self.edge_probability_inter),
            ("profile_noise", self.profile_noise),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} {p} not in [0, 1]"));
            }
        }
        for (name, (lo, hi)) in [
            ("words_per_sentence", self.words_per_sentence),
            ("sentences_per_microblog", self.sentences_per_microblog),
            ("microblogs_per_user", self.microblogs_per_user),
            ("demographics_per_user", self.demographics_per_user),
        ] {
            if lo == 0 || lo > hi {
                return bad(format!("{name} range ({lo}, {hi}) invalid"));
            }
        }
        if self.topic_count > self.vocab_size {
            return bad("more topics than words".into());
        }
        Ok(())
    }

    pub fn aligned_count(&self) -> usize {
        (self.aligned_fraction * self.users_per_side as f64).floor() as usize
    }
}

/// Generated pair plus everything withheld from the model.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub pair: NetworkPair,
    /// Every aligned pair, including the published annotations.
    pub ground_truth: Vec<Link>,
    /// Topic-clustered vectors for every generated word.
    pub embeddings: Vec<(String, Vec<f64>)>,
}

impl SyntheticDataset {
    pub fn embedding_table(&self, seed: u64) -> Result<EmbeddingTable> {
        let dim = self.embeddings.first().map_or(0, |(_, v)| v.len());
        EmbeddingTable::from_entries(
            self.embeddings.iter().map(|(w, v)| (w.as_str(), v.as_slice())),
            &self.pair.words,
            dim,
            seed,
        )
    }

    /// Writes the dataset files in the conventional layout; returns the paths
    /// written.
    pub fn write_to(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let paths = DatasetPaths::in_dir(dir);
        let p = &self.pair;
        write_network(&p.source, &p.words, &p.demographics, &paths.source)?;
        write_network(&p.target, &p.words, &p.demographics, &paths.target)?;
        write_links(&paths.annotations, p, p.annotations.links())?;
        let truth = dir.join(DatasetPaths::GROUND_TRUTH);
        write_links(&truth, p, &self.ground_truth)?;
        let emb = dir.join(DatasetPaths::EMBEDDINGS);
        write_embeddings(&emb, &self.embeddings)?;
        Ok(vec![
            paths.source.users,
            paths.source.edges,
            paths.target.users,
            paths.target.edges,
            paths.annotations,
            emb,
            truth,
        ])
    }
}

struct Persona {
    topic: usize,
    favorites: Vec<usize>,
    tags: Vec<usize>,
}

struct World<'a> {
    cfg: &'a SynthConfig,
    topic_words: Vec<Vec<usize>>,
}

impl World<'_> {
    fn persona(&self, rng: &mut ChaCha8Rng) -> Persona {
        let cfg = self.cfg;
        let topic = rng.random_range(0..cfg.topic_count);
        let favorites = (0..cfg.personal_words).map(|_| self.topic_word(topic, rng)).collect();
        let n_tags = rng.random_range(cfg.demographics_per_user.0..=cfg.demographics_per_user.1);
        let mut tags = BTreeSet::new();
        for _ in 0..n_tags {
            tags.insert(self.tag(topic, rng));
        }
        Persona { topic, favorites, tags: tags.into_iter().collect() }
    }

    /// Topic word (75%) or background word.
    fn topic_word(&self, topic: usize, rng: &mut ChaCha8Rng) -> usize {
        let words = &self.topic_words[topic];
        if !words.is_empty() && rng.random_bool(0.75) {
            *words.choose(rng).expect("nonempty")
        } else {
            rng.random_range(0..self.cfg.vocab_size)
        }
    }

    fn tag(&self, topic: usize, rng: &mut ChaCha8Rng) -> usize {
        let n = self.cfg.demographic_vocab;
        let per_topic: Vec<usize> = (0..n).filter(|t| t % self.cfg.topic_count == topic).collect();
        if !per_topic.is_empty() && rng.random_bool(0.7) {
            *per_topic.choose(rng).expect("nonempty")
        } else {
            rng.random_range(0..n)
        }
    }

    fn word(&self, p: &Persona, rng: &mut ChaCha8Rng) -> usize {
        if !p.favorites.is_empty() && rng.random_bool(self.cfg.personal_weight) {
            *p.favorites.choose(rng).expect("nonempty")
        } else {
            self.topic_word(p.topic, rng)
        }
    }

    fn microblogs(&self, p: &Persona, rng: &mut ChaCha8Rng) -> Vec<Vec<Vec<usize>>> {
        let cfg = self.cfg;
        let n_blogs = rng.random_range(cfg.microblogs_per_user.0..=cfg.microblogs_per_user.1);
        (0..n_blogs)
            .map(|_| {
                let n_sent = rng.random_range(cfg.sentences_per_microblog.0..=cfg.sentences_per_microblog.1);
                (0..n_sent)
                    .map(|_| {
                        let n_words = rng.random_range(cfg.words_per_sentence.0..=cfg.words_per_sentence.1);
                        (0..n_words).map(|_| self.word(p, rng)).collect()
                    })
                    .collect()
            })
            .collect()
    }

    fn noisy_copy(&self, blogs: &[Vec<Vec<usize>>], p: &Persona, rng: &mut ChaCha8Rng) -> Vec<Vec<Vec<usize>>> {
        let noise = self.cfg.profile_noise;
        let mut out: Vec<Vec<Vec<usize>>> = blogs
            .iter()
            .map(|b| {
                b.iter()
                    .map(|s| {
                        s.iter()
                            .map(|&w| if rng.random_bool(noise) { self.topic_word(p.topic, rng) } else { w })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        out.shuffle(rng);
        out
    }

    fn edge_probability(&self, a: &Persona, b: &Persona) -> f64 {
        if a.topic == b.topic {
            self.cfg.edge_probability_intra
        } else {
            self.cfg.edge_probability_inter
        }
    }
}

fn raw_user(id: String, blogs: &[Vec<Vec<usize>>], tags: &[usize]) -> RawUser {
    RawUser {
        id,
        microblogs: blogs
            .iter()
            .map(|b| b.iter().map(|s| s.iter().map(|w| format!("w{w}")).collect()).collect())
            .collect(),
        demographics: tags.iter().map(|t| format!("tag{t}")).collect(),
    }
}

/// Deterministic in `cfg` (including `cfg.seed`).
pub fn generate_synthetic_pair(cfg: &SynthConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.users_per_side;
    let n_aligned = cfg.aligned_count();

    // 80% of the vocabulary is split across topics, the rest is background.
    let mut order: Vec<usize> = (0..cfg.vocab_size).collect();
    order.shuffle(&mut rng);
    let topical = (cfg.vocab_size * 4) / 5;
    let mut topic_words = vec![Vec::new(); cfg.topic_count];
    let mut word_topic = vec![None; cfg.vocab_size];
    for (k, &w) in order[..topical].iter().enumerate() {
        topic_words[k % cfg.topic_count].push(w);
        word_topic[w] = Some(k % cfg.topic_count);
    }
    for list in &mut topic_words {
        list.sort_unstable();
    }
    let world = World { cfg, topic_words };

    // personas: [0, n_aligned) shared, then source-only, then target-only
    let personas: Vec<Persona> = (0..(2 * n - n_aligned)).map(|_| world.persona(&mut rng)).collect();
    let source_persona: Vec<usize> = (0..n).collect();
    let target_persona: Vec<usize> = (0..n_aligned).chain(n..(2 * n - n_aligned)).collect();

    let source_blogs: Vec<Vec<Vec<Vec<usize>>>> =
        source_persona.iter().map(|&p| world.microblogs(&personas[p], &mut rng)).collect();

    let mut source_edges = Vec::new();
    for a in 0..n {
        for b in (a + 1)..n {
            let p = world.edge_probability(&personas[source_persona[a]], &personas[source_persona[b]]);
            if rng.random_bool(p) {
                source_edges.push((a, b));
            }
        }
    }

    // Target slots follow `target_persona`; slot k is published under id
    // t{perm[k]} so that index order carries no alignment signal.
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let mut target_blogs = Vec::with_capacity(n);
    let mut target_tags = Vec::with_capacity(n);
    for (k, &p) in target_persona.iter().enumerate() {
        let persona = &personas[p];
        if k < n_aligned {
            target_blogs.push(world.noisy_copy(&source_blogs[k], persona, &mut rng));
            let tags: BTreeSet<usize> =
                persona
                    .tags
                    .iter()
                    .map(|&t| {
                        if rng.random_bool(cfg.profile_noise) {
                            rng.random_range(0..cfg.demographic_vocab)
                        } else {
                            t
                        }
                    })
                    .collect();
            target_tags.push(tags.into_iter().collect::<Vec<_>>());
        } else {
            target_blogs.push(world.microblogs(persona, &mut rng));
            target_tags.push(persona.tags.clone());
        }
    }
    let mut target_edges = BTreeSet::new();
    for &(a, b) in &source_edges {
        if a < n_aligned && b < n_aligned {
            if rng.random_bool(cfg.profile_noise) {
                let (keep, _) = if rng.random_bool(0.5) { (a, b) } else { (b, a) };
                let other = rng.random_range(0..n);
                if other != keep {
                    target_edges.insert((keep.min(other), keep.max(other)));
                }
            } else {
                target_edges.insert((a, b));
            }
        }
    }
    for a in 0..n {
        for b in (a + 1)..n {
            if b < n_aligned {
                continue;
            }
            let p = world.edge_probability(&personas[target_persona[a]], &personas[target_persona[b]]);
            if rng.random_bool(p) {
                target_edges.insert((a, b));
            }
        }
    }

    let source_ids: Vec<String> = (0..n).map(|i| format!("s{i:04}")).collect();
    let target_ids: Vec<String> = (0..n).map(|k| format!("t{:04}", perm[k])).collect();

    let raw_source: Vec<RawUser> =
        (0..n).map(|i| raw_user(source_ids[i].clone(), &source_blogs[i], &personas[source_persona[i]].tags)).collect();
    let mut slots_by_id: Vec<usize> = (0..n).collect();
    slots_by_id.sort_by_key(|&k| perm[k]);
    let raw_target: Vec<RawUser> =
        slots_by_id.iter().map(|&k| raw_user(target_ids[k].clone(), &target_blogs[k], &target_tags[k])).collect();
    let to_raw_edges = |edges: &mut dyn Iterator<Item = (usize, usize)>, ids: &[String]| -> Vec<RawEdge> {
        edges.map(|(a, b)| RawEdge { a: ids[a].clone(), b: ids[b].clone() }).collect()
    };
    let raw_source_edges = to_raw_edges(&mut source_edges.iter().copied(), &source_ids);
    let raw_target_edges = to_raw_edges(&mut target_edges.iter().copied(), &target_ids);

    let truth_raw: Vec<RawLink> =
        (0..n_aligned).map(|k| RawLink { s: source_ids[k].clone(), t: target_ids[k].clone() }).collect();
    let n_annot = (cfg.annotation_fraction * n_aligned as f64).floor() as usize;
    let mut annotated: Vec<usize> = (0..n_aligned).collect();
    annotated.shuffle(&mut rng);
    annotated.truncate(n_annot);
    annotated.sort_unstable();
    let annot_raw: Vec<RawLink> = annotated.iter().map(|&k| truth_raw[k].clone()).collect();

    let (pair, _) = build_pair(
        (&raw_source, &raw_source_edges),
        (&raw_target, &raw_target_edges),
        &annot_raw,
        &LoadOptions::default(),
    )?;
    let ground_truth =
        truth_raw.iter().map(|l| pair.resolve_link(&l.s, &l.t, "ground truth")).collect::<Result<Vec<_>>>()?;

    let dim = cfg.embedding_dim;
    let centers: Vec<Vec<f64>> =
        (0..cfg.topic_count).map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
    let embeddings = (0..cfg.vocab_size)
        .map(|w| {
            let v: Vec<f64> = (0..dim)
                .map(|j| {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    let base = word_topic[w].map_or(0.0, |t| 0.8 * centers[t][j]);
                    0.3 * (base + 0.5 * noise)
                })
                .collect();
            (format!("w{w}"), v)
        })
        .collect();

    Ok(SyntheticDataset { pair, ground_truth, embeddings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{load_links, load_network_pair};

    fn small(seed: u64) -> SynthConfig {
        SynthConfig { users_per_side: 100, aligned_fraction: 1.0, seed, ..Default::default() }
    }

    fn words_multiset(pair: &NetworkPair, link: &Link) -> (Vec<usize>, Vec<usize>) {
        let collect = |u: &crate::corpus::UserProfile| {
            let mut w: Vec<usize> = u.microblogs.iter().flat_map(|m| m.sentences.iter().flatten().copied()).collect();
            w.sort_unstable();
            w
        };
        (collect(pair.source.user(link.source)), collect(pair.target.user(link.target)))
    }

    #[test]
    fn full_alignment_counts() {
        let ds = generate_synthetic_pair(&small(1)).unwrap();
        assert_eq!(ds.ground_truth.len(), 100);
        assert_eq!(ds.pair.source.len(), 100);
        assert_eq!(ds.pair.target.len(), 100);
        assert_eq!(ds.pair.annotations.len(), 10);
        for l in ds.pair.annotations.links() {
            assert!(ds.ground_truth.contains(l));
        }
    }

    #[test]
    fn zero_noise_copies_word_multisets() {
        let ds = generate_synthetic_pair(&SynthConfig { profile_noise: 0.0, ..small(3) }).unwrap();
        for l in &ds.ground_truth {
            let (s, t) = words_multiset(&ds.pair, l);
            assert_eq!(s, t);
        }
    }

    #[test]
    fn noise_changes_some_words() {
        let ds = generate_synthetic_pair(&SynthConfig { profile_noise: 0.5, ..small(3) }).unwrap();
        let differing = ds
            .ground_truth
            .iter()
            .filter(|l| {
                let (s, t) = words_multiset(&ds.pair, l);
                s != t
            })
            .count();
        assert!(differing > 90);
    }

    #[test]
    fn same_seed_writes_identical_files() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let fa = generate_synthetic_pair(&small(9)).unwrap().write_to(a.path()).unwrap();
        let fb = generate_synthetic_pair(&small(9)).unwrap().write_to(b.path()).unwrap();
        assert_eq!(fa.len(), 7);
        for (x, y) in fa.iter().zip(&fb) {
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap(), "{}", x.display());
        }
        let c = tempfile::tempdir().unwrap();
        let fc = generate_synthetic_pair(&small(10)).unwrap().write_to(c.path()).unwrap();
        assert_ne!(std::fs::read(&fa[0]).unwrap(), std::fs::read(&fc[0]).unwrap());
    }

    #[test]
    fn written_dataset_reloads_equal() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic_pair(&SynthConfig { aligned_fraction: 0.7, ..small(4) }).unwrap();
        ds.write_to(dir.path()).unwrap();
        let (pair, warnings) = load_network_pair(&DatasetPaths::in_dir(dir.path()), &LoadOptions::default()).unwrap();
        assert!(warnings.is_empty());
        assert_eq!(pair, ds.pair);
        let truth = load_links(&dir.path().join(DatasetPaths::GROUND_TRUTH), &pair).unwrap();
        assert_eq!(truth, ds.ground_truth);
    }

    #[test]
    fn partial_alignment_floor() {
        for (f, expect) in [(0.5, 50), (0.333, 33), (1.0, 100)] {
            let ds = generate_synthetic_pair(&SynthConfig { aligned_fraction: f, ..small(2) }).unwrap();
            assert_eq!(ds.ground_truth.len(), expect);
            let sources: BTreeSet<_> = ds.ground_truth.iter().map(|l| l.source).collect();
            let targets: BTreeSet<_> = ds.ground_truth.iter().map(|l| l.target).collect();
            assert_eq!(sources.len(), expect);
            assert_eq!(targets.len(), expect);
        }
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(generate_synthetic_pair(&SynthConfig { aligned_fraction: 0.0, ..small(1) }).is_err());
        assert!(generate_synthetic_pair(&SynthConfig { profile_noise: 1.5, ..small(1) }).is_err());
        assert!(generate_synthetic_pair(&SynthConfig { words_per_sentence: (3, 2), ..small(1) }).is_err());
    }

    #[test]
    fn embedding_table_covers_vocab() {
        let ds = generate_synthetic_pair(&small(5)).unwrap();
        let t = ds.embedding_table(0).unwrap();
        assert_eq!(t.len(), ds.pair.words.len());
        assert_eq!(t.random_init, 1);
    }
}
