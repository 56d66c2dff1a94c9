//! JSONL ingestion and serialization of network pairs.
//!
//! Users: `{"id": str, "microblogs": [[["w1","w2"],["w3"]], ...], "demographics": [str, ...]}`
//! Edges: `{"a": str, "b": str}`, annotations and ground truth: `{"s": str, "t": str}`.

use super::{
    stride_subsample, AnnotationSet, CorpusLimits, Link, Microblog, NetworkPair, SocialNetwork, UserProfile, Vocab,
};
use crate::error::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawUser {
    pub id: String,
    #[serde(default)]
    pub microblogs: Vec<Vec<Vec<String>>>,
    #[serde(default)]
    pub demographics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawEdge {
    pub a: String,
    pub b: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawLink {
    pub s: String,
    pub t: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkFiles {
    pub users: PathBuf,
    pub edges: PathBuf,
}

/// File locations of one dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetPaths {
    pub source: NetworkFiles,
    pub target: NetworkFiles,
    pub annotations: PathBuf,
}

impl DatasetPaths {
    pub const GROUND_TRUTH: &'static str = "ground_truth.jsonl";
    pub const EMBEDDINGS: &'static str = "embeddings.txt";

    /// Conventional layout written by the generator.
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let d = dir.as_ref();
        Self {
            source: NetworkFiles { users: d.join("source_users.jsonl"), edges: d.join("source_edges.jsonl") },
            target: NetworkFiles { users: d.join("target_users.jsonl"), edges: d.join("target_edges.jsonl") },
            annotations: d.join("annotations.jsonl"),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    pub limits: CorpusLimits,
    /// Fixed vocabularies (e.g. from a checkpoint); unseen words map to UNK
    /// and unseen demographic tags are dropped.
    pub words: Option<Vocab>,
    pub demographics: Option<Vocab>,
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads the five dataset files and validates them into a [`NetworkPair`].
/// Returns the pair and any non-fatal warnings.
pub fn load_network_pair(paths: &DatasetPaths, opts: &LoadOptions) -> Result<(NetworkPair, Vec<String>)> {
    let su: Vec<RawUser> = read_jsonl(&paths.source.users)?;
    let se: Vec<RawEdge> = read_jsonl(&paths.source.edges)?;
    let tu: Vec<RawUser> = read_jsonl(&paths.target.users)?;
    let te: Vec<RawEdge> = read_jsonl(&paths.target.edges)?;
    let an: Vec<RawLink> = read_jsonl(&paths.annotations)?;
    build_pair((&su, &se), (&tu, &te), &an, opts)
}

/// Resolves a links file (annotations or ground truth) against a loaded pair.
pub fn load_links(path: &Path, pair: &NetworkPair) -> Result<Vec<Link>> {
    let raw: Vec<RawLink> = read_jsonl(path)?;
    let context = path.display().to_string();
    raw.iter().map(|r| pair.resolve_link(&r.s, &r.t, &context)).collect()
}

pub fn write_links(path: &Path, pair: &NetworkPair, links: &[Link]) -> Result<()> {
    write_jsonl(
        path,
        links.iter().map(|l| {
            let (s, t) = pair.link_ids(l);
            RawLink { s: s.to_string(), t: t.to_string() }
        }),
    )
}

pub fn write_network(net: &SocialNetwork, words: &Vocab, demographics: &Vocab, files: &NetworkFiles) -> Result<()> {
    write_jsonl(&files.users, net.users().iter().map(|u| to_raw(u, words, demographics)))?;
    write_jsonl(
        &files.edges,
        net.edges().into_iter().map(|(a, b)| RawEdge { a: net.user(a).id.clone(), b: net.user(b).id.clone() }),
    )
}

fn to_raw(u: &UserProfile, words: &Vocab, demographics: &Vocab) -> RawUser {
    RawUser {
        id: u.id.clone(),
        microblogs: u
            .microblogs
            .iter()
            .map(|m| m.sentences.iter().map(|s| s.iter().map(|&w| words.word(w).to_string()).collect()).collect())
            .collect(),
        demographics: u.demographics.iter().map(|&d| demographics.word(d).to_string()).collect(),
    }
}

struct Interner {
    vocab: Vocab,
    frozen: bool,
}

impl Interner {
    fn new(fixed: Option<&Vocab>) -> Self {
        match fixed {
            Some(v) => Self { vocab: v.clone(), frozen: true },
            None => Self { vocab: Vocab::new(), frozen: false },
        }
    }

    fn word(&mut self, w: &str) -> usize {
        if self.frozen {
            self.vocab.lookup(w).unwrap_or(Vocab::UNK_ID)
        } else {
            self.vocab.intern(w)
        }
    }

    fn tag(&mut self, w: &str) -> Option<usize> {
        if self.frozen {
            self.vocab.lookup(w)
        } else {
            Some(self.vocab.intern(w))
        }
    }
}

fn tokenize(token: &str) -> impl Iterator<Item = String> + '_ {
    token.split_whitespace().map(str::to_lowercase)
}

fn build_profile(
    raw: &RawUser,
    words: &mut Interner,
    tags: &mut Interner,
    limits: &CorpusLimits,
    warnings: &mut Vec<String>,
) -> UserProfile {
    let mut microblogs = Vec::new();
    let mut dropped = 0usize;
    for blog in &raw.microblogs {
        let mut sentences = Vec::new();
        for sentence in blog {
            let ids: Vec<usize> = sentence.iter().flat_map(|t| tokenize(t)).map(|w| words.word(&w)).collect();
            if ids.is_empty() {
                dropped += 1;
                continue;
            }
            let keep = stride_subsample(ids.len(), limits.max_words_per_sentence);
            sentences.push(keep.into_iter().map(|i| ids[i]).collect::<Vec<_>>());
        }
        if sentences.is_empty() {
            continue;
        }
        let keep = stride_subsample(sentences.len(), limits.max_sentences_per_microblog);
        microblogs.push(Microblog { sentences: keep.into_iter().map(|i| sentences[i].clone()).collect() });
    }
    if dropped > 0 {
        warnings.push(format!("user {:?}: dropped {dropped} empty sentence(s)", raw.id));
    }
    let keep = stride_subsample(microblogs.len(), limits.max_microblogs_per_user);
    let microblogs = keep.into_iter().map(|i| microblogs[i].clone()).collect();
    let demographics: BTreeSet<usize> =
        raw.demographics.iter().flat_map(|t| tokenize(t)).filter_map(|t| tags.tag(&t)).collect();
    UserProfile { id: raw.id.clone(), microblogs, demographics: demographics.into_iter().collect() }
}

fn build_network(
    side: &str,
    users: &[RawUser],
    edges: &[RawEdge],
    words: &mut Interner,
    tags: &mut Interner,
    limits: &CorpusLimits,
    warnings: &mut Vec<String>,
) -> Result<SocialNetwork> {
    let profiles: Vec<UserProfile> = users.iter().map(|u| build_profile(u, words, tags, limits, warnings)).collect();
    let mut seen = HashSet::new();
    for p in &profiles {
        if !seen.insert(p.id.as_str()) {
            return Err(Error::Data(format!("{side}: duplicate user id {:?}", p.id)));
        }
    }
    let index: std::collections::HashMap<&str, usize> =
        profiles.iter().enumerate().map(|(i, p)| (p.id.as_str(), i)).collect();
    let context = format!("{side} edges");
    let mut directed = BTreeSet::new();
    for e in edges {
        let a =
            *index.get(e.a.as_str()).ok_or_else(|| Error::UnknownUser { id: e.a.clone(), context: context.clone() })?;
        let b =
            *index.get(e.b.as_str()).ok_or_else(|| Error::UnknownUser { id: e.b.clone(), context: context.clone() })?;
        if a == b {
            warnings.push(format!("{side}: ignoring self-loop on {:?}", e.a));
            continue;
        }
        directed.insert((a, b));
    }
    // A listing that contains reciprocal pairs is read as directed; its
    // one-way entries are symmetrized with a warning.
    let directed_listing = directed.iter().any(|&(a, b)| directed.contains(&(b, a)));
    if directed_listing {
        for &(a, b) in &directed {
            if !directed.contains(&(b, a)) {
                warnings.push(format!(
                    "{side}: edge ({:?}, {:?}) listed without its reverse; symmetrized",
                    profiles[a].id, profiles[b].id
                ));
            }
        }
    }
    let undirected: Vec<(usize, usize)> = directed.into_iter().collect();
    SocialNetwork::new(profiles, &undirected)
}

/// Validates raw records into a [`NetworkPair`]. Vocabularies are interned in
/// record order (source users first) unless fixed vocabularies are supplied.
pub fn build_pair(
    source: (&[RawUser], &[RawEdge]),
    target: (&[RawUser], &[RawEdge]),
    annotations: &[RawLink],
    opts: &LoadOptions,
) -> Result<(NetworkPair, Vec<String>)> {
    let mut warnings = Vec::new();
    let mut words = Interner::new(opts.words.as_ref());
    let mut tags = Interner::new(opts.demographics.as_ref());
    let s = build_network("source", source.0, source.1, &mut words, &mut tags, &opts.limits, &mut warnings)?;
    let t = build_network("target", target.0, target.1, &mut words, &mut tags, &opts.limits, &mut warnings)?;
    let mut links = Vec::with_capacity(annotations.len());
    for a in annotations {
        let si = s.require(&a.s, "annotations (source)")?;
        let ti = t.require(&a.t, "annotations (target)")?;
        links.push(Link::new(si, ti));
    }
    let annotations = AnnotationSet::new(links)?;
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok((NetworkPair { source: s, target: t, annotations, words: words.vocab, demographics: tags.vocab }, warnings))
}
