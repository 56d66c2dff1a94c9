//! Paired social networks: profiles, adjacency, annotations and vocabularies.

mod embeddings;
mod io;
mod sparsity;
mod synth;

pub use embeddings::{load_embeddings, write_embeddings, EmbeddingTable};
pub use io::{
    build_pair, load_links, load_network_pair, write_links, write_network, DatasetPaths, LoadOptions, NetworkFiles,
    RawEdge, RawLink, RawUser,
};
pub use sparsity::{apply_sparsity, apply_sparsity_to_pair};
pub use synth::{generate_synthetic_pair, SynthConfig, SyntheticDataset};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};

pub const UNK: &str = "<unk>";

/// Which network of a pair a user belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Source,
    Target,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::Source => "source",
            Side::Target => "target",
        }
    }
}

impl std::str::FromStr for Side {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" | "s" => Ok(Side::Source),
            "target" | "t" => Ok(Side::Target),
            other => Err(Error::Config(format!("unknown network side {other:?}"))),
        }
    }
}

/// String-to-index table; index 0 is always [`UNK`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub const UNK_ID: usize = 0;

    pub fn new() -> Self {
        let mut v = Self { words: Vec::new(), index: HashMap::new() };
        v.intern(UNK);
        v
    }

    pub fn intern(&mut self, word: &str) -> usize {
        if let Some(&i) = self.index.get(word) {
            return i;
        }
        self.words.push(word.to_string());
        self.index.insert(word.to_string(), self.words.len() - 1);
        self.words.len() - 1
    }

    pub fn lookup(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

impl From<Vec<String>> for Vocab {
    fn from(words: Vec<String>) -> Self {
        let mut v = Vocab { words: Vec::new(), index: HashMap::new() };
        v.intern(UNK);
        for w in &words {
            v.intern(w);
        }
        v
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

/// Sentences of word ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Microblog {
    pub sentences: Vec<Vec<usize>>,
}

impl Microblog {
    pub fn word_count(&self) -> usize {
        self.sentences.iter().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserProfile {
    pub id: String,
    pub microblogs: Vec<Microblog>,
    /// Sorted, deduplicated demographic feature ids.
    pub demographics: Vec<usize>,
}

/// One platform: profiles plus a symmetric, loop-free adjacency.
#[derive(Debug, Clone, PartialEq)]
pub struct SocialNetwork {
    users: Vec<UserProfile>,
    index: HashMap<String, usize>,
    adjacency: Vec<Vec<usize>>,
}

impl SocialNetwork {
    /// Builds a network from profiles and undirected edges given as index
    /// pairs. Duplicates collapse; self-loops are rejected.
    pub fn new(users: Vec<UserProfile>, edges: &[(usize, usize)]) -> Result<Self> {
        let mut index = HashMap::with_capacity(users.len());
        for (i, u) in users.iter().enumerate() {
            if index.insert(u.id.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate user id {:?}", u.id)));
            }
        }
        let mut adjacency = vec![Vec::new(); users.len()];
        for &(a, b) in edges {
            if a >= users.len() || b >= users.len() {
                return Err(Error::Data(format!("edge ({a}, {b}) out of range")));
            }
            if a == b {
                return Err(Error::Data(format!("self-loop on user {:?}", users[a].id)));
            }
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        for list in &mut adjacency {
            list.sort_unstable();
            list.dedup();
        }
        Ok(Self { users, index, adjacency })
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn users(&self) -> &[UserProfile] {
        &self.users
    }

    pub fn user(&self, idx: usize) -> &UserProfile {
        &self.users[idx]
    }

    pub fn find(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn require(&self, id: &str, context: &str) -> Result<usize> {
        self.find(id).ok_or_else(|| Error::UnknownUser { id: id.to_string(), context: context.to_string() })
    }

    /// Sorted neighbor indices.
    pub fn neighbors(&self, idx: usize) -> &[usize] {
        &self.adjacency[idx]
    }

    pub fn neighbor_ids(&self, idx: usize) -> Vec<&str> {
        self.adjacency[idx].iter().map(|&j| self.users[j].id.as_str()).collect()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.adjacency[a].binary_search(&b).is_ok()
    }

    /// Undirected edges as `(a, b)` with `a < b`, in index order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.adjacency
            .iter()
            .enumerate()
            .flat_map(|(a, list)| list.iter().filter(move |&&b| b > a).map(move |&b| (a, b)))
            .collect()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn total_microblogs(&self) -> usize {
        self.users.iter().map(|u| u.microblogs.len()).sum()
    }

    pub(crate) fn with_parts(users: Vec<UserProfile>, edges: &[(usize, usize)]) -> Self {
        Self::new(users, edges).expect("parts come from a valid network")
    }
}

/// A linked identity pair as `(source index, target index)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Link {
    pub source: usize,
    pub target: usize,
}

impl Link {
    pub fn new(source: usize, target: usize) -> Self {
        Self { source, target }
    }
}

/// One-to-one set of linked pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AnnotationSet {
    links: Vec<Link>,
}

impl AnnotationSet {
    pub fn new(links: Vec<Link>) -> Result<Self> {
        let mut set = Self::default();
        for l in links {
            set.insert(l)?;
        }
        Ok(set)
    }

    pub fn insert(&mut self, link: Link) -> Result<()> {
        if let Some(existing) = self.links.iter().find(|l| l.source == link.source || l.target == link.target) {
            if *existing == link {
                return Ok(());
            }
            return Err(Error::Data(format!(
                "annotation ({}, {}) conflicts with ({}, {}); links must be one-to-one",
                link.source, link.target, existing.source, existing.target
            )));
        }
        self.links.push(link);
        Ok(())
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    pub fn contains(&self, link: &Link) -> bool {
        self.links.contains(link)
    }

    pub fn sources(&self) -> HashSet<usize> {
        self.links.iter().map(|l| l.source).collect()
    }

    pub fn targets(&self) -> HashSet<usize> {
        self.links.iter().map(|l| l.target).collect()
    }

    /// Union with links whose endpoints are not yet used.
    pub fn extended(&self, extra: &[Link]) -> Self {
        let mut out = self.clone();
        for &l in extra {
            let _ = out.insert(l);
        }
        out
    }
}

/// Source and target networks with shared vocabularies and annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkPair {
    pub source: SocialNetwork,
    pub target: SocialNetwork,
    pub annotations: AnnotationSet,
    pub words: Vocab,
    pub demographics: Vocab,
}

impl NetworkPair {
    pub fn network(&self, side: Side) -> &SocialNetwork {
        match side {
            Side::Source => &self.source,
            Side::Target => &self.target,
        }
    }

    pub fn link_ids(&self, link: &Link) -> (&str, &str) {
        (self.source.user(link.source).id.as_str(), self.target.user(link.target).id.as_str())
    }

    pub fn resolve_link(&self, s: &str, t: &str, context: &str) -> Result<Link> {
        Ok(Link::new(self.source.require(s, context)?, self.target.require(t, context)?))
    }

    pub fn with_annotations(&self, annotations: AnnotationSet) -> Self {
        Self { annotations, ..self.clone() }
    }
}

/// Ingestion caps; content beyond a cap is subsampled at an even stride.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusLimits {
    pub max_words_per_sentence: usize,
    pub max_sentences_per_microblog: usize,
    pub max_microblogs_per_user: usize,
}

impl Default for CorpusLimits {
    fn default() -> Self {
        Self { max_words_per_sentence: 40, max_sentences_per_microblog: 8, max_microblogs_per_user: 50 }
    }
}

/// Indices of `cap` evenly spaced items out of `len` (all of them if `len <= cap`).
pub fn stride_subsample(len: usize, cap: usize) -> Vec<usize> {
    if len <= cap {
        (0..len).collect()
    } else {
        (0..cap).map(|i| i * len / cap).collect()
    }
}
