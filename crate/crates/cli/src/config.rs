use idlink_core::corpus::{CorpusLimits, DatasetPaths, SynthConfig};
use idlink_core::eval::EvalConfig;
use idlink_core::linkage::{ModelConfig, TrainConfig};
use idlink_core::selflearn::SelfLearnConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Everything a run needs, loaded from TOML; every section is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub selflearn: SelfLearnConfig,
    pub eval: EvalConfig,
    pub sparsity: SparsityConfig,
    pub limits: LimitsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paths: PathsConfig::default(),
            // large enough to hold 300 held-out test pairs
            synth: SynthConfig { users_per_side: 400, ..SynthConfig::default() },
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            selflearn: SelfLearnConfig::default(),
            eval: EvalConfig::default(),
            sparsity: SparsityConfig::default(),
            limits: LimitsConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Dataset directory; `<out>/data` when unset.
    pub data: Option<PathBuf>,
    /// Word vectors; `<data>/embeddings.txt` when present.
    pub embeddings: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,
    /// Checkpoint read by later commands; `<out>/model.json` when unset.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SparsityConfig {
    pub relations: Vec<f64>,
    pub microblogs: Vec<f64>,
}

impl Default for SparsityConfig {
    fn default() -> Self {
        let r = vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5];
        Self { relations: r.clone(), microblogs: r }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LimitsConfig {
    pub max_words_per_sentence: usize,
    pub max_sentences_per_microblog: usize,
    pub max_microblogs_per_user: usize,
}

impl Default for LimitsConfig {
    fn default() -> Self {
        let d = CorpusLimits::default();
        Self {
            max_words_per_sentence: d.max_words_per_sentence,
            max_sentences_per_microblog: d.max_sentences_per_microblog,
            max_microblogs_per_user: d.max_microblogs_per_user,
        }
    }
}

impl From<&LimitsConfig> for CorpusLimits {
    fn from(l: &LimitsConfig) -> Self {
        CorpusLimits {
            max_words_per_sentence: l.max_words_per_sentence,
            max_sentences_per_microblog: l.max_sentences_per_microblog,
            max_microblogs_per_user: l.max_microblogs_per_user,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.train.seed = seed;
        self.eval.seed = seed;
    }

    pub fn validate(&self) -> idlink_core::Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.selflearn.validate()?;
        self.eval.validate()?;
        for r in self.sparsity.relations.iter().chain(&self.sparsity.microblogs) {
            if !(0.0..=1.0).contains(r) {
                return Err(idlink_core::Error::Config(format!("sparsity ratio {r} not in [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Paths resolved against the output directory.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub out: PathBuf,
    pub data: PathBuf,
    pub embeddings: PathBuf,
    pub ground_truth: PathBuf,
    pub checkpoint: PathBuf,
}

impl Resolved {
    pub fn new(cfg: &PathsConfig, out: &Path) -> Self {
        let data = cfg.data.clone().unwrap_or_else(|| out.join("data"));
        Self {
            embeddings: cfg.embeddings.clone().unwrap_or_else(|| data.join(DatasetPaths::EMBEDDINGS)),
            ground_truth: cfg.ground_truth.clone().unwrap_or_else(|| data.join(DatasetPaths::GROUND_TRUTH)),
            checkpoint: cfg.checkpoint.clone().unwrap_or_else(|| out.join("model.json")),
            out: out.to_path_buf(),
            data,
        }
    }

    pub fn dataset(&self) -> DatasetPaths {
        DatasetPaths::in_dir(&self.data)
    }
}
