//! The JSON run configuration shared by every command.
//!
//! Relative paths are resolved against the directory holding the
//! configuration file.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::backends::{remote_backend, train_ngram, Endpoint, ModelBackend, TableModel};
use crate::decode::StopConditions;
use crate::error::{Error, Result};
use crate::fusion::{
    EnsembleConfig, MainPolicy, DEFAULT_EARLY_STOP, DEFAULT_ETA, DEFAULT_PROB_FLOOR, DEFAULT_STEPS,
};
use crate::harness::toy::ToyWorld;
use crate::harness::{default_eta_grid, load_items, save_items, EvalItem, ModelEntry};
use crate::relspace::EmbeddingTable;
use crate::vocab::{AnchorStrategy, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub models: Vec<ModelConfig>,
    #[serde(default = "default_anchors")]
    pub anchors: String,
    #[serde(default = "default_true")]
    pub normalize: bool,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub main: MainSetting,
    #[serde(default)]
    pub datasets: DatasetsConfig,
    #[serde(default)]
    pub stop: StopConfig,
    #[serde(default)]
    pub sweeps: SweepConfig,
    pub seed: Option<u64>,
    #[serde(default = "default_out")]
    pub out: String,
    #[serde(skip)]
    base: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub vocab: String,
    pub embeddings: String,
    pub backend: BackendConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendConfig {
    /// Trained at load time from a text corpus, one sequence per line.
    Ngram { corpus: String, order: usize, delta: f64 },
    Table { path: String },
    Remote {
        transport: Transport,
        #[serde(default)]
        command: Vec<String>,
        #[serde(default)]
        address: Option<String>,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transport {
    Stdio,
    Socket,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub weights: Vec<f64>,
    #[serde(default = "default_floor")]
    pub prob_floor: f64,
    #[serde(default = "default_early_stop")]
    pub early_stop_loss: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            eta: DEFAULT_ETA,
            steps: DEFAULT_STEPS,
            weights: Vec::new(),
            prob_floor: DEFAULT_PROB_FLOOR,
            early_stop_loss: DEFAULT_EARLY_STOP,
        }
    }
}

/// `"auto"` or a model index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MainSetting {
    Index(usize),
    Name(String),
}

impl Default for MainSetting {
    fn default() -> Self {
        MainSetting::Name("auto".to_string())
    }
}

impl MainSetting {
    pub fn parse(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(MainSetting::default());
        }
        s.parse()
            .map(MainSetting::Index)
            .map_err(|_| Error::config(format!("main must be `auto` or a model index, got `{s}`")))
    }

    pub fn policy(&self) -> Result<MainPolicy> {
        match self {
            MainSetting::Index(i) => Ok(MainPolicy::Fixed(*i)),
            MainSetting::Name(s) if s == "auto" => Ok(MainPolicy::AutoDev),
            MainSetting::Name(s) => Err(Error::config(format!("main must be `auto` or a model index, got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetsConfig {
    #[serde(default)]
    pub dev: Option<String>,
    #[serde(default)]
    pub test: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopConfig {
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    #[serde(default)]
    pub stop_surfaces: Vec<String>,
}

impl Default for StopConfig {
    fn default() -> Self {
        StopConfig {
            max_tokens: default_max_tokens(),
            stop_surfaces: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default = "default_eta_grid")]
    pub eta: Vec<f64>,
    #[serde(default = "default_anchor_counts")]
    pub anchor_counts: Vec<usize>,
    #[serde(default = "default_step_grid")]
    pub steps: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            eta: default_eta_grid(),
            anchor_counts: default_anchor_counts(),
            steps: default_step_grid(),
        }
    }
}

fn default_anchors() -> String {
    "full".to_string()
}

fn default_true() -> bool {
    true
}

fn default_out() -> String {
    "out".to_string()
}

fn default_timeout_ms() -> u64 {
    30_000
}

fn default_eta() -> f64 {
    DEFAULT_ETA
}

fn default_steps() -> usize {
    DEFAULT_STEPS
}

fn default_floor() -> f64 {
    DEFAULT_PROB_FLOOR
}

fn default_early_stop() -> f64 {
    DEFAULT_EARLY_STOP
}

fn default_max_tokens() -> usize {
    32
}

fn default_anchor_counts() -> Vec<usize> {
    vec![25, 50, 100]
}

fn default_step_grid() -> Vec<usize> {
    vec![0, 1, 2, 5, 10, 20]
}

/// Command-line values that replace configuration fields.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub out: Option<String>,
    pub eta: Option<f64>,
    pub steps: Option<usize>,
    pub anchors: Option<String>,
    pub main: Option<String>,
    pub seed: Option<u64>,
    pub max_tokens: Option<usize>,
    pub dataset: Option<String>,
}

impl RunConfig {
    pub fn from_json(text: &str, base: impl Into<PathBuf>) -> Result<Self> {
        let mut cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::config(format!("cannot parse configuration: {e}")))?;
        cfg.base = base.into();
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read configuration {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_json(&text, base)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configuration serializes")
    }

    /// Resolves a configured path against the configuration directory.
    /// Command-line overrides are taken relative to the working directory.
    pub fn resolve(&self, path: &str) -> PathBuf {
        self.base.join(path)
    }

    pub fn apply(&mut self, o: &Overrides) {
        let cwd = std::env::current_dir().unwrap_or_default();
        let absolute = |p: &String| cwd.join(p).to_string_lossy().into_owned();
        if let Some(v) = &o.out {
            self.out = absolute(v);
        }
        if let Some(v) = o.eta {
            self.fusion.eta = v;
        }
        if let Some(v) = o.steps {
            self.fusion.steps = v;
        }
        if let Some(v) = &o.anchors {
            self.anchors = v.clone();
        }
        if let Some(v) = &o.main {
            self.main = MainSetting::parse(v).unwrap_or(MainSetting::Name(v.clone()));
        }
        if let Some(v) = o.seed {
            self.seed = Some(v);
        }
        if let Some(v) = o.max_tokens {
            self.stop.max_tokens = v;
        }
        if let Some(v) = &o.dataset {
            self.datasets.test = Some(absolute(v));
        }
    }

    /// Every problem with the configuration, one message each.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.models.is_empty() {
            out.push("models: at least one model is required".to_string());
        }
        let mut names = std::collections::HashSet::new();
        let mut exists = |field: String, path: &str| {
            if !self.resolve(path).is_file() {
                out.push(format!("{field}: file not found: {}", self.resolve(path).display()));
            }
        };
        for (i, m) in self.models.iter().enumerate() {
            exists(format!("models[{i}].vocab"), &m.vocab);
            exists(format!("models[{i}].embeddings"), &m.embeddings);
            match &m.backend {
                BackendConfig::Ngram { corpus, .. } => exists(format!("models[{i}].backend.corpus"), corpus),
                BackendConfig::Table { path } => exists(format!("models[{i}].backend.path"), path),
                BackendConfig::Remote { .. } => {}
            }
        }
        if let Some(dev) = &self.datasets.dev {
            exists("datasets.dev".to_string(), dev);
        }
        if let Some(test) = &self.datasets.test {
            exists("datasets.test".to_string(), test);
        }
        for (i, m) in self.models.iter().enumerate() {
            if m.name.is_empty() || m.name.contains(['/', '\\', ',']) {
                out.push(format!("models[{i}].name: `{}` is not a usable model name", m.name));
            }
            if !names.insert(m.name.as_str()) {
                out.push(format!("models[{i}].name: duplicate model name `{}`", m.name));
            }
            match &m.backend {
                BackendConfig::Ngram { order, delta, .. } => {
                    if *order == 0 {
                        out.push(format!("models[{i}].backend.order must be at least 1"));
                    }
                    if !(delta.is_finite() && *delta > 0.0) {
                        out.push(format!("models[{i}].backend.delta must be > 0 (got {delta})"));
                    }
                }
                BackendConfig::Table { .. } => {}
                BackendConfig::Remote {
                    transport,
                    command,
                    address,
                    timeout_ms,
                } => {
                    match transport {
                        Transport::Stdio if command.is_empty() => {
                            out.push(format!("models[{i}].backend.command is required for stdio transport"))
                        }
                        Transport::Socket if address.is_none() => {
                            out.push(format!("models[{i}].backend.address is required for socket transport"))
                        }
                        _ => {}
                    }
                    if *timeout_ms == 0 {
                        out.push(format!("models[{i}].backend.timeout_ms must be positive"));
                    }
                }
            }
        }
        if let Err(e) = AnchorStrategy::parse(&self.anchors, 0) {
            out.push(format!("anchors: {e}"));
        }
        for p in self.ensemble_config_unchecked().problems() {
            out.push(p);
        }
        if !self.fusion.weights.is_empty() && self.fusion.weights.len() != self.models.len() {
            out.push(format!(
                "fusion.weights: {} weights for {} models",
                self.fusion.weights.len(),
                self.models.len()
            ));
        }
        match self.main.policy() {
            Ok(MainPolicy::Fixed(i)) if i >= self.models.len() => {
                out.push(format!("main: index {i} out of range for {} models", self.models.len()))
            }
            Err(e) => out.push(format!("main: {e}")),
            _ => {}
        }
        if self.seed.is_none() {
            out.push("seed: required (all randomness derives from it)".to_string());
        }
        if self.sweeps.eta.is_empty() || self.sweeps.eta.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
            out.push("sweeps.eta: grid must be non-empty with values >= 0".to_string());
        }
        if self.sweeps.anchor_counts.contains(&0) {
            out.push("sweeps.anchor_counts: counts must be positive".to_string());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("\n  {}", problems.join("\n  "))))
        }
    }

    fn ensemble_config_unchecked(&self) -> EnsembleConfig {
        EnsembleConfig {
            eta: self.fusion.eta,
            steps: self.fusion.steps,
            weights: self.fusion.weights.clone(),
            main_policy: self.main.policy().unwrap_or(MainPolicy::AutoDev),
            prob_floor: self.fusion.prob_floor,
            early_stop_loss: self.fusion.early_stop_loss,
        }
    }

    pub fn ensemble_config(&self) -> Result<EnsembleConfig> {
        let cfg = self.ensemble_config_unchecked();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or_default()
    }

    pub fn anchor_strategy(&self) -> Result<AnchorStrategy> {
        AnchorStrategy::parse(&self.anchors, self.seed())
    }

    pub fn stop_conditions(&self) -> StopConditions {
        StopConditions {
            max_tokens: self.stop.max_tokens,
            stop_surfaces: self.stop.stop_surfaces.clone(),
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(&self.out)
    }

    pub fn dev_items(&self) -> Result<Option<Vec<EvalItem>>> {
        self.datasets.dev.as_ref().map(|p| load_items(self.resolve(p))).transpose()
    }

    pub fn test_items(&self) -> Result<Option<Vec<EvalItem>>> {
        self.datasets.test.as_ref().map(|p| load_items(self.resolve(p))).transpose()
    }

    pub fn model_index(&self, name: &str) -> Result<usize> {
        self.models
            .iter()
            .position(|m| m.name == name)
            .ok_or_else(|| Error::config(format!("no model named `{name}`")))
    }

    pub fn load_vocab(&self, index: usize) -> Result<Arc<Vocabulary>> {
        Ok(Arc::new(Vocabulary::load_jsonl(self.resolve(&self.models[index].vocab))?))
    }

    /// Builds the backend of model `index`, connecting if it is remote.
    pub fn load_backend(&self, index: usize) -> Result<Arc<dyn ModelBackend>> {
        let m = &self.models[index];
        let vocab = self.load_vocab(index)?;
        let backend: Arc<dyn ModelBackend> = match &m.backend {
            BackendConfig::Ngram { corpus, order, delta } => {
                let path = self.resolve(corpus);
                let shown = path.display().to_string();
                let reader = BufReader::new(fs::File::open(&path)?);
                let mut seqs = Vec::new();
                for (n, line) in reader.lines().enumerate() {
                    let line = line?;
                    if line.is_empty() {
                        continue;
                    }
                    let ids = vocab.tokenize(line.as_bytes()).map_err(|(offset, byte)| {
                        Error::format(&shown, format!("line {}: byte {byte:#04x} at {offset} not covered by `{}`", n + 1, m.name))
                    })?;
                    seqs.push(ids);
                }
                Arc::new(train_ngram(m.name.clone(), vocab, &seqs, *order, *delta)?)
            }
            BackendConfig::Table { path } => Arc::new(TableModel::load(self.resolve(path), vocab)?),
            BackendConfig::Remote {
                transport,
                command,
                address,
                timeout_ms,
            } => {
                let endpoint = match transport {
                    Transport::Stdio => Endpoint::Process {
                        program: command[0].clone(),
                        args: command[1..].to_vec(),
                    },
                    Transport::Socket => Endpoint::Socket(address.clone().unwrap_or_default()),
                };
                Arc::new(remote_backend(&endpoint, vocab, Duration::from_millis(*timeout_ms))?)
            }
        };
        Ok(backend)
    }

    pub fn load_models(&self) -> Result<Vec<ModelEntry>> {
        (0..self.models.len())
            .map(|i| {
                let backend = self.load_backend(i)?;
                let embeddings = EmbeddingTable::load(self.resolve(&self.models[i].embeddings))?;
                Ok(ModelEntry::new(backend, Arc::new(embeddings)))
            })
            .collect()
    }
}

/// Writes a toy world as files plus a `config.json` that loads it; returns
/// the configuration path.
pub fn write_toy_setup(world: &ToyWorld, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("models"))?;
    fs::create_dir_all(dir.join("data"))?;
    let mut models = Vec::new();
    for m in &world.models {
        let name = &m.spec.name;
        let vocab = format!("models/{name}.vocab.jsonl");
        let embeddings = format!("models/{name}.dpe");
        let corpus = format!("models/{name}.corpus.txt");
        m.vocab.save_jsonl(dir.join(&vocab))?;
        m.embeddings.save(dir.join(&embeddings))?;
        fs::write(dir.join(&corpus), m.lines.join("\n") + "\n")?;
        models.push(ModelConfig {
            name: name.clone(),
            vocab,
            embeddings,
            backend: BackendConfig::Ngram {
                corpus,
                order: m.spec.order,
                delta: m.spec.delta,
            },
        });
    }
    save_items(dir.join("data/dev.jsonl"), &world.dev)?;
    save_items(dir.join("data/test.jsonl"), &world.test)?;
    let config = RunConfig {
        models,
        anchors: default_anchors(),
        normalize: true,
        fusion: FusionConfig::default(),
        main: MainSetting::default(),
        datasets: DatasetsConfig {
            dev: Some("data/dev.jsonl".to_string()),
            test: Some("data/test.jsonl".to_string()),
        },
        stop: StopConfig {
            max_tokens: world.stop.max_tokens,
            stop_surfaces: world.stop.stop_surfaces.clone(),
        },
        sweeps: SweepConfig::default(),
        seed: Some(world.config.seed),
        out: default_out(),
        base: dir.to_path_buf(),
    };
    let path = dir.join("config.json");
    fs::write(&path, config.to_json() + "\n")?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = RunConfig::from_json(
            r#"{"models":[{"name":"m","vocab":"v","embeddings":"e","backend":{"kind":"table","path":"t"}}],"seed":1}"#,
            "/nonexistent",
        )
        .unwrap();
        assert_eq!(cfg.anchors, "full");
        assert_eq!(cfg.fusion.eta, 0.1);
        assert_eq!(cfg.fusion.steps, 5);
        assert_eq!(cfg.main, MainSetting::Name("auto".into()));
        assert_eq!(cfg.sweeps.eta.len(), 7);
        // Only the missing files are reported.
        assert_eq!(cfg.problems().len(), 3);
    }

    #[test]
    fn every_problem_is_listed() {
        let cfg = RunConfig::from_json(
            r#"{"models":[
                {"name":"m","vocab":"v","embeddings":"e","backend":{"kind":"ngram","corpus":"c","order":0,"delta":0}},
                {"name":"m","vocab":"v","embeddings":"e","backend":{"kind":"remote","transport":"socket"}}
              ],
              "anchors":"some","fusion":{"eta":-1},"main":5}"#,
            "/nonexistent",
        )
        .unwrap();
        let problems = cfg.problems().join("\n");
        for needle in [
            "order must be",
            "delta must be",
            "duplicate model name",
            "address is required",
            "anchors:",
            "fusion.eta",
            "main: index 5",
            "seed: required",
        ] {
            assert!(problems.contains(needle), "missing `{needle}` in:\n{problems}");
        }
    }

    #[test]
    fn unknown_fields_and_kinds_are_rejected() {
        assert!(RunConfig::from_json(r#"{"models":[],"seed":1,"bogus":1}"#, ".").is_err());
        assert!(RunConfig::from_json(
            r#"{"models":[{"name":"m","vocab":"v","embeddings":"e","backend":{"kind":"gpt"}}],"seed":1}"#,
            "."
        )
        .is_err());
    }

    #[test]
    fn overrides_replace_fields() {
        let mut cfg = RunConfig::from_json(r#"{"models":[],"seed":1}"#, ".").unwrap();
        cfg.apply(&Overrides {
            eta: Some(0.25),
            steps: Some(9),
            anchors: Some("sample:4".into()),
            main: Some("1".into()),
            seed: Some(3),
            max_tokens: Some(2),
            ..Overrides::default()
        });
        assert_eq!((cfg.fusion.eta, cfg.fusion.steps), (0.25, 9));
        assert_eq!(cfg.anchor_strategy().unwrap(), AnchorStrategy::Sample { k: 4, seed: 3 });
        assert_eq!(cfg.main, MainSetting::Index(1));
        assert_eq!(cfg.stop.max_tokens, 2);
    }
}
