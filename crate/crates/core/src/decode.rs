//! Per-step ensemble decoding and teacher-forced option scoring.
//!
//! All models stay conditioned on the same running text. After every
//! emitted token the text is re-tokenized by each model's own vocabulary,
//! so models that segment the text differently never drift apart.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::backends::ModelBackend;
use crate::error::{Error, Result};
use crate::fusion::{
    aggregate, argmax, inverse_transform, to_relative, AbsoluteDistribution, EnsembleConfig,
    RelativeRepresentation, SearchOutcome,
};
use crate::relspace::RelativeMatrix;
use crate::vocab::display_surface;

const TRACE_TOP_K: usize = 5;

/// A backend paired with its relative matrix over the shared anchors.
#[derive(Clone)]
pub struct EnsembleMember {
    pub backend: Arc<dyn ModelBackend>,
    pub matrix: Arc<RelativeMatrix>,
}

impl EnsembleMember {
    pub fn new(backend: Arc<dyn ModelBackend>, matrix: Arc<RelativeMatrix>) -> Self {
        EnsembleMember { backend, matrix }
    }

    pub fn name(&self) -> &str {
        self.backend.name()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StopConditions {
    pub max_tokens: usize,
    /// Generation ends at the first occurrence of any of these strings,
    /// which is not included in the output.
    pub stop_surfaces: Vec<String>,
}

impl StopConditions {
    pub fn new(max_tokens: usize, stop_surfaces: &[&str]) -> Self {
        StopConditions {
            max_tokens,
            stop_surfaces: stop_surfaces.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Byte offset where `generated` must be cut, if a stop string occurs.
    fn cut(&self, generated: &[u8]) -> Option<usize> {
        self.stop_surfaces
            .iter()
            .filter(|s| !s.is_empty())
            .filter_map(|s| find(generated, s.as_bytes()))
            .min()
    }
}

fn find(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack.windows(needle.len()).position(|w| w == needle)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelTop {
    pub model: String,
    pub ids: Vec<u32>,
    pub probs: Vec<f64>,
}

/// Diagnostics for one emitted token.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub emitted: String,
    pub loss0: f64,
    #[serde(rename = "lossT")]
    pub loss_t: f64,
    pub per_model_top: Vec<ModelTop>,
    #[serde(skip)]
    pub relative_entropy: f64,
    #[serde(skip)]
    pub emitted_id: u32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DecodeTrace {
    pub steps: Vec<StepRecord>,
}

impl DecodeTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for rec in &self.steps {
            out.push_str(&serde_json::to_string(rec).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(self.to_jsonl().as_bytes())?;
        w.flush()?;
        Ok(())
    }
}

/// Everything computed for one fused prediction.
#[derive(Debug, Clone)]
pub struct FusedStep {
    pub per_model: Vec<AbsoluteDistribution>,
    pub target: RelativeRepresentation,
    pub search: SearchOutcome,
}

impl FusedStep {
    pub fn p_final(&self) -> &AbsoluteDistribution {
        &self.search.p_final
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub text: String,
    pub trace: DecodeTrace,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptionScore {
    /// Sum of log-probabilities of the forced tokens.
    pub log_prob: f64,
    pub tokens: usize,
}

impl OptionScore {
    pub fn mean(&self) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            self.log_prob / self.tokens as f64
        }
    }
}

/// One decoding run over `N` models fused into the main model's vocabulary.
pub struct EnsembleSession {
    members: Vec<EnsembleMember>,
    main: usize,
    config: EnsembleConfig,
    weights: Vec<f64>,
    stop: StopConditions,
    text: Vec<u8>,
    prompt_len: usize,
    contexts: Vec<Vec<u32>>,
    trace: DecodeTrace,
}

impl EnsembleSession {
    pub fn new(members: Vec<EnsembleMember>, main: usize, config: EnsembleConfig, stop: StopConditions) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::argument("an ensemble needs at least one model"));
        }
        if main >= members.len() {
            return Err(Error::argument(format!(
                "main model index {main} out of range for {} models",
                members.len()
            )));
        }
        config.validate()?;
        let weights = config.weights_for(members.len())?;
        check_members(&members)?;
        let n = members.len();
        Ok(EnsembleSession {
            members,
            main,
            config,
            weights,
            stop,
            text: Vec::new(),
            prompt_len: 0,
            contexts: vec![Vec::new(); n],
            trace: DecodeTrace::default(),
        })
    }

    pub fn members(&self) -> &[EnsembleMember] {
        &self.members
    }

    pub fn main_index(&self) -> usize {
        self.main
    }

    pub fn config(&self) -> &EnsembleConfig {
        &self.config
    }

    pub fn text(&self) -> &[u8] {
        &self.text
    }

    pub fn contexts(&self) -> &[Vec<u32>] {
        &self.contexts
    }

    pub fn trace(&self) -> &DecodeTrace {
        &self.trace
    }

    /// Starts over from `prompt`.
    pub fn reset(&mut self, prompt: &str) -> Result<()> {
        self.text = prompt.as_bytes().to_vec();
        self.prompt_len = self.text.len();
        self.trace = DecodeTrace::default();
        self.retokenize()
    }

    fn retokenize(&mut self) -> Result<()> {
        for (m, member) in self.members.iter().enumerate() {
            let vocab = member.backend.vocabulary();
            self.contexts[m] = vocab.tokenize(&self.text).map_err(|(offset, byte)| Error::Untokenizable {
                model: member.name().to_string(),
                text: String::from_utf8_lossy(&self.text).into_owned(),
                offset,
                byte,
            })?;
        }
        Ok(())
    }

    fn query(&self) -> Result<Vec<AbsoluteDistribution>> {
        let ask = |(m, member): (usize, &EnsembleMember)| {
            member
                .backend
                .next_distribution(&self.contexts[m])
                .and_then(|d| {
                    if d.len() != member.matrix.rows() {
                        Err(Error::argument(format!(
                            "returned {} probabilities for a {}-row matrix",
                            d.len(),
                            member.matrix.rows()
                        )))
                    } else {
                        Ok(d.with_model_index(m))
                    }
                })
                .map_err(|e| Error::Backend {
                    model: member.name().to_string(),
                    source: Box::new(e),
                })
        };
        if self.members.len() == 1 {
            return ask((0, &self.members[0])).map(|d| vec![d]);
        }
        self.members.par_iter().enumerate().map(ask).collect()
    }

    /// Queries every model and fuses their predictions at the current position.
    pub fn fuse(&self) -> Result<FusedStep> {
        let per_model = self.query()?;
        let reps = per_model
            .iter()
            .zip(&self.members)
            .map(|(p, member)| to_relative(p, &member.matrix))
            .collect::<Result<Vec<_>>>()?;
        let target = aggregate(&reps, &self.weights)?;
        let main = &self.members[self.main];
        let search = inverse_transform(&target, &per_model[self.main], &main.matrix, &self.config)?;
        Ok(FusedStep {
            per_model,
            target,
            search,
        })
    }

    fn append(&mut self, surface: &[u8]) -> Result<()> {
        self.text.extend_from_slice(surface);
        self.retokenize()
    }

    /// Emits the greedy token of the fused distribution and returns its surface.
    pub fn ensemble_step(&mut self) -> Result<Vec<u8>> {
        let fused = self.fuse()?;
        let id = fused.p_final().argmax() as u32;
        let vocab = self.members[self.main].backend.vocabulary().clone();
        let surface = vocab.surface(id).expect("argmax lies inside the vocabulary").to_vec();
        let record = StepRecord {
            step: self.trace.len(),
            emitted: display_surface(&surface),
            loss0: fused.search.initial_loss(),
            loss_t: fused.search.final_loss(),
            per_model_top: fused
                .per_model
                .iter()
                .zip(&self.members)
                .map(|(p, member)| {
                    let top = p.top_k(TRACE_TOP_K);
                    ModelTop {
                        model: member.name().to_string(),
                        ids: top.iter().map(|t| t.0).collect(),
                        probs: top.iter().map(|t| t.1).collect(),
                    }
                })
                .collect(),
            relative_entropy: fused.target.entropy(),
            emitted_id: id,
        };
        self.append(&surface)?;
        self.trace.steps.push(record);
        Ok(surface)
    }

    /// Decodes from `prompt` until a stop string appears or `max_tokens` are emitted.
    pub fn generate(&mut self, prompt: &str) -> Result<Generation> {
        self.reset(prompt)?;
        let mut cut = None;
        for _ in 0..self.stop.max_tokens {
            self.ensemble_step()?;
            cut = self.stop.cut(&self.text[self.prompt_len..]);
            if cut.is_some() {
                break;
            }
        }
        let generated = &self.text[self.prompt_len..];
        let generated = &generated[..cut.unwrap_or(generated.len())];
        Ok(Generation {
            text: String::from_utf8_lossy(generated).into_owned(),
            trace: self.trace.clone(),
        })
    }

    /// Log-likelihood of `option` after `prompt`, teacher-forced in the main
    /// model's tokenization through the fused distribution.
    pub fn score_option(&mut self, prompt: &str, option: &str) -> Result<OptionScore> {
        self.reset(prompt)?;
        let main = self.members[self.main].backend.clone();
        let vocab = main.vocabulary().clone();
        let forced = vocab
            .tokenize(option.as_bytes())
            .map_err(|(offset, byte)| Error::Untokenizable {
                model: main.name().to_string(),
                text: option.to_string(),
                offset,
                byte,
            })?;
        let floor = self.config.prob_floor;
        let mut log_prob = 0.0;
        for &id in &forced {
            let fused = self.fuse()?;
            log_prob += fused.p_final().values()[id as usize].max(floor).ln();
            let surface = vocab.surface(id).expect("tokenizer yields valid ids").to_vec();
            self.append(&surface)?;
        }
        Ok(OptionScore {
            log_prob,
            tokens: forced.len(),
        })
    }
}

fn check_members(members: &[EnsembleMember]) -> Result<()> {
    let surfaces = |member: &EnsembleMember| -> Result<Vec<Vec<u8>>> {
        let vocab = member.backend.vocabulary();
        if member.matrix.rows() != vocab.len() {
            return Err(Error::argument(format!(
                "model `{}`: matrix has {} rows for a {}-token vocabulary",
                member.name(),
                member.matrix.rows(),
                vocab.len()
            )));
        }
        member
            .matrix
            .anchor_ids()
            .iter()
            .map(|&id| {
                vocab
                    .surface(id)
                    .map(|s| s.to_vec())
                    .ok_or_else(|| Error::argument(format!("model `{}`: anchor id {id} out of range", member.name())))
            })
            .collect()
    };
    let reference = surfaces(&members[0])?;
    for member in &members[1..] {
        if surfaces(member)? != reference {
            return Err(Error::AnchorMismatch(format!(
                "model `{}` was built over different anchors than `{}`",
                member.name(),
                members[0].name()
            )));
        }
        if member.matrix.is_normalized() != members[0].matrix.is_normalized() {
            return Err(Error::AnchorMismatch("mixing raw and normalized matrices".into()));
        }
    }
    Ok(())
}

/// Standalone greedy decoding of a single backend, with the same text-level
/// context handling as [`EnsembleSession`].
pub fn greedy_generate(backend: &dyn ModelBackend, prompt: &str, stop: &StopConditions) -> Result<String> {
    let vocab = backend.vocabulary();
    let mut text = prompt.as_bytes().to_vec();
    let start = text.len();
    let mut cut = None;
    for _ in 0..stop.max_tokens {
        let ctx = vocab.tokenize(&text).map_err(|(offset, byte)| Error::Untokenizable {
            model: backend.name().to_string(),
            text: String::from_utf8_lossy(&text).into_owned(),
            offset,
            byte,
        })?;
        let dist = backend.next_distribution(&ctx)?;
        let id = argmax(dist.values()) as u32;
        text.extend_from_slice(vocab.surface(id).expect("argmax inside vocabulary"));
        cut = stop.cut(&text[start..]);
        if cut.is_some() {
            break;
        }
    }
    let generated = &text[start..];
    Ok(String::from_utf8_lossy(&generated[..cut.unwrap_or(generated.len())]).into_owned())
}
