//! Evaluation of individual models and ensembles on exact-match and
//! multiple-choice items, with hyperparameter sweeps and CSV reports.

pub mod toy;

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::ModelBackend;
use crate::decode::{EnsembleMember, EnsembleSession, StopConditions};
use crate::error::{Error, Result};
use crate::fusion::{EnsembleConfig, MainPolicy};
use crate::relspace::{build_relative_matrix, consistency, normalize_rows, EmbeddingTable, RelativeMatrix};
use crate::vocab::{common_tokens, select_anchors, AnchorSet, AnchorStrategy, Vocabulary};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvalItem {
    Em { prompt: String, answer: String },
    Mc { prompt: String, options: Vec<String>, gold: usize },
}

impl EvalItem {
    pub fn prompt(&self) -> &str {
        match self {
            EvalItem::Em { prompt, .. } | EvalItem::Mc { prompt, .. } => prompt,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let EvalItem::Mc { options, gold, .. } = self {
            if options.len() < 2 {
                return Err(Error::argument("multiple-choice item needs at least two options"));
            }
            if *gold >= options.len() {
                return Err(Error::argument(format!(
                    "gold index {gold} out of range for {} options",
                    options.len()
                )));
            }
        }
        Ok(())
    }
}

pub fn load_items(path: impl AsRef<Path>) -> Result<Vec<EvalItem>> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let reader = BufReader::new(File::open(path)?);
    let mut items = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item: EvalItem =
            serde_json::from_str(&line).map_err(|e| Error::format(&shown, format!("line {}: {e}", n + 1)))?;
        item.validate()
            .map_err(|e| Error::format(&shown, format!("line {}: {e}", n + 1)))?;
        items.push(item);
    }
    Ok(items)
}

pub fn save_items(path: impl AsRef<Path>, items: &[EvalItem]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// A backend together with its token embeddings.
#[derive(Clone)]
pub struct ModelEntry {
    pub backend: Arc<dyn ModelBackend>,
    pub embeddings: Arc<EmbeddingTable>,
}

impl ModelEntry {
    pub fn new(backend: Arc<dyn ModelBackend>, embeddings: Arc<EmbeddingTable>) -> Self {
        ModelEntry { backend, embeddings }
    }

    pub fn name(&self) -> &str {
        self.backend.name()
    }

    pub fn vocabulary(&self) -> &Arc<Vocabulary> {
        self.backend.vocabulary()
    }
}

/// Selects anchors among the vocabularies' common tokens and builds one
/// relative matrix per model, row-normalized unless `normalize` is false.
pub fn relative_matrices(
    vocabs: &[&Vocabulary],
    embeddings: &[&EmbeddingTable],
    strategy: AnchorStrategy,
    normalize: bool,
) -> Result<(AnchorSet, Vec<RelativeMatrix>)> {
    if vocabs.is_empty() {
        return Err(Error::argument("no models configured"));
    }
    let common = if vocabs.len() == 1 {
        vocabs[0].matchable_surfaces().map(|s| s.to_vec()).collect()
    } else {
        common_tokens(vocabs)?
    };
    let anchors = select_anchors(&common, strategy, vocabs)?;
    let matrices = embeddings
        .par_iter()
        .zip(vocabs)
        .enumerate()
        .map(|(m, (table, vocab))| {
            if table.rows() != vocab.len() {
                return Err(Error::argument(format!(
                    "model {m}: {} embedding rows for a {}-token vocabulary",
                    table.rows(),
                    vocab.len()
                )));
            }
            let raw = build_relative_matrix(table, &anchors, m)?;
            if normalize {
                normalize_rows(&raw)
            } else {
                Ok(raw)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((anchors, matrices))
}

/// [`relative_matrices`] paired with each model's backend.
pub fn build_members(
    models: &[ModelEntry],
    strategy: AnchorStrategy,
    normalize: bool,
) -> Result<(AnchorSet, Vec<EnsembleMember>)> {
    let vocabs: Vec<&Vocabulary> = models.iter().map(|m| m.vocabulary().as_ref()).collect();
    let tables: Vec<&EmbeddingTable> = models.iter().map(|m| m.embeddings.as_ref()).collect();
    let (anchors, matrices) = relative_matrices(&vocabs, &tables, strategy, normalize)?;
    let members = models
        .iter()
        .zip(matrices)
        .map(|(entry, matrix)| EnsembleMember::new(entry.backend.clone(), Arc::new(matrix)))
        .collect();
    Ok((anchors, members))
}

/// Per-item correctness and the resulting accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub correct: Vec<bool>,
    pub accuracy: f64,
}

fn judge(session: &mut EnsembleSession, item: &EvalItem) -> Result<bool> {
    match item {
        EvalItem::Em { prompt, answer } => {
            let generation = session.generate(prompt)?;
            Ok(generation.text.trim() == answer)
        }
        EvalItem::Mc { prompt, options, gold } => {
            let mut best = (0, f64::NEG_INFINITY);
            for (i, option) in options.iter().enumerate() {
                let score = session.score_option(prompt, option)?.mean();
                if score > best.1 {
                    best = (i, score);
                }
            }
            Ok(best.0 == *gold)
        }
    }
}

/// Accuracy of the ensemble of `members` fused into `main` on `items`.
///
/// An item whose generation or scoring fails counts as incorrect.
pub fn evaluate(
    members: &[EnsembleMember],
    main: usize,
    config: &EnsembleConfig,
    stop: &StopConditions,
    items: &[EvalItem],
) -> Result<Evaluation> {
    if items.is_empty() {
        return Err(Error::argument("no evaluation items"));
    }
    // Surfaces configuration errors once instead of per item.
    EnsembleSession::new(members.to_vec(), main, config.clone(), stop.clone())?;
    let correct: Vec<bool> = items
        .par_iter()
        .enumerate()
        .map(|(n, item)| {
            let outcome = EnsembleSession::new(members.to_vec(), main, config.clone(), stop.clone())
                .and_then(|mut session| judge(&mut session, item));
            outcome.unwrap_or_else(|e| {
                log::warn!("item {n} failed: {e}");
                false
            })
        })
        .collect();
    let accuracy = correct.iter().filter(|&&c| c).count() as f64 / items.len() as f64;
    Ok(Evaluation { correct, accuracy })
}

/// Accuracy of member `index` on its own.
pub fn evaluate_individual(
    members: &[EnsembleMember],
    index: usize,
    config: &EnsembleConfig,
    stop: &StopConditions,
    items: &[EvalItem],
) -> Result<Evaluation> {
    let member = members
        .get(index)
        .ok_or_else(|| Error::argument(format!("model index {index} out of range")))?;
    let solo = EnsembleConfig {
        weights: Vec::new(),
        ..config.clone()
    };
    evaluate(std::slice::from_ref(member), 0, &solo, stop, items)
}

/// Index of the best individual model on `dev` (lowest index on ties), with
/// every model's accuracy.
pub fn select_main_model(
    members: &[EnsembleMember],
    config: &EnsembleConfig,
    stop: &StopConditions,
    dev: &[EvalItem],
) -> Result<(usize, Vec<f64>)> {
    if members.is_empty() {
        return Err(Error::argument("no models to choose from"));
    }
    let scores = (0..members.len())
        .map(|i| evaluate_individual(members, i, config, stop, dev).map(|e| e.accuracy))
        .collect::<Result<Vec<f64>>>()?;
    Ok((argmax_first(&scores), scores))
}

fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Resolves the configured main-model policy.
pub fn resolve_main(
    members: &[EnsembleMember],
    config: &EnsembleConfig,
    stop: &StopConditions,
    dev: &[EvalItem],
) -> Result<usize> {
    match config.main_policy {
        MainPolicy::Fixed(i) if i < members.len() => Ok(i),
        MainPolicy::Fixed(i) => Err(Error::argument(format!(
            "main model index {i} out of range for {} models",
            members.len()
        ))),
        MainPolicy::AutoDev => select_main_model(members, config, stop, dev).map(|(i, _)| i),
    }
}

/// `0.00, 0.05, …, 0.30`.
pub fn default_eta_grid() -> Vec<f64> {
    (0..=6).map(|i| i as f64 / 20.0).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint<T> {
    pub value: T,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EtaSweep {
    pub points: Vec<SweepPoint<f64>>,
    /// Best η on the sweep split (smallest on ties).
    pub best: f64,
}

pub fn sweep_eta(
    members: &[EnsembleMember],
    main: usize,
    config: &EnsembleConfig,
    stop: &StopConditions,
    dev: &[EvalItem],
    grid: &[f64],
) -> Result<EtaSweep> {
    if grid.is_empty() {
        return Err(Error::argument("η grid is empty"));
    }
    if let Some(bad) = grid.iter().find(|e| !(e.is_finite() && **e >= 0.0)) {
        return Err(Error::argument(format!("η grid value {bad} is negative or not finite")));
    }
    let points = grid
        .iter()
        .map(|&eta| {
            let cfg = config.clone().with_eta(eta);
            evaluate(members, main, &cfg, stop, dev).map(|e| SweepPoint {
                value: eta,
                accuracy: e.accuracy,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best = &points[0];
    for p in &points {
        if p.accuracy > best.accuracy || (p.accuracy == best.accuracy && p.value < best.value) {
            best = p;
        }
    }
    let best = best.value;
    Ok(EtaSweep { points, best })
}

pub fn sweep_steps(
    members: &[EnsembleMember],
    main: usize,
    config: &EnsembleConfig,
    stop: &StopConditions,
    dev: &[EvalItem],
    grid: &[usize],
) -> Result<Vec<SweepPoint<usize>>> {
    if grid.is_empty() {
        return Err(Error::argument("step grid is empty"));
    }
    grid.iter()
        .map(|&steps| {
            let cfg = config.clone().with_steps(steps);
            evaluate(members, main, &cfg, stop, dev).map(|e| SweepPoint {
                value: steps,
                accuracy: e.accuracy,
            })
        })
        .collect()
}

/// Accuracy with randomly sampled anchor subsets of each size in `counts`,
/// followed by the full common set.
#[allow(clippy::too_many_arguments)]
pub fn sweep_anchor_count(
    models: &[ModelEntry],
    main: usize,
    config: &EnsembleConfig,
    stop: &StopConditions,
    dev: &[EvalItem],
    counts: &[usize],
    seed: u64,
    normalize: bool,
) -> Result<Vec<SweepPoint<AnchorStrategy>>> {
    let (full, _) = build_members(models, AnchorStrategy::Full, normalize)?;
    if let Some(&bad) = counts.iter().find(|&&k| k == 0 || k > full.len()) {
        return Err(Error::argument(format!(
            "anchor count {bad} outside 1..={} common tokens",
            full.len()
        )));
    }
    counts
        .iter()
        .map(|&k| AnchorStrategy::Sample { k, seed })
        .chain(std::iter::once(AnchorStrategy::Full))
        .map(|strategy| {
            let (_, members) = build_members(models, strategy, normalize)?;
            evaluate(&members, main, config, stop, dev).map(|e| SweepPoint {
                value: strategy,
                accuracy: e.accuracy,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ablation {
    pub raw: f64,
    pub normalized: f64,
}

/// The same evaluation with raw and with row-normalized relative matrices.
pub fn ablate_normalization(
    models: &[ModelEntry],
    strategy: AnchorStrategy,
    main: usize,
    config: &EnsembleConfig,
    stop: &StopConditions,
    dev: &[EvalItem],
) -> Result<Ablation> {
    let run = |normalize| -> Result<f64> {
        let (_, members) = build_members(models, strategy, normalize)?;
        Ok(evaluate(&members, main, config, stop, dev)?.accuracy)
    };
    Ok(Ablation {
        raw: run(false)?,
        normalized: run(true)?,
    })
}

/// Cross-model agreement of relative representations for one model pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsistencyGap {
    /// Common tokens with non-zero embeddings in both models.
    pub shared: usize,
    /// Mean cosine between the two models' rows for the same token.
    pub mean: f64,
    /// Mean cosine between rows of randomly paired different tokens.
    pub baseline: f64,
}

impl ConsistencyGap {
    pub fn gap(&self) -> f64 {
        self.mean - self.baseline
    }
}

/// Compares raw relative matrices of `a` and `b` over their full common set.
pub fn consistency_gap(a: &ModelEntry, b: &ModelEntry, random_pairs: usize, seed: u64) -> Result<ConsistencyGap> {
    let pair = [a.clone(), b.clone()];
    let (anchors, members) = build_members(&pair, AnchorStrategy::Full, false)?;
    let (va, vb) = (a.vocabulary(), b.vocabulary());
    let shared: Vec<(u32, u32)> = anchors
        .anchors()
        .iter()
        .filter_map(|s| Some((va.id_of(s)?, vb.id_of(s)?)))
        .filter(|&(ia, ib)| !a.embeddings.is_flagged(ia as usize) && !b.embeddings.is_flagged(ib as usize))
        .collect();
    if shared.len() < 2 {
        return Err(Error::argument("fewer than two shared tokens with non-zero embeddings"));
    }
    let (ma, mb) = (&members[0].matrix, &members[1].matrix);
    let mean = consistency(ma, mb, &shared)?.mean;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mismatched: Vec<(u32, u32)> = (0..random_pairs)
        .map(|_| {
            let i = rng.gen_range(0..shared.len());
            let mut j = rng.gen_range(0..shared.len() - 1);
            if j >= i {
                j += 1;
            }
            (shared[i].0, shared[j].1)
        })
        .collect();
    let baseline = consistency(ma, mb, &mismatched)?.mean;
    Ok(ConsistencyGap {
        shared: shared.len(),
        mean,
        baseline,
    })
}

pub const REPORT_HEADER: &str = "condition,split,model,accuracy,delta,eta,steps,anchors,seed";

/// One report line. Individual rows carry no fusion settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub condition: String,
    pub split: String,
    pub model: String,
    pub accuracy: f64,
    pub eta: Option<f64>,
    pub steps: Option<usize>,
    pub anchors: Option<String>,
    pub seed: u64,
}

pub const INDIVIDUAL: &str = "individual";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunReport {
    pub rows: Vec<ReportRow>,
}

impl RunReport {
    pub fn individual(&mut self, split: &str, model: &str, accuracy: f64, seed: u64) {
        self.rows.push(ReportRow {
            condition: INDIVIDUAL.to_string(),
            split: split.to_string(),
            model: model.to_string(),
            accuracy,
            eta: None,
            steps: None,
            anchors: None,
            seed,
        });
    }

    pub fn push(&mut self, row: ReportRow) {
        self.rows.push(row);
    }

    /// Best individual accuracy on `split`, if any individual row exists.
    pub fn best_individual(&self, split: &str) -> Option<f64> {
        self.rows
            .iter()
            .filter(|r| r.condition == INDIVIDUAL && r.split == split)
            .map(|r| r.accuracy)
            .fold(None, |best, a| Some(best.map_or(a, |b: f64| b.max(a))))
    }

    /// Accuracy minus the best individual accuracy on the same split.
    pub fn delta(&self, row: &ReportRow) -> Option<f64> {
        if row.condition == INDIVIDUAL {
            return None;
        }
        self.best_individual(&row.split).map(|b| row.accuracy - b)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for row in &self.rows {
            let opt = |v: Option<String>| v.unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{},{},{},{},{}",
                row.condition,
                row.split,
                row.model,
                row.accuracy,
                opt(self.delta(row).map(|d| format!("{d:.6}"))),
                opt(row.eta.map(|e| format!("{e:.2}"))),
                opt(row.steps.map(|s| s.to_string())),
                opt(row.anchors.clone()),
                row.seed
            );
        }
        out
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::TableModel;
    use crate::relspace::relative_matrix_from_ids;

    fn vocab() -> Arc<Vocabulary> {
        Arc::new(Vocabulary::from_surfaces(["a", "b", "c", " ", "."].map(|s| s.as_bytes().to_vec())).unwrap())
    }

    fn identity(n: usize) -> Arc<RelativeMatrix> {
        let rows: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| (i == j) as u8 as f64).collect()).collect();
        let e = EmbeddingTable::from_rows(&rows).unwrap();
        let ids: Vec<u32> = (0..n as u32).collect();
        Arc::new(normalize_rows(&relative_matrix_from_ids(&e, &ids).unwrap()).unwrap())
    }

    fn scripted(name: &str, answers: &[(&str, &str)]) -> EnsembleMember {
        let v = vocab();
        let mut t = TableModel::uniform(name, v.clone());
        for (prompt, answer) in answers {
            let p = v.tokenize(prompt.as_bytes()).unwrap();
            let mut a = v.tokenize(answer.as_bytes()).unwrap();
            a.push(v.id_of(b".").unwrap());
            t.script(&p, &a).unwrap();
        }
        EnsembleMember::new(Arc::new(t), identity(v.len()))
    }

    fn em(prompt: &str, answer: &str) -> EvalItem {
        EvalItem::Em {
            prompt: prompt.into(),
            answer: answer.into(),
        }
    }

    fn stop() -> StopConditions {
        StopConditions::new(6, &["."])
    }

    #[test]
    fn item_json_shapes() {
        let line = serde_json::to_string(&em("p", "a")).unwrap();
        assert_eq!(line, r#"{"kind":"em","prompt":"p","answer":"a"}"#);
        let mc: EvalItem = serde_json::from_str(r#"{"kind":"mc","prompt":"q","options":["x","y"],"gold":1}"#).unwrap();
        assert!(mc.validate().is_ok());
        let bad = EvalItem::Mc {
            prompt: "q".into(),
            options: vec!["x".into()],
            gold: 0,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn perfect_scripted_model_scores_one() {
        let items = vec![em("a", "b"), em("b", "cc"), em("c", "a b")];
        let m = scripted("m", &[("a", " b"), ("b", "cc"), ("c", "a b ")]);
        let e = evaluate(&[m], 0, &EnsembleConfig::default(), &stop(), &items).unwrap();
        assert_eq!(e.accuracy, 1.0);
        assert!(evaluate(&[scripted("m", &[])], 0, &EnsembleConfig::default(), &stop(), &[]).is_err());
    }

    #[test]
    fn main_selection_prefers_better_model_then_lowest_index() {
        let items = vec![em("a", "b"), em("b", "c")];
        let good = scripted("good", &[("a", "b"), ("b", "c")]);
        let bad = scripted("bad", &[("a", "c"), ("b", "a")]);
        let cfg = EnsembleConfig::default();
        let (i, scores) = select_main_model(&[bad.clone(), good.clone()], &cfg, &stop(), &items).unwrap();
        assert_eq!(i, 1);
        assert_eq!(scores, vec![0.0, 1.0]);
        let (i, _) = select_main_model(&[good.clone(), good], &cfg, &stop(), &items).unwrap();
        assert_eq!(i, 0);
        let (i, _) = select_main_model(&[bad], &cfg, &stop(), &items).unwrap();
        assert_eq!(i, 0);
    }

    #[test]
    fn evaluation_is_permutation_invariant() {
        let items = vec![em("a", "b"), em("b", "c"), em("c", "c")];
        let m = scripted("m", &[("a", "b"), ("b", "a"), ("c", "c")]);
        let cfg = EnsembleConfig::default();
        let fwd = evaluate(std::slice::from_ref(&m), 0, &cfg, &stop(), &items).unwrap();
        let rev: Vec<EvalItem> = items.iter().rev().cloned().collect();
        let back = evaluate(&[m], 0, &cfg, &stop(), &rev).unwrap();
        assert_eq!(fwd.accuracy, back.accuracy);
        let mut flipped = back.correct.clone();
        flipped.reverse();
        assert_eq!(fwd.correct, flipped);
    }

    #[test]
    fn failing_items_count_as_wrong() {
        // `x` is not in the vocabulary.
        let items = vec![em("a", "b"), em("x", "b")];
        let m = scripted("m", &[("a", "b")]);
        let e = evaluate(&[m], 0, &EnsembleConfig::default(), &stop(), &items).unwrap();
        assert_eq!(e.correct, vec![true, false]);
    }

    #[test]
    fn eta_grid_and_single_point_sweep() {
        let labels: Vec<String> = default_eta_grid().iter().map(|e| format!("{e:.2}")).collect();
        assert_eq!(labels, ["0.00", "0.05", "0.10", "0.15", "0.20", "0.25", "0.30"]);
        let items = vec![em("a", "b"), em("b", "c")];
        let good = scripted("good", &[("a", "b"), ("b", "c")]);
        let bad = scripted("bad", &[("a", "c"), ("b", "c")]);
        let members = [bad, good];
        let cfg = EnsembleConfig::default();
        let sweep = sweep_eta(&members, 0, &cfg, &stop(), &items, &[0.0]).unwrap();
        let solo = evaluate_individual(&members, 0, &cfg, &stop(), &items).unwrap();
        assert_eq!(sweep.points[0].accuracy, solo.accuracy);
        assert_eq!(sweep.best, 0.0);
        assert!(sweep_eta(&members, 0, &cfg, &stop(), &items, &[]).is_err());
        assert!(sweep_eta(&members, 0, &cfg, &stop(), &items, &[-0.1]).is_err());
    }

    #[test]
    fn report_deltas_are_derived() {
        let mut r = RunReport::default();
        r.individual("dev", "a", 0.5, 7);
        r.individual("dev", "b", 0.625, 7);
        r.push(ReportRow {
            condition: "ensemble".into(),
            split: "dev".into(),
            model: "b".into(),
            accuracy: 0.75,
            eta: Some(0.1),
            steps: Some(5),
            anchors: Some("full".into()),
            seed: 7,
        });
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], REPORT_HEADER);
        assert_eq!(lines[1], "individual,dev,a,0.500000,,,,,7");
        assert_eq!(lines[3], "ensemble,dev,b,0.750000,0.125000,0.10,5,full,7");
    }
}
