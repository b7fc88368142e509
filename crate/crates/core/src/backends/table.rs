use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::ModelBackend;
use crate::error::{Error, Result};
use crate::fusion::{check_simplex, AbsoluteDistribution};
use crate::vocab::Vocabulary;

/// Explicit context → distribution lookup, for exact tests and replay.
///
/// A query is answered by the entry stored under the longest suffix of the
/// context (the full context first, the empty context last), falling back
/// to the default distribution.
#[derive(Debug, Clone)]
pub struct TableModel {
    name: String,
    vocab: Arc<Vocabulary>,
    entries: HashMap<Vec<u32>, Vec<f64>>,
    default: Vec<f64>,
    longest: usize,
}

#[derive(Serialize, Deserialize)]
struct TableFile {
    name: String,
    default: Vec<f64>,
    entries: Vec<TableEntry>,
}

#[derive(Serialize, Deserialize)]
struct TableEntry {
    context: Vec<u32>,
    probs: Vec<f64>,
}

impl TableModel {
    pub fn new(name: impl Into<String>, vocab: Arc<Vocabulary>, default: Vec<f64>) -> Result<Self> {
        let name = name.into();
        Self::check(&name, &vocab, &default)?;
        Ok(TableModel {
            name,
            vocab,
            entries: HashMap::new(),
            default,
            longest: 0,
        })
    }

    /// A table that answers uniformly everywhere.
    pub fn uniform(name: impl Into<String>, vocab: Arc<Vocabulary>) -> Self {
        let n = vocab.len();
        Self::new(name, vocab, vec![1.0 / n as f64; n]).expect("uniform is a distribution")
    }

    fn check(name: &str, vocab: &Vocabulary, probs: &[f64]) -> Result<()> {
        if probs.len() != vocab.len() {
            return Err(Error::argument(format!(
                "table `{name}`: distribution has {} entries for a {}-token vocabulary",
                probs.len(),
                vocab.len()
            )));
        }
        check_simplex(probs).map_err(|e| Error::argument(format!("table `{name}`: {e}")))
    }

    pub fn insert(&mut self, context: Vec<u32>, probs: Vec<f64>) -> Result<()> {
        Self::check(&self.name, &self.vocab, &probs)?;
        self.longest = self.longest.max(context.len());
        self.entries.insert(context, probs);
        Ok(())
    }

    /// Scripts a deterministic continuation: after `prompt`, emit `tokens` in order.
    pub fn script(&mut self, prompt: &[u32], tokens: &[u32]) -> Result<()> {
        let mut ctx = prompt.to_vec();
        for &t in tokens {
            let dist = AbsoluteDistribution::one_hot(self.vocab.len(), t as usize, 0).into_values();
            self.insert(ctx.clone(), dist)?;
            ctx.push(t);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn load(path: impl AsRef<Path>, vocab: Arc<Vocabulary>) -> Result<Self> {
        let file: TableFile = serde_json::from_reader(BufReader::new(File::open(path.as_ref())?))?;
        let mut table = Self::new(file.name, vocab, file.default)?;
        for e in file.entries {
            table.insert(e.context, e.probs)?;
        }
        Ok(table)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut entries: Vec<TableEntry> = self
            .entries
            .iter()
            .map(|(c, p)| TableEntry {
                context: c.clone(),
                probs: p.clone(),
            })
            .collect();
        entries.sort_by(|a, b| a.context.cmp(&b.context));
        let file = TableFile {
            name: self.name.clone(),
            default: self.default.clone(),
            entries,
        };
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, &file)?;
        w.flush()?;
        Ok(())
    }
}

impl ModelBackend for TableModel {
    fn name(&self) -> &str {
        &self.name
    }

    fn vocabulary(&self) -> &Arc<Vocabulary> {
        &self.vocab
    }

    fn next_distribution(&self, context: &[u32]) -> Result<AbsoluteDistribution> {
        let start = context.len().saturating_sub(self.longest);
        let hit = (start..=context.len()).find_map(|s| self.entries.get(&context[s..]));
        let probs = hit.unwrap_or(&self.default).clone();
        Ok(AbsoluteDistribution::new_unchecked(probs, 0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Arc<Vocabulary> {
        Arc::new(Vocabulary::from_surfaces(["a", "b", "c"].map(|s| s.as_bytes().to_vec())).unwrap())
    }

    #[test]
    fn longest_suffix_wins() {
        let mut t = TableModel::uniform("t", vocab());
        t.insert(vec![1], vec![1.0, 0.0, 0.0]).unwrap();
        t.insert(vec![0, 1], vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(t.next_distribution(&[2, 0, 1]).unwrap().argmax(), 1);
        assert_eq!(t.next_distribution(&[2, 1]).unwrap().argmax(), 0);
        assert_eq!(t.next_distribution(&[2]).unwrap().values(), &[1.0 / 3.0; 3]);
    }

    #[test]
    fn rejects_invalid_rows() {
        let mut t = TableModel::uniform("t", vocab());
        assert!(t.insert(vec![], vec![0.5, 0.5]).is_err());
        assert!(t.insert(vec![], vec![0.5, 0.6, 0.0]).is_err());
        assert!(t.insert(vec![], vec![1.5, -0.5, 0.0]).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.json");
        let mut t = TableModel::uniform("t", vocab());
        t.script(&[0], &[1, 2]).unwrap();
        t.save(&path).unwrap();
        let back = TableModel::load(&path, vocab()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.next_distribution(&[0, 1]).unwrap().argmax(), 2);
    }
}
