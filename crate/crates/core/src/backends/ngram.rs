use std::collections::HashMap;
use std::sync::Arc;

use super::ModelBackend;
use crate::error::{Error, Result};
use crate::fusion::AbsoluteDistribution;
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, Default)]
struct ContextCounts {
    total: u64,
    next: HashMap<u32, u64>,
}

/// Additively smoothed n-gram model with backoff to the longest seen context.
///
/// `P(w | ctx) = (c(ctx, w) + δ) / (c(ctx) + δ·|V|)` where `ctx` is the
/// longest suffix of the query (at most `order - 1` tokens) that occurred in
/// training. The empty context always occurs, so unseen contexts fall back to
/// the smoothed unigram distribution.
#[derive(Debug, Clone)]
pub struct NGramModel {
    name: String,
    vocab: Arc<Vocabulary>,
    order: usize,
    delta: f64,
    counts: HashMap<Vec<u32>, ContextCounts>,
}

pub fn train_ngram(
    name: impl Into<String>,
    vocab: Arc<Vocabulary>,
    corpus: &[Vec<u32>],
    order: usize,
    delta: f64,
) -> Result<NGramModel> {
    if order == 0 {
        return Err(Error::argument("n-gram order must be at least 1"));
    }
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::argument(format!("smoothing delta must be > 0 (got {delta})")));
    }
    if corpus.iter().all(|s| s.is_empty()) {
        return Err(Error::argument("n-gram corpus is empty"));
    }
    let size = vocab.len() as u32;
    let mut counts: HashMap<Vec<u32>, ContextCounts> = HashMap::new();
    for seq in corpus {
        if let Some(&bad) = seq.iter().find(|&&t| t >= size) {
            return Err(Error::argument(format!("corpus token id {bad} outside vocabulary of {size}")));
        }
        for j in 0..seq.len() {
            for k in 0..order.min(j + 1) {
                let entry = counts.entry(seq[j - k..j].to_vec()).or_default();
                entry.total += 1;
                *entry.next.entry(seq[j]).or_default() += 1;
            }
        }
    }
    Ok(NGramModel {
        name: name.into(),
        vocab,
        order,
        delta,
        counts,
    })
}

impl NGramModel {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Contexts with at least one observation.
    pub fn contexts(&self) -> impl Iterator<Item = &[u32]> {
        self.counts.keys().map(|k| k.as_slice())
    }

    fn distribution(&self, context: &[u32]) -> Vec<f64> {
        let keep = context.len().min(self.order - 1);
        let tail = &context[context.len() - keep..];
        let counts = (0..=keep)
            .find_map(|skip| self.counts.get(&tail[skip..]).filter(|c| c.total > 0))
            .expect("the empty context is always counted");
        let size = self.vocab.len();
        let denom = counts.total as f64 + self.delta * size as f64;
        let mut probs = vec![self.delta / denom; size];
        for (&w, &c) in &counts.next {
            probs[w as usize] = (c as f64 + self.delta) / denom;
        }
        probs
    }
}

impl ModelBackend for NGramModel {
    fn name(&self) -> &str {
        &self.name
    }

    fn vocabulary(&self) -> &Arc<Vocabulary> {
        &self.vocab
    }

    fn next_distribution(&self, context: &[u32]) -> Result<AbsoluteDistribution> {
        Ok(AbsoluteDistribution::new_unchecked(self.distribution(context), 0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vocab(n: usize) -> Arc<Vocabulary> {
        Arc::new(Vocabulary::from_surfaces((0..n).map(|i| format!("t{i}").into_bytes())).unwrap())
    }

    #[test]
    fn deterministic_bigram_in_small_delta_limit() {
        // "a b a b"
        let m = train_ngram("m", vocab(2), &[vec![0, 1, 0, 1]], 2, 1e-9).unwrap();
        let p = m.next_distribution(&[0]).unwrap();
        assert!((p.values()[1] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn unseen_context_backs_off_to_unigram() {
        let m = train_ngram("m", vocab(4), &[vec![0, 1, 0, 1, 2]], 3, 0.5).unwrap();
        let unigram = m.next_distribution(&[]).unwrap();
        let unseen = m.next_distribution(&[3]).unwrap();
        assert_eq!(unigram, unseen);
        // c(w) + δ over N + δ|V|
        assert!((unigram.values()[0] - 2.5 / 7.0).abs() < 1e-12);
        assert!((unigram.values()[3] - 0.5 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn backoff_uses_longest_seen_suffix() {
        let m = train_ngram("m", vocab(4), &[vec![0, 1, 2], vec![3, 1, 3]], 3, 0.01).unwrap();
        assert_eq!(m.next_distribution(&[0, 1]).unwrap().argmax(), 2);
        assert_eq!(m.next_distribution(&[3, 1]).unwrap().argmax(), 3);
        // [2, 1] never seen: back off to [1], whose two continuations tie.
        let p = m.next_distribution(&[2, 1]).unwrap();
        assert_eq!(p.values()[2], p.values()[3]);
    }

    #[test]
    fn errors() {
        assert!(train_ngram("m", vocab(2), &[], 2, 0.1).is_err());
        assert!(train_ngram("m", vocab(2), &[vec![0]], 0, 0.1).is_err());
        assert!(train_ngram("m", vocab(2), &[vec![0]], 2, 0.0).is_err());
        assert!(train_ngram("m", vocab(2), &[vec![5]], 2, 0.1).is_err());
    }

    #[test]
    fn all_rows_sum_to_one_exhaustively() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = 40;
        let corpus: Vec<Vec<u32>> = (0..100)
            .map(|_| (0..100).map(|_| rng.gen_range(0..v as u32)).collect())
            .collect();
        let m = train_ngram("m", vocab(v), &corpus, 3, 0.1).unwrap();
        let contexts: Vec<Vec<u32>> = m.contexts().map(|c| c.to_vec()).collect();
        assert!(contexts.len() > 1000);
        for ctx in contexts {
            let p = m.next_distribution(&ctx).unwrap();
            let total: f64 = p.values().iter().sum();
            assert!((total - 1.0).abs() < 1e-9);
            assert!(p.values().iter().all(|&x| x > 0.0));
        }
    }
}
