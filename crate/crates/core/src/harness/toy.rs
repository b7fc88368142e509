//! A seeded synthetic world for desk-scale experiments.
//!
//! People have a home city and a favourite colour. Each toy model reads a
//! different random subset of those facts mixed with filler sentences,
//! learns its own byte-pair vocabulary from what it read, and is trained as
//! an n-gram model with PPMI-SVD embeddings. Models therefore disagree both
//! in what they know and in how they segment text.

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EvalItem, ModelEntry};
use crate::backends::{build_embeddings, train_ngram, NGramModel};
use crate::decode::StopConditions;
use crate::error::{Error, Result};
use crate::relspace::EmbeddingTable;
use crate::vocab::Vocabulary;

/// Every byte the toy world ever writes.
pub const TOY_ALPHABET: &[u8] = b" .abcdefghijklmnopqrstuvwxyz";

pub const CITIES: [&str; 8] = ["north", "south", "harbor", "valley", "ridge", "meadow", "forest", "island"];
pub const COLORS: [&str; 8] = ["red", "blue", "green", "gold", "gray", "pink", "teal", "plum"];
const NOUNS: [&str; 8] = ["river", "house", "bridge", "market", "garden", "tower", "road", "field"];
const ADJECTIVES: [&str; 8] = ["quiet", "busy", "old", "new", "small", "large", "bright", "dark"];
const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Person {
    pub name: String,
    pub city: &'static str,
    pub color: &'static str,
}

impl Person {
    pub fn city_prompt(&self) -> String {
        format!("{} lives in", self.name)
    }

    pub fn color_prompt(&self) -> String {
        format!("{} likes", self.name)
    }

    pub fn sentences(&self) -> [String; 2] {
        [
            format!("{} {} .", self.city_prompt(), self.city),
            format!("{} {} .", self.color_prompt(), self.color),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToyFacts {
    pub people: Vec<Person>,
}

/// `count` people with distinct three-syllable names.
pub fn toy_facts(seed: u64, count: usize) -> ToyFacts {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut people = Vec::with_capacity(count);
    while people.len() < count {
        let name: String = (0..3)
            .flat_map(|_| {
                [
                    CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char,
                    VOWELS[rng.gen_range(0..VOWELS.len())] as char,
                ]
            })
            .collect();
        if !seen.insert(name.clone()) {
            continue;
        }
        people.push(Person {
            name,
            city: CITIES[rng.gen_range(0..CITIES.len())],
            color: COLORS[rng.gen_range(0..COLORS.len())],
        });
    }
    ToyFacts { people }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub seed: u64,
    /// Probability that the model reads any given fact.
    pub knowledge: f64,
    /// Copies of each fact read.
    pub repeats: usize,
    pub filler: usize,
}

/// One sentence per line, shuffled.
pub fn toy_corpus(facts: &ToyFacts, spec: &CorpusSpec) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut lines = Vec::new();
    for person in &facts.people {
        for sentence in person.sentences() {
            if rng.gen_bool(spec.knowledge) {
                lines.extend(std::iter::repeat_n(sentence, spec.repeats));
            }
        }
    }
    let pick = |rng: &mut ChaCha8Rng, list: &[&'static str]| list[rng.gen_range(0..list.len())];
    for _ in 0..spec.filler {
        let line = match rng.gen_range(0..4) {
            0 => format!("the {} is {} .", pick(&mut rng, &NOUNS), pick(&mut rng, &ADJECTIVES)),
            1 => format!(
                "a {} {} is in {} .",
                pick(&mut rng, &ADJECTIVES),
                pick(&mut rng, &NOUNS),
                pick(&mut rng, &CITIES)
            ),
            2 => format!("the {} {} is {} .", pick(&mut rng, &COLORS), pick(&mut rng, &NOUNS), pick(&mut rng, &ADJECTIVES)),
            _ => {
                let who = &facts.people[rng.gen_range(0..facts.people.len())].name;
                format!("{who} walks to the {} .", pick(&mut rng, &NOUNS))
            }
        };
        lines.push(line);
    }
    lines.shuffle(&mut rng);
    lines
}

/// Byte-pair vocabulary: every byte of `alphabet` plus up to `merges` merged
/// symbols learned from `lines`. Words carry their leading space.
///
/// Each round merges the most frequent adjacent pair (lexicographically
/// smallest on ties); training stops early once no pair occurs twice.
pub fn train_bpe(lines: &[String], alphabet: &[u8], merges: usize) -> Result<Vocabulary> {
    let mut words: BTreeMap<Vec<u8>, usize> = BTreeMap::new();
    for line in lines {
        for (i, word) in line.split(' ').filter(|w| !w.is_empty()).enumerate() {
            let mut bytes = Vec::with_capacity(word.len() + 1);
            if i > 0 {
                bytes.push(b' ');
            }
            bytes.extend_from_slice(word.as_bytes());
            *words.entry(bytes).or_default() += 1;
        }
    }
    let mut split: Vec<(Vec<Vec<u8>>, usize)> = words
        .into_iter()
        .map(|(w, c)| (w.iter().map(|&b| vec![b]).collect(), c))
        .collect();
    let mut surfaces: Vec<Vec<u8>> = {
        let mut base: Vec<u8> = alphabet.to_vec();
        base.sort_unstable();
        base.dedup();
        base.into_iter().map(|b| vec![b]).collect()
    };
    for (symbols, _) in &split {
        if let Some(s) = symbols.iter().find(|s| !surfaces.contains(s)) {
            return Err(Error::argument(format!("corpus byte {:#04x} outside the alphabet", s[0])));
        }
    }
    let mut known: HashSet<Vec<u8>> = surfaces.iter().cloned().collect();
    for _ in 0..merges {
        let mut pairs: BTreeMap<(&[u8], &[u8]), usize> = BTreeMap::new();
        for (symbols, count) in &split {
            for w in symbols.windows(2) {
                *pairs.entry((&w[0], &w[1])).or_default() += count;
            }
        }
        // First maximum in key order: ties go to the smallest pair.
        let mut best = None;
        for (pair, &n) in &pairs {
            if best.is_none_or(|(_, m)| n > m) {
                best = Some((*pair, n));
            }
        }
        let Some(((a, b), n)) = best else {
            break;
        };
        if n < 2 {
            break;
        }
        let (a, b) = (a.to_vec(), b.to_vec());
        let merged = [a.as_slice(), b.as_slice()].concat();
        for (symbols, _) in split.iter_mut() {
            let mut out = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && symbols[i] == a && symbols[i + 1] == b {
                    out.push(merged.clone());
                    i += 2;
                } else {
                    out.push(std::mem::take(&mut symbols[i]));
                    i += 1;
                }
            }
            *symbols = out;
        }
        if known.insert(merged.clone()) {
            surfaces.push(merged);
        }
    }
    Vocabulary::from_surfaces(surfaces)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModelSpec {
    pub name: String,
    pub corpus: CorpusSpec,
    pub merges: usize,
    pub order: usize,
    pub delta: f64,
    pub window: usize,
    pub dim: usize,
}

impl ToyModelSpec {
    pub fn new(name: &str, seed: u64, merges: usize) -> Self {
        ToyModelSpec {
            name: name.to_string(),
            corpus: CorpusSpec {
                seed,
                knowledge: 0.6,
                repeats: 3,
                filler: 300,
            },
            merges,
            order: 8,
            delta: 0.01,
            window: 2,
            dim: 32,
        }
    }
}

/// A trained toy model and the material it was built from.
#[derive(Clone)]
pub struct ToyModel {
    pub spec: ToyModelSpec,
    pub vocab: Arc<Vocabulary>,
    pub lines: Vec<String>,
    pub corpus: Vec<Vec<u32>>,
    pub ngram: Arc<NGramModel>,
    pub embeddings: Arc<EmbeddingTable>,
}

impl ToyModel {
    pub fn entry(&self) -> ModelEntry {
        ModelEntry::new(self.ngram.clone(), self.embeddings.clone())
    }
}

pub fn build_toy_model(facts: &ToyFacts, spec: &ToyModelSpec) -> Result<ToyModel> {
    let lines = toy_corpus(facts, &spec.corpus);
    let vocab = Arc::new(train_bpe(&lines, TOY_ALPHABET, spec.merges)?);
    let corpus = lines
        .iter()
        .map(|l| {
            vocab
                .tokenize(l.as_bytes())
                .map_err(|(offset, byte)| Error::Untokenizable {
                    model: spec.name.clone(),
                    text: l.clone(),
                    offset,
                    byte,
                })
        })
        .collect::<Result<Vec<_>>>()?;
    let ngram = train_ngram(spec.name.clone(), vocab.clone(), &corpus, spec.order, spec.delta)?;
    let dim = spec.dim.min(vocab.len());
    let embeddings = build_embeddings(&corpus, vocab.len(), spec.window, dim)?.table;
    Ok(ToyModel {
        spec: spec.clone(),
        vocab,
        lines,
        corpus,
        ngram: Arc::new(ngram),
        embeddings: Arc::new(embeddings),
    })
}

/// One exact-match item (home city) and one multiple-choice item (colour,
/// four options) per person, shuffled and split into dev and test.
pub fn toy_items(facts: &ToyFacts, seed: u64, dev: usize, test: usize) -> Result<(Vec<EvalItem>, Vec<EvalItem>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(facts.people.len() * 2);
    for person in &facts.people {
        items.push(EvalItem::Em {
            prompt: person.city_prompt(),
            answer: person.city.to_string(),
        });
        let mut options: Vec<&str> = COLORS.iter().copied().filter(|c| *c != person.color).collect();
        options.shuffle(&mut rng);
        options.truncate(3);
        options.push(person.color);
        options.shuffle(&mut rng);
        let gold = options.iter().position(|c| *c == person.color).expect("gold option present");
        items.push(EvalItem::Mc {
            prompt: person.color_prompt(),
            options: options.iter().map(|c| format!(" {c}")).collect(),
            gold,
        });
    }
    if dev + test > items.len() {
        return Err(Error::argument(format!(
            "{} items requested from {} people",
            dev + test,
            facts.people.len()
        )));
    }
    items.shuffle(&mut rng);
    let test_items = items.split_off(dev);
    Ok((items, test_items.into_iter().take(test).collect()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyWorldConfig {
    pub seed: u64,
    pub people: usize,
    pub models: Vec<ToyModelSpec>,
    pub dev: usize,
    pub test: usize,
    pub max_tokens: usize,
}

impl ToyWorldConfig {
    /// Two models with different knowledge and vocabularies, 100 dev and
    /// 200 test items.
    pub fn standard(seed: u64) -> Self {
        ToyWorldConfig {
            seed,
            people: 150,
            models: vec![
                ToyModelSpec::new("alpha", seed.wrapping_mul(31).wrapping_add(1), 220),
                ToyModelSpec::new("beta", seed.wrapping_mul(31).wrapping_add(2), 320),
            ],
            dev: 100,
            test: 200,
            max_tokens: 12,
        }
    }
}

#[derive(Clone)]
pub struct ToyWorld {
    pub config: ToyWorldConfig,
    pub facts: ToyFacts,
    pub models: Vec<ToyModel>,
    pub dev: Vec<EvalItem>,
    pub test: Vec<EvalItem>,
    pub stop: StopConditions,
}

impl ToyWorld {
    pub fn entries(&self) -> Vec<ModelEntry> {
        self.models.iter().map(ToyModel::entry).collect()
    }

    /// Dev and test items together.
    pub fn all_items(&self) -> Vec<EvalItem> {
        self.dev.iter().chain(&self.test).cloned().collect()
    }
}

pub fn build_toy_world(config: &ToyWorldConfig) -> Result<ToyWorld> {
    let facts = toy_facts(config.seed, config.people);
    let models = config
        .models
        .iter()
        .map(|spec| build_toy_model(&facts, spec))
        .collect::<Result<Vec<_>>>()?;
    let (dev, test) = toy_items(&facts, config.seed ^ 0x5eed, config.dev, config.test)?;
    Ok(ToyWorld {
        config: config.clone(),
        facts,
        models,
        dev,
        test,
        stop: StopConditions::new(config.max_tokens, &["."]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bpe_merges_frequent_pairs_first() {
        let lines = vec!["ab ab ab".to_string(), "abc".to_string()];
        let v = train_bpe(&lines, b" abc", 10).unwrap();
        // Pair counts: (a,b)=4, ( ,a)=2, (b,c)=1 ...
        assert_eq!(v.surface(4), Some(&b"ab"[..]));
        assert_eq!(v.surface(5), Some(&b" ab"[..]));
        assert_eq!(v.len(), 6);
        assert!(train_bpe(&["x".to_string()], b"ab", 1).is_err());
    }

    #[test]
    fn facts_are_deterministic_and_distinct() {
        let a = toy_facts(5, 100);
        assert_eq!(a, toy_facts(5, 100));
        let names: HashSet<&str> = a.people.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names.len(), 100);
        assert_ne!(a, toy_facts(6, 100));
    }

    #[test]
    fn items_split_and_validate() {
        let facts = toy_facts(1, 20);
        let (dev, test) = toy_items(&facts, 2, 10, 30).unwrap();
        assert_eq!((dev.len(), test.len()), (10, 30));
        assert!(dev.iter().chain(&test).all(|i| i.validate().is_ok()));
        assert!(toy_items(&facts, 2, 10, 31).is_err());
    }

    #[test]
    fn models_tokenize_all_world_text() {
        let facts = toy_facts(3, 30);
        let spec = ToyModelSpec {
            corpus: CorpusSpec {
                seed: 4,
                knowledge: 0.5,
                repeats: 2,
                filler: 40,
            },
            ..ToyModelSpec::new("m", 4, 60)
        };
        let m = build_toy_model(&facts, &spec).unwrap();
        assert_eq!(m.embeddings.rows(), m.vocab.len());
        for p in &facts.people {
            for s in p.sentences() {
                assert!(m.vocab.tokenize(s.as_bytes()).is_ok());
            }
        }
    }
}
