//! Token inventories, cross-tokenizer canonicalization, vocabulary
//! intersection and anchor selection.
//!
//! Tokens from different tokenizers are matched by exact byte equality of
//! their canonical surfaces. Canonicalization only undoes the marker
//! conventions tokenizers use for leading spaces and raw bytes; there is no
//! fuzzy matching.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Marker convention a raw token string is written in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Convention {
    /// Surfaces are already canonical bytes.
    Plain,
    /// `▁` marks a space; `<0xNN>` tokens are byte fallbacks.
    SentencePiece,
    /// Byte-level BPE: every byte is printed as a visible code point
    /// (`Ġ` for space, `Ċ` for newline, ...).
    ByteBpe,
}

impl FromStr for Convention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Convention::Plain),
            "sentencepiece" | "spm" => Ok(Convention::SentencePiece),
            "byte-bpe" | "bytelevel" => Ok(Convention::ByteBpe),
            other => Err(Error::config(format!(
                "unknown tokenizer convention `{other}` (expected plain, sentencepiece or byte-bpe)"
            ))),
        }
    }
}

const SPM_SPACE: &[u8] = "\u{2581}".as_bytes();

/// The printable code point byte-level BPE uses for each byte value.
fn byte_bpe_char(byte: u8) -> char {
    let b = byte as u32;
    let printable = (0x21..=0x7e).contains(&b) || (0xa1..=0xac).contains(&b) || (0xae..=0xff).contains(&b);
    if printable {
        return char::from_u32(b).unwrap();
    }
    // Non-printable bytes are numbered in order starting at U+0100.
    let rank = (0..b)
        .filter(|&x| !((0x21..=0x7e).contains(&x) || (0xa1..=0xac).contains(&x) || (0xae..=0xff).contains(&x)))
        .count() as u32;
    char::from_u32(256 + rank).unwrap()
}

fn byte_bpe_decoder() -> &'static HashMap<char, u8> {
    use std::sync::OnceLock;
    static TABLE: OnceLock<HashMap<char, u8>> = OnceLock::new();
    TABLE.get_or_init(|| (0..=255u8).map(|b| (byte_bpe_char(b), b)).collect())
}

/// Parses a whole-token byte escape of the form `<0xNN>`.
fn parse_byte_escape(raw: &[u8]) -> Option<u8> {
    if raw.len() == 6 && raw.starts_with(b"<0x") && raw[5] == b'>' {
        let hex = std::str::from_utf8(&raw[3..5]).ok()?;
        u8::from_str_radix(hex, 16).ok()
    } else {
        None
    }
}

/// Maps a raw token to its canonical byte surface.
pub fn canonicalize(raw: &[u8], convention: Convention) -> Vec<u8> {
    match convention {
        Convention::Plain => raw.to_vec(),
        Convention::SentencePiece => {
            if let Some(b) = parse_byte_escape(raw) {
                return vec![b];
            }
            let mut out = Vec::with_capacity(raw.len());
            let mut i = 0;
            while i < raw.len() {
                if raw[i..].starts_with(SPM_SPACE) {
                    out.push(b' ');
                    i += SPM_SPACE.len();
                } else {
                    out.push(raw[i]);
                    i += 1;
                }
            }
            out
        }
        Convention::ByteBpe => {
            if let Some(b) = parse_byte_escape(raw) {
                return vec![b];
            }
            let text = String::from_utf8_lossy(raw);
            let table = byte_bpe_decoder();
            let mut out = Vec::with_capacity(raw.len());
            for ch in text.chars() {
                match table.get(&ch) {
                    Some(&b) => out.push(b),
                    None => {
                        let mut buf = [0u8; 4];
                        out.extend_from_slice(ch.encode_utf8(&mut buf).as_bytes());
                    }
                }
            }
            out
        }
    }
}

/// Like [`canonicalize`], with the convention given by name.
pub fn canonicalize_named(raw: &[u8], convention: &str) -> Result<Vec<u8>> {
    Ok(canonicalize(raw, convention.parse()?))
}

/// Human-readable rendering of a canonical surface.
pub fn display_surface(surface: &[u8]) -> String {
    match std::str::from_utf8(surface) {
        Ok(s) => s.to_string(),
        Err(_) => surface.iter().map(|b| format!("<0x{b:02X}>")).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub id: u32,
    pub surface: Vec<u8>,
    pub display: String,
}

/// One model's token inventory.
///
/// Ids are contiguous from zero. If two tokens share a canonical surface the
/// lowest id owns it; the others stay addressable by id but never match by
/// surface.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<Token>,
    by_surface: HashMap<Vec<u8>, u32>,
    shadowed: Vec<u32>,
    max_len: usize,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<Token>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::argument("vocabulary must contain at least one token"));
        }
        let mut by_surface = HashMap::with_capacity(tokens.len());
        let mut shadowed = Vec::new();
        let mut max_len = 0;
        for (i, tok) in tokens.iter().enumerate() {
            if tok.id as usize != i {
                return Err(Error::argument(format!(
                    "token ids must be contiguous from 0; position {i} has id {}",
                    tok.id
                )));
            }
            if tok.surface.is_empty() {
                return Err(Error::argument(format!("token {i} has an empty surface")));
            }
            max_len = max_len.max(tok.surface.len());
            if let Some(&owner) = by_surface.get(&tok.surface) {
                log::warn!(
                    "token {} collides with token {owner} on surface {:?}; keeping {owner}",
                    tok.id,
                    tok.display
                );
                shadowed.push(tok.id);
            } else {
                by_surface.insert(tok.surface.clone(), tok.id);
            }
        }
        Ok(Vocabulary {
            tokens,
            by_surface,
            shadowed,
            max_len,
        })
    }

    /// Builds a vocabulary from canonical surfaces, ids assigned in order.
    pub fn from_surfaces<I, S>(surfaces: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<Vec<u8>>,
    {
        let tokens = surfaces
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                let surface = s.into();
                Token {
                    id: i as u32,
                    display: display_surface(&surface),
                    surface,
                }
            })
            .collect();
        Self::from_tokens(tokens)
    }

    /// Builds a vocabulary from raw tokenizer strings written in `convention`.
    pub fn from_raw<S: AsRef<str>>(raw: &[S], convention: Convention) -> Result<Self> {
        let tokens = raw
            .iter()
            .enumerate()
            .map(|(i, r)| Token {
                id: i as u32,
                surface: canonicalize(r.as_ref().as_bytes(), convention),
                display: r.as_ref().to_string(),
            })
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn token(&self, id: u32) -> Option<&Token> {
        self.tokens.get(id as usize)
    }

    pub fn surface(&self, id: u32) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(|t| t.surface.as_slice())
    }

    pub fn id_of(&self, surface: &[u8]) -> Option<u32> {
        self.by_surface.get(surface).copied()
    }

    /// Ids dropped from surface matching because a lower id shares their surface.
    pub fn shadowed(&self) -> &[u32] {
        &self.shadowed
    }

    /// Surfaces that participate in cross-vocabulary matching.
    pub fn matchable_surfaces(&self) -> impl Iterator<Item = &[u8]> {
        self.by_surface.keys().map(|k| k.as_slice())
    }

    /// Greedy longest-match segmentation of `text`.
    pub fn tokenize(&self, text: &[u8]) -> std::result::Result<Vec<u32>, (usize, u8)> {
        let mut ids = Vec::with_capacity(text.len() / 2 + 1);
        let mut pos = 0;
        while pos < text.len() {
            let longest = self.max_len.min(text.len() - pos);
            let found = (1..=longest)
                .rev()
                .find_map(|len| self.by_surface.get(&text[pos..pos + len]).map(|&id| (id, len)));
            match found {
                Some((id, len)) => {
                    ids.push(id);
                    pos += len;
                }
                None => return Err((pos, text[pos])),
            }
        }
        Ok(ids)
    }

    pub fn detokenize(&self, ids: &[u32]) -> Vec<u8> {
        let mut out = Vec::new();
        for &id in ids {
            if let Some(s) = self.surface(id) {
                out.extend_from_slice(s);
            }
        }
        out
    }

    pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let name = path.display().to_string();
        let reader = BufReader::new(File::open(path)?);
        let mut tokens = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: VocabRecord = serde_json::from_str(&line)
                .map_err(|e| Error::format(&name, format!("line {}: {e}", lineno + 1)))?;
            if rec.id as usize != tokens.len() {
                return Err(Error::format(
                    &name,
                    format!("line {}: expected id {}, found {}", lineno + 1, tokens.len(), rec.id),
                ));
            }
            let surface = B64
                .decode(rec.bytes.as_bytes())
                .map_err(|e| Error::format(&name, format!("line {}: bad base64: {e}", lineno + 1)))?;
            tokens.push(Token {
                id: rec.id,
                surface,
                display: rec.display,
            });
        }
        Self::from_tokens(tokens).map_err(|e| Error::format(&name, e.to_string()))
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for tok in &self.tokens {
            let rec = VocabRecord {
                id: tok.id,
                bytes: B64.encode(&tok.surface),
                display: tok.display.clone(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct VocabRecord {
    id: u32,
    bytes: String,
    display: String,
}

/// Canonical surfaces present in every vocabulary.
pub fn common_tokens(vocabularies: &[&Vocabulary]) -> Result<BTreeSet<Vec<u8>>> {
    if vocabularies.len() < 2 {
        return Err(Error::argument("common_tokens needs at least two vocabularies"));
    }
    // Probe from the smallest vocabulary so the result cannot depend on input order.
    let smallest = vocabularies
        .iter()
        .min_by_key(|v| v.by_surface.len())
        .expect("non-empty");
    let common: BTreeSet<Vec<u8>> = smallest
        .matchable_surfaces()
        .filter(|s| vocabularies.iter().all(|v| v.id_of(s).is_some()))
        .map(|s| s.to_vec())
        .collect();
    if common.is_empty() {
        return Err(Error::EmptyIntersection);
    }
    Ok(common)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorStrategy {
    Full,
    /// Uniform sample of `k` common tokens without replacement.
    Sample { k: usize, seed: u64 },
}

impl AnchorStrategy {
    /// Parses `full` or `sample:K`.
    pub fn parse(spec: &str, seed: u64) -> Result<Self> {
        if spec == "full" {
            return Ok(AnchorStrategy::Full);
        }
        if let Some(k) = spec.strip_prefix("sample:") {
            let k = k
                .parse()
                .map_err(|_| Error::config(format!("bad anchor count in `{spec}`")))?;
            return Ok(AnchorStrategy::Sample { k, seed });
        }
        Err(Error::config(format!("anchor strategy must be `full` or `sample:K`, got `{spec}`")))
    }
}

impl fmt::Display for AnchorStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnchorStrategy::Full => write!(f, "full"),
            AnchorStrategy::Sample { k, .. } => write!(f, "sample:{k}"),
        }
    }
}

/// Anchor tokens shared by all models, in canonical byte order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorSet {
    anchors: Vec<Vec<u8>>,
    per_model_ids: Vec<Vec<u32>>,
}

impl AnchorSet {
    /// Resolves sorted `anchors` in every vocabulary.
    pub fn resolve(mut anchors: Vec<Vec<u8>>, vocabularies: &[&Vocabulary]) -> Result<Self> {
        anchors.sort();
        anchors.dedup();
        let per_model_ids = vocabularies
            .iter()
            .enumerate()
            .map(|(m, v)| {
                anchors
                    .iter()
                    .map(|a| {
                        v.id_of(a).ok_or_else(|| {
                            Error::argument(format!(
                                "anchor {:?} missing from vocabulary of model {m}",
                                display_surface(a)
                            ))
                        })
                    })
                    .collect::<Result<Vec<u32>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AnchorSet {
            anchors,
            per_model_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn anchors(&self) -> &[Vec<u8>] {
        &self.anchors
    }

    pub fn model_count(&self) -> usize {
        self.per_model_ids.len()
    }

    pub fn ids_for(&self, model: usize) -> Option<&[u32]> {
        self.per_model_ids.get(model).map(|v| v.as_slice())
    }

    pub fn per_model_ids(&self) -> &[Vec<u32>] {
        &self.per_model_ids
    }
}

pub fn select_anchors(
    common: &BTreeSet<Vec<u8>>,
    strategy: AnchorStrategy,
    vocabularies: &[&Vocabulary],
) -> Result<AnchorSet> {
    let pool: Vec<Vec<u8>> = common.iter().cloned().collect();
    let chosen = match strategy {
        AnchorStrategy::Full => pool,
        AnchorStrategy::Sample { k, seed } => {
            if k == 0 || k > pool.len() {
                return Err(Error::argument(format!(
                    "anchor sample size {k} outside 1..={}",
                    pool.len()
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, pool.len(), k).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| pool[i].clone()).collect()
        }
    };
    AnchorSet::resolve(chosen, vocabularies)
}
