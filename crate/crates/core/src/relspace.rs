//! Relative-representation matrices built from embedding tables, and the
//! diagnostics computed on them.
//!
//! Row `i` of a raw matrix holds the cosine similarity of token `i` to each
//! anchor. The normalized form replaces every row by its softmax, so an
//! outlier token whose raw row is (nearly) zero still maps to a proper
//! distribution over anchors.
//!
//! Storage is `f32`; every accumulation runs in `f64`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::vocab::AnchorSet;

/// Norms below this are treated as zero; cosines against them are 0.
pub const NORM_EPS: f64 = 1e-12;

const EMBEDDING_MAGIC: &[u8; 4] = b"DPE1";
const RELATIVE_MAGIC: &[u8; 4] = b"DPR1";

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    rows: usize,
    dim: usize,
    values: Vec<f32>,
    norms: Vec<f64>,
}

impl EmbeddingTable {
    pub fn new(rows: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::argument("embedding dimension must be positive"));
        }
        if values.len() != rows * dim {
            return Err(Error::argument(format!(
                "embedding buffer holds {} values, expected {rows}x{dim}",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::argument(format!(
                "non-finite embedding entry at row {}, column {}",
                pos / dim,
                pos % dim
            )));
        }
        let norms = values
            .chunks_exact(dim)
            .map(|row| row.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt())
            .collect();
        Ok(EmbeddingTable {
            rows,
            dim,
            values,
            norms,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::argument("embedding rows have unequal lengths"));
        }
        let values = rows.iter().flatten().map(|&x| x as f32).collect();
        Self::new(rows.len(), dim, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn norm(&self, i: usize) -> f64 {
        self.norms[i]
    }

    /// Zero-norm rows cannot produce cosines.
    pub fn is_flagged(&self, i: usize) -> bool {
        self.norms[i] < NORM_EPS
    }

    pub fn flagged_count(&self) -> usize {
        (0..self.rows).filter(|&i| self.is_flagged(i)).count()
    }

    /// Cosine similarity of rows `i` and `j` (0 when either is flagged).
    pub fn cosine(&self, i: usize, j: usize) -> f64 {
        let (ni, nj) = (self.norms[i], self.norms[j]);
        if ni < NORM_EPS || nj < NORM_EPS {
            return 0.0;
        }
        let dot: f64 = self
            .row(i)
            .iter()
            .zip(self.row(j))
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        (dot / (ni * nj)).clamp(-1.0, 1.0)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let name = path.display().to_string();
        let mut buf = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut buf)?;
        Self::from_bytes(&buf).map_err(|e| match e {
            Error::Format { reason, .. } => Error::format(name, reason),
            other => other,
        })
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(buf);
        if cur.take(4)? != EMBEDDING_MAGIC {
            return Err(Error::format("<embedding>", "missing DPE1 magic"));
        }
        let rows = cur.u32()? as usize;
        let dim = cur.u32()? as usize;
        let values = cur.f32s(rows * dim)?;
        cur.finish()?;
        Self::new(rows, dim, values).map_err(|e| Error::format("<embedding>", e.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.values.len());
        out.extend_from_slice(EMBEDDING_MAGIC);
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.to_bytes())?;
        w.flush()?;
        Ok(())
    }
}

/// `rows x anchors` matrix of relative representations for one model.
#[derive(Debug, Clone, PartialEq)]
pub struct RelativeMatrix {
    rows: usize,
    anchors: usize,
    normalized: bool,
    values: Vec<f32>,
    anchor_ids: Vec<u32>,
    flagged: Vec<bool>,
}

impl RelativeMatrix {
    /// Wraps an explicit matrix; used by fixtures and file loading.
    pub fn from_values(
        rows: usize,
        anchor_ids: Vec<u32>,
        normalized: bool,
        values: Vec<f32>,
    ) -> Result<Self> {
        let anchors = anchor_ids.len();
        if anchors == 0 {
            return Err(Error::argument("relative matrix needs at least one anchor"));
        }
        if values.len() != rows * anchors {
            return Err(Error::argument(format!(
                "matrix buffer holds {} values, expected {rows}x{anchors}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::argument("relative matrix contains non-finite entries"));
        }
        let flagged = if normalized {
            vec![false; rows]
        } else {
            values.chunks_exact(anchors).map(|r| r.iter().all(|&x| x == 0.0)).collect()
        };
        Ok(RelativeMatrix {
            rows,
            anchors,
            normalized,
            values,
            anchor_ids,
            flagged,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn anchors(&self) -> usize {
        self.anchors
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn anchor_ids(&self) -> &[u32] {
        &self.anchor_ids
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.anchors..(i + 1) * self.anchors]
    }

    pub fn get(&self, i: usize, a: usize) -> f32 {
        self.values[i * self.anchors + a]
    }

    /// True for rows built from zero-norm embeddings.
    pub fn is_flagged(&self, i: usize) -> bool {
        self.flagged[i]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(13 + 4 * (self.values.len() + self.anchors));
        out.extend_from_slice(RELATIVE_MAGIC);
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.anchors as u32).to_le_bytes());
        out.push(self.normalized as u8);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for id in &self.anchor_ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(buf);
        if cur.take(4)? != RELATIVE_MAGIC {
            return Err(Error::format("<relative>", "missing DPR1 magic"));
        }
        let rows = cur.u32()? as usize;
        let anchors = cur.u32()? as usize;
        let normalized = match cur.take(1)?[0] {
            0 => false,
            1 => true,
            other => return Err(Error::format("<relative>", format!("bad normalized flag {other}"))),
        };
        let values = cur.f32s(rows * anchors)?;
        let anchor_ids = (0..anchors).map(|_| cur.u32()).collect::<Result<Vec<_>>>()?;
        cur.finish()?;
        Self::from_values(rows, anchor_ids, normalized, values)
            .map_err(|e| Error::format("<relative>", e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.to_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut buf)?;
        Self::from_bytes(&buf).map_err(|e| match e {
            Error::Format { reason, .. } => Error::format(path.display().to_string(), reason),
            other => other,
        })
    }
}

/// Raw cosine matrix of every token against the anchors of `model_index`.
pub fn build_relative_matrix(
    embeddings: &EmbeddingTable,
    anchors: &AnchorSet,
    model_index: usize,
) -> Result<RelativeMatrix> {
    let ids = anchors
        .ids_for(model_index)
        .ok_or_else(|| Error::argument(format!("anchor set has no ids for model {model_index}")))?;
    relative_matrix_from_ids(embeddings, ids)
}

/// Raw cosine matrix against an explicit list of anchor token ids.
pub fn relative_matrix_from_ids(embeddings: &EmbeddingTable, anchor_ids: &[u32]) -> Result<RelativeMatrix> {
    if anchor_ids.is_empty() {
        return Err(Error::argument("anchor list is empty"));
    }
    if let Some(&bad) = anchor_ids.iter().find(|&&id| id as usize >= embeddings.rows()) {
        return Err(Error::argument(format!(
            "anchor id {bad} out of range for {} embedding rows",
            embeddings.rows()
        )));
    }
    if (0..embeddings.rows()).all(|i| embeddings.is_flagged(i)) {
        return Err(Error::argument("every embedding row has zero norm"));
    }
    let width = anchor_ids.len();
    let mut values = vec![0f32; embeddings.rows() * width];
    values.par_chunks_mut(width).enumerate().for_each(|(i, out)| {
        if embeddings.is_flagged(i) {
            return;
        }
        for (slot, &a) in out.iter_mut().zip(anchor_ids) {
            *slot = embeddings.cosine(i, a as usize) as f32;
        }
    });
    let flagged = (0..embeddings.rows()).map(|i| embeddings.is_flagged(i)).collect();
    Ok(RelativeMatrix {
        rows: embeddings.rows(),
        anchors: width,
        normalized: false,
        values,
        anchor_ids: anchor_ids.to_vec(),
        flagged,
    })
}

fn softmax_into(row: &[f32], out: &mut [f32]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
    let exps: Vec<f64> = row.iter().map(|&x| (x as f64 - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    for (o, e) in out.iter_mut().zip(exps) {
        *o = (e / total) as f32;
    }
}

/// Row-wise softmax at temperature 1.
pub fn normalize_rows(raw: &RelativeMatrix) -> Result<RelativeMatrix> {
    if raw.normalized {
        return Err(Error::argument("matrix is already normalized"));
    }
    let mut values = vec![0f32; raw.values.len()];
    values
        .par_chunks_mut(raw.anchors)
        .zip(raw.values.par_chunks(raw.anchors))
        .for_each(|(out, row)| softmax_into(row, out));
    Ok(RelativeMatrix {
        rows: raw.rows,
        anchors: raw.anchors,
        normalized: true,
        values,
        anchor_ids: raw.anchor_ids.clone(),
        flagged: raw.flagged.clone(),
    })
}

pub(crate) fn cosine_f32(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let (na, nb) = (na.sqrt(), nb.sqrt());
    if na < NORM_EPS || nb < NORM_EPS {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Consistency {
    pub cosines: Vec<f64>,
    pub mean: f64,
}

/// Cosine between the rows of the same tokens in two models' matrices.
///
/// Both matrices must have been built over the same anchor list; `shared`
/// pairs a token id in `a` with the id of the same surface in `b`.
pub fn consistency(a: &RelativeMatrix, b: &RelativeMatrix, shared: &[(u32, u32)]) -> Result<Consistency> {
    if a.anchors != b.anchors || a.normalized != b.normalized {
        return Err(Error::AnchorMismatch(format!(
            "matrices have {} and {} anchors (normalized: {} / {})",
            a.anchors, b.anchors, a.normalized, b.normalized
        )));
    }
    if shared.is_empty() {
        return Err(Error::argument("no shared tokens to compare"));
    }
    let cosines = shared
        .iter()
        .map(|&(ia, ib)| {
            if ia as usize >= a.rows || ib as usize >= b.rows {
                return Err(Error::argument(format!("token pair ({ia}, {ib}) out of range")));
            }
            Ok(cosine_f32(a.row(ia as usize), b.row(ib as usize)))
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean = cosines.iter().sum::<f64>() / cosines.len() as f64;
    Ok(Consistency { cosines, mean })
}

#[derive(Debug, Clone, PartialEq)]
pub struct NnHistogram {
    pub edges: Vec<f64>,
    /// `counts[k]` covers `[edges[k], edges[k+1])`; the last bin is closed.
    pub counts: Vec<usize>,
    /// Similarities outside the edge range.
    pub out_of_range: usize,
    /// Zero-norm rows, excluded from the histogram.
    pub flagged: usize,
    /// Nearest-neighbour cosine per token (`None` for flagged rows).
    pub nearest: Vec<Option<f64>>,
}

impl NnHistogram {
    /// Fraction of usable tokens whose nearest-neighbour cosine is below `threshold`.
    pub fn fraction_below(&self, threshold: f64) -> f64 {
        let usable: Vec<f64> = self.nearest.iter().flatten().copied().collect();
        usable.iter().filter(|&&s| s < threshold).count() as f64 / usable.len() as f64
    }
}

/// Histogram of each token's highest cosine to any other token.
pub fn nn_distance_histogram(embeddings: &EmbeddingTable, edges: &[f64]) -> Result<NnHistogram> {
    if edges.len() < 2 || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::argument("histogram edges must be strictly increasing with at least two entries"));
    }
    let usable: Vec<usize> = (0..embeddings.rows()).filter(|&i| !embeddings.is_flagged(i)).collect();
    if usable.len() < 2 {
        return Err(Error::argument("need at least two non-zero embedding rows"));
    }
    let nearest: Vec<Option<f64>> = (0..embeddings.rows())
        .into_par_iter()
        .map(|i| {
            if embeddings.is_flagged(i) {
                return None;
            }
            usable
                .iter()
                .filter(|&&j| j != i)
                .map(|&j| embeddings.cosine(i, j))
                .fold(None, |best: Option<f64>, c| Some(best.map_or(c, |b| b.max(c))))
        })
        .collect();
    let mut counts = vec![0usize; edges.len() - 1];
    let mut out_of_range = 0;
    let last = edges.len() - 2;
    for s in nearest.iter().flatten() {
        match bucket(edges, *s) {
            Some(k) => counts[k.min(last)] += 1,
            None => out_of_range += 1,
        }
    }
    Ok(NnHistogram {
        edges: edges.to_vec(),
        counts,
        out_of_range,
        flagged: embeddings.rows() - usable.len(),
        nearest,
    })
}

fn bucket(edges: &[f64], s: f64) -> Option<usize> {
    let (lo, hi) = (edges[0], edges[edges.len() - 1]);
    if s < lo || s > hi {
        return None;
    }
    // partition_point gives the first edge strictly greater than s.
    Some(edges.partition_point(|&e| e <= s).saturating_sub(1))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Cursor { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::format("<binary>", "truncated file"))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::format("<binary>", "size overflow"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format("<binary>", "trailing bytes after payload"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_table(rows: usize, dim: usize, seed: u64) -> EmbeddingTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..rows)
            .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        EmbeddingTable::from_rows(&rows).unwrap()
    }

    fn naive_cosine(a: &[f32], b: &[f32]) -> f64 {
        let mut dot = 0.0;
        let mut na = 0.0;
        let mut nb = 0.0;
        for k in 0..a.len() {
            dot += a[k] as f64 * b[k] as f64;
            na += a[k] as f64 * a[k] as f64;
            nb += b[k] as f64 * b[k] as f64;
        }
        dot / (na.sqrt() * nb.sqrt())
    }

    #[test]
    fn self_anchor_and_orthogonal_entries() {
        let e = EmbeddingTable::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0], vec![3.0, 3.0]]).unwrap();
        let m = relative_matrix_from_ids(&e, &[0, 1]).unwrap();
        assert_eq!(m.get(0, 0), 1.0);
        assert_eq!(m.get(1, 1), 1.0);
        assert_eq!(m.get(0, 1), 0.0);
        assert_eq!(m.get(1, 0), 0.0);
        assert!((m.get(2, 0) as f64 - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-7);
    }

    #[test]
    fn matches_brute_force_cosines() {
        let e = random_table(8, 4, 11);
        let anchors = [1u32, 4, 6];
        let m = relative_matrix_from_ids(&e, &anchors).unwrap();
        for i in 0..8 {
            for (k, &a) in anchors.iter().enumerate() {
                let want = naive_cosine(e.row(i), e.row(a as usize));
                assert!((m.get(i, k) as f64 - want).abs() < 1e-6, "({i},{k})");
            }
        }
    }

    #[test]
    fn zero_rows_are_flagged_then_uniform() {
        let e = EmbeddingTable::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(e.is_flagged(1));
        let raw = relative_matrix_from_ids(&e, &[0, 2]).unwrap();
        assert!(raw.is_flagged(1));
        assert_eq!(raw.row(1), &[0.0, 0.0]);
        let norm = normalize_rows(&raw).unwrap();
        assert_eq!(norm.row(1), &[0.5, 0.5]);
        assert!(normalize_rows(&norm).is_err());
    }

    #[test]
    fn anchor_out_of_range() {
        let e = random_table(3, 2, 1);
        assert!(matches!(relative_matrix_from_ids(&e, &[3]), Err(Error::Argument(_))));
    }

    #[test]
    fn softmax_examples() {
        let raw = RelativeMatrix::from_values(3, vec![0, 1, 2, 3], false, {
            let mut v = vec![0.0; 4];
            v.extend([0.3; 4]);
            v.extend([-0.7; 4]);
            v
        })
        .unwrap();
        let norm = normalize_rows(&raw).unwrap();
        for i in 0..3 {
            assert_eq!(norm.row(i), &[0.25; 4]);
        }
        let two = RelativeMatrix::from_values(1, vec![0, 1], false, vec![1.0, 0.0]).unwrap();
        let n = normalize_rows(&two).unwrap();
        let e = std::f64::consts::E;
        assert!((n.get(0, 0) as f64 - e / (e + 1.0)).abs() < 1e-7);
        assert!((n.get(0, 1) as f64 - 1.0 / (e + 1.0)).abs() < 1e-7);
    }

    #[test]
    fn self_consistency_is_one() {
        let e = random_table(10, 5, 2);
        let m = normalize_rows(&relative_matrix_from_ids(&e, &[0, 3, 7]).unwrap()).unwrap();
        let pairs: Vec<(u32, u32)> = (0..10).map(|i| (i, i)).collect();
        let c = consistency(&m, &m, &pairs).unwrap();
        assert!(c.cosines.iter().all(|&x| (x - 1.0).abs() < 1e-9));
        assert!((c.mean - 1.0).abs() < 1e-9);

        let other = relative_matrix_from_ids(&e, &[0, 3]).unwrap();
        assert!(matches!(
            consistency(&normalize_rows(&other).unwrap(), &m, &pairs),
            Err(Error::AnchorMismatch(_))
        ));
    }

    #[test]
    fn nn_histogram_small_cases() {
        let dup = EmbeddingTable::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![-2.0, 1.0]]).unwrap();
        let h = nn_distance_histogram(&dup, &[-1.0, 0.0, 0.5, 1.0]).unwrap();
        assert!((h.nearest[0].unwrap() - 1.0).abs() < 1e-12);
        assert!((h.nearest[1].unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(h.counts[2], 2);

        let ortho = EmbeddingTable::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![0.0, 0.0, 0.0],
        ])
        .unwrap();
        let h = nn_distance_histogram(&ortho, &[0.0, 0.3, 1.0]).unwrap();
        assert_eq!(h.nearest[..3], [Some(0.0), Some(0.0), Some(0.0)]);
        assert_eq!(h.counts, vec![3, 0]);
        assert_eq!(h.flagged, 1);
        assert_eq!(h.fraction_below(0.3), 1.0);

        let lonely = EmbeddingTable::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        assert!(nn_distance_histogram(&lonely, &[0.0, 1.0]).is_err());
    }

    #[test]
    fn nn_histogram_matches_quadratic_scan() {
        let e = random_table(50, 8, 5);
        let edges: Vec<f64> = (0..=20).map(|k| -1.0 + 0.1 * k as f64).collect();
        let h = nn_distance_histogram(&e, &edges).unwrap();
        let mut want = vec![0usize; 20];
        for i in 0..50 {
            let mut best = f64::NEG_INFINITY;
            for j in 0..50 {
                if i != j {
                    best = best.max(naive_cosine(e.row(i), e.row(j)));
                }
            }
            let mut k = 0;
            while k + 1 < 20 && best >= edges[k + 1] {
                k += 1;
            }
            want[k] += 1;
        }
        assert_eq!(h.counts, want);
    }

    #[test]
    fn binary_formats_round_trip() {
        let e = random_table(6, 3, 9);
        assert_eq!(EmbeddingTable::from_bytes(&e.to_bytes()).unwrap(), e);
        let bytes = e.to_bytes();
        assert_eq!(&bytes[..4], b"DPE1");
        assert_eq!(&bytes[4..8], &6u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &3u32.to_le_bytes());
        assert!(EmbeddingTable::from_bytes(&bytes[..bytes.len() - 1]).is_err());

        let m = normalize_rows(&relative_matrix_from_ids(&e, &[5, 0]).unwrap()).unwrap();
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..4], b"DPR1");
        assert_eq!(bytes[12], 1);
        assert_eq!(&bytes[bytes.len() - 8..], &[5, 0, 0, 0, 0, 0, 0, 0]);
        let back = RelativeMatrix::from_bytes(&bytes).unwrap();
        assert_eq!(back.values(), m.values());
        assert_eq!(back.anchor_ids(), m.anchor_ids());
        assert!(back.is_normalized());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn raw_entries_in_cosine_range_and_normalized_rows_sum_to_one(seed in any::<u64>(), rows in 2usize..20, dim in 1usize..6) {
                let e = random_table(rows, dim, seed);
                let ids: Vec<u32> = (0..rows as u32).step_by(2).collect();
                let raw = relative_matrix_from_ids(&e, &ids).unwrap();
                prop_assert!(raw.values().iter().all(|&x| (-1.0 - 1e-9..=1.0 + 1e-9).contains(&(x as f64))));
                let n = normalize_rows(&raw).unwrap();
                for i in 0..rows {
                    let s: f64 = n.row(i).iter().map(|&x| x as f64).sum();
                    prop_assert!((s - 1.0).abs() < 1e-6);
                    prop_assert!(n.row(i).iter().all(|&x| x > 0.0));
                }
            }

            #[test]
            fn softmax_shift_invariant(row in proptest::collection::vec(-1.0f32..1.0, 1..10), shift in -0.5f32..0.5) {
                let ids: Vec<u32> = (0..row.len() as u32).collect();
                let a = RelativeMatrix::from_values(1, ids.clone(), false, row.clone()).unwrap();
                let b = RelativeMatrix::from_values(1, ids, false, row.iter().map(|x| x + shift).collect()).unwrap();
                let (na, nb) = (normalize_rows(&a).unwrap(), normalize_rows(&b).unwrap());
                for (x, y) in na.values().iter().zip(nb.values()) {
                    prop_assert!((x - y).abs() < 1e-6);
                }
            }

            #[test]
            fn cosine_scale_invariant(seed in any::<u64>(), row in 0usize..8, scale in 0.01f64..100.0) {
                let e = random_table(8, 4, seed);
                let mut rows: Vec<Vec<f64>> = (0..8).map(|i| e.row(i).iter().map(|&x| x as f64).collect()).collect();
                for x in rows[row].iter_mut() { *x *= scale; }
                let scaled = EmbeddingTable::from_rows(&rows).unwrap();
                let ids = [0u32, 3, 5];
                let a = relative_matrix_from_ids(&e, &ids).unwrap();
                let b = relative_matrix_from_ids(&scaled, &ids).unwrap();
                for (x, y) in a.values().iter().zip(b.values()) {
                    prop_assert!((x - y).abs() <= 1e-6);
                }
            }
        }
    }
}
