//! Desk-scale token embeddings: PPMI co-occurrence matrix factorized by a
//! truncated SVD.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::relspace::EmbeddingTable;

/// Positive PMI of symmetric window co-occurrence counts (`vocab_size` square).
pub fn ppmi_matrix(corpus: &[Vec<u32>], vocab_size: usize, window: usize) -> Result<DMatrix<f64>> {
    if window == 0 {
        return Err(Error::argument("co-occurrence window must be at least 1"));
    }
    let mut counts = DMatrix::<f64>::zeros(vocab_size, vocab_size);
    for seq in corpus {
        for (i, &w) in seq.iter().enumerate() {
            if w as usize >= vocab_size {
                return Err(Error::argument(format!("token id {w} outside vocabulary of {vocab_size}")));
            }
            for &c in &seq[i + 1..(i + 1 + window).min(seq.len())] {
                counts[(w as usize, c as usize)] += 1.0;
                counts[(c as usize, w as usize)] += 1.0;
            }
        }
    }
    let total: f64 = counts.iter().sum();
    if total == 0.0 {
        return Ok(counts);
    }
    let row_sums: Vec<f64> = counts.row_iter().map(|r| r.sum()).collect();
    let col_sums: Vec<f64> = counts.column_iter().map(|c| c.sum()).collect();
    Ok(DMatrix::from_fn(vocab_size, vocab_size, |i, j| {
        let c = counts[(i, j)];
        if c == 0.0 {
            0.0
        } else {
            (c * total / (row_sums[i] * col_sums[j])).ln().max(0.0)
        }
    }))
}

/// Leading singular triplets of a matrix, largest first.
#[derive(Debug, Clone)]
pub struct TruncatedSvd {
    /// Columns are left singular vectors.
    pub u: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    /// Columns are right singular vectors.
    pub v: DMatrix<f64>,
    /// Numerical rank of the full matrix.
    pub rank: usize,
}

impl TruncatedSvd {
    /// Frobenius norm of `matrix - U S Vᵀ`.
    pub fn residual(&self, matrix: &DMatrix<f64>) -> f64 {
        let s = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&self.singular_values));
        (matrix - &self.u * s * self.v.transpose()).norm()
    }
}

/// Rank-`k` SVD with a fixed sign convention: the largest-magnitude entry of
/// each left singular vector is positive (first such entry on ties).
pub fn truncated_svd(matrix: &DMatrix<f64>, k: usize) -> TruncatedSvd {
    let (rows, cols) = matrix.shape();
    let svd = matrix.clone().svd(true, true);
    let u_full = svd.u.expect("requested U");
    let vt_full = svd.v_t.expect("requested Vt");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
    let s_max = order.first().map_or(0.0, |&j| svd.singular_values[j]);
    let tol = s_max * rows.max(cols) as f64 * f64::EPSILON;
    let rank = order.iter().filter(|&&j| svd.singular_values[j] > tol).count();

    let k = k.min(order.len());
    let mut u = DMatrix::zeros(rows, k);
    let mut v = DMatrix::zeros(cols, k);
    let mut singular_values = Vec::with_capacity(k);
    for (slot, &j) in order.iter().take(k).enumerate() {
        let mut uj = u_full.column(j).into_owned();
        let mut vj = vt_full.row(j).transpose();
        let lead = uj.iter().enumerate().fold(0, |best, (i, x)| if x.abs() > uj[best].abs() { i } else { best });
        if uj[lead] < 0.0 {
            uj.neg_mut();
            vj.neg_mut();
        }
        u.set_column(slot, &uj);
        v.set_column(slot, &vj);
        singular_values.push(svd.singular_values[j]);
    }
    TruncatedSvd {
        u,
        singular_values,
        v,
        rank,
    }
}

#[derive(Debug, Clone)]
pub struct EmbeddingBuild {
    pub table: EmbeddingTable,
    /// Numerical rank of the PPMI matrix.
    pub rank: usize,
    pub warnings: Vec<String>,
}

/// Rows are `U_d · S_d` of the PPMI matrix; components past its rank are zero.
pub fn build_embeddings(corpus: &[Vec<u32>], vocab_size: usize, window: usize, dim: usize) -> Result<EmbeddingBuild> {
    if dim == 0 || dim > vocab_size {
        return Err(Error::argument(format!(
            "embedding dimension {dim} must lie in 1..={vocab_size}"
        )));
    }
    let ppmi = ppmi_matrix(corpus, vocab_size, window)?;
    let svd = truncated_svd(&ppmi, dim);
    let mut warnings = Vec::new();
    if svd.rank < dim {
        let msg = format!(
            "PPMI matrix has rank {} < requested dimension {dim}; trailing components are zero",
            svd.rank
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }
    // A·v equals u·s, and keeps rows of never-co-occurring tokens exactly zero.
    let projected = &ppmi * &svd.v;
    let mut values = Vec::with_capacity(vocab_size * dim);
    for i in 0..vocab_size {
        for j in 0..dim {
            let x = if j < svd.rank { projected[(i, j)] } else { 0.0 };
            values.push(x as f32);
        }
    }
    Ok(EmbeddingBuild {
        table: EmbeddingTable::new(vocab_size, dim, values)?,
        rank: svd.rank,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_contexts_give_identical_rows() {
        // Tokens 1 and 2 appear in exactly the same surroundings.
        let corpus = vec![vec![0, 1, 3], vec![0, 2, 3], vec![3, 1, 0], vec![3, 2, 0]];
        let b = build_embeddings(&corpus, 5, 1, 3).unwrap();
        let t = &b.table;
        for k in 0..3 {
            assert!((t.row(1)[k] - t.row(2)[k]).abs() < 1e-5);
        }
        assert!((t.cosine(1, 2) - 1.0).abs() < 1e-6);
        // Token 4 never occurs.
        assert!(t.is_flagged(4));
        assert_eq!(t.row(4), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn rank_deficiency_pads_with_zeros() {
        let corpus = vec![vec![0, 1]];
        let b = build_embeddings(&corpus, 3, 1, 3).unwrap();
        assert!(b.rank < 3);
        assert_eq!(b.warnings.len(), 1);
        for i in 0..3 {
            assert_eq!(b.table.row(i)[2], 0.0);
        }
    }

    #[test]
    fn sign_convention_is_fixed() {
        let m = DMatrix::from_row_slice(3, 3, &[2.0, 0.0, 1.0, 0.0, 3.0, 0.0, 1.0, 0.0, 2.0]);
        let svd = truncated_svd(&m, 3);
        for j in 0..3 {
            let col = svd.u.column(j);
            let lead = col.iter().cloned().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
            assert!(lead > 0.0);
        }
        assert!(svd.singular_values.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn dimension_bounds() {
        assert!(build_embeddings(&[vec![0, 1]], 2, 1, 0).is_err());
        assert!(build_embeddings(&[vec![0, 1]], 2, 1, 3).is_err());
        assert!(build_embeddings(&[vec![0, 1]], 2, 0, 1).is_err());
    }

    #[test]
    fn higher_rank_fits_no_worse() {
        let text = "the cat sat on the mat and the dog lay on the rug by the cat while a bird sang in the tree near the old red barn at dawn";
        assert_eq!(text.split(' ').count(), 30);
        let words: Vec<&str> = text.split(' ').collect();
        let mut uniq: Vec<&str> = words.clone();
        uniq.sort();
        uniq.dedup();
        let ids: Vec<u32> = words.iter().map(|w| uniq.iter().position(|u| u == w).unwrap() as u32).collect();
        let corpus = vec![ids];
        let ppmi = ppmi_matrix(&corpus, uniq.len(), 2).unwrap();
        assert!(uniq.len() >= 8);
        let r8 = truncated_svd(&ppmi, 8).residual(&ppmi);
        let r7 = truncated_svd(&ppmi, 7).residual(&ppmi);
        assert!(r8 <= r7 + 1e-12, "{r8} > {r7}");
    }
}
