//! Pairwise Pearson similarity between embedding rows.
//!
//! Correlations live in `[-1, 1]` but the replicator update needs a
//! non-negative matrix, so negatives are either clamped to zero or the whole
//! off-diagonal block is shifted up by its most negative entry.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Rows whose population variance is below this have no defined correlation.
pub const DEGENERATE_VARIANCE: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativeMode {
    /// `max(ω, 0)` entrywise.
    #[default]
    Clamp,
    /// Subtract the most negative off-diagonal entry from every off-diagonal entry.
    Shift,
}

impl fmt::Display for NegativeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NegativeMode::Clamp => f.write_str("clamp"),
            NegativeMode::Shift => f.write_str("shift"),
        }
    }
}

impl FromStr for NegativeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "clamp" => Ok(NegativeMode::Clamp),
            "shift" => Ok(NegativeMode::Shift),
            other => Err(Error::param(
                "negative_mode",
                format!("expected clamp or shift, got {other:?}"),
            )),
        }
    }
}

/// Symmetric, zero-diagonal, non-negative `n × n` similarity matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    inner: Matrix,
    degenerate_rows: Vec<usize>,
}

impl SimilarityMatrix {
    pub const SYMMETRY_TOL: f64 = 1e-12;

    /// Wraps a hand-built matrix after checking the similarity invariants.
    pub fn new(inner: Matrix) -> Result<Self> {
        let (n, c) = inner.shape();
        if n != c {
            return Err(Error::shape(
                "SimilarityMatrix::new",
                "square matrix",
                format!("{n}x{c}"),
            ));
        }
        for i in 0..n {
            if inner[(i, i)] != 0.0 {
                return Err(Error::Contract(format!(
                    "similarity diagonal ({i}, {i}) is {}",
                    inner[(i, i)]
                )));
            }
            for j in 0..n {
                let w = inner[(i, j)];
                if w < 0.0 {
                    return Err(Error::Contract(format!(
                        "similarity ({i}, {j}) = {w} is negative"
                    )));
                }
                if (w - inner[(j, i)]).abs() > Self::SYMMETRY_TOL {
                    return Err(Error::Contract(format!(
                        "similarity is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self {
            inner,
            degenerate_rows: Vec::new(),
        })
    }

    pub(crate) fn from_parts(inner: Matrix, degenerate_rows: Vec<usize>) -> Self {
        Self {
            inner,
            degenerate_rows,
        }
    }

    pub fn matrix(&self) -> &Matrix {
        &self.inner
    }

    pub fn n(&self) -> usize {
        self.inner.rows()
    }

    /// Embedding rows that had (near-)zero variance; their similarities are 0.
    pub fn degenerate_rows(&self) -> &[usize] {
        &self.degenerate_rows
    }
}

impl std::ops::Deref for SimilarityMatrix {
    type Target = Matrix;

    fn deref(&self) -> &Matrix {
        &self.inner
    }
}

/// Per-row centred and unit-normalised embeddings. Row `i` of `unit` is
/// `(φ_i − mean φ_i) / ‖φ_i − mean φ_i‖`, so correlations are dot products.
pub(crate) struct Standardized {
    pub unit: Matrix,
    /// Norm of each centred row, 0 for degenerate rows.
    pub norms: Vec<f64>,
    pub degenerate: Vec<bool>,
}

pub(crate) fn standardize(embeddings: &Matrix) -> Standardized {
    let (n, d) = embeddings.shape();
    let mut unit = Matrix::zeros(n, d);
    let mut norms = vec![0.0; n];
    let mut degenerate = vec![false; n];
    for i in 0..n {
        let row = embeddings.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let out = unit.row_mut(i);
        for (o, &v) in out.iter_mut().zip(row) {
            *o = v - mean;
        }
        let ss: f64 = out.iter().map(|v| v * v).sum();
        if ss / (d as f64) < DEGENERATE_VARIANCE {
            out.iter_mut().for_each(|v| *v = 0.0);
            degenerate[i] = true;
        } else {
            let norm = ss.sqrt();
            out.iter_mut().for_each(|v| *v /= norm);
            norms[i] = norm;
        }
    }
    Standardized {
        unit,
        norms,
        degenerate,
    }
}

fn check_embeddings(op: &'static str, embeddings: &Matrix) -> Result<()> {
    let (n, d) = embeddings.shape();
    if n < 2 || d < 2 {
        return Err(Error::shape(
            op,
            "at least 2 rows and 2 columns",
            format!("{n}x{d}"),
        ));
    }
    if !embeddings.is_finite() {
        return Err(Error::numeric(op, "non-finite embeddings"));
    }
    Ok(())
}

/// Raw Pearson correlations with a zero diagonal, before negative handling.
pub(crate) fn raw_correlation(std: &Standardized) -> Matrix {
    let n = std.unit.rows();
    let mut r = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v: f64 = std
                .unit
                .row(i)
                .iter()
                .zip(std.unit.row(j))
                .map(|(a, b)| a * b)
                .sum();
            let v = v.clamp(-1.0, 1.0);
            r[(i, j)] = v;
            r[(j, i)] = v;
        }
    }
    r
}

/// Location of the most negative off-diagonal entry (first in row-major order).
pub(crate) fn shift_argmin(raw: &Matrix) -> Option<(usize, usize)> {
    let n = raw.rows();
    let mut best: Option<(usize, usize)> = None;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            if best.is_none_or(|b| raw[(i, j)] < raw[b]) {
                best = Some((i, j));
            }
        }
    }
    best.filter(|&b| raw[b] < 0.0)
}

pub(crate) fn apply_negative_mode(raw: &Matrix, mode: NegativeMode) -> Matrix {
    match mode {
        NegativeMode::Clamp => raw.map(|v| v.max(0.0)),
        NegativeMode::Shift => {
            let mut out = raw.clone();
            if let Some(at) = shift_argmin(raw) {
                let min = raw[at];
                for v in out.as_mut_slice() {
                    *v -= min;
                }
            }
            for i in 0..out.rows() {
                out[(i, i)] = 0.0;
            }
            out
        }
    }
}

/// Adjoint of [`apply_negative_mode`]: maps `∂L/∂W` to `∂L/∂raw`.
pub(crate) fn negative_mode_backward(
    raw: &Matrix,
    upstream: &Matrix,
    mode: NegativeMode,
) -> Matrix {
    let n = raw.rows();
    let mut d_raw = Matrix::zeros(n, n);
    match mode {
        NegativeMode::Clamp => {
            for i in 0..n {
                for j in 0..n {
                    if i != j && raw[(i, j)] > 0.0 {
                        d_raw[(i, j)] = upstream[(i, j)];
                    }
                }
            }
        }
        NegativeMode::Shift => {
            let mut off_diag_total = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        d_raw[(i, j)] = upstream[(i, j)];
                        off_diag_total += upstream[(i, j)];
                    }
                }
            }
            if let Some(at) = shift_argmin(raw) {
                d_raw[at] -= off_diag_total;
            }
        }
    }
    d_raw
}

/// Adjoint of [`raw_correlation`] with respect to the embeddings.
pub(crate) fn correlation_backward(std: &Standardized, d_raw: &Matrix) -> Matrix {
    let (n, d) = std.unit.shape();
    // ∂L/∂u_i = Σ_{j≠i} (G_ij + G_ji) u_j; the diagonal of d_raw is never read.
    let mut sym = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sym[(i, j)] = d_raw[(i, j)] + d_raw[(j, i)];
            }
        }
    }
    let d_unit = sym.matmul(&std.unit).expect("shapes agree");
    let mut grad = Matrix::zeros(n, d);
    for i in 0..n {
        if std.degenerate[i] {
            continue;
        }
        let u = std.unit.row(i);
        let du = d_unit.row(i);
        let proj: f64 = u.iter().zip(du).map(|(a, b)| a * b).sum();
        let out = grad.row_mut(i);
        for k in 0..d {
            out[k] = (du[k] - u[k] * proj) / std.norms[i];
        }
        // centring is a projection onto the zero-mean subspace
        let mean = out.iter().sum::<f64>() / d as f64;
        out.iter_mut().for_each(|v| *v -= mean);
    }
    grad
}

/// Pearson similarity between every pair of rows of `embeddings`, with
/// zero diagonal and negatives handled by `mode`.
pub fn pearson_similarity(embeddings: &Matrix, mode: NegativeMode) -> Result<SimilarityMatrix> {
    check_embeddings("pearson_similarity", embeddings)?;
    let std = standardize(embeddings);
    let raw = raw_correlation(&std);
    let degenerate: Vec<usize> = (0..embeddings.rows())
        .filter(|&i| std.degenerate[i])
        .collect();
    if !degenerate.is_empty() {
        log::warn!("constant embedding rows {degenerate:?}: similarities set to 0");
    }
    Ok(SimilarityMatrix::from_parts(
        apply_negative_mode(&raw, mode),
        degenerate,
    ))
}

/// Vector-Jacobian product of [`pearson_similarity`]: given `∂L/∂W`,
/// returns `∂L/∂embeddings`. Clamped entries contribute nothing.
pub fn similarity_jacobian_apply(
    embeddings: &Matrix,
    upstream: &Matrix,
    mode: NegativeMode,
) -> Result<Matrix> {
    check_embeddings("similarity_jacobian_apply", embeddings)?;
    let n = embeddings.rows();
    if upstream.shape() != (n, n) {
        return Err(Error::Contract(format!(
            "upstream adjoint must be {n}x{n}, got {:?}",
            upstream.shape()
        )));
    }
    let std = standardize(embeddings);
    let raw = raw_correlation(&std);
    let d_raw = negative_mode_backward(&raw, upstream, mode);
    Ok(correlation_backward(&std, &d_raw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Textbook Pearson: population covariance over population standard deviations.
    fn oracle_pearson(e: &Matrix) -> Matrix {
        let (n, d) = e.shape();
        let mean = |i: usize| e.row(i).iter().sum::<f64>() / d as f64;
        let cov = |i: usize, j: usize| {
            let (mi, mj) = (mean(i), mean(j));
            (0..d)
                .map(|k| (e[(i, k)] - mi) * (e[(j, k)] - mj))
                .sum::<f64>()
                / d as f64
        };
        let mut w = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    w[(i, j)] = cov(i, j) / (cov(i, i) * cov(j, j)).sqrt();
                }
            }
        }
        w
    }

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(
            r,
            c,
            (0..r * c).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn identical_rows_correlate_perfectly() {
        let e = Matrix::from_rows(&[[1.0, 5.0, 2.0], [1.0, 5.0, 2.0]]).unwrap();
        let w = pearson_similarity(&e, NegativeMode::Clamp).unwrap();
        assert!((w[(0, 1)] - 1.0).abs() < 1e-15);
        assert_eq!(w[(0, 0)], 0.0);
        assert_eq!(w[(1, 1)], 0.0);
    }

    #[test]
    fn anti_correlated_rows_clamp_to_zero() {
        let e = Matrix::from_rows(&[[1.0, 2.0, 3.0], [3.0, 2.0, 1.0]]).unwrap();
        let w = pearson_similarity(&e, NegativeMode::Clamp).unwrap();
        assert_eq!(w[(0, 1)], 0.0);
    }

    #[test]
    fn three_row_example_matches_oracle() {
        let e = Matrix::from_rows(&[
            [1.0, 2.0, 3.0, 4.0],
            [2.0, 2.0, 4.0, 5.0],
            [9.0, 1.0, 1.0, 0.0],
        ])
        .unwrap();
        let oracle = oracle_pearson(&e);
        let w = pearson_similarity(&e, NegativeMode::Clamp).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((w[(i, j)] - oracle[(i, j)].max(0.0)).abs() < 1e-12);
            }
        }
        // rows 0 and 1 are positively correlated; row 2 is anti-correlated with both
        assert!(oracle[(0, 1)] > 0.9);
        assert!(oracle[(0, 2)] < 0.0 && oracle[(1, 2)] < 0.0);
    }

    #[test]
    fn shift_mode_subtracts_min_and_keeps_zero_diagonal() {
        let e = Matrix::from_rows(&[
            [1.0, 2.0, 3.0, 4.0],
            [2.0, 2.0, 4.0, 5.0],
            [9.0, 1.0, 1.0, 0.0],
        ])
        .unwrap();
        let oracle = oracle_pearson(&e);
        let min = (0..3)
            .flat_map(|i| (0..3).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|ij| oracle[ij])
            .fold(f64::INFINITY, f64::min);
        let w = pearson_similarity(&e, NegativeMode::Shift).unwrap();
        for i in 0..3 {
            assert_eq!(w[(i, i)], 0.0);
            for j in 0..3 {
                if i != j {
                    assert!((w[(i, j)] - (oracle[(i, j)] - min)).abs() < 1e-12);
                    assert!(w[(i, j)] >= 0.0);
                }
            }
        }
    }

    #[test]
    fn constant_row_is_degenerate_not_nan() {
        let e = Matrix::from_rows(&[[1.0, 1.0, 1.0], [1.0, 2.0, 3.0], [2.0, 4.0, 7.0]]).unwrap();
        let w = pearson_similarity(&e, NegativeMode::Clamp).unwrap();
        assert_eq!(w.degenerate_rows(), &[0]);
        assert!(w.is_finite());
        assert_eq!(w[(0, 1)], 0.0);
        assert_eq!(w[(2, 0)], 0.0);
        assert!(w[(1, 2)] > 0.9);
    }

    #[test]
    fn rejects_too_small_inputs() {
        assert!(pearson_similarity(&Matrix::zeros(1, 4), NegativeMode::Clamp).is_err());
        assert!(pearson_similarity(&Matrix::zeros(4, 1), NegativeMode::Clamp).is_err());
    }

    #[test]
    fn jacobian_of_zero_upstream_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = random_matrix(&mut rng, 4, 6);
        let g = similarity_jacobian_apply(&e, &Matrix::zeros(4, 4), NegativeMode::Clamp).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn jacobian_vanishes_when_everything_is_clamped() {
        let e = Matrix::from_rows(&[[1.0, 2.0, 3.0], [3.0, 2.0, 1.0]]).unwrap();
        let up = Matrix::filled(2, 2, 1.0);
        let g = similarity_jacobian_apply(&e, &up, NegativeMode::Clamp).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn jacobian_rejects_bad_upstream_shape() {
        let e = Matrix::from_rows(&[[1.0, 2.0, 3.0], [3.0, 2.0, 2.0]]).unwrap();
        assert!(matches!(
            similarity_jacobian_apply(&e, &Matrix::zeros(3, 3), NegativeMode::Clamp),
            Err(Error::Contract(_))
        ));
    }

    fn fd_check(mode: NegativeMode, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = random_matrix(&mut rng, 4, 6);
        let up = random_matrix(&mut rng, 4, 4);
        let objective = |e: &Matrix| -> f64 {
            let w = pearson_similarity(e, mode).unwrap();
            w.as_slice()
                .iter()
                .zip(up.as_slice())
                .map(|(a, b)| a * b)
                .sum()
        };
        let analytic = similarity_jacobian_apply(&e, &up, mode).unwrap();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for k in 0..e.as_slice().len() {
            let mut plus = e.clone();
            plus.as_mut_slice()[k] += h;
            let mut minus = e.clone();
            minus.as_mut_slice()[k] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let a = analytic.as_slice()[k];
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-4));
        }
        worst
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        for seed in 0..10 {
            assert!(
                fd_check(NegativeMode::Clamp, seed) < 1e-6,
                "clamp seed {seed}"
            );
            assert!(
                fd_check(NegativeMode::Shift, seed) < 1e-6,
                "shift seed {seed}"
            );
        }
    }

    #[test]
    fn mode_parses_and_displays() {
        assert_eq!(
            "Clamp".parse::<NegativeMode>().unwrap(),
            NegativeMode::Clamp
        );
        assert_eq!(
            "shift".parse::<NegativeMode>().unwrap(),
            NegativeMode::Shift
        );
        assert!("relu".parse::<NegativeMode>().is_err());
        assert_eq!(NegativeMode::Shift.to_string(), "shift");
    }

    fn embedding_strategy() -> impl Strategy<Value = Matrix> {
        (2usize..12, 2usize..10).prop_flat_map(|(n, d)| {
            proptest::collection::vec(-5.0f64..5.0, n * d)
                .prop_map(move |v| Matrix::from_vec(n, d, v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn affine_invariance(e in embedding_strategy(), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut t = e.clone();
            for i in 0..t.rows() {
                let a = rng.random_range(0.1..10.0);
                let b = rng.random_range(-10.0..10.0);
                t.row_mut(i).iter_mut().for_each(|v| *v = a * *v + b);
            }
            let w0 = pearson_similarity(&e, NegativeMode::Clamp).unwrap();
            let w1 = pearson_similarity(&t, NegativeMode::Clamp).unwrap();
            prop_assume!(w0.degenerate_rows().is_empty());
            for (a, b) in w0.as_slice().iter().zip(w1.as_slice()) {
                prop_assert!((a - b).abs() <= 1e-10);
            }
        }

        #[test]
        fn symmetric_and_bounded(e in embedding_strategy()) {
            let w = pearson_similarity(&e, NegativeMode::Clamp).unwrap();
            let n = w.n();
            for i in 0..n {
                prop_assert_eq!(w[(i, i)], 0.0);
                for j in 0..n {
                    prop_assert!((w[(i, j)] - w[(j, i)]).abs() <= 1e-12);
                    prop_assert!(w[(i, j)] >= 0.0 && w[(i, j)] <= 1.0 + 1e-12);
                }
            }
        }
    }
}
