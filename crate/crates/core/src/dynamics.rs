//! Replicator-dynamics refinement of soft label assignments.
//!
//! Starting from softmax priors (with anchor rows overwritten by their true
//! one-hot labels), each step multiplies every assignment by the support the
//! rest of the batch gives it and renormalises the row:
//!
//! ```text
//! Π(t)   = W X(t)
//! X(t+1) = diag([X(t) ⊙ Π(t)] 1)⁻¹ [X(t) ⊙ Π(t)]
//! ```
//!
//! For a non-negative symmetric `W` this never decreases the consistency
//! `F(X) = Σ_ij Σ_λ w_ij x_iλ x_jλ`.

use std::cell::Cell;
use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::similarity::SimilarityMatrix;
use crate::tensor::{softmax_with_temperature, AssignmentMatrix, Matrix, DEGENERATE_ROW_SUM};

pub const DEFAULT_ITERATION_COUNT: usize = 3;
pub const MAX_ITERATION_COUNT: usize = 50;

thread_local! {
    static STEPS_ON_THREAD: Cell<u64> = const { Cell::new(0) };
}

/// Number of replicator steps executed on the calling thread so far.
///
/// Only used to assert that code paths such as evaluation never run the
/// dynamics.
pub fn steps_on_this_thread() -> u64 {
    STEPS_ON_THREAD.with(Cell::get)
}

pub(crate) fn count_step() {
    STEPS_ON_THREAD.with(|c| c.set(c.get() + 1));
}

/// Which rows of a batch are anchors, plus the label of every row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnchorSpec {
    anchors: BTreeSet<usize>,
    labels: Vec<usize>,
}

impl AnchorSpec {
    pub fn new(
        anchor_indices: impl IntoIterator<Item = usize>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let anchors: BTreeSet<usize> = anchor_indices.into_iter().collect();
        if let Some(&bad) = anchors.iter().find(|&&i| i >= labels.len()) {
            return Err(Error::Contract(format!(
                "anchor index {bad} outside batch of {} rows",
                labels.len()
            )));
        }
        Ok(Self { anchors, labels })
    }

    /// No anchors at all.
    pub fn none(labels: Vec<usize>) -> Self {
        Self {
            anchors: BTreeSet::new(),
            labels,
        }
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn anchor_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.anchors.iter().copied()
    }

    pub fn num_anchors(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_anchor(&self, i: usize) -> bool {
        self.anchors.contains(&i)
    }

    /// `true` for rows that contribute to the loss (the non-anchors).
    pub fn loss_mask(&self) -> Vec<bool> {
        (0..self.labels.len()).map(|i| !self.is_anchor(i)).collect()
    }

    /// Fails if some class has more than `samples_per_class - 1` anchors.
    pub fn check_per_class_limit(&self, samples_per_class: usize) -> Result<()> {
        let mut per_class = std::collections::BTreeMap::<usize, usize>::new();
        for i in self.anchor_indices() {
            *per_class.entry(self.labels[i]).or_default() += 1;
        }
        match per_class
            .into_iter()
            .find(|&(_, c)| c + 1 > samples_per_class)
        {
            Some((class, c)) => Err(Error::Contract(format!(
                "class {class} has {c} anchors, at most {} allowed",
                samples_per_class.saturating_sub(1)
            ))),
            None => Ok(()),
        }
    }

    pub(crate) fn check_against(&self, n: usize, m: usize) -> Result<()> {
        if self.labels.len() != n {
            return Err(Error::shape(
                "AnchorSpec",
                format!("{n} labels"),
                format!("{}", self.labels.len()),
            ));
        }
        for i in self.anchor_indices() {
            if self.labels[i] >= m {
                return Err(Error::Contract(format!(
                    "anchor {i} has label {} outside [0, {m})",
                    self.labels[i]
                )));
            }
        }
        Ok(())
    }
}

/// Everything recorded while refining one batch.
#[derive(Debug, Clone)]
pub struct RefinementTrace {
    /// `X(0) … X(T)`.
    pub x_history: Vec<AssignmentMatrix>,
    /// `Π(0) … Π(T-1)`.
    pub pi_history: Vec<Matrix>,
    pub w: SimilarityMatrix,
}

impl RefinementTrace {
    pub fn last(&self) -> &AssignmentMatrix {
        self.x_history.last().expect("trace always holds X(0)")
    }

    pub fn iterations(&self) -> usize {
        self.x_history.len() - 1
    }
}

/// Temperature softmax of `logits`, with anchor rows replaced by exact one-hot labels.
pub fn init_assignments(
    logits: &Matrix,
    anchors: &AnchorSpec,
    temperature: f64,
) -> Result<AssignmentMatrix> {
    anchors.check_against(logits.rows(), logits.cols())?;
    let mut x = softmax_with_temperature(logits, temperature)?.into_matrix();
    overlay_one_hot(&mut x, anchors);
    Ok(AssignmentMatrix::new_unchecked(x))
}

pub(crate) fn overlay_one_hot(x: &mut Matrix, anchors: &AnchorSpec) {
    for i in anchors.anchor_indices() {
        let row = x.row_mut(i);
        row.iter_mut().for_each(|v| *v = 0.0);
        row[anchors.labels[i]] = 1.0;
    }
}

/// `Π = W X`.
pub fn support(w: &SimilarityMatrix, x: &AssignmentMatrix) -> Result<Matrix> {
    if w.n() != x.rows() {
        return Err(Error::shape(
            "support",
            format!("{}-row assignments", w.n()),
            format!("{}x{}", x.rows(), x.cols()),
        ));
    }
    w.matrix().matmul(x.matrix())
}

/// The pieces of one update: support, unnormalised product, and row sums.
pub(crate) struct StepParts {
    pub pi: Matrix,
    pub product: Matrix,
    pub sums: Vec<f64>,
}

pub(crate) fn step_parts(x: &Matrix, w: &Matrix) -> StepParts {
    let pi = w.matmul(x).expect("checked shapes");
    let product = x.hadamard(&pi).expect("same shape");
    let sums = product.row_sums();
    StepParts { pi, product, sums }
}

/// Normalises `product` row-wise, copying `x` through for degenerate and anchor rows.
pub(crate) fn finish_step(x: &Matrix, parts: &StepParts, anchors: &AnchorSpec) -> Matrix {
    let mut out = parts.product.clone();
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        if anchors.is_anchor(i) || parts.sums[i] < DEGENERATE_ROW_SUM {
            row.copy_from_slice(x.row(i));
        } else {
            let s = parts.sums[i];
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
    count_step();
    out
}

fn check_step_shapes(
    x: &AssignmentMatrix,
    w: &SimilarityMatrix,
    anchors: &AnchorSpec,
) -> Result<()> {
    if w.n() != x.rows() {
        return Err(Error::shape(
            "replicator_step",
            format!("{} rows", w.n()),
            format!("{}", x.rows()),
        ));
    }
    anchors.check_against(x.rows(), x.cols())
}

/// One replicator update.
pub fn replicator_step(
    x: &AssignmentMatrix,
    w: &SimilarityMatrix,
    anchors: &AnchorSpec,
) -> Result<AssignmentMatrix> {
    check_step_shapes(x, w, anchors)?;
    let parts = step_parts(x.matrix(), w.matrix());
    Ok(AssignmentMatrix::new_unchecked(finish_step(
        x.matrix(),
        &parts,
        anchors,
    )))
}

/// Runs `iteration_count` replicator steps from `x0`, keeping every iterate.
pub fn refine(
    x0: &AssignmentMatrix,
    w: &SimilarityMatrix,
    anchors: &AnchorSpec,
    iteration_count: usize,
) -> Result<RefinementTrace> {
    check_step_shapes(x0, w, anchors)?;
    let mut x_history = Vec::with_capacity(iteration_count + 1);
    let mut pi_history = Vec::with_capacity(iteration_count);
    x_history.push(x0.clone());
    for _ in 0..iteration_count {
        let x = x_history.last().expect("non-empty").matrix();
        let parts = step_parts(x, w.matrix());
        let next = finish_step(x, &parts, anchors);
        pi_history.push(parts.pi);
        x_history.push(AssignmentMatrix::new_unchecked(next));
    }
    Ok(RefinementTrace {
        x_history,
        pi_history,
        w: w.clone(),
    })
}

/// `F(X) = Σ_i Σ_j Σ_λ w_ij x_iλ x_jλ`.
pub fn consistency(x: &AssignmentMatrix, w: &SimilarityMatrix) -> Result<f64> {
    let pi = support(w, x)?;
    Ok(x.as_slice()
        .iter()
        .zip(pi.as_slice())
        .map(|(a, b)| a * b)
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::cross_entropy;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sim(rows: &[[f64; 3]]) -> SimilarityMatrix {
        SimilarityMatrix::new(Matrix::from_rows(rows).unwrap()).unwrap()
    }

    fn random_similarity(rng: &mut ChaCha8Rng, n: usize) -> SimilarityMatrix {
        let mut w = Matrix::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                let v = rng.random_range(0.0..1.0);
                w[(i, j)] = v;
                w[(j, i)] = v;
            }
        }
        SimilarityMatrix::new(w).unwrap()
    }

    fn random_assignment(rng: &mut ChaCha8Rng, n: usize, m: usize) -> AssignmentMatrix {
        let z = Matrix::from_vec(
            n,
            m,
            (0..n * m).map(|_| rng.random_range(-3.0..3.0)).collect(),
        )
        .unwrap();
        softmax_with_temperature(&z, 1.0).unwrap()
    }

    #[test]
    fn init_without_anchors_is_plain_softmax() {
        let z = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]).unwrap();
        let x = init_assignments(&z, &AnchorSpec::none(vec![0, 1, 0]), 2.0).unwrap();
        assert_eq!(x, softmax_with_temperature(&z, 2.0).unwrap());
    }

    #[test]
    fn init_all_anchored_is_one_hot() {
        let z = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]).unwrap();
        let anchors = AnchorSpec::new(0..3, vec![1, 0, 1]).unwrap();
        let x = init_assignments(&z, &anchors, 1.0).unwrap();
        assert_eq!(x, AssignmentMatrix::one_hot(&[1, 0, 1], 2).unwrap());
    }

    #[test]
    fn init_mixed_example() {
        let z = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]).unwrap();
        let anchors = AnchorSpec::new([0], vec![1, 1, 0]).unwrap();
        let x = init_assignments(&z, &anchors, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert_eq!(x.row(0), &[0.0, 1.0]);
        assert!((x.row(1)[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((x.row(1)[1] - e / (1.0 + e)).abs() < 1e-15);
        assert_eq!(x.row(2), &[0.5, 0.5]);
    }

    #[test]
    fn anchor_out_of_range_is_rejected() {
        assert!(matches!(
            AnchorSpec::new([3], vec![0, 1, 0]),
            Err(Error::Contract(_))
        ));
        let anchors = AnchorSpec::new([0], vec![5, 0]).unwrap();
        assert!(matches!(
            init_assignments(&Matrix::zeros(2, 2), &anchors, 1.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn per_class_anchor_limit() {
        let anchors = AnchorSpec::new([0, 1], vec![0, 0, 0, 1, 1, 1]).unwrap();
        assert!(anchors.check_per_class_limit(3).is_ok());
        assert!(anchors.check_per_class_limit(2).is_err());
    }

    #[test]
    fn support_examples() {
        let x = AssignmentMatrix::new(
            Matrix::from_rows(&[[0.5, 0.5], [0.2, 0.8], [1.0, 0.0]]).unwrap(),
        )
        .unwrap();
        let zero = SimilarityMatrix::new(Matrix::zeros(3, 3)).unwrap();
        assert_eq!(support(&zero, &x).unwrap().max_abs(), 0.0);

        // a single directed edge is not a valid similarity, so build Π by hand
        let mut w = Matrix::zeros(3, 3);
        w[(0, 1)] = 1.0;
        let pi = w.matmul(x.matrix()).unwrap();
        assert_eq!(pi.row(0), &[0.2, 0.8]);
        assert_eq!(pi.row(1), &[0.0, 0.0]);
        assert_eq!(pi.row(2), &[0.0, 0.0]);
    }

    #[test]
    fn support_matches_naive_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = random_similarity(&mut rng, 4);
        let x = random_assignment(&mut rng, 4, 3);
        let pi = support(&w, &x).unwrap();
        for i in 0..4 {
            for l in 0..3 {
                let mut acc = 0.0;
                for j in 0..4 {
                    acc += w[(i, j)] * x[(j, l)];
                }
                assert!((pi[(i, l)] - acc).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn one_hot_row_with_positive_support_is_fixed() {
        let w = sim(&[[0.0, 0.5, 0.2], [0.5, 0.0, 0.1], [0.2, 0.1, 0.0]]);
        let x = AssignmentMatrix::new(
            Matrix::from_rows(&[[0.0, 1.0], [0.3, 0.7], [0.6, 0.4]]).unwrap(),
        )
        .unwrap();
        let next = replicator_step(&x, &w, &AnchorSpec::none(vec![1, 1, 0])).unwrap();
        assert_eq!(next.row(0), &[0.0, 1.0]);
    }

    #[test]
    fn zero_similarity_leaves_assignments_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_assignment(&mut rng, 5, 3);
        let w = SimilarityMatrix::new(Matrix::zeros(5, 5)).unwrap();
        let next = replicator_step(&x, &w, &AnchorSpec::none(vec![0; 5])).unwrap();
        assert_eq!(next, x);
    }

    fn three_sample_toy() -> (AssignmentMatrix, SimilarityMatrix, AnchorSpec) {
        // A = row 0 (class 0), B = row 1 (class 1), C = row 2 unlabeled
        let w = sim(&[[0.0, 0.0, 0.9], [0.0, 0.0, 0.4], [0.9, 0.4, 0.0]]);
        let anchors = AnchorSpec::new([0, 1], vec![0, 1, 0]).unwrap();
        let x0 = init_assignments(&Matrix::zeros(3, 2), &anchors, 1.0).unwrap();
        (x0, w, anchors)
    }

    #[test]
    fn toy_unlabeled_sample_follows_most_similar_anchor() {
        let (x0, w, anchors) = three_sample_toy();
        assert_eq!(x0.row(2), &[0.5, 0.5]);
        let trace = refine(&x0, &w, &anchors, 50).unwrap();
        let last = trace.last();
        let pattern: Vec<usize> = (0..3).map(|i| last.argmax_row(i)).collect();
        assert_eq!(pattern, vec![0, 1, 0]);
        assert!(last.row(2)[0] > 0.999);
    }

    #[test]
    fn zero_iterations_is_identity() {
        let (x0, w, anchors) = three_sample_toy();
        let trace = refine(&x0, &w, &anchors, 0).unwrap();
        assert_eq!(trace.x_history.len(), 1);
        assert!(trace.pi_history.is_empty());
        assert_eq!(trace.last(), &x0);
    }

    #[test]
    fn refine_converges_on_positive_similarities() {
        let mut worst: f64 = 0.0;
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(3..20);
            let m = rng.random_range(2..6);
            let mut w = random_similarity(&mut rng, n).matrix().clone();
            w.as_mut_slice().iter_mut().for_each(|v| {
                if *v > 0.0 {
                    *v += 0.05
                }
            });
            let w = SimilarityMatrix::new(w).unwrap();
            let x0 = random_assignment(&mut rng, n, m);
            let trace = refine(&x0, &w, &AnchorSpec::none(vec![0; n]), 50).unwrap();
            let a = &trace.x_history[49];
            let b = &trace.x_history[50];
            worst = worst.max(a.sub(b).unwrap().max_abs());
        }
        assert!(worst < 1e-7, "largest final step {worst}");
    }

    #[test]
    fn consistency_closed_forms() {
        let mut ones = Matrix::filled(4, 4, 1.0);
        for i in 0..4 {
            ones[(i, i)] = 0.0;
        }
        let w = SimilarityMatrix::new(ones).unwrap();
        let same = AssignmentMatrix::one_hot(&[2, 2, 2, 2], 3).unwrap();
        assert_eq!(consistency(&same, &w).unwrap(), 12.0);
        let disjoint = AssignmentMatrix::one_hot(&[0, 1, 2, 3], 4).unwrap();
        assert_eq!(consistency(&disjoint, &w).unwrap(), 0.0);
    }

    #[test]
    fn consistency_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let w = random_similarity(&mut rng, 5);
        let x = random_assignment(&mut rng, 5, 3);
        let mut oracle = 0.0;
        for i in 0..5 {
            for j in 0..5 {
                for l in 0..3 {
                    oracle += w[(i, j)] * x[(i, l)] * x[(j, l)];
                }
            }
        }
        assert!((consistency(&x, &w).unwrap() - oracle).abs() < 1e-13);
    }

    #[test]
    fn anchors_are_frozen_and_rows_stay_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 12;
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let anchors = AnchorSpec::new([0, 4, 8], labels).unwrap();
        let z = Matrix::from_vec(
            n,
            3,
            (0..n * 3).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let x0 = init_assignments(&z, &anchors, 1.0).unwrap();
        let trace = refine(&x0, &random_similarity(&mut rng, n), &anchors, 10).unwrap();
        for x in &trace.x_history {
            for i in anchors.anchor_indices() {
                assert_eq!(x.row(i), x0.row(i));
            }
            for s in x.row_sums() {
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
        // anchors do not enter the loss
        let mask = anchors.loss_mask();
        assert_eq!(mask.iter().filter(|m| !**m).count(), 3);
        assert!(cross_entropy(trace.last(), anchors.labels(), &mask).is_ok());
    }

    #[test]
    fn step_counter_tracks_calls() {
        let (x0, w, anchors) = three_sample_toy();
        let before = steps_on_this_thread();
        refine(&x0, &w, &anchors, 4).unwrap();
        replicator_step(&x0, &w, &anchors).unwrap();
        assert_eq!(steps_on_this_thread() - before, 5);
    }
}
