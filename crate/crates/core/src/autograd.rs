//! Reverse-mode differentiation over a closed set of matrix primitives.
//!
//! The [`Tape`] records each primitive together with its forward value.
//! [`Tape::backward`] walks the nodes in reverse order and accumulates
//! vector-Jacobian products into per-node adjoints. The vocabulary is exactly
//! what the group loss and the MLP encoder need, so every backward rule can be
//! checked against finite differences on its own.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dynamics::{self, AnchorSpec, MAX_ITERATION_COUNT};
use crate::error::{Error, Result};
use crate::similarity::{self, NegativeMode, Standardized};
use crate::tensor::{self, Matrix, DEGENERATE_ROW_SUM, LOG_EPS};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Hadamard(Var, Var),
    RowSum(Var),
    /// Row `i` of `num` divided by `den[i]`; rows with a degenerate
    /// denominator are copied from `fallback` instead.
    RowDivide {
        num: Var,
        den: Var,
        fallback: Var,
    },
    AddRowBias(Var, Var),
    Softmax {
        input: Var,
        temperature: f64,
    },
    Pearson {
        input: Var,
        standardized: Standardized,
    },
    ReluClamp(Var),
    ShiftNegatives(Var),
    OneHotOverlay {
        input: Var,
        rows: Vec<(usize, usize)>,
    },
    CrossEntropy {
        input: Var,
        labels: Vec<usize>,
        mask: Vec<bool>,
    },
    PairwiseKl {
        input: Var,
        pairs: Vec<(usize, usize)>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Hadamard(..) => "hadamard",
            Op::RowSum(_) => "row-sum",
            Op::RowDivide { .. } => "row-divide",
            Op::AddRowBias(..) => "add-row-bias",
            Op::Softmax { .. } => "softmax",
            Op::Pearson { .. } => "pearson",
            Op::ReluClamp(_) => "relu-clamp",
            Op::ShiftNegatives(_) => "shift-negatives",
            Op::OneHotOverlay { .. } => "one-hot-overlay",
            Op::CrossEntropy { .. } => "cross-entropy",
            Op::PairwiseKl { .. } => "pairwise-kl",
        }
    }
}

struct Node {
    op: Op,
    value: Matrix,
}

/// Recorded forward computation. Nodes are stored in creation order, which
/// is a topological order because every op only refers to existing nodes.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list()
            .entries(
                self.nodes
                    .iter()
                    .enumerate()
                    .map(|(i, n)| format!("#{i} {} {:?}", n.op.name(), n.value.shape())),
            )
            .finish()
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    adjoints: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros if `v` does not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Matrix {
        match &self.adjoints[v.0] {
            Some(m) => m.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Name of the primitive that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    fn push(&mut self, op: Op, value: Matrix) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(Op::Hadamard(a, b), value))
    }

    /// `n × 1` column of row sums.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let sums = self.value(a).row_sums();
        let n = sums.len();
        self.push(Op::RowSum(a), Matrix::from_raw(n, 1, sums))
    }

    pub fn row_divide(&mut self, num: Var, den: Var, fallback: Var) -> Result<Var> {
        let (nv, dv, fv) = (self.value(num), self.value(den), self.value(fallback));
        if dv.shape() != (nv.rows(), 1) || fv.shape() != nv.shape() {
            return Err(Error::shape(
                "row_divide",
                format!("den {}x1 and fallback {:?}", nv.rows(), nv.shape()),
                format!("den {:?}, fallback {:?}", dv.shape(), fv.shape()),
            ));
        }
        let mut out = nv.clone();
        for i in 0..nv.rows() {
            let s = dv[(i, 0)];
            let row = out.row_mut(i);
            if s < DEGENERATE_ROW_SUM {
                row.copy_from_slice(fv.row(i));
            } else {
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
        Ok(self.push(Op::RowDivide { num, den, fallback }, out))
    }

    /// Adds the `1 × k` row vector `bias` to every row of `a`.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.shape() != (1, av.cols()) {
            return Err(Error::shape(
                "add_row_bias",
                format!("1x{}", av.cols()),
                format!("{:?}", bv.shape()),
            ));
        }
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bv.row(0)) {
                *o += b;
            }
        }
        Ok(self.push(Op::AddRowBias(a, bias), out))
    }

    pub fn softmax(&mut self, input: Var, temperature: f64) -> Result<Var> {
        let value = tensor::softmax_with_temperature(self.value(input), temperature)?.into_matrix();
        Ok(self.push(Op::Softmax { input, temperature }, value))
    }

    /// Raw Pearson correlation between rows, zero diagonal.
    pub fn pearson(&mut self, input: Var) -> Result<Var> {
        let e = self.value(input);
        let (n, d) = e.shape();
        if n < 2 || d < 2 {
            return Err(Error::shape(
                "pearson",
                "at least 2 rows and 2 columns",
                format!("{n}x{d}"),
            ));
        }
        let standardized = similarity::standardize(e);
        if standardized.degenerate.iter().any(|&b| b) {
            log::warn!("constant embedding rows in batch: similarities set to 0");
        }
        let value = similarity::raw_correlation(&standardized);
        Ok(self.push(
            Op::Pearson {
                input,
                standardized,
            },
            value,
        ))
    }

    /// `max(x, 0)`; the sub-gradient at 0 is 0.
    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|v| v.max(0.0));
        self.push(Op::ReluClamp(input), value)
    }

    pub fn shift_negatives(&mut self, input: Var) -> Var {
        let value = similarity::apply_negative_mode(self.value(input), NegativeMode::Shift);
        self.push(Op::ShiftNegatives(input), value)
    }

    /// Overwrites anchor rows with their one-hot label. No gradient reaches
    /// the overwritten rows of `input`.
    pub fn one_hot_overlay(&mut self, input: Var, anchors: &AnchorSpec) -> Result<Var> {
        let mut value = self.value(input).clone();
        anchors.check_against(value.rows(), value.cols())?;
        dynamics::overlay_one_hot(&mut value, anchors);
        let rows = anchors
            .anchor_indices()
            .map(|i| (i, anchors.labels()[i]))
            .collect();
        Ok(self.push(Op::OneHotOverlay { input, rows }, value))
    }

    pub fn cross_entropy(&mut self, input: Var, labels: &[usize], mask: &[bool]) -> Result<Var> {
        let x = self.value(input);
        tensor::check_labels_mask("cross_entropy", x, labels, mask)?;
        let selected = mask.iter().filter(|&&s| s).count();
        if selected == 0 {
            return Err(Error::InvalidBatch(
                "every row is masked out of the loss".into(),
            ));
        }
        let total: f64 = (0..x.rows())
            .filter(|&i| mask[i])
            .map(|i| -x[(i, labels[i])].max(LOG_EPS).ln())
            .sum();
        let value = Matrix::from_raw(1, 1, vec![total / selected as f64]);
        Ok(self.push(
            Op::CrossEntropy {
                input,
                labels: labels.to_vec(),
                mask: mask.to_vec(),
            },
            value,
        ))
    }

    /// Mean of `KL(x_i ‖ x_j)` over ordered pairs of distinct selected rows
    /// that share a label.
    pub fn pairwise_kl(&mut self, input: Var, labels: &[usize], mask: &[bool]) -> Result<Var> {
        let x = self.value(input);
        tensor::check_labels_mask("pairwise_kl", x, labels, mask)?;
        let n = x.rows();
        let pairs: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(i, j)| i != j && mask[i] && mask[j] && labels[i] == labels[j])
            .collect();
        if pairs.is_empty() {
            return Err(Error::InvalidBatch(
                "no same-class pair among the loss rows".into(),
            ));
        }
        let total: f64 = pairs
            .iter()
            .map(|&(i, j)| kl_rows(x.row(i), x.row(j)))
            .sum();
        let value = Matrix::from_raw(1, 1, vec![total / pairs.len() as f64]);
        Ok(self.push(Op::PairwiseKl { input, pairs }, value))
    }

    /// Clamp and degeneracy decisions taken during the forward pass. Two
    /// evaluations with equal signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> Vec<u64> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::ReluClamp(input) => {
                    sig.extend(
                        self.value(*input)
                            .as_slice()
                            .iter()
                            .map(|&v| (v > 0.0) as u64),
                    );
                }
                Op::ShiftNegatives(input) => {
                    let at = similarity::shift_argmin(self.value(*input));
                    sig.push(at.map_or(u64::MAX, |(i, j)| {
                        (i * self.value(*input).cols() + j) as u64
                    }));
                }
                Op::RowDivide { den, .. } => {
                    sig.extend(
                        self.value(*den)
                            .as_slice()
                            .iter()
                            .map(|&s| (s < DEGENERATE_ROW_SUM) as u64),
                    );
                }
                Op::CrossEntropy {
                    input,
                    labels,
                    mask,
                } => {
                    let x = self.value(*input);
                    sig.extend(
                        (0..x.rows())
                            .filter(|&i| mask[i])
                            .map(|i| (x[(i, labels[i])] > LOG_EPS) as u64),
                    );
                }
                Op::PairwiseKl { input, .. } => {
                    sig.extend(
                        self.value(*input)
                            .as_slice()
                            .iter()
                            .map(|&v| (v > LOG_EPS) as u64),
                    );
                }
                Op::Pearson { standardized, .. } => {
                    sig.extend(standardized.degenerate.iter().map(|&b| b as u64));
                }
                _ => {}
            }
        }
        sig
    }

    /// Reverse sweep from the `1 × 1` node `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::shape(
                "backward",
                "1x1 loss",
                format!("{:?}", self.value(loss).shape()),
            ));
        }
        let mut adj: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            if !g.is_finite() {
                return Err(Error::numeric(
                    format!("backward at node #{idx} ({})", self.nodes[idx].op.name()),
                    "non-finite adjoint",
                ));
            }
            self.propagate(idx, &g, &mut adj)?;
            adj[idx] = Some(g);
        }
        Ok(Gradients {
            adjoints: adj,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn propagate(&self, idx: usize, g: &Matrix, adj: &mut [Option<Matrix>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = g.matmul_t(self.value(*b))?;
                let db = self.value(*a).t_matmul(g)?;
                accumulate(adj, *a, da)?;
                accumulate(adj, *b, db)?;
            }
            Op::Hadamard(a, b) => {
                let da = g.hadamard(self.value(*b))?;
                let db = g.hadamard(self.value(*a))?;
                accumulate(adj, *a, da)?;
                accumulate(adj, *b, db)?;
            }
            Op::RowSum(a) => {
                let (n, m) = self.value(*a).shape();
                let mut da = Matrix::zeros(n, m);
                for i in 0..n {
                    da.row_mut(i).iter_mut().for_each(|v| *v = g[(i, 0)]);
                }
                accumulate(adj, *a, da)?;
            }
            Op::RowDivide { num, den, fallback } => {
                let (nv, dv) = (self.value(*num), self.value(*den));
                let (n, m) = nv.shape();
                let mut dnum = Matrix::zeros(n, m);
                let mut dden = Matrix::zeros(n, 1);
                let mut dfall = Matrix::zeros(n, m);
                for i in 0..n {
                    let s = dv[(i, 0)];
                    if s < DEGENERATE_ROW_SUM {
                        dfall.row_mut(i).copy_from_slice(g.row(i));
                        continue;
                    }
                    let mut dot = 0.0;
                    for k in 0..m {
                        dnum[(i, k)] = g[(i, k)] / s;
                        dot += g[(i, k)] * nv[(i, k)];
                    }
                    dden[(i, 0)] = -dot / (s * s);
                }
                accumulate(adj, *num, dnum)?;
                accumulate(adj, *den, dden)?;
                accumulate(adj, *fallback, dfall)?;
            }
            Op::AddRowBias(a, bias) => {
                let mut db = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, v) in db.row_mut(0).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                accumulate(adj, *a, g.clone())?;
                accumulate(adj, *bias, db)?;
            }
            Op::Softmax { input, temperature } => {
                let p = &node.value;
                let mut dz = Matrix::zeros(p.rows(), p.cols());
                for i in 0..p.rows() {
                    let dot: f64 = g.row(i).iter().zip(p.row(i)).map(|(a, b)| a * b).sum();
                    for k in 0..p.cols() {
                        dz[(i, k)] = p[(i, k)] * (g[(i, k)] - dot) / temperature;
                    }
                }
                accumulate(adj, *input, dz)?;
            }
            Op::Pearson {
                input,
                standardized,
            } => {
                accumulate(
                    adj,
                    *input,
                    similarity::correlation_backward(standardized, g),
                )?;
            }
            Op::ReluClamp(input) => {
                let x = self.value(*input);
                let data = x
                    .as_slice()
                    .iter()
                    .zip(g.as_slice())
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                accumulate(adj, *input, Matrix::from_raw(x.rows(), x.cols(), data))?;
            }
            Op::ShiftNegatives(input) => {
                let d =
                    similarity::negative_mode_backward(self.value(*input), g, NegativeMode::Shift);
                accumulate(adj, *input, d)?;
            }
            Op::OneHotOverlay { input, rows } => {
                let mut d = g.clone();
                for &(i, _) in rows {
                    d.row_mut(i).iter_mut().for_each(|v| *v = 0.0);
                }
                accumulate(adj, *input, d)?;
            }
            Op::CrossEntropy {
                input,
                labels,
                mask,
            } => {
                let x = self.value(*input);
                let selected = mask.iter().filter(|&&s| s).count() as f64;
                let mut d = Matrix::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    let p = x[(i, labels[i])];
                    if mask[i] && p > LOG_EPS {
                        d[(i, labels[i])] = -g[(0, 0)] / (selected * p);
                    }
                }
                accumulate(adj, *input, d)?;
            }
            Op::PairwiseKl { input, pairs } => {
                let x = self.value(*input);
                let scale = g[(0, 0)] / pairs.len() as f64;
                let mut d = Matrix::zeros(x.rows(), x.cols());
                for &(i, j) in pairs {
                    for k in 0..x.cols() {
                        let (p, q) = (x[(i, k)], x[(j, k)]);
                        let (pc, qc) = (p.max(LOG_EPS), q.max(LOG_EPS));
                        let dp = pc.ln() - qc.ln() + if p > LOG_EPS { 1.0 } else { 0.0 };
                        let dq = if q > LOG_EPS { -p / q } else { 0.0 };
                        d[(i, k)] += scale * dp;
                        d[(j, k)] += scale * dq;
                    }
                }
                accumulate(adj, *input, d)?;
            }
        }
        Ok(())
    }
}

fn kl_rows(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| a * (a.max(LOG_EPS).ln() - b.max(LOG_EPS).ln()))
        .sum()
}

fn accumulate(adj: &mut [Option<Matrix>], v: Var, contribution: Matrix) -> Result<()> {
    match &mut adj[v.0] {
        Some(existing) => existing.add_assign(&contribution),
        slot @ None => {
            *slot = Some(contribution);
            Ok(())
        }
    }
}

/// Objective applied to the refined assignments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    #[default]
    CrossEntropy,
    /// Mean KL divergence between refined distributions of same-class rows.
    PairwiseKl,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross-entropy" | "ce" => Ok(LossKind::CrossEntropy),
            "pairwise-kl" | "kl" => Ok(LossKind::PairwiseKl),
            other => Err(Error::param(
                "loss",
                format!("expected cross-entropy or pairwise-kl, got {other:?}"),
            )),
        }
    }
}

/// Settings of the similarity and refinement stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroupLossConfig {
    pub iteration_count: usize,
    pub temperature: f64,
    pub negative_mode: NegativeMode,
    pub loss: LossKind,
}

impl Default for GroupLossConfig {
    fn default() -> Self {
        Self {
            iteration_count: dynamics::DEFAULT_ITERATION_COUNT,
            temperature: 1.0,
            negative_mode: NegativeMode::Clamp,
            loss: LossKind::CrossEntropy,
        }
    }
}

impl GroupLossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iteration_count > MAX_ITERATION_COUNT {
            return Err(Error::param(
                "iteration_count",
                format!(
                    "must be at most {MAX_ITERATION_COUNT}, got {}",
                    self.iteration_count
                ),
            ));
        }
        if !self.temperature.is_finite() || self.temperature <= 0.0 {
            return Err(Error::param(
                "temperature",
                format!("must be positive, got {}", self.temperature),
            ));
        }
        Ok(())
    }
}

/// Records similarity, prior initialisation, refinement and the loss for
/// an already-recorded embedding and logit node. Returns the loss node.
pub fn record_group_loss(
    tape: &mut Tape,
    embeddings: Var,
    logits: Var,
    anchors: &AnchorSpec,
    config: &GroupLossConfig,
) -> Result<Var> {
    config.validate()?;
    let n = tape.value(embeddings).rows();
    if tape.value(logits).rows() != n || anchors.len() != n {
        return Err(Error::shape(
            "group loss",
            format!("{n} rows everywhere"),
            format!(
                "{} logit rows, {} labels",
                tape.value(logits).rows(),
                anchors.len()
            ),
        ));
    }
    let raw = tape.pearson(embeddings)?;
    let w = match config.negative_mode {
        NegativeMode::Clamp => tape.relu(raw),
        NegativeMode::Shift => tape.shift_negatives(raw),
    };
    let prior = tape.softmax(logits, config.temperature)?;
    let mut x = tape.one_hot_overlay(prior, anchors)?;
    for _ in 0..config.iteration_count {
        let pi = tape.matmul(w, x)?;
        let product = tape.hadamard(x, pi)?;
        let sums = tape.row_sum(product);
        let next = tape.row_divide(product, sums, x)?;
        x = if anchors.num_anchors() > 0 {
            tape.one_hot_overlay(next, anchors)?
        } else {
            next
        };
        dynamics::count_step();
    }
    let mask = anchors.loss_mask();
    match config.loss {
        LossKind::CrossEntropy => tape.cross_entropy(x, anchors.labels(), &mask),
        LossKind::PairwiseKl => tape.pairwise_kl(x, anchors.labels(), &mask),
    }
}

/// A recorded group-loss evaluation, ready for [`backward`].
pub struct LossTape {
    pub tape: Tape,
    pub embeddings: Var,
    pub logits: Var,
    pub loss: Var,
}

impl LossTape {
    pub fn loss_value(&self) -> f64 {
        self.tape.value(self.loss)[(0, 0)]
    }
}

/// Gradients of the loss with respect to both inputs of the group loss.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub d_embeddings: Matrix,
    pub d_logits: Matrix,
}

/// Evaluates the group loss and keeps the tape for [`backward`].
pub fn forward_loss(
    embeddings: &Matrix,
    logits: &Matrix,
    anchors: &AnchorSpec,
    config: &GroupLossConfig,
) -> Result<(f64, LossTape)> {
    let mut tape = Tape::new();
    let e = tape.leaf(embeddings.clone());
    let z = tape.leaf(logits.clone());
    let loss = record_group_loss(&mut tape, e, z, anchors, config)?;
    let lt = LossTape {
        tape,
        embeddings: e,
        logits: z,
        loss,
    };
    let value = lt.loss_value();
    if !value.is_finite() {
        return Err(Error::numeric("forward_loss", format!("loss is {value}")));
    }
    Ok((value, lt))
}

pub fn backward(lt: &LossTape) -> Result<GradientBundle> {
    let grads = lt.tape.backward(lt.loss)?;
    Ok(GradientBundle {
        d_embeddings: grads.get(lt.embeddings),
        d_logits: grads.get(lt.logits),
    })
}

/// Result of one objective evaluation used by [`grad_check`].
pub struct Evaluation {
    pub value: f64,
    pub kinks: Vec<u64>,
}

/// Something with named parameter blocks that can be evaluated and
/// differentiated at arbitrary points.
pub trait Objective {
    fn point(&self) -> Vec<(String, Matrix)>;
    fn evaluate(&self, blocks: &[Matrix]) -> Result<Evaluation>;
    fn gradient(&self, blocks: &[Matrix]) -> Result<Vec<Matrix>>;
}

/// Group loss as a function of `(embeddings, logits)`.
pub struct GroupLossObjective {
    pub embeddings: Matrix,
    pub logits: Matrix,
    pub anchors: AnchorSpec,
    pub config: GroupLossConfig,
}

impl Objective for GroupLossObjective {
    fn point(&self) -> Vec<(String, Matrix)> {
        vec![
            ("embeddings".to_string(), self.embeddings.clone()),
            ("logits".to_string(), self.logits.clone()),
        ]
    }

    fn evaluate(&self, blocks: &[Matrix]) -> Result<Evaluation> {
        let (value, lt) = forward_loss(&blocks[0], &blocks[1], &self.anchors, &self.config)?;
        Ok(Evaluation {
            value,
            kinks: lt.tape.kink_signature(),
        })
    }

    fn gradient(&self, blocks: &[Matrix]) -> Result<Vec<Matrix>> {
        let (_, lt) = forward_loss(&blocks[0], &blocks[1], &self.anchors, &self.config)?;
        let g = backward(&lt)?;
        Ok(vec![g.d_embeddings, g.d_logits])
    }
}

/// Denominator floor of the relative error, so that gradients that are
/// numerically zero are compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoordinateFailure {
    pub block: String,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose ±h perturbation crossed a clamp or degeneracy kink.
    pub excluded: usize,
    pub failures: Vec<CoordinateFailure>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn merge(mut self, other: GradCheckReport) -> GradCheckReport {
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.checked += other.checked;
        self.excluded += other.excluded;
        self.failures.extend(other.failures);
        self.passed &= other.passed;
        self
    }

    pub fn empty() -> GradCheckReport {
        GradCheckReport {
            max_rel_error: 0.0,
            checked: 0,
            excluded: 0,
            failures: Vec::new(),
            passed: true,
        }
    }
}

/// Compares the objective's analytic gradient against central differences
/// with step `h`, coordinate by coordinate. Never fails: evaluation errors
/// are reported as failed coordinates with NaN values.
pub fn grad_check(objective: &dyn Objective, h: f64, tol: f64) -> GradCheckReport {
    let point: Vec<(String, Matrix)> = objective.point();
    let blocks: Vec<Matrix> = point.iter().map(|(_, m)| m.clone()).collect();
    let mut report = GradCheckReport::empty();

    let (base, analytic) = match (objective.evaluate(&blocks), objective.gradient(&blocks)) {
        (Ok(b), Ok(g)) => (b, g),
        (Err(e), _) | (_, Err(e)) => {
            log::error!("grad_check: base evaluation failed: {e}");
            report.passed = false;
            report.max_rel_error = f64::INFINITY;
            return report;
        }
    };

    for (b, (name, block)) in point.iter().enumerate() {
        for k in 0..block.as_slice().len() {
            let mut plus = blocks.clone();
            plus[b].as_mut_slice()[k] += h;
            let mut minus = blocks.clone();
            minus[b].as_mut_slice()[k] -= h;
            let (row, col) = (k / block.cols(), k % block.cols());
            let a = analytic[b].as_slice()[k];
            match (objective.evaluate(&plus), objective.evaluate(&minus)) {
                (Ok(p), Ok(m)) => {
                    if p.kinks != base.kinks || m.kinks != base.kinks {
                        report.excluded += 1;
                        continue;
                    }
                    let numeric = (p.value - m.value) / (2.0 * h);
                    let err = relative_error(a, numeric);
                    report.checked += 1;
                    report.max_rel_error = report.max_rel_error.max(err);
                    if err.is_nan() || err >= tol {
                        report.failures.push(CoordinateFailure {
                            block: name.clone(),
                            row,
                            col,
                            analytic: a,
                            numeric,
                            rel_error: err,
                        });
                    }
                }
                _ => {
                    report.failures.push(CoordinateFailure {
                        block: name.clone(),
                        row,
                        col,
                        analytic: a,
                        numeric: f64::NAN,
                        rel_error: f64::INFINITY,
                    });
                    report.max_rel_error = f64::INFINITY;
                }
            }
        }
    }
    report.passed = report.failures.is_empty();
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{init_assignments, refine};
    use crate::similarity::pearson_similarity;
    use crate::tensor::{cross_entropy, softmax_with_temperature};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Matrix {
        Matrix::from_vec(
            r,
            c,
            (0..r * c)
                .map(|_| rng.random_range(-scale..scale))
                .collect(),
        )
        .unwrap()
    }

    /// Finite-difference check of one primitive: `L = Σ weights ⊙ f(inputs)`.
    fn primitive_fd(
        inputs: Vec<Matrix>,
        build: impl Fn(&mut Tape, &[Var]) -> Var,
        seed: u64,
    ) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eval = |inputs: &[Matrix], weights: Option<&Matrix>| -> (f64, Matrix, Vec<Matrix>) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
            let out = build(&mut tape, &vars);
            let (r, c) = tape.value(out).shape();
            let wv = weights
                .cloned()
                .unwrap_or_else(|| Matrix::filled(r, c, 0.0));
            let w = tape.leaf(wv.clone());
            let prod = tape.hadamard(out, w).unwrap();
            let ones_l = tape.leaf(Matrix::filled(1, r, 1.0));
            let ones_r = tape.leaf(Matrix::filled(c, 1, 1.0));
            let left = tape.matmul(ones_l, prod).unwrap();
            let loss = tape.matmul(left, ones_r).unwrap();
            let grads = tape.backward(loss).unwrap();
            let value = tape.value(loss)[(0, 0)];
            (value, wv, vars.iter().map(|&v| grads.get(v)).collect())
        };
        let (_, shape_probe, _) = eval(&inputs, None);
        let weights = random(&mut rng, shape_probe.rows(), shape_probe.cols(), 1.0);
        let (_, _, analytic) = eval(&inputs, Some(&weights));
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for b in 0..inputs.len() {
            for k in 0..inputs[b].as_slice().len() {
                let mut p = inputs.clone();
                p[b].as_mut_slice()[k] += h;
                let mut m = inputs.clone();
                m[b].as_mut_slice()[k] -= h;
                let fd = (eval(&p, Some(&weights)).0 - eval(&m, Some(&weights)).0) / (2.0 * h);
                worst = worst.max(relative_error(analytic[b].as_slice()[k], fd));
            }
        }
        worst
    }

    fn positive(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        random(rng, r, c, 1.0).map(|v| v.abs() + 0.1)
    }

    #[test]
    fn primitive_vjps_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, 3, 4, 1.0);
        let b = random(&mut rng, 4, 2, 1.0);
        let c = random(&mut rng, 3, 4, 1.0);
        let tol = 1e-6;

        let e = primitive_fd(
            vec![a.clone(), b.clone()],
            |t, v| t.matmul(v[0], v[1]).unwrap(),
            2,
        );
        assert!(e < tol, "matmul {e}");
        let e = primitive_fd(
            vec![a.clone(), c.clone()],
            |t, v| t.hadamard(v[0], v[1]).unwrap(),
            3,
        );
        assert!(e < tol, "hadamard {e}");
        let e = primitive_fd(vec![a.clone()], |t, v| t.row_sum(v[0]), 4);
        assert!(e < tol, "row-sum {e}");
        let den = positive(&mut rng, 3, 1);
        let e = primitive_fd(
            vec![a.clone(), den, c.clone()],
            |t, v| t.row_divide(v[0], v[1], v[2]).unwrap(),
            5,
        );
        assert!(e < tol, "row-divide {e}");
        let bias = random(&mut rng, 1, 4, 1.0);
        let e = primitive_fd(
            vec![a.clone(), bias],
            |t, v| t.add_row_bias(v[0], v[1]).unwrap(),
            6,
        );
        assert!(e < tol, "add-row-bias {e}");
        let e = primitive_fd(vec![a.clone()], |t, v| t.softmax(v[0], 0.7).unwrap(), 7);
        assert!(e < tol, "softmax {e}");
        let emb = random(&mut rng, 4, 5, 1.0);
        let e = primitive_fd(vec![emb.clone()], |t, v| t.pearson(v[0]).unwrap(), 8);
        assert!(e < tol, "pearson {e}");
        let e = primitive_fd(vec![a.clone()], |t, v| t.relu(v[0]), 9);
        assert!(e < tol, "relu {e}");
        let e = primitive_fd(
            vec![emb.clone()],
            |t, v| {
                let r = t.pearson(v[0]).unwrap();
                t.shift_negatives(r)
            },
            10,
        );
        assert!(e < tol, "shift {e}");
        let anchors = AnchorSpec::new([1], vec![0, 2, 3]).unwrap();
        let e = primitive_fd(
            vec![a.clone()],
            |t, v| t.one_hot_overlay(v[0], &anchors).unwrap(),
            11,
        );
        assert!(e < tol, "overlay {e}");
        let probs = softmax_with_temperature(&a, 1.0).unwrap().into_matrix();
        let e = primitive_fd(
            vec![probs.clone()],
            |t, v| {
                t.cross_entropy(v[0], &[0, 1, 3], &[true, false, true])
                    .unwrap()
            },
            12,
        );
        assert!(e < tol, "cross-entropy {e}");
        let e = primitive_fd(
            vec![probs],
            |t, v| t.pairwise_kl(v[0], &[1, 1, 1], &[true; 3]).unwrap(),
            13,
        );
        assert!(e < tol, "pairwise-kl {e}");
    }

    #[test]
    fn quadratic_through_tape_is_exact() {
        struct Quadratic {
            a: Matrix,
        }
        impl Objective for Quadratic {
            fn point(&self) -> Vec<(String, Matrix)> {
                vec![("a".into(), self.a.clone())]
            }
            fn evaluate(&self, blocks: &[Matrix]) -> Result<Evaluation> {
                let mut t = Tape::new();
                let a = t.leaf(blocks[0].clone());
                let sq = t.hadamard(a, a)?;
                let ones_l = t.leaf(Matrix::filled(1, 3, 1.0));
                let ones_r = t.leaf(Matrix::filled(2, 1, 1.0));
                let l = t.matmul(ones_l, sq)?;
                let l = t.matmul(l, ones_r)?;
                Ok(Evaluation {
                    value: t.value(l)[(0, 0)],
                    kinks: t.kink_signature(),
                })
            }
            fn gradient(&self, blocks: &[Matrix]) -> Result<Vec<Matrix>> {
                let mut t = Tape::new();
                let a = t.leaf(blocks[0].clone());
                let sq = t.hadamard(a, a)?;
                let ones_l = t.leaf(Matrix::filled(1, 3, 1.0));
                let ones_r = t.leaf(Matrix::filled(2, 1, 1.0));
                let l = t.matmul(ones_l, sq)?;
                let l = t.matmul(l, ones_r)?;
                Ok(vec![t.backward(l)?.get(a)])
            }
        }
        let q = Quadratic {
            a: Matrix::from_rows(&[[1.0, -2.0], [0.5, 3.0], [-1.5, 0.25]]).unwrap(),
        };
        let report = grad_check(&q, 1e-3, 1e-9);
        assert!(report.passed, "{report:?}");
        assert!(report.max_rel_error < 1e-9);
        assert_eq!(report.checked, 6);
    }

    #[test]
    fn forward_loss_without_dynamics_is_softmax_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e = random(&mut rng, 6, 5, 1.0);
        let z = random(&mut rng, 6, 3, 2.0);
        let labels = vec![0, 1, 2, 0, 1, 2];
        let cfg = GroupLossConfig {
            iteration_count: 0,
            ..Default::default()
        };
        let anchors = AnchorSpec::none(labels.clone());
        let (loss, lt) = forward_loss(&e, &z, &anchors, &cfg).unwrap();
        let p = softmax_with_temperature(&z, 1.0).unwrap();
        assert_eq!(loss, cross_entropy(&p, &labels, &[true; 6]).unwrap());

        // d_logits = (p - onehot) / n, and embeddings do not matter
        let g = backward(&lt).unwrap();
        assert_eq!(g.d_embeddings.max_abs(), 0.0);
        for i in 0..6 {
            for k in 0..3 {
                let expected = (p[(i, k)] - if labels[i] == k { 1.0 } else { 0.0 }) / 6.0;
                assert!((g.d_logits[(i, k)] - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn temperature_scales_baseline_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = random(&mut rng, 4, 3, 1.0);
        let z = random(&mut rng, 4, 2, 2.0);
        let labels = vec![0, 1, 1, 0];
        let t = 2.5;
        let cfg = GroupLossConfig {
            iteration_count: 0,
            temperature: t,
            ..Default::default()
        };
        let anchors = AnchorSpec::new([3], labels.clone()).unwrap();
        let (_, lt) = forward_loss(&e, &z, &anchors, &cfg).unwrap();
        let g = backward(&lt).unwrap();
        let p = softmax_with_temperature(&z, t).unwrap();
        for i in 0..3 {
            for k in 0..2 {
                let expected = (p[(i, k)] - if labels[i] == k { 1.0 } else { 0.0 }) / 3.0 / t;
                assert!((g.d_logits[(i, k)] - expected).abs() < 1e-15);
            }
        }
        assert_eq!(g.d_logits.row(3), &[0.0, 0.0]);
    }

    #[test]
    fn all_anchored_batch_is_invalid() {
        let e = Matrix::from_rows(&[[1.0, 2.0, 0.0], [0.0, 1.0, 3.0]]).unwrap();
        let z = Matrix::zeros(2, 2);
        let anchors = AnchorSpec::new([0, 1], vec![0, 1]).unwrap();
        let r = forward_loss(&e, &z, &anchors, &GroupLossConfig::default());
        assert!(matches!(r, Err(Error::InvalidBatch(_))));
    }

    #[test]
    fn loss_matches_module_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (n, m, d) = (6, 3, 8);
        let e = random(&mut rng, n, d, 1.0);
        let z = random(&mut rng, n, m, 2.0);
        let labels = vec![0, 0, 1, 1, 2, 2];
        let anchors = AnchorSpec::new([0, 3], labels.clone()).unwrap();
        for mode in [NegativeMode::Clamp, NegativeMode::Shift] {
            let cfg = GroupLossConfig {
                iteration_count: 2,
                temperature: 1.5,
                negative_mode: mode,
                ..Default::default()
            };
            let w = pearson_similarity(&e, mode).unwrap();
            let x0 = init_assignments(&z, &anchors, 1.5).unwrap();
            let trace = refine(&x0, &w, &anchors, 2).unwrap();
            let expected = cross_entropy(trace.last(), &labels, &anchors.loss_mask()).unwrap();
            let (loss, _) = forward_loss(&e, &z, &anchors, &cfg).unwrap();
            assert_eq!(loss, expected, "{mode}");
        }
    }

    #[test]
    fn fully_clamped_similarity_gives_no_embedding_gradient() {
        let e = Matrix::from_rows(&[[1.0, 2.0, 3.0], [3.0, 2.0, 1.0]]).unwrap();
        let z = Matrix::from_rows(&[[0.3, -0.2], [0.1, 0.4]]).unwrap();
        let anchors = AnchorSpec::none(vec![0, 1]);
        let cfg = GroupLossConfig {
            iteration_count: 4,
            ..Default::default()
        };
        let (_, lt) = forward_loss(&e, &z, &anchors, &cfg).unwrap();
        assert_eq!(backward(&lt).unwrap().d_embeddings.max_abs(), 0.0);
    }

    #[test]
    fn anchor_logits_receive_no_gradient_and_backward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let e = random(&mut rng, 8, 6, 1.0);
        let z = random(&mut rng, 8, 4, 1.0);
        let labels = vec![0, 0, 1, 1, 2, 2, 3, 3];
        let anchors = AnchorSpec::new([1, 4, 6], labels).unwrap();
        let cfg = GroupLossConfig::default();
        let (_, lt) = forward_loss(&e, &z, &anchors, &cfg).unwrap();
        let g1 = backward(&lt).unwrap();
        let g2 = backward(&lt).unwrap();
        assert_eq!(g1, g2);
        for i in [1, 4, 6] {
            assert!(g1.d_logits.row(i).iter().all(|&v| v == 0.0));
        }
        assert!(g1.d_embeddings.max_abs() > 0.0);
    }

    #[test]
    fn grad_check_passes_on_random_instances() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(4..=8);
            let m = rng.random_range(2..=4);
            let d = rng.random_range(2..=6);
            let labels: Vec<usize> = (0..n).map(|i| (i / 2) % m).collect();
            let anchors =
                AnchorSpec::new(if seed % 2 == 0 { vec![0] } else { vec![] }, labels).unwrap();
            for loss in [LossKind::CrossEntropy, LossKind::PairwiseKl] {
                let obj = GroupLossObjective {
                    embeddings: random(&mut rng, n, d, 1.0),
                    logits: random(&mut rng, n, m, 1.0),
                    anchors: anchors.clone(),
                    config: GroupLossConfig {
                        iteration_count: rng.random_range(0..=3),
                        temperature: rng.random_range(0.5..2.0),
                        negative_mode: if seed % 3 == 0 {
                            NegativeMode::Shift
                        } else {
                            NegativeMode::Clamp
                        },
                        loss,
                    },
                };
                let report = grad_check(&obj, 1e-6, 1e-5);
                assert!(report.passed, "seed {seed} {loss:?}: {report:?}");
            }
        }
    }

    #[test]
    fn clamp_boundary_coordinates_are_excluded() {
        // rows 0 and 1 are exactly uncorrelated, so ω(0, 1) sits on the kink
        let e = Matrix::from_rows(&[
            [1.0, -1.0, 1.0, -1.0],
            [1.0, 1.0, -1.0, -1.0],
            [1.0, 0.5, 0.2, -2.0],
        ])
        .unwrap();
        let w = pearson_similarity(&e, NegativeMode::Clamp).unwrap();
        assert_eq!(w[(0, 1)], 0.0);
        let obj = GroupLossObjective {
            embeddings: e,
            logits: Matrix::from_rows(&[[0.2, 0.1], [-0.3, 0.4], [0.0, 0.5]]).unwrap(),
            anchors: AnchorSpec::none(vec![0, 1, 0]),
            config: GroupLossConfig::default(),
        };
        let report = grad_check(&obj, 1e-6, 1e-5);
        assert!(report.excluded > 0);
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn tight_tolerance_reports_coordinates() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let obj = GroupLossObjective {
            embeddings: random(&mut rng, 5, 4, 1.0),
            logits: random(&mut rng, 5, 3, 1.0),
            anchors: AnchorSpec::none(vec![0, 1, 2, 0, 1]),
            config: GroupLossConfig::default(),
        };
        let report = grad_check(&obj, 1e-6, 1e-12);
        assert!(!report.passed);
        let f = &report.failures[0];
        assert!(f.block == "embeddings" || f.block == "logits");
        assert!(f.rel_error >= 1e-12);
    }

    #[test]
    fn backward_rejects_non_scalar_and_names_non_finite_node() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::zeros(2, 2));
        assert!(t.backward(a).is_err());

        let mut t = Tape::new();
        let a = t.leaf(Matrix::from_rows(&[[f64::MAX, 1.0]]).unwrap());
        let b = t.leaf(Matrix::from_rows(&[[f64::MAX], [1.0]]).unwrap());
        let big = t.matmul(a, b).unwrap();
        let l = t.matmul(big, big).unwrap();
        match t.backward(l) {
            Err(Error::Numeric { context, .. }) => assert!(context.contains("matmul"), "{context}"),
            other => panic!("expected numeric error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn config_validation() {
        let bad = GroupLossConfig {
            iteration_count: 51,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = GroupLossConfig {
            temperature: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(GroupLossConfig::default().validate().is_ok());
    }
}
