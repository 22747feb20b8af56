//! Retrieval and clustering metrics computed on L2-normalized embeddings.
//!
//! Nothing in here touches the label dynamics: evaluation uses the encoder's
//! embeddings directly.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::MlpEncoder;
use crate::tensor::Matrix;

pub const KMEANS_MAX_ITERATIONS: usize = 300;
pub const KMEANS_RESTARTS: usize = 10;

/// Scales every row to unit Euclidean norm. All-zero rows stay zero.
pub fn l2_normalize(embeddings: &Matrix) -> Matrix {
    let mut out = embeddings.clone();
    let mut zero_rows = 0;
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        } else {
            zero_rows += 1;
        }
    }
    if zero_rows > 0 {
        log::warn!("l2_normalize: {zero_rows} zero row(s) left unnormalized");
    }
    out
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Fraction of queries whose `K` nearest neighbours (self excluded) contain a
/// sample of the same label, for each requested `K`. Equal distances are
/// ordered by index.
pub fn recall_at_k(
    embeddings: &Matrix,
    labels: &[usize],
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    let n = embeddings.rows();
    if labels.len() != n {
        return Err(Error::shape(
            "recall_at_k",
            format!("{n} labels"),
            format!("{}", labels.len()),
        ));
    }
    if ks.is_empty() {
        return Err(Error::param("ks", "at least one K is required"));
    }
    if let Some(&bad) = ks.iter().find(|&&k| k == 0 || k >= n) {
        return Err(Error::param(
            "ks",
            format!("K = {bad} must satisfy 1 <= K < {n}"),
        ));
    }
    let k_max = *ks.iter().max().unwrap();
    // rank of the first same-label neighbour for each query, if within k_max
    let mut first_hit = vec![None; n];
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for (i, hit) in first_hit.iter_mut().enumerate() {
        order.clear();
        let q = embeddings.row(i);
        order.extend(
            (0..n)
                .filter(|&j| j != i)
                .map(|j| (squared_distance(q, embeddings.row(j)), j)),
        );
        let by_distance =
            |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        order.select_nth_unstable_by(k_max - 1, by_distance);
        order[..k_max].sort_unstable_by(by_distance);
        *hit = order[..k_max]
            .iter()
            .position(|&(_, j)| labels[j] == labels[i]);
    }
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = first_hit
                .iter()
                .filter(|h| matches!(h, Some(r) if *r < k))
                .count();
            (k, hits as f64 / n as f64)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub assignment: Vec<usize>,
    pub centers: Matrix,
    pub inertia: f64,
    pub iterations: usize,
}

fn nearest_center(point: &[f64], centers: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centers.rows() {
        let d = squared_distance(point, centers.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// D²-weighted seeding: the first center is uniform, each later one is
/// drawn proportionally to the squared distance from the nearest chosen
/// center. If every point coincides with a center, an unused point is drawn
/// uniformly.
fn seed_centers<R: Rng + ?Sized>(x: &Matrix, k: usize, rng: &mut R) -> Matrix {
    let n = x.rows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut dist: Vec<f64> = (0..n)
        .map(|i| squared_distance(x.row(i), x.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in dist.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc >= target {
                    pick = Some(i);
                    break;
                }
            }
            pick.unwrap_or_else(|| dist.iter().rposition(|&d| d > 0.0).unwrap())
        } else {
            let unused: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            unused[rng.random_range(0..unused.len())]
        };
        chosen.push(next);
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min(squared_distance(x.row(i), x.row(next)));
        }
    }
    let mut centers = Matrix::zeros(k, x.cols());
    for (c, &i) in chosen.iter().enumerate() {
        centers.row_mut(c).copy_from_slice(x.row(i));
    }
    centers
}

fn lloyd(x: &Matrix, mut centers: Matrix) -> Clustering {
    let (n, d) = x.shape();
    let k = centers.rows();
    let mut assignment = vec![usize::MAX; n];
    let mut iterations = 0;
    while iterations < KMEANS_MAX_ITERATIONS {
        iterations += 1;
        let mut changed = false;
        for (i, a) in assignment.iter_mut().enumerate() {
            let (c, _) = nearest_center(x.row(i), &centers);
            if *a != c {
                *a = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = Matrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (i, &a) in assignment.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums.row_mut(a).iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        for (c, &count) in counts.iter().enumerate() {
            if count > 0 {
                let inv = 1.0 / count as f64;
                for (dst, s) in centers.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
            }
        }
        // an empty cluster takes over the point farthest from its center
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .map(|i| (squared_distance(x.row(i), centers.row(assignment[i])), i))
                    .filter(|&(_, i)| counts[assignment[i]] > 1)
                    .max_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)));
                if let Some((_, i)) = far {
                    counts[assignment[i]] -= 1;
                    counts[c] = 1;
                    assignment[i] = c;
                    let p = x.row(i).to_vec();
                    centers.row_mut(c).copy_from_slice(&p);
                }
            }
        }
    }
    let inertia = (0..n)
        .map(|i| squared_distance(x.row(i), centers.row(assignment[i])))
        .sum();
    Clustering {
        assignment,
        centers,
        inertia,
        iterations,
    }
}

/// Best-of-`restarts` k-means (lowest inertia, earliest restart on ties).
pub fn kmeans_with_restarts(
    embeddings: &Matrix,
    k: usize,
    seed: u64,
    restarts: usize,
) -> Result<Clustering> {
    let n = embeddings.rows();
    if k == 0 || k > n {
        return Err(Error::param(
            "k",
            format!("must satisfy 1 <= k <= {n}, got {k}"),
        ));
    }
    if restarts == 0 {
        return Err(Error::param("restarts", "must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<Clustering> = None;
    for _ in 0..restarts {
        let centers = seed_centers(embeddings, k, &mut rng);
        let run = lloyd(embeddings, centers);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.unwrap())
}

/// Cluster assignment of each row into `k` clusters.
pub fn kmeans(embeddings: &Matrix, k: usize, seed: u64) -> Result<Vec<usize>> {
    Ok(kmeans_with_restarts(embeddings, k, seed, KMEANS_RESTARTS)?.assignment)
}

/// Renumbers labels 0, 1, 2, … by order of first appearance.
fn canonical(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut ids = HashMap::new();
    let out = labels
        .iter()
        .map(|l| {
            let next = ids.len();
            *ids.entry(*l).or_insert(next)
        })
        .collect();
    (out, ids.len())
}

fn entropy(counts: &[usize], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Mutual information normalised by the geometric mean of the two entropies.
pub fn nmi(assignment: &[usize], labels: &[usize]) -> Result<f64> {
    if assignment.len() != labels.len() {
        return Err(Error::shape(
            "nmi",
            format!("{} labels", assignment.len()),
            format!("{}", labels.len()),
        ));
    }
    if assignment.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = assignment.len() as f64;
    let (a, ka) = canonical(assignment);
    let (b, kb) = canonical(labels);
    let mut joint = vec![0usize; ka * kb];
    let mut ca = vec![0usize; ka];
    let mut cb = vec![0usize; kb];
    for (&i, &j) in a.iter().zip(&b) {
        joint[i * kb + j] += 1;
        ca[i] += 1;
        cb[j] += 1;
    }
    let (ha, hb) = (entropy(&ca, n), entropy(&cb, n));
    if ha == 0.0 || hb == 0.0 {
        return Ok(if ha == hb { 1.0 } else { 0.0 });
    }
    let mut mi = 0.0;
    for i in 0..ka {
        for j in 0..kb {
            let c = joint[i * kb + j];
            if c > 0 {
                let pij = c as f64 / n;
                mi += pij * (c as f64 * n / (ca[i] as f64 * cb[j] as f64)).ln();
            }
        }
    }
    Ok((mi / (ha * hb).sqrt()).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub recall_at: BTreeMap<usize, f64>,
    pub nmi: f64,
    pub n_queries: usize,
    pub k_clusters: usize,
    pub seed: u64,
}

impl EvalReport {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recall_at.get(&k).copied()
    }
}

/// One `key=value` pair per line.
impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.recall_at {
            writeln!(f, "recall@{k}={v}")?;
        }
        writeln!(f, "nmi={}", self.nmi)?;
        writeln!(f, "n_queries={}", self.n_queries)?;
        writeln!(f, "k_clusters={}", self.k_clusters)?;
        writeln!(f, "seed={}", self.seed)
    }
}

impl FromStr for EvalReport {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut recall_at = BTreeMap::new();
        let (mut nmi, mut n_queries, mut k_clusters, mut seed) = (None, None, None, None);
        for (idx, line) in s.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |reason: String| Error::Parse {
                line: idx + 1,
                reason,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected key=value, got {line:?}")))?;
            let num = |v: &str| v.parse::<f64>().map_err(|e| bad(format!("{key}: {e}")));
            let int = |v: &str| v.parse::<u64>().map_err(|e| bad(format!("{key}: {e}")));
            match key {
                "nmi" => nmi = Some(num(value)?),
                "n_queries" => n_queries = Some(int(value)? as usize),
                "k_clusters" => k_clusters = Some(int(value)? as usize),
                "seed" => seed = Some(int(value)?),
                // unknown keys are tolerated so reports can grow
                _ => {
                    if let Some(k) = key.strip_prefix("recall@") {
                        recall_at.insert(int(k)? as usize, num(value)?);
                    }
                }
            }
        }
        let missing = |k: &str| Error::Parse {
            line: 0,
            reason: format!("missing key {k}"),
        };
        Ok(EvalReport {
            recall_at,
            nmi: nmi.ok_or_else(|| missing("nmi"))?,
            n_queries: n_queries.ok_or_else(|| missing("n_queries"))?,
            k_clusters: k_clusters.ok_or_else(|| missing("k_clusters"))?,
            seed: seed.ok_or_else(|| missing("seed"))?,
        })
    }
}

/// Embeds `dataset`, normalizes, then reports Recall@K and k-means NMI.
/// `k_clusters` defaults to the number of classes in the dataset.
pub fn evaluate(
    encoder: &MlpEncoder,
    dataset: &Dataset,
    ks: &[usize],
    k_clusters: Option<usize>,
    seed: u64,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let embeddings = l2_normalize(&encoder.embed(dataset.features())?);
    let recall_at = recall_at_k(&embeddings, dataset.labels(), ks)?;
    let k_clusters = k_clusters.unwrap_or_else(|| dataset.num_classes());
    let assignment = kmeans(&embeddings, k_clusters, seed)?;
    let nmi = nmi(&assignment, dataset.labels())?;
    Ok(EvalReport {
        recall_at,
        nmi,
        n_queries: dataset.len(),
        k_clusters,
        seed,
    })
}
