//! Training runs, robustness sweeps and the seeded gradient-check suite.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{grad_check, GradCheckReport, GroupLossConfig, GroupLossObjective, LossKind};
use crate::config::RunConfig;
use crate::data::{make_blobs, Dataset, GroupSampler, MiniBatch};
use crate::dynamics::AnchorSpec;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalReport};
use crate::model::{
    save_checkpoint, train_step, Activation, AdamState, Architecture, EncoderObjective, MlpEncoder,
};
use crate::similarity::NegativeMode;
use crate::tensor::Matrix;

pub const FAILED_BATCH_FILE: &str = "nonfinite_batch.csv";

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

/// Loads or generates the dataset and splits it as configured. Without the
/// zero-shot split, train and test are the same samples.
pub fn load_data(cfg: &RunConfig) -> Result<Splits> {
    let d = &cfg.data;
    let full = match &d.path {
        Some(p) => Dataset::load(p)?,
        None => make_blobs(
            d.num_classes,
            d.per_class,
            d.d_in,
            d.spread,
            cfg.seeds().data,
        )?,
    };
    if d.zero_shot {
        let (train, test) = full.zero_shot_split(d.train_classes)?;
        Ok(Splits { train, test })
    } else {
        Ok(Splits {
            train: full.clone(),
            test: full,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Warmup,
    GroupLoss,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Warmup => "warmup",
            Phase::GroupLoss => "group-loss",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    pub mean_loss: f64,
    pub batches: usize,
    pub recall_at_1: Option<f64>,
    pub nmi: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub encoder: MlpEncoder,
    pub adam: AdamState,
    pub epochs: Vec<EpochRecord>,
    pub report: EvalReport,
}

fn batches_per_epoch(cfg: &RunConfig, train: &Dataset) -> usize {
    match cfg.optimizer.batches_per_epoch {
        0 => train.len().div_ceil(cfg.batch.batch_size()).max(1),
        b => b,
    }
}

fn dump_batch(batch: &MiniBatch, dir: &Path) -> Option<PathBuf> {
    let path = dir.join(FAILED_BATCH_FILE);
    let written =
        std::fs::create_dir_all(dir).and_then(|_| std::fs::write(&path, batch.to_table()));
    match written {
        Ok(()) => Some(path),
        Err(e) => {
            log::error!(
                "could not write the failing batch to {}: {e}",
                path.display()
            );
            None
        }
    }
}

/// Trains an encoder from scratch: `warmup_epochs` as a plain classifier,
/// the rest with label refinement, then evaluates on the test split.
/// A non-finite loss aborts the run; the offending batch is written to
/// `dump_dir` when given.
pub fn train(cfg: &RunConfig, data: &Splits, dump_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let seeds = cfg.seeds();
    let train = &data.train;
    let mut encoder = MlpEncoder::new(train.dim(), &cfg.model, train.num_classes(), seeds.model)?;
    let mut adam = AdamState::new(
        &encoder,
        cfg.optimizer.schedule(),
        cfg.optimizer.weight_decay,
    );
    let sampler = GroupSampler::new(train, cfg.batch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seeds.sampler);
    let per_epoch = batches_per_epoch(cfg, train);
    let warmup_config = GroupLossConfig {
        iteration_count: 0,
        ..cfg.dynamics
    };

    let mut epochs = Vec::with_capacity(cfg.optimizer.epochs);
    for epoch in 0..cfg.optimizer.epochs {
        let phase = if epoch < cfg.optimizer.warmup_epochs {
            Phase::Warmup
        } else {
            Phase::GroupLoss
        };
        let mut total = 0.0;
        for _ in 0..per_epoch {
            let mut batch = sampler.sample(&mut rng);
            let loss_config = match phase {
                Phase::Warmup => {
                    batch = batch.without_anchors();
                    &warmup_config
                }
                Phase::GroupLoss => &cfg.dynamics,
            };
            match train_step(&mut encoder, &mut adam, &batch, loss_config, epoch) {
                Ok(loss) => total += loss,
                Err(Error::Numeric { context, reason }) => {
                    let dumped = dump_dir.and_then(|d| dump_batch(&batch, d));
                    let where_ = dumped
                        .map(|p| format!("; batch written to {}", p.display()))
                        .unwrap_or_default();
                    return Err(Error::Numeric {
                        context: format!("epoch {epoch}: {context}"),
                        reason: format!("{reason}{where_}"),
                    });
                }
                Err(e) => return Err(e),
            }
        }
        let mut record = EpochRecord {
            epoch,
            phase,
            lr: adam.schedule.at(epoch),
            mean_loss: total / per_epoch as f64,
            batches: per_epoch,
            recall_at_1: None,
            nmi: None,
        };
        let every = cfg.eval.every;
        if every > 0 && (epoch + 1) % every == 0 {
            let r = evaluate(&encoder, &data.test, &[1], cfg.eval.k_clusters, seeds.eval)?;
            record.recall_at_1 = r.recall(1);
            record.nmi = Some(r.nmi);
        }
        log::info!("epoch {epoch} [{phase}] loss {:.6}", record.mean_loss);
        epochs.push(record);
    }

    let report = evaluate(
        &encoder,
        &data.test,
        &cfg.eval.ks,
        cfg.eval.k_clusters,
        seeds.eval,
    )?;
    Ok(TrainOutcome {
        encoder,
        adam,
        epochs,
        report,
    })
}

/// The per-epoch log as CSV. Missing metrics are written as `NA`.
pub fn metrics_csv(epochs: &[EpochRecord]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
    w.write_record([
        "epoch",
        "phase",
        "lr",
        "mean_loss",
        "batches",
        "recall_at_1",
        "nmi",
    ])
    .expect("in-memory write");
    for e in epochs {
        w.write_record([
            e.epoch.to_string(),
            e.phase.to_string(),
            e.lr.to_string(),
            e.mean_loss.to_string(),
            e.batches.to_string(),
            opt(e.recall_at_1),
            opt(e.nmi),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is UTF-8")
}

pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_FILE: &str = "report.txt";

/// Writes the config, checkpoint, per-epoch metrics and final report of a
/// finished run into `dir`.
pub fn write_run_artifacts(dir: &Path, cfg: &RunConfig, outcome: &TrainOutcome) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(CONFIG_FILE), cfg.to_toml())?;
    save_checkpoint(&outcome.encoder, &outcome.adam, &dir.join(CHECKPOINT_FILE))?;
    std::fs::write(dir.join(METRICS_FILE), metrics_csv(&outcome.epochs))?;
    std::fs::write(dir.join(REPORT_FILE), outcome.report.to_string())?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Anchors,
    ClassesPerBatch,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "anchors" => Ok(SweepAxis::Anchors),
            "classes-per-batch" | "classes_per_batch" => Ok(SweepAxis::ClassesPerBatch),
            other => Err(Error::param(
                "axis",
                format!("expected anchors or classes-per-batch, got {other:?}"),
            )),
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::Anchors => "anchors",
            SweepAxis::ClassesPerBatch => "classes_per_batch",
        })
    }
}

impl SweepAxis {
    pub fn apply(self, cfg: &RunConfig, value: usize) -> RunConfig {
        let mut out = cfg.clone();
        match self {
            SweepAxis::Anchors => out.batch.anchors_per_class = value,
            SweepAxis::ClassesPerBatch => out.batch.classes_per_batch = value,
        }
        out
    }
}

#[derive(Debug)]
pub struct SweepCell {
    pub value: usize,
    pub result: Result<EvalReport>,
}

/// Trains one model per value with the same seed. A failing cell is kept
/// as an error and the sweep moves on.
pub fn sweep(
    cfg: &RunConfig,
    axis: SweepAxis,
    values: &[usize],
    out_dir: Option<&Path>,
) -> Vec<SweepCell> {
    values
        .iter()
        .map(|&value| {
            let cell_cfg = axis.apply(cfg, value);
            let cell_dir = out_dir.map(|d| d.join(format!("{axis}_{value}")));
            let result = cell_cfg
                .validate()
                .and_then(|_| load_data(&cell_cfg))
                .and_then(|data| train(&cell_cfg, &data, cell_dir.as_deref()))
                .and_then(|o| {
                    if let Some(dir) = &cell_dir {
                        write_run_artifacts(dir, &cell_cfg, &o)?;
                    }
                    Ok(o.report)
                });
            if let Err(e) = &result {
                log::warn!("sweep cell {axis}={value} failed: {e}");
            }
            SweepCell { value, result }
        })
        .collect()
}

/// `value,recall_at_1,nmi,delta_recall_pp` with `NA` for failed cells. The
/// delta is measured against the best cell in percentage points.
pub fn sweep_csv(axis: SweepAxis, cells: &[SweepCell]) -> String {
    let best = cells
        .iter()
        .filter_map(|c| c.result.as_ref().ok().and_then(|r| r.recall(1)))
        .fold(f64::NEG_INFINITY, f64::max);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        axis.to_string().as_str(),
        "recall_at_1",
        "nmi",
        "delta_recall_pp",
    ])
    .expect("in-memory write");
    for c in cells {
        let row = match &c.result {
            Ok(r) => {
                let r1 = r.recall(1).unwrap_or(f64::NAN);
                [
                    c.value.to_string(),
                    r1.to_string(),
                    r.nmi.to_string(),
                    (100.0 * (r1 - best)).to_string(),
                ]
            }
            Err(_) => [c.value.to_string(), "NA".into(), "NA".into(), "NA".into()],
        };
        w.write_record(row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is UTF-8")
}

/// Best minus worst Recall@1 over the successful cells, in percentage points.
pub fn sweep_spread_pp(cells: &[SweepCell]) -> Option<f64> {
    let r: Vec<f64> = cells
        .iter()
        .filter_map(|c| c.result.as_ref().ok().and_then(|r| r.recall(1)))
        .collect();
    if r.is_empty() {
        return None;
    }
    let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = r.iter().copied().fold(f64::INFINITY, f64::min);
    Some(100.0 * (max - min))
}

/// Seeded random instances for finite-difference checking of the loss with
/// respect to embeddings, logits and encoder parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckSuite {
    pub instances: usize,
    pub h: f64,
    pub tol: f64,
    /// Fixes the refinement iteration count; otherwise drawn from `0..=3`.
    pub iteration_count: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckSuite {
    fn default() -> Self {
        Self {
            instances: 50,
            h: 1e-6,
            tol: 1e-5,
            iteration_count: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct InstanceResult {
    pub index: usize,
    pub description: String,
    pub report: GradCheckReport,
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub instances: Vec<InstanceResult>,
    pub total: GradCheckReport,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.total.passed
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for inst in &self.instances {
            let r = &inst.report;
            writeln!(
                f,
                "instance={} {} passed={} max_rel_error={:e} checked={} excluded={}",
                inst.index, inst.description, r.passed, r.max_rel_error, r.checked, r.excluded
            )?;
            for c in &r.failures {
                writeln!(
                    f,
                    "  failure block={} row={} col={} analytic={:e} numeric={:e} rel_error={:e}",
                    c.block, c.row, c.col, c.analytic, c.numeric, c.rel_error
                )?;
            }
        }
        let t = &self.total;
        writeln!(f, "passed={}", t.passed)?;
        writeln!(f, "max_rel_error={:e}", t.max_rel_error)?;
        writeln!(f, "checked={}", t.checked)?;
        writeln!(f, "excluded={}", t.excluded)?;
        writeln!(f, "failures={}", t.failures.len())
    }
}

fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .expect("finite samples")
}

pub fn run_gradcheck_suite(suite: &GradCheckSuite) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(suite.seed);
    let mut instances = Vec::with_capacity(suite.instances);
    let mut total = GradCheckReport::empty();
    for index in 0..suite.instances {
        let n = rng.random_range(4..=8);
        let m = rng.random_range(2..=4);
        // two-dimensional rows correlate at exactly ±1, which leaves shifted similarities
        // made of rounding noise; finite differences are meaningless there
        let d = rng.random_range(3..=6);
        let config = GroupLossConfig {
            iteration_count: suite
                .iteration_count
                .unwrap_or_else(|| rng.random_range(0..=3)),
            temperature: rng.random_range(0.5..2.0),
            negative_mode: if rng.random_bool(0.25) {
                NegativeMode::Shift
            } else {
                NegativeMode::Clamp
            },
            loss: if rng.random_bool(0.25) {
                LossKind::PairwiseKl
            } else {
                LossKind::CrossEntropy
            },
        };
        // consecutive pairs share a class so the pairwise objective always has terms
        let labels: Vec<usize> = (0..n).map(|i| (i / 2) % m).collect();
        let anchors = if rng.random_bool(0.5) {
            AnchorSpec::new([rng.random_range(0..n)], labels.clone())
        } else {
            Ok(AnchorSpec::none(labels.clone()))
        }
        .expect("anchor index inside the batch");

        let direct = GroupLossObjective {
            embeddings: random_matrix(&mut rng, n, d),
            logits: random_matrix(&mut rng, n, m),
            anchors: anchors.clone(),
            config,
        };
        let d_in = rng.random_range(2..=4);
        let arch = Architecture {
            hidden: vec![rng.random_range(2..=5)],
            embedding_dim: d,
            activation: Activation::Relu,
        };
        let through_encoder =
            MlpEncoder::new(d_in, &arch, m, rng.random()).map(|encoder| EncoderObjective {
                encoder,
                inputs: random_matrix(&mut rng, n, d_in),
                anchors,
                config,
            });

        let mut report = grad_check(&direct, suite.h, suite.tol);
        match through_encoder {
            Ok(obj) => report = report.merge(grad_check(&obj, suite.h, suite.tol)),
            Err(e) => {
                log::error!("instance {index}: could not build encoder: {e}");
                report.passed = false;
            }
        }
        let description = format!(
            "n={n} m={m} d={d} iterations={} temperature={:.3} negative_mode={} loss={:?} anchors={}",
            config.iteration_count,
            config.temperature,
            config.negative_mode,
            config.loss,
            direct.anchors.num_anchors()
        );
        total = total.merge(report.clone());
        instances.push(InstanceResult {
            index,
            description,
            report,
        });
    }
    SuiteReport { instances, total }
}
