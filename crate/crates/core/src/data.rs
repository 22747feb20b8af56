//! Datasets, the class-balanced group sampler, and a Gaussian blob generator.
//!
//! Table format (UTF-8, comma separated, one header row):
//!
//! ```text
//! id,label,f0,f1,...,f{d-1}
//! a17,3,0.25,-1.5,...
//! ```

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dynamics::AnchorSpec;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Standard deviation of the per-dimension class means drawn by [`make_blobs`].
pub const BLOB_CENTER_SCALE: f64 = 1.0;
pub const DEFAULT_BLOB_SPREAD: f64 = 0.8;
const BLOB_MAX_RETRIES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    All,
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    ids: Vec<String>,
    features: Matrix,
    labels: Vec<usize>,
    class_index: BTreeMap<usize, Vec<usize>>,
    split: Split,
}

impl Dataset {
    pub fn new(
        ids: Vec<String>,
        features: Matrix,
        labels: Vec<usize>,
        split: Split,
    ) -> Result<Self> {
        let n = features.rows();
        if ids.len() != n || labels.len() != n {
            return Err(Error::shape(
                "Dataset::new",
                format!("{n} ids and labels"),
                format!("{} ids, {} labels", ids.len(), labels.len()),
            ));
        }
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        if !features.is_finite() {
            return Err(Error::numeric("Dataset::new", "non-finite features"));
        }
        let mut seen = HashSet::with_capacity(n);
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::Contract(format!("duplicate id {dup:?}")));
        }
        let mut class_index: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &y) in labels.iter().enumerate() {
            class_index.entry(y).or_default().push(i);
        }
        Ok(Self {
            ids,
            features,
            labels,
            class_index,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn class_index(&self) -> &BTreeMap<usize, Vec<usize>> {
        &self.class_index
    }

    /// Sorted class ids present in the dataset.
    pub fn classes(&self) -> Vec<usize> {
        self.class_index.keys().copied().collect()
    }

    pub fn num_classes(&self) -> usize {
        self.class_index.len()
    }

    /// Position of `class` in [`Dataset::classes`]; this is the column of the
    /// classifier head that predicts it.
    pub fn dense_label(&self, class: usize) -> Option<usize> {
        self.class_index.keys().position(|&c| c == class)
    }

    /// Rows whose label is in `classes`, in original order.
    pub fn subset(&self, classes: &BTreeSet<usize>, split: Split) -> Result<Dataset> {
        let rows: Vec<usize> = (0..self.len())
            .filter(|&i| classes.contains(&self.labels[i]))
            .collect();
        let d = self.dim();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in &rows {
            data.extend_from_slice(self.features.row(r));
        }
        Dataset::new(
            rows.iter().map(|&r| self.ids[r].clone()).collect(),
            Matrix::from_raw(rows.len(), d, data),
            rows.iter().map(|&r| self.labels[r]).collect(),
            split,
        )
    }

    /// Class-disjoint split: the first `train_classes` sorted class ids form
    /// the training set, the rest the test set.
    pub fn zero_shot_split(&self, train_classes: usize) -> Result<(Dataset, Dataset)> {
        let classes = self.classes();
        if train_classes == 0 || train_classes >= classes.len() {
            return Err(Error::param(
                "train_classes",
                format!("must be in [1, {}), got {train_classes}", classes.len()),
            ));
        }
        let train: BTreeSet<usize> = classes[..train_classes].iter().copied().collect();
        let test: BTreeSet<usize> = classes[train_classes..].iter().copied().collect();
        assert!(train.is_disjoint(&test));
        Ok((
            self.subset(&train, Split::Train)?,
            self.subset(&test, Split::Test)?,
        ))
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Dataset> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut records = reader.records();

        let header = match records.next() {
            None => return Err(Error::EmptyDataset),
            Some(r) => r.map_err(|e| csv_error(e, 1))?,
        };
        let d = check_header(&header)?;

        let mut ids = Vec::new();
        let mut labels = Vec::new();
        let mut data = Vec::new();
        let mut seen = HashSet::new();
        for record in records {
            let record = record.map_err(|e| csv_error(e, 0))?;
            let line = record.position().map_or(0, |p| p.line() as usize);
            if record.len() != d + 2 {
                return Err(Error::Parse {
                    line,
                    reason: format!("expected {} fields, found {}", d + 2, record.len()),
                });
            }
            let id = record[0].to_string();
            if !seen.insert(id.clone()) {
                return Err(Error::Parse {
                    line,
                    reason: format!("duplicate id {id:?}"),
                });
            }
            let label: usize = record[1].parse().map_err(|_| Error::Parse {
                line,
                reason: format!("label {:?} is not a non-negative integer", &record[1]),
            })?;
            for (k, field) in record.iter().skip(2).enumerate() {
                let v: f64 = field.parse().map_err(|_| Error::Parse {
                    line,
                    reason: format!("feature f{k} = {field:?} is not a number"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        line,
                        reason: format!("feature f{k} is not finite"),
                    });
                }
                data.push(v);
            }
            ids.push(id);
            labels.push(label);
        }
        if ids.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Dataset::new(
            ids,
            Matrix::from_raw(labels.len(), d, data),
            labels,
            Split::All,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_table())?;
        Ok(())
    }

    pub fn to_table(&self) -> String {
        let mut writer = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["id".to_string(), "label".to_string()];
        header.extend((0..self.dim()).map(|k| format!("f{k}")));
        writer.write_record(&header).expect("in-memory write");
        for i in 0..self.len() {
            let mut rec = vec![self.ids[i].clone(), self.labels[i].to_string()];
            // Display for f64 prints the shortest string that parses back exactly
            rec.extend(self.features.row(i).iter().map(|v| v.to_string()));
            writer.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(writer.into_inner().expect("in-memory flush")).expect("utf-8")
    }
}

fn csv_error(e: csv::Error, fallback_line: usize) -> Error {
    let line = e.position().map_or(fallback_line, |p| p.line() as usize);
    Error::Parse {
        line,
        reason: e.to_string(),
    }
}

fn check_header(header: &csv::StringRecord) -> Result<usize> {
    let bad = |reason: String| Error::Parse { line: 1, reason };
    if header.len() < 3 {
        return Err(bad(format!(
            "header needs id, label and at least one feature, found {} columns",
            header.len()
        )));
    }
    if &header[0] != "id" || &header[1] != "label" {
        return Err(bad(format!(
            "header must start with id,label; found {},{}",
            &header[0], &header[1]
        )));
    }
    for (k, name) in header.iter().skip(2).enumerate() {
        if name != format!("f{k}") {
            return Err(bad(format!(
                "column {} should be f{k}, found {name:?}",
                k + 2
            )));
        }
    }
    Ok(header.len() - 2)
}

/// Isotropic Gaussian classes around means drawn from `N(0, BLOB_CENTER_SCALE²)`
/// per dimension, redrawn until every pair of means is at least `4 × spread` apart.
pub fn make_blobs(
    num_classes: usize,
    per_class: usize,
    d_in: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes == 0 || per_class == 0 || d_in == 0 {
        return Err(Error::param(
            "make_blobs",
            "class count, samples per class and dimension must be positive",
        ));
    }
    if !spread.is_finite() || spread < 0.0 {
        return Err(Error::param(
            "spread",
            format!("must be a non-negative finite number, got {spread}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center = Normal::new(0.0, BLOB_CENTER_SCALE).expect("valid normal");
    let min_dist = 4.0 * spread;

    let mut means: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
    let mut retries = 0;
    while means.len() < num_classes {
        let candidate: Vec<f64> = (0..d_in).map(|_| center.sample(&mut rng)).collect();
        let far_enough = means.iter().all(|m| {
            let d2: f64 = m
                .iter()
                .zip(&candidate)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d2.sqrt() >= min_dist
        });
        if far_enough {
            means.push(candidate);
        } else {
            retries += 1;
            if retries > BLOB_MAX_RETRIES {
                return Err(Error::Generation(format!(
                    "could not place {num_classes} means {min_dist} apart in {d_in} dimensions"
                )));
            }
        }
    }

    let noise = Normal::new(0.0, 1.0).expect("valid normal");
    let n = num_classes * per_class;
    let mut data = Vec::with_capacity(n * d_in);
    let mut labels = Vec::with_capacity(n);
    for (class, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            data.extend(mean.iter().map(|&mu| mu + spread * noise.sample(&mut rng)));
            labels.push(class);
        }
    }
    Dataset::new(
        (0..n).map(|i| i.to_string()).collect(),
        Matrix::from_vec(n, d_in, data)?,
        labels,
        Split::All,
    )
}

/// Batch geometry: how many classes, samples per class, and anchors per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BatchGeometry {
    pub classes_per_batch: usize,
    pub samples_per_class: usize,
    pub anchors_per_class: usize,
}

impl Default for BatchGeometry {
    fn default() -> Self {
        Self {
            classes_per_batch: 5,
            samples_per_class: 9,
            anchors_per_class: 1,
        }
    }
}

impl BatchGeometry {
    pub fn batch_size(&self) -> usize {
        self.classes_per_batch * self.samples_per_class
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes_per_batch == 0 || self.samples_per_class == 0 {
            return Err(Error::param(
                "batch",
                "classes_per_batch and samples_per_class must be positive",
            ));
        }
        if self.anchors_per_class >= self.samples_per_class {
            return Err(Error::param(
                "anchors_per_class",
                format!(
                    "must be below samples_per_class ({}), got {}",
                    self.samples_per_class, self.anchors_per_class
                ),
            ));
        }
        Ok(())
    }
}

/// Where a batch came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    /// Raw class ids, in batch order.
    pub classes: Vec<usize>,
    /// Dataset row indices for each chosen class.
    pub rows: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatch {
    pub features: Matrix,
    /// Dense labels (classifier-head columns) of every row.
    pub labels: Vec<usize>,
    pub anchors: AnchorSpec,
    pub provenance: Provenance,
}

impl MiniBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Same batch with no anchors.
    pub fn without_anchors(&self) -> MiniBatch {
        MiniBatch {
            anchors: AnchorSpec::none(self.labels.clone()),
            ..self.clone()
        }
    }

    pub fn to_table(&self) -> String {
        let mut out = String::from("row,dataset_row,class,label,anchor\n");
        let mut i = 0;
        for (class, rows) in self.provenance.classes.iter().zip(&self.provenance.rows) {
            for &r in rows {
                out.push_str(&format!(
                    "{i},{r},{class},{},{}\n",
                    self.labels[i],
                    self.anchors.is_anchor(i)
                ));
                i += 1;
            }
        }
        out
    }
}

/// Draws class-balanced batches from a dataset.
#[derive(Debug, Clone)]
pub struct GroupSampler<'a> {
    dataset: &'a Dataset,
    geometry: BatchGeometry,
    eligible: Vec<usize>,
}

impl<'a> GroupSampler<'a> {
    pub fn new(dataset: &'a Dataset, geometry: BatchGeometry) -> Result<Self> {
        geometry
            .validate()
            .map_err(|e| Error::Sampler(e.to_string()))?;
        let (eligible, short): (Vec<usize>, Vec<usize>) = dataset
            .class_index()
            .iter()
            .map(|(&c, _)| c)
            .partition(|c| dataset.class_index()[c].len() >= geometry.samples_per_class);
        if !short.is_empty() {
            log::warn!(
                "classes {short:?} have fewer than {} samples and are excluded from sampling",
                geometry.samples_per_class
            );
        }
        if eligible.len() < geometry.classes_per_batch {
            return Err(Error::Sampler(format!(
                "need {} classes with at least {} samples, dataset has {}",
                geometry.classes_per_batch,
                geometry.samples_per_class,
                eligible.len()
            )));
        }
        Ok(Self {
            dataset,
            geometry,
            eligible,
        })
    }

    pub fn geometry(&self) -> BatchGeometry {
        self.geometry
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> MiniBatch {
        let g = self.geometry;
        let classes: Vec<usize> = self
            .eligible
            .choose_multiple(rng, g.classes_per_batch)
            .copied()
            .collect();
        let n = g.batch_size();
        let d = self.dataset.dim();
        let mut data = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        let mut anchors = Vec::new();
        let mut rows_per_class = Vec::with_capacity(classes.len());
        for &class in &classes {
            let pool = &self.dataset.class_index()[&class];
            let rows: Vec<usize> = pool
                .choose_multiple(rng, g.samples_per_class)
                .copied()
                .collect();
            let dense = self.dataset.dense_label(class).expect("class from index");
            let base = labels.len();
            let mut slots: Vec<usize> = (0..g.samples_per_class).collect();
            slots.shuffle(rng);
            anchors.extend(slots[..g.anchors_per_class].iter().map(|&s| base + s));
            for &r in &rows {
                data.extend_from_slice(self.dataset.features().row(r));
                labels.push(dense);
            }
            rows_per_class.push(rows);
        }
        MiniBatch {
            features: Matrix::from_raw(n, d, data),
            anchors: AnchorSpec::new(anchors, labels.clone())
                .expect("anchor rows lie inside the batch"),
            labels,
            provenance: Provenance {
                classes,
                rows: rows_per_class,
            },
        }
    }
}

pub fn sample_batch<R: Rng + ?Sized>(
    dataset: &Dataset,
    classes_per_batch: usize,
    samples_per_class: usize,
    anchors_per_class: usize,
    rng: &mut R,
) -> Result<MiniBatch> {
    let sampler = GroupSampler::new(
        dataset,
        BatchGeometry {
            classes_per_batch,
            samples_per_class,
            anchors_per_class,
        },
    )?;
    Ok(sampler.sample(rng))
}
