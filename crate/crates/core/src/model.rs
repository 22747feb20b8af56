//! MLP encoder with a linear classification head, Adam, the training step,
//! and checkpoint files.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{self, Evaluation, GroupLossConfig, Objective, Tape, Var};
use crate::data::MiniBatch;
use crate::dynamics::AnchorSpec;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "identity" | "linear" => Ok(Activation::Identity),
            other => Err(Error::param(
                "activation",
                format!("expected relu or identity, got {other:?}"),
            )),
        }
    }
}

/// `y = x W + b` with `W` stored as `in × out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Dense {
    /// Weights uniform in `±1/√fan_in`, zero bias.
    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self {
            weight: Matrix::from_raw(fan_in, fan_out, data),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }
}

/// Layer sizes and activation of an [`MlpEncoder`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub activation: Activation,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            hidden: vec![64],
            embedding_dim: 32,
            activation: Activation::Relu,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim < 2 || self.hidden.contains(&0) {
            return Err(Error::param(
                "model",
                "embedding_dim must be at least 2 and hidden sizes positive",
            ));
        }
        Ok(())
    }
}

/// Feed-forward encoder `d_in → hidden… → embedding` followed by a linear
/// head `embedding → classes`. The activation is applied after every hidden
/// layer; the embedding layer and the head are linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpEncoder {
    pub layers: Vec<Dense>,
    pub head: Dense,
    pub activation: Activation,
}

/// Tape handles produced by [`MlpEncoder::record`].
pub struct EncodedVars {
    /// One handle per parameter, in [`MlpEncoder::params`] order.
    pub params: Vec<Var>,
    pub embeddings: Var,
    pub logits: Var,
}

impl MlpEncoder {
    pub fn new(d_in: usize, arch: &Architecture, num_classes: usize, seed: u64) -> Result<Self> {
        arch.validate()?;
        if d_in == 0 || num_classes == 0 {
            return Err(Error::param(
                "model",
                "input width and class count must be positive",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sizes = vec![d_in];
        sizes.extend(&arch.hidden);
        sizes.push(arch.embedding_dim);
        let layers = sizes
            .windows(2)
            .map(|w| Dense::init(w[0], w[1], &mut rng))
            .collect();
        let head = Dense::init(arch.embedding_dim, num_classes, &mut rng);
        Ok(Self {
            layers,
            head,
            activation: arch.activation,
        })
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn embedding_dim(&self) -> usize {
        self.head.fan_in()
    }

    pub fn num_classes(&self) -> usize {
        self.head.fan_out()
    }

    pub fn params(&self) -> Vec<&Matrix> {
        self.layers
            .iter()
            .chain(std::iter::once(&self.head))
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .chain(std::iter::once(&mut self.head))
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.as_slice().len()).sum()
    }

    fn check(&self) -> Result<()> {
        let mut width = self.d_in();
        for (i, l) in self
            .layers
            .iter()
            .chain(std::iter::once(&self.head))
            .enumerate()
        {
            if l.fan_in() != width || l.bias.shape() != (1, l.fan_out()) {
                return Err(Error::Contract(format!(
                    "layer {i} does not chain: expects {width} inputs"
                )));
            }
            width = l.fan_out();
        }
        Ok(())
    }

    /// Records the forward pass on `tape` starting from the `inputs` node.
    pub fn record(&self, tape: &mut Tape, inputs: Var) -> Result<EncodedVars> {
        let width = tape.value(inputs).cols();
        if width != self.d_in() {
            return Err(Error::shape(
                "encode",
                format!("{} input columns", self.d_in()),
                format!("{width}"),
            ));
        }
        let mut params = Vec::with_capacity(2 * (self.layers.len() + 1));
        let mut h = inputs;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = tape.leaf(layer.weight.clone());
            let b = tape.leaf(layer.bias.clone());
            params.extend([w, b]);
            let z = tape.matmul(h, w)?;
            h = tape.add_row_bias(z, b)?;
            if i < last && self.activation == Activation::Relu {
                h = tape.relu(h);
            }
        }
        let w = tape.leaf(self.head.weight.clone());
        let b = tape.leaf(self.head.bias.clone());
        params.extend([w, b]);
        let z = tape.matmul(h, w)?;
        let logits = tape.add_row_bias(z, b)?;
        Ok(EncodedVars {
            params,
            embeddings: h,
            logits,
        })
    }

    /// Embeddings and logits for `inputs`.
    pub fn encode(&self, inputs: &Matrix) -> Result<(Matrix, Matrix)> {
        let mut tape = Tape::new();
        let x = tape.leaf(inputs.clone());
        let vars = self.record(&mut tape, x)?;
        Ok((
            tape.value(vars.embeddings).clone(),
            tape.value(vars.logits).clone(),
        ))
    }

    pub fn embed(&self, inputs: &Matrix) -> Result<Matrix> {
        Ok(self.encode(inputs)?.0)
    }
}

/// Piecewise-constant learning rate: `lr` until `decay_epoch`, then `lr × decay_factor`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrSchedule {
    pub lr: f64,
    pub decay_epoch: Option<usize>,
    pub decay_factor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            decay_epoch: Some(30),
            decay_factor: 0.1,
        }
    }
}

impl LrSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        match self.decay_epoch {
            Some(e) if epoch >= e => self.lr * self.decay_factor,
            _ => self.lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<Matrix>,
    pub second_moment: Vec<Matrix>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
}

impl AdamState {
    pub fn new(encoder: &MlpEncoder, schedule: LrSchedule, weight_decay: f64) -> Self {
        let zeros = || {
            encoder
                .params()
                .iter()
                .map(|p| Matrix::zeros(p.rows(), p.cols()))
                .collect()
        };
        Self {
            first_moment: zeros(),
            second_moment: zeros(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay,
            schedule,
        }
    }

    /// One Adam update of `params` with `grads` at learning rate `lr`.
    /// L2 regularisation, when enabled, is folded into the gradient.
    pub fn apply(&mut self, params: &mut [&mut Matrix], grads: &[Matrix], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(Error::Contract(format!(
                "{} parameters, {} gradients, {} moment slots",
                params.len(),
                grads.len(),
                self.first_moment.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(
            self.first_moment
                .iter_mut()
                .zip(self.second_moment.iter_mut()),
        ) {
            if p.shape() != g.shape() || m.shape() != g.shape() {
                return Err(Error::shape(
                    "adam",
                    format!("{:?}", p.shape()),
                    format!("{:?}", g.shape()),
                ));
            }
            let (ps, gs) = (p.as_mut_slice(), g.as_slice());
            let (ms, vs) = (m.as_mut_slice(), v.as_mut_slice());
            for k in 0..ps.len() {
                let grad = gs[k] + self.weight_decay * ps[k];
                ms[k] = self.beta1 * ms[k] + (1.0 - self.beta1) * grad;
                vs[k] = self.beta2 * vs[k] + (1.0 - self.beta2) * grad * grad;
                let m_hat = ms[k] / c1;
                let v_hat = vs[k] / c2;
                ps[k] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// Loss and parameter gradients of the group loss on one batch.
pub fn loss_and_gradients(
    encoder: &MlpEncoder,
    batch: &MiniBatch,
    config: &GroupLossConfig,
) -> Result<(f64, Vec<Matrix>)> {
    let mut tape = Tape::new();
    let x = tape.leaf(batch.features.clone());
    let vars = encoder.record(&mut tape, x)?;
    let loss = autograd::record_group_loss(
        &mut tape,
        vars.embeddings,
        vars.logits,
        &batch.anchors,
        config,
    )?;
    let value = tape.value(loss)[(0, 0)];
    if !value.is_finite() {
        return Err(Error::numeric("train_step", format!("loss is {value}")));
    }
    let grads = tape.backward(loss)?;
    Ok((value, vars.params.iter().map(|&p| grads.get(p)).collect()))
}

/// encode → group loss → backward → Adam. Returns the loss before the
/// update. Parameters are left untouched if the loss or any gradient is
/// not finite.
pub fn train_step(
    encoder: &mut MlpEncoder,
    adam: &mut AdamState,
    batch: &MiniBatch,
    config: &GroupLossConfig,
    epoch: usize,
) -> Result<f64> {
    encoder.check()?;
    let (loss, grads) = loss_and_gradients(encoder, batch, config)?;
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::numeric(
            "train_step",
            format!("non-finite gradient for parameter {i}"),
        ));
    }
    let lr = adam.schedule.at(epoch);
    let mut params = encoder.params_mut();
    adam.apply(&mut params, &grads, lr)?;
    if encoder.params().iter().any(|p| !p.is_finite()) {
        return Err(Error::numeric("train_step", "parameters became non-finite"));
    }
    Ok(loss)
}

/// Group loss as a function of every encoder parameter, for [`autograd::grad_check`].
pub struct EncoderObjective {
    pub encoder: MlpEncoder,
    pub inputs: Matrix,
    pub anchors: AnchorSpec,
    pub config: GroupLossConfig,
}

impl EncoderObjective {
    fn with_params(&self, blocks: &[Matrix]) -> MlpEncoder {
        let mut enc = self.encoder.clone();
        for (p, b) in enc.params_mut().into_iter().zip(blocks) {
            *p = b.clone();
        }
        enc
    }

    fn run(&self, blocks: &[Matrix]) -> Result<(Tape, Vec<Var>, Var)> {
        let enc = self.with_params(blocks);
        let mut tape = Tape::new();
        let x = tape.leaf(self.inputs.clone());
        let vars = enc.record(&mut tape, x)?;
        let loss = autograd::record_group_loss(
            &mut tape,
            vars.embeddings,
            vars.logits,
            &self.anchors,
            &self.config,
        )?;
        Ok((tape, vars.params, loss))
    }
}

impl Objective for EncoderObjective {
    fn point(&self) -> Vec<(String, Matrix)> {
        let n = self.encoder.layers.len();
        self.encoder
            .params()
            .into_iter()
            .enumerate()
            .map(|(i, p)| {
                let layer = if i / 2 == n {
                    "head".to_string()
                } else {
                    format!("layer{}", i / 2)
                };
                let kind = if i % 2 == 0 { "weight" } else { "bias" };
                (format!("{layer}.{kind}"), p.clone())
            })
            .collect()
    }

    fn evaluate(&self, blocks: &[Matrix]) -> Result<Evaluation> {
        let (tape, _, loss) = self.run(blocks)?;
        Ok(Evaluation {
            value: tape.value(loss)[(0, 0)],
            kinks: tape.kink_signature(),
        })
    }

    fn gradient(&self, blocks: &[Matrix]) -> Result<Vec<Matrix>> {
        let (tape, params, loss) = self.run(blocks)?;
        let grads = tape.backward(loss)?;
        Ok(params.iter().map(|&p| grads.get(p)).collect())
    }
}

pub const CHECKPOINT_SCHEMA: &str = "grouploss-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema: String,
    pub schema_version: u32,
    /// Crate version that wrote the file; informational only.
    pub writer: String,
    pub encoder: MlpEncoder,
    pub adam: AdamState,
}

pub fn save_checkpoint(encoder: &MlpEncoder, adam: &AdamState, path: &Path) -> Result<()> {
    let ckpt = Checkpoint {
        schema: CHECKPOINT_SCHEMA.to_string(),
        schema_version: CHECKPOINT_VERSION,
        writer: env!("CARGO_PKG_VERSION").to_string(),
        encoder: encoder.clone(),
        adam: adam.clone(),
    };
    let text = serde_json::to_string_pretty(&ckpt).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(MlpEncoder, AdamState)> {
    let fail = |reason: String| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| fail(format!("malformed: {e}")))?;
    match value.get("schema").and_then(|s| s.as_str()) {
        Some(CHECKPOINT_SCHEMA) => {}
        other => return Err(fail(format!("unknown schema tag {other:?}"))),
    }
    match value.get("schema_version").and_then(|v| v.as_u64()) {
        Some(v) if v == CHECKPOINT_VERSION as u64 => {}
        other => {
            return Err(fail(format!(
                "schema version {other:?} is not supported (expected {CHECKPOINT_VERSION})"
            )))
        }
    }
    let ckpt: Checkpoint =
        serde_json::from_value(value).map_err(|e| fail(format!("invalid contents: {e}")))?;
    ckpt.encoder.check().map_err(|e| fail(e.to_string()))?;
    let slots = ckpt.encoder.params().len();
    if ckpt.adam.first_moment.len() != slots || ckpt.adam.second_moment.len() != slots {
        return Err(fail("optimizer state does not match the encoder".into()));
    }
    Ok((ckpt.encoder, ckpt.adam))
}
