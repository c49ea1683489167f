//! Dense regressors from the 19 link inputs to `φ` (35 components) and to
//! the metric `g_φ` (28 components, through a Cholesky factor).
//!
//! Both ends of the network are standardised with statistics fitted on the
//! training split. The metric network predicts the lower-triangular factor
//! `L` with its diagonal passed through softplus, so `L Lᵀ` is positive
//! semidefinite by construction.

use std::path::PathBuf;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, ModelKind};
use crate::error::{Error, Result};
use crate::exterior::{AltForm, MetricTensor};
use crate::link::G2Sample;
use crate::nn::{chunked_gradient, shuffled, Activation, Adam, AdamConfig, Mlp, Real};
use crate::par::{self, Execution};
use crate::rng::{item_rng, streams};

pub const INPUT_DIM: usize = 19;
pub const PHI_DIM: usize = 35;
pub const METRIC_DIM: usize = 28;
const N: usize = 7;

/// Variances below this are treated as a constant coordinate.
pub const MIN_VARIANCE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegressorKind {
    Form,
    Metric,
}

impl RegressorKind {
    pub fn outputs(self) -> usize {
        match self {
            RegressorKind::Form => PHI_DIM,
            RegressorKind::Metric => METRIC_DIM,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            RegressorKind::Form => "phi",
            RegressorKind::Metric => "metric",
        }
    }

    fn checkpoint_kind(self) -> ModelKind {
        match self {
            RegressorKind::Form => ModelKind::Phi,
            RegressorKind::Metric => ModelKind::Metric,
        }
    }

    /// Raw training target of a sample: `φ`, or the Cholesky parameters of `g`.
    pub fn target(self, s: &G2Sample) -> Result<Vec<f64>> {
        match self {
            RegressorKind::Form => Ok(s.phi.to_vec()),
            RegressorKind::Metric => Ok(cholesky_params(&s.g)?.to_vec()),
        }
    }
}

/// Per-coordinate standardisation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Coordinates whose variance was clamped to one.
    pub constant: Vec<bool>,
}

impl NormStats {
    /// Fit on `rows` vectors of length `dim`.
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>, dim: usize) -> Result<Self> {
        let mut n = 0usize;
        let mut mean = vec![0.0; dim];
        let mut m2 = vec![0.0; dim];
        for r in rows {
            if r.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, found: r.len() });
            }
            n += 1;
            for k in 0..dim {
                let d = r[k] - mean[k];
                mean[k] += d / n as f64;
                m2[k] += d * (r[k] - mean[k]);
            }
        }
        if n == 0 {
            return Err(Error::InvalidArgument("cannot fit normalisation on an empty set".into()));
        }
        let mut var: Vec<f64> = m2.iter().map(|v| v / n as f64).collect();
        let constant: Vec<bool> = var.iter().map(|&v| v < MIN_VARIANCE).collect();
        for (v, &c) in var.iter_mut().zip(&constant) {
            if c {
                *v = 1.0;
            }
        }
        Ok(Self { mean, var, constant })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
            constant: vec![false; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.var))
            .map(|(v, (m, s))| (v - m) / s.sqrt())
            .collect()
    }

    pub fn denormalize(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .zip(self.mean.iter().zip(&self.var))
            .map(|(v, (m, s))| v * s.sqrt() + m)
            .collect()
    }
}

/// `[x (10), η (7), a, e]` as stored with the sample.
pub fn build_input(s: &G2Sample) -> [f64; INPUT_DIM] {
    s.input19
}

/// Network input for a 19-vector: as is, or with the two patch indices
/// replaced by one-hot blocks of five.
pub fn encode_input(x: &[f64], one_hot: bool) -> Vec<f64> {
    if !one_hot {
        return x.to_vec();
    }
    let mut out = x[..17].to_vec();
    for &p in &x[17..19] {
        let mut block = [0.0; 5];
        block[(p.round() as usize).min(4)] = 1.0;
        out.extend_from_slice(&block);
    }
    out
}

fn encoded_dim(one_hot: bool) -> usize {
    if one_hot {
        27
    } else {
        INPUT_DIM
    }
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] on `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn tri(i: usize, j: usize) -> usize {
    i * (i + 1) / 2 + j
}

/// Cholesky parameters of a lower-triangle metric: the factor `L` row by
/// row with each diagonal entry replaced by its softplus preimage.
pub fn cholesky_params(g: &[f64; METRIC_DIM]) -> Result<[f64; METRIC_DIM]> {
    let m = MetricTensor::from_lower_triangle(N, g)?;
    let l = m
        .matrix()
        .clone()
        .cholesky()
        .ok_or(Error::SingularMetric { det: m.det() })?
        .l();
    let mut out = [0.0; METRIC_DIM];
    for i in 0..N {
        for j in 0..=i {
            out[tri(i, j)] = if i == j { softplus_inv(l[(i, i)]) } else { l[(i, j)] };
        }
    }
    Ok(out)
}

fn factor(params: &[f64]) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(N, N);
    for i in 0..N {
        for j in 0..=i {
            let v = params[tri(i, j)];
            l[(i, j)] = if i == j { softplus(v) } else { v };
        }
    }
    l
}

/// `L Lᵀ` for Cholesky parameters.
pub fn reassemble_metric(params: &[f64]) -> MetricTensor {
    let l = factor(params);
    let g = &l * l.transpose();
    MetricTensor::new((&g + g.transpose()) * 0.5).unwrap()
}

/// Pull `∂F/∂g` (lower-triangle entries as independent variables) back to
/// the Cholesky parameters.
pub fn reassembly_gradient(params: &[f64], dg: &[f64]) -> [f64; METRIC_DIM] {
    let l = factor(params);
    let mut s = DMatrix::zeros(N, N);
    for i in 0..N {
        for j in 0..=i {
            let v = dg[tri(i, j)];
            if i == j {
                s[(i, i)] = v;
            } else {
                s[(i, j)] = 0.5 * v;
                s[(j, i)] = 0.5 * v;
            }
        }
    }
    let dl = 2.0 * s * l;
    let mut out = [0.0; METRIC_DIM];
    for i in 0..N {
        for j in 0..=i {
            out[tri(i, j)] = if i == j { dl[(i, i)] * sigmoid(params[tri(i, i)]) } else { dl[(i, j)] };
        }
    }
    out
}

/// Which quantity the metric model's loss compares.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetricLoss {
    /// Standardised Cholesky parameters against those of the target.
    #[default]
    Cholesky,
    /// Standardised `L Lᵀ` against the standardised target metric.
    Reassembled,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegressorConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// The step size is multiplied by `decay_factor` every `decay_every` epochs.
    pub decay_every: usize,
    pub decay_factor: f64,
    /// Huber transition point in standardised units; infinity gives pure L2.
    pub huber_delta: f64,
    pub one_hot: bool,
    pub metric_loss: MetricLoss,
    pub seed: u64,
    pub exec: Execution,
    /// Where the last finite model is written if training produces NaN.
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        Self {
            hidden: vec![512, 512, 256, 256],
            activation: Activation::Gelu,
            epochs: 150,
            batch: 128,
            lr: 1e-3,
            decay_every: 30,
            decay_factor: 0.5,
            huber_delta: f64::INFINITY,
            one_hot: false,
            metric_loss: MetricLoss::Cholesky,
            seed: 0,
            exec: Execution::Parallel,
            checkpoint_path: None,
        }
    }
}

impl RegressorConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = if self.decay_every == 0 { 0 } else { epoch / self.decay_every };
        self.lr * self.decay_factor.powi(k as i32)
    }
}

/// Network plus the standardisation on both ends.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseModel {
    pub kind: RegressorKind,
    pub net: Mlp<f32>,
    pub input_stats: NormStats,
    pub output_stats: NormStats,
    pub one_hot: bool,
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    one_hot: bool,
    input_constant: Vec<bool>,
    output_constant: Vec<bool>,
}

impl DenseModel {
    /// Raw outputs (denormalised) for a batch of 19-vectors.
    pub fn raw_outputs(&self, inputs: &[[f64; INPUT_DIM]]) -> Vec<Vec<f64>> {
        let x: Vec<f32> = inputs
            .iter()
            .flat_map(|r| self.input_stats.normalize(&encode_input(r, self.one_hot)))
            .map(|v| v as f32)
            .collect();
        let y = self.net.predict(&x, inputs.len());
        y.chunks(self.net.outputs())
            .map(|r| self.output_stats.denormalize(&r.iter().map(|&v| v as f64).collect::<Vec<_>>()))
            .collect()
    }

    pub fn raw_output(&self, input: &[f64; INPUT_DIM]) -> Vec<f64> {
        self.raw_outputs(std::slice::from_ref(input)).pop().unwrap()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_mlp(self.kind.checkpoint_kind(), &self.net);
        ck.norm = [
            self.input_stats.mean.clone(),
            self.input_stats.var.clone(),
            self.output_stats.mean.clone(),
            self.output_stats.var.clone(),
        ];
        ck.metadata = serde_json::to_string(&ModelMeta {
            one_hot: self.one_hot,
            input_constant: self.input_stats.constant.clone(),
            output_constant: self.output_stats.constant.clone(),
        })
        .unwrap();
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let kind = match ck.kind {
            ModelKind::Phi => RegressorKind::Form,
            ModelKind::Metric => RegressorKind::Metric,
            ModelKind::CyCorrection => {
                return Err(Error::Format("checkpoint holds a CY correction network, not a regressor".into()))
            }
        };
        let meta: ModelMeta = serde_json::from_str(&ck.metadata).map_err(|e| Error::Format(e.to_string()))?;
        let net: Mlp<f32> = ck.to_mlp()?;
        let [im, iv, om, ov] = ck.norm.clone();
        if im.len() != net.inputs() || om.len() != net.outputs() || net.outputs() != kind.outputs() {
            return Err(Error::Format("normalisation arrays do not match the network shape".into()));
        }
        Ok(Self {
            kind,
            net,
            input_stats: NormStats { mean: im, var: iv, constant: meta.input_constant },
            output_stats: NormStats { mean: om, var: ov, constant: meta.output_constant },
            one_hot: meta.one_hot,
        })
    }
}

pub fn predict_phi(model: &DenseModel, input: &[f64; INPUT_DIM]) -> AltForm {
    debug_assert_eq!(model.kind, RegressorKind::Form);
    AltForm::from_coeffs(7, 3, model.raw_output(input)).unwrap()
}

pub fn predict_metric(model: &DenseModel, input: &[f64; INPUT_DIM]) -> MetricTensor {
    debug_assert_eq!(model.kind, RegressorKind::Metric);
    reassemble_metric(&model.raw_output(input))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressorEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub train: f64,
    pub validation: f64,
}

pub struct TrainedRegressor {
    pub model: DenseModel,
    pub history: Vec<RegressorEpoch>,
}

impl TrainedRegressor {
    pub fn write_history_csv(&self, w: &mut impl std::io::Write) -> Result<()> {
        writeln!(w, "epoch,lr,train_loss,validation_loss")?;
        for h in &self.history {
            writeln!(w, "{},{:e},{:e},{:e}", h.epoch, h.lr, h.train, h.validation)?;
        }
        Ok(())
    }
}

/// Standardised data and loss definition shared by training and evaluation.
struct Problem {
    kind: RegressorKind,
    metric_loss: MetricLoss,
    huber: f64,
    in_dim: usize,
    out_dim: usize,
    output_stats: NormStats,
    /// Stats of the target metric (reassembled loss only).
    g_stats: Option<NormStats>,
}

struct Batch {
    x: Vec<f64>,
    /// Standardised targets in the space the loss compares.
    y: Vec<f64>,
}

impl Problem {
    fn element(&self, e: f64) -> (f64, f64) {
        if e.abs() <= self.huber {
            (e * e, 2.0 * e)
        } else {
            (2.0 * self.huber * e.abs() - self.huber * self.huber, 2.0 * self.huber * e.signum())
        }
    }

    fn target_dim(&self) -> usize {
        self.out_dim
    }

    fn batch(&self, samples: &[&G2Sample], input_stats: &NormStats, one_hot: bool) -> Result<Batch> {
        let mut x = Vec::with_capacity(samples.len() * self.in_dim);
        let mut y = Vec::with_capacity(samples.len() * self.out_dim);
        for s in samples {
            x.extend(input_stats.normalize(&encode_input(&s.input19, one_hot)));
            match (self.kind, &self.g_stats) {
                (RegressorKind::Metric, Some(gs)) if self.metric_loss == MetricLoss::Reassembled => {
                    y.extend(gs.normalize(&s.g))
                }
                _ => y.extend(self.output_stats.normalize(&self.kind.target(s)?)),
            }
        }
        Ok(Batch { x, y })
    }

    /// Summed loss of `out` (network outputs, standardised) against `y`, and
    /// its gradient with respect to `out`.
    fn row_loss(&self, out: &[f64], y: &[f64], dout: Option<&mut [f64]>) -> f64 {
        match self.g_stats.as_ref().filter(|_| self.metric_loss == MetricLoss::Reassembled) {
            None => {
                let mut total = 0.0;
                match dout {
                    Some(d) => {
                        for k in 0..out.len() {
                            let (l, g) = self.element(out[k] - y[k]);
                            total += l;
                            d[k] = g;
                        }
                    }
                    None => {
                        for k in 0..out.len() {
                            total += self.element(out[k] - y[k]).0;
                        }
                    }
                }
                total
            }
            Some(gs) => {
                let raw = self.output_stats.denormalize(out);
                let g = reassemble_metric(&raw).lower_triangle();
                let gn = gs.normalize(&g);
                let mut total = 0.0;
                let mut dgn = [0.0; METRIC_DIM];
                for k in 0..METRIC_DIM {
                    let (l, d) = self.element(gn[k] - y[k]);
                    total += l;
                    dgn[k] = d / gs.var[k].sqrt();
                }
                if let Some(d) = dout {
                    let draw = reassembly_gradient(&raw, &dgn);
                    for k in 0..METRIC_DIM {
                        d[k] = draw[k] * self.output_stats.var[k].sqrt();
                    }
                }
                total
            }
        }
    }

    /// Mean loss per component and its parameter gradient.
    fn loss_and_gradient<T: Real>(&self, net: &Mlp<T>, b: &Batch, exec: Execution) -> (f64, Vec<T>) {
        let rows = b.x.len() / self.in_dim;
        let scale = 1.0 / (rows * self.target_dim()) as f64;
        let (loss, mut grad) = chunked_gradient(exec, rows, net.param_count(), |range, grad: &mut [T]| {
            let x: Vec<T> = b.x[range.start * self.in_dim..range.end * self.in_dim].iter().map(|&v| T::of(v)).collect();
            let tape = net.forward(&x, range.len());
            let mut dout = vec![T::zero(); range.len() * self.out_dim];
            let mut buf = vec![0.0; self.out_dim];
            let mut total = 0.0;
            for (r, row) in range.clone().enumerate() {
                let out: Vec<f64> = tape.output[r * self.out_dim..(r + 1) * self.out_dim].iter().map(|v| v.f64()).collect();
                let y = &b.y[row * self.target_dim()..(row + 1) * self.target_dim()];
                total += self.row_loss(&out, y, Some(&mut buf));
                for k in 0..self.out_dim {
                    dout[r * self.out_dim + k] = T::of(buf[k] * scale);
                }
            }
            net.backward(&tape, &dout, grad);
            total
        });
        if rows == 0 {
            grad.iter_mut().for_each(|g| *g = T::zero());
        }
        (loss * scale, grad)
    }

    fn loss<T: Real>(&self, net: &Mlp<T>, b: &Batch, exec: Execution) -> f64 {
        let rows = b.x.len() / self.in_dim;
        if rows == 0 {
            return f64::NAN;
        }
        let parts = par::map_chunks(exec, rows, 512, |range| {
            let x: Vec<T> = b.x[range.start * self.in_dim..range.end * self.in_dim].iter().map(|&v| T::of(v)).collect();
            let out = net.predict(&x, range.len());
            let mut total = 0.0;
            for (r, row) in range.enumerate() {
                let o: Vec<f64> = out[r * self.out_dim..(r + 1) * self.out_dim].iter().map(|v| v.f64()).collect();
                total += self.row_loss(&o, &b.y[row * self.target_dim()..(row + 1) * self.target_dim()], None);
            }
            total
        });
        parts.iter().sum::<f64>() / (rows * self.target_dim()) as f64
    }
}

/// Input and output statistics fitted on `train` only.
pub fn fit_stats(kind: RegressorKind, train: &[&G2Sample], one_hot: bool) -> Result<(NormStats, NormStats)> {
    let inputs: Vec<Vec<f64>> = train.iter().map(|s| encode_input(&s.input19, one_hot)).collect();
    let targets: Vec<Vec<f64>> = train.iter().map(|s| kind.target(s)).collect::<Result<_>>()?;
    Ok((
        NormStats::fit(inputs.iter().map(Vec::as_slice), encoded_dim(one_hot))?,
        NormStats::fit(targets.iter().map(Vec::as_slice), kind.outputs())?,
    ))
}

fn problem(kind: RegressorKind, train: &[&G2Sample], output_stats: NormStats, config: &RegressorConfig) -> Result<Problem> {
    let g_stats = if kind == RegressorKind::Metric && config.metric_loss == MetricLoss::Reassembled {
        Some(NormStats::fit(train.iter().map(|s| &s.g[..]), METRIC_DIM)?)
    } else {
        None
    };
    Ok(Problem {
        kind,
        metric_loss: config.metric_loss,
        huber: config.huber_delta,
        in_dim: encoded_dim(config.one_hot),
        out_dim: kind.outputs(),
        output_stats,
        g_stats,
    })
}

/// Train a regressor on `train`, reporting the validation loss every epoch.
/// Losses are mean squared errors per component in standardised units.
pub fn train(
    kind: RegressorKind,
    train: &[&G2Sample],
    validation: &[&G2Sample],
    config: &RegressorConfig,
) -> Result<TrainedRegressor> {
    if train.is_empty() || config.batch == 0 {
        return Err(Error::InvalidArgument("need a nonempty training set and batch size".into()));
    }
    let (input_stats, output_stats) = fit_stats(kind, train, config.one_hot)?;
    for (name, st) in [("input", &input_stats), ("output", &output_stats)] {
        let flagged: Vec<usize> = st.constant.iter().enumerate().filter(|(_, &c)| c).map(|(i, _)| i).collect();
        if !flagged.is_empty() {
            log::info!("{} {name} coordinates are constant on the training split: {flagged:?}", kind.label());
        }
    }
    let prob = problem(kind, train, output_stats.clone(), config)?;
    let train_data = prob.batch(train, &input_stats, config.one_hot)?;
    let val_data = prob.batch(validation, &input_stats, config.one_hot)?;

    let mut widths = vec![prob.in_dim];
    widths.extend(&config.hidden);
    widths.push(prob.out_dim);
    let mut net: Mlp<f32> =
        Mlp::glorot(&widths, config.activation, false, &mut item_rng(config.seed, streams::INIT, 1))?;
    let mut opt = Adam::new(net.param_count(), AdamConfig::default());
    let mut history = Vec::with_capacity(config.epochs);
    let model_of = |net: &Mlp<f32>| DenseModel {
        kind,
        net: net.clone(),
        input_stats: input_stats.clone(),
        output_stats: output_stats.clone(),
        one_hot: config.one_hot,
    };

    let rows = train.len();
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let order = shuffled(rows, &mut item_rng(config.seed, streams::SHUFFLE, 1 << 32 | epoch as u64));
        let last_good = net.clone();
        let mut sum = 0.0;
        for idx in order.chunks(config.batch) {
            let b = Batch {
                x: idx.iter().flat_map(|&i| train_data.x[i * prob.in_dim..(i + 1) * prob.in_dim].iter().copied()).collect(),
                y: idx
                    .iter()
                    .flat_map(|&i| train_data.y[i * prob.target_dim()..(i + 1) * prob.target_dim()].iter().copied())
                    .collect(),
            };
            let (loss, grad) = prob.loss_and_gradient(&net, &b, config.exec);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                if let Some(path) = &config.checkpoint_path {
                    model_of(&last_good).checkpoint().save(path)?;
                    log::error!("non-finite loss at epoch {epoch}; last finite model written to {}", path.display());
                }
                return Err(Error::Diverged { epoch, loss });
            }
            sum += loss * idx.len() as f64;
            opt.step(&mut net.params, &grad, lr);
        }
        let validation_loss = if validation.is_empty() { f64::NAN } else { prob.loss(&net, &val_data, config.exec) };
        let rec = RegressorEpoch {
            epoch: epoch + 1,
            lr,
            train: sum / rows as f64,
            validation: validation_loss,
        };
        log::info!(
            "{} epoch {}: train {:.3e} validation {:.3e}",
            kind.label(),
            rec.epoch,
            rec.train,
            rec.validation
        );
        history.push(rec);
    }
    Ok(TrainedRegressor {
        model: model_of(&net),
        history,
    })
}

/// Worst relative difference between the backpropagated gradient and
/// central differences over every `stride`-th parameter of a fresh f64
/// network built from `config` and trained on nothing.
pub fn gradient_check(kind: RegressorKind, samples: &[&G2Sample], config: &RegressorConfig, stride: usize) -> Result<f64> {
    let (input_stats, output_stats) = fit_stats(kind, samples, config.one_hot)?;
    let prob = problem(kind, samples, output_stats, config)?;
    let b = prob.batch(samples, &input_stats, config.one_hot)?;
    let mut widths = vec![prob.in_dim];
    widths.extend(&config.hidden);
    widths.push(prob.out_dim);
    let net: Mlp<f64> = Mlp::glorot(&widths, config.activation, false, &mut item_rng(config.seed, streams::INIT, 1))?;
    let (_, grad) = prob.loss_and_gradient(&net, &b, Execution::Serial);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for k in (0..net.param_count()).step_by(stride.max(1)) {
        let (mut up, mut dn) = (net.clone(), net.clone());
        up.params[k] += h;
        dn.params[k] -= h;
        let fd = (prob.loss(&up, &b, Execution::Serial) - prob.loss(&dn, &b, Execution::Serial)) / (2.0 * h);
        worst = worst.max((fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-6));
    }
    Ok(worst)
}

/// Mean squared error per component in the model's standardised output space.
pub fn normalized_mse(model: &DenseModel, samples: &[&G2Sample], exec: Execution) -> Result<f64> {
    let pred = predictions(model, samples, exec);
    let mut total = 0.0;
    for (s, p) in samples.iter().zip(&pred) {
        let t = model.output_stats.normalize(&model.kind.target(s)?);
        let q = model.output_stats.normalize(p);
        total += t.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(total / (samples.len() * model.kind.outputs()) as f64)
}

/// Raw predictions, evaluated in parallel blocks.
pub fn predictions(model: &DenseModel, samples: &[&G2Sample], exec: Execution) -> Vec<Vec<f64>> {
    par::map_chunks(exec, samples.len(), 512, |range| {
        let inputs: Vec<[f64; INPUT_DIM]> = samples[range].iter().map(|s| s.input19).collect();
        model.raw_outputs(&inputs)
    })
    .into_iter()
    .flatten()
    .collect()
}

/// Predicted metrics (lower triangles) for the metric model.
pub fn predicted_metrics(model: &DenseModel, samples: &[&G2Sample], exec: Execution) -> Vec<MetricTensor> {
    predictions(model, samples, exec).iter().map(|p| reassemble_metric(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::link::{build_samples, KahlerSource, LinkStructure};
    use crate::quintic::{sample_points, Patch};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fake_samples(n: usize, seed: u64) -> Vec<G2Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let mut input19 = [0.0; 19];
                for v in &mut input19[..17] {
                    *v = rng.random_range(-1.0..1.0);
                }
                input19[17] = (i % 5) as f64;
                input19[18] = ((i + 1) % 5) as f64;
                let phi: [f64; 35] = std::array::from_fn(|k| {
                    input19[..17].iter().enumerate().map(|(j, v)| v * ((j * 7 + k * 3) % 11) as f64 / 11.0).sum::<f64>()
                        + 0.1 * k as f64
                });
                let a = DMatrix::from_fn(7, 7, |r, c| if r == c { 1.0 } else { 0.1 * input19[(r + c) % 17] });
                let g = MetricTensor::new(&a * a.transpose()).unwrap().lower_triangle();
                G2Sample {
                    phi,
                    psi: [0.0; 35],
                    g: g.try_into().unwrap(),
                    vol_g2: 1.0,
                    vol_cy: 1.0,
                    eta: [0.0; 7],
                    input19,
                    patch: Patch::new(i % 5, (i + 1) % 5).unwrap(),
                    base_id: i as u64,
                    theta: 0.0,
                }
            })
            .collect()
    }

    fn small_config(seed: u64) -> RegressorConfig {
        RegressorConfig {
            hidden: vec![8],
            epochs: 1,
            batch: 16,
            seed,
            exec: Execution::Serial,
            ..Default::default()
        }
    }

    #[test]
    fn softplus_roundtrip() {
        for &y in &[1e-6, 0.3, 1.0, 7.5, 40.0] {
            assert!((softplus(softplus_inv(y)) - y).abs() < 1e-12 * y.max(1.0));
        }
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
    }

    #[test]
    fn identity_factor_gives_identity_metric() {
        let mut p = [0.0; METRIC_DIM];
        for i in 0..N {
            p[tri(i, i)] = softplus_inv(1.0);
        }
        let g = reassemble_metric(&p);
        assert!((g.matrix() - DMatrix::<f64>::identity(7, 7)).amax() < 1e-15);
    }

    #[test]
    fn reassembly_matches_dense_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let p: [f64; METRIC_DIM] = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
            let l = DMatrix::from_fn(7, 7, |i, j| match i.cmp(&j) {
                std::cmp::Ordering::Less => 0.0,
                std::cmp::Ordering::Equal => (1.0 + p[tri(i, i)].exp()).ln(),
                std::cmp::Ordering::Greater => p[tri(i, j)],
            });
            let mut dense = DMatrix::zeros(7, 7);
            for i in 0..7 {
                for j in 0..7 {
                    for k in 0..7 {
                        dense[(i, j)] += l[(i, k)] * l[(j, k)];
                    }
                }
            }
            assert!((reassemble_metric(&p).matrix() - dense).amax() < 1e-12);
            assert!(reassemble_metric(&p).is_positive_definite());
        }
    }

    #[test]
    fn cholesky_targets_reassemble_to_metric() {
        for s in fake_samples(50, 1) {
            let back = reassemble_metric(&cholesky_params(&s.g).unwrap()).lower_triangle();
            for (a, b) in back.iter().zip(&s.g) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn reassembly_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p: [f64; METRIC_DIM] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let w: [f64; METRIC_DIM] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let f = |q: &[f64]| reassemble_metric(q).lower_triangle().iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        let an = reassembly_gradient(&p, &w);
        for k in 0..METRIC_DIM {
            let h = 1e-6;
            let mut up = p;
            let mut dn = p;
            up[k] += h;
            dn[k] -= h;
            let fd = (f(&up) - f(&dn)) / (2.0 * h);
            assert!((fd - an[k]).abs() < 1e-7 * (1.0 + fd.abs()), "{k}: {fd} vs {}", an[k]);
        }
    }

    #[test]
    fn norm_stats_roundtrip_and_constants() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 3.0, -2.0 * i as f64 + 0.5]).collect();
        let st = NormStats::fit(rows.iter().map(Vec::as_slice), 3).unwrap();
        assert_eq!(st.constant, vec![false, true, false]);
        assert_eq!(st.var[1], 1.0);
        for r in &rows {
            let back = st.denormalize(&st.normalize(r));
            for (a, b) in back.iter().zip(r) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let z: Vec<Vec<f64>> = rows.iter().map(|r| st.normalize(r)).collect();
        let mean0: f64 = z.iter().map(|r| r[0]).sum::<f64>() / 10.0;
        let var0: f64 = z.iter().map(|r| r[0] * r[0]).sum::<f64>() / 10.0;
        assert!(mean0.abs() < 1e-12 && (var0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stats_are_fitted_on_training_split_only() {
        let all = fake_samples(200, 2);
        let train: Vec<&G2Sample> = all[..150].iter().collect();
        let both: Vec<&G2Sample> = all.iter().collect();
        let (a_in, a_out) = fit_stats(RegressorKind::Form, &train, false).unwrap();
        let (b_in, b_out) = fit_stats(RegressorKind::Form, &both, false).unwrap();
        assert_ne!(a_in, b_in);
        assert_ne!(a_out, b_out);
        let cfg = RegressorConfig { epochs: 0, ..small_config(1) };
        let m = super::train(RegressorKind::Form, &train, &both[150..], &cfg).unwrap().model;
        assert_eq!(m.input_stats, a_in);
        assert_eq!(m.output_stats, a_out);
    }

    #[test]
    fn one_hot_encoding() {
        let mut x = [0.5; 19];
        x[17] = 2.0;
        x[18] = 4.0;
        let e = encode_input(&x, true);
        assert_eq!(e.len(), 27);
        assert_eq!(&e[17..22], &[0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(&e[22..27], &[0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(encode_input(&x, false), x.to_vec());
    }

    fn check_gradient(kind: RegressorKind, metric_loss: MetricLoss, huber: f64) {
        let data = fake_samples(6, 9);
        let refs: Vec<&G2Sample> = data.iter().collect();
        let cfg = RegressorConfig { metric_loss, huber_delta: huber, ..small_config(3) };
        let (input_stats, output_stats) = fit_stats(kind, &refs, false).unwrap();
        let prob = problem(kind, &refs, output_stats, &cfg).unwrap();
        let b = prob.batch(&refs[..3], &input_stats, false).unwrap();
        let net: Mlp<f64> =
            Mlp::glorot(&[19, 8, kind.outputs()], Activation::Gelu, false, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let (loss, grad) = prob.loss_and_gradient(&net, &b, Execution::Serial);
        assert!((loss - prob.loss(&net, &b, Execution::Serial)).abs() < 1e-12 * loss.max(1.0));
        let mut worst: f64 = 0.0;
        for k in (0..net.param_count()).step_by(7) {
            let h = 1e-6;
            let mut up = net.clone();
            let mut dn = net.clone();
            up.params[k] += h;
            dn.params[k] -= h;
            let fd = (prob.loss(&up, &b, Execution::Serial) - prob.loss(&dn, &b, Execution::Serial)) / (2.0 * h);
            let scale = fd.abs().max(grad[k].abs()).max(1e-6);
            worst = worst.max((fd - grad[k]).abs() / scale);
        }
        assert!(worst < 1e-4, "{kind:?} {metric_loss:?}: relative error {worst:e}");
    }

    #[test]
    fn public_gradient_check_agrees() {
        let data = fake_samples(5, 2);
        let refs: Vec<&G2Sample> = data.iter().collect();
        for kind in [RegressorKind::Form, RegressorKind::Metric] {
            let worst = gradient_check(kind, &refs, &small_config(4), 5).unwrap();
            assert!(worst < 1e-4, "{kind:?} {worst:e}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        check_gradient(RegressorKind::Form, MetricLoss::Cholesky, f64::INFINITY);
        check_gradient(RegressorKind::Form, MetricLoss::Cholesky, 0.3);
        check_gradient(RegressorKind::Metric, MetricLoss::Cholesky, f64::INFINITY);
        check_gradient(RegressorKind::Metric, MetricLoss::Reassembled, f64::INFINITY);
    }

    #[test]
    fn step_decay_schedule() {
        let c = RegressorConfig::default();
        assert_eq!(c.lr_at(0), 1e-3);
        assert_eq!(c.lr_at(29), 1e-3);
        assert_eq!(c.lr_at(30), 5e-4);
        assert_eq!(c.lr_at(149), 6.25e-5);
    }

    #[test]
    fn serial_training_is_reproducible() {
        let data = fake_samples(64, 3);
        let refs: Vec<&G2Sample> = data.iter().collect();
        let cfg = RegressorConfig { epochs: 3, ..small_config(11) };
        let a = super::train(RegressorKind::Metric, &refs[..48], &refs[48..], &cfg).unwrap();
        let b = super::train(RegressorKind::Metric, &refs[..48], &refs[48..], &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.history, b.history);
        let p = super::train(RegressorKind::Metric, &refs[..48], &refs[48..], &RegressorConfig { exec: Execution::Parallel, ..cfg })
            .unwrap();
        assert_eq!(a.model, p.model);
    }

    #[test]
    fn checkpoint_roundtrip_preserves_predictions() {
        let data = fake_samples(40, 4);
        let refs: Vec<&G2Sample> = data.iter().collect();
        let cfg = RegressorConfig { epochs: 2, one_hot: true, ..small_config(2) };
        let m = super::train(RegressorKind::Form, &refs, &[], &cfg).unwrap().model;
        let mut buf = Vec::new();
        m.checkpoint().write_to(&mut buf).unwrap();
        let back = DenseModel::from_checkpoint(&Checkpoint::read_from(&mut buf.as_slice()).unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(predict_phi(&back, &data[0].input19).coeffs(), predict_phi(&m, &data[0].input19).coeffs());
    }

    #[test]
    fn inputs_follow_the_sample_layout() {
        let (pts, _) = sample_points(3, 5, Execution::Serial).unwrap();
        let st = LinkStructure { source: KahlerSource::FubiniStudy, c_eta: 1.0, lambda: 1.0 };
        let (s, _) = build_samples(&pts, 2, 5, &st, Execution::Serial).unwrap();
        let (a, b) = (build_input(&s[0]), build_input(&s[1]));
        assert_eq!(a.len(), 19);
        assert_ne!(a[..10], b[..10]);
        assert_eq!(a[17..], b[17..]);
        assert_eq!(a[17], s[0].patch.a as f64);
        assert_eq!(a[18], s[0].patch.e as f64);
        assert!(a[17..].iter().all(|v| v.fract() == 0.0 && (0.0..5.0).contains(v)));
    }
}
