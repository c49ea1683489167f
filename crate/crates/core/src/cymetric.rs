//! Neural correction of the Fubini–Study metric towards Ricci-flatness.
//!
//! The prediction is `g = h + h ⊙ S` where `h` is the FS Hermitian metric,
//! `S = (O + Oᵀ)/2` is the symmetrised 3×3 network output and `⊙` acts on
//! real and imaginary parts alike. The network sees the unit representative
//! of the point (10 reals) and the chart indices `(a, e)`.
//!
//! Training minimises a Monge–Ampère term, the weighted mean of
//! `|1 − det g / (κ |c|²)|`, plus a volume term `|E[det g/det h] − 1|`.
//! Expectations are over points drawn from the FS measure, which the
//! sampler produces; `κ` is the ratio of the Monte-Carlo volumes of `g` and
//! `iΥ∧Ῡ` and is re-estimated on the training set before every epoch.

use std::io::Write;
use std::path::PathBuf;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, ModelKind};
use crate::error::{Error, Result};
use crate::nn::{self, Activation, Adam, AdamConfig, Mlp};
use crate::par::{self, Execution};
use crate::quintic::{AffinePoint, HermitianMetric3, QuinticPoint, C64};
use crate::rng::{hash_unit, item_rng, streams};

pub const INPUTS: usize = 12;
pub const OUTPUTS: usize = 9;

/// Network features of a chart point: `Z/|Z|` as `(Re…, Im…)` plus `(a, e)`.
pub fn features(ap: &AffinePoint) -> [f64; INPUTS] {
    let n = ap.zz.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    let mut x = [0.0; INPUTS];
    for i in 0..5 {
        x[i] = ap.zz[i].re / n;
        x[5 + i] = ap.zz[i].im / n;
    }
    x[10] = ap.patch.a as f64;
    x[11] = ap.patch.e as f64;
    x
}

fn symmetrise(o: &[f64]) -> Matrix3<f64> {
    Matrix3::from_fn(|j, k| 0.5 * (o[3 * j + k] + o[3 * k + j]))
}

fn hadamard(h: &HermitianMetric3, s: &Matrix3<f64>) -> HermitianMetric3 {
    HermitianMetric3(Matrix3::from_fn(|j, k| h.0[(j, k)] * (1.0 + s[(j, k)])))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrectionNet {
    pub mlp: Mlp<f64>,
}

impl CorrectionNet {
    /// Glorot hidden layers and a zero output layer, so the initial
    /// prediction is exactly the FS metric.
    pub fn new(hidden: &[usize], seed: u64) -> Result<Self> {
        let mut widths = vec![INPUTS];
        widths.extend_from_slice(hidden);
        widths.push(OUTPUTS);
        let mut rng = item_rng(seed, streams::INIT, 0);
        Ok(Self {
            mlp: Mlp::glorot(&widths, Activation::Gelu, true, &mut rng)?,
        })
    }

    pub fn correction(&self, ap: &AffinePoint) -> Matrix3<f64> {
        symmetrise(&self.mlp.predict(&features(ap), 1))
    }

    /// Corrected metric at a chart point.
    pub fn metric_at(&self, ap: &AffinePoint) -> HermitianMetric3 {
        hadamard(&ap.fs_metric(), &self.correction(ap))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_mlp(ModelKind::CyCorrection, &self.mlp)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != ModelKind::CyCorrection {
            return Err(Error::Format(format!("expected a CY correction checkpoint, found {:?}", ck.kind)));
        }
        let mlp = ck.to_mlp::<f64>()?;
        if mlp.inputs() != INPUTS || mlp.outputs() != OUTPUTS {
            return Err(Error::Format("CY correction checkpoint has wrong input/output widths".into()));
        }
        Ok(Self { mlp })
    }
}

/// `g_pred = g_FS + g_FS ⊙ S` at a sampled point.
pub fn predict_metric(net: &CorrectionNet, p: &QuinticPoint) -> Result<HermitianMetric3> {
    let ap = AffinePoint::from_homogeneous(&p.z, p.patch)?;
    let g = net.metric_at(&ap);
    if !g.is_positive_definite() {
        log::debug!("corrected metric is not positive-definite at {:?}", p.z);
    }
    Ok(g)
}

/// Per-point data the losses need, computed once.
#[derive(Clone, Debug)]
pub struct CyPoint {
    pub features: [f64; INPUTS],
    pub h: HermitianMetric3,
    pub det_h: f64,
    /// `|c|²` of the holomorphic volume coefficient.
    pub c2: f64,
    /// `|c|² / det h`.
    pub weight: f64,
}

impl CyPoint {
    pub fn new(p: &QuinticPoint) -> Result<Self> {
        let ap = AffinePoint::from_homogeneous(&p.z, p.patch)?;
        let h = ap.fs_metric();
        let det_h = h.det();
        let c2 = ap.holo_volume().c.norm_sqr();
        Ok(Self {
            features: features(&ap),
            h,
            det_h,
            c2,
            weight: c2 / det_h,
        })
    }
}

pub fn prepare(points: &[QuinticPoint], exec: Execution) -> Result<Vec<CyPoint>> {
    par::map_slice(exec, points, CyPoint::new).into_iter().collect()
}

fn det_and_grad(h: &HermitianMetric3, out: &[f64]) -> (f64, [f64; OUTPUTS], bool) {
    let s = symmetrise(out);
    let g = hadamard(h, &s);
    let det = g.det();
    let mut grad = [0.0; OUTPUTS];
    let pd = g.is_positive_definite();
    if let Some(inv) = g.0.try_inverse() {
        for j in 0..3 {
            for k in 0..3 {
                let t: C64 = inv[(k, j)] * h.0[(j, k)] + inv[(j, k)] * h.0[(k, j)];
                grad[3 * j + k] = 0.5 * det * t.re;
            }
        }
    }
    (det, grad, pd)
}

/// Network outputs for a set of points (row-major, 9 per point).
fn outputs(net: &CorrectionNet, pts: &[&CyPoint], exec: Execution) -> Vec<f64> {
    let chunks = par::map_chunks(exec, pts.len(), nn::GRAD_CHUNK, |r| {
        let x: Vec<f64> = pts[r.clone()].iter().flat_map(|p| p.features).collect();
        net.mlp.predict(&x, r.len())
    });
    chunks.concat()
}

/// `κ = E[det g/det h] / E[|c|²/det h]` over the given points.
pub fn estimate_kappa(net: &CorrectionNet, pts: &[&CyPoint], exec: Execution) -> Result<f64> {
    let out = outputs(net, pts, exec);
    let mut vol_g = 0.0;
    let mut vol_o = 0.0;
    for (i, p) in pts.iter().enumerate() {
        let det = hadamard(&p.h, &symmetrise(&out[9 * i..9 * i + 9])).det();
        vol_g += det / p.det_h;
        vol_o += p.weight;
    }
    let kappa = vol_g / vol_o;
    if !(kappa > 0.0 && kappa.is_finite()) {
        return Err(Error::NonPositiveKappa(kappa));
    }
    Ok(kappa)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub monge_ampere: f64,
    pub volume: f64,
    /// Fraction of points whose corrected metric is not positive-definite.
    pub non_pd_fraction: f64,
}

impl LossParts {
    pub fn total(&self, volume_weight: f64) -> f64 {
        self.monge_ampere + volume_weight * self.volume
    }
}

/// Both loss terms on a batch, for a fixed `κ`.
pub fn losses(net: &CorrectionNet, pts: &[&CyPoint], kappa: f64, exec: Execution) -> Result<LossParts> {
    if pts.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if !(kappa > 0.0) {
        return Err(Error::NonPositiveKappa(kappa));
    }
    let out = outputs(net, pts, exec);
    let (mut ma, mut wsum, mut vol, mut bad) = (0.0, 0.0, 0.0, 0usize);
    for (i, p) in pts.iter().enumerate() {
        let g = hadamard(&p.h, &symmetrise(&out[9 * i..9 * i + 9]));
        let det = g.det();
        ma += p.weight * (1.0 - det / (kappa * p.c2)).abs();
        wsum += p.weight;
        vol += det / p.det_h;
        if !g.is_positive_definite() {
            bad += 1;
        }
    }
    Ok(LossParts {
        monge_ampere: ma / wsum,
        volume: (vol / pts.len() as f64 - 1.0).abs(),
        non_pd_fraction: bad as f64 / pts.len() as f64,
    })
}

pub fn loss_monge_ampere(net: &CorrectionNet, pts: &[&CyPoint], kappa: f64, exec: Execution) -> Result<f64> {
    Ok(losses(net, pts, kappa, exec)?.monge_ampere)
}

pub fn loss_volume(net: &CorrectionNet, pts: &[&CyPoint], exec: Execution) -> Result<f64> {
    Ok(losses(net, pts, 1.0, exec)?.volume)
}

/// Total loss `MA + volume_weight · vol` and its parameter gradient.
pub fn loss_and_gradient(
    net: &CorrectionNet,
    pts: &[&CyPoint],
    kappa: f64,
    volume_weight: f64,
    exec: Execution,
) -> Result<(f64, Vec<f64>)> {
    let parts = losses(net, pts, kappa, exec)?;
    let out = outputs(net, pts, exec);
    let n = pts.len() as f64;
    let wsum: f64 = pts.iter().map(|p| p.weight).sum();
    let mean_ratio = pts
        .iter()
        .enumerate()
        .map(|(i, p)| hadamard(&p.h, &symmetrise(&out[9 * i..9 * i + 9])).det() / p.det_h)
        .sum::<f64>()
        / n;
    let vol_sign = (mean_ratio - 1.0).signum();
    let (_, grad) = nn::chunked_gradient::<f64, _>(exec, pts.len(), net.mlp.param_count(), |r, g| {
        let x: Vec<f64> = pts[r.clone()].iter().flat_map(|p| p.features).collect();
        let tape = net.mlp.forward(&x, r.len());
        let mut dout = vec![0.0; r.len() * OUTPUTS];
        for (row, i) in r.clone().enumerate() {
            let p = pts[i];
            let (det, ddet, _) = det_and_grad(&p.h, &tape.output[9 * row..9 * row + 9]);
            let resid = 1.0 - det / (kappa * p.c2);
            let d_ma = -p.weight * resid.signum() / (kappa * p.c2 * wsum);
            let d_vol = volume_weight * vol_sign / (n * p.det_h);
            for o in 0..OUTPUTS {
                dout[9 * row + o] = (d_ma + d_vol) * ddet[o];
            }
        }
        net.mlp.backward(&tape, &dout, g);
        0.0
    });
    Ok((parts.total(volume_weight), grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CyTrainConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub batch: usize,
    pub volume_weight: f64,
    pub train_fraction: f64,
    pub seed: u64,
    pub exec: Execution,
    /// Write a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for CyTrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64; 4],
            lr: 1e-3,
            batch: 1024,
            volume_weight: 0.1,
            train_fraction: 0.9,
            seed: 0,
            exec: Execution::Parallel,
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CyEpoch {
    pub epoch: usize,
    pub kappa: f64,
    pub train: LossParts,
    pub validation: LossParts,
}

/// Train/validation assignment of the CY points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CySplit {
    pub train_fraction: f64,
    pub seed: u64,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

impl CySplit {
    pub fn new(n: usize, train_fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0 < train_fraction && train_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!("train fraction {train_fraction} not in (0, 1)")));
        }
        let (train, validation) = (0..n).partition(|&i| hash_unit(seed, streams::SPLIT, i as u64) < train_fraction);
        Ok(Self {
            train_fraction,
            seed,
            train,
            validation,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub net: CorrectionNet,
    pub optimizer: Adam<f64>,
    pub epoch: usize,
    pub history: Vec<CyEpoch>,
    pub split: CySplit,
    pub config: CyTrainConfig,
}

impl TrainState {
    pub fn new(points: usize, config: CyTrainConfig) -> Result<Self> {
        let net = CorrectionNet::new(&config.hidden, config.seed)?;
        let split = CySplit::new(points, config.train_fraction, config.seed)?;
        if split.train.is_empty() || split.validation.is_empty() {
            return Err(Error::InvalidArgument("too few points for a train/validation split".into()));
        }
        Ok(Self {
            optimizer: Adam::new(net.mlp.param_count(), AdamConfig::default()),
            net,
            epoch: 0,
            history: Vec::new(),
            split,
            config,
        })
    }

    /// Loss history as CSV: `epoch,ma_loss,vol_loss,split`.
    pub fn write_history_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "epoch,ma_loss,vol_loss,split")?;
        for e in &self.history {
            writeln!(w, "{},{:e},{:e},train", e.epoch, e.train.monge_ampere, e.train.volume)?;
            writeln!(w, "{},{:e},{:e},validation", e.epoch, e.validation.monge_ampere, e.validation.volume)?;
        }
        Ok(())
    }
}

const DIVERGENCE: f64 = 1e3;

/// Run `epochs` further epochs. Epoch 0 (recorded before any update) holds
/// the losses of the FS metric.
pub fn train_cy(mut state: TrainState, data: &[CyPoint], epochs: usize, total_epochs: usize) -> Result<TrainState> {
    let cfg = state.config.clone();
    let train: Vec<&CyPoint> = state.split.train.iter().map(|&i| &data[i]).collect();
    let val: Vec<&CyPoint> = state.split.validation.iter().map(|&i| &data[i]).collect();
    if state.history.is_empty() {
        let kappa = estimate_kappa(&state.net, &train, cfg.exec)?;
        state.history.push(CyEpoch {
            epoch: 0,
            kappa,
            train: losses(&state.net, &train, kappa, cfg.exec)?,
            validation: losses(&state.net, &val, kappa, cfg.exec)?,
        });
    }
    for _ in 0..epochs {
        let kappa = estimate_kappa(&state.net, &train, cfg.exec)?;
        let lr = nn::cosine_lr(cfg.lr, state.epoch, total_epochs.max(state.epoch + 1));
        let order = nn::shuffled(train.len(), &mut item_rng(cfg.seed, streams::SHUFFLE, state.epoch as u64));
        for batch in order.chunks(cfg.batch.max(1)) {
            let pts: Vec<&CyPoint> = batch.iter().map(|&i| train[i]).collect();
            let (loss, grad) = loss_and_gradient(&state.net, &pts, kappa, cfg.volume_weight, cfg.exec)?;
            if !(loss < DIVERGENCE) {
                return Err(Error::Diverged {
                    epoch: state.epoch + 1,
                    loss,
                });
            }
            state.optimizer.step(&mut state.net.mlp.params, &grad, lr);
        }
        state.epoch += 1;
        let record = CyEpoch {
            epoch: state.epoch,
            kappa,
            train: losses(&state.net, &train, kappa, cfg.exec)?,
            validation: losses(&state.net, &val, kappa, cfg.exec)?,
        };
        log::info!(
            "cy epoch {}: kappa {:.5} train MA {:.5e} vol {:.3e} | val MA {:.5e}",
            record.epoch,
            kappa,
            record.train.monge_ampere,
            record.train.volume,
            record.validation.monge_ampere
        );
        if !(record.train.total(cfg.volume_weight) < DIVERGENCE) {
            return Err(Error::Diverged {
                epoch: state.epoch,
                loss: record.train.total(cfg.volume_weight),
            });
        }
        state.history.push(record);
        if let (Some(dir), true) = (&cfg.checkpoint_dir, cfg.checkpoint_every > 0) {
            if state.epoch % cfg.checkpoint_every == 0 {
                state.net.checkpoint().save(&dir.join(format!("cy_epoch{:04}.ckpt", state.epoch)))?;
            }
        }
    }
    Ok(state)
}

/// Spread of `det g / (κ|c|²)` on a set of points (weighted variance).
pub fn monge_ampere_variance(net: &CorrectionNet, pts: &[&CyPoint], exec: Execution) -> Result<f64> {
    let kappa = estimate_kappa(net, pts, exec)?;
    let out = outputs(net, pts, exec);
    let mut s = 0.0;
    let mut s2 = 0.0;
    let mut w = 0.0;
    for (i, p) in pts.iter().enumerate() {
        let r = hadamard(&p.h, &symmetrise(&out[9 * i..9 * i + 9])).det() / (kappa * p.c2);
        s += p.weight * r;
        s2 += p.weight * r * r;
        w += p.weight;
    }
    Ok(s2 / w - (s / w).powi(2))
}
