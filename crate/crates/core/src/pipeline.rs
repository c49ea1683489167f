//! Dataset and point files, the 90:5:5 split, verification statistics and
//! the end-to-end stages driven by the command line tool.
//!
//! Binary files are little endian. A dataset file is
//!
//! ```text
//! magic "G2DS" | version u32 | mode u32 | records u64 | base points u64
//! | thetas u32 | chart order (u64 length + UTF-8) | c_eta f64 | lambda f64
//! | seed u64 | sha256 of payload (32 bytes) | payload
//! ```
//!
//! where the payload holds [`RECORD_LEN`] f64 per record: φ (35), ψ (35),
//! g (28), vol_g2, vol_cy, η (7), the 19 network inputs, base id and θ.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{get_f64, get_u32, get_u64, put_u32, put_u64, Checkpoint, ModelKind};
use crate::cymetric::{self, CorrectionNet, CyTrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::exterior::{AltForm, MetricTensor};
use crate::link::{self, ChartMap, G2Sample, KahlerSource, LinkStructure};
use crate::ned::{self, median, FnEvaluator, SweepResult};
use crate::par::{self, Execution};
use crate::quintic::{sample_points, Patch, QuinticPoint};
use crate::regressor::{self, DenseModel, RegressorConfig, RegressorKind};
use crate::rng::{hash_unit, streams};

pub const DATASET_MAGIC: &[u8; 4] = b"G2DS";
pub const POINTS_MAGIC: &[u8; 4] = b"G2QP";
pub const FORMAT_VERSION: u32 = 1;
pub const RECORD_LEN: usize = 128;
pub const POINT_LEN: usize = 13;
pub const CHART_ORDER: &str = "u1,u2,u3,u4,u5,u6,theta";

/// Step used by the contact-form calibration and the exact torsion checks.
pub const DEFAULT_EPS: f64 = 1e-4;
/// Base points used to calibrate `c_η`.
pub const CALIBRATION_POINTS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Fubini–Study Kähler form.
    Fs,
    /// Kähler form of the trained CY correction network.
    Nn,
}

impl Mode {
    fn code(self) -> u32 {
        match self {
            Mode::Fs => 0,
            Mode::Nn => 1,
        }
    }

    fn from_code(c: u32) -> Result<Self> {
        match c {
            0 => Ok(Mode::Fs),
            1 => Ok(Mode::Nn),
            _ => Err(Error::Format(format!("unknown dataset mode {c}"))),
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fs" => Ok(Mode::Fs),
            "nn" => Ok(Mode::Nn),
            _ => Err(Error::InvalidArgument(format!("mode must be fs or nn, got {s:?}"))),
        }
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = BufReader::new(File::open(path)?);
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn read_magic(r: &mut impl Read, magic: &[u8; 4], what: &str) -> Result<()> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(Error::Format(format!("not a {what} file (bad magic)")));
    }
    let v = get_u32(r)?;
    if v != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{what} file version {v} is not supported (expected {FORMAT_VERSION}); regenerate it with this version"
        )));
    }
    Ok(())
}

fn read_checked_payload(r: &mut impl Read, len: usize, what: &str) -> Result<Vec<u8>> {
    let mut digest = [0u8; 32];
    r.read_exact(&mut digest)?;
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload).map_err(|_| Error::Format(format!("{what} file is truncated")))?;
    if Sha256::digest(&payload).as_slice() != digest {
        return Err(Error::Format(format!("{what} checksum mismatch")));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format(format!("{what} file has trailing bytes")));
    }
    Ok(payload)
}

fn f64s_to_bytes(v: &[f64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn bytes_to_f64s(b: &[u8]) -> Vec<f64> {
    b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
}

// ---------------------------------------------------------------------------
// Point files

pub fn write_points(w: &mut impl Write, seed: u64, points: &[QuinticPoint]) -> Result<()> {
    let mut flat = Vec::with_capacity(points.len() * POINT_LEN);
    for p in points {
        for z in &p.z {
            flat.push(z.re);
            flat.push(z.im);
        }
        flat.extend([p.patch.a as f64, p.patch.e as f64, p.weight]);
    }
    let payload = f64s_to_bytes(&flat);
    w.write_all(POINTS_MAGIC)?;
    put_u32(w, FORMAT_VERSION)?;
    put_u64(w, points.len() as u64)?;
    put_u64(w, seed)?;
    w.write_all(&Sha256::digest(&payload))?;
    w.write_all(&payload)?;
    Ok(())
}

pub fn read_points(r: &mut impl Read) -> Result<(u64, Vec<QuinticPoint>)> {
    read_magic(r, POINTS_MAGIC, "point")?;
    let count = get_u64(r)? as usize;
    let seed = get_u64(r)?;
    if count > 1 << 32 {
        return Err(Error::Format(format!("implausible point count {count}")));
    }
    let flat = bytes_to_f64s(&read_checked_payload(r, count * POINT_LEN * 8, "point")?);
    let points = flat
        .chunks_exact(POINT_LEN)
        .map(|c| {
            Ok(QuinticPoint {
                z: std::array::from_fn(|m| C64::new(c[2 * m], c[2 * m + 1])),
                patch: Patch::new(c[10] as usize, c[11] as usize)?,
                weight: c[12],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((seed, points))
}

pub fn save_points(path: &Path, seed: u64, points: &[QuinticPoint]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    write_points(&mut f, seed, points)?;
    f.flush()?;
    Ok(())
}

pub fn load_points(path: &Path) -> Result<(u64, Vec<QuinticPoint>)> {
    read_points(&mut BufReader::new(open(path, "point")?))
}

fn open(path: &Path, what: &str) -> Result<File> {
    File::open(path).map_err(|e| {
        Error::InvalidArgument(format!("cannot open {what} file {}: {e}; run the previous stage first", path.display()))
    })
}

// ---------------------------------------------------------------------------
// Datasets

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub mode: Mode,
    pub records: u64,
    pub base_points: u64,
    pub thetas: u32,
    pub chart_order: String,
    pub c_eta: f64,
    pub lambda: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<G2Sample>,
}

pub fn encode_record(s: &G2Sample) -> [f64; RECORD_LEN] {
    let mut out = [0.0; RECORD_LEN];
    let mut k = 0;
    for part in [&s.phi[..], &s.psi, &s.g, &[s.vol_g2, s.vol_cy], &s.eta, &s.input19, &[s.base_id as f64, s.theta]] {
        out[k..k + part.len()].copy_from_slice(part);
        k += part.len();
    }
    debug_assert_eq!(k, RECORD_LEN);
    out
}

pub fn decode_record(r: &[f64]) -> Result<G2Sample> {
    if r.len() != RECORD_LEN {
        return Err(Error::DimensionMismatch { expected: RECORD_LEN, found: r.len() });
    }
    let input19: [f64; 19] = r[107..126].try_into().unwrap();
    Ok(G2Sample {
        phi: r[0..35].try_into().unwrap(),
        psi: r[35..70].try_into().unwrap(),
        g: r[70..98].try_into().unwrap(),
        vol_g2: r[98],
        vol_cy: r[99],
        eta: r[100..107].try_into().unwrap(),
        input19,
        patch: Patch::new(input19[17] as usize, input19[18] as usize)?,
        base_id: r[126] as u64,
        theta: r[127],
    })
}

impl Dataset {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let h = &self.header;
        if h.records != self.samples.len() as u64 {
            return Err(Error::InvalidArgument("header record count does not match the samples".into()));
        }
        let mut payload = Vec::with_capacity(self.samples.len() * RECORD_LEN * 8);
        for s in &self.samples {
            for v in encode_record(s) {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(DATASET_MAGIC)?;
        put_u32(w, FORMAT_VERSION)?;
        put_u32(w, h.mode.code())?;
        put_u64(w, h.records)?;
        put_u64(w, h.base_points)?;
        put_u32(w, h.thetas)?;
        put_u64(w, h.chart_order.len() as u64)?;
        w.write_all(h.chart_order.as_bytes())?;
        w.write_all(&h.c_eta.to_le_bytes())?;
        w.write_all(&h.lambda.to_le_bytes())?;
        put_u64(w, h.seed)?;
        w.write_all(&Sha256::digest(&payload))?;
        w.write_all(&payload)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        read_magic(r, DATASET_MAGIC, "dataset")?;
        let mode = Mode::from_code(get_u32(r)?)?;
        let records = get_u64(r)?;
        let base_points = get_u64(r)?;
        let thetas = get_u32(r)?;
        let len = get_u64(r)? as usize;
        if len > 4096 {
            return Err(Error::Format("implausible chart-order descriptor".into()));
        }
        let mut co = vec![0u8; len];
        r.read_exact(&mut co)?;
        let chart_order = String::from_utf8(co).map_err(|e| Error::Format(e.to_string()))?;
        if chart_order != CHART_ORDER {
            return Err(Error::Format(format!("unexpected chart order {chart_order:?}")));
        }
        let c_eta = get_f64(r)?;
        let lambda = get_f64(r)?;
        let seed = get_u64(r)?;
        if records > 1 << 32 {
            return Err(Error::Format(format!("implausible record count {records}")));
        }
        let payload = read_checked_payload(r, records as usize * RECORD_LEN * 8, "dataset")?;
        let samples = bytes_to_f64s(&payload).chunks_exact(RECORD_LEN).map(decode_record).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            header: DatasetHeader { mode, records, base_points, thetas, chart_order, c_eta, lambda, seed },
            samples,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(open(path, "dataset")?))
    }

    pub fn structure(&self, cy: Option<&CorrectionNet>) -> Result<LinkStructure> {
        let source = match (self.header.mode, cy) {
            (Mode::Fs, _) => KahlerSource::FubiniStudy,
            (Mode::Nn, Some(net)) => KahlerSource::Corrected(Box::new(net.clone())),
            (Mode::Nn, None) => {
                return Err(Error::InvalidArgument("an nn-mode dataset needs the CY model used to build it".into()))
            }
        };
        Ok(LinkStructure { source, c_eta: self.header.c_eta, lambda: self.header.lambda })
    }
}

// ---------------------------------------------------------------------------
// Splits

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { train: 0.9, validation: 0.05, test: 0.05 }
    }
}

impl FromStr for SplitFractions {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(':')
            .map(|p| p.trim().parse::<f64>().map_err(|e| Error::InvalidArgument(format!("bad split {s:?}: {e}"))))
            .collect::<Result<_>>()?;
        if parts.len() != 3 || parts.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::InvalidArgument(format!("split must be three fractions a:b:c, got {s:?}")));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("split fractions must sum to 1, got {s:?}")));
        }
        Ok(Self { train: parts[0], validation: parts[1], test: parts[2] })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Split of record `index`; a pure function of `(index, seed)`.
pub fn split_of(index: usize, seed: u64, f: &SplitFractions) -> Split {
    let u = hash_unit(seed, streams::SPLIT, index as u64);
    if u < f.train {
        Split::Train
    } else if u < f.train + f.validation {
        Split::Validation
    } else {
        Split::Test
    }
}

pub struct SplitSets<'a> {
    pub train: Vec<&'a G2Sample>,
    pub validation: Vec<&'a G2Sample>,
    pub test: Vec<&'a G2Sample>,
}

pub fn partition<'a>(samples: &'a [G2Sample], seed: u64, f: &SplitFractions) -> SplitSets<'a> {
    let mut out = SplitSets { train: vec![], validation: vec![], test: vec![] };
    for (i, s) in samples.iter().enumerate() {
        match split_of(i, seed, f) {
            Split::Train => out.train.push(s),
            Split::Validation => out.validation.push(s),
            Split::Test => out.test.push(s),
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Statistics

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub sd: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(v: &[f64]) -> Self {
        if v.is_empty() {
            return Self { count: 0, mean: f64::NAN, sd: f64::NAN, median: f64::NAN, min: f64::NAN, max: f64::NAN };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        Self {
            count: v.len(),
            mean,
            sd,
            median: median(v.to_vec()),
            min: v.iter().cloned().fold(f64::INFINITY, f64::min),
            max: v.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// Least-squares line `y = slope x + intercept` with Pearson's r.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub count: usize,
    pub pmcc: f64,
    pub slope: f64,
    pub intercept: f64,
}

impl LinearFit {
    pub fn of(x: &[f64], y: &[f64]) -> Self {
        let n = x.len().min(y.len());
        let nf = n as f64;
        let mx = x[..n].iter().sum::<f64>() / nf;
        let my = y[..n].iter().sum::<f64>() / nf;
        let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let (dx, dy) = (x[i] - mx, y[i] - my);
            sxx += dx * dx;
            syy += dy * dy;
            sxy += dx * dy;
        }
        let slope = sxy / sxx;
        Self { count: n, pmcc: sxy / (sxx * syy).sqrt(), slope, intercept: my - slope * mx }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WedgeStats {
    /// `|φ∧ψ / vol − 7|` over all records.
    pub deviation: Summary,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HodgeStats {
    /// `‖*_g φ − ψ‖ / ‖ψ‖` with Euclidean coefficient norms.
    pub relative: Summary,
    pub tolerance: f64,
    pub fraction_within: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ContactStats {
    /// `|η∧(dη)³|` top coefficient.
    pub volume: Summary,
    pub failures: usize,
}

/// Torsion diagnostics with Euclidean coefficient norms in chart coordinates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TorsionStats {
    pub eps: f64,
    pub failures: usize,
    pub dphi: Summary,
    pub omega2: Summary,
    /// `‖dφ‖ / ‖ω∧ω‖`.
    pub ratio: Summary,
    /// `‖dφ − ω∧ω‖`.
    pub defect: Summary,
    /// Mean over points and components of `(dφ − ω∧ω)²`.
    pub mse_dphi_omega2: f64,
    pub dpsi: Summary,
    pub psi: Summary,
}

#[derive(Clone, Copy, Debug)]
struct TorsionPoint {
    dphi: f64,
    omega2: f64,
    defect: f64,
    defect_sq: f64,
    dpsi: f64,
    psi: f64,
}

impl TorsionStats {
    fn collect(eps: f64, pts: Vec<Result<TorsionPoint>>) -> Self {
        let ok: Vec<TorsionPoint> = pts.iter().filter_map(|r| r.as_ref().ok().copied()).collect();
        let failures = pts.len() - ok.len();
        if failures > 0 {
            log::warn!("{failures} torsion evaluations failed and were skipped");
        }
        let col = |f: fn(&TorsionPoint) -> f64| Summary::of(&ok.iter().map(f).collect::<Vec<_>>());
        Self {
            eps,
            failures,
            dphi: col(|t| t.dphi),
            omega2: col(|t| t.omega2),
            ratio: col(|t| t.dphi / t.omega2),
            defect: col(|t| t.defect),
            mse_dphi_omega2: ok.iter().map(|t| t.defect_sq).sum::<f64>() / (35 * ok.len().max(1)) as f64,
            dpsi: col(|t| t.dpsi),
            psi: col(|t| t.psi),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelScores {
    pub kind: String,
    pub test_records: usize,
    /// Per-component MSE in the model's standardised output space.
    pub normalized_mse: f64,
    /// Same for the 28 metric entries, standardised by training-split statistics.
    pub metric_entry_mse: Option<f64>,
    pub min_component_pmcc: f64,
    pub positive_definite_fraction: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub mode: Option<Mode>,
    pub records: usize,
    pub wedge: WedgeStats,
    pub hodge: HodgeStats,
    pub volume: LinearFit,
    pub contact: Option<ContactStats>,
    /// Exact evaluators of the calibrated structure.
    pub torsion: Option<TorsionStats>,
    /// Regressor evaluators on test-split points.
    pub model_torsion: Option<TorsionStats>,
    pub models: Vec<ModelScores>,
}

pub const HODGE_TOLERANCE: f64 = 1e-5;

pub fn wedge_stats(samples: &[G2Sample], exec: Execution) -> WedgeStats {
    let dev = par::map_slice(exec, samples, |s| (s.wedge_ratio() - 7.0).abs());
    WedgeStats { deviation: Summary::of(&dev) }
}

pub fn hodge_stats(samples: &[G2Sample], exec: Execution) -> HodgeStats {
    let rel: Vec<f64> = par::map_slice(exec, samples, |s| {
        let psi = s.psi_form();
        match s.phi_form().hodge_star(&s.metric()) {
            Ok(star) => (&star - &psi).euclidean_norm() / psi.euclidean_norm(),
            Err(_) => f64::INFINITY,
        }
    });
    let within = rel.iter().filter(|&&r| r <= HODGE_TOLERANCE).count();
    HodgeStats {
        fraction_within: within as f64 / rel.len().max(1) as f64,
        relative: Summary::of(&rel),
        tolerance: HODGE_TOLERANCE,
    }
}

pub fn volume_fit(samples: &[G2Sample]) -> LinearFit {
    let x: Vec<f64> = samples.iter().map(|s| s.vol_cy).collect();
    let y: Vec<f64> = samples.iter().map(|s| s.vol_g2).collect();
    LinearFit::of(&x, &y)
}

/// Chart and chart coordinates of a stored record.
pub fn chart_of(s: &G2Sample) -> Result<(ChartMap, [f64; 7])> {
    ChartMap::from_ambient(&s.ambient(), s.patch)
}

pub fn contact_stats(structure: &LinkStructure, samples: &[&G2Sample], eps: f64, exec: Execution) -> ContactStats {
    let vols = par::map_slice(exec, samples, |s| -> Result<f64> {
        let (chart, y) = chart_of(s)?;
        structure.contact_volume_at(&chart, &y, eps)
    });
    let ok: Vec<f64> = vols.iter().filter_map(|r| r.as_ref().ok().map(|v| v.abs())).collect();
    ContactStats { failures: vols.len() - ok.len(), volume: Summary::of(&ok) }
}

fn torsion_point(
    phi: &dyn ned::FormEvaluator,
    psi: &dyn ned::FormEvaluator,
    omega2: &AltForm,
    y: &[f64],
    eps: f64,
) -> Result<TorsionPoint> {
    let dphi = ned::ned(phi, y, eps)?;
    let dpsi = ned::ned(psi, y, eps)?;
    let diff = &dphi - omega2;
    Ok(TorsionPoint {
        dphi: dphi.euclidean_norm(),
        omega2: omega2.euclidean_norm(),
        defect: diff.euclidean_norm(),
        defect_sq: diff.coeffs().iter().map(|v| v * v).sum(),
        dpsi: dpsi.euclidean_norm(),
        psi: psi.eval(y)?.euclidean_norm(),
    })
}

/// `dφ` against `ω∧ω` and `dψ` for the structure's own forms.
pub fn exact_torsion(structure: &LinkStructure, samples: &[&G2Sample], eps: f64, exec: Execution) -> TorsionStats {
    let pts = par::map_slice(exec, samples, |s| -> Result<TorsionPoint> {
        let (chart, y) = chart_of(s)?;
        let phi = FnEvaluator::new(7, 3, |p: &[f64]| Ok(structure.forms_at(&chart, p)?.phi()));
        let psi = FnEvaluator::new(7, 4, |p: &[f64]| Ok(structure.forms_at(&chart, p)?.psi()));
        let omega2 = structure.forms_at(&chart, &y)?.omega_squared();
        torsion_point(&phi, &psi, &omega2, &y, eps)
    });
    TorsionStats::collect(eps, pts)
}

/// Regressor predictions as forms on one chart. Stencil points keep the
/// centre's patch indices.
pub struct ModelForms<'a> {
    pub phi: &'a DenseModel,
    pub metric: Option<&'a DenseModel>,
    pub chart: ChartMap,
    pub c_eta: f64,
}

impl ModelForms<'_> {
    pub fn input(&self, y: &[f64]) -> Result<[f64; 19]> {
        let ev = self.chart.eval(y)?;
        Ok(link::input19(&ev.ambient(), &ev.contact_form(self.c_eta), self.chart.patch))
    }

    pub fn phi_at(&self, y: &[f64]) -> Result<AltForm> {
        Ok(regressor::predict_phi(self.phi, &self.input(y)?))
    }

    /// `*φ` with the predicted metric (or the metric of the predicted `φ`
    /// when no metric model is given).
    pub fn psi_at(&self, y: &[f64]) -> Result<AltForm> {
        let x = self.input(y)?;
        let phi = regressor::predict_phi(self.phi, &x);
        let g = match self.metric {
            Some(m) => regressor::predict_metric(m, &x),
            None => crate::exterior::metric_from_3form(&phi)?.0,
        };
        phi.hodge_star(&g)
    }
}

pub fn model_torsion(
    structure: &LinkStructure,
    phi_model: &DenseModel,
    metric_model: Option<&DenseModel>,
    samples: &[&G2Sample],
    eps: f64,
    exec: Execution,
) -> TorsionStats {
    let pts = par::map_slice(exec, samples, |s| -> Result<TorsionPoint> {
        let (chart, y) = chart_of(s)?;
        let mf = ModelForms { phi: phi_model, metric: metric_model, chart, c_eta: structure.c_eta };
        let phi = FnEvaluator::new(7, 3, |p: &[f64]| mf.phi_at(p));
        let psi = FnEvaluator::new(7, 4, |p: &[f64]| mf.psi_at(p));
        let omega2 = structure.forms_at(&chart, &y)?.omega_squared();
        torsion_point(&phi, &psi, &omega2, &y, eps)
    });
    TorsionStats::collect(eps, pts)
}

fn pmcc_columns(truth: &[Vec<f64>], pred: &[Vec<f64>]) -> Vec<f64> {
    let dim = truth.first().map_or(0, Vec::len);
    (0..dim)
        .map(|k| {
            let t: Vec<f64> = truth.iter().map(|r| r[k]).collect();
            let p: Vec<f64> = pred.iter().map(|r| r[k]).collect();
            LinearFit::of(&t, &p).pmcc
        })
        .filter(|v| v.is_finite())
        .collect()
}

/// Scores of a regressor on held-out records. `train` supplies the metric
/// entry statistics.
pub fn score_model(model: &DenseModel, train: &[&G2Sample], test: &[&G2Sample], exec: Execution) -> Result<ModelScores> {
    let pred = regressor::predictions(model, test, exec);
    let mut scores = ModelScores {
        kind: model.kind.label().into(),
        test_records: test.len(),
        normalized_mse: regressor::normalized_mse(model, test, exec)?,
        ..Default::default()
    };
    match model.kind {
        RegressorKind::Form => {
            let truth: Vec<Vec<f64>> = test.iter().map(|s| s.phi.to_vec()).collect();
            scores.min_component_pmcc = pmcc_columns(&truth, &pred).into_iter().fold(f64::INFINITY, f64::min);
        }
        RegressorKind::Metric => {
            let gs = regressor::NormStats::fit(train.iter().map(|s| &s.g[..]), regressor::METRIC_DIM)?;
            let metrics: Vec<MetricTensor> = pred.iter().map(|p| regressor::reassemble_metric(p)).collect();
            let truth: Vec<Vec<f64>> = test.iter().map(|s| s.g.to_vec()).collect();
            let g_pred: Vec<Vec<f64>> = metrics.iter().map(MetricTensor::lower_triangle).collect();
            let mut se = 0.0;
            for (t, p) in truth.iter().zip(&g_pred) {
                let (a, b) = (gs.normalize(t), gs.normalize(p));
                se += a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
            }
            scores.metric_entry_mse = Some(se / (test.len() * regressor::METRIC_DIM).max(1) as f64);
            scores.min_component_pmcc = pmcc_columns(&truth, &g_pred).into_iter().fold(f64::INFINITY, f64::min);
            let pd = metrics.iter().filter(|m| m.is_positive_definite()).count();
            scores.positive_definite_fraction = Some(pd as f64 / metrics.len().max(1) as f64);
        }
    }
    Ok(scores)
}

/// Every `stride`-th element so that at most `max` remain.
pub fn subsample<'a>(v: &[&'a G2Sample], max: usize) -> Vec<&'a G2Sample> {
    if v.len() <= max || max == 0 {
        return v.to_vec();
    }
    let stride = v.len().div_ceil(max);
    v.iter().step_by(stride).copied().collect()
}

/// Histograms of every component: `component,bin_left,bin_right,count`.
pub fn write_histograms(w: &mut impl Write, columns: &[Vec<f64>], bins: usize) -> Result<()> {
    writeln!(w, "component,bin_left,bin_right,count")?;
    for (k, col) in columns.iter().enumerate() {
        let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
        let mut counts = vec![0usize; bins];
        for &v in col {
            counts[(((v - lo) / width) as usize).min(bins - 1)] += 1;
        }
        for (b, c) in counts.iter().enumerate() {
            writeln!(w, "{k},{:e},{:e},{c}", lo + b as f64 * width, lo + (b + 1) as f64 * width)?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Manifests and stages

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    pub results: serde_json::Value,
}

impl Manifest {
    fn new(command: &str, seed: u64, config: serde_json::Value, inputs: &[&Path]) -> Result<Self> {
        Ok(Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed,
            config,
            inputs: inputs.iter().map(|p| file_record(p)).collect::<Result<_>>()?,
            outputs: vec![],
            results: serde_json::Value::Null,
        })
    }

    fn finish(mut self, out: &Path, outputs: &[&Path], results: serde_json::Value) -> Result<PathBuf> {
        self.outputs = outputs.iter().map(|p| file_record(p)).collect::<Result<_>>()?;
        self.results = results;
        let path = out.join(format!("manifest_{}.json", self.command.replace('-', "_")));
        std::fs::write(&path, serde_json::to_string_pretty(&self).unwrap())?;
        Ok(path)
    }
}

fn file_record(p: &Path) -> Result<FileRecord> {
    Ok(FileRecord { path: p.display().to_string(), sha256: sha256_file(p)? })
}

fn json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap()
}

pub const POINTS_FILE: &str = "points.bin";
pub const CY_MODEL_FILE: &str = "cy_model.ckpt";
pub const DATASET_FILE: &str = "dataset.bin";

pub fn model_file(kind: RegressorKind) -> String {
    format!("{}_model.ckpt", kind.label())
}

fn ensure_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    Ok(())
}

/// Sample base points and write `points.bin`.
pub fn run_sample(count: usize, seed: u64, out: &Path, exec: Execution) -> Result<PathBuf> {
    ensure_dir(out)?;
    let (points, report) = sample_points(count, seed, exec)?;
    let path = out.join(POINTS_FILE);
    save_points(&path, seed, &points)?;
    Manifest::new("sample", seed, serde_json::json!({ "count": count }), &[])?.finish(out, &[&path], json(&report))?;
    Ok(path)
}

pub fn load_cy_model(path: &Path) -> Result<CorrectionNet> {
    let ck = Checkpoint::load(path).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
    if ck.kind != ModelKind::CyCorrection {
        return Err(Error::InvalidArgument(format!("{} is not a CY model checkpoint", path.display())));
    }
    CorrectionNet::from_checkpoint(&ck)
}

pub fn load_regressor(path: &Path) -> Result<DenseModel> {
    let ck = Checkpoint::load(path).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
    DenseModel::from_checkpoint(&ck)
}

/// Train the CY correction and write the checkpoint and loss history.
pub fn run_train_cy(points_path: &Path, epochs: usize, config: CyTrainConfig, out: &Path) -> Result<TrainState> {
    ensure_dir(out)?;
    let (_, points) = load_points(points_path)?;
    let data = cymetric::prepare(&points, config.exec)?;
    let manifest = Manifest::new("train-cy", config.seed, json(&config), &[points_path])?;
    let state = cymetric::train_cy(TrainState::new(data.len(), config)?, &data, epochs, epochs)?;
    let ck = out.join(CY_MODEL_FILE);
    state.net.checkpoint().save(&ck)?;
    let hist = out.join("cy_history.csv");
    state.write_history_csv(&mut BufWriter::new(File::create(&hist)?))?;
    manifest.finish(out, &[&ck, &hist], json(&state.history.last()))?;
    Ok(state)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BuildConfig {
    pub mode: Mode,
    pub thetas: usize,
    pub seed: u64,
    pub calibration_eps: f64,
    pub exec: Execution,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self { mode: Mode::Fs, thetas: 5, seed: 0, calibration_eps: DEFAULT_EPS, exec: Execution::Parallel }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BuildSummary {
    pub c_eta: f64,
    pub lambda: f64,
    pub lambda_spread: f64,
    pub report: link::BuildReport,
}

/// Calibrate `c_η` and `λ` and assemble the dataset in memory.
pub fn build_dataset(points: &[QuinticPoint], cy: Option<&CorrectionNet>, cfg: &BuildConfig) -> Result<(Dataset, BuildSummary)> {
    let source = match (cfg.mode, cy) {
        (Mode::Fs, _) => KahlerSource::FubiniStudy,
        (Mode::Nn, Some(net)) => KahlerSource::Corrected(Box::new(net.clone())),
        (Mode::Nn, None) => return Err(Error::InvalidArgument("nn mode needs a trained CY model (--cy-model)".into())),
    };
    let calib = &points[..points.len().min(CALIBRATION_POINTS)];
    let c_eta = link::calibrate_contact(calib, cfg.calibration_eps, cfg.seed, cfg.exec)?;
    let norm = link::normalize_upsilon(&link::normalization_inputs(points, &source, cfg.exec)?)?;
    let structure = LinkStructure { source, c_eta, lambda: norm.lambda };
    let (samples, report) = link::build_samples(points, cfg.thetas, cfg.seed, &structure, cfg.exec)?;
    let header = DatasetHeader {
        mode: cfg.mode,
        records: samples.len() as u64,
        base_points: points.len() as u64,
        thetas: cfg.thetas as u32,
        chart_order: CHART_ORDER.into(),
        c_eta,
        lambda: norm.lambda,
        seed: cfg.seed,
    };
    Ok((Dataset { header, samples }, BuildSummary { c_eta, lambda: norm.lambda, lambda_spread: norm.spread, report }))
}

pub fn run_build_dataset(points_path: &Path, cy_path: Option<&Path>, cfg: &BuildConfig, out: &Path) -> Result<Dataset> {
    ensure_dir(out)?;
    let (_, points) = load_points(points_path)?;
    let cy = cy_path.map(load_cy_model).transpose()?;
    let mut inputs = vec![points_path];
    inputs.extend(cy_path);
    let manifest = Manifest::new("build-dataset", cfg.seed, json(cfg), &inputs)?;
    let (ds, summary) = build_dataset(&points, cy.as_ref(), cfg)?;
    let path = out.join(DATASET_FILE);
    ds.save(&path)?;
    manifest.finish(out, &[&path], json(&summary))?;
    Ok(ds)
}

/// Train one regressor on the train split of a dataset.
pub fn run_train_g2(
    dataset_path: &Path,
    kind: RegressorKind,
    split: &SplitFractions,
    config: &RegressorConfig,
    out: &Path,
) -> Result<(regressor::TrainedRegressor, ModelScores)> {
    ensure_dir(out)?;
    let ds = Dataset::load(dataset_path)?;
    let manifest = Manifest::new(
        &format!("train-g2-{}", kind.label()),
        config.seed,
        serde_json::json!({ "kind": kind, "split": split, "regressor": config }),
        &[dataset_path],
    )?;
    let sets = partition(&ds.samples, ds.header.seed, split);
    let ck_path = out.join(model_file(kind));
    let cfg = RegressorConfig { checkpoint_path: Some(ck_path.clone()), ..config.clone() };
    let trained = regressor::train(kind, &sets.train, &sets.validation, &cfg)?;
    trained.model.checkpoint().save(&ck_path)?;
    let loss = out.join(format!("{}_loss.csv", kind.label()));
    trained.write_history_csv(&mut BufWriter::new(File::create(&loss)?))?;
    let scores = score_model(&trained.model, &sets.train, &sets.test, config.exec)?;
    manifest.finish(out, &[&ck_path, &loss], json(&scores))?;
    Ok((trained, scores))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub eps: f64,
    /// Step for the model-based torsion checks.
    pub model_eps: f64,
    pub split: SplitFractions,
    /// Records used by the derivative-based checks.
    pub max_points: usize,
    pub histogram_bins: usize,
    pub exec: Execution,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            eps: DEFAULT_EPS,
            model_eps: 1e-5,
            split: SplitFractions::default(),
            max_points: 1000,
            histogram_bins: 50,
            exec: Execution::Parallel,
        }
    }
}

pub struct VerifyInputs<'a> {
    pub dataset: &'a Dataset,
    pub cy: Option<&'a CorrectionNet>,
    pub phi: Option<&'a DenseModel>,
    pub metric: Option<&'a DenseModel>,
}

/// Dataset checks on every record, derivative checks on a subsample and
/// model checks on the test split.
pub fn verify(inputs: &VerifyInputs, cfg: &VerifyConfig) -> Result<VerificationReport> {
    let ds = inputs.dataset;
    let exec = cfg.exec;
    let all: Vec<&G2Sample> = ds.samples.iter().collect();
    let mut report = VerificationReport {
        mode: Some(ds.header.mode),
        records: ds.samples.len(),
        wedge: wedge_stats(&ds.samples, exec),
        hodge: hodge_stats(&ds.samples, exec),
        volume: volume_fit(&ds.samples),
        ..Default::default()
    };
    let structure = ds.structure(inputs.cy).ok();
    if let Some(st) = &structure {
        let sub = subsample(&all, cfg.max_points);
        report.contact = Some(contact_stats(st, &sub, cfg.eps, exec));
        report.torsion = Some(exact_torsion(st, &sub, cfg.eps, exec));
    } else {
        log::warn!("no CY model given for an nn-mode dataset; derivative checks skipped");
    }
    let sets = partition(&ds.samples, ds.header.seed, &cfg.split);
    for m in [inputs.phi, inputs.metric].into_iter().flatten() {
        report.models.push(score_model(m, &sets.train, &sets.test, exec)?);
    }
    if let (Some(phi), Some(st)) = (inputs.phi, &structure) {
        let sub = subsample(&sets.test, cfg.max_points);
        report.model_torsion = Some(model_torsion(st, phi, inputs.metric, &sub, cfg.model_eps, exec));
    }
    Ok(report)
}

/// Write `report.json` and the per-point and histogram CSVs.
pub fn write_report(report: &VerificationReport, ds: &Dataset, out: &Path) -> Result<Vec<PathBuf>> {
    ensure_dir(out)?;
    let mut paths = Vec::new();
    let p = out.join("report.json");
    std::fs::write(&p, serde_json::to_string_pretty(report).unwrap())?;
    paths.push(p);

    let p = out.join("wedge_ratio.csv");
    let mut w = BufWriter::new(File::create(&p)?);
    writeln!(w, "index,ratio")?;
    for (i, s) in ds.samples.iter().enumerate() {
        writeln!(w, "{i},{:.17e}", s.wedge_ratio())?;
    }
    w.flush()?;
    paths.push(p);

    let p = out.join("volume.csv");
    let mut w = BufWriter::new(File::create(&p)?);
    writeln!(w, "vol_cy,vol_g2")?;
    for s in &ds.samples {
        writeln!(w, "{:e},{:e}", s.vol_cy, s.vol_g2)?;
    }
    w.flush()?;
    paths.push(p);

    let phi_cols: Vec<Vec<f64>> = (0..35).map(|k| ds.samples.iter().map(|s| s.phi[k]).collect()).collect();
    let g_cols: Vec<Vec<f64>> = (0..28).map(|k| ds.samples.iter().map(|s| s.g[k]).collect()).collect();
    for (name, cols) in [("phi_histogram.csv", phi_cols), ("metric_histogram.csv", g_cols)] {
        let p = out.join(name);
        let mut w = BufWriter::new(File::create(&p)?);
        write_histograms(&mut w, &cols, 50)?;
        w.flush()?;
        paths.push(p);
    }
    Ok(paths)
}

pub struct VerifyPaths<'a> {
    pub dataset: &'a Path,
    pub cy: Option<&'a Path>,
    pub phi: Option<&'a Path>,
    pub metric: Option<&'a Path>,
}

pub fn run_verify(paths: &VerifyPaths, cfg: &VerifyConfig, out: &Path) -> Result<VerificationReport> {
    ensure_dir(out)?;
    let ds = Dataset::load(paths.dataset)?;
    let cy = paths.cy.map(load_cy_model).transpose()?;
    let phi = paths.phi.map(load_regressor).transpose()?;
    let metric = paths.metric.map(load_regressor).transpose()?;
    for (m, want) in [(&phi, RegressorKind::Form), (&metric, RegressorKind::Metric)] {
        if let Some(m) = m {
            if m.kind != want {
                return Err(Error::InvalidArgument(format!("expected a {} model, got {}", want.label(), m.kind.label())));
            }
        }
    }
    let inputs: Vec<&Path> = [Some(paths.dataset), paths.cy, paths.phi, paths.metric].into_iter().flatten().collect();
    let manifest = Manifest::new("verify", ds.header.seed, json(cfg), &inputs)?;
    let report = verify(&VerifyInputs { dataset: &ds, cy: cy.as_ref(), phi: phi.as_ref(), metric: metric.as_ref() }, cfg)?;
    let written = write_report(&report, &ds, out)?;
    let refs: Vec<&Path> = written.iter().map(PathBuf::as_path).collect();
    manifest.finish(out, &refs, serde_json::Value::Null)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepConfig {
    pub eps: Vec<f64>,
    pub max_points: usize,
    pub split: SplitFractions,
    pub exec: Execution,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { eps: default_sweep_grid(), max_points: 200, split: SplitFractions::default(), exec: Execution::Parallel }
    }
}

/// Half-decade grid from 1e-12 to 1.
pub fn default_sweep_grid() -> Vec<f64> {
    ned::log_grid(1e-12, 1.0, 25)
}

/// ε-sweeps of `‖dω‖` (the Kähler defect) and, with models, of `‖dψ‖` and
/// `‖dφ‖`. Returns `(name, result)` pairs.
pub fn sweep(
    ds: &Dataset,
    cy: Option<&CorrectionNet>,
    phi: Option<&DenseModel>,
    metric: Option<&DenseModel>,
    cfg: &SweepConfig,
) -> Result<Vec<(String, SweepResult)>> {
    let structure = ds.structure(cy)?;
    let sets = partition(&ds.samples, ds.header.seed, &cfg.split);
    let pool = if sets.test.is_empty() { ds.samples.iter().collect() } else { sets.test };
    let sub = subsample(&pool, cfg.max_points);
    let charts: Vec<(ChartMap, [f64; 7])> = sub.iter().map(|s| chart_of(s)).collect::<Result<_>>()?;
    let mut out = Vec::new();

    // Each point gets its own chart, so the evaluator is indexed by point.
    let run = |degree: usize, f: &(dyn Fn(&ChartMap, &[f64]) -> Result<AltForm> + Sync)| -> Result<SweepResult> {
        let mut rows: Vec<(f64, Vec<Result<f64>>)> = Vec::new();
        for &eps in &cfg.eps {
            let norms = par::map_slice(cfg.exec, &charts, |(chart, y)| {
                let ev = FnEvaluator::new(7, degree, |p: &[f64]| f(chart, p));
                ned::ned(&ev, y, eps).map(|d| d.euclidean_norm())
            });
            rows.push((eps, norms));
        }
        let medians: Vec<f64> = rows
            .iter()
            .map(|(_, n)| median(n.iter().filter_map(|r| r.as_ref().ok().copied()).collect()))
            .collect();
        let failures = rows.iter().map(|(_, n)| n.iter().filter(|r| r.is_err()).count()).sum();
        let regimes = ned::classify(&cfg.eps, &medians);
        Ok(SweepResult {
            rows: cfg
                .eps
                .iter()
                .zip(&medians)
                .zip(regimes)
                .map(|((&eps, &median_norm), regime)| ned::SweepRow { eps, median_norm, regime })
                .collect(),
            failures,
        })
    };

    out.push(("kahler_defect".to_string(), run(2, &|c, p| Ok(structure.forms_at(c, p)?.omega))?));
    match phi {
        Some(pm) => {
            let c_eta = structure.c_eta;
            out.push((
                "dphi".into(),
                run(3, &|c, p| ModelForms { phi: pm, metric, chart: *c, c_eta }.phi_at(p))?,
            ));
            out.push((
                "dpsi".into(),
                run(4, &|c, p| ModelForms { phi: pm, metric, chart: *c, c_eta }.psi_at(p))?,
            ));
        }
        None => {
            out.push(("dpsi".into(), run(4, &|c, p| Ok(structure.forms_at(c, p)?.psi()))?));
        }
    }
    Ok(out)
}

pub fn run_sweep(
    dataset: &Path,
    cy: Option<&Path>,
    phi: Option<&Path>,
    metric: Option<&Path>,
    cfg: &SweepConfig,
    out: &Path,
) -> Result<Vec<(String, SweepResult)>> {
    ensure_dir(out)?;
    let ds = Dataset::load(dataset)?;
    let cy_net = cy.map(load_cy_model).transpose()?;
    let phi_m = phi.map(load_regressor).transpose()?;
    let metric_m = metric.map(load_regressor).transpose()?;
    let inputs: Vec<&Path> = [Some(dataset), cy, phi, metric].into_iter().flatten().collect();
    let manifest = Manifest::new("sweep-eps", ds.header.seed, json(cfg), &inputs)?;
    let results = sweep(&ds, cy_net.as_ref(), phi_m.as_ref(), metric_m.as_ref(), cfg)?;
    let mut written = Vec::new();
    for (name, r) in &results {
        let p = out.join(format!("sweep_{name}.csv"));
        let mut w = BufWriter::new(File::create(&p)?);
        r.write_csv(&mut w)?;
        w.flush()?;
        written.push(p);
    }
    let refs: Vec<&Path> = written.iter().map(PathBuf::as_path).collect();
    manifest.finish(out, &refs, json(&results))?;
    Ok(results)
}
