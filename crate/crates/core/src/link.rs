//! The S⁹ link over the quintic and its coclosed G2-structure.
//!
//! A link point is `x = e^{iθ} Z/|Z|` where `Z` is the affine representative
//! of a quintic point in its chart `(a, e)`. Link charts use the coordinates
//! `(u₁ … u₆, θ)`: `u` are the interleaved real and imaginary parts of the
//! base coordinates `w`, and `θ = arg x_a`. Ambient coordinates are ordered
//! `(Re x₀ … Re x₄, Im x₀ … Im x₄)`.
//!
//! With `ω = i h_{jk̄} dw^j∧dw̄^k`, `η = c_η Im(x̄·dx)` and `Υ = λ c dw¹∧dw²∧dw³`,
//!
//! ```text
//! φ = η∧ω + Re Υ,    ψ = ½ ω∧ω − η∧Im Υ.
//! ```
//!
//! The sign in front of `η∧Im Υ` is the one for which `ψ = *φ` in a frame
//! where `ω` and `Υ` take their flat form.

use std::f64::consts::TAU;

use nalgebra::{DMatrix, Matrix6};

use crate::cymetric::CorrectionNet;
use crate::error::{Error, Result};
use crate::exterior::{metric_from_3form, AltForm, MetricTensor};
use crate::ned::{self, median, FnEvaluator};
use crate::par::{self, Execution};
use crate::quintic::{AffinePoint, HermitianMetric3, HoloVolSample, Patch, QuinticPoint, C64};
use crate::rng::{hash_unit, streams};

pub const THETA: usize = 6;
const I: C64 = C64::new(0.0, 1.0);

/// Chart condition above which a chart evaluation is refused.
pub const MAX_IMPLICIT_CONDITION: f64 = 1e6;

/// Link chart `(u, θ) ↦ e^{iθ} Z(w)/|Z(w)|` around a base point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChartMap {
    pub patch: Patch,
    /// Selects the branch of the fifth root for `Z_e`.
    pub ze_ref: C64,
}

/// A chart evaluation: the base chart point, ambient point and Jacobian.
#[derive(Clone, Debug)]
pub struct ChartEval {
    pub ap: AffinePoint,
    pub x: [C64; 5],
    /// `jac[r][i] = ∂x_i/∂y_r` in ambient real coordinates.
    pub jac: [[f64; 10]; 7],
}

impl ChartEval {
    pub fn ambient(&self) -> [f64; 10] {
        let mut out = [0.0; 10];
        for m in 0..5 {
            out[m] = self.x[m].re;
            out[5 + m] = self.x[m].im;
        }
        out
    }

    pub fn jacobian(&self) -> DMatrix<f64> {
        DMatrix::from_fn(7, 10, |r, i| self.jac[r][i])
    }

    /// `c_η Im(x̄·∂x/∂y_r)` for every chart direction.
    pub fn contact_form(&self, c_eta: f64) -> AltForm {
        let mut v = [0.0; 7];
        for (r, row) in self.jac.iter().enumerate() {
            let mut s = 0.0;
            for m in 0..5 {
                s += self.x[m].re * row[5 + m] - self.x[m].im * row[m];
            }
            v[r] = c_eta * s;
        }
        AltForm::one_form(&v)
    }
}

impl ChartMap {
    /// Chart centred on a base point, returning the point's `u` coordinates.
    pub fn for_point(p: &QuinticPoint) -> Result<(Self, [f64; 6])> {
        let ap = AffinePoint::from_homogeneous(&p.z, p.patch)?;
        let map = Self {
            patch: p.patch,
            ze_ref: ap.zz[p.patch.e],
        };
        Ok((map, interleave(&ap.w())))
    }

    /// Chart and coordinates of an ambient point known to lie in `patch`.
    pub fn from_ambient(x: &[f64; 10], patch: Patch) -> Result<(Self, [f64; 7])> {
        let z: [C64; 5] = std::array::from_fn(|m| C64::new(x[m], x[5 + m]));
        let za = z[patch.a];
        if za.norm() == 0.0 {
            return Err(Error::IllConditioned("z_a vanishes".into()));
        }
        let zz = z.map(|c| c / za);
        let w = patch.retained().map(|r| zz[r]);
        let u = interleave(&w);
        let mut y = [0.0; 7];
        y[..6].copy_from_slice(&u);
        y[THETA] = za.arg().rem_euclid(TAU);
        Ok((
            Self {
                patch,
                ze_ref: zz[patch.e],
            },
            y,
        ))
    }

    pub fn affine(&self, y: &[f64]) -> Result<AffinePoint> {
        if y.len() < 6 {
            return Err(Error::DimensionMismatch {
                expected: 7,
                found: y.len(),
            });
        }
        let w = [C64::new(y[0], y[1]), C64::new(y[2], y[3]), C64::new(y[4], y[5])];
        let ap = AffinePoint::from_local(&w, self.patch, self.ze_ref)?;
        let cond = ap.implicit_condition();
        if !(cond < MAX_IMPLICIT_CONDITION) {
            return Err(Error::IllConditioned(format!("implicit solve condition {cond:e}")));
        }
        Ok(ap)
    }

    pub fn eval(&self, y: &[f64]) -> Result<ChartEval> {
        if y.len() != 7 {
            return Err(Error::DimensionMismatch {
                expected: 7,
                found: y.len(),
            });
        }
        let ap = self.affine(y)?;
        let phase = C64::from_polar(1.0, y[THETA]);
        let n2: f64 = ap.zz.iter().map(|c| c.norm_sqr()).sum();
        let n = n2.sqrt();
        let x = ap.zz.map(|c| phase * c / n);
        let mut jac = [[0.0; 10]; 7];
        for r in 0..6 {
            let unit = if r % 2 == 0 { C64::new(1.0, 0.0) } else { I };
            let dz: [C64; 5] = std::array::from_fn(|m| ap.jac[m][r / 2] * unit);
            let re_dot: f64 = (0..5).map(|m| (ap.zz[m].conj() * dz[m]).re).sum();
            for m in 0..5 {
                let dx = phase * (dz[m] / n - ap.zz[m] * (re_dot / (n2 * n)));
                jac[r][m] = dx.re;
                jac[r][5 + m] = dx.im;
            }
        }
        for m in 0..5 {
            let dx = I * x[m];
            jac[THETA][m] = dx.re;
            jac[THETA][5 + m] = dx.im;
        }
        Ok(ChartEval { ap, x, jac })
    }
}

fn interleave(w: &[C64; 3]) -> [f64; 6] {
    [w[0].re, w[0].im, w[1].re, w[1].im, w[2].re, w[2].im]
}

#[derive(Clone, Debug)]
pub struct LinkPoint {
    /// Ambient coordinates on S⁹.
    pub x: [f64; 10],
    pub theta: f64,
    pub base: QuinticPoint,
    pub chart: ChartMap,
    /// Chart coordinates `(u₁ … u₆, θ)`.
    pub coords: [f64; 7],
    /// `J[r][i] = ∂x_i/∂y_r`.
    pub jac: [[f64; 10]; 7],
}

impl LinkPoint {
    pub fn jacobian(&self) -> DMatrix<f64> {
        DMatrix::from_fn(7, 10, |r, i| self.jac[r][i])
    }
}

/// Lift a quintic point to the link at fibre angle `θ`.
pub fn lift_to_link(p: &QuinticPoint, theta: f64) -> Result<LinkPoint> {
    let theta = theta.rem_euclid(TAU);
    let (chart, u) = ChartMap::for_point(p)?;
    let mut coords = [0.0; 7];
    coords[..6].copy_from_slice(&u);
    coords[THETA] = theta;
    let ev = chart.eval(&coords)?;
    Ok(LinkPoint {
        x: ev.ambient(),
        theta,
        base: p.clone(),
        chart,
        coords,
        jac: ev.jac,
    })
}

/// `η = c_η Σ (x_i dy_i − y_i dx_i)` pulled back to chart coordinates.
pub fn contact_form(lp: &LinkPoint, c_eta: f64) -> AltForm {
    let mut v = [0.0; 7];
    for (r, row) in lp.jac.iter().enumerate() {
        v[r] = c_eta * (0..5).map(|m| lp.x[m] * row[5 + m] - lp.x[5 + m] * row[m]).sum::<f64>();
    }
    AltForm::one_form(&v)
}

/// `s(∂_a, ∂_b) = Σ h_{jk} dw^j(∂_a) conj(dw^k(∂_b))` on the six base directions.
fn hermitian_pairing(h: &HermitianMetric3) -> [[C64; 6]; 6] {
    let dw = |a: usize| if a % 2 == 0 { C64::new(1.0, 0.0) } else { I };
    let mut s = [[C64::new(0.0, 0.0); 6]; 6];
    for a in 0..6 {
        for b in 0..6 {
            s[a][b] = h.0[(a / 2, b / 2)] * dw(a) * dw(b).conj();
        }
    }
    s
}

/// Kähler form `ω = i h_{jk̄} dw^j∧dw̄^k` on the six base coordinates,
/// embedded in the seven link coordinates with no θ components.
pub fn kahler_form(h: &HermitianMetric3) -> AltForm {
    let s = hermitian_pairing(h);
    let mut w = AltForm::zero(7, 2);
    for a in 0..6 {
        for b in a + 1..6 {
            w.set(crate::exterior::MultiIndex::new(7, &[a, b]).unwrap(), -2.0 * s[a][b].im);
        }
    }
    w
}

/// Riemannian metric `2 Re h` on the six real base coordinates.
pub fn base_metric6(h: &HermitianMetric3) -> Matrix6<f64> {
    let s = hermitian_pairing(h);
    Matrix6::from_fn(|a, b| 2.0 * s[a][b].re)
}

pub fn pullback_base_2form(h: &HermitianMetric3, _lp: &LinkPoint) -> AltForm {
    kahler_form(h)
}

/// Real and imaginary parts of `dw¹∧dw²∧dw³` in link coordinates.
fn dw123() -> (AltForm, AltForm) {
    let du = |i: usize| {
        let mut v = [0.0; 7];
        v[i] = 1.0;
        AltForm::one_form(&v)
    };
    let mut re = AltForm::scalar(7, 1.0);
    let mut im = AltForm::zero(7, 0);
    for l in 0..3 {
        let (a, b) = (du(2 * l), du(2 * l + 1));
        let new_re = &re.wedge(&a).unwrap() - &im.wedge(&b).unwrap();
        let new_im = &re.wedge(&b).unwrap() + &im.wedge(&a).unwrap();
        re = new_re;
        im = new_im;
    }
    (re, im)
}

/// `(Re, Im)` of `λ c dw¹∧dw²∧dw³` in link coordinates.
pub fn upsilon_forms(c: C64, lambda: C64) -> (AltForm, AltForm) {
    let v = lambda * c;
    let (re, im) = dw123();
    (&re.scaled(v.re) - &im.scaled(v.im), &im.scaled(v.re) + &re.scaled(v.im))
}

pub fn pullback_upsilon(c: HoloVolSample, _lp: &LinkPoint, lambda: C64) -> (AltForm, AltForm) {
    upsilon_forms(c.c, lambda)
}

/// Top coefficient of `ω³/3!` on the base coordinates.
pub fn omega_volume(omega: &AltForm) -> f64 {
    let w2 = omega.wedge(omega).unwrap();
    let w3 = w2.wedge(omega).unwrap();
    w3.coeff(&[0, 1, 2, 3, 4, 5]).unwrap() / 6.0
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct UpsilonNormalization {
    /// Real positive scale applied to `Υ`.
    pub lambda: f64,
    /// Interquartile range of the per-point ratios over their median.
    pub spread: f64,
    pub samples: usize,
}

/// Spread above which the base metric is reported as far from Ricci-flat.
pub const MAX_SPREAD: f64 = 0.5;

/// Choose `λ > 0` with `λ² = median(vol_ω / |c|²)` where `vol_ω` is the
/// coefficient of `ω³/3!`. This makes `λ²|c|² = ω³/3!` hold at the median
/// point; with `ω` and `Υ` flat it reproduces the model 3-form exactly.
///
/// `samples` holds `(vol_ω, |c|²)` pairs.
pub fn normalize_upsilon(samples: &[(f64, f64)]) -> Result<UpsilonNormalization> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples to normalise Υ".into()));
    }
    if samples.len() < 1000 {
        log::warn!("normalising Υ on only {} samples", samples.len());
    }
    let mut ratios: Vec<f64> = samples
        .iter()
        .map(|&(vol, c2)| vol / c2)
        .filter(|r| r.is_finite() && *r > 0.0)
        .collect();
    if ratios.is_empty() {
        return Err(Error::InvalidArgument("no finite positive volume ratios".into()));
    }
    ratios.sort_by(f64::total_cmp);
    let q = |f: f64| ratios[((ratios.len() - 1) as f64 * f).round() as usize];
    let mid = median(ratios.clone());
    let spread = (q(0.75) - q(0.25)) / mid;
    if spread > MAX_SPREAD {
        log::warn!("Υ normalisation ratios spread by {spread:.2} of the median: base metric far from Ricci-flat");
    }
    Ok(UpsilonNormalization {
        lambda: mid.sqrt(),
        spread,
        samples: ratios.len(),
    })
}

/// One dataset record.
#[derive(Clone, Debug, PartialEq)]
pub struct G2Sample {
    pub phi: [f64; 35],
    pub psi: [f64; 35],
    /// Lower triangle of `g_φ`, row-major.
    pub g: [f64; 28],
    pub vol_g2: f64,
    pub vol_cy: f64,
    pub eta: [f64; 7],
    pub input19: [f64; 19],
    pub patch: Patch,
    pub base_id: u64,
    pub theta: f64,
}

impl G2Sample {
    pub fn phi_form(&self) -> AltForm {
        AltForm::from_coeffs(7, 3, self.phi.to_vec()).unwrap()
    }

    pub fn psi_form(&self) -> AltForm {
        AltForm::from_coeffs(7, 4, self.psi.to_vec()).unwrap()
    }

    pub fn metric(&self) -> MetricTensor {
        MetricTensor::from_lower_triangle(7, &self.g).unwrap()
    }

    pub fn ambient(&self) -> [f64; 10] {
        self.input19[..10].try_into().unwrap()
    }

    /// `(φ∧ψ) / vol_g2`; seven for a compatible structure.
    pub fn wedge_ratio(&self) -> f64 {
        self.phi_form().wedge(&self.psi_form()).unwrap().top_coefficient().unwrap() / self.vol_g2
    }
}

/// `[x (10), η (7), a, e]`.
pub fn input19(x: &[f64; 10], eta: &AltForm, patch: Patch) -> [f64; 19] {
    let mut out = [0.0; 19];
    out[..10].copy_from_slice(x);
    out[10..17].copy_from_slice(eta.coeffs());
    out[17] = patch.a as f64;
    out[18] = patch.e as f64;
    out
}

pub fn structural_phi(eta: &AltForm, omega: &AltForm, re_u: &AltForm) -> AltForm {
    &eta.wedge(omega).unwrap() + re_u
}

pub fn structural_psi(eta: &AltForm, omega: &AltForm, im_u: &AltForm) -> AltForm {
    &omega.wedge(omega).unwrap().scaled(0.5) - &eta.wedge(im_u).unwrap()
}

pub fn build_g2_sample(lp: &LinkPoint, omega: &AltForm, re_u: &AltForm, im_u: &AltForm, eta: &AltForm) -> Result<G2Sample> {
    let phi = structural_phi(eta, omega, re_u);
    let psi = structural_psi(eta, omega, im_u);
    let (g, vol_g2) = metric_from_3form(&phi)?;
    Ok(G2Sample {
        phi: phi.coeffs().try_into().unwrap(),
        psi: psi.coeffs().try_into().unwrap(),
        g: g.lower_triangle().try_into().unwrap(),
        vol_g2,
        vol_cy: omega_volume(omega),
        eta: eta.coeffs().try_into().unwrap(),
        input19: input19(&lp.x, eta, lp.chart.patch),
        patch: lp.chart.patch,
        base_id: 0,
        theta: lp.theta,
    })
}

/// Where the Kähler form comes from.
#[derive(Clone, Debug)]
pub enum KahlerSource {
    FubiniStudy,
    Corrected(Box<CorrectionNet>),
}

impl KahlerSource {
    pub fn metric(&self, ap: &AffinePoint) -> HermitianMetric3 {
        match self {
            KahlerSource::FubiniStudy => ap.fs_metric(),
            KahlerSource::Corrected(net) => net.metric_at(ap),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            KahlerSource::FubiniStudy => "fs",
            KahlerSource::Corrected(_) => "nn",
        }
    }
}

/// Every form of the structure at one chart point.
#[derive(Clone, Debug)]
pub struct LinkForms {
    pub x: [f64; 10],
    pub h: HermitianMetric3,
    pub eta: AltForm,
    pub omega: AltForm,
    pub re_u: AltForm,
    pub im_u: AltForm,
}

impl LinkForms {
    pub fn phi(&self) -> AltForm {
        structural_phi(&self.eta, &self.omega, &self.re_u)
    }

    pub fn psi(&self) -> AltForm {
        structural_psi(&self.eta, &self.omega, &self.im_u)
    }

    pub fn omega_squared(&self) -> AltForm {
        self.omega.wedge(&self.omega).unwrap()
    }
}

/// The calibrated structure: Kähler source, `c_η` and `λ`.
#[derive(Clone, Debug)]
pub struct LinkStructure {
    pub source: KahlerSource,
    pub c_eta: f64,
    pub lambda: f64,
}

impl LinkStructure {
    pub fn forms_at(&self, chart: &ChartMap, y: &[f64]) -> Result<LinkForms> {
        let ev = chart.eval(y)?;
        let h = self.source.metric(&ev.ap);
        let (re_u, im_u) = upsilon_forms(ev.ap.holo_volume().c, C64::new(self.lambda, 0.0));
        Ok(LinkForms {
            x: ev.ambient(),
            eta: ev.contact_form(self.c_eta),
            omega: kahler_form(&h),
            h,
            re_u,
            im_u,
        })
    }

    pub fn sample(&self, lp: &LinkPoint) -> Result<G2Sample> {
        let f = self.forms_at(&lp.chart, &lp.coords)?;
        build_g2_sample(lp, &f.omega, &f.re_u, &f.im_u, &f.eta)
    }

    /// `η∧(dη)³` top coefficient with `dη` from the numerical derivative.
    pub fn contact_volume(&self, lp: &LinkPoint, eps: f64) -> Result<f64> {
        self.contact_volume_at(&lp.chart, &lp.coords, eps)
    }

    pub fn contact_volume_at(&self, chart: &ChartMap, y: &[f64], eps: f64) -> Result<f64> {
        let chart = *chart;
        let c_eta = self.c_eta;
        let f = FnEvaluator::new(7, 1, move |y: &[f64]| Ok(chart.eval(y)?.contact_form(c_eta)));
        let deta = ned::ned(&f, y, eps)?;
        let eta = chart.eval(y)?.contact_form(c_eta);
        let d3 = deta.wedge(&deta)?.wedge(&deta)?;
        eta.wedge(&d3)?.top_coefficient()
    }
}

/// Fibre angles `2π(offset + k)/count` with a seeded global offset.
pub fn fibre_angles(count: usize, seed: u64) -> Vec<f64> {
    let offset = hash_unit(seed, streams::THETA, 0);
    (0..count).map(|k| TAU * (offset + k as f64) / count as f64).collect()
}

/// Least-squares `c_η` matching `NED(η)` to the FS Kähler form.
pub fn calibrate_contact(points: &[QuinticPoint], eps: f64, seed: u64, exec: Execution) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("no points to calibrate the contact form".into()));
    }
    let parts = par::map_indices(exec, points.len(), |i| -> Result<(f64, f64)> {
        let theta = TAU * hash_unit(seed, streams::CALIBRATION, i as u64);
        let lp = lift_to_link(&points[i], theta)?;
        let chart = lp.chart;
        let f = FnEvaluator::new(7, 1, move |y: &[f64]| Ok(chart.eval(y)?.contact_form(1.0)));
        let d = ned::ned(&f, &lp.coords, eps)?;
        let omega = kahler_form(&AffinePoint::from_homogeneous(&points[i].z, points[i].patch)?.fs_metric());
        let dot: f64 = d.coeffs().iter().zip(omega.coeffs()).map(|(a, b)| a * b).sum();
        let nn: f64 = d.coeffs().iter().map(|a| a * a).sum();
        Ok((dot, nn))
    });
    let (mut dot, mut nn) = (0.0, 0.0);
    let mut skipped = 0;
    for p in parts {
        match p {
            Ok((a, b)) => {
                dot += a;
                nn += b;
            }
            Err(e) => {
                skipped += 1;
                log::debug!("contact calibration skipped a point: {e}");
            }
        }
    }
    if skipped > 0 {
        log::warn!("contact calibration skipped {skipped} points");
    }
    if !(nn > 0.0) {
        return Err(Error::IllConditioned("contact calibration has no usable points".into()));
    }
    Ok(dot / nn)
}

/// `(ω³/3!, |c|²)` at each base point for [`normalize_upsilon`].
pub fn normalization_inputs(points: &[QuinticPoint], source: &KahlerSource, exec: Execution) -> Result<Vec<(f64, f64)>> {
    par::map_slice(exec, points, |p| -> Result<(f64, f64)> {
        let ap = AffinePoint::from_homogeneous(&p.z, p.patch)?;
        Ok((omega_volume(&kahler_form(&source.metric(&ap))), ap.holo_volume().c.norm_sqr()))
    })
    .into_iter()
    .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BuildReport {
    pub base_points: usize,
    pub dropped_base_points: usize,
    pub records: usize,
}

/// Records for every base point at `thetas` fibre angles, in base-major order.
pub fn build_samples(
    points: &[QuinticPoint],
    thetas: usize,
    seed: u64,
    structure: &LinkStructure,
    exec: Execution,
) -> Result<(Vec<G2Sample>, BuildReport)> {
    if thetas == 0 {
        return Err(Error::InvalidArgument("need at least one fibre angle".into()));
    }
    let angles = fibre_angles(thetas, seed);
    let per_point = par::map_indices(exec, points.len(), |i| -> Result<Vec<G2Sample>> {
        angles
            .iter()
            .map(|&theta| {
                let lp = lift_to_link(&points[i], theta)?;
                let mut s = structure.sample(&lp)?;
                s.base_id = i as u64;
                Ok(s)
            })
            .collect()
    });
    let mut out = Vec::with_capacity(points.len() * thetas);
    let mut report = BuildReport {
        base_points: points.len(),
        ..Default::default()
    };
    for (i, r) in per_point.into_iter().enumerate() {
        match r {
            Ok(s) => out.extend(s),
            Err(e @ (Error::IllConditioned(_) | Error::VanishingDenominator(_) | Error::DegenerateForm { .. })) => {
                log::warn!("dropping base point {i}: {e}");
                report.dropped_base_points += 1;
            }
            Err(e) => return Err(e),
        }
    }
    report.records = out.len();
    Ok((out, report))
}
