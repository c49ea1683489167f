//! The Fermat quintic `z₀⁵ + ⋯ + z₄⁵ = 0` in CP⁴.
//!
//! Points are sampled by intersecting random projective lines with the
//! hypersurface. Each point is assigned one affine chart `(a, e)` for good:
//! `a` is the dehomogenised coordinate (`z_a = 1`) and `e` the coordinate
//! eliminated by the implicit-function theorem. The three retained
//! coordinates, in ascending index order, are the local holomorphic
//! coordinates `w = (w₁, w₂, w₃)`.
//!
//! Conventions:
//! * the Fubini–Study Hermitian metric is `h_{jk̄} = ∂_j ∂̄_k log Σ|z_i/z_a|²`;
//! * the holomorphic volume form is the Poincaré residue of the global
//!   4-form `Σ (−1)^i z_i dz_0 ∧ … ∧ d̂z_i ∧ … ∧ dz_4 / f`, which in chart
//!   `(a, e)` reads `Υ = c dw¹∧dw²∧dw³` with
//!   `c = (−1)^{a+p} / (∂f̂/∂Z_e)`, `p` being the position of `e` among the
//!   indices other than `a`.

use nalgebra::{Matrix3, Matrix5};
use num_complex::Complex64;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::rng::{item_rng, streams};

pub type C64 = Complex64;

/// Tolerance on `|f(z)|` for a unit-norm representative.
pub const ON_QUINTIC_TOL: f64 = 1e-10;

const ZERO: C64 = C64::new(0.0, 0.0);
const ONE: C64 = C64::new(1.0, 0.0);

/// Affine chart of the quintic: `a` is set to one, `e` is solved for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Patch {
    pub a: usize,
    pub e: usize,
}

impl Patch {
    pub fn new(a: usize, e: usize) -> Result<Self> {
        if a >= 5 || e >= 5 || a == e {
            return Err(Error::InvalidArgument(format!("invalid patch ({a}, {e})")));
        }
        Ok(Self { a, e })
    }

    /// The three local coordinates, ascending.
    pub fn retained(&self) -> [usize; 3] {
        let mut out = [0; 3];
        let mut n = 0;
        for i in 0..5 {
            if i != self.a && i != self.e {
                out[n] = i;
                n += 1;
            }
        }
        out
    }

    /// All 20 ordered charts.
    pub fn all() -> impl Iterator<Item = Patch> {
        (0..5).flat_map(|a| (0..5).filter(move |&e| e != a).map(move |e| Patch { a, e }))
    }

    fn residue_sign(&self) -> f64 {
        let p = if self.e < self.a { self.e } else { self.e - 1 };
        if (self.a + p) % 2 == 0 {
            1.0
        } else {
            -1.0
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuinticPoint {
    /// Unit-norm representative with `z_a` real and positive.
    pub z: [C64; 5],
    pub patch: Patch,
    /// Ratio of the Υ-volume density to the sampling density.
    pub weight: f64,
}

/// Hermitian 3×3 matrix `h_{jk̄}` in the local coordinates of a chart.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HermitianMetric3(pub Matrix3<C64>);

impl HermitianMetric3 {
    pub fn det(&self) -> f64 {
        self.0.determinant().re
    }

    pub fn hermiticity_defect(&self) -> f64 {
        (self.0 - self.0.adjoint()).camax()
    }

    pub fn is_positive_definite(&self) -> bool {
        self.0.cholesky().is_some()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self(self.0 * C64::new(s, 0.0))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HoloVolSample {
    pub c: C64,
}

pub fn eval_f(z: &[C64; 5]) -> C64 {
    z.iter().map(|zi| zi.powu(5)).sum()
}

pub fn grad_f(z: &[C64; 5]) -> [C64; 5] {
    z.map(|zi| 5.0 * zi.powu(4))
}

fn norm(z: &[C64; 5]) -> f64 {
    z.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
}

/// `a = argmax |z_i|`, `e = argmax_{i≠a} |∂f/∂z_i|`; ties go to the lower index.
pub fn select_patch(z: &[C64; 5]) -> Result<Patch> {
    let mut a = 0;
    for i in 1..5 {
        if z[i].norm() > z[a].norm() {
            a = i;
        }
    }
    let grad = grad_f(z);
    let mut e = usize::MAX;
    for i in (0..5).filter(|&i| i != a) {
        if e == usize::MAX || grad[i].norm() > grad[e].norm() {
            e = i;
        }
    }
    let scale = z[a].norm().powi(4).max(f64::MIN_POSITIVE);
    if grad[e].norm() < 1e-12 * scale {
        return Err(Error::IllConditioned(format!(
            "all chart gradients vanish at {z:?}"
        )));
    }
    Ok(Patch { a, e })
}

/// Rescale to unit norm with `z_a` real and positive.
pub fn canonical_representative(z: &[C64; 5], a: usize) -> [C64; 5] {
    let n = norm(z);
    let phase = z[a].conj() / z[a].norm();
    let mut out = z.map(|zi| zi * phase / n);
    out[a] = C64::new(z[a].norm() / n, 0.0);
    out
}

/// A point expressed in an affine chart together with the derivatives of
/// the affine coordinates with respect to the local coordinates.
#[derive(Clone, Debug)]
pub struct AffinePoint {
    pub patch: Patch,
    /// `Z_i = z_i / z_a` (so `Z_a = 1`).
    pub zz: [C64; 5],
    /// `∂Z_m / ∂w_l`.
    pub jac: [[C64; 3]; 5],
    /// `∂f̂/∂Z_e = 5 Z_e⁴`.
    pub df_de: C64,
}

impl AffinePoint {
    pub fn from_homogeneous(z: &[C64; 5], patch: Patch) -> Result<Self> {
        let za = z[patch.a];
        if za.norm() == 0.0 {
            return Err(Error::IllConditioned("z_a vanishes".into()));
        }
        let zz = z.map(|zi| zi / za);
        Self::from_affine(zz, patch)
    }

    /// Chart point at local coordinates `w`, solving `f̂ = 0` for `Z_e` on the
    /// branch closest to `ze_ref`.
    pub fn from_local(w: &[C64; 3], patch: Patch, ze_ref: C64) -> Result<Self> {
        let rhs = -(ONE + w.iter().map(|wi| wi.powu(5)).sum::<C64>());
        let principal = if rhs.norm() == 0.0 { ZERO } else { rhs.powf(0.2) };
        let mut best = principal;
        for k in 1..5 {
            let cand = principal * C64::from_polar(1.0, 2.0 * std::f64::consts::PI * k as f64 / 5.0);
            if (cand - ze_ref).norm() < (best - ze_ref).norm() {
                best = cand;
            }
        }
        let mut zz = [ZERO; 5];
        zz[patch.a] = ONE;
        zz[patch.e] = best;
        for (l, &r) in patch.retained().iter().enumerate() {
            zz[r] = w[l];
        }
        Self::from_affine(zz, patch)
    }

    fn from_affine(zz: [C64; 5], patch: Patch) -> Result<Self> {
        let df_de = 5.0 * zz[patch.e].powu(4);
        if df_de.norm() < 1e-12 {
            return Err(Error::VanishingDenominator(df_de.norm()));
        }
        let mut jac = [[ZERO; 3]; 5];
        for (l, &r) in patch.retained().iter().enumerate() {
            jac[r][l] = ONE;
            jac[patch.e][l] = -(5.0 * zz[r].powu(4)) / df_de;
        }
        Ok(Self {
            patch,
            zz,
            jac,
            df_de,
        })
    }

    pub fn w(&self) -> [C64; 3] {
        self.patch.retained().map(|r| self.zz[r])
    }

    /// Largest `|∂Z_e/∂w_l|`; bounded by one for the canonical patch choice.
    pub fn implicit_condition(&self) -> f64 {
        self.jac[self.patch.e].iter().fold(0.0, |m, c| m.max(c.norm()))
    }

    pub fn fs_metric(&self) -> HermitianMetric3 {
        let s: f64 = self.zz.iter().map(|c| c.norm_sqr()).sum();
        let mut h = Matrix3::<C64>::zeros();
        for m in 0..5 {
            for n in 0..5 {
                let delta = if m == n { 1.0 / s } else { 0.0 };
                let g = C64::new(delta, 0.0) - self.zz[m].conj() * self.zz[n] / (s * s);
                for j in 0..3 {
                    if self.jac[m][j] == ZERO {
                        continue;
                    }
                    for k in 0..3 {
                        h[(j, k)] += self.jac[m][j] * g * self.jac[n][k].conj();
                    }
                }
            }
        }
        HermitianMetric3(h)
    }

    pub fn holo_volume(&self) -> HoloVolSample {
        HoloVolSample {
            c: self.patch.residue_sign() / self.df_de,
        }
    }
}

pub fn fs_metric(p: &QuinticPoint) -> Result<HermitianMetric3> {
    let ap = AffinePoint::from_homogeneous(&p.z, p.patch)?;
    let cond = ap.implicit_condition();
    if !(cond < 1e6) {
        return Err(Error::IllConditioned(format!("implicit solve condition {cond:e}")));
    }
    Ok(ap.fs_metric())
}

pub fn holo_volume_form(p: &QuinticPoint) -> Result<HoloVolSample> {
    Ok(AffinePoint::from_homogeneous(&p.z, p.patch)?.holo_volume())
}

/// `|c|² / det h_FS`: the density of `iΥ∧Ῡ` relative to the Fubini–Study
/// volume, which is the density the line-intersection sampler draws from.
/// Both numerator and denominator transform with `|det ∂w/∂w'|²` under a
/// change of chart, so the weight is chart independent.
pub fn sample_weight(p: &QuinticPoint) -> Result<f64> {
    let ap = AffinePoint::from_homogeneous(&p.z, p.patch)?;
    Ok(weight_of(&ap))
}

fn weight_of(ap: &AffinePoint) -> f64 {
    ap.holo_volume().c.norm_sqr() / ap.fs_metric().det()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingReport {
    pub lines: usize,
    pub skipped_lines: usize,
}

fn random_sphere_point(rng: &mut impl rand::Rng) -> [C64; 5] {
    let mut z = [ZERO; 5];
    for zi in z.iter_mut() {
        *zi = C64::new(StandardNormal.sample(rng), StandardNormal.sample(rng));
    }
    let n = norm(&z);
    z.map(|c| c / n)
}

fn binom5(k: usize) -> f64 {
    [1.0, 5.0, 10.0, 10.0, 5.0, 1.0][k]
}

/// Roots of `Σ_k coeffs[k] tᵏ` (degree five) via companion-matrix eigenvalues
/// followed by Newton polishing.
pub fn quintic_roots(coeffs: &[C64; 6]) -> Option<[C64; 5]> {
    let lead = coeffs[5];
    if lead.norm() < 1e-14 {
        return None;
    }
    let mut comp = Matrix5::<C64>::zeros();
    for i in 1..5 {
        comp[(i, i - 1)] = ONE;
    }
    for i in 0..5 {
        comp[(i, 4)] = -coeffs[i] / lead;
    }
    let eig = comp.schur().eigenvalues()?;
    let eval = |t: C64| -> (C64, C64) {
        let mut p = coeffs[5];
        let mut dp = ZERO;
        for k in (0..5).rev() {
            dp = dp * t + p;
            p = p * t + coeffs[k];
        }
        (p, dp)
    };
    let mut roots = [ZERO; 5];
    for (slot, &t0) in roots.iter_mut().zip(eig.iter()) {
        let mut t = t0;
        for _ in 0..30 {
            let (p, dp) = eval(t);
            if dp.norm() == 0.0 {
                break;
            }
            let step = p / dp;
            t -= step;
            if step.norm() <= 1e-16 * t.norm().max(1.0) {
                break;
            }
        }
        if !t.re.is_finite() || !t.im.is_finite() {
            return None;
        }
        *slot = t;
    }
    Some(roots)
}

/// The five intersection points of the line `{p + t q}` with the quintic,
/// or `None` if the root solve fails to meet the residual tolerance.
fn intersect_line(p: &[C64; 5], q: &[C64; 5]) -> Option<Vec<QuinticPoint>> {
    let mut coeffs = [ZERO; 6];
    for (k, slot) in coeffs.iter_mut().enumerate() {
        *slot = binom5(k) * (0..5).map(|i| p[i].powu(5 - k as u32) * q[i].powu(k as u32)).sum::<C64>();
    }
    let roots = quintic_roots(&coeffs)?;
    let mut out = Vec::with_capacity(5);
    for t in roots {
        let mut z = [ZERO; 5];
        for i in 0..5 {
            z[i] = p[i] + t * q[i];
        }
        let n = norm(&z);
        if !(n > 0.0) {
            return None;
        }
        let z = z.map(|c| c / n);
        let patch = select_patch(&z).ok()?;
        let z = canonical_representative(&z, patch.a);
        if eval_f(&z).norm() >= ON_QUINTIC_TOL {
            return None;
        }
        let ap = AffinePoint::from_homogeneous(&z, patch).ok()?;
        let weight = weight_of(&ap);
        if !(weight.is_finite() && weight > 0.0) {
            return None;
        }
        out.push(QuinticPoint { z, patch, weight });
    }
    Some(out)
}

const MAX_ATTEMPTS: u64 = 64;

/// Sample `count` points by intersecting random lines with the quintic.
///
/// Line `ℓ` uses its own generator derived from `(seed, ℓ, attempt)`, so the
/// output is identical in serial and parallel execution.
pub fn sample_points(count: usize, seed: u64, exec: Execution) -> Result<(Vec<QuinticPoint>, SamplingReport)> {
    if count == 0 {
        return Err(Error::InvalidArgument("count must be at least 1".into()));
    }
    let lines = count.div_ceil(5);
    let per_line = par::map_indices(exec, lines, |line| {
        for attempt in 0..MAX_ATTEMPTS {
            let mut rng = item_rng(seed, streams::LINES, (line as u64) * MAX_ATTEMPTS + attempt);
            let p = random_sphere_point(&mut rng);
            let q = random_sphere_point(&mut rng);
            if let Some(points) = intersect_line(&p, &q) {
                return Ok((points, attempt as usize));
            }
        }
        Err(Error::IllConditioned(format!("line {line}: root solve failed {MAX_ATTEMPTS} times")))
    });
    let mut report = SamplingReport {
        lines,
        skipped_lines: 0,
    };
    let mut points = Vec::with_capacity(lines * 5);
    for result in per_line {
        let (pts, skipped) = result?;
        report.skipped_lines += skipped;
        points.extend(pts);
    }
    points.truncate(count);
    if report.skipped_lines > 0 {
        log::info!("quintic sampler redrew {} lines", report.skipped_lines);
    }
    Ok((points, report))
}
