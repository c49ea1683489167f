//! Numerical exterior derivative of forms given as black-box evaluators.
//!
//! For a k-form `α` and an increasing multi-index `(i₀ … i_k)`,
//!
//! ```text
//! (dα)_{i₀…i_k} ≈ Σ_j (−1)^j [α_{…î_j…}(p + ε e_{i_j}) − α_{…î_j…}(p − ε e_{i_j})] / 2ε
//! ```
//!
//! which needs `2n` evaluations per point and is exact for affine
//! coefficients.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exterior::{AltForm, MultiIndex};
use crate::par::{self, Execution};

/// A differential form sampled in one fixed chart.
pub trait FormEvaluator: Sync {
    /// Number of chart coordinates.
    fn dim(&self) -> usize {
        7
    }

    fn degree(&self) -> usize;

    fn eval(&self, y: &[f64]) -> Result<AltForm>;
}

/// Evaluator backed by a closure.
pub struct FnEvaluator<F> {
    pub dim: usize,
    pub degree: usize,
    pub f: F,
}

impl<F> FnEvaluator<F>
where
    F: Fn(&[f64]) -> Result<AltForm> + Sync,
{
    pub fn new(dim: usize, degree: usize, f: F) -> Self {
        Self { dim, degree, f }
    }
}

impl<F> FormEvaluator for FnEvaluator<F>
where
    F: Fn(&[f64]) -> Result<AltForm> + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn degree(&self) -> usize {
        self.degree
    }

    fn eval(&self, y: &[f64]) -> Result<AltForm> {
        (self.f)(y)
    }
}

/// `d` of the form at `p` with central differences of half-width `eps`.
pub fn ned<E: FormEvaluator + ?Sized>(f: &E, p: &[f64], eps: f64) -> Result<AltForm> {
    let n = f.dim();
    let k = f.degree();
    if p.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: p.len(),
        });
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    if k >= n {
        return Err(Error::InvalidDegree { degree: k + 1, dim: n });
    }
    // diff[i] = α(p + ε e_i) − α(p − ε e_i)
    let mut diff = Vec::with_capacity(n);
    let mut y = p.to_vec();
    for i in 0..n {
        let side = |offset: f64, y: &mut Vec<f64>| -> Result<AltForm> {
            y[i] = p[i] + offset;
            let a = f.eval(y).map_err(|e| Error::Evaluator {
                coord: i,
                offset,
                reason: e.to_string(),
            })?;
            if a.dim() != n || a.degree() != k {
                return Err(Error::Evaluator {
                    coord: i,
                    offset,
                    reason: format!("returned a ({}, {}) form, expected ({n}, {k})", a.dim(), a.degree()),
                });
            }
            if a.coeffs().iter().any(|c| !c.is_finite()) {
                return Err(Error::Evaluator {
                    coord: i,
                    offset,
                    reason: "non-finite coefficient".into(),
                });
            }
            Ok(a)
        };
        let plus = side(eps, &mut y)?;
        let up = y[i];
        let minus = side(-eps, &mut y)?;
        // divide by the step actually taken after rounding
        let width = up - y[i];
        y[i] = p[i];
        diff.push((&plus - &minus).into_coeffs().into_iter().map(|c| c / width).collect::<Vec<_>>());
    }
    let mut out = AltForm::zero(n, k + 1);
    for idx in MultiIndex::all(n, k + 1) {
        let indices = idx.indices();
        let mut acc = 0.0;
        for (j, &i) in indices.iter().enumerate() {
            let mut rest = indices.clone();
            rest.remove(j);
            let sub = MultiIndex::new(n, &rest)?;
            let term = diff[i][sub.rank()];
            acc += if j % 2 == 0 { term } else { -term };
        }
        out.set(idx, acc);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    Collapse,
    Spike,
    Plateau,
    Transition,
}

impl Regime {
    pub fn label(self) -> &'static str {
        match self {
            Regime::Collapse => "collapse",
            Regime::Spike => "spike",
            Regime::Plateau => "plateau",
            Regime::Transition => "transition",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub eps: f64,
    pub median_norm: f64,
    pub regime: Regime,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// Stencil evaluations that failed, summed over ε.
    pub failures: usize,
}

pub const COLLAPSE_THRESHOLD: f64 = 1e-10;
pub const SPIKE_FACTOR: f64 = 10.0;
pub const PLATEAU_VARIATION: f64 = 0.2;

impl SweepResult {
    pub fn has(&self, regime: Regime) -> bool {
        self.rows.iter().any(|r| r.regime == regime)
    }

    /// Median norm on the plateau, if one was detected.
    pub fn plateau_value(&self) -> Option<f64> {
        let vals: Vec<f64> = self.rows.iter().filter(|r| r.regime == Regime::Plateau).map(|r| r.median_norm).collect();
        (!vals.is_empty()).then(|| median(vals))
    }

    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "epsilon,median_norm,regime")?;
        for r in &self.rows {
            writeln!(w, "{:e},{:e},{}", r.eps, r.median_norm, r.regime.label())?;
        }
        Ok(())
    }
}

pub fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Label each `(ε, median)` pair. The rules are heuristics: a median below
/// [`COLLAPSE_THRESHOLD`] is a collapse, a local maximum exceeding both
/// neighbours by [`SPIKE_FACTOR`] is a spike, and the top decade of ε is a
/// plateau when its medians vary by less than [`PLATEAU_VARIATION`].
pub fn classify(eps: &[f64], medians: &[f64]) -> Vec<Regime> {
    let n = eps.len();
    let mut out = vec![Regime::Transition; n];
    let top = eps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let decade: Vec<usize> = (0..n).filter(|&i| eps[i] >= top / 10.0 && medians[i].is_finite()).collect();
    if decade.len() >= 2 {
        let vals: Vec<f64> = decade.iter().map(|&i| medians[i]).collect();
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mid = median(vals);
        if mid > COLLAPSE_THRESHOLD && (hi - lo) / mid < PLATEAU_VARIATION {
            for &i in &decade {
                out[i] = Regime::Plateau;
            }
            // extend the plateau downwards while values stay in the band
            for i in (0..decade[0]).rev() {
                if (medians[i] - mid).abs() / mid < PLATEAU_VARIATION {
                    out[i] = Regime::Plateau;
                } else {
                    break;
                }
            }
        }
    }
    for i in 1..n.saturating_sub(1) {
        if medians[i] > SPIKE_FACTOR * medians[i - 1] && medians[i] > SPIKE_FACTOR * medians[i + 1] {
            out[i] = Regime::Spike;
        }
    }
    for i in 0..n {
        if medians[i] < COLLAPSE_THRESHOLD {
            out[i] = Regime::Collapse;
        }
    }
    out
}

/// Median of `‖NED(f, p, ε)‖` over `points` for every ε in `eps_list`.
/// Points whose stencil fails are skipped and counted.
pub fn epsilon_sweep<E: FormEvaluator + ?Sized>(
    f: &E,
    points: &[Vec<f64>],
    eps_list: &[f64],
    exec: Execution,
) -> Result<SweepResult> {
    if points.is_empty() || eps_list.is_empty() {
        return Err(Error::InvalidArgument("sweep needs points and ε values".into()));
    }
    if eps_list.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidArgument("ε list must be strictly increasing".into()));
    }
    let mut medians = Vec::with_capacity(eps_list.len());
    let mut failures = 0;
    for &eps in eps_list {
        let norms = par::map_slice(exec, points, |p| ned(f, p, eps).map(|d| d.euclidean_norm()));
        let ok: Vec<f64> = norms.iter().filter_map(|r| r.as_ref().ok().copied()).collect();
        failures += norms.len() - ok.len();
        medians.push(median(ok));
    }
    let regimes = classify(eps_list, &medians);
    Ok(SweepResult {
        rows: eps_list
            .iter()
            .zip(&medians)
            .zip(regimes)
            .map(|((&eps, &median_norm), regime)| SweepRow {
                eps,
                median_norm,
                regime,
            })
            .collect(),
        failures,
    })
}

/// `count` log-spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.log10(), hi.log10());
    (0..count).map(|i| 10f64.powf(a + (b - a) * i as f64 / (count - 1) as f64)).collect()
}
