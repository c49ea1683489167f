//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! The process exits successfully even when a criterion fails so that the
//! workspace test run reports the lines; set `G2LINK_ACCEPTANCE_STRICT=1` to
//! turn any failure into a non-zero exit.

use std::time::Instant;

use g2link::cymetric::{self, CorrectionNet, CyPoint, CyTrainConfig, TrainState};
use g2link::exterior::{metric_from_3form, phi0, psi0, AltForm};
use g2link::link::G2Sample;
use g2link::ned::{self, log_grid, FnEvaluator, Regime};
use g2link::par::Execution;
use g2link::pipeline::{self, BuildConfig, Dataset, Mode, SplitFractions, SweepConfig};
use g2link::quintic::sample_points;
use g2link::regressor::{self, MetricLoss, RegressorConfig, RegressorKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EXEC: Execution = Execution::Parallel;

/// Base points of the FS dataset (one fibre angle each).
const FS_POINTS: usize = 50_000;
/// CY training points and epochs for the NN pipeline.
const CY_POINTS: usize = 20_000;
const CY_EPOCHS: usize = 300;
const NN_POINTS: usize = 20_000;
const NN_EPOCHS: usize = 40;

struct Outcome {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
    seconds: f64,
}

fn run(id: usize, name: &'static str, f: impl FnOnce() -> (bool, String)) -> Outcome {
    let t = Instant::now();
    let (pass, detail) = f();
    let o = Outcome { id, name, pass, detail, seconds: t.elapsed().as_secs_f64() };
    eprintln!("  criterion {} finished in {:.1} s", o.id, o.seconds);
    o
}

// ---------------------------------------------------------------------------
// 1. algebraic kernel

fn perm_sign(p: &[usize]) -> f64 {
    let mut s = 1.0;
    for i in 0..p.len() {
        for j in i + 1..p.len() {
            if p[i] > p[j] {
                s = -s;
            }
        }
    }
    s
}

fn criterion1() -> (bool, String) {
    let t = Instant::now();
    let terms: [(f64, [usize; 3]); 7] = [
        (1.0, [0, 1, 2]),
        (1.0, [0, 3, 4]),
        (1.0, [0, 5, 6]),
        (1.0, [1, 3, 5]),
        (-1.0, [1, 4, 6]),
        (-1.0, [2, 3, 6]),
        (-1.0, [2, 4, 5]),
    ];
    let mut phi = AltForm::zero(7, 3);
    // Euclidean dual term by term: e^I ↦ sign(I, J) e^J
    let mut psi = AltForm::zero(7, 4);
    for (c, idx) in terms {
        phi = &phi + &AltForm::basis(7, &idx).unwrap().scaled(c);
        let rest: Vec<usize> = (0..7).filter(|i| !idx.contains(i)).collect();
        let perm: Vec<usize> = idx.iter().chain(&rest).copied().collect();
        psi = &psi + &AltForm::basis(7, &rest).unwrap().scaled(c * perm_sign(&perm));
    }
    let phi_err = (&phi - &phi0()).max_abs();
    let psi_err = (&psi - &psi0()).max_abs();
    let (g, vol) = metric_from_3form(&phi0()).unwrap();
    let mut g_err: f64 = (vol - 1.0).abs();
    for i in 0..7 {
        for j in 0..7 {
            g_err = g_err.max((g.matrix()[(i, j)] - if i == j { 1.0 } else { 0.0 }).abs());
        }
    }
    let star = phi0().hodge_star(&g).unwrap();
    let star_err = (&star - &psi0()).max_abs();
    let wedge = phi0().wedge(&psi0()).unwrap().top_coefficient().unwrap();
    let wedge_err = (wedge - 7.0 * vol).abs();
    let secs = t.elapsed().as_secs_f64();
    let worst = phi_err.max(psi_err).max(g_err).max(star_err).max(wedge_err);
    (
        worst <= 1e-12 && secs < 1.0,
        format!("max error {worst:.1e} (metric {g_err:.1e}, star {star_err:.1e}, wedge {wedge_err:.1e}); {secs:.3} s"),
    )
}

// ---------------------------------------------------------------------------
// 2. numerical exterior derivative

/// Cubic 1-form `α_i = Σ_j c_ij x_j³ + x_i x_{i+1}`, with `dα` in closed form.
struct Cubic {
    c: [[f64; 7]; 7],
}

impl Cubic {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        Self { c: std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))) }
    }

    fn eval(&self, x: &[f64]) -> AltForm {
        let v: Vec<f64> =
            (0..7).map(|i| (0..7).map(|j| self.c[i][j] * x[j].powi(3)).sum::<f64>() + x[i] * x[(i + 1) % 7]).collect();
        AltForm::one_form(&v)
    }

    /// `∂_i α_j − ∂_j α_i` for `i < j`.
    fn exact_d(&self, x: &[f64]) -> AltForm {
        let da = |a: usize, k: usize| -> f64 {
            // ∂_k α_a
            let mut v = 3.0 * self.c[a][k] * x[k] * x[k];
            if k == a {
                v += x[(a + 1) % 7];
            }
            if k == (a + 1) % 7 {
                v += x[a];
            }
            v
        };
        let mut out = AltForm::zero(7, 2);
        for i in 0..7 {
            for j in i + 1..7 {
                out = &out + &AltForm::basis(7, &[i, j]).unwrap().scaled(da(j, i) - da(i, j));
            }
        }
        out
    }
}

fn criterion2() -> (bool, String) {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);

    // affine 2-form coefficients: exact for every step
    let a: Vec<[f64; 8]> = (0..21).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
    let affine = FnEvaluator::new(7, 2, |x: &[f64]| {
        let c: Vec<f64> = a.iter().map(|r| r[7] + (0..7).map(|k| r[k] * x[k]).sum::<f64>()).collect();
        AltForm::from_coeffs(7, 2, c)
    });
    let mut affine_err: f64 = 0.0;
    for _ in 0..20 {
        let p: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..1.0)).collect();
        // d of Σ_I (a_I·x + b_I) e^I is Σ_I Σ_k a_Ik e^k ∧ e^I
        let mut exact = AltForm::zero(7, 3);
        for (rank, r) in a.iter().enumerate() {
            let base = AltForm::from_coeffs(7, 2, (0..21).map(|q| if q == rank { 1.0 } else { 0.0 }).collect()).unwrap();
            for k in 0..7 {
                exact = &exact + &AltForm::basis(7, &[k]).unwrap().wedge(&base).unwrap().scaled(r[k]);
            }
        }
        for eps in [1e-3, 1e-2, 1e-1, 0.3] {
            affine_err = affine_err.max((&ned::ned(&affine, &p, eps).unwrap() - &exact).max_abs());
        }
    }

    // convergence order on cubic forms
    let steps = [4e-2, 2e-2, 1e-2, 5e-3];
    let mut orders = Vec::new();
    for _ in 0..10 {
        let f = Cubic::random(&mut rng);
        let ev = FnEvaluator::new(7, 1, |x: &[f64]| Ok(f.eval(x)));
        let p: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..1.0)).collect();
        let exact = f.exact_d(&p);
        let errs: Vec<f64> = steps.iter().map(|&e| (&ned::ned(&ev, &p, e).unwrap() - &exact).euclidean_norm()).collect();
        let (lx, ly): (Vec<f64>, Vec<f64>) = steps.iter().zip(&errs).map(|(s, e)| (s.ln(), e.ln())).unzip();
        orders.push(pipeline::LinearFit::of(&lx, &ly).slope);
    }
    let order = ned::median(orders.clone());
    let order_spread = orders.iter().map(|o| (o - 2.0).abs()).fold(0.0, f64::max);

    // d∘d on random cubic 1-forms and 2-forms
    let mut dd_worst: f64 = 0.0;
    for trial in 0..20 {
        let f = Cubic::random(&mut rng);
        let g = Cubic::random(&mut rng);
        let p: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..1.0)).collect();
        let eps = 1e-3;
        let (inner, scale) = if trial % 2 == 0 {
            let ev = FnEvaluator::new(7, 1, move |x: &[f64]| Ok(f.eval(x)));
            let d1 = FnEvaluator::new(7, 2, move |x: &[f64]| ned::ned(&ev, x, eps));
            let s = d1.eval_norm(&p);
            (ned::ned(&d1, &p, eps).unwrap(), s)
        } else {
            let ev = FnEvaluator::new(7, 2, move |x: &[f64]| f.eval(x).wedge(&g.eval(x)));
            let d1 = FnEvaluator::new(7, 3, move |x: &[f64]| ned::ned(&ev, x, eps));
            let s = d1.eval_norm(&p);
            (ned::ned(&d1, &p, eps).unwrap(), s)
        };
        dd_worst = dd_worst.max(inner.euclidean_norm() / scale);
    }
    let secs = t.elapsed().as_secs_f64();
    (
        affine_err <= 1e-12 && (order - 2.0).abs() <= 0.1 && order_spread <= 0.1 && dd_worst < 1e-6 && secs < 10.0,
        format!(
            "affine error {affine_err:.1e}; order {order:.3} (max |p-2| {order_spread:.3}); |dd|/|d| {dd_worst:.1e}; {secs:.2} s"
        ),
    )
}

trait EvalNorm {
    fn eval_norm(&self, p: &[f64]) -> f64;
}

impl<E: ned::FormEvaluator> EvalNorm for E {
    fn eval_norm(&self, p: &[f64]) -> f64 {
        self.eval(p).unwrap().euclidean_norm()
    }
}

// ---------------------------------------------------------------------------
// 3, 4. FS-mode dataset

fn criterion3(ds: &Dataset) -> (bool, String) {
    let w = pipeline::wedge_stats(&ds.samples, EXEC);
    let h = pipeline::hodge_stats(&ds.samples, EXEC);
    let st = ds.structure(None).unwrap();
    let all: Vec<&G2Sample> = ds.samples.iter().collect();
    let c = pipeline::contact_stats(&st, &all, pipeline::DEFAULT_EPS, EXEC);
    let pass = ds.samples.len() >= 10_000
        && w.deviation.max <= 1e-5
        && h.fraction_within >= 0.99
        && c.failures == 0
        && c.volume.min > 0.0;
    (
        pass,
        format!(
            "{} records; |ratio-7| median {:.3e} max {:.3e}; Hodge within 1e-5 at {:.2}% (median rel {:.2e}); min |eta^(deta)^3| {:.3e}",
            ds.samples.len(),
            w.deviation.median,
            w.deviation.max,
            100.0 * h.fraction_within,
            h.relative.median,
            c.volume.min
        ),
    )
}

fn criterion4(ds: &Dataset) -> (bool, String) {
    let st = ds.structure(None).unwrap();
    let all: Vec<&G2Sample> = ds.samples.iter().collect();
    let sub = pipeline::subsample(&all, 2000);
    let t = pipeline::exact_torsion(&st, &sub, 1e-4, EXEC);
    let dpsi = t.dpsi.median / t.psi.median;
    let dphi = t.defect.median / t.omega2.median;
    (
        t.failures == 0 && dpsi <= 1e-5 && dphi <= 1e-3,
        format!("{} points, eps 1e-4: median |dpsi|/|psi| {dpsi:.2e}; median |dphi - w^w|/|w^w| {dphi:.2e}", t.dpsi.count),
    )
}

// ---------------------------------------------------------------------------
// 5. regressors

fn regressor_config(epochs: usize, seed: u64) -> RegressorConfig {
    RegressorConfig { epochs, seed, one_hot: true, exec: EXEC, ..Default::default() }
}

struct Trained {
    phi: regressor::DenseModel,
    metric: regressor::DenseModel,
    phi_scores: pipeline::ModelScores,
    metric_scores: pipeline::ModelScores,
}

fn train_pair(ds: &Dataset, epochs: usize) -> Trained {
    let sets = pipeline::partition(&ds.samples, ds.header.seed, &SplitFractions::default());
    let fit = |kind| {
        let t = Instant::now();
        let m = regressor::train(kind, &sets.train, &sets.validation, &regressor_config(epochs, 5)).unwrap();
        let last = m.history.last().unwrap();
        eprintln!(
            "  {} model: {} epochs, train {:.3e}, validation {:.3e}, {:.0} s",
            regressor::RegressorKind::label(kind),
            epochs,
            last.train,
            last.validation,
            t.elapsed().as_secs_f64()
        );
        let s = pipeline::score_model(&m.model, &sets.train, &sets.test, EXEC).unwrap();
        (m.model, s)
    };
    let (phi, phi_scores) = fit(RegressorKind::Form);
    let (metric, metric_scores) = fit(RegressorKind::Metric);
    Trained { phi, metric, phi_scores, metric_scores }
}

fn criterion5(ds: &Dataset, t: &Trained) -> (bool, String) {
    let p = &t.phi_scores;
    let m = &t.metric_scores;
    let g_mse = m.metric_entry_mse.unwrap();
    let pd = m.positive_definite_fraction.unwrap();
    let pass = ds.samples.len() >= 50_000
        && p.normalized_mse <= 1e-4
        && m.normalized_mse <= 1e-4
        && g_mse <= 1e-4
        && p.min_component_pmcc >= 0.95
        && m.min_component_pmcc >= 0.95
        && pd == 1.0;
    (
        pass,
        format!(
            "{} records, 150 epochs; phi test MSE {:.2e}, min PMCC {:.4}; metric test MSE {:.2e} (entries {:.2e}), min PMCC {:.4}, PD {:.2}%",
            ds.samples.len(),
            p.normalized_mse,
            p.min_component_pmcc,
            m.normalized_mse,
            g_mse,
            m.min_component_pmcc,
            100.0 * pd
        ),
    )
}

// ---------------------------------------------------------------------------
// 6, 7. NN-mode pipeline

fn train_cy_model() -> (CorrectionNet, f64, f64) {
    let (pts, _) = sample_points(CY_POINTS, 31, EXEC).unwrap();
    let data = cymetric::prepare(&pts, EXEC).unwrap();
    let cfg = CyTrainConfig { batch: 128, seed: 31, exec: EXEC, ..Default::default() };
    let state = cymetric::train_cy(TrainState::new(data.len(), cfg).unwrap(), &data, CY_EPOCHS, CY_EPOCHS).unwrap();
    let first = state.history.first().unwrap().validation.monge_ampere;
    let last = state.history.last().unwrap().validation.monge_ampere;
    (state.net, first, last)
}

fn criterion6(ds: &Dataset, cy: &CorrectionNet, t: &Trained) -> (bool, String) {
    let st = ds.structure(Some(cy)).unwrap();
    let sets = pipeline::partition(&ds.samples, ds.header.seed, &SplitFractions::default());
    let sub = pipeline::subsample(&sets.test, 500);
    let tor = pipeline::model_torsion(&st, &t.phi, Some(&t.metric), &sub, 1e-5, EXEC);
    let rel = tor.dpsi.median / tor.psi.median;
    // the forms the models were trained on, for reference
    let exact = pipeline::exact_torsion(&st, &sub, 1e-5, EXEC);
    let exact_rel = exact.dpsi.median / exact.psi.median;
    // steps beyond 1e-2 leave the Taylor regime of the unit-size charts
    let cfg = SweepConfig { eps: log_grid(1e-12, 1e-2, 21), max_points: 100, split: SplitFractions::default(), exec: EXEC };
    let sweeps = pipeline::sweep(ds, Some(cy), Some(&t.phi), Some(&t.metric), &cfg).unwrap();
    let find = |name: &str| &sweeps.iter().find(|(n, _)| n == name).unwrap().1;
    let dpsi = find("dpsi");
    let kahler = find("kahler_defect").plateau_value().unwrap_or(f64::NAN);
    let plateau = dpsi.plateau_value();
    let rel_plateau = plateau.map_or(f64::NAN, |v| v / tor.psi.median);
    // collapse at tiny steps, float noise in between, plateau at large steps
    let noisy = plateau.is_some_and(|pv| {
        dpsi.rows.iter().any(|r| r.regime != Regime::Plateau && r.regime != Regime::Collapse && r.median_norm > 2.0 * pv)
    });
    let three = dpsi.has(Regime::Collapse) && noisy && plateau.is_some();
    let pass = tor.failures == 0 && rel <= 0.5 && rel_plateau <= 0.5 && three;
    let curve: Vec<String> = dpsi.rows.iter().map(|r| format!("{:.0e}:{:.2e}:{}", r.eps, r.median_norm, r.regime.label())).collect();
    (
        pass,
        format!(
            "{} test points, eps 1e-5: |dphi|/|w^w| {:.2} +- {:.2}, |dpsi| {:.3} +- {:.3} (median/|psi| {rel:.3}); \
             exact forms median |dpsi|/|psi| {exact_rel:.3}, Kahler defect |d omega| {kahler:.3}; plateau/|psi| {rel_plateau:.3}; sweep {}",
            tor.dpsi.count,
            tor.ratio.mean,
            tor.ratio.sd,
            tor.dpsi.mean,
            tor.dpsi.sd,
            curve.join(" ")
        ),
    )
}

fn criterion7(nn: &Dataset, fs: &Dataset) -> (bool, String) {
    let f = pipeline::volume_fit(&nn.samples);
    let ffs = pipeline::volume_fit(&fs.samples);
    (
        f.pmcc >= 0.999 && f.intercept > 0.0,
        format!(
            "nn mode: PMCC {:.4}, slope {:.4}, intercept {:.4}; fs mode: PMCC {:.4}, intercept {:.4}",
            f.pmcc, f.slope, f.intercept, ffs.pmcc, ffs.intercept
        ),
    )
}

// ---------------------------------------------------------------------------
// 8. gradient checks

fn cy_gradient_error() -> f64 {
    let (pts, _) = sample_points(6, 41, Execution::Serial).unwrap();
    let data = cymetric::prepare(&pts, Execution::Serial).unwrap();
    let refs: Vec<&CyPoint> = data.iter().collect();
    let mut net = CorrectionNet::new(&[6, 6], 2).unwrap();
    let n = net.mlp.param_count();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for p in net.mlp.params.iter_mut() {
        *p += rng.random_range(-0.05..0.05);
    }
    let kappa = 1.2 * cymetric::estimate_kappa(&net, &refs, Execution::Serial).unwrap();
    let (_, grad) = cymetric::loss_and_gradient(&net, &refs, kappa, 0.1, Execution::Serial).unwrap();
    let total = |net: &CorrectionNet| cymetric::losses(net, &refs, kappa, Execution::Serial).unwrap().total(0.1);
    let gmax = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let p0 = net.mlp.params[i];
        let h = 1e-6;
        net.mlp.params[i] = p0 + h;
        let lp = total(&net);
        net.mlp.params[i] = p0 - h;
        let lm = total(&net);
        net.mlp.params[i] = p0;
        let fd = (lp - lm) / (2.0 * h);
        worst = worst.max((fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-3 * gmax));
    }
    worst
}

fn criterion8(ds: &Dataset) -> (bool, String) {
    let t = Instant::now();
    let cy = cy_gradient_error();
    let refs: Vec<&G2Sample> = ds.samples.iter().step_by(997).take(8).collect();
    let mini = |metric_loss, huber_delta| RegressorConfig {
        hidden: vec![6, 5],
        metric_loss,
        huber_delta,
        seed: 3,
        exec: Execution::Serial,
        ..Default::default()
    };
    let checks = [
        ("phi", RegressorKind::Form, mini(MetricLoss::Cholesky, f64::INFINITY)),
        ("phi-huber", RegressorKind::Form, mini(MetricLoss::Cholesky, 0.5)),
        ("metric-cholesky", RegressorKind::Metric, mini(MetricLoss::Cholesky, f64::INFINITY)),
        ("metric-reassembled", RegressorKind::Metric, mini(MetricLoss::Reassembled, f64::INFINITY)),
    ];
    let mut worst = cy;
    let mut parts = vec![format!("cy {cy:.1e}")];
    for (name, kind, cfg) in checks {
        let e = regressor::gradient_check(kind, &refs, &cfg, 1).unwrap();
        worst = worst.max(e);
        parts.push(format!("{name} {e:.1e}"));
    }
    let secs = t.elapsed().as_secs_f64();
    (worst <= 1e-4 && secs < 30.0, format!("relative errors: {}; {secs:.1} s", parts.join(", ")))
}

/// Criteria selected by `G2LINK_ACCEPTANCE_ONLY` (comma-separated ids); all by default.
fn selected() -> Vec<usize> {
    match std::env::var("G2LINK_ACCEPTANCE_ONLY") {
        Ok(v) if !v.trim().is_empty() => v.split(',').filter_map(|x| x.trim().parse().ok()).collect(),
        _ => (1..=8).collect(),
    }
}

fn main() {
    let want = selected();
    let on = |id: usize| want.contains(&id);
    let mut outcomes = Vec::new();
    if on(1) {
        outcomes.push(run(1, "algebraic kernel", criterion1));
    }
    if on(2) {
        outcomes.push(run(2, "numerical exterior derivative", criterion2));
    }

    if [3, 4, 5, 7, 8].iter().any(|&i| on(i)) {
        let t = Instant::now();
        let (fs_points, _) = sample_points(FS_POINTS, 11, EXEC).unwrap();
        let fs_cfg = BuildConfig { mode: Mode::Fs, thetas: 1, seed: 11, exec: EXEC, ..Default::default() };
        let (fs, summary) = pipeline::build_dataset(&fs_points, None, &fs_cfg).unwrap();
        eprintln!(
            "  FS dataset: {} records, c_eta {:.6}, lambda {:.4}, {:.1} s",
            fs.samples.len(),
            summary.c_eta,
            summary.lambda,
            t.elapsed().as_secs_f64()
        );
        if on(8) {
            outcomes.push(run(8, "gradient checks", || criterion8(&fs)));
        }
        if on(3) {
            outcomes.push(run(3, "FS-mode structure", || criterion3(&fs)));
        }
        if on(4) {
            outcomes.push(run(4, "FS-mode exact torsion", || criterion4(&fs)));
        }
        if on(5) {
            outcomes.push(run(5, "regressor learning", || {
                let trained = train_pair(&fs, 150);
                criterion5(&fs, &trained)
            }));
        }

        if on(6) || on(7) {
            let t = Instant::now();
            let (cy, ma0, ma1) = train_cy_model();
            eprintln!("  CY model: validation Monge-Ampere {ma0:.4} -> {ma1:.4}, {:.0} s", t.elapsed().as_secs_f64());
            let (nn_points, _) = sample_points(NN_POINTS, 13, EXEC).unwrap();
            let nn_cfg = BuildConfig { mode: Mode::Nn, thetas: 1, seed: 13, exec: EXEC, ..Default::default() };
            let (nn, _) = pipeline::build_dataset(&nn_points, Some(&cy), &nn_cfg).unwrap();
            if on(6) {
                outcomes.push(run(6, "model-based torsion", || {
                    let trained = train_pair(&nn, NN_EPOCHS);
                    criterion6(&nn, &cy, &trained)
                }));
            }
            if on(7) {
                outcomes.push(run(7, "volume correlation", || criterion7(&nn, &fs)));
            }
        }
    }

    outcomes.sort_by_key(|o| o.id);
    println!();
    for o in &outcomes {
        println!(
            "criterion {} {}: {} | {} ({:.1} s)",
            o.id,
            if o.pass { "PASS" } else { "FAIL" },
            o.name,
            o.detail,
            o.seconds
        );
    }
    let failed = outcomes.iter().filter(|o| !o.pass).count();
    println!("{} of {} criteria passed", outcomes.len() - failed, outcomes.len());
    if failed > 0 && std::env::var("G2LINK_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
