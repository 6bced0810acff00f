//! Hypothesis tests on a fitted model, including a misspecification-robust
//! bootstrap.

use rand::Rng;
use rayon::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::erf::erfc;

use crate::error::{GmmError, Result};
use crate::estimate::{fit, weighted_solve, FitKind, FitPlan, GmmFit};
use crate::linmoment::LinearMomentSystem;
use crate::montecarlo::rng::{block, stream};
use crate::variance::{variance_report, VarianceReport};

/// Two-sided 5% standard normal critical value.
pub const Z_975: f64 = 1.959963984540054;

pub const MIN_BOOTSTRAP_REPS: usize = 99;
pub const MIN_BOOTSTRAP_UNITS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeKind {
    Conv,
    W,
    Dc,
}

impl SeKind {
    pub const ALL: [SeKind; 3] = [SeKind::Conv, SeKind::W, SeKind::Dc];

    pub fn label(self) -> &'static str {
        match self {
            SeKind::Conv => "conv",
            SeKind::W => "w",
            SeKind::Dc => "dc",
        }
    }

    /// The requested standard errors, if the report defines them.
    pub fn select(self, report: &VarianceReport) -> Option<&nalgebra::DVector<f64>> {
        match self {
            SeKind::Conv => Some(&report.se_conv),
            SeKind::W => report.se_w.as_ref(),
            SeKind::Dc => Some(&report.se_dc),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestResult {
    pub statistic: f64,
    /// Degrees of freedom for chi-square tests; `None` for normal tests.
    pub df: Option<usize>,
    pub p_value: f64,
    pub reject_5pct: bool,
    /// 95% confidence interval for t tests.
    pub ci: Option<(f64, f64)>,
}

/// Two-sided standard normal p-value.
pub fn normal_p_value(t: f64) -> f64 {
    erfc(t.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
}

pub fn t_test(
    fit: &GmmFit,
    report: &VarianceReport,
    se_kind: SeKind,
    coef: usize,
    null_value: f64,
) -> Result<TestResult> {
    let k = fit.theta.len();
    if coef >= k {
        return Err(GmmError::IndexOutOfRange {
            index: coef,
            len: k,
        });
    }
    let se = se_kind
        .select(report)
        .ok_or(GmmError::SeUnavailable("Windmeijer-corrected"))?[coef];
    if se.is_nan() || se <= 0.0 || !se.is_finite() {
        return Err(GmmError::DegenerateStandardError { coef });
    }
    let est = fit.theta[coef];
    let statistic = (est - null_value) / se;
    let p_value = normal_p_value(statistic);
    Ok(TestResult {
        statistic,
        df: None,
        p_value,
        reject_5pct: p_value < 0.05,
        ci: Some((est - Z_975 * se, est + Z_975 * se)),
    })
}

/// Hansen's over-identification test, `J = n g_n(θ̂)' Ξ⁻¹ g_n(θ̂)` with the
/// efficient weight of the final step. One-step fits use `Ω_n(θ̂₁)`.
pub fn j_test(sys: &LinearMomentSystem, fit: &GmmFit) -> Result<TestResult> {
    if sys.q() <= sys.k() {
        return Err(GmmError::JNotDefined);
    }
    let xi = match fit.plan.kind {
        FitKind::TwoStep { .. } => fit.final_step().weight_matrix.clone(),
        FitKind::OneStep { .. } | FitKind::Iterated { .. } => {
            sys.omega(&fit.theta, fit.plan.centered)?
        }
    };
    let factor = weighted_solve(sys, xi)?.weight;
    let g = &fit.g_n_hat;
    let statistic = (sys.n() as f64 * g.dot(&factor.solve_vec(g))).max(0.0);
    let df = sys.q() - sys.k();
    let chi2 = ChiSquared::new(df as f64)
        .map_err(|e| GmmError::InvalidInput(format!("chi-square with {df} df: {e}")))?;
    let p_value = chi2.sf(statistic).clamp(0.0, 1.0);
    Ok(TestResult {
        statistic,
        df: Some(df),
        p_value,
        reject_5pct: p_value < 0.05,
        ci: None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapResult {
    /// Requested number of resamples.
    pub b: usize,
    /// Bootstrap t statistics of the successful resamples, in draw order.
    pub t_star: Vec<f64>,
    /// Symmetric critical value, an order statistic of `|t*|`.
    pub crit_abs: f64,
    /// `(θ̂ - null) / se_dc` on the original sample.
    pub t_original: f64,
    pub reject_5pct: bool,
    /// Share of `|t*|` at or above `|t_original|`.
    pub p_value: f64,
    /// Resamples skipped because a weight or normal matrix was singular.
    pub failures: usize,
}

impl BootstrapResult {
    /// More than 5% of resamples were degenerate.
    pub fn unreliable(&self) -> bool {
        self.failures as f64 >= 0.05 * self.b as f64
    }
}

/// The `⌈(B+1)(1-α)⌉`-th smallest value, clamped to the sample.
pub fn order_statistic_quantile(values: &[f64], alpha: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let b = sorted.len();
    let rank = (((b + 1) as f64) * (1.0 - alpha)).ceil() as usize;
    sorted[rank.clamp(1, b) - 1]
}

fn draw_rows(
    units: &[Vec<usize>],
    rng: &mut impl Rng,
    clustered: bool,
) -> (Vec<usize>, Option<Vec<usize>>) {
    let mut rows = Vec::new();
    let mut labels = clustered.then(Vec::new);
    for draw in 0..units.len() {
        let unit = &units[rng.random_range(0..units.len())];
        rows.extend_from_slice(unit);
        if let Some(l) = labels.as_mut() {
            l.extend(std::iter::repeat_n(draw, unit.len()));
        }
    }
    (rows, labels)
}

fn bootstrap_t(
    sys: &LinearMomentSystem,
    rows: &[usize],
    labels: Option<Vec<usize>>,
    plan: &FitPlan,
    coef: usize,
    centre: f64,
) -> Option<f64> {
    let star = sys.select(rows, labels).ok()?;
    let f = fit(&star, plan).ok()?;
    let r = variance_report(&star, &f).ok()?;
    let se = r.se_dc[coef];
    let t = (f.theta[coef] - centre) / se;
    (se > 0.0 && t.is_finite()).then_some(t)
}

/// Percentile-t bootstrap of several estimators on shared resamples.
///
/// Each plan gets its own result, but resample `b` is the same draw for all
/// of them. Resample `b` uses the stream `(seed, b)`, so results do not
/// depend on the number of worker threads.
pub fn mr_bootstrap_plans(
    sys: &LinearMomentSystem,
    plans: &[FitPlan],
    coef: usize,
    null_value: f64,
    b: usize,
    seed: u64,
) -> Result<Vec<BootstrapResult>> {
    if b < MIN_BOOTSTRAP_REPS {
        return Err(GmmError::InvalidConfig(format!(
            "bootstrap needs at least {MIN_BOOTSTRAP_REPS} resamples, got {b}"
        )));
    }
    if coef >= sys.k() {
        return Err(GmmError::IndexOutOfRange {
            index: coef,
            len: sys.k(),
        });
    }
    let units = sys.units();
    if units.len() < MIN_BOOTSTRAP_UNITS {
        return Err(GmmError::TooFewUnits {
            units: units.len(),
            min: MIN_BOOTSTRAP_UNITS,
        });
    }

    let originals = plans
        .iter()
        .map(|plan| {
            let f = fit(sys, plan)?;
            let r = variance_report(sys, &f)?;
            let se = r.se_dc[coef];
            if se.is_nan() || se <= 0.0 {
                return Err(GmmError::DegenerateStandardError { coef });
            }
            Ok((f.theta[coef], (f.theta[coef] - null_value) / se))
        })
        .collect::<Result<Vec<_>>>()?;

    let clustered = sys.cluster_id().is_some();
    let draws: Vec<Vec<Option<f64>>> = (0..b)
        .into_par_iter()
        .map(|rep| {
            let mut rng = stream(seed, rep as u64, block::RESAMPLE);
            let (rows, labels) = draw_rows(&units, &mut rng, clustered);
            plans
                .iter()
                .zip(&originals)
                .map(|(plan, (theta_hat, _))| {
                    bootstrap_t(sys, &rows, labels.clone(), plan, coef, *theta_hat)
                })
                .collect()
        })
        .collect();

    plans
        .iter()
        .enumerate()
        .map(|(p, _)| {
            let t_star: Vec<f64> = draws.iter().filter_map(|d| d[p]).collect();
            if t_star.is_empty() {
                return Err(GmmError::AllResamplesDegenerate);
            }
            let t_original = originals[p].1;
            let abs: Vec<f64> = t_star.iter().map(|t| t.abs()).collect();
            let crit_abs = order_statistic_quantile(&abs, 0.05);
            let exceed = abs.iter().filter(|&&a| a >= t_original.abs()).count();
            Ok(BootstrapResult {
                b,
                failures: b - t_star.len(),
                crit_abs,
                t_original,
                reject_5pct: t_original.abs() > crit_abs,
                p_value: exceed as f64 / abs.len() as f64,
                t_star,
            })
        })
        .collect()
}

/// Symmetric percentile-t bootstrap test of `θ_coef = null_value`, with
/// the t statistic studentized by the doubly corrected standard error.
/// Resampling units are observations, or clusters when the system carries
/// cluster labels. Moments are not recentered.
pub fn mr_bootstrap(
    sys: &LinearMomentSystem,
    plan: &FitPlan,
    coef: usize,
    null_value: f64,
    b: usize,
    seed: u64,
) -> Result<BootstrapResult> {
    let mut out = mr_bootstrap_plans(sys, std::slice::from_ref(plan), coef, null_value, b, seed)?;
    Ok(out.remove(0))
}
