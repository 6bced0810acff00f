//! Simulation designs and a seeded parallel runner that reduces
//! replications to summary rows.
//!
//! Replication `r` draws all of its randomness from streams keyed by
//! `(seed, r)`. Results are collected in replication order and reduced
//! sequentially, so a summary is a pure function of its configuration no
//! matter how many worker threads execute it.

pub mod dgp;
pub mod rng;

use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GmmError, Result};
use crate::estimate::{fit, FitPlan, GmmFit, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::inference::{j_test, mr_bootstrap_plans, t_test, SeKind};
use crate::linmoment::{
    build_ab_system, build_iv_system, LinearMomentSystem, PanelModel, WeightSpec,
};
use crate::variance::{variance_report, VarianceReport};

use self::rng::{derive_seed, Streams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Design {
    /// Cross-sectional IV with `n` observations.
    Iv { n: usize, alpha0: f64 },
    /// AR(1) panel with random coefficients, `n` individuals by `t` periods.
    PanelRc { n: usize, t: usize, alpha0: f64 },
    /// Predetermined-regressor panel with an omitted lag.
    PanelLag { n: usize, t: usize, alpha0: f64 },
}

impl Design {
    /// The parameter value t tests are centred on: the value that is true
    /// when the design is correctly specified.
    pub fn null_value(&self) -> f64 {
        match self {
            Design::Iv { .. } | Design::PanelLag { .. } => dgp::BETA0,
            Design::PanelRc { .. } => dgp::RHO0,
        }
    }

    pub fn alpha0(&self) -> f64 {
        match *self {
            Design::Iv { alpha0, .. }
            | Design::PanelRc { alpha0, .. }
            | Design::PanelLag { alpha0, .. } => alpha0,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(GmmError::InvalidConfig(msg));
        if !self.alpha0().is_finite() {
            return bad("alpha0 must be finite".into());
        }
        match *self {
            Design::Iv { n, .. } if n < 10 => bad(format!("IV design needs n >= 10, got {n}")),
            Design::PanelRc { t, .. } if t < 3 => {
                bad(format!("random-coefficient design needs T >= 3, got {t}"))
            }
            Design::PanelLag { t, .. } if t < 2 => {
                bad(format!("misspecified-lag design needs T >= 2, got {t}"))
            }
            Design::PanelRc { n, t, .. } if n < (t - 1) * (t - 2) / 2 + 1 => {
                bad(format!("N = {n} is too small for T = {t}"))
            }
            Design::PanelLag { n, t, .. } if n < t * (t - 1) / 2 + 1 => {
                bad(format!("N = {n} is too small for T = {t}"))
            }
            _ => Ok(()),
        }
    }

    /// Draw replication data and build its moment system.
    pub fn draw(&self, streams: &Streams, fixed_misspec: bool) -> Result<LinearMomentSystem> {
        match *self {
            Design::Iv { n, alpha0 } => {
                let s = dgp::dgp_iv(n, alpha0, streams, fixed_misspec);
                build_iv_system(&s.y, &s.x, &s.z)
            }
            Design::PanelRc { n, t, alpha0 } => {
                build_ab_system(&dgp::dgp_panel_rc(n, t, alpha0, streams), PanelModel::Ar1)
            }
            Design::PanelLag { n, t, alpha0 } => build_ab_system(
                &dgp::dgp_panel_lag(n, t, alpha0, streams),
                PanelModel::Predetermined,
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    OneStep,
    TwoStep,
    Iterated,
}

impl Estimator {
    pub const ALL: [Estimator; 3] = [Estimator::OneStep, Estimator::TwoStep, Estimator::Iterated];

    pub fn label(self) -> &'static str {
        match self {
            Estimator::OneStep => "one-step",
            Estimator::TwoStep => "two-step",
            Estimator::Iterated => "iterated",
        }
    }

    pub fn plan(self, w0: WeightSpec, centered: bool) -> FitPlan {
        let plan = match self {
            Estimator::OneStep => FitPlan::one_step(w0),
            Estimator::TwoStep => FitPlan::two_step(w0),
            Estimator::Iterated => FitPlan::iterated(w0),
        };
        plan.with_centered(centered)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    /// Resamples per replication.
    pub b: usize,
    /// Estimators whose dc-studentized t test is bootstrapped.
    pub estimators: Vec<Estimator>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub design: Design,
    pub replications: usize,
    pub estimators: Vec<Estimator>,
    #[serde(default)]
    pub bootstrap: Option<BootstrapConfig>,
    pub seed: u64,
    /// Use a violation that does not shrink with `n` in the IV design.
    #[serde(default)]
    pub fixed_misspec: bool,
    /// Use centered efficient weights.
    #[serde(default)]
    pub centered: bool,
}

impl StudyConfig {
    pub fn new(design: Design, replications: usize, seed: u64) -> Self {
        Self {
            design,
            replications,
            estimators: Estimator::ALL.to_vec(),
            bootstrap: None,
            seed,
            fixed_misspec: false,
            centered: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.design.validate()?;
        if self.replications == 0 {
            return Err(GmmError::InvalidConfig(
                "replications must be at least 1".into(),
            ));
        }
        if self.estimators.is_empty() {
            return Err(GmmError::InvalidConfig("no estimators requested".into()));
        }
        if self.fixed_misspec && !matches!(self.design, Design::Iv { .. }) {
            return Err(GmmError::InvalidConfig(
                "fixed misspecification applies to the IV design only".into(),
            ));
        }
        if let Some(b) = &self.bootstrap {
            if b.b < crate::inference::MIN_BOOTSTRAP_REPS {
                return Err(GmmError::InvalidConfig(format!(
                    "bootstrap needs at least {} resamples, got {}",
                    crate::inference::MIN_BOOTSTRAP_REPS,
                    b.b
                )));
            }
        }
        Ok(())
    }

    fn plan(&self, e: Estimator) -> FitPlan {
        e.plan(WeightSpec::DataAverage, self.centered)
    }
}

/// Per-estimator outcome of one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationRecord {
    pub theta: f64,
    pub se_conv: f64,
    pub se_w: Option<f64>,
    pub se_dc: f64,
    pub reject_conv: bool,
    pub reject_w: Option<bool>,
    pub reject_dc: bool,
    pub reject_j: Option<bool>,
    pub reject_boot: Option<bool>,
    pub converged: bool,
}

fn record(
    sys: &LinearMomentSystem,
    f: &GmmFit,
    r: &VarianceReport,
    null: f64,
) -> Result<ReplicationRecord> {
    let t = |kind| t_test(f, r, kind, 0, null).map(|t| t.reject_5pct);
    let reject_w = match r.se_w {
        Some(_) => Some(t(SeKind::W)?),
        None => None,
    };
    let reject_j = match j_test(sys, f) {
        Ok(j) => Some(j.reject_5pct),
        Err(GmmError::JNotDefined) => None,
        Err(e) => return Err(e),
    };
    Ok(ReplicationRecord {
        theta: f.theta[0],
        se_conv: r.se_conv[0],
        se_w: r.se_w.as_ref().map(|s| s[0]),
        se_dc: r.se_dc[0],
        reject_conv: t(SeKind::Conv)?,
        reject_w,
        reject_dc: t(SeKind::Dc)?,
        reject_j,
        reject_boot: None,
        converged: f.converged,
    })
}

/// Run one replication: every requested estimator on the same draw.
pub fn run_replication(cfg: &StudyConfig, rep: usize) -> Result<Vec<ReplicationRecord>> {
    let streams = Streams::new(cfg.seed, rep as u64);
    let sys = cfg.design.draw(&streams, cfg.fixed_misspec)?;
    let null = cfg.design.null_value();
    let mut out = cfg
        .estimators
        .iter()
        .map(|&e| {
            let f = fit(&sys, &cfg.plan(e))?;
            let r = variance_report(&sys, &f)?;
            record(&sys, &f, &r, null)
        })
        .collect::<Result<Vec<_>>>()?;

    if let Some(bs) = &cfg.bootstrap {
        let targets: Vec<(usize, Estimator)> = cfg
            .estimators
            .iter()
            .enumerate()
            .filter(|(_, e)| bs.estimators.contains(e))
            .map(|(i, &e)| (i, e))
            .collect();
        if !targets.is_empty() {
            let plans: Vec<FitPlan> = targets.iter().map(|&(_, e)| cfg.plan(e)).collect();
            let seed = derive_seed(cfg.seed, rep as u64);
            let results = mr_bootstrap_plans(&sys, &plans, 0, null, bs.b, seed)?;
            for ((slot, _), res) in targets.iter().zip(results) {
                out[*slot].reject_boot = Some(res.reject_5pct);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub estimator: Estimator,
    pub mean: f64,
    pub sd: f64,
    pub mean_se_conv: f64,
    pub mean_se_w: Option<f64>,
    pub mean_se_dc: f64,
    pub reject_conv: f64,
    pub reject_w: Option<f64>,
    pub reject_dc: f64,
    pub reject_boot: Option<f64>,
    pub reject_j: Option<f64>,
    /// Replications where iteration hit its cap.
    pub non_converged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub config: StudyConfig,
    /// Value the t tests are centred on.
    pub null_value: f64,
    pub replications_used: usize,
    pub failures: usize,
    /// Only one replication succeeded, so standard deviations are reported
    /// as zero.
    pub sd_undefined: bool,
    /// More than 0.1% of replications failed.
    pub high_failure_rate: bool,
    pub estimators: Vec<EstimatorSummary>,
    pub tol: f64,
    pub max_iter: usize,
}

/// Neumaier-compensated sum.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0_f64, 0.0_f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn mean_of(values: &[f64]) -> f64 {
    compensated_sum(values.iter().copied()) / values.len() as f64
}

fn sd_of(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean_of(values);
    let ss = compensated_sum(values.iter().map(|v| (v - m) * (v - m)));
    (ss / (values.len() - 1) as f64).sqrt()
}

fn rate(flags: &[bool]) -> f64 {
    flags.iter().filter(|&&b| b).count() as f64 / flags.len() as f64
}

fn optional<T: Copy>(values: Vec<Option<T>>) -> Option<Vec<T>> {
    values.into_iter().collect()
}

fn summarize(e: Estimator, recs: &[&ReplicationRecord]) -> EstimatorSummary {
    let theta: Vec<f64> = recs.iter().map(|r| r.theta).collect();
    let col =
        |f: fn(&ReplicationRecord) -> f64| -> Vec<f64> { recs.iter().map(|r| f(r)).collect() };
    let flags =
        |f: fn(&ReplicationRecord) -> bool| -> Vec<bool> { recs.iter().map(|r| f(r)).collect() };
    EstimatorSummary {
        estimator: e,
        mean: mean_of(&theta),
        sd: sd_of(&theta),
        mean_se_conv: mean_of(&col(|r| r.se_conv)),
        mean_se_w: optional(recs.iter().map(|r| r.se_w).collect()).map(|v| mean_of(&v)),
        mean_se_dc: mean_of(&col(|r| r.se_dc)),
        reject_conv: rate(&flags(|r| r.reject_conv)),
        reject_w: optional(recs.iter().map(|r| r.reject_w).collect()).map(|v| rate(&v)),
        reject_dc: rate(&flags(|r| r.reject_dc)),
        reject_boot: optional(recs.iter().map(|r| r.reject_boot).collect()).map(|v| rate(&v)),
        reject_j: optional(recs.iter().map(|r| r.reject_j).collect()).map(|v| rate(&v)),
        non_converged: recs.iter().filter(|r| !r.converged).count(),
    }
}

/// Run a study, reporting the number of finished replications to
/// `progress` as they complete (in no particular order).
pub fn run_study_with_progress(
    cfg: &StudyConfig,
    progress: &(dyn Fn(usize) + Sync),
) -> Result<StudySummary> {
    cfg.validate()?;
    let done = AtomicUsize::new(0);
    let outcomes: Vec<Option<Vec<ReplicationRecord>>> = (0..cfg.replications)
        .into_par_iter()
        .map(|rep| {
            let out = run_replication(cfg, rep).ok();
            progress(done.fetch_add(1, Ordering::Relaxed) + 1);
            out
        })
        .collect();

    let ok: Vec<&Vec<ReplicationRecord>> = outcomes.iter().flatten().collect();
    if ok.is_empty() {
        return Err(GmmError::AllReplicationsFailed);
    }
    let failures = cfg.replications - ok.len();
    let estimators = cfg
        .estimators
        .iter()
        .enumerate()
        .map(|(i, &e)| {
            let recs: Vec<&ReplicationRecord> = ok.iter().map(|r| &r[i]).collect();
            summarize(e, &recs)
        })
        .collect();
    Ok(StudySummary {
        config: cfg.clone(),
        null_value: cfg.design.null_value(),
        replications_used: ok.len(),
        failures,
        sd_undefined: ok.len() < 2,
        high_failure_rate: failures as f64 > 0.001 * cfg.replications as f64,
        estimators,
        tol: DEFAULT_TOL,
        max_iter: DEFAULT_MAX_ITER,
    })
}

pub fn run_study(cfg: &StudyConfig) -> Result<StudySummary> {
    run_study_with_progress(cfg, &|_| {})
}

impl StudySummary {
    pub fn estimator(&self, e: Estimator) -> Option<&EstimatorSummary> {
        self.estimators.iter().find(|s| s.estimator == e)
    }
}
