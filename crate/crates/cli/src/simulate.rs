use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use gmmdc::montecarlo::{run_study_with_progress, BootstrapConfig, Design, Estimator, StudyConfig};

use crate::error::{CliError, CliResult};
use crate::report::{SimulateReport, SCHEMA};

/// Flag values; anything left unset falls back to the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub design: Option<String>,
    pub n: Option<usize>,
    pub t: Option<usize>,
    pub alpha0: Option<f64>,
    pub reps: Option<usize>,
    pub seed: Option<u64>,
    pub estimators: Option<Vec<Estimator>>,
    pub bootstrap_b: Option<usize>,
    pub fixed_misspec: bool,
    pub centered: bool,
}

pub fn load_config(path: &Path) -> CliResult<StudyConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::data(format!("invalid config {}: {e}", path.display())))
}

fn design_parts(d: &Design) -> (&'static str, usize, Option<usize>, f64) {
    match *d {
        Design::Iv { n, alpha0 } => ("iv", n, None, alpha0),
        Design::PanelRc { n, t, alpha0 } => ("panel-rc", n, Some(t), alpha0),
        Design::PanelLag { n, t, alpha0 } => ("panel-lag", n, Some(t), alpha0),
    }
}

pub fn build_config(base: Option<StudyConfig>, o: &Overrides) -> CliResult<StudyConfig> {
    let (kind, n, t, alpha0) = match &base {
        Some(cfg) => {
            let (k, n, t, a) = design_parts(&cfg.design);
            (Some(k.to_owned()), Some(n), t, Some(a))
        }
        None => (None, None, None, None),
    };
    let kind = o
        .design
        .clone()
        .or(kind)
        .ok_or_else(|| CliError::data("--design is required without --config"))?;
    let n = o.n.or(n).ok_or_else(|| CliError::data("--n is required"))?;
    let alpha0 = o.alpha0.or(alpha0).unwrap_or(0.0);
    let need_t = || {
        o.t.or(t)
            .ok_or_else(|| CliError::data(format!("--T is required for the {kind} design")))
    };
    let design = match kind.as_str() {
        "iv" => Design::Iv { n, alpha0 },
        "panel-rc" => Design::PanelRc {
            n,
            t: need_t()?,
            alpha0,
        },
        "panel-lag" => Design::PanelLag {
            n,
            t: need_t()?,
            alpha0,
        },
        other => {
            return Err(CliError::data(format!(
                "unknown design '{other}' (expected iv, panel-rc or panel-lag)"
            )))
        }
    };

    let mut cfg = base.unwrap_or_else(|| StudyConfig::new(design, 1000, 1));
    cfg.design = design;
    if let Some(r) = o.reps {
        cfg.replications = r;
    }
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(e) = &o.estimators {
        cfg.estimators = e.clone();
    }
    if let Some(b) = o.bootstrap_b {
        cfg.bootstrap = Some(BootstrapConfig {
            b,
            estimators: cfg.estimators.clone(),
        });
    }
    cfg.fixed_misspec |= o.fixed_misspec;
    cfg.centered |= o.centered;
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cfg: &StudyConfig, quiet: bool) -> CliResult<SimulateReport> {
    let total = cfg.replications;
    let step = (total / 20).max(1);
    let last = AtomicUsize::new(0);
    let progress = |done: usize| {
        if quiet || (!done.is_multiple_of(step) && done != total) {
            return;
        }
        // Completion callbacks can arrive out of order; only move forward.
        if last.fetch_max(done, Ordering::Relaxed) < done {
            log::info!("simulate: {done}/{total} replications");
        }
    };
    let summary = run_study_with_progress(cfg, &progress)?;
    if summary.high_failure_rate {
        log::warn!("{} of {total} replications failed", summary.failures);
    }
    Ok(SimulateReport {
        schema: SCHEMA,
        command: "simulate",
        summary,
    })
}
