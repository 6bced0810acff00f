//! Report types shared by the table and JSON renderers. Both renderers read
//! the same struct, so the two outputs cannot disagree.

use std::fmt::Write as _;

use gmmdc::montecarlo::{EstimatorSummary, StudySummary};
use gmmdc::VarianceReport;
use nalgebra::DMatrix;
use serde::Serialize;

pub const SCHEMA: &str = "gmm-dc/1";

#[derive(Debug, Clone, Serialize)]
pub struct BootstrapReport {
    pub b: usize,
    pub seed: u64,
    pub failures: usize,
    pub t_original: f64,
    pub crit_abs: f64,
    pub p_value: f64,
    pub reject_5pct: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    pub se_conv: f64,
    pub se_w: Option<f64>,
    pub se_dc: f64,
    pub null_value: f64,
    pub t_dc: f64,
    pub p_dc: f64,
    pub ci_dc: [f64; 2],
    pub bootstrap: Option<BootstrapReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct JReport {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
}

type Rows = Vec<Vec<f64>>;

fn rows(m: &DMatrix<f64>) -> Rows {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct VarianceMatrices {
    pub v_conv: Rows,
    pub v_w: Option<Rows>,
    pub v_dc: Rows,
    pub d_hat: Option<Rows>,
    pub c_hat: Option<Rows>,
    pub sigma_n: Rows,
    pub sigma_rank_deficient: bool,
}

impl From<&VarianceReport> for VarianceMatrices {
    fn from(r: &VarianceReport) -> Self {
        Self {
            v_conv: rows(&r.v_conv),
            v_w: r.v_w.as_ref().map(rows),
            v_dc: rows(&r.v_dc),
            d_hat: r.d_hat.as_ref().map(rows),
            c_hat: r.c_hat.as_ref().map(rows),
            sigma_n: rows(&r.sigma_n),
            sigma_rank_deficient: r.sigma_rank_deficient,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimateReport {
    pub schema: &'static str,
    pub command: &'static str,
    pub model: String,
    pub estimator: String,
    pub weight: String,
    pub centered: bool,
    pub n: usize,
    pub q: usize,
    pub k: usize,
    pub converged: bool,
    pub iterations: usize,
    pub coefficients: Vec<Coefficient>,
    pub j_test: Option<JReport>,
    pub notes: Vec<String>,
    pub variance: VarianceMatrices,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulateReport {
    pub schema: &'static str,
    pub command: &'static str,
    pub summary: StudySummary,
}

fn opt(v: Option<f64>, width: usize) -> String {
    match v {
        Some(x) => format!("{x:>width$.6}"),
        None => format!("{:>width$}", "-"),
    }
}

impl EstimateReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{} GMM, {} model: n = {}, q = {}, k = {} (initial weight {}{})",
            self.estimator,
            self.model,
            self.n,
            self.q,
            self.k,
            self.weight,
            if self.centered { ", centered" } else { "" }
        );
        let boot = self.coefficients.iter().any(|c| c.bootstrap.is_some());
        let _ = write!(
            out,
            "{:<12}{:>12}{:>12}{:>12}{:>12}{:>12}{:>10}{:>26}",
            "coef", "estimate", "se", "se_w", "se_dc", "t_dc", "p>|t|", "95% CI (dc)"
        );
        if boot {
            let _ = write!(out, "{:>12}{:>10}", "bs crit", "bs p");
        }
        out.push('\n');
        for c in &self.coefficients {
            let _ = write!(
                out,
                "{:<12}{:>12.6}{:>12.6}{}{:>12.6}{:>12.4}{:>10.4}   [{:>10.6}, {:>10.6}]",
                c.name,
                c.estimate,
                c.se_conv,
                opt(c.se_w, 12),
                c.se_dc,
                c.t_dc,
                c.p_dc,
                c.ci_dc[0],
                c.ci_dc[1]
            );
            if let Some(b) = &c.bootstrap {
                let _ = write!(out, "{:>12.4}{:>10.4}", b.crit_abs, b.p_value);
            }
            out.push('\n');
        }
        if let Some(j) = &self.j_test {
            let _ = writeln!(
                out,
                "J = {:.4} (df {}, p = {:.4})",
                j.statistic, j.df, j.p_value
            );
        }
        for note in &self.notes {
            let _ = writeln!(out, "note: {note}");
        }
        out
    }
}

fn row(
    out: &mut String,
    label: &str,
    cells: &[&EstimatorSummary],
    f: impl Fn(&EstimatorSummary) -> Option<f64>,
) {
    if cells.iter().all(|e| f(e).is_none()) {
        return;
    }
    let _ = write!(out, "{label:<22}");
    for e in cells {
        out.push_str(&opt(f(e), 12));
    }
    out.push('\n');
}

impl SimulateReport {
    pub fn to_table(&self) -> String {
        let s = &self.summary;
        let cfg = &s.config;
        let mut out = String::new();
        let design = serde_json::to_value(cfg.design).unwrap_or_default();
        let params = design
            .as_object()
            .map(|o| {
                o.iter()
                    .filter(|(k, _)| k.as_str() != "kind")
                    .map(|(k, v)| format!("{k} = {v}"))
                    .collect::<Vec<_>>()
                    .join(", ")
            })
            .unwrap_or_default();
        let _ = writeln!(
            out,
            "design {} ({params}{}), seed {}",
            design["kind"].as_str().unwrap_or("?"),
            if cfg.fixed_misspec {
                ", fixed misspecification"
            } else {
                ""
            },
            cfg.seed
        );
        let _ = writeln!(
            out,
            "{} of {} replications used, t tests of theta = {}",
            s.replications_used, cfg.replications, s.null_value
        );
        let cells: Vec<&EstimatorSummary> = s.estimators.iter().collect();
        let _ = write!(out, "{:<22}", "");
        for e in &cells {
            let _ = write!(out, "{:>12}", e.estimator.label());
        }
        out.push('\n');
        row(&mut out, "mean", &cells, |e| Some(e.mean));
        row(&mut out, "sd", &cells, |e| Some(e.sd));
        row(&mut out, "se", &cells, |e| Some(e.mean_se_conv));
        row(&mut out, "se_w", &cells, |e| e.mean_se_w);
        row(&mut out, "se_dc", &cells, |e| Some(e.mean_se_dc));
        row(&mut out, "reject t (se)", &cells, |e| Some(e.reject_conv));
        row(&mut out, "reject t (se_w)", &cells, |e| e.reject_w);
        row(&mut out, "reject t (se_dc)", &cells, |e| Some(e.reject_dc));
        row(&mut out, "reject t (dc boot)", &cells, |e| e.reject_boot);
        row(&mut out, "reject J", &cells, |e| e.reject_j);
        if s.sd_undefined {
            let _ = writeln!(
                out,
                "note: only one replication succeeded; sd is reported as 0"
            );
        }
        if s.high_failure_rate {
            let _ = writeln!(out, "warning: {} replications failed", s.failures);
        }
        for e in &cells {
            if e.non_converged > 0 {
                let _ = writeln!(
                    out,
                    "note: {} iteration hit its cap in {} replications",
                    e.estimator.label(),
                    e.non_converged
                );
            }
        }
        out
    }
}
