use gmmdc::inference::mr_bootstrap;
use gmmdc::{
    build_ab_system, build_iv_system, fit, j_test, t_test, variance_report, FitKind, FitPlan,
    LinearMomentSystem, PanelModel, SeKind, WeightSpec,
};
use nalgebra::{DMatrix, DVector};

use crate::error::{CliError, CliResult};
use crate::report::{
    BootstrapReport, Coefficient, EstimateReport, JReport, VarianceMatrices, SCHEMA,
};

/// Settings shared by every model.
#[derive(Debug, Clone)]
pub struct Settings {
    pub plan: FitPlan,
    /// One value per coefficient, or a single value used for all of them.
    pub null_values: Vec<f64>,
    pub bootstrap: Option<usize>,
    pub seed: u64,
}

/// A moment system together with what to call its parameters.
pub struct Model {
    pub label: String,
    pub names: Vec<String>,
    pub system: LinearMomentSystem,
}

pub fn iv_model(
    y: DVector<f64>,
    x: DMatrix<f64>,
    z: DMatrix<f64>,
    mut x_names: Vec<String>,
    intercept: bool,
) -> CliResult<Model> {
    let (x, z) = if intercept {
        x_names.insert(0, "const".into());
        (x.insert_column(0, 1.0), z.insert_column(0, 1.0))
    } else {
        (x, z)
    };
    Ok(Model {
        label: "iv".into(),
        names: x_names,
        system: build_iv_system(&y, &x, &z)?,
    })
}

pub fn panel_model(
    panel: &gmmdc::PanelDataset,
    mode: PanelModel,
    name: String,
) -> CliResult<Model> {
    let label = match mode {
        PanelModel::Predetermined => "panel-predetermined",
        PanelModel::Ar1 => "panel-ar1",
    };
    Ok(Model {
        label: label.into(),
        names: vec![name],
        system: build_ab_system(panel, mode)?,
    })
}

fn null_for(values: &[f64], k: usize) -> CliResult<Vec<f64>> {
    match values.len() {
        0 => Ok(vec![0.0; k]),
        1 => Ok(vec![values[0]; k]),
        len if len == k => Ok(values.to_vec()),
        len => Err(CliError::data(format!(
            "--null takes 1 or {k} values, got {len}"
        ))),
    }
}

pub fn run(model: &Model, settings: &Settings) -> CliResult<EstimateReport> {
    let sys = &model.system;
    let plan = &settings.plan;
    let k = sys.k();
    let nulls = null_for(&settings.null_values, k)?;
    let f = fit(sys, plan)?;
    let report = variance_report(sys, &f)?;
    let just_identified = sys.is_just_identified();
    let mut notes = Vec::new();

    let mut coefficients = Vec::with_capacity(k);
    for (j, name) in model.names.iter().enumerate() {
        let t = t_test(&f, &report, SeKind::Dc, j, nulls[j])?;
        let (lo, hi) = t.ci.expect("t tests carry a confidence interval");
        // With as many moments as parameters the weight does not matter, so
        // the corrected variance coincides with the conventional one.
        let se_w = report
            .se_w
            .as_ref()
            .map(|s| s[j])
            .or(just_identified.then(|| report.se_conv[j]));
        let bootstrap = match settings.bootstrap {
            Some(b) => {
                let r = mr_bootstrap(sys, plan, j, nulls[j], b, settings.seed)?;
                if r.unreliable() {
                    notes.push(format!(
                        "bootstrap for {name}: {} of {b} resamples failed",
                        r.failures
                    ));
                }
                Some(BootstrapReport {
                    b,
                    seed: settings.seed,
                    failures: r.failures,
                    t_original: r.t_original,
                    crit_abs: r.crit_abs,
                    p_value: r.p_value,
                    reject_5pct: r.reject_5pct,
                })
            }
            None => None,
        };
        coefficients.push(Coefficient {
            name: name.clone(),
            estimate: f.theta[j],
            se_conv: report.se_conv[j],
            se_w,
            se_dc: report.se_dc[j],
            null_value: nulls[j],
            t_dc: t.statistic,
            p_dc: t.p_value,
            ci_dc: [lo, hi],
            bootstrap,
        });
    }

    let j_test = if just_identified {
        notes.push("model is just identified: no J test, and se_w equals se".into());
        None
    } else {
        let j = j_test(sys, &f)?;
        Some(JReport {
            statistic: j.statistic,
            df: j.df.unwrap_or(sys.q() - k),
            p_value: j.p_value,
        })
    };
    if let FitKind::Iterated { max_iter, .. } = plan.kind {
        if !f.converged {
            notes.push(format!(
                "iteration stopped at the cap of {max_iter} updates"
            ));
        }
    }
    if report.sigma_rank_deficient {
        notes.push("influence-vector covariance is numerically rank deficient".into());
    }

    Ok(EstimateReport {
        schema: SCHEMA,
        command: "estimate",
        model: model.label.clone(),
        estimator: plan.label().into(),
        weight: plan.initial_weight().label().into(),
        centered: plan.centered,
        n: sys.n(),
        q: sys.q(),
        k,
        converged: f.converged,
        iterations: f.iterations,
        coefficients,
        j_test,
        notes,
        variance: VarianceMatrices::from(&report),
    })
}

pub fn plan_for(
    kind: &str,
    weight: WeightSpec,
    centered: bool,
    tol: f64,
    max_iter: usize,
) -> FitPlan {
    let plan = match kind {
        "one-step" => FitPlan::one_step(weight),
        "iterated" => FitPlan {
            kind: FitKind::Iterated {
                w0: weight,
                tol,
                max_iter,
            },
            centered: false,
        },
        _ => FitPlan::two_step(weight),
    };
    plan.with_centered(centered)
}
