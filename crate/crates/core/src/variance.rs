//! Variance estimators for linear GMM fits: the conventional sandwich and
//! its finite-sample corrected versions.
//!
//! All matrices here are variances of `√n(θ̂ - θ)`; standard errors divide
//! by the number of moment blocks `n` before taking square roots.

use nalgebra::{DMatrix, DVector};

use crate::error::{GmmError, Result};
use crate::estimate::{weighted_solve, FitKind, GmmFit, WeightedSolve};
use crate::linalg::{min_eigenvalue, symmetrize, LuFactor};
use crate::linmoment::{LinearMomentSystem, WeightSpec};

#[derive(Debug, Clone)]
pub struct VarianceReport {
    pub v_conv: DMatrix<f64>,
    /// Windmeijer-corrected variance; absent for one-step fits.
    pub v_w: Option<DMatrix<f64>>,
    pub v_dc: DMatrix<f64>,
    /// Finite-sample correction matrix; absent for one-step fits.
    pub d_hat: Option<DMatrix<f64>>,
    /// `Σ_n` at the final estimate and final weight.
    pub sigma_n: DMatrix<f64>,
    /// Cross term between the one-step and two-step influence vectors.
    pub c_hat: Option<DMatrix<f64>>,
    pub se_conv: DVector<f64>,
    pub se_w: Option<DVector<f64>>,
    pub se_dc: DVector<f64>,
    /// Number of moment blocks used to scale standard errors.
    pub n: usize,
    /// `Σ_n` is numerically rank deficient; standard errors are still
    /// reported but may be unreliable.
    pub sigma_rank_deficient: bool,
}

/// Standard errors `sqrt(diag(V)/n)`. Tiny negative diagonals from rounding
/// are clamped to zero.
pub fn standard_errors(v: &DMatrix<f64>, n: usize) -> DVector<f64> {
    DVector::from_fn(v.nrows(), |i, _| (v[(i, i)].max(0.0) / n as f64).sqrt())
}

fn influence(
    sys: &LinearMomentSystem,
    theta: &DVector<f64>,
    ws: &WeightedSolve,
    obs: &WeightSpec,
) -> Result<DMatrix<f64>> {
    let m = sys.moments(theta)?;
    let g_n = m.row_mean().transpose();
    let p_t = &ws.xi_inv_g; // q × k, equal to (G_n'Ξ⁻¹)'
    let a = ws.weight.solve_vec(&g_n);

    let mut out = &m * p_t;
    for j in 0..sys.k() {
        let col = sys.jacobian_column(j) * &a;
        let mut target = out.column_mut(j);
        target += col;
    }

    match obs {
        WeightSpec::Identity => {}
        WeightSpec::DataAverage => {
            for i in 0..sys.n() {
                let wi = sys.obs_weight(i).ok_or_else(|| {
                    GmmError::InvalidInput(
                        "data-average weight requires per-observation weight blocks".into(),
                    )
                })?;
                let wa = wi * &a;
                let corr = p_t.tr_mul(&wa);
                let mut row = out.row_mut(i);
                row -= corr.transpose();
            }
        }
        WeightSpec::EfficientUncentered(phi) | WeightSpec::EfficientCentered(phi) => {
            let mut mphi = sys.moments(phi)?;
            if matches!(obs, WeightSpec::EfficientCentered(_)) {
                let mean = mphi.row_mean();
                for mut row in mphi.row_iter_mut() {
                    row -= &mean;
                }
            }
            let s = &mphi * &a;
            let r = &mphi * p_t;
            for i in 0..sys.n() {
                let mut row = out.row_mut(i);
                row -= r.row(i) * s[i];
            }
        }
    }
    Ok(out)
}

/// Influence vectors `m_i(θ, Ξ_n)` stacked as rows of an `n × k` matrix.
///
/// `obs` names the per-observation weight contributions `Ξ(X_i, φ)` whose
/// average is `xi`: [`WeightSpec::Identity`] drops the third term,
/// [`WeightSpec::DataAverage`] uses `W_i`, and the efficient variants use
/// `g_i(φ) g_i(φ)'` (centered around `g_n(φ)` for the centered variant).
pub fn m_contributions(
    sys: &LinearMomentSystem,
    theta: &DVector<f64>,
    xi: &DMatrix<f64>,
    obs: &WeightSpec,
) -> Result<DMatrix<f64>> {
    let ws = weighted_solve(sys, xi.clone())?;
    influence(sys, theta, &ws, obs)
}

fn correction(
    sys: &LinearMomentSystem,
    theta_weight: &DVector<f64>,
    theta_eval: &DVector<f64>,
    ws: &WeightedSolve,
    centered: bool,
) -> Result<DMatrix<f64>> {
    let m = sys.moments(theta_weight)?;
    let b = ws.weight.solve_vec(&sys.moment_mean(theta_eval)?);
    let mut d = DMatrix::zeros(sys.k(), sys.k());
    for j in 0..sys.k() {
        let d_omega = sys.omega_derivative_from_moments(&m, j, centered);
        let rhs = ws.xi_inv_g.tr_mul(&(d_omega * &b));
        d.set_column(j, &ws.normal.solve_vec(&rhs));
    }
    Ok(d)
}

/// Correction matrix `D̂_n`: column `j` is
/// `(G_n'Ξ⁻¹G_n)⁻¹ G_n' Ξ⁻¹ (∂Ω_n/∂θ_j at θ_weight) Ξ⁻¹ g_n(θ_eval)`.
pub fn d_hat(
    sys: &LinearMomentSystem,
    theta_weight: &DVector<f64>,
    theta_eval: &DVector<f64>,
    xi: &DMatrix<f64>,
    centered: bool,
) -> Result<DMatrix<f64>> {
    let ws = weighted_solve(sys, xi.clone())?;
    correction(sys, theta_weight, theta_eval, &ws, centered)
}

fn sandwich(a: &DMatrix<f64>, middle: &DMatrix<f64>) -> DMatrix<f64> {
    symmetrize(&(a * middle * a.transpose()))
}

fn outer_mean(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.tr_mul(b) / a.nrows() as f64
}

fn rank_deficient(sigma: &DMatrix<f64>) -> bool {
    let trace = sigma.trace().abs();
    trace == 0.0 || min_eigenvalue(sigma) <= 1e-12 * trace
}

/// `Ṽ` for a fit with weight `W`: `A (G'W⁻¹ΩW⁻¹G) A` with `A = (G'W⁻¹G)⁻¹`.
fn conventional_sandwich(
    ws: &WeightedSolve,
    a: &DMatrix<f64>,
    omega: &DMatrix<f64>,
) -> DMatrix<f64> {
    let meat = ws.xi_inv_g.tr_mul(&(omega * &ws.xi_inv_g));
    sandwich(a, &meat)
}

struct OneStepParts {
    a1: DMatrix<f64>,
    m1: DMatrix<f64>,
    v_tilde: DMatrix<f64>,
    v_dc: DMatrix<f64>,
    sigma: DMatrix<f64>,
}

fn one_step_parts(sys: &LinearMomentSystem, fit: &GmmFit) -> Result<OneStepParts> {
    let first = fit.one_step();
    let ws = weighted_solve(sys, first.weight_matrix.clone())?;
    let a1 = ws.normal.inverse();
    let omega1 = sys.omega(&first.theta, fit.plan.centered)?;
    let v_tilde = conventional_sandwich(&ws, &a1, &omega1);
    let m1 = influence(sys, &first.theta, &ws, &first.weight)?;
    let sigma = outer_mean(&m1, &m1);
    let v_dc = sandwich(&a1, &sigma);
    Ok(OneStepParts {
        a1,
        m1,
        v_tilde,
        v_dc,
        sigma,
    })
}

/// Variance estimates for a fit produced from `sys`.
pub fn variance_report(sys: &LinearMomentSystem, fit: &GmmFit) -> Result<VarianceReport> {
    let n = sys.n();
    let k = sys.k();
    let centered = fit.plan.centered;
    let (v_conv, v_w, v_dc, d, sigma, c_hat) = match fit.plan.kind {
        FitKind::OneStep { .. } => {
            let p = one_step_parts(sys, fit)?;
            (p.v_tilde, None, p.v_dc, None, p.sigma, None)
        }
        FitKind::TwoStep { .. } => {
            let p = one_step_parts(sys, fit)?;
            let theta1 = &fit.one_step().theta;
            let second = fit.final_step();
            let theta2 = &second.theta;
            let ws2 = weighted_solve(sys, second.weight_matrix.clone())?;
            let a2 = ws2.normal.inverse();
            let d = correction(sys, theta1, theta2, &ws2, centered)?;

            let v_w = symmetrize(
                &(&a2 + &d * &a2 + &a2 * d.transpose() + &d * &p.v_tilde * d.transpose()),
            );

            let m2 = influence(sys, theta2, &ws2, &second.weight)?;
            let sigma2 = outer_mean(&m2, &m2);
            let v_hat2 = sandwich(&a2, &sigma2);
            let c = &p.a1 * outer_mean(&p.m1, &m2) * &a2;
            let dc = &d * &c;
            let v_dc = symmetrize(&(v_hat2 + &dc + dc.transpose() + &d * &p.v_dc * d.transpose()));
            (a2, Some(v_w), v_dc, Some(d), sigma2, Some(c))
        }
        FitKind::Iterated { .. } => {
            let theta = &fit.theta;
            let omega = sys.omega(theta, centered)?;
            let ws = weighted_solve(sys, omega)?;
            let a = ws.normal.inverse();
            let d = correction(sys, theta, theta, &ws, centered)?;
            let i_minus_d = DMatrix::identity(k, k) - &d;
            let lu = LuFactor::new(i_minus_d, |condition| GmmError::IllConditionedCorrection {
                condition,
            })?;
            let inv = lu.inverse();
            let v_w = sandwich(&inv, &a);
            let obs = WeightSpec::efficient(theta.clone(), centered);
            let m = influence(sys, theta, &ws, &obs)?;
            let sigma = outer_mean(&m, &m);
            // Ĥ⁻¹ = (I - D̂)⁻¹ (G'Ω⁻¹G)⁻¹.
            let h_inv = &inv * &a;
            let v_dc = sandwich(&h_inv, &sigma);
            (symmetrize(&a), Some(v_w), v_dc, Some(d), sigma, None)
        }
    };

    Ok(VarianceReport {
        se_conv: standard_errors(&v_conv, n),
        se_w: v_w.as_ref().map(|v| standard_errors(v, n)),
        se_dc: standard_errors(&v_dc, n),
        sigma_rank_deficient: rank_deficient(&sigma),
        v_conv,
        v_w,
        v_dc,
        d_hat: d,
        sigma_n: sigma,
        c_hat,
        n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimate::{fit, FitPlan};
    use crate::linmoment::build_iv_system;

    fn toy_iv(n: usize) -> LinearMomentSystem {
        let z = DMatrix::from_fn(n, 3, |i, j| {
            ((i * 7 + j * 5) % 11) as f64 * 0.2 - 1.0 + (j == 0) as u8 as f64
        });
        let x = DMatrix::from_fn(n, 1, |i, _| {
            z.row(i).sum() * 0.5 + ((i * 3) % 4) as f64 * 0.3
        });
        let y = DVector::from_fn(n, |i, _| {
            x[(i, 0)] + ((i * 13) % 7) as f64 * 0.2 - 0.6 + 0.1 * z[(i, 1)]
        });
        build_iv_system(&y, &x, &z).unwrap()
    }

    /// Literal per-observation transcription of the three-term formula.
    fn literal_m(
        sys: &LinearMomentSystem,
        theta: &DVector<f64>,
        xi: &DMatrix<f64>,
        xi_obs: &dyn Fn(usize) -> Option<DMatrix<f64>>,
    ) -> DMatrix<f64> {
        let xi_inv = xi.clone().try_inverse().unwrap();
        let g_bar = sys.jacobian_mean();
        let g_n = sys.moment_mean(theta).unwrap();
        let mut out = DMatrix::zeros(sys.n(), sys.k());
        for i in 0..sys.n() {
            let gi = sys.moment(i, theta).unwrap();
            let mut mi =
                g_bar.transpose() * &xi_inv * gi + sys.jacobian(i).transpose() * &xi_inv * &g_n;
            if let Some(w) = xi_obs(i) {
                mi -= g_bar.transpose() * &xi_inv * w * &xi_inv * &g_n;
            }
            out.set_row(i, &mi.transpose());
        }
        out
    }

    #[test]
    fn influence_matches_literal_formula() {
        let sys = toy_iv(6);
        let theta = DVector::from_vec(vec![0.8]);
        let phi = DVector::from_vec(vec![1.1]);
        type ObsWeight<'a> = Box<dyn Fn(usize) -> Option<DMatrix<f64>> + 'a>;
        let cases: Vec<(WeightSpec, ObsWeight)> = vec![
            (WeightSpec::Identity, Box::new(|_| None)),
            (
                WeightSpec::DataAverage,
                Box::new(|i| Some(sys.obs_weight(i).unwrap().into_owned())),
            ),
            (
                WeightSpec::EfficientUncentered(phi.clone()),
                Box::new(|i| {
                    let g = sys.moment(i, &phi).unwrap();
                    Some(&g * g.transpose())
                }),
            ),
            (
                WeightSpec::EfficientCentered(phi.clone()),
                Box::new(|i| {
                    let g = sys.moment(i, &phi).unwrap() - sys.moment_mean(&phi).unwrap();
                    Some(&g * g.transpose())
                }),
            ),
        ];
        for (spec, obs) in cases {
            let xi = sys.weight_matrix(&spec).unwrap();
            let got = m_contributions(&sys, &theta, &xi, &spec).unwrap();
            let want = literal_m(&sys, &theta, &xi, obs.as_ref());
            assert!((got - want).amax() < 1e-12, "{}", spec.label());
        }
    }

    #[test]
    fn influence_mean_vanishes_at_fit() {
        let sys = toy_iv(20);
        for plan in [
            FitPlan::one_step(WeightSpec::DataAverage),
            FitPlan::two_step(WeightSpec::DataAverage),
            FitPlan::iterated(WeightSpec::DataAverage),
        ] {
            let f = fit(&sys, &plan).unwrap();
            let last = f.final_step();
            let m = m_contributions(&sys, &f.theta, &last.weight_matrix, &last.weight).unwrap();
            assert!(m.row_mean().amax() < 1e-10, "{}", plan.label());
        }
    }

    #[test]
    fn d_hat_is_zero_when_just_identified() {
        let n = 10;
        let z = DMatrix::from_fn(n, 1, |i, _| 1.0 + (i % 3) as f64);
        let x = DMatrix::from_fn(n, 1, |i, _| z[(i, 0)] + 0.1 * i as f64);
        let y = DVector::from_fn(n, |i, _| (i as f64).sin());
        let sys = build_iv_system(&y, &x, &z).unwrap();
        for plan in [
            FitPlan::one_step(WeightSpec::DataAverage),
            FitPlan::two_step(WeightSpec::DataAverage),
            FitPlan::iterated(WeightSpec::DataAverage),
        ] {
            let f = fit(&sys, &plan).unwrap();
            let r = variance_report(&sys, &f).unwrap();
            if let Some(d) = &r.d_hat {
                assert!(d.amax() < 1e-12);
            }
            let rel = (r.v_conv[(0, 0)] - r.v_dc[(0, 0)]).abs() / r.v_conv[(0, 0)];
            assert!(rel < 1e-8, "{} {}", plan.label(), rel);
            if let Some(vw) = &r.v_w {
                assert!((vw[(0, 0)] - r.v_conv[(0, 0)]).abs() / r.v_conv[(0, 0)] < 1e-8);
            }
        }
    }

    #[test]
    fn one_step_has_no_windmeijer_term() {
        let sys = toy_iv(15);
        let f = fit(&sys, &FitPlan::one_step(WeightSpec::DataAverage)).unwrap();
        let r = variance_report(&sys, &f).unwrap();
        assert!(r.v_w.is_none() && r.se_w.is_none() && r.d_hat.is_none() && r.c_hat.is_none());
        assert!(r.se_dc[0] > 0.0 && r.se_conv[0] > 0.0);
    }

    #[test]
    fn two_step_report_is_symmetric_psd() {
        let sys = toy_iv(25);
        let f = fit(&sys, &FitPlan::two_step(WeightSpec::DataAverage)).unwrap();
        let r = variance_report(&sys, &f).unwrap();
        assert_eq!(r.v_dc, r.v_dc.transpose());
        assert!(min_eigenvalue(&r.v_dc) >= -1e-10 * r.v_dc.trace());
        assert!((r.se_dc[0] - (r.v_dc[(0, 0)] / 25.0).sqrt()).abs() < 1e-15);
    }
}
