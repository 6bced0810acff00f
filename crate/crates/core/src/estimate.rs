//! Closed-form linear GMM, from the one-step fit up to the iterated
//! fixed point.

use nalgebra::{DMatrix, DVector};

use crate::error::{GmmError, Result};
use crate::linalg::SpdFactor;
use crate::linmoment::{LinearMomentSystem, WeightSpec};

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub enum FitKind {
    OneStep {
        w0: WeightSpec,
    },
    TwoStep {
        w0: WeightSpec,
    },
    /// Iterate efficient updates from the one-step estimate until successive
    /// iterates differ by less than `tol · (1 + ‖θ_{s-1}‖)`.
    Iterated {
        w0: WeightSpec,
        tol: f64,
        max_iter: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitPlan {
    pub kind: FitKind,
    /// Use the centered `Ωᶜ_n` in the efficient steps.
    pub centered: bool,
}

impl FitPlan {
    pub fn one_step(w0: WeightSpec) -> Self {
        Self {
            kind: FitKind::OneStep { w0 },
            centered: false,
        }
    }

    pub fn two_step(w0: WeightSpec) -> Self {
        Self {
            kind: FitKind::TwoStep { w0 },
            centered: false,
        }
    }

    pub fn iterated(w0: WeightSpec) -> Self {
        Self {
            kind: FitKind::Iterated {
                w0,
                tol: DEFAULT_TOL,
                max_iter: DEFAULT_MAX_ITER,
            },
            centered: false,
        }
    }

    pub fn with_centered(mut self, centered: bool) -> Self {
        self.centered = centered;
        self
    }

    pub fn initial_weight(&self) -> &WeightSpec {
        match &self.kind {
            FitKind::OneStep { w0 } | FitKind::TwoStep { w0 } | FitKind::Iterated { w0, .. } => w0,
        }
    }

    pub fn label(&self) -> &'static str {
        match self.kind {
            FitKind::OneStep { .. } => "one-step",
            FitKind::TwoStep { .. } => "two-step",
            FitKind::Iterated { .. } => "iterated",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let FitKind::Iterated { tol, max_iter, .. } = self.kind {
            if tol.is_nan() || tol <= 0.0 || !tol.is_finite() {
                return Err(GmmError::InvalidConfig(format!(
                    "tolerance must be positive, got {tol}"
                )));
            }
            if max_iter == 0 {
                return Err(GmmError::InvalidConfig(
                    "max_iter must be at least 1".into(),
                ));
            }
        }
        Ok(())
    }
}

/// One estimation step: the estimate and the weight it was computed with.
#[derive(Debug, Clone)]
pub struct FitStep {
    pub theta: DVector<f64>,
    pub weight: WeightSpec,
    pub weight_matrix: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct GmmFit {
    pub theta: DVector<f64>,
    /// Every step in order; the first is always the one-step estimate.
    pub steps: Vec<FitStep>,
    /// `g_n(θ̂)`.
    pub g_n_hat: DVector<f64>,
    pub converged: bool,
    /// Number of efficient-weight updates performed after the one-step fit.
    pub iterations: usize,
    pub plan: FitPlan,
}

impl GmmFit {
    pub fn one_step(&self) -> &FitStep {
        &self.steps[0]
    }

    pub fn final_step(&self) -> &FitStep {
        self.steps.last().expect("a fit has at least one step")
    }
}

pub(crate) fn weight_factor(m: DMatrix<f64>) -> Result<SpdFactor> {
    SpdFactor::new(m, |condition| GmmError::SingularWeight { condition })
}

pub(crate) fn normal_factor(m: DMatrix<f64>) -> Result<SpdFactor> {
    SpdFactor::new(m, |condition| GmmError::SingularNormalMatrix { condition })
}

/// Factored pieces of a weighted solve that the variance code reuses.
#[derive(Debug, Clone)]
pub(crate) struct WeightedSolve {
    pub theta: DVector<f64>,
    pub weight: SpdFactor,
    /// `Ξ⁻¹ G_n`.
    pub xi_inv_g: DMatrix<f64>,
    /// `G_n' Ξ⁻¹ G_n`.
    pub normal: SpdFactor,
}

pub(crate) fn weighted_solve(sys: &LinearMomentSystem, xi: DMatrix<f64>) -> Result<WeightedSolve> {
    if xi.shape() != (sys.q(), sys.q()) {
        return Err(GmmError::DimensionMismatch(format!(
            "weight matrix is {}x{}, expected {}x{}",
            xi.nrows(),
            xi.ncols(),
            sys.q(),
            sys.q()
        )));
    }
    let weight = weight_factor(xi)?;
    let g = sys.jacobian_mean();
    let xi_inv_g = weight.solve_mat(g);
    let normal = normal_factor(g.tr_mul(&xi_inv_g))?;
    let rhs = -xi_inv_g.tr_mul(sys.h_mean());
    let theta = normal.solve_vec(&rhs);
    Ok(WeightedSolve {
        theta,
        weight,
        xi_inv_g,
        normal,
    })
}

/// The minimiser of `g_n(θ)' Ξ⁻¹ g_n(θ)`:
/// `θ̂ = -(G_n'Ξ⁻¹G_n)⁻¹ G_n'Ξ⁻¹ h_n`.
pub fn solve_weighted(sys: &LinearMomentSystem, xi: &DMatrix<f64>) -> Result<DVector<f64>> {
    Ok(weighted_solve(sys, xi.clone())?.theta)
}

fn step(sys: &LinearMomentSystem, weight: WeightSpec) -> Result<FitStep> {
    let weight_matrix = sys.weight_matrix(&weight)?;
    let theta = solve_weighted(sys, &weight_matrix)?;
    Ok(FitStep {
        theta,
        weight,
        weight_matrix,
    })
}

pub fn fit(sys: &LinearMomentSystem, plan: &FitPlan) -> Result<GmmFit> {
    plan.validate()?;
    let first = step(sys, plan.initial_weight().clone())?;
    let mut steps = vec![first];
    let mut converged = true;
    let mut iterations = 0;

    match plan.kind {
        FitKind::OneStep { .. } => {}
        FitKind::TwoStep { .. } => {
            let prev = steps[0].theta.clone();
            steps.push(step(sys, WeightSpec::efficient(prev, plan.centered))?);
            iterations = 1;
        }
        FitKind::Iterated { tol, max_iter, .. } => {
            converged = false;
            while iterations < max_iter {
                let prev = steps.last().map(|s| s.theta.clone()).unwrap_or_default();
                let next = step(sys, WeightSpec::efficient(prev.clone(), plan.centered))?;
                iterations += 1;
                let moved = (&next.theta - &prev).norm();
                steps.push(next);
                if moved < tol * (1.0 + prev.norm()) {
                    converged = true;
                    break;
                }
            }
        }
    }

    let theta = steps.last().map(|s| s.theta.clone()).unwrap_or_default();
    let g_n_hat = sys.moment_mean(&theta)?;
    Ok(GmmFit {
        theta,
        steps,
        g_n_hat,
        converged,
        iterations,
        plan: plan.clone(),
    })
}
