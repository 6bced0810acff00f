//! Higher-order stochastic expansions of the one-step and two-step
//! estimators under local misspecification `E[g_i(θ₀)] = δ/√n`.
//!
//! Given a sample and the population quantities of the design that produced
//! it, these functions evaluate every term of the expansion so that
//! `√n(θ̂ - θ₀) - predicted` can be checked to shrink at rate `n⁻¹`.

use nalgebra::{DMatrix, DVector};

use crate::error::{GmmError, Result};
use crate::linalg::{LuFactor, SpdFactor};
use crate::linmoment::LinearMomentSystem;

/// `Σ_{j=0..order} (-n^{-1/2} X⁻¹Y)^j X⁻¹`, the truncated geometric expansion
/// of `(X + n^{-1/2} Y)⁻¹`.
pub fn neumann_inverse(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    n: f64,
    order: usize,
) -> Result<DMatrix<f64>> {
    if x.shape() != y.shape() || !x.is_square() {
        return Err(GmmError::DimensionMismatch(format!(
            "X is {}x{}, Y is {}x{}",
            x.nrows(),
            x.ncols(),
            y.nrows(),
            y.ncols()
        )));
    }
    if n.is_nan() || n <= 0.0 {
        return Err(GmmError::InvalidInput(format!(
            "scale n must be positive, got {n}"
        )));
    }
    let x_inv = LuFactor::new(x.clone(), |condition| GmmError::RankDeficient {
        what: "X".into(),
        condition,
    })?
    .inverse();
    let step = -(&x_inv * y) / n.sqrt();
    let mut term = x_inv.clone();
    let mut sum = x_inv;
    for _ in 0..order {
        term = &step * term;
        sum += &term;
    }
    Ok(sum)
}

/// Population quantities of a design at `θ₀`.
#[derive(Debug, Clone)]
pub struct ExpansionTruth {
    /// `G = E[G_i]`, `q × k`.
    pub jacobian: DMatrix<f64>,
    /// One-step weight limit `W = E[W_i]` (the identity when the sample has
    /// no per-observation weights).
    pub weight: DMatrix<f64>,
    /// `Ω = E[g_i(θ₀) g_i(θ₀)']`.
    pub omega: DMatrix<f64>,
    /// `∂Ω(θ)/∂θ_j` at `θ₀`, one `q × q` slice per parameter.
    pub d_omega: Vec<DMatrix<f64>>,
    /// Local violation, `E[g_i(θ₀)] = δ/√n`.
    pub delta: DVector<f64>,
    pub theta0: DVector<f64>,
}

impl ExpansionTruth {
    fn check(&self, sys: &LinearMomentSystem) -> Result<()> {
        let (q, k) = (sys.q(), sys.k());
        let ok = self.jacobian.shape() == (q, k)
            && self.weight.shape() == (q, q)
            && self.omega.shape() == (q, q)
            && self.d_omega.len() == k
            && self.d_omega.iter().all(|d| d.shape() == (q, q))
            && self.delta.len() == q
            && self.theta0.len() == k;
        if ok {
            Ok(())
        } else {
            Err(GmmError::DimensionMismatch(
                "population quantities do not match the moment system".into(),
            ))
        }
    }
}

/// `√n`-scaled deviations of sample averages from their population values.
#[derive(Debug, Clone)]
pub struct SampleDeviations {
    /// `g̃ = √n (g_n(θ₀) - δ/√n)`.
    pub g: DVector<f64>,
    /// `G̃ = √n (G_n - G)`.
    pub jacobian: DMatrix<f64>,
    /// `W̃ = √n (W_n - W)`; zero when the sample has no weight blocks.
    pub weight: DMatrix<f64>,
    /// `Ω̃ = √n (Ω_n(θ₀) - Ω)`.
    pub omega: DMatrix<f64>,
}

pub fn sample_deviations(
    sys: &LinearMomentSystem,
    truth: &ExpansionTruth,
) -> Result<SampleDeviations> {
    truth.check(sys)?;
    let rn = (sys.n() as f64).sqrt();
    let st = sys.moment_stats(&truth.theta0)?;
    let weight = match sys.data_weight() {
        Some(w) => (w - &truth.weight) * rn,
        None => DMatrix::zeros(sys.q(), sys.q()),
    };
    Ok(SampleDeviations {
        g: (&st.g_n - &truth.delta / rn) * rn,
        jacobian: (&st.jac_n - &truth.jacobian) * rn,
        weight,
        omega: (&st.omega - &truth.omega) * rn,
    })
}

#[derive(Debug, Clone)]
pub struct ExpansionTerms {
    pub eta: DVector<f64>,
    pub psi0: DVector<f64>,
    pub psi1: DVector<f64>,
    pub q_term: DVector<f64>,
    pub b_term: DMatrix<f64>,
    /// Two-step only.
    pub d: Option<DMatrix<f64>>,
    pub c_tilde: Option<DMatrix<f64>>,
    pub h_eta: Option<DMatrix<f64>>,
    pub h_psi0: Option<DMatrix<f64>>,
    /// The one-step terms a two-step expansion is built from.
    pub one_step: Option<Box<ExpansionTerms>>,
    /// Sum of the terms up to and including order `n^{-1/2}` (plus the
    /// `n⁻¹ D ψ̃_{W,1}` term for two-step).
    pub predicted: DVector<f64>,
}

/// Terms shared by the one-step and two-step expansions for a weight `Ξ` with deviation `Ξ̃`.
struct Core {
    eta: DVector<f64>,
    psi0: DVector<f64>,
    psi1: DVector<f64>,
    q_term: DVector<f64>,
    b_term: DMatrix<f64>,
    xi: SpdFactor,
    xi_inv_g: DMatrix<f64>,
    a: SpdFactor,
}

fn core_terms(
    truth: &ExpansionTruth,
    dev: &SampleDeviations,
    xi: &DMatrix<f64>,
    xi_dev: &DMatrix<f64>,
) -> Result<Core> {
    let xi = SpdFactor::new(xi.clone(), |condition| GmmError::SingularWeight {
        condition,
    })?;
    let g = &truth.jacobian;
    let xi_inv_g = xi.solve_mat(g);
    let a = SpdFactor::new(g.tr_mul(&xi_inv_g), |condition| {
        GmmError::SingularNormalMatrix { condition }
    })?;
    let xi_inv_delta = xi.solve_vec(&truth.delta);
    let xi_inv_gt = xi.solve_vec(&dev.g);

    // (G'Ξ⁻¹G)⁻¹ applied with a leading minus sign.
    let neg = |v: DVector<f64>| -a.solve_vec(&v);

    let eta = neg(xi_inv_g.tr_mul(&truth.delta));
    let psi0 = neg(xi_inv_g.tr_mul(&dev.g));
    let psi1 = neg(dev.jacobian.tr_mul(&xi_inv_delta) - xi_inv_g.tr_mul(&(xi_dev * &xi_inv_delta)));
    // The leading product is G̃'Ξ⁻¹g̃, a k-vector.
    let q_term = neg(dev.jacobian.tr_mul(&xi_inv_gt) - xi_inv_g.tr_mul(&(xi_dev * &xi_inv_gt)));
    let inner = dev.jacobian.tr_mul(&xi_inv_g) - xi_inv_g.tr_mul(&(xi_dev * &xi_inv_g))
        + xi_inv_g.tr_mul(&dev.jacobian);
    let b_term = -a.solve_mat(&inner);
    Ok(Core {
        eta,
        psi0,
        psi1,
        q_term,
        b_term,
        xi,
        xi_inv_g,
        a,
    })
}

/// One-step expansion:
/// `η_W + ψ̃_{W,0} + n^{-1/2}(ψ̃_{W,1} + q̃_W + B̃_W(η_W + ψ̃_{W,0}))`.
pub fn onestep_expansion(
    sys: &LinearMomentSystem,
    truth: &ExpansionTruth,
) -> Result<ExpansionTerms> {
    let dev = sample_deviations(sys, truth)?;
    onestep_from(sys.n(), truth, &dev)
}

fn onestep_from(
    n: usize,
    truth: &ExpansionTruth,
    dev: &SampleDeviations,
) -> Result<ExpansionTerms> {
    let c = core_terms(truth, dev, &truth.weight, &dev.weight)?;
    let rn = (n as f64).sqrt();
    let lead = &c.eta + &c.psi0;
    let predicted = &lead + (&c.psi1 + &c.q_term + &c.b_term * &lead) / rn;
    Ok(ExpansionTerms {
        eta: c.eta,
        psi0: c.psi0,
        psi1: c.psi1,
        q_term: c.q_term,
        b_term: c.b_term,
        d: None,
        c_tilde: None,
        h_eta: None,
        h_psi0: None,
        one_step: None,
        predicted,
    })
}

/// Two-step expansion, grouped as
/// `[η_Ω + n^{-1/2}(D + H_η)η_W] + ψ̃_{Ω,0}
///  + n^{-1/2}(ψ̃_{Ω,1} + (D + C̃ + H_η + H_ψ)ψ̃_{W,0} + q̃_Ω + B̃_Ω(η_Ω + ψ̃_{Ω,0}) + (C̃ + H_ψ)η_W)
///  + n⁻¹ D ψ̃_{W,1}`.
pub fn twostep_expansion(
    sys: &LinearMomentSystem,
    truth: &ExpansionTruth,
) -> Result<ExpansionTerms> {
    let dev = sample_deviations(sys, truth)?;
    let w = onestep_from(sys.n(), truth, &dev)?;
    let c = core_terms(truth, &dev, &truth.omega, &dev.omega)?;
    let k = truth.theta0.len();

    // Column j of each matrix is (G'Ω⁻¹G)⁻¹ G'Ω⁻¹ ∂Ω_j Ω⁻¹ v for a fixed v.
    let project = |v: &DVector<f64>| -> DMatrix<f64> {
        let ov = c.xi.solve_vec(v);
        let mut out = DMatrix::zeros(k, k);
        for (j, d_omega) in truth.d_omega.iter().enumerate() {
            let col = c.a.solve_vec(&c.xi_inv_g.tr_mul(&(d_omega * &ov)));
            out.set_column(j, &col);
        }
        out
    };
    let d = project(&truth.delta);
    let c_tilde = project(&dev.g);
    let h_eta = project(&(&truth.jacobian * &c.eta));
    let h_psi0 = project(&(&truth.jacobian * &c.psi0));

    let n = sys.n() as f64;
    let rn = n.sqrt();
    let bias = &c.eta + (&d + &h_eta) * &w.eta / rn;
    let first = (&c.psi1
        + (&d + &c_tilde + &h_eta + &h_psi0) * &w.psi0
        + &c.q_term
        + &c.b_term * (&c.eta + &c.psi0)
        + (&c_tilde + &h_psi0) * &w.eta)
        / rn;
    let predicted = bias + &c.psi0 + first + &d * &w.psi1 / n;

    Ok(ExpansionTerms {
        eta: c.eta,
        psi0: c.psi0,
        psi1: c.psi1,
        q_term: c.q_term,
        b_term: c.b_term,
        d: Some(d),
        c_tilde: Some(c_tilde),
        h_eta: Some(h_eta),
        h_psi0: Some(h_psi0),
        one_step: Some(Box::new(w)),
        predicted,
    })
}
