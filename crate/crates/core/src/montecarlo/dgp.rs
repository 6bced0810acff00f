//! The three simulation designs.
//!
//! Every generator takes a [`Streams`] handle for one replication and draws
//! each variable family from its own stream.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use statrs::function::erf::erfc;

use crate::expansion::ExpansionTruth;
use crate::linmoment::PanelDataset;
use crate::montecarlo::rng::{block, Streams};

/// First-stage coefficient giving a population first-stage R² of 0.2.
pub const PI0: f64 = 0.25;
/// Structural coefficient in the IV and misspecified-lag designs.
pub const BETA0: f64 = 1.0;
/// Common autoregressive coefficient of the random-coefficient design when
/// the heterogeneity parameter is zero.
pub const RHO0: f64 = 0.5;
/// Burn-in periods of the misspecified-lag design.
pub const LAG_BURN_IN: usize = 50;

#[derive(Debug, Clone)]
pub struct IvSample {
    pub y: DVector<f64>,
    /// `n × 1`.
    pub x: DMatrix<f64>,
    /// `n × 4`.
    pub z: DMatrix<f64>,
}

fn std_normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// The violation vector `a` with `E[z_i e_i] = a`: `α₀(1,-1,1,-1)/√n`, or
/// without the `1/√n` scaling when `fixed`.
pub fn iv_violation(n: usize, alpha0: f64, fixed: bool) -> DVector<f64> {
    let scale = if fixed {
        alpha0
    } else {
        alpha0 / (n as f64).sqrt()
    };
    DVector::from_vec(vec![scale, -scale, scale, -scale])
}

/// Cross-sectional IV design with four instruments, one endogenous regressor
/// and heteroskedastic errors; `α₀ ≠ 0` makes the instruments invalid.
pub fn dgp_iv(n: usize, alpha0: f64, streams: &Streams, fixed: bool) -> IvSample {
    let mut rz = streams.get(block::INSTRUMENTS);
    let mut ru = streams.get(block::FIRST_STAGE);
    let mut rv = streams.get(block::HETEROSKEDASTIC);
    let a = iv_violation(n, alpha0, fixed);
    let sd_v = (1.0_f64 - 0.25).sqrt();

    let mut z = DMatrix::zeros(n, 4);
    let mut x = DMatrix::zeros(n, 1);
    let mut y = DVector::zeros(n);
    for i in 0..n {
        for j in 0..4 {
            z[(i, j)] = std_normal(&mut rz);
        }
        let u = std_normal(&mut ru);
        let v = z[(i, 0)].abs() * std_normal(&mut rv);
        let zi = z.row(i);
        x[(i, 0)] = PI0 * zi.sum() + u;
        let e = zi.dot(&a.transpose()) + 0.5 * u + sd_v * v;
        y[i] = x[(i, 0)] * BETA0 + e;
    }
    IvSample { y, x, z }
}

/// Population quantities of the IV design at `β₀` for sample size `n`.
///
/// With `a = E[z_i e_i]` and `E[e_i² | z_i] = (a'z_i)² + 0.25 + 0.75 z_1i²`,
/// Gaussian fourth moments give `Ω = diag(2.5, 1, 1, 1) + a'a I + 2aa'` and,
/// since `a'1 = 0`, `∂Ω/∂β = -(I + 2π₀(a1' + 1a'))`. `G = -π₀ 1` and the
/// data-average weight limit is `I`.
pub fn iv_population_truth(n: usize, alpha0: f64, fixed: bool) -> ExpansionTruth {
    let a = iv_violation(n, alpha0, fixed);
    let ones = DVector::from_element(4, 1.0);
    let mut omega = DMatrix::identity(4, 4) * (1.0 + a.dot(&a)) + &a * a.transpose() * 2.0;
    omega[(0, 0)] += 1.5;
    let cross = &a * ones.transpose() + &ones * a.transpose();
    let d_omega = -(DMatrix::identity(4, 4) + cross * (2.0 * PI0));
    let delta = if fixed {
        a.clone()
    } else {
        &a * (n as f64).sqrt()
    };
    ExpansionTruth {
        jacobian: DMatrix::from_element(4, 1, -PI0),
        weight: DMatrix::identity(4, 4),
        omega,
        d_omega: vec![d_omega],
        delta,
        theta0: DVector::from_element(1, BETA0),
    }
}

/// AR(1) panel with individual-specific coefficients `ρ_i = Φ(α₀ η_i)`.
/// Returns `y` only (`N × T`).
///
/// The initial condition `η_i/(1-ρ_i) + u_i`, `u_i ~ N(0, 1/(1-ρ_i²))`, is a
/// pre-sample value; the `T` observed periods all follow the recursion.
pub fn dgp_panel_rc(n: usize, t: usize, alpha0: f64, streams: &Streams) -> PanelDataset {
    let mut reta = streams.get(block::EFFECTS);
    let mut rinit = streams.get(block::INITIAL);
    let mut rnu = streams.get(block::INNOVATIONS);
    let mut y = DMatrix::zeros(n, t);
    for i in 0..n {
        let eta = std_normal(&mut reta);
        let rho = normal_cdf(alpha0 * eta);
        let sd_init = (1.0 / (1.0 - rho * rho)).sqrt();
        let mut prev = eta / (1.0 - rho) + sd_init * std_normal(&mut rinit);
        for p in 0..t {
            prev = rho * prev + eta + 0.5 * std_normal(&mut rnu);
            y[(i, p)] = prev;
        }
    }
    PanelDataset { y, x: None }
}

/// `τ_t` for period `t` (burn-in periods are `t ≤ 0`).
fn tau(t: i64) -> f64 {
    if t <= 0 {
        0.5
    } else {
        0.5 + 0.1 * (t - 1) as f64
    }
}

/// Panel with a predetermined regressor whose lag enters `y` with
/// coefficient `α₀`; the estimated model omits the lag.
pub fn dgp_panel_lag(n: usize, t: usize, alpha0: f64, streams: &Streams) -> PanelDataset {
    let mut reta = streams.get(block::EFFECTS);
    let mut rscale = streams.get(block::SCALES);
    let mut rinit = streams.get(block::INITIAL);
    let mut reps = streams.get(block::INNOVATIONS);
    let mut romega = streams.get(block::SHOCKS);
    let scale_dist = Uniform::new_inclusive(0.5, 1.5).expect("valid uniform bounds");
    let sd_init = (1.0_f64 / 0.75).sqrt();
    let first = 1 - LAG_BURN_IN as i64;

    let mut y = DMatrix::zeros(n, t);
    let mut x = DMatrix::zeros(n, t);
    for i in 0..n {
        let eta = std_normal(&mut reta);
        let delta_i: f64 = scale_dist.sample(&mut rscale);
        let shock = |period: i64, r: &mut dyn rand::RngCore| {
            let w: f64 = StandardNormal.sample(r);
            delta_i * tau(period) * (w * w - 1.0)
        };
        let mut x_prev = eta / 0.5 + sd_init * std_normal(&mut rinit);
        let mut v_prev = shock(first, &mut romega);
        for period in (first + 1)..=(t as i64) {
            let x_now = 0.5 * x_prev + eta + 0.5 * v_prev + std_normal(&mut reps);
            let v_now = shock(period, &mut romega);
            if period >= 1 {
                let c = (period - 1) as usize;
                x[(i, c)] = x_now;
                y[(i, c)] = BETA0 * x_now + alpha0 * x_prev + eta + v_now;
            }
            x_prev = x_now;
            v_prev = v_now;
        }
    }
    PanelDataset { y, x: Some(x) }
}
