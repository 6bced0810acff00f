//! Closed-form oracles for the variance estimators.
//!
//! Each oracle rebuilds the estimator and its variance matrices from the
//! stacked data matrices with explicit inverses, independently of the
//! moment-system machinery.

#![allow(dead_code, clippy::needless_range_loop)]

use gmmdc::montecarlo::dgp::{dgp_iv, dgp_panel_lag, dgp_panel_rc};
use gmmdc::montecarlo::rng::Streams;
use gmmdc::{
    build_ab_system, build_iv_system, fit, variance_report, FitPlan, PanelModel, VarianceReport,
    WeightSpec,
};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

pub const TOL: f64 = 1e-10;

pub fn inv(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone()
        .try_inverse()
        .expect("oracle matrix is invertible")
}

pub fn rel(got: &DMatrix<f64>, want: &DMatrix<f64>) -> f64 {
    (got - want).amax() / want.amax().max(f64::MIN_POSITIVE)
}

pub fn rel_vec(got: &DVector<f64>, want: &DVector<f64>) -> f64 {
    (got - want).amax() / want.amax().max(f64::MIN_POSITIVE)
}

/// Oracle output for one estimator, on the library's own scale.
pub struct Expected {
    pub theta: DVector<f64>,
    pub v_conv: DMatrix<f64>,
    pub v_w: Option<DMatrix<f64>>,
    pub v_dc: DMatrix<f64>,
}

pub fn compare(
    label: &str,
    got_theta: &DVector<f64>,
    rep: &VarianceReport,
    want: &Expected,
) -> f64 {
    let mut worst = rel_vec(got_theta, &want.theta);
    worst = worst.max(rel(&rep.v_conv, &want.v_conv));
    worst = worst.max(rel(&rep.v_dc, &want.v_dc));
    match (&rep.v_w, &want.v_w) {
        (Some(g), Some(w)) => worst = worst.max(rel(g, w)),
        (None, None) => {}
        _ => panic!("{label}: Windmeijer variance presence differs"),
    }
    worst
}

// ---------------------------------------------------------------------------
// Cross-sectional IV

pub struct IvData {
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
}

pub struct IvOracle {
    pub one: Expected,
    pub two: Expected,
}

pub fn iv_oracle(d: &IvData) -> IvOracle {
    let (y, x, z) = (&d.y, &d.x, &d.z);
    let n = y.len() as f64;
    let zi = |i: usize| z.row(i).transpose();
    let xi = |i: usize| x.row(i).transpose();

    let p = inv(&(z.transpose() * z));
    let xz = x.transpose() * z;
    let s1 = &xz * &p * xz.transpose();
    let theta1 = inv(&s1) * &xz * &p * z.transpose() * y;
    let e1 = y - x * &theta1;
    let ze1 = z.transpose() * &e1;

    let mut omega1 = DMatrix::zeros(z.ncols(), z.ncols());
    for i in 0..y.len() {
        omega1 += zi(i) * zi(i).transpose() * e1[i].powi(2);
    }
    omega1 /= n;
    let oi = inv(&omega1);

    let s2 = &xz * &oi * xz.transpose();
    let theta2 = inv(&s2) * &xz * &oi * z.transpose() * y;
    let e2 = y - x * &theta2;
    let ze2 = z.transpose() * &e2;

    let k = x.ncols();
    let (mut s11, mut s12, mut s22) = (
        DMatrix::zeros(k, k),
        DMatrix::zeros(k, k),
        DMatrix::zeros(k, k),
    );
    let mut dsum = DMatrix::zeros(z.ncols(), k);
    for i in 0..y.len() {
        let m1 = &xz * &p * zi(i) * e1[i] + xi(i) * (zi(i).transpose() * &p * &ze1)
            - &xz * &p * zi(i) * (zi(i).transpose() * &p * &ze1);
        let m2 = &xz * &oi * zi(i) * e2[i] / n + xi(i) * (zi(i).transpose() * &oi * &ze2) / n
            - &xz * &oi * zi(i) * (zi(i).transpose() * &oi * &ze2) * e1[i].powi(2) / (n * n);
        s11 += &m1 * m1.transpose();
        s12 += &m1 * m2.transpose();
        s22 += &m2 * m2.transpose();
        let scalar = e1[i] * (zi(i).transpose() * &oi * &ze2)[0];
        dsum += zi(i) * xi(i).transpose() * scalar;
    }
    let (s11, s12, s22) = (s11 / n, s12 / n, s22 / n);

    let a1 = inv(&(&s1 / n));
    let b2 = inv(&(&s2 / (n * n)));
    let v_dc1 = &a1 * &s11 * &a1;
    let v_tilde1 = inv(&s1) * &xz * &p * &omega1 * &p * xz.transpose() * inv(&s1) * (n * n);
    let v_hat2 = &b2 * &s22 * &b2;
    let c = &a1 * &s12 * &b2;
    let dmat = inv(&s2) * &xz * &oi * dsum * (2.0 / n);
    let v_dc2 =
        &v_hat2 + &dmat * &c + c.transpose() * dmat.transpose() + &dmat * &v_dc1 * dmat.transpose();
    let v_w2 = &b2 + &dmat * &b2 + &b2 * dmat.transpose() + &dmat * &v_tilde1 * dmat.transpose();

    IvOracle {
        one: Expected {
            theta: theta1,
            v_conv: v_tilde1,
            v_w: None,
            v_dc: v_dc1,
        },
        two: Expected {
            theta: theta2,
            v_conv: b2,
            v_w: Some(v_w2),
            v_dc: v_dc2,
        },
    }
}

/// Iterated-GMM formulas evaluated at a given converged estimate.
pub fn iv_iterated_oracle(d: &IvData, theta: &DVector<f64>) -> Expected {
    let (y, x, z) = (&d.y, &d.x, &d.z);
    let n = y.len() as f64;
    let k = x.ncols();
    let zi = |i: usize| z.row(i).transpose();
    let xi = |i: usize| x.row(i).transpose();

    let e = y - x * theta;
    let mut omega = DMatrix::zeros(z.ncols(), z.ncols());
    for i in 0..y.len() {
        omega += zi(i) * zi(i).transpose() * e[i].powi(2);
    }
    omega /= n;
    let oi = inv(&omega);
    let xz = x.transpose() * z;
    let ze = z.transpose() * &e;
    let s = &xz * &oi * xz.transpose();

    let mut hsum = DMatrix::zeros(z.ncols(), k);
    let mut sig = DMatrix::zeros(k, k);
    for i in 0..y.len() {
        let scalar = (zi(i).transpose() * &oi * &ze)[0];
        hsum += zi(i) * xi(i).transpose() * (e[i] * scalar);
        let m = &xz * &oi * zi(i) * e[i] / n + xi(i) * scalar / n
            - &xz * &oi * zi(i) * scalar * e[i].powi(2) / (n * n);
        sig += &m * m.transpose();
    }
    sig /= n;
    let h = &s / (n * n) - &xz * &oi * hsum * (2.0 / n.powi(3));
    let hi = inv(&h);
    Expected {
        theta: theta.clone(),
        v_conv: inv(&(&s / (n * n))),
        v_w: Some(&hi * (&s / (n * n)) * hi.transpose()),
        v_dc: &hi * sig * hi.transpose(),
    }
}

pub fn iv_dataset(idx: u64) -> IvData {
    let streams = Streams::new(1000 + idx, 0);
    let n = [50usize, 100, 200, 500][idx as usize % 4];
    let alpha0 = [0.0, 1.0, 0.5][idx as usize % 3];
    if idx.is_multiple_of(2) {
        let s = dgp_iv(n, alpha0, &streams, idx.is_multiple_of(5));
        return IvData {
            y: s.y,
            x: s.x,
            z: s.z,
        };
    }
    // Two regressors (one endogenous, one included exogenous) and five
    // instruments with heteroskedastic errors.
    let mut rng = streams.get(0);
    let mut draw = || -> f64 { rng.sample(StandardNormal) };
    let mut z = DMatrix::zeros(n, 5);
    let mut x = DMatrix::zeros(n, 2);
    let mut y = DVector::zeros(n);
    for i in 0..n {
        for j in 0..4 {
            z[(i, j)] = draw();
        }
        z[(i, 4)] = 1.0;
        let u = draw();
        x[(i, 0)] = 0.4 * (z[(i, 0)] - z[(i, 1)]) + 0.3 * z[(i, 2)] + u;
        x[(i, 1)] = 1.0;
        let e = 0.5 * u + (0.5 + z[(i, 3)].abs()) * draw() + alpha0 * 0.1 * z[(i, 2)];
        y[i] = x[(i, 0)] * 0.7 - 0.3 + e;
    }
    IvData { y, x, z }
}

// ---------------------------------------------------------------------------
// First-differenced panel

/// Working panel in predetermined-regressor form: `y_it = x_it β + η_i + v_it`.
pub struct PanelData {
    pub y: DMatrix<f64>,
    pub x: DMatrix<f64>,
}

pub struct Stacked {
    /// Individuals.
    big_n: usize,
    /// Differenced equations per individual.
    m: usize,
    z: Vec<DMatrix<f64>>,
    dy: Vec<DVector<f64>>,
    dx: Vec<DVector<f64>>,
    zs: DMatrix<f64>,
    dys: DVector<f64>,
    dxs: DMatrix<f64>,
    hmat: DMatrix<f64>,
}

pub fn stack(d: &PanelData) -> Stacked {
    let (big_n, t) = d.y.shape();
    let m = t - 1;
    let q = t * (t - 1) / 2;
    let mut z = Vec::new();
    let mut dy = Vec::new();
    let mut dx = Vec::new();
    for i in 0..big_n {
        // Rows are periods t = 2..T; row for period t holds x_i1..x_{i,t-1}.
        let mut zi = DMatrix::zeros(m, q);
        let mut col = 0;
        for r in 0..m {
            for s in 0..=r {
                zi[(r, col)] = d.x[(i, s)];
                col += 1;
            }
        }
        z.push(zi);
        dy.push(DVector::from_fn(m, |r, _| d.y[(i, r + 1)] - d.y[(i, r)]));
        dx.push(DVector::from_fn(m, |r, _| d.x[(i, r + 1)] - d.x[(i, r)]));
    }
    let mut zs = DMatrix::zeros(big_n * m, q);
    let mut dys = DVector::zeros(big_n * m);
    let mut dxs = DMatrix::zeros(big_n * m, 1);
    for i in 0..big_n {
        zs.rows_mut(i * m, m).copy_from(&z[i]);
        dys.rows_mut(i * m, m).copy_from(&dy[i]);
        dxs.rows_mut(i * m, m).copy_from(&dx[i]);
    }
    let hmat = DMatrix::from_fn(m, m, |a, b| match a.abs_diff(b) {
        0 => 2.0,
        1 => -1.0,
        _ => 0.0,
    });
    Stacked {
        big_n,
        m,
        z,
        dy,
        dx,
        zs,
        dys,
        dxs,
        hmat,
    }
}

pub struct PanelOracle {
    pub one: Expected,
    pub two: Expected,
    /// Ratio `N / n` converting the oracle's `n = N(T-1)` scale to the
    /// library's one-block-per-individual scale.
    pub scale: f64,
}

pub fn residuals(s: &Stacked, beta: f64) -> (Vec<DVector<f64>>, DVector<f64>) {
    let per: Vec<_> = (0..s.big_n).map(|i| &s.dy[i] - &s.dx[i] * beta).collect();
    let all = &s.dys - s.dxs.column(0) * beta;
    (per, all)
}

pub fn panel_oracle(d: &PanelData) -> PanelOracle {
    let s = stack(d);
    let n = (s.big_n * s.m) as f64;
    let scale = s.big_n as f64 / n;
    let q = s.zs.ncols();

    let mut w = DMatrix::zeros(q, q);
    for zi in &s.z {
        w += zi.transpose() * &s.hmat * zi;
    }
    w /= n;
    let wi = inv(&w);
    let xz = s.dxs.transpose() * &s.zs;
    let s1 = &xz * &wi * xz.transpose();
    let beta1 = (inv(&s1) * &xz * &wi * s.zs.transpose() * &s.dys)[0];
    let (v1, v1s) = residuals(&s, beta1);
    let zv1 = s.zs.transpose() * &v1s;

    let mut omega1 = DMatrix::zeros(q, q);
    for i in 0..s.big_n {
        let g = s.z[i].transpose() * &v1[i];
        omega1 += &g * g.transpose();
    }
    omega1 /= n;
    let oi = inv(&omega1);
    let s2 = &xz * &oi * xz.transpose();
    let beta2 = (inv(&s2) * &xz * &oi * s.zs.transpose() * &s.dys)[0];
    let (v2, v2s) = residuals(&s, beta2);
    let zv2 = s.zs.transpose() * &v2s;

    let (mut s11, mut s12, mut s22) = (0.0, 0.0, 0.0);
    let mut dsum = DVector::zeros(q);
    for i in 0..s.big_n {
        let zi = &s.z[i];
        let m1 = (&xz * &wi * zi.transpose() * &v1[i])[0]
            + (s.dx[i].transpose() * zi * &wi * &zv1)[0]
            - (&xz * &wi * zi.transpose() * &s.hmat * zi * &wi * &zv1)[0] / n;
        let zg1 = zi.transpose() * &v1[i];
        let m2 = (&xz * &oi * zi.transpose() * &v2[i])[0]
            + (s.dx[i].transpose() * zi * &oi * &zv2)[0]
            - (&xz * &oi * &zg1 * zg1.transpose() * &oi * &zv2)[0] / n;
        s11 += m1 * m1;
        s12 += m1 * m2;
        s22 += m2 * m2;
        let zdx = zi.transpose() * &s.dx[i];
        dsum += &zdx * (zv2.transpose() * &oi * &zg1)[0] + &zg1 * (zv2.transpose() * &oi * &zdx)[0];
    }
    let (s11, s12, s22) = (s11 / n, s12 / n, s22 / n);
    let (s1, s2) = (s1[0], s2[0]);

    let v_dc1 = n * n * s11 / (s1 * s1);
    let v_tilde1 = n * n * (&xz * &wi * &omega1 * &wi * xz.transpose())[0] / (s1 * s1);
    let v_hat2 = n * n * s22 / (s2 * s2);
    let c = n * n * s12 / (s1 * s2);
    let dm = (&xz * &oi * dsum)[0] / (s2 * n);
    let v_tilde2 = n * n / s2;
    let v_dc2 = v_hat2 + 2.0 * dm * c + dm * dm * v_dc1;
    let v_w2 = v_tilde2 + 2.0 * dm * v_tilde2 + dm * dm * v_tilde1;

    let one = |v: f64| DMatrix::from_element(1, 1, v * scale);
    PanelOracle {
        one: Expected {
            theta: DVector::from_element(1, beta1),
            v_conv: one(v_tilde1),
            v_w: None,
            v_dc: one(v_dc1),
        },
        two: Expected {
            theta: DVector::from_element(1, beta2),
            v_conv: one(v_tilde2),
            v_w: Some(one(v_w2)),
            v_dc: one(v_dc2),
        },
        scale,
    }
}

pub fn panel_iterated_oracle(d: &PanelData, beta: f64) -> Expected {
    let s = stack(d);
    let n = (s.big_n * s.m) as f64;
    let scale = s.big_n as f64 / n;
    let q = s.zs.ncols();
    let (v, vs) = residuals(&s, beta);
    let zv = s.zs.transpose() * &vs;
    let mut omega = DMatrix::zeros(q, q);
    for i in 0..s.big_n {
        let g = s.z[i].transpose() * &v[i];
        omega += &g * g.transpose();
    }
    omega /= n;
    let oi = inv(&omega);
    let xz = s.dxs.transpose() * &s.zs;
    let sm = (&xz * &oi * xz.transpose())[0];

    let mut hsum = DVector::zeros(q);
    let mut sig = 0.0;
    for i in 0..s.big_n {
        let zi = &s.z[i];
        let zg = zi.transpose() * &v[i];
        let zdx = zi.transpose() * &s.dx[i];
        hsum += &zg * (zv.transpose() * &oi * &zdx)[0] + &zdx * (zv.transpose() * &oi * &zg)[0];
        let m = (&xz * &oi * &zg)[0] / n + (s.dx[i].transpose() * zi * &oi * &zv)[0] / n
            - (&xz * &oi * &zg * zg.transpose() * &oi * &zv)[0] / (n * n);
        sig += m * m;
    }
    sig /= n;
    let h = sm / (n * n) - (&xz * &oi * hsum)[0] / n.powi(3);
    let one = |v: f64| DMatrix::from_element(1, 1, v * scale);
    Expected {
        theta: DVector::from_element(1, beta),
        v_conv: one(n * n / sm),
        v_w: Some(one(sm / (n * n) / (h * h))),
        v_dc: one(sig / (h * h)),
    }
}

pub fn panel_dataset(idx: u64) -> (PanelData, gmmdc::LinearMomentSystem) {
    let streams = Streams::new(5000 + idx, 0);
    let big_n = [60usize, 100, 250][idx as usize % 3];
    if idx.is_multiple_of(2) {
        let t = [3usize, 4, 5][idx as usize / 2 % 3];
        let alpha0 = [0.0, 0.2][idx as usize / 6 % 2];
        let p = dgp_panel_lag(big_n, t, alpha0, &streams);
        let sys = build_ab_system(&p, PanelModel::Predetermined).unwrap();
        let data = PanelData {
            y: p.y,
            x: p.x.unwrap(),
        };
        (data, sys)
    } else {
        let t = [4usize, 5, 6][idx as usize / 2 % 3];
        let alpha0 = [0.0, 0.3][idx as usize / 6 % 2];
        let p = dgp_panel_rc(big_n, t, alpha0, &streams);
        let sys = build_ab_system(&p, PanelModel::Ar1).unwrap();
        // AR(1): regress y_t on y_{t-1} for t = 2..T.
        let data = PanelData {
            y: p.y.columns(1, t - 1).into_owned(),
            x: p.y.columns(0, t - 1).into_owned(),
        };
        (data, sys)
    }
}

/// Largest relative deviation between the library and the closed forms over
/// `count` IV datasets and all three estimators.
pub fn iv_max_deviation(count: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for idx in 0..count {
        let d = iv_dataset(idx);
        let sys = build_iv_system(&d.y, &d.x, &d.z).unwrap();
        let oracle = iv_oracle(&d);

        let f1 = fit(&sys, &FitPlan::one_step(WeightSpec::DataAverage)).unwrap();
        let r1 = variance_report(&sys, &f1).unwrap();
        worst = worst.max(compare("iv one-step", &f1.theta, &r1, &oracle.one));

        let f2 = fit(&sys, &FitPlan::two_step(WeightSpec::DataAverage)).unwrap();
        let r2 = variance_report(&sys, &f2).unwrap();
        worst = worst.max(compare("iv two-step", &f2.theta, &r2, &oracle.two));

        let fi = fit(&sys, &FitPlan::iterated(WeightSpec::DataAverage)).unwrap();
        assert!(fi.converged, "dataset {idx} did not converge");
        let ri = variance_report(&sys, &fi).unwrap();
        let want = iv_iterated_oracle(&d, &fi.theta);
        worst = worst.max(compare("iv iterated", &fi.theta, &ri, &want));
    }
    worst
}

/// Same as [`iv_max_deviation`] for first-differenced panels.
pub fn panel_max_deviation(count: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for idx in 0..count {
        let (data, sys) = panel_dataset(idx);
        let oracle = panel_oracle(&data);
        assert!(oracle.scale > 0.0 && oracle.scale < 1.0);

        let f1 = fit(&sys, &FitPlan::one_step(WeightSpec::DataAverage)).unwrap();
        let r1 = variance_report(&sys, &f1).unwrap();
        worst = worst.max(compare("panel one-step", &f1.theta, &r1, &oracle.one));

        let f2 = fit(&sys, &FitPlan::two_step(WeightSpec::DataAverage)).unwrap();
        let r2 = variance_report(&sys, &f2).unwrap();
        worst = worst.max(compare("panel two-step", &f2.theta, &r2, &oracle.two));

        let fi = fit(&sys, &FitPlan::iterated(WeightSpec::DataAverage)).unwrap();
        assert!(fi.converged, "dataset {idx} did not converge");
        let ri = variance_report(&sys, &fi).unwrap();
        let want = panel_iterated_oracle(&data, fi.theta[0]);
        worst = worst.max(compare("panel iterated", &fi.theta, &ri, &want));
    }
    worst
}
