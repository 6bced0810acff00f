//! Linear-in-parameter moment condition models.
//!
//! A [`LinearMomentSystem`] stores, for every observation `i`, the constant
//! `h_i = g(X_i, 0)` and the Jacobian `G_i = ∂g(X_i, θ)/∂θ'`, so that
//! `g_i(θ) = h_i + G_i θ` holds exactly. Optionally it also stores
//! per-observation weight contributions `W_i` whose average is the one-step
//! weight matrix.
//!
//! Jacobians are kept column-wise: `jacobian_column(j)` is the `n × q` matrix
//! whose row `i` is the `j`-th column of `G_i`. That layout turns sample
//! means and outer products into plain matrix products.

use nalgebra::{DMatrix, DMatrixView, DVector, RowDVector};

use crate::error::{GmmError, Result};
use crate::linalg::{spd_condition, CONDITION_LIMIT};

#[derive(Debug, Clone)]
pub struct LinearMomentSystem {
    n: usize,
    q: usize,
    k: usize,
    /// `n × q`, row `i` is `h_i'`.
    h: DMatrix<f64>,
    /// `k` matrices of shape `n × q`.
    jac_cols: Vec<DMatrix<f64>>,
    /// Column-major `q × q` blocks, one per observation.
    w_obs: Option<Vec<f64>>,
    cluster_id: Option<Vec<usize>>,
    h_mean: DVector<f64>,
    jac_mean: DMatrix<f64>,
    w_mean: Option<DMatrix<f64>>,
}

/// One-pass sample moment summaries at a parameter value.
#[derive(Debug, Clone)]
pub struct MomentStats {
    /// `g_n(θ) = n⁻¹ Σ g_i(θ)`.
    pub g_n: DVector<f64>,
    /// `G_n = n⁻¹ Σ G_i`.
    pub jac_n: DMatrix<f64>,
    /// Uncentered `Ω_n(θ) = n⁻¹ Σ g_i g_i'`.
    pub omega: DMatrix<f64>,
    /// Centered `Ωᶜ_n(θ) = n⁻¹ Σ (g_i - g_n)(g_i - g_n)'`.
    pub omega_centered: DMatrix<f64>,
}

/// How a GMM weight matrix is formed from the data.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightSpec {
    Identity,
    /// `W_n = n⁻¹ Σ W_i`; requires per-observation weights.
    DataAverage,
    /// `Ω_n(θ)`.
    EfficientUncentered(DVector<f64>),
    /// `Ωᶜ_n(θ)`.
    EfficientCentered(DVector<f64>),
}

impl WeightSpec {
    pub fn efficient(theta: DVector<f64>, centered: bool) -> Self {
        if centered {
            WeightSpec::EfficientCentered(theta)
        } else {
            WeightSpec::EfficientUncentered(theta)
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            WeightSpec::Identity => "identity",
            WeightSpec::DataAverage => "data-average",
            WeightSpec::EfficientUncentered(_) => "efficient",
            WeightSpec::EfficientCentered(_) => "efficient-centered",
        }
    }
}

fn sym_tol_ok(block: &DMatrixView<'_, f64>) -> bool {
    let scale = block.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    let q = block.nrows();
    for r in 0..q {
        for c in (r + 1)..q {
            if (block[(r, c)] - block[(c, r)]).abs() > 1e-12 * scale {
                return false;
            }
        }
    }
    true
}

impl LinearMomentSystem {
    /// Assemble a system from per-observation pieces.
    ///
    /// `h` is `n × q`; `jacobians[i]` is `G_i` (`q × k`); `obs_weights[i]`, if
    /// given, is the symmetric `W_i` (`q × q`).
    pub fn new(
        h: DMatrix<f64>,
        jacobians: &[DMatrix<f64>],
        obs_weights: Option<&[DMatrix<f64>]>,
        cluster_id: Option<Vec<usize>>,
    ) -> Result<Self> {
        let (n, q) = h.shape();
        if jacobians.len() != n {
            return Err(GmmError::DimensionMismatch(format!(
                "{} Jacobians for {} observations",
                jacobians.len(),
                n
            )));
        }
        let k = jacobians.first().map(|g| g.ncols()).unwrap_or(0);
        let mut jac_cols = vec![DMatrix::zeros(n, q); k];
        for (i, g) in jacobians.iter().enumerate() {
            if g.shape() != (q, k) {
                return Err(GmmError::DimensionMismatch(format!(
                    "Jacobian {} is {}x{}, expected {}x{}",
                    i,
                    g.nrows(),
                    g.ncols(),
                    q,
                    k
                )));
            }
            for (j, col) in jac_cols.iter_mut().enumerate() {
                for r in 0..q {
                    col[(i, r)] = g[(r, j)];
                }
            }
        }
        let w_obs = match obs_weights {
            None => None,
            Some(ws) => {
                if ws.len() != n {
                    return Err(GmmError::DimensionMismatch(format!(
                        "{} weight blocks for {} observations",
                        ws.len(),
                        n
                    )));
                }
                let mut flat = Vec::with_capacity(n * q * q);
                for (i, w) in ws.iter().enumerate() {
                    if w.shape() != (q, q) {
                        return Err(GmmError::DimensionMismatch(format!(
                            "weight block {} is {}x{}, expected {}x{}",
                            i,
                            w.nrows(),
                            w.ncols(),
                            q,
                            q
                        )));
                    }
                    flat.extend_from_slice(w.as_slice());
                }
                Some(flat)
            }
        };
        Self::from_columns(h, jac_cols, w_obs, cluster_id)
    }

    /// Assemble from the column-wise Jacobian layout directly.
    pub fn from_columns(
        h: DMatrix<f64>,
        jac_cols: Vec<DMatrix<f64>>,
        w_obs: Option<Vec<f64>>,
        cluster_id: Option<Vec<usize>>,
    ) -> Result<Self> {
        let (n, q) = h.shape();
        let k = jac_cols.len();
        if k == 0 || q < k {
            return Err(GmmError::DimensionMismatch(format!(
                "need q >= k >= 1, got q = {q}, k = {k}"
            )));
        }
        if n < q {
            return Err(GmmError::DimensionMismatch(format!(
                "need at least q = {q} observations, got {n}"
            )));
        }
        if jac_cols.iter().any(|c| c.shape() != (n, q)) {
            return Err(GmmError::DimensionMismatch(
                "Jacobian column blocks must all be n x q".into(),
            ));
        }
        if let Some(ids) = &cluster_id {
            if ids.len() != n {
                return Err(GmmError::DimensionMismatch(format!(
                    "{} cluster labels for {} observations",
                    ids.len(),
                    n
                )));
            }
        }
        if let Some(w) = &w_obs {
            if w.len() != n * q * q {
                return Err(GmmError::DimensionMismatch(
                    "weight blocks must hold n * q * q entries".into(),
                ));
            }
            for i in 0..n {
                let block = DMatrixView::from_slice(&w[i * q * q..(i + 1) * q * q], q, q);
                if !sym_tol_ok(&block) {
                    return Err(GmmError::InvalidInput(format!(
                        "weight block {i} is not symmetric"
                    )));
                }
            }
        }
        if h.iter()
            .chain(jac_cols.iter().flat_map(|c| c.iter()))
            .any(|v| !v.is_finite())
        {
            return Err(GmmError::InvalidInput("non-finite moment data".into()));
        }

        let inv_n = 1.0 / n as f64;
        let h_mean = h.row_mean().transpose();
        let mut jac_mean = DMatrix::zeros(q, k);
        for (j, col) in jac_cols.iter().enumerate() {
            jac_mean.set_column(j, &col.row_mean().transpose());
        }
        let w_mean = w_obs.as_ref().map(|w| {
            let mut acc = DMatrix::zeros(q, q);
            for i in 0..n {
                acc += DMatrixView::from_slice(&w[i * q * q..(i + 1) * q * q], q, q);
            }
            acc * inv_n
        });
        Ok(Self {
            n,
            q,
            k,
            h,
            jac_cols,
            w_obs,
            cluster_id,
            h_mean,
            jac_mean,
            w_mean,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn is_just_identified(&self) -> bool {
        self.q == self.k
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn jacobian_column(&self, j: usize) -> &DMatrix<f64> {
        &self.jac_cols[j]
    }

    /// `G_i` as a dense `q × k` matrix.
    pub fn jacobian(&self, i: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.q, self.k, |r, j| self.jac_cols[j][(i, r)])
    }

    pub fn has_obs_weights(&self) -> bool {
        self.w_obs.is_some()
    }

    pub fn obs_weight(&self, i: usize) -> Option<DMatrixView<'_, f64>> {
        let qq = self.q * self.q;
        self.w_obs
            .as_ref()
            .map(|w| DMatrixView::from_slice(&w[i * qq..(i + 1) * qq], self.q, self.q))
    }

    pub fn cluster_id(&self) -> Option<&[usize]> {
        self.cluster_id.as_deref()
    }

    /// `h_n = n⁻¹ Σ h_i`.
    pub fn h_mean(&self) -> &DVector<f64> {
        &self.h_mean
    }

    /// `G_n = n⁻¹ Σ G_i`.
    pub fn jacobian_mean(&self) -> &DMatrix<f64> {
        &self.jac_mean
    }

    /// `W_n = n⁻¹ Σ W_i` when per-observation weights are present.
    pub fn data_weight(&self) -> Option<&DMatrix<f64>> {
        self.w_mean.as_ref()
    }

    fn check_theta(&self, theta: &DVector<f64>) -> Result<()> {
        if theta.len() != self.k {
            return Err(GmmError::DimensionMismatch(format!(
                "parameter has length {}, expected {}",
                theta.len(),
                self.k
            )));
        }
        Ok(())
    }

    /// `n × q` matrix whose row `i` is `g_i(θ)'`.
    pub fn moments(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_theta(theta)?;
        let mut m = self.h.clone();
        for (j, col) in self.jac_cols.iter().enumerate() {
            m += col * theta[j];
        }
        Ok(m)
    }

    /// `g_i(θ)` for a single observation.
    pub fn moment(&self, i: usize, theta: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_theta(theta)?;
        let mut g = self.h.row(i).transpose();
        for (j, col) in self.jac_cols.iter().enumerate() {
            g.axpy(theta[j], &col.row(i).transpose(), 1.0);
        }
        Ok(g)
    }

    /// `g_n(θ) = h_n + G_n θ`.
    pub fn moment_mean(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_theta(theta)?;
        Ok(&self.h_mean + &self.jac_mean * theta)
    }

    /// Sample moment summaries at `θ`.
    pub fn moment_stats(&self, theta: &DVector<f64>) -> Result<MomentStats> {
        let m = self.moments(theta)?;
        let inv_n = 1.0 / self.n as f64;
        let g_n = m.row_mean().transpose();
        let omega = m.tr_mul(&m) * inv_n;
        let omega_centered = &omega - &g_n * g_n.transpose();
        Ok(MomentStats {
            g_n,
            jac_n: self.jac_mean.clone(),
            omega,
            omega_centered,
        })
    }

    /// `Ω_n(θ)`, or `Ωᶜ_n(θ)` when `centered`.
    pub fn omega(&self, theta: &DVector<f64>, centered: bool) -> Result<DMatrix<f64>> {
        let m = self.moments(theta)?;
        let inv_n = 1.0 / self.n as f64;
        let mut omega = m.tr_mul(&m) * inv_n;
        if centered {
            let g_n = m.row_mean().transpose();
            omega -= &g_n * g_n.transpose();
        }
        Ok(omega)
    }

    /// `∂Ω_n(θ)/∂θ_j = Υ_j(θ) + Υ_j(θ)'` (zero-based `j`), with the centered
    /// `Υᶜ_j` when `centered`.
    pub fn omega_derivative(
        &self,
        theta: &DVector<f64>,
        j: usize,
        centered: bool,
    ) -> Result<DMatrix<f64>> {
        if j >= self.k {
            return Err(GmmError::IndexOutOfRange {
                index: j,
                len: self.k,
            });
        }
        let m = self.moments(theta)?;
        Ok(self.omega_derivative_from_moments(&m, j, centered))
    }

    pub(crate) fn omega_derivative_from_moments(
        &self,
        m: &DMatrix<f64>,
        j: usize,
        centered: bool,
    ) -> DMatrix<f64> {
        let inv_n = 1.0 / self.n as f64;
        let dj = &self.jac_cols[j];
        let mut upsilon = m.tr_mul(dj) * inv_n;
        if centered {
            let g_n = m.row_mean().transpose();
            let dg_n = self.jac_mean.column(j);
            upsilon -= &g_n * dg_n.transpose();
        }
        &upsilon + upsilon.transpose()
    }

    /// The weight matrix a [`WeightSpec`] evaluates to on this sample.
    pub fn weight_matrix(&self, spec: &WeightSpec) -> Result<DMatrix<f64>> {
        match spec {
            WeightSpec::Identity => Ok(DMatrix::identity(self.q, self.q)),
            WeightSpec::DataAverage => self.w_mean.clone().ok_or_else(|| {
                GmmError::InvalidInput(
                    "data-average weight requires per-observation weight blocks".into(),
                )
            }),
            WeightSpec::EfficientUncentered(theta) => self.omega(theta, false),
            WeightSpec::EfficientCentered(theta) => self.omega(theta, true),
        }
    }

    /// Resampling units: observation indices grouped by cluster label, in
    /// order of first appearance. Without labels every observation is a unit.
    pub fn units(&self) -> Vec<Vec<usize>> {
        match &self.cluster_id {
            None => (0..self.n).map(|i| vec![i]).collect(),
            Some(ids) => {
                let mut order: Vec<usize> = Vec::new();
                let mut groups: std::collections::HashMap<usize, Vec<usize>> =
                    std::collections::HashMap::new();
                for (i, &id) in ids.iter().enumerate() {
                    groups
                        .entry(id)
                        .or_insert_with(|| {
                            order.push(id);
                            Vec::new()
                        })
                        .push(i);
                }
                order
                    .into_iter()
                    .map(|id| groups.remove(&id).unwrap_or_default())
                    .collect()
            }
        }
    }

    /// New system made of the listed observations (repeats allowed). Cluster
    /// labels are renumbered by draw so repeated clusters stay distinct.
    pub fn select(&self, rows: &[usize], labels: Option<Vec<usize>>) -> Result<Self> {
        let h = self.h.select_rows(rows.iter());
        let jac_cols = self
            .jac_cols
            .iter()
            .map(|c| c.select_rows(rows.iter()))
            .collect();
        let qq = self.q * self.q;
        let w_obs = self.w_obs.as_ref().map(|w| {
            let mut out = Vec::with_capacity(rows.len() * qq);
            for &r in rows {
                out.extend_from_slice(&w[r * qq..(r + 1) * qq]);
            }
            out
        });
        Self::from_columns(h, jac_cols, w_obs, labels)
    }

    /// The same system with every moment function multiplied by `c`
    /// (`W_i` scaled by `c²` so the data-average weight scales consistently).
    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::from_columns(
            &self.h * c,
            self.jac_cols.iter().map(|m| m * c).collect(),
            self.w_obs
                .as_ref()
                .map(|w| w.iter().map(|v| v * c * c).collect()),
            self.cluster_id.clone(),
        )
    }
}

/// Cross-sectional IV moments `g_i(θ) = Z_i (y_i - X_i'θ)`.
///
/// `x` is `n × k`, `z` is `n × q`. Per-observation weights are `Z_i Z_i'`, so
/// the data-average weight is `Z'Z/n` and one-step GMM is 2SLS.
pub fn build_iv_system(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    z: &DMatrix<f64>,
) -> Result<LinearMomentSystem> {
    let n = y.len();
    if x.nrows() != n || z.nrows() != n {
        return Err(GmmError::DimensionMismatch(format!(
            "y has {} rows, X has {}, Z has {}",
            n,
            x.nrows(),
            z.nrows()
        )));
    }
    let (k, q) = (x.ncols(), z.ncols());
    if k == 0 || q < k {
        return Err(GmmError::DimensionMismatch(format!(
            "need at least as many instruments as regressors (q = {q}, k = {k})"
        )));
    }
    let ztz = z.tr_mul(z);
    let condition = spd_condition(&ztz);
    if condition > CONDITION_LIMIT {
        return Err(GmmError::RankDeficient {
            what: "Z'Z".into(),
            condition,
        });
    }

    let mut h = z.clone();
    for (i, yi) in y.iter().enumerate() {
        h.row_mut(i).scale_mut(*yi);
    }
    let jac_cols = (0..k)
        .map(|j| {
            let mut c = z.clone();
            for i in 0..n {
                c.row_mut(i).scale_mut(-x[(i, j)]);
            }
            c
        })
        .collect();
    let mut w = Vec::with_capacity(n * q * q);
    for i in 0..n {
        let zi: RowDVector<f64> = z.row(i).into_owned();
        let outer = zi.transpose() * &zi;
        w.extend_from_slice(outer.as_slice());
    }
    LinearMomentSystem::from_columns(h, jac_cols, Some(w), None)
}

/// How a balanced panel maps onto first-differenced moment conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PanelModel {
    /// `y_it = β x_it + η_i + v_it` with `x` predetermined: the equation for
    /// period `t` is instrumented by `x_i1, …, x_{i,t-1}`.
    Predetermined,
    /// `y_it = ρ y_{i,t-1} + η_i + ν_it`: the equation for period `t ≥ 3` is
    /// instrumented by `y_i1, …, y_{i,t-2}`.
    Ar1,
}

/// Balanced panel, `N` individuals by `T` periods.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    pub y: DMatrix<f64>,
    /// Scalar regressor; unused for [`PanelModel::Ar1`].
    pub x: Option<DMatrix<f64>>,
}

impl PanelDataset {
    pub fn new(y: DMatrix<f64>, x: Option<DMatrix<f64>>) -> Result<Self> {
        if let Some(x) = &x {
            if x.shape() != y.shape() {
                return Err(GmmError::DimensionMismatch(format!(
                    "y is {}x{} but x is {}x{}",
                    y.nrows(),
                    y.ncols(),
                    x.nrows(),
                    x.ncols()
                )));
            }
        }
        Ok(Self { y, x })
    }

    /// Build from long-format records `(id, time, y, x)` in any order.
    /// Every individual must be observed at the same set of periods.
    pub fn from_long(records: &[(i64, i64, f64, f64)]) -> Result<Self> {
        use std::collections::{BTreeMap, BTreeSet};
        let mut times = BTreeSet::new();
        let mut cells: BTreeMap<i64, BTreeMap<i64, (f64, f64)>> = BTreeMap::new();
        for &(id, t, y, x) in records {
            times.insert(t);
            if cells.entry(id).or_default().insert(t, (y, x)).is_some() {
                return Err(GmmError::InvalidInput(format!(
                    "duplicate record for id {id}, time {t}"
                )));
            }
        }
        let times: Vec<i64> = times.into_iter().collect();
        let n = cells.len();
        let t = times.len();
        let mut y = DMatrix::zeros(n, t);
        let mut x = DMatrix::zeros(n, t);
        for (i, (id, row)) in cells.iter().enumerate() {
            if row.len() != t {
                return Err(GmmError::UnbalancedPanel(format!(
                    "id {id} has {} of {} periods",
                    row.len(),
                    t
                )));
            }
            for (c, tt) in times.iter().enumerate() {
                let (yv, xv) = row[tt];
                y[(i, c)] = yv;
                x[(i, c)] = xv;
            }
        }
        Self::new(y, Some(x))
    }

    pub fn individuals(&self) -> usize {
        self.y.nrows()
    }

    pub fn periods(&self) -> usize {
        self.y.ncols()
    }
}

/// `H`: 2 on the diagonal, -1 on the first off-diagonals.
pub fn difference_weight(m: usize) -> DMatrix<f64> {
    DMatrix::from_fn(m, m, |r, c| {
        if r == c {
            2.0
        } else if r.abs_diff(c) == 1 {
            -1.0
        } else {
            0.0
        }
    })
}

/// Arellano–Bond first-differenced moment system, one moment block per
/// individual.
///
/// For [`PanelModel::Predetermined`] the number of moments is `T(T-1)/2`; for
/// [`PanelModel::Ar1`] it is `(T-1)(T-2)/2`. Per-observation weights are
/// `Z_i' H Z_i`, and every row carries its individual's index as cluster
/// label.
pub fn build_ab_system(panel: &PanelDataset, model: PanelModel) -> Result<LinearMomentSystem> {
    let periods = panel.periods();
    let (y, x) = match model {
        PanelModel::Predetermined => {
            if periods < 2 {
                return Err(GmmError::PanelTooShort { periods, min: 2 });
            }
            let x = panel.x.clone().ok_or_else(|| {
                GmmError::InvalidInput("predetermined-regressor panel needs x".into())
            })?;
            (panel.y.clone(), x)
        }
        PanelModel::Ar1 => {
            if periods < 3 {
                return Err(GmmError::PanelTooShort { periods, min: 3 });
            }
            // x_it := y_{i,t-1}; periods 2..T become the working panel.
            let y = panel.y.columns(1, periods - 1).into_owned();
            let x = panel.y.columns(0, periods - 1).into_owned();
            (y, x)
        }
    };
    difference_system(&y, &x)
}

fn difference_system(y: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<LinearMomentSystem> {
    if y.iter().chain(x.iter()).any(|v| !v.is_finite()) {
        return Err(GmmError::InvalidInput(
            "panel contains missing or non-finite cells".into(),
        ));
    }
    let (n, t) = y.shape();
    let eqs = t - 1;
    let q = t * (t - 1) / 2;
    let hmat = difference_weight(eqs);

    let mut h = DMatrix::zeros(n, q);
    let mut jac = DMatrix::zeros(n, q);
    let mut w = Vec::with_capacity(n * q * q);
    for i in 0..n {
        // Row e of Z_i instruments the equation for period e+1 (zero-based).
        let mut zi = DMatrix::zeros(eqs, q);
        for e in 0..eqs {
            let p = e + 1;
            let offset = p * (p - 1) / 2;
            let dy = y[(i, p)] - y[(i, p - 1)];
            let dx = x[(i, p)] - x[(i, p - 1)];
            for s in 0..p {
                zi[(e, offset + s)] = x[(i, s)];
                h[(i, offset + s)] = x[(i, s)] * dy;
                jac[(i, offset + s)] = -x[(i, s)] * dx;
            }
        }
        let wi = zi.tr_mul(&(&hmat * &zi));
        w.extend_from_slice(wi.as_slice());
    }
    LinearMomentSystem::from_columns(h, vec![jac], Some(w), Some((0..n).collect()))
}
