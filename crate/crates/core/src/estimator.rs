//! Moving-window least-squares fault estimation and its error analysis.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter_design::GeneratorSet;
use crate::linalg;
use crate::ltisim::{self, ScenarioResult};
use crate::model::DaeModel;
use crate::polymat::PolyMatrix;

/// Relative rank tolerance for estimation windows.
pub const TOL_WINDOW_RANK: f64 = 1e-8;
/// The first-order analysis is flagged as trustworthy below this SNR metric.
pub const SNR_VALIDITY: f64 = 0.3;

/// `N` chronologically ordered samples of regressors and residual.
#[derive(Clone, Debug)]
pub struct EstimationWindow {
    pub e: DMatrix<f64>,
    pub r: DVector<f64>,
    pub h: f64,
}

impl EstimationWindow {
    pub fn new(e: DMatrix<f64>, r: DVector<f64>, h: f64) -> Result<Self> {
        if e.nrows() != r.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} regressor rows for {} residual samples",
                e.nrows(),
                r.len()
            )));
        }
        Ok(EstimationWindow { e, r, h })
    }

    /// Rows `end + 1 - n ..= end` of a sampled run.
    pub fn slice(e: &DMatrix<f64>, r: &DVector<f64>, end: usize, n: usize, h: f64) -> Result<Self> {
        if n == 0 || end + 1 < n || end >= e.nrows() {
            return Err(Error::DimensionMismatch(format!("window of {n} ending at {end}")));
        }
        let start = end + 1 - n;
        Self::new(e.rows(start, n).into_owned(), r.rows(start, n).into_owned(), h)
    }

    pub fn len(&self) -> usize {
        self.e.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Minimum-norm least squares through the SVD.
pub fn ls_estimate(w: &EstimationWindow) -> Result<DVector<f64>> {
    let m = w.e.ncols();
    let svd = w.e.clone().svd(true, true);
    let s = &svd.singular_values;
    let s1 = s.iter().copied().fold(0.0, f64::max);
    let sm = s.iter().copied().fold(f64::INFINITY, f64::min);
    if w.len() < m || s1 == 0.0 || sm <= TOL_WINDOW_RANK * s1 {
        let sm = if w.len() < m { 0.0 } else { sm.min(s1) };
        return Err(Error::RankDeficientWindow {
            s_min: sm,
            effective: sm / (w.len().max(1) as f64).sqrt(),
        });
    }
    svd.solve(&w.r, TOL_WINDOW_RANK * s1)
        .map_err(|e| Error::DimensionMismatch(e.to_string()))
}

/// Singular values of `E` in descending order.
pub fn singular_values(e: &DMatrix<f64>) -> Vec<f64> {
    linalg::singular_values(e)
}

/// `s_m(E) / sqrt(N)`.
pub fn effective_singular_value(w: &EstimationWindow) -> f64 {
    if w.is_empty() || w.e.ncols() == 0 {
        return 0.0;
    }
    let s = singular_values(&w.e);
    let sm = if w.len() < w.e.ncols() {
        0.0
    } else {
        *s.last().unwrap_or(&0.0)
    };
    sm / (w.len() as f64).sqrt()
}

/// Estimates over a run; rows before the first full window and rank
/// deficient windows are `None`.
#[derive(Clone, Debug)]
pub struct EstimateTrajectory {
    pub t: Vec<f64>,
    pub f_hat: Vec<Option<DVector<f64>>>,
    pub effective_sv: Vec<f64>,
}

impl EstimateTrajectory {
    /// Last available estimate.
    pub fn last(&self) -> Option<&DVector<f64>> {
        self.f_hat.iter().rev().flatten().next()
    }

    /// Euclidean error norm per sample (`NaN` where there is no estimate)
    /// against the fault samples `f` (one row per sample).
    pub fn error_norms(&self, f: &DMatrix<f64>) -> Vec<f64> {
        self.f_hat
            .iter()
            .enumerate()
            .map(|(k, v)| match v {
                Some(v) => (v - f.row(k).transpose()).norm(),
                None => f64::NAN,
            })
            .collect()
    }

    pub fn write_csv(&self, path: &std::path::Path, m: usize) -> Result<()> {
        let mut header = vec!["t".to_string()];
        header.extend((0..m).map(|i| format!("f_hat{}", i + 1)));
        header.push("effective_sv".into());
        let rows: Vec<Vec<f64>> = (0..self.t.len())
            .map(|k| {
                let mut row = vec![self.t[k]];
                match &self.f_hat[k] {
                    Some(v) => row.extend(v.iter()),
                    None => row.extend(std::iter::repeat_n(f64::NAN, m)),
                }
                row.push(self.effective_sv[k]);
                row
            })
            .collect();
        crate::io::write_csv(path, &header, &rows)
    }
}

/// Sliding-window estimation with window `n` and stride `stride` samples.
pub fn run_estimator_on(
    t: &[f64],
    e: &DMatrix<f64>,
    r: &DVector<f64>,
    n: usize,
    stride: usize,
    h: f64,
) -> EstimateTrajectory {
    let nt = t.len();
    let mut f_hat = vec![None; nt];
    let mut sv = vec![f64::NAN; nt];
    let stride = stride.max(1);
    if n > 0 {
        let mut end = n - 1;
        while end < nt {
            if let Ok(w) = EstimationWindow::slice(e, r, end, n, h) {
                sv[end] = effective_singular_value(&w);
                f_hat[end] = ls_estimate(&w).ok();
            }
            end += stride;
        }
    }
    EstimateTrajectory {
        t: t.to_vec(),
        f_hat,
        effective_sv: sv,
    }
}

pub fn run_estimator(res: &ScenarioResult, n: usize, h: f64) -> EstimateTrajectory {
    run_estimator_on(&res.t, &res.e, &res.r, n, 1, h)
}

/// First-order approximation `f_check - f` of the estimation error, for
/// noisy data `E + E_w`, `E f + R_NL + R_w`.
///
/// The noise-linear terms enter with a plus sign under this convention;
/// flipping the sign of the perturbation (`E - E_w`) flips them, which
/// leaves every second-moment statistic unchanged.
pub fn first_order_error(
    e: &DMatrix<f64>,
    e_w: &DMatrix<f64>,
    r_w: &DVector<f64>,
    r_nl: &DVector<f64>,
    f: &DVector<f64>,
) -> Result<DVector<f64>> {
    let (n, m) = e.shape();
    if e_w.shape() != (n, m) || r_w.len() != n || r_nl.len() != n || f.len() != m {
        return Err(Error::DimensionMismatch("first-order error operands".into()));
    }
    let s = singular_values(e);
    let (s1, sm) = (s.first().copied().unwrap_or(0.0), s.last().copied().unwrap_or(0.0));
    if n < m || s1 == 0.0 || sm <= TOL_WINDOW_RANK * s1 {
        return Err(Error::RankDeficientWindow {
            s_min: sm,
            effective: sm / (n.max(1) as f64).sqrt(),
        });
    }
    let ete_inv = (e.transpose() * e).try_inverse().ok_or(Error::RankDeficientWindow {
        s_min: sm,
        effective: sm / (n as f64).sqrt(),
    })?;
    let pinv = &ete_inv * e.transpose();
    let pinv_rnl = &pinv * r_nl;
    let perp_rnl = r_nl - e * &pinv_rnl;
    let lin = &pinv * (r_w - e_w * f);
    let second = &ete_inv * (e_w.transpose() * perp_rnl) - &pinv * (e_w * &pinv_rnl);
    Ok(pinv_rnl + lin + second)
}

/// Quantities entering the bias, variance and SNR bounds.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundInputs {
    /// Largest peak-to-peak gain over the second-order channels.
    pub a: f64,
    pub eta_f: f64,
    pub eta_w: f64,
    pub gamma_f: f64,
    pub sigma: f64,
    /// Singular values of `E`, descending.
    pub s: Vec<f64>,
    pub signal_peak: f64,
    pub f_norm: f64,
    pub n: usize,
    pub m: usize,
}

impl BoundInputs {
    pub fn eta(&self) -> f64 {
        self.eta_f.hypot(self.eta_w)
    }

    fn s_m(&self) -> f64 {
        self.s.last().copied().unwrap_or(0.0)
    }

    fn sum_inv_sq(&self) -> f64 {
        self.s.iter().map(|s| s.powi(-2)).sum()
    }
}

/// `B = A sqrt(N m) |f|^2 s_m^{-1} peak`.
pub fn bias_bound(b: &BoundInputs) -> f64 {
    if b.f_norm == 0.0 {
        return 0.0;
    }
    b.a * ((b.n * b.m) as f64).sqrt() * b.f_norm.powi(2) / b.s_m() * b.signal_peak
}

/// `A m sqrt(N) |f|^2 s_m^{-1} peak`, the variant linear in `m`; it exceeds
/// [`bias_bound`] whenever `m > 1`.
pub fn bias_bound_proof_form(b: &BoundInputs) -> f64 {
    if b.f_norm == 0.0 {
        return 0.0;
    }
    b.a * b.m as f64 * (b.n as f64).sqrt() * b.f_norm.powi(2) / b.s_m() * b.signal_peak
}

/// Bound on the trace of the covariance of the first-order estimate.
pub fn variance_bound(b: &BoundInputs, big_b: f64) -> f64 {
    if b.sigma == 0.0 {
        return 0.0;
    }
    let si = b.sum_inv_sq();
    b.sigma.powi(2)
        * (2.0 * (b.f_norm.powi(2) + 1.0) * b.eta().powi(2) * si
            + big_b.powi(2) * b.eta_f.powi(2) * (2.0 * si + b.s_m().powi(-2)))
}

/// Mean-square bound when no fault multiplies unknown signals.
pub fn variance_bound_known_signals(b: &BoundInputs) -> f64 {
    (b.f_norm.powi(2) + 1.0) * b.eta().powi(2) * b.sigma.powi(2) * b.sum_inv_sq()
}

/// `c = sqrt(2N) s_m^{-1} sigma gamma_F`.
pub fn snr_metric(b: &BoundInputs) -> f64 {
    if b.sigma == 0.0 {
        return 0.0;
    }
    (2.0 * b.n as f64).sqrt() / b.s_m() * b.sigma * b.gamma_f
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundReport {
    pub bias_bound: f64,
    pub bias_bound_proof_form: f64,
    pub variance_bound: f64,
    pub snr: f64,
    pub snr_valid: bool,
    pub effective_sv: f64,
}

pub fn bound_report(b: &BoundInputs) -> BoundReport {
    let big_b = bias_bound(b);
    let snr = snr_metric(b);
    BoundReport {
        bias_bound: big_b,
        bias_bound_proof_form: bias_bound_proof_form(b),
        variance_bound: variance_bound(b, big_b),
        snr,
        snr_valid: snr < SNR_VALIDITY,
        effective_sv: b.s_m() / (b.n.max(1) as f64).sqrt(),
    }
}

/// System norms of the sampled error channels.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NoiseNorms {
    /// `max_ij` peak-to-peak gain of the sampled `d^{-1} J_ij`.
    pub a: f64,
    /// H-infinity-F and H2 norms of the sampled `d^{-1} F` stack.
    pub eta_f: f64,
    pub gamma_f: f64,
    /// H-infinity-F norm of the sampled `-d^{-1} N W`.
    pub eta_w: f64,
}

/// Computes the norms feeding [`BoundInputs`] at sample interval `h`.
pub fn noise_norms(model: &DaeModel, gen: &GeneratorSet, h: f64) -> Result<NoiseNorms> {
    let d = gen.denominator()?;
    let td = model.time_domain;
    let disc = |p: &PolyMatrix| -> Result<ltisim::StateSpace> { ltisim::sampled(&ltisim::realize(d, p, td, None)?, h) };
    let mut a: f64 = 0.0;
    for row in &gen.j {
        for jik in row {
            a = a.max(ltisim::peak_to_peak_bound(&disc(jik)?)?);
        }
    }
    let f_rows: Vec<Vec<&PolyMatrix>> = gen.f.iter().map(|f| vec![f]).collect();
    let f_stack = disc(&PolyMatrix::block(&f_rows)?)?;
    let tw = disc(&gen.noise_numerator(model)?)?;
    Ok(NoiseNorms {
        a,
        eta_f: ltisim::hinf_f_norm(&f_stack)?,
        gamma_f: ltisim::h2_norm(&f_stack)?,
        eta_w: ltisim::hinf_f_norm(&tw)?,
    })
}

/// Estimate JSON summary.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EstimateSummary {
    pub final_estimate: Option<Vec<f64>>,
    pub final_relative_error: Option<f64>,
    pub bias_bound: Option<f64>,
    pub bias_bound_proof_form: Option<f64>,
    pub variance_bound: Option<f64>,
    pub snr: Option<f64>,
    pub effective_sv_series: Vec<f64>,
}
