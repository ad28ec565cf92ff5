//! E-optimal periodic input design.
//!
//! For an `N`-periodic input `u_bar` (time-major, `N * n_u` entries) the
//! steady-state regressor over one period is `e_i = P'_i u_bar`, and the
//! design maximizes `J = lambda_min(sum_i P'_i u_bar u_bar' P'_i')`.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter_design::GeneratorSet;
use crate::linalg;
use crate::ltisim::{self, StateSpace};
use crate::model::{DaeModel, TimeDomain};

/// Hankel singular values below this fraction of the largest are dropped.
pub const MINREAL_TOL: f64 = 1e-10;
pub const DYKSTRA_SWEEPS: usize = 500;
pub const DYKSTRA_TOL: f64 = 1e-10;
/// Relative threshold on the eigenvalues of the lifted SDP variable.
pub const SDP_RANK_TOL: f64 = 1e-6;

/// Closed convex input sets containing the origin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConstraintSet {
    /// Componentwise bounds. Vectors of length `n_u` apply per channel at
    /// every sample; otherwise they must cover every component.
    Box {
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
    /// `sum_k u_c(k)^2 <= energy[c]` for each channel `c`.
    ChannelEnergy {
        energy: Vec<f64>,
    },
    /// `|u_bar|^2 <= energy`.
    TotalEnergy {
        energy: f64,
    },
    /// `u_bar' S_j u_bar <= 1` with each `S_j` positive semidefinite.
    QuadraticList {
        #[serde(with = "matrix_list")]
        matrices: Vec<DMatrix<f64>>,
    },
    Intersection {
        sets: Vec<ConstraintSet>,
    },
}

mod matrix_list {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &[DMatrix<f64>], s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<Vec<f64>>> = m.iter().map(crate::io::to_rows).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<DMatrix<f64>>, D::Error> {
        let rows = Vec::<Vec<Vec<f64>>>::deserialize(d)?;
        rows.iter()
            .map(|r| crate::io::from_rows(r, None, "quadratic constraint").map_err(serde::de::Error::custom))
            .collect()
    }
}

impl ConstraintSet {
    fn check(&self, dim: usize, n_u: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        match self {
            ConstraintSet::Box { lo, hi } => {
                if lo.len() != hi.len() || (lo.len() != n_u && lo.len() != dim) {
                    return bad(format!("box bounds need {n_u} or {dim} entries"));
                }
                if lo.iter().zip(hi).any(|(l, h)| !(*l <= 0.0 && *h >= 0.0)) {
                    return bad("box must contain the origin".into());
                }
            }
            ConstraintSet::ChannelEnergy { energy } => {
                if energy.len() != n_u || energy.iter().any(|e| *e < 0.0) {
                    return bad(format!("channel energy needs {n_u} non-negative entries"));
                }
            }
            ConstraintSet::TotalEnergy { energy } => {
                if *energy < 0.0 {
                    return bad("energy must be non-negative".into());
                }
            }
            ConstraintSet::QuadraticList { matrices } => {
                for s in matrices {
                    if s.shape() != (dim, dim) {
                        return bad(format!("quadratic constraint must be {dim}x{dim}"));
                    }
                    let sym = (s + s.transpose()) * 0.5;
                    if sym.symmetric_eigenvalues().min() < -1e-10 * sym.norm().max(1.0) {
                        return bad("quadratic constraint is not positive semidefinite".into());
                    }
                }
            }
            ConstraintSet::Intersection { sets } => {
                for s in sets {
                    s.check(dim, n_u)?;
                }
            }
        }
        Ok(())
    }

    /// Whether `v` lies in the set up to `tol`.
    pub fn contains(&self, v: &DVector<f64>, n_u: usize, tol: f64) -> bool {
        match self {
            ConstraintSet::Box { lo, hi } => v.iter().enumerate().all(|(i, x)| {
                let j = if lo.len() == v.len() { i } else { i % n_u };
                *x >= lo[j] - tol && *x <= hi[j] + tol
            }),
            ConstraintSet::ChannelEnergy { energy } => (0..n_u).all(|c| {
                let e: f64 = v.iter().skip(c).step_by(n_u).map(|x| x * x).sum();
                e <= energy[c] + tol
            }),
            ConstraintSet::TotalEnergy { energy } => v.norm_squared() <= energy + tol,
            ConstraintSet::QuadraticList { matrices } => matrices.iter().all(|s| v.dot(&(s * v)) <= 1.0 + tol),
            ConstraintSet::Intersection { sets } => sets.iter().all(|s| s.contains(v, n_u, tol)),
        }
    }

    /// The set as a list of `u' S u <= 1` constraints.
    pub fn to_quadratics(&self, dim: usize, n_u: usize) -> Result<Vec<DMatrix<f64>>> {
        match self {
            ConstraintSet::Box { lo, hi } => {
                let mut out = Vec::with_capacity(dim);
                for i in 0..dim {
                    let j = if lo.len() == dim { i } else { i % n_u };
                    if (lo[j] + hi[j]).abs() > 1e-12 * hi[j].abs().max(1.0) || hi[j] <= 0.0 {
                        return Err(Error::ConversionUnsupported(
                            "only symmetric boxes with positive half-width convert".into(),
                        ));
                    }
                    let mut s = DMatrix::zeros(dim, dim);
                    s[(i, i)] = 1.0 / (hi[j] * hi[j]);
                    out.push(s);
                }
                Ok(out)
            }
            ConstraintSet::ChannelEnergy { energy } => energy
                .iter()
                .enumerate()
                .map(|(c, e)| {
                    if *e <= 0.0 {
                        return Err(Error::ConversionUnsupported("zero channel energy".into()));
                    }
                    let mut s = DMatrix::zeros(dim, dim);
                    for i in (c..dim).step_by(n_u) {
                        s[(i, i)] = 1.0 / e;
                    }
                    Ok(s)
                })
                .collect(),
            ConstraintSet::TotalEnergy { energy } => {
                if *energy <= 0.0 {
                    return Err(Error::ConversionUnsupported("zero energy".into()));
                }
                Ok(vec![DMatrix::identity(dim, dim) / *energy])
            }
            ConstraintSet::QuadraticList { matrices } => Ok(matrices.clone()),
            ConstraintSet::Intersection { sets } => {
                let mut out = Vec::new();
                for s in sets {
                    out.extend(s.to_quadratics(dim, n_u)?);
                }
                Ok(out)
            }
        }
    }
}

/// Projection onto `{x : x' S x <= 1}`.
fn project_ellipsoid(s: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
    if v.dot(&(s * v)) <= 1.0 {
        return v.clone();
    }
    let eig = ((s + s.transpose()) * 0.5).symmetric_eigen();
    let y = eig.eigenvectors.transpose() * v;
    let lam = &eig.eigenvalues;
    let phi = |mu: f64| -> f64 {
        y.iter()
            .zip(lam.iter())
            .map(|(yi, li)| li.max(0.0) * (yi / (1.0 + mu * li.max(0.0))).powi(2))
            .sum::<f64>()
            - 1.0
    };
    let mut hi = 1.0;
    while phi(hi) > 0.0 && hi < 1e300 {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if phi(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    let x = DVector::from_fn(y.len(), |i, _| y[i] / (1.0 + hi * lam[i].max(0.0)));
    &eig.eigenvectors * x
}

fn project_simple(c: &ConstraintSet, v: &DVector<f64>, n_u: usize) -> DVector<f64> {
    match c {
        ConstraintSet::Box { lo, hi } => DVector::from_fn(v.len(), |i, _| {
            let j = if lo.len() == v.len() { i } else { i % n_u };
            v[i].clamp(lo[j], hi[j])
        }),
        ConstraintSet::ChannelEnergy { energy } => {
            let mut out = v.clone();
            for (c, e) in energy.iter().enumerate() {
                let nrm: f64 = v.iter().skip(c).step_by(n_u).map(|x| x * x).sum::<f64>().sqrt();
                let r = e.sqrt();
                if nrm > r {
                    for i in (c..v.len()).step_by(n_u) {
                        out[i] *= r / nrm;
                    }
                }
            }
            out
        }
        ConstraintSet::TotalEnergy { energy } => {
            let nrm = v.norm();
            let r = energy.sqrt();
            if nrm > r {
                v * (r / nrm)
            } else {
                v.clone()
            }
        }
        ConstraintSet::QuadraticList { matrices } if matrices.len() == 1 => project_ellipsoid(&matrices[0], v),
        ConstraintSet::QuadraticList { matrices } => {
            let parts: Vec<ConstraintSet> = matrices
                .iter()
                .map(|s| ConstraintSet::QuadraticList {
                    matrices: vec![s.clone()],
                })
                .collect();
            dykstra(&parts, v, n_u)
        }
        ConstraintSet::Intersection { sets } => dykstra(sets, v, n_u),
    }
}

fn dykstra(sets: &[ConstraintSet], v: &DVector<f64>, n_u: usize) -> DVector<f64> {
    match sets.len() {
        0 => return v.clone(),
        1 => return project_simple(&sets[0], v, n_u),
        _ => {}
    }
    let mut x = v.clone();
    let mut incr = vec![DVector::zeros(v.len()); sets.len()];
    for _ in 0..DYKSTRA_SWEEPS {
        let start = x.clone();
        for (s, p) in sets.iter().zip(incr.iter_mut()) {
            let y = project_simple(s, &(&x + &*p), n_u);
            *p = &x + &*p - &y;
            x = y;
        }
        if (&x - start).norm() < DYKSTRA_TOL {
            break;
        }
    }
    x
}

/// Euclidean projection onto `c`.
pub fn project(c: &ConstraintSet, v: &DVector<f64>, n_u: usize) -> DVector<f64> {
    project_simple(c, v, n_u)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DesignParams {
    pub tau: f64,
    #[serde(rename = "L")]
    pub l: f64,
    pub eps_u: f64,
    pub eps_lambda: f64,
    pub seed: u64,
    pub max_iter: usize,
}

impl Default for DesignParams {
    fn default() -> Self {
        DesignParams {
            tau: 10.0,
            l: 50.0,
            eps_u: 1e-3,
            eps_lambda: 1e-5,
            seed: 0,
            max_iter: 20_000,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DesignProblem {
    pub ss: StateSpace,
    pub n_period: usize,
    pub n_u: usize,
    pub p: Vec<DMatrix<f64>>,
    pub p_x: DMatrix<f64>,
    pub pp: Vec<DMatrix<f64>>,
    pub constraints: ConstraintSet,
    pub params: DesignParams,
    /// `(I - A^N)^{-1}`
    period_inv: DMatrix<f64>,
    /// All `P'_i` stacked row-wise.
    stacked: DMatrix<f64>,
}

fn psd_factor(x: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = ((x + x.transpose()) * 0.5).symmetric_eigen();
    let sq = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sq)
}

/// Balanced truncation of states whose Hankel singular value is below
/// [`MINREAL_TOL`] relative to the largest. Requires a stable discrete system.
pub fn minimal_realization(ss: &StateSpace) -> Result<StateSpace> {
    ss.require_stable()?;
    if ss.time_domain != TimeDomain::Discrete {
        return Err(Error::Config("minimal realization expects a discrete system".into()));
    }
    if ss.n_states() == 0 {
        return Ok(ss.clone());
    }
    let wc = linalg::dlyap(&ss.a, &(&ss.b * ss.b.transpose()));
    let wo = linalg::dlyap(&ss.a.transpose(), &(ss.c.transpose() * &ss.c));
    let lc = psd_factor(&wc);
    let lo = psd_factor(&wo);
    let svd = (lo.transpose() * &lc).svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let hsv = &svd.singular_values;
    let mut order: Vec<usize> = (0..hsv.len()).collect();
    order.sort_by(|a, b| hsv[*b].total_cmp(&hsv[*a]));
    let top = hsv[order[0]];
    if top == 0.0 {
        return Ok(StateSpace::static_gain(ss.d.clone(), ss.time_domain, ss.h));
    }
    let keep: Vec<usize> = order.into_iter().filter(|i| hsv[*i] > MINREAL_TOL * top).collect();
    let r = keep.len();
    let n = ss.n_states();
    let mut t = DMatrix::zeros(n, r);
    let mut ti = DMatrix::zeros(r, n);
    for (k, &i) in keep.iter().enumerate() {
        let s = hsv[i].powf(-0.5);
        t.set_column(k, &(&lc * vt.row(i).transpose() * s));
        ti.set_row(k, &((u.column(i).transpose() * lo.transpose()) * s));
    }
    StateSpace::new(
        &ti * &ss.a * &t,
        &ti * &ss.b,
        &ss.c * &t,
        ss.d.clone(),
        ss.time_domain,
        ss.h,
    )
}

/// Sampled map from the plant input to the regressor, `T(z)`, for a model
/// with a state-space form and a generator set with a chosen denominator.
pub fn regressor_system(model: &DaeModel, gen: &GeneratorSet, h: f64) -> Result<StateSpace> {
    let d = gen
        .d
        .as_ref()
        .ok_or_else(|| Error::Config("generator set has no denominator".into()))?;
    ltisim::sampled(
        &ltisim::plant_filter_series(model, d, &gen.m, ltisim::Channel::Input)?,
        h,
    )
}

/// Builds the period matrices after a minimal-realization pass.
pub fn build_problem(
    ss: &StateSpace,
    n_period: usize,
    constraints: ConstraintSet,
    params: DesignParams,
) -> Result<DesignProblem> {
    if n_period == 0 {
        return Err(Error::Config("period must be positive".into()));
    }
    let ss = minimal_realization(ss)?;
    let (n, n_u, m) = (ss.n_states(), ss.n_inputs(), ss.n_outputs());
    let dim = n_period * n_u;
    constraints.check(dim, n_u)?;
    let mut apow = vec![DMatrix::<f64>::identity(n, n)];
    for _ in 0..n_period {
        let next = apow.last().unwrap() * &ss.a;
        apow.push(next);
    }
    let mut p_x = DMatrix::zeros(n, dim);
    for k in 0..n_period {
        p_x.view_mut((0, k * n_u), (n, n_u))
            .copy_from(&(&apow[n_period - 1 - k] * &ss.b));
    }
    let period_inv = if n == 0 {
        DMatrix::zeros(0, 0)
    } else {
        let inv = (DMatrix::<f64>::identity(n, n) - &apow[n_period])
            .try_inverse()
            .ok_or(Error::SingularPeriodMatrix)?;
        if !(inv.norm() <= 1e12) {
            return Err(Error::SingularPeriodMatrix);
        }
        inv
    };
    // CA^{lag-1}B for lag >= 1, D for lag 0
    let markov = ss.markov(n_period);
    let corr = &period_inv * &p_x;
    let mut p = Vec::with_capacity(n_period);
    let mut pp = Vec::with_capacity(n_period);
    let mut stacked = DMatrix::zeros(n_period * m, dim);
    for i in 1..=n_period {
        let mut pi = DMatrix::zeros(m, dim);
        for k in 0..i {
            pi.view_mut((0, k * n_u), (m, n_u)).copy_from(&markov[i - 1 - k]);
        }
        let ppi = &pi + &ss.c * &apow[i - 1] * &corr;
        stacked.view_mut(((i - 1) * m, 0), (m, dim)).copy_from(&ppi);
        p.push(pi);
        pp.push(ppi);
    }
    Ok(DesignProblem {
        ss,
        n_period,
        n_u,
        p,
        p_x,
        pp,
        constraints,
        params,
        period_inv,
        stacked,
    })
}

impl DesignProblem {
    pub fn dim(&self) -> usize {
        self.n_period * self.n_u
    }

    pub fn m(&self) -> usize {
        self.ss.n_outputs()
    }

    /// One period of steady-state regressors, one row per sample.
    pub fn period_regressors(&self, u: &DVector<f64>) -> DMatrix<f64> {
        let y = &self.stacked * u;
        DMatrix::from_row_slice(self.n_period, self.m(), y.as_slice())
    }

    /// `Q(u_bar) = sum_i P'_i u_bar u_bar' P'_i'`.
    pub fn q_matrix(&self, u: &DVector<f64>) -> DMatrix<f64> {
        let y = self.period_regressors(u);
        y.transpose() * y
    }

    /// `sum_i P'_i U P'_i'` for a lifted variable `U`.
    pub fn lifted_map(&self, u: &DMatrix<f64>) -> DMatrix<f64> {
        let m = self.m();
        let mut out = DMatrix::zeros(m, m);
        for pi in &self.pp {
            out += pi * u * pi.transpose();
        }
        out
    }

    /// Adjoint of [`Self::lifted_map`]: `sum_i P'_i' Z P'_i`.
    pub fn lifted_adjoint(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let d = self.dim();
        let mut out = DMatrix::zeros(d, d);
        for pi in &self.pp {
            out += pi.transpose() * z * pi;
        }
        out
    }
}

/// `J(u_bar)` and a subgradient.
pub fn objective_subgradient(p: &DesignProblem, u: &DVector<f64>) -> (f64, DVector<f64>) {
    let m = p.m();
    if m == 0 {
        return (0.0, DVector::zeros(u.len()));
    }
    let y = p.period_regressors(u);
    let q = y.transpose() * &y;
    let (lam, v) = linalg::min_eigen(&q);
    let yv = &y * &v;
    // 2 sum_i (v' P'_i u) P'_i' v, written through the stacked P'
    let w = DVector::from_fn(p.n_period * m, |k, _| yv[k / m] * v[k % m]);
    (lam, p.stacked.transpose() * w * 2.0)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DesignResult {
    #[serde(with = "crate::io::vector")]
    pub u_bar: DVector<f64>,
    #[serde(rename = "J")]
    pub j: f64,
    pub iterations: usize,
    pub lambda_history: Vec<f64>,
    pub sdp_upper: Option<f64>,
    pub gap: Option<f64>,
    #[serde(with = "crate::io::vector")]
    pub x0_periodic: DVector<f64>,
    pub seed: u64,
}

impl DesignResult {
    /// Writes one period of the input, one row per sample.
    pub fn write_csv(&self, path: &Path, n_u: usize) -> Result<()> {
        let header: Vec<String> = (0..n_u).map(|c| format!("u{}", c + 1)).collect();
        let rows: Vec<Vec<f64>> = self.u_bar.as_slice().chunks(n_u).map(|r| r.to_vec()).collect();
        crate::io::write_csv(path, &header, &rows)
    }

    /// One period of the input as a matrix, one row per sample.
    pub fn samples(&self, n_u: usize) -> Vec<Vec<f64>> {
        self.u_bar.as_slice().chunks(n_u).map(|r| r.to_vec()).collect()
    }
}

/// Projected subgradient ascent with diminishing steps `L / (L + k) tau`.
///
/// Stops when the iterate moves less than `eps_u`, when the running mean of
/// `lambda_min` changes by less than `eps_lambda`, or after `max_iter`
/// steps. Returns the best iterate seen.
pub fn optimize(p: &DesignProblem) -> Result<DesignResult> {
    let prm = &p.params;
    let mut rng = ChaCha8Rng::seed_from_u64(prm.seed);
    let start = DVector::from_fn(p.dim(), |_, _| {
        let x: f64 = StandardNormal.sample(&mut rng);
        x
    });
    let mut u = project(&p.constraints, &start, p.n_u);
    let mut best = (f64::NEG_INFINITY, u.clone());
    let mut history = Vec::new();
    let mut mean = 0.0;
    let mut k = 0usize;
    loop {
        let (lam, g) = objective_subgradient(p, &u);
        history.push(lam);
        if lam > best.0 {
            best = (lam, u.clone());
        }
        let step = prm.l / (prm.l + k as f64) * prm.tau;
        let next = project(&p.constraints, &(&u + g * step), p.n_u);
        let old = mean;
        mean = (mean * k as f64 + lam) / (k + 1) as f64;
        let moved = (&next - &u).norm();
        if moved < prm.eps_u || (k > 0 && (mean - old).abs() < prm.eps_lambda) || k >= prm.max_iter {
            break;
        }
        k += 1;
        u = next;
    }
    let x0 = periodic_initial_state(p, &best.1)?;
    Ok(DesignResult {
        u_bar: best.1,
        j: best.0.max(0.0),
        iterations: k,
        lambda_history: history,
        sdp_upper: None,
        gap: None,
        x0_periodic: x0,
        seed: prm.seed,
    })
}

/// Runs [`optimize`] once per seed in parallel; returns every result and
/// the index of the best (ties go to the earliest seed).
pub fn optimize_multistart(p: &DesignProblem, seeds: &[u64]) -> Result<(usize, Vec<DesignResult>)> {
    let results: Vec<DesignResult> = seeds
        .par_iter()
        .map(|s| {
            let mut q = p.clone();
            q.params.seed = *s;
            optimize(&q)
        })
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (i, r) in results.iter().enumerate() {
        if r.j > results[best].j {
            best = i;
        }
    }
    Ok((best, results))
}

/// `x'_0 = (I - A^N)^{-1} P_x u_bar`, the state that makes the response
/// to the repeated input periodic from the first sample.
pub fn periodic_initial_state(p: &DesignProblem, u: &DVector<f64>) -> Result<DVector<f64>> {
    if u.len() != p.dim() {
        return Err(Error::DimensionMismatch(format!(
            "input has {} entries, expected {}",
            u.len(),
            p.dim()
        )));
    }
    Ok(&p.period_inv * (&p.p_x * u))
}

/// Input matrix (one row per sample) repeating `u_bar` over `samples`.
pub fn repeat_input(p: &DesignProblem, u: &DVector<f64>, samples: usize) -> DMatrix<f64> {
    DMatrix::from_fn(samples, p.n_u, |k, c| u[(k % p.n_period) * p.n_u + c])
}

/// Whole periods needed for the transient from rest to decay below `tol`,
/// judged by the spectral radius of the realization.
pub fn settling_samples(p: &DesignProblem, tol: f64) -> usize {
    let rho = linalg::spectral_radius(&p.ss.a);
    let k = if rho <= 0.0 {
        1.0
    } else {
        (tol.ln() / rho.ln()).ceil().max(1.0)
    };
    (k as usize).div_ceil(p.n_period) * p.n_period + p.n_period
}

/// `s_min^2` of the last `N`-sample window after simulating the repeated
/// input from rest for `samples` steps.
pub fn verify_asymptotic(p: &DesignProblem, u: &DVector<f64>, samples: usize) -> Result<f64> {
    let samples = samples.max(p.n_period);
    let y = ltisim::simulate(&p.ss, &repeat_input(p, u, samples), &DVector::zeros(p.ss.n_states()))?;
    let w = y.rows(samples - p.n_period, p.n_period).into_owned();
    let s = linalg::singular_values(&w);
    Ok(if p.m() > p.n_period {
        0.0
    } else {
        s.last().copied().unwrap_or(0.0).powi(2)
    })
}

/// Outcome of the semidefinite relaxation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SdpResult {
    pub bound: f64,
    pub rank: usize,
    /// Primal lifted variable recovered from the central path.
    #[serde(with = "crate::io::rows")]
    pub u_lifted: DMatrix<f64>,
    /// `sqrt(s_1) v_1` of the lifted variable, scaled into the feasible set.
    #[serde(with = "crate::io::vector")]
    pub u_factor: DVector<f64>,
    /// Dual variables: multipliers of the quadratic constraints and the
    /// trace-one matrix of the eigenvalue constraint.
    pub y: Vec<f64>,
    #[serde(with = "crate::io::rows")]
    pub z: DMatrix<f64>,
}

/// Basis of symmetric traceless `m x m` matrices.
fn traceless_basis(m: usize) -> Vec<DMatrix<f64>> {
    let mut out = Vec::new();
    for i in 0..m {
        for j in i..m {
            if i == j {
                if i + 1 < m {
                    let mut e = DMatrix::zeros(m, m);
                    e[(i, i)] = 1.0;
                    e[(m - 1, m - 1)] = -1.0;
                    out.push(e);
                }
            } else {
                let mut e = DMatrix::zeros(m, m);
                e[(i, j)] = 1.0;
                e[(j, i)] = 1.0;
                out.push(e);
            }
        }
    }
    out
}

/// The dual of the relaxation in the affine form `F(x) = F0 + sum x_i F_i`
/// over the blocks `[Z, sum y_j S_j - A*(Z), diag(y)]`.
struct DualForm {
    quads: Vec<DMatrix<f64>>,
    zb: Vec<DMatrix<f64>>,
    z0: DMatrix<f64>,
    adj0: DMatrix<f64>,
    adjb: Vec<DMatrix<f64>>,
}

impl DualForm {
    fn new(p: &DesignProblem) -> Result<Self> {
        let quads = p.constraints.to_quadratics(p.dim(), p.n_u)?;
        if quads.is_empty() {
            return Err(Error::ConversionUnsupported("no constraints bound the input".into()));
        }
        let m = p.m();
        let zb = traceless_basis(m);
        let z0 = DMatrix::identity(m, m) / m as f64;
        let adj0 = p.lifted_adjoint(&z0);
        let adjb = zb.iter().map(|e| p.lifted_adjoint(e)).collect();
        Ok(DualForm {
            quads,
            zb,
            z0,
            adj0,
            adjb,
        })
    }

    fn n_y(&self) -> usize {
        self.quads.len()
    }

    fn n_vars(&self) -> usize {
        self.quads.len() + self.zb.len()
    }

    fn blocks(&self, x: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let ny = self.n_y();
        let mut z = self.z0.clone();
        let mut lmi = -&self.adj0;
        for (k, e) in self.zb.iter().enumerate() {
            z += e * x[ny + k];
            lmi -= &self.adjb[k] * x[ny + k];
        }
        for (j, s) in self.quads.iter().enumerate() {
            lmi += s * x[j];
        }
        (z, lmi)
    }

    /// Coefficient matrices of variable `i` in the two matrix blocks.
    fn coeff(&self, i: usize) -> (Option<&DMatrix<f64>>, DMatrix<f64>) {
        let ny = self.n_y();
        if i < ny {
            (None, self.quads[i].clone())
        } else {
            (Some(&self.zb[i - ny]), -&self.adjb[i - ny])
        }
    }
}

fn barrier_value(df: &DualForm, x: &DVector<f64>, t: f64) -> Option<f64> {
    let ny = df.n_y();
    if (0..ny).any(|j| x[j] <= 0.0) {
        return None;
    }
    let (z, lmi) = df.blocks(x);
    let cz = z.cholesky()?;
    let cl = lmi.cholesky()?;
    let logdet = |c: &nalgebra::Cholesky<f64, nalgebra::Dyn>| -> f64 {
        c.l_dirty().diagonal().iter().map(|v| 2.0 * v.ln()).sum()
    };
    let obj: f64 = (0..ny).map(|j| x[j]).sum();
    Some(t * obj - logdet(&cz) - logdet(&cl) - (0..ny).map(|j| x[j].ln()).sum::<f64>())
}

/// Upper bound from the semidefinite relaxation, solved on its dual with
/// a log-barrier Newton method.
pub fn sdp_bound(p: &DesignProblem) -> Result<SdpResult> {
    let df = DualForm::new(p)?;
    let (ny, nv, m, dim) = (df.n_y(), df.n_vars(), p.m(), p.dim());
    // strictly feasible start: Z = I/m and equal, large multipliers
    let ssum = df.quads.iter().fold(DMatrix::zeros(dim, dim), |acc, s| acc + s);
    let smin = ssum.symmetric_eigenvalues().min();
    if smin <= 0.0 {
        return Err(Error::ConversionUnsupported(
            "constraints do not bound every direction".into(),
        ));
    }
    let amax = df.adj0.symmetric_eigenvalues().max().max(0.0);
    let mut x = DVector::zeros(nv);
    for j in 0..ny {
        x[j] = 2.0 * amax / smin + 1.0;
    }
    let barrier_dim = (m + dim + ny) as f64;
    let mut t = 1.0 / x.rows(0, ny).sum().max(1e-12);
    loop {
        for _ in 0..200 {
            let (z, lmi) = df.blocks(&x);
            let zi = z.clone().cholesky().ok_or(Error::SingularPeriodMatrix)?.inverse();
            let li = lmi.clone().cholesky().ok_or(Error::SingularPeriodMatrix)?.inverse();
            // products of the inverse blocks with each coefficient matrix
            let prods: Vec<(Option<DMatrix<f64>>, DMatrix<f64>)> = (0..nv)
                .into_par_iter()
                .map(|i| {
                    let (cz, cl) = df.coeff(i);
                    (cz.map(|c| &zi * c), &li * cl)
                })
                .collect();
            let mut grad = DVector::zeros(nv);
            let mut hess = DMatrix::zeros(nv, nv);
            for i in 0..nv {
                let mut g = -prods[i].1.trace();
                if let Some(a) = &prods[i].0 {
                    g -= a.trace();
                }
                if i < ny {
                    g += t - 1.0 / x[i];
                    hess[(i, i)] += 1.0 / (x[i] * x[i]);
                }
                grad[i] = g;
                for j in i..nv {
                    let mut h = prods[i].1.component_mul(&prods[j].1.transpose()).sum();
                    if let (Some(a), Some(b)) = (&prods[i].0, &prods[j].0) {
                        h += a.component_mul(&b.transpose()).sum();
                    }
                    hess[(i, j)] += h;
                    if i != j {
                        hess[(j, i)] += h;
                    }
                }
            }
            let step = match hess.clone().cholesky() {
                Some(c) => -c.solve(&grad),
                None => -linalg::pinv(&hess, 1e-14) * &grad,
            };
            let decrement = -grad.dot(&step);
            if decrement / 2.0 < 1e-10 {
                break;
            }
            // inside the quadratic convergence region a full step is safe, and
            // at large t the Armijo test below drowns in rounding
            if decrement < 1.0 / 16.0 {
                let cand = &x + &step;
                if barrier_value(&df, &cand, t).is_some() {
                    x = cand;
                    continue;
                }
            }
            let f0 = barrier_value(&df, &x, t).ok_or(Error::SingularPeriodMatrix)?;
            let mut a = 1.0;
            loop {
                let cand = &x + &step * a;
                if let Some(f) = barrier_value(&df, &cand, t) {
                    if f <= f0 - 0.25 * a * decrement {
                        x = cand;
                        break;
                    }
                }
                a *= 0.5;
                if a < 1e-14 {
                    break;
                }
            }
            if a < 1e-14 {
                break;
            }
        }
        if barrier_dim / t < 1e-8 * x.rows(0, ny).sum().max(1e-12) {
            break;
        }
        t *= 8.0;
    }
    let (z, lmi) = df.blocks(&x);
    let mut u_lifted = lmi.cholesky().ok_or(Error::SingularPeriodMatrix)?.inverse() / t;
    // off the exact central path the recovered point can overshoot a
    // constraint slightly; scale it back into the feasible set
    let excess = df.quads.iter().map(|s| (s * &u_lifted).trace()).fold(0.0, f64::max);
    if excess > 1.0 {
        u_lifted /= excess;
    }
    let bound: f64 = (0..ny).map(|j| x[j]).sum();
    let eig = u_lifted.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|a, b| eig.eigenvalues[*b].total_cmp(&eig.eigenvalues[*a]));
    let s1 = eig.eigenvalues[order[0]].max(0.0);
    let rank = order
        .iter()
        .filter(|i| eig.eigenvalues[**i] > SDP_RANK_TOL * s1)
        .count();
    let mut u_factor = eig.eigenvectors.column(order[0]) * s1.sqrt();
    let worst = df
        .quads
        .iter()
        .map(|s| u_factor.dot(&(s * &u_factor)))
        .fold(0.0, f64::max);
    if worst > 1.0 {
        u_factor /= worst.sqrt();
    }
    Ok(SdpResult {
        bound,
        rank,
        u_lifted,
        u_factor,
        y: x.rows(0, ny).iter().copied().collect(),
        z,
    })
}

/// Writes the dual of the relaxation in sparse SDPA format: minimize
/// `sum y_j` subject to `sum x_i F_i - F_0 >= 0` with blocks `Z` (m x m),
/// `sum y_j S_j - A*(Z)` and the diagonal of `y`.
pub fn export_sdpa(p: &DesignProblem, path: &Path) -> Result<()> {
    let df = DualForm::new(p)?;
    let (ny, nv, m, dim) = (df.n_y(), df.n_vars(), p.m(), p.dim());
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{nv}")?;
    writeln!(f, "3")?;
    writeln!(f, "{m} {dim} -{ny}")?;
    let c: Vec<String> = (0..nv).map(|i| if i < ny { "1".into() } else { "0".into() }).collect();
    writeln!(f, "{}", c.join(" "))?;
    let mut entries = |mat: usize, block: usize, a: &DMatrix<f64>, sign: f64| -> std::io::Result<()> {
        for i in 0..a.nrows() {
            for j in i..a.ncols() {
                let v = sign * a[(i, j)];
                if v != 0.0 {
                    writeln!(f, "{mat} {block} {} {} {v:.17e}", i + 1, j + 1)?;
                }
            }
        }
        Ok(())
    };
    // F_0 enters with a minus sign in the standard form
    entries(0, 1, &df.z0, -1.0)?;
    entries(0, 2, &df.adj0, 1.0)?;
    for i in 0..nv {
        let (cz, cl) = df.coeff(i);
        if let Some(cz) = cz {
            entries(i + 1, 1, cz, 1.0)?;
        }
        entries(i + 1, 2, &cl, 1.0)?;
        if i < ny {
            let mut e = DMatrix::zeros(ny, ny);
            e[(i, i)] = 1.0;
            entries(i + 1, 3, &e, 1.0)?;
        }
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn memoryless(d: f64, n_period: usize, c: ConstraintSet) -> DesignProblem {
        let ss = StateSpace::static_gain(DMatrix::from_element(1, 1, d), TimeDomain::Discrete, Some(1.0));
        build_problem(&ss, n_period, c, DesignParams::default()).unwrap()
    }

    fn small_system() -> StateSpace {
        StateSpace::new(
            DMatrix::from_row_slice(3, 3, &[0.5, 0.2, 0.0, -0.1, 0.7, 0.1, 0.0, 0.3, -0.4]),
            DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.5, 1.0, 0.0, -1.0]),
            DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 1.0, 0.0, 1.0, -0.5]),
            DMatrix::from_row_slice(2, 2, &[0.1, 0.0, 0.0, 0.2]),
            TimeDomain::Discrete,
            Some(1.0),
        )
        .unwrap()
    }

    #[test]
    fn memoryless_objective() {
        let p = memoryless(1.0, 4, ConstraintSet::TotalEnergy { energy: 1.0 });
        let u = DVector::from_vec(vec![0.5, -0.2, 0.1, 0.3]);
        let (j, g) = objective_subgradient(&p, &u);
        assert!((j - u.norm_squared()).abs() < 1e-14);
        assert!((g - &u * 2.0).norm() < 1e-14);
        let (j0, g0) = objective_subgradient(&p, &DVector::zeros(4));
        assert_eq!(j0, 0.0);
        assert_eq!(g0.norm(), 0.0);
        let r = optimize(&p).unwrap();
        assert!((r.j - 1.0).abs() < 1e-9, "{}", r.j);
        let sdp = sdp_bound(&p).unwrap();
        assert!((sdp.bound - 1.0).abs() < 1e-7, "{}", sdp.bound);
    }

    #[test]
    fn fir_correction_vanishes() {
        // A = 0: the periodic correction only touches the first sample
        let ss = StateSpace::new(
            DMatrix::zeros(1, 1),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::zeros(1, 1),
            TimeDomain::Discrete,
            Some(1.0),
        )
        .unwrap();
        let p = build_problem(
            &ss,
            5,
            ConstraintSet::TotalEnergy { energy: 1.0 },
            DesignParams::default(),
        )
        .unwrap();
        for i in 1..5 {
            assert!((&p.pp[i] - &p.p[i]).norm() < 1e-15);
        }
        let u = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let x0 = periodic_initial_state(&p, &u).unwrap();
        assert!((x0[0] - 5.0 * p.ss.b[(0, 0)] * p.ss.c[(0, 0)] / p.ss.c[(0, 0)]).abs() < 1e-12);
    }

    #[test]
    fn projections() {
        let v = DVector::from_vec(vec![2.0, 0.0, 0.0, 0.0]);
        let t = ConstraintSet::TotalEnergy { energy: 1.0 };
        assert!((project(&t, &v, 2) - &v * 0.5).norm() < 1e-15);
        let inside = DVector::from_vec(vec![0.1, 0.2, -0.3, 0.1]);
        assert_eq!(project(&t, &inside, 2), inside);
        let both = ConstraintSet::Intersection {
            sets: vec![
                ConstraintSet::Box {
                    lo: vec![-0.6, -0.6],
                    hi: vec![0.6, 0.6],
                },
                ConstraintSet::TotalEnergy { energy: 1.0 },
            ],
        };
        let w = DVector::from_vec(vec![3.0, -1.0, 0.2, 2.0]);
        let x = project(&both, &w, 2);
        assert!(both.contains(&x, 2, 1e-9));
        let ch = ConstraintSet::ChannelEnergy { energy: vec![1.0, 4.0] };
        let y = project(&ch, &w, 2);
        assert!(ch.contains(&y, 2, 1e-12));
        assert!((y[1] * y[1] + y[3] * y[3] - 4.0).abs() < 1e-12);
        // an ellipsoid projection satisfies the optimality condition
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let q = ConstraintSet::QuadraticList {
            matrices: vec![s.clone()],
        };
        let v2 = DVector::from_vec(vec![3.0, -2.0]);
        let x2 = project(&q, &v2, 1);
        assert!((x2.dot(&(&s * &x2)) - 1.0).abs() < 1e-10);
        let normal = &s * &x2;
        let diff = &v2 - &x2;
        assert!((diff.normalize() - normal.normalize()).norm() < 1e-8);
    }

    #[test]
    fn periodic_state_gives_periodic_output() {
        let p = build_problem(
            &small_system(),
            6,
            ConstraintSet::TotalEnergy { energy: 1.0 },
            DesignParams::default(),
        )
        .unwrap();
        let u = DVector::from_fn(12, |i, _| ((i * 7) as f64).sin());
        let x0 = periodic_initial_state(&p, &u).unwrap();
        let y = ltisim::simulate(&p.ss, &repeat_input(&p, &u, 24), &x0).unwrap();
        for k in 0..18 {
            assert!((y.row(k) - y.row(k + 6)).norm() < 1e-10);
        }
        assert!((y.rows(0, 6) - p.period_regressors(&u)).norm() < 1e-10);
        assert_eq!(periodic_initial_state(&p, &DVector::zeros(12)).unwrap().norm(), 0.0);
    }

    #[test]
    fn asymptotic_richness_matches_objective() {
        let p = build_problem(
            &small_system(),
            6,
            ConstraintSet::TotalEnergy { energy: 1.0 },
            DesignParams::default(),
        )
        .unwrap();
        let u = DVector::from_fn(12, |i, _| ((i * 3) as f64).cos());
        let (j, _) = objective_subgradient(&p, &u);
        let v = verify_asymptotic(&p, &u, 600).unwrap();
        assert!((v - j).abs() < 1e-10 * j.max(1e-300));
        // any window of one period gives the same value
        let y = ltisim::simulate(&p.ss, &repeat_input(&p, &u, 600), &DVector::zeros(3)).unwrap();
        for off in 0..6 {
            let w = y.rows(500 + off, 6).into_owned();
            let s = linalg::singular_values(&w);
            assert!((s.last().unwrap().powi(2) - j).abs() < 1e-8 * j);
        }
    }

    #[test]
    fn minimal_realization_drops_unreachable_states() {
        let mut ss = small_system();
        let n = 4;
        let mut a = DMatrix::zeros(n, n);
        a.view_mut((0, 0), (3, 3)).copy_from(&ss.a);
        a[(3, 3)] = 0.3;
        ss.a = a;
        ss.b = ss.b.clone().insert_row(3, 0.0);
        ss.c = ss.c.clone().insert_column(3, 1.0);
        let r = minimal_realization(&ss).unwrap();
        assert_eq!(r.n_states(), 3);
        for w in [0.0, 0.7, 2.0] {
            let diff = ss.freq_response(w) - r.freq_response(w);
            assert!(diff.iter().map(|z| z.norm()).fold(0.0, f64::max) < 1e-9);
        }
    }

    #[test]
    fn designed_input_is_on_the_boundary_and_dominated_by_sdp() {
        let params = DesignParams {
            tau: 1.0,
            ..DesignParams::default()
        };
        let p = build_problem(
            &small_system(),
            6,
            ConstraintSet::ChannelEnergy { energy: vec![3.0, 3.0] },
            params,
        )
        .unwrap();
        let r = optimize(&p).unwrap();
        let e0: f64 = r.u_bar.iter().step_by(2).map(|x| x * x).sum();
        let e1: f64 = r.u_bar.iter().skip(1).step_by(2).map(|x| x * x).sum();
        assert!((e0.max(e1) - 3.0).abs() < 1e-6);
        let sdp = sdp_bound(&p).unwrap();
        assert!(sdp.bound >= r.j - 1e-6, "{} < {}", sdp.bound, r.j);
        // the recovered primal certifies the bound
        let lifted = p.lifted_map(&sdp.u_lifted);
        let lmin = lifted.symmetric_eigenvalues().min();
        assert!(
            (lmin - sdp.bound).abs() < 1e-5 * sdp.bound.max(1.0),
            "{lmin} {} {}",
            sdp.bound,
            r.j
        );
        let again = optimize(&p).unwrap();
        assert_eq!(again.lambda_history, r.lambda_history);
    }

    #[test]
    fn box_converts_to_quadratics() {
        let b = ConstraintSet::Box {
            lo: vec![-2.0],
            hi: vec![2.0],
        };
        let q = b.to_quadratics(3, 1).unwrap();
        assert_eq!(q.len(), 3);
        assert!((q[1][(1, 1)] - 0.25).abs() < 1e-15);
        let skew = ConstraintSet::Box {
            lo: vec![-1.0],
            hi: vec![2.0],
        };
        assert!(matches!(skew.to_quadratics(3, 1), Err(Error::ConversionUnsupported(_))));
    }

    #[test]
    fn sdpa_export_layout() {
        let p = memoryless(1.0, 1, ConstraintSet::TotalEnergy { energy: 1.0 });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.dat-s");
        export_sdpa(&p, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "1");
        assert_eq!(lines[1], "3");
        assert_eq!(lines[2], "1 1 -1");
        assert_eq!(lines[3], "1");
        assert_eq!(lines.len(), 4 + 4);
    }

    proptest! {
        #[test]
        fn homogeneity(vals in prop::collection::vec(-1.0f64..1.0, 12)) {
            let p = build_problem(&small_system(), 6, ConstraintSet::TotalEnergy { energy: 1.0 }, DesignParams::default()).unwrap();
            let u = DVector::from_vec(vals);
            let (j, g) = objective_subgradient(&p, &u);
            for a in [-1.0, 0.5, 2.0] {
                let (ja, _) = objective_subgradient(&p, &(&u * a));
                prop_assert!((ja - a * a * j).abs() <= 1e-10 * (1.0 + j));
                // along the ray the subgradient inequality is tight
                let lin = j + g.dot(&(&u * (a - 1.0)));
                prop_assert!(ja >= lin - 1e-8 * (1.0 + j) || a < 0.0);
            }
        }

        #[test]
        fn subgradient_matches_central_differences(vals in prop::collection::vec(-1.0f64..1.0, 12)) {
            let p = build_problem(&small_system(), 6, ConstraintSet::TotalEnergy { energy: 1.0 }, DesignParams::default()).unwrap();
            let u = DVector::from_vec(vals);
            let ev = p.q_matrix(&u).symmetric_eigenvalues();
            let mut e: Vec<f64> = ev.iter().copied().collect();
            e.sort_by(f64::total_cmp);
            prop_assume!(e[1] - e[0] > 1e-3 * e[1].abs().max(1e-12));
            let (_, g) = objective_subgradient(&p, &u);
            let d = 1e-6 * u.norm();
            for k in 0..12 {
                let mut up = u.clone();
                let mut dn = u.clone();
                up[k] += d;
                dn[k] -= d;
                let fd = (objective_subgradient(&p, &up).0 - objective_subgradient(&p, &dn).0) / (2.0 * d);
                prop_assert!((fd - g[k]).abs() <= 1e-5 * g.amax().max(1e-12));
            }
        }

        #[test]
        fn sdp_dominates_feasible_points(vals in prop::collection::vec(-1.0f64..1.0, 12)) {
            let p = build_problem(&small_system(), 6, ConstraintSet::ChannelEnergy { energy: vec![1.0, 2.0] }, DesignParams::default()).unwrap();
            let u = project(&p.constraints, &DVector::from_vec(vals), 2);
            let (j, _) = objective_subgradient(&p, &u);
            let sdp = sdp_bound(&p).unwrap();
            prop_assert!(sdp.bound >= j - 1e-6);
        }
    }
}
