//! State-space realization, exact discretization, scenario simulation and
//! system norms.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter_design::{tv_rewrite, BasisSignal, GeneratorSet, TvBasis};
use crate::linalg;
use crate::model::{DaeModel, StateSpaceModel, TimeDomain};
use crate::polymat::PolyMatrix;

/// Points of the logarithmic frequency grid used by [`hinf_f_norm`].
pub const GRID_POINTS: usize = 2048;
/// Default plant sub-steps per estimator sample.
pub const DEFAULT_OVERSAMPLE: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateSpace {
    #[serde(with = "crate::io::rows")]
    pub a: DMatrix<f64>,
    #[serde(with = "crate::io::rows")]
    pub b: DMatrix<f64>,
    #[serde(with = "crate::io::rows")]
    pub c: DMatrix<f64>,
    #[serde(with = "crate::io::rows")]
    pub d: DMatrix<f64>,
    pub time_domain: TimeDomain,
    /// Sample interval, discrete systems only.
    pub h: Option<f64>,
}

impl StateSpace {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        d: DMatrix<f64>,
        time_domain: TimeDomain,
        h: Option<f64>,
    ) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || b.nrows() != n || c.ncols() != n || d.nrows() != c.nrows() || d.ncols() != b.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "A {:?}, B {:?}, C {:?}, D {:?}",
                a.shape(),
                b.shape(),
                c.shape(),
                d.shape()
            )));
        }
        Ok(StateSpace {
            a,
            b,
            c,
            d,
            time_domain,
            h,
        })
    }

    /// A memoryless system `y = D u`.
    pub fn static_gain(d: DMatrix<f64>, time_domain: TimeDomain, h: Option<f64>) -> Self {
        let (q, p) = d.shape();
        StateSpace {
            a: DMatrix::zeros(0, 0),
            b: DMatrix::zeros(0, p),
            c: DMatrix::zeros(q, 0),
            d,
            time_domain,
            h,
        }
    }

    pub fn n_states(&self) -> usize {
        self.a.nrows()
    }
    pub fn n_inputs(&self) -> usize {
        self.b.ncols()
    }
    pub fn n_outputs(&self) -> usize {
        self.c.nrows()
    }

    /// Spectral radius (discrete) or spectral abscissa (continuous).
    pub fn stability_margin(&self) -> f64 {
        if self.n_states() == 0 {
            return match self.time_domain {
                TimeDomain::Continuous => f64::NEG_INFINITY,
                TimeDomain::Discrete => 0.0,
            };
        }
        match self.time_domain {
            TimeDomain::Continuous => linalg::spectral_abscissa(&self.a),
            TimeDomain::Discrete => linalg::spectral_radius(&self.a),
        }
    }

    pub fn is_stable(&self) -> bool {
        match self.time_domain {
            TimeDomain::Continuous => self.stability_margin() < 0.0,
            TimeDomain::Discrete => self.stability_margin() < 1.0,
        }
    }

    pub fn require_stable(&self) -> Result<()> {
        if self.is_stable() {
            Ok(())
        } else {
            Err(Error::UnstableSystem(self.stability_margin()))
        }
    }

    /// `C (s I - A)^{-1} B + D` at the complex point `s`.
    pub fn eval(&self, s: Complex64) -> DMatrix<Complex64> {
        let d = self.d.map(Complex64::from);
        let n = self.n_states();
        if n == 0 {
            return d;
        }
        let m = DMatrix::<Complex64>::identity(n, n) * s - self.a.map(Complex64::from);
        let b = self.b.map(Complex64::from);
        let x = m
            .lu()
            .solve(&b)
            .unwrap_or_else(|| DMatrix::from_element(n, b.ncols(), Complex64::new(f64::INFINITY, 0.0)));
        self.c.map(Complex64::from) * x + d
    }

    /// Frequency response at `omega` rad/s.
    pub fn freq_response(&self, omega: f64) -> DMatrix<Complex64> {
        let s = match self.time_domain {
            TimeDomain::Continuous => Complex64::new(0.0, omega),
            TimeDomain::Discrete => Complex64::new(0.0, omega * self.h.unwrap_or(1.0)).exp(),
        };
        self.eval(s)
    }

    /// Markov parameters `D, CB, CAB, ...` (discrete systems).
    pub fn markov(&self, count: usize) -> Vec<DMatrix<f64>> {
        let mut out = Vec::with_capacity(count);
        if count == 0 {
            return out;
        }
        out.push(self.d.clone());
        let mut ca = self.c.clone();
        for _ in 1..count {
            out.push(&ca * &self.b);
            ca = &ca * &self.a;
        }
        out
    }
}

fn companion(d: &PolyMatrix) -> Result<(Vec<f64>, DMatrix<f64>)> {
    if d.rows() != 1 || d.cols() != 1 {
        return Err(Error::DimensionMismatch("denominator must be 1x1".into()));
    }
    let coeffs = d.entry(0, 0);
    let n = d.degree();
    let lead = coeffs[n];
    if lead == 0.0 {
        return Err(Error::DimensionMismatch("denominator is zero".into()));
    }
    let monic: Vec<f64> = coeffs.iter().map(|c| c / lead).collect();
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n.saturating_sub(1) {
        a[(i, i + 1)] = 1.0;
    }
    for j in 0..n {
        a[(n - 1, j)] = -monic[j];
    }
    Ok((monic, a))
}

/// Realizes `d^{-1} P` in controllable canonical form, one companion
/// block per input channel with the shared denominator `d`.
pub fn realize(d: &PolyMatrix, p: &PolyMatrix, time_domain: TimeDomain, h: Option<f64>) -> Result<StateSpace> {
    let n = d.degree();
    if p.degree() > n && !p.is_zero() {
        return Err(Error::ImproperFilter {
            numerator: p.degree(),
            denominator: n,
        });
    }
    let (monic, ac) = companion(d)?;
    let lead = d.entry(0, 0)[n];
    let (k, cols) = (p.rows(), p.cols());
    let mut a = DMatrix::zeros(n * cols, n * cols);
    let mut b = DMatrix::zeros(n * cols, cols);
    let mut c = DMatrix::zeros(k, n * cols);
    let mut dm = DMatrix::zeros(k, cols);
    for j in 0..cols {
        a.view_mut((j * n, j * n), (n, n)).copy_from(&ac);
        if n > 0 {
            b[(j * n + n - 1, j)] = 1.0;
        }
        for r in 0..k {
            let num: Vec<f64> = (0..=n).map(|i| p.coeff(i)[(r, j)] / lead).collect();
            let bn = num[n];
            dm[(r, j)] = bn;
            for i in 0..n {
                c[(r, j * n + i)] = num[i] - bn * monic[i];
            }
        }
    }
    let ss = StateSpace::new(a, b, c, dm, time_domain, h)?;
    if n > 0 {
        let single = StateSpace::new(
            ac,
            DMatrix::zeros(n, 0),
            DMatrix::zeros(0, n),
            DMatrix::zeros(0, 0),
            time_domain,
            h,
        )?;
        single.require_stable()?;
    }
    Ok(ss)
}

/// Zero-order-hold discretization via the exponential of `[[A, B], [0, 0]] h`.
pub fn c2d_exact(ss: &StateSpace, h: f64) -> Result<StateSpace> {
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::Config(format!("sample interval must be positive, got {h}")));
    }
    if ss.time_domain == TimeDomain::Discrete {
        return Err(Error::Config("system is already discrete".into()));
    }
    let (ad, bd) = zoh(&ss.a, &ss.b, h);
    StateSpace::new(ad, bd, ss.c.clone(), ss.d.clone(), TimeDomain::Discrete, Some(h))
}

fn zoh(a: &DMatrix<f64>, b: &DMatrix<f64>, h: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, p) = (a.nrows(), b.ncols());
    if n == 0 {
        return (DMatrix::zeros(0, 0), DMatrix::zeros(0, p));
    }
    let mut m = DMatrix::zeros(n + p, n + p);
    m.view_mut((0, 0), (n, n)).copy_from(&(a * h));
    m.view_mut((0, n), (n, p)).copy_from(&(b * h));
    let e = m.exp();
    (e.view((0, 0), (n, n)).into_owned(), e.view((0, n), (n, p)).into_owned())
}

/// Runs `x+ = A x + B u`, `y = C x + D u` over the rows of `u`.
pub fn simulate(ss: &StateSpace, u: &DMatrix<f64>, x0: &DVector<f64>) -> Result<DMatrix<f64>> {
    if u.ncols() != ss.n_inputs() || x0.len() != ss.n_states() {
        return Err(Error::DimensionMismatch(format!(
            "input has {} columns and x0 {} entries for a system with {} inputs and {} states",
            u.ncols(),
            x0.len(),
            ss.n_inputs(),
            ss.n_states()
        )));
    }
    let mut y = DMatrix::zeros(u.nrows(), ss.n_outputs());
    let mut x = x0.clone();
    for k in 0..u.nrows() {
        let uk = u.row(k).transpose();
        let yk = &ss.c * &x + &ss.d * &uk;
        y.row_mut(k).copy_from(&yk.transpose());
        x = &ss.a * &x + &ss.b * &uk;
    }
    Ok(y)
}

fn frob(m: &DMatrix<Complex64>) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Supremum over frequency of the Frobenius norm of the response.
pub fn hinf_f_norm(ss: &StateSpace) -> Result<f64> {
    ss.require_stable()?;
    if ss.n_states() == 0 {
        return Ok(ss.d.norm());
    }
    let hi = match ss.time_domain {
        TimeDomain::Continuous => 1e3,
        TimeDomain::Discrete => std::f64::consts::PI / ss.h.unwrap_or(1.0),
    };
    let lo = 1e-3_f64.min(hi / 10.0);
    let (llo, lhi) = (lo.ln(), hi.ln());
    let mut grid: Vec<f64> = (0..GRID_POINTS)
        .map(|i| (llo + (lhi - llo) * i as f64 / (GRID_POINTS - 1) as f64).exp())
        .collect();
    grid.insert(0, 0.0);
    let vals: Vec<f64> = grid.par_iter().map(|w| frob(&ss.freq_response(*w))).collect();
    let mut best = 0;
    for (i, v) in vals.iter().enumerate() {
        if *v > vals[best] {
            best = i;
        }
    }
    let mut peak = vals[best];
    if best > 0 {
        // golden-section search in log frequency between the neighbours
        let a0 = grid[best - 1].max(lo * 0.5).ln();
        let b0 = grid[(best + 1).min(grid.len() - 1)].ln();
        let f = |lw: f64| frob(&ss.freq_response(lw.exp()));
        let g = (5f64.sqrt() - 1.0) / 2.0;
        let (mut a, mut b) = (a0, b0);
        let mut c = b - g * (b - a);
        let mut d = a + g * (b - a);
        let (mut fc, mut fd) = (f(c), f(d));
        for _ in 0..80 {
            if fc > fd {
                b = d;
                d = c;
                fd = fc;
                c = b - g * (b - a);
                fc = f(c);
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + g * (b - a);
                fd = f(d);
            }
            if (b - a).abs() < 1e-12 {
                break;
            }
        }
        peak = peak.max(fc).max(fd);
    }
    Ok(peak)
}

/// H2 norm. Discrete systems use the controllability Gramian; continuous
/// systems must be strictly proper.
pub fn h2_norm(ss: &StateSpace) -> Result<f64> {
    ss.require_stable()?;
    let n = ss.n_states();
    match ss.time_domain {
        TimeDomain::Discrete => {
            let dd = (&ss.d * ss.d.transpose()).trace();
            if n == 0 {
                return Ok(dd.sqrt());
            }
            let x = linalg::dlyap(&ss.a, &(&ss.b * ss.b.transpose()));
            Ok(((&ss.c * x * ss.c.transpose()).trace() + dd).max(0.0).sqrt())
        }
        TimeDomain::Continuous => {
            if ss.d.iter().any(|v| *v != 0.0) {
                return Ok(f64::INFINITY);
            }
            if n == 0 {
                return Ok(0.0);
            }
            // A X + X A' + B B' = 0 through the Kronecker form
            let i = DMatrix::<f64>::identity(n, n);
            let k = i.kronecker(&ss.a) + ss.a.kronecker(&i);
            let q = -(&ss.b * ss.b.transpose());
            let rhs = DVector::from_column_slice(q.as_slice());
            let x = k.lu().solve(&rhs).ok_or(Error::UnstableSystem(ss.stability_margin()))?;
            let x = DMatrix::from_column_slice(n, n, x.as_slice());
            Ok((&ss.c * x * ss.c.transpose()).trace().max(0.0).sqrt())
        }
    }
}

fn row_abs_sums(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(m.nrows(), |i, _| m.row(i).iter().map(|x| x.abs()).sum())
}

/// Upper bound on the induced infinity-to-infinity gain of a discrete
/// system: truncated row-wise l1 sums of the impulse response plus a
/// geometric tail bound.
pub fn peak_to_peak_bound(ss: &StateSpace) -> Result<f64> {
    if ss.time_domain != TimeDomain::Discrete {
        return Err(Error::Config("peak-to-peak bound needs a discrete system".into()));
    }
    ss.require_stable()?;
    let mut sums = row_abs_sums(&ss.d);
    if ss.n_states() == 0 {
        return Ok(sums.max());
    }
    // s with |A^s| < 1, then sum_j |A^j B| <= sum_{r<s} |A^r B| / (1 - |A^s|)
    let mut s = 1usize;
    let mut as_ = ss.a.clone();
    while linalg::norm_inf(&as_) >= 0.5 && s < (1 << 24) {
        as_ = &as_ * &as_;
        s *= 2;
    }
    let contraction = linalg::norm_inf(&as_);
    if contraction >= 1.0 {
        return Err(Error::UnstableSystem(ss.stability_margin()));
    }
    let mut head = 0.0;
    let mut ar_b = ss.b.clone();
    for _ in 0..s {
        head += linalg::norm_inf(&ar_b);
        ar_b = &ss.a * ar_b;
    }
    let geo = head / (1.0 - contraction);

    let mut ca = ss.c.clone();
    let mut k = 0usize;
    loop {
        let tail = linalg::norm_inf(&ca) * geo;
        let partial = sums.max();
        if tail <= 1e-6 * partial || tail == 0.0 || k > 50_000_000 {
            return Ok(partial + tail);
        }
        sums += row_abs_sums(&(&ca * &ss.b));
        ca = &ca * &ss.a;
        k += 1;
    }
}

/// A known signal on `t >= 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Signal {
    Zero {
        channels: usize,
    },
    /// `amplitude_i sin(omega_i t + phase_i)` per channel.
    Sinusoid {
        amplitude: Vec<f64>,
        omega: Vec<f64>,
        #[serde(default)]
        phase: Vec<f64>,
    },
    /// Held samples, one row per instant `k dt`.
    Samples {
        dt: f64,
        values: Vec<Vec<f64>>,
        #[serde(default)]
        periodic: bool,
    },
}

impl Signal {
    pub fn channels(&self) -> usize {
        match self {
            Signal::Zero { channels } => *channels,
            Signal::Sinusoid { amplitude, .. } => amplitude.len(),
            Signal::Samples { values, .. } => values.first().map_or(0, |r| r.len()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Signal::Zero { .. } => Ok(()),
            Signal::Sinusoid {
                amplitude,
                omega,
                phase,
            } => {
                if omega.len() != amplitude.len() || (!phase.is_empty() && phase.len() != amplitude.len()) {
                    return Err(Error::Config("sinusoid fields must have one entry per channel".into()));
                }
                Ok(())
            }
            Signal::Samples { dt, values, .. } => {
                if *dt <= 0.0 || values.is_empty() {
                    return Err(Error::Config("sampled signal needs dt > 0 and at least one row".into()));
                }
                let w = values[0].len();
                if values.iter().any(|r| r.len() != w) {
                    return Err(Error::Config("sampled signal has ragged rows".into()));
                }
                Ok(())
            }
        }
    }

    pub fn value(&self, t: f64) -> DVector<f64> {
        match self {
            Signal::Zero { channels } => DVector::zeros(*channels),
            Signal::Sinusoid {
                amplitude,
                omega,
                phase,
            } => DVector::from_fn(amplitude.len(), |i, _| {
                amplitude[i] * (omega[i] * t + phase.get(i).copied().unwrap_or(0.0)).sin()
            }),
            Signal::Samples { dt, values, periodic } => {
                let k = ((t / dt) + 1e-9).floor().max(0.0) as usize;
                let k = if *periodic {
                    k % values.len()
                } else {
                    k.min(values.len() - 1)
                };
                DVector::from_column_slice(&values[k])
            }
        }
    }
}

/// Fault trajectory: constant, or `f_i(t) = sum_j p_ij phi_ij(t)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FaultSignal {
    Constant { values: Vec<f64> },
    Basis { basis: TvBasis, coeffs: Vec<Vec<f64>> },
}

impl FaultSignal {
    pub fn len(&self) -> usize {
        match self {
            FaultSignal::Constant { values } => values.len(),
            FaultSignal::Basis { coeffs, .. } => coeffs.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, FaultSignal::Constant { .. })
    }

    pub fn value(&self, t: f64) -> Vec<f64> {
        match self {
            FaultSignal::Constant { values } => values.clone(),
            FaultSignal::Basis { basis, coeffs } => coeffs
                .iter()
                .zip(&basis.per_fault)
                .map(|(p, idx)| {
                    p.iter()
                        .zip(idx)
                        .map(|(c, j)| c * basis.dictionary.signals[*j].value(t))
                        .sum()
                })
                .collect(),
        }
    }
}

/// Everything that defines one simulation run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub fault: FaultSignal,
    pub input: Signal,
    pub disturbance: Signal,
    pub sigma: f64,
    pub h: f64,
    pub t_end: f64,
    #[serde(default = "default_oversample")]
    pub oversample: usize,
    pub seed: u64,
}

fn default_oversample() -> usize {
    DEFAULT_OVERSAMPLE
}

impl ScenarioSpec {
    pub fn samples(&self) -> usize {
        (self.t_end / self.h + 1e-9).floor() as usize + 1
    }
}

/// Sampled plant signals together with the states of the filter banks.
///
/// Every filter `d^{-1} P` acting on `z` shares the companion bank driven
/// by `z`, so any number of filters can be read out after one run. Extra
/// banks are driven by `phi_k(t) z(t)` for time-varying regressors.
#[derive(Clone, Debug)]
pub struct BankRun {
    pub t: Vec<f64>,
    pub z: DMatrix<f64>,
    pub xi: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub bank: DMatrix<f64>,
    pub extra: Vec<DMatrix<f64>>,
    pub extra_signals: Vec<BasisSignal>,
    pub time_domain: TimeDomain,
    pub h: f64,
}

impl BankRun {
    /// Samples of `d^{-1} P z` (or of `d^{-1} P (phi z)` for an extra bank).
    pub fn readout(&self, d: &PolyMatrix, p: &PolyMatrix, extra: Option<usize>) -> Result<DMatrix<f64>> {
        let nz = self.z.ncols();
        if p.cols() != nz {
            return Err(Error::DimensionMismatch(format!(
                "filter has {} columns, z has {nz}",
                p.cols()
            )));
        }
        let ss = realize(d, p, self.time_domain, None)?;
        let states = match extra {
            None => &self.bank,
            Some(k) => &self.extra[k],
        };
        if states.ncols() != ss.n_states() {
            return Err(Error::DimensionMismatch("filter order differs from the bank".into()));
        }
        let mut out = states * ss.c.transpose();
        let mut zs = self.z.clone();
        if let Some(k) = extra {
            for (i, t) in self.t.iter().enumerate() {
                let phi = self.extra_signals[k].value(*t);
                zs.row_mut(i).scale_mut(phi);
            }
        }
        out += zs * ss.d.transpose();
        Ok(out)
    }

    /// Largest Euclidean norm of `[xi; z]` over the run.
    pub fn signal_peak(&self) -> f64 {
        (0..self.t.len())
            .map(|i| (self.xi.row(i).norm_squared() + self.z.row(i).norm_squared()).sqrt())
            .fold(0.0, f64::max)
    }
}

struct Plant {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    zx: DMatrix<f64>,
    zv: DMatrix<f64>,
}

fn plant_at(ss: &StateSpaceModel, f: &[f64]) -> Result<Plant> {
    let p = ss.perturb(f)?;
    let (a, b) = p.explicit()?;
    let (nx, nu, nd, nw, ny) = (p.n_x(), p.n_u(), p.n_d(), p.n_w(), p.n_y());
    let mut zx = DMatrix::zeros(ny + nu, nx);
    zx.view_mut((0, 0), (ny, nx)).copy_from(&p.c);
    let mut zv = DMatrix::zeros(ny + nu, nu + nd + nw);
    zv.view_mut((0, 0), (ny, nu)).copy_from(&p.d_u);
    zv.view_mut((0, nu), (ny, nd)).copy_from(&p.d_d);
    zv.view_mut((0, nu + nd), (ny, nw)).copy_from(&p.d_w);
    zv.view_mut((ny, 0), (nu, nu)).fill_with_identity();
    Ok(Plant { a, b, zx, zv })
}

/// Continuous (or one-step discrete) matrices of plant + banks.
fn augmented(p: &Plant, ac: &DMatrix<f64>, n_ord: usize, phis: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    let nx = p.a.nrows();
    let nz = p.zx.nrows();
    let nv = p.b.ncols();
    let nb = nz * n_ord;
    let total = nx + nb * (1 + phis.len());
    let mut a = DMatrix::zeros(total, total);
    let mut b = DMatrix::zeros(total, nv);
    a.view_mut((0, 0), (nx, nx)).copy_from(&p.a);
    b.view_mut((0, 0), (nx, nv)).copy_from(&p.b);
    if n_ord == 0 {
        return (a, b);
    }
    let gains = std::iter::once(1.0).chain(phis.iter().copied());
    for (bank, g) in gains.enumerate() {
        let r0 = nx + bank * nb;
        for j in 0..nz {
            let r = r0 + j * n_ord;
            a.view_mut((r, r), (n_ord, n_ord)).copy_from(ac);
            // the last state of each chain is driven by z_j
            let last = r + n_ord - 1;
            for c in 0..nx {
                a[(last, c)] = g * p.zx[(j, c)];
            }
            for c in 0..nv {
                b[(last, c)] = g * p.zv[(j, c)];
            }
        }
    }
    (a, b)
}

/// Simulates the fault-perturbed plant and the filter banks.
///
/// Continuous plants are discretized exactly at `h / oversample` with
/// inputs and disturbance held over each sub-step; noise is drawn once per
/// sample and held over the sample interval.
pub fn simulate_bank(model: &DaeModel, d: &PolyMatrix, spec: &ScenarioSpec, extra: &[BasisSignal]) -> Result<BankRun> {
    let ss = model
        .state_space
        .as_ref()
        .ok_or_else(|| Error::Config("simulation needs the state-space form of the model".into()))?;
    spec.input.validate()?;
    spec.disturbance.validate()?;
    let (nx, nu, nd, nw) = (ss.n_x(), ss.n_u(), ss.n_d(), ss.n_w());
    if spec.input.channels() != nu || spec.disturbance.channels() != nd {
        return Err(Error::DimensionMismatch(format!(
            "input has {} channels (model {nu}), disturbance {} (model {nd})",
            spec.input.channels(),
            spec.disturbance.channels()
        )));
    }
    if spec.fault.len() != ss.faults.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} fault signals for {} faults",
            spec.fault.len(),
            ss.faults.len()
        )));
    }
    if !(spec.h > 0.0) || !(spec.t_end >= 0.0) {
        return Err(Error::Config("h must be positive and t_end non-negative".into()));
    }
    let (_, ac) = companion(d)?;
    let n_ord = d.degree();
    let td = ss.time_domain;
    let sub = match td {
        TimeDomain::Continuous => spec.oversample.max(1),
        TimeDomain::Discrete => 1,
    };
    let hs = spec.h / sub as f64;
    let nt = spec.samples();
    let nz = ss.n_y() + nu;
    let nb = nz * n_ord;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise: Vec<DVector<f64>> = (0..nt)
        .map(|_| {
            if spec.sigma == 0.0 {
                DVector::zeros(nw)
            } else {
                DVector::from_fn(nw, |_, _| {
                    let x: f64 = StandardNormal.sample(&mut rng);
                    spec.sigma * x
                })
            }
        })
        .collect();

    let step = |t0: f64, f: &[f64]| -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let p = plant_at(ss, f)?;
        let phis: Vec<f64> = extra.iter().map(|s| s.value(t0 + 0.5 * hs)).collect();
        let (a, b) = augmented(&p, &ac, n_ord, &phis);
        Ok(match td {
            TimeDomain::Continuous => zoh(&a, &b, hs),
            TimeDomain::Discrete => (a, b),
        })
    };
    let varying = !spec.fault.is_constant() || !extra.is_empty();
    let fixed = if varying {
        None
    } else {
        Some(step(0.0, &spec.fault.value(0.0))?)
    };

    let total = nx + nb * (1 + extra.len());
    let mut x = DVector::<f64>::zeros(total);
    let mut run = BankRun {
        t: Vec::with_capacity(nt),
        z: DMatrix::zeros(nt, nz),
        xi: DMatrix::zeros(nt, nx + nd),
        f: DMatrix::zeros(nt, ss.faults.len()),
        bank: DMatrix::zeros(nt, nb),
        extra: vec![DMatrix::zeros(nt, nb); extra.len()],
        extra_signals: extra.to_vec(),
        time_domain: td,
        h: spec.h,
    };
    let v_at = |t: f64, k: usize| {
        let mut v = DVector::zeros(nu + nd + nw);
        v.rows_mut(0, nu).copy_from(&spec.input.value(t));
        v.rows_mut(nu, nd).copy_from(&spec.disturbance.value(t));
        v.rows_mut(nu + nd, nw).copy_from(&noise[k]);
        v
    };
    for k in 0..nt {
        let t = k as f64 * spec.h;
        let fk = spec.fault.value(t);
        let p = plant_at(ss, &fk)?;
        let v = v_at(t, k);
        let xp = x.rows(0, nx).into_owned();
        let z = &p.zx * &xp + &p.zv * &v;
        run.t.push(t);
        run.z.row_mut(k).copy_from(&z.transpose());
        run.xi.view_mut((k, 0), (1, nx)).copy_from(&xp.transpose());
        run.xi.view_mut((k, nx), (1, nd)).copy_from(&v.rows(nu, nd).transpose());
        for (i, fi) in fk.iter().enumerate() {
            run.f[(k, i)] = *fi;
        }
        run.bank.row_mut(k).copy_from(&x.rows(nx, nb).transpose());
        for (e, m) in run.extra.iter_mut().enumerate() {
            m.row_mut(k).copy_from(&x.rows(nx + nb * (1 + e), nb).transpose());
        }
        if k + 1 == nt {
            break;
        }
        for j in 0..sub {
            let t0 = t + j as f64 * hs;
            let vj = v_at(t0, k);
            let (ad, bd) = match &fixed {
                Some(m) => (m.0.clone(), m.1.clone()),
                None => step(t0, &spec.fault.value(t0 + 0.5 * hs))?,
            };
            x = ad * x + bd * vj;
        }
    }
    Ok(run)
}

/// Which external signal drives a plant-filter series connection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Channel {
    Input,
    Noise,
}

/// The nominal plant in series with `d^{-1} P` acting on `z`, seen from
/// either the input `u` or the noise `w`. The result lives in the model's
/// time domain.
pub fn plant_filter_series(model: &DaeModel, d: &PolyMatrix, p: &PolyMatrix, channel: Channel) -> Result<StateSpace> {
    let ss = model
        .state_space
        .as_ref()
        .ok_or_else(|| Error::Config("the model has no state-space form".into()))?;
    let plant = plant_at(ss, &vec![0.0; ss.faults.len()])?;
    let (nu, nd, nw) = (ss.n_u(), ss.n_d(), ss.n_w());
    let (start, width) = match channel {
        Channel::Input => (0, nu),
        Channel::Noise => (nu + nd, nw),
    };
    let bp = plant.b.columns(start, width).into_owned();
    let zv = plant.zv.columns(start, width).into_owned();
    let filt = realize(d, p, model.time_domain, None)?;
    let (nx, nf) = (plant.a.nrows(), filt.n_states());
    let mut a = DMatrix::zeros(nx + nf, nx + nf);
    a.view_mut((0, 0), (nx, nx)).copy_from(&plant.a);
    a.view_mut((nx, 0), (nf, nx)).copy_from(&(&filt.b * &plant.zx));
    a.view_mut((nx, nx), (nf, nf)).copy_from(&filt.a);
    let b = linalg::vcat(&[&bp, &(&filt.b * &zv)]);
    let c = linalg::hcat(&[&(&filt.d * &plant.zx), &filt.c]);
    let dd = &filt.d * &zv;
    StateSpace::new(a, b, c, dd, model.time_domain, None)
}

/// Sampled-data version of a system at interval `h`: ZOH discretization
/// for continuous systems, the system itself (tagged with `h`) otherwise.
pub fn sampled(ss: &StateSpace, h: f64) -> Result<StateSpace> {
    match ss.time_domain {
        TimeDomain::Continuous => c2d_exact(ss, h),
        TimeDomain::Discrete => {
            let mut out = ss.clone();
            out.h = Some(h);
            Ok(out)
        }
    }
}

#[derive(Clone, Debug)]
pub struct ScenarioResult {
    pub t: Vec<f64>,
    pub z: DMatrix<f64>,
    pub r: DVector<f64>,
    pub e: DMatrix<f64>,
    pub xi: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub seed: u64,
    /// Largest Euclidean norm of `[xi; z]` over the run.
    pub signal_peak: f64,
}

/// Runs the plant and reads out `r = d^{-1} N L z` and `e = d^{-1} M z`.
pub fn simulate_scenario(model: &DaeModel, gen: &GeneratorSet, spec: &ScenarioSpec) -> Result<ScenarioResult> {
    let d = gen.denominator()?;
    let run = simulate_bank(model, d, spec, &[])?;
    let nl = gen.residual_numerator(model)?;
    let r = run.readout(d, &nl, None)?;
    let e = run.readout(d, &gen.m, None)?;
    Ok(ScenarioResult {
        signal_peak: run.signal_peak(),
        t: run.t,
        z: run.z,
        r: r.column(0).into_owned(),
        e,
        xi: run.xi,
        f: run.f,
        seed: spec.seed,
    })
}

/// Expanded regressors for faults with a time-varying signature.
///
/// Column order follows `basis.per_fault`: for fault `i`, one column per
/// listed dictionary member `j`, holding `d^{-1} N sum_k G'_{ij,k} (phi_k z)`.
pub fn tv_regressors(
    model: &DaeModel,
    gen: &GeneratorSet,
    basis: &TvBasis,
    spec: &ScenarioSpec,
) -> Result<(ScenarioResult, DMatrix<f64>)> {
    let d = gen.denominator()?;
    if basis.per_fault.len() != gen.g.len() {
        return Err(Error::DimensionMismatch(format!(
            "basis lists {} faults, model has {}",
            basis.per_fault.len(),
            gen.g.len()
        )));
    }
    let dict = &basis.dictionary;
    let is_const = |s: &BasisSignal| matches!(s, BasisSignal::Constant | BasisSignal::Polynomial { power: 0 });
    let extra_idx: Vec<usize> = (0..dict.signals.len())
        .filter(|k| !is_const(&dict.signals[*k]))
        .collect();
    let extra: Vec<BasisSignal> = extra_idx.iter().map(|k| dict.signals[*k].clone()).collect();
    let run = simulate_bank(model, d, spec, &extra)?;
    let cols: usize = basis.per_fault.iter().map(|v| v.len()).sum();
    let mut e = DMatrix::zeros(run.t.len(), cols);
    let mut col = 0;
    for (i, members) in basis.per_fault.iter().enumerate() {
        for &s in members {
            let terms = tv_rewrite(&gen.g[i], dict, s, model.time_domain, spec.h)?;
            let mut acc = DVector::zeros(run.t.len());
            for (gp, k) in terms {
                let p = gen.n.mul(&gp)?;
                let bank = extra_idx.iter().position(|x| *x == k);
                acc += run.readout(d, &p, bank)?.column(0);
            }
            e.set_column(col, &acc);
            col += 1;
        }
    }
    let nl = gen.residual_numerator(model)?;
    let r = run.readout(d, &nl, None)?;
    let m = run.readout(d, &gen.m, None)?;
    let res = ScenarioResult {
        signal_peak: run.signal_peak(),
        t: run.t,
        z: run.z,
        r: r.column(0).into_owned(),
        e: m,
        xi: run.xi,
        f: run.f,
        seed: spec.seed,
    };
    Ok((res, e))
}

impl ScenarioResult {
    pub fn samples(&self) -> usize {
        self.t.len()
    }

    /// Writes `t, z..., r, e..., f...` rows plus a `<stem>.seed.json` sidecar.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut header = vec!["t".to_string()];
        header.extend((0..self.z.ncols()).map(|i| format!("z{}", i + 1)));
        header.push("r".into());
        header.extend((0..self.e.ncols()).map(|i| format!("e{}", i + 1)));
        header.extend((0..self.f.ncols()).map(|i| format!("f{}", i + 1)));
        let rows: Vec<Vec<f64>> = (0..self.samples())
            .map(|k| {
                let mut row = vec![self.t[k]];
                row.extend(self.z.row(k).iter());
                row.push(self.r[k]);
                row.extend(self.e.row(k).iter());
                row.extend(self.f.row(k).iter());
                row
            })
            .collect();
        crate::io::write_csv(path, &header, &rows)?;
        let sidecar = path.with_extension("seed.json");
        std::fs::write(
            sidecar,
            serde_json::to_string_pretty(&serde_json::json!({ "noise_seed": self.seed }))?,
        )?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar_ss(a: f64, b: f64, c: f64, d: f64, td: TimeDomain, h: Option<f64>) -> StateSpace {
        StateSpace::new(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, b),
            DMatrix::from_element(1, 1, c),
            DMatrix::from_element(1, 1, d),
            td,
            h,
        )
        .unwrap()
    }

    #[test]
    fn realize_first_order_lag() {
        let ss = realize(
            &PolyMatrix::scalar(&[1.0, 1.0]),
            &PolyMatrix::scalar(&[1.0]),
            TimeDomain::Continuous,
            None,
        )
        .unwrap();
        assert_eq!(ss.a[(0, 0)], -1.0);
        assert_eq!(ss.b[(0, 0)], 1.0);
        assert_eq!(ss.c[(0, 0)], 1.0);
        assert_eq!(ss.d[(0, 0)], 0.0);
    }

    #[test]
    fn realize_feedthrough() {
        let ss = realize(
            &PolyMatrix::scalar(&[1.0, 1.0]),
            &PolyMatrix::scalar(&[0.0, 1.0]),
            TimeDomain::Continuous,
            None,
        )
        .unwrap();
        assert_eq!(ss.d[(0, 0)], 1.0);
        assert_eq!(ss.c[(0, 0)], -1.0);
    }

    #[test]
    fn realize_rejects_improper_and_unstable() {
        let d = PolyMatrix::scalar(&[1.0, 1.0]);
        assert!(matches!(
            realize(&d, &PolyMatrix::scalar(&[0.0, 0.0, 1.0]), TimeDomain::Continuous, None),
            Err(Error::ImproperFilter { .. })
        ));
        assert!(matches!(
            realize(
                &PolyMatrix::scalar(&[-1.0, 1.0]),
                &PolyMatrix::scalar(&[1.0]),
                TimeDomain::Continuous,
                None
            ),
            Err(Error::UnstableSystem(_))
        ));
    }

    #[test]
    fn c2d_closed_forms() {
        let i = c2d_exact(&scalar_ss(0.0, 1.0, 1.0, 0.0, TimeDomain::Continuous, None), 0.3).unwrap();
        assert!((i.a[(0, 0)] - 1.0).abs() < 1e-14 && (i.b[(0, 0)] - 0.3).abs() < 1e-14);
        let l = c2d_exact(&scalar_ss(-1.0, 1.0, 1.0, 0.0, TimeDomain::Continuous, None), 1.0).unwrap();
        let e = (-1f64).exp();
        assert!((l.a[(0, 0)] - e).abs() < 1e-14 && (l.b[(0, 0)] - (1.0 - e)).abs() < 1e-14);
        let h = 0.2;
        let dbl = StateSpace::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            DMatrix::from_column_slice(2, 1, &[0.0, 1.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DMatrix::zeros(1, 1),
            TimeDomain::Continuous,
            None,
        )
        .unwrap();
        let dd = c2d_exact(&dbl, h).unwrap();
        assert!((dd.a.clone() - DMatrix::from_row_slice(2, 2, &[1.0, h, 0.0, 1.0])).norm() < 1e-14);
        assert!((dd.b.clone() - DMatrix::from_column_slice(2, 1, &[h * h / 2.0, h])).norm() < 1e-14);
    }

    #[test]
    fn simulate_impulse_gives_markov_parameters() {
        let ss = StateSpace::new(
            DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.0, 0.3]),
            DMatrix::from_row_slice(2, 1, &[1.0, 2.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, -1.0]),
            DMatrix::from_element(1, 1, 0.7),
            TimeDomain::Discrete,
            Some(1.0),
        )
        .unwrap();
        let mut u = DMatrix::zeros(6, 1);
        u[(0, 0)] = 1.0;
        let y = simulate(&ss, &u, &DVector::zeros(2)).unwrap();
        for (k, m) in ss.markov(6).iter().enumerate() {
            assert!((y[(k, 0)] - m[(0, 0)]).abs() < 1e-14);
        }
        let zero = simulate(&ss, &DMatrix::zeros(5, 1), &DVector::zeros(2)).unwrap();
        assert_eq!(zero.norm(), 0.0);
    }

    #[test]
    fn norms_of_first_order_discrete_lag() {
        let a = 0.6;
        let ss = scalar_ss(a, 1.0, 1.0, 0.0, TimeDomain::Discrete, Some(1.0));
        assert!((hinf_f_norm(&ss).unwrap() - 1.0 / (1.0 - a)).abs() < 1e-4 / (1.0 - a));
        assert!((h2_norm(&ss).unwrap() - 1.0 / (1.0 - a * a).sqrt()).abs() < 1e-10);
        let p = peak_to_peak_bound(&ss).unwrap();
        assert!(p >= 1.0 / (1.0 - a) - 1e-12 && p <= (1.0 / (1.0 - a)) * (1.0 + 2e-6));
    }

    #[test]
    fn norms_of_static_gain_and_delay() {
        let d = DMatrix::from_row_slice(2, 2, &[1.0, -2.0, 0.5, 3.0]);
        let ss = StateSpace::static_gain(d.clone(), TimeDomain::Discrete, Some(1.0));
        assert!((hinf_f_norm(&ss).unwrap() - d.norm()).abs() < 1e-14);
        assert!((h2_norm(&ss).unwrap() - d.norm()).abs() < 1e-14);
        assert!((peak_to_peak_bound(&ss).unwrap() - 3.5).abs() < 1e-14);
        let delay = scalar_ss(0.0, 1.0, 1.0, 0.0, TimeDomain::Discrete, Some(1.0));
        assert!((h2_norm(&delay).unwrap() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn hinf_f_of_row_system() {
        // [1/(z-0.5), 2/(z+0.3)]: the peak of |T1|^2 + |T2|^2 over a dense grid
        let ss = StateSpace::new(
            DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, -0.3]),
            DMatrix::identity(2, 2),
            DMatrix::from_row_slice(1, 2, &[1.0, 2.0]),
            DMatrix::zeros(1, 2),
            TimeDomain::Discrete,
            Some(1.0),
        )
        .unwrap();
        let brute = (0..=200_000)
            .map(|i| {
                let w = std::f64::consts::PI * i as f64 / 200_000.0;
                let z = Complex64::new(0.0, w).exp();
                ((1.0 / (z - 0.5)).norm_sqr() + (2.0 / (z + 0.3)).norm_sqr()).sqrt()
            })
            .fold(0.0, f64::max);
        let got = hinf_f_norm(&ss).unwrap();
        assert!((got - brute).abs() < 1e-4 * brute, "{got} vs {brute}");
    }

    #[test]
    fn continuous_norms() {
        let ss = scalar_ss(-2.0, 1.0, 1.0, 0.0, TimeDomain::Continuous, None);
        assert!((hinf_f_norm(&ss).unwrap() - 0.5).abs() < 1e-6);
        assert!((h2_norm(&ss).unwrap() - 0.5).abs() < 1e-12);
        let unstable = scalar_ss(0.1, 1.0, 1.0, 0.0, TimeDomain::Continuous, None);
        assert!(matches!(hinf_f_norm(&unstable), Err(Error::UnstableSystem(_))));
    }

    #[test]
    fn signals() {
        let s = Signal::Samples {
            dt: 0.5,
            values: vec![vec![1.0], vec![2.0]],
            periodic: true,
        };
        assert_eq!(s.value(0.49)[0], 1.0);
        assert_eq!(s.value(0.5)[0], 2.0);
        assert_eq!(s.value(1.0)[0], 1.0);
        let sin = Signal::Sinusoid {
            amplitude: vec![2.0],
            omega: vec![1.0],
            phase: vec![],
        };
        assert!((sin.value(1.0)[0] - 2.0 * 1f64.sin()).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn realization_matches_rational_function(
            p in prop::collection::vec(-2.0f64..2.0, 6),
            re in prop::collection::vec(0.1f64..5.0, 2),
            pts in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 64),
        ) {
            // d = (q + re0)(q + re1), P is 1x2 of degree 2
            let d = PolyMatrix::scalar(&[re[0] * re[1], re[0] + re[1], 1.0]);
            let pm = PolyMatrix::row_from_entries(&[p[0..3].to_vec(), p[3..6].to_vec()]);
            let ss = realize(&d, &pm, TimeDomain::Continuous, None).unwrap();
            for (x, y) in pts {
                let s = Complex64::new(x, y);
                let dv = d.eval(s)[(0, 0)];
                if dv.norm() < 1e-3 { continue; }
                let want = pm.eval(s).map(|v| v / dv);
                let got = ss.eval(s);
                let scale = want.iter().map(|v| v.norm()).fold(1.0, f64::max);
                for (a, b) in got.iter().zip(want.iter()) {
                    prop_assert!((a - b).norm() <= 1e-8 * scale);
                }
            }
        }

        #[test]
        fn c2d_of_stable_is_schur(diag in prop::collection::vec(-5.0f64..-0.01, 3), off in -2.0f64..2.0, h in 0.01f64..1.0) {
            let mut a = DMatrix::from_diagonal(&DVector::from_vec(diag));
            a[(0, 1)] = off;
            let ss = StateSpace::new(a, DMatrix::from_element(3, 1, 1.0), DMatrix::from_element(1, 3, 1.0), DMatrix::zeros(1, 1), TimeDomain::Continuous, None).unwrap();
            let dss = c2d_exact(&ss, h).unwrap();
            prop_assert!(dss.is_stable());
        }

        #[test]
        fn simulate_is_linear(u1 in prop::collection::vec(-1.0f64..1.0, 20), u2 in prop::collection::vec(-1.0f64..1.0, 20)) {
            let ss = StateSpace::new(
                DMatrix::from_row_slice(2, 2, &[0.9, 0.2, -0.1, 0.5]),
                DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 1.0]),
                DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
                DMatrix::from_row_slice(1, 2, &[0.1, 0.0]),
                TimeDomain::Discrete, Some(1.0)).unwrap();
            let a = DMatrix::from_row_slice(10, 2, &u1);
            let b = DMatrix::from_row_slice(10, 2, &u2);
            let x0 = DVector::zeros(2);
            let ya = simulate(&ss, &a, &x0).unwrap();
            let yb = simulate(&ss, &b, &x0).unwrap();
            let yab = simulate(&ss, &(&a + &b), &x0).unwrap();
            prop_assert!((yab - ya - yb).norm() < 1e-10);
        }
    }
}
