//! Residual and regressor generator design.
//!
//! The residual generator is `r = d^{-1} N L z` with `N H = 0`; the regressor
//! generator is `e = d^{-1} M z` whose i-th row is `N G_i`.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{DaeModel, TimeDomain};
use crate::polymat::{PolyMatrix, TOL_RANK};

pub const DEFAULT_TRIALS: usize = 200;
/// Degree searched for `H^dagger` when none is given.
pub const DEFAULT_INVERSE_DEGREE: usize = 6;

/// A designed residual/regressor pair together with the auxiliary
/// polynomial matrices needed for the error analysis.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeneratorSet {
    /// Stable denominator shared by all filters; absent until chosen.
    pub d: Option<PolyMatrix>,
    pub n: PolyMatrix,
    pub m: PolyMatrix,
    pub g: Vec<PolyMatrix>,
    /// `j[i][k]` couples faults `i` and `k` in the second-order remainder.
    pub j: Vec<Vec<PolyMatrix>>,
    pub f: Vec<PolyMatrix>,
    pub hdagger: PolyMatrix,
    pub s_min_blkrow_m: f64,
    pub trials_used: usize,
    pub seed: u64,
    pub null_dim: usize,
    pub degree: usize,
}

impl GeneratorSet {
    pub fn denominator(&self) -> Result<&PolyMatrix> {
        self.d
            .as_ref()
            .ok_or_else(|| Error::Config("generator set has no denominator".into()))
    }

    /// Degree the denominator must reach for every filter to be proper.
    pub fn required_denominator_degree(&self, model: &DaeModel) -> Result<usize> {
        let nl = self.n.mul(&model.l)?;
        let mut need = nl.degree();
        for i in 0..self.m.rows() {
            need = need.max(self.m.row_degree(i));
        }
        Ok(need)
    }

    /// Attaches `d` after checking it is stable and high enough in degree.
    pub fn with_denominator(mut self, model: &DaeModel, d: PolyMatrix) -> Result<Self> {
        let need = self.required_denominator_degree(model)?;
        if d.degree() < need {
            return Err(Error::InsufficientDegree { have: d.degree(), need });
        }
        self.d = Some(d);
        Ok(self)
    }

    /// `N(q) L(q)`, the numerator of the residual filter.
    pub fn residual_numerator(&self, model: &DaeModel) -> Result<PolyMatrix> {
        self.n.mul(&model.l)
    }

    /// `-N(q) W(q)`, the noise channel of the residual.
    pub fn noise_numerator(&self, model: &DaeModel) -> Result<PolyMatrix> {
        Ok(self.n.mul(&model.w)?.scale(-1.0))
    }
}

/// `G_i = H'_i H^dagger L - L'_i` for every fault.
pub fn compute_g(model: &DaeModel, hdagger: &PolyMatrix) -> Result<Vec<PolyMatrix>> {
    let hl = hdagger.mul(&model.l)?;
    model.faults.iter().map(|f| f.h.mul(&hl)?.sub(&f.l)).collect()
}

/// `J_ik = [-N H'_i H^dagger H'_k, -N H'_i H^dagger L'_k]` and `F_i = -N H'_i H^dagger W`.
pub fn compute_jf(
    n: &PolyMatrix,
    model: &DaeModel,
    hdagger: &PolyMatrix,
) -> Result<(Vec<Vec<PolyMatrix>>, Vec<PolyMatrix>)> {
    let mut j = Vec::with_capacity(model.m());
    let mut f = Vec::with_capacity(model.m());
    for fi in &model.faults {
        let left = n.mul(&fi.h)?.mul(hdagger)?.scale(-1.0);
        let row: Result<Vec<PolyMatrix>> = model
            .faults
            .iter()
            .map(|fk| {
                let a = left.mul(&fk.h)?;
                let b = left.mul(&fk.l)?;
                PolyMatrix::block(&[vec![&a, &b]])
            })
            .collect();
        j.push(row?);
        f.push(left.mul(&model.w)?);
    }
    Ok((j, f))
}

/// Smallest annihilator degree with a nontrivial left null space.
pub fn default_degree(model: &DaeModel) -> Result<usize> {
    let cap = model.n_xi() + model.h.degree();
    (0..=cap)
        .find(|&k| model.h.left_null_space(k, TOL_RANK).nrows() >= 1)
        .ok_or(Error::NoAnnihilator { degree: cap })
}

/// Scales a row to unit norm with its largest-magnitude entry positive.
fn normalize_row(v: &mut DMatrix<f64>) {
    let nrm = v.norm();
    if nrm > 0.0 {
        *v /= nrm;
    }
    let mut best = 0;
    for i in 0..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        *v *= -1.0;
    }
}

fn m_blkrow(n_row: &DMatrix<f64>, toeps: &[DMatrix<f64>], width: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(toeps.len(), width);
    for (i, t) in toeps.iter().enumerate() {
        let r = n_row * t;
        out.view_mut((i, 0), (1, r.ncols())).copy_from(&r);
    }
    out
}

fn s_min(m: &DMatrix<f64>) -> f64 {
    let s = linalg::singular_values(m);
    if s.len() < m.nrows() {
        0.0
    } else {
        s[m.nrows() - 1]
    }
}

/// Designs `N` and `M` by Monte-Carlo search over the annihilator space.
///
/// `degree = None` picks the smallest degree with a nontrivial annihilator.
/// Trials draw seeded unit vectors from independent streams and the best
/// candidate (largest `s_min(blkrow(M))`, ties by index) is kept.
pub fn design(model: &DaeModel, degree: Option<usize>, trials: usize, seed: u64) -> Result<GeneratorSet> {
    let obs = model.check_nominal_observability(DEFAULT_INVERSE_DEGREE);
    let hdagger = match obs.hdagger {
        Some(h) => h,
        None => {
            return Err(Error::NoLeftInverse {
                k_max: obs.k_max,
                best_residual: obs.best_residual,
            })
        }
    };
    design_with_inverse(model, &hdagger, degree, trials, seed)
}

pub fn design_with_inverse(
    model: &DaeModel,
    hdagger: &PolyMatrix,
    degree: Option<usize>,
    trials: usize,
    seed: u64,
) -> Result<GeneratorSet> {
    let k = match degree {
        Some(k) => k,
        None => default_degree(model)?,
    };
    let nh = model.h.left_null_space(k, TOL_RANK);
    let b = nh.nrows();
    if b == 0 {
        return Err(Error::NoAnnihilator { degree: k });
    }
    let g = compute_g(model, hdagger)?;
    let toeps: Vec<DMatrix<f64>> = g.iter().map(|gi| gi.toeplitz(k + 1)).collect();
    let width = toeps.iter().map(|t| t.ncols()).max().unwrap_or(0);

    let evaluate = |mut row: DMatrix<f64>| {
        normalize_row(&mut row);
        let s = s_min(&m_blkrow(&row, &toeps, width));
        (s, row)
    };

    let (best_s, best_row, used) = if b == 1 {
        let (s, row) = evaluate(nh.clone());
        (s, row, 1)
    } else {
        let trials = trials.max(1);
        let results: Vec<(f64, DMatrix<f64>)> = (0..trials)
            .into_par_iter()
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(t as u64);
                let v = DMatrix::from_fn(1, b, |_, _| StandardNormal.sample(&mut rng));
                evaluate(&v * &nh)
            })
            .collect();
        let mut best = 0;
        for (i, r) in results.iter().enumerate() {
            if r.0 > results[best].0 {
                best = i;
            }
        }
        let (s, row) = results[best].clone();
        (s, row, trials)
    };

    let mb = m_blkrow(&best_row, &toeps, width);
    let s_max = linalg::singular_values(&mb).first().copied().unwrap_or(0.0);
    if s_max == 0.0 || best_s <= TOL_RANK * s_max {
        return Err(Error::RankDeficientM {
            degree: k,
            s_min: best_s,
        });
    }
    let n = PolyMatrix::from_blkrow(1, model.n_r(), &best_row)?;
    let rows: Vec<PolyMatrix> = g.iter().map(|gi| n.mul(gi)).collect::<Result<_>>()?;
    let row_refs: Vec<Vec<&PolyMatrix>> = rows.iter().map(|r| vec![r]).collect();
    let m = PolyMatrix::block(&row_refs)?;
    let (j, f) = compute_jf(&n, model, hdagger)?;
    Ok(GeneratorSet {
        d: None,
        n,
        m,
        g,
        j,
        f,
        hdagger: hdagger.clone(),
        s_min_blkrow_m: best_s,
        trials_used: used,
        seed,
        null_dim: b,
        degree: k,
    })
}

/// Monic `prod (q - p)`, optionally scaled to unit DC gain.
///
/// Complex poles must appear with their conjugates.
pub fn make_denominator(
    poles: &[Complex64],
    normalize_dc: bool,
    time_domain: TimeDomain,
    required_degree: usize,
) -> Result<PolyMatrix> {
    for p in poles {
        let stable = match time_domain {
            TimeDomain::Continuous => p.re < 0.0,
            TimeDomain::Discrete => p.norm() < 1.0,
        };
        if !stable {
            return Err(Error::UnstablePole(format!("{p}")));
        }
    }
    if poles.len() < required_degree {
        return Err(Error::InsufficientDegree {
            have: poles.len(),
            need: required_degree,
        });
    }
    let mut c = vec![Complex64::new(1.0, 0.0)];
    for p in poles {
        let mut next = vec![Complex64::new(0.0, 0.0); c.len() + 1];
        for (i, ci) in c.iter().enumerate() {
            next[i + 1] += ci;
            next[i] -= ci * p;
        }
        c = next;
    }
    let scale = c.iter().map(|z| z.norm()).fold(0.0, f64::max);
    if c.iter().any(|z| z.im.abs() > 1e-9 * scale) {
        return Err(Error::Config("complex poles must come in conjugate pairs".into()));
    }
    let mut re: Vec<f64> = c.iter().map(|z| z.re).collect();
    if normalize_dc {
        let dc = match time_domain {
            TimeDomain::Continuous => re[0],
            TimeDomain::Discrete => re.iter().sum(),
        };
        for x in &mut re {
            *x /= dc;
        }
    }
    Ok(PolyMatrix::scalar(&re))
}

/// Moves the linearization point by `f_hat`; the caller re-runs [`design`].
pub fn gauss_newton_update(model: &DaeModel, f_hat: &[f64]) -> Result<DaeModel> {
    model.perturb(f_hat)
}

/// A member of a time-varying basis dictionary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BasisSignal {
    Constant,
    /// `t^power`
    Polynomial {
        power: u32,
    },
    Sin {
        omega: f64,
    },
    Cos {
        omega: f64,
    },
    /// Held samples `values[k]` on `[k dt, (k+1) dt)`, last value held afterwards.
    Sampled {
        values: Vec<f64>,
        dt: f64,
    },
}

impl BasisSignal {
    pub fn value(&self, t: f64) -> f64 {
        match self {
            BasisSignal::Constant => 1.0,
            BasisSignal::Polynomial { power } => t.powi(*power as i32),
            BasisSignal::Sin { omega } => (omega * t).sin(),
            BasisSignal::Cos { omega } => (omega * t).cos(),
            BasisSignal::Sampled { values, dt } => {
                if values.is_empty() {
                    return 0.0;
                }
                let k = (t / dt).floor().max(0.0) as usize;
                values[k.min(values.len() - 1)]
            }
        }
    }
}

/// Dictionary of basis signals closed under differentiation (continuous)
/// or the backward shift `phi(t - h)` (discrete).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TvDictionary {
    pub signals: Vec<BasisSignal>,
    /// Optional user closure: row `j` expands the derivative or backward
    /// shift of signal `j` as `(index, coefficient)` pairs. Required when
    /// the dictionary contains sampled signals.
    #[serde(default)]
    pub closure: Option<Vec<Vec<(usize, f64)>>>,
}

/// Per-fault basis: `f_i(t) = sum_j p_ij phi_{index_ij}(t)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TvBasis {
    pub dictionary: TvDictionary,
    pub per_fault: Vec<Vec<usize>>,
}

impl TvDictionary {
    fn find(&self, s: &BasisSignal) -> Option<usize> {
        self.signals.iter().position(|x| match (x, s) {
            (BasisSignal::Sin { omega: a }, BasisSignal::Sin { omega: b })
            | (BasisSignal::Cos { omega: a }, BasisSignal::Cos { omega: b }) => {
                (a - b).abs() <= 1e-12 * a.abs().max(1.0)
            }
            _ => x == s,
        })
    }

    fn need_constant(&self, of: usize) -> Result<usize> {
        self.find(&BasisSignal::Constant)
            .or_else(|| self.find(&BasisSignal::Polynomial { power: 0 }))
            .ok_or_else(|| Error::ClosureIncomplete(format!("a constant member (needed by member {of}) is missing")))
    }

    fn need(&self, s: &BasisSignal, of: usize) -> Result<usize> {
        self.find(s)
            .ok_or_else(|| Error::ClosureIncomplete(format!("{s:?} (needed by member {of}) is not in the dictionary")))
    }

    /// Closure table for the given time domain (`h` is the shift for the
    /// discrete case).
    pub fn closure_table(&self, time_domain: TimeDomain, h: f64) -> Result<Vec<Vec<(usize, f64)>>> {
        if let Some(c) = &self.closure {
            if c.len() != self.signals.len() {
                return Err(Error::ClosureIncomplete(format!(
                    "closure has {} rows for {} signals",
                    c.len(),
                    self.signals.len()
                )));
            }
            if let Some(bad) = c.iter().flatten().find(|(i, _)| *i >= self.signals.len()) {
                return Err(Error::ClosureIncomplete(format!("index {} out of range", bad.0)));
            }
            return Ok(c.clone());
        }
        let mut table = Vec::with_capacity(self.signals.len());
        for (j, s) in self.signals.iter().enumerate() {
            let row = match (time_domain, s) {
                (_, BasisSignal::Sampled { .. }) => {
                    return Err(Error::ClosureIncomplete(format!(
                        "sampled member {j} needs a user closure table"
                    )))
                }
                (TimeDomain::Continuous, BasisSignal::Constant) => vec![],
                (TimeDomain::Discrete, BasisSignal::Constant) => vec![(j, 1.0)],
                (TimeDomain::Continuous, BasisSignal::Polynomial { power: 0 }) => vec![],
                (TimeDomain::Continuous, BasisSignal::Polynomial { power }) => {
                    let lower = if *power == 1 {
                        self.need_constant(j)?
                    } else {
                        self.need(&BasisSignal::Polynomial { power: power - 1 }, j)?
                    };
                    vec![(lower, *power as f64)]
                }
                (TimeDomain::Discrete, BasisSignal::Polynomial { power }) => {
                    // (t - h)^p = sum_i C(p, i) t^i (-h)^(p - i)
                    let p = *power;
                    let mut row = Vec::new();
                    let mut binom = 1.0;
                    for i in (0..=p).rev() {
                        let idx = if i == p {
                            j
                        } else if i == 0 {
                            self.need_constant(j)?
                        } else {
                            self.need(&BasisSignal::Polynomial { power: i }, j)?
                        };
                        row.push((idx, binom * (-h).powi((p - i) as i32)));
                        binom = binom * i as f64 / (p - i + 1) as f64;
                    }
                    row
                }
                (TimeDomain::Continuous, BasisSignal::Sin { omega }) => {
                    vec![(self.need(&BasisSignal::Cos { omega: *omega }, j)?, *omega)]
                }
                (TimeDomain::Continuous, BasisSignal::Cos { omega }) => {
                    vec![(self.need(&BasisSignal::Sin { omega: *omega }, j)?, -*omega)]
                }
                (TimeDomain::Discrete, BasisSignal::Sin { omega }) => {
                    let c = self.need(&BasisSignal::Cos { omega: *omega }, j)?;
                    vec![(j, (omega * h).cos()), (c, -(omega * h).sin())]
                }
                (TimeDomain::Discrete, BasisSignal::Cos { omega }) => {
                    let s = self.need(&BasisSignal::Sin { omega: *omega }, j)?;
                    vec![(j, (omega * h).cos()), (s, (omega * h).sin())]
                }
            };
            table.push(row);
        }
        Ok(table)
    }
}

/// Rewrites `phi_s(t) G(q)` as `sum_k G'_k(q) phi_k(t)`.
///
/// Continuous time commutes through `phi q = q phi - phi_dot`; discrete
/// time through `phi(t) q = q phi(t - h)`. Returns the nonzero
/// `(G'_k, k)` pairs ordered by dictionary index.
pub fn tv_rewrite(
    g: &PolyMatrix,
    dict: &TvDictionary,
    s: usize,
    time_domain: TimeDomain,
    h: f64,
) -> Result<Vec<(PolyMatrix, usize)>> {
    let nd = dict.signals.len();
    if s >= nd {
        return Err(Error::ClosureIncomplete(format!("member {s} is not in the dictionary")));
    }
    let closure = dict.closure_table(time_domain, h)?;
    // r[j][k]: ascending coefficients in q of phi_j q^n expanded on phi_k
    let unit = |j: usize| {
        let mut v = vec![Vec::<f64>::new(); nd];
        v[j] = vec![1.0];
        v
    };
    let mut level: Vec<Vec<Vec<f64>>> = (0..nd).map(unit).collect();
    let mut out: Vec<PolyMatrix> = vec![PolyMatrix::zeros(g.rows(), g.cols()); nd];
    let add_scaled = |acc: &mut Vec<f64>, src: &[f64], shift: usize, a: f64| {
        if acc.len() < src.len() + shift {
            acc.resize(src.len() + shift, 0.0);
        }
        for (i, x) in src.iter().enumerate() {
            acc[i + shift] += a * x;
        }
    };
    for n in 0..=g.degree() {
        if n > 0 {
            let prev = level.clone();
            for j in 0..nd {
                let mut next = vec![Vec::<f64>::new(); nd];
                match time_domain {
                    TimeDomain::Continuous => {
                        for k in 0..nd {
                            add_scaled(&mut next[k], &prev[j][k], 1, 1.0);
                        }
                        for &(i, c) in &closure[j] {
                            for k in 0..nd {
                                add_scaled(&mut next[k], &prev[i][k], 0, -c);
                            }
                        }
                    }
                    TimeDomain::Discrete => {
                        for &(i, c) in &closure[j] {
                            for k in 0..nd {
                                add_scaled(&mut next[k], &prev[i][k], 1, c);
                            }
                        }
                    }
                }
                level[j] = next;
            }
        }
        let gn = g.coeff(n);
        for k in 0..nd {
            let c = &level[s][k];
            if c.iter().all(|x| *x == 0.0) {
                continue;
            }
            let coeffs = c.iter().map(|x| &gn * *x).collect();
            let term = PolyMatrix::new(g.rows(), g.cols(), coeffs)?;
            out[k] = out[k].add(&term)?;
        }
    }
    Ok(out
        .into_iter()
        .enumerate()
        .filter(|(_, p)| !p.is_zero())
        .map(|(k, p)| (p, k))
        .collect())
}
