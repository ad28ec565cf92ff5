//! Scenario drivers shared by the command-line runner and the acceptance
//! suite: input design with multi-start, paired noisy/noiseless runs,
//! Monte-Carlo replication, the Gauss-Newton outer loop and the
//! time-varying estimator.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{self, EstimateTrajectory, EstimationWindow};
use crate::filter_design::{self, BasisSignal, GeneratorSet, TvBasis};
use crate::input_design::{self, ConstraintSet, DesignParams, DesignProblem, DesignResult};
use crate::ltisim::{self, FaultSignal, ScenarioResult, ScenarioSpec, Signal};
use crate::model::DaeModel;

/// Designs an input with one run per seed and keeps the best; the SDP bound
/// is attached when requested.
#[allow(clippy::too_many_arguments)]
pub fn design_input(
    model: &DaeModel,
    gen: &GeneratorSet,
    h: f64,
    n_period: usize,
    constraints: ConstraintSet,
    params: DesignParams,
    seeds: &[u64],
    with_sdp: bool,
) -> Result<(DesignProblem, DesignResult)> {
    let ss = input_design::regressor_system(model, gen, h)?;
    let p = input_design::build_problem(&ss, n_period, constraints, params)?;
    let seeds = if seeds.is_empty() {
        vec![p.params.seed]
    } else {
        seeds.to_vec()
    };
    let (best, results) = input_design::optimize_multistart(&p, &seeds)?;
    let mut r = results
        .into_iter()
        .nth(best)
        .expect("multistart returns one result per seed");
    if with_sdp {
        let sdp = input_design::sdp_bound(&p)?;
        r.gap = Some(sdp.bound - r.j);
        r.sdp_upper = Some(sdp.bound);
    }
    Ok((p, r))
}

/// The designed period repeated indefinitely, held over `h`.
pub fn input_signal(r: &DesignResult, n_u: usize, h: f64) -> Signal {
    Signal::Samples {
        dt: h,
        values: r.samples(n_u),
        periodic: true,
    }
}

/// The same scenario with and without noise.
pub struct PairedRun {
    pub noisy: ScenarioResult,
    pub clean: ScenarioResult,
}

pub fn paired_run(model: &DaeModel, gen: &GeneratorSet, spec: &ScenarioSpec) -> Result<PairedRun> {
    let mut clean_spec = spec.clone();
    clean_spec.sigma = 0.0;
    Ok(PairedRun {
        noisy: ltisim::simulate_scenario(model, gen, spec)?,
        clean: ltisim::simulate_scenario(model, gen, &clean_spec)?,
    })
}

/// Window ending at sample `end`, split into the pieces of the first-order
/// error model.
pub struct Decomposition {
    pub e: DMatrix<f64>,
    pub e_w: DMatrix<f64>,
    pub r_w: DVector<f64>,
    pub r_nl: DVector<f64>,
}

pub fn decompose(
    noisy: &ScenarioResult,
    clean: &ScenarioResult,
    f: &DVector<f64>,
    end: usize,
    n: usize,
) -> Result<Decomposition> {
    if end + 1 < n || end >= clean.samples() || end >= noisy.samples() {
        return Err(Error::Config(format!("window of {n} samples cannot end at {end}")));
    }
    let start = end + 1 - n;
    let e = clean.e.rows(start, n).into_owned();
    let r = clean.r.rows(start, n).into_owned();
    let r_nl = &r - &e * f;
    Ok(Decomposition {
        e_w: noisy.e.rows(start, n) - &e,
        r_w: noisy.r.rows(start, n) - &r,
        e,
        r_nl,
    })
}

/// One noise realization: the full estimate error and its first-order model.
#[derive(Clone, Debug)]
pub struct MonteCarloSample {
    pub seed: u64,
    pub full_error: DVector<f64>,
    pub first_order_error: DVector<f64>,
}

/// Replicates a constant-fault scenario over `seeds`, evaluating the final
/// window of each run. The noiseless run is shared.
pub fn monte_carlo(
    model: &DaeModel,
    gen: &GeneratorSet,
    spec: &ScenarioSpec,
    seeds: &[u64],
    n: usize,
) -> Result<(ScenarioResult, Vec<MonteCarloSample>)> {
    let f = match &spec.fault {
        FaultSignal::Constant { values } => DVector::from_vec(values.clone()),
        FaultSignal::Basis { .. } => return Err(Error::Config("Monte-Carlo replication needs constant faults".into())),
    };
    let mut clean_spec = spec.clone();
    clean_spec.sigma = 0.0;
    let clean = ltisim::simulate_scenario(model, gen, &clean_spec)?;
    let end = clean.samples() - 1;
    let samples = seeds
        .par_iter()
        .map(|seed| {
            let mut s = spec.clone();
            s.seed = *seed;
            let noisy = ltisim::simulate_scenario(model, gen, &s)?;
            let dec = decompose(&noisy, &clean, &f, end, n)?;
            let w = EstimationWindow::slice(&noisy.e, &noisy.r, end, n, spec.h)?;
            let full = estimator::ls_estimate(&w)? - &f;
            let first = estimator::first_order_error(&dec.e, &dec.e_w, &dec.r_w, &dec.r_nl, &f)?;
            Ok(MonteCarloSample {
                seed: *seed,
                full_error: full,
                first_order_error: first,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((clean, samples))
}

/// Mean and standard error of `|x|^2` over samples, plus the norm of the
/// sample mean.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ErrorMoments {
    pub mean_sq: f64,
    pub std_err_sq: f64,
    pub mean_norm: f64,
}

pub fn error_moments(xs: &[DVector<f64>]) -> ErrorMoments {
    let k = xs.len().max(1) as f64;
    let sq: Vec<f64> = xs.iter().map(|x| x.norm_squared()).collect();
    let mean_sq = sq.iter().sum::<f64>() / k;
    let var = sq.iter().map(|v| (v - mean_sq).powi(2)).sum::<f64>() / (k - 1.0).max(1.0);
    let mean = xs
        .iter()
        .fold(DVector::zeros(xs.first().map_or(0, |x| x.len())), |acc, x| acc + x)
        / k;
    ErrorMoments {
        mean_sq,
        std_err_sq: (var / k).sqrt(),
        mean_norm: mean.norm(),
    }
}

/// Error statistics of a constant-fault estimate trajectory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrajectoryStats {
    pub final_relative_error: f64,
    /// Mean of `|f_hat - f|` over the second half of the run.
    pub mean_error: f64,
    /// Mean of `|f_hat - f|^2` over the second half of the run.
    pub mse: f64,
}

pub fn trajectory_stats(tr: &EstimateTrajectory, f: &DVector<f64>) -> Option<TrajectoryStats> {
    let last = tr.last()?;
    let half = tr.f_hat.len() / 2;
    let errs: Vec<f64> = tr.f_hat[half..].iter().flatten().map(|x| (x - f).norm()).collect();
    if errs.is_empty() {
        return None;
    }
    let k = errs.len() as f64;
    Some(TrajectoryStats {
        final_relative_error: (last - f).norm() / f.norm(),
        mean_error: errs.iter().sum::<f64>() / k,
        mse: errs.iter().map(|e| e * e).sum::<f64>() / k,
    })
}

/// One pass of the Gauss-Newton loop.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GnIteration {
    pub iteration: usize,
    pub increment: Vec<f64>,
    pub cumulative: Vec<f64>,
    pub relative_error: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GnTrace {
    pub iterations: Vec<GnIteration>,
    /// Set when a redesign failed and the loop stopped early.
    pub stopped: Option<String>,
}

/// Settings of the Gauss-Newton loop.
#[derive(Clone, Debug)]
pub struct GnSettings {
    pub iterations: usize,
    pub window: usize,
    /// Increments smaller than this end the loop.
    pub stop_tol: f64,
}

/// Estimates over one `spec.t_end` segment per iteration, moves the
/// linearization point by the estimate, redesigns with `redesign` and
/// repeats. The plant keeps the true fault of `spec`.
pub fn gauss_newton_loop<F>(
    model: &DaeModel,
    spec: &ScenarioSpec,
    settings: &GnSettings,
    redesign: F,
) -> Result<GnTrace>
where
    F: Fn(&DaeModel) -> Result<GeneratorSet>,
{
    let f_true = match &spec.fault {
        FaultSignal::Constant { values } => DVector::from_vec(values.clone()),
        FaultSignal::Basis { .. } => return Err(Error::Config("the loop needs constant faults".into())),
    };
    let mut cumulative = DVector::zeros(f_true.len());
    let mut current = model.clone();
    let mut trace = GnTrace {
        iterations: Vec::new(),
        stopped: None,
    };
    for it in 0..settings.iterations {
        let gen = match redesign(&current) {
            Ok(g) => g,
            Err(e) if it > 0 => {
                trace.stopped = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        };
        let mut s = spec.clone();
        s.fault = FaultSignal::Constant {
            values: (&f_true - &cumulative).iter().copied().collect(),
        };
        s.seed = spec.seed.wrapping_add(it as u64);
        let res = ltisim::simulate_scenario(&current, &gen, &s)?;
        let end = res.samples() - 1;
        let w = EstimationWindow::slice(&res.e, &res.r, end, settings.window, spec.h)?;
        let inc = estimator::ls_estimate(&w)?;
        cumulative += &inc;
        let rel = (f_true.norm() > 0.0).then(|| (&cumulative - &f_true).norm() / f_true.norm());
        trace.iterations.push(GnIteration {
            iteration: it + 1,
            increment: inc.iter().copied().collect(),
            cumulative: cumulative.iter().copied().collect(),
            relative_error: rel,
        });
        if inc.norm() <= settings.stop_tol {
            break;
        }
        current = match filter_design::gauss_newton_update(&current, inc.as_slice()) {
            Ok(m) => m,
            Err(e) => {
                trace.stopped = Some(e.to_string());
                break;
            }
        };
    }
    Ok(trace)
}

/// Reconstructed fault trajectories from the constant and the time-varying
/// estimators on one run.
#[derive(Clone, Debug)]
pub struct TvComparison {
    pub t: Vec<f64>,
    pub truth: DMatrix<f64>,
    /// Rows are `NaN` where the window is not available.
    pub constant: DMatrix<f64>,
    pub time_varying: DMatrix<f64>,
    /// Root-mean-square error per fault over the valid windows.
    pub rms_constant: Vec<f64>,
    pub rms_time_varying: Vec<f64>,
}

/// `f_i(t) = sum_j p_ij phi_j(t)` for the parameter vector `p` ordered as
/// in `basis.per_fault`.
pub fn reconstruct(basis: &TvBasis, p: &DVector<f64>, t: f64) -> Vec<f64> {
    let mut k = 0;
    basis
        .per_fault
        .iter()
        .map(|members| {
            members
                .iter()
                .map(|j| {
                    let v = p[k] * basis.dictionary.signals[*j].value(t);
                    k += 1;
                    v
                })
                .sum()
        })
        .collect()
}

/// Runs one scenario and estimates with both the constant-fault regressors
/// and the regressors expanded on `basis`.
pub fn tv_comparison(
    model: &DaeModel,
    gen: &GeneratorSet,
    basis: &TvBasis,
    spec: &ScenarioSpec,
    n: usize,
) -> Result<TvComparison> {
    let (res, e_tv) = ltisim::tv_regressors(model, gen, basis, spec)?;
    let nt = res.samples();
    let m = res.e.ncols();
    let const_tr = estimator::run_estimator(&res, n, spec.h);
    let tv_tr = estimator::run_estimator_on(&res.t, &e_tv, &res.r, n, 1, spec.h);
    let mut constant = DMatrix::from_element(nt, m, f64::NAN);
    let mut time_varying = DMatrix::from_element(nt, m, f64::NAN);
    let mut sq_c = vec![0.0; m];
    let mut sq_t = vec![0.0; m];
    let mut count = 0usize;
    for k in 0..nt {
        if let (Some(c), Some(p)) = (&const_tr.f_hat[k], &tv_tr.f_hat[k]) {
            let tv = reconstruct(basis, p, res.t[k]);
            for i in 0..m {
                constant[(k, i)] = c[i];
                time_varying[(k, i)] = tv[i];
                sq_c[i] += (c[i] - res.f[(k, i)]).powi(2);
                sq_t[i] += (tv[i] - res.f[(k, i)]).powi(2);
            }
            count += 1;
        }
    }
    let rms = |v: Vec<f64>| v.into_iter().map(|s| (s / count.max(1) as f64).sqrt()).collect();
    Ok(TvComparison {
        t: res.t.clone(),
        truth: res.f.clone(),
        constant,
        time_varying,
        rms_constant: rms(sq_c),
        rms_time_varying: rms(sq_t),
    })
}

/// Basis where fault `i` uses the dictionary members listed in `members[i]`
/// of a dictionary holding a constant plus `sin` and `cos` at `omega`.
pub fn sinusoid_basis(omega: f64, members: Vec<Vec<usize>>) -> TvBasis {
    TvBasis {
        dictionary: filter_design::TvDictionary {
            signals: vec![
                BasisSignal::Constant,
                BasisSignal::Sin { omega },
                BasisSignal::Cos { omega },
            ],
            closure: None,
        },
        per_fault: members,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reconstruct_follows_member_order() {
        let b = sinusoid_basis(1.0, vec![vec![0], vec![0, 1], vec![2]]);
        let p = DVector::from_vec(vec![2.0, 1.0, 3.0, 4.0]);
        let t = 0.3f64;
        let f = reconstruct(&b, &p, t);
        assert!((f[0] - 2.0).abs() < 1e-15);
        assert!((f[1] - (1.0 + 3.0 * t.sin())).abs() < 1e-15);
        assert!((f[2] - 4.0 * t.cos()).abs() < 1e-15);
    }

    #[test]
    fn moments_of_constant_samples() {
        let xs = vec![DVector::from_vec(vec![3.0, 4.0]); 5];
        let m = error_moments(&xs);
        assert!((m.mean_sq - 25.0).abs() < 1e-12);
        assert!(m.std_err_sq.abs() < 1e-12);
        assert!((m.mean_norm - 5.0).abs() < 1e-12);
    }
}
