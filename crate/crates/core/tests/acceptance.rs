//! Acceptance criteria on the bundled pendulum-cart fixture. Each test prints
//! one `PASS`/`FAIL` line to stdout (bypassing the capture) before asserting.

use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use mfault::estimator::{self, BoundInputs, NoiseNorms};
use mfault::experiments::{self, GnSettings};
use mfault::filter_design::{self, BasisSignal, GeneratorSet, TvDictionary};
use mfault::input_design::{self, ConstraintSet, DesignParams, DesignProblem, DesignResult};
use mfault::ltisim::{self, FaultSignal, ScenarioSpec, Signal};
use mfault::model::{to_dae, DaeModel, SsFault};
use mfault::pendulum;
use mfault::polymat::{PolyMatrix, TOL_RANK};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = pendulum::SAMPLE_TIME;
const WINDOW: usize = pendulum::WINDOW;
const PERIOD: usize = pendulum::PERIOD;
const SEEDS: [u64; 10] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9];
const T_END: f64 = 60.0;
const SCENARIO_BUDGET: Duration = Duration::from_secs(60);

fn report(id: usize, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "acceptance {id:>2} {verdict} {name}: {detail}");
}

struct Setup {
    model: DaeModel,
    gen: GeneratorSet,
    norms: NoiseNorms,
    problem: DesignProblem,
    results: Vec<DesignResult>,
    best: usize,
    design_time: Duration,
}

impl Setup {
    fn designed(&self) -> &DesignResult {
        &self.results[self.best]
    }

    fn input(&self) -> Signal {
        experiments::input_signal(self.designed(), 2, H)
    }

    fn spec(&self, input: Signal, fault: &[f64], sigma: f64, seed: u64) -> ScenarioSpec {
        ScenarioSpec {
            fault: FaultSignal::Constant { values: fault.to_vec() },
            input,
            disturbance: pendulum::disturbance_signal(),
            sigma,
            h: H,
            t_end: T_END,
            oversample: ltisim::DEFAULT_OVERSAMPLE,
            seed,
        }
    }

    fn bounds(&self, e: &DMatrix<f64>, sigma: f64, peak: f64, f: &DVector<f64>) -> BoundInputs {
        let end = e.nrows();
        let window = e.rows(end - WINDOW, WINDOW).into_owned();
        BoundInputs {
            a: self.norms.a,
            eta_f: self.norms.eta_f,
            eta_w: self.norms.eta_w,
            gamma_f: self.norms.gamma_f,
            sigma,
            s: estimator::singular_values(&window),
            signal_peak: peak,
            f_norm: f.norm(),
            n: WINDOW,
            m: f.len(),
        }
    }
}

fn energy_constraint() -> ConstraintSet {
    // 2-norm sqrt(N/2) per channel
    ConstraintSet::ChannelEnergy {
        energy: vec![PERIOD as f64 / 2.0; 2],
    }
}

fn setup() -> &'static Setup {
    static SETUP: OnceLock<Setup> = OnceLock::new();
    SETUP.get_or_init(|| {
        let model = pendulum::model().unwrap();
        let gen = pendulum::generators(&model).unwrap();
        let norms = estimator::noise_norms(&model, &gen, H).unwrap();
        let start = Instant::now();
        let ss = input_design::regressor_system(&model, &gen, H).unwrap();
        let problem = input_design::build_problem(&ss, PERIOD, energy_constraint(), DesignParams::default()).unwrap();
        let (best, results) = input_design::optimize_multistart(&problem, &SEEDS).unwrap();
        let design_time = start.elapsed();
        Setup {
            model,
            gen,
            norms,
            problem,
            results,
            best,
            design_time,
        }
    })
}

fn random_poly(rng: &mut ChaCha8Rng, rows: usize, cols: usize, max_deg: usize) -> PolyMatrix {
    let deg = rng.random_range(0..=max_deg);
    let coeffs = (0..=deg)
        .map(|_| DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0)))
        .collect();
    PolyMatrix::new(rows, cols, coeffs).unwrap()
}

#[test]
fn criterion_01_polynomial_algebra() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_product: f64 = 0.0;
    let mut worst_inverse: f64 = 0.0;
    let mut worst_null: f64 = 0.0;
    let mut inverse_failures = 0;
    for _ in 0..500 {
        let n = rng.random_range(1..4);
        let m = rng.random_range(1..4);
        let p1 = random_poly(&mut rng, 1, n, 3);
        let p2 = random_poly(&mut rng, n, m, 3);
        let lhs = p1.mul(&p2).unwrap().blkrow();
        let rhs = p1.blkrow() * p2.toeplitz(p1.degree() + 1);
        let mut padded = DMatrix::zeros(rhs.nrows(), rhs.ncols());
        padded.view_mut((0, 0), lhs.shape()).copy_from(&lhs);
        let scale = (p1.blkrow().norm() * p2.blkrow().norm()).max(1e-300);
        worst_product = worst_product.max((padded - rhs).norm() / scale);

        let h = random_poly(&mut rng, 3, 2, 2);
        match h.left_inverse(filter_design::DEFAULT_INVERSE_DEGREE) {
            Ok(hd) => {
                let id = hd.mul(&h).unwrap();
                let mut err: f64 = (id.coeff(0) - DMatrix::<f64>::identity(2, 2)).norm();
                for k in 1..=id.degree() {
                    err = err.max(id.coeff(k).norm());
                }
                worst_inverse = worst_inverse.max(err / (hd.blkrow().norm() * h.blkrow().norm()).max(1.0));
            }
            Err(_) => inverse_failures += 1,
        }

        let k = rng.random_range(0..3);
        let t = h.toeplitz(k + 1);
        let null = h.left_null_space(k, TOL_RANK);
        if null.nrows() > 0 {
            worst_null = worst_null.max((&null * &t).norm() / t.norm().max(1e-300));
        }
    }
    let elapsed = start.elapsed();
    let pass = worst_product < 1e-8
        && worst_inverse < 1e-8
        && worst_null < 1e-8
        && inverse_failures == 0
        && elapsed < Duration::from_secs(10);
    report(
        1,
        "polynomial algebra",
        pass,
        &format!(
            "product {worst_product:.1e}, left inverse {worst_inverse:.1e} ({inverse_failures} failures), null space {worst_null:.1e}, {elapsed:.2?}"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_02_filter_reproduction() {
    let model = pendulum::model().unwrap();
    let gen = filter_design::design(&model, Some(2), filter_design::DEFAULT_TRIALS, 0).unwrap();
    let reference: [[f64; 3]; 5] = [
        [-0.065, 0.0, 0.0],
        [0.0, 0.026, 0.0],
        [0.026, 0.0, 0.0],
        [-0.024, -0.065, 0.0],
        [0.994, 0.0, 0.026],
    ];
    let want = DMatrix::from_fn(1, 15, |_, c| reference[c % 5][c / 5]);
    let got = gen.n.blkrow();
    let mut got = DMatrix::from_fn(1, 15, |_, c| if c < got.ncols() { got[(0, c)] } else { 0.0 });
    got *= want.norm() / got.norm();
    if got.dot(&want) < 0.0 {
        got = -got;
    }
    let worst = (&got - &want).amax();
    let annihilation = gen.n.mul(&model.h).unwrap().blkrow().norm();
    let pass = gen.null_dim == 1 && worst < 2e-2 && annihilation < 1e-8;
    report(
        2,
        "filter reproduction",
        pass,
        &format!(
            "annihilator dimension {}, worst coefficient error {worst:.2e}, |N H| {annihilation:.1e}",
            gen.null_dim
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_03_input_design() {
    let s = setup();
    let j = s.designed().j;
    let start = Instant::now();
    let sdp = input_design::sdp_bound(&s.problem).unwrap();
    let sdp_time = start.elapsed();
    let (lo, hi) = (j.sqrt(), sdp.bound.sqrt());
    let j_ok = (0.17..=0.26).contains(&j);
    let sdp_ok = (0.38..=0.52).contains(&sdp.bound);
    let dominance = sdp.bound >= j - 1e-6;
    // [0.460, 0.672] widened by the two bands
    let bracket_ok = lo <= 0.26f64.sqrt() && hi >= 0.38f64.sqrt();
    let time_ok = s.design_time < Duration::from_secs(5);
    let pass = j_ok && sdp_ok && dominance && bracket_ok && time_ok;
    report(
        3,
        "input design",
        pass,
        &format!(
            "J {j:.4} (band [0.17, 0.26]), SDP {:.4} (band [0.38, 0.52]), bracket [{lo:.3}, {hi:.3}], multistart {:.2?}, SDP {sdp_time:.2?}",
            sdp.bound, s.design_time
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_04_asymptotic_equivalence() {
    let s = setup();
    let p = &s.problem;
    let samples = input_design::settling_samples(p, 1e-10);
    let mut worst_rel: f64 = 0.0;
    let mut worst_hom: f64 = 0.0;
    for r in &s.results {
        let (j, _) = input_design::objective_subgradient(p, &r.u_bar);
        let v = input_design::verify_asymptotic(p, &r.u_bar, samples).unwrap();
        worst_rel = worst_rel.max((v - j).abs() / j);
        let (j2, _) = input_design::objective_subgradient(p, &(&r.u_bar * 2.0));
        worst_hom = worst_hom.max((j2 - 4.0 * j).abs() / (4.0 * j));
    }
    let pass = worst_rel < 1e-4 && worst_hom < 1e-10;
    report(
        4,
        "asymptotic equivalence",
        pass,
        &format!(
            "worst |verify - J|/J {worst_rel:.1e} over {} designs ({samples} samples), homogeneity {worst_hom:.1e}",
            s.results.len()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_05_subgradient() {
    let s = setup();
    let p = &s.problem;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    while checked < 50 {
        let raw = DVector::from_fn(p.dim(), |_, _| rng.random_range(-1.0..1.0));
        let u = input_design::project(&p.constraints, &raw, p.n_u);
        let mut ev: Vec<f64> = p.q_matrix(&u).symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        if ev[1] - ev[0] < 1e-3 * ev[1] {
            continue;
        }
        let (_, g) = input_design::objective_subgradient(p, &u);
        let delta = 1e-6 * u.norm();
        let fd = DVector::from_fn(p.dim(), |k, _| {
            let mut up = u.clone();
            let mut dn = u.clone();
            up[k] += delta;
            dn[k] -= delta;
            (input_design::objective_subgradient(p, &up).0 - input_design::objective_subgradient(p, &dn).0)
                / (2.0 * delta)
        });
        worst = worst.max((fd - &g).norm() / g.norm());
        checked += 1;
    }
    let pass = worst < 1e-5;
    report(
        5,
        "subgradient",
        pass,
        &format!("worst relative gap {worst:.1e} at {checked} points"),
    );
    assert!(pass);
}

#[test]
fn criterion_06_scenario_regression() {
    let s = setup();
    let f = DVector::from_vec(pendulum::SMALL_FAULTS.to_vec());
    let mut slowest = Duration::ZERO;
    let mut timed = |spec: &ScenarioSpec| {
        let start = Instant::now();
        let pair = experiments::paired_run(&s.model, &s.gen, spec).unwrap();
        slowest = slowest.max(start.elapsed());
        pair
    };

    let sine = timed(&s.spec(pendulum::sinusoid_signal(), f.as_slice(), 0.0, 1));
    let sine_stats = experiments::trajectory_stats(&estimator::run_estimator(&sine.clean, WINDOW, H), &f).unwrap();
    let opt = timed(&s.spec(s.input(), f.as_slice(), 1.0, 1));
    let clean_stats = experiments::trajectory_stats(&estimator::run_estimator(&opt.clean, WINDOW, H), &f).unwrap();
    let noisy_stats = experiments::trajectory_stats(&estimator::run_estimator(&opt.noisy, WINDOW, H), &f).unwrap();
    let b = s.bounds(&opt.clean.e, 1.0, opt.clean.signal_peak, &f);
    let rep = estimator::bound_report(&b);

    let checks = [
        (0.1..=0.35).contains(&sine_stats.final_relative_error),
        clean_stats.final_relative_error <= 0.05,
        noisy_stats.mean_error <= 0.08 * f.norm(),
        noisy_stats.mse <= rep.variance_bound,
        (0.05..=0.3).contains(&rep.snr),
        slowest < SCENARIO_BUDGET,
    ];
    let pass = checks.iter().all(|c| *c);
    report(
        6,
        "scenario regression",
        pass,
        &format!(
            "sinusoid {:.3}, optimal {:.4}, noisy mean {:.2}% of |f|, MSE {:.2e} vs bound {:.2e}, SNR {:.3}, bias bound {:.3}, slowest run {slowest:.2?}",
            sine_stats.final_relative_error,
            clean_stats.final_relative_error,
            100.0 * noisy_stats.mean_error / f.norm(),
            noisy_stats.mse,
            rep.variance_bound,
            rep.snr,
            rep.bias_bound,
        ),
    );
    assert!(pass, "{checks:?}");
}

/// The pendulum with the two actuator gains as separate faults, so that
/// every fault multiplies known signals only.
fn actuator_only_model() -> DaeModel {
    let base = pendulum::state_space(&pendulum::Params::default());
    let faults = (0..2)
        .map(|c| {
            let mut f = SsFault::zeros(3, 2, 1, 2);
            f.b_u.set_column(c, &base.b_u.column(c));
            f
        })
        .collect();
    let mut ss = base;
    ss.faults = faults;
    to_dae(&ss).unwrap()
}

#[test]
fn criterion_07_quadratic_bias() {
    let s = setup();
    let f = DVector::from_vec(pendulum::SMALL_FAULTS.to_vec());
    let final_error = |f: &DVector<f64>| {
        let res = ltisim::simulate_scenario(&s.model, &s.gen, &s.spec(s.input(), f.as_slice(), 0.0, 1)).unwrap();
        let tr = estimator::run_estimator(&res, WINDOW, H);
        (tr.last().unwrap() - f).norm()
    };
    let ratio = final_error(&f) / final_error(&(&f / 2.0));

    let model = actuator_only_model();
    let gen = pendulum::generators(&model).unwrap();
    let g = DVector::from_vec(vec![-0.05, 0.03]);
    let res =
        ltisim::simulate_scenario(&model, &gen, &s.spec(pendulum::sinusoid_signal(), g.as_slice(), 0.0, 1)).unwrap();
    let tr = estimator::run_estimator(&res, WINDOW, H);
    let known = (tr.last().unwrap() - &g).norm() / g.norm();

    let pass = (3.0..=5.0).contains(&ratio) && known < 1e-7;
    report(
        7,
        "quadratic bias",
        pass,
        &format!("halving ratio {ratio:.3}, known-signal faults relative error {known:.1e}"),
    );
    assert!(pass);
}

#[test]
fn criterion_08_monte_carlo_bounds() {
    let s = setup();
    let f = DVector::from_vec(pendulum::SMALL_FAULTS.to_vec());
    let seeds: Vec<u64> = (1000..1200).collect();
    let spec = s.spec(s.input(), f.as_slice(), 1.0, 0);
    let (clean, samples) = experiments::monte_carlo(&s.model, &s.gen, &spec, &seeds, WINDOW).unwrap();
    let b = s.bounds(&clean.e, 1.0, clean.signal_peak, &f);
    let big_b = estimator::bias_bound(&b);
    let var = estimator::variance_bound(&b, big_b);
    let first: Vec<DVector<f64>> = samples.iter().map(|x| x.first_order_error.clone()).collect();
    let full: Vec<DVector<f64>> = samples.iter().map(|x| x.full_error.clone()).collect();
    let mf = experiments::error_moments(&first);
    let mb = experiments::error_moments(&full);
    let pass = mf.mean_sq <= var + 3.0 * mf.std_err_sq && mb.mean_norm <= big_b;
    report(
        8,
        "Monte-Carlo bounds",
        pass,
        &format!(
            "{} seeds: mean |first-order error|^2 {:.2e} (se {:.1e}) vs variance bound {var:.2e}; mean error norm {:.2e} vs bias bound {big_b:.3}",
            seeds.len(),
            mf.mean_sq,
            mf.std_err_sq,
            mb.mean_norm
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_09_gauss_newton() {
    let s = setup();
    let mut spec = s.spec(s.input(), &pendulum::LARGE_FAULTS, 1.0, 9);
    // one generator update every 40 s
    spec.t_end = 40.0;
    let settings = GnSettings {
        iterations: 3,
        window: WINDOW,
        stop_tol: 0.0,
    };
    let trace = experiments::gauss_newton_loop(&s.model, &spec, &settings, pendulum::generators).unwrap();
    let errors: Vec<f64> = trace.iterations.iter().filter_map(|i| i.relative_error).collect();
    let pass = errors.len() == 3 && errors[2] <= 0.05;
    report(
        9,
        "Gauss-Newton loop",
        pass,
        &format!(
            "relative error per iteration {:?}",
            errors.iter().map(|e| format!("{e:.4}")).collect::<Vec<_>>()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_10_time_varying() {
    let g = PolyMatrix::row_from_entries(&[vec![1.0, 1.0, 1.0], vec![1.0]]);
    let dict = TvDictionary {
        signals: vec![BasisSignal::Constant, BasisSignal::Polynomial { power: 1 }],
        closure: None,
    };
    let td = mfault::model::TimeDomain::Continuous;
    let ramp = filter_design::tv_rewrite(&g, &dict, 1, td, 0.0).unwrap();
    let rewrite_ok = ramp.len() == 2
        && ramp[0] == (PolyMatrix::row_from_entries(&[vec![-1.0, -2.0], vec![0.0]]), 0)
        && ramp[1] == (g.clone(), 1)
        && filter_design::tv_rewrite(&g, &dict, 0, td, 0.0).unwrap() == vec![(g.clone(), 0)];

    let s = setup();
    let basis = experiments::sinusoid_basis(1.0, vec![vec![0], vec![0], vec![1]]);
    let mut spec = s.spec(s.input(), &[0.0; 3], 1.0, 10);
    spec.fault = FaultSignal::Basis {
        basis: basis.clone(),
        coeffs: vec![
            vec![pendulum::SMALL_FAULTS[0]],
            vec![pendulum::SMALL_FAULTS[1]],
            vec![0.05],
        ],
    };
    let cmp = experiments::tv_comparison(&s.model, &s.gen, &basis, &spec, WINDOW).unwrap();
    let pass = rewrite_ok && cmp.rms_time_varying[2] < cmp.rms_constant[2];
    report(
        10,
        "time-varying rewrite",
        pass,
        &format!(
            "rewrite {}, f3 rms error {:.2e} (time-varying) vs {:.2e} (constant)",
            if rewrite_ok { "exact" } else { "mismatch" },
            cmp.rms_time_varying[2],
            cmp.rms_constant[2]
        ),
    );
    assert!(pass);
}
