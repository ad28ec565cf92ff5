//! Bundled cart-pendulum fixture.
//!
//! The model is linearized about the hanging equilibrium, so it is open-loop
//! stable. Constants are the usual teaching values for this benchmark.

use nalgebra::{DMatrix, Matrix2};

use num_complex::Complex64;

use crate::error::Result;
use crate::filter_design::{design, make_denominator, GeneratorSet, DEFAULT_TRIALS};
use crate::ltisim::Signal;
use crate::model::{to_dae, DaeModel, SsFault, StateSpaceModel, TimeDomain};

pub const FIXTURE_JSON: &str = include_str!("../fixtures/pendulum_cart.json");

/// Fault values of the small constant-fault scenarios.
pub const SMALL_FAULTS: [f64; 3] = [-0.05, 0.02, -0.03];
/// Fault values of the large-fault scenario.
pub const LARGE_FAULTS: [f64; 3] = [-0.2, 0.2, -0.5];
/// Sampling interval of the estimator.
pub const SAMPLE_TIME: f64 = 0.05;
/// Estimation window length in samples.
pub const WINDOW: usize = 400;
/// Period of the designed input in samples.
pub const PERIOD: usize = 40;
/// Poles of the filter denominator.
pub const POLES: [f64; 2] = [-10.0, -20.0];

#[derive(Clone, Copy, Debug)]
pub struct Params {
    pub cart_mass: f64,
    pub pendulum_mass: f64,
    pub friction: f64,
    pub length: f64,
    pub inertia: f64,
    pub gravity: f64,
    pub torque_gain: f64,
    /// Measurement noise gain on both outputs.
    pub noise_gain: f64,
}

impl Default for Params {
    fn default() -> Self {
        Params {
            cart_mass: 0.5,
            pendulum_mass: 0.2,
            friction: 0.1,
            length: 0.3,
            inertia: 0.006,
            gravity: 9.8,
            torque_gain: 0.1,
            noise_gain: 2.4e-3,
        }
    }
}

/// Places a 2-vector acting on `(v, omega)` into the 3-state layout.
fn lift(v: [f64; 2]) -> [f64; 3] {
    [v[0], 0.0, v[1]]
}

/// Builds the state-space fixture from physical constants.
///
/// The mechanical rows are `Mm [v_dot; omega_dot] = rhs`; they are scaled by
/// `Mm^{-1}` so that the nominal descriptor is the identity and the mass
/// fault appears as a descriptor direction.
pub fn state_space(p: &Params) -> StateSpaceModel {
    let (mc, m, b, l, i, g) = (p.cart_mass, p.pendulum_mass, p.friction, p.length, p.inertia, p.gravity);
    let mass = Matrix2::new(mc + m, m * l, m * l, i + m * l * l);
    let det = mass.determinant();
    let inv = mass.try_inverse().expect("mass matrix is positive definite");
    let solve = |r: [f64; 2]| {
        let x = inv * nalgebra::Vector2::new(r[0], r[1]);
        lift([x[0], x[1]])
    };
    let v_col = solve([-b, 0.0]);
    let phi_col = solve([0.0, -m * g * l]);
    let a = DMatrix::from_row_slice(
        3,
        3,
        &[v_col[0], phi_col[0], 0.0, 0.0, 0.0, 1.0, v_col[2], phi_col[2], 0.0],
    );
    let f_col = solve([1.0, 0.0]);
    let t_col = solve([0.0, p.torque_gain]);
    let b_u = DMatrix::from_row_slice(3, 2, &[f_col[0], t_col[0], 0.0, 0.0, f_col[2], t_col[2]]);
    let s = -(mc + m) * g / det;
    let b_d = DMatrix::from_column_slice(3, 1, &[s * (i + m * l * l), 0.0, s * m * l]);

    let col = |c: [f64; 3], at: usize| {
        let mut out = DMatrix::zeros(3, 3);
        for r in 0..3 {
            out[(r, at)] = c[r];
        }
        out
    };
    let dmass = inv * Matrix2::new(m, m * l, m * l, m * l * l);
    let mut g2 = DMatrix::zeros(3, 3);
    for (ri, r) in [0usize, 2].iter().enumerate() {
        for (ci, c) in [0usize, 2].iter().enumerate() {
            g2[(*r, *c)] = dmass[(ri, ci)];
        }
    }
    let zero = SsFault::zeros(3, 2, 1, 2);
    let faults = vec![
        SsFault {
            a: col(v_col, 0),
            ..zero.clone()
        },
        SsFault {
            g: g2,
            a: col(phi_col, 1),
            b_d: DMatrix::from_column_slice(3, 1, &solve([-m * g, m * g * l])),
            ..zero.clone()
        },
        SsFault {
            b_u: b_u.clone(),
            ..zero
        },
    ];
    StateSpaceModel {
        g: DMatrix::identity(3, 3),
        a,
        b_u,
        b_d,
        b_w: DMatrix::zeros(3, 2),
        c: DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
        d_u: DMatrix::zeros(2, 2),
        d_d: DMatrix::zeros(2, 1),
        d_w: DMatrix::identity(2, 2) * p.noise_gain,
        faults,
        time_domain: TimeDomain::Continuous,
    }
}

/// The bundled fixture as a DAE model.
pub fn model() -> Result<DaeModel> {
    DaeModel::from_json_str(FIXTURE_JSON)
}

/// Same model built directly from [`Params::default`].
pub fn model_from_params() -> Result<DaeModel> {
    to_dae(&state_space(&Params::default()))
}

/// Degree-2 generators with `d = (q + 10)(q + 20) / 200`.
pub fn generators(model: &DaeModel) -> Result<GeneratorSet> {
    let gen = design(model, Some(2), DEFAULT_TRIALS, 0)?;
    let poles: Vec<Complex64> = POLES.iter().map(|p| Complex64::new(*p, 0.0)).collect();
    let need = gen.required_denominator_degree(model)?;
    let d = make_denominator(&poles, true, model.time_domain, need)?;
    gen.with_denominator(model, d)
}

/// [`slope_disturbance`] as a simulation signal.
pub fn disturbance_signal() -> Signal {
    Signal::Sinusoid {
        amplitude: vec![5.0 * std::f64::consts::PI / 180.0],
        omega: vec![std::f64::consts::PI],
        phase: vec![0.0],
    }
}

/// [`sinusoid_input`] as a simulation signal.
pub fn sinusoid_signal() -> Signal {
    let pi = std::f64::consts::PI;
    Signal::Sinusoid {
        amplitude: vec![1.0, 1.0],
        omega: vec![pi, pi],
        phase: vec![0.0, pi / 2.0],
    }
}

/// Slope disturbance of the scenarios: five degrees peak at 0.5 Hz.
pub fn slope_disturbance(t: f64) -> f64 {
    5.0 * std::f64::consts::PI / 180.0 * (std::f64::consts::PI * t).sin()
}

/// Passive sinusoidal excitation `[sin(pi t), cos(pi t)]`.
pub fn sinusoid_input(t: f64) -> [f64; 2] {
    let w = std::f64::consts::PI * t;
    [w.sin(), w.cos()]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_fixture_matches_constants() {
        let a = model().unwrap();
        let b = model_from_params().unwrap();
        let (sa, sb) = (a.state_space.unwrap(), b.state_space.unwrap());
        for (x, y) in [
            (&sa.a, &sb.a),
            (&sa.b_u, &sb.b_u),
            (&sa.b_d, &sb.b_d),
            (&sa.c, &sb.c),
            (&sa.d_w, &sb.d_w),
        ] {
            assert!((x - y).norm() < 1e-12);
        }
        for (fa, fb) in sa.faults.iter().zip(&sb.faults) {
            assert!(
                (&fa.g - &fb.g).norm()
                    + (&fa.a - &fb.a).norm()
                    + (&fa.b_u - &fb.b_u).norm()
                    + (&fa.b_d - &fb.b_d).norm()
                    < 1e-12
            );
        }
    }

    #[test]
    fn hanging_equilibrium_is_stable() {
        let ss = state_space(&Params::default());
        assert!(crate::linalg::spectral_abscissa(&ss.a) < 0.0);
    }
}
