//! Run configuration. Every section has defaults reproducing the bundled
//! pendulum-cart demo, so an empty JSON object is a valid config.

use std::path::{Path, PathBuf};

use mfault::filter_design::TvBasis;
use mfault::input_design::{ConstraintSet, DesignParams};
use mfault::ltisim::{FaultSignal, Signal};
use mfault::{pendulum, Error, Result};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Model JSON; the bundled pendulum-cart fixture when absent.
    pub model: Option<PathBuf>,
    pub filter: FilterSection,
    pub estimator: EstimatorSection,
    pub design: DesignSection,
    pub scenario: ScenarioSection,
    pub large_fault: LargeFaultSection,
    pub output: Option<PathBuf>,
}

/// A pole given either as a real number or as `[re, im]`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Pole {
    Real(f64),
    Complex([f64; 2]),
}

impl Pole {
    pub fn value(self) -> Complex64 {
        match self {
            Pole::Real(re) => Complex64::new(re, 0.0),
            Pole::Complex([re, im]) => Complex64::new(re, im),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSection {
    /// Annihilator degree; the smallest feasible one when absent.
    pub degree: Option<usize>,
    #[serde(rename = "K")]
    pub trials: usize,
    pub seed: u64,
    pub poles: Vec<Pole>,
    pub normalize_dc: bool,
}

impl Default for FilterSection {
    fn default() -> Self {
        FilterSection {
            degree: Some(2),
            trials: mfault::filter_design::DEFAULT_TRIALS,
            seed: 0,
            poles: pendulum::POLES.iter().map(|p| Pole::Real(*p)).collect(),
            normalize_dc: true,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorSection {
    pub h: f64,
    #[serde(rename = "N_window")]
    pub window: usize,
    pub stride: usize,
    pub sigma: f64,
    #[serde(rename = "T_end")]
    pub t_end: f64,
    pub oversample: usize,
}

impl Default for EstimatorSection {
    fn default() -> Self {
        EstimatorSection {
            h: pendulum::SAMPLE_TIME,
            window: pendulum::WINDOW,
            stride: 1,
            sigma: 1.0,
            t_end: 60.0,
            oversample: mfault::ltisim::DEFAULT_OVERSAMPLE,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DesignSection {
    #[serde(rename = "N_period")]
    pub period: usize,
    pub constraints: ConstraintSet,
    pub tau: f64,
    #[serde(rename = "L")]
    pub l: f64,
    pub eps_u: f64,
    pub eps_lambda: f64,
    pub max_iter: usize,
    /// One optimization run per seed; the best is kept.
    pub seeds: Vec<u64>,
    pub sdp: bool,
}

impl Default for DesignSection {
    fn default() -> Self {
        let p = DesignParams::default();
        DesignSection {
            period: pendulum::PERIOD,
            constraints: ConstraintSet::ChannelEnergy {
                energy: vec![pendulum::PERIOD as f64 / 2.0; 2],
            },
            tau: p.tau,
            l: p.l,
            eps_u: p.eps_u,
            eps_lambda: p.eps_lambda,
            max_iter: p.max_iter,
            seeds: (0..10).collect(),
            sdp: true,
        }
    }
}

impl DesignSection {
    pub fn params(&self) -> DesignParams {
        DesignParams {
            tau: self.tau,
            l: self.l,
            eps_u: self.eps_u,
            eps_lambda: self.eps_lambda,
            seed: self.seeds.first().copied().unwrap_or(0),
            max_iter: self.max_iter,
        }
    }
}

/// Plant input for a scenario.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InputSpec {
    Special(SpecialInput),
    Signal(Signal),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpecialInput {
    /// The optimal periodic input, read from a design result JSON or
    /// designed on the fly from the `design` section.
    Designed {
        #[serde(default)]
        result: Option<PathBuf>,
    },
    /// CSV with one row per sample at the estimator's `h`.
    File {
        path: PathBuf,
        #[serde(default)]
        periodic: bool,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSection {
    pub faults: FaultSignal,
    pub disturbance: Signal,
    pub input: InputSpec,
    /// Basis for the time-varying estimator.
    pub estimate_basis: Option<TvBasis>,
    pub seed: u64,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        ScenarioSection {
            faults: FaultSignal::Constant {
                values: pendulum::SMALL_FAULTS.to_vec(),
            },
            disturbance: pendulum::disturbance_signal(),
            input: InputSpec::Special(SpecialInput::Designed { result: None }),
            estimate_basis: None,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LargeFaultSection {
    pub iterations: usize,
    /// Seconds of data per generator update.
    pub t_update: f64,
    pub stop_tol: f64,
}

impl Default for LargeFaultSection {
    fn default() -> Self {
        LargeFaultSection {
            iterations: 3,
            t_update: 40.0,
            stop_tol: 0.0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Replaces every seed with `seed`.
    pub fn override_seed(&mut self, seed: u64) {
        self.filter.seed = seed;
        self.design.seeds = vec![seed];
        self.scenario.seed = seed;
    }

    pub fn input_is_designed(&self) -> bool {
        matches!(self.scenario.input, InputSpec::Special(SpecialInput::Designed { .. }))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let e = &self.estimator;
        if !(e.h > 0.0) || !(e.t_end > 0.0) {
            return bad("h and T_end must be positive".into());
        }
        if e.window == 0 || e.oversample == 0 || e.stride == 0 {
            return bad("N_window, oversample and stride must be positive".into());
        }
        if e.sigma < 0.0 {
            return bad("sigma must be non-negative".into());
        }
        if self.design.period == 0 {
            return bad("N_period must be positive".into());
        }
        if self.input_is_designed() && !e.window.is_multiple_of(self.design.period) {
            return bad(format!(
                "N_window ({}) must be an integer multiple of N_period ({}) for a designed input",
                e.window, self.design.period
            ));
        }
        if self.design.seeds.is_empty() {
            return bad("design needs at least one seed".into());
        }
        if self.filter.poles.is_empty() {
            return bad("filter needs at least one pole".into());
        }
        if self.large_fault.iterations == 0 || !(self.large_fault.t_update > 0.0) {
            return bad("large_fault needs iterations and a positive t_update".into());
        }
        self.scenario.disturbance.validate()?;
        if let InputSpec::Signal(s) = &self.scenario.input {
            s.validate()?;
        }
        Ok(())
    }
}
