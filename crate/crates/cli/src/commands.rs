use std::path::{Path, PathBuf};

use mfault::estimator::{self, BoundInputs, EstimateSummary, EstimateTrajectory};
use mfault::experiments::{self, GnSettings};
use mfault::filter_design::{self, GeneratorSet};
use mfault::input_design::{self, DesignProblem, DesignResult};
use mfault::ltisim::{self, FaultSignal, ScenarioResult, ScenarioSpec, Signal};
use mfault::model::DaeModel;
use mfault::{io, pendulum, Error, Result};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{InputSpec, RunConfig, SpecialInput};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    DesignFilter,
    DesignInput,
    Simulate,
    LargeFault,
    TimeVarying,
    Bounds,
    SdpExport,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::DesignFilter => "design-filter",
            Command::DesignInput => "design-input",
            Command::Simulate => "simulate",
            Command::LargeFault => "large-fault",
            Command::TimeVarying => "time-varying",
            Command::Bounds => "bounds",
            Command::SdpExport => "sdp-export",
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub artifacts: Vec<Artifact>,
    pub runs: Vec<RunRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub command: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub config: RunConfig,
}

impl Manifest {
    pub const FILE: &'static str = "manifest.json";

    /// Adds this run to the manifest in `dir`, keeping artifacts of earlier
    /// commands that were not overwritten.
    pub fn update(dir: &Path, command: Command, config: &RunConfig, files: &[String]) -> Result<()> {
        let path = dir.join(Self::FILE);
        let mut m: Manifest = if path.exists() {
            serde_json::from_str(&std::fs::read_to_string(&path)?)?
        } else {
            Manifest::default()
        };
        m.artifacts.retain(|a| !files.contains(&a.path));
        m.artifacts.extend(files.iter().map(|f| Artifact {
            path: f.clone(),
            command: command.name().into(),
        }));
        m.artifacts.sort_by(|a, b| a.path.cmp(&b.path));
        m.runs.retain(|r| r.command != command.name());
        m.runs.push(RunRecord {
            command: command.name().into(),
            config: config.clone(),
        });
        std::fs::write(&path, serde_json::to_string_pretty(&m)?)?;
        Ok(())
    }
}

/// Output directory plus the list of files written so far.
struct Out {
    dir: PathBuf,
    files: Vec<String>,
}

impl Out {
    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let p = self.path(name);
        std::fs::write(p, serde_json::to_string_pretty(value)?)?;
        Ok(())
    }
}

/// Shared state: the model and its generators with the configured
/// denominator.
struct Context {
    cfg: RunConfig,
    model: DaeModel,
    gen: GeneratorSet,
}

impl Context {
    fn new(cfg: &RunConfig) -> Result<Context> {
        let model = match &cfg.model {
            Some(p) => DaeModel::load(p)?,
            None => pendulum::model()?,
        };
        let gen = generators(cfg, &model)?;
        Ok(Context {
            cfg: cfg.clone(),
            model,
            gen,
        })
    }

    fn h(&self) -> f64 {
        self.cfg.estimator.h
    }

    fn n_u(&self) -> Result<usize> {
        self.model
            .state_space
            .as_ref()
            .map(|s| s.n_u())
            .ok_or_else(|| Error::Config("the model has no state-space form".into()))
    }

    fn design(&self, with_sdp: bool) -> Result<(DesignProblem, DesignResult)> {
        let d = &self.cfg.design;
        experiments::design_input(
            &self.model,
            &self.gen,
            self.h(),
            d.period,
            d.constraints.clone(),
            d.params(),
            &d.seeds,
            with_sdp,
        )
    }

    fn input(&self) -> Result<Signal> {
        let h = self.h();
        match &self.cfg.scenario.input {
            InputSpec::Signal(s) => Ok(s.clone()),
            InputSpec::Special(SpecialInput::File { path, periodic }) => {
                let (_, values) = io::read_csv(path)?;
                Ok(Signal::Samples {
                    dt: h,
                    values,
                    periodic: *periodic,
                })
            }
            InputSpec::Special(SpecialInput::Designed { result: Some(p) }) => {
                let r: DesignResult = serde_json::from_str(&std::fs::read_to_string(p)?)?;
                Ok(experiments::input_signal(&r, self.n_u()?, h))
            }
            InputSpec::Special(SpecialInput::Designed { result: None }) => {
                let (_, r) = self.design(false)?;
                Ok(experiments::input_signal(&r, self.n_u()?, h))
            }
        }
    }

    fn spec(&self, input: Signal, sigma: f64) -> ScenarioSpec {
        let e = &self.cfg.estimator;
        ScenarioSpec {
            fault: self.cfg.scenario.faults.clone(),
            input,
            disturbance: self.cfg.scenario.disturbance.clone(),
            sigma,
            h: e.h,
            t_end: e.t_end,
            oversample: e.oversample,
            seed: self.cfg.scenario.seed,
        }
    }

    fn constant_faults(&self) -> Option<DVector<f64>> {
        match &self.cfg.scenario.faults {
            FaultSignal::Constant { values } => Some(DVector::from_vec(values.clone())),
            FaultSignal::Basis { .. } => None,
        }
    }

    /// Bound inputs from the final window of a noiseless run.
    fn bound_inputs(&self, clean: &ScenarioResult, f: &DVector<f64>) -> Result<BoundInputs> {
        let n = self.cfg.estimator.window;
        if clean.samples() < n {
            return Err(Error::Config(format!("the run has fewer than N_window = {n} samples")));
        }
        let norms = estimator::noise_norms(&self.model, &self.gen, self.h())?;
        let window = clean.e.rows(clean.samples() - n, n).into_owned();
        Ok(BoundInputs {
            a: norms.a,
            eta_f: norms.eta_f,
            eta_w: norms.eta_w,
            gamma_f: norms.gamma_f,
            sigma: self.cfg.estimator.sigma,
            s: estimator::singular_values(&window),
            signal_peak: clean.signal_peak,
            f_norm: f.norm(),
            n,
            m: f.len(),
        })
    }
}

fn generators(cfg: &RunConfig, model: &DaeModel) -> Result<GeneratorSet> {
    let f = &cfg.filter;
    let gen = filter_design::design(model, f.degree, f.trials, f.seed)?;
    let poles: Vec<_> = f.poles.iter().map(|p| p.value()).collect();
    let need = gen.required_denominator_degree(model)?;
    let d = filter_design::make_denominator(&poles, f.normalize_dc, model.time_domain, need)?;
    gen.with_denominator(model, d)
}

fn trajectory(res: &ScenarioResult, cfg: &RunConfig) -> EstimateTrajectory {
    let e = &cfg.estimator;
    estimator::run_estimator_on(&res.t, &res.e, &res.r, e.window, e.stride, e.h)
}

/// Runs `command` and writes its artifacts plus the manifest into `dir`.
pub fn run(command: Command, cfg: &RunConfig, dir: &Path) -> Result<()> {
    cfg.validate()?;
    std::fs::create_dir_all(dir)?;
    let mut out = Out {
        dir: dir.to_path_buf(),
        files: Vec::new(),
    };
    match command {
        Command::DesignFilter => design_filter(cfg, &mut out)?,
        Command::DesignInput => design_input(&Context::new(cfg)?, &mut out)?,
        Command::Simulate => simulate(&Context::new(cfg)?, &mut out)?,
        Command::LargeFault => large_fault(&Context::new(cfg)?, &mut out)?,
        Command::TimeVarying => time_varying(&Context::new(cfg)?, &mut out)?,
        Command::Bounds => bounds(&Context::new(cfg)?, &mut out)?,
        Command::SdpExport => sdp_export(&Context::new(cfg)?, &mut out)?,
    }
    Manifest::update(dir, command, cfg, &out.files)
}

fn design_filter(cfg: &RunConfig, out: &mut Out) -> Result<()> {
    let model = match &cfg.model {
        Some(p) => DaeModel::load(p)?,
        None => pendulum::model()?,
    };
    let gen = generators(cfg, &model)?;
    out.json("generators.json", &gen)?;
    out.json(
        "filter_report.json",
        &json!({
            "degree": gen.degree,
            "annihilator_dimension": gen.null_dim,
            "s_min_blkrow_M": gen.s_min_blkrow_m,
            "trials_used": gen.trials_used,
            "seed": gen.seed,
        }),
    )
}

fn design_input(ctx: &Context, out: &mut Out) -> Result<()> {
    let (p, r) = ctx.design(ctx.cfg.design.sdp)?;
    r.write_csv(&out.path("input.csv"), p.n_u)?;
    out.json("design.json", &r)?;
    if ctx.cfg.design.sdp {
        input_design::export_sdpa(&p, &out.path("problem.dat-s"))?;
    }
    out.json(
        "design_report.json",
        &json!({
            "N_period": p.n_period,
            "states": p.ss.n_states(),
            "J": r.j,
            "singular_value": r.j.sqrt(),
            "sdp_upper": r.sdp_upper,
            "bracket": r.sdp_upper.map(|u| [r.j.sqrt(), u.sqrt()]),
            "seed": r.seed,
            "iterations": r.iterations,
        }),
    )
}

fn simulate(ctx: &Context, out: &mut Out) -> Result<()> {
    let input = ctx.input()?;
    let spec = ctx.spec(input, ctx.cfg.estimator.sigma);
    let pair = experiments::paired_run(&ctx.model, &ctx.gen, &spec)?;
    let res = &pair.noisy;
    res.write_csv(&out.path("scenario.csv"))?;
    out.files.push("scenario.seed.json".into());
    let tr = trajectory(res, &ctx.cfg);
    tr.write_csv(&out.path("estimates.csv"), res.e.ncols())?;

    let f = ctx.constant_faults();
    let final_relative_error = match (&f, tr.last()) {
        (Some(f), Some(last)) if f.norm() > 0.0 => Some((last - f).norm() / f.norm()),
        _ => None,
    };
    let report = match &f {
        Some(f) => Some(estimator::bound_report(&ctx.bound_inputs(&pair.clean, f)?)),
        None => None,
    };
    let summary = EstimateSummary {
        final_estimate: tr.last().map(|v| v.iter().copied().collect()),
        final_relative_error,
        bias_bound: report.as_ref().map(|r| r.bias_bound),
        bias_bound_proof_form: report.as_ref().map(|r| r.bias_bound_proof_form),
        variance_bound: report.as_ref().map(|r| r.variance_bound),
        snr: report.as_ref().map(|r| r.snr),
        effective_sv_series: tr.effective_sv.clone(),
    };
    out.json("summary.json", &summary)?;
    if let (Some(f), Some(stats)) = (&f, f.as_ref().and_then(|f| experiments::trajectory_stats(&tr, f))) {
        out.json(
            "error_stats.json",
            &json!({ "fault": f.as_slice(), "stats": stats, "noise_seed": res.seed }),
        )?;
    }
    Ok(())
}

fn large_fault(ctx: &Context, out: &mut Out) -> Result<()> {
    let input = ctx.input()?;
    let mut spec = ctx.spec(input, ctx.cfg.estimator.sigma);
    let lf = &ctx.cfg.large_fault;
    spec.t_end = lf.t_update;
    let settings = GnSettings {
        iterations: lf.iterations,
        window: ctx.cfg.estimator.window,
        stop_tol: lf.stop_tol,
    };
    let cfg = ctx.cfg.clone();
    let trace = experiments::gauss_newton_loop(&ctx.model, &spec, &settings, |m| generators(&cfg, m))?;
    out.json("large_fault.json", &trace)?;
    let m = ctx.model.m();
    let mut header = vec!["iteration".to_string()];
    header.extend((0..m).map(|i| format!("cumulative{}", i + 1)));
    header.extend((0..m).map(|i| format!("increment{}", i + 1)));
    header.push("relative_error".into());
    let rows: Vec<Vec<f64>> = trace
        .iterations
        .iter()
        .map(|it| {
            let mut row = vec![it.iteration as f64];
            row.extend(&it.cumulative);
            row.extend(&it.increment);
            row.push(it.relative_error.unwrap_or(f64::NAN));
            row
        })
        .collect();
    io::write_csv(&out.path("large_fault.csv"), &header, &rows)
}

fn time_varying(ctx: &Context, out: &mut Out) -> Result<()> {
    let basis = ctx
        .cfg
        .scenario
        .estimate_basis
        .clone()
        .ok_or_else(|| Error::Config("time-varying needs scenario.estimate_basis".into()))?;
    let input = ctx.input()?;
    let spec = ctx.spec(input, ctx.cfg.estimator.sigma);
    let cmp = experiments::tv_comparison(&ctx.model, &ctx.gen, &basis, &spec, ctx.cfg.estimator.window)?;
    let m = cmp.truth.ncols();
    let mut header = vec!["t".to_string()];
    for prefix in ["f", "f_const", "f_tv"] {
        header.extend((0..m).map(|i| format!("{prefix}{}", i + 1)));
    }
    let rows: Vec<Vec<f64>> = (0..cmp.t.len())
        .map(|k| {
            let mut row = vec![cmp.t[k]];
            row.extend(cmp.truth.row(k).iter());
            row.extend(cmp.constant.row(k).iter());
            row.extend(cmp.time_varying.row(k).iter());
            row
        })
        .collect();
    io::write_csv(&out.path("time_varying.csv"), &header, &rows)?;
    out.json(
        "time_varying.json",
        &json!({
            "rms_constant": cmp.rms_constant,
            "rms_time_varying": cmp.rms_time_varying,
            "noise_seed": spec.seed,
        }),
    )
}

fn bounds(ctx: &Context, out: &mut Out) -> Result<()> {
    let f = ctx
        .constant_faults()
        .ok_or_else(|| Error::Config("bounds need constant faults".into()))?;
    let input = ctx.input()?;
    let clean = ltisim::simulate_scenario(&ctx.model, &ctx.gen, &ctx.spec(input, 0.0))?;
    let b = ctx.bound_inputs(&clean, &f)?;
    let norms = estimator::noise_norms(&ctx.model, &ctx.gen, ctx.h())?;
    out.json(
        "bounds.json",
        &json!({
            "noise_norms": norms,
            "singular_values": b.s,
            "signal_peak": b.signal_peak,
            "report": estimator::bound_report(&b),
        }),
    )
}

fn sdp_export(ctx: &Context, out: &mut Out) -> Result<()> {
    let ss = input_design::regressor_system(&ctx.model, &ctx.gen, ctx.h())?;
    let d = &ctx.cfg.design;
    let p = input_design::build_problem(&ss, d.period, d.constraints.clone(), d.params())?;
    input_design::export_sdpa(&p, &out.path("problem.dat-s"))?;
    let sdp = input_design::sdp_bound(&p)?;
    out.json("sdp.json", &sdp)
}
