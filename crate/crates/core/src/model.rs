//! Faulty DAE models `H(q) xi + L(q) z + W(q) w + sum_i f_i (H'_i xi + L'_i z) = 0`
//! and their state-space origin.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::io::{from_rows, to_rows};
use crate::polymat::{PolyMatrix, TOL_RANK, TOL_SOLVE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeDomain {
    Continuous,
    Discrete,
}

/// Column partition: `xi = [x; d]` and `z = [y; u]`, in that order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub states: usize,
    pub disturbances: usize,
    pub outputs: usize,
    pub inputs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DaeFault {
    #[serde(rename = "H")]
    pub h: PolyMatrix,
    #[serde(rename = "L")]
    pub l: PolyMatrix,
}

/// Direction matrices of one fault in state-space form.
#[derive(Clone, Debug, PartialEq)]
pub struct SsFault {
    pub g: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub b_u: DMatrix<f64>,
    pub b_d: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d_u: DMatrix<f64>,
    pub d_d: DMatrix<f64>,
}

impl SsFault {
    pub fn zeros(n_x: usize, n_u: usize, n_d: usize, n_y: usize) -> Self {
        SsFault {
            g: DMatrix::zeros(n_x, n_x),
            a: DMatrix::zeros(n_x, n_x),
            b_u: DMatrix::zeros(n_x, n_u),
            b_d: DMatrix::zeros(n_x, n_d),
            c: DMatrix::zeros(n_y, n_x),
            d_u: DMatrix::zeros(n_y, n_u),
            d_d: DMatrix::zeros(n_y, n_d),
        }
    }
}

/// `G q x = A x + B_u u + B_d d + B_w w`, `y = C x + D_u u + D_d d + D_w w`,
/// with each fault adding `f_i` times its direction matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct StateSpaceModel {
    pub g: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub b_u: DMatrix<f64>,
    pub b_d: DMatrix<f64>,
    pub b_w: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d_u: DMatrix<f64>,
    pub d_d: DMatrix<f64>,
    pub d_w: DMatrix<f64>,
    pub faults: Vec<SsFault>,
    pub time_domain: TimeDomain,
}

impl StateSpaceModel {
    pub fn n_x(&self) -> usize {
        self.a.nrows()
    }
    pub fn n_u(&self) -> usize {
        self.b_u.ncols()
    }
    pub fn n_d(&self) -> usize {
        self.b_d.ncols()
    }
    pub fn n_w(&self) -> usize {
        self.b_w.ncols()
    }
    pub fn n_y(&self) -> usize {
        self.c.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let (nx, nu, nd, nw, ny) = (self.n_x(), self.n_u(), self.n_d(), self.n_w(), self.n_y());
        let checks = [
            ("G", self.g.shape(), (nx, nx)),
            ("A", self.a.shape(), (nx, nx)),
            ("B_u", self.b_u.shape(), (nx, nu)),
            ("B_d", self.b_d.shape(), (nx, nd)),
            ("B_w", self.b_w.shape(), (nx, nw)),
            ("C", self.c.shape(), (ny, nx)),
            ("D_u", self.d_u.shape(), (ny, nu)),
            ("D_d", self.d_d.shape(), (ny, nd)),
            ("D_w", self.d_w.shape(), (ny, nw)),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::DimensionMismatch(format!(
                    "{name} is {got:?}, expected {want:?}"
                )));
            }
        }
        for (i, f) in self.faults.iter().enumerate() {
            let z = SsFault::zeros(nx, nu, nd, ny);
            let pairs = [
                ("G'", &f.g, &z.g),
                ("A'", &f.a, &z.a),
                ("B'", &f.b_u, &z.b_u),
                ("B_d'", &f.b_d, &z.b_d),
                ("C'", &f.c, &z.c),
                ("D'", &f.d_u, &z.d_u),
                ("D_d'", &f.d_d, &z.d_d),
            ];
            for (name, got, want) in pairs {
                if got.shape() != want.shape() {
                    return Err(Error::DimensionMismatch(format!(
                        "fault {}: {name} is {:?}, expected {:?}",
                        i + 1,
                        got.shape(),
                        want.shape()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Nominal matrices moved to `f`; fault directions are kept.
    pub fn perturb(&self, f: &[f64]) -> Result<StateSpaceModel> {
        if f.len() != self.faults.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} fault values for {} faults",
                f.len(),
                self.faults.len()
            )));
        }
        let mut out = self.clone();
        for (fi, d) in f.iter().zip(&self.faults) {
            out.g += &d.g * *fi;
            out.a += &d.a * *fi;
            out.b_u += &d.b_u * *fi;
            out.b_d += &d.b_d * *fi;
            out.c += &d.c * *fi;
            out.d_u += &d.d_u * *fi;
            out.d_d += &d.d_d * *fi;
        }
        Ok(out)
    }

    /// Explicit form `q x = A x + [B_u B_d B_w] [u; d; w]` obtained by
    /// applying `G^{-1}`.
    pub fn explicit(&self) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let lu = self.g.clone().lu();
        let scale = self.g.norm().max(1e-300);
        let inv = lu.try_inverse().ok_or(Error::SingularDescriptor)?;
        let cond = inv.norm() * scale;
        if !cond.is_finite() || cond > 1e12 {
            return Err(Error::SingularDescriptor);
        }
        let b = crate::linalg::hcat(&[&self.b_u, &self.b_d, &self.b_w]);
        Ok((&inv * &self.a, &inv * b))
    }
}

/// The faulty DAE of the estimation problem.
#[derive(Clone, Debug, PartialEq)]
pub struct DaeModel {
    pub h: PolyMatrix,
    pub l: PolyMatrix,
    pub w: PolyMatrix,
    pub faults: Vec<DaeFault>,
    pub time_domain: TimeDomain,
    pub partition: Partition,
    /// State-space form the model was converted from, when available.
    pub state_space: Option<StateSpaceModel>,
}

/// Outcome of the nominal observability check.
#[derive(Clone, Debug)]
pub struct Observability {
    pub observable: bool,
    pub hdagger: Option<PolyMatrix>,
    pub k_max: usize,
    pub best_residual: f64,
}

impl DaeModel {
    pub fn new(
        h: PolyMatrix,
        l: PolyMatrix,
        w: PolyMatrix,
        faults: Vec<DaeFault>,
        time_domain: TimeDomain,
        partition: Partition,
    ) -> Result<Self> {
        let m = DaeModel {
            h,
            l,
            w,
            faults,
            time_domain,
            partition,
            state_space: None,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let nr = self.h.rows();
        if self.l.rows() != nr || self.w.rows() != nr {
            return Err(Error::DimensionMismatch("H, L and W must share rows".into()));
        }
        if self.faults.is_empty() {
            return Err(Error::DimensionMismatch("at least one fault is required".into()));
        }
        for (i, f) in self.faults.iter().enumerate() {
            if f.h.rows() != nr || f.h.cols() != self.h.cols() {
                return Err(Error::DimensionMismatch(format!("fault {}: H' shape", i + 1)));
            }
            if f.l.rows() != nr || f.l.cols() != self.l.cols() {
                return Err(Error::DimensionMismatch(format!("fault {}: L' shape", i + 1)));
            }
        }
        let p = &self.partition;
        if p.states + p.disturbances != self.n_xi() || p.outputs + p.inputs != self.n_z() {
            return Err(Error::DimensionMismatch(
                "partition does not cover the columns of H and L".into(),
            ));
        }
        Ok(())
    }

    pub fn n_r(&self) -> usize {
        self.h.rows()
    }
    pub fn n_xi(&self) -> usize {
        self.h.cols()
    }
    pub fn n_z(&self) -> usize {
        self.l.cols()
    }
    pub fn n_w(&self) -> usize {
        self.w.cols()
    }
    pub fn m(&self) -> usize {
        self.faults.len()
    }

    /// `H += sum f_i H'_i`, `L += sum f_i L'_i`; faults are unchanged.
    pub fn perturb(&self, f: &[f64]) -> Result<DaeModel> {
        if f.len() != self.m() {
            return Err(Error::DimensionMismatch(format!(
                "{} fault values for {} faults",
                f.len(),
                self.m()
            )));
        }
        let mut out = self.clone();
        for (fi, d) in f.iter().zip(&self.faults) {
            out.h = out.h.axpy(*fi, &d.h)?;
            out.l = out.l.axpy(*fi, &d.l)?;
        }
        if let Some(ss) = &self.state_space {
            out.state_space = Some(ss.perturb(f)?);
        }
        Ok(out)
    }

    pub fn check_nominal_observability(&self, k_max: usize) -> Observability {
        match self.h.left_inverse_tol(k_max, TOL_SOLVE, TOL_RANK) {
            Ok(hd) => Observability {
                observable: true,
                hdagger: Some(hd),
                k_max,
                best_residual: 0.0,
            },
            Err(Error::NoLeftInverse { best_residual, .. }) => Observability {
                observable: false,
                hdagger: None,
                k_max,
                best_residual,
            },
            Err(_) => Observability {
                observable: false,
                hdagger: None,
                k_max,
                best_residual: f64::INFINITY,
            },
        }
    }

    pub fn from_json_str(s: &str) -> Result<DaeModel> {
        let v: Value = serde_json::from_str(s)?;
        parse_model(&v)
    }

    pub fn load(path: &Path) -> Result<DaeModel> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Value {
        let td = serde_json::to_value(self.time_domain).unwrap();
        match &self.state_space {
            Some(ss) => serde_json::json!({
                "time_domain": td,
                "state_space": {
                    "G": to_rows(&ss.g), "A": to_rows(&ss.a), "B_u": to_rows(&ss.b_u),
                    "B_d": to_rows(&ss.b_d), "B_w": to_rows(&ss.b_w), "C": to_rows(&ss.c),
                    "D_u": to_rows(&ss.d_u), "D_d": to_rows(&ss.d_d), "D_w": to_rows(&ss.d_w),
                },
                "faults": ss.faults.iter().map(|f| serde_json::json!({
                    "G": to_rows(&f.g), "A": to_rows(&f.a), "B": to_rows(&f.b_u),
                    "B_d": to_rows(&f.b_d), "C": to_rows(&f.c), "D": to_rows(&f.d_u),
                    "D_d": to_rows(&f.d_d),
                })).collect::<Vec<_>>(),
            }),
            None => serde_json::json!({
                "time_domain": td,
                "partition": self.partition,
                "dae": { "H": self.h, "L": self.l, "W": self.w },
                "faults": self.faults,
            }),
        }
    }
}

/// Converts a state-space model into DAE form with `xi = [x; d]`, `z = [y; u]`.
pub fn to_dae(ss: &StateSpaceModel) -> Result<DaeModel> {
    ss.validate()?;
    if ss.faults.is_empty() {
        return Err(Error::DimensionMismatch("at least one fault is required".into()));
    }
    let (nx, nu, ny) = (ss.n_x(), ss.n_u(), ss.n_y());
    let dyn_block = |g: &DMatrix<f64>, a: &DMatrix<f64>| PolyMatrix::new(nx, nx, vec![a.clone(), -g]).expect("square");
    let c = |m: &DMatrix<f64>| PolyMatrix::constant(m.clone());
    let z = |r: usize, k: usize| PolyMatrix::zeros(r, k);

    let h = PolyMatrix::block(&[
        vec![&dyn_block(&ss.g, &ss.a), &c(&ss.b_d)],
        vec![&c(&ss.c), &c(&ss.d_d)],
    ])?;
    let neg_i = c(&(-DMatrix::<f64>::identity(ny, ny)));
    let l = PolyMatrix::block(&[vec![&z(nx, ny), &c(&ss.b_u)], vec![&neg_i, &c(&ss.d_u)]])?;
    let w = PolyMatrix::block(&[vec![&c(&ss.b_w)], vec![&c(&ss.d_w)]])?;
    let mut faults = Vec::with_capacity(ss.faults.len());
    for f in &ss.faults {
        let fh = PolyMatrix::block(&[vec![&dyn_block(&f.g, &f.a), &c(&f.b_d)], vec![&c(&f.c), &c(&f.d_d)]])?;
        let fl = PolyMatrix::block(&[vec![&z(nx, ny), &c(&f.b_u)], vec![&z(ny, ny), &c(&f.d_u)]])?;
        faults.push(DaeFault { h: fh, l: fl });
    }
    let mut m = DaeModel::new(
        h,
        l,
        w,
        faults,
        ss.time_domain,
        Partition {
            states: nx,
            disturbances: ss.n_d(),
            outputs: ny,
            inputs: nu,
        },
    )?;
    m.state_space = Some(ss.clone());
    Ok(m)
}

fn mat_field(v: &Value, key: &str, shape: (usize, usize)) -> Result<DMatrix<f64>> {
    match v.get(key) {
        None | Some(Value::Null) => Ok(DMatrix::zeros(shape.0, shape.1)),
        Some(x) => {
            let rows: Vec<Vec<f64>> = serde_json::from_value(x.clone())?;
            let m = if rows.is_empty() {
                DMatrix::zeros(0, shape.1)
            } else {
                from_rows(&rows, Some(shape.1), key)?
            };
            if m.shape() != shape {
                return Err(Error::DimensionMismatch(format!(
                    "{key} is {:?}, expected {shape:?}",
                    m.shape()
                )));
            }
            Ok(m)
        }
    }
}

fn required_rows(v: &Value, key: &str) -> Result<DMatrix<f64>> {
    let x = v
        .get(key)
        .ok_or_else(|| Error::Config(format!("state_space.{key} is required")))?;
    let rows: Vec<Vec<f64>> = serde_json::from_value(x.clone())?;
    from_rows(&rows, None, key)
}

fn width_of(v: &Value, key: &str) -> Option<usize> {
    let rows = v.get(key)?.as_array()?;
    rows.first().and_then(|r| r.as_array()).map(|r| r.len())
}

fn parse_state_space(ss: &Value, faults: &[Value], td: TimeDomain) -> Result<StateSpaceModel> {
    let a = required_rows(ss, "A")?;
    let c = required_rows(ss, "C")?;
    let nx = a.nrows();
    let ny = c.nrows();
    let nu = width_of(ss, "B_u").or_else(|| width_of(ss, "D_u")).unwrap_or(0);
    let nd = width_of(ss, "B_d").or_else(|| width_of(ss, "D_d")).unwrap_or(0);
    let nw = width_of(ss, "B_w").or_else(|| width_of(ss, "D_w")).unwrap_or(0);
    let g = match ss.get("G") {
        None | Some(Value::Null) => DMatrix::identity(nx, nx),
        Some(_) => mat_field(ss, "G", (nx, nx))?,
    };
    let mut model = StateSpaceModel {
        g,
        a,
        b_u: mat_field(ss, "B_u", (nx, nu))?,
        b_d: mat_field(ss, "B_d", (nx, nd))?,
        b_w: mat_field(ss, "B_w", (nx, nw))?,
        c: mat_field(ss, "C", (ny, nx))?,
        d_u: mat_field(ss, "D_u", (ny, nu))?,
        d_d: mat_field(ss, "D_d", (ny, nd))?,
        d_w: mat_field(ss, "D_w", (ny, nw))?,
        faults: vec![],
        time_domain: td,
    };
    for f in faults {
        model.faults.push(SsFault {
            g: mat_field(f, "G", (nx, nx))?,
            a: mat_field(f, "A", (nx, nx))?,
            b_u: mat_field(f, "B", (nx, nu))?,
            b_d: mat_field(f, "B_d", (nx, nd))?,
            c: mat_field(f, "C", (ny, nx))?,
            d_u: mat_field(f, "D", (ny, nu))?,
            d_d: mat_field(f, "D_d", (ny, nd))?,
        });
    }
    model.validate()?;
    Ok(model)
}

fn parse_model(v: &Value) -> Result<DaeModel> {
    let td: TimeDomain = match v.get("time_domain") {
        Some(x) => serde_json::from_value(x.clone())?,
        None => return Err(Error::Config("time_domain is required".into())),
    };
    let faults: Vec<Value> = match v.get("faults") {
        Some(Value::Array(a)) => a.clone(),
        _ => return Err(Error::Config("faults must be a list".into())),
    };
    if let Some(ss) = v.get("state_space") {
        let ss = parse_state_space(ss, &faults, td)?;
        return to_dae(&ss);
    }
    let dae = v
        .get("dae")
        .ok_or_else(|| Error::Config("model needs a `dae` or `state_space` section".into()))?;
    let get = |k: &str| -> Result<PolyMatrix> {
        let x = dae
            .get(k)
            .ok_or_else(|| Error::Config(format!("dae.{k} is required")))?;
        Ok(serde_json::from_value(x.clone())?)
    };
    let h = get("H")?;
    let l = get("L")?;
    let w = match dae.get("W") {
        Some(x) => serde_json::from_value(x.clone())?,
        None => PolyMatrix::zeros(h.rows(), 1),
    };
    let faults: Vec<DaeFault> = faults
        .into_iter()
        .map(serde_json::from_value)
        .collect::<std::result::Result<_, _>>()?;
    let partition = match v.get("partition") {
        Some(p) => serde_json::from_value(p.clone())?,
        None => Partition {
            states: h.cols(),
            disturbances: 0,
            outputs: 0,
            inputs: l.cols(),
        },
    };
    DaeModel::new(h, l, w, faults, td, partition)
}

/// Scalar integrator `q x = u`, `y = x` with a single actuator fault; handy in tests.
pub fn integrator_example() -> StateSpaceModel {
    let one = DMatrix::from_element(1, 1, 1.0);
    StateSpaceModel {
        g: one.clone(),
        a: DMatrix::zeros(1, 1),
        b_u: one.clone(),
        b_d: DMatrix::zeros(1, 0),
        b_w: DMatrix::zeros(1, 0),
        c: one.clone(),
        d_u: DMatrix::zeros(1, 1),
        d_d: DMatrix::zeros(1, 0),
        d_w: DMatrix::zeros(1, 0),
        faults: vec![SsFault {
            b_u: one,
            ..SsFault::zeros(1, 1, 0, 1)
        }],
        time_domain: TimeDomain::Continuous,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integrator_conversion() {
        let dae = to_dae(&integrator_example()).unwrap();
        assert_eq!(dae.h.degree(), 1);
        assert_eq!(dae.h.coeff(0), DMatrix::from_row_slice(2, 1, &[0.0, 1.0]));
        assert_eq!(dae.h.coeff(1), DMatrix::from_row_slice(2, 1, &[-1.0, 0.0]));
        assert_eq!(
            dae.l,
            PolyMatrix::constant(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]))
        );
        assert_eq!(
            dae.partition,
            Partition {
                states: 1,
                disturbances: 0,
                outputs: 1,
                inputs: 1
            }
        );
        // the fault only touches L
        assert!(dae.faults[0].h.is_zero());
        assert_eq!(
            dae.faults[0].l.coeff(0),
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0])
        );
    }

    #[test]
    fn observability_examples() {
        let dae = to_dae(&integrator_example()).unwrap();
        let obs = dae.check_nominal_observability(3);
        assert!(obs.observable);
        let mut bad = dae.clone();
        bad.h = PolyMatrix::new(
            2,
            1,
            vec![
                DMatrix::zeros(2, 1),
                DMatrix::from_row_slice(2, 1, &[1.0, 0.0]),
                DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            ],
        )
        .unwrap();
        assert!(!bad.check_nominal_observability(4).observable);
        let mut id = dae;
        id.h = PolyMatrix::identity(2);
        id.faults = vec![DaeFault {
            h: PolyMatrix::zeros(2, 2),
            l: PolyMatrix::zeros(2, 2),
        }];
        let obs = id.check_nominal_observability(2);
        assert!(obs.observable);
        assert!((obs.hdagger.unwrap().coeff(0) - DMatrix::<f64>::identity(2, 2)).norm() < 1e-12);
    }

    #[test]
    fn perturb_is_additive() {
        let dae = to_dae(&integrator_example()).unwrap();
        assert_eq!(dae.perturb(&[0.0]).unwrap(), dae);
        let two = dae.perturb(&[0.1]).unwrap().perturb(&[0.2]).unwrap();
        let one = dae.perturb(&[0.3]).unwrap();
        assert!((two.l.blkrow() - one.l.blkrow()).norm() < 1e-15);
        assert!(dae.perturb(&[0.1, 0.2]).is_err());
    }

    #[test]
    fn json_round_trip_both_forms() {
        let dae = to_dae(&integrator_example()).unwrap();
        let back = DaeModel::from_json_str(&dae.to_json().to_string()).unwrap();
        assert_eq!(back, dae);
        let mut plain = dae.clone();
        plain.state_space = None;
        let back = DaeModel::from_json_str(&plain.to_json().to_string()).unwrap();
        assert_eq!(back, plain);
    }

    #[test]
    fn rejects_bad_shapes() {
        let s =
            r#"{"time_domain":"continuous","state_space":{"A":[[0.0]],"B_u":[[1.0],[1.0]],"C":[[1.0]]},"faults":[{}]}"#;
        assert!(matches!(DaeModel::from_json_str(s), Err(Error::DimensionMismatch(_))));
        let s = r#"{"time_domain":"continuous","state_space":{"A":[[0.0]],"B_u":[[1.0]],"C":[[1.0]]},"faults":[]}"#;
        assert!(DaeModel::from_json_str(s).is_err());
    }

    #[test]
    fn singular_descriptor_is_reported() {
        let mut ss = integrator_example();
        ss.g = DMatrix::zeros(1, 1);
        assert!(matches!(ss.explicit(), Err(Error::SingularDescriptor)));
    }
}
