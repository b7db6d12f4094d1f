//! Time integration of IPHS trajectories under given control signals and
//! verification of the energy/entropy balance laws along them.

use std::io::{BufRead, Write};
use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Control, CostWeights, IphsModel, ModelError, State};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("state left the model domain at t = {t:.6}")]
    LeftDomain { t: f64, last_state: Vec<f64> },
    #[error("step size underflow at t = {t:.6}; problem too stiff for the explicit integrator")]
    StepUnderflow { t: f64 },
    #[error("maximum number of integration steps exceeded")]
    MaxSteps,
    #[error("invalid control signal: {0}")]
    Control(String),
    #[error("invalid trajectory: {0}")]
    Trajectory(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

/// Control signal in `L^inf`; piecewise-constant signals are held with a
/// zero-order hold (right-continuous).
#[derive(Clone)]
pub enum ControlSignal {
    Zero,
    PiecewiseConstant {
        /// Segment start times, strictly increasing; `values[k]` applies on
        /// `[grid[k], grid[k+1])` and `values[0]` before `grid[0]`.
        grid: Vec<f64>,
        values: Vec<Control>,
    },
    Callable {
        f: Arc<dyn Fn(f64, &State) -> Control + Send + Sync>,
        /// Times where the signal may jump; the integrator restarts there.
        breakpoints: Vec<f64>,
    },
}

impl ControlSignal {
    pub fn constant(value: Control) -> Self {
        ControlSignal::PiecewiseConstant { grid: vec![0.0], values: vec![value] }
    }

    pub fn piecewise(grid: Vec<f64>, values: Vec<Control>) -> Result<Self, SimError> {
        if grid.len() != values.len() || grid.is_empty() {
            return Err(SimError::Control("grid and values lengths must match".into()));
        }
        if grid.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(SimError::Control("grid must be strictly increasing".into()));
        }
        Ok(ControlSignal::PiecewiseConstant { grid, values })
    }

    pub fn eval(&self, t: f64, x: &State, m: usize) -> Control {
        match self {
            ControlSignal::Zero => DVector::zeros(m),
            ControlSignal::PiecewiseConstant { grid, values } => {
                let idx = match grid.binary_search_by(|g| g.partial_cmp(&t).unwrap()) {
                    Ok(i) => i,
                    Err(0) => 0,
                    Err(i) => i - 1,
                };
                values[idx].clone()
            }
            ControlSignal::Callable { f, .. } => f(t, x),
        }
    }

    pub fn breakpoints(&self) -> Vec<f64> {
        match self {
            ControlSignal::Zero => vec![],
            ControlSignal::PiecewiseConstant { grid, .. } => grid.clone(),
            ControlSignal::Callable { breakpoints, .. } => breakpoints.clone(),
        }
    }

    /// Largest |u| over the values of a piecewise-constant signal within the
    /// declared box; used for feasibility checks.
    pub fn within_box(&self, lo: &Control, hi: &Control) -> bool {
        match self {
            ControlSignal::Zero => (0..lo.len()).all(|i| lo[i] <= 0.0 && 0.0 <= hi[i]),
            ControlSignal::PiecewiseConstant { values, .. } => values
                .iter()
                .all(|v| (0..v.len()).all(|i| lo[i] <= v[i] && v[i] <= hi[i])),
            ControlSignal::Callable { .. } => true,
        }
    }
}

impl std::fmt::Debug for ControlSignal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ControlSignal::Zero => write!(f, "Zero"),
            ControlSignal::PiecewiseConstant { grid, .. } => {
                write!(f, "PiecewiseConstant({} segments)", grid.len())
            }
            ControlSignal::Callable { breakpoints, .. } => {
                write!(f, "Callable({} breakpoints)", breakpoints.len())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    Dopri5,
    Rk4,
}

#[derive(Debug, Clone)]
pub struct IntegratorOpts {
    pub method: Integrator,
    pub abs_tol: f64,
    pub rel_tol: f64,
    /// Step size of the fixed-step classical Runge-Kutta scheme.
    pub fixed_step: f64,
    /// Dense-output nodes are emitted at most this far apart.
    pub max_output_step: f64,
    pub max_steps: usize,
}

impl Default for IntegratorOpts {
    fn default() -> Self {
        Self {
            method: Integrator::Dopri5,
            abs_tol: 1e-10,
            rel_tol: 1e-8,
            fixed_step: 1e-3,
            max_output_step: 0.02,
            max_steps: 10_000_000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub model_id: String,
    pub integrator: String,
    pub abs_tol: f64,
    pub rel_tol: f64,
}

impl Default for TrajectoryMeta {
    fn default() -> Self {
        Self { model_id: String::new(), integrator: String::new(), abs_tol: 0.0, rel_tol: 0.0 }
    }
}

/// Time grid, state samples and control samples. The control stored at node
/// `k` is the value held on the interval to the right of `t[k]`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub t: Vec<f64>,
    pub x: Vec<State>,
    pub u: Vec<Control>,
    pub meta: TrajectoryMeta,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn t_f(&self) -> f64 {
        *self.t.last().unwrap()
    }

    pub fn endpoint(&self) -> &State {
        self.x.last().unwrap()
    }

    pub fn validate(&self, n: usize, m: usize) -> Result<(), SimError> {
        if self.t.len() < 2 || self.t.len() != self.x.len() || self.t.len() != self.u.len() {
            return Err(SimError::Trajectory("inconsistent lengths".into()));
        }
        if self.t.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(SimError::Trajectory("time grid not strictly increasing".into()));
        }
        for x in &self.x {
            if x.len() != n || x.iter().any(|v| !v.is_finite()) {
                return Err(SimError::Trajectory("non-finite or mis-sized state".into()));
            }
        }
        if self.u.iter().any(|u| u.len() != m) {
            return Err(SimError::Trajectory("mis-sized control".into()));
        }
        Ok(())
    }

    /// CSV with columns `t, x1..xn, u1..um`, 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), SimError> {
        let n = self.x.first().map_or(0, |x| x.len());
        let m = self.u.first().map_or(0, |u| u.len());
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        header.extend((1..=m).map(|i| format!("u{i}")));
        writeln!(w, "{}", header.join(","))?;
        for k in 0..self.t.len() {
            let mut row = vec![format!("{:.16e}", self.t[k])];
            row.extend(self.x[k].iter().map(|v| format!("{v:.16e}")));
            row.extend(self.u[k].iter().map(|v| format!("{v:.16e}")));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self, SimError> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| SimError::Parse("empty csv".into()))??;
        let cols: Vec<&str> = header.trim().split(',').collect();
        let n = cols.iter().filter(|c| c.starts_with('x')).count();
        let m = cols.iter().filter(|c| c.starts_with('u')).count();
        if cols.first() != Some(&"t") || cols.len() != 1 + n + m {
            return Err(SimError::Parse("unexpected csv header".into()));
        }
        let mut t = Vec::new();
        let mut x = Vec::new();
        let mut u = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .trim()
                .split(',')
                .map(|v| v.parse::<f64>().map_err(|e| SimError::Parse(e.to_string())))
                .collect::<Result<_, _>>()?;
            if vals.len() != 1 + n + m {
                return Err(SimError::Parse("row width mismatch".into()));
            }
            t.push(vals[0]);
            x.push(DVector::from_vec(vals[1..1 + n].to_vec()));
            u.push(DVector::from_vec(vals[1 + n..].to_vec()));
        }
        Ok(Self { t, x, u, meta: TrajectoryMeta::default() })
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "schema_version": 1,
            "meta": self.meta,
            "t": self.t,
            "x": self.x.iter().map(|v| v.iter().copied().collect::<Vec<f64>>()).collect::<Vec<_>>(),
            "u": self.u.iter().map(|v| v.iter().copied().collect::<Vec<f64>>()).collect::<Vec<_>>(),
        })
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self, SimError> {
        #[derive(Deserialize)]
        struct Mirror {
            #[serde(default)]
            meta: TrajectoryMeta,
            t: Vec<f64>,
            x: Vec<Vec<f64>>,
            u: Vec<Vec<f64>>,
        }
        let m: Mirror =
            serde_json::from_value(v.clone()).map_err(|e| SimError::Parse(e.to_string()))?;
        Ok(Self {
            t: m.t,
            x: m.x.into_iter().map(DVector::from_vec).collect(),
            u: m.u.into_iter().map(DVector::from_vec).collect(),
            meta: m.meta,
        })
    }
}

/// Integrated balance quantities of a trajectory (energy/entropy balance).
#[derive(Debug, Clone, Serialize)]
pub struct BalanceReport {
    pub energy_residual: f64,
    pub entropy_residual: f64,
    /// Integral of the entropy production R along the trajectory.
    pub produced_entropy: f64,
    /// Integral of y_H^T u (power supplied).
    pub supplied_energy: f64,
    /// Integral of y_S^T u (entropy flow supplied).
    pub supplied_entropy: f64,
}

/// Quadrature and identity-form evaluation of the transition cost.
#[derive(Debug, Clone, Serialize)]
pub struct CostBreakdown {
    /// Quadrature of the stage cost along the trajectory.
    pub quadrature: f64,
    /// `alpha1 (H(t_f) - H(0)) + alpha2 T0 (S(0) - S(t_f) + int R)`.
    pub identity: f64,
    pub discrepancy: f64,
}

// Dormand-Prince 5(4) coefficients.
const A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const C: [f64; 6] = [1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];
// Dense-output weights of the 4th-order continuous extension.
const D: [f64; 7] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];

struct OutputSink<'a> {
    model: &'a IphsModel,
    control: &'a ControlSignal,
    t: Vec<f64>,
    x: Vec<State>,
    u: Vec<Control>,
}

impl<'a> OutputSink<'a> {
    fn push(&mut self, t: f64, x: State) -> Result<(), SimError> {
        if !self.model.domain().contains(&x) {
            return Err(SimError::LeftDomain {
                t,
                last_state: self.x.last().map(|s| s.iter().copied().collect()).unwrap_or_default(),
            });
        }
        let u = self.control.eval(t, &x, self.model.input_dim());
        self.t.push(t);
        self.x.push(x);
        self.u.push(u);
        Ok(())
    }
}

/// Integrate the controlled IPHS from `x0` over `[0, t_f]`.
pub fn integrate(
    model: &IphsModel,
    x0: &State,
    control: &ControlSignal,
    t_f: f64,
    opts: &IntegratorOpts,
) -> Result<Trajectory, SimError> {
    model.check_state(x0)?;
    if !(t_f > 0.0) {
        return Err(SimError::Trajectory("horizon must be positive".into()));
    }

    // Segment boundaries: control breakpoints inside (0, t_f).
    let mut bounds = vec![0.0];
    for b in control.breakpoints() {
        if b > 1e-14 && b < t_f - 1e-14 {
            bounds.push(b);
        }
    }
    bounds.push(t_f);
    bounds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    bounds.dedup_by(|a, b| (*a - *b).abs() < 1e-13);

    let mut sink = OutputSink { model, control, t: vec![], x: vec![], u: vec![] };
    if !model.domain().contains(x0) {
        return Err(SimError::LeftDomain { t: 0.0, last_state: x0.iter().copied().collect() });
    }
    sink.push(0.0, x0.clone())?;

    let mut steps_used = 0usize;
    let mut y = x0.clone();
    for seg in bounds.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        // Clamp control evaluation strictly inside the segment: stages at the
        // right endpoint must not pick up the next segment's held value.
        let guard = b - 1e-12 * (1.0 + b.abs());
        let rhs = |t: f64, x: &State| -> State {
            let u = control.eval(t.min(guard), x, model.input_dim());
            model.rhs_unchecked(x, &u)
        };
        y = match opts.method {
            Integrator::Dopri5 => {
                dopri5_segment(&rhs, a, b, y, opts, &mut sink, &mut steps_used)?
            }
            Integrator::Rk4 => rk4_segment(&rhs, a, b, y, opts, &mut sink, &mut steps_used)?,
        };
    }

    Ok(Trajectory {
        t: sink.t,
        x: sink.x,
        u: sink.u,
        meta: TrajectoryMeta {
            model_id: model.id().to_string(),
            integrator: match opts.method {
                Integrator::Dopri5 => "dopri5".into(),
                Integrator::Rk4 => "rk4".into(),
            },
            abs_tol: opts.abs_tol,
            rel_tol: opts.rel_tol,
        },
    })
}

#[allow(clippy::too_many_arguments)]
fn dopri5_segment(
    rhs: &impl Fn(f64, &State) -> State,
    t_start: f64,
    t_end: f64,
    y0: State,
    opts: &IntegratorOpts,
    sink: &mut OutputSink,
    steps_used: &mut usize,
) -> Result<State, SimError> {
    let n = y0.len();
    let mut t = t_start;
    let mut y = y0;
    let mut k1 = rhs(t, &y);
    let seg_len = t_end - t_start;
    let mut h = (seg_len / 100.0).min(0.1).max(1e-8);

    while t < t_end - 1e-14 * (1.0 + t.abs()) {
        *steps_used += 1;
        if *steps_used > opts.max_steps {
            return Err(SimError::MaxSteps);
        }
        h = h.min(t_end - t);

        let mut k = vec![k1.clone()];
        for s in 0..6 {
            let mut ys = y.clone();
            for (j, kj) in k.iter().enumerate() {
                if A[s][j] != 0.0 {
                    ys += kj * (h * A[s][j]);
                }
            }
            k.push(rhs(t + C[s] * h, &ys));
        }
        // Stage 7 is evaluated at the candidate solution (FSAL).
        let mut y_new = y.clone();
        for (j, kj) in k.iter().enumerate().take(6) {
            if A[5][j] != 0.0 {
                y_new += kj * (h * A[5][j]);
            }
        }
        let k7 = k.pop().unwrap(); // rhs at (t + h, y_new)

        let mut err_sq = 0.0;
        let mut err_vec = DVector::zeros(n);
        for (j, kj) in k.iter().enumerate() {
            if E[j] != 0.0 {
                err_vec += kj * E[j];
            }
        }
        err_vec += &k7 * E[6];
        for i in 0..n {
            let sc = opts.abs_tol + opts.rel_tol * y[i].abs().max(y_new[i].abs());
            let e = h * err_vec[i] / sc;
            err_sq += e * e;
        }
        let err = (err_sq / n as f64).sqrt();

        if err <= 1.0 || h <= 1e-13 * (1.0 + t.abs()) {
            // Accept; emit dense output on the refinement of this step.
            let ydiff = &y_new - &y;
            let bspl = &k1 * h - &ydiff;
            let rcont4 = &ydiff - &k7 * h - &bspl;
            let mut rcont5 = DVector::zeros(n);
            for (j, kj) in k.iter().enumerate() {
                if D[j] != 0.0 {
                    rcont5 += kj * D[j];
                }
            }
            rcont5 += &k7 * D[6];
            rcont5 *= h;

            let n_sub = ((h / opts.max_output_step).ceil() as usize).max(1);
            for s in 1..=n_sub {
                let theta = s as f64 / n_sub as f64;
                let t_node = if s == n_sub { (t + h).min(t_end) } else { t + theta * h };
                let xi = if s == n_sub {
                    y_new.clone()
                } else {
                    // Hairer's continuous extension.
                    &y + (&ydiff
                        + (&bspl + (&rcont4 + &rcont5 * (1.0 - theta)) * theta) * (1.0 - theta))
                        * theta
                };
                sink.push(t_node, xi)?;
            }

            t += h;
            y = y_new;
            k1 = rhs(t, &y); // re-evaluate: control may jump exactly at t.
        }

        let factor = if err > 0.0 { 0.9 * err.powf(-0.2) } else { 5.0 };
        h *= factor.clamp(0.2, 5.0);
        if h < 1e-14 * (1.0 + t.abs()) {
            return Err(SimError::StepUnderflow { t });
        }
    }
    Ok(y)
}

#[allow(clippy::too_many_arguments)]
fn rk4_segment(
    rhs: &impl Fn(f64, &State) -> State,
    t_start: f64,
    t_end: f64,
    y0: State,
    opts: &IntegratorOpts,
    sink: &mut OutputSink,
    steps_used: &mut usize,
) -> Result<State, SimError> {
    let seg_len = t_end - t_start;
    let n_steps = (seg_len / opts.fixed_step).ceil().max(1.0) as usize;
    let h = seg_len / n_steps as f64;
    let mut y = y0;
    for s in 0..n_steps {
        *steps_used += 1;
        if *steps_used > opts.max_steps {
            return Err(SimError::MaxSteps);
        }
        let t = t_start + s as f64 * h;
        let k1 = rhs(t, &y);
        let k2 = rhs(t + 0.5 * h, &(&y + &k1 * (0.5 * h)));
        let k3 = rhs(t + 0.5 * h, &(&y + &k2 * (0.5 * h)));
        let k4 = rhs(t + h, &(&y + &k3 * h));
        y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        let t_node = if s + 1 == n_steps { t_end } else { t + h };
        sink.push(t_node, y.clone())?;
    }
    Ok(y)
}

/// Integral of the exact quadratic through three nodes over `[a, b]`.
fn quad_through_three(t0: f64, t1: f64, t2: f64, y0: f64, y1: f64, y2: f64, a: f64, b: f64) -> f64 {
    let poly_int = |p: f64, q: f64, a: f64, b: f64| -> f64 {
        // integral of (t - p)(t - q) over [a, b]
        let f = |t: f64| t * t * t / 3.0 - (p + q) * t * t / 2.0 + p * q * t;
        f(b) - f(a)
    };
    y0 * poly_int(t1, t2, a, b) / ((t0 - t1) * (t0 - t2))
        + y1 * poly_int(t0, t2, a, b) / ((t1 - t0) * (t1 - t2))
        + y2 * poly_int(t0, t1, a, b) / ((t2 - t0) * (t2 - t1))
}

/// Composite Simpson-type quadrature of node values on a (possibly
/// non-uniform) grid; the integrand is assumed smooth between nodes.
pub fn integrate_series(t: &[f64], y: &[f64]) -> f64 {
    assert_eq!(t.len(), y.len());
    if t.len() < 2 {
        return 0.0;
    }
    if t.len() == 2 {
        return 0.5 * (t[1] - t[0]) * (y[0] + y[1]);
    }
    let last = t.len() - 1;
    let mut total = 0.0;
    let mut k = 0;
    while k + 2 <= last {
        total += quad_through_three(
            t[k], t[k + 1], t[k + 2], y[k], y[k + 1], y[k + 2], t[k], t[k + 2],
        );
        k += 2;
    }
    if k + 1 == last {
        // Odd leftover: quadratic through the final triple over the last
        // interval only.
        total += quad_through_three(
            t[last - 2], t[last - 1], t[last], y[last - 2], y[last - 1], y[last],
            t[last - 1], t[last],
        );
    }
    total
}

/// Node-index ranges on which the control held to the right is constant.
/// The last node of each run carries the next run's control sample, so
/// integrands depending on `u` must be re-evaluated with the run's control.
fn control_runs(traj: &Trajectory) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start = 0usize;
    for k in 1..traj.u.len() - 1 {
        if traj.u[k] != traj.u[k - 1] {
            runs.push((start, k));
            start = k;
        }
    }
    runs.push((start, traj.u.len() - 1));
    runs
}

/// Integrate a control-dependent node function run-by-run, using each run's
/// own control for every node of the run (including its right endpoint).
fn integrate_with_control(
    traj: &Trajectory,
    f: impl Fn(usize, &Control) -> f64,
) -> f64 {
    let mut total = 0.0;
    for (i0, i1) in control_runs(traj) {
        let uc = traj.u[i0].clone();
        let t = &traj.t[i0..=i1];
        let y: Vec<f64> = (i0..=i1).map(|k| f(k, &uc)).collect();
        total += integrate_series(t, &y);
    }
    total
}

/// Check the energy and entropy balance laws along a trajectory.
pub fn balance_report(model: &IphsModel, traj: &Trajectory) -> Result<BalanceReport, SimError> {
    traj.validate(model.state_dim(), model.input_dim())?;
    let supplied_energy = integrate_with_control(traj, |k, uc| {
        let (y_h, _) = model.outputs_unchecked(&traj.x[k]);
        y_h.dot(uc)
    });
    let supplied_entropy = integrate_with_control(traj, |k, uc| {
        let (_, y_s) = model.outputs_unchecked(&traj.x[k]);
        y_s.dot(uc)
    });
    // R is continuous but kinked where the control jumps; split there too.
    let produced_entropy =
        integrate_with_control(traj, |k, _| model.entropy_production_unchecked(&traj.x[k]));

    let h0 = model.hamiltonian().eval(&traj.x[0]);
    let hf = model.hamiltonian().eval(traj.endpoint());
    let s0 = model.entropy().eval(&traj.x[0]);
    let sf = model.entropy().eval(traj.endpoint());

    Ok(BalanceReport {
        energy_residual: (hf - h0 - supplied_energy).abs(),
        entropy_residual: (sf - s0 - produced_entropy - supplied_entropy).abs(),
        produced_entropy,
        supplied_energy,
        supplied_entropy,
    })
}

/// Evaluate the transition cost along a trajectory both by quadrature of the
/// stage cost and through the balance-law identity.
pub fn cost_of_trajectory(
    model: &IphsModel,
    traj: &Trajectory,
    weights: &CostWeights,
) -> Result<CostBreakdown, SimError> {
    traj.validate(model.state_dim(), model.input_dim())?;
    CostWeights::new(weights.alpha1, weights.alpha2, weights.t0)?;
    let quadrature = integrate_with_control(traj, |k, uc| {
        model.stage_cost_unchecked(&traj.x[k], uc, weights)
    });
    let int_r =
        integrate_with_control(traj, |k, _| model.entropy_production_unchecked(&traj.x[k]));

    let dh = model.hamiltonian().eval(traj.endpoint()) - model.hamiltonian().eval(&traj.x[0]);
    let ds = model.entropy().eval(traj.endpoint()) - model.entropy().eval(&traj.x[0]);
    let identity = weights.alpha1 * dh + weights.alpha2 * weights.t0 * (-ds + int_r);

    Ok(CostBreakdown { quadrature, identity, discrepancy: (quadrature - identity).abs() })
}
