//! Minimal energy/entropy/exergy state-transition problems solved by direct
//! transcription: trapezoidal collocation with zero-order-hold controls, an
//! augmented-Lagrangian outer loop and a projected quasi-Newton inner solver.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::model::{Control, CostWeights, IphsModel, ModelError, State};
use crate::sim::{integrate, ControlSignal, IntegratorOpts, SimError, Trajectory, TrajectoryMeta};
use crate::solver::{minimize_box_precond, BandedCholesky, LbfgsOpts};

#[derive(Debug, Error)]
pub enum OcpError {
    #[error("invalid problem: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("phase {phase} steering verification failed: miss distance {miss:.3e} > {tol:.3e}")]
    PhaseVerification { phase: u8, miss: f64, tol: f64 },
    #[error("non-finite value encountered in model evaluation")]
    NonFinite,
}

/// Target of the state transition.
#[derive(Clone)]
pub enum TerminalSet {
    Point(State),
    /// General closed set given by a membership test and a projection; used
    /// through a quadratic penalty on the terminal node.
    Set {
        contains: Arc<dyn Fn(&State) -> bool + Send + Sync>,
        project: Arc<dyn Fn(&State) -> State + Send + Sync>,
    },
}

impl TerminalSet {
    pub fn miss(&self, x: &State) -> f64 {
        match self {
            TerminalSet::Point(p) => (x - p).norm(),
            TerminalSet::Set { project, .. } => (x - &project(x)).norm(),
        }
    }
}

impl std::fmt::Debug for TerminalSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TerminalSet::Point(p) => write!(f, "Point({:?})", p.as_slice()),
            TerminalSet::Set { .. } => write!(f, "Set(..)"),
        }
    }
}

/// State-transition optimal control problem over `[0, t_f]`.
#[derive(Clone)]
pub struct OcpSpec {
    pub model: Arc<IphsModel>,
    pub x0: State,
    pub terminal: TerminalSet,
    pub t_f: f64,
    pub control_lo: Control,
    pub control_hi: Control,
    pub weights: CostWeights,
}

impl OcpSpec {
    pub fn new(
        model: Arc<IphsModel>,
        x0: State,
        terminal: TerminalSet,
        t_f: f64,
        control_lo: Control,
        control_hi: Control,
        weights: CostWeights,
    ) -> Result<Self, OcpError> {
        model.check_state(&x0)?;
        if !(t_f > 0.0) {
            return Err(OcpError::Invalid("horizon must be positive".into()));
        }
        let m = model.input_dim();
        if control_lo.len() != m || control_hi.len() != m {
            return Err(OcpError::Invalid("control box dimension mismatch".into()));
        }
        for i in 0..m {
            // The admissible set must be compact, convex and contain 0.
            if !(control_lo[i] <= 0.0 && 0.0 <= control_hi[i]) {
                return Err(OcpError::Invalid("control box must contain the origin".into()));
            }
            if !control_lo[i].is_finite() || !control_hi[i].is_finite() {
                return Err(OcpError::Invalid("control box must be compact".into()));
            }
        }
        if let TerminalSet::Point(p) = &terminal {
            model.check_state(p)?;
        }
        CostWeights::new(weights.alpha1, weights.alpha2, weights.t0)?;
        Ok(Self { model, x0, terminal, t_f, control_lo, control_hi, weights })
    }

    pub fn with_horizon(&self, t_f: f64) -> Self {
        Self { t_f, ..self.clone() }
    }

    /// Default interval count for a horizon.
    pub fn default_intervals(t_f: f64) -> usize {
        ((20.0 * t_f).ceil() as usize).max(100)
    }

    /// The objective is fixed by the endpoints whenever the entropy weight
    /// vanishes and the terminal set is a single point.
    pub fn cost_path_independent(&self) -> bool {
        self.weights.alpha2 == 0.0 && matches!(self.terminal, TerminalSet::Point(_))
    }
}

/// Weight of the terminal penalty used for non-point terminal sets.
const TERMINAL_PENALTY: f64 = 1.0e4;

/// Finite-dimensional nonlinear program obtained from trapezoidal
/// collocation. Decision layout: `[x_0 .. x_N, u_0 .. u_{N-1}]`.
pub struct TranscriptionProblem {
    pub spec: OcpSpec,
    pub n_intervals: usize,
    pub h: f64,
    lo: DVector<f64>,
    hi: DVector<f64>,
}

impl TranscriptionProblem {
    fn n(&self) -> usize {
        self.spec.model.state_dim()
    }
    fn m(&self) -> usize {
        self.spec.model.input_dim()
    }
    pub fn num_decisions(&self) -> usize {
        (self.n_intervals + 1) * self.n() + self.n_intervals * self.m()
    }
    pub fn num_constraints(&self) -> usize {
        let term = if matches!(self.spec.terminal, TerminalSet::Point(_)) { self.n() } else { 0 };
        self.n_intervals * self.n() + term
    }
    pub fn bounds(&self) -> (&DVector<f64>, &DVector<f64>) {
        (&self.lo, &self.hi)
    }

    fn x_at(&self, z: &DVector<f64>, k: usize) -> State {
        let n = self.n();
        z.rows(k * n, n).into_owned()
    }
    fn u_at(&self, z: &DVector<f64>, k: usize) -> Control {
        let (n, m) = (self.n(), self.m());
        z.rows((self.n_intervals + 1) * n + k * m, m).into_owned()
    }

    /// Trapezoidal quadrature of the stage cost under zero-order hold:
    /// `sum_k h/2 [l(x_k, u_k) + l(x_{k+1}, u_k)]`, plus the terminal
    /// penalty for non-point target sets. Identically zero while the cost is
    /// path-independent (the endpoints fix it; see `OcpSolution::objective`).
    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        if self.spec.cost_path_independent() {
            return self.terminal_penalty_value(z);
        }
        let model = &self.spec.model;
        let w = &self.spec.weights;
        let mut total = 0.0;
        for k in 0..self.n_intervals {
            let (xk, xk1, uk) = (self.x_at(z, k), self.x_at(z, k + 1), self.u_at(z, k));
            total += 0.5
                * self.h
                * (model.stage_cost_unchecked(&xk, &uk, w)
                    + model.stage_cost_unchecked(&xk1, &uk, w));
        }
        total + self.terminal_penalty_value(z)
    }

    fn terminal_penalty_value(&self, z: &DVector<f64>) -> f64 {
        match &self.spec.terminal {
            TerminalSet::Point(_) => 0.0,
            TerminalSet::Set { project, .. } => {
                let xn = self.x_at(z, self.n_intervals);
                let d = &xn - &project(&xn);
                TERMINAL_PENALTY * d.norm_squared()
            }
        }
    }

    /// Gradient of `objective`; `u`-part analytic, `x`-part by central
    /// differences on the stage cost.
    pub fn objective_grad(&self, z: &DVector<f64>) -> DVector<f64> {
        let mut grad = DVector::zeros(self.num_decisions());
        let (n, m) = (self.n(), self.m());
        let model = &self.spec.model;
        let w = &self.spec.weights;
        if !self.spec.cost_path_independent() {
            let u_off = (self.n_intervals + 1) * n;
            for k in 0..self.n_intervals {
                let (xk, xk1, uk) = (self.x_at(z, k), self.x_at(z, k + 1), self.u_at(z, k));
                for (node, x) in [(k, &xk), (k + 1, &xk1)] {
                    let gx = stage_cost_grad_x(model, x, &uk, w);
                    for i in 0..n {
                        grad[node * n + i] += 0.5 * self.h * gx[i];
                    }
                }
                // d l / d u = alpha1 y_H - alpha2 T0 y_S at both nodes.
                for x in [&xk, &xk1] {
                    let (y_h, y_s) = model.outputs_unchecked(x);
                    for j in 0..m {
                        grad[u_off + k * m + j] +=
                            0.5 * self.h * (w.alpha1 * y_h[j] - w.alpha2 * w.t0 * y_s[j]);
                    }
                }
            }
        }
        if let TerminalSet::Set { project, .. } = &self.spec.terminal {
            let xn = self.x_at(z, self.n_intervals);
            let d = &xn - &project(&xn);
            for i in 0..n {
                grad[self.n_intervals * n + i] += 2.0 * TERMINAL_PENALTY * d[i];
            }
        }
        grad
    }

    /// Defect constraints followed by the terminal equalities (point target).
    /// Defects are stated in slope form, `(x_{k+1} - x_k)/h - (f_k + f_{k+1})/2`,
    /// which keeps the constraint scaling O(1) in the interval count.
    pub fn constraints(&self, z: &DVector<f64>) -> DVector<f64> {
        let n = self.n();
        let model = &self.spec.model;
        let mut c = DVector::zeros(self.num_constraints());
        let mut f_prev = {
            let (x0, u0) = (self.x_at(z, 0), self.u_at(z, 0));
            model.rhs_unchecked(&x0, &u0)
        };
        for k in 0..self.n_intervals {
            let (xk, xk1, uk) = (self.x_at(z, k), self.x_at(z, k + 1), self.u_at(z, k));
            let fk = if k == 0 { f_prev.clone() } else { model.rhs_unchecked(&xk, &uk) };
            let fk1 = model.rhs_unchecked(&xk1, &uk);
            let defect = (&xk1 - &xk) / self.h - (&fk + &fk1) * 0.5;
            for i in 0..n {
                c[k * n + i] = defect[i];
            }
            f_prev = fk1;
        }
        if let TerminalSet::Point(p) = &self.spec.terminal {
            let xn = self.x_at(z, self.n_intervals);
            for i in 0..n {
                c[self.n_intervals * n + i] = xn[i] - p[i];
            }
        }
        c
    }

    /// Augmented Lagrangian `objective + lambda'c + rho/2 |c|^2` with its
    /// gradient, assembled from local central-difference Jacobians of the
    /// dynamics.
    pub fn al_value_grad(
        &self,
        z: &DVector<f64>,
        lambda: &DVector<f64>,
        rho: f64,
    ) -> (f64, DVector<f64>) {
        let (n, m) = (self.n(), self.m());
        let model = &self.spec.model;
        let c = self.constraints(z);
        let obj = self.objective(z);
        let value = obj + lambda.dot(&c) + 0.5 * rho * c.norm_squared();

        let mut grad = self.objective_grad(z);
        let u_off = (self.n_intervals + 1) * n;
        for k in 0..self.n_intervals {
            let (xk, xk1, uk) = (self.x_at(z, k), self.x_at(z, k + 1), self.u_at(z, k));
            let mk: DVector<f64> =
                DVector::from_fn(n, |i, _| lambda[k * n + i] + rho * c[k * n + i]);
            let a_k = rhs_jac_x(model, &xk, &uk);
            let a_k1 = rhs_jac_x(model, &xk1, &uk);
            let b_k = rhs_jac_u(model, &xk, &uk);
            let b_k1 = rhs_jac_u(model, &xk1, &uk);
            // d defect_k / d x_k = -I/h - A(x_k)/2, / d x_{k+1} = I/h - A(x_{k+1})/2.
            let gx_k = -&mk / self.h - a_k.transpose() * &mk * 0.5;
            let gx_k1 = &mk / self.h - a_k1.transpose() * &mk * 0.5;
            let gu_k = -(b_k + b_k1).transpose() * &mk * 0.5;
            for i in 0..n {
                grad[k * n + i] += gx_k[i];
                grad[(k + 1) * n + i] += gx_k1[i];
            }
            for j in 0..m {
                grad[u_off + k * m + j] += gu_k[j];
            }
        }
        if matches!(self.spec.terminal, TerminalSet::Point(_)) {
            let base = self.n_intervals * n;
            for i in 0..n {
                grad[self.n_intervals * n + i] += lambda[base + i] + rho * c[base + i];
            }
        }
        (value, grad)
    }

    /// Interleaved position of decision variable `idx` when states and
    /// controls are reordered interval by interval (`x_0, u_0, x_1, u_1, ...,
    /// x_N`), which makes the Gauss-Newton matrix banded.
    fn interleaved_index(&self, idx: usize) -> usize {
        let (n, m) = (self.n(), self.m());
        let u_off = (self.n_intervals + 1) * n;
        if idx < u_off {
            let (k, i) = (idx / n, idx % n);
            k * (n + m) + i
        } else {
            let r = idx - u_off;
            let (k, j) = (r / m, r % m);
            k * (n + m) + n + j
        }
    }

    /// Gauss-Newton preconditioner for the augmented Lagrangian at `z`:
    /// the banded Cholesky factor of `rho J'J + I`, where `J` is the
    /// constraint Jacobian. Used as the initial inverse Hessian of the inner
    /// quasi-Newton solver; the identity term covers the (nearly linear)
    /// objective curvature and keeps the matrix positive definite.
    pub fn gn_preconditioner(&self, z: &DVector<f64>, rho: f64) -> Option<BandedCholesky> {
        let (n, m) = (self.n(), self.m());
        let model = &self.spec.model;
        let nz = self.num_decisions();
        let bw = 2 * n + m - 1;
        let mut band = DMatrix::zeros(bw + 1, nz);
        for j in 0..nz {
            band[(0, j)] = 1.0;
        }
        // Local column order within a defect block: [x_k | u_k | x_{k+1}],
        // contiguous in the interleaved ordering starting at k (n + m).
        let w = 2 * n + m;
        for k in 0..self.n_intervals {
            let (xk, xk1, uk) = (self.x_at(z, k), self.x_at(z, k + 1), self.u_at(z, k));
            let a_k = rhs_jac_x(model, &xk, &uk);
            let a_k1 = rhs_jac_x(model, &xk1, &uk);
            let b_k = rhs_jac_u(model, &xk, &uk);
            let b_k1 = rhs_jac_u(model, &xk1, &uk);
            let mut loc = DMatrix::zeros(n, w);
            for r in 0..n {
                for i in 0..n {
                    let e = if r == i { 1.0 / self.h } else { 0.0 };
                    loc[(r, i)] = -e - 0.5 * a_k[(r, i)];
                    loc[(r, n + m + i)] = e - 0.5 * a_k1[(r, i)];
                }
                for j in 0..m {
                    loc[(r, n + j)] = -0.5 * (b_k[(r, j)] + b_k1[(r, j)]);
                }
            }
            let gram = loc.transpose() * &loc * rho;
            let base = k * (n + m);
            for b in 0..w {
                for a in 0..=b {
                    band[(b - a, base + a)] += gram[(b, a)];
                }
            }
        }
        if matches!(self.spec.terminal, TerminalSet::Point(_)) {
            let base = self.n_intervals * (n + m);
            for i in 0..n {
                band[(0, base + i)] += rho;
            }
        }
        // Decouple variables pinned by equal bounds (the fixed initial state):
        // identity row and column, so the solve leaves them untouched.
        let (lo, hi) = self.bounds();
        for idx in 0..nz {
            if lo[idx] == hi[idx] {
                let p = self.interleaved_index(idx);
                band[(0, p)] = 1.0;
                for d in 1..=bw {
                    if p + d < nz {
                        band[(d, p)] = 0.0;
                    }
                }
                for q in p.saturating_sub(bw)..p {
                    band[(p - q, q)] = 0.0;
                }
            }
        }
        BandedCholesky::new(nz, bw, band)
    }

    /// Apply the inverse Gauss-Newton matrix to a vector in decision-variable
    /// ordering, routing through the interleaved banded factor.
    pub fn apply_gn_inverse(&self, chol: &BandedCholesky, q: &DVector<f64>) -> DVector<f64> {
        let nz = q.len();
        let mut perm = DVector::zeros(nz);
        for idx in 0..nz {
            perm[self.interleaved_index(idx)] = q[idx];
        }
        let sol = chol.solve(&perm);
        let mut out = DVector::zeros(nz);
        for idx in 0..nz {
            out[idx] = sol[self.interleaved_index(idx)];
        }
        out
    }

    /// Cold start: states linearly interpolated toward the terminal point,
    /// controls zero.
    pub fn initial_guess_cold(&self) -> DVector<f64> {
        let n = self.n();
        let target = match &self.spec.terminal {
            TerminalSet::Point(p) => p.clone(),
            TerminalSet::Set { project, .. } => project(&self.spec.x0),
        };
        let mut z = DVector::zeros(self.num_decisions());
        for k in 0..=self.n_intervals {
            let theta = k as f64 / self.n_intervals as f64;
            for i in 0..n {
                z[k * n + i] = (1.0 - theta) * self.spec.x0[i] + theta * target[i];
            }
        }
        z
    }

    /// Warm start from a trajectory of a (possibly different) horizon: states
    /// interpolated in normalized time, controls scaled by the horizon ratio.
    pub fn initial_guess_warm(&self, prev: &Trajectory) -> DVector<f64> {
        let (n, m) = (self.n(), self.m());
        let t_prev = prev.t_f();
        let scale = t_prev / self.t_f();
        let mut z = DVector::zeros(self.num_decisions());
        let sample = |tau: f64| -> (State, Control) {
            let t = tau * t_prev;
            let idx = match prev.t.binary_search_by(|a| a.partial_cmp(&t).unwrap()) {
                Ok(i) => i.min(prev.t.len() - 2),
                Err(0) => 0,
                Err(i) => (i - 1).min(prev.t.len() - 2),
            };
            let w = ((t - prev.t[idx]) / (prev.t[idx + 1] - prev.t[idx])).clamp(0.0, 1.0);
            let x = &prev.x[idx] * (1.0 - w) + &prev.x[idx + 1] * w;
            (x, prev.u[idx].clone())
        };
        for k in 0..=self.n_intervals {
            let (x, _) = sample(k as f64 / self.n_intervals as f64);
            for i in 0..n {
                z[k * n + i] = x[i];
            }
        }
        let u_off = (self.n_intervals + 1) * n;
        for k in 0..self.n_intervals {
            let (_, u) = sample((k as f64 + 0.5) / self.n_intervals as f64);
            for j in 0..m {
                z[u_off + k * m + j] =
                    (u[j] * scale).clamp(self.spec.control_lo[j], self.spec.control_hi[j]);
            }
        }
        z
    }

    pub fn t_f(&self) -> f64 {
        self.spec.t_f
    }

    pub fn trajectory_from(&self, z: &DVector<f64>) -> Trajectory {
        let mut t = Vec::with_capacity(self.n_intervals + 1);
        let mut x = Vec::with_capacity(self.n_intervals + 1);
        let mut u = Vec::with_capacity(self.n_intervals + 1);
        for k in 0..=self.n_intervals {
            t.push(k as f64 * self.h);
            x.push(self.x_at(z, k));
            u.push(self.u_at(z, k.min(self.n_intervals - 1)));
        }
        Trajectory {
            t,
            x,
            u,
            meta: TrajectoryMeta {
                model_id: self.spec.model.id().to_string(),
                integrator: "collocation".into(),
                abs_tol: 0.0,
                rel_tol: 0.0,
            },
        }
    }

    pub fn control_signal_from(&self, z: &DVector<f64>) -> ControlSignal {
        let grid: Vec<f64> = (0..self.n_intervals).map(|k| k as f64 * self.h).collect();
        let values: Vec<Control> = (0..self.n_intervals).map(|k| self.u_at(z, k)).collect();
        ControlSignal::PiecewiseConstant { grid, values }
    }
}

fn stage_cost_grad_x(model: &IphsModel, x: &State, u: &Control, w: &CostWeights) -> DVector<f64> {
    let n = x.len();
    DVector::from_fn(n, |i, _| {
        let h = 1e-6 * (1.0 + x[i].abs());
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h;
        xm[i] -= h;
        (model.stage_cost_unchecked(&xp, u, w) - model.stage_cost_unchecked(&xm, u, w))
            / (2.0 * h)
    })
}

fn rhs_jac_x(model: &IphsModel, x: &State, u: &Control) -> DMatrix<f64> {
    let n = x.len();
    let mut jac = DMatrix::zeros(n, n);
    for j in 0..n {
        let h = 1e-6 * (1.0 + x[j].abs());
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        let col = (model.rhs_unchecked(&xp, u) - model.rhs_unchecked(&xm, u)) / (2.0 * h);
        jac.set_column(j, &col);
    }
    jac
}

fn rhs_jac_u(model: &IphsModel, x: &State, u: &Control) -> DMatrix<f64> {
    let n = x.len();
    let m = u.len();
    let mut jac = DMatrix::zeros(n, m);
    for j in 0..m {
        let h = 1e-6 * (1.0 + u[j].abs());
        let mut up = u.clone();
        let mut um = u.clone();
        up[j] += h;
        um[j] -= h;
        let col = (model.rhs_unchecked(x, &up) - model.rhs_unchecked(x, &um)) / (2.0 * h);
        jac.set_column(j, &col);
    }
    jac
}

/// Build the transcription of a spec with `N` intervals.
pub fn transcribe(spec: &OcpSpec, n_intervals: usize) -> Result<TranscriptionProblem, OcpError> {
    if n_intervals < 2 {
        return Err(OcpError::Invalid("need at least 2 intervals".into()));
    }
    let (n, m) = (spec.model.state_dim(), spec.model.input_dim());
    let nz = (n_intervals + 1) * n + n_intervals * m;
    let mut lo = DVector::zeros(nz);
    let mut hi = DVector::zeros(nz);
    let dom = spec.model.domain();
    for k in 0..=n_intervals {
        for i in 0..n {
            lo[k * n + i] = dom.lo()[i];
            hi[k * n + i] = dom.hi()[i];
        }
    }
    // Pin the initial state through its bounds.
    for i in 0..n {
        lo[i] = spec.x0[i];
        hi[i] = spec.x0[i];
    }
    let u_off = (n_intervals + 1) * n;
    for k in 0..n_intervals {
        for j in 0..m {
            lo[u_off + k * m + j] = spec.control_lo[j];
            hi[u_off + k * m + j] = spec.control_hi[j];
        }
    }
    Ok(TranscriptionProblem {
        spec: spec.clone(),
        n_intervals,
        h: spec.t_f / n_intervals as f64,
        lo,
        hi,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct OcpSolution {
    pub trajectory: Trajectory,
    pub control: ControlSignal,
    /// Transition cost of the returned trajectory. For path-independent
    /// problems this is the identity value fixed by the endpoints.
    pub objective: f64,
    pub kkt_residual: f64,
    pub constraint_violation: f64,
    pub iterations: usize,
    pub status: SolveStatus,
    pub cost_path_independent: bool,
}

#[derive(Debug, Clone)]
pub enum InitStrategy {
    Cold,
    Warm(Trajectory),
}

#[derive(Debug, Clone)]
pub struct SolveOpts {
    pub feas_tol: f64,
    pub opt_tol: f64,
    pub max_outer: usize,
    pub inner: LbfgsOpts,
}

impl Default for SolveOpts {
    fn default() -> Self {
        Self {
            feas_tol: 1e-8,
            opt_tol: 1e-6,
            max_outer: 30,
            // The Gauss-Newton preconditioner makes inner iterations
            // Newton-quality; a few hundred suffice per subproblem.
            inner: LbfgsOpts { max_iters: 800, ..Default::default() },
        }
    }
}

/// Solve the transcribed problem with an augmented-Lagrangian outer loop.
pub fn solve(
    problem: &TranscriptionProblem,
    init: InitStrategy,
    opts: &SolveOpts,
) -> Result<OcpSolution, OcpError> {
    let mut z = match &init {
        InitStrategy::Cold => problem.initial_guess_cold(),
        InitStrategy::Warm(traj) => problem.initial_guess_warm(traj),
    };
    let (lo, hi) = problem.bounds();
    let nc = problem.num_constraints();
    let mut lambda = DVector::zeros(nc);
    let mut rho = 10.0;
    let mut c_best = f64::INFINITY;
    let mut total_iters = 0usize;
    let mut kkt = f64::INFINITY;
    let mut cviol = f64::INFINITY;
    let mut status = SolveStatus::MaxIter;

    for outer in 0..opts.max_outer {
        let inner_tol = (1e-2 * 0.2f64.powi(outer as i32)).max(opts.opt_tol);
        let inner_opts = LbfgsOpts { pg_tol: inner_tol, ..opts.inner.clone() };
        // Gauss-Newton preconditioner, refreshed at the current iterate; the
        // inner quasi-Newton corrections absorb the (mild) variation of the
        // Jacobian across the inner solve.
        let precond = problem.gn_preconditioner(&z, rho);
        let h0 = precond
            .as_ref()
            .map(|chol| move |q: &DVector<f64>| problem.apply_gn_inverse(chol, q));
        let result = minimize_box_precond(
            |z| problem.al_value_grad(z, &lambda, rho),
            &z,
            lo,
            hi,
            &inner_opts,
            h0.as_ref().map(|f| f as &dyn Fn(&DVector<f64>) -> DVector<f64>),
        );
        if !result.value.is_finite() {
            return Err(OcpError::NonFinite);
        }
        total_iters += result.iterations;
        z = result.x;
        kkt = result.pg_norm;
        let c = problem.constraints(&z);
        let prev_cviol = cviol;
        cviol = c.amax();

        if cviol <= opts.feas_tol && kkt <= opts.opt_tol {
            status = SolveStatus::Converged;
            break;
        }
        // Stagnating far from feasibility at a large penalty weight: the
        // constraints are (numerically) unsatisfiable, stop early.
        if rho >= 1e6 && cviol > 1e4 * opts.feas_tol && cviol > 0.9 * prev_cviol {
            status = SolveStatus::Infeasible;
            break;
        }
        if cviol <= 0.25 * c_best {
            // Sufficient feasibility progress: first-order multiplier update.
            lambda += &c * rho;
            c_best = cviol;
        } else {
            rho = (rho * 10.0).min(1e10);
        }
        if rho >= 1e10 && cviol > 1e4 * opts.feas_tol {
            status = SolveStatus::Infeasible;
            break;
        }
    }

    let trajectory = problem.trajectory_from(&z);
    let control = problem.control_signal_from(&z);
    let objective = if problem.spec.cost_path_independent() {
        let m = &problem.spec.model;
        problem.spec.weights.alpha1
            * (m.hamiltonian().eval(trajectory.endpoint()) - m.hamiltonian().eval(&trajectory.x[0]))
    } else {
        problem.objective(&z)
    };

    Ok(OcpSolution {
        trajectory,
        control,
        objective,
        kkt_residual: kkt,
        constraint_violation: cviol,
        iterations: total_iters,
        status,
        cost_path_independent: problem.spec.cost_path_independent(),
    })
}

/// Restriction of a piecewise-constant signal to `[0, len)`, shifted by
/// `offset` in the output time axis.
fn shifted_segments(
    sig: &ControlSignal,
    len: f64,
    offset: f64,
    m: usize,
) -> Result<(Vec<f64>, Vec<Control>), OcpError> {
    match sig {
        ControlSignal::Zero => Ok((vec![offset], vec![DVector::zeros(m)])),
        ControlSignal::PiecewiseConstant { grid, values } => {
            let mut g = Vec::new();
            let mut v = Vec::new();
            for (t, val) in grid.iter().zip(values.iter()) {
                if *t < len - 1e-13 {
                    g.push(offset + t.max(0.0));
                    v.push(val.clone());
                }
            }
            if g.is_empty() || g[0] > offset + 1e-13 {
                g.insert(0, offset);
                v.insert(0, values[0].clone());
            }
            Ok((g, v))
        }
        ControlSignal::Callable { .. } => Err(OcpError::Invalid(
            "three-phase construction needs piecewise-constant phase controls".into(),
        )),
    }
}

/// Concatenate `u1`, zero input, and `u2` into one feasible control: steer to
/// the equilibrium set, rest on it, then steer to the terminal set. Phase
/// steering is verified by simulation within `tol`.
pub fn three_phase_control(
    spec: &OcpSpec,
    t1: f64,
    t2: f64,
    u1: &ControlSignal,
    u2: &ControlSignal,
    tol: f64,
) -> Result<ControlSignal, OcpError> {
    if t1 < 0.0 || t2 < 0.0 || t1 + t2 > spec.t_f + 1e-12 {
        return Err(OcpError::Invalid("phase durations exceed the horizon".into()));
    }
    let model = &spec.model;
    let m = model.input_dim();
    let opts = IntegratorOpts::default();

    let x_mid = if t1 > 0.0 {
        integrate(model, &spec.x0, u1, t1, &opts)?.endpoint().clone()
    } else {
        spec.x0.clone()
    };
    let miss1 = model.distance_to_equilibria(&x_mid)?;
    if miss1 > tol {
        return Err(OcpError::PhaseVerification { phase: 1, miss: miss1, tol });
    }

    let x_end = if t2 > 0.0 {
        integrate(model, &x_mid, u2, t2, &opts)?.endpoint().clone()
    } else {
        x_mid.clone()
    };
    let miss2 = spec.terminal.miss(&x_end);
    if miss2 > tol {
        return Err(OcpError::PhaseVerification { phase: 2, miss: miss2, tol });
    }

    let mut grid = Vec::new();
    let mut values = Vec::new();
    if t1 > 0.0 {
        let (g, v) = shifted_segments(u1, t1, 0.0, m)?;
        grid.extend(g);
        values.extend(v);
    }
    let t_rest_end = spec.t_f - t2;
    if t_rest_end > t1 + 1e-13 || t1 == 0.0 {
        grid.push(t1);
        values.push(DVector::zeros(m));
    }
    if t2 > 0.0 {
        let (g, v) = shifted_segments(u2, t2, t_rest_end, m)?;
        grid.extend(g);
        values.extend(v);
    }
    // Deduplicate coincident segment starts, keeping the later phase's value.
    let mut dedup_grid: Vec<f64> = Vec::new();
    let mut dedup_values: Vec<Control> = Vec::new();
    for (g, v) in grid.into_iter().zip(values.into_iter()) {
        if let Some(last) = dedup_grid.last() {
            if (g - last).abs() < 1e-13 {
                *dedup_values.last_mut().unwrap() = v;
                continue;
            }
        }
        dedup_grid.push(g);
        dedup_values.push(v);
    }
    ControlSignal::piecewise(dedup_grid, dedup_values).map_err(OcpError::from)
}

/// A certified optimal steady state: equilibrium x, kernel control u, zero
/// running cost.
#[derive(Debug, Clone)]
pub struct SteadyState {
    pub x: State,
    pub u: Control,
    pub cost: f64,
}

/// Sample the domain, project onto the equilibrium set, and pair each
/// equilibrium with the controls in the kernel of the input map (always
/// including u = 0).
pub fn optimal_steady_states(
    model: &IphsModel,
    control_lo: &Control,
    control_hi: &Control,
    weights: &CostWeights,
    sampler: &mut dyn FnMut() -> State,
    n_samples: usize,
) -> Result<Vec<SteadyState>, OcpError> {
    const EQ_TOL: f64 = 1e-10;
    let m = model.input_dim();
    let mut out = Vec::new();
    for _ in 0..n_samples {
        let x = sampler();
        let Ok(xbar) = model.project_to_equilibria(&x) else { continue };
        if !model.domain().contains(&xbar)
            || !model.is_equilibrium(&xbar, EQ_TOL).unwrap_or(false)
        {
            continue;
        }
        let g = model.input_matrix(&xbar);
        // Kernel of g from the eigendecomposition of g'g.
        let gtg = g.transpose() * &g;
        let eig = nalgebra::SymmetricEigen::new(gtg);
        let mut controls: Vec<Control> = vec![DVector::zeros(m)];
        for (i, val) in eig.eigenvalues.iter().enumerate() {
            if val.abs() <= EQ_TOL * EQ_TOL {
                let v = eig.eigenvectors.column(i).into_owned();
                // Scale the kernel direction into the control box.
                let mut scale = f64::INFINITY;
                for j in 0..m {
                    if v[j] > 0.0 {
                        scale = scale.min(control_hi[j] / v[j]);
                    } else if v[j] < 0.0 {
                        scale = scale.min(control_lo[j] / v[j]);
                    }
                }
                let u = &v * scale.min(1.0);
                if u.amax() > 0.0 {
                    controls.push(u);
                }
            }
        }
        for u in controls {
            if (&g * &u).amax() > EQ_TOL {
                continue;
            }
            let cost = model.stage_cost_unchecked(&xbar, &u, weights);
            out.push(SteadyState { x: xbar.clone(), u, cost });
        }
    }
    Ok(out)
}
