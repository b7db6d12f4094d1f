//! Core structure of an irreversible port-Hamiltonian system (IPHS) and the
//! pointwise quantities derived from it: Poisson bracket, drift, outputs,
//! entropy production, stage cost and distance to the set of thermodynamic
//! equilibria.
//!
//! The dynamics read
//!
//! ```text
//! dx/dt = gamma(x, H_x) * {S,H}_J(x) * J * H_x(x) + g(x, H_x) * u
//! ```
//!
//! with skew-symmetric `J`, a non-negative Hamiltonian `H`, a linear entropy
//! `S(x) = l^T x` and a strictly positive modulation `gamma`. Models are
//! immutable after construction and safe to share across threads.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub type State = DVector<f64>;
pub type Control = DVector<f64>;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("state {state:?} outside model domain")]
    DomainViolation { state: Vec<f64> },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("structure matrix not skew-symmetric at ({row},{col})")]
    NotSkewSymmetric { row: usize, col: usize },
    #[error("invalid configuration: {0}")]
    Configuration(String),
    #[error(
        "equilibrium projection did not converge: residual {residual:.3e} after {iterations} iterations"
    )]
    ProjectionFailed { residual: f64, iterations: usize },
}

/// Skew-symmetric structure matrix. Skew symmetry is checked exactly (zero
/// tolerance) at construction and never re-checked afterwards.
#[derive(Debug, Clone)]
pub struct StructureMatrix {
    entries: DMatrix<f64>,
}

impl StructureMatrix {
    pub fn new(entries: DMatrix<f64>) -> Result<Self, ModelError> {
        if entries.nrows() != entries.ncols() {
            return Err(ModelError::DimensionMismatch {
                expected: entries.nrows(),
                got: entries.ncols(),
            });
        }
        for i in 0..entries.nrows() {
            for j in i..entries.ncols() {
                if entries[(i, j)] != -entries[(j, i)] {
                    return Err(ModelError::NotSkewSymmetric { row: i, col: j });
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }
}

/// Hamiltonian with analytic gradient (co-energy, e.g. temperatures for
/// entropy states) and Hessian.
pub struct Hamiltonian {
    eval: Box<dyn Fn(&State) -> f64 + Send + Sync>,
    grad: Box<dyn Fn(&State) -> State + Send + Sync>,
    hess: Box<dyn Fn(&State) -> DMatrix<f64> + Send + Sync>,
}

impl Hamiltonian {
    pub fn new(
        eval: impl Fn(&State) -> f64 + Send + Sync + 'static,
        grad: impl Fn(&State) -> State + Send + Sync + 'static,
        hess: impl Fn(&State) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            eval: Box::new(eval),
            grad: Box::new(grad),
            hess: Box::new(hess),
        }
    }

    pub fn eval(&self, x: &State) -> f64 {
        (self.eval)(x)
    }

    pub fn grad(&self, x: &State) -> State {
        (self.grad)(x)
    }

    pub fn hess(&self, x: &State) -> DMatrix<f64> {
        (self.hess)(x)
    }
}

/// Entropy linear in the state, `S(x) = l^T x`.
#[derive(Debug, Clone)]
pub struct LinearEntropy {
    l: DVector<f64>,
}

impl LinearEntropy {
    pub fn new(l: DVector<f64>) -> Result<Self, ModelError> {
        if l.norm() == 0.0 {
            return Err(ModelError::Configuration(
                "entropy weight vector must be nonzero".into(),
            ));
        }
        Ok(Self { l })
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.l
    }

    pub fn eval(&self, x: &State) -> f64 {
        self.l.dot(x)
    }
}

/// Strictly positive modulation `gamma(x, H_x(x))`. Only ever evaluated at
/// the co-energy pattern `(x, H_x(x))`.
pub struct GammaFn {
    eval: Box<dyn Fn(&State, &State) -> f64 + Send + Sync>,
}

impl GammaFn {
    pub fn new(eval: impl Fn(&State, &State) -> f64 + Send + Sync + 'static) -> Self {
        Self { eval: Box::new(eval) }
    }

    pub fn eval(&self, x: &State, co_energy: &State) -> f64 {
        (self.eval)(x, co_energy)
    }
}

/// Input map `g(x, H_x(x))`, an n-by-m matrix.
pub struct InputMap {
    eval: Box<dyn Fn(&State, &State) -> DMatrix<f64> + Send + Sync>,
}

impl InputMap {
    pub fn new(eval: impl Fn(&State, &State) -> DMatrix<f64> + Send + Sync + 'static) -> Self {
        Self { eval: Box::new(eval) }
    }

    pub fn eval(&self, x: &State, co_energy: &State) -> DMatrix<f64> {
        (self.eval)(x, co_energy)
    }
}

/// Affine drift offset `W(x, H_x(x))` for control-affine variants that do not
/// match the strict IPHS form (thermostat control of the heat exchanger).
pub type OffsetFn = Box<dyn Fn(&State, &State) -> State + Send + Sync>;

/// Box of valid states; a concrete guard standing in for the compactness
/// assumptions of the turnpike analysis.
#[derive(Debug, Clone)]
pub struct Domain {
    lo: DVector<f64>,
    hi: DVector<f64>,
}

impl Domain {
    pub fn bounds(lo: DVector<f64>, hi: DVector<f64>) -> Result<Self, ModelError> {
        if lo.len() != hi.len() {
            return Err(ModelError::DimensionMismatch {
                expected: lo.len(),
                got: hi.len(),
            });
        }
        for i in 0..lo.len() {
            if !(lo[i] < hi[i]) {
                return Err(ModelError::Configuration(format!(
                    "domain box empty in coordinate {i}"
                )));
            }
        }
        Ok(Self { lo, hi })
    }

    pub fn centered(n: usize, half_width: f64) -> Self {
        Self {
            lo: DVector::from_element(n, -half_width),
            hi: DVector::from_element(n, half_width),
        }
    }

    pub fn contains(&self, x: &State) -> bool {
        if x.len() != self.lo.len() {
            return false;
        }
        (0..x.len()).all(|i| x[i].is_finite() && x[i] >= self.lo[i] && x[i] <= self.hi[i])
    }

    pub fn lo(&self) -> &DVector<f64> {
        &self.lo
    }

    pub fn hi(&self) -> &DVector<f64> {
        &self.hi
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }
}

/// Cost weights of the transition objective: a convex combination of the
/// energy flow (`alpha1`) and the `t0`-scaled entropy flow (`alpha2`).
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct CostWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub t0: f64,
}

impl CostWeights {
    pub fn new(alpha1: f64, alpha2: f64, t0: f64) -> Result<Self, ModelError> {
        if !(0.0..=1.0).contains(&alpha1) || !(0.0..=1.0).contains(&alpha2) {
            return Err(ModelError::Configuration(
                "cost weights must lie in [0, 1]".into(),
            ));
        }
        if (alpha1 + alpha2 - 1.0).abs() > 1e-12 {
            return Err(ModelError::Configuration(
                "cost weights must sum to one".into(),
            ));
        }
        if !(t0 > 0.0) {
            return Err(ModelError::Configuration(
                "reference temperature must be positive".into(),
            ));
        }
        Ok(Self { alpha1, alpha2, t0 })
    }

    /// Minimal energy supply.
    pub fn energy() -> Self {
        Self { alpha1: 1.0, alpha2: 0.0, t0: 1.0 }
    }

    /// Minimal entropy extraction at reference temperature `t0`.
    pub fn entropy(t0: f64) -> Self {
        Self { alpha1: 0.0, alpha2: 1.0, t0 }
    }

    /// Minimal exergy supply at reference temperature `t0`.
    pub fn exergy(t0: f64) -> Self {
        Self { alpha1: 0.5, alpha2: 0.5, t0 }
    }
}

/// An irreversible port-Hamiltonian system.
pub struct IphsModel {
    id: String,
    n: usize,
    m: usize,
    j: StructureMatrix,
    hamiltonian: Hamiltonian,
    entropy: LinearEntropy,
    gamma: GammaFn,
    input: InputMap,
    offset: Option<OffsetFn>,
    domain: Domain,
    equilibrium_projection: Option<Box<dyn Fn(&State) -> State + Send + Sync>>,
}

impl IphsModel {
    pub fn new(
        id: impl Into<String>,
        j: StructureMatrix,
        hamiltonian: Hamiltonian,
        entropy: LinearEntropy,
        gamma: GammaFn,
        input: InputMap,
        input_dim: usize,
        domain: Domain,
    ) -> Result<Self, ModelError> {
        let n = j.dim();
        if entropy.weights().len() != n {
            return Err(ModelError::DimensionMismatch {
                expected: n,
                got: entropy.weights().len(),
            });
        }
        if domain.dim() != n {
            return Err(ModelError::DimensionMismatch { expected: n, got: domain.dim() });
        }
        Ok(Self {
            id: id.into(),
            n,
            m: input_dim,
            j,
            hamiltonian,
            entropy,
            gamma,
            input,
            offset: None,
            domain,
            equilibrium_projection: None,
        })
    }

    /// Attach an affine drift offset `W(x, H_x)`. Models carrying an offset
    /// are control-affine extensions and fall outside the strict IPHS class.
    pub fn with_offset(mut self, offset: OffsetFn) -> Self {
        self.offset = Some(offset);
        self
    }

    /// Register a closed-form orthogonal projection onto the equilibrium set.
    pub fn with_equilibrium_projection(
        mut self,
        projection: impl Fn(&State) -> State + Send + Sync + 'static,
    ) -> Self {
        self.equilibrium_projection = Some(Box::new(projection));
        self
    }

    /// Drop a registered closed-form projection, forcing the generic
    /// Gauss-Newton path.
    pub fn clear_equilibrium_projection(&mut self) {
        self.equilibrium_projection = None;
    }

    pub fn with_domain(mut self, domain: Domain) -> Result<Self, ModelError> {
        if domain.dim() != self.n {
            return Err(ModelError::DimensionMismatch { expected: self.n, got: domain.dim() });
        }
        self.domain = domain;
        Ok(self)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn input_dim(&self) -> usize {
        self.m
    }

    pub fn structure(&self) -> &StructureMatrix {
        &self.j
    }

    pub fn hamiltonian(&self) -> &Hamiltonian {
        &self.hamiltonian
    }

    pub fn entropy(&self) -> &LinearEntropy {
        &self.entropy
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    /// True for models in the strict sense (no affine offset); the turnpike
    /// statements are asserted only for these.
    pub fn is_strict_iphs(&self) -> bool {
        self.offset.is_none()
    }

    pub fn check_state(&self, x: &State) -> Result<(), ModelError> {
        if x.len() != self.n {
            return Err(ModelError::DimensionMismatch { expected: self.n, got: x.len() });
        }
        if !self.domain.contains(x) {
            return Err(ModelError::DomainViolation { state: x.iter().copied().collect() });
        }
        Ok(())
    }

    /// Co-energy vector `H_x(x)` (temperatures for entropy states).
    pub fn co_energy(&self, x: &State) -> State {
        self.hamiltonian.grad(x)
    }

    /// Poisson bracket `{S,H}_J(x) = l^T J H_x(x)`, the driving force of the
    /// irreversible phenomenon.
    pub fn poisson_bracket(&self, x: &State) -> Result<f64, ModelError> {
        self.check_state(x)?;
        Ok(self.poisson_bracket_unchecked(x))
    }

    pub(crate) fn poisson_bracket_unchecked(&self, x: &State) -> f64 {
        let hx = self.hamiltonian.grad(x);
        self.entropy.weights().dot(&(self.j.matrix() * hx))
    }

    /// Entropy production rate `R(x) = gamma * {S,H}_J^2 >= 0`.
    pub fn entropy_production(&self, x: &State) -> Result<f64, ModelError> {
        self.check_state(x)?;
        Ok(self.entropy_production_unchecked(x))
    }

    pub(crate) fn entropy_production_unchecked(&self, x: &State) -> f64 {
        let hx = self.hamiltonian.grad(x);
        let bracket = self.entropy.weights().dot(&(self.j.matrix() * &hx));
        self.gamma.eval(x, &hx) * bracket * bracket
    }

    /// Uncontrolled drift `gamma * {S,H}_J * J * H_x` (without any affine
    /// offset).
    pub fn drift(&self, x: &State) -> Result<State, ModelError> {
        self.check_state(x)?;
        Ok(self.drift_unchecked(x))
    }

    pub(crate) fn drift_unchecked(&self, x: &State) -> State {
        let hx = self.hamiltonian.grad(x);
        let j_hx = self.j.matrix() * &hx;
        let bracket = self.entropy.weights().dot(&j_hx);
        let gamma = self.gamma.eval(x, &hx);
        j_hx * (gamma * bracket)
    }

    /// Full right-hand side `drift + W + g u`.
    pub fn rhs(&self, x: &State, u: &Control) -> Result<State, ModelError> {
        self.check_state(x)?;
        if u.len() != self.m {
            return Err(ModelError::DimensionMismatch { expected: self.m, got: u.len() });
        }
        Ok(self.rhs_unchecked(x, u))
    }

    /// Right-hand side without the domain guard; used by integrators and the
    /// transcription, which enforce the domain through state bounds instead.
    pub fn rhs_unchecked(&self, x: &State, u: &Control) -> State {
        let hx = self.hamiltonian.grad(x);
        let j_hx = self.j.matrix() * &hx;
        let bracket = self.entropy.weights().dot(&j_hx);
        let gamma = self.gamma.eval(x, &hx);
        let mut dx = j_hx * (gamma * bracket);
        if let Some(w) = &self.offset {
            dx += w(x, &hx);
        }
        dx += self.input.eval(x, &hx) * u;
        dx
    }

    /// Input map `g(x, H_x(x))` evaluated at a state.
    pub fn input_matrix(&self, x: &State) -> DMatrix<f64> {
        let hx = self.hamiltonian.grad(x);
        self.input.eval(x, &hx)
    }

    /// Energy- and entropy-conjugated outputs `(y_H, y_S)`.
    pub fn outputs(&self, x: &State) -> Result<(Control, Control), ModelError> {
        self.check_state(x)?;
        Ok(self.outputs_unchecked(x))
    }

    pub(crate) fn outputs_unchecked(&self, x: &State) -> (Control, Control) {
        let hx = self.hamiltonian.grad(x);
        let g = self.input.eval(x, &hx);
        let y_h = g.transpose() * &hx;
        let y_s = g.transpose() * self.entropy.weights();
        (y_h, y_s)
    }

    /// Running cost `[alpha1 y_H - alpha2 T0 y_S]^T u`.
    pub fn stage_cost(&self, x: &State, u: &Control, w: &CostWeights) -> Result<f64, ModelError> {
        self.check_state(x)?;
        if u.len() != self.m {
            return Err(ModelError::DimensionMismatch { expected: self.m, got: u.len() });
        }
        CostWeights::new(w.alpha1, w.alpha2, w.t0)?;
        Ok(self.stage_cost_unchecked(x, u, w))
    }

    pub(crate) fn stage_cost_unchecked(&self, x: &State, u: &Control, w: &CostWeights) -> f64 {
        let (y_h, y_s) = self.outputs_unchecked(x);
        (y_h * w.alpha1 - y_s * (w.alpha2 * w.t0)).dot(u)
    }

    /// Membership test for the set of thermodynamic equilibria
    /// `T = { x : {S,H}_J(x) = 0 }`.
    pub fn is_equilibrium(&self, x: &State, tol: f64) -> Result<bool, ModelError> {
        if tol < 0.0 {
            return Err(ModelError::Configuration("tolerance must be nonnegative".into()));
        }
        Ok(self.poisson_bracket(x)?.abs() <= tol)
    }

    /// True when `Jl = 0`, in which case every state is an equilibrium.
    pub fn all_states_equilibria(&self) -> bool {
        (self.j.matrix() * self.entropy.weights()).norm() == 0.0
    }

    /// Euclidean projection of `x` onto the equilibrium set. Uses the
    /// registered closed form when available, otherwise a damped Gauss-Newton
    /// iteration on the KKT system of `min |x - w|^2 s.t. l^T J H_x(w) = 0`.
    pub fn project_to_equilibria(&self, x: &State) -> Result<State, ModelError> {
        self.check_state(x)?;
        if let Some(p) = &self.equilibrium_projection {
            return Ok(p(x));
        }
        if self.all_states_equilibria() {
            return Ok(x.clone());
        }
        self.project_gauss_newton(x)
    }

    /// Euclidean distance to the equilibrium set.
    pub fn distance_to_equilibria(&self, x: &State) -> Result<f64, ModelError> {
        let w = self.project_to_equilibria(x)?;
        Ok((x - w).norm())
    }

    fn project_gauss_newton(&self, x: &State) -> Result<State, ModelError> {
        const MAX_ITER: usize = 200;
        let jt_l = self.j.matrix().transpose() * self.entropy.weights();
        let scale = 1.0 + x.norm();
        let c_tol = 1e-13 * scale;
        let opt_tol = 1e-11 * scale;

        let constraint = |w: &State| -> f64 { self.poisson_bracket_unchecked(w) };
        // grad of l^T J H_x(w) = H_xx(w) J^T l (H_xx symmetric).
        let constraint_grad = |w: &State| -> State { self.hamiltonian.hess(w) * &jt_l };

        // Gauss-Newton restoration onto the constraint surface.
        let restore = |mut w: State| -> Result<State, ModelError> {
            for _ in 0..60 {
                let c = constraint(&w);
                if c.abs() <= c_tol {
                    return Ok(w);
                }
                let gc = constraint_grad(&w);
                let gc_sq = gc.norm_squared();
                if gc_sq < 1e-300 {
                    return Err(ModelError::ProjectionFailed { residual: c.abs(), iterations: 0 });
                }
                let step = &gc * (c / gc_sq);
                let mut alpha = 1.0;
                loop {
                    let trial = &w - &step * alpha;
                    if constraint(&trial).abs() < c.abs() {
                        w = trial;
                        break;
                    }
                    alpha *= 0.5;
                    if alpha < 1e-12 {
                        return Err(ModelError::ProjectionFailed {
                            residual: c.abs(),
                            iterations: 0,
                        });
                    }
                }
            }
            let res = constraint(&w).abs();
            if res <= c_tol {
                Ok(w)
            } else {
                Err(ModelError::ProjectionFailed { residual: res, iterations: 60 })
            }
        };

        // Alternate tangential moves toward x with restoration.
        let mut w = restore(x.clone())?;
        let mut dist = (x - &w).norm();
        for iter in 0..MAX_ITER {
            let gc = constraint_grad(&w);
            let gc_sq = gc.norm_squared();
            if gc_sq < 1e-300 {
                return Err(ModelError::ProjectionFailed { residual: dist, iterations: iter });
            }
            let d = x - &w;
            let tangential = &d - &gc * (gc.dot(&d) / gc_sq);
            if tangential.norm() <= opt_tol {
                return Ok(w);
            }
            let mut alpha = 1.0;
            let mut improved = false;
            while alpha >= 1e-10 {
                if let Ok(trial) = restore(&w + &tangential * alpha) {
                    let trial_dist = (x - &trial).norm();
                    if trial_dist < dist + 1e-16 * scale {
                        w = trial;
                        dist = trial_dist;
                        improved = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if !improved {
                // No tangential progress possible; accept if stationary.
                let d = x - &w;
                let gc = constraint_grad(&w);
                let tang = &d - &gc * (gc.dot(&d) / gc.norm_squared());
                if tang.norm() <= 1e3 * opt_tol {
                    return Ok(w);
                }
                return Err(ModelError::ProjectionFailed {
                    residual: tang.norm(),
                    iterations: iter,
                });
            }
        }
        Err(ModelError::ProjectionFailed { residual: dist, iterations: MAX_ITER })
    }
}

impl std::fmt::Debug for IphsModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("IphsModel")
            .field("id", &self.id)
            .field("n", &self.n)
            .field("m", &self.m)
            .field("strict", &self.is_strict_iphs())
            .finish()
    }
}
