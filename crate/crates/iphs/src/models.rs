//! Concrete model instances: the two-compartment heat exchanger in its
//! entropy-flow and thermostat control variants.
//!
//! The state is the pair of compartment entropies `x = (S1, S2)`. Each
//! compartment obeys the exponential temperature-entropy relation
//! `T_i(S_i) = T_ref * exp((S_i - S_ref)/c_i)` and the internal heat flow
//! follows Fourier's law `Q = lambda (T1 - T2)`.

use nalgebra::{dmatrix, DVector};

use crate::model::{
    Domain, GammaFn, Hamiltonian, InputMap, IphsModel, LinearEntropy, ModelError, State,
    StructureMatrix,
};

/// Default half-width of the box of admissible entropy states.
pub const DEFAULT_DOMAIN_HALF_WIDTH: f64 = 5.0;

#[derive(Debug, Clone, Copy)]
pub struct HeatExchangerParams {
    /// Internal heat-conduction coefficient (compartment 1 <-> 2).
    pub lambda: f64,
    /// External coefficient of the thermostat wall.
    pub lambda_e: f64,
    /// Heat capacities of the compartments.
    pub c1: f64,
    pub c2: f64,
    /// Reference temperature and entropy of the exponential relation.
    pub t_ref: f64,
    pub s_ref: f64,
}

impl Default for HeatExchangerParams {
    fn default() -> Self {
        Self { lambda: 1.0, lambda_e: 1.0, c1: 1.0, c2: 1.0, t_ref: 1.0, s_ref: 0.0 }
    }
}

impl HeatExchangerParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, v) in [
            ("lambda", self.lambda),
            ("lambda_e", self.lambda_e),
            ("c1", self.c1),
            ("c2", self.c2),
            ("t_ref", self.t_ref),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(ModelError::Configuration(format!("{name} must be positive")));
            }
        }
        if !self.s_ref.is_finite() {
            return Err(ModelError::Configuration("s_ref must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Compartment {
    One,
    Two,
}

impl Compartment {
    fn heat_capacity(self, p: &HeatExchangerParams) -> f64 {
        match self {
            Compartment::One => p.c1,
            Compartment::Two => p.c2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlVariant {
    /// Entropy flow into compartment 1; constant input vector `(1, 0)`.
    EntropyFlow,
    /// Heat flow through the external wall from a thermostat at controlled
    /// temperature `T_e`; affine in the control.
    Thermostat,
}

/// Compartment temperature `T_i(s) = T_ref * exp((s - S_ref)/c_i)`.
pub fn temperature(p: &HeatExchangerParams, i: Compartment, s: f64) -> f64 {
    p.t_ref * ((s - p.s_ref) / i.heat_capacity(p)).exp()
}

/// Compartment energy, the primitive of `T_i` from Gibbs' relation
/// `dH_i = T_i dS_i` with integration constant zero.
pub fn compartment_energy(p: &HeatExchangerParams, i: Compartment, s: f64) -> f64 {
    i.heat_capacity(p) * temperature(p, i, s)
}

/// Entropy-flow control equivalent to a thermostat at temperature `t_e`
/// against compartment temperature `t1`: `lambda_e (T_e - T1)/T1`.
pub fn thermostat_to_entropy_control(
    p: &HeatExchangerParams,
    t_e: f64,
    t1: f64,
) -> Result<f64, ModelError> {
    if !(t1 > 0.0) {
        return Err(ModelError::DomainViolation { state: vec![t1] });
    }
    Ok(p.lambda_e * (t_e - t1) / t1)
}

/// Assemble the heat exchanger as an `IphsModel`.
///
/// The entropy-flow variant is a strict IPHS with `g = (1, 0)^T`. The
/// thermostat variant is affine in the control; it is represented with input
/// map `lambda_e (1/T1, 0)^T` (control `u = T_e`) plus the constant offset
/// `-lambda_e (1, 0)^T` folded into the drift.
pub fn heat_exchanger_model(
    p: &HeatExchangerParams,
    variant: ControlVariant,
) -> Result<IphsModel, ModelError> {
    p.validate()?;
    let p = *p;

    let j = StructureMatrix::new(dmatrix![0.0, -1.0; 1.0, 0.0])?;
    let entropy = LinearEntropy::new(DVector::from_vec(vec![1.0, 1.0]))?;

    let hamiltonian = Hamiltonian::new(
        move |x: &State| {
            compartment_energy(&p, Compartment::One, x[0])
                + compartment_energy(&p, Compartment::Two, x[1])
        },
        move |x: &State| {
            DVector::from_vec(vec![
                temperature(&p, Compartment::One, x[0]),
                temperature(&p, Compartment::Two, x[1]),
            ])
        },
        move |x: &State| {
            let t1 = temperature(&p, Compartment::One, x[0]);
            let t2 = temperature(&p, Compartment::Two, x[1]);
            dmatrix![t1 / p.c1, 0.0; 0.0, t2 / p.c2]
        },
    );

    let gamma = GammaFn::new(move |_x: &State, co: &State| p.lambda / (co[0] * co[1]));

    let domain = Domain::centered(2, DEFAULT_DOMAIN_HALF_WIDTH);

    let model = match variant {
        ControlVariant::EntropyFlow => {
            let input = InputMap::new(|_x: &State, _co: &State| dmatrix![1.0; 0.0]);
            IphsModel::new(
                "heat-exchanger-entropy-flow",
                j,
                hamiltonian,
                entropy,
                gamma,
                input,
                1,
                domain,
            )?
        }
        ControlVariant::Thermostat => {
            let input =
                InputMap::new(move |_x: &State, co: &State| dmatrix![p.lambda_e / co[0]; 0.0]);
            IphsModel::new(
                "heat-exchanger-thermostat",
                j,
                hamiltonian,
                entropy,
                gamma,
                input,
                1,
                domain,
            )?
            .with_offset(Box::new(move |_x: &State, _co: &State| {
                DVector::from_vec(vec![-p.lambda_e, 0.0])
            }))
        }
    };

    // The equilibrium set { T1(s1) = T2(s2) } is the line through
    // (s_ref, s_ref) with direction (c1, c2); project orthogonally onto it.
    let (c1, c2, s_ref) = (p.c1, p.c2, p.s_ref);
    Ok(model.with_equilibrium_projection(move |x: &State| {
        let norm_sq = c1 * c1 + c2 * c2;
        let t = (c1 * (x[0] - s_ref) + c2 * (x[1] - s_ref)) / norm_sq;
        DVector::from_vec(vec![s_ref + c1 * t, s_ref + c2 * t])
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn params() -> HeatExchangerParams {
        HeatExchangerParams::default()
    }

    fn state(a: f64, b: f64) -> State {
        DVector::from_vec(vec![a, b])
    }

    #[test]
    fn temperature_examples() {
        let p = params();
        assert_eq!(temperature(&p, Compartment::One, 0.0), 1.0);
        assert!((temperature(&p, Compartment::Two, 20.0_f64.ln()) - 20.0).abs() < 1e-12);
        let p2 = HeatExchangerParams { t_ref: 2.0, ..params() };
        assert_eq!(temperature(&p2, Compartment::One, 0.0), 2.0);
    }

    #[test]
    fn compartment_energy_examples() {
        let p = params();
        assert_eq!(compartment_energy(&p, Compartment::One, 0.0), 1.0);
        let s = 20.0_f64.ln();
        let total = compartment_energy(&p, Compartment::One, s)
            + compartment_energy(&p, Compartment::Two, s);
        assert!((total - 40.0).abs() < 1e-12);
        let total0 = compartment_energy(&p, Compartment::One, 0.0)
            + compartment_energy(&p, Compartment::Two, 0.0);
        assert!((total0 - 2.0).abs() < 1e-15);
    }

    #[test]
    fn compartment_energy_matches_quadrature_of_temperature() {
        // Oracle: H_i(s) - H_i(s_lo) = integral of T_i over [s_lo, s] by
        // composite Simpson.
        let p = HeatExchangerParams { c1: 1.7, c2: 0.8, t_ref: 1.3, s_ref: 0.2, ..params() };
        for (i, s) in [(Compartment::One, 1.9), (Compartment::Two, -0.7)] {
            let s_lo = -2.0;
            let n = 2000;
            let h = (s - s_lo) / n as f64;
            let mut quad = 0.0;
            for k in 0..n {
                let a = s_lo + k as f64 * h;
                quad += h / 6.0
                    * (temperature(&p, i, a)
                        + 4.0 * temperature(&p, i, a + 0.5 * h)
                        + temperature(&p, i, a + h));
            }
            let diff = compartment_energy(&p, i, s) - compartment_energy(&p, i, s_lo);
            assert!((quad - diff).abs() < 1e-10 * (1.0 + diff.abs()));
        }
    }

    #[test]
    fn entropy_flow_model_examples() {
        let m = heat_exchanger_model(&params(), ControlVariant::EntropyFlow).unwrap();
        let dx = m.rhs(&state(0.0, 0.0), &DVector::from_vec(vec![1.0])).unwrap();
        assert_eq!(dx[0], 1.0);
        assert_eq!(dx[1], 0.0);
        let d = m.drift(&state(0.0, 2.0_f64.ln())).unwrap();
        assert!((d[0] - 1.0).abs() < 1e-14);
        assert!((d[1] + 0.5).abs() < 1e-14);
        assert!(m.is_strict_iphs());
    }

    #[test]
    fn thermostat_fixed_point() {
        let m = heat_exchanger_model(&params(), ControlVariant::Thermostat).unwrap();
        assert!(!m.is_strict_iphs());
        // T_e = T1 with equal compartment temperatures: no gradients, no flows.
        let x = state(0.3, 0.3);
        let t1 = temperature(&params(), Compartment::One, 0.3);
        let dx = m.rhs(&x, &DVector::from_vec(vec![t1])).unwrap();
        assert!(dx.norm() < 1e-15);
    }

    #[test]
    fn control_transformation_examples() {
        let p = params();
        assert_eq!(thermostat_to_entropy_control(&p, 1.7, 1.7).unwrap(), 0.0);
        assert_eq!(thermostat_to_entropy_control(&p, 2.0, 1.0).unwrap(), 1.0);
        assert_eq!(thermostat_to_entropy_control(&p, 1.0, 2.0).unwrap(), -0.5);
        assert!(thermostat_to_entropy_control(&p, 1.0, 0.0).is_err());
    }

    #[test]
    fn fourier_consistency() {
        // -T1 dS1 = T2 dS2 = lambda (T1 - T2) pointwise for the closed system.
        let p = HeatExchangerParams { lambda: 1.9, ..params() };
        let m = heat_exchanger_model(&p, ControlVariant::EntropyFlow).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let x = state(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let d = m.drift(&x).unwrap();
            let t1 = temperature(&p, Compartment::One, x[0]);
            let t2 = temperature(&p, Compartment::Two, x[1]);
            let q = p.lambda * (t1 - t2);
            assert!((-t1 * d[0] - q).abs() <= 1e-10 * (1.0 + q.abs()));
            assert!((t2 * d[1] - q).abs() <= 1e-10 * (1.0 + q.abs()));
        }
    }

    #[test]
    fn equilibria_are_the_diagonal() {
        let m = heat_exchanger_model(&params(), ControlVariant::EntropyFlow).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let x = state(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
            let tol = 1e-8;
            let member = m.is_equilibrium(&x, tol).unwrap();
            // Under the closed-form map, |{S,H}| <= tol corresponds to a band
            // around S1 = S2; check agreement through the distance.
            let dist = m.distance_to_equilibria(&x).unwrap();
            if member {
                assert!(dist <= 1.0 * tol.sqrt());
            } else {
                assert!((x[0] - x[1]).abs() > 0.0);
            }
        }
        // Exact member.
        assert!(m.is_equilibrium(&state(1.234, 1.234), 0.0).unwrap());
    }

    #[test]
    fn asymmetric_capacities_projection() {
        let p = HeatExchangerParams { c1: 2.0, c2: 1.0, ..params() };
        let closed = heat_exchanger_model(&p, ControlVariant::EntropyFlow).unwrap();
        let mut generic = heat_exchanger_model(&p, ControlVariant::EntropyFlow).unwrap();
        generic.clear_equilibrium_projection();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let x = state(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let dc = closed.distance_to_equilibria(&x).unwrap();
            let dg = generic.distance_to_equilibria(&x).unwrap();
            assert!((dc - dg).abs() <= 1e-8, "x={x:?} {dc} vs {dg}");
        }
    }

    #[test]
    fn invalid_params_rejected() {
        let p = HeatExchangerParams { lambda: 0.0, ..params() };
        assert!(heat_exchanger_model(&p, ControlVariant::EntropyFlow).is_err());
    }
}
