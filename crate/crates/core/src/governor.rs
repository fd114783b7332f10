//! Turbine-governor dynamics and droop-constant certificates.
//!
//! Two actuation models are supported per generator: a single first-order lag
//! from the control setpoint to mechanical power, and the widely used cascade
//! of a governor lag and a turbine lag (second order). The second-order model
//! is not passive from frequency to mechanical power, so closed-loop
//! dissipation rests on a per-generator 3x3 matrix being negative definite;
//! this module computes that matrix, the closed-form admissible droop
//! interval, and an eigenvalue-based verdict.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dispatch::CostFunction;

/// Eigenvalues must fall below -NEGDEF_TOL for a negative-definite verdict.
const NEGDEF_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum GovernorError {
    #[error("{what} must be positive for generator {index} (got {value})")]
    NonPositiveTime {
        what: &'static str,
        index: usize,
        value: f64,
    },
    #[error("droop must be finite for generator {index}")]
    NonFiniteDroop { index: usize },
    #[error("first-order governor at generator {index} requires a positive droop (got {value})")]
    NonPositiveDroopFirstOrder { index: usize, value: f64 },
}

/// Actuation model order. The second-order cascade carries the extra
/// governor (steam) state and its time constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GovernorModel {
    FirstOrder,
    SecondOrder { steam_time: f64 },
}

/// One generator's actuation chain and cost data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorUnit {
    pub governor: GovernorModel,
    /// Turbine time constant (s).
    pub turbine_time: f64,
    /// Permanent droop constant: proportional feedback from frequency
    /// deviation into the governor (stored as the gain itself, i.e. K^-1).
    pub droop: f64,
    /// Setpoint controller time constant (s).
    pub control_time: f64,
    pub cost: CostFunction,
}

impl GeneratorUnit {
    pub fn validate(&self, index: usize) -> Result<(), GovernorError> {
        let check = |what: &'static str, value: f64| {
            if value > 0.0 && value.is_finite() {
                Ok(())
            } else {
                Err(GovernorError::NonPositiveTime { what, index, value })
            }
        };
        check("turbine time constant", self.turbine_time)?;
        check("controller time constant", self.control_time)?;
        if !self.droop.is_finite() {
            return Err(GovernorError::NonFiniteDroop { index });
        }
        match self.governor {
            GovernorModel::FirstOrder => {
                if self.droop <= 0.0 {
                    return Err(GovernorError::NonPositiveDroopFirstOrder {
                        index,
                        value: self.droop,
                    });
                }
            }
            GovernorModel::SecondOrder { steam_time } => {
                check("governor time constant", steam_time)?;
            }
        }
        Ok(())
    }

    pub fn is_second_order(&self) -> bool {
        matches!(self.governor, GovernorModel::SecondOrder { .. })
    }

    pub fn steam_time(&self) -> Option<f64> {
        match self.governor {
            GovernorModel::FirstOrder => None,
            GovernorModel::SecondOrder { steam_time } => Some(steam_time),
        }
    }
}

/// First-order turbine-governor: one lag from setpoint to mechanical power
/// with droop feedback. Returns d(mech_power)/dt.
pub fn tg1_rhs(mech_power: f64, gen_freq: f64, setpoint: f64, unit: &GeneratorUnit) -> f64 {
    debug_assert!(!unit.is_second_order());
    (-mech_power - unit.droop * gen_freq + setpoint) / unit.turbine_time
}

/// Second-order turbine-governor: governor lag (with droop feedback) feeding
/// the turbine lag. Returns (d(steam_power)/dt, d(mech_power)/dt).
pub fn tg2_rhs(
    steam_power: f64,
    mech_power: f64,
    gen_freq: f64,
    setpoint: f64,
    unit: &GeneratorUnit,
) -> (f64, f64) {
    let steam_time = unit
        .steam_time()
        .expect("tg2_rhs requires a second-order unit");
    let steam_dot = (-steam_power - unit.droop * gen_freq + setpoint) / steam_time;
    let mech_dot = (-mech_power + steam_power) / unit.turbine_time;
    (steam_dot, mech_dot)
}

/// Dissipation matrix of the interconnected swing / second-order
/// turbine-governor / setpoint controller block, in the coordinates
/// (gen_freq, steam - mech, steam - setpoint).
pub fn assemble_w(steam_time: f64, turbine_time: f64, gen_damping: f64, droop: f64) -> Matrix3<f64> {
    let k = droop;
    Matrix3::new(
        -gen_damping,
        -0.5 * k - 0.5,
        -0.5 * k + 0.5,
        -0.5 * k - 0.5,
        -steam_time / turbine_time,
        -0.5,
        -0.5 * k + 0.5,
        -0.5,
        -1.0,
    )
}

/// Certificate for the admissible droop range of a second-order unit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DroopCertificate {
    /// Droop value that was checked.
    pub droop: f64,
    /// Discriminant of the boundary quadratic; the interval half-width is
    /// its square root.
    pub alpha: f64,
    /// 4 * T_s / T_m > 1.
    pub ratio_condition: bool,
    /// D_g * T_s / T_m > 1.
    pub damping_condition: bool,
    /// Admissible open interval for the droop, present when both
    /// prerequisite inequalities hold.
    pub interval: Option<(f64, f64)>,
    /// Checked droop lies strictly inside the interval.
    pub inside_interval: bool,
    /// Dissipation matrix, row-major.
    pub w: [[f64; 3]; 3],
    /// Eigenvalues of the dissipation matrix, ascending.
    pub eigenvalues: [f64; 3],
    /// All eigenvalues strictly negative (below -1e-12).
    pub negative_definite: bool,
}

impl DroopCertificate {
    /// The certificate holds when the prerequisites are met and the droop is
    /// strictly inside the admissible interval.
    pub fn holds(&self) -> bool {
        self.ratio_condition && self.damping_condition && self.inside_interval
    }
}

/// Evaluates both routes to the droop stability condition: the closed-form
/// interval and the eigenvalues of the dissipation matrix.
pub fn droop_certificate(
    steam_time: f64,
    turbine_time: f64,
    gen_damping: f64,
    droop: f64,
) -> DroopCertificate {
    let ratio = steam_time / turbine_time;
    let ratio_condition = 4.0 * ratio > 1.0;
    let damping_condition = gen_damping * ratio > 1.0;
    let alpha =
        (turbine_time / steam_time).powi(2) * (4.0 * ratio - 1.0) * (gen_damping * ratio - 1.0);
    let interval = if ratio_condition && damping_condition {
        let center = 1.0 - turbine_time / steam_time;
        let half_width = alpha.sqrt();
        Some((center - half_width, center + half_width))
    } else {
        None
    };
    let inside_interval = interval.is_some_and(|(lo, hi)| lo < droop && droop < hi);

    let w = assemble_w(steam_time, turbine_time, gen_damping, droop);
    let mut eigenvalues: Vec<f64> = w.symmetric_eigen().eigenvalues.iter().copied().collect();
    eigenvalues.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let negative_definite = eigenvalues.iter().all(|&e| e < -NEGDEF_TOL);

    DroopCertificate {
        droop,
        alpha,
        ratio_condition,
        damping_condition,
        interval,
        inside_interval,
        w: [
            [w[(0, 0)], w[(0, 1)], w[(0, 2)]],
            [w[(1, 0)], w[(1, 1)], w[(1, 2)]],
            [w[(2, 0)], w[(2, 1)], w[(2, 2)]],
        ],
        eigenvalues: [eigenvalues[0], eigenvalues[1], eigenvalues[2]],
        negative_definite,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit2(steam_time: f64, turbine_time: f64, droop: f64) -> GeneratorUnit {
        GeneratorUnit {
            governor: GovernorModel::SecondOrder { steam_time },
            turbine_time,
            droop,
            control_time: 0.1,
            cost: CostFunction::new(1.0, 0.0, 0.0),
        }
    }

    fn unit1(turbine_time: f64, droop: f64) -> GeneratorUnit {
        GeneratorUnit {
            governor: GovernorModel::FirstOrder,
            turbine_time,
            droop,
            control_time: 0.1,
            cost: CostFunction::new(1.0, 0.0, 0.0),
        }
    }

    /// Classical fixed-step RK4 for a small autonomous system, local to the
    /// tests.
    fn rk4(mut state: Vec<f64>, rhs: impl Fn(&[f64]) -> Vec<f64>, dt: f64, steps: usize) -> Vec<f64> {
        for _ in 0..steps {
            let k1 = rhs(&state);
            let s2: Vec<f64> = state.iter().zip(&k1).map(|(x, k)| x + 0.5 * dt * k).collect();
            let k2 = rhs(&s2);
            let s3: Vec<f64> = state.iter().zip(&k2).map(|(x, k)| x + 0.5 * dt * k).collect();
            let k3 = rhs(&s3);
            let s4: Vec<f64> = state.iter().zip(&k3).map(|(x, k)| x + dt * k).collect();
            let k4 = rhs(&s4);
            for i in 0..state.len() {
                state[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        state
    }

    #[test]
    fn tg1_fixed_point() {
        let u = unit1(5.0, 2.0);
        assert_eq!(tg1_rhs(0.8, 0.0, 0.8, &u), 0.0);
    }

    #[test]
    fn tg1_droop_pulls_against_frequency() {
        let u = unit1(5.0, 2.0);
        let dot = tg1_rhs(0.8, 0.01, 0.8, &u);
        assert!((dot - (-0.02 / 5.0)).abs() < 1e-15);
    }

    #[test]
    fn tg1_step_approach_is_exponential() {
        let u = unit1(5.0, 2.0);
        // Setpoint steps from 0.8 to 1.0 with frequency held at zero.
        let final_state = rk4(
            vec![0.8],
            |s| vec![tg1_rhs(s[0], 0.0, 1.0, &u)],
            1e-3,
            5000,
        );
        let analytic = 1.0 + (0.8 - 1.0) * (-5.0_f64 / u.turbine_time).exp();
        assert!((final_state[0] - analytic).abs() < 1e-9);
    }

    #[test]
    fn tg2_fixed_point() {
        let u = unit2(4.0, 5.0, 0.5);
        let (sd, md) = tg2_rhs(0.8, 0.8, 0.0, 0.8, &u);
        assert_eq!(sd, 0.0);
        assert_eq!(md, 0.0);
    }

    #[test]
    fn tg2_mech_power_rate_is_independent_of_frequency() {
        // Relative degree two: the first derivative of the output must not
        // see the frequency input.
        let u = unit2(4.0, 5.0, 0.5);
        let (_, md_a) = tg2_rhs(0.7, 0.9, 0.0, 0.8, &u);
        let (_, md_b) = tg2_rhs(0.7, 0.9, 0.3, 0.8, &u);
        assert_eq!(md_a, md_b);
    }

    #[test]
    fn tg2_step_response_matches_two_pole_solution() {
        let (steam_time, turbine_time) = (4.0, 5.0);
        let u = unit2(steam_time, turbine_time, 0.5);
        let dt = 1e-3;
        let horizon = 8.0;
        let steps = (horizon / dt) as usize;
        let final_state = rk4(
            vec![0.0, 0.0],
            |s| {
                let (sd, md) = tg2_rhs(s[0], s[1], 0.0, 1.0, &u);
                vec![sd, md]
            },
            dt,
            steps,
        );
        let t = horizon;
        let analytic = 1.0 - turbine_time / (turbine_time - steam_time) * (-t / turbine_time).exp()
            + steam_time / (turbine_time - steam_time) * (-t / steam_time).exp();
        assert!(
            (final_state[1] - analytic).abs() < 1e-6,
            "numeric {} vs analytic {}",
            final_state[1],
            analytic
        );
    }

    #[test]
    fn certificate_first_generator_values() {
        // T_s = 4.0, T_m = 5.0, D_g = 3.4.
        let cert = droop_certificate(4.0, 5.0, 3.4, 0.5);
        assert!(cert.ratio_condition); // 3.2 > 1
        assert!(cert.damping_condition); // 2.72 > 1
        let (lo, hi) = cert.interval.unwrap();
        assert!((lo - (-2.6816)).abs() < 1e-3);
        assert!((hi - 2.1816).abs() < 1e-3);
        assert!(cert.inside_interval);
        assert!(cert.negative_definite);
        assert!(cert.holds());
    }

    #[test]
    fn interval_endpoint_is_eigenvalue_boundary() {
        let cert = droop_certificate(4.0, 5.0, 3.4, 0.0);
        let (lo, hi) = cert.interval.unwrap();
        for endpoint in [lo, hi] {
            let boundary = droop_certificate(4.0, 5.0, 3.4, endpoint);
            let max_eig = boundary.eigenvalues[2];
            assert!(
                max_eig.abs() < 1e-6,
                "largest eigenvalue at endpoint {endpoint}: {max_eig}"
            );
        }
    }

    #[test]
    fn prerequisite_failure_reported() {
        // D_g * T_s / T_m = 0.5 <= 1.
        let cert = droop_certificate(1.0, 2.0, 1.0, 0.3);
        assert!(!cert.damping_condition);
        assert!(cert.interval.is_none());
        assert!(!cert.holds());
    }

    #[test]
    fn w_matrix_entries() {
        let k = 0.7;
        let w = assemble_w(4.0, 5.0, 3.4, k);
        assert_eq!(w[(0, 1)], -0.5 * k - 0.5);
        assert_eq!(w[(1, 0)], -0.5 * k - 0.5);
        assert_eq!(w[(0, 2)], -0.5 * k + 0.5);
        assert_eq!(w[(1, 1)], -4.0 / 5.0);
        assert_eq!(w[(2, 2)], -1.0);
        assert_eq!(w[(0, 0)], -3.4);
        assert_eq!(w, w.transpose());
    }

    /// Hand-derived Schur complement of the lower-right 2x2 block of W,
    /// quadratic in the droop.
    fn schur_closed_form(steam_time: f64, turbine_time: f64, gen_damping: f64, droop: f64) -> f64 {
        let ratio = steam_time / turbine_time;
        let k = droop;
        -gen_damping
            + (0.25 * ratio * k * k + (0.5 - 0.5 * ratio) * k + 0.5 + 0.25 * ratio)
                / (ratio - 0.25)
    }

    #[test]
    fn schur_complement_matches_closed_form() {
        for &(ts, tm, dg, k) in &[
            (4.0, 5.0, 3.4, 0.5),
            (4.6, 6.7, 3.0, 0.5),
            (5.0, 10.0, 4.2, 2.0),
            (2.0, 1.0, 5.0, -1.0),
        ] {
            let w = assemble_w(ts, tm, dg, k);
            let x = w.fixed_view::<2, 2>(1, 1).into_owned();
            let b = nalgebra::Vector2::new(w[(0, 1)], w[(0, 2)]);
            let numeric = w[(0, 0)] - (b.transpose() * x.try_inverse().unwrap() * b)[(0, 0)];
            let closed = schur_closed_form(ts, tm, dg, k);
            assert!(
                (numeric - closed).abs() < 1e-12,
                "schur mismatch at ({ts},{tm},{dg},{k}): {numeric} vs {closed}"
            );
        }
    }

    #[test]
    fn quadratic_formula_identities() {
        // The boundary quadratic a*k^2 + b*k + c has vertex 1 - T_m/T_s and
        // normalized discriminant alpha.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let ts: f64 = rng.gen_range(0.2..10.0);
            let tm: f64 = rng.gen_range(0.2..10.0);
            let dg: f64 = rng.gen_range(0.2..10.0);
            let ratio = ts / tm;
            let a = 0.25 * ratio;
            let b = 0.5 - 0.5 * ratio;
            let c = -dg * (ratio - 0.25) + 0.5 + 0.25 * ratio;
            let vertex = -b / (2.0 * a);
            let expected_vertex = 1.0 - tm / ts;
            assert!(
                (vertex - expected_vertex).abs() <= 1e-10 * expected_vertex.abs().max(1.0),
                "vertex {vertex} vs {expected_vertex}"
            );
            let disc = (b * b - 4.0 * a * c) / (4.0 * a * a);
            let alpha = (tm / ts).powi(2) * (4.0 * ratio - 1.0) * (dg * ratio - 1.0);
            assert!(
                (disc - alpha).abs() <= 1e-10 * alpha.abs().max(1.0),
                "discriminant {disc} vs alpha {alpha}"
            );
        }
    }

    #[test]
    fn eigenvalue_verdict_agrees_with_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        while checked < 1000 {
            let ts: f64 = rng.gen_range(0.2..10.0);
            let tm: f64 = rng.gen_range(0.2..10.0);
            let dg: f64 = rng.gen_range(0.2..10.0);
            if 4.0 * ts / tm <= 1.0 || dg * ts / tm <= 1.0 {
                continue;
            }
            let probe = droop_certificate(ts, tm, dg, 0.0);
            let (lo, hi) = probe.interval.unwrap();
            let center = 0.5 * (lo + hi);
            let half = 0.5 * (hi - lo);
            let k = center + rng.gen_range(-2.0..2.0) * half;
            if (k - lo).abs() < 1e-9 || (k - hi).abs() < 1e-9 {
                continue;
            }
            let cert = droop_certificate(ts, tm, dg, k);
            assert_eq!(
                cert.negative_definite, cert.inside_interval,
                "disagreement at ts={ts} tm={tm} dg={dg} k={k}"
            );
            checked += 1;
        }
    }

    #[test]
    fn validation_rejects_bad_units() {
        let mut u = unit1(5.0, 2.0);
        assert!(u.validate(0).is_ok());
        u.droop = -1.0;
        assert!(matches!(
            u.validate(0),
            Err(GovernorError::NonPositiveDroopFirstOrder { .. })
        ));
        let mut u = unit2(4.0, 5.0, 0.5);
        assert!(u.validate(1).is_ok());
        u.governor = GovernorModel::SecondOrder { steam_time: 0.0 };
        assert!(u.validate(1).is_err());
    }
}
