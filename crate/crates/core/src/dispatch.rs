//! Linear-quadratic generation costs and closed-form economic dispatch.
//!
//! The dispatch problem minimizes total generation cost subject to total
//! generation matching total demand, with no capacity limits. For strictly
//! convex linear-quadratic costs the optimum is the unique point where all
//! marginal costs agree, which this module computes in closed form. A
//! derivative-free brute-force minimizer over the balance constraint is
//! provided as an independent verification oracle.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DispatchError {
    #[error("dispatch requires at least one generator")]
    EmptyGeneratorSet,
    #[error("cost function {index} must have a positive quadratic coefficient (got {value})")]
    NonConvexCost { index: usize, value: f64 },
    #[error("brute-force oracle is desk-scale only: {count} generators exceeds the limit of {max}")]
    TooManyGenerators { count: usize, max: usize },
    #[error("grid resolution must be positive (got {0})")]
    NonPositiveResolution(f64),
}

/// Strictly convex linear-quadratic generation cost
/// `C(p) = q/2 * p^2 + r * p + s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostFunction {
    /// Quadratic coefficient, must be positive.
    pub quadratic: f64,
    /// Linear coefficient.
    pub linear: f64,
    /// Constant offset. Never affects the optimizer, reported in totals.
    pub offset: f64,
}

impl CostFunction {
    pub fn new(quadratic: f64, linear: f64, offset: f64) -> Self {
        Self {
            quadratic,
            linear,
            offset,
        }
    }

    pub fn value(&self, power: f64) -> f64 {
        0.5 * self.quadratic * power * power + self.linear * power + self.offset
    }

    /// Marginal cost `q * p + r`.
    pub fn marginal(&self, power: f64) -> f64 {
        self.quadratic * power + self.linear
    }
}

/// Strictly concave consumption benefit for a controllable load.
///
/// The coefficients are stored positive; the benefit used in the welfare
/// objective is `-q/2 * u^2 + r * u + s` (curvature `-q < 0`), so the
/// marginal benefit is `-q * u + r`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenefitFunction {
    /// Magnitude of the (negative) quadratic coefficient, must be positive.
    pub quadratic: f64,
    /// Linear coefficient.
    pub linear: f64,
    /// Constant offset.
    pub offset: f64,
}

impl BenefitFunction {
    pub fn new(quadratic: f64, linear: f64, offset: f64) -> Self {
        Self {
            quadratic,
            linear,
            offset,
        }
    }

    pub fn value(&self, consumption: f64) -> f64 {
        -0.5 * self.quadratic * consumption * consumption + self.linear * consumption + self.offset
    }

    /// Marginal benefit `-q * u + r`.
    pub fn marginal(&self, consumption: f64) -> f64 {
        -self.quadratic * consumption + self.linear
    }
}

/// Cost-minimizing generation split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchResult {
    /// Optimal generation per unit (pu).
    pub generation: Vec<f64>,
    /// Common marginal cost at the optimum.
    pub marginal_price: f64,
    /// Total cost including constant offsets.
    pub total_cost: f64,
}

/// Welfare-maximizing generation and controllable-load split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SocialWelfareResult {
    pub generation: Vec<f64>,
    /// Optimal extra consumption per controllable load (pu).
    pub flexible_load: Vec<f64>,
    /// Common marginal cost = marginal benefit at the optimum.
    pub marginal_price: f64,
    /// Total benefit minus total cost.
    pub welfare: f64,
}

fn validate_costs(costs: &[CostFunction]) -> Result<(), DispatchError> {
    if costs.is_empty() {
        return Err(DispatchError::EmptyGeneratorSet);
    }
    for (index, c) in costs.iter().enumerate() {
        if c.quadratic.is_nan() || c.quadratic <= 0.0 {
            return Err(DispatchError::NonConvexCost {
                index,
                value: c.quadratic,
            });
        }
    }
    Ok(())
}

/// Closed-form economic dispatch: equalize marginal costs subject to the
/// balance constraint.
pub fn optimal_dispatch(
    costs: &[CostFunction],
    total_load: f64,
) -> Result<DispatchResult, DispatchError> {
    validate_costs(costs)?;
    let inv_q_sum: f64 = costs.iter().map(|c| 1.0 / c.quadratic).sum();
    let r_over_q_sum: f64 = costs.iter().map(|c| c.linear / c.quadratic).sum();
    let marginal_price = (total_load + r_over_q_sum) / inv_q_sum;
    let generation: Vec<f64> = costs
        .iter()
        .map(|c| (marginal_price - c.linear) / c.quadratic)
        .collect();
    let total_cost = costs
        .iter()
        .zip(&generation)
        .map(|(c, &p)| c.value(p))
        .sum();
    Ok(DispatchResult {
        generation,
        marginal_price,
        total_cost,
    })
}

/// Marginal cost of every generator at the given operating point.
pub fn marginal_costs(generation: &[f64], costs: &[CostFunction]) -> Vec<f64> {
    costs
        .iter()
        .zip(generation)
        .map(|(c, &p)| c.marginal(p))
        .collect()
}

const ORACLE_MAX_GENERATORS: usize = 4;

/// Derivative-free dispatch oracle: coarse-to-fine pairwise power transfers
/// on the balance constraint. Independent of the closed form; intended for
/// verification at desk scale only.
pub fn brute_force_dispatch(
    costs: &[CostFunction],
    total_load: f64,
    grid_resolution: f64,
) -> Result<DispatchResult, DispatchError> {
    validate_costs(costs)?;
    if grid_resolution.is_nan() || grid_resolution <= 0.0 {
        return Err(DispatchError::NonPositiveResolution(grid_resolution));
    }
    if costs.len() > ORACLE_MAX_GENERATORS {
        return Err(DispatchError::TooManyGenerators {
            count: costs.len(),
            max: ORACLE_MAX_GENERATORS,
        });
    }
    let n = costs.len();
    let mut generation = vec![total_load / n as f64; n];
    let cost_of = |g: &[f64]| -> f64 {
        costs
            .iter()
            .zip(g)
            .map(|(c, &p)| c.value(p))
            .sum()
    };
    let mut best = cost_of(&generation);
    // Every move transfers power between a pair of units, so the balance
    // constraint holds exactly at every step.
    let mut step = total_load.abs().max(1.0);
    while step >= grid_resolution {
        loop {
            let mut improved = false;
            for i in 0..n {
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    generation[i] += step;
                    generation[j] -= step;
                    let trial = cost_of(&generation);
                    if trial < best {
                        best = trial;
                        improved = true;
                    } else {
                        generation[i] -= step;
                        generation[j] += step;
                    }
                }
            }
            if !improved {
                break;
            }
        }
        step *= 0.5;
    }
    let spread = marginal_costs(&generation, costs);
    let marginal_price = spread.iter().sum::<f64>() / n as f64;
    Ok(DispatchResult {
        generation,
        marginal_price,
        total_cost: best,
    })
}

/// Closed-form social-welfare optimum: maximize total consumption benefit
/// minus total generation cost subject to generation covering inflexible
/// plus controllable demand. With no controllable loads this reduces to
/// [`optimal_dispatch`].
pub fn social_welfare_dispatch(
    gen_costs: &[CostFunction],
    load_benefits: &[BenefitFunction],
    inflexible_load: f64,
) -> Result<SocialWelfareResult, DispatchError> {
    validate_costs(gen_costs)?;
    for (index, b) in load_benefits.iter().enumerate() {
        if b.quadratic.is_nan() || b.quadratic <= 0.0 {
            return Err(DispatchError::NonConvexCost {
                index: gen_costs.len() + index,
                value: b.quadratic,
            });
        }
    }
    // Stationarity: q_i * P_i + r_i = -q_j * u_j + r_j = price for all units
    // and loads; balance: sum P = inflexible + sum u.
    let inv_q_sum: f64 = gen_costs.iter().map(|c| 1.0 / c.quadratic).sum::<f64>()
        + load_benefits.iter().map(|b| 1.0 / b.quadratic).sum::<f64>();
    let r_over_q_sum: f64 = gen_costs.iter().map(|c| c.linear / c.quadratic).sum::<f64>()
        + load_benefits
            .iter()
            .map(|b| b.linear / b.quadratic)
            .sum::<f64>();
    let marginal_price = (inflexible_load + r_over_q_sum) / inv_q_sum;
    let generation: Vec<f64> = gen_costs
        .iter()
        .map(|c| (marginal_price - c.linear) / c.quadratic)
        .collect();
    let flexible_load: Vec<f64> = load_benefits
        .iter()
        .map(|b| (b.linear - marginal_price) / b.quadratic)
        .collect();
    let welfare = load_benefits
        .iter()
        .zip(&flexible_load)
        .map(|(b, &u)| b.value(u))
        .sum::<f64>()
        - gen_costs
            .iter()
            .zip(&generation)
            .map(|(c, &p)| c.value(p))
            .sum::<f64>();
    Ok(SocialWelfareResult {
        generation,
        flexible_load,
        marginal_price,
        welfare,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cases;

    #[test]
    fn single_generator_takes_full_load() {
        let d = optimal_dispatch(&[CostFunction::new(3.0, 1.0, 0.5)], 2.7).unwrap();
        assert!((d.generation[0] - 2.7).abs() < 1e-12);
    }

    #[test]
    fn identical_generators_split_evenly() {
        let c = CostFunction::new(2.0, 4.0, 0.0);
        let d = optimal_dispatch(&[c, c], 3.0).unwrap();
        assert!((d.generation[0] - 1.5).abs() < 1e-14);
        assert!((d.generation[1] - 1.5).abs() < 1e-14);
    }

    #[test]
    fn six_bus_post_step_dispatch_matches_oracle() {
        let costs = cases::case6_costs();
        let closed = optimal_dispatch(&costs, 3.61).unwrap();
        assert!((closed.marginal_price - 12.4264).abs() < 1e-4);
        for (got, want) in closed.generation.iter().zip([0.8027, 1.7701, 1.0372]) {
            assert!((got - want).abs() < 1e-4);
        }
        let oracle = brute_force_dispatch(&costs, 3.61, 1e-5).unwrap();
        for (a, b) in closed.generation.iter().zip(&oracle.generation) {
            assert!(
                (a - b).abs() < 1e-4,
                "closed form {a} vs oracle {b} disagree"
            );
        }
    }

    #[test]
    fn marginal_costs_at_zero_are_linear_terms() {
        let costs = cases::case6_costs();
        let m = marginal_costs(&[0.0, 0.0, 0.0], &costs);
        assert_eq!(m, vec![10.5, 5.7, 8.9]);
    }

    #[test]
    fn marginal_costs_equal_at_optimum() {
        let costs = cases::case6_costs();
        let d = optimal_dispatch(&costs, 3.61).unwrap();
        let m = marginal_costs(&d.generation, &costs);
        for v in &m {
            assert!((v - d.marginal_price).abs() < 1e-10);
        }
    }

    #[test]
    fn marginal_cost_perturbation_is_local() {
        let costs = cases::case6_costs();
        let d = optimal_dispatch(&costs, 3.61).unwrap();
        let mut perturbed = d.generation.clone();
        perturbed[1] += 1e-3;
        let m0 = marginal_costs(&d.generation, &costs);
        let m1 = marginal_costs(&perturbed, &costs);
        assert_eq!(m0[0], m1[0]);
        assert_eq!(m0[2], m1[2]);
        assert!((m1[1] - m0[1] - costs[1].quadratic * 1e-3).abs() < 1e-12);
    }

    #[test]
    fn oracle_single_generator_exact() {
        let d = brute_force_dispatch(&[CostFunction::new(1.0, 0.0, 0.0)], 1.23, 1e-4).unwrap();
        assert_eq!(d.generation, vec![1.23]);
    }

    #[test]
    fn oracle_symmetric_for_identical_costs() {
        let c = CostFunction::new(3.0, 2.0, 1.0);
        let d = brute_force_dispatch(&[c, c, c], 3.0, 1e-5).unwrap();
        for p in &d.generation {
            assert!((p - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn oracle_rejects_large_instances() {
        let c = CostFunction::new(1.0, 0.0, 0.0);
        assert!(matches!(
            brute_force_dispatch(&[c; 5], 1.0, 1e-3),
            Err(DispatchError::TooManyGenerators { .. })
        ));
    }

    #[test]
    fn oracle_rejects_nonpositive_resolution() {
        let c = CostFunction::new(1.0, 0.0, 0.0);
        assert!(matches!(
            brute_force_dispatch(&[c], 1.0, 0.0),
            Err(DispatchError::NonPositiveResolution(_))
        ));
    }

    #[test]
    fn nonconvex_cost_rejected() {
        assert!(matches!(
            optimal_dispatch(&[CostFunction::new(0.0, 1.0, 0.0)], 1.0),
            Err(DispatchError::NonConvexCost { index: 0, .. })
        ));
    }

    #[test]
    fn balance_holds_to_machine_precision() {
        let costs = cases::case6_costs();
        for load in [-2.0, 0.0, 0.7, 3.61, 12.5] {
            let d = optimal_dispatch(&costs, load).unwrap();
            let total: f64 = d.generation.iter().sum();
            assert!((total - load).abs() < 1e-12);
        }
    }

    #[test]
    fn optimum_beats_random_balanced_perturbations() {
        let costs = cases::case6_costs();
        let d = optimal_dispatch(&costs, 3.61).unwrap();
        let cost_of = |g: &[f64]| -> f64 {
            costs.iter().zip(g).map(|(c, &p)| c.value(p)).sum()
        };
        let base = cost_of(&d.generation);
        // Balanced perturbation directions span the constraint tangent space.
        let mut rng_state: u64 = 0x9e3779b97f4a7c15;
        let mut next = move || {
            // xorshift64*; deterministic and dependency-free
            rng_state ^= rng_state >> 12;
            rng_state ^= rng_state << 25;
            rng_state ^= rng_state >> 27;
            (rng_state.wrapping_mul(0x2545F4914F6CDD1D) >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        for _ in 0..1000 {
            let a = next();
            let b = next();
            let dir = [a, b, -(a + b)];
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-6 {
                continue;
            }
            let scale = 0.5 * next().abs() + 1e-4;
            let perturbed: Vec<f64> = d
                .generation
                .iter()
                .zip(dir)
                .map(|(p, d)| p + scale * d / norm)
                .collect();
            assert!(cost_of(&perturbed) > base);
        }
    }

    #[test]
    fn welfare_without_loads_reduces_to_dispatch() {
        let costs = cases::case6_costs();
        let d = optimal_dispatch(&costs, 3.61).unwrap();
        let w = social_welfare_dispatch(&costs, &[], 3.61).unwrap();
        assert_eq!(d.generation, w.generation);
        assert_eq!(d.marginal_price, w.marginal_price);
        assert!(w.flexible_load.is_empty());
    }

    #[test]
    fn welfare_symmetric_pair_meets_at_curve_intersection() {
        // One generator with marginal q*x + r, one load with marginal
        // -q*x + r_b and no inflexible demand: the optimum sits where the
        // two marginal curves cross.
        let q = 2.0;
        let (r, r_b) = (4.0, 10.0);
        let w = social_welfare_dispatch(
            &[CostFunction::new(q, r, 0.0)],
            &[BenefitFunction::new(q, r_b, 0.0)],
            0.0,
        )
        .unwrap();
        assert!((w.marginal_price - (r + r_b) / 2.0).abs() < 1e-12);
        assert!((w.generation[0] - (r_b - r) / (2.0 * q)).abs() < 1e-12);
        assert!((w.generation[0] - w.flexible_load[0]).abs() < 1e-12);
    }

    #[test]
    fn welfare_six_bus_matches_brute_force_oracle() {
        let costs = cases::case6_costs();
        let benefit = BenefitFunction::new(3.0, 14.0, 0.0);
        let w = social_welfare_dispatch(&costs, &[benefit], 3.61).unwrap();
        // Balance.
        let gen_total: f64 = w.generation.iter().sum();
        let load_total: f64 = 3.61 + w.flexible_load.iter().sum::<f64>();
        assert!((gen_total - load_total).abs() < 1e-12);
        // Stationarity: generator marginal costs and load marginal benefits
        // all equal the price.
        for (c, &p) in costs.iter().zip(&w.generation) {
            assert!((c.marginal(p) - w.marginal_price).abs() < 1e-10);
        }
        assert!((benefit.marginal(w.flexible_load[0]) - w.marginal_price).abs() < 1e-10);
        // Independent oracle: pairwise-transfer descent on -welfare over the
        // joint (generation, flexible load) vector.
        let objective = |g: &[f64], u: &[f64]| -> f64 {
            costs.iter().zip(g).map(|(c, &p)| c.value(p)).sum::<f64>()
                - benefit.value(u[0])
        };
        let mut g = vec![3.61 / 3.0; 3];
        let mut u = vec![0.0];
        let mut best = objective(&g, &u);
        let mut step = 1.0;
        while step >= 1e-6 {
            loop {
                let mut improved = false;
                let try_move = |g: &mut Vec<f64>, u: &mut Vec<f64>, best: &mut f64| {
                    for i in 0..3 {
                        for j in 0..3 {
                            if i == j {
                                continue;
                            }
                            g[i] += step;
                            g[j] -= step;
                            let t = objective(g, u);
                            if t < *best {
                                *best = t;
                                return true;
                            }
                            g[i] -= step;
                            g[j] += step;
                        }
                    }
                    // Grow or shrink generation together with the flexible
                    // load to keep the balance.
                    for i in 0..3 {
                        for sign in [1.0, -1.0] {
                            g[i] += sign * step;
                            u[0] += sign * step;
                            let t = objective(g, u);
                            if t < *best {
                                *best = t;
                                return true;
                            }
                            g[i] -= sign * step;
                            u[0] -= sign * step;
                        }
                    }
                    false
                };
                while try_move(&mut g, &mut u, &mut best) {
                    improved = true;
                }
                if !improved {
                    break;
                }
            }
            step *= 0.5;
        }
        for (a, b) in w.generation.iter().zip(&g) {
            assert!((a - b).abs() < 1e-3, "generation {a} vs oracle {b}");
        }
        assert!((w.flexible_load[0] - u[0]).abs() < 1e-3);
    }

    #[test]
    fn empty_generator_set_rejected() {
        assert!(matches!(
            optimal_dispatch(&[], 1.0),
            Err(DispatchError::EmptyGeneratorSet)
        ));
    }
}
