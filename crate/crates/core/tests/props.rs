//! Property-based invariants: incidence structure of random connected
//! graphs, dispatch optimality conditions, and the droop-certificate
//! equivalence between the closed-form interval and the eigenvalue verdict.

use nalgebra::DMatrix;
use olfc_core::dispatch::{marginal_costs, optimal_dispatch, CostFunction};
use olfc_core::governor::droop_certificate;
use olfc_core::grid::NetworkTopology;
use proptest::prelude::*;

/// Random connected topology: a random spanning tree plus extra edges.
fn connected_topology() -> impl Strategy<Value = NetworkTopology> {
    (2usize..9, any::<u64>()).prop_map(|(n, seed)| {
        let mut state = seed | 1;
        let mut next = move |bound: usize| {
            state ^= state >> 12;
            state ^= state << 25;
            state ^= state >> 27;
            (state.wrapping_mul(0x2545F4914F6CDD1D) >> 33) as usize % bound
        };
        let mut lines = Vec::new();
        for v in 1..n {
            lines.push((next(v), v));
        }
        for _ in 0..next(n) {
            let a = next(n);
            let b = next(n);
            if a != b && !lines.contains(&(a, b)) && !lines.contains(&(b, a)) {
                lines.push((a, b));
            }
        }
        let gen_count = 1 + next(n.min(3));
        NetworkTopology::new(gen_count.min(n - 1).max(1), n - gen_count.min(n - 1).max(1), lines)
            .expect("construction keeps the graph connected")
    })
}

fn echelon_rank(m: &DMatrix<f64>) -> usize {
    let mut a = m.clone();
    let (rows, cols) = a.shape();
    let mut rank = 0;
    for col in 0..cols {
        let pivot = (rank..rows)
            .max_by(|&i, &j| a[(i, col)].abs().partial_cmp(&a[(j, col)].abs()).unwrap());
        let Some(p) = pivot else { break };
        if a[(p, col)].abs() < 1e-9 {
            continue;
        }
        a.swap_rows(rank, p);
        for i in 0..rows {
            if i != rank {
                let f = a[(i, col)] / a[(rank, col)];
                for j in 0..cols {
                    a[(i, j)] -= f * a[(rank, j)];
                }
            }
        }
        rank += 1;
        if rank == rows {
            break;
        }
    }
    rank
}

proptest! {
    #[test]
    fn incidence_columns_sum_to_zero_and_rank_is_n_minus_one(topo in connected_topology()) {
        let b = topo.incidence();
        for k in 0..topo.line_count() {
            prop_assert_eq!(b.column(k).sum(), 0.0);
        }
        prop_assert_eq!(echelon_rank(&b), topo.bus_count() - 1);
    }

    #[test]
    fn dispatch_balances_and_equalizes_marginals(
        qs in prop::collection::vec(0.1f64..10.0, 1..5),
        rs in prop::collection::vec(-5.0f64..15.0, 1..5),
        load in -10.0f64..10.0,
    ) {
        let n = qs.len().min(rs.len());
        let costs: Vec<CostFunction> = (0..n)
            .map(|i| CostFunction::new(qs[i], rs[i], 0.0))
            .collect();
        let d = optimal_dispatch(&costs, load).unwrap();
        let total: f64 = d.generation.iter().sum();
        prop_assert!((total - load).abs() < 1e-12 * load.abs().max(1.0));
        let m = marginal_costs(&d.generation, &costs);
        for v in &m {
            prop_assert!((v - d.marginal_price).abs() < 1e-10);
        }
    }

    #[test]
    fn droop_interval_matches_eigenvalue_verdict(
        steam_time in 0.2f64..10.0,
        turbine_time in 0.2f64..10.0,
        gen_damping in 0.2f64..10.0,
        position in -2.0f64..2.0,
    ) {
        let ratio = steam_time / turbine_time;
        prop_assume!(4.0 * ratio > 1.0 && gen_damping * ratio > 1.0);
        let probe = droop_certificate(steam_time, turbine_time, gen_damping, 0.0);
        let (lo, hi) = probe.interval.unwrap();
        let droop = 0.5 * (lo + hi) + position * 0.5 * (hi - lo);
        prop_assume!((droop - lo).abs() > 1e-9 && (droop - hi).abs() > 1e-9);
        let cert = droop_certificate(steam_time, turbine_time, gen_damping, droop);
        prop_assert_eq!(cert.negative_definite, cert.inside_interval);
    }
}
