use criterion::{criterion_group, criterion_main, Criterion};
use nalgebra::DVector;

use olfc_core::dispatch::{brute_force_dispatch, optimal_dispatch};
use olfc_core::sim::{initialize, simulate, IntegratorConfig, StackedSystem};
use olfc_core::cases;

fn bench_stacked_rhs(c: &mut Criterion) {
    let scenario = cases::case6_nominal();
    let system = StackedSystem::new(&scenario).unwrap();
    let state = initialize(&scenario).unwrap();
    let load = DVector::from_vec(vec![1.15, 1.25, 1.21]);
    c.bench_function("stacked_rhs_6bus", |b| {
        b.iter(|| system.rhs(std::hint::black_box(0.0), &state.values, &load))
    });
}

fn bench_simulate_window(c: &mut Criterion) {
    let mut scenario = cases::case6_nominal();
    scenario.integrator = IntegratorConfig::new(1e-3, 2.0);
    c.bench_function("simulate_6bus_2s", |b| {
        b.iter(|| simulate(std::hint::black_box(&scenario)).unwrap())
    });
}

fn bench_steady_state_solve(c: &mut Criterion) {
    let model = cases::case6_model();
    let costs = cases::case6_costs();
    let load = DVector::from_vec(vec![1.15, 1.25, 1.21]);
    let mech = DVector::from_vec(optimal_dispatch(&costs, load.sum()).unwrap().generation);
    c.bench_function("steady_state_6bus", |b| {
        b.iter(|| {
            model
                .solve_steady_state(std::hint::black_box(&mech), &load)
                .unwrap()
        })
    });
}

fn bench_dispatch(c: &mut Criterion) {
    let costs = cases::case6_costs();
    c.bench_function("dispatch_closed_form", |b| {
        b.iter(|| optimal_dispatch(std::hint::black_box(&costs), 3.61).unwrap())
    });
    c.bench_function("dispatch_oracle_1e-4", |b| {
        b.iter(|| brute_force_dispatch(std::hint::black_box(&costs), 3.61, 1e-4).unwrap())
    });
}

criterion_group!(
    benches,
    bench_stacked_rhs,
    bench_simulate_window,
    bench_steady_state_solve,
    bench_dispatch
);
criterion_main!(benches);
