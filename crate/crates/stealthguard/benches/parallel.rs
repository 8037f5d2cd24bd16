use std::hint::black_box;
use std::path::Path;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use stealthguard::attack::synthesize_worst_attack;
use stealthguard::exec::Execution;
use stealthguard::io::parse_model;
use stealthguard::model::solve_steady_state_filter;
use stealthguard::policy::{design_periodic_policy, DesignOptions, EvalOptions};
use stealthguard::reach::{error_curve, RadiusSchedule, StealthBudget};
use stealthguard::sim::{AttackMode, SimConfig, Simulator};

const EXECUTORS: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn fixture() -> stealthguard::io::ModelBundle {
    parse_model(&Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/vehicle_axis.json")).unwrap()
}

fn monte_carlo(c: &mut Criterion) {
    let b = fixture();
    let filter = solve_steady_state_filter(&b.model).unwrap();
    let pattern = b.policy.pattern(&b.scenario.compromised, 2, 60);
    let budget = StealthBudget::new(b.scenario.epsilon, b.detector.threshold_h, 2, RadiusSchedule::FirstBlock);
    let attack = synthesize_worst_attack(&filter, &pattern, &budget, 45).unwrap();
    let sim = Simulator::new(&b.model, &filter, &b.detector).unwrap();
    let mut group = c.benchmark_group("monte_carlo_20k_runs");
    group.sample_size(10);
    for (name, exec) in EXECUTORS {
        let cfg = SimConfig { runs: 20_000, steps: 60, seed: 1, keep_traces: 0, exec };
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| sim.simulate(black_box(Some(&attack)), &AttackMode::PolicyAware, &cfg).unwrap())
        });
    }
    group.finish();
}

fn period_sweep(c: &mut Criterion) {
    let b = fixture();
    let filter = solve_steady_state_filter(&b.model).unwrap();
    let mut group = c.benchmark_group("design_period_sweep");
    group.sample_size(10);
    for (name, exec) in EXECUTORS {
        let opts = DesignOptions { eval: EvalOptions { exec, ..EvalOptions::default() }, ..DesignOptions::default() };
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| {
                design_periodic_policy(&b.model, &filter, &b.detector, &b.scenario, black_box(b.safe_threshold), &opts)
                    .unwrap()
            })
        });
    }
    group.finish();
}

fn region_sweep(c: &mut Criterion) {
    let b = fixture();
    let filter = solve_steady_state_filter(&b.model).unwrap();
    let pattern = b.policy.pattern(&b.scenario.compromised, 2, 3000);
    let budget = StealthBudget::new(b.scenario.epsilon, b.detector.threshold_h, 2, RadiusSchedule::FirstBlock);
    let mut group = c.benchmark_group("error_curve_3000_steps");
    group.sample_size(10);
    for (name, exec) in EXECUTORS {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| error_curve(&filter, &pattern, &budget, black_box(3000), exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, monte_carlo, period_sweep, region_sweep);
criterion_main!(benches);
