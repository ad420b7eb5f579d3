use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use ddr_core::coordinator::{others_aggregate, shape_day_ahead, ScheduleState};
use ddr_core::report::run_cases;
use ddr_core::scenario::{build_scenario, Scenario, ScenarioConfig};
use ddr_core::subproblem::{build_subproblem, solve, SubproblemRequest};
use ddr_core::LoadProfile;

fn scenario(n: usize) -> Scenario {
    let mut cfg = ScenarioConfig::default();
    cfg.fleet.n_users = n;
    build_scenario(&cfg).expect("reference scenario")
}

fn user_lp(c: &mut Criterion) {
    let s = scenario(50);
    let schedules = vec![LoadProfile::zeros(); s.participants.len()];
    let state = ScheduleState::new(&s.participants, schedules, s.market.da_profile, None);
    // The longest window gives the largest program.
    let n = (0..s.participants.len())
        .max_by_key(|&i| s.participants[i].window.len())
        .unwrap();
    let p = &s.participants[n];
    let others = others_aggregate(&state, n);
    let sp = build_subproblem(&SubproblemRequest {
        user: &p.pev,
        window: p.window,
        household: &p.household,
        others: &others,
        da_profile: &s.market.da_profile,
        lambda: 1.0,
        t0: 0,
        history: &LoadProfile::zeros(),
        cap: None,
        altering_scale: 0.0,
    })
    .unwrap();
    c.bench_function(&format!("solve one user ({} slots)", p.window.len()), |b| {
        b.iter(|| solve(black_box(&sp)).unwrap())
    });
}

fn day_ahead(c: &mut Criterion) {
    let s = scenario(1000);
    let mut group = c.benchmark_group("fleet of 1000");
    group.sample_size(10);
    group.bench_function("day-ahead shaping", |b| {
        b.iter(|| {
            shape_day_ahead(
                &s.participants,
                &s.market.da_profile,
                None,
                &s.config.coordinator,
                s.config.horizon,
            )
            .unwrap()
        })
    });
    group.bench_function("four cases", |b| {
        b.iter(|| run_cases(&s.participants, &s.market, &s.case_config(), s.config.horizon).unwrap())
    });
    group.finish();
}

criterion_group!(benches, user_lp, day_ahead);
criterion_main!(benches);
