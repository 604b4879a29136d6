use criterion::{black_box, criterion_group, criterion_main, Criterion};
use phs_core::hjb::sl_step_constrained;
use phs_core::levelset::{sl_step_augmented, terminal_w};
use phs_core::viability::{solve_theta, theta_grid};
use phs_core::{
    simulate_policy, solve_constrained_hjb, ControlGrid, HjbSetup, HydroSystem, LevelSetSetup,
    PriceModel, SimConfig,
};

fn hjb_step(c: &mut Criterion) {
    let model = PriceModel::gbm(0.05, 0.1);
    let system = HydroSystem::reference_single(3.0);
    let setup = HjbSetup::default_single(&system).unwrap();
    let next = vec![1.0; setup.grid.len()];
    c.bench_function("hjb_step_101x101", |b| {
        b.iter(|| {
            sl_step_constrained(
                black_box(&next),
                &setup.grid,
                100,
                &model,
                &system,
                &setup.controls,
            )
            .unwrap()
        })
    });
}

fn levelset_step(c: &mut Criterion) {
    let model = PriceModel::gbm(0.05, 0.1);
    let system = HydroSystem::reference_single(3.0);
    let setup = LevelSetSetup::default_single(&model, &system).unwrap();
    let next = terminal_w(&setup.grid, &model);
    let mut group = c.benchmark_group("levelset");
    group.sample_size(10);
    group.bench_function("augmented_step_101x151x81", |b| {
        b.iter(|| {
            sl_step_augmented(
                black_box(&next),
                &setup.grid,
                setup.grid.base.n_steps - 1,
                &model,
                &system,
                &setup.controls,
            )
            .unwrap()
        })
    });
    group.finish();
}

fn viability(c: &mut Criterion) {
    let system = HydroSystem::reference_single(2.0);
    let grid = theta_grid(&system, 100, 200).unwrap();
    let controls = ControlGrid::uniform(&system, 21).unwrap();
    c.bench_function("theta_100_cells_200_steps", |b| {
        b.iter(|| solve_theta(&system, black_box(&grid), &controls).unwrap())
    });
}

fn replay(c: &mut Criterion) {
    let model = PriceModel::gbm(0.05, 0.1);
    let system = HydroSystem::reference_single(3.0);
    let setup = HjbSetup::default_single(&system).unwrap();
    let (_, policy) = solve_constrained_hjb(&model, &system, &setup).unwrap();
    let config = SimConfig {
        n_paths: 200,
        ..SimConfig::default()
    };
    let mut group = c.benchmark_group("sim");
    group.sample_size(10);
    group.bench_function("replay_200_paths", |b| {
        b.iter(|| {
            simulate_policy(
                &model,
                &system,
                &policy,
                black_box(&[0.0, 5.0, 0.5]),
                &config,
            )
            .unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, hjb_step, levelset_step, viability, replay);
criterion_main!(benches);
