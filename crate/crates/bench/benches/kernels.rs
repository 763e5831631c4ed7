use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use stochavg_core::second_order::LevelGrid;
use stochavg_core::{
    assemble_diffusion, build_1dof_case, build_r4_example, integrate, solve_poisson, Executor,
    GeneratorSpec, NoisePath, PhasePoint, Scheme, SeedDescriptor, SimulationParams,
    TorusFunction, TorusGrid,
};

fn sde_steps(c: &mut Criterion) {
    let (model, [k1, ..]) = build_r4_example();
    let y0 = PhasePoint::new(vec![2.0, 2.0, 0.0, 0.0]).unwrap();
    let noise = NoisePath::new(SeedDescriptor::new(7, 0), 2, 1e-3, 1000).unwrap();
    let mut g = c.benchmark_group("r4_1000_steps");
    for scheme in [Scheme::Midpoint, Scheme::Heun] {
        let params = SimulationParams::new(0.1, 1.0).scheme(scheme).stride(1000);
        g.bench_function(format!("{scheme:?}").to_lowercase(), |b| {
            b.iter(|| integrate(&model, &k1, &params, black_box(&y0), &noise).unwrap())
        });
    }
    g.finish();
}

fn poisson(c: &mut Criterion) {
    let gen = GeneratorSpec::new(vec![1.0, 1.0, 0.0, 1.0], vec![0.0, 0.0]).unwrap();
    let grid = TorusGrid::new(2, 64).unwrap();
    let f = TorusFunction::from_fn(grid, Vec::new(), |t| (t[0] - 2.0 * t[1]).sin() + t[1].cos());
    c.bench_function("poisson_t2_64", |b| b.iter(|| solve_poisson(black_box(&f), &gen).unwrap()));
}

fn diffusion(c: &mut Criterion) {
    let (model, k) = build_1dof_case();
    let y0 = PhasePoint::new(vec![8.0, 0.0]).unwrap();
    let model = model.centered_at(&y0).unwrap();
    let levels = LevelGrid::uniform(&[24.0], &[40.0], 17).unwrap();
    let ex = Executor::default();
    c.bench_function("diffusion_1dof_17_nodes", |b| {
        b.iter(|| assemble_diffusion(&model, &k, &levels, TorusGrid::new(1, 64).unwrap(), &ex).unwrap())
    });
}

criterion_group!(benches, sde_steps, poisson, diffusion);
criterion_main!(benches);
