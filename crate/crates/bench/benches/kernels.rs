use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mesoed::numerics::exact_sum;
use mesoed::{
    dyson_absorb, gaussian_compose, retarded_single_mode, simulate_network, AffineGaussianSpec,
    CausalKernel, DeviceId, DeviceRef, GaussianDevice, ModeSpec, NetworkSpec, PoissonDetector,
    Strictness, TimeGrid, Trajectory,
};

fn gaussian(id: u64, grid: TimeGrid) -> Arc<GaussianDevice> {
    let chi = CausalKernel::from_fn(grid, Strictness::SameTimeAllowed, |n, k, m, kp| {
        if k == 0 && kp == 0 {
            0.5 * (-0.2 * (n - m) as f64).exp()
        } else {
            0.0
        }
    })
    .unwrap();
    let mu = Trajectory::from_fn(grid, |_, k| if k == 0 { 0.3 } else { 0.0 });
    let d = grid.dim();
    let modes = grid.n_modes();
    let cov = nalgebra::DMatrix::from_fn(
        d,
        d,
        |i, j| if i == j && i % modes == 0 { 1.0 } else { 0.0 },
    );
    Arc::new(GaussianDevice::new(DeviceId(id), mu, chi, cov).unwrap())
}

fn network(c: &mut Criterion) {
    let mut group = c.benchmark_group("simulate_network");
    group.sample_size(10);
    for steps in [32, 64, 128] {
        let grid = TimeGrid::new(0.0, 0.05, steps, 2).unwrap();
        let m = ModeSpec::with_omega(3.0).unwrap();
        let g = mesoed::retarded_diagonal(&grid, &[m, m]).unwrap();
        let devices: Vec<DeviceRef> = vec![
            gaussian(1, grid),
            Arc::new(PoissonDetector::new(DeviceId(2), grid, 0, 1, 0.8, 2.0, 1.0).unwrap()),
        ];
        let spec = NetworkSpec::new(devices, g, Trajectory::zeros(grid), 256, 1).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(steps), &spec, |b, spec| {
            b.iter(|| simulate_network(black_box(spec)).unwrap())
        });
    }
    group.finish();
}

fn closed_forms(c: &mut Criterion) {
    let mut group = c.benchmark_group("closed_form");
    for steps in [32, 128] {
        let grid = TimeGrid::uniform(0.05, steps).unwrap();
        let g = retarded_single_mode(&grid, ModeSpec::with_omega(3.0).unwrap()).unwrap();
        let specs = [
            AffineGaussianSpec::from_device(&gaussian(1, grid)),
            AffineGaussianSpec::from_device(&gaussian(2, grid)),
        ];
        group.bench_with_input(
            BenchmarkId::new("gaussian_compose", steps),
            &specs,
            |b, specs| b.iter(|| gaussian_compose(black_box(specs), &g).unwrap()),
        );
        let pi = CausalKernel::from_fn(grid, Strictness::Strict, |n, _, m, _| {
            -0.3 * (-0.1 * (n - m) as f64).exp()
        })
        .unwrap();
        group.bench_with_input(BenchmarkId::new("dyson_absorb", steps), &pi, |b, pi| {
            b.iter(|| dyson_absorb(&g, black_box(pi)).unwrap())
        });
    }
    group.finish();
}

fn summation(c: &mut Criterion) {
    let terms: Vec<f64> = (0..1024)
        .map(|i| ((i * 7919) % 1000) as f64 * 1e-3 - 0.5)
        .collect();
    c.bench_function("exact_sum_1024", |b| {
        b.iter(|| exact_sum(black_box(&terms).iter().copied()))
    });
}

criterion_group!(benches, network, closed_forms, summation);
criterion_main!(benches);
