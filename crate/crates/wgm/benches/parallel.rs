use std::f64::consts::TAU;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use wgm::billiards::{flow_2d_batch, ReducedHamiltonian};
use wgm::geometry::{build_curve, triangle_profile};
use wgm::modes::{build_mode1d, build_mode2d, ModeOptions};
use wgm::semiclassics::{assemble_spectrum, ModeIndices, RegimeChoice, ScaleParams, Torus};
use wgm::verify::apply_h_2d;
use wgm::Exec;

fn bench(c: &mut Criterion) {
    let curve = Arc::new(build_curve(triangle_profile(0.4, TAU).unwrap(), 3.0).unwrap());
    let scale = ScaleParams::from_h(0.015, 1500).unwrap();
    let torus = Torus::new(curve, &scale);
    let idx = ModeIndices::new(1500, 2, 5).unwrap();
    let spec = assemble_spectrum(&torus, &scale, &idx, RegimeChoice::Auto).unwrap();
    let psi = build_mode1d(&torus, &spec, &ModeOptions::default()).unwrap();
    let ham = ReducedHamiltonian::from_spectral(&torus, &spec);
    let states: Vec<_> = (0..32).map(|i| ham.state(4.0, 0.0, 0.0, 1e-4 * (1 + i) as f64)).collect();

    let mut g = c.benchmark_group("exec");
    g.sample_size(10);
    for exec in [Exec::Sequential, Exec::Parallel] {
        let opts = ModeOptions { exec, ..Default::default() };
        g.bench_with_input(BenchmarkId::new("build_mode2d", format!("{exec:?}")), &opts, |b, o| {
            b.iter(|| build_mode2d(&torus, &spec, &psi, o).unwrap())
        });
        let w = build_mode2d(&torus, &spec, &psi, &opts).unwrap();
        g.bench_with_input(BenchmarkId::new("apply_h_2d", format!("{exec:?}")), &exec, |b, &e| {
            b.iter(|| apply_h_2d(&torus, &w, e))
        });
        g.bench_with_input(BenchmarkId::new("flow_2d_batch", format!("{exec:?}")), &exec, |b, &e| {
            b.iter(|| flow_2d_batch(&ham, &states, 2.0, 1e-3, 100, e))
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
