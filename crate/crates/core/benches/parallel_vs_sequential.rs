use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use mowst::confidence::{ConfidenceSpec, Dispersion, GFunction};
use mowst::graph::{generate_specialization_graph, khop_sizes, SpecializationParams};
use mowst::mixture::monte_carlo_loss;
use mowst::tensor::Tensor;
use mowst::theory::{group_min, GroupProblem, SimplexGrid};
use mowst::Exec;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn grid_search(c: &mut Criterion) {
    let grid = SimplexGrid::new(3, 300).unwrap();
    let problem = GroupProblem::new(
        vec![0.6, 0.3, 0.1],
        1.2,
        ConfidenceSpec::new(Dispersion::NegEntropy, GFunction::CappedLinear { slope: 2.0 }),
    )
    .unwrap();
    let mut group = c.benchmark_group("group_min_ternary_300");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| group_min(black_box(&problem), &grid, exec).unwrap())
        });
    }
    group.finish();
}

fn sampled_loss(c: &mut Criterion) {
    let rows = 500;
    let p = Tensor::filled(rows, 4, 0.25);
    let p2 = Tensor::from_rows(&vec![vec![0.7, 0.1, 0.1, 0.1]; rows]).unwrap();
    let conf: Vec<f64> = (0..rows).map(|v| v as f64 / rows as f64).collect();
    let labels = vec![0; rows];
    let mut group = c.benchmark_group("monte_carlo_loss_2000");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| monte_carlo_loss(&p, &p2, &conf, &labels, 2000, 1, exec).unwrap())
        });
    }
    group.finish();
}

fn hop_sizes(c: &mut Criterion) {
    let g = generate_specialization_graph(SpecializationParams {
        n_per_group: 2000,
        ..Default::default()
    })
    .unwrap();
    let mut group = c.benchmark_group("khop_sizes_3");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| khop_sizes(black_box(&g), 3, exec))
        });
    }
    group.finish();
}

criterion_group!(benches, grid_search, sampled_loss, hop_sizes);
criterion_main!(benches);
