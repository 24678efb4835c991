use barrierfem::eigen::{lowest_eigenpairs, EigenOptions};
use barrierfem::expm::ExpmWorkspace;
use barrierfem::faer::Mat;
use barrierfem::forward::{kappa_gradient, simulate_protocol, system_gradient, trace_protocol};
use barrierfem::mesh::build_ambient_grid;
use barrierfem::{c64, CouplingStructure, DofMap, OperatorSet, PhysicalParams};
use barrierfem_bench::{model, problem, protocol};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn assembly(c: &mut Criterion) {
    let mesh = build_ambient_grid(10, 13.6).unwrap();
    c.bench_function("assemble_n10", |b| {
        b.iter(|| {
            let ops = OperatorSet::assemble(&mesh, PhysicalParams::default()).unwrap();
            let cs = CouplingStructure::build(&mesh, &DofMap::new(&mesh)).unwrap();
            (ops, cs)
        })
    });
}

fn eigensolve(c: &mut Criterion) {
    let mut group = c.benchmark_group("eigensolve");
    group.sample_size(10);
    for n in [4, 6] {
        let (p, kappa) = problem(n);
        let opts = EigenOptions { nev: 60, ..Default::default() };
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| lowest_eigenpairs(&p.ops, &p.coupling, &kappa, &opts).unwrap())
        });
    }
    group.finish();
}

fn matrix_exponential(c: &mut Criterion) {
    let (p, kappa) = problem(4);
    let m = model(&p, &kappa, 60);
    let s = m.system_matrix();
    let a = Mat::<c64>::from_fn(s.nrows(), s.ncols(), |i, j| c64::new(-10.0 * s[(i, j)], if i == j { 0.3 } else { 0.0 }));
    let e = Mat::<c64>::from_fn(s.nrows(), s.ncols(), |i, j| c64::new(((i * 31 + j * 17) % 13) as f64 / 13.0, 0.0));
    c.bench_function("expm_60", |b| b.iter(|| ExpmWorkspace::new(a.as_ref()).unwrap()));
    let ws = ExpmWorkspace::new(a.as_ref()).unwrap();
    c.bench_function("frechet_60", |b| b.iter(|| ws.frechet(e.as_ref())));
}

fn forward_and_gradient(c: &mut Criterion) {
    let (p, kappa) = problem(6);
    let m = model(&p, &kappa, 60);
    let protocol = protocol();
    let all: Vec<usize> = (0..protocol.len()).collect();
    let mut group = c.benchmark_group("protocol");
    group.sample_size(20);
    group.bench_function("forward", |b| b.iter(|| simulate_protocol(&m, &protocol, 1.0, 1).unwrap()));
    group.bench_function("forward_gradient", |b| {
        b.iter(|| {
            let trace = trace_protocol(&m, &protocol, &all, 1.0, 1).unwrap();
            let grads = trace.signals();
            let sbar = system_gradient(&m, &trace, &grads, 1).unwrap();
            kappa_gradient(&m, &p.coupling, &sbar)
        })
    });
    group.finish();
}

criterion_group!(benches, assembly, eigensolve, matrix_exponential, forward_and_gradient);
criterion_main!(benches);
