//! Shared fixtures for the benchmarks.

use barrierfem::eigen::EigenOptions;
use barrierfem::encoding::{axis_directions, Protocol};
use barrierfem::forward::compute_reduced_basis;
use barrierfem::{build_ambient_grid, PhysicalParams, Problem, ReducedModel};

/// Grid of `n` cells per axis with a deterministic, spatially varying permeability.
pub fn problem(n: usize) -> (Problem, Vec<f64>) {
    let mesh = build_ambient_grid(n, 13.6).expect("valid grid");
    let problem = Problem::new(mesh, PhysicalParams::default()).expect("assembly");
    let kappa = (0..problem.num_faces())
        .map(|f| 10f64.powf(-5.0 + 4.0 * ((f * 7919) % 1000) as f64 / 1000.0))
        .collect();
    (problem, kappa)
}

pub fn model(problem: &Problem, kappa: &[f64], nev: usize) -> ReducedModel {
    let opts = EigenOptions { nev, ..Default::default() };
    compute_reduced_basis(&problem.ops, &problem.coupling, kappa, &opts).expect("eigensolve")
}

pub fn protocol() -> Protocol {
    Protocol::paper(&axis_directions()).expect("paper protocol")
}
