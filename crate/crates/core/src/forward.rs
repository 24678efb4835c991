//! Reduced-order Bloch-Torrey propagation and its adjoint.
//!
//! The magnetization is expanded in the lowest generalized eigenvectors `U`
//! of `(K + B(kappa), M)`. Every PGSE waveform has three constant-gradient
//! stretches, so the echo signal is `c^T F3 F2 F1 y0` with
//! `F_i = exp(-h_i (S + i gamma g_i . J))` and `S = U^T K U + U^T B U + I / T2`.
//! Between full eigensolves only `U^T B(kappa) U` is re-projected.

use faer::linalg::matmul::matmul;
use faer::{c64, Accum, Mat, MatRef, Par};
use rayon::prelude::*;

use crate::eigen::{lowest_eigenpairs, EigenOptions};
use crate::encoding::{Acquisition, Protocol};
use crate::error::{Error, Result};
use crate::expm::ExpmWorkspace;
use crate::fem::{CouplingStructure, OperatorSet};

#[derive(Debug, Clone)]
pub struct ReducedModel {
    basis: Mat<f64>,
    eigenvalues: Vec<f64>,
    reduced_k: Mat<f64>,
    reduced_b: Mat<f64>,
    reduced_j: [Mat<f64>; 3],
    /// `U^T M 1`
    readout: Vec<f64>,
    relaxation_rate: f64,
    gamma: f64,
    /// Coupling-only refreshes since the last eigensolve.
    staleness: usize,
}

fn project(u: MatRef<'_, f64>, au: MatRef<'_, f64>) -> Mat<f64> {
    let n = u.ncols();
    let mut p = Mat::<f64>::zeros(n, n);
    matmul(p.as_mut(), Accum::Replace, u.transpose(), au, 1.0, Par::Seq);
    Mat::from_fn(n, n, |i, j| 0.5 * (p[(i, j)] + p[(j, i)]))
}

impl ReducedModel {
    pub fn basis(&self) -> &Mat<f64> {
        &self.basis
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn reduced_stiffness(&self) -> &Mat<f64> {
        &self.reduced_k
    }

    pub fn reduced_coupling(&self) -> &Mat<f64> {
        &self.reduced_b
    }

    pub fn reduced_dephasing(&self) -> &[Mat<f64>; 3] {
        &self.reduced_j
    }

    pub fn readout(&self) -> &[f64] {
        &self.readout
    }

    pub fn staleness(&self) -> usize {
        self.staleness
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    /// Re-projects the coupling for new permeabilities while keeping `U`.
    pub fn refresh_coupling(&mut self, coupling: &CouplingStructure, kappa: &[f64]) {
        let bu = coupling.apply_mat(kappa, self.basis.as_ref());
        self.reduced_b = project(self.basis.as_ref(), bu.as_ref());
        self.staleness += 1;
    }

    /// `U^T K U + U^T B U + I / T2`
    pub fn system_matrix(&self) -> Mat<f64> {
        let n = self.len();
        Mat::from_fn(n, n, |i, j| {
            self.reduced_k[(i, j)]
                + self.reduced_b[(i, j)]
                + if i == j { self.relaxation_rate } else { 0.0 }
        })
    }
}

pub fn compute_reduced_basis(
    ops: &OperatorSet,
    coupling: &CouplingStructure,
    kappa: &[f64],
    eig: &EigenOptions,
) -> Result<ReducedModel> {
    let pairs = lowest_eigenpairs(ops, coupling, kappa, eig)?;
    let u = pairs.vectors;
    let ku = ops.stiffness.apply_mat(u.as_ref());
    let bu = coupling.apply_mat(kappa, u.as_ref());
    let reduced_j = [0, 1, 2].map(|k| {
        let ju = ops.dephasing[k].apply_mat(u.as_ref());
        project(u.as_ref(), ju.as_ref())
    });
    let ones = vec![1.0; ops.dim()];
    let m1 = ops.mass.apply(&ones);
    let readout = (0..u.ncols())
        .map(|j| (0..u.nrows()).map(|i| u[(i, j)] * m1[i]).sum())
        .collect();
    Ok(ReducedModel {
        reduced_k: project(u.as_ref(), ku.as_ref()),
        reduced_b: project(u.as_ref(), bu.as_ref()),
        reduced_j,
        readout,
        relaxation_rate: ops.relaxation_rate(),
        gamma: ops.params.gamma,
        eigenvalues: pairs.values,
        basis: u,
        staleness: 0,
    })
}

/// Whether iteration `t` triggers a full eigensolve under refresh interval `n`.
pub fn is_full_refresh(iteration: usize, interval: usize) -> bool {
    interval == 0 || iteration % interval == 0
}

/// Full eigensolve when due (or when no model exists), otherwise a coupling-only refresh.
pub fn maybe_refresh_basis(
    model: Option<ReducedModel>,
    iteration: usize,
    interval: usize,
    ops: &OperatorSet,
    coupling: &CouplingStructure,
    kappa: &[f64],
    eig: &EigenOptions,
) -> Result<ReducedModel> {
    match model {
        Some(mut m) if !is_full_refresh(iteration, interval) => {
            m.refresh_coupling(coupling, kappa);
            Ok(m)
        }
        _ => compute_reduced_basis(ops, coupling, kappa, eig),
    }
}

fn complex_exponent(s: &Mat<f64>, model: &ReducedModel, h: f64, g: [f64; 3]) -> Mat<c64> {
    let n = s.nrows();
    let gj = model.reduced_j.each_ref();
    Mat::from_fn(n, n, |i, j| {
        let phase = model.gamma * (g[0] * gj[0][(i, j)] + g[1] * gj[1][(i, j)] + g[2] * gj[2][(i, j)]);
        c64::new(-h * s[(i, j)], -h * phase)
    })
}

fn real_exponent(s: &Mat<f64>, h: f64) -> Mat<c64> {
    Mat::from_fn(s.nrows(), s.ncols(), |i, j| c64::new(-h * s[(i, j)], 0.0))
}

fn mat_vec(a: &Mat<c64>, x: &[c64]) -> Vec<c64> {
    (0..a.nrows())
        .map(|i| (0..a.ncols()).map(|j| a[(i, j)] * x[j]).sum())
        .collect()
}

fn mat_h_vec(a: &Mat<c64>, x: &[c64]) -> Vec<c64> {
    (0..a.ncols())
        .map(|j| (0..a.nrows()).map(|i| a[(i, j)].conj() * x[i]).sum())
        .collect()
}

fn outer_h(x: &[c64], y: &[c64]) -> Mat<c64> {
    Mat::from_fn(x.len(), y.len(), |i, j| x[i] * y[j].conj())
}

/// Echo signal of a general piecewise-constant waveform `(duration, gradient)`.
pub fn propagate_intervals(model: &ReducedModel, intervals: &[(f64, [f64; 3])], rho: f64) -> Result<c64> {
    let s = model.system_matrix();
    let mut y: Vec<c64> = model.readout.iter().map(|&c| c64::new(rho * c, 0.0)).collect();
    for &(h, g) in intervals {
        if !(h >= 0.0) {
            return Err(Error::InvalidInput(format!("interval with negative duration {h}")));
        }
        let ws = ExpmWorkspace::new(complex_exponent(&s, model, h, g).as_ref())?;
        y = mat_vec(ws.exp(), &y);
    }
    Ok(model.readout.iter().zip(&y).map(|(&c, &v)| v * c).sum())
}

pub fn propagate(model: &ReducedModel, acq: &Acquisition, rho: f64) -> Result<c64> {
    let intervals: Vec<(f64, [f64; 3])> = acq
        .waveform_intervals()
        .iter()
        .map(|i| (i.duration(), i.gradient))
        .collect();
    propagate_intervals(model, &intervals, rho)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignalSet {
    pub signals: Vec<c64>,
    /// One b=0 reference per diffusion-time group.
    pub references: Vec<c64>,
}

impl SignalSet {
    /// Builds the set from one signal per acquisition, taking references from the b=0 rows.
    pub fn from_signals(protocol: &Protocol, signals: Vec<c64>) -> Result<Self> {
        if signals.len() != protocol.len() {
            return Err(Error::InvalidInput(format!(
                "{} signals for a protocol of {} acquisitions",
                signals.len(),
                protocol.len()
            )));
        }
        let references = protocol.groups().iter().map(|g| signals[g.reference]).collect();
        Ok(SignalSet { signals, references })
    }

    /// `S_a / S0` of acquisition `a`.
    pub fn normalized(&self, protocol: &Protocol, a: usize) -> c64 {
        self.signals[a] / self.references[protocol.group_of(a)]
    }
}

/// Forward pass over a subset of acquisitions that keeps what the adjoint needs.
pub struct ProtocolTrace {
    system: Mat<f64>,
    /// Per diffusion-time group: `exp(-(Delta - delta) S)`, computed on demand.
    gaps: Vec<Option<(f64, ExpmWorkspace)>>,
    acquisitions: Vec<AcqTrace>,
}

struct AcqTrace {
    index: usize,
    group: usize,
    delta: f64,
    first: ExpmWorkspace,
    y0: Vec<c64>,
    y1: Vec<c64>,
    y2: Vec<c64>,
    signal: c64,
}

impl ProtocolTrace {
    /// Signals of the traced acquisitions, as `(acquisition index, S)`.
    pub fn signals(&self) -> Vec<(usize, c64)> {
        self.acquisitions.iter().map(|a| (a.index, a.signal)).collect()
    }

    pub fn signal(&self, acq: usize) -> Option<c64> {
        self.acquisitions.iter().find(|a| a.index == acq).map(|a| a.signal)
    }
}

fn build_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Numerical(format!("cannot start worker pool: {e}")))
}

/// Runs the forward model on `subset` (ascending acquisition indices).
/// Results do not depend on `workers`.
pub fn trace_protocol(
    model: &ReducedModel,
    protocol: &Protocol,
    subset: &[usize],
    rho: f64,
    workers: usize,
) -> Result<ProtocolTrace> {
    let s = model.system_matrix();
    let mut gaps: Vec<Option<(f64, ExpmWorkspace)>> = (0..protocol.groups().len()).map(|_| None).collect();
    for &a in subset {
        let g = protocol.group_of(a);
        if gaps[g].is_none() {
            let acq = &protocol.acquisitions()[a];
            let h = acq.big_delta() - acq.delta();
            gaps[g] = Some((h, ExpmWorkspace::new(real_exponent(&s, h).as_ref())?));
        }
    }
    let y0: Vec<c64> = model.readout.iter().map(|&c| c64::new(rho * c, 0.0)).collect();
    let pool = build_pool(workers)?;
    let traces: Vec<Result<AcqTrace>> = pool.install(|| {
        subset
            .par_iter()
            .map(|&a| {
                let acq = &protocol.acquisitions()[a];
                let group = protocol.group_of(a);
                let first = ExpmWorkspace::new(complex_exponent(&s, model, acq.delta(), acq.gradient()).as_ref())?;
                let f1 = first.exp();
                let y1 = mat_vec(f1, &y0);
                let f2 = gaps[group].as_ref().unwrap().1.exp();
                let y2 = mat_vec(f2, &y1);
                // The rephasing lobe is the complex conjugate of the first.
                let y3: Vec<c64> = (0..y2.len())
                    .map(|i| (0..y2.len()).map(|j| f1[(i, j)].conj() * y2[j]).sum())
                    .collect();
                let signal = model.readout.iter().zip(&y3).map(|(&c, &v)| v * c).sum();
                Ok(AcqTrace {
                    index: a,
                    group,
                    delta: acq.delta(),
                    first,
                    y0: y0.clone(),
                    y1,
                    y2,
                    signal,
                })
            })
            .collect()
    });
    let acquisitions = traces.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(ProtocolTrace {
        system: s,
        gaps,
        acquisitions,
    })
}

pub fn simulate_protocol(model: &ReducedModel, protocol: &Protocol, rho: f64, workers: usize) -> Result<SignalSet> {
    let all: Vec<usize> = (0..protocol.len()).collect();
    let trace = trace_protocol(model, protocol, &all, rho, workers)?;
    let signals: Vec<c64> = trace.acquisitions.iter().map(|a| a.signal).collect();
    let references = protocol.groups().iter().map(|g| signals[g.reference]).collect();
    Ok(SignalSet { signals, references })
}

/// Gradient of a real loss with respect to the reduced system matrix `S`.
///
/// `signal_grads` holds `(acquisition, dL/dRe S_a + i dL/dIm S_a)` for traced
/// acquisitions. Contributions are summed in trace order, so the result is
/// independent of the worker count.
pub fn system_gradient(
    model: &ReducedModel,
    trace: &ProtocolTrace,
    signal_grads: &[(usize, c64)],
    workers: usize,
) -> Result<Mat<f64>> {
    let n = model.len();
    let lookup = |a: usize| signal_grads.iter().find(|(i, _)| *i == a).map(|(_, g)| *g);
    let pool = build_pool(workers)?;
    // Per acquisition: the first/third-lobe contribution and the adjoint seed of the gap.
    let parts: Vec<Option<(Mat<f64>, Mat<c64>)>> = pool.install(|| {
        trace
            .acquisitions
            .par_iter()
            .map(|t| {
                let g = lookup(t.index)?;
                if g == c64::new(0.0, 0.0) {
                    return None;
                }
                let f1 = t.first.exp();
                let ybar3: Vec<c64> = model.readout.iter().map(|&c| g * c).collect();
                let fbar3 = outer_h(&ybar3, &t.y2);
                // F3^H = F1^T
                let ybar2: Vec<c64> = (0..n)
                    .map(|j| (0..n).map(|i| f1[(i, j)] * ybar3[i]).sum())
                    .collect();
                let fbar2 = outer_h(&ybar2, &t.y1);
                let f2 = trace.gaps[t.group].as_ref().unwrap().1.exp();
                let ybar1 = mat_h_vec(f2, &ybar2);
                let fbar1 = outer_h(&ybar1, &t.y0);
                // dX1 adjoint is L(X3, F1bar) = conj(L(X1, conj F1bar)); dX3 adjoint is L(X1, F3bar).
                let fbar1_conj = Mat::from_fn(n, n, |i, j| fbar1[(i, j)].conj());
                let l1 = t.first.frechet(fbar1_conj.as_ref());
                let l3 = t.first.frechet(fbar3.as_ref());
                let sbar = Mat::from_fn(n, n, |i, j| -t.delta * (l1[(i, j)].re + l3[(i, j)].re));
                Some((sbar, fbar2))
            })
            .collect()
    });
    let mut sbar = Mat::<f64>::zeros(n, n);
    let mut gap_seeds: Vec<Option<Mat<c64>>> = (0..trace.gaps.len()).map(|_| None).collect();
    for (t, part) in trace.acquisitions.iter().zip(parts) {
        if let Some((s, f2bar)) = part {
            for j in 0..n {
                for i in 0..n {
                    sbar[(i, j)] += s[(i, j)];
                }
            }
            match &mut gap_seeds[t.group] {
                Some(acc) => {
                    for j in 0..n {
                        for i in 0..n {
                            acc[(i, j)] += f2bar[(i, j)];
                        }
                    }
                }
                slot => *slot = Some(f2bar),
            }
        }
    }
    for (gap, seed) in trace.gaps.iter().zip(gap_seeds) {
        if let (Some((h, ws)), Some(seed)) = (gap, seed) {
            // X2 is real symmetric, so X2^H = X2.
            let l2 = ws.frechet(seed.as_ref());
            for j in 0..n {
                for i in 0..n {
                    sbar[(i, j)] -= h * l2[(i, j)].re;
                }
            }
        }
    }
    debug_assert_eq!(trace.system.nrows(), n);
    Ok(sbar)
}

/// Chain rule from `dL/dS` to `dL/dkappa_f` through `U^T B(kappa) U`.
pub fn kappa_gradient(model: &ReducedModel, coupling: &CouplingStructure, sbar: &Mat<f64>) -> Vec<f64> {
    let n = model.len();
    let sym = Mat::from_fn(n, n, |i, j| 0.5 * (sbar[(i, j)] + sbar[(j, i)]));
    let mut w = Mat::<f64>::zeros(model.basis.nrows(), n);
    matmul(w.as_mut(), Accum::Replace, model.basis.as_ref(), sym.as_ref(), 1.0, Par::Seq);
    coupling.face_sensitivities(model.basis.as_ref(), w.as_ref())
}
