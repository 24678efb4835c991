//! Gradient-based recovery of face permeabilities from reference signals.

use std::collections::BTreeMap;
use std::io::Write;

use crate::eigen::EigenOptions;
use crate::encoding::Protocol;
use crate::error::{Error, Result};
use crate::fem::{CouplingStructure, DofMap, OperatorSet, PhysicalParams};
use crate::field::{PermeabilityField, Reparam};
use crate::forward::{kappa_gradient, maybe_refresh_basis, system_gradient, trace_protocol, ReducedModel, SignalSet};
use crate::mesh::Mesh;
use crate::objective::{loss_data_with_grad, reg_continuity_with_grad, reg_manifold_with_grad, SoftBarrier};
use crate::optim::{active_acquisitions, ramp_weight, Adam, LrSchedule, Phase, Schedule};

/// Mesh with its assembled operators.
#[derive(Debug, Clone)]
pub struct Problem {
    pub mesh: Mesh,
    pub ops: OperatorSet,
    pub coupling: CouplingStructure,
}

impl Problem {
    pub fn new(mesh: Mesh, params: PhysicalParams) -> Result<Self> {
        let ops = OperatorSet::assemble(&mesh, params)?;
        let coupling = CouplingStructure::build(&mesh, &DofMap::new(&mesh))?;
        Ok(Problem { mesh, ops, coupling })
    }

    pub fn num_faces(&self) -> usize {
        self.coupling.num_faces()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Weights {
    pub data: f64,
    pub cont: f64,
    pub man: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InversionConfig {
    pub iters: usize,
    pub schedule: Schedule,
    pub t_switch: usize,
    pub lr: LrSchedule,
    pub lambda_data: f64,
    pub lambda_cont: f64,
    pub lambda_man_max: f64,
    pub lambda_man_ramp: usize,
    /// Full eigensolve every this many iterations.
    pub refresh_n: usize,
    pub eigen: EigenOptions,
    pub soft: SoftBarrier,
    pub reparam: Reparam,
    pub rho: f64,
    pub workers: usize,
}

impl Default for InversionConfig {
    fn default() -> Self {
        InversionConfig {
            iters: 400,
            schedule: Schedule::Staged,
            t_switch: 200,
            lr: LrSchedule::default(),
            lambda_data: 100.0,
            lambda_cont: 2.0,
            lambda_man_max: 2.0,
            lambda_man_ramp: 400,
            refresh_n: 50,
            eigen: EigenOptions::default(),
            soft: SoftBarrier::default(),
            reparam: Reparam::default(),
            rho: 1.0,
            workers: 1,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        self.lr.validate()?;
        self.soft.validate().map_err(|e| Error::Config(e.to_string()))?;
        for (name, v) in [
            ("lambda_data", self.lambda_data),
            ("lambda_cont", self.lambda_cont),
            ("lambda_man_max", self.lambda_man_max),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.eigen.nev < 2 {
            return Err(Error::Config("neig must be at least 2".into()));
        }
        if !(self.rho > 0.0) {
            return Err(Error::Config(format!("rho must be positive, got {}", self.rho)));
        }
        Ok(())
    }

    pub fn weights_at(&self, t: usize) -> Weights {
        Weights {
            data: self.lambda_data,
            cont: self.lambda_cont,
            man: ramp_weight(t, self.lambda_man_max, self.lambda_man_ramp),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub total: f64,
    pub data: f64,
    pub cont: f64,
    pub man: f64,
    /// Gradient of `total` with respect to theta.
    pub grad_theta: Vec<f64>,
}

/// Total objective and its theta-gradient with the basis of `model` held fixed.
/// The coupling projection of `model` must already match `field`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    problem: &Problem,
    model: &ReducedModel,
    field: &PermeabilityField,
    protocol: &Protocol,
    target: &SignalSet,
    active: &[usize],
    weights: Weights,
    soft: &SoftBarrier,
    rho: f64,
    workers: usize,
) -> Result<Evaluation> {
    let kappa = field.kappa();
    let mut subset: Vec<usize> = active.to_vec();
    subset.extend(active.iter().map(|&a| protocol.reference_of(a)));
    subset.sort_unstable();
    subset.dedup();
    let trace = trace_protocol(model, protocol, &subset, rho, workers)?;
    let predicted: BTreeMap<usize, _> = trace.signals().into_iter().collect();
    let (data, signal_grads) = loss_data_with_grad(protocol, &predicted, target, active)?;
    let mut grad_kappa = vec![0.0; kappa.len()];
    if weights.data != 0.0 && !signal_grads.is_empty() {
        let sbar = system_gradient(model, &trace, &signal_grads, workers)?;
        for (g, d) in grad_kappa.iter_mut().zip(kappa_gradient(model, &problem.coupling, &sbar)) {
            *g += weights.data * d;
        }
    }
    let (cont, gc) = reg_continuity_with_grad(kappa, problem.mesh.face_adjacency(), soft);
    let (man, gm) = reg_manifold_with_grad(kappa, problem.mesh.edges(), soft);
    for i in 0..kappa.len() {
        grad_kappa[i] += weights.cont * gc[i] + weights.man * gm[i];
    }
    let reparam = field.reparam();
    let grad_theta = field
        .theta()
        .iter()
        .zip(&grad_kappa)
        .map(|(&th, &g)| g * reparam.dkappa_dtheta(th))
        .collect();
    Ok(Evaluation {
        total: weights.data * data + weights.cont * cont + weights.man * man,
        data,
        cont,
        man,
        grad_theta,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRecord {
    pub iter: usize,
    pub loss_total: f64,
    pub loss_data: f64,
    pub reg_cont: f64,
    pub reg_man: f64,
    pub lr: f64,
    pub phase: Phase,
}

impl HistoryRecord {
    pub const CSV_HEADER: &'static str = "iter,loss_total,loss_data,reg_cont,reg_man,lr,phase";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.iter, self.loss_total, self.loss_data, self.reg_cont, self.reg_man, self.lr, self.phase
        )
    }
}

#[derive(Debug, Clone)]
pub struct InversionResult {
    pub field: PermeabilityField,
    pub history: Vec<HistoryRecord>,
}

/// Runs the optimization from `initial`, streaming one CSV line per iteration
/// to `history_sink` when given.
pub fn run_inversion(
    problem: &Problem,
    protocol: &Protocol,
    target: &SignalSet,
    initial: PermeabilityField,
    config: &InversionConfig,
    mut history_sink: Option<&mut dyn Write>,
) -> Result<InversionResult> {
    config.validate()?;
    if initial.len() != problem.num_faces() {
        return Err(Error::InvalidInput(format!(
            "initial field has {} faces, mesh has {}",
            initial.len(),
            problem.num_faces()
        )));
    }
    if target.signals.len() != protocol.len() || target.references.len() != protocol.groups().len() {
        return Err(Error::InvalidInput("reference signals do not match the protocol".into()));
    }
    let io_err = |e| Error::io("history", e);
    if let Some(w) = history_sink.as_deref_mut() {
        writeln!(w, "{}", HistoryRecord::CSV_HEADER).map_err(io_err)?;
    }
    let mut field = initial;
    let mut adam = Adam::new(field.len());
    let mut model: Option<ReducedModel> = None;
    let mut history = Vec::with_capacity(config.iters);
    for t in 0..config.iters {
        let (phase, active) = active_acquisitions(t, protocol, config.schedule, config.t_switch);
        let m = maybe_refresh_basis(
            model.take(),
            t,
            config.refresh_n,
            &problem.ops,
            &problem.coupling,
            field.kappa(),
            &config.eigen,
        )?;
        let eval = evaluate(
            problem,
            &m,
            &field,
            protocol,
            target,
            &active,
            config.weights_at(t),
            &config.soft,
            config.rho,
            config.workers,
        )?;
        model = Some(m);
        if !eval.total.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: t });
        }
        let lr = config.lr.rate(t);
        let record = HistoryRecord {
            iter: t,
            loss_total: eval.total,
            loss_data: eval.data,
            reg_cont: eval.cont,
            reg_man: eval.man,
            lr,
            phase,
        };
        if let Some(w) = history_sink.as_deref_mut() {
            writeln!(w, "{}", record.csv_line()).map_err(io_err)?;
            w.flush().map_err(io_err)?;
        }
        history.push(record);
        let mut theta = field.theta().to_vec();
        adam.step(&mut theta, &eval.grad_theta, lr).map_err(|_| Error::NonFiniteLoss { iteration: t })?;
        field.set_theta(theta);
    }
    Ok(InversionResult { field, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::axis_directions;
    use crate::forward::{compute_reduced_basis, simulate_protocol};
    use crate::mesh::build_ambient_grid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_problem() -> Problem {
        Problem::new(build_ambient_grid(2, 13.6).unwrap(), PhysicalParams::default()).unwrap()
    }

    fn config(iters: usize) -> InversionConfig {
        InversionConfig {
            iters,
            eigen: EigenOptions { nev: 20, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn total_gradient_matches_finite_differences() {
        let problem = small_problem();
        let protocol = Protocol::paper(&axis_directions()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let reparam = Reparam::default();
        let truth: Vec<f64> = (0..problem.num_faces()).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let truth = PermeabilityField::from_theta(reparam, truth);
        let eig = EigenOptions { nev: 20, ..Default::default() };
        let tm = compute_reduced_basis(&problem.ops, &problem.coupling, truth.kappa(), &eig).unwrap();
        let target = simulate_protocol(&tm, &protocol, 1.0, 1).unwrap();

        let theta: Vec<f64> = (0..problem.num_faces()).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let field = PermeabilityField::from_theta(reparam, theta.clone());
        let base = compute_reduced_basis(&problem.ops, &problem.coupling, field.kappa(), &eig).unwrap();
        let active = protocol.long_set();
        let w = Weights { data: 100.0, cont: 2.0, man: 1.3 };
        let soft = SoftBarrier::default();
        let eval_at = |th: &[f64]| {
            let f = PermeabilityField::from_theta(reparam, th.to_vec());
            let mut m = base.clone();
            m.refresh_coupling(&problem.coupling, f.kappa());
            evaluate(&problem, &m, &f, &protocol, &target, &active, w, &soft, 1.0, 1).unwrap()
        };
        let e = eval_at(&theta);
        let mut checked = 0;
        for f in (0..theta.len()).step_by(9) {
            let h = 1e-4;
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[f] += h;
            tm[f] -= h;
            let fd = (eval_at(&tp).total - eval_at(&tm).total) / (2.0 * h);
            let an = e.grad_theta[f];
            if an.abs() > 1e-8 {
                assert!((fd - an).abs() <= 1e-3 * an.abs(), "face {f}: fd {fd} vs {an}");
                checked += 1;
            }
        }
        assert!(checked > 5);
    }

    #[test]
    fn self_consistent_target_is_a_fixed_point_of_the_data_term() {
        let problem = small_problem();
        let protocol = Protocol::paper(&axis_directions()).unwrap();
        let cfg = InversionConfig { lambda_cont: 0.0, lambda_man_max: 0.0, ..config(3) };
        let init = PermeabilityField::uniform_initial(cfg.reparam, problem.num_faces());
        assert!(init.kappa().iter().all(|&k| (k - 1e-3).abs() < 1e-15));
        let m = compute_reduced_basis(&problem.ops, &problem.coupling, init.kappa(), &cfg.eigen).unwrap();
        let target = simulate_protocol(&m, &protocol, 1.0, 1).unwrap();
        let out = run_inversion(&problem, &protocol, &target, init, &cfg, None).unwrap();
        assert_eq!(out.history.len(), 3);
        for r in &out.history {
            assert!(r.loss_data <= 1e-10, "{r:?}");
        }
    }

    #[test]
    fn history_is_streamed_and_deterministic() {
        let problem = small_problem();
        let protocol = Protocol::paper(&axis_directions()).unwrap();
        let reparam = Reparam::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let truth = PermeabilityField::from_theta(reparam, (0..problem.num_faces()).map(|_| rng.gen_range(-4.0..4.0)).collect());
        let mut cfg = config(6);
        cfg.t_switch = 3;
        cfg.refresh_n = 4;
        let m = compute_reduced_basis(&problem.ops, &problem.coupling, truth.kappa(), &cfg.eigen).unwrap();
        let target = simulate_protocol(&m, &protocol, 1.0, 1).unwrap();
        let run = |workers: usize| {
            let mut c = cfg.clone();
            c.workers = workers;
            let mut buf = Vec::new();
            let init = PermeabilityField::uniform_initial(reparam, problem.num_faces());
            let out = run_inversion(&problem, &protocol, &target, init, &c, Some(&mut buf)).unwrap();
            (String::from_utf8(buf).unwrap(), out)
        };
        let (csv1, out1) = run(1);
        let (csv2, _) = run(3);
        assert_eq!(csv1, csv2);
        let lines: Vec<&str> = csv1.lines().collect();
        assert_eq!(lines[0], HistoryRecord::CSV_HEADER);
        assert_eq!(lines.len(), 7);
        assert!(lines[3].ends_with(",long") && lines[4].ends_with(",short"));
        assert!(out1.history[5].loss_data < out1.history[0].loss_data);
    }
}
