//! Data misfit and the two barrier-shape regularizers.
//!
//! Regularizer gradients are returned with respect to `kappa`; the caller
//! chains them through the reparametrization.

use std::collections::BTreeMap;

use faer::c64;

use crate::encoding::Protocol;
use crate::error::{Error, Result};
use crate::field::sigmoid;
use crate::forward::SignalSet;
use crate::mesh::Edge;

pub const DEFAULT_TAU_P: f64 = 0.5;
pub const DEFAULT_TAU_M: f64 = 0.5;

/// Temperatures and threshold of the soft barrier indicator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftBarrier {
    /// `log10` of the barrier threshold.
    pub log10_threshold: f64,
    pub tau_p: f64,
    pub tau_m: f64,
}

impl Default for SoftBarrier {
    fn default() -> Self {
        SoftBarrier {
            log10_threshold: -3.0,
            tau_p: DEFAULT_TAU_P,
            tau_m: DEFAULT_TAU_M,
        }
    }
}

impl SoftBarrier {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_p > 0.0) || !(self.tau_m > 0.0) || !self.log10_threshold.is_finite() {
            return Err(Error::InvalidInput(format!(
                "temperatures must be positive and the threshold finite: {self:?}"
            )));
        }
        Ok(())
    }

    /// Soft indicator that a face with permeability `kappa` is a barrier.
    pub fn p_non(&self, kappa: f64) -> f64 {
        sigmoid((self.log10_threshold - kappa.log10()) / self.tau_p)
    }

    /// `d p_non / d kappa`
    pub fn dp_non_dkappa(&self, kappa: f64) -> f64 {
        let p = self.p_non(kappa);
        -p * (1.0 - p) / (self.tau_p * kappa * std::f64::consts::LN_10)
    }
}

/// `-tau log(exp(-a/tau) + exp(-b/tau))`, shifted by `min(a, b)` to stay finite.
pub fn softmin(a: f64, b: f64, tau: f64) -> f64 {
    softmin_with_grad(a, b, tau).0
}

/// Value and partial derivatives with respect to `a` and `b`.
pub fn softmin_with_grad(a: f64, b: f64, tau: f64) -> (f64, f64, f64) {
    let m = a.min(b);
    let ea = (-(a - m) / tau).exp();
    let eb = (-(b - m) / tau).exp();
    let s = ea + eb;
    (m - tau * s.ln(), ea / s, eb / s)
}

/// Sum of squared complex residuals of normalized signals over `active`,
/// with `dL/dRe S + i dL/dIm S` for every predicted signal involved
/// (active acquisitions and their b=0 references).
pub fn loss_data_with_grad(
    protocol: &Protocol,
    predicted: &BTreeMap<usize, c64>,
    target: &SignalSet,
    active: &[usize],
) -> Result<(f64, Vec<(usize, c64)>)> {
    let mut loss = 0.0;
    let mut grads: BTreeMap<usize, c64> = BTreeMap::new();
    for &a in active {
        let r_idx = protocol.reference_of(a);
        let s = *predicted
            .get(&a)
            .ok_or_else(|| Error::InvalidInput(format!("no predicted signal for acquisition {a}")))?;
        let s0 = *predicted
            .get(&r_idx)
            .ok_or_else(|| Error::InvalidInput(format!("no predicted reference for acquisition {a}")))?;
        let t0 = target.references[protocol.group_of(a)];
        if s0.norm() == 0.0 || t0.norm() == 0.0 {
            return Err(Error::Numerical(format!("zero b=0 reference for acquisition {a}")));
        }
        let r = s / s0 - target.signals[a] / t0;
        loss += r.norm_sqr();
        *grads.entry(a).or_default() += r * 2.0 / s0.conj();
        *grads.entry(r_idx).or_default() += -r * 2.0 * s.conj() / (s0.conj() * s0.conj());
    }
    Ok((loss, grads.into_iter().collect()))
}

pub fn loss_data(protocol: &Protocol, predicted: &SignalSet, target: &SignalSet, active: &[usize]) -> Result<f64> {
    let map: BTreeMap<usize, c64> = predicted.signals.iter().copied().enumerate().collect();
    Ok(loss_data_with_grad(protocol, &map, target, active)?.0)
}

/// Continuity penalty over unordered adjacent face pairs, weighted by
/// `1 - |p_f - p_g|` so that sharp barrier transitions are cheap.
pub fn reg_continuity_with_grad(kappa: &[f64], adjacency: &[(usize, usize)], soft: &SoftBarrier) -> (f64, Vec<f64>) {
    let p: Vec<f64> = kappa.iter().map(|&k| soft.p_non(k)).collect();
    let dp: Vec<f64> = kappa.iter().map(|&k| soft.dp_non_dkappa(k)).collect();
    let mut value = 0.0;
    let mut grad = vec![0.0; kappa.len()];
    for &(f, g) in adjacency {
        let d = kappa[f] - kappa[g];
        let dpf = p[f] - p[g];
        let w = 1.0 - dpf.abs();
        value += w * d * d;
        // d|x|/dx taken as zero at the kink, where both sides agree.
        let sgn = if dpf > 0.0 { 1.0 } else if dpf < 0.0 { -1.0 } else { 0.0 };
        let dw_dpf = -sgn;
        grad[f] += 2.0 * w * d + d * d * dw_dpf * dp[f];
        grad[g] += -2.0 * w * d - d * d * dw_dpf * dp[g];
    }
    (value, grad)
}

pub fn reg_continuity(kappa: &[f64], adjacency: &[(usize, usize)], soft: &SoftBarrier) -> f64 {
    reg_continuity_with_grad(kappa, adjacency, soft).0
}

/// Soft count of barrier faces at every edge, pulled toward 0 or 2.
pub fn reg_manifold_with_grad(kappa: &[f64], edges: &[Edge], soft: &SoftBarrier) -> (f64, Vec<f64>) {
    let p: Vec<f64> = kappa.iter().map(|&k| soft.p_non(k)).collect();
    let mut value = 0.0;
    let mut grad = vec![0.0; kappa.len()];
    for e in edges.iter().filter(|e| !e.interior_faces.is_empty()) {
        let k: f64 = e.interior_faces.iter().map(|&f| p[f]).sum();
        let (v, da, db) = softmin_with_grad(k * k, (k - 2.0) * (k - 2.0), soft.tau_m);
        value += v;
        let dk = da * 2.0 * k + db * 2.0 * (k - 2.0);
        for &f in &e.interior_faces {
            grad[f] += dk;
        }
    }
    for (g, &k) in grad.iter_mut().zip(kappa) {
        *g *= soft.dp_non_dkappa(k);
    }
    (value, grad)
}

pub fn reg_manifold(kappa: &[f64], edges: &[Edge], soft: &SoftBarrier) -> f64 {
    reg_manifold_with_grad(kappa, edges, soft).0
}
