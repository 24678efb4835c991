//! Adam, the cyclic warmup/cosine learning rate, weight ramps and the
//! acquisition curriculum.

use std::fmt;
use std::str::FromStr;

use crate::encoding::Protocol;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub eta0: f64,
    pub cycle: usize,
    pub warmup: usize,
    /// Floor of the cosine decay as a fraction of `eta0`.
    pub alpha: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            eta0: 0.75,
            cycle: 200,
            warmup: 50,
            alpha: 0.1,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta0 > 0.0) || self.cycle == 0 || self.warmup >= self.cycle || !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("invalid learning-rate schedule {self:?}")));
        }
        Ok(())
    }

    /// Linear warmup from zero, then cosine decay to `alpha * eta0`, restarting every cycle.
    pub fn rate(&self, t: usize) -> f64 {
        let s = t % self.cycle;
        if s < self.warmup {
            return self.eta0 * s as f64 / self.warmup as f64;
        }
        let floor = self.alpha * self.eta0;
        let x = (s - self.warmup) as f64 / (self.cycle - self.warmup) as f64;
        floor + (self.eta0 - floor) * (1.0 + (std::f64::consts::PI * x).cos()) / 2.0
    }
}

/// Linear ramp from zero to `max` over `ramp` iterations.
pub fn ramp_weight(t: usize, max: f64, ramp: usize) -> f64 {
    if ramp == 0 {
        return max;
    }
    (t as f64 / ramp as f64).min(1.0) * max
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: i32,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            steps: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps as usize
    }

    /// One bias-corrected update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient component {i} at optimizer step {}",
                self.steps
            )));
        }
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps);
        let c2 = 1.0 - self.beta2.powi(self.steps);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    /// Long diffusion times first, then short ones.
    Staged,
    /// Both sets at every iteration.
    Joint,
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Schedule::Staged => "staged",
            Schedule::Joint => "joint",
        })
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "staged" => Ok(Schedule::Staged),
            "joint" => Ok(Schedule::Joint),
            other => Err(Error::Config(format!("unknown schedule '{other}' (staged|joint)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Long,
    Short,
    Joint,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Long => "long",
            Phase::Short => "short",
            Phase::Joint => "joint",
        })
    }
}

pub fn phase_at(t: usize, schedule: Schedule, t_switch: usize) -> Phase {
    match schedule {
        Schedule::Joint => Phase::Joint,
        Schedule::Staged if t < t_switch => Phase::Long,
        Schedule::Staged => Phase::Short,
    }
}

/// Acquisitions contributing to the data term at iteration `t`, ascending.
pub fn active_acquisitions(t: usize, protocol: &Protocol, schedule: Schedule, t_switch: usize) -> (Phase, Vec<usize>) {
    let phase = phase_at(t, schedule, t_switch);
    let set = match phase {
        Phase::Long => protocol.long_set(),
        Phase::Short => protocol.short_set(),
        Phase::Joint => {
            let mut all = protocol.long_set();
            all.extend(protocol.short_set());
            all.sort_unstable();
            all.dedup();
            all
        }
    };
    (phase, set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::axis_directions;

    #[test]
    fn schedule_examples() {
        let s = LrSchedule::default();
        assert_eq!(s.rate(0), 0.0);
        assert_eq!(s.rate(50), 0.75);
        assert!((s.rate(125) - 0.4125).abs() < 1e-12);
        assert!((s.rate(199) - 0.075).abs() < 1e-3);
        assert_eq!(s.rate(250), 0.75);
        assert_eq!(s.rate(25), 0.375);
    }

    #[test]
    fn manifold_ramp() {
        assert_eq!(ramp_weight(0, 2.0, 400), 0.0);
        assert_eq!(ramp_weight(200, 2.0, 400), 1.0);
        assert_eq!(ramp_weight(400, 2.0, 400), 2.0);
        assert_eq!(ramp_weight(1000, 2.0, 400), 2.0);
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let mut adam = Adam::new(3);
        let mut p = vec![1.0, -2.0, 0.5];
        adam.step(&mut p, &[0.0; 3], 0.1).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        let mut adam = Adam::new(3);
        adam.step(&mut p, &[3.0, -1e-3, 0.0], 0.1).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] - (-2.0 + 0.1)).abs() < 1e-4);
        assert_eq!(p[2], 0.5);
        assert!(adam.step(&mut p, &[f64::NAN, 0.0, 0.0], 0.1).is_err());
    }

    /// Scalar re-implementation of the bias-corrected recursion.
    #[test]
    fn adam_quadratic_trace() {
        let mut adam = Adam::new(2);
        let mut p = vec![1.0, 1.0];
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=200 {
            let g: Vec<f64> = p.iter().map(|q| 2.0 * q).collect();
            adam.step(&mut p, &g, 0.1).unwrap();
            let gx = 2.0 * x;
            m = 0.9 * m + 0.1 * gx;
            v = 0.999 * v + 0.001 * gx * gx;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 0.1 * mh / (vh.sqrt() + 1e-8);
            assert!((p[0] - x).abs() <= 1e-10 && (p[1] - x).abs() <= 1e-10);
        }
    }

    #[test]
    fn curriculum() {
        let p = Protocol::paper(&axis_directions()).unwrap();
        assert_eq!(active_acquisitions(0, &p, Schedule::Staged, 200), (Phase::Long, p.long_set()));
        assert_eq!(active_acquisitions(199, &p, Schedule::Staged, 200).0, Phase::Long);
        assert_eq!(active_acquisitions(200, &p, Schedule::Staged, 200), (Phase::Short, p.short_set()));
        let (phase, joint) = active_acquisitions(0, &p, Schedule::Joint, 200);
        assert_eq!(phase, Phase::Joint);
        assert_eq!(joint, p.non_b0());
        assert_eq!("joint".parse::<Schedule>().unwrap(), Schedule::Joint);
        assert!("split".parse::<Schedule>().is_err());
    }
}
