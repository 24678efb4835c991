//! Pulsed-gradient spin-echo acquisitions and protocols.

use crate::error::{Error, Result};
use crate::fem::GAMMA_PROTON;
use crate::mesh::Point;

/// 1 s/mm^2 expressed in ms/um^2.
pub const S_PER_MM2_IN_MS_PER_UM2: f64 = 1e-3;

pub const PAPER_B_VALUES: [f64; 6] = [0.0, 1000.0, 2000.0, 3000.0, 4000.0, 5000.0];
pub const PAPER_DELTAS: [f64; 2] = [20.0, 60.0];
pub const PAPER_SMALL_DELTA: f64 = 10.0;

/// Accepted deviation of a user-supplied direction from unit length before normalization.
const DIRECTION_NORM_TOL: f64 = 1e-6;

pub fn axis_directions() -> Vec<Point> {
    vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
}

/// Gradient amplitude (mT/um) giving b-value `b` (ms/um^2).
pub fn amplitude_from_b(b: f64, delta: f64, big_delta: f64, gamma: f64) -> Result<f64> {
    let t = big_delta - delta / 3.0;
    if !(t > 0.0) {
        return Err(Error::InvalidInput(format!(
            "Delta - delta/3 must be positive (delta={delta}, Delta={big_delta})"
        )));
    }
    if !(b >= 0.0) || !b.is_finite() {
        return Err(Error::InvalidInput(format!("b-value must be non-negative, got {b}")));
    }
    if !(delta > 0.0) || delta > big_delta {
        return Err(Error::InvalidInput(format!(
            "need 0 < delta <= Delta (delta={delta}, Delta={big_delta})"
        )));
    }
    Ok((b / (gamma * gamma * delta * delta * t)).sqrt())
}

pub fn b_from_amplitude(g: f64, delta: f64, big_delta: f64, gamma: f64) -> f64 {
    gamma * gamma * g * g * delta * delta * (big_delta - delta / 3.0)
}

/// One constant-gradient stretch of a waveform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
    /// Gradient vector (mT/um).
    pub gradient: Point,
}

impl Interval {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Acquisition {
    direction: Point,
    /// ms/um^2.
    b: f64,
    delta: f64,
    big_delta: f64,
    amplitude: f64,
}

impl Acquisition {
    /// `b_s_mm2` in s/mm^2, times in ms.
    pub fn new(direction: Point, b_s_mm2: f64, delta: f64, big_delta: f64) -> Result<Self> {
        let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > DIRECTION_NORM_TOL {
            return Err(Error::InvalidInput(format!(
                "gradient direction must be a unit vector, got norm {norm}"
            )));
        }
        let direction = direction.map(|v| v / norm);
        let b = b_s_mm2 * S_PER_MM2_IN_MS_PER_UM2;
        let amplitude = amplitude_from_b(b, delta, big_delta, GAMMA_PROTON)?;
        Ok(Acquisition {
            direction,
            b,
            delta,
            big_delta,
            amplitude,
        })
    }

    pub fn direction(&self) -> Point {
        self.direction
    }

    /// ms/um^2.
    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn b_s_mm2(&self) -> f64 {
        self.b / S_PER_MM2_IN_MS_PER_UM2
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn big_delta(&self) -> f64 {
        self.big_delta
    }

    /// mT/um.
    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    pub fn echo_time(&self) -> f64 {
        self.big_delta + self.delta
    }

    pub fn is_b0(&self) -> bool {
        self.b == 0.0
    }

    pub fn gradient(&self) -> Point {
        self.direction.map(|v| v * self.amplitude)
    }

    pub fn waveform_intervals(&self) -> [Interval; 3] {
        let g = self.gradient();
        [
            Interval {
                start: 0.0,
                end: self.delta,
                gradient: g,
            },
            Interval {
                start: self.delta,
                end: self.big_delta,
                gradient: [0.0; 3],
            },
            Interval {
                start: self.big_delta,
                end: self.big_delta + self.delta,
                gradient: g.map(|v| -v),
            },
        ]
    }
}

/// Acquisitions sharing one diffusion time, with the b=0 member used as reference.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaGroup {
    pub big_delta: f64,
    pub members: Vec<usize>,
    pub reference: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Protocol {
    acquisitions: Vec<Acquisition>,
    groups: Vec<DeltaGroup>,
    group_of: Vec<usize>,
}

impl Protocol {
    /// Groups by exact `Delta`; every group needs a b=0 acquisition.
    pub fn new(acquisitions: Vec<Acquisition>) -> Result<Self> {
        if acquisitions.is_empty() {
            return Err(Error::InvalidInput("protocol has no acquisitions".into()));
        }
        let mut deltas: Vec<f64> = acquisitions.iter().map(|a| a.big_delta).collect();
        deltas.sort_by(f64::total_cmp);
        deltas.dedup();
        let mut groups = Vec::with_capacity(deltas.len());
        let mut group_of = vec![0; acquisitions.len()];
        for (g, &d) in deltas.iter().enumerate() {
            let members: Vec<usize> = (0..acquisitions.len())
                .filter(|&i| acquisitions[i].big_delta == d)
                .collect();
            let reference = members
                .iter()
                .copied()
                .find(|&i| acquisitions[i].is_b0())
                .ok_or_else(|| {
                    Error::InvalidInput(format!("no b=0 reference for Delta = {d} ms"))
                })?;
            for &i in &members {
                group_of[i] = g;
            }
            groups.push(DeltaGroup {
                big_delta: d,
                members,
                reference,
            });
        }
        Ok(Protocol {
            acquisitions,
            groups,
            group_of,
        })
    }

    /// All six b-values at both diffusion times for every direction.
    pub fn paper(directions: &[Point]) -> Result<Self> {
        if directions.is_empty() {
            return Err(Error::InvalidInput("direction set is empty".into()));
        }
        let mut acqs = Vec::with_capacity(PAPER_DELTAS.len() * directions.len() * PAPER_B_VALUES.len());
        for &big_delta in &PAPER_DELTAS {
            for &dir in directions {
                for &b in &PAPER_B_VALUES {
                    acqs.push(Acquisition::new(dir, b, PAPER_SMALL_DELTA, big_delta)?);
                }
            }
        }
        Protocol::new(acqs)
    }

    pub fn acquisitions(&self) -> &[Acquisition] {
        &self.acquisitions
    }

    pub fn len(&self) -> usize {
        self.acquisitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.acquisitions.is_empty()
    }

    pub fn groups(&self) -> &[DeltaGroup] {
        &self.groups
    }

    pub fn group_of(&self, acq: usize) -> usize {
        self.group_of[acq]
    }

    /// Index of the b=0 reference for acquisition `acq`.
    pub fn reference_of(&self, acq: usize) -> usize {
        self.groups[self.group_of[acq]].reference
    }

    /// Non-b0 acquisitions at the longest diffusion time.
    pub fn long_set(&self) -> Vec<usize> {
        let last = self.groups.len() - 1;
        self.non_b0_in(|g| g == last)
    }

    /// Non-b0 acquisitions at every shorter diffusion time.
    pub fn short_set(&self) -> Vec<usize> {
        let last = self.groups.len() - 1;
        if last == 0 {
            return self.long_set();
        }
        self.non_b0_in(|g| g < last)
    }

    pub fn non_b0(&self) -> Vec<usize> {
        self.non_b0_in(|_| true)
    }

    fn non_b0_in(&self, keep: impl Fn(usize) -> bool) -> Vec<usize> {
        (0..self.acquisitions.len())
            .filter(|&i| keep(self.group_of[i]) && !self.acquisitions[i].is_b0())
            .collect()
    }
}
