//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use barrierfem::eigen::EigenOptions;
use barrierfem::inversion::InversionConfig;
use barrierfem::objective::SoftBarrier;
use barrierfem::optim::Schedule;
use barrierfem::{Error, PhysicalParams, Reparam, Result, ShapeSpec};

pub const KEYS: &[&str] = &[
    "case",
    "grid_n",
    "half_extent",
    "shape",
    "mesh",
    "protocol",
    "field",
    "truth_field",
    "truth_interface",
    "signals",
    "predicted_signals",
    "diffusivity",
    "t2",
    "rho",
    "eta0",
    "cycle",
    "warmup",
    "alpha",
    "lambda_data",
    "lambda_cont",
    "lambda_man_max",
    "lambda_man_ramp",
    "t_switch",
    "iters",
    "neig",
    "refresh_n",
    "tau_sigma",
    "tau_p",
    "tau_m",
    "tau_b",
    "log10_kappa_min",
    "log10_kappa_max",
    "seed",
    "schedule",
    "workers",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub case: String,
    pub grid_n: usize,
    pub half_extent: f64,
    pub shape: ShapeSpec,
    /// Input file overrides; `None` means the conventional file in the output directory.
    pub mesh: Option<PathBuf>,
    pub protocol: Option<PathBuf>,
    pub field: Option<PathBuf>,
    pub truth_field: Option<PathBuf>,
    pub truth_interface: Option<PathBuf>,
    pub signals: Option<PathBuf>,
    pub predicted_signals: Option<PathBuf>,
    pub physics: PhysicalParams,
    pub inversion: InversionConfig,
    pub tau_b: f64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            case: "case".into(),
            grid_n: 10,
            half_extent: 13.6,
            shape: ShapeSpec::sphere([0.0; 3], 8.0),
            mesh: None,
            protocol: None,
            field: None,
            truth_field: None,
            truth_interface: None,
            signals: None,
            predicted_signals: None,
            physics: PhysicalParams::default(),
            inversion: InversionConfig {
                workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
                ..InversionConfig::default()
            },
            tau_b: 1e-3,
            seed: 0x5eed,
        }
    }
}

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{raw}'")))
}

impl RunConfig {
    /// Parses `text`; relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(Error::Config(format!("line {}: unknown key '{k}'", i + 1)));
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key '{k}'", i + 1)));
            }
        }
        let mut c = RunConfig::default();
        let path = |v: &str| Some(base.join(v));
        let inv = &mut c.inversion;
        let (mut tau_sigma, mut kmin, mut kmax) = (inv.reparam.temperature, inv.reparam.log10_min, inv.reparam.log10_max);
        for (k, v) in &entries {
            let v = v.as_str();
            match k.as_str() {
                "case" => c.case = v.to_string(),
                "grid_n" => c.grid_n = value(k, v)?,
                "half_extent" => c.half_extent = value(k, v)?,
                "shape" => c.shape = v.parse()?,
                "mesh" => c.mesh = path(v),
                "protocol" => c.protocol = path(v),
                "field" => c.field = path(v),
                "truth_field" => c.truth_field = path(v),
                "truth_interface" => c.truth_interface = path(v),
                "signals" => c.signals = path(v),
                "predicted_signals" => c.predicted_signals = path(v),
                "diffusivity" => c.physics.diffusivity = value(k, v)?,
                "t2" => c.physics.t2 = value(k, v)?,
                "rho" => {
                    c.physics.rho = value(k, v)?;
                    inv.rho = c.physics.rho;
                }
                "eta0" => inv.lr.eta0 = value(k, v)?,
                "cycle" => inv.lr.cycle = value(k, v)?,
                "warmup" => inv.lr.warmup = value(k, v)?,
                "alpha" => inv.lr.alpha = value(k, v)?,
                "lambda_data" => inv.lambda_data = value(k, v)?,
                "lambda_cont" => inv.lambda_cont = value(k, v)?,
                "lambda_man_max" => inv.lambda_man_max = value(k, v)?,
                "lambda_man_ramp" => inv.lambda_man_ramp = value(k, v)?,
                "t_switch" => inv.t_switch = value(k, v)?,
                "iters" => inv.iters = value(k, v)?,
                "neig" => inv.eigen.nev = value(k, v)?,
                "refresh_n" => inv.refresh_n = value(k, v)?,
                "tau_sigma" => tau_sigma = value(k, v)?,
                "tau_p" => inv.soft.tau_p = value(k, v)?,
                "tau_m" => inv.soft.tau_m = value(k, v)?,
                "tau_b" => c.tau_b = value(k, v)?,
                "log10_kappa_min" => kmin = value(k, v)?,
                "log10_kappa_max" => kmax = value(k, v)?,
                "seed" => c.seed = value(k, v)?,
                "schedule" => inv.schedule = v.parse()?,
                "workers" => inv.workers = value(k, v)?,
                _ => unreachable!("key list and match arms disagree"),
            }
        }
        inv.reparam = Reparam::new(kmin, kmax, tau_sigma).map_err(|e| Error::Config(e.to_string()))?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }

    pub fn set_workers(&mut self, workers: usize) {
        self.inversion.workers = workers;
    }

    pub fn set_schedule(&mut self, schedule: Schedule) {
        self.inversion.schedule = schedule;
    }

    /// Fills derived settings and checks every value.
    pub fn finalize(mut self) -> Result<Self> {
        if self.grid_n == 0 {
            return Err(Error::Config("grid_n must be at least 1".into()));
        }
        if !(self.half_extent > 0.0) {
            return Err(Error::Config(format!("half_extent must be positive, got {}", self.half_extent)));
        }
        if !(self.physics.diffusivity > 0.0) || !(self.physics.t2 > 0.0) || !(self.physics.rho > 0.0) {
            return Err(Error::Config("diffusivity, t2 and rho must be positive".into()));
        }
        if self.inversion.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        let r = self.inversion.reparam;
        if !(self.tau_b > r.kappa_min() && self.tau_b < r.kappa_max()) {
            return Err(Error::Config(format!(
                "tau_b {} outside ({}, {})",
                self.tau_b,
                r.kappa_min(),
                r.kappa_max()
            )));
        }
        self.inversion.soft = SoftBarrier {
            log10_threshold: self.tau_b.log10(),
            ..self.inversion.soft
        };
        self.inversion.eigen = EigenOptions {
            seed: self.seed,
            ..self.inversion.eigen.clone()
        };
        self.inversion.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_known_keys() {
        let text = "# run\niters = 12\nschedule=joint\nneig = 30\ntau_b = 2e-3\nmesh = m.txt\nshape = torus_default\n";
        let c = RunConfig::parse(text, Path::new("/base")).unwrap().finalize().unwrap();
        assert_eq!(c.inversion.iters, 12);
        assert_eq!(c.inversion.schedule, Schedule::Joint);
        assert_eq!(c.inversion.eigen.nev, 30);
        assert_eq!(c.mesh.as_deref(), Some(Path::new("/base/m.txt")));
        assert!((c.inversion.soft.log10_threshold - 2e-3f64.log10()).abs() < 1e-15);
        assert!(matches!(c.shape, ShapeSpec::Torus { .. }));
    }

    #[test]
    fn rejects_bad_input() {
        let base = Path::new(".");
        for bad in ["itres = 3", "iters = 3\niters = 4", "iters three", "iters = -1", "schedule = split"] {
            assert!(matches!(RunConfig::parse(bad, base), Err(Error::Config(_))), "{bad}");
        }
        for bad in ["tau_b = 1", "warmup = 300", "workers = 0", "grid_n = 0", "neig = 1"] {
            let c = RunConfig::parse(bad, base).unwrap();
            assert!(matches!(c.finalize(), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn every_key_is_handled() {
        let defaults = RunConfig::default();
        for k in KEYS {
            let v = match *k {
                "case" => "x",
                "shape" => "sphere c=0,0,0 r=5",
                "schedule" => "joint",
                "mesh" | "protocol" | "field" | "truth_field" | "truth_interface" | "signals" | "predicted_signals" => "f",
                "log10_kappa_max" => "-0.5",
                "t2" | "diffusivity" | "rho" | "half_extent" | "tau_sigma" | "tau_p" | "tau_m" => "1.5",
                "tau_b" => "0.002",
                "alpha" => "0.2",
                "workers" => "1001",
                "log10_kappa_min" => "-6",
                _ => "7",
            };
            let c = RunConfig::parse(&format!("{k} = {v}"), Path::new(".")).unwrap();
            assert_ne!(c, defaults, "{k}");
        }
    }
}
