//! Face permeability fields, the tempered log-space sigmoid map from free
//! parameters to permeabilities, ground-truth phantoms and barrier extraction.

use crate::error::{Error, Result};
use crate::mesh::Mesh;
use crate::shapes::ShapeSpec;

pub const DEFAULT_LOG10_KAPPA_MIN: f64 = -5.0;
pub const DEFAULT_LOG10_KAPPA_MAX: f64 = -1.0;
/// Permeability threshold separating barrier faces from open faces (um/ms).
pub const DEFAULT_BARRIER_THRESHOLD: f64 = 1e-3;
pub const GROUND_TRUTH_BARRIER_KAPPA: f64 = 1e-5;
pub const GROUND_TRUTH_OPEN_KAPPA: f64 = 1e-1;

/// Largest |theta / tau| produced when inverting the map; keeps theta finite
/// while landing within a few ulps of the range end points.
const THETA_CLAMP: f64 = 36.0;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log10(kappa) = k_min + (k_max - k_min) * sigmoid(theta / tau)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reparam {
    pub log10_min: f64,
    pub log10_max: f64,
    pub temperature: f64,
}

impl Default for Reparam {
    fn default() -> Self {
        Reparam {
            log10_min: DEFAULT_LOG10_KAPPA_MIN,
            log10_max: DEFAULT_LOG10_KAPPA_MAX,
            temperature: 1.0,
        }
    }
}

impl Reparam {
    pub fn new(log10_min: f64, log10_max: f64, temperature: f64) -> Result<Self> {
        if !(log10_min < log10_max) || !log10_min.is_finite() || !log10_max.is_finite() {
            return Err(Error::InvalidInput(format!(
                "log-permeability bounds must satisfy min < max, got [{log10_min}, {log10_max}]"
            )));
        }
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::InvalidInput(format!(
                "sigmoid temperature must be positive, got {temperature}"
            )));
        }
        Ok(Reparam {
            log10_min,
            log10_max,
            temperature,
        })
    }

    pub fn log_kappa(&self, theta: f64) -> f64 {
        self.log10_min + (self.log10_max - self.log10_min) * sigmoid(theta / self.temperature)
    }

    pub fn kappa(&self, theta: f64) -> f64 {
        10f64.powf(self.log_kappa(theta))
    }

    pub fn dlog_kappa_dtheta(&self, theta: f64) -> f64 {
        let s = sigmoid(theta / self.temperature);
        (self.log10_max - self.log10_min) * s * (1.0 - s) / self.temperature
    }

    pub fn dkappa_dtheta(&self, theta: f64) -> f64 {
        self.kappa(theta) * std::f64::consts::LN_10 * self.dlog_kappa_dtheta(theta)
    }

    pub fn kappa_min(&self) -> f64 {
        10f64.powf(self.log10_min)
    }

    pub fn kappa_max(&self) -> f64 {
        10f64.powf(self.log10_max)
    }

    /// Inverse map; values at or beyond the range ends are pulled to a large
    /// but finite theta.
    pub fn theta_for_kappa(&self, kappa: f64) -> f64 {
        let s = (kappa.log10() - self.log10_min) / (self.log10_max - self.log10_min);
        let s = s.clamp(sigmoid(-THETA_CLAMP), sigmoid(THETA_CLAMP));
        self.temperature * (s / (1.0 - s)).ln()
    }
}

/// Free parameters per interior face plus the permeabilities they induce.
#[derive(Debug, Clone, PartialEq)]
pub struct PermeabilityField {
    reparam: Reparam,
    theta: Vec<f64>,
    kappa: Vec<f64>,
}

impl PermeabilityField {
    pub fn from_theta(reparam: Reparam, theta: Vec<f64>) -> Self {
        let kappa = theta.iter().map(|&t| reparam.kappa(t)).collect();
        PermeabilityField {
            reparam,
            theta,
            kappa,
        }
    }

    /// Every face at `theta = 0`, i.e. the midpoint of the log range.
    pub fn uniform_initial(reparam: Reparam, num_faces: usize) -> Self {
        Self::from_theta(reparam, vec![0.0; num_faces])
    }

    /// Inverts the map face by face. Permeabilities outside the open range are
    /// clamped to its ends.
    pub fn from_kappa(reparam: Reparam, kappa: &[f64]) -> Result<Self> {
        if let Some((f, k)) = kappa.iter().enumerate().find(|(_, k)| !(**k > 0.0) || !k.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "face {f}: permeability must be positive and finite, got {k}"
            )));
        }
        let theta = kappa.iter().map(|&k| reparam.theta_for_kappa(k)).collect();
        Ok(Self::from_theta(reparam, theta))
    }

    pub fn reparam(&self) -> &Reparam {
        &self.reparam
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn kappa(&self) -> &[f64] {
        &self.kappa
    }

    pub fn log_kappa(&self) -> Vec<f64> {
        self.theta.iter().map(|&t| self.reparam.log_kappa(t)).collect()
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn set_theta(&mut self, theta: Vec<f64>) {
        assert_eq!(theta.len(), self.theta.len());
        self.kappa = theta.iter().map(|&t| self.reparam.kappa(t)).collect();
        self.theta = theta;
    }
}

/// Interior faces whose permeability lies strictly below a threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct InterfaceSet {
    faces: Vec<usize>,
    threshold: f64,
}

impl InterfaceSet {
    /// `faces` are sorted and deduplicated.
    pub fn new(mut faces: Vec<usize>, threshold: f64) -> Self {
        faces.sort_unstable();
        faces.dedup();
        InterfaceSet { faces, threshold }
    }

    pub fn faces(&self) -> &[usize] {
        &self.faces
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn len(&self) -> usize {
        self.faces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn contains(&self, face: usize) -> bool {
        self.faces.binary_search(&face).is_ok()
    }
}

/// Inside/outside flag per tet from the sign of the SDF at its centroid.
pub fn classify_tets(mesh: &Mesh, shape: &ShapeSpec) -> Vec<bool> {
    (0..mesh.num_tets())
        .map(|t| shape.contains(&mesh.tet_centroid(t)))
        .collect()
}

/// Ground-truth field: faces separating an inside tet from an outside tet
/// become barriers, every other interior face stays open.
pub fn generate_ground_truth(
    mesh: &Mesh,
    shape: &ShapeSpec,
    reparam: Reparam,
) -> Result<PermeabilityField> {
    shape.check_inside(mesh)?;
    let inside = classify_tets(mesh, shape);
    let kappa: Vec<f64> = mesh
        .interior_faces()
        .iter()
        .map(|f| {
            if inside[f.tets[0]] != inside[f.tets[1]] {
                GROUND_TRUTH_BARRIER_KAPPA
            } else {
                GROUND_TRUTH_OPEN_KAPPA
            }
        })
        .collect();
    PermeabilityField::from_kappa(reparam, &kappa)
}

/// Faces with `kappa < tau_b` (strict).
pub fn extract_interface(field: &PermeabilityField, tau_b: f64) -> Result<InterfaceSet> {
    let r = field.reparam();
    if !(tau_b > r.kappa_min() && tau_b < r.kappa_max()) {
        return Err(Error::InvalidInput(format!(
            "threshold {tau_b} outside the open permeability range ({}, {})",
            r.kappa_min(),
            r.kappa_max()
        )));
    }
    let faces = field
        .kappa()
        .iter()
        .enumerate()
        .filter(|(_, &k)| k < tau_b)
        .map(|(f, _)| f)
        .collect();
    Ok(InterfaceSet::new(faces, tau_b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_ambient_grid;

    #[test]
    fn reparam_reference_values() {
        let r = Reparam::default();
        assert_eq!(r.log_kappa(0.0), -3.0);
        assert_eq!(r.kappa(0.0), 1e-3);
        assert!((r.log_kappa(60.0) + 1.0).abs() < 1e-12);
        assert!((r.log_kappa(-60.0) + 5.0).abs() < 1e-12);
        // -5 + 4 / (1 + e^-1)
        let logistic_one = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((r.log_kappa(1.0) - (-5.0 + 4.0 * logistic_one)).abs() < 1e-15);
        assert!((r.log_kappa(1.0) + 2.07577).abs() < 1e-5);
    }

    #[test]
    fn reparam_derivative_matches_central_difference() {
        let r = Reparam::new(-5.0, -1.0, 0.7).unwrap();
        for &t in &[-3.0, -0.4, 0.0, 0.9, 2.5] {
            let h = 1e-6;
            let fd = (r.kappa(t + h) - r.kappa(t - h)) / (2.0 * h);
            assert!((fd - r.dkappa_dtheta(t)).abs() <= 1e-7 * fd.abs().max(1e-12));
        }
    }

    #[test]
    fn kappa_stays_strictly_inside_bounds() {
        let r = Reparam::default();
        for &t in &[-30.0, -5.0, 0.0, 5.0, 30.0] {
            let k = r.kappa(t);
            assert!(k > 1e-5 && k < 1e-1, "theta {t} -> {k}");
        }
    }

    #[test]
    fn inverse_map_round_trips() {
        let r = Reparam::default();
        for &k in &[2e-5, 1e-4, 1e-3, 3.3e-2, 9e-2] {
            let back = r.kappa(r.theta_for_kappa(k));
            assert!((back - k).abs() <= 1e-12 * k);
        }
        let lo = r.kappa(r.theta_for_kappa(1e-5));
        assert!((lo - 1e-5).abs() <= 1e-13 && r.theta_for_kappa(1e-5).is_finite());
    }

    #[test]
    fn initial_field_yields_empty_interface() {
        let field = PermeabilityField::uniform_initial(Reparam::default(), 50);
        assert!(field.kappa().iter().all(|&k| k == 1e-3));
        assert!(extract_interface(&field, 1e-3).unwrap().is_empty());
    }

    #[test]
    fn single_barrier_face_is_extracted() {
        let mut kappa = vec![1e-1; 10];
        kappa[4] = 1e-5;
        let field = PermeabilityField::from_kappa(Reparam::default(), &kappa).unwrap();
        assert_eq!(extract_interface(&field, 1e-3).unwrap().faces(), &[4]);
        assert!(extract_interface(&field, 1e-5).is_err());
        assert!(extract_interface(&field, 0.5).is_err());
    }

    #[test]
    fn ground_truth_marks_straddling_faces() {
        let mesh = build_ambient_grid(4, 13.6).unwrap();
        let shape = ShapeSpec::sphere([0.0; 3], 8.0);
        let field = generate_ground_truth(&mesh, &shape, Reparam::default()).unwrap();
        for (f, face) in mesh.interior_faces().iter().enumerate() {
            let da = shape.sdf(&mesh.tet_centroid(face.tets[0]));
            let db = shape.sdf(&mesh.tet_centroid(face.tets[1]));
            let k = field.kappa()[f];
            if (da < 0.0) != (db < 0.0) {
                assert!((k - 1e-5).abs() < 1e-12, "face {f}: {k}");
            } else {
                assert!((k - 1e-1).abs() < 1e-12, "face {f}: {k}");
            }
        }
    }

    #[test]
    fn degenerate_shape_rejected_by_ground_truth() {
        let mesh = build_ambient_grid(2, 13.6).unwrap();
        let shape = ShapeSpec::sphere([0.0; 3], 0.0);
        assert!(generate_ground_truth(&mesh, &shape, Reparam::default()).is_err());
    }
}
