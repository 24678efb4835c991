//! Reconstruction quality: normalized-signal error, centered Chamfer distance
//! between interface samples, and the fraction of non-manifold edges.

use std::fmt;

use crate::encoding::Protocol;
use crate::error::{Error, Result};
use crate::field::InterfaceSet;
use crate::forward::SignalSet;
use crate::mesh::{Mesh, Point};

/// Mean of `|S/S0 - S*/S0*|^2` over the b>0 acquisitions.
pub fn signal_mse(protocol: &Protocol, predicted: &SignalSet, target: &SignalSet) -> Result<f64> {
    let active = protocol.non_b0();
    if active.is_empty() {
        return Err(Error::InvalidInput("protocol has no b>0 acquisitions".into()));
    }
    for refs in [&predicted.references, &target.references] {
        if refs.iter().any(|r| r.norm() == 0.0) {
            return Err(Error::Numerical("zero b=0 reference signal".into()));
        }
    }
    let sum: f64 = active
        .iter()
        .map(|&a| (predicted.normalized(protocol, a) - target.normalized(protocol, a)).norm_sqr())
        .sum();
    Ok(sum / active.len() as f64)
}

/// One point per interface face, at its centroid, in face order.
pub fn sample_interface_points(mesh: &Mesh, interface: &InterfaceSet) -> Result<Vec<Point>> {
    if interface.is_empty() {
        return Err(Error::EmptyInterface);
    }
    Ok(interface.faces().iter().map(|&f| mesh.face_centroid(f)).collect())
}

fn centered(points: &[Point]) -> Vec<Point> {
    let n = points.len() as f64;
    let mut c = [0.0; 3];
    for p in points {
        for k in 0..3 {
            c[k] += p[k];
        }
    }
    let c = c.map(|v| v / n);
    points.iter().map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]]).collect()
}

fn dist2(a: &Point, b: &Point) -> f64 {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    dx * dx + dy * dy + dz * dz
}

/// Uniform bucket grid for nearest-neighbour queries.
struct BucketGrid<'a> {
    points: &'a [Point],
    origin: Point,
    cell: f64,
    dims: [usize; 3],
    starts: Vec<usize>,
    order: Vec<usize>,
}

impl<'a> BucketGrid<'a> {
    fn new(points: &'a [Point]) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let ext: Vec<f64> = (0..3).map(|k| hi[k] - lo[k]).collect();
        let span = ext.iter().cloned().fold(0.0, f64::max);
        let cell = if span > 0.0 {
            let vol: f64 = ext.iter().map(|e| e.max(span * 1e-3)).product();
            (2.0 * vol / points.len() as f64).cbrt().max(span / 256.0)
        } else {
            1.0
        };
        let dims = [0, 1, 2].map(|k| (ext[k] / cell).floor() as usize + 1);
        let mut grid = BucketGrid {
            points,
            origin: lo,
            cell,
            dims,
            starts: Vec::new(),
            order: Vec::new(),
        };
        let ncell = dims[0] * dims[1] * dims[2];
        let keys: Vec<usize> = points.iter().map(|p| grid.flat(grid.coords(p))).collect();
        let mut counts = vec![0usize; ncell + 1];
        for &k in &keys {
            counts[k + 1] += 1;
        }
        for i in 0..ncell {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut order = vec![0; points.len()];
        for (i, &k) in keys.iter().enumerate() {
            order[fill[k]] = i;
            fill[k] += 1;
        }
        grid.starts = counts;
        grid.order = order;
        grid
    }

    fn coords(&self, p: &Point) -> [usize; 3] {
        [0, 1, 2].map(|k| {
            let c = ((p[k] - self.origin[k]) / self.cell).floor();
            (c.max(0.0) as usize).min(self.dims[k] - 1)
        })
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        (c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]
    }

    fn nearest_dist2(&self, q: &Point) -> f64 {
        let c = self.coords(q);
        let max_ring = *self.dims.iter().max().unwrap();
        let mut best = f64::INFINITY;
        for r in 0..=max_ring {
            let lo = c.map(|v| v as isize - r as isize);
            let hi = c.map(|v| v as isize + r as isize);
            for z in lo[2].max(0)..=hi[2].min(self.dims[2] as isize - 1) {
                for y in lo[1].max(0)..=hi[1].min(self.dims[1] as isize - 1) {
                    let on_shell_yz = z == lo[2] || z == hi[2] || y == lo[1] || y == hi[1];
                    let step = if on_shell_yz { 1 } else { (2 * r).max(1) as usize };
                    let mut x = lo[0];
                    while x <= hi[0] {
                        if x >= 0 && x < self.dims[0] as isize {
                            let cell = self.flat([x as usize, y as usize, z as usize]);
                            for &i in &self.order[self.starts[cell]..self.starts[cell + 1]] {
                                best = best.min(dist2(q, &self.points[i]));
                            }
                        }
                        x += step as isize;
                    }
                }
            }
            // Anything outside ring r lies at least r cells away from the query.
            let reach = r as f64 * self.cell;
            if best <= reach * reach {
                break;
            }
        }
        best
    }
}

fn directed_mean(from: &[Point], to: &[Point]) -> f64 {
    let grid = BucketGrid::new(to);
    from.iter().map(|p| grid.nearest_dist2(p)).sum::<f64>() / from.len() as f64
}

/// Symmetric squared-distance Chamfer distance after centering each set on
/// its own centroid: the sum of the two directed mean nearest distances.
pub fn chamfer_l2(x: &[Point], y: &[Point]) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::EmptyInterface);
    }
    let (x, y) = (centered(x), centered(y));
    Ok(directed_mean(&x, &y) + directed_mean(&y, &x))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BadEdgeStats {
    pub percent: f64,
    /// Edges touched by at least one interface face.
    pub active_edges: usize,
    pub bad_edges: usize,
}

/// Percentage of active edges whose interface-face count differs from 2.
/// With no active edge the percentage is 0 and `active_edges` is 0.
pub fn bad_edge_pct(mesh: &Mesh, interface: &InterfaceSet) -> BadEdgeStats {
    let mut member = vec![false; mesh.num_interior_faces()];
    for &f in interface.faces() {
        member[f] = true;
    }
    let (mut active, mut bad) = (0, 0);
    for e in mesh.edges() {
        let d = e.interior_faces.iter().filter(|&&f| member[f]).count();
        if d > 0 {
            active += 1;
            if d != 2 {
                bad += 1;
            }
        }
    }
    let percent = if active == 0 { 0.0 } else { 100.0 * bad as f64 / active as f64 };
    BadEdgeStats {
        percent,
        active_edges: active,
        bad_edges: bad,
    }
}

pub const CHAMFER_CONVENTION: &str = "centered,sum_of_directed_means,face_centroids";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub case: String,
    pub signal_mse: f64,
    /// `None` when either interface is empty.
    pub chamfer_l2: Option<f64>,
    pub bad_edge_pct: f64,
    pub n_faces: usize,
    pub n_active_edges: usize,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "case,signal_mse,cd_l2,bad_edge_pct,n_faces,n_active_edges";

    /// Compares a reconstructed interface against the reference one.
    pub fn evaluate(
        case: &str,
        mesh: &Mesh,
        reconstructed: &InterfaceSet,
        reference: &InterfaceSet,
        signal_mse: f64,
    ) -> Result<Self> {
        let chamfer = match (
            sample_interface_points(mesh, reconstructed),
            sample_interface_points(mesh, reference),
        ) {
            (Ok(x), Ok(y)) => Some(chamfer_l2(&x, &y)?),
            (Err(Error::EmptyInterface), _) | (_, Err(Error::EmptyInterface)) => None,
            (Err(e), _) | (_, Err(e)) => return Err(e),
        };
        let be = bad_edge_pct(mesh, reconstructed);
        Ok(MetricsReport {
            case: case.to_string(),
            signal_mse,
            chamfer_l2: chamfer,
            bad_edge_pct: be.percent,
            n_faces: reconstructed.len(),
            n_active_edges: be.active_edges,
        })
    }

    fn cd_text(&self) -> String {
        self.chamfer_l2.map_or_else(|| "undefined".to_string(), |v| v.to_string())
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.case,
            self.signal_mse,
            self.cd_text(),
            self.bad_edge_pct,
            self.n_faces,
            self.n_active_edges
        )
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "case={}", self.case)?;
        writeln!(f, "signal_mse={}", self.signal_mse)?;
        writeln!(f, "cd_l2={}", self.cd_text())?;
        writeln!(f, "cd_status={}", if self.chamfer_l2.is_some() { "ok" } else { "undefined" })?;
        writeln!(f, "cd_convention={CHAMFER_CONVENTION}")?;
        writeln!(f, "bad_edge_pct={}", self.bad_edge_pct)?;
        writeln!(f, "n_faces={}", self.n_faces)?;
        write!(f, "n_active_edges={}", self.n_active_edges)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::{axis_directions, Acquisition};
    use crate::mesh::build_ambient_grid;
    use faer::c64;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(x: &[Point], y: &[Point]) -> f64 {
        let (x, y) = (centered(x), centered(y));
        let directed = |a: &[Point], b: &[Point]| {
            a.iter().map(|p| b.iter().map(|q| dist2(p, q)).fold(f64::INFINITY, f64::min)).sum::<f64>() / a.len() as f64
        };
        directed(&x, &y) + directed(&y, &x)
    }

    #[test]
    fn chamfer_hand_cases() {
        let x = [[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        let y = [[0.0, 0.0, 0.0], [4.0, 0.0, 0.0]];
        assert_eq!(chamfer_l2(&x, &y).unwrap(), 2.0);
        assert_eq!(chamfer_l2(&[[1.0, 2.0, 3.0]], &[[-7.0, 0.5, 9.0]]).unwrap(), 0.0);
        assert_eq!(chamfer_l2(&x, &x).unwrap(), 0.0);
        assert!(matches!(chamfer_l2(&[], &y), Err(Error::EmptyInterface)));
    }

    #[test]
    fn chamfer_matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in 0..100 {
            let nx = rng.gen_range(1..=200);
            let ny = rng.gen_range(1..=200);
            // Mix spread-out clouds with nearly planar and clustered ones.
            let flat = case % 3 == 0;
            let mut draw = |n: usize, scale: f64| -> Vec<Point> {
                (0..n)
                    .map(|_| {
                        let z = if flat { 0.0 } else { rng.gen_range(-scale..scale) };
                        [rng.gen_range(-scale..scale), rng.gen_range(-scale..scale), z]
                    })
                    .collect()
            };
            let x = draw(nx, 10.0);
            let y = draw(ny, 1.0 + case as f64 * 0.2);
            assert_eq!(chamfer_l2(&x, &y).unwrap(), brute_force(&x, &y), "case {case}");
        }
    }

    proptest! {
        #[test]
        fn chamfer_symmetric_and_translation_invariant(
            x in prop::collection::vec(prop::array::uniform3(-20.0f64..20.0), 1..40),
            y in prop::collection::vec(prop::array::uniform3(-20.0f64..20.0), 1..40),
            t in prop::array::uniform3(-50.0f64..50.0),
        ) {
            let d = chamfer_l2(&x, &y).unwrap();
            prop_assert_eq!(d, chamfer_l2(&y, &x).unwrap());
            let shifted: Vec<Point> = x.iter().map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]]).collect();
            prop_assert!((chamfer_l2(&shifted, &y).unwrap() - d).abs() <= 1e-9 * (1.0 + d));
        }
    }

    #[test]
    fn centroid_sampling() {
        let mesh = Mesh::new(
            vec![[0.0, 0.0, 0.0], [3.0, 0.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, 3.0], [1.0, 1.0, -3.0]],
            vec![[0, 1, 2, 3], [0, 2, 1, 4]],
        )
        .unwrap();
        assert_eq!(mesh.num_interior_faces(), 1);
        let pts = sample_interface_points(&mesh, &InterfaceSet::new(vec![0], 1e-3)).unwrap();
        assert_eq!(pts.len(), 1);
        for k in 0..3 {
            assert!((pts[0][k] - [1.0, 1.0, 0.0][k]).abs() < 1e-15);
        }
        assert!(matches!(
            sample_interface_points(&mesh, &InterfaceSet::new(vec![], 1e-3)),
            Err(Error::EmptyInterface)
        ));
    }

    fn faces_of_tet(mesh: &Mesh, t: usize) -> Vec<usize> {
        (0..mesh.num_interior_faces())
            .filter(|&f| mesh.interior_faces()[f].tets.contains(&t))
            .collect()
    }

    #[test]
    fn bad_edge_hand_cases() {
        let mesh = build_ambient_grid(3, 13.6).unwrap();
        // The central cell is cube 13; its tets have every face interior.
        let t = 13 * 6;
        let closed = faces_of_tet(&mesh, t);
        assert_eq!(closed.len(), 4);
        let s = bad_edge_pct(&mesh, &InterfaceSet::new(closed.clone(), 1e-3));
        assert_eq!((s.percent, s.active_edges), (0.0, 6));

        let s = bad_edge_pct(&mesh, &InterfaceSet::new(vec![closed[0]], 1e-3));
        assert_eq!((s.percent, s.active_edges), (100.0, 3));

        let s = bad_edge_pct(&mesh, &InterfaceSet::new(vec![closed[0], closed[1]], 1e-3));
        assert_eq!((s.percent, s.active_edges, s.bad_edges), (80.0, 5, 4));

        let s = bad_edge_pct(&mesh, &InterfaceSet::new(vec![], 1e-3));
        assert_eq!((s.percent, s.active_edges), (0.0, 0));

        let mut rev = closed.clone();
        rev.reverse();
        rev.push(closed[0] ^ 1);
        let a = bad_edge_pct(&mesh, &InterfaceSet::new(rev.clone(), 1e-3));
        rev.sort();
        assert_eq!(a, bad_edge_pct(&mesh, &InterfaceSet::new(rev, 1e-3)));
    }

    #[test]
    fn signal_mse_cases() {
        let acqs = vec![
            Acquisition::new([1.0, 0.0, 0.0], 0.0, 10.0, 20.0).unwrap(),
            Acquisition::new([1.0, 0.0, 0.0], 1000.0, 10.0, 20.0).unwrap(),
            Acquisition::new([0.0, 1.0, 0.0], 1000.0, 10.0, 20.0).unwrap(),
        ];
        let p = Protocol::new(acqs).unwrap();
        let a = SignalSet::from_signals(&p, vec![c64::new(2.0, 0.0), c64::new(1.0, 0.0), c64::new(0.4, 0.0)]).unwrap();
        let b = SignalSet::from_signals(&p, vec![c64::new(1.0, 0.0), c64::new(0.4, 0.0), c64::new(0.2, 0.0)]).unwrap();
        assert!((signal_mse(&p, &a, &b).unwrap() - 0.005).abs() < 1e-15);
        assert_eq!(signal_mse(&p, &a, &a).unwrap(), 0.0);
        let scaled = SignalSet::from_signals(&p, a.signals.iter().map(|s| s * 3.5).collect()).unwrap();
        assert!(signal_mse(&p, &scaled, &a).unwrap() < 1e-30);
        let zero = SignalSet::from_signals(&p, vec![c64::new(0.0, 0.0); 3]).unwrap();
        assert!(signal_mse(&p, &zero, &a).is_err());
        let b0_only = Protocol::paper(&axis_directions()).unwrap();
        assert!(b0_only.non_b0().len() == 30);
    }

    #[test]
    fn report_formats() {
        let mesh = build_ambient_grid(3, 13.6).unwrap();
        let closed = faces_of_tet(&mesh, 78);
        let iface = InterfaceSet::new(closed, 1e-3);
        let r = MetricsReport::evaluate("self", &mesh, &iface, &iface, 0.0).unwrap();
        assert_eq!(r.chamfer_l2, Some(0.0));
        assert_eq!(r.csv_row(), "self,0,0,0,4,6");
        let empty = InterfaceSet::new(vec![], 1e-3);
        let r = MetricsReport::evaluate("empty", &mesh, &empty, &iface, 0.25).unwrap();
        assert_eq!(r.csv_row(), "empty,0.25,undefined,0,0,0");
        let text = r.to_string();
        assert!(text.contains("cd_l2=undefined\ncd_status=undefined\n"));
        assert_eq!(text.lines().count(), 8);
    }
}
