//! Implicit phantom shapes used to build ground-truth barrier fields.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::mesh::{cross, dot, sub, Mesh, Point};

/// Samples used to approximate a bent axon centreline by a polyline.
const BEND_SEGMENTS: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub enum ShapeSpec {
    Sphere {
        center: Point,
        radius: f64,
    },
    /// Capped cylinder around the segment `start -> end`.
    Cylinder {
        start: Point,
        end: Point,
        radius: f64,
    },
    /// Tube around the quadratic Bezier curve with the given control points.
    BentCylinder {
        control: [Point; 3],
        radius: f64,
    },
    Torus {
        center: Point,
        axis: Point,
        major_radius: f64,
        minor_radius: f64,
    },
    Union(Vec<ShapeSpec>),
}

impl ShapeSpec {
    pub fn sphere(center: Point, radius: f64) -> Self {
        ShapeSpec::Sphere { center, radius }
    }

    pub fn cylinder(start: Point, end: Point, radius: f64) -> Self {
        ShapeSpec::Cylinder { start, end, radius }
    }

    pub fn torus(center: Point, axis: Point, major_radius: f64, minor_radius: f64) -> Self {
        ShapeSpec::Torus {
            center,
            axis,
            major_radius,
            minor_radius,
        }
    }

    /// Two bent axons crossing near the centre of a 27.2 um domain.
    pub fn two_axon_crossing() -> Self {
        ShapeSpec::Union(vec![
            ShapeSpec::BentCylinder {
                control: [[-10.0, -3.0, -2.0], [0.0, 1.0, 0.0], [10.0, -3.0, 2.0]],
                radius: 3.0,
            },
            ShapeSpec::BentCylinder {
                control: [[2.0, -10.0, -2.0], [-1.0, 0.0, 3.0], [2.0, 10.0, -2.0]],
                radius: 3.0,
            },
        ])
    }

    /// Signed distance: negative inside, positive outside.
    pub fn sdf(&self, x: &Point) -> f64 {
        match self {
            ShapeSpec::Sphere { center, radius } => norm(&sub(x, center)) - radius,
            ShapeSpec::Cylinder { start, end, radius } => capped_cylinder_sdf(x, start, end, *radius),
            ShapeSpec::BentCylinder { control, radius } => {
                let pts = bezier_polyline(control);
                pts.windows(2)
                    .map(|w| segment_distance(x, &w[0], &w[1]))
                    .fold(f64::INFINITY, f64::min)
                    - radius
            }
            ShapeSpec::Torus {
                center,
                axis,
                major_radius,
                minor_radius,
            } => {
                let a = normalize(axis);
                let q = sub(x, center);
                let h = dot(&q, &a);
                let radial = norm(&[q[0] - h * a[0], q[1] - h * a[1], q[2] - h * a[2]]);
                ((radial - major_radius).powi(2) + h * h).sqrt() - minor_radius
            }
            ShapeSpec::Union(parts) => parts.iter().map(|s| s.sdf(x)).fold(f64::INFINITY, f64::min),
        }
    }

    pub fn contains(&self, x: &Point) -> bool {
        self.sdf(x) < 0.0
    }

    /// Conservative axis-aligned bounding box.
    pub fn bounding_box(&self) -> (Point, Point) {
        let pad = |lo: Point, hi: Point, r: f64| (lo.map(|v| v - r), hi.map(|v| v + r));
        match self {
            ShapeSpec::Sphere { center, radius } => pad(*center, *center, *radius),
            ShapeSpec::Cylinder { start, end, radius } => {
                let (lo, hi) = hull(&[*start, *end]);
                pad(lo, hi, *radius)
            }
            ShapeSpec::BentCylinder { control, radius } => {
                let (lo, hi) = hull(control);
                pad(lo, hi, *radius)
            }
            ShapeSpec::Torus {
                center,
                major_radius,
                minor_radius,
                ..
            } => pad(*center, *center, major_radius + minor_radius),
            ShapeSpec::Union(parts) => {
                let mut lo = [f64::INFINITY; 3];
                let mut hi = [f64::NEG_INFINITY; 3];
                for p in parts {
                    let (a, b) = p.bounding_box();
                    for k in 0..3 {
                        lo[k] = lo[k].min(a[k]);
                        hi[k] = hi[k].max(b[k]);
                    }
                }
                (lo, hi)
            }
        }
    }

    /// Rejects degenerate parameters (zero radii, zero-length axes, empty unions).
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInput(msg));
        let finite = |p: &Point| p.iter().all(|v| v.is_finite());
        match self {
            ShapeSpec::Sphere { center, radius } => {
                if !finite(center) || !(*radius > 0.0) || !radius.is_finite() {
                    return bad(format!("degenerate sphere (radius {radius})"));
                }
            }
            ShapeSpec::Cylinder { start, end, radius } => {
                if !finite(start) || !finite(end) || !(*radius > 0.0) || !radius.is_finite() {
                    return bad(format!("degenerate cylinder (radius {radius})"));
                }
                if norm(&sub(end, start)) == 0.0 {
                    return bad("cylinder axis has zero length".into());
                }
            }
            ShapeSpec::BentCylinder { control, radius } => {
                if !control.iter().all(finite) || !(*radius > 0.0) || !radius.is_finite() {
                    return bad(format!("degenerate bent cylinder (radius {radius})"));
                }
                if norm(&sub(&control[2], &control[0])) == 0.0 {
                    return bad("bent cylinder end points coincide".into());
                }
            }
            ShapeSpec::Torus {
                center,
                axis,
                major_radius,
                minor_radius,
            } => {
                if !finite(center) || !finite(axis) || norm(axis) == 0.0 {
                    return bad("torus needs a finite centre and non-zero axis".into());
                }
                if !(*major_radius > 0.0 && *minor_radius > 0.0)
                    || !major_radius.is_finite()
                    || !minor_radius.is_finite()
                {
                    return bad(format!(
                        "degenerate torus (radii {major_radius}, {minor_radius})"
                    ));
                }
            }
            ShapeSpec::Union(parts) => {
                if parts.is_empty() {
                    return bad("empty shape union".into());
                }
                for p in parts {
                    p.validate()?;
                }
            }
        }
        Ok(())
    }

    /// Validates the parameters and checks the shape lies inside the mesh bounds.
    pub fn check_inside(&self, mesh: &Mesh) -> Result<()> {
        self.validate()?;
        let (lo, hi) = self.bounding_box();
        let (mlo, mhi) = mesh.bounding_box();
        for k in 0..3 {
            if lo[k] < mlo[k] || hi[k] > mhi[k] {
                return Err(Error::InvalidInput(format!(
                    "shape extends outside the domain along axis {k}: [{}, {}] vs [{}, {}]",
                    lo[k], hi[k], mlo[k], mhi[k]
                )));
            }
        }
        Ok(())
    }
}

fn norm(a: &Point) -> f64 {
    dot(a, a).sqrt()
}

fn normalize(a: &Point) -> Point {
    let n = norm(a);
    a.map(|v| v / n)
}

fn hull(pts: &[Point]) -> (Point, Point) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in pts {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    (lo, hi)
}

fn segment_distance(x: &Point, a: &Point, b: &Point) -> f64 {
    let ab = sub(b, a);
    let ax = sub(x, a);
    let t = (dot(&ax, &ab) / dot(&ab, &ab)).clamp(0.0, 1.0);
    norm(&[ax[0] - t * ab[0], ax[1] - t * ab[1], ax[2] - t * ab[2]])
}

fn capped_cylinder_sdf(x: &Point, a: &Point, b: &Point, r: f64) -> f64 {
    let ba = sub(b, a);
    let len = norm(&ba);
    let axis = ba.map(|v| v / len);
    let pa = sub(x, a);
    let along = dot(&pa, &axis);
    let radial = norm(&cross(&pa, &axis));
    let dr = radial - r;
    let dz = (along - 0.5 * len).abs() - 0.5 * len;
    let outside = (dr.max(0.0).powi(2) + dz.max(0.0).powi(2)).sqrt();
    outside + dr.max(dz).min(0.0)
}

fn bezier_polyline(c: &[Point; 3]) -> Vec<Point> {
    (0..=BEND_SEGMENTS)
        .map(|i| {
            let t = i as f64 / BEND_SEGMENTS as f64;
            let (w0, w1, w2) = ((1.0 - t) * (1.0 - t), 2.0 * t * (1.0 - t), t * t);
            [0, 1, 2].map(|k| w0 * c[0][k] + w1 * c[1][k] + w2 * c[2][k])
        })
        .collect()
}

impl fmt::Display for ShapeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = |v: &Point| format!("{},{},{}", v[0], v[1], v[2]);
        match self {
            ShapeSpec::Sphere { center, radius } => write!(f, "sphere c={} r={}", p(center), radius),
            ShapeSpec::Cylinder { start, end, radius } => {
                write!(f, "cylinder p={} q={} r={}", p(start), p(end), radius)
            }
            ShapeSpec::BentCylinder { control, radius } => write!(
                f,
                "bent p0={} p1={} p2={} r={}",
                p(&control[0]),
                p(&control[1]),
                p(&control[2]),
                radius
            ),
            ShapeSpec::Torus {
                center,
                axis,
                major_radius,
                minor_radius,
            } => write!(
                f,
                "torus c={} axis={} R={} r={}",
                p(center),
                p(axis),
                major_radius,
                minor_radius
            ),
            ShapeSpec::Union(parts) => {
                for (i, s) in parts.iter().enumerate() {
                    if i > 0 {
                        f.write_str(" + ")?;
                    }
                    write!(f, "{s}")?;
                }
                Ok(())
            }
        }
    }
}

/// Parses `kind key=value ...` terms joined by `+`, e.g.
/// `sphere c=0,0,0 r=8` or `cylinder p=0,0,-9 q=0,0,9 r=4 + sphere c=5,5,5 r=2`.
/// The names `two_axon` and `torus_default` expand to presets.
impl FromStr for ShapeSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let terms: Vec<&str> = s.split('+').map(str::trim).collect();
        let mut parts = terms
            .iter()
            .map(|t| parse_term(t))
            .collect::<Result<Vec<_>>>()?;
        let shape = if parts.len() == 1 {
            parts.pop().unwrap()
        } else {
            ShapeSpec::Union(parts)
        };
        shape.validate()?;
        Ok(shape)
    }
}

fn parse_term(term: &str) -> Result<ShapeSpec> {
    let mut tokens = term.split_whitespace();
    let kind = tokens
        .next()
        .ok_or_else(|| Error::Config("empty shape term".into()))?;
    let mut kv = std::collections::HashMap::new();
    for tok in tokens {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("shape token `{tok}` is not key=value")))?;
        if kv.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!("duplicate shape key `{k}`")));
        }
    }
    let mut take = |k: &str| {
        kv.remove(k)
            .ok_or_else(|| Error::Config(format!("{kind}: missing `{k}`")))
    };
    let scalar = |s: String| {
        s.parse::<f64>()
            .map_err(|_| Error::Config(format!("`{s}` is not a number")))
    };
    let point = |s: String| -> Result<Point> {
        let v: Vec<f64> = s
            .split(',')
            .map(|c| c.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("`{s}` is not a point x,y,z")))?;
        <[f64; 3]>::try_from(v).map_err(|_| Error::Config(format!("`{s}` needs 3 components")))
    };
    let shape = match kind {
        "sphere" => ShapeSpec::Sphere {
            center: point(take("c")?)?,
            radius: scalar(take("r")?)?,
        },
        "cylinder" => ShapeSpec::Cylinder {
            start: point(take("p")?)?,
            end: point(take("q")?)?,
            radius: scalar(take("r")?)?,
        },
        "bent" => ShapeSpec::BentCylinder {
            control: [point(take("p0")?)?, point(take("p1")?)?, point(take("p2")?)?],
            radius: scalar(take("r")?)?,
        },
        "torus" => ShapeSpec::Torus {
            center: point(take("c")?)?,
            axis: point(take("axis")?)?,
            major_radius: scalar(take("R")?)?,
            minor_radius: scalar(take("r")?)?,
        },
        "two_axon" => ShapeSpec::two_axon_crossing(),
        "torus_default" => ShapeSpec::torus([0.0; 3], [0.0, 0.0, 1.0], 7.0, 3.5),
        other => return Err(Error::Config(format!("unknown shape kind `{other}`"))),
    };
    if let Some(k) = kv.keys().next() {
        return Err(Error::Config(format!("{kind}: unknown key `{k}`")));
    }
    Ok(shape)
}
