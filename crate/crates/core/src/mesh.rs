//! Ambient tetrahedral grid and its incidence tables.
//!
//! Every tetrahedron is its own compartment; the only coupling between
//! compartments happens through interior faces. The incidence tables built
//! here (interior faces, boundary faces, edges with their incident interior
//! faces, and face adjacency through shared edges) are what the assembly,
//! the regularizers and the metrics consume.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub type Point = [f64; 3];

/// Default half extent of the cubic domain, in micrometres.
pub const DEFAULT_HALF_EXTENT: f64 = 13.6;

/// Default cells per axis for desk-scale runs.
pub const DEFAULT_CELLS_PER_AXIS: usize = 10;

/// Local face `i` of a tet is the face opposite local vertex `i`.
pub const LOCAL_FACES: [[usize; 3]; 4] = [[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]];

/// A face shared by exactly two tets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InteriorFace {
    pub tets: [usize; 2],
    pub local_faces: [usize; 2],
    /// Global vertex indices, sorted ascending.
    pub vertices: [usize; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundaryFace {
    pub tet: usize,
    pub local_face: usize,
}

/// A mesh edge together with the interior faces that contain it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Edge {
    pub vertices: [usize; 2],
    pub interior_faces: Vec<usize>,
}

/// Immutable tetrahedral mesh with derived incidence.
#[derive(Debug, Clone)]
pub struct Mesh {
    vertices: Vec<Point>,
    tets: Vec<[usize; 4]>,
    volumes: Vec<f64>,
    interior_faces: Vec<InteriorFace>,
    boundary_faces: Vec<BoundaryFace>,
    edges: Vec<Edge>,
    face_adjacency: Vec<(usize, usize)>,
}

impl Mesh {
    /// Builds a mesh from raw arrays and derives every incidence table.
    ///
    /// Fails on out-of-range vertex indices, tets with non-positive signed
    /// volume, and faces shared by more than two tets.
    pub fn new(vertices: Vec<Point>, tets: Vec<[usize; 4]>) -> Result<Self> {
        let nv = vertices.len();
        let mut volumes = Vec::with_capacity(tets.len());
        for (t, tet) in tets.iter().enumerate() {
            if let Some(&v) = tet.iter().find(|&&v| v >= nv) {
                return Err(Error::Mesh(format!(
                    "tet {t}: vertex index {v} out of range ({nv} vertices)"
                )));
            }
            let vol = signed_volume(&tet_points(&vertices, tet));
            if !(vol > 0.0) {
                return Err(Error::Mesh(format!("tet {t}: non-positive volume {vol:e}")));
            }
            volumes.push(vol);
        }

        let (interior_faces, boundary_faces) = classify_faces(&tets)?;
        let edges = collect_edges(&tets, &interior_faces);
        let face_adjacency = adjacency_from_edges(&edges);

        Ok(Mesh {
            vertices,
            tets,
            volumes,
            interior_faces,
            boundary_faces,
            edges,
            face_adjacency,
        })
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn tets(&self) -> &[[usize; 4]] {
        &self.tets
    }

    pub fn num_tets(&self) -> usize {
        self.tets.len()
    }

    /// Signed volume of each tet; all strictly positive.
    pub fn volumes(&self) -> &[f64] {
        &self.volumes
    }

    pub fn total_volume(&self) -> f64 {
        self.volumes.iter().sum()
    }

    pub fn interior_faces(&self) -> &[InteriorFace] {
        &self.interior_faces
    }

    pub fn num_interior_faces(&self) -> usize {
        self.interior_faces.len()
    }

    pub fn boundary_faces(&self) -> &[BoundaryFace] {
        &self.boundary_faces
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Unordered interior-face pairs `(f, g)` with `f < g` that share an edge.
    pub fn face_adjacency(&self) -> &[(usize, usize)] {
        &self.face_adjacency
    }

    /// Symmetric neighbour lists derived from [`Mesh::face_adjacency`].
    pub fn face_neighbors(&self) -> Vec<Vec<usize>> {
        let mut nbrs = vec![Vec::new(); self.interior_faces.len()];
        for &(f, g) in &self.face_adjacency {
            nbrs[f].push(g);
            nbrs[g].push(f);
        }
        for list in &mut nbrs {
            list.sort_unstable();
        }
        nbrs
    }

    pub fn tet_points(&self, t: usize) -> [Point; 4] {
        tet_points(&self.vertices, &self.tets[t])
    }

    pub fn tet_centroid(&self, t: usize) -> Point {
        centroid(&self.tet_points(t))
    }

    pub fn face_points(&self, f: usize) -> [Point; 3] {
        let [a, b, c] = self.interior_faces[f].vertices;
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn face_centroid(&self, f: usize) -> Point {
        let [a, b, c] = self.face_points(f);
        [
            (a[0] + b[0] + c[0]) / 3.0,
            (a[1] + b[1] + c[1]) / 3.0,
            (a[2] + b[2] + c[2]) / 3.0,
        ]
    }

    pub fn face_area(&self, f: usize) -> f64 {
        triangle_area(&self.face_points(f))
    }

    /// Global vertex indices of local face `local` of tet `t`, in local order.
    pub fn local_face_vertices(&self, t: usize, local: usize) -> [usize; 3] {
        let tet = &self.tets[t];
        LOCAL_FACES[local].map(|i| tet[i])
    }

    /// Axis-aligned bounding box `(min, max)` of the vertex set.
    pub fn bounding_box(&self) -> (Point, Point) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &self.vertices {
            for k in 0..3 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        (lo, hi)
    }
}

/// Structured cube grid of `cells_per_axis`³ cubes on `[-half_extent, half_extent]³`,
/// each cube split into the six Kuhn tets around its main diagonal.
pub fn build_ambient_grid(cells_per_axis: usize, half_extent: f64) -> Result<Mesh> {
    if cells_per_axis == 0 {
        return Err(Error::InvalidInput("cells per axis must be at least 1".into()));
    }
    if !(half_extent > 0.0) || !half_extent.is_finite() {
        return Err(Error::InvalidInput(format!(
            "half extent must be positive and finite, got {half_extent}"
        )));
    }
    let n = cells_per_axis;
    let np = n + 1;
    let coord = |i: usize| half_extent * (2.0 * i as f64 - n as f64) / n as f64;
    let index = |i: usize, j: usize, k: usize| i + np * (j + np * k);

    let mut vertices = Vec::with_capacity(np * np * np);
    for k in 0..np {
        for j in 0..np {
            for i in 0..np {
                vertices.push([coord(i), coord(j), coord(k)]);
            }
        }
    }

    const PERMUTATIONS: [[usize; 3]; 6] =
        [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut tets = Vec::with_capacity(6 * n * n * n);
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                for perm in PERMUTATIONS {
                    // Monotone lattice path 000 -> 111 along the permuted axes.
                    let mut corner = [i, j, k];
                    let mut tet = [index(corner[0], corner[1], corner[2]); 4];
                    for (step, &axis) in perm.iter().enumerate() {
                        corner[axis] += 1;
                        tet[step + 1] = index(corner[0], corner[1], corner[2]);
                    }
                    if signed_volume(&tet_points(&vertices, &tet)) < 0.0 {
                        tet.swap(2, 3);
                    }
                    tets.push(tet);
                }
            }
        }
    }
    Mesh::new(vertices, tets)
}

fn classify_faces(tets: &[[usize; 4]]) -> Result<(Vec<InteriorFace>, Vec<BoundaryFace>)> {
    let mut slots: BTreeMap<[usize; 3], Vec<(usize, usize)>> = BTreeMap::new();
    for (t, tet) in tets.iter().enumerate() {
        for (local, idx) in LOCAL_FACES.iter().enumerate() {
            let mut key = idx.map(|i| tet[i]);
            key.sort_unstable();
            slots.entry(key).or_default().push((t, local));
        }
    }
    let mut interior = Vec::new();
    let mut boundary = Vec::new();
    for (key, owners) in slots {
        match owners.as_slice() {
            [(t, l)] => boundary.push(BoundaryFace {
                tet: *t,
                local_face: *l,
            }),
            [(ta, la), (tb, lb)] => interior.push(InteriorFace {
                tets: [*ta, *tb],
                local_faces: [*la, *lb],
                vertices: key,
            }),
            _ => {
                return Err(Error::Mesh(format!(
                    "face {key:?} shared by {} tets",
                    owners.len()
                )))
            }
        }
    }
    boundary.sort_by_key(|b| (b.tet, b.local_face));
    Ok((interior, boundary))
}

fn collect_edges(tets: &[[usize; 4]], faces: &[InteriorFace]) -> Vec<Edge> {
    let mut map: BTreeMap<[usize; 2], Vec<usize>> = BTreeMap::new();
    for tet in tets {
        for a in 0..4 {
            for b in (a + 1)..4 {
                map.entry(edge_key(tet[a], tet[b])).or_default();
            }
        }
    }
    for (f, face) in faces.iter().enumerate() {
        let [a, b, c] = face.vertices;
        for key in [edge_key(a, b), edge_key(b, c), edge_key(a, c)] {
            map.get_mut(&key)
                .expect("face edge belongs to a tet")
                .push(f);
        }
    }
    map.into_iter()
        .map(|(vertices, interior_faces)| Edge {
            vertices,
            interior_faces,
        })
        .collect()
}

fn adjacency_from_edges(edges: &[Edge]) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for e in edges {
        let fs = &e.interior_faces;
        for i in 0..fs.len() {
            for j in (i + 1)..fs.len() {
                pairs.push((fs[i].min(fs[j]), fs[i].max(fs[j])));
            }
        }
    }
    pairs.sort_unstable();
    pairs.dedup();
    pairs
}

pub(crate) fn edge_key(a: usize, b: usize) -> [usize; 2] {
    if a < b {
        [a, b]
    } else {
        [b, a]
    }
}

pub(crate) fn tet_points(vertices: &[Point], tet: &[usize; 4]) -> [Point; 4] {
    tet.map(|v| vertices[v])
}

pub(crate) fn sub(a: &Point, b: &Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn cross(a: &Point, b: &Point) -> Point {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn dot(a: &Point, b: &Point) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn signed_volume(p: &[Point; 4]) -> f64 {
    let e1 = sub(&p[1], &p[0]);
    let e2 = sub(&p[2], &p[0]);
    let e3 = sub(&p[3], &p[0]);
    dot(&e1, &cross(&e2, &e3)) / 6.0
}

pub fn triangle_area(p: &[Point; 3]) -> f64 {
    let c = cross(&sub(&p[1], &p[0]), &sub(&p[2], &p[0]));
    0.5 * dot(&c, &c).sqrt()
}

pub fn centroid<const N: usize>(p: &[Point; N]) -> Point {
    let mut c = [0.0; 3];
    for q in p {
        for k in 0..3 {
            c[k] += q[k];
        }
    }
    c.map(|x| x / N as f64)
}
