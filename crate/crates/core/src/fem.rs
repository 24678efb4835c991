//! P1 finite-element operators on per-tet duplicated degrees of freedom.
//!
//! Mass, stiffness, relaxation and dephasing act inside a single tet, so they
//! are stored as one dense 4x4 block per tet. The only inter-tet operator is
//! the permeability coupling `B(kappa) = sum_f kappa_f B_f`, kept as one
//! stencil per interior face.

use faer::{Mat, MatMut, MatRef};

use crate::error::{Error, Result};
use crate::mesh::{cross, dot, sub, Mesh, Point, LOCAL_FACES};

/// Tets smaller than this (um^3) are rejected as degenerate.
pub const MIN_TET_VOLUME: f64 = 1e-12;
/// Tolerance for pairing the two copies of a face vertex (um).
pub const VERTEX_MATCH_TOL: f64 = 1e-9;

pub type Block = [[f64; 4]; 4];

/// `(tet, local vertex) -> 4 * tet + local`. Nothing is shared between tets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DofMap {
    num_tets: usize,
}

impl DofMap {
    pub fn new(mesh: &Mesh) -> Self {
        DofMap {
            num_tets: mesh.num_tets(),
        }
    }

    #[inline]
    pub fn dof(&self, tet: usize, local: usize) -> usize {
        debug_assert!(tet < self.num_tets && local < 4);
        4 * tet + local
    }

    pub fn tet_dofs(&self, tet: usize) -> [usize; 4] {
        [0, 1, 2, 3].map(|l| self.dof(tet, l))
    }

    pub fn len(&self) -> usize {
        4 * self.num_tets
    }

    pub fn is_empty(&self) -> bool {
        self.num_tets == 0
    }

    pub fn num_tets(&self) -> usize {
        self.num_tets
    }
}

/// Symmetric operator made of independent 4x4 blocks, one per tet.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockDiagonal {
    blocks: Vec<Block>,
}

impl BlockDiagonal {
    pub fn from_blocks(blocks: Vec<Block>) -> Self {
        BlockDiagonal { blocks }
    }

    pub fn zeros(num_tets: usize) -> Self {
        BlockDiagonal {
            blocks: vec![[[0.0; 4]; 4]; num_tets],
        }
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn dim(&self) -> usize {
        4 * self.blocks.len()
    }

    pub fn scaled(&self, s: f64) -> Self {
        BlockDiagonal {
            blocks: self
                .blocks
                .iter()
                .map(|b| b.map(|row| row.map(|v| v * s)))
                .collect(),
        }
    }

    pub fn sum_entries(&self) -> f64 {
        self.blocks.iter().flatten().flatten().sum()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.dim()];
        self.apply_into(x, &mut y);
        y
    }

    pub fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.dim());
        assert_eq!(y.len(), self.dim());
        for (t, b) in self.blocks.iter().enumerate() {
            let xs = &x[4 * t..4 * t + 4];
            for i in 0..4 {
                y[4 * t + i] = b[i][0] * xs[0] + b[i][1] * xs[1] + b[i][2] * xs[2] + b[i][3] * xs[3];
            }
        }
    }

    /// Column-wise product with a dense `dim x k` matrix.
    pub fn apply_mat(&self, x: MatRef<'_, f64>) -> Mat<f64> {
        let mut y = Mat::zeros(x.nrows(), x.ncols());
        self.apply_mat_into(x, y.as_mut());
        y
    }

    pub fn apply_mat_into(&self, x: MatRef<'_, f64>, mut y: MatMut<'_, f64>) {
        assert_eq!(x.nrows(), self.dim());
        for c in 0..x.ncols() {
            let xc = x.col(c);
            let mut yc = y.as_mut().col_mut(c);
            for (t, b) in self.blocks.iter().enumerate() {
                let xs = [xc[4 * t], xc[4 * t + 1], xc[4 * t + 2], xc[4 * t + 3]];
                for i in 0..4 {
                    yc[4 * t + i] =
                        b[i][0] * xs[0] + b[i][1] * xs[1] + b[i][2] * xs[2] + b[i][3] * xs[3];
                }
            }
        }
    }

    /// `(row, col, value)` for every stored entry.
    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::with_capacity(16 * self.blocks.len());
        for (t, b) in self.blocks.iter().enumerate() {
            for i in 0..4 {
                for j in 0..4 {
                    out.push((4 * t + i, 4 * t + j, b[i][j]));
                }
            }
        }
        out
    }
}

/// Physical constants of the forward model, in the um / ms / mT unit system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicalParams {
    /// Isotropic intrinsic diffusivity (um^2/ms).
    pub diffusivity: f64,
    /// Transverse relaxation time (ms); infinity disables relaxation.
    pub t2: f64,
    /// Initial spin density.
    pub rho: f64,
    /// Gyromagnetic ratio (rad / (ms mT)).
    pub gamma: f64,
}

pub const GAMMA_PROTON: f64 = 267.51525;

impl Default for PhysicalParams {
    fn default() -> Self {
        PhysicalParams {
            diffusivity: 2.0,
            t2: f64::INFINITY,
            rho: 1.0,
            gamma: GAMMA_PROTON,
        }
    }
}

/// Tet geometry needed by the local element matrices.
struct TetGeometry {
    volume: f64,
    /// Gradients of the barycentric coordinates.
    grads: [Point; 4],
}

fn tet_geometry(p: &[Point; 4], tet: usize) -> Result<TetGeometry> {
    let e1 = sub(&p[1], &p[0]);
    let e2 = sub(&p[2], &p[0]);
    let e3 = sub(&p[3], &p[0]);
    let det = dot(&e1, &cross(&e2, &e3));
    let volume = det / 6.0;
    if !(volume >= MIN_TET_VOLUME) {
        return Err(Error::Mesh(format!("tet {tet}: degenerate volume {volume:e}")));
    }
    // Rows of the inverse Jacobian are the gradients of lambda_1..lambda_3.
    let g1 = cross(&e2, &e3).map(|v| v / det);
    let g2 = cross(&e3, &e1).map(|v| v / det);
    let g3 = cross(&e1, &e2).map(|v| v / det);
    let g0 = [0, 1, 2].map(|k| -(g1[k] + g2[k] + g3[k]));
    Ok(TetGeometry {
        volume,
        grads: [g0, g1, g2, g3],
    })
}

pub fn assemble_mass(mesh: &Mesh, dofs: &DofMap) -> Result<BlockDiagonal> {
    debug_assert_eq!(dofs.num_tets(), mesh.num_tets());
    let mut blocks = Vec::with_capacity(mesh.num_tets());
    for t in 0..mesh.num_tets() {
        let g = tet_geometry(&mesh.tet_points(t), t)?;
        let v = g.volume / 20.0;
        let mut b = [[v; 4]; 4];
        for (i, row) in b.iter_mut().enumerate() {
            row[i] = 2.0 * v;
        }
        blocks.push(b);
    }
    Ok(BlockDiagonal::from_blocks(blocks))
}

pub fn assemble_stiffness(mesh: &Mesh, dofs: &DofMap, diffusivity: f64) -> Result<BlockDiagonal> {
    debug_assert_eq!(dofs.num_tets(), mesh.num_tets());
    if !(diffusivity > 0.0) || !diffusivity.is_finite() {
        return Err(Error::InvalidInput(format!(
            "diffusivity must be positive, got {diffusivity}"
        )));
    }
    let mut blocks = Vec::with_capacity(mesh.num_tets());
    for t in 0..mesh.num_tets() {
        let g = tet_geometry(&mesh.tet_points(t), t)?;
        let mut b = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                b[i][j] = diffusivity * g.volume * dot(&g.grads[i], &g.grads[j]);
            }
        }
        blocks.push(b);
    }
    Ok(BlockDiagonal::from_blocks(blocks))
}

/// Coordinate-weighted mass matrices `(J_k)_ij = int phi_i phi_j x_k`.
pub fn assemble_dephasing(mesh: &Mesh, dofs: &DofMap) -> Result<[BlockDiagonal; 3]> {
    debug_assert_eq!(dofs.num_tets(), mesh.num_tets());
    let mut out: [Vec<Block>; 3] = Default::default();
    for t in 0..mesh.num_tets() {
        let p = mesh.tet_points(t);
        let vol = tet_geometry(&p, t)?.volume;
        for (k, blocks) in out.iter_mut().enumerate() {
            let mut b = [[0.0; 4]; 4];
            for i in 0..4 {
                for j in 0..4 {
                    let mut acc = 0.0;
                    for (l, pl) in p.iter().enumerate() {
                        acc += pl[k] * cubic_moment(i, j, l);
                    }
                    b[i][j] = vol * acc;
                }
            }
            blocks.push(b);
        }
    }
    Ok(out.map(BlockDiagonal::from_blocks))
}

/// `int lambda_i lambda_j lambda_l / |T|` over a tet.
fn cubic_moment(i: usize, j: usize, l: usize) -> f64 {
    match (i == j, j == l, i == l) {
        (true, true, _) => 1.0 / 20.0,
        (false, false, false) => 1.0 / 120.0,
        _ => 1.0 / 60.0,
    }
}

/// `R = M / T2`; all zeros when `T2` is infinite.
pub fn assemble_relaxation(mass: &BlockDiagonal, t2: f64) -> Result<BlockDiagonal> {
    if t2.is_nan() || t2 <= 0.0 {
        return Err(Error::InvalidInput(format!("T2 must be positive, got {t2}")));
    }
    if t2.is_infinite() {
        return Ok(BlockDiagonal::zeros(mass.blocks().len()));
    }
    Ok(mass.scaled(1.0 / t2))
}

/// Every tet-local operator of the semi-discrete system.
#[derive(Debug, Clone)]
pub struct OperatorSet {
    pub mass: BlockDiagonal,
    pub stiffness: BlockDiagonal,
    pub relaxation: BlockDiagonal,
    pub dephasing: [BlockDiagonal; 3],
    pub params: PhysicalParams,
}

impl OperatorSet {
    pub fn assemble(mesh: &Mesh, params: PhysicalParams) -> Result<Self> {
        let dofs = DofMap::new(mesh);
        let mass = assemble_mass(mesh, &dofs)?;
        let stiffness = assemble_stiffness(mesh, &dofs, params.diffusivity)?;
        let relaxation = assemble_relaxation(&mass, params.t2)?;
        let dephasing = assemble_dephasing(mesh, &dofs)?;
        Ok(OperatorSet {
            mass,
            stiffness,
            relaxation,
            dephasing,
            params,
        })
    }

    pub fn dim(&self) -> usize {
        self.mass.dim()
    }

    /// `1/T2`, zero without relaxation.
    pub fn relaxation_rate(&self) -> f64 {
        if self.params.t2.is_infinite() {
            0.0
        } else {
            1.0 / self.params.t2
        }
    }
}

/// Robin exchange stencil of one interior face.
///
/// `dofs[0][p]` and `dofs[1][p]` are the two copies of the same geometric
/// vertex on either side of the face.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaceCoupling {
    pub dofs: [[usize; 3]; 2],
    pub area: f64,
}

impl FaceCoupling {
    /// Consistent P1 mass matrix of the face triangle.
    pub fn face_mass(&self) -> [[f64; 3]; 3] {
        let a = self.area / 12.0;
        [[2.0 * a, a, a], [a, 2.0 * a, a], [a, a, 2.0 * a]]
    }

    /// `B_f` as a dense 6x6 stencil over `[dofs[0], dofs[1]]`.
    pub fn stencil(&self) -> ([usize; 6], [[f64; 6]; 6]) {
        let s = self.face_mass();
        let idx = [
            self.dofs[0][0],
            self.dofs[0][1],
            self.dofs[0][2],
            self.dofs[1][0],
            self.dofs[1][1],
            self.dofs[1][2],
        ];
        let mut b = [[0.0; 6]; 6];
        for p in 0..3 {
            for q in 0..3 {
                b[p][q] = s[p][q];
                b[p + 3][q + 3] = s[p][q];
                b[p][q + 3] = -s[p][q];
                b[p + 3][q] = -s[p][q];
            }
        }
        (idx, b)
    }
}

/// Per-face stencils `B_f`, independent of the permeabilities.
#[derive(Debug, Clone)]
pub struct CouplingStructure {
    faces: Vec<FaceCoupling>,
    dim: usize,
}

impl CouplingStructure {
    pub fn build(mesh: &Mesh, dofs: &DofMap) -> Result<Self> {
        let verts = mesh.vertices();
        let mut faces = Vec::with_capacity(mesh.num_interior_faces());
        for (f, face) in mesh.interior_faces().iter().enumerate() {
            let [ta, tb] = face.tets;
            let la = LOCAL_FACES[face.local_faces[0]];
            let lb = LOCAL_FACES[face.local_faces[1]];
            let tet_a = mesh.tets()[ta];
            let tet_b = mesh.tets()[tb];
            let mut paired = [[0usize; 3]; 2];
            for (p, &i) in la.iter().enumerate() {
                let xa = verts[tet_a[i]];
                let j = lb
                    .iter()
                    .copied()
                    .find(|&j| {
                        let d = sub(&xa, &verts[tet_b[j]]);
                        dot(&d, &d).sqrt() <= VERTEX_MATCH_TOL
                    })
                    .ok_or_else(|| {
                        Error::Mesh(format!(
                            "face {f}: vertex {} of tet {ta} has no coincident partner in tet {tb}",
                            tet_a[i]
                        ))
                    })?;
                paired[0][p] = dofs.dof(ta, i);
                paired[1][p] = dofs.dof(tb, j);
            }
            faces.push(FaceCoupling {
                dofs: paired,
                area: mesh.face_area(f),
            });
        }
        Ok(CouplingStructure {
            faces,
            dim: dofs.len(),
        })
    }

    pub fn faces(&self) -> &[FaceCoupling] {
        &self.faces
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `y = B(kappa) x`, accumulated face by face on the jump `x_A - x_B`,
    /// so constant vectors map to exactly zero.
    pub fn apply(&self, kappa: &[f64], x: &[f64]) -> Vec<f64> {
        assert_eq!(kappa.len(), self.faces.len());
        assert_eq!(x.len(), self.dim);
        let mut y = vec![0.0; self.dim];
        for (face, &k) in self.faces.iter().zip(kappa) {
            let s = face.face_mass();
            let jump = [0, 1, 2].map(|p| x[face.dofs[0][p]] - x[face.dofs[1][p]]);
            for p in 0..3 {
                let v = k * (s[p][0] * jump[0] + s[p][1] * jump[1] + s[p][2] * jump[2]);
                y[face.dofs[0][p]] += v;
                y[face.dofs[1][p]] -= v;
            }
        }
        y
    }

    /// `B(kappa) U` for a dense `dim x k` matrix.
    pub fn apply_mat(&self, kappa: &[f64], u: MatRef<'_, f64>) -> Mat<f64> {
        assert_eq!(kappa.len(), self.faces.len());
        assert_eq!(u.nrows(), self.dim);
        let mut out = Mat::<f64>::zeros(u.nrows(), u.ncols());
        for c in 0..u.ncols() {
            let uc = u.col(c);
            let mut oc = out.as_mut().col_mut(c);
            for (face, &k) in self.faces.iter().zip(kappa) {
                let s = face.face_mass();
                let jump = [0, 1, 2].map(|p| uc[face.dofs[0][p]] - uc[face.dofs[1][p]]);
                for p in 0..3 {
                    let v = k * (s[p][0] * jump[0] + s[p][1] * jump[1] + s[p][2] * jump[2]);
                    oc[face.dofs[0][p]] += v;
                    oc[face.dofs[1][p]] -= v;
                }
            }
        }
        out
    }

    /// `d/dkappa_f <G, U^T B(kappa) U>` for every face, given `W = U G`.
    pub fn face_sensitivities(&self, u: MatRef<'_, f64>, w: MatRef<'_, f64>) -> Vec<f64> {
        assert_eq!(u.nrows(), self.dim);
        assert_eq!(w.nrows(), self.dim);
        assert_eq!(u.ncols(), w.ncols());
        let n = u.ncols();
        let mut du = vec![[0.0f64; 3]; n];
        let mut dw = vec![[0.0f64; 3]; n];
        self.faces
            .iter()
            .map(|face| {
                for c in 0..n {
                    for p in 0..3 {
                        du[c][p] = u[(face.dofs[0][p], c)] - u[(face.dofs[1][p], c)];
                        dw[c][p] = w[(face.dofs[0][p], c)] - w[(face.dofs[1][p], c)];
                    }
                }
                let s = face.face_mass();
                let mut acc = 0.0;
                for p in 0..3 {
                    for q in 0..3 {
                        let mut d = 0.0;
                        for c in 0..n {
                            d += dw[c][p] * du[c][q];
                        }
                        acc += s[p][q] * d;
                    }
                }
                acc
            })
            .collect()
    }

    /// Every entry of the assembled `B(kappa)` as `(row, col, value)`, duplicates unsummed.
    pub fn triplets(&self, kappa: &[f64]) -> Vec<(usize, usize, f64)> {
        assert_eq!(kappa.len(), self.faces.len());
        let mut out = Vec::with_capacity(36 * self.faces.len());
        for (face, &k) in self.faces.iter().zip(kappa) {
            let (idx, b) = face.stencil();
            for i in 0..6 {
                for j in 0..6 {
                    out.push((idx[i], idx[j], k * b[i][j]));
                }
            }
        }
        out
    }
}

/// Writes `(row, col, value)` lines for debugging dumps.
pub fn write_triplets<W: std::io::Write>(
    mut out: W,
    triplets: &[(usize, usize, f64)],
) -> std::io::Result<()> {
    for &(r, c, v) in triplets {
        writeln!(out, "{r} {c} {v}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_ambient_grid;

    fn reference_tet() -> Mesh {
        Mesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            vec![[0, 1, 2, 3]],
        )
        .unwrap()
    }

    /// Two tets glued along the triangle (0,0,0),(1,0,0),(0,1,0) of area 1/2.
    pub(crate) fn two_tets() -> Mesh {
        Mesh::new(
            vec![
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [0.0, 0.0, 1.0],
                [0.0, 0.0, -1.0],
            ],
            vec![[0, 1, 2, 3], [0, 2, 1, 4]],
        )
        .unwrap()
    }

    fn dense(triplets: &[(usize, usize, f64)], n: usize) -> Vec<Vec<f64>> {
        let mut a = vec![vec![0.0; n]; n];
        for &(r, c, v) in triplets {
            a[r][c] += v;
        }
        a
    }

    #[test]
    fn reference_mass_block() {
        let m = reference_tet();
        let mass = assemble_mass(&m, &DofMap::new(&m)).unwrap();
        assert!((mass.sum_entries() - 1.0 / 6.0).abs() < 1e-15);
        let b = mass.blocks()[0];
        for i in 0..4 {
            assert!((b[i][i] - 1.0 / 60.0).abs() < 1e-15);
            for j in 0..4 {
                if i != j {
                    assert!((b[i][j] - 1.0 / 120.0).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn grid_mass_sums_to_domain_volume() {
        let m = build_ambient_grid(2, 13.6).unwrap();
        let mass = assemble_mass(&m, &DofMap::new(&m)).unwrap();
        assert!((mass.sum_entries() - 20123.648).abs() < 1e-9 * 20123.648);
        for (t, b) in mass.blocks().iter().enumerate() {
            assert!((b[0][0] - m.volumes()[t] / 10.0).abs() < 1e-12);
        }
    }

    #[test]
    fn reference_stiffness_closed_form() {
        let m = reference_tet();
        let k = assemble_stiffness(&m, &DofMap::new(&m), 2.0).unwrap();
        let expected = [
            [3.0, -1.0, -1.0, -1.0],
            [-1.0, 1.0, 0.0, 0.0],
            [-1.0, 0.0, 1.0, 0.0],
            [-1.0, 0.0, 0.0, 1.0],
        ];
        for i in 0..4 {
            for j in 0..4 {
                assert!((k.blocks()[0][i][j] - 2.0 / 6.0 * expected[i][j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn stiffness_annihilates_constants_and_scales_with_diffusivity() {
        let m = build_ambient_grid(3, 13.6).unwrap();
        let d = DofMap::new(&m);
        let k1 = assemble_stiffness(&m, &d, 1.0).unwrap();
        let k2 = assemble_stiffness(&m, &d, 2.0).unwrap();
        let y = k1.apply(&vec![1.0; d.len()]);
        let scale = k1.blocks().iter().flatten().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(y.iter().all(|v| v.abs() <= 1e-12 * scale));
        for (a, b) in k1.blocks().iter().zip(k2.blocks()) {
            for i in 0..4 {
                for j in 0..4 {
                    assert_eq!(2.0 * a[i][j], b[i][j]);
                }
            }
        }
        assert!(assemble_stiffness(&m, &d, 0.0).is_err());
    }

    #[test]
    fn dephasing_symmetric_domain_has_zero_first_moment() {
        let m = build_ambient_grid(3, 13.6).unwrap();
        let j = assemble_dephasing(&m, &DofMap::new(&m)).unwrap();
        for jk in &j {
            assert!(jk.sum_entries().abs() <= 1e-9 * m.total_volume());
        }
    }

    #[test]
    fn dephasing_shifts_with_translation() {
        let m = build_ambient_grid(2, 5.0).unwrap();
        let shift = 1.75;
        let moved: Vec<Point> = m.vertices().iter().map(|v| [v[0] + shift, v[1], v[2]]).collect();
        let m2 = Mesh::new(moved, m.tets().to_vec()).unwrap();
        let d = DofMap::new(&m);
        let jx = &assemble_dephasing(&m, &d).unwrap()[0];
        let jx2 = &assemble_dephasing(&m2, &d).unwrap()[0];
        let mass = assemble_mass(&m, &d).unwrap();
        for t in 0..m.num_tets() {
            for a in 0..4 {
                for b in 0..4 {
                    let want = jx.blocks()[t][a][b] + shift * mass.blocks()[t][a][b];
                    assert!((jx2.blocks()[t][a][b] - want).abs() < 1e-12);
                }
            }
        }
    }

    /// Collapsed-coordinate Gauss-Legendre rule on a tet, exact well beyond degree 3.
    fn quadrature_oracle(p: &[Point; 4], f: impl Fn(&[f64; 4]) -> f64) -> f64 {
        const X: [f64; 5] = [
            -0.906_179_845_938_664,
            -0.538_469_310_105_683,
            0.0,
            0.538_469_310_105_683,
            0.906_179_845_938_664,
        ];
        const W: [f64; 5] = [
            0.236_926_885_056_189,
            0.478_628_670_499_366,
            0.568_888_888_888_889,
            0.478_628_670_499_366,
            0.236_926_885_056_189,
        ];
        let vol = crate::mesh::signed_volume(p);
        let mut acc = 0.0;
        for (a, wa) in X.iter().zip(W) {
            for (b, wb) in X.iter().zip(W) {
                for (c, wc) in X.iter().zip(W) {
                    let (u, v, w) = ((a + 1.0) / 2.0, (b + 1.0) / 2.0, (c + 1.0) / 2.0);
                    let l1 = u;
                    let l2 = v * (1.0 - u);
                    let l3 = w * (1.0 - u) * (1.0 - v);
                    let l0 = 1.0 - l1 - l2 - l3;
                    let jac = (1.0 - u).powi(2) * (1.0 - v) / 8.0;
                    acc += wa * wb * wc * jac * f(&[l0, l1, l2, l3]);
                }
            }
        }
        6.0 * vol * acc
    }

    #[test]
    fn dephasing_matches_quadrature_oracle() {
        let p = [[0.3, -0.2, 0.1], [2.1, 0.4, -0.3], [0.5, 1.9, 0.2], [0.2, 0.6, 1.7]];
        let m = Mesh::new(p.to_vec(), vec![[0, 1, 2, 3]]).unwrap();
        let j = assemble_dephasing(&m, &DofMap::new(&m)).unwrap();
        for k in 0..3 {
            for a in 0..4 {
                for b in 0..4 {
                    let q = quadrature_oracle(&p, |l| {
                        let x: f64 = (0..4).map(|i| l[i] * p[i][k]).sum();
                        l[a] * l[b] * x
                    });
                    assert!((j[k].blocks()[0][a][b] - q).abs() < 1e-12, "{k} {a} {b}");
                }
            }
        }
    }

    #[test]
    fn relaxation_cases() {
        let m = build_ambient_grid(1, 1.0).unwrap();
        let mass = assemble_mass(&m, &DofMap::new(&m)).unwrap();
        let r = assemble_relaxation(&mass, f64::INFINITY).unwrap();
        assert_eq!(r.sum_entries(), 0.0);
        let r = assemble_relaxation(&mass, 80.0).unwrap();
        for (a, b) in r.blocks().iter().zip(mass.blocks()) {
            for i in 0..4 {
                for j in 0..4 {
                    assert!((a[i][j] - b[i][j] / 80.0).abs() <= 1e-15 * b[i][j].abs());
                    assert_eq!(a[i][j], a[j][i]);
                }
            }
        }
        assert!(assemble_relaxation(&mass, 0.0).is_err());
        assert!(assemble_relaxation(&mass, -1.0).is_err());
    }

    #[test]
    fn single_face_coupling_entries() {
        let m = two_tets();
        let cs = CouplingStructure::build(&m, &DofMap::new(&m)).unwrap();
        assert_eq!(cs.num_faces(), 1);
        assert!((cs.faces()[0].area - 0.5).abs() < 1e-15);
        let kappa = 0.37;
        let b = dense(&cs.triplets(&[kappa]), 8);
        for &d in cs.faces()[0].dofs.iter().flatten() {
            assert!((b[d][d] - kappa / 12.0).abs() < 1e-15);
        }
        // Cross entries pair geometrically coincident vertices.
        let f = cs.faces()[0];
        for p in 0..3 {
            let (a, c) = (f.dofs[0][p], f.dofs[1][p]);
            assert!((b[a][c] + kappa / 12.0).abs() < 1e-15);
            let xa = m.vertices()[m.tets()[a / 4][a % 4]];
            let xc = m.vertices()[m.tets()[c / 4][c % 4]];
            assert_eq!(xa, xc);
        }
    }

    #[test]
    fn coupling_is_linear_symmetric_and_conservative() {
        let m = build_ambient_grid(2, 13.6).unwrap();
        let d = DofMap::new(&m);
        let cs = CouplingStructure::build(&m, &d).unwrap();
        let kappa: Vec<f64> = (0..cs.num_faces()).map(|f| 1e-4 + 1e-3 * (f % 7) as f64).collect();
        let k2: Vec<f64> = kappa.iter().map(|k| 2.0 * k).collect();
        let b1 = dense(&cs.triplets(&kappa), d.len());
        let b2 = dense(&cs.triplets(&k2), d.len());
        for i in 0..d.len() {
            for j in 0..d.len() {
                assert_eq!(b2[i][j], 2.0 * b1[i][j]);
                assert_eq!(b1[i][j], b1[j][i]);
            }
        }
        let y = cs.apply(&kappa, &vec![1.0; d.len()]);
        assert!(y.iter().all(|&v| v == 0.0));
        let zero = dense(&cs.triplets(&vec![0.0; cs.num_faces()]), d.len());
        assert!(zero.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn structured_apply_matches_assembled_matrix() {
        let m = build_ambient_grid(2, 3.0).unwrap();
        let d = DofMap::new(&m);
        let cs = CouplingStructure::build(&m, &d).unwrap();
        let kappa: Vec<f64> = (0..cs.num_faces()).map(|f| 0.01 * (1 + f % 5) as f64).collect();
        let x: Vec<f64> = (0..d.len()).map(|i| ((i * 37 % 11) as f64).sin()).collect();
        let b = dense(&cs.triplets(&kappa), d.len());
        let y = cs.apply(&kappa, &x);
        for i in 0..d.len() {
            let want: f64 = (0..d.len()).map(|j| b[i][j] * x[j]).sum();
            assert!((y[i] - want).abs() < 1e-13);
        }
        let u = Mat::from_fn(d.len(), 3, |i, c| ((i + 7 * c) as f64 * 0.3).cos());
        let bu = cs.apply_mat(&kappa, u.as_ref());
        for c in 0..3 {
            let col: Vec<f64> = (0..d.len()).map(|i| u[(i, c)]).collect();
            let yc = cs.apply(&kappa, &col);
            for i in 0..d.len() {
                assert!((bu[(i, c)] - yc[i]).abs() < 1e-14);
            }
        }
    }
}
