//! Plain-text file formats for meshes, permeability fields, interfaces,
//! protocols and signals. Blank lines and lines starting with `#` are ignored.
//! Floats are written in shortest round-trip form, so save/load is bit-exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use faer::c64;

use crate::encoding::{Acquisition, Protocol};
use crate::error::{Error, Result};
use crate::field::{InterfaceSet, DEFAULT_BARRIER_THRESHOLD};
use crate::mesh::{signed_volume, Mesh, Point};

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Content lines with their 1-based line numbers.
struct Lines<'a> {
    source: String,
    inner: std::iter::Peekable<Box<dyn Iterator<Item = (usize, &'a str)> + 'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn new(source: &str, text: &'a str) -> Self {
        let it: Box<dyn Iterator<Item = (usize, &'a str)>> = Box::new(
            text.lines()
                .enumerate()
                .map(|(i, l)| (i + 1, l.trim()))
                .filter(|(_, l)| !l.is_empty() && !l.starts_with('#')),
        );
        Lines {
            source: source.to_string(),
            inner: it.peekable(),
            last: text.lines().count(),
        }
    }

    fn err(&self, line: usize, msg: impl Into<String>) -> Error {
        Error::parse(&self.source, line, msg)
    }

    fn next_line(&mut self) -> Result<(usize, &'a str)> {
        match self.inner.next() {
            Some(l) => Ok(l),
            None => Err(self.err(self.last + 1, "unexpected end of input")),
        }
    }

    fn fields<T: FromStr>(&self, line: usize, text: &str, count: usize) -> Result<Vec<T>> {
        let parts: Vec<&str> = text.split_whitespace().collect();
        if parts.len() != count {
            return Err(self.err(line, format!("expected {count} fields, found {}", parts.len())));
        }
        parts
            .iter()
            .map(|p| p.parse::<T>().map_err(|_| self.err(line, format!("cannot parse '{p}'"))))
            .collect()
    }

    fn header(&mut self, name: &str) -> Result<usize> {
        let (line, text) = self.next_line()?;
        let mut parts = text.split_whitespace();
        match (parts.next(), parts.next().map(str::parse::<usize>), parts.next()) {
            (Some(n), Some(Ok(count)), None) if n == name => Ok(count),
            _ => Err(self.err(line, format!("malformed header, expected '{name} <count>'"))),
        }
    }

    fn expect_end(&mut self) -> Result<()> {
        match self.inner.next() {
            None => Ok(()),
            Some((line, _)) => Err(self.err(line, "unexpected trailing content")),
        }
    }
}

pub fn mesh_to_string(mesh: &Mesh) -> String {
    let mut s = String::new();
    writeln!(s, "VERTICES {}", mesh.vertices().len()).unwrap();
    for v in mesh.vertices() {
        writeln!(s, "{} {} {}", v[0], v[1], v[2]).unwrap();
    }
    writeln!(s, "TETS {}", mesh.num_tets()).unwrap();
    for t in mesh.tets() {
        writeln!(s, "{} {} {} {}", t[0], t[1], t[2], t[3]).unwrap();
    }
    s
}

pub fn parse_mesh(source: &str, text: &str) -> Result<Mesh> {
    let mut lines = Lines::new(source, text);
    let nv = lines.header("VERTICES")?;
    let mut vertices: Vec<Point> = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (line, t) = lines.next_line()?;
        let v: Vec<f64> = lines.fields(line, t, 3)?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(lines.err(line, "non-finite coordinate"));
        }
        vertices.push([v[0], v[1], v[2]]);
    }
    let nt = lines.header("TETS")?;
    let mut tets = Vec::with_capacity(nt);
    for _ in 0..nt {
        let (line, t) = lines.next_line()?;
        let v: Vec<usize> = lines.fields(line, t, 4)?;
        if v.iter().any(|&i| i >= nv) {
            return Err(lines.err(line, "vertex index out of range"));
        }
        let tet = [v[0], v[1], v[2], v[3]];
        let vol = signed_volume(&tet.map(|i| vertices[i]));
        if !(vol > 0.0) {
            return Err(lines.err(line, format!("non-positive tet volume {vol:e}")));
        }
        tets.push(tet);
    }
    lines.expect_end()?;
    Mesh::new(vertices, tets)
}

pub fn save_mesh(mesh: &Mesh, path: &Path) -> Result<()> {
    write(path, &mesh_to_string(mesh))
}

pub fn load_mesh(path: &Path) -> Result<Mesh> {
    parse_mesh(&path.display().to_string(), &read(path)?)
}

/// One `faceIndex kappa` line per interior face.
pub fn save_field(kappa: &[f64], path: &Path) -> Result<()> {
    let mut s = String::new();
    for (f, k) in kappa.iter().enumerate() {
        writeln!(s, "{f} {k}").unwrap();
    }
    write(path, &s)
}

/// Reads a permeability per face; every face in `0..num_faces` must appear once.
pub fn parse_field(source: &str, text: &str, num_faces: usize) -> Result<Vec<f64>> {
    let mut lines = Lines::new(source, text);
    let mut kappa = vec![f64::NAN; num_faces];
    while let Some((line, t)) = lines.inner.next() {
        let parts: Vec<&str> = t.split_whitespace().collect();
        if parts.len() != 2 {
            return Err(lines.err(line, format!("expected 'faceIndex kappa', found {} fields", parts.len())));
        }
        let f: usize = parts[0].parse().map_err(|_| lines.err(line, format!("cannot parse face index '{}'", parts[0])))?;
        let k: f64 = parts[1].parse().map_err(|_| lines.err(line, format!("cannot parse kappa '{}'", parts[1])))?;
        if f >= num_faces {
            return Err(lines.err(line, format!("face index {f} out of range ({num_faces} faces)")));
        }
        if !kappa[f].is_nan() {
            return Err(lines.err(line, format!("face {f} listed twice")));
        }
        if !(k > 0.0) || !k.is_finite() {
            return Err(lines.err(line, format!("kappa must be positive and finite, got {k}")));
        }
        kappa[f] = k;
    }
    if let Some(f) = kappa.iter().position(|k| k.is_nan()) {
        return Err(lines.err(lines.last + 1, format!("face {f} missing")));
    }
    Ok(kappa)
}

pub fn load_field(path: &Path, num_faces: usize) -> Result<Vec<f64>> {
    parse_field(&path.display().to_string(), &read(path)?, num_faces)
}

/// One line per face: the face index and its three vertex indices.
pub fn interface_to_string(mesh: &Mesh, interface: &InterfaceSet) -> String {
    let mut s = format!("# tau_b {}\n", interface.threshold());
    for &f in interface.faces() {
        let v = mesh.interior_faces()[f].vertices;
        writeln!(s, "{f} {} {} {}", v[0], v[1], v[2]).unwrap();
    }
    s
}

pub fn parse_interface(source: &str, text: &str, mesh: &Mesh) -> Result<InterfaceSet> {
    let threshold = text
        .lines()
        .find_map(|l| l.trim().strip_prefix("# tau_b "))
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(DEFAULT_BARRIER_THRESHOLD);
    let mut lines = Lines::new(source, text);
    let mut faces = Vec::new();
    while let Some((line, t)) = lines.inner.next() {
        let v: Vec<usize> = lines.fields(line, t, 4)?;
        let f = v[0];
        if f >= mesh.num_interior_faces() {
            return Err(lines.err(line, format!("face index {f} out of range")));
        }
        let mut expect = mesh.interior_faces()[f].vertices;
        let mut got = [v[1], v[2], v[3]];
        expect.sort_unstable();
        got.sort_unstable();
        if expect != got {
            return Err(lines.err(line, format!("vertices do not match face {f}")));
        }
        faces.push(f);
    }
    Ok(InterfaceSet::new(faces, threshold))
}

pub fn save_interface(mesh: &Mesh, interface: &InterfaceSet, path: &Path) -> Result<()> {
    write(path, &interface_to_string(mesh, interface))
}

pub fn load_interface(path: &Path, mesh: &Mesh) -> Result<InterfaceSet> {
    parse_interface(&path.display().to_string(), &read(path)?, mesh)
}

fn acquisition_fields(a: &Acquisition) -> String {
    let d = a.direction();
    format!("{} {} {} {} {} {}", d[0], d[1], d[2], a.b_s_mm2(), a.delta(), a.big_delta())
}

/// One `dx dy dz b delta Delta` line per acquisition, b in s/mm^2, times in ms.
pub fn protocol_to_string(protocol: &Protocol) -> String {
    let mut s = String::new();
    for a in protocol.acquisitions() {
        writeln!(s, "{}", acquisition_fields(a)).unwrap();
    }
    s
}

fn parse_rows(source: &str, text: &str, width: usize) -> Result<(Protocol, Vec<Vec<f64>>)> {
    let mut lines = Lines::new(source, text);
    let mut acqs = Vec::new();
    let mut rows = Vec::new();
    let mut first_line = 0;
    while let Some((line, t)) = lines.inner.next() {
        if first_line == 0 {
            first_line = line;
        }
        let v: Vec<f64> = lines.fields(line, t, width)?;
        let acq = Acquisition::new([v[0], v[1], v[2]], v[3], v[4], v[5]).map_err(|e| lines.err(line, e.to_string()))?;
        acqs.push(acq);
        rows.push(v);
    }
    let protocol = Protocol::new(acqs).map_err(|e| lines.err(first_line.max(1), e.to_string()))?;
    Ok((protocol, rows))
}

pub fn parse_protocol(source: &str, text: &str) -> Result<Protocol> {
    Ok(parse_rows(source, text, 6)?.0)
}

pub fn save_protocol(protocol: &Protocol, path: &Path) -> Result<()> {
    write(path, &protocol_to_string(protocol))
}

pub fn load_protocol(path: &Path) -> Result<Protocol> {
    parse_protocol(&path.display().to_string(), &read(path)?)
}

/// Protocol rows followed by `Re(S) Im(S)`.
pub fn signals_to_string(protocol: &Protocol, signals: &[c64]) -> String {
    assert_eq!(protocol.len(), signals.len());
    let mut s = String::new();
    for (a, z) in protocol.acquisitions().iter().zip(signals) {
        writeln!(s, "{} {} {}", acquisition_fields(a), z.re, z.im).unwrap();
    }
    s
}

pub fn parse_signals(source: &str, text: &str) -> Result<(Protocol, Vec<c64>)> {
    let (protocol, rows) = parse_rows(source, text, 8)?;
    let signals = rows.iter().map(|r| c64::new(r[6], r[7])).collect();
    Ok((protocol, signals))
}

pub fn save_signals(protocol: &Protocol, signals: &[c64], path: &Path) -> Result<()> {
    write(path, &signals_to_string(protocol, signals))
}

pub fn load_signals(path: &Path) -> Result<(Protocol, Vec<c64>)> {
    parse_signals(&path.display().to_string(), &read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::axis_directions;
    use crate::mesh::build_ambient_grid;

    fn parse_err(r: Result<impl std::fmt::Debug>) -> (usize, String) {
        match r {
            Err(Error::Parse { line, message, .. }) => (line, message),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn mesh_round_trip() {
        let mesh = build_ambient_grid(2, 13.6).unwrap();
        let back = parse_mesh("m", &mesh_to_string(&mesh)).unwrap();
        assert_eq!(back.vertices(), mesh.vertices());
        assert_eq!(back.tets(), mesh.tets());
        assert_eq!(back.interior_faces(), mesh.interior_faces());
        assert_eq!(back.face_adjacency(), mesh.face_adjacency());
    }

    #[test]
    fn mesh_errors_name_lines() {
        let good = "VERTICES 4\n0 0 0\n1 0 0\n0 1 0\n0 0 1\nTETS 1\n0 1 2 3\n";
        assert_eq!(parse_mesh("m", good).unwrap().num_tets(), 1);
        let (line, msg) = parse_err(parse_mesh("m", &good.replace("0 1 2 3", "0 1 2 4")));
        assert_eq!((line, msg.as_str()), (7, "vertex index out of range"));
        let (line, msg) = parse_err(parse_mesh("m", "VERTICES 4\n0 0 0\n1 0 0\n"));
        assert_eq!((line, msg.as_str()), (4, "unexpected end of input"));
        let (line, msg) = parse_err(parse_mesh("m", &good.replace("0 1 2 3", "0 2 1 3")));
        assert_eq!(line, 7);
        assert!(msg.contains("non-positive"));
        let (line, msg) = parse_err(parse_mesh("m", "VERTS 4\n"));
        assert_eq!(line, 1);
        assert!(msg.contains("malformed header"));
    }

    #[test]
    fn field_and_interface_round_trip() {
        let mesh = build_ambient_grid(1, 13.6).unwrap();
        let kappa = vec![1e-5, 0.1, 0.037, 1e-3, 2.5e-4, 0.1];
        let mut s = String::new();
        for (f, k) in kappa.iter().enumerate().rev() {
            writeln!(s, "{f} {k}").unwrap();
        }
        assert_eq!(parse_field("f", &s, 6).unwrap(), kappa);
        assert!(parse_field("f", "0 1e-3\n", 6).is_err());
        let (line, _) = parse_err(parse_field("f", "0 1e-3\n0 1e-3\n", 6));
        assert_eq!(line, 2);

        let iface = InterfaceSet::new(vec![4, 1], 2e-3);
        let back = parse_interface("i", &interface_to_string(&mesh, &iface), &mesh).unwrap();
        assert_eq!(back, iface);
        let (line, _) = parse_err(parse_interface("i", "# x\n3 0 1 2\n", &mesh));
        assert_eq!(line, 2);
    }

    #[test]
    fn protocol_and_signals_round_trip() {
        let p = Protocol::paper(&axis_directions()).unwrap();
        let back = parse_protocol("p", &protocol_to_string(&p)).unwrap();
        assert_eq!(back.len(), 36);
        for (a, b) in p.acquisitions().iter().zip(back.acquisitions()) {
            assert_eq!(a.b(), b.b());
            assert_eq!(a.direction(), b.direction());
            assert_eq!(a.big_delta(), b.big_delta());
        }
        let sig: Vec<c64> = (0..36).map(|i| c64::new(1.0 / (i as f64 + 1.0), -1e-17 * i as f64)).collect();
        let (p2, s2) = parse_signals("s", &signals_to_string(&p, &sig)).unwrap();
        assert_eq!(s2, sig);
        assert_eq!(p2.groups().len(), 2);
        let (line, _) = parse_err(parse_signals("s", "1 0 0 0 10 20 1\n"));
        assert_eq!(line, 1);
        // A protocol lacking a b=0 row in a group is rejected.
        assert!(parse_protocol("p", "1 0 0 1000 10 20\n").is_err());
    }
}
