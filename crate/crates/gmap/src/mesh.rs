//! Triangle mesh container, topology queries, and OBJ file I/O.
//!
//! Vertices are millimetre coordinates; triangles are counter-clockwise
//! index triples. Adjacency is built eagerly at construction and the mesh
//! is immutable afterwards, so every downstream stage can read rings
//! without synchronization.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Mesh {
    vertices: Vec<[f64; 3]>,
    triangles: Vec<[usize; 3]>,
    adjacency: Vec<Vec<usize>>,
}

/// Connectivity summary produced by [`Mesh::validate_topology`].
///
/// Problems are reported through the flags rather than errors so callers
/// can decide which properties they require.
#[derive(Debug, Clone, Serialize)]
pub struct TopologyReport {
    pub is_manifold: bool,
    pub is_oriented: bool,
    pub boundary_loops: usize,
    /// Vertices of the outer (longest) boundary loop, ordered so the
    /// surface lies on the left of the walk, starting at the loop's
    /// smallest vertex index.
    pub boundary_vertices: Vec<usize>,
    pub n_vertices: usize,
    pub n_triangles: usize,
}

/// Area-weighted vertex normals plus the vertices where no incident
/// triangle contributed (isolated or fully degenerate fans).
#[derive(Debug, Clone)]
pub struct VertexNormals {
    pub normals: Vec<[f64; 3]>,
    pub zero_normals: Vec<usize>,
}

impl Mesh {
    pub fn new(vertices: Vec<[f64; 3]>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        let n = vertices.len();
        for (t, tri) in triangles.iter().enumerate() {
            for &i in tri {
                if i >= n {
                    return Err(Error::Topology(format!(
                        "triangle {t} references vertex {i} but mesh has {n} vertices"
                    )));
                }
            }
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(Error::Topology(format!(
                    "triangle {t} is degenerate: indices {:?}",
                    tri
                )));
            }
        }
        let adjacency = build_adjacency(n, &triangles);
        Ok(Self {
            vertices,
            triangles,
            adjacency,
        })
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn vertices(&self) -> &[[f64; 3]] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    /// Sorted 1-ring neighbor indices of vertex `i`.
    pub fn one_ring(&self, i: usize) -> Result<&[usize]> {
        self.adjacency
            .get(i)
            .map(Vec::as_slice)
            .ok_or_else(|| {
                Error::Topology(format!(
                    "vertex {i} out of range (mesh has {} vertices)",
                    self.vertices.len()
                ))
            })
    }

    /// Valence of vertex `i` (ring size).
    pub fn valence(&self, i: usize) -> Result<usize> {
        self.one_ring(i).map(<[usize]>::len)
    }

    /// Diagonal of the axis-aligned bounding box, in mm.
    pub fn bbox_diagonal(&self) -> f64 {
        if self.vertices.is_empty() {
            return 0.0;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &self.vertices {
            for k in 0..3 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        ((hi[0] - lo[0]).powi(2) + (hi[1] - lo[1]).powi(2) + (hi[2] - lo[2]).powi(2)).sqrt()
    }

    /// Area-weighted unit vertex normals. Weighting uses the unnormalized
    /// triangle cross products, whose magnitudes are twice the areas.
    pub fn vertex_normals(&self) -> VertexNormals {
        let mut acc = vec![[0.0f64; 3]; self.vertices.len()];
        for tri in &self.triangles {
            let [a, b, c] = *tri;
            let cr = cross(
                sub(self.vertices[b], self.vertices[a]),
                sub(self.vertices[c], self.vertices[a]),
            );
            for &v in tri {
                for k in 0..3 {
                    acc[v][k] += cr[k];
                }
            }
        }
        let mut zero_normals = Vec::new();
        for (i, n) in acc.iter_mut().enumerate() {
            let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            if len > 0.0 {
                for k in 0..3 {
                    n[k] /= len;
                }
            } else {
                zero_normals.push(i);
            }
        }
        VertexNormals {
            normals: acc,
            zero_normals,
        }
    }

    /// Connectivity report: manifoldness, orientation consistency, and
    /// boundary loop structure.
    pub fn validate_topology(&self) -> TopologyReport {
        let n = self.vertices.len();

        // Directed edge counts per undirected edge.
        let mut edges: BTreeMap<(usize, usize), (usize, usize)> = BTreeMap::new();
        for tri in &self.triangles {
            for k in 0..3 {
                let a = tri[k];
                let b = tri[(k + 1) % 3];
                let key = (a.min(b), a.max(b));
                let entry = edges.entry(key).or_insert((0, 0));
                if a < b {
                    entry.0 += 1;
                } else {
                    entry.1 += 1;
                }
            }
        }

        let mut edge_manifold = true;
        let mut is_oriented = true;
        for &(fwd, rev) in edges.values() {
            let total = fwd + rev;
            if total > 2 {
                edge_manifold = false;
            }
            // An interior edge must be traversed once in each direction.
            if total == 2 && (fwd != 1 || rev != 1) {
                is_oriented = false;
            }
        }

        let vertex_manifold = self.vertices_are_manifold(&edges);
        let is_manifold = edge_manifold && vertex_manifold;

        // Boundary half-edges keep their stored direction, which walks the
        // loop with the surface on its left for consistently wound meshes.
        let mut next: BTreeMap<usize, usize> = BTreeMap::new();
        for tri in &self.triangles {
            for k in 0..3 {
                let a = tri[k];
                let b = tri[(k + 1) % 3];
                let key = (a.min(b), a.max(b));
                if edges[&key] == if a < b { (1, 0) } else { (0, 1) } {
                    next.insert(a, b);
                }
            }
        }

        let mut loops: Vec<Vec<usize>> = Vec::new();
        let mut seen = vec![false; n];
        let starts: Vec<usize> = next.keys().copied().collect();
        for start in starts {
            if seen[start] {
                continue;
            }
            let mut cycle = vec![start];
            seen[start] = true;
            let mut cur = start;
            while let Some(&nxt) = next.get(&cur) {
                if nxt == start {
                    break;
                }
                if seen[nxt] {
                    break; // defensive: malformed boundary graph
                }
                seen[nxt] = true;
                cycle.push(nxt);
                cur = nxt;
            }
            loops.push(cycle);
        }

        // Outer loop: largest total 3D length, ties broken by smallest
        // contained index for determinism.
        let mut boundary_vertices = Vec::new();
        let mut best = f64::NEG_INFINITY;
        for lp in &loops {
            let mut len = 0.0;
            for (k, &v) in lp.iter().enumerate() {
                let w = lp[(k + 1) % lp.len()];
                len += dist(self.vertices[v], self.vertices[w]);
            }
            if len > best {
                best = len;
                boundary_vertices = lp.clone();
            }
        }
        if let Some(pos) = boundary_vertices
            .iter()
            .enumerate()
            .min_by_key(|&(_, &v)| v)
            .map(|(p, _)| p)
        {
            boundary_vertices.rotate_left(pos);
        }

        TopologyReport {
            is_manifold,
            is_oriented,
            boundary_loops: loops.len(),
            boundary_vertices,
            n_vertices: n,
            n_triangles: self.triangles.len(),
        }
    }

    /// A vertex is manifold when the opposite edges of its incident
    /// triangles (its link) form one simple chain or one simple cycle.
    /// Catches bowtie configurations that edge counts miss.
    fn vertices_are_manifold(&self, edges: &BTreeMap<(usize, usize), (usize, usize)>) -> bool {
        for &(fwd, rev) in edges.values() {
            if fwd + rev > 2 {
                return false; // link analysis assumes edge-manifold input
            }
        }
        let mut incident: Vec<Vec<(usize, usize)>> = vec![Vec::new(); self.vertices.len()];
        for tri in &self.triangles {
            for k in 0..3 {
                let v = tri[k];
                incident[v].push((tri[(k + 1) % 3], tri[(k + 2) % 3]));
            }
        }
        for link in &incident {
            if link.is_empty() {
                continue;
            }
            // Degree of each link vertex over the link edges.
            let mut degree: BTreeMap<usize, usize> = BTreeMap::new();
            for &(a, b) in link {
                *degree.entry(a).or_insert(0) += 1;
                *degree.entry(b).or_insert(0) += 1;
            }
            if degree.values().any(|&d| d > 2) {
                return false;
            }
            // Connectivity: walk the link as an undirected graph.
            let mut adj: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for &(a, b) in link {
                adj.entry(a).or_default().push(b);
                adj.entry(b).or_default().push(a);
            }
            let first = *degree.keys().next().unwrap();
            let mut stack = vec![first];
            let mut visited: BTreeMap<usize, bool> = BTreeMap::new();
            visited.insert(first, true);
            while let Some(v) = stack.pop() {
                for &w in adj.get(&v).into_iter().flatten() {
                    if !visited.contains_key(&w) {
                        visited.insert(w, true);
                        stack.push(w);
                    }
                }
            }
            if visited.len() != degree.len() {
                return false;
            }
            let endpoints = degree.values().filter(|&&d| d == 1).count();
            if endpoints != 0 && endpoints != 2 {
                return false;
            }
        }
        true
    }
}

fn build_adjacency(n: usize, triangles: &[[usize; 3]]) -> Vec<Vec<usize>> {
    let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); n];
    for tri in triangles {
        for k in 0..3 {
            let a = tri[k];
            let b = tri[(k + 1) % 3];
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
    }
    for ring in &mut adjacency {
        ring.sort_unstable();
        ring.dedup();
    }
    adjacency
}

/// Parses Wavefront OBJ text. Only `v` and `f` records matter; texture
/// and normal data, groups, and materials are ignored. Faces with more
/// than three vertices are fan-triangulated from the first index.
pub fn parse_obj(text: &str, name: &str) -> Result<Mesh> {
    let mut vertices: Vec<[f64; 3]> = Vec::new();
    // (indices possibly pending validation, source line)
    let mut faces: Vec<(Vec<usize>, usize)> = Vec::new();

    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut fields = content.split_whitespace();
        match fields.next() {
            Some("v") => {
                let mut xyz = [0.0f64; 3];
                for (k, slot) in xyz.iter_mut().enumerate() {
                    let tok = fields.next().ok_or_else(|| Error::ObjParse {
                        name: name.to_string(),
                        line,
                        msg: format!("vertex has {k} coordinates, need 3"),
                    })?;
                    *slot = tok.parse::<f64>().map_err(|_| Error::ObjParse {
                        name: name.to_string(),
                        line,
                        msg: format!("bad coordinate {tok:?}"),
                    })?;
                }
                vertices.push(xyz);
            }
            Some("f") => {
                let mut idx = Vec::new();
                for tok in fields {
                    let head = tok.split('/').next().unwrap_or("");
                    let v = head.parse::<i64>().map_err(|_| Error::ObjParse {
                        name: name.to_string(),
                        line,
                        msg: format!("bad face index {tok:?}"),
                    })?;
                    let resolved = if v > 0 {
                        (v - 1) as usize
                    } else if v < 0 {
                        // Relative indices count back from the vertices
                        // defined so far, per the OBJ convention.
                        let back = (-v) as usize;
                        if back > vertices.len() {
                            return Err(Error::ObjParse {
                                name: name.to_string(),
                                line,
                                msg: format!("relative index {v} past start of vertex list"),
                            });
                        }
                        vertices.len() - back
                    } else {
                        return Err(Error::ObjParse {
                            name: name.to_string(),
                            line,
                            msg: "face index 0 is invalid (OBJ is 1-based)".into(),
                        });
                    };
                    idx.push(resolved);
                }
                if idx.len() < 3 {
                    return Err(Error::ObjParse {
                        name: name.to_string(),
                        line,
                        msg: format!("face has {} vertices, need at least 3", idx.len()),
                    });
                }
                faces.push((idx, line));
            }
            _ => {} // vt, vn, g, o, s, mtllib, usemtl, ...
        }
    }

    let mut triangles = Vec::new();
    for (idx, line) in faces {
        for &i in &idx {
            if i >= vertices.len() {
                return Err(Error::ObjParse {
                    name: name.to_string(),
                    line,
                    msg: format!(
                        "face index {} out of range (file defines {} vertices)",
                        i + 1,
                        vertices.len()
                    ),
                });
            }
        }
        for k in 1..idx.len() - 1 {
            let tri = [idx[0], idx[k], idx[k + 1]];
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(Error::ObjParse {
                    name: name.to_string(),
                    line,
                    msg: format!("degenerate triangle {:?} after fan split", tri),
                });
            }
            triangles.push(tri);
        }
    }

    Mesh::new(vertices, triangles)
}

pub fn load_obj(path: impl AsRef<Path>) -> Result<Mesh> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_obj(&text, &path.display().to_string())
}

/// Serializes the mesh as OBJ text. Coordinates carry six decimal places,
/// enough for 1e-6 mm round trips at face scale.
pub fn obj_string(mesh: &Mesh) -> String {
    let mut out = String::new();
    for v in mesh.vertices() {
        let _ = writeln!(out, "v {:.6} {:.6} {:.6}", v[0], v[1], v[2]);
    }
    for t in mesh.triangles() {
        let _ = writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
    }
    out
}

pub fn save_obj(mesh: &Mesh, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, obj_string(mesh))?;
    Ok(())
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = sub(a, b);
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}
