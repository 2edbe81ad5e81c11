//! Harmonic flattening of a disk-topology surface into the unit circle:
//! the outer boundary is pinned to the circle by arc length and every
//! interior vertex becomes the cotangent-weighted average of its ring.
//!
//! Meshes with interior holes are handled by pinning only the outer
//! loop; hole boundaries float as free vertices. The flip-free guarantee
//! of a convex boundary applies to single-boundary meshes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{Mesh, TopologyReport};
use crate::sparse::{SolverChoice, SpdSolver};

/// Coordinate frame of a 2D embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Frame {
    /// Unit disk centered at the origin.
    Disk,
    /// Unit square [0,1] x [0,1].
    Square,
}

/// Per-vertex 2D parameterization of a mesh.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UVEmbedding {
    pub uv: Vec<[f64; 2]>,
    pub frame: Frame,
}

impl UVEmbedding {
    pub fn source_n(&self) -> usize {
        self.uv.len()
    }
}

/// Weights that are not strictly positive are clamped here so the
/// averaging system stays positive definite.
pub const MIN_EDGE_WEIGHT: f64 = 1e-6;

/// Per-coordinate bound on |u_i - weighted ring average| accepted for a
/// converged interior solution.
pub const HARMONIC_RESIDUAL_LIMIT: f64 = 1e-9;

/// Places the outer boundary loop on the unit circle, spaced by
/// cumulative 3D arc length, with the loop's first vertex at angle 0.
/// Returns (vertex index, position) pairs in loop order.
pub fn boundary_to_circle(
    mesh: &Mesh,
    report: &TopologyReport,
) -> Result<Vec<(usize, [f64; 2])>> {
    let loop_vs = &report.boundary_vertices;
    if loop_vs.is_empty() {
        return Err(Error::Topology(
            "mesh has no boundary loop to map to the circle".into(),
        ));
    }
    let k = loop_vs.len();
    let mut cum = Vec::with_capacity(k);
    let mut total = 0.0;
    for step in 0..k {
        cum.push(total);
        let a = mesh.vertices()[loop_vs[step]];
        let b = mesh.vertices()[loop_vs[(step + 1) % k]];
        let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
        total += d;
    }
    if total <= 0.0 {
        return Err(Error::Topology(
            "boundary loop has zero total length".into(),
        ));
    }
    Ok(loop_vs
        .iter()
        .zip(&cum)
        .map(|(&v, &s)| {
            let theta = std::f64::consts::TAU * s / total;
            (v, [theta.cos(), theta.sin()])
        })
        .collect())
}

fn cotan(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> f64 {
    // Cotangent of the angle at vertex a in triangle (a, b, c).
    let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
    let dot = u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
    let cx = u[1] * v[2] - u[2] * v[1];
    let cy = u[2] * v[0] - u[0] * v[2];
    let cz = u[0] * v[1] - u[1] * v[0];
    let cross = (cx * cx + cy * cy + cz * cz).sqrt();
    if cross <= f64::EPSILON {
        0.0
    } else {
        dot / cross
    }
}

/// Combined cotangent weight per undirected edge, keyed (min, max),
/// clamped to [`MIN_EDGE_WEIGHT`].
pub(crate) fn edge_weights(mesh: &Mesh) -> BTreeMap<(usize, usize), f64> {
    let mut w: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for tri in mesh.triangles() {
        let [a, b, c] = *tri;
        let pa = mesh.vertices()[a];
        let pb = mesh.vertices()[b];
        let pc = mesh.vertices()[c];
        let mut add = |i: usize, j: usize, cot: f64| {
            let key = (i.min(j), i.max(j));
            *w.entry(key).or_insert(0.0) += cot;
        };
        add(b, c, cotan(pa, pb, pc));
        add(a, c, cotan(pb, pc, pa));
        add(a, b, cotan(pc, pa, pb));
    }
    for v in w.values_mut() {
        if *v <= 0.0 {
            *v = MIN_EDGE_WEIGHT;
        }
    }
    w
}

/// Solves for interior positions given pinned boundary positions. Every
/// vertex absent from `boundary` is treated as free, including hole
/// boundaries.
pub fn solve_harmonic(mesh: &Mesh, boundary: &[(usize, [f64; 2])]) -> Result<UVEmbedding> {
    solve_harmonic_with(mesh, boundary, SolverChoice::Auto)
}

pub fn solve_harmonic_with(
    mesh: &Mesh,
    boundary: &[(usize, [f64; 2])],
    choice: SolverChoice,
) -> Result<UVEmbedding> {
    let n = mesh.n_vertices();
    if boundary.is_empty() {
        return Err(Error::Topology("no pinned boundary vertices".into()));
    }
    let mut fixed_pos: Vec<Option<[f64; 2]>> = vec![None; n];
    for &(v, p) in boundary {
        if v >= n {
            return Err(Error::Topology(format!(
                "boundary vertex {v} out of range for {n} vertices"
            )));
        }
        if !p[0].is_finite() || !p[1].is_finite() {
            return Err(Error::NonFinite(format!(
                "boundary position for vertex {v} is not finite"
            )));
        }
        if fixed_pos[v].is_some() {
            return Err(Error::Topology(format!(
                "boundary vertex {v} pinned twice"
            )));
        }
        fixed_pos[v] = Some(p);
    }
    let free: Vec<usize> = (0..n).filter(|&v| fixed_pos[v].is_none()).collect();
    if free.is_empty() {
        return Err(Error::Topology(
            "no interior vertices: every vertex is pinned".into(),
        ));
    }
    let mut col_of = vec![usize::MAX; n];
    for (c, &v) in free.iter().enumerate() {
        col_of[v] = c;
    }

    let weights = edge_weights(mesh);
    let nf = free.len();
    let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
    let mut rhs_u = vec![0.0; nf];
    let mut rhs_v = vec![0.0; nf];
    for (row, &i) in free.iter().enumerate() {
        let mut diag = 0.0;
        for &j in mesh.one_ring(i)? {
            let wij = weights[&(i.min(j), i.max(j))];
            diag += wij;
            match fixed_pos[j] {
                Some(p) => {
                    rhs_u[row] += wij * p[0];
                    rhs_v[row] += wij * p[1];
                }
                None => triplets.push((row, col_of[j], -wij)),
            }
        }
        if diag <= 0.0 {
            return Err(Error::Topology(format!(
                "interior vertex {i} has no incident edges"
            )));
        }
        triplets.push((row, row, diag));
    }

    let solver = SpdSolver::from_triplets(nf, &triplets, choice)?;
    let sol_u = solver.solve(&rhs_u)?;
    let sol_v = solver.solve(&rhs_v)?;

    let mut uv = vec![[0.0_f64; 2]; n];
    for (v, p) in fixed_pos.iter().enumerate() {
        if let Some(p) = p {
            uv[v] = *p;
        }
    }
    for (row, &v) in free.iter().enumerate() {
        uv[v] = [sol_u[row], sol_v[row]];
    }
    let embedding = UVEmbedding {
        uv,
        frame: Frame::Disk,
    };

    let is_fixed: Vec<bool> = fixed_pos.iter().map(|p| p.is_some()).collect();
    let resid = harmonic_residual(mesh, &embedding, &is_fixed)?;
    if resid > HARMONIC_RESIDUAL_LIMIT {
        return Err(Error::Solve(format!(
            "interior solve residual {resid:.3e} exceeds {HARMONIC_RESIDUAL_LIMIT:.1e} \
             (disconnected or ill-conditioned interior)"
        )));
    }
    Ok(embedding)
}

/// Max over free vertices and coordinates of the distance between a
/// vertex and the weighted average of its ring.
pub fn harmonic_residual(mesh: &Mesh, emb: &UVEmbedding, is_fixed: &[bool]) -> Result<f64> {
    let weights = edge_weights(mesh);
    let mut worst = 0.0_f64;
    for i in 0..mesh.n_vertices() {
        if is_fixed[i] {
            continue;
        }
        let mut acc = [0.0_f64; 2];
        let mut total = 0.0;
        for &j in mesh.one_ring(i)? {
            let wij = weights[&(i.min(j), i.max(j))];
            acc[0] += wij * emb.uv[j][0];
            acc[1] += wij * emb.uv[j][1];
            total += wij;
        }
        if total > 0.0 {
            worst = worst
                .max((emb.uv[i][0] - acc[0] / total).abs())
                .max((emb.uv[i][1] - acc[1] / total).abs());
        }
    }
    Ok(worst)
}

pub fn signed_area(uv: &[[f64; 2]], tri: &[usize; 3]) -> f64 {
    let a = uv[tri[0]];
    let b = uv[tri[1]];
    let c = uv[tri[2]];
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
}

/// Number of triangles with non-positive signed area in the embedding.
pub fn check_flips(emb: &UVEmbedding, mesh: &Mesh) -> usize {
    mesh.triangles()
        .iter()
        .filter(|tri| signed_area(&emb.uv, tri) <= 0.0)
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    #[test]
    fn single_triangle_boundary_on_circle() {
        let mesh = Mesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let report = mesh.validate_topology();
        let circle = boundary_to_circle(&mesh, &report).unwrap();
        assert_eq!(circle.len(), 3);
        assert_eq!(circle[0].0, 0);
        assert!((circle[0].1[0] - 1.0).abs() < 1e-12);
        assert!(circle[0].1[1].abs() < 1e-12);
        for (_, p) in &circle {
            let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
            assert!((r - 1.0).abs() < 1e-12);
        }
        // Edge lengths 1, sqrt(2), 1: vertex 1 sits at angle 2*pi/(2+sqrt(2)).
        let expect = std::f64::consts::TAU / (2.0 + std::f64::consts::SQRT_2);
        let got = circle[1].1[1].atan2(circle[1].1[0]);
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn closed_mesh_has_no_circle_boundary() {
        let mesh = synth::icosahedron();
        let report = mesh.validate_topology();
        assert!(boundary_to_circle(&mesh, &report).is_err());
    }

    #[test]
    fn flat_grid_flattens_without_flips() {
        let patch = synth::square_patch(8);
        let report = patch.mesh.validate_topology();
        let circle = boundary_to_circle(&patch.mesh, &report).unwrap();
        let emb = solve_harmonic(&patch.mesh, &circle).unwrap();
        assert_eq!(emb.frame, Frame::Disk);
        assert_eq!(emb.source_n(), patch.mesh.n_vertices());
        assert_eq!(check_flips(&emb, &patch.mesh), 0);
        for p in &emb.uv {
            assert!(p[0].hypot(p[1]) <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn interior_vertex_is_ring_average() {
        let patch = synth::square_patch(6);
        let report = patch.mesh.validate_topology();
        let circle = boundary_to_circle(&patch.mesh, &report).unwrap();
        let emb = solve_harmonic(&patch.mesh, &circle).unwrap();
        let boundary: std::collections::BTreeSet<usize> =
            circle.iter().map(|&(v, _)| v).collect();
        let is_fixed: Vec<bool> = (0..patch.mesh.n_vertices())
            .map(|v| boundary.contains(&v))
            .collect();
        let resid = harmonic_residual(&patch.mesh, &emb, &is_fixed).unwrap();
        assert!(resid < HARMONIC_RESIDUAL_LIMIT, "residual {resid:.3e}");
    }

    #[test]
    fn sparse_matches_dense() {
        let patch = synth::square_patch(10);
        let report = patch.mesh.validate_topology();
        let circle = boundary_to_circle(&patch.mesh, &report).unwrap();
        let dense =
            solve_harmonic_with(&patch.mesh, &circle, SolverChoice::ForceDense).unwrap();
        let sparse =
            solve_harmonic_with(&patch.mesh, &circle, SolverChoice::ForceSparse).unwrap();
        for (a, b) in dense.uv.iter().zip(&sparse.uv) {
            assert!((a[0] - b[0]).abs() < 1e-9);
            assert!((a[1] - b[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn curved_patch_flattens_flip_free() {
        let mesh = synth::wavy_patch(12, 12, 0.15, 7);
        let report = mesh.validate_topology();
        let circle = boundary_to_circle(&mesh, &report).unwrap();
        let emb = solve_harmonic(&mesh, &circle).unwrap();
        assert_eq!(check_flips(&emb, &mesh), 0);
    }

    #[test]
    fn holed_patch_hole_ring_floats_inside() {
        let patch = synth::annulus_patch(12, 0.25);
        let report = patch.mesh.validate_topology();
        assert_eq!(report.boundary_loops, 2);
        let circle = boundary_to_circle(&patch.mesh, &report).unwrap();
        // Outer loop is the longer one: it must touch the patch corners.
        let emb = solve_harmonic(&patch.mesh, &circle).unwrap();
        let pinned: std::collections::BTreeSet<usize> =
            circle.iter().map(|&(v, _)| v).collect();
        for (v, p) in emb.uv.iter().enumerate() {
            let r = p[0].hypot(p[1]);
            if pinned.contains(&v) {
                assert!((r - 1.0).abs() < 1e-12);
            } else {
                assert!(r < 1.0 - 1e-9, "free vertex {v} at radius {r}");
            }
        }
    }

    #[test]
    fn all_pinned_is_an_error() {
        let mesh = Mesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let report = mesh.validate_topology();
        let circle = boundary_to_circle(&mesh, &report).unwrap();
        assert!(solve_harmonic(&mesh, &circle).is_err());
    }

    #[test]
    fn flips_counted_on_reversed_triangle() {
        let uv = vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let mesh = Mesh::new(
            vec![
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [1.0, 1.0, 0.0],
            ],
            vec![[0, 1, 2], [2, 1, 3]],
        )
        .unwrap();
        let emb = UVEmbedding {
            uv,
            frame: Frame::Disk,
        };
        assert_eq!(check_flips(&emb, &mesh), 0);
        let mut flipped = emb.clone();
        flipped.uv.swap(0, 1);
        assert_eq!(check_flips(&flipped, &mesh), 1);
    }
}
