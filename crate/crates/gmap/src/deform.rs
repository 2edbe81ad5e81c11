//! Deformation of an initial flattening into the unit square: key
//! vertices (corners, edge, central axis, mirrored landmarks) are pinned
//! to rearranged targets, every other vertex follows iterated local
//! rigid fits whose offsets are smoothed by a sparse least squares
//! solve.

use serde::{Deserialize, Serialize};
use sprs::{CsMat, TriMat};

use crate::error::{Error, Result};
use crate::harmonic::{check_flips, solve_harmonic, Frame, UVEmbedding};
use crate::mesh::{Mesh, TopologyReport};
use crate::rigid::fit_rigid;
use crate::sparse::{csr_transpose_mul, SolverChoice, SpdSolver};

/// Square corner targets in assignment order: counterclockwise from the
/// origin corner.
pub const SQUARE_CORNERS: [[f64; 2]; 4] = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];

/// Mirror across the square's vertical midline.
pub fn mirror_point(p: [f64; 2]) -> [f64; 2] {
    [1.0 - p[0], p[1]]
}

/// A left/right vertex pair pinned symmetrically; `target` is the uv
/// target of the left member, the right member goes to its mirror.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LandmarkPair {
    pub left: usize,
    pub right: usize,
    pub target: [f64; 2],
}

/// The fixed vertex roles driving the square deformation.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyVertexSpec {
    pub landmark_pairs: Vec<LandmarkPair>,
    /// Central-axis vertices, ordered chin to forehead or the reverse.
    pub axis_vertices: Vec<usize>,
    /// The outer boundary loop in cyclic order.
    pub edge_vertices: Vec<usize>,
    /// Boundary vertices pinned to the four square corners, in
    /// [`SQUARE_CORNERS`] order.
    pub corner_assignment: [usize; 4],
}

/// On-disk form of a key-vertex spec. Edge vertices are never listed in
/// the document; they are always the mesh's outer boundary loop and get
/// attached by [`KeySpecDoc::resolve`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeySpecDoc {
    /// One entry per mirrored pair: [left, right, target_x, target_y],
    /// the target belonging to the left member.
    pub landmark_pairs: Vec<(usize, usize, f64, f64)>,
    pub axis: Vec<usize>,
    pub corners: [usize; 4],
}

impl KeySpecDoc {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::KeySpec(format!("bad key spec: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("key spec doc serializes")
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        Ok(std::fs::write(path, self.to_json())?)
    }

    /// Builds the full spec by attaching the outer boundary loop from a
    /// topology report.
    pub fn resolve(&self, report: &TopologyReport) -> KeyVertexSpec {
        KeyVertexSpec {
            landmark_pairs: self
                .landmark_pairs
                .iter()
                .map(|&(left, right, tx, ty)| LandmarkPair {
                    left,
                    right,
                    target: [tx, ty],
                })
                .collect(),
            axis_vertices: self.axis.clone(),
            edge_vertices: report.boundary_vertices.clone(),
            corner_assignment: self.corners,
        }
    }
}

impl From<&KeyVertexSpec> for KeySpecDoc {
    fn from(spec: &KeyVertexSpec) -> Self {
        Self {
            landmark_pairs: spec
                .landmark_pairs
                .iter()
                .map(|p| (p.left, p.right, p.target[0], p.target[1]))
                .collect(),
            axis: spec.axis_vertices.clone(),
            corners: spec.corner_assignment,
        }
    }
}

impl KeyVertexSpec {
    /// Index-range and role-consistency checks that need only the vertex
    /// count. Topology-level checks live in [`KeyVertexSpec::validate_against`].
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut role = vec![0u8; n]; // 1 landmark, 2 axis, 3 edge
        let mut claim = |v: usize, code: u8, what: &str| -> Result<()> {
            if v >= n {
                return Err(Error::KeySpec(format!(
                    "{what} vertex {v} out of range for {n} vertices"
                )));
            }
            if role[v] != 0 && role[v] != code {
                return Err(Error::KeySpec(format!(
                    "vertex {v} appears in two roles"
                )));
            }
            if role[v] == code {
                return Err(Error::KeySpec(format!(
                    "{what} vertex {v} listed twice"
                )));
            }
            role[v] = code;
            Ok(())
        };
        for pair in &self.landmark_pairs {
            if pair.left == pair.right {
                return Err(Error::KeySpec(format!(
                    "landmark pair ({}, {}) repeats one vertex",
                    pair.left, pair.right
                )));
            }
            claim(pair.left, 1, "landmark")?;
            claim(pair.right, 1, "landmark")?;
            let [tx, ty] = pair.target;
            if !(tx.is_finite() && ty.is_finite()) {
                return Err(Error::KeySpec(format!(
                    "landmark {} has a non-finite target",
                    pair.left
                )));
            }
            if !(0.0..=1.0).contains(&tx) || !(0.0..=1.0).contains(&ty) {
                return Err(Error::KeySpec(format!(
                    "landmark {} target ({tx}, {ty}) outside the unit square",
                    pair.left
                )));
            }
        }
        for &v in &self.axis_vertices {
            claim(v, 2, "axis")?;
        }
        if self.edge_vertices.len() < 3 {
            return Err(Error::KeySpec(format!(
                "edge list has {} vertices, a boundary loop needs at least 3",
                self.edge_vertices.len()
            )));
        }
        for &v in &self.edge_vertices {
            claim(v, 3, "edge")?;
        }
        let mut pos = [0usize; 4];
        for (k, &c) in self.corner_assignment.iter().enumerate() {
            pos[k] = self
                .edge_vertices
                .iter()
                .position(|&e| e == c)
                .ok_or_else(|| {
                    Error::KeySpec(format!("corner vertex {c} is not in the edge list"))
                })?;
        }
        if pos.iter().collect::<std::collections::BTreeSet<_>>().len() != 4 {
            return Err(Error::KeySpec("corner vertices are not distinct".into()));
        }
        let m = self.edge_vertices.len();
        let rel = |p: usize| (p + m - pos[0]) % m;
        if !(rel(pos[1]) < rel(pos[2]) && rel(pos[2]) < rel(pos[3])) {
            return Err(Error::KeySpec(
                "corners are not in cyclic order along the edge list".into(),
            ));
        }
        Ok(())
    }

    /// Full validation against a mesh: the edge list must be exactly the
    /// outer boundary loop, in its orientation, up to starting point.
    pub fn validate_against(&self, mesh: &Mesh, report: &TopologyReport) -> Result<()> {
        self.validate(mesh.n_vertices())?;
        let loop_vs = &report.boundary_vertices;
        if loop_vs.len() != self.edge_vertices.len() {
            return Err(Error::KeySpec(format!(
                "edge list has {} vertices, the outer boundary loop has {}",
                self.edge_vertices.len(),
                loop_vs.len()
            )));
        }
        let start = loop_vs
            .iter()
            .position(|&v| v == self.edge_vertices[0])
            .ok_or_else(|| {
                Error::KeySpec(format!(
                    "edge vertex {} is not on the outer boundary loop",
                    self.edge_vertices[0]
                ))
            })?;
        let m = loop_vs.len();
        for (k, &e) in self.edge_vertices.iter().enumerate() {
            let b = loop_vs[(start + k) % m];
            if e != b {
                return Err(Error::KeySpec(format!(
                    "edge list diverges from the outer boundary loop at position {k} \
                     (got {e}, loop has {b})"
                )));
            }
        }
        Ok(())
    }
}

/// Fixed vertices with their uv targets.
#[derive(Debug, Clone)]
pub struct FixedSet {
    n: usize,
    indices: Vec<usize>,
    targets: Vec<[f64; 2]>,
    fixed: Vec<bool>,
}

impl FixedSet {
    pub fn from_pairs(n: usize, mut pairs: Vec<(usize, [f64; 2])>) -> Result<Self> {
        pairs.sort_by_key(|&(v, _)| v);
        let mut fixed = vec![false; n];
        let mut indices = Vec::with_capacity(pairs.len());
        let mut targets = Vec::with_capacity(pairs.len());
        for (v, t) in pairs {
            if v >= n {
                return Err(Error::KeySpec(format!(
                    "fixed vertex {v} out of range for {n} vertices"
                )));
            }
            if fixed[v] {
                return Err(Error::KeySpec(format!("vertex {v} fixed twice")));
            }
            fixed[v] = true;
            indices.push(v);
            targets.push(t);
        }
        Ok(Self {
            n,
            indices,
            targets,
            fixed,
        })
    }

    pub fn n_vertices(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn is_fixed(&self, v: usize) -> bool {
        self.fixed[v]
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, [f64; 2])> + '_ {
        self.indices.iter().copied().zip(self.targets.iter().copied())
    }
}

/// Concentric disk-to-square warp: wedge by wedge, radius r circles map
/// to half-side r squares at 4/pi times the angular speed. Bijective,
/// orientation preserving (the Jacobian determinant is 4/pi inside each
/// wedge), identity on the two axis-aligned diameters, and it carries
/// boundary arc length to perimeter length proportionally.
fn disk_to_square(p: [f64; 2]) -> [f64; 2] {
    let [x, y] = p;
    let r = x.hypot(y);
    if r == 0.0 {
        return [0.0, 0.0];
    }
    let quarter = 4.0 / std::f64::consts::PI;
    if x.abs() >= y.abs() {
        let s = x.signum();
        [s * r, s * r * quarter * (y / x).atan()]
    } else {
        let s = y.signum();
        [s * r * quarter * (x / y).atan(), s * r]
    }
}

/// Rotates a disk embedding so the key-vertex layout matches the square:
/// the axis chain becomes vertical (candidates scored by how close the
/// corner vertices land to the square corners), then fills [0,1] x [0,1]
/// through the concentric warp, which starts the free interior much
/// closer to where the square deformation settles than the bare disk
/// would. Square-frame input is returned as is.
pub fn orient_to_square(emb: &UVEmbedding, spec: &KeyVertexSpec) -> Result<UVEmbedding> {
    if emb.frame == Frame::Square {
        return Ok(emb.clone());
    }
    let uv = &emb.uv;
    for &c in &spec.corner_assignment {
        if c >= uv.len() {
            return Err(Error::KeySpec(format!(
                "corner vertex {c} out of range for {} vertices",
                uv.len()
            )));
        }
    }
    let axis_dir = dominant_direction(&spec.axis_vertices, uv);
    let candidates: Vec<f64> = if let Some(d) = axis_dir {
        let phi = std::f64::consts::FRAC_PI_2 - d[1].atan2(d[0]);
        vec![phi, phi + std::f64::consts::PI]
    } else if !spec.landmark_pairs.is_empty() {
        let mut l = [0.0; 2];
        let mut r = [0.0; 2];
        for p in &spec.landmark_pairs {
            l[0] += uv[p.left][0];
            l[1] += uv[p.left][1];
            r[0] += uv[p.right][0];
            r[1] += uv[p.right][1];
        }
        let d = [r[0] - l[0], r[1] - l[1]];
        vec![-d[1].atan2(d[0])]
    } else {
        (0..4)
            .map(|k| k as f64 * std::f64::consts::FRAC_PI_2)
            .collect()
    };
    let mut best: Option<(f64, f64)> = None;
    for &phi in &candidates {
        let (s, c) = phi.sin_cos();
        let mut score = 0.0;
        for (k, &cv) in spec.corner_assignment.iter().enumerate() {
            let p = uv[cv];
            let q = [
                (c * p[0] - s * p[1] + 1.0) / 2.0,
                (s * p[0] + c * p[1] + 1.0) / 2.0,
            ];
            score += (q[0] - SQUARE_CORNERS[k][0]).powi(2) + (q[1] - SQUARE_CORNERS[k][1]).powi(2);
        }
        if best.map_or(true, |(bs, _)| score < bs) {
            best = Some((score, phi));
        }
    }
    let (_, phi) = best.expect("at least one candidate");
    let (s, c) = phi.sin_cos();
    let rotated: Vec<[f64; 2]> = uv
        .iter()
        .map(|p| {
            let q = disk_to_square([c * p[0] - s * p[1], s * p[0] + c * p[1]]);
            [(q[0] + 1.0) / 2.0, (q[1] + 1.0) / 2.0]
        })
        .collect();
    Ok(UVEmbedding {
        uv: rotated,
        frame: Frame::Square,
    })
}

/// Direction of largest spread of the listed vertices, or None when it
/// is undetermined (fewer than 2 vertices or coincident positions).
fn dominant_direction(vertices: &[usize], uv: &[[f64; 2]]) -> Option<[f64; 2]> {
    if vertices.len() < 2 {
        return None;
    }
    let mut mean = [0.0; 2];
    for &v in vertices {
        mean[0] += uv[v][0];
        mean[1] += uv[v][1];
    }
    mean[0] /= vertices.len() as f64;
    mean[1] /= vertices.len() as f64;
    let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
    for &v in vertices {
        let dx = uv[v][0] - mean[0];
        let dy = uv[v][1] - mean[1];
        a += dx * dx;
        b += dx * dy;
        c += dy * dy;
    }
    let lam = 0.5 * (a + c) + (0.25 * (a - c).powi(2) + b * b).sqrt();
    let v1 = [b, lam - a];
    let v2 = [lam - c, b];
    let n1 = v1[0].hypot(v1[1]);
    let n2 = v2[0].hypot(v2[1]);
    let eps = 1e-14 * (a + c).max(1.0);
    if n1 > eps {
        Some([v1[0] / n1, v1[1] / n1])
    } else if n2 > eps {
        Some([v2[0] / n2, v2[1] / n2])
    } else {
        None
    }
}

/// Computes the pinned target of every key vertex from a square-frame
/// embedding: edge vertices spread along the perimeter proportionally to
/// their arc length between corners, axis vertices respaced along
/// x = 0.5, right landmarks mirrored from their left partner's target.
pub fn rearrange_key_vertices(
    mesh: &Mesh,
    emb: &UVEmbedding,
    spec: &KeyVertexSpec,
) -> Result<FixedSet> {
    spec.validate(emb.source_n())?;
    if emb.source_n() != mesh.n_vertices() {
        return Err(Error::Shape(format!(
            "embedding has {} vertices, mesh has {}",
            emb.source_n(),
            mesh.n_vertices()
        )));
    }
    let uv = &emb.uv;
    let m = spec.edge_vertices.len();
    let start = spec
        .edge_vertices
        .iter()
        .position(|&v| v == spec.corner_assignment[0])
        .expect("validated corner membership");
    let walk: Vec<usize> = (0..m)
        .map(|k| spec.edge_vertices[(start + k) % m])
        .collect();
    let mut corner_walk_pos = [0usize; 4];
    for (k, &c) in spec.corner_assignment.iter().enumerate() {
        corner_walk_pos[k] = walk.iter().position(|&v| v == c).expect("validated");
    }

    // Chord lengths via x*x + y*y, not hypot, and cumulative sums local
    // to each segment: both choices keep equal chords bitwise equal, so
    // their targets land exactly on lerp breakpoints like (1, 0.5).
    let chord = |k: usize| {
        let a = uv[walk[k]];
        let b = uv[walk[(k + 1) % m]];
        let dx = a[0] - b[0];
        let dy = a[1] - b[1];
        (dx * dx + dy * dy).sqrt()
    };

    let mut pairs: Vec<(usize, [f64; 2])> = Vec::new();
    for seg in 0..4 {
        let w0 = corner_walk_pos[seg];
        let w1 = if seg == 3 { m } else { corner_walk_pos[seg + 1] };
        let mut local = Vec::with_capacity(w1 - w0 + 1);
        let mut acc = 0.0_f64;
        for k in w0..w1 {
            local.push(acc);
            acc += chord(k);
        }
        if acc <= 0.0 {
            return Err(Error::KeySpec(format!(
                "corners {} and {} coincide along the boundary",
                spec.corner_assignment[seg],
                spec.corner_assignment[(seg + 1) % 4]
            )));
        }
        let from = SQUARE_CORNERS[seg];
        let to = SQUARE_CORNERS[(seg + 1) % 4];
        for (k, s) in (w0..w1).zip(local) {
            let f = s / acc;
            pairs.push((
                walk[k],
                [
                    from[0] + f * (to[0] - from[0]),
                    from[1] + f * (to[1] - from[1]),
                ],
            ));
        }
    }
    if !spec.axis_vertices.is_empty() {
        pairs.extend(axis_targets(mesh, uv, &spec.axis_vertices)?);
    }
    for p in &spec.landmark_pairs {
        pairs.push((p.left, p.target));
        pairs.push((p.right, mirror_point(p.target)));
    }
    FixedSet::from_pairs(emb.source_n(), pairs)
}

/// Respaced targets for the axis column: vertices keep their current-y
/// order but land on x = 0.5 spaced by cumulative 3D arc length,
/// anchored at the two terminal vertices' current y. The initial
/// embedding compresses the interior, so pinning current y directly
/// would hold the axis against the relaxed field around it; arc length
/// matches the convention used for the outer boundary.
pub fn axis_targets(
    mesh: &Mesh,
    uv: &[[f64; 2]],
    axis: &[usize],
) -> Result<Vec<(usize, [f64; 2])>> {
    if axis.is_empty() {
        return Ok(Vec::new());
    }
    let mut order = axis.to_vec();
    order.sort_by(|&a, &b| uv[a][1].partial_cmp(&uv[b][1]).expect("finite embedding"));
    if order.len() == 1 {
        return Ok(vec![(order[0], [0.5, uv[order[0]][1]])]);
    }
    let mut arc = Vec::with_capacity(order.len());
    let mut acc = 0.0_f64;
    arc.push(0.0);
    for w in order.windows(2) {
        let a = mesh.vertices()[w[0]];
        let b = mesh.vertices()[w[1]];
        acc += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
        arc.push(acc);
    }
    if acc <= 0.0 {
        return Err(Error::KeySpec(
            "axis vertices coincide in 3D, cannot be respaced".into(),
        ));
    }
    let y0 = uv[order[0]][1];
    let y1 = uv[order[order.len() - 1]][1];
    Ok(order
        .iter()
        .zip(&arc)
        .map(|(&v, &s)| (v, [0.5, y0 + (s / acc) * (y1 - y0)]))
        .collect())
}

/// Prediction of every vertex from the rigid fit of its local
/// neighborhood (the vertex and its one-ring) against the current
/// embedding lifted to z = 0.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub predicted: Vec<[f64; 3]>,
    pub degenerate_fits: usize,
    pub max_fit_residual: f64,
}

pub fn predict_positions(mesh: &Mesh, emb: &UVEmbedding) -> Result<Vec<[f64; 3]>> {
    if emb.source_n() != mesh.n_vertices() {
        return Err(Error::Shape(format!(
            "embedding has {} vertices, mesh has {}",
            emb.source_n(),
            mesh.n_vertices()
        )));
    }
    Ok(predict_detailed(mesh, &emb.uv)?.predicted)
}

pub(crate) fn predict_detailed(mesh: &Mesh, uv: &[[f64; 2]]) -> Result<Prediction> {
    let n = mesh.n_vertices();
    let mut predicted = vec![[0.0_f64; 3]; n];
    let mut degenerate_fits = 0;
    let mut max_fit_residual = 0.0_f64;
    let mut source: Vec<[f64; 3]> = Vec::new();
    let mut target: Vec<[f64; 3]> = Vec::new();
    for i in 0..n {
        let ring = mesh.one_ring(i)?;
        source.clear();
        target.clear();
        source.push(mesh.vertices()[i]);
        target.push([uv[i][0], uv[i][1], 0.0]);
        for &j in ring {
            source.push(mesh.vertices()[j]);
            target.push([uv[j][0], uv[j][1], 0.0]);
        }
        let fit = fit_rigid(&source, &target).map_err(|e| {
            Error::Shape(format!("local fit at vertex {i} failed: {e}"))
        })?;
        if fit.degenerate {
            degenerate_fits += 1;
        }
        let mut resid = 0.0;
        for (s, t) in source.iter().zip(&target) {
            let q = fit.apply(*s);
            resid +=
                (q[0] - t[0]).powi(2) + (q[1] - t[1]).powi(2) + (q[2] - t[2]).powi(2);
        }
        max_fit_residual = max_fit_residual.max(resid.sqrt());
        predicted[i] = fit.apply(mesh.vertices()[i]);
    }
    Ok(Prediction {
        predicted,
        degenerate_fits,
        max_fit_residual,
    })
}

/// Entries of the full n x n smoothing matrix: diagonal 1 + 2N_i,
/// -2 for each ring neighbor.
pub fn offset_matrix_triplets(mesh: &Mesh) -> Vec<(usize, usize, f64)> {
    let n = mesh.n_vertices();
    let mut t = Vec::new();
    for i in 0..n {
        let ring = mesh.one_ring(i).expect("vertex index in range");
        t.push((i, i, 1.0 + 2.0 * ring.len() as f64));
        for &j in ring {
            t.push((i, j, -2.0));
        }
    }
    t
}

/// Factorized least squares system for offset smoothing over a given
/// fixed set. The matrix depends only on topology and the fixed set, so
/// one solver serves every iteration of a deformation run.
pub struct OffsetSolver {
    free: Vec<usize>,
    a_free: CsMat<f64>,
    normal: SpdSolver,
}

impl OffsetSolver {
    pub fn new(mesh: &Mesh, fixed: &FixedSet) -> Result<Self> {
        let n = mesh.n_vertices();
        if fixed.n_vertices() != n {
            return Err(Error::Shape(format!(
                "fixed set sized for {} vertices, mesh has {n}",
                fixed.n_vertices()
            )));
        }
        if fixed.is_empty() {
            return Err(Error::KeySpec(
                "offset smoothing needs a non-empty fixed set".into(),
            ));
        }
        let free: Vec<usize> = (0..n).filter(|&v| !fixed.is_fixed(v)).collect();
        if free.is_empty() {
            return Err(Error::KeySpec("every vertex is fixed, nothing to solve".into()));
        }
        let mut col_of = vec![usize::MAX; n];
        for (c, &v) in free.iter().enumerate() {
            col_of[v] = c;
        }
        let mut tri = TriMat::new((n, free.len()));
        for (r, c, v) in offset_matrix_triplets(mesh) {
            if col_of[c] != usize::MAX {
                tri.add_triplet(r, col_of[c], v);
            }
        }
        let a_free: CsMat<f64> = tri.to_csr();
        let at = a_free.transpose_view().to_csr();
        let normal_mat = &at * &a_free;
        let normal = SpdSolver::from_csr(normal_mat, SolverChoice::Auto)?;
        Ok(Self {
            free,
            a_free,
            normal,
        })
    }

    /// Solves for the offsets given per-vertex right-hand rows, one per
    /// mesh vertex. Returns n rows with fixed rows zero.
    pub fn solve(&self, b: &[[f64; 3]]) -> Result<Vec<[f64; 3]>> {
        let n = self.a_free.rows();
        if b.len() != n {
            return Err(Error::Shape(format!(
                "rhs has {} rows, mesh has {n}",
                b.len()
            )));
        }
        let mut offsets = vec![[0.0_f64; 3]; n];
        let mut col = vec![0.0_f64; n];
        for c in 0..3 {
            for (i, row) in b.iter().enumerate() {
                col[i] = row[c];
            }
            let rhs = csr_transpose_mul(&self.a_free, &col);
            let x = self.normal.solve(&rhs)?;
            for (r, &v) in self.free.iter().enumerate() {
                offsets[v][c] = x[r];
            }
        }
        Ok(offsets)
    }

    /// Max abs residual of the normal equations for a candidate
    /// solution, checked per column.
    pub fn normal_residual(&self, b: &[[f64; 3]], offsets: &[[f64; 3]]) -> f64 {
        let n = self.a_free.rows();
        let mut worst = 0.0_f64;
        let mut col = vec![0.0_f64; n];
        let mut x = vec![0.0_f64; self.free.len()];
        for c in 0..3 {
            for (i, row) in b.iter().enumerate() {
                col[i] = row[c];
            }
            for (r, &v) in self.free.iter().enumerate() {
                x[r] = offsets[v][c];
            }
            let ax = crate::sparse::csr_mul(&self.a_free, &x);
            let atax = csr_transpose_mul(&self.a_free, &ax);
            let atb = csr_transpose_mul(&self.a_free, &col);
            for (l, r) in atax.iter().zip(&atb) {
                worst = worst.max((l - r).abs());
            }
        }
        worst
    }
}

/// Solves the smoothing system for one set of predictions. Rows of the
/// result are zero for fixed vertices.
pub fn smooth_offsets(
    mesh: &Mesh,
    emb: &UVEmbedding,
    predicted: &[[f64; 3]],
    fixed: &FixedSet,
) -> Result<Vec<[f64; 3]>> {
    let solver = OffsetSolver::new(mesh, fixed)?;
    let b = offset_rhs(emb, predicted)?;
    solver.solve(&b)
}

fn offset_rhs(emb: &UVEmbedding, predicted: &[[f64; 3]]) -> Result<Vec<[f64; 3]>> {
    if predicted.len() != emb.source_n() {
        return Err(Error::Shape(format!(
            "{} predictions for {} vertices",
            predicted.len(),
            emb.source_n()
        )));
    }
    Ok(emb
        .uv
        .iter()
        .zip(predicted)
        .map(|(u, p)| [p[0] - u[0], p[1] - u[1], p[2]])
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeformParams {
    pub max_iterations: usize,
    /// Mean in-plane offset length below which the run stops.
    pub convergence_threshold: f64,
    /// Progress reporting stride for callers that log; the history
    /// always records every iteration.
    pub log_every: usize,
}

impl Default for DeformParams {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            convergence_threshold: 1e-5,
            log_every: 10,
        }
    }
}

impl DeformParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations < 1 {
            return Err(Error::Shape("max_iterations must be at least 1".into()));
        }
        if !(self.convergence_threshold > 0.0) {
            return Err(Error::Shape("convergence_threshold must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub iteration: usize,
    pub mean_offset: f64,
    pub max_offset: f64,
    pub degenerate_fits: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeformReport {
    pub iterations: usize,
    pub converged: bool,
    pub flips: usize,
    /// Mirror symmetry of the final embedding over the spec's landmark
    /// pairs and axis; None when the spec pins neither.
    pub symmetry: Option<f64>,
    /// How far the farthest vertex sits outside [0,1] x [0,1].
    pub uv_overshoot: f64,
    pub history: Vec<IterationStats>,
}

/// Runs the full deformation: orient the embedding to the square, pin
/// rearranged key vertices, then iterate rigid prediction and offset
/// smoothing until the mean applied offset drops under the threshold.
pub fn deform_to_gmap(
    mesh: &Mesh,
    emb: &UVEmbedding,
    spec: &KeyVertexSpec,
    params: &DeformParams,
) -> Result<(UVEmbedding, DeformReport)> {
    params.validate()?;
    spec.validate(mesh.n_vertices())?;
    if emb.source_n() != mesh.n_vertices() {
        return Err(Error::Shape(format!(
            "embedding has {} vertices, mesh has {}",
            emb.source_n(),
            mesh.n_vertices()
        )));
    }
    let input_flips = check_flips(emb, mesh);
    if input_flips > 0 {
        return Err(Error::Topology(format!(
            "input embedding has {input_flips} flipped triangles"
        )));
    }
    let oriented = orient_to_square(emb, spec)?;
    let fixed = rearrange_key_vertices(mesh, &oriented, spec)?;
    let mut uv = oriented.uv;
    for (v, t) in fixed.iter() {
        uv[v] = t;
    }
    // A fresh harmonic solve against the rearranged pins gives the iteration
    // an in-plane-smooth start; keeping the oriented embedding instead spends
    // hundreds of iterations diffusing the pin displacements inward.
    if let Ok(init) = solve_harmonic(mesh, &fixed.iter().collect::<Vec<_>>()) {
        for (v, q) in init.uv.iter().enumerate() {
            if !fixed.is_fixed(v) {
                uv[v] = *q;
            }
        }
    }
    let solver = OffsetSolver::new(mesh, &fixed)?;
    let free: Vec<usize> = (0..mesh.n_vertices())
        .filter(|&v| !fixed.is_fixed(v))
        .collect();

    let mut history = Vec::new();
    let mut converged = false;
    for iteration in 1..=params.max_iterations {
        let pred = predict_detailed(mesh, &uv)?;
        let b: Vec<[f64; 3]> = uv
            .iter()
            .zip(&pred.predicted)
            .map(|(u, p)| [p[0] - u[0], p[1] - u[1], p[2]])
            .collect();
        let offsets = solver.solve(&b)?;
        let mut sum = 0.0;
        let mut max_offset = 0.0_f64;
        for &v in &free {
            let len = offsets[v][0].hypot(offsets[v][1]);
            sum += len;
            max_offset = max_offset.max(len);
        }
        let mean_offset = sum / free.len() as f64;
        for &v in &free {
            uv[v][0] += offsets[v][0];
            uv[v][1] += offsets[v][1];
        }
        history.push(IterationStats {
            iteration,
            mean_offset,
            max_offset,
            degenerate_fits: pred.degenerate_fits,
        });
        if mean_offset < params.convergence_threshold {
            converged = true;
            break;
        }
    }

    let final_emb = UVEmbedding {
        uv,
        frame: Frame::Square,
    };
    let flips = check_flips(&final_emb, mesh);
    let pairs: Vec<(usize, usize)> = spec
        .landmark_pairs
        .iter()
        .map(|p| (p.left, p.right))
        .collect();
    let symmetry = if pairs.is_empty() && spec.axis_vertices.is_empty() {
        None
    } else {
        Some(symmetry_error(&final_emb, &pairs, &spec.axis_vertices))
    };
    let mut uv_overshoot = 0.0_f64;
    for p in &final_emb.uv {
        for c in 0..2 {
            uv_overshoot = uv_overshoot.max(-p[c]).max(p[c] - 1.0);
        }
    }
    let report = DeformReport {
        iterations: history.len(),
        converged,
        flips,
        symmetry,
        uv_overshoot: uv_overshoot.max(0.0),
        history,
    };
    Ok((final_emb, report))
}

/// Max deviation from mirror symmetry: over pairs, the distance between
/// the left vertex and the mirrored right vertex; over axis vertices,
/// the distance from the x = 0.5 line.
pub fn symmetry_error(emb: &UVEmbedding, pairs: &[(usize, usize)], axis: &[usize]) -> f64 {
    let mut worst = 0.0_f64;
    for &(l, r) in pairs {
        let lp = emb.uv[l];
        let rm = mirror_point(emb.uv[r]);
        worst = worst.max((lp[0] - rm[0]).hypot(lp[1] - rm[1]));
    }
    for &v in axis {
        worst = worst.max((emb.uv[v][0] - 0.5).abs());
    }
    worst
}
