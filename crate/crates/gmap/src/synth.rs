//! Deterministic synthetic meshes for tests, fixtures, and demos:
//! spheres, flat and wavy grid patches, an annulus, and a
//! mirror-symmetric face-like surface with eye and mouth holes plus a
//! matching key-vertex document.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::deform::{axis_targets, orient_to_square, KeySpecDoc, KeyVertexSpec, SQUARE_CORNERS};
use crate::harmonic::{boundary_to_circle, solve_harmonic, Frame, UVEmbedding};
use crate::mesh::{Mesh, TopologyReport};

/// An open mesh bundled with a square-frame parameterization of it.
pub struct Patch {
    pub mesh: Mesh,
    pub uv: UVEmbedding,
}

pub fn icosahedron() -> Mesh {
    let phi = (1.0 + 5.0_f64.sqrt()) / 2.0;
    let raw = [
        [-1.0, phi, 0.0],
        [1.0, phi, 0.0],
        [-1.0, -phi, 0.0],
        [1.0, -phi, 0.0],
        [0.0, -1.0, phi],
        [0.0, 1.0, phi],
        [0.0, -1.0, -phi],
        [0.0, 1.0, -phi],
        [phi, 0.0, -1.0],
        [phi, 0.0, 1.0],
        [-phi, 0.0, -1.0],
        [-phi, 0.0, 1.0],
    ];
    let vertices: Vec<[f64; 3]> = raw
        .iter()
        .map(|v| {
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            [v[0] / n, v[1] / n, v[2] / n]
        })
        .collect();
    let triangles = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    Mesh::new(vertices, triangles).expect("icosahedron is well formed")
}

/// Icosahedron subdivided `subdivisions` times, vertices on the unit
/// sphere. Each level quadruples the triangle count.
pub fn icosphere(subdivisions: usize) -> Mesh {
    let mut vertices: Vec<[f64; 3]> = icosahedron().vertices().to_vec();
    let mut triangles: Vec<[usize; 3]> = icosahedron().triangles().to_vec();
    for _ in 0..subdivisions {
        let mut midpoint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let mut next = Vec::with_capacity(triangles.len() * 4);
        for tri in &triangles {
            let mut mids = [0usize; 3];
            for k in 0..3 {
                let a = tri[k];
                let b = tri[(k + 1) % 3];
                let key = (a.min(b), a.max(b));
                mids[k] = *midpoint.entry(key).or_insert_with(|| {
                    let pa = vertices[a];
                    let pb = vertices[b];
                    let m = [
                        (pa[0] + pb[0]) / 2.0,
                        (pa[1] + pb[1]) / 2.0,
                        (pa[2] + pb[2]) / 2.0,
                    ];
                    let n = (m[0] * m[0] + m[1] * m[1] + m[2] * m[2]).sqrt();
                    vertices.push([m[0] / n, m[1] / n, m[2] / n]);
                    vertices.len() - 1
                });
            }
            next.push([tri[0], mids[0], mids[2]]);
            next.push([tri[1], mids[1], mids[0]]);
            next.push([tri[2], mids[2], mids[1]]);
            next.push([mids[0], mids[1], mids[2]]);
        }
        triangles = next;
    }
    Mesh::new(vertices, triangles).expect("subdivision preserves validity")
}

fn grid_triangles(nx: usize, ny: usize) -> Vec<[usize; 3]> {
    let mut tris = Vec::with_capacity(2 * (nx - 1) * (ny - 1));
    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            let a = j * nx + i;
            let b = j * nx + i + 1;
            let c = (j + 1) * nx + i + 1;
            let d = (j + 1) * nx + i;
            tris.push([a, b, c]);
            tris.push([a, c, d]);
        }
    }
    tris
}

/// Flat n-by-n vertex grid covering the unit square, with uv equal to
/// the vertex positions.
pub fn square_patch(n: usize) -> Patch {
    assert!(n >= 2, "grid needs at least 2 vertices per side");
    let mut vertices = Vec::with_capacity(n * n);
    let mut uv = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            let x = i as f64 / (n - 1) as f64;
            let y = j as f64 / (n - 1) as f64;
            vertices.push([x, y, 0.0]);
            uv.push([x, y]);
        }
    }
    Patch {
        mesh: Mesh::new(vertices, grid_triangles(n, n)).expect("grid is well formed"),
        uv: UVEmbedding {
            uv,
            frame: Frame::Square,
        },
    }
}

/// Grid over the unit square with a smooth seeded height field of
/// amplitude up to `amp`.
pub fn wavy_patch(nx: usize, ny: usize, amp: f64, seed: u64) -> Mesh {
    assert!(nx >= 2 && ny >= 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let terms: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.5..2.5),
                rng.gen_range(0.5..2.5),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.3..1.0),
            )
        })
        .collect();
    let weight_sum: f64 = terms.iter().map(|t| t.3).sum();
    let mut vertices = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let x = i as f64 / (nx - 1) as f64;
            let y = j as f64 / (ny - 1) as f64;
            let z: f64 = terms
                .iter()
                .map(|&(fx, fy, ph, w)| {
                    w * (std::f64::consts::TAU * (fx * x + fy * y) + ph).sin()
                })
                .sum::<f64>()
                / weight_sum
                * amp;
            vertices.push([x, y, z]);
        }
    }
    Mesh::new(vertices, grid_triangles(nx, ny)).expect("grid is well formed")
}

/// Unit-square grid with a hole punched around the center: triangles
/// touching any vertex within `hole_radius` of (0.5, 0.5) are removed
/// and unused vertices compacted away. Two boundary loops result.
pub fn annulus_patch(n: usize, hole_radius: f64) -> Patch {
    assert!(n >= 6);
    assert!(hole_radius > 0.0 && hole_radius < 0.4);
    let full = square_patch(n);
    let inside: Vec<bool> = full
        .uv
        .uv
        .iter()
        .map(|p| (p[0] - 0.5).hypot(p[1] - 0.5) < hole_radius)
        .collect();
    let kept: Vec<[usize; 3]> = full
        .mesh
        .triangles()
        .iter()
        .filter(|t| t.iter().all(|&v| !inside[v]))
        .copied()
        .collect();
    let (vertices, uv, triangles) = compact(full.mesh.vertices(), &full.uv.uv, &kept);
    let vertices = vertices
        .into_iter()
        .map(|v| {
            let z = 0.1 * (std::f64::consts::PI * v[0]).sin() * (std::f64::consts::PI * v[1]).sin();
            [v[0], v[1], z]
        })
        .collect();
    Patch {
        mesh: Mesh::new(vertices, triangles).expect("annulus is well formed"),
        uv: UVEmbedding {
            uv,
            frame: Frame::Square,
        },
    }
}

fn compact(
    vertices: &[[f64; 3]],
    uv: &[[f64; 2]],
    triangles: &[[usize; 3]],
) -> (Vec<[f64; 3]>, Vec<[f64; 2]>, Vec<[usize; 3]>) {
    let mut remap = vec![usize::MAX; vertices.len()];
    let mut out_v = Vec::new();
    let mut out_uv = Vec::new();
    let mut out_t = Vec::with_capacity(triangles.len());
    for tri in triangles {
        let mut mapped = [0usize; 3];
        for (slot, &v) in mapped.iter_mut().zip(tri) {
            if remap[v] == usize::MAX {
                remap[v] = out_v.len();
                out_v.push(vertices[v]);
                out_uv.push(uv[v]);
            }
            *slot = remap[v];
        }
        out_t.push(mapped);
    }
    (out_v, out_uv, out_t)
}

/// Outer-loop vertices closest in uv to the four unit-square corners,
/// in corner order.
pub fn grid_corner_assignment(patch: &Patch, report: &TopologyReport) -> [usize; 4] {
    let mut out = [0usize; 4];
    for (k, corner) in SQUARE_CORNERS.iter().enumerate() {
        out[k] = report
            .boundary_vertices
            .iter()
            .copied()
            .min_by(|&a, &b| {
                let da = dist2(patch.uv.uv[a], *corner);
                let db = dist2(patch.uv.uv[b], *corner);
                da.partial_cmp(&db).unwrap()
            })
            .expect("boundary loop is non-empty");
    }
    out
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Four outer-loop vertices at evenly spread arc-length fractions of
/// the embedded boundary, in walk order.
pub fn spread_boundary_corners(report: &TopologyReport, emb: &UVEmbedding) -> [usize; 4] {
    let loop_v = &report.boundary_vertices;
    let m = loop_v.len();
    assert!(m >= 8, "boundary loop too short to spread corners");
    let mut cum = Vec::with_capacity(m);
    let mut acc = 0.0;
    for k in 0..m {
        cum.push(acc);
        let a = emb.uv[loop_v[k]];
        let b = emb.uv[loop_v[(k + 1) % m]];
        acc += (a[0] - b[0]).hypot(a[1] - b[1]);
    }
    let mut out = [0usize; 4];
    let mut prev = usize::MAX;
    for (k, frac) in [0.125, 0.375, 0.625, 0.875].iter().enumerate() {
        let target = frac * acc;
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, &c) in cum.iter().enumerate() {
            let d = (c - target).abs();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        if prev != usize::MAX && best <= prev {
            best = prev + 1;
        }
        prev = best;
        out[k] = loop_v[best];
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaceParams {
    /// Vertices per grid side; must be odd so the mirror axis falls on
    /// a vertex column.
    pub grid: usize,
    pub width: f64,
    pub height: f64,
    pub depth: f64,
}

impl Default for FaceParams {
    fn default() -> Self {
        Self {
            grid: 65,
            width: 1.6,
            height: 2.0,
            depth: 0.45,
        }
    }
}

pub struct SyntheticFace {
    pub mesh: Mesh,
    pub key_spec: KeySpecDoc,
    /// Mirror partner of each vertex; a fixed point on the axis column.
    pub mirror: Vec<usize>,
}

// Feature geometry in normalized coordinates (x over half-width, y
// over half-height, so the outline is the unit circle).
const EYE_CENTER: [f64; 2] = [0.44, 0.30];
const EYE_RADII: [f64; 2] = [0.20, 0.15];
const MOUTH_CENTER_Y: f64 = -0.45;
const MOUTH_RADII: [f64; 2] = [0.28, 0.16];
const EYE_LANDMARK: [f64; 2] = [-0.20, 0.30];
const MOUTH_LANDMARK: [f64; 2] = [-0.42, -0.45];

fn face_height(nx: f64, ny: f64, depth: f64) -> f64 {
    let dome = (-(nx * nx / 0.55 + ny * ny / 0.80)).exp();
    let dy = (ny - 0.05) / 0.50;
    let nose = (-(nx * nx / (0.32 * 0.32) + dy * dy)).exp();
    depth * (0.75 * dome + 0.22 * nose)
}

/// Builds a face-like open surface: an elliptical outline with two eye
/// holes and a mouth hole, mirror-symmetric across x = 0 down to the
/// last bit, plus a key-vertex document (landmark pairs near eye and
/// mouth corners, the surviving interior axis column, outline corners
/// as two mirror pairs).
pub fn synthetic_face(params: FaceParams) -> SyntheticFace {
    let g = params.grid;
    assert!(g >= 33 && g % 2 == 1, "grid must be odd and at least 33");
    let m = (g - 1) / 2;
    let sx = params.width / (g - 1) as f64;
    let sy = params.height / (g - 1) as f64;
    let half_w = params.width / 2.0;
    let half_h = params.height / 2.0;

    let coord = |i: usize, j: usize| -> ([f64; 3], [f64; 2]) {
        let x = (i as f64 - m as f64) * sx;
        let y = (j as f64 - m as f64) * sy;
        let nx = x / half_w;
        let ny = y / half_h;
        ([x, y, face_height(nx, ny, params.depth)], [nx, ny])
    };
    let in_ellipse = |nx: f64, ny: f64, c: [f64; 2], r: [f64; 2]| {
        let dx = (nx - c[0]) / r[0];
        let dy = (ny - c[1]) / r[1];
        dx * dx + dy * dy < 1.0
    };
    let keep = |nx: f64, ny: f64| -> bool {
        nx * nx + ny * ny <= 1.0
            && !in_ellipse(nx, ny, EYE_CENTER, EYE_RADII)
            && !in_ellipse(nx, ny, [-EYE_CENTER[0], EYE_CENTER[1]], EYE_RADII)
            && !in_ellipse(nx, ny, [0.0, MOUTH_CENTER_Y], MOUTH_RADII)
    };

    let mut grid_kept = vec![false; g * g];
    let mut grid_pos = Vec::with_capacity(g * g);
    let mut grid_norm = Vec::with_capacity(g * g);
    for j in 0..g {
        for i in 0..g {
            let (p, n) = coord(i, j);
            grid_kept[j * g + i] = keep(n[0], n[1]);
            grid_pos.push(p);
            grid_norm.push(n);
        }
    }

    // Mirror the cell diagonals so the triangulation is symmetric as a
    // set: left half one way, right half the other.
    let mut triangles = Vec::new();
    for j in 0..g - 1 {
        for i in 0..g - 1 {
            let a = j * g + i;
            let b = j * g + i + 1;
            let c = (j + 1) * g + i + 1;
            let d = (j + 1) * g + i;
            let cells: [[usize; 3]; 2] = if i < m {
                [[a, b, c], [a, c, d]]
            } else {
                [[a, b, d], [b, c, d]]
            };
            for tri in cells {
                if tri.iter().all(|&v| grid_kept[v]) {
                    triangles.push(tri);
                }
            }
        }
    }

    let dummy_uv: Vec<[f64; 2]> = grid_norm.clone();
    let (mut vertices, mut norm, mut triangles) = compact(&grid_pos, &dummy_uv, &triangles);

    // Pinning the whole outer loop onto the square perimeter flattens
    // any triangle with all three corners on that loop into a zero-area
    // sliver, which the flip check rejects. The staircase outline leaves
    // a few such triangles at the widest columns and at diagonal
    // notches; peel them until none remain.
    let mesh = loop {
        let mesh =
            Mesh::new(vertices.clone(), triangles.clone()).expect("face grid is well formed");
        let report = mesh.validate_topology();
        let outer: BTreeSet<usize> = report.boundary_vertices.iter().copied().collect();
        let kept: Vec<[usize; 3]> = mesh
            .triangles()
            .iter()
            .copied()
            .filter(|t| !t.iter().all(|v| outer.contains(v)))
            .collect();
        if kept.len() == mesh.n_triangles() {
            break mesh;
        }
        let (v2, n2, t2) = compact(&vertices, &norm, &kept);
        vertices = v2;
        norm = n2;
        triangles = t2;
    };

    // Mirror map through exact position keys; the construction makes
    // (-x, y) of every kept vertex another kept vertex. Zero is
    // canonicalized so the axis column maps to itself.
    let key = |p: [f64; 3]| {
        let x = if p[0] == 0.0 { 0.0 } else { p[0] };
        (x.to_bits(), p[1].to_bits())
    };
    let by_pos: BTreeMap<(u64, u64), usize> = mesh
        .vertices()
        .iter()
        .enumerate()
        .map(|(v, &p)| (key(p), v))
        .collect();
    let mirror: Vec<usize> = mesh
        .vertices()
        .iter()
        .map(|&p| {
            *by_pos
                .get(&key([-p[0], p[1], p[2]]))
                .expect("mirror partner exists")
        })
        .collect();

    let report = mesh.validate_topology();
    let on_boundary = boundary_vertex_set(&mesh);
    let outer: BTreeSet<usize> = report.boundary_vertices.iter().copied().collect();

    // The axis: surviving strictly interior vertices on the x = 0
    // column.
    let axis: Vec<usize> = (0..mesh.n_vertices())
        .filter(|&v| mesh.vertices()[v][0] == 0.0 && !on_boundary.contains(&v))
        .collect();

    // Outline corners by angular position, lower left first; the right
    // side reuses the exact mirror partners.
    let outline_nearest_angle = |deg: f64| -> usize {
        let t = deg.to_radians();
        report
            .boundary_vertices
            .iter()
            .copied()
            .min_by(|&a, &b| {
                let da = angle_gap(norm[a], t);
                let db = angle_gap(norm[b], t);
                da.partial_cmp(&db).unwrap()
            })
            .expect("outer loop is non-empty")
    };
    let c0 = outline_nearest_angle(225.0);
    let c3 = outline_nearest_angle(135.0);
    let corners = [c0, mirror[c0], mirror[c3], c3];

    // One template drives every pinned target. The initial square
    // embedding fixes the axis column's respaced vertical profile; rim
    // and landmark targets interpolate that profile and walk the same
    // scale horizontally, so no two pins disagree about local spacing.
    // Without rim anchors the crushed hole rims of the initial
    // embedding relax into local fold-over.
    let pre_spec = KeyVertexSpec {
        landmark_pairs: Vec::new(),
        axis_vertices: axis.clone(),
        edge_vertices: report.boundary_vertices.clone(),
        corner_assignment: corners,
    };
    let circle = boundary_to_circle(&mesh, &report).expect("face outline flattens");
    let disk = solve_harmonic(&mesh, &circle).expect("face interior solves");
    let square = orient_to_square(&disk, &pre_spec).expect("face embedding orients");
    let axis_pins = axis_targets(&mesh, &square.uv, &axis).expect("face axis respaces");

    let mut profile: Vec<(f64, f64)> = axis_pins
        .iter()
        .map(|&(v, t)| (norm[v][1], t[1]))
        .collect();
    profile.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let v_of = |ny: f64| -> f64 {
        match profile.binary_search_by(|p| p.0.partial_cmp(&ny).unwrap()) {
            Ok(k) => profile[k].1,
            Err(0) => profile[0].1,
            Err(k) if k == profile.len() => profile[k - 1].1,
            Err(k) => {
                let (a, va) = profile[k - 1];
                let (b, vb) = profile[k];
                va + (vb - va) * (ny - a) / (b - a)
            }
        }
    };

    // Mean vertical scale per unit of surface arc, reused horizontally.
    let mut arc3 = 0.0;
    let mut axis_sorted = axis.clone();
    axis_sorted.sort_by(|&a, &b| norm[a][1].partial_cmp(&norm[b][1]).unwrap());
    for w in axis_sorted.windows(2) {
        let a = mesh.vertices()[w[0]];
        let b = mesh.vertices()[w[1]];
        arc3 += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
    }
    let sbar = (profile[profile.len() - 1].1 - profile[0].1) / arc3;

    // 3D arc from the centerline out to nx along a grid row of the
    // continuous surface; holes do not interrupt it.
    let depth = params.depth;
    let col_arc = |nx: f64, ny: f64| -> f64 {
        let steps = (nx.abs() * m as f64).round() as usize;
        let mut acc = 0.0;
        let mut z0 = face_height(0.0, ny, depth);
        for k in 1..=steps {
            let z1 = face_height(k as f64 / m as f64, ny, depth);
            acc += (sx * sx + (z1 - z0) * (z1 - z0)).sqrt();
            z0 = z1;
        }
        acc
    };
    let template = |v: usize| -> [f64; 2] {
        let [nx, ny] = norm[v];
        [0.5 - sbar * col_arc(nx, ny), v_of(ny)]
    };

    // Rim pins, left members only; the right side follows by mirror.
    // Rim vertices exactly on the axis column stay free.
    let mut rim_pairs: Vec<(usize, usize, f64, f64)> = Vec::new();
    for v in 0..mesh.n_vertices() {
        if !on_boundary.contains(&v) || outer.contains(&v) {
            continue;
        }
        if norm[v][0] >= 0.0 {
            continue;
        }
        let t = template(v);
        rim_pairs.push((v, mirror[v], t[0], t[1]));
    }

    let nearest_interior = |target: [f64; 2]| -> usize {
        (0..mesh.n_vertices())
            .filter(|&v| !on_boundary.contains(&v) && mesh.vertices()[v][0] != 0.0)
            .min_by(|&a, &b| {
                dist2(norm[a], target)
                    .partial_cmp(&dist2(norm[b], target))
                    .unwrap()
            })
            .expect("face has interior vertices")
    };
    let eye_l = nearest_interior(EYE_LANDMARK);
    let mouth_l = nearest_interior(MOUTH_LANDMARK);
    let te = template(eye_l);
    let tm = template(mouth_l);

    let mut landmark_pairs = vec![
        (eye_l, mirror[eye_l], te[0], te[1]),
        (mouth_l, mirror[mouth_l], tm[0], tm[1]),
    ];
    landmark_pairs.extend(rim_pairs);
    let key_spec = KeySpecDoc {
        landmark_pairs,
        axis,
        corners,
    };

    SyntheticFace {
        mesh,
        key_spec,
        mirror,
    }
}

fn angle_gap(p: [f64; 2], target: f64) -> f64 {
    let a = p[1].atan2(p[0]);
    let mut d = (a - target).rem_euclid(std::f64::consts::TAU);
    if d > std::f64::consts::PI {
        d = std::f64::consts::TAU - d;
    }
    d
}

fn boundary_vertex_set(mesh: &Mesh) -> BTreeSet<usize> {
    let mut count: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for tri in mesh.triangles() {
        for k in 0..3 {
            let a = tri[k];
            let b = tri[(k + 1) % 3];
            *count.entry((a.min(b), a.max(b))).or_insert(0) += 1;
        }
    }
    let mut out = BTreeSet::new();
    for (&(a, b), &c) in &count {
        if c == 1 {
            out.insert(a);
            out.insert(b);
        }
    }
    out
}
