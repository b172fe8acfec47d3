//! Deformable tetrahedral grids and differentiable surface extraction.
//!
//! A [`TetGrid`] covers an axis-aligned cube with six tetrahedra per cell,
//! all sharing the cell's main diagonal. A shape is (per-vertex SDF value,
//! per-vertex deformation offset); [`extract_surface`] walks the tetrahedra
//! whose corners change sign and emits a triangle mesh by marching
//! tetrahedra. Extracted vertex positions are tape expressions, so gradients
//! flow back into both SDF values and deformations. Triangle connectivity is
//! decided from values only, which is the usual piecewise view: topology is
//! locally constant, positions are smooth.

use std::collections::{BTreeMap, BTreeSet};

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Tetrahedral decomposition of a cube grid.
///
/// `res` cells per axis between `-half_extent` and `+half_extent`, giving
/// `(res+1)^3` vertices and `6 * res^3` tetrahedra.
pub struct TetGrid {
    res: usize,
    half_extent: f64,
    verts: Tensor,
    tets: Vec<[usize; 4]>,
    edges: Vec<(usize, usize)>,
}

impl TetGrid {
    pub fn new(res: usize, half_extent: f64) -> Result<Self> {
        if res == 0 || !(half_extent > 0.0) {
            return Err(Error::BadConfig(format!(
                "tet grid needs res >= 1 and positive extent, got res {res}, half extent {half_extent}"
            )));
        }
        let n = res + 1;
        let h = 2.0 * half_extent / res as f64;
        let mut verts = Vec::with_capacity(n * n * n * 3);
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    verts.push(-half_extent + i as f64 * h);
                    verts.push(-half_extent + j as f64 * h);
                    verts.push(-half_extent + k as f64 * h);
                }
            }
        }
        let vid = |i: usize, j: usize, k: usize| (i * n + j) * n + k;
        // Six tetrahedra around the main diagonal c000-c111. Each tuple is
        // positively oriented (signed volume +h^3/6); new() asserts this in
        // debug builds.
        let mut tets = Vec::with_capacity(6 * res * res * res);
        for i in 0..res {
            for j in 0..res {
                for k in 0..res {
                    let c = |dx: usize, dy: usize, dz: usize| vid(i + dx, j + dy, k + dz);
                    let (c000, c111) = (c(0, 0, 0), c(1, 1, 1));
                    let ring = [
                        c(1, 0, 0),
                        c(1, 1, 0),
                        c(0, 1, 0),
                        c(0, 1, 1),
                        c(0, 0, 1),
                        c(1, 0, 1),
                    ];
                    for w in 0..6 {
                        tets.push([c000, ring[w], ring[(w + 1) % 6], c111]);
                    }
                }
            }
        }
        let mut edge_set = BTreeSet::new();
        for t in &tets {
            for a in 0..4 {
                for b in a + 1..4 {
                    let (lo, hi) = (t[a].min(t[b]), t[a].max(t[b]));
                    edge_set.insert((lo, hi));
                }
            }
        }
        let grid = TetGrid {
            res,
            half_extent,
            verts: Tensor::new(vec![n * n * n, 3], verts)?,
            tets,
            edges: edge_set.into_iter().collect(),
        };
        #[cfg(debug_assertions)]
        for t in &grid.tets {
            debug_assert!(grid.tet_volume(t, grid.verts.data()) > 0.0);
        }
        Ok(grid)
    }

    pub fn res(&self) -> usize {
        self.res
    }

    pub fn half_extent(&self) -> f64 {
        self.half_extent
    }

    /// Grid spacing along one axis.
    pub fn cell_width(&self) -> f64 {
        2.0 * self.half_extent / self.res as f64
    }

    /// Largest allowed deformation per component: half the cell width.
    pub fn max_deform(&self) -> f64 {
        0.5 * self.cell_width()
    }

    pub fn vertex_count(&self) -> usize {
        let n = self.res + 1;
        n * n * n
    }

    pub fn tet_count(&self) -> usize {
        self.tets.len()
    }

    pub fn verts(&self) -> &Tensor {
        &self.verts
    }

    pub fn tets(&self) -> &[[usize; 4]] {
        &self.tets
    }

    /// Unique undirected tetrahedron edges, sorted.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Evaluate a scalar field on every grid vertex.
    pub fn eval_field(&self, f: impl Fn([f64; 3]) -> f64) -> Tensor {
        let data: Vec<f64> = (0..self.vertex_count()).map(|i| f(self.verts.row3(i))).collect();
        Tensor::from_vec(data)
    }

    fn tet_volume(&self, t: &[usize; 4], pos: &[f64]) -> f64 {
        let p = |i: usize| [pos[t[i] * 3], pos[t[i] * 3 + 1], pos[t[i] * 3 + 2]];
        signed_volume(p(0), p(1), p(2), p(3))
    }
}

fn signed_volume(a: [f64; 3], b: [f64; 3], c: [f64; 3], d: [f64; 3]) -> f64 {
    let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
    let w = [d[0] - a[0], d[1] - a[1], d[2] - a[2]];
    (u[0] * (v[1] * w[2] - v[2] * w[1]) - u[1] * (v[0] * w[2] - v[2] * w[0])
        + u[2] * (v[0] * w[1] - v[1] * w[0]))
        / 6.0
}

/// Triangle mesh whose vertices live on a tape.
pub struct MeshVars {
    pub verts: Var,
    pub tris: Vec<[usize; 3]>,
    pub colors: Option<Var>,
}

impl MeshVars {
    pub fn to_trimesh(&self) -> TriMesh {
        TriMesh {
            verts: self.verts.value(),
            tris: self.tris.clone(),
            colors: self.colors.as_ref().map(Var::value),
        }
    }

    pub fn from_trimesh(tape: &Tape, mesh: &TriMesh) -> MeshVars {
        MeshVars {
            verts: tape.constant(&mesh.verts),
            tris: mesh.tris.clone(),
            colors: mesh.colors.as_ref().map(|c| tape.constant(c)),
        }
    }
}

/// Plain-value triangle mesh with optional per-vertex colors.
#[derive(Debug, Clone)]
pub struct TriMesh {
    pub verts: Tensor,
    pub tris: Vec<[usize; 3]>,
    pub colors: Option<Tensor>,
}

impl TriMesh {
    pub fn translated(&self, t: [f64; 3]) -> TriMesh {
        let mut verts = self.verts.clone();
        for row in verts.data_mut().chunks_mut(3) {
            row[0] += t[0];
            row[1] += t[1];
            row[2] += t[2];
        }
        TriMesh { verts, tris: self.tris.clone(), colors: self.colors.clone() }
    }

    pub fn total_area(&self) -> f64 {
        self.tris.iter().map(|t| triangle_area(&self.verts, t)).sum()
    }
}

fn triangle_area(verts: &Tensor, t: &[usize; 3]) -> f64 {
    let a = verts.row3(t[0]);
    let b = verts.row3(t[1]);
    let c = verts.row3(t[2]);
    let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
    let n = [
        u[1] * v[2] - u[2] * v[1],
        u[2] * v[0] - u[0] * v[2],
        u[0] * v[1] - u[1] * v[0],
    ];
    0.5 * (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt()
}

/// Extraction output: the mesh, which tetrahedra crossed the surface, their
/// deformed centroids (the input to shape statistics), and the grid edges
/// the mesh vertices sit on.
pub struct Extraction {
    pub mesh: MeshVars,
    pub surface_tets: Vec<usize>,
    /// `[|T|, 3]`, mean of the four deformed corner positions per surface tet.
    pub centroids: Var,
    pub crossing_edges: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct ExtractOpts {
    /// Fewer surface tetrahedra than this is reported as a collapsed shape.
    pub min_surface_tets: usize,
    /// Triangles below this area are dropped from the mesh. Their
    /// tetrahedra still count as surface tetrahedra.
    pub degenerate_area: f64,
}

impl Default for ExtractOpts {
    fn default() -> Self {
        ExtractOpts { min_surface_tets: 1, degenerate_area: 1e-12 }
    }
}

/// Deformed vertex positions: grid positions plus the smoothly clamped
/// offsets. The clamp is `m * tanh(raw / m)` per component with
/// `m = max_deform()`, so offsets stay within half a cell per component and
/// axis-neighbor vertices keep their coordinate order. (Individual
/// tetrahedra can still fold under adversarial saturated offsets; surface
/// extraction never relies on their orientation.)
pub fn deformed_positions(tape: &Tape, grid: &TetGrid, deform_raw: Option<&Var>) -> Var {
    let base = tape.constant(grid.verts());
    match deform_raw {
        None => base,
        Some(raw) => {
            assert_eq!(raw.shape(), vec![grid.vertex_count(), 3], "deformation shape");
            let m = grid.max_deform();
            let bounded = &(raw / m).tanh() * m;
            &base + &bounded
        }
    }
}

/// Marching tetrahedra over a whole grid. `sdf` holds one value per grid
/// vertex; zero counts as positive (outside). `colors`, when given, is
/// interpolated onto mesh vertices with the same weights as positions.
pub fn extract_surface(
    tape: &Tape,
    grid: &TetGrid,
    sdf: &Var,
    deform_raw: Option<&Var>,
    colors: Option<&Var>,
    opts: &ExtractOpts,
) -> Result<Extraction> {
    assert_eq!(sdf.shape(), vec![grid.vertex_count()], "sdf shape");
    let positions = deformed_positions(tape, grid, deform_raw);
    extract_from_tets(&positions, grid.tets(), sdf, colors, opts)
}

/// Marching tetrahedra over an explicit tetrahedron list. Exposed mainly so
/// the sixteen sign configurations of a single tetrahedron can be exercised
/// directly.
pub fn extract_from_tets(
    positions: &Var,
    tets: &[[usize; 4]],
    sdf: &Var,
    colors: Option<&Var>,
    opts: &ExtractOpts,
) -> Result<Extraction> {
    let s = sdf.value();
    let sv = s.data();
    let inside = |i: usize| sv[i] < 0.0; // s == 0 counts as outside

    // Pass 1: find surface tets and assign one mesh vertex per crossing edge.
    let mut surface_tets = Vec::new();
    let mut edge_ids: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (ti, t) in tets.iter().enumerate() {
        let neg = t.iter().filter(|&&v| inside(v)).count();
        if neg == 0 || neg == 4 {
            continue;
        }
        surface_tets.push(ti);
        for a in 0..4 {
            for b in a + 1..4 {
                if inside(t[a]) != inside(t[b]) {
                    let key = (t[a].min(t[b]), t[a].max(t[b]));
                    let next = edge_ids.len();
                    edge_ids.entry(key).or_insert(next);
                }
            }
        }
    }
    if surface_tets.len() < opts.min_surface_tets {
        return Err(Error::CollapsedShape {
            surface_tets: surface_tets.len(),
            min: opts.min_surface_tets,
        });
    }

    // Pass 2: interpolate every crossing edge at once. With endpoints (a, b)
    // the vertex is (s_b * p_a - s_a * p_b) / (s_b - s_a); the two signs
    // differ, so the denominator never vanishes.
    let mut crossing_edges = vec![(0usize, 0usize); edge_ids.len()];
    for (&k, &i) in &edge_ids {
        crossing_edges[i] = k;
    }
    let idx_a: Vec<usize> = crossing_edges.iter().map(|e| e.0).collect();
    let idx_b: Vec<usize> = crossing_edges.iter().map(|e| e.1).collect();
    let e = crossing_edges.len();
    let s_a = sdf.gather(idx_a.clone()).reshape(vec![e, 1]);
    let s_b = sdf.gather(idx_b.clone()).reshape(vec![e, 1]);
    let p_a = positions.gather(idx_a.clone());
    let p_b = positions.gather(idx_b.clone());
    let t = &s_b / &(&s_b - &s_a);
    let one_minus_t = &(-&s_a) / &(&s_b - &s_a);
    let verts = &(&p_a * &t) + &(&p_b * &one_minus_t);
    let mesh_colors = colors.map(|c| {
        let c_a = c.gather(idx_a.clone());
        let c_b = c.gather(idx_b.clone());
        &(&c_a * &t) + &(&c_b * &one_minus_t)
    });

    // Pass 3: triangles per surface tet, oriented so normals point from the
    // negative (interior) side toward the positive side.
    let vert_values = verts.value();
    let pos_values = positions.value();
    let mut tris = Vec::new();
    for &ti in &surface_tets {
        let t4 = &tets[ti];
        let (mut ins, mut outs) = (Vec::new(), Vec::new());
        for &v in t4 {
            if inside(v) {
                ins.push(v)
            } else {
                outs.push(v)
            }
        }
        let eid = |a: usize, b: usize| edge_ids[&(a.min(b), a.max(b))];
        let cand: Vec<[usize; 3]> = match (ins.len(), outs.len()) {
            (1, 3) => vec![[
                eid(ins[0], outs[0]),
                eid(ins[0], outs[1]),
                eid(ins[0], outs[2]),
            ]],
            (3, 1) => vec![[
                eid(outs[0], ins[0]),
                eid(outs[0], ins[1]),
                eid(outs[0], ins[2]),
            ]],
            (2, 2) => {
                // Quad cycle n0p0, n0p1, n1p1, n1p0: consecutive corners
                // share a tet face, so the cycle is planar-adjacent.
                let q = [
                    eid(ins[0], outs[0]),
                    eid(ins[0], outs[1]),
                    eid(ins[1], outs[1]),
                    eid(ins[1], outs[0]),
                ];
                vec![[q[0], q[1], q[2]], [q[0], q[2], q[3]]]
            }
            _ => unreachable!("mixed-sign tet"),
        };
        // Outward direction: from the mean of interior corners to the mean
        // of exterior corners, using deformed positions.
        let mean = |ids: &[usize]| {
            let mut m = [0.0; 3];
            for &v in ids {
                let p = pos_values.row3(v);
                m[0] += p[0];
                m[1] += p[1];
                m[2] += p[2];
            }
            let n = ids.len() as f64;
            [m[0] / n, m[1] / n, m[2] / n]
        };
        let (mi, mo) = (mean(&ins), mean(&outs));
        let out_dir = [mo[0] - mi[0], mo[1] - mi[1], mo[2] - mi[2]];
        for mut tri in cand {
            if triangle_area(&vert_values, &tri) < opts.degenerate_area {
                continue;
            }
            let a = vert_values.row3(tri[0]);
            let b = vert_values.row3(tri[1]);
            let c = vert_values.row3(tri[2]);
            let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
            let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
            let n = [
                u[1] * v[2] - u[2] * v[1],
                u[2] * v[0] - u[0] * v[2],
                u[0] * v[1] - u[1] * v[0],
            ];
            if n[0] * out_dir[0] + n[1] * out_dir[1] + n[2] * out_dir[2] < 0.0 {
                tri.swap(1, 2);
            }
            tris.push(tri);
        }
    }

    // Deformed centroids of all surface tets, degenerate-triangle drops
    // included: gather the four corners per tet and average.
    let mut corner_idx = Vec::with_capacity(surface_tets.len() * 4);
    for &ti in &surface_tets {
        corner_idx.extend_from_slice(&tets[ti]);
    }
    let corners = positions.gather(corner_idx).reshape(vec![surface_tets.len(), 4, 3]);
    let centroids = &corners.sum_axes(&[1], false) * 0.25;

    Ok(Extraction {
        mesh: MeshVars { verts, tris, colors: mesh_colors },
        surface_tets,
        centroids,
        crossing_edges,
    })
}

/// Shape statistics of a surface-tet centroid set: `delta_d` is the centroid
/// mean, `delta_k` is the mean distance from `delta_d` scaled by `1 / c0`.
pub struct ShapeStats {
    pub delta_d: Var,
    pub delta_k: Var,
    pub tet_count: usize,
}

pub fn shape_stats(centroids: &Var, c0: f64) -> ShapeStats {
    let shape = centroids.shape();
    assert!(shape.len() == 2 && shape[1] == 3, "centroids must be [T, 3]");
    let t = shape[0];
    assert!(t > 0, "shape_stats of an empty centroid set");
    let delta_d = &centroids.sum_axes(&[0], false) * (1.0 / t as f64);
    let diff = centroids - &delta_d.reshape(vec![1, 3]);
    let norms = diff.square().sum_axes(&[1], false).sqrt();
    let delta_k = &norms.sum_all() * (1.0 / (c0 * t as f64));
    ShapeStats { delta_d, delta_k, tet_count: t }
}

/// Apply the normalization `p -> (p - delta_d) * (c0 / delta_k)` to a point
/// rowset. Fails when the spread is too small to invert.
pub fn normalize_points(points: &Var, stats: &ShapeStats, c0: f64) -> Result<Var> {
    let dk = stats.delta_k.item();
    if !(dk > 1e-12) {
        return Err(Error::DegenerateSpread { delta_k: dk });
    }
    let scale = &(&stats.delta_k.tape().scalar(c0) / &stats.delta_k).reshape(vec![1, 1]);
    let centered = points - &stats.delta_d.reshape(vec![1, 3]);
    Ok(&centered * scale)
}

/// Normalize a whole extraction: mesh vertices and centroids move through
/// the same map, so re-running [`shape_stats`] on the result gives
/// `delta_d = 0` and `delta_k = c0`.
pub fn normalize_extraction(ex: &Extraction, stats: &ShapeStats, c0: f64) -> Result<Extraction> {
    Ok(Extraction {
        mesh: MeshVars {
            verts: normalize_points(&ex.mesh.verts, stats, c0)?,
            tris: ex.mesh.tris.clone(),
            colors: ex.mesh.colors.clone(),
        },
        surface_tets: ex.surface_tets.clone(),
        centroids: normalize_points(&ex.centroids, stats, c0)?,
        crossing_edges: ex.crossing_edges.clone(),
    })
}

/// True when every undirected edge of the triangle list is shared by
/// exactly two triangles.
pub fn watertight(tris: &[[usize; 3]]) -> bool {
    if tris.is_empty() {
        return false;
    }
    let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for t in tris {
        for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
            *counts.entry((a.min(b), a.max(b))).or_insert(0) += 1;
        }
    }
    counts.values().all(|&c| c == 2)
}

/// Area-weighted uniform surface samples: triangles are chosen with
/// probability proportional to area, positions by the square-root
/// barycentric trick. Deterministic for a fixed seed.
pub fn sample_surface_points(mesh: &TriMesh, n: usize, seed: u64) -> Result<Tensor> {
    if mesh.tris.is_empty() {
        return Err(Error::BadInput("cannot sample an empty mesh".into()));
    }
    let mut cum = Vec::with_capacity(mesh.tris.len());
    let mut total = 0.0;
    for t in &mesh.tris {
        total += triangle_area(&mesh.verts, t);
        cum.push(total);
    }
    if !(total > 0.0) {
        return Err(Error::BadInput("mesh has zero surface area".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n * 3);
    for _ in 0..n {
        let u = rng.gen::<f64>() * total;
        let ti = cum.partition_point(|&c| c < u).min(mesh.tris.len() - 1);
        let t = &mesh.tris[ti];
        let (r1, r2) = (rng.gen::<f64>(), rng.gen::<f64>());
        let su = r1.sqrt();
        let (w0, w1, w2) = (1.0 - su, su * (1.0 - r2), su * r2);
        let a = mesh.verts.row3(t[0]);
        let b = mesh.verts.row3(t[1]);
        let c = mesh.verts.row3(t[2]);
        for d in 0..3 {
            out.push(w0 * a[d] + w1 * b[d] + w2 * c[d]);
        }
    }
    Tensor::new(vec![n, 3], out)
}

/// Write a mesh as Wavefront OBJ. Vertex colors, when present, use the
/// common `v x y z r g b` extension. Coordinates print in the shortest
/// form that parses back to the identical `f64`, so write/read round-trips
/// are exact.
pub fn write_obj(mesh: &TriMesh, path: &std::path::Path) -> Result<()> {
    let mut out = String::new();
    let n = mesh.verts.shape()[0];
    if let Some(colors) = &mesh.colors {
        if colors.shape() != [n, 3] {
            return Err(Error::ShapeMismatch {
                context: "obj vertex colors".into(),
                left: colors.shape().to_vec(),
                right: vec![n, 3],
            });
        }
    }
    for i in 0..n {
        let p = mesh.verts.row3(i);
        match &mesh.colors {
            Some(c) => {
                let rgb = c.row3(i);
                out.push_str(&format!(
                    "v {} {} {} {} {} {}\n",
                    p[0], p[1], p[2], rgb[0], rgb[1], rgb[2]
                ));
            }
            None => out.push_str(&format!("v {} {} {}\n", p[0], p[1], p[2])),
        }
    }
    for t in &mesh.tris {
        out.push_str(&format!("f {} {} {}\n", t[0] + 1, t[1] + 1, t[2] + 1));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Read a mesh written by [`write_obj`] (also accepts `f` entries with
/// `/texture/normal` suffixes, which are ignored).
pub fn read_obj(path: &std::path::Path) -> Result<TriMesh> {
    let text = std::fs::read_to_string(path)?;
    let bad = |line: usize, what: &str| {
        Error::BadInput(format!("{}:{line}: {what}", path.display()))
    };
    let mut verts = Vec::new();
    let mut colors = Vec::new();
    let mut tris = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let ln = ln + 1;
        let mut fields = line.split_whitespace();
        match fields.next() {
            Some("v") => {
                let nums: Vec<f64> = fields
                    .map(str::parse)
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad(ln, "unparsable vertex coordinate"))?;
                match nums.len() {
                    3 => verts.extend_from_slice(&nums),
                    6 => {
                        verts.extend_from_slice(&nums[..3]);
                        colors.extend_from_slice(&nums[3..]);
                    }
                    _ => return Err(bad(ln, "vertex lines need 3 or 6 numbers")),
                }
            }
            Some("f") => {
                let idx: Vec<usize> = fields
                    .map(|f| {
                        f.split('/')
                            .next()
                            .unwrap_or("")
                            .parse::<usize>()
                            .ok()
                            .filter(|&i| i >= 1)
                            .map(|i| i - 1)
                    })
                    .collect::<Option<_>>()
                    .ok_or_else(|| bad(ln, "unparsable face index"))?;
                if idx.len() != 3 {
                    return Err(bad(ln, "only triangle faces are supported"));
                }
                tris.push([idx[0], idx[1], idx[2]]);
            }
            _ => {} // comments, empty lines, foreign records
        }
    }
    let n = verts.len() / 3;
    if !colors.is_empty() && colors.len() != verts.len() {
        return Err(Error::BadInput(format!(
            "{}: vertex colors must appear on every vertex or none",
            path.display()
        )));
    }
    if let Some(t) = tris.iter().flatten().find(|&&i| i >= n) {
        return Err(Error::BadInput(format!(
            "{}: face references vertex {} of {n}",
            path.display(),
            t + 1
        )));
    }
    Ok(TriMesh {
        verts: Tensor::new(vec![n, 3], verts)?,
        tris,
        colors: if colors.is_empty() {
            None
        } else {
            Some(Tensor::new(vec![n, 3], colors)?)
        },
    })
}
