//! Geodesic-voxel skin weights: voxelize the mesh, flood-fill the
//! exterior, run multi-source Dijkstra from each bone through the solid
//! volume, and convert distances to inverse-power falloff weights.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::error::RigError;
use crate::skeleton::{bone_segments, point_segment_distance, validate_skeleton, Mesh, Skeleton, SkinWeights, Vec3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GvbConfig {
    /// Voxels per axis.
    pub resolution: usize,
    /// Inverse-distance falloff exponent.
    pub falloff: f64,
    /// Max influences kept per vertex.
    pub max_influences: usize,
}

impl Default for GvbConfig {
    fn default() -> Self {
        GvbConfig { resolution: 64, falloff: 2.0, max_influences: 4 }
    }
}

const FALLOFF_EPS: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VoxelKind {
    Exterior,
    Surface,
    Interior,
}

pub struct VoxelGrid {
    pub resolution: usize,
    pub origin: Vec3,
    pub cell: f64,
    kinds: Vec<VoxelKind>,
}

impl VoxelGrid {
    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.resolution + y) * self.resolution + x
    }

    pub fn kind(&self, x: usize, y: usize, z: usize) -> VoxelKind {
        self.kinds[self.index(x, y, z)]
    }

    /// Is the voxel part of the solid (surface or interior)?
    pub fn solid(&self, idx: usize) -> bool {
        self.kinds[idx] != VoxelKind::Exterior
    }

    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> Vec3 {
        self.origin.add(Vec3::new(
            (x as f64 + 0.5) * self.cell,
            (y as f64 + 0.5) * self.cell,
            (z as f64 + 0.5) * self.cell,
        ))
    }

    pub fn cell_of(&self, p: Vec3) -> Option<(usize, usize, usize)> {
        let r = self.resolution as f64;
        let fx = (p.x - self.origin.x) / self.cell;
        let fy = (p.y - self.origin.y) / self.cell;
        let fz = (p.z - self.origin.z) / self.cell;
        if fx < 0.0 || fy < 0.0 || fz < 0.0 || fx >= r || fy >= r || fz >= r {
            return None;
        }
        Some((fx as usize, fy as usize, fz as usize))
    }

    pub fn count(&self, kind: VoxelKind) -> usize {
        self.kinds.iter().filter(|&&k| k == kind).count()
    }
}

/// Separating-axis triangle/AABB overlap test (Akenine-Moller).
fn tri_box_overlap(center: Vec3, half: f64, tri: [Vec3; 3]) -> bool {
    let v0 = tri[0].sub(center);
    let v1 = tri[1].sub(center);
    let v2 = tri[2].sub(center);

    let e0 = v1.sub(v0);
    let e1 = v2.sub(v1);
    let e2 = v0.sub(v2);

    let axis_test = |a: Vec3| -> bool {
        let p0 = a.dot(v0);
        let p1 = a.dot(v1);
        let p2 = a.dot(v2);
        let r = half * (a.x.abs() + a.y.abs() + a.z.abs());
        let min = p0.min(p1).min(p2);
        let max = p0.max(p1).max(p2);
        min <= r && max >= -r
    };

    // 9 cross-product axes
    for e in [e0, e1, e2] {
        for unit in [
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(0.0, 0.0, 1.0),
        ] {
            if !axis_test(unit.cross(e)) {
                return false;
            }
        }
    }
    // box face normals
    let min_v = |f: fn(Vec3) -> f64| f(v0).min(f(v1)).min(f(v2));
    let max_v = |f: fn(Vec3) -> f64| f(v0).max(f(v1)).max(f(v2));
    if min_v(|v| v.x) > half || max_v(|v| v.x) < -half {
        return false;
    }
    if min_v(|v| v.y) > half || max_v(|v| v.y) < -half {
        return false;
    }
    if min_v(|v| v.z) > half || max_v(|v| v.z) < -half {
        return false;
    }
    // triangle plane
    let normal = e0.cross(e1);
    let d = -normal.dot(v0);
    let r = half * (normal.x.abs() + normal.y.abs() + normal.z.abs());
    d.abs() <= r
}

/// Conservative voxelization over [-1, 1]^3: surface voxels intersect a
/// triangle, exterior voxels flood from the boundary, the rest is interior.
pub fn voxelize(mesh: &Mesh, resolution: usize) -> Result<VoxelGrid, RigError> {
    if resolution < 4 {
        return Err(RigError::Range(format!("resolution {resolution} < 4")));
    }
    let r = resolution;
    let cell = 2.0 / r as f64;
    let origin = Vec3::new(-1.0, -1.0, -1.0);
    let mut kinds = vec![VoxelKind::Interior; r * r * r];

    let clamp_idx = |f: f64| -> usize { (f.max(0.0) as usize).min(r - 1) };
    let half = cell * 0.5;
    for face in &mesh.faces {
        let tri = [
            mesh.vertices[face[0]],
            mesh.vertices[face[1]],
            mesh.vertices[face[2]],
        ];
        let lo = Vec3::new(
            tri[0].x.min(tri[1].x).min(tri[2].x),
            tri[0].y.min(tri[1].y).min(tri[2].y),
            tri[0].z.min(tri[1].z).min(tri[2].z),
        );
        let hi = Vec3::new(
            tri[0].x.max(tri[1].x).max(tri[2].x),
            tri[0].y.max(tri[1].y).max(tri[2].y),
            tri[0].z.max(tri[1].z).max(tri[2].z),
        );
        let x0 = clamp_idx((lo.x - origin.x) / cell - 0.5);
        let x1 = clamp_idx((hi.x - origin.x) / cell + 0.5);
        let y0 = clamp_idx((lo.y - origin.y) / cell - 0.5);
        let y1 = clamp_idx((hi.y - origin.y) / cell + 0.5);
        let z0 = clamp_idx((lo.z - origin.z) / cell - 0.5);
        let z1 = clamp_idx((hi.z - origin.z) / cell + 0.5);
        for z in z0..=z1 {
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let idx = (z * r + y) * r + x;
                    if kinds[idx] != VoxelKind::Surface {
                        let center = origin.add(Vec3::new(
                            (x as f64 + 0.5) * cell,
                            (y as f64 + 0.5) * cell,
                            (z as f64 + 0.5) * cell,
                        ));
                        if tri_box_overlap(center, half, tri) {
                            kinds[idx] = VoxelKind::Surface;
                        }
                    }
                }
            }
        }
    }

    // flood fill exterior from the grid boundary through non-surface voxels
    let mut queue = std::collections::VecDeque::new();
    for z in 0..r {
        for y in 0..r {
            for x in 0..r {
                if (x == 0 || y == 0 || z == 0 || x == r - 1 || y == r - 1 || z == r - 1)
                    && kinds[(z * r + y) * r + x] == VoxelKind::Interior
                {
                    kinds[(z * r + y) * r + x] = VoxelKind::Exterior;
                    queue.push_back((x, y, z));
                }
            }
        }
    }
    while let Some((x, y, z)) = queue.pop_front() {
        let neighbors = [
            (x.wrapping_sub(1), y, z),
            (x + 1, y, z),
            (x, y.wrapping_sub(1), z),
            (x, y + 1, z),
            (x, y, z.wrapping_sub(1)),
            (x, y, z + 1),
        ];
        for (nx, ny, nz) in neighbors {
            if nx < r && ny < r && nz < r {
                let idx = (nz * r + ny) * r + nx;
                if kinds[idx] == VoxelKind::Interior {
                    kinds[idx] = VoxelKind::Exterior;
                    queue.push_back((nx, ny, nz));
                }
            }
        }
    }

    Ok(VoxelGrid { resolution: r, origin, cell, kinds })
}

/// Multi-source Dijkstra from every solid voxel the bone passes through,
/// 26-connectivity with Euclidean step costs. Unreachable voxels stay +inf.
pub fn geodesic_distance_field(grid: &VoxelGrid, bone: (Vec3, Vec3)) -> Result<Vec<f64>, RigError> {
    let r = grid.resolution;
    let total = r * r * r;
    let mut dist = vec![f64::INFINITY; total];
    let mut heap: BinaryHeap<Reverse<(OrderedF64, usize)>> = BinaryHeap::new();

    // seed: walk the segment at sub-cell spacing and take solid voxels hit
    let (a, b) = bone;
    let len = a.dist(b);
    let steps = ((len / (grid.cell * 0.25)).ceil() as usize).max(1);
    let mut any = false;
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let p = a.add(b.sub(a).scale(t));
        if let Some((x, y, z)) = grid.cell_of(p) {
            let idx = grid.index(x, y, z);
            if grid.solid(idx) && dist[idx] > 0.0 {
                dist[idx] = 0.0;
                heap.push(Reverse((OrderedF64(0.0), idx)));
                any = true;
            }
        }
    }
    if !any {
        return Err(RigError::Degenerate("bone outside volume".into()));
    }

    while let Some(Reverse((OrderedF64(d), idx))) = heap.pop() {
        if d > dist[idx] {
            continue;
        }
        let x = idx % r;
        let y = (idx / r) % r;
        let z = idx / (r * r);
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 && dz == 0 {
                        continue;
                    }
                    let nx = x as i64 + dx;
                    let ny = y as i64 + dy;
                    let nz = z as i64 + dz;
                    if nx < 0 || ny < 0 || nz < 0 || nx >= r as i64 || ny >= r as i64 || nz >= r as i64 {
                        continue;
                    }
                    let nidx = ((nz as usize) * r + ny as usize) * r + nx as usize;
                    if !grid.solid(nidx) {
                        continue;
                    }
                    let step = grid.cell * ((dx * dx + dy * dy + dz * dz) as f64).sqrt();
                    let nd = d + step;
                    if nd < dist[nidx] {
                        dist[nidx] = nd;
                        heap.push(Reverse((OrderedF64(nd), nidx)));
                    }
                }
            }
        }
    }
    Ok(dist)
}

#[derive(PartialEq, PartialOrd)]
struct OrderedF64(f64);
impl Eq for OrderedF64 {}
impl Ord for OrderedF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.partial_cmp(other).unwrap()
    }
}

/// Vertices whose distance fell back to Euclidean point-segment distance.
#[derive(Debug, Default, Clone)]
pub struct GvbDiagnostics {
    pub euclidean_fallback_vertices: Vec<usize>,
}

/// Nearest solid voxel to `p` within a small search radius.
fn nearest_solid_voxel(grid: &VoxelGrid, p: Vec3) -> Option<usize> {
    let r = grid.resolution;
    let (cx, cy, cz) = match grid.cell_of(p) {
        Some(c) => c,
        None => {
            let clamp = |v: f64| -> usize {
                (((v - grid.origin.x) / grid.cell).max(0.0) as usize).min(r - 1)
            };
            (clamp(p.x), clamp(p.y), clamp(p.z))
        }
    };
    for radius in 0..4usize {
        let mut best: Option<(f64, usize)> = None;
        let lo = |c: usize| c.saturating_sub(radius);
        let hi = |c: usize| (c + radius).min(r - 1);
        for z in lo(cz)..=hi(cz) {
            for y in lo(cy)..=hi(cy) {
                for x in lo(cx)..=hi(cx) {
                    let idx = grid.index(x, y, z);
                    if grid.solid(idx) {
                        let d = grid.voxel_center(x, y, z).dist(p);
                        if best.map_or(true, |(bd, _)| d < bd) {
                            best = Some((d, idx));
                        }
                    }
                }
            }
        }
        if let Some((_, idx)) = best {
            return Some(idx);
        }
    }
    None
}

/// Inverse-power falloff weights from per-bone geodesic distance fields,
/// top-K pruned and row-normalized.
pub fn compute_gvb_weights(
    mesh: &Mesh,
    skeleton: &Skeleton,
    cfg: &GvbConfig,
) -> Result<(SkinWeights, GvbDiagnostics), RigError> {
    let report = validate_skeleton(skeleton);
    if !report.is_empty() {
        return Err(RigError::Invalid(report));
    }
    let bones = bone_segments(skeleton)?;
    let grid = voxelize(mesh, cfg.resolution)?;

    let fields: Vec<Option<Vec<f64>>> = bones
        .iter()
        .map(|&bone| geodesic_distance_field(&grid, bone).ok())
        .collect();

    let mut diagnostics = GvbDiagnostics::default();
    let mut rows = Vec::with_capacity(mesh.vertices.len());
    for (vi, &v) in mesh.vertices.iter().enumerate() {
        let voxel = nearest_solid_voxel(&grid, v);
        let mut dists: Vec<f64> = Vec::with_capacity(bones.len());
        let mut reachable = false;
        for field in &fields {
            let d = match (field, voxel) {
                (Some(f), Some(idx)) if f[idx].is_finite() => {
                    reachable = true;
                    f[idx]
                }
                _ => f64::INFINITY,
            };
            dists.push(d);
        }
        if !reachable {
            diagnostics.euclidean_fallback_vertices.push(vi);
            for (bi, &(a, b)) in bones.iter().enumerate() {
                dists[bi] = point_segment_distance(v, a, b);
            }
        }
        let mut weighted: Vec<(usize, f64)> = dists
            .iter()
            .enumerate()
            .filter(|(_, d)| d.is_finite())
            .map(|(j, &d)| (j, 1.0 / (d + FALLOFF_EPS).powf(cfg.falloff)))
            .collect();
        weighted.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        weighted.truncate(cfg.max_influences);
        weighted.sort_by_key(|&(j, _)| j);
        let total: f64 = weighted.iter().map(|&(_, w)| w).sum();
        let row: Vec<(usize, f64)> = weighted.into_iter().map(|(j, w)| (j, w / total)).collect();
        rows.push(row);
    }

    // weights are indexed by bone; map to the bone's child joint index so
    // rows address skeleton joints (the root carries no bone of its own)
    let bone_children: Vec<usize> = crate::skeleton::bones_of(skeleton)?
        .into_iter()
        .map(|(_, c)| c)
        .collect();
    let rows = rows
        .into_iter()
        .map(|row| row.into_iter().map(|(b, w)| (bone_children[b], w)).collect())
        .collect();

    Ok((SkinWeights { rows, joint_count: skeleton.len() }, diagnostics))
}
