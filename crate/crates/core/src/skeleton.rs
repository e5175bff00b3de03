//! Canonical data model: meshes, skeletons, skin weights, and rig assets,
//! with validation, normalization, and deterministic traversal.

use serde::{Deserialize, Serialize};

use crate::error::RigError;

/// Sentinel parent value marking the root joint.
pub const ROOT_PARENT: i32 = -1;

/// Maximum joint count accepted at ingestion.
pub const MAX_JOINTS: usize = 100;

/// Maximum skin influences per vertex.
pub const MAX_INFLUENCES: usize = 8;

/// The eight asset categories, plus a catch-all.
pub const CATEGORIES: [&str; 9] = [
    "complex-character",
    "simple-character",
    "animal",
    "marine",
    "bird",
    "insect",
    "plant",
    "others",
    "other",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }

    pub fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }

    pub fn scale(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dist(self, o: Vec3) -> f64 {
        self.sub(o).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Lexicographic (x, y, z) comparison used for deterministic child order.
    pub fn lex_cmp(self, o: Vec3) -> std::cmp::Ordering {
        self.x
            .partial_cmp(&o.x)
            .unwrap()
            .then(self.y.partial_cmp(&o.y).unwrap())
            .then(self.z.partial_cmp(&o.z).unwrap())
    }
}

/// Exact Euclidean distance from a point to the closed segment [a, b].
pub fn point_segment_distance(p: Vec3, a: Vec3, b: Vec3) -> f64 {
    let ab = b.sub(a);
    let len2 = ab.dot(ab);
    if len2 == 0.0 {
        return p.dist(a);
    }
    let t = (p.sub(a).dot(ab) / len2).clamp(0.0, 1.0);
    p.dist(a.add(ab.scale(t)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
}

impl Mesh {
    pub fn bounding_box(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.vertices.first()?;
        let mut lo = first;
        let mut hi = first;
        for v in &self.vertices {
            lo = Vec3::new(lo.x.min(v.x), lo.y.min(v.y), lo.z.min(v.z));
            hi = Vec3::new(hi.x.max(v.x), hi.y.max(v.y), hi.z.max(v.z));
        }
        Some((lo, hi))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    pub joints: Vec<Vec3>,
    /// Parent index per joint; `ROOT_PARENT` marks the single root.
    pub parents: Vec<i32>,
}

impl Skeleton {
    pub fn new(joints: Vec<Vec3>, parents: Vec<i32>) -> Self {
        Skeleton { joints, parents }
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    pub fn root(&self) -> Option<usize> {
        self.parents.iter().position(|&p| p == ROOT_PARENT)
    }

    /// Children of each joint, in index order.
    pub fn children(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.len()];
        for (i, &p) in self.parents.iter().enumerate() {
            if p != ROOT_PARENT && (p as usize) < self.len() {
                out[p as usize].push(i);
            }
        }
        out
    }
}

/// Per-vertex sparse skin weights: rows of (joint index, weight) pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkinWeights {
    pub rows: Vec<Vec<(usize, f64)>>,
    pub joint_count: usize,
}

impl SkinWeights {
    /// Total weight attributed to each joint across all vertices.
    pub fn joint_totals(&self) -> Vec<f64> {
        let mut totals = vec![0.0; self.joint_count];
        for row in &self.rows {
            for &(j, w) in row {
                if j < self.joint_count {
                    totals[j] += w;
                }
            }
        }
        totals
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigAsset {
    pub mesh: Mesh,
    pub skeleton: Skeleton,
    pub skin: Option<SkinWeights>,
    pub category: String,
}

/// A single validation failure with a machine-readable code.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub code: String,
    pub detail: String,
}

impl Violation {
    fn new(code: &str, detail: String) -> Self {
        Violation { code: code.to_string(), detail }
    }
}

pub type ValidationReport = Vec<Violation>;

/// Checks every type invariant and reports each violation; never errors.
pub fn validate_rig(asset: &RigAsset) -> ValidationReport {
    let mut report = Vec::new();
    validate_mesh_into(&asset.mesh, &mut report);
    validate_skeleton_into(&asset.skeleton, &mut report);
    if let Some(skin) = &asset.skin {
        validate_skin_into(skin, asset.mesh.vertices.len(), asset.skeleton.len(), &mut report);
    }
    report
}

pub fn validate_mesh(mesh: &Mesh) -> ValidationReport {
    let mut report = Vec::new();
    validate_mesh_into(mesh, &mut report);
    report
}

fn validate_mesh_into(mesh: &Mesh, report: &mut ValidationReport) {
    let n = mesh.vertices.len();
    if n < 3 {
        report.push(Violation::new("mesh-too-small", format!("{n} vertices, need at least 3")));
    }
    for (i, v) in mesh.vertices.iter().enumerate() {
        if !v.is_finite() {
            report.push(Violation::new("vertex-not-finite", format!("vertex {i}")));
        }
    }
    for (i, f) in mesh.faces.iter().enumerate() {
        if f.iter().any(|&ix| ix >= n) {
            report.push(Violation::new("face-index-out-of-range", format!("face {i}")));
        }
        if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
            report.push(Violation::new("degenerate-face", format!("face {i}")));
        }
    }
}

pub fn validate_skeleton(skeleton: &Skeleton) -> ValidationReport {
    let mut report = Vec::new();
    validate_skeleton_into(skeleton, &mut report);
    report
}

fn validate_skeleton_into(skeleton: &Skeleton, report: &mut ValidationReport) {
    let k = skeleton.len();
    if k < 2 || k > MAX_JOINTS {
        report.push(Violation::new("joint-count-out-of-range", format!("k={k}, expected 2..={MAX_JOINTS}")));
    }
    if skeleton.parents.len() != k {
        report.push(Violation::new(
            "parent-length-mismatch",
            format!("{} parents for {k} joints", skeleton.parents.len()),
        ));
        return;
    }
    for (i, j) in skeleton.joints.iter().enumerate() {
        if !j.is_finite() {
            report.push(Violation::new("joint-not-finite", format!("joint {i}")));
        }
    }
    let roots: Vec<usize> = skeleton
        .parents
        .iter()
        .enumerate()
        .filter(|(_, &p)| p == ROOT_PARENT)
        .map(|(i, _)| i)
        .collect();
    if roots.len() != 1 {
        report.push(Violation::new("root-count", format!("{} roots, expected 1", roots.len())));
    }
    let mut out_of_range = false;
    for (i, &p) in skeleton.parents.iter().enumerate() {
        if p != ROOT_PARENT && (p < 0 || p as usize >= k) {
            report.push(Violation::new("parent-index-out-of-range", format!("joint {i} parent {p}")));
            out_of_range = true;
        }
        if p >= 0 && p as usize == i {
            report.push(Violation::new("self-parent", format!("joint {i}")));
        }
    }
    if out_of_range || roots.len() != 1 {
        return;
    }
    // Walk each joint to the root; revisits or overlong paths mean a cycle.
    for start in 0..k {
        let mut cur = start;
        let mut steps = 0;
        loop {
            let p = skeleton.parents[cur];
            if p == ROOT_PARENT {
                break;
            }
            cur = p as usize;
            steps += 1;
            if steps > k {
                report.push(Violation::new("cycle-detected", format!("joint {start} never reaches root")));
                break;
            }
        }
    }
}

fn validate_skin_into(skin: &SkinWeights, vertex_count: usize, joint_count: usize, report: &mut ValidationReport) {
    if skin.rows.len() != vertex_count {
        report.push(Violation::new(
            "skin-row-count",
            format!("{} skin rows for {vertex_count} vertices", skin.rows.len()),
        ));
    }
    if skin.joint_count != joint_count {
        report.push(Violation::new(
            "skin-joint-count",
            format!("skin declares {} joints, skeleton has {joint_count}", skin.joint_count),
        ));
    }
    for (v, row) in skin.rows.iter().enumerate() {
        if row.len() > MAX_INFLUENCES {
            report.push(Violation::new("skin-too-many-influences", format!("vertex {v}: {}", row.len())));
        }
        let mut sum = 0.0;
        for &(j, w) in row {
            if j >= skin.joint_count {
                report.push(Violation::new("skin-joint-index", format!("vertex {v} joint {j}")));
            }
            if !(w >= 0.0) {
                report.push(Violation::new("skin-negative-weight", format!("vertex {v} joint {j}")));
            }
            sum += w;
        }
        if (sum - 1.0).abs() > 1e-6 {
            report.push(Violation::new("skin-row-sum", format!("vertex {v} sums to {sum}")));
        }
    }
}

/// Invertible normalization transform: `normalized = (v - center) * scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormTransform {
    pub center: Vec3,
    pub scale: f64,
}

impl NormTransform {
    pub fn apply(&self, v: Vec3) -> Vec3 {
        v.sub(self.center).scale(self.scale)
    }

    pub fn invert(&self, v: Vec3) -> Vec3 {
        v.scale(1.0 / self.scale).add(self.center)
    }
}

/// Translates to the mesh bounding-box center and scales so the largest
/// axis extent maps to [-1, 1]. Joints share the mesh's frame.
pub fn normalize_rig(asset: &RigAsset) -> Result<(RigAsset, NormTransform), RigError> {
    let (lo, hi) = asset
        .mesh
        .bounding_box()
        .ok_or_else(|| RigError::Degenerate("empty mesh".into()))?;
    let extent = hi.sub(lo);
    let max_extent = extent.x.max(extent.y).max(extent.z);
    if max_extent <= 0.0 {
        return Err(RigError::Degenerate("degenerate bounding box".into()));
    }
    let center = lo.add(hi).scale(0.5);
    let scale = 2.0 / max_extent;
    let xf = NormTransform { center, scale };
    let mut out = asset.clone();
    for v in &mut out.mesh.vertices {
        *v = xf.apply(*v);
    }
    for j in &mut out.skeleton.joints {
        *j = xf.apply(*j);
    }
    Ok((out, xf))
}

/// Deterministic depth-first joint order: root first, children visited in
/// ascending lexicographic (x, y, z) order of their positions.
pub fn traversal_order(skeleton: &Skeleton) -> Result<Vec<usize>, RigError> {
    let report = validate_skeleton(skeleton);
    if !report.is_empty() {
        return Err(RigError::Invalid(report));
    }
    let root = skeleton.root().expect("validated skeleton has a root");
    let mut children = skeleton.children();
    for ch in &mut children {
        ch.sort_by(|&a, &b| skeleton.joints[a].lex_cmp(skeleton.joints[b]).then(a.cmp(&b)));
    }
    let mut order = Vec::with_capacity(skeleton.len());
    let mut stack = vec![root];
    while let Some(i) = stack.pop() {
        order.push(i);
        // Push in reverse so the lexicographically smallest child pops first.
        for &c in children[i].iter().rev() {
            stack.push(c);
        }
    }
    Ok(order)
}

/// Bones as (parent, child) pairs, ordered by the child's traversal position.
pub fn bones_of(skeleton: &Skeleton) -> Result<Vec<(usize, usize)>, RigError> {
    let order = traversal_order(skeleton)?;
    Ok(order
        .into_iter()
        .filter(|&i| skeleton.parents[i] != ROOT_PARENT)
        .map(|i| (skeleton.parents[i] as usize, i))
        .collect())
}

/// Bone segments as (start, end) positions, in `bones_of` order.
pub fn bone_segments(skeleton: &Skeleton) -> Result<Vec<(Vec3, Vec3)>, RigError> {
    Ok(bones_of(skeleton)?
        .into_iter()
        .map(|(p, c)| (skeleton.joints[p], skeleton.joints[c]))
        .collect())
}
