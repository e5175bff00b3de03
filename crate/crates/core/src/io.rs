//! File formats and dataset plumbing: rig JSON, a small OBJ reader,
//! synthetic rig generation, train/test manifests, and binary parameter
//! checkpoints.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::RigError;
use crate::nn::Params;
use crate::skeleton::{
    bone_segments, bones_of, normalize_rig, point_segment_distance, validate_rig, Mesh, RigAsset,
    Skeleton, SkinWeights, Vec3, ROOT_PARENT,
};

pub const RIG_FORMAT_VERSION: u64 = 1;

pub const CATEGORIES: [&str; 8] = [
    "complex-character",
    "simple-character",
    "animal",
    "marine-creature",
    "bird",
    "insect",
    "plant",
    "other",
];

/// Round to 9 significant digits, the precision rig files are written at.
fn round9(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.8e}").parse().unwrap()
}

fn fmt_err(path: &str, msg: impl std::fmt::Display) -> RigError {
    RigError::Format(format!("{msg} at {path}"))
}

fn as_object<'a>(v: &'a Value, path: &str) -> Result<&'a Map<String, Value>, RigError> {
    v.as_object().ok_or_else(|| fmt_err(path, "expected object"))
}

fn get_field<'a>(obj: &'a Map<String, Value>, key: &str, path: &str) -> Result<&'a Value, RigError> {
    obj.get(key).ok_or_else(|| fmt_err(&format!("{path}.{key}"), "missing field"))
}

fn as_f64(v: &Value, path: &str) -> Result<f64, RigError> {
    v.as_f64().ok_or_else(|| fmt_err(path, "expected number"))
}

fn parse_vec3_array(v: &Value, path: &str) -> Result<Vec<Vec3>, RigError> {
    let arr = v.as_array().ok_or_else(|| fmt_err(path, "expected array"))?;
    let mut out = Vec::with_capacity(arr.len());
    for (i, item) in arr.iter().enumerate() {
        let path = format!("{path}[{i}]");
        let triple = item.as_array().ok_or_else(|| fmt_err(&path, "expected [x,y,z]"))?;
        if triple.len() != 3 {
            return Err(fmt_err(&path, format!("expected 3 numbers, found {}", triple.len())));
        }
        out.push(Vec3::new(
            as_f64(&triple[0], &path)?,
            as_f64(&triple[1], &path)?,
            as_f64(&triple[2], &path)?,
        ));
    }
    Ok(out)
}

/// The on-disk rig document. Unknown top-level fields survive a load/save
/// round trip in `extra`.
#[derive(Debug, Clone, PartialEq)]
pub struct RigFile {
    pub format_version: u64,
    pub asset: RigAsset,
    pub extra: Map<String, Value>,
}

const KNOWN_FIELDS: [&str; 6] = ["format_version", "category", "joints", "parents", "mesh", "skin"];

impl RigFile {
    pub fn from_asset(asset: &RigAsset) -> Self {
        RigFile { format_version: RIG_FORMAT_VERSION, asset: asset.clone(), extra: Map::new() }
    }

    pub fn from_json(doc: &Value) -> Result<Self, RigError> {
        let obj = as_object(doc, "$")?;
        let version = get_field(obj, "format_version", "$")?
            .as_u64()
            .ok_or_else(|| fmt_err("$.format_version", "expected integer"))?;
        if version != RIG_FORMAT_VERSION {
            return Err(fmt_err(
                "$.format_version",
                format!("unsupported version {version}, expected {RIG_FORMAT_VERSION}"),
            ));
        }
        let category = get_field(obj, "category", "$")?
            .as_str()
            .ok_or_else(|| fmt_err("$.category", "expected string"))?
            .to_string();
        if !CATEGORIES.contains(&category.as_str()) {
            return Err(fmt_err("$.category", format!("unknown category \"{category}\"")));
        }
        let joints = parse_vec3_array(get_field(obj, "joints", "$")?, "$.joints")?;
        let parents_val = get_field(obj, "parents", "$")?
            .as_array()
            .ok_or_else(|| fmt_err("$.parents", "expected array"))?;
        let mut parents = Vec::with_capacity(parents_val.len());
        for (i, p) in parents_val.iter().enumerate() {
            parents.push(
                p.as_i64()
                    .ok_or_else(|| fmt_err(&format!("$.parents[{i}]"), "expected integer"))?
                    as i32,
            );
        }
        let mesh_obj = as_object(get_field(obj, "mesh", "$")?, "$.mesh")?;
        let vertices = parse_vec3_array(get_field(mesh_obj, "vertices", "$.mesh")?, "$.mesh.vertices")?;
        let faces_val = get_field(mesh_obj, "faces", "$.mesh")?
            .as_array()
            .ok_or_else(|| fmt_err("$.mesh.faces", "expected array"))?;
        let mut faces = Vec::with_capacity(faces_val.len());
        for (i, f) in faces_val.iter().enumerate() {
            let path = format!("$.mesh.faces[{i}]");
            let idx = f.as_array().ok_or_else(|| fmt_err(&path, "expected [i,j,k]"))?;
            if idx.len() != 3 {
                return Err(fmt_err(&path, format!("expected 3 indices, found {}", idx.len())));
            }
            let mut tri = [0usize; 3];
            for (slot, v) in tri.iter_mut().zip(idx) {
                *slot = v.as_u64().ok_or_else(|| fmt_err(&path, "expected non-negative integer"))?
                    as usize;
            }
            faces.push(tri);
        }
        let skin = match obj.get("skin") {
            None | Some(Value::Null) => None,
            Some(v) => {
                let rows_val = v.as_array().ok_or_else(|| fmt_err("$.skin", "expected array"))?;
                let mut rows = Vec::with_capacity(rows_val.len());
                for (i, row) in rows_val.iter().enumerate() {
                    let path = format!("$.skin[{i}]");
                    let pairs = row.as_array().ok_or_else(|| fmt_err(&path, "expected array"))?;
                    let mut out = Vec::with_capacity(pairs.len());
                    for (p, pair) in pairs.iter().enumerate() {
                        let path = format!("{path}[{p}]");
                        let pair =
                            pair.as_array().ok_or_else(|| fmt_err(&path, "expected [joint, weight]"))?;
                        if pair.len() != 2 {
                            return Err(fmt_err(&path, "expected [joint, weight]"));
                        }
                        let j = pair[0]
                            .as_u64()
                            .ok_or_else(|| fmt_err(&path, "expected joint index"))?
                            as usize;
                        out.push((j, as_f64(&pair[1], &path)?));
                    }
                    rows.push(out);
                }
                Some(SkinWeights { rows, joint_count: joints.len() })
            }
        };
        let extra: Map<String, Value> = obj
            .iter()
            .filter(|(k, _)| !KNOWN_FIELDS.contains(&k.as_str()))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let asset = RigAsset {
            mesh: Mesh { vertices, faces },
            skeleton: Skeleton { joints, parents },
            skin,
            category,
        };
        Ok(RigFile { format_version: version, asset, extra })
    }

    pub fn to_json(&self) -> Value {
        let asset = &self.asset;
        let mut obj = Map::new();
        obj.insert("format_version".into(), json!(self.format_version));
        obj.insert("category".into(), json!(asset.category));
        obj.insert(
            "joints".into(),
            Value::Array(
                asset
                    .skeleton
                    .joints
                    .iter()
                    .map(|j| json!([round9(j.x), round9(j.y), round9(j.z)]))
                    .collect(),
            ),
        );
        obj.insert("parents".into(), json!(asset.skeleton.parents));
        obj.insert(
            "mesh".into(),
            json!({
                "vertices": asset
                    .mesh
                    .vertices
                    .iter()
                    .map(|v| json!([round9(v.x), round9(v.y), round9(v.z)]))
                    .collect::<Vec<_>>(),
                "faces": asset.mesh.faces,
            }),
        );
        if let Some(skin) = &asset.skin {
            obj.insert(
                "skin".into(),
                Value::Array(
                    skin.rows
                        .iter()
                        .map(|row| {
                            Value::Array(
                                row.iter().map(|&(j, w)| json!([j, round9(w)])).collect(),
                            )
                        })
                        .collect(),
                ),
            );
        }
        for (k, v) in &self.extra {
            obj.insert(k.clone(), v.clone());
        }
        Value::Object(obj)
    }
}

pub fn load_rig_file(path: impl AsRef<Path>) -> Result<RigFile, RigError> {
    let text = fs::read_to_string(path)?;
    let doc: Value = serde_json::from_str(&text)
        .map_err(|e| RigError::Format(format!("invalid JSON: {e}")))?;
    let file = RigFile::from_json(&doc)?;
    let report = validate_rig(&file.asset);
    if !report.is_empty() {
        return Err(RigError::Invalid(report));
    }
    Ok(file)
}

pub fn load_rig(path: impl AsRef<Path>) -> Result<RigAsset, RigError> {
    Ok(load_rig_file(path)?.asset)
}

pub fn save_rig_file(path: impl AsRef<Path>, file: &RigFile) -> Result<(), RigError> {
    let text = serde_json::to_string_pretty(&file.to_json())
        .map_err(|e| RigError::Format(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn save_rig(path: impl AsRef<Path>, asset: &RigAsset) -> Result<(), RigError> {
    let report = validate_rig(asset);
    if !report.is_empty() {
        return Err(RigError::Invalid(report));
    }
    save_rig_file(path, &RigFile::from_asset(asset))
}

/// Minimal OBJ reader: `v` and `f` records, 1-based and negative indices,
/// polygons fan-triangulated; everything else is ignored.
pub fn load_obj(path: impl AsRef<Path>) -> Result<Mesh, RigError> {
    let text = fs::read_to_string(path)?;
    parse_obj(&text)
}

pub fn parse_obj(text: &str) -> Result<Mesh, RigError> {
    let mut vertices: Vec<Vec3> = Vec::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let mut fields = raw.split_whitespace();
        match fields.next() {
            Some("v") => {
                let mut coords = [0.0f64; 3];
                for c in &mut coords {
                    let field = fields.next().ok_or(RigError::Parse {
                        line,
                        msg: "vertex with fewer than 3 coordinates".into(),
                    })?;
                    *c = field.parse().map_err(|_| RigError::Parse {
                        line,
                        msg: format!("invalid number \"{field}\""),
                    })?;
                }
                vertices.push(Vec3::new(coords[0], coords[1], coords[2]));
            }
            Some("f") => {
                let mut idx = Vec::new();
                for field in fields {
                    let first = field.split('/').next().unwrap_or(field);
                    let i: i64 = first.parse().map_err(|_| RigError::Parse {
                        line,
                        msg: format!("invalid face index \"{field}\""),
                    })?;
                    let resolved = if i > 0 {
                        (i - 1) as usize
                    } else if i < 0 {
                        let back = vertices.len() as i64 + i;
                        if back < 0 {
                            return Err(RigError::Parse {
                                line,
                                msg: format!("negative index {i} before enough vertices"),
                            });
                        }
                        back as usize
                    } else {
                        return Err(RigError::Parse { line, msg: "face index 0".into() });
                    };
                    if resolved >= vertices.len() {
                        return Err(RigError::Parse {
                            line,
                            msg: format!("face index {i} out of range"),
                        });
                    }
                    idx.push(resolved);
                }
                if idx.len() < 3 {
                    return Err(RigError::Parse {
                        line,
                        msg: "face with fewer than 3 vertices".into(),
                    });
                }
                for t in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[t], idx[t + 1]]);
                }
            }
            _ => {}
        }
    }
    if faces.is_empty() {
        return Err(RigError::Format("OBJ contains no faces".into()));
    }
    Ok(Mesh { vertices, faces })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Template {
    Chain,
    Quadruped,
    Biped,
    Star,
    RandomTree,
}

impl std::str::FromStr for Template {
    type Err = RigError;

    fn from_str(s: &str) -> Result<Self, RigError> {
        match s {
            "chain" => Ok(Template::Chain),
            "quadruped" => Ok(Template::Quadruped),
            "biped" => Ok(Template::Biped),
            "star" => Ok(Template::Star),
            "random-tree" => Ok(Template::RandomTree),
            other => Err(RigError::Format(format!(
                "unknown template \"{other}\"; expected chain|quadruped|biped|star|random-tree"
            ))),
        }
    }
}

impl Template {
    fn category(self) -> &'static str {
        match self {
            Template::Chain => "plant",
            Template::Quadruped => "animal",
            Template::Biped => "simple-character",
            Template::Star => "insect",
            Template::RandomTree => "other",
        }
    }
}

fn jitter(rng: &mut ChaCha8Rng, scale: f64) -> Vec3 {
    Vec3::new(
        rng.gen_range(-scale..scale),
        rng.gen_range(-scale..scale),
        rng.gen_range(-scale..scale),
    )
}

/// (joint, parent) layout for a template before jitter and count
/// adjustment. Parents always point to earlier indices.
fn template_layout(template: Template, k: usize, rng: &mut ChaCha8Rng) -> (Vec<Vec3>, Vec<i32>) {
    let mut joints: Vec<Vec3> = Vec::new();
    let mut parents: Vec<i32> = Vec::new();
    let push = |joints: &mut Vec<Vec3>, parents: &mut Vec<i32>, p: i32, at: Vec3| -> i32 {
        joints.push(at);
        parents.push(p);
        (joints.len() - 1) as i32
    };
    match template {
        Template::Chain => {
            for i in 0..k {
                let p = i as i32 - 1;
                push(&mut joints, &mut parents, p, Vec3::new(0.0, i as f64 * 0.4, 0.0));
            }
        }
        Template::Star => {
            push(&mut joints, &mut parents, ROOT_PARENT, Vec3::ZERO);
            for i in 1..k {
                let angle = std::f64::consts::TAU * (i - 1) as f64 / (k - 1).max(1) as f64;
                let elevation = 0.3 * ((i % 3) as f64 - 1.0);
                push(
                    &mut joints,
                    &mut parents,
                    0,
                    Vec3::new(angle.cos(), elevation, angle.sin()),
                );
            }
        }
        Template::Biped => {
            let pelvis = push(&mut joints, &mut parents, ROOT_PARENT, Vec3::new(0.0, 1.0, 0.0));
            let chest = push(&mut joints, &mut parents, pelvis, Vec3::new(0.0, 1.5, 0.0));
            push(&mut joints, &mut parents, chest, Vec3::new(0.0, 1.9, 0.0));
            for side in [-1.0, 1.0] {
                let hip = push(&mut joints, &mut parents, pelvis, Vec3::new(0.25 * side, 0.5, 0.0));
                push(&mut joints, &mut parents, hip, Vec3::new(0.25 * side, 0.0, 0.0));
                let arm = push(&mut joints, &mut parents, chest, Vec3::new(0.55 * side, 1.5, 0.0));
                push(&mut joints, &mut parents, arm, Vec3::new(0.85 * side, 1.1, 0.0));
            }
        }
        Template::Quadruped => {
            let hips = push(&mut joints, &mut parents, ROOT_PARENT, Vec3::new(-0.5, 0.6, 0.0));
            let shoulders = push(&mut joints, &mut parents, hips, Vec3::new(0.5, 0.6, 0.0));
            push(&mut joints, &mut parents, shoulders, Vec3::new(0.9, 0.9, 0.0));
            push(&mut joints, &mut parents, hips, Vec3::new(-0.9, 0.8, 0.0));
            for side in [-1.0, 1.0] {
                push(&mut joints, &mut parents, hips, Vec3::new(-0.5, 0.0, 0.3 * side));
                push(&mut joints, &mut parents, shoulders, Vec3::new(0.5, 0.0, 0.3 * side));
            }
        }
        Template::RandomTree => {
            push(&mut joints, &mut parents, ROOT_PARENT, Vec3::ZERO);
            for _ in 1..k {
                let p = rng.gen_range(0..joints.len());
                let dir = loop {
                    let d = jitter(rng, 1.0);
                    if d.norm() > 1e-3 {
                        break d.scale(1.0 / d.norm());
                    }
                };
                let at = joints[p].add(dir.scale(rng.gen_range(0.25..0.5)));
                push(&mut joints, &mut parents, p as i32, at);
            }
        }
    }
    (joints, parents)
}

/// Occupancy-shell mesh around the bone capsules: boundary faces of the
/// solid voxels, which is watertight by construction.
fn capsule_shell_mesh(segments: &[(Vec3, Vec3)], radius: f64, resolution: usize) -> Mesh {
    let mut lo = Vec3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
    let mut hi = Vec3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &(a, b) in segments {
        for p in [a, b] {
            lo = Vec3::new(lo.x.min(p.x), lo.y.min(p.y), lo.z.min(p.z));
            hi = Vec3::new(hi.x.max(p.x), hi.y.max(p.y), hi.z.max(p.z));
        }
    }
    let pad = radius * 1.6;
    lo = lo.sub(Vec3::new(pad, pad, pad));
    hi = hi.add(Vec3::new(pad, pad, pad));
    let extent = hi.sub(lo);
    let max_extent = extent.x.max(extent.y).max(extent.z);
    let cell = max_extent / resolution as f64;
    let dims = [
        (extent.x / cell).ceil() as usize + 1,
        (extent.y / cell).ceil() as usize + 1,
        (extent.z / cell).ceil() as usize + 1,
    ];
    let solid_at = |ix: i64, iy: i64, iz: i64| -> bool {
        if ix < 0 || iy < 0 || iz < 0 {
            return false;
        }
        let (ix, iy, iz) = (ix as usize, iy as usize, iz as usize);
        if ix >= dims[0] || iy >= dims[1] || iz >= dims[2] {
            return false;
        }
        let c = Vec3::new(
            lo.x + (ix as f64 + 0.5) * cell,
            lo.y + (iy as f64 + 0.5) * cell,
            lo.z + (iz as f64 + 0.5) * cell,
        );
        segments.iter().any(|&(a, b)| point_segment_distance(c, a, b) <= radius)
    };
    let mut corner_ids: HashMap<(usize, usize, usize), usize> = HashMap::new();
    let mut vertices: Vec<Vec3> = Vec::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();
    let mut corner = |key: (usize, usize, usize), vertices: &mut Vec<Vec3>| -> usize {
        *corner_ids.entry(key).or_insert_with(|| {
            vertices.push(Vec3::new(
                lo.x + key.0 as f64 * cell,
                lo.y + key.1 as f64 * cell,
                lo.z + key.2 as f64 * cell,
            ));
            vertices.len() - 1
        })
    };
    // for each axis-aligned face direction: neighbor offset and the four
    // corner offsets in counter-clockwise order seen from outside
    #[rustfmt::skip]
    const FACES: [([i64; 3], [[usize; 3]; 4]); 6] = [
        ([ 1, 0, 0], [[1, 0, 0], [1, 1, 0], [1, 1, 1], [1, 0, 1]]),
        ([-1, 0, 0], [[0, 0, 0], [0, 0, 1], [0, 1, 1], [0, 1, 0]]),
        ([0,  1, 0], [[0, 1, 0], [0, 1, 1], [1, 1, 1], [1, 1, 0]]),
        ([0, -1, 0], [[0, 0, 0], [1, 0, 0], [1, 0, 1], [0, 0, 1]]),
        ([0, 0,  1], [[0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]]),
        ([0, 0, -1], [[0, 0, 0], [0, 1, 0], [1, 1, 0], [1, 0, 0]]),
    ];
    for ix in 0..dims[0] {
        for iy in 0..dims[1] {
            for iz in 0..dims[2] {
                if !solid_at(ix as i64, iy as i64, iz as i64) {
                    continue;
                }
                for (offset, corners) in &FACES {
                    if solid_at(ix as i64 + offset[0], iy as i64 + offset[1], iz as i64 + offset[2]) {
                        continue;
                    }
                    let ids: Vec<usize> = corners
                        .iter()
                        .map(|c| corner((ix + c[0], iy + c[1], iz + c[2]), &mut vertices))
                        .collect();
                    faces.push([ids[0], ids[1], ids[2]]);
                    faces.push([ids[0], ids[2], ids[3]]);
                }
            }
        }
    }
    Mesh { vertices, faces }
}

/// Inverse-squared distance to the nearest bones, top-4 influences,
/// rows normalized; weight lands on each bone's child joint.
fn nearest_bone_skin(mesh: &Mesh, skeleton: &Skeleton) -> Result<SkinWeights, RigError> {
    let bones = bones_of(skeleton)?;
    let segments = bone_segments(skeleton)?;
    let rows = mesh
        .vertices
        .iter()
        .map(|&v| {
            let mut scored: Vec<(usize, f64)> = bones
                .iter()
                .zip(&segments)
                .map(|(&(_, child), &(a, b))| {
                    let d = point_segment_distance(v, a, b);
                    (child, 1.0 / (d + 1e-4).powi(2))
                })
                .collect();
            scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            scored.truncate(4);
            scored.sort_by_key(|&(j, _)| j);
            let total: f64 = scored.iter().map(|(_, w)| w).sum();
            scored.into_iter().map(|(j, w)| (j, w / total)).collect()
        })
        .collect();
    Ok(SkinWeights { rows, joint_count: skeleton.len() })
}

/// Deterministic synthetic rig: template skeleton with jitter, a voxel
/// tube mesh around the bones, and nearest-bone skin weights. The result
/// is normalized and passes validation.
pub fn synth_rig(seed: u64, k: usize, template: Template) -> Result<RigAsset, RigError> {
    if !(2..=crate::skeleton::MAX_JOINTS).contains(&k) {
        return Err(RigError::Range(format!("k={k} outside 2..={}", crate::skeleton::MAX_JOINTS)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut joints, mut parents) = template_layout(template, k, &mut rng);
    joints.truncate(k);
    parents.truncate(k);
    // grow past the template by extending leaves along their bone direction
    while joints.len() < k {
        let n = joints.len();
        let is_parent: Vec<bool> = {
            let mut f = vec![false; n];
            for &p in &parents {
                if p >= 0 {
                    f[p as usize] = true;
                }
            }
            f
        };
        let leaf = (0..n).rev().find(|&i| !is_parent[i]).unwrap_or(n - 1);
        let dir = if parents[leaf] >= 0 {
            let d = joints[leaf].sub(joints[parents[leaf] as usize]);
            if d.norm() > 1e-9 {
                d.scale(1.0 / d.norm())
            } else {
                Vec3::new(0.0, 1.0, 0.0)
            }
        } else {
            Vec3::new(0.0, 1.0, 0.0)
        };
        joints.push(joints[leaf].add(dir.scale(0.3)).add(jitter(&mut rng, 0.1)));
        parents.push(leaf as i32);
    }
    for (i, j) in joints.iter_mut().enumerate() {
        if i > 0 {
            *j = j.add(jitter(&mut rng, 0.04));
        }
    }
    let skeleton = Skeleton { joints, parents };
    let segments = bone_segments(&skeleton)?;
    let span = segments
        .iter()
        .map(|&(a, b)| a.dist(b))
        .fold(0.0f64, f64::max);
    let radius = (span * 0.35).max(0.1);
    let mesh = capsule_shell_mesh(&segments, radius, 20);
    let skin = nearest_bone_skin(&mesh, &skeleton)?;
    let asset = RigAsset {
        mesh,
        skeleton,
        skin: Some(skin),
        category: template.category().to_string(),
    };
    let (normalized, _) = normalize_rig(&asset)?;
    let report = validate_rig(&normalized);
    if !report.is_empty() {
        return Err(RigError::Invalid(report));
    }
    Ok(normalized)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub split: String,
    pub category: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), RigError> {
        let text = serde_json::to_string_pretty(&self.entries)
            .map_err(|e| RigError::Format(e.to_string()))?;
        fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RigError> {
        let text = fs::read_to_string(path)?;
        let entries: Vec<ManifestEntry> = serde_json::from_str(&text)
            .map_err(|e| RigError::Format(format!("invalid manifest: {e}")))?;
        for e in &entries {
            if e.split != "train" && e.split != "test" {
                return Err(RigError::Format(format!("invalid split \"{}\"", e.split)));
            }
        }
        Ok(DatasetManifest { entries })
    }
}

/// Split per category at `ratio`:1 train:test (seeded shuffle). Categories
/// with fewer than 2 assets go entirely to train and are reported back as
/// warnings.
pub fn make_splits(
    assets: &[(String, String)],
    ratio: usize,
    seed: u64,
) -> (DatasetManifest, Vec<String>) {
    let mut by_category: Vec<(String, Vec<usize>)> = Vec::new();
    for (i, (_, cat)) in assets.iter().enumerate() {
        match by_category.iter_mut().find(|(c, _)| c == cat) {
            Some((_, v)) => v.push(i),
            None => by_category.push((cat.clone(), vec![i])),
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut warnings = Vec::new();
    let mut splits = vec!["train"; assets.len()];
    for (cat, mut ids) in by_category {
        if ids.len() < 2 {
            warnings.push(format!("category \"{cat}\" has {} asset(s); all assigned to train", ids.len()));
            continue;
        }
        // Fisher-Yates
        for i in (1..ids.len()).rev() {
            let j = rng.gen_range(0..=i);
            ids.swap(i, j);
        }
        let n_test = (ids.len() / (ratio + 1)).max(1);
        for &i in ids.iter().take(n_test) {
            splits[i] = "test";
        }
    }
    let entries = assets
        .iter()
        .zip(&splits)
        .map(|((path, cat), split)| ManifestEntry {
            path: path.clone(),
            split: split.to_string(),
            category: cat.clone(),
        })
        .collect();
    (DatasetManifest { entries }, warnings)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"RIGCKPT1";

/// Versioned binary checkpoint: magic, config JSON, then named f64
/// little-endian parameter matrices with explicit shapes.
pub fn save_checkpoint(path: impl AsRef<Path>, config: &Value, params: &Params) -> Result<(), RigError> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let config_bytes = serde_json::to_vec(config).map_err(|e| RigError::Format(e.to_string()))?;
    out.extend_from_slice(&(config_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&config_bytes);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, value) in params {
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.extend_from_slice(&(value.nrows() as u32).to_le_bytes());
        out.extend_from_slice(&(value.ncols() as u32).to_le_bytes());
        for &x in value.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Value, Params), RigError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut at = 0usize;
    let take = |at: &mut usize, n: usize| -> Result<&[u8], RigError> {
        if *at + n > bytes.len() {
            return Err(RigError::Format("truncated checkpoint".into()));
        }
        let s = &bytes[*at..*at + n];
        *at += n;
        Ok(s)
    };
    let read_u32 = |at: &mut usize| -> Result<u32, RigError> {
        Ok(u32::from_le_bytes(take(at, 4)?.try_into().unwrap()))
    };
    if take(&mut at, 8)? != CHECKPOINT_MAGIC {
        return Err(RigError::Format("not a checkpoint file (bad magic)".into()));
    }
    let config_len = read_u32(&mut at)? as usize;
    let config: Value = serde_json::from_slice(take(&mut at, config_len)?)
        .map_err(|e| RigError::Format(format!("invalid checkpoint config: {e}")))?;
    let n_params = read_u32(&mut at)? as usize;
    let mut params = Params::new();
    for _ in 0..n_params {
        let name_len = read_u32(&mut at)? as usize;
        let name = String::from_utf8(take(&mut at, name_len)?.to_vec())
            .map_err(|_| RigError::Format("invalid parameter name".into()))?;
        let rows = read_u32(&mut at)? as usize;
        let cols = read_u32(&mut at)? as usize;
        let data = take(&mut at, rows * cols * 8)?;
        let values: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let matrix = Array2::from_shape_vec((rows, cols), values)
            .map_err(|e| RigError::Dimension(e.to_string()))?;
        params.insert(name, matrix);
    }
    if at != bytes.len() {
        return Err(RigError::Format("trailing bytes in checkpoint".into()));
    }
    Ok((config, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn obj_parses_vertices_and_triangles() {
        let mesh = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n").unwrap();
        assert_eq!(mesh.vertices.len(), 3);
        assert_eq!(mesh.faces, vec![[0, 1, 2]]);
    }

    #[test]
    fn obj_fan_triangulates_quads() {
        let mesh = parse_obj("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n").unwrap();
        assert_eq!(mesh.faces, vec![[0, 1, 2], [0, 2, 3]]);
    }

    #[test]
    fn obj_rejects_short_faces_with_line_number() {
        let err = parse_obj("v 0 0 0\nv 1 0 0\nf 1 2\n").unwrap_err();
        match err {
            RigError::Parse { line, msg } => {
                assert_eq!(line, 3);
                assert!(msg.contains("fewer than 3"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn obj_supports_negative_indices_and_attrs() {
        let mesh = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nvn 0 0 1\nf -3/1 -2/1 -1/1\n").unwrap();
        assert_eq!(mesh.faces, vec![[0, 1, 2]]);
        assert!(parse_obj("v 0 0 0\n").is_err());
        let err = parse_obj("v 0 zero 0\nf 1 1 1\n").unwrap_err();
        match err {
            RigError::Parse { line, .. } => assert_eq!(line, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn synth_rig_is_deterministic_and_valid() {
        for template in [
            Template::Chain,
            Template::Quadruped,
            Template::Biped,
            Template::Star,
            Template::RandomTree,
        ] {
            let a = synth_rig(7, 9, template).unwrap();
            let b = synth_rig(7, 9, template).unwrap();
            assert_eq!(a, b);
            assert!(validate_rig(&a).is_empty(), "{template:?}");
            assert_eq!(a.skeleton.len(), 9);
        }
        assert!(synth_rig(0, 1, Template::Chain).is_err());
        assert!(synth_rig(0, 101, Template::Chain).is_err());
    }

    #[test]
    fn synth_chain_argmax_weight_is_nearest_bone() {
        let rig = synth_rig(3, 4, Template::Chain).unwrap();
        let skin = rig.skin.as_ref().unwrap();
        let segments = bone_segments(&rig.skeleton).unwrap();
        let bones = bones_of(&rig.skeleton).unwrap();
        for (v, row) in rig.mesh.vertices.iter().zip(&skin.rows) {
            let argmax = row
                .iter()
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap()
                .0;
            let nearest = bones
                .iter()
                .zip(&segments)
                .min_by(|(_, &(a1, b1)), (_, &(a2, b2))| {
                    point_segment_distance(*v, a1, b1)
                        .partial_cmp(&point_segment_distance(*v, a2, b2))
                        .unwrap()
                })
                .unwrap()
                .0
                 .1;
            assert_eq!(argmax, nearest);
        }
    }

    #[test]
    fn rig_round_trip_is_field_identical() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.rig.json");
        let asset = synth_rig(11, 6, Template::Biped).unwrap();
        save_rig(&path, &asset).unwrap();
        let loaded = load_rig(&path).unwrap();
        save_rig(dir.path().join("b.rig.json"), &loaded).unwrap();
        let a = fs::read_to_string(&path).unwrap();
        let b = fs::read_to_string(dir.path().join("b.rig.json")).unwrap();
        assert_eq!(a, b);
        assert_eq!(loaded.skeleton.parents, asset.skeleton.parents);
        assert_eq!(loaded.category, asset.category);
    }

    #[test]
    fn rig_load_errors_name_json_paths() {
        let asset = synth_rig(1, 4, Template::Chain).unwrap();
        let mut doc = RigFile::from_asset(&asset).to_json();
        doc.as_object_mut().unwrap().remove("parents");
        let err = RigFile::from_json(&doc).unwrap_err();
        assert!(err.to_string().contains("$.parents"), "{err}");

        let mut doc = RigFile::from_asset(&asset).to_json();
        doc["format_version"] = json!(999);
        let err = RigFile::from_json(&doc).unwrap_err();
        assert!(err.to_string().contains("unsupported version"), "{err}");
    }

    #[test]
    fn rig_unknown_fields_survive_round_trip() {
        let asset = synth_rig(2, 4, Template::Chain).unwrap();
        let mut doc = RigFile::from_asset(&asset).to_json();
        doc.as_object_mut().unwrap().insert("annotator".into(), json!("alice"));
        let file = RigFile::from_json(&doc).unwrap();
        let out = file.to_json();
        assert_eq!(out["annotator"], json!("alice"));
    }

    #[test]
    fn splits_honor_ratio_per_category() {
        let mut assets = Vec::new();
        for i in 0..21 {
            assets.push((format!("a{i}.json"), "animal".to_string()));
        }
        assets.push(("lone.json".to_string(), "plant".to_string()));
        let (manifest, warnings) = make_splits(&assets, 20, 5);
        let animal_test = manifest
            .entries
            .iter()
            .filter(|e| e.category == "animal" && e.split == "test")
            .count();
        assert_eq!(animal_test, 1);
        let plant = manifest.entries.iter().find(|e| e.category == "plant").unwrap();
        assert_eq!(plant.split, "train");
        assert_eq!(warnings.len(), 1);
        let (again, _) = make_splits(&assets, 20, 5);
        assert_eq!(manifest, again);
    }

    #[test]
    fn checkpoint_round_trip_is_byte_exact() {
        let dir = tempdir().unwrap();
        let path_a = dir.path().join("a.ckpt");
        let path_b = dir.path().join("b.ckpt");
        let mut params = Params::new();
        params.insert("w.a".into(), Array2::from_shape_fn((3, 2), |(i, j)| i as f64 - 0.3 * j as f64));
        params.insert("w.b".into(), Array2::from_elem((1, 4), std::f64::consts::PI));
        let config = json!({"width": 8, "kind": "test"});
        save_checkpoint(&path_a, &config, &params).unwrap();
        let (config2, params2) = load_checkpoint(&path_a).unwrap();
        assert_eq!(config, config2);
        assert_eq!(params, params2);
        save_checkpoint(&path_b, &config2, &params2).unwrap();
        assert_eq!(fs::read(&path_a).unwrap(), fs::read(&path_b).unwrap());
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
