//! Forward kinematics, linear blend skinning, and online pose augmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::RigError;
use crate::skeleton::{normalize_rig, validate_skeleton, Mesh, RigAsset, Skeleton, SkinWeights, Vec3};

/// Unit quaternion (w, x, y, z).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quat {
    pub const IDENTITY: Quat = Quat { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Quat {
        let n = axis.norm();
        if n == 0.0 || angle == 0.0 {
            return Quat::IDENTITY;
        }
        let half = angle * 0.5;
        let s = half.sin() / n;
        Quat { w: half.cos(), x: axis.x * s, y: axis.y * s, z: axis.z * s }
    }

    pub fn norm(self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(self) -> Quat {
        let n = self.norm();
        Quat { w: self.w / n, x: self.x / n, y: self.y / n, z: self.z / n }
    }

    pub fn mul(self, o: Quat) -> Quat {
        Quat {
            w: self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            x: self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            y: self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            z: self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        }
    }

    pub fn rotate(self, v: Vec3) -> Vec3 {
        // v' = v + 2 q_v x (q_v x v + w v)
        let qv = Vec3::new(self.x, self.y, self.z);
        let t = qv.cross(v).scale(2.0);
        v.add(t.scale(self.w)).add(qv.cross(t))
    }
}

/// Rigid transform: rotation then translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointTransform {
    pub rotation: Quat,
    pub translation: Vec3,
}

impl JointTransform {
    pub const IDENTITY: JointTransform = JointTransform { rotation: Quat::IDENTITY, translation: Vec3::ZERO };

    pub fn apply(&self, v: Vec3) -> Vec3 {
        self.rotation.rotate(v).add(self.translation)
    }

    /// Rotation about a fixed pivot point.
    pub fn about_point(rotation: Quat, pivot: Vec3) -> JointTransform {
        let translation = pivot.sub(rotation.rotate(pivot));
        JointTransform { rotation, translation }
    }

    /// self after other: (self ∘ other)(v) = self(other(v)).
    pub fn compose(&self, other: &JointTransform) -> JointTransform {
        JointTransform {
            rotation: self.rotation.mul(other.rotation),
            translation: self.rotation.rotate(other.translation).add(self.translation),
        }
    }
}

/// Per-joint local rotations, one unit quaternion per joint.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub rotations: Vec<Quat>,
}

impl Pose {
    pub fn identity(k: usize) -> Pose {
        Pose { rotations: vec![Quat::IDENTITY; k] }
    }
}

/// Compose local rotations down the tree. Each joint's local rotation
/// pivots about its own rest position; joint i's new position is its
/// parent's world transform applied to its rest position (root fixed).
pub fn forward_kinematics(
    skeleton: &Skeleton,
    pose: &Pose,
) -> Result<(Vec<Vec3>, Vec<JointTransform>), RigError> {
    let k = skeleton.len();
    if pose.rotations.len() != k {
        return Err(RigError::Dimension(format!(
            "pose has {} rotations for {k} joints",
            pose.rotations.len()
        )));
    }
    let report = validate_skeleton(skeleton);
    if !report.is_empty() {
        return Err(RigError::Invalid(report));
    }
    for (i, q) in pose.rotations.iter().enumerate() {
        if (q.norm() - 1.0).abs() > 1e-9 {
            return Err(RigError::Range(format!("pose rotation {i} is not unit-norm")));
        }
    }
    let root = skeleton.root().expect("validated");
    let mut world = vec![JointTransform::IDENTITY; k];
    let mut new_joints = skeleton.joints.clone();
    // process parents before children
    let mut order = vec![root];
    let children = skeleton.children();
    let mut idx = 0;
    while idx < order.len() {
        let i = order[idx];
        idx += 1;
        let local = JointTransform::about_point(pose.rotations[i], skeleton.joints[i]);
        if i == root {
            world[i] = local;
        } else {
            let p = skeleton.parents[i] as usize;
            world[i] = world[p].compose(&local);
            new_joints[i] = world[p].apply(skeleton.joints[i]);
        }
        order.extend(children[i].iter().copied());
    }
    Ok((new_joints, world))
}

/// v' = sum_j w_vj * T_j(v); faces unchanged.
pub fn linear_blend_skinning(
    mesh: &Mesh,
    skin: &SkinWeights,
    transforms: &[JointTransform],
) -> Result<Mesh, RigError> {
    if skin.rows.len() != mesh.vertices.len() {
        return Err(RigError::Dimension(format!(
            "{} skin rows for {} vertices",
            skin.rows.len(),
            mesh.vertices.len()
        )));
    }
    if transforms.len() != skin.joint_count {
        return Err(RigError::Dimension(format!(
            "{} transforms for {} joints",
            transforms.len(),
            skin.joint_count
        )));
    }
    let vertices = mesh
        .vertices
        .iter()
        .zip(&skin.rows)
        .map(|(&v, row)| {
            let mut out = Vec3::ZERO;
            for &(j, w) in row {
                out = out.add(transforms[j].apply(v).scale(w));
            }
            out
        })
        .collect();
    Ok(Mesh { vertices, faces: mesh.faces.clone() })
}

/// Rejection-sampled uniform direction on the unit sphere.
fn sample_unit_vector(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.gen_range(-1.0..=1.0),
            rng.gen_range(-1.0..=1.0),
            rng.gen_range(-1.0..=1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v.scale(1.0 / n);
        }
    }
}

/// Uniformly random unit axis, angle uniform in [0, max_angle_rad].
fn random_rotation(rng: &mut ChaCha8Rng, max_angle_rad: f64) -> Quat {
    let axis = sample_unit_vector(rng);
    let angle = rng.gen_range(0.0..=max_angle_rad);
    Quat::from_axis_angle(axis, angle)
}

/// Randomly pose the skeleton (rotations only, so bone lengths and
/// connectivity are preserved), deform the mesh with the ground-truth
/// skin weights, and renormalize into [-1, 1]. Deterministic per seed.
pub fn augment_pose(asset: &RigAsset, seed: u64, max_angle_deg: f64) -> Result<RigAsset, RigError> {
    let skin = asset
        .skin
        .as_ref()
        .ok_or_else(|| RigError::Degenerate("augmentation requires skinning".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_rad = max_angle_deg.to_radians();
    let k = asset.skeleton.len();
    let rotations: Vec<Quat> = (0..k)
        .map(|_| {
            if max_rad == 0.0 {
                Quat::IDENTITY
            } else {
                random_rotation(&mut rng, max_rad)
            }
        })
        .collect();
    let pose = Pose { rotations };
    let (new_joints, world) = forward_kinematics(&asset.skeleton, &pose)?;
    let mesh = linear_blend_skinning(&asset.mesh, skin, &world)?;
    let posed = RigAsset {
        mesh,
        skeleton: Skeleton::new(new_joints, asset.skeleton.parents.clone()),
        skin: asset.skin.clone(),
        category: asset.category.clone(),
    };
    let (normalized, _) = normalize_rig(&posed)?;
    Ok(normalized)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::{validate_rig, ROOT_PARENT};

    fn chain3() -> Skeleton {
        Skeleton::new(
            vec![Vec3::ZERO, Vec3::new(1.0, 0.0, 0.0), Vec3::new(2.0, 0.0, 0.0)],
            vec![ROOT_PARENT, 0, 1],
        )
    }

    #[test]
    fn fk_identity() {
        let s = chain3();
        let (joints, world) = forward_kinematics(&s, &Pose::identity(3)).unwrap();
        assert_eq!(joints, s.joints);
        for t in world {
            assert!(t.apply(Vec3::new(0.3, 0.7, -0.2)).dist(Vec3::new(0.3, 0.7, -0.2)) < 1e-12);
        }
    }

    #[test]
    fn fk_root_rotation() {
        let s = Skeleton::new(vec![Vec3::ZERO, Vec3::new(1.0, 0.0, 0.0)], vec![ROOT_PARENT, 0]);
        let rot = Quat::from_axis_angle(Vec3::new(0.0, 0.0, 1.0), std::f64::consts::FRAC_PI_2);
        let pose = Pose { rotations: vec![rot, Quat::IDENTITY] };
        let (joints, _) = forward_kinematics(&s, &pose).unwrap();
        assert!(joints[1].dist(Vec3::new(0.0, 1.0, 0.0)) < 1e-12);
    }

    #[test]
    fn fk_two_link_bend() {
        let s = chain3();
        let rot = Quat::from_axis_angle(Vec3::new(0.0, 0.0, 1.0), std::f64::consts::FRAC_PI_2);
        let pose = Pose { rotations: vec![rot, rot, Quat::IDENTITY] };
        let (joints, _) = forward_kinematics(&s, &pose).unwrap();
        assert!(joints[2].dist(Vec3::new(-1.0, 1.0, 0.0)) < 1e-12, "tip at {:?}", joints[2]);
    }

    #[test]
    fn fk_preserves_bone_lengths() {
        let s = chain3();
        let rot = Quat::from_axis_angle(Vec3::new(0.3, 1.0, -0.5), 0.7).normalized();
        let pose = Pose { rotations: vec![rot, rot, rot] };
        let (joints, _) = forward_kinematics(&s, &pose).unwrap();
        for i in 1..3 {
            let rest = s.joints[i].dist(s.joints[i - 1]);
            let posed = joints[i].dist(joints[i - 1]);
            assert!((rest - posed).abs() < 1e-12);
        }
    }

    fn quad_mesh() -> Mesh {
        Mesh {
            vertices: vec![
                Vec3::ZERO,
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(0.0, 1.0, 0.0),
                Vec3::new(1.0, 1.0, 0.0),
            ],
            faces: vec![[0, 1, 2], [1, 3, 2]],
        }
    }

    #[test]
    fn lbs_identity_and_rigid() {
        let mesh = quad_mesh();
        let skin = SkinWeights {
            rows: vec![vec![(0, 1.0)], vec![(0, 0.5), (1, 0.5)], vec![(1, 1.0)], vec![(0, 0.3), (1, 0.7)]],
            joint_count: 2,
        };
        let out = linear_blend_skinning(&mesh, &skin, &[JointTransform::IDENTITY; 2]).unwrap();
        assert_eq!(out, mesh);

        let t = JointTransform {
            rotation: Quat::from_axis_angle(Vec3::new(0.0, 1.0, 0.0), 0.4),
            translation: Vec3::new(0.1, -0.2, 0.5),
        };
        let rigid = linear_blend_skinning(&mesh, &skin, &[t, t]).unwrap();
        for (v, out) in mesh.vertices.iter().zip(&rigid.vertices) {
            assert!(t.apply(*v).dist(*out) < 1e-12);
        }
    }

    #[test]
    fn lbs_blend_half_translation() {
        let mesh = quad_mesh();
        let skin = SkinWeights {
            rows: vec![vec![(0, 0.5), (1, 0.5)]; 4],
            joint_count: 2,
        };
        let shift = JointTransform { rotation: Quat::IDENTITY, translation: Vec3::new(1.0, 0.0, 0.0) };
        let out = linear_blend_skinning(&mesh, &skin, &[JointTransform::IDENTITY, shift]).unwrap();
        for (v, o) in mesh.vertices.iter().zip(&out.vertices) {
            assert!(o.dist(v.add(Vec3::new(0.5, 0.0, 0.0))) < 1e-12);
        }
    }

    fn skinned_asset() -> RigAsset {
        let mesh = Mesh {
            vertices: vec![
                Vec3::new(-1.0, -0.2, -0.2),
                Vec3::new(1.0, -0.2, 0.2),
                Vec3::new(0.0, 0.4, 0.0),
                Vec3::new(0.0, -0.4, 0.3),
            ],
            faces: vec![[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]],
        };
        let skeleton = Skeleton::new(
            vec![Vec3::new(-0.5, 0.0, 0.0), Vec3::new(0.5, 0.0, 0.0)],
            vec![ROOT_PARENT, 0],
        );
        let skin = SkinWeights {
            rows: vec![vec![(0, 1.0)], vec![(1, 1.0)], vec![(0, 0.5), (1, 0.5)], vec![(0, 0.8), (1, 0.2)]],
            joint_count: 2,
        };
        RigAsset { mesh, skeleton, skin: Some(skin), category: "other".into() }
    }

    #[test]
    fn augment_zero_angle_is_renormalization_identity() {
        let asset = skinned_asset();
        let (norm, _) = normalize_rig(&asset).unwrap();
        let out = augment_pose(&norm, 7, 0.0).unwrap();
        for (a, b) in norm.mesh.vertices.iter().zip(&out.mesh.vertices) {
            assert!(a.dist(*b) < 1e-12);
        }
    }

    #[test]
    fn augment_deterministic_and_valid() {
        let asset = skinned_asset();
        let a = augment_pose(&asset, 42, 30.0).unwrap();
        let b = augment_pose(&asset, 42, 30.0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.skeleton.parents, asset.skeleton.parents);
        assert!(validate_rig(&a).is_empty());
        for v in &a.mesh.vertices {
            assert!(v.x.abs() <= 1.0 + 1e-9 && v.y.abs() <= 1.0 + 1e-9 && v.z.abs() <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn augment_requires_skin() {
        let mut asset = skinned_asset();
        asset.skin = None;
        assert!(augment_pose(&asset, 1, 30.0).is_err());
    }
}
